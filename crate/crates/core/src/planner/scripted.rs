use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::{parse_planner_turn, Planner, PlannerAction, PlannerTurn};
use crate::chat::ChatMessage;
use crate::error::{Error, Result};

/// Replays a fixed sequence of assistant turns.
#[derive(Debug, Clone)]
pub struct ScriptedPlanner {
    turns: Vec<String>,
    next: usize,
}

impl ScriptedPlanner {
    /// The script must start with a plan and end with a stop.
    pub fn new(actions: Vec<PlannerAction>) -> Result<Self> {
        match (actions.first(), actions.last()) {
            (Some(PlannerAction::Plan(_)), Some(PlannerAction::Stop)) => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "script must begin with a plan and end with a stop".into(),
                ))
            }
        }
        Ok(Self::from_raw(actions.iter().map(PlannerAction::serialize).collect()))
    }

    /// Raw assistant texts, parsed lazily as they are requested. Malformed
    /// entries surface as planner errors at their turn.
    pub fn from_raw(turns: Vec<String>) -> Self {
        Self { turns, next: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.next
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }
}

impl Planner for ScriptedPlanner {
    fn next_action(&mut self, _transcript: &[ChatMessage], turn_index: usize) -> Result<PlannerTurn> {
        let raw = self
            .turns
            .get(self.next)
            .cloned()
            .ok_or_else(|| Error::Protocol(format!("script exhausted after {} turns", self.next)))?;
        self.next += 1;
        match parse_planner_turn(&raw, turn_index) {
            Ok(action) => Ok(PlannerTurn { raw, action }),
            Err(e) => Err(Error::PlannerReply {
                attempts: 1,
                message: e.to_string(),
                raw,
            }),
        }
    }
}

#[derive(Deserialize)]
struct ScriptLine {
    query_id: String,
    turns: Vec<String>,
}

/// Reads a JSONL file of `{"query_id": ..., "turns": [raw assistant texts]}`.
pub fn load_scripts(path: impl AsRef<Path>) -> Result<HashMap<String, Vec<String>>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ScriptLine = serde_json::from_str(line).map_err(|e| {
            Error::Config(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.insert(parsed.query_id, parsed.turns);
    }
    Ok(out)
}

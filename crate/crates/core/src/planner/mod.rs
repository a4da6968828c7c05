//! Planner turn grammar and planner implementations.
//!
//! The first assistant turn is a plan:
//!
//! ```text
//! <task_breakdown>
//! ...free text...
//! </task_breakdown>
//! <sub_goals>
//! ["first sub-goal", "second sub-goal"]
//! </sub_goals>
//! ```
//!
//! Every later turn is either the bare `<stop_retrieval>` tag or a search
//! query. A query may carry a leading `<sub_goal>...</sub_goal>` label and may
//! be wrapped in `<query>...</query>`; both forms normalize to
//! [`PlannerAction::Query`].

mod remote;
mod scripted;

use serde::{Deserialize, Serialize};

use crate::chat::ChatMessage;
use crate::corpus::{RenderStyle, ToolCorpus};
use crate::error::{Error, Result};
use crate::retriever::RetrievalRun;

pub use remote::{remote_next_action, RemotePlanner};
pub use scripted::{load_scripts, ScriptedPlanner};

pub const TASK_BREAKDOWN_OPEN: &str = "<task_breakdown>";
pub const TASK_BREAKDOWN_CLOSE: &str = "</task_breakdown>";
pub const SUB_GOALS_OPEN: &str = "<sub_goals>";
pub const SUB_GOALS_CLOSE: &str = "</sub_goals>";
pub const SUB_GOAL_OPEN: &str = "<sub_goal>";
pub const SUB_GOAL_CLOSE: &str = "</sub_goal>";
pub const QUERY_OPEN: &str = "<query>";
pub const QUERY_CLOSE: &str = "</query>";
pub const STOP_TAG: &str = "<stop_retrieval>";

pub const FEEDBACK_HEADER: &str = "System retrieved tools for previous query:";
pub const BEGIN_RETRIEVAL: &str = "Begin retrieval.";

/// Default system prompt for planner transcripts.
pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a multi-turn tool retrieval planner. \
You turn a user's request into a plan and then search a tool library until every part of the plan is covered.\n\n\
On each turn, output exactly one of the following:\n\
- On the first turn, the plan: a <task_breakdown> block, then on the next line a <sub_goals> block holding a JSON list of sub-goal strings.\n\
- On later turns, one functional search query for the next sub-goal, inside a <query> block.\n\
- Once tools have been found for all sub-goals, the <stop_retrieval> tag and nothing else.";

pub fn user_query_message(user_query: &str) -> String {
    format!("User query: {user_query}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub breakdown: String,
    pub sub_goals: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlannerAction {
    Plan(Plan),
    Query {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sub_goal_tag: Option<String>,
        text: String,
    },
    Stop,
}

impl PlannerAction {
    pub fn query(text: impl Into<String>) -> Self {
        PlannerAction::Query {
            sub_goal_tag: None,
            text: text.into(),
        }
    }

    pub fn plan(breakdown: impl Into<String>, sub_goals: Vec<String>) -> Self {
        PlannerAction::Plan(Plan {
            breakdown: breakdown.into(),
            sub_goals,
        })
    }

    /// Canonical transcript form. Queries are written as bare text.
    pub fn serialize(&self) -> String {
        match self {
            PlannerAction::Plan(plan) => format!(
                "{TASK_BREAKDOWN_OPEN}\n{}\n{TASK_BREAKDOWN_CLOSE}\n{SUB_GOALS_OPEN}\n{}\n{SUB_GOALS_CLOSE}",
                plan.breakdown,
                serde_json::to_string(&plan.sub_goals).expect("strings serialize")
            ),
            PlannerAction::Query {
                sub_goal_tag: Some(tag),
                text,
            } => format!("{SUB_GOAL_OPEN}{tag}{SUB_GOAL_CLOSE} {text}"),
            PlannerAction::Query { text, .. } => text.clone(),
            PlannerAction::Stop => STOP_TAG.to_string(),
        }
    }
}

/// One planner turn: the raw assistant text and its parsed action.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerTurn {
    pub raw: String,
    pub action: PlannerAction,
}

/// Produces the next assistant turn given the running chat transcript.
///
/// `turn_index` counts assistant turns; index 0 is the plan turn.
pub trait Planner: Send {
    fn next_action(&mut self, transcript: &[ChatMessage], turn_index: usize) -> Result<PlannerTurn>;
}

fn parse_err(turn: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        turn,
        message: message.into(),
    }
}

/// Text between `open` and the next `close` at or after `from`, with the
/// byte offset just past `close`.
fn between<'a>(raw: &'a str, open: &str, close: &str, from: usize) -> Option<(&'a str, usize)> {
    let start = raw[from..].find(open)? + from + open.len();
    let end = raw[start..].find(close)? + start;
    Some((&raw[start..end], end + close.len()))
}

fn parse_sub_goals(body: &str) -> Option<Vec<String>> {
    let body = body.trim();
    let as_json = |s: &str| serde_json::from_str::<Vec<String>>(s).ok();
    let goals = as_json(body)
        .or_else(|| {
            // Tolerate stray characters around the list.
            let start = body.find('[')?;
            let end = body.rfind(']')?;
            (start < end).then(|| as_json(&body[start..=end])).flatten()
        })
        .unwrap_or_else(|| {
            body.lines()
                .map(|l| {
                    l.trim()
                        .trim_start_matches(['-', '*', '•'])
                        .trim_start_matches(|c: char| c.is_ascii_digit())
                        .trim_start_matches(['.', ')'])
                        .trim()
                        .to_string()
                })
                .filter(|l| !l.is_empty())
                .collect()
        });
    let goals: Vec<String> = goals
        .into_iter()
        .map(|g| g.trim().to_string())
        .filter(|g| !g.is_empty())
        .collect();
    (!goals.is_empty()).then_some(goals)
}

pub fn parse_planner_turn(raw: &str, turn_index: usize) -> Result<PlannerAction> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Err(parse_err(turn_index, "empty turn"));
    }
    if turn_index == 0 {
        let (breakdown, after) = between(trimmed, TASK_BREAKDOWN_OPEN, TASK_BREAKDOWN_CLOSE, 0)
            .ok_or_else(|| parse_err(0, "missing <task_breakdown> block"))?;
        let (goals, _) = between(trimmed, SUB_GOALS_OPEN, SUB_GOALS_CLOSE, after)
            .ok_or_else(|| parse_err(0, "missing <sub_goals> block"))?;
        let breakdown = breakdown.trim();
        if breakdown.is_empty() {
            return Err(parse_err(0, "empty <task_breakdown> block"));
        }
        let sub_goals =
            parse_sub_goals(goals).ok_or_else(|| parse_err(0, "<sub_goals> block has no sub-goals"))?;
        return Ok(PlannerAction::plan(breakdown, sub_goals));
    }

    if trimmed == STOP_TAG {
        return Ok(PlannerAction::Stop);
    }
    if trimmed.contains(STOP_TAG) {
        return Err(parse_err(turn_index, "<stop_retrieval> must be the only content of its turn"));
    }
    if trimmed.contains(TASK_BREAKDOWN_OPEN) || trimmed.contains(SUB_GOALS_OPEN) {
        return Err(parse_err(turn_index, "plan block outside the first turn"));
    }

    let mut rest = trimmed;
    let mut sub_goal_tag = None;
    if rest.starts_with(SUB_GOAL_OPEN) {
        let (tag, after) = between(rest, SUB_GOAL_OPEN, SUB_GOAL_CLOSE, 0)
            .ok_or_else(|| parse_err(turn_index, "unterminated <sub_goal> tag"))?;
        let tag = tag.trim();
        if !tag.is_empty() {
            sub_goal_tag = Some(tag.to_string());
        }
        rest = rest[after..].trim();
    }
    if let Some((inner, _)) = between(rest, QUERY_OPEN, QUERY_CLOSE, 0) {
        rest = inner.trim();
    } else if rest.contains(QUERY_OPEN) {
        return Err(parse_err(turn_index, "unterminated <query> tag"));
    }
    if rest.is_empty() {
        return Err(parse_err(turn_index, "empty query text"));
    }
    Ok(PlannerAction::Query {
        sub_goal_tag,
        text: rest.to_string(),
    })
}

/// Renders the top `k` hits of `run` as planner feedback.
pub fn format_feedback(run: &RetrievalRun, corpus: &ToolCorpus, k: usize) -> String {
    format!("{FEEDBACK_HEADER}\n{}", hit_lines(run, corpus, k))
}

/// One `rank. name(params): description` line per hit, or `(no results)`.
pub(crate) fn hit_lines(run: &RetrievalRun, corpus: &ToolCorpus, k: usize) -> String {
    if run.hits.is_empty() {
        return "(no results)".into();
    }
    run.hits
        .iter()
        .take(k.max(1))
        .map(|hit| match corpus.get(&hit.tool_id) {
            Some(tool) => format!(
                "{}. {}: {}",
                hit.rank,
                tool.render(RenderStyle::FeedbackLine),
                tool.description
            ),
            None => format!("{}. {}", hit.rank, hit.tool_id),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

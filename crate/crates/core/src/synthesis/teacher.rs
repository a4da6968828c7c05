//! Teacher models that split plans into sub-tasks and propose queries.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::context::EscalationContext;
use crate::chat::{ChatClient, ChatEndpoint, ChatMessage};
use crate::corpus::{RenderStyle, ToolDoc};
use crate::error::{Error, Result};

/// A sub-task as proposed by the teacher, before validation.
///
/// `tools` may hold corpus ids or tool names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposedSubTask {
    pub sub_task: String,
    pub tools: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    pub user_query: &'a str,
    pub plan: &'a str,
    /// Unredacted sub-task text; scripted teachers key on it.
    pub sub_task: &'a str,
    /// `(sub_task, accepted query)` for earlier sub-tasks of this record.
    pub completed: &'a [(String, String)],
    pub context: &'a EscalationContext,
    pub candidates: usize,
    pub temperature: f64,
}

pub trait Teacher: Send + Sync {
    /// `hint` is set on the re-prompt after a coverage failure.
    fn parse_subtasks(
        &self,
        user_query: &str,
        plan: &str,
        targets: &[&ToolDoc],
        hint: Option<&str>,
    ) -> Result<Vec<ProposedSubTask>>;

    /// Raw candidate replies; each is normalized through the planner grammar.
    fn generate_queries(&self, request: &GenerationRequest<'_>) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedCandidates {
    pub sub_task: String,
    pub level: u8,
    pub queries: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ScriptFile {
    succeed_from_level: Option<u8>,
    decoy: Option<String>,
    assignments: HashMap<String, Vec<ProposedSubTask>>,
    candidates: Vec<ScriptedCandidates>,
}

/// Deterministic teacher for tests and offline runs.
///
/// Without explicit assignments it proposes one sub-task per target, using
/// the target description as the goal. Without explicit candidates it echoes
/// the context: the goal at level 1, the description at levels 2 to 4 and the
/// nameless documentation at level 5. Below `succeed_from_level` every
/// candidate is the decoy query instead.
#[derive(Debug, Clone)]
pub struct ScriptedTeacher {
    succeed_from_level: u8,
    decoy: String,
    assignments: HashMap<String, Vec<ProposedSubTask>>,
    candidates: HashMap<(String, u8), Vec<String>>,
}

pub const DEFAULT_DECOY: &str = "zzqx unrelated placeholder";

impl Default for ScriptedTeacher {
    fn default() -> Self {
        Self {
            succeed_from_level: 1,
            decoy: DEFAULT_DECOY.into(),
            assignments: HashMap::new(),
            candidates: HashMap::new(),
        }
    }
}

impl ScriptedTeacher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn succeed_from_level(mut self, level: u8) -> Self {
        self.succeed_from_level = level;
        self
    }

    pub fn with_decoy(mut self, decoy: impl Into<String>) -> Self {
        self.decoy = decoy.into();
        self
    }

    /// Fixed sub-task split for records whose user query equals `user_query`.
    pub fn with_assignments(mut self, user_query: impl Into<String>, subtasks: Vec<ProposedSubTask>) -> Self {
        self.assignments.insert(user_query.into(), subtasks);
        self
    }

    pub fn with_candidates(mut self, sub_task: impl Into<String>, level: u8, queries: Vec<String>) -> Self {
        self.candidates.insert((sub_task.into(), level), queries);
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ScriptFile = serde_json::from_str(&text)?;
        let mut t = Self::new();
        if let Some(level) = file.succeed_from_level {
            t.succeed_from_level = level;
        }
        if let Some(decoy) = file.decoy {
            t.decoy = decoy;
        }
        t.assignments = file.assignments;
        for c in file.candidates {
            t.candidates.insert((c.sub_task, c.level), c.queries);
        }
        Ok(t)
    }
}

impl Teacher for ScriptedTeacher {
    fn parse_subtasks(
        &self,
        user_query: &str,
        plan: &str,
        targets: &[&ToolDoc],
        _hint: Option<&str>,
    ) -> Result<Vec<ProposedSubTask>> {
        if let Some(fixed) = self.assignments.get(user_query) {
            return Ok(fixed.clone());
        }
        Ok(targets
            .iter()
            .map(|t| ProposedSubTask {
                sub_task: if t.description.trim().is_empty() {
                    plan.to_string()
                } else {
                    t.description.clone()
                },
                tools: vec![t.id.clone()],
            })
            .collect())
    }

    fn generate_queries(&self, request: &GenerationRequest<'_>) -> Result<Vec<String>> {
        let ctx = request.context;
        let n = request.candidates.max(1);
        if let Some(q) = self.candidates.get(&(request.sub_task.to_string(), ctx.level)) {
            return Ok(q.clone());
        }
        if ctx.level < self.succeed_from_level {
            return Ok(vec![self.decoy.clone(); n]);
        }
        let text = match ctx.level {
            1 => ctx.goal.clone(),
            5 => ctx.full_documentation.clone().unwrap_or_else(|| ctx.goal.clone()),
            _ => ctx.target_description.clone().unwrap_or_else(|| ctx.goal.clone()),
        };
        Ok(vec![text; n])
    }
}

const ALIGN_PROMPT: &str = "You are helping build tool-retrieval training data.\n\
Order the tools below by the step of the plan where each one is needed. \
Reply with a JSON list of tool names and nothing else.\n\n\
User query: {query}\n\nPlan: {plan}\n\nTools:\n{tools}";

const SUBTASK_PROMPT: &str = "You are helping build tool-retrieval training data.\n\
Given the user query, the plan and one tool that the plan needs, write the single plan step \
that this tool completes. Reply with one short sentence that describes the step by its function \
and does not mention the tool name.\n\n\
User query: {query}\n\nPlan: {plan}\n\nTool: {tool}";

const QUERY_PROMPT: &str = "You are helping build tool-retrieval training data.\n\
Overall user request: {query}\n\nPlan: {plan}\n\nSteps already covered:\n{completed}\n\n---\n{context}\n---\n\
Reply with one search query inside <query></query> tags.";

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in slots {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Pulls the first JSON list of strings out of a free-form reply.
fn extract_name_list(reply: &str) -> Option<Vec<String>> {
    let start = reply.find('[')?;
    let end = reply.rfind(']')?;
    if end < start {
        return None;
    }
    serde_json::from_str(&reply[start..=end]).ok()
}

/// Teacher backed by an OpenAI-compatible chat endpoint.
pub struct RemoteTeacher {
    client: ChatClient,
}

impl RemoteTeacher {
    pub fn new(endpoint: ChatEndpoint) -> Self {
        Self { client: ChatClient::new(endpoint) }
    }
}

impl Teacher for RemoteTeacher {
    fn parse_subtasks(
        &self,
        user_query: &str,
        plan: &str,
        targets: &[&ToolDoc],
        hint: Option<&str>,
    ) -> Result<Vec<ProposedSubTask>> {
        let listing: Vec<String> = targets.iter().map(|t| t.render(RenderStyle::NameDesc)).collect();
        let mut prompt = fill(
            ALIGN_PROMPT,
            &[("query", user_query), ("plan", plan), ("tools", &listing.join("\n"))],
        );
        if let Some(h) = hint {
            prompt.push_str(&format!("\n\nNote: {h}"));
        }
        let reply = self.client.complete(&[ChatMessage::user(prompt)])?;
        let mut order: Vec<&ToolDoc> = Vec::new();
        if let Some(names) = extract_name_list(&reply) {
            for name in names {
                if let Some(t) = targets.iter().find(|t| t.name == name || t.id == name) {
                    if !order.iter().any(|o| o.id == t.id) {
                        order.push(t);
                    }
                }
            }
        } else {
            log::warn!("teacher plan alignment reply has no JSON list; keeping target order");
        }
        for t in targets {
            if !order.iter().any(|o| o.id == t.id) {
                order.push(t);
            }
        }

        let mut out: Vec<ProposedSubTask> = Vec::new();
        for t in order {
            let prompt = fill(
                SUBTASK_PROMPT,
                &[("query", user_query), ("plan", plan), ("tool", &t.render(RenderStyle::SchemaJson))],
            );
            let goal = self.client.complete(&[ChatMessage::user(prompt)])?.trim().to_string();
            if goal.is_empty() {
                return Err(Error::BadResponse {
                    endpoint: self.client.endpoint().url.clone(),
                    message: format!("empty sub-task for tool {}", t.id),
                });
            }
            match out.iter_mut().find(|s| s.sub_task == goal) {
                Some(existing) => existing.tools.push(t.id.clone()),
                None => out.push(ProposedSubTask { sub_task: goal, tools: vec![t.id.clone()] }),
            }
        }
        Ok(out)
    }

    fn generate_queries(&self, request: &GenerationRequest<'_>) -> Result<Vec<String>> {
        let completed = if request.completed.is_empty() {
            "(none)".to_string()
        } else {
            request
                .completed
                .iter()
                .map(|(goal, q)| format!("- {goal}: {q}"))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let prompt = fill(
            QUERY_PROMPT,
            &[
                ("query", request.user_query),
                ("plan", request.plan),
                ("completed", &completed),
                ("context", &request.context.render()),
            ],
        );
        let messages = [ChatMessage::user(prompt)];
        (0..request.candidates.max(1))
            .map(|_| self.client.complete_with_temperature(&messages, request.temperature))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn name_list_extraction() {
        assert_eq!(
            extract_name_list("Sure: [\"a\", \"b\"] done"),
            Some(vec!["a".to_string(), "b".to_string()])
        );
        assert_eq!(extract_name_list("no list"), None);
    }

    #[test]
    fn template_fill() {
        assert_eq!(fill("{a} and {b}", &[("a", "x"), ("b", "y")]), "x and y");
    }
}

//! Escalating teacher contexts for query generation.
//!
//! Each failed round adds information about the target tools:
//!
//! | level | adds                                                   |
//! |-------|--------------------------------------------------------|
//! | 1     | the sub-task goal                                      |
//! | 2     | target description text                                |
//! | 3     | the previous failed query and what it retrieved        |
//! | 4     | results for that query extended with the overall plan  |
//! | 5     | full target documentation, name removed                |
//!
//! Target names and ids are redacted from every section, including goal and
//! retrieval listings, so generated queries describe function rather than
//! repeat identifiers.

use serde::{Deserialize, Serialize};

use crate::corpus::{ToolCorpus, ToolDoc};
use crate::error::{Error, Result};
use crate::planner::hit_lines;
use crate::retriever::RetrievalRun;

pub const MAX_LEVEL: u8 = 5;
pub const REDACTED: &str = "[target tool]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptView {
    pub query: String,
    pub results: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscalationContext {
    pub level: u8,
    pub goal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_attempt: Option<AttemptView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_augmented: Option<AttemptView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_documentation: Option<String>,
}

impl EscalationContext {
    pub fn render(&self) -> String {
        let mut out = format!(
            "[Current step goal]: find a tool for \"{}\"\n\
             Write a functional query that retrieves a tool able to complete this step. \
             Words from the goal may be reused in the query.",
            self.goal
        );
        if let Some(desc) = &self.target_description {
            out.push_str(&format!("\nThe tool to look for is described as: \"{desc}\""));
        }
        if let Some(prev) = &self.previous_attempt {
            out.push_str(&format!(
                "\nThe earlier query \"{}\" retrieved these tools:\n{}",
                prev.query, prev.results
            ));
        }
        if let Some(aug) = &self.plan_augmented {
            out.push_str(&format!(
                "\nThe earlier query combined with the overall plan (\"{}\") retrieved:\n{}",
                aug.query, aug.results
            ));
        }
        if let Some(doc) = &self.full_documentation {
            out.push_str(&format!(
                "\nHint, full documentation of the target tool: {doc}\n\
                 Use its description and relevant parameter names in the query."
            ));
        }
        out
    }
}

/// What the synthesizer knows about one sub-task when it asks for queries.
#[derive(Debug, Clone)]
pub struct EscalationState<'a> {
    pub goal: &'a str,
    pub targets: Vec<&'a ToolDoc>,
    /// Other tools whose names are hidden without being described, such as
    /// targets of sibling sub-tasks.
    pub also_redact: Vec<&'a ToolDoc>,
    pub previous: Option<(&'a str, &'a RetrievalRun)>,
    pub plan_augmented: Option<(&'a str, &'a RetrievalRun)>,
}

/// Replaces every ASCII-case-insensitive occurrence of each needle.
pub(crate) fn redact(text: &str, needles: &[&str]) -> String {
    let mut needles: Vec<&str> = needles.iter().copied().filter(|n| !n.is_empty()).collect();
    needles.sort_by_key(|n| std::cmp::Reverse(n.len()));
    needles.dedup();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    'outer: while i < text.len() {
        for n in &needles {
            if text
                .get(i..i + n.len())
                .is_some_and(|w| w.eq_ignore_ascii_case(n))
            {
                out.push_str(REDACTED);
                i += n.len();
                continue 'outer;
            }
        }
        let ch = text[i..].chars().next().expect("index is on a char boundary");
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

pub fn escalation_context(
    level: u8,
    state: &EscalationState<'_>,
    corpus: &ToolCorpus,
    results_k: usize,
) -> Result<EscalationContext> {
    if !(1..=MAX_LEVEL).contains(&level) {
        return Err(Error::InvalidArgument(format!("escalation level {level} outside 1..={MAX_LEVEL}")));
    }
    let mut needles: Vec<&str> = Vec::new();
    for t in state.targets.iter().chain(&state.also_redact) {
        needles.push(&t.name);
        needles.push(&t.id);
    }
    let clean = |s: &str| redact(s, &needles);
    let view = |(query, run): (&str, &RetrievalRun)| AttemptView {
        query: clean(query),
        results: clean(&hit_lines(run, corpus, results_k)),
    };

    let mut ctx = EscalationContext {
        level,
        goal: clean(state.goal),
        target_description: None,
        previous_attempt: None,
        plan_augmented: None,
        full_documentation: None,
    };
    if level >= 2 {
        let desc: Vec<&str> = state.targets.iter().map(|t| t.description.as_str()).collect();
        ctx.target_description = Some(clean(&desc.join(" / ")));
    }
    if level >= 3 {
        ctx.previous_attempt = state.previous.map(view);
    }
    if level >= 4 {
        ctx.plan_augmented = state.plan_augmented.map(view);
    }
    if level >= 5 {
        let docs: Vec<serde_json::Value> = state.targets.iter().map(|t| t.schema_without_name()).collect();
        let json = if docs.len() == 1 {
            docs[0].to_string()
        } else {
            serde_json::Value::Array(docs).to_string()
        };
        ctx.full_documentation = Some(clean(&json));
    }
    Ok(ctx)
}

//! Verified SFT trajectory synthesis.
//!
//! For every sub-task of a record the teacher proposes candidate queries; the
//! best one is checked against the retriever and accepted once the assigned
//! targets reach an average rank within `rank_threshold`. Failed rounds
//! escalate the teacher context (see [`context`]). Accepted records become
//! chat transcripts in the planner grammar.

pub mod context;
mod teacher;

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chat::{ChatMessage, Role};
use crate::corpus::{ToolCorpus, ToolDoc};
use crate::error::{Error, Result};
use crate::planner::{
    format_feedback, parse_planner_turn, user_query_message, PlannerAction, BEGIN_RETRIEVAL,
    DEFAULT_SYSTEM_PROMPT,
};
use crate::retriever::{RetrievalRun, Retriever};

pub use context::{escalation_context, AttemptView, EscalationContext, EscalationState, MAX_LEVEL, REDACTED};
pub use teacher::{
    GenerationRequest, ProposedSubTask, RemoteTeacher, ScriptedCandidates, ScriptedTeacher, Teacher,
    DEFAULT_DECOY,
};

fn default_system_prompt() -> String {
    DEFAULT_SYSTEM_PROMPT.to_string()
}

fn is_default_prompt(p: &str) -> bool {
    p == DEFAULT_SYSTEM_PROMPT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub candidates: usize,
    pub rank_threshold: usize,
    pub keep_failed_prob: f64,
    pub max_escalations: usize,
    /// Search depth for verification; `None` ranks the whole corpus.
    pub verify_k: Option<usize>,
    pub feedback_k: usize,
    pub temperature: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "is_default_prompt")]
    pub system_prompt: String,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            candidates: 5,
            rank_threshold: 5,
            keep_failed_prob: 0.4,
            max_escalations: 5,
            verify_k: None,
            feedback_k: 5,
            temperature: 1.0,
            seed: 0,
            system_prompt: default_system_prompt(),
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthesis: {m}")));
        if self.candidates == 0 {
            return bad("candidates must be positive");
        }
        if self.rank_threshold == 0 {
            return bad("rank_threshold must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.keep_failed_prob) {
            return bad("keep_failed_prob must be within [0, 1]");
        }
        if self.max_escalations == 0 {
            return bad("max_escalations must be positive");
        }
        if self.verify_k == Some(0) || self.feedback_k == 0 {
            return bad("verify_k and feedback_k must be positive");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be a non-negative number");
        }
        Ok(())
    }
}

/// One input line: a user query, its plan and the tools it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    #[serde(default, alias = "query_id")]
    pub id: Option<String>,
    #[serde(alias = "user_query")]
    pub query: String,
    pub plan: String,
    #[serde(alias = "targets")]
    pub target_tool_ids: Vec<String>,
    #[serde(default)]
    pub dataset: Option<String>,
}

impl SynthesisRecord {
    /// The record id, or its 0-based line position when none is given.
    pub fn record_id(&self, index: usize) -> String {
        self.id.clone().unwrap_or_else(|| index.to_string())
    }
}

pub fn load_synthesis_records(path: impl AsRef<Path>) -> Result<Vec<SynthesisRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SynthesisRecord = serde_json::from_str(line).map_err(|e| Error::CorpusParse {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTaskAssignment {
    pub sub_task: String,
    pub assigned_targets: Vec<String>,
}

fn validate_proposals(
    proposals: Vec<ProposedSubTask>,
    targets: &[String],
    corpus: &ToolCorpus,
) -> Result<(Vec<SubTaskAssignment>, Vec<String>)> {
    let target_set: HashSet<&str> = targets.iter().map(String::as_str).collect();
    let mut out = Vec::new();
    for p in proposals {
        let mut assigned: Vec<String> = Vec::new();
        for name in &p.tools {
            let tool = corpus.resolve(name).ok_or_else(|| Error::UnknownTool(name.clone()))?;
            if !target_set.contains(tool.id.as_str()) {
                log::warn!("teacher assigned non-target tool {} to {:?}; dropped", tool.id, p.sub_task);
                continue;
            }
            if !assigned.contains(&tool.id) {
                assigned.push(tool.id.clone());
            }
        }
        let sub_task = p.sub_task.trim().to_string();
        if assigned.is_empty() || sub_task.is_empty() {
            log::warn!("teacher sub-task {:?} has no usable targets; dropped", p.sub_task);
            continue;
        }
        out.push(SubTaskAssignment { sub_task, assigned_targets: assigned });
    }
    let covered: HashSet<&str> = out
        .iter()
        .flat_map(|a| a.assigned_targets.iter().map(String::as_str))
        .collect();
    let uncovered = targets.iter().filter(|t| !covered.contains(t.as_str())).cloned().collect();
    Ok((out, uncovered))
}

/// Splits a record into sub-tasks and checks the split against the targets.
///
/// A split that leaves targets uncovered is re-requested once with a hint;
/// a second failure returns [`Error::Skipped`] with an "uncovered target"
/// reason.
pub fn parse_subtasks(
    teacher: &dyn Teacher,
    user_query: &str,
    plan: &str,
    targets: &[String],
    corpus: &ToolCorpus,
) -> Result<Vec<SubTaskAssignment>> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("record has no target tools".into()));
    }
    if plan.trim().is_empty() {
        return Err(Error::InvalidArgument("record has an empty plan".into()));
    }
    let docs: Vec<&ToolDoc> = targets
        .iter()
        .map(|t| corpus.get(t).ok_or_else(|| Error::UnknownTool(t.clone())))
        .collect::<Result<_>>()?;

    let mut hint: Option<String> = None;
    for attempt in 0..2 {
        let proposals = teacher.parse_subtasks(user_query, plan, &docs, hint.as_deref())?;
        let (assignments, uncovered) = validate_proposals(proposals, targets, corpus)?;
        if uncovered.is_empty() {
            let mut seen = HashSet::new();
            for a in &assignments {
                for t in &a.assigned_targets {
                    if !seen.insert(t.as_str()) {
                        log::warn!("target {t} is assigned to more than one sub-task");
                    }
                }
            }
            return Ok(assignments);
        }
        if attempt == 1 {
            return Err(Error::Skipped {
                record: String::new(),
                reason: format!("uncovered target: {}", uncovered.join(", ")),
            });
        }
        log::info!("sub-task split misses {}; re-prompting", uncovered.join(", "));
        hint = Some(format!(
            "every listed tool must belong to a step; these were missing: {}",
            uncovered.join(", ")
        ));
    }
    unreachable!("loop returns on its second pass")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub query: String,
    pub run: RetrievalRun,
    pub avg_rank: f64,
    pub recall: f64,
    pub accepted: bool,
}

/// Mean rank of `targets` in `run`, with `absent_rank` for misses.
pub fn avg_rank(run: &RetrievalRun, targets: &[String], absent_rank: usize) -> f64 {
    let sum: usize = targets.iter().map(|t| run.rank_of(t).unwrap_or(absent_rank)).sum();
    sum as f64 / targets.len() as f64
}

/// Searches every candidate and keeps the best.
///
/// Best means highest recall within `rank_threshold`, then lowest average
/// rank, then earliest candidate. Targets missing from the run count at rank
/// `retriever.len() + 1`.
pub fn select_best_candidate(
    candidates: &[String],
    retriever: &dyn Retriever,
    targets: &[String],
    rank_threshold: usize,
    verify_k: Option<usize>,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate queries".into()));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no assigned targets".into()));
    }
    let size = retriever.len();
    let k = verify_k.map_or(size, |v| v.min(size)).max(1);
    let mut best: Option<Selection> = None;
    for (index, q) in candidates.iter().enumerate() {
        let run = retriever.search(q, k)?;
        let avg = avg_rank(&run, targets, size + 1);
        let hits = targets
            .iter()
            .filter(|t| run.rank_of(t).is_some_and(|r| r <= rank_threshold))
            .count();
        let recall = hits as f64 / targets.len() as f64;
        let better = match &best {
            None => true,
            Some(b) => recall > b.recall || (recall == b.recall && avg < b.avg_rank),
        };
        if better {
            best = Some(Selection {
                index,
                query: q.clone(),
                run,
                avg_rank: avg,
                recall,
                accepted: avg <= rank_threshold as f64,
            });
        }
    }
    Ok(best.expect("at least one candidate"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub level: u8,
    pub query: String,
    pub avg_rank: f64,
    pub recall: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTaskTrace {
    pub assignment: SubTaskAssignment,
    pub attempts: Vec<AttemptRecord>,
    pub kept_failures: bool,
}

impl SubTaskTrace {
    pub fn accepted(&self) -> Option<&AttemptRecord> {
        self.attempts.last().filter(|a| a.accepted)
    }

    pub fn level_reached(&self) -> u8 {
        self.attempts.last().map_or(0, |a| a.level)
    }

    /// Attempts that appear as transcript turns.
    pub fn emitted(&self) -> &[AttemptRecord] {
        if self.kept_failures {
            &self.attempts
        } else {
            &self.attempts[self.attempts.len().saturating_sub(1)..]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftTranscript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub messages: Vec<ChatMessage>,
}

impl SftTranscript {
    /// Every assistant turn parses and the last one is the stop tag.
    pub fn validate(&self) -> Result<()> {
        let assistant: Vec<&ChatMessage> = self.messages.iter().filter(|m| m.role == Role::Assistant).collect();
        let mut last = None;
        for (i, m) in assistant.iter().enumerate() {
            last = Some(parse_planner_turn(&m.content, i)?);
        }
        match (assistant.len(), last) {
            (n, Some(PlannerAction::Stop)) if n >= 2 => Ok(()),
            _ => Err(Error::Protocol("transcript must start with a plan and end with stop".into())),
        }
    }

    /// Assistant query turns in order.
    pub fn queries(&self) -> Vec<String> {
        self.messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .enumerate()
            .filter_map(|(i, m)| match parse_planner_turn(&m.content, i) {
                Ok(PlannerAction::Query { text, .. }) => Some(text),
                _ => None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOutcome {
    pub record_id: String,
    pub transcript: SftTranscript,
    pub subtasks: Vec<SubTaskTrace>,
}

/// Plan turn text: the record plan as breakdown, sub-tasks as sub-goals.
fn plan_turn(plan: &str, assignments: &[SubTaskAssignment]) -> String {
    let breakdown = match parse_planner_turn(plan, 0) {
        Ok(PlannerAction::Plan(p)) => p.breakdown,
        _ => plan.trim().to_string(),
    };
    let goals = assignments.iter().map(|a| a.sub_task.clone()).collect();
    PlannerAction::plan(breakdown, goals).serialize()
}

/// Normalizes raw teacher replies to query text, skipping anything else.
fn normalize_candidates(raw: Vec<String>) -> Vec<String> {
    raw.into_iter()
        .filter_map(|r| match parse_planner_turn(&r, 1) {
            Ok(PlannerAction::Query { text, .. }) => Some(text),
            _ => {
                log::debug!("discarding malformed teacher candidate {r:?}");
                None
            }
        })
        .collect()
}

struct Attempt {
    record: AttemptRecord,
    run: RetrievalRun,
}

/// Runs the escalation loop for one sub-task and returns its attempts.
#[allow(clippy::too_many_arguments)]
fn resolve_subtask(
    teacher: &dyn Teacher,
    retriever: &dyn Retriever,
    corpus: &ToolCorpus,
    record: &SynthesisRecord,
    assignment: &SubTaskAssignment,
    completed: &[(String, String)],
    config: &SynthesisConfig,
) -> Result<Vec<Attempt>> {
    let targets: Vec<&ToolDoc> = assignment
        .assigned_targets
        .iter()
        .map(|t| corpus.get(t).ok_or_else(|| Error::UnknownTool(t.clone())))
        .collect::<Result<_>>()?;
    let siblings: Vec<&ToolDoc> = record
        .target_tool_ids
        .iter()
        .filter(|id| !assignment.assigned_targets.contains(id))
        .filter_map(|id| corpus.get(id))
        .collect();
    let mut attempts: Vec<Attempt> = Vec::new();
    let mut plan_aug: Option<(String, RetrievalRun)> = None;

    for round in 1..=config.max_escalations {
        let level = round.min(MAX_LEVEL as usize) as u8;
        let previous = attempts.last().map(|a| (a.record.query.as_str(), &a.run));
        if level >= 4 {
            if let Some((q, _)) = previous {
                let text = format!("{q}\n{}", record.plan);
                let run = retriever.search(&text, config.feedback_k)?;
                plan_aug = Some((text, run));
            }
        }
        let state = EscalationState {
            goal: &assignment.sub_task,
            targets: targets.clone(),
            also_redact: siblings.clone(),
            previous,
            plan_augmented: plan_aug.as_ref().map(|(q, r)| (q.as_str(), r)),
        };
        let ctx = escalation_context(level, &state, corpus, config.feedback_k)?;
        let request = GenerationRequest {
            user_query: &record.query,
            plan: &record.plan,
            sub_task: &assignment.sub_task,
            completed,
            context: &ctx,
            candidates: config.candidates,
            temperature: config.temperature,
        };
        let candidates = normalize_candidates(teacher.generate_queries(&request)?);
        if candidates.is_empty() {
            log::warn!("level {level}: teacher returned no usable candidates");
            continue;
        }
        let sel = select_best_candidate(
            &candidates,
            retriever,
            &assignment.assigned_targets,
            config.rank_threshold,
            config.verify_k,
        )?;
        let accepted = sel.accepted;
        attempts.push(Attempt {
            record: AttemptRecord {
                level,
                query: sel.query,
                avg_rank: sel.avg_rank,
                recall: sel.recall,
                accepted,
            },
            run: sel.run,
        });
        if accepted {
            break;
        }
    }
    Ok(attempts)
}

/// Synthesizes one record.
///
/// `rng` supplies one keep-failures draw per sub-task. Records that cannot be
/// completed come back as [`Error::Skipped`].
pub fn synthesize_record(
    teacher: &dyn Teacher,
    retriever: &dyn Retriever,
    corpus: &ToolCorpus,
    record: &SynthesisRecord,
    record_id: &str,
    config: &SynthesisConfig,
    rng: &mut impl Rng,
) -> Result<SynthesisOutcome> {
    let skip = |reason: String| Error::Skipped { record: record_id.to_string(), reason };
    let assignments =
        parse_subtasks(teacher, &record.query, &record.plan, &record.target_tool_ids, corpus).map_err(|e| match e {
            Error::Skipped { reason, .. } => skip(reason),
            other => skip(other.to_string()),
        })?;

    let mut messages = vec![
        ChatMessage::system(config.system_prompt.clone()),
        ChatMessage::user(user_query_message(&record.query)),
        ChatMessage::assistant(plan_turn(&record.plan, &assignments)),
        ChatMessage::user(BEGIN_RETRIEVAL),
    ];
    let mut completed: Vec<(String, String)> = Vec::new();
    let mut traces = Vec::new();

    for (n, assignment) in assignments.iter().enumerate() {
        let attempts = resolve_subtask(teacher, retriever, corpus, record, assignment, &completed, config)
            .map_err(|e| skip(format!("sub-task {n}: {e}")))?;
        let keep = rng.random_bool(config.keep_failed_prob);
        let Some(last) = attempts.last().filter(|a| a.record.accepted) else {
            return Err(skip(format!(
                "sub-task {n} unresolved after {} escalation rounds",
                config.max_escalations
            )));
        };
        completed.push((assignment.sub_task.clone(), last.record.query.clone()));
        let kept_failures = keep && attempts.len() > 1;
        let emitted = if kept_failures { &attempts[..] } else { &attempts[attempts.len() - 1..] };
        for a in emitted {
            messages.push(ChatMessage::assistant(PlannerAction::query(a.record.query.clone()).serialize()));
            messages.push(ChatMessage::user(format_feedback(&a.run, corpus, config.feedback_k)));
        }
        traces.push(SubTaskTrace {
            assignment: assignment.clone(),
            attempts: attempts.into_iter().map(|a| a.record).collect(),
            kept_failures,
        });
    }
    messages.push(ChatMessage::assistant(PlannerAction::Stop.serialize()));

    let transcript = SftTranscript { id: Some(record_id.to_string()), messages };
    transcript.validate().map_err(|e| skip(format!("assembled transcript is malformed: {e}")))?;
    Ok(SynthesisOutcome { record_id: record_id.to_string(), transcript, subtasks: traces })
}

/// Per-record RNG: one ChaCha8 stream per record index under a shared seed.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Synthesizes every record, keeping input order.
pub fn synthesize_all(
    teacher: &dyn Teacher,
    retriever: &dyn Retriever,
    corpus: &ToolCorpus,
    records: &[SynthesisRecord],
    config: &SynthesisConfig,
    parallel: usize,
) -> Result<Vec<Result<SynthesisOutcome>>> {
    config.validate()?;
    let run = |(i, r): (usize, &SynthesisRecord)| {
        let id = r.record_id(i);
        let out = synthesize_record(teacher, retriever, corpus, r, &id, config, &mut record_rng(config.seed, i));
        if let Err(e) = &out {
            log::warn!("record {id} dropped: {e}");
        }
        out
    };
    if parallel <= 1 {
        return Ok(records.iter().enumerate().map(run).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| records.par_iter().enumerate().map(run).collect()))
}

/// Writes one `{"id", "messages"}` JSON object per line.
pub fn emit_sft_dataset<'a>(
    transcripts: impl IntoIterator<Item = &'a SftTranscript>,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let mut buf = String::new();
    let mut count = 0;
    for t in transcripts {
        t.validate()?;
        let line = serde_json::to_string(t)?;
        let back: SftTranscript = serde_json::from_str(&line)?;
        back.validate()?;
        buf.push_str(&line);
        buf.push('\n');
        count += 1;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    Ok(count)
}

pub fn read_sft_dataset(path: impl AsRef<Path>) -> Result<Vec<SftTranscript>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub const AUDIT_HEADER: &str = "record_id\tsub_task_index\tsub_task\tlevel_reached\taccepted_avg_rank\tkept_failures\tstatus";

fn tsv_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

/// Audit rows for every record, including dropped ones.
pub fn write_audit(
    records: &[SynthesisRecord],
    results: &[Result<SynthesisOutcome>],
    out: &mut impl Write,
) -> std::io::Result<()> {
    writeln!(out, "{AUDIT_HEADER}")?;
    for (i, (rec, res)) in records.iter().zip(results).enumerate() {
        let id = tsv_field(&rec.record_id(i));
        match res {
            Ok(o) => {
                for (n, st) in o.subtasks.iter().enumerate() {
                    let avg = st.accepted().map_or(String::new(), |a| format!("{}", a.avg_rank));
                    writeln!(
                        out,
                        "{id}\t{n}\t{}\t{}\t{avg}\t{}\tok",
                        tsv_field(&st.assignment.sub_task),
                        st.level_reached(),
                        st.kept_failures
                    )?;
                }
            }
            Err(e) => writeln!(out, "{id}\t\t\t\t\t\tdropped: {}", tsv_field(&e.to_string()))?,
        }
    }
    Ok(())
}

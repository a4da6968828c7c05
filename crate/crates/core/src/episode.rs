//! One planner, one retriever, one user query: the interactive loop.
//!
//! The planner first emits a plan. Each later query is searched with
//! `feedback_k` hits and the formatted hits are appended to the transcript as
//! a user turn. The loop ends on an explicit stop or after `max_turns`
//! queries. When enabled, the raw user query is searched once up front as an
//! anchor run; the planner never sees it, but fusion does.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::LabeledRun;
use crate::chat::{ChatMessage, Role};
use crate::corpus::ToolCorpus;
use crate::error::{Error, Result};
use crate::planner::{
    format_feedback, user_query_message, Plan, Planner, PlannerAction, BEGIN_RETRIEVAL,
    DEFAULT_SYSTEM_PROMPT,
};
use crate::retriever::{Provenance, RetrievalRun, Retriever};

fn default_prompt() -> String {
    DEFAULT_SYSTEM_PROMPT.to_string()
}

fn is_default_prompt(p: &str) -> bool {
    p == DEFAULT_SYSTEM_PROMPT
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub feedback_k: usize,
    pub max_turns: usize,
    pub include_user_query_run: bool,
    /// Depth of the anchor run.
    pub anchor_k: usize,
    #[serde(default = "default_prompt", skip_serializing_if = "is_default_prompt")]
    pub system_prompt: String,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            feedback_k: 5,
            max_turns: 10,
            include_user_query_run: true,
            anchor_k: 10,
            system_prompt: default_prompt(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feedback_k == 0 || self.max_turns == 0 || self.anchor_k == 0 {
            return Err(Error::Config(
                "feedback_k, max_turns and anchor_k must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ExplicitStop,
    TurnCap,
    /// The planner failed; the trajectory is partial.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_goal_tag: Option<String>,
    pub run: RetrievalRun,
    pub feedback: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub user_query: String,
    pub config: EpisodeConfig,
    pub provenance: Provenance,
    pub plan: Option<Plan>,
    pub turns: Vec<Turn>,
    pub stopped: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_run: Option<RetrievalRun>,
    pub messages: Vec<ChatMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trajectory {
    pub fn assistant_turns(&self) -> Vec<&str> {
        self.messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
            .collect()
    }

    /// Anchor run first (untagged), then every query run tagged with its
    /// sub-goal label.
    pub fn labeled_runs(&self) -> Vec<LabeledRun<'_>> {
        let mut runs = Vec::with_capacity(self.turns.len() + 1);
        if let Some(anchor) = &self.anchor_run {
            runs.push(LabeledRun { view: None, run: anchor });
        }
        runs.extend(self.turns.iter().map(|t| LabeledRun {
            view: t.sub_goal_tag.as_deref(),
            run: &t.run,
        }));
        runs
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// A planner failure, with everything recorded up to that point.
#[derive(Debug, thiserror::Error)]
#[error("episode aborted after {} turn(s): {source}", partial.turns.len())]
pub struct EpisodeError {
    pub partial: Box<Trajectory>,
    #[source]
    pub source: Error,
}

pub fn run_episode(
    planner: &mut dyn Planner,
    retriever: &dyn Retriever,
    corpus: &ToolCorpus,
    user_query: &str,
    config: &EpisodeConfig,
) -> std::result::Result<Trajectory, EpisodeError> {
    let mut traj = Trajectory {
        query_id: None,
        user_query: user_query.to_string(),
        config: config.clone(),
        provenance: retriever.provenance(),
        plan: None,
        turns: Vec::new(),
        stopped: StopReason::Aborted,
        anchor_run: None,
        messages: vec![
            ChatMessage::system(config.system_prompt.clone()),
            ChatMessage::user(user_query_message(user_query)),
        ],
        error: None,
    };
    match drive(planner, retriever, corpus, config, &mut traj) {
        Ok(reason) => {
            traj.stopped = reason;
            Ok(traj)
        }
        Err(source) => {
            traj.stopped = StopReason::Aborted;
            traj.error = Some(source.to_string());
            Err(EpisodeError {
                partial: Box::new(traj),
                source,
            })
        }
    }
}

fn drive(
    planner: &mut dyn Planner,
    retriever: &dyn Retriever,
    corpus: &ToolCorpus,
    config: &EpisodeConfig,
    traj: &mut Trajectory,
) -> Result<StopReason> {
    config.validate()?;
    if config.include_user_query_run {
        traj.anchor_run = Some(retriever.search(&traj.user_query, config.anchor_k)?);
    }

    let mut next = |traj: &mut Trajectory, turn_index: usize| match planner
        .next_action(&traj.messages, turn_index)
    {
        Ok(turn) => {
            traj.messages.push(ChatMessage::assistant(turn.raw));
            Ok(turn.action)
        }
        Err(e) => {
            if let Error::PlannerReply { raw, .. } = &e {
                traj.messages.push(ChatMessage::assistant(raw.clone()));
            }
            Err(e)
        }
    };

    match next(traj, 0)? {
        PlannerAction::Plan(plan) => traj.plan = Some(plan),
        other => {
            return Err(Error::Protocol(format!(
                "first action must be a plan, got {other:?}"
            )))
        }
    }
    traj.messages.push(ChatMessage::user(BEGIN_RETRIEVAL));

    for turn_index in 1.. {
        if traj.turns.len() >= config.max_turns {
            return Ok(StopReason::TurnCap);
        }
        match next(traj, turn_index)? {
            PlannerAction::Stop => return Ok(StopReason::ExplicitStop),
            PlannerAction::Plan(_) => {
                return Err(Error::Protocol(format!("plan repeated at turn {turn_index}")))
            }
            PlannerAction::Query { sub_goal_tag, text } => {
                let run = retriever.search(&text, config.feedback_k)?;
                let feedback = format_feedback(&run, corpus, config.feedback_k);
                traj.messages.push(ChatMessage::user(feedback.clone()));
                traj.turns.push(Turn {
                    query: text,
                    sub_goal_tag,
                    run,
                    feedback,
                });
            }
        }
    }
    unreachable!("turn loop only exits by return")
}

/// Input for [`run_batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeJob {
    pub query_id: String,
    pub user_query: String,
}

/// Runs independent episodes on up to `parallel` threads. Results keep input
/// order.
pub fn run_batch<F>(
    jobs: &[EpisodeJob],
    make_planner: F,
    retriever: &dyn Retriever,
    corpus: &ToolCorpus,
    config: &EpisodeConfig,
    parallel: usize,
) -> Vec<std::result::Result<Trajectory, EpisodeError>>
where
    F: Fn(&EpisodeJob) -> Result<Box<dyn Planner>> + Sync,
{
    let run_one = |job: &EpisodeJob| {
        let mut planner = match make_planner(job) {
            Ok(p) => p,
            Err(source) => {
                return Err(EpisodeError {
                    partial: Box::new(Trajectory {
                        query_id: Some(job.query_id.clone()),
                        user_query: job.user_query.clone(),
                        config: config.clone(),
                        provenance: retriever.provenance(),
                        plan: None,
                        turns: Vec::new(),
                        stopped: StopReason::Aborted,
                        anchor_run: None,
                        messages: Vec::new(),
                        error: Some(source.to_string()),
                    }),
                    source,
                })
            }
        };
        let tag = |mut t: Trajectory| {
            t.query_id = Some(job.query_id.clone());
            t
        };
        run_episode(planner.as_mut(), retriever, corpus, &job.user_query, config)
            .map(tag)
            .map_err(|mut e| {
                e.partial.query_id = Some(job.query_id.clone());
                e
            })
    };
    match rayon::ThreadPoolBuilder::new().num_threads(parallel.max(1)).build() {
        Ok(pool) => pool.install(|| jobs.par_iter().map(run_one).collect()),
        Err(e) => {
            log::warn!("thread pool unavailable ({e}); running sequentially");
            jobs.iter().map(run_one).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub turns_equal: Vec<bool>,
    pub anchor_equal: Option<bool>,
    /// The corpus hash differs from the one recorded in the trajectory.
    pub corpus_changed: bool,
}

impl ReplayReport {
    pub fn all_equal(&self) -> bool {
        self.turns_equal.iter().all(|&e| e) && self.anchor_equal.unwrap_or(true)
    }
}

/// Re-executes every stored query and compares the runs. The retriever must
/// be the same backend and render style; a changed corpus is allowed and
/// reported.
pub fn replay_trajectory(traj: &Trajectory, retriever: &dyn Retriever) -> Result<ReplayReport> {
    let now = retriever.provenance();
    if now.retriever_key() != traj.provenance.retriever_key() {
        return Err(Error::ProvenanceMismatch {
            expected: traj.provenance.retriever_key(),
            found: now.retriever_key(),
        });
    }
    let turns_equal = traj
        .turns
        .iter()
        .map(|t| Ok(retriever.search(&t.query, traj.config.feedback_k)? == t.run))
        .collect::<Result<Vec<bool>>>()?;
    let anchor_equal = match &traj.anchor_run {
        Some(run) => Some(retriever.search(&traj.user_query, traj.config.anchor_k)? == *run),
        None => None,
    };
    Ok(ReplayReport {
        turns_equal,
        anchor_equal,
        corpus_changed: now.corpus_hash != traj.provenance.corpus_hash,
    })
}

pub fn write_trajectories<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut n = 0;
    for t in trajectories {
        writeln!(file, "{}", t.to_json_line()?).map_err(|e| Error::io(path, e))?;
        n += 1;
    }
    Ok(n)
}

pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

//! Rollout rewards for RL with verifiable rewards.
//!
//! ```text
//! total = w_ndcg * dNDCG + w_recall * dRecall      (retrieval, vs. baseline)
//!       + w_format * format_fraction + w_stop * stop_flag
//!       + w_plan * cos(predicted plan, reference plan)
//! ```
//!
//! The baseline is one search with `"{query}\n{reference plan}"`. Deltas are
//! taken at K = 5 by default.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregation::{fuse, FusedList, FusionMethod, DEFAULT_RRF_C};
use crate::corpus::ToolCorpus;
use crate::episode::Trajectory;
use crate::error::{Error, Result};
use crate::metrics::{ndcg_at_k, recall_at_k, EvalRecord};
use crate::planner::{parse_planner_turn, PlannerAction};
use crate::retriever::{Embedder, RetrievalRun, Retriever};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub ndcg: f64,
    pub recall: f64,
    pub format: f64,
    pub stop: f64,
    pub plan: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            ndcg: 5.0,
            recall: 2.5,
            format: 1.5,
            stop: 0.6,
            plan: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.ndcg, self.recall, self.format, self.stop, self.plan];
        if all.iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("reward weights must be finite".into()))
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            ndcg: self.ndcg * factor,
            recall: self.recall * factor,
            format: self.format * factor,
            stop: self.stop * factor,
            plan: self.plan * factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RewardComponents {
    pub delta_ndcg: f64,
    pub delta_recall: f64,
    pub format_fraction: f64,
    pub stop_flag: u8,
    pub plan_similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    #[serde(flatten)]
    pub components: RewardComponents,
    pub total: f64,
}

impl RewardBreakdown {
    /// Recomputes the weighted sum and compares it bit-for-bit with `total`.
    pub fn satisfies_identity(&self, weights: &RewardWeights) -> bool {
        weighted_sum(&self.components, weights).to_bits() == self.total.to_bits()
    }
}

fn weighted_sum(c: &RewardComponents, w: &RewardWeights) -> f64 {
    w.ndcg * c.delta_ndcg
        + w.recall * c.delta_recall
        + w.format * c.format_fraction
        + w.stop * f64::from(c.stop_flag)
        + w.plan * c.plan_similarity
}

pub fn total_reward(components: RewardComponents, weights: &RewardWeights) -> RewardBreakdown {
    RewardBreakdown {
        components,
        total: weighted_sum(&components, weights),
    }
}

/// Searches `"{query}\n{plan}"`, or just the query when the plan is empty.
pub fn baseline_run(retriever: &dyn Retriever, query: &str, plan: &str, k: usize) -> Result<RetrievalRun> {
    if query.trim().is_empty() {
        return Err(Error::InvalidArgument("empty user query".into()));
    }
    let text = if plan.is_empty() {
        query.to_string()
    } else {
        format!("{query}\n{plan}")
    };
    retriever.search(&text, k)
}

/// `(nDCG@k(fused) - nDCG@k(baseline), Recall@k(fused) - Recall@k(baseline))`.
pub fn retrieval_reward(
    fused: &FusedList,
    baseline: &RetrievalRun,
    targets: &[String],
    k: usize,
) -> Result<(f64, f64)> {
    let targets = targets.iter().map(String::as_str).collect();
    let fused_ids = fused.tool_ids();
    let base_ids = baseline.tool_ids();
    Ok((
        ndcg_at_k(&fused_ids, &targets, k)? - ndcg_at_k(&base_ids, &targets, k)?,
        recall_at_k(&fused_ids, &targets, k)? - recall_at_k(&base_ids, &targets, k)?,
    ))
}

/// Fraction of assistant turns that parse at their position, and whether the
/// last one is a stop. The plan turn counts.
pub fn format_reward<S: AsRef<str>>(assistant_turns: &[S]) -> (f64, u8) {
    if assistant_turns.is_empty() {
        return (0.0, 0);
    }
    let parsed: Vec<Option<PlannerAction>> = assistant_turns
        .iter()
        .enumerate()
        .map(|(i, raw)| parse_planner_turn(raw.as_ref(), i).ok())
        .collect();
    let ok = parsed.iter().filter(|p| p.is_some()).count();
    let stop = matches!(parsed.last(), Some(Some(PlannerAction::Stop)));
    (ok as f64 / parsed.len() as f64, u8::from(stop))
}

/// Cosine similarity of the two plans' embeddings. Not clamped.
pub fn plan_reward(predicted: &str, reference: &str, embedder: &dyn Embedder) -> Result<f64> {
    if predicted.trim().is_empty() || reference.trim().is_empty() {
        return Err(Error::InvalidArgument("plan text is empty".into()));
    }
    let vecs = embedder.embed_batch(&[predicted.to_string(), reference.to_string()])?;
    match vecs.as_slice() {
        [a, b] => Ok(a.cosine(b)),
        _ => Err(Error::InvalidArgument("embedder returned wrong number of vectors".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub k: usize,
    pub weights: RewardWeights,
    pub method: FusionMethod,
    pub rrf_c: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            k: 5,
            weights: RewardWeights::default(),
            method: FusionMethod::PeakRank,
            rrf_c: DEFAULT_RRF_C,
        }
    }
}

/// One row of the reward audit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReward {
    pub query_id: String,
    pub fused_run_id: String,
    pub baseline_run_id: String,
    #[serde(flatten)]
    pub breakdown: RewardBreakdown,
}

/// Scores one finished rollout against its record. A rollout whose first
/// turn is not a parseable plan gets zero plan similarity.
pub fn score_rollout(
    trajectory: &Trajectory,
    record: &EvalRecord,
    retriever: &dyn Retriever,
    corpus: &ToolCorpus,
    embedder: &dyn Embedder,
    config: &RewardConfig,
) -> Result<RolloutReward> {
    let reference = record
        .plan
        .as_deref()
        .filter(|p| !p.trim().is_empty())
        .ok_or_else(|| Error::Skipped {
            record: record.query_id.clone(),
            reason: "no reference plan".into(),
        })?;
    let fused = fuse(config.method, &trajectory.labeled_runs(), config.rrf_c, corpus);
    let baseline = baseline_run(retriever, &record.user_query, reference, config.k)?;
    let (delta_ndcg, delta_recall) = retrieval_reward(&fused, &baseline, &record.targets, config.k)?;
    let (format_fraction, stop_flag) = format_reward(&trajectory.assistant_turns());
    let plan_similarity = match &trajectory.plan {
        Some(plan) if !plan.breakdown.trim().is_empty() => plan_reward(&plan.breakdown, reference, embedder)?,
        _ => 0.0,
    };
    let components = RewardComponents {
        delta_ndcg,
        delta_recall,
        format_fraction,
        stop_flag,
        plan_similarity,
    };
    Ok(RolloutReward {
        query_id: record.query_id.clone(),
        fused_run_id: format!("{}:fused:{}", record.query_id, config.method.as_str()),
        baseline_run_id: format!("{}:baseline", record.query_id),
        breakdown: total_reward(components, &config.weights),
    })
}

pub fn write_reward_audit<'a>(
    rows: impl IntoIterator<Item = &'a RolloutReward>,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut n = 0;
    for row in rows {
        writeln!(file, "{}", serde_json::to_string(row)?).map_err(|e| Error::io(path, e))?;
        n += 1;
    }
    Ok(n)
}

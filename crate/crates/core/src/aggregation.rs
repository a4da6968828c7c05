//! Fusing the runs of one episode into a single ranked list.
//!
//! Peak-rank orders every tool by the best rank it reached in any run, so a
//! sub-goal that needed five queries gets no more weight than one that needed
//! one. RRF and multi-view fusion are provided for comparison.
//!
//! Tie-breaking is fixed: peak-rank uses (best rank, earliest run reaching it,
//! corpus position); RRF uses (score, corpus position). Ids missing from the
//! corpus sort after known ones, by id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::ToolCorpus;
use crate::error::{Error, Result};
use crate::retriever::RetrievalRun;

pub const DEFAULT_RRF_C: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    #[default]
    PeakRank,
    Rrf,
    MultiView,
}

impl FusionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMethod::PeakRank => "peak_rank",
            FusionMethod::Rrf => "rrf",
            FusionMethod::MultiView => "multi_view",
        }
    }
}

impl std::str::FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "peak_rank" | "peak-rank" => Ok(FusionMethod::PeakRank),
            "rrf" => Ok(FusionMethod::Rrf),
            "multi_view" | "multi-view" => Ok(FusionMethod::MultiView),
            other => Err(Error::InvalidArgument(format!("unknown aggregation method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedHit {
    pub tool_id: String,
    pub fused_score: f64,
    /// Number of input runs containing the tool.
    pub source_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedList {
    pub method: FusionMethod,
    pub hits: Vec<FusedHit>,
}

impl FusedList {
    pub fn tool_ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.tool_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    /// Fused list dump: `rank\ttool_id\tfused_score\tsource_count`.
    pub fn write_tsv(&self, mut out: impl Write, with_header: bool) -> std::io::Result<()> {
        if with_header {
            writeln!(out, "rank\ttool_id\tfused_score\tsource_count")?;
        }
        for (i, h) in self.hits.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}", i + 1, h.tool_id, h.fused_score, h.source_count)?;
        }
        Ok(())
    }
}

/// A run with the view it belongs to (its sub-goal tag; `None` for untagged).
#[derive(Debug, Clone, Copy)]
pub struct LabeledRun<'a> {
    pub view: Option<&'a str>,
    pub run: &'a RetrievalRun,
}

fn corpus_key<'a>(corpus: &ToolCorpus, id: &'a str) -> (usize, &'a str) {
    (corpus.position(id).unwrap_or(usize::MAX), id)
}

fn source_counts<'a>(runs: &[&'a RetrievalRun]) -> HashMap<&'a str, usize> {
    let mut counts = HashMap::new();
    for run in runs {
        for hit in &run.hits {
            *counts.entry(hit.tool_id.as_str()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn peak_rank(runs: &[&RetrievalRun], corpus: &ToolCorpus) -> FusedList {
    // tool -> (best rank, first run index achieving it)
    let mut best: HashMap<&str, (usize, usize)> = HashMap::new();
    for (run_idx, run) in runs.iter().enumerate() {
        for hit in &run.hits {
            best.entry(hit.tool_id.as_str())
                .and_modify(|e| {
                    if hit.rank < e.0 {
                        *e = (hit.rank, run_idx);
                    }
                })
                .or_insert((hit.rank, run_idx));
        }
    }
    let counts = source_counts(runs);
    let mut entries: Vec<(&str, usize, usize)> =
        best.into_iter().map(|(id, (rank, run))| (id, rank, run)).collect();
    entries.sort_by(|a, b| {
        a.1.cmp(&b.1)
            .then(a.2.cmp(&b.2))
            .then_with(|| corpus_key(corpus, a.0).cmp(&corpus_key(corpus, b.0)))
    });
    FusedList {
        method: FusionMethod::PeakRank,
        hits: entries
            .into_iter()
            .map(|(id, rank, _)| FusedHit {
                tool_id: id.to_string(),
                fused_score: -(rank as f64),
                source_count: counts[id],
            })
            .collect(),
    }
}

/// Reciprocal rank fusion: `score(t) = sum over runs containing t of 1 / (c + rank)`.
pub fn rrf(runs: &[&RetrievalRun], c: f64, corpus: &ToolCorpus) -> FusedList {
    let mut scores: HashMap<&str, f64> = HashMap::new();
    for run in runs {
        for hit in &run.hits {
            *scores.entry(hit.tool_id.as_str()).or_insert(0.0) += 1.0 / (c + hit.rank as f64);
        }
    }
    let counts = source_counts(runs);
    let mut entries: Vec<(&str, f64)> = scores.into_iter().collect();
    entries.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => corpus_key(corpus, a.0).cmp(&corpus_key(corpus, b.0)),
        other => other,
    });
    FusedList {
        method: FusionMethod::Rrf,
        hits: entries
            .into_iter()
            .map(|(id, score)| FusedHit {
                tool_id: id.to_string(),
                fused_score: score,
                source_count: counts[id],
            })
            .collect(),
    }
}

/// Peak-rank fuses the runs of each view, then interleaves the views
/// round-robin in order of first appearance, skipping tools already taken.
/// `fused_score` is the negated output position.
pub fn multi_view_fusion(runs: &[LabeledRun<'_>], corpus: &ToolCorpus) -> FusedList {
    let mut views: Vec<(Option<&str>, Vec<&RetrievalRun>)> = Vec::new();
    for lr in runs {
        match views.iter_mut().find(|(v, _)| *v == lr.view) {
            Some((_, members)) => members.push(lr.run),
            None => views.push((lr.view, vec![lr.run])),
        }
    }
    let fused_views: Vec<FusedList> = views.iter().map(|(_, r)| peak_rank(r, corpus)).collect();
    let all: Vec<&RetrievalRun> = runs.iter().map(|lr| lr.run).collect();
    let counts = source_counts(&all);

    let mut cursors = vec![0usize; fused_views.len()];
    let mut taken = std::collections::HashSet::new();
    let mut hits = Vec::new();
    loop {
        let mut progressed = false;
        for (view, cursor) in fused_views.iter().zip(cursors.iter_mut()) {
            while *cursor < view.hits.len() {
                let id = &view.hits[*cursor].tool_id;
                *cursor += 1;
                if taken.insert(id.clone()) {
                    hits.push(FusedHit {
                        tool_id: id.clone(),
                        fused_score: -((hits.len() + 1) as f64),
                        source_count: counts[id.as_str()],
                    });
                    progressed = true;
                    break;
                }
            }
        }
        if !progressed {
            break;
        }
    }
    FusedList {
        method: FusionMethod::MultiView,
        hits,
    }
}

/// Dispatches to one fusion method. Views only matter for multi-view fusion.
pub fn fuse(method: FusionMethod, runs: &[LabeledRun<'_>], rrf_c: f64, corpus: &ToolCorpus) -> FusedList {
    let plain: Vec<&RetrievalRun> = runs.iter().map(|lr| lr.run).collect();
    match method {
        FusionMethod::PeakRank => peak_rank(&plain, corpus),
        FusionMethod::Rrf => rrf(&plain, rrf_c, corpus),
        FusionMethod::MultiView => multi_view_fusion(runs, corpus),
    }
}

pub fn truncate(fused: &FusedList, k: usize) -> FusedList {
    FusedList {
        method: fused.method,
        hits: fused.hits.iter().take(k).cloned().collect(),
    }
}

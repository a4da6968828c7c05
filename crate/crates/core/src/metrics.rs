//! Binary-relevance ranking metrics and macro-averaged reports.
//!
//! nDCG@K uses gain 1 for targets and discount `1 / log2(i + 1)` for 1-based
//! position `i`; the ideal DCG places `min(K, |targets|)` targets first.
//! Category scores average dataset means, so every dataset weighs the same
//! regardless of how many records it has.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

/// One benchmark instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    #[serde(alias = "query")]
    pub user_query: String,
    #[serde(alias = "target_tool_ids")]
    pub targets: Vec<String>,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    /// Reference plan, used by the plan reward.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<String>,
}

impl EvalRecord {
    pub fn target_set(&self) -> HashSet<&str> {
        self.targets.iter().map(String::as_str).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::InvalidArgument(format!("record {}: no targets", self.query_id)));
        }
        if self.dataset.is_empty() {
            return Err(Error::InvalidArgument(format!("record {}: empty dataset", self.query_id)));
        }
        Ok(())
    }
}

pub fn load_eval_records(path: impl AsRef<Path>) -> Result<Vec<EvalRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

fn check(targets: &HashSet<&str>, k: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("empty target set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    Ok(())
}

/// Targets found in the top `k`, each counted once.
fn hits_in_top_k<'a, S: AsRef<str>>(ranked: &'a [S], targets: &HashSet<&str>, k: usize) -> Vec<(usize, &'a str)> {
    let mut seen = HashSet::new();
    ranked
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| (i + 1, id.as_ref()))
        .filter(|(_, id)| targets.contains(id) && seen.insert(*id))
        .collect()
}

pub fn ndcg_at_k<S: AsRef<str>>(ranked: &[S], targets: &HashSet<&str>, k: usize) -> Result<f64> {
    check(targets, k)?;
    let discount = |pos: usize| 1.0 / ((pos + 1) as f64).log2();
    let dcg: f64 = hits_in_top_k(ranked, targets, k).iter().map(|&(pos, _)| discount(pos)).sum();
    let idcg: f64 = (1..=k.min(targets.len())).map(discount).sum();
    Ok(dcg / idcg)
}

pub fn recall_at_k<S: AsRef<str>>(ranked: &[S], targets: &HashSet<&str>, k: usize) -> Result<f64> {
    check(targets, k)?;
    Ok(hits_in_top_k(ranked, targets, k).len() as f64 / targets.len() as f64)
}

/// 1 when every target is in the top `k`, else 0.
pub fn completeness_at_k<S: AsRef<str>>(ranked: &[S], targets: &HashSet<&str>, k: usize) -> Result<u8> {
    check(targets, k)?;
    Ok(u8::from(hits_in_top_k(ranked, targets, k).len() == targets.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Scores {
    pub ndcg: f64,
    pub recall: f64,
    pub completeness: f64,
}

impl Scores {
    fn mean(items: impl Iterator<Item = Scores>) -> Scores {
        let mut n = 0usize;
        let mut sum = Scores::default();
        for s in items {
            n += 1;
            sum.ndcg += s.ndcg;
            sum.recall += s.recall;
            sum.completeness += s.completeness;
        }
        if n == 0 {
            return sum;
        }
        let n = n as f64;
        Scores {
            ndcg: sum.ndcg / n,
            recall: sum.recall / n,
            completeness: sum.completeness / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub query_id: String,
    pub dataset: String,
    pub category: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAggregate {
    pub category: String,
    pub records: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAggregate {
    pub datasets: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub per_record: Vec<RecordScore>,
    pub per_dataset: BTreeMap<String, DatasetAggregate>,
    pub per_category: BTreeMap<String, CategoryAggregate>,
    /// Mean over categories.
    pub overall: Scores,
}

pub fn score_record<S: AsRef<str>>(ranked: &[S], record: &EvalRecord, k: usize) -> Result<Scores> {
    let targets = record.target_set();
    Ok(Scores {
        ndcg: ndcg_at_k(ranked, &targets, k)?,
        recall: recall_at_k(ranked, &targets, k)?,
        completeness: f64::from(completeness_at_k(ranked, &targets, k)?),
    })
}

/// Looks up a dataset's category: explicit map first, then the record's own label.
fn category_of(record: &EvalRecord, categories: &HashMap<String, String>) -> Result<String> {
    categories
        .get(&record.dataset)
        .cloned()
        .or_else(|| record.category.clone())
        .ok_or_else(|| Error::UnmappedDataset(record.dataset.clone()))
}

/// Macro-averages per-record scores: dataset means, then category means of
/// dataset means, then the overall mean of category means.
pub fn macro_average(rows: Vec<RecordScore>, k: usize) -> MetricReport {
    let mut by_dataset: BTreeMap<String, (String, Vec<Scores>)> = BTreeMap::new();
    for row in &rows {
        by_dataset
            .entry(row.dataset.clone())
            .or_insert_with(|| (row.category.clone(), Vec::new()))
            .1
            .push(row.scores);
    }
    let per_dataset: BTreeMap<String, DatasetAggregate> = by_dataset
        .into_iter()
        .map(|(ds, (category, scores))| {
            (
                ds,
                DatasetAggregate {
                    category,
                    records: scores.len(),
                    scores: Scores::mean(scores.into_iter()),
                },
            )
        })
        .collect();
    let mut by_category: BTreeMap<String, Vec<Scores>> = BTreeMap::new();
    for agg in per_dataset.values() {
        by_category.entry(agg.category.clone()).or_default().push(agg.scores);
    }
    let per_category: BTreeMap<String, CategoryAggregate> = by_category
        .into_iter()
        .map(|(cat, scores)| {
            (
                cat,
                CategoryAggregate {
                    datasets: scores.len(),
                    scores: Scores::mean(scores.into_iter()),
                },
            )
        })
        .collect();
    let overall = Scores::mean(per_category.values().map(|c| c.scores));
    MetricReport {
        k,
        per_record: rows,
        per_dataset,
        per_category,
        overall,
    }
}

/// Scores every record against its ranked list. Records with no list score
/// as an empty ranking.
pub fn evaluate(
    records: &[EvalRecord],
    rankings: &HashMap<String, Vec<String>>,
    k: usize,
    categories: &HashMap<String, String>,
) -> Result<MetricReport> {
    let rows = records
        .par_iter()
        .map(|record| {
            let category = category_of(record, categories)?;
            let ranked = match rankings.get(&record.query_id) {
                Some(r) => r.as_slice(),
                None => {
                    log::warn!("no ranking for record {}", record.query_id);
                    &[]
                }
            };
            Ok(RecordScore {
                query_id: record.query_id.clone(),
                dataset: record.dataset.clone(),
                category,
                scores: score_record(ranked, record, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(macro_average(rows, k))
}

impl MetricReport {
    /// Per-record rows followed by dataset, category and overall rows.
    pub fn write_tsv(&self, mut out: impl Write) -> std::io::Result<()> {
        let k = self.k;
        writeln!(
            out,
            "row\tdataset\tcategory\tndcg@{k}\trecall@{k}\tcompleteness@{k}"
        )?;
        let line = |out: &mut dyn Write, row: &str, ds: &str, cat: &str, s: &Scores| {
            writeln!(
                out,
                "{row}\t{ds}\t{cat}\t{:.6}\t{:.6}\t{:.6}",
                s.ndcg, s.recall, s.completeness
            )
        };
        for r in &self.per_record {
            line(&mut out, &r.query_id, &r.dataset, &r.category, &r.scores)?;
        }
        for (ds, agg) in &self.per_dataset {
            line(&mut out, "dataset_mean", ds, &agg.category, &agg.scores)?;
        }
        for (cat, agg) in &self.per_category {
            line(&mut out, "category_mean", "*", cat, &agg.scores)?;
        }
        line(&mut out, "overall_mean", "*", "*", &self.overall)
    }

    /// Per-category N@K / R@K / C@K plus their average.
    pub fn summary_json(&self) -> Value {
        let k = self.k;
        let cell = |s: &Scores| {
            json!({
                format!("ndcg@{k}"): s.ndcg,
                format!("recall@{k}"): s.recall,
                format!("completeness@{k}"): s.completeness,
            })
        };
        let mut cats = Map::new();
        for (cat, agg) in &self.per_category {
            let mut c = cell(&agg.scores);
            c["datasets"] = json!(agg.datasets);
            cats.insert(cat.clone(), c);
        }
        json!({ "k": k, "categories": cats, "average": cell(&self.overall) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set<'a>(ids: &[&'a str]) -> HashSet<&'a str> {
        ids.iter().copied().collect()
    }

    #[test]
    fn perfect_single_target() {
        assert_eq!(ndcg_at_k(&["A", "X", "Y"], &set(&["A"]), 10).unwrap(), 1.0);
    }

    #[test]
    fn worked_two_target_value() {
        let expected = (1.0 + 1.0 / 4f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        let got = ndcg_at_k(&["A", "X", "B"], &set(&["A", "B"]), 3).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.9197).abs() < 1e-4);
    }

    #[test]
    fn misses_and_partial_recall() {
        assert_eq!(ndcg_at_k(&["X", "Y", "A"], &set(&["A"]), 2).unwrap(), 0.0);
        assert_eq!(recall_at_k(&["A", "X"], &set(&["A", "B"]), 10).unwrap(), 0.5);
        assert_eq!(completeness_at_k(&["A", "X"], &set(&["A", "B"]), 10).unwrap(), 0);
        assert_eq!(completeness_at_k(&["B", "A"], &set(&["A", "B"]), 10).unwrap(), 1);
        assert_eq!(recall_at_k(&["B", "A"], &set(&["A", "B"]), 10).unwrap(), 1.0);
    }

    #[test]
    fn empty_targets_and_zero_k_are_errors() {
        assert!(ndcg_at_k(&["A"], &set(&[]), 3).is_err());
        assert!(recall_at_k(&["A"], &set(&["A"]), 0).is_err());
    }

    #[test]
    fn short_lists_are_scored_as_is() {
        let got = ndcg_at_k(&["A"], &set(&["A", "B"]), 10).unwrap();
        assert!((got - 1.0 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-15);
    }

    fn row(id: &str, ds: &str, cat: &str, v: f64) -> RecordScore {
        RecordScore {
            query_id: id.into(),
            dataset: ds.into(),
            category: cat.into(),
            scores: Scores { ndcg: v, recall: v, completeness: v },
        }
    }

    #[test]
    fn dataset_mean() {
        let r = macro_average(vec![row("1", "d", "Web", 0.4), row("2", "d", "Web", 0.6)], 10);
        assert!((r.per_dataset["d"].scores.ndcg - 0.5).abs() < 1e-15);
    }

    #[test]
    fn category_mean_weights_datasets_equally() {
        let mut rows = vec![row("a1", "small", "Code", 0.2), row("a2", "small", "Code", 0.2)];
        rows.extend((0..200).map(|i| row(&format!("b{i}"), "large", "Code", 0.8)));
        let r = macro_average(rows, 10);
        assert!((r.per_category["Code"].scores.ndcg - 0.5).abs() < 1e-12);
        assert_eq!(r.per_category["Code"].datasets, 2);
    }

    #[test]
    fn unmapped_dataset_is_an_error() {
        let rec = EvalRecord {
            query_id: "q".into(),
            user_query: "x".into(),
            targets: vec!["A".into()],
            dataset: "mystery".into(),
            category: None,
            plan: None,
        };
        let err = evaluate(&[rec], &HashMap::new(), 10, &HashMap::new()).unwrap_err();
        assert!(matches!(err, Error::UnmappedDataset(d) if d == "mystery"));
    }

    #[test]
    fn tsv_header_carries_k() {
        let r = macro_average(vec![row("1", "d", "Web", 1.0)], 7);
        let mut buf = Vec::new();
        r.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("row\tdataset\tcategory\tndcg@7\trecall@7\tcompleteness@7\n"));
        assert!(text.contains("overall_mean"));
        assert_eq!(r.summary_json()["k"], 7);
        assert_eq!(r.summary_json()["categories"]["Web"]["ndcg@7"], 1.0);
    }
}

//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when some records failed (outputs for the rest
//! are still written), 2 on configuration or I/O errors.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::aggregation::{fuse, FusedList, FusionMethod};
use crate::config::{Backend, CacheStatus, EngineConfig};
use crate::episode::{run_batch, write_trajectories, read_trajectories, EpisodeJob, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, load_eval_records};
use crate::reward::{score_rollout, write_reward_audit};
use crate::synthesis::{emit_sft_dataset, load_synthesis_records, synthesize_all, write_audit};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "toolplan", version, about = "Query planning for tool retrieval")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Engine configuration (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for episodes and records.
    #[arg(long, global = true)]
    pub parallel: Option<usize>,
    /// Overrides the embedding endpoint URL.
    #[arg(long, global = true)]
    pub embed_url: Option<String>,
    /// Overrides the planner and teacher chat endpoint URL.
    #[arg(long, global = true)]
    pub chat_url: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the retrieval index and write its cache.
    Index,
    /// Run planning episodes and fuse their runs.
    Retrieve {
        /// A single user query.
        #[arg(long, conflicts_with = "eval")]
        query: Option<String>,
        /// Id used for --query.
        #[arg(long, default_value = "q0")]
        query_id: String,
        /// JSONL evaluation records to run.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Overrides episode.max_turns
        #[arg(long)]
        max_turns: Option<usize>,
        /// peak_rank, rrf or multi_view
        #[arg(long)]
        aggregation: Option<FusionMethod>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score fused lists against evaluation records.
    Eval {
        /// fused.jsonl written by `retrieve`.
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        /// Overrides metrics.k
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize verified SFT transcripts.
    Synthesize {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute rollout rewards for finished trajectories.
    Reward {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// One line of `fused.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRecord {
    pub query_id: String,
    #[serde(flatten)]
    pub list: FusedList,
}

pub fn read_fused(path: &Path) -> Result<Vec<FusedRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn load_config(global: &GlobalArgs) -> Result<EngineConfig> {
    let mut cfg = match &global.config {
        Some(p) => EngineConfig::load(p)?,
        None => EngineConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = global.parallel {
        cfg.parallel = n;
    }
    if let Some(url) = &global.embed_url {
        cfg.retriever.remote.url = url.clone();
    }
    if let Some(url) = &global.chat_url {
        cfg.planner.remote.url = url.clone();
        cfg.teacher.remote.url = url.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish(failures: usize) -> i32 {
    if failures == 0 {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    }
}

fn cmd_index(cfg: &EngineConfig) -> Result<i32> {
    let corpus = cfg.load_corpus()?;
    let (status, provenance) = match cfg.retriever.backend {
        Backend::Bm25 => (CacheStatus::Uncached, cfg.retriever(&corpus)?.provenance()),
        Backend::Hash | Backend::Remote => {
            let (index, status) = cfg.dense_index(&corpus)?;
            (status, crate::retriever::Retriever::provenance(&index))
        }
    };
    let summary = serde_json::json!({
        "tools": corpus.len(),
        "cache": cfg.retriever.cache_path,
        "cache_status": status,
        "provenance": provenance,
    });
    println!("{summary}");
    Ok(EXIT_OK)
}

fn cmd_retrieve(
    cfg: &mut EngineConfig,
    query: Option<String>,
    query_id: String,
    eval: Option<PathBuf>,
    max_turns: Option<usize>,
    aggregation: Option<FusionMethod>,
    out: &Path,
) -> Result<i32> {
    if let Some(n) = max_turns {
        cfg.episode.max_turns = n;
    }
    if let Some(m) = aggregation {
        cfg.aggregation.method = m;
    }
    cfg.validate()?;
    let jobs: Vec<EpisodeJob> = match (query, eval) {
        (Some(q), None) => vec![EpisodeJob { query_id, user_query: q }],
        (None, Some(path)) => load_eval_records(path)?
            .into_iter()
            .map(|r| EpisodeJob { query_id: r.query_id, user_query: r.user_query })
            .collect(),
        _ => return Err(Error::Config("retrieve needs exactly one of --query or --eval".into())),
    };
    let corpus = cfg.load_corpus()?;
    let retriever = cfg.retriever(&corpus)?;
    let scripts = cfg.planner_scripts()?;
    let results = run_batch(
        &jobs,
        |job| cfg.planner_for(&job.query_id, &scripts),
        retriever.as_ref(),
        &corpus,
        &cfg.episode,
        cfg.parallel,
    );

    create_dir(out)?;
    let mut failures = 0;
    let mut trajectories: Vec<Trajectory> = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(t) => trajectories.push(t),
            Err(e) => {
                failures += 1;
                log::warn!(
                    "episode {} aborted: {}",
                    e.partial.query_id.as_deref().unwrap_or("?"),
                    e.source
                );
                trajectories.push(*e.partial);
            }
        }
    }
    write_trajectories(&trajectories, out.join("trajectories.jsonl"))?;

    let fused_path = out.join("fused.jsonl");
    let tsv_path = out.join("fused.tsv");
    let mut jsonl = create_file(&fused_path)?;
    let mut tsv = create_file(&tsv_path)?;
    writeln!(tsv, "query_id\trank\ttool_id\tfused_score\tsource_count").map_err(|e| Error::io(&tsv_path, e))?;
    for t in trajectories.iter().filter(|t| t.error.is_none()) {
        let list = fuse(cfg.aggregation.method, &t.labeled_runs(), cfg.aggregation.rrf_c, &corpus);
        let qid = t.query_id.clone().unwrap_or_default();
        for (i, h) in list.hits.iter().enumerate() {
            writeln!(tsv, "{qid}\t{}\t{}\t{}\t{}", i + 1, h.tool_id, h.fused_score, h.source_count)
                .map_err(|e| Error::io(&tsv_path, e))?;
        }
        let line = serde_json::to_string(&FusedRecord { query_id: qid, list })?;
        writeln!(jsonl, "{line}").map_err(|e| Error::io(&fused_path, e))?;
    }
    jsonl.flush().map_err(|e| Error::io(&fused_path, e))?;
    tsv.flush().map_err(|e| Error::io(&tsv_path, e))?;
    Ok(finish(failures))
}

fn cmd_eval(cfg: &EngineConfig, fused: &Path, eval: &Path, k: Option<usize>, out: &Path) -> Result<i32> {
    let k = k.unwrap_or(cfg.metrics.k);
    if k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    let records = load_eval_records(eval)?;
    let rankings: HashMap<String, Vec<String>> = read_fused(fused)?
        .into_iter()
        .map(|f| {
            let ids = f.list.tool_ids().into_iter().map(String::from).collect();
            (f.query_id, ids)
        })
        .collect();
    let report = evaluate(&records, &rankings, k, &cfg.categories())?;
    create_dir(out)?;
    let tsv_path = out.join("metrics.tsv");
    let mut tsv = create_file(&tsv_path)?;
    report.write_tsv(&mut tsv).map_err(|e| Error::io(&tsv_path, e))?;
    tsv.flush().map_err(|e| Error::io(&tsv_path, e))?;
    let json_path = out.join("metrics.json");
    let body = serde_json::to_string_pretty(&report.summary_json())?;
    fs::write(&json_path, body + "\n").map_err(|e| Error::io(&json_path, e))?;
    println!("{}", report.summary_json());
    Ok(EXIT_OK)
}

fn cmd_synthesize(cfg: &EngineConfig, records: &Path, out: &Path) -> Result<i32> {
    let records = load_synthesis_records(records)?;
    let corpus = cfg.load_corpus()?;
    let retriever = cfg.retriever(&corpus)?;
    let teacher = cfg.teacher()?;
    let results = synthesize_all(teacher.as_ref(), retriever.as_ref(), &corpus, &records, &cfg.synthesis, cfg.parallel)?;
    create_dir(out)?;
    let transcripts: Vec<_> = results.iter().filter_map(|r| r.as_ref().ok()).map(|o| &o.transcript).collect();
    let written = emit_sft_dataset(transcripts, out.join("sft.jsonl"))?;
    let audit_path = out.join("audit.tsv");
    let mut audit = create_file(&audit_path)?;
    write_audit(&records, &results, &mut audit).map_err(|e| Error::io(&audit_path, e))?;
    audit.flush().map_err(|e| Error::io(&audit_path, e))?;
    let dropped = results.len() - written;
    println!("{}", serde_json::json!({ "records": records.len(), "written": written, "dropped": dropped }));
    Ok(finish(dropped))
}

fn cmd_reward(cfg: &EngineConfig, trajectories: &Path, eval: &Path, out: &Path) -> Result<i32> {
    let trajectories = read_trajectories(trajectories)?;
    let records: HashMap<String, _> = load_eval_records(eval)?
        .into_iter()
        .map(|r| (r.query_id.clone(), r))
        .collect();
    let corpus = cfg.load_corpus()?;
    let retriever = cfg.retriever(&corpus)?;
    let embedder = cfg.embedder();
    let mut rows = Vec::new();
    let mut failures = 0;
    for t in &trajectories {
        let qid = t.query_id.as_deref().unwrap_or("");
        let Some(record) = records.get(qid) else {
            log::warn!("trajectory {qid:?} has no evaluation record");
            failures += 1;
            continue;
        };
        match score_rollout(t, record, retriever.as_ref(), &corpus, embedder.as_ref(), &cfg.reward) {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::warn!("rollout {qid} not scored: {e}");
                failures += 1;
            }
        }
    }
    let path = if out.extension().is_some() {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        out.to_path_buf()
    } else {
        create_dir(out)?;
        out.join("rewards.jsonl")
    };
    let n = write_reward_audit(&rows, &path)?;
    println!("{}", serde_json::json!({ "rollouts": trajectories.len(), "scored": n, "failed": failures }));
    Ok(finish(failures))
}

pub fn execute(cli: Cli) -> Result<i32> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Index => cmd_index(&cfg),
        Command::Retrieve { query, query_id, eval, max_turns, aggregation, out } => {
            cmd_retrieve(&mut cfg, query, query_id, eval, max_turns, aggregation, &out)
        }
        Command::Eval { fused, eval, k, out } => cmd_eval(&cfg, &fused, &eval, k, &out),
        Command::Synthesize { records, out } => cmd_synthesize(&cfg, &records, &out),
        Command::Reward { trajectories, eval, out } => cmd_reward(&cfg, &trajectories, &eval, &out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

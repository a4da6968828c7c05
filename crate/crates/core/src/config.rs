//! TOML engine configuration.
//!
//! ```toml
//! seed = 7
//! parallel = 4
//!
//! [corpus]
//! path = "tools.jsonl"
//!
//! [retriever]
//! backend = "hash"          # hash | bm25 | remote
//! dim = 512
//! render_style = "schema_json"
//!
//! [planner]
//! kind = "scripted"
//! script_path = "scripts.jsonl"
//!
//! [teacher]
//! kind = "scripted"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! The top-level `seed`, when present, overrides `synthesis.seed`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregation::{FusionMethod, DEFAULT_RRF_C};
use crate::chat::ChatEndpoint;
use crate::corpus::{load_corpus, RenderStyle, ToolCorpus};
use crate::episode::EpisodeConfig;
use crate::error::{Error, Result};
use crate::planner::{load_scripts, Planner, RemotePlanner, ScriptedPlanner};
use crate::retriever::{
    build_index, Bm25Index, Bm25Params, DenseIndex, Embedder, HashEmbedder, RemoteEmbedder, RemoteEndpoint,
    Retriever,
};
use crate::reward::RewardConfig;
use crate::synthesis::{RemoteTeacher, ScriptedTeacher, SynthesisConfig, Teacher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Hash,
    Bm25,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    #[default]
    Scripted,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStatus {
    /// No cache path configured.
    Uncached,
    Hit,
    Built,
    Rebuilt,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSection {
    pub backend: Backend,
    pub dim: usize,
    pub hash_seed: u64,
    pub render_style: RenderStyle,
    pub query_prefix: String,
    pub cache_path: Option<PathBuf>,
    pub remote: RemoteEndpoint,
    pub bm25: Bm25Params,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        Self {
            backend: Backend::Hash,
            dim: 512,
            hash_seed: 0,
            render_style: RenderStyle::SchemaJson,
            query_prefix: String::new(),
            cache_path: None,
            remote: RemoteEndpoint::default(),
            bm25: Bm25Params::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerSection {
    pub kind: AgentKind,
    pub script_path: Option<PathBuf>,
    pub remote: ChatEndpoint,
    pub max_parse_retries: u32,
}

impl Default for PlannerSection {
    fn default() -> Self {
        Self {
            kind: AgentKind::Scripted,
            script_path: None,
            remote: ChatEndpoint::default(),
            max_parse_retries: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub kind: AgentKind,
    /// Optional JSON script for the scripted teacher.
    pub script_path: Option<PathBuf>,
    pub remote: ChatEndpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationSection {
    pub method: FusionMethod,
    pub rrf_c: f64,
}

impl Default for AggregationSection {
    fn default() -> Self {
        Self {
            method: FusionMethod::PeakRank,
            rrf_c: DEFAULT_RRF_C,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub k: usize,
    /// dataset name to category name
    pub categories: BTreeMap<String, String>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            k: 10,
            categories: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub seed: Option<u64>,
    pub parallel: usize,
    pub corpus: CorpusSection,
    pub retriever: RetrieverSection,
    pub planner: PlannerSection,
    pub teacher: TeacherSection,
    pub episode: EpisodeConfig,
    pub aggregation: AggregationSection,
    pub metrics: MetricsSection,
    pub synthesis: SynthesisConfig,
    pub reward: RewardConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            parallel: 1,
            corpus: CorpusSection::default(),
            retriever: RetrieverSection::default(),
            planner: PlannerSection::default(),
            teacher: TeacherSection::default(),
            episode: EpisodeConfig::default(),
            aggregation: AggregationSection::default(),
            metrics: MetricsSection::default(),
            synthesis: SynthesisConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl EngineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(seed) = cfg.seed {
            cfg.synthesis.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.corpus.path);
        resolve(base, &mut self.retriever.cache_path);
        resolve(base, &mut self.planner.script_path);
        resolve(base, &mut self.teacher.script_path);
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.synthesis.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallel == 0 {
            return Err(Error::Config("parallel must be at least 1".into()));
        }
        if self.metrics.k == 0 {
            return Err(Error::Config("metrics.k must be at least 1".into()));
        }
        if self.aggregation.rrf_c.is_nan() || self.aggregation.rrf_c <= 0.0 {
            return Err(Error::Config("aggregation.rrf_c must be positive".into()));
        }
        if self.retriever.backend == Backend::Hash && self.retriever.dim < 8 {
            return Err(Error::Config("retriever.dim must be at least 8".into()));
        }
        self.episode.validate()?;
        self.synthesis.validate()?;
        self.reward.weights.validate()?;
        if self.reward.k == 0 {
            return Err(Error::Config("reward.k must be at least 1".into()));
        }
        Ok(())
    }

    pub fn categories(&self) -> HashMap<String, String> {
        self.metrics.categories.clone().into_iter().collect()
    }

    pub fn load_corpus(&self) -> Result<ToolCorpus> {
        let path = self
            .corpus
            .path
            .as_ref()
            .ok_or_else(|| Error::Config("corpus.path is not set".into()))?;
        load_corpus(path)
    }

    /// Embedder for dense retrieval and plan similarity. The BM25 backend
    /// still needs one for plan similarity and gets the hashing embedder.
    pub fn embedder(&self) -> Arc<dyn Embedder> {
        match self.retriever.backend {
            Backend::Remote => Arc::new(RemoteEmbedder::new(self.retriever.remote.clone())),
            Backend::Hash | Backend::Bm25 => {
                Arc::new(HashEmbedder::new(self.retriever.dim, self.retriever.hash_seed))
            }
        }
    }

    /// Builds a dense index, reading or writing the cache when configured.
    /// A corrupt or stale cache is rebuilt with a warning.
    pub fn dense_index(&self, corpus: &ToolCorpus) -> Result<(DenseIndex, CacheStatus)> {
        let embedder = self.embedder();
        let mut status = CacheStatus::Uncached;
        if let Some(cache) = &self.retriever.cache_path {
            status = CacheStatus::Built;
            if cache.exists() {
                match DenseIndex::load_cache(cache, corpus, embedder.clone()) {
                    Ok(index) => {
                        return Ok((index.with_query_prefix(self.retriever.query_prefix.clone()), CacheStatus::Hit))
                    }
                    Err(e @ (Error::CacheCorrupt(_) | Error::ProvenanceMismatch { .. })) => {
                        log::warn!("index cache {} unusable ({e}); rebuilding", cache.display());
                        status = CacheStatus::Rebuilt;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let index = build_index(corpus, embedder, self.retriever.render_style)?
            .with_query_prefix(self.retriever.query_prefix.clone());
        if let Some(cache) = &self.retriever.cache_path {
            index.save_cache(cache)?;
        }
        Ok((index, status))
    }

    pub fn retriever(&self, corpus: &ToolCorpus) -> Result<Box<dyn Retriever>> {
        Ok(match self.retriever.backend {
            Backend::Bm25 => Box::new(Bm25Index::build(corpus, self.retriever.render_style, self.retriever.bm25)?),
            Backend::Hash | Backend::Remote => Box::new(self.dense_index(corpus)?.0),
        })
    }

    /// Planner scripts keyed by query id; empty for remote planners.
    pub fn planner_scripts(&self) -> Result<HashMap<String, Vec<String>>> {
        match (self.planner.kind, &self.planner.script_path) {
            (AgentKind::Scripted, Some(p)) => load_scripts(p),
            (AgentKind::Scripted, None) => Err(Error::Config("planner.script_path is not set".into())),
            (AgentKind::Remote, _) => Ok(HashMap::new()),
        }
    }

    /// Planner for one query id, given the scripts from [`Self::planner_scripts`].
    pub fn planner_for(&self, query_id: &str, scripts: &HashMap<String, Vec<String>>) -> Result<Box<dyn Planner>> {
        match self.planner.kind {
            AgentKind::Scripted => {
                let turns = scripts
                    .get(query_id)
                    .ok_or_else(|| Error::Config(format!("no planner script for query {query_id}")))?;
                Ok(Box::new(ScriptedPlanner::from_raw(turns.clone())))
            }
            AgentKind::Remote => Ok(Box::new(RemotePlanner::new(
                self.planner.remote.clone(),
                self.planner.max_parse_retries,
            ))),
        }
    }

    pub fn teacher(&self) -> Result<Box<dyn Teacher>> {
        match self.teacher.kind {
            AgentKind::Scripted => Ok(Box::new(match &self.teacher.script_path {
                Some(p) => ScriptedTeacher::load(p)?,
                None => ScriptedTeacher::new(),
            })),
            AgentKind::Remote => Ok(Box::new(RemoteTeacher::new(self.teacher.remote.clone()))),
        }
    }
}

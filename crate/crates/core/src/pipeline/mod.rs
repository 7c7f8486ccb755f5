//! File-backed pipeline stages. Each stage reads its inputs from a run
//! directory, writes its artifacts atomically, and records the outcome in
//! the run manifest.

pub mod config;
pub mod manifest;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, StrataMode};
use crate::gateway::{Gateway, UsageTotals};
use crate::partition::{BuildReport, PartitionError, Partitioner};
use crate::quality::{diversity_compare, filter_near_duplicates, mean_pairwise_cosine, DiversityOptions, QualityError};
use crate::synth::{SynthError, Synthesizer};
use crate::templates::TemplateSet;
use crate::tree::{SpaceTree, TreeError};

pub use config::{PipelineConfig, ProviderKind};
pub use manifest::{RunManifest, StageRecord, StageStatus};

pub const TREE_FILE: &str = "tree.json";
pub const BUILD_REPORT_FILE: &str = "build_report.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const ANSWERED_FILE: &str = "answered.jsonl";
pub const DEDUPED_FILE: &str = "deduped.jsonl";
pub const REMOVAL_LOG_FILE: &str = "dedup_removed.json";
pub const DIVERSITY_FILE: &str = "diversity.json";
pub const BASELINE_FILE: &str = "baseline.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("{what} was produced from tree {found}, but this run's tree is {expected}")]
    FingerprintMismatch { what: String, expected: String, found: String },
    #[error("run directory {dir} belongs to a different config (fingerprint {found})")]
    RunMismatch { dir: PathBuf, found: String },
    #[error("missing input: {0}")]
    MissingInput(String),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionSummary {
    pub tree: PathBuf,
    pub complete: bool,
    pub nodes: usize,
    pub leaves: usize,
    pub terminalized: usize,
    pub generate_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub path: PathBuf,
    pub records: usize,
    /// Records or leaves that failed and were skipped.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiversitySummary {
    pub path: PathBuf,
    /// (name, score), lowest (most diverse) first.
    pub scores: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct SynthesizeArgs {
    pub per_leaf: Option<usize>,
    pub subsample: Option<usize>,
    pub strata: StrataMode,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct BaselineArgs {
    pub description: Option<String>,
    pub count: Option<usize>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
}

/// An opened run directory with its provider connection.
pub struct Run {
    config: PipelineConfig,
    dir: PathBuf,
    gateway: Gateway,
    templates: TemplateSet,
    manifest: RunManifest,
}

fn usage_delta(after: UsageTotals, before: UsageTotals) -> UsageTotals {
    UsageTotals {
        generate_calls: after.generate_calls - before.generate_calls,
        embed_calls: after.embed_calls - before.embed_calls,
        attempts: after.attempts - before.attempts,
        prompt_tokens: after.prompt_tokens - before.prompt_tokens,
        completion_tokens: after.completion_tokens - before.completion_tokens,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    crate::dataset::write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn sidecar(name: &str) -> String {
    format!("{name}.manifest.json")
}

impl Run {
    /// Opens (creating if needed) the run directory for `config`. `dir`
    /// overrides the location derived from the config.
    pub fn open(config: PipelineConfig, dir: Option<PathBuf>) -> Result<Self> {
        let gateway = Gateway::new(
            config.provider()?,
            config.partition.retry_limit,
            config.partition.max_inflight_requests as usize,
        );
        Self::with_gateway(config, dir, gateway)
    }

    /// Like [`Run::open`] with a caller-supplied gateway.
    pub fn with_gateway(config: PipelineConfig, dir: Option<PathBuf>, gateway: Gateway) -> Result<Self> {
        let dir = dir.unwrap_or_else(|| config.run_dir());
        std::fs::create_dir_all(&dir).map_err(|e| PipelineError::io(&dir, e))?;
        let templates = config.templates()?;
        let manifest = match RunManifest::load(&dir)? {
            Some(m) if m.config_fingerprint != config.fingerprint() => {
                return Err(PipelineError::RunMismatch { dir, found: m.config_fingerprint })
            }
            Some(m) => m,
            None => RunManifest::new(&config, gateway.model_id(), gateway.embedding_model_id()),
        };
        let gateway = if config.provider.request_log {
            let log = dir.join(manifest::REQUEST_LOG_FILE);
            gateway.with_log_file(&log).map_err(|e| PipelineError::io(&log, e))?
        } else {
            gateway
        };
        let run = Self { config, dir, gateway, templates, manifest };
        run.manifest.save(&run.dir)?;
        for orphan in run.orphans() {
            log::warn!("{} is not recorded in the run manifest", run.dir.join(orphan).display());
        }
        Ok(run)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn orphans(&self) -> Vec<String> {
        self.manifest.orphans(&self.dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir).unwrap_or(path).display().to_string()
    }

    fn begin(&mut self, stage: &str) -> Result<(Instant, UsageTotals)> {
        let usage = self.gateway.usage();
        self.manifest.stages.insert(
            stage.into(),
            StageRecord {
                status: StageStatus::Running,
                inputs: Vec::new(),
                outputs: self.manifest.stages.get(stage).map(|s| s.outputs.clone()).unwrap_or_default(),
                fingerprint: None,
                wall_clock_ms: 0,
                usage: UsageTotals::default(),
                detail: None,
            },
        );
        self.manifest.save(&self.dir)?;
        Ok((Instant::now(), usage))
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &mut self,
        stage: &str,
        started: (Instant, UsageTotals),
        status: StageStatus,
        inputs: &[&Path],
        outputs: &[String],
        fingerprint: Option<String>,
        detail: Option<String>,
    ) -> Result<()> {
        let record = StageRecord {
            status,
            inputs: inputs.iter().map(|p| self.relative(p)).collect(),
            outputs: outputs.to_vec(),
            fingerprint,
            wall_clock_ms: started.0.elapsed().as_millis() as u64,
            usage: usage_delta(self.gateway.usage(), started.1),
            detail,
        };
        self.manifest.stages.insert(stage.into(), record);
        self.manifest.save(&self.dir)
    }

    fn fail<T>(&mut self, stage: &str, started: (Instant, UsageTotals), err: PipelineError) -> Result<T> {
        let outputs = self.manifest.stages.get(stage).map(|s| s.outputs.clone()).unwrap_or_default();
        self.finish(stage, started, StageStatus::Failed, &[], &outputs, None, Some(err.to_string()))?;
        Err(err)
    }

    /// Builds the tree, or continues it from the checkpoint in the run
    /// directory. `stop_after` interrupts after that many splits.
    pub fn partition(&mut self, resume_only: bool, stop_after: Option<usize>) -> Result<PartitionSummary> {
        let tree_path = self.path(TREE_FILE);
        if resume_only && !tree_path.exists() {
            return Err(PipelineError::MissingInput(format!("no checkpoint at {}", tree_path.display())));
        }
        let started = self.begin("partition")?;
        let mut options = self.config.partition_options();
        options.checkpoint = Some(tree_path.clone());
        options.report = Some(self.path(BUILD_REPORT_FILE));
        options.stop_after_attaches = stop_after;
        let partitioner = Partitioner::new(&self.gateway, &self.templates, options);
        let result = if tree_path.exists() {
            partitioner.resume_build(&tree_path, Some(&self.config.partition))
        } else {
            partitioner.build_tree(&self.config.task.description, self.config.partition.clone())
        };
        let outcome = match result {
            Ok(o) => o,
            Err(e) => return self.fail("partition", started, e.into()),
        };
        let tree = &outcome.tree;
        // a tree that was already complete leaves no report behind
        if !self.path(BUILD_REPORT_FILE).exists() {
            write_json(&self.path(BUILD_REPORT_FILE), &outcome.report)?;
        }
        let complete = tree.is_complete();
        let fingerprint = complete.then(|| tree.fingerprint());
        self.manifest.tree_fingerprint = fingerprint.clone();
        let status = match (complete, tree.terminalized().is_empty()) {
            (false, _) => StageStatus::Interrupted,
            (true, true) => StageStatus::Complete,
            (true, false) => StageStatus::Partial,
        };
        let detail = (!tree.terminalized().is_empty())
            .then(|| format!("{} node(s) terminalized early", tree.terminalized().len()));
        let outputs = [TREE_FILE.to_string(), BUILD_REPORT_FILE.to_string()];
        self.finish("partition", started, status, &[], &outputs, fingerprint, detail)?;
        Ok(PartitionSummary {
            tree: tree_path,
            complete,
            nodes: tree.len(),
            leaves: if complete { tree.leaf_nodes()?.len() } else { 0 },
            terminalized: tree.terminalized().len(),
            generate_calls: outcome.report.generate_calls,
        })
    }

    pub fn load_tree(&self) -> Result<SpaceTree> {
        let path = self.path(TREE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let tree = SpaceTree::from_json(&text)?;
        if !tree.is_complete() {
            return Err(TreeError::TreeIncomplete.into());
        }
        Ok(tree)
    }

    fn load_dataset(&self, path: &Path) -> Result<Dataset> {
        let dataset = Dataset::read(path)?;
        if let (Some(found), Some(expected)) = (&dataset.tree_fingerprint, &self.manifest.tree_fingerprint) {
            if found != expected {
                return Err(PipelineError::FingerprintMismatch {
                    what: path.display().to_string(),
                    expected: expected.clone(),
                    found: found.clone(),
                });
            }
        }
        Ok(dataset)
    }

    /// First of `names` present in the run directory.
    fn default_input(&self, names: &[&str]) -> Result<PathBuf> {
        names
            .iter()
            .map(|n| self.path(n))
            .find(|p| p.exists())
            .ok_or_else(|| PipelineError::MissingInput(format!("none of {} in {}", names.join(", "), self.dir.display())))
    }

    fn seed(&self, explicit: Option<u64>) -> u64 {
        explicit.unwrap_or(self.config.partition.rng_seed)
    }

    pub fn synthesize(&mut self, args: &SynthesizeArgs) -> Result<DatasetSummary> {
        let tree = self.load_tree()?;
        let started = self.begin("synthesize")?;
        let per_leaf = args.per_leaf.unwrap_or(self.config.partition.samples_per_leaf as usize);
        let seed = self.seed(args.seed);
        let synth = Synthesizer::new(&self.gateway, &self.templates, self.config.synth_options());
        let outcome = match synth.synthesize_all(&tree, per_leaf, seed) {
            Ok(o) => o,
            Err(e) => return self.fail("synthesize", started, e.into()),
        };
        let mut dataset = outcome.dataset;
        if let Some(size) = args.subsample {
            dataset = dataset.subsample(size, args.strata, seed);
        }
        let path = self.path(DATASET_FILE);
        dataset.write(&path)?;
        let status = if outcome.failures.is_empty() { StageStatus::Complete } else { StageStatus::Partial };
        let detail = (!outcome.failures.is_empty()).then(|| {
            outcome.failures.iter().map(|f| format!("{}: {}", f.leaf_id, f.error)).collect::<Vec<_>>().join("; ")
        });
        let outputs = [DATASET_FILE.to_string(), sidecar(DATASET_FILE)];
        let tree_path = self.path(TREE_FILE);
        self.finish("synthesize", started, status, &[&tree_path], &outputs, Some(dataset.fingerprint()), detail)?;
        Ok(DatasetSummary { path, records: dataset.len(), failures: outcome.failures.len() })
    }

    /// Adds answers to `input` (default: the answered dataset if present,
    /// else the synthesized one). Already answered records are kept.
    pub fn answer(&mut self, input: Option<&Path>) -> Result<DatasetSummary> {
        let input = match input {
            Some(p) => p.to_path_buf(),
            None => self.default_input(&[ANSWERED_FILE, DATASET_FILE])?,
        };
        let dataset = self.load_dataset(&input)?;
        let started = self.begin("answer")?;
        let synth = Synthesizer::new(&self.gateway, &self.templates, self.config.synth_options());
        let outcome = synth.generate_answers(&dataset, self.config.partition.max_inflight_requests as usize);
        let path = self.path(ANSWERED_FILE);
        outcome.dataset.write(&path)?;
        let status = if outcome.failures.is_empty() { StageStatus::Complete } else { StageStatus::Partial };
        let detail = (!outcome.failures.is_empty()).then(|| format!("{} record(s) left unanswered", outcome.failures.len()));
        let outputs = [ANSWERED_FILE.to_string(), sidecar(ANSWERED_FILE)];
        self.finish("answer", started, status, &[&input], &outputs, Some(outcome.dataset.fingerprint()), detail)?;
        Ok(DatasetSummary { path, records: outcome.dataset.len(), failures: outcome.failures.len() })
    }

    pub fn dedup(&mut self, input: Option<&Path>, threshold: Option<f64>) -> Result<DatasetSummary> {
        let threshold = threshold.unwrap_or(self.config.partition.dedup_threshold);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(PipelineError::Config(format!("dedup threshold {threshold} is outside [0, 1]")));
        }
        let input = match input {
            Some(p) => p.to_path_buf(),
            None => self.default_input(&[ANSWERED_FILE, DATASET_FILE])?,
        };
        let dataset = self.load_dataset(&input)?;
        let started = self.begin("dedup")?;
        let outcome = filter_near_duplicates(&dataset, threshold);
        let path = self.path(DEDUPED_FILE);
        outcome.kept.write(&path)?;
        write_json(&self.path(REMOVAL_LOG_FILE), &outcome.log)?;
        let outputs = [DEDUPED_FILE.to_string(), sidecar(DEDUPED_FILE), REMOVAL_LOG_FILE.to_string()];
        let detail = Some(format!("removed {} of {}", outcome.log.removed.len(), outcome.log.input_records));
        self.finish("dedup", started, StageStatus::Complete, &[&input], &outputs, Some(outcome.kept.fingerprint()), detail)?;
        Ok(DatasetSummary { path, records: outcome.kept.len(), failures: 0 })
    }

    /// Scores one dataset, or ranks several. With no inputs the deduplicated
    /// (else synthesized) dataset is scored.
    pub fn diversity(&mut self, inputs: &[(String, PathBuf)], pair_budget: Option<u64>, seed: Option<u64>) -> Result<DiversitySummary> {
        let inputs: Vec<(String, PathBuf)> = if inputs.is_empty() {
            let p = self.default_input(&[DEDUPED_FILE, DATASET_FILE])?;
            let name = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            vec![(name, p)]
        } else {
            inputs.to_vec()
        };
        let datasets: Vec<(String, Dataset)> = inputs
            .iter()
            .map(|(name, p)| Ok((name.clone(), self.load_dataset(p)?)))
            .collect::<Result<_>>()?;
        let options = DiversityOptions {
            pair_budget: pair_budget.unwrap_or(crate::quality::diversity::DEFAULT_PAIR_BUDGET),
            seed: self.seed(seed),
        };
        let started = self.begin("diversity")?;
        let path = self.path(DIVERSITY_FILE);
        let result = if datasets.len() == 1 {
            mean_pairwise_cosine(&datasets[0].1, &self.gateway, &options).and_then(|r| {
                let scores = vec![(datasets[0].0.clone(), r.score)];
                write_json(&path, &r).map_err(|e| QualityError::InvalidSpec(e.to_string()))?;
                Ok(scores)
            })
        } else {
            let refs: Vec<(String, &Dataset)> = datasets.iter().map(|(n, d)| (n.clone(), d)).collect();
            diversity_compare(&refs, &self.gateway, &options).and_then(|c| {
                write_json(&path, &c).map_err(|e| QualityError::InvalidSpec(e.to_string()))?;
                Ok(c.ranking.iter().map(|r| (r.name.clone(), r.report.score)).collect())
            })
        };
        let scores = match result {
            Ok(s) => s,
            Err(e) => return self.fail("diversity", started, e.into()),
        };
        let input_paths: Vec<&Path> = inputs.iter().map(|(_, p)| p.as_path()).collect();
        self.finish("diversity", started, StageStatus::Complete, &input_paths, &[DIVERSITY_FILE.to_string()], None, None)?;
        Ok(DiversitySummary { path, scores })
    }

    /// Plain temperature sampling from the task description, for comparison.
    pub fn baseline(&mut self, args: &BaselineArgs) -> Result<DatasetSummary> {
        let count = match args.count {
            Some(c) => c,
            None => {
                let reference = self.default_input(&[DATASET_FILE]).map_err(|_| {
                    PipelineError::MissingInput("pass a record count or synthesize a dataset first".into())
                })?;
                self.load_dataset(&reference)?.len()
            }
        };
        let description = args.description.clone().unwrap_or_else(|| self.config.task.description.clone());
        let temperature = args.temperature.unwrap_or(self.config.sampling.sample_temperature);
        let seed = self.seed(args.seed);
        let started = self.begin("baseline")?;
        let synth = Synthesizer::new(&self.gateway, &self.templates, self.config.synth_options());
        let workers = self.config.partition.max_inflight_requests as usize;
        let dataset = match synth.temperature_baseline(&description, count, temperature, seed, workers) {
            Ok(d) => d,
            Err(e) => return self.fail("baseline", started, e.into()),
        };
        let path = self.path(BASELINE_FILE);
        dataset.write(&path)?;
        let outputs = [BASELINE_FILE.to_string(), sidecar(BASELINE_FILE)];
        self.finish("baseline", started, StageStatus::Complete, &[], &outputs, Some(dataset.fingerprint()), None)?;
        Ok(DatasetSummary { path, records: dataset.len(), failures: 0 })
    }

    pub fn build_report(&self) -> Result<BuildReport> {
        let path = self.path(BUILD_REPORT_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }
}

//! Experiment orchestration: resolved configs, config-hash run directories,
//! seeded train/eval runs, k sweeps, and in-context evaluation runs.
//!
//! Every run directory is keyed by a hash of the resolved config (seed list
//! excluded), holds that config, and collects one manifest per seed. A
//! completed (config, seed) pair is never recomputed: rerunning is a no-op
//! with a notice, which also keeps the on-disk bytes stable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{
    predict, predict_core, select_core_lambda, train, ClassifierError, Featurizer, TrainConfig,
};
use crate::data::{self, Corpus, DataError, GeneratorConfig};
use crate::embedding::{EmbeddingError, EmbeddingTable, EntityId};
use crate::incontext::{
    conflict_instances, run_incontext, IncontextError, IncontextVariant, PlaceholderPolicy,
};
use crate::intervention::{InterventionConfig, InterventionMode};
use crate::llm::{HttpLlmClient, LlmClient, LlmError, LlmSettings, MockLlmClient};
use crate::metrics::{MetricsError, MetricsReport};
use crate::neighbors::{knn, NeighborError, NeighborQuery};
use crate::seeds;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config {path}: {reason}")]
    BadConfig { path: String, reason: String },
    #[error("corpus not found under `{dir}`: run `entint gen` first ({reason})")]
    MissingCorpus { dir: String, reason: String },
    #[error("mock client requires a transcript path (--transcript or config)")]
    MissingTranscript,
    #[error("manifest {path} is unreadable: {reason}")]
    BadManifest { path: String, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Incontext(#[from] IncontextError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Neighbor(#[from] NeighborError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

fn io_err(path: &Path, source: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// In-context client selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Live,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IncontextConfig {
    pub policy: PlaceholderPolicy,
    pub client: LlmSettings,
    pub transcript: Option<PathBuf>,
}

impl Default for IncontextConfig {
    fn default() -> Self {
        Self {
            policy: PlaceholderPolicy::default(),
            client: LlmSettings::default(),
            transcript: None,
        }
    }
}

/// The resolved experiment configuration. Unknown keys are rejected when
/// loading; every command writes the config it actually ran with next to
/// its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus_dir: PathBuf,
    pub out_dir: PathBuf,
    /// One full train/eval run per seed; reports aggregate mean and stdev.
    pub seeds: Vec<u64>,
    /// Evaluate with the CoRE logit correction (trains the vanilla model,
    /// picks lambda on dev).
    pub core_baseline: bool,
    pub generator: GeneratorConfig,
    pub intervention: InterventionConfig,
    pub train: TrainConfig,
    pub incontext: IncontextConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::from("corpus"),
            out_dir: PathBuf::from("results"),
            seeds: vec![7, 11, 13],
            core_baseline: false,
            generator: GeneratorConfig::default(),
            intervention: InterventionConfig::default(),
            train: TrainConfig::default(),
            incontext: IncontextConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        toml::from_str(&text).map_err(|e| ExperimentError::BadConfig {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the resolved config with the seed list blanked, so all seeds
    /// of one configuration share a run directory.
    pub fn config_hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.seeds = Vec::new();
        let json = serde_json::to_string(&normalized).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.config_hash())
    }
}

/// Result of one (config, seed) train/eval run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub reports: BTreeMap<String, MetricsReport>,
    pub duration_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub core_lambda: Option<f64>,
}

/// Mean and sample standard deviation per split over the seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvalSummary {
    pub config_hash: String,
    pub manifests: Vec<RunManifest>,
    pub splits: Vec<SplitSummary>,
}

impl TrainEvalSummary {
    pub fn split(&self, name: &str) -> Option<&SplitSummary> {
        self.splits.iter().find(|s| s.split == name)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Generate the corpus and write it (plus the resolved config) under the
/// config's corpus directory.
pub fn cmd_gen(config: &ExperimentConfig) -> Result<Corpus, ExperimentError> {
    let corpus = data::generate(&config.generator)?;
    data::write_corpus(&corpus, &config.corpus_dir)?;
    let config_path = config.corpus_dir.join("config.toml");
    fs::write(&config_path, config.to_toml()).map_err(|e| io_err(&config_path, e))?;
    println!(
        "gen: wrote {} train / {} dev / {} test_id / {} test_ood instances to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test_id.len(),
        corpus.test_ood.len(),
        config.corpus_dir.display()
    );
    Ok(corpus)
}

pub fn load_corpus(config: &ExperimentConfig) -> Result<Corpus, ExperimentError> {
    data::read_corpus(&config.corpus_dir).map_err(|e| match e {
        DataError::Io { path, source } => ExperimentError::MissingCorpus {
            dir: config.corpus_dir.display().to_string(),
            reason: format!("{path}: {source}"),
        },
        other => ExperimentError::Data(other),
    })
}

/// Train once with the configured intervention and evaluate on both test
/// splits. Pure function of (corpus, config, seed).
pub fn run_train_eval_single(
    corpus: &Corpus,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<RunManifest, ExperimentError> {
    let started = Instant::now();
    let mut intervention = config.intervention;
    intervention.seed = seeds::derive(seed, "intervention");
    if config.core_baseline {
        intervention.mode = InterventionMode::None;
    }
    let featurizer = Featurizer::new(&corpus.entities, &corpus.tokens, intervention);
    let train_config = TrainConfig {
        seed,
        ..config.train
    };
    let outcome = train(&corpus.train, &corpus.label_set, &featurizer, &train_config)?;
    let core_lambda = if config.core_baseline {
        Some(select_core_lambda(&outcome.model, &corpus.dev, &featurizer)?)
    } else {
        None
    };
    let mut reports = BTreeMap::new();
    for (split, instances) in [("test_id", &corpus.test_id), ("test_ood", &corpus.test_ood)] {
        let mut pairs = Vec::with_capacity(instances.len());
        for instance in instances.iter() {
            let predicted = match core_lambda {
                Some(lambda) => predict_core(&outcome.model, instance, &featurizer, lambda)?.name,
                None => predict(&outcome.model, instance, &featurizer)?.0.name,
            };
            pairs.push((instance.label.clone(), predicted));
        }
        let report = crate::metrics::micro_f1(&pairs, &corpus.label_set)?;
        reports.insert(split.to_string(), report);
    }
    Ok(RunManifest {
        config_hash: config.config_hash(),
        seed,
        reports,
        duration_ms: started.elapsed().as_millis() as u64,
        core_lambda,
    })
}

fn manifest_path(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("manifest_seed{seed}.json"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Run every configured seed (skipping completed ones), write manifests and
/// per-split reports, and aggregate a summary.
pub fn cmd_train_eval(config: &ExperimentConfig) -> Result<TrainEvalSummary, ExperimentError> {
    let corpus = load_corpus(config)?;
    cmd_train_eval_on(config, &corpus)
}

pub fn cmd_train_eval_on(
    config: &ExperimentConfig,
    corpus: &Corpus,
) -> Result<TrainEvalSummary, ExperimentError> {
    let run_dir = config.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
    let config_path = run_dir.join("config.toml");
    fs::write(&config_path, config.to_toml()).map_err(|e| io_err(&config_path, e))?;
    let mut manifests = Vec::new();
    for &seed in &config.seeds {
        let path = manifest_path(&run_dir, seed);
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let manifest: RunManifest =
                serde_json::from_str(&text).map_err(|e| ExperimentError::BadManifest {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
            println!(
                "train-eval: skipping completed run (config {}, seed {seed})",
                manifest.config_hash
            );
            manifests.push(manifest);
            continue;
        }
        let manifest = run_train_eval_single(corpus, config, seed)?;
        write_json(&path, &manifest)?;
        for (split, report) in &manifest.reports {
            let json_path = run_dir.join(format!("report_{split}_seed{seed}.json"));
            fs::write(&json_path, report.to_json()).map_err(|e| io_err(&json_path, e))?;
            let tsv_path = run_dir.join(format!("report_{split}_seed{seed}.tsv"));
            fs::write(&tsv_path, report.to_tsv()).map_err(|e| io_err(&tsv_path, e))?;
        }
        manifests.push(manifest);
    }
    let mut splits = Vec::new();
    for split in ["test_id", "test_ood"] {
        let values: Vec<f64> = manifests
            .iter()
            .filter_map(|m| m.reports.get(split).map(|r| r.micro_f1))
            .collect();
        let (mean, std) = mean_std(&values);
        splits.push(SplitSummary {
            split: split.to_string(),
            mean_f1: mean,
            std_f1: std,
            runs: values.len(),
        });
    }
    let summary = TrainEvalSummary {
        config_hash: config.config_hash(),
        manifests,
        splits,
    };
    let summary_path = run_dir.join("summary.tsv");
    let mut out = String::from("split\tmean_f1\tstd_f1\truns\n");
    for s in &summary.splits {
        out.push_str(&format!(
            "{}\t{:.2}\t{:.2}\t{}\n",
            s.split, s.mean_f1, s.std_f1, s.runs
        ));
    }
    fs::write(&summary_path, out).map_err(|e| io_err(&summary_path, e))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub id_mean: f64,
    pub id_std: f64,
    pub ood_mean: f64,
    pub ood_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("k\tid_f1_mean\tid_f1_std\tood_f1_mean\tood_f1_std\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\n",
                row.k, row.id_mean, row.id_std, row.ood_mean, row.ood_std
            ));
        }
        out
    }
}

/// One train/eval per (k, seed) with the hull intervention, aggregated into
/// a (k, ID F1, OOD F1) table.
pub fn cmd_sweep_k(
    config: &ExperimentConfig,
    k_values: &[usize],
) -> Result<SweepTable, ExperimentError> {
    let corpus = load_corpus(config)?;
    cmd_sweep_k_on(config, &corpus, k_values)
}

pub fn cmd_sweep_k_on(
    config: &ExperimentConfig,
    corpus: &Corpus,
    k_values: &[usize],
) -> Result<SweepTable, ExperimentError> {
    let mut rows = Vec::new();
    for &k in k_values {
        let mut sub = config.clone();
        sub.core_baseline = false;
        sub.intervention.mode = InterventionMode::HullSample;
        sub.intervention.k = k;
        let summary = cmd_train_eval_on(&sub, corpus)?;
        let id = summary.split("test_id").expect("split present");
        let ood = summary.split("test_ood").expect("split present");
        rows.push(SweepRow {
            k,
            id_mean: id.mean_f1,
            id_std: id.std_f1,
            ood_mean: ood.mean_f1,
            ood_std: ood.std_f1,
        });
    }
    let table = SweepTable { rows };
    fs::create_dir_all(&config.out_dir).map_err(|e| io_err(&config.out_dir, e))?;
    let path = config
        .out_dir
        .join(format!("sweep_{}.tsv", config.config_hash()));
    fs::write(&path, table.to_tsv()).map_err(|e| io_err(&path, e))?;
    Ok(table)
}

/// Print a neighbor set as TSV.
pub fn cmd_neighbors(
    table_path: &Path,
    anchor: &str,
    k: usize,
    type_filter: Option<String>,
    strict: bool,
) -> Result<String, ExperimentError> {
    let table = EmbeddingTable::load(table_path)?;
    let query = NeighborQuery {
        anchor: EntityId::new(anchor)?,
        k,
        type_filter,
        strict,
    };
    let set = knn(&table, &query)?;
    Ok(set.to_tsv(&table))
}

/// Run the in-context pipeline over the corpus's conflict set and write the
/// report under the run directory.
pub fn cmd_incontext(
    config: &ExperimentConfig,
    variant: IncontextVariant,
    client_kind: ClientKind,
) -> Result<MetricsReport, ExperimentError> {
    let corpus = load_corpus(config)?;
    let client: Box<dyn LlmClient> = match client_kind {
        ClientKind::Live => Box::new(HttpLlmClient::new(config.incontext.client.clone())?),
        ClientKind::Mock => {
            let path = config
                .incontext
                .transcript
                .as_ref()
                .ok_or(ExperimentError::MissingTranscript)?;
            Box::new(MockLlmClient::from_path(path)?)
        }
    };
    cmd_incontext_on(config, &corpus, variant, client.as_ref())
}

pub fn cmd_incontext_on(
    config: &ExperimentConfig,
    corpus: &Corpus,
    variant: IncontextVariant,
    client: &dyn LlmClient,
) -> Result<MetricsReport, ExperimentError> {
    let mut policy = config.incontext.policy.clone();
    if let Some(&seed) = config.seeds.first() {
        policy.seed = seed;
    }
    let conflicts = conflict_instances(corpus);
    let outcome = run_incontext(&conflicts, &corpus.label_set, &policy, variant, client)?;
    let run_dir = config.run_dir();
    fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
    let config_path = run_dir.join("config.toml");
    fs::write(&config_path, config.to_toml()).map_err(|e| io_err(&config_path, e))?;
    let base = format!("incontext_{}", variant.name());
    let json_path = run_dir.join(format!("{base}.json"));
    fs::write(&json_path, outcome.report.to_json()).map_err(|e| io_err(&json_path, e))?;
    let tsv_path = run_dir.join(format!("{base}.tsv"));
    fs::write(&tsv_path, outcome.report.to_tsv()).map_err(|e| io_err(&tsv_path, e))?;
    let records_path = run_dir.join(format!("{base}_records.jsonl"));
    let mut lines = String::new();
    for record in &outcome.records {
        lines.push_str(&serde_json::to_string(record).expect("record serializes"));
        lines.push('\n');
    }
    fs::write(&records_path, lines).map_err(|e| io_err(&records_path, e))?;
    if !outcome.failures.is_empty() {
        let failures_path = run_dir.join(format!("{base}_failures.jsonl"));
        let mut lines = String::new();
        for failure in &outcome.failures {
            lines.push_str(&serde_json::to_string(failure).expect("failure serializes"));
            lines.push('\n');
        }
        fs::write(&failures_path, lines).map_err(|e| io_err(&failures_path, e))?;
        eprintln!(
            "incontext: {} of {} instances failed; see {}",
            outcome.failures.len(),
            conflicts.len(),
            failures_path.display()
        );
    }
    Ok(outcome.report)
}

/// Aggregate every manifest under the results directory into one table.
pub fn cmd_report(out_dir: &Path) -> Result<String, ExperimentError> {
    let mut lines = vec!["config\tseed\tsplit\tf1\tprecision\trecall".to_string()];
    let mut entries: Vec<PathBuf> = Vec::new();
    if out_dir.exists() {
        for entry in fs::read_dir(out_dir).map_err(|e| io_err(out_dir, e))? {
            let entry = entry.map_err(|e| io_err(out_dir, e))?;
            if entry.path().is_dir() {
                for inner in fs::read_dir(entry.path()).map_err(|e| io_err(&entry.path(), e))? {
                    let inner = inner.map_err(|e| io_err(&entry.path(), e))?;
                    let name = inner.file_name().to_string_lossy().to_string();
                    if name.starts_with("manifest_seed") && name.ends_with(".json") {
                        entries.push(inner.path());
                    }
                }
            }
        }
    }
    entries.sort();
    for path in entries {
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| ExperimentError::BadManifest {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        for (split, report) in &manifest.reports {
            let r = report.rounded();
            lines.push(format!(
                "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}",
                manifest.config_hash, manifest.seed, split, r.micro_f1, r.precision, r.recall
            ));
        }
    }
    Ok(lines.join("\n") + "\n")
}

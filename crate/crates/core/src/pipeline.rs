//! Configuration, stages and artifacts of an end-to-end run.
//!
//! A run is described by one TOML document. Keys can be overridden from the
//! command line as `dotted.path=value`. The fully resolved document is saved
//! as `manifest.toml` and is enough to replay the run.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::{sweep_k, ClusterResult, KmeansConfig};
use crate::data_io::{fuse, load_block, standardize, FusedDataset, OmicsBlock, Orientation};
use crate::error::{Error, Result};
use crate::io_util::{write_atomic, write_csv_atomic};
use crate::losses::ContrastKind;
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{Matrix, ParamStore};
use crate::seed;
use crate::smae::{load_checkpoint, save_checkpoint, Smae, SmaeConfig};
use crate::synthetic::{generate, read_truth_labels, write_truth_labels, SyntheticSpec};
use crate::trainer::{train, TrainConfig, TrainReport};

/// Inclusive range of cluster counts, written `A..B`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct KRange {
    pub start: usize,
    pub end: usize,
}

impl Default for KRange {
    fn default() -> Self {
        Self { start: 2, end: 6 }
    }
}

impl FromStr for KRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("k range {s:?} is not of the form A..B"));
        let (a, b) = s.split_once("..").ok_or_else(bad)?;
        let b = b.strip_prefix('=').unwrap_or(b);
        let start = a.trim().parse().map_err(|_| bad())?;
        let end = b.trim().parse().map_err(|_| bad())?;
        if start > end {
            return Err(bad());
        }
        Ok(Self { start, end })
    }
}

impl TryFrom<String> for KRange {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<KRange> for String {
    fn from(r: KRange) -> String {
        r.to_string()
    }
}

impl fmt::Display for KRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSource {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub orientation: Orientation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub blocks: Vec<BlockSource>,
    /// Optional `sample_id,label` file for ARI.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    /// z-score every feature before fusing.
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            blocks: Vec::new(),
            truth: None,
            standardize: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Label used in metric reports.
    pub name: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub k_range: KRange,
    pub formats: Vec<ReportFormat>,
    pub data: DataConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    pub model: SmaeConfig,
    pub train: TrainConfig,
    pub kmeans: KmeansConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            out_dir: PathBuf::from("out"),
            k_range: KRange::default(),
            formats: vec![ReportFormat::Csv, ReportFormat::Json],
            data: DataConfig::default(),
            synthetic: None,
            model: SmaeConfig::default(),
            train: TrainConfig::default(),
            kmeans: KmeansConfig::default(),
        }
    }
}

fn toml_err(e: impl fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn get_path<'a>(root: &'a toml::Table, path: &[&str]) -> Option<&'a toml::Value> {
    let (last, parents) = path.split_last()?;
    let mut table = root;
    for p in parents {
        table = table.get(*p)?.as_table()?;
    }
    table.get(*last)
}

fn set_path(root: &mut toml::Table, path: &[&str], value: toml::Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {:?} crosses a non-table value", path.join("."))))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Applies `key=value` overrides with dotted keys, e.g. `train.lr=0.003`.
pub fn apply_overrides(root: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        set_path(root, &path, parse_value(value.trim()))?;
    }
    Ok(())
}

/// Sets the global seed and re-derives every stage seed from it.
pub fn apply_global_seed(root: &mut toml::Table, seed: u64) -> Result<()> {
    set_path(root, &["seed"], toml::Value::Integer(seed_to_toml(seed)?))?;
    for path in SEEDED {
        if path[0] != "synthetic" || root.contains_key("synthetic") {
            if let Some(t) = root.get_mut(path[0]).and_then(|v| v.as_table_mut()) {
                t.remove(path[1]);
            }
        }
    }
    Ok(())
}

const SEEDED: [[&str; 2]; 3] = [["train", "seed"], ["kmeans", "seed"], ["synthetic", "seed"]];

fn seed_to_toml(seed: u64) -> Result<i64> {
    i64::try_from(seed).map_err(|_| Error::Config(format!("seed {seed} does not fit a signed 64-bit integer")))
}

/// Fills keys whose defaults depend on other keys. Keys already present are
/// left alone, so resolving a manifest again is a no-op.
fn fill_dependent_defaults(root: &mut toml::Table) -> Result<()> {
    let base = match root.get("seed") {
        Some(v) => v
            .as_integer()
            .and_then(|i| u64::try_from(i).ok())
            .ok_or_else(|| Error::Config("seed must be a non-negative integer".into()))?,
        None => 0,
    };
    for (i, path) in SEEDED.iter().enumerate() {
        if path[0] == "synthetic" && !root.contains_key("synthetic") {
            continue;
        }
        if get_path(root, path).is_none() {
            // top bit cleared so the value survives a TOML integer
            let s = seed::derive(base, &[i as u64 + 1]) >> 1;
            set_path(root, path, toml::Value::Integer(s as i64))?;
        }
    }
    if root.contains_key("synthetic") {
        let k = match get_path(root, &["synthetic", "n_clusters"]) {
            Some(v) => v.clone(),
            None => toml::Value::Integer(SyntheticSpec::default().n_clusters as i64),
        };
        for key in ["embed_dim", "n_clusters"] {
            if get_path(root, &["model", key]).is_none() {
                set_path(root, &["model", key], k.clone())?;
            }
        }
    }
    Ok(())
}

impl PipelineConfig {
    /// Parses a TOML document, applies overrides and dependent defaults.
    pub fn from_toml(text: &str, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(toml_err)?;
        if let Some(s) = seed {
            apply_global_seed(&mut root, s)?;
        }
        apply_overrides(&mut root, overrides)?;
        fill_dependent_defaults(&mut root)?;
        let cfg: PipelineConfig = toml::Value::Table(root).try_into().map_err(toml_err)?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides, seed)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, self.data.blocks.is_empty()) {
            (Some(_), false) => {
                return Err(Error::Config("set either [synthetic] or data.blocks, not both".into()));
            }
            (None, true) => {
                return Err(Error::Config("no input: set [synthetic] or data.blocks".into()));
            }
            _ => {}
        }
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        if self.k_range.start < 2 {
            return Err(Error::Config(format!("k range must start at >= 2, got {}", self.k_range)));
        }
        if self.kmeans.restarts == 0 || self.kmeans.max_iters == 0 {
            return Err(Error::Config("kmeans.restarts and kmeans.max_iters must be positive".into()));
        }
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(toml_err)
    }

    pub fn paths(&self) -> RunPaths {
        RunPaths {
            out: self.out_dir.clone(),
        }
    }
}

/// Artifact locations under the output directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub out: PathBuf,
}

impl RunPaths {
    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }
    pub fn truth(&self) -> PathBuf {
        self.out.join("labels_true.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.out.join("checkpoint.json")
    }
    pub fn loss_curve(&self) -> PathBuf {
        self.out.join("loss_curve.csv")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.out.join("embeddings.csv")
    }
    pub fn labels(&self) -> PathBuf {
        self.out.join("labels.csv")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.out.join("metrics.csv")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.out.join("metrics.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.out.join("manifest.toml")
    }
}

/// The fused input plus ground truth aligned to its rows, when known.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: FusedDataset,
    pub truth: Option<Vec<usize>>,
}

fn align_truth(ids: &[String], truth: &HashMap<String, usize>, source: &Path) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            truth
                .get(id)
                .copied()
                .ok_or_else(|| Error::Data(format!("{}: no label for sample {id:?}", source.display())))
        })
        .collect()
}

fn finish_blocks(blocks: Vec<OmicsBlock>, standardize_blocks: bool) -> Result<FusedDataset> {
    if standardize_blocks {
        let z: Vec<OmicsBlock> = blocks.iter().map(standardize).collect::<Result<_>>()?;
        fuse(&z)
    } else {
        fuse(&blocks)
    }
}

/// Loads or simulates the input described by `cfg`.
pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    if let Some(spec) = &cfg.synthetic {
        let sim = generate(spec)?;
        let dataset = finish_blocks(sim.blocks, cfg.data.standardize)?;
        return Ok(Prepared {
            dataset,
            truth: Some(sim.labels),
        });
    }
    let blocks = cfg
        .data
        .blocks
        .iter()
        .map(|b| load_block(&b.path, &b.name, b.orientation))
        .collect::<Result<Vec<_>>>()?;
    let dataset = finish_blocks(blocks, cfg.data.standardize)?;
    let truth = match &cfg.data.truth {
        Some(p) => Some(align_truth(&dataset.sample_ids, &read_truth_labels(p)?, p)?),
        None => None,
    };
    Ok(Prepared { dataset, truth })
}

/// Writes the simulated blocks and labels under `out/data`, plus `labels_true.csv`.
pub fn run_simulate(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let spec = cfg.synthetic.clone().unwrap_or_default();
    let sim = generate(&spec)?;
    let paths = cfg.paths();
    let mut written = sim.write_to(&paths.data_dir())?;
    write_truth_labels(&paths.truth(), sim.sample_ids(), &sim.labels)?;
    written.push(paths.truth());
    Ok(written)
}

fn write_manifest(cfg: &PipelineConfig) -> Result<()> {
    write_atomic(&cfg.paths().manifest(), cfg.to_toml()?.as_bytes())
}

/// Trained model plus the config with `model.block_dims` resolved.
pub struct Trained {
    pub config: PipelineConfig,
    pub model: Smae,
    pub store: ParamStore,
    pub report: TrainReport,
}

/// Trains on the prepared data; writes the checkpoint, loss curve and manifest.
pub fn run_train(cfg: &PipelineConfig, prepared: &Prepared) -> Result<Trained> {
    let (model, store, mut report) = train(&prepared.dataset, &cfg.model, &cfg.train)?;
    let mut config = cfg.clone();
    config.model = model.config().clone();
    let paths = config.paths();
    save_checkpoint(&paths.checkpoint(), model.config(), &store)?;
    report.checkpoint = Some(paths.checkpoint());
    report.write_loss_curve(&paths.loss_curve())?;
    write_manifest(&config)?;
    Ok(Trained {
        config,
        model,
        store,
        report,
    })
}

pub fn write_embeddings(path: &Path, ids: &[String], emb: &Matrix) -> Result<()> {
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..emb.cols()).map(|j| format!("e{j}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = ids.iter().zip(emb.iter_rows()).map(|(id, r)| {
        std::iter::once(id.clone())
            .chain(r.iter().map(f64::to_string))
            .collect::<Vec<_>>()
    });
    write_csv_atomic(path, &header, rows)
}

/// An embedding table as read back from CSV.
pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let block = load_block(path, "embeddings", Orientation::SamplesRows)?;
    Ok((block.sample_ids().to_vec(), block.values().clone()))
}

const EMBED_CHUNK: usize = 512;

/// Eval-mode instance embeddings; written to `embeddings.csv`.
pub fn run_embed(cfg: &PipelineConfig, model: &Smae, store: &ParamStore, dataset: &FusedDataset) -> Result<Matrix> {
    let out = model.embed(store, &dataset.values, EMBED_CHUNK)?;
    write_embeddings(&cfg.paths().embeddings(), &dataset.sample_ids, &out.embeddings)?;
    Ok(out.embeddings)
}

/// Embeds with a saved checkpoint.
pub fn run_embed_from_checkpoint(cfg: &PipelineConfig, checkpoint: &Path) -> Result<Matrix> {
    let prepared = prepare(cfg)?;
    let (model, store) = load_checkpoint(checkpoint)?;
    run_embed(cfg, &model, &store, &prepared.dataset)
}

pub fn write_labels(path: &Path, ids: &[String], results: &[ClusterResult]) -> Result<()> {
    let rows = results.iter().flat_map(|r| {
        ids.iter()
            .zip(&r.labels)
            .map(move |(id, l)| [id.clone(), r.k.to_string(), l.to_string()])
    });
    write_csv_atomic(path, &["sample_id", "k", "label"], rows)
}

/// Reads `sample_id,k,label` rows; returns labels per k aligned to `ids`.
pub fn read_labels(path: &Path, ids: &[String]) -> Result<Vec<(usize, Vec<usize>)>> {
    let err = |line: usize, m: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column: 1,
        message: m,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut by_k: std::collections::BTreeMap<usize, HashMap<String, usize>> = Default::default();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| err(line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(err(line, format!("expected 3 fields, found {}", rec.len())));
        }
        let k: usize = rec[1].trim().parse().map_err(|_| err(line, format!("bad k {:?}", &rec[1])))?;
        let l: usize = rec[2].trim().parse().map_err(|_| err(line, format!("bad label {:?}", &rec[2])))?;
        by_k.entry(k).or_default().insert(rec[0].to_string(), l);
    }
    by_k.into_iter()
        .map(|(k, table)| Ok((k, align_truth(ids, &table, path)?)))
        .collect()
}

/// k-means for every k in the range; writes `labels.csv`.
pub fn run_cluster(cfg: &PipelineConfig, ids: &[String], emb: &Matrix) -> Result<Vec<ClusterResult>> {
    let results = sweep_k(emb, cfg.k_range.start..=cfg.k_range.end, &cfg.kmeans)?;
    write_labels(&cfg.paths().labels(), ids, &results)?;
    Ok(results)
}

/// One metrics row per k; writes the configured report formats.
pub fn run_evaluate(
    cfg: &PipelineConfig,
    emb: &Matrix,
    labels: &[(usize, Vec<usize>)],
    truth: Option<&[usize]>,
) -> Result<MetricsReport> {
    let rows = labels
        .iter()
        .map(|(_, l)| evaluate(&cfg.name, emb, l, truth))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport { rows };
    let paths = cfg.paths();
    if cfg.formats.contains(&ReportFormat::Csv) {
        report.write_csv(&paths.metrics_csv())?;
    }
    if cfg.formats.contains(&ReportFormat::Json) {
        report.write_json(&paths.metrics_json())?;
    }
    Ok(report)
}

pub struct PipelineOutcome {
    pub config: PipelineConfig,
    pub train: TrainReport,
    pub embeddings: Matrix,
    pub clusters: Vec<ClusterResult>,
    pub metrics: MetricsReport,
}

/// train → embed → cluster → evaluate, writing every artifact.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let prepared = prepare(cfg)?;
    if let Some(t) = &prepared.truth {
        write_truth_labels(&cfg.paths().truth(), &prepared.dataset.sample_ids, t)?;
    }
    let trained = run_train(cfg, &prepared)?;
    let cfg = &trained.config;
    let ids = &prepared.dataset.sample_ids;
    let embeddings = run_embed(cfg, &trained.model, &trained.store, &prepared.dataset)?;
    let clusters = run_cluster(cfg, ids, &embeddings)?;
    let labels: Vec<(usize, Vec<usize>)> = clusters.iter().map(|c| (c.k, c.labels.clone())).collect();
    let metrics = run_evaluate(cfg, &embeddings, &labels, prepared.truth.as_deref())?;
    Ok(PipelineOutcome {
        config: trained.config.clone(),
        train: trained.report,
        embeddings,
        clusters,
        metrics,
    })
}

/// One pipeline result per instance-loss variant.
pub struct AblationOutcome {
    pub runs: Vec<(ContrastKind, PipelineOutcome)>,
}

impl AblationOutcome {
    pub const CSV_HEADER: [&'static str; 9] = [
        "loss_kind",
        "k",
        "c_index",
        "silhouette",
        "davies_bouldin",
        "ari",
        "first_loss",
        "final_loss",
        "epochs",
    ];

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let fmt = |v: f64| if v.is_finite() { v.to_string() } else { "inf".to_string() };
        let rows = self.runs.iter().flat_map(|(kind, run)| {
            let h = &run.train.history;
            let first = h.first().map_or(f64::NAN, |e| e.total);
            let last = h.last().map_or(f64::NAN, |e| e.total);
            run.metrics.rows.iter().map(move |r| {
                vec![
                    kind.to_string(),
                    r.k.to_string(),
                    fmt(r.c_index),
                    fmt(r.silhouette),
                    fmt(r.davies_bouldin),
                    r.ari.map_or_else(|| "NA".to_string(), fmt),
                    first.to_string(),
                    last.to_string(),
                    h.len().to_string(),
                ]
            })
        });
        write_csv_atomic(path, &Self::CSV_HEADER, rows)
    }
}

/// Runs the pipeline with DCL and InfoNCE instance losses into `out/dcl` and
/// `out/infonce`, then writes `out/ablation.csv`.
pub fn run_ablate(cfg: &PipelineConfig) -> Result<AblationOutcome> {
    cfg.validate()?;
    let mut runs = Vec::new();
    for kind in [ContrastKind::Dcl, ContrastKind::InfoNce] {
        let mut c = cfg.clone();
        c.train.loss.instance_kind = kind;
        c.out_dir = cfg.out_dir.join(kind.to_string());
        runs.push((kind, run_pipeline(&c)?));
    }
    let outcome = AblationOutcome { runs };
    outcome.write_csv(&cfg.out_dir.join("ablation.csv"))?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
name = "toy"
seed = 3
k_range = "2..3"

[synthetic]
n_samples = 24
n_clusters = 3
block_dims = [5, 4, 6]
separation = 4.0

[model]
d_model = 8
heads = 2
mlp_hidden = 8

[train]
batch_size = 12
epochs = 3
log_every = 0

[kmeans]
restarts = 4
"#;

    #[test]
    fn dependent_defaults_follow_the_synthetic_spec() {
        let cfg = PipelineConfig::from_toml(SMALL, &[], None).unwrap();
        assert_eq!(cfg.model.embed_dim, 3);
        assert_eq!(cfg.model.n_clusters, 3);
        assert_ne!(cfg.train.seed, cfg.kmeans.seed);
        let loaded = PipelineConfig::from_toml("[[data.blocks]]\nname = \"a\"\npath = \"a.csv\"\n", &[], None).unwrap();
        assert_eq!(loaded.model.embed_dim, 10);
        loaded.validate().unwrap();
    }

    #[test]
    fn overrides_use_dotted_paths() {
        let cfg = PipelineConfig::from_toml(
            SMALL,
            &[
                "train.lr=0.001".into(),
                "k_range=4..5".into(),
                "train.loss.instance_kind=infonce".into(),
                "model.embed_dim=7".into(),
            ],
            None,
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.k_range, KRange { start: 4, end: 5 });
        assert_eq!(cfg.train.loss.instance_kind, ContrastKind::InfoNce);
        assert_eq!(cfg.model.embed_dim, 7);
        assert!(PipelineConfig::from_toml(SMALL, &["train.nope=1".into()], None).is_err());
        assert!(PipelineConfig::from_toml(SMALL, &["no_equals".into()], None).is_err());
    }

    #[test]
    fn global_seed_rederives_stage_seeds() {
        let a = PipelineConfig::from_toml(SMALL, &[], Some(11)).unwrap();
        let b = PipelineConfig::from_toml(SMALL, &[], Some(12)).unwrap();
        assert_eq!(a.seed, 11);
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.synthetic.as_ref().unwrap().seed, b.synthetic.as_ref().unwrap().seed);
    }

    #[test]
    fn manifest_resolves_to_itself() {
        let cfg = PipelineConfig::from_toml(SMALL, &[], None).unwrap();
        let text = cfg.to_toml().unwrap();
        let again = PipelineConfig::from_toml(&text, &[], None).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn validation_requires_exactly_one_input() {
        let none = PipelineConfig::default();
        assert!(matches!(none.validate(), Err(Error::Config(_))));
        let mut both = PipelineConfig::from_toml(SMALL, &[], None).unwrap();
        both.data.blocks.push(BlockSource {
            name: "x".into(),
            path: "x.csv".into(),
            orientation: Orientation::SamplesRows,
        });
        assert!(matches!(both.validate(), Err(Error::Config(_))));
        let low = PipelineConfig::from_toml(SMALL, &["k_range=1..3".into()], None).unwrap();
        assert!(low.validate().is_err());
    }

    #[test]
    fn k_range_parsing() {
        assert_eq!("2..6".parse::<KRange>().unwrap(), KRange { start: 2, end: 6 });
        assert_eq!("3..=3".parse::<KRange>().unwrap(), KRange { start: 3, end: 3 });
        assert!("6..2".parse::<KRange>().is_err());
        assert!("a..b".parse::<KRange>().is_err());
    }

    #[test]
    fn pipeline_writes_all_artifacts_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = PipelineConfig::from_toml(SMALL, &[format!("out_dir={:?}", out.display().to_string())], None)
            .unwrap();
        let run = run_pipeline(&cfg).unwrap();
        let paths = cfg.paths();
        for p in [
            paths.embeddings(),
            paths.labels(),
            paths.loss_curve(),
            paths.metrics_csv(),
            paths.metrics_json(),
            paths.checkpoint(),
            paths.manifest(),
            paths.truth(),
        ] {
            assert!(p.exists(), "{}", p.display());
        }
        assert_eq!(run.metrics.rows.len(), 2);
        assert!(run.metrics.rows.iter().all(|r| r.ari.is_some()));

        let (ids, emb) = read_embeddings(&paths.embeddings()).unwrap();
        assert_eq!(emb, run.embeddings);
        let labels = read_labels(&paths.labels(), &ids).unwrap();
        assert_eq!(labels.len(), 2);
        assert_eq!(labels[0].1, run.clusters[0].labels);

        let first_metrics = std::fs::read(paths.metrics_csv()).unwrap();
        let first_labels = std::fs::read(paths.labels()).unwrap();
        let manifest = PipelineConfig::load(Some(&paths.manifest()), &[], None).unwrap();
        run_pipeline(&manifest).unwrap();
        assert_eq!(std::fs::read(paths.metrics_csv()).unwrap(), first_metrics);
        assert_eq!(std::fs::read(paths.labels()).unwrap(), first_labels);
    }

    #[test]
    fn checkpoint_embedding_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::from_toml(
            SMALL,
            &[format!("out_dir={:?}", dir.path().display().to_string())],
            None,
        )
        .unwrap();
        let run = run_pipeline(&cfg).unwrap();
        let again = run_embed_from_checkpoint(&run.config, &cfg.paths().checkpoint()).unwrap();
        assert_eq!(again, run.embeddings);
    }

    #[test]
    fn simulate_writes_blocks_and_truth() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::from_toml(
            SMALL,
            &[format!("out_dir={:?}", dir.path().display().to_string())],
            None,
        )
        .unwrap();
        let files = run_simulate(&cfg).unwrap();
        assert_eq!(files.len(), 4);
        let truth = read_truth_labels(&cfg.paths().truth()).unwrap();
        assert_eq!(truth.len(), 24);
    }
}

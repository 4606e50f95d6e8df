//! Two-view contrastive training loop with Adam and plateau-based early
//! stopping.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data_io::{make_views, AugmentConfig, FusedDataset};
use crate::error::{Error, Result};
use crate::io_util::write_csv_atomic;
use crate::losses::{total_loss, LossConfig};
use crate::nn::{adam_step, AdamState, ParamStore};
use crate::seed;
use crate::smae::{Mode, Smae, SmaeConfig, ViewPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub early_stop_window: usize,
    /// Relative change below which an epoch counts as flat.
    pub early_stop_delta: f64,
    pub seed: u64,
    /// Print a progress line to stderr every this many epochs; 0 is silent.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 200,
            lr: 3e-3,
            weight_decay: 0.0,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            early_stop_window: 10,
            early_stop_delta: 1e-4,
            seed: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        // lr = 0 is allowed so a run can be used as a frozen-model probe
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.early_stop_window == 0 {
            return fail("early_stop_window must be >= 1".into());
        }
        if !(self.early_stop_delta > 0.0) {
            return fail(format!("early_stop_delta must be > 0, got {}", self.early_stop_delta));
        }
        self.augment.validate()?;
        self.loss.validate()
    }
}

/// Mean losses over the batches of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub instance: f64,
    pub cluster: f64,
    pub entropy: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochLoss>,
    pub stopped_epoch: usize,
    pub early_stopped: bool,
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn write_loss_curve(&self, path: &Path) -> Result<()> {
        let rows = self.history.iter().map(|h| {
            [
                h.epoch.to_string(),
                h.instance.to_string(),
                h.cluster.to_string(),
                h.entropy.to_string(),
                h.total.to_string(),
            ]
        });
        write_csv_atomic(path, &["epoch", "instance", "cluster", "entropy", "total"], rows)
    }
}

/// Plateau detector over per-epoch means of both loss components.
#[derive(Clone, Debug)]
struct EarlyStop {
    window: usize,
    delta: f64,
    flat: usize,
}

impl EarlyStop {
    fn relative_change(series: &[f64], window: usize) -> f64 {
        let n = series.len();
        let recent = &series[n.saturating_sub(window)..];
        let mean = recent.iter().sum::<f64>() / recent.len() as f64;
        (series[n - 1] - series[n - 2]).abs() / mean.abs().max(1e-12)
    }

    /// Returns true once both series have stayed flat for `window` epochs.
    fn update(&mut self, history: &[EpochLoss]) -> bool {
        if history.len() < 2 {
            return false;
        }
        let inst: Vec<f64> = history.iter().map(|h| h.instance).collect();
        let clus: Vec<f64> = history.iter().map(|h| h.cluster).collect();
        let flat = Self::relative_change(&inst, self.window) < self.delta
            && Self::relative_change(&clus, self.window) < self.delta;
        self.flat = if flat { self.flat + 1 } else { 0 };
        self.flat >= self.window
    }
}

/// Row ranges of one epoch; a trailing batch with fewer than 2 rows is dropped.
fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).filter(|c| c.len() >= 2).collect()
}

/// Resolves `block_dims` from the dataset when the config leaves it empty.
pub fn resolve_model_config(dataset: &FusedDataset, cfg: &SmaeConfig) -> Result<SmaeConfig> {
    let dims = dataset.block_dims();
    let mut cfg = cfg.clone();
    if cfg.block_dims.is_empty() {
        cfg.block_dims = dims;
    } else if cfg.block_dims != dims {
        return Err(Error::Config(format!(
            "model block_dims {:?} do not match the dataset {:?}",
            cfg.block_dims, dims
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Initializes a model from `cfg.seed` and trains it on `dataset`.
pub fn train(
    dataset: &FusedDataset,
    smae_cfg: &SmaeConfig,
    cfg: &TrainConfig,
) -> Result<(Smae, ParamStore, TrainReport)> {
    let model_cfg = resolve_model_config(dataset, smae_cfg)?;
    let mut store = ParamStore::new();
    let model = Smae::new(model_cfg, &mut store, seed::derive(cfg.seed, &[u64::MAX]))?;
    let report = train_model(&model, &mut store, dataset, cfg)?;
    Ok((model, store, report))
}

/// Trains an already initialized model in place.
pub fn train_model(
    model: &Smae,
    store: &mut ParamStore,
    dataset: &FusedDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = dataset.n_samples();
    if n < 2 {
        return Err(Error::Data(format!("training needs at least 2 samples, got {n}")));
    }
    if dataset.values.cols() != model.config().input_dim() {
        return Err(Error::Config(format!(
            "dataset has {} features, model expects {}",
            dataset.values.cols(),
            model.config().input_dim()
        )));
    }
    let batch_size = cfg.batch_size.min(n);
    let start = Instant::now();
    let mut adam = AdamState::new(store);
    let mut stopper = EarlyStop {
        window: cfg.early_stop_window,
        delta: cfg.early_stop_delta,
        flat: 0,
    };
    let mut history: Vec<EpochLoss> = Vec::new();
    let mut early_stopped = false;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.epochs {
        let e = epoch as u64;
        order.sort_unstable();
        order.shuffle(&mut seed::rng(cfg.seed, &[e, 0]));
        let mut sums = [0.0f64; 4];
        let batch_list = batches(&order, batch_size);
        for (b, idx) in batch_list.iter().enumerate() {
            let b = b as u64;
            let x = dataset.values.select_rows(idx);
            let aug = AugmentConfig {
                seed: seed::derive(cfg.seed, &[e, b + 1, 1, cfg.augment.seed]),
                ..cfg.augment.clone()
            };
            let (x1, x2) = make_views(&x, &aug)?;
            let m1 = Mode::Train {
                seed: seed::derive(cfg.seed, &[e, b + 1, 2]),
            };
            let m2 = Mode::Train {
                seed: seed::derive(cfg.seed, &[e, b + 1, 3]),
            };
            let (first, c1) = model.forward(store, &x1, m1)?;
            let (second, c2) = model.forward(store, &x2, m2)?;
            let pair = ViewPair { first, second };
            let (lb, grads) = total_loss(&pair, &cfg.loss)?;
            if !lb.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {} at epoch {epoch}, batch {}",
                    lb.total,
                    b + 1
                )));
            }
            store.zero_grad();
            model.backward(store, &c1, &grads.embeddings.0, &grads.probabilities.0)?;
            model.backward(store, &c2, &grads.embeddings.1, &grads.probabilities.1)?;
            adam_step(store, &mut adam, cfg.lr, cfg.weight_decay);
            sums[0] += lb.instance;
            sums[1] += lb.cluster;
            sums[2] += lb.entropy;
            sums[3] += lb.total;
        }
        if !store.all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let nb = batch_list.len() as f64;
        history.push(EpochLoss {
            epoch,
            instance: sums[0] / nb,
            cluster: sums[1] / nb,
            entropy: sums[2] / nb,
            total: sums[3] / nb,
        });
        if cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch == 1) {
            let h = history.last().unwrap();
            eprintln!(
                "epoch {epoch:>4}  loss {:.5}  instance {:.5}  cluster {:.5}",
                h.total, h.instance, h.cluster
            );
        }
        if stopper.update(&history) {
            early_stopped = true;
            break;
        }
    }
    Ok(TrainReport {
        stopped_epoch: history.len(),
        history,
        early_stopped,
        wall_time_secs: start.elapsed().as_secs_f64(),
        checkpoint: None,
    })
}

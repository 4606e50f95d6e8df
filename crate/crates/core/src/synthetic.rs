//! Simulated multi-block datasets with known cluster structure.
//!
//! Every block draws its own cluster centers but all blocks share one cluster
//! assignment, which makes the blocks correlated through the latent label.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::OmicsBlock;
use crate::error::{Error, Result};
use crate::io_util::write_csv_atomic;
use crate::nn::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeMode {
    /// Cluster sizes differ by at most one.
    #[default]
    Equal,
    /// Proportions drawn from a symmetric Dirichlet(1).
    Heterogeneous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_clusters: usize,
    pub size_mode: SizeMode,
    pub block_dims: Vec<usize>,
    /// Std of the cluster-center distribution, in standardized units.
    pub separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 100,
            n_clusters: 5,
            size_mode: SizeMode::Equal,
            block_dims: vec![131, 100, 160],
            separation: 2.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_samples == 0 || self.n_clusters == 0 {
            return fail("n_samples and n_clusters must be positive".into());
        }
        if self.n_clusters > self.n_samples {
            return fail(format!(
                "n_clusters ({}) exceeds n_samples ({})",
                self.n_clusters, self.n_samples
            ));
        }
        if self.block_dims.is_empty() || self.block_dims.contains(&0) {
            return fail(format!("block_dims must be non-empty and positive: {:?}", self.block_dims));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return fail(format!("separation must be > 0, got {}", self.separation));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be > 0, got {}", self.noise_std));
        }
        Ok(())
    }

    fn block_name(i: usize) -> String {
        match i {
            0 => "methylation".into(),
            1 => "expression".into(),
            2 => "protein".into(),
            _ => format!("block{i}"),
        }
    }
}

/// Blocks sharing sample ids and order, plus the ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub blocks: Vec<OmicsBlock>,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn sample_ids(&self) -> &[String] {
        self.blocks[0].sample_ids()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let k = self.labels.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0; k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Writes `<block name>.csv` per block and `labels.csv`; returns the block paths.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        let mut paths = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let p = dir.join(format!("{}.csv", b.name()));
            b.write_csv(&p)?;
            paths.push(p);
        }
        write_truth_labels(&dir.join("labels.csv"), self.sample_ids(), &self.labels)?;
        Ok(paths)
    }
}

pub fn write_truth_labels(path: &Path, ids: &[String], labels: &[usize]) -> Result<()> {
    let rows = ids.iter().zip(labels).map(|(id, l)| [id.clone(), l.to_string()]);
    write_csv_atomic(path, &["sample_id", "label"], rows)
}

/// Reads a `sample_id,label` file into a lookup table.
pub fn read_truth_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{}: line {line}: {e}", path.display())))?;
        let (Some(id), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                column: rec.len() + 1,
                message: "expected sample_id,label".into(),
            });
        };
        let label = label.trim().parse::<usize>().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            column: 2,
            message: format!("label {label:?} is not a non-negative integer"),
        })?;
        out.insert(id.trim().to_string(), label);
    }
    Ok(out)
}

fn equal_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

/// Largest-remainder rounding of `p · n` to integers summing to `n`.
fn apportion(p: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = p.iter().map(|q| q * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest: Vec<(usize, f64)> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (i, q - q.floor()))
        .collect();
    rest.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let missing = n - sizes.iter().sum::<usize>();
    for &(i, _) in rest.iter().take(missing) {
        sizes[i] += 1;
    }
    sizes
}

fn heterogeneous_sizes(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    loop {
        let draws: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = draws.iter().sum();
        let p: Vec<f64> = draws.iter().map(|d| d / total).collect();
        let sizes = apportion(&p, n);
        if sizes.iter().all(|&s| s >= 1) {
            return sizes;
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let (n, k) = (spec.n_samples, spec.n_clusters);
    let mut rng = crate::seed::rng(spec.seed, &[]);
    let sizes = match spec.size_mode {
        SizeMode::Equal => equal_sizes(n, k),
        SizeMode::Heterogeneous => heterogeneous_sizes(n, k, &mut rng),
    };
    let mut labels: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &s)| std::iter::repeat_n(c, s))
        .collect();
    labels.shuffle(&mut rng);

    let width = n.to_string().len();
    let ids: Vec<String> = (1..=n).map(|i| format!("s{i:0width$}")).collect();

    let mut blocks = Vec::with_capacity(spec.block_dims.len());
    for (b, &d) in spec.block_dims.iter().enumerate() {
        let mut normal = |scale: f64| scale * rng.sample::<f64, _>(StandardNormal);
        let centers = Matrix::from_fn(k, d, |_, _| normal(spec.separation));
        let values = Matrix::from_fn(n, d, |r, c| centers.get(labels[r], c) + normal(spec.noise_std));
        let name = SyntheticSpec::block_name(b);
        let feats = (0..d).map(|c| format!("{name}_{c}")).collect();
        blocks.push(OmicsBlock::new(name, ids.clone(), feats, values)?);
    }
    Ok(LabeledDataset { blocks, labels })
}

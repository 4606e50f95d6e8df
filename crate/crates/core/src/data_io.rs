//! Loading, alignment, standardization, fusion and augmentation of
//! per-modality feature matrices.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_csv_atomic;
use crate::nn::Matrix;

/// One modality: rows are samples, columns are features.
#[derive(Clone, Debug, PartialEq)]
pub struct OmicsBlock {
    name: String,
    sample_ids: Vec<String>,
    feature_names: Vec<String>,
    values: Matrix,
}

impl OmicsBlock {
    pub fn new(
        name: impl Into<String>,
        sample_ids: Vec<String>,
        feature_names: Vec<String>,
        values: Matrix,
    ) -> Result<Self> {
        let name = name.into();
        if values.rows() != sample_ids.len() || values.cols() != feature_names.len() {
            return Err(Error::shape(
                "OmicsBlock::new",
                format!(
                    "block {name:?}: values {:?} vs {} samples x {} features",
                    values.shape(),
                    sample_ids.len(),
                    feature_names.len()
                ),
            ));
        }
        let mut seen = HashSet::with_capacity(sample_ids.len());
        if let Some(dup) = sample_ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Data(format!("block {name:?}: duplicate sample id {dup:?}")));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite(format!("block {name:?} contains NaN or Inf")));
        }
        Ok(Self {
            name,
            sample_ids,
            feature_names,
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    /// Writes the block in the samples-as-rows layout read by [`load_block`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["sample_id"];
        header.extend(self.feature_names.iter().map(String::as_str));
        let rows = self.sample_ids.iter().enumerate().map(|(r, id)| {
            std::iter::once(id.clone())
                .chain(self.values.row(r).iter().map(|v| v.to_string()))
                .collect::<Vec<_>>()
        });
        write_csv_atomic(path, &header, rows)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    /// One row per sample, one column per feature.
    #[default]
    SamplesRows,
    /// One row per feature, one column per sample (TCGA benchmark export layout).
    FeaturesRows,
}

impl std::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "samples-rows" => Ok(Self::SamplesRows),
            "features-rows" => Ok(Self::FeaturesRows),
            other => Err(Error::Config(format!(
                "unknown orientation {other:?} (expected samples-rows or features-rows)"
            ))),
        }
    }
}

/// Reads a comma- or tab-delimited table; the delimiter is detected from the
/// header line. Empty cells are imputed with their column mean.
pub fn load_block(path: &Path, name: &str, orientation: Orientation) -> Result<OmicsBlock> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header_line = text.lines().next().unwrap_or("");
    let delimiter = if header_line.contains('\t') { b'\t' } else { b',' };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let parse_err = |line: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };

    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(parse_err(1, 1, e.to_string())),
        None => return Err(parse_err(1, 1, "missing header row".into())),
    };
    if header.len() < 2 {
        return Err(parse_err(1, 1, "header needs an id column and at least one value column".into()));
    }
    let col_labels: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();

    // cells[r][c] over the file's own layout; None marks a missing value
    let mut row_labels = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(line, 1, e.to_string()))?;
        if rec.len() == 1 && rec.get(0).is_some_and(str::is_empty) {
            continue;
        }
        if rec.len() != header.len() {
            return Err(parse_err(
                line,
                rec.len().min(header.len()) + 1,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        row_labels.push((rec[0].to_string(), line));
        let mut row = Vec::with_capacity(col_labels.len());
        for (c, cell) in rec.iter().enumerate().skip(1) {
            if cell.is_empty() {
                row.push(None);
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(Some(v)),
                _ => {
                    return Err(parse_err(line, c + 1, format!("non-numeric value {cell:?}")));
                }
            }
        }
        cells.push(row);
    }

    let (sample_ids, features, grid) = match orientation {
        Orientation::SamplesRows => {
            let mut seen = HashSet::new();
            for (id, line) in &row_labels {
                if !seen.insert(id.as_str()) {
                    return Err(Error::DuplicateSample {
                        path: path.to_path_buf(),
                        id: id.clone(),
                        line: *line,
                    });
                }
            }
            let ids = row_labels.into_iter().map(|(id, _)| id).collect();
            (ids, col_labels, cells)
        }
        Orientation::FeaturesRows => {
            let mut seen = HashSet::new();
            if let Some(dup) = col_labels.iter().find(|id| !seen.insert(id.as_str())) {
                return Err(Error::DuplicateSample {
                    path: path.to_path_buf(),
                    id: dup.clone(),
                    line: 1,
                });
            }
            let n_feat = cells.len();
            let transposed = (0..col_labels.len())
                .map(|s| (0..n_feat).map(|f| cells[f][s]).collect())
                .collect();
            let feats = row_labels.into_iter().map(|(id, _)| id).collect();
            (col_labels, feats, transposed)
        }
    };

    let n = sample_ids.len();
    let d = features.len();
    let mut values = Matrix::zeros(n, d);
    for c in 0..d {
        let observed: Vec<f64> = grid.iter().filter_map(|row| row[c]).collect();
        if observed.is_empty() {
            return Err(Error::EmptyColumn {
                path: path.to_path_buf(),
                column: c + 2,
                feature: features[c].clone(),
            });
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        for (r, row) in grid.iter().enumerate() {
            values.set(r, c, row[c].unwrap_or(mean));
        }
    }
    OmicsBlock::new(name, sample_ids, features, values)
}

/// Z-scores every column with the population standard deviation. Constant
/// columns become zeros.
pub fn standardize(block: &OmicsBlock) -> Result<OmicsBlock> {
    let n = block.n_samples();
    if n < 2 {
        return Err(Error::Data(format!(
            "block {:?}: standardization needs at least 2 samples, got {n}",
            block.name
        )));
    }
    let x = &block.values;
    let mean = x.column_means();
    let mut out = x.clone();
    for c in 0..x.cols() {
        let mu = mean.get(0, c);
        let var = (0..n).map(|r| (x.get(r, c) - mu).powi(2)).sum::<f64>() / n as f64;
        let sigma = var.sqrt();
        let scale = (0..n).map(|r| x.get(r, c).abs()).fold(0.0, f64::max);
        for r in 0..n {
            let v = if sigma <= scale * 1e-12 {
                0.0
            } else {
                (x.get(r, c) - mu) / sigma
            };
            out.set(r, c, v);
        }
    }
    OmicsBlock::new(
        block.name.clone(),
        block.sample_ids.clone(),
        block.feature_names.clone(),
        out,
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOffset {
    pub name: String,
    pub start: usize,
    pub width: usize,
}

/// Sample-aligned concatenation of blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedDataset {
    pub sample_ids: Vec<String>,
    pub values: Matrix,
    pub block_offsets: Vec<BlockOffset>,
}

impl FusedDataset {
    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.block_offsets.iter().map(|b| b.width).collect()
    }
}

/// Inner join on sample ids (ordered as in the first block) followed by
/// column-wise concatenation.
pub fn fuse(blocks: &[OmicsBlock]) -> Result<FusedDataset> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Data("fuse needs at least one block".into()))?;
    let lookups: Vec<HashMap<&str, usize>> = blocks
        .iter()
        .map(|b| {
            b.sample_ids
                .iter()
                .enumerate()
                .map(|(i, s)| (s.as_str(), i))
                .collect()
        })
        .collect();
    let kept: Vec<&String> = first
        .sample_ids
        .iter()
        .filter(|id| lookups.iter().all(|l| l.contains_key(id.as_str())))
        .collect();
    if kept.is_empty() {
        return Err(Error::Data("blocks share no sample ids".into()));
    }

    let mut parts = Vec::with_capacity(blocks.len());
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut start = 0;
    for (b, lookup) in blocks.iter().zip(&lookups) {
        let idx: Vec<usize> = kept.iter().map(|id| lookup[id.as_str()]).collect();
        parts.push(b.values.select_rows(&idx));
        offsets.push(BlockOffset {
            name: b.name.clone(),
            start,
            width: b.n_features(),
        });
        start += b.n_features();
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Ok(FusedDataset {
        sample_ids: kept.into_iter().cloned().collect(),
        values: Matrix::hcat(&refs)?,
        block_offsets: offsets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Std of additive Gaussian noise, in standardized units.
    pub noise_std: f64,
    /// Per-entry probability of zeroing a feature.
    pub mask_rate: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            mask_rate: 0.1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask_rate must be in [0, 1), got {}", self.mask_rate)));
        }
        Ok(())
    }
}

/// Two independently augmented copies of `batch`; row `i` of both views is a
/// positive pair.
pub fn make_views(batch: &Matrix, cfg: &AugmentConfig) -> Result<(Matrix, Matrix)> {
    cfg.validate()?;
    let view = |stream: u64| {
        let mut rng = crate::seed::rng(cfg.seed, &[stream]);
        let mut out = batch.clone();
        for v in out.data_mut() {
            if cfg.noise_std > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                *v += cfg.noise_std * z;
            }
            if cfg.mask_rate > 0.0 && rng.random::<f64>() < cfg.mask_rate {
                *v = 0.0;
            }
        }
        out
    };
    Ok((view(1), view(2)))
}

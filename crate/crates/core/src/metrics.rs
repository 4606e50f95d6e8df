//! Internal cluster-validity indices (C-index, Silhouette, Davies-Bouldin)
//! and the adjusted Rand index against a reference partition. All distances
//! are Euclidean.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{write_atomic, write_csv_atomic};
use crate::nn::Matrix;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Maps arbitrary labels to `0..k` in order of first appearance.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn check_partition(op: &str, x: &Matrix, labels: &[usize]) -> Result<(Vec<usize>, usize)> {
    if x.rows() != labels.len() {
        return Err(Error::Data(format!(
            "{op}: {} points but {} labels",
            x.rows(),
            labels.len()
        )));
    }
    let (compact, k) = compact(labels);
    if k < 2 {
        return Err(Error::Data(format!("{op} needs at least 2 clusters, got {k}")));
    }
    Ok((compact, k))
}

/// Hubert-Levin C-index `(S − S_min) / (S_max − S_min)`; 0 is best.
pub fn c_index(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let (lab, _) = check_partition("c_index", x, labels)?;
    let n = x.rows();
    if n < 3 {
        return Err(Error::Data(format!("c_index needs at least 3 points, got {n}")));
    }
    let mut all = Vec::with_capacity(n * (n - 1) / 2);
    let mut within = 0.0;
    let mut n_within = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(x.row(i), x.row(j));
            if lab[i] == lab[j] {
                within += d;
                n_within += 1;
            }
            all.push(d);
        }
    }
    if n_within == 0 {
        return Ok(0.0);
    }
    let p = all.len();
    all.select_nth_unstable_by(n_within - 1, f64::total_cmp);
    let s_min: f64 = all[..n_within].iter().sum();
    all.select_nth_unstable_by(p - n_within, f64::total_cmp);
    let s_max: f64 = all[p - n_within..].iter().sum();
    if s_max == s_min {
        return Ok(0.0);
    }
    Ok(((within - s_min) / (s_max - s_min)).clamp(0.0, 1.0))
}

/// Mean silhouette coefficient; points in singleton clusters score 0.
pub fn silhouette(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let (lab, k) = check_partition("silhouette", x, labels)?;
    let n = x.rows();
    let mut sizes = vec![0usize; k];
    lab.iter().for_each(|&l| sizes[l] += 1);
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[lab[j]] += dist(x.row(i), x.row(j));
            }
        }
        let own = lab[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Davies-Bouldin index; `+∞` when two centroids coincide.
pub fn davies_bouldin(x: &Matrix, labels: &[usize]) -> Result<f64> {
    let (lab, k) = check_partition("davies_bouldin", x, labels)?;
    let d = x.cols();
    let mut centroids = Matrix::zeros(k, d);
    let mut sizes = vec![0usize; k];
    for (row, &l) in x.iter_rows().zip(&lab) {
        sizes[l] += 1;
        centroids.row_mut(l).iter_mut().zip(row).for_each(|(c, v)| *c += v);
    }
    for c in 0..k {
        let s = sizes[c] as f64;
        centroids.row_mut(c).iter_mut().for_each(|v| *v /= s);
    }
    let mut scatter = vec![0.0; k];
    for (row, &l) in x.iter_rows().zip(&lab) {
        scatter[l] += dist(row, centroids.row(l));
    }
    for c in 0..k {
        scatter[c] /= sizes[c] as f64;
    }
    let mut total = 0.0;
    for i in 0..k {
        let worst = (0..k)
            .filter(|&j| j != i)
            .map(|j| {
                let m = dist(centroids.row(i), centroids.row(j));
                if m == 0.0 {
                    f64::INFINITY
                } else {
                    (scatter[i] + scatter[j]) / m
                }
            })
            .fold(f64::NEG_INFINITY, f64::max);
        total += worst;
    }
    Ok(total / k as f64)
}

fn choose2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table.
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "adjusted_rand: label lengths {} and {} differ",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Data("adjusted_rand needs at least 2 labels".into()));
    }
    let (ca, ka) = compact(a);
    let (cb, kb) = compact(b);
    let mut table = vec![0usize; ka * kb];
    let mut rows = vec![0usize; ka];
    let mut cols = vec![0usize; kb];
    for (&i, &j) in ca.iter().zip(&cb) {
        table[i * kb + j] += 1;
        rows[i] += 1;
        cols[j] += 1;
    }
    let index: f64 = table.iter().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let expected = sum_a * sum_b / choose2(a.len());
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // both partitions trivial (one cluster, or all singletons) and equal
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Scores for one clustering of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub k: usize,
    pub c_index: f64,
    pub silhouette: f64,
    pub davies_bouldin: f64,
    pub ari: Option<f64>,
}

pub fn evaluate(dataset: &str, x: &Matrix, labels: &[usize], truth: Option<&[usize]>) -> Result<MetricsRow> {
    let (_, k) = compact(labels);
    Ok(MetricsRow {
        dataset: dataset.to_string(),
        k,
        c_index: c_index(x, labels)?,
        silhouette: silhouette(x, labels)?,
        davies_bouldin: davies_bouldin(x, labels)?,
        ari: truth.map(|t| adjusted_rand(labels, t)).transpose()?,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else if v > 0.0 {
        "inf".into()
    } else if v < 0.0 {
        "-inf".into()
    } else {
        "nan".into()
    }
}

fn json_num(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map_or_else(|| serde_json::Value::String(fmt_num(v)), serde_json::Value::Number)
}

impl MetricsReport {
    pub const CSV_HEADER: [&'static str; 6] = ["dataset", "k", "c_index", "silhouette", "davies_bouldin", "ari"];

    /// CSV with `NA` for an absent ARI and `inf` for an unbounded Davies-Bouldin value.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.rows.iter().map(|r| {
            vec![
                r.dataset.clone(),
                r.k.to_string(),
                fmt_num(r.c_index),
                fmt_num(r.silhouette),
                fmt_num(r.davies_bouldin),
                r.ari.map_or_else(|| "NA".to_string(), fmt_num),
            ]
        });
        write_csv_atomic(path, &Self::CSV_HEADER, rows)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "dataset": r.dataset,
                    "k": r.k,
                    "c_index": json_num(r.c_index),
                    "silhouette": json_num(r.silhouette),
                    "davies_bouldin": json_num(r.davies_bouldin),
                    "ari": r.ari.map(json_num),
                })
            })
            .collect::<Vec<_>>();
        serde_json::json!({ "rows": rows })
    }

    /// JSON mirror of the CSV; absent ARI is `null`.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json()).map_err(|e| Error::Data(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

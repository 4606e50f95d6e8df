//! Lloyd's k-means with k-means++ seeding, independent restarts and a sweep
//! over the number of clusters.

use std::ops::RangeInclusive;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KmeansInit {
    #[default]
    KmeansPlusPlus,
    RandomPoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KmeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop once the relative inertia decrease falls below this.
    pub tol: f64,
    pub seed: u64,
    pub init: KmeansInit,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            k: 2,
            restarts: 100,
            max_iters: 300,
            tol: 1e-6,
            seed: 0,
            init: KmeansInit::KmeansPlusPlus,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub k: usize,
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    /// Index of the winning restart.
    pub restart_index: usize,
    /// Final inertia of every restart, in restart order.
    pub restart_inertias: Vec<f64>,
}

/// One Lloyd descent from given centroids.
#[derive(Clone, Debug)]
pub struct LloydRun {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the initial one.
    pub history: Vec<f64>,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(x: &Matrix, centroids: &Matrix, labels: &mut [usize], dists: &mut [f64]) -> f64 {
    for (i, row) in x.iter_rows().enumerate() {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for c in 0..centroids.rows() {
            let d = sq_dist(row, centroids.row(c));
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        labels[i] = best;
        dists[i] = best_d;
    }
    dists.iter().sum()
}

/// Centroid update; an emptied cluster takes the point farthest from its
/// current centroid.
fn update(x: &Matrix, labels: &[usize], centroids: &mut Matrix) {
    let (k, d) = centroids.shape();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (row, &l) in x.iter_rows().zip(labels) {
        counts[l] += 1;
        sums.row_mut(l).iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    for c in 0..k {
        if counts[c] > 0 {
            let n = counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / n;
            }
        }
    }
    let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
    if empty.is_empty() {
        return;
    }
    let mut far: Vec<(usize, f64)> = x
        .iter_rows()
        .zip(labels)
        .enumerate()
        .map(|(i, (row, &l))| (i, sq_dist(row, centroids.row(l))))
        .collect();
    far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for (c, (i, _)) in empty.into_iter().zip(far) {
        centroids.row_mut(c).copy_from_slice(x.row(i));
    }
}

pub fn lloyd(x: &Matrix, init: Matrix, max_iters: usize, tol: f64) -> LloydRun {
    let n = x.rows();
    let mut centroids = init;
    let mut labels = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut inertia = assign(x, &centroids, &mut labels, &mut dists);
    let mut history = vec![inertia];
    for _ in 0..max_iters {
        update(x, &labels, &mut centroids);
        let next = assign(x, &centroids, &mut labels, &mut dists);
        history.push(next);
        let converged = next == 0.0 || (inertia - next) <= tol * inertia;
        inertia = next;
        if converged {
            break;
        }
    }
    LloydRun {
        labels,
        centroids,
        inertia,
        history,
    }
}

pub fn init_centroids(x: &Matrix, k: usize, init: KmeansInit, rng: &mut impl Rng) -> Matrix {
    let n = x.rows();
    match init {
        KmeansInit::RandomPoints => x.select_rows(&sample(rng, n, k).into_vec()),
        KmeansInit::KmeansPlusPlus => {
            let mut chosen = vec![rng.random_range(0..n)];
            let mut d2: Vec<f64> = x.iter_rows().map(|r| sq_dist(r, x.row(chosen[0]))).collect();
            while chosen.len() < k {
                let total: f64 = d2.iter().sum();
                let next = if total > 0.0 {
                    let target = rng.random::<f64>() * total;
                    let mut acc = 0.0;
                    let mut pick = None;
                    for (i, &d) in d2.iter().enumerate() {
                        acc += d;
                        if d > 0.0 && acc > target {
                            pick = Some(i);
                            break;
                        }
                    }
                    pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap_or(0))
                } else {
                    rng.random_range(0..n)
                };
                chosen.push(next);
                for (i, row) in x.iter_rows().enumerate() {
                    d2[i] = d2[i].min(sq_dist(row, x.row(next)));
                }
            }
            x.select_rows(&chosen)
        }
    }
}

/// Best-of-`restarts` k-means. Restarts run in parallel with seeds derived
/// from `(seed, restart)`; ties in inertia go to the lower restart index.
pub fn kmeans(x: &Matrix, cfg: &KmeansConfig) -> Result<ClusterResult> {
    let n = x.rows();
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::Config(format!("k = {} must be in [1, {n}]", cfg.k)));
    }
    if cfg.restarts == 0 || cfg.max_iters == 0 {
        return Err(Error::Config("restarts and max_iters must be positive".into()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("k-means input contains NaN or Inf".into()));
    }
    let runs: Vec<LloydRun> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = crate::seed::rng(cfg.seed, &[r as u64]);
            let init = init_centroids(x, cfg.k, cfg.init, &mut rng);
            lloyd(x, init, cfg.max_iters, cfg.tol)
        })
        .collect();
    let restart_inertias: Vec<f64> = runs.iter().map(|r| r.inertia).collect();
    let best = (0..runs.len())
        .min_by(|&a, &b| restart_inertias[a].total_cmp(&restart_inertias[b]).then(a.cmp(&b)))
        .expect("at least one restart");
    let run = runs.into_iter().nth(best).expect("index in range");
    Ok(ClusterResult {
        k: cfg.k,
        labels: run.labels,
        centroids: run.centroids,
        inertia: run.inertia,
        restart_index: best,
        restart_inertias,
    })
}

/// k-means for every `k` in the range, each with a seed derived from `(seed, k)`.
pub fn sweep_k(x: &Matrix, ks: RangeInclusive<usize>, cfg: &KmeansConfig) -> Result<Vec<ClusterResult>> {
    if ks.is_empty() {
        return Err(Error::Config(format!("empty k range {}..{}", ks.start(), ks.end())));
    }
    if *ks.end() > x.rows() {
        return Err(Error::Config(format!(
            "k range ends at {} but there are only {} samples",
            ks.end(),
            x.rows()
        )));
    }
    ks.map(|k| {
        let c = KmeansConfig {
            k,
            seed: crate::seed::derive(cfg.seed, &[k as u64]),
            ..cfg.clone()
        };
        kmeans(x, &c)
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(k: usize) -> KmeansConfig {
        KmeansConfig {
            k,
            restarts: 10,
            ..KmeansConfig::default()
        }
    }

    fn inertia_of(x: &Matrix, labels: &[usize], centroids: &Matrix) -> f64 {
        x.iter_rows()
            .zip(labels)
            .map(|(r, &l)| sq_dist(r, centroids.row(l)))
            .sum()
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let x = Matrix::from_fn(7, 3, |r, c| (r * r + c) as f64);
        let res = kmeans(&x, &cfg(1)).unwrap();
        let mean = x.column_means();
        assert!(res.centroids.max_abs_diff(&mean) < 1e-12);
        let total: f64 = x.iter_rows().map(|r| sq_dist(r, mean.row(0))).sum();
        assert!((res.inertia - total).abs() < 1e-9);
    }

    #[test]
    fn two_blobs_are_separated() {
        let pts = [
            [0.0, 0.0],
            [0.1, 0.0],
            [0.0, 0.1],
            [10.0, 10.0],
            [10.1, 10.0],
            [10.0, 10.1],
        ];
        let x = Matrix::from_rows(&pts).unwrap();
        let res = kmeans(&x, &cfg(2)).unwrap();
        assert_eq!(res.labels[0], res.labels[1]);
        assert_eq!(res.labels[0], res.labels[2]);
        assert_eq!(res.labels[3], res.labels[4]);
        assert_eq!(res.labels[3], res.labels[5]);
        assert_ne!(res.labels[0], res.labels[3]);
        assert!(res.inertia < 1.0);

        // brute force over all 2-partitions of the 6 points
        let mut best = f64::INFINITY;
        for mask in 1u32..(1 << 6) - 1 {
            let labels: Vec<usize> = (0..6).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut c = Matrix::zeros(2, 2);
            update(&x, &labels, &mut c);
            best = best.min(inertia_of(&x, &labels, &c));
        }
        assert!((res.inertia - best).abs() < 1e-12);
    }

    #[test]
    fn k_equal_n_has_zero_inertia() {
        let x = Matrix::from_fn(5, 2, |r, c| (r as f64).powi(2) + c as f64);
        let res = kmeans(&x, &cfg(5)).unwrap();
        assert_eq!(res.inertia, 0.0);
        let mut l = res.labels.clone();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn invalid_inputs() {
        let x = Matrix::zeros(3, 2);
        assert!(kmeans(&x, &cfg(4)).is_err());
        assert!(kmeans(&x, &cfg(0)).is_err());
        let mut bad = Matrix::zeros(3, 2);
        bad.set(0, 0, f64::NAN);
        assert!(matches!(kmeans(&bad, &cfg(2)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0], [10.0]]).unwrap();
        // the second centroid attracts nobody
        let init = Matrix::from_rows(&[[3.0], [100.0]]).unwrap();
        let run = lloyd(&x, init, 50, 1e-9);
        assert!(run.labels.contains(&0) && run.labels.contains(&1));
        assert!((run.inertia - inertia_of(&x, &run.labels, &run.centroids)).abs() < 1e-9);
    }

    #[test]
    fn sweep_enumerates_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::from_fn(40, 2, |_, _| rng.random_range(-1.0..1.0));
        let res = sweep_k(&x, 2..=6, &cfg(0)).unwrap();
        assert_eq!(res.iter().map(|r| r.k).collect::<Vec<_>>(), vec![2, 3, 4, 5, 6]);
        assert_eq!(sweep_k(&x, 3..=3, &cfg(0)).unwrap().len(), 1);
        assert!(sweep_k(&x, 2..=41, &cfg(0)).is_err());
    }

    #[test]
    fn random_point_init_also_works() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::from_fn(30, 3, |_, _| rng.random_range(-1.0..1.0));
        let c = KmeansConfig {
            init: KmeansInit::RandomPoints,
            ..cfg(3)
        };
        let res = kmeans(&x, &c).unwrap();
        assert!((res.inertia - inertia_of(&x, &res.labels, &res.centroids)).abs() < 1e-9);
        assert_eq!(res, kmeans(&x, &c).unwrap());
    }
}

//! Instance-level decoupled contrastive loss (with the InfoNCE variant as an
//! ablation switch), cluster-level contrast over the columns of the cluster
//! probability matrices, the marginal-entropy regularizer and their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::smae::ViewPair;

/// Norm floor used when normalizing rows inside the contrastive kernels.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastKind {
    /// Denominator excludes the anchor itself and its positive.
    #[default]
    Dcl,
    /// Denominator over every intra- and cross-view pair, self and positive included.
    InfoNce,
}

impl std::fmt::Display for ContrastKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ContrastKind::Dcl => "dcl",
            ContrastKind::InfoNce => "infonce",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Views {
    /// Only the first view.
    One,
    #[default]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau_instance: f64,
    pub tau_cluster: f64,
    pub entropy_weight: f64,
    pub instance_kind: ContrastKind,
    /// Which views supply anchors for the instance loss.
    pub anchor_views: Views,
    /// Which views enter the entropy regularizer (averaged when both).
    pub entropy_views: Views,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_instance: 0.5,
            tau_cluster: 1.0,
            entropy_weight: 2.0,
            instance_kind: ContrastKind::Dcl,
            anchor_views: Views::Both,
            entropy_views: Views::Both,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_instance", self.tau_instance), ("tau_cluster", self.tau_cluster)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {t}")));
            }
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_weight.is_finite()) {
            return Err(Error::Config(format!(
                "entropy_weight must be >= 0, got {}",
                self.entropy_weight
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Instance contrastive loss.
    pub instance: f64,
    /// Cluster loss: column contrast plus entropy term.
    pub cluster: f64,
    /// Weighted entropy part of `cluster`.
    pub entropy: f64,
    pub total: f64,
}

/// Gradients of the total loss with respect to the head outputs.
#[derive(Clone, Debug)]
pub struct LossGrads {
    pub embeddings: (Matrix, Matrix),
    pub probabilities: (Matrix, Matrix),
}

/// Pairwise cosine similarities between the rows of `a` and `b`.
pub fn cosine_sim_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "cosine_sim_matrix",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let norms = |m: &Matrix, which: &str| -> Result<Vec<f64>> {
        m.iter_rows()
            .enumerate()
            .map(|(r, row)| {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    Ok(n)
                } else {
                    Err(Error::Data(format!("cosine similarity: row {r} of {which} has zero norm")))
                }
            })
            .collect()
    };
    let (na, nb) = (norms(a, "A")?, norms(b, "B")?);
    let mut s = a.matmul_nt(b)?;
    for i in 0..s.rows() {
        for j in 0..s.cols() {
            s.set(i, j, s.get(i, j) / (na[i] * nb[j]));
        }
    }
    Ok(s)
}

struct Contrast {
    loss: f64,
    anchor_losses: Vec<f64>,
    du: Matrix,
    dv: Matrix,
}

fn normalize(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        row.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

fn normalize_backward(unit: &Matrix, norms: &[f64], d_unit: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(unit.rows(), unit.cols());
    for r in 0..unit.rows() {
        let (y, g) = (unit.row(r), d_unit.row(r));
        if norms[r] <= NORM_EPS {
            d.row_mut(r).iter_mut().zip(g).for_each(|(o, g)| *o = g / NORM_EPS);
            continue;
        }
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, a), g) in d.row_mut(r).iter_mut().zip(y).zip(g) {
            *o = (g - a * dot) / norms[r];
        }
    }
    d
}

/// Two-view contrast over the rows of `u` and `v`. Anchor `a` of the stacked
/// `[u; v]` has its positive at `(a + n) mod 2n`; the loss is averaged over
/// the selected anchors.
fn contrast(u: &Matrix, v: &Matrix, tau: f64, kind: ContrastKind, anchors: Views) -> Result<Contrast> {
    if u.shape() != v.shape() {
        return Err(Error::shape("contrast", format!("{:?} vs {:?}", u.shape(), v.shape())));
    }
    let n = u.rows();
    if n < 2 {
        return Err(Error::Data(format!("contrastive loss needs at least 2 rows, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    let (uu, nu) = normalize(u);
    let (vv, nv) = normalize(v);
    let z = Matrix::vcat(&[&uu, &vv])?;
    let logits = z.matmul_nt(&z)?.scale(1.0 / tau);

    let two_n = 2 * n;
    let n_anchors = match anchors {
        Views::One => n,
        Views::Both => two_n,
    };
    let inv = 1.0 / n_anchors as f64;
    let mut d_logits = Matrix::zeros(two_n, two_n);
    let mut anchor_losses = Vec::with_capacity(n_anchors);
    for a in 0..n_anchors {
        let pos = (a + n) % two_n;
        let in_denominator = |j: usize| match kind {
            ContrastKind::Dcl => j != a && j != pos,
            ContrastKind::InfoNce => true,
        };
        let row = logits.row(a);
        let max = (0..two_n)
            .filter(|&j| in_denominator(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..two_n)
            .filter(|&j| in_denominator(j))
            .map(|j| (row[j] - max).exp())
            .sum();
        let lse = max + sum.ln();
        anchor_losses.push(lse - row[pos]);
        let d_row = d_logits.row_mut(a);
        for j in (0..two_n).filter(|&j| in_denominator(j)) {
            d_row[j] += inv * (row[j] - lse).exp();
        }
        d_row[pos] -= inv;
    }
    let loss = anchor_losses.iter().sum::<f64>() * inv;

    let sym = d_logits.add(&d_logits.transpose())?;
    let dz = sym.matmul(&z)?.scale(1.0 / tau);
    let top: Vec<usize> = (0..n).collect();
    let bottom: Vec<usize> = (n..two_n).collect();
    let du = normalize_backward(&uu, &nu, &dz.select_rows(&top));
    let dv = normalize_backward(&vv, &nv, &dz.select_rows(&bottom));
    Ok(Contrast {
        loss,
        anchor_losses,
        du,
        dv,
    })
}

/// Per-anchor contrastive losses for all `2N` anchors (first view, then second).
pub fn anchor_losses(u: &Matrix, v: &Matrix, tau: f64, kind: ContrastKind) -> Result<Vec<f64>> {
    Ok(contrast(u, v, tau, kind, Views::Both)?.anchor_losses)
}

/// Instance contrastive loss and its gradients with respect to both views.
pub fn instance_loss(emb1: &Matrix, emb2: &Matrix, cfg: &LossConfig) -> Result<(f64, Matrix, Matrix)> {
    let c = contrast(emb1, emb2, cfg.tau_instance, cfg.instance_kind, cfg.anchor_views)?;
    Ok((c.loss, c.du, c.dv))
}

/// `weight · Σ_k P_k log P_k` with `P` the column means of `prob`, and its gradient.
pub fn entropy_term(prob: &Matrix, weight: f64) -> (f64, Matrix) {
    let n = prob.rows() as f64;
    let p = prob.column_means();
    let value: f64 = p
        .data()
        .iter()
        .map(|&pk| if pk > 0.0 { pk * pk.ln() } else { 0.0 })
        .sum();
    let slope: Vec<f64> = p
        .data()
        .iter()
        .map(|&pk| weight * (pk.max(f64::MIN_POSITIVE).ln() + 1.0) / n)
        .collect();
    let grad = Matrix::from_fn(prob.rows(), prob.cols(), |_, k| slope[k]);
    (weight * value, grad)
}

#[derive(Clone, Debug)]
pub struct ClusterLoss {
    pub contrast: f64,
    pub entropy: f64,
    pub total: f64,
    pub d1: Matrix,
    pub d2: Matrix,
}

/// Column-wise ("labels as features") contrast of the two cluster probability
/// matrices plus the entropy regularizer.
pub fn cluster_loss(prob1: &Matrix, prob2: &Matrix, cfg: &LossConfig) -> Result<ClusterLoss> {
    if prob1.cols() < 2 {
        return Err(Error::Data(format!("cluster loss needs K >= 2, got {}", prob1.cols())));
    }
    let c = contrast(
        &prob1.transpose(),
        &prob2.transpose(),
        cfg.tau_cluster,
        cfg.instance_kind,
        Views::Both,
    )?;
    let mut d1 = c.du.transpose();
    let mut d2 = c.dv.transpose();
    let entropy = match cfg.entropy_views {
        Views::One => {
            let (h, g) = entropy_term(prob1, cfg.entropy_weight);
            d1.add_assign(&g)?;
            h
        }
        Views::Both => {
            let (h1, g1) = entropy_term(prob1, cfg.entropy_weight);
            let (h2, g2) = entropy_term(prob2, cfg.entropy_weight);
            d1.add_assign(&g1.scale(0.5))?;
            d2.add_assign(&g2.scale(0.5))?;
            0.5 * (h1 + h2)
        }
    };
    Ok(ClusterLoss {
        contrast: c.loss,
        entropy,
        total: c.loss + entropy,
        d1,
        d2,
    })
}

/// Joint objective over both heads of a view pair.
pub fn total_loss(pair: &ViewPair, cfg: &LossConfig) -> Result<(LossBreakdown, LossGrads)> {
    let (l_inst, de1, de2) = instance_loss(&pair.first.embeddings, &pair.second.embeddings, cfg)?;
    let cl = cluster_loss(&pair.first.probabilities, &pair.second.probabilities, cfg)?;
    Ok((
        LossBreakdown {
            instance: l_inst,
            cluster: cl.total,
            entropy: cl.entropy,
            total: l_inst + cl.total,
        },
        LossGrads {
            embeddings: (de1, de2),
            probabilities: (cl.d1, cl.d2),
        },
    ))
}

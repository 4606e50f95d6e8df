use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Matrix, ParamId, ParamStore};

/// `x · weight + 1 · bias`
pub fn linear(x: &Matrix, weight: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows() != 1 || bias.cols() != weight.cols() {
        return Err(Error::shape(
            "linear",
            format!("bias {:?} for weight {:?}", bias.shape(), weight.shape()),
        ));
    }
    let mut y = x.matmul(weight)?;
    let b = bias.data();
    for r in 0..y.rows() {
        y.row_mut(r).iter_mut().zip(b).for_each(|(v, b)| *v += b);
    }
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dx: Matrix,
    pub dweight: Matrix,
    pub dbias: Matrix,
}

pub fn linear_backward(x: &Matrix, weight: &Matrix, dy: &Matrix) -> Result<LinearGrads> {
    Ok(LinearGrads {
        dx: dy.matmul_nt(weight)?,
        dweight: x.matmul_tn(dy)?,
        dbias: dy.column_sums(),
    })
}

/// A dense layer whose weight and bias live in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Registers `{name}.weight` (uniform Glorot) and a zero `{name}.bias`.
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..=bound));
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out))?,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        linear(x, store.value(self.weight), store.value(self.bias))
    }

    /// Accumulates weight/bias gradients and returns `∂L/∂x`.
    pub fn backward(&self, store: &mut ParamStore, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        let g = linear_backward(x, store.value(self.weight), dy)?;
        store.accumulate(self.weight, &g.dweight)?;
        store.accumulate(self.bias, &g.dbias)?;
        Ok(g.dx)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    y
}

/// Jacobian-vector product of softmax given its output `y`.
pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Result<Matrix> {
    y.check_same("softmax_rows_backward", dy)?;
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, gr) = (y.row(r), dy.row(r));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, a), g) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = a * (g - dot);
        }
    }
    Ok(dx)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// `x` is the pre-activation input.
pub fn relu_backward(x: &Matrix, dy: &Matrix) -> Result<Matrix> {
    x.check_same("relu_backward", dy)?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
        .collect();
    Matrix::new(x.rows(), x.cols(), data)
}

/// Per-entry multipliers of inverted dropout: `0` or `1 / (1 - rate)`.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    scale: Option<Vec<f64>>,
}

impl DropoutMask {
    pub fn identity() -> Self {
        Self { scale: None }
    }

    pub fn sample(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Self {
        if rate <= 0.0 {
            return Self::identity();
        }
        let keep = 1.0 / (1.0 - rate);
        let scale = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        Self { scale: Some(scale) }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        match &self.scale {
            None => x.clone(),
            Some(s) => {
                let data = x.data().iter().zip(s).map(|(v, m)| v * m).collect();
                Matrix::new(x.rows(), x.cols(), data).expect("mask shape matches input")
            }
        }
    }
}

/// Inverted dropout. Eval mode (`training == false`) is the identity; the
/// returned mask replays the same positions on backward.
pub fn dropout(x: &Matrix, rate: f64, training: bool, seed: u64) -> Result<(Matrix, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training {
        return Ok((x.clone(), DropoutMask::identity()));
    }
    let mut rng = crate::seed::rng(seed, &[]);
    let mask = DropoutMask::sample(x.rows(), x.cols(), rate, &mut rng);
    Ok((mask.apply(x), mask))
}

/// Rows scaled to unit Euclidean norm. A zero row becomes the first basis
/// vector; its backward gradient is zero. Returns the pre-normalization norms.
pub fn l2_normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut y = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        } else if let Some(first) = row.first_mut() {
            *first = 1.0;
        }
        norms.push(norm);
    }
    (y, norms)
}

pub fn l2_normalize_rows_backward(y: &Matrix, norms: &[f64], dy: &Matrix) -> Result<Matrix> {
    y.check_same("l2_normalize_rows_backward", dy)?;
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        if norms[r] <= 0.0 {
            continue;
        }
        let (yr, gr) = (y.row(r), dy.row(r));
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, a), g) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = (g - a * dot) / norms[r];
        }
    }
    Ok(dx)
}

/// Per-row statistics kept by [`layer_norm`].
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

pub struct LayerNormGrads {
    pub dx: Matrix,
    pub dgain: Matrix,
    pub dbias: Matrix,
}

/// Row-wise `(x − mean) / √(var + eps) · gain + bias`, population variance.
pub fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gain.shape() != (1, d) || bias.shape() != (1, d) {
        return Err(Error::shape(
            "layer_norm",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        ));
    }
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = xhat.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
    }
    let mut y = xhat.clone();
    for r in 0..y.rows() {
        for ((v, g), b) in y.row_mut(r).iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(c: &LayerNormCache, gain: &Matrix, dy: &Matrix) -> Result<LayerNormGrads> {
    c.xhat.check_same("layer_norm_backward", dy)?;
    let d = dy.cols() as f64;
    let mut dx = Matrix::zeros(dy.rows(), dy.cols());
    let mut dgain = Matrix::zeros(1, dy.cols());
    let mut dbias = Matrix::zeros(1, dy.cols());
    for r in 0..dy.rows() {
        let (xh, g) = (c.xhat.row(r), dy.row(r));
        for (j, (a, b)) in xh.iter().zip(g).enumerate() {
            dgain.data_mut()[j] += a * b;
            dbias.data_mut()[j] += b;
        }
        let dxh: Vec<f64> = g.iter().zip(gain.data()).map(|(a, b)| a * b).collect();
        let sum: f64 = dxh.iter().sum();
        let dot: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        for ((o, a), b) in dx.row_mut(r).iter_mut().zip(&dxh).zip(xh) {
            *o = c.inv_std[r] * (a - (sum + b * dot) / d);
        }
    }
    Ok(LayerNormGrads { dx, dgain, dbias })
}

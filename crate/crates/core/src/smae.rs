//! Shared-weight multi-head attention encoder with instance and cluster
//! projection heads.
//!
//! Each sample becomes a short token sequence, one token per feature block:
//! block `m` is mapped to `d_model` by its own learned linear layer plus a
//! learned per-block position vector. One multi-head self-attention layer
//! with residual feed-forward mixes the tokens (layer norm after each
//! residual add), and their mean is the sample's feature vector. The same parameters encode both augmented views.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::nn::{
    dropout, l2_normalize_rows, l2_normalize_rows_backward, layer_norm, layer_norm_backward, relu,
    relu_backward, softmax_rows, softmax_rows_backward, DropoutMask, LayerNormCache, Linear, Matrix,
    ParamId, ParamStore,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmaeConfig {
    /// Width of each input block; filled from the fused dataset.
    pub block_dims: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub dropout_rate: f64,
    /// Width of the instance head output.
    pub embed_dim: usize,
    /// Width of the cluster head output.
    pub n_clusters: usize,
    pub mlp_hidden: usize,
}

impl Default for SmaeConfig {
    fn default() -> Self {
        Self {
            block_dims: Vec::new(),
            d_model: 256,
            heads: 8,
            dropout_rate: 0.1,
            embed_dim: 10,
            n_clusters: 5,
            mlp_hidden: 256,
        }
    }
}

impl SmaeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.block_dims.is_empty() || self.block_dims.contains(&0) {
            return fail(format!("block_dims must be non-empty and positive: {:?}", self.block_dims));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "d_model ({}) must be a positive multiple of heads ({})",
                self.d_model, self.heads
            ));
        }
        if self.embed_dim == 0 || self.mlp_hidden == 0 {
            return fail("embed_dim and mlp_hidden must be positive".into());
        }
        if self.n_clusters < 2 {
            return fail(format!("n_clusters must be >= 2, got {}", self.n_clusters));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn n_blocks(&self) -> usize {
        self.block_dims.len()
    }

    pub fn input_dim(&self) -> usize {
        self.block_dims.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active, masks drawn from `seed`.
    Train { seed: u64 },
}

/// Outputs of one view.
#[derive(Clone, Debug)]
pub struct ViewOutput {
    /// Pooled encoder output, `N × d_model`.
    pub features: Matrix,
    /// Instance head, `N × embed_dim`, unit rows.
    pub embeddings: Matrix,
    /// Cluster head, `N × K`, rows on the simplex.
    pub probabilities: Matrix,
}

/// Both views of a batch; row `i` of each is a positive pair.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub first: ViewOutput,
    pub second: ViewOutput,
}

#[derive(Clone, Copy, Debug)]
struct Mlp3 {
    layers: [Linear; 3],
}

#[derive(Clone, Debug)]
struct Mlp3Cache {
    input: Matrix,
    pre1: Matrix,
    act1: Matrix,
    pre2: Matrix,
    act2: Matrix,
}

impl Mlp3 {
    fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<(Matrix, Mlp3Cache)> {
        let pre1 = self.layers[0].forward(store, x)?;
        let act1 = relu(&pre1);
        let pre2 = self.layers[1].forward(store, &act1)?;
        let act2 = relu(&pre2);
        let out = self.layers[2].forward(store, &act2)?;
        Ok((
            out,
            Mlp3Cache {
                input: x.clone(),
                pre1,
                act1,
                pre2,
                act2,
            },
        ))
    }

    fn backward(&self, store: &mut ParamStore, c: &Mlp3Cache, dy: &Matrix) -> Result<Matrix> {
        let d_act2 = self.layers[2].backward(store, &c.act2, dy)?;
        let d_pre2 = relu_backward(&c.pre2, &d_act2)?;
        let d_act1 = self.layers[1].backward(store, &c.act1, &d_pre2)?;
        let d_pre1 = relu_backward(&c.pre1, &d_act1)?;
        self.layers[0].backward(store, &c.input, &d_pre1)
    }
}

/// Inputs kept from [`Smae::position_encode`] for the backward pass.
#[derive(Clone, Debug)]
pub struct PositionCache {
    slices: Vec<Matrix>,
}

/// Intermediates of [`Smae::multi_head_attention`].
#[derive(Clone, Debug)]
pub struct AttentionCache {
    tokens: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// `M × M` attention weights, sample-major then head.
    weights: Vec<Matrix>,
    concat: Matrix,
    attn: Matrix,
    drop_attn: DropoutMask,
    norm_attn: LayerNormCache,
    hidden: Matrix,
    ffn_pre: Matrix,
    ffn_act: Matrix,
    drop_ffn: DropoutMask,
    norm_ffn: LayerNormCache,
}

impl AttentionCache {
    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    position: PositionCache,
    attention: AttentionCache,
    n_samples: usize,
}

impl EncodeCache {
    pub fn attention(&self) -> &AttentionCache {
        &self.attention
    }
}

#[derive(Clone, Debug)]
pub struct InstanceCache {
    mlp: Mlp3Cache,
    embeddings: Matrix,
    norms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ClusterCache {
    mlp: Mlp3Cache,
    probabilities: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub encode: EncodeCache,
    instance: InstanceCache,
    cluster: ClusterCache,
}

enum Init {
    Glorot,
    Zero,
    One,
}

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<(Matrix, LayerNormCache)> {
        layer_norm(x, store.value(self.gain), store.value(self.bias), NORM_EPS)
    }

    fn backward(&self, store: &mut ParamStore, c: &LayerNormCache, dy: &Matrix) -> Result<Matrix> {
        let g = layer_norm_backward(c, store.value(self.gain), dy)?;
        store.accumulate(self.gain, &g.dgain)?;
        store.accumulate(self.bias, &g.dbias)?;
        Ok(g.dx)
    }
}

/// Parameter handles of the encoder and both heads.
#[derive(Clone, Debug)]
pub struct Smae {
    cfg: SmaeConfig,
    block_maps: Vec<Linear>,
    position: ParamId,
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
    ffn: [Linear; 2],
    norms: [Norm; 2],
    instance: Mlp3,
    cluster: Mlp3,
}

impl Smae {
    /// Registers freshly initialized parameters: weights uniform in
    /// `±√(6 / (fan_in + fan_out))`, biases zero.
    pub fn new(cfg: SmaeConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::seed::rng(seed, &[0x696e_6974]);
        Self::build(cfg, &mut |name, rows, cols, init| {
            let value = match init {
                Init::Zero => Matrix::zeros(rows, cols),
                Init::One => Matrix::filled(rows, cols, 1.0),
                Init::Glorot => {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
                }
            };
            store.add(name, value)
        })
    }

    /// Binds to parameters already present in `store` (e.g. from a checkpoint).
    pub fn attach(cfg: SmaeConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        Self::build(cfg, &mut |name, rows, cols, _| {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name:?}")))?;
            if store.value(id).shape() != (rows, cols) {
                return Err(Error::shape(
                    "Smae::attach",
                    format!("{name}: {:?} vs expected ({rows}, {cols})", store.value(id).shape()),
                ));
            }
            Ok(id)
        })
    }

    fn build(
        cfg: SmaeConfig,
        alloc: &mut dyn FnMut(String, usize, usize, Init) -> Result<ParamId>,
    ) -> Result<Self> {
        let mut linear = |name: &str, fan_in: usize, fan_out: usize| -> Result<Linear> {
            Ok(Linear {
                weight: alloc(format!("{name}.weight"), fan_in, fan_out, Init::Glorot)?,
                bias: alloc(format!("{name}.bias"), 1, fan_out, Init::Zero)?,
            })
        };
        let d = cfg.d_model;
        let hid = cfg.mlp_hidden;
        let block_maps = cfg
            .block_dims
            .iter()
            .enumerate()
            .map(|(m, &w)| linear(&format!("block_map.{m}"), w, d))
            .collect::<Result<Vec<_>>>()?;
        let ffn = [linear("ffn.0", d, hid)?, linear("ffn.1", hid, d)?];
        let instance = Mlp3 {
            layers: [
                linear("instance.0", d, hid)?,
                linear("instance.1", hid, hid)?,
                linear("instance.2", hid, cfg.embed_dim)?,
            ],
        };
        let cluster = Mlp3 {
            layers: [
                linear("cluster.0", d, hid)?,
                linear("cluster.1", hid, hid)?,
                linear("cluster.2", hid, cfg.n_clusters)?,
            ],
        };
        let mut norm = |name: &str| -> Result<Norm> {
            Ok(Norm {
                gain: alloc(format!("{name}.gain"), 1, d, Init::One)?,
                bias: alloc(format!("{name}.bias"), 1, d, Init::Zero)?,
            })
        };
        let norms = [norm("norm.0")?, norm("norm.1")?];
        let position = alloc("block_position".into(), cfg.n_blocks(), d, Init::Zero)?;
        let query = alloc("attn.query".into(), d, d, Init::Glorot)?;
        let key = alloc("attn.key".into(), d, d, Init::Glorot)?;
        let value = alloc("attn.value".into(), d, d, Init::Glorot)?;
        let output = alloc("attn.output".into(), d, d, Init::Glorot)?;
        Ok(Self {
            cfg,
            block_maps,
            position,
            query,
            key,
            value,
            output,
            ffn,
            norms,
            instance,
            cluster,
        })
    }

    pub fn config(&self) -> &SmaeConfig {
        &self.cfg
    }

    /// Handles of the final instance- and cluster-head layers.
    pub fn head_outputs(&self) -> (Linear, Linear) {
        (self.instance.layers[2], self.cluster.layers[2])
    }

    /// Maps `N × D` fused rows to `(N·M) × d_model` tokens; token `n·M + m`
    /// is block `m` of sample `n`.
    pub fn position_encode(&self, store: &ParamStore, x: &Matrix) -> Result<(Matrix, PositionCache)> {
        if x.cols() != self.cfg.input_dim() {
            return Err(Error::shape(
                "position_encode",
                format!("input has {} columns, blocks sum to {}", x.cols(), self.cfg.input_dim()),
            ));
        }
        let (n, m_blocks, d) = (x.rows(), self.cfg.n_blocks(), self.cfg.d_model);
        let pos = store.value(self.position);
        let mut tokens = Matrix::zeros(n * m_blocks, d);
        let mut slices = Vec::with_capacity(m_blocks);
        let mut start = 0;
        for (m, (map, &width)) in self.block_maps.iter().zip(&self.cfg.block_dims).enumerate() {
            let slice = x.slice_cols(start, width)?;
            start += width;
            let y = map.forward(store, &slice)?;
            for s in 0..n {
                let row = tokens.row_mut(s * m_blocks + m);
                for ((t, a), b) in row.iter_mut().zip(y.row(s)).zip(pos.row(m)) {
                    *t = a + b;
                }
            }
            slices.push(slice);
        }
        Ok((tokens, PositionCache { slices }))
    }

    fn position_encode_backward(
        &self,
        store: &mut ParamStore,
        cache: &PositionCache,
        d_tokens: &Matrix,
    ) -> Result<()> {
        let m_blocks = self.cfg.n_blocks();
        let n = d_tokens.rows() / m_blocks;
        let mut d_pos = Matrix::zeros(m_blocks, self.cfg.d_model);
        for (m, map) in self.block_maps.iter().enumerate() {
            let idx: Vec<usize> = (0..n).map(|s| s * m_blocks + m).collect();
            let dy = d_tokens.select_rows(&idx);
            d_pos.row_mut(m).copy_from_slice(dy.column_sums().row(0));
            map.backward(store, &cache.slices[m], &dy)?;
        }
        store.accumulate(self.position, &d_pos)
    }

    /// Self-attention over each sample's tokens, `W^O` projection, residual,
    /// feed-forward and second residual, each residual sum layer-normalized.
    /// Dropout follows the attention and the feed-forward outputs in training
    /// mode.
    pub fn multi_head_attention(
        &self,
        store: &ParamStore,
        tokens: &Matrix,
        mode: Mode,
    ) -> Result<(Matrix, AttentionCache)> {
        let m_blocks = self.cfg.n_blocks();
        if tokens.cols() != self.cfg.d_model || tokens.rows() % m_blocks != 0 {
            return Err(Error::shape(
                "multi_head_attention",
                format!("tokens {:?} for {m_blocks} blocks x {}", tokens.shape(), self.cfg.d_model),
            ));
        }
        let n = tokens.rows() / m_blocks;
        let (heads, dk) = (self.cfg.heads, self.cfg.d_k());
        let scale = 1.0 / (dk as f64).sqrt();
        let q = tokens.matmul(store.value(self.query))?;
        let k = tokens.matmul(store.value(self.key))?;
        let v = tokens.matmul(store.value(self.value))?;
        let mut concat = Matrix::zeros(tokens.rows(), self.cfg.d_model);
        let mut weights = Vec::with_capacity(n * heads);
        for s in 0..n {
            let base = s * m_blocks;
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                let scores = Matrix::from_fn(m_blocks, m_blocks, |i, j| {
                    let qi = &q.row(base + i)[cols.clone()];
                    let kj = &k.row(base + j)[cols.clone()];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                });
                let a = softmax_rows(&scores);
                for i in 0..m_blocks {
                    let out = &mut concat.row_mut(base + i)[cols.clone()];
                    for j in 0..m_blocks {
                        let w = a.get(i, j);
                        for (o, vv) in out.iter_mut().zip(&v.row(base + j)[cols.clone()]) {
                            *o += w * vv;
                        }
                    }
                }
                weights.push(a);
            }
        }
        let attn = concat.matmul(store.value(self.output))?;

        let (training, seed) = match mode {
            Mode::Eval => (false, 0),
            Mode::Train { seed } => (true, seed),
        };
        let rate = self.cfg.dropout_rate;
        let (attn_d, drop_attn) = dropout(&attn, rate, training, crate::seed::derive(seed, &[1]))?;
        let (hidden, norm_attn) = self.norms[0].forward(store, &tokens.add(&attn_d)?)?;
        let ffn_pre = self.ffn[0].forward(store, &hidden)?;
        let ffn_act = relu(&ffn_pre);
        let ffn_out = self.ffn[1].forward(store, &ffn_act)?;
        let (ffn_d, drop_ffn) = dropout(&ffn_out, rate, training, crate::seed::derive(seed, &[2]))?;
        let (out, norm_ffn) = self.norms[1].forward(store, &hidden.add(&ffn_d)?)?;
        Ok((
            out,
            AttentionCache {
                tokens: tokens.clone(),
                q,
                k,
                v,
                weights,
                concat,
                attn,
                drop_attn,
                norm_attn,
                hidden,
                ffn_pre,
                ffn_act,
                drop_ffn,
                norm_ffn,
            },
        ))
    }

    pub fn multi_head_attention_backward(
        &self,
        store: &mut ParamStore,
        c: &AttentionCache,
        d_out: &Matrix,
    ) -> Result<Matrix> {
        let m_blocks = self.cfg.n_blocks();
        let n = c.tokens.rows() / m_blocks;
        let (heads, dk) = (self.cfg.heads, self.cfg.d_k());
        let scale = 1.0 / (dk as f64).sqrt();

        let d_res2 = self.norms[1].backward(store, &c.norm_ffn, d_out)?;
        let d_ffn = c.drop_ffn.apply(&d_res2);
        let d_act = self.ffn[1].backward(store, &c.ffn_act, &d_ffn)?;
        let d_pre = relu_backward(&c.ffn_pre, &d_act)?;
        let mut d_hidden = self.ffn[0].backward(store, &c.hidden, &d_pre)?;
        d_hidden.add_assign(&d_res2)?;
        let d_res1 = self.norms[0].backward(store, &c.norm_attn, &d_hidden)?;

        let d_attn = c.drop_attn.apply(&d_res1);
        debug_assert_eq!(c.attn.shape(), d_attn.shape());
        store.accumulate(self.output, &c.concat.matmul_tn(&d_attn)?)?;
        let d_concat = d_attn.matmul_nt(store.value(self.output))?;

        let mut dq = Matrix::zeros(c.q.rows(), c.q.cols());
        let mut dk_m = Matrix::zeros(c.k.rows(), c.k.cols());
        let mut dv = Matrix::zeros(c.v.rows(), c.v.cols());
        for s in 0..n {
            let base = s * m_blocks;
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                let a = &c.weights[s * heads + h];
                let mut da = Matrix::zeros(m_blocks, m_blocks);
                for i in 0..m_blocks {
                    let g = &d_concat.row(base + i)[cols.clone()];
                    for j in 0..m_blocks {
                        let vj = &c.v.row(base + j)[cols.clone()];
                        da.set(i, j, g.iter().zip(vj).map(|(x, y)| x * y).sum());
                        let w = a.get(i, j);
                        for (o, gg) in dv.row_mut(base + j)[cols.clone()].iter_mut().zip(g) {
                            *o += w * gg;
                        }
                    }
                }
                let ds = softmax_rows_backward(a, &da)?;
                for i in 0..m_blocks {
                    for j in 0..m_blocks {
                        let w = ds.get(i, j) * scale;
                        if w == 0.0 {
                            continue;
                        }
                        let kj = &c.k.row(base + j)[cols.clone()];
                        for (o, kk) in dq.row_mut(base + i)[cols.clone()].iter_mut().zip(kj) {
                            *o += w * kk;
                        }
                        let qi = &c.q.row(base + i)[cols.clone()];
                        for (o, qq) in dk_m.row_mut(base + j)[cols.clone()].iter_mut().zip(qi) {
                            *o += w * qq;
                        }
                    }
                }
            }
        }
        store.accumulate(self.query, &c.tokens.matmul_tn(&dq)?)?;
        store.accumulate(self.key, &c.tokens.matmul_tn(&dk_m)?)?;
        store.accumulate(self.value, &c.tokens.matmul_tn(&dv)?)?;
        let mut d_tokens = d_res1;
        d_tokens.add_assign(&dq.matmul_nt(store.value(self.query))?)?;
        d_tokens.add_assign(&dk_m.matmul_nt(store.value(self.key))?)?;
        d_tokens.add_assign(&dv.matmul_nt(store.value(self.value))?)?;
        Ok(d_tokens)
    }

    /// Position encoding, attention block and mean pooling over block tokens.
    pub fn encode(&self, store: &ParamStore, x: &Matrix, mode: Mode) -> Result<(Matrix, EncodeCache)> {
        let (tokens, position) = self.position_encode(store, x)?;
        let (mixed, attention) = self.multi_head_attention(store, &tokens, mode)?;
        let m_blocks = self.cfg.n_blocks();
        let inv = 1.0 / m_blocks as f64;
        let mut features = Matrix::zeros(x.rows(), self.cfg.d_model);
        for s in 0..x.rows() {
            let out = features.row_mut(s);
            for m in 0..m_blocks {
                for (o, t) in out.iter_mut().zip(mixed.row(s * m_blocks + m)) {
                    *o += t;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        Ok((
            features,
            EncodeCache {
                position,
                attention,
                n_samples: x.rows(),
            },
        ))
    }

    pub fn encode_backward(&self, store: &mut ParamStore, c: &EncodeCache, d_features: &Matrix) -> Result<()> {
        let m_blocks = self.cfg.n_blocks();
        let inv = 1.0 / m_blocks as f64;
        let d_mixed = Matrix::from_fn(c.n_samples * m_blocks, self.cfg.d_model, |r, col| {
            d_features.get(r / m_blocks, col) * inv
        });
        let d_tokens = self.multi_head_attention_backward(store, &c.attention, &d_mixed)?;
        self.position_encode_backward(store, &c.position, &d_tokens)
    }

    /// Three-layer perceptron followed by L2 row normalization.
    pub fn instance_project(&self, store: &ParamStore, features: &Matrix) -> Result<(Matrix, InstanceCache)> {
        let (raw, mlp) = self.instance.forward(store, features)?;
        let (embeddings, norms) = l2_normalize_rows(&raw);
        Ok((
            embeddings.clone(),
            InstanceCache {
                mlp,
                embeddings,
                norms,
            },
        ))
    }

    pub fn instance_backward(&self, store: &mut ParamStore, c: &InstanceCache, d_emb: &Matrix) -> Result<Matrix> {
        let d_raw = l2_normalize_rows_backward(&c.embeddings, &c.norms, d_emb)?;
        self.instance.backward(store, &c.mlp, &d_raw)
    }

    /// Three-layer perceptron followed by a row softmax.
    pub fn cluster_project(&self, store: &ParamStore, features: &Matrix) -> Result<(Matrix, ClusterCache)> {
        let (logits, mlp) = self.cluster.forward(store, features)?;
        let probabilities = softmax_rows(&logits);
        Ok((
            probabilities.clone(),
            ClusterCache { mlp, probabilities },
        ))
    }

    pub fn cluster_backward(&self, store: &mut ParamStore, c: &ClusterCache, d_prob: &Matrix) -> Result<Matrix> {
        let d_logits = softmax_rows_backward(&c.probabilities, d_prob)?;
        self.cluster.backward(store, &c.mlp, &d_logits)
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix, mode: Mode) -> Result<(ViewOutput, ForwardCache)> {
        let (features, encode) = self.encode(store, x, mode)?;
        let (embeddings, instance) = self.instance_project(store, &features)?;
        let (probabilities, cluster) = self.cluster_project(store, &features)?;
        Ok((
            ViewOutput {
                features,
                embeddings,
                probabilities,
            },
            ForwardCache {
                encode,
                instance,
                cluster,
            },
        ))
    }

    /// Accumulates gradients of both heads and the encoder into `store`.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &ForwardCache,
        d_embeddings: &Matrix,
        d_probabilities: &Matrix,
    ) -> Result<()> {
        let mut d_features = self.instance_backward(store, &cache.instance, d_embeddings)?;
        d_features.add_assign(&self.cluster_backward(store, &cache.cluster, d_probabilities)?)?;
        self.encode_backward(store, &cache.encode, &d_features)
    }

    /// Eval-mode forward in chunks of `chunk` rows.
    pub fn embed(&self, store: &ParamStore, x: &Matrix, chunk: usize) -> Result<ViewOutput> {
        let chunk = chunk.max(1);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < x.rows() {
            let idx: Vec<usize> = (start..(start + chunk).min(x.rows())).collect();
            parts.push(self.forward(store, &x.select_rows(&idx), Mode::Eval)?.0);
            start += chunk;
        }
        let stack = |f: fn(&ViewOutput) -> &Matrix, cols: usize| -> Result<Matrix> {
            let mut data = Vec::new();
            for p in &parts {
                data.extend_from_slice(f(p).data());
            }
            Matrix::new(x.rows(), cols, data)
        };
        Ok(ViewOutput {
            features: stack(|v| &v.features, self.cfg.d_model)?,
            embeddings: stack(|v| &v.embeddings, self.cfg.embed_dim)?,
            probabilities: stack(|v| &v.probabilities, self.cfg.n_clusters)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NamedMatrix {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: SmaeConfig,
    params: Vec<NamedMatrix>,
}

/// Writes the config and every parameter as JSON with round-trip-exact floats.
pub fn save_checkpoint(path: &Path, cfg: &SmaeConfig, store: &ParamStore) -> Result<()> {
    let ck = Checkpoint {
        config: cfg.clone(),
        params: store
            .iter()
            .map(|p| NamedMatrix {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                data: p.value.data().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&ck).map_err(|e| Error::Data(e.to_string()))?;
    write_atomic(path, &json)
}

pub fn load_checkpoint(path: &Path) -> Result<(Smae, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut store = ParamStore::new();
    for p in ck.params {
        store.add(p.name, Matrix::new(p.rows, p.cols, p.data)?)?;
    }
    let model = Smae::attach(ck.config, &store)?;
    Ok((model, store))
}

//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each and exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use deduce_core::clustering::{init_centroids, kmeans, lloyd, KmeansConfig, KmeansInit};
use deduce_core::losses::{anchor_losses, cluster_loss, instance_loss, total_loss, ContrastKind, LossConfig, Views};
use deduce_core::metrics::{adjusted_rand, c_index, davies_bouldin, silhouette};
use deduce_core::nn::{
    dropout, grad_check, l2_normalize_rows, l2_normalize_rows_backward, layer_norm, layer_norm_backward, linear,
    linear_backward, relu, relu_backward, softmax_rows, softmax_rows_backward, GradCheckConfig, Matrix, ParamStore,
};
use deduce_core::pipeline::{run_ablate, run_pipeline, PipelineConfig, PipelineOutcome};
use deduce_core::smae::{Mode, Smae, SmaeConfig, ViewOutput, ViewPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------- criterion 1

fn check_grad(
    name: &str,
    store: &mut ParamStore,
    f: impl FnMut(&mut ParamStore) -> deduce_core::Result<f64>,
    worst: &mut (f64, String),
) -> Result<(), String> {
    let cfg = GradCheckConfig {
        h: 1e-5,
        max_coords_per_param: 40,
        seed: 1,
    };
    let r = grad_check(store, f, &cfg).map_err(|e| format!("{name}: {e}"))?;
    if r.max_rel_error > worst.0 {
        *worst = (r.max_rel_error, format!("{name} {:?}", r.worst));
    }
    ensure(
        r.max_rel_error <= 1e-3,
        format!("{name}: relative error {:.3e} at {:?}", r.max_rel_error, r.worst),
    )
}

fn tiny_model(store: &mut ParamStore, seed: u64) -> Smae {
    let cfg = SmaeConfig {
        block_dims: vec![3, 4, 2],
        d_model: 16,
        heads: 4,
        dropout_rate: 0.2,
        embed_dim: 5,
        n_clusters: 4,
        mlp_hidden: 12,
    };
    Smae::new(cfg, store, seed).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = (0.0, String::new());

    let mut s = ParamStore::new();
    let x = s.add("x", random(6, 5, &mut rng)).unwrap();
    let w = s.add("w", random(5, 4, &mut rng)).unwrap();
    let b = s.add("b", random(1, 4, &mut rng)).unwrap();
    let p = random(6, 4, &mut rng);
    check_grad(
        "linear",
        &mut s,
        |s| {
            let y = linear(s.value(x), s.value(w), s.value(b))?;
            let g = linear_backward(s.value(x), s.value(w), &p)?;
            s.accumulate(x, &g.dx)?;
            s.accumulate(w, &g.dweight)?;
            s.accumulate(b, &g.dbias)?;
            Ok(dot(&y, &p))
        },
        &mut worst,
    )?;

    let mut s = ParamStore::new();
    let x = s.add("x", random(7, 6, &mut rng)).unwrap();
    let p = random(7, 6, &mut rng);
    check_grad(
        "softmax",
        &mut s,
        |s| {
            let y = softmax_rows(&s.value(x).scale(3.0));
            s.accumulate(x, &softmax_rows_backward(&y, &p)?.scale(3.0))?;
            Ok(dot(&y, &p))
        },
        &mut worst,
    )?;
    check_grad(
        "relu",
        &mut s,
        |s| {
            let y = relu(s.value(x));
            let d = relu_backward(s.value(x), &p)?;
            s.accumulate(x, &d)?;
            Ok(dot(&y, &p))
        },
        &mut worst,
    )?;
    check_grad(
        "l2 normalize",
        &mut s,
        |s| {
            let (y, n) = l2_normalize_rows(s.value(x));
            s.accumulate(x, &l2_normalize_rows_backward(&y, &n, &p)?)?;
            Ok(dot(&y, &p))
        },
        &mut worst,
    )?;
    let (_, mask) = dropout(&Matrix::filled(7, 6, 1.0), 0.3, true, 5).unwrap();
    check_grad(
        "dropout (fixed mask)",
        &mut s,
        |s| {
            let y = mask.apply(s.value(x));
            s.accumulate(x, &mask.apply(&p))?;
            Ok(dot(&y, &p))
        },
        &mut worst,
    )?;
    let g = s.add("gain", random(1, 6, &mut rng)).unwrap();
    let bb = s.add("bias", random(1, 6, &mut rng)).unwrap();
    check_grad(
        "layer norm",
        &mut s,
        |s| {
            let (y, c) = layer_norm(s.value(x), s.value(g), s.value(bb), 1e-5)?;
            let gr = layer_norm_backward(&c, s.value(g), &p)?;
            s.accumulate(x, &gr.dx)?;
            s.accumulate(g, &gr.dgain)?;
            s.accumulate(bb, &gr.dbias)?;
            Ok(dot(&y, &p))
        },
        &mut worst,
    )?;

    // attention block with its input tokens registered as a parameter
    let mode = Mode::Train { seed: 17 };
    let mut s = ParamStore::new();
    let model = tiny_model(&mut s, 3);
    let tokens = s.add("tokens", random(8 * 3, 16, &mut rng)).unwrap();
    let p = random(8 * 3, 16, &mut rng);
    check_grad(
        "multi-head attention",
        &mut s,
        |s| {
            let t = s.value(tokens).clone();
            let (y, c) = model.multi_head_attention(s, &t, mode)?;
            let dt = model.multi_head_attention_backward(s, &c, &p)?;
            s.accumulate(tokens, &dt)?;
            Ok(dot(&y, &p))
        },
        &mut worst,
    )?;

    let mut s = ParamStore::new();
    let model = tiny_model(&mut s, 4);
    let xin = random(8, 9, &mut rng);
    let pf = random(8, 16, &mut rng);
    check_grad(
        "encode",
        &mut s,
        |s| {
            let (f, c) = model.encode(s, &xin, mode)?;
            model.encode_backward(s, &c, &pf)?;
            Ok(dot(&f, &pf))
        },
        &mut worst,
    )?;
    let feats = s.add("features", random(8, 16, &mut rng)).unwrap();
    let pe = random(8, 5, &mut rng);
    check_grad(
        "instance head",
        &mut s,
        |s| {
            let f = s.value(feats).clone();
            let (e, c) = model.instance_project(s, &f)?;
            let d = model.instance_backward(s, &c, &pe)?;
            s.accumulate(feats, &d)?;
            Ok(dot(&e, &pe))
        },
        &mut worst,
    )?;
    let pp = random(8, 4, &mut rng);
    check_grad(
        "cluster head",
        &mut s,
        |s| {
            let f = s.value(feats).clone();
            let (pr, c) = model.cluster_project(s, &f)?;
            let d = model.cluster_backward(s, &c, &pp)?;
            s.accumulate(feats, &d)?;
            Ok(dot(&pr, &pp))
        },
        &mut worst,
    )?;

    for (kind, anchors) in [
        (ContrastKind::Dcl, Views::Both),
        (ContrastKind::InfoNce, Views::Both),
        (ContrastKind::Dcl, Views::One),
    ] {
        let cfg = LossConfig {
            instance_kind: kind,
            anchor_views: anchors,
            ..LossConfig::default()
        };
        let mut s = ParamStore::new();
        let u = s.add("u", random(8, 5, &mut rng)).unwrap();
        let v = s.add("v", random(8, 5, &mut rng)).unwrap();
        check_grad(
            &format!("instance loss {kind} {anchors:?}"),
            &mut s,
            |s| {
                let (l, du, dv) = instance_loss(s.value(u), s.value(v), &cfg)?;
                s.accumulate(u, &du)?;
                s.accumulate(v, &dv)?;
                Ok(l)
            },
            &mut worst,
        )?;
        let la = s.add("logits_a", random(8, 4, &mut rng).scale(2.0)).unwrap();
        let lb = s.add("logits_b", random(8, 4, &mut rng).scale(2.0)).unwrap();
        check_grad(
            &format!("cluster loss {kind}"),
            &mut s,
            |s| {
                let (pa, pb) = (softmax_rows(s.value(la)), softmax_rows(s.value(lb)));
                let c = cluster_loss(&pa, &pb, &cfg)?;
                s.accumulate(la, &softmax_rows_backward(&pa, &c.d1)?)?;
                s.accumulate(lb, &softmax_rows_backward(&pb, &c.d2)?)?;
                Ok(c.total)
            },
            &mut worst,
        )?;
    }

    // full model, both views sharing parameters
    for kind in [ContrastKind::Dcl, ContrastKind::InfoNce] {
        let cfg = LossConfig {
            instance_kind: kind,
            ..LossConfig::default()
        };
        let mut s = ParamStore::new();
        let model = tiny_model(&mut s, 5);
        let x1 = random(6, 9, &mut rng);
        let x2 = random(6, 9, &mut rng);
        check_grad(
            &format!("total loss {kind}"),
            &mut s,
            |s| {
                let (first, c1) = model.forward(s, &x1, Mode::Train { seed: 1 })?;
                let (second, c2) = model.forward(s, &x2, Mode::Train { seed: 2 })?;
                let (lb, g) = total_loss(&ViewPair { first, second }, &cfg)?;
                model.backward(s, &c1, &g.embeddings.0, &g.probabilities.0)?;
                model.backward(s, &c2, &g.embeddings.1, &g.probabilities.1)?;
                Ok(lb.total)
            },
            &mut worst,
        )?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, format!("runtime {secs:.1} s"))?;
    Ok(format!("worst relative error {:.2e} ({}), {secs:.1} s", worst.0, worst.1))
}

// ---------------------------------------------------------------- criterion 2

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    l2_normalize_rows(&random(rows, cols, rng)).0
}

fn fake_view(n: usize, d: usize, k: usize, rng: &mut ChaCha8Rng) -> ViewOutput {
    ViewOutput {
        features: Matrix::zeros(n, 1),
        embeddings: unit_rows(n, d, rng),
        probabilities: softmax_rows(&random(n, k, rng).scale(3.0)),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut min_gap = f64::INFINITY;
    for t in 0..100 {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(2..=8);
        let tau = rng.random_range(0.1..2.0);
        let (u, v) = (unit_rows(n, d, &mut rng), unit_rows(n, d, &mut rng));
        let dcl = anchor_losses(&u, &v, tau, ContrastKind::Dcl).unwrap();
        let nce = anchor_losses(&u, &v, tau, ContrastKind::InfoNce).unwrap();
        for (a, b) in nce.iter().zip(&dcl) {
            ensure(a > b, format!("pair {t}: InfoNCE {a} <= DCL {b}"))?;
            min_gap = min_gap.min(a - b);
        }
    }
    let mut total_err: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=10);
        let k = rng.random_range(2..=5);
        let pair = ViewPair {
            first: fake_view(n, 4, k, &mut rng),
            second: fake_view(n, 4, k, &mut rng),
        };
        let (lb, _) = total_loss(&pair, &LossConfig::default()).unwrap();
        total_err = total_err.max((lb.total - (lb.instance + lb.cluster)).abs());
    }
    ensure(total_err <= 1e-9, format!("total differs from the sum by {total_err:e}"))?;
    let mut entropy_err: f64 = 0.0;
    for k in 2..=10 {
        for weight in [0.5, 1.0, 2.0] {
            let uniform = Matrix::filled(7, k, 1.0 / k as f64);
            let cfg = LossConfig {
                entropy_weight: weight,
                ..LossConfig::default()
            };
            let c = cluster_loss(&uniform, &uniform, &cfg).unwrap();
            entropy_err = entropy_err.max((c.entropy + weight * (k as f64).ln()).abs());
        }
    }
    ensure(entropy_err <= 1e-9, format!("uniform entropy term off by {entropy_err:e}"))?;
    Ok(format!(
        "min InfoNCE-DCL gap {min_gap:.3e}; sum identity err {total_err:.1e}; uniform entropy err {entropy_err:.1e}"
    ))
}

// ---------------------------------------------------------------- criterion 3

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn oracle_c_index(x: &Matrix, labels: &[usize]) -> f64 {
    let n = x.rows();
    let mut all = Vec::new();
    let (mut s, mut nw) = (0.0, 0);
    for i in 0..n {
        for j in i + 1..n {
            let d = euclid(x.row(i), x.row(j));
            all.push(d);
            if labels[i] == labels[j] {
                s += d;
                nw += 1;
            }
        }
    }
    all.sort_by(f64::total_cmp);
    let smin: f64 = all[..nw].iter().sum();
    let smax: f64 = all[all.len() - nw..].iter().sum();
    if nw == 0 || smax == smin {
        0.0
    } else {
        (s - smin) / (smax - smin)
    }
}

fn groups(labels: &[usize]) -> Vec<Vec<usize>> {
    let mut keys = labels.to_vec();
    keys.sort_unstable();
    keys.dedup();
    keys.iter()
        .map(|k| (0..labels.len()).filter(|&i| labels[i] == *k).collect())
        .collect()
}

fn oracle_silhouette(x: &Matrix, labels: &[usize]) -> f64 {
    let gs = groups(labels);
    let mut total = 0.0;
    for i in 0..x.rows() {
        let own = gs.iter().position(|g| g.contains(&i)).unwrap();
        if gs[own].len() == 1 {
            continue;
        }
        let mean_to = |g: &Vec<usize>| {
            let d: Vec<f64> = g.iter().filter(|&&j| j != i).map(|&j| euclid(x.row(i), x.row(j))).collect();
            d.iter().sum::<f64>() / d.len() as f64
        };
        let a = mean_to(&gs[own]);
        let b = gs
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != own)
            .map(|(_, g)| mean_to(g))
            .fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / x.rows() as f64
}

fn oracle_davies_bouldin(x: &Matrix, labels: &[usize]) -> f64 {
    let gs = groups(labels);
    let cents: Vec<Vec<f64>> = gs
        .iter()
        .map(|g| {
            (0..x.cols())
                .map(|c| g.iter().map(|&i| x.get(i, c)).sum::<f64>() / g.len() as f64)
                .collect()
        })
        .collect();
    let scatter: Vec<f64> = gs
        .iter()
        .zip(&cents)
        .map(|(g, c)| g.iter().map(|&i| euclid(x.row(i), c)).sum::<f64>() / g.len() as f64)
        .collect();
    let k = gs.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in (0..k).filter(|&j| j != i) {
            let m = euclid(&cents[i], &cents[j]);
            worst = worst.max(if m == 0.0 { f64::INFINITY } else { (scatter[i] + scatter[j]) / m });
        }
        total += worst;
    }
    total / k as f64
}

// pair counting, independent of the contingency-table formula
fn oracle_ari(a: &[usize], b: &[usize]) -> f64 {
    let (mut ss, mut sd, mut ds, mut dd) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    let den = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    if den == 0.0 {
        1.0
    } else {
        2.0 * (ss * dd - sd * ds) / den
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut max_err: f64 = 0.0;
    for t in 0..200 {
        let n = rng.random_range(3..=25);
        let d = rng.random_range(1..=4);
        let k = rng.random_range(2..=n.min(6));
        let x = random(n, d, &mut rng).scale(5.0);
        let mut labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        for i in (1..n).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let other_k = rng.random_range(1..=5);
        let other: Vec<usize> = (0..n).map(|_| rng.random_range(0..other_k)).collect();
        let pairs = [
            ("C-index", c_index(&x, &labels).unwrap(), oracle_c_index(&x, &labels)),
            ("silhouette", silhouette(&x, &labels).unwrap(), oracle_silhouette(&x, &labels)),
            ("Davies-Bouldin", davies_bouldin(&x, &labels).unwrap(), oracle_davies_bouldin(&x, &labels)),
            ("ARI", adjusted_rand(&labels, &other).unwrap(), oracle_ari(&labels, &other)),
        ];
        for (name, got, want) in pairs {
            let ok = got == want || (got - want).abs() <= 1e-9;
            ensure(ok, format!("instance {t}: {name} {got} vs oracle {want}"))?;
            if got.is_finite() {
                max_err = max_err.max((got - want).abs());
            }
        }
    }
    let line = |p: &[f64]| Matrix::from_fn(p.len(), 1, |r, _| p[r]);
    let l4 = line(&[0.0, 1.0, 10.0, 11.0]);
    let tight = line(&[0.0, 0.1, 10.0, 10.1]);
    let square = Matrix::from_rows(&[[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
    let worked = [
        ("C-index {0,1},{10,11}", c_index(&l4, &[0, 0, 1, 1]).unwrap(), 0.0),
        ("C-index {0,10},{1,11}", c_index(&l4, &[0, 1, 0, 1]).unwrap(), 18.0 / 19.0),
        ("C-index square diagonals", c_index(&square, &[0, 0, 1, 1]).unwrap(), 1.0),
        ("silhouette", silhouette(&tight, &[0, 0, 1, 1]).unwrap(), 0.9900),
        ("Davies-Bouldin", davies_bouldin(&tight, &[0, 0, 1, 1]).unwrap(), 0.01),
    ];
    for (name, got, want) in worked {
        ensure((got - want).abs() <= 1e-4, format!("{name}: {got} vs {want}"))?;
    }
    Ok(format!("200 random instances, max |impl - oracle| {max_err:.1e}; worked line examples match"))
}

// ------------------------------------------------------------ criteria 4,5,6,8

fn scaled_config(size_mode: &str, out: &Path) -> PipelineConfig {
    let text = format!(
        r#"
name = "synthetic-{size_mode}"
k_range = "5..5"

[synthetic]
n_samples = 100
n_clusters = 5
size_mode = "{size_mode}"
separation = 4.0

[model]
embed_dim = 5

[train]
epochs = 100
log_every = 0

[kmeans]
restarts = 100
"#
    );
    let mut cfg = PipelineConfig::from_toml(&text, &[], None).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

struct Scaled {
    dir: tempfile::TempDir,
    config: PipelineConfig,
    outcome: PipelineOutcome,
}

fn criterion_4(keep: &mut Option<Scaled>) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut equal = None;
    for (mode, min_ari) in [("equal", 0.90), ("heterogeneous", 0.85)] {
        let cfg = scaled_config(mode, &dir.path().join(mode));
        let start = Instant::now();
        let out = run_pipeline(&cfg).map_err(|e| format!("{mode}: {e}"))?;
        let secs = start.elapsed().as_secs_f64();
        let row = &out.metrics.rows[0];
        let ari = row.ari.ok_or("no ARI row")?;
        lines.push(format!(
            "{mode}: ARI {ari:.4}, C-index {:.4}, {secs:.1} s, {} epochs",
            row.c_index, out.train.stopped_epoch
        ));
        if ari < min_ari {
            failures.push(format!("{mode} ARI {ari:.4} < {min_ari}"));
        }
        if row.c_index > 0.05 {
            failures.push(format!("{mode} C-index {:.4} > 0.05", row.c_index));
        }
        if secs >= 300.0 {
            failures.push(format!("{mode} took {secs:.0} s"));
        }
        if mode == "equal" {
            equal = Some((cfg, out));
        }
    }
    let (config, outcome) = equal.unwrap();
    *keep = Some(Scaled { dir, config, outcome });
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!("{} [{}]", failures.join(", "), lines.join("; ")))
    }
}

fn convergence(out: &PipelineOutcome, window: usize) -> Outcome {
    let h = &out.train.history;
    ensure(!h.is_empty(), "empty loss history")?;
    let (first, last) = (h[0].total, h[h.len() - 1].total);
    let finite = h
        .iter()
        .all(|e| e.total.is_finite() && e.instance.is_finite() && e.cluster.is_finite());
    ensure(finite, "non-finite loss in history")?;
    ensure(out.embeddings.is_finite(), "non-finite embeddings")?;
    ensure(
        !out.train.early_stopped || out.train.stopped_epoch > window,
        format!("early stop at epoch {} within window {window}", out.train.stopped_epoch),
    )?;
    let detail = format!(
        "first {first:.4}, final {last:.4}, ratio {:.3}, {} epochs{}",
        last / first,
        out.train.stopped_epoch,
        if out.train.early_stopped { " (early stop)" } else { "" }
    );
    ensure(last < 0.5 * first, format!("final/first {:.3} >= 0.5: {detail}", last / first))?;
    Ok(detail)
}

fn criterion_5(scaled: &Option<Scaled>) -> Outcome {
    let s = scaled.as_ref().ok_or("criterion 4 run unavailable")?;
    // parameters are checked for finiteness every epoch inside training
    convergence(&s.outcome, s.config.train.early_stop_window)
}

fn criterion_6(scaled: &Option<Scaled>) -> Outcome {
    let s = scaled.as_ref().ok_or("criterion 4 run unavailable")?;
    let first = s.config.paths();
    let mut manifest = PipelineConfig::load(Some(&first.manifest()), &[], None).map_err(|e| e.to_string())?;
    manifest.out_dir = s.dir.path().join("replay");
    run_pipeline(&manifest).map_err(|e| e.to_string())?;
    let second = manifest.paths();
    for (a, b) in [
        (first.embeddings(), second.embeddings()),
        (first.labels(), second.labels()),
        (first.metrics_csv(), second.metrics_csv()),
        (first.metrics_json(), second.metrics_json()),
    ] {
        let x = std::fs::read(&a).map_err(|e| format!("{}: {e}", a.display()))?;
        let y = std::fs::read(&b).map_err(|e| format!("{}: {e}", b.display()))?;
        ensure(x == y, format!("{} differs on replay", a.display()))?;
    }
    Ok("embeddings, labels and metrics (CSV and JSON) bit-identical on manifest replay".into())
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Matrix::from_fn(d, d, |r, c| cols[c][r])
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut steps = 0;
    for t in 0..100u64 {
        let n = rng.random_range(5..=60);
        let d = rng.random_range(1..=5);
        let k = rng.random_range(1..=n.min(8));
        let x = random(n, d, &mut rng).scale(3.0);
        let init = if t % 2 == 0 { KmeansInit::KmeansPlusPlus } else { KmeansInit::RandomPoints };
        let c0 = init_centroids(&x, k, init, &mut rng);
        let run = lloyd(&x, c0, 300, 1e-9);
        for w in run.history.windows(2) {
            ensure(
                w[1] <= w[0] * (1.0 + 1e-12) + 1e-12,
                format!("instance {t}: inertia rose {} -> {}", w[0], w[1]),
            )?;
        }
        steps += run.history.len();

        let cfg = KmeansConfig {
            k,
            restarts: 8,
            seed: t,
            ..KmeansConfig::default()
        };
        let res = kmeans(&x, &cfg).map_err(|e| e.to_string())?;
        ensure(
            res.restart_inertias.iter().all(|&r| res.inertia <= r),
            format!("instance {t}: returned restart is not the lowest inertia"),
        )?;
    }
    for t in 0..20u64 {
        let n = rng.random_range(20..=80);
        let d = rng.random_range(2..=5);
        let centers = random(4, d, &mut rng).scale(6.0);
        let x = Matrix::from_fn(n, d, |r, c| centers.get(r % 4, c) + rng.random_range(-1.0..1.0));
        let rotated = x.matmul(&random_orthogonal(d, &mut rng)).unwrap();
        let cfg = KmeansConfig {
            k: 4,
            restarts: 10,
            seed: 1000 + t,
            ..KmeansConfig::default()
        };
        let a = kmeans(&x, &cfg).map_err(|e| e.to_string())?;
        let b = kmeans(&rotated, &cfg).map_err(|e| e.to_string())?;
        let ari = adjusted_rand(&a.labels, &b.labels).map_err(|e| e.to_string())?;
        ensure(ari == 1.0, format!("rotation instance {t}: ARI {ari}"))?;
    }
    Ok(format!("100 descents monotone ({steps} steps), best restart minimal, 20 rotations ARI = 1"))
}

fn criterion_8(scaled: &Option<Scaled>) -> Outcome {
    let s = scaled.as_ref().ok_or("criterion 4 run unavailable")?;
    let mut cfg = s.config.clone();
    cfg.out_dir = s.dir.path().join("ablate");
    let outcome = run_ablate(&cfg).map_err(|e| e.to_string())?;
    let table = std::fs::read_to_string(cfg.out_dir.join("ablation.csv")).map_err(|e| e.to_string())?;
    let n_k = cfg.k_range.end - cfg.k_range.start + 1;
    ensure(table.lines().count() == 1 + 2 * n_k, format!("unexpected table:\n{table}"))?;
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (kind, run) in &outcome.runs {
        let r = &run.metrics.rows[0];
        let conv = convergence(run, cfg.train.early_stop_window);
        parts.push(format!(
            "{kind}: ARI {:.4} C-index {:.4} silhouette {:.4} DB {:.4}, {}",
            r.ari.unwrap_or(f64::NAN),
            r.c_index,
            r.silhouette,
            r.davies_bouldin,
            conv.as_ref().unwrap_or_else(|e| e)
        ));
        if conv.is_err() {
            failures.push(kind.to_string());
        }
    }
    let summary = parts.join(" | ");
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("convergence bound missed by {}: {summary}", failures.join(", ")))
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

fn main() {
    let mut scaled = None;
    let mut failed = Vec::new();
    let mut total = 0;
    let mut run = |n: usize, title: &str, f: &mut dyn FnMut() -> Outcome| {
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| Err(panic_message(p)));
        match &out {
            Ok(d) => println!("criterion {n} ({title}): PASS - {d}"),
            Err(d) => {
                println!("criterion {n} ({title}): FAIL - {d}");
                failed.push(n);
            }
        }
        total += 1;
    };
    run(1, "gradient checks", &mut criterion_1);
    run(2, "loss identities", &mut criterion_2);
    run(3, "metric oracles", &mut criterion_3);
    run(4, "synthetic recovery", &mut || criterion_4(&mut scaled));
    run(5, "convergence and stability", &mut || criterion_5(&scaled));
    run(6, "manifest replay", &mut || criterion_6(&scaled));
    run(7, "k-means properties", &mut criterion_7);
    run(8, "loss ablation", &mut || criterion_8(&scaled));
    println!("acceptance: {} of {total} criteria passed", total - failed.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

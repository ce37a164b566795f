//! Shared oracles for integration tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmipn_core::autodiff::{Graph, Tensor, Var};

pub const FD_EPS: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values with magnitude in `[gap, hi]`, keeping inputs clear of kinks at 0.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Offset of [`project`]. It must exceed every `|r * y|` so the absolute
/// value stays linear, and should stay small: each `r * y + T` is rounded at
/// the scale of `T`, and that rounding is what finite differences see.
pub const PROJECT_OFFSET: f64 = 64.0;

/// Smooth scalar read-out `mean(r * y) + PROJECT_OFFSET` built from engine
/// ops, with `r` a fixed random projection.
pub fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    let mut r = rng(seed ^ 0x9e37_79b9);
    let proj = uniform(&mut r, &shape, -1.0, 1.0);
    let pv = g.input(proj);
    let prod = g.mul(pv, y).unwrap();
    let peak = g.value(prod).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak < PROJECT_OFFSET / 2.0, "read-out {peak} too close to the offset");
    let target = Tensor::full(&shape, -PROJECT_OFFSET);
    g.masked_l1(prod, &target, None).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct CheckResult {
    pub max_rel: f64,
    pub checked: usize,
}

/// Relative error with a small absolute floor so that exact zeros compare sanely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

/// Compares reverse-mode gradients of `build` against central differences
/// computed in f64. `select` picks which `(leaf, element)` pairs to probe;
/// `None` probes every element.
pub fn gradcheck<F>(leaves: &[Tensor], select: Option<&[(usize, usize)]>, build: F) -> CheckResult
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |ls: &[Tensor]| -> f64 {
        let mut g = Graph::exact();
        let vars: Vec<Var> = ls.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::exact();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| g.grad(*v).map_or_else(|| vec![0.0; t.numel()], |gr| gr.data().to_vec()))
        .collect();

    let all: Vec<(usize, usize)>;
    let probes = match select {
        Some(s) => s,
        None => {
            all = leaves.iter().enumerate().flat_map(|(li, t)| (0..t.numel()).map(move |e| (li, e))).collect();
            &all
        }
    };
    let mut max_rel: f64 = 0.0;
    for &(li, e) in probes {
        let mut plus = leaves.to_vec();
        let mut minus = leaves.to_vec();
        let x = leaves[li].data()[e];
        plus[li].data_mut()[e] = x + FD_EPS;
        minus[li].data_mut()[e] = x - FD_EPS;
        let step = plus[li].data()[e] - minus[li].data()[e];
        let numeric = (eval(&plus) - eval(&minus)) / step;
        max_rel = max_rel.max(rel_err(analytic[li][e], numeric));
    }
    CheckResult { max_rel, checked: probes.len() }
}

use rmipn_core::geometry::Polygon;
use rmipn_core::labelgen::{Dims, LabelMaps, ShrinkPolicy};
use rmipn_core::model::{forward, total_loss, LabelBatch, ModelConfig, ModelParams};

/// Random image, one rectangle of supervision, and a seeded model.
pub fn model_fixture(cfg: &ModelConfig, h: usize, w: usize, seed: u64) -> (Tensor, LabelBatch, ModelParams) {
    let mut r = rng(seed);
    let image = uniform(&mut r, &[1, 3, h, w], 0.0, 1.0);
    let image = Tensor::from_f32(image.shape(), &image.to_f32()).unwrap();
    let x0 = r.gen_range(2.0..w as f64 / 3.0);
    let y0 = r.gen_range(2.0..h as f64 / 3.0);
    let rect = Polygon::rect(x0, y0, x0 + w as f64 / 2.0, y0 + h as f64 / 2.0).unwrap();
    let (maps, _) = LabelMaps::generate(&[rect], Dims::new(h, w), &ShrinkPolicy::default());
    let labels = LabelBatch::from_maps(&[&maps]).unwrap();
    let params = ModelParams::init(cfg, seed).unwrap();
    (image, labels, params)
}

/// Total loss of the model on an exact graph.
pub fn model_loss(cfg: &ModelConfig, params: &mut ModelParams, image: &Tensor, labels: &LabelBatch) -> f64 {
    let mut g = Graph::exact();
    let fwd = forward(&mut g, params, cfg, image, true).unwrap();
    let (loss, _) = total_loss(&mut g, &fwd, labels, cfg).unwrap();
    g.value(loss).item()
}

/// Step for whole-model differences. Larger steps cross ReLU kinks inside
/// the network; smaller ones drown in the rounding of saturated
/// cross-entropy terms (about 1e-12 absolute in the loss).
pub const MODEL_FD_EPS: f64 = 1e-5;

/// Finite-difference check of the full model over a random `fraction` of
/// trainable scalars. Relative errors use a denominator floored at 1e-3 of
/// the largest probed gradient, since near-zero entries sit below the noise
/// floor of the differences.
pub fn model_gradcheck(cfg: &ModelConfig, h: usize, w: usize, seed: u64, fraction: f64) -> CheckResult {
    let (image, labels, mut params) = model_fixture(cfg, h, w, seed);
    let mut g = Graph::exact();
    let fwd = forward(&mut g, &mut params, cfg, &image, true).unwrap();
    let (loss, _) = total_loss(&mut g, &fwd, &labels, cfg).unwrap();
    g.backward(loss).unwrap();

    let mut r = rng(seed ^ 0x5eed);
    let mut pairs = Vec::new();
    for ti in 0..params.len() {
        if !params.tensors()[ti].kind.trainable() {
            continue;
        }
        let analytic: Vec<f64> = match fwd.leaves[ti].and_then(|v| g.grad(v)) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; params.tensors()[ti].data.len()],
        };
        for (e, &a) in analytic.iter().enumerate() {
            if !r.gen_bool(fraction) {
                continue;
            }
            let x = params.tensors()[ti].data[e];
            let hi = (f64::from(x) + MODEL_FD_EPS) as f32;
            let lo = (f64::from(x) - MODEL_FD_EPS) as f32;
            params.tensor_mut(ti).data[e] = hi;
            let lp = model_loss(cfg, &mut params, &image, &labels);
            params.tensor_mut(ti).data[e] = lo;
            let lm = model_loss(cfg, &mut params, &image, &labels);
            params.tensor_mut(ti).data[e] = x;
            let numeric = (lp - lm) / (f64::from(hi) - f64::from(lo));
            pairs.push((ti, e, a, numeric));
        }
    }
    let scale = pairs.iter().map(|p| p.2.abs()).fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-7);
    let mut max_rel: f64 = 0.0;
    for &(ti, e, a, n) in &pairs {
        let re = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if std::env::var("GC_DEBUG").is_ok() && re > 1e-4 {
            eprintln!("{} [{e}] analytic {a:e} numeric {n:e} rel {re:e}", params.tensors()[ti].name);
        }
        max_rel = max_rel.max(re);
    }
    CheckResult { max_rel, checked: pairs.len() }
}

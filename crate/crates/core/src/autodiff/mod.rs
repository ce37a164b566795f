//! A small tape-based reverse-mode autodiff engine over dense NCHW tensors.
//!
//! Every op appends a node to a [`Graph`]; node order is a topological order,
//! so [`Graph::backward`] simply walks the tape in reverse. Arithmetic and
//! gradients are `f64`; by default every op output is rounded to `f32`
//! precision, matching parameter and checkpoint storage. [`Graph::exact`]
//! keeps full `f64` values, which finite-difference checks need. Ops never
//! mutate their inputs, and a tape can be differentiated once until
//! [`Graph::reset_grads`] is called.

mod kernels;
pub mod optim;
mod tensor;

use thiserror::Error;

use kernels::TapGeometry;
pub use optim::{ParamUpdate, Sgd, SgdConfig};
pub use tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BCE_CLAMP: f64 = 1e-7;
pub const SIGMOID_CLAMP: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; reset gradients first")]
    BackwardTwice,
    #[error("non-finite gradient for parameter slot {slot}")]
    NonFiniteGradient { slot: usize },
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
        training: bool,
    },
    /// Scalar output whose derivative w.r.t. `input` was computed in forward.
    LocalGrad {
        input: Var,
        local: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Running statistics of one batch-norm layer.
pub struct RunningStats<'a> {
    pub mean: &'a mut [f32],
    pub var: &'a mut [f32],
}

/// How op outputs are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Storage {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    storage: Storage,
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

impl Graph {
    /// Graph with `f32` value storage.
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph with full `f64` value storage.
    pub fn exact() -> Self {
        Self { storage: Storage::F64, ..Self::default() }
    }

    pub fn storage(&self) -> Storage {
        self.storage
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, mut value: Tensor, requires_grad: bool, op: Op) -> Var {
        if self.storage == Storage::F32 {
            value.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, rg, op))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, c, h, wd) = xv.dims4(OP)?;
        let (o, ci, kh, kw) = wv.dims4(OP)?;
        if ci != c || kh != kw || bv.shape() != [o] || stride == 0 {
            return Err(shape_err(
                OP,
                format!("input {:?}, weight {:?}, bias {:?}, stride {stride}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(OP, format!("kernel {kh} larger than padded input {:?}", xv.shape())));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geo = TapGeometry { small_h: ho, small_w: wo, big_h: h, big_w: wd, stride, pad };
        let (xs, ws, bs) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                plane.fill(bs[oi]);
                for cc in 0..c {
                    let xp = &xs[(ni * c + cc) * h * wd..(ni * c + cc + 1) * h * wd];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wt = ws[((oi * c + cc) * kh + ky) * kw + kx];
                            kernels::gather(plane, xp, wt, &geo, ky, kx);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        self.push_checked(OP, value, &[x, w, b], Op::Conv2d { x, w, b, stride, pad })
    }

    /// Transposed convolution with weight layout `[C_in, C_out, k, k]`.
    /// Output extent is `(H - 1) * stride - 2 * pad + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        output_padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, c, h, wd) = xv.dims4(OP)?;
        let (ci, o, kh, kw) = wv.dims4(OP)?;
        if ci != c || kh != kw || bv.shape() != [o] || stride == 0 {
            return Err(shape_err(
                OP,
                format!("input {:?}, weight {:?}, bias {:?}, stride {stride}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        if output_padding >= stride || h == 0 || wd == 0 || (h - 1) * stride + kh + output_padding <= 2 * pad {
            return Err(shape_err(
                OP,
                format!("inconsistent geometry: input {:?}, kernel {kh}, stride {stride}, pad {pad}, output_padding {output_padding}", xv.shape()),
            ));
        }
        let ho = (h - 1) * stride + kh + output_padding - 2 * pad;
        let wo = (wd - 1) * stride + kw + output_padding - 2 * pad;
        let geo = TapGeometry { small_h: h, small_w: wd, big_h: ho, big_w: wo, stride, pad };
        let (xs, ws, bs) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                plane.fill(bs[oi]);
                for cc in 0..c {
                    let xp = &xs[(ni * c + cc) * h * wd..(ni * c + cc + 1) * h * wd];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wt = ws[((cc * o + oi) * kh + ky) * kw + kx];
                            kernels::scatter(plane, xp, wt, &geo, ky, kx);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        self.push_checked(OP, value, &[x, w, b], Op::ConvTranspose2d { x, w, b, stride, pad })
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        self.push_checked(name, value, &[x], op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// Logistic function with the input clamped to `[-30, 30]`. Under `f32`
    /// storage the output is capped just below 1 so it stays inside `(0, 1)`.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        if self.storage == Storage::F32 {
            let cap = f64::from(1.0f32 - f32::EPSILON / 2.0);
            self.map("sigmoid", x, |v| sigmoid(v).min(cap), Op::Sigmoid(x))
        } else {
            self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
        }
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map("scale", x, |v| v * c, Op::Scale(x, c))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push_checked(name, value, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Stack NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = parts.first().ok_or_else(|| shape_err(OP, "no inputs".into()))?;
        let (n, _, h, w) = self.value(*first).dims4(OP)?;
        let mut total_c = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4(OP)?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(shape_err(OP, format!("{:?} vs {:?}", self.value(*first).shape(), self.value(p).shape())));
            }
            total_c += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for ni in 0..n {
            for &p in parts {
                let pv = self.value(p);
                let pc = pv.shape()[1];
                out.extend_from_slice(&pv.data()[ni * pc * hw..(ni + 1) * pc * hw]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        self.push_checked(OP, value, parts, Op::Concat(parts.to_vec()))
    }

    /// Per-channel normalization. Training mode normalizes with batch
    /// statistics and folds them into `running`; eval mode uses `running`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: RunningStats<'_>,
        training: bool,
    ) -> Result<Var> {
        const OP: &str = "batch_norm2d";
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4(OP)?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [c] || bv.shape() != [c] || running.mean.len() != c || running.var.len() != c {
            return Err(shape_err(
                OP,
                format!(
                    "input {:?}, gamma {:?}, beta {:?}, running {}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape(),
                    running.mean.len()
                ),
            ));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = xv.data();
        let mut mean = vec![0.0; c];
        let mut invstd = vec![0.0; c];
        if training {
            for ci in 0..c {
                let mut s = 0.0;
                for ni in 0..n {
                    s += xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0;
                for ni in 0..n {
                    ss +=
                        xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                let var = ss / m;
                mean[ci] = mu;
                invstd[ci] = 1.0 / (var + BN_EPS).sqrt();
                let unbiased = if m > 1.0 { ss / (m - 1.0) } else { var };
                running.mean[ci] = ((1.0 - BN_MOMENTUM) * f64::from(running.mean[ci]) + BN_MOMENTUM * mu) as f32;
                running.var[ci] = ((1.0 - BN_MOMENTUM) * f64::from(running.var[ci]) + BN_MOMENTUM * unbiased) as f32;
            }
        } else {
            for ci in 0..c {
                mean[ci] = f64::from(running.mean[ci]);
                invstd[ci] = 1.0 / (f64::from(running.var[ci]) + BN_EPS).sqrt();
            }
        }
        let (gs, bs) = (gv.data(), bv.data());
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for ni in 0..n {
            for ci in 0..c {
                let range = (ni * c + ci) * hw..(ni * c + ci + 1) * hw;
                for i in range {
                    let z = (xs[i] - mean[ci]) * invstd[ci];
                    xhat[i] = z;
                    out[i] = gs[ci] * z + bs[ci];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push_checked(OP, value, &[x, gamma, beta], Op::BatchNorm { x, gamma, beta, xhat, invstd, training })
    }

    fn check_target(&self, op: &'static str, pred: Var, t: &Tensor) -> Result<()> {
        if self.value(pred).shape() != t.shape() {
            return Err(shape_err(op, format!("prediction {:?} vs {:?}", self.value(pred).shape(), t.shape())));
        }
        Ok(())
    }

    /// Mean binary cross-entropy over mask-selected elements (all elements
    /// without a mask). Predictions are clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
        const OP: &str = "bce";
        self.check_target(OP, pred, target)?;
        if let Some(m) = mask {
            self.check_target(OP, pred, m)?;
        }
        let p = self.value(pred).data();
        let y = target.data();
        let weight = |i: usize| mask.map_or(1.0, |m| m.data()[i]);
        let count: f64 = (0..p.len()).map(weight).sum();
        let mut local = vec![0.0; p.len()];
        let mut loss = 0.0;
        if count > 0.0 {
            for i in 0..p.len() {
                let wi = weight(i);
                if wi == 0.0 {
                    continue;
                }
                let pc = p[i].clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                loss -= wi * (y[i] * pc.ln() + (1.0 - y[i]) * (1.0 - pc).ln());
                if p[i] > BCE_CLAMP && p[i] < 1.0 - BCE_CLAMP {
                    local[i] = wi * (pc - y[i]) / (pc * (1.0 - pc)) / count;
                }
            }
            loss /= count;
        }
        self.push_checked(OP, Tensor::scalar(loss), &[pred], Op::LocalGrad { input: pred, local })
    }

    /// Mean absolute error over mask-selected elements.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor, mask: Option<&Tensor>) -> Result<Var> {
        const OP: &str = "masked_l1";
        self.check_target(OP, pred, target)?;
        if let Some(m) = mask {
            self.check_target(OP, pred, m)?;
        }
        let p = self.value(pred).data();
        let t = target.data();
        let weight = |i: usize| mask.map_or(1.0, |m| m.data()[i]);
        let count: f64 = (0..p.len()).map(weight).sum();
        let mut local = vec![0.0; p.len()];
        let mut loss = 0.0;
        if count > 0.0 {
            for i in 0..p.len() {
                let wi = weight(i);
                if wi == 0.0 {
                    continue;
                }
                let diff = p[i] - t[i];
                loss += wi * diff.abs();
                local[i] = if diff > 0.0 {
                    wi / count
                } else if diff < 0.0 {
                    -wi / count
                } else {
                    0.0
                };
            }
            loss /= count;
        }
        self.push_checked(OP, Tensor::scalar(loss), &[pred], Op::LocalGrad { input: pred, local })
    }

    /// `sum_i w_i * x_i` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        const OP: &str = "weighted_sum";
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(shape_err(OP, format!("term of shape {:?} is not a scalar", t.shape())));
            }
            total += w * t.item();
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push_checked(OP, Tensor::scalar(total), &inputs, Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let nodes = &self.nodes;
        let gd = g.data();
        // Accumulate into the gradient buffer of `v` if it wants one.
        let mut with = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let (n, c, h, wd) = xv.dims4("conv2d")?;
                let (o, _, k, _) = wv.dims4("conv2d")?;
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let geo = TapGeometry { small_h: ho, small_w: wo, big_h: h, big_w: wd, stride: *stride, pad: *pad };
                let plane = |i: usize, sz: usize| i * sz..(i + 1) * sz;
                with(*b, &mut |db| {
                    for ni in 0..n {
                        for oi in 0..o {
                            db[oi] += gd[plane(ni * o + oi, ho * wo)].iter().sum::<f64>();
                        }
                    }
                });
                with(*w, &mut |dw| {
                    for ni in 0..n {
                        for oi in 0..o {
                            let gp = &gd[plane(ni * o + oi, ho * wo)];
                            for cc in 0..c {
                                let xp = &xv.data()[plane(ni * c + cc, h * wd)];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        dw[((oi * c + cc) * k + ky) * k + kx] += kernels::dot(gp, xp, &geo, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                });
                with(*x, &mut |dx| {
                    for ni in 0..n {
                        for cc in 0..c {
                            let dxp = &mut dx[(ni * c + cc) * h * wd..(ni * c + cc + 1) * h * wd];
                            for oi in 0..o {
                                let gp = &gd[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wt = wv.data()[((oi * c + cc) * k + ky) * k + kx];
                                        kernels::scatter(dxp, gp, wt, &geo, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let (n, c, h, wd) = xv.dims4("conv_transpose2d")?;
                let (_, o, k, _) = wv.dims4("conv_transpose2d")?;
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let geo = TapGeometry { small_h: h, small_w: wd, big_h: ho, big_w: wo, stride: *stride, pad: *pad };
                with(*b, &mut |db| {
                    for ni in 0..n {
                        for oi in 0..o {
                            db[oi] += gd[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo].iter().sum::<f64>();
                        }
                    }
                });
                with(*w, &mut |dw| {
                    for ni in 0..n {
                        for cc in 0..c {
                            let xp = &xv.data()[(ni * c + cc) * h * wd..(ni * c + cc + 1) * h * wd];
                            for oi in 0..o {
                                let gp = &gd[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        dw[((cc * o + oi) * k + ky) * k + kx] += kernels::dot(xp, gp, &geo, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                });
                with(*x, &mut |dx| {
                    for ni in 0..n {
                        for cc in 0..c {
                            let dxp = &mut dx[(ni * c + cc) * h * wd..(ni * c + cc + 1) * h * wd];
                            for oi in 0..o {
                                let gp = &gd[(ni * o + oi) * ho * wo..(ni * o + oi + 1) * ho * wo];
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wt = wv.data()[((cc * o + oi) * k + ky) * k + kx];
                                        kernels::gather(dxp, gp, wt, &geo, ky, kx);
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xs = nodes[x.0].value.data();
                with(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        if xs[i] > 0.0 {
                            dx[i] += gd[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let xs = nodes[x.0].value.data();
                let ys = node.value.data();
                with(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        if xs[i].abs() <= SIGMOID_CLAMP {
                            dx[i] += gd[i] * ys[i] * (1.0 - ys[i]);
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let ys = node.value.data();
                with(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += gd[i] * (1.0 - ys[i] * ys[i]);
                    }
                });
            }
            Op::Add(a, b) => {
                with(*a, &mut |da| da.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                with(*b, &mut |db| db.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                with(*a, &mut |da| da.iter_mut().zip(gd).for_each(|(d, g)| *d += g));
                with(*b, &mut |db| db.iter_mut().zip(gd).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += gd[i] * bv[i];
                    }
                });
                with(*b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                with(*x, &mut |dx| dx.iter_mut().zip(gd).for_each(|(d, g)| *d += c * g));
            }
            Op::Concat(parts) => {
                let (n, total_c, h, w) = g.dims4("concat_channels")?;
                let hw = h * w;
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[p.0].value.shape()[1];
                    with(*p, &mut |dp| {
                        for ni in 0..n {
                            let src = &gd[(ni * total_c + offset) * hw..(ni * total_c + offset + pc) * hw];
                            for (d, s) in dp[ni * pc * hw..(ni + 1) * pc * hw].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, invstd, training } => {
                let (n, c, h, w) = g.dims4("batch_norm2d")?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let gs = nodes[gamma.0].value.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                            sum_g[ci] += gd[i];
                            sum_gx[ci] += gd[i] * xhat[i];
                        }
                    }
                }
                with(*gamma, &mut |dg| dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s));
                with(*beta, &mut |db| db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s));
                with(*x, &mut |dx| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let k = gs[ci] * invstd[ci];
                            for i in (ni * c + ci) * hw..(ni * c + ci + 1) * hw {
                                dx[i] += if *training {
                                    k * (gd[i] - sum_g[ci] / m - xhat[i] * sum_gx[ci] / m)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::LocalGrad { input, local } => {
                let gs = gd[0];
                with(*input, &mut |dx| dx.iter_mut().zip(local).for_each(|(d, l)| *d += gs * l));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    with(v, &mut |dv| dv[0] += w * gd[0]);
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let mut g = Graph::exact();
        let x = g.input(t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let w = g.param(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.param(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn counting_taps() {
        let mut g = Graph::exact();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.param(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_shape_errors_list_both_shapes() {
        let mut g = Graph::exact();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.param(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.param(Tensor::zeros(&[1]));
        let err = g.conv2d(x, w, b, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn transposed_block_and_extents() {
        let mut g = Graph::exact();
        let x = g.input(t(&[1, 1, 1, 1], &[0.7]));
        let w = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = g.param(Tensor::zeros(&[1]));
        let y = g.conv_transpose2d(x, w, b, 2, 0, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.7; 4]);

        let x = g.input(Tensor::zeros(&[1, 1, 64, 64]));
        let w = g.param(Tensor::zeros(&[1, 1, 3, 3]));
        let y = g.conv_transpose2d(x, w, b, 2, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 128, 128]);
        assert!(g.conv_transpose2d(x, w, b, 2, 1, 2).is_err());
    }

    #[test]
    fn activations() {
        let mut g = Graph::exact();
        let x = g.input(t(&[3], &[-1.0, 2.0, 0.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[2], 0.5);
        assert!((sigmoid(5.0) - 0.993307).abs() < 1e-6);
        assert_eq!(sigmoid(1e6), sigmoid(30.0));

        let mut g32 = Graph::new();
        let big = g32.input(t(&[2], &[40.0, -40.0]));
        let s = g32.sigmoid(big).unwrap();
        assert!(g32.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::exact();
        let x = g.param(t(&[2], &[0.0, 1.0]));
        let r = g.relu(x).unwrap();
        let l = g.masked_l1(r, &t(&[2], &[-1.0, -1.0]), None).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn residual_identity_when_gate_zero() {
        let mut g = Graph::exact();
        let fb = g.input(t(&[1, 2, 1, 1], &[0.3, -1.2]));
        let wa = g.input(Tensor::zeros(&[1, 2, 1, 1]));
        let fe = g.mul(wa, fb).unwrap();
        assert!(g.value(fe).data().iter().all(|&v| v == 0.0));
        let out = g.add(fe, fb).unwrap();
        assert_eq!(g.value(out), g.value(fb));
    }

    #[test]
    fn f32_storage_absorbs_a_saturated_gate() {
        let mut g = Graph::new();
        let fb = g.input(t(&[1, 3, 1, 1], &[0.3, -1.2, 7.0]));
        let pre = g.input(Tensor::full(&[1, 3, 1, 1], -30.0));
        let wa = g.sigmoid(pre).unwrap();
        assert!(g.value(wa).data()[0] > 0.0);
        let fe = g.mul(wa, fb).unwrap();
        let out = g.add(fe, fb).unwrap();
        assert_eq!(g.value(out), g.value(fb));
        assert_eq!(g.value(fb).data()[0], f64::from(0.3f32));
    }

    #[test]
    fn concat_four_branches() {
        let mut g = Graph::exact();
        let parts: Vec<Var> = (0..4).map(|_| g.input(Tensor::zeros(&[1, 16, 2, 2]))).collect();
        let c = g.concat_channels(&parts).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 64, 2, 2]);
        let odd = g.input(Tensor::zeros(&[1, 16, 2, 3]));
        assert!(g.concat_channels(&[parts[0], odd]).is_err());
    }

    #[test]
    fn batch_norm_behaviour() {
        let mut g = Graph::exact();
        // zero mean, unit (biased) variance
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, -1.0, 1.0, -1.0]));
        let gamma = g.param(Tensor::full(&[1], 1.0));
        let beta = g.param(Tensor::zeros(&[1]));
        let (mut rm, mut rv) = (vec![0.0f32], vec![1.0f32]);
        let y = g.batch_norm2d(x, gamma, beta, RunningStats { mean: &mut rm, var: &mut rv }, true).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-4);
        }
        // unbiased variance 4/3 folded in with momentum 0.1
        assert!((rv[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-6);

        let c = g.input(Tensor::full(&[1, 1, 2, 2], 3.0));
        let beta2 = g.param(Tensor::full(&[1], 0.25));
        let y = g.batch_norm2d(c, gamma, beta2, RunningStats { mean: &mut rm, var: &mut rv }, true).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 0.25).abs() < 1e-9));

        let wrong = g.param(Tensor::full(&[2], 1.0));
        assert!(g.batch_norm2d(c, wrong, beta2, RunningStats { mean: &mut rm, var: &mut rv }, false).is_err());
    }

    #[test]
    fn loss_values() {
        let mut g = Graph::exact();
        let p = g.param(t(&[1], &[0.5]));
        let l = g.bce(p, &t(&[1], &[1.0]), None).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);

        let q = g.param(t(&[3], &[0.1, 0.2, 0.3]));
        let l1 = g.masked_l1(q, &t(&[3], &[0.1, 0.2, 0.3]), None).unwrap();
        assert_eq!(g.value(l1).item(), 0.0);

        let zero = Tensor::zeros(&[3]);
        let lz = g.masked_l1(q, &t(&[3], &[1.0, 1.0, 1.0]), Some(&zero)).unwrap();
        let lb = g.bce(q, &t(&[3], &[1.0, 1.0, 1.0]), Some(&zero)).unwrap();
        assert_eq!(g.value(lz).item(), 0.0);
        assert_eq!(g.value(lb).item(), 0.0);
        let total = g.weighted_sum(&[(lz, 1.0), (lb, 1.0)]).unwrap();
        g.backward(total).unwrap();
        assert!(g.grad(q).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_twice_requires_reset() {
        let mut g = Graph::exact();
        let p = g.param(t(&[1], &[0.5]));
        let l = g.bce(p, &t(&[1], &[1.0]), None).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(AutodiffError::BackwardTwice));
        g.reset_grads();
        g.backward(l).unwrap();
        assert!((g.grad(p).unwrap().item() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::exact();
        let a = g.input(t(&[1], &[f64::MAX]));
        assert_eq!(g.scale(a, 10.0), Err(AutodiffError::NonFinite { op: "scale" }));
    }
}

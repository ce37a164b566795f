use super::{Branch, Mode, ModelConfig, ModelError, ModelParams, SIZE_MULTIPLE};
use crate::autodiff::{Graph, Tensor, Var};

/// Nodes produced by one perception branch.
#[derive(Debug, Clone, Copy)]
pub struct IpmOutputs {
    /// Gated residual output `F_e + F_b`.
    pub f_prime: Var,
    /// Gated features `W_a ⊙ F_b`.
    pub f_e: Var,
    pub w_a: Var,
    /// Auxiliary prediction at input resolution.
    pub aux: Var,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Graph leaf of each parameter tensor that took part, by parameter index.
    pub leaves: Vec<Option<Var>>,
    pub f_b: Var,
    /// Perception branches in [`Branch::ALL`] order; absent in baseline mode.
    pub ipm: Option<Vec<IpmOutputs>>,
    /// Fused features read by the head (`F_b` itself in baseline mode).
    pub f_t: Var,
    pub prob: Var,
    pub thresh: Var,
    pub binary: Var,
}

impl Forward {
    pub fn branch(&self, b: Branch) -> Option<&IpmOutputs> {
        let i = Branch::ALL.iter().position(|x| *x == b)?;
        self.ipm.as_ref().map(|v| &v[i])
    }
}

struct Ctx<'a> {
    g: &'a mut Graph,
    params: &'a mut ModelParams,
    leaves: Vec<Option<Var>>,
    training: bool,
}

impl Ctx<'_> {
    fn leaf(&mut self, name: &str) -> Var {
        let i = self.params.index_of(name).unwrap_or_else(|| panic!("parameter {name} is not registered"));
        if let Some(v) = self.leaves[i] {
            return v;
        }
        let t = &self.params.tensors()[i];
        let value = Tensor::from_f32(&t.shape, &t.data).expect("parameter shape matches data");
        let v = if t.kind.trainable() { self.g.param(value) } else { self.g.input(value) };
        self.leaves[i] = Some(v);
        v
    }

    fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var, ModelError> {
        let w = self.leaf(&format!("{name}.weight"));
        let b = self.leaf(&format!("{name}.bias"));
        Ok(self.g.conv2d(x, w, b, stride, pad)?)
    }

    fn conv_t(&mut self, x: Var, name: &str, stride: usize, pad: usize, out_pad: usize) -> Result<Var, ModelError> {
        let w = self.leaf(&format!("{name}.weight"));
        let b = self.leaf(&format!("{name}.bias"));
        Ok(self.g.conv_transpose2d(x, w, b, stride, pad, out_pad)?)
    }

    fn conv_relu(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var, ModelError> {
        let y = self.conv(x, name, stride, pad)?;
        Ok(self.g.relu(y)?)
    }

    fn bn_relu(&mut self, x: Var, name: &str) -> Result<Var, ModelError> {
        let bn = format!("{name}.bn");
        let gamma = self.leaf(&format!("{bn}.gamma"));
        let beta = self.leaf(&format!("{bn}.beta"));
        let x = self.g.batch_norm2d(x, gamma, beta, self.params.running_stats(&bn), self.training)?;
        Ok(self.g.relu(x)?)
    }

    fn conv_bn_relu(&mut self, x: Var, name: &str, stride: usize) -> Result<Var, ModelError> {
        let y = self.conv(x, name, stride, 1)?;
        self.bn_relu(y, name)
    }

    fn backbone(&mut self, image: Var) -> Result<Var, ModelError> {
        let x = self.conv_bn_relu(image, "backbone.enc1a", 2)?;
        let x = self.conv_bn_relu(x, "backbone.enc1b", 1)?;
        let x = self.conv_bn_relu(x, "backbone.enc2a", 2)?;
        let skip = self.conv_bn_relu(x, "backbone.enc2b", 1)?;
        let x = self.conv_bn_relu(skip, "backbone.enc3a", 2)?;
        let x = self.conv_bn_relu(x, "backbone.enc3b", 1)?;
        let up = self.conv_t(x, "backbone.up", 2, 0, 0)?;
        let up = self.bn_relu(up, "backbone.up")?;
        let cat = self.g.concat_channels(&[up, skip])?;
        self.conv_bn_relu(cat, "backbone.fuse", 1)
    }

    fn ipm(&mut self, f_b: Var, branch: Branch) -> Result<IpmOutputs, ModelError> {
        let p = format!("ipm.{}", branch.name());
        let d = self.conv_relu(f_b, &format!("{p}.gate_down"), 2, 1)?;
        let m = self.conv_relu(d, &format!("{p}.gate_mid"), 1, 2)?;
        let up = self.conv_t(m, &format!("{p}.gate_up"), 2, 1, 1)?;
        let w_a = self.g.sigmoid(up)?;
        let f_e = self.g.mul(w_a, f_b)?;
        let f_prime = self.g.add(f_e, f_b)?;

        let a = self.conv_t(f_e, &format!("{p}.aux1"), 2, 1, 1)?;
        let a = self.g.relu(a)?;
        let a = self.conv_t(a, &format!("{p}.aux2"), 2, 1, 1)?;
        let aux = if branch == Branch::Direction { self.g.tanh(a)? } else { self.g.sigmoid(a)? };
        Ok(IpmOutputs { f_prime, f_e, w_a, aux })
    }

    fn head_stack(&mut self, f_t: Var, stack: &str) -> Result<Var, ModelError> {
        let x = self.conv_t(f_t, &format!("{stack}.up1"), 2, 0, 0)?;
        let x = self.bn_relu(x, stack)?;
        let x = self.conv_t(x, &format!("{stack}.up2"), 2, 0, 0)?;
        Ok(self.g.sigmoid(x)?)
    }
}

/// Runs the network on an `N×3×H×W` batch with values in `[0, 1]`.
///
/// `H` and `W` must be multiples of 32. Training mode normalizes the
/// batch-norm layers with batch statistics and updates their running stats.
pub fn forward(
    g: &mut Graph,
    params: &mut ModelParams,
    cfg: &ModelConfig,
    image: &Tensor,
    training: bool,
) -> Result<Forward, ModelError> {
    let (_, c, h, w) = image.dims4("forward")?;
    if c != 3 {
        return Err(ModelError::Shape(format!("expected a 3-channel image, got shape {:?}", image.shape())));
    }
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(ModelError::Shape(format!(
            "image height and width must be multiples of {SIZE_MULTIPLE}, got {h}×{w}"
        )));
    }
    let n_params = params.len();
    let mut ctx = Ctx { g, params, leaves: vec![None; n_params], training };

    let normalized = Tensor::new(image.shape().to_vec(), image.data().iter().map(|v| (v - 0.5) * 2.0).collect())?;
    let x = ctx.g.input(normalized);
    let f_b = ctx.backbone(x)?;

    let (ipm, f_t) = match cfg.mode {
        Mode::Baseline => (None, f_b),
        Mode::Rmipn => {
            let outs = Branch::ALL.iter().map(|&b| ctx.ipm(f_b, b)).collect::<Result<Vec<_>, _>>()?;
            let primes: Vec<Var> = outs.iter().map(|o| o.f_prime).collect();
            let cat = ctx.g.concat_channels(&primes)?;
            let f_t = ctx.conv_relu(cat, "rmipm.fuse", 1, 1)?;
            (Some(outs), f_t)
        }
    };

    let prob = ctx.head_stack(f_t, "head.prob")?;
    let thresh = ctx.head_stack(f_t, "head.thresh")?;
    let diff = ctx.g.sub(prob, thresh)?;
    let scaled = ctx.g.scale(diff, cfg.binarize_k)?;
    let binary = ctx.g.sigmoid(scaled)?;

    Ok(Forward { leaves: ctx.leaves, f_b, ipm, f_t, prob, thresh, binary })
}

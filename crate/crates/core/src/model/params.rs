use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Branch, ModelConfig, ModelError};
use crate::autodiff::RunningStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Which part of the network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Ipm(Branch),
    Rmipm,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub kind: ParamKind,
    pub group: ParamGroup,
}

/// Every tensor of the network in a fixed registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

struct Builder {
    tensors: Vec<ParamTensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>, kind: ParamKind, group: ParamGroup) {
        self.tensors.push(ParamTensor { name, shape, data, kind, group });
    }

    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(-bound..bound) as f32).collect()
    }

    /// Kaiming-uniform over the number of taps feeding one output.
    fn kernel(&mut self, name: &str, shape: [usize; 4], fan_in: usize, group: ParamGroup) {
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = self.uniform(shape.iter().product(), bound);
        self.push(format!("{name}.weight"), shape.to_vec(), data, ParamKind::Weight, group);
    }

    fn bias(&mut self, name: &str, c: usize, group: ParamGroup) {
        self.push(format!("{name}.bias"), vec![c], vec![0.0; c], ParamKind::Bias, group);
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, group: ParamGroup) {
        self.kernel(name, [cout, cin, k, k], cin * k * k, group);
        self.bias(name, cout, group);
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, group: ParamGroup) {
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        self.kernel(name, [cin, cout, k, k], fan_in, group);
        self.bias(name, cout, group);
    }

    fn bn(&mut self, name: &str, c: usize, group: ParamGroup) {
        self.push(format!("{name}.gamma"), vec![c], vec![1.0; c], ParamKind::Gamma, group);
        self.push(format!("{name}.beta"), vec![c], vec![0.0; c], ParamKind::Beta, group);
        self.push(format!("{name}.running_mean"), vec![c], vec![0.0; c], ParamKind::RunningMean, group);
        self.push(format!("{name}.running_var"), vec![c], vec![1.0; c], ParamKind::RunningVar, group);
    }
}

impl ModelParams {
    /// Seeded initialization: Kaiming-uniform kernels, zero biases, unit
    /// batch-norm scale.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let (c2, c4) = (c / 2, c / 4);
        let mut b = Builder { tensors: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };

        let bb = ParamGroup::Backbone;
        for (name, cin, cout) in [
            ("enc1a", 3, c2),
            ("enc1b", c2, c2),
            ("enc2a", c2, c),
            ("enc2b", c, c),
            ("enc3a", c, 2 * c),
            ("enc3b", 2 * c, 2 * c),
        ] {
            b.conv(&format!("backbone.{name}"), cin, cout, 3, bb);
            b.bn(&format!("backbone.{name}.bn"), cout, bb);
        }
        b.conv_t("backbone.up", 2 * c, c, 2, 2, bb);
        b.bn("backbone.up.bn", c, bb);
        b.conv("backbone.fuse", 2 * c, c, 3, bb);
        b.bn("backbone.fuse.bn", c, bb);

        for branch in Branch::ALL {
            let g = ParamGroup::Ipm(branch);
            let p = format!("ipm.{}", branch.name());
            b.conv(&format!("{p}.gate_down"), c, c4, 3, g);
            b.conv(&format!("{p}.gate_mid"), c4, c4, 5, g);
            b.conv_t(&format!("{p}.gate_up"), c4, c, 3, 2, g);
            b.conv_t(&format!("{p}.aux1"), c, c4, 3, 2, g);
            b.conv_t(&format!("{p}.aux2"), c4, branch.channels(), 3, 2, g);
        }
        b.conv("rmipm.fuse", 4 * c, c, 3, ParamGroup::Rmipm);

        for stack in ["head.prob", "head.thresh"] {
            let h = ParamGroup::Head;
            b.conv_t(&format!("{stack}.up1"), c, c4, 2, 2, h);
            b.bn(&format!("{stack}.bn"), c4, h);
            b.conv_t(&format!("{stack}.up2"), c4, 1, 2, 2, h);
        }
        Ok(Self::from_vec(b.tensors))
    }

    fn from_vec(tensors: Vec<ParamTensor>) -> Self {
        let index = tensors.iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        Self { tensors, index }
    }

    /// Rebuilds parameters from stored tensors, checking names and shapes
    /// against the layout `cfg` implies. Errors name the first offending tensor.
    pub fn from_named(cfg: &ModelConfig, stored: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<Self, ModelError> {
        let mut expected = Self::init(cfg, 0)?;
        if stored.len() != expected.tensors.len() {
            return Err(ModelError::Shape(format!(
                "checkpoint holds {} tensors, model expects {}",
                stored.len(),
                expected.tensors.len()
            )));
        }
        for (slot, (name, shape, data)) in expected.tensors.iter_mut().zip(stored) {
            if slot.name != name {
                return Err(ModelError::Shape(format!("tensor {name}: expected {} at this position", slot.name)));
            }
            if slot.shape != shape || data.len() != slot.data.len() {
                return Err(ModelError::Shape(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    slot.shape, shape
                )));
            }
            slot.data = data;
        }
        Ok(expected)
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    /// Mutable access for optimizers; shapes must not change.
    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut ParamTensor {
        &mut self.tensors[i]
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.kind.trainable()).map(|t| t.data.len()).sum()
    }

    /// Mutable running statistics of the batch-norm layer `prefix`.
    pub(crate) fn running_stats(&mut self, prefix: &str) -> RunningStats<'_> {
        let mi = self.index[&format!("{prefix}.running_mean")];
        let vi = self.index[&format!("{prefix}.running_var")];
        debug_assert!(mi < vi);
        let (lo, hi) = self.tensors.split_at_mut(vi);
        RunningStats { mean: &mut lo[mi].data, var: &mut hi[0].data }
    }
}

use std::fmt;

use super::{Branch, Forward, Mode, ModelConfig, ModelError};
use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::labelgen::{LabelMaps, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossTerm {
    Center,
    Foreground,
    Distance,
    Direction,
    Binarization,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] =
        [LossTerm::Center, LossTerm::Foreground, LossTerm::Distance, LossTerm::Direction, LossTerm::Binarization];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Center => "L_cen",
            LossTerm::Foreground => "L_for",
            LossTerm::Distance => "L_dis",
            LossTerm::Direction => "L_dir",
            LossTerm::Binarization => "L_b",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Unweighted term values and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub center: f64,
    pub foreground: f64,
    pub distance: f64,
    pub direction: f64,
    pub binarization: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Terms in [`LossTerm::ALL`] order.
    pub fn terms(&self) -> [f64; 5] {
        [self.center, self.foreground, self.distance, self.direction, self.binarization]
    }

    fn set(&mut self, term: LossTerm, v: f64) {
        match term {
            LossTerm::Center => self.center = v,
            LossTerm::Foreground => self.foreground = v,
            LossTerm::Distance => self.distance = v,
            LossTerm::Direction => self.direction = v,
            LossTerm::Binarization => self.binarization = v,
        }
    }
}

/// Supervision for a batch, stacked as `N×1×H×W` (`N×2×H×W` for direction).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch {
    pub center: Tensor,
    pub foreground: Tensor,
    pub distance: Tensor,
    pub direction: Tensor,
    pub direction_mask: Tensor,
    pub band: Tensor,
    pub band_mask: Tensor,
}

/// Cross-entropy weights: positives (`> 0.5`) count `sqrt(negatives /
/// positives)` times as much as negatives, never less than once.
pub fn positive_weights(target: &Tensor) -> Tensor {
    let pos = target.data().iter().filter(|&&v| v > 0.5).count();
    let neg = target.numel() - pos;
    let wp = if pos == 0 { 1.0 } else { (neg as f64 / pos as f64).sqrt().max(1.0) };
    let data = target.data().iter().map(|&v| if v > 0.5 { wp } else { 1.0 }).collect();
    Tensor::new(target.shape().to_vec(), data).expect("same shape as target")
}

fn stack(planes: &[&Raster], h: usize, w: usize, f: impl Fn(f32) -> f64) -> Tensor {
    let c = planes.len();
    let data = planes.iter().flat_map(|r| r.data.iter().map(|&v| f(v))).collect();
    Tensor::new(vec![1, c, h, w], data).expect("planes share dims")
}

fn cat_batch(parts: Vec<Tensor>) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.len();
    let data = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(shape, data).expect("batch parts share shape")
}

impl LabelBatch {
    pub fn from_maps(maps: &[&LabelMaps]) -> Result<Self, ModelError> {
        let first = maps.first().ok_or_else(|| ModelError::Shape("empty label batch".into()))?;
        let (h, w) = (first.dims.height, first.dims.width);
        if let Some(m) = maps.iter().find(|m| m.dims != first.dims) {
            return Err(ModelError::Shape(format!(
                "label maps in one batch differ: {}×{} vs {}×{}",
                h, w, m.dims.height, m.dims.width
            )));
        }
        let id = |v: f32| f64::from(v);
        let nonzero = |v: f32| f64::from(u8::from(v > 0.0));
        let each = |f: &dyn Fn(&LabelMaps) -> Tensor| cat_batch(maps.iter().map(|m| f(m)).collect());
        Ok(Self {
            center: each(&|m| stack(&[&m.center], h, w, id)),
            foreground: each(&|m| stack(&[&m.foreground], h, w, id)),
            distance: each(&|m| stack(&[&m.distance], h, w, id)),
            direction: each(&|m| stack(&[&m.direction.x, &m.direction.y], h, w, id)),
            direction_mask: each(&|m| stack(&[&m.foreground, &m.foreground], h, w, nonzero)),
            band: each(&|m| stack(&[&m.threshold_band], h, w, id)),
            band_mask: each(&|m| stack(&[&m.threshold_band], h, w, nonzero)),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.center.shape()[0]
    }
}

fn named(term: LossTerm) -> impl Fn(AutodiffError) -> ModelError {
    move |e| match e {
        AutodiffError::NonFinite { .. } => ModelError::NonFiniteLoss { term },
        other => ModelError::Autodiff(other),
    }
}

fn weighted_bce(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var, AutodiffError> {
    g.bce(pred, target, Some(&positive_weights(target)))
}

/// Builds the weighted multi-task loss on `g`.
///
/// In baseline mode only the binarization term is built and weighted.
pub fn total_loss(
    g: &mut Graph,
    fwd: &Forward,
    labels: &LabelBatch,
    cfg: &ModelConfig,
) -> Result<(Var, LossBreakdown), ModelError> {
    let pshape = g.value(fwd.prob).shape().to_vec();
    if pshape != labels.center.shape() {
        return Err(ModelError::Shape(format!("predictions {:?} vs labels {:?}", pshape, labels.center.shape())));
    }
    let mut breakdown = LossBreakdown::default();
    let mut record = |g: &Graph, term: LossTerm, v: Var| breakdown.set(term, g.value(v).item());

    let lb = {
        let e = named(LossTerm::Binarization);
        let b = weighted_bce(g, fwd.binary, &labels.center).map_err(&e)?;
        let p = weighted_bce(g, fwd.prob, &labels.center).map_err(&e)?;
        let t = g.masked_l1(fwd.thresh, &labels.band, Some(&labels.band_mask)).map_err(&e)?;
        g.weighted_sum(&[(b, 1.0), (p, 1.0), (t, 1.0)]).map_err(&e)?
    };
    record(g, LossTerm::Binarization, lb);
    let a = cfg.weights;

    let total = match (cfg.mode, &fwd.ipm) {
        (Mode::Baseline, _) | (Mode::Rmipn, None) => {
            g.weighted_sum(&[(lb, a.binarization)]).map_err(named(LossTerm::Binarization))?
        }
        (Mode::Rmipn, Some(_)) => {
            let aux = |b: Branch| fwd.branch(b).expect("branches present").aux;
            let lc = weighted_bce(g, aux(Branch::Center), &labels.center).map_err(named(LossTerm::Center))?;
            let lf =
                weighted_bce(g, aux(Branch::Foreground), &labels.foreground).map_err(named(LossTerm::Foreground))?;
            let ld = g
                .masked_l1(aux(Branch::Distance), &labels.distance, Some(&labels.foreground))
                .map_err(named(LossTerm::Distance))?;
            let ldir = g
                .masked_l1(aux(Branch::Direction), &labels.direction, Some(&labels.direction_mask))
                .map_err(named(LossTerm::Direction))?;
            record(g, LossTerm::Center, lc);
            record(g, LossTerm::Foreground, lf);
            record(g, LossTerm::Distance, ld);
            record(g, LossTerm::Direction, ldir);
            let rest = [(ld, a.distance), (ldir, a.direction), (lb, a.binarization)];
            if cfg.strict_eq6_product {
                let wc = g.scale(lc, a.center)?;
                let wf = g.scale(lf, a.foreground)?;
                let prod = g.mul(wc, wf)?;
                let mut terms = vec![(prod, 1.0)];
                terms.extend(rest);
                g.weighted_sum(&terms)?
            } else {
                let mut terms = vec![(lc, a.center), (lf, a.foreground)];
                terms.extend(rest);
                g.weighted_sum(&terms)?
            }
        }
    };
    breakdown.total = g.value(total).item();
    Ok((total, breakdown))
}

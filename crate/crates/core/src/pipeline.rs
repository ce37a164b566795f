//! Training loop, single-image inference and the two-mode ablation harness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Graph, ParamUpdate, Sgd, SgdConfig};
use crate::dataio::{self, checkpoint, DataError, RgbImage, Sample};
use crate::evalkit::{self, EvalError, EvalReport};
use crate::labelgen::{Dims, LabelMaps, Raster, ShrinkPolicy};
use crate::model::{
    forward, total_loss, LabelBatch, LossBreakdown, LossTerm, Mode, ModelConfig, ModelError, ModelParams, ParamGroup,
    SIZE_MULTIPLE,
};
use crate::postprocess::{self, DetectionResult, PostError, PostParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty dataset: no images in {0}")]
    EmptyDataset(String),
    #[error("loss term {term} became non-finite at epoch {epoch}")]
    NonFiniteLoss { term: String, epoch: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Post(#[from] PostError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: Mode,
    pub base_channels: usize,
    pub shrink: ShrinkPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        Self {
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            batch_size: 2,
            epochs: 200,
            seed: 0,
            mode: Mode::Rmipn,
            base_channels: 16,
            shrink: ShrinkPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PipelineError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(PipelineError::Config("momentum must lie in [0, 1) and weight decay be non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, dims: Dims) -> ModelConfig {
        ModelConfig {
            base_channels: self.base_channels,
            height: dims.height,
            width: dims.width,
            mode: self.mode,
            ..ModelConfig::default()
        }
    }
}

/// Name of the best-loss checkpoint inside a training output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.rmip";
pub const REPORT_FILE: &str = "report.txt";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub seed: u64,
    pub mode: Mode,
    pub samples: usize,
    /// Mean loss breakdown of each completed epoch.
    pub history: Vec<LossBreakdown>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_loss: f64,
    /// Largest absolute gradient seen on perception or fusion parameters.
    pub ipm_grad_max_abs: f64,
    pub label_warnings: usize,
    pub checkpoint: Option<String>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// `key=value` lines. Wall-clock time is left out so reruns compare equal
    /// byte for byte.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "mode={}", self.mode);
        let _ = writeln!(s, "samples={}", self.samples);
        let _ = writeln!(s, "epochs={}", self.history.len());
        let _ = writeln!(s, "first_loss={:.8}", self.history.first().map_or(f64::NAN, |b| b.total));
        let _ = writeln!(s, "final_loss={:.8}", self.history.last().map_or(f64::NAN, |b| b.total));
        let _ = writeln!(s, "best_epoch={}", self.best_epoch);
        let _ = writeln!(s, "best_loss={:.8}", self.best_loss);
        let _ = writeln!(s, "ipm_grad_max_abs={:e}", self.ipm_grad_max_abs);
        let _ = writeln!(s, "label_warnings={}", self.label_warnings);
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(s, "checkpoint={c}");
        }
        s
    }

    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch");
        for t in LossTerm::ALL {
            s.push(',');
            s.push_str(t.name());
        }
        s.push_str(",total\n");
        for (i, b) in self.history.iter().enumerate() {
            let _ = write!(s, "{}", i + 1);
            for v in b.terms() {
                let _ = write!(s, ",{v:.8}");
            }
            let _ = writeln!(s, ",{:.8}", b.total);
        }
        s
    }

    /// Relative drop of the total loss from the first to the last epoch.
    pub fn loss_reduction(&self) -> f64 {
        match (self.history.first(), self.history.last()) {
            (Some(a), Some(b)) if a.total > 0.0 => 1.0 - b.total / a.total,
            _ => 0.0,
        }
    }
}

/// Output of an in-memory training run.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ModelConfig,
    /// Parameters after the lowest-loss epoch.
    pub best: ModelParams,
    pub report: TrainReport,
}

fn common_dims(samples: &[Sample]) -> Result<Dims, PipelineError> {
    let dims = samples[0].image.dims;
    if let Some(s) = samples.iter().find(|s| s.image.dims != dims) {
        return Err(PipelineError::Config(format!(
            "training images must share one size: {} is {}x{}, {} is {}x{}",
            samples[0].id, dims.width, dims.height, s.id, s.image.dims.width, s.image.dims.height
        )));
    }
    Ok(dims)
}

fn stack_images(images: &[&RgbImage]) -> crate::autodiff::Tensor {
    let mut shape = images[0].to_tensor().shape().to_vec();
    shape[0] = images.len();
    let data = images.iter().flat_map(|im| im.to_tensor().into_data()).collect();
    crate::autodiff::Tensor::new(shape, data).expect("images share dims")
}

/// Minibatch SGD over `samples`. Each epoch visits the samples in a seeded
/// shuffled order; the reported epoch loss is the sample-weighted mean of
/// its batch losses.
pub fn train_samples(samples: &[Sample], cfg: &TrainConfig) -> Result<Trained, PipelineError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(PipelineError::EmptyDataset("the given sample list".into()));
    }
    let started = Instant::now();
    let dims = common_dims(samples)?;
    let model = cfg.model_config(dims);
    model.validate()?;
    let mut params = ModelParams::init(&model, cfg.seed)?;

    let mut label_warnings = 0;
    let labels: Vec<LabelMaps> = samples
        .iter()
        .map(|s| {
            let (maps, warnings) = LabelMaps::generate(&s.annotation.polygons, dims, &cfg.shrink);
            label_warnings += warnings.len();
            maps
        })
        .collect();

    let mut sgd = Sgd::new(SgdConfig { lr: cfg.lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (0, f64::INFINITY, params.clone());
    let mut ipm_grad_max_abs: f64 = 0.0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&RgbImage> = batch.iter().map(|&i| &samples[i].image).collect();
            let maps: Vec<&LabelMaps> = batch.iter().map(|&i| &labels[i]).collect();
            let target = LabelBatch::from_maps(&maps)?;

            let mut g = Graph::new();
            let fwd = forward(&mut g, &mut params, &model, &stack_images(&images), true)?;
            let (loss, br) = total_loss(&mut g, &fwd, &target, &model).map_err(|e| match e {
                ModelError::NonFiniteLoss { term } => PipelineError::NonFiniteLoss { term: term.to_string(), epoch },
                other => other.into(),
            })?;
            g.backward(loss).map_err(ModelError::from)?;

            let mut grads = BTreeMap::new();
            for (i, leaf) in fwd.leaves.iter().enumerate() {
                let t = &params.tensors()[i];
                if !t.kind.trainable() {
                    continue;
                }
                if let Some(grad) = leaf.and_then(|v| g.grad(v)) {
                    if matches!(t.group, ParamGroup::Ipm(_) | ParamGroup::Rmipm) {
                        let m = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                        ipm_grad_max_abs = ipm_grad_max_abs.max(m);
                    }
                    grads.insert(i, grad.data());
                }
            }
            let mut updates: Vec<ParamUpdate<'_>> = params
                .tensors_mut()
                .iter_mut()
                .enumerate()
                .filter_map(|(i, t)| grads.get(&i).map(|&grad| ParamUpdate { slot: i, weights: &mut t.data, grad }))
                .collect();
            sgd.step(&mut updates).map_err(ModelError::from)?;

            let n = batch.len() as f64;
            sum.center += br.center * n;
            sum.foreground += br.foreground * n;
            sum.distance += br.distance * n;
            sum.direction += br.direction * n;
            sum.binarization += br.binarization * n;
            sum.total += br.total * n;
        }
        let n = samples.len() as f64;
        let mean = LossBreakdown {
            center: sum.center / n,
            foreground: sum.foreground / n,
            distance: sum.distance / n,
            direction: sum.direction / n,
            binarization: sum.binarization / n,
            total: sum.total / n,
        };
        if mean.total < best.1 {
            best = (epoch, mean.total, params.clone());
        }
        history.push(mean);
    }

    let report = TrainReport {
        seed: cfg.seed,
        mode: cfg.mode,
        samples: samples.len(),
        history,
        best_epoch: best.0,
        best_loss: best.1,
        ipm_grad_max_abs,
        label_warnings,
        checkpoint: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(Trained { model, best: best.2, report })
}

fn load_dir(dir: &Path) -> Result<Vec<Sample>, PipelineError> {
    match dataio::load_dataset(dir) {
        Err(DataError::EmptyDataset(_)) => Err(PipelineError::EmptyDataset(dir.display().to_string())),
        Err(DataError::Io { ref source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
            Err(PipelineError::EmptyDataset(dir.display().to_string()))
        }
        other => Ok(other?),
    }
}

/// Writes the best checkpoint, the report and the loss history into `out`.
pub fn save_training(trained: &mut Trained, out: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out).map_err(|source| DataError::Io { path: out.to_path_buf(), source })?;
    let bytes = checkpoint::checkpoint_bytes(&trained.model, &trained.best);
    dataio::write_atomic(&out.join(CHECKPOINT_FILE), &bytes)?;
    trained.report.checkpoint = Some(CHECKPOINT_FILE.to_string());
    dataio::write_atomic(&out.join(REPORT_FILE), trained.report.to_text().as_bytes())?;
    dataio::write_atomic(&out.join(HISTORY_FILE), trained.report.history_csv().as_bytes())?;
    Ok(())
}

/// Trains on every `*.ppm`/`*.txt` pair in `data` and writes the artifacts
/// into `out`.
pub fn train(data: &Path, cfg: &TrainConfig, out: &Path) -> Result<Trained, PipelineError> {
    let samples = load_dir(data)?;
    let mut trained = train_samples(&samples, cfg)?;
    save_training(&mut trained, out)?;
    Ok(trained)
}

/// Smallest multiple of 32 not below `v`.
pub fn network_extent(v: usize) -> usize {
    v.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE
}

/// Probability map at network resolution.
pub fn predict_prob(model: &ModelConfig, params: &mut ModelParams, image: &RgbImage) -> Result<Raster, PipelineError> {
    let mut g = Graph::new();
    let fwd = forward(&mut g, params, model, &image.to_tensor(), false)?;
    let p = g.value(fwd.prob);
    Ok(Raster { dims: image.dims, data: p.to_f32() })
}

/// Post-processes a network-resolution map and scales polygons back to
/// `original` image coordinates.
pub fn detect_mapped(prob: &Raster, original: Dims, post: &PostParams) -> Result<DetectionResult, PipelineError> {
    post.validate()?;
    let (mut result, _) = postprocess::detect(prob, post);
    if prob.dims != original {
        let sx = original.width as f64 / prob.dims.width as f64;
        let sy = original.height as f64 / prob.dims.height as f64;
        for d in &mut result.detections {
            d.polygon = d.polygon.scaled(sx, sy).map_err(PostError::from)?;
        }
        result.dims = original;
    }
    Ok(result)
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub result: DetectionResult,
    /// Probability map at the resolution the network saw.
    pub prob: Raster,
}

/// Runs the network on one image of any size. Images whose sides are not
/// multiples of 32 are resized up to the next multiple and the detections
/// mapped back.
pub fn infer(
    model: &ModelConfig,
    params: &mut ModelParams,
    image: &RgbImage,
    post: &PostParams,
) -> Result<Inference, PipelineError> {
    let net = Dims::new(network_extent(image.dims.height), network_extent(image.dims.width));
    let input = if net == image.dims { image.clone() } else { image.resize(net) };
    let prob = predict_prob(model, params, &input)?;
    let result = detect_mapped(&prob, image.dims, post)?;
    Ok(Inference { result, prob })
}

/// Loads a checkpoint file.
pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams), PipelineError> {
    Ok(checkpoint::read_checkpoint(&dataio::read_file(path)?, None)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub train: TrainConfig,
    /// Share of samples held out for evaluation.
    pub holdout: f64,
    pub post: PostParams,
    pub iou_thresh: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), holdout: 0.25, post: PostParams::default(), iou_thresh: 0.5 }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub mode: Mode,
    pub trained: Trained,
    pub eval: EvalReport,
    /// SHA-256 of the evaluated image ids, one per line.
    pub split_hash: String,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Seeded split into `(train, test)` indices; the test side holds
/// `ceil(holdout * n)` samples, at least one, leaving at least one to train.
pub fn split(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5911_7e57));
    let k = ((holdout * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    let mut test = idx.split_off(n - k);
    idx.sort_unstable();
    test.sort_unstable();
    (idx, test)
}

pub fn id_list_hash(ids: &[String]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Trains both modes on the same split and seed and evaluates each on the
/// held-out samples.
pub fn ablation_samples(samples: &[Sample], cfg: &AblationConfig) -> Result<Ablation, PipelineError> {
    if samples.len() < 2 {
        return Err(PipelineError::Config(format!("ablation needs at least 2 samples, got {}", samples.len())));
    }
    if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) {
        return Err(PipelineError::Config(format!("holdout must lie in (0, 1), got {}", cfg.holdout)));
    }
    let (train_idx, test_idx) = split(samples.len(), cfg.holdout, cfg.train.seed);
    let train_set: Vec<Sample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let test_set: Vec<&Sample> = test_idx.iter().map(|&i| &samples[i]).collect();
    let test_ids: Vec<String> = test_set.iter().map(|s| s.id.clone()).collect();
    let gts: BTreeMap<String, Vec<_>> =
        test_set.iter().map(|s| (s.id.clone(), s.annotation.polygons.clone())).collect();

    let mut rows = Vec::new();
    for mode in [Mode::Baseline, Mode::Rmipn] {
        let tc = TrainConfig { mode, ..cfg.train.clone() };
        let mut trained = train_samples(&train_set, &tc)?;
        let mut preds = BTreeMap::new();
        for s in &test_set {
            let inf = infer(&trained.model, &mut trained.best, &s.image, &cfg.post)?;
            preds.insert(s.id.clone(), inf.result.polygons());
        }
        let eval = evalkit::evaluate(&preds, &gts, cfg.iou_thresh)?;
        rows.push(AblationRow { mode, trained, eval, split_hash: id_list_hash(&test_ids) });
    }
    Ok(Ablation { train_ids: train_set.iter().map(|s| s.id.clone()).collect(), test_ids, rows })
}

impl Ablation {
    /// Two rows, recall/precision/F-measure in percent.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>7} {:>7} {:>7}\n", "method", "R", "P", "F");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<10} {:>7.2} {:>7.2} {:>7.2}",
                r.mode.to_string(),
                100.0 * r.eval.recall,
                100.0 * r.eval.precision,
                100.0 * r.eval.fmeasure
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "train_images={}", self.train_ids.len());
        let _ = writeln!(s, "test_images={}", self.test_ids.len());
        let _ = writeln!(s, "test_split_sha256={}", id_list_hash(&self.test_ids));
        for r in &self.rows {
            let _ = writeln!(s, "{}.ipm_grad_max_abs={:e}", r.mode, r.trained.report.ipm_grad_max_abs);
        }
        s
    }
}

/// Runs the ablation over a dataset directory, writing `ablation.txt`,
/// `ablation_summary.txt` and per-mode training artifacts into `out`.
pub fn ablation_run(data: &Path, cfg: &AblationConfig, out: &Path) -> Result<Ablation, PipelineError> {
    let samples = load_dir(data)?;
    let mut ab = ablation_samples(&samples, cfg)?;
    for row in &mut ab.rows {
        save_training(&mut row.trained, &out.join(row.mode.to_string()))?;
    }
    dataio::write_atomic(&out.join("ablation.txt"), ab.table().as_bytes())?;
    dataio::write_atomic(&out.join("ablation_summary.txt"), ab.summary().as_bytes())?;
    Ok(ab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;

    #[test]
    fn extents_round_up() {
        assert_eq!((network_extent(300), network_extent(320), network_extent(1)), (320, 320, 32));
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (a, b) = split(32, 0.25, 4);
        assert_eq!((a.len(), b.len()), (24, 8));
        assert_eq!((a.clone(), b.clone()), split(32, 0.25, 4));
        assert!(b.iter().all(|i| !a.contains(i)));
        assert_eq!(split(2, 0.9, 0).1.len(), 1);
    }

    #[test]
    fn mapped_polygons_follow_the_resize() {
        let net = Dims::new(320, 320);
        let mut prob = Raster::zeros(net);
        let block = Polygon::rect(64.0, 96.0, 192.0, 160.0).unwrap();
        for (r, c0, c1) in block.pixel_spans(320, 320) {
            for c in c0..c1 {
                prob.set(r, c, 0.9);
            }
        }
        let post = PostParams::default();
        let (direct, _) = postprocess::detect(&prob, &post);
        let res = detect_mapped(&prob, Dims::new(300, 300), &post).unwrap();
        assert_eq!((res.detections.len(), direct.detections.len()), (1, 1));
        assert_eq!(res.dims, Dims::new(300, 300));
        let s = 300.0 / 320.0;
        let got = res.detections[0].polygon.vertices();
        let want = direct.detections[0].polygon.vertices();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g.x - w.x * s).abs() <= 1.0 && (g.y - w.y * s).abs() <= 1.0, "{g:?} vs {w:?}");
        }
        let (lo, _) = res.detections[0].polygon.bbox();
        assert!(lo.x < 64.0 * s && lo.y < 96.0 * s);
    }

    #[test]
    fn empty_or_bad_config_is_rejected() {
        assert!(matches!(train_samples(&[], &TrainConfig::default()), Err(PipelineError::EmptyDataset(_))));
        let bad = TrainConfig { lr: 0.0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(PipelineError::Config(_))));
    }
}

use rmipn_core::dataio::{
    checkpoint_bytes, load_dataset, synth_sample, write_synth_dataset, RgbImage, Sample, SynthConfig,
};
use rmipn_core::labelgen::Dims;
use rmipn_core::model::{Mode, ModelParams, ParamGroup};
use rmipn_core::pipeline::{
    ablation_samples, infer, load_model, train, train_samples, AblationConfig, PipelineError, TrainConfig,
    CHECKPOINT_FILE, HISTORY_FILE, REPORT_FILE,
};
use rmipn_core::postprocess::PostParams;

fn samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    let cfg = SynthConfig { height: size, width: size, ..Default::default() };
    (0..n)
        .map(|i| {
            let id = format!("s{i}");
            let s = synth_sample(&id, seed + i as u64, &cfg).unwrap();
            Sample { id, image: s.image, annotation: s.annotation }
        })
        .collect()
}

fn quick(seed: u64, mode: Mode) -> TrainConfig {
    TrainConfig { lr: 0.01, epochs: 3, batch_size: 2, seed, mode, base_channels: 4, ..Default::default() }
}

#[test]
fn training_is_reproducible_in_the_seed() {
    let data = samples(3, 64, 1);
    let a = train_samples(&data, &quick(5, Mode::Rmipn)).unwrap();
    let b = train_samples(&data, &quick(5, Mode::Rmipn)).unwrap();
    let c = train_samples(&data, &quick(6, Mode::Rmipn)).unwrap();
    assert_eq!(checkpoint_bytes(&a.model, &a.best), checkpoint_bytes(&b.model, &b.best));
    assert_eq!(a.report.to_text(), b.report.to_text());
    assert_eq!(a.report.history_csv(), b.report.history_csv());
    assert_ne!(checkpoint_bytes(&a.model, &a.best), checkpoint_bytes(&c.model, &c.best));

    assert_eq!(a.report.history.len(), 3);
    assert!(a.report.history.iter().all(|h| h.total.is_finite() && h.total > 0.0));
    assert!(a.report.ipm_grad_max_abs > 0.0);
    let min = a.report.history.iter().map(|h| h.total).fold(f64::INFINITY, f64::min);
    assert_eq!(a.report.best_loss, min);
}

#[test]
fn baseline_leaves_perception_parameters_at_init() {
    let data = samples(2, 64, 3);
    let t = train_samples(&data, &quick(2, Mode::Baseline)).unwrap();
    assert_eq!(t.report.ipm_grad_max_abs, 0.0);
    let init = ModelParams::init(&t.model, 2).unwrap();
    let mut touched_other = false;
    for (a, b) in t.best.tensors().iter().zip(init.tensors()) {
        if matches!(a.group, ParamGroup::Ipm(_) | ParamGroup::Rmipm) {
            assert_eq!(a.data, b.data, "{} moved", a.name);
        } else if a.data != b.data {
            touched_other = true;
        }
    }
    assert!(touched_other);
}

#[test]
fn directory_training_writes_artifacts_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("out"));
    write_synth_dataset(&data, 2, 4, &SynthConfig { height: 64, width: 64, ..Default::default() }).unwrap();
    assert_eq!(load_dataset(&data).unwrap().len(), 2);
    let t = train(&data, &quick(1, Mode::Rmipn), &out).unwrap();
    for f in [CHECKPOINT_FILE, REPORT_FILE, HISTORY_FILE] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let report = std::fs::read_to_string(out.join(REPORT_FILE)).unwrap();
    assert!(report.contains("checkpoint=checkpoint.rmip") && !report.contains("wall"));
    let history = std::fs::read_to_string(out.join(HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), 4);

    let (cfg, mut params) = load_model(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(cfg, t.model);
    assert_eq!(checkpoint_bytes(&cfg, &params), checkpoint_bytes(&t.model, &t.best));

    // off-grid size is resized for the network and mapped back
    let odd = RgbImage::new(Dims::new(50, 70));
    let inf = infer(&cfg, &mut params, &odd, &PostParams::default()).unwrap();
    assert_eq!(inf.result.dims, Dims::new(50, 70));
    assert_eq!(inf.prob.dims, Dims::new(64, 96));
}

#[test]
fn missing_directory_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let err = train(&dir.path().join("nope"), &quick(0, Mode::Rmipn), &dir.path().join("out")).unwrap_err();
    assert!(matches!(err, PipelineError::EmptyDataset(_)));
    assert!(err.to_string().contains("empty dataset"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn ablation_uses_one_split_for_both_modes() {
    let data = samples(6, 64, 10);
    let cfg = AblationConfig { train: quick(3, Mode::Rmipn), ..Default::default() };
    let ab = ablation_samples(&data, &cfg).unwrap();
    assert_eq!((ab.train_ids.len(), ab.test_ids.len()), (4, 2));
    assert_eq!(ab.rows.len(), 2);
    assert_eq!(ab.rows[0].mode, Mode::Baseline);
    assert_eq!(ab.rows[0].split_hash, ab.rows[1].split_hash);
    assert_eq!(ab.rows[0].trained.report.ipm_grad_max_abs, 0.0);
    assert_eq!(ab.table().lines().count(), 3);
    let again = ablation_samples(&data, &cfg).unwrap();
    assert_eq!(ab.table(), again.table());
    assert_eq!(ab.summary(), again.summary());
}

use candle_core::Device;
use echoguide_core::landmarks::LandmarkErrorConfig;
use echoguide_core::pose::ScorerMode;
use echoguide_core::synthetic::{landmark_frames, lvef_clip};
use echoguide_nn::adapter::{train_adapter_scorer, AdapterConfig, AdapterScorer, AdapterTrainConfig, Backbone, BackboneConfig};
use echoguide_nn::landmark::{
    evaluate_detector, train_landmark_detector, LandmarkDetector, LandmarkModelConfig, LandmarkSample,
    LandmarkTrainConfig,
};
use echoguide_nn::pose::{texture_samples, train_pose_regressor, PoseModelConfig, PoseRegressor, PoseTrainConfig};
use echoguide_nn::video::{lvef_mae, train_lvef_estimator, LvefModel, LvefModelConfig, LvefSample, LvefTrainConfig};

fn landmark_samples(n: usize, size: usize) -> Vec<LandmarkSample> {
    landmark_frames(n, size, size, 7)
        .into_iter()
        .map(|(frame, annotation)| LandmarkSample { frame, annotation })
        .collect()
}

#[test]
fn landmark_overfit_loss_decreases() {
    let data = landmark_samples(8, 64);
    let det = LandmarkDetector::new(LandmarkModelConfig::new(18, 0.125, 64, 64), 0, &Device::Cpu).unwrap();
    let cfg = LandmarkTrainConfig {
        epochs: 50,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 0,
        augment: None,
        max_steps: Some(50),
        log_every: 5,
    };
    let log = train_landmark_detector(&det, &data, &[], &cfg, None).unwrap();
    assert_eq!(log.logged.len(), 10);
    for w in log.logged.windows(2) {
        assert!(w[1] < w[0], "logged loss went up: {:?}", log.logged);
    }
    let err = evaluate_detector(&det, &data, &LandmarkErrorConfig::default(), 8).unwrap();
    assert!(err.overall.count > 0);
}

#[test]
fn landmark_checkpoint_round_trip() {
    let data = landmark_samples(2, 32);
    let det = LandmarkDetector::new(LandmarkModelConfig::new(18, 0.125, 32, 32), 3, &Device::Cpu).unwrap();
    let dir = tempfile::tempdir().unwrap();
    det.save(dir.path()).unwrap();
    let back = LandmarkDetector::load(dir.path(), &Device::Cpu).unwrap();
    assert_eq!(back.config, det.config);
    let frames: Vec<_> = data.iter().map(|s| &s.frame).collect();
    assert_eq!(back.predict(&frames).unwrap(), det.predict(&frames).unwrap());
}

#[test]
fn pose_training_is_reproducible() {
    let train = texture_samples(12, 32, 1);
    let val = texture_samples(6, 32, 2);
    let run = || {
        let m = PoseRegressor::new(PoseModelConfig::new(ScorerMode::ImagesOnly, 0.125, 32, 32), 5, &Device::Cpu)
            .unwrap();
        let cfg = PoseTrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        train_pose_regressor(&m, &train, &val, &cfg, None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.epochs.last().unwrap().val_loss, b.epochs.last().unwrap().val_loss);
    assert_eq!(a.logged, b.logged);
    assert!(a.degenerate_selection);
}

#[test]
fn pose_checkpoint_written() {
    let train = texture_samples(6, 32, 1);
    let m = PoseRegressor::new(PoseModelConfig::new(ScorerMode::ImagesOnly, 0.125, 32, 32), 5, &Device::Cpu).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = PoseTrainConfig {
        epochs: 6,
        batch_size: 6,
        augment: None,
        ..Default::default()
    };
    let log = train_pose_regressor(&m, &train, &[], &cfg, Some(dir.path())).unwrap();
    assert!(!log.degenerate_selection);
    assert!(log.selected_epoch.unwrap() >= 4);
    let back = PoseRegressor::load(dir.path(), &Device::Cpu).unwrap();
    let refs: Vec<_> = train.iter().collect();
    assert_eq!(back.predict(&refs).unwrap(), m.predict(&refs).unwrap());
    assert!(dir.path().join("train_log.json").exists());
}

#[test]
fn adapter_epoch_leaves_backbone_untouched() {
    let backbone = Backbone::new(BackboneConfig::tiny(), 1, &Device::Cpu).unwrap();
    let before = backbone.digest().unwrap();
    let model =
        AdapterScorer::new(AdapterConfig::new(ScorerMode::ImagesOnly, 0.125, 32, 32), backbone, 2).unwrap();
    let adapter_before = model.store.digest().unwrap();
    let cfg = AdapterTrainConfig {
        epochs: 1,
        batch_size: 4,
        ..Default::default()
    };
    train_adapter_scorer(&model, &texture_samples(8, 32, 3), &[], &cfg, None).unwrap();
    assert_eq!(model.backbone.digest().unwrap(), before);
    assert_ne!(model.store.digest().unwrap(), adapter_before);
}

fn lvef_set(n: usize) -> Vec<LvefSample> {
    (0..n)
        .map(|i| {
            let ef = 25.0 + 50.0 * i as f64 / (n - 1) as f64;
            LvefSample {
                clip_id: format!("clip{i}"),
                frames: lvef_clip(ef, 16, 32, 32, i as u64),
                ef,
            }
        })
        .collect()
}

#[test]
fn lvef_overfits_brightness_coded_clips() {
    let data = lvef_set(4);
    let model = LvefModel::new(LvefModelConfig::tiny(32, 32, 16), 0, &Device::Cpu).unwrap();
    let cfg = LvefTrainConfig {
        epochs: 300,
        batch_size: 4,
        max_steps: Some(300),
        ..Default::default()
    };
    let log = train_lvef_estimator(&model, &data, &cfg, None).unwrap();
    assert!(log.steps <= 300);
    let mae = lvef_mae(&model, &data).unwrap();
    assert!(mae < 5.0, "train MAE {mae}");
}

#[test]
fn lvef_training_is_reproducible() {
    let data = lvef_set(4);
    let run = || {
        let model = LvefModel::new(LvefModelConfig::tiny(32, 32, 16), 9, &Device::Cpu).unwrap();
        let cfg = LvefTrainConfig {
            epochs: 3,
            batch_size: 2,
            ..Default::default()
        };
        train_lvef_estimator(&model, &data, &cfg, None).unwrap();
        model.store.digest().unwrap()
    };
    assert_eq!(run(), run());
}

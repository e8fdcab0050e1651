//! Implementations of the `echoguide` subcommands.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use candle_core::Device;
use echoguide_core::cascade::{timer_resolution, ThroughputStats};
use echoguide_core::frame::load_frame_dir;
use echoguide_core::ingest::echonet::{
    merge_annotations, parse_auxiliary_landmarks, parse_echonet_annotations, EchoNetClip, LandmarkAnnotation, Split,
};
use echoguide_core::ingest::folds::{make_subject_folds, FoldPlan};
use echoguide_core::ingest::scores::assign_continuous_scores;
use echoguide_core::ingest::sweep::{parse_sweep_manifest, parse_sweep_manifest_str, SweepRecording};
use echoguide_core::ingest::AugmentRanges;
use echoguide_core::landmarks::{LandmarkErrorConfig, LandmarkErrorReport};
use echoguide_core::pose::{FoldReport, ScorerArchitecture, ScorerMode};
use echoguide_core::protocol::ResultMessage;
use echoguide_core::synthetic::{landmark_frames, lvef_clip, sweep_frames, sweep_labels};
use echoguide_core::{Frame, PoseCategory};
use echoguide_nn::adapter::{
    evaluate_adapter, train_adapter_scorer, AdapterConfig, AdapterScorer, AdapterTrainConfig, Backbone, BackboneConfig,
};
use echoguide_nn::landmark::{
    evaluate_detector, train_landmark_detector, LandmarkDetector, LandmarkModelConfig, LandmarkSample,
    LandmarkTrainConfig,
};
use echoguide_nn::pose::{
    evaluate_pose_regressor, texture_samples, train_pose_regressor, PoseModelConfig, PoseRegressor, PoseSample,
    PoseTrainConfig,
};
use echoguide_nn::train::TrainLog;
use echoguide_nn::video::{lvef_mae, train_lvef_estimator, LvefModel, LvefModelConfig, LvefSample, LvefTrainConfig};
use serde::Serialize;
use tokio::net::TcpListener;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::models::{CascadeModels, PoseModel};
use crate::server::{serve as serve_connections, ModelFactory, ServerConfig};
use crate::session::Session;

const BLOB_SIGMA: f64 = 2.0;

fn augment(cfg: &RunConfig) -> Option<AugmentRanges> {
    cfg.augment.then(AugmentRanges::default)
}

fn resize(frame: &Frame, hw: Option<[usize; 2]>) -> Frame {
    match hw {
        Some([h, w]) if [frame.height(), frame.width()] != [h, w] => frame.resize_nearest(w, h),
        _ => frame.clone(),
    }
}

fn synthetic_hw(cfg: &RunConfig) -> [usize; 2] {
    cfg.input_hw.unwrap_or([cfg.synthetic_size, cfg.synthetic_size])
}

/// EchoNet clips of one split with their frames loaded, plus annotations.
fn echonet_split(cfg: &RunConfig, split: Split) -> Result<Option<(Vec<EchoNetClip>, Vec<LandmarkAnnotation>)>> {
    let Some(paths) = &cfg.echonet else {
        return Ok(None);
    };
    let (clips, mut annotations) = parse_echonet_annotations(&paths.file_table, &paths.tracing_table)?;
    if let Some(aux) = &paths.aux_table {
        annotations = merge_annotations(annotations, parse_auxiliary_landmarks(aux)?)?;
    }
    let mut selected = Vec::new();
    for mut clip in clips.into_iter().filter(|c| c.split == split) {
        clip.load_frames(&paths.video_root)?;
        selected.push(clip);
    }
    Ok(Some((selected, annotations)))
}

/// Annotated frames of one split, or synthetic hearts without EchoNet.
pub fn landmark_data(cfg: &RunConfig, split: Split, seed: u64) -> Result<Vec<LandmarkSample>> {
    let Some((clips, annotations)) = echonet_split(cfg, split)? else {
        let [h, w] = synthetic_hw(cfg);
        let offset = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        return Ok(landmark_frames(cfg.synthetic_samples, w, h, seed.wrapping_mul(3) + offset)
            .into_iter()
            .map(|(frame, annotation)| LandmarkSample { frame, annotation })
            .collect());
    };
    let mut samples = Vec::new();
    for a in annotations {
        let Some(clip) = clips.iter().find(|c| c.clip_id == a.clip_id) else {
            continue;
        };
        let frame = clip.frames.get(a.frame_index).ok_or_else(|| {
            Error::Config(format!("{} has no frame {}", a.clip_id, a.frame_index))
        })?;
        samples.push(LandmarkSample {
            frame: frame.clone(),
            annotation: a,
        });
    }
    Ok(samples)
}

pub fn train_landmarks(cfg: &RunConfig, out: &Path, seed: u64) -> Result<TrainLog> {
    let train = landmark_data(cfg, Split::Train, seed)?;
    let val = landmark_data(cfg, Split::Val, seed)?;
    let first = train
        .first()
        .ok_or_else(|| Error::Config("no annotated training frames".into()))?;
    let (h, w) = (first.frame.height(), first.frame.width());
    let model_cfg = LandmarkModelConfig::new(cfg.encoder_depth.unwrap_or(34), cfg.width_multiplier, h, w);
    let det = LandmarkDetector::new(model_cfg, seed, &Device::Cpu)?;
    if let Some(path) = &cfg.pretrained_encoder {
        let n = det.load_pretrained_encoder(path)?;
        tracing::info!(tensors = n, "loaded pretrained encoder");
    }
    let train_cfg = LandmarkTrainConfig {
        epochs: cfg.epochs.unwrap_or(20),
        batch_size: cfg.batch_size.unwrap_or(8),
        learning_rate: cfg.learning_rate.unwrap_or(1e-3),
        seed,
        augment: augment(cfg),
        max_steps: cfg.max_steps,
        log_every: 10,
    };
    Ok(train_landmark_detector(&det, &train, &val, &train_cfg, Some(out))?)
}

pub fn eval_landmarks(cfg: &RunConfig, checkpoint: &Path, seed: u64) -> Result<LandmarkErrorReport> {
    let det = LandmarkDetector::load(checkpoint, &Device::Cpu)?;
    let test = landmark_data(cfg, Split::Test, seed)?;
    Ok(evaluate_detector(&det, &test, &LandmarkErrorConfig::default(), 16)?)
}

/// Landmark source for scorer inputs: a trained detector when configured,
/// otherwise an untrained one (only useful for wiring checks).
fn scorer_detector(cfg: &RunConfig, [h, w]: [usize; 2], seed: u64) -> Result<LandmarkDetector> {
    match &cfg.landmark_checkpoint {
        Some(p) => Ok(LandmarkDetector::load(p, &Device::Cpu)?),
        None => {
            tracing::warn!("no landmark_checkpoint; landmark channels come from an untrained detector");
            Ok(LandmarkDetector::new(LandmarkModelConfig::new(18, 0.0625, h, w), seed, &Device::Cpu)?)
        }
    }
}

fn build_samples(
    mode: ScorerMode,
    frames: &[Frame],
    scores: &[f64],
    categories: &[PoseCategory],
    detector: Option<&LandmarkDetector>,
) -> Result<Vec<PoseSample>> {
    let mut out = Vec::with_capacity(frames.len());
    for ((frame, &score), &category) in frames.iter().zip(scores).zip(categories) {
        let landmarks = match detector {
            Some(d) => Some(d.predict(&[frame])?.pop().expect("one frame")),
            None => None,
        };
        out.push(PoseSample::new(mode, frame, landmarks.as_deref(), BLOB_SIGMA, score, category)?);
    }
    Ok(out)
}

/// Train, validation and test samples of one fold.
pub struct PoseData {
    pub fold: Option<FoldPlan>,
    pub train: Vec<PoseSample>,
    pub val: Vec<PoseSample>,
    pub test: Vec<PoseSample>,
}

fn recording_samples(
    cfg: &RunConfig,
    mode: ScorerMode,
    recordings: &[&SweepRecording],
    detector: Option<&LandmarkDetector>,
) -> Result<Vec<PoseSample>> {
    let mut out = Vec::new();
    for rec in recordings {
        let frames: Vec<Frame> = rec.frames.iter().map(|f| resize(f, cfg.input_hw)).collect();
        let scores = assign_continuous_scores(&rec.frame_categories);
        out.extend(build_samples(mode, &frames, &scores, &rec.frame_categories, detector)?);
    }
    Ok(out)
}

pub fn pose_data(cfg: &RunConfig, mode: ScorerMode, seed: u64) -> Result<PoseData> {
    let Some(manifest) = &cfg.sweeps else {
        let hw = synthetic_hw(cfg);
        let n = cfg.synthetic_samples;
        let split = |s: u64| -> Result<Vec<PoseSample>> {
            let base = texture_samples(n, hw[0], s);
            if !mode.uses_landmarks() && hw[0] == hw[1] {
                return Ok(base);
            }
            let frames: Vec<Frame> = base.iter().map(|p| resize(&p.channels[0], Some(hw))).collect();
            let scores: Vec<f64> = base.iter().map(|p| p.score).collect();
            let cats: Vec<PoseCategory> = base.iter().map(|p| p.category).collect();
            let det = if mode.uses_landmarks() {
                Some(scorer_detector(cfg, hw, seed)?)
            } else {
                None
            };
            build_samples(mode, &frames, &scores, &cats, det.as_ref())
        };
        return Ok(PoseData {
            fold: None,
            train: split(seed.wrapping_mul(3))?,
            val: split(seed.wrapping_mul(3) + 1)?,
            test: split(seed.wrapping_mul(3) + 2)?,
        });
    };
    let recordings = parse_sweep_manifest(manifest)?;
    let plans = make_subject_folds(recordings.iter().map(|r| r.subject_id.clone()), seed)?;
    let plan = plans
        .get(cfg.fold)
        .cloned()
        .ok_or_else(|| Error::Config(format!("fold {} out of range 0..{}", cfg.fold, plans.len())))?;
    let detector = if mode.uses_landmarks() {
        let first = &recordings[0].frames[0];
        let hw = cfg.input_hw.unwrap_or([first.height(), first.width()]);
        Some(scorer_detector(cfg, hw, seed)?)
    } else {
        None
    };
    let pick = |subjects: &BTreeSet<String>| -> Result<Vec<PoseSample>> {
        let recs: Vec<&SweepRecording> = recordings.iter().filter(|r| subjects.contains(&r.subject_id)).collect();
        recording_samples(cfg, mode, &recs, detector.as_ref())
    };
    Ok(PoseData {
        train: pick(&plan.train_subjects)?,
        val: pick(&plan.val_subjects)?,
        test: pick(&plan.test_subjects)?,
        fold: Some(plan),
    })
}

fn input_hw_of(samples: &[PoseSample]) -> Result<[usize; 2]> {
    let f = samples
        .first()
        .map(|s| &s.channels[0])
        .ok_or_else(|| Error::Config("no pose training frames".into()))?;
    Ok([f.height(), f.width()])
}

fn backbone(cfg: &RunConfig, seed: u64) -> Result<Backbone> {
    Ok(match &cfg.backbone {
        Some(p) => Backbone::from_file(BackboneConfig::tiny(), p, &Device::Cpu)?,
        None => Backbone::new(BackboneConfig::tiny(), seed, &Device::Cpu)?,
    })
}

pub fn train_pose(cfg: &RunConfig, mode: ScorerMode, out: &Path, seed: u64) -> Result<TrainLog> {
    let data = pose_data(cfg, mode, seed)?;
    let [h, w] = input_hw_of(&data.train)?;
    let epochs = cfg.epochs.unwrap_or(100);
    let batch_size = cfg.batch_size.unwrap_or(32);
    match cfg.architecture {
        ScorerArchitecture::Regression => {
            let mut model_cfg = PoseModelConfig::new(mode, cfg.width_multiplier, h, w);
            model_cfg.encoder_depth = cfg.encoder_depth.unwrap_or(18);
            let model = PoseRegressor::new(model_cfg, seed, &Device::Cpu)?;
            let train_cfg = PoseTrainConfig {
                epochs,
                batch_size,
                learning_rate: cfg.learning_rate.unwrap_or(1e-3),
                seed,
                augment: augment(cfg),
                log_every: 10,
            };
            Ok(train_pose_regressor(&model, &data.train, &data.val, &train_cfg, Some(out))?)
        }
        ScorerArchitecture::Adapter => {
            let mut model_cfg = AdapterConfig::new(mode, cfg.width_multiplier, h, w);
            model_cfg.encoder_depth = cfg.encoder_depth.unwrap_or(18);
            let model = AdapterScorer::new(model_cfg, backbone(cfg, seed)?, seed + 1)?;
            let mut train_cfg = AdapterTrainConfig {
                epochs,
                batch_size,
                seed,
                augment: augment(cfg),
                ..Default::default()
            };
            if let Some(lr) = cfg.learning_rate {
                train_cfg.schedule.max_lr = lr;
            }
            Ok(train_adapter_scorer(&model, &data.train, &data.val, &train_cfg, Some(out))?)
        }
    }
}

pub fn eval_pose(cfg: &RunConfig, checkpoint: &Path, mode: Option<ScorerMode>, seed: u64) -> Result<FoldReport> {
    let model = PoseModel::load(checkpoint, &Device::Cpu)?;
    if let Some(m) = mode {
        if m != model.mode() {
            return Err(Error::Config(format!(
                "--mode {m} but the checkpoint was trained with {}",
                model.mode()
            )));
        }
    }
    let data = pose_data(cfg, model.mode(), seed)?;
    let fold = data.fold.as_ref().map_or(0, |f| f.fold_index);
    let result = match &model {
        PoseModel::Regression(m) => evaluate_pose_regressor(m, fold, &data.test, 32)?,
        PoseModel::Adapter(m) => evaluate_adapter(m, fold, &data.test, 32)?,
    };
    Ok(FoldReport::new(&result, model.mode(), model.architecture()))
}

fn lvef_data(cfg: &RunConfig, model_cfg: &LvefModelConfig, split: Split, seed: u64) -> Result<Vec<LvefSample>> {
    let [h, w] = model_cfg.input_hw;
    let Some((clips, _)) = echonet_split(cfg, split)? else {
        let n = cfg.synthetic_samples.max(2);
        return Ok((0..n)
            .map(|i| {
                let ef = 20.0 + 60.0 * i as f64 / (n - 1) as f64;
                LvefSample {
                    clip_id: format!("synthetic-{i}"),
                    frames: lvef_clip(ef, model_cfg.sampling.length, w, h, seed.wrapping_add(i as u64)),
                    ef,
                }
            })
            .collect());
    };
    let span = model_cfg.sampling.length * model_cfg.sampling.stride.max(1);
    Ok(clips
        .into_iter()
        .filter(|c| !c.frames.is_empty())
        .map(|c| LvefSample {
            frames: c.frames.iter().take(span).map(|f| resize(f, Some([h, w]))).collect(),
            clip_id: c.clip_id,
            ef: c.ef_label,
        })
        .collect())
}

#[derive(Debug, Serialize)]
pub struct LvefTrainSummary {
    pub log: TrainLog,
    pub train_mae: f64,
    pub val_mae: Option<f64>,
}

pub fn train_lvef(cfg: &RunConfig, out: &Path, seed: u64) -> Result<LvefTrainSummary> {
    let model_cfg = match (&cfg.echonet, cfg.input_hw) {
        (Some(_), hw) => LvefModelConfig {
            input_hw: hw.unwrap_or([112, 112]),
            ..Default::default()
        },
        (None, _) => {
            let [h, w] = synthetic_hw(cfg);
            LvefModelConfig::tiny(h, w, 16)
        }
    };
    let train = lvef_data(cfg, &model_cfg, Split::Train, seed)?;
    let val = lvef_data(cfg, &model_cfg, Split::Val, seed + 1)?;
    let model = LvefModel::new(model_cfg, seed, &Device::Cpu)?;
    let train_cfg = LvefTrainConfig {
        epochs: cfg.epochs.unwrap_or(100),
        batch_size: cfg.batch_size.unwrap_or(8),
        learning_rate: cfg.learning_rate.unwrap_or(1e-3),
        seed,
        max_steps: cfg.max_steps,
        log_every: 10,
    };
    let log = train_lvef_estimator(&model, &train, &train_cfg, Some(out))?;
    Ok(LvefTrainSummary {
        train_mae: lvef_mae(&model, &train)?,
        val_mae: if val.is_empty() { None } else { Some(lvef_mae(&model, &val)?) },
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepScores {
    pub subject_id: String,
    pub sweep_id: String,
    pub labels: Vec<PoseCategory>,
    pub scores: Vec<f64>,
}

/// Continuous regression targets of every sweep in the manifest. Only the
/// manifest is read, not the frames.
pub fn score_sweep(cfg: &RunConfig) -> Result<Vec<SweepScores>> {
    let path = cfg
        .sweeps
        .as_ref()
        .ok_or_else(|| Error::Config("score-sweep needs `sweeps` in the config".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_sweep_manifest_str(&text)?
        .into_iter()
        .map(|e| SweepScores {
            scores: assign_continuous_scores(&e.labels),
            subject_id: e.subject_id,
            sweep_id: e.sweep_id,
            labels: e.labels,
        })
        .collect())
}

pub fn folds(cfg: &RunConfig, seed: u64) -> Result<Vec<FoldPlan>> {
    let subjects: Vec<String> = match &cfg.sweeps {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_sweep_manifest_str(&text)?.into_iter().map(|e| e.subject_id).collect()
        }
        None => (1..=9).map(|i| format!("subject-{i:02}")).collect(),
    };
    Ok(make_subject_folds(subjects, seed)?)
}

/// Frame sequences to run through the cascade, with their frame rates.
fn infer_inputs(cfg: &RunConfig, seed: u64) -> Result<Vec<(String, f64, Vec<Frame>, Option<Vec<PoseCategory>>)>> {
    let Some(input) = &cfg.input else {
        let [h, w] = synthetic_hw(cfg);
        let labels = sweep_labels(40, 30, 30);
        return Ok(vec![(
            "synthetic".into(),
            cfg.fps,
            sweep_frames(&labels, w, h, seed),
            Some(labels),
        )]);
    };
    if input.is_dir() {
        let frames = load_frame_dir(input)?;
        return Ok(vec![(input.display().to_string(), cfg.fps, frames, None)]);
    }
    Ok(parse_sweep_manifest(input)?
        .into_iter()
        .map(|r| (r.sweep_id, r.fps, r.frames, Some(r.frame_categories)))
        .collect())
}

fn load_models(cfg: &RunConfig, checkpoint: Option<&Path>, mode: ScorerMode, hw: [usize; 2], seed: u64) -> Result<CascadeModels> {
    match checkpoint {
        Some(dir) => CascadeModels::load(dir, &Device::Cpu),
        None => {
            let _ = cfg;
            CascadeModels::synthetic(hw, mode, seed)
        }
    }
}

/// Run the cascade over the configured input, writing one result message
/// per line to `out`. Returns the overall throughput.
pub fn infer(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    mode: ScorerMode,
    seed: u64,
    out: &mut dyn Write,
) -> Result<ThroughputStats> {
    let inputs = infer_inputs(cfg, seed)?;
    let mut busy = Duration::ZERO;
    let mut frames_done = 0;
    for (name, fps, frames, truth) in inputs {
        let Some(first) = frames.first() else {
            continue;
        };
        let hw = cfg.input_hw.unwrap_or([first.height(), first.width()]);
        let mut session = Session::new(name.clone(), load_models(cfg, checkpoint, mode, hw, seed)?, fps)?;
        let hw = session.models().input_hw();
        let start = Instant::now();
        for (i, f) in frames.iter().enumerate() {
            let r = session.process_frame(i, &resize(f, Some(hw)))?;
            let mut msg = ResultMessage::from_result(&name, &r);
            msg.truth = truth.as_ref().map(|t| t[i]);
            let line = serde_json::to_string(&msg).expect("result messages serialize");
            writeln!(out, "{line}").map_err(|e| Error::io("<output>", e))?;
        }
        busy += start.elapsed();
        frames_done += frames.len();
    }
    if frames_done == 0 {
        return Err(Error::Config("no frames to process".into()));
    }
    Ok(ThroughputStats::new(frames_done, busy, timer_resolution()))
}

pub async fn serve(cfg: &RunConfig, checkpoint: Option<&Path>, mode: ScorerMode, port: u16, seed: u64) -> Result<()> {
    let factory: ModelFactory = match checkpoint {
        Some(dir) => {
            let dir = dir.to_path_buf();
            CascadeModels::load(&dir, &Device::Cpu)?;
            Arc::new(move || CascadeModels::load(&dir, &Device::Cpu))
        }
        None => {
            let hw = synthetic_hw(cfg);
            Arc::new(move || CascadeModels::synthetic(hw, mode, seed))
        }
    };
    let addr = format!("{}:{port}", cfg.host);
    let listener = TcpListener::bind(&addr).await.map_err(|e| Error::io(&addr, e))?;
    let local = listener.local_addr().map_err(|e| Error::io(&addr, e))?;
    tracing::info!(%local, "serving");
    eprintln!("listening on {local}");
    let config = ServerConfig {
        live_fps: cfg.fps,
        log_dir: cfg.log_dir.clone(),
    };
    serve_connections(listener, factory, config)
        .await
        .map_err(|e| Error::io(&addr, e))
}

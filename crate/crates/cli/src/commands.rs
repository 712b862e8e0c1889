use std::collections::VecDeque;
use std::fs;
use std::io::{self, StdoutLock};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread;
use std::time::Instant;

use insmos::config::ModelConfig;
use insmos::dataio::{
    frame_file, previous_in_current, read_boxes, read_confidences, read_labels, read_scan, window_poses, write_boxes,
    write_confidences, write_labels, write_predictions, write_sequence, FrameBoxes, SequenceManifest,
};
use insmos::geometry::{PointClass, Pose, Scan};
use insmos::harness::{
    confusion, generate_scene, iou, mean_loss, probe_frames, train_toy, training_frames, ConfusionCounts, FrameTimings,
    JsonLines, SceneSpec,
};
use insmos::network::{align_window, init_params, pipeline_forward, prepare_frame, Checkpoint, ForwardOutput, MovingLabels, Params};
use insmos::refinement::{refine as refine_frame, RefinementState};
use insmos::{Error, Result};
use serde::Serialize;

use crate::options::{BenchArgs, EvalArgs, InferArgs, RefineArgs, SynthArgs, TrainArgs};

fn stdout_lines() -> JsonLines<StdoutLock<'static>> {
    JsonLines::new(io::stdout().lock())
}

fn emit<R: Serialize>(out: &mut JsonLines<StdoutLock<'static>>, record: &R) -> Result<()> {
    out.write(record).map_err(|e| Error::io("<stdout>", e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn load_params(cfg: &ModelConfig, checkpoint: &Path) -> Result<Params<f32>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different quantization or network configuration",
            checkpoint.display()
        )));
    }
    let mut params = init_params(&cfg.network);
    ckpt.load_into(&mut params)?;
    Ok(params)
}

fn check_quantization(manifest: &SequenceManifest, cfg: &ModelConfig) -> Result<()> {
    match &manifest.quantization {
        Some(q) if *q != cfg.quantization => Err(Error::InvalidConfig(format!(
            "sequence declares {q:?} but the model uses {:?}",
            cfg.quantization
        ))),
        _ => Ok(()),
    }
}

/// Reads scans on a separate thread, at most `depth` ahead of the consumer.
fn scan_reader(paths: Vec<PathBuf>, depth: usize) -> Receiver<Result<Scan>> {
    let (tx, rx) = sync_channel(depth.max(1));
    thread::spawn(move || {
        for p in paths {
            if tx.send(read_scan(&p)).is_err() {
                break;
            }
        }
    });
    rx
}

struct FrameRun {
    output: ForwardOutput<f32>,
    quantize_ms: f64,
}

/// `window[0]` is the current scan of frame `f`.
fn forward_frame(
    params: &Params<f32>,
    cfg: &ModelConfig,
    window: &[Scan],
    relatives: &[Pose],
    f: usize,
) -> Result<FrameRun> {
    let t = Instant::now();
    let poses = window_poses(relatives, f, window.len());
    let aligned = align_window(window, &poses)?;
    let input = prepare_frame(&aligned, &cfg.quantization)?;
    let quantize_ms = ms(t);
    let output = pipeline_forward(params, &cfg.network, &cfg.decode, &input)?;
    if output.logits.logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure {
            step: f,
            detail: format!("non-finite logits in frame {f}"),
        });
    }
    Ok(FrameRun { output, quantize_ms })
}

fn timings(run: &FrameRun, refine_ms: f64) -> FrameTimings {
    let t = &run.output.timings;
    FrameTimings {
        quantize_ms: run.quantize_ms,
        motion_ms: t.motion_ms,
        instance_ms: t.instance_ms,
        decode_ms: t.decode_ms,
        fusion_ms: t.fusion_ms,
        refine_ms,
    }
}

#[derive(Serialize)]
struct SynthRecord {
    sequence: PathBuf,
    seed: u64,
    frames: usize,
    points: usize,
    moving_points: usize,
    objects: usize,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mapping = a.mapping.load()?;
    let mut out = stdout_lines();
    for i in 0..a.scenes {
        let defaults = SceneSpec::default();
        let spec = SceneSpec {
            n_frames: a.frames,
            seed: a.seed + i as u64,
            n_static_objects: a.static_objects.unwrap_or(defaults.n_static_objects),
            n_moving_objects: a.moving_objects.unwrap_or(defaults.n_moving_objects),
            ..defaults
        };
        let scene = generate_scene(&spec)?;
        let dir = a.out.join(format!("{i:03}"));
        create_dir(&dir)?;
        write_sequence(&dir, &scene, &mapping)?;
        let labels = (0..scene.len()).flat_map(|f| scene.labels(f).iter());
        emit(
            &mut out,
            &SynthRecord {
                sequence: dir.clone(),
                seed: spec.seed,
                frames: scene.len(),
                points: scene.scans.iter().map(Scan::len).sum(),
                moving_points: labels.filter(|l| **l == PointClass::Moving).count(),
                objects: scene.objects.len(),
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    training_frames: usize,
    initial_loss: f64,
    final_loss: f64,
    checkpoint: PathBuf,
    seconds: f64,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve(None)?;
    if let Some(s) = a.steps {
        cfg.training.steps = s;
    }
    if let Some(lr) = a.learning_rate {
        cfg.training.learning_rate = lr;
    }
    if let Some(seed) = a.seed {
        cfg.training.seed = seed;
        cfg.network.seed = seed;
    }
    cfg.validate()?;
    let started = Instant::now();
    let scenes = (0..a.scenes)
        .map(|i| {
            generate_scene(&SceneSpec {
                n_frames: a.frames,
                seed: a.scene_seed + i as u64,
                ..SceneSpec::default()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let frames = training_frames(&scenes, &cfg)?;
    let probe = probe_frames(&frames, 20);
    let mut params: Params<f32> = init_params(&cfg.network);
    let initial = mean_loss(&params, &cfg, &probe)?;

    let mut out = stdout_lines();
    let mut write_err = None;
    train_toy(&mut params, &cfg, &frames, |r| {
        if write_err.is_none() {
            write_err = out.write(r).err();
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io("<stdout>", e));
    }
    let last = mean_loss(&params, &cfg, &probe)?;

    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    Checkpoint::from_params(&params, cfg.hash()).save(&a.out)?;
    cfg.save(&a.out.with_extension("toml"))?;
    emit(
        &mut out,
        &TrainSummary {
            steps: cfg.training.steps,
            training_frames: frames.len(),
            initial_loss: initial.l_total,
            final_loss: last.l_total,
            checkpoint: a.out,
            seconds: started.elapsed().as_secs_f64(),
        },
    )
}

#[derive(Serialize)]
struct InferRecord {
    frame: usize,
    points: usize,
    moving: usize,
    instances: usize,
    timings: FrameTimings,
}

pub fn infer(a: InferArgs) -> Result<()> {
    let manifest = SequenceManifest::load(&a.manifest)?;
    let cfg = a.config.resolve(Some(&a.checkpoint))?;
    check_quantization(&manifest, &cfg)?;
    let mapping = a.mapping.load()?;
    let params = load_params(&cfg, &a.checkpoint)?;
    let relatives = manifest.relative_poses()?;

    let pred_dir = a.out.join("predictions");
    let conf_dir = a.out.join("confidence");
    create_dir(&pred_dir)?;
    create_dir(&conf_dir)?;

    let reader = scan_reader((0..manifest.frames).map(|f| manifest.scan_path(f)).collect(), a.prefetch);
    let mut window: VecDeque<Scan> = VecDeque::new();
    let mut boxes = FrameBoxes::new();
    let mut out = stdout_lines();
    for f in 0..manifest.frames {
        let scan = reader
            .recv()
            .map_err(|_| Error::InvalidConfig("scan reader stopped early".into()))??;
        window.push_front(scan);
        window.truncate(cfg.quantization.n_scans);
        let run = forward_frame(&params, &cfg, window.make_contiguous(), &relatives, f)?;
        let labels = &run.output.labels;
        write_predictions(&frame_file(&pred_dir, f, "label"), labels, &mapping)?;
        write_confidences(&frame_file(&conf_dir, f, "conf"), &labels.moving_confidence)?;
        emit(
            &mut out,
            &InferRecord {
                frame: f,
                points: labels.len(),
                moving: labels.labels.iter().filter(|l| **l == PointClass::Moving).count(),
                instances: run.output.instances.len(),
                timings: timings(&run, 0.0),
            },
        )?;
        boxes.insert(f, run.output.instances);
    }
    write_boxes(&a.out.join("boxes.txt"), &boxes)
}

#[derive(Serialize)]
struct RefineRecord {
    frame: usize,
    points: usize,
    moving_before: usize,
    moving_after: usize,
    instances: usize,
    moving_instances: usize,
    skipped_frames: usize,
    refine_ms: f64,
}

fn prediction_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("predictions");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn count_moving(labels: &[PointClass]) -> usize {
    labels.iter().filter(|l| **l == PointClass::Moving).count()
}

pub fn refine(a: RefineArgs) -> Result<()> {
    let manifest = SequenceManifest::load(&a.manifest)?;
    let cfg = a.config.resolve(None)?;
    let mapping = a.mapping.load()?;
    let relatives = manifest.relative_poses()?;
    let boxes = read_boxes(&a.boxes.clone().unwrap_or_else(|| a.predictions.join("boxes.txt")))?;
    let pred_dir = prediction_dir(&a.predictions);
    let conf_dir = a.predictions.join("confidence");
    let out_dir = a.out.join("predictions");
    create_dir(&out_dir)?;

    let mut state = RefinementState::new();
    let mut out = stdout_lines();
    for f in 0..manifest.frames {
        let scan = read_scan(&manifest.scan_path(f))?;
        let label_path = frame_file(&pred_dir, f, "label");
        let labels = read_labels(&label_path, &mapping)?;
        if labels.len() != scan.len() {
            return Err(Error::malformed(
                &label_path,
                "end of file",
                format!("{} labels for {} points", labels.len(), scan.len()),
            ));
        }
        let mut predicted = MovingLabels::from_labels(labels);
        let conf_path = frame_file(&conf_dir, f, "conf");
        if conf_path.is_file() {
            let conf = read_confidences(&conf_path)?;
            if conf.len() != scan.len() {
                return Err(Error::malformed(&conf_path, "end of file", "confidence count differs from point count"));
            }
            predicted.moving_confidence = conf;
        }
        let instances = boxes.get(&f).cloned().unwrap_or_default();
        let t = Instant::now();
        let pose = previous_in_current(&relatives, f);
        let refined = refine_frame(&predicted, &instances, &scan, pose.as_ref(), &mut state, &cfg.refinement)?;
        let refine_ms = ms(t);
        write_labels(&frame_file(&out_dir, f, "label"), &refined.labels, &mapping)?;
        emit(
            &mut out,
            &RefineRecord {
                frame: f,
                points: scan.len(),
                moving_before: count_moving(&predicted.labels),
                moving_after: count_moving(&refined.labels),
                instances: instances.len(),
                moving_instances: refined.moving_flags.iter().filter(|m| **m).count(),
                skipped_frames: refined.skipped_frames,
                refine_ms,
            },
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    frame: usize,
    #[serde(flatten)]
    counts: ConfusionCounts,
}

#[derive(Serialize)]
struct EvalSummary {
    frames: usize,
    #[serde(flatten)]
    counts: ConfusionCounts,
    iou: f64,
}

fn label_frames(dir: &Path) -> Result<usize> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut count = 0;
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        if e.path().extension().is_some_and(|x| x == "label") {
            count += 1;
        }
    }
    Ok(count)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mapping = a.mapping.load()?;
    let (gt_dir, frames) = match (&a.manifest, &a.labels) {
        (Some(m), _) => {
            let m = SequenceManifest::load(m)?;
            let dir = m
                .labels
                .as_ref()
                .map(|d| m.root.join(d))
                .ok_or_else(|| Error::InvalidConfig("the manifest lists no ground-truth labels".into()))?;
            (dir, m.frames)
        }
        (None, Some(dir)) => (dir.clone(), label_frames(dir)?),
        (None, None) => unreachable!("clap requires one ground-truth source"),
    };
    let pred_dir = prediction_dir(&a.predictions);
    let mut total = ConfusionCounts::default();
    let mut out = stdout_lines();
    for f in 0..frames {
        let gt = read_labels(&frame_file(&gt_dir, f, "label"), &mapping)?;
        let pred = read_labels(&frame_file(&pred_dir, f, "label"), &mapping)?;
        let counts = confusion(&pred, &gt)?;
        total += counts;
        emit(&mut out, &EvalRecord { frame: f, counts })?;
    }
    emit(
        &mut out,
        &EvalSummary {
            frames,
            counts: total,
            iou: iou(&total),
        },
    )
}

#[derive(Serialize)]
struct BenchRecord {
    repeat: usize,
    frame: usize,
    points: usize,
    instances: usize,
    timings: FrameTimings,
    total_ms: f64,
}

#[derive(Serialize)]
struct BenchSummary {
    frames: usize,
    mean: FrameTimings,
    mean_total_ms: f64,
}

fn total_ms(t: &FrameTimings) -> f64 {
    t.quantize_ms + t.motion_ms + t.instance_ms + t.decode_ms + t.fusion_ms + t.refine_ms
}

pub fn bench(a: BenchArgs) -> Result<()> {
    let cfg = a.config.resolve(a.checkpoint.as_deref())?;
    let params = match &a.checkpoint {
        Some(c) => load_params(&cfg, c)?,
        None => init_params(&cfg.network),
    };
    let (scans, relatives) = match &a.manifest {
        Some(m) => {
            let m = SequenceManifest::load(m)?;
            check_quantization(&m, &cfg)?;
            let scans = (0..m.frames).map(|f| read_scan(&m.scan_path(f))).collect::<Result<Vec<_>>>()?;
            (scans, m.relative_poses()?)
        }
        None => {
            let scene = generate_scene(&SceneSpec {
                n_frames: a.frames,
                seed: a.seed,
                ..SceneSpec::default()
            })?;
            let rel = (1..scene.len()).map(|f| scene.pose_to_previous(f).inverse()).collect();
            (scene.scans, rel)
        }
    };

    let mut out = stdout_lines();
    let mut sum = FrameTimings::default();
    let mut count = 0usize;
    for repeat in 0..a.repeat {
        let mut state = RefinementState::new();
        for f in 0..scans.len() {
            let lo = (f + 1).saturating_sub(cfg.quantization.n_scans);
            let window: Vec<Scan> = scans[lo..=f].iter().rev().cloned().collect();
            let run = forward_frame(&params, &cfg, &window, &relatives, f)?;
            let t = Instant::now();
            let pose = previous_in_current(&relatives, f);
            refine_frame(
                &run.output.labels,
                &run.output.instances,
                &scans[f],
                pose.as_ref(),
                &mut state,
                &cfg.refinement,
            )?;
            let tm = timings(&run, ms(t));
            for (s, v) in [
                (&mut sum.quantize_ms, tm.quantize_ms),
                (&mut sum.motion_ms, tm.motion_ms),
                (&mut sum.instance_ms, tm.instance_ms),
                (&mut sum.decode_ms, tm.decode_ms),
                (&mut sum.fusion_ms, tm.fusion_ms),
                (&mut sum.refine_ms, tm.refine_ms),
            ] {
                *s += v;
            }
            count += 1;
            emit(
                &mut out,
                &BenchRecord {
                    repeat,
                    frame: f,
                    points: scans[f].len(),
                    instances: run.output.instances.len(),
                    total_ms: total_ms(&tm),
                    timings: tm,
                },
            )?;
        }
    }
    let n = count.max(1) as f64;
    let mean = FrameTimings {
        quantize_ms: sum.quantize_ms / n,
        motion_ms: sum.motion_ms / n,
        instance_ms: sum.instance_ms / n,
        decode_ms: sum.decode_ms / n,
        fusion_ms: sum.fusion_ms / n,
        refine_ms: sum.refine_ms / n,
    };
    emit(
        &mut out,
        &BenchSummary {
            frames: count,
            mean_total_ms: total_ms(&mean),
            mean,
        },
    )
}

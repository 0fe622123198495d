use std::collections::HashSet;
use std::path::{Path, PathBuf};

use evtrack::augment::{
    build_affine, resample_labels, sample_params, temporal_affine, temporal_affine_labels, temporal_flip,
    transform_events, transform_labels, validity_mask, AffineParams, AugmentDraw, AugmentPolicy, FrameLabel,
};
use evtrack::binning::{bin_events, write_tensor, BinGrid, BinningMode, EventTensor};
use evtrack::detector::{assign_targets, decode, segment_loss, GridGeometry, PredGrid, EVAL_HEIGHT, EVAL_WIDTH};
use evtrack::events::{
    parse_predictions_csv, write_event_csv, write_label_csv, write_predictions_csv, EventSegment, LabelTrack,
    SensorGeometry,
};
use evtrack::metrics::{count_macs, measure_sparsity, p10, ActivationProfile, SparsityProfile};
use evtrack::network::{Model, ModelConfig, TemporalAlignment, Trace};
use evtrack::streaming::{stream_init, stream_step_with};
use ndarray::{s, Array4, ArrayD, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{pick, require, RunConfig};
use crate::error::{CliError, Result};
use crate::io;
use crate::{GridArgs, SensorArgs};

/// Streaming and offline outputs may differ by float reduction order only.
pub const EQUIVALENCE_TOLERANCE: f32 = 1e-4;

fn geometry(cfg: &RunConfig, sensor: &SensorArgs) -> Result<SensorGeometry> {
    Ok(SensorGeometry::new(
        pick(sensor.width, cfg.width),
        pick(sensor.height, cfg.height),
    )?)
}

struct Binning {
    grid: BinGrid,
    mode: BinningMode,
}

fn resolve_grid(
    cfg: &RunConfig,
    args: &GridArgs,
    geometry: SensorGeometry,
    default_t0: u64,
    last_time: u64,
) -> Result<Binning> {
    let dt = pick(args.dt_us, cfg.dt_us);
    let t0 = args.t0_us.or(cfg.t0_us).unwrap_or(default_t0);
    if dt == 0 {
        return Err(CliError::Usage("--dt-us must be positive".into()));
    }
    let frames = args
        .frames
        .or(cfg.frames)
        .unwrap_or_else(|| BinGrid::frames_to_cover(t0, dt, last_time.max(t0)));
    let grid = BinGrid::covering(geometry, pick(args.downsample, cfg.downsample), dt, t0, frames)?;
    let mode = match &args.mode {
        Some(m) => m.parse()?,
        None => cfg.mode()?,
    };
    Ok(Binning { grid, mode })
}

pub fn bin(cfg: &RunConfig, events: Option<PathBuf>, out: &Path, args: &GridArgs, flip: bool) -> Result<()> {
    let path = require(events, &cfg.events, "events")?;
    let geometry = geometry(cfg, &args.sensor)?;
    let segment = io::read_events(&path, geometry)?;
    let first = segment.events().first().map_or(0, |e| e.t);
    let last = segment.events().last().map_or(first, |e| e.t);
    let b = resolve_grid(cfg, args, geometry, first, last)?;
    let mut tensor = bin_events(&segment, &b.grid, b.mode)?;
    if flip {
        tensor = temporal_flip(&tensor, &[]).0;
    }
    io::write_bytes(out, &write_tensor(&tensor))
}

pub struct AugmentArgs {
    pub events: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub seed: Option<u64>,
    pub index: u64,
    pub identity: bool,
    pub label_period_us: Option<u64>,
    pub out_dir: PathBuf,
    pub sensor: SensorArgs,
}

#[derive(Serialize)]
struct AugmentRecord {
    seed: u64,
    index: u64,
    draw: AugmentDraw,
    /// Row-major 3x3 matrix acting on relative coordinates.
    matrix: [[f64; 3]; 3],
}

pub fn augment(cfg: &RunConfig, args: AugmentArgs) -> Result<()> {
    let geometry = geometry(cfg, &args.sensor)?;
    let events_path = require(args.events, &cfg.events, "events")?;
    let labels_path = require(args.labels, &cfg.labels, "labels")?;
    let segment = io::read_events(&events_path, geometry)?;
    let labels = io::read_labels(&labels_path)?;
    let policy: AugmentPolicy = match &args.policy {
        Some(p) => serde_json::from_str(&io::read_text(p)?).map_err(|e| CliError::Input {
            path: p.clone(),
            source: e.into(),
        })?,
        None => cfg.augment,
    };
    policy.validate()?;
    let seed = args.seed.unwrap_or(policy.seed);
    let draw = if args.identity {
        AugmentDraw {
            affine: AffineParams::IDENTITY,
            temporal_scale: 1.0,
            temporal_shift_us: 0.0,
            flip: false,
        }
    } else {
        sample_params(&policy, seed, args.index)
    };
    let a = build_affine(&draw.affine)?;
    let (scale, shift) = (draw.temporal_scale, draw.temporal_shift_us);

    let events = temporal_affine(&transform_events(&segment, &a), scale, shift)?;
    let mut moved = temporal_affine_labels(&transform_labels(&labels, &a, geometry).labels, scale, shift)?;
    if scale != 1.0 {
        let period = args.label_period_us.unwrap_or(cfg.dt_us as u64).max(1);
        if let (Some(first), Some(last)) = (moved.first_time(), moved.last_time()) {
            let times: Vec<u64> = (first..=last).step_by(period as usize).collect();
            moved = resample_labels(&moved, &times)?;
        }
    }
    let frame_labels: Vec<FrameLabel> = moved.samples().iter().map(FrameLabel::from).collect();
    let mask = validity_mask(&frame_labels, geometry);
    let mut mask_csv = String::from("t,valid");
    for (s, ok) in moved.samples().iter().zip(&mask) {
        mask_csv.push_str(&format!("\n{},{}", s.t, *ok as u8));
    }

    let m = a.matrix();
    let record = AugmentRecord {
        seed,
        index: args.index,
        draw,
        matrix: [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]]),
    };
    let dir = &args.out_dir;
    io::create_dir(dir)?;
    io::write_bytes(&dir.join("events.csv"), &write_event_csv(&events))?;
    io::write_bytes(&dir.join("labels.csv"), &write_label_csv(&moved))?;
    io::write_bytes(&dir.join("mask.csv"), mask_csv.as_bytes())?;
    io::write_bytes(&dir.join("params.json"), io::to_json(&record).as_bytes())
}

fn model_from(cfg: &RunConfig, dir: Option<PathBuf>) -> Result<Model> {
    match dir.or_else(|| cfg.model.clone()) {
        Some(d) => io::load_model_dir(&d),
        None => Ok(Model::seeded(cfg.model_config.clone(), cfg.seed)?),
    }
}

fn check_grid(model: &Model, grid: &BinGrid) -> Result<()> {
    let c = model.config();
    if (c.input_height, c.input_width) != (grid.height, grid.width) {
        return Err(CliError::Core(evtrack::Error::Shape(format!(
            "binned frames are {}x{} but the model expects {}x{}",
            grid.height, grid.width, c.input_height, c.input_width
        ))));
    }
    Ok(())
}

/// Runs the model over every frame, recording activations into `profile`.
fn run_model(model: &Model, tensor: &EventTensor, offline: bool, profile: &mut ActivationProfile) -> Result<Array4<f32>> {
    if offline {
        return Ok(model.forward_with(&tensor.data, profile, TemporalAlignment::Causal)?);
    }
    let mut state = stream_init(model);
    let frames = (0..tensor.frames())
        .map(|m| stream_step_with(model, &mut state, tensor.frame(m), profile))
        .collect::<evtrack::Result<Vec<_>>>()?;
    Ok(evtrack::network::layers::stack_frames(&frames)?)
}

pub struct InferArgs {
    pub model: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub offline: bool,
    pub stride: Option<usize>,
    pub labels: Option<PathBuf>,
    pub grid: GridArgs,
    pub out: Option<PathBuf>,
    pub profile_out: Option<PathBuf>,
    pub loss_out: Option<PathBuf>,
}

#[derive(Serialize)]
struct LossRecord {
    loss: f64,
    valid_frames: usize,
    lambda: f64,
}

pub fn infer(cfg: &RunConfig, args: InferArgs) -> Result<()> {
    let model = model_from(cfg, args.model)?;
    let geometry = geometry(cfg, &args.grid.sensor)?;
    let events_path = require(args.events, &cfg.events, "events")?;
    let segment = io::read_events(&events_path, geometry)?;
    if segment.is_empty() {
        return Err(CliError::Input {
            path: events_path,
            source: evtrack::Error::Domain("no events to run on".into()),
        });
    }
    let labels = match args.labels.or_else(|| cfg.labels.clone()) {
        Some(p) => Some(io::read_labels(&p)?),
        None => None,
    };
    let stride = pick(args.stride, cfg.stride);
    if stride == 0 {
        return Err(CliError::Usage("--stride must be positive".into()));
    }
    let first = labels
        .as_ref()
        .and_then(LabelTrack::first_time)
        .unwrap_or(segment.events()[0].t);
    let last = segment.events().last().unwrap().t.max(labels.as_ref().and_then(LabelTrack::last_time).unwrap_or(0));
    let b = resolve_grid(cfg, &args.grid, geometry, first, last)?;
    check_grid(&model, &b.grid)?;
    let tensor = bin_events(&segment, &b.grid, b.mode)?;

    let mut profile = ActivationProfile::new();
    let out = run_model(&model, &tensor, args.offline, &mut profile)?;
    let pred = PredGrid::new(out)?;
    let times = b.grid.frame_times();
    let cells = GridGeometry::from_config(model.config());
    let label_times: Option<HashSet<u64>> = labels
        .as_ref()
        .map(|l| l.samples().iter().map(|s| s.t).collect());
    let preds: Vec<_> = decode(&pred, &times, &cells)?
        .into_iter()
        .enumerate()
        .filter(|(m, p)| m % stride == 0 && label_times.as_ref().is_none_or(|lt| lt.contains(&p.t)))
        .map(|(_, p)| p)
        .collect();
    let csv = write_predictions_csv(&preds);
    match &args.out {
        Some(p) => io::write_bytes(p, &csv)?,
        None => println!("{}", String::from_utf8_lossy(&csv)),
    }

    if let Some(p) = &args.profile_out {
        io::emit_json(&measure_sparsity(&profile, model.config())?, Some(p))?;
    }
    if let (Some(p), Some(labels)) = (&args.loss_out, &labels) {
        let (lo, hi) = (labels.first_time().unwrap_or(0), labels.last_time().unwrap_or(0));
        let inside: Vec<u64> = times.iter().copied().filter(|t| (lo..=hi).contains(t)).collect();
        let resampled = resample_labels(labels, &inside)?;
        let mut frame_labels = Vec::with_capacity(times.len());
        for &t in &times {
            frame_labels.push(match resampled.get(t) {
                Some(s) => FrameLabel::from(s),
                None => FrameLabel { x: 0.0, y: 0.0, closed: true },
            });
        }
        let valid = validity_mask(&frame_labels, geometry);
        let points: Vec<(f64, f64)> = frame_labels
            .iter()
            .map(|l| (l.x / b.grid.dx as f64, l.y / b.grid.dy as f64))
            .collect();
        let target = assign_targets(&points, &valid, &cells)?;
        let loss = segment_loss(&pred, &target, &cfg.loss, Some(&profile))?;
        let record = LossRecord {
            loss,
            valid_frames: target.valid_frames(),
            lambda: cfg.loss.lambda,
        };
        io::emit_json(&record, Some(p))?;
    }
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    preds: &Path,
    labels: Option<PathBuf>,
    sensor: &SensorArgs,
    out: Option<&Path>,
) -> Result<()> {
    let geometry = geometry(cfg, sensor)?;
    let predictions = parse_predictions_csv(&io::read_bytes(preds)?).map_err(|source| CliError::Input {
        path: preds.into(),
        source,
    })?;
    let labels = io::read_labels(&require(labels, &cfg.labels, "labels")?)?;
    let eval_labels = labels.scaled(
        EVAL_WIDTH / geometry.width as f64,
        EVAL_HEIGHT / geometry.height as f64,
    );
    io::emit_json(&p10(&predictions, &eval_labels)?, out)
}

pub fn macs(cfg: &RunConfig, model: Option<PathBuf>, profile: Option<PathBuf>, out: Option<&Path>) -> Result<()> {
    let config: ModelConfig = match model.or_else(|| cfg.model.clone()) {
        Some(dir) => {
            let path = dir.join(io::MODEL_CONFIG);
            serde_json::from_str(&io::read_text(&path)?).map_err(|e| CliError::Input {
                path,
                source: e.into(),
            })?
        }
        None => cfg.model_config.clone(),
    };
    let sparsity: Option<SparsityProfile> = match &profile {
        Some(p) => Some(serde_json::from_str(&io::read_text(p)?).map_err(|e| CliError::Input {
            path: p.clone(),
            source: e.into(),
        })?),
        None => None,
    };
    io::emit_json(&count_macs(&config, sparsity.as_ref())?, out)
}

pub fn init_weights(cfg: &RunConfig, model_config: Option<PathBuf>, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let config: ModelConfig = match &model_config {
        Some(p) => serde_json::from_str(&io::read_text(p)?).map_err(|e| CliError::Input {
            path: p.clone(),
            source: e.into(),
        })?,
        None => cfg.model_config.clone(),
    };
    let model = Model::seeded(config, pick(seed, cfg.seed))?;
    io::save_model_dir(out_dir, &model)
}

pub struct VerifyArgs {
    pub model: Option<PathBuf>,
    pub events: Option<PathBuf>,
    pub grid: GridArgs,
    pub cuts: usize,
    pub seed: Option<u64>,
    pub mutate_centered: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct StageDeviation {
    pub stage: String,
    pub max_deviation: f32,
}

#[derive(Debug, Serialize)]
pub struct EquivalenceReport {
    pub pass: bool,
    pub tolerance: f32,
    pub max_deviation: f32,
    pub stages: Vec<StageDeviation>,
}

#[derive(Debug, Serialize)]
pub struct CausalityReport {
    pub pass: bool,
    pub alignment: String,
    pub cut_times: Vec<u64>,
    /// Cut times after which an earlier frame changed.
    pub violations: Vec<u64>,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub frames: usize,
    pub equivalence: EquivalenceReport,
    pub causality: CausalityReport,
}

fn max_abs_diff(a: &ArrayD<f32>, b: &ArrayD<f32>) -> f32 {
    a.iter().zip(b).fold(0f32, |m, (x, y)| m.max((x - y).abs()))
}

pub fn verify(cfg: &RunConfig, args: VerifyArgs) -> Result<()> {
    let model = model_from(cfg, args.model)?;
    let geometry = geometry(cfg, &args.grid.sensor)?;
    let events_path = require(args.events, &cfg.events, "events")?;
    let segment = io::read_events(&events_path, geometry)?;
    let first = segment.events().first().map_or(0, |e| e.t);
    let last = segment.events().last().map_or(first, |e| e.t);
    let b = resolve_grid(cfg, &args.grid, geometry, first, last)?;
    check_grid(&model, &b.grid)?;
    let alignment = if args.mutate_centered {
        TemporalAlignment::Centered
    } else {
        TemporalAlignment::Causal
    };
    let tensor = bin_events(&segment, &b.grid, b.mode)?;
    let frames = tensor.frames();

    let mut offline = Trace::default();
    let full = model.forward_with(&tensor.data, &mut offline, alignment)?;
    let mut state = stream_init(&model);
    let mut online: Vec<Vec<ArrayD<f32>>> = vec![Vec::new(); offline.stages.len()];
    for m in 0..frames {
        let mut step = Trace::default();
        stream_step_with(&model, &mut state, tensor.frame(m), &mut step)?;
        for (slot, (_, a)) in online.iter_mut().zip(step.stages) {
            slot.push(a);
        }
    }
    let stages: Vec<StageDeviation> = offline
        .stages
        .iter()
        .zip(&online)
        .map(|((name, whole), steps)| {
            let max_deviation = steps
                .iter()
                .enumerate()
                .map(|(m, a)| max_abs_diff(&whole.slice_axis(Axis(1), (m..m + 1).into()).to_owned(), a))
                .fold(0f32, f32::max);
            StageDeviation {
                stage: name.clone(),
                max_deviation,
            }
        })
        .collect();
    let max_deviation = stages.iter().map(|s| s.max_deviation).fold(0f32, f32::max);
    let equivalence = EquivalenceReport {
        pass: max_deviation <= EQUIVALENCE_TOLERANCE,
        tolerance: EQUIVALENCE_TOLERANCE,
        max_deviation,
        stages,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(pick(args.seed, cfg.seed));
    let span_end = b.grid.frame_time(frames - 1);
    let mut cut_times: Vec<u64> = (0..args.cuts).map(|_| rng.gen_range(b.grid.t0..=span_end)).collect();
    cut_times.sort_unstable();
    let mut violations = Vec::new();
    for &cut in &cut_times {
        let truncated: EventSegment = segment.truncated(cut);
        let partial = model.forward_with(&bin_events(&truncated, &b.grid, b.mode)?.data, &mut (), alignment)?;
        let settled = (0..frames).take_while(|&m| b.grid.frame_time(m) <= cut).count();
        if full.slice(s![.., ..settled, .., ..]) != partial.slice(s![.., ..settled, .., ..]) {
            violations.push(cut);
        }
    }
    let causality = CausalityReport {
        pass: violations.is_empty(),
        alignment: format!("{alignment:?}").to_lowercase(),
        cut_times,
        violations,
    };

    let report = VerifyReport {
        pass: equivalence.pass && causality.pass,
        frames,
        equivalence,
        causality,
    };
    io::emit_json(&report, args.out.as_deref())?;
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Verify(format!(
            "equivalence {} (max deviation {:e}), causality {} ({} of {} cuts violated)",
            if report.equivalence.pass { "passed" } else { "failed" },
            report.equivalence.max_deviation,
            if report.causality.pass { "passed" } else { "failed" },
            report.causality.violations.len(),
            report.causality.cut_times.len()
        )))
    }
}

//! CenterNet-style detector head, training-loss evaluation and decoding.
//!
//! The head output is a `(3, T, rows, cols)` grid. In every cell channel 0 is
//! the pupil probability and channels 1 and 2 are the pupil's x and y offset
//! within the cell, all after a sigmoid.
//!
//! Coordinates pass through four spaces: sensor pixels (480x640), binned
//! pixels (96x128 at downsample 5), grid cells (3x4 cells of 32 binned
//! pixels) and the 60x80 evaluation space. Conversions are proportional.

use ndarray::{s, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::PupilPrediction;
use crate::metrics::ActivationProfile;
use crate::network::layers::{
    group_norm_frames, relu_inplace, sigmoid_inplace, spatial_conv, temporal_conv_aligned,
};
use crate::network::{Head, ModelConfig, Tap, TemporalAlignment, HEAD_OUTPUTS};

pub const EVAL_WIDTH: f64 = 80.0;
pub const EVAL_HEIGHT: f64 = 60.0;

/// Post-sigmoid head output, `(3, T, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredGrid(pub Array4<f32>);

impl PredGrid {
    pub fn new(data: Array4<f32>) -> Result<Self> {
        if data.len_of(Axis(0)) != HEAD_OUTPUTS {
            return Err(Error::shape(format!(
                "prediction grid needs {HEAD_OUTPUTS} channels, has {}",
                data.len_of(Axis(0))
            )));
        }
        Ok(PredGrid(data))
    }

    pub fn frames(&self) -> usize {
        self.0.len_of(Axis(1))
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.0.len_of(Axis(2)), self.0.len_of(Axis(3)))
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.0
    }
}

pub fn head_forward(features: &Array4<f32>, head: &Head) -> Result<PredGrid> {
    PredGrid::new(head_forward_with(head, features, &mut (), TemporalAlignment::Causal)?)
}

pub(crate) fn head_forward_with(
    head: &Head,
    features: &Array4<f32>,
    tap: &mut dyn Tap,
    alignment: TemporalAlignment,
) -> Result<Array4<f32>> {
    let mut smoothed = group_norm_frames(
        &temporal_conv_aligned(features, &head.temporal, alignment)?,
        &head.group_norm,
    )?;
    relu_inplace(&mut smoothed);
    tap.observe("head.temporal", smoothed.view().into_dyn());
    let mut hidden = spatial_conv(&smoothed, &head.hidden)?;
    relu_inplace(&mut hidden);
    tap.observe("head.spatial", hidden.view().into_dyn());
    let mut out = spatial_conv(&hidden, &head.output)?;
    sigmoid_inplace(&mut out);
    tap.observe("head.output", out.view().into_dyn());
    Ok(out)
}

/// Cell layout of the detector grid over the binned input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    /// Binned pixels per cell.
    pub cell_height: f64,
    pub cell_width: f64,
    /// Binned input size.
    pub input_height: f64,
    pub input_width: f64,
}

impl GridGeometry {
    pub fn from_config(config: &ModelConfig) -> Self {
        let (rows, cols) = config.output_grid();
        GridGeometry {
            rows,
            cols,
            cell_height: config.input_height as f64 / rows as f64,
            cell_width: config.input_width as f64 / cols as f64,
            input_height: config.input_height as f64,
            input_width: config.input_width as f64,
        }
    }

    pub fn to_eval(&self, x: f64, y: f64) -> (f64, f64) {
        (
            x * EVAL_WIDTH / self.input_width,
            y * EVAL_HEIGHT / self.input_height,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTarget {
    pub valid: bool,
    /// `(row, col)` of the positive cell; `None` for invalid frames.
    pub cell: Option<(usize, usize)>,
    /// Offsets in `[0, 1)` within the positive cell.
    pub offset: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetGrid {
    pub rows: usize,
    pub cols: usize,
    pub frames: Vec<FrameTarget>,
}

impl TargetGrid {
    pub fn valid_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.valid).count()
    }
}

/// `points` are pupil positions in binned pixels, one per frame.
pub fn assign_targets(points: &[(f64, f64)], valid: &[bool], grid: &GridGeometry) -> Result<TargetGrid> {
    if points.len() != valid.len() {
        return Err(Error::shape(format!(
            "{} label points but {} validity flags",
            points.len(),
            valid.len()
        )));
    }
    let locate = |v: f64, cell: f64, n: usize| {
        let pos = v / cell;
        let idx = (pos.floor().max(0.0) as usize).min(n - 1);
        let frac = (pos - idx as f64).clamp(0.0, 1.0 - f64::EPSILON);
        (idx, frac)
    };
    let frames = points
        .iter()
        .zip(valid)
        .map(|(&(x, y), &ok)| {
            if !ok {
                return FrameTarget {
                    valid: false,
                    cell: None,
                    offset: (0.0, 0.0),
                };
            }
            let (col, ox) = locate(x, grid.cell_width, grid.cols);
            let (row, oy) = locate(y, grid.cell_height, grid.rows);
            FrameTarget {
                valid: true,
                cell: Some((row, col)),
                offset: (ox, oy),
            }
        })
        .collect();
    Ok(TargetGrid {
        rows: grid.rows,
        cols: grid.cols,
        frames,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    pub beta: f64,
    /// Weight of the activity regularizer.
    pub lambda: f64,
    /// Probabilities are clamped to `[eps, 1 - eps]` before taking logs.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 2.0,
            beta: 0.11,
            lambda: 0.0,
            eps: 1e-7,
        }
    }
}

/// Focal classification term for one cell. The negative branch carries a
/// leading minus so the loss stays non-negative.
pub fn focal_loss_cell(p_hat: f64, positive: bool, gamma: f64, eps: f64) -> f64 {
    let p = p_hat.clamp(eps, 1.0 - eps);
    if positive {
        -(1.0 - p).powf(gamma) * p.ln()
    } else {
        -p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Quadratic below `beta`, linear above; value and slope are continuous at the knee.
pub fn smooth_l1(pred: f64, target: f64, beta: f64) -> f64 {
    let d = (pred - target).abs();
    if d < beta {
        0.5 * d * d / beta
    } else {
        d - 0.5 * beta
    }
}

/// Sum over ReLU layers of the mean absolute activation.
pub fn activity_regularizer(profile: &ActivationProfile) -> f64 {
    profile
        .relu_layers()
        .map(|s| if s.count == 0 { 0.0 } else { s.abs_sum / s.count as f64 })
        .sum()
}

/// Mean loss over valid frames and all cells, plus `lambda` times the
/// activity regularizer. Invalid frames contribute nothing.
pub fn segment_loss(
    pred: &PredGrid,
    target: &TargetGrid,
    cfg: &LossConfig,
    activity: Option<&ActivationProfile>,
) -> Result<f64> {
    let (rows, cols) = pred.grid();
    if (rows, cols) != (target.rows, target.cols) || pred.frames() != target.frames.len() {
        return Err(Error::shape(format!(
            "prediction {:?} does not match target ({}, {}, {})",
            pred.0.dim(),
            target.frames.len(),
            target.rows,
            target.cols
        )));
    }
    let valid = target.valid_frames();
    if valid == 0 {
        return Err(Error::domain("segment has no valid frames"));
    }
    let mut total = 0.0;
    for (t, ft) in target.frames.iter().enumerate().filter(|(_, f)| f.valid) {
        let frame = pred.0.slice(s![.., t, .., ..]);
        for r in 0..rows {
            for c in 0..cols {
                let positive = ft.cell == Some((r, c));
                total += focal_loss_cell(frame[[0, r, c]] as f64, positive, cfg.gamma, cfg.eps);
                if positive {
                    total += smooth_l1(frame[[1, r, c]] as f64, ft.offset.0, cfg.beta)
                        + smooth_l1(frame[[2, r, c]] as f64, ft.offset.1, cfg.beta);
                }
            }
        }
    }
    let mut loss = total / (valid * rows * cols) as f64;
    if let Some(profile) = activity {
        loss += cfg.lambda * activity_regularizer(profile);
    }
    Ok(loss)
}

/// Picks the most likely cell per frame (ties go to the smallest row-major
/// index) and maps it into the evaluation space.
pub fn decode(pred: &PredGrid, times: &[u64], grid: &GridGeometry) -> Result<Vec<PupilPrediction>> {
    if times.len() != pred.frames() {
        return Err(Error::shape(format!(
            "{} frame times for {} predicted frames",
            times.len(),
            pred.frames()
        )));
    }
    let (rows, cols) = pred.grid();
    Ok(times
        .iter()
        .enumerate()
        .map(|(t, &time)| {
            let frame = pred.0.slice(s![.., t, .., ..]);
            let mut best = (0, 0);
            for r in 0..rows {
                for c in 0..cols {
                    if frame[[0, r, c]] > frame[[0, best.0, best.1]] {
                        best = (r, c);
                    }
                }
            }
            let (r, c) = best;
            let x = (c as f64 + frame[[1, r, c]] as f64) * grid.cell_width;
            let y = (r as f64 + frame[[2, r, c]] as f64) * grid.cell_height;
            let (x, y) = grid.to_eval(x, y);
            PupilPrediction {
                t: time,
                x,
                y,
                score: frame[[0, r, c]] as f64,
            }
        })
        .collect())
}

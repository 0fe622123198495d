//! Affine augmentation applied directly to events and labels.
//!
//! Spatial transforms act on relative homogeneous coordinates
//! `(x / W - 1/2, y / H - 1/2, 1)`, so rotation and scaling pivot around the
//! frame centre and translations are fractions of the frame size. The matrix
//! is composed as `A = T * R * S` and applied to column vectors.

use nalgebra::{Matrix3, Vector3};
use ndarray::{s, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binning::EventTensor;
use crate::error::{Error, Result};
use crate::events::{Event, EventSegment, LabelSample, LabelTrack, SensorGeometry};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub sx: f64,
    pub sy: f64,
    /// Radians.
    pub theta: f64,
    /// Fraction of frame width.
    pub tx: f64,
    /// Fraction of frame height.
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        sx: 1.0,
        sy: 1.0,
        theta: 0.0,
        tx: 0.0,
        ty: 0.0,
    };
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix(Matrix3<f64>);

impl AffineMatrix {
    pub fn identity() -> Self {
        AffineMatrix(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Rejects matrices whose bottom row is not `(0, 0, 1)` or that are singular.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m[(2, 0)] != 0.0 || m[(2, 1)] != 0.0 || m[(2, 2)] != 1.0 {
            return Err(Error::domain("affine matrix must have bottom row (0, 0, 1)"));
        }
        if m.determinant() == 0.0 {
            return Err(Error::domain("affine matrix is singular"));
        }
        Ok(AffineMatrix(m))
    }

    pub fn inverse(&self) -> Self {
        let mut inv = self.0.try_inverse().expect("affine matrices are invertible");
        // the bottom row is exact by construction; keep it that way
        inv[(2, 0)] = 0.0;
        inv[(2, 1)] = 0.0;
        inv[(2, 2)] = 1.0;
        AffineMatrix(inv)
    }

    /// Applies the transform to a point in relative coordinates.
    pub fn apply_relative(&self, x: f64, y: f64) -> (f64, f64) {
        let v = self.0 * Vector3::new(x, y, 1.0);
        (v.x, v.y)
    }

    /// Pixel coordinates in, real-valued pixel coordinates out.
    pub fn apply_pixels(&self, x: f64, y: f64, geometry: SensorGeometry) -> (f64, f64) {
        let (w, h) = (geometry.width as f64, geometry.height as f64);
        let (xr, yr) = self.apply_relative(x / w - 0.5, y / h - 0.5);
        ((xr + 0.5) * w, (yr + 0.5) * h)
    }

    /// The 2x2 linear part, row-major.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        [[self.0[(0, 0)], self.0[(0, 1)]], [self.0[(1, 0)], self.0[(1, 1)]]]
    }
}

pub fn build_affine(params: &AffineParams) -> Result<AffineMatrix> {
    if !(params.sx > 0.0 && params.sy > 0.0) {
        return Err(Error::domain("scale factors must be positive"));
    }
    let translate = Matrix3::new(1.0, 0.0, params.tx, 0.0, 1.0, params.ty, 0.0, 0.0, 1.0);
    let (sin, cos) = params.theta.sin_cos();
    let rotate = Matrix3::new(cos, -sin, 0.0, sin, cos, 0.0, 0.0, 0.0, 1.0);
    let scale = Matrix3::new(params.sx, 0.0, 0.0, 0.0, params.sy, 0.0, 0.0, 0.0, 1.0);
    Ok(AffineMatrix(translate * rotate * scale))
}

/// Moves every event through `a`, rounding half-to-even back to the pixel
/// lattice. Events that land outside the sensor are dropped.
pub fn transform_events(segment: &EventSegment, a: &AffineMatrix) -> EventSegment {
    let geometry = segment.geometry();
    let events: Vec<Event> = segment
        .events()
        .iter()
        .filter_map(|e| {
            let (x, y) = a.apply_pixels(e.x as f64, e.y as f64, geometry);
            let (x, y) = (x.round_ties_even(), y.round_ties_even());
            if !x.is_finite() || !y.is_finite() || !geometry.contains(x as i64, y as i64) {
                return None;
            }
            Some(Event::new(e.t, x as u32, y as u32, e.p))
        })
        .collect();
    EventSegment::new(events, geometry).expect("time order and bounds preserved")
}

/// Labels transformed without rounding; `out_of_bounds[i]` marks sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedLabels {
    pub labels: LabelTrack,
    pub out_of_bounds: Vec<bool>,
}

pub fn transform_labels(
    labels: &LabelTrack,
    a: &AffineMatrix,
    geometry: SensorGeometry,
) -> TransformedLabels {
    let mut out_of_bounds = Vec::with_capacity(labels.len());
    let samples = labels
        .samples()
        .iter()
        .map(|s| {
            let (x, y) = a.apply_pixels(s.x, s.y, geometry);
            out_of_bounds.push(!geometry.contains_point(x, y));
            LabelSample { x, y, ..*s }
        })
        .collect();
    TransformedLabels {
        labels: LabelTrack::new(samples).expect("timestamps unchanged"),
        out_of_bounds,
    }
}

/// Sampling ranges. Serialized as the JSON policy file read by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Symmetric rotation range, degrees.
    pub rotation_deg: f64,
    /// Symmetric translation range, fraction of frame size.
    pub translation: f64,
    pub temporal_scale_min: f64,
    pub temporal_scale_max: f64,
    pub temporal_shift_us: f64,
    pub flip_probability: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            scale_min: 0.8,
            scale_max: 1.2,
            rotation_deg: 15.0,
            translation: 0.2,
            temporal_scale_min: 0.8,
            temporal_scale_max: 1.2,
            temporal_shift_us: 0.0,
            flip_probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.rotation_deg >= 0.0
            && self.translation >= 0.0
            && self.temporal_scale_min > 0.0
            && self.temporal_scale_min <= self.temporal_scale_max
            && (0.0..=1.0).contains(&self.flip_probability);
        if ok {
            Ok(())
        } else {
            Err(Error::config("augment policy ranges are not well ordered"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentDraw {
    pub affine: AffineParams,
    pub temporal_scale: f64,
    pub temporal_shift_us: f64,
    pub flip: bool,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// One draw per segment. Pure in `(policy, seed, index)`: the index selects
/// an independent ChaCha stream.
pub fn sample_params(policy: &AugmentPolicy, seed: u64, index: u64) -> AugmentDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let rot = policy.rotation_deg.to_radians();
    let affine = AffineParams {
        sx: uniform(&mut rng, policy.scale_min, policy.scale_max),
        sy: uniform(&mut rng, policy.scale_min, policy.scale_max),
        theta: uniform(&mut rng, -rot, rot),
        tx: uniform(&mut rng, -policy.translation, policy.translation),
        ty: uniform(&mut rng, -policy.translation, policy.translation),
    };
    let temporal_scale = uniform(&mut rng, policy.temporal_scale_min, policy.temporal_scale_max);
    let flip = rng.gen_bool(policy.flip_probability);
    AugmentDraw {
        affine,
        temporal_scale,
        temporal_shift_us: policy.temporal_shift_us,
        flip,
    }
}

fn affine_time(t: u64, a: f64, b: f64) -> Result<u64> {
    let v = (a * t as f64 + b).round_ties_even();
    if v < 0.0 || !v.is_finite() {
        return Err(Error::domain(format!(
            "timestamp {t} maps to negative time {v} under {a}*t + {b}"
        )));
    }
    Ok(v as u64)
}

/// `t -> round(a * t + b)`, rounding half to even.
pub fn temporal_affine(segment: &EventSegment, a: f64, b: f64) -> Result<EventSegment> {
    if !(a > 0.0) {
        return Err(Error::domain("temporal scale must be positive"));
    }
    let events = segment
        .events()
        .iter()
        .map(|e| Ok(Event { t: affine_time(e.t, a, b)?, ..*e }))
        .collect::<Result<Vec<_>>>()?;
    EventSegment::new(events, segment.geometry())
}

/// Label timestamps under the same map. Scaling may merge neighbouring
/// samples when `a < 1`; such a collision is reported as an error.
pub fn temporal_affine_labels(labels: &LabelTrack, a: f64, b: f64) -> Result<LabelTrack> {
    if !(a > 0.0) {
        return Err(Error::domain("temporal scale must be positive"));
    }
    let samples = labels
        .samples()
        .iter()
        .map(|s| Ok(LabelSample { t: affine_time(s.t, a, b)?, ..*s }))
        .collect::<Result<Vec<_>>>()?;
    LabelTrack::new(samples)
}

/// Linear interpolation of labels at `times`. A resampled frame is closed if
/// either bracketing sample is closed.
pub fn resample_labels(labels: &LabelTrack, times: &[u64]) -> Result<LabelTrack> {
    let samples = labels.samples();
    let (first, last) = match (labels.first_time(), labels.last_time()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::domain("cannot resample an empty label track")),
    };
    let out = times
        .iter()
        .map(|&t| {
            if t < first || t > last {
                return Err(Error::domain(format!(
                    "query time {t} outside label span [{first}, {last}]"
                )));
            }
            let hi = samples.partition_point(|s| s.t < t);
            let upper = samples[hi];
            if upper.t == t {
                return Ok(upper);
            }
            let lower = samples[hi - 1];
            let w = (t - lower.t) as f64 / (upper.t - lower.t) as f64;
            Ok(LabelSample {
                t,
                x: lower.x + w * (upper.x - lower.x),
                y: lower.y + w * (upper.y - lower.y),
                closed: lower.closed || upper.closed,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabelTrack::new(out)
}

/// Per-frame label aligned with a binned tensor, in sensor pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub x: f64,
    pub y: f64,
    pub closed: bool,
}

impl From<&LabelSample> for FrameLabel {
    fn from(s: &LabelSample) -> Self {
        FrameLabel {
            x: s.x,
            y: s.y,
            closed: s.closed,
        }
    }
}

/// Reverses time and swaps polarity channels; playing events backwards turns
/// brightness increases into decreases.
pub fn temporal_flip(tensor: &EventTensor, labels: &[FrameLabel]) -> (EventTensor, Vec<FrameLabel>) {
    let (c, t, h, w) = tensor.data.dim();
    let mut data = Array4::<f32>::zeros((c, t, h, w));
    for ch in 0..c {
        let src = tensor.data.slice(s![c - 1 - ch, ..;-1, .., ..]);
        data.index_axis_mut(Axis(0), ch).assign(&src);
    }
    let flipped_labels = labels.iter().rev().copied().collect();
    (
        EventTensor {
            data,
            grid: tensor.grid,
        },
        flipped_labels,
    )
}

/// A frame is usable iff the eye is open and the pupil lies on the sensor.
pub fn validity_mask(labels: &[FrameLabel], geometry: SensorGeometry) -> Vec<bool> {
    labels
        .iter()
        .map(|l| !l.closed && geometry.contains_point(l.x, l.y))
        .collect()
}

//! Tracking accuracy, activation sparsity and compute accounting.

use std::collections::BTreeMap;

use ndarray::ArrayViewD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{LabelTrack, PupilPrediction};
use crate::network::{LayerKind, ModelConfig, Tap};

/// Radius, in evaluation pixels, within which a prediction counts as correct.
pub const P10_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub p10: f64,
    pub mean_distance: f64,
    pub n_evaluated: usize,
}

/// Fraction of open-eye labels whose prediction lies within 10 pixels, and
/// the mean Euclidean distance over the same labels. Both tracks must be in
/// the 60x80 evaluation space. Every prediction must share its timestamp
/// with a label; labels without a prediction are not evaluated.
pub fn p10(preds: &[PupilPrediction], labels: &LabelTrack) -> Result<MetricsReport> {
    let mut hits = 0usize;
    let mut total = 0.0;
    let mut n = 0usize;
    for p in preds {
        let label = labels.get(p.t).ok_or_else(|| {
            Error::domain(format!("prediction at t={} has no label with that timestamp", p.t))
        })?;
        if label.closed {
            continue;
        }
        let d = (p.x - label.x).hypot(p.y - label.y);
        if d <= P10_RADIUS {
            hits += 1;
        }
        total += d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::domain("no open-eye labels to evaluate"));
    }
    Ok(MetricsReport {
        p10: hits as f64 / n as f64,
        mean_distance: total / n as f64,
        n_evaluated: n,
    })
}

/// Running totals for one stage of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityStats {
    pub name: String,
    pub abs_sum: f64,
    pub nonzero: u64,
    pub count: u64,
}

impl ActivityStats {
    pub fn new(name: impl Into<String>) -> Self {
        ActivityStats {
            name: name.into(),
            abs_sum: 0.0,
            nonzero: 0,
            count: 0,
        }
    }

    pub fn add<'a>(&mut self, values: impl IntoIterator<Item = &'a f32>) {
        for &v in values {
            self.abs_sum += v.abs() as f64;
            self.nonzero += (v != 0.0) as u64;
            self.count += 1;
        }
    }

    pub fn nonzero_fraction(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.nonzero as f64 / self.count as f64
        }
    }
}

/// Per-stage activation statistics accumulated over one or more forward
/// passes. Plug it into a forward pass as a [`Tap`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    stats: Vec<ActivityStats>,
}

impl ActivationProfile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_stats(stats: Vec<ActivityStats>) -> Self {
        ActivationProfile { stats }
    }

    pub fn stats(&self) -> &[ActivityStats] {
        &self.stats
    }

    pub fn get(&self, stage: &str) -> Option<&ActivityStats> {
        self.stats.iter().find(|s| s.name == stage)
    }

    /// Stages that are ReLU outputs: everything except the raw input and the
    /// sigmoid output.
    pub fn relu_layers(&self) -> impl Iterator<Item = &ActivityStats> {
        self.stats
            .iter()
            .filter(|s| s.name != "input" && s.name != "head.output")
    }
}

impl Tap for ActivationProfile {
    fn observe(&mut self, stage: &str, values: ArrayViewD<'_, f32>) {
        let idx = match self.stats.iter().position(|s| s.name == stage) {
            Some(i) => i,
            None => {
                self.stats.push(ActivityStats::new(stage));
                self.stats.len() - 1
            }
        };
        self.stats[idx].add(values.iter());
    }
}

/// Input-nonzero fraction of each convolution layer, keyed by layer name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityProfile {
    pub layers: BTreeMap<String, f64>,
}

impl SparsityProfile {
    /// The same fraction for every layer of `config`.
    pub fn uniform(config: &ModelConfig, fraction: f64) -> Self {
        SparsityProfile {
            layers: config
                .layers()
                .into_iter()
                .map(|l| (l.name, fraction))
                .collect(),
        }
    }

    pub fn get(&self, layer: &str) -> Option<f64> {
        self.layers.get(layer).copied()
    }
}

/// Each layer reads the stage that precedes it, so its input density is that
/// stage's nonzero fraction, averaged over every frame the profile saw.
pub fn measure_sparsity(profile: &ActivationProfile, config: &ModelConfig) -> Result<SparsityProfile> {
    if profile.stats().is_empty() {
        return Err(Error::domain("activation profile is empty"));
    }
    let stages = config.stage_names();
    let mut layers = BTreeMap::new();
    for (layer, input) in config.layers().iter().zip(&stages) {
        let stats = profile
            .get(input)
            .ok_or_else(|| Error::domain(format!("profile has no stage `{input}`")))?;
        if stats.count == 0 {
            return Err(Error::domain(format!("stage `{input}` saw no values")));
        }
        layers.insert(layer.name.clone(), stats.nonzero_fraction());
    }
    Ok(SparsityProfile { layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub name: String,
    pub params: u64,
    /// Multiply-accumulates per output frame.
    pub dense: u64,
    pub input_density: f64,
    pub sparse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub layers: Vec<LayerMacs>,
    pub total_params: u64,
    pub total_dense: u64,
    pub total_sparse: f64,
    pub convention: String,
}

pub const MAC_CONVENTION: &str = "convolution multiply-accumulates per output frame, zero-padded \
positions included; normalization, activation and sigmoid excluded; sparse = dense x input nonzero fraction";

/// Parameter and per-frame MAC counts for every convolution layer. Without a
/// profile every input is treated as dense.
pub fn count_macs(config: &ModelConfig, sparsity: Option<&SparsityProfile>) -> Result<MacReport> {
    config.validate()?;
    let specs = config.tensor_specs();
    let mut layers = Vec::new();
    for l in config.layers() {
        let prefix = format!("{}.", l.name);
        let params = specs
            .iter()
            .filter(|s| s.name.starts_with(&prefix))
            .map(|s| s.len() as u64)
            .sum();
        let (ci, co, k) = (l.c_in as u64, l.c_out as u64, l.kernel as u64);
        let dense = match (l.kind, l.dws) {
            (LayerKind::Temporal, false) => {
                let px = (l.in_height * l.in_width) as u64;
                co * ci * k * px
            }
            (LayerKind::Temporal, true) => {
                let px = (l.in_height * l.in_width) as u64;
                ci * k * px + ci * co * px
            }
            (LayerKind::Spatial, false) => {
                let px = (l.out_height * l.out_width) as u64;
                co * ci * k * k * px
            }
            (LayerKind::Spatial, true) => {
                let px = (l.out_height * l.out_width) as u64;
                ci * k * k * px + ci * co * px
            }
        };
        let input_density = match sparsity {
            None => 1.0,
            Some(p) => p.get(&l.name).ok_or_else(|| {
                Error::domain(format!("sparsity profile has no entry for {}", l.name))
            })?,
        };
        if !(0.0..=1.0).contains(&input_density) {
            return Err(Error::domain(format!(
                "{}: nonzero fraction {input_density} outside [0, 1]",
                l.name
            )));
        }
        layers.push(LayerMacs {
            name: l.name,
            params,
            dense,
            input_density,
            sparse: dense as f64 * input_density,
        });
    }
    Ok(MacReport {
        total_params: layers.iter().map(|l| l.params).sum(),
        total_dense: layers.iter().map(|l| l.dense).sum(),
        total_sparse: layers.iter().map(|l| l.sparse).sum(),
        layers,
        convention: MAC_CONVENTION.into(),
    })
}

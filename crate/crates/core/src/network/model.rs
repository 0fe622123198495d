use std::collections::HashMap;

use ndarray::{Array1, Array3, Array4, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, Ix4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LayerGeometry, LayerKind, ModelConfig};
use super::layers::*;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub data: ArrayD<f32>,
}

/// Named weight arrays in manifest order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    tensors: Vec<NamedTensor>,
}

impl ModelWeights {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        ModelWeights { tensors }
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedTensor> {
        self.tensors.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.data)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f32>> {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .map(|t| &mut t.data)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }
}

/// Deterministic initialization: kernels uniform in `+-sqrt(6 / fan_in)`,
/// biases and shifts zero, scales one, batch statistics `(0, 1)`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = config
        .tensor_specs()
        .into_iter()
        .map(|spec| {
            let suffix = spec.name.rsplit('.').next().unwrap_or_default();
            let data = match suffix {
                "kernel" | "depthwise" | "pointwise" => {
                    let fan_in: usize = spec.shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    ArrayD::from_shape_simple_fn(spec.shape.clone(), || rng.gen_range(-bound..=bound))
                }
                "norm_scale" | "running_var" => ArrayD::ones(spec.shape.clone()),
                _ => ArrayD::zeros(spec.shape.clone()),
            };
            NamedTensor {
                name: spec.name,
                data,
            }
        })
        .collect();
    Ok(ModelWeights { tensors })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub temporal: TemporalConv,
    pub group_norm: GroupNorm,
    pub spatial: SpatialConv,
    pub batch_norm: BatchNorm,
}

/// Temporal smoothing layer, 3x3 conv + ReLU, 1x1 conv + sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub temporal: TemporalConv,
    pub group_norm: GroupNorm,
    pub hidden: SpatialConv,
    pub output: SpatialConv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub blocks: Vec<Block>,
    pub head: Head,
}

/// Receives intermediate tensors during a forward pass. Stages are named as
/// in [`ModelConfig::stage_names`]: `input`, then each layer's activation.
pub trait Tap {
    fn observe(&mut self, stage: &str, values: ArrayViewD<'_, f32>);
}

impl Tap for () {
    fn observe(&mut self, _: &str, _: ArrayViewD<'_, f32>) {}
}

/// Collects every stage output, e.g. for per-layer comparisons.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub stages: Vec<(String, ArrayD<f32>)>,
}

impl Tap for Trace {
    fn observe(&mut self, stage: &str, values: ArrayViewD<'_, f32>) {
        self.stages.push((stage.to_string(), values.to_owned()));
    }
}

struct WeightTable<'a> {
    by_name: HashMap<&'a str, &'a ArrayD<f32>>,
}

impl<'a> WeightTable<'a> {
    fn take<D: ndarray::Dimension>(&self, name: &str) -> Result<ndarray::Array<f32, D>> {
        let t = self.by_name.get(name).ok_or_else(|| Error::Weights {
            name: name.into(),
            message: "missing".into(),
        })?;
        (*t).clone()
            .into_dimensionality::<D>()
            .map_err(|e| Error::Weights {
                name: name.into(),
                message: e.to_string(),
            })
    }

    fn temporal(&self, l: &LayerGeometry) -> Result<TemporalConv> {
        let n = &l.name;
        let kernel = if l.dws {
            TemporalKernel::Separable {
                depthwise: self.take::<Ix2>(&format!("{n}.depthwise"))?,
                pointwise: self.take::<Ix2>(&format!("{n}.pointwise"))?,
            }
        } else {
            TemporalKernel::Full(self.take::<Ix3>(&format!("{n}.kernel"))?)
        };
        Ok(TemporalConv {
            kernel,
            bias: self.take::<Ix1>(&format!("{n}.bias"))?,
        })
    }

    fn spatial(&self, l: &LayerGeometry) -> Result<SpatialConv> {
        let n = &l.name;
        let kernel = if l.dws {
            SpatialKernel::Separable {
                depthwise: self.take::<Ix3>(&format!("{n}.depthwise"))?,
                pointwise: self.take::<Ix2>(&format!("{n}.pointwise"))?,
            }
        } else {
            SpatialKernel::Full(self.take::<Ix4>(&format!("{n}.kernel"))?)
        };
        Ok(SpatialConv {
            kernel,
            bias: self.take::<Ix1>(&format!("{n}.bias"))?,
            stride: l.stride,
        })
    }

    fn group_norm(&self, l: &LayerGeometry, config: &ModelConfig) -> Result<GroupNorm> {
        Ok(GroupNorm {
            groups: config.groups,
            scale: self.take(&format!("{}.norm_scale", l.name))?,
            shift: self.take(&format!("{}.norm_shift", l.name))?,
            eps: config.eps,
        })
    }

    fn batch_norm(&self, l: &LayerGeometry, config: &ModelConfig) -> Result<BatchNorm> {
        let var: Array1<f32> = self.take(&format!("{}.running_var", l.name))?;
        if var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Weights {
                name: format!("{}.running_var", l.name),
                message: "running variance must be positive".into(),
            });
        }
        Ok(BatchNorm {
            scale: self.take(&format!("{}.norm_scale", l.name))?,
            shift: self.take(&format!("{}.norm_shift", l.name))?,
            mean: self.take(&format!("{}.running_mean", l.name))?,
            var,
            eps: config.eps,
        })
    }
}

impl Model {
    /// Builds a model, checking every tensor against the configuration.
    pub fn new(config: ModelConfig, weights: &ModelWeights) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        let mut by_name = HashMap::new();
        for t in weights.iter() {
            if by_name.insert(t.name.as_str(), &t.data).is_some() {
                return Err(Error::Weights {
                    name: t.name.clone(),
                    message: "duplicate tensor".into(),
                });
            }
        }
        for spec in &specs {
            match by_name.get(spec.name.as_str()) {
                None => {
                    return Err(Error::Weights {
                        name: spec.name.clone(),
                        message: "missing".into(),
                    })
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Weights {
                        name: spec.name.clone(),
                        message: format!("shape {:?}, expected {:?}", t.shape(), spec.shape),
                    })
                }
                Some(t) if t.iter().any(|v| !v.is_finite()) => {
                    return Err(Error::Weights {
                        name: spec.name.clone(),
                        message: "non-finite value".into(),
                    })
                }
                _ => {}
            }
        }
        if weights.len() != specs.len() {
            let unknown = weights
                .iter()
                .find(|t| !specs.iter().any(|s| s.name == t.name))
                .map(|t| t.name.clone())
                .unwrap_or_default();
            return Err(Error::Weights {
                name: unknown,
                message: "unknown tensor".into(),
            });
        }

        let table = WeightTable { by_name };
        let layers = config.layers();
        let mut blocks = Vec::with_capacity(config.blocks.len());
        for pair in layers[..2 * config.blocks.len()].chunks(2) {
            blocks.push(Block {
                temporal: table.temporal(&pair[0])?,
                group_norm: table.group_norm(&pair[0], &config)?,
                spatial: table.spatial(&pair[1])?,
                batch_norm: table.batch_norm(&pair[1], &config)?,
            });
        }
        let h = &layers[2 * config.blocks.len()..];
        let head = Head {
            temporal: table.temporal(&h[0])?,
            group_norm: table.group_norm(&h[0], &config)?,
            hidden: table.spatial(&h[1])?,
            output: table.spatial(&h[2])?,
        };
        Ok(Model { config, blocks, head })
    }

    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = init_model(&config, seed)?;
        Model::new(config, &weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Weights in manifest order.
    pub fn weights(&self) -> ModelWeights {
        let mut out = Vec::new();
        let mut push = |name: String, data: ArrayD<f32>| out.push(NamedTensor { name, data });
        let layers = self.config.layers();
        let temporal = |push: &mut dyn FnMut(String, ArrayD<f32>), n: &str, c: &TemporalConv| {
            match &c.kernel {
                TemporalKernel::Full(k) => push(format!("{n}.kernel"), k.clone().into_dyn()),
                TemporalKernel::Separable { depthwise, pointwise } => {
                    push(format!("{n}.depthwise"), depthwise.clone().into_dyn());
                    push(format!("{n}.pointwise"), pointwise.clone().into_dyn());
                }
            }
            push(format!("{n}.bias"), c.bias.clone().into_dyn());
        };
        let spatial = |push: &mut dyn FnMut(String, ArrayD<f32>), n: &str, c: &SpatialConv| {
            match &c.kernel {
                SpatialKernel::Full(k) => push(format!("{n}.kernel"), k.clone().into_dyn()),
                SpatialKernel::Separable { depthwise, pointwise } => {
                    push(format!("{n}.depthwise"), depthwise.clone().into_dyn());
                    push(format!("{n}.pointwise"), pointwise.clone().into_dyn());
                }
            }
            push(format!("{n}.bias"), c.bias.clone().into_dyn());
        };
        let gn = |push: &mut dyn FnMut(String, ArrayD<f32>), n: &str, g: &GroupNorm| {
            push(format!("{n}.norm_scale"), g.scale.clone().into_dyn());
            push(format!("{n}.norm_shift"), g.shift.clone().into_dyn());
        };
        for (b, pair) in self.blocks.iter().zip(layers.chunks(2)) {
            temporal(&mut push, &pair[0].name, &b.temporal);
            gn(&mut push, &pair[0].name, &b.group_norm);
            spatial(&mut push, &pair[1].name, &b.spatial);
            let n = &pair[1].name;
            let bn = &b.batch_norm;
            push(format!("{n}.norm_scale"), bn.scale.clone().into_dyn());
            push(format!("{n}.norm_shift"), bn.shift.clone().into_dyn());
            push(format!("{n}.running_mean"), bn.mean.clone().into_dyn());
            push(format!("{n}.running_var"), bn.var.clone().into_dyn());
        }
        temporal(&mut push, "head.temporal", &self.head.temporal);
        gn(&mut push, "head.temporal", &self.head.group_norm);
        spatial(&mut push, "head.spatial", &self.head.hidden);
        spatial(&mut push, "head.output", &self.head.output);
        ModelWeights { tensors: out }
    }

    /// Scalars held in the fixed-size temporal buffers needed to stream this model.
    pub fn stream_state_len(&self) -> usize {
        self.config
            .layers()
            .iter()
            .filter(|l| l.kind == LayerKind::Temporal)
            .map(|l| l.kernel * l.c_in * l.in_height * l.in_width)
            .sum()
    }

    pub(crate) fn check_input_frame(&self, dims: (usize, usize, usize)) -> Result<()> {
        let c = &self.config;
        let expected = (c.in_channels, c.input_height, c.input_width);
        if dims != expected {
            return Err(Error::shape(format!(
                "input frame {dims:?} does not match model input {expected:?}"
            )));
        }
        Ok(())
    }

    /// Offline pass over a `(2, T, H, W)` tensor, returning `(3, T, rows, cols)`.
    pub fn forward(&self, x: &Array4<f32>) -> Result<Array4<f32>> {
        self.forward_with(x, &mut (), TemporalAlignment::Causal)
    }

    pub fn forward_with(
        &self,
        x: &Array4<f32>,
        tap: &mut dyn Tap,
        alignment: TemporalAlignment,
    ) -> Result<Array4<f32>> {
        let features = backbone_forward_with(self, x, tap, alignment)?;
        crate::detector::head_forward_with(&self.head, &features, tap, alignment)
    }
}

/// temporal conv -> per-frame GroupNorm -> ReLU -> spatial conv -> BatchNorm -> ReLU
pub fn st_block_forward(x: &Array4<f32>, block: &Block) -> Result<Array4<f32>> {
    block_forward_with(x, block, "", &mut (), TemporalAlignment::Causal)
}

pub(crate) fn block_forward_with(
    x: &Array4<f32>,
    block: &Block,
    name: &str,
    tap: &mut dyn Tap,
    alignment: TemporalAlignment,
) -> Result<Array4<f32>> {
    let mut mid = group_norm_frames(&temporal_conv_aligned(x, &block.temporal, alignment)?, &block.group_norm)?;
    relu_inplace(&mut mid);
    tap.observe(&format!("{name}.temporal"), mid.view().into_dyn());
    let mut out = batch_norm_inference(&spatial_conv(&mid, &block.spatial)?, &block.batch_norm)?;
    relu_inplace(&mut out);
    tap.observe(&format!("{name}.spatial"), out.view().into_dyn());
    Ok(out)
}

/// All backbone blocks in sequence; no residual paths.
pub fn backbone_forward(model: &Model, x: &Array4<f32>) -> Result<Array4<f32>> {
    backbone_forward_with(model, x, &mut (), TemporalAlignment::Causal)
}

pub(crate) fn backbone_forward_with(
    model: &Model,
    x: &Array4<f32>,
    tap: &mut dyn Tap,
    alignment: TemporalAlignment,
) -> Result<Array4<f32>> {
    let (c, t, h, w) = x.dim();
    model.check_input_frame((c, h, w))?;
    if t == 0 {
        return Err(Error::shape("input has no frames"));
    }
    tap.observe("input", x.view().into_dyn());
    let mut cur = x.clone();
    for (i, block) in model.blocks.iter().enumerate() {
        cur = block_forward_with(&cur, block, &format!("block{}", i + 1), tap, alignment)?;
    }
    Ok(cur)
}

pub(crate) fn frame_stage(
    tap: &mut dyn Tap,
    stage: &str,
    frame: &Array3<f32>,
) {
    tap.observe(stage, frame.view().insert_axis(Axis(1)).into_dyn());
}

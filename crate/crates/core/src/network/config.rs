use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub temporal_dws: bool,
    pub spatial_dws: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Depthwise-separable temporal smoothing layer.
    pub temporal_dws: bool,
    pub spatial_dws: bool,
    /// Width of the 3x3 hidden conv; defaults to the last block's width.
    pub hidden_channels: Option<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            temporal_dws: true,
            spatial_dws: false,
            hidden_channels: None,
        }
    }
}

/// Number of head output channels: presence, x offset, y offset.
pub const HEAD_OUTPUTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub temporal_kernel: usize,
    pub spatial_kernel: usize,
    pub spatial_stride: usize,
    pub groups: usize,
    pub eps: f32,
    pub blocks: Vec<BlockConfig>,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    /// Five blocks of widths 16..256 on a 96x128 input, the last six
    /// backbone layers depthwise-separable.
    fn default() -> Self {
        ModelConfig::with_channels(&[16, 32, 64, 128, 256], 6, 96, 128)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// `k_t x 1 x 1` causal convolution over time.
    Temporal,
    /// `1 x k x k` convolution on each frame.
    Spatial,
}

/// Static shape information for one convolution layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGeometry {
    pub name: String,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dws: bool,
    pub in_height: usize,
    pub in_width: usize,
    pub out_height: usize,
    pub out_width: usize,
    /// Whether the layer is followed by a normalization layer.
    pub norm: Option<NormKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Group,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn same_output(size: usize, stride: usize) -> usize {
    size.div_ceil(stride)
}

impl ModelConfig {
    /// Backbone with the given widths; the last `dws_layers` of its `2 * len`
    /// layers are depthwise-separable.
    pub fn with_channels(channels: &[usize], dws_layers: usize, height: usize, width: usize) -> Self {
        let n = channels.len() * 2;
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| BlockConfig {
                channels: c,
                temporal_dws: 2 * i + dws_layers >= n,
                spatial_dws: 2 * i + 1 + dws_layers >= n,
            })
            .collect();
        ModelConfig {
            in_channels: 2,
            input_height: height,
            input_width: width,
            temporal_kernel: 5,
            spatial_kernel: 3,
            spatial_stride: 2,
            groups: 4,
            eps: 1e-5,
            blocks,
            head: HeadConfig::default(),
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.head
            .hidden_channels
            .unwrap_or_else(|| self.feature_channels())
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.channels)
    }

    /// `(rows, cols)` of the detector grid.
    pub fn output_grid(&self) -> (usize, usize) {
        self.blocks.iter().fold((self.input_height, self.input_width), |(h, w), _| {
            (
                same_output(h, self.spatial_stride),
                same_output(w, self.spatial_stride),
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::config("model needs at least one block"));
        }
        if self.in_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::config("input dimensions must be positive"));
        }
        if self.temporal_kernel == 0 || self.spatial_kernel.is_multiple_of(2) || self.spatial_stride == 0 {
            return Err(Error::config(
                "temporal kernel must be positive, spatial kernel odd, stride positive",
            ));
        }
        if self.groups == 0 {
            return Err(Error::config("group count must be positive"));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::config("norm epsilon must be non-negative"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 {
                return Err(Error::config(format!("block{} has no channels", i + 1)));
            }
            if b.channels % self.groups != 0 {
                return Err(Error::config(format!(
                    "block{} width {} not divisible by {} groups",
                    i + 1,
                    b.channels,
                    self.groups
                )));
            }
        }
        if self.hidden_channels() == 0 {
            return Err(Error::config("head hidden width must be positive"));
        }
        Ok(())
    }

    /// Every convolution in execution order, including the head.
    pub fn layers(&self) -> Vec<LayerGeometry> {
        let mut out = Vec::with_capacity(2 * self.blocks.len() + 3);
        let (mut h, mut w, mut c) = (self.input_height, self.input_width, self.in_channels);
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(LayerGeometry {
                name: format!("block{}.temporal", i + 1),
                kind: LayerKind::Temporal,
                c_in: c,
                c_out: b.channels,
                kernel: self.temporal_kernel,
                stride: 1,
                dws: b.temporal_dws,
                in_height: h,
                in_width: w,
                out_height: h,
                out_width: w,
                norm: Some(NormKind::Group),
            });
            let (oh, ow) = (
                same_output(h, self.spatial_stride),
                same_output(w, self.spatial_stride),
            );
            out.push(LayerGeometry {
                name: format!("block{}.spatial", i + 1),
                kind: LayerKind::Spatial,
                c_in: b.channels,
                c_out: b.channels,
                kernel: self.spatial_kernel,
                stride: self.spatial_stride,
                dws: b.spatial_dws,
                in_height: h,
                in_width: w,
                out_height: oh,
                out_width: ow,
                norm: Some(NormKind::Batch),
            });
            (h, w, c) = (oh, ow, b.channels);
        }
        let hidden = self.hidden_channels();
        out.push(LayerGeometry {
            name: "head.temporal".into(),
            kind: LayerKind::Temporal,
            c_in: c,
            c_out: c,
            kernel: self.temporal_kernel,
            stride: 1,
            dws: self.head.temporal_dws,
            in_height: h,
            in_width: w,
            out_height: h,
            out_width: w,
            norm: Some(NormKind::Group),
        });
        out.push(LayerGeometry {
            name: "head.spatial".into(),
            kind: LayerKind::Spatial,
            c_in: c,
            c_out: hidden,
            kernel: self.spatial_kernel,
            stride: 1,
            dws: self.head.spatial_dws,
            in_height: h,
            in_width: w,
            out_height: h,
            out_width: w,
            norm: None,
        });
        out.push(LayerGeometry {
            name: "head.output".into(),
            kind: LayerKind::Spatial,
            c_in: hidden,
            c_out: HEAD_OUTPUTS,
            kernel: 1,
            stride: 1,
            dws: false,
            in_height: h,
            in_width: w,
            out_height: h,
            out_width: w,
            norm: None,
        });
        out
    }

    /// Weight tensors in manifest order.
    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| specs.push(TensorSpec { name, shape });
        for l in self.layers() {
            let n = &l.name;
            match (l.kind, l.dws) {
                (LayerKind::Temporal, false) => {
                    push(format!("{n}.kernel"), vec![l.c_out, l.c_in, l.kernel]);
                }
                (LayerKind::Temporal, true) => {
                    push(format!("{n}.depthwise"), vec![l.c_in, l.kernel]);
                    push(format!("{n}.pointwise"), vec![l.c_out, l.c_in]);
                }
                (LayerKind::Spatial, false) => {
                    push(format!("{n}.kernel"), vec![l.c_out, l.c_in, l.kernel, l.kernel]);
                }
                (LayerKind::Spatial, true) => {
                    push(format!("{n}.depthwise"), vec![l.c_in, l.kernel, l.kernel]);
                    push(format!("{n}.pointwise"), vec![l.c_out, l.c_in]);
                }
            }
            push(format!("{n}.bias"), vec![l.c_out]);
            match l.norm {
                Some(NormKind::Group) => {
                    push(format!("{n}.norm_scale"), vec![l.c_out]);
                    push(format!("{n}.norm_shift"), vec![l.c_out]);
                }
                Some(NormKind::Batch) => {
                    push(format!("{n}.norm_scale"), vec![l.c_out]);
                    push(format!("{n}.norm_shift"), vec![l.c_out]);
                    push(format!("{n}.running_mean"), vec![l.c_out]);
                    push(format!("{n}.running_var"), vec![l.c_out]);
                }
                None => {}
            }
        }
        specs
    }

    /// Names of the observable stages in execution order: the model input,
    /// each post-ReLU activation, and the post-sigmoid head output.
    pub fn stage_names(&self) -> Vec<String> {
        std::iter::once("input".to_string())
            .chain(self.layers().into_iter().map(|l| l.name))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.output_grid(), (3, 4));
        let dws: Vec<bool> = cfg
            .blocks
            .iter()
            .flat_map(|b| [b.temporal_dws, b.spatial_dws])
            .collect();
        assert_eq!(dws, vec![false, false, false, false, true, true, true, true, true, true]);
        assert_eq!(cfg.layers().len(), 13);
        assert_eq!(cfg.hidden_channels(), 256);
    }

    #[test]
    fn same_padding_sizes() {
        assert_eq!(same_output(96, 2), 48);
        assert_eq!(same_output(3, 2), 2);
        assert_eq!(same_output(1, 2), 1);
    }

    #[test]
    fn rejects_bad_groups() {
        let mut cfg = ModelConfig::default();
        cfg.blocks[0].channels = 6;
        assert!(cfg.validate().is_err());
        cfg.groups = 2;
        cfg.validate().unwrap();
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ModelConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ModelConfig::default());
    }
}

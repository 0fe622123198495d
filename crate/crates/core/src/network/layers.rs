//! Convolution and normalization layers.
//!
//! Frame-level kernels operate on `(C, H, W)` arrays; the offline entry
//! points on `(C, T, H, W)` apply them frame by frame. Only the temporal
//! convolution mixes frames, and it only looks backwards.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum TemporalKernel {
    /// `(C_out, C_in, k_t)`, taps ordered oldest to newest.
    Full(Array3<f32>),
    Separable {
        /// `(C_in, k_t)`
        depthwise: Array2<f32>,
        /// `(C_out, C_in)`
        pointwise: Array2<f32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConv {
    pub kernel: TemporalKernel,
    pub bias: Array1<f32>,
}

impl TemporalConv {
    pub fn c_in(&self) -> usize {
        match &self.kernel {
            TemporalKernel::Full(k) => k.dim().1,
            TemporalKernel::Separable { depthwise, .. } => depthwise.dim().0,
        }
    }

    pub fn c_out(&self) -> usize {
        self.bias.len()
    }

    pub fn taps(&self) -> usize {
        match &self.kernel {
            TemporalKernel::Full(k) => k.dim().2,
            TemporalKernel::Separable { depthwise, .. } => depthwise.dim().1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpatialKernel {
    /// `(C_out, C_in, k, k)`
    Full(Array4<f32>),
    Separable {
        /// `(C_in, k, k)`
        depthwise: Array3<f32>,
        /// `(C_out, C_in)`
        pointwise: Array2<f32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialConv {
    pub kernel: SpatialKernel,
    pub bias: Array1<f32>,
    pub stride: usize,
}

impl SpatialConv {
    pub fn c_in(&self) -> usize {
        match &self.kernel {
            SpatialKernel::Full(k) => k.dim().1,
            SpatialKernel::Separable { depthwise, .. } => depthwise.dim().0,
        }
    }

    pub fn c_out(&self) -> usize {
        self.bias.len()
    }

    pub fn size(&self) -> usize {
        match &self.kernel {
            SpatialKernel::Full(k) => k.dim().2,
            SpatialKernel::Separable { depthwise, .. } => depthwise.dim().1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub scale: Array1<f32>,
    pub shift: Array1<f32>,
    pub eps: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub scale: Array1<f32>,
    pub shift: Array1<f32>,
    pub mean: Array1<f32>,
    pub var: Array1<f32>,
    pub eps: f32,
}

/// Where the temporal window sits relative to the output frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TemporalAlignment {
    /// Output `t` reads frames `t - k + 1 ..= t`; the input is pre-padded by `k - 1` zeros.
    #[default]
    Causal,
    /// Output `t` reads a window centred on `t`. Not causal; kept as a
    /// reference mutation for the causality checks.
    Centered,
}

fn std_slice<'a>(a: &'a ArrayView3<'_, f32>) -> std::borrow::Cow<'a, [f32]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

#[inline]
fn axpy(out: &mut [f32], w: f32, x: &[f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += w * v;
    }
}

/// Contracts a window of `k_t` frames (oldest first) with the temporal kernel.
/// This is the streaming form of the causal temporal convolution.
pub fn temporal_contract(window: &[ArrayView3<'_, f32>], conv: &TemporalConv) -> Result<Array3<f32>> {
    let taps = conv.taps();
    if window.len() != taps {
        return Err(Error::shape(format!(
            "temporal window has {} frames, kernel has {taps} taps",
            window.len()
        )));
    }
    let (c_in, h, w) = window[0].dim();
    if c_in != conv.c_in() || window.iter().any(|f| f.dim() != (c_in, h, w)) {
        return Err(Error::shape(format!(
            "temporal layer expects {} input channels, got {c_in}",
            conv.c_in()
        )));
    }
    let plane = h * w;
    let frames: Vec<_> = window.iter().map(std_slice).collect();
    let mut out = Array3::<f32>::zeros((conv.c_out(), h, w));
    let dst = out.as_slice_mut().unwrap();
    match &conv.kernel {
        TemporalKernel::Full(k) => {
            for co in 0..conv.c_out() {
                let o = &mut dst[co * plane..(co + 1) * plane];
                for ci in 0..c_in {
                    for (tap, f) in frames.iter().enumerate() {
                        axpy(o, k[[co, ci, tap]], &f[ci * plane..(ci + 1) * plane]);
                    }
                }
            }
        }
        TemporalKernel::Separable { depthwise, pointwise } => {
            let mut mid = vec![0f32; c_in * plane];
            for ci in 0..c_in {
                let m = &mut mid[ci * plane..(ci + 1) * plane];
                for (tap, f) in frames.iter().enumerate() {
                    axpy(m, depthwise[[ci, tap]], &f[ci * plane..(ci + 1) * plane]);
                }
            }
            pointwise_into(dst, &mid, pointwise, plane);
        }
    }
    add_bias(&mut out, &conv.bias);
    Ok(out)
}

fn pointwise_into(dst: &mut [f32], src: &[f32], pointwise: &Array2<f32>, plane: usize) {
    let (c_out, c_in) = pointwise.dim();
    for co in 0..c_out {
        let o = &mut dst[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            axpy(o, pointwise[[co, ci]], &src[ci * plane..(ci + 1) * plane]);
        }
    }
}

fn add_bias(out: &mut Array3<f32>, bias: &Array1<f32>) {
    for (mut plane, &b) in out.outer_iter_mut().zip(bias) {
        plane.mapv_inplace(|v| v + b);
    }
}

/// Causal temporal convolution over a `(C_in, T, H, W)` tensor.
pub fn temporal_conv_causal(x: &Array4<f32>, conv: &TemporalConv) -> Result<Array4<f32>> {
    temporal_conv_aligned(x, conv, TemporalAlignment::Causal)
}

/// Offline temporal convolution. Frames outside `[0, T)` read as zero.
pub fn temporal_conv_aligned(
    x: &Array4<f32>,
    conv: &TemporalConv,
    alignment: TemporalAlignment,
) -> Result<Array4<f32>> {
    let (c_in, t_len, h, w) = x.dim();
    if c_in != conv.c_in() {
        return Err(Error::shape(format!(
            "temporal layer expects {} input channels, got {c_in}",
            conv.c_in()
        )));
    }
    let taps = conv.taps();
    // input frame read by tap `k` for output frame `t` is `t + k - lag`
    let lag = match alignment {
        TemporalAlignment::Causal => taps - 1,
        TemporalAlignment::Centered => taps / 2,
    };
    let plane = h * w;
    let x = x.as_standard_layout();
    let src = x.as_slice().unwrap();
    let at = |c: usize, t: usize| &src[(c * t_len + t) * plane..(c * t_len + t + 1) * plane];
    let c_out = conv.c_out();
    let mut out = Array4::<f32>::zeros((c_out, t_len, h, w));
    let mut frame = vec![0f32; c_out * plane];
    let mut mid = vec![0f32; c_in * plane];
    for t in 0..t_len {
        frame.fill(0.0);
        let inputs = (0..taps).filter_map(|k| (t + k).checked_sub(lag).filter(|&s| s < t_len).map(|s| (k, s)));
        match &conv.kernel {
            TemporalKernel::Full(kernel) => {
                for (k, s) in inputs {
                    for co in 0..c_out {
                        let o = &mut frame[co * plane..(co + 1) * plane];
                        for ci in 0..c_in {
                            axpy(o, kernel[[co, ci, k]], at(ci, s));
                        }
                    }
                }
            }
            TemporalKernel::Separable { depthwise, pointwise } => {
                mid.fill(0.0);
                for (k, s) in inputs {
                    for ci in 0..c_in {
                        axpy(&mut mid[ci * plane..(ci + 1) * plane], depthwise[[ci, k]], at(ci, s));
                    }
                }
                pointwise_into(&mut frame, &mid, pointwise, plane);
            }
        }
        for co in 0..c_out {
            let b = conv.bias[co];
            let dst = &mut frame[co * plane..(co + 1) * plane];
            dst.iter_mut().for_each(|v| *v += b);
            out.slice_mut(s![co, t, .., ..])
                .as_slice_mut()
                .unwrap()
                .copy_from_slice(dst);
        }
    }
    Ok(out)
}

/// Leading padding for "same" convolution: the total pad is split with the
/// smaller half before the data.
pub fn same_padding(size: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(size);
    (out, total / 2)
}

fn conv2d_plane(
    dst: &mut [f32],
    src: &[f32],
    weights: ndarray::ArrayView2<'_, f32>,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    (pad_y, pad_x): (usize, usize),
    stride: usize,
) {
    let (kh, kw) = weights.dim();
    for ky in 0..kh {
        for kx in 0..kw {
            let wv = weights[[ky, kx]];
            for oy in 0..oh {
                let Some(iy) = (oy * stride + ky).checked_sub(pad_y).filter(|&v| v < h) else {
                    continue;
                };
                let row = &src[iy * w..(iy + 1) * w];
                let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                for (ox, o) in out_row.iter_mut().enumerate() {
                    if let Some(ix) = (ox * stride + kx).checked_sub(pad_x).filter(|&v| v < w) {
                        *o += wv * row[ix];
                    }
                }
            }
        }
    }
}

/// Zero-padded "same" convolution of one `(C, H, W)` frame; output is
/// `ceil(H / stride) x ceil(W / stride)`.
pub fn spatial_conv_frame(x: ArrayView3<'_, f32>, conv: &SpatialConv) -> Result<Array3<f32>> {
    let (c_in, h, w) = x.dim();
    if c_in != conv.c_in() {
        return Err(Error::shape(format!(
            "spatial layer expects {} input channels, got {c_in}",
            conv.c_in()
        )));
    }
    let k = conv.size();
    let (oh, pad_y) = same_padding(h, k, conv.stride);
    let (ow, pad_x) = same_padding(w, k, conv.stride);
    let (plane, oplane) = (h * w, oh * ow);
    let src = std_slice(&x);
    let c_out = conv.c_out();
    let mut out = Array3::<f32>::zeros((c_out, oh, ow));
    let dst = out.as_slice_mut().unwrap();
    match &conv.kernel {
        SpatialKernel::Full(kernel) => {
            for co in 0..c_out {
                for ci in 0..c_in {
                    conv2d_plane(
                        &mut dst[co * oplane..(co + 1) * oplane],
                        &src[ci * plane..(ci + 1) * plane],
                        kernel.slice(s![co, ci, .., ..]),
                        (h, w),
                        (oh, ow),
                        (pad_y, pad_x),
                        conv.stride,
                    );
                }
            }
        }
        SpatialKernel::Separable { depthwise, pointwise } => {
            let mut mid = vec![0f32; c_in * oplane];
            for ci in 0..c_in {
                conv2d_plane(
                    &mut mid[ci * oplane..(ci + 1) * oplane],
                    &src[ci * plane..(ci + 1) * plane],
                    depthwise.slice(s![ci, .., ..]),
                    (h, w),
                    (oh, ow),
                    (pad_y, pad_x),
                    conv.stride,
                );
            }
            pointwise_into(dst, &mid, pointwise, oplane);
        }
    }
    add_bias(&mut out, &conv.bias);
    Ok(out)
}

/// Applies a per-frame operation to every frame of a `(C, T, H, W)` tensor.
pub fn map_frames<F>(x: &Array4<f32>, mut f: F) -> Result<Array4<f32>>
where
    F: FnMut(ArrayView3<'_, f32>) -> Result<Array3<f32>>,
{
    let t_len = x.len_of(Axis(1));
    let mut frames = Vec::with_capacity(t_len);
    for t in 0..t_len {
        frames.push(f(x.index_axis(Axis(1), t))?);
    }
    stack_frames(&frames)
}

/// `T` frames of `(C, H, W)` into `(C, T, H, W)`.
pub fn stack_frames(frames: &[Array3<f32>]) -> Result<Array4<f32>> {
    if frames.is_empty() {
        return Err(Error::shape("no frames to stack"));
    }
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::stack(Axis(1), &views).map_err(|e| Error::shape(e.to_string()))
}

pub fn spatial_conv(x: &Array4<f32>, conv: &SpatialConv) -> Result<Array4<f32>> {
    map_frames(x, |f| spatial_conv_frame(f, conv))
}

/// Normalizes each channel group of one frame over its channels and pixels.
pub fn group_norm_frame(x: ArrayView3<'_, f32>, norm: &GroupNorm) -> Result<Array3<f32>> {
    let (c, h, w) = x.dim();
    if norm.groups == 0 || c % norm.groups != 0 {
        return Err(Error::shape(format!(
            "{c} channels not divisible into {} groups",
            norm.groups
        )));
    }
    if norm.scale.len() != c || norm.shift.len() != c {
        return Err(Error::shape(format!(
            "group norm has {} parameters for {c} channels",
            norm.scale.len()
        )));
    }
    let per_group = c / norm.groups;
    let plane = h * w;
    let src = std_slice(&x);
    let mut out = Array3::<f32>::zeros((c, h, w));
    let dst = out.as_slice_mut().unwrap();
    for g in 0..norm.groups {
        let range = g * per_group * plane..(g + 1) * per_group * plane;
        let vals = &src[range.clone()];
        let n = vals.len() as f64;
        let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + norm.eps as f64).sqrt();
        for c_local in 0..per_group {
            let ch = g * per_group + c_local;
            let (scale, shift) = (norm.scale[ch], norm.shift[ch]);
            let lo = ch * plane;
            for i in lo..lo + plane {
                dst[i] = ((src[i] as f64 - mean) * inv) as f32 * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Group normalization with statistics taken per frame, never across time.
pub fn group_norm_frames(x: &Array4<f32>, norm: &GroupNorm) -> Result<Array4<f32>> {
    map_frames(x, |f| group_norm_frame(f, norm))
}

pub fn batch_norm_frame(x: ArrayView3<'_, f32>, norm: &BatchNorm) -> Result<Array3<f32>> {
    let c = x.dim().0;
    if [&norm.scale, &norm.shift, &norm.mean, &norm.var]
        .iter()
        .any(|p| p.len() != c)
    {
        return Err(Error::shape(format!(
            "batch norm parameters do not match {c} channels"
        )));
    }
    let mut out = x.to_owned();
    for (ch, mut plane) in out.outer_iter_mut().enumerate() {
        let inv = 1.0 / (norm.var[ch] + norm.eps).sqrt();
        let (mean, scale, shift) = (norm.mean[ch], norm.scale[ch], norm.shift[ch]);
        plane.mapv_inplace(|v| scale * (v - mean) * inv + shift);
    }
    Ok(out)
}

/// Inference-mode batch normalization with fixed statistics.
pub fn batch_norm_inference(x: &Array4<f32>, norm: &BatchNorm) -> Result<Array4<f32>> {
    map_frames(x, |f| batch_norm_frame(f, norm))
}

pub fn relu_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f32, D>) {
    x.mapv_inplace(|v| v.max(0.0));
}

pub fn sigmoid_inplace<D: ndarray::Dimension>(x: &mut ndarray::Array<f32, D>) {
    x.mapv_inplace(|v| 1.0 / (1.0 + (-v).exp()));
}

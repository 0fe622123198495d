//! Naive reference implementations shared by the integration tests. Every
//! loop here follows the defining sums directly, with no shared code from
//! the library's fast paths.
#![allow(dead_code)]

use evtrack::binning::{BinGrid, BinningMode};
use evtrack::events::{Event, EventSegment, Polarity, SensorGeometry};
use evtrack::network::{
    init_model, Model, ModelConfig, ModelWeights, SpatialConv, SpatialKernel, TemporalConv, TemporalKernel,
};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sparse non-negative input resembling binned event counts.
pub fn event_like(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), density: f64) -> Array4<f32> {
    Array4::from_shape_simple_fn(shape, || {
        if rng.gen_bool(density) {
            rng.gen_range(0.0f32..3.0)
        } else {
            0.0
        }
    })
}

pub fn uniform4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0f32..1.0))
}

/// Seeded weights with every bias, norm parameter and running statistic
/// drawn at random, so no term of the forward pass is trivially zero.
pub fn random_model(config: ModelConfig, seed: u64) -> Model {
    let mut weights: ModelWeights = init_model(&config, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for t in weights.iter_mut() {
        let suffix = t.name.rsplit('.').next().unwrap().to_string();
        match suffix.as_str() {
            "bias" | "norm_shift" | "running_mean" => t.data.mapv_inplace(|_| r.gen_range(-0.3..0.3)),
            "norm_scale" => t.data.mapv_inplace(|_| r.gen_range(0.5..1.5)),
            "running_var" => t.data.mapv_inplace(|_| r.gen_range(0.5..2.0)),
            _ => {}
        }
    }
    Model::new(config, &weights).unwrap()
}

pub fn random_segment(rng: &mut ChaCha8Rng, geometry: SensorGeometry, n: usize, t_start: u64, t_span: u64) -> EventSegment {
    let mut times: Vec<u64> = (0..n).map(|_| t_start + rng.gen_range(0..=t_span)).collect();
    times.sort_unstable();
    let events = times
        .into_iter()
        .map(|t| {
            let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            Event::new(t, rng.gen_range(0..geometry.width), rng.gen_range(0..geometry.height), p)
        })
        .collect();
    EventSegment::new(events, geometry).unwrap()
}

fn tri(chi: f64) -> f64 {
    (1.0 - chi.abs()).max(0.0)
}

/// V+/V- by visiting every bin and summing every event's contribution.
pub fn binning_oracle(segment: &EventSegment, grid: &BinGrid, mode: BinningMode) -> Array4<f32> {
    let mut out = Array4::<f32>::zeros((2, grid.frames, grid.height, grid.width));
    for c in 0..2 {
        for m in 0..grid.frames {
            let t_b = grid.t0 + m as u64 * grid.dt as u64;
            for i in 0..grid.height {
                let y_b = (i as f64 + 0.5) * grid.dy as f64 - 0.5;
                for j in 0..grid.width {
                    let x_b = (j as f64 + 0.5) * grid.dx as f64 - 0.5;
                    let mut v = 0.0f64;
                    for e in segment.events() {
                        let channel = if e.p == Polarity::Positive { 0 } else { 1 };
                        if channel != c {
                            continue;
                        }
                        match mode {
                            BinningMode::Direct => {
                                // the frame whose interval (t_b - dt, t_b] holds the event
                                let opens = t_b as i64 - grid.dt as i64;
                                let hit = (e.x / grid.dx) as usize == j
                                    && (e.y / grid.dy) as usize == i
                                    && (opens < e.t as i64 && e.t <= t_b);
                                if hit {
                                    v += 1.0;
                                }
                            }
                            _ => {
                                let tau = (t_b as i64 - e.t as i64) as f64 / grid.dt as f64;
                                let kt = match mode {
                                    BinningMode::CausalVolume if tau < 0.0 => 0.0,
                                    _ => tri(tau),
                                };
                                let kx = tri((x_b - e.x as f64) / grid.dx as f64);
                                let ky = tri((y_b - e.y as f64) / grid.dy as f64);
                                v += kx * ky * kt;
                            }
                        }
                    }
                    out[[c, m, i, j]] = v as f32;
                }
            }
        }
    }
    out
}

/// Counts every multiply performed by the reference convolutions.
#[derive(Debug, Default)]
pub struct Counter {
    pub multiplies: u64,
}

/// Causal temporal convolution straight from the definition: output frame
/// `t` sums taps `k` over input frame `t - (k_t - 1) + k`, zero before 0.
pub fn temporal_reference(x: &Array4<f32>, conv: &TemporalConv, counter: &mut Counter) -> Array4<f32> {
    let (c_in, t_len, h, w) = x.dim();
    let kt = conv.taps();
    let c_out = conv.c_out();
    let read = |ci: usize, t: usize, k: usize, yy: usize, xx: usize| -> f64 {
        let src = t as i64 - (kt as i64 - 1) + k as i64;
        if src < 0 {
            0.0
        } else {
            x[[ci, src as usize, yy, xx]] as f64
        }
    };
    let mut out = Array4::<f32>::zeros((c_out, t_len, h, w));
    for t in 0..t_len {
        for yy in 0..h {
            for xx in 0..w {
                match &conv.kernel {
                    TemporalKernel::Full(kernel) => {
                        for co in 0..c_out {
                            let mut acc = conv.bias[co] as f64;
                            for ci in 0..c_in {
                                for k in 0..kt {
                                    acc += kernel[[co, ci, k]] as f64 * read(ci, t, k, yy, xx);
                                    counter.multiplies += 1;
                                }
                            }
                            out[[co, t, yy, xx]] = acc as f32;
                        }
                    }
                    TemporalKernel::Separable { depthwise, pointwise } => {
                        let mut mid = vec![0f64; c_in];
                        for (ci, m) in mid.iter_mut().enumerate() {
                            for k in 0..kt {
                                *m += depthwise[[ci, k]] as f64 * read(ci, t, k, yy, xx);
                                counter.multiplies += 1;
                            }
                        }
                        for co in 0..c_out {
                            let mut acc = conv.bias[co] as f64;
                            for (ci, m) in mid.iter().enumerate() {
                                acc += pointwise[[co, ci]] as f64 * m;
                                counter.multiplies += 1;
                            }
                            out[[co, t, yy, xx]] = acc as f32;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded "same" convolution: `ceil(n / s)` outputs, the total padding
/// split with the smaller half first.
pub fn spatial_reference_frame(x: &Array3<f32>, conv: &SpatialConv, counter: &mut Counter) -> Array3<f32> {
    let (c_in, h, w) = x.dim();
    let k = conv.size();
    let s = conv.stride;
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let pad_y = ((oh - 1) * s + k).saturating_sub(h) / 2;
    let pad_x = ((ow - 1) * s + k).saturating_sub(w) / 2;
    let read = |ci: usize, oy: usize, ox: usize, ky: usize, kx: usize| -> f64 {
        let yy = (oy * s + ky) as i64 - pad_y as i64;
        let xx = (ox * s + kx) as i64 - pad_x as i64;
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            x[[ci, yy as usize, xx as usize]] as f64
        }
    };
    let c_out = conv.c_out();
    let mut out = Array3::<f32>::zeros((c_out, oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            match &conv.kernel {
                SpatialKernel::Full(kernel) => {
                    for co in 0..c_out {
                        let mut acc = conv.bias[co] as f64;
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    acc += kernel[[co, ci, ky, kx]] as f64 * read(ci, oy, ox, ky, kx);
                                    counter.multiplies += 1;
                                }
                            }
                        }
                        out[[co, oy, ox]] = acc as f32;
                    }
                }
                SpatialKernel::Separable { depthwise, pointwise } => {
                    let mut mid = vec![0f64; c_in];
                    for (ci, m) in mid.iter_mut().enumerate() {
                        for ky in 0..k {
                            for kx in 0..k {
                                *m += depthwise[[ci, ky, kx]] as f64 * read(ci, oy, ox, ky, kx);
                                counter.multiplies += 1;
                            }
                        }
                    }
                    for co in 0..c_out {
                        let mut acc = conv.bias[co] as f64;
                        for (ci, m) in mid.iter().enumerate() {
                            acc += pointwise[[co, ci]] as f64 * m;
                            counter.multiplies += 1;
                        }
                        out[[co, oy, ox]] = acc as f32;
                    }
                }
            }
        }
    }
    out
}

pub fn spatial_reference(x: &Array4<f32>, conv: &SpatialConv, counter: &mut Counter) -> Array4<f32> {
    let frames: Vec<Array3<f32>> = (0..x.dim().1)
        .map(|t| spatial_reference_frame(&x.index_axis(ndarray::Axis(1), t).to_owned(), conv, counter))
        .collect();
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::stack(ndarray::Axis(1), &views).unwrap()
}

fn group_norm_reference(x: &mut Array4<f32>, groups: usize, scale: &[f32], shift: &[f32], eps: f32) {
    let (c, t_len, h, w) = x.dim();
    let per = c / groups;
    for t in 0..t_len {
        for g in 0..groups {
            let mut vals = Vec::new();
            for ch in g * per..(g + 1) * per {
                for yy in 0..h {
                    for xx in 0..w {
                        vals.push(x[[ch, t, yy, xx]] as f64);
                    }
                }
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            for ch in g * per..(g + 1) * per {
                for yy in 0..h {
                    for xx in 0..w {
                        let v = (x[[ch, t, yy, xx]] as f64 - mean) / (var + eps as f64).sqrt();
                        x[[ch, t, yy, xx]] = (v * scale[ch] as f64 + shift[ch] as f64) as f32;
                    }
                }
            }
        }
    }
}

fn relu(x: &mut Array4<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// The whole network evaluated with the reference convolutions.
pub fn model_reference(model: &Model, x: &Array4<f32>, counter: &mut Counter) -> Array4<f32> {
    let mut cur = x.clone();
    for b in &model.blocks {
        let mut mid = temporal_reference(&cur, &b.temporal, counter);
        let gn = &b.group_norm;
        group_norm_reference(&mut mid, gn.groups, gn.scale.as_slice().unwrap(), gn.shift.as_slice().unwrap(), gn.eps);
        relu(&mut mid);
        let mut out = spatial_reference(&mid, &b.spatial, counter);
        let bn = &b.batch_norm;
        for ((mut plane, &m), ((&v, &s), &sh)) in out
            .outer_iter_mut()
            .zip(&bn.mean)
            .zip(bn.var.iter().zip(&bn.scale).zip(&bn.shift))
        {
            plane.mapv_inplace(|a| ((a as f64 - m as f64) / (v as f64 + bn.eps as f64).sqrt() * s as f64 + sh as f64) as f32);
        }
        relu(&mut out);
        cur = out;
    }
    let h = &model.head;
    let mut smoothed = temporal_reference(&cur, &h.temporal, counter);
    let gn = &h.group_norm;
    group_norm_reference(&mut smoothed, gn.groups, gn.scale.as_slice().unwrap(), gn.shift.as_slice().unwrap(), gn.eps);
    relu(&mut smoothed);
    let mut hidden = spatial_reference(&smoothed, &h.hidden, counter);
    relu(&mut hidden);
    let mut out = spatial_reference(&hidden, &h.output, counter);
    out.mapv_inplace(|v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32);
    out
}

pub fn max_abs_diff<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>, b: &ndarray::Array<f32, D>) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b).fold(0f32, |m, (x, y)| m.max((x - y).abs()))
}

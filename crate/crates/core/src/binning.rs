//! Event-volume binning into dense `(2, T, H, W)` tensors.
//!
//! Each event spreads unit mass over neighbouring bins with a triangle kernel
//! in x, y and t. The causal mode gates the temporal kernel with a step
//! function, so a bin centred at `t_b` only sees events with `t_i <= t_b` and
//! can be emitted as soon as its centre time has passed.
//!
//! Bin `j` along x is centred at `(j + 0.5) * dx - 0.5` pixels, which makes a
//! downsample factor of 1 an identity binning. Frame `m` is centred at
//! `t0 + m * dt`.

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{EventSegment, SensorGeometry};

pub const DEFAULT_DT_US: u32 = 10_000;
pub const DEFAULT_DOWNSAMPLE: u32 = 5;

/// Symmetric triangle filter `max(1 - |chi|, 0)`.
pub fn triangle_kernel(chi: f64) -> f64 {
    (1.0 - chi.abs()).max(0.0)
}

/// Half triangle: zero for `tau < 0`, one at `tau == 0`, falling to zero at `tau == 1`.
pub fn causal_triangle_kernel(tau: f64) -> f64 {
    if tau < 0.0 {
        0.0
    } else {
        triangle_kernel(tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningMode {
    CausalVolume,
    SymmetricVolume,
    Direct,
}

impl std::str::FromStr for BinningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" | "causal_volume" => Ok(BinningMode::CausalVolume),
            "symmetric" | "symmetric_volume" | "volume" => Ok(BinningMode::SymmetricVolume),
            "direct" => Ok(BinningMode::Direct),
            other => Err(Error::config(format!("unknown binning mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinGrid {
    /// Centre time of frame 0, microseconds.
    pub t0: u64,
    /// Frame spacing, microseconds.
    pub dt: u32,
    pub dx: u32,
    pub dy: u32,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl BinGrid {
    /// Grid covering `geometry` at a square downsample factor.
    pub fn covering(
        geometry: SensorGeometry,
        downsample: u32,
        dt: u32,
        t0: u64,
        frames: usize,
    ) -> Result<Self> {
        if downsample == 0 {
            return Err(Error::config("downsample factor must be positive"));
        }
        let grid = BinGrid {
            t0,
            dt,
            dx: downsample,
            dy: downsample,
            frames,
            height: geometry.height.div_ceil(downsample) as usize,
            width: geometry.width.div_ceil(downsample) as usize,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Number of frames needed so the last event reaches a bin centre at or after it.
    pub fn frames_to_cover(t0: u64, dt: u32, last_event: u64) -> usize {
        if last_event <= t0 {
            1
        } else {
            (last_event - t0).div_ceil(dt as u64) as usize + 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dt == 0 || self.dx == 0 || self.dy == 0 {
            return Err(Error::config("bin sizes must be positive"));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("bin grid is empty"));
        }
        Ok(())
    }

    pub fn frame_time(&self, m: usize) -> u64 {
        self.t0 + m as u64 * self.dt as u64
    }

    pub fn frame_times(&self) -> Vec<u64> {
        (0..self.frames).map(|m| self.frame_time(m)).collect()
    }

    /// Signed offset `t_b - t` in microseconds for frame `m`.
    fn time_offset(&self, m: usize, t: u64) -> i64 {
        self.frame_time(m) as i64 - t as i64
    }

    fn x_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dx as f64 - 0.5
    }

    fn y_center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dy as f64 - 0.5
    }
}

/// Binned events. Channel 0 holds positive polarity, channel 1 negative.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTensor {
    pub data: Array4<f32>,
    pub grid: BinGrid,
}

impl EventTensor {
    pub fn frames(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    /// One `(2, H, W)` input frame.
    pub fn frame(&self, m: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(1), m)
    }

    pub fn frame_owned(&self, m: usize) -> Array3<f32> {
        self.frame(m).to_owned()
    }
}

/// Range of bin indices `lo..=hi` within `[0, n)` around a fractional position.
fn neighbourhood(pos: f64, n: usize) -> std::ops::Range<usize> {
    let base = pos.floor() as i64;
    let lo = (base - 1).max(0);
    let hi = (base + 2).min(n as i64);
    if hi <= lo {
        0..0
    } else {
        lo as usize..hi as usize
    }
}

pub fn bin_events(segment: &EventSegment, grid: &BinGrid, mode: BinningMode) -> Result<EventTensor> {
    grid.validate()?;
    let geometry = segment.geometry();
    if (grid.width as u64) * (grid.dx as u64) < geometry.width as u64
        || (grid.height as u64) * (grid.dy as u64) < geometry.height as u64
    {
        return Err(Error::config(format!(
            "{}x{} bins of {}x{} px do not cover the {}x{} sensor",
            grid.width, grid.height, grid.dx, grid.dy, geometry.width, geometry.height
        )));
    }

    // 64-bit accumulation keeps the per-bin sums independent of traversal details.
    let mut acc = Array4::<f64>::zeros((2, grid.frames, grid.height, grid.width));
    let (dx, dy, dt) = (grid.dx as f64, grid.dy as f64, grid.dt as f64);

    for e in segment.events() {
        let c = e.p.channel();
        if mode == BinningMode::Direct {
            let (i, j) = ((e.y / grid.dy) as usize, (e.x / grid.dx) as usize);
            let diff = e.t as i64 - grid.t0 as i64;
            // nearest frame centre at or after the event
            let m = -((-diff).div_euclid(grid.dt as i64));
            if (0..grid.frames as i64).contains(&m) && i < grid.height && j < grid.width {
                acc[[c, m as usize, i, j]] += 1.0;
            }
            continue;
        }

        let xs = neighbourhood((e.x as f64 + 0.5) / dx, grid.width);
        let ys = neighbourhood((e.y as f64 + 0.5) / dy, grid.height);
        let ms = neighbourhood((e.t as f64 - grid.t0 as f64) / dt, grid.frames);
        for m in ms {
            let tau = grid.time_offset(m, e.t) as f64 / dt;
            let kt = match mode {
                BinningMode::CausalVolume => causal_triangle_kernel(tau),
                _ => triangle_kernel(tau),
            };
            if kt == 0.0 {
                continue;
            }
            for i in ys.clone() {
                let ky = triangle_kernel((grid.y_center(i) - e.y as f64) / dy);
                if ky == 0.0 {
                    continue;
                }
                for j in xs.clone() {
                    let kx = triangle_kernel((grid.x_center(j) - e.x as f64) / dx);
                    let w = kx * ky * kt;
                    if w != 0.0 {
                        acc[[c, m, i, j]] += w;
                    }
                }
            }
        }
    }

    Ok(EventTensor {
        data: acc.mapv(|v| v as f32),
        grid: *grid,
    })
}

pub const TENSOR_MAGIC: &[u8; 4] = b"EVT1";
pub const TENSOR_VERSION: u32 = 1;
const HEADER_WORDS: usize = 7;
const HEADER_BYTES: usize = 4 + 4 * HEADER_WORDS;

/// Contents of an EVT1 file. The file records the frame spacing but not the
/// grid origin or spatial bin size.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dt_us: u32,
    pub data: Array4<f32>,
}

/// EVT1 layout: magic, then `version, C, T, H, W, dt_us, reserved` as
/// little-endian u32, then `C*T*H*W` little-endian f32 in row-major order.
pub fn write_tensor(tensor: &EventTensor) -> Vec<u8> {
    write_stored(tensor.grid.dt, &tensor.data)
}

pub fn write_stored(dt_us: u32, data: &Array4<f32>) -> Vec<u8> {
    let (c, t, h, w) = data.dim();
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    for word in [TENSOR_VERSION, c as u32, t as u32, h as u32, w as u32, dt_us, 0] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    for v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_tensor(bytes: &[u8]) -> Result<StoredTensor> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let word = |k: usize| {
        let at = 4 + 4 * k;
        u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
    };
    let [version, c, t, h, w, dt_us, reserved] = std::array::from_fn(word);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if c != 2 {
        return Err(Error::Format(format!("expected 2 polarity channels, found {c}")));
    }
    if reserved != 0 {
        return Err(Error::Format("reserved header word must be zero".into()));
    }
    let count = [c, t, h, w]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::Format("tensor dimensions overflow".into()))?;
    let payload = &bytes[HEADER_BYTES..];
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            count * 4
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let data = Array4::from_shape_vec((c as usize, t as usize, h as usize, w as usize), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(StoredTensor { dt_us, data })
}

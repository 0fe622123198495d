//! Online inference, one frame at a time.
//!
//! Every temporal layer, including the head's smoothing layer, keeps a FIFO
//! of its last `k_t` input frames. A step pushes the newest frame, drops the
//! oldest and contracts the window with the kernel. Zero-initialised buffers
//! play the role of the offline pass's zero pre-padding, so the outputs match
//! the offline forward pass frame by frame.

use std::collections::VecDeque;

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};
use crate::network::layers::{
    batch_norm_frame, group_norm_frame, relu_inplace, sigmoid_inplace, spatial_conv_frame,
    temporal_contract,
};
use crate::network::model::frame_stage;
use crate::network::{LayerKind, Model, TemporalConv, Tap};

#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    /// One FIFO per temporal layer, oldest frame first.
    fifos: Vec<VecDeque<Array3<f32>>>,
    frames: u64,
}

impl StreamState {
    pub fn fifos(&self) -> &[VecDeque<Array3<f32>>] {
        &self.fifos
    }

    /// Frames consumed since init or the last reset.
    pub fn frames_seen(&self) -> u64 {
        self.frames
    }

    /// Number of buffered scalars.
    pub fn len(&self) -> usize {
        self.fifos
            .iter()
            .flat_map(|f| f.iter())
            .map(|a| a.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn stream_init(model: &Model) -> StreamState {
    let fifos = model
        .config()
        .layers()
        .iter()
        .filter(|l| l.kind == LayerKind::Temporal)
        .map(|l| {
            (0..l.kernel)
                .map(|_| Array3::zeros((l.c_in, l.in_height, l.in_width)))
                .collect()
        })
        .collect();
    StreamState { fifos, frames: 0 }
}

pub fn stream_reset(state: &mut StreamState) {
    for fifo in &mut state.fifos {
        for f in fifo.iter_mut() {
            f.fill(0.0);
        }
    }
    state.frames = 0;
}

/// Consumes one `(2, H, W)` frame and returns this frame's `(3, rows, cols)`
/// head output.
pub fn stream_step(model: &Model, state: &mut StreamState, frame: ArrayView3<'_, f32>) -> Result<Array3<f32>> {
    stream_step_with(model, state, frame, &mut ())
}

/// As [`stream_step`], reporting every stage to `tap` with a time axis of length 1.
pub fn stream_step_with(
    model: &Model,
    state: &mut StreamState,
    frame: ArrayView3<'_, f32>,
    tap: &mut dyn Tap,
) -> Result<Array3<f32>> {
    model.check_input_frame(frame.dim())?;
    if state.fifos.len() != model.blocks.len() + 1 {
        return Err(Error::shape(format!(
            "stream state has {} buffers, model has {} temporal layers",
            state.fifos.len(),
            model.blocks.len() + 1
        )));
    }
    let mut cur = frame.to_owned();
    frame_stage(tap, "input", &cur);
    for (i, block) in model.blocks.iter().enumerate() {
        let mut mid = group_norm_frame(
            push_and_contract(&mut state.fifos[i], cur, &block.temporal)?.view(),
            &block.group_norm,
        )?;
        relu_inplace(&mut mid);
        frame_stage(tap, &format!("block{}.temporal", i + 1), &mid);
        cur = batch_norm_frame(spatial_conv_frame(mid.view(), &block.spatial)?.view(), &block.batch_norm)?;
        relu_inplace(&mut cur);
        frame_stage(tap, &format!("block{}.spatial", i + 1), &cur);
    }
    let head = &model.head;
    let last = state.fifos.len() - 1;
    let mut smoothed = group_norm_frame(
        push_and_contract(&mut state.fifos[last], cur, &head.temporal)?.view(),
        &head.group_norm,
    )?;
    relu_inplace(&mut smoothed);
    frame_stage(tap, "head.temporal", &smoothed);
    let mut hidden = spatial_conv_frame(smoothed.view(), &head.hidden)?;
    relu_inplace(&mut hidden);
    frame_stage(tap, "head.spatial", &hidden);
    let mut out = spatial_conv_frame(hidden.view(), &head.output)?;
    sigmoid_inplace(&mut out);
    frame_stage(tap, "head.output", &out);
    state.frames += 1;
    Ok(out)
}

fn push_and_contract(
    fifo: &mut VecDeque<Array3<f32>>,
    frame: Array3<f32>,
    conv: &TemporalConv,
) -> Result<Array3<f32>> {
    let expected = fifo.front().map(|f| f.dim());
    if expected != Some(frame.dim()) {
        return Err(Error::shape(format!(
            "frame {:?} does not fit buffer of {:?}",
            frame.dim(),
            expected
        )));
    }
    fifo.pop_front();
    fifo.push_back(frame);
    let window: Vec<ArrayView3<'_, f32>> = fifo.iter().map(|f| f.view()).collect();
    temporal_contract(&window, conv)
}

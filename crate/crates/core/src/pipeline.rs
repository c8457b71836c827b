//! End-to-end wiring: from a key-frame pair plus its inter-frame events to
//! voxel inputs, flow pyramids and synthesized frames.

use crate::biofnet::{
    eif_biofnet_forward, BiOFInput, FlowPyramids, ForwardOptions, PyramidConfig,
};
use crate::error::{Error, Result};
use crate::event::{reverse_events, split_events, voxelize, EventStream};
use crate::flow::{rescale_flow, FlowField, Frame};
use crate::params::ParamStore;
use crate::synthesis::{synthesis_forward, AttentionConfig};
use crate::tensor::{Tape, Tensor};

pub const VOXEL_BINS: usize = 16;

/// The three voxel-grid network inputs for one interpolation query.
pub struct VoxelInputs {
    pub g_0t: Tensor,
    pub g_t0: Tensor,
    pub g_t1: Tensor,
}

/// Split the pair's events at `t_mid`, reverse the left stream, and
/// voxelize all three over their own windows.
pub fn voxel_inputs(
    events: &EventStream,
    t_mid: u64,
    bins: usize,
    height: usize,
    width: usize,
) -> Result<VoxelInputs> {
    let (left, right) = split_events(events, t_mid)?;
    let reversed = reverse_events(&left);
    let g_0t = voxelize(&left, left.t_start, left.t_end, bins, height, width)?;
    let g_t0 = voxelize(&reversed, reversed.t_start, reversed.t_end, bins, height, width)?;
    let g_t1 = voxelize(&right, right.t_start, right.t_end, bins, height, width)?;
    Ok(VoxelInputs {
        g_0t: g_0t.as_input(),
        g_t0: g_t0.as_input(),
        g_t1: g_t1.as_input(),
    })
}

/// Both trained models plus their configurations.
pub struct Pipeline {
    pub flow_cfg: PyramidConfig,
    pub flow_params: ParamStore,
    pub synth_cfg: AttentionConfig,
    pub synth_params: Option<ParamStore>,
    pub bins: usize,
}

impl Pipeline {
    /// Flow pyramids for a pair; `events` must span exactly `[t_a, t_b]`.
    pub fn flow_forward(
        &self,
        i0: &Frame,
        i1: &Frame,
        events: &EventStream,
        t_mid: u64,
        opts: ForwardOptions,
    ) -> Result<FlowPyramids> {
        let (h, w) = (i0.height(), i0.width());
        let vox = voxel_inputs(events, t_mid, self.bins, h, w)?;
        let mut tape = Tape::no_grad();
        let params = self.flow_params.bind_frozen();
        let i0t = i0.as_input();
        let i1t = i1.as_input();
        let input = BiOFInput {
            i0: &i0t,
            i1: &i1t,
            g_0t: &vox.g_0t,
            g_t0: &vox.g_t0,
            g_t1: &vox.g_t1,
        };
        eif_biofnet_forward(&mut tape, &self.flow_cfg, &params, &input, opts)
    }

    /// Full-resolution bidirectional flows (finest pyramid level rescaled
    /// up by 2).
    pub fn full_res_flows(
        &self,
        i0: &Frame,
        i1: &Frame,
        events: &EventStream,
        t_mid: u64,
        opts: ForwardOptions,
    ) -> Result<(FlowField, FlowField)> {
        let pyr = self.flow_forward(i0, i1, events, t_mid, opts)?;
        let (v0, v1) = pyr.finest();
        let mut tape = Tape::no_grad();
        let v0 = rescale_flow(&mut tape, v0, 2.0)?;
        let v1 = rescale_flow(&mut tape, v1, 2.0)?;
        let to_field = |t: &Tensor| {
            let sh = t.shape();
            FlowField::new(t.view(vec![2, sh[2], sh[3]]))
        };
        Ok((to_field(&v0)?, to_field(&v1)?))
    }

    /// Interpolate at `t_mid`; returns the multi-scale predictions,
    /// coarsest first, the last at full resolution.
    pub fn interpolate(
        &self,
        i0: &Frame,
        i1: &Frame,
        events: &EventStream,
        t_mid: u64,
    ) -> Result<Vec<Frame>> {
        let synth = self
            .synth_params
            .as_ref()
            .ok_or_else(|| Error::invalid("pipeline", "no synthesis checkpoint loaded"))?;
        let (h, w) = (i0.height(), i0.width());
        let vox = voxel_inputs(events, t_mid, self.bins, h, w)?;
        let mut tape = Tape::no_grad();
        let flow_params = self.flow_params.bind_frozen();
        let i0t = i0.as_input();
        let i1t = i1.as_input();
        let input = BiOFInput {
            i0: &i0t,
            i1: &i1t,
            g_0t: &vox.g_0t,
            g_t0: &vox.g_t0,
            g_t1: &vox.g_t1,
        };
        let flows = eif_biofnet_forward(
            &mut tape,
            &self.flow_cfg,
            &flow_params,
            &input,
            ForwardOptions::default(),
        )?;
        let synth_bound = synth.bind_frozen();
        let outs = synthesis_forward(
            &mut tape,
            &self.synth_cfg,
            &synth_bound,
            &i0t,
            &i1t,
            &vox.g_0t,
            &vox.g_t1,
            &flows,
        )?;
        outs.iter()
            .map(|t| {
                let sh = t.shape();
                Frame::new(t.view(vec![3, sh[2], sh[3]]))
            })
            .collect()
    }
}

//! Per-step engine math shared by the in-process sampler and the protocol
//! server: descriptors, flows, masks, value injection, and the guidance term.

use crate::attention::{ama_with_diagnostics, AmaOutput, AttentionInputs};
use crate::consistency::{cycle_confidence, foreground_mask, semantic_consistent_mask, ConsistencyParams};
use crate::error::{Error, Result};
use crate::guidance::{
    align_reference_z0, apply_guidance, guidance_energy, guidance_gradient, predict_z0, GuidanceParams,
    NoiseSchedule,
};
use crate::matching::{assemble_descriptors, bidirectional_flow, DescriptorPair, FlowPair};
use crate::tensors::{FlowField, MaskGrid, TensorGrid};

/// Matching results of one step at descriptor resolution.
#[derive(Debug, Clone)]
pub struct MatchState {
    pub resolution: (usize, usize),
    pub descriptors: DescriptorPair,
    pub flows: FlowPair,
    /// Foreground mask `M_t`.
    pub m_t: MaskGrid,
    /// Cycle confidence `U_t`.
    pub u_t: MaskGrid,
    /// `M′_t = M_t ⊙ U_t`.
    pub m_prime: MaskGrid,
}

/// Descriptor resolution for a set of feature layers: the finest one.
pub fn descriptor_resolution(feats: &[TensorGrid]) -> Result<(usize, usize)> {
    feats
        .iter()
        .map(|g| (g.height(), g.width()))
        .max_by_key(|&(h, w)| h * w)
        .ok_or_else(|| Error::validation("no descriptor feature layers"))
}

pub fn match_step(
    ref_feats: &[TensorGrid],
    tgt_feats: &[TensorGrid],
    cross_attn: &[TensorGrid],
    pca_dim: usize,
    params: &ConsistencyParams,
) -> Result<MatchState> {
    let resolution = descriptor_resolution(ref_feats)?;
    let descriptors = assemble_descriptors(ref_feats, tgt_feats, resolution, pca_dim)?;
    let flows = bidirectional_flow(&descriptors.psi_ref, &descriptors.psi_tgt)?;
    let m_t = foreground_mask(cross_attn, params, resolution)?;
    let u_t = cycle_confidence(&flows.ref_to_target, &flows.target_to_ref, &m_t, params)?;
    let m_prime = semantic_consistent_mask(&m_t, &u_t)?;
    Ok(MatchState {
        resolution,
        descriptors,
        flows,
        m_t,
        u_t,
        m_prime,
    })
}

impl MatchState {
    /// `F^{X→Y}` and `M′` resampled to another grid size.
    pub fn at_resolution(&self, height: usize, width: usize) -> Result<(FlowField, MaskGrid)> {
        Ok((
            self.flows.ref_to_target.resize(height, width)?,
            self.m_prime.resize_binary(height, width)?,
        ))
    }
}

/// Appearance-matching self-attention for one layer, with flow and mask
/// brought to the layer's resolution.
pub fn ama_layer(
    state: &MatchState,
    q_tgt: &TensorGrid,
    k_tgt: &TensorGrid,
    v_tgt: &TensorGrid,
    v_ref: &TensorGrid,
    num_heads: usize,
) -> Result<AmaOutput> {
    let inputs = AttentionInputs::new(q_tgt.clone(), k_tgt.clone(), v_tgt.clone(), v_ref.clone(), num_heads)?;
    let (flow, mask) = state.at_resolution(q_tgt.height(), q_tgt.width())?;
    ama_with_diagnostics(&inputs, &flow, &mask)
}

/// Guidance for one branch: the guided noise prediction, the amount
/// subtracted from it, and the energy before the update.
#[derive(Debug, Clone)]
pub struct GuidanceTerm {
    pub guided_eps: TensorGrid,
    pub delta: TensorGrid,
    pub energy: f64,
    pub grad_norm: f64,
}

pub fn guidance_term(
    state: &MatchState,
    z_t: &TensorGrid,
    eps: &TensorGrid,
    z0_ref: &TensorGrid,
    t: usize,
    sched: &NoiseSchedule,
    params: &GuidanceParams,
) -> Result<GuidanceTerm> {
    let z0_hat = predict_z0(z_t, eps, t, sched)?;
    let aligned = align_reference_z0(z0_ref, &state.flows.ref_to_target)?;
    let mask = state.m_prime.resize_binary(z_t.height(), z_t.width())?;
    let energy = guidance_energy(&aligned, &z0_hat, &mask)?;
    let grad = guidance_gradient(&aligned, &z0_hat, &mask, t, sched)?;
    let grad_norm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
    let guided_eps = apply_guidance(eps, &grad, params, t, sched)?;
    // `guided_eps == eps - delta` bit for bit.
    let weight = params.lambda_g * sched.sigma(t)?;
    let delta = grad.map(|g| weight * g)?;
    Ok(GuidanceTerm {
        guided_eps,
        delta,
        energy,
        grad_norm,
    })
}

//! Self-attention and appearance-matching self-attention.
//!
//! Tokens are the pixels of an `H×W` grid in row-major scan order. With
//! `num_heads` heads the channel axis is split into contiguous blocks of
//! `d / num_heads` channels, one per head.
//!
//! Appearance matching keeps the target's query–key similarity map (the
//! structure path) and only swaps what is aggregated: reference values are
//! warped onto the target by the semantic flow and blended in under the
//! semantic-consistent mask.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matching::warp;
use crate::tensors::{hadamard_blend, FlowField, MaskGrid, TensorGrid};

/// Row-stochastic attention maps, one `N×N` matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    heads: usize,
    tokens: usize,
    data: Vec<f64>,
}

impl AttentionWeights {
    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Weights of query `query` over all keys for head `head`.
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let n = self.tokens;
        let start = (head * n + query) * n;
        &self.data[start..start + n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

fn check_heads(q: &TensorGrid, num_heads: usize) -> Result<usize> {
    if num_heads == 0 || !q.channels().is_multiple_of(num_heads) {
        return Err(Error::shape(format!(
            "{} channels not divisible into {num_heads} heads",
            q.channels()
        )));
    }
    Ok(q.channels() / num_heads)
}

/// `Softmax(QKᵀ/√d_head)` per head.
pub fn attention_weights(q: &TensorGrid, k: &TensorGrid, num_heads: usize) -> Result<AttentionWeights> {
    q.ensure_same_dims(k)?;
    let head_dim = check_heads(q, num_heads)?;
    let n = q.num_pixels();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut data = vec![0.0; num_heads * n * n];

    data.par_chunks_mut(n)
        .enumerate()
        .try_for_each(|(row_idx, row)| -> Result<()> {
            let (head, i) = (row_idx / n, row_idx % n);
            let lo = head * head_dim;
            let qi = &q.token(i)[lo..lo + head_dim];
            for (j, slot) in row.iter_mut().enumerate() {
                let kj = &k.token(j)[lo..lo + head_dim];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                *slot = dot * scale;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::validation(format!(
                    "non-finite attention logit in head {head}, query {i}"
                )));
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            Ok(())
        })?;

    Ok(AttentionWeights {
        heads: num_heads,
        tokens: n,
        data,
    })
}

/// Aggregates `v` with precomputed weights: `out_i = Σ_j w_ij v_j` per head.
pub fn attend(weights: &AttentionWeights, v: &TensorGrid) -> Result<TensorGrid> {
    let n = weights.tokens;
    if v.num_pixels() != n {
        return Err(Error::shape(format!(
            "values have {} tokens, weights expect {n}",
            v.num_pixels()
        )));
    }
    let head_dim = check_heads(v, weights.heads)?;
    let c = v.channels();
    let mut out = vec![0.0; n * c];
    out.par_chunks_mut(c).enumerate().for_each(|(i, px)| {
        for head in 0..weights.heads {
            let lo = head * head_dim;
            let acc = &mut px[lo..lo + head_dim];
            for (j, &w) in weights.row(head, i).iter().enumerate() {
                let vj = &v.token(j)[lo..lo + head_dim];
                for (a, b) in acc.iter_mut().zip(vj) {
                    *a += w * b;
                }
            }
        }
    });
    TensorGrid::new(v.height(), v.width(), c, out)
}

/// Plain multi-head self-attention.
pub fn self_attention(q: &TensorGrid, k: &TensorGrid, v: &TensorGrid, num_heads: usize) -> Result<TensorGrid> {
    q.ensure_same_dims(v)?;
    let weights = attention_weights(q, k, num_heads)?;
    attend(&weights, v)
}

/// Target queries/keys/values plus the reference values for one layer.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub q_tgt: TensorGrid,
    pub k_tgt: TensorGrid,
    pub v_tgt: TensorGrid,
    pub v_ref: TensorGrid,
    pub num_heads: usize,
}

impl AttentionInputs {
    pub fn new(
        q_tgt: TensorGrid,
        k_tgt: TensorGrid,
        v_tgt: TensorGrid,
        v_ref: TensorGrid,
        num_heads: usize,
    ) -> Result<Self> {
        let inputs = Self {
            q_tgt,
            k_tgt,
            v_tgt,
            v_ref,
            num_heads,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        self.q_tgt.ensure_same_dims(&self.k_tgt)?;
        self.q_tgt.ensure_same_dims(&self.v_tgt)?;
        self.q_tgt.ensure_same_dims(&self.v_ref)?;
        check_heads(&self.q_tgt, self.num_heads)?;
        Ok(())
    }
}

/// Everything computed inside one appearance-matching attention call.
#[derive(Debug, Clone)]
pub struct AmaOutput {
    pub output: TensorGrid,
    /// The target structure path, `Softmax(Q_tgt K_tgtᵀ/√d)`.
    pub weights: AttentionWeights,
    /// Blended values `V^W`.
    pub values: TensorGrid,
}

/// Warps reference values along `flow` and blends them into the target
/// values under `mask`: `V^W = W(V_ref; F) ⊙ M′ + V_tgt ⊙ (1 − M′)`.
pub fn appearance_values(inputs: &AttentionInputs, flow: &FlowField, mask: &MaskGrid) -> Result<TensorGrid> {
    inputs.validate()?;
    blend_values(&inputs.v_tgt, &inputs.v_ref, flow, mask)
}

/// [`appearance_values`] without queries and keys.
pub fn blend_values(v_tgt: &TensorGrid, v_ref: &TensorGrid, flow: &FlowField, mask: &MaskGrid) -> Result<TensorGrid> {
    v_tgt.ensure_same_dims(v_ref)?;
    let (h, w, _) = v_tgt.dims();
    if (flow.height(), flow.width()) != (h, w) || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape(format!(
            "flow {}x{} / mask {}x{} do not match attention grid {h}x{w}",
            flow.height(),
            flow.width(),
            mask.height(),
            mask.width()
        )));
    }
    let warped = warp(v_ref, flow)?;
    hadamard_blend(&warped, v_tgt, mask)
}

/// Appearance-matching self-attention, returning the attention weights and
/// blended values alongside the output.
pub fn ama_with_diagnostics(inputs: &AttentionInputs, flow: &FlowField, mask: &MaskGrid) -> Result<AmaOutput> {
    let values = appearance_values(inputs, flow, mask)?;
    let weights = attention_weights(&inputs.q_tgt, &inputs.k_tgt, inputs.num_heads)?;
    let output = attend(&weights, &values)?;
    Ok(AmaOutput {
        output,
        weights,
        values,
    })
}

/// Appearance-matching self-attention output.
pub fn ama(inputs: &AttentionInputs, flow: &FlowField, mask: &MaskGrid) -> Result<TensorGrid> {
    ama_with_diagnostics(inputs, flow, mask).map(|o| o.output)
}

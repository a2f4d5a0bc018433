//! The denoiser abstraction and its implementations.
//!
//! A [`Denoiser`] returns a noise prediction for `(z, t, cond)` together with
//! whatever internals the caller asks for: decoder features, per-layer
//! self-attention projections, and subject cross-attention maps. Callers may
//! hand back replacement self-attention outputs for selected layers, which the
//! denoiser uses in place of its own when producing the noise prediction.

pub mod protocol;
pub mod server;
pub mod synthetic;

use std::collections::BTreeMap;

pub use synthetic::{SyntheticBackend, SyntheticBackendSpec};

use crate::error::Result;
use crate::tensors::TensorGrid;

/// Opaque conditioning token owned by a backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CondHandle(pub u32);

/// What a denoise call should return besides the noise prediction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub feature_layers: Vec<usize>,
    pub attention_layers: Vec<usize>,
    pub cross_attention: bool,
}

impl Extraction {
    pub fn none() -> Self {
        Self::default()
    }
}

/// Self-attention projections of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub q: TensorGrid,
    pub k: TensorGrid,
    pub v: TensorGrid,
    pub num_heads: usize,
}

#[derive(Debug, Clone)]
pub struct DenoiseRequest<'a> {
    pub z: &'a TensorGrid,
    pub t: usize,
    pub cond: CondHandle,
    pub needs: &'a Extraction,
    /// Replacement self-attention outputs keyed by layer index.
    pub attention_overrides: &'a BTreeMap<usize, TensorGrid>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseResponse {
    pub eps: TensorGrid,
    pub decoder_features: BTreeMap<usize, TensorGrid>,
    pub attention: BTreeMap<usize, Qkv>,
    pub cross_attn_maps: Vec<TensorGrid>,
}

pub trait Denoiser: Send + Sync {
    /// `(H, W, C)` of the latents this denoiser accepts.
    fn latent_dims(&self) -> (usize, usize, usize);

    fn denoise(&self, request: &DenoiseRequest<'_>) -> Result<DenoiseResponse>;

    /// Convenience wrapper for a plain noise prediction.
    fn predict_noise(&self, z: &TensorGrid, t: usize, cond: CondHandle) -> Result<TensorGrid> {
        let needs = Extraction::none();
        let overrides = BTreeMap::new();
        self.denoise(&DenoiseRequest {
            z,
            t,
            cond,
            needs: &needs,
            attention_overrides: &overrides,
        })
        .map(|r| r.eps)
    }
}

//! Deterministic synthetic denoiser for desk-scale testing.
//!
//! The noise prediction is linear in the latent, `ε = A·z + b(t, cond)`, with
//! `A` a per-pixel channel mix of fixed spectral norm. Replacing the output
//! of a self-attention layer adds a fixed linear readout of the difference
//! to the baseline output of that layer, so unpatched calls stay exactly
//! linear.
//!
//! Decoder features and attention inputs carry a shared "subject" texture
//! pasted at a per-condition offset on top of per-condition random
//! background, plus a small bounded latent-dependent term. Two conditions with
//! subjects at different offsets therefore have a known ground-truth
//! correspondence: the difference of their offsets.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{CondHandle, DenoiseRequest, DenoiseResponse, Denoiser, Qkv};
use crate::attention::self_attention;
use crate::error::{Error, Result};
use crate::tensors::{resize_bilinear, MaskGrid, TensorGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayerSpec {
    pub layer: usize,
    /// Integer downsampling factor relative to the latent grid.
    pub downsample: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerSpec {
    pub layer: usize,
    pub downsample: usize,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBackendSpec {
    pub seed: u64,
    pub latent_height: usize,
    pub latent_width: usize,
    pub latent_channels: usize,
    pub feature_layers: Vec<FeatureLayerSpec>,
    pub attention_layers: Vec<AttentionLayerSpec>,
    /// Spectral norm of the linear map `A`; must be below 1.
    pub spectral_norm: f64,
    pub bias_scale: f64,
    /// Side of the square subject patch, in latent pixels.
    pub subject_size: usize,
    /// Weight of the latent-dependent term in features and attention inputs.
    pub latent_feature_weight: f64,
    /// Per-condition perturbation of the subject texture.
    pub appearance_jitter: f64,
    /// Scale of the attention-override readout into the noise prediction.
    pub attention_gain: f64,
}

impl Default for SyntheticBackendSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_height: 16,
            latent_width: 16,
            latent_channels: 4,
            // 1280 + 640 = 1920 concatenated descriptor channels.
            feature_layers: vec![
                FeatureLayerSpec {
                    layer: 2,
                    downsample: 2,
                    channels: 1280,
                },
                FeatureLayerSpec {
                    layer: 3,
                    downsample: 1,
                    channels: 640,
                },
            ],
            attention_layers: vec![
                AttentionLayerSpec {
                    layer: 1,
                    downsample: 4,
                    dim: 64,
                    heads: 4,
                },
                AttentionLayerSpec {
                    layer: 2,
                    downsample: 2,
                    dim: 32,
                    heads: 4,
                },
                AttentionLayerSpec {
                    layer: 3,
                    downsample: 1,
                    dim: 16,
                    heads: 2,
                },
            ],
            spectral_norm: 0.5,
            bias_scale: 0.1,
            subject_size: 6,
            latent_feature_weight: 0.2,
            appearance_jitter: 0.3,
            attention_gain: 0.5,
        }
    }
}

impl SyntheticBackendSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = (self.latent_height, self.latent_width, self.latent_channels);
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::validation("latent dimensions must be positive"));
        }
        if !(self.spectral_norm >= 0.0 && self.spectral_norm < 1.0) {
            return Err(Error::validation(format!(
                "spectral norm must lie in [0, 1), got {}",
                self.spectral_norm
            )));
        }
        if self.subject_size == 0 || self.subject_size > h.min(w) {
            return Err(Error::validation(format!(
                "subject size {} does not fit a {h}x{w} latent",
                self.subject_size
            )));
        }
        let fits = |s: usize| s > 0 && h % s == 0 && w % s == 0;
        for f in &self.feature_layers {
            if !fits(f.downsample) || f.channels == 0 {
                return Err(Error::validation(format!("invalid feature layer {f:?}")));
            }
        }
        for a in &self.attention_layers {
            if !fits(a.downsample) || a.dim == 0 || a.heads == 0 || a.dim % a.heads != 0 {
                return Err(Error::validation(format!("invalid attention layer {a:?}")));
            }
        }
        Ok(())
    }
}

/// Where a condition places the subject, if anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConditionSpec {
    /// Top-left `(y, x)` of the subject patch in latent pixels.
    pub subject_offset: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct Condition {
    spec: ConditionSpec,
    bias: TensorGrid,
    features: BTreeMap<usize, TensorGrid>,
    hidden: BTreeMap<usize, TensorGrid>,
    cross_attn: Vec<TensorGrid>,
}

#[derive(Debug, Clone)]
struct AttentionWeightsSet {
    latent_proj: DMatrix<f64>,
    wq: DMatrix<f64>,
    wk: DMatrix<f64>,
    wv: DMatrix<f64>,
    readout: DMatrix<f64>,
}

/// The synthetic denoiser. Conditions are registered up front; requests with
/// unknown handles fail.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    spec: SyntheticBackendSpec,
    mix: DMatrix<f64>,
    feature_proj: BTreeMap<usize, DMatrix<f64>>,
    attention: BTreeMap<usize, AttentionWeightsSet>,
    conditions: Vec<Condition>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn rng_for(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let key = parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)));
    ChaCha8Rng::seed_from_u64(key)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| gaussian(rng) * scale)
}

/// Averages non-overlapping `s×s` blocks.
fn box_downsample(grid: &TensorGrid, s: usize) -> Result<TensorGrid> {
    if s == 1 {
        return Ok(grid.clone());
    }
    let (h, w, c) = grid.dims();
    let (oh, ow) = (h / s, w / s);
    let norm = (s * s) as f64;
    TensorGrid::from_fn(oh, ow, c, |y, x, ch| {
        let mut acc = 0.0;
        for dy in 0..s {
            for dx in 0..s {
                acc += grid.get(y * s + dy, x * s + dx, ch);
            }
        }
        acc / norm
    })
}

/// Per-pixel right-multiplication `out(p) = grid(p) · m`.
fn project(grid: &TensorGrid, m: &DMatrix<f64>) -> Result<TensorGrid> {
    let (h, w, c) = grid.dims();
    debug_assert_eq!(c, m.nrows());
    let x = DMatrix::from_row_slice(h * w, c, grid.data());
    let y = x * m;
    let mut data = Vec::with_capacity(h * w * m.ncols());
    for row in y.row_iter() {
        data.extend(row.iter().copied());
    }
    TensorGrid::new(h, w, m.ncols(), data)
}

fn add(a: &TensorGrid, b: &TensorGrid) -> Result<TensorGrid> {
    a.zip_map(b, |x, y| x + y)
}

const KIND_MIX: u64 = 1;
const KIND_FEATURE_PROJ: u64 = 2;
const KIND_SUBJECT: u64 = 3;
const KIND_BACKGROUND: u64 = 4;
const KIND_JITTER: u64 = 5;
const KIND_BIAS: u64 = 6;
const KIND_ATTN: u64 = 7;
const KIND_ATTN_SUBJECT: u64 = 8;

impl SyntheticBackend {
    pub fn new(spec: SyntheticBackendSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.latent_channels;
        let mut rng = rng_for(spec.seed, &[KIND_MIX]);
        let raw = gaussian_matrix(&mut rng, c, c, 1.0);
        let top = raw.singular_values().max();
        let mix = if top > 0.0 {
            raw * (spec.spectral_norm / top)
        } else {
            raw
        };

        let feature_proj = spec
            .feature_layers
            .iter()
            .map(|f| {
                let mut rng = rng_for(spec.seed, &[KIND_FEATURE_PROJ, f.layer as u64]);
                (f.layer, gaussian_matrix(&mut rng, c, f.channels, 1.0))
            })
            .collect();

        let attention = spec
            .attention_layers
            .iter()
            .map(|a| {
                let mut rng = rng_for(spec.seed, &[KIND_ATTN, a.layer as u64]);
                let d = a.dim;
                let inv = 1.0 / (d as f64).sqrt();
                let set = AttentionWeightsSet {
                    latent_proj: gaussian_matrix(&mut rng, c, d, 1.0),
                    wq: gaussian_matrix(&mut rng, d, d, inv),
                    wk: gaussian_matrix(&mut rng, d, d, inv),
                    wv: gaussian_matrix(&mut rng, d, d, inv),
                    readout: gaussian_matrix(&mut rng, d, c, spec.attention_gain * inv),
                };
                (a.layer, set)
            })
            .collect();

        Ok(Self {
            spec,
            mix,
            feature_proj,
            attention,
            conditions: Vec::new(),
        })
    }

    pub fn spec(&self) -> &SyntheticBackendSpec {
        &self.spec
    }

    /// Spectral norm of the linear part of the noise prediction.
    pub fn linear_map_norm(&self) -> f64 {
        self.mix.singular_values().max()
    }

    pub fn register_condition(&mut self, spec: ConditionSpec) -> Result<CondHandle> {
        let (h, w) = (self.spec.latent_height, self.spec.latent_width);
        let p = self.spec.subject_size;
        if let Some((oy, ox)) = spec.subject_offset {
            if oy + p > h || ox + p > w {
                return Err(Error::validation(format!(
                    "subject at ({oy}, {ox}) of size {p} leaves the {h}x{w} latent"
                )));
            }
        }
        let id = self.conditions.len() as u64;
        let seed = self.spec.seed;

        let mut rng = rng_for(seed, &[KIND_BIAS, id]);
        let bias_scale = self.spec.bias_scale;
        let bias = TensorGrid::from_fn(h, w, self.spec.latent_channels, |_, _, _| {
            gaussian(&mut rng) * bias_scale
        })?;

        let mut features = BTreeMap::new();
        for f in &self.spec.feature_layers {
            let full = self.semantic_field(spec, id, f.layer as u64, KIND_SUBJECT, f.channels)?;
            features.insert(f.layer, box_downsample(&full, f.downsample)?);
        }
        let mut hidden = BTreeMap::new();
        let mut cross_attn = Vec::new();
        let footprint = self.footprint_grid(spec)?;
        for a in &self.spec.attention_layers {
            let full = self.semantic_field(spec, id, 100 + a.layer as u64, KIND_ATTN_SUBJECT, a.dim)?;
            hidden.insert(a.layer, box_downsample(&full, a.downsample)?);
            cross_attn.push(box_downsample(&footprint, a.downsample)?);
        }

        self.conditions.push(Condition {
            spec,
            bias,
            features,
            hidden,
            cross_attn,
        });
        Ok(CondHandle(id as u32))
    }

    /// Registers a condition without a subject (the unconditional prompt).
    pub fn register_unconditional(&mut self) -> Result<CondHandle> {
        self.register_condition(ConditionSpec::default())
    }

    pub fn register_subject(&mut self, offset: (usize, usize)) -> Result<CondHandle> {
        self.register_condition(ConditionSpec {
            subject_offset: Some(offset),
        })
    }

    /// Binary subject footprint of a condition at latent resolution.
    pub fn subject_footprint(&self, cond: CondHandle) -> Result<MaskGrid> {
        let spec = self.condition(cond)?.spec;
        MaskGrid::from_grid(&self.footprint_grid(spec)?)
    }

    fn footprint_grid(&self, spec: ConditionSpec) -> Result<TensorGrid> {
        let p = self.spec.subject_size;
        TensorGrid::from_fn(self.spec.latent_height, self.spec.latent_width, 1, |y, x, _| {
            match spec.subject_offset {
                Some((oy, ox)) if (oy..oy + p).contains(&y) && (ox..ox + p).contains(&x) => 1.0,
                _ => 0.0,
            }
        })
    }

    /// Full-resolution semantic field: subject texture (shared across
    /// conditions, jittered per condition) inside the patch, per-condition
    /// random background elsewhere.
    fn semantic_field(
        &self,
        spec: ConditionSpec,
        cond_id: u64,
        layer_key: u64,
        subject_kind: u64,
        channels: usize,
    ) -> Result<TensorGrid> {
        let (h, w) = (self.spec.latent_height, self.spec.latent_width);
        let p = self.spec.subject_size;
        let seed = self.spec.seed;
        let mut subj_rng = rng_for(seed, &[subject_kind, layer_key]);
        let subject: Vec<f64> = (0..p * p * channels).map(|_| gaussian(&mut subj_rng)).collect();
        let mut jit_rng = rng_for(seed, &[KIND_JITTER, layer_key, cond_id]);
        let jitter = self.spec.appearance_jitter;
        let jitter: Vec<f64> = (0..p * p * channels)
            .map(|_| gaussian(&mut jit_rng) * jitter)
            .collect();
        let mut bg_rng = rng_for(seed, &[KIND_BACKGROUND, layer_key, cond_id]);
        let background: Vec<f64> = (0..h * w * channels).map(|_| gaussian(&mut bg_rng)).collect();

        TensorGrid::from_fn(h, w, channels, |y, x, c| match spec.subject_offset {
            Some((oy, ox)) if (oy..oy + p).contains(&y) && (ox..ox + p).contains(&x) => {
                let idx = ((y - oy) * p + (x - ox)) * channels + c;
                subject[idx] + jitter[idx]
            }
            _ => background[(y * w + x) * channels + c],
        })
    }

    fn condition(&self, cond: CondHandle) -> Result<&Condition> {
        self.conditions
            .get(cond.0 as usize)
            .ok_or_else(|| Error::Backend(format!("unknown condition handle {}", cond.0)))
    }

    fn attention_spec(&self, layer: usize) -> Result<&AttentionLayerSpec> {
        self.spec
            .attention_layers
            .iter()
            .find(|a| a.layer == layer)
            .ok_or_else(|| Error::Backend(format!("no self-attention layer {layer}")))
    }

    /// `w·tanh(P·z̄/√C)`: bounded, so large latents cannot drown out the
    /// semantic signal.
    fn latent_term(&self, z: &TensorGrid, downsample: usize, proj: &DMatrix<f64>) -> Result<TensorGrid> {
        let weight = self.spec.latent_feature_weight;
        let scale = 1.0 / (self.spec.latent_channels as f64).sqrt();
        project(&box_downsample(z, downsample)?, proj)?.map(|v| weight * (v * scale).tanh())
    }

    fn qkv(&self, z: &TensorGrid, cond: &Condition, layer: usize) -> Result<Qkv> {
        let spec = self.attention_spec(layer)?;
        let set = &self.attention[&layer];
        let hidden = add(&cond.hidden[&layer], &self.latent_term(z, spec.downsample, &set.latent_proj)?)?;
        Ok(Qkv {
            q: project(&hidden, &set.wq)?,
            k: project(&hidden, &set.wk)?,
            v: project(&hidden, &set.wv)?,
            num_heads: spec.heads,
        })
    }
}

impl Denoiser for SyntheticBackend {
    fn latent_dims(&self) -> (usize, usize, usize) {
        (self.spec.latent_height, self.spec.latent_width, self.spec.latent_channels)
    }

    fn denoise(&self, req: &DenoiseRequest<'_>) -> Result<DenoiseResponse> {
        let z = req.z;
        if z.dims() != self.latent_dims() {
            return Err(Error::shape(format!(
                "latent {:?} does not match backend {:?}",
                z.dims(),
                self.latent_dims()
            )));
        }
        let cond = self.condition(req.cond)?;

        let time_scale = 1.0 + 1e-3 * req.t as f64;
        let mixed = project(z, &self.mix.transpose())?;
        let mut eps = mixed.zip_map(&cond.bias, |a, b| a + b * time_scale)?;

        for (&layer, replacement) in req.attention_overrides {
            let qkv = self.qkv(z, cond, layer)?;
            qkv.v.ensure_same_dims(replacement)?;
            let base = self_attention(&qkv.q, &qkv.k, &qkv.v, qkv.num_heads)?;
            let delta = replacement.zip_map(&base, |a, b| a - b)?;
            if delta.data().iter().all(|&d| d == 0.0) {
                continue;
            }
            let (h, w, _) = self.latent_dims();
            let up = resize_bilinear(&delta, h, w)?;
            let contribution = project(&up, &self.attention[&layer].readout)?;
            eps = add(&eps, &contribution)?;
        }

        let mut decoder_features = BTreeMap::new();
        for &layer in &req.needs.feature_layers {
            let spec = self
                .spec
                .feature_layers
                .iter()
                .find(|f| f.layer == layer)
                .ok_or_else(|| Error::Backend(format!("no decoder feature layer {layer}")))?;
            let term = self.latent_term(z, spec.downsample, &self.feature_proj[&layer])?;
            decoder_features.insert(layer, add(&cond.features[&layer], &term)?);
        }

        let mut attention = BTreeMap::new();
        for &layer in &req.needs.attention_layers {
            attention.insert(layer, self.qkv(z, cond, layer)?);
        }

        let cross_attn_maps = if req.needs.cross_attention {
            cond.cross_attn.clone()
        } else {
            Vec::new()
        };

        Ok(DenoiseResponse {
            eps,
            decoder_features,
            attention,
            cross_attn_maps,
        })
    }
}

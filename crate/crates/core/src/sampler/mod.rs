//! Dual-branch DDIM sampling with appearance matching and guidance.
//!
//! The reference clean latent is inverted to noise and then denoised again
//! alongside a target branch started from seeded Gaussian noise. Loop index
//! `i` counts from the noisiest step (`i = 0`, `t = T`); step and layer gates
//! in [`SessionConfig`] refer to that index.

pub mod config;
pub mod step;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use config::{parse_config, ConfigFile, ScenarioSetup, SyntheticScenario};
pub use step::{ama_layer, guidance_term, match_step, MatchState};

use crate::attention::{self_attention, AmaOutput};
use crate::backend::{CondHandle, DenoiseRequest, DenoiseResponse, Denoiser, Extraction, Qkv};
use crate::consistency::ConsistencyParams;
use crate::error::{Error, Result};
use crate::guidance::{predict_z0, GuidanceParams, NoiseSchedule};
use crate::matching::FlowPair;
use crate::tensors::{MaskGrid, TensorGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub total_steps: usize,
    /// Length of the training schedule the sampling steps are drawn from.
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Fixed-point passes per reference inversion step.
    pub inversion_iterations: usize,
    /// Loop indices at which value injection runs.
    pub ama_steps: Range<usize>,
    /// Loop indices at which guidance runs.
    pub guidance_steps: Range<usize>,
    pub ama_layers: BTreeSet<usize>,
    pub descriptor_layers: BTreeSet<usize>,
    /// Attention heads per layer for tensors arriving over the wire; layers
    /// not listed use one head. In-process backends report their own.
    pub attention_heads: BTreeMap<usize, usize>,
    pub lambda_c: f64,
    pub mask_threshold: f64,
    pub lambda_g: f64,
    pub cfg_scale: f64,
    pub pca_dim: usize,
    pub seed: u64,
    /// Keep per-step flows, masks, and descriptors in the result.
    pub diagnostics: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            total_steps: 50,
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            inversion_iterations: 5,
            ama_steps: 4..50,
            guidance_steps: 4..50,
            ama_layers: BTreeSet::from([1, 2, 3]),
            descriptor_layers: BTreeSet::from([2, 3]),
            attention_heads: BTreeMap::new(),
            lambda_c: 0.4,
            mask_threshold: 0.5,
            lambda_g: 50.0,
            cfg_scale: 7.5,
            pca_dim: 256,
            seed: 0,
            diagnostics: false,
        }
    }
}

impl SessionConfig {
    /// Every value injection and guidance gate off.
    pub fn gate_off(mut self) -> Self {
        self.ama_steps = 0..0;
        self.guidance_steps = 0..0;
        self.lambda_g = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.total_steps;
        if t == 0 {
            return Err(Error::validation("total_steps must be at least 1"));
        }
        if self.train_steps < t {
            return Err(Error::validation(format!(
                "train_steps {} is smaller than total_steps {t}",
                self.train_steps
            )));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::validation(format!(
                "betas must satisfy 0 < beta_start <= beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            )));
        }
        for (name, r) in [("ama_steps", &self.ama_steps), ("guidance_steps", &self.guidance_steps)] {
            if r.start > r.end || r.end > t {
                return Err(Error::validation(format!(
                    "{name} {}..{} must lie within 0..{t}",
                    r.start, r.end
                )));
            }
        }
        if self.descriptor_layers.is_empty() {
            return Err(Error::validation("descriptor_layers must not be empty"));
        }
        if !(self.cfg_scale >= 1.0 && self.cfg_scale.is_finite()) {
            return Err(Error::validation(format!("cfg_scale must be >= 1, got {}", self.cfg_scale)));
        }
        if self.attention_heads.values().any(|&h| h == 0) {
            return Err(Error::validation("attention_heads entries must be at least 1"));
        }
        if self.pca_dim == 0 {
            return Err(Error::validation("pca_dim must be at least 1"));
        }
        self.consistency().validate()?;
        self.guidance().validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::scaled_linear(self.total_steps, self.train_steps, self.beta_start, self.beta_end)
    }

    pub fn consistency(&self) -> ConsistencyParams {
        ConsistencyParams {
            lambda_c: self.lambda_c,
            mask_threshold: self.mask_threshold,
        }
    }

    pub fn guidance(&self) -> GuidanceParams {
        GuidanceParams {
            lambda_g: self.lambda_g,
            enabled_steps: self.guidance_steps.clone(),
        }
    }

    pub fn heads(&self, layer: usize) -> usize {
        self.attention_heads.get(&layer).copied().unwrap_or(1)
    }

    pub fn ama_enabled(&self, step_index: usize) -> bool {
        !self.ama_layers.is_empty() && self.ama_steps.contains(&step_index)
    }

    pub fn guidance_enabled(&self, step_index: usize) -> bool {
        self.guidance().is_enabled(step_index)
    }
}

/// Deterministic DDIM update `z_t → z_{t−1}`.
pub fn ddim_step(z_t: &TensorGrid, eps: &TensorGrid, t: usize, sched: &NoiseSchedule) -> Result<TensorGrid> {
    if t == 0 {
        return Err(Error::OutOfRange("cannot step below t = 0".into()));
    }
    let z0 = predict_z0(z_t, eps, t, sched)?;
    let prev = sched.alpha_bar(t - 1)?;
    let (a, b) = (prev.sqrt(), (1.0 - prev).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// `ε_u + s·(ε_c − ε_u)`; returns `ε_c` exactly at `s = 1`.
pub fn classifier_free_guidance(eps_uncond: &TensorGrid, eps_cond: &TensorGrid, scale: f64) -> Result<TensorGrid> {
    if !(scale >= 1.0 && scale.is_finite()) {
        return Err(Error::validation(format!("guidance scale must be >= 1, got {scale}")));
    }
    eps_uncond.ensure_same_dims(eps_cond)?;
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u))
}

/// DDIM inversion of `z0`, returning `[z_0, z_1, …, z_T]`. The noise for the
/// step `t−1 → t` is predicted at `(z_{t−1}, t)`.
pub fn ddim_invert(
    backend: &dyn Denoiser,
    z0: &TensorGrid,
    cond: CondHandle,
    sched: &NoiseSchedule,
) -> Result<Vec<TensorGrid>> {
    ddim_invert_refined(backend, z0, cond, sched, 0)
}

/// DDIM inversion where each step is refined by `iterations` fixed-point
/// passes that re-predict the noise at the current estimate of `z_t`. A
/// converged step is the exact inverse of [`ddim_step`] for that noise
/// prediction; zero iterations is plain inversion.
pub fn ddim_invert_refined(
    backend: &dyn Denoiser,
    z0: &TensorGrid,
    cond: CondHandle,
    sched: &NoiseSchedule,
    iterations: usize,
) -> Result<Vec<TensorGrid>> {
    z0.validate()?;
    let total = sched.steps();
    let mut traj = Vec::with_capacity(total + 1);
    traj.push(z0.clone());
    for t in 1..=total {
        let z_prev = &traj[t - 1];
        let inner = || -> Result<TensorGrid> {
            let abar = sched.alpha_bar(t)?;
            let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
            let invert_with = |eps: &TensorGrid| -> Result<TensorGrid> {
                let z0_hat = predict_z0(z_prev, eps, t - 1, sched)?;
                z0_hat.zip_map(eps, |z, e| a * z + b * e)
            };
            let mut z_t = invert_with(&backend.predict_noise(z_prev, t, cond)?)?;
            for _ in 0..iterations {
                z_t = invert_with(&backend.predict_noise(&z_t, t, cond)?)?;
            }
            Ok(z_t)
        };
        let next = inner().map_err(|e| e.at_step(t - 1, t, None))?;
        traj.push(next);
    }
    Ok(traj)
}

/// Plain DDIM sampling from `z_T` with one noise prediction per step.
pub fn ddim_sample(
    backend: &dyn Denoiser,
    z_t: &TensorGrid,
    cond: CondHandle,
    sched: &NoiseSchedule,
) -> Result<TensorGrid> {
    let total = sched.steps();
    let mut z = z_t.clone();
    for i in 0..total {
        let t = total - i;
        z = backend
            .predict_noise(&z, t, cond)
            .and_then(|eps| ddim_step(&z, &eps, t, sched))
            .map_err(|e| e.at_step(i, t, None))?;
    }
    Ok(z)
}

/// Seeded standard-normal latent.
pub fn initial_noise(dims: (usize, usize, usize), seed: u64) -> Result<TensorGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = dims;
    let data = (0..h * w * c).map(|_| StandardNormal.sample(&mut rng)).collect();
    TensorGrid::new(h, w, c, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    Unconditional,
    Conditional,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Unconditional, Branch::Conditional];

    pub fn code(self) -> u8 {
        match self {
            Branch::Unconditional => 0,
            Branch::Conditional => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Branch> {
        match code {
            0 => Some(Branch::Unconditional),
            1 => Some(Branch::Conditional),
            _ => None,
        }
    }
}

/// Conditioning handles of one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchConds {
    pub reference: CondHandle,
    pub target: CondHandle,
    pub unconditional: CondHandle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskAreas {
    pub m_t: f64,
    pub u_t: f64,
    pub m_prime: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchGuidance {
    pub branch: Branch,
    pub energy: f64,
    pub grad_norm: f64,
}

/// Attention internals of one injected layer, kept for the first gated step.
#[derive(Debug, Clone)]
pub struct LayerArtifacts {
    pub qkv: Qkv,
    pub v_ref: TensorGrid,
    pub ama: AmaOutput,
    /// Plain self-attention on the target's own values.
    pub baseline_output: TensorGrid,
}

#[derive(Debug, Clone)]
pub struct StepArtifacts {
    pub flows: FlowPair,
    pub m_t: MaskGrid,
    pub u_t: MaskGrid,
    pub m_prime: MaskGrid,
    pub psi_ref: TensorGrid,
    pub psi_tgt: TensorGrid,
    pub layers: BTreeMap<(usize, Branch), LayerArtifacts>,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step_index: usize,
    pub t: usize,
    pub ama_applied: bool,
    pub guidance_applied: bool,
    pub mask_areas: Option<MaskAreas>,
    pub guidance: Vec<BranchGuidance>,
    pub artifacts: Option<StepArtifacts>,
}

#[derive(Debug, Clone)]
pub struct SessionResult {
    pub final_latent: TensorGrid,
    /// Reference branch at `t = 0`, i.e. its reconstruction.
    pub reference_latent: TensorGrid,
    pub inversion: Vec<TensorGrid>,
    pub steps: Vec<StepRecord>,
}

/// CFG sampling of the target alone, with no matching at all.
pub fn run_baseline(backend: &dyn Denoiser, config: &SessionConfig, conds: &BranchConds) -> Result<TensorGrid> {
    config.validate()?;
    let sched = config.schedule()?;
    let total = config.total_steps;
    let mut z = initial_noise(backend.latent_dims(), config.seed)?;
    for i in 0..total {
        let t = total - i;
        let step = || -> Result<TensorGrid> {
            let eu = backend.predict_noise(&z, t, conds.unconditional)?;
            let ec = backend.predict_noise(&z, t, conds.target)?;
            let eps = classifier_free_guidance(&eu, &ec, config.cfg_scale)?;
            ddim_step(&z, &eps, t, &sched)
        };
        z = step().map_err(|e| e.at_step(i, t, None))?;
    }
    Ok(z)
}

pub fn run_dual_branch(
    backend: &dyn Denoiser,
    config: &SessionConfig,
    ref_z0: &TensorGrid,
    conds: &BranchConds,
) -> Result<SessionResult> {
    run_dual_branch_observed(backend, config, ref_z0, conds, &mut |_| Ok(()))
}

/// [`run_dual_branch`] that hands every step record to `observer` as soon
/// as the step completes, so diagnostics survive a later failure.
pub fn run_dual_branch_observed(
    backend: &dyn Denoiser,
    config: &SessionConfig,
    ref_z0: &TensorGrid,
    conds: &BranchConds,
    observer: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<SessionResult> {
    config.validate()?;
    if ref_z0.dims() != backend.latent_dims() {
        return Err(Error::shape(format!(
            "reference latent {:?} does not match backend {:?}",
            ref_z0.dims(),
            backend.latent_dims()
        )));
    }
    let sched = config.schedule()?;
    let inversion = ddim_invert_refined(backend, ref_z0, conds.reference, &sched, config.inversion_iterations)?;
    let mut session = Session {
        backend,
        config,
        sched,
        conds,
        z_ref: inversion[config.total_steps].clone(),
        z_tgt: initial_noise(backend.latent_dims(), config.seed)?,
        first_ama_step: None,
    };
    let mut steps = Vec::with_capacity(config.total_steps);
    for i in 0..config.total_steps {
        let t = config.total_steps - i;
        let record = session.step(i, t)?;
        observer(&record)?;
        steps.push(record);
    }
    Ok(SessionResult {
        final_latent: session.z_tgt,
        reference_latent: session.z_ref,
        inversion,
        steps,
    })
}

struct Session<'a> {
    backend: &'a dyn Denoiser,
    config: &'a SessionConfig,
    sched: NoiseSchedule,
    conds: &'a BranchConds,
    z_ref: TensorGrid,
    z_tgt: TensorGrid,
    first_ama_step: Option<usize>,
}

impl Session<'_> {
    fn denoise(
        &self,
        z: &TensorGrid,
        t: usize,
        cond: CondHandle,
        needs: &Extraction,
        overrides: &BTreeMap<usize, TensorGrid>,
    ) -> Result<DenoiseResponse> {
        self.backend.denoise(&DenoiseRequest {
            z,
            t,
            cond,
            needs,
            attention_overrides: overrides,
        })
    }

    fn step(&mut self, i: usize, t: usize) -> Result<StepRecord> {
        let cfg = self.config;
        let ama_on = cfg.ama_enabled(i);
        let guidance_on = cfg.guidance_enabled(i);
        let matching = ama_on || guidance_on;
        let ctx = |layer: Option<usize>| move |e: Error| e.at_step(i, t, layer);

        let descriptor_layers: Vec<usize> = cfg.descriptor_layers.iter().copied().collect();
        let ama_layers: Vec<usize> = if ama_on {
            cfg.ama_layers.iter().copied().collect()
        } else {
            Vec::new()
        };
        let needs_ref = Extraction {
            feature_layers: if matching { descriptor_layers.clone() } else { Vec::new() },
            attention_layers: ama_layers.clone(),
            cross_attention: false,
        };
        let needs_uncond = Extraction {
            attention_layers: ama_layers.clone(),
            ..Extraction::none()
        };
        let needs_cond = Extraction {
            feature_layers: needs_ref.feature_layers.clone(),
            attention_layers: ama_layers.clone(),
            cross_attention: matching,
        };
        let none = BTreeMap::new();

        let ref_resp = self
            .denoise(&self.z_ref, t, self.conds.reference, &needs_ref, &none)
            .map_err(ctx(None))?;
        let mut responses = BTreeMap::new();
        responses.insert(
            Branch::Unconditional,
            self.denoise(&self.z_tgt, t, self.conds.unconditional, &needs_uncond, &none)
                .map_err(ctx(None))?,
        );
        responses.insert(
            Branch::Conditional,
            self.denoise(&self.z_tgt, t, self.conds.target, &needs_cond, &none)
                .map_err(ctx(None))?,
        );
        let mut eps: BTreeMap<Branch, TensorGrid> =
            responses.iter().map(|(&b, r)| (b, r.eps.clone())).collect();

        let mut record = StepRecord {
            step_index: i,
            t,
            ama_applied: false,
            guidance_applied: false,
            mask_areas: None,
            guidance: Vec::new(),
            artifacts: None,
        };

        if matching {
            let pick = |r: &DenoiseResponse| -> Result<Vec<TensorGrid>> {
                descriptor_layers
                    .iter()
                    .map(|l| {
                        r.decoder_features
                            .get(l)
                            .cloned()
                            .ok_or_else(|| Error::Backend(format!("missing decoder features for layer {l}")))
                    })
                    .collect()
            };
            let cond_resp = &responses[&Branch::Conditional];
            let state = pick(&ref_resp)
                .and_then(|fr| {
                    let ft = pick(cond_resp)?;
                    match_step(&fr, &ft, &cond_resp.cross_attn_maps, cfg.pca_dim, &cfg.consistency())
                })
                .map_err(ctx(None))?;
            record.mask_areas = Some(MaskAreas {
                m_t: state.m_t.area(),
                u_t: state.u_t.area(),
                m_prime: state.m_prime.area(),
            });
            let mut layer_artifacts = BTreeMap::new();
            let keep_layers = cfg.diagnostics && ama_on && self.first_ama_step.is_none();

            if ama_on {
                self.first_ama_step.get_or_insert(i);
                for branch in Branch::BOTH {
                    let resp = &responses[&branch];
                    let mut overrides = BTreeMap::new();
                    for &layer in &ama_layers {
                        let out = (|| -> Result<_> {
                            let qkv = resp
                                .attention
                                .get(&layer)
                                .ok_or_else(|| Error::Backend(format!("missing attention tensors for layer {layer}")))?;
                            let v_ref = &ref_resp
                                .attention
                                .get(&layer)
                                .ok_or_else(|| Error::Backend(format!("missing reference values for layer {layer}")))?
                                .v;
                            let ama = ama_layer(&state, &qkv.q, &qkv.k, &qkv.v, v_ref, qkv.num_heads)?;
                            if keep_layers {
                                layer_artifacts.insert(
                                    (layer, branch),
                                    LayerArtifacts {
                                        qkv: qkv.clone(),
                                        v_ref: v_ref.clone(),
                                        ama: ama.clone(),
                                        baseline_output: self_attention(&qkv.q, &qkv.k, &qkv.v, qkv.num_heads)?,
                                    },
                                );
                            }
                            Ok(ama.output)
                        })()
                        .map_err(ctx(Some(layer)))?;
                        overrides.insert(layer, out);
                    }
                    let cond = match branch {
                        Branch::Unconditional => self.conds.unconditional,
                        Branch::Conditional => self.conds.target,
                    };
                    let patched = self
                        .denoise(&self.z_tgt, t, cond, &Extraction::none(), &overrides)
                        .map_err(ctx(None))?;
                    eps.insert(branch, patched.eps);
                }
                record.ama_applied = true;
            }

            if guidance_on {
                let z0_ref = predict_z0(&self.z_ref, &ref_resp.eps, t, &self.sched).map_err(ctx(None))?;
                let params = cfg.guidance();
                for branch in Branch::BOTH {
                    let term = guidance_term(&state, &self.z_tgt, &eps[&branch], &z0_ref, t, &self.sched, &params)
                        .map_err(ctx(None))?;
                    record.guidance.push(BranchGuidance {
                        branch,
                        energy: term.energy,
                        grad_norm: term.grad_norm,
                    });
                    eps.insert(branch, term.guided_eps);
                }
                record.guidance_applied = true;
            }

            if cfg.diagnostics {
                record.artifacts = Some(StepArtifacts {
                    flows: state.flows.clone(),
                    m_t: state.m_t.clone(),
                    u_t: state.u_t.clone(),
                    m_prime: state.m_prime.clone(),
                    psi_ref: state.descriptors.psi_ref.clone(),
                    psi_tgt: state.descriptors.psi_tgt.clone(),
                    layers: layer_artifacts,
                });
            }
        }

        let combined = classifier_free_guidance(&eps[&Branch::Unconditional], &eps[&Branch::Conditional], cfg.cfg_scale)
            .map_err(ctx(None))?;
        self.z_tgt = ddim_step(&self.z_tgt, &combined, t, &self.sched).map_err(ctx(None))?;
        self.z_ref = ddim_step(&self.z_ref, &ref_resp.eps, t, &self.sched).map_err(ctx(None))?;
        Ok(record)
    }
}

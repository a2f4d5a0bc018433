//! Semantic matching guidance.
//!
//! The clean reference latent is warped onto the target layout and compared
//! against the target's predicted clean latent inside the semantic-consistent
//! mask. The gradient of that energy steers the target noise prediction.
//!
//! Gradients with respect to `z_t` treat the predicted noise as locally
//! constant, so `∂ẑ0/∂z_t = 1/√ᾱ_t`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::matching::warp;
use crate::tensors::{FlowField, MaskGrid, TensorGrid};

/// Per-pixel difference norms at or below this are treated as zero.
pub const EPS_NORM: f64 = 1e-8;

/// Cumulative noise products `ᾱ_t` for `t = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.len() < 2 {
            return Err(Error::validation("noise schedule needs at least one step"));
        }
        if (alphas_cumprod[0] - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "alpha_bar at t=0 must be 1, got {}",
                alphas_cumprod[0]
            )));
        }
        for (t, &a) in alphas_cumprod.iter().enumerate() {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::validation(format!("alpha_bar[{t}] = {a} outside (0, 1]")));
            }
            if t > 0 && a > alphas_cumprod[t - 1] {
                return Err(Error::validation(format!(
                    "alpha_bar must be non-increasing, but alpha_bar[{t}] = {a} > alpha_bar[{}] = {}",
                    t - 1,
                    alphas_cumprod[t - 1]
                )));
            }
        }
        Ok(Self { alphas_cumprod })
    }

    /// DDIM sub-sampling of a scaled-linear training schedule: betas are
    /// linear in `√β` over `train_steps`, and step `t` of the `steps`-long
    /// sampling schedule sits at training step `t · train_steps / steps`.
    pub fn scaled_linear(steps: usize, train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || train_steps < steps {
            return Err(Error::validation(format!(
                "need 0 < steps ({steps}) <= train_steps ({train_steps})"
            )));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::validation(format!(
                "need 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
            )));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let denom = (train_steps.max(2) - 1) as f64;
        let mut train = Vec::with_capacity(train_steps + 1);
        let mut prod = 1.0;
        train.push(prod);
        for k in 0..train_steps {
            let s = s0 + (s1 - s0) * k as f64 / denom;
            prod *= 1.0 - s * s;
            train.push(prod);
        }
        let abar = (0..=steps).map(|t| train[t * train_steps / steps]).collect();
        Self::new(abar)
    }

    /// Number of sampling steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas_cumprod.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod.get(t).copied().ok_or_else(|| {
            Error::OutOfRange(format!("step {t} outside schedule 0..={}", self.steps()))
        })
    }

    /// `σ_t = √(1 − ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceParams {
    pub lambda_g: f64,
    /// Sampling-loop indices at which guidance is applied.
    pub enabled_steps: Range<usize>,
}

impl GuidanceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_g >= 0.0 && self.lambda_g.is_finite()) {
            return Err(Error::validation(format!("lambda_g must be >= 0, got {}", self.lambda_g)));
        }
        Ok(())
    }

    pub fn is_enabled(&self, step_index: usize) -> bool {
        self.lambda_g > 0.0 && self.enabled_steps.contains(&step_index)
    }
}

/// Clean-latent estimate `ẑ0 = (z_t − √(1−ᾱ_t)·ε) / √ᾱ_t`.
pub fn predict_z0(z_t: &TensorGrid, eps: &TensorGrid, t: usize, sched: &NoiseSchedule) -> Result<TensorGrid> {
    let abar = sched.alpha_bar(t)?;
    let (sa, sb) = (abar.sqrt(), (1.0 - abar).sqrt());
    z_t.zip_map(eps, |z, e| (z - sb * e) / sa)
}

/// Warps the clean reference latent onto the target layout, resampling the
/// flow to the latent resolution first when needed.
pub fn align_reference_z0(z0_ref: &TensorGrid, flow_x_to_y: &FlowField) -> Result<TensorGrid> {
    let (h, w) = (z0_ref.height(), z0_ref.width());
    let (fh, fw) = (flow_x_to_y.height(), flow_x_to_y.width());
    if h * fw != w * fh {
        return Err(Error::shape(format!(
            "flow {fh}x{fw} and latent {h}x{w} have different aspect ratios"
        )));
    }
    let flow = flow_x_to_y.resize(h, w)?;
    warp(z0_ref, &flow)
}

fn check_energy_inputs(aligned: &TensorGrid, z0_hat: &TensorGrid, mask: &MaskGrid) -> Result<()> {
    aligned.ensure_same_dims(z0_hat)?;
    if (mask.height(), mask.width()) != (aligned.height(), aligned.width()) {
        return Err(Error::shape(format!(
            "mask {}x{} vs latent {}x{}",
            mask.height(),
            mask.width(),
            aligned.height(),
            aligned.width()
        )));
    }
    Ok(())
}

fn pixel_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Masked mean of per-pixel channel-l2 differences; 0 for an empty mask.
pub fn guidance_energy(aligned: &TensorGrid, z0_hat: &TensorGrid, mask: &MaskGrid) -> Result<f64> {
    check_energy_inputs(aligned, z0_hat, mask)?;
    let area = mask.area();
    if area == 0.0 {
        return Ok(0.0);
    }
    let total: f64 = mask
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0.0)
        .map(|(i, &m)| m * pixel_norm(aligned.token(i), z0_hat.token(i)))
        .sum();
    Ok(total / area)
}

/// Gradient of [`guidance_energy`] with respect to the predicted clean
/// latent `ẑ0`.
pub fn energy_gradient_z0(aligned: &TensorGrid, z0_hat: &TensorGrid, mask: &MaskGrid) -> Result<TensorGrid> {
    check_energy_inputs(aligned, z0_hat, mask)?;
    let c = aligned.channels();
    let mut grad = vec![0.0; aligned.data().len()];
    let area = mask.area();
    if area == 0.0 {
        return TensorGrid::new(aligned.height(), aligned.width(), c, grad);
    }
    for (i, &m) in mask.values().iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let (a, z) = (aligned.token(i), z0_hat.token(i));
        let norm = pixel_norm(a, z);
        if norm <= EPS_NORM {
            continue;
        }
        let scale = m / (area * norm.max(EPS_NORM));
        for ch in 0..c {
            grad[i * c + ch] = -(a[ch] - z[ch]) * scale;
        }
    }
    TensorGrid::new(aligned.height(), aligned.width(), c, grad)
}

/// `∇_{z_t} g`, chained through `ẑ0` with factor `1/√ᾱ_t`.
pub fn guidance_gradient(
    aligned: &TensorGrid,
    z0_hat: &TensorGrid,
    mask: &MaskGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<TensorGrid> {
    let inv = 1.0 / sched.alpha_bar(t)?.sqrt();
    energy_gradient_z0(aligned, z0_hat, mask)?.map(|g| g * inv)
}

/// `ε̂ = ε − λ_g·√(1−ᾱ_t)·∇g`.
pub fn apply_guidance(
    eps: &TensorGrid,
    grad: &TensorGrid,
    params: &GuidanceParams,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<TensorGrid> {
    params.validate()?;
    eps.ensure_same_dims(grad)?;
    if params.lambda_g == 0.0 {
        return Ok(eps.clone());
    }
    let weight = params.lambda_g * sched.sigma(t)?;
    eps.zip_map(grad, |e, g| e - weight * g)
}

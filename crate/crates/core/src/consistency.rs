//! Foreground, cycle-confidence, and semantic-consistent masks.

use crate::error::{Error, Result};
use crate::tensors::{minmax_normalize, resize_bilinear, sample_bilinear, FlowField, MaskGrid, TensorGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyParams {
    /// Scale on the foreground-proportional cycle threshold.
    pub lambda_c: f64,
    /// Cut-off applied to the normalized cross-attention map.
    pub mask_threshold: f64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            lambda_c: 0.4,
            mask_threshold: 0.5,
        }
    }
}

impl ConsistencyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_c >= 0.0 && self.lambda_c.is_finite()) {
            return Err(Error::validation(format!("lambda_c must be >= 0, got {}", self.lambda_c)));
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return Err(Error::validation(format!(
                "mask_threshold must lie in [0, 1], got {}",
                self.mask_threshold
            )));
        }
        Ok(())
    }
}

/// Binary foreground mask from subject-token cross-attention maps: resize,
/// average, min-max normalize, then keep values above the threshold.
pub fn foreground_mask(maps: &[TensorGrid], params: &ConsistencyParams, out_res: (usize, usize)) -> Result<MaskGrid> {
    params.validate()?;
    if maps.is_empty() {
        return Err(Error::validation("foreground mask needs at least one cross-attention map"));
    }
    let (h, w) = out_res;
    let mut acc = vec![0.0; h * w];
    for m in maps {
        if m.channels() != 1 {
            return Err(Error::shape(format!(
                "cross-attention maps must be single-channel, got {}",
                m.channels()
            )));
        }
        if m.min_value() < 0.0 {
            return Err(Error::validation("cross-attention maps must be non-negative"));
        }
        let r = resize_bilinear(m, h, w)?;
        for (a, v) in acc.iter_mut().zip(r.data()) {
            *a += v;
        }
    }
    let count = maps.len() as f64;
    let mean = TensorGrid::new(h, w, 1, acc.into_iter().map(|v| v / count).collect())?;
    let norm = minmax_normalize(&mean)?;
    let values = norm
        .data()
        .iter()
        .map(|&v| if v > params.mask_threshold { 1.0 } else { 0.0 })
        .collect();
    MaskGrid::new(h, w, values)
}

/// Threshold `γ·λ_c` with `γ = H · |M|/(H·W)`.
pub fn cycle_threshold(fg_mask: &MaskGrid, lambda_c: f64) -> f64 {
    let (h, w) = (fg_mask.height() as f64, fg_mask.width() as f64);
    let fg_ratio = fg_mask.area() / (h * w);
    h * fg_ratio * lambda_c
}

/// Forward–backward error `‖F^{X→Y}(x) + F^{Y→X}(x + F^{X→Y}(x))‖` per
/// target pixel, sampling the reverse flow bilinearly with border clamp.
pub fn cycle_error(f_xy: &FlowField, f_yx: &FlowField) -> Result<Vec<f64>> {
    let (h, w) = (f_xy.height(), f_xy.width());
    if (f_yx.height(), f_yx.width()) != (h, w) {
        return Err(Error::shape(format!(
            "forward flow {h}x{w} vs reverse flow {}x{}",
            f_yx.height(),
            f_yx.width()
        )));
    }
    let mut errors = Vec::with_capacity(h * w);
    let mut back = [0.0; 2];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = f_xy.get(y, x);
            sample_bilinear(f_yx.data(), h, w, 2, y as f64 + dy, x as f64 + dx, &mut back);
            let (ex, ey) = (dx + back[0], dy + back[1]);
            errors.push((ex * ex + ey * ey).sqrt());
        }
    }
    Ok(errors)
}

/// Cycle-consistency confidence `U_t`: 1 where the forward–backward error
/// is strictly below `γ·λ_c`.
pub fn cycle_confidence(
    f_xy: &FlowField,
    f_yx: &FlowField,
    fg_mask: &MaskGrid,
    params: &ConsistencyParams,
) -> Result<MaskGrid> {
    params.validate()?;
    let (h, w) = (f_xy.height(), f_xy.width());
    if (fg_mask.height(), fg_mask.width()) != (h, w) {
        return Err(Error::shape(format!(
            "mask {}x{} vs flow {h}x{w}",
            fg_mask.height(),
            fg_mask.width()
        )));
    }
    let threshold = cycle_threshold(fg_mask, params.lambda_c);
    let values = cycle_error(f_xy, f_yx)?
        .into_iter()
        .map(|e| if e < threshold { 1.0 } else { 0.0 })
        .collect();
    MaskGrid::new(h, w, values)
}

/// `M′ = M ⊙ U`.
pub fn semantic_consistent_mask(m_t: &MaskGrid, u_t: &MaskGrid) -> Result<MaskGrid> {
    m_t.hadamard(u_t)
}

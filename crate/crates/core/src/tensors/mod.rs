//! Dense grids shared by every stage of the engine.
//!
//! All grids are stored row-major in `(h, w, c)` order so that the channel
//! vector of a pixel is contiguous. Values are `f64` in memory; the on-disk and
//! on-wire representation is `f32` (see [`frame`]).

pub mod frame;

use crate::error::{Error, Result};

/// A dense `H×W×C` field of finite reals.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl TensorGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::validation(format!(
                "grid dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::validation(format!(
                "grid {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a grid from a per-element function of `(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::filled(height, width, channels, 0.0)
    }

    /// Internal constructor for data produced by arithmetic on valid grids.
    pub(crate) fn from_parts(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel vector of the pixel at `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        self.token(y * self.width + x)
    }

    /// Channel vector of the pixel at row-major flat index `idx`.
    pub fn token(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Elementwise combination of two grids of identical shape.
    pub fn zip_map(&self, other: &TensorGrid, mut f: impl FnMut(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_dims(other)?;
        Self::new(
            self.height,
            self.width,
            self.channels,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn ensure_same_dims(&self, other: &TensorGrid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// Re-checks the finiteness invariant.
    pub fn validate(&self) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!("non-finite value at flat index {pos}")));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &TensorGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Keeps a contiguous channel range `[start, start + count)`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<TensorGrid> {
        if count == 0 || start + count > self.channels {
            return Err(Error::shape(format!(
                "channel slice {start}..{} out of {}",
                start + count,
                self.channels
            )));
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .flat_map(|px| px[start..start + count].iter().copied())
            .collect();
        Ok(Self::from_parts(self.height, self.width, count, data))
    }

    /// Channel-concatenates grids sharing `H×W`.
    pub fn concat_channels(grids: &[TensorGrid]) -> Result<TensorGrid> {
        let first = grids
            .first()
            .ok_or_else(|| Error::validation("cannot concatenate an empty grid list"))?;
        let (h, w) = (first.height, first.width);
        if let Some(bad) = grids.iter().find(|g| g.height != h || g.width != w) {
            return Err(Error::shape(format!(
                "concat needs equal spatial dims: {h}x{w} vs {}x{}",
                bad.height, bad.width
            )));
        }
        let channels: usize = grids.iter().map(|g| g.channels).sum();
        let mut data = Vec::with_capacity(h * w * channels);
        for idx in 0..h * w {
            for g in grids {
                data.extend_from_slice(g.token(idx));
            }
        }
        Ok(Self::from_parts(h, w, channels, data))
    }
}

/// A per-pixel displacement field `(dx, dy)` in source-grid pixel units.
///
/// Flows follow the backward-warp convention: the value stored at target
/// pixel `p` points to the source location `p + F(p)` that is sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let grid = TensorGrid::new(height, width, 2, data)?;
        Ok(Self {
            height,
            width,
            data: grid.data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Result<Self> {
        Self::from_fn(height, width, |_, _| (dx, dy))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                data.push(dx);
                data.push(dy);
            }
        }
        Self::new(height, width, data)
    }

    pub(crate) fn from_parts(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * 2);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(dx, dy)` at `(y, x)`.
    pub fn get(&self, y: usize, x: usize) -> (f64, f64) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_grid(&self) -> TensorGrid {
        TensorGrid::from_parts(self.height, self.width, 2, self.data.clone())
    }

    pub fn from_grid(grid: &TensorGrid) -> Result<Self> {
        if grid.channels != 2 {
            return Err(Error::shape(format!(
                "flow grid needs 2 channels, got {}",
                grid.channels
            )));
        }
        Ok(Self::from_parts(grid.height, grid.width, grid.data.clone()))
    }

    /// Resamples the flow to `out_h×out_w`, rescaling displacements to the
    /// new pixel units.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<FlowField> {
        if out_h == self.height && out_w == self.width {
            return Ok(self.clone());
        }
        let sx = out_w as f64 / self.width as f64;
        let sy = out_h as f64 / self.height as f64;
        let resized = resize_bilinear(&self.to_grid(), out_h, out_w)?;
        let data = resized
            .data
            .chunks_exact(2)
            .flat_map(|d| [d[0] * sx, d[1] * sy])
            .collect();
        Ok(Self::from_parts(out_h, out_w, data))
    }
}

/// A per-pixel weight field with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let grid = TensorGrid::new(height, width, 1, values)?;
        if let Some(pos) = grid.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::validation(format!(
                "mask value {} at flat index {pos} outside [0, 1]",
                grid.data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            values: grid.data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 1.0)
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(f(y, x));
            }
        }
        Self::new(height, width, values)
    }

    /// Binary mask from a predicate.
    pub fn from_predicate(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        Self::from_fn(height, width, |y, x| if f(y, x) { 1.0 } else { 0.0 })
    }

    pub(crate) fn from_parts(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Mask area `|M|`, the sum of all weights.
    pub fn area(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn to_grid(&self) -> TensorGrid {
        TensorGrid::from_parts(self.height, self.width, 1, self.values.clone())
    }

    pub fn from_grid(grid: &TensorGrid) -> Result<Self> {
        if grid.channels != 1 {
            return Err(Error::shape(format!(
                "mask grid needs 1 channel, got {}",
                grid.channels
            )));
        }
        Self::new(grid.height, grid.width, grid.data.clone())
    }

    /// Bilinear resize followed by re-binarization at 0.5.
    pub fn resize_binary(&self, out_h: usize, out_w: usize) -> Result<MaskGrid> {
        if out_h == self.height && out_w == self.width {
            return Ok(self.clone());
        }
        let resized = resize_bilinear(&self.to_grid(), out_h, out_w)?;
        let values = resized
            .data
            .iter()
            .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
            .collect();
        Ok(Self::from_parts(out_h, out_w, values))
    }

    /// Pointwise product of two masks of equal size.
    pub fn hadamard(&self, other: &MaskGrid) -> Result<MaskGrid> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(Self::from_parts(
            self.height,
            self.width,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        ))
    }
}

/// Linear interpolation clamped to the endpoint range.
#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        return a;
    }
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    (a + (b - a) * t).clamp(lo, hi)
}

/// Samples all channels of a row-major `h×w×c` buffer at fractional
/// position `(sy, sx)`, clamping coordinates to the border.
pub(crate) fn sample_bilinear(
    data: &[f64],
    h: usize,
    w: usize,
    c: usize,
    sy: f64,
    sx: f64,
    out: &mut [f64],
) {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let p00 = &data[(y0 * w + x0) * c..(y0 * w + x0 + 1) * c];
    if fx == 0.0 && fy == 0.0 {
        out.copy_from_slice(p00);
        return;
    }
    let p01 = &data[(y0 * w + x1) * c..(y0 * w + x1 + 1) * c];
    let p10 = &data[(y1 * w + x0) * c..(y1 * w + x0 + 1) * c];
    let p11 = &data[(y1 * w + x1) * c..(y1 * w + x1 + 1) * c];
    for ch in 0..c {
        let top = lerp(p00[ch], p01[ch], fx);
        let bottom = lerp(p10[ch], p11[ch], fx);
        out[ch] = lerp(top, bottom, fy);
    }
}

/// Channelwise bilinear resize with corner-aligned sampling.
///
/// Output pixel `(i, j)` samples the input at `(i·(H−1)/(out_h−1),
/// j·(W−1)/(out_w−1))`, so the four corners map onto each other exactly.
pub fn resize_bilinear(grid: &TensorGrid, out_h: usize, out_w: usize) -> Result<TensorGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::validation(format!(
            "resize target must be positive, got {out_h}x{out_w}"
        )));
    }
    grid.validate()?;
    let (h, w, c) = grid.dims();
    if (out_h, out_w) == (h, w) {
        return Ok(grid.clone());
    }
    let scale = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let (ry, rx) = (scale(h, out_h), scale(w, out_w));
    let mut data = vec![0.0; out_h * out_w * c];
    for (idx, px) in data.chunks_exact_mut(c).enumerate() {
        let (i, j) = (idx / out_w, idx % out_w);
        sample_bilinear(&grid.data, h, w, c, i as f64 * ry, j as f64 * rx, px);
    }
    Ok(TensorGrid::from_parts(out_h, out_w, c, data))
}

/// `a ⊙ m + b ⊙ (1 − m)` with the mask broadcast over channels.
pub fn hadamard_blend(a: &TensorGrid, b: &TensorGrid, m: &MaskGrid) -> Result<TensorGrid> {
    a.ensure_same_dims(b)?;
    if (a.height, a.width) != (m.height, m.width) {
        return Err(Error::shape(format!(
            "blend mask {}x{} vs grid {}x{}",
            m.height, m.width, a.height, a.width
        )));
    }
    let c = a.channels;
    let mut data = Vec::with_capacity(a.data.len());
    for (idx, &w) in m.values.iter().enumerate() {
        let (pa, pb) = (a.token(idx), b.token(idx));
        if w == 1.0 {
            data.extend_from_slice(pa);
        } else if w == 0.0 {
            data.extend_from_slice(pb);
        } else {
            data.extend((0..c).map(|ch| pa[ch] * w + pb[ch] * (1.0 - w)));
        }
    }
    Ok(TensorGrid::from_parts(a.height, a.width, c, data))
}

/// Affinely maps all values onto `[0, 1]`. Constant grids map to zeros.
pub fn minmax_normalize(grid: &TensorGrid) -> Result<TensorGrid> {
    grid.validate()?;
    let (lo, hi) = (grid.min_value(), grid.max_value());
    let range = hi - lo;
    if range <= 0.0 {
        return TensorGrid::zeros(grid.height, grid.width, grid.channels);
    }
    let data = grid
        .data
        .iter()
        .map(|&v| ((v - lo) / range).clamp(0.0, 1.0))
        .collect();
    Ok(TensorGrid::from_parts(grid.height, grid.width, grid.channels, data))
}

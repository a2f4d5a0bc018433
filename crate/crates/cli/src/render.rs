//! PGM/PPM rendering of grids, masks, flows, and descriptors.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nalgebra::DMatrix;
use semmatch::matching::{pca_fit_project, warp};
use semmatch::tensors::frame::read_grid_file;
use semmatch::tensors::{FlowField, TensorGrid};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn ppm_bytes(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Min-max range of one channel; constant channels render black.
fn channel_range(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn normalize(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// Single-channel grid as PGM. Masks in `[0, 1]` map directly onto
/// `0..=255`, anything else is min-max normalized.
pub fn render_gray(grid: &TensorGrid) -> Vec<u8> {
    let data = grid.data();
    let range = if data.iter().all(|v| (0.0..=1.0).contains(v)) {
        (0.0, 1.0)
    } else {
        channel_range(data.iter().copied())
    };
    let pixels: Vec<u8> = data.iter().map(|&v| to_byte(normalize(v, range))).collect();
    pgm_bytes(grid.width(), grid.height(), &pixels)
}

/// Up to three channels as RGB, each min-max normalized on its own; missing
/// channels stay black.
pub fn render_channels(grid: &TensorGrid) -> Vec<u8> {
    let c = grid.channels();
    let ranges: Vec<(f64, f64)> = (0..c.min(3))
        .map(|ch| channel_range(grid.data().iter().skip(ch).step_by(c).copied()))
        .collect();
    let mut rgb = Vec::with_capacity(grid.num_pixels() * 3);
    for i in 0..grid.num_pixels() {
        let px = grid.token(i);
        for ch in 0..3 {
            rgb.push(match (ranges.get(ch), px.get(ch)) {
                (Some(&r), Some(&v)) => to_byte(normalize(v, r)),
                _ => 0,
            });
        }
    }
    ppm_bytes(grid.width(), grid.height(), &rgb)
}

/// Projection of a descriptor grid onto its own top three principal
/// components, fitted over the grid's pixels.
pub fn pca3(grid: &TensorGrid) -> Result<TensorGrid> {
    let (h, w, c) = grid.dims();
    let n = h * w;
    let dim = 3.min(c).min(n);
    let samples = DMatrix::from_row_slice(n, c, grid.data());
    let fit = pca_fit_project(&samples, dim)?;
    let mut data = Vec::with_capacity(n * 3);
    for i in 0..n {
        for k in 0..3 {
            data.push(if k < dim { fit.projected[(i, k)] } else { 0.0 });
        }
    }
    Ok(TensorGrid::new(h, w, 3, data)?)
}

pub fn render_pca(grid: &TensorGrid) -> Result<Vec<u8>> {
    Ok(render_channels(&pca3(grid)?))
}

/// Reference descriptor colors carried onto the target layout by the flow.
pub fn render_warped(psi_ref: &TensorGrid, flow: &FlowField) -> Result<Vec<u8>> {
    let colors = pca3(psi_ref)?;
    let flow = flow.resize(colors.height(), colors.width())?;
    Ok(render_channels(&warp(&colors, &flow)?))
}

/// Renders every `.dmt` frame in `dir` (recursively) next to itself and
/// returns the images written. Frames named `psi_*` are treated as
/// descriptors, `flow.dmt` next to `psi_ref.dmt` also yields a warped
/// preview.
pub fn render_tree(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in &entries {
        if path.is_dir() {
            written.extend(render_tree(path)?);
        }
    }
    for path in entries.iter().filter(|p| p.extension().is_some_and(|e| e == "dmt")) {
        let grid = read_grid_file(path).with_context(|| format!("cannot read {}", path.display()))?;
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let (bytes, ext) = if stem.starts_with("psi_") {
            (render_pca(&grid)?, "ppm")
        } else if grid.channels() == 1 {
            (render_gray(&grid), "pgm")
        } else {
            (render_channels(&grid), "ppm")
        };
        let out = path.with_file_name(format!("{stem}.{ext}"));
        fs::write(&out, bytes).with_context(|| format!("cannot write {}", out.display()))?;
        written.push(out);
    }
    let (flow_path, ref_path) = (dir.join("flow.dmt"), dir.join("psi_ref.dmt"));
    if flow_path.is_file() && ref_path.is_file() {
        let flow = FlowField::from_grid(&read_grid_file(&flow_path)?)?;
        let psi_ref = read_grid_file(&ref_path)?;
        let out = dir.join("warped_ref.ppm");
        fs::write(&out, render_warped(&psi_ref, &flow)?)?;
        written.push(out);
    }
    Ok(written)
}

//! Semantic correspondence between the reference and target branches.
//!
//! Per step, decoder features of both branches are resized to a common
//! resolution, channel-concatenated, and reduced with a PCA fitted jointly on
//! both branches' pixels. A cosine cost volume over all pixel pairs then
//! yields hard-argmax flow fields in both directions.

mod pca;

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

pub use pca::{pca_fit_project, PcaFit};

use crate::error::{Error, Result};
use crate::tensors::{resize_bilinear, sample_bilinear, FlowField, MaskGrid, TensorGrid};

/// Target columns per parallel work item when building the cost volume.
/// Fixed so the output does not depend on the worker count.
const COST_CHUNK: usize = 256;

/// PCA-reduced descriptors of both branches in one shared basis.
#[derive(Debug, Clone)]
pub struct DescriptorPair {
    pub psi_ref: TensorGrid,
    pub psi_tgt: TensorGrid,
    pub pca: PcaFit,
}

/// Resizes every layer to `target_res`, concatenates channels, and reduces
/// both branches to `pca_dim` channels with a jointly fitted PCA.
pub fn assemble_descriptors(
    layer_feats_ref: &[TensorGrid],
    layer_feats_tgt: &[TensorGrid],
    target_res: (usize, usize),
    pca_dim: usize,
) -> Result<DescriptorPair> {
    if layer_feats_ref.is_empty() || layer_feats_ref.len() != layer_feats_tgt.len() {
        return Err(Error::validation(format!(
            "need matching non-empty layer lists, got {} reference and {} target layers",
            layer_feats_ref.len(),
            layer_feats_tgt.len()
        )));
    }
    let (h, w) = target_res;
    let concat = |layers: &[TensorGrid]| -> Result<TensorGrid> {
        let resized = layers
            .iter()
            .map(|g| resize_bilinear(g, h, w))
            .collect::<Result<Vec<_>>>()?;
        TensorGrid::concat_channels(&resized)
    };
    let raw_ref = concat(layer_feats_ref)?;
    let raw_tgt = concat(layer_feats_tgt)?;
    if raw_ref.channels() != raw_tgt.channels() {
        return Err(Error::shape(format!(
            "reference descriptors have {} channels, target {}",
            raw_ref.channels(),
            raw_tgt.channels()
        )));
    }
    let d_raw = raw_ref.channels();
    let n = h * w;
    if pca_dim == 0 || pca_dim > d_raw || pca_dim > 2 * n {
        return Err(Error::validation(format!(
            "pca_dim {pca_dim} must lie in 1..={}",
            d_raw.min(2 * n)
        )));
    }

    let mut samples = DMatrix::zeros(2 * n, d_raw);
    for (row, grid) in [(0, &raw_ref), (n, &raw_tgt)] {
        for i in 0..n {
            for (c, &v) in grid.token(i).iter().enumerate() {
                samples[(row + i, c)] = v;
            }
        }
    }
    let pca = pca_fit_project(&samples, pca_dim)?;
    let unpack = |offset: usize| {
        let mut data = Vec::with_capacity(n * pca_dim);
        for i in 0..n {
            data.extend(pca.projected.row(offset + i).iter().copied());
        }
        TensorGrid::new(h, w, pca_dim, data)
    };
    Ok(DescriptorPair {
        psi_ref: unpack(0)?,
        psi_tgt: unpack(n)?,
        pca,
    })
}

/// All-pairs cosine similarity `C(i, j)` between reference pixel `i` and
/// target pixel `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostVolume {
    rows: usize,
    cols: usize,
    /// Target-major: `data[j * rows + i] = C(i, j)`.
    data: Vec<f64>,
}

impl CostVolume {
    /// Number of reference positions.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of target positions.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    /// Similarities of every reference position to target position `j`.
    pub fn target_column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Builds a volume from a function of `(i, j)`, mainly for tests.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("cost volume entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }
}

/// Rows of `grid` as unit vectors; zero vectors stay zero.
fn normalized_rows(grid: &TensorGrid) -> DMatrix<f64> {
    let (n, d) = (grid.num_pixels(), grid.channels());
    let mut m = DMatrix::zeros(n, d);
    for i in 0..n {
        let px = grid.token(i);
        let norm = px.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (c, &v) in px.iter().enumerate() {
                m[(i, c)] = v / norm;
            }
        }
    }
    m
}

/// Cosine cost volume between two descriptor grids of equal shape.
pub fn cost_volume_between(psi_ref: &TensorGrid, psi_tgt: &TensorGrid) -> Result<CostVolume> {
    psi_ref.ensure_same_dims(psi_tgt)?;
    psi_ref.validate()?;
    psi_tgt.validate()?;
    let x = normalized_rows(psi_ref);
    let y = normalized_rows(psi_tgt);
    let (rows, cols) = (x.nrows(), y.nrows());

    let chunks: Vec<Vec<f64>> = (0..cols)
        .step_by(COST_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let len = COST_CHUNK.min(cols - start);
            let block = y.rows(start, len);
            // Column-major rows×len product: column j holds C(·, start + j).
            let prod = &x * block.transpose();
            prod.as_slice().to_vec()
        })
        .collect();
    Ok(CostVolume {
        rows,
        cols,
        data: chunks.concat(),
    })
}

/// Cosine cost volume of a descriptor pair.
pub fn cost_volume(pair: &DescriptorPair) -> Result<CostVolume> {
    cost_volume_between(&pair.psi_ref, &pair.psi_tgt)
}

/// Which side of the cost volume a flow field lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    /// Defined on target pixels, pointing to the matched reference pixel
    /// (`F^{X→Y}`, used to warp reference values onto the target).
    RefToTarget,
    /// Defined on reference pixels, pointing to the matched target pixel.
    TargetToRef,
}

/// Hard-argmax flow over the cost volume. Ties resolve to the smallest flat
/// index.
pub fn argmax_flow(c: &CostVolume, direction: FlowDirection, height: usize, width: usize) -> Result<FlowField> {
    let n = height * width;
    if c.rows != n || c.cols != n {
        return Err(Error::shape(format!(
            "cost volume {}x{} does not match grid {height}x{width}",
            c.rows, c.cols
        )));
    }
    let matches: Vec<usize> = match direction {
        FlowDirection::RefToTarget => (0..n)
            .into_par_iter()
            .map(|j| first_argmax(c.target_column(j)))
            .collect(),
        FlowDirection::TargetToRef => {
            // For each reference row scan targets in ascending order; strict
            // comparison keeps the first maximum.
            let mut best_val = c.target_column(0).to_vec();
            let mut best_idx = vec![0usize; n];
            for j in 1..n {
                let col = c.target_column(j);
                for i in 0..n {
                    if col[i] > best_val[i] {
                        best_val[i] = col[i];
                        best_idx[i] = j;
                    }
                }
            }
            best_idx
        }
    };
    let mut data = Vec::with_capacity(n * 2);
    for (p, &m) in matches.iter().enumerate() {
        data.push((m % width) as f64 - (p % width) as f64);
        data.push((m / width) as f64 - (p / width) as f64);
    }
    FlowField::new(height, width, data)
}

fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Both flow fields of one step.
#[derive(Debug, Clone)]
pub struct FlowPair {
    pub ref_to_target: FlowField,
    pub target_to_ref: FlowField,
}

/// Computes `F^{X→Y}` and `F^{Y→X}` from a descriptor pair.
pub fn bidirectional_flow(psi_ref: &TensorGrid, psi_tgt: &TensorGrid) -> Result<FlowPair> {
    let c = cost_volume_between(psi_ref, psi_tgt)?;
    let (h, w) = (psi_ref.height(), psi_ref.width());
    Ok(FlowPair {
        ref_to_target: argmax_flow(&c, FlowDirection::RefToTarget, h, w)?,
        target_to_ref: argmax_flow(&c, FlowDirection::TargetToRef, h, w)?,
    })
}

/// Backward warp: `out(p) = grid(p + F(p))`, bilinear with border clamp.
pub fn warp(grid: &TensorGrid, flow: &FlowField) -> Result<TensorGrid> {
    let (h, w, c) = grid.dims();
    if (flow.height(), flow.width()) != (h, w) {
        return Err(Error::shape(format!(
            "flow {}x{} does not match grid {h}x{w}",
            flow.height(),
            flow.width()
        )));
    }
    let mut data = vec![0.0; h * w * c];
    for (idx, px) in data.chunks_exact_mut(c).enumerate() {
        let (y, x) = (idx / w, idx % w);
        let (dx, dy) = flow.get(y, x);
        sample_bilinear(grid.data(), h, w, c, y as f64 + dy, x as f64 + dx, px);
    }
    TensorGrid::new(h, w, c, data)
}

/// Most frequent rounded displacement inside `mask` (or everywhere), with
/// its share of the counted pixels. Ties go to the lexicographically
/// smallest `(dx, dy)`.
pub fn dominant_displacement(flow: &FlowField, mask: Option<&MaskGrid>) -> Option<((i64, i64), f64)> {
    let mut counts: HashMap<(i64, i64), usize> = HashMap::new();
    let mut total = 0usize;
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            if mask.is_some_and(|m| m.get(y, x) < 0.5) {
                continue;
            }
            let (dx, dy) = flow.get(y, x);
            *counts.entry((dx.round() as i64, dy.round() as i64)).or_default() += 1;
            total += 1;
        }
    }
    let (key, count) = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))?;
    Some((key, count as f64 / total as f64))
}

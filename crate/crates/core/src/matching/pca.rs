use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest one count as null
/// directions and are replaced by an orthonormal completion.
const RANK_TOLERANCE: f64 = 1e-10;

/// Principal component fit over the rows of a sample matrix.
#[derive(Debug, Clone)]
pub struct PcaFit {
    /// `D×dim`, orthonormal columns in order of decreasing variance.
    pub basis: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// `N×dim` projections of the centered samples.
    pub projected: DMatrix<f64>,
    /// Variance captured by each basis direction.
    pub eigenvalues: Vec<f64>,
    /// Number of trailing directions that carry no variance and were filled
    /// by orthonormal completion.
    pub completed_directions: usize,
}

impl PcaFit {
    /// Projects new samples (rows) onto the fitted basis.
    pub fn project(&self, samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if samples.ncols() != self.mean.len() {
            return Err(Error::shape(format!(
                "samples have {} features, basis expects {}",
                samples.ncols(),
                self.mean.len()
            )));
        }
        let mut centered = samples.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * &self.basis)
    }
}

/// Fits a `dim`-dimensional PCA to the rows of `samples` (`N×D`) and projects
/// them.
///
/// The covariance matrix is decomposed when `D ≤ N`; otherwise the smaller
/// `N×N` Gram matrix is decomposed and its eigenvectors are mapped back into
/// feature space.
pub fn pca_fit_project(samples: &DMatrix<f64>, dim: usize) -> Result<PcaFit> {
    let (n, d) = samples.shape();
    if dim == 0 || dim > d || dim > n {
        return Err(Error::validation(format!(
            "PCA dimension {dim} needs 1 <= dim <= min(samples {n}, features {d})"
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("PCA samples must be finite"));
    }

    let mean = samples.row_mean().transpose();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }

    let (directions, eigenvalues) = if d <= n {
        let cov = centered.transpose() * &centered / n as f64;
        let (vecs, vals) = sorted_eigen(cov);
        let cols: Vec<DVector<f64>> = (0..dim).map(|k| vecs.column(k).into_owned()).collect();
        (cols, vals[..dim].to_vec())
    } else {
        let gram = &centered * centered.transpose();
        let (vecs, vals) = sorted_eigen(gram);
        let mapped = centered.tr_mul(&vecs.columns(0, dim));
        let cols: Vec<DVector<f64>> = mapped
            .column_iter()
            .map(|c| {
                let norm = c.norm();
                if norm > 0.0 {
                    c / norm
                } else {
                    c.into_owned()
                }
            })
            .collect();
        let vals = vals[..dim].iter().map(|v| v / n as f64).collect();
        (cols, vals)
    };

    let top = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = top * RANK_TOLERANCE;
    let mut basis_cols: Vec<DVector<f64>> = Vec::with_capacity(dim);
    let mut kept_vals = Vec::with_capacity(dim);
    for (v, &lambda) in directions.into_iter().zip(&eigenvalues) {
        if lambda > cutoff && top > 0.0 {
            basis_cols.push(canonical_sign(v));
            kept_vals.push(lambda);
        }
    }
    let completed = dim - basis_cols.len();
    if completed > 0 {
        log::debug!("PCA rank below {dim}: completing {completed} directions");
        complete_orthonormal(&mut basis_cols, d, dim);
        kept_vals.resize(dim, 0.0);
    }

    let basis = DMatrix::from_columns(&basis_cols);
    let projected = &centered * &basis;
    Ok(PcaFit {
        basis,
        mean,
        projected,
        eigenvalues: kept_vals,
        completed_directions: completed,
    })
}

/// Eigen-decomposition of a symmetric matrix with eigenpairs sorted by
/// decreasing eigenvalue (ties keep the solver's index order).
fn sorted_eigen(m: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let vecs = DMatrix::from_columns(
        &order
            .iter()
            .map(|&k| eig.eigenvectors.column(k).into_owned())
            .collect::<Vec<_>>(),
    );
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    (vecs, vals)
}

/// Flips `v` so that its largest-magnitude entry is positive.
fn canonical_sign(v: DVector<f64>) -> DVector<f64> {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        -v
    } else {
        v
    }
}

/// Extends `cols` with standard basis vectors, Gram–Schmidt orthogonalized,
/// until it holds `dim` orthonormal columns.
fn complete_orthonormal(cols: &mut Vec<DVector<f64>>, d: usize, dim: usize) {
    for axis in 0..d {
        if cols.len() == dim {
            break;
        }
        let mut v = DVector::zeros(d);
        v[axis] = 1.0;
        for _ in 0..2 {
            for c in cols.iter() {
                let proj = c.dot(&v);
                v -= c * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            cols.push(v / norm);
        }
    }
    debug_assert_eq!(cols.len(), dim);
}

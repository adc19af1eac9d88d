//! Small complex linear-algebra helpers shared across modules.
//!
//! Vectorization follows the column-stacking convention: `vec(M)` stacks the
//! columns of `M`, so `vec(ABC) = (C^T ⊗ A) vec(B)`.

use ndarray::prelude::*;
use ndarray_linalg::SVD;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Column-stacking vectorization of a matrix.
pub fn vec_mat(m: &Array2<C64>) -> Array1<C64> {
    let (rows, cols) = m.dim();
    let mut out = Array1::zeros(rows * cols);
    for c in 0..cols {
        for r in 0..rows {
            out[c * rows + r] = m[[r, c]];
        }
    }
    out
}

/// Inverse of [`vec_mat`]: reshape a column-stacked vector back to `rows x cols`.
pub fn unvec_mat(v: &Array1<C64>, rows: usize, cols: usize) -> Result<Array2<C64>> {
    if v.len() != rows * cols {
        return Err(Error::ShapeMismatch {
            expected: format!("vector of length {}", rows * cols),
            got: format!("length {}", v.len()),
        });
    }
    let mut out = Array2::zeros((rows, cols));
    for c in 0..cols {
        for r in 0..rows {
            out[[r, c]] = v[c * rows + r];
        }
    }
    Ok(out)
}

/// Conjugate transpose.
pub fn hermitian(m: &Array2<C64>) -> Array2<C64> {
    let mut out = Array2::zeros((m.ncols(), m.nrows()));
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out[[c, r]] = m[[r, c]].conj();
        }
    }
    out
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Array2<C64>, b: &Array2<C64>) -> Array2<C64> {
    let (ra, ca) = a.dim();
    let (rb, cb) = b.dim();
    let mut out = Array2::zeros((ra * rb, ca * cb));
    for i in 0..ra {
        for j in 0..ca {
            let aij = a[[i, j]];
            if aij == C64::new(0.0, 0.0) {
                continue;
            }
            let mut block = out.slice_mut(s![i * rb..(i + 1) * rb, j * cb..(j + 1) * cb]);
            block.zip_mut_with(b, |o, &bv| *o = aij * bv);
        }
    }
    out
}

/// Frobenius norm.
pub fn frob(m: &Array2<C64>) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Squared L2 norm of a complex vector.
pub fn norm_sqr(v: &Array1<C64>) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum()
}

/// Numerical rank: singular values above `rel_tol` times the largest count.
pub fn matrix_rank(m: &Array2<C64>, rel_tol: f64) -> Result<usize> {
    let (_, s, _) = m.svd(false, false)?;
    let smax = s.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rel_tol * smax).count())
}

/// Moore-Penrose pseudo-inverse via SVD, discarding singular values below
/// `rel_tol` times the largest.
pub fn pinv(m: &Array2<C64>, rel_tol: f64) -> Result<Array2<C64>> {
    let (u, s, vt) = m.svd(true, true)?;
    let u = u.ok_or_else(|| Error::Linalg("svd returned no U".into()))?;
    let vt = vt.ok_or_else(|| Error::Linalg("svd returned no V^H".into()))?;
    let smax = s.iter().cloned().fold(0.0f64, f64::max);
    let k = s.len();
    // Only the leading min(m, n) singular directions matter:
    // pinv = V[:, :k] S^+ U[:, :k]^H, assembled as (S^+ V^H[:k, :])^H U^H.
    let u_k = u.slice(s![.., ..k]);
    let mut sv = Array2::<C64>::zeros((k, vt.ncols()));
    for i in 0..k {
        let inv = if smax > 0.0 && s[i] > rel_tol * smax {
            1.0 / s[i]
        } else {
            0.0
        };
        for j in 0..vt.ncols() {
            sv[[i, j]] = vt[[i, j]] * inv;
        }
    }
    let v_spinv = hermitian(&sv); // ncols(m) x k
    Ok(v_spinv.dot(&hermitian(&u_k.to_owned())))
}

/// A standard complex Gaussian vector: unit variance per entry
/// (real and imaginary parts each N(0, 1/2)).
pub fn standard_complex_gaussian<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Array1<C64> {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    Array1::from_shape_fn(len, |_| {
        C64::new(
            scale * rng.sample::<f64, _>(rand_distr::StandardNormal),
            scale * rng.sample::<f64, _>(rand_distr::StandardNormal),
        )
    })
}

/// Matrix of i.i.d. standard complex Gaussians, unit variance per entry.
pub fn complex_gaussian_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
) -> Array2<C64> {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    Array2::from_shape_fn((rows, cols), |_| {
        C64::new(
            scale * rng.sample::<f64, _>(rand_distr::StandardNormal),
            scale * rng.sample::<f64, _>(rand_distr::StandardNormal),
        )
    })
}

use super::Matrix;
use crate::error::{Error, Result};

/// Sweep budget for the cyclic Jacobi iteration.
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Convergence threshold on the largest off-diagonal entry, relative to `‖A‖_max`.
pub const JACOBI_REL_TOL: f64 = 1e-12;

const SYMMETRY_TOL: f64 = 1e-9;

/// `A = U · diag(S) · Uᵀ` with eigenvectors in the columns of `U`.
///
/// Eigenvalues are sorted non-increasing. Each eigenvector is signed so that
/// its first component of largest magnitude is non-negative, which makes
/// rotations derived from it reproducible.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub vectors: Matrix,
    pub values: Vec<f64>,
    pub sweeps: usize,
}

impl EigenDecomposition {
    pub fn reconstruct(&self) -> Matrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for i in 0..n {
            for j in 0..n {
                scaled[(i, j)] *= self.values[j];
            }
        }
        scaled
            .matmul_t(false, &self.vectors, true)
            .expect("square factors")
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Deterministic: the pivot order is fixed row-by-row over the upper
/// triangle, and ties in the eigenvalue sort keep the pivot order.
pub fn jacobi_eigh(a: &Matrix) -> Result<EigenDecomposition> {
    if !a.is_square() {
        return Err(Error::dim(
            "jacobi_eigh",
            "square matrix",
            format!("{}x{}", a.rows(), a.cols()),
        ));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("jacobi_eigh input"));
    }
    let scale = a.max_abs();
    let (gap, row, col) = a.asymmetry();
    if gap > SYMMETRY_TOL * scale.max(1.0) {
        return Err(Error::NotSymmetric { row, col, gap });
    }

    let n = a.rows();
    let mut w = a.clone();
    w.symmetrize();
    let w = w.as_mut_slice();
    // Rows of `vt` are the eigenvectors, so updates stay contiguous.
    let mut vt = Matrix::identity(n);
    let vt_data = vt.as_mut_slice();
    let tol = JACOBI_REL_TOL * scale;

    let mut sweeps = 0;
    loop {
        let off = max_off_diagonal(w, n);
        if off <= tol {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Convergence {
                sweeps,
                residual: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[p * n + q];
                if apq.abs() <= tol {
                    continue;
                }
                rotate(w, vt_data, n, p, q, apq);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[j * n + j].total_cmp(&w[i * n + i]));
    let values: Vec<f64> = order.iter().map(|&i| w[i * n + i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let v = vt.row(src);
        let lead = v
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |best, (k, x)| {
                if x.abs() > best.1 {
                    (k, x.abs())
                } else {
                    best
                }
            })
            .0;
        let sign = if v.get(lead).copied().unwrap_or(0.0) < 0.0 {
            -1.0
        } else {
            1.0
        };
        for (k, x) in v.iter().enumerate() {
            vectors[(k, dst)] = sign * x;
        }
    }
    Ok(EigenDecomposition {
        vectors,
        values,
        sweeps,
    })
}

fn max_off_diagonal(w: &[f64], n: usize) -> f64 {
    let mut m = 0.0_f64;
    for p in 0..n {
        for q in (p + 1)..n {
            m = m.max(w[p * n + q].abs());
        }
    }
    m
}

/// Applies the plane rotation that annihilates `w[p,q]`; the working matrix
/// is kept fully symmetric.
fn rotate(w: &mut [f64], vt: &mut [f64], n: usize, p: usize, q: usize, apq: f64) {
    let app = w[p * n + p];
    let aqq = w[q * n + q];
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let tau = s / (1.0 + c);

    w[p * n + p] = app - t * apq;
    w[q * n + q] = aqq + t * apq;
    w[p * n + q] = 0.0;
    w[q * n + p] = 0.0;
    for r in 0..n {
        if r == p || r == q {
            continue;
        }
        let arp = w[r * n + p];
        let arq = w[r * n + q];
        let new_rp = arp - s * (arq + tau * arp);
        let new_rq = arq + s * (arp - tau * arq);
        w[r * n + p] = new_rp;
        w[p * n + r] = new_rp;
        w[r * n + q] = new_rq;
        w[q * n + r] = new_rq;
    }
    let (head, tail) = vt.split_at_mut(q * n);
    let vp = &mut head[p * n..(p + 1) * n];
    let vq = &mut tail[..n];
    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
        let (vpr, vqr) = (*x, *y);
        *x = vpr - s * (vqr + tau * vpr);
        *y = vqr + s * (vpr - tau * vqr);
    }
}

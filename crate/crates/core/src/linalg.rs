//! Symmetric eigendecomposition and the `±½` matrix powers used for ZCA
//! whitening and coloring.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Inputs whose transpose differs by more than this are rejected.
pub const SYMMETRY_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

/// Spectrum of a symmetric matrix: `m = V · diag(values) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `values`.
    pub vectors: Matrix,
}

/// Power applied by [`mat_pow_half`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfPower {
    Sqrt,
    InvSqrt,
}

impl HalfPower {
    fn apply(self, lambda: f64) -> f64 {
        match self {
            HalfPower::Sqrt => libm::sqrt(lambda),
            HalfPower::InvSqrt => 1.0 / libm::sqrt(lambda),
        }
    }
}

/// Cyclic Jacobi eigendecomposition.
///
/// Each sweep visits every off-diagonal pair once and annihilates it with a
/// plane rotation; rotations are accumulated into the eigenvector matrix.
/// Iteration stops once the off-diagonal mass is negligible relative to the
/// diagonal.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    let (n, cols) = m.shape();
    if n != cols {
        return Err(Error::Shape(format!("sym_eig needs a square matrix, got {n}x{cols}")));
    }
    if n == 0 {
        return Err(Error::Argument("sym_eig of an empty matrix".into()));
    }
    m.ensure_finite("sym_eig input")?;
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }

    let mut a = m.clone();
    // symmetrize exactly so rotations see a consistent matrix
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let mut v = Matrix::identity(n);

    let scale = a.frobenius().max(f64::MIN_POSITIVE);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if libm::sqrt(off) <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                // theta.signum() is 1 for +0, so t is well defined when app == aqq
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numeric(format!("Jacobi iteration did not converge in {MAX_SWEEPS} sweeps")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(SymEig { values, vectors })
}

/// Rebuilds `V · diag(f(λ)) · Vᵀ`.
pub fn spectral_map(eig: &SymEig, f: impl Fn(f64) -> f64) -> Matrix {
    let n = eig.values.len();
    let mut scaled = eig.vectors.clone();
    for j in 0..n {
        let s = f(eig.values[j]);
        for i in 0..n {
            scaled[(i, j)] *= s;
        }
    }
    let mut out = scaled.matmul_t(&eig.vectors);
    symmetrize(&mut out);
    out
}

/// `m^{±½}` with eigenvalues clamped below at `eps`.
pub fn mat_pow_half(m: &Matrix, power: HalfPower, eps: f64) -> Result<Matrix> {
    check_eps(eps)?;
    let eig = sym_eig(m)?;
    Ok(spectral_map(&eig, |l| power.apply(l.max(eps))))
}

/// Both `m^{½}` and `m^{-½}` from a single eigendecomposition.
pub fn sqrt_and_inv_sqrt(m: &Matrix, eps: f64) -> Result<(Matrix, Matrix)> {
    check_eps(eps)?;
    let eig = sym_eig(m)?;
    Ok((
        spectral_map(&eig, |l| HalfPower::Sqrt.apply(l.max(eps))),
        spectral_map(&eig, |l| HalfPower::InvSqrt.apply(l.max(eps))),
    ))
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("eigenvalue clamp must be positive, got {eps}")))
    }
}

fn symmetrize(m: &mut Matrix) {
    let n = m.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

//! Small dense linear-algebra helpers on top of `nalgebra`.
//!
//! The state-space matrices in this crate mix units (s⁻¹, s⁻², kg⁻¹), so
//! entries routinely span twenty orders of magnitude. Everything that
//! iterates on matrices first applies a power-of-two diagonal balancing,
//! which is exact in floating point and undone at the end.

use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// One-norm (maximum absolute column sum).
pub fn norm1(m: &Mat) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &Mat, rel_tol: f64) -> bool {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() <= rel_tol * scale
}

/// Power-of-two diagonal scaling `d` such that `D⁻¹ M D` has comparable row
/// and column norms (Parlett–Reinsch).
pub fn balance(m: &Mat) -> Vec<f64> {
    let n = m.nrows();
    let mut b = m.clone();
    let mut d = alloc::vec![1.0; n];
    let radix = 2.0;
    let radix2 = radix * radix;
    for _sweep in 0..200 {
        let mut converged = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += b[(j, i)].abs();
                    r += b[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut g = r / radix;
            while c < g {
                f *= radix;
                c *= radix2;
            }
            g = r * radix;
            while c >= g {
                f /= radix;
                c /= radix2;
            }
            if (c + r) / f < 0.95 * s {
                converged = false;
                d[i] *= f;
                for j in 0..n {
                    b[(i, j)] /= f;
                    b[(j, i)] *= f;
                }
            }
        }
        if converged {
            break;
        }
    }
    d
}

/// `D⁻¹ M D` for a diagonal `D = diag(d)`.
pub fn similarity(m: &Mat, d: &[f64]) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * d[j] / d[i])
}

/// `D M D⁻¹`, the inverse of [`similarity`].
pub fn unsimilarity(m: &Mat, d: &[f64]) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * d[i] / d[j])
}

/// Matrix exponential `exp(M t)` from the truncated Taylor series.
///
/// Terms are accumulated until `‖term‖ < tol·‖sum‖`. The series is summed
/// on a balanced, power-of-two scaled copy of `M t` and squared back, which
/// leaves the result mathematically identical to the plain series while
/// keeping every partial sum well conditioned.
pub fn expm_series(m: &Mat, t: f64, tol: f64) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::Dimension("expm of a non-square matrix".into()));
    }
    if !(tol > 0.0) {
        return Err(crate::error::invalid("tol", "must be positive"));
    }
    let n = m.nrows();
    let mt = m * t;
    if mt.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("expm argument"));
    }
    let d = balance(&mt);
    let mb = similarity(&mt, &d);
    let nrm = norm1(&mb);
    let mut squarings = 0u32;
    if nrm > 0.5 {
        squarings = libm::ceil(libm::log2(nrm / 0.5)) as u32;
    }
    let x = mb * libm::exp2(-(squarings as f64));
    let mut sum = Mat::identity(n, n);
    let mut term = Mat::identity(n, n);
    const MAX_TERMS: usize = 200;
    let mut last = f64::INFINITY;
    let mut converged = false;
    for k in 1..=MAX_TERMS {
        term = &term * &x / k as f64;
        sum += &term;
        last = norm1(&term);
        if last < tol * norm1(&sum) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SeriesNotConverged {
            iterations: MAX_TERMS,
            last_term_norm: last,
        });
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    Ok(unsimilarity(&sum, &d))
}

/// Eigenvalues of a real square matrix as `(re, im)` pairs.
pub fn eigenvalues(m: &Mat) -> Vec<(f64, f64)> {
    // Eigenvalues are similarity invariant; balancing improves accuracy
    // for the badly scaled oscillator matrices.
    let d = balance(m);
    let b = similarity(m, &d);
    b.complex_eigenvalues()
        .iter()
        .map(|c| (c.re, c.im))
        .collect()
}

pub fn spectral_radius(m: &Mat) -> f64 {
    eigenvalues(m)
        .into_iter()
        .map(|(re, im)| libm::hypot(re, im))
        .fold(0.0, f64::max)
}

pub fn max_real_part(m: &Mat) -> f64 {
    eigenvalues(m)
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn inverse(m: &Mat, what: &'static str) -> Result<Mat> {
    m.clone().try_inverse().ok_or(Error::Singular(what))
}

/// Solves `X = F X Fᵀ + N` for Schur-stable `F` by the doubling (Smith)
/// iteration.
pub fn discrete_lyapunov(f: &Mat, n: &Mat) -> Result<Mat> {
    if spectral_radius(f) >= 1.0 {
        return Err(Error::NotStabilizable(
            "discrete Lyapunov equation needs a Schur-stable matrix".into(),
        ));
    }
    let mut x = n.clone();
    let mut a = f.clone();
    let k = x.nrows();
    for _ in 0..100 {
        let inc = &a * &x * a.transpose();
        x += &inc;
        a = &a * &a;
        // Converged when every increment is negligible against the geometric
        // mean of its diagonal entries, so tiny-scale blocks are resolved too.
        let small = (0..k).all(|i| {
            (0..k).all(|j| {
                let s = libm::sqrt((x[(i, i)] * x[(j, j)]).abs());
                inc[(i, j)].abs() <= 1e-16 * s || (s == 0.0 && inc[(i, j)] == 0.0)
            })
        });
        if small {
            return Ok(symmetrize(&x));
        }
    }
    Err(Error::RiccatiDiverged {
        residuals: alloc::vec![(f * &x * f.transpose() + n - &x).amax()],
    })
}

/// Solves `Aᵀ X + X A + M = 0` through the Kronecker form. Meant for the
/// small (n ≤ 12) systems of this crate.
pub fn continuous_lyapunov(a: &Mat, m: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let at = a.transpose();
    let mut big = Mat::zeros(n * n, n * n);
    // vec(Aᵀ X) = (I ⊗ Aᵀ) vec X, vec(X A) = (Aᵀ ⊗ I) vec X
    for j in 0..n {
        for i in 0..n {
            let row = j * n + i;
            for k in 0..n {
                big[(row, j * n + k)] += at[(i, k)];
                big[(row, k * n + i)] += a[(k, j)];
            }
        }
    }
    let rhs = nalgebra::DVector::from_iterator(n * n, m.iter().map(|v| -v));
    let sol = big
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("continuous Lyapunov operator"))?;
    Ok(symmetrize(&Mat::from_column_slice(n, n, sol.as_slice())))
}

/// Lower-triangular factor `L` with `L Lᵀ = S` for a symmetric positive
/// semidefinite `S`. A pivot that falls below `rel_tol` times its own
/// diagonal entry is treated as zero, so rows of very different scale are
/// handled independently.
pub fn psd_factor(s: &Mat, rel_tol: f64) -> Mat {
    let n = s.nrows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= rel_tol * s[(j, j)] || d <= 0.0 {
            continue;
        }
        let ljj = libm::sqrt(d);
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = s[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    l
}

/// Smallest eigenvalue of the Jacobi-scaled (unit diagonal) version of a
/// symmetric matrix. Non-negative up to rounding iff the matrix is PSD.
pub fn min_sym_eigen_scaled(s: &Mat) -> f64 {
    let n = s.nrows();
    let e: Vec<f64> = (0..n)
        .map(|i| {
            let d = s[(i, i)];
            if d > 0.0 {
                1.0 / libm::sqrt(d)
            } else {
                1.0
            }
        })
        .collect();
    let sb = symmetrize(&Mat::from_fn(n, n, |i, j| s[(i, j)] * e[i] * e[j]));
    sb.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

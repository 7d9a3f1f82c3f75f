use alloc::vec::Vec;

use nalgebra::Complex;

use super::care::rank_deficient;
use super::{congruence, inv_congruence, quadratic_term, riccati_scaling, CostWeights, DiscreteStateSpace};
use crate::error::{Error, Result};
use crate::linalg::{discrete_lyapunov, eigenvalues, spectral_radius, symmetrize, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DareMethod {
    Doubling,
    FixedPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    pub x: Mat,
    pub method: DareMethod,
    pub iterations: usize,
    pub residual: f64,
}

/// Stabilizing solution `S_d` of
/// `S = AᵀSA + Q − AᵀSB(R + BᵀSB)⁻¹BᵀSA`.
pub fn solve_dare(dss: &DiscreteStateSpace, weights: &CostWeights) -> Result<Mat> {
    Ok(solve_dare_matrices(&dss.a, &dss.b, &weights.q, &weights.r)?.x)
}

pub fn solve_dare_matrices(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<DareSolution> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension("inconsistent DARE operands".into()));
    }
    CostWeights {
        q: q.clone(),
        r: r.clone(),
    }
    .validate()?;
    if q.iter().all(|&v| v == 0.0) {
        return Ok(DareSolution {
            x: Mat::zeros(n, n),
            method: DareMethod::Doubling,
            iterations: 0,
            residual: 0.0,
        });
    }
    let g = quadratic_term(b, r)?;
    let t = riccati_scaling(a, &g, q);
    let at = Mat::from_fn(n, n, |i, j| a[(i, j)] * t[j] / t[i]);
    let gt = inv_congruence(&g, &t);
    let qt = congruence(q, &t);
    check_pbh(&at, &gt, &qt)?;

    let mut history = Vec::new();
    let (mut x, method, iterations) = match doubling(&at, &gt, &qt) {
        Some((x, it)) => (x, DareMethod::Doubling, it),
        None => {
            let (x, it) = fixed_point(&at, &gt, &qt, &mut history)?;
            (x, DareMethod::FixedPoint, it)
        }
    };
    let mut residual = relative_residual(&at, &gt, &qt, &x);
    // Hewer refinement polishes the last digits.
    for _ in 0..3 {
        if residual < 1e-15 {
            break;
        }
        match hewer_step(&at, &gt, &qt, &x) {
            Some(next) => {
                let r = relative_residual(&at, &gt, &qt, &next);
                if r < residual {
                    residual = r;
                    x = next;
                } else {
                    break;
                }
            }
            None => break,
        }
    }
    history.push(residual);
    if !(residual < 1e-9) {
        return Err(Error::RiccatiDiverged { residuals: history });
    }
    let closed = closed_loop(&at, &gt, &x);
    if spectral_radius(&closed) >= 1.0 {
        return Err(Error::NotStabilizable("DARE solution is not stabilizing".into()));
    }
    Ok(DareSolution {
        x: inv_congruence(&x, &t),
        method,
        iterations,
        residual,
    })
}

/// `‖S − AᵀS(I + GS)⁻¹A − Q‖_F / ‖S‖_F` in the solver's balanced
/// coordinates.
pub fn dare_relative_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, s: &Mat) -> Result<f64> {
    let g = quadratic_term(b, r)?;
    let t = riccati_scaling(a, &g, q);
    let n = a.nrows();
    let at = Mat::from_fn(n, n, |i, j| a[(i, j)] * t[j] / t[i]);
    Ok(relative_residual(&at, &inv_congruence(&g, &t), &congruence(q, &t), &congruence(s, &t)))
}

fn riccati_map(a: &Mat, g: &Mat, q: &Mat, x: &Mat) -> Option<Mat> {
    let n = a.nrows();
    let w = Mat::identity(n, n) + g * x;
    let sol = w.lu().solve(a)?;
    Some(symmetrize(&(a.transpose() * x * sol + q)))
}

fn relative_residual(a: &Mat, g: &Mat, q: &Mat, x: &Mat) -> f64 {
    let xn = x.norm();
    match riccati_map(a, g, q, x) {
        Some(fx) if xn > 0.0 => (&fx - x).norm() / xn,
        Some(fx) => (&fx - x).norm(),
        None => f64::INFINITY,
    }
}

/// `(I + GX)⁻¹ A`, the closed-loop matrix `A − BK`.
fn closed_loop(a: &Mat, g: &Mat, x: &Mat) -> Mat {
    let n = a.nrows();
    (Mat::identity(n, n) + g * x).lu().solve(a).unwrap_or_else(|| a.clone())
}

/// Structure-preserving doubling.
fn doubling(a: &Mat, g: &Mat, q: &Mat) -> Option<(Mat, usize)> {
    let n = a.nrows();
    let id = Mat::identity(n, n);
    let (mut ak, mut gk, mut hk) = (a.clone(), g.clone(), q.clone());
    for it in 1..=100 {
        let w = (&id + &gk * &hk).lu();
        let w_a = w.solve(&ak)?;
        let w_g = w.solve(&gk)?;
        let h_next = symmetrize(&(&hk + ak.transpose() * &hk * &w_a));
        let g_next = symmetrize(&(&gk + &ak * w_g * ak.transpose()));
        let a_next = &ak * w_a;
        if h_next.iter().chain(g_next.iter()).chain(a_next.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        let delta = (&h_next - &hk).norm();
        hk = h_next;
        gk = g_next;
        ak = a_next;
        if delta <= 1e-15 * hk.norm() {
            return Some((hk, it));
        }
    }
    None
}

fn fixed_point(a: &Mat, g: &Mat, q: &Mat, history: &mut Vec<f64>) -> Result<(Mat, usize)> {
    let mut x = q.clone();
    const CAP: usize = 200_000;
    for it in 1..=CAP {
        let next = riccati_map(a, g, q, &x).ok_or(Error::Singular("I + G X"))?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::RiccatiDiverged {
                residuals: core::mem::take(history),
            });
        }
        let delta = (&next - &x).norm() / next.norm().max(f64::MIN_POSITIVE);
        x = next;
        if it % 1000 == 0 {
            history.push(delta);
        }
        if delta < 1e-14 {
            return Ok((x, it));
        }
    }
    Err(Error::RiccatiDiverged {
        residuals: core::mem::take(history),
    })
}

/// One Newton (Hewer) step: closed-loop Lyapunov solve at the current gain.
fn hewer_step(a: &Mat, g: &Mat, q: &Mat, x: &Mat) -> Option<Mat> {
    let n = a.nrows();
    let ac = closed_loop(a, g, x);
    // Qₖ = Q + KᵀRK in G-form: (A − Ac)ᵀ G⁺ ... avoided by the identity
    // X = Acᵀ X Ac + Q + Acᵀ X G X Ac for the exact solution.
    let extra = ac.transpose() * x * g * x * &ac;
    let rhs = symmetrize(&(q + extra));
    let sol = discrete_lyapunov(&ac.transpose(), &rhs).ok()?;
    if sol.iter().any(|v| !v.is_finite()) || sol.nrows() != n {
        return None;
    }
    Some(sol)
}

fn check_pbh(a: &Mat, g: &Mat, q: &Mat) -> Result<()> {
    let n = a.nrows();
    for (re, im) in eigenvalues(a) {
        if libm::hypot(re, im) < 1.0 - 1e-9 {
            continue;
        }
        let lambda = Complex::new(re, im);
        let shifted = |i: usize, j: usize| {
            let d = if i == j { lambda } else { Complex::new(0.0, 0.0) };
            d - Complex::new(a[(i, j)], 0.0)
        };
        let ctrl = nalgebra::DMatrix::<Complex<f64>>::from_fn(n, 2 * n, |i, j| {
            if j < n {
                shifted(i, j)
            } else {
                Complex::new(g[(i, j - n)], 0.0)
            }
        });
        if rank_deficient(ctrl) {
            return Err(Error::NotStabilizable(alloc::format!(
                "uncontrollable mode at {re:+.3e}{im:+.3e}i"
            )));
        }
        let obs = nalgebra::DMatrix::<Complex<f64>>::from_fn(2 * n, n, |i, j| {
            if i < n {
                shifted(i, j)
            } else {
                Complex::new(q[(i - n, j)], 0.0)
            }
        });
        if rank_deficient(obs) {
            return Err(Error::NotDetectable(alloc::format!(
                "unobservable mode at {re:+.3e}{im:+.3e}i"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PhysicalSystem;
    use crate::riccati::{discretize, solve_care, WeightLayout};

    #[test]
    fn scalar_quadratic_root() {
        // s² − 0.25 s − 1 = 0
        let one = Mat::identity(1, 1);
        let sol = solve_dare_matrices(&Mat::from_element(1, 1, 0.5), &one, &one, &one).unwrap();
        let expected = (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0;
        assert!((sol.x[(0, 0)] - expected).abs() < 1e-12);
        assert!((sol.x[(0, 0)] - 1.13278).abs() < 1e-5);
    }

    #[test]
    fn fixed_point_agrees_with_doubling() {
        let a = Mat::from_row_slice(2, 2, &[0.9, 0.3, -0.2, 1.05]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let q = Mat::identity(2, 2);
        let r = Mat::from_element(1, 1, 0.5);
        let g = quadratic_term(&b, &r).unwrap();
        let (xd, _) = doubling(&a, &g, &q).unwrap();
        let mut h = Vec::new();
        let (xf, _) = fixed_point(&a, &g, &q, &mut h).unwrap();
        assert!((&xd - &xf).amax() < 1e-10 * xd.amax());
    }

    #[test]
    fn zero_weight() {
        let sys = PhysicalSystem::reference(0.0);
        let dss = discretize(&sys.state_space().unwrap(), 64e-9, 1e-16).unwrap();
        let mut w = CostWeights::energy(&sys, WeightLayout::Energy);
        w.q.fill(0.0);
        assert!(solve_dare(&dss, &w).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn particle_residual_and_symmetry() {
        let sys = PhysicalSystem::reference(0.0);
        let dss = discretize(&sys.state_space().unwrap(), 64e-9, 1e-16).unwrap();
        let w = CostWeights::energy(&sys, WeightLayout::Energy);
        let s = solve_dare(&dss, &w).unwrap();
        let res = dare_relative_residual(&dss.a, &dss.b, &w.q, &w.r, &s).unwrap();
        assert!(res < 1e-9, "{res}");
        assert!(crate::linalg::is_symmetric(&s, 1e-12));
        assert!(crate::linalg::min_sym_eigen_scaled(&s) > -1e-10);
    }

    #[test]
    fn continuous_limit() {
        // With Q_d = Q T and R_d = R T, S_d → S and K_d → K as T → 0.
        let sys = PhysicalSystem::reference(0.0);
        let ss = sys.state_space_with_gamma(1e3).unwrap();
        let w = CostWeights::energy(&sys, WeightLayout::Energy);
        let (s, k) = solve_care(&ss, &w).unwrap();
        let wmax = sys.trap.omega.iter().cloned().fold(0.0, f64::max);
        let ts = 5e-4 / wmax;
        let dss = discretize(&ss, ts, 1e-16).unwrap();
        let wd = w.scaled(ts);
        let sd = solve_dare(&dss, &wd).unwrap();
        let kd = crate::riccati::lqr_gain_discrete(&dss, &sd, &wd, &crate::riccati::StructureMask::full(3, 6)).unwrap();
        for i in 0..6 {
            assert!((sd[(i, i)] / s[(i, i)] - 1.0).abs() < 0.01, "S[{i}{i}]");
        }
        let kmax = k.amax();
        for (a, b) in kd.iter().zip(k.iter()) {
            if b.abs() > 1e-3 * kmax {
                assert!((a / b - 1.0).abs() < 0.01);
            }
        }
    }

    #[test]
    fn uncontrollable_unstable_mode() {
        let a = Mat::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.5]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let err = solve_dare_matrices(&a, &b, &Mat::identity(2, 2), &Mat::identity(1, 1)).unwrap_err();
        assert!(matches!(err, Error::NotStabilizable(_)));
    }
}

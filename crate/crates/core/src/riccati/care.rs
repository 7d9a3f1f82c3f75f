use alloc::format;
use alloc::vec::Vec;

use nalgebra::Complex;

use super::{congruence, inv_congruence, quadratic_term, riccati_scaling, CostWeights};
use crate::error::{Error, Result};
use crate::linalg::{continuous_lyapunov, eigenvalues, max_real_part, norm1, symmetrize, Mat};
use crate::model::StateSpace;

/// Stabilizing solution of `SA + AᵀS + Q − S B R⁻¹ Bᵀ S = 0` and the gain
/// `K = R⁻¹ Bᵀ S`.
pub fn solve_care(ss: &StateSpace, weights: &CostWeights) -> Result<(Mat, Mat)> {
    solve_care_matrices(&ss.a, &ss.b, &weights.q, &weights.r)
}

pub fn solve_care_matrices(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<(Mat, Mat)> {
    let n = a.nrows();
    check_dims(a, b, q, r)?;
    let weights = CostWeights {
        q: q.clone(),
        r: r.clone(),
    };
    weights.validate()?;
    if q.iter().all(|&v| v == 0.0) {
        return Ok((Mat::zeros(n, n), Mat::zeros(b.ncols(), n)));
    }
    let g = quadratic_term(b, r)?;
    let scaled = Scaled::new(a, &g, q);
    check_pbh(&scaled.a, &scaled.g, &scaled.q)?;

    let s0 = sign_function_solution(&scaled)?;
    let s = newton_kleinman(&scaled, s0)?;
    let res = scaled.residual(&s);
    if !(res < 1e-9) {
        return Err(Error::RiccatiDiverged { residuals: alloc::vec![res] });
    }
    let s = inv_congruence(&s, &scaled.t);
    let k = r
        .clone()
        .lu()
        .solve(&(b.transpose() * &s))
        .ok_or(Error::Singular("R"))?;
    Ok((s, k))
}

/// `‖SA + AᵀS + Q − SGS‖_F / (‖SA‖_F + ‖AᵀS‖_F + ‖Q‖_F + ‖SGS‖_F)`, evaluated
/// in the balanced coordinates the solver works in.
pub fn care_relative_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, s: &Mat) -> Result<f64> {
    let g = quadratic_term(b, r)?;
    let scaled = Scaled::new(a, &g, q);
    let st = congruence(s, &scaled.t);
    let sa = &st * &scaled.a;
    let sgs = &st * &scaled.g * &st;
    let res = &sa + sa.transpose() + &scaled.q - &sgs;
    let denom = 2.0 * sa.norm() + scaled.q.norm() + sgs.norm();
    Ok(if denom == 0.0 { 0.0 } else { res.norm() / denom })
}

fn check_dims(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<()> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.nrows() != n || q.ncols() != n || r.nrows() != b.ncols() || r.ncols() != b.ncols() {
        return Err(Error::Dimension(format!(
            "A {}×{}, B {}×{}, Q {}×{}, R {}×{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    Ok(())
}

/// The problem in coordinates `x = T x̃` and time `t = τ/c`.
struct Scaled {
    t: Vec<f64>,
    a: Mat,
    g: Mat,
    q: Mat,
}

impl Scaled {
    fn new(a: &Mat, g: &Mat, q: &Mat) -> Self {
        let t = riccati_scaling(a, g, q);
        let a_t = Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] * t[j] / t[i]);
        let mut c = norm1(&a_t);
        if !(c > 0.0) {
            c = 1.0;
        }
        c = libm::exp2(libm::round(libm::log2(c)));
        // Dividing the whole equation by c leaves S̃ = T S T unchanged.
        let g = inv_congruence(g, &t) / c;
        let q = congruence(q, &t) / c;
        Self { t, a: a_t / c, g, q }
    }

    fn residual_matrix(&self, s: &Mat) -> Mat {
        let sa = s * &self.a;
        &sa + sa.transpose() + &self.q - s * &self.g * s
    }

    fn residual(&self, s: &Mat) -> f64 {
        let sa = s * &self.a;
        let sgs = s * &self.g * s;
        let denom = 2.0 * sa.norm() + self.q.norm() + sgs.norm();
        if denom == 0.0 {
            0.0
        } else {
            self.residual_matrix(s).norm() / denom
        }
    }
}

/// PBH rank tests on the eigenvalues of `A` in the closed right half plane.
fn check_pbh(a: &Mat, g: &Mat, q: &Mat) -> Result<()> {
    let n = a.nrows();
    let scale = a.amax().max(g.amax()).max(q.amax()).max(f64::MIN_POSITIVE);
    for (re, im) in eigenvalues(a) {
        if re < -1e-9 * scale {
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
            return Err(Error::NotStabilizable(format!("uncontrollable mode at {re:+.3e}{im:+.3e}i")));
        }
        let obs = nalgebra::DMatrix::<Complex<f64>>::from_fn(2 * n, n, |i, j| {
            if i < n {
                shifted(i, j)
            } else {
                Complex::new(q[(i - n, j)], 0.0)
            }
        });
        if rank_deficient(obs) {
            return Err(Error::NotDetectable(format!("unobservable mode at {re:+.3e}{im:+.3e}i")));
        }
    }
    Ok(())
}

pub(crate) fn rank_deficient(m: nalgebra::DMatrix<Complex<f64>>) -> bool {
    let k = m.nrows().min(m.ncols());
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().take(k).cloned().fold(f64::INFINITY, f64::min);
    max == 0.0 || min <= 1e-10 * max
}

/// Solution from the matrix sign function of the Hamiltonian
/// `H = [[A, −G], [−Q, −Aᵀ]]`.
fn sign_function_solution(p: &Scaled) -> Result<Mat> {
    let n = p.a.nrows();
    let mut z = Mat::zeros(2 * n, 2 * n);
    z.view_mut((0, 0), (n, n)).copy_from(&p.a);
    z.view_mut((0, n), (n, n)).copy_from(&(-&p.g));
    z.view_mut((n, 0), (n, n)).copy_from(&(-&p.q));
    z.view_mut((n, n), (n, n)).copy_from(&(-p.a.transpose()));
    let mut converged = false;
    for _ in 0..100 {
        let lu = z.clone().lu();
        let det = lu.determinant();
        let zi = lu.try_inverse().ok_or(Error::NotStabilizable(
            "Hamiltonian has eigenvalues on the imaginary axis".into(),
        ))?;
        let mu = if det != 0.0 && det.is_finite() {
            libm::pow(det.abs(), -1.0 / (2 * n) as f64)
        } else {
            1.0
        };
        let next = (&z * mu + zi / mu) * 0.5;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix sign iteration"));
        }
        let delta = norm1(&(&next - &z));
        z = next;
        if delta <= 1e-13 * norm1(&z) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NotStabilizable("matrix sign iteration did not converge".into()));
    }
    // Stable invariant subspace = null(Z + I): [Z₁₂; Z₂₂ + I] S = −[Z₁₁ + I; Z₂₁].
    let mut lhs = Mat::zeros(2 * n, n);
    let mut rhs = Mat::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&z.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(z.view((n, n), (n, n)) + Mat::identity(n, n)));
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(z.view((0, 0), (n, n)) + Mat::identity(n, n))));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-z.view((n, 0), (n, n))));
    let s = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|_| Error::Singular("sign-function subspace"))?;
    Ok(symmetrize(&s))
}

/// Newton–Kleinman refinement: `(A − GS)ᵀX + X(A − GS) + Q + SGS = 0`.
fn newton_kleinman(p: &Scaled, mut s: Mat) -> Result<Mat> {
    let mut best = p.residual(&s);
    for _ in 0..20 {
        if best < 1e-14 {
            break;
        }
        let ac = &p.a - &p.g * &s;
        if max_real_part(&ac) >= 0.0 {
            break;
        }
        let rhs = &p.q + &s * &p.g * &s;
        let next = continuous_lyapunov(&ac, &rhs)?;
        let r = p.residual(&next);
        if !(r < best) {
            break;
        }
        best = r;
        s = next;
    }
    if max_real_part(&(&p.a - &p.g * &s)) >= 0.0 {
        return Err(Error::NotStabilizable("solution is not stabilizing".into()));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PhysicalSystem;
    use crate::riccati::{CostWeights, WeightLayout};

    #[test]
    fn scalar_closed_form() {
        let one = Mat::identity(1, 1);
        let (s, k) = solve_care_matrices(&Mat::zeros(1, 1), &one, &one, &one).unwrap();
        assert!((s[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((k[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_unstable_plant() {
        // 2as − s² + 1 = 0 with a = 2 → s = 2 + √5
        let (s, _) = solve_care_matrices(
            &Mat::from_element(1, 1, 2.0),
            &Mat::identity(1, 1),
            &Mat::identity(1, 1),
            &Mat::identity(1, 1),
        )
        .unwrap();
        assert!((s[(0, 0)] - (2.0 + 5f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn zero_state_cost() {
        let sys = PhysicalSystem::reference(0.0);
        let ss = sys.state_space().unwrap();
        let mut w = CostWeights::energy(&sys, WeightLayout::Energy);
        w.q.fill(0.0);
        let (s, k) = solve_care(&ss, &w).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        assert!(k.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn particle_closed_loop_is_hurwitz() {
        let sys = PhysicalSystem::reference(0.0);
        let ss = sys.state_space().unwrap();
        let w = CostWeights::energy(&sys, WeightLayout::Energy);
        let (s, k) = solve_care(&ss, &w).unwrap();
        let closed = &ss.a - &ss.b * &k;
        for (re, _) in eigenvalues(&closed) {
            assert!(re < 0.0);
        }
        let res = care_relative_residual(&ss.a, &ss.b, &w.q, &w.r, &s).unwrap();
        assert!(res < 1e-9, "residual {res}");
    }

    #[test]
    fn uncontrollable_unstable_mode() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let err = solve_care_matrices(&a, &b, &Mat::identity(2, 2), &Mat::identity(1, 1)).unwrap_err();
        assert!(matches!(err, Error::NotStabilizable(_)));
    }

    #[test]
    fn undetectable_unstable_mode() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let q = Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let err = solve_care_matrices(&a, &Mat::identity(2, 2), &q, &Mat::identity(2, 2)).unwrap_err();
        assert!(matches!(err, Error::NotDetectable(_)));
    }
}

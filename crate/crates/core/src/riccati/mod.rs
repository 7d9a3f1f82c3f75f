//! Controller and estimator synthesis.
//!
//! Continuous and discrete algebraic Riccati equations are solved in a
//! rescaled coordinate system (power-of-two state balancing plus scalar
//! normalizations), which is what makes them usable on the levitated
//! particle model where matrix entries span more than 30 decades.

mod care;
mod dare;
mod discretize;
mod kalman;

pub use care::{care_relative_residual, solve_care, solve_care_matrices};
pub use dare::{dare_relative_residual, solve_dare, solve_dare_matrices, DareMethod, DareSolution};
pub use discretize::{discretize, discretize_with, van_loan, DiscreteStateSpace, DiscretizeOptions, InputHold, ProcessNoise};
pub use kalman::{kalman_steady_gain, kalman_steady_gain_matrices, lqg_steady_covariance, KalmanFilter, KalmanGain};

use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::linalg::{eigenvalues, is_symmetric, min_sym_eigen_scaled, spectral_radius, Mat};
use crate::model::{PhysicalSystem, NU, NX};

/// Quadratic cost `Σ xᵀ Q x + uᵀ R u` (or its integral in continuous time).
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub q: Mat,
    pub r: Mat,
}

/// How the two printed weight matrices are mapped onto `(Q, R)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightLayout {
    /// State cost `m·blkdiag(diag Ω², I₃)` (potential plus kinetic energy),
    /// control cost `(100/m)·diag(Ω⁻²)`. Dimensionally consistent with a
    /// 6-state, 3-input problem and the layout that reproduces the gains.
    #[default]
    Energy,
    /// State cost `(100/m)·diag(Ω⁻²)` on positions with zero velocity
    /// weight, control cost `m·diag(Ω²)`.
    PositionBlock,
}

impl CostWeights {
    pub fn new(q: Mat, r: Mat) -> Result<Self> {
        let w = Self { q, r };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.q.is_square() || !self.r.is_square() {
            return Err(Error::Dimension("cost weights must be square".into()));
        }
        if self.q.iter().chain(self.r.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost weights"));
        }
        if !is_symmetric(&self.q, 1e-12) || !is_symmetric(&self.r, 1e-12) {
            return Err(invalid("weights", "Q and R must be symmetric"));
        }
        if self.q.iter().any(|&v| v != 0.0) && min_sym_eigen_scaled(&self.q) < -1e-10 {
            return Err(invalid("Q", "must be positive semidefinite"));
        }
        if min_sym_eigen_scaled(&self.r) <= 0.0 || (0..self.r.nrows()).any(|i| self.r[(i, i)] <= 0.0) {
            return Err(invalid("R", "must be positive definite"));
        }
        Ok(())
    }

    /// The default weights for the trapped-particle problem.
    pub fn energy(system: &PhysicalSystem, layout: WeightLayout) -> Self {
        let m = system.particle.mass;
        let w = system.trap.omega;
        let mut q = Mat::zeros(NX, NX);
        let mut r = Mat::zeros(NU, NU);
        match layout {
            WeightLayout::Energy => {
                for i in 0..3 {
                    q[(i, i)] = m * w[i] * w[i];
                    q[(3 + i, 3 + i)] = m;
                    r[(i, i)] = 100.0 / (m * w[i] * w[i]);
                }
            }
            WeightLayout::PositionBlock => {
                for i in 0..3 {
                    q[(i, i)] = 100.0 / (m * w[i] * w[i]);
                    r[(i, i)] = m * w[i] * w[i];
                }
            }
        }
        Self { q, r }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            q: &self.q * factor,
            r: &self.r * factor,
        }
    }
}

/// Which gain entries are allowed to be nonzero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructureMask {
    pub nu: usize,
    pub nx: usize,
    /// Row-major `nu × nx`.
    pub allowed: Vec<bool>,
}

impl StructureMask {
    pub fn full(nu: usize, nx: usize) -> Self {
        Self {
            nu,
            nx,
            allowed: alloc::vec![true; nu * nx],
        }
    }

    /// Coupled transverse controller plus an independent z loop, i.e.
    /// `K = [[K_p,xy, 0, K_d,xy, 0], [0, k_p,z, 0, k_d,z]]`. With
    /// `cold_damping_z` the z position gain is forced to zero.
    pub fn transverse_plus_z(cold_damping_z: bool) -> Self {
        let mut m = Self::full(NU, NX);
        for j in 0..NX {
            let axis = j % 3;
            for i in 0..NU {
                let same_block = (i == 2) == (axis == 2);
                if !same_block {
                    m.set(i, j, false);
                }
            }
        }
        if cold_damping_z {
            m.set(2, 2, false);
        }
        m
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.nx + j]
    }

    pub fn set(&mut self, i: usize, j: usize, allowed: bool) {
        self.allowed[i * self.nx + j] = allowed;
    }

    pub fn apply(&self, k: &mut Mat) -> Result<()> {
        if k.nrows() != self.nu || k.ncols() != self.nx {
            return Err(Error::Dimension("mask does not match gain".into()));
        }
        for i in 0..self.nu {
            for j in 0..self.nx {
                if !self.is_allowed(i, j) {
                    k[(i, j)] = 0.0;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    /// Continuous-time gain `R⁻¹BᵀS` (unmasked).
    pub k: Mat,
    pub k_d: Mat,
    pub s: Mat,
    pub s_d: Mat,
    pub mask: StructureMask,
}

/// `K_d = (R_d + B_dᵀ S_d B_d)⁻¹ B_dᵀ S_d A_d`, masked, with the closed loop
/// re-checked for Schur stability.
pub fn lqr_gain_discrete(
    dss: &DiscreteStateSpace,
    s_d: &Mat,
    weights: &CostWeights,
    mask: &StructureMask,
) -> Result<Mat> {
    let bt_s = dss.b.transpose() * s_d;
    let lhs = &weights.r + &bt_s * &dss.b;
    let rhs = &bt_s * &dss.a;
    let mut k = lhs
        .lu()
        .solve(&rhs)
        .ok_or(Error::Singular("R_d + B_dᵀ S_d B_d"))?;
    mask.apply(&mut k)?;
    if k.iter().any(|&v| v != 0.0) {
        let closed = &dss.a - &dss.b * &k;
        // Marginal modes count as unstable.
        if spectral_radius(&closed) >= 1.0 - 1e-12 {
            let eigenvalues = eigenvalues(&closed)
                .into_iter()
                .filter(|&(re, im)| libm::hypot(re, im) >= 1.0 - 1e-12)
                .collect();
            return Err(Error::UnstableAfterMask { eigenvalues });
        }
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignOptions {
    pub ts: f64,
    pub discretize: DiscretizeOptions,
    pub layout: WeightLayout,
    /// Drag rate used in the design model. `None` takes it from the gas.
    pub gamma: Option<f64>,
    pub cold_damping_z: bool,
}

impl Default for DesignOptions {
    /// 64 ns controller step, rectangular input hold, energy weights,
    /// undamped design model, cold damping on z.
    fn default() -> Self {
        Self {
            ts: 64e-9,
            discretize: DiscretizeOptions {
                hold: InputHold::Rectangular,
                ..DiscretizeOptions::default()
            },
            layout: WeightLayout::Energy,
            gamma: Some(0.0),
            cold_damping_z: true,
        }
    }
}

/// Full LQR design: continuous gain, discrete gain and both Riccati
/// solutions.
pub fn design_controller(system: &PhysicalSystem, weights: &CostWeights, opts: &DesignOptions) -> Result<ControllerGains> {
    let gamma = match opts.gamma {
        Some(g) => g,
        None => system.gamma()?,
    };
    let ss = system.state_space_with_gamma(gamma)?;
    let (s, k) = solve_care(&ss, weights)?;
    let dss = discretize_with(&ss, opts.ts, opts.discretize)?;
    let s_d = solve_dare(&dss, weights)?;
    let mask = StructureMask::transverse_plus_z(opts.cold_damping_z);
    let k_d = lqr_gain_discrete(&dss, &s_d, weights, &mask)?;
    Ok(ControllerGains { k, k_d, s, s_d, mask })
}

/// Power-of-two state scaling `T` used by both Riccati solvers: the
/// balancing of `A`, times a common factor that equalizes the size of the
/// quadratic term `T⁻¹ G T⁻¹` and the constant term `T Q T`.
pub(crate) fn riccati_scaling(a: &Mat, g: &Mat, q: &Mat) -> Vec<f64> {
    let mut d = crate::linalg::balance(a);
    let gs = Mat::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] / (d[i] * d[j]));
    let qs = Mat::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * d[i] * d[j]);
    let (gn, qn) = (gs.amax(), qs.amax());
    if gn > 0.0 && qn > 0.0 && gn.is_finite() && qn.is_finite() {
        // ‖G‖/β² = ‖Q‖β²
        let beta = libm::exp2(libm::round(libm::log2(gn / qn) / 4.0));
        for v in d.iter_mut() {
            *v *= beta;
        }
    }
    d
}

/// `T M T` for a diagonal `T = diag(t)`.
pub(crate) fn congruence(m: &Mat, t: &[f64]) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * t[i] * t[j])
}

/// `T⁻¹ M T⁻¹`.
pub(crate) fn inv_congruence(m: &Mat, t: &[f64]) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] / (t[i] * t[j]))
}

/// `B R⁻¹ Bᵀ`.
pub(crate) fn quadratic_term(b: &Mat, r: &Mat) -> Result<Mat> {
    let rinv_bt = r
        .clone()
        .lu()
        .solve(&b.transpose())
        .ok_or(Error::Singular("R"))?;
    Ok(crate::linalg::symmetrize(&(b * rinv_bt)))
}

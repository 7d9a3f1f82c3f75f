use crate::error::{ensure_finite, invalid, Error, Result};
use crate::linalg::{expm_series, symmetrize, Mat};
use crate::model::StateSpace;

/// How the input matrix is carried to discrete time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputHold {
    /// Zero-order hold, `B_d = ∫₀^{T_s} e^{As} ds · B`.
    #[default]
    Exact,
    /// `B_d = T_s · B`: the force is applied as an impulse-like rectangle
    /// without the intra-sample rotation of the oscillator.
    Rectangular,
}

/// How the disturbance covariance over one step is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProcessNoise {
    /// `∫₀^{T_s} e^{As} W e^{Aᵀs} ds` via the Van Loan block exponential.
    #[default]
    VanLoan,
    /// First-order `W · T_s`.
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizeOptions {
    pub tol: f64,
    pub hold: InputHold,
    pub noise: ProcessNoise,
}

impl Default for DiscretizeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-16,
            hold: InputHold::Exact,
            noise: ProcessNoise::VanLoan,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteStateSpace {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub ts: f64,
    pub process_covariance: Mat,
}

impl DiscreteStateSpace {
    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b.ncols()
    }
}

/// Exact discretization with the default options at tolerance `tol`.
pub fn discretize(ss: &StateSpace, ts: f64, tol: f64) -> Result<DiscreteStateSpace> {
    discretize_with(
        ss,
        ts,
        DiscretizeOptions {
            tol,
            ..DiscretizeOptions::default()
        },
    )
}

pub fn discretize_with(ss: &StateSpace, ts: f64, opts: DiscretizeOptions) -> Result<DiscreteStateSpace> {
    ensure_finite("T_s", ts)?;
    if ts <= 0.0 {
        return Err(invalid("T_s", "must be positive"));
    }
    if !(opts.tol > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    let n = ss.a.nrows();
    let m = ss.b.ncols();
    if !ss.a.is_square() || ss.b.nrows() != n || ss.c.ncols() != n {
        return Err(Error::Dimension("inconsistent (A, B, C)".into()));
    }

    // [[A, B], [0, 0]] exponentiates to [[A_d, Γ B], [0, I]] with
    // Γ = Σ T^{k+1} A^k / (k+1)!, which equals (A_d − I)A⁻¹ when A is
    // invertible and stays defined when it is not.
    let mut aug = Mat::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&ss.a);
    aug.view_mut((0, n), (n, m)).copy_from(&ss.b);
    let e = expm_series(&aug, ts, opts.tol)?;
    let a_d = e.view((0, 0), (n, n)).into_owned();
    let b_d = match opts.hold {
        InputHold::Exact => e.view((0, n), (n, m)).into_owned(),
        InputHold::Rectangular => &ss.b * ts,
    };

    let process_covariance = match opts.noise {
        ProcessNoise::Euler => symmetrize(&(&ss.process_noise_psd * ts)),
        ProcessNoise::VanLoan => van_loan(&ss.a, &ss.process_noise_psd, ts, opts.tol)?,
    };

    Ok(DiscreteStateSpace {
        a: a_d,
        b: b_d,
        c: ss.c.clone(),
        ts,
        process_covariance,
    })
}

/// `∫₀^T e^{As} W e^{Aᵀs} ds` from the exponential of
/// `[[−A, W], [0, Aᵀ]]·T = [[·, F₁₂], [0, F₂₂]]`, giving `F₂₂ᵀ F₁₂`.
pub fn van_loan(a: &Mat, w: &Mat, ts: f64, tol: f64) -> Result<Mat> {
    let n = a.nrows();
    if w.iter().all(|&v| v == 0.0) {
        return Ok(Mat::zeros(n, n));
    }
    let mut m = Mat::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&(-a));
    m.view_mut((0, n), (n, n)).copy_from(w);
    m.view_mut((n, n), (n, n)).copy_from(&a.transpose());
    let f = expm_series(&m, ts, tol)?;
    let f12 = f.view((0, n), (n, n)).into_owned();
    let f22 = f.view((n, n), (n, n)).into_owned();
    Ok(symmetrize(&(f22.transpose() * f12)))
}

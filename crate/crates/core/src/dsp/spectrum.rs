use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::constants::{HBAR, K_B};
use crate::error::{ensure_finite, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsdConvention {
    /// `∫_{−∞}^{∞} S df = variance`, stored for `f ≥ 0`.
    DoubleSided,
    /// `∫_0^{∞} S df = variance`.
    SingleSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsdUnits {
    /// m²/Hz
    Displacement,
    /// V²/Hz, detector output before calibration.
    Volts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsdEstimate {
    /// Hz, ascending, starting at 0.
    pub frequencies: Vec<f64>,
    pub values: Vec<f64>,
    pub convention: PsdConvention,
    pub units: PsdUnits,
    pub segments: usize,
    pub segment_length: usize,
    pub sample_rate: f64,
}

impl PsdEstimate {
    pub fn validate(&self) -> Result<()> {
        if self.frequencies.is_empty() {
            return Err(Error::Empty("PSD"));
        }
        if self.frequencies.len() != self.values.len() {
            return Err(Error::Dimension("PSD frequencies and values differ in length".into()));
        }
        if self.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("psd", "values must be finite and non-negative"));
        }
        if self.frequencies.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("psd", "frequencies must be strictly ascending"));
        }
        Ok(())
    }

    /// Double-sided density over `f ≥ 0`.
    pub fn to_double_sided(&self) -> Self {
        match self.convention {
            PsdConvention::DoubleSided => self.clone(),
            PsdConvention::SingleSided => self.converted(0.5, PsdConvention::DoubleSided),
        }
    }

    pub fn to_single_sided(&self) -> Self {
        match self.convention {
            PsdConvention::SingleSided => self.clone(),
            PsdConvention::DoubleSided => self.converted(2.0, PsdConvention::SingleSided),
        }
    }

    /// DC and Nyquist bins have no mirror image and keep their value.
    fn converted(&self, factor: f64, convention: PsdConvention) -> Self {
        let nyquist = self.sample_rate / 2.0;
        let mut out = self.clone();
        for (f, v) in out.frequencies.iter().zip(out.values.iter_mut()) {
            if *f != 0.0 && *f != nyquist {
                *v *= factor;
            }
        }
        out.convention = convention;
        out
    }

    /// Multiplies by `1/c²`, turning V²/Hz into m²/Hz for a detector with
    /// gain `c` V/m.
    pub fn calibrated(&self, c_vm: f64) -> Result<Self> {
        ensure_finite("C_Vm", c_vm)?;
        if c_vm <= 0.0 {
            return Err(invalid("C_Vm", "must be positive"));
        }
        let mut out = self.clone();
        let s = 1.0 / (c_vm * c_vm);
        out.values.iter_mut().for_each(|v| *v *= s);
        out.units = PsdUnits::Displacement;
        Ok(out)
    }

    /// `∫ w(f) S(f) df` over all frequencies by the trapezoid rule,
    /// counting negative frequencies for a double-sided estimate.
    pub fn integral_weighted(&self, weight: impl Fn(f64) -> f64) -> f64 {
        let single = self.to_single_sided();
        let f = &single.frequencies;
        let v = &single.values;
        let mut acc = 0.0;
        for k in 1..f.len() {
            let df = f[k] - f[k - 1];
            acc += 0.5 * df * (weight(f[k - 1]) * v[k - 1] + weight(f[k]) * v[k]);
        }
        acc
    }

    /// Total variance.
    pub fn variance(&self) -> f64 {
        self.integral_weighted(|_| 1.0)
    }

    /// Restricts to `lo ≤ f ≤ hi`.
    pub fn band(&self, lo: f64, hi: f64) -> Self {
        let mut out = self.clone();
        let (f, v): (Vec<f64>, Vec<f64>) = self
            .frequencies
            .iter()
            .zip(&self.values)
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .map(|(f, v)| (*f, *v))
            .unzip();
        out.frequencies = f;
        out.values = v;
        out
    }
}

/// `S(f) = A / ((Ω² − Ω₀²)² + γ² Ω₀²)` at `Ω = 2πf`, the double-sided
/// density per Hz. For thermal motion `A = 2γ k_B T / m`, times `C_Vm²` for
/// detector volts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorentzian {
    pub amplitude: f64,
    pub omega0: f64,
    pub gamma: f64,
    /// Constant floor (white detection noise).
    pub background: f64,
}

impl Lorentzian {
    pub fn thermal(omega0: f64, gamma: f64, temperature: f64, mass: f64) -> Self {
        Self {
            amplitude: 2.0 * gamma * K_B * temperature / mass,
            omega0,
            gamma,
            background: 0.0,
        }
    }

    pub fn value(&self, f: f64) -> f64 {
        let w = 2.0 * PI * f;
        let d = w * w - self.omega0 * self.omega0;
        self.amplitude / (d * d + self.gamma * self.gamma * self.omega0 * self.omega0) + self.background
    }

    /// `k_B T` implied by the amplitude for a particle of mass `m`.
    pub fn temperature(&self, mass: f64) -> f64 {
        self.amplitude * mass / (2.0 * self.gamma * K_B)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorentzianGuess {
    pub omega0: f64,
    pub gamma: f64,
    /// Taken from the PSD value nearest `omega0` when absent.
    pub amplitude: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Fit band in Hz; defaults to `f₀ ± max(30 γ/2π, 0.1 f₀)`.
    pub band: Option<(f64, f64)>,
    pub fit_background: bool,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            band: None,
            fit_background: false,
            max_iterations: 200,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LorentzianFit {
    pub model: Lorentzian,
    /// 1σ uncertainties of `(amplitude, omega0, gamma, background)`.
    pub sigma: [f64; 4],
    /// Mean squared log residual.
    pub residual: f64,
    pub iterations: usize,
    pub points: usize,
}

/// Log-domain Levenberg–Marquardt fit with uniform weights.
pub fn fit_lorentzian(psd: &PsdEstimate, guess: LorentzianGuess, opts: FitOptions) -> Result<LorentzianFit> {
    psd.validate()?;
    let sd = psd.to_double_sided();
    ensure_finite("omega0 guess", guess.omega0)?;
    ensure_finite("gamma guess", guess.gamma)?;
    if guess.omega0 <= 0.0 || guess.gamma <= 0.0 {
        return Err(invalid("guess", "omega0 and gamma must be positive"));
    }
    let f0 = guess.omega0 / (2.0 * PI);
    let (lo, hi) = opts.band.unwrap_or_else(|| {
        let half = (30.0 * guess.gamma / (2.0 * PI)).max(0.1 * f0);
        ((f0 - half).max(0.0), f0 + half)
    });
    let pts: Vec<(f64, f64)> = sd
        .frequencies
        .iter()
        .zip(&sd.values)
        .filter(|(f, v)| **f >= lo && **f <= hi && **v > 0.0)
        .map(|(f, v)| (*f, libm::log(*v)))
        .collect();
    let np = if opts.fit_background { 4 } else { 3 };
    if pts.len() <= np {
        return Err(Error::Empty("fit band"));
    }

    let amp0 = match guess.amplitude {
        Some(a) => a,
        None => {
            let (_, lv) = pts
                .iter()
                .min_by(|a, b| (a.0 - f0).abs().partial_cmp(&(b.0 - f0).abs()).unwrap())
                .copied()
                .unwrap();
            libm::exp(lv) * guess.gamma * guess.gamma * guess.omega0 * guess.omega0
        }
    };
    let floor0 = pts.iter().map(|p| libm::exp(p.1)).fold(f64::INFINITY, f64::min);
    // θ = (ln A, Ω₀/Ω_g, ln γ, ln B)
    let wg = guess.omega0;
    let mut theta = alloc::vec![libm::log(amp0), 1.0, libm::log(guess.gamma)];
    if opts.fit_background {
        theta.push(libm::log(floor0 * 0.1));
    }

    let eval = |th: &[f64]| -> (DVector<f64>, DMatrix<f64>) {
        let a = libm::exp(th[0]);
        let w0 = th[1] * wg;
        let g = libm::exp(th[2]);
        let b = if np == 4 { libm::exp(th[3]) } else { 0.0 };
        let mut r = DVector::zeros(pts.len());
        let mut j = DMatrix::zeros(pts.len(), np);
        for (k, &(f, lv)) in pts.iter().enumerate() {
            let w = 2.0 * PI * f;
            let d = w * w - w0 * w0;
            let den = d * d + g * g * w0 * w0;
            let lor = a / den;
            let m = lor + b;
            r[k] = lv - libm::log(m);
            // ∂ ln m / ∂θ, with r = data − model the Jacobian of r is −that.
            let frac = lor / m;
            j[(k, 0)] = -frac;
            let dden_dw0 = -4.0 * w0 * d + 2.0 * g * g * w0;
            j[(k, 1)] = frac * dden_dw0 / den * wg;
            j[(k, 2)] = frac * 2.0 * g * g * w0 * w0 / den;
            if np == 4 {
                j[(k, 3)] = -b / m;
            }
        }
        (r, j)
    };

    let (mut r, mut jac) = eval(&theta);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;
    for it in 1..=opts.max_iterations {
        iterations = it;
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut improved = false;
        for _ in 0..30 {
            let mut lhs = jtj.clone();
            for i in 0..np {
                lhs[(i, i)] += lambda * jtj[(i, i)].max(1e-30);
            }
            let Some(step) = lhs.lu().solve(&(-&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            if cand[1] <= 0.0 {
                lambda *= 10.0;
                continue;
            }
            let (rc, jc) = eval(&cand);
            let cc = rc.norm_squared();
            if cc.is_finite() && cc <= cost {
                let rel = (cost - cc) / cost.max(f64::MIN_POSITIVE);
                let step_small = step.amax() < 1e-12;
                theta = cand;
                r = rc;
                jac = jc;
                cost = cc;
                lambda = (lambda / 3.0).max(1e-12);
                improved = true;
                if rel < opts.tolerance || step_small {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step left: at a minimum to working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }
    let n = pts.len();
    let residual = cost / n as f64;
    if !converged || !residual.is_finite() {
        return Err(Error::FitFailed { residual });
    }

    let dof = (n - np).max(1) as f64;
    let s2 = cost / dof;
    let cov = (jac.transpose() * &jac).try_inverse().map(|c| c * s2);
    let a = libm::exp(theta[0]);
    let w0 = theta[1] * wg;
    let g = libm::exp(theta[2]);
    let b = if np == 4 { libm::exp(theta[3]) } else { 0.0 };
    let mut sigma = [0.0; 4];
    if let Some(c) = cov {
        sigma[0] = a * libm::sqrt(c[(0, 0)].max(0.0));
        sigma[1] = wg * libm::sqrt(c[(1, 1)].max(0.0));
        sigma[2] = g * libm::sqrt(c[(2, 2)].max(0.0));
        if np == 4 {
            sigma[3] = b * libm::sqrt(c[(3, 3)].max(0.0));
        }
    }
    Ok(LorentzianFit {
        model: Lorentzian {
            amplitude: a,
            omega0: w0,
            gamma: g,
            background: b,
        },
        sigma,
        residual,
        iterations,
        points: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TemperatureMode {
    /// `m(Ω_i²⟨x²⟩ + ⟨ẋ²⟩)/(2k_B)`.
    #[default]
    Equipartition,
    /// The same energy integral with the zero-point contribution
    /// `ħΩ_i/(2k_B)` subtracted.
    ZeroPointSubtracted,
}

/// Effective temperature from a displacement PSD.
pub fn effective_temperature(psd: &PsdEstimate, omega_i: f64, mass: f64, mode: TemperatureMode) -> Result<f64> {
    if psd.units != PsdUnits::Displacement {
        return Err(Error::UncalibratedPsd);
    }
    psd.validate()?;
    let x2 = psd.variance();
    let v2 = psd.integral_weighted(|f| {
        let w = 2.0 * PI * f;
        w * w
    });
    effective_temperature_from_moments(x2, v2, omega_i, mass, mode)
}

/// Effective temperature from position and velocity variances.
pub fn effective_temperature_from_moments(x2: f64, v2: f64, omega_i: f64, mass: f64, mode: TemperatureMode) -> Result<f64> {
    ensure_finite("<x²>", x2)?;
    ensure_finite("<v²>", v2)?;
    if x2 < 0.0 || v2 < 0.0 {
        return Err(invalid("variance", "must be non-negative"));
    }
    let t = mass * (omega_i * omega_i * x2 + v2) / (2.0 * K_B);
    Ok(match mode {
        TemperatureMode::Equipartition => t,
        TemperatureMode::ZeroPointSubtracted => t - HBAR * omega_i / (2.0 * K_B),
    })
}

/// `n̄ = k_B T / (ħΩ) − 1/2`, floored at zero.
pub fn occupancy(t_eff: f64, omega: f64) -> f64 {
    (K_B * t_eff / (HBAR * omega) - 0.5).max(0.0)
}

/// Inverse of [`occupancy`] for `n̄ ≥ 0`.
pub fn occupancy_temperature(n: f64, omega: f64) -> f64 {
    HBAR * omega * (2.0 * n + 1.0) / (2.0 * K_B)
}

//! Detector and electrode calibration, conversion of physical gains to
//! digital gains, and fixed-point quantization.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::constants::K_B;
use crate::dsp::{fit_lorentzian, FitOptions, Lorentzian, LorentzianFit, LorentzianGuess, PsdEstimate, PsdUnits};
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::linalg::{spectral_radius, Mat};
use crate::model::{ActuatorCalibration, ParticleParams, TrapParams};
use crate::riccati::DiscreteStateSpace;

/// Detector gains `C_Vm^i` (V/m) with 1σ uncertainties.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorCalibration {
    pub c_vm: [f64; 3],
    pub sigma: [f64; 3],
}

impl DetectorCalibration {
    /// (6.87 ± 0.72)×10⁵, (7.08 ± 0.75)×10⁵ and (1.07 ± 0.11)×10⁶ V/m.
    pub fn reference() -> Self {
        Self {
            c_vm: [6.87e5, 7.08e5, 1.07e6],
            sigma: [0.72e5, 0.75e5, 0.11e6],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            ensure_finite("C_Vm", self.c_vm[i])?;
            ensure_finite("C_Vm sigma", self.sigma[i])?;
            if self.c_vm[i] <= 0.0 {
                return Err(Error::MissingCalibration("C_Vm must be positive on every axis"));
            }
            if self.sigma[i] < 0.0 {
                return Err(invalid("C_Vm sigma", "must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Sinusoidal drive `V(t) = V₀ cos(Ω_dr t)` on one electrode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveConfig {
    /// 0 = a, 1 = b, 2 = z.
    pub electrode: usize,
    /// Axis whose response is analysed.
    pub axis: usize,
    pub omega_dr: f64,
    pub amplitude: f64,
    pub duration: f64,
}

impl DriveConfig {
    pub fn validate(&self, trap: &TrapParams) -> Result<()> {
        if self.electrode > 2 || self.axis > 2 {
            return Err(invalid("drive", "electrode and axis must be 0, 1 or 2"));
        }
        ensure_finite("omega_dr", self.omega_dr)?;
        ensure_finite("amplitude", self.amplitude)?;
        ensure_finite("duration", self.duration)?;
        if self.duration <= 0.0 {
            return Err(invalid("duration", "must be positive"));
        }
        if self.omega_dr <= 0.0 || self.omega_dr == trap.omega[self.axis] {
            return Err(invalid("omega_dr", "must be positive and detuned from the resonance"));
        }
        Ok(())
    }
}

/// Axis calibration extracted from a thermal PSD in detector volts.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisCalibration {
    pub c_vm: f64,
    pub c_vm_sigma: f64,
    pub omega: f64,
    pub omega_sigma: f64,
    pub gamma: f64,
    pub gamma_sigma: f64,
    pub fit: LorentzianFit,
    /// Set when the fitted drag disagrees with the expected value by more
    /// than 50 %.
    pub gamma_warning: Option<String>,
}

/// Fits `C_Vm² · 2γ k_B T / (m[(Ω² − Ω_i²)² + γ²Ω_i²])` to a thermal PSD in
/// V²/Hz and extracts `C_Vm` from the amplitude.
pub fn calibrate_detector_psd(
    psd: &PsdEstimate,
    guess: LorentzianGuess,
    temperature: f64,
    particle: &ParticleParams,
    expected_gamma: Option<f64>,
    opts: FitOptions,
) -> Result<AxisCalibration> {
    if psd.units != PsdUnits::Volts {
        return Err(invalid("psd", "detector calibration needs a PSD in V²/Hz"));
    }
    let fit = fit_lorentzian(psd, guess, opts)?;
    let m = fit.model;
    let base = 2.0 * m.gamma * K_B * temperature / particle.mass;
    let c_vm = libm::sqrt(m.amplitude / base);
    let rel_a = fit.sigma[0] / m.amplitude;
    let rel_g = fit.sigma[2] / m.gamma;
    let c_vm_sigma = 0.5 * c_vm * libm::sqrt(rel_a * rel_a + rel_g * rel_g);
    let gamma_warning = expected_gamma.and_then(|g| {
        if g > 0.0 && (m.gamma / g - 1.0).abs() > 0.5 {
            Some(format!("fitted γ = {:.4e} s⁻¹ differs from expected {:.4e} s⁻¹ by more than 50%", m.gamma, g))
        } else {
            None
        }
    });
    Ok(AxisCalibration {
        c_vm,
        c_vm_sigma,
        omega: m.omega0,
        omega_sigma: fit.sigma[1],
        gamma: m.gamma,
        gamma_sigma: fit.sigma[2],
        fit,
        gamma_warning,
    })
}

/// Force amplitude recovered from one driven PSD.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveForce {
    /// N
    pub force: f64,
    pub sigma: f64,
    /// Excess variance in the peak window, m².
    pub peak_variance: f64,
    /// Peak excess over the baseline variance in the same window.
    pub snr: f64,
}

/// Integrates the calibrated, baseline-subtracted PSD over
/// `Ω_dr ± half_width` and converts the line variance `F₀²|χ|²/2` back to a
/// force amplitude through the oscillator susceptibility.
pub fn extract_drive_force(
    psd: &PsdEstimate,
    drive: &DriveConfig,
    baseline: &Lorentzian,
    mass: f64,
    half_width_hz: f64,
) -> Result<DriveForce> {
    if psd.units != PsdUnits::Displacement {
        return Err(Error::UncalibratedPsd);
    }
    psd.validate()?;
    let f_dr = drive.omega_dr / (2.0 * PI);
    let window = psd.band(f_dr - half_width_hz, f_dr + half_width_hz);
    if window.frequencies.len() < 2 {
        return Err(Error::Empty("drive window"));
    }
    let total = window.variance();
    let mut base = window.clone();
    for (f, v) in base.frequencies.iter().zip(base.values.iter_mut()) {
        *v = baseline.value(*f);
    }
    let baseline_var = base.variance();
    let peak = total - baseline_var;
    let w0 = baseline.omega0;
    let wd = drive.omega_dr;
    let d = wd * wd - w0 * w0;
    let inv_chi = mass * libm::sqrt(d * d + baseline.gamma * baseline.gamma * wd * wd);
    let force = inv_chi * libm::sqrt(2.0 * peak.max(0.0));
    // Welch averages of K segments fluctuate by 1/√K.
    let sigma_var = baseline_var / libm::sqrt(psd.segments.max(1) as f64);
    let sigma = if peak > sigma_var {
        force * sigma_var / (2.0 * peak)
    } else {
        inv_chi * libm::sqrt(2.0 * sigma_var)
    };
    let snr = if baseline_var > 0.0 { peak / baseline_var } else { f64::INFINITY };
    Ok(DriveForce {
        force,
        sigma,
        peak_variance: peak,
        snr,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub slope_sigma: f64,
    pub intercept: f64,
    pub intercept_sigma: f64,
}

/// Weighted straight-line fit `F = slope·V + intercept`.
pub fn fit_line(points: &[(f64, f64, f64)]) -> Result<LinearFit> {
    if points.len() < 2 {
        return Err(Error::Empty("linear fit needs two points"));
    }
    let (mut s, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let min_sigma = points
        .iter()
        .map(|p| p.2)
        .filter(|&s| s > 0.0)
        .fold(f64::INFINITY, f64::min);
    for &(x, y, sig) in points {
        let sig = if sig > 0.0 { sig } else if min_sigma.is_finite() { min_sigma } else { 1.0 };
        let w = 1.0 / (sig * sig);
        s += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    let det = s * sxx - sx * sx;
    if !(det > 0.0) {
        return Err(Error::Singular("line fit"));
    }
    let slope = (s * sxy - sx * sy) / det;
    let intercept = (sxx * sy - sx * sxy) / det;
    Ok(LinearFit {
        slope,
        slope_sigma: libm::sqrt(s / det),
        intercept,
        intercept_sigma: libm::sqrt(sxx / det),
    })
}

/// Transduction coefficient from drives at several amplitudes: the slope
/// of `F(V₀)`. Any nonzero amplitude whose peak is buried in the thermal
/// baseline is rejected.
pub fn fit_transduction(forces: &[(DriveConfig, DriveForce)], snr_threshold: f64) -> Result<LinearFit> {
    for (d, f) in forces {
        if d.amplitude != 0.0 && f.snr < snr_threshold {
            return Err(Error::LowSnr {
                snr: f.snr,
                threshold: snr_threshold,
            });
        }
    }
    let pts: Vec<(f64, f64, f64)> = forces.iter().map(|(d, f)| (d.amplitude.abs(), f.force, f.sigma)).collect();
    fit_line(&pts)
}

/// Digital gains as configured in the controller.
///
/// Row `i` is the output channel (a, b, z), column `j` the measured axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DigitalGains {
    pub kp: [[f64; 3]; 3],
    pub kd: [[f64; 3]; 3],
}

impl DigitalGains {
    pub fn zero() -> Self {
        Self {
            kp: [[0.0; 3]; 3],
            kd: [[0.0; 3]; 3],
        }
    }

    pub fn scaled_derivative(&self, factor: f64) -> Self {
        let mut out = *self;
        for row in out.kd.iter_mut() {
            for v in row.iter_mut() {
                *v *= factor;
            }
        }
        out
    }

    /// `(name, value)` for every entry, e.g. `("k_p,xy", 0.80)`.
    pub fn entries(&self) -> Vec<(String, f64)> {
        const AX: [char; 3] = ['x', 'y', 'z'];
        let mut out = Vec::new();
        for (kind, m) in [("p", &self.kp), ("d", &self.kd)] {
            for i in 0..3 {
                for j in 0..3 {
                    out.push((format!("k_{kind},{}{}", AX[i], AX[j]), m[i][j]));
                }
            }
        }
        out
    }
}

/// Output-channel force reference: `C_NV^{xx}` on the transverse channels,
/// the z coefficient when it is calibrated.
fn channel_reference(actuator: &ActuatorCalibration, i: usize) -> f64 {
    match (i, actuator.c_nv_z) {
        (2, Some(c)) => c,
        _ => actuator.reference_coefficient(),
    }
}

/// `k^d_{p,ij} = k_{p,ij}/(A·C_ref,i·C_Vm^j)`,
/// `k^d_{d,ij} = −Ω_j·k_{d,ij}/(A·C_ref,i·C_Vm^j)`, with `K = [K_p  K_d]`.
pub fn digital_gains(
    k: &Mat,
    detector: &DetectorCalibration,
    actuator: &ActuatorCalibration,
    g_amp: f64,
    trap: &TrapParams,
) -> Result<DigitalGains> {
    if k.nrows() != 3 || k.ncols() != 6 {
        return Err(Error::Dimension("gain matrix must be 3×6".into()));
    }
    detector.validate()?;
    ensure_finite("amplifier gain", g_amp)?;
    if g_amp <= 0.0 {
        return Err(invalid("amplifier gain", "must be positive"));
    }
    let mut out = DigitalGains::zero();
    for i in 0..3 {
        let c_ref = channel_reference(actuator, i);
        for j in 0..3 {
            let scale = g_amp * c_ref * detector.c_vm[j];
            out.kp[i][j] = k[(i, j)] / scale;
            out.kd[i][j] = -trap.omega[j] * k[(i, 3 + j)] / scale;
        }
    }
    Ok(out)
}

/// Inverse of [`digital_gains`].
pub fn physical_gains(
    gains: &DigitalGains,
    detector: &DetectorCalibration,
    actuator: &ActuatorCalibration,
    g_amp: f64,
    trap: &TrapParams,
) -> Result<Mat> {
    detector.validate()?;
    let mut k = Mat::zeros(3, 6);
    for i in 0..3 {
        let c_ref = channel_reference(actuator, i);
        for j in 0..3 {
            let scale = g_amp * c_ref * detector.c_vm[j];
            k[(i, j)] = gains.kp[i][j] * scale;
            k[(i, 3 + j)] = -gains.kd[i][j] * scale / trap.omega[j];
        }
    }
    Ok(k)
}

/// Signed two's-complement format; `integer_bits` includes the sign bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointFormat {
    pub integer_bits: u32,
    pub fraction_bits: u32,
}

impl FixedPointFormat {
    pub fn word_bits(&self) -> u32 {
        self.integer_bits + self.fraction_bits
    }

    pub fn lsb(&self) -> f64 {
        libm::exp2(-(self.fraction_bits as f64))
    }

    pub fn max(&self) -> f64 {
        libm::exp2(self.integer_bits as f64 - 1.0) - self.lsb()
    }

    pub fn min(&self) -> f64 {
        -libm::exp2(self.integer_bits as f64 - 1.0)
    }

    /// Format of `word_bits` with the most fraction bits that still holds
    /// `value`.
    pub fn fitting(value: f64, word_bits: u32) -> Result<Self> {
        for integer_bits in 1..=word_bits {
            let f = Self {
                integer_bits,
                fraction_bits: word_bits - integer_bits,
            };
            let q = libm::round(value / f.lsb()) * f.lsb();
            if q <= f.max() && q >= f.min() {
                return Ok(f);
            }
        }
        Err(Error::FixedPointOverflow {
            entry: String::from("value"),
            value,
            max: libm::exp2(word_bits as f64 - 1.0),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedEntry {
    pub name: String,
    pub value: f64,
    pub format: FixedPointFormat,
    pub raw: i64,
    pub quantized: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGains {
    pub gains: DigitalGains,
    pub entries: Vec<QuantizedEntry>,
}

impl QuantizedGains {
    pub fn max_relative_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.value != 0.0)
            .map(|e| (e.error / e.value).abs())
            .fold(0.0, f64::max)
    }
}

fn quantize_entry(name: String, value: f64, format: FixedPointFormat) -> Result<QuantizedEntry> {
    ensure_finite("gain", value)?;
    let lsb = format.lsb();
    let raw = libm::round(value / lsb);
    let quantized = raw * lsb;
    if quantized > format.max() || quantized < format.min() {
        return Err(Error::FixedPointOverflow {
            entry: name,
            value,
            max: format.max(),
        });
    }
    Ok(QuantizedEntry {
        name,
        value,
        format,
        raw: raw as i64,
        quantized,
        error: quantized - value,
    })
}

fn rebuild(gains: &DigitalGains, entries: &[QuantizedEntry]) -> DigitalGains {
    let mut q = *gains;
    for (idx, e) in entries.iter().enumerate() {
        let (kind, rest) = (idx / 9, idx % 9);
        let (i, j) = (rest / 3, rest % 3);
        if kind == 0 {
            q.kp[i][j] = e.quantized;
        } else {
            q.kd[i][j] = e.quantized;
        }
    }
    q
}

/// Round-to-nearest into one shared format.
pub fn to_fixed_point(gains: &DigitalGains, integer_bits: u32, fraction_bits: u32) -> Result<QuantizedGains> {
    let format = FixedPointFormat {
        integer_bits,
        fraction_bits,
    };
    if integer_bits == 0 || format.word_bits() > 62 {
        return Err(invalid("format", "need 1 ≤ integer bits and at most 62 bits in total"));
    }
    let entries = gains
        .entries()
        .into_iter()
        .map(|(n, v)| quantize_entry(n, v, format))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedGains {
        gains: rebuild(gains, &entries),
        entries,
    })
}

/// Round-to-nearest with the binary point chosen per entry inside a
/// `word_bits` signed word.
pub fn to_fixed_point_per_entry(gains: &DigitalGains, word_bits: u32) -> Result<QuantizedGains> {
    if !(2..=62).contains(&word_bits) {
        return Err(invalid("word_bits", "must lie in 2..=62"));
    }
    let entries = gains
        .entries()
        .into_iter()
        .map(|(n, v)| {
            let f = FixedPointFormat::fitting(v, word_bits).map_err(|_| Error::FixedPointOverflow {
                entry: n.clone(),
                value: v,
                max: libm::exp2(word_bits as f64 - 1.0),
            })?;
            quantize_entry(n, v, f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedGains {
        gains: rebuild(gains, &entries),
        entries,
    })
}

/// Spectral radius of `A_d − B_d K` for a physical gain, e.g. one rebuilt
/// from quantized digital gains with [`physical_gains`].
pub fn closed_loop_spectral_radius(dss: &DiscreteStateSpace, k: &Mat) -> f64 {
    spectral_radius(&(&dss.a - &dss.b * k))
}

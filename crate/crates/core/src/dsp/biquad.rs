use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::Complex;

use crate::error::{ensure_finite, invalid, Error, Result};

/// Second-order section `H(z) = (b0 + b1 z⁻¹ + b2 z⁻²)/(1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiquadCoeffs {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
    /// Sample rate, Hz.
    pub fs: f64,
}

impl BiquadCoeffs {
    pub fn identity(fs: f64) -> Self {
        Self {
            b0: 1.0,
            b1: 0.0,
            b2: 0.0,
            a1: 0.0,
            a2: 0.0,
            fs,
        }
    }

    /// `H(e^{j2πf/fs})`.
    pub fn response(&self, f: f64) -> Complex<f64> {
        let w = 2.0 * PI * f / self.fs;
        let z1 = Complex::new(libm::cos(w), -libm::sin(w));
        let z2 = z1 * z1;
        let num = Complex::new(self.b0, 0.0) + z1 * self.b1 + z2 * self.b2;
        let den = Complex::new(1.0, 0.0) + z1 * self.a1 + z2 * self.a2;
        num / den
    }

    pub fn magnitude(&self, f: f64) -> f64 {
        let h = self.response(f);
        libm::hypot(h.re, h.im)
    }

    pub fn magnitude_db(&self, f: f64) -> f64 {
        20.0 * libm::log10(self.magnitude(f))
    }

    pub fn phase(&self, f: f64) -> f64 {
        let h = self.response(f);
        libm::atan2(h.im, h.re)
    }

    /// Pole radii of `1 + a1 z⁻¹ + a2 z⁻²`.
    pub fn pole_radius(&self) -> f64 {
        let disc = self.a1 * self.a1 - 4.0 * self.a2;
        if disc >= 0.0 {
            let s = libm::sqrt(disc);
            ((-self.a1 + s) / 2.0).abs().max(((-self.a1 - s) / 2.0).abs())
        } else {
            libm::sqrt(self.a2)
        }
    }

    pub fn is_stable(&self) -> bool {
        self.pole_radius() < 1.0
    }
}

fn check_frequency(name: &'static str, f: f64, fs: f64) -> Result<()> {
    ensure_finite(name, f)?;
    ensure_finite("f_s", fs)?;
    if fs <= 0.0 {
        return Err(invalid("f_s", "must be positive"));
    }
    if f <= 0.0 {
        return Err(invalid(name, "must be positive"));
    }
    if f >= fs / 2.0 {
        return Err(Error::AboveNyquist {
            frequency: f,
            nyquist: fs / 2.0,
        });
    }
    Ok(())
}

/// Bilinear-transform notch (audio cookbook form) with a zero pair exactly
/// on the unit circle at `f0`.
pub fn design_notch(f0: f64, quality: f64, fs: f64) -> Result<BiquadCoeffs> {
    check_frequency("f0", f0, fs)?;
    ensure_finite("quality", quality)?;
    if quality <= 0.0 {
        return Err(invalid("quality", "must be positive"));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let (sn, cs) = libm::sincos(w0);
    let alpha = sn / (2.0 * quality);
    let a0 = 1.0 + alpha;
    Ok(BiquadCoeffs {
        b0: 1.0 / a0,
        b1: -2.0 * cs / a0,
        b2: 1.0 / a0,
        a1: -2.0 * cs / a0,
        a2: (1.0 - alpha) / a0,
        fs,
    })
}

/// First-order DC block `((1 + a)/2)(1 − z⁻¹)/(1 − a z⁻¹)` with
/// `a = exp(−2π f_c / f_s)`; unity gain at Nyquist.
pub fn design_dc_block(fc: f64, fs: f64) -> Result<BiquadCoeffs> {
    check_frequency("f_c", fc, fs)?;
    let a = libm::exp(-2.0 * PI * fc / fs);
    let g = (1.0 + a) / 2.0;
    Ok(BiquadCoeffs {
        b0: g,
        b1: -g,
        b2: 0.0,
        a1: -a,
        a2: 0.0,
        fs,
    })
}

/// Direct-form II transposed section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub coeffs: BiquadCoeffs,
    s1: f64,
    s2: f64,
}

impl Biquad {
    pub fn new(coeffs: BiquadCoeffs) -> Self {
        Self { coeffs, s1: 0.0, s2: 0.0 }
    }

    #[inline]
    pub fn step(&mut self, x: f64) -> f64 {
        let c = &self.coeffs;
        let y = c.b0 * x + self.s1;
        self.s1 = c.b1 * x - c.a1 * y + self.s2;
        self.s2 = c.b2 * x - c.a2 * y;
        y
    }

    pub fn reset(&mut self) {
        self.s1 = 0.0;
        self.s2 = 0.0;
    }
}

/// Filters a whole sequence from a zero initial state.
pub fn biquad_process(coeffs: &BiquadCoeffs, input: &[f64]) -> Vec<f64> {
    let mut f = Biquad::new(*coeffs);
    input.iter().map(|&x| f.step(x)).collect()
}

/// Cascade of sections applied in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
}

impl BiquadCascade {
    pub fn new(coeffs: &[BiquadCoeffs]) -> Self {
        Self {
            sections: coeffs.iter().map(|&c| Biquad::new(c)).collect(),
        }
    }

    #[inline]
    pub fn step(&mut self, x: f64) -> f64 {
        self.sections.iter_mut().fold(x, |acc, s| s.step(acc))
    }

    pub fn response(&self, f: f64) -> Complex<f64> {
        self.sections
            .iter()
            .fold(Complex::new(1.0, 0.0), |acc, s| acc * s.coeffs.response(f))
    }
}

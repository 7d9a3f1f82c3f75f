//! Welch power spectral density estimation.

use std::f64::consts::PI;
use std::sync::Arc;

use levcool_core::dsp::{PsdConvention, PsdEstimate, PsdUnits};
use levcool_core::Error;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            // Periodic Hann, which tiles exactly at 50 % overlap.
            Window::Hann => (0..n).map(|k| 0.5 - 0.5 * (2.0 * PI * k as f64 / n as f64).cos()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchConfig {
    /// Samples per segment; 0 uses the whole record as one segment.
    pub segment_length: usize,
    /// Fraction of a segment shared with the next one, in `[0, 1)`.
    pub overlap: f64,
    pub window: Window,
    /// Subtract each segment's mean before windowing.
    pub detrend: bool,
}

impl Default for WelchConfig {
    fn default() -> Self {
        Self {
            segment_length: 16384,
            overlap: 0.5,
            window: Window::Hann,
            detrend: true,
        }
    }
}

impl WelchConfig {
    pub fn whole_record(window: Window) -> Self {
        Self {
            segment_length: 0,
            overlap: 0.0,
            window,
            detrend: true,
        }
    }
}

/// Running sum of segment periodograms. Every record added must have the
/// same sample rate; results are returned in the double-sided convention
/// on `f ≥ 0`.
pub struct WelchAccumulator {
    config: WelchConfig,
    sample_rate: f64,
    units: PsdUnits,
    length: usize,
    window: Vec<f64>,
    norm: f64,
    fft: Option<Arc<dyn Fft<f64>>>,
    sum: Vec<f64>,
    segments: usize,
}

impl WelchAccumulator {
    pub fn new(config: WelchConfig, sample_rate: f64, units: PsdUnits) -> Result<Self, Error> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(invalid("sample_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&config.overlap) {
            return Err(invalid("overlap", "must lie in [0, 1)"));
        }
        Ok(Self {
            config,
            sample_rate,
            units,
            length: 0,
            window: Vec::new(),
            norm: 0.0,
            fft: None,
            sum: Vec::new(),
            segments: 0,
        })
    }

    fn prepare(&mut self, n: usize) -> Result<(), Error> {
        if self.length == 0 {
            let len = if self.config.segment_length == 0 { n } else { self.config.segment_length };
            if len < 8 {
                return Err(invalid("segment_length", "need at least 8 samples per segment"));
            }
            self.length = len;
            self.window = self.config.window.coefficients(len);
            self.norm = self.window.iter().map(|w| w * w).sum::<f64>() * self.sample_rate;
            self.fft = Some(FftPlanner::new().plan_fft_forward(len));
            self.sum = vec![0.0; len / 2 + 1];
        }
        if n < self.length {
            return Err(invalid("record", "shorter than one segment"));
        }
        Ok(())
    }

    /// Adds every full segment of `samples`.
    pub fn add(&mut self, samples: &[f64]) -> Result<(), Error> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("record"));
        }
        self.prepare(samples.len())?;
        let len = self.length;
        let hop = ((len as f64) * (1.0 - self.config.overlap)).round().max(1.0) as usize;
        let fft = self.fft.clone().expect("prepared");
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
        let mut start = 0;
        while start + len <= samples.len() {
            let seg = &samples[start..start + len];
            let mean = if self.config.detrend { seg.iter().sum::<f64>() / len as f64 } else { 0.0 };
            for ((b, &x), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex::new((x - mean) * w, 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for (s, b) in self.sum.iter_mut().zip(&buf) {
                *s += b.norm_sqr() / self.norm;
            }
            self.segments += 1;
            start += hop;
        }
        Ok(())
    }

    /// Adds another accumulator's segments. Both must share configuration
    /// and segment length.
    pub fn merge(&mut self, other: &WelchAccumulator) -> Result<(), Error> {
        if other.segments == 0 {
            return Ok(());
        }
        if self.segments == 0 && self.length == 0 {
            self.prepare(other.length)?;
        }
        if self.length != other.length || self.sample_rate != other.sample_rate || self.units != other.units {
            return Err(Error::Dimension("Welch accumulators differ in layout".into()));
        }
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        self.segments += other.segments;
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn finish(&self) -> Result<PsdEstimate, Error> {
        if self.segments == 0 {
            return Err(Error::Empty("Welch estimate has no segments"));
        }
        let k = self.segments as f64;
        let df = self.sample_rate / self.length as f64;
        Ok(PsdEstimate {
            frequencies: (0..self.sum.len()).map(|i| i as f64 * df).collect(),
            values: self.sum.iter().map(|s| s / k).collect(),
            convention: PsdConvention::DoubleSided,
            units: self.units,
            segments: self.segments,
            segment_length: self.length,
            sample_rate: self.sample_rate,
        })
    }
}

pub fn welch_psd(samples: &[f64], sample_rate: f64, config: WelchConfig, units: PsdUnits) -> Result<PsdEstimate, Error> {
    let mut acc = WelchAccumulator::new(config, sample_rate, units)?;
    acc.add(samples)?;
    acc.finish()
}

/// Welch average over many records, computed in parallel and summed in
/// record order so the result does not depend on the thread count.
pub fn welch_average(records: &[&[f64]], sample_rate: f64, config: WelchConfig, units: PsdUnits) -> Result<PsdEstimate, Error> {
    let parts: Vec<WelchAccumulator> = records
        .par_iter()
        .map(|r| {
            let mut acc = WelchAccumulator::new(config, sample_rate, units)?;
            acc.add(r)?;
            Ok(acc)
        })
        .collect::<Result<_, Error>>()?;
    let mut total = WelchAccumulator::new(config, sample_rate, units)?;
    for p in &parts {
        total.merge(p)?;
    }
    total.finish()
}

fn invalid(name: &'static str, reason: &str) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parseval_white_noise() {
        let mut state = 1u64;
        let x: Vec<f64> = (0..1 << 16)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let psd = welch_psd(&x, 1e6, WelchConfig { segment_length: 1024, ..Default::default() }, PsdUnits::Volts).unwrap();
        assert!((psd.variance() / var - 1.0).abs() < 0.02);
        assert!((psd.values[100] / (var / 1e6) - 1.0).abs() < 0.3);
    }

    #[test]
    fn sinusoid_power_in_peak() {
        let fs = 1e5;
        let x: Vec<f64> = (0..8192).map(|k| 2.0 * (2.0 * PI * 1234.5 * k as f64 / fs).cos()).collect();
        let psd = welch_psd(&x, fs, WelchConfig::whole_record(Window::Hann), PsdUnits::Volts).unwrap();
        let peak = psd.band(1100.0, 1370.0).variance();
        assert!((peak - 2.0).abs() < 1e-3, "{peak}");
    }

    #[test]
    fn merge_matches_single_pass() {
        let x: Vec<f64> = (0..4096).map(|k| (k as f64 * 0.37).sin()).collect();
        let cfg = WelchConfig { segment_length: 256, overlap: 0.0, ..Default::default() };
        let whole = welch_psd(&x, 1.0, cfg, PsdUnits::Volts).unwrap();
        let mut a = WelchAccumulator::new(cfg, 1.0, PsdUnits::Volts).unwrap();
        a.add(&x[..2048]).unwrap();
        let mut b = WelchAccumulator::new(cfg, 1.0, PsdUnits::Volts).unwrap();
        b.add(&x[2048..]).unwrap();
        a.merge(&b).unwrap();
        let merged = a.finish().unwrap();
        for (u, v) in whole.values.iter().zip(&merged.values) {
            assert!((u - v).abs() <= 1e-12 * u.abs().max(1e-30));
        }
    }
}

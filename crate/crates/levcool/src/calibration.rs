//! Detector and electrode calibration from time traces.

use std::f64::consts::PI;

use levcool_core::calib::{
    calibrate_detector_psd, extract_drive_force, fit_transduction, AxisCalibration, DetectorCalibration, DriveConfig, DriveForce,
    LinearFit,
};
use levcool_core::dsp::{fit_lorentzian, FitOptions, Lorentzian, LorentzianGuess, PsdEstimate, PsdUnits};
use levcool_core::model::{drag_coefficient, GasEnvironment, ParticleParams, PhysicalSystem, TrapParams};
use levcool_core::sim::{simulate_free_trace, Drive, SimConfig, Trace};
use levcool_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::spectral::{WelchAccumulator, WelchConfig, Window};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorOptions {
    pub welch: WelchConfig,
    pub fit: FitOptions,
}

impl Default for DetectorOptions {
    fn default() -> Self {
        Self {
            welch: WelchConfig::default(),
            fit: FitOptions {
                fit_background: true,
                ..FitOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorReport {
    pub calibration: DetectorCalibration,
    pub axes: [AxisCalibration; 3],
    pub traces: usize,
    pub warnings: Vec<String>,
}

/// Averages the detector-channel PSDs of `traces` and fits each axis.
pub fn calibrate_detector(
    traces: &[Trace],
    env: &GasEnvironment,
    particle: &ParticleParams,
    trap_guess: &TrapParams,
    opts: &DetectorOptions,
) -> Result<DetectorReport> {
    let first = traces.first().ok_or(Error::Empty("detector traces"))?;
    let fs = first.sample_rate;
    let psds = detector_psds(traces, fs, opts.welch)?;
    calibrate_detector_from_psds(&psds, traces.len(), env, particle, trap_guess, opts)
}

/// Simulates thermal traces with `config` and calibrates from them, one
/// trace in memory per worker.
pub fn calibrate_detector_synthetic(system: &PhysicalSystem, config: &SimConfig, opts: &DetectorOptions) -> Result<DetectorReport> {
    let psds = synthetic_psds(system, config, None, opts.welch, |t| &t.detector, PsdUnits::Volts)?;
    calibrate_detector_from_psds(&psds, config.n_traces, &system.env, &system.particle, &system.trap, opts)
}

pub fn calibrate_detector_from_psds(
    psds: &[PsdEstimate; 3],
    traces: usize,
    env: &GasEnvironment,
    particle: &ParticleParams,
    trap_guess: &TrapParams,
    opts: &DetectorOptions,
) -> Result<DetectorReport> {
    let gamma = drag_coefficient(env, particle)?;
    let mut warnings = Vec::new();
    if traces < 100 {
        warnings.push(format!("{traces} traces averaged; at least 100 are recommended"));
    }
    let mut axes = Vec::with_capacity(3);
    for (i, psd) in psds.iter().enumerate() {
        let guess = LorentzianGuess {
            omega0: trap_guess.omega[i],
            gamma: gamma.max(1e-6 * trap_guess.omega[i]),
            amplitude: None,
        };
        let a = calibrate_detector_psd(psd, guess, env.temperature, particle, Some(gamma), opts.fit)?;
        if let Some(w) = &a.gamma_warning {
            warnings.push(format!("axis {}: {w}", AXES[i]));
        }
        axes.push(a);
    }
    let axes: [AxisCalibration; 3] = axes.try_into().expect("three axes");
    Ok(DetectorReport {
        calibration: DetectorCalibration {
            c_vm: [0, 1, 2].map(|i| axes[i].c_vm),
            sigma: [0, 1, 2].map(|i| axes[i].c_vm_sigma),
        },
        axes,
        traces,
        warnings,
    })
}

pub(crate) const AXES: [&str; 3] = ["x", "y", "z"];

fn detector_psds(traces: &[Trace], fs: f64, welch: WelchConfig) -> Result<[PsdEstimate; 3]> {
    let parts: Vec<[WelchAccumulator; 3]> = traces
        .par_iter()
        .map(|t| channel_psds(t, fs, welch, |t| &t.detector, PsdUnits::Volts))
        .collect::<Result<_>>()?;
    merge(parts, fs, welch, PsdUnits::Volts)
}

fn channel_psds(
    t: &Trace,
    fs: f64,
    welch: WelchConfig,
    pick: impl Fn(&Trace) -> &[Vec<f64>; 3],
    units: PsdUnits,
) -> Result<[WelchAccumulator; 3]> {
    if t.sample_rate != fs {
        return Err(Error::Dimension("traces differ in sample rate".into()));
    }
    let ch = pick(t);
    let mut out = Vec::with_capacity(3);
    for c in ch {
        let mut acc = WelchAccumulator::new(welch, fs, units)?;
        acc.add(c)?;
        out.push(acc);
    }
    Ok(out.try_into().ok().expect("three channels"))
}

fn merge(parts: Vec<[WelchAccumulator; 3]>, fs: f64, welch: WelchConfig, units: PsdUnits) -> Result<[PsdEstimate; 3]> {
    let mut total = [0, 1, 2].map(|_| WelchAccumulator::new(welch, fs, units));
    let mut out = Vec::with_capacity(3);
    for (i, acc) in total.iter_mut().enumerate() {
        let acc = acc.as_mut().map_err(|e| e.clone())?;
        for p in &parts {
            acc.merge(&p[i])?;
        }
        out.push(acc.finish()?);
    }
    Ok(out.try_into().expect("three channels"))
}

/// Per-axis PSDs of a simulated ensemble (position in m²/Hz or detector in
/// V²/Hz), averaged in trace order.
pub fn synthetic_psds(
    system: &PhysicalSystem,
    config: &SimConfig,
    drive: Option<&Drive>,
    welch: WelchConfig,
    pick: impl Fn(&Trace) -> &[Vec<f64>; 3] + Sync,
    units: PsdUnits,
) -> Result<[PsdEstimate; 3]> {
    if config.record_stride == 0 {
        return Err(Error::InvalidParameter {
            name: "record_stride",
            reason: "spectra need recorded traces".into(),
        });
    }
    let fs = 1.0 / (config.ts * config.record_stride as f64);
    let parts: Vec<[WelchAccumulator; 3]> = (0..config.n_traces as u64)
        .into_par_iter()
        .map(|i| {
            let (t, _) = simulate_free_trace(system, config, i, drive)?;
            channel_psds(&t, fs, welch, &pick, units)
        })
        .collect::<Result<_>>()?;
    merge(parts, fs, welch, units)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElectrodeOptions {
    pub window: Window,
    /// Half width of the integration window in sinc main-lobe widths
    /// (`2/τ_el` each).
    pub main_lobes: f64,
    pub fit: FitOptions,
    pub snr_threshold: f64,
}

impl Default for ElectrodeOptions {
    fn default() -> Self {
        Self {
            window: Window::Hann,
            main_lobes: 3.0,
            fit: FitOptions {
                fit_background: true,
                ..FitOptions::default()
            },
            snr_threshold: 3.0,
        }
    }
}

/// Drive force from the detector channel of driven traces.
///
/// Each trace is one full-length periodogram. The thermal baseline is the
/// Lorentzian fitted with the drive window masked out.
pub fn calibrate_electrode(
    traces: &[Trace],
    drive: &DriveConfig,
    detector: &DetectorCalibration,
    system: &PhysicalSystem,
    opts: &ElectrodeOptions,
) -> Result<DriveForce> {
    drive.validate(&system.trap)?;
    detector.validate()?;
    let first = traces.first().ok_or(Error::Empty("driven traces"))?;
    let fs = first.sample_rate;
    let welch = WelchConfig::whole_record(opts.window);
    let mut acc = WelchAccumulator::new(welch, fs, PsdUnits::Volts)?;
    for t in traces {
        if t.sample_rate != fs {
            return Err(Error::Dimension("traces differ in sample rate".into()));
        }
        acc.add(&t.detector[drive.axis])?;
    }
    let psd = acc.finish()?;
    drive_force_from_psd(&psd, drive, detector, system, opts)
}

pub fn drive_force_from_psd(
    psd: &PsdEstimate,
    drive: &DriveConfig,
    detector: &DetectorCalibration,
    system: &PhysicalSystem,
    opts: &ElectrodeOptions,
) -> Result<DriveForce> {
    let psd = match psd.units {
        PsdUnits::Volts => psd.calibrated(detector.c_vm[drive.axis])?,
        PsdUnits::Displacement => psd.clone(),
    };
    let record = psd.segment_length as f64 / psd.sample_rate;
    let half = opts.main_lobes * 2.0 / record;
    let f_dr = drive.omega_dr / (2.0 * PI);
    let masked = mask_band(&psd, f_dr - half, f_dr + half);
    let gamma = system.gamma()?;
    let w0 = system.trap.omega[drive.axis];
    let fit = fit_lorentzian(
        &masked,
        LorentzianGuess {
            omega0: w0,
            gamma: gamma.max(1.0),
            amplitude: None,
        },
        opts.fit,
    )?;
    let baseline: Lorentzian = fit.model;
    extract_drive_force(&psd, drive, &baseline, system.particle.mass, half)
}

fn mask_band(psd: &PsdEstimate, lo: f64, hi: f64) -> PsdEstimate {
    let mut out = psd.clone();
    let (f, v): (Vec<f64>, Vec<f64>) = psd
        .frequencies
        .iter()
        .zip(&psd.values)
        .filter(|(f, _)| **f < lo || **f > hi)
        .map(|(f, v)| (*f, *v))
        .unzip();
    out.frequencies = f;
    out.values = v;
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeReport {
    pub electrode: usize,
    pub axis: usize,
    /// `|F| = C_NV·V₀`; the slope is the transduction coefficient in N/V.
    pub fit: LinearFit,
    pub forces: Vec<(DriveConfig, DriveForce)>,
}

impl ElectrodeReport {
    pub fn coefficient(&self) -> f64 {
        self.fit.slope
    }
}

/// Synthesizes driven traces at each amplitude (true detector gains from
/// `config.detector`), extracts the force with the `detector` calibration
/// supplied, and fits the linear relation.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_electrode_synthetic(
    system: &PhysicalSystem,
    config: &SimConfig,
    electrode: usize,
    axis: usize,
    omega_dr: f64,
    amplitudes: &[f64],
    detector: &DetectorCalibration,
    opts: &ElectrodeOptions,
) -> Result<ElectrodeReport> {
    if amplitudes.len() < 2 {
        return Err(Error::Empty("electrode calibration needs two amplitudes"));
    }
    if config.record_stride == 0 {
        return Err(Error::InvalidParameter {
            name: "record_stride",
            reason: "spectra need recorded traces".into(),
        });
    }
    let fs = 1.0 / (config.ts * config.record_stride as f64);
    let n = config.n_traces as u64;
    let jobs: Vec<(usize, u64)> = (0..amplitudes.len()).flat_map(|a| (0..n).map(move |r| (a, r))).collect();
    let welch = WelchConfig::whole_record(opts.window);
    let parts: Vec<WelchAccumulator> = jobs
        .par_iter()
        .map(|&(a, r)| {
            let d = Drive {
                electrode,
                amplitude: amplitudes[a],
                omega: omega_dr,
                phase: 0.0,
            };
            let (t, _) = simulate_free_trace(system, config, a as u64 * n + r, Some(&d))?;
            let mut acc = WelchAccumulator::new(welch, fs, PsdUnits::Volts)?;
            acc.add(&t.detector[axis])?;
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut forces = Vec::with_capacity(amplitudes.len());
    for (a, chunk) in parts.chunks(n as usize).enumerate() {
        let mut acc = WelchAccumulator::new(welch, fs, PsdUnits::Volts)?;
        for p in chunk {
            acc.merge(p)?;
        }
        let psd = acc.finish()?;
        let drive = DriveConfig {
            electrode,
            axis,
            omega_dr,
            amplitude: amplitudes[a],
            duration: config.trace_length,
        };
        let f = drive_force_from_psd(&psd, &drive, detector, system, opts)?;
        forces.push((drive, f));
    }
    let fit = fit_transduction(&forces, opts.snr_threshold)?;
    Ok(ElectrodeReport {
        electrode,
        axis,
        fit,
        forces,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AxisCalibrationRecord {
    pub axis: &'static str,
    pub c_vm: f64,
    pub c_vm_sigma: f64,
    pub omega: f64,
    pub omega_sigma: f64,
    pub gamma: f64,
    pub gamma_sigma: f64,
    pub fit_residual: f64,
    pub fit_iterations: usize,
    pub fit_points: usize,
    pub warning: Option<String>,
}

impl DetectorReport {
    pub fn records(&self) -> Vec<AxisCalibrationRecord> {
        self.axes
            .iter()
            .enumerate()
            .map(|(i, a)| AxisCalibrationRecord {
                axis: AXES[i],
                c_vm: a.c_vm,
                c_vm_sigma: a.c_vm_sigma,
                omega: a.omega,
                omega_sigma: a.omega_sigma,
                gamma: a.gamma,
                gamma_sigma: a.gamma_sigma,
                fit_residual: a.fit.residual,
                fit_iterations: a.fit.iterations,
                fit_points: a.fit.points,
                warning: a.gamma_warning.clone(),
            })
            .collect()
    }
}

use alloc::vec::Vec;

use nalgebra::Complex;

use super::chain::ChainTiming;
use super::plant::{normal, AxisPropagator};
use super::{rng_for, run_closed_loop_trace, FeedbackChainConfig, SimConfig};
use crate::dsp::{effective_temperature_from_moments, BiquadCascade, DelayLine, TemperatureMode};
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::model::PhysicalSystem;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxisStat {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl AxisStat {
    pub fn from_samples(samples: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = samples.collect();
        let n = v.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            libm::sqrt(var / n as f64)
        } else {
            f64::NAN
        };
        Self { mean, stderr, n }
    }

    /// Sample standard deviation.
    pub fn std(&self) -> f64 {
        self.stderr * libm::sqrt(self.n as f64)
    }
}

fn check_monotone(grid: &[f64], name: &'static str) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Empty(name));
    }
    for &g in grid {
        ensure_finite(name, g)?;
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid(name, "grid must be strictly increasing"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelaySweepConfig {
    pub axis: usize,
    /// `G_i` in `u = G_i x_i(t − τ_i)`, N/m.
    pub gain: f64,
    /// `φ = Ω_i τ_i`, rad.
    pub phis: Vec<f64>,
    pub repeats: usize,
    /// Averaged span per repeat, s.
    pub length: f64,
    pub warmup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelaySweepResult {
    pub phi: Vec<f64>,
    /// Phase actually realized on the physics grid.
    pub phi_realized: Vec<f64>,
    pub t_eff: Vec<AxisStat>,
    /// `T γ/(γ + γ_fb)`, `γ_fb = G sin φ/(mΩ)`; infinite where the loop
    /// is unstable.
    pub oracle: Vec<f64>,
}

/// Small-gain effective temperature of `u = G x(t − φ/Ω)`.
pub fn delay_oracle(system: &PhysicalSystem, axis: usize, gain: f64, phi: f64) -> Result<f64> {
    let gamma = system.gamma()?;
    let w = system.trap.omega[axis];
    let g_fb = gain * libm::sin(phi) / (system.particle.mass * w);
    let total = gamma + g_fb;
    Ok(if total > 0.0 {
        system.env.temperature * gamma / total
    } else {
        f64::INFINITY
    })
}

/// One repeat at one phase: a single axis driven by its own delayed
/// position, stepped at `dt_physics`. Returns `(T_eff, realized φ)`.
#[allow(clippy::too_many_arguments)]
pub fn delay_sweep_point(
    system: &PhysicalSystem,
    axis: usize,
    gain: f64,
    phi: f64,
    config: &SimConfig,
    length: f64,
    warmup: f64,
    stream: u64,
) -> Result<(f64, f64)> {
    system.validate()?;
    config.validate()?;
    ensure_finite("gain", gain)?;
    if axis > 2 {
        return Err(invalid("axis", "must be 0, 1 or 2"));
    }
    let w = system.trap.omega[axis];
    let min = w * config.electronic_delay;
    if phi < min {
        return Err(Error::PhaseBelowElectronicDelay { phi, min });
    }
    if !(length > 0.0 && warmup >= 0.0) {
        return Err(invalid("length", "must be positive with non-negative warmup"));
    }
    let dt = config.dt_physics;
    let m = system.particle.mass;
    let gamma = system.gamma()?;
    let f = system.force_noise_intensity()?;
    let prop = AxisPropagator::new(w, gamma, f[axis] / (m * m), dt)?;
    // The force held over step k uses x_{k−N}: delay (N + ½)dt.
    let n_delay = libm::round(phi / (w * dt) - 0.5).max(0.0) as usize;
    let realized = w * (n_delay as f64 + 0.5) * dt;

    let mut rng = rng_for(config.seed, stream);
    let v2_0 = f[axis] / (2.0 * gamma.max(f64::MIN_POSITIVE) * m * m);
    let (mut x, mut v) = if gamma > 0.0 {
        (normal(&mut rng) * libm::sqrt(v2_0) / w, normal(&mut rng) * libm::sqrt(v2_0))
    } else {
        (0.0, 0.0)
    };
    let mut line = DelayLine::new(n_delay);
    let g_m = gain / m;
    let warm = libm::round(warmup / dt) as usize;
    let total = warm + libm::round(length / dt) as usize;
    let (mut sx, mut sv) = (0.0, 0.0);
    for k in 0..total {
        let xd = line.push(x);
        let (n0, n1) = (normal(&mut rng), normal(&mut rng));
        let (nx, nv) = prop.step(x, v, g_m * xd, n0, n1);
        x = nx;
        v = nv;
        if k >= warm {
            sx += x * x;
            sv += v * v;
        }
    }
    if !(sx.is_finite() && sv.is_finite()) {
        return Err(Error::Instability {
            time: total as f64 * dt,
            energy_ratio: f64::INFINITY,
        });
    }
    let n = (total - warm) as f64;
    let t = effective_temperature_from_moments(sx / n, sv / n, w, m, TemperatureMode::Equipartition)?;
    Ok((t, realized))
}

/// Sequential sweep; stream `i·repeats + r` seeds repeat `r` of phase `i`.
pub fn run_delay_sweep(system: &PhysicalSystem, sweep: &DelaySweepConfig, config: &SimConfig) -> Result<DelaySweepResult> {
    check_monotone(&sweep.phis, "phi")?;
    if sweep.repeats < 2 {
        return Err(invalid("repeats", "error bars need at least 2 repeats"));
    }
    let w = system.trap.omega[sweep.axis.min(2)];
    let min = w * config.electronic_delay;
    if sweep.phis[0] < min {
        return Err(Error::PhaseBelowElectronicDelay { phi: sweep.phis[0], min });
    }
    let mut out = DelaySweepResult {
        phi: sweep.phis.clone(),
        phi_realized: Vec::new(),
        t_eff: Vec::new(),
        oracle: Vec::new(),
    };
    for (i, &phi) in sweep.phis.iter().enumerate() {
        let mut ts = Vec::with_capacity(sweep.repeats);
        let mut realized = phi;
        for r in 0..sweep.repeats {
            let (t, p) = delay_sweep_point(
                system,
                sweep.axis,
                sweep.gain,
                phi,
                config,
                sweep.length,
                sweep.warmup,
                (i * sweep.repeats + r) as u64,
            )?;
            ts.push(t);
            realized = p;
        }
        out.t_eff.push(AxisStat::from_samples(ts.into_iter()));
        out.oracle.push(delay_oracle(system, sweep.axis, sweep.gain, realized)?);
        out.phi_realized.push(realized);
    }
    Ok(out)
}

/// Linear-response effective temperature of one axis under its diagonal
/// loop, ignoring cross-coupling and measurement noise. With the loop
/// force per unit displacement `H(ω)`, the resonant denominator near `Ω_i`
/// is `(2mΩ_i + Re H'(Ω_i))(Ω_i − ω) + jmΩ_i(γ + γ_fb)` where
/// `γ_fb = −Im H(Ω_i)/(mΩ_i)`, giving
/// `T_eff = T γ / ((γ + γ_fb)(1 + Re H'(Ω_i)/(2mΩ_i)))`.
pub fn cold_damping_oracle(system: &PhysicalSystem, chain: &FeedbackChainConfig, config: &SimConfig, axis: usize) -> Result<f64> {
    if axis > 2 {
        return Err(invalid("axis", "must be 0, 1 or 2"));
    }
    let k = chain
        .routing
        .iter()
        .position(|&r| r == axis)
        .ok_or(invalid("routing", "axis is not routed to any channel"))?;
    let w0 = system.trap.omega[axis];
    let m = system.particle.mass;
    let fpv = system.force_per_volt()?;
    let timing = ChainTiming::new(config);
    let cascade = BiquadCascade::new(&chain.filters[k]);
    let scale = chain.polarity * fpv[(axis, k)] * config.amplifier_gain * config.detector.c_vm[axis];
    let loop_force = |w: f64| {
        let rot = |t: f64| Complex::new(libm::cos(w * t), -libm::sin(w * t));
        let law = Complex::new(chain.gains.kp[k][k], 0.0) + rot(chain.delays[k] as f64 * config.ts) * chain.gains.kd[k][k];
        cascade.response(w / (2.0 * core::f64::consts::PI)) * law * rot(timing.latency) * scale
    };
    let h = loop_force(w0);
    let dw = 1e-4 * w0;
    let dh = (loop_force(w0 + dw) - loop_force(w0 - dw)) / (2.0 * dw);
    let gamma = system.gamma()?;
    let g_fb = -h.im / (m * w0);
    let total = gamma + g_fb;
    let inertia = 1.0 + dh.re / (2.0 * m * w0);
    if !(total > 0.0 && inertia > 0.0) {
        return Err(Error::Instability {
            time: 0.0,
            energy_ratio: f64::INFINITY,
        });
    }
    Ok(system.env.temperature * gamma / (total * inertia))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PressurePoint {
    pub pressure_mbar: f64,
    pub t_eff: [AxisStat; 3],
    pub unstable_runs: usize,
    /// Diagonal-loop oracle per axis, `None` where it does not apply.
    pub oracle: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PressureSweepResult {
    pub points: Vec<PressurePoint>,
}

/// Fixed chain across pressures. Runs that trip the divergence guard are
/// counted in `unstable_runs` and left out of the statistics.
pub fn run_pressure_sweep(
    system: &PhysicalSystem,
    chain: &FeedbackChainConfig,
    pressures_mbar: &[f64],
    config: &SimConfig,
    repeats: usize,
) -> Result<PressureSweepResult> {
    check_monotone(pressures_mbar, "pressure")?;
    if pressures_mbar[0] <= 0.0 {
        return Err(invalid("pressure", "must be positive"));
    }
    if repeats < 2 {
        return Err(invalid("repeats", "error bars need at least 2 repeats"));
    }
    let mut points = Vec::with_capacity(pressures_mbar.len());
    for (i, &p) in pressures_mbar.iter().enumerate() {
        let sys = system.with_pressure(p * crate::constants::MBAR)?;
        let mut temps: [Vec<f64>; 3] = Default::default();
        let mut unstable = 0;
        for r in 0..repeats {
            match run_closed_loop_trace(&sys, chain, config, (i * repeats + r) as u64) {
                Ok((_, s)) => {
                    for (a, t) in temps.iter_mut().enumerate() {
                        t.push(s.temperature(&sys, a)?);
                    }
                }
                Err(Error::Instability { .. }) => unstable += 1,
                Err(e) => return Err(e),
            }
        }
        let oracle = [0, 1, 2].map(|a| cold_damping_oracle(&sys, chain, config, a).ok());
        points.push(PressurePoint {
            pressure_mbar: p,
            t_eff: temps.map(|t| AxisStat::from_samples(t.into_iter())),
            unstable_runs: unstable,
            oracle,
        });
    }
    Ok(PressureSweepResult { points })
}

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{rng_for, ChainTiming, FeedbackChainConfig, MomentAccumulator, SimConfig, Trace, TraceMetadata, TraceSet, TraceSummary};
use crate::constants::K_B;
use crate::error::{ensure_finite, invalid, Result};
use crate::linalg::Mat;
use crate::model::PhysicalSystem;
use crate::riccati::van_loan;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialState {
    /// Stationary distribution of the undriven, unfed-back oscillator.
    Thermal,
    Zero,
    Displaced { position: [f64; 3], velocity: [f64; 3] },
}

/// Sinusoidal electrode drive `V(t) = amplitude·cos(omega·t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drive {
    pub electrode: usize,
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

/// Exact one-step transition of `ẍ + γẋ + Ω²x = a + ξ` over `dt` with the
/// acceleration `a` held constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisPropagator {
    pub phi: [[f64; 2]; 2],
    pub input: [f64; 2],
    /// Lower Cholesky factor of the step covariance.
    pub chol: [[f64; 2]; 2],
    pub covariance: [[f64; 2]; 2],
}

impl AxisPropagator {
    /// `accel_noise` is the white intensity of `ξ` in m²/s³.
    pub fn new(omega: f64, gamma: f64, accel_noise: f64, dt: f64) -> Result<Self> {
        ensure_finite("omega", omega)?;
        ensure_finite("gamma", gamma)?;
        ensure_finite("noise", accel_noise)?;
        ensure_finite("dt", dt)?;
        if omega <= 0.0 || gamma < 0.0 || accel_noise < 0.0 || dt <= 0.0 {
            return Err(invalid("propagator", "needs Ω > 0, γ ≥ 0, noise ≥ 0, dt > 0"));
        }
        let h = gamma / 2.0;
        let d2 = omega * omega - h * h;
        let e = libm::exp(-h * dt);
        // c = cos(ω_d t), s = sin(ω_d t)/ω_d and their hyperbolic versions;
        // one_minus_c is evaluated without cancellation.
        let (c, s, one_minus_c) = if d2 > 0.0 {
            let wd = libm::sqrt(d2);
            let half = libm::sin(wd * dt / 2.0);
            (libm::cos(wd * dt), libm::sin(wd * dt) / wd, 2.0 * half * half)
        } else if d2 < 0.0 {
            let wd = libm::sqrt(-d2);
            let half = libm::sinh(wd * dt / 2.0);
            (libm::cosh(wd * dt), libm::sinh(wd * dt) / wd, -2.0 * half * half)
        } else {
            (1.0, dt, 0.0)
        };
        let phi = [[e * (c + h * s), e * s], [-omega * omega * e * s, e * (c - h * s)]];
        // 1 − φ₀₀ = (1 − e) + e(1 − c) − e h s
        let one_minus_phi00 = -libm::expm1(-h * dt) + e * one_minus_c - e * h * s;
        let input = [one_minus_phi00 / (omega * omega), phi[0][1]];

        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -omega * omega, -gamma]);
        let w = Mat::from_row_slice(2, 2, &[0.0, 0.0, 0.0, accel_noise]);
        let q = van_loan(&a, &w, dt, 1e-16)?;
        let covariance = [[q[(0, 0)], q[(0, 1)]], [q[(1, 0)], q[(1, 1)]]];
        let l00 = libm::sqrt(q[(0, 0)].max(0.0));
        let l10 = if l00 > 0.0 { q[(1, 0)] / l00 } else { 0.0 };
        let l11 = libm::sqrt((q[(1, 1)] - l10 * l10).max(0.0));
        Ok(Self {
            phi,
            input,
            chol: [[l00, 0.0], [l10, l11]],
            covariance,
        })
    }

    /// Mean of the next state.
    #[inline]
    pub fn mean(&self, x: f64, v: f64, accel: f64) -> (f64, f64) {
        let p = &self.phi;
        (
            p[0][0] * x + p[0][1] * v + self.input[0] * accel,
            p[1][0] * x + p[1][1] * v + self.input[1] * accel,
        )
    }

    #[inline]
    pub fn step(&self, x: f64, v: f64, accel: f64, n0: f64, n1: f64) -> (f64, f64) {
        let (mx, mv) = self.mean(x, v, accel);
        let l = &self.chol;
        (mx + l[0][0] * n0, mv + l[1][0] * n0 + l[1][1] * n1)
    }
}

#[inline]
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-axis propagators of the system over `dt`, including backaction when
/// the quantum model is enabled.
pub(crate) fn propagators(system: &PhysicalSystem, dt: f64) -> Result<[AxisPropagator; 3]> {
    let gamma = system.gamma()?;
    let f = system.force_noise_intensity()?;
    let m2 = system.particle.mass * system.particle.mass;
    let mk = |i: usize| AxisPropagator::new(system.trap.omega[i], gamma, f[i] / m2, dt);
    Ok([mk(0)?, mk(1)?, mk(2)?])
}

pub(crate) fn initial_state(system: &PhysicalSystem, init: &InitialState, rng: &mut ChaCha8Rng) -> Result<([f64; 3], [f64; 3])> {
    match init {
        InitialState::Zero => Ok(([0.0; 3], [0.0; 3])),
        InitialState::Displaced { position, velocity } => Ok((*position, *velocity)),
        InitialState::Thermal => {
            let gamma = system.gamma()?;
            let f = system.force_noise_intensity()?;
            let m = system.particle.mass;
            let mut x = [0.0; 3];
            let mut v = [0.0; 3];
            for i in 0..3 {
                let w = system.trap.omega[i];
                // Stationary ⟨v²⟩ = S_F/(2γm²); equipartition when γ = 0.
                let v2 = if gamma > 0.0 {
                    f[i] / (2.0 * gamma * m * m)
                } else {
                    K_B * system.env.temperature / m
                };
                x[i] = normal(rng) * libm::sqrt(v2) / w;
                v[i] = normal(rng) * libm::sqrt(v2);
            }
            Ok((x, v))
        }
    }
}

#[inline]
pub(crate) fn quantize(v: f64, q: Option<(f64, f64)>) -> f64 {
    match q {
        None => v,
        Some((lsb, fs)) => (libm::round(v / lsb) * lsb).clamp(-fs, fs - lsb),
    }
}

/// Run metadata; the delay fields stay zero without a chain.
pub fn trace_metadata(system: &PhysicalSystem, config: &SimConfig, chain: Option<&FeedbackChainConfig>) -> Result<TraceMetadata> {
    let mut meta = TraceMetadata {
        pressure: system.env.pressure,
        gamma: system.gamma()?,
        seed: config.seed,
        ts: config.ts,
        dt_physics: config.dt_physics,
        delays: [0; 3],
        electronic_delay_steps: 0,
        electronic_delay_residual: 0.0,
    };
    if let Some(c) = chain {
        let timing = ChainTiming::new(config);
        meta.delays = c.delays;
        meta.electronic_delay_steps = timing.electronic_steps;
        meta.electronic_delay_residual = timing.residual;
    }
    Ok(meta)
}

/// One free realization, stepped at `T_s`: the transition is exact, so
/// the finer physics step would only add cost. With a drive, the electrode
/// voltage is held over each step.
pub fn simulate_free_trace(
    system: &PhysicalSystem,
    config: &SimConfig,
    index: u64,
    drive: Option<&Drive>,
) -> Result<(Trace, TraceSummary)> {
    system.validate()?;
    config.validate()?;
    let ts = config.ts;
    let props = propagators(system, ts)?;
    let fpv = system.force_per_volt()?;
    let m = system.particle.mass;
    if let Some(d) = drive {
        if d.electrode > 2 {
            return Err(invalid("drive electrode", "must be 0, 1 or 2"));
        }
        ensure_finite("drive amplitude", d.amplitude)?;
        ensure_finite("drive omega", d.omega)?;
        ensure_finite("drive phase", d.phase)?;
    }

    let mut rng = rng_for(config.seed, index);
    let (mut x, mut v) = initial_state(system, &config.initial, &mut rng)?;
    let meas_std: [f64; 3] = system.noise.measurement_sigma.map(|s| s / libm::sqrt(ts));
    let adc = config.quantizer();
    let c_vm = config.detector.c_vm;

    let total = config.controller_steps(config.duration);
    let start = total - config.controller_steps(config.trace_length);
    let mut acc = MomentAccumulator::default();
    let mut trace = Trace {
        sample_rate: if config.record_stride > 0 {
            1.0 / (ts * config.record_stride as f64)
        } else {
            0.0
        },
        ..Trace::default()
    };
    if let Some(q) = (total - start).checked_div(config.record_stride) {
        let n = q + 1;
        for c in trace
            .position
            .iter_mut()
            .chain(trace.velocity.iter_mut())
            .chain(trace.detector.iter_mut())
            .chain(trace.control.iter_mut())
        {
            c.reserve(n);
        }
    }

    for n in 0..total {
        let mut accel = [0.0; 3];
        if let Some(d) = drive {
            let volts = d.amplitude * libm::cos(d.omega * n as f64 * ts + d.phase);
            for i in 0..3 {
                accel[i] = fpv[(i, d.electrode)] * volts / m;
            }
        }
        for i in 0..3 {
            let (n0, n1) = (normal(&mut rng), normal(&mut rng));
            let (nx, nv) = props[i].step(x[i], v[i], accel[i], n0, n1);
            x[i] = nx;
            v[i] = nv;
        }
        let mut det = [0.0; 3];
        for i in 0..3 {
            det[i] = quantize(c_vm[i] * (x[i] + meas_std[i] * normal(&mut rng)), adc);
        }
        if n >= start {
            acc.add(&x, &v);
            if config.record_stride > 0 && (n - start).is_multiple_of(config.record_stride) {
                trace.push(x, v, det, [0.0; 3]);
            }
        }
    }
    Ok((trace, acc.finish()))
}

/// Independent free realizations `0..n_traces`.
pub fn simulate_free(system: &PhysicalSystem, config: &SimConfig) -> Result<TraceSet> {
    let mut traces = Vec::with_capacity(config.n_traces);
    let mut summaries = Vec::with_capacity(config.n_traces);
    for i in 0..config.n_traces {
        let (t, s) = simulate_free_trace(system, config, i as u64, None)?;
        if config.record_stride > 0 {
            traces.push(t);
        }
        summaries.push(s);
    }
    Ok(TraceSet {
        traces,
        summaries,
        metadata: trace_metadata(system, config, None)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::discretize;

    #[test]
    fn matches_matrix_exponential() {
        let sys = PhysicalSystem::reference(1.2);
        let dt = 8e-9;
        let props = propagators(&sys, dt).unwrap();
        let ss = sys.plant_model().unwrap();
        let dss = discretize(&ss, dt, 1e-16).unwrap();
        for i in 0..3 {
            let p = &props[i];
            let idx = [i, 3 + i];
            for r in 0..2 {
                for c in 0..2 {
                    let e = dss.a[(idx[r], idx[c])];
                    assert!((p.phi[r][c] - e).abs() <= 1e-12 * e.abs().max(1e-300), "{r}{c}");
                    let q = dss.process_covariance[(idx[r], idx[c])];
                    assert!((p.covariance[r][c] - q).abs() <= 1e-12 * q.abs());
                }
            }
        }
    }

    #[test]
    fn input_response_is_integral_of_transition() {
        let p = AxisPropagator::new(6e5, 6e3, 0.0, 64e-9).unwrap();
        let fine = AxisPropagator::new(6e5, 6e3, 0.0, 64e-9 / 4096.0).unwrap();
        let (mut x, mut v) = (0.0, 0.0);
        for _ in 0..4096 {
            let s = fine.mean(x, v, 1.0);
            x = s.0;
            v = s.1;
        }
        assert!((x - p.input[0]).abs() < 1e-10 * p.input[0]);
        assert!((v - p.input[1]).abs() < 1e-10 * p.input[1]);
    }

    #[test]
    fn overdamped_and_critical() {
        for gamma in [2.0 * 6e5, 5e6] {
            let p = AxisPropagator::new(6e5, gamma, 0.0, 1e-7).unwrap();
            let fine = AxisPropagator::new(6e5, gamma * (1.0 + 1e-9), 0.0, 1e-7).unwrap();
            assert!((p.phi[0][0] - fine.phi[0][0]).abs() < 1e-6);
        }
    }

    #[test]
    fn conservative_oscillator_keeps_amplitude() {
        let sys = PhysicalSystem::reference(0.0);
        let cfg = SimConfig {
            initial: InitialState::Displaced {
                position: [1e-9, 0.0, 0.0],
                velocity: [0.0; 3],
            },
            record_stride: 1,
            ..SimConfig::default()
        };
        let (tr, _) = simulate_free_trace(&sys, &cfg, 0, None).unwrap();
        let w = sys.trap.omega[0];
        let x = &tr.position[0];
        let v = &tr.velocity[0];
        let a0 = 1e-9;
        let worst = x
            .iter()
            .zip(v)
            .map(|(x, v)| (libm::sqrt(x * x + v * v / (w * w)) / a0 - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn reproducible() {
        let sys = PhysicalSystem::reference(1.2);
        let cfg = SimConfig {
            duration: 1e-4,
            trace_length: 1e-4,
            record_stride: 3,
            seed: 42,
            ..SimConfig::default()
        };
        let a = simulate_free_trace(&sys, &cfg, 5, None).unwrap();
        let b = simulate_free_trace(&sys, &cfg, 5, None).unwrap();
        assert_eq!(a, b);
        let c = simulate_free_trace(&sys, &cfg, 6, None).unwrap();
        assert_ne!(a.0, c.0);
    }
}

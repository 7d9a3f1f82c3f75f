use alloc::vec::Vec;
use core::f64::consts::PI;

use super::plant::{initial_state, normal, propagators, quantize, trace_metadata};
use super::{rng_for, MomentAccumulator, SimConfig, Trace, TraceSet, TraceSummary};
use crate::calib::DigitalGains;
use crate::constants::K_B;
use crate::dsp::{design_dc_block, design_notch, BiquadCascade, BiquadCoeffs, DelayLine};
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::model::PhysicalSystem;

/// Digital loop: per channel filters, BRAM delays and the gain law
/// `u_i = Σ_j k_{p,ij} x̃_{j,n} + k_{d,ij} x̃_{j,n−N_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackChainConfig {
    /// Rows are the output channels (a, b, z), columns the input channels.
    pub gains: DigitalGains,
    /// `N_a, N_b, N_z` in controller samples.
    pub delays: [usize; 3],
    /// Biquads applied in order on each input channel.
    pub filters: [Vec<BiquadCoeffs>; 3],
    /// Input channel `k` reads detector axis `routing[k]`.
    pub routing: [usize; 3],
    /// Sign between the digital output and the realized force.
    pub polarity: f64,
}

/// Corner of the DC block (Hz) and notch quality factors of the
/// standard chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSettings {
    pub dc_block_hz: f64,
    pub notch_q_xy: f64,
    pub notch_q_z: f64,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            dc_block_hz: 1e3,
            notch_q_xy: 5.0,
            notch_q_z: 10.0,
        }
    }
}

/// Realization of the electronic delay at the physics rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainTiming {
    pub electronic_steps: usize,
    /// Position-to-force latency outside the BRAM delays, s.
    pub latency: f64,
    /// Configured minus realized latency, s.
    pub residual: f64,
}

impl ChainTiming {
    /// The boxcar decimator and the output hold already separate the
    /// centres of the input window and of the held force by
    /// `T_s − dt/2`; the buffer supplies the rest of `τ_e`.
    pub fn new(config: &SimConfig) -> Self {
        let dt = config.dt_physics;
        let intrinsic = config.ts - dt / 2.0;
        let steps = libm::round((config.electronic_delay - intrinsic) / dt).max(0.0) as usize;
        let latency = intrinsic + steps as f64 * dt;
        Self {
            electronic_steps: steps,
            latency,
            residual: config.electronic_delay - latency,
        }
    }
}

/// `N = round((π/(2Ω) − τ_e)/T_s)`, the BRAM length that turns the delayed
/// position into a velocity estimate.
pub(crate) fn quarter_period_delay(omega: f64, config: &SimConfig) -> usize {
    libm::round((PI / (2.0 * omega) - config.electronic_delay) / config.ts).max(0.0) as usize
}

impl FeedbackChainConfig {
    /// No filters, no delays, zero gains.
    pub fn zero(config: &SimConfig) -> Self {
        let _ = config;
        Self {
            gains: DigitalGains::zero(),
            delays: [0; 3],
            filters: [Vec::new(), Vec::new(), Vec::new()],
            routing: [0, 1, 2],
            polarity: -1.0,
        }
    }

    /// The hardware chain: 1 kHz DC block on every channel, a Q = 5 notch
    /// at `Ω_z` on a and b, Q = 10 notches at `Ω_x` and `Ω_y` on z, and
    /// quarter-period BRAM delays.
    pub fn standard(system: &PhysicalSystem, gains: DigitalGains, config: &SimConfig) -> Result<Self> {
        Self::standard_with(system, gains, config, &FilterSettings::default())
    }

    pub fn standard_with(system: &PhysicalSystem, gains: DigitalGains, config: &SimConfig, filters: &FilterSettings) -> Result<Self> {
        let fs = 1.0 / config.ts;
        let f = system.trap.omega.map(|w| w / (2.0 * PI));
        let dc = design_dc_block(filters.dc_block_hz, fs)?;
        let xy = alloc::vec![dc, design_notch(f[2], filters.notch_q_xy, fs)?];
        let z = alloc::vec![
            dc,
            design_notch(f[0], filters.notch_q_z, fs)?,
            design_notch(f[1], filters.notch_q_z, fs)?
        ];
        let delays = [0, 1, 2].map(|i| quarter_period_delay(system.trap.omega[i], config));
        let out = Self {
            gains,
            delays,
            filters: [xy.clone(), xy, z],
            routing: [0, 1, 2],
            polarity: -1.0,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for row in self.gains.kp.iter().chain(self.gains.kd.iter()) {
            for &g in row {
                ensure_finite("digital gain", g)?;
            }
        }
        for i in 0..2 {
            for (a, b) in [(i, 2), (2, i)] {
                if self.gains.kp[a][b] != 0.0 || self.gains.kd[a][b] != 0.0 {
                    return Err(invalid("gains", "the xy and z controllers are separate blocks"));
                }
            }
        }
        if self.routing.iter().any(|&r| r > 2) {
            return Err(invalid("routing", "detector axes are 0, 1 and 2"));
        }
        ensure_finite("polarity", self.polarity)?;
        for chan in &self.filters {
            for c in chan {
                if !c.is_stable() {
                    return Err(invalid("filters", "every biquad must be stable"));
                }
            }
        }
        Ok(())
    }

    pub fn with_delays(mut self, delays: [usize; 3]) -> Self {
        self.delays = delays;
        self
    }
}

/// One closed-loop realization.
pub fn run_closed_loop_trace(
    system: &PhysicalSystem,
    chain: &FeedbackChainConfig,
    config: &SimConfig,
    index: u64,
) -> Result<(Trace, TraceSummary)> {
    system.validate()?;
    config.validate()?;
    chain.validate()?;
    let dt = config.dt_physics;
    let dec = config.decimation;
    let props = propagators(system, dt)?;
    let m = system.particle.mass;
    let fpv = system.force_per_volt()? * (chain.polarity / m);
    let timing = ChainTiming::new(config);

    let mut rng = rng_for(config.seed, index);
    let (mut x, mut v) = initial_state(system, &config.initial, &mut rng)?;
    let meas_std: [f64; 3] = system.noise.measurement_sigma.map(|s| s / libm::sqrt(dt));
    let adc = config.quantizer();
    let c_vm = config.detector.c_vm;
    let g_amp = config.amplifier_gain;
    let kp = chain.gains.kp;
    let kd = chain.gains.kd;

    let mut filters: [BiquadCascade; 3] = [0, 1, 2].map(|k| BiquadCascade::new(&chain.filters[k]));
    let mut bram: [DelayLine; 3] = chain.delays.map(DelayLine::new);
    let mut electronic: [DelayLine; 3] = [0; 3].map(|_| DelayLine::new(timing.electronic_steps));
    let mut hold = [0.0f64; 3];

    let energy_unit = K_B * system.env.temperature;
    let omega = system.trap.omega;
    let total = config.controller_steps(config.duration);
    let start = total - config.controller_steps(config.trace_length);
    let mut acc = MomentAccumulator::default();
    let mut trace = Trace {
        sample_rate: if config.record_stride > 0 {
            1.0 / (config.ts * config.record_stride as f64)
        } else {
            0.0
        },
        ..Trace::default()
    };

    for n in 0..total {
        let mut sum = [0.0; 3];
        let mut last_det = [0.0; 3];
        for _ in 0..dec {
            let mut volts = [0.0; 3];
            for i in 0..3 {
                volts[i] = electronic[i].push(hold[i]);
            }
            for i in 0..3 {
                let a = fpv[(i, 0)] * volts[0] + fpv[(i, 1)] * volts[1] + fpv[(i, 2)] * volts[2];
                let (n0, n1) = (normal(&mut rng), normal(&mut rng));
                let (nx, nv) = props[i].step(x[i], v[i], a, n0, n1);
                x[i] = nx;
                v[i] = nv;
            }
            for i in 0..3 {
                let d = quantize(c_vm[i] * (x[i] + meas_std[i] * normal(&mut rng)), adc);
                sum[i] += d;
                last_det[i] = d;
            }
        }
        let mut now = [0.0; 3];
        let mut old = [0.0; 3];
        for k in 0..3 {
            now[k] = filters[k].step(sum[chain.routing[k]] / dec as f64);
            old[k] = bram[k].push(now[k]);
        }
        for i in 0..3 {
            let mut u = 0.0;
            for k in 0..3 {
                u += kp[i][k] * now[k] + kd[i][k] * old[k];
            }
            hold[i] = g_amp * u;
        }

        if energy_unit > 0.0 {
            for i in 0..3 {
                let e = 0.5 * m * (omega[i] * omega[i] * x[i] * x[i] + v[i] * v[i]) / energy_unit;
                if !(e <= config.energy_bound) {
                    return Err(Error::Instability {
                        time: (n + 1) as f64 * config.ts,
                        energy_ratio: e,
                    });
                }
            }
        } else if !x.iter().chain(v.iter()).all(|s| s.is_finite()) {
            return Err(Error::NonFinite("state"));
        }
        if n >= start {
            acc.add(&x, &v);
            if config.record_stride > 0 && (n - start).is_multiple_of(config.record_stride) {
                trace.push(x, v, last_det, hold);
            }
        }
    }
    Ok((trace, acc.finish()))
}

/// Independent closed-loop realizations `0..n_traces`.
pub fn run_closed_loop(system: &PhysicalSystem, chain: &FeedbackChainConfig, config: &SimConfig) -> Result<TraceSet> {
    let mut traces = Vec::new();
    let mut summaries = Vec::with_capacity(config.n_traces);
    for i in 0..config.n_traces {
        let (t, s) = run_closed_loop_trace(system, chain, config, i as u64)?;
        if config.record_stride > 0 {
            traces.push(t);
        }
        summaries.push(s);
    }
    Ok(TraceSet {
        traces,
        summaries,
        metadata: trace_metadata(system, config, Some(chain))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_timing() {
        let t = ChainTiming::new(&SimConfig::default());
        assert!(t.residual.abs() <= 4e-9);
        assert!((t.latency - 0.639e-6).abs() <= 4e-9);
    }

    #[test]
    fn quarter_period_delays() {
        let sys = PhysicalSystem::reference(1e-4);
        let c = SimConfig::default();
        assert_eq!(quarter_period_delay(sys.trap.omega[0], &c), 31);
        assert_eq!(quarter_period_delay(sys.trap.omega[2], &c), 114);
    }

    #[test]
    fn cross_block_gains_rejected() {
        let c = SimConfig::default();
        let mut chain = FeedbackChainConfig::zero(&c);
        chain.gains.kd[0][2] = 1.0;
        assert!(chain.validate().is_err());
    }

    #[test]
    fn runaway_loop_is_flagged() {
        let sys = PhysicalSystem::reference(1e-4);
        let c = SimConfig {
            duration: 2e-3,
            trace_length: 1e-3,
            ..SimConfig::default()
        };
        let mut g = DigitalGains::zero();
        // Anti-damping on x.
        g.kd[0][0] = -2000.0;
        let chain = FeedbackChainConfig::standard(&sys, g, &c).unwrap();
        assert!(matches!(
            run_closed_loop_trace(&sys, &chain, &c, 0),
            Err(Error::Instability { .. })
        ));
    }
}

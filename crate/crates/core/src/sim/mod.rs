//! Stochastic simulation of the levitated particle, free and under the
//! emulated digital feedback chain.

mod chain;
mod plant;
mod quantum;
mod sweep;

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

use crate::calib::DetectorCalibration;
use crate::dsp::{effective_temperature_from_moments, TemperatureMode};
use crate::error::{ensure_finite, invalid, Result};
use crate::model::PhysicalSystem;

pub use chain::{run_closed_loop, run_closed_loop_trace, ChainTiming, FeedbackChainConfig, FilterSettings};
pub use plant::{simulate_free, simulate_free_trace, trace_metadata, AxisPropagator, Drive, InitialState};
pub use quantum::{
    design_quantum, predicted_occupancy, quantum_plant, run_quantum, run_quantum_single, slowest_time_constant, QuantumConfig,
    QuantumDesign,
    QuantumResult,
};
pub use sweep::{
    cold_damping_oracle, delay_oracle, delay_sweep_point, run_delay_sweep, run_pressure_sweep, AxisStat, DelaySweepConfig,
    DelaySweepResult, PressurePoint, PressureSweepResult,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Controller step, s.
    pub ts: f64,
    /// Physics step, s; `ts / dt_physics` must equal `decimation`.
    pub dt_physics: f64,
    /// Simulated time per realization, s. The first
    /// `duration − trace_length` is discarded.
    pub duration: f64,
    pub seed: u64,
    pub trace_length: f64,
    pub n_traces: usize,
    pub electronic_delay: f64,
    pub amplifier_gain: f64,
    pub decimation: usize,
    /// ADC resolution over `±adc_full_scale`; 0 disables quantization.
    pub adc_bits: u32,
    pub adc_full_scale: f64,
    pub detector: DetectorCalibration,
    /// Store every `record_stride`-th controller sample; 0 records nothing.
    pub record_stride: usize,
    /// A loop is declared unstable once any axis energy exceeds this many
    /// `k_B T`.
    pub energy_bound: f64,
    pub initial: InitialState,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            ts: 64e-9,
            dt_physics: 8e-9,
            duration: 50e-3,
            seed: 0,
            trace_length: 50e-3,
            n_traces: 1,
            electronic_delay: 0.639e-6,
            amplifier_gain: 5.0,
            decimation: 8,
            adc_bits: 0,
            adc_full_scale: 1.0,
            detector: DetectorCalibration::reference(),
            record_stride: 0,
            energy_bound: 1e6,
            initial: InitialState::Thermal,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("T_s", self.ts),
            ("dt_physics", self.dt_physics),
            ("duration", self.duration),
            ("trace_length", self.trace_length),
            ("electronic_delay", self.electronic_delay),
            ("amplifier_gain", self.amplifier_gain),
            ("energy_bound", self.energy_bound),
            ("adc_full_scale", self.adc_full_scale),
        ] {
            ensure_finite(name, v)?;
        }
        if self.ts <= 0.0 || self.dt_physics <= 0.0 || self.dt_physics > self.ts {
            return Err(invalid("dt_physics", "must satisfy 0 < dt_physics ≤ T_s"));
        }
        let ratio = self.ts / self.dt_physics;
        if (ratio - libm::round(ratio)).abs() > 1e-9 * ratio {
            return Err(invalid("dt_physics", "T_s / dt_physics must be an integer"));
        }
        if libm::round(ratio) as usize != self.decimation {
            return Err(invalid("decimation", "must equal T_s / dt_physics"));
        }
        if self.trace_length <= 0.0 || self.duration < self.trace_length {
            return Err(invalid("duration", "must be at least trace_length > 0"));
        }
        if self.n_traces == 0 {
            return Err(invalid("n_traces", "must be at least 1"));
        }
        if self.electronic_delay < 0.0 {
            return Err(invalid("electronic_delay", "must be non-negative"));
        }
        if self.amplifier_gain <= 0.0 || self.energy_bound <= 0.0 {
            return Err(invalid("amplifier_gain", "gain and energy bound must be positive"));
        }
        if self.adc_bits > 30 || self.adc_full_scale <= 0.0 {
            return Err(invalid("adc_bits", "at most 30 bits over a positive full scale"));
        }
        self.detector.validate()
    }

    pub fn warmup(&self) -> f64 {
        self.duration - self.trace_length
    }

    pub fn controller_steps(&self, t: f64) -> usize {
        libm::round(t / self.ts) as usize
    }

    pub(crate) fn quantizer(&self) -> Option<(f64, f64)> {
        if self.adc_bits == 0 {
            None
        } else {
            let lsb = 2.0 * self.adc_full_scale / libm::exp2(self.adc_bits as f64);
            Some((lsb, self.adc_full_scale))
        }
    }
}

/// SplitMix64 finalizer used to derive independent stream seeds.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Recorded channels of one realization at `sample_rate`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub sample_rate: f64,
    pub position: [Vec<f64>; 3],
    pub velocity: [Vec<f64>; 3],
    pub detector: [Vec<f64>; 3],
    pub control: [Vec<f64>; 3],
}

impl Trace {
    pub fn len(&self) -> usize {
        self.position[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&mut self, x: [f64; 3], v: [f64; 3], det: [f64; 3], u: [f64; 3]) {
        for i in 0..3 {
            self.position[i].push(x[i]);
            self.velocity[i].push(v[i]);
            self.detector[i].push(det[i]);
            self.control[i].push(u[i]);
        }
    }

    /// Equal channel lengths and finite samples.
    pub fn validate(&self) -> bool {
        let n = self.len();
        let chans = self.position.iter().chain(&self.velocity).chain(&self.detector).chain(&self.control);
        let mut ok = true;
        for c in chans {
            ok &= c.len() == n && c.iter().all(|v| v.is_finite());
        }
        ok
    }
}

/// Time-averaged second moments of the true state over one realization.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TraceSummary {
    pub x2: [f64; 3],
    pub v2: [f64; 3],
    pub samples: usize,
}

impl TraceSummary {
    pub fn temperature(&self, system: &PhysicalSystem, axis: usize) -> Result<f64> {
        effective_temperature_from_moments(
            self.x2[axis],
            self.v2[axis],
            system.trap.omega[axis],
            system.particle.mass,
            TemperatureMode::Equipartition,
        )
    }
}

#[derive(Debug, Default)]
pub(crate) struct MomentAccumulator {
    x2: [f64; 3],
    v2: [f64; 3],
    n: usize,
}

impl MomentAccumulator {
    #[inline]
    pub(crate) fn add(&mut self, x: &[f64; 3], v: &[f64; 3]) {
        for i in 0..3 {
            self.x2[i] += x[i] * x[i];
            self.v2[i] += v[i] * v[i];
        }
        self.n += 1;
    }

    pub(crate) fn finish(&self) -> TraceSummary {
        let n = self.n.max(1) as f64;
        TraceSummary {
            x2: self.x2.map(|s| s / n),
            v2: self.v2.map(|s| s / n),
            samples: self.n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceMetadata {
    /// Pa
    pub pressure: f64,
    pub gamma: f64,
    pub seed: u64,
    pub ts: f64,
    pub dt_physics: f64,
    /// BRAM delays `N_a, N_b, N_z`.
    pub delays: [usize; 3],
    /// Physics-rate steps realizing the electronic delay.
    pub electronic_delay_steps: usize,
    /// Configured minus realized electronic delay, s.
    pub electronic_delay_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub traces: Vec<Trace>,
    pub summaries: Vec<TraceSummary>,
    pub metadata: TraceMetadata,
}

impl TraceSet {
    /// Mean over realizations of the per-trace `⟨x_i²⟩`, with its standard
    /// error.
    pub fn position_variance(&self, axis: usize) -> AxisStat {
        AxisStat::from_samples(self.summaries.iter().map(|s| s.x2[axis]))
    }

    pub fn temperature(&self, system: &PhysicalSystem, axis: usize) -> Result<AxisStat> {
        let t: Vec<f64> = self
            .summaries
            .iter()
            .map(|s| s.temperature(system, axis))
            .collect::<Result<_>>()?;
        Ok(AxisStat::from_samples(t.into_iter()))
    }
}

use alloc::vec::Vec;

use nalgebra::{SMatrix, SVector};

use super::plant::normal;
use super::{rng_for, AxisStat};
use crate::constants::HBAR;
use crate::error::{invalid, Error, Result};
use crate::linalg::{psd_factor, spectral_radius, Mat};
use crate::model::PhysicalSystem;
use crate::riccati::{
    design_controller, discretize_with, kalman_steady_gain, lqg_steady_covariance, ControllerGains, CostWeights,
    DesignOptions, DiscreteStateSpace, DiscretizeOptions, InputHold, KalmanGain, ProcessNoise,
};

type M6 = SMatrix<f64, 6, 6>;
type M63 = SMatrix<f64, 6, 3>;
type M36 = SMatrix<f64, 3, 6>;
type V6 = SVector<f64, 6>;
type V3 = SVector<f64, 3>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantumConfig {
    pub ts: f64,
    pub runs: usize,
    /// Simulated time per run including `warmup`, s.
    pub duration: f64,
    pub warmup: f64,
    pub seed: u64,
}

impl Default for QuantumConfig {
    fn default() -> Self {
        Self {
            ts: 64e-9,
            runs: 30,
            duration: 10e-3,
            warmup: 0.5e-3,
            seed: 0,
        }
    }
}

impl QuantumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ts > 0.0 && self.duration > self.warmup && self.warmup >= 0.0) {
            return Err(invalid("quantum config", "need T_s > 0 and duration > warmup ≥ 0"));
        }
        if self.runs < 2 {
            return Err(invalid("runs", "error bars need at least 2 runs"));
        }
        Ok(())
    }
}

/// Plant with thermal and backaction force noise, discretized with an exact
/// hold, and the measurement covariance `σ²/T_s`.
pub fn quantum_plant(system: &PhysicalSystem, ts: f64) -> Result<(DiscreteStateSpace, Mat)> {
    let ss = system.plant_model()?;
    let dss = discretize_with(
        &ss,
        ts,
        DiscretizeOptions {
            hold: InputHold::Exact,
            noise: ProcessNoise::VanLoan,
            ..DiscretizeOptions::default()
        },
    )?;
    let r = Mat::from_diagonal(&nalgebra::DVector::from_iterator(
        3,
        system.noise.measurement_sigma.iter().map(|s| s * s / ts),
    ));
    Ok((dss, r))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumDesign {
    pub regulator: ControllerGains,
    pub estimator: KalmanGain,
    pub plant: DiscreteStateSpace,
    pub measurement_covariance: Mat,
}

/// Regulator from [`design_controller`] and the steady Kalman filter of
/// the noisy plant at the same `T_s`.
pub fn design_quantum(system: &PhysicalSystem, weights: &CostWeights, opts: &DesignOptions) -> Result<QuantumDesign> {
    check_quantum(system)?;
    let regulator = design_controller(system, weights, opts)?;
    let (plant, r) = quantum_plant(system, opts.ts)?;
    let estimator = kalman_steady_gain(&plant, &r)?;
    Ok(QuantumDesign {
        regulator,
        estimator,
        plant,
        measurement_covariance: r,
    })
}

fn check_quantum(system: &PhysicalSystem) -> Result<()> {
    system.validate()?;
    if system.noise.quantum_enabled {
        system.noise.check_quantum_closure(1e-6)?;
        if system.noise.detection_efficiency.iter().any(|&e| e <= 0.0) {
            return Err(invalid("detection_efficiency", "must be positive on every measured axis"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantumResult {
    /// Monte-Carlo `n̄` per axis over the runs.
    pub occupancy: [AxisStat; 3],
    /// Algebraic steady-state `n̄` of the same loop.
    pub predicted: [f64; 3],
    pub runs: usize,
}

fn occupancy_from(system: &PhysicalSystem, axis: usize, x2: f64, v2: f64) -> f64 {
    let w = system.trap.omega[axis];
    system.particle.mass * (w * w * x2 + v2) / (2.0 * HBAR * w) - 0.5
}

struct Loop {
    a: M6,
    b: M63,
    l: M63,
    k: M36,
    chol: M6,
    meas_std: V3,
}

impl Loop {
    fn new(dss: &DiscreteStateSpace, l: &Mat, k: &Mat, r: &Mat) -> Result<Self> {
        if dss.nx() != 6 || dss.nu() != 3 || l.shape() != (6, 3) || k.shape() != (3, 6) {
            return Err(Error::Dimension("quantum loop needs the 6-state, 3-input model".into()));
        }
        let f = psd_factor(&dss.process_covariance, 1e-14);
        Ok(Self {
            a: M6::from_fn(|i, j| dss.a[(i, j)]),
            b: M63::from_fn(|i, j| dss.b[(i, j)]),
            l: M63::from_fn(|i, j| l[(i, j)]),
            k: M36::from_fn(|i, j| k[(i, j)]),
            chol: M6::from_fn(|i, j| f[(i, j)]),
            meas_std: V3::from_fn(|i, _| libm::sqrt(r[(i, i)].max(0.0))),
        })
    }
}

/// One run; returns the time-averaged `⟨x_i²⟩`, `⟨v_i²⟩` after warmup.
pub fn run_quantum_single(
    system: &PhysicalSystem,
    estimator: &KalmanGain,
    regulator: &ControllerGains,
    config: &QuantumConfig,
    run: u64,
) -> Result<[f64; 3]> {
    check_quantum(system)?;
    config.validate()?;
    let (dss, r) = quantum_plant(system, config.ts)?;
    let lp = Loop::new(&dss, &estimator.l, &regulator.k_d, &r)?;
    Ok(simulate(system, &lp, config, run))
}

fn simulate(system: &PhysicalSystem, lp: &Loop, config: &QuantumConfig, run: u64) -> [f64; 3] {
    let mut rng = rng_for(config.seed, run);
    let mut x = V6::zeros();
    let mut xh = V6::zeros();
    let warm = libm::round(config.warmup / config.ts) as usize;
    let total = libm::round(config.duration / config.ts) as usize;
    let mut s2 = V6::zeros();
    for n in 0..total {
        if n >= warm {
            s2 += x.component_mul(&x);
        }
        let y = V3::from_fn(|i, _| x[i] + lp.meas_std[i] * normal(&mut rng));
        let innov = y - xh.fixed_rows::<3>(0);
        let post = xh + lp.l * innov;
        let u = -(lp.k * post);
        let w = V6::from_fn(|_, _| normal(&mut rng));
        x = lp.a * x + lp.b * u + lp.chol * w;
        xh = lp.a * post + lp.b * u;
    }
    let cnt = (total - warm) as f64;
    [0, 1, 2].map(|i| occupancy_from(system, i, s2[i] / cnt, s2[3 + i] / cnt))
}

/// Kalman–LQG loop `x̂⁺ = x̂⁻ + L(y − Cx̂⁻)`, `u = −K_d x̂⁺` on the noisy
/// plant, `config.runs` independent runs from rest.
pub fn run_quantum(
    system: &PhysicalSystem,
    estimator: &KalmanGain,
    regulator: &ControllerGains,
    config: &QuantumConfig,
) -> Result<QuantumResult> {
    check_quantum(system)?;
    config.validate()?;
    let (dss, r) = quantum_plant(system, config.ts)?;
    let lp = Loop::new(&dss, &estimator.l, &regulator.k_d, &r)?;
    let per_run: Vec<[f64; 3]> = (0..config.runs).map(|i| simulate(system, &lp, config, i as u64)).collect();
    let cov = lqg_steady_covariance(&dss, &regulator.k_d, &estimator.l, &r)?;
    let predicted = [0, 1, 2].map(|i| occupancy_from(system, i, cov[(i, i)], cov[(3 + i, 3 + i)]));
    Ok(QuantumResult {
        occupancy: [0, 1, 2].map(|i| AxisStat::from_samples(per_run.iter().map(|r| r[i]))),
        predicted,
        runs: config.runs,
    })
}

/// Algebraic `n̄` per axis only.
pub fn predicted_occupancy(system: &PhysicalSystem, estimator: &KalmanGain, regulator: &ControllerGains, ts: f64) -> Result<[f64; 3]> {
    let (dss, r) = quantum_plant(system, ts)?;
    let cov = lqg_steady_covariance(&dss, &regulator.k_d, &estimator.l, &r)?;
    Ok([0, 1, 2].map(|i| occupancy_from(system, i, cov[(i, i)], cov[(3 + i, 3 + i)])))
}

/// Slowest closed-loop time constant of the Kalman–LQG loop. By separation
/// the loop modes are those of `A − BK` and `A − LCA`.
pub fn slowest_time_constant(system: &PhysicalSystem, estimator: &KalmanGain, regulator: &ControllerGains, ts: f64) -> Result<f64> {
    let (dss, _) = quantum_plant(system, ts)?;
    let reg = &dss.a - &dss.b * &regulator.k_d;
    let est = &dss.a - &estimator.l * &dss.c * &dss.a;
    let rho = spectral_radius(&reg).max(spectral_radius(&est));
    if !(rho < 1.0) {
        return Err(Error::UnstableAfterMask {
            eigenvalues: alloc::vec![(rho, 0.0)],
        });
    }
    Ok(-ts / libm::log(rho))
}

impl QuantumConfig {
    /// Warmup of `warm` and averaging span of `span` slowest time
    /// constants.
    pub fn sized_for(tau: f64, warm: f64, span: f64, runs: usize, ts: f64, seed: u64) -> Self {
        Self {
            ts,
            runs,
            warmup: warm * tau,
            duration: (warm + span) * tau,
            seed,
        }
    }
}

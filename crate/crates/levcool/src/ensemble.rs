//! Parallel ensembles and sweeps. Work items are indexed and merged in
//! index order, so results are bit-identical to the sequential runners in
//! `levcool_core::sim` for any thread count.

use levcool_core::constants::MBAR;
use levcool_core::model::PhysicalSystem;
use levcool_core::riccati::{ControllerGains, KalmanGain};
use levcool_core::sim::{
    cold_damping_oracle, delay_oracle, delay_sweep_point, predicted_occupancy, run_closed_loop_trace, run_quantum_single,
    simulate_free_trace, trace_metadata, AxisStat, DelaySweepConfig, DelaySweepResult, FeedbackChainConfig, PressurePoint,
    PressureSweepResult, QuantumConfig, QuantumResult, SimConfig, Trace, TraceSet, TraceSummary,
};
use levcool_core::{Error, Result};
use rayon::prelude::*;

/// Runs `f` on a pool of `threads` workers; 0 keeps the global pool.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> std::result::Result<T, rayon::ThreadPoolBuildError> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    Ok(pool.install(f))
}

/// Free realizations `0..n_traces`, each handed to `reduce` as soon as it
/// is simulated so full traces need not be kept.
pub fn map_free<T: Send>(
    system: &PhysicalSystem,
    config: &SimConfig,
    reduce: impl Fn(u64, Trace, TraceSummary) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    (0..config.n_traces as u64)
        .into_par_iter()
        .map(|i| {
            let (t, s) = simulate_free_trace(system, config, i, None)?;
            reduce(i, t, s)
        })
        .collect()
}

pub fn free_ensemble(system: &PhysicalSystem, config: &SimConfig) -> Result<TraceSet> {
    let runs = map_free(system, config, |_, t, s| Ok((t, s)))?;
    Ok(assemble(runs, config, trace_metadata(system, config, None)?))
}

/// Closed-loop ensemble that keeps going past unstable realizations.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopEnsemble {
    /// Stable realizations only.
    pub set: TraceSet,
    /// Index and error of every failed realization.
    pub failures: Vec<(u64, Error)>,
}

pub fn closed_loop_ensemble(system: &PhysicalSystem, chain: &FeedbackChainConfig, config: &SimConfig) -> Result<LoopEnsemble> {
    let meta = trace_metadata(system, config, Some(chain))?;
    let runs: Vec<(u64, Result<(Trace, TraceSummary)>)> = (0..config.n_traces as u64)
        .into_par_iter()
        .map(|i| (i, run_closed_loop_trace(system, chain, config, i)))
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in runs {
        match r {
            Ok(v) => ok.push(v),
            Err(e @ Error::Instability { .. }) => failures.push((i, e)),
            Err(e) => return Err(e),
        }
    }
    Ok(LoopEnsemble {
        set: assemble(ok, config, meta),
        failures,
    })
}

fn assemble(runs: Vec<(Trace, TraceSummary)>, config: &SimConfig, metadata: levcool_core::sim::TraceMetadata) -> TraceSet {
    let mut traces = Vec::new();
    let mut summaries = Vec::with_capacity(runs.len());
    for (t, s) in runs {
        if config.record_stride > 0 {
            traces.push(t);
        }
        summaries.push(s);
    }
    TraceSet {
        traces,
        summaries,
        metadata,
    }
}

/// Parallel counterpart of [`levcool_core::sim::run_delay_sweep`].
pub fn delay_sweep(system: &PhysicalSystem, sweep: &DelaySweepConfig, config: &SimConfig) -> Result<DelaySweepResult> {
    if sweep.repeats < 2 {
        return Err(Error::InvalidParameter {
            name: "repeats",
            reason: "error bars need at least 2 repeats".into(),
        });
    }
    if sweep.phis.is_empty() {
        return Err(Error::Empty("phi grid"));
    }
    let r = sweep.repeats;
    let jobs: Vec<(usize, usize)> = (0..sweep.phis.len()).flat_map(|i| (0..r).map(move |k| (i, k))).collect();
    let out: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(i, k)| {
            delay_sweep_point(
                system,
                sweep.axis,
                sweep.gain,
                sweep.phis[i],
                config,
                sweep.length,
                sweep.warmup,
                (i * r + k) as u64,
            )
        })
        .collect::<Result<_>>()?;
    let mut res = DelaySweepResult {
        phi: sweep.phis.clone(),
        phi_realized: Vec::new(),
        t_eff: Vec::new(),
        oracle: Vec::new(),
    };
    for (i, chunk) in out.chunks(r).enumerate() {
        let realized = chunk[r - 1].1;
        res.t_eff.push(AxisStat::from_samples(chunk.iter().map(|c| c.0)));
        res.oracle.push(delay_oracle(system, sweep.axis, sweep.gain, realized)?);
        res.phi_realized.push(realized);
        debug_assert_eq!(res.phi[i], sweep.phis[i]);
    }
    Ok(res)
}

/// Parallel counterpart of [`levcool_core::sim::run_pressure_sweep`].
pub fn pressure_sweep(
    system: &PhysicalSystem,
    chain: &FeedbackChainConfig,
    pressures_mbar: &[f64],
    config: &SimConfig,
    repeats: usize,
) -> Result<PressureSweepResult> {
    if repeats < 2 {
        return Err(Error::InvalidParameter {
            name: "repeats",
            reason: "error bars need at least 2 repeats".into(),
        });
    }
    if pressures_mbar.is_empty() {
        return Err(Error::Empty("pressure grid"));
    }
    let systems: Vec<PhysicalSystem> = pressures_mbar
        .iter()
        .map(|&p| system.with_pressure(p * MBAR))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..pressures_mbar.len()).flat_map(|i| (0..repeats).map(move |k| (i, k))).collect();
    let runs: Vec<Result<TraceSummary>> = jobs
        .par_iter()
        .map(|&(i, k)| run_closed_loop_trace(&systems[i], chain, config, (i * repeats + k) as u64).map(|(_, s)| s))
        .collect();
    let mut points = Vec::with_capacity(pressures_mbar.len());
    for (i, chunk) in runs.chunks(repeats).enumerate() {
        let sys = &systems[i];
        let mut temps: [Vec<f64>; 3] = Default::default();
        let mut unstable = 0;
        for r in chunk {
            match r {
                Ok(s) => {
                    for (a, t) in temps.iter_mut().enumerate() {
                        t.push(s.temperature(sys, a)?);
                    }
                }
                Err(Error::Instability { .. }) => unstable += 1,
                Err(e) => return Err(e.clone()),
            }
        }
        points.push(PressurePoint {
            pressure_mbar: pressures_mbar[i],
            t_eff: temps.map(|t| AxisStat::from_samples(t.into_iter())),
            unstable_runs: unstable,
            oracle: [0, 1, 2].map(|a| cold_damping_oracle(sys, chain, config, a).ok()),
        });
    }
    Ok(PressureSweepResult { points })
}

/// Parallel counterpart of [`levcool_core::sim::run_quantum`].
pub fn quantum_runs(
    system: &PhysicalSystem,
    estimator: &KalmanGain,
    regulator: &ControllerGains,
    config: &QuantumConfig,
) -> Result<QuantumResult> {
    config.validate()?;
    let per_run: Vec<[f64; 3]> = (0..config.runs as u64)
        .into_par_iter()
        .map(|i| run_quantum_single(system, estimator, regulator, config, i))
        .collect::<Result<_>>()?;
    Ok(QuantumResult {
        occupancy: [0, 1, 2].map(|i| AxisStat::from_samples(per_run.iter().map(|r| r[i]))),
        predicted: predicted_occupancy(system, estimator, regulator, config.ts)?,
        runs: config.runs,
    })
}

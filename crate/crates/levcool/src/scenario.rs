//! Scenario execution: simulation, tables, summary and manifest.

use std::path::Path;

use levcool_core::calib::{
    closed_loop_spectral_radius, digital_gains, physical_gains, to_fixed_point_per_entry, DigitalGains, QuantizedGains,
};
use levcool_core::constants::{K_B, MBAR};
use levcool_core::dsp::{fit_lorentzian, occupancy, FitOptions, LorentzianGuess, PsdUnits};
use levcool_core::linalg::Mat;
use levcool_core::model::PhysicalSystem;
use levcool_core::riccati::{design_controller, discretize_with, ControllerGains, CostWeights, InputHold};
use levcool_core::sim::{
    cold_damping_oracle, design_quantum, simulate_free_trace, slowest_time_constant, trace_metadata, AxisStat, DelaySweepConfig,
    FeedbackChainConfig, QuantumConfig, SimConfig, Trace, TraceMetadata, TraceSummary,
};
use levcool_core::Error as CoreError;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::calibration::{calibrate_detector_synthetic, calibrate_electrode_synthetic, DetectorOptions, ElectrodeOptions};
use crate::config::{ConfigError, ExperimentConfig, GainSource, OutputFormat, RunSettings, Scenario};
use crate::ensemble::{closed_loop_ensemble, delay_sweep, pressure_sweep, quantum_runs};
use crate::io::{delay_sweep_table, pressure_sweep_table, quantum_table, trace_table, Cell, OutputDir, Table};
use crate::spectral::{WelchAccumulator, WelchConfig};

const AX: [&str; 3] = ["x", "y", "z"];
const ELECTRODES: [&str; 3] = ["a", "b", "z"];

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("closed loop unstable: {0}")]
    Instability(String),
    #[error("numerical failure: {0}")]
    Numerical(CoreError),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl From<CoreError> for RunError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Instability { .. } => RunError::Instability(e.to_string()),
            CoreError::InvalidParameter { .. } | CoreError::PhaseBelowElectronicDelay { .. } | CoreError::MissingCalibration(_) => {
                RunError::Usage(e.to_string())
            }
            other => RunError::Numerical(other),
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Usage(_) => 2,
            RunError::Instability(_) => 3,
            RunError::Numerical(_) => 4,
            RunError::Other(_) => 1,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            RunError::Config(_) | RunError::Usage(_) => "config",
            RunError::Instability(_) => "instability",
            RunError::Numerical(_) => "numerical",
            RunError::Other(_) => "io",
        }
    }

    /// Machine-readable form written to stderr by the binary.
    pub fn to_json(&self) -> Value {
        let mut err = json!({
            "category": self.category(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let RunError::Config(c) = self {
            err["issues"] = json!(c.issues);
        }
        json!({ "error": err })
    }
}

/// Result of a completed (or partially completed) run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub summary: Value,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    program: &'static str,
    version: &'static str,
    core_version: &'static str,
    scenario: &'static str,
    seed: u64,
    config: &'static str,
    files: &'a [String],
}

/// Runs the configured scenario and writes every artifact to
/// `cfg.output.dir`. Instability still writes what was computed before
/// returning the error.
pub fn execute(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let mut out = OutputDir::create(&cfg.output.dir)?;
    out.text("manifest.toml", &cfg.to_toml_string())?;
    let mut tables: Vec<(String, Table)> = Vec::new();
    let result = run_scenario(cfg, &mut tables);
    let (summary, failure) = match result {
        Ok(s) => (s, None),
        Err((partial, e)) => (partial, Some(e)),
    };
    match cfg.output.format {
        OutputFormat::Csv => {
            for (name, t) in &tables {
                out.csv(&format!("{name}.csv"), t)?;
            }
        }
        OutputFormat::Json => {
            let map: serde_json::Map<String, Value> = tables
                .iter()
                .map(|(n, t)| (n.clone(), serde_json::to_value(t).expect("tables serialize")))
                .collect();
            out.json("results.json", &map)?;
        }
    }
    let mut summary = summary;
    if let Some(e) = &failure {
        summary["error"] = e.to_json()["error"].clone();
    }
    out.json("summary.json", &summary)?;
    let mut files = out.files.clone();
    files.push("manifest.json".into());
    let manifest = Manifest {
        program: "levcool",
        version: env!("CARGO_PKG_VERSION"),
        core_version: levcool_core::VERSION,
        scenario: cfg.scenario.kind(),
        seed: cfg.seed,
        config: "manifest.toml",
        files: &files,
    };
    out.json("manifest.json", &manifest)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(Outcome { summary, files }),
    }
}

type Partial = (Value, RunError);

fn fail(e: impl Into<RunError>) -> Partial {
    (Value::Null, e.into())
}

fn run_scenario(cfg: &ExperimentConfig, tables: &mut Vec<(String, Table)>) -> Result<Value, Partial> {
    let sys = cfg.physical_system().map_err(fail)?;
    let mut summary = json!({
        "scenario": cfg.scenario.kind(),
        "seed": cfg.seed,
        "system": {
            "pressure_Pa": sys.env.pressure,
            "temperature_K": sys.env.temperature,
            "mass_kg": sys.particle.mass,
            "omega_rad_s": sys.trap.omega,
            "gamma_per_s": sys.gamma().map_err(fail)?,
            "imprecision_m_rtHz": sys.noise.measurement_sigma,
        },
    });
    let results = match &cfg.scenario {
        Scenario::Free { run } => free(cfg, &sys, run, tables),
        Scenario::Loop { run } => closed_loop(cfg, &sys, run, tables),
        Scenario::DelaySweep {
            axis,
            gain,
            phis,
            repeats,
            length,
            warmup,
        } => {
            let sim = cfg.sim_config(&RunSettings::default());
            let sweep = DelaySweepConfig {
                axis: *axis,
                gain: *gain,
                phis: phis.clone(),
                repeats: *repeats,
                length: *length,
                warmup: *warmup,
            };
            let res = delay_sweep(&sys, &sweep, &sim).map_err(fail)?;
            tables.push(("delay_sweep".into(), delay_sweep_table(&res, *axis)));
            let (imin, tmin) = res
                .t_eff
                .iter()
                .enumerate()
                .map(|(i, s)| (i, s.mean))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            Ok(json!({
                "axis": AX[*axis],
                "gain_N_per_m": gain,
                "points": res.phi.len(),
                "repeats": repeats,
                "min_T_eff_K": tmin,
                "phi_at_min_rad": res.phi_realized[imin],
                "max_T_eff_K": res.t_eff.iter().map(|s| s.mean).fold(0.0, f64::max),
            }))
        }
        Scenario::PressureSweep { run, pressures, repeats } => {
            let sim = cfg.sim_config(run);
            let plan = plan_gains(cfg, &sys).map_err(fail)?;
            let chain = build_chain(cfg, &sys, plan.loop_gains, &sim).map_err(fail)?;
            let mbar: Vec<f64> = pressures.iter().map(|p| p / MBAR).collect();
            let res = pressure_sweep(&sys, &chain, &mbar, &sim, *repeats).map_err(fail)?;
            tables.push(("pressure_sweep".into(), pressure_sweep_table(&res)));
            tables.push(("gains".into(), plan.table()));
            let unstable: usize = res.points.iter().map(|p| p.unstable_runs).sum();
            let s = json!({
                "points": res.points.len(),
                "repeats": repeats,
                "unstable_runs": unstable,
                "delays": chain.delays,
                "t_eff_K": res.points.iter().map(|p| json!({
                    "pressure_mbar": p.pressure_mbar,
                    "x": stat(&p.t_eff[0]), "y": stat(&p.t_eff[1]), "z": stat(&p.t_eff[2]),
                })).collect::<Vec<_>>(),
            });
            if unstable > 0 {
                return Err((
                    with_results(summary, s),
                    RunError::Instability(format!("{unstable} realization(s) diverged")),
                ));
            }
            Ok(s)
        }
        Scenario::Quantum {
            runs,
            warmup_tau,
            span_tau,
        } => quantum(cfg, &sys, *runs, *warmup_tau, *span_tau, tables),
        Scenario::Calibrate {
            run,
            electrode,
            axis,
            detuning,
            amplitudes,
            segment_length,
            drive_traces,
        } => {
            let mut sim = cfg.sim_config(run);
            let opts = DetectorOptions {
                welch: WelchConfig {
                    segment_length: *segment_length,
                    ..WelchConfig::default()
                },
                ..DetectorOptions::default()
            };
            let det = calibrate_detector_synthetic(&sys, &sim, &opts).map_err(fail)?;
            let mut t = Table::new([
                "axis",
                "c_vm_V_per_m",
                "c_vm_sigma_V_per_m",
                "omega_rad_s",
                "omega_sigma_rad_s",
                "gamma_per_s",
                "gamma_sigma_per_s",
                "fit_residual",
            ]);
            for r in det.records() {
                t.push(vec![
                    r.axis.into(),
                    r.c_vm.into(),
                    r.c_vm_sigma.into(),
                    r.omega.into(),
                    r.omega_sigma.into(),
                    r.gamma.into(),
                    r.gamma_sigma.into(),
                    r.fit_residual.into(),
                ]);
            }
            tables.push(("detector_calibration".into(), t));
            sim.n_traces = *drive_traces;
            let omega_dr = sys.trap.omega[*axis] + detuning;
            let el = calibrate_electrode_synthetic(
                &sys,
                &sim,
                *electrode,
                *axis,
                omega_dr,
                amplitudes,
                &det.calibration,
                &ElectrodeOptions::default(),
            )
            .map_err(fail)?;
            let mut t = Table::new(["amplitude_V", "force_N", "force_sigma_N", "peak_variance_m2", "snr"]);
            for (d, f) in &el.forces {
                t.push(vec![d.amplitude.into(), f.force.into(), f.sigma.into(), f.peak_variance.into(), f.snr.into()]);
            }
            tables.push(("drive_forces".into(), t));
            let fpv = sys.force_per_volt().map_err(fail)?;
            Ok(json!({
                "detector": {
                    "axes": det.records(),
                    "traces": det.traces,
                    "warnings": det.warnings,
                    "synthesis_c_vm": cfg.detector.c_vm,
                },
                "electrode": {
                    "electrode": ELECTRODES[*electrode],
                    "axis": AX[*axis],
                    "omega_dr_rad_s": omega_dr,
                    "c_nv_N_per_V": el.fit.slope,
                    "c_nv_sigma_N_per_V": el.fit.slope_sigma,
                    "intercept_N": el.fit.intercept,
                    "intercept_sigma_N": el.fit.intercept_sigma,
                    "synthesis_c_nv_N_per_V": fpv[(*axis, *electrode)].abs(),
                },
            }))
        }
        Scenario::Design { pressures } => design(cfg, &sys, pressures, tables),
    };
    match results {
        Ok(r) => Ok(with_results(summary, r)),
        Err((partial, e)) => {
            if partial.is_null() {
                summary["results"] = Value::Null;
                Err((summary, e))
            } else {
                Err((partial, e))
            }
        }
    }
}

fn with_results(mut summary: Value, results: Value) -> Value {
    summary["results"] = results;
    summary
}

fn stat(s: &AxisStat) -> Value {
    json!({ "mean": s.mean, "stderr": s.stderr, "std": s.std(), "n": s.n })
}

fn metadata_json(m: &TraceMetadata) -> Value {
    json!({
        "pressure_Pa": m.pressure,
        "gamma_per_s": m.gamma,
        "seed": m.seed,
        "ts_s": m.ts,
        "dt_physics_s": m.dt_physics,
        "delays": m.delays,
        "electronic_delay_steps": m.electronic_delay_steps,
        "electronic_delay_residual_s": m.electronic_delay_residual,
    })
}

fn segment_for(samples: usize) -> usize {
    let target = (samples / 2).max(8);
    let mut n = 8;
    while n * 2 <= target && n < 32768 {
        n *= 2;
    }
    n
}

fn free(cfg: &ExperimentConfig, sys: &PhysicalSystem, run: &RunSettings, tables: &mut Vec<(String, Table)>) -> Result<Value, Partial> {
    let sim = cfg.sim_config(run);
    let fs = if run.record_stride > 0 {
        1.0 / (sim.ts * run.record_stride as f64)
    } else {
        0.0
    };
    let samples = (sim.controller_steps(sim.trace_length) - 1)
        .checked_div(run.record_stride)
        .map_or(0, |q| q + 1);
    let welch = WelchConfig {
        segment_length: segment_for(samples),
        ..WelchConfig::default()
    };
    type Item = (TraceSummary, Option<Vec<WelchAccumulator>>, Option<Trace>);
    let items: Vec<Item> = (0..run.traces as u64)
        .into_par_iter()
        .map(|i| -> levcool_core::Result<Item> {
            let (t, s) = simulate_free_trace(sys, &sim, i, None)?;
            let psd = if run.record_stride > 0 && samples >= 16 {
                let mut v = Vec::with_capacity(3);
                for a in 0..3 {
                    let mut acc = WelchAccumulator::new(welch, fs, PsdUnits::Displacement)?;
                    acc.add(&t.position[a])?;
                    v.push(acc);
                }
                Some(v)
            } else {
                None
            };
            let keep = (i as usize) < run.export_traces;
            Ok((s, psd, keep.then_some(t)))
        })
        .collect::<levcool_core::Result<_>>()
        .map_err(fail)?;

    let m = sys.particle.mass;
    let kt = K_B * sys.env.temperature;
    let mut t = Table::new([
        "axis",
        "x2_m2",
        "x2_stderr_m2",
        "equipartition_x2_m2",
        "T_eff_K",
        "T_eff_stderr_K",
    ]);
    let mut axes = Vec::new();
    for a in 0..3 {
        let x2 = AxisStat::from_samples(items.iter().map(|it| it.0.x2[a]));
        let temps: Vec<f64> = items
            .iter()
            .map(|it| it.0.temperature(sys, a))
            .collect::<levcool_core::Result<_>>()
            .map_err(fail)?;
        let te = AxisStat::from_samples(temps.into_iter());
        let w = sys.trap.omega[a];
        let expected = kt / (m * w * w);
        t.push(vec![
            AX[a].into(),
            x2.mean.into(),
            x2.stderr.into(),
            expected.into(),
            te.mean.into(),
            te.stderr.into(),
        ]);
        axes.push(json!({
            "axis": AX[a],
            "x2_m2": stat(&x2),
            "equipartition_x2_m2": expected,
            "x2_ratio": x2.mean / expected,
            "T_eff_K": stat(&te),
        }));
    }
    tables.push(("moments".into(), t));

    let mut fits = Vec::new();
    if items.iter().all(|it| it.1.is_some()) && !items.is_empty() {
        let gamma = sys.gamma().map_err(fail)?;
        let mut psd_table = Table::new(["frequency_Hz", "S_x_m2_per_Hz", "S_y_m2_per_Hz", "S_z_m2_per_Hz"]);
        let mut psds = Vec::new();
        for a in 0..3 {
            let mut acc = WelchAccumulator::new(welch, fs, PsdUnits::Displacement).map_err(fail)?;
            for it in &items {
                acc.merge(&it.1.as_ref().expect("checked")[a]).map_err(fail)?;
            }
            let psd = acc.finish().map_err(fail)?;
            let fit = fit_lorentzian(
                &psd,
                LorentzianGuess {
                    omega0: sys.trap.omega[a],
                    gamma: gamma.max(1e-6 * sys.trap.omega[a]),
                    amplitude: None,
                },
                FitOptions {
                    fit_background: sys.noise.measurement_sigma[a] > 0.0,
                    ..FitOptions::default()
                },
            );
            fits.push(match fit {
                Ok(f) => json!({
                    "axis": AX[a],
                    "omega0_rad_s": f.model.omega0,
                    "omega0_sigma_rad_s": f.sigma[1],
                    "gamma_per_s": f.model.gamma,
                    "gamma_sigma_per_s": f.sigma[2],
                    "amplitude": f.model.amplitude,
                    "background": f.model.background,
                    "residual": f.residual,
                }),
                Err(e) => json!({ "axis": AX[a], "error": e.to_string() }),
            });
            psds.push(psd);
        }
        for k in 0..psds[0].frequencies.len() {
            psd_table.push(vec![
                psds[0].frequencies[k].into(),
                psds[0].values[k].into(),
                psds[1].values[k].into(),
                psds[2].values[k].into(),
            ]);
        }
        tables.push(("psd".into(), psd_table));
    }
    for (i, it) in items.iter().enumerate() {
        if let Some(tr) = &it.2 {
            tables.push((format!("trace_{i:04}"), trace_table(tr)));
        }
    }
    Ok(json!({
        "traces": run.traces,
        "axes": axes,
        "lorentzian_fits": fits,
        "metadata": metadata_json(&trace_metadata(sys, &sim, None).map_err(fail)?),
    }))
}

/// Gains the loop runs with, and how they were obtained.
pub struct GainPlan {
    pub controller: Option<ControllerGains>,
    pub digital: DigitalGains,
    pub quantized: Option<QuantizedGains>,
    pub loop_gains: DigitalGains,
}

impl GainPlan {
    pub fn table(&self) -> Table {
        let mut t = Table::new([
            "entry",
            "lqr_value",
            "lqr_unit",
            "digital",
            "fixed_point",
            "integer_bits",
            "fraction_bits",
            "quantization_error",
        ]);
        for (idx, (name, d)) in self.digital.entries().into_iter().enumerate() {
            let (kind, rest) = (idx / 9, idx % 9);
            let (i, j) = (rest / 3, rest % 3);
            let (lqr, unit) = match &self.controller {
                Some(c) if kind == 0 => (c.k_d[(i, j)], "N/m"),
                Some(c) => (c.k_d[(i, 3 + j)], "N*s/m"),
                None => (f64::NAN, ""),
            };
            let q = self.quantized.as_ref().map(|q| &q.entries[idx]);
            t.push(vec![
                name.into(),
                lqr.into(),
                unit.into(),
                d.into(),
                q.map_or(d, |e| e.quantized).into(),
                q.map_or(0, |e| e.format.integer_bits as usize).into(),
                q.map_or(0, |e| e.format.fraction_bits as usize).into(),
                q.map_or(0.0, |e| e.error).into(),
            ]);
        }
        t
    }
}

pub fn plan_gains(cfg: &ExperimentConfig, sys: &PhysicalSystem) -> levcool_core::Result<GainPlan> {
    let (controller, digital) = match cfg.controller.source {
        GainSource::Design => {
            let c = design_controller(sys, &CostWeights::energy(sys, cfg.controller.layout), &cfg.design_options())?;
            let d = digital_gains(&c.k_d, &cfg.detector, &sys.actuator, cfg.chain.amplifier_gain, &sys.trap)?;
            (Some(c), d)
        }
        GainSource::Digital => (None, cfg.controller.digital),
    };
    let quantized = if cfg.controller.word_bits > 0 {
        Some(to_fixed_point_per_entry(&digital, cfg.controller.word_bits)?)
    } else {
        None
    };
    let loop_gains = quantized.as_ref().map_or(digital, |q| q.gains);
    Ok(GainPlan {
        controller,
        digital,
        quantized,
        loop_gains,
    })
}

pub fn build_chain(
    cfg: &ExperimentConfig,
    sys: &PhysicalSystem,
    gains: DigitalGains,
    sim: &SimConfig,
) -> levcool_core::Result<FeedbackChainConfig> {
    let chain = FeedbackChainConfig::standard_with(sys, gains, sim, &cfg.chain.filters)?;
    Ok(match cfg.chain.delays {
        Some(d) => chain.with_delays(d),
        None => chain,
    })
}

fn closed_loop(
    cfg: &ExperimentConfig,
    sys: &PhysicalSystem,
    run: &RunSettings,
    tables: &mut Vec<(String, Table)>,
) -> Result<Value, Partial> {
    let sim = cfg.sim_config(run);
    let plan = plan_gains(cfg, sys).map_err(fail)?;
    let chain = build_chain(cfg, sys, plan.loop_gains, &sim).map_err(fail)?;
    let ens = closed_loop_ensemble(sys, &chain, &sim).map_err(fail)?;
    tables.push(("gains".into(), plan.table()));
    let mut t = Table::new(["axis", "T_eff_K", "T_eff_stderr_K", "occupancy", "oracle_K", "realizations"]);
    let mut axes = Vec::new();
    for a in 0..3 {
        let te = if ens.set.summaries.is_empty() {
            AxisStat {
                mean: f64::NAN,
                stderr: f64::NAN,
                n: 0,
            }
        } else {
            ens.set.temperature(sys, a).map_err(fail)?
        };
        let oracle = cold_damping_oracle(sys, &chain, &sim, a).ok();
        let n = occupancy(te.mean, sys.trap.omega[a]);
        t.push(vec![
            AX[a].into(),
            te.mean.into(),
            te.stderr.into(),
            n.into(),
            oracle.unwrap_or(f64::NAN).into(),
            te.n.into(),
        ]);
        axes.push(json!({ "axis": AX[a], "T_eff_K": stat(&te), "occupancy": n, "oracle_K": oracle }));
    }
    tables.push(("temperatures".into(), t));
    for (i, tr) in ens.set.traces.iter().take(run.export_traces).enumerate() {
        tables.push((format!("trace_{i:04}"), trace_table(tr)));
    }
    let s = json!({
        "traces": run.traces,
        "unstable": ens.failures.iter().map(|(i, e)| json!({ "index": i, "error": e.to_string() })).collect::<Vec<_>>(),
        "axes": axes,
        "gains": plan.table(),
        "metadata": metadata_json(&ens.set.metadata),
    });
    if !ens.failures.is_empty() {
        let e = RunError::Instability(format!("{} of {} realizations diverged", ens.failures.len(), run.traces));
        return Err((json!({ "results": s }), e)).map_err(|(v, e)| (merge_partial(cfg, v), e));
    }
    Ok(s)
}

fn merge_partial(cfg: &ExperimentConfig, v: Value) -> Value {
    let mut out = json!({ "scenario": cfg.scenario.kind(), "seed": cfg.seed });
    out["results"] = v["results"].clone();
    out
}

fn quantum(
    cfg: &ExperimentConfig,
    sys: &PhysicalSystem,
    runs: usize,
    warmup_tau: f64,
    span_tau: f64,
    tables: &mut Vec<(String, Table)>,
) -> Result<Value, Partial> {
    let mut opts = cfg.design_options();
    opts.discretize.hold = InputHold::Exact;
    let weights = CostWeights::energy(sys, cfg.controller.layout);
    let d = design_quantum(sys, &weights, &opts).map_err(fail)?;
    let tau = slowest_time_constant(sys, &d.estimator, &d.regulator, opts.ts).map_err(fail)?;
    let qc = QuantumConfig::sized_for(tau, warmup_tau, span_tau, runs, opts.ts, cfg.seed);
    let res = quantum_runs(sys, &d.estimator, &d.regulator, &qc).map_err(fail)?;
    tables.push(("quantum".into(), quantum_table(&res)));
    Ok(json!({
        "runs": runs,
        "slowest_time_constant_s": tau,
        "warmup_s": qc.warmup,
        "duration_s": qc.duration,
        "detection_efficiency": sys.noise.detection_efficiency,
        "backaction_force_psd_N2_per_Hz": sys.noise.backaction_force_psd,
        "axes": (0..3).map(|a| json!({
            "axis": AX[a],
            "occupancy": stat(&res.occupancy[a]),
            "predicted": res.predicted[a],
        })).collect::<Vec<_>>(),
    }))
}

fn design(cfg: &ExperimentConfig, sys: &PhysicalSystem, pressures: &[f64], tables: &mut Vec<(String, Table)>) -> Result<Value, Partial> {
    let plan = plan_gains(cfg, sys).map_err(fail)?;
    let c = plan.controller.as_ref().ok_or_else(|| fail(RunError::Usage("design needs controller.gains = \"design\"".into())))?;
    tables.push(("gains".into(), plan.table()));
    let opts = cfg.design_options();
    let gamma = match opts.gamma {
        Some(g) => g,
        None => sys.gamma().map_err(fail)?,
    };
    let dss = discretize_with(&sys.state_space_with_gamma(gamma).map_err(fail)?, opts.ts, opts.discretize).map_err(fail)?;
    let rho_design = closed_loop_spectral_radius(&dss, &c.k_d);
    let rho_quantized = match &plan.quantized {
        Some(q) => {
            let k = physical_gains(&q.gains, &cfg.detector, &sys.actuator, cfg.chain.amplifier_gain, &sys.trap).map_err(fail)?;
            Some(closed_loop_spectral_radius(&dss, &k))
        }
        None => None,
    };
    let mut s = json!({
        "k": mat_json(&c.k),
        "k_d": mat_json(&c.k_d),
        "digital": plan.digital.entries().into_iter().collect::<std::collections::BTreeMap<_, _>>(),
        "spectral_radius": rho_design,
        "spectral_radius_quantized": rho_quantized,
        "max_quantization_relative_error": plan.quantized.as_ref().map(|q| q.max_relative_error()),
    });
    if !pressures.is_empty() {
        let weights = CostWeights::energy(sys, cfg.controller.layout);
        let mut gopts = opts;
        gopts.gamma = None;
        let designs: Vec<ControllerGains> = pressures
            .par_iter()
            .map(|&p| design_controller(&sys.with_pressure(p)?, &weights, &gopts))
            .collect::<levcool_core::Result<_>>()
            .map_err(fail)?;
        let mut zero = gopts;
        zero.gamma = Some(0.0);
        let reference = design_controller(sys, &weights, &zero).map_err(fail)?;
        let names = kd_names(&c.mask);
        let mut cols = vec!["pressure_mbar".to_string()];
        cols.extend(names.iter().map(|(n, _, _)| n.clone()));
        cols.push("max_relative_deviation".into());
        let mut t = Table::new(cols);
        let mut devs = Vec::new();
        for (p, d) in pressures.iter().zip(&designs) {
            let mut row: Vec<Cell> = vec![(p / MBAR).into()];
            let mut dev: f64 = 0.0;
            for (_, i, j) in &names {
                let v = d.k_d[(*i, *j)];
                let r = reference.k_d[(*i, *j)];
                dev = dev.max((v / r - 1.0).abs());
                row.push(v.into());
            }
            row.push(dev.into());
            devs.push(dev);
            t.push(row);
        }
        tables.push(("gains_vs_pressure".into(), t));
        s["gains_vs_pressure_max_deviation"] = json!(devs);
    }
    Ok(s)
}

fn kd_names(mask: &levcool_core::riccati::StructureMask) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..3 {
        for j in 0..6 {
            if mask.is_allowed(i, j) {
                let kind = if j < 3 { "p" } else { "d" };
                out.push((format!("K_d_{kind},{}{}", AX[i], AX[j % 3]), i, j));
            }
        }
    }
    out
}

fn mat_json(m: &Mat) -> Value {
    json!((0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>()).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verb {
    Run,
    Design,
    Calibrate,
    Sweep,
}

impl Verb {
    /// `run` accepts every scenario; the other verbs only their own kind.
    pub fn accepts(self, scenario: &Scenario) -> bool {
        match self {
            Verb::Run => true,
            Verb::Design => matches!(scenario, Scenario::Design { .. }),
            Verb::Calibrate => matches!(scenario, Scenario::Calibrate { .. }),
            Verb::Sweep => matches!(scenario, Scenario::DelaySweep { .. } | Scenario::PressureSweep { .. }),
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<std::path::PathBuf>,
    pub format: Option<OutputFormat>,
}

pub fn prepare(path: &Path, verb: Verb, overrides: &Overrides) -> Result<ExperimentConfig, RunError> {
    let mut cfg = crate::config::parse_config(path)?;
    if !verb.accepts(&cfg.scenario) {
        return Err(RunError::Usage(format!(
            "verb `{}` cannot run a `{}` scenario",
            format!("{verb:?}").to_lowercase(),
            cfg.scenario.kind()
        )));
    }
    if let Some(s) = overrides.seed {
        cfg.seed = s;
    }
    if let Some(d) = &overrides.out_dir {
        cfg.output.dir = d.clone();
    }
    if let Some(f) = overrides.format {
        cfg.output.format = f;
    }
    Ok(cfg)
}

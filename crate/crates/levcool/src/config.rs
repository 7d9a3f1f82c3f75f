//! Experiment configuration: TOML with explicit units on every physical
//! quantity. Parsing reports every problem it finds, not just the first.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use levcool_core::calib::{DetectorCalibration, DigitalGains};
use levcool_core::constants::{AIR_MOLAR_MASS, AIR_VISCOSITY, HBAR, MBAR};
use levcool_core::model::{
    ActuatorCalibration, GasEnvironment, NoiseParams, ParticleParams, PhysicalSystem, TrapParams,
};
use levcool_core::riccati::{DesignOptions, DiscretizeOptions, InputHold, WeightLayout};
use levcool_core::sim::{FilterSettings, InitialState, SimConfig};
use toml::{Table, Value};

use crate::units::{format_quantity, parse_quantity, Dimension};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub issues: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} configuration error(s):", self.issues.len())?;
        for i in &self.issues {
            write!(f, "\n  {i}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemSection {
    pub pressure: f64,
    pub temperature: f64,
    pub mass: f64,
    pub radius: f64,
    pub density: f64,
    pub gas_molar_mass: f64,
    pub trap_omega: [f64; 3],
    /// m/√Hz
    pub imprecision: [f64; 3],
}

impl Default for SystemSection {
    fn default() -> Self {
        let p = ParticleParams::reference();
        Self {
            pressure: 1.2 * MBAR,
            temperature: 293.0,
            mass: p.mass,
            radius: p.radius,
            density: p.density,
            gas_molar_mass: AIR_MOLAR_MASS,
            trap_omega: TrapParams::reference().omega,
            imprecision: NoiseParams::LAB_IMPRECISION,
        }
    }
}

/// Quantum-limited detection. Backaction `S_ba = Γ_ba·2mħΩ_z` on every
/// axis; the imprecision follows from the closure.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumSection {
    pub efficiency: [f64; 3],
    pub backaction_rate: f64,
}

impl Default for QuantumSection {
    fn default() -> Self {
        Self {
            efficiency: [0.3; 3],
            backaction_rate: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorSection {
    pub c_nv: [[f64; 2]; 2],
    pub orientation: [[f64; 2]; 2],
    pub c_nv_z: Option<f64>,
}

impl Default for ActuatorSection {
    fn default() -> Self {
        let a = ActuatorCalibration::reference();
        Self {
            c_nv: a.c_nv,
            orientation: a.orientation,
            c_nv_z: a.c_nv_z,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainSource {
    /// LQR design from the configured weights.
    Design,
    /// Digital gains given in `kp`/`kd`.
    Digital,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerSection {
    pub ts: f64,
    pub layout: WeightLayout,
    pub hold: InputHold,
    /// Design with zero drag instead of the gas value.
    pub design_zero_drag: bool,
    pub cold_damping_z: bool,
    pub source: GainSource,
    pub digital: DigitalGains,
    /// Signed word for the fixed-point gains; 0 runs the loop unquantized.
    pub word_bits: u32,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            ts: 64e-9,
            layout: WeightLayout::Energy,
            hold: InputHold::Rectangular,
            design_zero_drag: true,
            cold_damping_z: true,
            source: GainSource::Design,
            digital: DigitalGains::zero(),
            word_bits: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSection {
    pub dt_physics: f64,
    pub electronic_delay: f64,
    pub amplifier_gain: f64,
    pub delays: Option<[usize; 3]>,
    pub adc_bits: u32,
    pub adc_full_scale: f64,
    pub filters: FilterSettings,
    pub energy_bound: f64,
}

impl Default for ChainSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            dt_physics: s.dt_physics,
            electronic_delay: s.electronic_delay,
            amplifier_gain: s.amplifier_gain,
            delays: None,
            adc_bits: s.adc_bits,
            adc_full_scale: s.adc_full_scale,
            filters: FilterSettings::default(),
            energy_bound: s.energy_bound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub duration: f64,
    pub trace_length: f64,
    pub traces: usize,
    pub record_stride: usize,
    /// Number of recorded traces written to CSV.
    pub export_traces: usize,
    pub initial: InitialState,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            duration: 50e-3,
            trace_length: 50e-3,
            traces: 1,
            record_stride: 0,
            export_traces: 0,
            initial: InitialState::Thermal,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Free {
        run: RunSettings,
    },
    Loop {
        run: RunSettings,
    },
    DelaySweep {
        axis: usize,
        /// N/m
        gain: f64,
        phis: Vec<f64>,
        repeats: usize,
        length: f64,
        warmup: f64,
    },
    PressureSweep {
        run: RunSettings,
        /// Pa
        pressures: Vec<f64>,
        repeats: usize,
    },
    Quantum {
        runs: usize,
        /// Warmup and averaging span in slowest closed-loop time constants.
        warmup_tau: f64,
        span_tau: f64,
    },
    Calibrate {
        run: RunSettings,
        electrode: usize,
        axis: usize,
        /// rad/s, added to the trap frequency of `axis`.
        detuning: f64,
        /// V
        amplitudes: Vec<f64>,
        segment_length: usize,
        drive_traces: usize,
    },
    Design {
        /// Pa; gain-versus-pressure table.
        pressures: Vec<f64>,
    },
}

impl Scenario {
    pub fn kind(&self) -> &'static str {
        match self {
            Scenario::Free { .. } => "free",
            Scenario::Loop { .. } => "loop",
            Scenario::DelaySweep { .. } => "delay-sweep",
            Scenario::PressureSweep { .. } => "pressure-sweep",
            Scenario::Quantum { .. } => "quantum",
            Scenario::Calibrate { .. } => "calibrate",
            Scenario::Design { .. } => "design",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn name(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub format: OutputFormat,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            format: OutputFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub quantum: Option<QuantumSection>,
    pub actuator: ActuatorSection,
    pub detector: DetectorCalibration,
    pub controller: ControllerSection,
    pub chain: ChainSection,
    pub scenario: Scenario,
    pub seed: u64,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn physical_system(&self) -> levcool_core::Result<PhysicalSystem> {
        let s = &self.system;
        let particle = ParticleParams::new(s.radius, s.density, Some(s.mass), 0)?;
        let trap = TrapParams::new(s.trap_omega)?;
        let env = GasEnvironment::new(s.pressure, s.temperature, s.gas_molar_mass, AIR_VISCOSITY)?;
        let noise = match &self.quantum {
            None => NoiseParams::classical(s.imprecision),
            Some(q) => {
                let sba = q.backaction_rate * 2.0 * particle.mass * HBAR * trap.omega[2];
                NoiseParams::quantum_limited(q.efficiency, [sba; 3])?
            }
        };
        let actuator = ActuatorCalibration {
            c_nv: self.actuator.c_nv,
            c_nv_z: self.actuator.c_nv_z,
            b_z_fallback: None,
            orientation: self.actuator.orientation,
        };
        let sys = PhysicalSystem {
            particle,
            trap,
            env,
            noise,
            actuator,
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn sim_config(&self, run: &RunSettings) -> SimConfig {
        let c = &self.chain;
        SimConfig {
            ts: self.controller.ts,
            dt_physics: c.dt_physics,
            duration: run.duration,
            seed: self.seed,
            trace_length: run.trace_length,
            n_traces: run.traces,
            electronic_delay: c.electronic_delay,
            amplifier_gain: c.amplifier_gain,
            decimation: (self.controller.ts / c.dt_physics).round().max(1.0) as usize,
            adc_bits: c.adc_bits,
            adc_full_scale: c.adc_full_scale,
            detector: self.detector,
            record_stride: run.record_stride,
            energy_bound: c.energy_bound,
            initial: run.initial,
        }
    }

    pub fn design_options(&self) -> DesignOptions {
        let c = &self.controller;
        DesignOptions {
            ts: c.ts,
            discretize: DiscretizeOptions {
                hold: c.hold,
                ..DiscretizeOptions::default()
            },
            layout: c.layout,
            gamma: if c.design_zero_drag { Some(0.0) } else { None },
            cold_damping_z: c.cold_damping_z,
        }
    }
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        issues: vec![format!("{}: {e}", path.display())],
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let root: Table = text.parse().map_err(|e: toml::de::Error| ConfigError {
        issues: vec![format!("TOML syntax: {}", e.message())],
    })?;
    let mut errs = Vec::new();
    let empty = Table::new();
    let mut top = Reader::new("", &root);

    let section = |top: &mut Reader, name: &'static str, required: bool, errs: &mut Vec<String>| -> Option<Table> {
        match top.get(name) {
            Some(Value::Table(t)) => Some(t.clone()),
            Some(_) => {
                errs.push(format!("{name}: must be a table"));
                None
            }
            None => {
                if required {
                    errs.push(format!("{name}: section is required"));
                }
                None
            }
        }
    };
    let sys_t = section(&mut top, "system", true, &mut errs);
    let q_t = section(&mut top, "quantum", false, &mut errs);
    let act_t = section(&mut top, "actuator", false, &mut errs);
    let det_t = section(&mut top, "detector", false, &mut errs);
    let ctl_t = section(&mut top, "controller", false, &mut errs);
    let chain_t = section(&mut top, "chain", false, &mut errs);
    let sc_t = section(&mut top, "scenario", true, &mut errs);
    let out_t = section(&mut top, "output", false, &mut errs);
    top.finish(&mut errs);

    let system = {
        let mut r = Reader::new("system", sys_t.as_ref().unwrap_or(&empty));
        let d = SystemSection::default();
        let pressure = r.required_quantity("pressure", Dimension::Pressure, &mut errs).unwrap_or(d.pressure);
        let s = SystemSection {
            pressure,
            temperature: r.quantity_or("temperature", Dimension::Temperature, d.temperature, &mut errs),
            mass: r.quantity_or("mass", Dimension::Mass, d.mass, &mut errs),
            radius: r.quantity_or("radius", Dimension::Length, d.radius, &mut errs),
            density: r.quantity_or("density", Dimension::Density, d.density, &mut errs),
            gas_molar_mass: r.quantity_or("gas_molar_mass", Dimension::MolarMass, d.gas_molar_mass, &mut errs),
            trap_omega: r.quantity3_or("trap_frequencies", Dimension::AngularFrequency, d.trap_omega, &mut errs),
            imprecision: r.quantity3_or("imprecision", Dimension::DisplacementDensity, d.imprecision, &mut errs),
        };
        r.finish(&mut errs);
        s
    };

    let quantum = q_t.as_ref().map(|t| {
        let mut r = Reader::new("quantum", t);
        let d = QuantumSection::default();
        let q = QuantumSection {
            efficiency: r.number3_or("efficiency", d.efficiency, &mut errs),
            backaction_rate: r.quantity_or("backaction_rate", Dimension::Rate, d.backaction_rate, &mut errs),
        };
        r.finish(&mut errs);
        q
    });

    let actuator = {
        let mut r = Reader::new("actuator", act_t.as_ref().unwrap_or(&empty));
        let d = ActuatorSection::default();
        let c_nv = r.matrix2_quantity("c_nv", Dimension::ForcePerVolt, &mut errs).unwrap_or(d.c_nv);
        let orientation = r.matrix2_number("orientation", &mut errs).unwrap_or(d.orientation);
        let c_nv_z = r.quantity("c_nv_z", Dimension::ForcePerVolt, &mut errs);
        r.finish(&mut errs);
        ActuatorSection {
            c_nv,
            orientation,
            c_nv_z,
        }
    };

    let detector = {
        let mut r = Reader::new("detector", det_t.as_ref().unwrap_or(&empty));
        let d = DetectorCalibration::reference();
        let c = DetectorCalibration {
            c_vm: r.quantity3_or("c_vm", Dimension::VoltsPerMeter, d.c_vm, &mut errs),
            sigma: r.quantity3_or("c_vm_sigma", Dimension::VoltsPerMeter, d.sigma, &mut errs),
        };
        r.finish(&mut errs);
        c
    };

    let controller = {
        let mut r = Reader::new("controller", ctl_t.as_ref().unwrap_or(&empty));
        let d = ControllerSection::default();
        let layout = match r.choice("weights", &["energy", "position-block"], &mut errs) {
            Some(1) => WeightLayout::PositionBlock,
            _ => WeightLayout::Energy,
        };
        let hold = match r.choice("hold", &["rectangular", "exact"], &mut errs) {
            Some(1) => InputHold::Exact,
            _ => InputHold::Rectangular,
        };
        let design_zero_drag = !matches!(r.choice("design_drag", &["zero", "gas"], &mut errs), Some(1));
        let cold_damping_z = r.bool_or("cold_damping_z", d.cold_damping_z, &mut errs);
        let source = match r.choice("gains", &["design", "digital"], &mut errs) {
            Some(1) => GainSource::Digital,
            _ => GainSource::Design,
        };
        let mut digital = DigitalGains::zero();
        let kp = r.matrix3_number("kp", &mut errs);
        let kd = r.matrix3_number("kd", &mut errs);
        match (source, kp, kd) {
            (GainSource::Digital, Some(kp), Some(kd)) => digital = DigitalGains { kp, kd },
            (GainSource::Digital, _, _) => errs.push("controller: gains = \"digital\" needs both kp and kd".into()),
            (GainSource::Design, None, None) => {}
            (GainSource::Design, _, _) => errs.push("controller: kp/kd are only read with gains = \"digital\"".into()),
        }
        let c = ControllerSection {
            ts: r.quantity_or("ts", Dimension::Time, d.ts, &mut errs),
            layout,
            hold,
            design_zero_drag,
            cold_damping_z,
            source,
            digital,
            word_bits: r.uint_or("fixed_point_bits", d.word_bits as u64, &mut errs) as u32,
        };
        r.finish(&mut errs);
        c
    };

    let chain = {
        let mut r = Reader::new("chain", chain_t.as_ref().unwrap_or(&empty));
        let d = ChainSection::default();
        let delays = r.get("delays").map(|v| match int_array(v) {
            Some(a) if a.len() == 3 => [a[0], a[1], a[2]],
            _ => {
                errs.push("chain.delays: expected three non-negative integers".into());
                [0; 3]
            }
        });
        let c = ChainSection {
            dt_physics: r.quantity_or("dt_physics", Dimension::Time, d.dt_physics, &mut errs),
            electronic_delay: r.quantity_or("electronic_delay", Dimension::Time, d.electronic_delay, &mut errs),
            amplifier_gain: r.number_or("amplifier_gain", d.amplifier_gain, &mut errs),
            delays,
            adc_bits: r.uint_or("adc_bits", d.adc_bits as u64, &mut errs) as u32,
            adc_full_scale: r.quantity_or("adc_full_scale", Dimension::Voltage, d.adc_full_scale, &mut errs),
            filters: FilterSettings {
                dc_block_hz: r.quantity_or("dc_block", Dimension::Frequency, d.filters.dc_block_hz, &mut errs),
                notch_q_xy: r.number_or("notch_q_xy", d.filters.notch_q_xy, &mut errs),
                notch_q_z: r.number_or("notch_q_z", d.filters.notch_q_z, &mut errs),
            },
            energy_bound: r.number_or("energy_bound", d.energy_bound, &mut errs),
        };
        r.finish(&mut errs);
        c
    };

    let (scenario, seed) = {
        let mut r = Reader::new("scenario", sc_t.as_ref().unwrap_or(&empty));
        let seed = r.uint_or("seed", 0, &mut errs);
        let kinds = ["free", "loop", "delay-sweep", "pressure-sweep", "quantum", "calibrate", "design"];
        let kind = if sc_t.is_some() {
            let k = r.choice("kind", &kinds, &mut errs);
            if k.is_none() && !r.table.contains_key("kind") {
                errs.push(format!("scenario.kind: required, one of {}", kinds.join(", ")));
            }
            k
        } else {
            None
        };
        let sc = match kind {
            Some(0) => Scenario::Free {
                run: run_settings(&mut r, &mut errs),
            },
            Some(1) => Scenario::Loop {
                run: run_settings(&mut r, &mut errs),
            },
            Some(2) => {
                let axis = r.axis_or("axis", 0, &mut errs);
                let gain = r.required_quantity("gain", Dimension::Stiffness, &mut errs).unwrap_or(0.0);
                let phis = if r.table.contains_key("phi") {
                    r.quantity_list("phi", Dimension::Angle, &mut errs)
                } else {
                    let lo = r.required_quantity("phi_min", Dimension::Angle, &mut errs).unwrap_or(1.0);
                    let hi = r.required_quantity("phi_max", Dimension::Angle, &mut errs).unwrap_or(2.0);
                    let n = r.uint_or("points", 20, &mut errs).max(2) as usize;
                    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
                };
                Scenario::DelaySweep {
                    axis,
                    gain,
                    phis,
                    repeats: r.uint_or("repeats", 10, &mut errs) as usize,
                    length: r.quantity_or("length", Dimension::Time, 20e-3, &mut errs),
                    warmup: r.quantity_or("warmup", Dimension::Time, 2e-3, &mut errs),
                }
            }
            Some(3) => Scenario::PressureSweep {
                run: run_settings(&mut r, &mut errs),
                pressures: r.quantity_list("pressures", Dimension::Pressure, &mut errs),
                repeats: r.uint_or("repeats", 4, &mut errs) as usize,
            },
            Some(4) => Scenario::Quantum {
                runs: r.uint_or("runs", 30, &mut errs) as usize,
                warmup_tau: r.number_or("warmup_tau", 20.0, &mut errs),
                span_tau: r.number_or("span_tau", 200.0, &mut errs),
            },
            Some(5) => {
                let mut run = run_settings(&mut r, &mut errs);
                if run.record_stride == 0 {
                    run.record_stride = 8;
                }
                Scenario::Calibrate {
                    run,
                    electrode: r.electrode_or("electrode", 0, &mut errs),
                    axis: r.axis_or("axis", 0, &mut errs),
                    detuning: r.quantity_or("detuning", Dimension::AngularFrequency, -2.0 * std::f64::consts::PI * 2e3, &mut errs),
                    amplitudes: if r.table.contains_key("amplitudes") {
                        r.quantity_list("amplitudes", Dimension::Voltage, &mut errs)
                    } else {
                        vec![4.0, 8.0, 12.0, 16.0, 20.0]
                    },
                    segment_length: r.uint_or("segment_length", 32768, &mut errs) as usize,
                    drive_traces: r.uint_or("drive_traces", 20, &mut errs) as usize,
                }
            }
            Some(6) => Scenario::Design {
                pressures: if r.table.contains_key("pressures") {
                    r.quantity_list("pressures", Dimension::Pressure, &mut errs)
                } else {
                    Vec::new()
                },
            },
            _ => Scenario::Free {
                run: RunSettings::default(),
            },
        };
        r.finish(&mut errs);
        (sc, seed)
    };

    let output = {
        let mut r = Reader::new("output", out_t.as_ref().unwrap_or(&empty));
        let d = OutputSection::default();
        let dir = r.string("dir", &mut errs).map(PathBuf::from).unwrap_or(d.dir);
        let format = match r.choice("format", &["csv", "json"], &mut errs) {
            Some(1) => OutputFormat::Json,
            _ => OutputFormat::Csv,
        };
        r.finish(&mut errs);
        OutputSection { dir, format }
    };

    let cfg = ExperimentConfig {
        system,
        quantum,
        actuator,
        detector,
        controller,
        chain,
        scenario,
        seed,
        output,
    };
    validate(&cfg, &mut errs);
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError { issues: errs })
    }
}

fn run_settings(r: &mut Reader, errs: &mut Vec<String>) -> RunSettings {
    let d = RunSettings::default();
    let trace_length = r.quantity_or("trace_length", Dimension::Time, d.trace_length, errs);
    let duration = r.quantity_or("duration", Dimension::Time, trace_length, errs);
    let initial = match r.choice("initial", &["thermal", "zero"], errs) {
        Some(1) => InitialState::Zero,
        _ => InitialState::Thermal,
    };
    RunSettings {
        duration,
        trace_length,
        traces: r.uint_or("traces", d.traces as u64, errs) as usize,
        record_stride: r.uint_or("record_stride", d.record_stride as u64, errs) as usize,
        export_traces: r.uint_or("export_traces", d.export_traces as u64, errs) as usize,
        initial,
    }
}

fn validate(cfg: &ExperimentConfig, errs: &mut Vec<String>) {
    if let Err(e) = cfg.physical_system() {
        errs.push(format!("system: {e}"));
    }
    if let Err(e) = cfg.detector.validate() {
        errs.push(format!("detector: {e}"));
    }
    let check_run = |run: &RunSettings, errs: &mut Vec<String>| {
        if let Err(e) = cfg.sim_config(run).validate() {
            errs.push(format!("scenario/chain: {e}"));
        }
        if run.export_traces > 0 && run.record_stride == 0 {
            errs.push("scenario.export_traces: needs record_stride > 0".into());
        }
    };
    match &cfg.scenario {
        Scenario::Free { run } | Scenario::Loop { run } => check_run(run, errs),
        Scenario::PressureSweep { run, pressures, repeats } => {
            check_run(run, errs);
            if pressures.is_empty() {
                errs.push("scenario.pressures: at least one pressure".into());
            }
            if pressures.iter().any(|&p| !(p > 0.0)) || pressures.windows(2).any(|w| !(w[1] > w[0])) {
                errs.push("scenario.pressures: must be positive and strictly increasing".into());
            }
            if *repeats < 2 {
                errs.push("scenario.repeats: at least 2".into());
            }
        }
        Scenario::DelaySweep {
            phis, repeats, length, ..
        } => {
            let run = RunSettings::default();
            check_run(&run, errs);
            if phis.is_empty() || phis.windows(2).any(|w| !(w[1] > w[0])) {
                errs.push("scenario.phi: must be strictly increasing".into());
            }
            if *repeats < 2 {
                errs.push("scenario.repeats: at least 2".into());
            }
            if !(*length > 0.0) {
                errs.push("scenario.length: must be positive".into());
            }
        }
        Scenario::Quantum {
            runs,
            warmup_tau,
            span_tau,
        } => {
            if cfg.quantum.is_none() {
                errs.push("quantum: the quantum scenario needs a [quantum] section".into());
            }
            if *runs < 2 {
                errs.push("scenario.runs: at least 2".into());
            }
            if !(*warmup_tau >= 0.0 && *span_tau > 0.0) {
                errs.push("scenario.warmup_tau/span_tau: need warmup ≥ 0 and span > 0".into());
            }
        }
        Scenario::Calibrate {
            run,
            amplitudes,
            segment_length,
            drive_traces,
            ..
        } => {
            check_run(run, errs);
            if amplitudes.len() < 2 {
                errs.push("scenario.amplitudes: at least two drive amplitudes".into());
            }
            if *segment_length < 64 {
                errs.push("scenario.segment_length: at least 64 samples".into());
            }
            if *drive_traces < 1 {
                errs.push("scenario.drive_traces: at least 1".into());
            }
        }
        Scenario::Design { pressures } => {
            if pressures.iter().any(|&p| !(p > 0.0)) {
                errs.push("scenario.pressures: must be positive".into());
            }
        }
    }
}

struct Reader<'a> {
    path: &'static str,
    table: &'a Table,
    seen: BTreeSet<&'static str>,
}

impl<'a> Reader<'a> {
    fn new(path: &'static str, table: &'a Table) -> Self {
        Self {
            path,
            table,
            seen: BTreeSet::new(),
        }
    }

    fn key(&self, k: &str) -> String {
        if self.path.is_empty() {
            k.to_string()
        } else {
            format!("{}.{k}", self.path)
        }
    }

    fn get(&mut self, k: &'static str) -> Option<&'a Value> {
        self.seen.insert(k);
        self.table.get(k)
    }

    fn finish(self, errs: &mut Vec<String>) {
        for k in self.table.keys() {
            if !self.seen.contains(k.as_str()) {
                errs.push(format!("{}: unknown key", self.key(k)));
            }
        }
    }

    fn parse_q(&self, k: &str, v: &Value, dim: Dimension, errs: &mut Vec<String>) -> Option<f64> {
        match v {
            Value::String(s) => match parse_quantity(s, dim) {
                Ok(x) => Some(x),
                Err(e) => {
                    errs.push(format!("{}: {e}", self.key(k)));
                    None
                }
            },
            _ => {
                errs.push(format!("{}: needs a unit, e.g. \"1.0 {}\"", self.key(k), dim.si()));
                None
            }
        }
    }

    fn quantity(&mut self, k: &'static str, dim: Dimension, errs: &mut Vec<String>) -> Option<f64> {
        let v = self.get(k)?;
        self.parse_q(k, v, dim, errs)
    }

    fn required_quantity(&mut self, k: &'static str, dim: Dimension, errs: &mut Vec<String>) -> Option<f64> {
        if !self.table.contains_key(k) {
            self.seen.insert(k);
            errs.push(format!("{}: required", self.key(k)));
            return None;
        }
        self.quantity(k, dim, errs)
    }

    fn quantity_or(&mut self, k: &'static str, dim: Dimension, default: f64, errs: &mut Vec<String>) -> f64 {
        self.quantity(k, dim, errs).unwrap_or(default)
    }

    fn quantity_list(&mut self, k: &'static str, dim: Dimension, errs: &mut Vec<String>) -> Vec<f64> {
        match self.get(k) {
            Some(Value::Array(a)) => a.iter().filter_map(|v| self.parse_q(k, v, dim, errs)).collect(),
            Some(_) => {
                errs.push(format!("{}: expected an array", self.key(k)));
                Vec::new()
            }
            None => {
                errs.push(format!("{}: required", self.key(k)));
                Vec::new()
            }
        }
    }

    fn quantity3_or(&mut self, k: &'static str, dim: Dimension, default: [f64; 3], errs: &mut Vec<String>) -> [f64; 3] {
        match self.get(k) {
            None => default,
            Some(Value::Array(a)) if a.len() == 3 => {
                let v: Vec<f64> = a.iter().filter_map(|v| self.parse_q(k, v, dim, errs)).collect();
                v.try_into().unwrap_or(default)
            }
            Some(_) => {
                errs.push(format!("{}: expected three values", self.key(k)));
                default
            }
        }
    }

    fn number(&mut self, k: &'static str, errs: &mut Vec<String>) -> Option<f64> {
        match self.get(k)? {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            Value::String(_) => {
                errs.push(format!("{}: dimensionless, give a bare number", self.key(k)));
                None
            }
            _ => {
                errs.push(format!("{}: expected a number", self.key(k)));
                None
            }
        }
    }

    fn number_or(&mut self, k: &'static str, default: f64, errs: &mut Vec<String>) -> f64 {
        self.number(k, errs).unwrap_or(default)
    }

    fn number3_or(&mut self, k: &'static str, default: [f64; 3], errs: &mut Vec<String>) -> [f64; 3] {
        match self.get(k) {
            None => default,
            Some(v) => match num_array(v) {
                Some(a) if a.len() == 3 => [a[0], a[1], a[2]],
                _ => {
                    errs.push(format!("{}: expected three numbers", self.key(k)));
                    default
                }
            },
        }
    }

    fn matrix2_quantity(&mut self, k: &'static str, dim: Dimension, errs: &mut Vec<String>) -> Option<[[f64; 2]; 2]> {
        let v = self.get(k)?;
        let rows = match v {
            Value::Array(rows) if rows.len() == 2 => rows,
            _ => {
                errs.push(format!("{}: expected a 2×2 array", self.key(k)));
                return None;
            }
        };
        let mut out = [[0.0; 2]; 2];
        for (i, row) in rows.iter().enumerate() {
            match row {
                Value::Array(r) if r.len() == 2 => {
                    for (j, e) in r.iter().enumerate() {
                        out[i][j] = self.parse_q(k, e, dim, errs)?;
                    }
                }
                _ => {
                    errs.push(format!("{}: expected a 2×2 array", self.key(k)));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn matrix2_number(&mut self, k: &'static str, errs: &mut Vec<String>) -> Option<[[f64; 2]; 2]> {
        let m = self.matrix_number(k, 2, errs)?;
        Some([[m[0][0], m[0][1]], [m[1][0], m[1][1]]])
    }

    fn matrix3_number(&mut self, k: &'static str, errs: &mut Vec<String>) -> Option<[[f64; 3]; 3]> {
        let m = self.matrix_number(k, 3, errs)?;
        Some([0, 1, 2].map(|i| [m[i][0], m[i][1], m[i][2]]))
    }

    fn matrix_number(&mut self, k: &'static str, n: usize, errs: &mut Vec<String>) -> Option<Vec<Vec<f64>>> {
        let v = self.get(k)?;
        let parsed = match v {
            Value::Array(rows) if rows.len() == n => rows
                .iter()
                .map(|r| num_array(r).filter(|a| a.len() == n))
                .collect::<Option<Vec<_>>>(),
            _ => None,
        };
        if parsed.is_none() {
            errs.push(format!("{}: expected a {n}×{n} array of numbers", self.key(k)));
        }
        parsed
    }

    fn uint_or(&mut self, k: &'static str, default: u64, errs: &mut Vec<String>) -> u64 {
        match self.get(k) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => {
                errs.push(format!("{}: expected a non-negative integer", self.key(k)));
                default
            }
        }
    }

    fn bool_or(&mut self, k: &'static str, default: bool, errs: &mut Vec<String>) -> bool {
        match self.get(k) {
            None => default,
            Some(Value::Boolean(b)) => *b,
            Some(_) => {
                errs.push(format!("{}: expected true or false", self.key(k)));
                default
            }
        }
    }

    fn string(&mut self, k: &'static str, errs: &mut Vec<String>) -> Option<String> {
        match self.get(k)? {
            Value::String(s) => Some(s.clone()),
            _ => {
                errs.push(format!("{}: expected a string", self.key(k)));
                None
            }
        }
    }

    fn choice(&mut self, k: &'static str, options: &[&str], errs: &mut Vec<String>) -> Option<usize> {
        let s = self.string(k, errs)?;
        let i = options.iter().position(|o| *o == s);
        if i.is_none() {
            errs.push(format!("{}: `{s}` is not one of {}", self.key(k), options.join(", ")));
        }
        i
    }

    fn axis_or(&mut self, k: &'static str, default: usize, errs: &mut Vec<String>) -> usize {
        self.choice(k, &["x", "y", "z"], errs).unwrap_or(default)
    }

    fn electrode_or(&mut self, k: &'static str, default: usize, errs: &mut Vec<String>) -> usize {
        self.choice(k, &["a", "b", "z"], errs).unwrap_or(default)
    }
}

fn num_array(v: &Value) -> Option<Vec<f64>> {
    match v {
        Value::Array(a) => a
            .iter()
            .map(|e| match e {
                Value::Float(f) => Some(*f),
                Value::Integer(i) => Some(*i as f64),
                _ => None,
            })
            .collect(),
        _ => None,
    }
}

fn int_array(v: &Value) -> Option<Vec<usize>> {
    match v {
        Value::Array(a) => a
            .iter()
            .map(|e| match e {
                Value::Integer(i) if *i >= 0 => Some(*i as usize),
                _ => None,
            })
            .collect(),
        _ => None,
    }
}

fn q(v: f64, dim: Dimension) -> Value {
    Value::String(format_quantity(v, dim))
}

fn q3(v: [f64; 3], dim: Dimension) -> Value {
    Value::Array(v.iter().map(|&x| q(x, dim)).collect())
}

fn num(v: f64) -> Value {
    Value::Float(v)
}

fn matrix<const N: usize>(m: &[[f64; N]; N], f: impl Fn(f64) -> Value) -> Value {
    Value::Array(m.iter().map(|r| Value::Array(r.iter().map(|&x| f(x)).collect())).collect())
}

const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];
const ELECTRODE_NAMES: [&str; 3] = ["a", "b", "z"];

impl ExperimentConfig {
    /// The effective configuration in SI units. Parsing it back gives an
    /// identical config.
    pub fn to_toml(&self) -> Table {
        let mut root = Table::new();
        let s = &self.system;
        let mut t = Table::new();
        t.insert("pressure".into(), q(s.pressure, Dimension::Pressure));
        t.insert("temperature".into(), q(s.temperature, Dimension::Temperature));
        t.insert("mass".into(), q(s.mass, Dimension::Mass));
        t.insert("radius".into(), q(s.radius, Dimension::Length));
        t.insert("density".into(), q(s.density, Dimension::Density));
        t.insert("gas_molar_mass".into(), q(s.gas_molar_mass, Dimension::MolarMass));
        t.insert("trap_frequencies".into(), q3(s.trap_omega, Dimension::AngularFrequency));
        t.insert("imprecision".into(), q3(s.imprecision, Dimension::DisplacementDensity));
        root.insert("system".into(), Value::Table(t));

        if let Some(qs) = &self.quantum {
            let mut t = Table::new();
            t.insert("efficiency".into(), Value::Array(qs.efficiency.iter().map(|&e| num(e)).collect()));
            t.insert("backaction_rate".into(), q(qs.backaction_rate, Dimension::Rate));
            root.insert("quantum".into(), Value::Table(t));
        }

        let mut t = Table::new();
        t.insert("c_nv".into(), matrix(&self.actuator.c_nv, |x| q(x, Dimension::ForcePerVolt)));
        t.insert("orientation".into(), matrix(&self.actuator.orientation, num));
        if let Some(z) = self.actuator.c_nv_z {
            t.insert("c_nv_z".into(), q(z, Dimension::ForcePerVolt));
        }
        root.insert("actuator".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("c_vm".into(), q3(self.detector.c_vm, Dimension::VoltsPerMeter));
        t.insert("c_vm_sigma".into(), q3(self.detector.sigma, Dimension::VoltsPerMeter));
        root.insert("detector".into(), Value::Table(t));

        let c = &self.controller;
        let mut t = Table::new();
        t.insert("ts".into(), q(c.ts, Dimension::Time));
        let layout = match c.layout {
            WeightLayout::Energy => "energy",
            WeightLayout::PositionBlock => "position-block",
        };
        t.insert("weights".into(), Value::String(layout.into()));
        let hold = match c.hold {
            InputHold::Rectangular => "rectangular",
            InputHold::Exact => "exact",
        };
        t.insert("hold".into(), Value::String(hold.into()));
        t.insert(
            "design_drag".into(),
            Value::String(if c.design_zero_drag { "zero" } else { "gas" }.into()),
        );
        t.insert("cold_damping_z".into(), Value::Boolean(c.cold_damping_z));
        match c.source {
            GainSource::Design => {
                t.insert("gains".into(), Value::String("design".into()));
            }
            GainSource::Digital => {
                t.insert("gains".into(), Value::String("digital".into()));
                t.insert("kp".into(), matrix(&c.digital.kp, num));
                t.insert("kd".into(), matrix(&c.digital.kd, num));
            }
        }
        t.insert("fixed_point_bits".into(), Value::Integer(c.word_bits as i64));
        root.insert("controller".into(), Value::Table(t));

        let ch = &self.chain;
        let mut t = Table::new();
        t.insert("dt_physics".into(), q(ch.dt_physics, Dimension::Time));
        t.insert("electronic_delay".into(), q(ch.electronic_delay, Dimension::Time));
        t.insert("amplifier_gain".into(), num(ch.amplifier_gain));
        if let Some(d) = ch.delays {
            t.insert("delays".into(), Value::Array(d.iter().map(|&n| Value::Integer(n as i64)).collect()));
        }
        t.insert("adc_bits".into(), Value::Integer(ch.adc_bits as i64));
        t.insert("adc_full_scale".into(), q(ch.adc_full_scale, Dimension::Voltage));
        t.insert("dc_block".into(), q(ch.filters.dc_block_hz, Dimension::Frequency));
        t.insert("notch_q_xy".into(), num(ch.filters.notch_q_xy));
        t.insert("notch_q_z".into(), num(ch.filters.notch_q_z));
        t.insert("energy_bound".into(), num(ch.energy_bound));
        root.insert("chain".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("kind".into(), Value::String(self.scenario.kind().into()));
        t.insert("seed".into(), Value::Integer(self.seed as i64));
        let run_into = |t: &mut Table, run: &RunSettings| {
            t.insert("duration".into(), q(run.duration, Dimension::Time));
            t.insert("trace_length".into(), q(run.trace_length, Dimension::Time));
            t.insert("traces".into(), Value::Integer(run.traces as i64));
            t.insert("record_stride".into(), Value::Integer(run.record_stride as i64));
            t.insert("export_traces".into(), Value::Integer(run.export_traces as i64));
            let init = match run.initial {
                InitialState::Zero => "zero",
                _ => "thermal",
            };
            t.insert("initial".into(), Value::String(init.into()));
        };
        let list = |v: &[f64], dim| Value::Array(v.iter().map(|&x| q(x, dim)).collect());
        match &self.scenario {
            Scenario::Free { run } | Scenario::Loop { run } => run_into(&mut t, run),
            Scenario::DelaySweep {
                axis,
                gain,
                phis,
                repeats,
                length,
                warmup,
            } => {
                t.insert("axis".into(), Value::String(AXIS_NAMES[*axis].into()));
                t.insert("gain".into(), q(*gain, Dimension::Stiffness));
                t.insert("phi".into(), list(phis, Dimension::Angle));
                t.insert("repeats".into(), Value::Integer(*repeats as i64));
                t.insert("length".into(), q(*length, Dimension::Time));
                t.insert("warmup".into(), q(*warmup, Dimension::Time));
            }
            Scenario::PressureSweep { run, pressures, repeats } => {
                run_into(&mut t, run);
                t.insert("pressures".into(), list(pressures, Dimension::Pressure));
                t.insert("repeats".into(), Value::Integer(*repeats as i64));
            }
            Scenario::Quantum {
                runs,
                warmup_tau,
                span_tau,
            } => {
                t.insert("runs".into(), Value::Integer(*runs as i64));
                t.insert("warmup_tau".into(), num(*warmup_tau));
                t.insert("span_tau".into(), num(*span_tau));
            }
            Scenario::Calibrate {
                run,
                electrode,
                axis,
                detuning,
                amplitudes,
                segment_length,
                drive_traces,
            } => {
                run_into(&mut t, run);
                t.insert("electrode".into(), Value::String(ELECTRODE_NAMES[*electrode].into()));
                t.insert("axis".into(), Value::String(AXIS_NAMES[*axis].into()));
                t.insert("detuning".into(), q(*detuning, Dimension::AngularFrequency));
                t.insert("amplitudes".into(), list(amplitudes, Dimension::Voltage));
                t.insert("segment_length".into(), Value::Integer(*segment_length as i64));
                t.insert("drive_traces".into(), Value::Integer(*drive_traces as i64));
            }
            Scenario::Design { pressures } => {
                t.insert("pressures".into(), list(pressures, Dimension::Pressure));
            }
        }
        root.insert("scenario".into(), Value::Table(t));

        let mut t = Table::new();
        t.insert("dir".into(), Value::String(self.output.dir.display().to_string()));
        t.insert("format".into(), Value::String(self.output.format.name().into()));
        root.insert("output".into(), Value::Table(t));
        root
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&self.to_toml()).expect("config tables serialize")
    }
}

//! Physical parameters and the continuous-time state-space model.
//!
//! The state is `x = [x, y, z, ẋ, ẏ, ż]ᵀ`, the input `u` is a force-like
//! vector expressed in units of the reference electrode (see
//! [`actuator_matrix`]) and the measurement picks out the three positions.

use core::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use crate::constants::{AIR_MOLAR_MASS, AIR_VISCOSITY, HBAR, K_B, MBAR, N_A};
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::linalg::Mat;

pub type Vec3 = [f64; 3];

/// Number of state variables.
pub const NX: usize = 6;
/// Number of inputs / measured outputs.
pub const NU: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParticleParams {
    /// m
    pub radius: f64,
    /// kg/m³
    pub density: f64,
    /// kg
    pub mass: f64,
    /// Net charge in elementary charges. Informational only.
    pub charge_count: i64,
}

impl ParticleParams {
    /// Mass derived from a homogeneous sphere.
    pub fn from_radius_density(radius: f64, density: f64) -> Result<Self> {
        let mass = density * 4.0 / 3.0 * PI * radius * radius * radius;
        Self::new(radius, density, Some(mass), 0)
    }

    pub fn new(radius: f64, density: f64, mass: Option<f64>, charge_count: i64) -> Result<Self> {
        ensure_finite("radius", radius)?;
        ensure_finite("density", density)?;
        if radius <= 0.0 {
            return Err(invalid("radius", "must be positive"));
        }
        let mass = match mass {
            Some(m) => ensure_finite("mass", m)?,
            None => {
                if density <= 0.0 {
                    return Err(invalid("density", "needed to derive the mass"));
                }
                density * 4.0 / 3.0 * PI * radius * radius * radius
            }
        };
        if mass <= 0.0 {
            return Err(invalid("mass", "must be positive"));
        }
        Ok(Self {
            radius,
            density,
            mass,
            charge_count,
        })
    }

    /// 143 nm diameter silica sphere with the quoted mass of 3.37 fg.
    pub fn reference() -> Self {
        Self {
            radius: 71.5e-9,
            density: 2200.0,
            mass: 3.37e-18,
            charge_count: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapParams {
    /// Angular frequencies Ω_x, Ω_y, Ω_z in rad/s.
    pub omega: Vec3,
}

impl TrapParams {
    pub fn new(omega: Vec3) -> Result<Self> {
        for w in omega {
            ensure_finite("omega", w)?;
            if w <= 0.0 {
                return Err(invalid("omega", "trap frequencies must be positive"));
            }
        }
        Ok(Self { omega })
    }

    pub fn from_hz(f: Vec3) -> Result<Self> {
        Self::new([2.0 * PI * f[0], 2.0 * PI * f[1], 2.0 * PI * f[2]])
    }

    /// 96.24, 101.49 and 31.52 kHz.
    pub fn reference() -> Self {
        Self::from_hz([96.24e3, 101.49e3, 31.52e3]).expect("positive")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GasEnvironment {
    /// Pa
    pub pressure: f64,
    /// K
    pub temperature: f64,
    /// kg/mol
    pub gas_molar_mass: f64,
    /// Pa·s
    pub gas_viscosity: f64,
}

impl GasEnvironment {
    pub fn new(pressure: f64, temperature: f64, gas_molar_mass: f64, gas_viscosity: f64) -> Result<Self> {
        ensure_finite("pressure", pressure)?;
        ensure_finite("temperature", temperature)?;
        ensure_finite("gas_molar_mass", gas_molar_mass)?;
        ensure_finite("gas_viscosity", gas_viscosity)?;
        if pressure < 0.0 {
            return Err(invalid("pressure", "must be non-negative"));
        }
        if temperature <= 0.0 {
            return Err(invalid("temperature", "must be positive"));
        }
        if gas_molar_mass <= 0.0 {
            return Err(invalid("gas_molar_mass", "must be positive"));
        }
        Ok(Self {
            pressure,
            temperature,
            gas_molar_mass,
            gas_viscosity,
        })
    }

    /// Air at the given pressure (mbar) and temperature (K).
    pub fn air_mbar(pressure_mbar: f64, temperature: f64) -> Result<Self> {
        Self::new(pressure_mbar * MBAR, temperature, AIR_MOLAR_MASS, AIR_VISCOSITY)
    }

    pub fn with_pressure(&self, pressure: f64) -> Result<Self> {
        Self::new(pressure, self.temperature, self.gas_molar_mass, self.gas_viscosity)
    }

    /// Mean thermal speed of the gas molecules, √(8 k_B T / (π m_gas)).
    pub fn mean_speed(&self) -> f64 {
        let m_gas = self.gas_molar_mass / N_A;
        libm::sqrt(8.0 * K_B * self.temperature / (PI * m_gas))
    }
}

/// Detection and force-noise parameters.
///
/// `measurement_sigma` is the white-noise intensity of the position
/// imprecision: `⟨ζ(t)ζ(t')⟩ = σ² δ(t − t')`, so σ² is in m²/Hz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub measurement_sigma: Vec3,
    pub detection_efficiency: Vec3,
    pub quantum_enabled: bool,
    /// White force-noise intensity from measurement backaction, N²/Hz, in
    /// the same `⟨F F⟩ = S δ` convention as the thermal force.
    pub backaction_force_psd: Vec3,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self::classical([0.0; 3])
    }
}

impl NoiseParams {
    pub fn classical(measurement_sigma: Vec3) -> Self {
        Self {
            measurement_sigma,
            detection_efficiency: [1.0; 3],
            quantum_enabled: false,
            backaction_force_psd: [0.0; 3],
        }
    }

    /// Position imprecision of the room-temperature detection, m/√Hz per
    /// axis.
    pub const LAB_IMPRECISION: Vec3 = [1.0e-11, 1.0e-11, 1.45e-10];

    pub fn lab() -> Self {
        Self::classical(Self::LAB_IMPRECISION)
    }

    /// Quantum-limited detection: the imprecision is derived from the
    /// backaction through `S_imp · S_ba = ħ² / (4η)`.
    pub fn quantum_limited(detection_efficiency: Vec3, backaction_force_psd: Vec3) -> Result<Self> {
        let mut sigma = [0.0; 3];
        for i in 0..3 {
            let eta = detection_efficiency[i];
            let sba = backaction_force_psd[i];
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(invalid("detection_efficiency", "must lie in (0, 1]"));
            }
            if !(sba > 0.0) {
                return Err(invalid("backaction_force_psd", "must be positive"));
            }
            sigma[i] = libm::sqrt(HBAR * HBAR / (4.0 * eta * sba));
        }
        let out = Self {
            measurement_sigma: sigma,
            detection_efficiency,
            quantum_enabled: true,
            backaction_force_psd,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            let s = ensure_finite("measurement_sigma", self.measurement_sigma[i])?;
            let eta = ensure_finite("detection_efficiency", self.detection_efficiency[i])?;
            let sba = ensure_finite("backaction_force_psd", self.backaction_force_psd[i])?;
            if s < 0.0 {
                return Err(invalid("measurement_sigma", "must be non-negative"));
            }
            if !(0.0..=1.0).contains(&eta) {
                return Err(invalid("detection_efficiency", "must lie in [0, 1]"));
            }
            if sba < 0.0 {
                return Err(invalid("backaction_force_psd", "must be non-negative"));
            }
        }
        if self.quantum_enabled {
            self.check_quantum_closure(1e-6)?;
        }
        Ok(())
    }

    /// Checks `σ_i² · S_ba,i = ħ²/(4η_i)` on every axis with `η_i > 0`.
    pub fn check_quantum_closure(&self, rel_tol: f64) -> Result<()> {
        for i in 0..3 {
            let eta = self.detection_efficiency[i];
            if eta <= 0.0 {
                continue;
            }
            let product = self.measurement_sigma[i] * self.measurement_sigma[i] * self.backaction_force_psd[i];
            let expected = HBAR * HBAR / (4.0 * eta);
            if !((product - expected).abs() <= rel_tol * expected) {
                return Err(Error::QuantumClosure {
                    axis: i,
                    product,
                    expected,
                });
            }
        }
        Ok(())
    }
}

/// Electrode transduction coefficients.
///
/// `c_nv[i][j]` is the force along axis `i` per volt on electrode pair `j`
/// (N/V), for `i, j ∈ {x, y}`. `orientation` carries the sign of each
/// entry relative to the detection frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuatorCalibration {
    pub c_nv: [[f64; 2]; 2],
    pub c_nv_z: Option<f64>,
    /// Force scale on z (kg⁻¹ per unit input) used when `c_nv_z` is absent.
    /// The z electrode could not be calibrated, so this is a free parameter;
    /// the default `1/m` gives z the same input scale as the reference
    /// electrode.
    pub b_z_fallback: Option<f64>,
    pub orientation: [[f64; 2]; 2],
}

impl ActuatorCalibration {
    /// C_NV = (2.83, 2.18, 2.21, 2.36)×10⁻¹⁶ N/V with the x′ axis reversed.
    pub fn reference() -> Self {
        Self {
            c_nv: [[2.83e-16, 2.18e-16], [2.21e-16, 2.36e-16]],
            c_nv_z: None,
            b_z_fallback: None,
            orientation: [[-1.0, 1.0], [1.0, 1.0]],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for row in &self.c_nv {
            for &c in row {
                ensure_finite("c_nv", c)?;
                if c <= 0.0 {
                    return Err(invalid("c_nv", "transduction magnitudes must be positive"));
                }
            }
        }
        if let Some(cz) = self.c_nv_z {
            ensure_finite("c_nv_z", cz)?;
            if cz <= 0.0 {
                return Err(invalid("c_nv_z", "must be positive"));
            }
        }
        if let Some(bz) = self.b_z_fallback {
            ensure_finite("b_z", bz)?;
            if bz <= 0.0 {
                return Err(invalid("b_z", "must be positive"));
            }
        }
        for row in &self.orientation {
            for &s in row {
                if s != 1.0 && s != -1.0 {
                    return Err(invalid("orientation", "signs must be ±1"));
                }
            }
        }
        Ok(())
    }

    /// Coefficient every input channel is normalized by (C_NV^{xx}, the
    /// largest one in the reference calibration).
    pub fn reference_coefficient(&self) -> f64 {
        self.c_nv[0][0]
    }

    /// Force per volt on z, N/V.
    pub fn z_coefficient(&self, particle: &ParticleParams) -> f64 {
        match self.c_nv_z {
            Some(c) => c,
            None => self.b_z(particle) * particle.mass * self.reference_coefficient(),
        }
    }

    fn b_z(&self, particle: &ParticleParams) -> f64 {
        match (self.c_nv_z, self.b_z_fallback) {
            (Some(c), _) => c / self.reference_coefficient() / particle.mass,
            (None, Some(b)) => b,
            (None, None) => 1.0 / particle.mass,
        }
    }
}

/// γ_m = 15.8 r² p / (m v̄), the free-molecular drag rate in s⁻¹.
pub fn drag_coefficient(env: &GasEnvironment, particle: &ParticleParams) -> Result<f64> {
    ensure_finite("pressure", env.pressure)?;
    ensure_finite("temperature", env.temperature)?;
    ensure_finite("radius", particle.radius)?;
    ensure_finite("mass", particle.mass)?;
    if env.pressure < 0.0 {
        return Err(invalid("pressure", "must be non-negative"));
    }
    if particle.mass <= 0.0 || particle.radius <= 0.0 {
        return Err(invalid("particle", "radius and mass must be positive"));
    }
    if env.pressure == 0.0 {
        return Ok(0.0);
    }
    let r = particle.radius;
    Ok(15.8 * r * r * env.pressure / (particle.mass * env.mean_speed()))
}

/// `B_xyz = [[B_xy, 0], [0, b_z]]` with
/// `B_xy = (1/m)·[[−1, C^{xy}/C^{xx}], [C^{yx}/C^{xx}, C^{yy}/C^{xx}]]`
/// (signs from `calib.orientation`).
pub fn actuator_matrix(calib: &ActuatorCalibration, particle: &ParticleParams) -> Result<Matrix3<f64>> {
    calib.validate()?;
    if !(particle.mass > 0.0) {
        return Err(invalid("mass", "must be positive"));
    }
    let reference = calib.reference_coefficient();
    let inv_m = 1.0 / particle.mass;
    let mut b = Matrix3::zeros();
    for i in 0..2 {
        for j in 0..2 {
            b[(i, j)] = calib.orientation[i][j] * (calib.c_nv[i][j] / reference) * inv_m;
        }
    }
    b[(2, 2)] = calib.b_z(particle);
    Ok(b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    /// Intensity W of the white disturbance w(t): ⟨w(t) wᵀ(t')⟩ = W δ(t − t').
    pub process_noise_psd: Mat,
}

impl StateSpace {
    pub fn nx(&self) -> usize {
        self.a.nrows()
    }
}

/// Builds A, B, C and the thermal disturbance intensity.
pub fn build_state_space(
    trap: &TrapParams,
    gamma: f64,
    actuator: &ActuatorCalibration,
    particle: &ParticleParams,
    env: &GasEnvironment,
) -> Result<StateSpace> {
    ensure_finite("gamma", gamma)?;
    if gamma < 0.0 {
        return Err(invalid("gamma", "must be non-negative"));
    }
    TrapParams::new(trap.omega)?;
    let bxyz = actuator_matrix(actuator, particle)?;
    let mut a = Mat::zeros(NX, NX);
    for i in 0..3 {
        a[(i, 3 + i)] = 1.0;
        a[(3 + i, i)] = -trap.omega[i] * trap.omega[i];
        a[(3 + i, 3 + i)] = -gamma;
    }
    let mut b = Mat::zeros(NX, NU);
    for i in 0..3 {
        for j in 0..3 {
            b[(3 + i, j)] = bxyz[(i, j)];
        }
    }
    let mut c = Mat::zeros(NU, NX);
    for i in 0..3 {
        c[(i, i)] = 1.0;
    }
    let thermal = 2.0 * gamma * K_B * env.temperature / particle.mass;
    let mut w = Mat::zeros(NX, NX);
    for i in 0..3 {
        w[(3 + i, 3 + i)] = thermal;
    }
    Ok(StateSpace {
        a,
        b,
        c,
        process_noise_psd: w,
    })
}

/// Everything needed to simulate one trapped particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalSystem {
    pub particle: ParticleParams,
    pub trap: TrapParams,
    pub env: GasEnvironment,
    pub noise: NoiseParams,
    pub actuator: ActuatorCalibration,
}

impl PhysicalSystem {
    /// Reference particle and trap at the given pressure, 293 K, noiseless
    /// detection.
    pub fn reference(pressure_mbar: f64) -> Self {
        Self {
            particle: ParticleParams::reference(),
            trap: TrapParams::reference(),
            env: GasEnvironment::air_mbar(pressure_mbar, 293.0).expect("valid"),
            noise: NoiseParams::default(),
            actuator: ActuatorCalibration::reference(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ParticleParams::new(
            self.particle.radius,
            self.particle.density,
            Some(self.particle.mass),
            self.particle.charge_count,
        )?;
        TrapParams::new(self.trap.omega)?;
        GasEnvironment::new(
            self.env.pressure,
            self.env.temperature,
            self.env.gas_molar_mass,
            self.env.gas_viscosity,
        )?;
        self.noise.validate()?;
        self.actuator.validate()
    }

    pub fn gamma(&self) -> Result<f64> {
        drag_coefficient(&self.env, &self.particle)
    }

    pub fn with_pressure(&self, pressure: f64) -> Result<Self> {
        let mut out = *self;
        out.env = self.env.with_pressure(pressure)?;
        Ok(out)
    }

    pub fn state_space(&self) -> Result<StateSpace> {
        build_state_space(&self.trap, self.gamma()?, &self.actuator, &self.particle, &self.env)
    }

    /// Same as [`Self::state_space`] with the drag forced to `gamma`.
    pub fn state_space_with_gamma(&self, gamma: f64) -> Result<StateSpace> {
        build_state_space(&self.trap, gamma, &self.actuator, &self.particle, &self.env)
    }

    /// Disturbance intensity including measurement backaction when the
    /// quantum model is enabled.
    pub fn force_noise_intensity(&self) -> Result<Vector3<f64>> {
        let gamma = self.gamma()?;
        let thermal = 2.0 * self.particle.mass * gamma * K_B * self.env.temperature;
        let mut out = Vector3::repeat(thermal);
        if self.noise.quantum_enabled {
            for i in 0..3 {
                out[i] += self.noise.backaction_force_psd[i];
            }
        }
        Ok(out)
    }

    /// Full state-space model with backaction folded into the disturbance.
    pub fn plant_model(&self) -> Result<StateSpace> {
        let mut ss = self.state_space()?;
        let f = self.force_noise_intensity()?;
        let m2 = self.particle.mass * self.particle.mass;
        for i in 0..3 {
            ss.process_noise_psd[(3 + i, 3 + i)] = f[i] / m2;
        }
        Ok(ss)
    }

    /// Matrix mapping electrode voltages (V_a, V_b, V_z) to force (N):
    /// `m · C_NV^{xx} · B_xyz`.
    pub fn force_per_volt(&self) -> Result<Matrix3<f64>> {
        let b = actuator_matrix(&self.actuator, &self.particle)?;
        Ok(b * (self.particle.mass * self.actuator.reference_coefficient()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_inputs() -> (TrapParams, ActuatorCalibration, ParticleParams, GasEnvironment) {
        (
            TrapParams::reference(),
            ActuatorCalibration::reference(),
            ParticleParams::reference(),
            GasEnvironment::air_mbar(1.2, 293.0).unwrap(),
        )
    }

    #[test]
    fn vacuum_has_no_drag() {
        let env = GasEnvironment::air_mbar(0.0, 293.0).unwrap();
        assert_eq!(drag_coefficient(&env, &ParticleParams::reference()).unwrap(), 0.0);
    }

    #[test]
    fn drag_matches_hand_evaluation() {
        // v̄ = sqrt(8 kB T / (π M/N_A)) with T = 293 K, M = 28.97 g/mol
        let m_gas = 28.97e-3 / 6.022_140_76e23;
        let vbar = (8.0 * 1.380_649e-23 * 293.0 / (PI * m_gas)).sqrt();
        let expected = 15.8 * 71.5e-9f64.powi(2) * 120.0 / (3.37e-18 * vbar);
        let (_, _, p, env) = reference_inputs();
        let g = drag_coefficient(&env, &p).unwrap();
        assert!((g - expected).abs() / expected < 1e-12);
        assert!(g > 1e3 && g < 1e4, "γ = {g}");
    }

    #[test]
    fn drag_is_linear_in_pressure() {
        let p = ParticleParams::reference();
        let g1 = drag_coefficient(&GasEnvironment::air_mbar(0.37, 293.0).unwrap(), &p).unwrap();
        let g2 = drag_coefficient(&GasEnvironment::air_mbar(0.74, 293.0).unwrap(), &p).unwrap();
        assert!((g2 / g1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn drag_rejects_non_finite() {
        let mut env = GasEnvironment::air_mbar(1.0, 293.0).unwrap();
        env.pressure = f64::NAN;
        assert!(drag_coefficient(&env, &ParticleParams::reference()).is_err());
    }

    #[test]
    fn mass_from_density() {
        let p = ParticleParams::new(71.5e-9, 2200.0, None, 0).unwrap();
        let expected = 2200.0 * 4.0 / 3.0 * PI * 71.5e-9f64.powi(3);
        assert!((p.mass - expected).abs() < 1e-30);
        assert!(ParticleParams::new(-1.0, 2200.0, None, 0).is_err());
    }

    #[test]
    fn a_has_oscillator_blocks() {
        let (trap, act, p, env) = reference_inputs();
        let ss = build_state_space(&trap, 0.0, &act, &p, &env).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(ss.a[(i, j)], 0.0);
                assert_eq!(ss.a[(i, 3 + j)], if i == j { 1.0 } else { 0.0 });
                let w2 = trap.omega[i] * trap.omega[i];
                assert_eq!(ss.a[(3 + i, j)], if i == j { -w2 } else { 0.0 });
                assert_eq!(ss.a[(3 + i, 3 + j)], 0.0);
                assert_eq!(ss.b[(i, j)], 0.0);
            }
        }
        assert!((trap.omega[0] / (2.0 * PI) - 96.24e3).abs() < 1e-9);
    }

    #[test]
    fn no_gas_no_thermal_force() {
        let (trap, act, p, _) = reference_inputs();
        let env = GasEnvironment::air_mbar(0.0, 293.0).unwrap();
        let ss = build_state_space(&trap, 0.0, &act, &p, &env).unwrap();
        assert!(ss.process_noise_psd.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn damped_eigenvalues_have_real_part_minus_half_gamma() {
        let (trap, act, p, env) = reference_inputs();
        let gamma = 5.0e3;
        let ss = build_state_space(&trap, gamma, &act, &p, &env).unwrap();
        let ev = crate::linalg::eigenvalues(&ss.a);
        assert_eq!(ev.len(), 6);
        for (re, im) in ev {
            assert!((re + gamma / 2.0).abs() < 1e-6 * gamma, "re = {re}");
            assert!(im.abs() > 1e5);
        }
    }

    #[test]
    fn output_matrix_selects_positions_and_cb_vanishes() {
        let (trap, act, p, env) = reference_inputs();
        let ss = build_state_space(&trap, 10.0, &act, &p, &env).unwrap();
        let cb = &ss.c * &ss.b;
        assert!(cb.iter().all(|&v| v == 0.0));
        for i in 0..3 {
            assert_eq!(ss.c[(i, i)], 1.0);
        }
    }

    #[test]
    fn actuator_matrix_reference_values() {
        let (_, act, p, _) = reference_inputs();
        let b = actuator_matrix(&act, &p).unwrap();
        let m = p.mass;
        assert!((b[(0, 0)] + 1.0 / m).abs() < 1e-12 / m);
        assert!((b[(0, 1)] - (2.18 / 2.83) / m).abs() < 1e-12 / m);
        assert!((b[(1, 0)] - (2.21 / 2.83) / m).abs() < 1e-12 / m);
        assert!((b[(1, 1)] - (2.36 / 2.83) / m).abs() < 1e-12 / m);
        assert_eq!(b[(0, 2)], 0.0);
        assert_eq!(b[(2, 0)], 0.0);
    }

    #[test]
    fn decoupled_electrodes() {
        let mut act = ActuatorCalibration::reference();
        act.c_nv = [[2.0e-16, 1e-300], [1e-300, 2.0e-16]];
        let p = ParticleParams::reference();
        let b = actuator_matrix(&act, &p).unwrap();
        let m = p.mass;
        assert!((b[(0, 0)] * m + 1.0).abs() < 1e-15);
        assert!((b[(1, 1)] * m - 1.0).abs() < 1e-15);
        assert!(b[(0, 1)].abs() * m < 1e-200);
    }

    #[test]
    fn actuator_is_scale_invariant() {
        let act = ActuatorCalibration::reference();
        let mut scaled = act;
        for row in scaled.c_nv.iter_mut() {
            for c in row.iter_mut() {
                *c *= 4.0;
            }
        }
        let p = ParticleParams::reference();
        // Power-of-two rescaling is exact in floating point.
        assert_eq!(actuator_matrix(&act, &p).unwrap(), actuator_matrix(&scaled, &p).unwrap());
    }

    #[test]
    fn z_scale_falls_back_to_configuration() {
        let p = ParticleParams::reference();
        let mut act = ActuatorCalibration::reference();
        assert_eq!(actuator_matrix(&act, &p).unwrap()[(2, 2)], 1.0 / p.mass);
        act.b_z_fallback = Some(0.25 / p.mass);
        assert_eq!(actuator_matrix(&act, &p).unwrap()[(2, 2)], 0.25 / p.mass);
        act.c_nv_z = Some(2.83e-16 / 2.0);
        let bz = actuator_matrix(&act, &p).unwrap()[(2, 2)];
        assert!((bz * p.mass - 0.5).abs() < 1e-15);
    }

    #[test]
    fn quantum_closure() {
        let n = NoiseParams::quantum_limited([0.1, 0.1, 0.3], [1e-42, 1e-42, 7e-43]).unwrap();
        n.check_quantum_closure(1e-12).unwrap();
        let mut bad = n;
        bad.measurement_sigma[2] *= 0.5;
        assert!(matches!(bad.validate(), Err(Error::QuantumClosure { axis: 2, .. })));
    }

    #[test]
    fn energy_is_conserved_without_damping() {
        // exp(A t) of an undamped axis preserves Ω²x² + ẋ².
        let trap = TrapParams::reference();
        let (_, act, p, env) = reference_inputs();
        let ss = build_state_space(&trap, 0.0, &act, &p, &env).unwrap();
        let e = crate::linalg::expm_series(&ss.a, 3.7e-6, 1e-16).unwrap();
        let x0 = nalgebra::DVector::from_vec(alloc::vec![1e-9, -2e-9, 0.5e-9, 1e-4, 3e-4, -2e-4]);
        let x1 = &e * &x0;
        for i in 0..3 {
            let w2 = trap.omega[i] * trap.omega[i];
            let e0 = w2 * x0[i] * x0[i] + x0[3 + i] * x0[3 + i];
            let e1 = w2 * x1[i] * x1[i] + x1[3 + i] * x1[3 + i];
            assert!((e1 / e0 - 1.0).abs() < 1e-12);
        }
    }
}

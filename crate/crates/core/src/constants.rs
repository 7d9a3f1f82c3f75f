//! Physical constants (CODATA 2018 exact values where defined).

/// Boltzmann constant, J/K.
pub const K_B: f64 = 1.380_649e-23;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Avogadro constant, 1/mol.
pub const N_A: f64 = 6.022_140_76e23;
/// Molar mass of dry air, kg/mol.
pub const AIR_MOLAR_MASS: f64 = 28.97e-3;
/// Dynamic viscosity of air at room temperature, Pa·s.
pub const AIR_VISCOSITY: f64 = 1.81e-5;
/// 1 mbar in Pa.
pub const MBAR: f64 = 100.0;

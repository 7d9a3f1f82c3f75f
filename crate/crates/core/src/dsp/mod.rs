//! Digital signal chain and spectral analysis.

mod biquad;
mod delay;
mod spectrum;

pub use biquad::{biquad_process, design_dc_block, design_notch, Biquad, BiquadCascade, BiquadCoeffs};
pub use delay::DelayLine;
pub use spectrum::{
    effective_temperature, effective_temperature_from_moments, fit_lorentzian, occupancy, occupancy_temperature,
    FitOptions, Lorentzian, LorentzianFit, LorentzianGuess, PsdConvention, PsdEstimate, PsdUnits, TemperatureMode,
};

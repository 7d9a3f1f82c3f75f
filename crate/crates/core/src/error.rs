use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value in `{0}`")]
    NonFinite(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("matrix series did not converge after {iterations} terms (last term norm {last_term_norm:e})")]
    SeriesNotConverged { iterations: usize, last_term_norm: f64 },

    #[error("pair is not stabilizable: {0}")]
    NotStabilizable(String),

    #[error("pair is not detectable: {0}")]
    NotDetectable(String),

    #[error("Riccati iteration diverged; residual history {residuals:?}")]
    RiccatiDiverged { residuals: Vec<f64> },

    #[error("gain mask destabilizes the loop; unstable eigenvalues {eigenvalues:?}")]
    UnstableAfterMask { eigenvalues: Vec<(f64, f64)> },

    #[error("frequency {frequency} Hz is not below Nyquist ({nyquist} Hz)")]
    AboveNyquist { frequency: f64, nyquist: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("fit did not converge (final residual {residual:e})")]
    FitFailed { residual: f64 },

    #[error("PSD is in detector volts; a calibration factor is required")]
    UncalibratedPsd,

    #[error("missing calibration: {0}")]
    MissingCalibration(&'static str),

    #[error("fixed-point overflow for {entry}: |{value}| exceeds {max}")]
    FixedPointOverflow { entry: String, value: f64, max: f64 },

    #[error("closed loop unstable at t = {time:e} s (energy {energy_ratio:e} × k_B T)")]
    Instability { time: f64, energy_ratio: f64 },

    #[error("phase {phi} rad is below the electronic minimum {min} rad")]
    PhaseBelowElectronicDelay { phi: f64, min: f64 },

    #[error("quantum-limit closure violated on axis {axis}: S_imp·S_ba = {product:e}, expected ħ²/(4η) = {expected:e}")]
    QuantumClosure { axis: usize, product: f64, expected: f64 },

    #[error("drive peak SNR {snr:.2} below threshold {threshold:.2}; increase the measurement duration")]
    LowSnr { snr: f64, threshold: f64 },
}

pub(crate) fn ensure_finite(name: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(name))
    }
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

//! Unit-suffixed quantities such as `"96.24 kHz"` or `"1.2 mbar"`.

use std::f64::consts::PI;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    /// Stored in rad/s; `Hz`-type suffixes are multiplied by 2π.
    AngularFrequency,
    /// Stored in Hz.
    Frequency,
    Rate,
    Pressure,
    Temperature,
    Time,
    Mass,
    Length,
    Density,
    MolarMass,
    Stiffness,
    ForcePerVolt,
    VoltsPerMeter,
    Voltage,
    DisplacementDensity,
    Angle,
}

impl Dimension {
    /// Suffix used when echoing a value in SI.
    pub fn si(self) -> &'static str {
        match self {
            Dimension::AngularFrequency => "rad/s",
            Dimension::Frequency => "Hz",
            Dimension::Rate => "1/s",
            Dimension::Pressure => "Pa",
            Dimension::Temperature => "K",
            Dimension::Time => "s",
            Dimension::Mass => "kg",
            Dimension::Length => "m",
            Dimension::Density => "kg/m^3",
            Dimension::MolarMass => "kg/mol",
            Dimension::Stiffness => "N/m",
            Dimension::ForcePerVolt => "N/V",
            Dimension::VoltsPerMeter => "V/m",
            Dimension::Voltage => "V",
            Dimension::DisplacementDensity => "m/rtHz",
            Dimension::Angle => "rad",
        }
    }

    fn factor(self, unit: &str) -> Option<f64> {
        use Dimension::*;
        let hz = |u: &str| match u {
            "Hz" => Some(1.0),
            "kHz" => Some(1e3),
            "MHz" => Some(1e6),
            _ => None,
        };
        let f = match (self, unit) {
            (AngularFrequency, "rad/s") => 1.0,
            (AngularFrequency, u) => 2.0 * PI * hz(u)?,
            (Frequency, u) => hz(u)?,
            (Rate, "1/s" | "s^-1") => 1.0,
            (Pressure, "Pa") => 1.0,
            (Pressure, "mbar" | "hPa") => 100.0,
            (Pressure, "bar") => 1e5,
            (Temperature, "K") => 1.0,
            (Temperature, "mK") => 1e-3,
            (Temperature, "uK" | "µK") => 1e-6,
            (Time, "s") => 1.0,
            (Time, "ms") => 1e-3,
            (Time, "us" | "µs") => 1e-6,
            (Time, "ns") => 1e-9,
            (Time, "ps") => 1e-12,
            (Mass, "kg") => 1.0,
            (Mass, "g") => 1e-3,
            (Mass, "fg") => 1e-18,
            (Mass, "ag") => 1e-21,
            (Length, "m") => 1.0,
            (Length, "mm") => 1e-3,
            (Length, "um" | "µm") => 1e-6,
            (Length, "nm") => 1e-9,
            (Density, "kg/m^3" | "kg/m3") => 1.0,
            (Density, "g/cm^3" | "g/cm3") => 1e3,
            (MolarMass, "kg/mol") => 1.0,
            (MolarMass, "g/mol") => 1e-3,
            (Stiffness, "N/m") => 1.0,
            (Stiffness, "pN/m") => 1e-12,
            (ForcePerVolt, "N/V") => 1.0,
            (VoltsPerMeter, "V/m") => 1.0,
            (VoltsPerMeter, "V/nm") => 1e9,
            (Voltage, "V") => 1.0,
            (Voltage, "mV") => 1e-3,
            (DisplacementDensity, "m/rtHz" | "m/sqrt(Hz)") => 1.0,
            (DisplacementDensity, "pm/rtHz" | "pm/sqrt(Hz)") => 1e-12,
            (Angle, "rad") => 1.0,
            (Angle, "deg") => PI / 180.0,
            _ => return None,
        };
        Some(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnitError {
    Malformed(String),
    Mismatch { unit: String, expected: Dimension },
}

impl fmt::Display for UnitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitError::Malformed(s) => write!(f, "cannot read `{s}` as a number followed by a unit"),
            UnitError::Mismatch { unit, expected } => {
                write!(f, "unit `{unit}` is not a {expected:?} unit (e.g. `{}`)", expected.si())
            }
        }
    }
}

/// Parses `"<number> <unit>"` (the space is optional) into SI.
pub fn parse_quantity(text: &str, dim: Dimension) -> Result<f64, UnitError> {
    let t = text.trim();
    let split = t
        .char_indices()
        .find(|(_, c)| !(c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-')))
        .map(|(i, _)| i)
        .unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let unit = unit.trim();
    let value: f64 = num.trim().parse().map_err(|_| UnitError::Malformed(text.into()))?;
    if unit.is_empty() {
        return Err(UnitError::Malformed(text.into()));
    }
    let factor = dim.factor(unit).ok_or_else(|| UnitError::Mismatch {
        unit: unit.into(),
        expected: dim,
    })?;
    Ok(value * factor)
}

/// SI echo that parses back to the same bits.
pub fn format_quantity(value: f64, dim: Dimension) -> String {
    format!("{value:e} {}", dim.si())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions() {
        let w = parse_quantity("96.24 kHz", Dimension::AngularFrequency).unwrap();
        assert!((w - 2.0 * PI * 96.24e3).abs() < 1e-6);
        assert_eq!(parse_quantity("1.2 mbar", Dimension::Pressure).unwrap(), 120.0);
        assert_eq!(parse_quantity("64ns", Dimension::Time).unwrap(), 64e-9);
        let t = parse_quantity("0.639 µs", Dimension::Time).unwrap();
        assert!((t / 0.639e-6 - 1.0).abs() < 4.0 * f64::EPSILON);
        assert_eq!(parse_quantity("3.37 fg", Dimension::Mass).unwrap(), 3.37e-18);
        assert_eq!(parse_quantity("-1e-4 mbar", Dimension::Pressure).unwrap(), -1e-2);
    }

    #[test]
    fn rejects_wrong_units() {
        assert!(matches!(parse_quantity("1.2 kHz", Dimension::Pressure), Err(UnitError::Mismatch { .. })));
        assert!(matches!(parse_quantity("1.2", Dimension::Pressure), Err(UnitError::Malformed(_))));
        assert!(matches!(parse_quantity("fast", Dimension::Time), Err(UnitError::Malformed(_))));
    }

    #[test]
    fn echo_round_trips() {
        for v in [6.0469e5 * 1.0000001, 1.0 / 3.0, 64e-9, 1e-300] {
            let s = format_quantity(v, Dimension::AngularFrequency);
            assert_eq!(parse_quantity(&s, Dimension::AngularFrequency).unwrap().to_bits(), v.to_bits());
        }
    }
}

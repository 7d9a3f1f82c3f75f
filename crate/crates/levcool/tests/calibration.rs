use std::f64::consts::PI;

use levcool::calibration::{calibrate_detector, calibrate_electrode, DetectorOptions, ElectrodeOptions};
use levcool::spectral::WelchConfig;
use levcool_core::calib::{DetectorCalibration, DriveConfig};
use levcool_core::model::PhysicalSystem;
use levcool_core::sim::{simulate_free_trace, Drive, SimConfig, Trace};
use proptest::prelude::*;

fn config(traces: usize, length: f64) -> SimConfig {
    SimConfig {
        seed: 77,
        n_traces: traces,
        duration: length,
        trace_length: length,
        record_stride: 8,
        ..SimConfig::default()
    }
}

fn free_traces(sys: &PhysicalSystem, cfg: &SimConfig, drive: Option<&Drive>) -> Vec<Trace> {
    (0..cfg.n_traces as u64).map(|i| simulate_free_trace(sys, cfg, i, drive).unwrap().0).collect()
}

fn detector_options() -> DetectorOptions {
    DetectorOptions {
        welch: WelchConfig {
            segment_length: 2048,
            ..WelchConfig::default()
        },
        ..DetectorOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn scaling_traces_scales_c_vm(alpha in 0.01f64..100.0) {
        let sys = PhysicalSystem::reference(1.2);
        let cfg = config(6, 10e-3);
        let traces = free_traces(&sys, &cfg, None);
        let mut scaled = traces.clone();
        for t in &mut scaled {
            for ch in &mut t.detector {
                ch.iter_mut().for_each(|v| *v *= alpha);
            }
        }
        let opts = detector_options();
        let a = calibrate_detector(&traces, &sys.env, &sys.particle, &sys.trap, &opts).unwrap();
        let b = calibrate_detector(&scaled, &sys.env, &sys.particle, &sys.trap, &opts).unwrap();
        for i in 0..3 {
            let r = b.calibration.c_vm[i] / (alpha * a.calibration.c_vm[i]);
            prop_assert!((r - 1.0).abs() < 1e-9, "axis {}: {}", i, r);
        }
    }

    #[test]
    fn drive_phase_does_not_change_force(phase in 0.0f64..(2.0 * PI)) {
        let sys = PhysicalSystem::reference(1.2);
        let cfg = config(4, 20e-3);
        let omega = sys.trap.omega[0] - 2.0 * PI * 2e3;
        let drive = |phase| Drive { electrode: 0, amplitude: 200.0, omega, phase };
        let dc = DriveConfig { electrode: 0, axis: 0, omega_dr: omega, amplitude: 200.0, duration: cfg.trace_length };
        let det = DetectorCalibration::reference();
        let opts = ElectrodeOptions::default();
        let f0 = calibrate_electrode(&free_traces(&sys, &cfg, Some(&drive(0.0))), &dc, &det, &sys, &opts).unwrap();
        let f1 = calibrate_electrode(&free_traces(&sys, &cfg, Some(&drive(phase))), &dc, &det, &sys, &opts).unwrap();
        prop_assert!((f1.force / f0.force - 1.0).abs() < 0.02, "{} vs {}", f1.force, f0.force);
        let truth = 200.0 * sys.force_per_volt().unwrap()[(0, 0)].abs();
        prop_assert!((f0.force / truth - 1.0).abs() < 0.05);
    }
}

#[test]
fn detector_round_trip_recovers_c_vm() {
    let sys = PhysicalSystem::reference(1.2);
    let cfg = config(40, 20e-3);
    let opts = DetectorOptions::default();
    let rep = calibrate_detector(&free_traces(&sys, &cfg, None), &sys.env, &sys.particle, &sys.trap, &opts).unwrap();
    let truth = DetectorCalibration::reference();
    for i in 0..3 {
        let r = rep.calibration.c_vm[i] / truth.c_vm[i];
        assert!((r - 1.0).abs() < 0.05, "axis {i}: {r}");
    }
    assert_eq!(rep.warnings.len(), 1, "{:?}", rep.warnings);
}

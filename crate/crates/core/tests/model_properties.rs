use levcool_core::constants::{AIR_MOLAR_MASS, AIR_VISCOSITY, MBAR};
use levcool_core::linalg::{expm_series, Mat};
use levcool_core::model::{actuator_matrix, build_state_space, ActuatorCalibration, GasEnvironment, ParticleParams, TrapParams};
use proptest::prelude::*;

fn calibration() -> impl Strategy<Value = ActuatorCalibration> {
    (prop::array::uniform4(0.5e-16f64..5e-16), prop::array::uniform4(prop::bool::ANY)).prop_map(|(c, s)| {
        let sign = |b: bool| if b { 1.0 } else { -1.0 };
        ActuatorCalibration {
            c_nv: [[c[0], c[1]], [c[2], c[3]]],
            c_nv_z: None,
            b_z_fallback: None,
            orientation: [[sign(s[0]), sign(s[1])], [sign(s[2]), sign(s[3])]],
        }
    })
}

fn trap() -> impl Strategy<Value = TrapParams> {
    prop::array::uniform3(2e4f64..2e5).prop_map(|f| TrapParams::from_hz(f).unwrap())
}

proptest! {
    #[test]
    fn positions_are_not_directly_forced(
        calib in calibration(),
        trap in trap(),
        p_mbar in 0.0f64..10.0,
        radius in 20e-9f64..200e-9,
    ) {
        let particle = ParticleParams::from_radius_density(radius, 1850.0).unwrap();
        let env = GasEnvironment::new(p_mbar * MBAR, 293.0, AIR_MOLAR_MASS, AIR_VISCOSITY).unwrap();
        let gamma = levcool_core::model::drag_coefficient(&env, &particle).unwrap();
        let ss = build_state_space(&trap, gamma, &calib, &particle, &env).unwrap();
        prop_assert!((&ss.c * &ss.b).iter().all(|&v| v == 0.0));
        let w = &ss.process_noise_psd;
        prop_assert!(w == &w.transpose());
        prop_assert!(w.clone().symmetric_eigen().eigenvalues.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn actuator_ignores_uniform_rescaling(calib in calibration(), scale in 1e-3f64..1e3) {
        let particle = ParticleParams::reference();
        // Powers of two keep every ratio bit-exact.
        let s = 2f64.powi(scale.log2().round() as i32);
        let mut scaled = calib;
        for row in scaled.c_nv.iter_mut() {
            for c in row.iter_mut() {
                *c *= s;
            }
        }
        prop_assert_eq!(actuator_matrix(&calib, &particle).unwrap(), actuator_matrix(&scaled, &particle).unwrap());
        let mut general = calib;
        for row in general.c_nv.iter_mut() {
            for c in row.iter_mut() {
                *c *= scale;
            }
        }
        let a = actuator_matrix(&calib, &particle).unwrap();
        let b = actuator_matrix(&general, &particle).unwrap();
        prop_assert!((a - b).amax() <= 4.0 * f64::EPSILON * a.amax());
    }

    #[test]
    fn undamped_flow_conserves_energy(
        trap in trap(),
        x0 in prop::array::uniform3(-1e-9f64..1e-9),
        v0 in prop::array::uniform3(-1e-4f64..1e-4),
        t in 1e-7f64..1e-4,
    ) {
        let particle = ParticleParams::reference();
        let env = GasEnvironment::new(0.0, 293.0, AIR_MOLAR_MASS, AIR_VISCOSITY).unwrap();
        let ss = build_state_space(&trap, 0.0, &ActuatorCalibration::reference(), &particle, &env).unwrap();
        let phi = expm_series(&ss.a, t, 1e-16).unwrap();
        let x = Mat::from_iterator(6, 1, x0.iter().chain(v0.iter()).copied());
        let y = &phi * &x;
        for i in 0..3 {
            let w2 = trap.omega[i] * trap.omega[i];
            let e0 = w2 * x[i] * x[i] + x[3 + i] * x[3 + i];
            let e1 = w2 * y[i] * y[i] + y[3 + i] * y[3 + i];
            prop_assert!((e1 - e0).abs() <= 1e-10 * e0.max(f64::MIN_POSITIVE));
        }
    }
}

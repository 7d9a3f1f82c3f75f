use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use levcool::config::parse_config_str;
use levcool::ensemble::{closed_loop_ensemble, delay_sweep};
use levcool::scenario::execute;
use levcool_core::calib::{digital_gains, DetectorCalibration, DigitalGains};
use levcool_core::constants::MBAR;
use levcool_core::dsp::{design_notch, BiquadCascade, DelayLine};
use levcool_core::linalg::Mat;
use levcool_core::model::{ActuatorCalibration, PhysicalSystem, TrapParams};
use levcool_core::riccati::{
    care_relative_residual, dare_relative_residual, design_controller, discretize, lqr_gain_discrete, solve_care,
    solve_care_matrices, solve_dare, solve_dare_matrices, CostWeights, DesignOptions, StructureMask, WeightLayout,
};
use levcool_core::sim::{delay_oracle, DelaySweepConfig, FeedbackChainConfig, SimConfig};
use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::TestRunner;
use serde_json::Value;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn scenario(toml: &str) -> Value {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse_config_str(toml).unwrap();
    cfg.output.dir = dir.path().join("out");
    execute(&cfg).unwrap().summary
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

fn equipartition() -> Verdict {
    let s = scenario(
        r#"
[system]
pressure = "1.2 mbar"
temperature = "293 K"
imprecision = ["0 m/rtHz", "0 m/rtHz", "0 m/rtHz"]

[scenario]
kind = "free"
traces = 100
trace_length = "50 ms"
seed = 101
"#,
    );
    let ratios: Vec<f64> = s["results"]["axes"].as_array().unwrap().iter().map(|a| num(&a["x2_ratio"])).collect();
    let pass = ratios.iter().all(|r| (r - 1.0).abs() < 0.03);
    verdict(pass, format!("<x²>/(k_BT/mΩ²) = {ratios:.4?}"))
}

fn spectral_identification() -> Verdict {
    let s = scenario(
        r#"
[system]
pressure = "1.2 mbar"
imprecision = ["0 m/rtHz", "0 m/rtHz", "0 m/rtHz"]

[scenario]
kind = "free"
traces = 100
trace_length = "50 ms"
record_stride = 8
seed = 102
"#,
    );
    let fit = &s["results"]["lorentzian_fits"][0];
    let f0 = num(&fit["omega0_rad_s"]) / (2.0 * PI);
    let gamma = num(&fit["gamma_per_s"]);
    let injected = num(&s["system"]["gamma_per_s"]);
    let pass = rel(f0, 96.24e3) < 0.005 && rel(gamma, injected) < 0.05;
    verdict(
        pass,
        format!("Ω_x/2π = {f0:.1} Hz, γ = {gamma:.2} /s vs injected {injected:.2} /s"),
    )
}

fn random_problem(runner: &mut TestRunner, scale: f64) -> (Mat, Mat, Mat, Mat) {
    let dims = (1usize..=8, 1usize..=3).new_tree(runner).unwrap().current();
    let (n, m) = dims;
    let mut draw = |len: usize| -> Vec<f64> { proptest::collection::vec(-1.0f64..1.0, len).new_tree(runner).unwrap().current() };
    let a = Mat::from_row_slice(n, n, &draw(n * n)) * (scale / (n as f64).sqrt());
    let b = Mat::from_row_slice(n, m, &draw(n * m));
    let lq = Mat::from_row_slice(n, n, &draw(n * n));
    let lr = Mat::from_row_slice(m, m, &draw(m * m));
    let q = &lq * lq.transpose() + Mat::identity(n, n) * 0.1;
    let r = &lr * lr.transpose() + Mat::identity(m, m) * 0.1;
    (a, b, q, r)
}

fn riccati() -> Verdict {
    let mut worst_care: f64 = 0.0;
    let mut worst_dare: f64 = 0.0;
    let mut runner = TestRunner::deterministic();
    for k in 0..100 {
        let (a, b, q, r) = random_problem(&mut runner, 2.0);
        if let Ok((s, _)) = solve_care_matrices(&a, &b, &q, &r) {
            worst_care = worst_care.max(care_relative_residual(&a, &b, &q, &r, &s).unwrap());
        } else {
            return verdict(false, format!("CARE failed on random system {k}"));
        }
        let ad = &a * 0.65;
        match solve_dare_matrices(&ad, &b, &q, &r) {
            Ok(sol) => worst_dare = worst_dare.max(dare_relative_residual(&ad, &b, &q, &r, &sol.x).unwrap()),
            Err(e) => return verdict(false, format!("DARE failed on random system {k}: {e}")),
        }
    }
    for p in [0.0, 1e-4, 1.2] {
        let sys = PhysicalSystem::reference(p);
        let ss = sys.state_space().unwrap();
        let w = CostWeights::energy(&sys, WeightLayout::Energy);
        let (s, _) = solve_care(&ss, &w).unwrap();
        worst_care = worst_care.max(care_relative_residual(&ss.a, &ss.b, &w.q, &w.r, &s).unwrap());
        let dss = discretize(&ss, 64e-9, 1e-16).unwrap();
        let sd = solve_dare(&dss, &w).unwrap();
        worst_dare = worst_dare.max(dare_relative_residual(&dss.a, &dss.b, &w.q, &w.r, &sd).unwrap());
    }
    let one = Mat::identity(1, 1);
    let root = solve_dare_matrices(&Mat::from_element(1, 1, 0.5), &one, &one, &one).unwrap().x[(0, 0)];

    let sys = PhysicalSystem::reference(0.0);
    let ss = sys.state_space_with_gamma(1e3).unwrap();
    let w = CostWeights::energy(&sys, WeightLayout::Energy);
    let (_, k) = solve_care(&ss, &w).unwrap();
    let ts = 5e-4 / sys.trap.omega.iter().cloned().fold(0.0, f64::max);
    let dss = discretize(&ss, ts, 1e-16).unwrap();
    let wd = w.scaled(ts);
    let sd = solve_dare(&dss, &wd).unwrap();
    let kd = lqr_gain_discrete(&dss, &sd, &wd, &StructureMask::full(3, 6)).unwrap();
    let kmax = k.amax();
    let limit = kd
        .iter()
        .zip(k.iter())
        .filter(|(_, b)| b.abs() > 1e-3 * kmax)
        .map(|(a, b)| rel(*a, *b))
        .fold(0.0, f64::max);

    let pass = worst_care < 1e-9 && worst_dare < 1e-9 && (root - 1.13278).abs() < 1e-5 && limit < 0.01;
    verdict(
        pass,
        format!("CARE {worst_care:.1e}, DARE {worst_dare:.1e}, scalar root {root:.6}, continuous limit {limit:.1e}"),
    )
}

const TABLE_LQR: [(&str, usize, usize, f64); 8] = [
    ("k_p,xx", 0, 0, -3.40e-10),
    ("k_p,xy", 0, 1, 7.99e-10),
    ("k_p,yx", 1, 0, 1.46e-9),
    ("k_p,yy", 1, 1, -1.15e-9),
    ("k_d,xx", 0, 3, -2.19e-13),
    ("k_d,xy", 0, 4, 1.86e-13),
    ("k_d,yx", 1, 3, 1.96e-13),
    ("k_d,yy", 1, 4, 2.32e-13),
];

const TABLE_DIGITAL: [f64; 8] = [-0.35, 0.80, 1.50, -1.15, 136.45, -119.14, -122.22, -148.23];

fn digital_entry(d: &DigitalGains, i: usize, j: usize) -> f64 {
    if j < 3 {
        d.kp[i][j]
    } else {
        d.kd[i][j - 3]
    }
}

fn reference_digital(k: &Mat) -> DigitalGains {
    digital_gains(
        k,
        &DetectorCalibration::reference(),
        &ActuatorCalibration::reference(),
        5.0,
        &TrapParams::reference(),
    )
    .unwrap()
}

fn reference_gain_table() -> Verdict {
    let sys = PhysicalSystem::reference(1.2);
    let c = design_controller(&sys, &CostWeights::energy(&sys, WeightLayout::Energy), &DesignOptions::default()).unwrap();
    let d = reference_digital(&c.k_d);
    let mut worst = (0.0, "");
    let mut lines = Vec::new();
    for ((name, i, j, lqr), dig) in TABLE_LQR.iter().zip(TABLE_DIGITAL) {
        let got = c.k_d[(*i, *j)];
        let got_d = digital_entry(&d, *i, *j);
        let e = rel(got, *lqr).max(rel(got_d, dig));
        if e > worst.0 {
            worst = (e, name);
        }
        lines.push(format!("{name} {got:.3e}/{got_d:.2}"));
    }
    let round2 = |v: f64| (v * 100.0).round() / 100.0;
    let spot = round2(d.kp[0][0]) == -0.35 && round2(d.kd[0][0]) == 136.45;
    let pass = worst.0 < 0.05 && spot;
    verdict(
        pass,
        format!(
            "worst {} off by {:.1}%, spot checks {:.3} and {:.3}; {}",
            worst.1,
            100.0 * worst.0,
            d.kp[0][0],
            d.kd[0][0],
            lines.join(", ")
        ),
    )
}

fn delay_sweep_window() -> Verdict {
    let sys = PhysicalSystem::reference(1.2);
    let gain = 9.17e-9;
    let (lo, hi) = (0.5, 6.0);
    let phis: Vec<f64> = (0..20).map(|k| lo + (hi - lo) * k as f64 / 19.0).collect();
    let sweep = DelaySweepConfig {
        axis: 0,
        gain,
        phis,
        repeats: 10,
        length: 20e-3,
        warmup: 2e-3,
    };
    let cfg = SimConfig {
        seed: 105,
        ..SimConfig::default()
    };
    let res = delay_sweep(&sys, &sweep, &cfg).unwrap();
    let bath = sys.env.temperature;
    let t: Vec<f64> = res.t_eff.iter().map(|s| s.mean).collect();
    let cooled: Vec<bool> = t.iter().map(|&v| v < bath).collect();
    let windows = cooled.windows(2).filter(|w| !w[0] && w[1]).count() + usize::from(cooled[0]);
    let tmin = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut oracle_err: f64 = 0.0;
    for (k, &c) in cooled.iter().enumerate() {
        if c {
            let o = delay_oracle(&sys, 0, gain, res.phi_realized[k]).unwrap();
            oracle_err = oracle_err.max(rel(t[k], o));
        }
    }
    let (imax, _) = t
        .iter()
        .enumerate()
        .map(|(k, &v)| (k, (v / bath).ln().abs()))
        .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let phi_far = res.phi_realized[imax];
    let heating = 1.5 * PI;
    let pass = windows == 1 && tmin < bath && oracle_err < 0.1 && (phi_far - heating).abs() < 0.5;
    verdict(
        pass,
        format!(
            "{windows} cooling window(s), min {tmin:.1} K, oracle error {:.1}%, strongest departure at φ = {phi_far:.2} rad",
            100.0 * oracle_err
        ),
    )
}

fn lab_gains_cooling() -> Verdict {
    let sys = PhysicalSystem::reference(1e-4);
    let cfg = SimConfig {
        seed: 106,
        n_traces: 8,
        duration: 10e-3,
        trace_length: 10e-3,
        ..SimConfig::default()
    };
    let c = design_controller(&sys, &CostWeights::energy(&sys, WeightLayout::Energy), &DesignOptions::default()).unwrap();
    let mut gains = reference_digital(&c.k_d);
    for ((_, i, j, _), dig) in TABLE_LQR.iter().zip(TABLE_DIGITAL) {
        if *j < 3 {
            gains.kp[*i][*j] = dig;
        } else {
            gains.kd[*i][*j - 3] = dig;
        }
    }
    let chain = FeedbackChainConfig::standard(&sys, gains, &cfg).unwrap();
    let ens = closed_loop_ensemble(&sys, &chain, &cfg).unwrap();
    if !ens.failures.is_empty() {
        return verdict(false, format!("{} realizations diverged", ens.failures.len()));
    }
    let reported = [0.58, 0.55, 3.63];
    let t: Vec<f64> = (0..3).map(|a| ens.set.temperature(&sys, a).unwrap().mean).collect();
    let pass = t.iter().zip(reported).all(|(&v, p)| v < 3.0 * p && v > p / 3.0);
    verdict(pass, format!("T_eff = {t:.3?} K against {reported:?} K"))
}

fn kd_flatness() -> Verdict {
    let weights_for = |sys: &PhysicalSystem| CostWeights::energy(sys, WeightLayout::Energy);
    let opts = DesignOptions {
        gamma: None,
        ..DesignOptions::default()
    };
    let base = PhysicalSystem::reference(1e-6);
    let reference = design_controller(&base, &weights_for(&base), &opts).unwrap();
    // Worst change among position gains, then among velocity gains.
    let mut worst = [(0.0, 0.0, 0, 0); 2];
    for p in [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
        let sys = base.with_pressure(p * MBAR).unwrap();
        let c = design_controller(&sys, &weights_for(&sys), &opts).unwrap();
        for i in 0..3 {
            for j in 0..6 {
                let r = reference.k_d[(i, j)];
                if r != 0.0 {
                    let e = rel(c.k_d[(i, j)], r);
                    let w = &mut worst[j / 3];
                    if e > w.0 {
                        *w = (e, p, i, j);
                    }
                }
            }
        }
    }
    let [wp, wd] = worst;
    verdict(
        wp.0.max(wd.0) < 0.01,
        format!(
            "position gains: {:.2}% in K_d[{},{}] at {:.0e} mbar; velocity gains: {:.2}% in K_d[{},{}] at {:.0e} mbar",
            100.0 * wp.0,
            wp.2,
            wp.3,
            wp.1,
            100.0 * wd.0,
            wd.2,
            wd.3,
            wd.1
        ),
    )
}

fn quantum() -> Verdict {
    let s = scenario(
        r#"
[system]
pressure = "1e-10 mbar"

[quantum]
efficiency = [0.3, 0.3, 0.3]
backaction_rate = "1e3 1/s"

[scenario]
kind = "quantum"
runs = 30
seed = 108
"#,
    );
    let axes = s["results"]["axes"].as_array().unwrap();
    let n: Vec<f64> = axes.iter().map(|a| num(&a["occupancy"]["mean"])).collect();
    let pred: Vec<f64> = axes.iter().map(|a| num(&a["predicted"])).collect();
    let pass = n[2] < 1.0 && n.iter().zip(&pred).all(|(a, b)| rel(*a, *b) < 0.1);
    verdict(pass, format!("n̄ = {n:.3?}, predicted {pred:.3?}"))
}

fn calibration() -> Verdict {
    let s = scenario(
        r#"
[system]
pressure = "1.2 mbar"

[scenario]
kind = "calibrate"
traces = 100
trace_length = "50 ms"
electrode = "a"
axis = "x"
drive_traces = 20
seed = 109
"#,
    );
    let det = &s["results"]["detector"];
    let truth: Vec<f64> = det["synthesis_c_vm"].as_array().unwrap().iter().map(num).collect();
    let c_vm: Vec<f64> = det["axes"].as_array().unwrap().iter().map(|a| num(&a["c_vm"])).collect();
    let vm_err = c_vm.iter().zip(&truth).map(|(a, b)| rel(*a, *b)).fold(0.0, f64::max);
    let el = &s["results"]["electrode"];
    let nv_err = rel(num(&el["c_nv_N_per_V"]), num(&el["synthesis_c_nv_N_per_V"]));
    verdict(
        vm_err < 0.02 && nv_err < 0.05,
        format!("C_Vm worst {:.2}%, C_NV {:.2}%", 100.0 * vm_err, 100.0 * nv_err),
    )
}

fn filters() -> Verdict {
    let sys = PhysicalSystem::reference(1.2);
    let cfg = SimConfig::default();
    let fs = 1.0 / cfg.ts;
    let f = sys.trap.omega.map(|w| w / (2.0 * PI));
    let db = |c: &BiquadCascade, f: f64| {
        let h = c.response(f);
        20.0 * h.re.hypot(h.im).log10()
    };
    let xy_notch = BiquadCascade::new(&[design_notch(f[2], 5.0, fs).unwrap()]);
    let z_x = BiquadCascade::new(&[design_notch(f[0], 10.0, fs).unwrap()]);
    let z_y = BiquadCascade::new(&[design_notch(f[1], 10.0, fs).unwrap()]);
    let reject = [db(&xy_notch, f[2]), db(&z_x, f[0]), db(&z_y, f[1])];

    let chain = FeedbackChainConfig::standard(&sys, DigitalGains::zero(), &cfg).unwrap();
    let full: Vec<BiquadCascade> = chain.filters.iter().map(|c| BiquadCascade::new(c)).collect();
    let passband = [db(&full[0], f[0]), db(&full[1], f[1]), db(&full[2], f[2])];

    let mut exact = true;
    for n in chain.delays.iter().copied().chain([31, 29, 114]) {
        let mut line = DelayLine::new(n);
        for k in 0..(n + 4) {
            let y = line.push(if k == 0 { 1.0 } else { 0.0 });
            exact &= y == if k == n { 1.0 } else { 0.0 };
        }
    }
    let pass = reject.iter().all(|&r| r <= -60.0) && passband.iter().all(|p| p.abs() < 0.5) && exact;
    verdict(
        pass,
        format!("rejection {reject:.1?} dB, passband {passband:.3?} dB, delays exact: {exact}"),
    )
}

type Criterion = (u32, fn() -> Verdict, Duration);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, equipartition, Duration::from_secs(120)),
        (2, spectral_identification, Duration::from_secs(120)),
        (3, riccati, Duration::from_secs(60)),
        (4, reference_gain_table, Duration::from_secs(60)),
        (5, delay_sweep_window, Duration::from_secs(600)),
        (6, lab_gains_cooling, Duration::from_secs(600)),
        (7, kd_flatness, Duration::from_secs(60)),
        (8, quantum, Duration::from_secs(900)),
        (9, calibration, Duration::from_secs(300)),
        (10, filters, Duration::from_secs(60)),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, run, budget) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= budget;
        failed += usize::from(!pass);
        println!(
            "CRITERION {n}: {} ({:.1} s) {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            v.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

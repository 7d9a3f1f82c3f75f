use levcool_core::linalg::Mat;
use levcool_core::model::PhysicalSystem;
use levcool_core::riccati::{
    care_relative_residual, dare_relative_residual, discretize, solve_care, solve_care_matrices, solve_dare, solve_dare_matrices,
    CostWeights, WeightLayout,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Problem {
    a: Mat,
    b: Mat,
    q: Mat,
    r: Mat,
}

fn controllable(a: &Mat, b: &Mat) -> bool {
    let n = a.nrows();
    let m = b.ncols();
    let mut ctrb = Mat::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        ctrb.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    let sv = ctrb.svd(false, false).singular_values;
    sv.min() > 1e-6 * sv.max()
}

fn spd(n: usize, raw: &[f64], floor: f64) -> Mat {
    let l = Mat::from_row_slice(n, n, &raw[..n * n]);
    &l * l.transpose() + Mat::identity(n, n) * floor
}

fn problem(scale_a: f64) -> impl Strategy<Value = Problem> {
    (1usize..=8, 1usize..=3).prop_flat_map(move |(n, m)| {
        (
            prop::collection::vec(-1.0f64..1.0, n * n),
            prop::collection::vec(-1.0f64..1.0, n * m),
            prop::collection::vec(-1.0f64..1.0, n * n),
            prop::collection::vec(-1.0f64..1.0, m * m),
        )
            .prop_map(move |(a, b, q, r)| Problem {
                a: Mat::from_row_slice(n, n, &a) * (scale_a / (n as f64).sqrt()),
                b: Mat::from_row_slice(n, m, &b),
                q: spd(n, &q, 0.1),
                r: spd(m, &r, 0.1),
            })
    })
}

/// Residual of the continuous equation in plain coordinates.
fn care_residual_plain(p: &Problem, s: &Mat) -> f64 {
    let rinv = p.r.clone().try_inverse().unwrap();
    let res = s * &p.a + p.a.transpose() * s + &p.q - s * &p.b * rinv * p.b.transpose() * s;
    res.norm() / (2.0 * (s * &p.a).norm() + p.q.norm() + s.norm().max(1.0))
}

fn dare_residual_plain(p: &Problem, s: &Mat) -> f64 {
    let bts = p.b.transpose() * s;
    let inner = (&p.r + &bts * &p.b).try_inverse().unwrap();
    let res = p.a.transpose() * s * &p.a - s + &p.q - p.a.transpose() * s * &p.b * inner * &bts * &p.a;
    res.norm() / s.norm()
}

fn min_eig(m: &Mat) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn care_residual_on_random_systems(p in problem(2.0)) {
        prop_assume!(controllable(&p.a, &p.b));
        let (s, k) = solve_care_matrices(&p.a, &p.b, &p.q, &p.r).unwrap();
        prop_assert!(care_relative_residual(&p.a, &p.b, &p.q, &p.r, &s).unwrap() < 1e-9);
        prop_assert!(care_residual_plain(&p, &s) < 1e-9);
        let closed = &p.a - &p.b * k;
        prop_assert!(closed.complex_eigenvalues().iter().all(|z| z.re < 0.0));
        prop_assert!(min_eig(&s) > -1e-9 * s.norm());
    }

    #[test]
    fn dare_residual_on_random_systems(p in problem(1.3)) {
        prop_assume!(controllable(&p.a, &p.b));
        let sol = solve_dare_matrices(&p.a, &p.b, &p.q, &p.r).unwrap();
        prop_assert!(dare_relative_residual(&p.a, &p.b, &p.q, &p.r, &sol.x).unwrap() < 1e-9);
        prop_assert!(dare_residual_plain(&p, &sol.x) < 1e-9);
        let k = (&p.r + p.b.transpose() * &sol.x * &p.b).try_inverse().unwrap() * p.b.transpose() * &sol.x * &p.a;
        let closed = &p.a - &p.b * k;
        prop_assert!(closed.complex_eigenvalues().iter().all(|z| z.re.hypot(z.im) < 1.0));
    }

    #[test]
    fn larger_state_weight_never_lowers_the_solution(
        p in problem(1.3),
        extra in prop::collection::vec(-1.0f64..1.0, 64),
    ) {
        prop_assume!(controllable(&p.a, &p.b));
        let n = p.a.nrows();
        let dq = spd(n, &extra, 0.0);
        let s1 = solve_dare_matrices(&p.a, &p.b, &p.q, &p.r).unwrap().x;
        let s2 = solve_dare_matrices(&p.a, &p.b, &(&p.q + dq), &p.r).unwrap().x;
        prop_assert!(min_eig(&(&s2 - &s1)) > -1e-8 * s2.norm());
    }
}

#[test]
fn scalar_dare_closed_form_root() {
    let one = Mat::identity(1, 1);
    let s = solve_dare_matrices(&Mat::from_element(1, 1, 0.5), &one, &one, &one).unwrap().x[(0, 0)];
    assert!((s - 1.13278).abs() < 1e-5);
    assert!((s - (0.25 + 4.0625f64.sqrt()) / 2.0).abs() < 1e-12);
}

#[test]
fn particle_system_residuals() {
    for p_mbar in [0.0, 1e-4, 1.2] {
        let sys = PhysicalSystem::reference(p_mbar);
        let ss = sys.state_space().unwrap();
        let w = CostWeights::energy(&sys, WeightLayout::Energy);
        let (s, _) = solve_care(&ss, &w).unwrap();
        let rc = care_relative_residual(&ss.a, &ss.b, &w.q, &w.r, &s).unwrap();
        assert!(rc < 1e-9, "CARE at {p_mbar} mbar: {rc}");
        let dss = discretize(&ss, 64e-9, 1e-16).unwrap();
        let sd = solve_dare(&dss, &w).unwrap();
        let rd = dare_relative_residual(&dss.a, &dss.b, &w.q, &w.r, &sd).unwrap();
        assert!(rd < 1e-9, "DARE at {p_mbar} mbar: {rd}");
    }
}

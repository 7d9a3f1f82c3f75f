use super::{solve_dare_matrices, DiscreteStateSpace};
use crate::error::{Error, Result};
use crate::linalg::{discrete_lyapunov, spectral_radius, symmetrize, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanGain {
    /// Steady-state gain applied to the a-priori innovation.
    pub l: Mat,
    /// Steady-state a-priori error covariance.
    pub p: Mat,
}

/// Steady-state filter for `x⁺ = A_d x + B_d u + w`, `y = C_d x + v`, with
/// `cov w = dss.process_covariance` and `cov v = measurement_covariance`.
pub fn kalman_steady_gain(dss: &DiscreteStateSpace, measurement_covariance: &Mat) -> Result<KalmanGain> {
    kalman_steady_gain_matrices(&dss.a, &dss.c, &dss.process_covariance, measurement_covariance)
}

pub fn kalman_steady_gain_matrices(a: &Mat, c: &Mat, q: &Mat, r: &Mat) -> Result<KalmanGain> {
    let n = a.nrows();
    let p = match solve_dare_matrices(&a.transpose(), &c.transpose(), q, r) {
        Ok(sol) => sol.x,
        Err(Error::NotStabilizable(msg)) => return Err(Error::NotDetectable(msg)),
        Err(Error::NotDetectable(msg)) => return Err(Error::NotStabilizable(msg)),
        Err(e) => return Err(e),
    };
    let l = gain_from_covariance(c, &p, r)?;
    let est = a - &l * c * a;
    if p.iter().any(|&v| v != 0.0) && spectral_radius(&est) >= 1.0 {
        return Err(Error::NotDetectable("estimator is not stable".into()));
    }
    debug_assert_eq!(l.nrows(), n);
    Ok(KalmanGain { l, p })
}

fn gain_from_covariance(c: &Mat, p: &Mat, r: &Mat) -> Result<Mat> {
    let s = c * p * c.transpose() + r;
    // L = P Cᵀ S⁻¹  ⇔  S Lᵀ = C P
    let lt = s.lu().solve(&(c * p)).ok_or(Error::Singular("innovation covariance"))?;
    Ok(lt.transpose())
}

/// Runtime filter. Holds the a-priori estimate between steps.
#[derive(Debug, Clone)]
pub struct KalmanFilter {
    a: Mat,
    b: Mat,
    c: Mat,
    q: Mat,
    r: Mat,
    x_prior: Mat,
    p_prior: Mat,
    steady: Option<Mat>,
}

impl KalmanFilter {
    /// Time-varying filter starting from `x0`, `p0`.
    pub fn new(dss: &DiscreteStateSpace, measurement_covariance: &Mat, x0: Mat, p0: Mat) -> Self {
        Self {
            a: dss.a.clone(),
            b: dss.b.clone(),
            c: dss.c.clone(),
            q: dss.process_covariance.clone(),
            r: measurement_covariance.clone(),
            x_prior: x0,
            p_prior: p0,
            steady: None,
        }
    }

    /// Filter with the fixed steady-state gain; the covariance is frozen.
    pub fn steady(dss: &DiscreteStateSpace, measurement_covariance: &Mat, gain: &KalmanGain, x0: Mat) -> Self {
        let mut f = Self::new(dss, measurement_covariance, x0, gain.p.clone());
        f.steady = Some(gain.l.clone());
        f
    }

    pub fn estimate_prior(&self) -> &Mat {
        &self.x_prior
    }

    pub fn covariance_prior(&self) -> &Mat {
        &self.p_prior
    }

    /// Measurement update; returns the a-posteriori estimate.
    pub fn update(&mut self, y: &Mat) -> Result<Mat> {
        let innovation = y - &self.c * &self.x_prior;
        let l = match &self.steady {
            Some(l) => l.clone(),
            None => {
                let l = gain_from_covariance(&self.c, &self.p_prior, &self.r)?;
                // Joseph form keeps the covariance symmetric and PSD.
                let n = self.a.nrows();
                let ilc = Mat::identity(n, n) - &l * &self.c;
                self.p_prior = symmetrize(&(&ilc * &self.p_prior * ilc.transpose() + &l * &self.r * l.transpose()));
                l
            }
        };
        self.x_prior = &self.x_prior + l * innovation;
        Ok(self.x_prior.clone())
    }

    /// Time update with the applied input `u`. Must follow [`Self::update`];
    /// after the update `x_prior` holds the posterior, which is propagated.
    pub fn predict(&mut self, u: &Mat) {
        self.x_prior = &self.a * &self.x_prior + &self.b * u;
        if self.steady.is_none() {
            self.p_prior = symmetrize(&(&self.a * &self.p_prior * self.a.transpose() + &self.q));
        }
    }
}

/// Steady-state covariance of `[x; x̂⁻]` for the loop
/// `x̂⁺ = x̂⁻ + L(y − Cx̂⁻)`, `u = −K x̂⁺`, `x̂⁻' = A x̂⁺ + B u`.
pub fn lqg_steady_covariance(dss: &DiscreteStateSpace, k: &Mat, l: &Mat, measurement_covariance: &Mat) -> Result<Mat> {
    let n = dss.nx();
    let p = dss.c.nrows();
    let id = Mat::identity(n, n);
    let a = &dss.a;
    let bk = &dss.b * k;
    let lc = l * &dss.c;
    let ilc = &id - &lc;
    let abk = a - &bk;

    let mut f = Mat::zeros(2 * n, 2 * n);
    f.view_mut((0, 0), (n, n)).copy_from(&(a - &bk * &lc));
    f.view_mut((0, n), (n, n)).copy_from(&(-(&bk * &ilc)));
    f.view_mut((n, 0), (n, n)).copy_from(&(&abk * &lc));
    f.view_mut((n, n), (n, n)).copy_from(&(&abk * &ilc));

    let mut g = Mat::zeros(2 * n, n + p);
    g.view_mut((0, 0), (n, n)).copy_from(&id);
    g.view_mut((0, n), (n, p)).copy_from(&(-(&bk * l)));
    g.view_mut((n, n), (n, p)).copy_from(&(&abk * l));

    let mut w = Mat::zeros(n + p, n + p);
    w.view_mut((0, 0), (n, n)).copy_from(&dss.process_covariance);
    w.view_mut((n, n), (p, p)).copy_from(measurement_covariance);

    let noise = symmetrize(&(&g * w * g.transpose()));
    discrete_lyapunov(&f, &noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::{lqr_gain_discrete, solve_dare_matrices, CostWeights, StructureMask};

    fn scalar_dss(a: f64, q: f64) -> DiscreteStateSpace {
        DiscreteStateSpace {
            a: Mat::from_element(1, 1, a),
            b: Mat::from_element(1, 1, 1.0),
            c: Mat::from_element(1, 1, 1.0),
            ts: 1.0,
            process_covariance: Mat::from_element(1, 1, q),
        }
    }

    #[test]
    fn scalar_golden_ratio() {
        let kg = kalman_steady_gain(&scalar_dss(1.0, 1.0), &Mat::identity(1, 1)).unwrap();
        assert!((kg.p[(0, 0)] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn nothing_to_track() {
        let kg = kalman_steady_gain(&scalar_dss(0.5, 0.0), &Mat::identity(1, 1)).unwrap();
        assert_eq!(kg.p[(0, 0)], 0.0);
        assert_eq!(kg.l[(0, 0)], 0.0);
    }

    #[test]
    fn duality_with_regulator() {
        let a = Mat::from_row_slice(2, 2, &[0.95, 0.2, -0.1, 0.9]);
        let c = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        let q = Mat::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.7]);
        let r = Mat::from_element(1, 1, 0.2);
        let kg = kalman_steady_gain_matrices(&a, &c, &q, &r).unwrap();
        let reg = solve_dare_matrices(&a.transpose(), &c.transpose(), &q, &r).unwrap();
        assert!((&kg.p - &reg.x).amax() < 1e-12);
        let dual = DiscreteStateSpace {
            a: a.transpose(),
            b: c.transpose(),
            c: c.clone(),
            ts: 1.0,
            process_covariance: q.clone(),
        };
        let w = CostWeights { q: q.clone(), r: r.clone() };
        // The regulator gain on the dual pair is the transposed predictor gain A·L.
        let k = lqr_gain_discrete(&dual, &reg.x, &w, &StructureMask::full(1, 2)).unwrap();
        let predictor = &a * &kg.l;
        assert!((k.transpose() - predictor).amax() < 1e-12);
    }

    #[test]
    fn time_varying_filter_reaches_steady_state() {
        let dss = scalar_dss(0.9, 0.5);
        let r = Mat::from_element(1, 1, 2.0);
        let kg = kalman_steady_gain(&dss, &r).unwrap();
        let mut f = KalmanFilter::new(&dss, &r, Mat::zeros(1, 1), Mat::from_element(1, 1, 100.0));
        for _ in 0..200 {
            f.update(&Mat::zeros(1, 1)).unwrap();
            f.predict(&Mat::zeros(1, 1));
        }
        assert!((f.covariance_prior()[(0, 0)] - kg.p[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn lqg_covariance_without_control_is_open_loop() {
        let dss = scalar_dss(0.8, 1.0);
        let r = Mat::from_element(1, 1, 0.5);
        let kg = kalman_steady_gain(&dss, &r).unwrap();
        let cov = lqg_steady_covariance(&dss, &Mat::zeros(1, 1), &kg.l, &r).unwrap();
        assert!((cov[(0, 0)] - 1.0 / (1.0 - 0.64)).abs() < 1e-12);
        // Estimation error variance equals the a-priori P.
        let err = cov[(0, 0)] - 2.0 * cov[(0, 1)] + cov[(1, 1)];
        assert!((err - kg.p[(0, 0)]).abs() < 1e-12);
    }
}

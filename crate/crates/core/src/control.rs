//! Grid-level feedback: discrete-time PI control of the aggregate tracking
//! error, with saturation and anti-windup, plus the closed-loop map from the
//! reference to the broadcast command used by spectral analysis.

use nalgebra::{Complex, DMatrix, DVector, RowDVector};
use num_complex::Complex64;

use crate::error::{DispatchError, Result};
use crate::mean_field::LinearMfm;

/// Discrete-time PI controller with output saturation and conditional
/// integration.
#[derive(Debug, Clone)]
pub struct PiController {
    pub kp: f64,
    pub ki: f64,
    pub zeta_max: f64,
    integral: f64,
    saturation_events: u64,
}

impl PiController {
    pub fn new(kp: f64, ki: f64, zeta_max: f64) -> Self {
        Self {
            kp,
            ki,
            zeta_max,
            integral: 0.0,
            saturation_events: 0,
        }
    }

    /// One control step: `raw = kp e + ki (integral + e)`, clamped to
    /// `[-zeta_max, zeta_max]`. The integral state only accumulates while
    /// the output is unsaturated.
    pub fn step(&mut self, error: f64) -> f64 {
        let raw = self.kp * error + self.ki * (self.integral + error);
        if raw.abs() <= self.zeta_max {
            self.integral += error;
            raw
        } else {
            self.saturation_events += 1;
            raw.clamp(-self.zeta_max, self.zeta_max)
        }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.saturation_events = 0;
    }

    pub fn integral_state(&self) -> f64 {
        self.integral
    }

    pub fn saturation_events(&self) -> u64 {
        self.saturation_events
    }

    /// `G_c(z) = (kp + ki - kp z^{-1}) / (1 - z^{-1})`.
    pub fn frequency_response(&self, theta: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -theta);
        (Complex64::new(self.kp + self.ki, 0.0) - self.kp * z1) / (Complex64::new(1.0, 0.0) - z1)
    }
}

/// Discrete-time state-space realization `x' = A x + B u`, `y = C x + D u`.
#[derive(Debug, Clone)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: RowDVector<f64>,
    pub d: f64,
}

impl StateSpace {
    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn poles(&self) -> Vec<Complex64> {
        self.a
            .clone()
            .complex_eigenvalues()
            .iter()
            .map(|e| Complex64::new(e.re, e.im))
            .collect()
    }

    /// `C (e^{j theta} I - A)^{-1} B + D`.
    pub fn frequency_response(&self, theta: f64) -> Complex64 {
        let n = self.order();
        if n == 0 {
            return Complex64::new(self.d, 0.0);
        }
        let z = Complex::new(theta.cos(), theta.sin());
        let mut m = DMatrix::<Complex<f64>>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = Complex::new(-self.a[(i, j)], 0.0);
            }
            m[(i, i)] += z;
        }
        let b =
            DVector::<Complex<f64>>::from_iterator(n, self.b.iter().map(|&v| Complex::new(v, 0.0)));
        let x = m
            .lu()
            .solve(&b)
            .expect("resolvent is nonsingular off poles");
        let mut acc = Complex::new(self.d, 0.0);
        for i in 0..n {
            acc += Complex::new(self.c[i], 0.0) * x[i];
        }
        Complex64::new(acc.re, acc.im)
    }

    /// Time-domain simulation from zero initial state.
    pub fn simulate(&self, input: &[f64]) -> Vec<f64> {
        let mut x = DVector::<f64>::zeros(self.order());
        let mut out = Vec::with_capacity(input.len());
        for &u in input {
            let y = (&self.c * &x)[0] + self.d * u;
            out.push(y);
            x = &self.a * &x + &self.b * u;
        }
        out
    }
}

/// State-space realization of the closed-loop map `r -> zeta`, i.e.
/// `G_c / (1 + G_c G_p)`, with the plant restricted to the zero-sum subspace
/// so the uncontrollable Perron mode is deflated away.
///
/// Fails with `UnstableLoop` if any closed-loop pole modulus reaches 1.
pub fn closed_loop_map(mfm: &LinearMfm, controller: &PiController) -> Result<StateSpace> {
    let (_, a_v, b_v, c_v) = mfm.deflated();
    let n = a_v.nrows();
    let kp = controller.kp;
    let ki = controller.ki;
    let kpi = kp + ki;

    // States: plant deviation (zero-sum coordinates) then the integrator.
    let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
    let mut b = DVector::<f64>::zeros(n + 1);
    let mut c = RowDVector::<f64>::zeros(n + 1);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = a_v[(i, j)] - kpi * b_v[i] * c_v[j];
        }
        a[(i, n)] = ki * b_v[i];
        b[i] = kpi * b_v[i];
        c[i] = -kpi * c_v[i];
    }
    for j in 0..n {
        a[(n, j)] = -c_v[j];
    }
    a[(n, n)] = 1.0;
    b[n] = 1.0;
    c[n] = ki;

    let map = StateSpace { a, b, c, d: kpi };
    let max_modulus = map.poles().iter().map(|p| p.norm()).fold(0.0f64, f64::max);
    if max_modulus >= 1.0 {
        return Err(DispatchError::UnstableLoop(format!(
            "closed-loop pole modulus {max_modulus}"
        )));
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::load_model::TransitionModel;
    use crate::mean_field::linearize;

    #[test]
    fn zero_error_from_zero_state_gives_zero_output() {
        let mut c = PiController::new(50.0, 1.5, 1.0);
        for _ in 0..100 {
            assert_eq!(c.step(0.0), 0.0);
        }
    }

    #[test]
    fn first_output_with_paper_gains() {
        let mut c = PiController::new(50.0, 1.5, 1.0);
        let out = c.step(0.001);
        assert!((out - 0.0515).abs() < 1e-15);
    }

    #[test]
    fn saturation_bounds_output_for_any_error_sequence() {
        let mut c = PiController::new(50.0, 1.5, 1.0);
        let mut worst: f64 = 0.0;
        for t in 0..10_000 {
            let e = 10.0 * ((t as f64) * 0.37).sin() + 5.0;
            worst = worst.max(c.step(e).abs());
        }
        assert!(worst <= 1.0);
        assert!(c.saturation_events() > 0);
        assert!(c.integral_state().is_finite());
    }

    #[test]
    fn anti_windup_freezes_integral_while_saturated() {
        let mut c = PiController::new(50.0, 1.5, 1.0);
        c.step(10.0);
        let frozen = c.integral_state();
        c.step(10.0);
        assert_eq!(c.integral_state(), frozen);
        // Recovery: small errors integrate again.
        c.step(1e-6);
        assert!(c.integral_state() != frozen);
    }

    #[test]
    fn controller_steps_match_transfer_function_realization() {
        // Pre-saturation, the step sequence equals the simulation of the
        // G_c realization: x' = x + e, zeta = ki x + (kp + ki) e.
        let kp = 50.0;
        let ki = 1.5;
        let gc = StateSpace {
            a: DMatrix::from_row_slice(1, 1, &[1.0]),
            b: DVector::from_row_slice(&[1.0]),
            c: RowDVector::from_row_slice(&[ki]),
            d: kp + ki,
        };
        let errors: Vec<f64> = (0..500).map(|t| 1e-4 * ((t as f64) * 0.1).sin()).collect();
        let reference = gc.simulate(&errors);
        let mut c = PiController::new(kp, ki, 1e9);
        for (t, &e) in errors.iter().enumerate() {
            let out = c.step(e);
            assert!(
                (out - reference[t]).abs() < 1e-10,
                "t={t}: {out} vs {}",
                reference[t]
            );
        }
    }

    #[test]
    fn closed_loop_poles_stable_for_pool_model() {
        let m = TransitionModel::build_pool_nominal(8, 5.0, 12.0).unwrap();
        let mfm = linearize(&m).unwrap();
        let ctl = PiController::new(50.0, 1.5, 1.0);
        let map = closed_loop_map(&mfm, &ctl).unwrap();
        for p in map.poles() {
            assert!(p.norm() < 1.0, "pole {p}");
        }
    }

    #[test]
    fn vanishing_plant_reduces_map_to_controller() {
        // With the plant gain scaled toward zero the map converges to G_c.
        // The exact G_p = 0 case is rejected: the open-loop integrator pole
        // then sits exactly on the unit circle.
        let m = TransitionModel::build_pool_nominal(4, 5.0, 12.0).unwrap();
        let mut mfm = linearize(&m).unwrap();
        mfm.c *= 1e-8;
        let ctl = PiController::new(50.0, 1.5, 1.0);
        let map = closed_loop_map(&mfm, &ctl).unwrap();
        for k in 1..20 {
            let theta = 0.15 * k as f64;
            let got = map.frequency_response(theta);
            let want = ctl.frequency_response(theta);
            assert!(
                (got - want).norm() < 1e-4 * want.norm(),
                "theta {theta}: {got} vs {want}"
            );
        }
        mfm.c = RowDVector::zeros(m.dim());
        assert!(closed_loop_map(&mfm, &ctl).is_err());
    }

    #[test]
    fn dc_of_closed_loop_matches_time_domain() {
        // Constant reference: the map settles to the command that forces
        // the plant output onto the reference (integral action).
        let m = TransitionModel::build_pool_nominal(6, 5.0, 12.0).unwrap();
        let mfm = linearize(&m).unwrap();
        let ctl = PiController::new(50.0, 1.5, 1.0);
        let map = closed_loop_map(&mfm, &ctl).unwrap();
        let input = vec![0.01; 60_000];
        let out = map.simulate(&input);
        let settled = out[input.len() - 1];
        // DC value of the map equals 1 / G_p(1).
        let (_, a_v, b_v, c_v) = mfm.deflated();
        let eye = DMatrix::<f64>::identity(a_v.nrows(), a_v.ncols());
        let gain = (&c_v * (eye - &a_v).lu().solve(&b_v).unwrap())[0];
        let expected = 0.01 / gain;
        assert!(
            (settled - expected).abs() < 1e-6,
            "settled {settled} vs {expected}"
        );
    }
}

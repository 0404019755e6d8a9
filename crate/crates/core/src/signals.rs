//! Regulation-signal modeling and conditioning: ARMA(2,1) generator fitted
//! by recursive extended least squares, low-pass conditioning, reference
//! scaling, and the SOC-aware reshaping rule.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DispatchError, Result};

/// Fitted ARMA(2,1) regulation-signal model:
/// `r_t + a1 r_{t-1} + a2 r_{t-2} = w_t + b1 w_{t-1}` with white noise
/// variance `sigma_w2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmaModel {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    pub sigma_w2: f64,
}

impl ArmaModel {
    pub fn new(a1: f64, a2: f64, b1: f64, sigma_w2: f64) -> Result<Self> {
        let model = Self {
            a1,
            a2,
            b1,
            sigma_w2,
        };
        if !(sigma_w2 > 0.0) {
            return Err(DispatchError::InvalidParameter(format!(
                "noise variance must be positive, got {sigma_w2}"
            )));
        }
        if !model.is_stationary() {
            return Err(DispatchError::UnstableFit(format!(
                "AR roots outside the unit circle for a1={a1}, a2={a2}"
            )));
        }
        Ok(model)
    }

    /// Both roots of `z^2 + a1 z + a2` strictly inside the unit circle.
    pub fn is_stationary(&self) -> bool {
        let disc = self.a1 * self.a1 - 4.0 * self.a2;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            let r1 = (-self.a1 + sq) / 2.0;
            let r2 = (-self.a1 - sq) / 2.0;
            r1.abs() < 1.0 && r2.abs() < 1.0
        } else {
            // Complex pair with modulus sqrt(a2).
            self.a2 < 1.0
        }
    }

    /// Transfer function `G_wr(e^{j theta})` from the white noise to the
    /// signal.
    pub fn frequency_response(&self, theta: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -theta);
        let z2 = z1 * z1;
        (Complex64::new(1.0, 0.0) + self.b1 * z1)
            / (Complex64::new(1.0, 0.0) + self.a1 * z1 + self.a2 * z2)
    }

    /// Two-sided PSD `sigma_w^2 |G_wr(e^{j theta})|^2`.
    pub fn psd(&self, theta: f64) -> f64 {
        self.sigma_w2 * self.frequency_response(theta).norm_sqr()
    }

    /// Stationary realization of length `n`, discarding [`ARMA_BURN_IN`]
    /// warm-up samples.
    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(0.0, self.sigma_w2.sqrt()).expect("valid std");
        let total = n + ARMA_BURN_IN;
        let mut out = Vec::with_capacity(total);
        let mut w_prev = 0.0;
        for t in 0..total {
            let w: f64 = normal.sample(rng);
            let r1 = if t >= 1 { out[t - 1] } else { 0.0 };
            let r2 = if t >= 2 { out[t - 2] } else { 0.0 };
            out.push(-self.a1 * r1 - self.a2 * r2 + w + self.b1 * w_prev);
            w_prev = w;
        }
        out.split_off(ARMA_BURN_IN)
    }
}

/// Warm-up samples discarded by [`ArmaModel::generate`].
pub const ARMA_BURN_IN: usize = 500;

/// Minimum series length accepted by [`els_fit`].
pub const ELS_MIN_SAMPLES: usize = 100;

/// Fits an ARMA(2,1) model by recursive extended least squares.
///
/// The series is de-meaned, then recursive least-squares passes over the
/// regressor `[-r_{t-1}, -r_{t-2}, w_{t-1}]` run with posterior residuals
/// substituted for the unobserved innovations. Later passes restart the
/// covariance while keeping the parameter estimate, which drives the
/// recursion to its fixed point; the noise variance is the mean squared
/// residual of the final pass.
pub fn els_fit(series: &[f64]) -> Result<ArmaModel> {
    let n = series.len();
    if n < ELS_MIN_SAMPLES {
        return Err(DispatchError::InsufficientData {
            required: ELS_MIN_SAMPLES,
            got: n,
        });
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let y: Vec<f64> = series.iter().map(|v| v - mean).collect();

    let mut theta = [0.0f64; 3];
    let mut sigma_w2 = 0.0;
    for _pass in 0..4 {
        // Reset the covariance each pass; keep the parameter estimate.
        let mut p = [[0.0f64; 3]; 3];
        for (i, row) in p.iter_mut().enumerate() {
            row[i] = 1e4;
        }
        let mut w = vec![0.0f64; n];
        let mut sq_sum = 0.0;
        let mut sq_count = 0usize;
        for t in 2..n {
            let phi = [-y[t - 1], -y[t - 2], w[t - 1]];
            // k = P phi / (1 + phi' P phi), then rank-one downdate of P.
            let mut p_phi = [0.0f64; 3];
            for i in 0..3 {
                for j in 0..3 {
                    p_phi[i] += p[i][j] * phi[j];
                }
            }
            let denom = 1.0 + phi[0] * p_phi[0] + phi[1] * p_phi[1] + phi[2] * p_phi[2];
            let gain = [p_phi[0] / denom, p_phi[1] / denom, p_phi[2] / denom];
            let prediction = phi[0] * theta[0] + phi[1] * theta[1] + phi[2] * theta[2];
            let innovation = y[t] - prediction;
            for i in 0..3 {
                theta[i] += gain[i] * innovation;
            }
            for i in 0..3 {
                for j in 0..3 {
                    p[i][j] -= gain[i] * p_phi[j];
                }
            }
            // Posterior residual stands in for the innovation.
            let posterior = y[t] - (phi[0] * theta[0] + phi[1] * theta[1] + phi[2] * theta[2]);
            w[t] = posterior;
            if t >= n / 10 {
                sq_sum += posterior * posterior;
                sq_count += 1;
            }
        }
        sigma_w2 = sq_sum / sq_count as f64;
    }
    ArmaModel::new(theta[0], theta[1], theta[2], sigma_w2)
}

/// Rational discrete-time filter in powers of `z^{-1}`; denominator leading
/// coefficient is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFilter {
    /// Numerator coefficients `b0, b1, ...`.
    pub numerator: Vec<f64>,
    /// Denominator coefficients `1, a1, ...`.
    pub denominator: Vec<f64>,
}

impl LinearFilter {
    pub fn new(numerator: Vec<f64>, denominator: Vec<f64>) -> Result<Self> {
        if denominator.is_empty() || (denominator[0] - 1.0).abs() > 1e-12 {
            return Err(DispatchError::InvalidParameter(
                "denominator leading coefficient must be 1".into(),
            ));
        }
        if numerator.is_empty() {
            return Err(DispatchError::InvalidParameter(
                "numerator must be nonempty".into(),
            ));
        }
        Ok(Self {
            numerator,
            denominator,
        })
    }

    /// The identity filter.
    pub fn identity() -> Self {
        Self {
            numerator: vec![1.0],
            denominator: vec![1.0],
        }
    }

    pub fn frequency_response(&self, theta: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, -theta);
        let eval = |coeffs: &[f64]| {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut pow = Complex64::new(1.0, 0.0);
            for &c in coeffs {
                acc += c * pow;
                pow *= z;
            }
            acc
        };
        eval(&self.numerator) / eval(&self.denominator)
    }

    pub fn dc_gain(&self) -> f64 {
        self.numerator.iter().sum::<f64>() / self.denominator.iter().sum::<f64>()
    }
}

/// First-order Butterworth low-pass via the bilinear transform with
/// prewarping. `cutoff` is in cycles per minute, `sampling_period` in
/// minutes.
pub fn butterworth_lowpass(cutoff: f64, sampling_period: f64) -> Result<LinearFilter> {
    if !(sampling_period > 0.0) {
        return Err(DispatchError::InvalidParameter(
            "sampling period must be positive".into(),
        ));
    }
    let nyquist = 0.5 / sampling_period;
    if !(cutoff > 0.0 && cutoff < nyquist) {
        return Err(DispatchError::InvalidParameter(format!(
            "cutoff {cutoff} outside (0, {nyquist}) cycles/minute"
        )));
    }
    let alpha = (std::f64::consts::PI * cutoff * sampling_period).tan();
    let gain = alpha / (1.0 + alpha);
    let pole = (1.0 - alpha) / (1.0 + alpha);
    LinearFilter::new(vec![gain, gain], vec![1.0, -pole])
}

/// Direct-form difference-equation evaluation from zero initial state.
pub fn filter_apply(filter: &LinearFilter, series: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(series.len());
    for t in 0..series.len() {
        let mut acc = 0.0;
        for (k, &b) in filter.numerator.iter().enumerate() {
            if t >= k {
                acc += b * series[t - k];
            }
        }
        for (k, &a) in filter.denominator.iter().enumerate().skip(1) {
            if t >= k {
                acc -= a * out[t - k];
            }
        }
        out.push(acc);
    }
    out
}

/// Pointwise scaling `r_t = eps * r1_t`.
pub fn scale_reference(series: &[f64], eps: f64) -> Vec<f64> {
    series.iter().map(|v| v * eps).collect()
}

/// SOC-aware reshaping of one reference sample.
///
/// When the filtered reference `big_r` crosses `tau` times a QoS bound and
/// the raw sample pushes further in that direction, the sample is shrunk
/// toward zero proportionally to the overshoot and clamped at zero, so the
/// output never exceeds the input in magnitude and never changes sign.
pub fn reshape_reference(r: f64, big_r: f64, bounds: (f64, f64), delta: f64, tau: f64) -> f64 {
    let (lower, upper) = bounds;
    if big_r > tau * upper && r > 0.0 {
        (r - delta * (big_r - tau * upper)).max(0.0)
    } else if big_r < tau * lower && r < 0.0 {
        (r - delta * (big_r - tau * lower)).min(0.0)
    } else {
        r
    }
}

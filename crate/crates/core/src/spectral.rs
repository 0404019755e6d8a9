//! Analytic second-order QoS statistics and empirical spectral estimation.
//!
//! The per-load indicator process obeys a linear system driven by a
//! martingale-difference noise plus the broadcast command. Its PSD is
//! evaluated through the resolvent of `P0` restricted to the zero-sum
//! subspace (deflating the Perron eigenvalue), and integrating the filtered
//! PSD gives the QoS variance. An independent route through the Markov
//! autocovariance cross-checks the resolvent computation.

use nalgebra::{Complex, DMatrix, DVector};
use rustfft::{num_complex::Complex64 as FftComplex, FftPlanner};

use crate::error::{DispatchError, Result};
use crate::load_model::TransitionModel;
use crate::mean_field::{stationary_pmf, zero_sum_basis, Pmf};
use crate::qos::QosFilter;

/// Default frequency-grid resolution.
pub const DEFAULT_GRID: usize = 1 << 14;

/// Scalar spectral density sampled on the uniform grid
/// `theta_k = -pi + 2 pi k / n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDensity {
    theta: Vec<f64>,
    values: Vec<f64>,
}

impl SpectralDensity {
    pub fn uniform_thetas(n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| -std::f64::consts::PI + 2.0 * std::f64::consts::PI * k as f64 / n as f64)
            .collect()
    }

    /// Evaluates `f(theta)` on the uniform grid.
    pub fn from_fn(n: usize, f: impl Fn(f64) -> f64) -> Self {
        let theta = Self::uniform_thetas(n);
        let values = theta.iter().map(|&t| f(t)).collect();
        Self { theta, values }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            theta: Self::uniform_thetas(n),
            values: vec![0.0; n],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self {
            theta: Self::uniform_thetas(values.len()),
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn thetas(&self) -> &[f64] {
        &self.theta
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at `theta = 0`.
    pub fn at_zero(&self) -> f64 {
        self.values[self.len() / 2]
    }

    /// `(1/2pi) \int S(theta) d theta`: the process variance. On the
    /// periodic uniform grid the trapezoidal rule reduces to the mean.
    pub fn mean_integral(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.len() as f64
    }
}

/// Nominal noise model of the lifted single-load system: the stationary
/// covariance of the one-step indicator noise, and the mean input-coupling
/// direction.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    /// `Sigma_Delta = sum_x pi0(x) (diag(P0(x,.)) - P0(x,.)^T P0(x,.))`.
    pub sigma_delta: DMatrix<f64>,
    /// `B_j = sum_x pi0(x) E(x, x^j)`, the linearized input direction.
    pub b_bar: DVector<f64>,
}

impl NoiseModel {
    pub fn nominal(model: &TransitionModel) -> Result<Self> {
        let pi0 = stationary_pmf(model.nominal())?;
        let sigma_delta = nominal_noise_covariance(model.nominal(), &pi0);
        let (first, _) = model.derivative_matrices();
        let b_bar = first.transpose() * pi0.weights();
        Ok(Self { sigma_delta, b_bar })
    }
}

/// Stationary covariance of the one-step indicator noise
/// `Delta_{t+1} = e_{X_{t+1}} - P0(X_t, .)` given `X_t ~ pi0`.
pub fn nominal_noise_covariance(p0: &DMatrix<f64>, pi0: &Pmf) -> DMatrix<f64> {
    let d = p0.nrows();
    let mut sigma = DMatrix::<f64>::zeros(d, d);
    for x in 0..d {
        let w = pi0.weights()[x];
        if w == 0.0 {
            continue;
        }
        for i in 0..d {
            let p_i = p0[(x, i)];
            sigma[(i, i)] += w * p_i;
            for j in 0..d {
                sigma[(i, j)] -= w * p_i * p0[(x, j)];
            }
        }
    }
    sigma
}

/// Autocovariance `c(k) = pi0 diag(l~) P0^k l~` of `l(X_t)` under the
/// stationary chain, for lags `0..=max_lag`.
pub fn markov_autocovariance(
    p0: &DMatrix<f64>,
    pi0: &Pmf,
    ell: &DVector<f64>,
    max_lag: usize,
) -> Vec<f64> {
    let mean = pi0.weights().dot(ell);
    let centered = ell.map(|v| v - mean);
    let mut propagated = centered.clone();
    let mut out = Vec::with_capacity(max_lag + 1);
    for lag in 0..=max_lag {
        if lag > 0 {
            propagated = p0 * &propagated;
        }
        let c: f64 = pi0
            .weights()
            .iter()
            .zip(centered.iter().zip(propagated.iter()))
            .map(|(&w, (&a, &b))| w * a * b)
            .sum();
        out.push(c);
    }
    out
}

/// Cosine transform of an autocovariance sequence,
/// `S(theta) = c(0) + 2 sum_k c(k) cos(k theta)`, on the uniform grid.
pub fn autocovariance_psd(autocov: &[f64], grid: usize) -> Result<SpectralDensity> {
    if autocov.is_empty() {
        return Err(DispatchError::InvalidParameter(
            "empty autocovariance".into(),
        ));
    }
    if autocov.len() >= grid / 2 {
        return Err(DispatchError::InvalidParameter(format!(
            "grid {grid} too coarse for {} lags",
            autocov.len()
        )));
    }
    // Symmetric circular embedding, then one FFT.
    let mut buf = vec![FftComplex::new(0.0, 0.0); grid];
    buf[0].re = autocov[0];
    for (k, &c) in autocov.iter().enumerate().skip(1) {
        buf[k].re += c;
        buf[grid - k].re += c;
    }
    FftPlanner::new().plan_fft_forward(grid).process(&mut buf);
    let mut values = vec![0.0; grid];
    for (k, value) in values.iter_mut().enumerate() {
        *value = buf[(k + grid / 2) % grid].re;
    }
    Ok(SpectralDensity::from_values(values))
}

/// Nominal and input-coupled components of the PSD of `l(X_t)`.
///
/// Returns `(S_nom, S_in)` such that the PSD at reference scaling `eps` is
/// `S_L(theta) = S_nom(theta) + eps^2 S_in(theta)`; `S_in` already includes
/// the unit-scale command PSD `s_zeta_unit`.
pub fn psd_components(
    noise: &NoiseModel,
    p0: &DMatrix<f64>,
    ell: &DVector<f64>,
    s_zeta_unit: &SpectralDensity,
) -> Result<(SpectralDensity, SpectralDensity)> {
    let d = p0.nrows();
    let n = s_zeta_unit.len();
    let pi0 = stationary_pmf(p0)?;
    let mean = pi0.weights().dot(ell);
    let centered = ell.map(|v| v - mean);

    let q = zero_sum_basis(d);
    // S_L = v^H S_D v with v = Q (e^{-j theta} I - A_V^T)^{-1} Q^T l~ and
    // A_V = Q^T P0^T Q, the dynamics restricted to the zero-sum subspace.
    let a_v = q.transpose() * p0.transpose() * &q;
    let a_v_t = a_v.transpose();
    let target = q.transpose() * &centered;
    let target_c =
        DVector::<Complex<f64>>::from_iterator(d - 1, target.iter().map(|&v| Complex::new(v, 0.0)));
    let target_norm = target_c.norm();

    // (nominal quadratic form, |v^H B|^2) at one frequency.
    let evaluate = |theta: f64| -> Result<(f64, f64)> {
        let mut m = a_v_t.map(|v| Complex::new(-v, 0.0));
        let pole = Complex::new(theta.cos(), -theta.sin());
        for i in 0..d - 1 {
            m[(i, i)] += pole;
        }
        let u = m
            .clone()
            .lu()
            .solve(&target_c)
            .ok_or(DispatchError::SingularResolvent(theta))?;
        let residual = (&m * &u - &target_c).norm();
        if !residual.is_finite() || residual > 1e-8 * (1.0 + target_norm) {
            return Err(DispatchError::SingularResolvent(theta));
        }
        // A grid point within rounding distance of a unit-circle eigenvalue
        // produces an astronomically large resolvent.
        if u.norm() > 1e12 * (1.0 + target_norm) {
            return Err(DispatchError::SingularResolvent(theta));
        }
        // Back to full coordinates: v = Q u (real basis, complex vector).
        let mut v = DVector::<Complex<f64>>::zeros(d);
        for i in 0..d {
            let mut acc = Complex::new(0.0, 0.0);
            for k in 0..d - 1 {
                acc += q[(i, k)] * u[k];
            }
            v[i] = acc;
        }
        let mut quad = Complex::new(0.0, 0.0);
        for i in 0..d {
            let mut row = Complex::new(0.0, 0.0);
            for j in 0..d {
                row += noise.sigma_delta[(i, j)] * v[j];
            }
            quad += v[i].conj() * row;
        }
        let mut coupling = Complex::new(0.0, 0.0);
        for i in 0..d {
            coupling += v[i].conj() * noise.b_bar[i];
        }
        Ok((quad.re, coupling.norm_sqr()))
    };

    let mut nom = vec![0.0; n];
    let mut coupling_sq = vec![0.0; n];
    let thetas = s_zeta_unit.thetas();
    // Both components are even in theta: evaluate [0, pi) and mirror.
    for k in n / 2..n {
        let (quad, csq) = evaluate(thetas[k])?;
        nom[k] = quad;
        coupling_sq[k] = csq;
        let mirror = n - k;
        if mirror < n {
            nom[mirror] = quad;
            coupling_sq[mirror] = csq;
        }
    }
    let (quad, csq) = evaluate(thetas[0])?;
    nom[0] = quad;
    coupling_sq[0] = csq;

    let input: Vec<f64> = coupling_sq
        .iter()
        .zip(s_zeta_unit.values())
        .map(|(&c, &s)| c * s)
        .collect();
    Ok((
        SpectralDensity::from_values(nom),
        SpectralDensity::from_values(input),
    ))
}

/// PSD of the per-load increment process `L_t = l(X_t)` under the rank-one
/// input approximation `S_D(theta) = Sigma_Delta + eps^2 S_zeta(theta) B B^T`.
pub fn psd_of_l(
    noise: &NoiseModel,
    p0: &DMatrix<f64>,
    ell: &DVector<f64>,
    s_zeta_unit: &SpectralDensity,
    eps: f64,
) -> Result<SpectralDensity> {
    let (nom, input) = psd_components(noise, p0, ell, s_zeta_unit)?;
    let values = nom
        .values()
        .iter()
        .zip(input.values())
        .map(|(&a, &b)| a + eps * eps * b)
        .collect();
    Ok(SpectralDensity::from_values(values))
}

/// QoS variance `(1/2pi) \int |H(e^{j theta})|^2 S_L(theta) d theta` by
/// quadrature on the grid.
pub fn qos_variance(s_l: &SpectralDensity, filter: QosFilter) -> f64 {
    s_l.thetas()
        .iter()
        .zip(s_l.values())
        .map(|(&theta, &s)| filter.gain_squared(theta) * s)
        .sum::<f64>()
        / s_l.len() as f64
}

/// Nominal and second-order terms of the QoS variance in `eps^2`.
#[derive(Debug, Clone)]
pub struct VarianceTaylor {
    /// Variance with the command held at zero.
    pub nominal: f64,
    /// Coefficient of `eps^2`.
    pub second_order: f64,
    /// Full variance evaluated at each requested `eps` (diagnostic).
    pub at_eps: Vec<(f64, f64)>,
}

/// Splits the QoS variance into its nominal part and the slope against
/// `eps^2`, exact under the rank-one input structure.
pub fn variance_taylor(
    noise: &NoiseModel,
    p0: &DMatrix<f64>,
    ell: &DVector<f64>,
    filter: QosFilter,
    s_zeta_unit: &SpectralDensity,
    eps_grid: &[f64],
) -> Result<VarianceTaylor> {
    let (nom, input) = psd_components(noise, p0, ell, s_zeta_unit)?;
    let nominal = qos_variance(&nom, filter);
    let second_order = qos_variance(&input, filter);
    let at_eps = eps_grid
        .iter()
        .map(|&eps| {
            let values: Vec<f64> = nom
                .values()
                .iter()
                .zip(input.values())
                .map(|(&a, &b)| a + eps * eps * b)
                .collect();
            (
                eps,
                qos_variance(&SpectralDensity::from_values(values), filter),
            )
        })
        .collect();
    Ok(VarianceTaylor {
        nominal,
        second_order,
        at_eps,
    })
}

/// Welch-averaged periodogram with a Hann window, normalized so that
/// `(1/2pi) \int S = sample variance`.
pub fn welch_psd(series: &[f64], segment_length: usize, overlap: f64) -> Result<SpectralDensity> {
    if segment_length < 8 {
        return Err(DispatchError::InvalidParameter(
            "segment length must be at least 8".into(),
        ));
    }
    if series.len() < 2 * segment_length {
        return Err(DispatchError::InsufficientData {
            required: 2 * segment_length,
            got: series.len(),
        });
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(DispatchError::InvalidParameter(format!(
            "overlap {overlap} outside [0, 1)"
        )));
    }
    let n = segment_length;
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect();
    let window_power: f64 = window.iter().map(|w| w * w).sum();
    let hop = ((n as f64) * (1.0 - overlap)).round().max(1.0) as usize;

    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut acc = vec![0.0f64; n];
    let mut segments = 0usize;
    let mut buf = vec![FftComplex::new(0.0, 0.0); n];
    let mut start = 0usize;
    while start + n <= series.len() {
        for i in 0..n {
            buf[i] = FftComplex::new((series[start + i] - mean) * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(buf.iter()) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += hop;
    }
    let scale = 1.0 / (segments as f64 * window_power);
    let mut values = vec![0.0; n];
    for (k, value) in values.iter_mut().enumerate() {
        *value = acc[(k + n / 2) % n] * scale;
    }
    Ok(SpectralDensity::from_values(values))
}

/// Histogram of samples with a Gaussian overlay and the Kolmogorov-Smirnov
/// distance to that Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianOverlay {
    /// `num_bins + 1` edges covering the sample range.
    pub bin_edges: Vec<f64>,
    /// Normalized histogram density per bin.
    pub density: Vec<f64>,
    /// Raw counts per bin.
    pub counts: Vec<u64>,
    /// Gaussian pdf at bin centers.
    pub gaussian_pdf: Vec<f64>,
    pub ks_distance: f64,
    pub sample_count: usize,
}

/// Minimum sample count for [`gaussian_overlay`].
pub const OVERLAY_MIN_SAMPLES: usize = 1000;

/// Builds the histogram/Gaussian overlay record for QoS samples.
pub fn gaussian_overlay(
    samples: &[f64],
    mean: f64,
    variance: f64,
    num_bins: usize,
) -> Result<GaussianOverlay> {
    if samples.len() < OVERLAY_MIN_SAMPLES {
        return Err(DispatchError::InsufficientData {
            required: OVERLAY_MIN_SAMPLES,
            got: samples.len(),
        });
    }
    if !(variance > 0.0) || num_bins == 0 {
        return Err(DispatchError::InvalidParameter(
            "variance must be positive and bins nonzero".into(),
        ));
    }
    let std = variance.sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = normal_cdf((x - mean) / std);
        ks = ks.max(cdf - i as f64 / n).max((i + 1) as f64 / n - cdf);
    }

    let lo = sorted[0].min(mean - 4.0 * std);
    let hi = sorted[sorted.len() - 1].max(mean + 4.0 * std);
    let width = (hi - lo) / num_bins as f64;
    let mut counts = vec![0u64; num_bins];
    for &x in &sorted {
        let bin = (((x - lo) / width) as usize).min(num_bins - 1);
        counts[bin] += 1;
    }
    let density: Vec<f64> = counts.iter().map(|&c| c as f64 / (n * width)).collect();
    let bin_edges: Vec<f64> = (0..=num_bins).map(|i| lo + width * i as f64).collect();
    let gaussian_pdf: Vec<f64> = (0..num_bins)
        .map(|i| {
            let center = lo + width * (i as f64 + 0.5);
            let z = (center - mean) / std;
            (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect();
    Ok(GaussianOverlay {
        bin_edges,
        density,
        counts,
        gaussian_pdf,
        ks_distance: ks,
        sample_count: sorted.len(),
    })
}

/// Standard normal CDF via a rational erfc approximation (absolute error
/// below 1.2e-7).
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

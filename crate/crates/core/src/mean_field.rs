//! Deterministic population-level model: pmf evolution, stationary
//! distribution, aggregate output, and the linear state-space approximation
//! around the nominal equilibrium.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{DispatchError, Result};
use crate::load_model::{LoadState, TransitionModel, ROW_SUM_TOL};

/// Probability mass function over the load state space.
#[derive(Debug, Clone, PartialEq)]
pub struct Pmf {
    weights: DVector<f64>,
}

impl Pmf {
    pub fn new(weights: DVector<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(DispatchError::EmptyPopulation);
        }
        let mut sum = 0.0;
        for &w in weights.iter() {
            if w < 0.0 || !w.is_finite() {
                return Err(DispatchError::InvalidParameter(format!(
                    "pmf entry {w} is not a probability"
                )));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(DispatchError::InvalidParameter(format!(
                "pmf sums to {sum}"
            )));
        }
        Ok(Self { weights })
    }

    /// Point mass on one state index.
    pub fn delta(dim: usize, index: usize) -> Self {
        let mut weights = DVector::zeros(dim);
        weights[index] = 1.0;
        Self { weights }
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// L1 distance to another pmf.
    pub fn l1_distance(&self, other: &Pmf) -> f64 {
        self.weights
            .iter()
            .zip(other.weights.iter())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// One step of the mean-field recursion `mu' = mu P`.
pub fn evolve(mu: &Pmf, p: &DMatrix<f64>) -> Result<Pmf> {
    if p.nrows() != mu.dim() || p.ncols() != mu.dim() {
        return Err(DispatchError::DimensionMismatch {
            expected: mu.dim(),
            got: p.nrows(),
        });
    }
    let row = RowDVector::from_iterator(mu.dim(), mu.weights.iter().copied());
    let next = row * p;
    // Guard against rounding drift before revalidating.
    let sum: f64 = next.iter().sum();
    let weights = DVector::from_iterator(next.len(), next.iter().map(|v| v / sum));
    Pmf::new(weights)
}

/// Unique stationary pmf of an irreducible aperiodic chain.
///
/// Direct linear solve of `(P^T - I) pi = 0` with the normalization row for
/// dimensions up to [`DIRECT_SOLVE_LIMIT`], power iteration above.
pub fn stationary_pmf(p0: &DMatrix<f64>) -> Result<Pmf> {
    const TOL: f64 = 1e-10;
    let d = p0.nrows();
    if d == 0 || p0.ncols() != d {
        return Err(DispatchError::InvalidParameter(
            "stationary_pmf needs a square matrix".into(),
        ));
    }
    let pi = if d <= DIRECT_SOLVE_LIMIT {
        let mut system = p0.transpose() - DMatrix::<f64>::identity(d, d);
        for j in 0..d {
            system[(d - 1, j)] = 1.0;
        }
        let mut rhs = DVector::<f64>::zeros(d);
        rhs[d - 1] = 1.0;
        system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| DispatchError::NonConvergence("singular balance system".into()))?
    } else {
        let mut pi = DVector::<f64>::from_element(d, 1.0 / d as f64);
        let pt = p0.transpose();
        let mut converged = false;
        for _ in 0..200_000 {
            let next = &pt * &pi;
            let delta: f64 = next.iter().zip(pi.iter()).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < TOL / 10.0 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(DispatchError::NonConvergence(
                "power iteration did not reach tolerance".into(),
            ));
        }
        pi
    };
    // Clamp solver noise, renormalize, and verify the balance residual.
    let mut pi = pi.map(|v| if v < 0.0 { 0.0 } else { v });
    let sum: f64 = pi.iter().sum();
    pi /= sum;
    let residual: f64 = (p0.transpose() * &pi - &pi).iter().map(|v| v.abs()).sum();
    if residual > TOL {
        return Err(DispatchError::NonConvergence(format!(
            "stationary residual {residual}"
        )));
    }
    Pmf::new(pi)
}

/// Matrices this small are solved directly; larger ones by power iteration.
pub const DIRECT_SOLVE_LIMIT: usize = 2000;

/// Aggregate output `y = sum_x mu(x) u(x)` in kW per load.
pub fn aggregate_output(mu: &Pmf, utility: &DVector<f64>) -> f64 {
    mu.weights().dot(utility)
}

/// Empirical pmf of a population given state indices into a `d`-state space.
pub fn empirical_pmf_indices(indices: &[usize], dim: usize) -> Result<Pmf> {
    if indices.is_empty() {
        return Err(DispatchError::EmptyPopulation);
    }
    let mut weights = DVector::<f64>::zeros(dim);
    let w = 1.0 / indices.len() as f64;
    for &i in indices {
        weights[i] += w;
    }
    Pmf::new(weights)
}

/// Empirical pmf of a population of load states under a model's layout.
pub fn empirical_pmf(states: &[LoadState], model: &TransitionModel) -> Result<Pmf> {
    let indices: Vec<usize> = states.iter().map(|&s| model.state_index(s)).collect();
    empirical_pmf_indices(&indices, model.dim())
}

/// Linear state-space approximation of the mean-field model around the
/// nominal equilibrium: `Phi_{t+1} = A Phi_t + B zeta_t`, `gamma_t = C Phi_t`,
/// with `A = P0^T`, `B_j = sum_x pi0(x) E(x, x^j)`, `C_i = u(x^i)`.
#[derive(Debug, Clone)]
pub struct LinearMfm {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: RowDVector<f64>,
    /// Average nominal power `sum_x pi0(x) u(x)` in kW.
    pub nominal_output: f64,
    pub stationary: Pmf,
}

/// Builds the linear mean-field model for a transition model.
pub fn linearize(model: &TransitionModel) -> Result<LinearMfm> {
    let pi0 = stationary_pmf(model.nominal())?;
    let (first, _) = model.derivative_matrices();
    let b = first.transpose() * pi0.weights();
    let c = RowDVector::from_iterator(model.dim(), model.utility().iter().copied());
    let nominal_output = aggregate_output(&pi0, model.utility());
    Ok(LinearMfm {
        a: model.nominal().transpose(),
        b,
        c,
        nominal_output,
        stationary: pi0,
    })
}

/// Orthonormal basis `Q` (d x (d-1)) of the zero-sum subspace, built from the
/// Householder reflector that maps `e_1` to the normalized all-ones vector.
pub fn zero_sum_basis(dim: usize) -> DMatrix<f64> {
    let mut v = DVector::<f64>::from_element(dim, 1.0 / (dim as f64).sqrt());
    v[0] -= 1.0;
    let norm_sq = v.norm_squared();
    let mut h = DMatrix::<f64>::identity(dim, dim);
    if norm_sq > 0.0 {
        h -= (&v * v.transpose()) * (2.0 / norm_sq);
    }
    h.columns(1, dim - 1).into_owned()
}

impl LinearMfm {
    /// Restriction of (A, B, C) to the zero-sum subspace, where the Perron
    /// eigenvalue is deflated away. Returns `(Q, A_V, B_V, C_V)` with
    /// `A_V = Q^T A Q`.
    pub fn deflated(&self) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>, RowDVector<f64>) {
        let q = zero_sum_basis(self.a.nrows());
        let a_v = q.transpose() * &self.a * &q;
        let b_v = q.transpose() * &self.b;
        let c_v = &self.c * &q;
        (q, a_v, b_v, c_v)
    }
}

//! Finite-state on/off load model with an exponentially tilted controlled
//! transition matrix.
//!
//! A load is a Markov chain on states `(mode, sojourn)`: the mode is On or
//! Off, the sojourn index counts sampling epochs spent in the current mode
//! (saturating at `I`). The broadcast command `zeta` reweights the nominal
//! transition probabilities by `exp(zeta * utility)` and renormalizes, so
//! positive commands shift probability mass toward consuming states.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{DispatchError, Result};

/// Row sums of stochastic matrices must hold to this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Operating mode of a load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    On,
    Off,
}

impl Mode {
    pub fn flipped(self) -> Mode {
        match self {
            Mode::On => Mode::Off,
            Mode::Off => Mode::On,
        }
    }
}

/// One load's position in the state space: mode plus sojourn index in `1..=I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LoadState {
    pub mode: Mode,
    pub sojourn: usize,
}

impl LoadState {
    pub fn new(mode: Mode, sojourn: usize) -> Self {
        Self { mode, sojourn }
    }

    pub fn is_on(&self) -> bool {
        self.mode == Mode::On
    }
}

/// Controlled transition-matrix family for a homogeneous load population.
///
/// Holds the nominal matrix `P0`, the per-state utility (kW consumed), the
/// tilting exponent vector, and the `LoadState <-> index` layout. Immutable
/// after construction; shared read-only by every load.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    nominal: DMatrix<f64>,
    utility: DVector<f64>,
    tilt: DVector<f64>,
    num_sojourn: usize,
}

impl TransitionModel {
    /// Builds a model from explicit parts. `num_sojourn` fixes the state
    /// layout: indices `0..I` are `(On, 1..=I)`, indices `I..2I` are
    /// `(Off, 1..=I)`.
    pub fn from_parts(
        nominal: DMatrix<f64>,
        utility: DVector<f64>,
        tilt: DVector<f64>,
        num_sojourn: usize,
    ) -> Result<Self> {
        let d = nominal.nrows();
        if d == 0 || nominal.ncols() != d {
            return Err(DispatchError::InvalidParameter(
                "transition matrix must be square and nonempty".into(),
            ));
        }
        if d != 2 * num_sojourn {
            return Err(DispatchError::DimensionMismatch {
                expected: 2 * num_sojourn,
                got: d,
            });
        }
        if utility.len() != d {
            return Err(DispatchError::DimensionMismatch {
                expected: d,
                got: utility.len(),
            });
        }
        if tilt.len() != d {
            return Err(DispatchError::DimensionMismatch {
                expected: d,
                got: tilt.len(),
            });
        }
        for i in 0..d {
            let mut sum = 0.0;
            for j in 0..d {
                let p = nominal[(i, j)];
                if p < 0.0 || !p.is_finite() {
                    return Err(DispatchError::InvalidParameter(format!(
                        "nominal[{i},{j}] = {p} is not a probability"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(DispatchError::InvalidParameter(format!(
                    "row {i} of nominal matrix sums to {sum}"
                )));
            }
        }
        Ok(Self {
            nominal,
            utility,
            tilt,
            num_sojourn,
        })
    }

    /// Nominal pool chain: alternate On/Off with geometric switching hazard
    /// `p = sampling_period / (mean_cycle_hours * 60)` per epoch, sojourn
    /// incrementing (saturating at `I`) inside a mode and resetting to 1 on a
    /// switch. Utility is 1 kW for On states, 0 for Off.
    pub fn build_pool_nominal(
        num_sojourn: usize,
        sampling_period_min: f64,
        mean_cycle_hours: f64,
    ) -> Result<Self> {
        if num_sojourn < 2 {
            return Err(DispatchError::InvalidParameter(format!(
                "need at least 2 sojourn states, got {num_sojourn}"
            )));
        }
        if !(sampling_period_min > 0.0) || !(mean_cycle_hours > 0.0) {
            return Err(DispatchError::InvalidParameter(
                "sampling period and mean cycle must be positive".into(),
            ));
        }
        let hazard = sampling_period_min / (mean_cycle_hours * 60.0);
        if hazard >= 1.0 {
            return Err(DispatchError::InvalidParameter(format!(
                "switching hazard {hazard} >= 1; shorten the sampling period"
            )));
        }
        let d = 2 * num_sojourn;
        let mut nominal = DMatrix::<f64>::zeros(d, d);
        let mut utility = DVector::<f64>::zeros(d);
        for mode in [Mode::On, Mode::Off] {
            for sojourn in 1..=num_sojourn {
                let from = index_of(mode, sojourn, num_sojourn);
                let stay = index_of(mode, (sojourn + 1).min(num_sojourn), num_sojourn);
                let switch = index_of(mode.flipped(), 1, num_sojourn);
                nominal[(from, stay)] += 1.0 - hazard;
                nominal[(from, switch)] += hazard;
                if mode == Mode::On {
                    utility[from] = 1.0;
                }
            }
        }
        let tilt = utility.clone();
        Self::from_parts(nominal, utility, tilt, num_sojourn)
    }

    pub fn dim(&self) -> usize {
        self.nominal.nrows()
    }

    pub fn num_sojourn(&self) -> usize {
        self.num_sojourn
    }

    pub fn nominal(&self) -> &DMatrix<f64> {
        &self.nominal
    }

    pub fn utility(&self) -> &DVector<f64> {
        &self.utility
    }

    /// Index of a state in the matrix layout.
    pub fn state_index(&self, state: LoadState) -> usize {
        debug_assert!(state.sojourn >= 1 && state.sojourn <= self.num_sojourn);
        index_of(state.mode, state.sojourn, self.num_sojourn)
    }

    /// Inverse of [`state_index`](Self::state_index).
    pub fn state_at(&self, index: usize) -> LoadState {
        debug_assert!(index < self.dim());
        if index < self.num_sojourn {
            LoadState::new(Mode::On, index + 1)
        } else {
            LoadState::new(Mode::Off, index - self.num_sojourn + 1)
        }
    }

    /// Controlled transition matrix `P_zeta` with
    /// `P_zeta(x, x') = P0(x, x') exp(zeta u(x')) / Z(x, zeta)`.
    pub fn transition_matrix(&self, zeta: f64) -> DMatrix<f64> {
        let d = self.dim();
        let weights = self.tilt_weights(zeta);
        let mut out = DMatrix::<f64>::zeros(d, d);
        let mut row = vec![0.0; d];
        for i in 0..d {
            self.fill_tilted_row(i, &weights, &mut row);
            for j in 0..d {
                out[(i, j)] = row[j];
            }
        }
        out
    }

    fn tilt_weights(&self, zeta: f64) -> Vec<f64> {
        self.tilt.iter().map(|&u| (zeta * u).exp()).collect()
    }

    /// Writes row `i` of `P_zeta` into `out` given precomputed tilt weights.
    fn fill_tilted_row(&self, i: usize, weights: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let mut z = 0.0;
        for j in 0..d {
            let v = self.nominal[(i, j)] * weights[j];
            out[j] = v;
            z += v;
        }
        for v in out.iter_mut() {
            *v /= z;
        }
    }

    /// Closed-form first and second derivatives of `P_zeta` at `zeta = 0`.
    ///
    /// With `m1(x) = sum_x' P0(x,x') u(x')` and `m2(x) = sum_x' P0(x,x') u(x')^2`:
    /// first derivative `P0(x,x') (u(x') - m1(x))`, second derivative
    /// `P0(x,x') ((u(x') - m1(x))^2 - (m2(x) - m1(x)^2))`. Every row of both
    /// sums to zero.
    pub fn derivative_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut first = DMatrix::<f64>::zeros(d, d);
        let mut second = DMatrix::<f64>::zeros(d, d);
        for i in 0..d {
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..d {
                let u = self.tilt[j];
                m1 += self.nominal[(i, j)] * u;
                m2 += self.nominal[(i, j)] * u * u;
            }
            let var = m2 - m1 * m1;
            for j in 0..d {
                let centered = self.tilt[j] - m1;
                first[(i, j)] = self.nominal[(i, j)] * centered;
                second[(i, j)] = self.nominal[(i, j)] * (centered * centered - var);
            }
        }
        (first, second)
    }

    /// Draws the next state from row `P_zeta(state, .)`.
    ///
    /// Repeated calls with identical seeds and command sequences reproduce
    /// identical trajectories; the arithmetic matches [`TransitionSampler`]
    /// exactly.
    pub fn sample_step<R: Rng + ?Sized>(
        &self,
        state: LoadState,
        zeta: f64,
        rng: &mut R,
    ) -> LoadState {
        let weights = self.tilt_weights(zeta);
        let mut row = vec![0.0; self.dim()];
        self.fill_tilted_row(self.state_index(state), &weights, &mut row);
        cumsum_in_place(&mut row);
        let next = search_cumulative(&row, rng.random::<f64>());
        self.state_at(next)
    }

    /// Precomputes cumulative rows of `P_zeta` for one epoch of population
    /// stepping.
    pub fn sampler(&self, zeta: f64) -> TransitionSampler<'_> {
        let d = self.dim();
        let weights = self.tilt_weights(zeta);
        let mut rows = vec![0.0; d * d];
        for i in 0..d {
            let row = &mut rows[i * d..(i + 1) * d];
            self.fill_tilted_row(i, &weights, row);
            cumsum_in_place(row);
        }
        TransitionSampler {
            model: self,
            rows,
            dim: d,
        }
    }

    /// Irreducibility check: `(P0 + I)^d` has all entries positive
    /// (computed on the boolean adjacency structure).
    pub fn is_irreducible(&self) -> bool {
        let d = self.dim();
        let mut reach = vec![false; d * d];
        for i in 0..d {
            reach[i * d + i] = true;
            for j in 0..d {
                if self.nominal[(i, j)] > 0.0 {
                    reach[i * d + j] = true;
                }
            }
        }
        // Boolean squaring until the power exceeds d.
        let mut power = 1usize;
        while power < d {
            let mut next = vec![false; d * d];
            for i in 0..d {
                for k in 0..d {
                    if reach[i * d + k] {
                        for j in 0..d {
                            if reach[k * d + j] {
                                next[i * d + j] = true;
                            }
                        }
                    }
                }
            }
            reach = next;
            power *= 2;
        }
        reach.iter().all(|&r| r)
    }
}

fn index_of(mode: Mode, sojourn: usize, num_sojourn: usize) -> usize {
    match mode {
        Mode::On => sojourn - 1,
        Mode::Off => num_sojourn + sojourn - 1,
    }
}

fn cumsum_in_place(row: &mut [f64]) {
    let mut acc = 0.0;
    for v in row.iter_mut() {
        acc += *v;
        *v = acc;
    }
}

/// Per-epoch sampler over precomputed cumulative rows of `P_zeta`.
pub struct TransitionSampler<'a> {
    model: &'a TransitionModel,
    rows: Vec<f64>,
    dim: usize,
}

impl TransitionSampler<'_> {
    /// Samples the successor index of `state_index` using one uniform draw.
    pub fn sample_index<R: Rng + ?Sized>(&self, state_index: usize, rng: &mut R) -> usize {
        let row = &self.rows[state_index * self.dim..(state_index + 1) * self.dim];
        search_cumulative(row, rng.random::<f64>())
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: LoadState, rng: &mut R) -> LoadState {
        let idx = self.sample_index(self.model.state_index(state), rng);
        self.model.state_at(idx)
    }
}

fn search_cumulative(cum: &[f64], u: f64) -> usize {
    // Smallest index with u < cum[i]; the final entry is 1 up to rounding.
    let mut lo = 0usize;
    let mut hi = cum.len() - 1;
    while lo < hi {
        let mid = (lo + hi) / 2;
        if u < cum[mid] {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

//! Per-load quality-of-service metrics: filtered functions of the state
//! trajectory, the population average, the SOC-style filtered reference, and
//! the opt-out guard that keeps every load's QoS inside hard bounds.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use crate::error::{DispatchError, Result};
use crate::load_model::{LoadState, Mode};
use crate::mean_field::Pmf;

/// Stable filter applied to the per-epoch QoS increments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QosFilter {
    /// `L_t = sum_k beta^k l(X_{t-k})` with `beta` in `[0, 1)`.
    Discounted { beta: f64 },
    /// `L_t = sum_{k=0}^{horizon} l(X_{t-k})`.
    MovingWindow { horizon: usize },
}

impl QosFilter {
    pub fn discounted(beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(DispatchError::InvalidParameter(format!(
                "discount factor {beta} outside [0, 1)"
            )));
        }
        Ok(Self::Discounted { beta })
    }

    /// DC gain `H(1)`: `1/(1-beta)` or `horizon + 1`.
    pub fn dc_gain(&self) -> f64 {
        match *self {
            Self::Discounted { beta } => 1.0 / (1.0 - beta),
            Self::MovingWindow { horizon } => (horizon + 1) as f64,
        }
    }

    /// Squared magnitude of the filter frequency response at `theta`.
    pub fn gain_squared(&self, theta: f64) -> f64 {
        match *self {
            Self::Discounted { beta } => 1.0 / (1.0 + beta * beta - 2.0 * beta * theta.cos()),
            Self::MovingWindow { horizon } => {
                let n = (horizon + 1) as f64;
                let half = theta / 2.0;
                if half.sin().abs() < 1e-12 {
                    n * n
                } else {
                    let s = (n * half).sin() / half.sin();
                    s * s
                }
            }
        }
    }
}

/// Mean length of the geometric window matching a discount factor:
/// `E[xi] = 1/(1-beta)`.
pub fn expected_window(beta: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&beta) {
        return Err(DispatchError::InvalidParameter(format!(
            "discount factor {beta} outside [0, 1)"
        )));
    }
    Ok(1.0 / (1.0 - beta))
}

/// Discount factor whose geometric window has the given mean length.
pub fn discount_for_window(epochs: f64) -> Result<f64> {
    if !(epochs >= 1.0) {
        return Err(DispatchError::InvalidParameter(format!(
            "window must be at least one epoch, got {epochs}"
        )));
    }
    Ok(1.0 - 1.0 / epochs)
}

/// Per-epoch QoS increment as a function of the state transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QosMetric {
    /// Power consumption: the On indicator of the next state.
    Power,
    /// Power deviation from the nominal average `nominal` (kW).
    NormalizedPower { nominal: f64 },
    /// On/off cycling: both switch indicators fire on a mode change, so a
    /// switch contributes 2 and staying contributes 0.
    Cycling,
}

impl QosMetric {
    /// Largest possible `|increment|`, used for bound-feasibility checks.
    pub fn max_abs_increment(&self) -> f64 {
        match *self {
            Self::Power => 1.0,
            Self::NormalizedPower { nominal } => nominal.abs().max((1.0 - nominal).abs()),
            Self::Cycling => 2.0,
        }
    }

    /// Higher increments require more consumption (true for the power
    /// metrics); the cycling metric instead penalizes switching.
    pub fn tracks_power(&self) -> bool {
        !matches!(self, Self::Cycling)
    }
}

/// QoS increment for the transition `prev -> next`.
pub fn qos_increment(metric: QosMetric, prev: LoadState, next: LoadState) -> f64 {
    match metric {
        QosMetric::Power => {
            if next.is_on() {
                1.0
            } else {
                0.0
            }
        }
        QosMetric::NormalizedPower { nominal } => (if next.is_on() { 1.0 } else { 0.0 }) - nominal,
        QosMetric::Cycling => {
            if next.mode != prev.mode {
                2.0
            } else {
                0.0
            }
        }
    }
}

/// Expected per-epoch increment under the nominal stationary chain; used to
/// initialize trackers at their stationary mean.
pub fn stationary_mean_increment(
    metric: QosMetric,
    nominal: &DMatrix<f64>,
    pi0: &Pmf,
    num_sojourn: usize,
) -> f64 {
    let d = nominal.nrows();
    let is_on = |idx: usize| idx < num_sojourn;
    let mut acc = 0.0;
    for x in 0..d {
        for x_next in 0..d {
            let p = pi0.weights()[x] * nominal[(x, x_next)];
            if p == 0.0 {
                continue;
            }
            let inc = match metric {
                QosMetric::Power => {
                    if is_on(x_next) {
                        1.0
                    } else {
                        0.0
                    }
                }
                QosMetric::NormalizedPower { nominal } => {
                    (if is_on(x_next) { 1.0 } else { 0.0 }) - nominal
                }
                QosMetric::Cycling => {
                    if is_on(x) != is_on(x_next) {
                        2.0
                    } else {
                        0.0
                    }
                }
            };
            acc += p * inc;
        }
    }
    acc
}

/// Per-load filtered QoS value with optional hard bounds.
#[derive(Debug, Clone)]
pub struct QosTracker {
    pub filter: QosFilter,
    pub metric: QosMetric,
    value: f64,
    window: VecDeque<f64>,
    bounds: (f64, f64),
}

impl QosTracker {
    /// Creates a tracker starting at `initial` (normally the stationary mean
    /// `H(1) * E[l]`). Finite bounds must leave room for a corrective step:
    /// `upper - lower >= 4 * max |increment|`.
    pub fn new(
        filter: QosFilter,
        metric: QosMetric,
        bounds: (f64, f64),
        initial: f64,
    ) -> Result<Self> {
        let (lower, upper) = bounds;
        if lower >= upper {
            return Err(DispatchError::InvalidParameter(format!(
                "bounds [{lower}, {upper}] are empty"
            )));
        }
        if lower.is_finite() && upper.is_finite() {
            let needed = 4.0 * metric.max_abs_increment();
            if upper - lower < needed {
                return Err(DispatchError::InfeasibleBounds(format!(
                    "interval width {} below {needed}",
                    upper - lower
                )));
            }
        }
        if !(lower <= initial && initial <= upper) {
            return Err(DispatchError::InvalidParameter(format!(
                "initial value {initial} outside [{lower}, {upper}]"
            )));
        }
        let window = match filter {
            QosFilter::Discounted { .. } => VecDeque::new(),
            QosFilter::MovingWindow { horizon } => {
                let len = horizon + 1;
                VecDeque::from(vec![initial / len as f64; len])
            }
        };
        Ok(Self {
            filter,
            metric,
            value: initial,
            window,
            bounds,
        })
    }

    /// Unbounded tracker starting at zero.
    pub fn unbounded(filter: QosFilter, metric: QosMetric) -> Self {
        Self::new(filter, metric, (f64::NEG_INFINITY, f64::INFINITY), 0.0)
            .expect("unbounded tracker is always feasible")
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn has_finite_bounds(&self) -> bool {
        self.bounds.0.is_finite() || self.bounds.1.is_finite()
    }

    /// Value the tracker would take after absorbing `increment`.
    pub fn candidate(&self, increment: f64) -> f64 {
        match self.filter {
            QosFilter::Discounted { beta } => beta * self.value + increment,
            QosFilter::MovingWindow { .. } => {
                self.value + increment - self.window.front().copied().unwrap_or(0.0)
            }
        }
    }

    pub fn in_bounds(&self, value: f64) -> bool {
        self.bounds.0 <= value && value <= self.bounds.1
    }

    /// Absorbs one increment and returns the new value.
    pub fn update(&mut self, increment: f64) -> f64 {
        let next = self.candidate(increment);
        if let QosFilter::MovingWindow { .. } = self.filter {
            self.window.pop_front();
            self.window.push_back(increment);
        }
        self.value = next;
        next
    }
}

/// Outcome of the opt-out check for one proposed transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GuardDecision {
    Accept,
    Override(LoadState),
}

/// Deterministic continuation of the current state in the given mode: stay
/// and age the sojourn (saturating), or switch and reset it to 1.
pub fn continuation(current: LoadState, mode: Mode, num_sojourn: usize) -> LoadState {
    if current.mode == mode {
        LoadState::new(mode, (current.sojourn + 1).min(num_sojourn))
    } else {
        LoadState::new(mode, 1)
    }
}

/// Checks a proposed transition against one tracker's bounds.
///
/// Accepts when the candidate QoS stays inside the interval; otherwise
/// overrides with the continuation (On or Off) whose candidate value moves
/// the metric back toward the violated bound's interior. Fails with
/// `InfeasibleBounds` if neither continuation stays inside.
pub fn opt_out_guard(
    tracker: &QosTracker,
    proposed: LoadState,
    current: LoadState,
    num_sojourn: usize,
) -> Result<GuardDecision> {
    let candidate = tracker.candidate(qos_increment(tracker.metric, current, proposed));
    if tracker.in_bounds(candidate) {
        return Ok(GuardDecision::Accept);
    }
    let below = candidate < tracker.bounds.0;
    let on_state = continuation(current, Mode::On, num_sojourn);
    let off_state = continuation(current, Mode::Off, num_sojourn);
    let on_value = tracker.candidate(qos_increment(tracker.metric, current, on_state));
    let off_value = tracker.candidate(qos_increment(tracker.metric, current, off_state));
    let (state, value) = if below {
        // Under-served: take the action with the larger candidate value.
        if on_value >= off_value {
            (on_state, on_value)
        } else {
            (off_state, off_value)
        }
    } else if on_value <= off_value {
        (on_state, on_value)
    } else {
        (off_state, off_value)
    };
    if tracker.in_bounds(value) {
        Ok(GuardDecision::Override(state))
    } else {
        Err(DispatchError::InfeasibleBounds(format!(
            "no action keeps QoS in [{}, {}] from value {}",
            tracker.bounds.0, tracker.bounds.1, tracker.value
        )))
    }
}

/// One guarded load epoch over a priority-ordered tracker list (index 0
/// wins conflicts). Returns the committed state and whether the command was
/// overridden; all trackers absorb the committed transition.
///
/// When a lower-priority correction would violate a higher-priority bound,
/// the higher-priority metric wins and the lower one transiently exceeds its
/// bound.
pub fn guarded_step(
    trackers: &mut [QosTracker],
    current: LoadState,
    proposed: LoadState,
    num_sojourn: usize,
) -> Result<(LoadState, bool)> {
    let mut violator = None;
    for (i, tracker) in trackers.iter().enumerate() {
        if !tracker.has_finite_bounds() {
            continue;
        }
        match opt_out_guard(tracker, proposed, current, num_sojourn)? {
            GuardDecision::Accept => {}
            GuardDecision::Override(state) => {
                violator = Some((i, state));
                break;
            }
        }
    }
    let committed = match violator {
        None => proposed,
        Some((0, state)) => state,
        Some((i, state)) => {
            // The correction must not break a higher-priority bound.
            let acceptable = trackers[..i].iter().all(|t| {
                !t.has_finite_bounds()
                    || t.in_bounds(t.candidate(qos_increment(t.metric, current, state)))
            });
            if acceptable {
                state
            } else {
                proposed
            }
        }
    };
    for tracker in trackers.iter_mut() {
        tracker.update(qos_increment(tracker.metric, current, committed));
    }
    Ok((committed, committed != proposed))
}

/// Arithmetic mean of per-load QoS values.
pub fn population_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(DispatchError::EmptyPopulation);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Applies the QoS filter recursion to a reference series from zero state.
pub fn filtered_reference(filter: QosFilter, reference: &[f64]) -> Vec<f64> {
    match filter {
        QosFilter::Discounted { beta } => {
            let mut acc = 0.0;
            reference
                .iter()
                .map(|&r| {
                    acc = beta * acc + r;
                    acc
                })
                .collect()
        }
        QosFilter::MovingWindow { horizon } => {
            let mut acc = 0.0;
            (0..reference.len())
                .map(|t| {
                    acc += reference[t];
                    if t > horizon {
                        acc -= reference[t - horizon - 1];
                    }
                    acc
                })
                .collect()
        }
    }
}

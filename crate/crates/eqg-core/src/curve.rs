//! Deterministic functions of time: constants or sampled grids with linear
//! interpolation.
//!
//! Continuity is the only regularity the model asks of its time-dependent
//! inputs (the habit trend ρ, the liability coefficient curves), so a
//! piecewise-linear grid is the simplest faithful input format.

use nalgebra::{DMatrix, DVector};

use crate::error::{EqgError, Result};

/// Values that support linear interpolation.
pub trait Lerp: Clone {
    /// `(1 - w) * a + w * b`.
    fn lerp(a: &Self, b: &Self, w: f64) -> Self;
}

impl Lerp for f64 {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        a * (1.0 - w) + b * w
    }
}

impl Lerp for DVector<f64> {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        a * (1.0 - w) + b * w
    }
}

impl Lerp for DMatrix<f64> {
    fn lerp(a: &Self, b: &Self, w: f64) -> Self {
        a * (1.0 - w) + b * w
    }
}

/// A function of time, constant or piecewise linear through sample nodes.
#[derive(Debug, Clone)]
pub enum Curve<V: Lerp> {
    Constant(V),
    Grid { times: Vec<f64>, values: Vec<V> },
}

impl<V: Lerp> Curve<V> {
    pub fn constant(value: V) -> Self {
        Curve::Constant(value)
    }

    /// Build a grid curve. Times must be finite and strictly increasing;
    /// a single sample degenerates to a constant.
    pub fn from_samples(times: Vec<f64>, values: Vec<V>) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(EqgError::param(
                "curve samples",
                format!(
                    "need equal nonzero counts, got {} times and {} values",
                    times.len(),
                    values.len()
                ),
            ));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(EqgError::param("curve samples", "non-finite time"));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EqgError::param(
                "curve samples",
                "times must be strictly increasing",
            ));
        }
        if times.len() == 1 {
            return Ok(Curve::Constant(values.into_iter().next().unwrap()));
        }
        Ok(Curve::Grid { times, values })
    }

    /// Evaluate at `t`, clamping to the end samples outside the grid span.
    pub fn eval(&self, t: f64) -> V {
        match self {
            Curve::Constant(v) => v.clone(),
            Curve::Grid { times, values } => {
                if t <= times[0] {
                    return values[0].clone();
                }
                if t >= *times.last().unwrap() {
                    return values.last().unwrap().clone();
                }
                // First index with times[idx] > t; the segment is [idx-1, idx].
                let idx = times.partition_point(|&x| x <= t);
                let (t0, t1) = (times[idx - 1], times[idx]);
                let w = (t - t0) / (t1 - t0);
                V::lerp(&values[idx - 1], &values[idx], w)
            }
        }
    }

    /// Whether the sample span contains `[a, b]` (constants cover everything).
    /// A slack of 1e-9 relative to the span absorbs formatting round-off in
    /// grid files.
    pub fn covers(&self, a: f64, b: f64) -> bool {
        match self {
            Curve::Constant(_) => true,
            Curve::Grid { times, .. } => {
                let slack = 1e-9 * (b - a).abs().max(1.0);
                times[0] <= a + slack && *times.last().unwrap() >= b - slack
            }
        }
    }

    /// Visit every stored sample (the constant counts as one sample).
    pub fn for_each_sample(&self, mut f: impl FnMut(usize, &V)) {
        match self {
            Curve::Constant(v) => f(0, v),
            Curve::Grid { values, .. } => {
                for (i, v) in values.iter().enumerate() {
                    f(i, v);
                }
            }
        }
    }
}

//! Uniform time meshes on `[0, horizon]`.
//!
//! One mesh is shared by the Riccati solution, the factor paths, and the
//! verification studies, so downstream evaluations land exactly on stored
//! nodes and never pay interpolation error.

use crate::error::{EqgError, Result};

/// Uniform mesh with `steps` intervals, i.e. `steps + 1` nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    horizon: f64,
    steps: usize,
}

impl Mesh {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(EqgError::param("horizon", "must be finite and > 0"));
        }
        if steps == 0 {
            return Err(EqgError::param("steps", "must be >= 1"));
        }
        Ok(Mesh { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `steps + 1`.
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node time t_k. The ratio is formed first so that `time(steps)`
    /// returns the horizon exactly.
    pub fn time(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.horizon * (k as f64 / self.steps as f64)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    /// Mesh with the same horizon and `steps / factor` intervals.
    /// `factor` must divide `steps` exactly.
    pub fn coarsen(&self, factor: usize) -> Result<Mesh> {
        if factor == 0 || !self.steps.is_multiple_of(factor) {
            return Err(EqgError::param(
                "factor",
                format!("{factor} does not divide {} steps", self.steps),
            ));
        }
        Mesh::new(self.horizon, self.steps / factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let mesh = Mesh::new(0.7, 7).unwrap();
        assert_eq!(mesh.time(0), 0.0);
        assert_eq!(mesh.time(7), 0.7);
        assert_eq!(mesh.times().len(), 8);
    }

    #[test]
    fn coarsen_divides_steps() {
        let mesh = Mesh::new(1.0, 1000).unwrap();
        let coarse = mesh.coarsen(8).unwrap();
        assert_eq!(coarse.steps(), 125);
        assert_eq!(coarse.horizon(), 1.0);
        assert!(mesh.coarsen(3).is_err());
        assert!(mesh.coarsen(0).is_err());
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(Mesh::new(0.0, 10).is_err());
        assert!(Mesh::new(f64::NAN, 10).is_err());
        assert!(Mesh::new(1.0, 0).is_err());
    }
}

//! Lorenz '63 dynamics, fixed-step RK4 propagation, and the scalar
//! observation model used by the twin-experiment harness.

use crate::error::{Error, Result};
use nalgebra::{DVector, Vector3};

/// A point in model state space.
pub type StateVector = DVector<f64>;

/// Largest RK4 substep used anywhere in the crate. Ten substeps per
/// 0.12-unit observation window keep the discretization error well below
/// the observation noise.
pub const MAX_DT: f64 = 0.012;

/// The Lorenz '63 vector field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz63 {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for Lorenz63 {
    /// Canonical chaotic parameters sigma = 10, rho = 28, beta = 8/3.
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

impl Lorenz63 {
    #[inline]
    fn rhs_fixed(&self, s: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(
            self.sigma * (s.y - s.x),
            s.x * (self.rho - s.z) - s.y,
            s.x * s.y - self.beta * s.z,
        )
    }

    #[inline]
    fn rk4_fixed(&self, s: Vector3<f64>, dt: f64) -> Vector3<f64> {
        let k1 = self.rhs_fixed(&s);
        let k2 = self.rhs_fixed(&(s + k1 * (dt / 2.0)));
        let k3 = self.rhs_fixed(&(s + k2 * (dt / 2.0)));
        let k4 = self.rhs_fixed(&(s + k3 * dt));
        s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
    }

    fn checked(&self, state: &StateVector) -> Result<Vector3<f64>> {
        if state.len() != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                actual: state.len(),
            });
        }
        Ok(Vector3::new(state[0], state[1], state[2]))
    }

    /// Right-hand side (sigma(y-x), x(rho-z)-y, xy-beta z).
    pub fn rhs(&self, state: &StateVector) -> Result<StateVector> {
        let out = self.rhs_fixed(&self.checked(state)?);
        Ok(StateVector::from_column_slice(out.as_slice()))
    }

    /// One classical fourth-order Runge-Kutta step of size `dt`.
    pub fn rk4_step(&self, state: &StateVector, dt: f64) -> Result<StateVector> {
        let out = self.rk4_fixed(self.checked(state)?, dt);
        Ok(StateVector::from_column_slice(out.as_slice()))
    }

    /// Integrates over `interval` with `substeps` equal RK4 steps.
    pub fn propagate(
        &self,
        state: &StateVector,
        interval: f64,
        substeps: usize,
    ) -> Result<StateVector> {
        if substeps == 0 {
            return Err(Error::ZeroSubsteps);
        }
        let dt = interval / substeps as f64;
        let mut current = self.checked(state)?;
        for _ in 0..substeps {
            current = self.rk4_fixed(current, dt);
        }
        Ok(StateVector::from_column_slice(current.as_slice()))
    }

    /// A point on the attractor: (1, 1, 1) integrated for 100 time units,
    /// long enough for the transient to die out.
    pub fn attractor_point(&self) -> StateVector {
        let start = StateVector::from_element(3, 1.0);
        self.propagate(&start, 100.0, 10_000)
            .expect("fixed-dimension spinup cannot fail")
    }
}

/// Scalar observation of one state component with additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationModel {
    observed_index: usize,
    noise_variance: f64,
}

impl ObservationModel {
    pub fn new(observed_index: usize, noise_variance: f64) -> Result<Self> {
        if !(noise_variance > 0.0) {
            return Err(Error::Config(format!(
                "observation noise variance must be positive, got {noise_variance}"
            )));
        }
        Ok(Self {
            observed_index,
            noise_variance,
        })
    }

    /// First component observed with R = 8 error variance.
    pub fn lorenz_first_component() -> Self {
        Self {
            observed_index: 0,
            noise_variance: 8.0,
        }
    }

    pub fn observed_index(&self) -> usize {
        self.observed_index
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Noise-free projection H x.
    pub fn project(&self, state: &StateVector) -> f64 {
        state[self.observed_index]
    }

    /// H x + sqrt(R) * noise_draw, with `noise_draw` a standard-normal
    /// variate supplied by the caller's stream.
    pub fn observe(&self, state: &StateVector, noise_draw: f64) -> f64 {
        self.project(state) + self.noise_variance.sqrt() * noise_draw
    }
}

//! Weighted particle ensembles: anomalies, moment estimators, Bayesian
//! likelihood weighting, and the spatio-temporal RMSE metric.

use crate::dynamics::{ObservationModel, StateVector};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Tolerance on the weight normalization invariant.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Posterior weights above 1 - COLLAPSE_TOL flag the step as collapsed.
pub const COLLAPSE_TOL: f64 = 1e-12;

/// An ensemble of K state columns with a probability weight per member.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    states: DMatrix<f64>,
    weights: DVector<f64>,
}

impl Ensemble {
    /// Builds an ensemble, checking the weight and finiteness invariants.
    pub fn new(states: DMatrix<f64>, weights: DVector<f64>) -> Result<Self> {
        if states.ncols() == 0 {
            return Err(Error::TooFewMembers {
                required: 1,
                actual: 0,
            });
        }
        if weights.len() != states.ncols() {
            return Err(Error::DimensionMismatch {
                expected: states.ncols(),
                actual: weights.len(),
            });
        }
        if states.iter().any(|x| !x.is_finite()) || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        if let Some(w) = weights.iter().find(|w| **w < 0.0) {
            return Err(Error::InvalidWeights(format!("negative weight {w}")));
        }
        let total = compensated_sum(weights.iter().copied());
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidWeights(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { states, weights })
    }

    /// Ensemble with uniform weights 1/K.
    pub fn uniform(states: DMatrix<f64>) -> Result<Self> {
        let k = states.ncols();
        if k == 0 {
            return Err(Error::TooFewMembers {
                required: 1,
                actual: 0,
            });
        }
        let weights = DVector::from_element(k, 1.0 / k as f64);
        Self::new(states, weights)
    }

    /// State dimension n.
    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    /// Member count K.
    pub fn size(&self) -> usize {
        self.states.ncols()
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn member(&self, j: usize) -> StateVector {
        self.states.column(j).into_owned()
    }

    /// True when the largest weight has absorbed essentially all mass.
    pub fn is_collapsed(&self) -> bool {
        self.weights.max() > 1.0 - COLLAPSE_TOL
    }

    /// Importance-sampling mean: states * weights.
    pub fn weighted_mean(&self) -> StateVector {
        &self.states * &self.weights
    }

    /// Importance-sampling covariance
    /// K/(K-1) * X (diag(w) - w w^T) X^T, symmetric PSD.
    pub fn weighted_covariance(&self) -> Result<DMatrix<f64>> {
        weighted_covariance_of(&self.states, &self.weights)
    }

    /// Unweighted column mean of the member states.
    pub fn state_mean(&self) -> StateVector {
        column_mean(&self.states)
    }
}

/// K/(K-1) * X (diag(w) - w w^T) X^T for raw state/weight views,
/// computed as a centered weighted scatter so the result is symmetric
/// by construction.
pub(crate) fn weighted_covariance_of(
    states: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let k = states.ncols();
    if k < 2 {
        return Err(Error::TooFewMembers {
            required: 2,
            actual: k,
        });
    }
    let n = states.nrows();
    let mean = states * weights;
    let mut cov = DMatrix::zeros(n, n);
    for j in 0..k {
        let d = states.column(j) - &mean;
        cov.syger(weights[j], &d, &d, 1.0);
    }
    cov.fill_upper_triangle_with_lower_triangle();
    Ok(cov * (k as f64 / (k as f64 - 1.0)))
}

/// Deviations of each column from the unweighted column mean.
/// Row sums of the result are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMatrix {
    values: DMatrix<f64>,
}

impl AnomalyMatrix {
    /// Centers the columns of an arbitrary matrix.
    pub fn recentered(mut values: DMatrix<f64>) -> Self {
        let mean = column_mean(&values);
        for mut col in values.column_iter_mut() {
            col -= &mean;
        }
        Self { values }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }
}

/// Neumaier-compensated summation; the weight-sum invariant must hold even
/// for the 1e5-member synthetic ensembles used in convergence checks,
/// where naive summation noise alone would exceed it.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut compensation = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            compensation += (sum - t) + v;
        } else {
            compensation += (v - t) + sum;
        }
        sum = t;
    }
    sum + compensation
}

fn column_mean(states: &DMatrix<f64>) -> StateVector {
    let k = states.ncols().max(1) as f64;
    let mut mean = DVector::zeros(states.nrows());
    for col in states.column_iter() {
        mean += col;
    }
    mean / k
}

/// Ensemble anomalies A = X (I - 1 1^T / K).
pub fn anomalies(states: &DMatrix<f64>) -> AnomalyMatrix {
    AnomalyMatrix::recentered(states.clone())
}

/// Bayesian posterior weights w_j proportional to
/// w^f_j * exp(-(y - H x_j)^2 / (2R)), normalized to sum one.
///
/// Computed in log space with max-subtraction so distant particles
/// underflow gracefully; an all-zero posterior reports divergence.
pub fn likelihood_weights(
    ensemble: &Ensemble,
    observation: f64,
    model: &ObservationModel,
) -> Result<DVector<f64>> {
    let two_r = 2.0 * model.noise_variance();
    let k = ensemble.size();
    let observed_row = model.observed_index();
    let mut log_w = DVector::zeros(k);
    for j in 0..k {
        let innovation = observation - ensemble.states()[(observed_row, j)];
        log_w[j] = ensemble.weights()[j].ln() - innovation * innovation / two_r;
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::WeightUnderflow);
    }
    let mut weights = log_w.map(|lw| (lw - max).exp());
    let total = compensated_sum(weights.iter().copied());
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::WeightUnderflow);
    }
    weights /= total;
    Ok(weights)
}

/// sqrt( sum_{i,j} (truth_ij - mean_ij)^2 / (n T) ) over a trajectory.
pub fn spatio_temporal_rmse(truth: &[StateVector], analysis_means: &[StateVector]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::EmptySequence);
    }
    if truth.len() != analysis_means.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: analysis_means.len(),
        });
    }
    let n = truth[0].len();
    let mut sum_sq = 0.0;
    for (t, a) in truth.iter().zip(analysis_means) {
        if t.len() != n || a.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: t.len().min(a.len()),
            });
        }
        sum_sq += (t - a).norm_squared();
    }
    Ok((sum_sq / (n as f64 * truth.len() as f64)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn random_states(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        DMatrix::from_fn(n, k, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn anomalies_of_identical_columns_vanish() {
        let states = DMatrix::from_fn(3, 5, |i, _| i as f64 + 1.0);
        let a = anomalies(&states);
        assert!(a.values().amax() == 0.0);
    }

    #[test]
    fn anomalies_remove_mean() {
        let states = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let a = anomalies(&states);
        assert_eq!(a.values()[(0, 0)], -1.0);
        assert_eq!(a.values()[(0, 1)], 1.0);
    }

    #[test]
    fn anomalies_idempotent() {
        let states = random_states(3, 6, 1);
        let once = anomalies(&states);
        let twice = anomalies(once.values());
        assert!((once.values() - twice.values()).amax() < 1e-14);
        // row sums vanish
        for i in 0..3 {
            let row_sum: f64 = once.values().row(i).sum();
            assert!(row_sum.abs() < 1e-10 * 6.0);
        }
    }

    #[test]
    fn weighted_mean_examples() {
        let states = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let ens = Ensemble::new(states.clone(), DVector::from_vec(vec![0.25, 0.75])).unwrap();
        assert!((ens.weighted_mean()[0] - 1.5).abs() < 1e-15);

        let uniform = Ensemble::uniform(random_states(3, 7, 2)).unwrap();
        let plain = uniform.state_mean();
        assert!((uniform.weighted_mean() - plain).amax() < 1e-12);

        let point = Ensemble::new(states, DVector::from_vec(vec![0.0, 1.0])).unwrap();
        assert_eq!(point.weighted_mean()[0], 2.0);
    }

    #[test]
    fn weighted_covariance_examples() {
        let states = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let ens = Ensemble::uniform(states).unwrap();
        let cov = ens.weighted_covariance().unwrap();
        assert!((cov[(0, 0)] - 2.0).abs() < 1e-14);

        let same = Ensemble::uniform(DMatrix::from_element(3, 4, 2.5)).unwrap();
        assert!(same.weighted_covariance().unwrap().amax() < 1e-14);
    }

    #[test]
    fn weighted_covariance_matches_sample_covariance_for_uniform_weights() {
        let states = random_states(3, 12, 3);
        let ens = Ensemble::uniform(states.clone()).unwrap();
        let cov = ens.weighted_covariance().unwrap();
        // unbiased sample covariance from anomalies
        let a = anomalies(&states);
        let sample = a.values() * a.values().transpose() / 11.0;
        assert!((cov.clone() - sample).amax() < 1e-12);
        // symmetry and eigenvalue floor
        assert!((cov.clone() - cov.transpose()).amax() < 1e-12);
        let eig = cov.symmetric_eigenvalues();
        assert!(eig.min() > -1e-10);
    }

    #[test]
    fn weighted_covariance_needs_two_members() {
        let ens = Ensemble::uniform(DMatrix::from_element(2, 1, 1.0)).unwrap();
        assert!(matches!(
            ens.weighted_covariance(),
            Err(Error::TooFewMembers { .. })
        ));
    }

    #[test]
    fn ensemble_validation() {
        let states = random_states(2, 3, 4);
        assert!(Ensemble::new(states.clone(), DVector::from_vec(vec![0.5, 0.5, 0.1])).is_err());
        assert!(Ensemble::new(states.clone(), DVector::from_vec(vec![-0.2, 0.6, 0.6])).is_err());
        assert!(Ensemble::new(states, DVector::from_vec(vec![0.5, 0.5])).is_err());
        let mut bad = random_states(2, 2, 5);
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(Ensemble::uniform(bad), Err(Error::NonFiniteState)));
    }

    #[test]
    fn likelihood_identical_projections_keep_prior() {
        let obs = ObservationModel::new(0, 8.0).unwrap();
        // members differ only in unobserved components
        let states = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 4.0, -1.0, 0.5]);
        let prior = DVector::from_vec(vec![0.2, 0.3, 0.5]);
        let ens = Ensemble::new(states, prior.clone()).unwrap();
        let w = likelihood_weights(&ens, 3.7, &obs).unwrap();
        assert!((w - prior).amax() < 1e-14);
    }

    #[test]
    fn likelihood_ratio_of_two_by_construction() {
        let r = 8.0;
        let obs = ObservationModel::new(0, r).unwrap();
        let y = 0.5;
        let offset = (2.0 * r * 2.0_f64.ln()).sqrt();
        let states = DMatrix::from_row_slice(1, 2, &[y, y + offset]);
        let ens = Ensemble::uniform(states).unwrap();
        let w = likelihood_weights(&ens, y, &obs).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn likelihood_preserves_zero_prior() {
        let obs = ObservationModel::new(0, 1.0).unwrap();
        let states = DMatrix::from_row_slice(1, 3, &[0.0, 0.1, 0.2]);
        let ens = Ensemble::new(states, DVector::from_vec(vec![0.5, 0.0, 0.5])).unwrap();
        let w = likelihood_weights(&ens, 0.05, &obs).unwrap();
        assert_eq!(w[1], 0.0);
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn likelihood_normalizes_far_particles() {
        // distant but representable: max-subtraction keeps this finite
        let obs = ObservationModel::new(0, 1e-4).unwrap();
        let states = DMatrix::from_row_slice(1, 2, &[1000.0, 1000.1]);
        let ens = Ensemble::uniform(states).unwrap();
        let w = likelihood_weights(&ens, 0.0, &obs).unwrap();
        assert!((w.sum() - 1.0).abs() < 1e-12);
        assert!(w[0] > w[1]);
    }

    #[test]
    fn likelihood_underflow_signals_divergence() {
        let obs = ObservationModel::new(0, 1.0).unwrap();
        let states = DMatrix::from_row_slice(1, 2, &[1e200, -1e200]);
        let ens = Ensemble::uniform(states).unwrap();
        assert!(matches!(
            likelihood_weights(&ens, 0.0, &obs),
            Err(Error::WeightUnderflow)
        ));
    }

    #[test]
    fn rmse_examples() {
        let t = vec![DVector::from_vec(vec![1.0, 2.0, 3.0])];
        assert_eq!(spatio_temporal_rmse(&t, &t).unwrap(), 0.0);

        let shifted: Vec<StateVector> = t.iter().map(|s| s.add_scalar(0.7)).collect();
        assert!((spatio_temporal_rmse(&t, &shifted).unwrap() - 0.7).abs() < 1e-14);

        let a = vec![DVector::from_vec(vec![0.0, 0.0, 0.0])];
        let b = vec![DVector::from_vec(vec![1.0, 2.0, 2.0])];
        assert!((spatio_temporal_rmse(&a, &b).unwrap() - 3.0_f64.sqrt()).abs() < 1e-14);

        assert!(matches!(
            spatio_temporal_rmse(&[], &[]),
            Err(Error::EmptySequence)
        ));
    }
}

//! One-step assimilation operators: ETPF with canonical rejuvenation, the
//! second-order ETPF2, and the foresight variant (FETPF) that replaces
//! rejuvenation with stochastic covariance shrinkage.

use crate::dynamics::ObservationModel;
use crate::ensembles::{anomalies, likelihood_weights, AnomalyMatrix, Ensemble, COLLAPSE_TOL};
use crate::error::{Error, Result};
use crate::shrinkage::{
    build_augmented_ensemble, build_augmented_ensemble_with_gamma, ShrinkageTarget, SyntheticFamily,
};
use crate::transport::{apply_transport, cost_matrix, second_order_correction, solve_transport};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;

/// Which assimilation operator a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    Etpf,
    Etpf2,
    Fetpf,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Etpf => write!(f, "ETPF"),
            Variant::Etpf2 => write!(f, "ETPF2"),
            Variant::Fetpf => write!(f, "FETPF"),
        }
    }
}

/// Full parameterization of a single assimilation step.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub variant: Variant,
    /// Canonical rejuvenation magnitude; ignored by FETPF.
    pub tau: f64,
    /// Synthetic ensemble size M; FETPF only.
    pub synthetic_count: usize,
    /// Synthetic anomaly distribution; FETPF only.
    pub family: SyntheticFamily,
    /// Synthetic anomaly inflation alpha; FETPF only.
    pub inflation_alpha: f64,
    /// Candidate shrinkage targets; FETPF only.
    pub targets: Vec<ShrinkageTarget>,
    pub observation: ObservationModel,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 0.0 {
            return Err(Error::Config(format!(
                "rejuvenation tau must be nonnegative, got {}",
                self.tau
            )));
        }
        if self.variant == Variant::Fetpf {
            if self.targets.is_empty() {
                return Err(Error::NoTargets);
            }
            if self.synthetic_count < 2 {
                return Err(Error::Config(format!(
                    "FETPF needs a synthetic ensemble of at least 2, got {}",
                    self.synthetic_count
                )));
            }
            if !(self.inflation_alpha > 0.0) {
                return Err(Error::Config(format!(
                    "synthetic inflation must be positive, got {}",
                    self.inflation_alpha
                )));
            }
        }
        Ok(())
    }
}

/// Analysis ensemble plus the per-step diagnostics the harness records.
#[derive(Debug, Clone)]
pub struct AnalysisOutcome {
    pub ensemble: Ensemble,
    /// Largest posterior weight before transport.
    pub max_weight: f64,
    /// Pre-rejuvenation deviation of the analysis mean from X w^a.
    pub mean_error: f64,
    /// ETPF2 only: Frobenius gap between the pre-rejuvenation analysis
    /// covariance and the importance-sampling estimate.
    pub covariance_error: Option<f64>,
}

impl AnalysisOutcome {
    pub fn collapsed(&self) -> bool {
        self.max_weight > 1.0 - COLLAPSE_TOL
    }
}

/// Runs the configured variant.
pub fn assimilate<R: Rng + ?Sized>(
    forecast: &Ensemble,
    observation: f64,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<AnalysisOutcome> {
    match cfg.variant {
        Variant::Etpf => etpf_step(forecast, observation, cfg, rng),
        Variant::Etpf2 => etpf2_step(forecast, observation, cfg, rng),
        Variant::Fetpf => fetpf_step(forecast, observation, cfg, rng),
    }
}

/// Perturbs analysis states with resampled prior anomalies,
/// X^a + sqrt(tau/(N-1)) A^f eta (I - 1 1^T / N); the trailing projector
/// keeps the column mean untouched.
pub fn canonical_rejuvenation<R: Rng + ?Sized>(
    analysis_states: &DMatrix<f64>,
    forecast_anomalies: &AnomalyMatrix,
    tau: f64,
    rng: &mut R,
) -> DMatrix<f64> {
    let k = analysis_states.ncols();
    if tau == 0.0 || k < 2 {
        return analysis_states.clone();
    }
    let eta = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let perturbation = AnomalyMatrix::recentered(forecast_anomalies.values() * eta);
    analysis_states + perturbation.values() * (tau / (k as f64 - 1.0)).sqrt()
}

fn uniform_marginals(k: usize) -> DVector<f64> {
    DVector::from_element(k, 1.0)
}

/// ETPF analysis: posterior weights, square optimal transport, canonical
/// rejuvenation.
pub fn etpf_step<R: Rng + ?Sized>(
    forecast: &Ensemble,
    observation: f64,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<AnalysisOutcome> {
    let weights = likelihood_weights(forecast, observation, &cfg.observation)?;
    let max_weight = weights.max();
    let transported = transport_to_dynamic(forecast.states(), forecast.states(), &weights)?;
    let mean_error = mean_discrepancy(&transported, forecast.states(), &weights);
    let rejuvenated =
        canonical_rejuvenation(&transported, &anomalies(forecast.states()), cfg.tau, rng);
    Ok(AnalysisOutcome {
        ensemble: Ensemble::uniform(rejuvenated)?,
        max_weight,
        mean_error,
        covariance_error: None,
    })
}

/// ETPF2 analysis: as ETPF plus the second-order correction that restores
/// the importance-sampling covariance before rejuvenation.
pub fn etpf2_step<R: Rng + ?Sized>(
    forecast: &Ensemble,
    observation: f64,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<AnalysisOutcome> {
    let n = forecast.dim();
    let k = forecast.size();
    if k <= n {
        return Err(Error::TooFewMembers {
            required: n + 1,
            actual: k,
        });
    }
    let weights = likelihood_weights(forecast, observation, &cfg.observation)?;
    let max_weight = weights.max();

    let states = forecast.states();
    let cost = cost_matrix(states, states);
    let plan = solve_transport(&cost, &(&weights * k as f64), &uniform_marginals(k))?;
    let correction = second_order_correction(states, &plan, &weights)?;
    let analysis = states * (plan.matrix() + correction);

    let mean_error = mean_discrepancy(&analysis, states, &weights);
    let a = anomalies(&analysis).into_inner();
    let analysis_cov = &a * a.transpose() / (k as f64 - 1.0);
    let sigma_a = crate::ensembles::weighted_covariance_of(states, &weights)?;
    let covariance_error = (analysis_cov - sigma_a).norm();

    let rejuvenated = canonical_rejuvenation(&analysis, &anomalies(states), cfg.tau, rng);
    Ok(AnalysisOutcome {
        ensemble: Ensemble::uniform(rejuvenated)?,
        max_weight,
        mean_error,
        covariance_error: Some(covariance_error),
    })
}

/// FETPF analysis: augments the forecast with synthetic shrinkage members,
/// weights all N+M members by likelihood, and transports the augmented
/// ensemble onto the N dynamic destinations. No post-hoc rejuvenation; the
/// synthetic members are the sole collapse defense.
pub fn fetpf_step<R: Rng + ?Sized>(
    forecast: &Ensemble,
    observation: f64,
    cfg: &FilterConfig,
    rng: &mut R,
) -> Result<AnalysisOutcome> {
    let augmented = build_augmented_ensemble(
        forecast,
        &cfg.targets,
        cfg.synthetic_count,
        cfg.family,
        cfg.inflation_alpha,
        rng,
    )?;
    fetpf_transport(forecast, observation, cfg, augmented)
}

/// Diagnostic hook: FETPF with a forced shrinkage factor.
pub fn fetpf_step_with_gamma<R: Rng + ?Sized>(
    forecast: &Ensemble,
    observation: f64,
    cfg: &FilterConfig,
    gamma: f64,
    rng: &mut R,
) -> Result<AnalysisOutcome> {
    let augmented = build_augmented_ensemble_with_gamma(
        forecast,
        &cfg.targets,
        cfg.synthetic_count,
        cfg.family,
        cfg.inflation_alpha,
        gamma,
        rng,
    )?;
    fetpf_transport(forecast, observation, cfg, augmented)
}

fn fetpf_transport(
    forecast: &Ensemble,
    observation: f64,
    cfg: &FilterConfig,
    augmented: crate::shrinkage::AugmentedEnsemble,
) -> Result<AnalysisOutcome> {
    let n_dynamic = forecast.size();
    let weights = likelihood_weights(&augmented.as_ensemble()?, observation, &cfg.observation)?;
    let max_weight = weights.max();
    let analysis = transport_to_dynamic(augmented.states(), &augmented.dynamic_states(), &weights)?;
    let mean_error = mean_discrepancy(&analysis, augmented.states(), &weights);
    debug_assert_eq!(analysis.ncols(), n_dynamic);
    Ok(AnalysisOutcome {
        ensemble: Ensemble::uniform(analysis)?,
        max_weight,
        mean_error,
        covariance_error: None,
    })
}

/// Shared transport: row marginals N^a w^a over the sources, unit column
/// marginals over the destinations, then X^a = src T*.
fn transport_to_dynamic(
    src_states: &DMatrix<f64>,
    dst_states: &DMatrix<f64>,
    posterior_weights: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let destinations = dst_states.ncols();
    let cost = cost_matrix(src_states, dst_states);
    let plan = solve_transport(
        &cost,
        &(posterior_weights * destinations as f64),
        &uniform_marginals(destinations),
    )?;
    apply_transport(src_states, &plan)
}

/// Max-norm gap between the analysis column mean and the importance mean.
fn mean_discrepancy(
    analysis: &DMatrix<f64>,
    src_states: &DMatrix<f64>,
    posterior_weights: &DVector<f64>,
) -> f64 {
    let k = analysis.ncols() as f64;
    let mean = analysis.column_sum() / k;
    let target = src_states * posterior_weights;
    (mean - target).amax()
}

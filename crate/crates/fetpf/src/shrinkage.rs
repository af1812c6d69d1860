//! Stochastic covariance shrinkage: sphericity mismatch, the RBLW
//! shrinkage factor, target scaling, multi-target selection, synthetic
//! anomaly sampling (Gaussian or symmetric Laplace), and assembly of the
//! augmented ensemble that the foresight filter transports.

use crate::climatology::trace_normalize;
use crate::ensembles::{AnomalyMatrix, Ensemble};
use crate::error::{Error, Result};
use crate::linalg::{asymmetry, symmetric_inv_sqrt, symmetrize};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;

/// Distribution family for the synthetic anomalies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticFamily {
    #[default]
    Gaussian,
    Laplace,
}

impl fmt::Display for SyntheticFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyntheticFamily::Gaussian => write!(f, "gaussian"),
            SyntheticFamily::Laplace => write!(f, "laplace"),
        }
    }
}

/// A trace-normalized, symmetric positive-definite climatological
/// covariance used as shrinkage target.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageTarget {
    covariance: DMatrix<f64>,
    label: String,
}

impl ShrinkageTarget {
    /// Validates symmetry and positive definiteness, then trace-normalizes
    /// so tr(P) = n.
    pub fn new(covariance: DMatrix<f64>, label: impl Into<String>) -> Result<Self> {
        let n = covariance.nrows();
        if covariance.ncols() != n || n == 0 {
            return Err(Error::DimensionMismatch {
                expected: n.max(1),
                actual: covariance.ncols(),
            });
        }
        if covariance.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        let scale = covariance.amax().max(1.0);
        if asymmetry(&covariance) > 1e-12 * scale {
            return Err(Error::Config("target covariance is not symmetric".into()));
        }
        let normalized = trace_normalize(&symmetrize(&covariance))?;
        let min_eig = normalized.clone().symmetric_eigenvalues().min();
        if min_eig <= 0.0 {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self {
            covariance: normalized,
            label: label.into(),
        })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// Whitened mismatch C = P^{-1/2} Sigma P^{-1/2}.
    fn whiten(&self, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if sigma.nrows() != self.dim() || sigma.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: sigma.nrows(),
            });
        }
        let inv_sqrt = symmetric_inv_sqrt(&self.covariance)?;
        Ok(symmetrize(&(&inv_sqrt * sigma * &inv_sqrt)))
    }
}

/// Sphericity U(P, Sigma) = (n tr(C^2) / tr^2(C) - 1) / (n - 1) of the
/// whitened mismatch; zero exactly when Sigma is proportional to P.
pub fn sphericity(target: &ShrinkageTarget, sigma: &DMatrix<f64>) -> Result<f64> {
    let n = target.dim() as f64;
    let c = target.whiten(sigma)?;
    let trace = c.trace();
    if trace <= 0.0 {
        return Err(Error::DegenerateEnsemble);
    }
    if target.dim() == 1 {
        // scalars always match their target up to scale
        return Ok(0.0);
    }
    let trace_sq = c.iter().map(|x| x * x).sum::<f64>();
    Ok(((n * trace_sq / (trace * trace) - 1.0) / (n - 1.0)).max(0.0))
}

/// Scaling mu = tr(P^{-1/2} Sigma P^{-1/2}) / n applied to the target
/// before sampling; invariant under rescaling of P.
pub fn mu_scale(target: &ShrinkageTarget, sigma: &DMatrix<f64>) -> Result<f64> {
    let c = target.whiten(sigma)?;
    let mu = c.trace() / target.dim() as f64;
    if mu <= 0.0 {
        return Err(Error::DegenerateEnsemble);
    }
    Ok(mu)
}

/// Index of the target with the largest sphericity mismatch; ties keep the
/// lowest index. A larger mismatch means the target carries more
/// information that the ensemble does not already have.
pub fn select_target(targets: &[ShrinkageTarget], sigma: &DMatrix<f64>) -> Result<usize> {
    if targets.is_empty() {
        return Err(Error::NoTargets);
    }
    let mut best = 0;
    let mut best_value = sphericity(&targets[0], sigma)?;
    for (index, target) in targets.iter().enumerate().skip(1) {
        let value = sphericity(target, sigma)?;
        if value > best_value {
            best = index;
            best_value = value;
        }
    }
    Ok(best)
}

/// Rao-Blackwell Ledoit-Wolf shrinkage factor
/// gamma = min( (N-2)/(N(N+2)) + ((n+1)N - 2) / (U N (N+2) (n-1)), 1 ).
/// A zero sphericity yields gamma = 1 through the clamp.
pub fn rblw_gamma(ensemble_size: usize, dim: usize, sphericity_value: f64) -> f64 {
    debug_assert!(ensemble_size >= 3 && sphericity_value >= 0.0);
    if sphericity_value <= 0.0 || dim < 2 {
        // a vanishing mismatch shrinks all the way onto the target
        return 1.0;
    }
    let n_f = ensemble_size as f64;
    let d = dim as f64;
    let base = (n_f - 2.0) / (n_f * (n_f + 2.0));
    let mismatch = ((d + 1.0) * n_f - 2.0) / (sphericity_value * n_f * (n_f + 2.0) * (d - 1.0));
    (base + mismatch).min(1.0)
}

/// Draws M synthetic anomaly columns from the scaled target:
/// Gaussian L z or Laplace sqrt(W) L z with W ~ Exp(1) and L the lower
/// Cholesky factor of mu P. Columns are recentered to exact zero mean and
/// inflated by `inflation_alpha`.
pub fn sample_synthetic_anomalies<R: Rng + ?Sized>(
    target: &ShrinkageTarget,
    mu: f64,
    synthetic_count: usize,
    family: SyntheticFamily,
    inflation_alpha: f64,
    rng: &mut R,
) -> Result<AnomalyMatrix> {
    if synthetic_count < 2 {
        return Err(Error::TooFewMembers {
            required: 2,
            actual: synthetic_count,
        });
    }
    if !(mu > 0.0) || !(inflation_alpha > 0.0) {
        return Err(Error::Config(format!(
            "mu and inflation must be positive, got mu={mu}, alpha={inflation_alpha}"
        )));
    }
    let n = target.dim();
    let scaled = target.covariance() * mu;
    let factor = Cholesky::new(scaled)
        .ok_or(Error::NotPositiveDefinite)?
        .unpack();

    let mut raw = DMatrix::zeros(n, synthetic_count);
    for col in 0..synthetic_count {
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut draw = &factor * z;
        if family == SyntheticFamily::Laplace {
            let w: f64 = rng.sample(Exp1);
            draw *= w.sqrt();
        }
        raw.set_column(col, &draw);
    }
    let mut centered = AnomalyMatrix::recentered(raw).into_inner();
    centered *= inflation_alpha;
    Ok(AnomalyMatrix::recentered(centered))
}

/// The selected target and the shrinkage quantities derived from the
/// dynamic ensemble covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageFactors {
    pub target_index: usize,
    pub sphericity: f64,
    pub mu: f64,
    pub gamma: f64,
}

/// Selects the target and evaluates sphericity, mu, and the RBLW gamma
/// from the dynamic ensemble.
pub fn shrinkage_factors(
    dynamic: &Ensemble,
    targets: &[ShrinkageTarget],
) -> Result<ShrinkageFactors> {
    let sigma = dynamic.weighted_covariance()?;
    if sigma.amax() == 0.0 {
        return Err(Error::DegenerateEnsemble);
    }
    let target_index = select_target(targets, &sigma)?;
    let sphericity_value = sphericity(&targets[target_index], &sigma)?;
    let mu = mu_scale(&targets[target_index], &sigma)?;
    let gamma = rblw_gamma(dynamic.size(), dynamic.dim(), sphericity_value);
    Ok(ShrinkageFactors {
        target_index,
        sphericity: sphericity_value,
        mu,
        gamma,
    })
}

/// Dynamic members plus synthetic members sharing the dynamic mean, with
/// the shrinkage weight split (1-gamma)/N and gamma/M.
#[derive(Debug, Clone)]
pub struct AugmentedEnsemble {
    states: DMatrix<f64>,
    weights: DVector<f64>,
    dynamic_count: usize,
    synthetic_count: usize,
    gamma: f64,
}

impl AugmentedEnsemble {
    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn dynamic_count(&self) -> usize {
        self.dynamic_count
    }

    pub fn synthetic_count(&self) -> usize {
        self.synthetic_count
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// The first N columns: the dynamic members.
    pub fn dynamic_states(&self) -> DMatrix<f64> {
        self.states.columns(0, self.dynamic_count).into_owned()
    }

    /// View as a weighted ensemble for likelihood evaluation.
    pub fn as_ensemble(&self) -> Result<Ensemble> {
        Ensemble::new(self.states.clone(), self.weights.clone())
    }
}

/// Builds the augmented ensemble with the RBLW shrinkage factor.
pub fn build_augmented_ensemble<R: Rng + ?Sized>(
    dynamic: &Ensemble,
    targets: &[ShrinkageTarget],
    synthetic_count: usize,
    family: SyntheticFamily,
    inflation_alpha: f64,
    rng: &mut R,
) -> Result<AugmentedEnsemble> {
    let factors = shrinkage_factors(dynamic, targets)?;
    assemble(
        dynamic,
        &targets[factors.target_index],
        factors.mu,
        factors.gamma,
        synthetic_count,
        family,
        inflation_alpha,
        rng,
    )
}

/// Diagnostic hook: builds the augmented ensemble with a forced shrinkage
/// factor instead of the RBLW estimate.
pub fn build_augmented_ensemble_with_gamma<R: Rng + ?Sized>(
    dynamic: &Ensemble,
    targets: &[ShrinkageTarget],
    synthetic_count: usize,
    family: SyntheticFamily,
    inflation_alpha: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<AugmentedEnsemble> {
    let factors = shrinkage_factors(dynamic, targets)?;
    assemble(
        dynamic,
        &targets[factors.target_index],
        factors.mu,
        gamma,
        synthetic_count,
        family,
        inflation_alpha,
        rng,
    )
}

#[allow(clippy::too_many_arguments)]
fn assemble<R: Rng + ?Sized>(
    dynamic: &Ensemble,
    target: &ShrinkageTarget,
    mu: f64,
    gamma: f64,
    synthetic_count: usize,
    family: SyntheticFamily,
    inflation_alpha: f64,
    rng: &mut R,
) -> Result<AugmentedEnsemble> {
    let n = dynamic.dim();
    let dynamic_count = dynamic.size();
    if dynamic_count < 3 {
        return Err(Error::TooFewMembers {
            required: 3,
            actual: dynamic_count,
        });
    }
    let uniform = 1.0 / dynamic_count as f64;
    if dynamic.weights().iter().any(|w| (w - uniform).abs() > 1e-9) {
        return Err(Error::InvalidWeights(
            "augmentation requires a uniformly weighted forecast".into(),
        ));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }

    let anomalies =
        sample_synthetic_anomalies(target, mu, synthetic_count, family, inflation_alpha, rng)?;
    let mean = dynamic.state_mean();

    let total = dynamic_count + synthetic_count;
    let mut states = DMatrix::zeros(n, total);
    states
        .view_mut((0, 0), (n, dynamic_count))
        .copy_from(dynamic.states());
    for col in 0..synthetic_count {
        states.set_column(
            dynamic_count + col,
            &(&mean + anomalies.values().column(col)),
        );
    }

    let mut weights = DVector::zeros(total);
    weights
        .rows_mut(0, dynamic_count)
        .fill((1.0 - gamma) / dynamic_count as f64);
    weights
        .rows_mut(dynamic_count, synthetic_count)
        .fill(gamma / synthetic_count as f64);

    if states.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteState);
    }

    Ok(AugmentedEnsemble {
        states,
        weights,
        dynamic_count,
        synthetic_count,
        gamma,
    })
}

/// Reads a target covariance file: first line n, then n rows of n reals.
/// The label is the file stem.
pub fn read_target_file(path: &Path) -> Result<ShrinkageTarget> {
    let matrix = read_matrix_file(path)?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "target".to_string());
    ShrinkageTarget::new(matrix, label)
}

/// Reads a plain-text square matrix file (n, then n rows of n reals).
pub fn read_matrix_file(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut tokens = text.split_whitespace();
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let n: usize = tokens
        .next()
        .ok_or_else(|| parse_err("empty file".into()))?
        .parse()
        .map_err(|e| parse_err(format!("bad dimension: {e}")))?;
    let mut values = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        let token = tokens
            .next()
            .ok_or_else(|| parse_err(format!("expected {} matrix entries", n * n)))?;
        let value: f64 = token
            .parse()
            .map_err(|e| parse_err(format!("bad entry {token:?}: {e}")))?;
        values.push(value);
    }
    if tokens.next().is_some() {
        return Err(parse_err("trailing data after matrix".into()));
    }
    Ok(DMatrix::from_row_slice(n, n, &values))
}

/// Writes a matrix in the plain-text target format.
pub fn write_matrix_file(path: &Path, matrix: &DMatrix<f64>) -> Result<()> {
    let n = matrix.nrows();
    let mut text = format!("{n}\n");
    for i in 0..n {
        let row: Vec<String> = (0..matrix.ncols())
            .map(|j| format!("{}", matrix[(i, j)]))
            .collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

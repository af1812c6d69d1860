//! Climatological target construction: long-run attractor covariance,
//! trace-state normalization, k-means clustering of forecast covariances,
//! and the reference Lorenz '63 target matrices shipped with the crate.

use crate::dynamics::{Lorenz63, MAX_DT};
use crate::error::{Error, Result};
use crate::shrinkage::ShrinkageTarget;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// A forecast covariance snapshot awaiting clustering.
#[derive(Debug, Clone)]
pub struct CovarianceSample {
    pub matrix: DMatrix<f64>,
    pub time_index: usize,
}

/// Rescales a covariance so its trace equals the state dimension.
pub fn trace_normalize(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let trace = matrix.trace();
    if !(trace > 0.0) {
        return Err(Error::NonPositiveTrace(trace));
    }
    Ok(matrix * (matrix.nrows() as f64 / trace))
}

/// Long-run temporal covariance of the Lorenz '63 attractor, sampled at
/// `sample_count` points spaced `spacing` time units apart and then
/// trace-normalized. The random stream only perturbs the spun-up starting
/// point so that independent estimates decorrelate.
pub fn attractor_covariance<R: Rng + ?Sized>(
    sample_count: usize,
    spacing: f64,
    rng: &mut R,
) -> Result<ShrinkageTarget> {
    if sample_count < 2 {
        return Err(Error::TooFewSamples {
            k: 2,
            samples: sample_count,
        });
    }
    if !(spacing > 0.0) {
        return Err(Error::Config(format!(
            "sample spacing must be positive, got {spacing}"
        )));
    }
    let model = Lorenz63::default();
    let mut state = model.attractor_point();
    for component in state.iter_mut() {
        *component += 1e-3 * rng.sample::<f64, _>(StandardNormal);
    }
    // chaos amplifies the perturbation into an independent attractor point
    state = model.propagate(&state, 20.0, 2_000)?;

    let substeps = (spacing / MAX_DT).ceil().max(1.0) as usize;
    let mut sum = DVector::zeros(3);
    let mut samples = Vec::with_capacity(sample_count);
    for _ in 0..sample_count {
        sum += &state;
        samples.push(state.clone());
        state = model.propagate(&state, spacing, substeps)?;
    }
    let mean = sum / sample_count as f64;
    let mut cov = DMatrix::zeros(3, 3);
    for s in &samples {
        let d = s - &mean;
        cov.syger(1.0, &d, &d, 1.0);
    }
    cov.fill_upper_triangle_with_lower_triangle();
    cov /= sample_count as f64 - 1.0;
    ShrinkageTarget::new(cov, "attractor")
}

/// Result of a Lloyd's-algorithm run on flattened covariance matrices.
#[derive(Debug, Clone)]
pub struct KmeansFit {
    /// Cluster centroids as raw (un-normalized) matrices.
    pub centroids: Vec<DMatrix<f64>>,
    /// Cluster index per input sample.
    pub assignments: Vec<usize>,
    /// Sum of squared Frobenius distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after every Lloyd iteration of the winning restart.
    pub inertia_history: Vec<f64>,
}

/// Clusters covariance samples under squared Frobenius distance and
/// returns the trace-normalized centroids as shrinkage targets.
///
/// Ten restarts of Lloyd's algorithm with distance-weighted seeding; the
/// lowest-inertia fit wins. Deterministic for a fixed seed.
pub fn kmeans_covariances(
    samples: &[CovarianceSample],
    k: usize,
    seed: u64,
) -> Result<Vec<ShrinkageTarget>> {
    let fit = kmeans_with_details(samples, k, seed)?;
    fit.centroids
        .iter()
        .enumerate()
        .map(|(i, c)| ShrinkageTarget::new(c.clone(), format!("cluster-{}", i + 1)))
        .collect()
}

/// As [`kmeans_covariances`] but exposing assignments and inertia.
pub fn kmeans_with_details(samples: &[CovarianceSample], k: usize, seed: u64) -> Result<KmeansFit> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if samples.len() < k {
        return Err(Error::TooFewSamples {
            k,
            samples: samples.len(),
        });
    }
    let points: Vec<DVector<f64>> = samples
        .iter()
        .map(|s| DVector::from_column_slice(s.matrix.as_slice()))
        .collect();

    let mut best: Option<LloydFit> = None;
    for restart in 0..10 {
        let fit = lloyd(&points, k, seed.wrapping_add(restart));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    let fit = best.expect("at least one restart ran");
    let (rows, cols) = (samples[0].matrix.nrows(), samples[0].matrix.ncols());
    Ok(KmeansFit {
        centroids: fit
            .centroids
            .iter()
            .map(|flat| DMatrix::from_column_slice(rows, cols, flat.as_slice()))
            .collect(),
        assignments: fit.assignments,
        inertia: fit.inertia,
        inertia_history: fit.inertia_history,
    })
}

struct LloydFit {
    centroids: Vec<DVector<f64>>,
    assignments: Vec<usize>,
    inertia: f64,
    inertia_history: Vec<f64>,
}

fn squared_distance(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Distance-weighted random seeding followed by Lloyd iterations until the
/// assignments stabilize (or an iteration cap).
fn lloyd(points: &[DVector<f64>], k: usize, seed: u64) -> LloydFit {
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    let mut rng = StdRng::seed_from_u64(seed);
    let mut centroids: Vec<DVector<f64>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    while centroids.len() < k {
        let dists: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| squared_distance(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        let next = if total > 0.0 {
            let mut draw = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in dists.iter().enumerate() {
                draw -= d;
                if draw <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[next].clone());
    }

    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    let mut inertia_history = Vec::new();
    for _ in 0..200 {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (mut best_c, mut best_d) = (0, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = squared_distance(p, centroid);
                if d < best_d {
                    best_c = c;
                    best_d = d;
                }
            }
            inertia += best_d;
            if assignments[i] != best_c {
                assignments[i] = best_c;
                changed = true;
            }
        }
        inertia_history.push(inertia);
        if !changed {
            break;
        }
        // centroids are elementwise means of their clusters
        let mut sums = vec![DVector::<f64>::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            sums[a] += p;
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = &sums[c] / counts[c] as f64;
            } else {
                // re-seed an empty cluster on the sample farthest from its centroid
                let far = points
                    .iter()
                    .enumerate()
                    .max_by(|(i, p), (j, q)| {
                        let di = squared_distance(p, &centroids[assignments[*i]]);
                        let dj = squared_distance(q, &centroids[assignments[*j]]);
                        di.partial_cmp(&dj).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                centroids[c] = points[far].clone();
            }
        }
    }

    let inertia = *inertia_history.last().unwrap_or(&f64::INFINITY);
    LloydFit {
        centroids,
        assignments,
        inertia,
        inertia_history,
    }
}

/// Climatological covariance of the whole Lorenz '63 attractor
/// (trace-normalized temporal covariance of 50000 attractor samples).
pub const LORENZ63_ATTRACTOR_COV: [[f64; 3]; 3] = [
    [0.8616, 0.8618, -0.0148],
    [0.8618, 1.1149, -0.0035],
    [-0.0148, -0.0035, 1.0234],
];

/// Cluster centroid with negative z-correlations from the two-cluster
/// split of ETPF forecast covariances.
pub const LORENZ63_CLUSTER_NEG: [[f64; 3]; 3] = [
    [0.5017, 0.5524, -0.4587],
    [0.5524, 1.0731, -0.6723],
    [-0.4587, -0.6723, 1.4252],
];

/// Cluster centroid with positive z-correlations.
pub const LORENZ63_CLUSTER_POS: [[f64; 3]; 3] = [
    [0.5443, 0.6830, 0.4330],
    [0.6830, 1.2748, 0.6318],
    [0.4330, 0.6318, 1.1808],
];

fn target_from_rows(rows: &[[f64; 3]; 3], label: &str) -> ShrinkageTarget {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    ShrinkageTarget::new(DMatrix::from_row_slice(3, 3, &flat), label)
        .expect("reference matrices are symmetric positive definite")
}

/// The single-target climatology used by the first experiment campaign.
pub fn lorenz63_attractor_target() -> ShrinkageTarget {
    target_from_rows(&LORENZ63_ATTRACTOR_COV, "attractor")
}

/// The two cluster targets used by the multi-target campaign.
pub fn lorenz63_cluster_targets() -> Vec<ShrinkageTarget> {
    vec![
        target_from_rows(&LORENZ63_CLUSTER_NEG, "z-negative"),
        target_from_rows(&LORENZ63_CLUSTER_POS, "z-positive"),
    ]
}

//! Twin-experiment driver: experiment configuration, truth and observation
//! generation, replicate orchestration, RMSE aggregation, CSV emission,
//! and the preset campaigns over ensemble size, synthetic size, and
//! inflation.

use crate::climatology::{lorenz63_attractor_target, lorenz63_cluster_targets, trace_normalize};
use crate::dynamics::{Lorenz63, ObservationModel};
use crate::ensembles::{spatio_temporal_rmse, Ensemble};
use crate::error::{Error, Result};
use crate::filters::{assimilate, FilterConfig, Variant};
use crate::shrinkage::{read_target_file, write_matrix_file, ShrinkageTarget, SyntheticFamily};
use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Seed used by presets unless the caller overrides it.
pub const DEFAULT_MASTER_SEED: u64 = 1729;

/// Observation interval from the experimental setup.
pub const DEFAULT_DT_OBS: f64 = 0.12;

/// RK4 substeps per observation window (dt = 0.012).
pub const DEFAULT_SUBSTEPS: usize = 10;

/// An inline shrinkage target inside a config document.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LiteralTarget {
    pub label: String,
    pub matrix: Vec<Vec<f64>>,
}

impl LiteralTarget {
    fn to_target(&self) -> Result<ShrinkageTarget> {
        let n = self.matrix.len();
        let flat: Vec<f64> = self.matrix.iter().flatten().copied().collect();
        if flat.len() != n * n {
            return Err(Error::Config(format!(
                "literal target {:?} is not square",
                self.label
            )));
        }
        ShrinkageTarget::new(DMatrix::from_row_slice(n, n, &flat), self.label.clone())
    }
}

/// Full parameterization of one experiment (one point of a campaign grid).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub variant: Variant,
    /// Dynamic ensemble size N.
    pub n: usize,
    /// Synthetic ensemble size M (FETPF only).
    #[serde(default)]
    pub m: usize,
    /// Canonical rejuvenation factor (ETPF/ETPF2 only).
    #[serde(default)]
    pub tau: f64,
    #[serde(default)]
    pub family: SyntheticFamily,
    #[serde(default = "default_alpha")]
    pub inflation_alpha: f64,
    #[serde(default = "default_dt_obs")]
    pub dt_obs: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    pub total_steps: usize,
    pub spinup_steps: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    #[serde(default)]
    pub observed_index: usize,
    #[serde(default = "default_noise_variance")]
    pub noise_variance: f64,
    /// Target covariance files (first line n, then n rows).
    #[serde(default)]
    pub target_files: Vec<PathBuf>,
    /// Inline targets; presets use these so they run without data files.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets_literal: Vec<LiteralTarget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<PathBuf>,
    /// When set, replicate 0 writes its trace-normalized forecast
    /// covariance per step into this directory (clustering input).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_covariances: Option<PathBuf>,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_dt_obs() -> f64 {
    DEFAULT_DT_OBS
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}

fn default_replicates() -> usize {
    1
}

fn default_master_seed() -> u64 {
    DEFAULT_MASTER_SEED
}

fn default_noise_variance() -> f64 {
    8.0
}

impl ExperimentConfig {
    /// A bare ETPF configuration; fields beyond the required ones take the
    /// experiment-protocol defaults.
    pub fn basic(experiment_id: impl Into<String>, variant: Variant, n: usize) -> Self {
        Self {
            experiment_id: experiment_id.into(),
            variant,
            n,
            m: 0,
            tau: 0.0,
            family: SyntheticFamily::Gaussian,
            inflation_alpha: default_alpha(),
            dt_obs: default_dt_obs(),
            substeps: default_substeps(),
            total_steps: 2000,
            spinup_steps: 200,
            replicates: default_replicates(),
            master_seed: DEFAULT_MASTER_SEED,
            observed_index: 0,
            noise_variance: default_noise_variance(),
            target_files: Vec::new(),
            targets_literal: Vec::new(),
            output_path: None,
            dump_covariances: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config(
                "dynamic ensemble size must be positive".into(),
            ));
        }
        if self.spinup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "spinup ({}) must be smaller than total steps ({})",
                self.spinup_steps, self.total_steps
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Config("at least one replicate is required".into()));
        }
        if !(self.dt_obs > 0.0) {
            return Err(Error::Config(format!(
                "observation interval must be positive, got {}",
                self.dt_obs
            )));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        if !(self.noise_variance > 0.0) {
            return Err(Error::Config(
                "observation noise variance must be positive".into(),
            ));
        }
        if self.variant == Variant::Fetpf
            && self.target_files.is_empty()
            && self.targets_literal.is_empty()
        {
            return Err(Error::NoTargets);
        }
        Ok(())
    }

    /// Loads target files and inline targets, files first.
    pub fn resolve_targets(&self) -> Result<Vec<ShrinkageTarget>> {
        let mut targets = Vec::new();
        for path in &self.target_files {
            targets.push(read_target_file(path)?);
        }
        for literal in &self.targets_literal {
            targets.push(literal.to_target()?);
        }
        Ok(targets)
    }

    fn filter_config(&self) -> Result<FilterConfig> {
        let cfg = FilterConfig {
            variant: self.variant,
            tau: self.tau,
            synthetic_count: self.m,
            family: self.family,
            inflation_alpha: self.inflation_alpha,
            targets: self.resolve_targets()?,
            observation: ObservationModel::new(self.observed_index, self.noise_variance)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads a single JSON experiment config.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// One replicate's outcome; the first eleven fields are the CSV schema.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub experiment_id: String,
    pub variant: String,
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub tau: f64,
    pub family: String,
    pub replicate: usize,
    pub seed: u64,
    pub rmse: f64,
    pub collapse_flags: u64,
    /// Online-check diagnostics; not part of the CSV schema.
    pub diagnostics: RunDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunDiagnostics {
    /// Largest pre-rejuvenation gap between analysis mean and X w^a.
    pub max_mean_error: f64,
    /// Largest ETPF2 covariance-restoration gap.
    pub max_covariance_error: f64,
    /// Step at which the filter diverged, if it did.
    pub diverged_at: Option<usize>,
}

pub const CSV_HEADER: &str =
    "experiment_id,variant,N,M,alpha,tau,family,replicate,seed,rmse,collapse_flags";

impl RunResult {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment_id,
            self.variant,
            self.n,
            self.m,
            self.alpha,
            self.tau,
            self.family,
            self.replicate,
            self.seed,
            self.rmse,
            self.collapse_flags
        )
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Config(format!(
                "expected 11 CSV fields, got {} in {row:?}",
                fields.len()
            )));
        }
        let parse_f64 = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Config(format!("bad float {s:?}: {e}")))
        };
        let parse_usize = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|e| Error::Config(format!("bad integer {s:?}: {e}")))
        };
        Ok(RunResult {
            experiment_id: fields[0].to_string(),
            variant: fields[1].to_string(),
            n: parse_usize(fields[2])?,
            m: parse_usize(fields[3])?,
            alpha: parse_f64(fields[4])?,
            tau: parse_f64(fields[5])?,
            family: fields[6].to_string(),
            replicate: parse_usize(fields[7])?,
            seed: fields[8]
                .parse()
                .map_err(|e| Error::Config(format!("bad seed {:?}: {e}", fields[8])))?,
            rmse: parse_f64(fields[9])?,
            collapse_flags: fields[10]
                .parse()
                .map_err(|e| Error::Config(format!("bad count {:?}: {e}", fields[10])))?,
            diagnostics: RunDiagnostics::default(),
        })
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based seed mixing; injective in `index` for a fixed master
/// seed, so replicates and grid points never share a stream.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// Runs one replicate of one experiment: generate truth and observations,
/// assimilate every window, and score the post-spinup analysis means.
/// Filter divergence yields an infinite-RMSE sentinel, not an error.
pub fn run_replicate(cfg: &ExperimentConfig, replicate: usize) -> Result<RunResult> {
    cfg.validate()?;
    let filter_cfg = cfg.filter_config()?;
    let seed = mix_seed(cfg.master_seed, replicate as u64);
    let mut rng = StdRng::seed_from_u64(seed);
    let model = Lorenz63::default();

    // independent truth start per replicate: a perturbed attractor point
    // decorrelated by the chaotic flow
    let mut truth = model.attractor_point();
    for component in truth.iter_mut() {
        *component += 1e-3 * rng.sample::<f64, _>(StandardNormal);
    }
    truth = model.propagate(&truth, 20.0, 2_000)?;

    let init = DMatrix::from_fn(3, cfg.n, |i, _| {
        truth[i] + rng.sample::<f64, _>(StandardNormal)
    });
    let mut analysis = Ensemble::uniform(init)?;

    if let Some(dir) = &cfg.dump_covariances {
        if replicate == 0 {
            fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.clone(),
                source,
            })?;
        }
    }

    let mut truths = Vec::new();
    let mut means = Vec::new();
    let mut collapse_flags = 0u64;
    let mut diagnostics = RunDiagnostics::default();

    for step in 1..=cfg.total_steps {
        truth = model.propagate(&truth, cfg.dt_obs, cfg.substeps)?;
        let y = filter_cfg
            .observation
            .observe(&truth, rng.sample(StandardNormal));

        let mut forecast_states = DMatrix::zeros(3, cfg.n);
        for j in 0..cfg.n {
            let propagated = model.propagate(&analysis.member(j), cfg.dt_obs, cfg.substeps)?;
            forecast_states.set_column(j, &propagated);
        }
        let forecast = match Ensemble::uniform(forecast_states) {
            Ok(ensemble) => ensemble,
            Err(e) if e.is_divergence() => {
                diagnostics.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };

        if let Some(dir) = &cfg.dump_covariances {
            if replicate == 0 {
                if let Ok(cov) = forecast.weighted_covariance() {
                    if let Ok(normalized) = trace_normalize(&cov) {
                        write_matrix_file(&dir.join(format!("cov_{step:05}.txt")), &normalized)?;
                    }
                }
            }
        }

        let outcome = match assimilate(&forecast, y, &filter_cfg, &mut rng) {
            Ok(outcome) => outcome,
            Err(e) if e.is_divergence() => {
                diagnostics.diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        if outcome.collapsed() {
            collapse_flags += 1;
        }
        diagnostics.max_mean_error = diagnostics.max_mean_error.max(outcome.mean_error);
        if let Some(cov_err) = outcome.covariance_error {
            diagnostics.max_covariance_error = diagnostics.max_covariance_error.max(cov_err);
        }
        if step > cfg.spinup_steps {
            truths.push(truth.clone());
            means.push(outcome.ensemble.state_mean());
        }
        analysis = outcome.ensemble;
    }

    let rmse = if diagnostics.diverged_at.is_some() {
        f64::INFINITY
    } else {
        spatio_temporal_rmse(&truths, &means)?
    };

    Ok(RunResult {
        experiment_id: cfg.experiment_id.clone(),
        variant: cfg.variant.to_string(),
        n: cfg.n,
        m: if cfg.variant == Variant::Fetpf {
            cfg.m
        } else {
            0
        },
        alpha: if cfg.variant == Variant::Fetpf {
            cfg.inflation_alpha
        } else {
            0.0
        },
        tau: cfg.tau,
        family: if cfg.variant == Variant::Fetpf {
            cfg.family.to_string()
        } else {
            "none".to_string()
        },
        replicate,
        seed,
        rmse,
        collapse_flags,
        diagnostics,
    })
}

/// Mean RMSE per grid point; diverged replicates are counted and excluded
/// from the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub experiment_id: String,
    pub variant: String,
    pub n: usize,
    pub m: usize,
    pub alpha: f64,
    pub tau: f64,
    pub family: String,
    pub replicates: usize,
    pub diverged: usize,
    pub mean_rmse: f64,
}

pub const AGGREGATE_HEADER: &str =
    "experiment_id,variant,N,M,alpha,tau,family,replicates,diverged,mean_rmse";

impl AggregateRow {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.experiment_id,
            self.variant,
            self.n,
            self.m,
            self.alpha,
            self.tau,
            self.family,
            self.replicates,
            self.diverged,
            self.mean_rmse
        )
    }
}

/// Groups replicate results by experiment id, preserving grid order.
pub fn aggregate(results: &[RunResult]) -> Vec<AggregateRow> {
    let mut rows: Vec<AggregateRow> = Vec::new();
    for result in results {
        let row = match rows
            .iter_mut()
            .find(|r| r.experiment_id == result.experiment_id)
        {
            Some(row) => row,
            None => {
                rows.push(AggregateRow {
                    experiment_id: result.experiment_id.clone(),
                    variant: result.variant.clone(),
                    n: result.n,
                    m: result.m,
                    alpha: result.alpha,
                    tau: result.tau,
                    family: result.family.clone(),
                    replicates: 0,
                    diverged: 0,
                    mean_rmse: 0.0,
                });
                rows.last_mut().expect("just pushed")
            }
        };
        row.replicates += 1;
        if result.rmse.is_finite() {
            row.mean_rmse += result.rmse;
        } else {
            row.diverged += 1;
        }
    }
    for row in &mut rows {
        let used = row.replicates - row.diverged;
        row.mean_rmse = if used > 0 {
            row.mean_rmse / used as f64
        } else {
            f64::INFINITY
        };
    }
    rows
}

/// Path of the aggregated companion file: `results.csv` -> `results.agg.csv`.
pub fn aggregate_path(out: &Path) -> PathBuf {
    out.with_extension("agg.csv")
}

/// Executes every (config, replicate) pair of the grid in parallel, then
/// writes the per-replicate CSV and the aggregated plot data.
pub fn run_experiment(grid: &[ExperimentConfig], out_path: &Path) -> Result<Vec<RunResult>> {
    if grid.is_empty() {
        return Err(Error::Config("empty experiment grid".into()));
    }
    for cfg in grid {
        cfg.validate()?;
    }
    let jobs: Vec<(usize, usize)> = grid
        .iter()
        .enumerate()
        .flat_map(|(g, cfg)| (0..cfg.replicates).map(move |r| (g, r)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(g, r)| run_replicate(&grid[g], r))
        .collect::<Result<Vec<RunResult>>>()?;

    write_results_csv(out_path, &results)?;
    let rows = aggregate(&results);
    write_aggregate_csv(&aggregate_path(out_path), &rows)?;
    Ok(results)
}

pub fn write_results_csv(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for result in results {
        text.push_str(&result.to_csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_aggregate_csv(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut text = String::from(AGGREGATE_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv_row());
        text.push('\n');
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a results CSV written by [`write_results_csv`].
pub fn read_results_csv(path: &Path) -> Result<Vec<RunResult>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == CSV_HEADER => {}
        other => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("unexpected header {other:?}"),
            })
        }
    }
    lines.map(RunResult::from_csv_row).collect()
}

/// Named experiment campaign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    Fig1,
    Fig2,
    Fig3,
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig1" => Ok(PresetName::Fig1),
            "fig2" => Ok(PresetName::Fig2),
            "fig3" => Ok(PresetName::Fig3),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected fig1, fig2, or fig3"
            ))),
        }
    }
}

/// Experiment length: the full campaign or a laptop-sized reduction that
/// only shortens steps, spinup, and replicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Paper,
    Desk,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Config(format!(
                "unknown scale {other:?}; expected paper or desk"
            ))),
        }
    }
}

impl Scale {
    /// (total_steps, spinup_steps, replicates)
    pub fn protocol(self) -> (usize, usize, usize) {
        match self {
            Scale::Paper => (10_000, 1_000, 20),
            Scale::Desk => (2_000, 200, 5),
        }
    }
}

/// Dynamic ensemble sizes swept by the first two campaigns.
pub const ENSEMBLE_SIZE_GRID: [usize; 6] = [5, 10, 20, 30, 50, 100];

/// Synthetic sizes and inflations swept by the third campaign.
pub const SYNTHETIC_SIZE_GRID: [usize; 5] = [10, 25, 50, 100, 200];
pub const INFLATION_GRID: [f64; 5] = [1.0, 1.1, 1.2, 1.5, 2.0];

fn literal_from(target: &ShrinkageTarget) -> LiteralTarget {
    let n = target.dim();
    let matrix = (0..n)
        .map(|i| (0..n).map(|j| target.covariance()[(i, j)]).collect())
        .collect();
    LiteralTarget {
        label: target.label().to_string(),
        matrix,
    }
}

/// Builds a named campaign grid with the default master seed.
pub fn preset(name: PresetName, scale: Scale) -> Vec<ExperimentConfig> {
    preset_with_seed(name, scale, DEFAULT_MASTER_SEED)
}

/// As [`preset`] with an explicit master seed; each grid point receives an
/// independent stream via counter mixing.
pub fn preset_with_seed(name: PresetName, scale: Scale, master_seed: u64) -> Vec<ExperimentConfig> {
    let (total_steps, spinup_steps, replicates) = scale.protocol();
    let mut grid = Vec::new();

    let push = |grid: &mut Vec<ExperimentConfig>, mut cfg: ExperimentConfig| {
        cfg.total_steps = total_steps;
        cfg.spinup_steps = spinup_steps;
        cfg.replicates = replicates;
        grid.push(cfg);
    };

    match name {
        PresetName::Fig1 | PresetName::Fig2 => {
            let (tag, targets) = match name {
                PresetName::Fig1 => ("fig1", vec![literal_from(&lorenz63_attractor_target())]),
                _ => (
                    "fig2",
                    lorenz63_cluster_targets()
                        .iter()
                        .map(literal_from)
                        .collect(),
                ),
            };
            for &n in &ENSEMBLE_SIZE_GRID {
                for (variant, label) in [(Variant::Etpf, "etpf"), (Variant::Etpf2, "etpf2")] {
                    let mut cfg =
                        ExperimentConfig::basic(format!("{tag}-{label}-n{n}"), variant, n);
                    cfg.tau = 0.04;
                    push(&mut grid, cfg);
                }
                for family in [SyntheticFamily::Gaussian, SyntheticFamily::Laplace] {
                    for alpha in [1.0, 1.2] {
                        let mut cfg = ExperimentConfig::basic(
                            format!("{tag}-fetpf-{family}-a{alpha:.1}-n{n}"),
                            Variant::Fetpf,
                            n,
                        );
                        cfg.m = 100;
                        cfg.family = family;
                        cfg.inflation_alpha = alpha;
                        cfg.targets_literal = targets.clone();
                        push(&mut grid, cfg);
                    }
                }
            }
        }
        PresetName::Fig3 => {
            let target = literal_from(&lorenz63_attractor_target());
            for &m in &SYNTHETIC_SIZE_GRID {
                for &alpha in &INFLATION_GRID {
                    let mut cfg = ExperimentConfig::basic(
                        format!("fig3-fetpf-m{m}-a{alpha:.1}"),
                        Variant::Fetpf,
                        5,
                    );
                    cfg.m = m;
                    cfg.inflation_alpha = alpha;
                    cfg.targets_literal = vec![target.clone()];
                    push(&mut grid, cfg);
                }
            }
        }
    }

    for (index, cfg) in grid.iter_mut().enumerate() {
        cfg.master_seed = mix_seed(master_seed, index as u64);
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny_config(variant: Variant) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::basic("tiny", variant, 4);
        cfg.total_steps = 30;
        cfg.spinup_steps = 5;
        if variant == Variant::Fetpf {
            cfg.m = 8;
            cfg.inflation_alpha = 1.2;
            cfg.targets_literal = vec![literal_from(
                &crate::climatology::lorenz63_attractor_target(),
            )];
        } else {
            cfg.tau = 0.04;
        }
        cfg
    }

    #[test]
    fn seed_mixing_is_injective_over_replicates() {
        let mut seen = HashSet::new();
        for index in 0..10_000u64 {
            assert!(seen.insert(mix_seed(42, index)));
        }
        assert_ne!(mix_seed(1, 0), mix_seed(2, 0));
    }

    #[test]
    fn replicates_are_deterministic_and_distinct() {
        let cfg = tiny_config(Variant::Etpf);
        let a = run_replicate(&cfg, 0).unwrap();
        let b = run_replicate(&cfg, 0).unwrap();
        assert_eq!(a, b);
        let c = run_replicate(&cfg, 1).unwrap();
        assert_ne!(a.seed, c.seed);
        assert_ne!(a.rmse, c.rmse);
        assert!(a.rmse.is_finite());
        assert!(a.diagnostics.max_mean_error < 1e-8);
    }

    #[test]
    fn fetpf_replicate_runs_with_multiple_targets() {
        let mut cfg = tiny_config(Variant::Fetpf);
        cfg.targets_literal = crate::climatology::lorenz63_cluster_targets()
            .iter()
            .map(literal_from)
            .collect();
        let result = run_replicate(&cfg, 0).unwrap();
        assert!(result.rmse.is_finite());
        assert!(result.diagnostics.max_mean_error < 1e-8);
    }

    #[test]
    fn fetpf_replicate_runs() {
        let cfg = tiny_config(Variant::Fetpf);
        let result = run_replicate(&cfg, 0).unwrap();
        assert!(result.rmse.is_finite());
        assert_eq!(result.family, "gaussian");
        assert_eq!(result.m, 8);
        assert!(result.diagnostics.max_mean_error < 1e-8);
    }

    #[test]
    fn csv_round_trip() {
        let cfg = tiny_config(Variant::Etpf);
        let result = run_replicate(&cfg, 3).unwrap();
        let parsed = RunResult::from_csv_row(&result.to_csv_row()).unwrap();
        assert_eq!(parsed.to_csv_row(), result.to_csv_row());
        assert_eq!(parsed.experiment_id, "tiny");
        assert_eq!(parsed.replicate, 3);
    }

    #[test]
    fn run_experiment_writes_expected_rows() {
        let dir = std::env::temp_dir().join("fetpf-harness-test");
        std::fs::create_dir_all(&dir).unwrap();
        let out = dir.join("results.csv");
        let mut cfg = tiny_config(Variant::Etpf);
        cfg.replicates = 2;
        let results = run_experiment(std::slice::from_ref(&cfg), &out).unwrap();
        assert_eq!(results.len(), 2);

        let parsed = read_results_csv(&out).unwrap();
        assert_eq!(parsed.len(), 2);
        for (a, b) in parsed.iter().zip(&results) {
            assert_eq!(a.to_csv_row(), b.to_csv_row());
        }

        // aggregation equals the hand average of the replicate rows
        let agg = aggregate(&results);
        assert_eq!(agg.len(), 1);
        let mean = (results[0].rmse + results[1].rmse) / 2.0;
        assert!((agg[0].mean_rmse - mean).abs() < 1e-12);
        assert!(aggregate_path(&out).exists());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn aggregation_excludes_divergent_replicates() {
        let cfg = tiny_config(Variant::Etpf);
        let mut ok = run_replicate(&cfg, 0).unwrap();
        let mut bad = run_replicate(&cfg, 1).unwrap();
        ok.rmse = 2.0;
        bad.rmse = f64::INFINITY;
        let rows = aggregate(&[ok, bad]);
        assert_eq!(rows[0].replicates, 2);
        assert_eq!(rows[0].diverged, 1);
        assert!((rows[0].mean_rmse - 2.0).abs() < 1e-12);
    }

    #[test]
    fn presets_match_protocol() {
        let fig1 = preset(PresetName::Fig1, Scale::Paper);
        assert_eq!(fig1.len(), 6 * ENSEMBLE_SIZE_GRID.len());
        for cfg in &fig1 {
            assert_eq!(cfg.total_steps, 10_000);
            assert_eq!(cfg.spinup_steps, 1_000);
            assert_eq!(cfg.replicates, 20);
            assert!((cfg.dt_obs - 0.12).abs() < 1e-15);
            match cfg.variant {
                Variant::Etpf | Variant::Etpf2 => assert_eq!(cfg.tau, 0.04),
                Variant::Fetpf => {
                    assert_eq!(cfg.m, 100);
                    assert_eq!(cfg.targets_literal.len(), 1);
                }
            }
            cfg.validate().unwrap();
        }

        let fig2 = preset(PresetName::Fig2, Scale::Desk);
        for cfg in &fig2 {
            assert_eq!(cfg.total_steps, 2_000);
            assert_eq!(cfg.spinup_steps, 200);
            assert_eq!(cfg.replicates, 5);
            if cfg.variant == Variant::Fetpf {
                assert_eq!(cfg.targets_literal.len(), 2);
            }
        }

        let fig3 = preset(PresetName::Fig3, Scale::Desk);
        assert_eq!(fig3.len(), 25);
        for cfg in &fig3 {
            assert_eq!(cfg.variant, Variant::Fetpf);
            assert_eq!(cfg.n, 5);
        }

        // desk and paper differ only in protocol fields
        let desk = preset(PresetName::Fig1, Scale::Desk);
        for (d, p) in desk.iter().zip(&fig1) {
            assert_eq!(d.experiment_id, p.experiment_id);
            assert_eq!(d.variant, p.variant);
            assert_eq!(d.n, p.n);
            assert_eq!(d.m, p.m);
            assert_eq!(d.tau, p.tau);
            assert_eq!(d.inflation_alpha, p.inflation_alpha);
        }

        // distinct master seeds per grid point
        let seeds: HashSet<u64> = fig1.iter().map(|c| c.master_seed).collect();
        assert_eq!(seeds.len(), fig1.len());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = tiny_config(Variant::Fetpf);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_validation_errors() {
        let mut cfg = tiny_config(Variant::Etpf);
        cfg.spinup_steps = cfg.total_steps;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_config(Variant::Fetpf);
        cfg.targets_literal.clear();
        assert!(matches!(cfg.validate(), Err(Error::NoTargets)));
    }
}

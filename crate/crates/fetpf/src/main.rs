//! `fetpf` command line: experiment campaigns, climatological target
//! estimation, and covariance clustering.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime/filter error,
//! 3 I/O error.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use fetpf::climatology::{attractor_covariance, kmeans_covariances, CovarianceSample};
use fetpf::error::{Error, Result};
use fetpf::harness::{
    load_config, mix_seed, preset_with_seed, run_experiment, PresetName, Scale, DEFAULT_MASTER_SEED,
};
use fetpf::shrinkage::{read_matrix_file, write_matrix_file};
use rand::rngs::StdRng;
use rand::SeedableRng;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "fetpf",
    about = "Ensemble transform particle filtering with stochastic covariance shrinkage rejuvenation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment campaign and write per-replicate RMSE rows as CSV
    /// (plus aggregated means next to it as <out>.agg.csv).
    Run {
        /// JSON experiment config (alternative to --preset).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named campaign: fig1, fig2, or fig3.
        #[arg(long)]
        preset: Option<String>,
        /// Campaign length: paper or desk.
        #[arg(long, default_value = "desk")]
        scale: String,
        /// Master seed for preset campaigns.
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the climatological attractor covariance and write it as a
    /// target file (first line n, then n rows).
    Climatology {
        /// Attractor samples to average.
        #[arg(long, default_value_t = 50_000)]
        samples: usize,
        /// Time units between samples.
        #[arg(long, default_value_t = 0.12)]
        spacing: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster covariance sample files into k trace-normalized targets.
    Cluster {
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Directory of covariance files in the target format.
        #[arg(long = "in")]
        input: PathBuf,
        /// Directory that receives target_1.txt ... target_k.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            preset,
            scale,
            seed,
            out,
        } => {
            let grid = match (config, preset) {
                (Some(path), None) => vec![load_config(&path)?],
                (None, Some(name)) => {
                    let name: PresetName = name.parse()?;
                    let scale: Scale = scale.parse()?;
                    preset_with_seed(name, scale, seed.unwrap_or(DEFAULT_MASTER_SEED))
                }
                _ => {
                    return Err(Error::Config(
                        "provide exactly one of --config or --preset".into(),
                    ))
                }
            };
            let results = run_experiment(&grid, &out)?;
            let diverged = results.iter().filter(|r| !r.rmse.is_finite()).count();
            println!(
                "wrote {} replicate rows to {} ({} diverged)",
                results.len(),
                out.display(),
                diverged
            );
            Ok(())
        }
        Command::Climatology {
            samples,
            spacing,
            seed,
            out,
        } => {
            let mut rng = StdRng::seed_from_u64(mix_seed(seed, 0));
            let target = attractor_covariance(samples, spacing, &mut rng)?;
            write_matrix_file(&out, target.covariance())?;
            println!("wrote climatological target to {}", out.display());
            Ok(())
        }
        Command::Cluster {
            k,
            input,
            out,
            seed,
        } => {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&input)
                .map_err(|source| Error::Io {
                    path: input.clone(),
                    source,
                })?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
                .collect();
            entries.sort();
            if entries.is_empty() {
                return Err(Error::Config(format!(
                    "no .txt covariance files in {}",
                    input.display()
                )));
            }
            let samples: Vec<CovarianceSample> = entries
                .iter()
                .enumerate()
                .map(|(time_index, path)| {
                    read_matrix_file(path).map(|matrix| CovarianceSample { matrix, time_index })
                })
                .collect::<Result<_>>()?;
            let targets = kmeans_covariances(&samples, k, seed)?;
            std::fs::create_dir_all(&out).map_err(|source| Error::Io {
                path: out.clone(),
                source,
            })?;
            for (i, target) in targets.iter().enumerate() {
                let path = out.join(format!("target_{}.txt", i + 1));
                write_matrix_file(&path, target.covariance())?;
            }
            println!(
                "clustered {} samples into {} targets under {}",
                samples.len(),
                targets.len(),
                out.display()
            );
            Ok(())
        }
    }
}

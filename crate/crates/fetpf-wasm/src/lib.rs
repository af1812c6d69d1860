//! wasm-bindgen bindings for the interactive demo page.
//!
//! Three operations are exposed: sampling a Lorenz '63 trajectory, running
//! a short twin experiment with a chosen filter, and drawing synthetic
//! shrinkage anomalies. Results come back as flat `Float64Array`s that the
//! page plots on canvases.

use fetpf::climatology::lorenz63_attractor_target;
use fetpf::dynamics::{Lorenz63, ObservationModel};
use fetpf::ensembles::Ensemble;
use fetpf::filters::{assimilate, FilterConfig, Variant};
use fetpf::shrinkage::{sample_synthetic_anomalies, SyntheticFamily};
use nalgebra::DMatrix;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use wasm_bindgen::prelude::*;

fn parse_variant(name: &str) -> Result<Variant, String> {
    match name {
        "etpf" => Ok(Variant::Etpf),
        "etpf2" => Ok(Variant::Etpf2),
        "fetpf" => Ok(Variant::Fetpf),
        other => Err(format!("unknown variant {other:?}")),
    }
}

fn parse_family(name: &str) -> Result<SyntheticFamily, String> {
    match name {
        "gaussian" => Ok(SyntheticFamily::Gaussian),
        "laplace" => Ok(SyntheticFamily::Laplace),
        other => Err(format!("unknown family {other:?}")),
    }
}

fn to_msg<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Lorenz '63 trajectory on the attractor: `steps` points spaced `dt`
/// apart, flattened as x, y, z triples. The seed perturbs the spun-up
/// starting point.
#[wasm_bindgen]
pub fn attractor_trajectory(steps: usize, dt: f64, seed: u32) -> Result<Vec<f64>, String> {
    let model = Lorenz63::default();
    let mut rng = StdRng::seed_from_u64(seed as u64);
    let mut state = model.attractor_point();
    for c in state.iter_mut() {
        *c += 1e-3 * rng.sample::<f64, _>(StandardNormal);
    }
    state = model.propagate(&state, 10.0, 1_000).map_err(to_msg)?;

    let substeps = (dt / 0.012).ceil().max(1.0) as usize;
    let mut out = Vec::with_capacity(3 * steps);
    for _ in 0..steps {
        out.extend_from_slice(state.as_slice());
        state = model.propagate(&state, dt, substeps).map_err(to_msg)?;
    }
    Ok(out)
}

/// One twin experiment: truth, observations, and the chosen filter.
/// Returns flat records of 7 values per assimilation step:
/// truth x,y,z, analysis-mean x,y,z, and the step's state-space error.
#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn twin_experiment(
    variant: &str,
    ensemble_size: usize,
    synthetic_size: usize,
    inflation_alpha: f64,
    family: &str,
    tau: f64,
    steps: usize,
    seed: u32,
) -> Result<Vec<f64>, String> {
    let variant = parse_variant(variant)?;
    let family = parse_family(family)?;
    if ensemble_size == 0 || ensemble_size > 200 || steps == 0 || steps > 5_000 {
        return Err("ensemble size or step count out of range".to_string());
    }

    let cfg = FilterConfig {
        variant,
        tau,
        synthetic_count: synthetic_size,
        family,
        inflation_alpha,
        targets: vec![lorenz63_attractor_target()],
        observation: ObservationModel::lorenz_first_component(),
    };
    cfg.validate().map_err(to_msg)?;

    let model = Lorenz63::default();
    let mut rng = StdRng::seed_from_u64(seed as u64);
    let mut truth = model.attractor_point();
    for c in truth.iter_mut() {
        *c += 1e-3 * rng.sample::<f64, _>(StandardNormal);
    }
    truth = model.propagate(&truth, 20.0, 2_000).map_err(to_msg)?;

    let init = DMatrix::from_fn(3, ensemble_size, |i, _| {
        truth[i] + rng.sample::<f64, _>(StandardNormal)
    });
    let mut analysis = Ensemble::uniform(init).map_err(to_msg)?;

    let dt_obs = 0.12;
    let substeps = 10;
    let mut out = Vec::with_capacity(7 * steps);
    for _ in 0..steps {
        truth = model.propagate(&truth, dt_obs, substeps).map_err(to_msg)?;
        let y = cfg.observation.observe(&truth, rng.sample(StandardNormal));

        let mut forecast_states = DMatrix::zeros(3, ensemble_size);
        for j in 0..ensemble_size {
            let propagated = model
                .propagate(&analysis.member(j), dt_obs, substeps)
                .map_err(to_msg)?;
            forecast_states.set_column(j, &propagated);
        }
        let forecast = Ensemble::uniform(forecast_states).map_err(to_msg)?;
        let outcome = assimilate(&forecast, y, &cfg, &mut rng).map_err(to_msg)?;
        let mean = outcome.ensemble.state_mean();
        let err = (&truth - &mean).norm() / 3.0_f64.sqrt();
        out.extend_from_slice(truth.as_slice());
        out.extend_from_slice(mean.as_slice());
        out.push(err);
        analysis = outcome.ensemble;
    }
    Ok(out)
}

/// Synthetic shrinkage anomalies from the climatological target, flattened
/// as x, y, z triples; `mu` is fixed at one so the cloud shows the target
/// shape, the family tails, and the inflation directly.
#[wasm_bindgen]
pub fn synthetic_cloud(
    family: &str,
    count: usize,
    inflation_alpha: f64,
    seed: u32,
) -> Result<Vec<f64>, String> {
    let family = parse_family(family)?;
    if !(2..=20_000).contains(&count) {
        return Err("sample count out of range".to_string());
    }
    let target = lorenz63_attractor_target();
    let mut rng = StdRng::seed_from_u64(seed as u64);
    let anomalies =
        sample_synthetic_anomalies(&target, 1.0, count, family, inflation_alpha, &mut rng)
            .map_err(to_msg)?;
    Ok(anomalies.values().as_slice().to_vec())
}

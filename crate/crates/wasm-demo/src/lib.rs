//! Browser bindings over the five-agent benchmark. Every export returns a
//! JSON string so the page needs no generated TypeScript types.

use std::sync::Arc;

use gossip_core::asymptotics::{clt_covariance, perron_vector, AsymptoticReport};
use gossip_core::engine::{run, RecordStride, RunConfig, Variant};
use gossip_core::harness::{compare_to_theory, monte_carlo};
use gossip_core::numerics::DenseVector;
use gossip_core::presets;
use gossip_core::protocols::{broadcast_gossip, fixed_neighborhood_averaging, mean_matrix, pairwise_gossip, Protocol};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const MAX_ITERATIONS: u32 = 200_000;
const MAX_RUNS: u32 = 2_000;

#[derive(Serialize)]
struct Trajectory {
    n: Vec<u64>,
    average: Vec<f64>,
    agent1: Vec<f64>,
    disagreement: Vec<f64>,
    scaled_disagreement: Vec<f64>,
    theta_star: f64,
}

#[derive(Serialize)]
struct HistogramView {
    edges: Vec<f64>,
    counts: Vec<u64>,
    density: Vec<f64>,
    empirical_variance: f64,
    theoretical_variance: f64,
    rel_error: f64,
    kurtosis: Option<f64>,
}

fn protocol_named(name: &str) -> Result<(Protocol, bool), String> {
    let topo = presets::benchmark_topology();
    let protocol = match name {
        "fixed" | "weighted" => fixed_neighborhood_averaging(&topo),
        "pairwise" => pairwise_gossip(&topo).map_err(|e| e.to_string())?,
        "broadcast" => broadcast_gossip(&topo, presets::BENCHMARK_BETA, None).map_err(|e| e.to_string())?,
        other => return Err(format!("unknown protocol `{other}`")),
    };
    Ok((protocol, name == "weighted"))
}

fn config(protocol: Protocol, weighted: bool, iterations: u32, seed: u32) -> Result<RunConfig, String> {
    if iterations == 0 || iterations > MAX_ITERATIONS {
        return Err(format!("iterations must be in 1..={MAX_ITERATIONS}"));
    }
    let mut rc = RunConfig::new(
        Arc::new(presets::benchmark_objective()),
        presets::benchmark_noise(),
        presets::benchmark_schedule(),
        protocol,
        u64::from(iterations),
        u64::from(seed),
    );
    if weighted {
        let v = perron_vector(&mean_matrix(&rc.protocol).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        rc.variant = Variant::weighted(v).map_err(|e| e.to_string())?;
    }
    Ok(rc)
}

fn report_for(protocol: &Protocol) -> Result<AsymptoticReport, String> {
    clt_covariance(
        protocol,
        &presets::benchmark_objective(),
        &presets::benchmark_noise(),
        &presets::benchmark_schedule(),
        None,
    )
    .map_err(|e| e.to_string())
}

pub fn simulate_json(protocol: &str, iterations: u32, seed: u32) -> Result<String, String> {
    let (p, weighted) = protocol_named(protocol)?;
    let theta_star = if weighted {
        presets::benchmark_objective().uniform_minimizer()[0]
    } else {
        report_for(&p)?.theta_star[0]
    };
    let mut rc = config(p, weighted, iterations, seed)?;
    rc.stride = RecordStride::Log(400);
    let rec = run(&rc).map_err(|e| e.to_string())?;
    let out = Trajectory {
        n: rec.samples.iter().map(|s| s.n).collect(),
        average: rec.samples.iter().map(|s| s.average[0]).collect(),
        agent1: rec.samples.iter().map(|s| s.agent1[0]).collect(),
        disagreement: rec.samples.iter().map(|s| s.disagreement).collect(),
        scaled_disagreement: rec.samples.iter().map(|s| s.scaled_disagreement).collect(),
        theta_star,
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

pub fn analyze_json(protocol: &str) -> Result<String, String> {
    let (p, weighted) = protocol_named(protocol)?;
    if weighted {
        return Err("the covariance analysis covers the plain variant".into());
    }
    serde_json::to_string(&report_for(&p)?).map_err(|e| e.to_string())
}

pub fn histogram_json(protocol: &str, runs: u32, iterations: u32, seed: u32) -> Result<String, String> {
    let (p, weighted) = protocol_named(protocol)?;
    if weighted {
        return Err("the covariance analysis covers the plain variant".into());
    }
    if runs == 0 || runs > MAX_RUNS {
        return Err(format!("runs must be in 1..={MAX_RUNS}"));
    }
    let report = report_for(&p)?;
    let rc = config(p, false, iterations, seed)?;
    let star = DenseVector::new(report.theta_star.clone()).map_err(|e| e.to_string())?;
    let mc = monte_carlo(&rc, runs as usize, &star, 1).map_err(|e| e.to_string())?;
    let cmp = compare_to_theory(&mc, &report).map_err(|e| e.to_string())?;
    let hist = &mc.histograms[0];
    let out = HistogramView {
        edges: hist.edges.clone(),
        counts: hist.counts.clone(),
        density: cmp.density_at_centers[0].clone(),
        empirical_variance: mc.empirical_covariance[0][0],
        theoretical_variance: report.v_matrix[0][0],
        rel_error: cmp.rel_error,
        kurtosis: cmp.kurtosis[0],
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

/// Trajectory of `⟨θ_n⟩`, `θ_{n,1}` and the disagreement on log-spaced `n`.
#[wasm_bindgen]
pub fn simulate(protocol: &str, iterations: u32, seed: u32) -> Result<String, JsError> {
    simulate_json(protocol, iterations, seed).map_err(|e| JsError::new(&e))
}

/// Limit point and asymptotic covariance report.
#[wasm_bindgen]
pub fn analyze(protocol: &str) -> Result<String, JsError> {
    analyze_json(protocol).map_err(|e| JsError::new(&e))
}

/// Histogram of the normalised final error against the Gaussian limit.
#[wasm_bindgen]
pub fn histogram(protocol: &str, runs: u32, iterations: u32, seed: u32) -> Result<String, JsError> {
    histogram_json(protocol, runs, iterations, seed).map_err(|e| JsError::new(&e))
}

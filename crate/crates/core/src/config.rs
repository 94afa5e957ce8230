//! JSON experiment configuration.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::asymptotics::perron_vector;
use crate::engine::{RecordStride, RunConfig, Variant};
use crate::error::{Error, Result};
use crate::model::{NoiseModel, QuadraticObjective, StepSchedule, Topology};
use crate::numerics::DenseVector;
use crate::protocols::{broadcast_gossip, fixed_neighborhood_averaging, mean_matrix, pairwise_gossip, Protocol};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topology: TopologyConfig,
    pub objective: ObjectiveConfig,
    pub noise: NoiseConfig,
    pub step: StepConfig,
    pub protocol: ProtocolConfig,
    pub run: RunSection,
    #[serde(default)]
    pub montecarlo: MonteCarloSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub adjacency: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// One target per agent, each a `d`-vector.
    pub alphas: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub gamma_star: f64,
    pub a: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    Fixed,
    Pairwise,
    Broadcast,
    /// `W = I` on every draw; fails the contraction check by construction.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    #[serde(rename = "type")]
    pub kind: ProtocolKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wake_probs: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    #[default]
    Plain,
    Weighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum StrideConfig {
    Every(u64),
    Log(usize),
}

impl From<StrideConfig> for RecordStride {
    fn from(s: StrideConfig) -> Self {
        match s {
            StrideConfig::Every(k) => RecordStride::Every(k),
            StrideConfig::Log(k) => RecordStride::Log(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub iterations: u64,
    pub seed: u64,
    #[serde(default)]
    pub variant: VariantKind,
    /// Weights for the weighted variant; defaults to the Perron vector of
    /// the mean exchange matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_stride: Option<StrideConfig>,
    /// Stacked `θ_0`, defaults to zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub runs: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl Default for MonteCarloSection {
    fn default() -> Self {
        Self { runs: 100, workers: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<OutputFormat>,
}

fn default_formats() -> Vec<OutputFormat> {
    vec![OutputFormat::Csv, OutputFormat::Json]
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            formats: default_formats(),
        }
    }
}

impl OutputSection {
    pub fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }
}

fn at(path: &str, err: impl std::fmt::Display) -> Error {
    Error::Config {
        path: path.to_string(),
        message: err.to_string(),
    }
}

/// Model pieces built from a validated configuration.
#[derive(Clone)]
pub struct Experiment {
    pub topology: Topology,
    pub objective: Arc<QuadraticObjective>,
    pub noise: NoiseModel,
    pub schedule: StepSchedule,
    pub protocol: Protocol,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            at(&path, e.into_inner())
        })?;
        cfg.build()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| at(&path.display().to_string(), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn build(&self) -> Result<Experiment> {
        let topology = Topology::from_adjacency(&self.topology.adjacency).map_err(|e| at("topology.adjacency", e))?;
        let objective = QuadraticObjective::new(self.objective.alphas.clone()).map_err(|e| at("objective.alphas", e))?;
        if objective.alphas().len() != topology.n_agents() {
            return Err(at(
                "objective.alphas",
                format!("{} targets for {} agents", objective.alphas().len(), topology.n_agents()),
            ));
        }
        let noise = NoiseModel::gaussian(self.noise.sigma).map_err(|e| at("noise.sigma", e))?;
        let schedule = StepSchedule::new(self.step.gamma_star, self.step.a).map_err(|e| at("step", e))?;
        let protocol = self.build_protocol(&topology)?;
        if self.run.iterations == 0 {
            return Err(at("run.iterations", "must be at least 1"));
        }
        if self.montecarlo.runs == 0 {
            return Err(at("montecarlo.runs", "must be at least 1"));
        }
        if self.montecarlo.workers == 0 {
            return Err(at("montecarlo.workers", "must be at least 1"));
        }
        let d = objective.alphas()[0].len();
        if let Some(init) = &self.run.initial {
            if init.len() != topology.n_agents() * d {
                return Err(at("run.initial", format!("expected {} entries", topology.n_agents() * d)));
            }
        }
        if let Some(w) = &self.run.weights {
            if self.run.variant != VariantKind::Weighted {
                return Err(at("run.weights", "only used by the weighted variant"));
            }
            DenseVector::new(w.clone())
                .and_then(Variant::weighted)
                .map_err(|e| at("run.weights", e))?;
            if w.len() != topology.n_agents() {
                return Err(at("run.weights", format!("expected {} entries", topology.n_agents())));
            }
        }
        Ok(Experiment {
            topology,
            objective: Arc::new(objective),
            noise,
            schedule,
            protocol,
        })
    }

    fn build_protocol(&self, topology: &Topology) -> Result<Protocol> {
        let p = &self.protocol;
        if p.kind != ProtocolKind::Broadcast {
            if p.beta.is_some() {
                return Err(at("protocol.beta", "only used by the broadcast protocol"));
            }
            if p.wake_probs.is_some() {
                return Err(at("protocol.wake_probs", "only used by the broadcast protocol"));
            }
        }
        match p.kind {
            ProtocolKind::Fixed => Ok(fixed_neighborhood_averaging(topology)),
            ProtocolKind::Pairwise => pairwise_gossip(topology).map_err(|e| at("protocol", e)),
            ProtocolKind::Identity => Ok(Protocol::identity(topology.n_agents())),
            ProtocolKind::Broadcast => {
                let beta = p.beta.ok_or_else(|| at("protocol.beta", "required for the broadcast protocol"))?;
                broadcast_gossip(topology, beta, p.wake_probs.as_deref()).map_err(|e| at("protocol", e))
            }
        }
    }

    /// Engine configuration for a single run (Monte Carlo overrides the stream).
    pub fn run_config(&self, exp: &Experiment) -> Result<RunConfig> {
        let mut rc = RunConfig::new(
            exp.objective.clone(),
            exp.noise,
            exp.schedule,
            exp.protocol.clone(),
            self.run.iterations,
            self.run.seed,
        );
        if let Some(s) = self.run.record_stride {
            rc.stride = s.into();
        }
        if let Some(init) = &self.run.initial {
            rc.initial = Some(DenseVector::new(init.clone())?);
        }
        if self.run.variant == VariantKind::Weighted {
            let v = match &self.run.weights {
                Some(w) => DenseVector::new(w.clone())?,
                None => perron_vector(&mean_matrix(&exp.protocol)?)?,
            };
            rc.variant = Variant::weighted(v)?;
        }
        rc.validate()?;
        Ok(rc)
    }
}

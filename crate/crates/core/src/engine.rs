//! The two-step recursion: every agent takes a noisy local gradient step,
//! then the network mixes the temporary iterates through a random gossip
//! matrix, `θ_n = (W_n ⊗ I_d)(θ_{n−1} + γ_n Y_n)`.

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{stacked_gradient, stacked_gradient_into, GradientField, NoiseModel, StepSchedule};
use crate::numerics::{block_average, project_disagreement, DenseVector};
use crate::protocols::{GossipMatrix, Protocol};

/// Iterates with `|θ_n|` above this are reported as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e9;

/// Default number of log-spaced record points.
pub const DEFAULT_RECORD_POINTS: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub n: u64,
    pub theta: DenseVector,
}

impl NetworkState {
    pub fn new(n: u64, theta: DenseVector) -> Self {
        Self { n, theta }
    }
}

/// Local-step flavour.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum Variant {
    #[default]
    Plain,
    /// Agent `i` scales its innovation by `1 / v_i`.
    Weighted(DenseVector),
}

impl Variant {
    pub fn weighted(v: DenseVector) -> Result<Self> {
        if let Some((index, &value)) = v.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
            return Err(Error::NonPositiveWeight { index, value });
        }
        Ok(Self::Weighted(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordStride {
    Every(u64),
    /// Roughly this many log-spaced indices, always including 0 and the last.
    Log(usize),
}

impl Default for RecordStride {
    fn default() -> Self {
        Self::Log(DEFAULT_RECORD_POINTS)
    }
}

impl RecordStride {
    pub fn indices(&self, n_iterations: u64) -> Vec<u64> {
        let mut idx = match *self {
            Self::Every(k) => {
                let k = k.max(1);
                (0..=n_iterations).step_by(k as usize).collect::<Vec<_>>()
            }
            Self::Log(points) => {
                let mut v = vec![0];
                if n_iterations > 0 {
                    let top = (n_iterations as f64).ln();
                    let steps = points.max(2) - 1;
                    v.extend((0..=steps).map(|k| (top * k as f64 / steps as f64).exp().round() as u64));
                }
                v
            }
        };
        idx.push(n_iterations);
        idx.sort_unstable();
        idx.dedup();
        idx.retain(|&n| n <= n_iterations);
        idx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub n: u64,
    /// `⟨θ_n⟩`
    pub average: Vec<f64>,
    /// `θ_{n,1}`
    pub agent1: Vec<f64>,
    /// `sqrt((1/N) Σ_i |θ_{n,i} − ⟨θ_n⟩|²)`
    pub disagreement: f64,
    /// `|J⊥θ_n| / γ_{n+1}`
    pub scaled_disagreement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub n_agents: usize,
    pub dim: usize,
    pub samples: Vec<TrajectorySample>,
    pub final_state: NetworkState,
}

impl TrajectoryRecord {
    pub fn last(&self) -> Option<&TrajectorySample> {
        self.samples.last()
    }
}

/// Everything needed for one seeded trajectory.
#[derive(Clone)]
pub struct RunConfig {
    pub field: Arc<dyn GradientField>,
    pub noise: NoiseModel,
    pub schedule: StepSchedule,
    pub protocol: Protocol,
    pub n_iterations: u64,
    /// Defaults to `θ_0 = 0`.
    pub initial: Option<DenseVector>,
    pub variant: Variant,
    pub stride: RecordStride,
    pub seed: u64,
    /// Independent ChaCha stream for the same seed (Monte Carlo run index).
    pub stream: u64,
}

impl RunConfig {
    pub fn new(
        field: Arc<dyn GradientField>,
        noise: NoiseModel,
        schedule: StepSchedule,
        protocol: Protocol,
        n_iterations: u64,
        seed: u64,
    ) -> Self {
        Self {
            field,
            noise,
            schedule,
            protocol,
            n_iterations,
            initial: None,
            variant: Variant::Plain,
            stride: RecordStride::default(),
            seed,
            stream: 0,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.field.n_agents()
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_agents();
        if self.protocol.n_agents() != n {
            return Err(Error::DimensionMismatch {
                context: "protocol size",
                expected: n,
                found: self.protocol.n_agents(),
            });
        }
        if let Some(init) = &self.initial {
            if init.len() != n * self.dim() {
                return Err(Error::DimensionMismatch {
                    context: "initial state",
                    expected: n * self.dim(),
                    found: init.len(),
                });
            }
        }
        if let Variant::Weighted(v) = &self.variant {
            if v.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "weights",
                    expected: n,
                    found: v.len(),
                });
            }
            if let Some((index, &value)) = v.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
                return Err(Error::NonPositiveWeight { index, value });
            }
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// `Y_n = g(θ_{n−1}) + ξ_n`
pub fn observe(
    field: &dyn GradientField,
    noise: &NoiseModel,
    theta: &DenseVector,
    rng: &mut dyn RngCore,
) -> Result<DenseVector> {
    let mut y = stacked_gradient(field, theta)?;
    noise.perturb(y.as_mut_slice(), rng);
    Ok(y)
}

/// One round `θ_n = (W ⊗ I_d)(θ_{n−1} + γ_n Y_n)`, with `Y_{n,i}` replaced by
/// `Y_{n,i} / v_i` in the weighted variant.
pub fn step(
    state: &NetworkState,
    w: &GossipMatrix,
    y: &DenseVector,
    gamma_n: f64,
    variant: &Variant,
) -> Result<NetworkState> {
    let n_agents = w.n_agents();
    let len = state.theta.len();
    if y.len() != len || !len.is_multiple_of(n_agents) {
        return Err(Error::DimensionMismatch {
            context: "step",
            expected: len,
            found: y.len(),
        });
    }
    let d = len / n_agents;
    let mut tilde = state.theta.clone();
    match variant {
        Variant::Plain => tilde.axpy(gamma_n, y),
        Variant::Weighted(v) => {
            if v.len() != n_agents {
                return Err(Error::DimensionMismatch {
                    context: "weights",
                    expected: n_agents,
                    found: v.len(),
                });
            }
            if let Some((index, &value)) = v.iter().enumerate().find(|(_, &x)| !(x > 0.0)) {
                return Err(Error::NonPositiveWeight { index, value });
            }
            for k in 0..len {
                tilde[k] += gamma_n * y[k] / v[k / d];
            }
        }
    }
    let mut out = DenseVector::zeros(len);
    w.apply_blocks(tilde.as_slice(), out.as_mut_slice());
    Ok(NetworkState::new(state.n + 1, out))
}

/// `(s_n, |J⊥θ_n|)` where `s_n = |J⊥θ_n| / √N`.
pub fn disagreement(theta: &DenseVector, n_agents: usize) -> (f64, f64) {
    let full = project_disagreement(theta, n_agents).norm();
    (full / (n_agents as f64).sqrt(), full)
}

/// `φ_n = J⊥θ_n / γ_{n+1}`
pub fn phi(state: &NetworkState, schedule: &StepSchedule, n_agents: usize) -> DenseVector {
    project_disagreement(&state.theta, n_agents).scale(1.0 / schedule.gamma_at(state.n + 1))
}

/// `|φ_n − α_n J⊥(W ⊗ I)(φ_{n−1} + Y_n)| / (1 + |φ_n|)` with `α_n = γ_n / γ_{n+1}`.
///
/// `y` is the innovation actually added by [`step`] (already divided by the
/// weights in the weighted variant).
pub fn phi_recursion_residual(
    prev: &NetworkState,
    new: &NetworkState,
    w: &GossipMatrix,
    y: &DenseVector,
    schedule: &StepSchedule,
) -> f64 {
    let n_agents = w.n_agents();
    let phi_prev = phi(prev, schedule, n_agents);
    let phi_new = phi(new, schedule, n_agents);
    let alpha = schedule.gamma_at(new.n) / schedule.gamma_at(new.n + 1);
    let mut mixed = DenseVector::zeros(y.len());
    w.apply_blocks(phi_prev.add(y).as_slice(), mixed.as_mut_slice());
    let rhs = project_disagreement(&mixed, n_agents).scale(alpha);
    phi_new.sub(&rhs).norm() / (1.0 + phi_new.norm())
}

/// Residual of `⟨θ_n⟩ = ⟨θ_{n−1}⟩ + γ_n ⟨(W ⊗ I)(Y_n + φ_{n−1})⟩`, relative to `1 + |⟨θ_n⟩|`.
pub fn average_dynamics_residual(
    prev: &NetworkState,
    new: &NetworkState,
    w: &GossipMatrix,
    y: &DenseVector,
    schedule: &StepSchedule,
) -> f64 {
    let n_agents = w.n_agents();
    let gamma = schedule.gamma_at(new.n);
    let phi_prev = phi(prev, schedule, n_agents);
    let mut mixed = DenseVector::zeros(y.len());
    w.apply_blocks(y.add(&phi_prev).as_slice(), mixed.as_mut_slice());
    let mut rhs = block_average(&prev.theta, n_agents);
    rhs.axpy(gamma, &block_average(&mixed, n_agents));
    let lhs = block_average(&new.theta, n_agents);
    lhs.sub(&rhs).norm() / (1.0 + lhs.norm())
}

fn sample_state(theta: &DenseVector, n: u64, n_agents: usize, schedule: &StepSchedule) -> TrajectorySample {
    let d = theta.len() / n_agents;
    let (s, full) = disagreement(theta, n_agents);
    TrajectorySample {
        n,
        average: block_average(theta, n_agents).into_inner(),
        agent1: theta.as_slice()[..d].to_vec(),
        disagreement: s,
        scaled_disagreement: full / schedule.gamma_at(n + 1),
    }
}

/// Runs `n_iterations` rounds and records samples at the configured stride.
pub fn run(config: &RunConfig) -> Result<TrajectoryRecord> {
    config.validate()?;
    let n_agents = config.n_agents();
    let d = config.dim();
    let len = n_agents * d;
    let field = config.field.as_ref();
    let schedule = &config.schedule;
    let mut rng = config.rng();

    let mut theta = config.initial.clone().unwrap_or_else(|| DenseVector::zeros(len));
    let inv_weights: Option<Vec<f64>> = match &config.variant {
        Variant::Plain => None,
        Variant::Weighted(v) => Some(v.iter().map(|x| 1.0 / x).collect()),
    };
    let record_at = config.stride.indices(config.n_iterations);
    let mut next_record = record_at.iter().peekable();
    let mut samples = Vec::with_capacity(record_at.len());

    if next_record.peek() == Some(&&0) {
        samples.push(sample_state(&theta, 0, n_agents, schedule));
        next_record.next();
    }

    let mut y = vec![0.0; len];
    let mut tilde = vec![0.0; len];
    for n in 1..=config.n_iterations {
        let gamma = schedule.gamma_at(n);
        stacked_gradient_into(field, theta.as_slice(), &mut y);
        config.noise.perturb(&mut y, &mut rng);
        match &inv_weights {
            None => {
                for ((t, th), yk) in tilde.iter_mut().zip(theta.iter()).zip(&y) {
                    *t = th + gamma * yk;
                }
            }
            Some(inv) => {
                for (k, (t, th)) in tilde.iter_mut().zip(theta.iter()).enumerate() {
                    *t = th + gamma * y[k] * inv[k / d];
                }
            }
        }
        let w = config.protocol.draw(&mut rng, Some(&theta));
        w.apply_blocks(&tilde, theta.as_mut_slice());

        let norm = theta.norm();
        if !norm.is_finite() || norm > DIVERGENCE_BOUND {
            return Err(Error::Divergence { n, norm });
        }
        if next_record.peek() == Some(&&n) {
            samples.push(sample_state(&theta, n, n_agents, schedule));
            next_record.next();
        }
    }

    Ok(TrajectoryRecord {
        n_agents,
        dim: d,
        samples,
        final_state: NetworkState::new(config.n_iterations, theta),
    })
}

//! Random row-stochastic exchange matrices.
//!
//! Built-in protocols carry an exact finite support so that expectations in
//! [`crate::asymptotics`] are finite sums. A state-dependent sampler can be
//! plugged into the engine, but it has no support and is refused by every
//! exact-expectation routine.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Topology;
use crate::numerics::{projectors, spectral_radius, DenseMatrix, DenseVector};

/// Row sums, column sums and probabilities are compared against 1 with this slack.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Margin below 1 required of the contraction factor.
pub const CONTRACTION_MARGIN: f64 = 1e-9;

/// Non-negative, row-stochastic `N × N` matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenseMatrix", into = "DenseMatrix")]
pub struct GossipMatrix(DenseMatrix);

impl GossipMatrix {
    pub fn new(m: DenseMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::NotSquare {
                context: "GossipMatrix",
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        if let Some(x) = m.as_slice().iter().find(|&&x| x < 0.0) {
            return Err(Error::InvalidParameter(format!("gossip matrix has negative entry {x}")));
        }
        for (i, s) in m.row_sums().into_iter().enumerate() {
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidParameter(format!("gossip matrix row {i} sums to {s}")));
            }
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(DenseMatrix::identity(n))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn n_agents(&self) -> usize {
        self.0.rows()
    }

    pub fn is_column_stochastic(&self) -> bool {
        self.0.col_sums().iter().all(|s| (s - 1.0).abs() <= STOCHASTIC_TOL)
    }

    /// Applies `W ⊗ I_d` to a stacked vector.
    pub fn apply_blocks(&self, x: &[f64], out: &mut [f64]) {
        let n = self.0.rows();
        let d = x.len() / n;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..n {
            let dst = &mut out[i * d..(i + 1) * d];
            for (j, &w) in self.0.row(i).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (o, s) in dst.iter_mut().zip(&x[j * d..(j + 1) * d]) {
                    *o += w * s;
                }
            }
        }
    }
}

impl TryFrom<DenseMatrix> for GossipMatrix {
    type Error = Error;

    fn try_from(m: DenseMatrix) -> Result<Self> {
        Self::new(m)
    }
}

impl From<GossipMatrix> for DenseMatrix {
    fn from(g: GossipMatrix) -> Self {
        g.0
    }
}

/// Finite distribution of `W_1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSupport {
    atoms: Vec<(f64, GossipMatrix)>,
}

impl ProtocolSupport {
    pub fn new(atoms: Vec<(f64, GossipMatrix)>) -> Result<Self> {
        let first = atoms
            .first()
            .ok_or_else(|| Error::InvalidParameter("protocol support is empty".into()))?;
        let n = first.1.n_agents();
        let mut total = 0.0;
        for (p, w) in &atoms {
            if !(*p > 0.0) {
                return Err(Error::InvalidParameter(format!("atom probability {p} is not positive")));
            }
            if w.n_agents() != n {
                return Err(Error::DimensionMismatch {
                    context: "protocol support",
                    expected: n,
                    found: w.n_agents(),
                });
            }
            total += p;
        }
        if (total - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::InvalidParameter(format!("atom probabilities sum to {total}")));
        }
        Ok(Self { atoms })
    }

    pub fn point_mass(w: GossipMatrix) -> Self {
        Self { atoms: vec![(1.0, w)] }
    }

    pub fn atoms(&self) -> &[(f64, GossipMatrix)] {
        &self.atoms
    }

    pub fn n_agents(&self) -> usize {
        self.atoms[0].1.n_agents()
    }

    /// `Σ_k p_k F(W_k)`
    pub fn expectation(&self, f: impl Fn(&GossipMatrix) -> DenseMatrix) -> DenseMatrix {
        let mut iter = self.atoms.iter();
        let (p0, w0) = iter.next().expect("support is non-empty");
        let mut acc = f(w0).scale(*p0);
        for (p, w) in iter {
            acc.axpy(*p, &f(w));
        }
        acc
    }
}

/// Sampler hook for exchange matrices that depend on the current estimate.
pub type StateSampler = Arc<dyn Fn(&mut dyn RngCore, Option<&DenseVector>) -> GossipMatrix + Send + Sync>;

#[derive(Clone)]
enum Source {
    Finite {
        support: ProtocolSupport,
        cumulative: Vec<f64>,
    },
    StateDependent(StateSampler),
}

/// Distribution over gossip matrices.
#[derive(Clone)]
pub struct Protocol {
    n_agents: usize,
    label: String,
    source: Source,
}

impl fmt::Debug for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Protocol")
            .field("label", &self.label)
            .field("n_agents", &self.n_agents)
            .field("finite_support", &self.support().map(|s| s.atoms().len()))
            .finish()
    }
}

impl Protocol {
    pub fn from_support(label: impl Into<String>, support: ProtocolSupport) -> Self {
        let mut acc = 0.0;
        let cumulative = support
            .atoms()
            .iter()
            .map(|(p, _)| {
                acc += p;
                acc
            })
            .collect();
        Self {
            n_agents: support.n_agents(),
            label: label.into(),
            source: Source::Finite { support, cumulative },
        }
    }

    pub fn state_dependent(n_agents: usize, label: impl Into<String>, sampler: StateSampler) -> Self {
        Self {
            n_agents,
            label: label.into(),
            source: Source::StateDependent(sampler),
        }
    }

    /// Every round keeps all estimates: `W = I`.
    pub fn identity(n_agents: usize) -> Self {
        Self::from_support("identity", ProtocolSupport::point_mass(GossipMatrix::identity(n_agents)))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn support(&self) -> Option<&ProtocolSupport> {
        match &self.source {
            Source::Finite { support, .. } => Some(support),
            Source::StateDependent(_) => None,
        }
    }

    pub fn require_support(&self) -> Result<&ProtocolSupport> {
        self.support().ok_or_else(|| Error::MissingSupport(self.label.clone()))
    }

    /// Draws one matrix, borrowing it when it is a support atom.
    pub fn draw<'a>(&'a self, rng: &mut dyn RngCore, theta: Option<&DenseVector>) -> Cow<'a, GossipMatrix> {
        match &self.source {
            Source::Finite { support, cumulative } => {
                let atoms = support.atoms();
                if atoms.len() == 1 {
                    return Cow::Borrowed(&atoms[0].1);
                }
                let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
                let k = cumulative.partition_point(|&c| c <= u).min(atoms.len() - 1);
                Cow::Borrowed(&atoms[k].1)
            }
            Source::StateDependent(sampler) => Cow::Owned(sampler(rng, theta)),
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore, theta: Option<&DenseVector>) -> GossipMatrix {
        self.draw(rng, theta).into_owned()
    }
}

/// `W_1 = (I + D)^{-1}(I + A)`: every agent averages itself and its neighbours.
pub fn fixed_neighborhood_averaging(topology: &Topology) -> Protocol {
    let n = topology.n_agents();
    let m = DenseMatrix::from_fn(n, n, |i, j| {
        if i == j || topology.is_edge(i, j) {
            1.0 / (1.0 + topology.degree(i) as f64)
        } else {
            0.0
        }
    });
    let w = GossipMatrix::new(m).expect("neighbourhood averaging is row-stochastic");
    Protocol::from_support("fixed", ProtocolSupport::point_mass(w))
}

/// Uniform random edge `{i, j}`, both endpoints replaced by their midpoint:
/// `W = I − (e_i − e_j)(e_i − e_j)ᵀ / 2`.
pub fn pairwise_gossip(topology: &Topology) -> Result<Protocol> {
    let n = topology.n_agents();
    let edges = topology.edges();
    if edges.is_empty() {
        return Err(Error::Topology("pairwise gossip needs at least one edge".into()));
    }
    let p = 1.0 / edges.len() as f64;
    let atoms = edges
        .into_iter()
        .map(|(i, j)| {
            let mut m = DenseMatrix::identity(n);
            m[(i, i)] = 0.5;
            m[(j, j)] = 0.5;
            m[(i, j)] = 0.5;
            m[(j, i)] = 0.5;
            Ok((p, GossipMatrix::new(m)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Protocol::from_support("pairwise", ProtocolSupport::new(atoms)?))
}

/// One agent wakes (with probability `wake_probs[i]`, uniform by default) and
/// broadcasts; each neighbour `k` mixes `β` of the broadcast into its own value.
pub fn broadcast_gossip(topology: &Topology, beta: f64, wake_probs: Option<&[f64]>) -> Result<Protocol> {
    let n = topology.n_agents();
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter(format!("broadcast beta must lie in (0,1), got {beta}")));
    }
    let probs = match wake_probs {
        Some(p) => {
            if p.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "broadcast wake_probs",
                    expected: n,
                    found: p.len(),
                });
            }
            if p.iter().any(|&x| !(x > 0.0)) {
                return Err(Error::InvalidParameter("wake probabilities must be positive".into()));
            }
            let total: f64 = p.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidParameter(format!("wake probabilities sum to {total}")));
            }
            p.to_vec()
        }
        None => vec![1.0 / n as f64; n],
    };
    let atoms = (0..n)
        .map(|i| {
            let mut m = DenseMatrix::identity(n);
            for k in topology.neighbors(i) {
                m[(k, k)] = 1.0 - beta;
                m[(k, i)] = beta;
            }
            Ok((probs[i], GossipMatrix::new(m)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Protocol::from_support("broadcast", ProtocolSupport::new(atoms)?))
}

/// `W̄ = Σ_k p_k W_k`
pub fn mean_matrix(protocol: &Protocol) -> Result<DenseMatrix> {
    Ok(protocol.require_support()?.expectation(|w| w.matrix().clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StochasticityFlags {
    pub row_stochastic: bool,
    pub doubly_stochastic_each_draw: bool,
    pub doubly_stochastic_in_mean: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    /// `r(E[W_1ᵀ J⊥ W_1])`
    pub rho: f64,
    pub passes: bool,
    pub mean_matrix: DenseMatrix,
    pub flags: StochasticityFlags,
}

/// Computes `r(E[W_1ᵀ J⊥ W_1])` and the stochasticity classes of the support.
pub fn check_contraction(protocol: &Protocol) -> Result<ContractionReport> {
    let support = protocol.require_support()?;
    let p = projectors(protocol.n_agents(), 1);
    let k = support.expectation(|w| w.matrix().transpose().matmul(&p.j_perp).matmul(w.matrix()));
    // exact symmetrization keeps the symmetric eigensolver path
    let k = k.add(&k.transpose()).scale(0.5);
    let rho = spectral_radius(&k)?;
    let mean = mean_matrix(protocol)?;
    let flags = StochasticityFlags {
        row_stochastic: support.atoms().iter().all(|(_, w)| {
            w.matrix().row_sums().iter().all(|s| (s - 1.0).abs() <= STOCHASTIC_TOL)
        }),
        doubly_stochastic_each_draw: support.atoms().iter().all(|(_, w)| w.is_column_stochastic()),
        doubly_stochastic_in_mean: mean.col_sums().iter().all(|s| (s - 1.0).abs() <= STOCHASTIC_TOL),
    };
    Ok(ContractionReport {
        rho,
        passes: rho < 1.0 - CONTRACTION_MARGIN,
        mean_matrix: mean,
        flags,
    })
}

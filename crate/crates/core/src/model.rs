//! Problem instance: agent graph, local objectives, observation noise and
//! step sizes.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, DenseVector};

/// Undirected, connected agent graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    n_agents: usize,
    adjacency: Vec<Vec<bool>>,
}

impl Topology {
    pub fn from_adjacency(adjacency: &[Vec<u8>]) -> Result<Self> {
        let n = adjacency.len();
        if n == 0 {
            return Err(Error::Topology("graph has no agents".into()));
        }
        let mut adj = vec![vec![false; n]; n];
        for (i, row) in adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Topology(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            for (j, &a) in row.iter().enumerate() {
                adj[i][j] = match a {
                    0 => false,
                    1 => true,
                    other => {
                        return Err(Error::Topology(format!("entry ({i},{j}) is {other}, expected 0 or 1")))
                    }
                };
            }
        }
        for i in 0..n {
            if adj[i][i] {
                return Err(Error::Topology(format!("self-loop at agent {i}")));
            }
            for j in 0..i {
                if adj[i][j] != adj[j][i] {
                    return Err(Error::Topology(format!("adjacency not symmetric at ({i},{j})")));
                }
            }
        }
        let topo = Self { n_agents: n, adjacency: adj };
        if !topo.is_connected() {
            return Err(Error::Topology("graph is not connected".into()));
        }
        Ok(topo)
    }

    pub fn complete(n: usize) -> Result<Self> {
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|i| (0..n).map(|j| u8::from(i != j)).collect())
            .collect();
        Self::from_adjacency(&rows)
    }

    pub fn ring(n: usize) -> Result<Self> {
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| u8::from(n > 1 && i != j && (j == (i + 1) % n || i == (j + 1) % n)))
                    .collect()
            })
            .collect();
        Self::from_adjacency(&rows)
    }

    /// Erdős–Rényi draws with a spanning path added so the result is connected.
    pub fn random_connected<R: Rng + ?Sized>(n: usize, edge_prob: f64, rng: &mut R) -> Result<Self> {
        let mut rows = vec![vec![0u8; n]; n];
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for w in order.windows(2) {
            rows[w[0]][w[1]] = 1;
            rows[w[1]][w[0]] = 1;
        }
        for i in 0..n {
            for j in 0..i {
                if rng.random::<f64>() < edge_prob {
                    rows[i][j] = 1;
                    rows[j][i] = 1;
                }
            }
        }
        Self::from_adjacency(&rows)
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[i].iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j)
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    /// Edges `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_agents;
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[i][j])
            .collect()
    }

    pub fn adjacency_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.n_agents, self.n_agents, |i, j| {
            if self.adjacency[i][j] {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.adjacency
            .iter()
            .map(|r| r.iter().map(|&a| u8::from(a)).collect())
            .collect()
    }

    /// Relabels agents: new agent `k` is old agent `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<u8>> = perm
            .iter()
            .map(|&pi| perm.iter().map(|&pj| u8::from(self.adjacency[pi][pj])).collect())
            .collect();
        Self::from_adjacency(&rows)
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n_agents];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Per-agent gradient oracle `i, θ_i ↦ ∇f_i(θ_i)`.
pub trait GradientField: Send + Sync {
    fn dim(&self) -> usize;

    fn n_agents(&self) -> usize;

    /// Writes `∇f_i(theta)` into `out`.
    fn gradient(&self, agent: usize, theta: &[f64], out: &mut [f64]);

    /// Closed-form limit points are only available for quadratics.
    fn as_quadratic(&self) -> Option<&QuadraticObjective> {
        None
    }
}

/// `f_i(θ) = ½|θ − α_i|²`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticObjective {
    dim: usize,
    alphas: Vec<DenseVector>,
}

impl QuadraticObjective {
    pub fn new(alphas: Vec<Vec<f64>>) -> Result<Self> {
        let dim = alphas.first().map_or(0, Vec::len);
        if alphas.is_empty() || dim == 0 {
            return Err(Error::InvalidParameter("objective needs at least one non-empty alpha".into()));
        }
        let alphas = alphas
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                if a.len() != dim {
                    return Err(Error::InvalidParameter(format!(
                        "alpha {i} has dimension {}, expected {dim}",
                        a.len()
                    )));
                }
                DenseVector::new(a)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, alphas })
    }

    /// Scalar targets, `d = 1`.
    pub fn scalar(alphas: &[f64]) -> Result<Self> {
        Self::new(alphas.iter().map(|&a| vec![a]).collect())
    }

    pub fn alphas(&self) -> &[DenseVector] {
        &self.alphas
    }

    /// `(α_1ᵀ, …, α_Nᵀ)ᵀ`
    pub fn stacked_alphas(&self) -> DenseVector {
        DenseVector::from_fn(self.alphas.len() * self.dim, |k| self.alphas[k / self.dim][k % self.dim])
    }

    pub fn value(&self, agent: usize, theta: &[f64]) -> f64 {
        0.5 * theta
            .iter()
            .zip(self.alphas[agent].iter())
            .map(|(t, a)| (t - a).powi(2))
            .sum::<f64>()
    }

    /// Minimizer of `Σ f_i`, the plain average of the targets.
    pub fn uniform_minimizer(&self) -> DenseVector {
        let n = self.alphas.len() as f64;
        self.alphas
            .iter()
            .fold(DenseVector::zeros(self.dim), |acc, a| acc.add(a))
            .scale(1.0 / n)
    }
}

impl GradientField for QuadraticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_agents(&self) -> usize {
        self.alphas.len()
    }

    fn gradient(&self, agent: usize, theta: &[f64], out: &mut [f64]) {
        for ((o, t), a) in out.iter_mut().zip(theta).zip(self.alphas[agent].iter()) {
            *o = t - a;
        }
    }

    fn as_quadratic(&self) -> Option<&QuadraticObjective> {
        Some(self)
    }
}

/// `g(θ) = (−∇f_1(θ_1)ᵀ, …, −∇f_N(θ_N)ᵀ)ᵀ`
pub fn stacked_gradient(field: &dyn GradientField, theta: &DenseVector) -> Result<DenseVector> {
    let d = field.dim();
    let n = field.n_agents();
    if theta.len() != d * n {
        return Err(Error::DimensionMismatch {
            context: "stacked_gradient",
            expected: d * n,
            found: theta.len(),
        });
    }
    let mut out = DenseVector::zeros(d * n);
    stacked_gradient_into(field, theta.as_slice(), out.as_mut_slice());
    Ok(out)
}

pub(crate) fn stacked_gradient_into(field: &dyn GradientField, theta: &[f64], out: &mut [f64]) {
    let d = field.dim();
    for i in 0..field.n_agents() {
        let block = &mut out[i * d..(i + 1) * d];
        field.gradient(i, &theta[i * d..(i + 1) * d], block);
        for x in block.iter_mut() {
            *x = -*x;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    #[default]
    GaussianIid,
    None,
}

/// State-independent observation noise `ξ_{n,i}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
}

impl NoiseModel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(Self {
            kind: NoiseKind::GaussianIid,
            sigma,
        })
    }

    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            sigma: 0.0,
        }
    }

    /// Per-coordinate variance.
    pub fn variance(&self) -> f64 {
        match self.kind {
            NoiseKind::GaussianIid => self.sigma * self.sigma,
            NoiseKind::None => 0.0,
        }
    }

    /// Adds one noise draw to every coordinate of `y`.
    pub fn perturb<R: Rng + ?Sized>(&self, y: &mut [f64], rng: &mut R) {
        if self.kind == NoiseKind::None || self.sigma == 0.0 {
            return;
        }
        for v in y {
            let z: f64 = StandardNormal.sample(rng);
            *v += self.sigma * z;
        }
    }
}

/// `γ_n = γ★ / n^a`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    gamma_star: f64,
    exponent: f64,
}

impl StepSchedule {
    pub fn new(gamma_star: f64, exponent: f64) -> Result<Self> {
        if !(gamma_star > 0.0 && gamma_star.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma_star must be > 0, got {gamma_star}")));
        }
        if !(exponent > 0.5 && exponent <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "step exponent must lie in (1/2, 1], got {exponent}"
            )));
        }
        Ok(Self { gamma_star, exponent })
    }

    pub fn gamma_star(&self) -> f64 {
        self.gamma_star
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }

    pub fn gamma(&self, n: u64) -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidParameter("step sizes are indexed from n = 1".into()));
        }
        Ok(self.gamma_at(n))
    }

    #[inline]
    pub(crate) fn gamma_at(&self, n: u64) -> f64 {
        self.gamma_star / (n as f64).powf(self.exponent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use proptest::prelude::*;

    #[test]
    fn topology_validation() {
        assert!(Topology::from_adjacency(&[vec![0, 1], vec![0, 0]]).is_err());
        assert!(Topology::from_adjacency(&[vec![1, 1], vec![1, 0]]).is_err());
        assert!(Topology::from_adjacency(&[vec![0, 0], vec![0, 0]]).is_err());
        assert!(Topology::from_adjacency(&[vec![0, 2], vec![2, 0]]).is_err());
        assert!(Topology::from_adjacency(&[]).is_err());
        let t = Topology::from_adjacency(&[vec![0]]).unwrap();
        assert_eq!(t.edges(), vec![]);
    }

    #[test]
    fn benchmark_graph_has_six_edges() {
        let t = presets::benchmark_topology();
        assert_eq!(t.edges().len(), 6);
        let degrees: Vec<usize> = (0..5).map(|i| t.degree(i)).collect();
        assert_eq!(degrees, vec![2, 2, 3, 3, 2]);
    }

    #[test]
    fn stacked_gradient_examples() {
        let obj = presets::benchmark_objective();
        let at_alpha = stacked_gradient(&obj, &obj.stacked_alphas()).unwrap();
        assert_eq!(at_alpha.as_slice(), &[0.0; 5]);
        let g = stacked_gradient(&obj, &DenseVector::filled(5, 1.0)).unwrap();
        assert_eq!(g.as_slice(), &[-4.0, 4.0, 4.0, 0.0, -4.0]);
        let g0 = stacked_gradient(&obj, &DenseVector::zeros(5)).unwrap();
        assert_eq!(g0.as_slice(), &[-3.0, 5.0, 5.0, 1.0, -3.0]);
        assert!(stacked_gradient(&obj, &DenseVector::zeros(4)).is_err());
    }

    #[test]
    fn gamma_examples() {
        let s = StepSchedule::new(0.1, 0.7).unwrap();
        assert_eq!(s.gamma(1).unwrap(), 0.1);
        assert!(s.gamma(0).is_err());
        let h = StepSchedule::new(1.0, 1.0).unwrap();
        assert_eq!(h.gamma(1024).unwrap(), 1.0 / 1024.0);
        let n = 1_000_000;
        assert!((s.gamma(n).unwrap() / s.gamma(n + 1).unwrap() - 1.0).abs() < 1e-5);
        assert!(StepSchedule::new(0.1, 0.5).is_err());
        assert!(StepSchedule::new(0.1, 1.1).is_err());
        assert!(StepSchedule::new(0.0, 0.7).is_err());
    }

    #[test]
    fn gamma_decreasing_and_partial_sums_grow() {
        for a in [0.51, 0.7, 1.0] {
            let s = StepSchedule::new(1.0, a).unwrap();
            let mut sum = 0.0;
            let mut checkpoints = Vec::new();
            let mut prev = f64::INFINITY;
            for n in 1..=1_000_000u64 {
                let g = s.gamma(n).unwrap();
                assert!(g < prev);
                prev = g;
                sum += g;
                if n.is_power_of_two() {
                    checkpoints.push(sum);
                }
            }
            // each doubling of n adds at least ~ (1 - 2^{-a}) / a-ish mass: the
            // partial sums keep increasing by a non-vanishing amount
            let increments: Vec<f64> = checkpoints.windows(2).map(|w| w[1] - w[0]).collect();
            assert!(increments.iter().rev().take(5).all(|&inc| inc > 0.5));
        }
    }

    #[test]
    fn uniform_minimizer_examples() {
        assert_eq!(presets::benchmark_objective().uniform_minimizer().as_slice(), &[1.0]);
        assert_eq!(
            QuadraticObjective::scalar(&[2.5; 4]).unwrap().uniform_minimizer().as_slice(),
            &[2.5]
        );
        assert_eq!(
            QuadraticObjective::scalar(&[0.0, 2.0]).unwrap().uniform_minimizer().as_slice(),
            &[1.0]
        );
    }

    #[test]
    fn noise_validation() {
        assert!(NoiseModel::gaussian(-1.0).is_err());
        assert_eq!(NoiseModel::none().variance(), 0.0);
        assert_eq!(NoiseModel::gaussian(2.0).unwrap().variance(), 4.0);
    }

    proptest! {
        #[test]
        fn quadratic_gradient_matches_finite_differences(
            alphas in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 3),
            theta in prop::collection::vec(-5.0f64..5.0, 6),
        ) {
            let obj = QuadraticObjective::new(alphas).unwrap();
            let theta = DenseVector::new(theta).unwrap();
            let g = stacked_gradient(&obj, &theta).unwrap();
            let affine = obj.stacked_alphas().sub(&theta);
            prop_assert!(g.sub(&affine).max_abs() < 1e-14);
            let h = 1e-5;
            for i in 0..3 {
                for c in 0..2 {
                    let mut plus = theta.as_slice()[i * 2..i * 2 + 2].to_vec();
                    let mut minus = plus.clone();
                    plus[c] += h;
                    minus[c] -= h;
                    let fd = (obj.value(i, &plus) - obj.value(i, &minus)) / (2.0 * h);
                    let exact = -g[i * 2 + c];
                    prop_assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1.0));
                }
            }
        }
    }
}

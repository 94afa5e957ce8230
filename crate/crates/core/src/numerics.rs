//! Dense small-matrix kernel.
//!
//! Every analysis formula in this crate works on matrices of size at most
//! `d²N² × d²N²`, so plain row-major storage with `O(n³)` algorithms is
//! enough. Eigenvalues are delegated to `nalgebra`; linear and Lyapunov
//! solves are done here so the singularity rule stays under our control.

use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivots smaller than this fraction of the max-norm are treated as zero.
pub const SINGULARITY_TOL: f64 = 1e-12;

const POWER_ITER_TOL: f64 = 1e-12;
const POWER_ITER_CAP: usize = 10_000;

/// Row-major dense matrix with finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Dense vector with finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Self::new(raw.rows, raw.cols, raw.data)
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Self::new(data)
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "DenseMatrix::new",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch {
                    context: "DenseMatrix::from_rows",
                    expected: c,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    /// Column vector `x` as an `n × 1` matrix.
    pub fn column(x: &DenseVector) -> Self {
        Self {
            rows: x.len(),
            cols: 1,
            data: x.0.clone(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &DenseVector) -> DenseVector {
        assert_eq!(self.cols, x.len(), "mul_vec shape mismatch");
        DenseVector(
            (0..self.rows)
                .map(|i| self.row(i).iter().zip(&x.0).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    /// `xᵀ A` as a vector.
    pub fn left_mul_vec(&self, x: &DenseVector) -> DenseVector {
        assert_eq!(self.rows, x.len(), "left_mul_vec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.0.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        DenseVector(out)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a;
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("DenseVector"));
        }
        Ok(Self(data))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self((0..n).map(f).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        assert_eq!(self.len(), other.len(), "dot length mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.len(), other.len(), "add length mismatch");
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.len(), other.len(), "sub length mismatch");
        Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.iter().map(|x| x * s).collect())
    }

    pub fn axpy(&mut self, s: f64, other: &Self) {
        assert_eq!(self.len(), other.len(), "axpy length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// `x yᵀ`
    pub fn outer(&self, other: &Self) -> DenseMatrix {
        DenseMatrix::from_fn(self.len(), other.len(), |i, j| self.0[i] * other.0[j])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for DenseVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    DenseMatrix::from_fn(ra * rb, ca * cb, |i, j| a[(i / rb, j / cb)] * b[(i % rb, j % cb)])
}

/// Column-stacking vectorization.
pub fn vectorize(a: &DenseMatrix) -> DenseVector {
    let (r, c) = a.shape();
    DenseVector::from_fn(r * c, |k| a[(k % r, k / r)])
}

/// Inverse of [`vectorize`].
pub fn devectorize(x: &DenseVector, rows: usize, cols: usize) -> Result<DenseMatrix> {
    if x.len() != rows * cols {
        return Err(Error::DimensionMismatch {
            context: "devectorize",
            expected: rows * cols,
            found: x.len(),
        });
    }
    Ok(DenseMatrix::from_fn(rows, cols, |i, j| x[j * rows + i]))
}

/// Consensus projectors for `n_agents` agents with `dim`-dimensional states.
#[derive(Clone, Debug)]
pub struct Projectors {
    /// `J = 11ᵀ/N`
    pub j: DenseMatrix,
    /// `J⊥ = I − J`
    pub j_perp: DenseMatrix,
    /// `J ⊗ I_d`
    pub j_block: DenseMatrix,
    /// `J⊥ ⊗ I_d`
    pub j_perp_block: DenseMatrix,
}

pub fn projectors(n_agents: usize, dim: usize) -> Projectors {
    assert!(n_agents >= 1 && dim >= 1, "projectors need n_agents, dim >= 1");
    let inv = 1.0 / n_agents as f64;
    let j = DenseMatrix::from_fn(n_agents, n_agents, |_, _| inv);
    let j_perp = DenseMatrix::identity(n_agents).sub(&j);
    let eye = DenseMatrix::identity(dim);
    Projectors {
        j_block: kron(&j, &eye),
        j_perp_block: kron(&j_perp, &eye),
        j,
        j_perp,
    }
}

/// Applies `J⊥ ⊗ I_d` to a stacked vector without building the matrix.
pub fn project_disagreement(x: &DenseVector, n_agents: usize) -> DenseVector {
    let avg = block_average(x, n_agents);
    let d = avg.len();
    DenseVector::from_fn(x.len(), |k| x[k] - avg[k % d])
}

/// `⟨x⟩ = (1ᵀ ⊗ I_d) x / N`.
pub fn block_average(x: &DenseVector, n_agents: usize) -> DenseVector {
    let d = x.len() / n_agents;
    let mut out = vec![0.0; d];
    for (k, xk) in x.iter().enumerate() {
        out[k % d] += xk;
    }
    DenseVector(out).scale(1.0 / n_agents as f64)
}

const SCHUR_ITER_PER_DIM: usize = 1000;

/// Eigenvalues as `(re, im)` pairs. Symmetric inputs use the symmetric
/// solver; others a capped Schur iteration.
pub fn eigenvalues(a: &DenseMatrix) -> Result<Vec<(f64, f64)>> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            context: "eigenvalues",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if a.rows() == 0 {
        return Ok(Vec::new());
    }
    let m = a.to_nalgebra();
    let scale = a.max_abs();
    if a.is_symmetric(1e-12 * scale) {
        return Ok(m.symmetric_eigen().eigenvalues.iter().map(|&x| (x, 0.0)).collect());
    }
    let n = a.rows();
    let schur = nalgebra::linalg::Schur::try_new(m, f64::EPSILON, SCHUR_ITER_PER_DIM * n)
        .ok_or_else(|| Error::Numerical(format!("Schur iteration did not converge on a {n}x{n} matrix")))?;
    Ok(schur.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect())
}

/// Largest real part among the eigenvalues of `a`.
pub fn max_real_eigenvalue(a: &DenseMatrix) -> Result<f64> {
    Ok(eigenvalues(a)?
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Spectral radius `r(a)`.
///
/// Symmetric inputs use a full symmetric eigendecomposition. Other inputs
/// use power iteration and fall back to the Schur eigenvalues when the
/// iteration does not settle (complex or tied dominant eigenvalues).
pub fn spectral_radius(a: &DenseMatrix) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            context: "spectral_radius",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    if n == 0 {
        return Ok(0.0);
    }
    let scale = a.max_abs();
    if scale == 0.0 {
        return Ok(0.0);
    }
    if a.is_symmetric(1e-12 * scale) {
        let eig = a.to_nalgebra().symmetric_eigen();
        return Ok(eig.eigenvalues.iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    match power_iteration(a) {
        Some(r) => Ok(r),
        None => Ok(eigenvalues(a)?
            .into_iter()
            .fold(0.0, |m, (re, im)| m.max(re.hypot(im)))),
    }
}

fn power_iteration(a: &DenseMatrix) -> Option<f64> {
    let n = a.rows();
    // Irrational-ish start so we are not orthogonal to the dominant direction.
    let mut x = DenseVector::from_fn(n, |i| 1.0 + 0.1 * ((i as f64 + 1.0) * 0.618_033_988_75).fract());
    let nx = x.norm();
    x = x.scale(1.0 / nx);
    let mut last = f64::NAN;
    for _ in 0..POWER_ITER_CAP {
        let y = a.mul_vec(&x);
        let ny = y.norm();
        if ny == 0.0 {
            return Some(0.0);
        }
        if (ny - last).abs() <= POWER_ITER_TOL * ny.max(1.0) {
            return Some(ny);
        }
        last = ny;
        x = y.scale(1.0 / ny);
    }
    None
}

/// LU factorization with partial pivoting.
#[derive(Clone, Debug)]
pub struct LuFactors {
    n: usize,
    lu: DenseMatrix,
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn new(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NotSquare {
                context: "LU factorization",
                rows: a.rows(),
                cols: a.cols(),
            });
        }
        let n = a.rows();
        let tol = SINGULARITY_TOL * a.max_abs();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot <= tol || pivot == 0.0 {
                return Err(Error::Singular { pivot, tolerance: tol });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
            }
            let d = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / d;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[(i, j)] -= f * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn solve(&self, b: &DenseVector) -> Result<DenseVector> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "LU solve",
                expected: self.n,
                found: b.len(),
            });
        }
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[(i, j)] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[(i, j)] * x[j]).sum();
            x[i] = (x[i] - s) / self.lu[(i, i)];
        }
        Ok(DenseVector(x))
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if b.rows() != self.n {
            return Err(Error::DimensionMismatch {
                context: "LU solve_matrix",
                expected: self.n,
                found: b.rows(),
            });
        }
        let mut out = DenseMatrix::zeros(self.n, b.cols());
        for j in 0..b.cols() {
            let col = DenseVector::from_fn(self.n, |i| b[(i, j)]);
            let x = self.solve(&col)?;
            for i in 0..self.n {
                out[(i, j)] = x[i];
            }
        }
        Ok(out)
    }

    pub fn inverse(&self) -> Result<DenseMatrix> {
        self.solve_matrix(&DenseMatrix::identity(self.n))
    }
}

/// Solves `a x = b`.
pub fn solve_linear(a: &DenseMatrix, b: &DenseVector) -> Result<DenseVector> {
    LuFactors::new(a)?.solve(b)
}

pub fn inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    LuFactors::new(a)?.inverse()
}

/// Solves `V aᵀ + a V = −u` for symmetric `V`.
///
/// `a` must be Hurwitz. The system is vectorized as
/// `(I ⊗ a + a ⊗ I) vec(V) = −vec(u)`.
pub fn solve_lyapunov(a: &DenseMatrix, u: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            context: "solve_lyapunov",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let d = a.rows();
    if u.shape() != (d, d) {
        return Err(Error::DimensionMismatch {
            context: "solve_lyapunov rhs",
            expected: d,
            found: u.rows(),
        });
    }
    let max_re = max_real_eigenvalue(a)?;
    if max_re >= 0.0 {
        return Err(Error::Unstable { max_real_part: max_re });
    }
    let eye = DenseMatrix::identity(d);
    let op = kron(&eye, a).add(&kron(a, &eye));
    let rhs = vectorize(u).scale(-1.0);
    let v = devectorize(&solve_linear(&op, &rhs)?, d, d)?;
    Ok(v.add(&v.transpose()).scale(0.5))
}

/// `‖V aᵀ + a V + u‖_F`
pub fn lyapunov_residual(a: &DenseMatrix, v: &DenseMatrix, u: &DenseMatrix) -> f64 {
    v.matmul(&a.transpose()).add(&a.matmul(v)).add(u).frobenius()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn pseudo_random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut s = seed;
        DenseMatrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(DenseMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(DenseVector::new(vec![f64::INFINITY]).is_err());
        assert!(DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn kron_examples() {
        assert_eq!(
            kron(&DenseMatrix::identity(2), &DenseMatrix::identity(3)),
            DenseMatrix::identity(6)
        );
        let swap = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(kron(&swap, &m(&[&[2.0]])), m(&[&[0.0, 2.0], &[2.0, 0.0]]));
        let p = projectors(2, 1);
        assert!(kron(&p.j_perp, &DenseMatrix::identity(1)).max_abs_diff(&p.j_perp_block) < 1e-15);
    }

    #[test]
    fn kron_mixed_product() {
        let (a, b) = (pseudo_random(2, 3, 1), pseudo_random(3, 2, 2));
        let (c, d) = (pseudo_random(3, 2, 3), pseudo_random(2, 3, 4));
        let lhs = kron(&a, &b).matmul(&kron(&c, &d));
        let rhs = kron(&a.matmul(&c), &b.matmul(&d));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn vectorize_examples() {
        assert_eq!(vectorize(&DenseMatrix::identity(2)).as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(vectorize(&a).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(devectorize(&vectorize(&a), 2, 2).unwrap(), a);
    }

    #[test]
    fn vec_of_product_identity() {
        let (a, x, b) = (pseudo_random(3, 3, 7), pseudo_random(3, 3, 8), pseudo_random(3, 3, 9));
        let lhs = vectorize(&a.matmul(&x).matmul(&b));
        let rhs = kron(&b.transpose(), &a).mul_vec(&vectorize(&x));
        assert!(lhs.sub(&rhs).max_abs() < 1e-12);
    }

    #[test]
    fn projector_examples() {
        let p1 = projectors(1, 1);
        assert_eq!(p1.j, m(&[&[1.0]]));
        assert_eq!(p1.j_perp, m(&[&[0.0]]));
        let p2 = projectors(2, 1);
        assert_eq!(p2.j, m(&[&[0.5, 0.5], &[0.5, 0.5]]));
        let p5 = projectors(5, 1);
        assert!(p5.j_perp.matmul(&p5.j_perp).max_abs_diff(&p5.j_perp) < 1e-14);
        assert!(p5.j.matmul(&p5.j_perp).max_abs() < 1e-15);
        assert!(p5.j.add(&p5.j_perp).max_abs_diff(&DenseMatrix::identity(5)) < 1e-15);
    }

    #[test]
    fn consensus_projector_repeats_average() {
        let p = projectors(4, 3);
        let x = vectorize(&pseudo_random(12, 1, 5));
        let jx = p.j_block.mul_vec(&x);
        let avg = block_average(&x, 4);
        for k in 0..12 {
            assert!((jx[k] - avg[k % 3]).abs() < 1e-15);
        }
        let perp = p.j_perp_block.mul_vec(&x);
        assert!(perp.sub(&project_disagreement(&x, 4)).max_abs() < 1e-15);
    }

    #[test]
    fn spectral_radius_examples() {
        assert!((spectral_radius(&DenseMatrix::identity(3)).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(spectral_radius(&DenseMatrix::zeros(3, 3)).unwrap(), 0.0);
        let half = m(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!((spectral_radius(&half).unwrap() - 1.0).abs() < 1e-14);
        assert!(spectral_radius(&DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn spectral_radius_nonsymmetric() {
        // eigenvalues 2 and -3
        let a = m(&[&[2.0, 1.0], &[0.0, -3.0]]);
        assert!((spectral_radius(&a).unwrap() - 3.0).abs() < 1e-9);
        // rotation: complex pair of modulus 1, power iteration cannot settle on direction
        let r = m(&[&[0.0, -1.0], &[1.0, 0.0]]);
        assert!((spectral_radius(&r).unwrap() - 1.0).abs() < 1e-12);
        // row-stochastic
        let w = m(&[&[0.2, 0.8, 0.0], &[0.1, 0.1, 0.8], &[0.5, 0.0, 0.5]]);
        assert!((spectral_radius(&w).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn solve_linear_examples() {
        let b = DenseVector::new(vec![1.0, -2.0, 3.5]).unwrap();
        assert_eq!(solve_linear(&DenseMatrix::identity(3), &b).unwrap(), b);
        let a = m(&[&[2.0, 0.0], &[0.0, 4.0]]);
        let x = solve_linear(&a, &DenseVector::new(vec![2.0, 4.0]).unwrap()).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn solve_linear_singular() {
        let a = m(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(
            solve_linear(&a, &DenseVector::zeros(2)),
            Err(Error::Singular { .. })
        ));
        let tiny = m(&[&[1.0, 0.0], &[0.0, 1e-14]]);
        assert!(solve_linear(&tiny, &DenseVector::zeros(2)).is_err());
    }

    #[test]
    fn solve_linear_random_residual() {
        let a = pseudo_random(6, 6, 11).add(&DenseMatrix::identity(6).scale(3.0));
        let b = vectorize(&pseudo_random(6, 1, 12));
        let x = solve_linear(&a, &b).unwrap();
        assert!(a.mul_vec(&x).sub(&b).norm() / b.norm() <= 1e-10);
        let inv = inverse(&a).unwrap();
        assert!(inv.matmul(&a).max_abs_diff(&DenseMatrix::identity(6)) < 1e-12);
    }

    #[test]
    fn lyapunov_examples() {
        let v = solve_lyapunov(&DenseMatrix::identity(3).scale(-1.0), &DenseMatrix::identity(3)).unwrap();
        assert!(v.max_abs_diff(&DenseMatrix::identity(3).scale(0.5)) < 1e-15);

        let v = solve_lyapunov(&m(&[&[-1.0]]), &m(&[&[0.2]])).unwrap();
        assert!((v[(0, 0)] - 0.1).abs() < 1e-15);

        let v = solve_lyapunov(&m(&[&[-2.0, 0.0], &[0.0, -1.0]]), &DenseMatrix::identity(2)).unwrap();
        assert!(v.max_abs_diff(&DenseMatrix::diagonal(&[0.25, 0.5])) < 1e-15);
    }

    #[test]
    fn lyapunov_rejects_unstable() {
        let a = m(&[&[-1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(
            solve_lyapunov(&a, &DenseMatrix::identity(2)),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn lyapunov_nonnormal_residual() {
        let a = m(&[&[-1.0, 3.0, 0.0], &[0.0, -2.0, 1.0], &[0.5, 0.0, -1.5]]);
        let g = pseudo_random(3, 3, 21);
        let u = g.matmul(&g.transpose());
        let v = solve_lyapunov(&a, &u).unwrap();
        assert!(lyapunov_residual(&a, &v, &u) <= 1e-10 * (1.0 + u.frobenius()));
        assert!(v.is_symmetric(1e-12));
        assert!(max_real_eigenvalue(&v.scale(-1.0)).unwrap() <= 1e-12);
    }
}

//! Closed-form limit points and CLT covariance for i.i.d. finite protocols.
//!
//! All expectations over the exchange matrix are exact finite sums over the
//! protocol support. The observation is `y = g(θ) + ξ` with `ξ` independent
//! of `W`, so `E[y] = g` and `E[yyᵀ] = ggᵀ + σ²I` close every integral.
//!
//! Notation in comments: `N` agents, `d` dimensions, `W̄ = E[W] ⊗ I_d`,
//! `J⊥ = (I − 11ᵀ/N) ⊗ I_d`, `⟨x⟩ = (1ᵀ/N ⊗ I_d) x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{stacked_gradient, GradientField, NoiseModel, QuadraticObjective, StepSchedule};
use crate::numerics::{
    devectorize, eigenvalues, inverse, kron, lyapunov_residual, max_real_eigenvalue, projectors,
    solve_linear, solve_lyapunov, spectral_radius, vectorize, DenseMatrix, DenseVector, LuFactors,
};
use crate::protocols::{check_contraction, mean_matrix, Protocol, ProtocolSupport};

const PERRON_RESIDUAL_TOL: f64 = 1e-10;
const JACOBIAN_REL_STEP: f64 = 1e-5;

/// `W̄_θ` and `z_θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftMoments {
    pub w_bar: DenseMatrix,
    pub z: DenseVector,
}

/// First and second moments of the stationary law of the `φ` chain at a
/// frozen `θ`.
#[derive(Clone, Debug, PartialEq)]
pub struct StationaryMoments {
    pub m1: DenseVector,
    /// `vec` of the (symmetric) stationary second moment.
    pub m2: DenseVector,
    /// `m2` computed with the cross term written `2 m1 yᵀ`.
    pub m2_left: DenseVector,
    /// `m2` computed with the cross term written `2 y m1ᵀ`.
    pub m2_right: DenseVector,
    /// `max |mat(m2_left) − mat(m2_right)ᵀ|`; zero up to rounding when the two
    /// orderings agree under the `T(w)` contraction.
    pub ordering_gap: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "a<1")]
    Subcritical,
    #[serde(rename = "a=1")]
    Critical,
}

impl Regime {
    pub fn of(schedule: &StepSchedule) -> Self {
        if schedule.exponent() < 1.0 {
            Self::Subcritical
        } else {
            Self::Critical
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPoint {
    pub theta_star: DenseVector,
    pub grad_h: DenseMatrix,
    /// `−max Re λ(∇h(θ★))`
    pub hurwitz_margin: f64,
}

/// Contributions to `vec U★` after the `(A★ ⊗ A★)` projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceTerms {
    pub r_term: Vec<f64>,
    pub t_term: Vec<f64>,
    pub s_term: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDiagnostics {
    pub terms: CovarianceTerms,
    /// `max |U_raw − U_rawᵀ|` before symmetrization.
    pub u_asymmetry: f64,
    pub m2_ordering_gap: f64,
    pub perron_residual: f64,
    pub lyapunov_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymptoticReport {
    pub protocol: String,
    pub n_agents: usize,
    pub dim: usize,
    pub rho: f64,
    pub v: Vec<f64>,
    pub theta_star: Vec<f64>,
    pub grad_h: Vec<Vec<f64>>,
    #[serde(rename = "L")]
    pub hurwitz_margin: f64,
    pub m1_star: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m2_star: Option<Vec<f64>>,
    #[serde(rename = "U_star")]
    pub u_star: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    pub v_matrix: Vec<Vec<f64>>,
    pub regime: Regime,
    pub diagnostics: ReportDiagnostics,
}

impl AsymptoticReport {
    pub fn u_star_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_rows(&self.u_star).expect("report matrices are finite")
    }

    pub fn variance_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_rows(&self.v_matrix).expect("report matrices are finite")
    }
}

/// Support atoms lifted to `W ⊗ I_d`.
fn lifted_atoms(support: &ProtocolSupport, d: usize) -> Vec<(f64, DenseMatrix)> {
    let eye = DenseMatrix::identity(d);
    support
        .atoms()
        .iter()
        .map(|(p, w)| (*p, kron(w.matrix(), &eye)))
        .collect()
}

fn expect_sum(atoms: &[(f64, DenseMatrix)], f: impl Fn(&DenseMatrix) -> DenseMatrix) -> DenseMatrix {
    let mut iter = atoms.iter();
    let (p0, w0) = iter.next().expect("non-empty support");
    let mut acc = f(w0).scale(*p0);
    for (p, w) in iter {
        acc.axpy(*p, &f(w));
    }
    acc
}

fn check_field(protocol: &Protocol, field: &dyn GradientField) -> Result<()> {
    if protocol.n_agents() != field.n_agents() {
        return Err(Error::DimensionMismatch {
            context: "protocol vs objective agents",
            expected: field.n_agents(),
            found: protocol.n_agents(),
        });
    }
    Ok(())
}

fn consensus_point(vartheta: &DenseVector, n_agents: usize) -> DenseVector {
    let d = vartheta.len();
    DenseVector::from_fn(n_agents * d, |k| vartheta[k % d])
}

fn require_contraction(protocol: &Protocol) -> Result<f64> {
    let report = check_contraction(protocol)?;
    if !report.passes {
        return Err(Error::Contraction {
            what: "spectral radius of E[WᵀJ⊥W]",
            value: report.rho,
        });
    }
    Ok(report.rho)
}

/// Left fixed vector of the mean exchange matrix,
/// `vᵀ = (1/N) 1ᵀ W̄ (I − J⊥W̄)⁻¹`, normalised to `vᵀ1 = 1`.
pub fn perron_vector(w_bar: &DenseMatrix) -> Result<DenseVector> {
    if !w_bar.is_square() {
        return Err(Error::NotSquare {
            context: "perron_vector",
            rows: w_bar.rows(),
            cols: w_bar.cols(),
        });
    }
    let n = w_bar.rows();
    let p = projectors(n, 1);
    let op = DenseMatrix::identity(n).sub(&p.j_perp.matmul(w_bar));
    // vᵀ (I − J⊥W̄) = (1/N) 1ᵀ W̄  ⇔  (I − J⊥W̄)ᵀ v = W̄ᵀ 1 / N
    let rhs = w_bar.left_mul_vec(&DenseVector::filled(n, 1.0 / n as f64));
    let mut v = solve_linear(&op.transpose(), &rhs)?;
    if perron_residual(w_bar, &v) > PERRON_RESIDUAL_TOL {
        v = w_bar.left_mul_vec(&v);
    }
    let total = v.sum();
    Ok(v.scale(1.0 / total))
}

/// `max |vᵀW̄ − vᵀ|`
pub fn perron_residual(w_bar: &DenseMatrix, v: &DenseVector) -> f64 {
    w_bar.left_mul_vec(v).sub(v).max_abs()
}

/// Unique critical point `Σ v_i α_i` of `Σ v_i f_i` for quadratic objectives.
pub fn limit_point_quadratic(obj: &QuadraticObjective, v: &DenseVector) -> DenseVector {
    obj.alphas()
        .iter()
        .zip(v.iter())
        .fold(DenseVector::zeros(obj.alphas()[0].len()), |mut acc, (a, vi)| {
            acc.axpy(*vi, a);
            acc
        })
}

/// `W̄_θ = Σ p_k (W_k ⊗ I_d)` and `z_θ = W̄_θ g(θ)`.
pub fn drift_moments(
    protocol: &Protocol,
    field: &dyn GradientField,
    _noise: &NoiseModel,
    theta: &DenseVector,
) -> Result<DriftMoments> {
    check_field(protocol, field)?;
    let support = protocol.require_support()?;
    let d = field.dim();
    let w_bar = kron(&support.expectation(|w| w.matrix().clone()), &DenseMatrix::identity(d));
    let g = stacked_gradient(field, theta)?;
    let z = w_bar.mul_vec(&g);
    Ok(DriftMoments { w_bar, z })
}

/// `Φ_θ = Σ p_k T(W_k)` with `T(w) = ((J⊥w) ⊗ I_d) ⊗ ((J⊥w) ⊗ I_d)`.
fn phi_operator(atoms: &[(f64, DenseMatrix)], j_perp: &DenseMatrix) -> DenseMatrix {
    expect_sum(atoms, |w| {
        let m = j_perp.matmul(w);
        kron(&m, &m)
    })
}

/// Stationary moments of `x ↦ α J⊥(W ⊗ I)(x + y)` at frozen `θ`:
/// `m1 = (α⁻¹I − J⊥W̄)⁻¹ J⊥z` and `m2 = (α⁻²I − Φ)⁻¹ ζ`.
pub fn stationary_moments(
    protocol: &Protocol,
    field: &dyn GradientField,
    noise: &NoiseModel,
    theta: &DenseVector,
    alpha: f64,
) -> Result<StationaryMoments> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    check_field(protocol, field)?;
    let support = protocol.require_support()?;
    let n = field.n_agents();
    let d = field.dim();
    let dn = n * d;
    let atoms = lifted_atoms(support, d);
    let jp = projectors(n, d).j_perp_block;
    let drift = drift_moments(protocol, field, noise, theta)?;
    let g = stacked_gradient(field, theta)?;

    let phi_op = phi_operator(&atoms, &jp);
    let r_phi = spectral_radius(&phi_op)?;
    if alpha * alpha * r_phi >= 1.0 {
        return Err(Error::Contraction {
            what: "alpha² · r(Φ)",
            value: alpha * alpha * r_phi,
        });
    }

    let m1_op = DenseMatrix::identity(dn).scale(1.0 / alpha).sub(&jp.matmul(&drift.w_bar));
    let m1 = solve_linear(&m1_op, &jp.mul_vec(&drift.z))?;

    // y independent of W: ∫ T(w) vec(F(y)) = Φ vec(E[F(y)])
    let second = g.outer(&g).add(&DenseMatrix::identity(dn).scale(noise.variance()));
    let zeta_left = phi_op.mul_vec(&vectorize(&second.add(&m1.outer(&g).scale(2.0))));
    let zeta_right = phi_op.mul_vec(&vectorize(&second.add(&g.outer(&m1).scale(2.0))));
    let m2_op = LuFactors::new(
        &DenseMatrix::identity(dn * dn)
            .scale(1.0 / (alpha * alpha))
            .sub(&phi_op),
    )?;
    let m2_left = m2_op.solve(&zeta_left)?;
    let m2_right = m2_op.solve(&zeta_right)?;
    let ordering_gap = devectorize(&m2_left, dn, dn)?.max_abs_diff(&devectorize(&m2_right, dn, dn)?.transpose());
    let m2 = m2_left.add(&m2_right).scale(0.5);
    Ok(StationaryMoments {
        m1,
        m2,
        m2_left,
        m2_right,
        ordering_gap,
    })
}

/// `h(ϑ) = ⟨z + W̄ m1⟩` at `θ = 1 ⊗ ϑ`, `α = 1`.
pub fn mean_field(
    protocol: &Protocol,
    field: &dyn GradientField,
    noise: &NoiseModel,
    vartheta: &DenseVector,
) -> Result<DenseVector> {
    if vartheta.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            context: "mean_field",
            expected: field.dim(),
            found: vartheta.len(),
        });
    }
    require_contraction(protocol)?;
    mean_field_unchecked(protocol, field, noise, vartheta)
}

fn mean_field_unchecked(
    protocol: &Protocol,
    field: &dyn GradientField,
    noise: &NoiseModel,
    vartheta: &DenseVector,
) -> Result<DenseVector> {
    let n = field.n_agents();
    let d = field.dim();
    let theta = consensus_point(vartheta, n);
    let drift = drift_moments(protocol, field, noise, &theta)?;
    let jp = projectors(n, d).j_perp_block;
    let op = DenseMatrix::identity(n * d).sub(&jp.matmul(&drift.w_bar));
    let m1 = solve_linear(&op, &jp.mul_vec(&drift.z))?;
    let total = drift.z.add(&drift.w_bar.mul_vec(&m1));
    Ok(crate::numerics::block_average(&total, n))
}

fn central_jacobian(
    protocol: &Protocol,
    field: &dyn GradientField,
    noise: &NoiseModel,
    at: &DenseVector,
) -> Result<DenseMatrix> {
    let d = at.len();
    let mut jac = DenseMatrix::zeros(d, d);
    for j in 0..d {
        let h = JACOBIAN_REL_STEP * at[j].abs().max(1.0);
        let mut plus = at.clone();
        let mut minus = at.clone();
        plus[j] += h;
        minus[j] -= h;
        let diff = mean_field_unchecked(protocol, field, noise, &plus)?
            .sub(&mean_field_unchecked(protocol, field, noise, &minus)?)
            .scale(0.5 / h);
        for i in 0..d {
            jac[(i, j)] = diff[i];
        }
    }
    Ok(jac)
}

/// Root `θ★` of the mean field and its Jacobian.
///
/// Quadratic objectives are handled in closed form (`∇h = −I`). Other
/// fields need `root_hint`, which is refined by Newton steps on the
/// central-difference Jacobian.
pub fn fixed_point_and_jacobian(
    protocol: &Protocol,
    field: &dyn GradientField,
    noise: &NoiseModel,
    root_hint: Option<&DenseVector>,
) -> Result<FixedPoint> {
    check_field(protocol, field)?;
    require_contraction(protocol)?;
    let d = field.dim();
    let (theta_star, grad_h) = match field.as_quadratic() {
        Some(obj) => {
            let v = perron_vector(&mean_matrix(protocol)?)?;
            (limit_point_quadratic(obj, &v), DenseMatrix::identity(d).scale(-1.0))
        }
        None => {
            let mut x = root_hint
                .cloned()
                .ok_or_else(|| Error::InvalidParameter("a root hint is required for non-quadratic fields".into()))?;
            if x.len() != d {
                return Err(Error::DimensionMismatch {
                    context: "root hint",
                    expected: d,
                    found: x.len(),
                });
            }
            for _ in 0..50 {
                let h = mean_field_unchecked(protocol, field, noise, &x)?;
                if h.max_abs() <= 1e-12 * (1.0 + x.max_abs()) {
                    break;
                }
                let jac = central_jacobian(protocol, field, noise, &x)?;
                x = x.sub(&solve_linear(&jac, &h)?);
            }
            let jac = central_jacobian(protocol, field, noise, &x)?;
            (x, jac)
        }
    };
    let max_re = max_real_eigenvalue(&grad_h)?;
    if max_re >= 0.0 {
        return Err(Error::NotHurwitz { max_real_part: max_re });
    }
    Ok(FixedPoint {
        theta_star,
        grad_h,
        hurwitz_margin: -max_re,
    })
}

/// Poisson solution for the identity function,
/// `f(x) = (I − αJ⊥W̄)⁻¹ (x − m1(α))`.
pub fn poisson_solution(
    protocol: &Protocol,
    field: &dyn GradientField,
    noise: &NoiseModel,
    theta: &DenseVector,
    alpha: f64,
    x: &DenseVector,
) -> Result<DenseVector> {
    let n = field.n_agents();
    let d = field.dim();
    let jp = projectors(n, d).j_perp_block;
    let drift = drift_moments(protocol, field, noise, theta)?;
    let m1 = stationary_moments(protocol, field, noise, theta, alpha)?.m1;
    let op = DenseMatrix::identity(n * d).sub(&jp.matmul(&drift.w_bar).scale(alpha));
    solve_linear(&op, &x.sub(&m1))
}

/// `|(x − m1) − (f(x) − Pf(x))|` where `Pf(x) = E f(αJ⊥(W ⊗ I)(x + y))`,
/// evaluated as a finite sum over the support (the noise drops out of the
/// affine `f`).
pub fn poisson_identity_residual(
    protocol: &Protocol,
    field: &dyn GradientField,
    noise: &NoiseModel,
    theta: &DenseVector,
    alpha: f64,
    x: &DenseVector,
) -> Result<f64> {
    check_field(protocol, field)?;
    let n = field.n_agents();
    let d = field.dim();
    if x.len() != n * d {
        return Err(Error::DimensionMismatch {
            context: "poisson x",
            expected: n * d,
            found: x.len(),
        });
    }
    let support = protocol.require_support()?;
    let jp = projectors(n, d).j_perp_block;
    let drift = drift_moments(protocol, field, noise, theta)?;
    let moments = stationary_moments(protocol, field, noise, theta, alpha)?;
    let lu = LuFactors::new(&DenseMatrix::identity(n * d).sub(&jp.matmul(&drift.w_bar).scale(alpha)))?;
    let f = |u: &DenseVector| lu.solve(&u.sub(&moments.m1));
    let g = stacked_gradient(field, theta)?;
    let shifted = x.add(&g);
    let mut pf = DenseVector::zeros(n * d);
    for (p, w) in lifted_atoms(support, d) {
        let next = jp.matmul(&w).mul_vec(&shifted).scale(alpha);
        pf.axpy(p, &f(&next)?);
    }
    let lhs = x.sub(&moments.m1);
    let rhs = f(x)?.sub(&pf);
    Ok(lhs.sub(&rhs).norm())
}

/// Pieces of the `U★` assembly, exposed for cross-checks.
#[derive(Clone, Debug)]
pub struct StarIntegrals {
    /// `A★ = (1ᵀ/N ⊗ I_d)(I + W̄(I − J⊥W̄)⁻¹J⊥)`, `d × dN`
    pub a_star: DenseMatrix,
    /// `Φ★`, `d²N² × d²N²`
    pub phi_star: DenseMatrix,
    /// `ζ★` (symmetrised cross term)
    pub zeta_star: DenseVector,
    /// `R★(W_k) = W_k ⊗ I_d − W̄` per support atom
    pub r_list: Vec<DenseMatrix>,
    /// `ℛ★ = Σ p_k R★(W_k) ⊗ R★(W_k)`
    pub r_star: DenseMatrix,
    /// `𝒯★ = Σ p_k (R★(W_k) g) ⊗ R★(W_k)`, `d²N² × dN`
    pub t_star: DenseMatrix,
    /// `𝒮★ = Σ p_k vec(W_k(ggᵀ + σ²I)W_kᵀ) − vec(zzᵀ)`
    pub s_star: DenseVector,
    pub moments: StationaryMoments,
}

/// Assembles every star quantity at `θ = 1 ⊗ θ★`.
pub fn star_integrals(
    protocol: &Protocol,
    field: &dyn GradientField,
    noise: &NoiseModel,
    theta_star: &DenseVector,
) -> Result<StarIntegrals> {
    check_field(protocol, field)?;
    let support = protocol.require_support()?;
    let n = field.n_agents();
    let d = field.dim();
    let dn = n * d;
    let theta = consensus_point(theta_star, n);
    let atoms = lifted_atoms(support, d);
    let jp = projectors(n, d).j_perp_block;
    let drift = drift_moments(protocol, field, noise, &theta)?;
    let g = stacked_gradient(field, &theta)?;
    let moments = stationary_moments(protocol, field, noise, &theta, 1.0)?;

    let b = inverse(&DenseMatrix::identity(dn).sub(&jp.matmul(&drift.w_bar)))?;
    let averager = kron(
        &DenseMatrix::from_fn(1, n, |_, _| 1.0 / n as f64),
        &DenseMatrix::identity(d),
    );
    let a_star = averager.matmul(&DenseMatrix::identity(dn).add(&drift.w_bar.matmul(&b).matmul(&jp)));

    let r_list: Vec<DenseMatrix> = atoms.iter().map(|(_, w)| w.sub(&drift.w_bar)).collect();
    let weighted: Vec<(f64, &DenseMatrix)> = atoms.iter().map(|(p, _)| *p).zip(&r_list).collect();
    let mut r_star = DenseMatrix::zeros(dn * dn, dn * dn);
    let mut t_star = DenseMatrix::zeros(dn * dn, dn);
    for (p, r) in &weighted {
        r_star.axpy(*p, &kron(r, r));
        let rg = DenseMatrix::column(&r.mul_vec(&g));
        t_star.axpy(*p, &kron(&rg, r));
    }
    let second = g.outer(&g).add(&DenseMatrix::identity(dn).scale(noise.variance()));
    let mut s_mat = expect_sum(&atoms, |w| w.matmul(&second).matmul(&w.transpose()));
    s_mat.axpy(-1.0, &drift.z.outer(&drift.z));
    let s_star = vectorize(&s_mat);

    let phi_star = phi_operator(&atoms, &jp);
    let cross = moments.m1.outer(&g).add(&g.outer(&moments.m1));
    let zeta_star = phi_star.mul_vec(&vectorize(&second.add(&cross)));

    Ok(StarIntegrals {
        a_star,
        phi_star,
        zeta_star,
        r_list,
        r_star,
        t_star,
        s_star,
        moments,
    })
}

/// Asymptotic covariance `U★` and normalised-error covariance `V`.
pub fn clt_covariance(
    protocol: &Protocol,
    field: &dyn GradientField,
    noise: &NoiseModel,
    schedule: &StepSchedule,
    root_hint: Option<&DenseVector>,
) -> Result<AsymptoticReport> {
    check_field(protocol, field)?;
    let rho = require_contraction(protocol)?;
    let n = field.n_agents();
    let d = field.dim();
    let fp = fixed_point_and_jacobian(protocol, field, noise, root_hint)?;
    let regime = Regime::of(schedule);
    if regime == Regime::Critical {
        let bound = 1.0 / (2.0 * fp.hurwitz_margin);
        if schedule.gamma_star() <= bound {
            return Err(Error::StepSize {
                gamma_star: schedule.gamma_star(),
                bound,
            });
        }
    }

    let w_bar_n = mean_matrix(protocol)?;
    let v = perron_vector(&w_bar_n)?;
    let star = star_integrals(protocol, field, noise, &fp.theta_star)?;
    let aa = kron(&star.a_star, &star.a_star);
    let r_term = aa.mul_vec(&star.r_star.mul_vec(&star.moments.m2));
    let t_term = aa.mul_vec(&star.t_star.mul_vec(&star.moments.m1)).scale(2.0);
    let s_term = aa.mul_vec(&star.s_star);
    let u_raw = devectorize(&r_term.add(&t_term).add(&s_term), d, d)?;
    let u_asymmetry = u_raw.max_abs_diff(&u_raw.transpose());
    let u_star = u_raw.add(&u_raw.transpose()).scale(0.5);

    let scale = u_star.max_abs().max(1.0);
    let min_eig = eigenvalues(&u_star)?
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::INFINITY, f64::min);
    if min_eig < -1e-10 * scale {
        return Err(Error::Numerical(format!("U★ is not positive semidefinite (eigenvalue {min_eig:e})")));
    }

    let (lyap_op, lyap_rhs) = lyapunov_system(&fp.grad_h, &u_star, schedule);
    let v_matrix = if u_star.max_abs() == 0.0 {
        DenseMatrix::zeros(d, d)
    } else {
        solve_lyapunov(&lyap_op, &lyap_rhs)?
    };
    let lyap_res = lyapunov_residual(&lyap_op, &v_matrix, &lyap_rhs);

    Ok(AsymptoticReport {
        protocol: protocol.label().to_string(),
        n_agents: n,
        dim: d,
        rho,
        v: v.as_slice().to_vec(),
        theta_star: fp.theta_star.as_slice().to_vec(),
        grad_h: fp.grad_h.to_rows(),
        hurwitz_margin: fp.hurwitz_margin,
        m1_star: star.moments.m1.as_slice().to_vec(),
        m2_star: Some(star.moments.m2.as_slice().to_vec()),
        u_star: u_star.to_rows(),
        v_matrix: v_matrix.to_rows(),
        regime,
        diagnostics: ReportDiagnostics {
            terms: CovarianceTerms {
                r_term: r_term.into_inner(),
                t_term: t_term.into_inner(),
                s_term: s_term.into_inner(),
            },
            u_asymmetry,
            m2_ordering_gap: star.moments.ordering_gap,
            perron_residual: perron_residual(&w_bar_n, &v),
            lyapunov_residual: lyap_res,
        },
    })
}

/// The Lyapunov pair `(M, Q)` with `V Mᵀ + M V = −Q` for the step regime:
/// `(∇h, U★)` when `a < 1`, `(I + 2γ★∇h, 2γ★U★)` when `a = 1`.
pub fn lyapunov_system(grad_h: &DenseMatrix, u_star: &DenseMatrix, schedule: &StepSchedule) -> (DenseMatrix, DenseMatrix) {
    match Regime::of(schedule) {
        Regime::Subcritical => (grad_h.clone(), u_star.clone()),
        Regime::Critical => {
            let gs = schedule.gamma_star();
            let d = grad_h.rows();
            (
                DenseMatrix::identity(d).add(&grad_h.scale(2.0 * gs)),
                u_star.scale(2.0 * gs),
            )
        }
    }
}

/// `U★ = E⟨y − ȳ★⟩⟨y − ȳ★⟩ᵀ` for protocols that are doubly stochastic on
/// every draw; the observation mean is deterministic at `θ★`, so only the
/// noise contributes.
pub fn doubly_stochastic_covariance(
    protocol: &Protocol,
    field: &dyn GradientField,
    noise: &NoiseModel,
) -> Result<DenseMatrix> {
    check_field(protocol, field)?;
    let support = protocol.require_support()?;
    if !support.atoms().iter().all(|(_, w)| w.is_column_stochastic()) {
        return Err(Error::NotDoublyStochastic(protocol.label().to_string()));
    }
    let n = field.n_agents();
    let d = field.dim();
    let averager = kron(
        &DenseMatrix::from_fn(1, n, |_, _| 1.0 / n as f64),
        &DenseMatrix::identity(d),
    );
    let cov_y = DenseMatrix::identity(n * d).scale(noise.variance());
    Ok(averager.matmul(&cov_y).matmul(&averager.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Topology;
    use crate::presets;
    use crate::protocols::{broadcast_gossip, fixed_neighborhood_averaging, pairwise_gossip, GossipMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bench() -> (Topology, QuadraticObjective, NoiseModel) {
        (presets::benchmark_topology(), presets::benchmark_objective(), presets::benchmark_noise())
    }

    fn dv(x: &[f64]) -> DenseVector {
        DenseVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn perron_vector_examples() {
        let (topo, _, _) = bench();
        let pair = mean_matrix(&pairwise_gossip(&topo).unwrap()).unwrap();
        let v = perron_vector(&pair).unwrap();
        assert!(v.iter().all(|x| (x - 0.2).abs() < 1e-14));

        let fixed = mean_matrix(&fixed_neighborhood_averaging(&topo)).unwrap();
        let v = perron_vector(&fixed).unwrap();
        let expected = [3.0, 3.0, 4.0, 4.0, 3.0].map(|x| x / 17.0);
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(perron_residual(&fixed, &v) < 1e-14);

        let j = projectors(4, 1).j;
        assert!(perron_vector(&j).unwrap().iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn perron_vector_fails_without_contraction() {
        assert!(matches!(
            perron_vector(&DenseMatrix::identity(3)),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn limit_point_examples() {
        let (_, obj, _) = bench();
        let v = dv(&[3.0, 3.0, 4.0, 4.0, 3.0]).scale(1.0 / 17.0);
        assert!((limit_point_quadratic(&obj, &v)[0] - 21.0 / 17.0).abs() < 1e-14);
        assert!((limit_point_quadratic(&obj, &DenseVector::filled(5, 0.2))[0] - 1.0).abs() < 1e-14);
        let flat = QuadraticObjective::scalar(&[2.0; 5]).unwrap();
        assert!((limit_point_quadratic(&flat, &v)[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn drift_moment_examples() {
        let (topo, obj, noise) = bench();
        let fixed = fixed_neighborhood_averaging(&topo);
        let at_alpha = drift_moments(&fixed, &obj, &noise, &obj.stacked_alphas()).unwrap();
        assert!(at_alpha.z.max_abs() == 0.0);

        let ones = DenseVector::filled(5, 1.0);
        let dm = drift_moments(&fixed, &obj, &noise, &ones).unwrap();
        let expected = mean_matrix(&fixed).unwrap().mul_vec(&dv(&[-4.0, 4.0, 4.0, 0.0, -4.0]));
        assert!(dm.z.sub(&expected).max_abs() < 1e-15);

        let pair = pairwise_gossip(&topo).unwrap();
        let dm = drift_moments(&pair, &obj, &noise, &ones).unwrap();
        let g = stacked_gradient(&obj, &ones).unwrap();
        assert!((dm.z.sum() - g.sum()).abs() < 1e-13);
        assert!(dm.w_bar.row_sums().iter().all(|s| (s - 1.0).abs() < 1e-14));
    }

    #[test]
    fn stationary_moment_examples() {
        let (topo, obj, noise) = bench();
        let pair = pairwise_gossip(&topo).unwrap();
        let at_alpha = stationary_moments(&pair, &obj, &NoiseModel::none(), &obj.stacked_alphas(), 1.0).unwrap();
        assert_eq!(at_alpha.m1.max_abs(), 0.0);
        assert_eq!(at_alpha.m2.max_abs(), 0.0);

        // doubly stochastic point mass with J⊥W̄g = 0: g already in consensus space
        let j = GossipMatrix::new(projectors(5, 1).j).unwrap();
        let avg = Protocol::from_support("J", ProtocolSupport::point_mass(j));
        let sm = stationary_moments(&avg, &obj, &noise, &DenseVector::filled(5, 1.0), 1.0).unwrap();
        assert!(sm.m1.max_abs() < 1e-14);

        let sm = stationary_moments(&pair, &obj, &noise, &DenseVector::filled(5, 1.0), 1.0).unwrap();
        assert!(sm.ordering_gap < 1e-12);
        assert!(stationary_moments(&pair, &obj, &noise, &DenseVector::filled(5, 1.0), 10.0).is_err());
        assert!(stationary_moments(&pair, &obj, &noise, &DenseVector::filled(5, 1.0), 0.0).is_err());
    }

    #[test]
    fn mean_field_matches_weighted_gradient() {
        let (topo, obj, noise) = bench();
        let protocols = [
            fixed_neighborhood_averaging(&topo),
            pairwise_gossip(&topo).unwrap(),
            broadcast_gossip(&topo, 0.5, None).unwrap(),
        ];
        for p in &protocols {
            let v = perron_vector(&mean_matrix(p).unwrap()).unwrap();
            let tv = limit_point_quadratic(&obj, &v)[0];
            for x in [-3.0, -0.5, 0.0, 1.24, 7.0] {
                let h = mean_field(p, &obj, &noise, &dv(&[x])).unwrap();
                assert!((h[0] + (x - tv)).abs() < 1e-9, "{} at {x}", p.label());
            }
            assert!(mean_field(p, &obj, &noise, &dv(&[tv])).unwrap()[0].abs() < 1e-12);
        }
    }

    #[test]
    fn mean_field_doubly_stochastic_is_average_observation() {
        let (topo, obj, noise) = bench();
        let pair = pairwise_gossip(&topo).unwrap();
        for x in [-2.0, 0.3, 4.0] {
            let h = mean_field(&pair, &obj, &noise, &dv(&[x])).unwrap();
            let g = stacked_gradient(&obj, &DenseVector::filled(5, x)).unwrap();
            assert!((h[0] - g.sum() / 5.0).abs() < 1e-12);
        }
        assert!(mean_field(&Protocol::identity(5), &obj, &noise, &dv(&[0.0])).is_err());
    }

    #[test]
    fn fixed_point_examples() {
        let (topo, obj, noise) = bench();
        let fp = fixed_point_and_jacobian(&fixed_neighborhood_averaging(&topo), &obj, &noise, None).unwrap();
        assert!((fp.theta_star[0] - 21.0 / 17.0).abs() < 1e-14);
        assert_eq!(fp.grad_h.to_rows(), vec![vec![-1.0]]);
        assert_eq!(fp.hurwitz_margin, 1.0);

        let fp = fixed_point_and_jacobian(&pairwise_gossip(&topo).unwrap(), &obj, &noise, None).unwrap();
        assert!((fp.theta_star[0] - 1.0).abs() < 1e-14);

        let flat = QuadraticObjective::scalar(&[-0.7; 5]).unwrap();
        for p in [fixed_neighborhood_averaging(&topo), broadcast_gossip(&topo, 0.3, None).unwrap()] {
            let fp = fixed_point_and_jacobian(&p, &flat, &noise, None).unwrap();
            assert!((fp.theta_star[0] + 0.7).abs() < 1e-14);
        }
    }

    /// `f_i(θ) = ½|θ − α_i|² + ¼ c_i |θ|⁴`: non-quadratic, still strongly convex.
    struct QuarticField {
        alphas: Vec<Vec<f64>>,
        c: Vec<f64>,
    }

    impl GradientField for QuarticField {
        fn dim(&self) -> usize {
            self.alphas[0].len()
        }
        fn n_agents(&self) -> usize {
            self.alphas.len()
        }
        fn gradient(&self, agent: usize, theta: &[f64], out: &mut [f64]) {
            let r2: f64 = theta.iter().map(|t| t * t).sum();
            for k in 0..theta.len() {
                out[k] = theta[k] - self.alphas[agent][k] + self.c[agent] * r2 * theta[k];
            }
        }
    }

    #[test]
    fn general_field_jacobian_by_finite_differences() {
        let (topo, _, noise) = bench();
        let field = QuarticField {
            alphas: vec![vec![-3.0, 1.0], vec![5.0, 0.0], vec![5.0, -1.0], vec![1.0, 2.0], vec![-3.0, 0.5]],
            c: vec![0.1, 0.0, 0.2, 0.05, 0.1],
        };
        let fixed = fixed_neighborhood_averaging(&topo);
        assert!(fixed_point_and_jacobian(&fixed, &field, &noise, None).is_err());
        let fp = fixed_point_and_jacobian(&fixed, &field, &noise, Some(&dv(&[0.5, 0.5]))).unwrap();
        let v = perron_vector(&mean_matrix(&fixed).unwrap()).unwrap();
        // h(ϑ) = −Σ v_i ∇f_i(ϑ) vanishes at the root
        let mut grad = [0.0; 2];
        let mut total = [0.0; 2];
        for i in 0..5 {
            field.gradient(i, fp.theta_star.as_slice(), &mut grad);
            total[0] += v[i] * grad[0];
            total[1] += v[i] * grad[1];
        }
        assert!(total[0].abs() < 1e-9 && total[1].abs() < 1e-9);
        // analytic Jacobian of −Σ v_i ∇f_i
        let t = fp.theta_star.as_slice();
        let cbar: f64 = (0..5).map(|i| v[i] * field.c[i]).sum();
        let r2 = t[0] * t[0] + t[1] * t[1];
        let analytic = DenseMatrix::from_fn(2, 2, |i, j| {
            let delta = if i == j { 1.0 } else { 0.0 };
            -(delta + cbar * (r2 * delta + 2.0 * t[i] * t[j]))
        });
        assert!(fp.grad_h.max_abs_diff(&analytic) < 1e-6);
        assert!(fp.hurwitz_margin >= 1.0 - 1e-6);
    }

    #[test]
    fn poisson_examples() {
        let (topo, obj, noise) = bench();
        let pair = pairwise_gossip(&topo).unwrap();
        let theta = DenseVector::filled(5, 1.0);
        let m1 = stationary_moments(&pair, &obj, &noise, &theta, 0.8).unwrap().m1;
        let f = poisson_solution(&pair, &obj, &noise, &theta, 0.8, &m1).unwrap();
        assert!(f.max_abs() < 1e-14);

        let x = dv(&[0.3, -1.0, 2.0, 0.0, 5.0]);
        let f = poisson_solution(&pair, &obj, &noise, &theta, 1e-12, &x).unwrap();
        assert!(f.sub(&x).max_abs() < 1e-10);
    }

    #[test]
    fn poisson_identity_fuzz() {
        let (topo, obj, noise) = bench();
        let protocols = [
            fixed_neighborhood_averaging(&topo),
            pairwise_gossip(&topo).unwrap(),
            broadcast_gossip(&topo, 0.5, None).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..60 {
            let p = &protocols[case % 3];
            let theta = DenseVector::from_fn(5, |_| rng.random_range(-5.0..5.0));
            let x = DenseVector::from_fn(5, |_| rng.random_range(-20.0..20.0));
            let alpha = rng.random_range(0.1..1.05);
            let res = poisson_identity_residual(p, &obj, &noise, &theta, alpha, &x).unwrap();
            assert!(res <= 1e-9 * (1.0 + x.norm()), "case {case}: {res}");
        }
    }

    #[test]
    fn clt_pairwise_matches_centralized() {
        let (topo, obj, noise) = bench();
        let pair = pairwise_gossip(&topo).unwrap();
        let rep = clt_covariance(&pair, &obj, &noise, &presets::benchmark_schedule(), None).unwrap();
        assert!((rep.u_star[0][0] - 0.2).abs() < 1e-12);
        assert!((rep.v_matrix[0][0] - 0.1).abs() < 1e-12);
        assert!((rep.theta_star[0] - 1.0).abs() < 1e-14);
        let c1 = doubly_stochastic_covariance(&pair, &obj, &noise).unwrap();
        assert!((c1[(0, 0)] - rep.u_star[0][0]).abs() <= 1e-10);
        assert!(rep.diagnostics.terms.r_term[0].abs() <= 1e-12);
        assert!(rep.diagnostics.terms.t_term[0].abs() <= 1e-12);
    }

    #[test]
    fn clt_deterministic_protocol() {
        let (topo, obj, noise) = bench();
        let fixed = fixed_neighborhood_averaging(&topo);
        let rep = clt_covariance(&fixed, &obj, &noise, &presets::benchmark_schedule(), None).unwrap();
        assert!((rep.u_star[0][0] - 59.0 / 289.0).abs() < 1e-12);
        assert!((rep.v_matrix[0][0] - 59.0 / 578.0).abs() < 1e-12);
        let star = star_integrals(&fixed, &obj, &noise, &dv(&rep.theta_star)).unwrap();
        assert!(star.r_star.max_abs() < 1e-15);
        assert!(star.t_star.max_abs() < 1e-15);
        // A★ (W_1 ⊗ I) = vᵀ
        let w = mean_matrix(&fixed).unwrap();
        let av = star.a_star.matmul(&w);
        for (a, b) in av.row(0).iter().zip(&rep.v) {
            assert!((a - b).abs() < 1e-14);
        }

        let quiet = clt_covariance(&fixed, &obj, &NoiseModel::none(), &presets::benchmark_schedule(), None).unwrap();
        assert!(quiet.u_star[0][0].abs() < 1e-14);
        assert!(quiet.v_matrix[0][0].abs() < 1e-14);
    }

    #[test]
    fn noise_only_covariance_requires_doubly_stochastic_draws() {
        let (topo, obj, noise) = bench();
        assert!(doubly_stochastic_covariance(&broadcast_gossip(&topo, 0.5, None).unwrap(), &obj, &noise).is_err());
        let quiet = doubly_stochastic_covariance(&pairwise_gossip(&topo).unwrap(), &obj, &NoiseModel::none()).unwrap();
        assert_eq!(quiet[(0, 0)], 0.0);
    }

    #[test]
    fn broadcast_covariance_exceeds_centralized() {
        let (topo, obj, noise) = bench();
        let bc = broadcast_gossip(&topo, 0.5, None).unwrap();
        let rep = clt_covariance(&bc, &obj, &noise, &presets::benchmark_schedule(), None).unwrap();
        assert!((rep.theta_star[0] - 1.0).abs() < 1e-12);
        assert!(rep.u_star[0][0] > 0.2);
        assert!(rep.diagnostics.terms.r_term[0] > 0.0);
    }

    #[test]
    fn critical_regime_step_condition() {
        let (topo, obj, noise) = bench();
        let pair = pairwise_gossip(&topo).unwrap();
        let low = StepSchedule::new(0.5, 1.0).unwrap();
        assert!(matches!(
            clt_covariance(&pair, &obj, &noise, &low, None),
            Err(Error::StepSize { .. })
        ));
        let ok = StepSchedule::new(2.0, 1.0).unwrap();
        let rep = clt_covariance(&pair, &obj, &noise, &ok, None).unwrap();
        // γ★U/(2γ★L − 1)
        assert!((rep.v_matrix[0][0] - 2.0 * 0.2 / 3.0).abs() < 1e-12);
        assert_eq!(rep.regime, Regime::Critical);
    }

    #[test]
    fn critical_regime_large_gamma_limit() {
        let (topo, obj, noise) = bench();
        let pair = pairwise_gossip(&topo).unwrap();
        let sched = StepSchedule::new(1e6, 1.0).unwrap();
        let rep = clt_covariance(&pair, &obj, &noise, &sched, None).unwrap();
        assert!((rep.v_matrix[0][0] / 0.1 - 1.0).abs() < 1e-4);
    }

    #[test]
    fn critical_form_equals_conventional_form() {
        let grad_h = DenseMatrix::from_rows(&[vec![-1.5, 0.4], vec![-0.2, -0.8]]).unwrap();
        let u = DenseMatrix::from_rows(&[vec![0.3, 0.1], vec![0.1, 0.5]]).unwrap();
        let sched = StepSchedule::new(3.0, 1.0).unwrap();
        let (m, q) = lyapunov_system(&grad_h, &u, &sched);
        let verbatim = solve_lyapunov(&m, &q).unwrap();
        let shifted = grad_h.add(&DenseMatrix::identity(2).scale(1.0 / (2.0 * 3.0)));
        let conventional = solve_lyapunov(&shifted, &u).unwrap();
        assert!(verbatim.max_abs_diff(&conventional) < 1e-12);
    }

    #[test]
    fn report_json_roundtrip() {
        let (topo, obj, noise) = bench();
        let rep = clt_covariance(&broadcast_gossip(&topo, 0.5, None).unwrap(), &obj, &noise, &presets::benchmark_schedule(), None)
            .unwrap();
        let json = serde_json::to_string(&rep).unwrap();
        for key in ["\"v\"", "\"theta_star\"", "\"grad_h\"", "\"L\"", "\"m1_star\"", "\"m2_star\"", "\"U_star\"", "\"V\"", "\"regime\"", "\"rho\""] {
            assert!(json.contains(key), "missing {key}");
        }
        let back: AsymptoticReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }
}

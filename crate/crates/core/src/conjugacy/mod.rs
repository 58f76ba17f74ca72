//! Barrier-regularized regression for a conjugating polynomial map.
//!
//! For coefficients `Θ` (`N × n`) the learned map is `h(x) = Θᵀφ(x)` and the
//! residual on step `k` is `E_k = Φ_k Θ - Φ_{k-1} Θ Āᵀ`. The objective is
//!
//! ```text
//! J(Θ) = 1/(2MP) Σ_k ‖E_k‖²_F + β/2 ‖Θ‖²_F
//!        + μ/M Σ_i max{0, -log det(ΘᵀC_i + C_iᵀΘ - I)}
//! ```
//!
//! where `C_i = ∂φ/∂x` at the i-th initial state. The log-det argument is a
//! linear lower bound on `ΘᵀC_i C_iᵀΘ`, so the problem stays convex while its
//! positive definiteness still forces `det(ΘᵀC_i) > 0`.

mod solver;

use nalgebra::{DMatrix, DVector};

use crate::basis::PolyBasis;
use crate::dynamics::TargetLinearDynamics;
use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, Cholesky};
use crate::sampling::OrbitDataset;

pub use solver::{fit, write_trace, FitOptions, Solver, StopReason, TraceRow};

/// `Θ`, an `N × n` coefficient matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMatrix(DMatrix<f64>);

impl CoefficientMatrix {
    pub fn new(theta: DMatrix<f64>) -> Result<Self> {
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("coefficient matrix has non-finite entries".into()));
        }
        Ok(Self(theta))
    }

    /// `h(x) = x`.
    pub fn identity(basis: &PolyBasis) -> Self {
        Self(basis.identity_embedding())
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// `h(x) = Θᵀφ(x)`.
    pub fn apply(&self, basis: &PolyBasis, x: &[f64]) -> DVector<f64> {
        self.0.tr_mul(&basis.eval(x))
    }
}

/// Feature matrices of one dataset against one target.
#[derive(Debug, Clone)]
pub struct RegressionData {
    /// `Φ_0 ..= Φ_P`, each `M × N`.
    phi: Vec<DMatrix<f64>>,
    /// `C_i`, each `N × n`.
    c: Vec<DMatrix<f64>>,
    abar: DMatrix<f64>,
    /// `Σ_{k=1}^P Φ_{k-1}ᵀ Φ_{k-1}`
    g_prev: DMatrix<f64>,
    /// `Σ_{k=1}^P Φ_kᵀ Φ_k`
    g_next: DMatrix<f64>,
    /// `Σ_{k=1}^P Φ_kᵀ Φ_{k-1}`
    g_cross: DMatrix<f64>,
    m: usize,
    p: usize,
}

pub fn assemble(
    ds: &OrbitDataset,
    basis: &PolyBasis,
    target: &TargetLinearDynamics,
) -> Result<RegressionData> {
    let tol = 1e-12 * ds.tau.abs().max(target.tau().abs());
    if (ds.tau - target.tau()).abs() > tol {
        return Err(Error::Config(format!(
            "target tau {} differs from dataset tau {}",
            target.tau(),
            ds.tau
        )));
    }
    let n = ds.state_dim();
    if basis.state_dim() != n || target.dim() != n {
        return Err(Error::Config(format!(
            "dimension mismatch: dataset n={n}, basis n={}, target n={}",
            basis.state_dim(),
            target.dim()
        )));
    }
    let (m, p, nb) = (ds.orbit_count(), ds.horizon(), basis.len());
    let mut phi = vec![DMatrix::zeros(m, nb); p + 1];
    let mut row = vec![0.0; nb];
    for (k, mat) in phi.iter_mut().enumerate() {
        for i in 0..m {
            basis.eval_into(ds.state(i, k), &mut row);
            for (j, v) in row.iter().enumerate() {
                mat[(i, j)] = *v;
            }
        }
    }
    let c = (0..m).map(|i| basis.jacobian(ds.state(i, 0))).collect();
    Ok(RegressionData::from_parts(phi, c, target.abar().clone()))
}

impl RegressionData {
    /// Builds the data from explicit feature matrices.
    pub fn from_parts(phi: Vec<DMatrix<f64>>, c: Vec<DMatrix<f64>>, abar: DMatrix<f64>) -> Self {
        assert!(phi.len() >= 2, "need at least one transition");
        let (m, nb) = phi[0].shape();
        assert!(phi.iter().all(|f| f.shape() == (m, nb)));
        assert_eq!(c.len(), m);
        let p = phi.len() - 1;
        let mut g_prev = DMatrix::zeros(nb, nb);
        let mut g_next = DMatrix::zeros(nb, nb);
        let mut g_cross = DMatrix::zeros(nb, nb);
        for k in 1..=p {
            g_prev += phi[k - 1].tr_mul(&phi[k - 1]);
            g_next += phi[k].tr_mul(&phi[k]);
            g_cross += phi[k].tr_mul(&phi[k - 1]);
        }
        Self {
            phi,
            c,
            abar,
            g_prev,
            g_next,
            g_cross,
            m,
            p,
        }
    }

    pub fn orbit_count(&self) -> usize {
        self.m
    }

    pub fn horizon(&self) -> usize {
        self.p
    }

    pub fn basis_len(&self) -> usize {
        self.phi[0].ncols()
    }

    pub fn state_dim(&self) -> usize {
        self.abar.nrows()
    }

    pub fn phi(&self) -> &[DMatrix<f64>] {
        &self.phi
    }

    pub fn jacobians(&self) -> &[DMatrix<f64>] {
        &self.c
    }

    pub fn abar(&self) -> &DMatrix<f64> {
        &self.abar
    }

    /// `E_k(Θ)` for `k = 1..=P`.
    pub fn residual(&self, theta: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        &self.phi[k] * theta - &self.phi[k - 1] * theta * self.abar.transpose()
    }

    /// `Σ_k ‖E_k‖²_F` summed residual by residual.
    pub fn residual_sum_sq(&self, theta: &DMatrix<f64>) -> f64 {
        (1..=self.p).map(|k| frobenius_sq(&self.residual(theta, k))).sum()
    }

    /// `Σ_k ‖E_k‖²_F` through the precomputed Gram matrices; independent of `M P`.
    pub fn residual_sum_sq_gram(&self, theta: &DMatrix<f64>) -> f64 {
        let at = self.abar.transpose();
        let t_at = theta * &at;
        let next = theta.dot(&(&self.g_next * theta));
        let cross = t_at.dot(&(&self.g_cross * theta));
        let prev = t_at.dot(&(&self.g_prev * &t_at));
        next - 2.0 * cross + prev
    }

    fn scale(&self) -> f64 {
        1.0 / (self.m * self.p) as f64
    }

    /// `S_i = ΘᵀC_i + C_iᵀΘ - I`.
    pub fn surrogate(&self, theta: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
        let tc = theta.tr_mul(&self.c[i]);
        let n = tc.nrows();
        &tc + tc.transpose() - DMatrix::identity(n, n)
    }

    /// Mean `|det(ΘᵀC_i)|` over the initial states.
    pub fn mean_abs_det(&self, theta: &DMatrix<f64>) -> f64 {
        self.c
            .iter()
            .map(|c| theta.tr_mul(c).determinant().abs())
            .sum::<f64>()
            / self.m as f64
    }
}

/// Objective value and its three parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub value: f64,
    pub mse_term: f64,
    pub reg_term: f64,
    /// `+∞` when some surrogate matrix is not positive definite.
    pub barrier_term: f64,
}

impl ObjectiveParts {
    pub fn is_feasible(&self) -> bool {
        self.barrier_term.is_finite()
    }
}

/// `(g_i, S_i⁻¹)` with `g_i = -log det S_i` for every sample, or `None` if
/// some `S_i` fails the Cholesky test.
fn barrier_pieces(theta: &DMatrix<f64>, data: &RegressionData) -> Option<Vec<(f64, DMatrix<f64>)>> {
    (0..data.m)
        .map(|i| {
            let ch = Cholesky::factor(&data.surrogate(theta, i))?;
            Some((-ch.log_det(), ch.inverse()))
        })
        .collect()
}

/// How the per-sample term `max{0, g}` is treated by the derivative code.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Hinge {
    /// Exact hinge; zero subgradient at the kink.
    Exact,
    /// `ε log(1 + e^{g/ε})`, which overestimates the hinge by at most `ε ln 2`.
    Softplus(f64),
}

impl Hinge {
    fn value(self, g: f64) -> f64 {
        match self {
            Hinge::Exact => g.max(0.0),
            Hinge::Softplus(eps) => {
                let z = g / eps;
                eps * (z.max(0.0) + (-z.abs()).exp().ln_1p())
            }
        }
    }

    /// First and second derivative with respect to `g`.
    fn derivatives(self, g: f64) -> (f64, f64) {
        match self {
            Hinge::Exact => (if g > 0.0 { 1.0 } else { 0.0 }, 0.0),
            Hinge::Softplus(eps) => {
                let z = g / eps;
                let sig = if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                };
                (sig, sig * (1.0 - sig) / eps)
            }
        }
    }
}

fn parts_with(theta: &DMatrix<f64>, data: &RegressionData, beta: f64, mu: f64, hinge: Hinge) -> ObjectiveParts {
    let mse_term = 0.5 * data.scale() * data.residual_sum_sq_gram(theta);
    let reg_term = 0.5 * beta * frobenius_sq(theta);
    // Infeasibility is +∞ for every μ, including μ = 0.
    let barrier_term = match barrier_pieces(theta, data) {
        Some(pieces) => mu * pieces.iter().map(|(g, _)| hinge.value(*g)).sum::<f64>() / data.m as f64,
        None => f64::INFINITY,
    };
    ObjectiveParts {
        value: mse_term + reg_term + barrier_term,
        mse_term,
        reg_term,
        barrier_term,
    }
}

/// `J_μ(Θ)` and its parts; `barrier_term` is `+∞` when some surrogate matrix
/// is not positive definite.
pub fn objective(theta: &DMatrix<f64>, data: &RegressionData, beta: f64, mu: f64) -> ObjectiveParts {
    parts_with(theta, data, beta, mu, Hinge::Exact)
}

pub(crate) fn smoothed_objective(theta: &DMatrix<f64>, data: &RegressionData, beta: f64, mu: f64, hinge: Hinge) -> f64 {
    parts_with(theta, data, beta, mu, hinge).value
}

/// Gradient of the smooth quadratic part (MSE plus ridge).
fn quadratic_gradient(theta: &DMatrix<f64>, data: &RegressionData, beta: f64) -> DMatrix<f64> {
    let a = &data.abar;
    let at = a.transpose();
    let g = &data.g_next * theta - &data.g_cross * theta * &at - data.g_cross.tr_mul(theta) * a
        + &data.g_prev * theta * (&at * a);
    g * data.scale() + theta * beta
}

pub(crate) fn gradient_with(
    theta: &DMatrix<f64>,
    data: &RegressionData,
    beta: f64,
    mu: f64,
    hinge: Hinge,
) -> Option<DMatrix<f64>> {
    let pieces = barrier_pieces(theta, data)?;
    let mut grad = quadratic_gradient(theta, data, beta);
    let w = mu / data.m as f64;
    for ((g, sinv), c) in pieces.iter().zip(&data.c) {
        let (d1, _) = hinge.derivatives(*g);
        if d1 != 0.0 {
            // ∂(-log det S)/∂Θ = -2 C S⁻¹
            grad += (c * sinv) * (-2.0 * w * d1);
        }
    }
    Some(grad)
}

/// Gradient of [`objective`]. A hinge exactly at `det S_i = 1` contributes the
/// zero subgradient.
pub fn gradient(theta: &DMatrix<f64>, data: &RegressionData, beta: f64, mu: f64) -> Result<DMatrix<f64>> {
    gradient_with(theta, data, beta, mu, Hinge::Exact)
        .ok_or_else(|| Error::Infeasible("a surrogate matrix is not positive definite".into()))
}

/// Hessian over `vec(Θ)` (column-major).
pub(crate) fn hessian_with(
    theta: &DMatrix<f64>,
    data: &RegressionData,
    beta: f64,
    mu: f64,
    hinge: Hinge,
) -> Option<DMatrix<f64>> {
    let nb = data.basis_len();
    let n = data.state_dim();
    let dim = nb * n;
    let a = &data.abar;
    let ata = a.transpose() * a;
    let s = data.scale();
    // vec(A V B) = (Bᵀ ⊗ A) vec(V)
    let mut h = DMatrix::zeros(dim, dim);
    for r in 0..n {
        for q in 0..n {
            let id = if r == q { 1.0 } else { 0.0 };
            for j in 0..nb {
                for l in 0..nb {
                    h[(r * nb + j, q * nb + l)] = s
                        * (id * data.g_next[(j, l)] - a[(r, q)] * data.g_cross[(j, l)]
                            - a[(q, r)] * data.g_cross[(l, j)]
                            + ata[(r, q)] * data.g_prev[(j, l)]);
                }
            }
        }
    }
    for d in 0..dim {
        h[(d, d)] += beta;
    }

    // g = -log det S has Hessian tr(W dS W dS); for unit changes of Θ[(j, r)]
    // and Θ[(l, q)] this is 2 [U[l,r] U[j,q] + Q[j,l] W[r,q]] with U = C W,
    // Q = C W Cᵀ. Its gradient is -2 U.
    let w = mu / data.m as f64;
    let pieces = barrier_pieces(theta, data)?;
    for ((g, sinv), c) in pieces.iter().zip(&data.c) {
        let (d1, d2) = hinge.derivatives(*g);
        if d1 == 0.0 && d2 == 0.0 {
            continue;
        }
        let u = c * sinv;
        let qm = &u * c.transpose();
        for r in 0..n {
            for q in 0..n {
                for j in 0..nb {
                    for l in 0..nb {
                        let curv = 2.0 * (u[(l, r)] * u[(j, q)] + qm[(j, l)] * sinv[(r, q)]);
                        let outer = 4.0 * u[(j, r)] * u[(l, q)];
                        h[(r * nb + j, q * nb + l)] += w * (d1 * curv + d2 * outer);
                    }
                }
            }
        }
    }
    Some(h)
}

/// Scaled MSE `L_μ = sqrt((1/MP) Σ‖E_k‖²) / ((1/M) Σ |det ΘᵀC_i|)`,
/// returned with its denominator.
pub fn scaled_mse(theta: &DMatrix<f64>, data: &RegressionData) -> Result<(f64, f64)> {
    let denom = data.mean_abs_det(theta);
    if !(denom > 0.0) {
        return Err(Error::DegenerateMap);
    }
    let numer = (data.scale() * data.residual_sum_sq(theta)).sqrt();
    Ok((numer / denom, denom))
}

/// Sample estimate of the push-forward mass `∫|det ∂h/∂x| dρ`.
pub fn pushforward_measure(theta: &DMatrix<f64>, data: &RegressionData) -> f64 {
    data.mean_abs_det(theta)
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta: CoefficientMatrix,
    pub objective: f64,
    /// `1/(2MP) Σ‖E_k‖²`, summed residual by residual.
    pub mse_term: f64,
    pub reg_term: f64,
    pub barrier_term: f64,
    pub l_mu: f64,
    pub denom: f64,
    /// `‖∇J‖_F` with the zero subgradient at hinge kinks.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop: StopReason,
    pub feasible: bool,
    pub trace: Vec<TraceRow>,
}

impl FitResult {
    /// `L_μ²`, the reported detection statistic.
    pub fn l2(&self) -> f64 {
        self.l_mu * self.l_mu
    }

    /// Root-mean-square residual, the numerator of `L_μ`.
    pub fn rms_residual(&self) -> f64 {
        (2.0 * self.mse_term).sqrt()
    }
}

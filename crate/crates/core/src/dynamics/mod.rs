//! Parameterized vector fields, their flows and linearizations.

mod expm;
mod resonance;

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub use expm::matrix_exp;
pub use resonance::{resonance_check, ResonanceReport, ResonanceViolation};

/// Sup-norm bound on integrated states.
pub const DIVERGENCE_GUARD: f64 = 10.0;

/// Default central-difference step for [`ParamSystem::jacobian_at`].
pub const JACOBIAN_STEP: f64 = 1e-6;

type FieldFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
type JacobianFn = dyn Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync;

/// A vector field `f(x; α)` with an equilibrium at the origin for every `α`.
#[derive(Clone)]
pub struct ParamSystem {
    name: String,
    n: usize,
    q: usize,
    field: Arc<FieldFn>,
    jacobian: Option<Arc<JacobianFn>>,
    guard: f64,
}

impl fmt::Debug for ParamSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamSystem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("q", &self.q)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl ParamSystem {
    /// `field(x, alpha, out)` writes `f(x; α)` into `out`.
    pub fn new<F>(name: impl Into<String>, n: usize, q: usize, field: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert!(n > 0 && q > 0, "state and parameter dimensions must be positive");
        Self {
            name: name.into(),
            n,
            q,
            field: Arc::new(field),
            jacobian: None,
            guard: DIVERGENCE_GUARD,
        }
    }

    /// Overrides the finite-difference Jacobian.
    pub fn with_jacobian<J>(mut self, jac: J) -> Self
    where
        J: Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    {
        self.jacobian = Some(Arc::new(jac));
        self
    }

    pub fn with_guard(mut self, guard: f64) -> Self {
        self.guard = guard;
        self
    }

    /// The planar pitchfork system
    /// `ẋ₁ = α x₁ + x₂ + sin(2π x₁) / (2π)`, `ẋ₂ = x₁ - x₂`.
    pub fn pitchfork() -> Self {
        Self::new("pitchfork", 2, 1, |x, a, out| {
            out[0] = a[0] * x[0] + x[1] + (2.0 * PI * x[0]).sin() / (2.0 * PI);
            out[1] = x[0] - x[1];
        })
        .with_jacobian(|x, a| {
            DMatrix::from_row_slice(2, 2, &[a[0] + (2.0 * PI * x[0]).cos(), 1.0, 1.0, -1.0])
        })
    }

    /// `ẋ = A x`, ignoring the (one-dimensional) parameter.
    pub fn linear(a: DMatrix<f64>) -> Self {
        assert!(a.is_square(), "linear system matrix must be square");
        let n = a.nrows();
        let name = format!(
            "linear:{}",
            a.transpose()
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        let jac = a.clone();
        Self::new(name, n, 1, move |x, _, out| {
            for (i, o) in out.iter_mut().enumerate() {
                *o = (0..n).map(|j| a[(i, j)] * x[j]).sum();
            }
        })
        .with_jacobian(move |_, _| jac.clone())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn param_dim(&self) -> usize {
        self.q
    }

    pub fn guard(&self) -> f64 {
        self.guard
    }

    fn check_dims(&self, x: &[f64], alpha: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::InvalidInput(format!(
                "state has length {}, system {} expects {}",
                x.len(),
                self.name,
                self.n
            )));
        }
        if alpha.len() != self.q {
            return Err(Error::InvalidInput(format!(
                "parameter has length {}, system {} expects {}",
                alpha.len(),
                self.name,
                self.q
            )));
        }
        Ok(())
    }

    pub fn eval_field(&self, x: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(x, alpha)?;
        let mut out = vec![0.0; self.n];
        (self.field)(x, alpha, &mut out);
        Ok(out)
    }

    /// Classical RK4 approximation of the flow `S^t(x0)`.
    ///
    /// The step is shrunk to `t / ceil(t / step)` so that the final time is
    /// hit exactly.
    pub fn flow(&self, x0: &[f64], alpha: &[f64], t: f64, step: f64) -> Result<Vec<f64>> {
        self.check_dims(x0, alpha)?;
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::InvalidInput(format!("flow duration must be >= 0, got {t}")));
        }
        if !(step > 0.0) {
            return Err(Error::InvalidInput(format!("integrator step must be > 0, got {step}")));
        }
        let mut x = x0.to_vec();
        if t == 0.0 {
            return Ok(x);
        }
        // Tolerate t/step landing a hair above an integer.
        let steps = ((t / step) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let h = t / steps as f64;
        let n = self.n;
        let mut k1 = vec![0.0; n];
        let mut k2 = vec![0.0; n];
        let mut k3 = vec![0.0; n];
        let mut k4 = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let f = &self.field;
        for s in 0..steps {
            f(&x, alpha, &mut k1);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            f(&tmp, alpha, &mut k2);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            f(&tmp, alpha, &mut k3);
            for i in 0..n {
                tmp[i] = x[i] + h * k3[i];
            }
            f(&tmp, alpha, &mut k4);
            for i in 0..n {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let norm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !(norm <= self.guard) {
                return Err(Error::OrbitDivergence {
                    time: (s + 1) as f64 * h,
                    norm,
                    limit: self.guard,
                });
            }
        }
        Ok(x)
    }

    /// Central-difference Jacobian `∂f/∂x`, or the analytic hook if one is set.
    pub fn jacobian_at(&self, x: &[f64], alpha: &[f64], h: f64) -> Result<DMatrix<f64>> {
        self.check_dims(x, alpha)?;
        if let Some(jac) = &self.jacobian {
            return Ok(jac(x, alpha));
        }
        if !(h > 0.0) {
            return Err(Error::InvalidInput(format!("difference step must be > 0, got {h}")));
        }
        self.fd_jacobian(x, alpha, h)
    }

    /// Central-difference Jacobian, ignoring any analytic hook.
    pub fn fd_jacobian(&self, x: &[f64], alpha: &[f64], h: f64) -> Result<DMatrix<f64>> {
        self.check_dims(x, alpha)?;
        let n = self.n;
        let mut jac = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            xp[j] = x[j] + h;
            (self.field)(&xp, alpha, &mut fp);
            xp[j] = x[j] - h;
            (self.field)(&xp, alpha, &mut fm);
            xp[j] = x[j];
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        Ok(jac)
    }

    /// Reference linear dynamics from the Jacobian at the origin: the
    /// eigenvalues, sorted ascending, on a diagonal.
    pub fn linearize_diag(&self, alpha0: &[f64], tau: f64) -> Result<TargetLinearDynamics> {
        let origin = vec![0.0; self.n];
        let jac = self.jacobian_at(&origin, alpha0, JACOBIAN_STEP)?;
        let eigs = real_distinct_eigenvalues(&jac)?;
        TargetLinearDynamics::new(
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eigs)),
            tau,
            Provenance::ModelAware,
        )
    }
}

/// Eigenvalues of a square matrix: closed form for 2×2, Schur otherwise.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    assert!(m.is_square());
    match m.nrows() {
        1 => vec![Complex64::new(m[(0, 0)], 0.0)],
        2 => {
            let tr = m[(0, 0)] + m[(1, 1)];
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            let half = 0.5 * tr;
            // Discriminant in the cancellation-free form ((a-d)/2)² + bc.
            let disc = (0.5 * (m[(0, 0)] - m[(1, 1)])).powi(2) + m[(0, 1)] * m[(1, 0)];
            if disc >= 0.0 {
                let r = disc.sqrt();
                // Larger-magnitude root directly, the other through the product.
                let big = if half >= 0.0 { half + r } else { half - r };
                let small = if big != 0.0 { det / big } else { half - r };
                let mut v = [big, small];
                v.sort_by(|a, b| a.total_cmp(b));
                v.iter().map(|&x| Complex64::new(x, 0.0)).collect()
            } else {
                let r = (-disc).sqrt();
                vec![Complex64::new(half, -r), Complex64::new(half, r)]
            }
        }
        _ => m.clone().complex_eigenvalues().iter().copied().collect(),
    }
}

/// Real, pairwise distinct eigenvalues sorted ascending, or an
/// unsupported-spectrum error.
pub fn real_distinct_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let eigs = eigenvalues(m);
    let scale = 1.0 + eigs.iter().map(|e| e.norm()).fold(0.0, f64::max);
    if let Some(e) = eigs.iter().find(|e| e.im.abs() > 1e-10 * scale) {
        return Err(Error::UnsupportedSpectrum(format!("complex eigenvalue {e}")));
    }
    let mut re: Vec<f64> = eigs.iter().map(|e| e.re).collect();
    re.sort_by(|a, b| a.total_cmp(b));
    if let Some(w) = re.windows(2).find(|w| (w[1] - w[0]).abs() <= 1e-9 * scale) {
        return Err(Error::UnsupportedSpectrum(format!("repeated eigenvalue {}", w[0])));
    }
    Ok(re)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ModelAware,
    Koopman,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::ModelAware => "model-aware",
            Provenance::Koopman => "koopman",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model-aware" => Ok(Provenance::ModelAware),
            "koopman" => Ok(Provenance::Koopman),
            other => Err(Error::Config(format!(
                "unknown target mode {other:?} (expected model-aware or koopman)"
            ))),
        }
    }
}

/// Continuous generator `A` together with its sampled map `Ā = exp(A τ)`.
#[derive(Debug, Clone)]
pub struct TargetLinearDynamics {
    a: DMatrix<f64>,
    abar: DMatrix<f64>,
    tau: f64,
    provenance: Provenance,
}

impl TargetLinearDynamics {
    pub fn new(a: DMatrix<f64>, tau: f64, provenance: Provenance) -> Result<Self> {
        if !a.is_square() || a.nrows() == 0 {
            return Err(Error::InvalidInput("target generator must be square".into()));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidInput(format!("tau must be > 0, got {tau}")));
        }
        let abar = matrix_exp(&a, tau);
        Ok(Self {
            a,
            abar,
            tau,
            provenance,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn abar(&self) -> &DMatrix<f64> {
        &self.abar
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn decay() -> ParamSystem {
        ParamSystem::linear(dmatrix![-1.0])
    }

    #[test]
    fn field_values() {
        let sys = ParamSystem::pitchfork();
        assert_eq!(sys.eval_field(&[0.0, 0.0], &[-4.0]).unwrap(), vec![0.0, 0.0]);
        let f = sys.eval_field(&[0.25, 0.0], &[-4.0]).unwrap();
        assert_relative_eq!(f[0], -1.0 + 1.0 / (2.0 * PI), epsilon = 1e-15);
        assert_relative_eq!(f[1], 0.25, epsilon = 1e-15);
        assert_eq!(decay().eval_field(&[2.0], &[0.0]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn field_dimension_mismatch() {
        let sys = ParamSystem::pitchfork();
        assert!(matches!(sys.eval_field(&[0.0], &[-4.0]), Err(Error::InvalidInput(_))));
        assert!(matches!(sys.eval_field(&[0.0, 0.0], &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn flow_scalar_decay() {
        let x = decay().flow(&[1.0], &[0.0], 1.0, 1e-3).unwrap();
        assert!((x[0] - (-1.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn flow_zero_time_is_identity() {
        let x0 = [0.123456789, -0.987654321];
        let x = ParamSystem::pitchfork().flow(&x0, &[-4.0], 0.0, 0.1).unwrap();
        assert_eq!(x, x0.to_vec());
    }

    #[test]
    fn flow_attracted_at_reference() {
        // Reference norms from an independent adaptive integrator (rtol 1e-12).
        let sys = ParamSystem::pitchfork();
        for (t, want) in [(10.0, 0.0017214739429344083), (13.0, 0.0002969537750758309)] {
            let x = sys.flow(&[0.5, 0.5], &[-4.0], t, 1e-3).unwrap();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - want).abs() < 1e-9, "t={t}: {norm}");
        }
    }

    #[test]
    fn flow_divergence_reports_time() {
        let sys = ParamSystem::linear(dmatrix![1.0]);
        match sys.flow(&[1.0], &[0.0], 5.0, 1e-2) {
            Err(Error::OrbitDivergence { time, .. }) => {
                // e^t crosses 10 at t = ln 10.
                assert!((time - 10f64.ln()).abs() < 0.02, "time {time}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn flow_rejects_bad_arguments() {
        let sys = decay();
        assert!(sys.flow(&[1.0], &[0.0], -1.0, 0.1).is_err());
        assert!(sys.flow(&[1.0], &[0.0], 1.0, 0.0).is_err());
    }

    #[test]
    fn pitchfork_jacobian() {
        let sys = ParamSystem::pitchfork();
        let j = sys.jacobian_at(&[0.0, 0.0], &[-4.0], JACOBIAN_STEP).unwrap();
        let want = dmatrix![-3.0, 1.0; 1.0, -1.0];
        assert!((j - want).amax() < 1e-8);
        let j2 = sys.jacobian_at(&[0.0, 0.0], &[-2.0], JACOBIAN_STEP).unwrap();
        assert!(j2.determinant().abs() < 1e-8);
        for x in [[0.3, -0.7], [-0.9, 0.2]] {
            let analytic = sys.jacobian_at(&x, &[-1.3], JACOBIAN_STEP).unwrap();
            let fd = sys.fd_jacobian(&x, &[-1.3], JACOBIAN_STEP).unwrap();
            assert!((analytic - fd).amax() < 1e-8);
        }
    }

    #[test]
    fn linear_jacobian_by_differences() {
        let a = dmatrix![0.3, -1.2; 2.0, -0.7];
        let sys = ParamSystem::linear(a.clone());
        let j = sys.fd_jacobian(&[0.4, -0.1], &[0.0], JACOBIAN_STEP).unwrap();
        assert!((j - a).amax() < 1e-9);
    }

    #[test]
    fn linearization_of_pitchfork() {
        let t = ParamSystem::pitchfork().linearize_diag(&[-4.0], 0.1).unwrap();
        let s2 = 2f64.sqrt();
        assert!((t.a()[(0, 0)] - (-2.0 - s2)).abs() < 1e-9);
        assert!((t.a()[(1, 1)] - (-2.0 + s2)).abs() < 1e-9);
        assert_eq!(t.a()[(0, 1)], 0.0);
        assert_eq!(t.provenance(), Provenance::ModelAware);
        assert_relative_eq!(t.abar()[(0, 0)], ((-2.0 - s2) * 0.1).exp(), max_relative = 1e-12);
    }

    #[test]
    fn linearization_sorts_and_diagonalizes() {
        let t = ParamSystem::linear(dmatrix![-1.0, 0.0; 0.0, -2.0])
            .linearize_diag(&[0.0], 0.1)
            .unwrap();
        assert_eq!(t.a(), &dmatrix![-2.0, 0.0; 0.0, -1.0]);
        let t = ParamSystem::linear(dmatrix![0.0, 1.0; 1.0, 0.0])
            .linearize_diag(&[0.0], 0.1)
            .unwrap();
        assert!((t.a() - dmatrix![-1.0, 0.0; 0.0, 1.0]).amax() < 1e-15);
    }

    #[test]
    fn linearization_rejects_complex_and_repeated() {
        let rot = ParamSystem::linear(dmatrix![0.0, -1.0; 1.0, 0.0]);
        assert!(matches!(rot.linearize_diag(&[0.0], 0.1), Err(Error::UnsupportedSpectrum(_))));
        let rep = ParamSystem::linear(dmatrix![-1.0, 0.0; 0.0, -1.0]);
        assert!(matches!(rep.linearize_diag(&[0.0], 0.1), Err(Error::UnsupportedSpectrum(_))));
    }

    #[test]
    fn general_eigenvalues_are_roots() {
        let m = dmatrix![-3.0, 1.0, 0.0; 1.0, -1.0, 0.5; 0.0, 0.2, -2.0];
        let e = real_distinct_eigenvalues(&m).unwrap();
        assert_eq!(e.len(), 3);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
        for &l in &e {
            let shifted = &m - DMatrix::identity(3, 3) * l;
            assert!(shifted.determinant().abs() < 1e-10);
        }
    }

    #[test]
    fn target_rejects_nonpositive_tau() {
        assert!(TargetLinearDynamics::new(dmatrix![-1.0], 0.0, Provenance::ModelAware).is_err());
    }

    proptest! {
        #[test]
        fn semigroup(x1 in -1.0f64..1.0, x2 in -1.0f64..1.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let sys = ParamSystem::pitchfork();
            let a = [-4.0];
            let whole = sys.flow(&[x1, x2], &a, t1 + t2, 1e-3).unwrap();
            let mid = sys.flow(&[x1, x2], &a, t1, 1e-3).unwrap();
            let split = sys.flow(&mid, &a, t2, 1e-3).unwrap();
            let err = ((whole[0] - split[0]).powi(2) + (whole[1] - split[1]).powi(2)).sqrt();
            prop_assert!(err <= 1e-8);
        }

        #[test]
        fn linear_flow_matches_exponential(entries in prop::array::uniform4(-2.5f64..2.5), x1 in -1.0f64..1.0, x2 in -1.0f64..1.0) {
            let a = DMatrix::from_row_slice(2, 2, &entries);
            prop_assume!(a.norm() <= 5.0);
            let sys = ParamSystem::linear(a.clone()).with_guard(f64::INFINITY);
            let tau = 0.1;
            let x = sys.flow(&[x1, x2], &[0.0], tau, 1e-4).unwrap();
            let want = matrix_exp(&a, tau) * nalgebra::dvector![x1, x2];
            prop_assert!((x[0] - want[0]).abs() <= 1e-7 && (x[1] - want[1]).abs() <= 1e-7);
        }

        #[test]
        fn linear_jacobian_recovered(entries in prop::array::uniform4(-3.0f64..3.0), x1 in -1.0f64..1.0, x2 in -1.0f64..1.0) {
            let a = DMatrix::from_row_slice(2, 2, &entries);
            let sys = ParamSystem::linear(a.clone());
            let j = sys.fd_jacobian(&[x1, x2], &[0.0], JACOBIAN_STEP).unwrap();
            prop_assert!((j - a).amax() <= 1e-9);
        }
    }
}

//! Data-driven Koopman eigenfunctions and the model-free reference dynamics.
//!
//! For a candidate eigenvalue λ the residual matrix `D(λ)` stacks
//! `Φ_k − e^{λτ} Φ_{k−1}`; its smallest right singular vector is the best
//! unit-norm eigenfunction in the dictionary. Scans compress the data once via
//! a thin QR factorization of `[Φ_prev Φ_next]`, so each λ costs one small SVD.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::PolyBasis;
use crate::dynamics::{Provenance, TargetLinearDynamics};
use crate::error::{Error, Result};
use crate::sampling::{fmt_f64, OrbitDataset};

/// Relative cutoff of the optional hard-threshold refinement.
pub const SPARSITY_CUTOFF: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct KoopmanScan {
    pub lambdas: Vec<f64>,
    pub rmse: Vec<f64>,
    pub coeffs: Vec<DVector<f64>>,
    /// Indices of strict interior local minima of `rmse`.
    pub minima: Vec<usize>,
    pub tau: f64,
}

impl KoopmanScan {
    pub fn minima_lambdas(&self) -> Vec<f64> {
        self.minima.iter().map(|&j| self.lambdas[j]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub steps: usize,
    /// Drop coefficients below `SPARSITY_CUTOFF · ‖ξ‖∞` and re-solve.
    pub sparsify: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            lambda_lo: -5.0,
            lambda_hi: -0.1,
            steps: 491,
            sparsify: false,
        }
    }
}

/// Stacked dictionary snapshots `(Φ_prev, Φ_next)`, each (M·P)×N with row
/// `i·P + (k−1)`.
fn snapshots(ds: &OrbitDataset, b: &PolyBasis) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if ds.state_dim() != b.state_dim() {
        return Err(Error::Config(format!(
            "dataset state dimension {} does not match basis dimension {}",
            ds.state_dim(),
            b.state_dim()
        )));
    }
    let (m, p, nb) = (ds.orbit_count(), ds.horizon(), b.len());
    let mut prev = DMatrix::zeros(m * p, nb);
    let mut next = DMatrix::zeros(m * p, nb);
    let mut buf = vec![0.0; nb];
    for i in 0..m {
        for k in 1..=p {
            let row = i * p + k - 1;
            b.eval_into(ds.state(i, k - 1), &mut buf);
            for (j, v) in buf.iter().enumerate() {
                prev[(row, j)] = *v;
            }
            b.eval_into(ds.state(i, k), &mut buf);
            for (j, v) in buf.iter().enumerate() {
                next[(row, j)] = *v;
            }
        }
    }
    Ok((prev, next))
}

/// The (M·P)×N matrix with rows `Φ_k − e^{λτ}Φ_{k−1}`.
pub fn dmatrix(ds: &OrbitDataset, b: &PolyBasis, lambda: f64) -> Result<DMatrix<f64>> {
    let (prev, next) = snapshots(ds, b)?;
    Ok(next - prev * (lambda * ds.tau).exp())
}

/// Compressed data: `R` from the thin QR of `[Φ_prev Φ_next]`.
struct Compressed {
    r_prev: DMatrix<f64>,
    r_next: DMatrix<f64>,
    rows: usize,
    tau: f64,
}

impl Compressed {
    fn new(ds: &OrbitDataset, b: &PolyBasis) -> Result<Self> {
        let (prev, next) = snapshots(ds, b)?;
        let rows = prev.nrows();
        let nb = prev.ncols();
        if rows < nb {
            log::warn!("only {rows} snapshot pairs for {nb} dictionary terms; residuals may vanish trivially");
        }
        let mut stacked = DMatrix::zeros(rows, 2 * nb);
        stacked.columns_mut(0, nb).copy_from(&prev);
        stacked.columns_mut(nb, nb).copy_from(&next);
        let r = stacked.qr().r();
        Ok(Self {
            r_prev: r.columns(0, nb).into_owned(),
            r_next: r.columns(nb, nb).into_owned(),
            rows,
            tau: ds.tau,
        })
    }

    fn reduced(&self, lambda: f64) -> DMatrix<f64> {
        &self.r_next - &self.r_prev * (lambda * self.tau).exp()
    }

    fn solve(&self, lambda: f64, sparsify: bool) -> (DVector<f64>, f64) {
        let d = self.reduced(lambda);
        let (mut xi, mut sigma) = smallest_singular(&d);
        if sparsify {
            let cutoff = SPARSITY_CUTOFF * xi.amax();
            let support: Vec<usize> = (0..xi.len()).filter(|&j| xi[j].abs() >= cutoff).collect();
            if support.len() < xi.len() {
                let sub = d.select_columns(support.iter());
                let (v, s) = smallest_singular(&sub);
                xi = DVector::zeros(xi.len());
                for (slot, &j) in support.iter().enumerate() {
                    xi[j] = v[slot];
                }
                sigma = s;
            }
        }
        fix_sign(&mut xi);
        (xi, sigma / (self.rows as f64).sqrt())
    }
}

fn smallest_singular(d: &DMatrix<f64>) -> (DVector<f64>, f64) {
    let cols = d.ncols();
    // Pad short matrices so the SVD exposes the full right singular basis.
    let padded;
    let a = if d.nrows() < cols {
        padded = d.clone().resize_vertically(cols, 0.0);
        &padded
    } else {
        d
    };
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let (j, s) = svd
        .singular_values
        .iter()
        .copied()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("nonempty dictionary");
    let mut xi: DVector<f64> = v_t.row(j).transpose();
    xi /= xi.norm();
    (xi, s.max(0.0))
}

fn fix_sign(xi: &mut DVector<f64>) {
    let j = xi.iamax();
    if xi[j] < 0.0 {
        xi.neg_mut();
    }
}

/// Best unit-norm eigenfunction coefficients at `lambda` and the residual
/// `σ_min / sqrt(M·P)`.
pub fn eigenfunction_at(ds: &OrbitDataset, b: &PolyBasis, lambda: f64) -> Result<(DVector<f64>, f64)> {
    Ok(Compressed::new(ds, b)?.solve(lambda, false))
}

/// Evaluates the eigenfunction residual on a uniform λ grid.
pub fn scan(ds: &OrbitDataset, b: &PolyBasis, opts: &ScanOptions) -> Result<KoopmanScan> {
    if !(opts.lambda_lo < opts.lambda_hi) || opts.steps < 3 {
        return Err(Error::InvalidInput(format!(
            "scan needs lambda_lo < lambda_hi and steps >= 3 (got [{}, {}], {})",
            opts.lambda_lo, opts.lambda_hi, opts.steps
        )));
    }
    let comp = Compressed::new(ds, b)?;
    let h = (opts.lambda_hi - opts.lambda_lo) / (opts.steps - 1) as f64;
    let lambdas: Vec<f64> = (0..opts.steps).map(|j| opts.lambda_lo + j as f64 * h).collect();
    let solved: Vec<(DVector<f64>, f64)> = lambdas.par_iter().map(|&l| comp.solve(l, opts.sparsify)).collect();
    let (coeffs, rmse): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    let minima = local_minima(&rmse);
    Ok(KoopmanScan {
        lambdas,
        rmse,
        coeffs,
        minima,
        tau: ds.tau,
    })
}

pub fn local_minima(values: &[f64]) -> Vec<usize> {
    (1..values.len().saturating_sub(1))
        .filter(|&j| values[j] < values[j - 1] && values[j] < values[j + 1])
        .collect()
}

/// Reference dynamics from the outermost scan minima.
pub fn select_pair(scan: &KoopmanScan) -> Result<TargetLinearDynamics> {
    let lams = scan.minima_lambdas();
    if lams.len() < 2 {
        return Err(Error::SpectrumIdentification(format!(
            "scan has {} local minima, need at least 2",
            lams.len()
        )));
    }
    let lo = lams.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = lams.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![lo, hi]));
    TargetLinearDynamics::new(a, scan.tau, Provenance::Koopman)
}

/// Axis-aligned evaluation grid: `(lo, hi, count)` per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x: (f64, f64, usize),
    pub y: (f64, f64, usize),
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            x: (-1.0, 1.0, 41),
            y: (-1.0, 1.0, 41),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenfunctionGrid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[(i, j)] = ψ(xs[i], ys[j])`.
    pub values: DMatrix<f64>,
}

fn axis((lo, hi, count): (f64, f64, usize)) -> Result<Vec<f64>> {
    if count == 0 || !(lo <= hi) || (count > 1 && lo == hi) {
        return Err(Error::InvalidInput(format!("bad grid axis ({lo}, {hi}, {count})")));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let h = (hi - lo) / (count - 1) as f64;
    Ok((0..count).map(|j| if j == count - 1 { hi } else { lo + j as f64 * h }).collect())
}

/// Tabulates `ψ(x) = ξᵀφ(x)` on a planar grid.
pub fn eval_eigenfunction(xi: &DVector<f64>, b: &PolyBasis, grid: &GridSpec) -> Result<EigenfunctionGrid> {
    if b.state_dim() != 2 {
        return Err(Error::InvalidInput(format!(
            "grid export supports planar systems only (n = {})",
            b.state_dim()
        )));
    }
    if xi.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "coefficient vector has length {}, dictionary has {}",
            xi.len(),
            b.len()
        )));
    }
    let xs = axis(grid.x)?;
    let ys = axis(grid.y)?;
    let values = DMatrix::from_fn(xs.len(), ys.len(), |i, j| b.eval(&[xs[i], ys[j]]).dot(xi));
    Ok(EigenfunctionGrid { xs, ys, values })
}

pub fn write_scan(scan: &KoopmanScan, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "lambda,rmse,is_min")?;
    for (j, (l, r)) in scan.lambdas.iter().zip(&scan.rmse).enumerate() {
        let is_min = u8::from(scan.minima.contains(&j));
        writeln!(out, "{},{},{is_min}", fmt_f64(*l), fmt_f64(*r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_grid(grid: &EigenfunctionGrid, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x1,x2,psi")?;
    for (i, x) in grid.xs.iter().enumerate() {
        for (j, y) in grid.ys.iter().enumerate() {
            writeln!(out, "{},{},{}", fmt_f64(*x), fmt_f64(*y), fmt_f64(grid.values[(i, j)]))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ParamSystem;
    use crate::sampling::{generate_dataset, sample_initial, BoxDomain, DatasetSpec};

    fn diag_data(step: f64) -> OrbitDataset {
        let sys = ParamSystem::linear(DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]));
        let domain = BoxDomain::symmetric(2, 1.0).unwrap();
        let inits = sample_initial(&domain, 30, 5).unwrap();
        let spec = DatasetSpec {
            system: &sys,
            alpha: &[0.0],
            domain: &domain,
            seed: 5,
            horizon: 10,
            tau: 0.1,
            integrator_step: step,
        };
        generate_dataset(&spec, &inits).unwrap()
    }

    fn index_of(b: &PolyBasis, e: &[u32]) -> usize {
        b.exponents().iter().position(|x| x.as_slice() == e).unwrap()
    }

    #[test]
    fn dmatrix_shape_and_static_data() {
        let ds = diag_data(1e-3);
        let b = PolyBasis::new(2, 3).unwrap();
        let d = dmatrix(&ds, &b, -0.5).unwrap();
        assert_eq!(d.shape(), (30 * 10, b.len()));

        let sys = ParamSystem::linear(DMatrix::zeros(2, 2));
        let domain = BoxDomain::symmetric(2, 1.0).unwrap();
        let inits = sample_initial(&domain, 4, 1).unwrap();
        let spec = DatasetSpec {
            system: &sys,
            alpha: &[0.0],
            domain: &domain,
            seed: 1,
            horizon: 3,
            tau: 0.1,
            integrator_step: 1e-2,
        };
        let fixed = generate_dataset(&spec, &inits).unwrap();
        assert_eq!(dmatrix(&fixed, &b, 0.0).unwrap().amax(), 0.0);
    }

    #[test]
    fn scalar_decay_is_exact_eigenfunction() {
        let sys = ParamSystem::linear(DMatrix::from_element(1, 1, -1.0));
        let domain = BoxDomain::symmetric(1, 1.0).unwrap();
        let inits = sample_initial(&domain, 10, 2).unwrap();
        let spec = DatasetSpec {
            system: &sys,
            alpha: &[0.0],
            domain: &domain,
            seed: 2,
            horizon: 5,
            tau: 0.1,
            integrator_step: 1e-3,
        };
        let ds = generate_dataset(&spec, &inits).unwrap();
        let b = PolyBasis::new(1, 1).unwrap();
        assert!(dmatrix(&ds, &b, -1.0).unwrap().amax() < 1e-12);
    }

    #[test]
    fn linear_eigenpairs() {
        let ds = diag_data(1e-3);
        let b = PolyBasis::new(2, 2).unwrap();
        let (xi, r) = eigenfunction_at(&ds, &b, -1.0).unwrap();
        assert!(r <= 1e-6, "rmse {r}");
        assert!((xi[index_of(&b, &[1, 0])] - 1.0).abs() < 1e-6);
        let (xi, r) = eigenfunction_at(&ds, &b, -3.0).unwrap();
        assert!(r <= 1e-6, "rmse {r}");
        assert!((xi[index_of(&b, &[1, 1])] - 1.0).abs() < 1e-6);
        let (_, r) = eigenfunction_at(&ds, &b, -0.37).unwrap();
        assert!(r >= 1e-3, "rmse {r}");
    }

    #[test]
    fn qr_residual_matches_direct_svd() {
        let ds = diag_data(1e-3);
        let b = PolyBasis::new(2, 3).unwrap();
        for lambda in [-2.7, -1.3, -0.2] {
            let d = dmatrix(&ds, &b, lambda).unwrap();
            let direct = d.singular_values().min() / ((ds.orbit_count() * ds.horizon()) as f64).sqrt();
            let (xi, r) = eigenfunction_at(&ds, &b, lambda).unwrap();
            assert!((r - direct).abs() <= 1e-10 * direct.max(1e-12), "{r} vs {direct}");
            assert!((xi.norm() - 1.0).abs() < 1e-12);
            assert!(xi[xi.iamax()] > 0.0);
            let resid = (&d * &xi).norm() / ((ds.orbit_count() * ds.horizon()) as f64).sqrt();
            assert!((resid - r).abs() <= 1e-8 * r.max(1e-12));
        }
    }

    #[test]
    fn scan_finds_linear_spectrum() {
        let ds = diag_data(1e-4);
        let b = PolyBasis::new(2, 2).unwrap();
        let opts = ScanOptions {
            lambda_lo: -2.5,
            lambda_hi: -0.5,
            steps: 201,
            sparsify: false,
        };
        let s = scan(&ds, &b, &opts).unwrap();
        let found = s.minima_lambdas();
        for target in [-2.0, -1.0] {
            assert!(found.iter().any(|l| (l - target).abs() <= 0.01 + 1e-12), "{found:?}");
            let j = s.lambdas.iter().position(|l| (l - target).abs() < 1e-9).unwrap();
            assert!(s.rmse[j] <= 1e-5);
        }
        for j in &s.minima {
            assert!(s.rmse[*j] < s.rmse[j - 1] && s.rmse[*j] < s.rmse[j + 1]);
        }
        assert!(s.coeffs.iter().all(|c| (c.norm() - 1.0).abs() < 1e-12));
        assert!(s.rmse.iter().all(|r| *r >= 0.0));
    }

    #[test]
    fn sparsified_scan_still_finds_spectrum() {
        let ds = diag_data(1e-4);
        let b = PolyBasis::new(2, 2).unwrap();
        let (xi, r) = Compressed::new(&ds, &b).unwrap().solve(-1.0, true);
        assert!(r <= 1e-5);
        assert_eq!(xi.iter().filter(|v| **v != 0.0).count(), 1);
        assert!((xi[index_of(&b, &[1, 0])] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn select_pair_takes_ends() {
        let mk = |mins: &[f64]| {
            let lambdas: Vec<f64> = (0..=490).map(|j| -5.0 + 0.01 * j as f64).collect();
            let minima = mins
                .iter()
                .map(|m| lambdas.iter().position(|l| (l - m).abs() < 1e-9).unwrap())
                .collect();
            KoopmanScan {
                rmse: vec![1.0; lambdas.len()],
                coeffs: vec![],
                lambdas,
                minima,
                tau: 0.1,
            }
        };
        let t = select_pair(&mk(&[-3.5, -2.1, -1.4, -0.6])).unwrap();
        assert!((t.a()[(0, 0)] + 3.5).abs() < 1e-9 && (t.a()[(1, 1)] + 0.6).abs() < 1e-9);
        assert_eq!(t.provenance(), Provenance::Koopman);
        assert!((t.abar()[(0, 0)] - (-0.35f64).exp()).abs() < 1e-12);
        let t = select_pair(&mk(&[-2.0, -1.0])).unwrap();
        assert!((t.a()[(0, 0)] + 2.0).abs() < 1e-9 && (t.a()[(1, 1)] + 1.0).abs() < 1e-9);
        assert!(matches!(select_pair(&mk(&[-2.0])), Err(Error::SpectrumIdentification(_))));
    }

    #[test]
    fn grid_evaluation() {
        let b = PolyBasis::new(2, 3).unwrap();
        let mut xi = DVector::zeros(b.len());
        xi[index_of(&b, &[1, 0])] = 1.0;
        let g = eval_eigenfunction(&xi, &b, &GridSpec::default()).unwrap();
        for (i, x) in g.xs.iter().enumerate() {
            for j in 0..g.ys.len() {
                assert_eq!(g.values[(i, j)], *x);
            }
        }
        let xi = DVector::from_fn(b.len(), |j, _| (j as f64 + 1.0).sin());
        let g = eval_eigenfunction(&xi, &b, &GridSpec::default()).unwrap();
        assert_eq!(g.values[(20, 20)], 0.0);
        let b3 = PolyBasis::new(3, 2).unwrap();
        assert!(eval_eigenfunction(&DVector::zeros(b3.len()), &b3, &GridSpec::default()).is_err());
    }

    #[test]
    fn minima_are_strict() {
        assert_eq!(local_minima(&[3.0, 1.0, 2.0, 2.0, 2.0, 0.5, 4.0]), vec![1, 5]);
        assert!(local_minima(&[1.0, 2.0]).is_empty());
    }
}

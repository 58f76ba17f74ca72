//! Hyperparameter selection: a-posteriori μ choice, K-fold validation and
//! one-dimensional sweeps over μ, β and the horizon P.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::basis::PolyBasis;
use crate::conjugacy::{assemble, fit, scaled_mse, CoefficientMatrix, FitOptions, FitResult, RegressionData};
use crate::dynamics::TargetLinearDynamics;
use crate::error::{Error, Result};
use crate::linalg::{geometric_mean, logspace};
use crate::rng::{derive_seed, SplitMix64};
use crate::sampling::{fmt_f64, OrbitDataset};

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_HORIZONS: [usize; 5] = [5, 10, 15, 20, 25];

pub fn default_mu_grid() -> Vec<f64> {
    logspace(1e-6, 1.0, 13)
}

pub fn default_beta_grid() -> Vec<f64> {
    logspace(1e-8, 1e-1, 15)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Swept {
    Mu,
    Beta,
    Horizon,
}

impl Swept {
    pub fn as_str(self) -> &'static str {
        match self {
            Swept::Mu => "mu",
            Swept::Beta => "beta",
            Swept::Horizon => "P",
        }
    }
}

impl fmt::Display for Swept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Swept {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu" => Ok(Swept::Mu),
            "beta" => Ok(Swept::Beta),
            "P" | "p" => Ok(Swept::Horizon),
            other => Err(Error::Config(format!("unknown sweep `{other}` (expected mu, beta or P)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneRow {
    pub value: f64,
    pub mse_term: Option<f64>,
    pub reg_term: Option<f64>,
    pub train_l2: Option<f64>,
    pub cv_l2: Option<f64>,
    pub status: RowStatus,
}

impl TuneRow {
    fn failed(value: f64, why: impl Into<String>) -> Self {
        Self {
            value,
            mse_term: None,
            reg_term: None,
            train_l2: None,
            cv_l2: None,
            status: RowStatus::Failed(why.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneTable {
    pub swept: Swept,
    /// Ascending in `value`.
    pub rows: Vec<TuneRow>,
}

impl TuneTable {
    pub fn row(&self, value: f64) -> Option<&TuneRow> {
        self.rows.iter().find(|r| r.value == value)
    }
}

#[derive(Debug, Clone)]
pub struct TuneOptions {
    pub folds: usize,
    pub seed: u64,
    /// Start each μ from the previous solution when scanning a μ grid.
    pub warm_start: bool,
    pub fit: FitOptions,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            folds: DEFAULT_FOLDS,
            seed: 0,
            warm_start: true,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Partitions orbit indices `0..m` into `k` shuffled folds whose sizes differ
/// by at most one.
pub fn kfold_split(m: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 || k > m {
        return Err(Error::InvalidInput(format!("need 2 <= K <= M (K={k}, M={m})")));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    SplitMix64::new(derive_seed(seed, "kfold")).shuffle(&mut idx);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = m / k + usize::from(f < m % k);
        let mut validation = idx[start..start + size].to_vec();
        validation.sort_unstable();
        let mut train: Vec<usize> = idx[..start].iter().chain(&idx[start + size..]).copied().collect();
        train.sort_unstable();
        folds.push(Fold { train, validation });
        start += size;
    }
    Ok(folds)
}

fn usable(res: &FitResult) -> bool {
    res.feasible && res.l_mu.is_finite()
}

/// Fits every μ of the grid (ascending) and returns the one with minimal
/// `L_μ`, its fit, and the per-μ table.
pub fn select_mu(
    data: &RegressionData,
    beta: f64,
    mu_grid: &[f64],
    opts: &TuneOptions,
) -> Result<(f64, FitResult, TuneTable)> {
    if mu_grid.is_empty() || mu_grid.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::InvalidInput("mu grid must be nonempty and positive".into()));
    }
    let mut grid = mu_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut rows = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, FitResult)> = None;
    let mut warm: Option<CoefficientMatrix> = None;
    for &mu in &grid {
        let init = if opts.warm_start { warm.as_ref() } else { None };
        match fit(data, beta, mu, init, &opts.fit) {
            Ok(res) if usable(&res) => {
                rows.push(TuneRow {
                    value: mu,
                    mse_term: Some(res.mse_term),
                    reg_term: Some(res.reg_term),
                    train_l2: Some(res.l2()),
                    cv_l2: None,
                    status: RowStatus::Ok,
                });
                warm = Some(res.theta.clone());
                if best.as_ref().is_none_or(|(_, b)| res.l_mu < b.l_mu) {
                    best = Some((mu, res));
                }
            }
            Ok(res) => rows.push(TuneRow::failed(mu, format!("degenerate map (L={})", res.l_mu))),
            Err(e) => rows.push(TuneRow::failed(mu, e.to_string())),
        }
    }
    let table = TuneTable { swept: Swept::Mu, rows };
    match best {
        Some((mu, res)) => Ok((mu, res, table)),
        None => {
            let diag: Vec<String> = table
                .rows
                .iter()
                .map(|r| match &r.status {
                    RowStatus::Failed(why) => format!("mu={:e}: {why}", r.value),
                    RowStatus::Ok => format!("mu={:e}: ok", r.value),
                })
                .collect();
            Err(Error::Tuning(format!("no usable fit over the mu grid [{}]", diag.join("; "))))
        }
    }
}

/// K-fold validated `L_μ`: the geometric mean of the per-fold validation
/// losses, each evaluated entirely on the held-out orbits.
pub fn cv_loss(
    ds: &OrbitDataset,
    b: &PolyBasis,
    target: &TargetLinearDynamics,
    beta: f64,
    mu: f64,
    opts: &TuneOptions,
) -> Result<f64> {
    let folds = kfold_split(ds.orbit_count(), opts.folds, opts.seed)?;
    let losses: Vec<Result<f64>> = folds
        .par_iter()
        .map(|fold| {
            let train = assemble(&ds.select_orbits(&fold.train)?, b, target)?;
            let val = assemble(&ds.select_orbits(&fold.validation)?, b, target)?;
            let res = fit(&train, beta, mu, None, &opts.fit)?;
            Ok(scaled_mse(res.theta.matrix(), &val)?.0)
        })
        .collect();
    let mut ok = Vec::with_capacity(losses.len());
    let mut failures = Vec::new();
    for (f, l) in losses.into_iter().enumerate() {
        match l {
            Ok(v) if v.is_finite() => ok.push(v),
            Ok(v) => failures.push(format!("fold {f}: loss {v}")),
            Err(e) => failures.push(format!("fold {f}: {e}")),
        }
    }
    if failures.len() * 2 > opts.folds {
        return Err(Error::Tuning(format!(
            "{} of {} folds failed ({})",
            failures.len(),
            opts.folds,
            failures.join("; ")
        )));
    }
    for f in &failures {
        log::warn!("cross-validation {f}");
    }
    Ok(geometric_mean(&ok))
}

/// Fixed hyperparameters for the coordinates not being swept.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixed {
    pub beta: f64,
    pub mu: f64,
}

impl Default for Fixed {
    fn default() -> Self {
        Self { beta: 1e-4, mu: 1e-3 }
    }
}

fn sweep_row(
    ds: &OrbitDataset,
    b: &PolyBasis,
    target: &TargetLinearDynamics,
    value: f64,
    beta: f64,
    mu: f64,
    opts: &TuneOptions,
) -> TuneRow {
    let data = match assemble(ds, b, target) {
        Ok(d) => d,
        Err(e) => return TuneRow::failed(value, e.to_string()),
    };
    let res = match fit(&data, beta, mu, None, &opts.fit) {
        Ok(r) if usable(&r) => r,
        Ok(r) => return TuneRow::failed(value, format!("degenerate map (L={})", r.l_mu)),
        Err(e) => return TuneRow::failed(value, e.to_string()),
    };
    let mut row = TuneRow {
        value,
        mse_term: Some(res.mse_term),
        reg_term: Some(res.reg_term),
        train_l2: Some(res.l2()),
        cv_l2: None,
        status: RowStatus::Ok,
    };
    match cv_loss(ds, b, target, beta, mu, opts) {
        Ok(l) => row.cv_l2 = Some(l * l),
        Err(e) => row.status = RowStatus::Failed(e.to_string()),
    }
    row
}

/// One-dimensional sweep; failed grid points are recorded, not fatal.
pub fn sweep(
    ds: &OrbitDataset,
    b: &PolyBasis,
    target: &TargetLinearDynamics,
    which: Swept,
    grid: &[f64],
    fixed: Fixed,
    opts: &TuneOptions,
) -> Result<TuneTable> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("sweep grid is empty".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if which == Swept::Horizon {
        for &p in &grid {
            if p < 1.0 || p.fract() != 0.0 || p as usize > ds.horizon() {
                return Err(Error::InvalidInput(format!(
                    "horizon {p} must be an integer in 1..={}",
                    ds.horizon()
                )));
            }
        }
    }
    let rows = grid
        .par_iter()
        .map(|&v| match which {
            Swept::Mu => sweep_row(ds, b, target, v, fixed.beta, v, opts),
            Swept::Beta => sweep_row(ds, b, target, v, v, fixed.mu, opts),
            Swept::Horizon => match ds.truncate(v as usize) {
                Ok(short) => sweep_row(&short, b, target, v, fixed.beta, fixed.mu, opts),
                Err(e) => TuneRow::failed(v, e.to_string()),
            },
        })
        .collect();
    Ok(TuneTable { swept: which, rows })
}

fn opt_field(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_table(table: &TuneTable, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "swept_name,value,mse_term,reg_term,train_L2,cv_L2,status")?;
    for r in &table.rows {
        let status = match r.status {
            RowStatus::Ok => "ok",
            RowStatus::Failed(_) => "failed",
        };
        writeln!(
            out,
            "{},{},{},{},{},{},{status}",
            table.swept,
            fmt_f64(r.value),
            opt_field(r.mse_term),
            opt_field(r.reg_term),
            opt_field(r.train_l2),
            opt_field(r.cv_l2)
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use crate::dynamics::{ParamSystem, Provenance};
    use crate::sampling::{generate_dataset, sample_initial, BoxDomain, DatasetSpec};

    fn linear_setup(m: usize) -> (OrbitDataset, PolyBasis, TargetLinearDynamics) {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
        let sys = ParamSystem::linear(a.clone());
        let domain = BoxDomain::symmetric(2, 1.0).unwrap();
        let inits = sample_initial(&domain, m, 11).unwrap();
        let spec = DatasetSpec {
            system: &sys,
            alpha: &[0.0],
            domain: &domain,
            seed: 11,
            horizon: 10,
            tau: 0.1,
            integrator_step: 1e-3,
        };
        let ds = generate_dataset(&spec, &inits).unwrap();
        let target = TargetLinearDynamics::new(a, 0.1, Provenance::ModelAware).unwrap();
        (ds, PolyBasis::new(2, 3).unwrap(), target)
    }

    #[test]
    fn folds_partition_orbits() {
        let folds = kfold_split(10, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen: Vec<usize> = folds.iter().flat_map(|f| f.validation.clone()).collect();
        assert!(folds.iter().all(|f| f.validation.len() == 2 && f.train.len() == 8));
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        for f in &folds {
            assert!(f.train.iter().all(|i| !f.validation.contains(i)));
        }
        assert_eq!(folds, kfold_split(10, 5, 3).unwrap());
        assert_ne!(folds, kfold_split(10, 5, 4).unwrap());
        let uneven = kfold_split(7, 3, 0).unwrap();
        let sizes: Vec<usize> = uneven.iter().map(|f| f.validation.len()).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert!(kfold_split(4, 5, 0).is_err());
        assert!(kfold_split(4, 1, 0).is_err());
    }

    #[test]
    fn linear_data_selects_small_flat_loss() {
        let (ds, b, target) = linear_setup(40);
        let data = assemble(&ds, &b, &target).unwrap();
        assert!(data.residual_sum_sq(&b.identity_embedding()) < 1e-12);
        let grid = logspace(1e-4, 1e-1, 4);
        let (mu, res, table) = select_mu(&data, 1e-8, &grid, &TuneOptions::default()).unwrap();
        assert!(res.l_mu <= 1e-4, "L={}", res.l_mu);
        assert!(grid.contains(&mu));
        let ls: Vec<f64> = table.rows.iter().map(|r| r.train_l2.unwrap().sqrt()).collect();
        let (lo, hi) = ls.iter().fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(hi <= lo * 1.1 + 1e-9, "{ls:?}");
    }

    #[test]
    fn single_mu_grid() {
        let (ds, b, target) = linear_setup(20);
        let data = assemble(&ds, &b, &target).unwrap();
        let (mu, _, table) = select_mu(&data, 1e-6, &[3e-2], &TuneOptions::default()).unwrap();
        assert_eq!(mu, 3e-2);
        assert_eq!(table.rows.len(), 1);
        assert!(select_mu(&data, 1e-6, &[], &TuneOptions::default()).is_err());
    }

    #[test]
    fn cv_loss_small_on_linear_data() {
        let (ds, b, target) = linear_setup(40);
        for k in [2, 5] {
            let opts = TuneOptions {
                folds: k,
                ..TuneOptions::default()
            };
            let l = cv_loss(&ds, &b, &target, 1e-8, 1e-3, &opts).unwrap();
            assert!(l > 0.0 && l <= 1e-3, "K={k}: {l}");
        }
    }

    #[test]
    fn sweep_rows_sorted_and_csv() {
        let (ds, b, target) = linear_setup(20);
        let opts = TuneOptions {
            folds: 2,
            ..TuneOptions::default()
        };
        let t = sweep(&ds, &b, &target, Swept::Horizon, &[10.0, 3.0], Fixed::default(), &opts).unwrap();
        assert_eq!(t.rows.iter().map(|r| r.value).collect::<Vec<_>>(), vec![3.0, 10.0]);
        assert!(t.rows.iter().all(|r| r.status == RowStatus::Ok));
        assert!(sweep(&ds, &b, &target, Swept::Horizon, &[11.0], Fixed::default(), &opts).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_table(&t, &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("swept_name,value,mse_term,reg_term,train_L2,cv_L2,status"));
        assert!(lines.next().unwrap().starts_with("P,3.0000000000000000e0,"));
    }

    #[test]
    fn failed_rows_serialize_empty() {
        let t = TuneTable {
            swept: Swept::Beta,
            rows: vec![TuneRow::failed(1.0, "x")],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.csv");
        write_table(&t, &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().nth(1), Some("beta,1.0000000000000000e0,,,,,failed"));
    }

    #[test]
    fn swept_names_round_trip() {
        for s in [Swept::Mu, Swept::Beta, Swept::Horizon] {
            assert_eq!(s.as_str().parse::<Swept>().unwrap(), s);
        }
        assert!("lambda".parse::<Swept>().is_err());
    }
}

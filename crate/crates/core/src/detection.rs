//! Bifurcation detection: sweep the parameter, fit the conjugacy against a
//! fixed reference, and flag parameters where the optimized loss jumps.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::basis::PolyBasis;
use crate::conjugacy::{assemble, fit, FitOptions, FitResult};
use crate::dynamics::{ParamSystem, Provenance, TargetLinearDynamics};
use crate::error::{Error, Result};
use crate::linalg::median;
use crate::sampling::{fmt_f64, generate_dataset, sample_initial, BoxDomain, DatasetSpec, OrbitDataset};
use crate::tuning::{default_mu_grid, select_mu, TuneOptions};

pub const DEFAULT_KAPPA: f64 = 10.0;

/// The case-study sweep −5, −4.8, …, −1.
pub fn default_alpha_grid() -> Vec<f64> {
    alpha_grid(-5.0, -1.0, 0.2)
}

/// Inclusive uniform grid `lo, lo + step, …, hi`.
pub fn alpha_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    if !(step > 0.0) || hi < lo {
        return vec![lo];
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    (0..count).map(|j| lo + j as f64 * step).collect()
}

#[derive(Debug, Clone)]
pub struct DetectionOptions {
    pub alphas: Vec<f64>,
    pub horizons: Vec<usize>,
    pub orbits: usize,
    pub domain: BoxDomain,
    pub seed: u64,
    pub beta: f64,
    pub mu_grid: Vec<f64>,
    /// Use this μ in every cell instead of re-selecting it.
    pub frozen_mu: Option<f64>,
    pub integrator_step: f64,
    pub kappa: f64,
    pub fit: FitOptions,
}

impl Default for DetectionOptions {
    fn default() -> Self {
        Self {
            alphas: default_alpha_grid(),
            horizons: vec![25],
            orbits: 100,
            domain: BoxDomain::symmetric(2, 1.0).expect("unit box"),
            seed: 0,
            beta: 1e-4,
            mu_grid: default_mu_grid(),
            frozen_mu: None,
            integrator_step: 1e-3,
            kappa: DEFAULT_KAPPA,
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub mu_star: f64,
    pub l2: f64,
    /// RMS matching residual, the numerator of `L_μ`.
    pub mse_numerator: f64,
    pub denominator: f64,
    pub status: CellStatus,
}

impl Cell {
    fn failed(why: impl Into<String>) -> Self {
        Self {
            mu_star: f64::NAN,
            l2: f64::NAN,
            mse_numerator: f64::NAN,
            denominator: f64::NAN,
            status: CellStatus::Failed(why.into()),
        }
    }

    fn from_fit(mu: f64, res: &FitResult) -> Self {
        Self {
            mu_star: mu,
            l2: res.l2(),
            mse_numerator: res.rms_residual(),
            denominator: res.denom,
            status: CellStatus::Ok,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }

    pub fn l2(&self) -> Option<f64> {
        self.is_ok().then_some(self.l2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flags {
    /// `per_horizon[p][a]`.
    pub per_horizon: Vec<Vec<bool>>,
    pub majority: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct DetectionCurve {
    pub alphas: Vec<f64>,
    pub horizons: Vec<usize>,
    /// `cells[a][p]`.
    pub cells: Vec<Vec<Cell>>,
    pub target_provenance: Provenance,
    pub baseline_alpha: f64,
    pub flags: Flags,
}

impl DetectionCurve {
    pub fn l2(&self, a: usize, p: usize) -> Option<f64> {
        self.cells[a][p].l2()
    }

    pub fn column(&self, p: usize) -> Vec<Option<f64>> {
        self.cells.iter().map(|row| row[p].l2()).collect()
    }

    pub fn alpha_index(&self, alpha: f64) -> Option<usize> {
        self.alphas.iter().position(|a| (a - alpha).abs() < 1e-9)
    }

    pub fn flagged_alphas(&self) -> Vec<f64> {
        self.alphas
            .iter()
            .zip(&self.flags.majority)
            .filter(|(_, f)| **f)
            .map(|(a, _)| *a)
            .collect()
    }
}

fn run_cell(
    ds: &OrbitDataset,
    p: usize,
    basis: &PolyBasis,
    target: &TargetLinearDynamics,
    opts: &DetectionOptions,
) -> Result<Cell> {
    let data = assemble(&ds.truncate(p)?, basis, target)?;
    match opts.frozen_mu {
        Some(mu) => {
            let res = fit(&data, opts.beta, mu, None, &opts.fit)?;
            if !(res.feasible && res.l_mu.is_finite()) {
                return Err(Error::DegenerateMap);
            }
            Ok(Cell::from_fit(mu, &res))
        }
        None => {
            let tune = TuneOptions {
                fit: opts.fit.clone(),
                ..TuneOptions::default()
            };
            let (mu, res, _) = select_mu(&data, opts.beta, &opts.mu_grid, &tune)?;
            Ok(Cell::from_fit(mu, &res))
        }
    }
}

/// Runs the full (α, P) sweep from one shared set of initial states.
pub fn detect_curve(
    sys: &ParamSystem,
    target: &TargetLinearDynamics,
    basis: &PolyBasis,
    baseline_alpha: f64,
    opts: &DetectionOptions,
) -> Result<DetectionCurve> {
    if opts.alphas.is_empty() || opts.horizons.is_empty() {
        return Err(Error::InvalidInput("alpha grid and horizon list must be nonempty".into()));
    }
    if opts.horizons.contains(&0) {
        return Err(Error::InvalidInput("horizons must be >= 1".into()));
    }
    if sys.param_dim() != 1 {
        return Err(Error::InvalidInput(format!(
            "detection sweeps a scalar parameter, system has {}",
            sys.param_dim()
        )));
    }
    let horizon = *opts.horizons.iter().max().expect("nonempty");
    let inits = sample_initial(&opts.domain, opts.orbits, opts.seed)?;

    let cells: Vec<Vec<Cell>> = opts
        .alphas
        .par_iter()
        .map(|&alpha| {
            let alpha_v = [alpha];
            let spec = DatasetSpec {
                system: sys,
                alpha: &alpha_v,
                domain: &opts.domain,
                seed: opts.seed,
                horizon,
                tau: target.tau(),
                integrator_step: opts.integrator_step,
            };
            let ds = match generate_dataset(&spec, &inits) {
                Ok(ds) => ds,
                Err(e) => {
                    log::warn!("alpha={alpha}: {e}");
                    return vec![Cell::failed(e.to_string()); opts.horizons.len()];
                }
            };
            opts.horizons
                .par_iter()
                .map(|&p| {
                    run_cell(&ds, p, basis, target, opts).unwrap_or_else(|e| {
                        log::warn!("alpha={alpha}, P={p}: {e}");
                        Cell::failed(e.to_string())
                    })
                })
                .collect()
        })
        .collect();

    let mut curve = DetectionCurve {
        alphas: opts.alphas.clone(),
        horizons: opts.horizons.clone(),
        cells,
        target_provenance: target.provenance(),
        baseline_alpha,
        flags: Flags {
            per_horizon: vec![],
            majority: vec![],
        },
    };
    curve.flags = flag_bifurcation(&curve, opts.kappa);
    Ok(curve)
}

/// Indices of the grid half (split at the grid midpoint) containing the
/// baseline parameter.
pub fn baseline_indices(alphas: &[f64], baseline_alpha: f64) -> Vec<usize> {
    let lo = alphas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mid = 0.5 * (lo + hi);
    (0..alphas.len())
        .filter(|&j| {
            if baseline_alpha < mid {
                alphas[j] <= mid
            } else if baseline_alpha > mid {
                alphas[j] >= mid
            } else {
                true
            }
        })
        .collect()
}

/// Flags α where `L★²` exceeds `kappa` times the baseline-half median, per
/// horizon and by majority across horizons.
pub fn flag_bifurcation(curve: &DetectionCurve, kappa: f64) -> Flags {
    let na = curve.alphas.len();
    let base = baseline_indices(&curve.alphas, curve.baseline_alpha);
    let mut per_horizon = Vec::with_capacity(curve.horizons.len());
    let mut any_ok = false;
    for p in 0..curve.horizons.len() {
        let col = curve.column(p);
        let base_vals: Vec<f64> = base.iter().filter_map(|&a| col[a]).collect();
        any_ok |= col.iter().any(Option::is_some);
        let flags = match median(&base_vals) {
            Some(m) => col.iter().map(|v| v.is_some_and(|v| v > kappa * m)).collect(),
            None => vec![false; na],
        };
        per_horizon.push(flags);
    }
    if !any_ok {
        log::warn!("every detection cell failed; no flags raised");
    }
    let majority = (0..na)
        .map(|a| 2 * per_horizon.iter().filter(|f| f[a]).count() > curve.horizons.len())
        .collect();
    Flags { per_horizon, majority }
}

pub const CURVE_HEADER: &str = "alpha,P,mu_star,L2,mse_numerator,denominator,flag,status";

pub fn export_curve(curve: &DetectionCurve, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{CURVE_HEADER}")?;
    for (a, alpha) in curve.alphas.iter().enumerate() {
        for (p, horizon) in curve.horizons.iter().enumerate() {
            let c = &curve.cells[a][p];
            let flag = u8::from(curve.flags.per_horizon.get(p).is_some_and(|f| f[a]));
            if c.is_ok() {
                writeln!(
                    out,
                    "{},{horizon},{},{},{},{},{flag},ok",
                    fmt_f64(*alpha),
                    fmt_f64(c.mu_star),
                    fmt_f64(c.l2),
                    fmt_f64(c.mse_numerator),
                    fmt_f64(c.denominator)
                )?;
            } else {
                writeln!(out, "{},{horizon},,,,,{flag},failed", fmt_f64(*alpha))?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// One parsed row of a detection CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRecord {
    pub alpha: f64,
    pub horizon: usize,
    pub mu_star: Option<f64>,
    pub l2: Option<f64>,
    pub mse_numerator: Option<f64>,
    pub denominator: Option<f64>,
    pub flag: bool,
    pub ok: bool,
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        let no = i + 1;
        if i == 0 {
            if line != CURVE_HEADER {
                return Err(perr(no, format!("unexpected header `{line}`")));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(perr(no, format!("expected 8 fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            s.parse().map(Some).map_err(|_| perr(no, format!("bad number `{s}`")))
        };
        out.push(CurveRecord {
            alpha: num(f[0])?.ok_or_else(|| perr(no, "missing alpha".into()))?,
            horizon: f[1].parse().map_err(|_| perr(no, format!("bad horizon `{}`", f[1])))?,
            mu_star: num(f[2])?,
            l2: num(f[3])?,
            mse_numerator: num(f[4])?,
            denominator: num(f[5])?,
            flag: match f[6] {
                "1" => true,
                "0" => false,
                s => return Err(perr(no, format!("bad flag `{s}`"))),
            },
            ok: match f[7] {
                "ok" => true,
                "failed" => false,
                s => return Err(perr(no, format!("bad status `{s}`"))),
            },
        });
    }
    Ok(out)
}

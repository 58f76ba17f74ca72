use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use bifdetect::conjugacy::assemble;
use bifdetect::detection::{alpha_grid, detect_curve, export_curve, DetectionOptions};
use bifdetect::dynamics::{eigenvalues, resonance_check, JACOBIAN_STEP};
use bifdetect::koopman::{eval_eigenfunction, scan, select_pair, write_grid, write_scan, GridSpec, ScanOptions};
use bifdetect::rng::derive_seed;
use bifdetect::sampling::{fmt_f64, generate_dataset, load_dataset, sample_initial, save_dataset, DatasetSpec, OrbitDataset};
use bifdetect::tuning::{select_mu, sweep, write_table, Fixed, Swept, TuneOptions};
use bifdetect::{Error, ParamSystem, PolyBasis, TargetLinearDynamics};
use nalgebra::DMatrix;

use crate::config::{RunConfig, TargetMode};
use crate::target_file;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_SPECTRUM: u8 = 4;
pub const EXIT_TUNE: u8 = 5;
pub const EXIT_DETECT: u8 = 6;
pub const EXIT_COMPLEX: u8 = 7;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::new(EXIT_CONFIG, msg)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

/// Default exit class for a library error.
fn code_of(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => EXIT_CONFIG,
        Error::OrbitDivergence { .. } | Error::DatasetDivergence { .. } => EXIT_DIVERGENCE,
        Error::SpectrumIdentification(_) => EXIT_SPECTRUM,
        Error::Tuning(_) => EXIT_TUNE,
        Error::UnsupportedSpectrum(_) => EXIT_COMPLEX,
        _ => EXIT_OTHER,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(code_of(&e), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_OTHER, e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Seed for every simulated orbit set, shared by all commands so that
/// `simulate` and `detect` see the same initial states.
pub fn data_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "dataset")
}

/// Built-in systems: `pitchfork` and `linear:a11,a12,...` (row-major).
pub fn system(cfg: &RunConfig) -> CliResult<ParamSystem> {
    if cfg.system == "pitchfork" {
        return Ok(ParamSystem::pitchfork());
    }
    if let Some(rest) = cfg.system.strip_prefix("linear:") {
        let entries: Vec<f64> = rest
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::config(format!("system: bad matrix entries {rest:?}")))?;
        let n = (entries.len() as f64).sqrt().round() as usize;
        if n == 0 || n * n != entries.len() {
            return Err(CliError::config(format!("system: {} entries do not form a square matrix", entries.len())));
        }
        return Ok(ParamSystem::linear(DMatrix::from_row_slice(n, n, &entries)));
    }
    Err(CliError::config(format!("system: unknown system {:?}", cfg.system)))
}

fn check_dims(cfg: &RunConfig, sys: &ParamSystem) -> CliResult<()> {
    if cfg.domain.dim() != sys.state_dim() {
        return Err(CliError::config(format!(
            "box has dimension {}, system {} has {}",
            cfg.domain.dim(),
            sys.name(),
            sys.state_dim()
        )));
    }
    Ok(())
}

fn basis(cfg: &RunConfig, n: usize) -> CliResult<PolyBasis> {
    PolyBasis::new(n, cfg.degree).map_err(|e| CliError::config(format!("d: {e}")))
}

fn out_path(cfg: &RunConfig, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(&cfg.out)?;
    Ok(cfg.out.join(name))
}

fn simulate_at(cfg: &RunConfig, sys: &ParamSystem, inits: &[Vec<f64>], alpha: f64) -> CliResult<OrbitDataset> {
    let alpha_v = [alpha];
    let spec = DatasetSpec {
        system: sys,
        alpha: &alpha_v,
        domain: &cfg.domain,
        seed: data_seed(cfg),
        horizon: cfg.max_horizon(),
        tau: cfg.tau,
        integrator_step: cfg.integrator_step,
    };
    generate_dataset(&spec, inits).map_err(|e| {
        let code = code_of(&e);
        CliError::new(code, format!("alpha={alpha}: {e}"))
    })
}

pub fn dataset_name(alpha: f64) -> String {
    format!("dataset_alpha{alpha:.4}.csv")
}

pub fn cmd_simulate(cfg: &RunConfig) -> CliResult<()> {
    let sys = system(cfg)?;
    check_dims(cfg, &sys)?;
    let inits = sample_initial(&cfg.domain, cfg.m, data_seed(cfg))?;
    for alpha in alpha_grid(cfg.alpha_lo, cfg.alpha_hi, cfg.alpha_step) {
        let ds = simulate_at(cfg, &sys, &inits, alpha)?;
        let path = out_path(cfg, &dataset_name(alpha))?;
        save_dataset(&ds, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn scan_options(cfg: &RunConfig) -> ScanOptions {
    ScanOptions {
        lambda_lo: cfg.lambda_lo,
        lambda_hi: cfg.lambda_hi,
        steps: cfg.lambda_steps,
        sparsify: cfg.sparsify,
    }
}

fn load(path: &Path) -> CliResult<OrbitDataset> {
    load_dataset(path).map_err(|e| CliError::new(EXIT_OTHER, format!("dataset {}: {e}", path.display())))
}

pub fn cmd_koopman(cfg: &RunConfig, dataset: &Path) -> CliResult<()> {
    let ds = load(dataset)?;
    let b = basis(cfg, ds.state_dim())?;
    let s = scan(&ds, &b, &scan_options(cfg))?;
    let scan_path = out_path(cfg, "koopman_scan.csv")?;
    write_scan(&s, &scan_path)?;
    println!("{}", scan_path.display());
    let lambdas: Vec<String> = s.minima_lambdas().iter().map(|l| format!("{l:.4}")).collect();
    println!("minima: {}", lambdas.join(" "));
    let target = select_pair(&s)?;

    if ds.state_dim() == 2 {
        let bounds = ds.domain.bounds();
        let grid = GridSpec {
            x: (bounds[0].0, bounds[0].1, cfg.grid_n),
            y: (bounds[1].0, bounds[1].1, cfg.grid_n),
        };
        let ends = [s.minima[0], *s.minima.last().expect("two minima")];
        for (slot, &j) in ends.iter().enumerate() {
            let values = eval_eigenfunction(&s.coeffs[j], &b, &grid)?;
            let path = out_path(cfg, &format!("eigenfunction_{}.csv", slot + 1))?;
            write_grid(&values, &path)?;
            println!("{}", path.display());
        }
    } else {
        log::warn!("eigenfunction grids are only written for planar systems");
    }

    let path = out_path(cfg, "target.txt")?;
    target_file::write(&target, &path)?;
    println!("{}", path.display());
    let a = target.a();
    println!("selected A = diag({}, {})", fmt_f64(a[(0, 0)]), fmt_f64(a[(a.nrows() - 1, a.ncols() - 1)]));
    Ok(())
}

/// Builds the reference dynamics the config asks for when no target file is given.
fn build_target(cfg: &RunConfig, sys: &ParamSystem) -> CliResult<TargetLinearDynamics> {
    match cfg.target {
        TargetMode::ModelAware => Ok(sys.linearize_diag(&[cfg.alpha0], cfg.tau)?),
        TargetMode::Koopman => {
            check_dims(cfg, sys)?;
            let inits = sample_initial(&cfg.domain, cfg.m, data_seed(cfg))?;
            let ds = simulate_at(cfg, sys, &inits, cfg.alpha0)?;
            let b = basis(cfg, ds.state_dim())?;
            Ok(select_pair(&scan(&ds, &b, &scan_options(cfg))?)?)
        }
    }
}

fn resolve_target(cfg: &RunConfig, sys: &ParamSystem, file: Option<&Path>) -> CliResult<TargetLinearDynamics> {
    let target = match file {
        Some(p) => target_file::read(p).map_err(|e| CliError::new(EXIT_OTHER, e))?,
        None => build_target(cfg, sys)?,
    };
    if (target.tau() - cfg.tau).abs() > 1e-12 * cfg.tau {
        return Err(CliError::config(format!("tau {} differs from the target's tau {}", cfg.tau, target.tau())));
    }
    if target.dim() != sys.state_dim() {
        return Err(CliError::config(format!(
            "target has dimension {}, system has {}",
            target.dim(),
            sys.state_dim()
        )));
    }
    Ok(target)
}

pub fn cmd_tune(cfg: &RunConfig, dataset: &Path, target: Option<&Path>) -> CliResult<()> {
    let ds = load(dataset)?;
    let as_tune = |e: Error| match code_of(&e) {
        EXIT_CONFIG => CliError::config(e.to_string()),
        _ => CliError::new(EXIT_TUNE, e.to_string()),
    };
    let sys = system(&RunConfig {
        system: ds.system.clone(),
        ..cfg.clone()
    })?;
    let target = resolve_target(cfg, &sys, target)?;
    let b = basis(cfg, ds.state_dim())?;
    let opts = TuneOptions {
        folds: cfg.folds,
        seed: cfg.seed,
        ..TuneOptions::default()
    };

    let data = assemble(&ds, &b, &target).map_err(as_tune)?;
    let (mu_star, _, _) = select_mu(&data, cfg.beta, &cfg.mu_values(), &opts).map_err(as_tune)?;
    println!("mu* = {}", fmt_f64(mu_star));

    let fixed = Fixed {
        beta: cfg.beta,
        mu: cfg.mu,
    };
    let horizons: Vec<f64> = cfg.horizons.iter().map(|&p| p as f64).collect();
    for (which, grid) in [
        (Swept::Mu, cfg.mu_values()),
        (Swept::Beta, cfg.beta_values()),
        (Swept::Horizon, horizons),
    ] {
        let table = sweep(&ds, &b, &target, which, &grid, fixed, &opts).map_err(as_tune)?;
        let path = out_path(cfg, &format!("tune_{}.csv", which.as_str()))?;
        write_table(&table, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

pub fn cmd_detect(cfg: &RunConfig, target: Option<&Path>) -> CliResult<()> {
    let sys = system(cfg)?;
    check_dims(cfg, &sys)?;
    let target = resolve_target(cfg, &sys, target)?;
    let b = basis(cfg, sys.state_dim())?;
    let opts = DetectionOptions {
        alphas: alpha_grid(cfg.alpha_lo, cfg.alpha_hi, cfg.alpha_step),
        horizons: cfg.horizons.clone(),
        orbits: cfg.m,
        domain: cfg.domain.clone(),
        seed: data_seed(cfg),
        beta: cfg.beta,
        mu_grid: cfg.mu_values(),
        frozen_mu: cfg.frozen_mu,
        integrator_step: cfg.integrator_step,
        kappa: cfg.kappa,
        ..DetectionOptions::default()
    };
    let curve = detect_curve(&sys, &target, &b, cfg.alpha0, &opts).map_err(|e| match code_of(&e) {
        EXIT_CONFIG => CliError::config(e.to_string()),
        _ => CliError::new(EXIT_DETECT, e.to_string()),
    })?;
    let path = out_path(cfg, "detection.csv")?;
    export_curve(&curve, &path)?;
    println!("{}", path.display());

    if curve.cells.iter().flatten().all(|c| !c.is_ok()) {
        return Err(CliError::new(EXIT_DETECT, "every (alpha, P) cell failed"));
    }
    let last = curve.horizons.len() - 1;
    let flagged = curve.flagged_alphas();
    if flagged.is_empty() {
        println!("no bifurcation flagged");
    }
    for alpha in flagged {
        let a = curve.alpha_index(alpha).expect("flagged alpha is on the grid");
        let l2 = curve.l2(a, last).map(fmt_f64).unwrap_or_else(|| "failed".into());
        println!("flagged alpha={alpha:.4} L2(P={})={l2}", curve.horizons[last]);
    }
    Ok(())
}

pub fn cmd_resonance(cfg: &RunConfig) -> CliResult<()> {
    let sys = system(cfg)?;
    let origin = vec![0.0; sys.state_dim()];
    let jac = sys.jacobian_at(&origin, &[cfg.alpha0], JACOBIAN_STEP)?;
    let eigs = eigenvalues(&jac);
    let listed: Vec<String> = eigs
        .iter()
        .map(|e| if e.im == 0.0 { fmt_f64(e.re) } else { format!("{}{:+e}i", fmt_f64(e.re), e.im) })
        .collect();
    println!("eigenvalues at alpha0={}: {}", cfg.alpha0, listed.join(" "));
    let scale = 1.0 + eigs.iter().map(|e| e.norm()).fold(0.0, f64::max);
    if eigs.iter().any(|e| e.im.abs() > 1e-10 * scale) {
        return Err(CliError::new(EXIT_COMPLEX, "complex spectrum: the resonance check needs real eigenvalues"));
    }
    let order = cfg.degree.max(2);
    let report = resonance_check(&eigs, order, cfg.resonance_c, cfg.resonance_nu);
    if report.violations.is_empty() {
        println!("no resonances up to order {order} (C={}, nu={})", cfg.resonance_c, cfg.resonance_nu);
    }
    for v in &report.violations {
        let m: Vec<String> = v.m.iter().map(u32::to_string).collect();
        println!("resonance k={} m=({}) gap={}", v.k + 1, m.join(","), fmt_f64(v.gap));
    }
    Ok(())
}

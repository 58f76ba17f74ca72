//! Run configuration: `key = value` files plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use bifdetect::linalg::logspace;
use bifdetect::BoxDomain;

/// Every accepted key with a one-line description, in `--help` order.
pub const KEYS: &[(&str, &str)] = &[
    ("system", "pitchfork or linear:a11,a12,...  [pitchfork]"),
    ("alpha0", "reference parameter  [-4]"),
    ("alpha_lo", "parameter grid start  [-5]"),
    ("alpha_hi", "parameter grid end  [-1]"),
    ("alpha_step", "parameter grid step  [0.2]"),
    ("box", "sampling box lo1,hi1,lo2,hi2,...  [-1,1,-1,1]"),
    ("M", "number of orbits  [100]"),
    ("P", "comma-separated horizons; the largest is simulated  [5,10,15,20,25]"),
    ("tau", "sampling interval  [0.1]"),
    ("d", "polynomial degree  [5]"),
    ("beta", "ridge weight  [1e-4]"),
    ("mu", "barrier weight for the beta and P sweeps  [1e-3]"),
    ("mu_lo", "smallest mu on the selection grid  [1e-6]"),
    ("mu_hi", "largest mu on the selection grid  [1]"),
    ("mu_count", "points on the mu grid  [13]"),
    ("beta_lo", "smallest beta on the sweep grid  [1e-8]"),
    ("beta_hi", "largest beta on the sweep grid  [1e-1]"),
    ("beta_count", "points on the beta grid  [15]"),
    ("K", "cross-validation folds  [5]"),
    ("seed", "master seed  [0]"),
    ("kappa", "flagging ratio over the baseline median  [10]"),
    ("frozen_mu", "use this mu in every detection cell  [unset]"),
    ("integrator_step", "RK4 step  [1e-3]"),
    ("target_mode", "model-aware or koopman  [model-aware]"),
    ("out", "output directory  [.]"),
    ("lambda_lo", "Koopman scan start  [-5]"),
    ("lambda_hi", "Koopman scan end  [-0.1]"),
    ("lambda_steps", "Koopman scan points  [491]"),
    ("sparsify", "prune small eigenfunction coefficients  [false]"),
    ("grid_n", "eigenfunction grid points per axis  [41]"),
    ("resonance_c", "resonance tolerance constant  [1e-6]"),
    ("resonance_nu", "resonance tolerance exponent  [1]"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    ModelAware,
    Koopman,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system: String,
    pub alpha0: f64,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    pub alpha_step: f64,
    pub domain: BoxDomain,
    pub m: usize,
    pub horizons: Vec<usize>,
    pub tau: f64,
    pub degree: u32,
    pub beta: f64,
    pub mu: f64,
    pub mu_grid: (f64, f64, usize),
    pub beta_grid: (f64, f64, usize),
    pub folds: usize,
    pub seed: u64,
    pub kappa: f64,
    pub frozen_mu: Option<f64>,
    pub integrator_step: f64,
    pub target: TargetMode,
    pub out: PathBuf,
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub lambda_steps: usize,
    pub sparsify: bool,
    pub grid_n: usize,
    pub resonance_c: f64,
    pub resonance_nu: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: "pitchfork".into(),
            alpha0: -4.0,
            alpha_lo: -5.0,
            alpha_hi: -1.0,
            alpha_step: 0.2,
            domain: BoxDomain::symmetric(2, 1.0).expect("unit box"),
            m: 100,
            horizons: vec![5, 10, 15, 20, 25],
            tau: 0.1,
            degree: 5,
            beta: 1e-4,
            mu: 1e-3,
            mu_grid: (1e-6, 1.0, 13),
            beta_grid: (1e-8, 1e-1, 15),
            folds: 5,
            seed: 0,
            kappa: 10.0,
            frozen_mu: None,
            integrator_step: 1e-3,
            target: TargetMode::ModelAware,
            out: PathBuf::from("."),
            lambda_lo: -5.0,
            lambda_hi: -0.1,
            lambda_steps: 491,
            sparsify: false,
            grid_n: 41,
            resonance_c: 1e-6,
            resonance_nu: 1.0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

impl RunConfig {
    /// Reads `key = value` lines; `#` starts a comment.
    pub fn parse_file(path: &Path) -> Result<Vec<(String, String)>, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("config {}: {e}", path.display()))?;
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(format!("config {}:{}: expected key = value", path.display(), n + 1));
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(pairs)
    }

    /// Applies pairs in order, so later ones win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, String> {
        let mut c = RunConfig::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "system" => self.system = v.to_string(),
            "alpha0" => self.alpha0 = num(key, v)?,
            "alpha_lo" => self.alpha_lo = num(key, v)?,
            "alpha_hi" => self.alpha_hi = num(key, v)?,
            "alpha_step" => self.alpha_step = num(key, v)?,
            "box" => {
                let b: Vec<f64> = list(key, v)?;
                if b.is_empty() || b.len() % 2 != 0 {
                    return Err(format!("box: expected lo,hi pairs, got {v:?}"));
                }
                let bounds = b.chunks(2).map(|c| (c[0], c[1])).collect();
                self.domain = BoxDomain::new(bounds).map_err(|e| format!("box: {e}"))?;
            }
            "M" => self.m = num(key, v)?,
            "P" => self.horizons = list(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "d" => self.degree = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "mu" => self.mu = num(key, v)?,
            "mu_lo" => self.mu_grid.0 = num(key, v)?,
            "mu_hi" => self.mu_grid.1 = num(key, v)?,
            "mu_count" => self.mu_grid.2 = num(key, v)?,
            "beta_lo" => self.beta_grid.0 = num(key, v)?,
            "beta_hi" => self.beta_grid.1 = num(key, v)?,
            "beta_count" => self.beta_grid.2 = num(key, v)?,
            "K" => self.folds = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "kappa" => self.kappa = num(key, v)?,
            "frozen_mu" => self.frozen_mu = if v.is_empty() { None } else { Some(num(key, v)?) },
            "integrator_step" => self.integrator_step = num(key, v)?,
            "target_mode" => {
                self.target = match v {
                    "model-aware" => TargetMode::ModelAware,
                    "koopman" => TargetMode::Koopman,
                    _ => return Err(format!("target_mode: expected model-aware or koopman, got {v:?}")),
                }
            }
            "out" => self.out = PathBuf::from(v),
            "lambda_lo" => self.lambda_lo = num(key, v)?,
            "lambda_hi" => self.lambda_hi = num(key, v)?,
            "lambda_steps" => self.lambda_steps = num(key, v)?,
            "sparsify" => self.sparsify = num(key, v)?,
            "grid_n" => self.grid_n = num(key, v)?,
            "resonance_c" => self.resonance_c = num(key, v)?,
            "resonance_nu" => self.resonance_nu = num(key, v)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive and finite, got {v}"))
            }
        };
        positive("tau", self.tau)?;
        positive("alpha_step", self.alpha_step)?;
        positive("beta", self.beta)?;
        positive("mu", self.mu)?;
        positive("mu_lo", self.mu_grid.0)?;
        positive("mu_hi", self.mu_grid.1)?;
        positive("beta_lo", self.beta_grid.0)?;
        positive("beta_hi", self.beta_grid.1)?;
        positive("kappa", self.kappa)?;
        positive("integrator_step", self.integrator_step)?;
        positive("resonance_c", self.resonance_c)?;
        if let Some(mu) = self.frozen_mu {
            positive("frozen_mu", mu)?;
        }
        if !(self.resonance_nu >= 0.0) {
            return Err(format!("resonance_nu must be >= 0, got {}", self.resonance_nu));
        }
        if self.degree < 1 {
            return Err("d must be >= 1".into());
        }
        if self.m < 1 {
            return Err("M must be >= 1".into());
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err("P must list horizons >= 1".into());
        }
        if self.folds < 2 {
            return Err(format!("K must be >= 2, got {}", self.folds));
        }
        if self.mu_grid.2 < 1 || self.beta_grid.2 < 1 {
            return Err("mu_count and beta_count must be >= 1".into());
        }
        if self.mu_grid.0 > self.mu_grid.1 || self.beta_grid.0 > self.beta_grid.1 {
            return Err("grid lower ends must not exceed upper ends".into());
        }
        if self.alpha_lo > self.alpha_hi {
            return Err(format!("alpha_lo {} exceeds alpha_hi {}", self.alpha_lo, self.alpha_hi));
        }
        if !(self.lambda_lo < self.lambda_hi) || self.lambda_steps < 3 {
            return Err("lambda scan needs lambda_lo < lambda_hi and lambda_steps >= 3".into());
        }
        if self.grid_n < 1 {
            return Err("grid_n must be >= 1".into());
        }
        Ok(())
    }

    pub fn max_horizon(&self) -> usize {
        *self.horizons.iter().max().expect("validated nonempty")
    }

    pub fn mu_values(&self) -> Vec<f64> {
        logspace(self.mu_grid.0, self.mu_grid.1, self.mu_grid.2)
    }

    pub fn beta_values(&self) -> Vec<f64> {
        logspace(self.beta_grid.0, self.beta_grid.1, self.beta_grid.2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::from_pairs(&[]).unwrap();
        assert_eq!(c.max_horizon(), 25);
        assert_eq!(c.mu_values().len(), 13);
        assert_eq!(c.beta_values().len(), 15);
        assert_eq!(KEYS.len(), 32);
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let c = RunConfig::default();
        let samples = [
            ("system", "pitchfork"), ("box", "-1,1,-1,1"), ("P", "25"), ("target_mode", "koopman"),
            ("out", "x"), ("sparsify", "true"), ("frozen_mu", "0.001"), ("seed", "3"),
        ];
        for (k, _) in KEYS {
            let v = samples.iter().find(|(s, _)| s == k).map(|(_, v)| *v).unwrap_or("7");
            c.clone().set(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn later_values_win() {
        let c = RunConfig::from_pairs(&pairs(&[("tau", "0.2"), ("tau", "0.05")])).unwrap();
        assert_eq!(c.tau, 0.05);
    }

    #[test]
    fn rejects_bad_values() {
        for (k, v) in [("tau", "0"), ("d", "0"), ("M", "0"), ("P", "0,5"), ("K", "1"), ("box", "1,0"), ("target_mode", "x")] {
            let err = RunConfig::from_pairs(&pairs(&[(k, v)])).unwrap_err();
            assert!(err.contains(k), "{k}: {err}");
        }
        assert!(RunConfig::from_pairs(&pairs(&[("colour", "blue")])).unwrap_err().contains("colour"));
    }

    #[test]
    fn file_dialect() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# case study\nalpha0 = -4\n\nP = 5, 25  # horizons\n").unwrap();
        let p = RunConfig::parse_file(&path).unwrap();
        assert_eq!(p, pairs(&[("alpha0", "-4"), ("P", "5, 25")]));
        assert_eq!(RunConfig::from_pairs(&p).unwrap().horizons, vec![5, 25]);
        fs::write(&path, "tau 0.1\n").unwrap();
        assert!(RunConfig::parse_file(&path).unwrap_err().contains(":1:"));
    }
}

//! Orbit datasets: generation, persistence and slicing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::dynamics::ParamSystem;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Axis-aligned sampling box, one `(lo, hi)` pair per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxDomain {
    bounds: Vec<(f64, f64)>,
}

impl BoxDomain {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::InvalidInput("sampling box has no axes".into()));
        }
        for (r, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "sampling box axis {r} is degenerate: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { bounds })
    }

    /// `[-half, half]^n`.
    pub fn symmetric(n: usize, half: f64) -> Result<Self> {
        Self::new(vec![(-half, half); n])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.bounds).all(|(&v, &(lo, hi))| lo <= v && v <= hi)
    }
}

/// `m` points drawn uniformly and independently per axis. Each point consumes
/// one draw per coordinate in order.
pub fn sample_initial(domain: &BoxDomain, m: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if m == 0 {
        return Err(Error::InvalidInput("initial point count must be >= 1".into()));
    }
    let mut rng = SplitMix64::new(seed);
    Ok((0..m)
        .map(|_| domain.bounds.iter().map(|&(lo, hi)| rng.uniform(lo, hi)).collect())
        .collect())
}

/// `M` orbits of `P + 1` states sampled every `tau` under a fixed parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitDataset {
    /// Row-major `M × (P+1) × n`.
    states: Vec<f64>,
    n: usize,
    m: usize,
    p: usize,
    pub system: String,
    pub alpha: Vec<f64>,
    pub tau: f64,
    pub domain: BoxDomain,
    pub seed: u64,
    pub integrator_step: f64,
}

impl OrbitDataset {
    pub fn orbit_count(&self) -> usize {
        self.m
    }

    /// Transitions per orbit, `P`.
    pub fn horizon(&self) -> usize {
        self.p
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// `x_k^{(i)}`.
    pub fn state(&self, i: usize, k: usize) -> &[f64] {
        assert!(i < self.m && k <= self.p);
        let off = (i * (self.p + 1) + k) * self.n;
        &self.states[off..off + self.n]
    }

    pub fn orbit(&self, i: usize) -> impl Iterator<Item = &[f64]> {
        (0..=self.p).map(move |k| self.state(i, k))
    }

    /// Dataset restricted to the given orbits, in the given order.
    pub fn select_orbits(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::InvalidInput("orbit selection is empty".into()));
        }
        let stride = (self.p + 1) * self.n;
        let mut states = Vec::with_capacity(idx.len() * stride);
        for &i in idx {
            if i >= self.m {
                return Err(Error::InvalidInput(format!("orbit index {i} out of range")));
            }
            states.extend_from_slice(&self.states[i * stride..(i + 1) * stride]);
        }
        Ok(Self {
            states,
            m: idx.len(),
            ..self.clone_meta()
        })
    }

    /// Dataset keeping the first `p` transitions of every orbit.
    pub fn truncate(&self, p: usize) -> Result<Self> {
        if p == 0 || p > self.p {
            return Err(Error::InvalidInput(format!(
                "cannot truncate horizon {} to {p}",
                self.p
            )));
        }
        let stride = (self.p + 1) * self.n;
        let keep = (p + 1) * self.n;
        let mut states = Vec::with_capacity(self.m * keep);
        for i in 0..self.m {
            states.extend_from_slice(&self.states[i * stride..i * stride + keep]);
        }
        Ok(Self {
            states,
            p,
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> Self {
        Self {
            states: Vec::new(),
            n: self.n,
            m: self.m,
            p: self.p,
            system: self.system.clone(),
            alpha: self.alpha.clone(),
            tau: self.tau,
            domain: self.domain.clone(),
            seed: self.seed,
            integrator_step: self.integrator_step,
        }
    }

    /// Largest `‖x_k - S^τ(x_{k-1})‖₂` over all stored transitions.
    pub fn max_transition_error(&self, sys: &ParamSystem) -> Result<f64> {
        let mut worst = 0.0f64;
        for i in 0..self.m {
            for k in 1..=self.p {
                let next = sys.flow(self.state(i, k - 1), &self.alpha, self.tau, self.integrator_step)?;
                let err = next
                    .iter()
                    .zip(self.state(i, k))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(err);
            }
        }
        Ok(worst)
    }
}

/// Everything needed to build an [`OrbitDataset`] besides the initial states.
#[derive(Debug, Clone)]
pub struct DatasetSpec<'a> {
    pub system: &'a ParamSystem,
    pub alpha: &'a [f64],
    pub domain: &'a BoxDomain,
    pub seed: u64,
    pub horizon: usize,
    pub tau: f64,
    pub integrator_step: f64,
}

/// Advances every initial state `P` times by the sampled flow.
pub fn generate_dataset(spec: &DatasetSpec<'_>, inits: &[Vec<f64>]) -> Result<OrbitDataset> {
    let sys = spec.system;
    let n = sys.state_dim();
    if spec.horizon == 0 {
        return Err(Error::InvalidInput("horizon P must be >= 1".into()));
    }
    if !(spec.tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau must be > 0, got {}", spec.tau)));
    }
    if inits.is_empty() {
        return Err(Error::InvalidInput("no initial states".into()));
    }
    if spec.domain.dim() != n {
        return Err(Error::InvalidInput("sampling box dimension differs from the system".into()));
    }
    let orbits: Vec<Result<Vec<f64>>> = inits
        .par_iter()
        .enumerate()
        .map(|(i, x0)| {
            if x0.len() != n {
                return Err(Error::InvalidInput(format!("initial state {i} has wrong length")));
            }
            let mut out = Vec::with_capacity((spec.horizon + 1) * n);
            out.extend_from_slice(x0);
            let mut x = x0.clone();
            for k in 0..spec.horizon {
                x = sys
                    .flow(&x, spec.alpha, spec.tau, spec.integrator_step)
                    .map_err(|e| match e {
                        Error::OrbitDivergence { time, .. } => Error::DatasetDivergence {
                            orbit: i,
                            time: k as f64 * spec.tau + time,
                        },
                        other => other,
                    })?;
                out.extend_from_slice(&x);
            }
            Ok(out)
        })
        .collect();
    let mut states = Vec::with_capacity(inits.len() * (spec.horizon + 1) * n);
    for o in orbits {
        states.extend(o?);
    }
    Ok(OrbitDataset {
        states,
        n,
        m: inits.len(),
        p: spec.horizon,
        system: sys.name().to_string(),
        alpha: spec.alpha.to_vec(),
        tau: spec.tau,
        domain: spec.domain.clone(),
        seed: spec.seed,
        integrator_step: spec.integrator_step,
    })
}

/// Sidecar path: the dataset path with its extension replaced by `.meta`.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta")
}

/// Shortest-round-trip-safe text: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(fmt_f64).collect::<Vec<_>>().join(",")
}

pub fn save_dataset(ds: &OrbitDataset, path: &Path) -> Result<()> {
    let mut csv = String::new();
    csv.push_str("orbit_id,step");
    for r in 1..=ds.n {
        write!(csv, ",x{r}").unwrap();
    }
    csv.push('\n');
    for i in 0..ds.m {
        for k in 0..=ds.p {
            write!(csv, "{i},{k}").unwrap();
            for v in ds.state(i, k) {
                write!(csv, ",{}", fmt_f64(*v)).unwrap();
            }
            csv.push('\n');
        }
    }
    fs::write(path, csv)?;

    let mut meta = String::new();
    writeln!(meta, "system={}", ds.system).unwrap();
    writeln!(meta, "alpha={}", join(ds.alpha.iter().copied())).unwrap();
    writeln!(meta, "tau={}", fmt_f64(ds.tau)).unwrap();
    writeln!(meta, "M={}", ds.m).unwrap();
    writeln!(meta, "P={}", ds.p).unwrap();
    writeln!(meta, "seed={}", ds.seed).unwrap();
    writeln!(
        meta,
        "box={}",
        join(ds.domain.bounds().iter().flat_map(|&(lo, hi)| [lo, hi]))
    )
    .unwrap();
    writeln!(meta, "integrator_step={}", fmt_f64(ds.integrator_step)).unwrap();
    fs::write(meta_path(path), meta)?;
    Ok(())
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_list(path: &Path, line: usize, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("{key}: bad number {s:?}")))
        })
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<OrbitDataset> {
    let mpath = meta_path(path);
    let meta_text = fs::read_to_string(&mpath)?;
    let mut system = None;
    let mut alpha = None;
    let mut tau = None;
    let mut m = None;
    let mut p = None;
    let mut seed = None;
    let mut bounds = None;
    let mut step = None;
    for (ln, raw) in meta_text.lines().enumerate() {
        let line = ln + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (key, val) = raw
            .split_once('=')
            .ok_or_else(|| parse_err(&mpath, line, "expected key=value"))?;
        let val = val.trim();
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| parse_err(&mpath, line, format!("{key}: bad number {s:?}")))
        };
        let int = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| parse_err(&mpath, line, format!("{key}: bad integer {s:?}")))
        };
        match key.trim() {
            "system" => system = Some(val.to_string()),
            "alpha" => alpha = Some(parse_list(&mpath, line, key, val)?),
            "tau" => tau = Some(num(val)?),
            "M" => m = Some(int(val)? as usize),
            "P" => p = Some(int(val)? as usize),
            "seed" => seed = Some(int(val)?),
            "box" => bounds = Some(parse_list(&mpath, line, key, val)?),
            "integrator_step" => step = Some(num(val)?),
            other => return Err(parse_err(&mpath, line, format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::Consistency(format!("{}: missing key {k}", mpath.display()));
    let (m, p) = (m.ok_or_else(|| missing("M"))?, p.ok_or_else(|| missing("P"))?);
    let bounds = bounds.ok_or_else(|| missing("box"))?;
    if bounds.len() % 2 != 0 {
        return Err(Error::Consistency("box must list lo,hi pairs".into()));
    }
    let domain = BoxDomain::new(bounds.chunks(2).map(|c| (c[0], c[1])).collect())?;

    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?
        .1;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "orbit_id" || cols[1] != "step" {
        return Err(parse_err(path, 1, "header must start with orbit_id,step"));
    }
    let n = cols.len() - 2;
    for (r, c) in cols[2..].iter().enumerate() {
        if *c != format!("x{}", r + 1) {
            return Err(parse_err(path, 1, format!("unexpected column {c:?}")));
        }
    }
    if n != domain.dim() {
        return Err(Error::Consistency(format!(
            "dataset has {n} state columns but the box has {} axes",
            domain.dim()
        )));
    }
    if !text.ends_with('\n') {
        return Err(parse_err(path, text.lines().count(), "file does not end with a newline (truncated?)"));
    }
    let mut states = Vec::with_capacity(m * (p + 1) * n);
    let mut rows = 0usize;
    for (ln, raw) in lines {
        let line = ln + 1;
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != n + 2 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", n + 2, fields.len())));
        }
        let (ei, ek) = (rows / (p + 1), rows % (p + 1));
        let oid: usize = fields[0].parse().map_err(|_| parse_err(path, line, "bad orbit_id"))?;
        let step_id: usize = fields[1].parse().map_err(|_| parse_err(path, line, "bad step"))?;
        if (oid, step_id) != (ei, ek) {
            return Err(parse_err(
                path,
                line,
                format!("expected row ({ei},{ek}), found ({oid},{step_id})"),
            ));
        }
        for f in &fields[2..] {
            states.push(
                f.parse::<f64>()
                    .map_err(|_| parse_err(path, line, format!("bad number {f:?}")))?,
            );
        }
        rows += 1;
    }
    if rows != m * (p + 1) {
        return Err(Error::Consistency(format!(
            "metadata promises M*(P+1) = {} rows, file has {rows}",
            m * (p + 1)
        )));
    }
    Ok(OrbitDataset {
        states,
        n,
        m,
        p,
        system: system.ok_or_else(|| missing("system"))?,
        alpha: alpha.ok_or_else(|| missing("alpha"))?,
        tau: tau.ok_or_else(|| missing("tau"))?,
        domain,
        seed: seed.ok_or_else(|| missing("seed"))?,
        integrator_step: step.ok_or_else(|| missing("integrator_step"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn unit_box() -> BoxDomain {
        BoxDomain::symmetric(2, 1.0).unwrap()
    }

    fn small(sys: &ParamSystem, alpha: &[f64], m: usize, p: usize) -> OrbitDataset {
        let domain = unit_box();
        let inits = sample_initial(&domain, m, 11).unwrap();
        let spec = DatasetSpec {
            system: sys,
            alpha,
            domain: &domain,
            seed: 11,
            horizon: p,
            tau: 0.1,
            integrator_step: 1e-3,
        };
        generate_dataset(&spec, &inits).unwrap()
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(BoxDomain::new(vec![(0.0, 0.0), (0.0, 0.0)]).is_err());
        assert!(BoxDomain::new(vec![(1.0, -1.0)]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_inside() {
        let d = unit_box();
        let a = sample_initial(&d, 100, 42).unwrap();
        assert_eq!(a, sample_initial(&d, 100, 42).unwrap());
        assert_ne!(a, sample_initial(&d, 100, 43).unwrap());
        assert!(a.iter().all(|x| d.contains(x)));
        assert!(sample_initial(&d, 0, 42).is_err());
    }

    #[test]
    fn sampling_mean() {
        let pts = sample_initial(&unit_box(), 10_000, 5).unwrap();
        for r in 0..2 {
            let mean = pts.iter().map(|x| x[r]).sum::<f64>() / pts.len() as f64;
            assert!(mean.abs() < 0.05, "axis {r} mean {mean}");
        }
    }

    #[test]
    fn scalar_decay_orbit() {
        let sys = ParamSystem::linear(dmatrix![-1.0]);
        let domain = BoxDomain::symmetric(1, 1.0).unwrap();
        let spec = DatasetSpec {
            system: &sys,
            alpha: &[0.0],
            domain: &domain,
            seed: 0,
            horizon: 2,
            tau: 0.1,
            integrator_step: 1e-3,
        };
        let ds = generate_dataset(&spec, &[vec![1.0]]).unwrap();
        let orbit: Vec<f64> = ds.orbit(0).map(|s| s[0]).collect();
        for (k, v) in orbit.iter().enumerate() {
            assert!((v - (-0.1 * k as f64).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn pitchfork_orbits_contract_at_reference() {
        let sys = ParamSystem::pitchfork();
        let ds = small(&sys, &[-4.0], 100, 25);
        let norm = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut closer = 0;
        for i in 0..ds.orbit_count() {
            assert!(ds.orbit(i).flatten().all(|v| v.is_finite()));
            if norm(ds.state(i, 25)) < norm(ds.state(i, 0)) {
                closer += 1;
            }
        }
        assert!(closer >= 95);
        assert!(ds.max_transition_error(&sys).unwrap() <= 1e-8);
    }

    #[test]
    fn minimal_shape() {
        let ds = small(&ParamSystem::pitchfork(), &[-4.0], 1, 1);
        assert_eq!((ds.orbit_count(), ds.horizon()), (1, 1));
        assert_eq!(ds.orbit(0).count(), 2);
    }

    #[test]
    fn divergence_names_orbit() {
        let sys = ParamSystem::linear(dmatrix![1.0, 0.0; 0.0, 1.0]);
        let domain = unit_box();
        let spec = DatasetSpec {
            system: &sys,
            alpha: &[0.0],
            domain: &domain,
            seed: 0,
            horizon: 50,
            tau: 0.1,
            integrator_step: 1e-2,
        };
        let inits = vec![vec![0.0, 0.0], vec![0.5, 0.0]];
        match generate_dataset(&spec, &inits) {
            Err(Error::DatasetDivergence { orbit, time }) => {
                assert_eq!(orbit, 1);
                assert!((time - 20f64.ln()).abs() < 0.02);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn slicing() {
        let ds = small(&ParamSystem::pitchfork(), &[-4.0], 5, 4);
        let t = ds.truncate(2).unwrap();
        assert_eq!(t.horizon(), 2);
        assert_eq!(t.state(3, 2), ds.state(3, 2));
        let s = ds.select_orbits(&[4, 1]).unwrap();
        assert_eq!(s.orbit_count(), 2);
        assert_eq!(s.state(0, 3), ds.state(4, 3));
        assert!(ds.truncate(5).is_err());
        assert!(ds.select_orbits(&[7]).is_err());
    }
}

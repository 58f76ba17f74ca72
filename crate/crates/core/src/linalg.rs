//! Small dense helpers shared by the fitting and spectral code.

use nalgebra::DMatrix;

/// Smallest pivot accepted by [`Cholesky::factor`].
pub const PIVOT_FLOOR: f64 = 1e-12;

/// Lower-triangular factor `L` with `S = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factors a symmetric matrix, reading only its lower triangle.
    /// Returns `None` unless every squared pivot exceeds [`PIVOT_FLOOR`].
    pub fn factor(s: &DMatrix<f64>) -> Option<Self> {
        let n = s.nrows();
        debug_assert_eq!(n, s.ncols());
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = s[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > PIVOT_FLOOR) {
                return None;
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut v = s[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / djj;
            }
        }
        Some(Self { l })
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        // Invert L by forward substitution, then S⁻¹ = L⁻ᵀ L⁻¹.
        let mut linv = DMatrix::<f64>::zeros(n, n);
        for c in 0..n {
            for i in c..n {
                let mut v = if i == c { 1.0 } else { 0.0 };
                for k in c..i {
                    v -= self.l[(i, k)] * linv[(k, c)];
                }
                linv[(i, c)] = v / self.l[(i, i)];
            }
        }
        linv.transpose() * linv
    }
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// Geometric mean with entries floored at `1e-300` before the log.
pub fn geometric_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let s: f64 = values.iter().map(|v| v.max(1e-300).ln()).sum();
    (s / values.len() as f64).exp()
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// `count` log-spaced points from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect()
        }
    }
}

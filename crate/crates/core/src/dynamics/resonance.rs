//! Non-resonance diagnostics for a linearization spectrum.

use num_complex::Complex64;

use crate::basis::multi_indices;

#[derive(Debug, Clone, PartialEq)]
pub struct ResonanceViolation {
    /// Zero-based index of the eigenvalue that is nearly resonant.
    pub k: usize,
    pub m: Vec<u32>,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct ResonanceReport {
    pub eigenvalues: Vec<Complex64>,
    pub max_order: u32,
    pub c: f64,
    pub nu: f64,
    pub violations: Vec<ResonanceViolation>,
}

impl ResonanceReport {
    pub fn is_resonant(&self) -> bool {
        !self.violations.is_empty()
    }
}

/// Records every `(k, m)` with `2 <= |m| <= max_order` for which
/// `|λ_k - Σ m_r λ_r| < C |m|^(-ν)`.
pub fn resonance_check(eigs: &[Complex64], max_order: u32, c: f64, nu: f64) -> ResonanceReport {
    assert!(max_order >= 2, "resonance orders start at 2");
    let n = eigs.len();
    let mut violations = Vec::new();
    for order in 2..=max_order {
        let bound = c * (order as f64).powf(-nu);
        for m in multi_indices(n, order) {
            let combo: Complex64 = m
                .iter()
                .zip(eigs)
                .map(|(&mr, &l)| l * mr as f64)
                .sum();
            for (k, &lk) in eigs.iter().enumerate() {
                let gap = (lk - combo).norm();
                if gap < bound {
                    violations.push(ResonanceViolation { k, m: m.clone(), gap });
                }
            }
        }
    }
    ResonanceReport {
        eigenvalues: eigs.to_vec(),
        max_order,
        c,
        nu,
        violations,
    }
}

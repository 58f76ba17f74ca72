//! Constant-free monomial dictionaries.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// All exponent vectors of length `n` with total degree exactly `degree`,
/// in descending lexicographic order: `(2,0), (1,1), (0,2)` for `n = 2`.
pub fn multi_indices(n: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(n: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == n {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=remaining).rev() {
            prefix.push(e);
            rec(n, remaining - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        rec(n, degree, &mut Vec::with_capacity(n), &mut out);
    }
    out
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Monomials `Π x_r^{e_r}` with `1 <= Σ e_r <= d`, graded lexicographic.
///
/// The first `n` entries are the coordinates themselves, so a coefficient
/// matrix with an identity top block embeds `x ↦ x`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyBasis {
    n: usize,
    degree: u32,
    exponents: Vec<Vec<u32>>,
}

impl PolyBasis {
    pub fn new(n: usize, degree: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("state dimension must be >= 1".into()));
        }
        if degree == 0 {
            return Err(Error::InvalidInput(
                "degree must be >= 1; a constant-only dictionary cannot represent a homeomorphism".into(),
            ));
        }
        let exponents: Vec<Vec<u32>> = (1..=degree).flat_map(|d| multi_indices(n, d)).collect();
        debug_assert_eq!(
            exponents.len() as u64,
            binomial(n as u64 + degree as u64, degree as u64) - 1
        );
        Ok(Self { n, degree, exponents })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn degree(&self) -> u32 {
        self.degree
    }

    /// Number of dictionary functions `N`.
    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Powers `x_r^0 ..= x_r^d` for every coordinate.
    fn powers(&self, x: &[f64]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|&xr| {
                let mut p = Vec::with_capacity(self.degree as usize + 1);
                let mut v = 1.0;
                for _ in 0..=self.degree {
                    p.push(v);
                    v *= xr;
                }
                p
            })
            .collect()
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n, "state has wrong dimension");
        let pw = self.powers(x);
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e.iter().zip(&pw).map(|(&k, p)| p[k as usize]).product();
        }
    }

    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        self.eval_into(x, out.as_mut_slice());
        out
    }

    /// `N × n` matrix of partial derivatives `∂φ_j / ∂x_r`.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        assert_eq!(x.len(), self.n, "state has wrong dimension");
        let pw = self.powers(x);
        let mut jac = DMatrix::zeros(self.len(), self.n);
        for (j, e) in self.exponents.iter().enumerate() {
            for r in 0..self.n {
                if e[r] == 0 {
                    continue;
                }
                let mut v = e[r] as f64 * pw[r][e[r] as usize - 1];
                for (s, p) in pw.iter().enumerate() {
                    if s != r {
                        v *= p[e[s] as usize];
                    }
                }
                jac[(j, r)] = v;
            }
        }
        jac
    }

    /// `N × n` coefficients with the identity on the degree-1 rows, i.e. `h(x) = x`.
    pub fn identity_embedding(&self) -> DMatrix<f64> {
        let mut theta = DMatrix::zeros(self.len(), self.n);
        for r in 0..self.n {
            theta[(r, r)] = 1.0;
        }
        theta
    }
}

//! Matrix exponential by scaling and squaring with a [13/13] Padé approximant.

use nalgebra::DMatrix;

const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

/// 1-norm bound below which the degree-13 approximant needs no scaling.
const THETA13: f64 = 5.371_920_351_148_152;

/// `exp(A t)`.
pub fn matrix_exp(a: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix_exp requires a square matrix");
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let at = a * t;
    let norm = one_norm(&at);
    if norm == 0.0 {
        return DMatrix::identity(n, n);
    }
    let s = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = at * 2f64.powi(-s);
    let mut r = pade13(&scaled);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

fn pade13(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let b = &PADE13;
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9])
        + &a6 * b[7]
        + &a4 * b[5]
        + &a2 * b[3]
        + &id * b[1];
    let u = a * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8])
        + &a6 * b[6]
        + &a4 * b[4]
        + &a2 * b[2]
        + &id * b[0];

    let p = &v + &u;
    let q = &v - &u;
    q.lu()
        .solve(&p)
        .expect("Padé denominator is nonsingular for scaled arguments")
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_is_identity() {
        let e = matrix_exp(&DMatrix::zeros(3, 3), 1.0);
        assert_eq!(e, DMatrix::identity(3, 3));
    }

    #[test]
    fn diagonal() {
        let a = DMatrix::from_diagonal(&nalgebra::dvector![-3.0, 0.7]);
        let e = matrix_exp(&a, 1.0);
        assert_relative_eq!(e[(0, 0)], (-3.0f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(e[(1, 1)], 0.7f64.exp(), max_relative = 1e-12);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn nilpotent() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = matrix_exp(&a, 1.0);
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert_relative_eq!(e, want, epsilon = 1e-15);
    }

    #[test]
    fn rotation_with_scaling() {
        // exp of [[0, -w],[w, 0]] t is a rotation by w t; ‖At‖ = 9 forces squaring.
        let w = 3.0;
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -w, w, 0.0]);
        let e = matrix_exp(&a, 3.0);
        let th = w * 3.0f64;
        let want = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        assert_relative_eq!(e, want, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn additive_in_time(entries in prop::array::uniform4(-1.0f64..1.0), s in 0.0f64..1.0, t in 0.0f64..1.0) {
            let a = DMatrix::from_row_slice(2, 2, &entries);
            let lhs = matrix_exp(&a, s + t);
            let rhs = matrix_exp(&a, s) * matrix_exp(&a, t);
            prop_assert!((lhs - rhs).norm() <= 1e-10);
        }
    }
}

//! Small dense Cholesky factorizations for the per-frequency and mapping solves.
//! Matrices are row-major `n x n`; only the lower triangle is read.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Factors a symmetric positive-definite matrix in place into `L` (lower).
pub fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L L^T x = b` in place given the factor from [`cholesky`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = a.to_vec();
    cholesky(&mut l, n)?;
    let mut inv = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.fill(0.0);
        col[j] = 1.0;
        cholesky_solve(&l, n, &mut col);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    // symmetrize away rounding asymmetry
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = m;
            inv[j * n + i] = m;
        }
    }
    Ok(inv)
}

/// Factors a Hermitian positive-definite matrix in place into `L` (lower).
pub fn cholesky_complex(a: &mut [Complex64], n: usize) -> Result<()> {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j].re;
        for k in 0..j {
            d -= a[j * n + k].norm_sqr();
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let d = d.sqrt();
        a[j * n + j] = Complex64::new(d, 0.0);
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k].conj();
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = Complex64::new(0.0, 0.0);
        }
    }
    Ok(())
}

/// Solves `L L^H x = b` in place given the factor from [`cholesky_complex`].
pub fn cholesky_solve_complex(l: &[Complex64], n: usize, b: &mut [Complex64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i].re;
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i].conj() * b[k];
        }
        b[i] = s / l[i * n + i].re;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn real_solve() {
        let a = vec![4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];
        let inv = spd_inverse(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let mut bad = vec![1.0, 2.0, 2.0, 1.0];
        assert!(cholesky(&mut bad, 2).is_err());
    }

    #[test]
    fn complex_solve() {
        let c = |re, im| Complex64::new(re, im);
        let a = vec![c(3.0, 0.0), c(1.0, -1.0), c(1.0, 1.0), c(4.0, 0.0)];
        let b = vec![c(1.0, 2.0), c(-1.0, 0.5)];
        let mut l = a.clone();
        cholesky_complex(&mut l, 2).unwrap();
        let mut x = b.clone();
        cholesky_solve_complex(&l, 2, &mut x);
        for i in 0..2 {
            let v = a[i * 2] * x[0] + a[i * 2 + 1] * x[1];
            assert!((v - b[i]).norm() < 1e-12);
        }
    }
}

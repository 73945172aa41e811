//! Small dense solvers shared by the power flow and the estimators.

use crate::error::{Error, Result};

/// Solves `a x = b` in place (`b` becomes `x`). `a` is row-major `n × n` and is
/// overwritten by its LU factors.
///
/// Elimination skips zero multipliers and only touches the nonzero columns of
/// each pivot row, so banded or otherwise sparse systems (power-flow
/// Jacobians) cost far less than `n³`. Pivoting keeps the diagonal whenever it
/// is within a factor 100 of the column maximum, which preserves sparsity.
pub fn lu_solve_in_place(a: &mut [f64], n: usize, b: &mut [f64]) -> Result<()> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let mut nz_cols: Vec<usize> = Vec::with_capacity(n);
    for k in 0..n {
        let mut arg_max = k;
        let mut col_max = a[k * n + k].abs();
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > col_max {
                col_max = v;
                arg_max = i;
            }
        }
        let best = if a[k * n + k].abs() >= 0.01 * col_max {
            k
        } else {
            arg_max
        };
        if col_max == 0.0 || !col_max.is_finite() {
            return Err(Error::Singular(format!("zero pivot in column {k}")));
        }
        if best != k {
            for j in 0..n {
                a.swap(k * n + j, best * n + j);
            }
            b.swap(k, best);
        }
        let pivot = a[k * n + k];
        nz_cols.clear();
        nz_cols.extend((k + 1..n).filter(|&j| a[k * n + j] != 0.0));
        for i in k + 1..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let l = aik / pivot;
            a[i * n + k] = l;
            for &j in &nz_cols {
                a[i * n + j] -= l * a[k * n + j];
            }
            b[i] -= l * b[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = b[k];
        for j in k + 1..n {
            s -= a[k * n + j] * b[j];
        }
        b[k] = s / a[k * n + k];
    }
    if b.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Singular("non-finite solution".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn needs_pivoting() {
        let mut a = vec![0.0, 1.0, 1.0, 0.0];
        let mut b = vec![2.0, 3.0];
        lu_solve_in_place(&mut a, 2, &mut b).unwrap();
        assert_eq!(b, vec![3.0, 2.0]);
    }

    #[test]
    fn singular_is_reported() {
        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut b = vec![1.0, 1.0];
        assert!(lu_solve_in_place(&mut a, 2, &mut b).is_err());
    }

    proptest! {
        #[test]
        fn agrees_with_nalgebra(n in 1usize..12, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = DMatrix::<f64>::from_fn(n, n, |i, j| {
                if i == j { 5.0 + rng.random::<f64>() }
                else if rng.random::<f64>() < 0.4 { rng.random_range(-1.0..1.0) } else { 0.0 }
            });
            let rhs = DVector::<f64>::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let expected = m.clone().lu().solve(&rhs).unwrap();
            let mut a: Vec<f64> = (0..n * n).map(|k| m[(k / n, k % n)]).collect();
            let mut b: Vec<f64> = rhs.iter().copied().collect();
            lu_solve_in_place(&mut a, n, &mut b).unwrap();
            for i in 0..n {
                prop_assert!((b[i] - expected[i]).abs() < 1e-10);
            }
        }
    }
}

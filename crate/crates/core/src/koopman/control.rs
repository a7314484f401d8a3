use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `S = [B, AB, ..., A^{v-1} B]`.
pub fn controllability_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let v = a.nrows();
    if a.ncols() != v || b.nrows() != v {
        return Err(Error::Shape(format!("A {:?} and B {:?} disagree", a.shape(), b.shape())));
    }
    let n = b.ncols();
    let mut s = DMatrix::zeros(v, v * n);
    let mut block = b.clone();
    for k in 0..v {
        s.view_mut((0, k * n), (v, n)).copy_from(&block);
        block = a * block;
    }
    Ok(s)
}

/// Number of singular values above `rows * eps * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    let tol = m.nrows() as f64 * f64::EPSILON * max;
    sv.iter().filter(|&&s| s > tol).count()
}

/// Controllability matrix and its numerical rank.
pub fn controllability(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let s = controllability_matrix(a, b)?;
    let rank = numerical_rank(&s);
    Ok((s, rank))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeated_column_is_uncontrollable() {
        let (s, rank) = controllability(&DMatrix::identity(2, 2), &DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]));
        assert_eq!(rank, 1);
    }

    #[test]
    fn distinct_modes_are_controllable() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.8]);
        let b = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let (s, rank) = controllability(&a, &b).unwrap();
        assert_eq!(s, DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 1.0, 0.8]));
        assert!((s.determinant() - 0.3).abs() < 1e-15);
        assert_eq!(rank, 2);
    }

    #[test]
    fn zero_input_matrix_has_rank_zero() {
        let (_, rank) = controllability(&DMatrix::identity(3, 3), &DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(rank, 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rank_invariant_under_change_of_coordinates(
                a in proptest::collection::vec(-1.0f64..1.0, 16),
                b in proptest::collection::vec(-1.0f64..1.0, 4),
                t in proptest::collection::vec(-1.0f64..1.0, 16),
            ) {
                let a = DMatrix::from_row_slice(4, 4, &a);
                let b = DMatrix::from_row_slice(4, 1, &b);
                let t = DMatrix::from_row_slice(4, 4, &t) + DMatrix::identity(4, 4) * 3.0;
                let (s, rank) = controllability(&a, &b).unwrap();
                prop_assert_eq!(numerical_rank(&(&t * s)), rank);
                // same system in new coordinates: T A T^-1, T B
                let ti = t.clone().try_inverse().unwrap();
                let (_, rank2) = controllability(&(&t * &a * ti), &(&t * &b)).unwrap();
                prop_assert_eq!(rank2, rank);
            }
        }
    }
}

//! Matrix support. All tensors in this workspace are dense row-major
//! `f64` matrices; batches put one sample per row.

use ndarray::Array2;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

pub type Matrix = Array2<f64>;

/// Builds a matrix from a flat row-major value buffer.
///
/// Panics if `values.len() != rows * cols`; callers own shape validation.
pub fn from_flat(rows: usize, cols: usize, values: Vec<f64>) -> Matrix {
    assert_eq!(
        values.len(),
        rows * cols,
        "flat buffer length {} does not match {}x{}",
        values.len(),
        rows,
        cols
    );
    Array2::from_shape_vec((rows, cols), values).expect("row-major shape")
}

/// Samples a matrix with independent standard-normal entries, drawn row-major.
pub fn randn(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Matrix {
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(StandardNormal.sample(&mut *rng));
    }
    from_flat(rows, cols, values)
}

/// True when every entry is finite.
pub fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_flat_is_row_major() {
        let m = from_flat(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m[[0, 2]], 3.0);
        assert_eq!(m[[1, 0]], 4.0);
    }

    #[test]
    fn randn_is_deterministic_per_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(randn(3, 4, &mut a), randn(3, 4, &mut b));
    }

    #[test]
    fn all_finite_flags_nan() {
        let mut m = from_flat(1, 2, vec![0.0, 1.0]);
        assert!(all_finite(&m));
        m[[0, 1]] = f64::NAN;
        assert!(!all_finite(&m));
    }
}

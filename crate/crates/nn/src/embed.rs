//! Sinusoidal embeddings for scalar conditioning inputs (diffusion time,
//! noise level). Interleaved sin/cos pairs at geometrically spaced
//! frequencies so that nearby scalars stay distinguishable across several
//! orders of magnitude.

use crate::mat::Matrix;
use ndarray::Array2;

/// Highest frequency in the bank; the lowest is 1, so the slowest component
/// stays injective on [0, 1] while the fastest resolves differences of
/// about 1e-3.
const MAX_FREQ: f64 = 1000.0;

/// Embeds a scalar as `dim` interleaved (sin, cos) features.
///
/// `dim` must be even and at least 2. Frequencies run geometrically from 1
/// to `MAX_FREQ`, giving `embed(0) = [0, 1, 0, 1, ...]`.
pub fn sinusoidal_time_embed(t: f64, dim: usize) -> Vec<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {dim}");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = if half == 1 {
            1.0
        } else {
            MAX_FREQ.powf(i as f64 / (half - 1) as f64)
        };
        out.push((freq * t).sin());
        out.push((freq * t).cos());
    }
    out
}

/// Stacks `sinusoidal_time_embed` over a batch of scalars, one per row.
pub fn time_embed_rows(ts: &[f64], dim: usize) -> Matrix {
    let mut out = Array2::zeros((ts.len(), dim));
    for (r, &t) in ts.iter().enumerate() {
        for (c, v) in sinusoidal_time_embed(t, dim).into_iter().enumerate() {
            out[[r, c]] = v;
        }
    }
    out
}

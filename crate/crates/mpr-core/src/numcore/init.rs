//! Weight initializers.

use crate::error::{CoreError, CoreResult};
use crate::numcore::Tensor;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Standard normal sample via Box-Muller (keeps the dependency surface to
/// `rand`'s uniform source only, so draws are reproducible across versions).
pub fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    loop {
        let u1: f64 = rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Orthogonal initialization: for rows >= cols the columns are orthonormal
/// (W^T W = gain^2 I), otherwise the rows are (W W^T = gain^2 I).
///
/// Implemented as two passes of modified Gram-Schmidt over a Gaussian
/// matrix; double orthogonalization keeps the Gram residual near machine
/// precision for well-conditioned random inputs.
pub fn orthogonal_init(
    rows: usize,
    cols: usize,
    gain: f64,
    rng: &mut ChaCha12Rng,
) -> CoreResult<Tensor> {
    if rows == 0 || cols == 0 {
        return Err(CoreError::config("orthogonal_init needs rows, cols >= 1"));
    }
    let (m, n, transpose) = if rows >= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    // m x n with m >= n, column-orthonormalized.
    let mut a = vec![0.0; m * n];
    for v in a.iter_mut() {
        *v = gaussian(rng);
    }
    for _pass in 0..2 {
        for j in 0..n {
            for p in 0..j {
                let mut dot = 0.0;
                for i in 0..m {
                    dot += a[i * n + j] * a[i * n + p];
                }
                for i in 0..m {
                    a[i * n + j] -= dot * a[i * n + p];
                }
            }
            let mut norm = 0.0;
            for i in 0..m {
                norm += a[i * n + j] * a[i * n + j];
            }
            let norm = norm.sqrt();
            if norm < 1e-12 {
                return Err(CoreError::numeric(
                    "orthogonal_init",
                    "degenerate random matrix",
                ));
            }
            for i in 0..m {
                a[i * n + j] /= norm;
            }
        }
    }
    let data = if transpose {
        let mut out = vec![0.0; rows * cols];
        for i in 0..m {
            for j in 0..n {
                out[j * cols + i] = gain * a[i * n + j];
            }
        }
        out
    } else {
        a.iter().map(|v| gain * v).collect()
    };
    Tensor::new(vec![rows, cols], data)
}

pub fn zero_init(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn gram_dev_cols(t: &Tensor, gain: f64) -> f64 {
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut worst: f64 = 0.0;
        for i in 0..c {
            for j in 0..c {
                let mut dot = 0.0;
                for k in 0..r {
                    dot += t.data[k * c + i] * t.data[k * c + j];
                }
                let expect = if i == j { gain * gain } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        worst
    }

    fn gram_dev_rows(t: &Tensor, gain: f64) -> f64 {
        let (r, c) = (t.shape[0], t.shape[1]);
        let mut worst: f64 = 0.0;
        for i in 0..r {
            for j in 0..r {
                let mut dot = 0.0;
                for k in 0..c {
                    dot += t.data[i * c + k] * t.data[j * c + k];
                }
                let expect = if i == j { gain * gain } else { 0.0 };
                worst = worst.max((dot - expect).abs());
            }
        }
        worst
    }

    #[test]
    fn square_is_orthogonal() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let w = orthogonal_init(4, 4, 1.0, &mut rng).unwrap();
        assert!(gram_dev_cols(&w, 1.0) < 1e-8);
    }

    #[test]
    fn wide_has_orthonormal_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let w = orthogonal_init(2, 6, 1.0, &mut rng).unwrap();
        assert!(gram_dev_rows(&w, 1.0) < 1e-8);
    }

    #[test]
    fn tall_with_gain() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let g = std::f64::consts::SQRT_2;
        let w = orthogonal_init(7, 3, g, &mut rng).unwrap();
        assert!(gram_dev_cols(&w, g) < 1e-8);
    }

    #[test]
    fn zero_init_is_zero() {
        let t = zero_init(vec![8]);
        assert!(t.data.iter().all(|&v| v == 0.0));
        assert_eq!(t.numel(), 8);
    }
}

//! Deterministic initializers. Every function takes an explicit seed.

use super::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A matrix with orthonormal columns (tall) or rows (wide), drawn from the
/// Haar measure via QR of a Gaussian matrix with the sign of `diag(R)` fixed.
fn orthogonal_from<R: Rng + ?Sized>(rng: &mut R, d_out: usize, d_in: usize) -> Vec<f64> {
    let (tall, short) = (d_out.max(d_in), d_out.min(d_in));
    let g = DMatrix::from_row_slice(tall, short, &gaussian(rng, tall * short));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; d_out * d_in];
    for i in 0..d_out {
        for j in 0..d_in {
            out[i * d_in + j] = if d_out >= d_in { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

/// Semi-orthogonal `d_out × d_in` matrix with unit spectral norm.
pub fn orthogonal_init(d_out: usize, d_in: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::new(vec![d_out, d_in], orthogonal_from(&mut rng, d_out, d_in)).expect("shape")
}

/// Kernel `[d_out, d_in, k, k]` whose every spatial slice `C[:, :, i, j]` is
/// semi-orthogonal.
pub fn orthogonal_conv_init(d_out: usize, d_in: usize, k: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let mut data = vec![0.0; d_out * d_in * k * k];
    for i in 0..k {
        for j in 0..k {
            let slice = orthogonal_from(&mut rng, d_out, d_in);
            for o in 0..d_out {
                for c in 0..d_in {
                    data[((o * d_in + c) * k + i) * k + j] = slice[o * d_in + c];
                }
            }
        }
    }
    Tensor::new(vec![d_out, d_in, k, k], data).expect("shape")
}

/// `d × n` matrix whose columns are Gaussian directions of unit length.
pub fn unit_ball_gaussian_init(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let mut data = vec![0.0; d * n];
    for col in 0..n {
        let v = loop {
            let v = gaussian(&mut rng, d);
            if v.iter().any(|x| *x != 0.0) {
                break v;
            }
        };
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (row, x) in v.iter().enumerate() {
            data[row * n + col] = x / norm;
        }
    }
    Tensor::new(vec![d, n], data).expect("shape")
}

#![allow(dead_code)]

use std::path::PathBuf;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reprobe::ActivationMatrix;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn bundle_dir(name: &str) -> PathBuf {
    fixtures().join("bundles").join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, m: usize, p: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, p), |_| rng.gen_range(-1.0..1.0))
}

pub fn random_activation(rng: &mut impl Rng, m: usize, p: usize) -> ActivationMatrix {
    ActivationMatrix::new("x", random_matrix(rng, m, p)).unwrap()
}

/// Plain-loop HSIC: build both Gram matrices entry by entry, double-center
/// them, and sum the elementwise products.
#[allow(clippy::needless_range_loop)]
pub fn hsic_oracle(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let m = x.nrows();
    let gram = |a: &Array2<f64>| {
        let mut g = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                let mut s = 0.0;
                for k in 0..a.ncols() {
                    s += a[[i, k]] * a[[j, k]];
                }
                g[i][j] = s;
            }
        }
        g
    };
    let center = |g: Vec<Vec<f64>>| {
        let row: Vec<f64> = (0..m)
            .map(|i| g[i].iter().sum::<f64>() / m as f64)
            .collect();
        let col: Vec<f64> = (0..m)
            .map(|j| (0..m).map(|i| g[i][j]).sum::<f64>() / m as f64)
            .collect();
        let all = row.iter().sum::<f64>() / m as f64;
        let mut c = g;
        for i in 0..m {
            for j in 0..m {
                c[i][j] = c[i][j] - row[i] - col[j] + all;
            }
        }
        c
    };
    let k = center(gram(x));
    let l = center(gram(y));
    let mut s = 0.0;
    for i in 0..m {
        for j in 0..m {
            s += k[i][j] * l[i][j];
        }
    }
    s / ((m - 1) as f64).powi(2)
}

pub fn cka_oracle(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    hsic_oracle(x, y) / (hsic_oracle(x, x) * hsic_oracle(y, y)).sqrt()
}

/// Random orthogonal matrix from the QR factor of a Gaussian-ish matrix.
pub fn random_orthogonal(rng: &mut impl Rng, p: usize) -> Array2<f64> {
    let a = nalgebra::DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
    let q = a.qr().q();
    Array2::from_shape_fn((p, p), |(i, j)| q[(i, j)])
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

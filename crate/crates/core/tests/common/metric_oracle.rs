//! Direct O(n^2) and textbook-formula versions of the similarity metrics.
#![allow(dead_code)]

use dits::rng::rng_from;
use ndarray::Array2;
use rand::Rng as _;

/// ECDF difference evaluated at every pooled point, O(n^2).
pub fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
        .fold(0.0, f64::max)
}

pub fn ks_marginal_brute(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let d = a.ncols();
    let total: f64 = (0..d).map(|j| ks_brute(&a.column(j).to_vec(), &b.column(j).to_vec())).sum();
    1.0 - total / d as f64
}

// Textbook sums, written out independently of the library.
pub fn corr_direct(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn corr_similarity_direct(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let tri = |m: &Array2<f64>| {
        let d = m.ncols();
        let mut v = Vec::new();
        for i in 0..d {
            for j in i + 1..d {
                v.push(corr_direct(&m.column(i).to_vec(), &m.column(j).to_vec()));
            }
        }
        v
    };
    corr_direct(&tri(a), &tri(b))
}

pub fn random_sample(seed: u64, n: usize, d: usize, discrete: bool) -> Array2<f64> {
    let mut rng = rng_from(seed, 0);
    let mut m = Array2::from_shape_fn((n, d), |_| {
        if discrete {
            rng.random_range(0..6) as f64
        } else {
            rng.random_range(-1.0..1.0)
        }
    });
    // Mix columns so correlations are not all near zero.
    for i in 0..n {
        m[[i, 1]] += 0.8 * m[[i, 0]];
        m[[i, d - 1]] -= 0.5 * m[[i, 1]];
    }
    m
}

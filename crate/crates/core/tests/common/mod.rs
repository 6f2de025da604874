//! Independent oracles shared by the integration and acceptance tests: finite
//! differences, dense linear algebra through nalgebra, and seeded fixtures.

#![allow(dead_code)]

use aajr::linalg::Matrix;
use aajr::{Activation, Policy};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let xi = x[i];
            xp[i] = xi + h;
            let fp = f(&xp);
            xp[i] = xi - h;
            let fm = f(&xp);
            xp[i] = xi;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Central finite-difference directional derivative of a vector map.
pub fn fd_directional(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
    f(&xp)
        .iter()
        .zip(f(&xm))
        .map(|(p, m)| (p - m) / (2.0 * h))
        .collect()
}

/// Dense Hessian of `f` by central differences of a gradient oracle.
pub fn fd_hessian(grad: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            fd_directional(&grad, x, &e, h)
        })
        .collect();
    (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (cols[j][i] + cols[i][j])).collect())
        .collect()
}

/// Dense Hessian of a scalar function using only function values.
pub fn fd_hessian_values(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let at = |di: usize, si: f64, dj: usize, sj: f64| {
        let mut y = x.to_vec();
        y[di] += si * h;
        y[dj] += sj * h;
        f(&y)
    };
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    (at(i, 1.0, j, 1.0) - at(i, 1.0, j, -1.0) - at(i, -1.0, j, 1.0)
                        + at(i, -1.0, j, -1.0))
                        / (4.0 * h * h)
                })
                .collect()
        })
        .collect()
}

pub fn quad_form(h: &[Vec<f64>], v: &[f64]) -> f64 {
    h.iter()
        .zip(v)
        .map(|(row, vi)| vi * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

pub fn to_dmatrix(m: &Matrix<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

/// Largest singular value by dense SVD.
pub fn svd_max(m: &Matrix<f64>) -> f64 {
    to_dmatrix(m)
        .singular_values()
        .iter()
        .fold(0.0f64, |a, &b| a.max(b))
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(b).max(1.0)
}

pub fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let nv = norm(&v);
        if nv > 1e-3 {
            return v.iter().map(|x| x / nv).collect();
        }
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-r..=r)).collect()
}

/// Seeded tanh network with input `d`, one hidden layer of width `h`, output `m`.
pub fn tanh_net(seed: u64, d: usize, h: usize, m: usize) -> Policy {
    Policy::init(&[d, h, m], &[Activation::Tanh, Activation::Identity], seed).unwrap()
}

/// Seeded tanh network with random sizes in `2..=8`, one or two hidden layers,
/// weights scaled up so the nonlinearity is exercised.
pub fn random_tanh_net(seed: u64) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let depth = rng.gen_range(1..=2);
    let mut dims = vec![rng.gen_range(2..=8)];
    for _ in 0..depth {
        dims.push(rng.gen_range(2..=8));
    }
    dims.push(rng.gen_range(2..=8));
    let mut acts = vec![Activation::Tanh; depth];
    acts.push(Activation::Identity);
    Policy::init(&dims, &acts, seed).unwrap().scaled(2.0)
}

/// Orthonormal basis of a random `k`-dimensional subspace of `R^d` (QR oracle).
pub fn random_orthonormal(seed: u64, d: usize, k: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(d, k, |_, _| rng.gen_range(-1.0..=1.0));
    let q = a.qr().q();
    (0..k).map(|j| q.column(j).iter().copied().collect()).collect()
}

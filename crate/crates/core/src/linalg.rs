//! Small dense helpers. Matrices are row-major `Vec<f32>` / `Vec<f64>`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f32]) -> f32 {
    libm::sqrtf(dot(a, a))
}

/// `out = m * x` for an `rows x cols` row-major matrix.
pub fn mat_vec(m: &[f32], rows: usize, cols: usize, x: &[f32], out: &mut [f32]) {
    debug_assert_eq!(m.len(), rows * cols);
    for (r, o) in out.iter_mut().enumerate().take(rows) {
        *o = dot(&m[r * cols..(r + 1) * cols], x);
    }
}

/// `out += m^T * x` for an `rows x cols` row-major matrix.
pub fn mat_t_vec_add(m: &[f32], rows: usize, cols: usize, x: &[f32], out: &mut [f32]) {
    for r in 0..rows {
        let xr = x[r];
        let row = &m[r * cols..(r + 1) * cols];
        for (o, w) in out.iter_mut().zip(row) {
            *o += w * xr;
        }
    }
}

/// Modified Gram-Schmidt over `vectors` (each of length `dim`), in f64.
/// Fails if a vector is (numerically) in the span of the previous ones.
pub fn gram_schmidt(vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
    for v in vectors {
        let mut w = v.clone();
        for b in &basis {
            let proj: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
            for (wi, bi) in w.iter_mut().zip(b) {
                *wi -= proj * bi;
            }
        }
        let n = libm::sqrt(w.iter().map(|x| x * x).sum::<f64>());
        if n < 1e-9 {
            return Err(Error::Singular);
        }
        for wi in &mut w {
            *wi /= n;
        }
        basis.push(w);
    }
    Ok(basis)
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A seeded orthogonal `n x n` matrix (rows orthonormal), returned as f32.
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f32> {
    loop {
        let rows: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(rng, n)).collect();
        if let Ok(basis) = gram_schmidt(&rows) {
            return basis.into_iter().flatten().map(|x| x as f32).collect();
        }
    }
}

/// Solves the symmetric positive definite system `a x = b` (`a` is `n x n`)
/// by Cholesky factorisation.
pub fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Singular);
                }
                l[i * n + i] = libm::sqrt(sum);
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // forward: l y = b
    let mut y = vec![0.0f64; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    // backward: l^T x = y
    let mut x = vec![0.0f64; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    Ok(x)
}

//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use msvq::mhvq::MultiHeadCodebook;

/// Direct O(N^2) DFT magnitude of `frame` zero-padded to `n`, bins `0..=n/2`.
pub fn dft_magnitude(frame: &[f64], n: usize) -> Vec<f64> {
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, x) in frame.iter().enumerate() {
                // Reduce k*i modulo n first so the angle stays small and exact.
                let ang = -2.0 * PI * ((k * i) % n) as f64 / n as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

/// Frame `t` of a centered STFT with reflect padding, windowed by a periodic Hann window.
pub fn reference_frame(samples: &[f64], t: usize, window: usize, hop: usize) -> Vec<f64> {
    let len = samples.len() as i64;
    (0..window)
        .map(|i| {
            let mut j = (t * hop) as i64 - (window / 2) as i64 + i as i64;
            while j < 0 || j >= len {
                j = if j < 0 { -j } else { 2 * (len - 1) - j };
            }
            let w = 0.5 * (1.0 - (2.0 * PI * i as f64 / window as f64).cos());
            samples[j as usize] * w
        })
        .collect()
}

/// Per-head linear scan; strict `<` keeps the lowest index on ties.
pub fn brute_force_indices(x: &[f64], cb: &MultiHeadCodebook) -> Vec<usize> {
    let d = cb.head_dim();
    (0..cb.heads())
        .map(|h| {
            let chunk = &x[h * d..(h + 1) * d];
            let mut best = (f64::INFINITY, 0);
            for k in 0..cb.codewords() {
                let dist: f64 = cb.codeword(h, k).iter().zip(chunk).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            best.1
        })
        .collect()
}

/// Textbook two-row Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Solves `a x = b` for a small dense system by Gaussian elimination with partial
/// pivoting. `a` is row-major `n x n`.
pub fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        for k in 0..n {
            a.swap(col * n + k, piv * n + k);
        }
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row * n + k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    x
}

/// Unpenalized least squares with an intercept via the normal equations; returns the
/// mean squared residual per frame (summed over output dimensions).
pub fn normal_equations_residual(x: &[f64], y: &[f64], din: usize, dout: usize) -> f64 {
    let t = x.len() / din;
    let p = din + 1;
    let row = |i: usize| -> Vec<f64> {
        let mut r = x[i * din..(i + 1) * din].to_vec();
        r.push(1.0);
        r
    };
    let mut gram = vec![0.0; p * p];
    for i in 0..t {
        let r = row(i);
        for a in 0..p {
            for b in 0..p {
                gram[a * p + b] += r[a] * r[b];
            }
        }
    }
    let mut total = 0.0;
    for o in 0..dout {
        let mut rhs = vec![0.0; p];
        for i in 0..t {
            let r = row(i);
            for a in 0..p {
                rhs[a] += r[a] * y[i * dout + o];
            }
        }
        let w = solve_dense(gram.clone(), rhs, p);
        for i in 0..t {
            let pred: f64 = row(i).iter().zip(&w).map(|(a, b)| a * b).sum();
            total += (pred - y[i * dout + o]).powi(2);
        }
    }
    total / t as f64
}

/// Central-difference derivative of `f` along every coordinate of `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let plus = f(&p);
            p[i] = x[i] - h;
            let minus = f(&p);
            p[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(1, |n_i|)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / n.abs().max(1.0)).fold(0.0, f64::max)
}

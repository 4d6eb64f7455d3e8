//! Two-component PCA by power iteration with deflation.

use crate::error::{Error, Result};

const MAX_ITERS: usize = 5_000;
const TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit eigenvectors of the sample covariance, largest eigenvalue first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

fn covariance(rows: &[Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let d = mean.len();
    let mut cov = vec![0.0; d * d];
    let denom = (rows.len().max(2) - 1) as f64;
    for r in rows {
        let c: Vec<f64> = r.iter().zip(mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            if c[i] == 0.0 {
                continue;
            }
            let row = &mut cov[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] += c[i] * c[j];
            }
        }
    }
    for v in &mut cov {
        *v /= denom;
    }
    cov
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let d = v.len();
    (0..d).map(|i| m[i * d..(i + 1) * d].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Flip so the largest-magnitude coordinate is positive.
fn canonical_sign(v: &mut [f64]) {
    let mut k = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[k].abs() {
            k = i;
        }
    }
    if v[k] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Leading eigenpair of symmetric `m`, starting from a fixed vector.
fn power_iteration(m: &[f64], d: usize) -> (f64, Vec<f64>) {
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 * 0.618_033_988_75).fract()).collect();
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    for _ in 0..MAX_ITERS {
        let w = matvec(m, &v);
        let n = norm(&w);
        if n == 0.0 {
            return (0.0, v);
        }
        let next: Vec<f64> = w.iter().map(|x| x / n).collect();
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < TOL {
            break;
        }
    }
    canonical_sign(&mut v);
    let mv = matvec(m, &v);
    (mv.iter().zip(&v).map(|(a, b)| a * b).sum(), v)
}

/// Fit the top `k` principal components of `rows`.
pub fn fit(rows: &[Vec<f64>], k: usize) -> Result<Pca> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("PCA needs equal-length, nonempty rows"));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    let mut cov = covariance(rows, &mean);
    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for _ in 0..k.min(d) {
        let (lambda, v) = power_iteration(&cov, d);
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        components.push(v);
        eigenvalues.push(lambda);
    }
    Ok(Pca {
        mean,
        components,
        eigenvalues,
    })
}

impl Pca {
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_spread() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let t = (i / 2) as f64 - 4.5;
                let s = if i % 2 == 0 { 0.5 } else { -0.5 };
                vec![3.0 * t, s, 1.0]
            })
            .collect();
        let p = fit(&rows, 2).unwrap();
        assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
        assert!((p.components[0][0] - 1.0).abs() < 1e-9);
        assert!(p.components[0][1].abs() < 1e-9);
        let proj = p.project(&rows[0]);
        assert!((proj[0] + 3.0 * 4.5).abs() < 1e-9);
        assert!((p.components[1][1].abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matches_dense_eigensolver() {
        use nalgebra::{DMatrix, SymmetricEigen};
        use rand::{Rng, SeedableRng};
        use rand_xoshiro::Xoshiro256PlusPlus;

        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        for trial in 0..10 {
            let (n, d) = (8 + 6 * trial, 6);
            let scales: Vec<f64> = (0..d).map(|j| 1.0 + 2.0 * j as f64).collect();
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
                .collect();
            let p = fit(&rows, 2).unwrap();

            let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - p.mean[j]);
            let cov = x.transpose() * &x / (n - 1) as f64;
            let eig = SymmetricEigen::new(cov);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

            assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
            for (k, &idx) in order.iter().take(2).enumerate() {
                let want = eig.eigenvalues[idx];
                assert!((p.eigenvalues[k] - want).abs() < 1e-6 * want, "trial {trial} λ{k}");
                let v = eig.eigenvectors.column(idx);
                let dot: f64 = p.components[k].iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                assert!((dot.abs() - 1.0).abs() < 1e-6, "trial {trial} v{k}");
            }
        }
    }

    #[test]
    fn rejects_ragged_rows() {
        assert!(fit(&[vec![1.0], vec![1.0, 2.0]], 2).is_err());
        assert!(fit(&[], 2).is_err());
    }
}

//! Gauss–Hermite quadrature for expectations under a Gaussian.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Nodes and log-weights for ∫ f(u) exp(−u²) du ≈ Σ w_k f(u_k).
///
/// Weights are stored as logarithms so that tilted expectations can be
/// normalized with log-sum-exp.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch eigenvalues as starting points, polished by Newton on the
    /// orthonormal Hermite recurrence, which also yields the weights.
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "Gauss-Hermite needs at least 2 nodes, got {n}"
            )));
        }
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i.abs_diff(j) == 1 {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let mut guesses: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        guesses.sort_by(f64::total_cmp);
        let pim4 = PI.powf(-0.25);
        let nf = n as f64;
        let mut nodes = Vec::with_capacity(n);
        let mut log_weights = Vec::with_capacity(n);
        for (i, &guess) in guesses.iter().enumerate() {
            let mut z = guess;
            let mut log_pp = 0.0;
            for _ in 0..20 {
                // Rescale as we go so that the recurrence cannot overflow.
                let (mut p1, mut p2, mut log_scale) = (pim4, 0.0f64, 0.0f64);
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                    if p1.abs() > 1e100 {
                        p1 *= 1e-100;
                        p2 *= 1e-100;
                        log_scale += 100.0 * 10f64.ln();
                    }
                }
                let pp = (2.0 * nf).sqrt() * p2;
                log_pp = pp.abs().ln() + log_scale;
                let step = p1 / pp;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            if !z.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "Gauss-Hermite root {i} of {n} did not converge"
                )));
            }
            nodes.push(z);
            log_weights.push(2f64.ln() - 2.0 * log_pp);
        }
        for i in 0..n / 2 {
            let a = 0.5 * (nodes[n - 1 - i] - nodes[i]);
            let w = 0.5 * (log_weights[i] + log_weights[n - 1 - i]);
            nodes[i] = -a;
            nodes[n - 1 - i] = a;
            log_weights[i] = w;
            log_weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(Self { nodes, log_weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Nodes z_k and log-weights for E[f(Z)], Z ~ N(mean, var):
    /// z_k = mean + √(2 var)·u_k, log w_k − ½ ln π.
    pub fn gaussian_points(&self, mean: f64, var: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let scale = (2.0 * var).sqrt();
        let shift = 0.5 * PI.ln();
        self.nodes
            .iter()
            .zip(&self.log_weights)
            .map(move |(&u, &lw)| (mean + scale * u, lw - shift))
    }
}

/// ln(Σ exp(x_k)), −∞ for empty or all −∞ input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

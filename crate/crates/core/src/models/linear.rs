//! Full-batch gradient descent for L2-regularised logistic regression and a
//! primal linear SVM. Both operate on standardized features.

use serde::{Deserialize, Serialize};

use super::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Population mean and standard deviation per column; constant columns
    /// get a unit scale.
    pub fn fit(x: &Matrix) -> Self {
        let n = x.n_rows() as f64;
        let mut mean = Vec::with_capacity(x.n_cols());
        let mut std = Vec::with_capacity(x.n_cols());
        for f in 0..x.n_cols() {
            let col = x.column(f);
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let s = var.sqrt();
            mean.push(m);
            std.push(if s > 0.0 && s.is_finite() { s } else { 1.0 });
        }
        Self { mean, std }
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let columns = (0..x.n_cols())
            .map(|f| {
                let (m, s) = (self.mean[f], self.std[f]);
                x.column(f).iter().map(|v| (v - m) / s).collect()
            })
            .collect();
        Matrix::from_columns(columns, x.n_rows())
    }

    #[inline]
    pub fn apply(&self, f: usize, value: f64) -> f64 {
        (value - self.mean[f]) / self.std[f]
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn linear_scores(weights: &[f64], bias: f64, x: &Matrix) -> Vec<f64> {
    let mut z = vec![bias; x.n_rows()];
    for (f, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (zi, &v) in z.iter_mut().zip(x.column(f)) {
            *zi += w * v;
        }
    }
    z
}

/// Mean log-loss plus `l2 / 2 * |w|^2`.
pub fn logistic_objective(weights: &[f64], bias: f64, x: &Matrix, y: &[u8], l2: f64) -> f64 {
    let z = linear_scores(weights, bias, x);
    let loss: f64 = z
        .iter()
        .zip(y)
        .map(|(&zi, &yi)| softplus(zi) - yi as f64 * zi)
        .sum::<f64>()
        / x.n_rows() as f64;
    loss + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Analytic gradient of [`logistic_objective`] as `(d/dw, d/db)`.
pub fn logistic_gradient(
    weights: &[f64],
    bias: f64,
    x: &Matrix,
    y: &[u8],
    l2: f64,
) -> (Vec<f64>, f64) {
    let n = x.n_rows() as f64;
    let residual: Vec<f64> = linear_scores(weights, bias, x)
        .into_iter()
        .zip(y)
        .map(|(z, &yi)| sigmoid(z) - yi as f64)
        .collect();
    let grad_w = weights
        .iter()
        .enumerate()
        .map(|(f, &w)| {
            x.column(f).iter().zip(&residual).map(|(v, r)| v * r).sum::<f64>() / n + l2 * w
        })
        .collect();
    (grad_w, residual.iter().sum::<f64>() / n)
}

pub fn train_logistic(x: &Matrix, y: &[u8], l2: f64, learning_rate: f64, epochs: usize) -> (Vec<f64>, f64) {
    let mut w = vec![0.0; x.n_cols()];
    let mut b = 0.0;
    for _ in 0..epochs {
        let (gw, gb) = logistic_gradient(&w, b, x, y, l2);
        for (wi, gi) in w.iter_mut().zip(gw) {
            *wi -= learning_rate * gi;
        }
        b -= learning_rate * gb;
    }
    (w, b)
}

/// `|w|^2 / (2 C n) + mean hinge`, labels mapped to ±1.
pub fn svm_objective(weights: &[f64], bias: f64, x: &Matrix, y: &[u8], c: f64) -> f64 {
    let n = x.n_rows() as f64;
    let hinge: f64 = linear_scores(weights, bias, x)
        .iter()
        .zip(y)
        .map(|(&z, &yi)| (1.0 - (2.0 * yi as f64 - 1.0) * z).max(0.0))
        .sum::<f64>()
        / n;
    weights.iter().map(|w| w * w).sum::<f64>() / (2.0 * c * n) + hinge
}

pub fn train_svm(x: &Matrix, y: &[u8], c: f64, learning_rate: f64, epochs: usize) -> (Vec<f64>, f64) {
    let n = x.n_rows() as f64;
    let mut w = vec![0.0; x.n_cols()];
    let mut b = 0.0;
    for _ in 0..epochs {
        // Subgradient: only margin violators contribute.
        let coef: Vec<f64> = linear_scores(&w, b, x)
            .into_iter()
            .zip(y)
            .map(|(z, &yi)| {
                let s = 2.0 * yi as f64 - 1.0;
                if s * z < 1.0 {
                    -s
                } else {
                    0.0
                }
            })
            .collect();
        for (f, wi) in w.iter_mut().enumerate() {
            let g = x.column(f).iter().zip(&coef).map(|(v, k)| v * k).sum::<f64>() / n
                + *wi / (c * n);
            *wi -= learning_rate * g;
        }
        b -= learning_rate * coef.iter().sum::<f64>() / n;
    }
    (w, b)
}

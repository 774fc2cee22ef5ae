//! Multinomial logistic regression fitted by full-batch gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRegConfig {
    /// L2 strength on the weights; the bias is not penalized.
    pub reg: f64,
    /// Stop once the loss changes by less than this between iterations.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self {
            reg: 1.0,
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    pub dim: usize,
    pub classes: usize,
    /// `[dim, classes]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub iterations: usize,
    pub loss: f64,
}

impl LogisticRegression {
    /// Scores `[rows, classes]` for `x` `[rows, dim]`.
    pub fn decision_function(&self, x: &[f64]) -> Vec<f64> {
        scores(x, self.dim, self.classes, &self.weights, &self.bias)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.decision_function(x);
        s.chunks_mut(self.classes).for_each(softmax_in_place);
        s
    }

    pub fn predict(&self, x: &[f64]) -> Vec<usize> {
        self.decision_function(x).chunks(self.classes).map(argmax).collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn scores(x: &[f64], d: usize, c: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() / d.max(1) * c);
    for row in x.chunks(d) {
        for j in 0..c {
            out.push(b[j] + row.iter().enumerate().map(|(i, xi)| xi * w[i * c + j]).sum::<f64>());
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Mean cross-entropy plus `reg/(2n)·‖W‖²`, and its gradient.
fn objective(x: &[f64], d: usize, y: &[usize], c: usize, reg: f64, w: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = y.len() as f64;
    let mut p = scores(x, d, c, w, b);
    let mut loss = 0.0;
    for (row, &yi) in p.chunks_mut(c).zip(y) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[yi];
        softmax_in_place(row);
        row[yi] -= 1.0;
    }
    loss /= n;
    loss += reg / (2.0 * n) * w.iter().map(|v| v * v).sum::<f64>();
    let mut gw: Vec<f64> = w.iter().map(|v| reg / n * v).collect();
    let mut gb = vec![0.0; c];
    for (xr, pr) in x.chunks(d).zip(p.chunks(c)) {
        for j in 0..c {
            let e = pr[j] / n;
            gb[j] += e;
            for i in 0..d {
                gw[i * c + j] += xr[i] * e;
            }
        }
    }
    (loss, gw, gb)
}

/// Fits on `x` `[n, dim]` with labels in `0..classes`. Every class needs an
/// example and there must be at least two.
pub fn fit_logistic_regression(
    x: &[f64],
    dim: usize,
    labels: &[usize],
    classes: usize,
    cfg: &LogRegConfig,
) -> Result<LogisticRegression> {
    if dim == 0 || x.len() != labels.len() * dim {
        return Err(Error::Config(format!(
            "{} feature values do not form {} rows of width {dim}",
            x.len(),
            labels.len()
        )));
    }
    if classes < 2 {
        return Err(Error::Config("logistic regression needs at least two classes".into()));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::Config(format!("label {y} outside {classes} classes")))? += 1;
    }
    if let Some(c) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Config(format!("class {c} has no training examples")));
    }
    if cfg.reg < 0.0 || !cfg.reg.is_finite() {
        return Err(Error::Config(format!("L2 strength must be finite and ≥ 0, got {}", cfg.reg)));
    }

    let mut w = vec![0.0; dim * classes];
    let mut b = vec![0.0; classes];
    let (mut loss, mut gw, mut gb) = objective(x, dim, labels, classes, cfg.reg, &w, &b);
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let g2: f64 = gw.iter().chain(&gb).map(|g| g * g).sum();
        if g2 == 0.0 {
            break;
        }
        // Backtracking line search with the Armijo condition.
        step *= 2.0;
        let (nw, nb, next) = loop {
            let nw: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - step * g).collect();
            let nb: Vec<f64> = b.iter().zip(&gb).map(|(a, g)| a - step * g).collect();
            let next = objective(x, dim, labels, classes, cfg.reg, &nw, &nb);
            if next.0 <= loss - 0.5 * step * g2 || step < 1e-12 {
                break (nw, nb, next);
            }
            step *= 0.5;
        };
        let delta = loss - next.0;
        (w, b) = (nw, nb);
        (loss, gw, gb) = next;
        if delta.abs() < cfg.tol {
            break;
        }
    }
    Ok(LogisticRegression {
        dim,
        classes,
        weights: w,
        bias: b,
        iterations,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_one_dimensional() {
        let x = [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0];
        let y = [0, 0, 0, 1, 1, 1];
        let m = fit_logistic_regression(&x, 1, &y, 2, &LogRegConfig::default()).unwrap();
        assert_eq!(m.predict(&x), y);
    }

    #[test]
    fn identical_points_split_evenly() {
        let x = [0.7, -1.2, 0.7, -1.2];
        let m = fit_logistic_regression(&x, 2, &[0, 1], 2, &LogRegConfig::default()).unwrap();
        let p = m.predict_proba(&x[..2]);
        assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let cfg = LogRegConfig::default();
        assert!(fit_logistic_regression(&[1.0, 2.0], 1, &[0, 0], 1, &cfg).is_err());
        assert!(fit_logistic_regression(&[1.0, 2.0], 1, &[0, 0], 2, &cfg).is_err());
        assert!(fit_logistic_regression(&[1.0, 2.0], 1, &[0, 2], 2, &cfg).is_err());
        assert!(fit_logistic_regression(&[1.0], 1, &[0, 1], 2, &cfg).is_err());
    }

    /// Fixed-step descent run for far longer than the solver's budget.
    fn long_run(x: &[f64], d: usize, y: &[usize], c: usize, reg: f64) -> (Vec<f64>, Vec<f64>) {
        let n = y.len() as f64;
        let (mut w, mut b) = (vec![0.0; d * c], vec![0.0; c]);
        for _ in 0..200_000 {
            let mut gw: Vec<f64> = w.iter().map(|v| reg * v / n).collect();
            let mut gb = vec![0.0; c];
            for (xi, &yi) in x.chunks(d).zip(y) {
                let s: Vec<f64> = (0..c).map(|j| b[j] + (0..d).map(|i| xi[i] * w[i * c + j]).sum::<f64>()).collect();
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                for j in 0..c {
                    let e = (s[j].exp() / z - f64::from(u8::from(j == yi))) / n;
                    gb[j] += e;
                    for i in 0..d {
                        gw[i * c + j] += e * xi[i];
                    }
                }
            }
            for (a, g) in w.iter_mut().zip(&gw) {
                *a -= 0.05 * g;
            }
            for (a, g) in b.iter_mut().zip(&gb) {
                *a -= 0.05 * g;
            }
        }
        (w, b)
    }

    #[test]
    fn matches_long_run_optimizer_on_toy_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centers = [[1.5, 0.0], [-1.0, 1.2], [-0.5, -1.4]];
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..20 {
            let c = i % 3;
            x.push(centers[c][0] + rng.random_range(-1.0..1.0));
            x.push(centers[c][1] + rng.random_range(-1.0..1.0));
            y.push(c);
        }
        let m = fit_logistic_regression(&x, 2, &y, 3, &LogRegConfig::default()).unwrap();
        let (w, b) = long_run(&x, 2, &y, 3, 1.0);
        let oracle = LogisticRegression {
            dim: 2,
            classes: 3,
            weights: w,
            bias: b,
            iterations: 0,
            loss: 0.0,
        };
        let grid: Vec<f64> = (0..400).flat_map(|i| [(i % 20) as f64 * 0.3 - 3.0, (i / 20) as f64 * 0.3 - 3.0]).collect();
        assert_eq!(m.predict(&x), oracle.predict(&x));
        let agree = m.predict(&grid).iter().zip(oracle.predict(&grid)).filter(|(a, b)| **a == *b).count();
        assert!(agree >= 396, "{agree}/400");
    }
}

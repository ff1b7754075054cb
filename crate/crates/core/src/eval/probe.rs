//! Class-weighted multinomial logistic regression on frozen features.
//!
//! Minimises `(1/N) * sum_i s_i * CE_i + (1/(2C)) * ||W||_F^2` with the bias
//! unregularised, where `s_i` is the class weight of sample `i` (or 1). The
//! loss is invariant to adding a constant to every bias, so biases are kept
//! centred: the bias gradient always sums to zero and a centred start stays
//! centred, which makes the optimum unique.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::class_weights;
use crate::error::{FeverError, Result};
use crate::ndgrad::Array;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Inverse regularisation strength.
    #[serde(rename = "C")]
    pub c: f64,
    pub max_iter: usize,
    /// Stop once the gradient norm is at most this.
    pub tol: f64,
    pub class_reweighting: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            c: 10_000.0,
            max_iter: 5000,
            tol: 1e-5,
            class_reweighting: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(FeverError::config("C", format!("must be > 0, got {}", self.c)));
        }
        if self.max_iter == 0 {
            return Err(FeverError::config("max_iter", "must be > 0"));
        }
        if !(self.tol > 0.0) {
            return Err(FeverError::config("tol", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub num_classes: usize,
    pub dims: usize,
    /// `[num_classes, dims]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Optimizer outcome. Non-convergence is reported here rather than as an
/// error so callers can still use the best iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective: f64,
    /// Objective after every accepted step, starting from the initial point.
    pub trace: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(num_classes: usize, dims: usize) -> Self {
        LinearProbe {
            num_classes,
            dims,
            weight: vec![0.0; num_classes * dims],
            bias: vec![0.0; num_classes],
        }
    }

    /// Gaussian start with centred biases.
    pub fn random(num_classes: usize, dims: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array::<f64>::randn(&[num_classes * dims + num_classes], std, &mut rng).into_data();
        let mut p = LinearProbe::zeros(num_classes, dims);
        p.weight.copy_from_slice(&w[..num_classes * dims]);
        p.bias.copy_from_slice(&w[num_classes * dims..]);
        let mean = p.bias.iter().sum::<f64>() / num_classes as f64;
        p.bias.iter_mut().for_each(|b| *b -= mean);
        p
    }

    fn flat(&self) -> Vec<f64> {
        [self.weight.as_slice(), self.bias.as_slice()].concat()
    }

    fn from_flat(num_classes: usize, dims: usize, theta: &[f64]) -> Self {
        LinearProbe {
            num_classes,
            dims,
            weight: theta[..num_classes * dims].to_vec(),
            bias: theta[num_classes * dims..].to_vec(),
        }
    }

    pub fn logits(&self, features: &Array<f64>) -> Result<Array<f64>> {
        check_features(features, self.dims)?;
        let n = features.rows();
        let k = self.num_classes;
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let x = features.row(i);
            for c in 0..k {
                let w = &self.weight[c * self.dims..(c + 1) * self.dims];
                out[i * k + c] = self.bias[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        Array::new(&[n, k], out)
    }

    pub fn predict(&self, features: &Array<f64>) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok(logits
            .data()
            .chunks(self.num_classes)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, features: &Array<f64>, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        if pred.len() != labels.len() || labels.is_empty() {
            return Err(FeverError::InvalidArgument(format!(
                "{} predictions for {} labels",
                pred.len(),
                labels.len()
            )));
        }
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }

    /// Euclidean distance between the flattened parameters of two probes.
    pub fn distance(&self, other: &LinearProbe) -> f64 {
        self.flat()
            .iter()
            .zip(other.flat())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn check_features(features: &Array<f64>, dims: usize) -> Result<()> {
    if features.ndim() != 2 || features.shape()[1] != dims {
        return Err(FeverError::Shape {
            op: "linear_probe",
            lhs: features.shape().to_vec(),
            rhs: vec![0, dims],
        });
    }
    Ok(())
}

struct Objective<'a> {
    x: &'a Array<f64>,
    labels: &'a [usize],
    sample_w: Vec<f64>,
    k: usize,
    d: usize,
    inv_c: f64,
}

impl Objective<'_> {
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (k, d) = (self.k, self.d);
        let n = self.labels.len();
        let (w, b) = theta.split_at(k * d);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (gw, gb) = grad.split_at_mut(k * d);
        let mut loss = 0.0;
        let mut z = vec![0.0; k];
        for i in 0..n {
            let x = self.x.row(i);
            for c in 0..k {
                z[c] = b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            let s = self.sample_w[i] / n as f64;
            loss += s * (lse - z[self.labels[i]]);
            for c in 0..k {
                let p = (z[c] - lse).exp();
                let r = s * (p - if c == self.labels[i] { 1.0 } else { 0.0 });
                gb[c] += r;
                for (g, &xv) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += r * xv;
                }
            }
        }
        let reg: f64 = w.iter().map(|v| v * v).sum::<f64>() * 0.5 * self.inv_c;
        for (g, &wv) in gw.iter_mut().zip(w) {
            *g += self.inv_c * wv;
        }
        loss + reg
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Fits from an all-zero start.
pub fn fit_linear_probe(
    features: &Array<f64>,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, ProbeFit)> {
    let d = features.shape().get(1).copied().unwrap_or(0);
    fit_linear_probe_from(features, labels, num_classes, cfg, LinearProbe::zeros(num_classes, d))
}

/// Limited-memory BFGS with Armijo backtracking from a given start.
pub fn fit_linear_probe_from(
    features: &Array<f64>,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
    init: LinearProbe,
) -> Result<(LinearProbe, ProbeFit)> {
    cfg.validate()?;
    if num_classes < 2 {
        return Err(FeverError::InvalidArgument("the probe needs at least 2 classes".into()));
    }
    check_features(features, init.dims)?;
    if init.num_classes != num_classes {
        return Err(FeverError::InvalidArgument("initial probe has the wrong class count".into()));
    }
    if features.rows() != labels.len() || labels.is_empty() {
        return Err(FeverError::InvalidArgument(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if !features.is_finite() {
        return Err(FeverError::Data("probe features contain non-finite values".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(FeverError::Data(format!("label {bad} out of range 0..{num_classes}")));
    }
    let sample_w = if cfg.class_reweighting {
        let cw = class_weights(labels, num_classes)?;
        labels.iter().map(|&l| cw[l]).collect()
    } else {
        vec![1.0; labels.len()]
    };
    let obj = Objective {
        x: features,
        labels,
        sample_w,
        k: num_classes,
        d: init.dims,
        inv_c: 1.0 / cfg.c,
    };

    const MEMORY: usize = 10;
    const ARMIJO: f64 = 1e-4;
    let mut theta = init.flat();
    let mut g = vec![0.0; theta.len()];
    let mut f = obj.eval(&theta, &mut g);
    let mut trace = vec![f];
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut converged = norm(&g) <= cfg.tol;
    let mut g_new = vec![0.0; theta.len()];

    while !converged && iterations < cfg.max_iter {
        // Two-loop recursion for the search direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = hist.back().map_or(1.0 / norm(&g).max(1.0), |(s, y, _)| dot(s, y) / dot(y, y));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let fc = obj.eval(&cand, &mut g_new);
            if fc.is_finite() && fc <= f + ARMIJO * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            if hist.is_empty() {
                break;
            }
            hist.clear();
            continue;
        };
        let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) {
            if hist.len() == MEMORY {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        theta = cand;
        f = fc;
        std::mem::swap(&mut g, &mut g_new);
        trace.push(f);
        iterations += 1;
        converged = norm(&g) <= cfg.tol;
    }

    Ok((
        LinearProbe::from_flat(num_classes, init.dims, &theta),
        ProbeFit {
            converged,
            iterations,
            grad_norm: norm(&g),
            objective: f,
            trace,
        },
    ))
}

//! Piecewise-linear regression in the radius with hinge basis functions
//! `max(0, theta - lambda)`, fit by a greedy forward pass.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlrConfig {
    /// Stop adding terms once the training R^2 gain falls below this.
    pub r2_gain_threshold: f64,
    pub max_terms: usize,
    /// Below this many samples only the constant model is fit.
    pub min_samples: usize,
}

impl Default for PlrConfig {
    fn default() -> Self {
        PlrConfig {
            r2_gain_threshold: 1e-3,
            max_terms: 10,
            min_samples: 4,
        }
    }
}

#[inline]
pub fn hinge(theta: f64, lambda: f64) -> f64 {
    (theta - lambda).max(0.0)
}

/// `beta0 + sum(beta_i * hinge(theta, lambda_i))`, knots strictly ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlrModel {
    pub beta0: f64,
    /// `(beta, lambda)` pairs.
    pub terms: Vec<(f64, f64)>,
}

impl PlrModel {
    pub fn constant(beta0: f64) -> Self {
        PlrModel {
            beta0,
            terms: Vec::new(),
        }
    }

    pub fn new(beta0: f64, mut terms: Vec<(f64, f64)>) -> Result<Self> {
        terms.sort_by(|a, b| a.1.total_cmp(&b.1));
        let model = PlrModel { beta0, terms };
        model.validate()?;
        Ok(model)
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn knots(&self) -> impl Iterator<Item = f64> + '_ {
        self.terms.iter().map(|t| t.1)
    }

    pub fn predict(&self, theta: f64) -> f64 {
        self.beta0
            + self
                .terms
                .iter()
                .map(|&(b, l)| b * hinge(theta, l))
                .sum::<f64>()
    }

    /// Right derivative at `theta`.
    pub fn slope(&self, theta: f64) -> f64 {
        self.terms
            .iter()
            .filter(|&&(_, l)| theta >= l)
            .map(|&(b, _)| b)
            .sum()
    }

    /// Apply `y -> a + b * y` to every prediction.
    pub fn affine(&self, a: f64, b: f64) -> PlrModel {
        PlrModel {
            beta0: a + b * self.beta0,
            terms: self.terms.iter().map(|&(beta, l)| (b * beta, l)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta0.is_finite() || self.terms.iter().any(|t| !t.0.is_finite() || !t.1.is_finite()) {
            return Err(Error::model("PLR has non-finite parameters"));
        }
        if self.terms.windows(2).any(|w| !(w[0].1 < w[1].1)) {
            return Err(Error::model("PLR knots are not strictly increasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Fewer samples than the configured minimum, or constant responses.
    Degenerate,
    GainBelowThreshold,
    MaxTerms,
    /// No knot candidates left.
    Exhausted,
    /// Every remaining candidate made the least-squares system singular.
    Singular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlrFit {
    pub model: PlrModel,
    /// Training R^2 after each forward step; first entry is the constant model.
    pub r2_history: Vec<f64>,
    pub stop: StopReason,
}

impl PlrFit {
    pub fn r2(&self) -> f64 {
        *self.r2_history.last().unwrap_or(&0.0)
    }
}

/// Training R^2 of `model`; 1 when the responses are constant and matched.
pub fn training_r2(model: &PlrModel, samples: &[(f64, f64)]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let sst: f64 = samples.iter().map(|s| (s.1 - mean).powi(2)).sum();
    let sse: f64 = samples
        .iter()
        .map(|&(t, y)| (y - model.predict(t)).powi(2))
        .sum();
    if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Cholesky solve of a small SPD system; `None` when a pivot collapses.
fn cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let p = b.len();
    let mut l = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if !(d > 1e-12 * a[i][i].abs().max(1e-300)) {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let mut z = vec![0.0; p];
    for i in 0..p {
        z[i] = (b[i] - (0..i).map(|k| l[i][k] * z[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        x[i] = (z[i] - (i + 1..p).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Least squares through QR on the design `[1, hinge(theta, knots)...]`.
fn solve_qr(samples: &[(f64, f64)], knots: &[f64]) -> Option<PlrModel> {
    let n = samples.len();
    let p = knots.len() + 1;
    if n < p {
        return None;
    }
    let x = DMatrix::from_fn(n, p, |i, j| {
        if j == 0 {
            1.0
        } else {
            hinge(samples[i].0, knots[j - 1])
        }
    });
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.1));
    let qr = x.qr();
    let r = qr.r();
    let max_diag = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * max_diag) {
        return None;
    }
    let qty = qr.q().transpose() * &y;
    let beta = r.solve_upper_triangular(&qty)?;
    let mut terms: Vec<(f64, f64)> = knots.iter().enumerate().map(|(i, &k)| (beta[i + 1], k)).collect();
    terms.sort_by(|a, b| a.1.total_cmp(&b.1));
    Some(PlrModel {
        beta0: beta[0],
        terms,
    })
}

/// Greedy forward fit: start from the mean, repeatedly add the hinge (knot
/// among the distinct sample radii) that most increases training R^2,
/// refitting every coefficient by least squares. Ties go to the smaller knot.
pub fn fit(samples: &[(f64, f64)], cfg: &PlrConfig) -> Result<PlrFit> {
    if samples.is_empty() {
        return Err(Error::usage("cannot fit a PLR without samples"));
    }
    if samples.iter().any(|s| !s.0.is_finite() || !s.1.is_finite()) {
        return Err(Error::usage("PLR samples must be finite"));
    }
    let n = samples.len();
    let ys: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let mean = ys.iter().sum::<f64>() / n as f64;
    let sst: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let constant = PlrFit {
        model: PlrModel::constant(mean),
        r2_history: vec![if sst > 0.0 { 0.0 } else { 1.0 }],
        stop: StopReason::Degenerate,
    };
    if n < cfg.min_samples.max(2) || !(sst > 0.0) || cfg.max_terms == 0 {
        return Ok(PlrFit {
            stop: if cfg.max_terms == 0 { StopReason::MaxTerms } else { StopReason::Degenerate },
            ..constant
        });
    }

    // knot candidates: distinct radii except the largest (its hinge is zero on every sample)
    let mut candidates: Vec<f64> = samples.iter().map(|s| s.0).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.pop();

    let yty: f64 = ys.iter().map(|y| y * y).sum();
    // columns of the current basis, intercept first
    let mut basis: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let mut gram: Vec<Vec<f64>> = vec![vec![n as f64]];
    let mut bty: Vec<f64> = vec![ys.iter().sum()];
    let mut knots: Vec<f64> = Vec::new();
    let mut r2_history = vec![0.0];
    let mut current = PlrModel::constant(mean);
    let stop;

    loop {
        if knots.len() >= cfg.max_terms {
            stop = StopReason::MaxTerms;
            break;
        }
        let prev_r2 = *r2_history.last().unwrap();
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        let mut saw_candidate = false;
        for &lambda in &candidates {
            if knots.contains(&lambda) {
                continue;
            }
            saw_candidate = true;
            let col: Vec<f64> = samples.iter().map(|s| hinge(s.0, lambda)).collect();
            let p = basis.len();
            let mut g = gram.clone();
            let cross: Vec<f64> = basis
                .iter()
                .map(|b| b.iter().zip(&col).map(|(x, y)| x * y).sum())
                .collect();
            for (row, &c) in g.iter_mut().zip(&cross) {
                row.push(c);
            }
            let mut last = cross.clone();
            last.push(col.iter().map(|c| c * c).sum());
            g.push(last);
            let mut rhs = bty.clone();
            rhs.push(col.iter().zip(&ys).map(|(c, y)| c * y).sum());
            let Some(beta) = cholesky_solve(&g, &rhs) else {
                continue;
            };
            let sse = (yty - beta.iter().zip(&rhs).map(|(b, r)| b * r).sum::<f64>()).max(0.0);
            let r2 = 1.0 - sse / sst;
            debug_assert_eq!(beta.len(), p + 1);
            if best.as_ref().map_or(true, |b| r2 > b.1) {
                best = Some((lambda, r2, col));
            }
        }
        let Some((lambda, approx_r2, col)) = best else {
            stop = if saw_candidate { StopReason::Singular } else { StopReason::Exhausted };
            break;
        };
        if approx_r2 - prev_r2 < cfg.r2_gain_threshold {
            stop = StopReason::GainBelowThreshold;
            break;
        }
        let mut trial = knots.clone();
        trial.push(lambda);
        let Some(model) = solve_qr(samples, &trial) else {
            log::debug!("dropping knot {lambda}: least-squares system is singular");
            stop = StopReason::Singular;
            break;
        };
        let r2 = training_r2(&model, samples).max(prev_r2);
        let cross: Vec<f64> = basis
            .iter()
            .map(|b| b.iter().zip(&col).map(|(x, y)| x * y).sum())
            .collect();
        for (row, &c) in gram.iter_mut().zip(&cross) {
            row.push(c);
        }
        let mut last = cross;
        last.push(col.iter().map(|c| c * c).sum());
        gram.push(last);
        bty.push(col.iter().zip(&ys).map(|(c, y)| c * y).sum());
        basis.push(col);
        knots.push(lambda);
        r2_history.push(r2);
        current = model;
    }
    Ok(PlrFit {
        model: current,
        r2_history,
        stop,
    })
}

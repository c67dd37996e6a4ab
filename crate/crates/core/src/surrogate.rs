//! Kernel-weighted ridge surrogates over mask space.
//!
//! The fit only estimates coefficients for active coordinates of a
//! [`FocusMask`]; frozen coordinates are constant across samples and receive
//! an attribution of exactly zero.
//!
//! Weights are normalized to sum to one before solving, so `lambda` does not
//! depend on the number of samples. The intercept is never penalized: the
//! problem is solved on weighted-centered data and the intercept recovered
//! afterwards. When there are fewer samples than active features the
//! equivalent dual system (samples x samples) is factored instead of the
//! primal one.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perturb::{FocusMask, Mask};

pub const DEFAULT_KERNEL_WIDTH: f64 = 0.25;
pub const DEFAULT_LAMBDA: f64 = 1e-3;

/// Smallest acceptable squared ratio between the extreme Cholesky pivots.
const PIVOT_RATIO_FLOOR: f64 = 1e-13;

#[derive(Debug, Error, PartialEq)]
pub enum SurrogateError {
    #[error("need at least 2 samples to fit a surrogate, got {0}")]
    InsufficientSamples(usize),
    #[error("sample {index} has a non-finite prediction or weight")]
    NonFinite { index: usize },
    #[error("sample {index} has {got} bits, focus mask has {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("mask removes frozen unit {0}")]
    FrozenBitViolation(usize),
    #[error("focus mask has no active units")]
    DegenerateFocus,
    #[error("sample weights sum to zero")]
    ZeroWeight,
    #[error("normal equations are singular even after raising lambda to {0}")]
    SingularSystem(f64),
    #[error("fit has {got} coefficients but the focus mask has {expected} active units")]
    CoefficientMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default = "default_width")]
    pub width: f64,
}

fn default_width() -> f64 {
    DEFAULT_KERNEL_WIDTH
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            width: DEFAULT_KERNEL_WIDTH,
        }
    }
}

/// `exp(-d^2 / width^2)` where `d` is the fraction of active units the mask removes.
pub fn kernel_weight(
    mask: &Mask,
    focus: &FocusMask,
    cfg: &KernelConfig,
) -> Result<f64, SurrogateError> {
    if mask.len() != focus.len() {
        return Err(SurrogateError::LengthMismatch {
            index: 0,
            expected: focus.len(),
            got: mask.len(),
        });
    }
    let mut active = 0usize;
    let mut removed = 0usize;
    for (i, (&keep, &is_active)) in mask.bits.iter().zip(&focus.bits).enumerate() {
        if is_active {
            active += 1;
            if !keep {
                removed += 1;
            }
        } else if !keep {
            return Err(SurrogateError::FrozenBitViolation(i));
        }
    }
    if active == 0 {
        return Err(SurrogateError::DegenerateFocus);
    }
    let d = removed as f64 / active as f64;
    Ok((-(d * d) / (cfg.width * cfg.width)).exp())
}

#[derive(Debug, Clone, Copy)]
pub struct FitSample<'a> {
    pub mask: &'a Mask,
    pub prediction: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateFit {
    /// One coefficient per active unit, in document order.
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Ridge strength actually used (after any bump).
    pub lambda: f64,
    pub weighted_r2: f64,
    pub samples: usize,
    #[serde(default)]
    pub lambda_bumped: bool,
}

pub fn fit(
    samples: &[FitSample<'_>],
    focus: &FocusMask,
    lambda: f64,
) -> Result<SurrogateFit, SurrogateError> {
    let design = Design::new(samples, focus)?;
    let cols: Vec<usize> = (0..design.p).collect();
    design.solve(&cols, lambda)
}

/// Greedy forward selection: at most `max_features` nonzero coefficients,
/// each step adding the feature that most reduces the weighted residual.
pub fn fit_forward(
    samples: &[FitSample<'_>],
    focus: &FocusMask,
    lambda: f64,
    max_features: usize,
) -> Result<SurrogateFit, SurrogateError> {
    let design = Design::new(samples, focus)?;
    let mut selected: Vec<usize> = Vec::new();
    let mut best_fit: Option<SurrogateFit> = None;
    while selected.len() < max_features.min(design.p) {
        let mut round_best: Option<(usize, SurrogateFit)> = None;
        for j in 0..design.p {
            if selected.contains(&j) {
                continue;
            }
            let mut cols = selected.clone();
            cols.push(j);
            cols.sort_unstable();
            let f = design.solve(&cols, lambda)?;
            let better = match &round_best {
                None => true,
                Some((_, b)) => f.weighted_r2 > b.weighted_r2,
            };
            if better {
                round_best = Some((j, f));
            }
        }
        let Some((j, f)) = round_best else { break };
        selected.push(j);
        best_fit = Some(f);
    }
    match best_fit {
        Some(f) => Ok(f),
        None => design.solve(&[], lambda),
    }
}

/// Samples restricted to active columns, plus normalized weights.
struct Design {
    k: usize,
    p: usize,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Design {
    fn new(samples: &[FitSample<'_>], focus: &FocusMask) -> Result<Self, SurrogateError> {
        let k = samples.len();
        if k < 2 {
            return Err(SurrogateError::InsufficientSamples(k));
        }
        let active = focus.active_indices();
        let mut x = Vec::with_capacity(k);
        let mut y = Vec::with_capacity(k);
        let mut w = Vec::with_capacity(k);
        for (index, s) in samples.iter().enumerate() {
            if !s.prediction.is_finite() || !s.weight.is_finite() || s.weight < 0.0 {
                return Err(SurrogateError::NonFinite { index });
            }
            if s.mask.len() != focus.len() {
                return Err(SurrogateError::LengthMismatch {
                    index,
                    expected: focus.len(),
                    got: s.mask.len(),
                });
            }
            x.push(
                active
                    .iter()
                    .map(|&i| if s.mask.bits[i] { 1.0 } else { 0.0 })
                    .collect(),
            );
            y.push(s.prediction);
            w.push(s.weight);
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(SurrogateError::ZeroWeight);
        }
        for wi in &mut w {
            *wi /= total;
        }
        Ok(Design {
            k,
            p: active.len(),
            x,
            y,
            w,
        })
    }

    /// Ridge fit using only columns `cols`; the returned coefficient vector
    /// still has length `p` with zeros outside `cols`.
    fn solve(&self, cols: &[usize], lambda: f64) -> Result<SurrogateFit, SurrogateError> {
        let (k, q) = (self.k, cols.len());
        // Shift by the first response so constant responses center to exact zeros.
        let y0 = self.y[0];
        let dy: Vec<f64> = self.y.iter().map(|&v| v - y0).collect();
        let dy_mean: f64 = self.w.iter().zip(&dy).map(|(w, d)| w * d).sum();
        let x_mean: Vec<f64> = cols
            .iter()
            .map(|&j| self.w.iter().zip(&self.x).map(|(w, row)| w * row[j]).sum())
            .collect();

        let sw: Vec<f64> = self.w.iter().map(|w| w.sqrt()).collect();
        let a = DMatrix::from_fn(k, q, |i, c| sw[i] * (self.x[i][cols[c]] - x_mean[c]));
        let b = DVector::from_fn(k, |i, _| sw[i] * (dy[i] - dy_mean));

        let mut lambda_used = lambda;
        let mut bumped = false;
        let coef = if q == 0 {
            DVector::zeros(0)
        } else {
            let primal = q <= k;
            let gram = if primal { a.tr_mul(&a) } else { &a * a.transpose() };
            let rhs = if primal { a.tr_mul(&b) } else { b.clone() };
            let sol = match cholesky_solve(&gram, &rhs, lambda_used) {
                Some(s) => s,
                None => {
                    let next = (lambda * 10.0).max(1e-8);
                    warn!(
                        "ill-conditioned surrogate system (lambda = {lambda}); retrying with lambda = {next}"
                    );
                    lambda_used = next;
                    bumped = true;
                    cholesky_solve(&gram, &rhs, lambda_used)
                        .ok_or(SurrogateError::SingularSystem(lambda_used))?
                }
            };
            if primal {
                sol
            } else {
                a.tr_mul(&sol)
            }
        };

        let mut coefficients = vec![0.0; self.p];
        for (c, &j) in cols.iter().enumerate() {
            coefficients[j] = coef[c];
        }
        let intercept =
            y0 + dy_mean - cols.iter().enumerate().map(|(c, _)| coef[c] * x_mean[c]).sum::<f64>();

        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for i in 0..k {
            let pred = intercept
                + cols
                    .iter()
                    .enumerate()
                    .map(|(c, &j)| coef[c] * self.x[i][j])
                    .sum::<f64>();
            ss_res += self.w[i] * (self.y[i] - pred).powi(2);
            ss_tot += self.w[i] * (dy[i] - dy_mean).powi(2);
        }
        let weighted_r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };

        Ok(SurrogateFit {
            coefficients,
            intercept,
            lambda: lambda_used,
            weighted_r2,
            samples: k,
            lambda_bumped: bumped,
        })
    }
}

fn cholesky_solve(gram: &DMatrix<f64>, rhs: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = gram.nrows();
    let m = gram + DMatrix::<f64>::identity(n, n) * lambda;
    let chol = Cholesky::new(m)?;
    let l = chol.l_dirty();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        let d = l[(i, i)].abs();
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if !(lo.is_finite() && hi > 0.0) || (lo / hi).powi(2) < PIVOT_RATIO_FLOOR {
        return None;
    }
    Some(chol.solve(rhs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Frozen,
    Fitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub scores: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl Attribution {
    /// Attribution from raw scores with every unit marked as fitted.
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let provenance = vec![Provenance::Fitted; scores.len()];
        Attribution { scores, provenance }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn to_attribution(
    fit: &SurrogateFit,
    focus: &FocusMask,
) -> Result<Attribution, SurrogateError> {
    let active = focus.active_indices();
    if active.len() != fit.coefficients.len() {
        return Err(SurrogateError::CoefficientMismatch {
            expected: active.len(),
            got: fit.coefficients.len(),
        });
    }
    let mut scores = vec![0.0; focus.len()];
    let mut provenance = vec![Provenance::Frozen; focus.len()];
    for (&i, &c) in active.iter().zip(&fit.coefficients) {
        scores[i] = c;
        provenance[i] = Provenance::Fitted;
    }
    Ok(Attribution { scores, provenance })
}

/// Indices of the `k` highest scores, highest first; equal scores keep
/// ascending index order. `k` larger than the attribution is truncated.
pub fn top_k_features(attr: &Attribution, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..attr.scores.len()).collect();
    idx.sort_by(|&a, &b| {
        attr.scores[b]
            .partial_cmp(&attr.scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

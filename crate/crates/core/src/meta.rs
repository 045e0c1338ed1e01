//! Logistic-regression meta classifier that separates true OoD segment
//! indications from false ones.
//!
//! Features are z-scored with population statistics. Constant columns are
//! dropped and keep a zero weight. The ridge-penalised log-likelihood
//!
//! ```text
//! L(w, b) = sum_i [y_i log s(w.x_i + b) + (1 - y_i) log(1 - s(w.x_i + b))] - lambda/2 (|w|^2 + b^2)
//! ```
//!
//! is maximised by Newton steps (IRLS) from zero with step halving, so a fit
//! is a deterministic function of its inputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segments::{SegmentRecord, FEATURE_NAMES, NUM_FEATURES};
use crate::tensor::{LabelMask, IGNORE_ID, OOD_ID};

/// Whether a segment is a true OoD indication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetaLabel {
    /// Mostly in-distribution pixels: a false indication.
    False,
    /// Mostly ground-truth OoD pixels.
    True,
}

impl MetaLabel {
    pub fn value(self) -> u8 {
        match self {
            MetaLabel::False => 0,
            MetaLabel::True => 1,
        }
    }

    fn target(self) -> f64 {
        f64::from(self.value())
    }
}

/// Labels one segment by its overlap with ground-truth OoD pixels, ignore pixels excluded.
pub fn label_segment(seg: &SegmentRecord, gt: &LabelMask, tau_tp: f64) -> Result<MetaLabel> {
    let (mut valid, mut ood) = (0usize, 0usize);
    for &(r, c) in &seg.pixels {
        match gt.get(r, c) {
            IGNORE_ID => {}
            OOD_ID => {
                valid += 1;
                ood += 1;
            }
            _ => valid += 1,
        }
    }
    if valid == 0 {
        return Err(Error::ExcludedSegment(seg.id));
    }
    Ok(if ood as f64 >= tau_tp * valid as f64 {
        MetaLabel::True
    } else {
        MetaLabel::False
    })
}

/// Labels every segment; segments lying entirely on ignore pixels get `None`.
pub fn label_segments(
    segments: &[SegmentRecord],
    gt: &LabelMask,
    tau_tp: f64,
) -> Result<Vec<Option<MetaLabel>>> {
    if !(tau_tp > 0.0 && tau_tp <= 1.0) {
        return Err(Error::Domain(format!("tau_tp {tau_tp} outside (0, 1]")));
    }
    segments
        .iter()
        .map(|seg| {
            if seg
                .pixels
                .iter()
                .any(|&(r, c)| r >= gt.height() || c >= gt.width())
            {
                return Err(Error::Schema(format!(
                    "segment {} lies outside the {}x{} ground truth",
                    seg.id,
                    gt.height(),
                    gt.width()
                )));
            }
            match label_segment(seg, gt, tau_tp) {
                Ok(label) => Ok(Some(label)),
                Err(Error::ExcludedSegment(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Column statistics of a z-scored feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub means: Vec<f64>,
    /// Population standard deviations; 0 for dropped columns.
    pub stds: Vec<f64>,
    /// Indices of constant columns.
    pub dropped: Vec<usize>,
}

impl Standardization {
    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(&x, (&m, &s))| if s > 0.0 { (x - m) / s } else { 0.0 })
            .collect()
    }
}

/// Z-scores every column. Dropped columns become all-zero.
pub fn standardize_fit<R: AsRef<[f64]>>(rows: &[R]) -> Result<(Vec<Vec<f64>>, Standardization)> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Domain("cannot standardize an empty table".into()))?;
    let dim = first.as_ref().len();
    if rows.iter().any(|r| r.as_ref().len() != dim) {
        return Err(Error::Schema("rows have differing lengths".into()));
    }
    let n = rows.len() as f64;
    let mut means = vec![0.0; dim];
    let mut stds = vec![0.0; dim];
    let mut dropped = Vec::new();
    for j in 0..dim {
        let column = || rows.iter().map(|r| r.as_ref()[j]);
        let head = first.as_ref()[j];
        let mean = column().sum::<f64>() / n;
        means[j] = mean;
        if column().all(|x| x == head) {
            dropped.push(j);
            continue;
        }
        stds[j] = (column().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    }
    let stats = Standardization {
        means,
        stds,
        dropped,
    };
    let z = rows
        .iter()
        .map(|r| stats.transform_row(r.as_ref()))
        .collect();
    Ok((z, stats))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub l2_lambda: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-3,
            max_iter: 500,
            grad_tol: 1e-8,
        }
    }
}

/// Result of a ridge-logistic fit on an already standardized design.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// Infinity norm of the objective gradient at the returned parameters.
    pub grad_norm: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Ridge-penalised log-likelihood at `(weights, bias)`.
pub fn objective<R: AsRef<[f64]>>(
    rows: &[R],
    labels: &[MetaLabel],
    weights: &[f64],
    bias: f64,
    l2_lambda: f64,
) -> f64 {
    let loglik: f64 = rows
        .iter()
        .zip(labels)
        .map(|(x, y)| {
            let z = dot(x.as_ref(), weights) + bias;
            match y {
                MetaLabel::True => -softplus(-z),
                MetaLabel::False => -softplus(z),
            }
        })
        .sum();
    let penalty = weights.iter().map(|w| w * w).sum::<f64>() + bias * bias;
    loglik - 0.5 * l2_lambda * penalty
}

/// Gradient of [`objective`]; the bias component comes last.
pub fn gradient<R: AsRef<[f64]>>(
    rows: &[R],
    labels: &[MetaLabel],
    weights: &[f64],
    bias: f64,
    l2_lambda: f64,
) -> Vec<f64> {
    let dim = weights.len();
    let mut grad = vec![0.0; dim + 1];
    for (x, y) in rows.iter().zip(labels) {
        let x = x.as_ref();
        let residual = y.target() - sigmoid(dot(x, weights) + bias);
        for (g, &xj) in grad.iter_mut().zip(x) {
            *g += residual * xj;
        }
        grad[dim] += residual;
    }
    for (g, &w) in grad.iter_mut().zip(weights) {
        *g -= l2_lambda * w;
    }
    grad[dim] -= l2_lambda * bias;
    grad
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, `n x n`).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (b[i] - (0..i).map(|k| l[i * n + k] * y[k]).sum::<f64>()) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (y[i] - (i + 1..n).map(|k| l[k * n + i] * x[k]).sum::<f64>()) / l[i * n + i];
    }
    Some(x)
}

/// Maximises the ridge-logistic objective by IRLS from zero.
///
/// Stops once the gradient infinity norm drops below `grad_tol` or after
/// `max_iter` Newton steps.
pub fn fit_logistic<R: AsRef<[f64]>>(
    rows: &[R],
    labels: &[MetaLabel],
    options: FitOptions,
) -> Result<LogisticFit> {
    if rows.is_empty() {
        return Err(Error::Domain("cannot fit on an empty table".into()));
    }
    if rows.len() != labels.len() {
        return Err(Error::Schema(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    if !(options.l2_lambda >= 0.0 && options.l2_lambda.is_finite()) {
        return Err(Error::Domain(format!(
            "l2_lambda {} must be finite and non-negative",
            options.l2_lambda
        )));
    }
    let dim = rows[0].as_ref().len();
    if rows.iter().any(|r| r.as_ref().len() != dim) {
        return Err(Error::Schema("rows have differing lengths".into()));
    }
    let lambda = options.l2_lambda;
    let p = dim + 1;
    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;
    let mut grad = gradient(rows, labels, &weights, bias, lambda);
    let mut value = objective(rows, labels, &weights, bias, lambda);
    let mut iterations = 0;

    while inf_norm(&grad) >= options.grad_tol && iterations < options.max_iter {
        iterations += 1;
        // Negative Hessian: X' W X + lambda I over the design augmented with a bias column.
        let mut hess = vec![0.0; p * p];
        for x in rows {
            let x = x.as_ref();
            let s = sigmoid(dot(x, &weights) + bias);
            let w = s * (1.0 - s);
            for i in 0..p {
                let xi = if i < dim { x[i] } else { 1.0 };
                if xi == 0.0 {
                    continue;
                }
                for j in 0..=i {
                    let xj = if j < dim { x[j] } else { 1.0 };
                    hess[i * p + j] += w * xi * xj;
                }
            }
        }
        for i in 0..p {
            hess[i * p + i] += lambda;
            for j in 0..i {
                hess[j * p + i] = hess[i * p + j];
            }
        }
        let step = cholesky_solve(&hess, &grad, p).ok_or_else(|| Error::Numerical {
            iteration: iterations,
            message: "Hessian is not positive definite".into(),
        })?;

        let mut scale = 1.0;
        loop {
            let cand_w: Vec<f64> = weights
                .iter()
                .zip(&step)
                .map(|(w, s)| w + scale * s)
                .collect();
            let cand_b = bias + scale * step[dim];
            if cand_w.iter().any(|v| !v.is_finite()) || !cand_b.is_finite() {
                return Err(Error::Numerical {
                    iteration: iterations,
                    message: "non-finite parameters".into(),
                });
            }
            let cand_value = objective(rows, labels, &cand_w, cand_b, lambda);
            if cand_value >= value || scale < 1e-10 {
                weights = cand_w;
                bias = cand_b;
                value = cand_value;
                break;
            }
            scale *= 0.5;
        }
        if !value.is_finite() {
            return Err(Error::Numerical {
                iteration: iterations,
                message: "non-finite objective".into(),
            });
        }
        grad = gradient(rows, labels, &weights, bias, lambda);
    }

    Ok(LogisticFit {
        weights,
        bias,
        iterations,
        grad_norm: inf_norm(&grad),
    })
}

/// A fitted meta classifier over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    /// Weights in standardized feature space; zero for dropped features.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    #[serde(rename = "lambda")]
    pub l2_lambda: f64,
    pub dropped: Vec<usize>,
    pub feature_names: Vec<String>,
    #[serde(default)]
    pub iterations: usize,
    #[serde(default)]
    pub grad_norm: f64,
}

impl MetaModel {
    /// Standardizes raw features and fits the classifier on the kept columns.
    pub fn fit<R: AsRef<[f64]>>(
        rows: &[R],
        labels: &[MetaLabel],
        feature_names: &[&str],
        options: FitOptions,
    ) -> Result<Self> {
        let (z, stats) = standardize_fit(rows)?;
        if z[0].len() != feature_names.len() {
            return Err(Error::Schema(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                z[0].len()
            )));
        }
        let kept: Vec<usize> = (0..feature_names.len())
            .filter(|j| !stats.dropped.contains(j))
            .collect();
        let design: Vec<Vec<f64>> = z
            .iter()
            .map(|row| kept.iter().map(|&j| row[j]).collect())
            .collect();
        let fit = fit_logistic(&design, labels, options)?;
        let mut weights = vec![0.0; feature_names.len()];
        for (&j, &w) in kept.iter().zip(&fit.weights) {
            weights[j] = w;
        }
        Ok(Self {
            weights,
            bias: fit.bias,
            means: stats.means,
            stds: stats.stds,
            l2_lambda: options.l2_lambda,
            dropped: stats.dropped,
            feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
            iterations: fit.iterations,
            grad_norm: fit.grad_norm,
        })
    }

    /// Fits on the canonical segment feature vectors.
    pub fn fit_segments(
        rows: &[[f64; NUM_FEATURES]],
        labels: &[MetaLabel],
        options: FitOptions,
    ) -> Result<Self> {
        Self::fit(rows, labels, &FEATURE_NAMES, options)
    }

    pub fn num_features(&self) -> usize {
        self.weights.len()
    }

    /// Weights expressed on the raw (unstandardized) feature scale.
    pub fn raw_weights(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.stds)
            .map(|(&w, &s)| if s > 0.0 { w / s } else { 0.0 })
            .collect()
    }

    pub fn logit(&self, raw: &[f64]) -> Result<f64> {
        if raw.len() != self.num_features() {
            return Err(Error::Schema(format!(
                "model expects {} features, got {}",
                self.num_features(),
                raw.len()
            )));
        }
        let mut z = self.bias;
        for (j, &x) in raw.iter().enumerate() {
            if self.stds[j] > 0.0 {
                z += self.weights[j] * (x - self.means[j]) / self.stds[j];
            }
        }
        Ok(z)
    }

    pub fn predict_one(&self, raw: &[f64]) -> Result<f64> {
        self.logit(raw).map(sigmoid)
    }

    pub fn predict_proba<R: AsRef<[f64]>>(&self, rows: &[R]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.predict_one(r.as_ref())).collect()
    }

    fn check(&self) -> Result<()> {
        let n = self.weights.len();
        if self.means.len() != n || self.stds.len() != n || self.feature_names.len() != n {
            return Err(Error::Schema(
                "model vectors have inconsistent lengths".into(),
            ));
        }
        let finite = self
            .weights
            .iter()
            .chain(&self.means)
            .chain(&self.stds)
            .chain([&self.bias, &self.l2_lambda])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("model parameters must be finite".into()));
        }
        if self.stds.iter().any(|&s| s < 0.0) || self.l2_lambda < 0.0 {
            return Err(Error::Validation(
                "stds and lambda must be non-negative".into(),
            ));
        }
        for &j in &self.dropped {
            if j >= n || self.weights[j] != 0.0 {
                return Err(Error::Validation(format!(
                    "dropped feature {j} must exist and carry weight 0"
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    /// Parses a model; feature names must be the canonical segment features.
    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("model JSON: {e}")))?;
        if model.feature_names != FEATURE_NAMES {
            return Err(Error::Schema(
                "model feature_names differ from the canonical segment features".into(),
            ));
        }
        model.check()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Features ranked by absolute weight, largest first; ties keep canonical order.
pub fn feature_weights(model: &MetaModel) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = model
        .feature_names
        .iter()
        .cloned()
        .zip(model.weights.iter().copied())
        .collect();
    ranked.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    ranked
}

/// Splits segments into those the model keeps (`p >= cutoff`) and those it removes.
pub fn apply_meta_filter(
    segments: Vec<SegmentRecord>,
    model: &MetaModel,
    cutoff: f64,
) -> Result<(Vec<SegmentRecord>, Vec<SegmentRecord>)> {
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::Domain(format!("cutoff {cutoff} outside (0, 1)")));
    }
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for seg in segments {
        let features = seg
            .features
            .ok_or_else(|| Error::Schema(format!("segment {} has no features", seg.id)))?;
        if model.predict_one(&features.to_array())? >= cutoff {
            kept.push(seg);
        } else {
            removed.push(seg);
        }
    }
    Ok((kept, removed))
}

//! Pixel-wise uncertainty scores and the predicted segmentation.
//!
//! Every score is oriented so that larger values mean more uncertainty and
//! lies in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::tensor::{LabelMask, ProbMap, ScoreMap};

/// Uncertainty measures derivable from a probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Entropy,
    Margin,
    MaxProb,
}

impl Metric {
    pub fn score(self, probs: &ProbMap) -> ScoreMap {
        match self {
            Metric::Entropy => entropy_map(probs),
            Metric::Margin => margin_map(probs),
            Metric::MaxProb => maxprob_map(probs),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "entropy" => Ok(Metric::Entropy),
            "margin" => Ok(Metric::Margin),
            "maxprob" => Ok(Metric::MaxProb),
            other => Err(Error::Domain(format!(
                "unknown metric '{other}', expected entropy, margin or maxprob"
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Entropy => "entropy",
            Metric::Margin => "margin",
            Metric::MaxProb => "maxprob",
        })
    }
}

/// Shannon entropy of one probability vector divided by `ln C`, with `0 ln 0 = 0`.
pub fn normalized_entropy(probs: &[f32]) -> f64 {
    let sum: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let p = f64::from(p);
            p * p.ln()
        })
        .sum();
    -sum / (probs.len() as f64).ln()
}

/// `1 - (p(1) - p(2))` for the two largest probabilities.
pub fn margin(probs: &[f32]) -> f64 {
    let (mut first, mut second) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
    for &p in probs {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    1.0 - (f64::from(first) - f64::from(second))
}

pub fn maxprob_uncertainty(probs: &[f32]) -> f64 {
    1.0 - f64::from(probs.iter().copied().fold(f32::NEG_INFINITY, f32::max))
}

/// Index of the largest probability; ties resolve to the smallest index.
pub fn argmax(probs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

fn per_pixel(probs: &ProbMap, f: impl Fn(&[f32]) -> f64) -> ScoreMap {
    // Inputs may sum to 1 +- 1e-4, so results are pinned to [0, 1].
    let data = probs
        .pixels()
        .map(|px| f(px).clamp(0.0, 1.0) as f32)
        .collect();
    ScoreMap::new(probs.height(), probs.width(), data).expect("per-pixel scores are in range")
}

pub fn entropy_map(probs: &ProbMap) -> ScoreMap {
    per_pixel(probs, normalized_entropy)
}

pub fn margin_map(probs: &ProbMap) -> ScoreMap {
    per_pixel(probs, margin)
}

pub fn maxprob_map(probs: &ProbMap) -> ScoreMap {
    per_pixel(probs, maxprob_uncertainty)
}

pub fn argmax_map(probs: &ProbMap) -> LabelMask {
    let data = probs.pixels().map(|px| argmax(px) as i32).collect();
    LabelMask::new(probs.height(), probs.width(), data).expect("class ids fit the label range")
}

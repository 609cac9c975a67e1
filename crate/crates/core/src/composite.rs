//! Fusion of LF and gamma logits: ensemble averaging and two-class linear
//! discriminant analysis over `(lf_logit, gamma_logit)`.

use serde::{Deserialize, Serialize};

use crate::decoder::LogitPair;
use crate::error::{Error, Result};

/// Arithmetic mean of the logits of several decoder instances.
pub fn average_logits(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::InsufficientData("no logits to average".into()));
    }
    Ok(logits.iter().sum::<f64>() / logits.len() as f64)
}

pub type Mat2 = [[f64; 2]; 2];

/// Shared-covariance Gaussian classifier; `p(matched | x) = sigmoid(w.x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub mean0: [f64; 2],
    pub mean1: [f64; 2],
    pub covariance: Mat2,
    pub prior0: f64,
    pub prior1: f64,
    pub weights: [f64; 2],
    pub bias: f64,
    /// True when the covariance needed a ridge to be invertible.
    pub regularized: bool,
}

const MAX_CONDITION: f64 = 1e10;

fn eigenvalues(s: &Mat2) -> (f64, f64) {
    let half_trace = 0.5 * (s[0][0] + s[1][1]);
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let disc = (half_trace * half_trace - det).max(0.0).sqrt();
    (half_trace - disc, half_trace + disc)
}

fn solve(s: &Mat2, v: [f64; 2]) -> [f64; 2] {
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    [
        (s[1][1] * v[0] - s[0][1] * v[1]) / det,
        (s[0][0] * v[1] - s[1][0] * v[0]) / det,
    ]
}

/// Fits the classifier on labelled logit pairs (label `Some(true)` =
/// matched). Pooled covariance uses the `n - 2` denominator; priors are the
/// class frequencies.
pub fn fit_lda(pairs: &[LogitPair]) -> Result<LdaModel> {
    let mut classes: [Vec<[f64; 2]>; 2] = [Vec::new(), Vec::new()];
    for p in pairs {
        let label = p
            .label
            .ok_or_else(|| Error::InvalidParameter("fit_lda needs labelled pairs".into()))?;
        let x = p.features();
        if !(x[0].is_finite() && x[1].is_finite()) {
            return Err(Error::NonFinite("non-finite logit in LDA input".into()));
        }
        classes[usize::from(label)].push(x);
    }
    if classes.iter().any(|c| c.len() < 3) {
        return Err(Error::InsufficientData(format!(
            "LDA needs at least 3 pairs per class, got {} mismatched and {} matched",
            classes[0].len(),
            classes[1].len()
        )));
    }
    let mean = |c: &[[f64; 2]]| {
        let n = c.len() as f64;
        [
            c.iter().map(|x| x[0]).sum::<f64>() / n,
            c.iter().map(|x| x[1]).sum::<f64>() / n,
        ]
    };
    let (mean0, mean1) = (mean(&classes[0]), mean(&classes[1]));
    let mut cov = [[0.0; 2]; 2];
    for (c, mu) in classes.iter().zip([mean0, mean1]) {
        for x in c {
            let d = [x[0] - mu[0], x[1] - mu[1]];
            for i in 0..2 {
                for j in 0..2 {
                    cov[i][j] += d[i] * d[j];
                }
            }
        }
    }
    let n = (classes[0].len() + classes[1].len()) as f64;
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n - 2.0;
        }
    }
    let (lo, hi) = eigenvalues(&cov);
    let mut regularized = false;
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        let ridge = 1e-8 * (cov[0][0] + cov[1][1]) / 2.0;
        if !(ridge > 0.0) {
            return Err(Error::Singular(
                "all LDA inputs coincide within each class".into(),
            ));
        }
        cov[0][0] += ridge;
        cov[1][1] += ridge;
        regularized = true;
    }
    let prior1 = classes[1].len() as f64 / n;
    let prior0 = 1.0 - prior1;
    let diff = [mean1[0] - mean0[0], mean1[1] - mean0[1]];
    let weights = solve(&cov, diff);
    let mid = [0.5 * (mean0[0] + mean1[0]), 0.5 * (mean0[1] + mean1[1])];
    let bias = -(weights[0] * mid[0] + weights[1] * mid[1]) + (prior1 / prior0).ln();
    Ok(LdaModel {
        mean0,
        mean1,
        covariance: cov,
        prior0,
        prior1,
        weights,
        bias,
        regularized,
    })
}

impl LdaModel {
    pub fn score(&self, x: [f64; 2]) -> f64 {
        self.weights[0] * x[0] + self.weights[1] * x[1] + self.bias
    }

    /// Probability that the pairing is matched.
    pub fn predict_proba(&self, pair: &LogitPair) -> f64 {
        let s = self.score(pair.features());
        if s >= 0.0 {
            1.0 / (1.0 + (-s).exp())
        } else {
            let e = s.exp();
            e / (1.0 + e)
        }
    }
}

/// Chosen candidate; `tied` records that another candidate shared the
/// maximum and the lowest index won.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub tied: bool,
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> Result<Selection> {
    let (first, rest) = scores
        .split_first()
        .ok_or_else(|| Error::InsufficientData("no candidates".into()))?;
    let mut best = Selection {
        index: 0,
        tied: false,
    };
    let mut top = *first;
    for (i, &s) in rest.iter().enumerate() {
        if s > top {
            top = s;
            best = Selection {
                index: i + 1,
                tied: false,
            };
        } else if s == top {
            best.tied = true;
        }
    }
    Ok(best)
}

/// The candidate with the largest matched probability.
pub fn select_match(model: &LdaModel, candidates: &[LogitPair]) -> Result<Selection> {
    if candidates.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} candidates, need at least 2",
            candidates.len()
        )));
    }
    let scores: Vec<f64> = candidates.iter().map(|c| model.predict_proba(c)).collect();
    argmax(&scores)
}

//! Points on the vocabulary simplex and the divergences defined on them.

use crate::error::{Error, Result};

/// Floor applied to probabilities before any logarithm, after which the
/// vector is renormalized. One constant is reused everywhere for uniformity.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on the simplex sum invariant.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex: entries are nonnegative and sum to 1
/// within [`SIMPLEX_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probability vector must be nonempty"));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::invalid(format!("probability entry {p} is not in [0, 1]")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(ProbVector { probs })
    }

    pub fn uniform(len: usize) -> Self {
        ProbVector { probs: vec![1.0 / len as f64; len] }
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::invalid(format!("one-hot index {index} out of range {len}")));
        }
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Ok(ProbVector { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    /// Index of the largest entry; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Numerically stable softmax with temperature: exp((x − max x)/T), normalized.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(Error::invalid("logits must be nonempty"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("logits contain NaN/Inf"));
    }
    let mut probs = vec![0.0; logits.len()];
    softmax_slice(&mut probs, logits, temperature);
    Ok(ProbVector { probs })
}

/// In-place softmax on raw slices; `logits` must be finite and `temp > 0`.
pub(crate) fn softmax_slice(out: &mut [f64], logits: &[f64], temp: f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(logits) {
        let e = ((x - max) / temp).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Floor every entry at [`PROB_FLOOR`] and renormalize.
pub(crate) fn floor_renorm(probs: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = probs.iter().map(|&p| p.max(PROB_FLOOR)).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

/// KL(p ‖ q) = Σ p·(ln p − ln q), with 0·ln 0 := 0 and q floored at
/// [`PROB_FLOOR`] then renormalized so the result is finite and nonnegative.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "KL length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let qf = floor_renorm(q.as_slice());
    let mut kl = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(&qf) {
        if pi > 0.0 {
            kl += pi * (pi.ln() - qi.ln());
        }
    }
    Ok(kl)
}

/// −ln q[target], with q floored at [`PROB_FLOOR`] then renormalized.
pub fn cross_entropy(q: &ProbVector, target: usize) -> Result<f64> {
    if target >= q.len() {
        return Err(Error::invalid(format!(
            "cross-entropy target {target} out of range {}",
            q.len()
        )));
    }
    let qf = floor_renorm(q.as_slice());
    Ok(-qf[target].ln())
}

/// Shannon entropy in nats with the 0·ln 0 := 0 convention.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

//! Plain-slice numerics shared by the graph ops and the metrics code.

use crate::error::{NumericError, Result};

/// Max-shifted log-sum-exp, optionally skipping one index.
pub(crate) fn logsumexp_skip(values: &[f64], skip: Option<usize>) -> f64 {
    let max = values
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + s.ln()
}

pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(NumericError::Empty("logsumexp"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NumericError::NonFinite("logsumexp input".into()));
    }
    Ok(logsumexp_skip(values, None))
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(logits)?;
    Ok(logits.iter().map(|v| (v - lse).exp()).collect())
}

pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

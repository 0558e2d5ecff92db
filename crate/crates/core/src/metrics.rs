//! Spearman rank-order and Pearson linear correlation.

use crate::error::{Error, Result};
use crate::pipeline::{predict_dataset, LoadedDataset, QualityModel};

fn check(pred: &[f64], obj: &[f64]) -> Result<()> {
    if pred.len() != obj.len() {
        return Err(Error::Shape(format!(
            "{} predictions against {} objective scores",
            pred.len(),
            obj.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Degenerate("correlation needs at least 2 samples".into()));
    }
    if pred.iter().chain(obj).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite score".into()));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Centred product-moment correlation.
pub fn plcc(pred: &[f64], obj: &[f64]) -> Result<f64> {
    check(pred, obj)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mo = obj.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, o) in pred.iter().zip(obj) {
        let (a, b) = (p - mp, o - mo);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant score vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of average ranks.
pub fn srcc(pred: &[f64], obj: &[f64]) -> Result<f64> {
    check(pred, obj)?;
    plcc(&average_ranks(pred), &average_ranks(obj))
}

/// 1 − 6Σd²/(B(B²−1)); exact only without ties.
pub fn srcc_closed_form(pred: &[f64], obj: &[f64]) -> Result<f64> {
    check(pred, obj)?;
    let (rp, ro) = (average_ranks(pred), average_ranks(obj));
    let b = pred.len() as f64;
    let d2: f64 = rp.iter().zip(&ro).map(|(a, c)| (a - c) * (a - c)).sum();
    Ok(1.0 - 6.0 * d2 / (b * (b * b - 1.0)))
}

/// Patch-averaged predictions on a test set with their SRCC and PLCC.
pub fn evaluate_split(
    model: &QualityModel,
    test: &LoadedDataset,
    n_patches: usize,
    seed: u64,
) -> Result<(f64, f64, Vec<f64>)> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let pred = predict_dataset(model, test, n_patches, seed)?;
    Ok((srcc(&pred, &test.targets)?, plcc(&pred, &test.targets)?, pred))
}

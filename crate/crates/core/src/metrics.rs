//! Loss and agreement measures shared by training, evaluation and analysis.

use crate::error::{Error, Result};

pub const BCE_CLAMP: f64 = 1e-7;

/// `-(t ln s + (1 - t) ln(1 - s))` with `s` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_term(pred: f64, target: f64) -> f64 {
    let s = pred.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(target * s.ln() + (1.0 - target) * (1.0 - s).ln())
}

/// Derivative of [`bce_term`] with respect to `pred`; zero where the clamp is active.
pub fn bce_term_grad(pred: f64, target: f64) -> f64 {
    if pred <= BCE_CLAMP || pred >= 1.0 - BCE_CLAMP {
        return 0.0;
    }
    -target / pred + (1.0 - target) / (1.0 - pred)
}

/// Mean soft-label binary cross-entropy.
pub fn bce_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| bce_term(*p, *t)).sum::<f64>() / pred.len() as f64)
}

/// Fractional ranks (1-based), ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    pearson(&average_ranks(a), &average_ranks(b))
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

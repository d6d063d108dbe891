//! Pearson and Spearman correlation with average-rank tie handling.

use crate::error::{Error, Result};

/// Correlations over two series; `None` marks an undefined value caused by
/// zero variance rather than letting NaN propagate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correlations {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

fn pearson_raw(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va.sqrt() * vb.sqrt()))
    }
}

/// Average ranks (1-based); ties share the mean of their rank positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average 1-based rank.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Product-moment and rank correlation of two equal-length series.
pub fn correlate(a: &[f64], b: &[f64]) -> Result<Correlations> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!(
            "series lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 3 {
        return Err(Error::Domain(format!(
            "need at least 3 points, got {}",
            a.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Domain("series contain non-finite values".into()));
    }
    let pearson = pearson_raw(a, b);
    let spearman = pearson_raw(&average_ranks(a), &average_ranks(b));
    Ok(Correlations { pearson, spearman })
}

//! Scalar metrics: ranks, top-k accuracy, silhouette and rank correlation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `k` of the reported top-k: 5, or half the classes rounded up below 5 classes.
pub fn report_k(classes: usize) -> usize {
    if classes >= 5 {
        5
    } else {
        classes.div_ceil(2)
    }
}

/// 1-based rank of `label` in a probability row; ties rank pessimistically.
pub fn rank_of(row: &[f64], label: usize) -> usize {
    let p = row[label];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(i, &q)| i != label && q >= p)
        .count()
}

/// Fraction of rows whose label ranks within `k`.
pub fn top_k_accuracy(probs: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let [n, y] = *probs.shape() else {
        return Err(Error::shape(format!("probabilities {:?}", probs.shape())));
    };
    if n != labels.len() {
        return Err(Error::shape(format!("{n} rows for {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= y) {
        return Err(Error::LabelOutOfRange { label: bad, classes: y });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| rank_of(&probs.data()[i * y..(i + 1) * y], l) <= k)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Mean squared difference of two equally long coordinate arrays.
pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("mse of {} and {} values", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient under Euclidean distance. Points in singleton
/// clusters score 0. Needs at least two clusters.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::shape(format!("{} points for {} labels", points.len(), labels.len())));
    }
    let clusters = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; clusters];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InsufficientData("silhouette needs at least two clusters".into()));
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; clusters];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(&points[i], &points[j]);
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..clusters)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Ranks with ties sharing their average position, 1-based.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "rank correlation of {} and {} values",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

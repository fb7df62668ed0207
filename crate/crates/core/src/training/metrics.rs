use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel confusion counts for the change class (label 1).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// Scores of the change class.
    pub fn scores(&self) -> F1Scores {
        scores(self.tp, self.fp, self.fn_)
    }

    /// F1 averaged over the change and no-change classes.
    pub fn mean_f1(&self) -> f64 {
        let negative = scores(self.tn, self.fn_, self.fp).f1;
        (self.scores().f1 + negative) / 2.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn scores(tp: u64, fp: u64, fn_: u64) -> F1Scores {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Scores { precision, recall, f1 }
}

/// Confusion counts of the per-pixel argmax of `logits` (`[n, 2, h, w]`)
/// against binary `labels` (`n·h·w`, row-major per image). Ties predict
/// no-change.
pub fn confusion(logits: &Tensor, labels: &[u8]) -> Result<Confusion> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != 2 {
        return Err(Error::shape("evaluate_f1", format!("logits {s:?}, expected [n, 2, h, w]")));
    }
    let (n, plane) = (s[0], s[2] * s[3]);
    if labels.len() != n * plane {
        return Err(Error::shape("evaluate_f1", format!("{} labels for {n}x{plane} pixels", labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::NonBinaryMask);
    }
    let d = logits.data();
    let mut c = Confusion::default();
    for i in 0..n {
        for p in 0..plane {
            let pred = d[(i * 2 + 1) * plane + p] > d[i * 2 * plane + p];
            match (pred, labels[i * plane + p] == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
    }
    Ok(c)
}

/// Precision, recall and F1 of the change class; zero denominators give 0.
pub fn evaluate_f1(logits: &Tensor, labels: &[u8]) -> Result<F1Scores> {
    Ok(confusion(logits, labels)?.scores())
}

/// Mean over dimensions of the per-dimension standard deviation (population
/// form) of the L2-normalized rows of `z` (`[n, d]`). About `1/√d` for
/// isotropic embeddings and 0 when every row is the same.
pub fn collapse_statistic(z: &Tensor) -> Result<f64> {
    let s = z.shape();
    if s.len() != 2 {
        return Err(Error::shape("collapse_statistic", format!("{s:?}, expected [n, d]")));
    }
    let (n, d) = (s[0], s[1]);
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let rows: Vec<Vec<f64>> = z
        .data()
        .chunks(d)
        .map(|r| {
            let norm = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            r.iter().map(|&v| if norm > 0.0 { v as f64 / norm } else { 0.0 }).collect()
        })
        .collect();
    let mut total = 0.0;
    for k in 0..d {
        let mean = rows.iter().map(|r| r[k]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n as f64;
        total += var.sqrt();
    }
    Ok(total / d as f64)
}

/// [`collapse_statistic`] within each category, averaged over categories
/// with at least two rows. Foreground and background embeddings are meant to
/// differ, so mixing them would hide a within-region collapse.
pub fn collapse_statistic_by_category(z: &Tensor, categories: &[usize]) -> Result<f64> {
    let s = z.shape();
    if s.len() != 2 || categories.len() != s[0] {
        return Err(Error::shape("collapse_statistic", format!("{s:?} with {} categories", categories.len())));
    }
    let d = s[1];
    let mut kinds: Vec<usize> = categories.to_vec();
    kinds.sort_unstable();
    kinds.dedup();
    let mut stats = Vec::new();
    for k in kinds {
        let rows: Vec<f32> = categories
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c == k)
            .flat_map(|(i, _)| z.data()[i * d..(i + 1) * d].iter().copied())
            .collect();
        if rows.len() >= 2 * d {
            stats.push(collapse_statistic(&Tensor::new([rows.len() / d, d], rows)?)?);
        }
    }
    if stats.is_empty() {
        return Err(Error::BatchTooSmall(s[0]));
    }
    Ok(stats.iter().sum::<f64>() / stats.len() as f64)
}

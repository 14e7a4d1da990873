//! Classification metrics over logits.

use inavit::model::{cross_entropy, predict_topk};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Per-class fraction of samples whose label appears in their top-5 list,
/// averaged over the classes present in `labels`.
pub fn mean_top5_recall(predictions: &[Vec<usize>], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(HarnessError::Empty("mean_top5_recall"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut hits = vec![0usize; classes];
    let mut counts = vec![0usize; classes];
    for (p, &y) in predictions.iter().zip(labels) {
        counts[y] += 1;
        if p.iter().take(5).any(|&c| c == y) {
            hits[y] += 1;
        }
    }
    let present: Vec<f64> =
        counts.iter().zip(&hits).filter(|(&n, _)| n > 0).map(|(&n, &h)| h as f64 / n as f64).collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRecall {
    pub class: usize,
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub top1: f64,
    pub mean_top5_recall: f64,
    /// Classes with at least one sample.
    pub per_class: Vec<ClassRecall>,
    /// Mean cross-entropy.
    pub loss: f64,
    pub wall_clock_s: f64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn from_logits(logits: &[Vec<f32>], labels: &[usize], config_hash: &str, wall_clock_s: f64) -> Result<Self> {
        if logits.is_empty() || logits.len() != labels.len() {
            return Err(HarnessError::Empty("metrics"));
        }
        let classes = logits[0].len();
        let mut top5 = Vec::with_capacity(logits.len());
        let mut loss = 0.0;
        let mut correct = 0;
        let mut per = vec![(0usize, 0usize, 0usize); classes];
        for (z, &y) in logits.iter().zip(labels) {
            let p = predict_topk(z, 5.min(classes))?;
            loss += cross_entropy(z, y)? as f64;
            let e = &mut per[y];
            e.0 += 1;
            if p[0] == y {
                correct += 1;
                e.1 += 1;
            }
            if p.contains(&y) {
                e.2 += 1;
            }
            top5.push(p);
        }
        let per_class = per
            .iter()
            .enumerate()
            .filter(|(_, e)| e.0 > 0)
            .map(|(c, &(n, h1, h5))| ClassRecall {
                class: c,
                samples: n,
                top1: h1 as f64 / n as f64,
                top5: h5 as f64 / n as f64,
            })
            .collect();
        Ok(Self {
            samples: labels.len(),
            top1: correct as f64 / labels.len() as f64,
            mean_top5_recall: mean_top5_recall(&top5, labels)?,
            per_class,
            loss: loss / labels.len() as f64,
            wall_clock_s,
            config_hash: config_hash.to_string(),
        })
    }
}

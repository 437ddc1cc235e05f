//! RMSE, Pearson correlation, R² and rank AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Task;
use crate::ops::sigmoid;

fn check_pair(preds: &[f64], labels: &[f64]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "metrics: {} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.len() < 2 {
        return Err(Error::Contract(format!("metrics need at least 2 samples, got {}", preds.len())));
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::Data("metrics: non-finite prediction or label".into()));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    let se: f64 = preds.iter().zip(labels).map(|(p, y)| (y - p) * (y - p)).sum();
    Ok((se / preds.len() as f64).sqrt())
}

pub fn pcc(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    let (mp, my) = (mean(preds), mean(labels));
    let (mut cov, mut vp, mut vy) = (0.0, 0.0, 0.0);
    for (p, y) in preds.iter().zip(labels) {
        let (dp, dy) = (p - mp, y - my);
        cov += dp * dy;
        vp += dp * dp;
        vy += dy * dy;
    }
    if vy == 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "pcc",
            reason: "labels have zero variance",
        });
    }
    if vp == 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "pcc",
            reason: "predictions have zero variance",
        });
    }
    Ok((cov / (vp * vy).sqrt()).clamp(-1.0, 1.0))
}

pub fn r2(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(preds, labels)?;
    let my = mean(labels);
    let ss_res: f64 = preds.iter().zip(labels).map(|(p, y)| (y - p) * (y - p)).sum();
    let ss_tot: f64 = labels.iter().map(|y| (y - my) * (y - my)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric {
            metric: "r2",
            reason: "labels have zero variance",
        });
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Probability that a random positive outscores a random negative, with ties
/// counted as one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_pair(scores, labels)?;
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Data("auc labels must be 0 or 1".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric {
            metric: "auc",
            reason: "labels contain a single class",
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub pcc: f64,
    pub r2: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
    pub n: usize,
}

/// Classification outputs are logits: RMSE, PCC and R² use the predicted
/// probability, AUC ranks the logits directly.
pub fn metrics(preds: &[f64], labels: &[f64], task: Task) -> Result<Metrics> {
    match task {
        Task::Regression => Ok(Metrics {
            rmse: rmse(preds, labels)?,
            pcc: pcc(preds, labels)?,
            r2: r2(preds, labels)?,
            auc: None,
            n: preds.len(),
        }),
        Task::Classification => {
            let probs: Vec<f64> = preds.iter().map(|&z| sigmoid(z)).collect();
            Ok(Metrics {
                rmse: rmse(&probs, labels)?,
                pcc: pcc(&probs, labels)?,
                r2: r2(&probs, labels)?,
                auc: Some(auc(preds, labels)?),
                n: preds.len(),
            })
        }
    }
}

/// Like [`Metrics`] but with undefined values left empty, for progress logs
/// where a constant early prediction is normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LenientMetrics {
    pub rmse: Option<f64>,
    pub pcc: Option<f64>,
    pub r2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
}

pub fn lenient_metrics(preds: &[f64], labels: &[f64], task: Task) -> LenientMetrics {
    let probs: Vec<f64> = match task {
        Task::Regression => preds.to_vec(),
        Task::Classification => preds.iter().map(|&z| sigmoid(z)).collect(),
    };
    LenientMetrics {
        rmse: rmse(&probs, labels).ok(),
        pcc: pcc(&probs, labels).ok(),
        r2: r2(&probs, labels).ok(),
        auc: match task {
            Task::Regression => None,
            Task::Classification => auc(preds, labels).ok(),
        },
    }
}

/// Metrics with the provenance needed to reproduce them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub split: String,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub seed: u64,
    pub config_hash: String,
}

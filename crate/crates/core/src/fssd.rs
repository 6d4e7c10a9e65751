//! Channel importance from class statistics and importance-weighted feature distillation.
//!
//! For class `c` and channel `j`, with `μ`/`σ²` taken over the unit-normalized
//! spatial means of that class's samples, `I_{c,j} = T_{c,j} · μ_{c,j} / σ²_{c,j}`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::normalized;

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Unbiased, floored at [`VARIANCE_FLOOR`].
    pub var: Vec<f64>,
    pub count: usize,
}

pub fn compute_channel_stats(features: &[Vec<f64>]) -> Result<ChannelStats> {
    if features.len() < 2 {
        return Err(Error::InsufficientData {
            op: "compute_channel_stats",
            needed: 2,
            got: features.len(),
        });
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::dim(
            "compute_channel_stats",
            format!("mixed widths {d} and {}", bad.len()),
        ));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for f in features {
        for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).max(VARIANCE_FLOOR));
    Ok(ChannelStats {
        mean,
        var,
        count: features.len(),
    })
}

/// `1/σ²` per channel.
pub fn fisher_sensitivity(stats: &ChannelStats) -> Vec<f64> {
    stats.var.iter().map(|v| 1.0 / v).collect()
}

/// Empirical Fisher `E[((x-μ)/σ²)²]` over `draws` samples of `N(μ, σ²)`.
pub fn monte_carlo_fisher<R: Rng + ?Sized>(mean: f64, var: f64, draws: usize, rng: &mut R) -> Result<f64> {
    if draws == 0 {
        return Err(Error::InsufficientData {
            op: "monte_carlo_fisher",
            needed: 1,
            got: 0,
        });
    }
    let normal = Normal::new(mean, var.sqrt()).map_err(|e| Error::input("monte_carlo_fisher", e.to_string()))?;
    let total: f64 = (0..draws)
        .map(|_| {
            let score = (normal.sample(rng) - mean) / var;
            score * score
        })
        .sum();
    Ok(total / draws as f64)
}

/// `T_j · μ_j / λ` with `λ = 1`.
pub fn classification_contribution(stats: &ChannelStats, text: &[f64]) -> Result<Vec<f64>> {
    if text.len() != stats.mean.len() {
        return Err(Error::dim(
            "classification_contribution",
            format!("text width {} vs {} channels", text.len(), stats.mean.len()),
        ));
    }
    Ok(text.iter().zip(&stats.mean).map(|(t, m)| t * m).collect())
}

/// `T · μ / σ²` before the non-negativity floor.
pub fn raw_channel_importance(stats: &ChannelStats, text: &[f64]) -> Result<Vec<f64>> {
    let contrib = classification_contribution(stats, text)?;
    Ok(contrib.iter().zip(fisher_sensitivity(stats)).map(|(c, f)| c * f).collect())
}

/// Importance row with negative entries set to zero.
pub fn channel_importance(stats: &ChannelStats, text: &[f64]) -> Result<Vec<f64>> {
    Ok(raw_channel_importance(stats, text)?.into_iter().map(|v| v.max(0.0)).collect())
}

/// Per-class importance rows computed from raw spatial means, which are
/// unit-normalized before the statistics are taken.
pub fn class_importance(
    features_by_class: &BTreeMap<usize, Vec<Vec<f64>>>,
    texts: &BTreeMap<usize, Vec<f64>>,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    features_by_class
        .iter()
        .map(|(&c, feats)| {
            let text = texts
                .get(&c)
                .ok_or_else(|| Error::input("class_importance", format!("no text embedding for class {c}")))?;
            let unit = feats.iter().map(|f| normalized(f)).collect::<Result<Vec<_>>>()?;
            let stats = compute_channel_stats(&unit)?;
            Ok((c, channel_importance(&stats, text)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub channels: usize,
    /// Floored importance per seen class.
    pub rows: BTreeMap<usize, Vec<f64>>,
    /// Mean over `rows`, rescaled to channel-mean 1.
    pub accumulated: Vec<f64>,
}

impl ImportanceTable {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            rows: BTreeMap::new(),
            accumulated: vec![1.0; channels],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Channels sorted by accumulated weight, largest first.
    pub fn ranked_channels(&self) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.accumulated.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked
    }

    fn recompute(&mut self) {
        let mut mean = vec![0.0; self.channels];
        for row in self.rows.values() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.rows.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let channel_mean = mean.iter().sum::<f64>() / self.channels as f64;
        self.accumulated = if channel_mean > 0.0 {
            mean.iter().map(|m| m / channel_mean).collect()
        } else {
            vec![1.0; self.channels]
        };
    }
}

/// Adds new class rows and recomputes the accumulated weights. Classes already
/// present are rejected, since a finished task's importance is immutable.
pub fn accumulate_importance(mut table: ImportanceTable, new_rows: BTreeMap<usize, Vec<f64>>) -> Result<ImportanceTable> {
    for (c, row) in new_rows {
        if row.len() != table.channels {
            return Err(Error::dim(
                "accumulate_importance",
                format!("class {c} row has {} channels, table has {}", row.len(), table.channels),
            ));
        }
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::input("accumulate_importance", format!("class {c} row must be finite and >= 0")));
        }
        if table.rows.insert(c, row).is_some() {
            return Err(Error::input("accumulate_importance", format!("class {c} already accumulated")));
        }
    }
    table.recompute();
    Ok(table)
}

fn check_pair(prev: &[Vec<f64>], cur: &[Vec<f64>], weights: &[f64]) -> Result<()> {
    if prev.len() != cur.len() {
        return Err(Error::dim(
            "fssd_loss",
            format!("{} previous vs {} current samples", prev.len(), cur.len()),
        ));
    }
    if prev.is_empty() {
        return Err(Error::input("fssd_loss", "empty batch"));
    }
    for (p, c) in prev.iter().zip(cur) {
        if p.len() != weights.len() || c.len() != weights.len() {
            return Err(Error::dim(
                "fssd_loss",
                format!("feature widths {}/{} vs {} weights", p.len(), c.len(), weights.len()),
            ));
        }
    }
    Ok(())
}

/// `(1/(N·d)) Σ_n Σ_j w_j (prev_nj − cur_nj)²`.
pub fn fssd_loss(prev: &[Vec<f64>], cur: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    check_pair(prev, cur, weights)?;
    let total: f64 = prev
        .iter()
        .zip(cur)
        .map(|(p, c)| {
            p.iter()
                .zip(c)
                .zip(weights)
                .map(|((a, b), w)| w * (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(total / (prev.len() * weights.len()) as f64)
}

/// Loss and its gradient with respect to `cur`.
pub fn fssd_loss_grad(prev: &[Vec<f64>], cur: &[Vec<f64>], weights: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    let loss = fssd_loss(prev, cur, weights)?;
    let scale = 1.0 / (prev.len() * weights.len()) as f64;
    let grads = prev
        .iter()
        .zip(cur)
        .map(|(p, c)| {
            p.iter()
                .zip(c)
                .zip(weights)
                .map(|((a, b), w)| -2.0 * scale * w * (a - b))
                .collect()
        })
        .collect();
    Ok((loss, grads))
}

/// Plain mean squared feature distillation, `Ī ≡ 1`.
pub fn uniform_distill_loss(prev: &[Vec<f64>], cur: &[Vec<f64>]) -> Result<f64> {
    let width = prev.first().map_or(0, Vec::len);
    check_pair(prev, cur, &vec![0.0; width])?;
    let total: f64 = prev
        .iter()
        .zip(cur)
        .map(|(p, c)| p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / (prev.len() * width) as f64)
}

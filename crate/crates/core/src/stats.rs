//! Per-channel feature-map statistics.
//!
//! * M-std: mean over samples of the spatial sample standard deviation of a
//!   feature map (diversity).
//! * Similarity: mean over samples of the absolute cosine between two
//!   flattened feature maps of the same layer.
//! * M-corr: row mean of the similarity matrix, self-pair included.
//! * Top-k-corr: mean of the `k` largest off-diagonal entries of a row.
//!
//! Everything accumulates in f64. Row sums are taken over sorted values so
//! that permuting channels permutes the outputs bit-exactly.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorio::ActivationSet;

pub const DEFAULT_TOPK: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("layer {layer_id:?}: M-std needs at least two spatial positions, feature maps are 1x1")]
    DegenerateSpatial { layer_id: String },
    #[error("layer {layer_id:?}: top-k with k={k} needs k <= N-1 = {max}")]
    KTooLarge { layer_id: String, k: usize, max: usize },
    #[error("top-k needs k >= 1")]
    KZero,
    #[error("statistics report needs at least one layer")]
    EmptyReport,
}

/// Per-channel statistics of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub layer_id: String,
    pub m_std: Vec<f64>,
    pub m_corr: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub topk_corr: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

impl FeatureStats {
    pub fn channels(&self) -> usize {
        self.m_std.len()
    }
}

/// Symmetric matrix of mean absolute cosine similarities.
///
/// `channel_ids` maps row positions back to original channel indices, so a
/// restricted matrix keeps talking about the layer's real channels.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    layer_id: String,
    channel_ids: Vec<usize>,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Builds a matrix from a dense row-major buffer. Panics unless the buffer
    /// is `n * n` and symmetric.
    pub fn from_dense(layer_id: impl Into<String>, channel_ids: Vec<usize>, values: Vec<f64>) -> Self {
        let n = channel_ids.len();
        assert_eq!(values.len(), n * n, "similarity buffer must be n*n");
        for j in 0..n {
            for p in j + 1..n {
                assert_eq!(
                    values[j * n + p].to_bits(),
                    values[p * n + j].to_bits(),
                    "similarity matrix must be symmetric"
                );
            }
        }
        Self {
            layer_id: layer_id.into(),
            channel_ids,
            values,
        }
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn len(&self) -> usize {
        self.channel_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channel_ids.is_empty()
    }

    pub fn channel_ids(&self) -> &[usize] {
        &self.channel_ids
    }

    /// Entry at row/column positions (not channel ids).
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.len() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.len();
        &self.values[row * n..(row + 1) * n]
    }

    /// Position of an original channel id.
    pub fn position(&self, channel: usize) -> Option<usize> {
        self.channel_ids.iter().position(|&c| c == channel)
    }

    /// Sub-matrix over `positions`, in the given order.
    pub fn restrict(&self, positions: &[usize]) -> SimilarityMatrix {
        let n = self.len();
        let mut values = Vec::with_capacity(positions.len() * positions.len());
        for &r in positions {
            for &c in positions {
                values.push(self.values[r * n + c]);
            }
        }
        SimilarityMatrix {
            layer_id: self.layer_id.clone(),
            channel_ids: positions.iter().map(|&p| self.channel_ids[p]).collect(),
            values,
        }
    }

    /// Element-wise mean of matrices sharing the same channel ids.
    pub fn mean_of(layer_id: impl Into<String>, mats: &[&SimilarityMatrix]) -> SimilarityMatrix {
        assert!(!mats.is_empty(), "mean of zero matrices");
        let ids = mats[0].channel_ids.clone();
        assert!(
            mats.iter().all(|m| m.channel_ids == ids),
            "averaged matrices must share channel ids"
        );
        let count = mats.len() as f64;
        let values = (0..ids.len() * ids.len())
            .map(|i| mats.iter().map(|m| m.values[i]).sum::<f64>() / count)
            .collect();
        SimilarityMatrix {
            layer_id: layer_id.into(),
            channel_ids: ids,
            values,
        }
    }
}

/// Sample standard deviation of one flattened map (two-pass).
///
/// Values are shifted by the first element so a constant map yields exactly 0.
fn sample_std(map: &[f64]) -> f64 {
    let n = map.len() as f64;
    let x0 = map[0];
    let mean = map.iter().map(|&x| x - x0).sum::<f64>() / n;
    let ss: f64 = map.iter().map(|&x| (x - x0 - mean) * (x - x0 - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

pub fn compute_m_std(acts: &ActivationSet) -> Result<Vec<f64>, StatsError> {
    if acts.map_len() < 2 {
        return Err(StatsError::DegenerateSpatial {
            layer_id: acts.layer_id().to_string(),
        });
    }
    let t = acts.samples();
    Ok((0..acts.channels())
        .into_par_iter()
        .map(|j| (0..t).map(|m| sample_std(acts.map(m, j))).sum::<f64>() / t as f64)
        .collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// |cos| of two maps given their squared norms; zero vectors contribute 0.
/// `sqrt(|a|^2 |b|^2)` rather than `|a| |b|` keeps parallel maps at exactly 1.
fn abs_cos(a: &[f64], b: &[f64], sq_a: f64, sq_b: f64) -> f64 {
    if sq_a == 0.0 || sq_b == 0.0 {
        return 0.0;
    }
    (dot(a, b).abs() / (sq_a * sq_b).sqrt()).min(1.0)
}

pub fn compute_similarity_matrix(acts: &ActivationSet) -> SimilarityMatrix {
    let n = acts.channels();
    let t = acts.samples();
    let sq_norms: Vec<f64> = (0..t)
        .flat_map(|m| (0..n).map(move |j| (m, j)))
        .map(|(m, j)| {
            let v = acts.map(m, j);
            dot(v, v)
        })
        .collect();
    let norm = |m: usize, j: usize| sq_norms[m * n + j];

    // Upper triangle (diagonal included), one row per task.
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            (j..n)
                .map(|p| {
                    let total: f64 = (0..t)
                        .map(|m| {
                            if p == j {
                                if norm(m, j) == 0.0 {
                                    0.0
                                } else {
                                    1.0
                                }
                            } else {
                                abs_cos(acts.map(m, j), acts.map(m, p), norm(m, j), norm(m, p))
                            }
                        })
                        .sum();
                    total / t as f64
                })
                .collect()
        })
        .collect();

    let mut values = vec![0.0; n * n];
    for (j, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let p = j + off;
            values[j * n + p] = v;
            values[p * n + j] = v;
        }
    }
    SimilarityMatrix {
        layer_id: acts.layer_id().to_string(),
        channel_ids: (0..n).collect(),
        values,
    }
}

fn sorted_desc(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

pub fn compute_m_corr(sim: &SimilarityMatrix) -> Vec<f64> {
    let n = sim.len();
    (0..n)
        .map(|j| sorted_desc(sim.row(j).iter().copied()).iter().sum::<f64>() / n as f64)
        .collect()
}

pub fn compute_topk_corr(sim: &SimilarityMatrix, k: usize) -> Result<Vec<f64>, StatsError> {
    let n = sim.len();
    if k == 0 {
        return Err(StatsError::KZero);
    }
    if n == 0 || k > n - 1 {
        return Err(StatsError::KTooLarge {
            layer_id: sim.layer_id().to_string(),
            k,
            max: n.saturating_sub(1),
        });
    }
    Ok((0..n)
        .map(|j| {
            let others = sim.row(j).iter().enumerate().filter(|&(p, _)| p != j).map(|(_, &v)| v);
            sorted_desc(others)[..k].iter().sum::<f64>() / k as f64
        })
        .collect())
}

/// M-std, M-corr and (when the layer has more than `k` channels) Top-k-corr.
pub fn compute_layer_stats(acts: &ActivationSet, k: usize) -> Result<FeatureStats, StatsError> {
    let m_std = compute_m_std(acts)?;
    let sim = compute_similarity_matrix(acts);
    let m_corr = compute_m_corr(&sim);
    let topk_corr = if k >= 1 && k < sim.len() {
        Some(compute_topk_corr(&sim, k)?)
    } else {
        None
    };
    Ok(FeatureStats {
        layer_id: acts.layer_id().to_string(),
        m_std,
        m_corr,
        k: topk_corr.as_ref().map(|_| k),
        topk_corr,
    })
}

/// Pearson correlation coefficient; NaN when either input has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "pearson inputs must have equal length");
    let n = x.len() as f64;
    if x.len() < 2 {
        return f64::NAN;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx.sqrt() * syy.sqrt())
}

/// Formats with 9 significant digits, plain notation when reasonable.
pub fn fmt_sig9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    // Round to 9 significant digits first, then decide the layout from the
    // rounded exponent so 9.999999999 does not print ten digits.
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        trim_fraction(&fixed)
    } else {
        format!("{}e{}", trim_fraction(mantissa), exp)
    }
}

fn trim_fraction(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub const GLOBAL_PEARSON_ROW: &str = "GLOBAL_PEARSON";
pub const SUMMARY_CHANNEL: &str = "ALL";

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// CSV document: one row per channel, one `ALL` row per layer holding the
/// column means, and a final `GLOBAL_PEARSON,ALL` row whose `m_std` cell is
/// the Pearson correlation of M-std against M-corr over every channel.
pub fn stats_report(stats: &[FeatureStats]) -> Result<String, StatsError> {
    if stats.is_empty() {
        return Err(StatsError::EmptyReport);
    }
    let mut out = String::from("layer_id,channel,m_std,m_corr,topk_corr\n");
    let cell = |v: Option<f64>| v.map(fmt_sig9).unwrap_or_default();
    for s in stats {
        for j in 0..s.channels() {
            let topk = s.topk_corr.as_ref().map(|t| t[j]);
            writeln!(
                out,
                "{},{},{},{},{}",
                s.layer_id,
                j,
                fmt_sig9(s.m_std[j]),
                fmt_sig9(s.m_corr[j]),
                cell(topk)
            )
            .expect("write to String");
        }
        writeln!(
            out,
            "{},{},{},{},{}",
            s.layer_id,
            SUMMARY_CHANNEL,
            fmt_sig9(mean(&s.m_std)),
            fmt_sig9(mean(&s.m_corr)),
            cell(s.topk_corr.as_deref().map(mean))
        )
        .expect("write to String");
    }
    let (xs, ys) = global_columns(stats);
    writeln!(
        out,
        "{},{},{},,",
        GLOBAL_PEARSON_ROW,
        SUMMARY_CHANNEL,
        fmt_sig9(pearson(&xs, &ys))
    )
    .expect("write to String");
    Ok(out)
}

fn global_columns(stats: &[FeatureStats]) -> (Vec<f64>, Vec<f64>) {
    let xs = stats.iter().flat_map(|s| s.m_std.iter().copied()).collect();
    let ys = stats.iter().flat_map(|s| s.m_corr.iter().copied()).collect();
    (xs, ys)
}

/// JSON flavour of [`stats_report`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReportJson {
    pub format_version: String,
    pub layers: Vec<FeatureStats>,
    /// `None` when undefined (zero variance).
    pub pearson_m_std_m_corr: Option<f64>,
}

pub fn stats_report_json(stats: &[FeatureStats]) -> Result<StatsReportJson, StatsError> {
    if stats.is_empty() {
        return Err(StatsError::EmptyReport);
    }
    let (xs, ys) = global_columns(stats);
    let r = pearson(&xs, &ys);
    Ok(StatsReportJson {
        format_version: "1".into(),
        layers: stats.to_vec(),
        pearson_m_std_m_corr: r.is_finite().then_some(r),
    })
}

//! Channel selection.
//!
//! Two stages run per layer:
//!
//! 1. Diversity filter (DFS): channels whose M-std falls below a threshold
//!    `beta` are dropped. `beta` is pooled over every prunable layer, so the
//!    per-layer pruning ratio falls out of the data rather than being fixed.
//! 2. Similarity filter (SFS): among DFS survivors, the most similar pair is
//!    located, one member becomes a reference, and every survivor more
//!    similar than `nu` to that reference is dropped. This repeats until no
//!    surviving pair exceeds `nu`.
//!
//! Residual networks need channel indices to line up across element-wise
//! additions. Layers feeding the same addition chain form a post-addition
//! group that is selected once, on statistics averaged over its members, and
//! the resulting index set is applied to every conv owning that channel
//! space (including shortcut projections).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GroupKind, LayerKind, ModelGraph};
use crate::plan::{GroupPlan, LayerPlan, PruningPlan, SfsRemoval, PLAN_FORMAT_VERSION};
use crate::stats::{compute_m_std, compute_similarity_matrix, SimilarityMatrix, StatsError, DEFAULT_TOPK};
use crate::tensorio::ActivationSet;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("invalid prune config: {0}")]
    InvalidConfig(String),
    #[error("empty M-std pool: {0}")]
    EmptyPool(String),
    #[error("no activations for {0}")]
    MissingActivations(String),
    #[error("activation shape mismatch: {0}")]
    ActivationShape(String),
    #[error("group inconsistency: {0}")]
    GroupInconsistency(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

type Result<T, E = SelectError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DfsMode {
    Mean,
    Percentile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One threshold pool over every prunable layer.
    Global,
    /// Separate pools for sequential-branch layers and post-addition groups.
    ResidualTwoGroup,
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grouping::Global => "global",
            Grouping::ResidualTwoGroup => "residual_two_group",
        })
    }
}

/// Selection settings. When deserialized, omitted fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub dfs_mode: DfsMode,
    /// Used when `dfs_mode` is `percentile`; in (0, 100).
    pub dfs_percentile: f64,
    /// Similarity threshold; in (0, 1].
    pub nu: f64,
    pub grouping: Grouping,
    pub topk_k: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            dfs_mode: DfsMode::Percentile,
            dfs_percentile: 40.0,
            nu: 0.85,
            grouping: Grouping::Global,
            topk_k: DEFAULT_TOPK,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(SelectError::InvalidConfig(format!(
                "nu must lie in (0, 1], got {}",
                self.nu
            )));
        }
        if !(self.dfs_percentile > 0.0 && self.dfs_percentile < 100.0) {
            return Err(SelectError::InvalidConfig(format!(
                "dfs_percentile must lie in (0, 100), got {}",
                self.dfs_percentile
            )));
        }
        if self.topk_k == 0 {
            return Err(SelectError::InvalidConfig("topk_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// p-th percentile with linear interpolation between order statistics
/// (position `p / 100 * (n - 1)` in the sorted pool).
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Diversity threshold over a pool of M-std values.
pub fn pooled_threshold(pool: &[f64], config: &PruneConfig) -> Result<f64> {
    if pool.is_empty() {
        return Err(SelectError::EmptyPool("no channels to threshold".into()));
    }
    Ok(match config.dfs_mode {
        // Offset by the first value so a constant pool returns it exactly.
        DfsMode::Mean => pool[0] + pool.iter().map(|&v| v - pool[0]).sum::<f64>() / pool.len() as f64,
        DfsMode::Percentile => percentile(pool, config.dfs_percentile).expect("nonempty pool"),
    })
}

/// Threshold over the M-std values of every layer in `stats`.
pub fn dfs_threshold(stats: &[crate::stats::FeatureStats], config: &PruneConfig) -> Result<f64> {
    let pool: Vec<f64> = stats.iter().flat_map(|s| s.m_std.iter().copied()).collect();
    pooled_threshold(&pool, config)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DfsOutcome {
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
    /// Every channel fell below `beta`; the most diverse one was kept anyway.
    pub floor_rule_applied: bool,
}

pub fn dfs_select(m_std: &[f64], beta: f64) -> DfsOutcome {
    let (mut kept, mut removed): (Vec<usize>, Vec<usize>) = (0..m_std.len()).partition(|&j| m_std[j] >= beta);
    let mut floor_rule_applied = false;
    if kept.is_empty() && !m_std.is_empty() {
        let best = (0..m_std.len())
            .reduce(|a, b| if m_std[b] > m_std[a] { b } else { a })
            .expect("nonempty");
        removed.retain(|&j| j != best);
        kept.push(best);
        floor_rule_applied = true;
    }
    DfsOutcome {
        kept,
        removed,
        floor_rule_applied,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfsOutcome {
    /// Ascending channel ids.
    pub kept: Vec<usize>,
    /// Ascending by channel.
    pub removed: Vec<SfsRemoval>,
    /// Number of reference picks.
    pub iterations: usize,
}

/// Greedy similarity filter over the channels `kept_in` of `sim`.
///
/// Each round takes the most similar surviving pair (ties: smallest
/// `(row, col)` channel ids), keeps the member with the larger `m_std`
/// (ties: lower id) as reference, and drops every other survivor whose
/// similarity to the reference exceeds `nu`. The reference and the dropped
/// channels leave the candidate pool before the next round. `m_std` is
/// indexed by channel id.
pub fn sfs_select(sim: &SimilarityMatrix, kept_in: &[usize], m_std: &[f64], nu: f64) -> SfsOutcome {
    let mut ids: Vec<usize> = kept_in.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let positions: Vec<usize> = ids
        .iter()
        .map(|&c| sim.position(c).expect("kept_in channel missing from similarity matrix"))
        .collect();
    let local = sim.restrict(&positions);
    let n = ids.len();

    let mut alive = vec![true; n];
    let mut references = Vec::new();
    let mut removed = Vec::new();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in (0..n).filter(|&a| alive[a]) {
            for b in (a + 1..n).filter(|&b| alive[b]) {
                let v = local.get(a, b);
                if best.is_none_or(|(_, _, bv)| v > bv) {
                    best = Some((a, b, v));
                }
            }
        }
        let (a, b) = match best {
            Some((a, b, v)) if v > nu => (a, b),
            _ => break,
        };
        let r = if m_std[ids[b]] > m_std[ids[a]] { b } else { a };
        alive[r] = false;
        references.push(ids[r]);
        for j in 0..n {
            if alive[j] && local.get(r, j) > nu {
                alive[j] = false;
                removed.push(SfsRemoval {
                    channel: ids[j],
                    reference: ids[r],
                    similarity: local.get(r, j),
                });
            }
        }
    }

    let iterations = references.len();
    let mut kept: Vec<usize> = references
        .into_iter()
        .chain((0..n).filter(|&j| alive[j]).map(|j| ids[j]))
        .collect();
    kept.sort_unstable();
    removed.sort_by_key(|r| r.channel);
    SfsOutcome {
        kept,
        removed,
        iterations,
    }
}

/// DFS followed by SFS on one set of channel statistics.
pub fn select_channels(m_std: &[f64], sim: &SimilarityMatrix, beta: f64, nu: f64) -> (DfsOutcome, SfsOutcome) {
    let dfs = dfs_select(m_std, beta);
    let sfs = sfs_select(sim, &dfs.kept, m_std, nu);
    (dfs, sfs)
}

// ---------------------------------------------------------------------------
// Global scheme
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pool {
    Sequential = 0,
    PostAddition = 1,
}

/// One independent selection problem: a standalone conv, or a post-addition
/// group whose owners share one index set.
#[derive(Debug)]
struct Unit {
    name: String,
    group: Option<usize>,
    owners: Vec<usize>,
    sources: Vec<String>,
    pool: Pool,
}

struct UnitStats {
    m_std: Vec<f64>,
    sim: SimilarityMatrix,
}

fn build_units(graph: &ModelGraph, acts: &BTreeMap<String, ActivationSet>) -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    let mut covered: BTreeMap<usize, String> = BTreeMap::new();

    for (gi, g) in graph.groups().iter().enumerate() {
        if g.kind != GroupKind::PostAddition {
            continue;
        }
        let members: Vec<usize> = g
            .members
            .iter()
            .map(|m| graph.layer_index(m).expect("validated member"))
            .collect();
        let owners = graph.channel_owners(&members);
        for &o in &owners {
            let layer = &graph.layers()[o];
            if layer.kind != LayerKind::Conv {
                return Err(SelectError::GroupInconsistency(format!(
                    "group {:?} shares channels with {} layer {:?}, which cannot be pruned",
                    g.name, layer.kind, layer.id
                )));
            }
            if let Some(other) = covered.insert(o, g.name.clone()) {
                return Err(SelectError::GroupInconsistency(format!(
                    "layer {:?} belongs to both {other:?} and {:?}",
                    layer.id, g.name
                )));
            }
        }
        let sources: Vec<String> = g.members.iter().filter(|m| acts.contains_key(*m)).cloned().collect();
        if sources.is_empty() {
            return Err(SelectError::MissingActivations(format!(
                "post_addition group {:?} (none of {:?})",
                g.name, g.members
            )));
        }
        units.push(Unit {
            name: g.name.clone(),
            group: Some(gi),
            owners,
            sources,
            pool: Pool::PostAddition,
        });
    }

    for (i, layer) in graph.layers().iter().enumerate() {
        if !layer.prunable || covered.contains_key(&i) {
            continue;
        }
        let owners = graph.channel_owners(&[i]);
        if owners != [i] {
            let others: Vec<&str> = owners
                .iter()
                .filter(|&&o| o != i)
                .map(|&o| graph.layers()[o].id.as_str())
                .collect();
            return Err(SelectError::GroupInconsistency(format!(
                "{:?} shares its channels with {:?} through an element-wise addition; declare a post_addition group",
                layer.id, others
            )));
        }
        if !acts.contains_key(&layer.id) {
            return Err(SelectError::MissingActivations(format!("layer {:?}", layer.id)));
        }
        units.push(Unit {
            name: layer.id.clone(),
            group: None,
            owners,
            sources: vec![layer.id.clone()],
            pool: Pool::Sequential,
        });
    }
    units.sort_by_key(|u| u.owners[0]);
    Ok(units)
}

fn unit_stats(graph: &ModelGraph, unit: &Unit, acts: &BTreeMap<String, ActivationSet>) -> Result<UnitStats> {
    let channels = graph.layers()[unit.owners[0]].out_channels;
    let mut m_stds = Vec::with_capacity(unit.sources.len());
    let mut sims = Vec::with_capacity(unit.sources.len());
    for src in &unit.sources {
        let a = &acts[src];
        if a.channels() != channels {
            return Err(SelectError::ActivationShape(format!(
                "{src:?} activations have {} channels, graph says {channels}",
                a.channels()
            )));
        }
        m_stds.push(compute_m_std(a)?);
        sims.push(compute_similarity_matrix(a));
    }
    let count = m_stds.len() as f64;
    let m_std = (0..channels)
        .map(|j| m_stds.iter().map(|v| v[j]).sum::<f64>() / count)
        .collect();
    let sim = if sims.len() == 1 {
        sims.pop().expect("one matrix")
    } else {
        SimilarityMatrix::mean_of(unit.name.clone(), &sims.iter().collect::<Vec<_>>())
    };
    Ok(UnitStats { m_std, sim })
}

/// Runs statistics, thresholding and both selection stages over every
/// prunable layer and post-addition group of `graph`.
pub fn run_pruning(
    graph: &ModelGraph,
    acts: &BTreeMap<String, ActivationSet>,
    config: &PruneConfig,
) -> Result<PruningPlan> {
    config.validate()?;
    let units = build_units(graph, acts)?;
    let stats: Vec<UnitStats> = units
        .par_iter()
        .map(|u| unit_stats(graph, u, acts))
        .collect::<Result<_>>()?;

    let pools: Vec<Vec<Pool>> = match config.grouping {
        Grouping::Global => vec![vec![Pool::Sequential, Pool::PostAddition]],
        Grouping::ResidualTwoGroup => vec![vec![Pool::Sequential], vec![Pool::PostAddition]],
    };
    let mut betas = Vec::with_capacity(pools.len());
    let mut unit_beta = vec![0.0; units.len()];
    for members in &pools {
        let idx: Vec<usize> = (0..units.len()).filter(|&u| members.contains(&units[u].pool)).collect();
        let pool: Vec<f64> = idx.iter().flat_map(|&u| stats[u].m_std.iter().copied()).collect();
        let beta = pooled_threshold(&pool, config).map_err(|_| {
            SelectError::EmptyPool(match (config.grouping, members[0]) {
                (Grouping::Global, _) => "no prunable layers or post_addition groups".into(),
                (_, Pool::Sequential) => "residual grouping found no sequential-branch prunable layers".into(),
                (_, Pool::PostAddition) => "residual grouping found no post_addition groups".into(),
            })
        })?;
        idx.iter().for_each(|&u| unit_beta[u] = beta);
        betas.push(beta);
    }

    let outcomes: Vec<(DfsOutcome, SfsOutcome)> = stats
        .par_iter()
        .zip(unit_beta.par_iter())
        .map(|(s, &beta)| select_channels(&s.m_std, &s.sim, beta, config.nu))
        .collect();

    let mut by_layer: BTreeMap<usize, LayerPlan> = BTreeMap::new();
    let mut groups = Vec::new();
    for (unit, (dfs, sfs)) in units.iter().zip(&outcomes) {
        for &o in &unit.owners {
            by_layer.insert(
                o,
                LayerPlan {
                    layer_id: graph.layers()[o].id.clone(),
                    kept: sfs.kept.clone(),
                    removed_dfs: dfs.removed.clone(),
                    removed_sfs: sfs.removed.clone(),
                    floor_rule_applied: dfs.floor_rule_applied,
                },
            );
        }
        if let Some(gi) = unit.group {
            let spec = &graph.groups()[gi];
            let mut members: BTreeSet<usize> = unit.owners.iter().copied().collect();
            members.extend(spec.members.iter().map(|m| graph.layer_index(m).expect("validated")));
            groups.push(GroupPlan {
                name: spec.name.clone(),
                members: members.into_iter().map(|i| graph.layers()[i].id.clone()).collect(),
                kept: sfs.kept.clone(),
            });
        }
    }

    Ok(PruningPlan {
        format_version: PLAN_FORMAT_VERSION.into(),
        config: config.clone(),
        beta: betas,
        layers: by_layer.into_values().collect(),
        groups,
    })
}

//! Shared oracles and fixture builders for the integration tests.
//!
//! The oracles are deliberately naive: plain nested loops over explicit
//! `[t][n][h*w]` arrays, no shared code with the library.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use featprune::graph::{LayerKind, ModelGraph};
use featprune::surgery::{LayerWeights, WeightBundle};
use featprune::tensorio::{write_tensor, ActivationSet, TensorFile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn fixture_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

// ---------------------------------------------------------------------------
// Statistics oracles
// ---------------------------------------------------------------------------

/// `maps[t][n]` is one flattened feature map.
pub type Maps = Vec<Vec<Vec<f64>>>;

pub fn to_maps(a: &ActivationSet) -> Maps {
    (0..a.samples())
        .map(|t| (0..a.channels()).map(|n| a.map(t, n).to_vec()).collect())
        .collect()
}

pub fn oracle_m_std(maps: &Maps) -> Vec<f64> {
    let t_count = maps.len();
    let n_count = maps[0].len();
    let mut out = vec![0.0; n_count];
    for n in 0..n_count {
        let mut total = 0.0;
        for t in 0..t_count {
            let x = &maps[t][n];
            let mut mean = 0.0;
            for v in x {
                mean += v;
            }
            mean /= x.len() as f64;
            let mut ss = 0.0;
            for v in x {
                ss += (v - mean) * (v - mean);
            }
            total += (ss / (x.len() as f64 - 1.0)).sqrt();
        }
        out[n] = total / t_count as f64;
    }
    out
}

pub fn oracle_similarity(maps: &Maps) -> Vec<Vec<f64>> {
    let t_count = maps.len();
    let n_count = maps[0].len();
    let mut s = vec![vec![0.0; n_count]; n_count];
    for i in 0..n_count {
        for j in 0..n_count {
            let mut acc = 0.0;
            for t in 0..t_count {
                let (a, b) = (&maps[t][i], &maps[t][j]);
                let mut dot = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for k in 0..a.len() {
                    dot += a[k] * b[k];
                    na += a[k] * a[k];
                    nb += b[k] * b[k];
                }
                if na > 0.0 && nb > 0.0 {
                    acc += (dot / (na.sqrt() * nb.sqrt())).abs();
                }
            }
            s[i][j] = acc / t_count as f64;
        }
    }
    s
}

pub fn oracle_m_corr(s: &[Vec<f64>]) -> Vec<f64> {
    s.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect()
}

pub fn oracle_topk(s: &[Vec<f64>], k: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for (i, row) in s.iter().enumerate() {
        let mut others: Vec<f64> = Vec::new();
        for (j, v) in row.iter().enumerate() {
            if i != j {
                others.push(*v);
            }
        }
        others.sort_by(|a, b| b.partial_cmp(a).unwrap());
        out.push(others[..k].iter().sum::<f64>() / k as f64);
    }
    out
}

/// Random activations with a sprinkling of degenerate channels: zero maps,
/// constant maps, exact copies and negated copies.
pub fn random_activations(rng: &mut ChaCha8Rng, max_t: usize, max_n: usize, max_hw: usize) -> ActivationSet {
    let t = rng.gen_range(1..=max_t);
    let n = rng.gen_range(1..=max_n);
    let hw = rng.gen_range(2..=max_hw);
    let len = hw * hw;
    let mut data = vec![0.0; t * n * len];
    for c in 0..n {
        let kind = rng.gen_range(0..10);
        for s in 0..t {
            let base = (s * n + c) * len;
            for k in 0..len {
                data[base + k] = match kind {
                    0 => 0.0,
                    1 => 0.25,
                    _ => rng.gen_range(-3.0..3.0),
                };
            }
            if kind >= 8 && c > 0 {
                let src = (s * n + c - 1) * len;
                let sign = if kind == 8 { 1.0 } else { -2.0 };
                for k in 0..len {
                    data[base + k] = sign * data[src + k];
                }
            }
        }
    }
    ActivationSet::new("rand", [t, n, hw, hw], data).unwrap()
}

// ---------------------------------------------------------------------------
// SFS oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SfsTrace {
    pub kept: Vec<usize>,
    /// `(removed channel, reference)` in channel order.
    pub removed: Vec<(usize, usize)>,
    pub iterations: usize,
}

/// Step-by-step greedy similarity filter over channels `x`:
///
/// ```text
/// B <- {}
/// while X has a pair and max_{i<j in X} s_ij > nu:
///     (a, b) <- first maximal pair in row-major order
///     r <- a if m[a] >= m[b] else b
///     B <- B + {r};  X <- X - {r}
///     for j in X: if s_rj > nu: X <- X - {j}   (pruned, reference r)
/// B <- B + X
/// ```
pub fn oracle_sfs(s: &[Vec<f64>], x: &[usize], m_std: &[f64], nu: f64) -> SfsTrace {
    let mut pool: Vec<usize> = x.to_vec();
    pool.sort();
    let mut b: Vec<usize> = Vec::new();
    let mut removed: Vec<(usize, usize)> = Vec::new();
    let mut iterations = 0;
    loop {
        let mut best = f64::NEG_INFINITY;
        let mut pair = None;
        for ii in 0..pool.len() {
            for jj in ii + 1..pool.len() {
                let (i, j) = (pool[ii], pool[jj]);
                if s[i][j] > best {
                    best = s[i][j];
                    pair = Some((i, j));
                }
            }
        }
        let Some((i, j)) = pair else { break };
        if best <= nu {
            break;
        }
        iterations += 1;
        let r = if m_std[i] >= m_std[j] { i } else { j };
        b.push(r);
        pool.retain(|&c| c != r);
        let mut survivors = Vec::new();
        for &c in &pool {
            if s[r][c] > nu {
                removed.push((c, r));
            } else {
                survivors.push(c);
            }
        }
        pool = survivors;
    }
    b.extend(pool);
    b.sort();
    removed.sort();
    SfsTrace {
        kept: b,
        removed,
        iterations,
    }
}

pub fn dense(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

// ---------------------------------------------------------------------------
// On-disk fixtures
// ---------------------------------------------------------------------------

pub fn write_json(path: &Path, value: &serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

/// Writes one `.npy` per layer plus `manifest.json` pointing at `graph_file`.
pub fn write_manifest(dir: &Path, graph_file: &Path, acts: &[ActivationSet]) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let mut entries = Vec::new();
    for a in acts {
        let name = format!("{}.npy", a.layer_id());
        let shape = vec![a.samples(), a.channels(), a.height(), a.width()];
        let t = TensorFile::from_f64(shape, a.as_slice().to_vec()).unwrap();
        write_tensor(dir.join(&name), &t).unwrap();
        entries.push(json!({"layer_id": a.layer_id(), "tensor": name, "samples": a.samples()}));
    }
    let path = dir.join("manifest.json");
    write_json(
        &path,
        &json!({"format_version": "1", "model_graph": graph_file, "entries": entries}),
    );
    path
}

/// Rows 1..16 of the 16x16 Sylvester-Hadamard matrix: balanced +-1 patterns,
/// pairwise orthogonal, each with sample std exactly sqrt(16/15).
pub fn hadamard_row(i: usize) -> Vec<f64> {
    (0..16)
        .map(|j| {
            if (i & j).count_ones().is_multiple_of(2) {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// Planted-redundancy fixture: three 3x3 convs of 8 channels over a 4x4
/// input, then global pooling and an 8 -> 10 classifier.
pub struct Planted {
    pub manifest: PathBuf,
    pub graph: PathBuf,
    /// Per layer: (constant channel, weaker duplicate, stronger duplicate).
    pub planted: Vec<(String, usize, usize, usize)>,
}

pub fn planted_graph() -> serde_json::Value {
    json!({
        "format_version": "1",
        "input": {"channels": 3, "height": 4, "width": 4},
        "layers": [
            {"id": "input", "kind": "input"},
            {"id": "conv1", "kind": "conv", "in": 3, "out": 8, "kernel": 3, "prunable": true},
            {"id": "relu1", "kind": "activation"},
            {"id": "conv2", "kind": "conv", "in": 8, "out": 8, "kernel": 3, "prunable": true},
            {"id": "relu2", "kind": "activation"},
            {"id": "conv3", "kind": "conv", "in": 8, "out": 8, "kernel": 3, "prunable": true},
            {"id": "relu3", "kind": "activation"},
            {"id": "gap", "kind": "pool", "global": true},
            {"id": "fc", "kind": "linear", "in": 8, "out": 10, "bias": true},
            {"id": "output", "kind": "output"}
        ],
        "edges": [
            ["input", "conv1"], ["conv1", "relu1"], ["relu1", "conv2"], ["conv2", "relu2"],
            ["relu2", "conv3"], ["conv3", "relu3"], ["relu3", "gap"], ["gap", "fc"], ["fc", "output"]
        ]
    })
}

pub fn write_planted(dir: &Path) -> Planted {
    fs::create_dir_all(dir).unwrap();
    let graph = dir.join("graph.json");
    write_json(&graph, &planted_graph());

    let planted = vec![
        ("conv1".to_string(), 3, 1, 6),
        ("conv2".to_string(), 0, 7, 4),
        ("conv3".to_string(), 5, 2, 3),
    ];
    let t = 2;
    let acts: Vec<ActivationSet> = planted
        .iter()
        .enumerate()
        .map(|(li, (id, constant, weak, strong))| {
            let mut data = Vec::with_capacity(t * 8 * 16);
            for s in 0..t {
                let sign = if s == 0 { 1.0 } else { -1.0 };
                for c in 0..8 {
                    let map: Vec<f64> = if c == *constant {
                        vec![0.5; 16]
                    } else if c == *strong {
                        hadamard_row(1 + (li * 5 + weak) % 15)
                            .iter()
                            .map(|v| 2.0 * sign * v)
                            .collect()
                    } else {
                        hadamard_row(1 + (li * 5 + c) % 15).iter().map(|v| sign * v).collect()
                    };
                    data.extend(map);
                }
            }
            ActivationSet::new(id.clone(), [t, 8, 4, 4], data).unwrap()
        })
        .collect();
    let manifest = write_manifest(dir, &graph, &acts);
    Planted {
        manifest,
        graph,
        planted,
    }
}

/// Activations for every prunable conv and post-addition member of `graph`,
/// with `t` samples of gaussian-ish noise.
pub fn random_graph_activations(graph: &ModelGraph, t: usize, seed: u64) -> Vec<ActivationSet> {
    let mut rng = rng(seed);
    let mut wanted: Vec<&str> = graph
        .layers()
        .iter()
        .filter(|l| l.prunable)
        .map(|l| l.id.as_str())
        .collect();
    for g in graph.groups() {
        if g.kind == featprune::graph::GroupKind::PostAddition {
            wanted.extend(g.members.iter().map(String::as_str));
        }
    }
    wanted.sort();
    wanted.dedup();
    wanted
        .into_iter()
        .map(|id| {
            let l = graph.layer(id).unwrap();
            let (h, w) = l.out_hw;
            let n = l.out_channels;
            let data = (0..t * n * h * w)
                .map(|_| {
                    let u: f64 = rng.gen_range(0.0..1.0);
                    u * rng.gen_range(0.0..2.0) - 0.5
                })
                .collect();
            ActivationSet::new(id, [t, n, h, w], data).unwrap()
        })
        .collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> TensorFile {
    let len = shape.iter().product();
    let data: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    TensorFile::from_f32(shape, data).unwrap()
}

/// A full, shape-consistent random weight bundle for `graph`.
pub fn random_bundle(graph: &ModelGraph, seed: u64) -> WeightBundle {
    let mut rng = rng(seed);
    let mut entries = BTreeMap::new();
    for l in graph.layers() {
        let k = l.kernel;
        let (weight, bn) = match l.kind {
            LayerKind::Conv => (Some(vec![l.out_channels, l.in_channels, k, k]), None),
            LayerKind::DepthwiseConv => (Some(vec![l.out_channels, 1, k, k]), None),
            LayerKind::Linear => (Some(vec![l.out_channels, l.in_channels]), None),
            LayerKind::Batchnorm => (None, Some(vec![4, l.out_channels])),
            _ => continue,
        };
        let bias = (l.bias && l.kind != LayerKind::Batchnorm).then(|| vec![l.out_channels]);
        entries.insert(
            l.id.clone(),
            LayerWeights {
                weight: weight.map(|s| random_tensor(&mut rng, s)),
                bias: bias.map(|s| random_tensor(&mut rng, s)),
                bn: bn.map(|s| random_tensor(&mut rng, s)),
            },
        );
    }
    WeightBundle { entries }
}

/// Every file under `dir`, relative path -> bytes.
pub fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// `(layer_id, params, flops)`.
pub type CountRow = (String, u64, u64);

/// Parses a committed `<graph>.counts.csv` into (per-layer rows, totals).
pub fn read_counts(name: &str) -> (Vec<CountRow>, (u64, u64)) {
    let text = fs::read_to_string(fixture_path(name)).unwrap();
    let mut rows = Vec::new();
    let mut total = None;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (p, fl) = (f[2].parse().unwrap(), f[3].parse().unwrap());
        if f[0] == "TOTAL" {
            total = Some((p, fl));
        } else {
            rows.push((f[0].to_string(), p, fl));
        }
    }
    (rows, total.expect("TOTAL row"))
}

//! Weight surgery: slice a weight bundle down to the channels a plan keeps.
//!
//! Tensor layouts follow the usual framework conventions:
//! conv `(out, in, k, k)`, depthwise conv `(n, 1, k, k)`, linear
//! `(out, in)`, bias `(out,)`, batchnorm `(4, n)` holding gamma, beta,
//! running mean and running variance as rows. Surgery only gathers
//! elements; nothing is recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{output_selections, GraphError, Layer, LayerKind, ModelGraph};
use crate::plan::PruningPlan;
use crate::tensorio::{atomic_write, read_tensor, write_tensor, TensorFile, TensorIoError};

pub const WEIGHTS_MANIFEST: &str = "weights_manifest.json";
pub const WEIGHTS_FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum SurgeryError {
    #[error("weights missing: {}", format_mismatches(.0))]
    MissingWeights(Vec<Mismatch>),
    #[error("weight shapes do not match the graph: {}", format_mismatches(.0))]
    ShapeMismatch(Vec<Mismatch>),
    #[error(transparent)]
    Plan(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorIoError),
    #[error("invalid weights manifest {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },
}

fn format_mismatches(m: &[Mismatch]) -> String {
    m.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchKind {
    Missing,
    Shape,
    Unexpected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub layer_id: String,
    pub kind: MismatchKind,
    pub detail: String,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.layer_id, self.detail)
    }
}

/// Parameters of one layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerWeights {
    pub weight: Option<TensorFile>,
    pub bias: Option<TensorFile>,
    pub bn: Option<TensorFile>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightBundle {
    pub entries: BTreeMap<String, LayerWeights>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Expected {
    weight: Option<Vec<usize>>,
    bias: Option<Vec<usize>>,
    bn: Option<Vec<usize>>,
}

fn expected_shapes(layer: &Layer) -> Option<Expected> {
    let k = layer.kernel;
    let bias = layer.bias.then(|| vec![layer.out_channels]);
    match layer.kind {
        LayerKind::Conv => Some(Expected {
            weight: Some(vec![layer.out_channels, layer.in_channels, k, k]),
            bias,
            bn: None,
        }),
        LayerKind::DepthwiseConv => Some(Expected {
            weight: Some(vec![layer.out_channels, 1, k, k]),
            bias,
            bn: None,
        }),
        LayerKind::Linear => Some(Expected {
            weight: Some(vec![layer.out_channels, layer.in_channels]),
            bias,
            bn: None,
        }),
        LayerKind::Batchnorm => Some(Expected {
            weight: None,
            bias: None,
            bn: Some(vec![4, layer.out_channels]),
        }),
        _ => None,
    }
}

/// Shape and presence check of `bundle` against `graph`. Empty iff consistent.
pub fn verify_bundle(bundle: &WeightBundle, graph: &ModelGraph) -> Vec<Mismatch> {
    let mut out = Vec::new();
    for layer in graph.layers() {
        let expected = expected_shapes(layer);
        let entry = bundle.entries.get(&layer.id);
        match (expected, entry) {
            (None, None) => {}
            (None, Some(_)) => out.push(Mismatch {
                layer_id: layer.id.clone(),
                kind: MismatchKind::Unexpected,
                detail: format!("{} layer carries no parameters", layer.kind),
            }),
            (Some(_), None) => out.push(Mismatch {
                layer_id: layer.id.clone(),
                kind: MismatchKind::Missing,
                detail: "no weight entry".into(),
            }),
            (Some(exp), Some(got)) => {
                let slots = [
                    ("weight", &exp.weight, &got.weight),
                    ("bias", &exp.bias, &got.bias),
                    ("bn", &exp.bn, &got.bn),
                ];
                for (name, want, have) in slots {
                    match (want, have) {
                        (None, None) => {}
                        (Some(_), None) => out.push(Mismatch {
                            layer_id: layer.id.clone(),
                            kind: MismatchKind::Missing,
                            detail: format!("missing {name}"),
                        }),
                        (None, Some(_)) => out.push(Mismatch {
                            layer_id: layer.id.clone(),
                            kind: MismatchKind::Unexpected,
                            detail: format!("unexpected {name}"),
                        }),
                        (Some(w), Some(h)) if w.as_slice() != h.shape() => out.push(Mismatch {
                            layer_id: layer.id.clone(),
                            kind: MismatchKind::Shape,
                            detail: format!("{name} has shape {:?}, graph implies {:?}", h.shape(), w),
                        }),
                        _ => {}
                    }
                }
            }
        }
    }
    for id in bundle.entries.keys() {
        if graph.layer(id).is_none() {
            out.push(Mismatch {
                layer_id: id.clone(),
                kind: MismatchKind::Unexpected,
                detail: "layer not in graph".into(),
            });
        }
    }
    out
}

fn slice_opt(t: &TensorFile, axis: usize, sel: Option<&Vec<usize>>) -> Result<TensorFile, TensorIoError> {
    match sel {
        Some(idx) => t.select_axis(axis, idx),
        None => Ok(t.clone()),
    }
}

/// Restricts every tensor of `bundle` to the channels kept by `plan`.
pub fn apply_plan_weights(
    bundle: &WeightBundle,
    graph: &ModelGraph,
    plan: &PruningPlan,
) -> Result<WeightBundle, SurgeryError> {
    let problems = verify_bundle(bundle, graph);
    if problems.iter().any(|m| m.kind == MismatchKind::Missing) {
        return Err(SurgeryError::MissingWeights(
            problems
                .into_iter()
                .filter(|m| m.kind == MismatchKind::Missing)
                .collect(),
        ));
    }
    if !problems.is_empty() {
        return Err(SurgeryError::ShapeMismatch(problems));
    }
    let sel = output_selections(graph, plan)?;

    let mut entries = BTreeMap::new();
    for (i, layer) in graph.layers().iter().enumerate() {
        let Some(w) = bundle.entries.get(&layer.id) else {
            continue;
        };
        let out_sel = sel[i].as_ref();
        let in_sel = graph.producers(i).first().and_then(|&p| sel[p].as_ref());
        let sliced = match layer.kind {
            LayerKind::Conv => LayerWeights {
                weight: w
                    .weight
                    .as_ref()
                    .map(|t| slice_opt(&slice_opt(t, 0, out_sel)?, 1, in_sel))
                    .transpose()?,
                bias: w.bias.as_ref().map(|t| slice_opt(t, 0, out_sel)).transpose()?,
                bn: None,
            },
            // One index set drives both axes of a depthwise conv.
            LayerKind::DepthwiseConv => LayerWeights {
                weight: w.weight.as_ref().map(|t| slice_opt(t, 0, in_sel)).transpose()?,
                bias: w.bias.as_ref().map(|t| slice_opt(t, 0, in_sel)).transpose()?,
                bn: None,
            },
            LayerKind::Batchnorm => LayerWeights {
                weight: None,
                bias: None,
                bn: w.bn.as_ref().map(|t| slice_opt(t, 1, out_sel)).transpose()?,
            },
            LayerKind::Linear => {
                // Flattened (c, h, w) input: keep whole spatial blocks.
                let (h, wd) = layer.in_hw;
                let block = h * wd;
                let cols: Option<Vec<usize>> =
                    in_sel.map(|kept| kept.iter().flat_map(|&c| c * block..(c + 1) * block).collect());
                LayerWeights {
                    weight: w.weight.as_ref().map(|t| slice_opt(t, 1, cols.as_ref())).transpose()?,
                    bias: w.bias.clone(),
                    bn: None,
                }
            }
            _ => w.clone(),
        };
        entries.insert(layer.id.clone(), sliced);
    }
    Ok(WeightBundle { entries })
}

// ---------------------------------------------------------------------------
// On-disk layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightFiles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsManifest {
    pub format_version: String,
    pub layers: BTreeMap<String, WeightFiles>,
}

fn file_stem(layer_id: &str) -> String {
    layer_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

impl WeightBundle {
    /// Loads from a `weights_manifest.json` path or a directory holding one.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SurgeryError> {
        let path = path.as_ref();
        let manifest_path = if path.is_dir() {
            path.join(WEIGHTS_MANIFEST)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&manifest_path).map_err(|e| TensorIoError::io(&manifest_path, e))?;
        let manifest: WeightsManifest = serde_json::from_str(&text).map_err(|e| SurgeryError::Manifest {
            path: manifest_path.clone(),
            reason: e.to_string(),
        })?;
        if manifest.format_version != WEIGHTS_FORMAT_VERSION {
            return Err(SurgeryError::Manifest {
                path: manifest_path,
                reason: format!("unsupported format_version {:?}", manifest.format_version),
            });
        }
        let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let load = |p: &Option<PathBuf>| -> Result<Option<TensorFile>, TensorIoError> {
            p.as_ref().map(|p| read_tensor(base.join(p))).transpose()
        };
        let mut entries = BTreeMap::new();
        for (id, files) in &manifest.layers {
            entries.insert(
                id.clone(),
                LayerWeights {
                    weight: load(&files.weight)?,
                    bias: load(&files.bias)?,
                    bn: load(&files.bn)?,
                },
            );
        }
        Ok(WeightBundle { entries })
    }

    /// Writes one NPY file per tensor plus `weights_manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SurgeryError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| TensorIoError::io(dir, e))?;
        let mut used = std::collections::HashSet::new();
        let mut layers = BTreeMap::new();
        for (id, w) in &self.entries {
            let mut stem = file_stem(id);
            let mut n = 1;
            while !used.insert(stem.clone()) {
                n += 1;
                stem = format!("{}~{n}", file_stem(id));
            }
            let mut files = WeightFiles::default();
            for (slot, tensor, target) in [
                ("weight", &w.weight, &mut files.weight),
                ("bias", &w.bias, &mut files.bias),
                ("bn", &w.bn, &mut files.bn),
            ] {
                if let Some(t) = tensor {
                    let name = PathBuf::from(format!("{stem}.{slot}.npy"));
                    write_tensor(dir.join(&name), t)?;
                    *target = Some(name);
                }
            }
            layers.insert(id.clone(), files);
        }
        let manifest = WeightsManifest {
            format_version: WEIGHTS_FORMAT_VERSION.into(),
            layers,
        };
        let path = dir.join(WEIGHTS_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        atomic_write(&path, text.as_bytes()).map_err(|e| TensorIoError::io(&path, e))?;
        Ok(())
    }
}

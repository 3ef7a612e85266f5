//! Model-graph description, validation, shape propagation under a pruning
//! plan, and parameter/FLOPs accounting.
//!
//! FLOPs count a multiply-accumulate as two operations.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use petgraph::algo::toposort;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plan::PruningPlan;

pub const GRAPH_FORMAT_VERSION: &str = "1";
pub const FLOPS_CONVENTION: &str = "FLOPs counted as 2 per multiply-accumulate";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("cannot read graph {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("graph schema error: {0}")]
    Schema(String),
    #[error("channel mismatch at {layer:?}: {detail}")]
    ChannelMismatch { layer: String, detail: String },
    #[error("graph contains a cycle through {0:?}")]
    CycleDetected(String),
    #[error("group inconsistency: {0}")]
    GroupInconsistency(String),
    #[error("layer {0:?} would be left without input channels")]
    DanglingLayer(String),
    #[error("plan does not match graph: {0}")]
    PlanMismatch(String),
}

type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Input,
    Conv,
    DepthwiseConv,
    Batchnorm,
    Linear,
    AddJoin,
    Pool,
    Activation,
    Output,
}

impl LayerKind {
    /// Kinds whose output channel `c` is input channel `c`.
    pub fn is_channel_passthrough(self) -> bool {
        matches!(
            self,
            LayerKind::DepthwiseConv
                | LayerKind::Batchnorm
                | LayerKind::Pool
                | LayerKind::Activation
                | LayerKind::Output
                | LayerKind::AddJoin
        )
    }

    /// Kinds that define their own output channel space.
    pub fn owns_channels(self) -> bool {
        matches!(self, LayerKind::Input | LayerKind::Conv | LayerKind::Linear)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("kind serializes");
        f.write_str(s.as_str().expect("string kind"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// Layers inside sequential branches except the last (f1+f2).
    SequentialInternal,
    /// Feature maps after element-wise addition (f-last).
    PostAddition,
}

// ---------------------------------------------------------------------------
// JSON document
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub id: String,
    pub kind: LayerKind,
    #[serde(rename = "in", default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(rename = "out", default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prunable: Option<bool>,
    /// Pool only: reduce to 1x1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<bool>,
    /// Free-form, carried through untouched (e.g. activation capture point).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub name: String,
    pub kind: GroupKind,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDocument {
    pub format_version: String,
    pub input: InputSpec,
    pub layers: Vec<LayerDoc>,
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub groups: Vec<GroupSpec>,
}

// ---------------------------------------------------------------------------
// Resolved graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
    pub prunable: bool,
    pub global_pool: bool,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub metadata: Option<serde_json::Value>,
    /// Number of producers (add_join arity).
    pub fan_in: usize,
}

/// A validated, shape-resolved DAG of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    input: InputSpec,
    layers: Vec<Layer>,
    edges: Vec<(String, String)>,
    groups: Vec<GroupSpec>,
    index: HashMap<String, usize>,
    producers: Vec<Vec<usize>>,
    consumers: Vec<Vec<usize>>,
    topo: Vec<usize>,
}

fn schema(msg: impl Into<String>) -> GraphError {
    GraphError::Schema(msg.into())
}

impl ModelGraph {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_json(&text)
    }

    pub fn parse_json(text: &str) -> Result<Self> {
        let doc: GraphDocument = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn from_document(doc: GraphDocument) -> Result<Self> {
        if doc.format_version != GRAPH_FORMAT_VERSION {
            return Err(schema(format!("unsupported format_version {:?}", doc.format_version)));
        }
        let InputSpec {
            channels,
            height,
            width,
        } = doc.input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(schema("input dimensions must be positive"));
        }

        let mut index = HashMap::new();
        for (i, l) in doc.layers.iter().enumerate() {
            if index.insert(l.id.clone(), i).is_some() {
                return Err(schema(format!("duplicate layer id {:?}", l.id)));
            }
        }
        let n = doc.layers.len();
        let mut producers = vec![Vec::new(); n];
        let mut consumers = vec![Vec::new(); n];
        let mut dag = DiGraph::<usize, ()>::with_capacity(n, doc.edges.len());
        let nodes: Vec<_> = (0..n).map(|i| dag.add_node(i)).collect();
        let mut seen_edges = HashSet::new();
        for (a, b) in &doc.edges {
            let (&ia, &ib) = match (index.get(a), index.get(b)) {
                (Some(ia), Some(ib)) => (ia, ib),
                _ => return Err(schema(format!("edge ({a:?}, {b:?}) names an unknown layer"))),
            };
            if !seen_edges.insert((ia, ib)) {
                return Err(schema(format!("duplicate edge ({a:?}, {b:?})")));
            }
            producers[ib].push(ia);
            consumers[ia].push(ib);
            dag.add_edge(nodes[ia], nodes[ib], ());
        }
        let topo = toposort(&dag, None)
            .map_err(|cycle| GraphError::CycleDetected(doc.layers[dag[cycle.node_id()]].id.clone()))?
            .into_iter()
            .map(|node| dag[node])
            .collect();

        let layers = doc
            .layers
            .iter()
            .map(|l| Layer {
                id: l.id.clone(),
                kind: l.kind,
                in_channels: l.in_channels.unwrap_or(0),
                out_channels: l.out_channels.unwrap_or(0),
                kernel: l.kernel.unwrap_or(0),
                stride: l.stride.unwrap_or(0),
                padding: l.padding.unwrap_or(0),
                bias: l.bias.unwrap_or(false),
                prunable: l.prunable.unwrap_or(false),
                global_pool: l.global.unwrap_or(false),
                in_hw: (0, 0),
                out_hw: (0, 0),
                metadata: l.metadata.clone(),
                fan_in: 0,
            })
            .collect();

        let mut graph = ModelGraph {
            input: doc.input,
            layers,
            edges: doc.edges,
            groups: doc.groups,
            index,
            producers,
            consumers,
            topo,
        };
        graph.resolve(&doc.layers, false)?;
        graph.check_groups()?;
        Ok(graph)
    }

    /// Resolves channel counts and spatial shapes in topological order.
    ///
    /// With `propagate`, conv/linear input counts are taken from producers
    /// instead of being checked against declared values.
    fn resolve(&mut self, docs: &[LayerDoc], propagate: bool) -> Result<()> {
        let order = self.topo.clone();
        for i in order {
            let doc = &docs[i];
            let prods = self.producers[i].clone();
            let id = self.layers[i].id.clone();
            let kind = self.layers[i].kind;

            let arity_ok = match kind {
                LayerKind::Input => prods.is_empty(),
                LayerKind::AddJoin => prods.len() >= 2,
                _ => prods.len() == 1,
            };
            if !arity_ok {
                return Err(schema(format!("{kind} layer {id:?} has {} producers", prods.len())));
            }
            if self.layers[i].prunable && kind != LayerKind::Conv {
                return Err(schema(format!(
                    "{kind} layer {id:?} cannot be prunable; only conv layers own prunable filters"
                )));
            }

            let (in_c, in_hw) = match kind {
                LayerKind::Input => (self.input.channels, (self.input.height, self.input.width)),
                _ => {
                    let p = &self.layers[prods[0]];
                    (p.out_channels, p.out_hw)
                }
            };

            let mismatch = |detail: String| GraphError::ChannelMismatch {
                layer: id.clone(),
                detail,
            };
            let check_declared = |field: &str, declared: Option<usize>, actual: usize| -> Result<()> {
                match declared {
                    Some(d) if d != actual && !propagate => Err(GraphError::ChannelMismatch {
                        layer: id.clone(),
                        detail: format!("declares {field}={d}, producer provides {actual}"),
                    }),
                    _ => Ok(()),
                }
            };

            let layer = &mut self.layers[i];
            layer.in_hw = in_hw;
            layer.fan_in = prods.len();
            match kind {
                LayerKind::Input => {
                    check_declared("in", doc.in_channels, in_c)?;
                    check_declared("out", doc.out_channels, in_c)?;
                    layer.in_channels = in_c;
                    layer.out_channels = in_c;
                    layer.out_hw = in_hw;
                }
                LayerKind::Conv => {
                    let declared_in = doc
                        .in_channels
                        .ok_or_else(|| schema(format!("conv {id:?} needs `in`")))?;
                    if !propagate && declared_in != in_c {
                        return Err(mismatch(format!("declares in={declared_in}, producer provides {in_c}")));
                    }
                    let out = if propagate {
                        layer.out_channels
                    } else {
                        doc.out_channels
                            .ok_or_else(|| schema(format!("conv {id:?} needs `out`")))?
                    };
                    if out == 0 || in_c == 0 {
                        return Err(GraphError::DanglingLayer(id.clone()));
                    }
                    let kernel = doc
                        .kernel
                        .ok_or_else(|| schema(format!("conv {id:?} needs `kernel`")))?;
                    layer.in_channels = in_c;
                    layer.out_channels = out;
                    layer.out_hw = conv_geometry(&id, layer, doc, kernel, in_hw)?;
                }
                LayerKind::DepthwiseConv => {
                    check_declared("in", doc.in_channels, in_c)?;
                    check_declared("out", doc.out_channels, in_c)?;
                    let kernel = doc
                        .kernel
                        .ok_or_else(|| schema(format!("depthwise_conv {id:?} needs `kernel`")))?;
                    layer.in_channels = in_c;
                    layer.out_channels = in_c;
                    layer.out_hw = conv_geometry(&id, layer, doc, kernel, in_hw)?;
                }
                LayerKind::Batchnorm | LayerKind::Activation | LayerKind::Output => {
                    check_declared("in", doc.in_channels, in_c)?;
                    check_declared("out", doc.out_channels, in_c)?;
                    layer.in_channels = in_c;
                    layer.out_channels = in_c;
                    layer.out_hw = in_hw;
                }
                LayerKind::Pool => {
                    check_declared("in", doc.in_channels, in_c)?;
                    check_declared("out", doc.out_channels, in_c)?;
                    layer.in_channels = in_c;
                    layer.out_channels = in_c;
                    if layer.global_pool {
                        layer.kernel = 0;
                        layer.stride = 1;
                        layer.padding = 0;
                        layer.out_hw = (1, 1);
                    } else {
                        let kernel = doc
                            .kernel
                            .ok_or_else(|| schema(format!("pool {id:?} needs `kernel` or `global`")))?;
                        let stride = doc.stride.unwrap_or(kernel);
                        let padding = doc.padding.unwrap_or(0);
                        layer.kernel = kernel;
                        layer.stride = stride;
                        layer.padding = padding;
                        layer.out_hw = window_out(&id, in_hw, kernel, stride, padding)?;
                    }
                }
                LayerKind::Linear => {
                    let flat = in_c * in_hw.0 * in_hw.1;
                    let declared_in = doc
                        .in_channels
                        .ok_or_else(|| schema(format!("linear {id:?} needs `in`")))?;
                    if !propagate && declared_in != flat {
                        return Err(mismatch(format!(
                            "declares in={declared_in}, producer provides {in_c}x{}x{} = {flat}",
                            in_hw.0, in_hw.1
                        )));
                    }
                    let out = doc
                        .out_channels
                        .ok_or_else(|| schema(format!("linear {id:?} needs `out`")))?;
                    if flat == 0 {
                        return Err(GraphError::DanglingLayer(id.clone()));
                    }
                    layer.in_channels = flat;
                    layer.out_channels = out;
                    layer.out_hw = (1, 1);
                }
                LayerKind::AddJoin => {
                    let first = prods[0];
                    for &p in &prods[1..] {
                        let (a, b) = (&self.layers[first], &self.layers[p]);
                        if a.out_channels != b.out_channels {
                            let detail = format!(
                                "producers {:?} ({}) and {:?} ({}) differ in channels",
                                a.id, a.out_channels, b.id, b.out_channels
                            );
                            return Err(if propagate {
                                GraphError::GroupInconsistency(format!("{id:?}: {detail}"))
                            } else {
                                mismatch(detail)
                            });
                        }
                        if a.out_hw != b.out_hw {
                            return Err(schema(format!(
                                "add_join {id:?}: producers {:?} and {:?} differ in spatial size",
                                a.id, b.id
                            )));
                        }
                    }
                    check_declared("in", doc.in_channels, in_c)?;
                    check_declared("out", doc.out_channels, in_c)?;
                    let layer = &mut self.layers[i];
                    layer.in_channels = in_c;
                    layer.out_channels = in_c;
                    layer.out_hw = in_hw;
                }
            }
        }
        Ok(())
    }

    fn check_groups(&self) -> Result<()> {
        let mut names = HashSet::new();
        for g in &self.groups {
            if !names.insert(g.name.as_str()) {
                return Err(schema(format!("duplicate group name {:?}", g.name)));
            }
            if g.members.is_empty() {
                return Err(schema(format!("group {:?} has no members", g.name)));
            }
            let mut channels = None;
            for m in &g.members {
                let layer = self
                    .layer(m)
                    .ok_or_else(|| schema(format!("group {:?} names unknown layer {m:?}", g.name)))?;
                match g.kind {
                    GroupKind::PostAddition => match channels {
                        None => channels = Some(layer.out_channels),
                        Some(c) if c != layer.out_channels => {
                            return Err(GraphError::GroupInconsistency(format!(
                                "post_addition group {:?}: {m:?} has {} channels, expected {c}",
                                g.name, layer.out_channels
                            )))
                        }
                        Some(_) => {}
                    },
                    GroupKind::SequentialInternal => {
                        if layer.kind != LayerKind::Conv {
                            return Err(schema(format!(
                                "sequential_internal group {:?} member {m:?} is not a conv",
                                g.name
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn input(&self) -> InputSpec {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    pub fn edges(&self) -> &[(String, String)] {
        &self.edges
    }

    pub fn layer(&self, id: &str) -> Option<&Layer> {
        self.index.get(id).map(|&i| &self.layers[i])
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn producers(&self, idx: usize) -> &[usize] {
        &self.producers[idx]
    }

    pub fn consumers(&self, idx: usize) -> &[usize] {
        &self.consumers[idx]
    }

    /// Layer indices in a topological order.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Partitions layers into classes that share one output channel index
    /// space: channel-passthrough layers join their producers, add_join
    /// merges all of its producers. Returns the class representative of
    /// every layer.
    pub fn channel_classes(&self) -> Vec<usize> {
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut parent: Vec<usize> = (0..self.layers.len()).collect();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.kind.is_channel_passthrough() {
                for &p in &self.producers[i] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, p));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        (0..self.layers.len()).map(|i| find(&mut parent, i)).collect()
    }

    /// Layers that own the channel space of every class touched by `layers`
    /// (convs, linears or the input), ascending by declaration index.
    pub fn channel_owners(&self, layers: &[usize]) -> Vec<usize> {
        let classes = self.channel_classes();
        let wanted: HashSet<usize> = layers.iter().map(|&l| classes[l]).collect();
        (0..self.layers.len())
            .filter(|&i| wanted.contains(&classes[i]) && self.layers[i].kind.owns_channels())
            .collect()
    }

    pub fn to_document(&self) -> GraphDocument {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let conv_like = matches!(l.kind, LayerKind::Conv | LayerKind::DepthwiseConv);
                let pool = l.kind == LayerKind::Pool;
                LayerDoc {
                    id: l.id.clone(),
                    kind: l.kind,
                    in_channels: Some(l.in_channels),
                    out_channels: Some(l.out_channels),
                    kernel: (conv_like || (pool && !l.global_pool)).then_some(l.kernel),
                    stride: (conv_like || (pool && !l.global_pool)).then_some(l.stride),
                    padding: (conv_like || (pool && !l.global_pool)).then_some(l.padding),
                    bias: matches!(l.kind, LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::Linear)
                        .then_some(l.bias),
                    prunable: (l.kind == LayerKind::Conv).then_some(l.prunable),
                    global: (pool && l.global_pool).then_some(true),
                    metadata: l.metadata.clone(),
                }
            })
            .collect();
        GraphDocument {
            format_version: GRAPH_FORMAT_VERSION.into(),
            input: self.input,
            layers,
            edges: self.edges.clone(),
            groups: self.groups.clone(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("graph serializes")
    }
}

fn window_out(
    id: &str,
    (h, w): (usize, usize),
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if kernel == 0 || stride == 0 {
        return Err(schema(format!("{id:?}: kernel and stride must be positive")));
    }
    let dim = |x: usize| {
        let padded = x + 2 * padding;
        if padded < kernel {
            Err(schema(format!(
                "{id:?}: kernel {kernel} larger than padded input {padded}"
            )))
        } else {
            Ok((padded - kernel) / stride + 1)
        }
    };
    Ok((dim(h)?, dim(w)?))
}

fn conv_geometry(
    id: &str,
    layer: &mut Layer,
    doc: &LayerDoc,
    kernel: usize,
    in_hw: (usize, usize),
) -> Result<(usize, usize)> {
    let stride = doc.stride.unwrap_or(1);
    let padding = doc.padding.unwrap_or(kernel / 2);
    layer.kernel = kernel;
    layer.stride = stride;
    layer.padding = padding;
    window_out(id, in_hw, kernel, stride, padding)
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopsOptions {
    /// Count pooling (one op per window element) and activations (one op per
    /// element). Off by default.
    pub count_pool_and_activation: bool,
}

pub fn layer_params(layer: &Layer) -> u64 {
    let bias = |n: usize| if layer.bias { n as u64 } else { 0 };
    let k2 = (layer.kernel * layer.kernel) as u64;
    match layer.kind {
        LayerKind::Conv => layer.out_channels as u64 * layer.in_channels as u64 * k2 + bias(layer.out_channels),
        LayerKind::DepthwiseConv => layer.in_channels as u64 * k2 + bias(layer.out_channels),
        LayerKind::Batchnorm => 2 * layer.out_channels as u64,
        LayerKind::Linear => layer.in_channels as u64 * layer.out_channels as u64 + bias(layer.out_channels),
        _ => 0,
    }
}

pub fn layer_flops(layer: &Layer, opts: FlopsOptions) -> u64 {
    let (ho, wo) = (layer.out_hw.0 as u64, layer.out_hw.1 as u64);
    let (hi, wi) = (layer.in_hw.0 as u64, layer.in_hw.1 as u64);
    let k2 = (layer.kernel * layer.kernel) as u64;
    let n_out = layer.out_channels as u64;
    let n_in = layer.in_channels as u64;
    match layer.kind {
        LayerKind::Conv => 2 * n_out * ho * wo * n_in * k2,
        LayerKind::DepthwiseConv => 2 * n_out * ho * wo * k2,
        LayerKind::Linear => 2 * n_in * n_out,
        LayerKind::AddJoin => (layer.fan_in as u64 - 1) * n_out * ho * wo,
        LayerKind::Batchnorm => 2 * n_out * ho * wo,
        LayerKind::Pool if opts.count_pool_and_activation => {
            if layer.global_pool {
                n_out * hi * wi
            } else {
                n_out * ho * wo * k2
            }
        }
        LayerKind::Activation if opts.count_pool_and_activation => n_out * ho * wo,
        _ => 0,
    }
}

pub fn count_params(graph: &ModelGraph) -> u64 {
    graph.layers().iter().map(layer_params).sum()
}

pub fn count_flops(graph: &ModelGraph) -> u64 {
    count_flops_with(graph, FlopsOptions::default())
}

pub fn count_flops_with(graph: &ModelGraph, opts: FlopsOptions) -> u64 {
    graph.layers().iter().map(|l| layer_flops(l, opts)).sum()
}

// ---------------------------------------------------------------------------
// Plan propagation
// ---------------------------------------------------------------------------

/// Output channel selection of every layer under `plan`: `None` means all
/// channels survive. Checks that add_join producers agree index-for-index.
pub fn output_selections(graph: &ModelGraph, plan: &PruningPlan) -> Result<Vec<Option<Vec<usize>>>> {
    let mut planned: HashMap<usize, Vec<usize>> = HashMap::new();
    for lp in &plan.layers {
        let idx = graph
            .layer_index(&lp.layer_id)
            .ok_or_else(|| GraphError::PlanMismatch(format!("unknown layer {:?}", lp.layer_id)))?;
        let layer = &graph.layers[idx];
        if layer.kind != LayerKind::Conv {
            return Err(GraphError::PlanMismatch(format!(
                "{:?} is a {} layer; only conv outputs can be pruned",
                lp.layer_id, layer.kind
            )));
        }
        if lp.kept.is_empty() {
            return Err(GraphError::DanglingLayer(lp.layer_id.clone()));
        }
        if !lp.kept.windows(2).all(|w| w[0] < w[1]) {
            return Err(GraphError::PlanMismatch(format!(
                "{:?}: kept indices must be strictly ascending",
                lp.layer_id
            )));
        }
        if *lp.kept.last().expect("nonempty") >= layer.out_channels {
            return Err(GraphError::PlanMismatch(format!(
                "{:?}: kept index {} out of range for {} channels",
                lp.layer_id,
                lp.kept.last().unwrap(),
                layer.out_channels
            )));
        }
        if planned.insert(idx, lp.kept.clone()).is_some() {
            return Err(GraphError::PlanMismatch(format!(
                "{:?} appears twice in the plan",
                lp.layer_id
            )));
        }
    }

    let mut sel: Vec<Option<Vec<usize>>> = vec![None; graph.layers.len()];
    for &i in graph.topo_order() {
        let layer = &graph.layers[i];
        sel[i] = match layer.kind {
            LayerKind::Conv => planned.get(&i).filter(|k| k.len() != layer.out_channels).cloned(),
            LayerKind::Input | LayerKind::Linear => None,
            LayerKind::AddJoin => {
                let prods = graph.producers(i);
                let first = &sel[prods[0]];
                for &p in &prods[1..] {
                    if &sel[p] != first {
                        return Err(GraphError::GroupInconsistency(format!(
                            "add_join {:?}: producers {:?} and {:?} keep different channel sets",
                            layer.id, graph.layers[prods[0]].id, graph.layers[p].id
                        )));
                    }
                }
                first.clone()
            }
            _ => sel[graph.producers(i)[0]].clone(),
        };
    }
    Ok(sel)
}

/// Shrinks pruned convs to their kept channel counts and propagates the
/// change to every consumer.
pub fn apply_plan_shapes(graph: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    let sel = output_selections(graph, plan)?;
    let mut pruned = graph.clone();
    for (i, s) in sel.iter().enumerate() {
        if let (LayerKind::Conv, Some(kept)) = (pruned.layers[i].kind, s) {
            pruned.layers[i].out_channels = kept.len();
        }
    }
    let docs = graph.to_document().layers;
    pruned.resolve(&docs, true)?;
    for g in &pruned.groups {
        if g.kind == GroupKind::PostAddition {
            let counts: Vec<usize> = g
                .members
                .iter()
                .map(|m| pruned.layer(m).expect("validated member").out_channels)
                .collect();
            if counts.windows(2).any(|w| w[0] != w[1]) {
                return Err(GraphError::GroupInconsistency(format!(
                    "post_addition group {:?} members end with channel counts {:?}",
                    g.name, counts
                )));
            }
        }
    }
    // Re-run full validation on the emitted document.
    ModelGraph::from_document(pruned.to_document())
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub flops_convention: String,
    pub params_before: u64,
    pub params_after: u64,
    /// Percent, rounded to one decimal.
    pub params_drop_pct: f64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub flops_drop_pct: f64,
    pub layers: Vec<LayerReduction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReduction {
    pub layer_id: String,
    pub channels_before: usize,
    pub channels_after: usize,
}

/// `(1 - after / before) * 100`, rounded to one decimal; 0 when `before` is 0.
pub fn drop_pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        return 0.0;
    }
    let pct = (1.0 - after as f64 / before as f64) * 100.0;
    (pct * 10.0).round() / 10.0
}

pub fn reduction_report(original: &ModelGraph, pruned: &ModelGraph) -> ReductionReport {
    let (pb, pa) = (count_params(original), count_params(pruned));
    let (fb, fa) = (count_flops(original), count_flops(pruned));
    let after: BTreeMap<&str, usize> = pruned
        .layers()
        .iter()
        .map(|l| (l.id.as_str(), l.out_channels))
        .collect();
    let layers = original
        .layers()
        .iter()
        .filter(|l| l.kind == LayerKind::Conv)
        .filter_map(|l| {
            after.get(l.id.as_str()).map(|&a| LayerReduction {
                layer_id: l.id.clone(),
                channels_before: l.out_channels,
                channels_after: a,
            })
        })
        .collect();
    ReductionReport {
        flops_convention: FLOPS_CONVENTION.into(),
        params_before: pb,
        params_after: pa,
        params_drop_pct: drop_pct(pb, pa),
        flops_before: fb,
        flops_after: fa,
        flops_drop_pct: drop_pct(fb, fa),
        layers,
    }
}

impl ReductionReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\nmetric,before,after,drop_pct\n", self.flops_convention);
        out.push_str(&format!(
            "params,{},{},{:.1}\n",
            self.params_before, self.params_after, self.params_drop_pct
        ));
        out.push_str(&format!(
            "flops,{},{},{:.1}\n",
            self.flops_before, self.flops_after, self.flops_drop_pct
        ));
        out
    }
}

impl fmt::Display for ReductionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.flops_convention)?;
        writeln!(
            f,
            "Para.  {:>14} -> {:>14}  drop {:.1}%",
            self.params_before, self.params_after, self.params_drop_pct
        )?;
        write!(
            f,
            "FLOPs  {:>14} -> {:>14}  drop {:.1}%",
            self.flops_before, self.flops_after, self.flops_drop_pct
        )
    }
}

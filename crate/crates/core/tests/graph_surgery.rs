#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeMap;

use featprune::graph::{
    apply_plan_shapes, count_flops, count_flops_with, count_params, reduction_report, FlopsOptions, GraphError,
    LayerKind,
};
use featprune::plan::{LayerPlan, PruningPlan};
use featprune::select::PruneConfig;
use featprune::surgery::{apply_plan_weights, verify_bundle, LayerWeights, WeightBundle};
use featprune::tensorio::TensorFile;
use featprune::ModelGraph;
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::Rng;
use serde_json::json;

use common::*;

fn layer_plan(id: &str, n: usize, mut kept: Vec<usize>) -> LayerPlan {
    kept.sort_unstable();
    LayerPlan {
        layer_id: id.into(),
        removed_dfs: (0..n).filter(|c| !kept.contains(c)).collect(),
        kept,
        removed_sfs: vec![],
        floor_rule_applied: false,
    }
}

fn plan_of(layers: Vec<LayerPlan>) -> PruningPlan {
    PruningPlan {
        format_version: "1".into(),
        config: PruneConfig::default(),
        beta: vec![0.0],
        layers,
        groups: vec![],
    }
}

/// A random valid plan: each independent channel class of prunable convs gets
/// its own random nonempty kept set; owners of one class share it.
fn random_plan(graph: &ModelGraph, seed: u64) -> PruningPlan {
    let mut rng = rng(seed);
    let classes = graph.channel_classes();
    let mut chosen: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut layers = Vec::new();
    for (i, l) in graph.layers().iter().enumerate() {
        if l.kind != LayerKind::Conv {
            continue;
        }
        let owners = graph.channel_owners(&[i]);
        let prunable = l.prunable
            || graph.groups().iter().any(|g| {
                g.members
                    .iter()
                    .any(|m| graph.channel_owners(&[graph.layer_index(m).unwrap()]).contains(&i))
            });
        if !prunable || owners.iter().any(|&o| graph.layers()[o].kind != LayerKind::Conv) {
            continue;
        }
        let n = l.out_channels;
        let kept = chosen
            .entry(classes[i])
            .or_insert_with(|| {
                let k = rng.gen_range(1..=n);
                sample(&mut rng, n, k).into_vec()
            })
            .clone();
        layers.push(layer_plan(&l.id, n, kept));
    }
    plan_of(layers)
}

fn example_graphs() -> Vec<ModelGraph> {
    ["vgg16_cifar.json", "bottleneck_stage.json"]
        .iter()
        .map(|f| ModelGraph::from_path(fixture_path(f)).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pruning_never_increases_cost_and_weights_stay_consistent(seed in any::<u64>(), which in 0usize..2) {
        let graph = &example_graphs()[which];
        let plan = random_plan(graph, seed);
        let pruned = apply_plan_shapes(graph, &plan).unwrap();
        prop_assert!(count_params(&pruned) <= count_params(graph));
        prop_assert!(count_flops(&pruned) <= count_flops(graph));
        let opts = FlopsOptions { count_pool_and_activation: true };
        prop_assert!(count_flops_with(&pruned, opts) <= count_flops_with(graph, opts));

        for lp in &plan.layers {
            prop_assert_eq!(pruned.layer(&lp.layer_id).unwrap().out_channels, lp.kept.len());
        }

        // VGG weights are ~15M values; slicing them once below is enough.
        if which == 1 {
            let bundle = random_bundle(graph, seed ^ 0x5eed);
            prop_assert!(verify_bundle(&bundle, graph).is_empty());
            let sliced = apply_plan_weights(&bundle, graph, &plan).unwrap();
            prop_assert!(verify_bundle(&sliced, &pruned).is_empty());
        }

        // Emitted graph documents survive a parse round trip.
        let reparsed = ModelGraph::parse_json(&pruned.to_json_pretty()).unwrap();
        prop_assert_eq!(reparsed.to_json_pretty(), pruned.to_json_pretty());
    }
}

#[test]
fn vgg_weights_follow_a_random_plan() {
    let graph = &example_graphs()[0];
    let plan = random_plan(graph, 99);
    let pruned = apply_plan_shapes(graph, &plan).unwrap();
    let sliced = apply_plan_weights(&random_bundle(graph, 100), graph, &plan).unwrap();
    assert!(verify_bundle(&sliced, &pruned).is_empty());
}

#[test]
fn identity_plan_leaves_everything_unchanged() {
    for graph in example_graphs() {
        let layers = graph
            .layers()
            .iter()
            .filter(|l| l.prunable)
            .map(|l| LayerPlan::identity(l.id.clone(), l.out_channels))
            .collect();
        let plan = plan_of(layers);
        let pruned = apply_plan_shapes(&graph, &plan).unwrap();
        let report = reduction_report(&graph, &pruned);
        assert_eq!(report.params_before, report.params_after);
        assert_eq!(report.flops_drop_pct, 0.0);
        // Identity slicing of VGG's 15M weights adds nothing over the small graph.
        if count_params(&graph) < 1_000_000 {
            let bundle = random_bundle(&graph, 1);
            assert_eq!(apply_plan_weights(&bundle, &graph, &plan).unwrap(), bundle);
        }
    }
}

#[test]
fn unequal_addition_operands_are_rejected() {
    let graph = ModelGraph::from_path(fixture_path("bottleneck_stage.json")).unwrap();
    let plan = plan_of(vec![layer_plan("b2_conv3", 64, (0..32).collect())]);
    assert!(matches!(
        apply_plan_shapes(&graph, &plan),
        Err(GraphError::GroupInconsistency(_))
    ));
}

#[test]
fn plans_naming_unknown_layers_are_rejected() {
    let graph = ModelGraph::from_path(fixture_path("vgg16_cifar.json")).unwrap();
    let plan = plan_of(vec![layer_plan("conv99", 4, vec![0])]);
    assert!(apply_plan_shapes(&graph, &plan).is_err());
    let plan = plan_of(vec![layer_plan("conv1", 64, vec![70])]);
    assert!(apply_plan_shapes(&graph, &plan).is_err());
}

// ---------------------------------------------------------------------------
// Functional preservation: removing all-zero filters does not change outputs.
// ---------------------------------------------------------------------------

type Fmap = Vec<Vec<Vec<f64>>>;

fn conv2d(x: &Fmap, w: &TensorFile, b: Option<&TensorFile>) -> Fmap {
    let s = w.shape();
    let (out, cin, k) = (s[0], s[1], s[2]);
    let wv = w.to_f64_vec();
    let bv = b.map(|t| t.to_f64_vec());
    let (h, wd) = (x[0].len(), x[0][0].len());
    let pad = (k / 2) as isize;
    let mut y = vec![vec![vec![0.0; wd]; h]; out];
    for o in 0..out {
        for r in 0..h {
            for c in 0..wd {
                let mut acc = bv.as_ref().map_or(0.0, |b| b[o]);
                for i in 0..cin {
                    for dr in 0..k {
                        for dc in 0..k {
                            let rr = r as isize + dr as isize - pad;
                            let cc = c as isize + dc as isize - pad;
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= wd as isize {
                                continue;
                            }
                            acc += wv[((o * cin + i) * k + dr) * k + dc] * x[i][rr as usize][cc as usize];
                        }
                    }
                }
                y[o][r][c] = acc;
            }
        }
    }
    y
}

fn relu(x: Fmap) -> Fmap {
    x.into_iter()
        .map(|ch| {
            ch.into_iter()
                .map(|row| row.into_iter().map(|v| v.max(0.0)).collect())
                .collect()
        })
        .collect()
}

fn forward(bundle: &WeightBundle, x: &Fmap) -> Vec<f64> {
    let get = |id: &str| &bundle.entries[id];
    let c1 = &get("conv1");
    let y = relu(conv2d(x, c1.weight.as_ref().unwrap(), c1.bias.as_ref()));
    let c2 = &get("conv2");
    let y = relu(conv2d(&y, c2.weight.as_ref().unwrap(), c2.bias.as_ref()));
    let pooled: Vec<f64> = y
        .iter()
        .map(|ch| ch.iter().flatten().sum::<f64>() / (ch.len() * ch[0].len()) as f64)
        .collect();
    let fc = &get("fc");
    let w = fc.weight.as_ref().unwrap();
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let (wv, bv) = (w.to_f64_vec(), fc.bias.as_ref().unwrap().to_f64_vec());
    (0..out)
        .map(|o| bv[o] + (0..inp).map(|i| wv[o * inp + i] * pooled[i]).sum::<f64>())
        .collect()
}

#[test]
fn removing_zero_filters_preserves_the_forward_pass() {
    let graph = ModelGraph::parse_json(
        &json!({
            "format_version": "1",
            "input": {"channels": 2, "height": 5, "width": 5},
            "layers": [
                {"id": "input", "kind": "input"},
                {"id": "conv1", "kind": "conv", "in": 2, "out": 6, "kernel": 3, "bias": true, "prunable": true},
                {"id": "relu1", "kind": "activation"},
                {"id": "conv2", "kind": "conv", "in": 6, "out": 4, "kernel": 3, "bias": true, "prunable": true},
                {"id": "relu2", "kind": "activation"},
                {"id": "gap", "kind": "pool", "global": true},
                {"id": "fc", "kind": "linear", "in": 4, "out": 3, "bias": true},
                {"id": "output", "kind": "output"}
            ],
            "edges": [["input", "conv1"], ["conv1", "relu1"], ["relu1", "conv2"], ["conv2", "relu2"],
                      ["relu2", "gap"], ["gap", "fc"], ["fc", "output"]]
        })
        .to_string(),
    )
    .unwrap();
    let mut bundle = random_bundle(&graph, 21);

    // Zero filters 1 and 4 of conv1 (weights and bias) and filter 2 of conv2.
    let zero = |t: &TensorFile, rows: &[usize]| {
        let row = t.len() / t.shape()[0];
        let mut v = t.to_f64_vec();
        for &r in rows {
            v[r * row..(r + 1) * row].iter_mut().for_each(|x| *x = 0.0);
        }
        TensorFile::from_f64(t.shape().to_vec(), v).unwrap()
    };
    for (id, rows) in [("conv1", vec![1, 4]), ("conv2", vec![2])] {
        let e = bundle.entries.get_mut(id).unwrap();
        *e = LayerWeights {
            weight: Some(zero(e.weight.as_ref().unwrap(), &rows)),
            bias: Some(zero(e.bias.as_ref().unwrap(), &rows)),
            bn: None,
        };
    }

    let plan = plan_of(vec![
        layer_plan("conv1", 6, vec![0, 2, 3, 5]),
        layer_plan("conv2", 4, vec![0, 1, 3]),
    ]);
    let pruned_graph = apply_plan_shapes(&graph, &plan).unwrap();
    let pruned = apply_plan_weights(&bundle, &graph, &plan).unwrap();
    assert!(verify_bundle(&pruned, &pruned_graph).is_empty());

    let mut rng = rng(22);
    for _ in 0..5 {
        let x: Fmap = (0..2)
            .map(|_| {
                (0..5)
                    .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect()
            })
            .collect();
        let (a, b) = (forward(&bundle, &x), forward(&pruned, &x));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-12, "{a:?} vs {b:?}");
        }
    }
}

mod common;

use std::collections::BTreeSet;

use cipherforest::annotator::{self, CloudBundle, UserState};
use cipherforest::harness::{self, SyntheticSpec};
use cipherforest::ive;
use cipherforest::rkdf::{self, BudgetMode, CompareKind, EncryptedForest, Schedule, SearchConfig};
use cipherforest::secure_compare;
use common::desk_config;

fn build(
    n: usize,
    seed: u64,
    noise: bool,
) -> (Vec<annotator::ImageRecord>, UserState, CloudBundle) {
    let records = harness::generate(&SyntheticSpec::desk(n, seed)).unwrap();
    let (state, cloud) = annotator::setup(&records, &desk_config(seed, noise)).unwrap();
    (records, state, cloud)
}

#[test]
fn exact_at_full_power_across_corpora() {
    for seed in 0..4 {
        let (records, mut state, cloud) = build(60 + 10 * seed as usize, 100 + seed, false);
        let corpus = harness::prepare_corpus(&state, &records).unwrap();
        for q in records.iter().step_by(7) {
            let req = state.make_request(&q.features, None).unwrap();
            let (_, out) =
                annotator::cloud_annotate(&cloud, &req, &SearchConfig::default()).unwrap();
            let p = state.pipeline.prepare(&q.features).unwrap();
            let oracle: Vec<u32> =
                harness::linear_scan_plain(&corpus, (&p.v_hat, &p.kl), 10, &state.params.obf)
                    .into_iter()
                    .map(|(id, _)| id)
                    .collect();
            assert_eq!(out.ids(), oracle, "seed {seed} query {}", q.id);
            let (scan, _) = harness::linear_scan_encrypted(&cloud, &req, 10).unwrap();
            assert_eq!(out.results, scan);
        }
    }
}

#[test]
fn queue_as_large_as_corpus_returns_everything() {
    let (records, mut state, cloud) = build(40, 7, true);
    let req = state.make_request(&records[3].features, None).unwrap();
    let cfg = SearchConfig {
        queue_size: 40,
        ..SearchConfig::default()
    };
    let (_, out) = annotator::cloud_annotate(&cloud, &req, &cfg).unwrap();
    let ids: BTreeSet<u32> = out.ids().into_iter().collect();
    assert_eq!(ids, records.iter().map(|r| r.id).collect());
    assert!(out
        .results
        .windows(2)
        .all(|w| (w[0].1, w[0].0) < (w[1].1, w[1].0)));
}

#[test]
fn budget_limits_and_work_grows_with_power() {
    let (records, mut state, cloud) = build(200, 8, true);
    let n = cloud.forest.node_count();
    for q in records.iter().step_by(40) {
        let req = state.make_request(&q.features, None).unwrap();
        let mut last_visited = 0;
        let mut last_ops = 0;
        for ap in [2.5, 10.0, 25.0, 50.0, 100.0] {
            let cfg = SearchConfig {
                ap_percent: ap,
                ..SearchConfig::default()
            };
            let (_, out) = annotator::cloud_annotate(&cloud, &req, &cfg).unwrap();
            assert!(
                out.visited <= cfg.budget(n),
                "ap {ap}: {} > {}",
                out.visited,
                cfg.budget(n)
            );
            assert!(out.visited >= last_visited && out.inner_products >= last_ops);
            last_visited = out.visited;
            last_ops = out.inner_products;
        }
    }
}

#[test]
fn no_image_compared_twice() {
    let (records, mut state, cloud) = build(80, 9, true);
    for schedule in [Schedule::RoundRobin, Schedule::Parallel] {
        let req = state.make_request(&records[11].features, None).unwrap();
        let cfg = SearchConfig {
            schedule,
            ..SearchConfig::default()
        };
        let (_, out) = annotator::cloud_annotate(&cloud, &req, &cfg).unwrap();
        let nodes: Vec<u32> = out
            .log
            .iter()
            .filter(|e| e.kind == CompareKind::Node)
            .map(|e| e.image)
            .collect();
        let distinct: BTreeSet<u32> = nodes.iter().copied().collect();
        assert_eq!(nodes.len(), distinct.len());
        assert_eq!(nodes.len(), out.visited);
        assert_eq!(out.inner_products, 2 * out.log.len() as u64);
    }
}

#[test]
fn transcripts_are_deterministic_and_schedules_agree() {
    let (records, mut state, cloud) = build(80, 10, false);
    let req = state.make_request(&records[5].features, None).unwrap();
    let rr = SearchConfig::default();
    let (_, a) = annotator::cloud_annotate(&cloud, &req, &rr).unwrap();
    let (_, b) = annotator::cloud_annotate(&cloud, &req, &rr).unwrap();
    assert_eq!(a, b);
    let par = SearchConfig {
        schedule: Schedule::Parallel,
        ..rr
    };
    let (_, c) = annotator::cloud_annotate(&cloud, &req, &par).unwrap();
    assert_eq!(a.results, c.results);
    let per_tree = SearchConfig {
        budget_mode: BudgetMode::PerTree,
        ap_percent: 10.0,
        ..rr
    };
    let (_, d) = annotator::cloud_annotate(&cloud, &req, &per_tree).unwrap();
    assert!(d.visited <= per_tree.budget(cloud.forest.node_count()) * cloud.forest.trees.len());
}

#[test]
fn forest_file_roundtrip_is_bit_exact() {
    let (_, _, cloud) = build(50, 11, true);
    let mut buf = Vec::new();
    cloud.forest.write_to(&mut buf).unwrap();
    let back = EncryptedForest::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(back, cloud.forest);
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(buf, again);
    buf[0] ^= 1;
    assert!(EncryptedForest::read_from(&mut buf.as_slice()).is_err());
    assert!(EncryptedForest::read_from(&mut again[..again.len() - 3].as_ref()).is_err());
}

#[test]
fn forest_structure_and_ciphers() {
    let (records, state, cloud) = build(50, 12, false);
    let forest = &cloud.forest;
    assert_eq!(forest.trees.len(), 10);
    let mut dims = BTreeSet::new();
    for t in &forest.trees {
        assert_eq!(t.nodes.len(), records.len());
        for n in &t.nodes {
            assert_eq!(n.split.is_none(), n.left.is_none() && n.right.is_none());
            if let Some(s) = &n.split {
                dims.insert(s.dim as usize);
            }
        }
    }
    assert_eq!(forest.split_fields, dims.into_iter().collect::<Vec<_>>());
    assert_eq!(state.split_fields, forest.split_fields);

    let (p, keys) = (&state.params, &state.keys);
    let corpus = harness::prepare_corpus(&state, &records).unwrap();
    for rec in corpus.iter().take(5) {
        let img = &forest.images[&rec.id];
        assert_eq!(
            ive::decrypt(&keys.l1_data, &img.l1, &p.ive).unwrap(),
            secure_compare::l1_node_vector(&rec.v_hat, p.obf.r, 0)
        );
        assert_eq!(
            ive::decrypt(&keys.kl_data, &img.kl, &p.ive).unwrap(),
            secure_compare::kl_node_vector(&rec.kl, p.obf.r, 0)
        );
    }
    let node = forest.trees[0]
        .nodes
        .iter()
        .find(|n| n.split.is_some())
        .unwrap();
    let sp = node.split.as_ref().unwrap();
    let rec = &corpus[node.image as usize];
    assert_eq!(
        ive::decrypt(&keys.hyper_data, &sp.l1_hyper, &p.ive).unwrap(),
        secure_compare::l1_hyper_vector(&rec.v_hat, sp.dim as usize, p.obf.r, 0)
    );
    assert_eq!(
        sp.ope,
        state
            .ope
            .encrypt_signed(rec.v_hat[sp.dim as usize])
            .unwrap()
    );
}

#[test]
fn queue_keeps_best_entries() {
    let mut q = Vec::new();
    for (c, id) in [(5, 1), (3, 2), (9, 3), (3, 0), (7, 4)] {
        rkdf::queue_push(&mut q, 3, c, id);
    }
    assert_eq!(q, vec![(3, 0), (3, 2), (5, 1)]);
    assert!(!rkdf::queue_push(&mut q, 3, 5, 9));
    assert!(rkdf::queue_push(&mut q, 3, 4, 9));
}

#[test]
fn bad_search_config_rejected() {
    let (records, mut state, cloud) = build(20, 13, true);
    let req = state.make_request(&records[0].features, None).unwrap();
    for cfg in [
        SearchConfig {
            ap_percent: 0.0,
            ..SearchConfig::default()
        },
        SearchConfig {
            ap_percent: 120.0,
            ..SearchConfig::default()
        },
        SearchConfig {
            queue_size: 0,
            ..SearchConfig::default()
        },
    ] {
        assert!(annotator::cloud_annotate(&cloud, &req, &cfg).is_err());
    }
    let mut short = req.clone();
    short.split_values.clear();
    assert!(annotator::cloud_annotate(&cloud, &short, &SearchConfig::default()).is_err());
}

mod common;

use cipherforest::annotator::{
    self, open_keywords, read_keys, seal_keywords, select_keywords, top_k, write_keys, ImageRecord,
    RecoveredEntry, UserState,
};
use cipherforest::features::{FeatureBundle, PartDims};
use cipherforest::harness::{self, SyntheticSpec};
use cipherforest::ive;
use cipherforest::rkdf::SearchConfig;
use cipherforest::secure_compare::{self, dis_units};
use cipherforest::Error;
use common::desk_config;

fn one_hot(len: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[at % len] = 1.0;
    v
}

/// Images whose parts are one-hot at distinct positions.
fn one_hot_corpus(n: usize) -> Vec<ImageRecord> {
    let d = PartDims {
        rgb: 4,
        hsv: 4,
        lab: 8,
        g: 2,
        gq: 2,
        h: 16,
        hq: 16,
    };
    (0..n)
        .map(|i| ImageRecord {
            id: i as u32,
            keywords: vec![format!("k{i}")],
            features: FeatureBundle {
                rgb: one_hot(d.rgb, i),
                hsv: one_hot(d.hsv, i + 1),
                lab: one_hot(d.lab, i),
                g: one_hot(d.g, i),
                gq: one_hot(d.gq, i + 1),
                h: one_hot(d.h, i),
                hq: one_hot(d.hq, 3 * i),
            },
        })
        .collect()
}

#[test]
fn two_image_corpus_builds_two_node_trees() {
    let records = harness::generate(&SyntheticSpec::desk(2, 1)).unwrap();
    let (state, cloud) = annotator::setup(&records, &desk_config(1, true)).unwrap();
    assert_eq!(cloud.forest.trees.len(), 10);
    assert!(cloud.forest.trees.iter().all(|t| t.nodes.len() == 2));
    assert_eq!(state.split_fields.len(), cloud.forest.split_fields.len());
}

#[test]
fn same_seed_gives_identical_forest_bytes() {
    let records = harness::generate(&SyntheticSpec::desk(40, 2)).unwrap();
    let bytes = |seed| {
        let (_, cloud) = annotator::setup(&records, &desk_config(seed, true)).unwrap();
        let mut b = Vec::new();
        cloud.forest.write_to(&mut b).unwrap();
        b
    };
    assert_eq!(bytes(2), bytes(2));
    assert_ne!(bytes(2), bytes(3));
}

#[test]
fn request_carries_one_ope_value_per_split_field_and_decrypts() {
    let records = harness::generate(&SyntheticSpec::desk(40, 4)).unwrap();
    let (mut state, _) = annotator::setup(&records, &desk_config(4, false)).unwrap();
    let req = state
        .make_request(&records[0].features, Some(1 << 17))
        .unwrap();
    assert_eq!(
        req.split_values.keys().copied().collect::<Vec<_>>(),
        state.split_fields
    );
    let p = state.pipeline.prepare(&records[0].features).unwrap();
    let (pr, keys) = (&state.params, &state.keys);
    assert_eq!(
        ive::decrypt(&keys.l1_req, &req.l1.cv, &pr.ive).unwrap(),
        secure_compare::l1_request_vector(&p.v_hat, pr.obf.lambda_l1 << 17)
    );
    assert_eq!(
        ive::decrypt(&keys.hyper_req, &req.l1.ch, &pr.ive).unwrap(),
        secure_compare::l1_request_hyper_vector(&p.v_hat, pr.obf.lambda_l1 << 17)
    );
    assert_eq!(
        ive::decrypt(&keys.kl_req, &req.kl.cv, &pr.ive).unwrap(),
        secure_compare::kl_request_vector(&p.kl, pr.obf.lambda_kl << 17)
    );
    for (&s, ope) in &req.split_values {
        assert_eq!(*ope, state.ope.encrypt_signed(p.v_hat[s]).unwrap());
    }
}

fn recover(
    state: &mut UserState,
    cloud: &annotator::CloudBundle,
    bundle: &FeatureBundle,
    r_s: Option<i64>,
) -> (u64, Vec<RecoveredEntry>) {
    let req = state.make_request(bundle, r_s).unwrap();
    let (rs, _) = annotator::cloud_annotate(cloud, &req, &SearchConfig::default()).unwrap();
    (req.id, state.consume_results(&rs).unwrap())
}

#[test]
fn recovered_distances_are_within_tolerance() {
    let records = harness::generate(&SyntheticSpec::desk(100, 5)).unwrap();
    let (mut state, cloud) = annotator::setup(&records, &desk_config(5, true)).unwrap();
    let corpus = harness::prepare_corpus(&state, &records).unwrap();
    let mut pairs = 0;
    for q in records.iter().step_by(4) {
        let req = state.make_request(&q.features, None).unwrap();
        let tol = state.recovery_tolerance(req.id).unwrap();
        let (rs, _) = annotator::cloud_annotate(&cloud, &req, &SearchConfig::default()).unwrap();
        let qp = &corpus[q.id as usize];
        for e in &rs.entries {
            let truth = dis_units(
                (
                    &corpus[e.image as usize].v_hat,
                    &corpus[e.image as usize].kl,
                ),
                (&qp.v_hat, &qp.kl),
                &state.params.obf,
            );
            let truth = truth as f64 / state.unit();
            let got = state.recover_distance(req.id, e.comp).unwrap();
            assert!((got - truth).abs() <= tol, "{got} vs {truth} (tol {tol})");
            pairs += 1;
        }
        let recovered = state.consume_results(&rs).unwrap();
        assert_eq!(recovered[0].image, q.id);
        assert!(recovered[0].distance.abs() <= tol);
        assert_eq!(recovered[0].keywords, q.keywords);
    }
    assert!(pairs >= 200, "{pairs}");
}

#[test]
fn recovery_ignores_request_scalar() {
    let records = harness::generate(&SyntheticSpec::desk(60, 6)).unwrap();
    let (mut state, cloud) = annotator::setup(&records, &desk_config(6, true)).unwrap();
    let (id, a) = recover(&mut state, &cloud, &records[9].features, Some(1 << 16));
    let (_, b) = recover(&mut state, &cloud, &records[9].features, Some(10 << 16));
    assert_eq!(
        a.iter().map(|e| e.image).collect::<Vec<_>>(),
        b.iter().map(|e| e.image).collect::<Vec<_>>()
    );
    for (x, y) in a.iter().zip(&b) {
        assert!(
            (x.distance - y.distance).abs() < 1e-6,
            "{} {}",
            x.distance,
            y.distance
        );
    }
    assert!(matches!(
        state.recover_distance(id, 0),
        Err(Error::UnknownRequest(_))
    ));
}

#[test]
fn consumed_request_cannot_be_replayed() {
    let records = harness::generate(&SyntheticSpec::desk(30, 7)).unwrap();
    let (mut state, cloud) = annotator::setup(&records, &desk_config(7, true)).unwrap();
    let req = state.make_request(&records[0].features, None).unwrap();
    let (rs, _) = annotator::cloud_annotate(&cloud, &req, &SearchConfig::default()).unwrap();
    state.consume_results(&rs).unwrap();
    assert!(state.ledger.is_empty());
    assert!(matches!(
        state.consume_results(&rs),
        Err(Error::UnknownRequest(_))
    ));
}

#[test]
fn orthogonal_images_still_fill_the_queue() {
    for n in [5, 16] {
        let records = one_hot_corpus(n);
        let (mut state, cloud) = annotator::setup(&records, &desk_config(8, true)).unwrap();
        let (_, got) = recover(&mut state, &cloud, &records[2].features, None);
        assert_eq!(got.len(), n.min(10));
        assert_eq!(got[0].image, 2);
    }
}

#[test]
fn keyword_ranking_prefers_close_images() {
    let kw = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let entries = vec![
        RecoveredEntry {
            image: 0,
            distance: 0.0,
            keywords: kw(&["sky", "sea"]),
        },
        RecoveredEntry {
            image: 1,
            distance: 1.0,
            keywords: kw(&["sky", "sand"]),
        },
        RecoveredEntry {
            image: 2,
            distance: 3.0,
            keywords: kw(&["road"]),
        },
    ];
    let ranked = select_keywords(&entries).unwrap();
    assert_eq!(top_k(&ranked, 3), kw(&["sky", "sea", "sand"]));
    assert!((ranked[0].1 - (1.0 + 0.75)).abs() < 1e-12);
    let single = select_keywords(&entries[2..]).unwrap();
    assert_eq!(single, vec![("road".to_string(), 1.0)]);
    assert!(select_keywords(&[]).is_err());
}

#[test]
fn sealed_keywords_bind_to_image() {
    let key = [7u8; 32];
    let kw = vec!["a".to_string(), "b".to_string()];
    let s = seal_keywords(&key, 3, &kw).unwrap();
    assert_eq!(open_keywords(&key, 3, &s).unwrap(), kw);
    assert!(matches!(open_keywords(&key, 4, &s), Err(Error::Seal(_))));
    assert!(open_keywords(&[8u8; 32], 3, &s).is_err());
}

#[test]
fn user_state_survives_persistence() {
    let records = harness::generate(&SyntheticSpec::desk(30, 9)).unwrap();
    let (mut state, cloud) = annotator::setup(&records, &desk_config(9, true)).unwrap();
    let pending = state.make_request(&records[1].features, None).unwrap();
    let json = serde_json::to_string(&state.to_file()).unwrap();
    let mut kbuf = Vec::new();
    write_keys(&mut kbuf, &state.keys, &state.params.ive).unwrap();
    let mut back = UserState::from_file(
        serde_json::from_str(&json).unwrap(),
        read_keys(&mut kbuf.as_slice()).unwrap(),
    )
    .unwrap();
    let (rs, _) = annotator::cloud_annotate(&cloud, &pending, &SearchConfig::default()).unwrap();
    let a = state.consume_results(&rs).unwrap();
    let b = back.consume_results(&rs).unwrap();
    assert_eq!(a, b);
    let r1 = state.make_request(&records[2].features, None).unwrap();
    let r2 = back.make_request(&records[2].features, None).unwrap();
    assert_eq!(r1, r2);
}

#[test]
fn setup_rejects_bad_corpora() {
    let mut records = harness::generate(&SyntheticSpec::desk(10, 10)).unwrap();
    assert!(matches!(
        annotator::setup(&[], &desk_config(1, true)),
        Err(Error::EmptyCorpus)
    ));
    records[1].id = records[0].id;
    assert!(annotator::setup(&records, &desk_config(1, true)).is_err());
}

//! Acceptance checks; prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use cipherforest::annotator::{self, select_keywords, RecoveredEntry};
use cipherforest::features::{self, FeatureConfig, FeaturePipeline, KlFixed, PartDims};
use cipherforest::harness::{self, SyntheticSpec};
use cipherforest::ive::{self, IveParams};
use cipherforest::ope::{Ope, OpeKey};
use cipherforest::rkdf::SearchConfig;
use cipherforest::secure_compare::{
    self, dis_units, encrypt_node, encrypt_request, PreparedRequest,
};
use common::{desk_config, fixture, random_kl, random_v_hat};
use num_bigint::BigInt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ive_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p_bound: i128 = 1 << 30;
    let params = IveParams::derive(16, &BigInt::from(p_bound), 64);
    let mut roundtrip_fail = 0;
    for i in 0..1000 {
        let dim = 1 + i % 16;
        let k = ive::keygen(dim, &params, i as u64);
        let v: Vec<i128> = (0..dim)
            .map(|_| rng.gen_range(-p_bound..=p_bound))
            .collect();
        let ct = ive::encrypt(&k, &v, &params, &mut rng).map_err(|e| e.to_string())?;
        if ive::decrypt(&k, &ct, &params).map_err(|e| e.to_string())? != v {
            roundtrip_fail += 1;
        }
    }
    let (mut ip_fail, mut ref_fail) = (0, 0);
    for i in 0..500u64 {
        let dim = 1 + (i as usize) % 16;
        let s1 = ive::keygen(dim, &params, 10_000 + 2 * i);
        let s2 = ive::keygen(dim, &params, 10_001 + 2 * i);
        let m = ive::keyswitch_key(&s1, &s2, &params).map_err(|e| e.to_string())?;
        let a: Vec<i128> = (0..dim)
            .map(|_| rng.gen_range(-p_bound..=p_bound))
            .collect();
        let b: Vec<i128> = (0..dim)
            .map(|_| rng.gen_range(-p_bound..=p_bound))
            .collect();
        let c1 = ive::encrypt(&s1, &a, &params, &mut rng).map_err(|e| e.to_string())?;
        let c2 = ive::encrypt(&s2, &b, &params, &mut rng).map_err(|e| e.to_string())?;
        let want: i128 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let fast = ive::inner_product(&m, &c1, &c2, &params).map_err(|e| e.to_string())?;
        let slow =
            ive::inner_product_reference(&m, &c1, &c2, &params).map_err(|e| e.to_string())?;
        ip_fail += usize::from(fast != want);
        ref_fail += usize::from((slow - fast).abs() > 1);
    }
    check(
        roundtrip_fail + ip_fail + ref_fail == 0,
        format!("roundtrip failures {roundtrip_fail}/1000, inner product failures {ip_fail}/500, reference drift {ref_fail}/500"),
    )
}

fn ope_monotone() -> Outcome {
    let ope = Ope::new(OpeKey::new(42)).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut xs: BTreeSet<i64> = BTreeSet::new();
    while xs.len() < 10_000 {
        xs.insert(rng.gen_range(-32_000..=32_000));
    }
    let cs: Vec<_> = xs
        .iter()
        .map(|&x| ope.encrypt_signed(x))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let violations = cs.windows(2).filter(|w| w[0] >= w[1]).count();
    check(
        violations == 0,
        format!("{violations} violations over {} sorted inputs", cs.len()),
    )
}

fn jl_accuracy() -> Outcome {
    let mut spec = SyntheticSpec::desk(400, 3);
    spec.dims = PartDims::NOMINAL;
    spec.clusters = 20;
    let records = harness::generate(&spec).map_err(|e| e.to_string())?;
    let bundles: Vec<_> = records.iter().map(|r| r.features.clone()).collect();
    let cfg = FeatureConfig::default();
    let pipe = FeaturePipeline::fit(&bundles, cfg.clone(), 3).map_err(|e| e.to_string())?;
    let prepared: Vec<_> = bundles
        .iter()
        .map(|b| pipe.prepare(b))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (mut total, mut count) = (0.0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    while count < 200 {
        let (a, b) = (rng.gen_range(0..400), rng.gen_range(0..400));
        let truth =
            features::l1_distance(&prepared[a].normalized.v_l1, &prepared[b].normalized.v_l1);
        if a == b || truth <= 0.0 {
            continue;
        }
        let est = features::approx_l1_distance(&prepared[a].v_hat, &prepared[b].v_hat, &cfg);
        total += (est - truth).abs() / truth;
        count += 1;
    }
    let err = total / count as f64;
    check(
        pipe.m_l1() == 864 && pipe.m_hat() == 1296 && err <= 0.05,
        format!(
            "m_L1 {}, m_hat {}, mean relative L1 error {:.4} over {count} pairs",
            pipe.m_l1(),
            pipe.m_hat(),
            err
        ),
    )
}

fn comparison_soundness() -> Outcome {
    let (m_hat, m_kl) = (24, 8);
    let f = fixture(m_hat, m_kl, 16, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut checked1, mut checked2, mut bad) = (0, 0, 0);
    for _ in 0..1000 {
        let pts: Vec<(Vec<i64>, KlFixed)> = (0..3)
            .map(|_| (random_v_hat(m_hat, 60, &mut rng), random_kl(m_kl, &mut rng)))
            .collect();
        let split = rng.gen_range(0..m_hat);
        let na = encrypt_node(
            &pts[0].0,
            &pts[0].1,
            Some(split),
            &f.params,
            &f.keys,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let nb = encrypt_node(&pts[1].0, &pts[1].1, None, &f.params, &f.keys, &mut rng)
            .map_err(|e| e.to_string())?;
        let r_s = secure_compare::sample_r_s(&f.params.obf, &mut rng);
        let req = encrypt_request(&pts[2].0, &pts[2].1, r_s, &f.params, &f.keys, &mut rng)
            .map_err(|e| e.to_string())?;
        let prep =
            PreparedRequest::new(&f.cloud, &req, &f.params.ive).map_err(|e| e.to_string())?;
        let ca = prep.comp(&na).map_err(|e| e.to_string())?;
        let cb = prep.comp(&nb).map_err(|e| e.to_string())?;
        let ch = prep
            .comp_hyper(&na)
            .map_err(|e| e.to_string())?
            .ok_or("missing hyperplane")?;
        let du = |i: usize| {
            dis_units(
                (&pts[i].0, &pts[i].1),
                (&pts[2].0, &pts[2].1),
                &f.params.obf,
            )
        };
        let (da, db) = (du(0), du(1));
        let gap = i128::from(pts[0].0[split] - pts[2].0[split]);
        let h = i128::from(f.params.obf.lambda_l1) * gap * gap;
        // a gap of one unit times r_s already exceeds the 6·eps_max noise band
        let margin = |x: i128| x.abs() * i128::from(r_s) > 6 * i128::from(f.params.obf.eps_max);
        if margin(da - db) {
            checked1 += 1;
            bad += usize::from((ca - cb).signum() != (da - db).signum());
        }
        if margin(h - db) {
            checked2 += 1;
            bad += usize::from((ch - cb).signum() != (h - db).signum());
        }
    }
    check(
        bad == 0,
        format!("{bad} sign mismatches over {checked1} type-1 and {checked2} type-2 comparisons"),
    )
}

fn search_exactness() -> Outcome {
    let (mut exact, mut runs) = (0, 0);
    let (mut filtered, mut kept, mut worst_overlap) = (0, 0, 10);
    for i in 0..50u64 {
        let n = 60 + ((i * 37) % 240) as usize;
        let records =
            harness::generate(&SyntheticSpec::desk(n, 500 + i)).map_err(|e| e.to_string())?;
        for noise in [false, true] {
            let (mut state, cloud) = annotator::setup(&records, &desk_config(500 + i, noise))
                .map_err(|e| e.to_string())?;
            let corpus = harness::prepare_corpus(&state, &records).map_err(|e| e.to_string())?;
            let q = &records[(i as usize * 13) % n];
            let p = state
                .pipeline
                .prepare(&q.features)
                .map_err(|e| e.to_string())?;
            let oracle =
                harness::linear_scan_plain(&corpus, (&p.v_hat, &p.kl), 11, &state.params.obf);
            let req = state
                .make_request(&q.features, None)
                .map_err(|e| e.to_string())?;
            let (_, out) = annotator::cloud_annotate(&cloud, &req, &SearchConfig::default())
                .map_err(|e| e.to_string())?;
            let top: BTreeSet<u32> = oracle.iter().take(10).map(|(id, _)| *id).collect();
            let got: BTreeSet<u32> = out.ids().into_iter().collect();
            if !noise {
                runs += 1;
                exact += usize::from(got == top);
            } else if oracle.len() > 10 && oracle[9].1 == oracle[10].1 {
                filtered += 1;
            } else {
                kept += 1;
                worst_overlap = worst_overlap.min(got.intersection(&top).count());
            }
        }
    }
    check(
        exact == runs && worst_overlap >= 9,
        format!(
            "noise off: {exact}/{runs} exact; noise on: worst overlap {worst_overlap}/10 over {kept} instances ({filtered} filtered as ties)"
        ),
    )
}

fn distance_recovery() -> Outcome {
    let records = harness::generate(&SyntheticSpec::desk(100, 6)).map_err(|e| e.to_string())?;
    let (mut state, cloud) =
        annotator::setup(&records, &desk_config(6, true)).map_err(|e| e.to_string())?;
    let corpus = harness::prepare_corpus(&state, &records).map_err(|e| e.to_string())?;
    let (mut pairs, mut outside, mut self_bad, mut worst) = (0, 0, 0, 0.0f64);
    for q in records.iter().step_by(4) {
        let req = state
            .make_request(&q.features, None)
            .map_err(|e| e.to_string())?;
        let tol = state
            .recovery_tolerance(req.id)
            .map_err(|e| e.to_string())?;
        let (rs, _) = annotator::cloud_annotate(&cloud, &req, &SearchConfig::default())
            .map_err(|e| e.to_string())?;
        let qp = &corpus[q.id as usize];
        for e in &rs.entries {
            let node = &corpus[e.image as usize];
            let truth = dis_units(
                (&node.v_hat, &node.kl),
                (&qp.v_hat, &qp.kl),
                &state.params.obf,
            ) as f64
                / state.unit();
            let got = state
                .recover_distance(req.id, e.comp)
                .map_err(|e| e.to_string())?;
            worst = worst.max((got - truth).abs() / tol);
            outside += usize::from((got - truth).abs() > tol);
            pairs += 1;
        }
        let rec = state.consume_results(&rs).map_err(|e| e.to_string())?;
        self_bad += usize::from(rec[0].image != q.id || rec[0].distance.abs() > tol);
    }
    check(
        pairs >= 200 && outside == 0 && self_bad == 0,
        format!("{outside}/{pairs} pairs outside tolerance (worst {worst:.3} of tolerance), {self_bad} self-match failures"),
    )
}

fn keyword_pipeline() -> Outcome {
    let records = harness::generate(&SyntheticSpec::desk(200, 7)).map_err(|e| e.to_string())?;
    let (state, cloud) =
        annotator::setup(&records, &desk_config(7, true)).map_err(|e| e.to_string())?;
    let corpus = harness::prepare_corpus(&state, &records).map_err(|e| e.to_string())?;
    let mut user = state.clone();
    let (mut equal, mut differing_sets, mut mismatched) = (0, 0, 0);
    for q in records.iter().step_by(4).take(50) {
        let req = user
            .make_request(&q.features, None)
            .map_err(|e| e.to_string())?;
        let (rs, _) = annotator::cloud_annotate(&cloud, &req, &SearchConfig::default())
            .map_err(|e| e.to_string())?;
        let enc = select_keywords(&user.consume_results(&rs).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let qp = &corpus[q.id as usize];
        let oracle =
            harness::linear_scan_plain(&corpus, (&qp.v_hat, &qp.kl), 10, &state.params.obf);
        if oracle.iter().map(|(id, _)| *id).collect::<BTreeSet<_>>()
            != rs.entries.iter().map(|e| e.image).collect()
        {
            differing_sets += 1;
            continue;
        }
        let plain_entries: Vec<RecoveredEntry> = oracle
            .iter()
            .map(|&(id, units)| RecoveredEntry {
                image: id,
                distance: units as f64 / state.unit(),
                keywords: records[id as usize].keywords.clone(),
            })
            .collect();
        let plain = select_keywords(&plain_entries).map_err(|e| e.to_string())?;
        // positions may swap only between keywords of equal plaintext weight
        let weight = |k: &str| plain.iter().find(|(p, _)| p == k).map(|(_, w)| *w);
        let same = enc.len() == plain.len()
            && enc
                .iter()
                .zip(&plain)
                .all(|((k, _), (_, pw))| weight(k).is_some_and(|w| (w - pw).abs() < 1e-6));
        if same {
            equal += 1;
        } else {
            mismatched += 1;
        }
    }
    let queries: Vec<_> = records.iter().step_by(4).take(50).cloned().collect();
    let (row, _) = harness::evaluate(
        &state,
        &cloud,
        &records,
        &queries,
        &SearchConfig::default(),
        annotator::DEFAULT_TOP_K,
    )
    .map_err(|e| e.to_string())?;
    check(
        mismatched == 0 && equal > 0 && row.recall == 1.0,
        format!(
            "{equal} rankings equal, {mismatched} differ, {differing_sets} skipped for differing top-10 sets; self-query recall {:.4}",
            row.recall
        ),
    )
}

fn speedup_shape() -> Outcome {
    let records = harness::generate(&SyntheticSpec::desk(2000, 8)).map_err(|e| e.to_string())?;
    let (mut state, cloud) =
        annotator::setup(&records, &desk_config(8, true)).map_err(|e| e.to_string())?;
    let levels = [2.5, 10.0, 25.0, 50.0, 100.0];
    let mut ops = [0u64; 5];
    for q in records.iter().step_by(200) {
        let req = state
            .make_request(&q.features, None)
            .map_err(|e| e.to_string())?;
        for (i, &ap) in levels.iter().enumerate() {
            let cfg = SearchConfig {
                ap_percent: ap,
                ..SearchConfig::default()
            };
            let (_, out) =
                annotator::cloud_annotate(&cloud, &req, &cfg).map_err(|e| e.to_string())?;
            ops[i] += out.inner_products;
        }
    }
    let ratio = ops[1] as f64 / ops[4] as f64;
    let monotone = ops.windows(2).all(|w| w[0] < w[1]);
    check(
        ratio <= 0.15 && monotone,
        format!(
            "inner products over 10 queries at AP {levels:?}: {ops:?}; AP-10/AP-100 = {ratio:.3}"
        ),
    )
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let run_all = |dir: &Path| -> Result<(), String> {
        let out = dir.to_str().ok_or("non-utf8 temp dir")?;
        let req = format!("{out}/requests/req-0.bin");
        let steps: [&[&str]; 5] = [
            &["gen", "--images", "80"],
            &["setup", "--pca", "8"],
            &["request", "--image", "3", "--pca", "8"],
            &["annotate", "--request", &req],
            &["eval", "--pca", "8", "--query-count", "5"],
        ];
        for args in steps {
            let o = Command::new(env!("CARGO_BIN_EXE_cipherforest"))
                .args(["--out", out, "--seed", "9"])
                .args(args)
                .output()
                .map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(format!(
                    "{args:?} failed: {}",
                    String::from_utf8_lossy(&o.stderr)
                ));
            }
        }
        Ok(())
    };
    let (a, b) = (
        tempfile::tempdir().map_err(|e| e.to_string())?,
        tempfile::tempdir().map_err(|e| e.to_string())?,
    );
    run_all(a.path())?;
    run_all(b.path())?;
    let (fa, fb) = (files_under(a.path()), files_under(b.path()));
    if fa != fb {
        return Err(format!("artifact lists differ: {fa:?} vs {fb:?}"));
    }
    let differing: Vec<_> = fa
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    check(
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", fa.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("IVE correctness", ive_correctness),
        ("OPE monotonicity", ope_monotone),
        ("JL approximation", jl_accuracy),
        ("comparison soundness", comparison_soundness),
        ("search exactness", search_exactness),
        ("distance recovery", distance_recovery),
        ("keyword pipeline", keyword_pipeline),
        ("speedup shape", speedup_shape),
        ("determinism", determinism),
    ];
    let results: Vec<(Outcome, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|(_, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
                    (r, t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("criterion thread"))
            .collect()
    });
    let mut failed = 0;
    for (i, ((name, _), (r, secs))) in criteria.iter().zip(results).enumerate() {
        match r {
            Ok(d) => println!("criterion {}: PASS {name}: {d} ({secs:.1}s)", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {d} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

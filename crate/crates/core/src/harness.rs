//! Corpus I/O, synthetic corpora, linear-scan oracles, recall and sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotator::{self, CloudBundle, ImageRecord, SetupConfig, UserState};
use crate::error::{Error, Result};
use crate::features::{self, FeatureBundle, KlFixed, PartDims};
use crate::rkdf::{self, SearchConfig};
use crate::secure_compare::{self, ObfuscationConfig, PreparedRequest, RequestCipher};

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<ImageRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Validation(format!("corpus line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(w: &mut W, records: &[ImageRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub images: usize,
    pub clusters: usize,
    pub dims: PartDims,
    /// Per-entry standard deviation around the cluster centre.
    pub spread: f64,
    pub pool_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Small layout used for desk-scale runs: 16 L1 coordinates after PCA-X
    /// with X = 8 on 16-dim h/hq parts.
    pub fn desk(images: usize, seed: u64) -> Self {
        Self {
            images,
            clusters: (images / 20).max(1),
            dims: PartDims {
                rgb: 4,
                hsv: 4,
                lab: 8,
                g: 2,
                gq: 2,
                h: 16,
                hq: 16,
            },
            spread: 0.05,
            pool_size: 5,
            seed,
        }
    }
}

/// Gaussian clusters with strictly positive entries; each cluster owns a
/// pool of keywords and every image draws 3 to 5 of them.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<ImageRecord>> {
    if spec.images == 0 || spec.clusters == 0 {
        return Err(Error::InvalidParams(
            "need at least one image and one cluster".into(),
        ));
    }
    if spec.pool_size < 3 {
        return Err(Error::InvalidParams(
            "keyword pools need at least 3 words".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.spread).map_err(|e| Error::InvalidParams(e.to_string()))?;
    let d = spec.dims;
    let part_dims = [d.rgb, d.hsv, d.lab, d.g, d.gq, d.h, d.hq];
    let centres: Vec<Vec<Vec<f64>>> = (0..spec.clusters)
        .map(|_| {
            part_dims
                .iter()
                .map(|&n| (0..n).map(|_| rng.gen_range(0.05..1.0)).collect())
                .collect()
        })
        .collect();
    let pools: Vec<Vec<String>> = (0..spec.clusters)
        .map(|c| (0..spec.pool_size).map(|j| format!("c{c}-w{j}")).collect())
        .collect();
    let mut out = Vec::with_capacity(spec.images);
    for i in 0..spec.images {
        let c = i % spec.clusters;
        let mut parts: Vec<Vec<f64>> = centres[c]
            .iter()
            .map(|centre| {
                centre
                    .iter()
                    .map(|&x| (x + noise.sample(&mut rng)).max(1e-3))
                    .collect()
            })
            .collect();
        let take = rng.gen_range(3..=5usize.min(spec.pool_size));
        let mut kw: Vec<String> = pools[c].choose_multiple(&mut rng, take).cloned().collect();
        kw.sort();
        let hq = parts.pop().expect("seven parts");
        let h = parts.pop().expect("seven parts");
        let gq = parts.pop().expect("seven parts");
        let g = parts.pop().expect("seven parts");
        let lab = parts.pop().expect("seven parts");
        let hsv = parts.pop().expect("seven parts");
        let rgb = parts.pop().expect("seven parts");
        out.push(ImageRecord {
            id: i as u32,
            keywords: kw,
            features: FeatureBundle {
                rgb,
                hsv,
                lab,
                g,
                gq,
                h,
                hq,
            },
        });
    }
    Ok(out)
}

/// Prepared plaintext view of one image, as used by the forest.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainRecord {
    pub id: u32,
    pub v_hat: Vec<i64>,
    pub kl: KlFixed,
}

pub fn prepare_corpus(state: &UserState, records: &[ImageRecord]) -> Result<Vec<PlainRecord>> {
    records
        .iter()
        .map(|r| {
            let p = state.pipeline.prepare(&r.features)?;
            Ok(PlainRecord {
                id: r.id,
                v_hat: p.v_hat,
                kl: p.kl,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScanMode {
    Plaintext,
    Encrypted,
}

/// Plaintext linear scan: top-`l` by `(distance units, id)`.
pub fn linear_scan_plain(
    corpus: &[PlainRecord],
    query: (&[i64], &KlFixed),
    l: usize,
    obf: &ObfuscationConfig,
) -> Vec<(u32, i128)> {
    let mut all: Vec<(i128, u32)> = corpus
        .iter()
        .map(|r| {
            (
                secure_compare::dis_units((&r.v_hat, &r.kl), query, obf),
                r.id,
            )
        })
        .collect();
    all.sort_unstable();
    all.into_iter().take(l).map(|(d, id)| (id, d)).collect()
}

/// Encrypted linear scan over every image cipher; returns top-`l` Comps and
/// the inner-product count (two per image).
pub fn linear_scan_encrypted(
    cloud: &CloudBundle,
    req: &annotator::AnnotationRequest,
    l: usize,
) -> Result<(Vec<(u32, i128)>, u64)> {
    let rc = RequestCipher {
        l1: req.l1.clone(),
        kl: req.kl.clone(),
    };
    let prepared = PreparedRequest::new(&cloud.keys, &rc, &cloud.ive)?;
    let mut queue = Vec::new();
    let mut ops = 0;
    for (id, img) in &cloud.forest.images {
        let c = prepared.comp_vectors(&img.l1, &img.kl)?;
        ops += 2;
        rkdf::queue_push(&mut queue, l, c, *id);
    }
    Ok((queue.into_iter().map(|(c, id)| (id, c)).collect(), ops))
}

/// Mean per-keyword recall over the keywords present in the ground truth.
pub fn eval_recall(predicted: &[Vec<String>], truth: &[Vec<String>]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (p, t) in predicted.iter().zip(truth) {
        let p: BTreeSet<&str> = p.iter().map(String::as_str).collect();
        let t: BTreeSet<&str> = t.iter().map(String::as_str).collect();
        for k in t {
            let e = per.entry(k).or_insert((0, 0));
            e.1 += 1;
            if p.contains(k) {
                e.0 += 1;
            }
        }
    }
    if per.is_empty() {
        return Err(Error::Validation("ground truth has no keywords".into()));
    }
    let sum: f64 = per
        .values()
        .map(|&(hit, all)| hit as f64 / all as f64)
        .sum();
    Ok(sum / per.len() as f64)
}

/// One row of an evaluation or sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub ap_percent: f64,
    pub pca_strength: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub m_hat: usize,
    pub jl_error: f64,
    pub recall: f64,
    pub encrypted_ops: u64,
    pub oracle_ops: u64,
    pub speedup: f64,
    /// Mean overlap of the returned set with the brute-force top-L.
    pub oracle_overlap: f64,
    pub distance_mismatches: usize,
    /// Only filled by timing runs, so evaluation files stay reproducible.
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query: u32,
    pub returned: Vec<u32>,
    pub oracle: Vec<u32>,
    pub distances: Vec<f64>,
    pub keywords: Vec<String>,
    pub inner_products: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub queries: Vec<QueryOutcome>,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "ap_percent,pca_strength,alpha,gamma,m_hat,jl_error,recall,encrypted_ops,oracle_ops,speedup,oracle_overlap,distance_mismatches,wall_ms"
        )?;
        for r in &self.rows {
            let wall = r.wall_ms.map(|x| format!("{x:.3}")).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{:.6},{:.6},{},{},{:.4},{:.4},{},{}",
                r.ap_percent,
                r.pca_strength,
                r.alpha,
                r.gamma,
                r.m_hat,
                r.jl_error,
                r.recall,
                r.encrypted_ops,
                r.oracle_ops,
                r.speedup,
                r.oracle_overlap,
                r.distance_mismatches,
                wall
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s =
            String::from("   AP    PCA  alpha  gamma  m_hat  recall   ops      speedup  overlap\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:>6} {:>5} {:>6} {:>6} {:>6}  {:.4}  {:>8}  {:>7.2}  {:.3}\n",
                r.ap_percent,
                r.pca_strength,
                r.alpha,
                r.gamma,
                r.m_hat,
                r.recall,
                r.encrypted_ops,
                r.speedup,
                r.oracle_overlap
            ));
        }
        s
    }
}

/// Mean absolute relative error of the projected L1 estimate against the
/// real L1 distance, over consecutive pairs of the corpus.
pub fn jl_error(state: &UserState, records: &[ImageRecord], pairs: usize) -> Result<f64> {
    let n = records.len();
    if n < 2 {
        return Ok(0.0);
    }
    let prepared: Vec<_> = records
        .iter()
        .map(|r| state.pipeline.prepare(&r.features))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..pairs.min(n * (n - 1) / 2) {
        let (a, b) = (i % n, (i * 7 + 1 + i / n) % n);
        if a == b {
            continue;
        }
        let truth =
            features::l1_distance(&prepared[a].normalized.v_l1, &prepared[b].normalized.v_l1);
        if truth <= 0.0 {
            continue;
        }
        let est = features::approx_l1_distance(
            &prepared[a].v_hat,
            &prepared[b].v_hat,
            &state.config.features,
        );
        total += (est - truth).abs() / truth;
        count += 1;
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// Runs every query through request, cloud search, recovery and keyword
/// selection, checking the results against the plaintext oracle.
pub fn evaluate(
    state: &UserState,
    cloud: &CloudBundle,
    records: &[ImageRecord],
    queries: &[ImageRecord],
    search: &SearchConfig,
    top_k: usize,
) -> Result<(EvalRow, Vec<QueryOutcome>)> {
    if queries.is_empty() {
        return Err(Error::Validation("no queries".into()));
    }
    let mut user = state.clone();
    let corpus = prepare_corpus(&user, records)?;
    let mut outcomes = Vec::with_capacity(queries.len());
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    let (mut ops, mut mismatches, mut overlap) = (0u64, 0usize, 0.0);
    for q in queries {
        let p = user.pipeline.prepare(&q.features)?;
        let req = user.make_request_prepared(&p.v_hat, &p.kl, None)?;
        let (rs, _) = annotator::cloud_annotate(cloud, &req, search)?;
        let tol = user.recovery_tolerance(req.id)?;
        let recovered = user.consume_results(&rs)?;
        let by_id: BTreeMap<u32, &PlainRecord> = corpus.iter().map(|r| (r.id, r)).collect();
        for e in &recovered {
            let r = by_id.get(&e.image).ok_or(Error::MissingCipher(e.image))?;
            let units =
                secure_compare::dis_units((&r.v_hat, &r.kl), (&p.v_hat, &p.kl), &user.params.obf);
            let want = units as f64 / user.unit();
            if (e.distance - want).abs() > tol {
                mismatches += 1;
            }
        }
        let oracle: Vec<u32> = linear_scan_plain(
            &corpus,
            (&p.v_hat, &p.kl),
            search.queue_size,
            &user.params.obf,
        )
        .into_iter()
        .map(|(id, _)| id)
        .collect();
        let returned: Vec<u32> = rs.entries.iter().map(|e| e.image).collect();
        let inter = returned.iter().filter(|id| oracle.contains(id)).count();
        overlap += inter as f64 / oracle.len().max(1) as f64;
        let ranked = annotator::select_keywords(&recovered)?;
        let kw = annotator::top_k(&ranked, top_k);
        ops += rs.inner_products;
        predicted.push(kw.clone());
        truth.push(q.keywords.clone());
        outcomes.push(QueryOutcome {
            query: q.id,
            returned,
            oracle,
            distances: recovered.iter().map(|e| e.distance).collect(),
            keywords: kw,
            inner_products: rs.inner_products,
        });
    }
    let nq = queries.len() as u64;
    let oracle_ops = 2 * cloud.forest.node_count() as u64 * nq;
    let fc = &state.config.features;
    let row = EvalRow {
        ap_percent: search.ap_percent,
        pca_strength: fc.pca_strength,
        alpha: fc.alpha,
        gamma: fc.gamma,
        m_hat: state.params.m_hat,
        jl_error: jl_error(state, records, 200)?,
        recall: eval_recall(&predicted, &truth)?,
        encrypted_ops: ops,
        oracle_ops,
        speedup: if ops == 0 {
            0.0
        } else {
            oracle_ops as f64 / ops as f64
        },
        oracle_overlap: overlap / nq as f64,
        distance_mismatches: mismatches,
        wall_ms: None,
    };
    Ok((row, outcomes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub ap: Vec<f64>,
    pub pca: Vec<usize>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
}

/// Runs [`evaluate`] over a grid; one setup per `(pca, alpha, gamma)`.
pub fn sweep(
    records: &[ImageRecord],
    queries: &[ImageRecord],
    base: &SetupConfig,
    search: &SearchConfig,
    grid: &SweepGrid,
    top_k: usize,
    timed: bool,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for &pca in &grid.pca {
        for &alpha in &grid.alpha {
            for &gamma in &grid.gamma {
                let mut cfg = base.clone();
                cfg.features.pca_strength = pca;
                cfg.features.alpha = alpha;
                cfg.features.gamma = gamma;
                let (state, cloud) = annotator::setup(records, &cfg)?;
                for &ap in &grid.ap {
                    let s = SearchConfig {
                        ap_percent: ap,
                        ..search.clone()
                    };
                    let t = Instant::now();
                    let (mut row, _) = evaluate(&state, &cloud, records, queries, &s, top_k)?;
                    if timed {
                        row.wall_ms = Some(t.elapsed().as_secs_f64() * 1e3);
                    }
                    rows.push(row);
                }
            }
        }
    }
    Ok(EvalReport {
        rows,
        queries: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub images: usize,
    pub m_hat: usize,
    pub q_bits: u64,
    pub setup_ms: f64,
    pub request_ms: f64,
    pub annotate_ms: f64,
    pub linear_scan_ms: f64,
    pub encrypted_ops: u64,
    pub linear_scan_ops: u64,
}

/// Times setup, one request, one forest search and one encrypted linear scan.
pub fn bench(
    records: &[ImageRecord],
    cfg: &SetupConfig,
    search: &SearchConfig,
) -> Result<BenchReport> {
    let t = Instant::now();
    let (mut state, cloud) = annotator::setup(records, cfg)?;
    let setup_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    let req = state.make_request(&records[0].features, None)?;
    let request_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    let (rs, _) = annotator::cloud_annotate(&cloud, &req, search)?;
    let annotate_ms = t.elapsed().as_secs_f64() * 1e3;
    let t = Instant::now();
    let (_, scan_ops) = linear_scan_encrypted(&cloud, &req, search.queue_size)?;
    let linear_scan_ms = t.elapsed().as_secs_f64() * 1e3;
    Ok(BenchReport {
        images: records.len(),
        m_hat: state.params.m_hat,
        q_bits: state.params.ive.q.bits(),
        setup_ms,
        request_ms,
        annotate_ms,
        linear_scan_ms,
        encrypted_ops: rs.inner_products,
        linear_scan_ops: scan_ops,
    })
}

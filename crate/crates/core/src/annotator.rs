//! End-to-end annotation: user-side setup and requests, the cloud search
//! call, distance recovery and keyword ranking.
//!
//! Recovery inverts the affine form of `Comp`:
//! `Dis = (Comp - r_s r (λ_KL - 2 λ_L1)) / (r_s U)` where `U` is the number of
//! comparison units per unit of distance. The result is the L1 estimate from
//! `v̂` plus the fixed-point KL divergence, off by at most
//! `3 eps_max / (r_s U)`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{
    self, FeatureBundle, FeatureConfig, FeaturePipeline, KlFixed, PartDims, PcaPair,
};
use crate::ive::{IveParams, KeySwitchMatrix, SecretKey};
use crate::ope::{Ope, OpeCiphertext, OpeKey};
use crate::rkdf::{self, EncryptedForest, ImageCipher, SearchConfig, SearchOutcome, SearchRequest};
use crate::secure_compare::{
    self, CloudKeys, CompareKeys, CompareParams, KlRequestCipher, L1RequestCipher,
    ObfuscationConfig, PreparedRequest, RequestCipher,
};

pub const DEFAULT_TOP_K: usize = 6;

/// One ingested image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u32,
    pub keywords: Vec<String>,
    pub features: FeatureBundle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetupConfig {
    pub seed: u64,
    pub features: FeatureConfig,
    pub trees: usize,
    pub queue_size: usize,
    pub noise: bool,
    pub eps_max: i64,
    /// IVE error bound used when noise is on.
    pub ive_e_max: u64,
    pub r_req_min: i64,
    pub r_req_max: i64,
}

impl Default for SetupConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            features: FeatureConfig::default(),
            trees: rkdf::DEFAULT_TREES,
            queue_size: rkdf::DEFAULT_QUEUE,
            noise: true,
            eps_max: 16,
            ive_e_max: 64,
            r_req_min: 1 << 16,
            r_req_max: 1 << 20,
        }
    }
}

/// Sub-seed for one named purpose.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn rng_for(seed: u64, label: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(seed, label))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub r_s: i64,
    /// `Σ v̂²` of the request vector.
    pub sq_norm: i128,
}

/// Data-owner state. Keys are stored separately from the JSON part.
#[derive(Clone, Debug)]
pub struct UserState {
    pub config: SetupConfig,
    pub params: CompareParams,
    pub keys: CompareKeys,
    pub ope: Ope,
    pub pipeline: FeaturePipeline,
    pub seal_key: [u8; 32],
    pub split_fields: Vec<usize>,
    pub ledger: BTreeMap<u64, LedgerEntry>,
    pub next_request: u64,
}

/// What the cloud holds after setup.
#[derive(Clone, Debug)]
pub struct CloudBundle {
    pub forest: EncryptedForest,
    pub keys: CloudKeys,
    pub ive: IveParams,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationRequest {
    pub id: u64,
    pub l1: L1RequestCipher,
    pub kl: KlRequestCipher,
    pub split_values: BTreeMap<usize, OpeCiphertext>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub image: u32,
    pub comp: i128,
    pub sealed_keywords: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultSet {
    pub request_id: u64,
    /// Ascending by `Comp`.
    pub entries: Vec<ResultEntry>,
    pub inner_products: u64,
    pub visited: u64,
}

/// A returned image after decryption on the user side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveredEntry {
    pub image: u32,
    pub distance: f64,
    pub keywords: Vec<String>,
}

pub type RankedKeywords = Vec<(String, f64)>;

pub fn setup(records: &[ImageRecord], config: &SetupConfig) -> Result<(UserState, CloudBundle)> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ids = BTreeSet::new();
    for r in records {
        if !ids.insert(r.id) {
            return Err(Error::Validation(format!("duplicate image id {}", r.id)));
        }
        if r.keywords.iter().any(|k| k.is_empty()) {
            return Err(Error::Validation(format!(
                "image {} has an empty keyword",
                r.id
            )));
        }
    }
    if config.trees == 0 || config.queue_size == 0 {
        return Err(Error::InvalidParams(
            "tree count and queue size must be positive".into(),
        ));
    }
    let seed = config.seed;
    let bundles: Vec<FeatureBundle> = records.iter().map(|r| r.features.clone()).collect();
    let pipeline =
        FeaturePipeline::fit(&bundles, config.features.clone(), derive_seed(seed, "jl"))?;
    let mut plain: BTreeMap<u32, (Vec<i64>, KlFixed)> = BTreeMap::new();
    for r in records {
        let p = pipeline.prepare(&r.features)?;
        plain.insert(r.id, (p.v_hat, p.kl));
    }

    let max_v = plain
        .values()
        .flat_map(|(v, _)| v.iter())
        .map(|x| x.abs())
        .max()
        .unwrap_or(0);
    let ope_max = (1i64 << (crate::ope::DEFAULT_DOMAIN_BITS - 1)) - 2;
    if max_v > ope_max {
        return Err(Error::InvalidParams(format!(
            "projected coordinate {max_v} exceeds the OPE domain"
        )));
    }
    let v_bound = (4 * max_v + 64).min(ope_max);

    let fc = &config.features;
    let l1_unit = features::approx_unit(fc);
    let kl_unit = fc.kl_scale * fc.kl_scale;
    if l1_unit.fract() != 0.0 || kl_unit.fract() != 0.0 {
        return Err(Error::InvalidParams(
            "quantization scales must give integral distance units".into(),
        ));
    }
    let (lambda_l1, lambda_kl) = secure_compare::alignment(l1_unit as u64, kl_unit as u64)?;
    let r = rng_for(seed, "offset").gen_range((1i64 << 19)..=(1i64 << 20));
    let obf = ObfuscationConfig {
        r,
        eps_max: if config.noise { config.eps_max } else { 0 },
        r_req_min: config.r_req_min,
        r_req_max: config.r_req_max,
        lambda_l1,
        lambda_kl,
        v_bound,
    };
    let e_max = if config.noise { config.ive_e_max } else { 0 };
    let params = CompareParams::new(
        pipeline.m_hat(),
        pipeline.m_kl(),
        fc.kl_scale as i64,
        obf,
        e_max,
    )?;
    let keys = CompareKeys::generate(&params, derive_seed(seed, "ive"));
    let cloud_keys = keys.cloud_keys(&params)?;
    let ope = Ope::new(OpeKey::new(derive_seed(seed, "ope")))?;
    let seal_key = derive_key(seed);

    let vectors: Vec<(u32, Vec<i64>)> = plain.iter().map(|(id, (v, _))| (*id, v.clone())).collect();
    let forest = rkdf::build_forest(&vectors, config.trees, &mut rng_for(seed, "forest"))?;

    let mut rng = rng_for(seed, "encrypt");
    let kw: BTreeMap<u32, &Vec<String>> = records.iter().map(|r| (r.id, &r.keywords)).collect();
    let mut images = BTreeMap::new();
    for (id, (v_hat, kl)) in &plain {
        let l1 = secure_compare::l1_encrypt_node(v_hat, None, &params, &keys, &mut rng)?;
        let k = secure_compare::kl_encrypt_node(kl, false, &params, &keys, &mut rng)?;
        images.insert(
            *id,
            ImageCipher {
                l1: l1.cv,
                kl: k.cv,
                keywords: seal_keywords(&seal_key, *id, kw[id])?,
            },
        );
    }
    let ef = rkdf::encrypt_forest(
        &forest,
        &plain,
        images,
        &ope,
        &params,
        &keys,
        config.queue_size as u32,
        &mut rng,
    )?;

    let state = UserState {
        config: config.clone(),
        split_fields: ef.split_fields.clone(),
        params: params.clone(),
        keys,
        ope,
        pipeline,
        seal_key,
        ledger: BTreeMap::new(),
        next_request: 0,
    };
    Ok((
        state,
        CloudBundle {
            forest: ef,
            keys: cloud_keys,
            ive: params.ive,
        },
    ))
}

fn derive_key(seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"keyword-seal");
    h.finalize().into()
}

fn nonce_for(key: &[u8; 32], id: u32) -> [u8; 12] {
    let mut h = Sha256::new();
    h.update(key);
    h.update(id.to_le_bytes());
    let d = h.finalize();
    d[..12].try_into().expect("digest has 32 bytes")
}

pub fn seal_keywords(key: &[u8; 32], id: u32, keywords: &[String]) -> Result<Vec<u8>> {
    let cipher = Aes256Gcm::new(key.into());
    let msg = serde_json::to_vec(keywords)?;
    let aad = id.to_le_bytes();
    cipher
        .encrypt(
            Nonce::from_slice(&nonce_for(key, id)),
            Payload {
                msg: &msg,
                aad: &aad,
            },
        )
        .map_err(|e| Error::Seal(e.to_string()))
}

pub fn open_keywords(key: &[u8; 32], id: u32, sealed: &[u8]) -> Result<Vec<String>> {
    let cipher = Aes256Gcm::new(key.into());
    let aad = id.to_le_bytes();
    let msg = cipher
        .decrypt(
            Nonce::from_slice(&nonce_for(key, id)),
            Payload {
                msg: sealed,
                aad: &aad,
            },
        )
        .map_err(|e| Error::Seal(e.to_string()))?;
    Ok(serde_json::from_slice(&msg)?)
}

impl UserState {
    /// Builds a request from raw features; `r_s` is drawn fresh unless given.
    pub fn make_request(
        &mut self,
        bundle: &FeatureBundle,
        r_s: Option<i64>,
    ) -> Result<AnnotationRequest> {
        let p = self.pipeline.prepare(bundle)?;
        self.make_request_prepared(&p.v_hat, &p.kl, r_s)
    }

    pub fn make_request_prepared(
        &mut self,
        v_hat: &[i64],
        kl: &KlFixed,
        r_s: Option<i64>,
    ) -> Result<AnnotationRequest> {
        let id = self.next_request;
        let mut rng = rng_for(self.config.seed, &format!("request-{id}"));
        let r_s = match r_s {
            Some(x) => x,
            None => secure_compare::sample_r_s(&self.params.obf, &mut rng),
        };
        let cipher: RequestCipher =
            secure_compare::encrypt_request(v_hat, kl, r_s, &self.params, &self.keys, &mut rng)?;
        let split_values = self
            .split_fields
            .iter()
            .map(|&s| Ok((s, self.ope.encrypt_signed(v_hat[s])?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let sq_norm = v_hat.iter().map(|&x| i128::from(x) * i128::from(x)).sum();
        self.ledger.insert(id, LedgerEntry { r_s, sq_norm });
        self.next_request += 1;
        Ok(AnnotationRequest {
            id,
            l1: cipher.l1,
            kl: cipher.kl,
            split_values,
        })
    }

    /// Comparison units per unit of distance.
    pub fn unit(&self) -> f64 {
        self.params.obf.lambda_l1 as f64 * features::approx_unit(&self.config.features)
    }

    pub fn recover_distance(&self, request_id: u64, comp: i128) -> Result<f64> {
        let e = self
            .ledger
            .get(&request_id)
            .ok_or(Error::UnknownRequest(request_id))?;
        let centered = comp - self.params.obf.comp_offset(e.r_s);
        Ok(centered as f64 / (e.r_s as f64 * self.unit()))
    }

    /// Recovery tolerance for one request: noise bound plus one quantum of
    /// each fixed-point term.
    pub fn recovery_tolerance(&self, request_id: u64) -> Result<f64> {
        let e = self
            .ledger
            .get(&request_id)
            .ok_or(Error::UnknownRequest(request_id))?;
        let noise = self.params.obf.comp_noise() as f64 / (e.r_s as f64 * self.unit());
        let quanta = 1.0 / features::approx_unit(&self.config.features)
            + 1.0 / (self.config.features.kl_scale * self.config.features.kl_scale);
        Ok(noise + quanta)
    }

    /// Recovers distances, opens keywords and drops the ledger entry.
    pub fn consume_results(&mut self, results: &ResultSet) -> Result<Vec<RecoveredEntry>> {
        let out = results
            .entries
            .iter()
            .map(|e| {
                Ok(RecoveredEntry {
                    image: e.image,
                    distance: self.recover_distance(results.request_id, e.comp)?,
                    keywords: open_keywords(&self.seal_key, e.image, &e.sealed_keywords)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.ledger
            .remove(&results.request_id)
            .ok_or(Error::UnknownRequest(results.request_id))?;
        Ok(out)
    }
}

/// Cloud side: runs the forest search and attaches sealed keywords.
pub fn cloud_annotate(
    cloud: &CloudBundle,
    req: &AnnotationRequest,
    cfg: &SearchConfig,
) -> Result<(ResultSet, SearchOutcome)> {
    let rc = RequestCipher {
        l1: req.l1.clone(),
        kl: req.kl.clone(),
    };
    let prepared = PreparedRequest::new(&cloud.keys, &rc, &cloud.ive)?;
    let sreq = SearchRequest {
        prepared,
        split_values: req.split_values.clone(),
    };
    let outcome = rkdf::search(&cloud.forest, &sreq, cfg)?;
    let entries = outcome
        .results
        .iter()
        .map(|&(image, comp)| {
            let img = cloud
                .forest
                .images
                .get(&image)
                .ok_or(Error::MissingCipher(image))?;
            Ok(ResultEntry {
                image,
                comp,
                sealed_keywords: img.keywords.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rs = ResultSet {
        request_id: req.id,
        entries,
        inner_products: outcome.inner_products,
        visited: outcome.visited as u64,
    };
    Ok((rs, outcome))
}

/// Weights each image by `1 - Dis / ΣDis` and sums per keyword. A single
/// result or a zero total gets uniform weight 1.
pub fn select_keywords(entries: &[RecoveredEntry]) -> Result<RankedKeywords> {
    if entries.is_empty() {
        return Err(Error::Validation("no results to rank".into()));
    }
    let dists: Vec<f64> = entries.iter().map(|e| e.distance.max(0.0)).collect();
    let total: f64 = dists.iter().sum();
    let uniform = entries.len() == 1 || total <= 0.0;
    let mut weights: BTreeMap<&str, f64> = BTreeMap::new();
    for (e, d) in entries.iter().zip(&dists) {
        let w = if uniform { 1.0 } else { 1.0 - d / total };
        let distinct: BTreeSet<&str> = e.keywords.iter().map(String::as_str).collect();
        for k in distinct {
            *weights.entry(k).or_insert(0.0) += w;
        }
    }
    let mut ranked: RankedKeywords = weights
        .into_iter()
        .map(|(k, w)| (k.to_string(), w))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(ranked)
}

pub fn top_k(ranked: &RankedKeywords, k: usize) -> Vec<String> {
    ranked.iter().take(k).map(|(s, _)| s.clone()).collect()
}

// ---------------------------------------------------------------------------
// Persistence of user state: JSON for everything but the raw keys, which go
// into a file of six concatenated IVE key records.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UserStateFile {
    pub config: SetupConfig,
    pub params: CompareParams,
    pub ope_key: OpeKey,
    pub dims: PartDims,
    pub pca: PcaPair,
    pub jl_seed: u64,
    pub seal_key: String,
    pub split_fields: Vec<usize>,
    pub ledger: BTreeMap<u64, LedgerEntry>,
    pub next_request: u64,
}

impl UserState {
    pub fn to_file(&self) -> UserStateFile {
        UserStateFile {
            config: self.config.clone(),
            params: self.params.clone(),
            ope_key: *self.ope.key(),
            dims: self.pipeline.dims,
            pca: self.pipeline.pca.clone(),
            jl_seed: self.pipeline.jl_seed,
            seal_key: hex::encode(self.seal_key),
            split_fields: self.split_fields.clone(),
            ledger: self.ledger.clone(),
            next_request: self.next_request,
        }
    }

    pub fn from_file(f: UserStateFile, keys: CompareKeys) -> Result<Self> {
        let seal: Vec<u8> =
            hex::decode(&f.seal_key).map_err(|e| Error::format("user state", e.to_string()))?;
        let seal_key: [u8; 32] = seal
            .try_into()
            .map_err(|_| Error::format("user state", "seal key length"))?;
        let pipeline =
            FeaturePipeline::from_parts(f.config.features.clone(), f.dims, f.pca, f.jl_seed);
        if pipeline.m_hat() != f.params.m_hat {
            return Err(Error::format(
                "user state",
                "projection size disagrees with parameters",
            ));
        }
        Ok(Self {
            config: f.config,
            params: f.params,
            keys,
            ope: Ope::new(f.ope_key)?,
            pipeline,
            seal_key,
            split_fields: f.split_fields,
            ledger: f.ledger,
            next_request: f.next_request,
        })
    }
}

pub fn write_keys<W: Write>(w: &mut W, keys: &CompareKeys, ive: &IveParams) -> Result<()> {
    for k in [
        &keys.l1_data,
        &keys.l1_req,
        &keys.hyper_data,
        &keys.hyper_req,
        &keys.kl_data,
        &keys.kl_req,
    ] {
        k.write_to(w, &ive.q)?;
    }
    Ok(())
}

pub fn read_keys<R: Read>(r: &mut R) -> Result<CompareKeys> {
    let mut next = || SecretKey::read_from(r).map(|(k, _)| k);
    Ok(CompareKeys {
        l1_data: next()?,
        l1_req: next()?,
        hyper_data: next()?,
        hyper_req: next()?,
        kl_data: next()?,
        kl_req: next()?,
    })
}

pub fn write_cloud_keys<W: Write>(w: &mut W, keys: &CloudKeys, ive: &IveParams) -> Result<()> {
    for m in [&keys.l1, &keys.hyper, &keys.kl] {
        m.write_to(w, &ive.q)?;
    }
    Ok(())
}

pub fn read_cloud_keys<R: Read>(r: &mut R) -> Result<CloudKeys> {
    let mut next = || KeySwitchMatrix::read_from(r).map(|(m, _)| m);
    Ok(CloudKeys {
        l1: next()?,
        hyper: next()?,
        kl: next()?,
    })
}

#![allow(dead_code)]

use cipherforest::features::KlFixed;
use cipherforest::secure_compare::{CloudKeys, CompareKeys, CompareParams, ObfuscationConfig};
use rand::Rng;

pub const KL_SCALE: f64 = 1e4;

pub fn obf(eps_max: i64, v_bound: i64) -> ObfuscationConfig {
    ObfuscationConfig {
        r: 1 << 20,
        eps_max,
        r_req_min: 1 << 16,
        r_req_max: 1 << 20,
        lambda_l1: 3125,
        lambda_kl: 16,
        v_bound,
    }
}

pub struct Fixture {
    pub params: CompareParams,
    pub keys: CompareKeys,
    pub cloud: CloudKeys,
}

pub fn fixture(m_hat: usize, m_kl: usize, eps_max: i64, seed: u64) -> Fixture {
    let e_max = if eps_max == 0 { 0 } else { 64 };
    let params =
        CompareParams::new(m_hat, m_kl, KL_SCALE as i64, obf(eps_max, 512), e_max).unwrap();
    let keys = CompareKeys::generate(&params, seed);
    let cloud = keys.cloud_keys(&params).unwrap();
    Fixture {
        params,
        keys,
        cloud,
    }
}

/// Even entries in `[-bound, bound]`.
pub fn random_v_hat<R: Rng>(m: usize, bound: i64, rng: &mut R) -> Vec<i64> {
    (0..m)
        .map(|_| 2 * rng.gen_range(-bound / 2..=bound / 2))
        .collect()
}

/// A strictly positive distribution quantized for the KL layout.
pub fn random_kl<R: Rng>(m: usize, rng: &mut R) -> KlFixed {
    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    KlFixed::new(&raw.iter().map(|x| x / s).collect::<Vec<_>>(), KL_SCALE)
}

pub fn desk_config(seed: u64, noise: bool) -> cipherforest::annotator::SetupConfig {
    let mut cfg = cipherforest::annotator::SetupConfig {
        seed,
        noise,
        ..Default::default()
    };
    cfg.features.pca_strength = 8;
    cfg
}

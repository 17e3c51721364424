//! Keyed order-preserving encryption for split-field values.
//!
//! The map is a lazily sampled strictly increasing function from
//! `[0, 2^domain_bits)` into `[0, 2^range_bits)`. Encrypting `x` walks a
//! binary search over the domain: the image of each interval midpoint is
//! drawn uniformly from the range slice that still leaves room for every
//! other point of the interval, using a PRF of the seed and the interval
//! bounds. The same interval always yields the same draw, so the map is a
//! pure function of the key.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_DOMAIN_BITS: u32 = 16;
pub const DEFAULT_RANGE_BITS: u32 = 32;

/// Offset that maps signed split values onto the non-negative domain.
pub const SIGNED_OFFSET: i64 = 1 << (DEFAULT_DOMAIN_BITS - 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpeKey {
    pub seed: u64,
    pub domain_bits: u32,
    pub range_bits: u32,
}

impl OpeKey {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            domain_bits: DEFAULT_DOMAIN_BITS,
            range_bits: DEFAULT_RANGE_BITS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct OpeCiphertext(pub u64);

#[derive(Debug)]
pub struct Ope {
    key: OpeKey,
    memo: Mutex<HashMap<u64, u64>>,
}

impl Clone for Ope {
    fn clone(&self) -> Self {
        let memo = self.memo.lock().expect("ope memo poisoned").clone();
        Self {
            key: self.key,
            memo: Mutex::new(memo),
        }
    }
}

impl Ope {
    pub fn new(key: OpeKey) -> Result<Self> {
        if key.domain_bits == 0 || key.range_bits <= key.domain_bits || key.range_bits > 63 {
            return Err(Error::InvalidParams(format!(
                "OPE needs 0 < domain_bits < range_bits <= 63, got {} / {}",
                key.domain_bits, key.range_bits
            )));
        }
        Ok(Self {
            key,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn key(&self) -> &OpeKey {
        &self.key
    }

    pub fn encrypt(&self, x: u64) -> Result<OpeCiphertext> {
        if x >> self.key.domain_bits != 0 {
            return Err(Error::OpeDomain {
                value: x as i64,
                bits: self.key.domain_bits,
            });
        }
        if let Some(&y) = self.memo.lock().expect("ope memo poisoned").get(&x) {
            return Ok(OpeCiphertext(y));
        }
        let y = self.walk(x);
        self.memo.lock().expect("ope memo poisoned").insert(x, y);
        Ok(OpeCiphertext(y))
    }

    /// Encrypts a signed value shifted into the unsigned domain.
    pub fn encrypt_signed(&self, v: i64) -> Result<OpeCiphertext> {
        let offset = 1i64 << (self.key.domain_bits - 1);
        let x = v
            .checked_add(offset)
            .filter(|x| *x >= 0 && (*x as u64) >> self.key.domain_bits == 0);
        match x {
            Some(x) => self.encrypt(x as u64),
            None => Err(Error::OpeDomain {
                value: v,
                bits: self.key.domain_bits,
            }),
        }
    }

    fn walk(&self, x: u64) -> u64 {
        let (mut dlo, mut dhi) = (0u64, (1u64 << self.key.domain_bits) - 1);
        let (mut rlo, mut rhi) = (0u64, (1u64 << self.key.range_bits) - 1);
        loop {
            let mid = dlo + (dhi - dlo) / 2;
            let lo = rlo + (mid - dlo);
            let hi = rhi - (dhi - mid);
            let y = self.interval_rng(dlo, dhi, rlo, rhi).gen_range(lo..=hi);
            match x.cmp(&mid) {
                std::cmp::Ordering::Equal => return y,
                std::cmp::Ordering::Less => {
                    dhi = mid - 1;
                    rhi = y - 1;
                }
                std::cmp::Ordering::Greater => {
                    dlo = mid + 1;
                    rlo = y + 1;
                }
            }
        }
    }

    fn interval_rng(&self, dlo: u64, dhi: u64, rlo: u64, rhi: u64) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(b"ope-interval");
        h.update(self.key.seed.to_le_bytes());
        for v in [dlo, dhi, rlo, rhi] {
            h.update(v.to_le_bytes());
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

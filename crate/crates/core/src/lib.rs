//! Privacy-preserving image annotation over an encrypted randomized k-d forest.

pub mod annotator;
pub mod error;
pub mod features;
pub mod harness;
pub mod ive;
pub mod modmath;
pub mod ope;
pub mod rkdf;
pub mod secure_compare;
pub mod wire;

pub use error::{Error, Result};

/// Serde adapter storing a `BigInt` as a decimal string.
pub(crate) mod serde_bigint {
    use num_bigint::BigInt;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &BigInt, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&x.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BigInt, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

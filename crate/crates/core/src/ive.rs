//! Integer-vector encryption.
//!
//! A plaintext `v ∈ Z^n` with `|v_j| <= p` is encrypted under an invertible
//! key matrix `S` as `c = S^-1 (w v + e) mod q`. Decryption recovers
//! `v = round((S c)_centered / w)`.
//!
//! Two ciphertexts under different keys `S1`, `S2` can be combined by anyone
//! holding `M = S1^T S2`: the bilinear form `c1^T M c2` equals
//! `(w v1 + e1) . (w v2 + e2)` modulo `q`, so dividing the centered value by
//! `w^2` recovers `v1 . v2` exactly as long as the noise cross terms stay
//! below `w / 2`. [`IveParams::derive`] picks `w` and `q` so that this holds
//! for every plaintext within the `p` bound.
//!
//! The tensor route ([`inner_product_reference`]) materialises the `n^2`
//! product ciphertext `vec(c1 c2^T)`, applies the flattened key
//! `vec(S1^T S2)` and performs the two divisions by `w` one at a time: the
//! first yields `w v1.v2 + e`, the second decrypts it. Both flattenings are
//! row-major, so `<vec(A), vec(B)> = trace(A^T B)`.

use std::io::{Read, Write};

use num_bigint::BigInt;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modmath::{self, center, reduce, round_div};

/// Public parameters: modulus, plaintext bound, scaling factor and error bound.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IveParams {
    #[serde(with = "crate::serde_bigint")]
    pub q: BigInt,
    #[serde(with = "crate::serde_bigint")]
    pub p: BigInt,
    #[serde(with = "crate::serde_bigint")]
    pub w: BigInt,
    pub e_max: u64,
}

impl IveParams {
    /// Validates the dimension-free invariants.
    pub fn new(q: BigInt, p: BigInt, w: BigInt, e_max: u64) -> Result<Self> {
        if p < BigInt::one() || w < BigInt::one() {
            return Err(Error::InvalidParams("p and w must be positive".into()));
        }
        if q < (BigInt::one() << 48u32) || (&q % 2u32).is_zero() {
            return Err(Error::InvalidParams(
                "q must be odd and at least 2^48".into(),
            ));
        }
        if w <= BigInt::from(2 * e_max) {
            return Err(Error::InvalidParams(format!(
                "w must exceed 2*e_max = {}",
                2 * e_max
            )));
        }
        if q <= BigInt::from(2u32) * &w * &p {
            return Err(Error::InvalidParams("q must exceed 2*w*p".into()));
        }
        Ok(Self { q, p, w, e_max })
    }

    /// Smallest power-of-two `w` and prime `q` giving exact inner products
    /// for vectors of length up to `max_dim` with entries bounded by `p`.
    pub fn derive(max_dim: usize, p: &BigInt, e_max: u64) -> Self {
        let dim = BigInt::from(max_dim.max(1));
        let e = BigInt::from(e_max);
        let noise: BigInt = BigInt::from(4u32) * &dim * &e * (p + &e);
        let mut w = BigInt::one();
        while w <= noise || w <= BigInt::from(2 * e_max) {
            w <<= 1u32;
        }
        let floor = BigInt::one() << 48u32;
        let need: BigInt = BigInt::from(4u32) * &w * &w * p * p * &dim;
        let q = modmath::next_prime(&need.max(floor));
        Self {
            q,
            p: p.clone(),
            w,
            e_max,
        }
    }

    /// Exactness contract for length-`dim` inner products.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let d = BigInt::from(dim);
        let wrap: BigInt = BigInt::from(4u32) * &self.w * &self.w * &self.p * &self.p * &d;
        if self.q <= wrap {
            return Err(Error::Overflow(format!(
                "q ({} bits) too small for dim {dim}: need > 4 w^2 p^2 dim",
                self.q.bits()
            )));
        }
        let e = BigInt::from(self.e_max);
        let noise: BigInt = BigInt::from(4u32) * &d * &e * (&self.p + &e);
        if self.e_max > 0 && self.w <= noise {
            return Err(Error::Overflow(format!(
                "w too small for noise growth at dim {dim}"
            )));
        }
        Ok(())
    }

    pub fn limbs(&self) -> usize {
        modmath::limbs_for(&self.q)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecretKey {
    pub s: Vec<Vec<BigInt>>,
    pub s_inv: Vec<Vec<BigInt>>,
}

impl SecretKey {
    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn identity(dim: usize) -> Self {
        let id: Vec<Vec<BigInt>> = (0..dim)
            .map(|i| (0..dim).map(|j| BigInt::from((i == j) as u8)).collect())
            .collect();
        Self {
            s: id.clone(),
            s_inv: id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ciphertext {
    pub c: Vec<BigInt>,
}

impl Ciphertext {
    pub fn dim(&self) -> usize {
        self.c.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeySwitchMatrix {
    pub m: Vec<Vec<BigInt>>,
}

impl KeySwitchMatrix {
    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// Row-major flattening.
    pub fn flatten(&self) -> Vec<BigInt> {
        self.m.iter().flatten().cloned().collect()
    }
}

/// Deterministic keygen: same seed, same key.
pub fn keygen(dim: usize, params: &IveParams, seed: u64) -> SecretKey {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    keygen_with_rng(dim, params, &mut rng)
}

pub fn keygen_with_rng<R: Rng + ?Sized>(dim: usize, params: &IveParams, rng: &mut R) -> SecretKey {
    assert!(dim >= 1, "key dimension must be positive");
    loop {
        let s: Vec<Vec<BigInt>> = (0..dim)
            .map(|_| {
                (0..dim)
                    .map(|_| modmath::random_below(rng, &params.q))
                    .collect()
            })
            .collect();
        if let Some(s_inv) = modmath::invert_matrix(&s, &params.q) {
            return SecretKey { s, s_inv };
        }
    }
}

fn check_plaintext(v: &[i128], params: &IveParams) -> Result<()> {
    for (index, &x) in v.iter().enumerate() {
        if BigInt::from(x.unsigned_abs()) > params.p {
            return Err(Error::PlaintextOutOfRange {
                index,
                value: x.to_string(),
                bound: params.p.to_string(),
            });
        }
    }
    Ok(())
}

pub fn sample_error<R: Rng + ?Sized>(dim: usize, e_max: u64, rng: &mut R) -> Vec<i64> {
    let e = e_max as i64;
    (0..dim)
        .map(|_| if e == 0 { 0 } else { rng.gen_range(-e..=e) })
        .collect()
}

pub fn encrypt<R: Rng + ?Sized>(
    key: &SecretKey,
    v: &[i128],
    params: &IveParams,
    rng: &mut R,
) -> Result<Ciphertext> {
    let e = sample_error(v.len(), params.e_max, rng);
    encrypt_with_error(key, v, &e, params)
}

/// Encryption with a caller-chosen error vector.
pub fn encrypt_with_error(
    key: &SecretKey,
    v: &[i128],
    e: &[i64],
    params: &IveParams,
) -> Result<Ciphertext> {
    let n = key.dim();
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: v.len(),
        });
    }
    if e.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: e.len(),
        });
    }
    check_plaintext(v, params)?;
    let support: Vec<(usize, BigInt)> = v
        .iter()
        .enumerate()
        .filter(|(_, &x)| x != 0)
        .map(|(j, &x)| (j, BigInt::from(x)))
        .collect();
    // S^-1 (w v + e) = w (S^-1 v) + S^-1 e; v is often sparse and e is small.
    let c = key
        .s_inv
        .iter()
        .map(|row| {
            let mut sv = BigInt::zero();
            for (j, x) in &support {
                sv += &row[*j] * x;
            }
            let mut se = BigInt::zero();
            for (rj, &ej) in row.iter().zip(e) {
                if ej != 0 {
                    se += rj * ej;
                }
            }
            reduce(&(sv * &params.w + se), &params.q)
        })
        .collect();
    Ok(Ciphertext { c })
}

fn to_i128(x: &BigInt) -> Result<i128> {
    x.to_i128()
        .ok_or_else(|| Error::Overflow(format!("value {x} exceeds 128 bits")))
}

pub fn decrypt(key: &SecretKey, ct: &Ciphertext, params: &IveParams) -> Result<Vec<i128>> {
    let n = key.dim();
    if ct.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: ct.dim(),
        });
    }
    key.s
        .iter()
        .map(|row| {
            let acc: BigInt = row.iter().zip(&ct.c).map(|(a, b)| a * b).sum();
            to_i128(&round_div(&center(&acc, &params.q), &params.w))
        })
        .collect()
}

pub fn keyswitch_key(
    s1: &SecretKey,
    s2: &SecretKey,
    params: &IveParams,
) -> Result<KeySwitchMatrix> {
    if s1.dim() != s2.dim() {
        return Err(Error::DimensionMismatch {
            expected: s1.dim(),
            got: s2.dim(),
        });
    }
    let s1t = modmath::transpose(&s1.s);
    Ok(KeySwitchMatrix {
        m: modmath::mat_mul(&s1t, &s2.s, &params.q),
    })
}

fn check_ip_dims(
    m: &KeySwitchMatrix,
    c1: &Ciphertext,
    c2: &Ciphertext,
    params: &IveParams,
) -> Result<()> {
    let n = m.dim();
    for d in [c1.dim(), c2.dim()] {
        if d != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: d,
            });
        }
    }
    params.check_dim(n)
}

/// Bilinear form `c1^T M c2` followed by one rounding division by `w^2`.
pub fn inner_product(
    m: &KeySwitchMatrix,
    c1: &Ciphertext,
    c2: &Ciphertext,
    params: &IveParams,
) -> Result<i128> {
    check_ip_dims(m, c1, c2, params)?;
    let prepared = PreparedOperand::new(m, c2, params)?;
    prepared.dot(c1)
}

/// Tensor-ciphertext route: both flattenings row-major, two divisions by `w`.
pub fn inner_product_reference(
    m: &KeySwitchMatrix,
    c1: &Ciphertext,
    c2: &Ciphertext,
    params: &IveParams,
) -> Result<i128> {
    check_ip_dims(m, c1, c2, params)?;
    let q = &params.q;
    let tensor: Vec<BigInt> =
        c1.c.iter()
            .flat_map(|a| c2.c.iter().map(move |b| reduce(&(a * b), q)))
            .collect();
    let key = m.flatten();
    let acc: BigInt = key.iter().zip(&tensor).map(|(k, t)| k * t).sum();
    let scaled = round_div(&center(&acc, q), &params.w);
    to_i128(&round_div(&scaled, &params.w))
}

/// `M c2` cached for repeated products against one fixed right operand.
#[derive(Clone, Debug)]
pub struct PreparedOperand {
    mc: Vec<BigInt>,
    q: BigInt,
    w2: BigInt,
}

impl PreparedOperand {
    pub fn new(m: &KeySwitchMatrix, c2: &Ciphertext, params: &IveParams) -> Result<Self> {
        if c2.dim() != m.dim() {
            return Err(Error::DimensionMismatch {
                expected: m.dim(),
                got: c2.dim(),
            });
        }
        params.check_dim(m.dim())?;
        let mc =
            m.m.iter()
                .map(|row| {
                    let acc: BigInt = row.iter().zip(&c2.c).map(|(a, b)| a * b).sum();
                    reduce(&acc, &params.q)
                })
                .collect();
        Ok(Self {
            mc,
            q: params.q.clone(),
            w2: &params.w * &params.w,
        })
    }

    pub fn dim(&self) -> usize {
        self.mc.len()
    }

    pub fn dot(&self, c1: &Ciphertext) -> Result<i128> {
        if c1.dim() != self.mc.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mc.len(),
                got: c1.dim(),
            });
        }
        let acc: BigInt = c1.c.iter().zip(&self.mc).map(|(a, b)| a * b).sum();
        to_i128(&round_div(&center(&acc, &self.q), &self.w2))
    }
}

// ---------------------------------------------------------------------------
// Wire format: 16-byte header ("IVE1", dim, limb count, record kind), the
// modulus as `limbs` words, then length-prefixed runs of little-endian words.
// ---------------------------------------------------------------------------

pub const IVE_MAGIC: &[u8; 4] = b"IVE1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum RecordKind {
    SecretKey = 1,
    Ciphertext = 2,
    KeySwitch = 3,
}

pub(crate) fn write_u32<W: Write>(w: &mut W, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, x: u64) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Length-prefixed run of residues, `limbs` words each.
pub(crate) fn write_residues<W: Write>(w: &mut W, xs: &[BigInt], limbs: usize) -> Result<()> {
    write_u64(w, xs.len() as u64)?;
    for x in xs {
        for word in modmath::to_limbs(x, limbs) {
            write_u64(w, word)?;
        }
    }
    Ok(())
}

pub(crate) fn read_residues<R: Read>(
    r: &mut R,
    limbs: usize,
    max_len: usize,
) -> Result<Vec<BigInt>> {
    let n = read_u64(r)? as usize;
    if n > max_len {
        return Err(Error::format(
            "residue run",
            format!("length {n} exceeds {max_len}"),
        ));
    }
    let mut words = vec![0u64; limbs];
    (0..n)
        .map(|_| {
            for w in words.iter_mut() {
                *w = read_u64(r)?;
            }
            Ok(modmath::from_limbs(&words))
        })
        .collect()
}

fn write_header<W: Write>(w: &mut W, dim: usize, q: &BigInt, kind: RecordKind) -> Result<usize> {
    let limbs = modmath::limbs_for(q);
    w.write_all(IVE_MAGIC)?;
    write_u32(w, dim as u32)?;
    write_u32(w, limbs as u32)?;
    write_u32(w, kind as u32)?;
    for word in modmath::to_limbs(q, limbs) {
        write_u64(w, word)?;
    }
    Ok(limbs)
}

fn read_header<R: Read>(r: &mut R, want: RecordKind) -> Result<(usize, usize, BigInt)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != IVE_MAGIC {
        return Err(Error::format("IVE record", "bad magic"));
    }
    let dim = read_u32(r)? as usize;
    let limbs = read_u32(r)? as usize;
    let kind = read_u32(r)?;
    if kind != want as u32 {
        return Err(Error::format(
            "IVE record",
            format!("kind {kind}, expected {}", want as u32),
        ));
    }
    if limbs == 0 || limbs > 64 {
        return Err(Error::format("IVE record", format!("limb count {limbs}")));
    }
    let words: Vec<u64> = (0..limbs).map(|_| read_u64(r)).collect::<Result<_>>()?;
    Ok((dim, limbs, modmath::from_limbs(&words)))
}

fn write_matrix<W: Write>(w: &mut W, m: &[Vec<BigInt>], limbs: usize) -> Result<()> {
    let flat: Vec<BigInt> = m.iter().flatten().cloned().collect();
    write_residues(w, &flat, limbs)
}

fn read_matrix<R: Read>(r: &mut R, dim: usize, limbs: usize) -> Result<Vec<Vec<BigInt>>> {
    let flat = read_residues(r, limbs, dim * dim)?;
    if flat.len() != dim * dim {
        return Err(Error::format("IVE matrix", "wrong entry count"));
    }
    Ok(flat.chunks(dim.max(1)).map(<[BigInt]>::to_vec).collect())
}

impl SecretKey {
    pub fn write_to<W: Write>(&self, w: &mut W, q: &BigInt) -> Result<()> {
        let limbs = write_header(w, self.dim(), q, RecordKind::SecretKey)?;
        write_matrix(w, &self.s, limbs)?;
        write_matrix(w, &self.s_inv, limbs)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, BigInt)> {
        let (dim, limbs, q) = read_header(r, RecordKind::SecretKey)?;
        let s = read_matrix(r, dim, limbs)?;
        let s_inv = read_matrix(r, dim, limbs)?;
        Ok((Self { s, s_inv }, q))
    }
}

impl Ciphertext {
    pub fn write_to<W: Write>(&self, w: &mut W, q: &BigInt) -> Result<()> {
        let limbs = write_header(w, self.dim(), q, RecordKind::Ciphertext)?;
        write_residues(w, &self.c, limbs)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, BigInt)> {
        let (dim, limbs, q) = read_header(r, RecordKind::Ciphertext)?;
        let c = read_residues(r, limbs, dim)?;
        if c.len() != dim {
            return Err(Error::format("ciphertext", "length does not match header"));
        }
        Ok((Self { c }, q))
    }
}

impl KeySwitchMatrix {
    pub fn write_to<W: Write>(&self, w: &mut W, q: &BigInt) -> Result<()> {
        let limbs = write_header(w, self.dim(), q, RecordKind::KeySwitch)?;
        write_matrix(w, &self.m, limbs)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, BigInt)> {
        let (dim, limbs, q) = read_header(r, RecordKind::KeySwitch)?;
        Ok((
            Self {
                m: read_matrix(r, dim, limbs)?,
            },
            q,
        ))
    }
}

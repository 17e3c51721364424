//! Encrypted distance comparison.
//!
//! Every image carries an L1 vector `v̂` (already in doubled units, so all
//! half-square terms below are integers) and fixed-point KL terms. The data
//! owner encrypts extended vectors whose inner product with an extended
//! request vector is an affine function of the distance:
//!
//! | vector            | layout                                             |
//! |-------------------|----------------------------------------------------|
//! | L1 node           | `[v̂, r - ½Σv̂², ε, -1]`                             |
//! | L1 request        | `[r_c v̂_c, r_c, 1, ½ r_c Σv̂_c²]`                   |
//! | L1 hyperplane     | `[v̂_s e_s, r - ½v̂_s², ε', -e_s]`                   |
//! | L1 hyper request  | `[r_c v̂_c, r_c, 1, ½ r_c v̂_c²]` (per coordinate)  |
//! | KL node           | `[a, a·L, r, ε]`                                   |
//! | KL hyperplane     | `[0, 0, r, ε']`                                    |
//! | KL request        | `[-r_c L_c, r_c g_c, r_c, -1]`                     |
//!
//! giving `L1 = r_c r + ε - (r_c/2)‖v̂ - v̂_c‖²`,
//! `L1H = r_c r + ε' - (r_c/2)(v̂_s - v̂_cs)²` and `KL = r_c K + r_c r - ε`
//! where `K = Σ a_j (L_j - L_cj)` over bins nonempty on both sides and `g_c`
//! is the indicator of the request's nonempty bins. The KL hyperplane term is
//! the bare offset, a zero lower bound on the divergence beyond the split.
//!
//! The L1 and KL request scalars are `λ_L1 r_s` and `λ_KL r_s`, with the
//! factors chosen so that one unit of either distance maps to the same
//! number `U` of comparison units. Then
//! `Comp = -2 L1 + KL = r_s (λ_L1 ‖Δv̂‖² + λ_KL K) + r_s r (λ_KL - 2 λ_L1) - 2ε - ε_KL`.

use num_bigint::BigInt;
use num_integer::Integer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::KlFixed;
use crate::ive::{self, Ciphertext, IveParams, KeySwitchMatrix, PreparedOperand, SecretKey};

/// Required gap between `r_s` and the total noise, as a multiple of `6 eps_max`.
pub const MARGIN_FACTOR: i64 = 1 << 9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObfuscationConfig {
    /// Corpus-wide offset hiding the distance terms.
    pub r: i64,
    /// Bound on the per-vector noise `ε`, `ε'`; zero disables noise.
    pub eps_max: i64,
    /// Range of the per-request scalar `r_s`.
    pub r_req_min: i64,
    pub r_req_max: i64,
    pub lambda_l1: i64,
    pub lambda_kl: i64,
    /// Bound on `|v̂|` entries accepted for encryption.
    pub v_bound: i64,
}

impl ObfuscationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps_max < 0 || self.r < 1 || self.v_bound < 1 {
            return Err(Error::InvalidParams(
                "r and v_bound must be positive, eps_max non-negative".into(),
            ));
        }
        if self.r_req_min > self.r_req_max {
            return Err(Error::InvalidParams("r_req_min exceeds r_req_max".into()));
        }
        if self.r_req_min <= 6 * self.eps_max * MARGIN_FACTOR || self.r_req_min < 1 {
            return Err(Error::InvalidParams(format!(
                "r_req_min {} must exceed 6 * eps_max * {MARGIN_FACTOR}",
                self.r_req_min
            )));
        }
        if self.lambda_l1 < 1 || self.lambda_kl < 1 {
            return Err(Error::InvalidParams(
                "alignment factors must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Comparison units per unit of distance.
    pub fn unit(&self, l1_unit: i64) -> i64 {
        self.lambda_l1 * l1_unit
    }

    /// Constant part of `Comp` for a given request scalar.
    pub fn comp_offset(&self, r_s: i64) -> i128 {
        i128::from(r_s) * i128::from(self.r) * i128::from(self.lambda_kl - 2 * self.lambda_l1)
    }

    /// Largest `|Comp - r_s·DisUnits - offset|`.
    pub fn comp_noise(&self) -> i128 {
        3 * i128::from(self.eps_max)
    }
}

/// Alignment factors `(λ_L1, λ_KL)` with `λ_L1 l1_unit = λ_KL kl_unit = lcm`.
pub fn alignment(l1_unit: u64, kl_unit: u64) -> Result<(i64, i64)> {
    if l1_unit == 0 || kl_unit == 0 {
        return Err(Error::InvalidParams(
            "distance units must be positive".into(),
        ));
    }
    let l = l1_unit.lcm(&kl_unit);
    let a = i64::try_from(l / l1_unit).map_err(|_| Error::Overflow("alignment factor".into()))?;
    let b = i64::try_from(l / kl_unit).map_err(|_| Error::Overflow("alignment factor".into()))?;
    Ok((a, b))
}

/// Largest absolute plaintext entry across every layout.
pub fn plaintext_bound(m_hat: usize, kl_scale: i64, cfg: &ObfuscationConfig) -> BigInt {
    let big = |x: i64| BigInt::from(x);
    let v = big(cfg.v_bound);
    let half_sq: BigInt = &v * &v * BigInt::from(m_hat) / 2;
    let r_l1 = big(cfg.lambda_l1) * big(cfg.r_req_max);
    let r_kl = big(cfg.lambda_kl) * big(cfg.r_req_max);
    let log_max = big(((kl_scale as f64) * (kl_scale as f64).ln()).ceil() as i64 + 1);
    let candidates = [
        &v * &r_l1,
        &half_sq * &r_l1 + &r_l1,
        &half_sq + big(cfg.r),
        big(kl_scale) * &log_max,
        &r_kl * &log_max,
        r_kl.clone(),
        big(cfg.r),
        big(cfg.eps_max.max(1)),
    ];
    candidates
        .into_iter()
        .max()
        .unwrap_or_else(|| BigInt::from(1))
}

fn half_sq_sum(v: &[i64]) -> i128 {
    v.iter()
        .map(|&x| i128::from(x) * i128::from(x))
        .sum::<i128>()
        / 2
}

pub fn l1_node_vector(v_hat: &[i64], r: i64, eps: i64) -> Vec<i128> {
    let mut out: Vec<i128> = v_hat.iter().map(|&x| i128::from(x)).collect();
    out.push(i128::from(r) - half_sq_sum(v_hat));
    out.push(i128::from(eps));
    out.push(-1);
    out
}

pub fn l1_hyper_vector(v_hat: &[i64], s: usize, r: i64, eps: i64) -> Vec<i128> {
    let m = v_hat.len();
    let vs = i128::from(v_hat[s]);
    let mut out = vec![0i128; 2 * m + 2];
    out[s] = vs;
    out[m] = i128::from(r) - vs * vs / 2;
    out[m + 1] = i128::from(eps);
    out[m + 2 + s] = -1;
    out
}

pub fn l1_request_vector(v_hat: &[i64], r_c: i64) -> Vec<i128> {
    let rc = i128::from(r_c);
    let mut out: Vec<i128> = v_hat.iter().map(|&x| rc * i128::from(x)).collect();
    out.push(rc);
    out.push(1);
    out.push(rc * half_sq_sum(v_hat));
    out
}

pub fn l1_request_hyper_vector(v_hat: &[i64], r_c: i64) -> Vec<i128> {
    let rc = i128::from(r_c);
    let mut out: Vec<i128> = v_hat.iter().map(|&x| rc * i128::from(x)).collect();
    out.push(rc);
    out.push(1);
    out.extend(
        v_hat
            .iter()
            .map(|&x| rc * (i128::from(x) * i128::from(x) / 2)),
    );
    out
}

pub fn kl_node_vector(kl: &KlFixed, r: i64, eps: i64) -> Vec<i128> {
    let mut out: Vec<i128> = kl.a.iter().map(|&a| i128::from(a)).collect();
    out.extend(
        kl.a.iter()
            .zip(&kl.log)
            .map(|(&a, &l)| i128::from(a) * i128::from(l)),
    );
    out.push(i128::from(r));
    out.push(i128::from(eps));
    out
}

/// KL hyperplane vector; `None` keeps only the offset and noise terms.
pub fn kl_hyper_vector(kl: &KlFixed, split: Option<usize>, r: i64, eps: i64) -> Vec<i128> {
    let m = kl.dim();
    let mut out = vec![0i128; 2 * m + 2];
    if let Some(s) = split {
        out[s] = i128::from(kl.a[s]);
        out[m + s] = i128::from(kl.a[s]) * i128::from(kl.log[s]);
    }
    out[2 * m] = i128::from(r);
    out[2 * m + 1] = i128::from(eps);
    out
}

pub fn kl_request_vector(kl: &KlFixed, r_c: i64) -> Vec<i128> {
    let rc = i128::from(r_c);
    let mut out: Vec<i128> = kl.log.iter().map(|&l| -rc * i128::from(l)).collect();
    out.extend(kl.a.iter().map(|&a| if a > 0 { rc } else { 0 }));
    out.push(rc);
    out.push(-1);
    out
}

/// Raw keys held by the data owner.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompareKeys {
    pub l1_data: SecretKey,
    pub l1_req: SecretKey,
    pub hyper_data: SecretKey,
    pub hyper_req: SecretKey,
    pub kl_data: SecretKey,
    pub kl_req: SecretKey,
}

/// Key-switch matrices handed to the cloud.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CloudKeys {
    pub l1: KeySwitchMatrix,
    pub hyper: KeySwitchMatrix,
    pub kl: KeySwitchMatrix,
}

/// Public shape and parameters of the comparison layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompareParams {
    pub ive: IveParams,
    pub obf: ObfuscationConfig,
    pub m_hat: usize,
    pub m_kl: usize,
}

impl CompareParams {
    pub fn new(
        m_hat: usize,
        m_kl: usize,
        kl_scale: i64,
        obf: ObfuscationConfig,
        e_max: u64,
    ) -> Result<Self> {
        obf.validate()?;
        if m_hat == 0 || m_kl == 0 {
            return Err(Error::InvalidParams(
                "vector dimensions must be positive".into(),
            ));
        }
        let p = plaintext_bound(m_hat, kl_scale, &obf);
        let ive = IveParams::derive(Self::max_dim_for(m_hat, m_kl), &p, e_max);
        Ok(Self {
            ive,
            obf,
            m_hat,
            m_kl,
        })
    }

    fn max_dim_for(m_hat: usize, m_kl: usize) -> usize {
        (2 * m_hat + 2).max(2 * m_kl + 2)
    }

    pub fn l1_dim(&self) -> usize {
        self.m_hat + 3
    }

    pub fn hyper_dim(&self) -> usize {
        2 * self.m_hat + 2
    }

    pub fn kl_dim(&self) -> usize {
        2 * self.m_kl + 2
    }
}

impl CompareKeys {
    pub fn generate(params: &CompareParams, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let ive = &params.ive;
        Self {
            l1_data: ive::keygen_with_rng(params.l1_dim(), ive, &mut rng),
            l1_req: ive::keygen_with_rng(params.l1_dim(), ive, &mut rng),
            hyper_data: ive::keygen_with_rng(params.hyper_dim(), ive, &mut rng),
            hyper_req: ive::keygen_with_rng(params.hyper_dim(), ive, &mut rng),
            kl_data: ive::keygen_with_rng(params.kl_dim(), ive, &mut rng),
            kl_req: ive::keygen_with_rng(params.kl_dim(), ive, &mut rng),
        }
    }

    pub fn cloud_keys(&self, params: &CompareParams) -> Result<CloudKeys> {
        Ok(CloudKeys {
            l1: ive::keyswitch_key(&self.l1_data, &self.l1_req, &params.ive)?,
            hyper: ive::keyswitch_key(&self.hyper_data, &self.hyper_req, &params.ive)?,
            kl: ive::keyswitch_key(&self.kl_data, &self.kl_req, &params.ive)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct L1NodeCipher {
    pub cv: Ciphertext,
    pub ch: Option<Ciphertext>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KlNodeCipher {
    pub cv: Ciphertext,
    pub ch: Option<Ciphertext>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeCipher {
    pub l1: L1NodeCipher,
    pub kl: KlNodeCipher,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct L1RequestCipher {
    pub cv: Ciphertext,
    pub ch: Ciphertext,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KlRequestCipher {
    pub cv: Ciphertext,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequestCipher {
    pub l1: L1RequestCipher,
    pub kl: KlRequestCipher,
}

fn check_v_hat(v_hat: &[i64], params: &CompareParams) -> Result<()> {
    if v_hat.len() != params.m_hat {
        return Err(Error::DimensionMismatch {
            expected: params.m_hat,
            got: v_hat.len(),
        });
    }
    let bound = params.obf.v_bound;
    if let Some((index, x)) = v_hat.iter().enumerate().find(|(_, x)| x.abs() > bound) {
        return Err(Error::PlaintextOutOfRange {
            index,
            value: x.to_string(),
            bound: bound.to_string(),
        });
    }
    if v_hat.iter().any(|x| x % 2 != 0) {
        return Err(Error::Validation(
            "approximated L1 entries must be even".into(),
        ));
    }
    Ok(())
}

fn check_kl(kl: &KlFixed, params: &CompareParams) -> Result<()> {
    if kl.dim() != params.m_kl {
        return Err(Error::DimensionMismatch {
            expected: params.m_kl,
            got: kl.dim(),
        });
    }
    Ok(())
}

fn sample_eps<R: Rng + ?Sized>(eps_max: i64, rng: &mut R) -> i64 {
    if eps_max == 0 {
        0
    } else {
        rng.gen_range(-eps_max..=eps_max)
    }
}

pub fn l1_encrypt_node<R: Rng + ?Sized>(
    v_hat: &[i64],
    split: Option<usize>,
    params: &CompareParams,
    keys: &CompareKeys,
    rng: &mut R,
) -> Result<L1NodeCipher> {
    check_v_hat(v_hat, params)?;
    let (r, e) = (params.obf.r, params.obf.eps_max);
    let cv = ive::encrypt(
        &keys.l1_data,
        &l1_node_vector(v_hat, r, sample_eps(e, rng)),
        &params.ive,
        rng,
    )?;
    let ch = match split {
        Some(s) if s >= params.m_hat => {
            return Err(Error::DimensionMismatch {
                expected: params.m_hat,
                got: s,
            });
        }
        Some(s) => {
            let h = l1_hyper_vector(v_hat, s, r, sample_eps(e, rng));
            Some(ive::encrypt(&keys.hyper_data, &h, &params.ive, rng)?)
        }
        None => None,
    };
    Ok(L1NodeCipher { cv, ch })
}

/// KL node cipher; `hyper` requests the (split-free) hyperplane companion.
pub fn kl_encrypt_node<R: Rng + ?Sized>(
    kl: &KlFixed,
    hyper: bool,
    params: &CompareParams,
    keys: &CompareKeys,
    rng: &mut R,
) -> Result<KlNodeCipher> {
    check_kl(kl, params)?;
    let (r, e) = (params.obf.r, params.obf.eps_max);
    let cv = ive::encrypt(
        &keys.kl_data,
        &kl_node_vector(kl, r, sample_eps(e, rng)),
        &params.ive,
        rng,
    )?;
    let ch = if hyper {
        let h = kl_hyper_vector(kl, None, r, sample_eps(e, rng));
        Some(ive::encrypt(&keys.kl_data, &h, &params.ive, rng)?)
    } else {
        None
    };
    Ok(KlNodeCipher { cv, ch })
}

pub fn encrypt_node<R: Rng + ?Sized>(
    v_hat: &[i64],
    kl: &KlFixed,
    split: Option<usize>,
    params: &CompareParams,
    keys: &CompareKeys,
    rng: &mut R,
) -> Result<NodeCipher> {
    Ok(NodeCipher {
        l1: l1_encrypt_node(v_hat, split, params, keys, rng)?,
        kl: kl_encrypt_node(kl, split.is_some(), params, keys, rng)?,
    })
}

pub fn l1_encrypt_request<R: Rng + ?Sized>(
    v_hat: &[i64],
    r_s: i64,
    params: &CompareParams,
    keys: &CompareKeys,
    rng: &mut R,
) -> Result<L1RequestCipher> {
    check_v_hat(v_hat, params)?;
    let r_c = params.obf.lambda_l1 * r_s;
    Ok(L1RequestCipher {
        cv: ive::encrypt(
            &keys.l1_req,
            &l1_request_vector(v_hat, r_c),
            &params.ive,
            rng,
        )?,
        ch: ive::encrypt(
            &keys.hyper_req,
            &l1_request_hyper_vector(v_hat, r_c),
            &params.ive,
            rng,
        )?,
    })
}

pub fn kl_encrypt_request<R: Rng + ?Sized>(
    kl: &KlFixed,
    r_s: i64,
    params: &CompareParams,
    keys: &CompareKeys,
    rng: &mut R,
) -> Result<KlRequestCipher> {
    check_kl(kl, params)?;
    let r_c = params.obf.lambda_kl * r_s;
    Ok(KlRequestCipher {
        cv: ive::encrypt(&keys.kl_req, &kl_request_vector(kl, r_c), &params.ive, rng)?,
    })
}

/// Draws a fresh request scalar in the configured range.
pub fn sample_r_s<R: Rng + ?Sized>(cfg: &ObfuscationConfig, rng: &mut R) -> i64 {
    rng.gen_range(cfg.r_req_min..=cfg.r_req_max)
}

pub fn encrypt_request<R: Rng + ?Sized>(
    v_hat: &[i64],
    kl: &KlFixed,
    r_s: i64,
    params: &CompareParams,
    keys: &CompareKeys,
    rng: &mut R,
) -> Result<RequestCipher> {
    if r_s < params.obf.r_req_min || r_s > params.obf.r_req_max {
        return Err(Error::InvalidParams(format!(
            "request scalar {r_s} outside configured range"
        )));
    }
    Ok(RequestCipher {
        l1: l1_encrypt_request(v_hat, r_s, params, keys, rng)?,
        kl: kl_encrypt_request(kl, r_s, params, keys, rng)?,
    })
}

pub fn comp_l1(
    m: &KeySwitchMatrix,
    node: &L1NodeCipher,
    req: &L1RequestCipher,
    ive: &IveParams,
) -> Result<i128> {
    ive::inner_product(m, &node.cv, &req.cv, ive)
}

pub fn comp_l1_hyper(
    m: &KeySwitchMatrix,
    node: &L1NodeCipher,
    req: &L1RequestCipher,
    ive: &IveParams,
) -> Result<Option<i128>> {
    node.ch
        .as_ref()
        .map(|ch| ive::inner_product(m, ch, &req.ch, ive))
        .transpose()
}

pub fn comp_kl(
    m: &KeySwitchMatrix,
    node: &Ciphertext,
    req: &KlRequestCipher,
    ive: &IveParams,
) -> Result<i128> {
    ive::inner_product(m, node, &req.cv, ive)
}

/// Request operands with the key-switch matrices already applied, so every
/// node comparison costs one dot product per inner product.
#[derive(Clone, Debug)]
pub struct PreparedRequest {
    l1: PreparedOperand,
    hyper: PreparedOperand,
    kl: PreparedOperand,
}

impl PreparedRequest {
    pub fn new(keys: &CloudKeys, req: &RequestCipher, ive: &IveParams) -> Result<Self> {
        Ok(Self {
            l1: PreparedOperand::new(&keys.l1, &req.l1.cv, ive)?,
            hyper: PreparedOperand::new(&keys.hyper, &req.l1.ch, ive)?,
            kl: PreparedOperand::new(&keys.kl, &req.kl.cv, ive)?,
        })
    }

    /// `Comp = -2 L1 + KL` from an L1 and a KL node ciphertext (two inner products).
    pub fn comp_vectors(&self, l1: &Ciphertext, kl: &Ciphertext) -> Result<i128> {
        Ok(-2 * self.l1.dot(l1)? + self.kl.dot(kl)?)
    }

    /// Hyperplane `Comp` from the two hyperplane ciphertexts (two inner products).
    pub fn comp_hyper_vectors(&self, l1h: &Ciphertext, klh: &Ciphertext) -> Result<i128> {
        Ok(-2 * self.hyper.dot(l1h)? + self.kl.dot(klh)?)
    }

    pub fn comp(&self, node: &NodeCipher) -> Result<i128> {
        self.comp_vectors(&node.l1.cv, &node.kl.cv)
    }

    /// Hyperplane `Comp`; `None` for leaves.
    pub fn comp_hyper(&self, node: &NodeCipher) -> Result<Option<i128>> {
        match (&node.l1.ch, &node.kl.ch) {
            (Some(h), Some(k)) => Ok(Some(self.comp_hyper_vectors(h, k)?)),
            (None, None) => Ok(None),
            _ => Err(Error::format("node cipher", "hyperplane halves disagree")),
        }
    }
}

/// Plaintext `Comp` for the same representation, without noise.
pub fn plain_comp(
    a: (&[i64], &KlFixed),
    c: (&[i64], &KlFixed),
    r_s: i64,
    cfg: &ObfuscationConfig,
) -> i128 {
    i128::from(r_s) * dis_units(a, c, cfg) + cfg.comp_offset(r_s)
}

/// `λ_L1 ‖Δv̂‖² + λ_KL K`.
pub fn dis_units(a: (&[i64], &KlFixed), c: (&[i64], &KlFixed), cfg: &ObfuscationConfig) -> i128 {
    let d = crate::features::squared_distance(a.0, c.0);
    i128::from(cfg.lambda_l1) * d + i128::from(cfg.lambda_kl) * a.1.divergence_units(c.1)
}

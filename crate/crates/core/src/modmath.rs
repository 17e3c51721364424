//! Big-integer helpers for arithmetic modulo `q`.

use num_bigint::{BigInt, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, Signed, Zero};
use rand::Rng;

/// Reduce into `[0, q)`.
pub fn reduce(x: &BigInt, q: &BigInt) -> BigInt {
    x.mod_floor(q)
}

/// Reduce into the centered interval `(-q/2, q/2]`.
pub fn center(x: &BigInt, q: &BigInt) -> BigInt {
    let r = x.mod_floor(q);
    let half: BigInt = q >> 1u32;
    if r > half {
        r - q
    } else {
        r
    }
}

/// Nearest integer to `x / d` for `d > 0`; halves round towards +inf.
pub fn round_div(x: &BigInt, d: &BigInt) -> BigInt {
    debug_assert!(d.is_positive());
    let num: BigInt = (x << 1u32) + d;
    let den: BigInt = d << 1u32;
    num.div_floor(&den)
}

pub fn mod_inverse(a: &BigInt, q: &BigInt) -> Option<BigInt> {
    let a = a.mod_floor(q);
    if a.is_zero() {
        return None;
    }
    let g = a.extended_gcd(q);
    if !g.gcd.is_one() {
        return None;
    }
    Some(g.x.mod_floor(q))
}

const SMALL_PRIMES: [u32; 20] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
];

/// Miller-Rabin over a fixed base set.
pub fn is_probable_prime(n: &BigInt) -> bool {
    if n < &BigInt::from(2) {
        return false;
    }
    for p in SMALL_PRIMES {
        let p = BigInt::from(p);
        if n == &p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let one = BigInt::one();
    let n_minus_1: BigInt = n - &one;
    let mut d = n_minus_1.clone();
    let mut s = 0u32;
    while d.is_even() {
        d >>= 1u32;
        s += 1;
    }
    'witness: for a in SMALL_PRIMES {
        let mut x = BigInt::from(a).modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = (&x * &x) % n;
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// Smallest probable prime strictly greater than `n`.
pub fn next_prime(n: &BigInt) -> BigInt {
    let mut c: BigInt = n + 1;
    if c.is_even() {
        c += 1;
    }
    while !is_probable_prime(&c) {
        c += 2;
    }
    c
}

pub fn random_below<R: Rng + ?Sized>(rng: &mut R, q: &BigInt) -> BigInt {
    rng.gen_bigint_range(&BigInt::zero(), q)
}

/// Gauss-Jordan inverse over the prime field `Z_q`; `None` when singular.
pub fn invert_matrix(m: &[Vec<BigInt>], q: &BigInt) -> Option<Vec<Vec<BigInt>>> {
    let n = m.len();
    let mut a: Vec<Vec<BigInt>> = m
        .iter()
        .map(|r| r.iter().map(|x| reduce(x, q)).collect())
        .collect();
    let mut inv: Vec<Vec<BigInt>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        BigInt::one()
                    } else {
                        BigInt::zero()
                    }
                })
                .collect()
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let pinv = mod_inverse(&a[col][col], q)?;
        for j in 0..n {
            a[col][j] = (&a[col][j] * &pinv) % q;
            inv[col][j] = (&inv[col][j] * &pinv) % q;
        }
        let (prow_a, prow_i) = (a[col].clone(), inv[col].clone());
        for r in 0..n {
            if r == col || a[r][col].is_zero() {
                continue;
            }
            let f = a[r][col].clone();
            for j in 0..n {
                if !prow_a[j].is_zero() {
                    a[r][j] = reduce(&(&a[r][j] - &f * &prow_a[j]), q);
                }
                if !prow_i[j].is_zero() {
                    inv[r][j] = reduce(&(&inv[r][j] - &f * &prow_i[j]), q);
                }
            }
        }
    }
    Some(inv)
}

/// `a * b mod q` for square matrices.
pub fn mat_mul(a: &[Vec<BigInt>], b: &[Vec<BigInt>], q: &BigInt) -> Vec<Vec<BigInt>> {
    let n = a.len();
    let m = b.first().map_or(0, Vec::len);
    let mut out = vec![vec![BigInt::zero(); m]; n];
    for i in 0..n {
        for (k, aik) in a[i].iter().enumerate() {
            if aik.is_zero() {
                continue;
            }
            for j in 0..m {
                out[i][j] += aik * &b[k][j];
            }
        }
        for x in out[i].iter_mut() {
            *x = reduce(x, q);
        }
    }
    out
}

pub fn transpose(a: &[Vec<BigInt>]) -> Vec<Vec<BigInt>> {
    let n = a.len();
    let m = a.first().map_or(0, Vec::len);
    (0..m)
        .map(|j| (0..n).map(|i| a[i][j].clone()).collect())
        .collect()
}

/// Little-endian 64-bit limbs of a non-negative value, padded to `limbs`.
pub fn to_limbs(x: &BigInt, limbs: usize) -> Vec<u64> {
    debug_assert!(x.sign() != Sign::Minus);
    let mut digits = x.magnitude().to_u64_digits();
    digits.resize(limbs, 0);
    digits
}

pub fn from_limbs(words: &[u64]) -> BigInt {
    let mut bytes = Vec::with_capacity(words.len() * 8);
    for w in words {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    BigInt::from_bytes_le(Sign::Plus, &bytes)
}

pub fn limbs_for(q: &BigInt) -> usize {
    (q.bits() as usize).div_ceil(64).max(1)
}

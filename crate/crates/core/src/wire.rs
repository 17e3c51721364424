//! Binary request and result files.
//!
//! Request: `"CREQ"`, version, request id, the three request ciphertexts as
//! IVE records, then `(split dim, OPE value)` pairs.
//! Result: `"CRES"`, version, request id, op count, visited count, then
//! `(image id, Comp as i128, sealed keywords)` entries.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use num_bigint::BigInt;

use crate::annotator::{AnnotationRequest, ResultEntry, ResultSet};
use crate::error::{Error, Result};
use crate::ive::{read_u32, read_u64, write_u32, write_u64, Ciphertext};
use crate::ope::OpeCiphertext;
use crate::secure_compare::{KlRequestCipher, L1RequestCipher};

pub const REQUEST_MAGIC: &[u8; 4] = b"CREQ";
pub const RESULT_MAGIC: &[u8; 4] = b"CRES";
pub const VERSION: u32 = 1;

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 4], what: &'static str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::format(what, "bad magic"));
    }
    let v = read_u32(r)?;
    if v != VERSION {
        return Err(Error::format(what, format!("unsupported version {v}")));
    }
    Ok(())
}

pub fn write_request<W: Write>(w: &mut W, req: &AnnotationRequest, q: &BigInt) -> Result<()> {
    w.write_all(REQUEST_MAGIC)?;
    write_u32(w, VERSION)?;
    write_u64(w, req.id)?;
    req.l1.cv.write_to(w, q)?;
    req.l1.ch.write_to(w, q)?;
    req.kl.cv.write_to(w, q)?;
    write_u32(w, req.split_values.len() as u32)?;
    for (&dim, ope) in &req.split_values {
        write_u32(w, dim as u32)?;
        write_u64(w, ope.0)?;
    }
    Ok(())
}

pub fn read_request<R: Read>(r: &mut R) -> Result<AnnotationRequest> {
    expect_magic(r, REQUEST_MAGIC, "request")?;
    let id = read_u64(r)?;
    let (cv, q1) = Ciphertext::read_from(r)?;
    let (ch, q2) = Ciphertext::read_from(r)?;
    let (kl, q3) = Ciphertext::read_from(r)?;
    if q1 != q2 || q2 != q3 {
        return Err(Error::format("request", "ciphertexts use different moduli"));
    }
    let n = read_u32(r)?;
    let mut split_values = BTreeMap::new();
    for _ in 0..n {
        let dim = read_u32(r)? as usize;
        split_values.insert(dim, OpeCiphertext(read_u64(r)?));
    }
    Ok(AnnotationRequest {
        id,
        l1: L1RequestCipher { cv, ch },
        kl: KlRequestCipher { cv: kl },
        split_values,
    })
}

pub fn write_result<W: Write>(w: &mut W, rs: &ResultSet) -> Result<()> {
    w.write_all(RESULT_MAGIC)?;
    write_u32(w, VERSION)?;
    write_u64(w, rs.request_id)?;
    write_u64(w, rs.inner_products)?;
    write_u64(w, rs.visited)?;
    write_u32(w, rs.entries.len() as u32)?;
    for e in &rs.entries {
        write_u32(w, e.image)?;
        w.write_all(&e.comp.to_le_bytes())?;
        write_u64(w, e.sealed_keywords.len() as u64)?;
        w.write_all(&e.sealed_keywords)?;
    }
    Ok(())
}

pub fn read_result<R: Read>(r: &mut R) -> Result<ResultSet> {
    expect_magic(r, RESULT_MAGIC, "result set")?;
    let request_id = read_u64(r)?;
    let inner_products = read_u64(r)?;
    let visited = read_u64(r)?;
    let n = read_u32(r)?;
    let mut entries = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        let image = read_u32(r)?;
        let mut c = [0u8; 16];
        r.read_exact(&mut c)?;
        let len = read_u64(r)? as usize;
        if len > 1 << 20 {
            return Err(Error::format(
                "result set",
                format!("keyword blob of {len} bytes"),
            ));
        }
        let mut sealed = vec![0u8; len];
        r.read_exact(&mut sealed)?;
        entries.push(ResultEntry {
            image,
            comp: i128::from_le_bytes(c),
            sealed_keywords: sealed,
        });
    }
    Ok(ResultSet {
        request_id,
        entries,
        inner_products,
        visited,
    })
}

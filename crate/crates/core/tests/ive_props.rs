use cipherforest::ive::{self, Ciphertext, IveParams, KeySwitchMatrix, SecretKey};
use num_bigint::BigInt;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const P: i128 = 1 << 24;

fn params() -> IveParams {
    IveParams::derive(8, &BigInt::from(P), 64)
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<i128>> {
    prop::collection::vec(-P..=P, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decrypt_inverts_encrypt(v in vec_strategy(8), seed in any::<u64>()) {
        let p = params();
        let k = ive::keygen(8, &p, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let ct = ive::encrypt(&k, &v, &p, &mut rng).unwrap();
        prop_assert_eq!(ive::decrypt(&k, &ct, &p).unwrap(), v);
    }

    #[test]
    fn switched_inner_product_is_exact(a in vec_strategy(8), b in vec_strategy(8), seed in any::<u64>()) {
        let p = params();
        let s1 = ive::keygen(8, &p, seed);
        let s2 = ive::keygen(8, &p, seed.wrapping_add(1));
        let m = ive::keyswitch_key(&s1, &s2, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = ive::encrypt(&s1, &a, &p, &mut rng).unwrap();
        let c2 = ive::encrypt(&s2, &b, &p, &mut rng).unwrap();
        let want: i128 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let fast = ive::inner_product(&m, &c1, &c2, &p).unwrap();
        prop_assert_eq!(fast, want);
        let reference = ive::inner_product_reference(&m, &c1, &c2, &p).unwrap();
        prop_assert!((reference - fast).abs() <= 1);
    }

    #[test]
    fn prepared_operand_matches_direct(a in vec_strategy(8), b in vec_strategy(8)) {
        let p = params();
        let (s1, s2) = (ive::keygen(8, &p, 3), ive::keygen(8, &p, 4));
        let m = ive::keyswitch_key(&s1, &s2, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c1 = ive::encrypt(&s1, &a, &p, &mut rng).unwrap();
        let c2 = ive::encrypt(&s2, &b, &p, &mut rng).unwrap();
        let prep = ive::PreparedOperand::new(&m, &c2, &p).unwrap();
        prop_assert_eq!(prep.dot(&c1).unwrap(), ive::inner_product(&m, &c1, &c2, &p).unwrap());
    }
}

#[test]
fn dimension_mismatch_is_reported() {
    let p = params();
    let k = ive::keygen(4, &p, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(matches!(
        ive::encrypt(&k, &[1, 2, 3], &p, &mut rng),
        Err(cipherforest::Error::DimensionMismatch {
            expected: 4,
            got: 3
        })
    ));
    let ct = Ciphertext {
        c: vec![BigInt::from(0); 5],
    };
    assert!(ive::decrypt(&k, &ct, &p).is_err());
}

#[test]
fn serialized_records_roundtrip_bit_exact() {
    let p = params();
    let (s1, s2) = (ive::keygen(5, &p, 8), ive::keygen(5, &p, 9));
    let m = ive::keyswitch_key(&s1, &s2, &p).unwrap();
    let mut buf = Vec::new();
    m.write_to(&mut buf, &p.q).unwrap();
    let (m2, q) = KeySwitchMatrix::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!((m2.clone(), q.clone()), (m, p.q.clone()));
    let mut again = Vec::new();
    m2.write_to(&mut again, &q).unwrap();
    assert_eq!(buf, again);

    let mut buf = Vec::new();
    s1.write_to(&mut buf, &p.q).unwrap();
    buf[0] = b'X';
    assert!(SecretKey::read_from(&mut buf.as_slice()).is_err());
}

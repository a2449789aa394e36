use std::sync::OnceLock;

use flssm_core::envelope::{open, seal, Attributes, Authority, CredentialRegistry, NodeSecret, Policy};
use flssm_core::ham::edge_aggregate;
use flssm_core::he::{keygen, FixedPointCodec, HePublicKey, HeSecretKey};
use flssm_core::imtti::rewards;
use flssm_core::Error;
use num_bigint::BigUint;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn keys() -> &'static (HePublicKey, HeSecretKey) {
    static KEYS: OnceLock<(HePublicKey, HeSecretKey)> = OnceLock::new();
    KEYS.get_or_init(|| keygen(128, 11).unwrap())
}

fn delta() -> f64 {
    65536.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn he_round_trip(values in prop::collection::vec(-1000.0f64..1000.0, 1..16), seed: u64) {
        let (pk, sk) = keys();
        let codec = FixedPointCodec::for_key(pk, 16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let c = pk.encrypt(&codec.encode(&values).unwrap(), 0, &mut rng).unwrap();
        let back = codec.decode(&sk.decrypt(&c).unwrap());
        for (a, b) in values.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 0.5 / delta() + 1e-12);
        }
    }

    #[test]
    fn he_addition_matches_plaintext(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..12),
        seed: u64,
    ) {
        let (pk, sk) = keys();
        let codec = FixedPointCodec::for_key(pk, 16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let ca = pk.encrypt(&codec.encode(&a).unwrap(), 0, &mut rng).unwrap();
        let cb = pk.encrypt(&codec.encode(&b).unwrap(), 0, &mut rng).unwrap();
        let sum = codec.decode(&sk.decrypt(&pk.add(&ca, &cb).unwrap()).unwrap());
        for i in 0..a.len() {
            prop_assert!((sum[i] - (a[i] + b[i])).abs() <= 1.0 / delta() + 1e-12);
        }
    }

    #[test]
    fn encrypted_average_within_two_quanta(
        kappa in 1usize..=50,
        len in 1usize..6,
        seed: u64,
    ) {
        let (pk, sk) = keys();
        let codec = FixedPointCodec::for_key(pk, 16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let models: Vec<Vec<f64>> = (0..kappa)
            .map(|_| (0..len).map(|_| rand::Rng::gen_range(&mut rng, -5.0..5.0)).collect())
            .collect();
        let shards: Vec<_> = models
            .iter()
            .map(|m| pk.encrypt(&codec.encode(m).unwrap(), 0, &mut rng).unwrap())
            .collect();
        let refs: Vec<_> = shards.iter().collect();
        let (avg, additions) = edge_aggregate(pk, &refs, 32).unwrap();
        prop_assert_eq!(additions, (kappa - 1) * len);
        let got = codec.decode(&sk.decrypt(&avg).unwrap());
        for j in 0..len {
            let want = models.iter().map(|m| m[j]).sum::<f64>() / kappa as f64;
            prop_assert!((got[j] - want).abs() <= 2.0 / delta(), "{} vs {}", got[j], want);
        }
    }

    #[test]
    fn rewards_conserve_and_ignore_scale(
        c in prop::collection::vec(1e-6f64..1.0, 1..30),
        total in 0.1f64..1000.0,
        k in 1e-3f64..1e3,
    ) {
        let r = rewards(&c, total).unwrap();
        prop_assert!((r.iter().sum::<f64>() - total).abs() <= 1e-9 * total);
        let scaled: Vec<f64> = c.iter().map(|x| x * k).collect();
        let r2 = rewards(&scaled, total).unwrap();
        for (a, b) in r.iter().zip(&r2) {
            prop_assert!((a - b).abs() <= 1e-9 * total);
        }
    }
}

#[test]
fn rewards_reject_empty_set() {
    assert_eq!(rewards(&[], 10.0), Err(Error::NoEligibleNodes));
    assert_eq!(rewards(&[0.0, 0.0], 10.0), Err(Error::NoEligibleNodes));
}

// Deterministic Miller-Rabin over u64, bases sufficient for all 64-bit inputs.
fn mr_u64(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n % p == 0 {
            return n == p;
        }
    }
    let mul = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let pow = |mut b: u64, mut e: u64| {
        let mut r = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                r = mul(r, b);
            }
            b = mul(b, b);
            e >>= 1;
        }
        r
    };
    let mut d = n - 1;
    let mut s = 0;
    while d % 2 == 0 {
        d /= 2;
        s += 1;
    }
    'bases: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = pow(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul(x, x);
            if x == n - 1 {
                continue 'bases;
            }
        }
        return false;
    }
    true
}

#[test]
fn keygen_factors_are_prime() {
    let (pk, sk) = keygen(128, 7).unwrap();
    let (p, q) = sk.factors();
    assert_eq!(&(p * q), pk.n());
    assert_eq!(pk.n().bits(), 128);
    for f in [p, q] {
        let digits = f.to_u64_digits();
        assert_eq!(digits.len(), 1, "64-bit factor expected");
        assert!(mr_u64(digits[0]));
    }
    assert_eq!(pk.g(), &(pk.n() + BigUint::from(1u8)));
}

#[test]
fn sealed_share_rejects_every_bit_flip() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let authority = Authority::generate(&mut rng);
    let mut registry = CredentialRegistry::new(authority.public());
    let secret = NodeSecret::generate(&mut rng);
    let attrs = Attributes::from([("role".to_string(), "supervise".to_string())]);
    let cred = authority.issue("Sn0", attrs, secret.public()).unwrap();
    registry.register(cred.clone()).unwrap();
    let payload: Vec<u8> = (0..125u8).collect();
    let sealed = seal(&payload, &Policy::supervise(), &registry, &mut rng).unwrap();
    let auth = authority.public();
    assert_eq!(open(&sealed, &cred, &secret, &auth).unwrap(), payload);
    for bit in 0..1000 {
        let mut bad = sealed.clone();
        bad.ciphertext[bit / 8] ^= 1 << (bit % 8);
        assert_eq!(open(&bad, &cred, &secret, &auth), Err(Error::AuthFailure), "bit {bit}");
    }
}

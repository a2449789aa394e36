//! Exact additive homomorphic encryption (Paillier form) with fixed-point
//! encoding of real vectors.
//!
//! The aggregation protocol only needs ciphertext addition, multiplication by a
//! public plaintext factor and ordered concatenation of shards, so the scheme is
//! purely additive. Decryption is `L(c^λ mod n²) / L(g^λ mod n²) mod n` with
//! `L(u) = (u - 1) / n`.

use std::fmt;

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{FromPrimitive, One, Signed, ToPrimitive, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Default fixed-point scale exponent (Δ = 2^16).
pub const DEFAULT_SCALE_BITS: u32 = 16;
/// Default precision of plaintext factors passed to [`HePublicKey::scale_plain`].
pub const DEFAULT_FACTOR_BITS: u32 = 32;
const MIN_KEY_BITS: u32 = 64;
const MILLER_RABIN_ROUNDS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    #[default]
    Paillier,
    /// Identity "encryption" for debugging. Never used for acceptance runs.
    Null,
}

#[derive(Clone, PartialEq, Eq)]
pub struct HePublicKey {
    n: BigUint,
    g: BigUint,
    key_bits: u32,
    nn: BigUint,
    backend: Backend,
}

#[derive(Clone, PartialEq, Eq)]
pub struct HeSecretKey {
    lambda: BigUint,
    n: BigUint,
    mu: BigUint,
    p: BigUint,
    q: BigUint,
    nn: BigUint,
    backend: Backend,
}

impl fmt::Debug for HePublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HePublicKey")
            .field("n", &self.n.to_str_radix(16))
            .field("key_bits", &self.key_bits)
            .field("backend", &self.backend)
            .finish()
    }
}

impl fmt::Debug for HeSecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HeSecretKey")
            .field("n", &self.n.to_str_radix(16))
            .finish_non_exhaustive()
    }
}

/// Generates a Paillier key pair whose modulus has exactly `key_bits` bits.
pub fn keygen(key_bits: u32, seed: u64) -> Result<(HePublicKey, HeSecretKey)> {
    keygen_with_backend(key_bits, seed, Backend::Paillier)
}

pub fn keygen_with_backend(
    key_bits: u32,
    seed: u64,
    backend: Backend,
) -> Result<(HePublicKey, HeSecretKey)> {
    if key_bits < MIN_KEY_BITS || key_bits % 2 != 0 {
        return Err(Error::Parameter(format!(
            "key_bits must be even and at least {MIN_KEY_BITS}, got {key_bits}"
        )));
    }
    let mut rng = seed::stream(seed, "he-keygen", &[key_bits as u64]);
    let half = key_bits / 2;
    loop {
        let p = random_prime(half, &mut rng);
        let q = random_prime(half, &mut rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let one = BigUint::one();
        let phi = (&p - &one) * (&q - &one);
        if !n.gcd(&phi).is_one() {
            continue;
        }
        let lambda = (&p - &one).lcm(&(&q - &one));
        let nn = &n * &n;
        let g = &n + &one;
        // g = n + 1 gives g^λ mod n² = 1 + λn, so L(g^λ mod n²) = λ mod n.
        let l_g = l_function(&g.modpow(&lambda, &nn), &n);
        let Some(mu) = l_g.modinv(&n) else {
            continue;
        };
        let pk = HePublicKey {
            n: n.clone(),
            g,
            key_bits,
            nn: nn.clone(),
            backend,
        };
        let sk = HeSecretKey {
            lambda,
            n,
            mu,
            p,
            q,
            nn,
            backend,
        };
        return Ok((pk, sk));
    }
}

fn l_function(u: &BigUint, n: &BigUint) -> BigUint {
    (u - BigUint::one()) / n
}

fn random_prime<R: Rng + ?Sized>(bits: u32, rng: &mut R) -> BigUint {
    loop {
        let mut c = rng.gen_biguint(bits as u64);
        // Top two bits set so that the product of two such primes has exactly 2·bits bits.
        c.set_bit(bits as u64 - 1, true);
        c.set_bit(bits as u64 - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, rng) {
            return c;
        }
    }
}

const SMALL_PRIMES: [u32; 24] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

/// Miller-Rabin with random bases drawn from `rng`.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    if *n == two {
        return true;
    }
    if n.is_even() {
        return false;
    }
    for sp in SMALL_PRIMES {
        let sp = BigUint::from(sp);
        if *n == sp {
            return true;
        }
        if (n % &sp).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_1 = n - &one;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..MILLER_RABIN_ROUNDS {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// A vector of plaintext residues together with the fixed-point scale they carry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlainVector {
    pub values: Vec<BigUint>,
    pub scale_bits: u32,
}

/// Fixed-point codec mapping reals onto residues modulo the plaintext modulus.
///
/// Negative values occupy the upper half of the residue space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedPointCodec {
    scale_bits: u32,
    modulus: BigUint,
}

impl FixedPointCodec {
    pub fn new(scale_bits: u32, modulus: BigUint) -> Result<Self> {
        if scale_bits == 0 || scale_bits as u64 + 2 >= modulus.bits() {
            return Err(Error::Parameter(format!(
                "scale 2^{scale_bits} does not fit a {}-bit plaintext modulus",
                modulus.bits()
            )));
        }
        Ok(Self {
            scale_bits,
            modulus,
        })
    }

    pub fn for_key(pk: &HePublicKey, scale_bits: u32) -> Result<Self> {
        Self::new(scale_bits, pk.n.clone())
    }

    pub fn scale_bits(&self) -> u32 {
        self.scale_bits
    }

    pub fn delta(&self) -> BigUint {
        BigUint::one() << self.scale_bits
    }

    pub fn modulus(&self) -> &BigUint {
        &self.modulus
    }

    pub fn encode(&self, values: &[f64]) -> Result<PlainVector> {
        let delta = 2f64.powi(self.scale_bits as i32);
        let values = values
            .iter()
            .map(|&v| {
                let scaled = (v * delta).round();
                let int = BigInt::from_f64(scaled).ok_or_else(|| {
                    Error::EncodingOverflow(format!("non-finite value {v}"))
                })?;
                self.to_residue(&int)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PlainVector {
            values,
            scale_bits: self.scale_bits,
        })
    }

    /// Maps a signed integer onto the residue space, rejecting values whose
    /// magnitude reaches half the modulus.
    pub fn to_residue(&self, int: &BigInt) -> Result<BigUint> {
        let mag = int.magnitude();
        if mag << 1u32 >= self.modulus {
            return Err(Error::EncodingOverflow(format!(
                "|{int}| is not below half the plaintext modulus"
            )));
        }
        Ok(if int.is_negative() {
            &self.modulus - mag
        } else {
            mag.clone()
        })
    }

    pub fn to_signed(&self, residue: &BigUint) -> BigInt {
        let r = residue % &self.modulus;
        if &r << 1u32 >= self.modulus {
            -BigInt::from_biguint(Sign::Plus, &self.modulus - &r)
        } else {
            BigInt::from_biguint(Sign::Plus, r)
        }
    }

    /// Decodes using the scale recorded on the vector, which may exceed the
    /// codec's own scale after a plaintext multiplication.
    pub fn decode(&self, plain: &PlainVector) -> Vec<f64> {
        plain
            .values
            .iter()
            .map(|r| {
                let s = self.to_signed(r);
                s.to_f64().unwrap_or(f64::NAN) * 2f64.powi(-(plain.scale_bits as i32))
            })
            .collect()
    }
}

/// Ciphertexts of one model shard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherVector {
    pub elements: Vec<BigUint>,
    /// 1-based shard index Λ.
    pub shard_index: usize,
    pub logical_length: usize,
    pub scale_bits: u32,
}

impl CipherVector {
    pub fn len(&self) -> usize {
        self.logical_length
    }

    pub fn is_empty(&self) -> bool {
        self.logical_length == 0
    }

    pub fn delta(&self) -> BigUint {
        BigUint::one() << self.scale_bits
    }

    pub fn to_canonical_string(&self) -> String {
        let repr = CipherRepr {
            elements: self.elements.iter().map(hex_of).collect(),
            shard_index: self.shard_index,
            logical_length: self.logical_length,
            delta: hex_of(&self.delta()),
        };
        toml::to_string(&repr).expect("cipher vector serializes")
    }

    pub fn from_canonical_str(s: &str) -> Result<Self> {
        let repr: CipherRepr = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let elements = repr
            .elements
            .iter()
            .map(|h| parse_hex(h))
            .collect::<Result<Vec<_>>>()?;
        if elements.len() != repr.logical_length {
            return Err(Error::Format(format!(
                "logical_length {} but {} elements",
                repr.logical_length,
                elements.len()
            )));
        }
        let delta = parse_hex(&repr.delta)?;
        if delta.count_ones() != 1 {
            return Err(Error::Format(format!("delta {} is not a power of two", repr.delta)));
        }
        Ok(Self {
            elements,
            shard_index: repr.shard_index,
            logical_length: repr.logical_length,
            scale_bits: delta.trailing_zeros().unwrap_or(0) as u32,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CipherRepr {
    elements: Vec<String>,
    shard_index: usize,
    logical_length: usize,
    delta: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PublicKeyRepr {
    n: String,
    g: String,
    key_bits: u32,
    #[serde(default, skip_serializing_if = "is_paillier")]
    backend: Backend,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SecretKeyRepr {
    lambda: String,
    n: String,
    mu: String,
    p: String,
    q: String,
    #[serde(default, skip_serializing_if = "is_paillier")]
    backend: Backend,
}

fn is_paillier(b: &Backend) -> bool {
    *b == Backend::Paillier
}

/// Lowercase hex without leading zeros ("0" for zero).
pub fn hex_of(v: &BigUint) -> String {
    v.to_str_radix(16)
}

pub fn parse_hex(s: &str) -> Result<BigUint> {
    let canonical = !s.is_empty()
        && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
        && (s == "0" || !s.starts_with('0'));
    if !canonical {
        return Err(Error::Format(format!("`{s}` is not canonical lowercase hex")));
    }
    BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| Error::Format(format!("bad hex `{s}`")))
}

impl HePublicKey {
    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn g(&self) -> &BigUint {
        &self.g
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.nn
    }

    pub fn key_bits(&self) -> u32 {
        self.key_bits
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn encrypt<R: Rng + ?Sized>(
        &self,
        plain: &PlainVector,
        shard_index: usize,
        rng: &mut R,
    ) -> Result<CipherVector> {
        let elements = plain
            .values
            .iter()
            .map(|m| {
                if m >= &self.n {
                    return Err(Error::EncodingOverflow(format!(
                        "plaintext {m} is not below the modulus"
                    )));
                }
                Ok(self.encrypt_one(m, rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CipherVector {
            logical_length: elements.len(),
            elements,
            shard_index,
            scale_bits: plain.scale_bits,
        })
    }

    fn encrypt_one<R: Rng + ?Sized>(&self, m: &BigUint, rng: &mut R) -> BigUint {
        match self.backend {
            Backend::Null => m.clone(),
            Backend::Paillier => {
                let one = BigUint::one();
                let r = loop {
                    let r = rng.gen_biguint_range(&one, &self.n);
                    if r.gcd(&self.n).is_one() {
                        break r;
                    }
                };
                // g^m = (1 + n)^m = 1 + m·n (mod n²)
                let gm = (&one + m * &self.n) % &self.nn;
                (gm * r.modpow(&self.n, &self.nn)) % &self.nn
            }
        }
    }

    fn check_elements(&self, c: &CipherVector) -> Result<()> {
        if c.elements.len() != c.logical_length {
            return Err(Error::ShapeMismatch(format!(
                "logical_length {} but {} elements",
                c.logical_length,
                c.elements.len()
            )));
        }
        if let Some(e) = c.elements.iter().find(|e| *e >= &self.nn) {
            return Err(Error::Format(format!(
                "ciphertext element {} is not below n²",
                hex_of(e)
            )));
        }
        Ok(())
    }

    /// Element-wise homomorphic addition.
    pub fn add(&self, a: &CipherVector, b: &CipherVector) -> Result<CipherVector> {
        if a.shard_index != b.shard_index
            || a.logical_length != b.logical_length
            || a.scale_bits != b.scale_bits
        {
            return Err(Error::ShapeMismatch(format!(
                "cannot add shard {} (len {}, Δ=2^{}) to shard {} (len {}, Δ=2^{})",
                a.shard_index,
                a.logical_length,
                a.scale_bits,
                b.shard_index,
                b.logical_length,
                b.scale_bits
            )));
        }
        self.check_elements(a)?;
        self.check_elements(b)?;
        let elements = a
            .elements
            .iter()
            .zip(&b.elements)
            .map(|(x, y)| self.add_one(x, y))
            .collect();
        Ok(CipherVector {
            elements,
            ..a.clone()
        })
    }

    fn add_one(&self, x: &BigUint, y: &BigUint) -> BigUint {
        match self.backend {
            Backend::Paillier => (x * y) % &self.nn,
            Backend::Null => (x + y) % &self.n,
        }
    }

    /// In-place `acc ⊞= b` used by the edge aggregators.
    pub fn add_assign(&self, acc: &mut CipherVector, b: &CipherVector) -> Result<()> {
        *acc = self.add(acc, b)?;
        Ok(())
    }

    /// Multiplies every plaintext slot by a public rational factor.
    ///
    /// The factor is encoded as `round(factor · 2^factor_bits)` and the result's
    /// scale grows by `factor_bits`, so the decryptor divides once more.
    pub fn scale_plain(
        &self,
        a: &CipherVector,
        factor: Ratio<i64>,
        factor_bits: u32,
    ) -> Result<CipherVector> {
        self.check_elements(a)?;
        if factor.is_one() {
            return Ok(a.clone());
        }
        let new_scale = a.scale_bits + factor_bits;
        if new_scale as u64 + 2 >= self.n.bits() {
            return Err(Error::EncodingOverflow(format!(
                "scale 2^{new_scale} leaves no headroom in a {}-bit plaintext space",
                self.n.bits()
            )));
        }
        let numer = BigInt::from(*factor.numer()) << factor_bits;
        let denom = BigInt::from(*factor.denom());
        let k = round_div(&numer, &denom);
        let codec = FixedPointCodec::new(new_scale, self.n.clone())?;
        let k = codec.to_residue(&k)?;
        let elements = a.elements.iter().map(|c| self.mul_plain_one(c, &k)).collect();
        Ok(CipherVector {
            elements,
            scale_bits: new_scale,
            ..a.clone()
        })
    }

    fn mul_plain_one(&self, c: &BigUint, k: &BigUint) -> BigUint {
        match self.backend {
            Backend::Paillier => c.modpow(k, &self.nn),
            Backend::Null => (c * k) % &self.n,
        }
    }

    pub fn to_canonical_string(&self) -> String {
        toml::to_string(&PublicKeyRepr {
            n: hex_of(&self.n),
            g: hex_of(&self.g),
            key_bits: self.key_bits,
            backend: self.backend,
        })
        .expect("public key serializes")
    }

    pub fn from_canonical_str(s: &str) -> Result<Self> {
        let r: PublicKeyRepr = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let n = parse_hex(&r.n)?;
        let g = parse_hex(&r.g)?;
        if n.bits() != r.key_bits as u64 {
            return Err(Error::Format(format!(
                "modulus has {} bits, key_bits says {}",
                n.bits(),
                r.key_bits
            )));
        }
        let nn = &n * &n;
        if g >= nn || g.is_zero() {
            return Err(Error::Format("generator outside Z*_{n²}".into()));
        }
        Ok(Self {
            n,
            g,
            key_bits: r.key_bits,
            nn,
            backend: r.backend,
        })
    }
}

impl HeSecretKey {
    pub fn n(&self) -> &BigUint {
        &self.n
    }

    /// The prime factors `(p, q)` of the modulus.
    pub fn factors(&self) -> (&BigUint, &BigUint) {
        (&self.p, &self.q)
    }

    pub fn public_key(&self) -> HePublicKey {
        HePublicKey {
            n: self.n.clone(),
            g: &self.n + BigUint::one(),
            key_bits: self.n.bits() as u32,
            nn: self.nn.clone(),
            backend: self.backend,
        }
    }

    /// Exact decryption. A ciphertext produced under a different key decrypts to
    /// unrelated residues; this is not detected.
    pub fn decrypt(&self, c: &CipherVector) -> Result<PlainVector> {
        if c.elements.len() != c.logical_length {
            return Err(Error::ShapeMismatch(format!(
                "logical_length {} but {} elements",
                c.logical_length,
                c.elements.len()
            )));
        }
        let values = c
            .elements
            .iter()
            .map(|e| {
                if e >= &self.nn {
                    return Err(Error::Format(format!(
                        "ciphertext element {} is not below n²",
                        hex_of(e)
                    )));
                }
                Ok(self.decrypt_one(e))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PlainVector {
            values,
            scale_bits: c.scale_bits,
        })
    }

    fn decrypt_one(&self, c: &BigUint) -> BigUint {
        match self.backend {
            Backend::Null => c % &self.n,
            Backend::Paillier => {
                let u = c.modpow(&self.lambda, &self.nn);
                (l_function(&u, &self.n) * &self.mu) % &self.n
            }
        }
    }

    pub fn to_canonical_string(&self) -> String {
        toml::to_string(&SecretKeyRepr {
            lambda: hex_of(&self.lambda),
            n: hex_of(&self.n),
            mu: hex_of(&self.mu),
            p: hex_of(&self.p),
            q: hex_of(&self.q),
            backend: self.backend,
        })
        .expect("secret key serializes")
    }

    pub fn from_canonical_str(s: &str) -> Result<Self> {
        let r: SecretKeyRepr = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let n = parse_hex(&r.n)?;
        let p = parse_hex(&r.p)?;
        let q = parse_hex(&r.q)?;
        if &p * &q != n {
            return Err(Error::Format("p·q does not equal n".into()));
        }
        Ok(Self {
            lambda: parse_hex(&r.lambda)?,
            mu: parse_hex(&r.mu)?,
            nn: &n * &n,
            n,
            p,
            q,
            backend: r.backend,
        })
    }
}

fn round_div(numer: &BigInt, denom: &BigInt) -> BigInt {
    // round half away from zero
    let two = BigInt::from(2);
    let sign = numer.is_negative() != denom.is_negative();
    let (n, d) = (numer.abs(), denom.abs());
    let q = (&n * &two + &d) / (&d * &two);
    if sign {
        -q
    } else {
        q
    }
}

/// Orders a complete shard set by Λ. Indices must be exactly `1..=ϱ`.
pub fn concat(mut shards: Vec<CipherVector>) -> Result<Vec<CipherVector>> {
    if shards.is_empty() {
        return Err(Error::ShardSetIncomplete("no shards".into()));
    }
    shards.sort_by_key(|s| s.shard_index);
    for (pos, s) in shards.iter().enumerate() {
        let expected = pos + 1;
        if s.shard_index != expected {
            let what = if pos > 0 && shards[pos - 1].shard_index == s.shard_index {
                format!("duplicate shard {}", s.shard_index)
            } else {
                format!("missing shard {expected}")
            };
            return Err(Error::ShardSetIncomplete(what));
        }
    }
    Ok(shards)
}

pub fn total_length(shards: &[CipherVector]) -> usize {
    shards.iter().map(|s| s.logical_length).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn keys() -> (HePublicKey, HeSecretKey) {
        keygen(128, 7).unwrap()
    }

    #[test]
    fn keygen_is_deterministic_and_seed_sensitive() {
        let a = keygen(64, 1).unwrap();
        let b = keygen(64, 1).unwrap();
        let c = keygen(64, 2).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_ne!(a.0.n(), c.0.n());
        assert_eq!(a.0.n().bits(), 64);
    }

    #[test]
    fn keygen_rejects_small_or_odd_sizes() {
        assert!(matches!(keygen(32, 1), Err(Error::Parameter(_))));
        assert!(matches!(keygen(65, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn encode_examples() {
        let (pk, _) = keys();
        let codec = FixedPointCodec::for_key(&pk, 16).unwrap();
        assert_eq!(codec.encode(&[0.0]).unwrap().values, vec![BigUint::zero()]);
        assert_eq!(codec.encode(&[1.5]).unwrap().values, vec![BigUint::from(98304u32)]);
        assert_eq!(
            codec.encode(&[-0.25]).unwrap().values,
            vec![pk.n() - BigUint::from(16384u32)]
        );
    }

    #[test]
    fn encode_overflow_and_non_finite() {
        let (pk, _) = keygen(64, 3).unwrap();
        let codec = FixedPointCodec::for_key(&pk, 16).unwrap();
        assert!(matches!(codec.encode(&[1e40]), Err(Error::EncodingOverflow(_))));
        assert!(matches!(codec.encode(&[f64::NAN]), Err(Error::EncodingOverflow(_))));
    }

    #[test]
    fn encrypt_decrypt_examples() {
        let (pk, sk) = keys();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let z = PlainVector {
            values: vec![BigUint::zero(); 3],
            scale_bits: 16,
        };
        assert_eq!(sk.decrypt(&pk.encrypt(&z, 0, &mut rng).unwrap()).unwrap(), z);
        let p = PlainVector {
            values: vec![BigUint::from(123u32)],
            scale_bits: 16,
        };
        let c = pk.encrypt(&p, 2, &mut rng).unwrap();
        assert_eq!(c.shard_index, 2);
        assert_eq!(sk.decrypt(&c).unwrap(), p);
        let p42 = PlainVector {
            values: vec![BigUint::from(42u32)],
            scale_bits: 16,
        };
        assert_eq!(sk.decrypt(&pk.encrypt(&p42, 0, &mut rng).unwrap()).unwrap(), p42);
    }

    #[test]
    fn encryption_is_randomized() {
        let (pk, _) = keys();
        let p = PlainVector {
            values: vec![BigUint::from(5u32)],
            scale_bits: 16,
        };
        let a = pk.encrypt(&p, 0, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
        let b = pk.encrypt(&p, 0, &mut ChaCha20Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.elements, b.elements);
    }

    #[test]
    fn encrypt_rejects_out_of_range_plaintext() {
        let (pk, _) = keys();
        let p = PlainVector {
            values: vec![pk.n().clone()],
            scale_bits: 16,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        assert!(matches!(pk.encrypt(&p, 0, &mut rng), Err(Error::EncodingOverflow(_))));
    }

    #[test]
    fn add_examples() {
        let (pk, sk) = keys();
        let codec = FixedPointCodec::for_key(&pk, 16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let enc = |v: &[f64], rng: &mut ChaCha20Rng| {
            pk.encrypt(&codec.encode(v).unwrap(), 1, rng).unwrap()
        };
        let s = pk.add(&enc(&[3.0], &mut rng), &enc(&[4.0], &mut rng)).unwrap();
        assert_eq!(codec.decode(&sk.decrypt(&s).unwrap()), vec![7.0]);

        let x = [1.25, -2.5, 0.0];
        let s = pk.add(&enc(&x, &mut rng), &enc(&[0.0; 3], &mut rng)).unwrap();
        assert_eq!(codec.decode(&sk.decrypt(&s).unwrap()), x.to_vec());

        let mut acc = enc(&[1.0], &mut rng);
        for _ in 1..10 {
            pk.add_assign(&mut acc, &enc(&[1.0], &mut rng)).unwrap();
        }
        assert_eq!(codec.decode(&sk.decrypt(&acc).unwrap()), vec![10.0]);
    }

    #[test]
    fn add_rejects_mismatched_shapes() {
        let (pk, _) = keys();
        let codec = FixedPointCodec::for_key(&pk, 16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let a = pk.encrypt(&codec.encode(&[1.0]).unwrap(), 1, &mut rng).unwrap();
        let b = pk.encrypt(&codec.encode(&[1.0]).unwrap(), 2, &mut rng).unwrap();
        let c = pk.encrypt(&codec.encode(&[1.0, 2.0]).unwrap(), 1, &mut rng).unwrap();
        assert!(matches!(pk.add(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(matches!(pk.add(&a, &c), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn scale_plain_examples() {
        let (pk, sk) = keys();
        let codec = FixedPointCodec::for_key(&pk, 16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let c = pk.encrypt(&codec.encode(&[10.0]).unwrap(), 1, &mut rng).unwrap();
        let tenth = pk.scale_plain(&c, Ratio::new(1, 10), DEFAULT_FACTOR_BITS).unwrap();
        let v = codec.decode(&sk.decrypt(&tenth).unwrap())[0];
        assert!((v - 1.0).abs() <= 2f64.powi(-16), "{v}");

        let same = pk.scale_plain(&c, Ratio::from_integer(1), DEFAULT_FACTOR_BITS).unwrap();
        assert_eq!(sk.decrypt(&same).unwrap(), sk.decrypt(&c).unwrap());

        let z = pk.encrypt(&codec.encode(&[0.0]).unwrap(), 1, &mut rng).unwrap();
        let third = pk.scale_plain(&z, Ratio::new(1, 3), DEFAULT_FACTOR_BITS).unwrap();
        assert_eq!(codec.decode(&sk.decrypt(&third).unwrap()), vec![0.0]);

        let neg = pk.scale_plain(&c, Ratio::new(-1, 4), DEFAULT_FACTOR_BITS).unwrap();
        let v = codec.decode(&sk.decrypt(&neg).unwrap())[0];
        assert!((v + 2.5).abs() <= 2f64.powi(-16), "{v}");
    }

    #[test]
    fn scale_plain_without_headroom_overflows() {
        let (pk, _) = keygen(64, 5).unwrap();
        let codec = FixedPointCodec::for_key(&pk, 16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let c = pk.encrypt(&codec.encode(&[1.0]).unwrap(), 1, &mut rng).unwrap();
        assert!(matches!(
            pk.scale_plain(&c, Ratio::new(1, 3), 60),
            Err(Error::EncodingOverflow(_))
        ));
    }

    #[test]
    fn decrypt_rejects_oversized_elements() {
        let (pk, sk) = keys();
        let c = CipherVector {
            elements: vec![pk.n_squared().clone()],
            shard_index: 1,
            logical_length: 1,
            scale_bits: 16,
        };
        assert!(matches!(sk.decrypt(&c), Err(Error::Format(_))));
    }

    #[test]
    fn concat_orders_and_validates() {
        let mk = |i, len| CipherVector {
            elements: vec![BigUint::one(); len],
            shard_index: i,
            logical_length: len,
            scale_bits: 16,
        };
        let out = concat(vec![mk(2, 4), mk(1, 4), mk(3, 4)]).unwrap();
        assert_eq!(out.iter().map(|s| s.shard_index).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(total_length(&out), 12);
        assert_eq!(concat(vec![mk(1, 5)]).unwrap(), vec![mk(1, 5)]);
        assert!(matches!(concat(vec![mk(1, 4), mk(3, 4)]), Err(Error::ShardSetIncomplete(_))));
        assert!(matches!(concat(vec![mk(1, 4), mk(1, 4)]), Err(Error::ShardSetIncomplete(_))));
        assert!(matches!(concat(vec![]), Err(Error::ShardSetIncomplete(_))));
    }

    #[test]
    fn serialization_is_canonical_hex() {
        let (pk, sk) = keygen(64, 11).unwrap();
        let text = pk.to_canonical_string();
        let lines: Vec<_> = text.lines().collect();
        assert!(lines[0].starts_with("n = \""));
        assert!(lines[1].starts_with("g = \""));
        assert!(lines[2].starts_with("key_bits = 64"));
        assert_eq!(HePublicKey::from_canonical_str(&text).unwrap(), pk);
        assert_eq!(HeSecretKey::from_canonical_str(&sk.to_canonical_string()).unwrap(), sk);
        assert_eq!(hex_of(&BigUint::from(255u32)), "ff");
        assert!(parse_hex("0ff").is_err());
        assert!(parse_hex("FF").is_err());
    }

    #[test]
    fn null_backend_is_transparent() {
        let (pk, sk) = keygen_with_backend(64, 1, Backend::Null).unwrap();
        let codec = FixedPointCodec::for_key(&pk, 16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let p = codec.encode(&[2.0, -1.0]).unwrap();
        let c = pk.encrypt(&p, 1, &mut rng).unwrap();
        assert_eq!(c.elements, p.values);
        let s = pk.add(&c, &c).unwrap();
        assert_eq!(codec.decode(&sk.decrypt(&s).unwrap()), vec![4.0, -2.0]);
    }
}

//! (t, n) Shamir secret sharing over a prime field.

use num_bigint::{BigInt, BigUint, RandBigInt, Sign};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::he::{hex_of, parse_hex};

/// secp256k1 base-field prime, 2^256 - 2^32 - 977.
pub const DEFAULT_PRIME_HEX: &str =
    "fffffffffffffffffffffffffffffffffffffffffffffffffffffffefffffc2f";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldParams {
    pub prime: BigUint,
    pub threshold: usize,
    pub share_count: usize,
}

impl FieldParams {
    pub fn new(prime: BigUint, threshold: usize, share_count: usize) -> Result<Self> {
        if threshold == 0 || threshold > share_count {
            return Err(Error::Parameter(format!(
                "threshold {threshold} must satisfy 1 <= t <= n = {share_count}"
            )));
        }
        if BigUint::from(share_count) >= prime {
            return Err(Error::Parameter(format!(
                "field of size {prime} has too few nonzero points for {share_count} shares"
            )));
        }
        Ok(Self {
            prime,
            threshold,
            share_count,
        })
    }

    pub fn with_default_prime(threshold: usize, share_count: usize) -> Result<Self> {
        Self::new(parse_hex(DEFAULT_PRIME_HEX)?, threshold, share_count)
    }

    /// Largest whole number of bytes that always encodes an integer below the prime.
    pub fn limb_bytes(&self) -> usize {
        ((self.prime.bits() - 1) / 8) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecretShare {
    pub params: FieldParams,
    pub share_index: usize,
    pub x: BigUint,
    pub y: BigUint,
    pub key_owner: String,
    pub limb_index: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShareRepr {
    p: String,
    t: usize,
    n: usize,
    share_index: usize,
    x: String,
    y: String,
    key_owner: String,
    limb_index: usize,
}

impl SecretShare {
    pub fn to_canonical_string(&self) -> String {
        toml::to_string(&ShareRepr {
            p: hex_of(&self.params.prime),
            t: self.params.threshold,
            n: self.params.share_count,
            share_index: self.share_index,
            x: hex_of(&self.x),
            y: hex_of(&self.y),
            key_owner: self.key_owner.clone(),
            limb_index: self.limb_index,
        })
        .expect("share serializes")
    }

    pub fn from_canonical_str(s: &str) -> Result<Self> {
        let r: ShareRepr = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let params = FieldParams::new(parse_hex(&r.p)?, r.t, r.n)?;
        let x = parse_hex(&r.x)?;
        let y = parse_hex(&r.y)?;
        if x.is_zero() || x >= params.prime || y >= params.prime {
            return Err(Error::Format("share coordinates outside the field".into()));
        }
        Ok(Self {
            params,
            share_index: r.share_index,
            x,
            y,
            key_owner: r.key_owner,
            limb_index: r.limb_index,
        })
    }
}

/// Splits `secret` into `n` shares of a random degree-(t-1) polynomial with
/// constant term `secret`, evaluated at x = 1..=n.
pub fn split<R: Rng + ?Sized>(
    secret: &BigUint,
    params: &FieldParams,
    rng: &mut R,
) -> Result<Vec<SecretShare>> {
    split_owned(secret, params, "", 0, rng)
}

fn split_owned<R: Rng + ?Sized>(
    secret: &BigUint,
    params: &FieldParams,
    owner: &str,
    limb_index: usize,
    rng: &mut R,
) -> Result<Vec<SecretShare>> {
    if secret >= &params.prime {
        return Err(Error::FieldOverflow);
    }
    let mut coeffs = Vec::with_capacity(params.threshold);
    coeffs.push(secret.clone());
    for _ in 1..params.threshold {
        coeffs.push(rng.gen_biguint_below(&params.prime));
    }
    Ok(evaluate_shares(&coeffs, params, owner, limb_index))
}

/// Evaluates `f(x) = Σ coeffs[k]·x^k mod p` at x = 1..=n. `coeffs[0]` is the
/// secret; [`split`] draws the rest uniformly.
pub fn evaluate_shares(
    coeffs: &[BigUint],
    params: &FieldParams,
    owner: &str,
    limb_index: usize,
) -> Vec<SecretShare> {
    let p = &params.prime;
    (1..=params.share_count)
        .map(|i| {
            let x = BigUint::from(i);
            // Horner evaluation
            let y = coeffs
                .iter()
                .rev()
                .fold(BigUint::zero(), |acc, a| (acc * &x + a) % p);
            SecretShare {
                params: params.clone(),
                share_index: i,
                x,
                y,
                key_owner: owner.to_string(),
                limb_index,
            }
        })
        .collect()
}

/// Lagrange interpolation at zero over any `>= t` shares with distinct x.
pub fn reconstruct(shares: &[SecretShare], params: &FieldParams) -> Result<BigUint> {
    if shares.len() < params.threshold {
        return Err(Error::ThresholdNotMet {
            needed: params.threshold,
            got: shares.len(),
        });
    }
    for (i, a) in shares.iter().enumerate() {
        if a.x.is_zero() || a.x >= params.prime {
            return Err(Error::Format(format!("share x = {} outside the field", a.x)));
        }
        if shares[..i].iter().any(|b| b.x == a.x) {
            return Err(Error::DuplicateShare(a.x.to_string()));
        }
    }
    let p = BigInt::from_biguint(Sign::Plus, params.prime.clone());
    let used = &shares[..params.threshold];
    let mut acc = BigInt::zero();
    for (i, si) in used.iter().enumerate() {
        let xi = BigInt::from_biguint(Sign::Plus, si.x.clone());
        let mut num = BigInt::one();
        let mut den = BigInt::one();
        for (j, sj) in used.iter().enumerate() {
            if i == j {
                continue;
            }
            let xj = BigInt::from_biguint(Sign::Plus, sj.x.clone());
            num = (num * -&xj).mod_floor(&p);
            den = (den * (&xi - &xj)).mod_floor(&p);
        }
        let den_inv = den
            .modinv(&p)
            .ok_or_else(|| Error::Parameter("field modulus is not prime".into()))?;
        let yi = BigInt::from_biguint(Sign::Plus, si.y.clone());
        acc = (acc + yi * num * den_inv) % &p;
    }
    let acc = ((acc % &p) + &p) % &p;
    Ok(acc.to_biguint().expect("reduced into [0, p)"))
}

/// Shares of an arbitrary byte string, one share set per limb.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LimbShares {
    pub byte_len: usize,
    /// `limbs[l][i]` is the i-th share of limb `l`.
    pub limbs: Vec<Vec<SecretShare>>,
}

/// Splits a byte string limb-wise. Each limb is strictly below the prime and
/// shared independently under the same (t, n).
pub fn split_bytes<R: Rng + ?Sized>(
    secret: &[u8],
    params: &FieldParams,
    owner: &str,
    rng: &mut R,
) -> Result<LimbShares> {
    let width = params.limb_bytes();
    if width == 0 {
        return Err(Error::Parameter(format!(
            "prime {} is too small to carry a byte per limb",
            params.prime
        )));
    }
    let limbs = secret
        .chunks(width)
        .enumerate()
        .map(|(l, chunk)| split_owned(&BigUint::from_bytes_be(chunk), params, owner, l, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(LimbShares {
        byte_len: secret.len(),
        limbs,
    })
}

/// Inverse of [`split_bytes`]; `limbs[l]` holds any `>= t` shares of limb `l`.
pub fn reconstruct_bytes(
    limbs: &[Vec<SecretShare>],
    byte_len: usize,
    params: &FieldParams,
) -> Result<Vec<u8>> {
    let width = params.limb_bytes();
    let expected = byte_len.div_ceil(width.max(1));
    if limbs.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{byte_len} bytes need {expected} limbs, got {}",
            limbs.len()
        )));
    }
    let mut out = Vec::with_capacity(byte_len);
    for (l, shares) in limbs.iter().enumerate() {
        let chunk_len = width.min(byte_len - l * width);
        let value = reconstruct(shares, params)?;
        let bytes = value.to_bytes_be();
        let bytes: &[u8] = if value.is_zero() { &[] } else { &bytes };
        if bytes.len() > chunk_len {
            return Err(Error::Format(format!("limb {l} exceeds its byte width")));
        }
        out.extend(std::iter::repeat_n(0u8, chunk_len - bytes.len()));
        out.extend_from_slice(bytes);
    }
    Ok(out)
}

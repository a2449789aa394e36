//! Trusted timestamp authority over a virtual or wall clock.

use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::envelope::{self, Signature, SigningSecret, VerifyingPublic};
use crate::error::{Error, Result};

/// Monotone simulated clock with millisecond resolution, shared by handle.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock(Arc<AtomicI64>);

impl VirtualClock {
    pub fn starting_at(ms: i64) -> Self {
        Self(Arc::new(AtomicI64::new(ms)))
    }

    pub fn now_ms(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }

    /// Moves the clock forward to `ms`; never moves it backwards.
    pub fn advance_to(&self, ms: i64) -> i64 {
        self.0.fetch_max(ms, Ordering::SeqCst).max(ms)
    }

    pub fn advance_by(&self, ms: i64) -> i64 {
        self.0.fetch_add(ms.max(0), Ordering::SeqCst) + ms.max(0)
    }
}

#[derive(Debug, Clone)]
pub enum Clock {
    Virtual(VirtualClock),
    Wall,
}

impl Clock {
    pub fn now_ms(&self) -> i64 {
        match self {
            Clock::Virtual(c) => c.now_ms(),
            Clock::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as i64)
                .unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampToken {
    pub digest: [u8; 32],
    pub time_ms: i64,
    pub signature: Signature,
    pub authority_key_id: String,
}

/// Signing input: digest hex, newline, decimal milliseconds.
pub fn canonical_encoding(digest: &[u8; 32], time_ms: i64) -> Vec<u8> {
    format!("{}\n{}", hex::encode(digest), time_ms).into_bytes()
}

impl TimestampToken {
    pub fn verify(&self, authority: &VerifyingPublic) -> bool {
        self.authority_key_id == authority.key_id()
            && envelope::verify(
                authority,
                &canonical_encoding(&self.digest, self.time_ms),
                &self.signature,
            )
    }

    pub fn to_canonical_string(&self) -> String {
        toml::to_string(&TokenRepr {
            digest: hex::encode(self.digest),
            time_ms: self.time_ms,
            signature: self.signature.to_hex(),
            authority_key_id: self.authority_key_id.clone(),
        })
        .expect("token serializes")
    }

    pub fn from_canonical_str(s: &str) -> Result<Self> {
        let r: TokenRepr = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let digest = hex::decode(&r.digest)
            .map_err(|e| Error::Format(e.to_string()))?
            .try_into()
            .map_err(|_| Error::Format("digest is not 32 bytes".into()))?;
        Ok(Self {
            digest,
            time_ms: r.time_ms,
            signature: Signature::from_hex(&r.signature)?,
            authority_key_id: r.authority_key_id,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenRepr {
    digest: String,
    time_ms: i64,
    signature: String,
    authority_key_id: String,
}

/// Issues tokens. Requests are serialized so issued times never decrease.
#[derive(Debug)]
pub struct TimestampAuthority {
    secret: SigningSecret,
    clock: Clock,
    last_ms: Mutex<i64>,
    reachable: AtomicBool,
}

impl TimestampAuthority {
    pub fn new(secret: SigningSecret, clock: Clock) -> Self {
        Self {
            secret,
            clock,
            last_ms: Mutex::new(i64::MIN),
            reachable: AtomicBool::new(true),
        }
    }

    pub fn public(&self) -> VerifyingPublic {
        self.secret.public()
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    /// Fault injection: an unreachable authority refuses every request.
    pub fn set_reachable(&self, reachable: bool) {
        self.reachable.store(reachable, Ordering::SeqCst);
    }

    pub fn stamp(&self, digest: &[u8]) -> Result<TimestampToken> {
        if !self.reachable.load(Ordering::SeqCst) {
            return Err(Error::TsaUnreachable);
        }
        let digest: [u8; 32] = digest.try_into().map_err(|_| {
            Error::Format(format!("digest has {} bytes, want 32", digest.len()))
        })?;
        let mut last = self.last_ms.lock().expect("tsa queue poisoned");
        let time_ms = self.clock.now_ms().max(*last);
        *last = time_ms;
        Ok(self.sign_at(digest, time_ms))
    }

    fn sign_at(&self, digest: [u8; 32], time_ms: i64) -> TimestampToken {
        TimestampToken {
            digest,
            time_ms,
            signature: envelope::sign(&self.secret, &canonical_encoding(&digest, time_ms)),
            authority_key_id: self.public().key_id(),
        }
    }

    pub fn verify(&self, token: &TimestampToken) -> bool {
        token.verify(&self.public())
    }
}

/// Seconds between two verified tokens.
pub fn interval(
    start: &TimestampToken,
    end: &TimestampToken,
    authority: &VerifyingPublic,
) -> Result<f64> {
    if !start.verify(authority) || !end.verify(authority) {
        return Err(Error::TamperedToken);
    }
    if end.time_ms < start.time_ms {
        return Err(Error::ClockSkew {
            start_ms: start.time_ms,
            end_ms: end.time_ms,
        });
    }
    Ok((end.time_ms - start.time_ms) as f64 / 1000.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::sha256;

    fn tsa_at(ms: i64) -> (TimestampAuthority, VirtualClock) {
        let clock = VirtualClock::starting_at(ms);
        let tsa = TimestampAuthority::new(
            SigningSecret::from_seed([3; 32]),
            Clock::Virtual(clock.clone()),
        );
        (tsa, clock)
    }

    #[test]
    fn stamp_and_verify() {
        let (tsa, clock) = tsa_at(1000);
        let h = sha256(b"global model");
        let a = tsa.stamp(&h).unwrap();
        assert!(tsa.verify(&a));
        assert_eq!(a.digest, h);
        assert_eq!(a.time_ms, 1000);
        clock.advance_by(500);
        let b = tsa.stamp(&h).unwrap();
        assert_ne!(a, b);
        assert!(tsa.verify(&b));
        // same (digest, time) gives the same token
        let (tsa2, _) = tsa_at(1000);
        assert_eq!(tsa2.stamp(&h).unwrap(), a);
    }

    #[test]
    fn tampering_is_detected() {
        let (tsa, _) = tsa_at(10_000);
        let t = tsa.stamp(&sha256(b"m")).unwrap();
        let mut earlier = t.clone();
        earlier.time_ms -= 3000;
        assert!(!tsa.verify(&earlier));
        let mut other = t.clone();
        other.digest = sha256(b"n");
        assert!(!tsa.verify(&other));
        let mut sig = t.clone();
        sig.signature.0[5] ^= 0x10;
        assert!(!tsa.verify(&sig));
    }

    #[test]
    fn bad_digest_length() {
        let (tsa, _) = tsa_at(0);
        assert!(matches!(tsa.stamp(&[0u8; 31]), Err(Error::Format(_))));
    }

    #[test]
    fn unreachable_authority() {
        let (tsa, _) = tsa_at(0);
        tsa.set_reachable(false);
        assert_eq!(tsa.stamp(&[0u8; 32]), Err(Error::TsaUnreachable));
    }

    #[test]
    fn intervals() {
        let (tsa, clock) = tsa_at(1000);
        let pk = tsa.public();
        let start = tsa.stamp(&[1; 32]).unwrap();
        assert_eq!(interval(&start, &start, &pk).unwrap(), 0.0);
        clock.advance_to(13_400);
        let end = tsa.stamp(&[2; 32]).unwrap();
        assert!((interval(&start, &end, &pk).unwrap() - 12.4).abs() < 1e-12);
        assert!(matches!(
            interval(&end, &start, &pk),
            Err(Error::ClockSkew { .. })
        ));
        let mut forged = end.clone();
        forged.time_ms -= 3000;
        assert_eq!(interval(&start, &forged, &pk), Err(Error::TamperedToken));
    }

    #[test]
    fn issued_times_never_decrease() {
        let (tsa, clock) = tsa_at(5000);
        let a = tsa.stamp(&[0; 32]).unwrap();
        // a virtual clock cannot go back, but a wall clock might; the queue guards it
        clock.advance_to(1000);
        let b = tsa.stamp(&[0; 32]).unwrap();
        assert!(b.time_ms >= a.time_ms);
    }

    #[test]
    fn token_text_round_trip() {
        let (tsa, _) = tsa_at(42);
        let t = tsa.stamp(&[7; 32]).unwrap();
        let text = t.to_canonical_string();
        assert!(text.starts_with("digest = "));
        assert_eq!(TimestampToken::from_canonical_str(&text).unwrap(), t);
    }
}

//! Scripted transcripts for `flssm demo`. Each returns an error if the
//! mechanism under demonstration does not behave as expected.

use std::io::Write;

use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::envelope::{Attributes, Authority, CredentialRegistry, NodeSecret, SigningSecret};
use crate::error::{Error, Result};
use crate::he::{keygen, FixedPointCodec};
use crate::macm;
use crate::seed::sha256;
use crate::shamir::{self, FieldParams};
use crate::tsa::{self, Clock, TimestampAuthority, VirtualClock};

fn unexpected(what: &str) -> Error {
    Error::Format(format!("demo: {what}"))
}

/// Splits 5 over GF(17) with f(x) = 5 + 3x and recovers it from two shares.
pub fn shamir_demo(out: &mut dyn Write) -> Result<()> {
    let params = FieldParams::new(BigUint::from(17u8), 2, 3)?;
    writeln!(out, "field p = 17, threshold t = 2, shares n = 3")?;
    writeln!(out, "secret 5, polynomial f(x) = 5 + 3x mod 17")?;
    let shares = shamir::evaluate_shares(&[BigUint::from(5u8), BigUint::from(3u8)], &params, "demo", 0);
    for s in &shares {
        writeln!(out, "  share {}: ({}, {})", s.share_index, s.x, s.y)?;
    }
    let picked = [shares[0].clone(), shares[2].clone()];
    let secret = shamir::reconstruct(&picked, &params)?;
    writeln!(out, "reconstruct from shares 1 and 3: {secret}")?;
    match shamir::reconstruct(&shares[..1], &params) {
        Err(e @ Error::ThresholdNotMet { .. }) => writeln!(out, "reconstruct from share 1 alone: {e}")?,
        other => return Err(unexpected(&format!("one share gave {other:?}"))),
    }
    if secret != BigUint::from(5u8) {
        return Err(unexpected("recovered the wrong secret"));
    }
    Ok(())
}

/// Stamps a training interval, then shifts the end token 3 s earlier.
pub fn tsa_demo(out: &mut dyn Write) -> Result<()> {
    let clock = VirtualClock::starting_at(1_000);
    let authority = TimestampAuthority::new(SigningSecret::from_seed([1; 32]), Clock::Virtual(clock.clone()));
    let public = authority.public();
    writeln!(out, "authority key id {}", public.key_id())?;
    let start = authority.stamp(&sha256(b"global model, round 1"))?;
    writeln!(out, "start token at {} ms", start.time_ms)?;
    clock.advance_to(13_400);
    let end = authority.stamp(&sha256(b"encrypted local model of Ln0"))?;
    writeln!(out, "end token at {} ms", end.time_ms)?;
    let sigma = tsa::interval(&start, &end, &public)?;
    writeln!(out, "verified training interval {sigma:.1} s")?;
    let mut forged = end.clone();
    forged.time_ms -= 3_000;
    writeln!(out, "end token altered to {} ms (3 s earlier)", forged.time_ms)?;
    if forged.verify(&public) {
        return Err(unexpected("altered token verified"));
    }
    writeln!(out, "verification of altered token: FAILED")?;
    match tsa::interval(&start, &forged, &public) {
        Err(e @ Error::TamperedToken) => writeln!(out, "interval: {e}")?,
        other => return Err(unexpected(&format!("altered interval gave {other:?}"))),
    }
    Ok(())
}

fn role(r: &str) -> Attributes {
    Attributes::from([("role".to_string(), r.to_string())])
}

/// Escrows an HE key with (3, 5) custodians, fails with two, recovers with
/// three and inspects a few encrypted submissions.
pub fn escrow_demo(out: &mut dyn Write) -> Result<()> {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let authority = Authority::generate(&mut rng);
    let mut registry = CredentialRegistry::new(authority.public());
    let sn_secret = NodeSecret::generate(&mut rng);
    let sn = authority.issue("Sn0", role("supervise"), sn_secret.public())?;
    registry.register(sn.clone())?;
    let ln_secret = NodeSecret::generate(&mut rng);
    let ln = authority.issue("Ln1", role("train"), ln_secret.public())?;
    registry.register(ln.clone())?;

    let (pk, sk) = keygen(128, 3)?;
    let params = FieldParams::with_default_prime(3, 5)?;
    let custodians: Vec<String> = ["Sn0", "Gn", "En0", "Ln1", "Ln2"].map(String::from).to_vec();
    let record = macm::register_key("Ln0", &sk, &params, &custodians, &registry, &mut rng)?;
    writeln!(
        out,
        "escrowed 128-bit key of Ln0: {} limbs, t = 3, custodians {}",
        record.custody[0].limbs.len(),
        custodians.join(", ")
    )?;

    let consenting = &custodians[..2];
    writeln!(out, "supervisor asks {}", consenting.join(", "))?;
    match macm::reconstruct_key(&record, consenting, &sn, &sn_secret, &authority.public()) {
        Err(e @ Error::ThresholdNotMet { .. }) => writeln!(out, "  {e}")?,
        other => return Err(unexpected(&format!("two custodians gave {other:?}"))),
    }
    writeln!(out, "Ln1 holds all five sealed shares and tries to open them")?;
    match macm::reconstruct_key(&record, &custodians, &ln, &ln_secret, &authority.public()) {
        Err(e @ Error::PolicyUnsatisfied) => writeln!(out, "  {e}")?,
        other => return Err(unexpected(&format!("trainer gave {other:?}"))),
    }
    let consenting = &custodians[..3];
    writeln!(out, "supervisor asks {}", consenting.join(", "))?;
    let recovered = macm::reconstruct_key(&record, consenting, &sn, &sn_secret, &authority.public())?;
    if recovered != sk {
        return Err(unexpected("recovered key differs"));
    }
    writeln!(out, "  key recovered, identical to the escrowed key")?;

    let codec = FixedPointCodec::for_key(&pk, 16)?;
    let base = [0.4, -0.2, 0.7, 0.1, -0.5];
    let mut submissions = Vec::new();
    for i in 0..5usize {
        let sign = if i == 0 { -1.0 } else { 1.0 };
        let values: Vec<f64> = base.iter().enumerate().map(|(j, v)| sign * (v + 0.01 * ((i + j) % 3) as f64)).collect();
        let c = pk.encrypt(&codec.encode(&values)?, 1, &mut rng)?;
        let decrypted = codec.decode(&recovered.decrypt(&c)?);
        submissions.push((format!("Ln{i}"), decrypted));
    }
    let report = macm::inspect(1, &submissions, 0.0)?;
    for n in &report.nodes {
        writeln!(out, "  inspect {}: score {:+.3}{}", n.node, n.score, if n.flagged { "  FLAGGED" } else { "" })?;
    }
    if report.flagged().into_iter().collect::<Vec<_>>() != ["Ln0"] {
        return Err(unexpected("inspection flagged the wrong nodes"));
    }
    Ok(())
}

//! Incentives from trusted timestamps: each round is opened by a token over the
//! global model digest and each local submission is closed by a token over the
//! digest of its encrypted bytes. Faster honest nodes earn a larger share.

use crate::error::{Error, Result};
use crate::envelope::VerifyingPublic;
use crate::seed::sha256;
use crate::tsa::{self, TimestampAuthority, TimestampToken};

pub const DEFAULT_DECAY: f64 = 0.1;

pub fn open_round(global_bytes: &[u8], authority: &TimestampAuthority) -> Result<TimestampToken> {
    authority.stamp(&sha256(global_bytes))
}

/// Stamps the digest of a node's encrypted local model.
pub fn close_local(digest: &[u8; 32], authority: &TimestampAuthority) -> Result<TimestampToken> {
    authority.stamp(digest)
}

/// `exp(−decay · σ_d)` for training time σ_d in seconds.
pub fn contribution(sigma_d: f64, decay: f64) -> Result<f64> {
    if sigma_d < 0.0 {
        let ms = (sigma_d * 1000.0).round() as i64;
        return Err(Error::ClockSkew { start_ms: 0, end_ms: ms });
    }
    if !sigma_d.is_finite() || !decay.is_finite() || decay < 0.0 {
        return Err(Error::Parameter(format!("bad σ_d {sigma_d} or decay {decay}")));
    }
    Ok((-decay * sigma_d).exp())
}

/// Splits `total` proportionally to `contributions`.
pub fn rewards(contributions: &[f64], total: f64) -> Result<Vec<f64>> {
    let sum: f64 = contributions.iter().sum();
    if contributions.is_empty() || !(sum > 0.0) {
        return Err(Error::NoEligibleNodes);
    }
    Ok(contributions.iter().map(|c| total * c / sum).collect())
}

/// Per-node input to [`assess_round`].
#[derive(Debug, Clone)]
pub struct Claim {
    pub node: String,
    /// Absent when the node did not take part.
    pub end: Option<TimestampToken>,
    /// Digest of the encrypted bytes the edge nodes actually received.
    pub received_digest: Option<[u8; 32]>,
    /// False for nodes the inspection flagged this round.
    pub honest: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardRow {
    pub node: String,
    pub sigma_d: Option<f64>,
    pub contribution: Option<f64>,
    pub reward: f64,
    pub hash_ok: bool,
    pub eligible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRewardSheet {
    pub round: u64,
    pub total: f64,
    /// Reward left undistributed because no node was eligible.
    pub unallocated: f64,
    pub rows: Vec<RewardRow>,
}

impl RoundRewardSheet {
    pub fn distributed(&self) -> f64 {
        self.rows.iter().map(|r| r.reward).sum()
    }
}

/// Checks every claim against the round-start token and the received bytes,
/// then divides `total` among eligible nodes.
pub fn assess_round(
    round: u64,
    start: &TimestampToken,
    claims: &[Claim],
    authority: &VerifyingPublic,
    total: f64,
    decay: f64,
) -> Result<RoundRewardSheet> {
    let mut rows: Vec<RewardRow> = claims
        .iter()
        .map(|c| {
            let hash_ok = match (&c.end, &c.received_digest) {
                (Some(end), Some(d)) => end.verify(authority) && end.digest == *d,
                _ => false,
            };
            let sigma_d = c
                .end
                .as_ref()
                .and_then(|end| tsa::interval(start, end, authority).ok());
            let contribution = sigma_d.and_then(|s| contribution(s, decay).ok());
            RewardRow {
                node: c.node.clone(),
                sigma_d,
                contribution,
                reward: 0.0,
                hash_ok,
                eligible: hash_ok && c.honest && contribution.is_some(),
            }
        })
        .collect();
    let eligible: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].eligible).collect();
    let weights: Vec<f64> = eligible
        .iter()
        .map(|&i| rows[i].contribution.unwrap_or(0.0))
        .collect();
    let unallocated = match rewards(&weights, total) {
        Ok(r) => {
            for (&i, v) in eligible.iter().zip(r) {
                rows[i].reward = v;
            }
            0.0
        }
        Err(Error::NoEligibleNodes) => total,
        Err(e) => return Err(e),
    };
    Ok(RoundRewardSheet {
        round,
        total,
        unallocated,
        rows,
    })
}

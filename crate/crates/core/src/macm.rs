//! Model-auditing and compensation: the HE secret key is escrowed as sealed
//! Shamir shares; a supervisor reconstructs it to inspect stored submissions,
//! flags outliers and penalizes them.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::envelope::{self, Credential, CredentialRegistry, NodeSecret, Policy, SealedShare, VerifyingPublic};
use crate::error::{Error, Result};
use crate::ham::{Federation, NodeRegistry};
use crate::he::{FixedPointCodec, HeSecretKey};
use crate::shamir::{self, FieldParams, SecretShare};

/// One custodian's holding: a sealed share per limb.
#[derive(Debug, Clone)]
pub struct Custody {
    pub custodian: String,
    pub share_index: usize,
    pub limbs: Vec<SealedShare>,
}

#[derive(Debug, Clone)]
pub struct EscrowRecord {
    pub key_owner: String,
    pub params: FieldParams,
    pub byte_len: usize,
    pub custody: Vec<Custody>,
}

impl EscrowRecord {
    pub fn custodians(&self) -> Vec<&str> {
        self.custody.iter().map(|c| c.custodian.as_str()).collect()
    }
}

/// Custodian set for `owner`: the first supervisor, Gn, one random edge node
/// and `n − 3` random local nodes other than the owner (the owner is used only
/// when nobody else is left).
pub fn choose_custodians<R: Rng + ?Sized>(
    registry: &NodeRegistry,
    owner: &str,
    n: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    if n < 3 {
        return Err(Error::Parameter(format!(
            "custodian set needs Sn, Gn and an En, so n >= 3 (got {n})"
        )));
    }
    let mut out = vec![registry.supervisors[0].clone(), registry.global.clone()];
    out.push(
        registry
            .edges
            .choose(rng)
            .expect("registry has edge nodes")
            .clone(),
    );
    let mut others: Vec<&String> = registry.locals.iter().filter(|l| *l != owner).collect();
    others.shuffle(rng);
    if others.len() < n - 3 {
        others.extend(registry.locals.iter().filter(|l| *l == owner));
    }
    if others.len() < n - 3 {
        return Err(Error::Parameter(format!(
            "{} local nodes cannot supply {} custodians",
            registry.locals.len(),
            n - 3
        )));
    }
    out.extend(others.into_iter().take(n - 3).cloned());
    Ok(out)
}

/// Splits the canonical bytes of `sk` and seals every share under the
/// supervision policy, one custodian per share index.
pub fn register_key<R: Rng + ?Sized>(
    owner: &str,
    sk: &HeSecretKey,
    params: &FieldParams,
    custodians: &[String],
    credentials: &CredentialRegistry,
    rng: &mut R,
) -> Result<EscrowRecord> {
    if custodians.len() != params.share_count {
        return Err(Error::Parameter(format!(
            "{} custodians for {} shares",
            custodians.len(),
            params.share_count
        )));
    }
    if custodians.iter().collect::<BTreeSet<_>>().len() != custodians.len() {
        return Err(Error::Parameter("custodians must be distinct".into()));
    }
    let bytes = sk.to_canonical_string().into_bytes();
    let shares = shamir::split_bytes(&bytes, params, owner, rng)?;
    let policy = Policy::supervise();
    let custody = custodians
        .iter()
        .enumerate()
        .map(|(i, custodian)| {
            let limbs = shares
                .limbs
                .iter()
                .map(|limb| {
                    envelope::seal(limb[i].to_canonical_string().as_bytes(), &policy, credentials, rng)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Custody {
                custodian: custodian.clone(),
                share_index: i + 1,
                limbs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EscrowRecord {
        key_owner: owner.to_string(),
        params: params.clone(),
        byte_len: shares.byte_len,
        custody,
    })
}

/// Rebuilds the escrowed key from the shares `released` custodians hand to
/// the caller. Only a certified supervisor can open them.
pub fn reconstruct_key(
    record: &EscrowRecord,
    released: &[String],
    credential: &Credential,
    node_secret: &NodeSecret,
    authority: &VerifyingPublic,
) -> Result<HeSecretKey> {
    if !credential.verify(authority) {
        return Err(Error::CredentialInvalid);
    }
    if !Policy::supervise().satisfied(&credential.attributes) {
        return Err(Error::PolicyUnsatisfied);
    }
    let released: BTreeSet<&str> = released.iter().map(String::as_str).collect();
    let holdings: Vec<&Custody> = record
        .custody
        .iter()
        .filter(|c| released.contains(c.custodian.as_str()))
        .collect();
    let t = record.params.threshold;
    if holdings.len() < t {
        return Err(Error::ThresholdNotMet {
            needed: t,
            got: holdings.len(),
        });
    }
    let limb_count = holdings[0].limbs.len();
    let mut limbs: Vec<Vec<SecretShare>> = vec![Vec::with_capacity(t); limb_count];
    for holding in &holdings[..t] {
        if holding.limbs.len() != limb_count {
            return Err(Error::Format(format!("{} holds a short share set", holding.custodian)));
        }
        for (l, sealed) in holding.limbs.iter().enumerate() {
            let plain = envelope::open(sealed, credential, node_secret, authority)?;
            let text = String::from_utf8(plain).map_err(|e| Error::Format(e.to_string()))?;
            let share = SecretShare::from_canonical_str(&text)?;
            if share.key_owner != record.key_owner || share.limb_index != l {
                return Err(Error::Format(format!(
                    "share from {} belongs to {} limb {}",
                    holding.custodian, share.key_owner, share.limb_index
                )));
            }
            limbs[l].push(share);
        }
    }
    let bytes = shamir::reconstruct_bytes(&limbs, record.byte_len, &record.params)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
    HeSecretKey::from_canonical_str(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeInspection {
    pub node: String,
    /// SHA-256 of the decrypted parameter vector (little-endian f64s).
    pub fingerprint: String,
    /// Cosine similarity with the coordinate-wise median.
    pub score: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InspectionReport {
    pub round: u64,
    pub threshold: f64,
    pub nodes: Vec<NodeInspection>,
}

impl InspectionReport {
    pub fn flagged(&self) -> BTreeSet<String> {
        self.nodes
            .iter()
            .filter(|n| n.flagged)
            .map(|n| n.node.clone())
            .collect()
    }
}

pub fn fingerprint(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

pub fn coordinate_median(vectors: &[&[f64]]) -> Vec<f64> {
    let len = vectors.first().map_or(0, |v| v.len());
    let mut column = Vec::with_capacity(vectors.len());
    (0..len)
        .map(|j| {
            column.clear();
            column.extend(vectors.iter().map(|v| v[j]));
            column.sort_by(f64::total_cmp);
            let m = column.len();
            if m % 2 == 1 {
                column[m / 2]
            } else {
                (column[m / 2 - 1] + column[m / 2]) / 2.0
            }
        })
        .collect()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Scores each submitted parameter vector against the coordinate-wise median
/// of all of them and flags scores below `threshold`.
pub fn inspect(round: u64, submissions: &[(String, Vec<f64>)], threshold: f64) -> Result<InspectionReport> {
    let len = submissions.first().map_or(0, |s| s.1.len());
    if submissions.iter().any(|s| s.1.len() != len) {
        return Err(Error::ShapeMismatch("submissions differ in length".into()));
    }
    let views: Vec<&[f64]> = submissions.iter().map(|s| s.1.as_slice()).collect();
    let median = coordinate_median(&views);
    let nodes = submissions
        .iter()
        .map(|(node, v)| {
            let score = cosine(v, &median);
            NodeInspection {
                node: node.clone(),
                fingerprint: fingerprint(v),
                score,
                flagged: score < threshold,
            }
        })
        .collect();
    Ok(InspectionReport {
        round,
        threshold,
        nodes,
    })
}

/// Decrypts the ciphertexts the edge nodes retained for `nodes` in `round`
/// and runs [`inspect`] on them. With a `reference` (the round's starting
/// global model) the submissions are compared as updates relative to it.
pub fn inspect_round(
    federation: &Federation,
    sk: &HeSecretKey,
    round: u64,
    nodes: &[String],
    reference: Option<&[f64]>,
    threshold: f64,
) -> Result<InspectionReport> {
    let codec: &FixedPointCodec = federation.codec();
    let params = crate::fl::ModelParams::zeros(federation.dims())?.param_count();
    let submissions = nodes
        .iter()
        .map(|node| {
            let mut flat = Vec::new();
            for s in federation.stored_submission(round, node)? {
                flat.extend(codec.decode(&sk.decrypt(&s.cipher)?));
            }
            flat.truncate(params);
            if let Some(r) = reference {
                if r.len() != flat.len() {
                    return Err(Error::ShapeMismatch("reference model size differs".into()));
                }
                flat.iter_mut().zip(r).for_each(|(v, g)| *v -= g);
            }
            Ok((node.clone(), flat))
        })
        .collect::<Result<Vec<_>>>()?;
    inspect(round, &submissions, threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub node: String,
    pub stake: f64,
    pub offenses: u32,
    pub blacklisted: bool,
    pub last_flagged_round: Option<u64>,
}

/// Stake and offense record of every local node, in node order.
#[derive(Debug, Clone, PartialEq)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    repeat_threshold: u32,
}

impl Ledger {
    pub fn new(nodes: &[String], initial_stake: f64, repeat_threshold: u32) -> Self {
        Self {
            entries: nodes
                .iter()
                .map(|n| LedgerEntry {
                    node: n.clone(),
                    stake: initial_stake,
                    offenses: 0,
                    blacklisted: false,
                    last_flagged_round: None,
                })
                .collect(),
            repeat_threshold: repeat_threshold.max(1),
        }
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn get(&self, node: &str) -> Option<&LedgerEntry> {
        self.entries.iter().find(|e| e.node == node)
    }

    pub fn is_blacklisted(&self, node: &str) -> bool {
        self.get(node).is_some_and(|e| e.blacklisted)
    }
}

/// Instruction to the edge nodes to redo the round without `exclude`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PenaltyDirective {
    pub round: u64,
    pub exclude: BTreeSet<String>,
    pub newly_blacklisted: Vec<String>,
}

/// Zeroes the stake of every flagged node and blacklists repeat offenders.
pub fn penalize(ledger: &mut Ledger, report: &InspectionReport) -> PenaltyDirective {
    let flagged = report.flagged();
    let mut directive = PenaltyDirective {
        round: report.round,
        exclude: flagged.clone(),
        newly_blacklisted: Vec::new(),
    };
    for e in ledger.entries.iter_mut().filter(|e| flagged.contains(&e.node)) {
        e.stake = 0.0;
        e.offenses += 1;
        e.last_flagged_round = Some(report.round);
        if !e.blacklisted && e.offenses >= ledger.repeat_threshold {
            e.blacklisted = true;
            directive.newly_blacklisted.push(e.node.clone());
        }
    }
    directive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{Attributes, Authority};
    use crate::he::keygen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Setup {
        authority: Authority,
        registry: NodeRegistry,
        supervisor: (Credential, NodeSecret),
        trainer: (Credential, NodeSecret),
        sk: HeSecretKey,
    }

    fn attrs(role: &str) -> Attributes {
        Attributes::from([("role".to_string(), role.to_string())])
    }

    fn setup() -> Setup {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let authority = Authority::generate(&mut rng);
        let (pk, sk) = keygen(128, 4).unwrap();
        let mut creds = CredentialRegistry::new(authority.public());
        let sn_secret = NodeSecret::generate(&mut rng);
        let sn = authority.issue("Sn0", attrs("supervise"), sn_secret.public()).unwrap();
        creds.register(sn.clone()).unwrap();
        let ln_secret = NodeSecret::generate(&mut rng);
        let ln = authority.issue("Ln0", attrs("train"), ln_secret.public()).unwrap();
        creds.register(ln.clone()).unwrap();
        let registry = NodeRegistry::new(6, 2, 1, pk, creds).unwrap();
        Setup {
            authority,
            registry,
            supervisor: (sn, sn_secret),
            trainer: (ln, ln_secret),
            sk,
        }
    }

    fn escrow(s: &Setup) -> EscrowRecord {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let custodians = choose_custodians(&s.registry, "Ln0", 5, &mut rng).unwrap();
        let params = FieldParams::with_default_prime(3, 5).unwrap();
        register_key("Ln0", &s.sk, &params, &custodians, &s.registry.credentials, &mut rng).unwrap()
    }

    #[test]
    fn custodians_cover_each_tier() {
        let s = setup();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let c = choose_custodians(&s.registry, "Ln0", 5, &mut rng).unwrap();
        assert_eq!(c.len(), 5);
        assert_eq!(&c[..2], &["Sn0".to_string(), "Gn".to_string()]);
        assert!(c[2].starts_with("En"));
        assert!(c[3..].iter().all(|x| x.starts_with("Ln") && x != "Ln0"));
        assert_eq!(c.iter().collect::<BTreeSet<_>>().len(), 5);
        assert!(choose_custodians(&s.registry, "Ln0", 20, &mut rng).is_err());
    }

    #[test]
    fn supervisor_recovers_key_with_threshold() {
        let s = setup();
        let record = escrow(&s);
        let pub_auth = s.authority.public();
        let names: Vec<String> = record.custodians().iter().map(|c| c.to_string()).collect();
        for subset in [&names[..3], &names[2..], &names[..]] {
            let key = reconstruct_key(&record, subset, &s.supervisor.0, &s.supervisor.1, &pub_auth)
                .unwrap();
            assert_eq!(key, s.sk);
        }
        assert_eq!(
            reconstruct_key(&record, &names[..2], &s.supervisor.0, &s.supervisor.1, &pub_auth),
            Err(Error::ThresholdNotMet { needed: 3, got: 2 })
        );
    }

    #[test]
    fn trainer_cannot_reconstruct() {
        let s = setup();
        let record = escrow(&s);
        let names: Vec<String> = record.custodians().iter().map(|c| c.to_string()).collect();
        assert_eq!(
            reconstruct_key(&record, &names, &s.trainer.0, &s.trainer.1, &s.authority.public()),
            Err(Error::PolicyUnsatisfied)
        );
        // a trainer holding sealed shares still cannot open them
        assert_eq!(
            envelope::open(
                &record.custody[0].limbs[0],
                &s.trainer.0,
                &s.trainer.1,
                &s.authority.public()
            ),
            Err(Error::PolicyUnsatisfied)
        );
    }

    #[test]
    fn median_and_cosine() {
        let a = [1.0, 5.0, 3.0];
        let b = [2.0, 0.0, 3.0];
        let c = [9.0, 1.0, -3.0];
        assert_eq!(coordinate_median(&[&a, &b, &c]), vec![2.0, 1.0, 3.0]);
        assert_eq!(coordinate_median(&[&a, &b]), vec![1.5, 2.5, 3.0]);
        assert!((cosine(&[1.0, 0.0], &[0.0, 2.0])).abs() < 1e-15);
        assert!((cosine(&[1.0, 1.0], &[-2.0, -2.0]) + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn sign_flipped_submissions_are_flagged() {
        let base: Vec<f64> = (0..50).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let subs: Vec<(String, Vec<f64>)> = (0..10)
            .map(|i| {
                let v: Vec<f64> = base
                    .iter()
                    .enumerate()
                    .map(|(j, x)| x + 0.3 * (((i * 13 + j * 5) % 7) as f64 - 3.0))
                    .collect();
                let v = if i < 2 { v.iter().map(|x| -x).collect() } else { v };
                (format!("Ln{i}"), v)
            })
            .collect();
        let report = inspect(4, &subs, 0.0).unwrap();
        assert_eq!(report.flagged(), BTreeSet::from(["Ln0".to_string(), "Ln1".to_string()]));
        assert!(report.nodes[5].score > 0.9);
        assert_eq!(report.nodes[0].fingerprint, fingerprint(&subs[0].1));
    }

    #[test]
    fn penalties() {
        let nodes: Vec<String> = (0..3).map(|i| format!("Ln{i}")).collect();
        let report = |round, flagged: &[usize]| InspectionReport {
            round,
            threshold: 0.0,
            nodes: nodes
                .iter()
                .enumerate()
                .map(|(i, n)| NodeInspection {
                    node: n.clone(),
                    fingerprint: String::new(),
                    score: 0.0,
                    flagged: flagged.contains(&i),
                })
                .collect(),
        };
        let mut ledger = Ledger::new(&nodes, 10.0, 2);
        let d = penalize(&mut ledger, &report(1, &[1]));
        assert_eq!(d.exclude, BTreeSet::from(["Ln1".to_string()]));
        assert!(d.newly_blacklisted.is_empty());
        assert_eq!(ledger.get("Ln1").unwrap().stake, 0.0);
        assert_eq!(ledger.get("Ln0").unwrap().stake, 10.0);
        let d = penalize(&mut ledger, &report(2, &[1]));
        assert_eq!(d.newly_blacklisted, vec!["Ln1".to_string()]);
        assert!(ledger.is_blacklisted("Ln1"));
        let mut strict = Ledger::new(&nodes, 10.0, 1);
        penalize(&mut strict, &report(1, &[2]));
        assert!(strict.is_blacklisted("Ln2"));
    }
}

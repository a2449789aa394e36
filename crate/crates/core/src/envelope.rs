//! Policy-gated envelope encryption and signatures.
//!
//! An authority certifies each node's encryption key together with its
//! attribute set. Sealing encrypts a payload under a fresh content key and wraps
//! that key (X25519 + HKDF + ChaCha20-Poly1305) to every certified node whose
//! attributes satisfy the policy. The policy and recipient fingerprint travel in
//! clear and are bound into the payload's associated data.

use std::collections::BTreeMap;
use std::fmt;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use ed25519_dalek::{Signer, Verifier};
use hkdf::Hkdf;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Recorded in run metadata.
pub const SIGNATURE_SCHEME: &str = "ed25519";

pub type Attributes = BTreeMap<String, String>;

#[derive(Clone)]
pub struct SigningSecret(ed25519_dalek::SigningKey);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyingPublic(ed25519_dalek::VerifyingKey);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; 64]);

impl fmt::Debug for SigningSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningSecret(..)")
    }
}

impl SigningSecret {
    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self(ed25519_dalek::SigningKey::from_bytes(&seed))
    }

    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::from_seed(rng.gen())
    }

    pub fn public(&self) -> VerifyingPublic {
        VerifyingPublic(self.0.verifying_key())
    }
}

impl VerifyingPublic {
    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Result<Self> {
        ed25519_dalek::VerifyingKey::from_bytes(bytes)
            .map(Self)
            .map_err(|e| Error::Format(e.to_string()))
    }

    /// Short identifier: first 8 bytes of SHA-256 of the key, hex.
    pub fn key_id(&self) -> String {
        hex::encode(&Sha256::digest(self.to_bytes())[..8])
    }
}

impl Signature {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::Format(e.to_string()))?;
        let arr: [u8; 64] = bytes
            .try_into()
            .map_err(|b: Vec<u8>| Error::Format(format!("signature has {} bytes, want 64", b.len())))?;
        Ok(Self(arr))
    }
}

/// Deterministic Ed25519 signature.
pub fn sign(secret: &SigningSecret, message: &[u8]) -> Signature {
    Signature(secret.0.sign(message).to_bytes())
}

pub fn verify(public: &VerifyingPublic, message: &[u8], signature: &Signature) -> bool {
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    public.0.verify(message, &sig).is_ok()
}

/// A node's private decryption key.
#[derive(Clone)]
pub struct NodeSecret(x25519_dalek::StaticSecret);

impl fmt::Debug for NodeSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("NodeSecret(..)")
    }
}

impl NodeSecret {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let bytes: [u8; 32] = rng.gen();
        Self(x25519_dalek::StaticSecret::from(bytes))
    }

    pub fn public(&self) -> [u8; 32] {
        x25519_dalek::PublicKey::from(&self.0).to_bytes()
    }
}

/// The credential-issuing authority. Distinct from every protocol node.
#[derive(Debug, Clone)]
pub struct Authority {
    secret: SigningSecret,
}

impl Authority {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            secret: SigningSecret::generate(rng),
        }
    }

    pub fn public(&self) -> VerifyingPublic {
        self.secret.public()
    }

    pub fn issue(
        &self,
        node_id: &str,
        attributes: Attributes,
        node_public: [u8; 32],
    ) -> Result<Credential> {
        issue_credential(&self.secret, node_id, attributes, node_public)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credential {
    pub node_id: String,
    pub attributes: Attributes,
    pub node_public: [u8; 32],
    pub signature: Signature,
}

fn well_formed(token: &str) -> bool {
    !token.is_empty() && !token.contains(['=', ';', '\n'])
}

fn canonical_attributes(attrs: &Attributes) -> String {
    attrs
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn credential_message(node_id: &str, attrs: &Attributes, node_public: &[u8; 32]) -> Vec<u8> {
    format!(
        "flssm-credential\n{node_id}\n{}\n{}",
        canonical_attributes(attrs),
        hex::encode(node_public)
    )
    .into_bytes()
}

pub fn issue_credential(
    authority: &SigningSecret,
    node_id: &str,
    attributes: Attributes,
    node_public: [u8; 32],
) -> Result<Credential> {
    if !well_formed(node_id) {
        return Err(Error::Parameter(format!("malformed node id `{node_id}`")));
    }
    if attributes.is_empty() {
        return Err(Error::Parameter("attribute set is empty".into()));
    }
    if let Some((k, v)) = attributes.iter().find(|(k, v)| !well_formed(k) || !well_formed(v)) {
        return Err(Error::Parameter(format!("malformed attribute `{k}={v}`")));
    }
    let signature = sign(authority, &credential_message(node_id, &attributes, &node_public));
    Ok(Credential {
        node_id: node_id.to_string(),
        attributes,
        node_public,
        signature,
    })
}

impl Credential {
    pub fn verify(&self, authority: &VerifyingPublic) -> bool {
        !self.attributes.is_empty()
            && verify(
                authority,
                &credential_message(&self.node_id, &self.attributes, &self.node_public),
                &self.signature,
            )
    }

    pub fn to_canonical_string(&self) -> String {
        toml::to_string(&CredentialRepr {
            node_id: self.node_id.clone(),
            attributes: canonical_attributes(&self.attributes),
            node_public: hex::encode(self.node_public),
            signature: self.signature.to_hex(),
        })
        .expect("credential serializes")
    }

    pub fn from_canonical_str(s: &str) -> Result<Self> {
        let r: CredentialRepr = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            node_id: r.node_id,
            attributes: parse_attributes(&r.attributes)?,
            node_public: hex32(&r.node_public)?,
            signature: Signature::from_hex(&r.signature)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CredentialRepr {
    node_id: String,
    attributes: String,
    node_public: String,
    signature: String,
}

fn parse_attributes(s: &str) -> Result<Attributes> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(|pair| {
            pair.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("bad attribute `{pair}`")))
        })
        .collect()
}

fn hex32(s: &str) -> Result<[u8; 32]> {
    hex::decode(s)
        .map_err(|e| Error::Format(e.to_string()))?
        .try_into()
        .map_err(|_| Error::Format(format!("`{s}` is not 32 bytes of hex")))
}

/// Conjunction of required attribute pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy {
    required: Attributes,
}

impl Policy {
    pub fn new(required: Attributes) -> Result<Self> {
        if required.is_empty() {
            return Err(Error::Parameter("policy must require at least one attribute".into()));
        }
        Ok(Self { required })
    }

    pub fn require(key: &str, value: &str) -> Self {
        Self {
            required: Attributes::from([(key.to_string(), value.to_string())]),
        }
    }

    pub fn supervise() -> Self {
        Self::require("role", "supervise")
    }

    pub fn satisfied(&self, attrs: &Attributes) -> bool {
        self.required.iter().all(|(k, v)| attrs.get(k) == Some(v))
    }

    pub fn canonical(&self) -> String {
        canonical_attributes(&self.required)
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::new(parse_attributes(s)?)
    }
}

/// Read-only directory of certified credentials.
#[derive(Debug, Clone)]
pub struct CredentialRegistry {
    authority: VerifyingPublic,
    credentials: Vec<Credential>,
}

impl CredentialRegistry {
    pub fn new(authority: VerifyingPublic) -> Self {
        Self {
            authority,
            credentials: Vec::new(),
        }
    }

    pub fn register(&mut self, credential: Credential) -> Result<()> {
        if !credential.verify(&self.authority) {
            return Err(Error::CredentialInvalid);
        }
        self.credentials.retain(|c| c.node_id != credential.node_id);
        self.credentials.push(credential);
        Ok(())
    }

    pub fn authority(&self) -> &VerifyingPublic {
        &self.authority
    }

    pub fn get(&self, node_id: &str) -> Option<&Credential> {
        self.credentials.iter().find(|c| c.node_id == node_id)
    }

    pub fn credentials(&self) -> &[Credential] {
        &self.credentials
    }

    pub fn eligible(&self, policy: &Policy) -> Vec<&Credential> {
        let mut v: Vec<_> = self
            .credentials
            .iter()
            .filter(|c| policy.satisfied(&c.attributes) && c.verify(&self.authority))
            .collect();
        v.sort_by(|a, b| a.node_id.cmp(&b.node_id));
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WrappedKey {
    pub node_id: String,
    pub ephemeral_public: [u8; 32],
    /// Encrypted content key followed by its 16-byte tag.
    pub wrapped: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedShare {
    pub policy: Policy,
    pub recipient_fingerprint: [u8; 32],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; 16],
    pub nonce: [u8; 12],
    pub recipients: Vec<WrappedKey>,
}

fn recipient_fingerprint(recipients: &[&Credential]) -> [u8; 32] {
    let mut h = Sha256::new();
    for c in recipients {
        h.update((c.node_id.len() as u64).to_le_bytes());
        h.update(c.node_id.as_bytes());
        h.update(c.node_public);
    }
    h.finalize().into()
}

fn payload_aad(policy: &Policy, fingerprint: &[u8; 32]) -> Vec<u8> {
    format!("flssm-seal\n{}\n{}", policy.canonical(), hex::encode(fingerprint)).into_bytes()
}

fn wrap_key(shared: &[u8], ephemeral: &[u8; 32], recipient: &[u8; 32]) -> ChaCha20Poly1305 {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(ephemeral);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut okm = [0u8; 32];
    hk.expand(b"flssm-wrap", &mut okm).expect("32 bytes is a valid HKDF length");
    ChaCha20Poly1305::new(Key::from_slice(&okm))
}

fn wrap_aad(node_id: &str, fingerprint: &[u8; 32]) -> Vec<u8> {
    let mut v = node_id.as_bytes().to_vec();
    v.push(b'\n');
    v.extend_from_slice(fingerprint);
    v
}

/// Seals `payload` so that only certified holders of attributes satisfying
/// `policy` can open it.
pub fn seal<R: Rng + ?Sized>(
    payload: &[u8],
    policy: &Policy,
    registry: &CredentialRegistry,
    rng: &mut R,
) -> Result<SealedShare> {
    let recipients = registry.eligible(policy);
    if recipients.is_empty() {
        return Err(Error::NoEligibleRecipient);
    }
    let fingerprint = recipient_fingerprint(&recipients);
    let content_key: [u8; 32] = rng.gen();
    let nonce: [u8; 12] = rng.gen();
    let mut ciphertext = payload.to_vec();
    let tag = ChaCha20Poly1305::new(Key::from_slice(&content_key))
        .encrypt_in_place_detached(
            Nonce::from_slice(&nonce),
            &payload_aad(policy, &fingerprint),
            &mut ciphertext,
        )
        .map_err(|_| Error::AuthFailure)?;
    let wrapped = recipients
        .iter()
        .map(|c| {
            let eph = NodeSecret::generate(rng);
            let eph_pub = eph.public();
            let shared = eph
                .0
                .diffie_hellman(&x25519_dalek::PublicKey::from(c.node_public));
            let mut buf = content_key.to_vec();
            let tag = wrap_key(shared.as_bytes(), &eph_pub, &c.node_public)
                .encrypt_in_place_detached(
                    Nonce::from_slice(&[0u8; 12]),
                    &wrap_aad(&c.node_id, &fingerprint),
                    &mut buf,
                )
                .map_err(|_| Error::AuthFailure)?;
            buf.extend_from_slice(&tag);
            Ok(WrappedKey {
                node_id: c.node_id.clone(),
                ephemeral_public: eph_pub,
                wrapped: buf,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SealedShare {
        policy: policy.clone(),
        recipient_fingerprint: fingerprint,
        ciphertext,
        tag: tag.into(),
        nonce,
        recipients: wrapped,
    })
}

/// Opens a sealed payload with a certified credential and the matching node secret.
pub fn open(
    sealed: &SealedShare,
    credential: &Credential,
    node_secret: &NodeSecret,
    authority: &VerifyingPublic,
) -> Result<Vec<u8>> {
    if !credential.verify(authority) {
        return Err(Error::CredentialInvalid);
    }
    if !sealed.policy.satisfied(&credential.attributes) {
        return Err(Error::PolicyUnsatisfied);
    }
    if node_secret.public() != credential.node_public {
        return Err(Error::AuthFailure);
    }
    let entry = sealed
        .recipients
        .iter()
        .find(|w| w.node_id == credential.node_id)
        .ok_or(Error::AuthFailure)?;
    if entry.wrapped.len() != 48 {
        return Err(Error::AuthFailure);
    }
    let shared = node_secret
        .0
        .diffie_hellman(&x25519_dalek::PublicKey::from(entry.ephemeral_public));
    let (key_ct, key_tag) = entry.wrapped.split_at(32);
    let mut content_key = key_ct.to_vec();
    wrap_key(shared.as_bytes(), &entry.ephemeral_public, &credential.node_public)
        .decrypt_in_place_detached(
            Nonce::from_slice(&[0u8; 12]),
            &wrap_aad(&credential.node_id, &sealed.recipient_fingerprint),
            &mut content_key,
            Tag::from_slice(key_tag),
        )
        .map_err(|_| Error::AuthFailure)?;
    let mut payload = sealed.ciphertext.clone();
    ChaCha20Poly1305::new(Key::from_slice(&content_key))
        .decrypt_in_place_detached(
            Nonce::from_slice(&sealed.nonce),
            &payload_aad(&sealed.policy, &sealed.recipient_fingerprint),
            &mut payload,
            Tag::from_slice(&sealed.tag),
        )
        .map_err(|_| Error::AuthFailure)?;
    Ok(payload)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SealedRepr {
    policy: String,
    recipient_fingerprint: String,
    ciphertext: String,
    tag: String,
    nonce: String,
    recipients: Vec<WrappedRepr>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WrappedRepr {
    node_id: String,
    ephemeral_public: String,
    wrapped: String,
}

impl SealedShare {
    pub fn to_canonical_string(&self) -> String {
        toml::to_string(&SealedRepr {
            policy: self.policy.canonical(),
            recipient_fingerprint: hex::encode(self.recipient_fingerprint),
            ciphertext: hex::encode(&self.ciphertext),
            tag: hex::encode(self.tag),
            nonce: hex::encode(self.nonce),
            recipients: self
                .recipients
                .iter()
                .map(|w| WrappedRepr {
                    node_id: w.node_id.clone(),
                    ephemeral_public: hex::encode(w.ephemeral_public),
                    wrapped: hex::encode(&w.wrapped),
                })
                .collect(),
        })
        .expect("sealed share serializes")
    }

    pub fn from_canonical_str(s: &str) -> Result<Self> {
        let r: SealedRepr = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let hexv = |s: &str| hex::decode(s).map_err(|e| Error::Format(e.to_string()));
        Ok(Self {
            policy: Policy::parse(&r.policy)?,
            recipient_fingerprint: hex32(&r.recipient_fingerprint)?,
            ciphertext: hexv(&r.ciphertext)?,
            tag: hexv(&r.tag)?
                .try_into()
                .map_err(|_| Error::Format("tag is not 16 bytes".into()))?,
            nonce: hexv(&r.nonce)?
                .try_into()
                .map_err(|_| Error::Format("nonce is not 12 bytes".into()))?,
            recipients: r
                .recipients
                .into_iter()
                .map(|w| {
                    Ok(WrappedKey {
                        node_id: w.node_id,
                        ephemeral_public: hex32(&w.ephemeral_public)?,
                        wrapped: hexv(&w.wrapped)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        authority: Authority,
        registry: CredentialRegistry,
        secrets: BTreeMap<String, NodeSecret>,
    }

    fn attrs(role: &str) -> Attributes {
        Attributes::from([("role".to_string(), role.to_string())])
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let authority = Authority::generate(&mut rng);
        let mut registry = CredentialRegistry::new(authority.public());
        let mut secrets = BTreeMap::new();
        for (id, role) in [("Sn0", "supervise"), ("Ln0", "train"), ("En0", "edge"), ("Gn", "global")] {
            let s = NodeSecret::generate(&mut rng);
            registry
                .register(authority.issue(id, attrs(role), s.public()).unwrap())
                .unwrap();
            secrets.insert(id.to_string(), s);
        }
        Fixture {
            authority,
            registry,
            secrets,
        }
    }

    #[test]
    fn credentials_verify_and_bind_attributes() {
        let f = fixture();
        let sn = f.registry.get("Sn0").unwrap();
        assert!(sn.verify(&f.authority.public()));
        let mut forged = sn.clone();
        forged.attributes.insert("role".into(), "train".into());
        assert!(!forged.verify(&f.authority.public()));
        let ln = f.registry.get("Ln0").unwrap();
        assert!(ln.verify(&f.authority.public()));
        assert!(!Policy::supervise().satisfied(&ln.attributes));
    }

    #[test]
    fn issuance_is_deterministic() {
        let f = fixture();
        let sn = f.registry.get("Sn0").unwrap();
        let again = f
            .authority
            .issue("Sn0", attrs("supervise"), sn.node_public)
            .unwrap();
        assert_eq!(&again, sn);
    }

    #[test]
    fn issuance_rejects_malformed_input() {
        let f = fixture();
        assert!(matches!(
            f.authority.issue("Sn0", Attributes::new(), [0; 32]),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            f.authority.issue("a=b", attrs("x"), [0; 32]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn seal_and_open() {
        let f = fixture();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let sealed = seal(b"share bytes", &Policy::supervise(), &f.registry, &mut rng).unwrap();
        let auth = f.authority.public();
        let got = open(&sealed, f.registry.get("Sn0").unwrap(), &f.secrets["Sn0"], &auth).unwrap();
        assert_eq!(got, b"share bytes");
        assert_eq!(
            open(&sealed, f.registry.get("Ln0").unwrap(), &f.secrets["Ln0"], &auth),
            Err(Error::PolicyUnsatisfied)
        );
        let mut bad = sealed.clone();
        bad.ciphertext[0] ^= 1;
        assert_eq!(
            open(&bad, f.registry.get("Sn0").unwrap(), &f.secrets["Sn0"], &auth),
            Err(Error::AuthFailure)
        );
    }

    #[test]
    fn unsigned_credential_is_rejected() {
        let f = fixture();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let sealed = seal(b"x", &Policy::supervise(), &f.registry, &mut rng).unwrap();
        let rogue_authority = Authority::generate(&mut rng);
        let s = &f.secrets["Sn0"];
        let rogue = rogue_authority.issue("Sn0", attrs("supervise"), s.public()).unwrap();
        assert_eq!(
            open(&sealed, &rogue, s, &f.authority.public()),
            Err(Error::CredentialInvalid)
        );
    }

    #[test]
    fn sealing_without_eligible_recipient_fails() {
        let f = fixture();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        assert_eq!(
            seal(b"x", &Policy::require("role", "auditor"), &f.registry, &mut rng),
            Err(Error::NoEligibleRecipient)
        );
    }

    #[test]
    fn wrong_node_secret_fails_authentication() {
        let f = fixture();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let sealed = seal(b"x", &Policy::supervise(), &f.registry, &mut rng).unwrap();
        assert_eq!(
            open(&sealed, f.registry.get("Sn0").unwrap(), &f.secrets["Ln0"], &f.authority.public()),
            Err(Error::AuthFailure)
        );
    }

    #[test]
    fn signatures() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = SigningSecret::generate(&mut rng);
        let b = SigningSecret::generate(&mut rng);
        let sig = sign(&a, b"message");
        assert!(verify(&a.public(), b"message", &sig));
        assert!(!verify(&a.public(), b"messagf", &sig));
        assert!(!verify(&b.public(), b"message", &sig));
        assert_eq!(sign(&a, b"message"), sig);
        assert!(matches!(Signature::from_hex("abcd"), Err(Error::Format(_))));
        assert!(matches!(Signature::from_hex("zz"), Err(Error::Format(_))));
        assert_eq!(Signature::from_hex(&sig.to_hex()).unwrap(), sig);
    }

    #[test]
    fn text_forms_round_trip() {
        let f = fixture();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let sealed = seal(b"abc", &Policy::supervise(), &f.registry, &mut rng).unwrap();
        let text = sealed.to_canonical_string();
        assert!(text.starts_with("policy = \"role=supervise\"\nrecipient_fingerprint = "));
        assert_eq!(SealedShare::from_canonical_str(&text).unwrap(), sealed);
        let cred = f.registry.get("Sn0").unwrap();
        assert_eq!(
            &Credential::from_canonical_str(&cred.to_canonical_string()).unwrap(),
            cred
        );
    }
}

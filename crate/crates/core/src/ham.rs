//! Hierarchical homomorphic aggregation.
//!
//! Local nodes (Ln) train, flatten, shard and encrypt their models; edge nodes
//! (En) each average one shard across all submissions; the global node (Gn)
//! orders the partial results into the encrypted global model and broadcasts it.
//! Nodes communicate only through [`Network`], which keeps per-link FIFO order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use num_rational::Ratio;
use rand::RngCore;
use rayon::prelude::*;

use crate::envelope::CredentialRegistry;
use crate::error::{Error, Result};
use crate::fl::{self, Dataset, ModelParams, ShardedModel, TrainConfig};
use crate::he::{self, CipherVector, FixedPointCodec, HePublicKey, HeSecretKey};
use crate::seed;

pub const GLOBAL_ID: &str = "Gn";

pub fn local_id(i: usize) -> String {
    format!("Ln{i}")
}

pub fn edge_id(i: usize) -> String {
    format!("En{i}")
}

pub fn supervisor_id(i: usize) -> String {
    format!("Sn{i}")
}

/// Static membership of the federation.
#[derive(Debug, Clone)]
pub struct NodeRegistry {
    pub locals: Vec<String>,
    pub edges: Vec<String>,
    pub global: String,
    pub supervisors: Vec<String>,
    pub he_public: HePublicKey,
    pub credentials: CredentialRegistry,
}

impl NodeRegistry {
    pub fn new(
        kappa: usize,
        rho: usize,
        supervisors: usize,
        he_public: HePublicKey,
        credentials: CredentialRegistry,
    ) -> Result<Self> {
        if kappa == 0 || rho == 0 || supervisors == 0 {
            return Err(Error::Parameter(format!(
                "need at least one Ln, En and Sn (got {kappa}, {rho}, {supervisors})"
            )));
        }
        Ok(Self {
            locals: (0..kappa).map(local_id).collect(),
            edges: (0..rho).map(edge_id).collect(),
            global: GLOBAL_ID.to_string(),
            supervisors: (0..supervisors).map(supervisor_id).collect(),
            he_public,
            credentials,
        })
    }

    /// ϱ: number of shards, equal to the number of edge nodes.
    pub fn rho(&self) -> usize {
        self.edges.len()
    }

    /// Edge node responsible for shard `shard` (1-based) in round `round`:
    /// index `(shard + round) mod ϱ`.
    pub fn edge_for(&self, round: u64, shard: usize) -> usize {
        ((shard as u64 + round) % self.rho() as u64) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MessageKind {
    GlobalModel,
    ShardSubmission,
    PartialModel,
    GlobalCipher,
    InspectRequest,
    KeyShareRequest,
    KeyShareResponse,
}

/// Immutable message; the payload encoding is determined by `kind`.
#[derive(Debug, Clone)]
pub struct Message {
    pub kind: MessageKind,
    pub round: u64,
    pub sender: String,
    pub receiver: String,
    pub payload: Arc<[u8]>,
    pub latency_ms: u64,
}

/// In-process links with FIFO delivery per (sender, receiver) pair.
#[derive(Debug, Default)]
pub struct Network {
    queues: BTreeMap<(String, String), VecDeque<Message>>,
    sent: u64,
    bytes: u64,
}

impl Network {
    pub fn send(&mut self, msg: Message) {
        self.sent += 1;
        self.bytes += msg.payload.len() as u64;
        self.queues
            .entry((msg.sender.clone(), msg.receiver.clone()))
            .or_default()
            .push_back(msg);
    }

    /// Drains everything addressed to `receiver`, senders in id order.
    pub fn deliver(&mut self, receiver: &str) -> Vec<Message> {
        let mut out = Vec::new();
        for ((_, r), q) in self.queues.iter_mut() {
            if r == receiver {
                out.extend(q.drain(..));
            }
        }
        self.queues.retain(|_, q| !q.is_empty());
        out
    }

    pub fn pending(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn messages_sent(&self) -> u64 {
        self.sent
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes
    }
}

fn decode_cipher(payload: &[u8]) -> Result<CipherVector> {
    let text = std::str::from_utf8(payload).map_err(|e| Error::Format(e.to_string()))?;
    CipherVector::from_canonical_str(text)
}

fn encode_cipher(c: &CipherVector) -> Arc<[u8]> {
    Arc::from(c.to_canonical_string().into_bytes())
}

/// Encoding of a sequence of ciphertext vectors as one payload: each vector's
/// canonical text followed by a line `---`.
pub fn encode_cipher_sequence(items: &[CipherVector]) -> Vec<u8> {
    let mut out = Vec::new();
    for c in items {
        out.extend_from_slice(c.to_canonical_string().as_bytes());
        out.extend_from_slice(b"---\n");
    }
    out
}

pub fn decode_cipher_sequence(payload: &[u8]) -> Result<Vec<CipherVector>> {
    let text = std::str::from_utf8(payload).map_err(|e| Error::Format(e.to_string()))?;
    text.split("---\n")
        .filter(|s| !s.is_empty())
        .map(CipherVector::from_canonical_str)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HamConfig {
    pub rho: usize,
    pub scale_bits: u32,
    pub factor_bits: u32,
    pub train: TrainConfig,
    /// Run local training and edge aggregation on worker threads.
    pub threaded: bool,
    /// Rounds of ciphertext history each edge node keeps for inspection.
    pub retention_rounds: u64,
}

impl Default for HamConfig {
    fn default() -> Self {
        Self {
            rho: 3,
            scale_bits: he::DEFAULT_SCALE_BITS,
            factor_bits: he::DEFAULT_FACTOR_BITS,
            train: TrainConfig::default(),
            threaded: true,
            retention_rounds: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalNode {
    pub id: String,
    pub index: usize,
    pub data: Dataset,
    pub malicious: bool,
}

/// What a local node produced in one round.
#[derive(Debug, Clone)]
pub struct Submission {
    pub node: String,
    pub index: usize,
    /// Plaintext of what was encrypted; kept by the harness for oracle checks only.
    pub model: ModelParams,
    /// Canonical bytes of each encrypted shard, in shard order.
    pub payloads: Vec<Arc<[u8]>>,
    /// SHA-256 over the concatenated shard payloads.
    pub digest: [u8; 32],
}

pub fn encrypted_model_digest<'a>(payloads: impl IntoIterator<Item = &'a [u8]>) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in payloads {
        h.update(p);
    }
    h.finalize().into()
}

impl LocalNode {
    pub fn train_and_encrypt(
        &self,
        global: &ModelParams,
        round: u64,
        pk: &HePublicKey,
        codec: &FixedPointCodec,
        cfg: &HamConfig,
        run_seed: u64,
    ) -> Result<Submission> {
        let train_seed =
            seed::stream(run_seed, "local-train", &[round, self.index as u64]).next_u64();
        let trained = fl::local_train(global, &self.data, &cfg.train, train_seed)?;
        let model = if self.malicious {
            fl::sign_flip_attack(&trained)
        } else {
            trained
        };
        let sharded = fl::flatten_shard(&model, cfg.rho)?;
        let mut rng = seed::stream(run_seed, "encrypt", &[round, self.index as u64]);
        let payloads = sharded
            .shards
            .iter()
            .enumerate()
            .map(|(i, shard)| {
                let c = pk.encrypt(&codec.encode(shard)?, i + 1, &mut rng)?;
                Ok(encode_cipher(&c))
            })
            .collect::<Result<Vec<_>>>()?;
        let digest = encrypted_model_digest(payloads.iter().map(|p| &p[..]));
        Ok(Submission {
            node: self.id.clone(),
            index: self.index,
            model,
            payloads,
            digest,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StoredShard {
    pub bytes: Arc<[u8]>,
    pub cipher: CipherVector,
}

/// Edge aggregator: receives one shard index per round from every Ln.
#[derive(Debug, Clone)]
pub struct EdgeNode {
    pub id: String,
    pub index: usize,
    /// round → shard → node → ciphertext
    store: BTreeMap<u64, BTreeMap<usize, BTreeMap<String, StoredShard>>>,
}

impl EdgeNode {
    pub fn new(index: usize) -> Self {
        Self {
            id: edge_id(index),
            index,
            store: BTreeMap::new(),
        }
    }

    pub fn receive(&mut self, msg: &Message) -> Result<()> {
        if msg.kind != MessageKind::ShardSubmission {
            return Err(Error::Format(format!("{} cannot handle {:?}", self.id, msg.kind)));
        }
        let cipher = decode_cipher(&msg.payload)?;
        self.store
            .entry(msg.round)
            .or_default()
            .entry(cipher.shard_index)
            .or_default()
            .insert(
                msg.sender.clone(),
                StoredShard {
                    bytes: msg.payload.clone(),
                    cipher,
                },
            );
        Ok(())
    }

    pub fn shards_held(&self, round: u64) -> Vec<usize> {
        self.store
            .get(&round)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn stored(&self, round: u64, shard: usize, node: &str) -> Option<&StoredShard> {
        self.store.get(&round)?.get(&shard)?.get(node)
    }

    pub fn submitters(&self, round: u64, shard: usize) -> Vec<String> {
        self.store
            .get(&round)
            .and_then(|m| m.get(&shard))
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Averages the stored submissions for `(round, shard)`, skipping `exclude`.
    pub fn aggregate(
        &self,
        pk: &HePublicKey,
        round: u64,
        shard: usize,
        exclude: &BTreeSet<String>,
        factor_bits: u32,
    ) -> Result<EdgeAggregate> {
        let started = Instant::now();
        let included: Vec<&CipherVector> = self
            .store
            .get(&round)
            .and_then(|m| m.get(&shard))
            .map(|m| {
                m.iter()
                    .filter(|(node, _)| !exclude.contains(*node))
                    .map(|(_, s)| &s.cipher)
                    .collect()
            })
            .unwrap_or_default();
        let (cipher, additions) = edge_aggregate(pk, &included, factor_bits)?;
        Ok(EdgeAggregate {
            edge: self.index,
            shard,
            scale_ops: cipher.logical_length,
            cipher,
            additions,
            kappa_effective: included.len(),
            elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Drops rounds older than `keep` rounds before `current`.
    pub fn prune(&mut self, current: u64, keep: u64) {
        self.store.retain(|&r, _| r + keep > current);
    }
}

#[derive(Debug, Clone)]
pub struct EdgeAggregate {
    pub edge: usize,
    pub shard: usize,
    pub cipher: CipherVector,
    pub additions: usize,
    pub scale_ops: usize,
    pub kappa_effective: usize,
    pub elapsed_ms: f64,
}

/// `[pm] = (1/κ_eff) ⊠ Σ⊞ shards`. Returns the partial model and the number of
/// element-wise ciphertext additions performed.
pub fn edge_aggregate(
    pk: &HePublicKey,
    shards: &[&CipherVector],
    factor_bits: u32,
) -> Result<(CipherVector, usize)> {
    let (first, rest) = shards
        .split_first()
        .ok_or_else(|| Error::ShardSetIncomplete("no submissions for this shard".into()))?;
    let mut acc = (*first).clone();
    let mut additions = 0;
    for s in rest {
        pk.add_assign(&mut acc, s)?;
        additions += s.logical_length;
    }
    let kappa = shards.len() as i64;
    Ok((pk.scale_plain(&acc, Ratio::new(1, kappa), factor_bits)?, additions))
}

/// Deterministic cost model: element additions one edge node performs.
pub fn cost_model_additions(kappa_effective: usize, shard_length: usize) -> usize {
    kappa_effective.saturating_sub(1) * shard_length
}

#[derive(Debug, Clone)]
pub struct EdgePhase {
    pub partials: Vec<EdgeAggregate>,
    pub wall_ms: f64,
}

/// Timing summary of one aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationMetrics {
    pub per_edge_ms: Vec<f64>,
    pub wall_ms: f64,
    /// Ciphertext additions performed by each edge node.
    pub additions_per_edge: Vec<usize>,
    pub scale_ops_per_edge: Vec<usize>,
    pub kappa_effective: usize,
}

pub fn measure_aggregation(phase: &EdgePhase) -> AggregationMetrics {
    let mut per_edge: Vec<_> = phase.partials.iter().collect();
    per_edge.sort_by_key(|p| p.edge);
    AggregationMetrics {
        per_edge_ms: per_edge.iter().map(|p| p.elapsed_ms).collect(),
        wall_ms: phase.wall_ms,
        additions_per_edge: per_edge.iter().map(|p| p.additions).collect(),
        scale_ops_per_edge: per_edge.iter().map(|p| p.scale_ops).collect(),
        kappa_effective: phase
            .partials
            .iter()
            .map(|p| p.kappa_effective)
            .min()
            .unwrap_or(0),
    }
}

/// The encrypted global model as broadcast by Gn.
#[derive(Debug, Clone)]
pub struct GlobalCipher {
    pub round: u64,
    pub shards: Vec<CipherVector>,
    pub bytes: Arc<[u8]>,
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    pub round: u64,
    pub global: GlobalCipher,
    pub model: ModelParams,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub submissions: Vec<Submission>,
    pub aggregation: AggregationMetrics,
    pub train_ms: f64,
    pub decrypt_ms: f64,
}

/// All protocol nodes plus the links between them.
#[derive(Debug)]
pub struct Federation {
    pub registry: NodeRegistry,
    pub config: HamConfig,
    pub locals: Vec<LocalNode>,
    pub edges: Vec<EdgeNode>,
    pub network: Network,
    codec: FixedPointCodec,
    dims: Vec<usize>,
    seed: u64,
}

impl Federation {
    pub fn new(
        registry: NodeRegistry,
        config: HamConfig,
        local_data: Vec<Dataset>,
        malicious: &BTreeSet<usize>,
        dims: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if config.rho != registry.rho() {
            return Err(Error::Parameter(format!(
                "config rho {} but {} edge nodes",
                config.rho,
                registry.rho()
            )));
        }
        if local_data.len() != registry.locals.len() {
            return Err(Error::Parameter(format!(
                "{} datasets for {} local nodes",
                local_data.len(),
                registry.locals.len()
            )));
        }
        let codec = FixedPointCodec::for_key(&registry.he_public, config.scale_bits)?;
        let locals = local_data
            .into_iter()
            .enumerate()
            .map(|(i, data)| LocalNode {
                id: local_id(i),
                index: i,
                data,
                malicious: malicious.contains(&i),
            })
            .collect();
        let edges = (0..registry.rho()).map(EdgeNode::new).collect();
        Ok(Self {
            registry,
            config,
            locals,
            edges,
            network: Network::default(),
            codec,
            dims,
            seed,
        })
    }

    pub fn codec(&self) -> &FixedPointCodec {
        &self.codec
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Local training and encryption for the given node indices.
    pub fn local_phase(
        &self,
        round: u64,
        global: &ModelParams,
        participants: &[usize],
    ) -> Result<Vec<Submission>> {
        let work = |&i: &usize| self.train_one(round, global, i);
        if self.config.threaded {
            participants.par_iter().map(work).collect()
        } else {
            participants.iter().map(work).collect()
        }
    }

    pub fn train_one(&self, round: u64, global: &ModelParams, node: usize) -> Result<Submission> {
        self.locals[node].train_and_encrypt(
            global,
            round,
            &self.registry.he_public,
            &self.codec,
            &self.config,
            self.seed,
        )
    }

    /// Sends each encrypted shard to the edge node assigned for this round.
    pub fn submit(&mut self, round: u64, sub: &Submission) {
        for (i, payload) in sub.payloads.iter().enumerate() {
            let edge = self.registry.edge_for(round, i + 1);
            self.network.send(Message {
                kind: MessageKind::ShardSubmission,
                round,
                sender: sub.node.clone(),
                receiver: self.registry.edges[edge].clone(),
                payload: payload.clone(),
                latency_ms: 0,
            });
        }
    }

    pub fn deliver_to_edges(&mut self) -> Result<()> {
        for edge in &mut self.edges {
            for msg in self.network.deliver(&edge.id) {
                edge.receive(&msg)?;
            }
        }
        Ok(())
    }

    /// Every edge node averages the shard it is responsible for this round, in
    /// parallel when threaded, then sends the partial model to Gn.
    pub fn edge_phase(&mut self, round: u64, exclude: &BTreeSet<String>) -> Result<EdgePhase> {
        let rho = self.registry.rho();
        let jobs: Vec<(usize, usize)> = (1..=rho)
            .map(|shard| (self.registry.edge_for(round, shard), shard))
            .collect();
        let pk = &self.registry.he_public;
        let factor_bits = self.config.factor_bits;
        let edges = &self.edges;
        let started = Instant::now();
        let results: Vec<Result<EdgeAggregate>> = if self.config.threaded {
            std::thread::scope(|s| {
                let handles: Vec<_> = jobs
                    .iter()
                    .map(|&(e, shard)| {
                        s.spawn(move || edges[e].aggregate(pk, round, shard, exclude, factor_bits))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("edge aggregation thread panicked"))
                    .collect()
            })
        } else {
            jobs.iter()
                .map(|&(e, shard)| edges[e].aggregate(pk, round, shard, exclude, factor_bits))
                .collect()
        };
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let partials = results.into_iter().collect::<Result<Vec<_>>>()?;
        for p in &partials {
            self.network.send(Message {
                kind: MessageKind::PartialModel,
                round,
                sender: self.edges[p.edge].id.clone(),
                receiver: self.registry.global.clone(),
                payload: encode_cipher(&p.cipher),
                latency_ms: 0,
            });
        }
        Ok(EdgePhase { partials, wall_ms })
    }

    /// Gn concatenates the partial models in shard order and broadcasts the
    /// result to the given local nodes (none when `recipients` is empty).
    pub fn global_phase(&mut self, round: u64, recipients: &[usize]) -> Result<GlobalCipher> {
        let partials = self
            .network
            .deliver(&self.registry.global)
            .into_iter()
            .filter(|m| m.kind == MessageKind::PartialModel && m.round == round)
            .map(|m| decode_cipher(&m.payload))
            .collect::<Result<Vec<_>>>()?;
        if partials.len() != self.registry.rho() {
            return Err(Error::ShardSetIncomplete(format!(
                "Gn received {} of {} partial models",
                partials.len(),
                self.registry.rho()
            )));
        }
        let shards = he::concat(partials)?;
        let global = GlobalCipher {
            round,
            bytes: Arc::from(encode_cipher_sequence(&shards)),
            shards,
        };
        self.broadcast(&global, recipients);
        Ok(global)
    }

    pub fn broadcast(&mut self, global: &GlobalCipher, recipients: &[usize]) {
        for &i in recipients {
            self.network.send(Message {
                kind: MessageKind::GlobalCipher,
                round: global.round,
                sender: self.registry.global.clone(),
                receiver: self.locals[i].id.clone(),
                payload: global.bytes.clone(),
                latency_ms: 0,
            });
        }
    }

    /// Local decryption of `[gm]`. Every Ln holds the federation key and
    /// receives the same bytes, so one decryption stands for all of them.
    pub fn local_decryption(&mut self, sk: &HeSecretKey) -> Result<Option<ModelParams>> {
        let mut payload: Option<Arc<[u8]>> = None;
        for node in &self.locals {
            for msg in self.network.deliver(&node.id) {
                if msg.kind != MessageKind::GlobalCipher {
                    continue;
                }
                match &payload {
                    Some(p) if p[..] != msg.payload[..] => {
                        return Err(Error::Format("local nodes received different [gm]".into()))
                    }
                    _ => payload = Some(msg.payload.clone()),
                }
            }
        }
        payload
            .map(|p| self.decrypt_global(sk, &decode_cipher_sequence(&p)?))
            .transpose()
    }

    pub fn decrypt_global(&self, sk: &HeSecretKey, shards: &[CipherVector]) -> Result<ModelParams> {
        decrypt_model(sk, &self.codec, shards, &self.dims)
    }

    /// Ciphertext shards a node submitted in `round`, gathered from the edge
    /// nodes that hold them, in shard order.
    pub fn stored_submission(&self, round: u64, node: &str) -> Result<Vec<StoredShard>> {
        (1..=self.registry.rho())
            .map(|shard| {
                let edge = &self.edges[self.registry.edge_for(round, shard)];
                edge.stored(round, shard, node).cloned().ok_or_else(|| {
                    Error::ShardSetIncomplete(format!(
                        "{} holds no shard {shard} from {node} for round {round}",
                        edge.id
                    ))
                })
            })
            .collect()
    }

    /// Nodes whose submission reached every edge node this round.
    pub fn complete_submitters(&self, round: u64) -> BTreeSet<String> {
        let mut sets = (1..=self.registry.rho()).map(|shard| {
            self.edges[self.registry.edge_for(round, shard)]
                .submitters(round, shard)
                .into_iter()
                .collect::<BTreeSet<_>>()
        });
        let first = sets.next().unwrap_or_default();
        sets.fold(first, |acc, s| acc.intersection(&s).cloned().collect())
    }

    pub fn prune(&mut self, round: u64) {
        let keep = self.config.retention_rounds.max(1);
        for e in &mut self.edges {
            e.prune(round, keep);
        }
    }

    /// One full round without inspection or incentives:
    /// local training → edge aggregation → global aggregation → local decryption.
    pub fn run_round(
        &mut self,
        round: u64,
        global: &ModelParams,
        participants: &[usize],
        sk: &HeSecretKey,
        test: Option<&Dataset>,
    ) -> Result<RoundResult> {
        let t0 = Instant::now();
        let submissions = self.local_phase(round, global, participants)?;
        let train_ms = t0.elapsed().as_secs_f64() * 1e3;
        for s in &submissions {
            self.submit(round, s);
        }
        self.deliver_to_edges()?;
        let phase = self.edge_phase(round, &BTreeSet::new())?;
        let global = self.global_phase(round, participants)?;
        let t1 = Instant::now();
        let model = self
            .local_decryption(sk)?
            .ok_or_else(|| Error::ShardSetIncomplete("no local node received [gm]".into()))?;
        let decrypt_ms = t1.elapsed().as_secs_f64() * 1e3;
        let (accuracy, loss) = match test {
            Some(t) => {
                let (a, l) = fl::evaluate(&model, t)?;
                (Some(a), Some(l))
            }
            None => (None, None),
        };
        self.prune(round);
        Ok(RoundResult {
            round,
            global,
            model,
            accuracy,
            loss,
            submissions,
            aggregation: measure_aggregation(&phase),
            train_ms,
            decrypt_ms,
        })
    }
}

/// Decrypts and decodes shard ciphertexts, drops the padding and rebuilds the model.
pub fn decrypt_model(
    sk: &HeSecretKey,
    codec: &FixedPointCodec,
    shards: &[CipherVector],
    dims: &[usize],
) -> Result<ModelParams> {
    let values = shards
        .iter()
        .map(|c| Ok(codec.decode(&sk.decrypt(c)?)))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = values.iter().map(Vec::len).sum();
    let expected = ModelParams::zeros(dims)?.param_count();
    if total < expected {
        return Err(Error::ShapeMismatch(format!(
            "{total} decrypted values for {expected} parameters"
        )));
    }
    fl::unflatten(&ShardedModel {
        shards: values,
        original_length: expected,
        pad_length: total - expected,
        dims: dims.to_vec(),
    })
}

/// Plaintext FedAvg: element-wise mean of the given models.
pub fn fedavg(models: &[&ModelParams]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::Parameter("FedAvg of no models".into()))?;
    let mut acc = vec![0.0; first.param_count()];
    for m in models {
        for (a, v) in acc.iter_mut().zip(m.flatten()) {
            *a += v;
        }
    }
    let k = models.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    ModelParams::from_flat(&first.dims(), &acc)
}

pub fn max_abs_diff(a: &ModelParams, b: &ModelParams) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::Authority;
    use crate::fl::{synthetic_blobs, BlobSpec};
    use crate::he::keygen;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn federation(kappa: usize, rho: usize, malicious: &[usize]) -> (Federation, HeSecretKey, Dataset) {
        let (pk, sk) = keygen(128, 5).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let creds = CredentialRegistry::new(Authority::generate(&mut rng).public());
        let registry = NodeRegistry::new(kappa, rho, 1, pk, creds).unwrap();
        let (train, test) = synthetic_blobs(
            &BlobSpec {
                train: 40 * kappa,
                test: 100,
                spread: 2.0,
                ..BlobSpec::default()
            },
            3,
        )
        .unwrap();
        let parts = fl::dirichlet_partition(&train, kappa, 0.5, 3).unwrap();
        let data = parts.assignment.iter().map(|ix| train.subset(ix)).collect();
        let cfg = HamConfig {
            rho,
            train: TrainConfig {
                epochs: 1,
                lr: 0.05,
                batch_size: 16,
            },
            ..HamConfig::default()
        };
        let fed = Federation::new(
            registry,
            cfg,
            data,
            &malicious.iter().copied().collect(),
            vec![16, 8, 4],
            9,
        )
        .unwrap();
        (fed, sk, test)
    }

    #[test]
    fn edge_assignment_rotates() {
        let (fed, _, _) = federation(2, 3, &[]);
        let r = &fed.registry;
        assert_eq!((1..=3).map(|s| r.edge_for(0, s)).collect::<Vec<_>>(), vec![1, 2, 0]);
        assert_eq!((1..=3).map(|s| r.edge_for(1, s)).collect::<Vec<_>>(), vec![2, 0, 1]);
        for round in 0..5 {
            let mut seen: Vec<_> = (1..=3).map(|s| r.edge_for(round, s)).collect();
            seen.sort_unstable();
            assert_eq!(seen, vec![0, 1, 2]);
        }
    }

    #[test]
    fn encrypted_round_matches_plaintext_fedavg() {
        let (mut fed, sk, test) = federation(10, 3, &[]);
        let global = ModelParams::init(&[16, 8, 4], 1).unwrap();
        let all: Vec<usize> = (0..10).collect();
        let res = fed.run_round(1, &global, &all, &sk, Some(&test)).unwrap();
        let refs: Vec<_> = res.submissions.iter().map(|s| &s.model).collect();
        let oracle = fedavg(&refs).unwrap();
        assert!(max_abs_diff(&res.model, &oracle) <= 1e-3);
        assert_eq!(res.global.shards.len(), 3);
        assert_eq!(
            res.global.shards.iter().map(|s| s.shard_index).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        // 16·8 + 8 + 8·4 + 4 = 172 parameters → shards of 58
        assert_eq!(res.aggregation.additions_per_edge, vec![9 * 58; 3]);
        assert_eq!(res.aggregation.kappa_effective, 10);
        assert!(res.accuracy.is_some());
        assert_eq!(fed.network.pending(), 0);
    }

    #[test]
    fn single_node_single_shard_is_identity() {
        let (mut fed, sk, _) = federation(1, 1, &[]);
        let global = ModelParams::init(&[16, 8, 4], 2).unwrap();
        let res = fed.run_round(1, &global, &[0], &sk, None).unwrap();
        assert!(max_abs_diff(&res.model, &res.submissions[0].model) <= 2f64.powi(-16));
    }

    #[test]
    fn threaded_and_sequential_agree() {
        let global = ModelParams::init(&[16, 8, 4], 1).unwrap();
        let (mut a, sk, _) = federation(4, 3, &[1]);
        let (mut b, _, _) = federation(4, 3, &[1]);
        b.config.threaded = false;
        let ra = a.run_round(1, &global, &[0, 1, 2, 3], &sk, None).unwrap();
        let rb = b.run_round(1, &global, &[0, 1, 2, 3], &sk, None).unwrap();
        assert_eq!(ra.global.bytes, rb.global.bytes);
        assert_eq!(ra.model, rb.model);
    }

    #[test]
    fn exclusion_shrinks_the_divisor() {
        let (mut fed, sk, _) = federation(10, 3, &[]);
        let global = ModelParams::init(&[16, 8, 4], 1).unwrap();
        let all: Vec<usize> = (0..10).collect();
        let subs = fed.local_phase(1, &global, &all).unwrap();
        for s in &subs {
            fed.submit(1, s);
        }
        fed.deliver_to_edges().unwrap();
        let exclude: BTreeSet<String> = [local_id(4)].into();
        let phase = fed.edge_phase(1, &exclude).unwrap();
        assert!(phase.partials.iter().all(|p| p.kappa_effective == 9));
        let g = fed.global_phase(1, &all).unwrap();
        let model = fed.decrypt_global(&sk, &g.shards).unwrap();
        let refs: Vec<_> = subs.iter().filter(|s| s.index != 4).map(|s| &s.model).collect();
        assert!(max_abs_diff(&model, &fedavg(&refs).unwrap()) <= 1e-3);
    }

    #[test]
    fn edge_aggregate_of_constant_shards() {
        let (pk, sk) = keygen(128, 5).unwrap();
        let codec = FixedPointCodec::for_key(&pk, 16).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let shards: Vec<_> = (0..10)
            .map(|_| pk.encrypt(&codec.encode(&[1.0; 5]).unwrap(), 2, &mut rng).unwrap())
            .collect();
        let refs: Vec<_> = shards.iter().collect();
        let (avg, adds) = edge_aggregate(&pk, &refs, 32).unwrap();
        assert_eq!(adds, cost_model_additions(10, 5));
        for v in codec.decode(&sk.decrypt(&avg).unwrap()) {
            assert!((v - 1.0).abs() <= 2.0 / 65536.0);
        }
        let (one, adds) = edge_aggregate(&pk, &refs[..1], 32).unwrap();
        assert_eq!(adds, 0);
        assert_eq!(sk.decrypt(&one).unwrap(), sk.decrypt(&shards[0]).unwrap());
        assert!(matches!(edge_aggregate(&pk, &[], 32), Err(Error::ShardSetIncomplete(_))));
        let other = pk.encrypt(&codec.encode(&[1.0; 5]).unwrap(), 3, &mut rng).unwrap();
        assert!(matches!(
            edge_aggregate(&pk, &[&shards[0], &other], 32),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn cost_model_arithmetic() {
        assert_eq!(cost_model_additions(10, 1200usize.div_ceil(3)), 3600);
        assert_eq!(cost_model_additions(10, 1200), 10800);
        assert_eq!(cost_model_additions(1, 50), 0);
    }

    #[test]
    fn missing_submissions_abort_the_round() {
        let (mut fed, _, _) = federation(3, 3, &[]);
        assert!(matches!(
            fed.edge_phase(1, &BTreeSet::new()),
            Err(Error::ShardSetIncomplete(_))
        ));
    }

    #[test]
    fn network_is_fifo_per_link() {
        let mut net = Network::default();
        for (i, sender) in ["b", "a", "b"].iter().enumerate() {
            net.send(Message {
                kind: MessageKind::InspectRequest,
                round: i as u64,
                sender: sender.to_string(),
                receiver: "z".into(),
                payload: Arc::from(vec![i as u8]),
                latency_ms: 0,
            });
        }
        let got: Vec<_> = net.deliver("z").iter().map(|m| (m.sender.clone(), m.round)).collect();
        assert_eq!(got, vec![("a".into(), 1), ("b".into(), 0), ("b".into(), 2)]);
        assert_eq!(net.pending(), 0);
    }

    #[test]
    fn retention_window() {
        let (mut fed, sk, _) = federation(2, 1, &[]);
        let global = ModelParams::init(&[16, 8, 4], 1).unwrap();
        fed.config.retention_rounds = 2;
        for r in 1..=4 {
            fed.run_round(r, &global, &[0, 1], &sk, None).unwrap();
        }
        assert!(fed.stored_submission(2, "Ln0").is_err());
        assert_eq!(fed.stored_submission(3, "Ln0").unwrap().len(), 1);
        assert_eq!(fed.stored_submission(4, "Ln1").unwrap().len(), 1);
    }
}

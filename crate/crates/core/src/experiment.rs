//! Experiment orchestration: owns the clock and the round barrier, drives HAM,
//! MACM and IMTTI and writes the per-run tables.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::config::{ClockMode, DatasetSource, DetectionBasis, ExperimentConfig, InspectionTrigger};
use crate::envelope::{Attributes, Authority, Credential, CredentialRegistry, NodeSecret, SigningSecret};
use crate::error::{Error, Result};
use crate::fl::{self, BlobSpec, Dataset, ModelParams, TrainConfig};
use crate::ham::{self, AggregationMetrics, EdgePhase, Federation, GlobalCipher, HamConfig, NodeRegistry, Submission};
use crate::he::{self, HeSecretKey};
use crate::imtti::{self, Claim, RoundRewardSheet};
use crate::macm::{self, EscrowRecord, InspectionReport, Ledger, PenaltyDirective};
use crate::seed;
use crate::shamir::{self, FieldParams};
use crate::tsa::{Clock, TimestampAuthority, TimestampToken, VirtualClock};

pub const ROUNDS_HEADER: [&str; 7] = [
    "round",
    "accuracy",
    "loss",
    "wall_agg_ms",
    "cost_additions",
    "rho",
    "kappa_effective",
];
pub const REWARDS_HEADER: [&str; 7] = [
    "round",
    "node_id",
    "sigma_d_s",
    "contribution",
    "reward",
    "hash_ok",
    "stake_after",
];
pub const LEDGER_HEADER: [&str; 4] = ["node_id", "stake", "cum_reward", "blacklisted"];
pub const INSPECTIONS_HEADER: [&str; 5] = ["round", "node_id", "score", "flagged", "action"];

/// Everything observable about one completed round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub round: u64,
    pub accuracy: f64,
    pub loss: f64,
    /// Modeled aggregation time in virtual-clock mode, measured otherwise.
    pub wall_agg_ms: f64,
    pub measured_agg_ms: f64,
    /// Additions per edge node in the final aggregation.
    pub cost_additions: usize,
    pub kappa_effective: usize,
    /// Max-abs distance between the decrypted global model and plaintext FedAvg
    /// of the submissions it included.
    pub oracle_error: f64,
    pub participants: Vec<String>,
    /// Plaintext of the submissions averaged into the final global model.
    pub included: Vec<(String, ModelParams)>,
    pub late: Vec<String>,
    pub inspection: Option<InspectionReport>,
    pub penalty: Option<PenaltyDirective>,
    pub rewards: RoundRewardSheet,
    pub aggregation: AggregationMetrics,
}

struct Supervisor {
    credential: Credential,
    secret: NodeSecret,
}

/// A configured federation stepping through rounds.
pub struct Simulation {
    config: ExperimentConfig,
    federation: Federation,
    test: Dataset,
    sk: HeSecretKey,
    tsa: TimestampAuthority,
    virtual_clock: Option<VirtualClock>,
    authority: Authority,
    supervisor: Supervisor,
    escrow: Vec<EscrowRecord>,
    ledger: Ledger,
    cum_reward: Vec<f64>,
    sample_cost_ms: Vec<f64>,
    global: ModelParams,
    global_bytes: Vec<u8>,
    prev_accuracy: Option<f64>,
    round: u64,
    malicious: BTreeSet<String>,
    pool: rayon::ThreadPool,
}

fn role(r: &str) -> Attributes {
    Attributes::from([("role".to_string(), r.to_string())])
}

fn model_bytes(m: &ModelParams) -> Vec<u8> {
    m.flatten().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetSource::Synthetic => fl::synthetic_blobs(
            &BlobSpec {
                classes: cfg.classes,
                dim: cfg.features,
                train: cfg.train_samples,
                test: cfg.test_samples,
                spread: cfg.blob_spread,
                noise: cfg.blob_noise,
            },
            cfg.seed,
        ),
        DatasetSource::Csv => {
            let train = fl::load_csv(Path::new(&cfg.train_csv), cfg.classes)?;
            let test = fl::load_csv(Path::new(&cfg.test_csv), cfg.classes)?;
            if train.dim() != cfg.features || test.dim() != cfg.features {
                return Err(Error::Config {
                    key: "features".into(),
                    message: format!(
                        "csv has {} / {} feature columns, config says {}",
                        train.dim(),
                        test.dim(),
                        cfg.features
                    ),
                });
            }
            Ok((train, test))
        }
    }
}

impl Simulation {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let (train, test) = load_data(&cfg)?;
        let partition = fl::dirichlet_partition(&train, cfg.kappa, cfg.alpha, cfg.seed)?;
        let local_data: Vec<Dataset> = partition.assignment.iter().map(|ix| train.subset(ix)).collect();

        let key_seed = seed::stream(cfg.seed, "he-keygen", &[]).gen();
        let (pk, sk) = he::keygen_with_backend(cfg.he_key_bits, key_seed, cfg.he_backend)?;

        let mut rng = seed::stream(cfg.seed, "identities", &[]);
        let authority = Authority::generate(&mut rng);
        let mut credentials = CredentialRegistry::new(authority.public());
        let mut enroll = |id: &str, r: &str, rng: &mut rand_chacha::ChaCha20Rng| -> Result<(Credential, NodeSecret)> {
            let secret = NodeSecret::generate(rng);
            let cred = authority.issue(id, role(r), secret.public())?;
            credentials.register(cred.clone())?;
            Ok((cred, secret))
        };
        let mut supervisors = Vec::new();
        for i in 0..cfg.supervisors {
            supervisors.push(enroll(&ham::supervisor_id(i), "supervise", &mut rng)?);
        }
        enroll(ham::GLOBAL_ID, "global", &mut rng)?;
        for i in 0..cfg.rho {
            enroll(&ham::edge_id(i), "edge", &mut rng)?;
        }
        for i in 0..cfg.kappa {
            enroll(&ham::local_id(i), "train", &mut rng)?;
        }
        // first responder
        let (credential, secret) = supervisors.swap_remove(0);

        let registry = NodeRegistry::new(cfg.kappa, cfg.rho, cfg.supervisors, pk, credentials)?;
        let malicious_ix: BTreeSet<usize> = (0..cfg.malicious_count()).collect();
        let dims = cfg.dims();
        let param_count = ModelParams::zeros(&dims)?.param_count();
        if cfg.rho > param_count {
            return Err(Error::Config {
                key: "rho".into(),
                message: format!("{} shards for {param_count} parameters", cfg.rho),
            });
        }
        let ham_cfg = HamConfig {
            rho: cfg.rho,
            scale_bits: cfg.scale_bits,
            factor_bits: cfg.factor_bits,
            train: TrainConfig {
                epochs: cfg.epochs,
                lr: cfg.lr,
                batch_size: cfg.batch_size,
            },
            threaded: cfg.threaded,
            retention_rounds: cfg.retention_rounds,
        };
        let federation = Federation::new(registry, ham_cfg, local_data, &malicious_ix, dims.clone(), cfg.seed)?;

        let prime = if cfg.shamir_prime.is_empty() {
            he::parse_hex(shamir::DEFAULT_PRIME_HEX)?
        } else {
            he::parse_hex(&cfg.shamir_prime)?
        };
        let field = FieldParams::new(prime, cfg.shamir_threshold, cfg.shamir_shares)?;
        let mut escrow_rng = seed::stream(cfg.seed, "escrow", &[]);
        let escrow = federation
            .registry
            .locals
            .iter()
            .map(|owner| {
                let custodians = macm::choose_custodians(&federation.registry, owner, field.share_count, &mut escrow_rng)?;
                macm::register_key(owner, &sk, &field, &custodians, &federation.registry.credentials, &mut escrow_rng)
            })
            .collect::<Result<Vec<_>>>()?;

        let (clock, virtual_clock) = match cfg.clock {
            ClockMode::Virtual => {
                let c = VirtualClock::starting_at(0);
                (Clock::Virtual(c.clone()), Some(c))
            }
            ClockMode::Wall => (Clock::Wall, None),
        };
        let tsa_key: [u8; 32] = seed::stream(cfg.seed, "tsa-key", &[]).gen();
        let tsa = TimestampAuthority::new(SigningSecret::from_seed(tsa_key), clock);

        let mut cost_rng = seed::stream(cfg.seed, "sample-cost", &[]);
        let sample_cost_ms = (0..cfg.kappa)
            .map(|_| {
                if cfg.sample_cost_ms_max > cfg.sample_cost_ms_min {
                    cost_rng.gen_range(cfg.sample_cost_ms_min..cfg.sample_cost_ms_max)
                } else {
                    cfg.sample_cost_ms_min
                }
            })
            .collect();

        let global = ModelParams::init(&dims, cfg.seed)?;
        let global_bytes = model_bytes(&global);
        let ledger = Ledger::new(&federation.registry.locals, cfg.initial_stake, cfg.repeat_offense_threshold);
        let malicious = malicious_ix.iter().map(|&i| ham::local_id(i)).collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Parameter(e.to_string()))?;
        Ok(Self {
            cum_reward: vec![0.0; cfg.kappa],
            config: cfg,
            federation,
            test,
            sk,
            tsa,
            virtual_clock,
            authority,
            supervisor: Supervisor { credential, secret },
            escrow,
            ledger,
            sample_cost_ms,
            global,
            global_bytes,
            prev_accuracy: None,
            round: 0,
            malicious,
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn federation(&self) -> &Federation {
        &self.federation
    }

    pub fn global_model(&self) -> &ModelParams {
        &self.global
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn cumulative_rewards(&self) -> &[f64] {
        &self.cum_reward
    }

    pub fn malicious_nodes(&self) -> &BTreeSet<String> {
        &self.malicious
    }

    pub fn timestamp_authority(&self) -> &TimestampAuthority {
        &self.tsa
    }

    pub fn escrow_records(&self) -> &[EscrowRecord] {
        &self.escrow
    }

    pub fn rounds_completed(&self) -> u64 {
        self.round
    }

    fn train_and_stamp(&self, round: u64, participants: &[usize]) -> Result<Vec<(Submission, Option<TimestampToken>)>> {
        let wall = self.virtual_clock.is_none();
        let work = |&i: &usize| -> Result<(Submission, Option<TimestampToken>)> {
            let sub = self.federation.train_one(round, &self.global, i)?;
            let token = if wall {
                Some(imtti::close_local(&sub.digest, &self.tsa)?)
            } else {
                None
            };
            Ok((sub, token))
        };
        self.pool.install(|| {
            if self.config.threaded {
                participants.par_iter().map(work).collect()
            } else {
                participants.iter().map(work).collect()
            }
        })
    }

    fn modeled_agg_ms(&self, phase: &EdgePhase) -> f64 {
        phase
            .partials
            .iter()
            .map(|p| {
                (p.additions as f64 * self.config.virtual_add_us + p.scale_ops as f64 * self.config.virtual_scale_us) / 1000.0
            })
            .fold(0.0, f64::max)
    }

    fn should_inspect(&self, candidate_accuracy: f64) -> bool {
        if !self.config.inspection_enabled {
            return false;
        }
        match self.config.inspection_trigger {
            InspectionTrigger::EveryRound => true,
            InspectionTrigger::AccuracyDrop => self
                .prev_accuracy
                .is_some_and(|prev| prev - candidate_accuracy > self.config.accuracy_drop_threshold),
        }
    }

    /// Supervisor recovers the federation key from the custodians of `owner`.
    fn recover_key(&self, owner: usize) -> Result<HeSecretKey> {
        let record = &self.escrow[owner];
        let released: Vec<String> = record.custodians().iter().map(|c| c.to_string()).collect();
        let key = macm::reconstruct_key(
            record,
            &released,
            &self.supervisor.credential,
            &self.supervisor.secret,
            &self.authority.public(),
        )?;
        if key.n() != self.federation.registry.he_public.n() {
            return Err(Error::Format("recovered key does not match the federation key".into()));
        }
        Ok(key)
    }

    /// Runs one full round.
    pub fn step(&mut self) -> Result<RoundOutcome> {
        let round = self.round + 1;
        let cfg = self.config.clone();
        let kappa = cfg.kappa;
        let participants: Vec<usize> = (0..kappa)
            .filter(|&i| !self.ledger.is_blacklisted(&ham::local_id(i)))
            .collect();
        if participants.is_empty() {
            return Err(Error::ShardSetIncomplete(format!("round {round}: every local node is blacklisted")));
        }
        if let Some(c) = &self.virtual_clock {
            c.advance_by(1);
        }
        let start = imtti::open_round(&self.global_bytes, &self.tsa)?;

        let trained = self.train_and_stamp(round, &participants)?;
        let deadline_ms = (cfg.deadline_s * 1000.0).round() as i64;
        let mut on_time: Vec<(Submission, TimestampToken)> = Vec::new();
        let mut late = Vec::new();
        match &self.virtual_clock {
            Some(clock) => {
                let mut finishing: Vec<(i64, Submission)> = trained
                    .into_iter()
                    .map(|(s, _)| {
                        let samples = self.federation.locals[s.index].data.len() as f64;
                        let cost = (samples * cfg.epochs as f64 * self.sample_cost_ms[s.index]).round() as i64;
                        (start.time_ms + cost, s)
                    })
                    .collect();
                finishing.sort_by_key(|(t, s)| (*t, s.index));
                for (t, s) in finishing {
                    if deadline_ms > 0 && t - start.time_ms > deadline_ms {
                        late.push(s.node.clone());
                        continue;
                    }
                    clock.advance_to(t);
                    let token = imtti::close_local(&s.digest, &self.tsa)?;
                    on_time.push((s, token));
                }
            }
            None => {
                for (s, token) in trained {
                    let token = token.expect("wall mode stamps every submission");
                    if deadline_ms > 0 && token.time_ms - start.time_ms > deadline_ms {
                        late.push(s.node.clone());
                    } else {
                        on_time.push((s, token));
                    }
                }
            }
        }
        on_time.sort_by_key(|(s, _)| s.index);
        if on_time.is_empty() {
            return Err(Error::ShardSetIncomplete(format!("round {round}: no submission met the deadline")));
        }

        for (s, _) in &on_time {
            self.federation.submit(round, s);
        }
        self.federation.deliver_to_edges()?;
        let mut phase = self.federation.edge_phase(round, &BTreeSet::new())?;
        let mut measured_ms = phase.wall_ms;
        let mut modeled_ms = self.modeled_agg_ms(&phase);
        let mut global = self.federation.global_phase(round, &[])?;
        let candidate = self.federation.decrypt_global(&self.sk, &global.shards)?;
        let (candidate_acc, _) = fl::evaluate(&candidate, &self.test)?;

        let mut inspection = None;
        let mut penalty = None;
        let mut excluded = BTreeSet::new();
        if self.should_inspect(candidate_acc) {
            let key = self.recover_key(on_time[0].0.index)?;
            let nodes: Vec<String> = on_time.iter().map(|(s, _)| s.node.clone()).collect();
            let reference = match cfg.detection_basis {
                DetectionBasis::Update => Some(self.global.flatten()),
                DetectionBasis::Parameters => None,
            };
            let report = macm::inspect_round(
                &self.federation,
                &key,
                round,
                &nodes,
                reference.as_deref(),
                cfg.detection_threshold,
            )?;
            let directive = macm::penalize(&mut self.ledger, &report);
            if !directive.exclude.is_empty() && directive.exclude.len() < on_time.len() {
                phase = self.federation.edge_phase(round, &directive.exclude)?;
                measured_ms += phase.wall_ms;
                modeled_ms += self.modeled_agg_ms(&phase);
                global = self.federation.global_phase(round, &[])?;
                excluded = directive.exclude.clone();
            }
            inspection = Some(report);
            penalty = Some(directive);
        }

        let included: Vec<(String, ModelParams)> = on_time
            .iter()
            .filter(|(s, _)| !excluded.contains(&s.node))
            .map(|(s, _)| (s.node.clone(), s.model.clone()))
            .collect();
        let oracle = ham::fedavg(&included.iter().map(|(_, m)| m).collect::<Vec<_>>())?;

        let recipients: Vec<usize> = (0..kappa)
            .filter(|&i| !self.ledger.is_blacklisted(&ham::local_id(i)))
            .collect();
        let model = self.deliver_global(&global, &recipients)?;
        let oracle_error = ham::max_abs_diff(&model, &oracle);
        let (accuracy, loss) = fl::evaluate(&model, &self.test)?;

        let flagged = inspection.as_ref().map(InspectionReport::flagged).unwrap_or_default();
        let claims = (0..kappa)
            .map(|i| {
                let node = ham::local_id(i);
                let entry = on_time.iter().find(|(s, _)| s.index == i);
                let received = entry
                    .map(|_| {
                        self.federation
                            .stored_submission(round, &node)
                            .map(|shards| ham::encrypted_model_digest(shards.iter().map(|s| &s.bytes[..])))
                    })
                    .transpose()?;
                Ok(Claim {
                    end: entry.map(|(_, t)| t.clone()),
                    received_digest: received,
                    honest: !flagged.contains(&node),
                    node,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rewards = imtti::assess_round(
            round,
            &start,
            &claims,
            &self.tsa.public(),
            cfg.reward_total,
            cfg.contribution_decay,
        )?;
        for (c, row) in self.cum_reward.iter_mut().zip(&rewards.rows) {
            *c += row.reward;
        }

        if let Some(c) = &self.virtual_clock {
            c.advance_by(modeled_ms.ceil() as i64);
        }
        self.federation.prune(round);
        let aggregation = ham::measure_aggregation(&phase);
        let outcome = RoundOutcome {
            round,
            accuracy,
            loss,
            wall_agg_ms: if self.virtual_clock.is_some() { modeled_ms } else { measured_ms },
            measured_agg_ms: measured_ms,
            cost_additions: aggregation.additions_per_edge.iter().copied().max().unwrap_or(0),
            kappa_effective: aggregation.kappa_effective,
            oracle_error,
            participants: on_time.iter().map(|(s, _)| s.node.clone()).collect(),
            included,
            late,
            inspection,
            penalty,
            rewards,
            aggregation,
        };
        self.global = model;
        self.global_bytes = global.bytes.to_vec();
        self.prev_accuracy = Some(accuracy);
        self.round = round;
        Ok(outcome)
    }

    /// Gn broadcasts `[gm]`; the local nodes decrypt it.
    fn deliver_global(&mut self, global: &GlobalCipher, recipients: &[usize]) -> Result<ModelParams> {
        self.federation.broadcast(global, recipients);
        self.federation
            .local_decryption(&self.sk)?
            .ok_or_else(|| Error::ShardSetIncomplete("no local node received [gm]".into()))
    }
}

/// Output locations of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsBundle {
    pub run_dir: PathBuf,
    pub rounds_csv: PathBuf,
    pub rewards_csv: PathBuf,
    pub ledger_csv: PathBuf,
    pub inspections_csv: PathBuf,
    pub config_echo: PathBuf,
    pub log: PathBuf,
    pub seed: u64,
    pub code_version: String,
    pub rounds_completed: u64,
}

/// `$FLSSM_OUT` if set, else `out`.
pub fn output_root() -> PathBuf {
    std::env::var_os("FLSSM_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

struct Writers {
    rounds: csv::Writer<File>,
    rewards: csv::Writer<File>,
    ledger: csv::Writer<File>,
    inspections: csv::Writer<File>,
    log: File,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

impl Writers {
    fn create(bundle: &MetricsBundle) -> Result<Self> {
        let open = |p: &Path, header: &[&str]| -> Result<csv::Writer<File>> {
            let mut w = csv::Writer::from_path(p).map_err(csv_err)?;
            w.write_record(header).map_err(csv_err)?;
            Ok(w)
        };
        Ok(Self {
            rounds: open(&bundle.rounds_csv, &ROUNDS_HEADER)?,
            rewards: open(&bundle.rewards_csv, &REWARDS_HEADER)?,
            ledger: open(&bundle.ledger_csv, &LEDGER_HEADER)?,
            inspections: open(&bundle.inspections_csv, &INSPECTIONS_HEADER)?,
            log: File::create(&bundle.log)?,
        })
    }

    fn record(&mut self, sim: &Simulation, o: &RoundOutcome) -> Result<()> {
        let cfg = sim.config();
        self.rounds
            .write_record([
                o.round.to_string(),
                fmt_f(o.accuracy),
                fmt_f(o.loss),
                format!("{:.3}", o.wall_agg_ms),
                o.cost_additions.to_string(),
                cfg.rho.to_string(),
                o.kappa_effective.to_string(),
            ])
            .map_err(csv_err)?;
        for row in &o.rewards.rows {
            let stake = sim.ledger().get(&row.node).map_or(0.0, |e| e.stake);
            self.rewards
                .write_record([
                    o.round.to_string(),
                    row.node.clone(),
                    fmt_opt(row.sigma_d),
                    fmt_opt(row.contribution),
                    fmt_f(row.reward),
                    row.hash_ok.to_string(),
                    fmt_f(stake),
                ])
                .map_err(csv_err)?;
        }
        for (e, cum) in sim.ledger().entries().iter().zip(sim.cumulative_rewards()) {
            self.ledger
                .write_record([e.node.clone(), fmt_f(e.stake), fmt_f(*cum), e.blacklisted.to_string()])
                .map_err(csv_err)?;
        }
        if let (Some(report), Some(directive)) = (&o.inspection, &o.penalty) {
            for n in &report.nodes {
                let action = if directive.newly_blacklisted.contains(&n.node) {
                    "blacklisted"
                } else if directive.exclude.contains(&n.node) {
                    "excluded"
                } else {
                    "none"
                };
                self.inspections
                    .write_record([
                        o.round.to_string(),
                        n.node.clone(),
                        fmt_f(n.score),
                        n.flagged.to_string(),
                        action.to_string(),
                    ])
                    .map_err(csv_err)?;
            }
        }
        let flagged: Vec<String> = o
            .inspection
            .as_ref()
            .map(|r| r.flagged().into_iter().collect())
            .unwrap_or_default();
        writeln!(
            self.log,
            "round {}: accuracy {:.4} loss {:.4} kappa_effective {} oracle_error {:.3e} inspected {} flagged [{}] late [{}] unallocated {:.3}",
            o.round,
            o.accuracy,
            o.loss,
            o.kappa_effective,
            o.oracle_error,
            o.inspection.is_some(),
            flagged.join(","),
            o.late.join(","),
            o.rewards.unallocated,
        )?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        for w in [&mut self.rounds, &mut self.rewards, &mut self.ledger, &mut self.inspections] {
            w.flush()?;
        }
        self.log.flush()?;
        Ok(())
    }
}

/// Runs every round of `config` and writes `out_root/<name>/`.
/// On a runtime error the tables written so far are kept and the log records
/// the abort.
pub fn run_experiment(config: &ExperimentConfig, out_root: &Path) -> Result<MetricsBundle> {
    config.validate()?;
    let run_dir = out_root.join(&config.name);
    fs::create_dir_all(&run_dir)?;
    let mut bundle = MetricsBundle {
        rounds_csv: run_dir.join("rounds.csv"),
        rewards_csv: run_dir.join("rewards.csv"),
        ledger_csv: run_dir.join("ledger.csv"),
        inspections_csv: run_dir.join("inspections.csv"),
        config_echo: run_dir.join("config.echo"),
        log: run_dir.join("log.txt"),
        run_dir,
        seed: config.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        rounds_completed: 0,
    };
    fs::write(&bundle.config_echo, config.to_canonical_string())?;
    let mut out = Writers::create(&bundle)?;
    writeln!(
        out.log,
        "flssm {} seed {} signature {} clock {:?}",
        bundle.code_version,
        config.seed,
        crate::envelope::SIGNATURE_SCHEME,
        config.clock
    )?;
    let started = Instant::now();
    let result = (|| -> Result<()> {
        let mut sim = Simulation::new(config)?;
        writeln!(
            out.log,
            "malicious [{}]",
            sim.malicious_nodes().iter().cloned().collect::<Vec<_>>().join(",")
        )?;
        for _ in 0..config.rounds {
            let o = sim.step()?;
            out.record(&sim, &o)?;
            bundle.rounds_completed = o.round;
        }
        Ok(())
    })();
    match result {
        Ok(()) => {
            if config.clock == ClockMode::Wall {
                writeln!(out.log, "finished in {:.1} s", started.elapsed().as_secs_f64())?;
            }
            out.flush()?;
            Ok(bundle)
        }
        Err(e) => {
            writeln!(out.log, "ABORTED after {} rounds: {e}", bundle.rounds_completed)?;
            out.flush()?;
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            name: "t".into(),
            kappa: 5,
            rho: 3,
            rounds: 3,
            epochs: 1,
            lr: 0.05,
            hidden: vec![8],
            train_samples: 300,
            test_samples: 100,
            blob_spread: 2.0,
            he_key_bits: 128,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn rounds_follow_the_oracle() {
        let mut sim = Simulation::new(&small()).unwrap();
        for r in 1..=3 {
            let o = sim.step().unwrap();
            assert_eq!(o.round, r);
            assert!(o.oracle_error <= 1e-3, "{}", o.oracle_error);
            assert_eq!(o.kappa_effective, 5);
            assert!((o.rewards.distributed() - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attack_is_traced_and_excluded() {
        let cfg = ExperimentConfig {
            kappa: 10,
            malicious_ratio: 0.2,
            inspection_trigger: InspectionTrigger::EveryRound,
            train_samples: 600,
            ..small()
        };
        let mut sim = Simulation::new(&cfg).unwrap();
        let o = sim.step().unwrap();
        let report = o.inspection.unwrap();
        assert_eq!(&report.flagged(), sim.malicious_nodes());
        assert_eq!(o.kappa_effective, 8);
        assert!(o.oracle_error <= 1e-3);
        for n in sim.malicious_nodes() {
            assert_eq!(sim.ledger().get(n).unwrap().stake, 0.0);
            assert!(sim.ledger().is_blacklisted(n));
        }
        let malicious_reward: f64 = o
            .rewards
            .rows
            .iter()
            .filter(|r| sim.malicious_nodes().contains(&r.node))
            .map(|r| r.reward)
            .sum();
        assert_eq!(malicious_reward, 0.0);
        let o = sim.step().unwrap();
        assert_eq!(o.participants.len(), 8);
        assert!(o.participants.iter().all(|p| !sim.malicious_nodes().contains(p)));
    }

    #[test]
    fn deadline_excludes_slow_nodes() {
        let cfg = ExperimentConfig {
            deadline_s: 0.001,
            ..small()
        };
        let mut sim = Simulation::new(&cfg).unwrap();
        assert!(matches!(sim.step(), Err(Error::ShardSetIncomplete(_))));
    }

    #[test]
    fn unreachable_timestamp_authority_aborts() {
        let mut sim = Simulation::new(&small()).unwrap();
        sim.timestamp_authority().set_reachable(false);
        assert_eq!(sim.step().unwrap_err(), Error::TsaUnreachable);
    }

    #[test]
    fn experiment_writes_tables() {
        let dir = tempfile::tempdir().unwrap();
        let b = run_experiment(&small(), dir.path()).unwrap();
        let rounds = fs::read_to_string(&b.rounds_csv).unwrap();
        assert_eq!(rounds.lines().next().unwrap(), ROUNDS_HEADER.join(","));
        assert_eq!(rounds.lines().count(), 4);
        let rewards = fs::read_to_string(&b.rewards_csv).unwrap();
        assert_eq!(rewards.lines().next().unwrap(), REWARDS_HEADER.join(","));
        assert_eq!(rewards.lines().count(), 1 + 3 * 5);
        let ledger = fs::read_to_string(&b.ledger_csv).unwrap();
        assert_eq!(ledger.lines().next().unwrap(), LEDGER_HEADER.join(","));
        let insp = fs::read_to_string(&b.inspections_csv).unwrap();
        assert_eq!(insp.lines().next().unwrap(), INSPECTIONS_HEADER.join(","));
        let echo = fs::read_to_string(&b.config_echo).unwrap();
        assert_eq!(ExperimentConfig::from_toml_with_overrides(&echo, &[]).unwrap(), small());
    }
}

//! Experiment configuration: TOML file plus `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::he::Backend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    SignFlipping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InspectionTrigger {
    EveryRound,
    AccuracyDrop,
}

/// What the supervisor compares against the coordinate-wise median.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionBasis {
    /// Submitted parameters.
    Parameters,
    /// Submitted parameters minus the round's starting global model.
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    Wall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,

    pub kappa: usize,
    pub rho: usize,
    pub supervisors: usize,
    pub rounds: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,

    pub dataset: DatasetSource,
    pub train_csv: String,
    pub test_csv: String,
    pub classes: usize,
    pub features: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub blob_spread: f64,
    pub blob_noise: f64,
    pub alpha: f64,

    pub attack: Attack,
    pub malicious_ratio: f64,

    pub inspection_enabled: bool,
    pub inspection_trigger: InspectionTrigger,
    pub accuracy_drop_threshold: f64,
    pub detection_threshold: f64,
    pub detection_basis: DetectionBasis,
    pub initial_stake: f64,
    pub repeat_offense_threshold: u32,
    pub retention_rounds: u64,

    pub reward_total: f64,
    pub contribution_decay: f64,

    pub shamir_threshold: usize,
    pub shamir_shares: usize,
    /// Field prime as hex; empty selects the built-in 256-bit prime.
    pub shamir_prime: String,

    pub he_backend: Backend,
    pub he_key_bits: u32,
    pub scale_bits: u32,
    pub factor_bits: u32,

    pub clock: ClockMode,
    pub threaded: bool,
    /// Worker threads for local training; 0 uses one per core.
    pub workers: usize,
    /// Submission deadline after round start in seconds; 0 disables it.
    pub deadline_s: f64,
    /// Virtual-clock training cost per sample and epoch, drawn per node.
    pub sample_cost_ms_min: f64,
    pub sample_cost_ms_max: f64,
    /// Virtual-clock cost of one ciphertext addition and one plaintext scaling.
    pub virtual_add_us: f64,
    pub virtual_scale_us: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 1,
            kappa: 10,
            rho: 3,
            supervisors: 1,
            rounds: 100,
            epochs: 5,
            lr: 0.001,
            batch_size: 64,
            hidden: vec![32],
            dataset: DatasetSource::Synthetic,
            train_csv: String::new(),
            test_csv: String::new(),
            classes: 4,
            features: 16,
            train_samples: 2000,
            test_samples: 500,
            blob_spread: 1.0,
            blob_noise: 1.0,
            alpha: 0.5,
            attack: Attack::SignFlipping,
            malicious_ratio: 0.0,
            inspection_enabled: true,
            inspection_trigger: InspectionTrigger::EveryRound,
            accuracy_drop_threshold: 0.10,
            detection_threshold: 0.0,
            detection_basis: DetectionBasis::Parameters,
            initial_stake: 10.0,
            repeat_offense_threshold: 1,
            retention_rounds: 5,
            reward_total: 10.0,
            contribution_decay: 0.1,
            shamir_threshold: 3,
            shamir_shares: 5,
            shamir_prime: String::new(),
            he_backend: Backend::Paillier,
            he_key_bits: 256,
            scale_bits: 16,
            factor_bits: 32,
            clock: ClockMode::Virtual,
            threaded: true,
            workers: 0,
            deadline_s: 0.0,
            sample_cost_ms_min: 1.0,
            sample_cost_ms_max: 3.0,
            virtual_add_us: 2.0,
            virtual_scale_us: 40.0,
        }
    }
}

fn config_error(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        message: message.into(),
    }
}

fn default_table() -> toml::Table {
    toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize")
}

/// Parses the value half of `key=value`: any TOML literal, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    /// Builds a config from TOML text and `key=value` overrides; overrides win.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| config_error("<file>", e.message().to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| config_error(o, "override must look like key=value"))?;
            table.insert(key.trim().to_string(), parse_value(value.trim()));
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let defaults = default_table();
        if let Some(k) = table.keys().find(|k| !defaults.contains_key(*k)) {
            return Err(config_error(k, "unknown key"));
        }
        // try each key against the defaults alone so a type error names its key
        for (k, v) in &table {
            let mut probe = defaults.clone();
            probe.insert(k.clone(), v.clone());
            if let Err(e) = probe.try_into::<ExperimentConfig>() {
                return Err(config_error(k, e.message().to_string()));
            }
        }
        let cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| config_error("<file>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (if any) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| config_error("<file>", format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    /// Canonical TOML of the effective config.
    pub fn to_canonical_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Number of sign-flipping nodes: `floor(ratio · κ)`.
    pub fn malicious_count(&self) -> usize {
        (self.malicious_ratio * self.kappa as f64 + 1e-9).floor() as usize
    }

    /// Layer sizes `[features, hidden..., classes]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.features];
        d.extend(&self.hidden);
        d.push(self.classes);
        d
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(config_error(key, msg))
            }
        };
        check(!self.name.is_empty() && !self.name.contains(['/', '\\']), "name", "must be a plain directory name")?;
        check(self.kappa >= 1, "kappa", "must be at least 1")?;
        check(self.rho >= 1, "rho", "must be at least 1")?;
        check(self.supervisors >= 1, "supervisors", "must be at least 1")?;
        check(self.rounds >= 1, "rounds", "must be at least 1")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check(self.batch_size >= 1, "batch_size", "must be at least 1")?;
        check(!self.hidden.contains(&0), "hidden", "layer sizes must be positive")?;
        check(self.classes >= 2, "classes", "need at least two classes")?;
        check(self.features >= 1, "features", "must be at least 1")?;
        check(self.alpha > 0.0 && self.alpha.is_finite(), "alpha", "must be positive")?;
        check(self.blob_noise >= 0.0, "blob_noise", "must be non-negative")?;
        check(
            (0.0..1.0).contains(&self.malicious_ratio),
            "malicious_ratio",
            "must be in [0, 1)",
        )?;
        check(
            self.malicious_count() < self.kappa,
            "malicious_ratio",
            "leaves no benign node",
        )?;
        check(
            (-1.0..=1.0).contains(&self.detection_threshold),
            "detection_threshold",
            "must be in [-1, 1]",
        )?;
        check(self.accuracy_drop_threshold >= 0.0, "accuracy_drop_threshold", "must be non-negative")?;
        check(self.initial_stake >= 0.0, "initial_stake", "must be non-negative")?;
        check(self.repeat_offense_threshold >= 1, "repeat_offense_threshold", "must be at least 1")?;
        check(self.retention_rounds >= 1, "retention_rounds", "must be at least 1")?;
        check(self.reward_total >= 0.0 && self.reward_total.is_finite(), "reward_total", "must be non-negative")?;
        check(self.contribution_decay >= 0.0, "contribution_decay", "must be non-negative")?;
        check(self.shamir_threshold >= 1, "shamir_threshold", "must be at least 1")?;
        check(
            self.shamir_shares >= self.shamir_threshold,
            "shamir_shares",
            "must be at least shamir_threshold",
        )?;
        check(self.shamir_shares >= 3, "shamir_shares", "custodians include Sn, Gn and an En, so n >= 3")?;
        check(
            self.shamir_shares - 3 <= self.kappa,
            "shamir_shares",
            "not enough local nodes to act as custodians",
        )?;
        check(
            self.he_key_bits >= 64 && self.he_key_bits % 2 == 0,
            "he_key_bits",
            "must be even and at least 64",
        )?;
        check((1..=48).contains(&self.scale_bits), "scale_bits", "must be in 1..=48")?;
        check((1..=64).contains(&self.factor_bits), "factor_bits", "must be in 1..=64")?;
        check(self.deadline_s >= 0.0, "deadline_s", "must be non-negative")?;
        check(
            self.sample_cost_ms_min >= 0.0 && self.sample_cost_ms_max >= self.sample_cost_ms_min,
            "sample_cost_ms_max",
            "need 0 <= sample_cost_ms_min <= sample_cost_ms_max",
        )?;
        check(
            self.virtual_add_us >= 0.0 && self.virtual_scale_us >= 0.0,
            "virtual_add_us",
            "costs must be non-negative",
        )?;
        if self.dataset == DatasetSource::Csv {
            check(!self.train_csv.is_empty(), "train_csv", "required for csv datasets")?;
            check(!self.test_csv.is_empty(), "test_csv", "required for csv datasets")?;
        } else {
            check(self.train_samples >= self.kappa, "train_samples", "fewer samples than local nodes")?;
            check(self.test_samples >= 1, "test_samples", "must be at least 1")?;
        }
        if !self.shamir_prime.is_empty() {
            crate::he::parse_hex(&self.shamir_prime)
                .map_err(|e| config_error("shamir_prime", e.to_string()))?;
        }
        Ok(())
    }
}

/// Named experiment matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepPreset {
    Efficiency,
    Tracing,
    Incentive,
}

impl std::str::FromStr for SweepPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "efficiency" => Ok(Self::Efficiency),
            "tracing" => Ok(Self::Tracing),
            "incentive" => Ok(Self::Incentive),
            other => Err(config_error("preset", format!("unknown preset `{other}`"))),
        }
    }
}

impl SweepPreset {
    /// Configs of the matrix, each with a distinct run name.
    pub fn configs(self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let with = |name: String, f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            c.name = name;
            f(&mut c);
            c
        };
        match self {
            Self::Efficiency => {
                let mut out = Vec::new();
                for kappa in [10, 20, 50] {
                    for rho in [1, 3, 5, 10] {
                        out.push(with(format!("efficiency-k{kappa}-r{rho}"), &|c| {
                            c.kappa = kappa;
                            c.rho = rho;
                            c.malicious_ratio = 0.0;
                        }));
                    }
                }
                out
            }
            Self::Tracing => {
                let mut out = Vec::new();
                for ratio in [0.1, 0.2] {
                    for s in [false, true] {
                        let tag = if s { "s1" } else { "s0" };
                        out.push(with(format!("tracing-m{}-{tag}", (ratio * 10.0) as u32), &|c| {
                            c.malicious_ratio = ratio;
                            c.inspection_enabled = s;
                            c.inspection_trigger = InspectionTrigger::EveryRound;
                        }));
                    }
                }
                out
            }
            Self::Incentive => [0.1, 0.2]
                .into_iter()
                .map(|ratio| {
                    with(format!("incentive-m{}", (ratio * 10.0) as u32), &|c| {
                        c.malicious_ratio = ratio;
                        c.inspection_enabled = true;
                        c.inspection_trigger = InspectionTrigger::EveryRound;
                    })
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = ExperimentConfig::from_toml_with_overrides("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.rounds, 100);
        assert_eq!(c.epochs, 5);
        assert_eq!(c.reward_total, 10.0);
        assert_eq!((c.shamir_threshold, c.shamir_shares), (3, 5));
        assert_eq!(c.attack, Attack::SignFlipping);
        assert_eq!(c.supervisors, 1);
    }

    #[test]
    fn rho_zero_is_rejected() {
        let e = ExperimentConfig::from_toml_with_overrides("rho = 0", &[]).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "rho"), "{e:?}");
        let e = ExperimentConfig::from_toml_with_overrides("rounds = 0", &[]).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "rounds"));
    }

    #[test]
    fn overrides_win_over_file() {
        let c = ExperimentConfig::from_toml_with_overrides(
            "seed = 7\nkappa = 20",
            &["seed=42".into(), "clock=wall".into(), "hidden=[8, 8]".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.kappa, 20);
        assert_eq!(c.clock, ClockMode::Wall);
        assert_eq!(c.dims(), vec![16, 8, 8, 4]);
    }

    #[test]
    fn errors_name_the_key() {
        for (text, key) in [
            ("bogus = 1", "bogus"),
            ("kappa = \"ten\"", "kappa"),
            ("clock = \"sundial\"", "clock"),
            ("malicious_ratio = 1.5", "malicious_ratio"),
            ("shamir_threshold = 6", "shamir_shares"),
        ] {
            match ExperimentConfig::from_toml_with_overrides(text, &[]) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(
            ExperimentConfig::from_toml_with_overrides("", &["noequals".into()]),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn malicious_count_floors() {
        let mut c = ExperimentConfig::default();
        for (ratio, kappa, want) in [(0.2, 10, 2), (0.1, 10, 1), (0.3, 10, 3), (0.15, 10, 1), (0.29, 100, 29)] {
            c.malicious_ratio = ratio;
            c.kappa = kappa;
            assert_eq!(c.malicious_count(), want, "{ratio} × {kappa}");
        }
    }

    #[test]
    fn canonical_echo_round_trips() {
        let c = ExperimentConfig::from_toml_with_overrides("kappa = 20\nname = \"x\"", &[]).unwrap();
        let echo = c.to_canonical_string();
        assert_eq!(ExperimentConfig::from_toml_with_overrides(&echo, &[]).unwrap(), c);
    }

    #[test]
    fn sweep_presets() {
        let base = ExperimentConfig::default();
        let eff = SweepPreset::Efficiency.configs(&base);
        assert_eq!(eff.len(), 12);
        let names: std::collections::BTreeSet<_> = eff.iter().map(|c| c.name.clone()).collect();
        assert_eq!(names.len(), 12);
        assert_eq!(SweepPreset::Tracing.configs(&base).len(), 4);
        assert_eq!(SweepPreset::Incentive.configs(&base).len(), 2);
        assert!("nope".parse::<SweepPreset>().is_err());
    }
}

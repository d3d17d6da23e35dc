//! Run configuration: one JSON document describes an experiment completely —
//! algorithm, model, data recipe, federation schedule, learning rates and
//! seeds. Unknown keys are rejected everywhere so a typo in a hyperparameter
//! name fails loudly instead of silently comparing the wrong thing.

use serde::{Deserialize, Serialize};

use crate::datasets::{PartitionSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::models::Architecture;

/// The federated algorithms under comparison. The uga-family sends corrected
/// gradients to the server; the rest send parameters. The fedmeta-family adds
/// the server-side meta step after aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fedavg,
    Fedprox,
    Fedshare,
    Uga,
    Fedmeta,
    FedmetaUga,
}

impl Algorithm {
    /// Clients run the keep-trace update and the server aggregates gradients.
    pub fn aggregates_gradients(self) -> bool {
        matches!(self, Algorithm::Uga | Algorithm::FedmetaUga)
    }

    /// The server applies the meta update after aggregation.
    pub fn has_meta_step(self) -> bool {
        matches!(self, Algorithm::Fedmeta | Algorithm::FedmetaUga)
    }

    pub fn uses_prox(self) -> bool {
        matches!(self, Algorithm::Fedprox)
    }

    pub fn shares_data(self) -> bool {
        matches!(self, Algorithm::Fedshare)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedavg => "fedavg",
            Algorithm::Fedprox => "fedprox",
            Algorithm::Fedshare => "fedshare",
            Algorithm::Uga => "uga",
            Algorithm::Fedmeta => "fedmeta",
            Algorithm::FedmetaUga => "fedmeta_uga",
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian-blob classification data generated in-process.
    Synth { spec: SynthSpec },
    /// IDX-format image/label file pairs (MNIST-style), with a separate
    /// pre-defined test pair.
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
}

/// Meta-set construction for the overlap experiments: instead of carving the
/// meta set out of the training data, pool the examples of some training
/// (primary) clients and some clients of a disjoint auxiliary federation,
/// then sample the meta set from that pool. The rest of the pool becomes the
/// evaluation holdout, so the test distribution follows the meta sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapConfig {
    /// Fraction of meta-source slots filled by training clients (1.0 = the
    /// meta set is sampled purely from the federation, 0.0 = purely from the
    /// auxiliary pool).
    pub rate: f64,
    /// Generator for the auxiliary pool (disjoint from the training data).
    pub auxiliary: SynthSpec,
    /// How the auxiliary pool is split into source clients.
    pub auxiliary_partition: PartitionSpec,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_meta_fraction() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub partition: PartitionSpec,
    /// Held-out test split (synthetic sources only; IDX sources ship their
    /// own test files). Ignored in overlap mode, where the holdout comes from
    /// the meta-source pool.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Size of the server-side carve-out used as the FedShare share set and
    /// the FedMeta meta set. Always carved (when not in overlap mode) so that
    /// every algorithm trains on identical client data.
    #[serde(default = "default_meta_fraction")]
    pub meta_fraction: f64,
    #[serde(default)]
    pub overlap: Option<OverlapConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// Fraction C of clients selected each round; m = max(ceil(C*K), 1).
    pub client_fraction: f64,
    /// Local epochs E. The uga-family needs E >= 2: the last epoch evaluates
    /// the full-client gradient instead of stepping.
    pub local_epochs: usize,
    /// Local minibatch size B.
    pub batch_size: usize,
    /// Total communication rounds T.
    pub rounds: usize,
    /// Evaluate on the test set every this many rounds (the final round is
    /// always evaluated).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    1
}

/// Whether the per-round decay multiplies every learning rate or only the
/// client one. The server and meta rates follow the client schedule by
/// default; set `client` to pin them at their round-0 values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayScope {
    All,
    Client,
}

fn default_lr() -> f64 {
    0.002
}

fn default_decay() -> f64 {
    0.992
}

fn default_prox_mu() -> f64 {
    2e-4
}

fn default_meta_steps() -> usize {
    1
}

fn default_decay_scope() -> DecayScope {
    DecayScope::All
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Client learning rate at round 0 (before batch scaling).
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Server step size for gradient aggregation; defaults to the *unscaled*
    /// `lr` (the linear scaling rule applies to client steps only).
    #[serde(default)]
    pub server_lr: Option<f64>,
    /// Meta learning rate; defaults to the (scaled) client rate.
    #[serde(default)]
    pub meta_lr: Option<f64>,
    /// Per-round multiplicative decay.
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_decay_scope")]
    pub decay_scope: DecayScope,
    /// Proximal coefficient (fedprox only).
    #[serde(default = "default_prox_mu")]
    pub prox_mu: f64,
    /// Full-batch meta steps per round (fedmeta family).
    #[serde(default = "default_meta_steps")]
    pub meta_steps: usize,
    /// Linear scaling rule reference batch: when set, the client rate becomes
    /// `lr * batch_size / batch_ref`.
    #[serde(default)]
    pub batch_ref: Option<usize>,
}

/// Independent seed streams so ablations can hold the data fixed while
/// varying initialisation or training randomness (and vice versa).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    /// Drives the test/meta splits, partitioning and share dealing.
    pub partition: u64,
    /// Drives parameter initialisation.
    pub init: u64,
    /// Drives client selection and epoch shuffles.
    pub training: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub model: Architecture,
    pub data: DataConfig,
    pub federation: FederationConfig,
    #[serde(default = "OptimConfig::default_config")]
    pub optim: OptimConfig,
    pub seeds: SeedConfig,
}

impl OptimConfig {
    fn default_config() -> OptimConfig {
        OptimConfig {
            lr: default_lr(),
            server_lr: None,
            meta_lr: None,
            decay: default_decay(),
            decay_scope: default_decay_scope(),
            prox_mu: default_prox_mu(),
            meta_steps: default_meta_steps(),
            batch_ref: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<RunConfig> {
        let config: RunConfig = serde_json::from_str(json)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Number of clients K (defined by the partition).
    pub fn num_clients(&self) -> usize {
        self.data.partition.k()
    }

    /// Clients selected per round: m = max(ceil(C*K), 1).
    pub fn clients_per_round(&self) -> usize {
        let m = (self.federation.client_fraction * self.num_clients() as f64).ceil() as usize;
        m.max(1)
    }

    /// Client learning rate at round 0, after the linear scaling rule.
    pub fn client_lr0(&self) -> f64 {
        let scale = match self.optim.batch_ref {
            Some(b_ref) => self.federation.batch_size as f64 / b_ref as f64,
            None => 1.0,
        };
        self.optim.lr * scale
    }

    /// Server aggregation step size at round 0 (unscaled `lr` by default).
    pub fn server_lr0(&self) -> f64 {
        self.optim.server_lr.unwrap_or(self.optim.lr)
    }

    /// Meta learning rate at round 0 (follows the scaled client rate).
    pub fn meta_lr0(&self) -> f64 {
        self.optim.meta_lr.unwrap_or_else(|| self.client_lr0())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;

        let f = &self.federation;
        if !(f.client_fraction.is_finite() && f.client_fraction > 0.0 && f.client_fraction <= 1.0)
        {
            return Err(Error::Config(format!(
                "client_fraction must lie in (0,1], got {}",
                f.client_fraction
            )));
        }
        if f.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if self.algorithm.aggregates_gradients() && f.local_epochs < 2 {
            return Err(Error::Config(format!(
                "{} needs local_epochs >= 2 (the last epoch evaluates the gradient)",
                self.algorithm
            )));
        }
        if f.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if f.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if f.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }

        let o = &self.optim;
        for (name, value) in [
            ("lr", Some(o.lr)),
            ("server_lr", o.server_lr),
            ("meta_lr", o.meta_lr),
        ] {
            if let Some(v) = value {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::Config(format!(
                        "{name} must be finite and >= 0, got {v}"
                    )));
                }
            }
        }
        if !(o.decay.is_finite() && o.decay > 0.0 && o.decay <= 1.0) {
            return Err(Error::Config(format!(
                "decay must lie in (0,1], got {}",
                o.decay
            )));
        }
        if !(o.prox_mu.is_finite() && o.prox_mu >= 0.0) {
            return Err(Error::Config(format!(
                "prox_mu must be finite and >= 0, got {}",
                o.prox_mu
            )));
        }
        if o.meta_steps == 0 {
            return Err(Error::Config("meta_steps must be >= 1".into()));
        }
        if o.batch_ref == Some(0) {
            return Err(Error::Config("batch_ref must be >= 1".into()));
        }

        let d = &self.data;
        if d.partition.k() == 0 {
            return Err(Error::Config("partition needs at least one client".into()));
        }
        if let DataSource::Synth { spec } = &d.source {
            spec.validate()?;
        }
        if !(d.meta_fraction.is_finite() && d.meta_fraction > 0.0 && d.meta_fraction < 1.0) {
            return Err(Error::Config(format!(
                "meta_fraction must lie in (0,1), got {}",
                d.meta_fraction
            )));
        }
        match &d.overlap {
            None => {
                // Only synthetic sources carve a test split; IDX ships one.
                if matches!(d.source, DataSource::Synth { .. })
                    && !(d.test_fraction.is_finite()
                        && d.test_fraction > 0.0
                        && d.test_fraction < 1.0)
                {
                    return Err(Error::Config(format!(
                        "test_fraction must lie in (0,1), got {}",
                        d.test_fraction
                    )));
                }
            }
            Some(overlap) => {
                if !(overlap.rate.is_finite() && (0.0..=1.0).contains(&overlap.rate)) {
                    return Err(Error::Config(format!(
                        "overlap rate must lie in [0,1], got {}",
                        overlap.rate
                    )));
                }
                overlap.auxiliary.validate()?;
                if overlap.auxiliary_partition.k() == 0 {
                    return Err(Error::Config(
                        "auxiliary partition needs at least one client".into(),
                    ));
                }
                if !matches!(d.source, DataSource::Synth { .. }) {
                    return Err(Error::Config(
                        "overlap mode requires a synthetic primary source".into(),
                    ));
                }
                if self.algorithm.shares_data() {
                    return Err(Error::Config(
                        "fedshare has no share set in overlap mode".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_json() -> String {
        r#"{
            "algorithm": "fedmeta_uga",
            "model": { "kind": "mlp", "inputs": 20, "hidden": [16], "classes": 10 },
            "data": {
                "source": { "kind": "synth", "spec": {
                    "examples_per_class": 200, "classes": 10, "dims": 20,
                    "separation": 3.0, "seed": 7
                } },
                "partition": { "scheme": "label_skew", "k": 20, "classes_per_client": 2 },
                "test_fraction": 0.2,
                "meta_fraction": 0.01
            },
            "federation": {
                "client_fraction": 0.2, "local_epochs": 5, "batch_size": 16,
                "rounds": 150, "eval_every": 1
            },
            "optim": {
                "lr": 0.002, "decay": 0.992, "prox_mu": 0.0002, "meta_steps": 1
            },
            "seeds": { "partition": 1, "init": 2, "training": 3 }
        }"#
        .to_string()
    }

    #[test]
    fn round_trips_through_json() {
        let config = RunConfig::from_json(&base_json()).unwrap();
        let json = config.to_json().unwrap();
        let again = RunConfig::from_json(&json).unwrap();
        assert_eq!(config, again);
        assert_eq!(config.algorithm, Algorithm::FedmetaUga);
        assert_eq!(config.num_clients(), 20);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for (needle, replacement) in [
            (r#""algorithm""#, r#""algoritm""#),
            (r#""lr": 0.002"#, r#""lr": 0.002, "momentum": 0.9"#),
            (r#""seed": 7"#, r#""seed": 7, "sep": 1.0"#),
            (r#""rounds": 150"#, r#""rounds": 150, "round": 1"#),
        ] {
            let json = base_json().replace(needle, replacement);
            assert!(
                RunConfig::from_json(&json).is_err(),
                "accepted bad key: {replacement}"
            );
        }
    }

    #[test]
    fn defaults_fill_in_optional_sections() {
        let json = r#"{
            "algorithm": "fedavg",
            "model": { "kind": "logreg", "inputs": 5, "classes": 3 },
            "data": {
                "source": { "kind": "synth", "spec": {
                    "examples_per_class": 50, "classes": 3, "dims": 5,
                    "separation": 2.0, "seed": 1
                } },
                "partition": { "scheme": "iid", "k": 4 }
            },
            "federation": {
                "client_fraction": 0.5, "local_epochs": 1, "batch_size": 8, "rounds": 3
            },
            "seeds": { "partition": 1, "init": 2, "training": 3 }
        }"#;
        let config = RunConfig::from_json(json).unwrap();
        assert_eq!(config.data.test_fraction, 0.2);
        assert_eq!(config.data.meta_fraction, 0.01);
        assert_eq!(config.federation.eval_every, 1);
        assert_eq!(config.optim.lr, 0.002);
        assert_eq!(config.optim.decay, 0.992);
        assert_eq!(config.optim.prox_mu, 2e-4);
        assert_eq!(config.optim.decay_scope, DecayScope::All);
        assert!(config.data.overlap.is_none());
    }

    #[test]
    fn client_count_rounding_uses_ceiling_then_floor_guard() {
        let mut config = RunConfig::from_json(&base_json()).unwrap();
        // K = 20 here
        config.federation.client_fraction = 0.2;
        assert_eq!(config.clients_per_round(), 4);
        config.federation.client_fraction = 0.01;
        assert_eq!(config.clients_per_round(), 1); // max(ceil(0.2), 1)
        config.federation.client_fraction = 0.11;
        assert_eq!(config.clients_per_round(), 3); // ceil(2.2)
        config.federation.client_fraction = 1.0;
        assert_eq!(config.clients_per_round(), 20);
    }

    #[test]
    fn learning_rates_resolve_with_the_scaling_rule() {
        let mut config = RunConfig::from_json(&base_json()).unwrap();
        config.federation.batch_size = 128;
        config.optim.batch_ref = Some(64);
        assert!((config.client_lr0() - 0.004).abs() < 1e-15);
        assert!((config.server_lr0() - 0.002).abs() < 1e-15); // stays unscaled
        assert!((config.meta_lr0() - 0.004).abs() < 1e-15); // follows the client

        config.optim.server_lr = Some(0.01);
        config.optim.meta_lr = Some(0.0);
        assert!((config.server_lr0() - 0.01).abs() < 1e-15);
        assert_eq!(config.meta_lr0(), 0.0);
    }

    #[test]
    fn validation_rejects_degenerate_configs() {
        let cases: Vec<(&str, &str)> = vec![
            (r#""client_fraction": 0.2"#, r#""client_fraction": 0.0"#),
            (r#""client_fraction": 0.2"#, r#""client_fraction": 1.5"#),
            (r#""local_epochs": 5"#, r#""local_epochs": 1"#), // uga family needs 2
            (r#""rounds": 150"#, r#""rounds": 0"#),
            (r#""decay": 0.992"#, r#""decay": 0.0"#),
            (r#""decay": 0.992"#, r#""decay": 1.01"#),
            (r#""meta_steps": 1"#, r#""meta_steps": 0"#),
            (r#""test_fraction": 0.2"#, r#""test_fraction": 1.0"#),
            (r#""meta_fraction": 0.01"#, r#""meta_fraction": 0.0"#),
        ];
        for (needle, replacement) in cases {
            let json = base_json().replace(needle, replacement);
            assert!(
                RunConfig::from_json(&json).is_err(),
                "accepted: {replacement}"
            );
        }
    }

    #[test]
    fn overlap_mode_constraints_are_enforced() {
        let overlap = r#""overlap": {
            "rate": 0.5,
            "auxiliary": { "examples_per_class": 100, "classes": 10, "dims": 20,
                           "separation": 3.0, "seed": 99 },
            "auxiliary_partition": { "scheme": "label_skew", "k": 20, "classes_per_client": 2 }
        },"#;
        let json = base_json().replace(r#""test_fraction""#, &format!("{overlap}\n\"test_fraction\""));
        let config = RunConfig::from_json(&json).unwrap();
        assert!(config.data.overlap.is_some());

        let bad_rate = json.replace(r#""rate": 0.5"#, r#""rate": 1.5"#);
        assert!(RunConfig::from_json(&bad_rate).is_err());

        let share = json.replace(r#""algorithm": "fedmeta_uga""#, r#""algorithm": "fedshare""#);
        assert!(RunConfig::from_json(&share).is_err());
    }
}

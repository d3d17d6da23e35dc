//! The server loop: data preparation, client selection, per-round learning
//! rates, algorithm dispatch, evaluation cadence and metrics records.
//!
//! Determinism contract: given a config (seeds included), two runs produce
//! identical records and final parameters — bitwise, regardless of thread
//! count — because client updates are pure functions and every reduction
//! happens in canonical client order. Only `wall_ms` is time-dependent, and
//! it can be disabled via [`RunOptions::record_timing`].

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{Algorithm, DataSource, DecayScope, RunConfig};
use crate::datasets::{
    build_overlap_meta, load_idx, partition_from_spec, sample_meta_set, synth_classification,
    Dataset, Partition, PartitionManifest,
};
use crate::error::{Error, Result};
use crate::fed::{
    aggregate_gradients, aggregate_params, apply_fedshare, client_update_sgd, client_update_uga,
    meta_update, Contribution, LocalPlan,
};
use crate::models::{evaluate, EvalMetrics, ModelObjective};
use crate::params::ParamVector;

/// Evaluation chunk size; affects memory only, never results.
const EVAL_BATCH: usize = 256;

/// Smoothing window (in eval rows) for rounds-to-milestone reporting.
pub const MILESTONE_WINDOW: usize = 5;
/// Number of trailing eval rows averaged into the convergence accuracy.
pub const FINAL_ACCURACY_WINDOW: usize = 10;

// ── seed derivation ─────────────────────────────────────────────────────────
//
// Each data-pipeline stage draws from its own stream derived from the
// user-facing partition seed, so e.g. toggling fedshare never perturbs the
// test split. splitmix64 finalizer over (base, tag).

const SEED_TEST: u64 = 1;
const SEED_META: u64 = 2;
const SEED_PARTITION: u64 = 3;
const SEED_SHARE: u64 = 4;
const SEED_OVERLAP: u64 = 5;
const SEED_AUX_PARTITION: u64 = 6;
const SEED_DROPOUT: u64 = 7;

fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// ── schedule primitives ─────────────────────────────────────────────────────

/// Learning rate at round `t` (0-based): `lr0 * decay^t`.
pub fn lr_at(lr0: f64, decay: f64, round: usize) -> f64 {
    lr0 * decay.powi(round as i32)
}

fn selection_rng(training_seed: u64, round: usize) -> rand_chacha::ChaCha8Rng {
    // Same key layout as the epoch-shuffle stream, with the client slot
    // pinned to u64::MAX (no real client id) so the streams never collide.
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&training_seed.to_le_bytes());
    key[8..16].copy_from_slice(&(round as u64).to_le_bytes());
    key[16..24].copy_from_slice(&u64::MAX.to_le_bytes());
    <rand_chacha::ChaCha8Rng as rand::SeedableRng>::from_seed(key)
}

/// Uniform sample without replacement of `m` of the `k` clients, ascending.
pub fn select_clients(k: usize, m: usize, training_seed: u64, round: usize) -> Result<Vec<usize>> {
    if m == 0 || m > k {
        return Err(Error::InvalidArgument(format!(
            "cannot select {m} of {k} clients"
        )));
    }
    let mut rng = selection_rng(training_seed, round);
    let mut ids = rand::seq::index::sample(&mut rng, k, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

// ── prepared run ────────────────────────────────────────────────────────────

/// The server-side meta set: an objective plus the example indices it owns.
pub struct MetaSet {
    pub objective: ModelObjective,
    pub examples: Vec<usize>,
}

/// Everything `run_training` needs, with all data carving done up front.
pub struct PreparedRun {
    pub config: RunConfig,
    /// Training objective over the parent dataset (client + carved rows).
    pub objective: ModelObjective,
    /// Client index sets into the parent dataset (share-augmented for
    /// fedshare).
    pub partition: Partition,
    /// Meta set (always built; only the fedmeta family consumes it).
    pub meta: MetaSet,
    /// Evaluation set: the held-out test split, or the meta-source holdout in
    /// overlap mode.
    pub test: Arc<Dataset>,
    pub partition_manifest: PartitionManifest,
}

/// Materialise datasets, splits and the partition for a validated config.
pub fn prepare(config: &RunConfig) -> Result<PreparedRun> {
    config.validate()?;
    let seed = config.seeds.partition;

    match &config.data.overlap {
        None => {
            let (train_pool, test): (Dataset, Dataset) = match &config.data.source {
                DataSource::Synth { spec } => {
                    let full = synth_classification(spec)?;
                    let (test_rows, pool_rows) =
                        sample_meta_set(&full, config.data.test_fraction, derive_seed(seed, SEED_TEST))?;
                    (full.subset(&pool_rows)?, full.subset(&test_rows)?)
                }
                DataSource::Idx {
                    train_images,
                    train_labels,
                    test_images,
                    test_labels,
                } => {
                    let train = load_idx(train_images.as_ref(), train_labels.as_ref())?;
                    let test = load_idx(test_images.as_ref(), test_labels.as_ref())?;
                    (train, test)
                }
            };

            // Carve the server-side set unconditionally so every algorithm
            // sees identical client data; fedshare deals it to the clients,
            // the fedmeta family trains its meta step on it, everyone else
            // just leaves it untouched on the server.
            let (meta_rows, train_rows) = sample_meta_set(
                &train_pool,
                config.data.meta_fraction,
                derive_seed(seed, SEED_META),
            )?;
            let train = train_pool.subset(&train_rows)?;
            let meta = train_pool.subset(&meta_rows)?;
            let meta_len = meta.len();
            let train_len = train.len();

            let mut partition = partition_from_spec(
                &train,
                &config.data.partition,
                derive_seed(seed, SEED_PARTITION),
            )?;
            // The parent dataset is train ++ meta for every algorithm, so the
            // objective (and any dropout derivation) is algorithm-independent.
            let parent = Arc::new(Dataset::concat(&train, &meta)?);
            let meta_examples: Vec<usize> = (train_len..train_len + meta_len).collect();

            if config.algorithm.shares_data() {
                partition =
                    apply_fedshare(&partition, &meta_examples, derive_seed(seed, SEED_SHARE))?;
            }

            let manifest =
                PartitionManifest::new(seed, config.data.partition.clone(), &partition);
            let objective = ModelObjective::new(config.model.clone(), Arc::clone(&parent))?
                .with_dropout_base(derive_seed(config.seeds.training, SEED_DROPOUT));
            // The meta step uses evaluation-mode gradients (no dropout): its
            // loss-descent diagnostics should not carry mask noise.
            let meta_objective = ModelObjective::new(config.model.clone(), parent)?;
            Ok(PreparedRun {
                config: config.clone(),
                objective,
                partition,
                meta: MetaSet {
                    objective: meta_objective,
                    examples: meta_examples,
                },
                test: Arc::new(test),
                partition_manifest: manifest,
            })
        }
        Some(overlap) => {
            let DataSource::Synth { spec } = &config.data.source else {
                return Err(Error::Config(
                    "overlap mode requires a synthetic primary source".into(),
                ));
            };
            let primary = synth_classification(spec)?;
            let partition = partition_from_spec(
                &primary,
                &config.data.partition,
                derive_seed(seed, SEED_PARTITION),
            )?;
            let auxiliary = synth_classification(&overlap.auxiliary)?;
            let aux_partition = partition_from_spec(
                &auxiliary,
                &overlap.auxiliary_partition,
                derive_seed(seed, SEED_AUX_PARTITION),
            )?;
            let split = build_overlap_meta(
                &primary,
                &partition,
                &auxiliary,
                &aux_partition,
                overlap.rate,
                config.data.meta_fraction,
                derive_seed(seed, SEED_OVERLAP),
            )?;

            let manifest =
                PartitionManifest::new(seed, config.data.partition.clone(), &partition);
            let parent = Arc::new(primary);
            let objective = ModelObjective::new(config.model.clone(), parent)?
                .with_dropout_base(derive_seed(config.seeds.training, SEED_DROPOUT));
            let meta_examples: Vec<usize> = (0..split.meta.len()).collect();
            let meta_objective =
                ModelObjective::new(config.model.clone(), Arc::new(split.meta))?;
            Ok(PreparedRun {
                config: config.clone(),
                objective,
                partition,
                meta: MetaSet {
                    objective: meta_objective,
                    examples: meta_examples,
                },
                test: Arc::new(split.holdout),
                partition_manifest: manifest,
            })
        }
    }
}

// ── the round loop ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RoundRecord {
    /// 1-based communication-round counter.
    pub round: usize,
    /// Selected client ids, ascending.
    pub selected: Vec<usize>,
    /// Test metrics; present on eval rounds only.
    pub eval: Option<EvalMetrics>,
    /// Meta loss before/after the meta step (fedmeta family only).
    pub meta_loss_before: Option<f64>,
    pub meta_loss_after: Option<f64>,
    pub wall_ms: u64,
}

pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub final_params: ParamVector,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Worker threads for the client-parallel region (1 = sequential).
    pub threads: usize,
    /// When false, `wall_ms` is written as 0 so output files are bitwise
    /// reproducible end to end.
    pub record_timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            threads: 1,
            record_timing: true,
        }
    }
}

fn client_contribution(
    objective: &ModelObjective,
    partition: &Partition,
    global: &ParamVector,
    plan: &LocalPlan,
    training_seed: u64,
    round: usize,
    client_id: usize,
    gradients: bool,
) -> Result<Contribution> {
    let examples = &partition.clients()[client_id];
    let values = if gradients {
        client_update_uga(objective, global, examples, plan, training_seed, round, client_id)?
            .gradient
    } else {
        client_update_sgd(objective, global, examples, plan, training_seed, round, client_id)?
    };
    Ok(Contribution {
        client_id,
        examples: examples.len(),
        values,
    })
}

/// Run the selected clients, in parallel when `threads > 1`. Results land in
/// per-client slots, so the outcome is independent of scheduling.
fn run_clients(
    objective: &ModelObjective,
    partition: &Partition,
    selected: &[usize],
    global: &ParamVector,
    plan: &LocalPlan,
    training_seed: u64,
    round: usize,
    gradients: bool,
    threads: usize,
) -> Result<Vec<Contribution>> {
    let mut slots: Vec<Option<Result<Contribution>>> = Vec::new();
    slots.resize_with(selected.len(), || None);

    if threads <= 1 || selected.len() <= 1 {
        for (slot, &client_id) in slots.iter_mut().zip(selected) {
            *slot = Some(client_contribution(
                objective, partition, global, plan, training_seed, round, client_id, gradients,
            ));
        }
    } else {
        let chunk = selected.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (slot_chunk, id_chunk) in slots.chunks_mut(chunk).zip(selected.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, &client_id) in slot_chunk.iter_mut().zip(id_chunk) {
                        *slot = Some(client_contribution(
                            objective, partition, global, plan, training_seed, round, client_id,
                            gradients,
                        ));
                    }
                });
            }
        });
    }

    slots
        .into_iter()
        .map(|slot| slot.expect("every selected client produces a contribution"))
        .collect()
}

/// Execute the full round loop. `on_record` fires after every round (all
/// rounds, not just eval rounds) so callers can stream output as they like.
pub fn run_training(
    prepared: &PreparedRun,
    options: &RunOptions,
    mut on_record: impl FnMut(&RoundRecord) -> Result<()>,
) -> Result<RunOutput> {
    let config = &prepared.config;
    let k = prepared.partition.num_clients();
    let m = config.clients_per_round();
    let rounds = config.federation.rounds;
    let training_seed = config.seeds.training;

    let client_lr0 = config.client_lr0();
    let server_lr0 = config.server_lr0();
    let meta_lr0 = config.meta_lr0();
    let decay = config.optim.decay;

    let mut w = config.model.init_params(config.seeds.init)?;
    let mut records = Vec::with_capacity(rounds);

    for t in 0..rounds {
        let round = t + 1;
        let started = Instant::now();
        let step = |lr0: f64| match config.optim.decay_scope {
            DecayScope::All => lr_at(lr0, decay, t),
            DecayScope::Client => lr0,
        };

        let selected = select_clients(k, m, training_seed, t).map_err(|e| e.in_round(round))?;
        let plan = LocalPlan {
            epochs: config.federation.local_epochs,
            batch_size: config.federation.batch_size,
            lr: lr_at(client_lr0, decay, t),
            prox_mu: if config.algorithm.uses_prox() {
                config.optim.prox_mu
            } else {
                0.0
            },
        };

        let contributions = run_clients(
            &prepared.objective,
            &prepared.partition,
            &selected,
            &w,
            &plan,
            training_seed,
            t,
            config.algorithm.aggregates_gradients(),
            options.threads,
        )
        .map_err(|e| e.in_round(round))?;

        w = if config.algorithm.aggregates_gradients() {
            aggregate_gradients(&w, &contributions, step(server_lr0))
        } else {
            aggregate_params(&contributions)
        }
        .map_err(|e| e.in_round(round))?;

        let (meta_loss_before, meta_loss_after) = if config.algorithm.has_meta_step() {
            let update = meta_update(
                &prepared.meta.objective,
                &w,
                &prepared.meta.examples,
                step(meta_lr0),
                config.optim.meta_steps,
            )
            .map_err(|e| e.in_round(round))?;
            w = update.params;
            (Some(update.loss_before), Some(update.loss_after))
        } else {
            (None, None)
        };

        let eval = if round % config.federation.eval_every == 0 || round == rounds {
            Some(
                evaluate(&config.model, &w, &prepared.test, EVAL_BATCH)
                    .map_err(|e| e.in_round(round))?,
            )
        } else {
            None
        };

        let record = RoundRecord {
            round,
            selected,
            eval,
            meta_loss_before,
            meta_loss_after,
            wall_ms: if options.record_timing {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        on_record(&record).map_err(|e| e.in_round(round))?;
        records.push(record);
    }

    Ok(RunOutput {
        records,
        final_params: w,
    })
}

// ── metrics output ──────────────────────────────────────────────────────────

pub const CSV_HEADER: &str = "round,algorithm,accuracy,loss,meta_loss,selected_clients,wall_ms";

/// CSV row for an eval round; `None` for rounds without evaluation.
pub fn csv_row(record: &RoundRecord, algorithm: Algorithm) -> Option<String> {
    let eval = record.eval.as_ref()?;
    let meta = record
        .meta_loss_after
        .map(|l| l.to_string())
        .unwrap_or_default();
    let ids: Vec<String> = record.selected.iter().map(|id| id.to_string()).collect();
    Some(format!(
        "{},{},{},{},{},{},{}",
        record.round,
        algorithm,
        eval.accuracy,
        eval.loss,
        meta,
        ids.join(";"),
        record.wall_ms
    ))
}

/// The `(round, accuracy)` series of eval rounds, for milestone reporting.
pub fn eval_series(records: &[RoundRecord]) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter_map(|r| r.eval.as_ref().map(|e| (r.round, e.accuracy)))
        .collect()
}

/// First round whose trailing-mean accuracy (over up to `window` eval rows)
/// reaches `threshold`; `None` if the run never gets there.
pub fn milestone_round(evals: &[(usize, f64)], threshold: f64, window: usize) -> Option<usize> {
    let window = window.max(1);
    for (i, &(round, _)) in evals.iter().enumerate() {
        let lo = (i + 1).saturating_sub(window);
        let slice = &evals[lo..=i];
        let mean = slice.iter().map(|&(_, a)| a).sum::<f64>() / slice.len() as f64;
        if mean >= threshold {
            return Some(round);
        }
    }
    None
}

/// Convergence accuracy: mean over the last `window` eval rows.
pub fn final_accuracy(evals: &[(usize, f64)], window: usize) -> Option<f64> {
    if evals.is_empty() {
        return None;
    }
    let lo = evals.len().saturating_sub(window.max(1));
    let tail = &evals[lo..];
    Some(tail.iter().map(|&(_, a)| a).sum::<f64>() / tail.len() as f64)
}

// ── run manifest ────────────────────────────────────────────────────────────

/// Mirror of the config plus a content hash of the partition manifest, written
/// next to the metrics so a result file can always be traced to its exact
/// client layout.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a> {
    pub config: &'a RunConfig,
    pub partition_sha256: String,
}

pub fn partition_sha256(manifest: &PartitionManifest) -> Result<String> {
    let json = manifest.to_json()?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl PreparedRun {
    pub fn run_manifest(&self) -> Result<String> {
        let manifest = RunManifest {
            config: &self.config,
            partition_sha256: partition_sha256(&self.partition_manifest)?,
        };
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        Ok(json)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::Objective;
    use crate::config::SeedConfig;
    use crate::datasets::{PartitionSpec, SynthSpec};
    use crate::models::Architecture;

    fn toy_config(algorithm: Algorithm) -> RunConfig {
        RunConfig {
            algorithm,
            model: Architecture::Logreg { inputs: 6, classes: 3 },
            data: crate::config::DataConfig {
                source: DataSource::Synth {
                    spec: SynthSpec {
                        examples_per_class: 60,
                        classes: 3,
                        dims: 6,
                        separation: 3.0,
                        seed: 17,
                        mean_seed: None,
                        mean_jitter: 0.0,
                    },
                },
                partition: PartitionSpec::Iid { k: 4 },
                test_fraction: 0.2,
                meta_fraction: 0.05,
                overlap: None,
            },
            federation: crate::config::FederationConfig {
                client_fraction: 0.5,
                local_epochs: 2,
                batch_size: 8,
                rounds: 4,
                eval_every: 1,
            },
            optim: crate::config::OptimConfig {
                lr: 0.05,
                server_lr: None,
                meta_lr: None,
                decay: 0.992,
                decay_scope: DecayScope::All,
                prox_mu: 2e-4,
                meta_steps: 1,
                batch_ref: None,
            },
            seeds: SeedConfig {
                partition: 5,
                init: 6,
                training: 7,
            },
        }
    }

    #[test]
    fn learning_rate_schedule_matches_the_stated_decay() {
        assert_eq!(lr_at(0.002, 0.992, 0), 0.002);
        assert!((lr_at(0.002, 0.992, 1) - 0.001984).abs() < 1e-12);
        assert_eq!(lr_at(0.5, 1.0, 100), 0.5);
        assert!((lr_at(1.0, 0.9, 3) - 0.729).abs() < 1e-12);
    }

    #[test]
    fn client_selection_is_sorted_unique_and_deterministic() {
        let a = select_clients(10, 4, 3, 12).unwrap();
        let b = select_clients(10, 4, 3, 12).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]), "sorted, no duplicates");
        assert!(a.iter().all(|&id| id < 10));

        let c = select_clients(10, 4, 3, 13).unwrap();
        assert_ne!(a, c, "different rounds draw different sets");
        assert_eq!(select_clients(5, 5, 0, 0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(select_clients(5, 6, 0, 0).is_err());
        assert!(select_clients(5, 0, 0, 0).is_err());
    }

    #[test]
    fn client_selection_is_uniform_over_many_rounds() {
        let (k, m, rounds) = (10, 2, 5000);
        let mut hits = vec![0usize; k];
        for t in 0..rounds {
            for id in select_clients(k, m, 42, t).unwrap() {
                hits[id] += 1;
            }
        }
        for (id, &h) in hits.iter().enumerate() {
            let freq = h as f64 / rounds as f64;
            assert!(
                (0.18..=0.22).contains(&freq),
                "client {id} selected at frequency {freq}"
            );
        }
    }

    #[test]
    fn prepared_split_sizes_follow_the_fractions() {
        let config = toy_config(Algorithm::Fedavg);
        let prepared = prepare(&config).unwrap();
        // 180 examples: test 20% = 36, pool 144; meta 5% of 144 = 7; train 137
        assert_eq!(prepared.test.len(), 36);
        assert_eq!(prepared.meta.examples.len(), 7);
        assert_eq!(prepared.partition.total_examples(), 137);
        assert_eq!(prepared.objective.data().len(), 144); // train ++ meta
        // meta indices point at the appended rows
        assert_eq!(prepared.meta.examples[0], 137);

        let manifest = prepared.run_manifest().unwrap();
        assert!(manifest.contains("partition_sha256"));
    }

    #[test]
    fn fedshare_partition_grows_by_the_share_size() {
        let plain = prepare(&toy_config(Algorithm::Fedavg)).unwrap();
        let shared = prepare(&toy_config(Algorithm::Fedshare)).unwrap();
        assert_eq!(
            shared.partition.total_examples(),
            plain.partition.total_examples() + shared.meta.examples.len()
        );
        // client data of other algorithms is untouched by the carve
        assert_eq!(plain.partition.total_examples(), 137);
    }

    #[test]
    fn one_step_full_batch_fedavg_equals_the_central_gradient_step() {
        let mut config = toy_config(Algorithm::Fedavg);
        config.federation = crate::config::FederationConfig {
            client_fraction: 1.0,
            local_epochs: 1,
            batch_size: 100_000, // full batch
            rounds: 1,
            eval_every: 1,
        };
        let prepared = prepare(&config).unwrap();
        let out = run_training(&prepared, &RunOptions::default(), |_| Ok(())).unwrap();

        // manual: w1 = sum_k (n_k/n) (w0 - lr * g_k)
        let w0 = config.model.init_params(config.seeds.init).unwrap();
        let lr = config.client_lr0();
        let total: usize = prepared.partition.total_examples();
        let mut want = ParamVector::zeros(w0.layout().clone());
        for client in prepared.partition.clients() {
            let g = prepared.objective.grad(&w0, client).unwrap();
            let mut local = w0.clone();
            local.add_scaled(&g, -lr).unwrap();
            want.add_scaled(&local, client.len() as f64 / total as f64)
                .unwrap();
        }
        assert!(
            out.final_params.max_abs_diff(&want).unwrap() <= 1e-12,
            "diff {}",
            out.final_params.max_abs_diff(&want).unwrap()
        );
    }

    #[test]
    fn fedmeta_uga_with_zero_meta_lr_reduces_to_uga() {
        let mut meta_config = toy_config(Algorithm::FedmetaUga);
        meta_config.optim.meta_lr = Some(0.0);
        let mut uga_config = meta_config.clone();
        uga_config.algorithm = Algorithm::Uga;

        let meta_out =
            run_training(&prepare(&meta_config).unwrap(), &RunOptions::default(), |_| Ok(()))
                .unwrap();
        let uga_out =
            run_training(&prepare(&uga_config).unwrap(), &RunOptions::default(), |_| Ok(()))
                .unwrap();

        assert_eq!(
            meta_out.final_params.values(),
            uga_out.final_params.values(),
            "a zero meta step must not move the parameters"
        );
        for (a, b) in meta_out.records.iter().zip(&uga_out.records) {
            assert_eq!(a.eval.as_ref().unwrap(), b.eval.as_ref().unwrap());
            assert_eq!(a.selected, b.selected);
        }
        // and the meta diagnostics actually ran on the meta branch
        let r = &meta_out.records[0];
        assert_eq!(r.meta_loss_before, r.meta_loss_after);
        assert!(uga_out.records[0].meta_loss_before.is_none());
    }

    #[test]
    fn reruns_and_thread_counts_give_bitwise_identical_results() {
        for algorithm in [Algorithm::Fedprox, Algorithm::FedmetaUga] {
            let config = toy_config(algorithm);
            let no_timing = RunOptions { threads: 1, record_timing: false };
            let threaded = RunOptions { threads: 4, record_timing: false };

            let a = run_training(&prepare(&config).unwrap(), &no_timing, |_| Ok(())).unwrap();
            let b = run_training(&prepare(&config).unwrap(), &no_timing, |_| Ok(())).unwrap();
            let c = run_training(&prepare(&config).unwrap(), &threaded, |_| Ok(())).unwrap();

            assert_eq!(a.final_params.values(), b.final_params.values());
            assert_eq!(a.final_params.values(), c.final_params.values());
            let rows = |out: &RunOutput| -> Vec<String> {
                out.records
                    .iter()
                    .filter_map(|r| csv_row(r, algorithm))
                    .collect()
            };
            assert_eq!(rows(&a), rows(&b));
            assert_eq!(rows(&a), rows(&c));
        }
    }

    #[test]
    fn eval_cadence_honors_eval_every_and_the_final_round() {
        let mut config = toy_config(Algorithm::Fedavg);
        config.federation.rounds = 7;
        config.federation.eval_every = 3;
        let out =
            run_training(&prepare(&config).unwrap(), &RunOptions::default(), |_| Ok(())).unwrap();
        let evaluated: Vec<usize> = out
            .records
            .iter()
            .filter(|r| r.eval.is_some())
            .map(|r| r.round)
            .collect();
        assert_eq!(evaluated, vec![3, 6, 7]);
        assert_eq!(out.records.len(), 7, "every round is recorded");
    }

    #[test]
    fn csv_rows_are_formatted_as_documented() {
        let record = RoundRecord {
            round: 3,
            selected: vec![1, 4],
            eval: Some(EvalMetrics { accuracy: 0.75, loss: 1.25 }),
            meta_loss_before: Some(0.625),
            meta_loss_after: Some(0.5),
            wall_ms: 7,
        };
        assert_eq!(
            csv_row(&record, Algorithm::Fedmeta).unwrap(),
            "3,fedmeta,0.75,1.25,0.5,1;4,7"
        );
        let silent = RoundRecord { eval: None, ..record };
        assert!(csv_row(&silent, Algorithm::Fedmeta).is_none());

        let plain = RoundRecord {
            round: 1,
            selected: vec![0],
            eval: Some(EvalMetrics { accuracy: 0.5, loss: 2.0 }),
            meta_loss_before: None,
            meta_loss_after: None,
            wall_ms: 0,
        };
        assert_eq!(
            csv_row(&plain, Algorithm::Fedavg).unwrap(),
            "1,fedavg,0.5,2,,0,0"
        );
    }

    #[test]
    fn milestones_use_the_trailing_mean() {
        // accuracy 0.69 through round 11, then 1.0: the 5-row trailing mean
        // first clears 0.70 at round 12 ((4*0.69 + 1.0)/5 = 0.752).
        let evals: Vec<(usize, f64)> = (1..=20)
            .map(|r| (r, if r < 12 { 0.69 } else { 1.0 }))
            .collect();
        assert_eq!(milestone_round(&evals, 0.70, 5), Some(12));
        assert_eq!(milestone_round(&evals, 0.69, 5), Some(1));
        assert_eq!(milestone_round(&evals, 0.999, 5), Some(16));
        assert_eq!(milestone_round(&evals, 1.01, 5), None);

        let final_acc = final_accuracy(&evals, 10).unwrap();
        // rounds 11..=20: one 0.69 row and nine 1.0 rows
        assert!((final_acc - (0.69 + 9.0) / 10.0).abs() < 1e-12);
        assert_eq!(final_accuracy(&[], 10), None);
    }

    #[test]
    fn overlap_mode_builds_meta_and_holdout_from_the_pool() {
        let mut config = toy_config(Algorithm::Fedmeta);
        config.data.partition = PartitionSpec::LabelSkew { k: 6, classes_per_client: 2 };
        config.data.meta_fraction = 0.1;
        config.data.overlap = Some(crate::config::OverlapConfig {
            rate: 0.5,
            auxiliary: SynthSpec {
                examples_per_class: 60,
                classes: 3,
                dims: 6,
                separation: 3.0,
                seed: 91,
                mean_seed: None,
                mean_jitter: 0.0,
            },
            auxiliary_partition: PartitionSpec::LabelSkew { k: 6, classes_per_client: 2 },
        });
        let prepared = prepare(&config).unwrap();
        // training partition covers the whole primary dataset
        assert_eq!(prepared.partition.total_examples(), 180);
        assert_eq!(prepared.objective.data().len(), 180);
        // meta + holdout come from the 6-client source pool
        assert!(!prepared.meta.examples.is_empty());
        assert!(prepared.test.len() > 0);
        assert_eq!(
            prepared.meta.objective.data().len(),
            prepared.meta.examples.len()
        );

        let out =
            run_training(&prepared, &RunOptions { threads: 2, record_timing: false }, |_| Ok(()))
                .unwrap();
        assert!(out.records.iter().all(|r| r.meta_loss_after.is_some()));
    }
}

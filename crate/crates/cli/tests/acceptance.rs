//! Acceptance gate: every release-blocking property of the simulator, one
//! test per criterion, each printing a single PASS/FAIL verdict line (visible
//! under `--nocapture`). Oracles are computed by independent means — central
//! finite differences, closed forms, hand-weighted sums — never by the code
//! path under test.

use std::fs;
use std::process::Command;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use fedsim_core::config::{
    Algorithm, DataConfig, DataSource, DecayScope, FederationConfig, OptimConfig, OverlapConfig,
    RunConfig, SeedConfig,
};
use fedsim_core::datasets::{
    partition_label_skew, synth_classification, PartitionSpec, SynthSpec,
};
use fedsim_core::fed::{
    aggregate_params, client_update_sgd, client_update_uga, Contribution, LocalPlan, Objective,
};
use fedsim_core::models::{Architecture, ModelObjective};
use fedsim_core::orchestrator::{
    eval_series, final_accuracy, milestone_round, prepare, run_training, RunOptions,
    FINAL_ACCURACY_WINDOW, MILESTONE_WINDOW,
};
use fedsim_core::params::{ParamLayout, ParamVector};

const FD_EPS: f64 = 1e-5;

fn verdict(number: usize, name: &str, passed: bool, detail: &str) {
    println!(
        "criterion {number} ({name}): {} — {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {number} ({name}) failed: {detail}");
}

fn unit_direction(rng: &mut ChaCha8Rng, layout: &Arc<ParamLayout>) -> ParamVector {
    let normal = StandardNormal;
    let mut values: Vec<f64> = (0..layout.total()).map(|_| normal.sample(rng)).collect();
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    values.iter_mut().for_each(|v| *v /= norm);
    ParamVector::from_values(layout.clone(), values).unwrap()
}

fn relative_error(got: f64, want: f64) -> f64 {
    (got - want).abs() / got.abs().max(want.abs()).max(1e-12)
}

fn median_f64(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sorted[sorted.len() / 2]
}

/// Milestones that were never reached sort after every real round count.
fn median_rounds(values: &[Option<usize>]) -> Option<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by_key(|m| m.unwrap_or(usize::MAX));
    sorted[sorted.len() / 2]
}

// ── criterion 1: UGA matches finite differences of the unrolled objective ────

#[test]
fn criterion_1_uga_exactness() {
    let started = Instant::now();
    let arch = Architecture::Mlp { inputs: 20, hidden: vec![16], classes: 4 };
    let data = synth_classification(&SynthSpec {
        examples_per_class: 16,
        classes: 4,
        dims: 20,
        separation: 2.0,
        seed: 31,
        mean_seed: None,
        mean_jitter: 0.0,
    })
    .unwrap();
    assert_eq!(data.len(), 64);
    let objective = ModelObjective::new(arch.clone(), Arc::new(data)).unwrap();
    let theta = arch.init_params(3).unwrap();
    let all: Vec<usize> = (0..64).collect();
    let plan = LocalPlan { epochs: 3, batch_size: 16, lr: 0.05, prox_mu: 0.0 };

    let update = client_update_uga(&objective, &theta, &all, &plan, 17, 0, 0).unwrap();

    // F(w) = full-batch loss after the E-1 traced epochs, replayed from
    // scratch on the same shuffle schedule.
    let unrolled = |w: &ParamVector| -> f64 {
        let inner = LocalPlan { epochs: plan.epochs - 1, ..plan };
        let endpoint = client_update_sgd(&objective, w, &all, &inner, 17, 0, 0).unwrap();
        objective.loss(&endpoint, &all).unwrap()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let d = unit_direction(&mut rng, theta.layout());
        let mut plus = theta.clone();
        plus.add_scaled(&d, FD_EPS).unwrap();
        let mut minus = theta.clone();
        minus.add_scaled(&d, -FD_EPS).unwrap();
        let fd = (unrolled(&plus) - unrolled(&minus)) / (2.0 * FD_EPS);
        worst = worst.max(relative_error(update.gradient.dot(&d).unwrap(), fd));
    }
    let elapsed = started.elapsed();
    verdict(
        1,
        "uga exactness",
        worst <= 1e-5 && elapsed.as_secs() <= 30,
        &format!("max rel err {worst:.3e} over 50 directions (tol 1e-5), {} ms", elapsed.as_millis()),
    );
}

// ── criteria 2 and 3 share a disjoint non-IID five-client fixture ────────────

struct FiveClients {
    objective: ModelObjective,
    theta: ParamVector,
    clients: Vec<Vec<usize>>,
    all: Vec<usize>,
}

fn five_clients() -> FiveClients {
    let arch = Architecture::Logreg { inputs: 12, classes: 10 };
    let data = synth_classification(&SynthSpec {
        examples_per_class: 30,
        classes: 10,
        dims: 12,
        separation: 2.0,
        seed: 77,
        mean_seed: None,
        mean_jitter: 0.0,
    })
    .unwrap();
    let partition = partition_label_skew(&data, 5, 2, 55).unwrap();
    let clients = partition.clients().to_vec();
    let all: Vec<usize> = (0..data.len()).collect();
    let objective = ModelObjective::new(arch.clone(), Arc::new(data)).unwrap();
    let theta = arch.init_params(8).unwrap();
    FiveClients { objective, theta, clients, all }
}

#[test]
fn criterion_2_one_step_unbiasedness() {
    let fx = five_clients();
    let n = fx.all.len() as f64;
    let mut aggregate = ParamVector::zeros(fx.theta.layout().clone());
    for examples in &fx.clients {
        let g = fx.objective.grad(&fx.theta, examples).unwrap();
        aggregate.add_scaled(&g, examples.len() as f64 / n).unwrap();
    }
    let central = fx.objective.grad(&fx.theta, &fx.all).unwrap();
    let err = aggregate.max_abs_diff(&central).unwrap();
    verdict(
        2,
        "one-step unbiasedness",
        err <= 1e-10,
        &format!("L-inf {err:.3e} between weighted client gradients and the central gradient (tol 1e-10)"),
    );
}

#[test]
fn criterion_3_fedavg_one_step_equivalence() {
    let fx = five_clients();
    let n = fx.all.len() as f64;
    let lr = 0.2;
    let plan = LocalPlan { epochs: 1, batch_size: usize::MAX, lr, prox_mu: 0.0 };

    let contributions: Vec<Contribution> = fx
        .clients
        .iter()
        .enumerate()
        .map(|(id, examples)| Contribution {
            client_id: id,
            examples: examples.len(),
            values: client_update_sgd(&fx.objective, &fx.theta, examples, &plan, 5, 0, id)
                .unwrap(),
        })
        .collect();
    let averaged = aggregate_params(&contributions).unwrap();

    let mut expected = fx.theta.clone();
    for examples in &fx.clients {
        let g = fx.objective.grad(&fx.theta, examples).unwrap();
        expected.add_scaled(&g, -lr * examples.len() as f64 / n).unwrap();
    }

    let err = averaged.max_abs_diff(&expected).unwrap();
    verdict(
        3,
        "fedavg one-step equivalence",
        err <= 1e-12,
        &format!("L-inf {err:.3e} against the hand-weighted descent step (tol 1e-12)"),
    );
}

// ── criterion 4: HVP against gradient differences, linearity, symmetry ───────

#[test]
fn criterion_4_hvp_oracle() {
    let arch = Architecture::Mlp { inputs: 10, hidden: vec![8], classes: 3 };
    let data = synth_classification(&SynthSpec {
        examples_per_class: 20,
        classes: 3,
        dims: 10,
        separation: 2.0,
        seed: 41,
        mean_seed: None,
        mean_jitter: 0.0,
    })
    .unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    let objective = ModelObjective::new(arch.clone(), Arc::new(data)).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(4040);
    let mut worst_fd = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut worst_lin = 0.0f64;
    for pair in 0..20 {
        let theta = arch.init_params(100 + pair).unwrap();
        let v = unit_direction(&mut rng, theta.layout());
        let u = unit_direction(&mut rng, theta.layout());
        let hv = objective.hvp(&theta, &all, &v).unwrap();
        let hu = objective.hvp(&theta, &all, &u).unwrap();

        let mut plus = theta.clone();
        plus.add_scaled(&v, FD_EPS).unwrap();
        let mut minus = theta.clone();
        minus.add_scaled(&v, -FD_EPS).unwrap();
        let mut fd = objective.grad(&plus, &all).unwrap();
        fd.add_scaled(&objective.grad(&minus, &all).unwrap(), -1.0).unwrap();
        fd.scale(1.0 / (2.0 * FD_EPS));
        worst_fd = worst_fd
            .max(fd.sub(&hv).unwrap().l2_norm() / fd.l2_norm().max(hv.l2_norm()).max(1e-12));

        worst_sym = worst_sym.max((u.dot(&hv).unwrap() - v.dot(&hu).unwrap()).abs());

        // H(av + bu) must equal a·Hv + b·Hu.
        let (a, b) = (0.7, -1.3);
        let mut combo = v.clone();
        combo.scale(a);
        combo.add_scaled(&u, b).unwrap();
        let h_combo = objective.hvp(&theta, &all, &combo).unwrap();
        let mut expected = hv.clone();
        expected.scale(a);
        expected.add_scaled(&hu, b).unwrap();
        worst_lin = worst_lin.max(h_combo.max_abs_diff(&expected).unwrap());
    }
    verdict(
        4,
        "hvp oracle",
        worst_fd <= 1e-5 && worst_sym <= 1e-8 && worst_lin <= 1e-8,
        &format!(
            "max rel err {worst_fd:.3e} over 20 pairs (tol 1e-5), symmetry {worst_sym:.3e}, linearity {worst_lin:.3e} (tol 1e-8)"
        ),
    );
}

// ── criterion 5: the drift bias grows with local steps; UGA stays exact ──────

/// Two-dimensional quadratic `loss_i = 1/2 (w-c_i)' A_i (w-c_i)` with closed
/// forms for every derivative — the oracle objective.
struct Quad2 {
    layout: Arc<ParamLayout>,
    examples: Vec<([[f64; 2]; 2], [f64; 2])>,
}

fn matvec(a: &[[f64; 2]; 2], x: [f64; 2]) -> [f64; 2] {
    [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]]
}

impl Quad2 {
    fn point(&self, w: [f64; 2]) -> ParamVector {
        ParamVector::from_values(self.layout.clone(), w.to_vec()).unwrap()
    }
}

impl Objective for Quad2 {
    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }
    fn loss(&self, params: &ParamVector, batch: &[usize]) -> fedsim_core::Result<f64> {
        let w = [params.values()[0], params.values()[1]];
        let mut sum = 0.0;
        for &i in batch {
            let (a, c) = &self.examples[i];
            let d = [w[0] - c[0], w[1] - c[1]];
            let ad = matvec(a, d);
            sum += 0.5 * (d[0] * ad[0] + d[1] * ad[1]);
        }
        Ok(sum / batch.len() as f64)
    }
    fn grad(&self, params: &ParamVector, batch: &[usize]) -> fedsim_core::Result<ParamVector> {
        let w = [params.values()[0], params.values()[1]];
        let mut g = [0.0, 0.0];
        for &i in batch {
            let (a, c) = &self.examples[i];
            let ad = matvec(a, [w[0] - c[0], w[1] - c[1]]);
            g[0] += ad[0];
            g[1] += ad[1];
        }
        let n = batch.len() as f64;
        Ok(self.point([g[0] / n, g[1] / n]))
    }
    fn hvp(
        &self,
        _params: &ParamVector,
        batch: &[usize],
        v: &ParamVector,
    ) -> fedsim_core::Result<ParamVector> {
        let vv = [v.values()[0], v.values()[1]];
        let mut h = [0.0, 0.0];
        for &i in batch {
            let (a, _) = &self.examples[i];
            let av = matvec(a, vv);
            h[0] += av[0];
            h[1] += av[1];
        }
        let n = batch.len() as f64;
        Ok(self.point([h[0] / n, h[1] / n]))
    }
}

#[test]
fn criterion_5_bias_growth_witness() {
    let started = Instant::now();
    // Two deliberately disagreeing quadratic clients.
    let a1 = [[3.0, 0.0], [0.0, 0.5]];
    let c1 = [1.5, -1.0];
    let a2 = [[1.0, 0.3], [0.3, 2.0]];
    let c2 = [-2.0, 2.5];
    let (n1, n2) = (40usize, 60usize);
    let eta = 0.05;

    let layout = Arc::new(ParamLayout::new(vec![("w", vec![2])]).unwrap());
    let mut examples = vec![(a1, c1); n1];
    examples.extend(vec![(a2, c2); n2]);
    let quad = Quad2 { layout, examples };
    let client1: Vec<usize> = (0..n1).collect();
    let client2: Vec<usize> = (n1..n1 + n2).collect();
    let all: Vec<usize> = (0..n1 + n2).collect();
    let w0 = quad.point([0.0, 0.0]);
    let n = (n1 + n2) as f64;

    let mut last_bias = -1.0f64;
    let mut monotone = true;
    let mut worst_uga = 0.0f64;
    let mut biases = Vec::new();
    for &steps in &[1usize, 2, 4, 8] {
        let plan = LocalPlan { epochs: steps, batch_size: usize::MAX, lr: eta, prox_mu: 0.0 };

        // The gradient FedAvg implicitly applies after `steps` local steps...
        let w1 = client_update_sgd(&quad, &w0, &client1, &plan, 0, 0, 0).unwrap();
        let w2 = client_update_sgd(&quad, &w0, &client2, &plan, 0, 0, 1).unwrap();
        let mut implied = ParamVector::zeros(quad.layout.clone());
        implied.add_scaled(&w0.sub(&w1).unwrap(), n1 as f64 / n / eta).unwrap();
        implied.add_scaled(&w0.sub(&w2).unwrap(), n2 as f64 / n / eta).unwrap();

        // ...versus the gradient the centralized trajectory applies.
        let wc = client_update_sgd(&quad, &w0, &all, &plan, 0, 0, 2).unwrap();
        let mut central = ParamVector::zeros(quad.layout.clone());
        central.add_scaled(&w0.sub(&wc).unwrap(), 1.0 / eta).unwrap();

        let bias = implied.sub(&central).unwrap().l2_norm();
        monotone &= bias >= last_bias;
        last_bias = bias;
        biases.push(bias);

        // UGA against the closed form (I - ηA)^s' A (w_s - c) per client.
        for (a, c, examples, id) in
            [(&a1, c1, &client1, 0usize), (&a2, c2, &client2, 1usize)]
        {
            let uga_plan = LocalPlan { epochs: steps + 1, ..plan };
            let update =
                client_update_uga(&quad, &w0, examples, &uga_plan, 0, 0, id).unwrap();
            let step_matrix = [
                [1.0 - eta * a[0][0], -eta * a[0][1]],
                [-eta * a[1][0], 1.0 - eta * a[1][1]],
            ];
            let mut w = [0.0f64, 0.0];
            for _ in 0..steps {
                let g = matvec(a, [w[0] - c[0], w[1] - c[1]]);
                w = [w[0] - eta * g[0], w[1] - eta * g[1]];
            }
            let mut expected = matvec(a, [w[0] - c[0], w[1] - c[1]]);
            for _ in 0..steps {
                expected = matvec(&step_matrix, expected);
            }
            let got = update.gradient;
            let err = (got.values()[0] - expected[0])
                .abs()
                .max((got.values()[1] - expected[1]).abs());
            worst_uga = worst_uga.max(err);
        }
    }
    let elapsed = started.elapsed();
    verdict(
        5,
        "bias growth witness",
        monotone && worst_uga <= 1e-8 && elapsed.as_secs() <= 5,
        &format!(
            "bias norms {:?} nondecreasing, uga vs closed form {worst_uga:.3e} (tol 1e-8), {} ms",
            biases.iter().map(|b| (b * 1e4).round() / 1e4).collect::<Vec<_>>(),
            elapsed.as_millis()
        ),
    );
}

// ── criteria 6 and 7 share one batch of trend runs ───────────────────────────

const TREND_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn trend_config(algorithm: Algorithm, training_seed: u64) -> RunConfig {
    RunConfig {
        algorithm,
        model: Architecture::Logreg { inputs: 20, classes: 10 },
        data: DataConfig {
            source: DataSource::Synth {
                spec: SynthSpec {
                    examples_per_class: 240,
                    classes: 10,
                    dims: 20,
                    separation: 2.5,
                    seed: 424242,
                    mean_seed: None,
                    mean_jitter: 0.0,
                },
            },
            partition: PartitionSpec::LabelSkew { k: 20, classes_per_client: 2 },
            test_fraction: 0.2,
            meta_fraction: 0.01,
            overlap: None,
        },
        federation: FederationConfig {
            client_fraction: 0.2,
            local_epochs: 5,
            batch_size: 16,
            rounds: 150,
            eval_every: 1,
        },
        optim: OptimConfig {
            lr: 0.01,
            server_lr: Some(2.0),
            meta_lr: None,
            decay: 0.992,
            decay_scope: DecayScope::All,
            prox_mu: 2e-4,
            meta_steps: 1,
            batch_ref: None,
        },
        seeds: SeedConfig { partition: 90210, init: 31337, training: training_seed },
    }
}

struct AlgoTrend {
    milestones: Vec<Option<usize>>,
    finals: Vec<f64>,
}

struct TrendData {
    fedavg: AlgoTrend,
    uga: AlgoTrend,
    fedmeta: AlgoTrend,
    fedmeta_uga: AlgoTrend,
    wall_secs: u64,
}

static TREND: OnceLock<TrendData> = OnceLock::new();

fn run_trend_algo(algorithm: Algorithm) -> AlgoTrend {
    let mut milestones = Vec::new();
    let mut finals = Vec::new();
    for seed in TREND_SEEDS {
        let prepared = prepare(&trend_config(algorithm, seed)).unwrap();
        let options = RunOptions { threads: 4, record_timing: false };
        let output = run_training(&prepared, &options, |_| Ok(())).unwrap();
        let series = eval_series(&output.records);
        milestones.push(milestone_round(&series, 0.70, MILESTONE_WINDOW));
        finals.push(final_accuracy(&series, FINAL_ACCURACY_WINDOW).unwrap());
    }
    AlgoTrend { milestones, finals }
}

fn trend_data() -> &'static TrendData {
    TREND.get_or_init(|| {
        let started = Instant::now();
        let fedavg = run_trend_algo(Algorithm::Fedavg);
        let uga = run_trend_algo(Algorithm::Uga);
        let fedmeta = run_trend_algo(Algorithm::Fedmeta);
        let fedmeta_uga = run_trend_algo(Algorithm::FedmetaUga);
        TrendData { fedavg, uga, fedmeta, fedmeta_uga, wall_secs: started.elapsed().as_secs() }
    })
}

#[test]
fn criterion_6_directional_trend() {
    let data = trend_data();
    let mut faster = 0;
    for seed in 0..TREND_SEEDS.len() {
        let ours = data.fedmeta_uga.milestones[seed].unwrap_or(usize::MAX);
        let theirs = data.fedavg.milestones[seed].unwrap_or(usize::MAX);
        if ours < theirs {
            faster += 1;
        }
    }
    let ours_final = median_f64(&data.fedmeta_uga.finals);
    let theirs_final = median_f64(&data.fedavg.finals);
    verdict(
        6,
        "directional trend",
        faster >= 4 && ours_final >= theirs_final && data.wall_secs <= 600,
        &format!(
            "fedmeta_uga faster to 70% in {faster}/5 seeds ({:?} vs {:?}), median final {ours_final:.4} vs {theirs_final:.4}, {}s total",
            data.fedmeta_uga.milestones, data.fedavg.milestones, data.wall_secs
        ),
    );
}

#[test]
fn criterion_7_ablation_ordering() {
    let data = trend_data();
    let chain = |mu: usize, u: usize, fm: usize, fa: usize| -> bool {
        mu <= u.min(fm) && u.max(fm) <= fa
    };

    let median_of = |trend: &AlgoTrend| {
        median_rounds(&trend.milestones).map_or(usize::MAX, |r| r)
    };
    let medians_ok = chain(
        median_of(&data.fedmeta_uga),
        median_of(&data.uga),
        median_of(&data.fedmeta),
        median_of(&data.fedavg),
    );

    let mut per_seed = 0;
    for seed in 0..TREND_SEEDS.len() {
        let at = |trend: &AlgoTrend| trend.milestones[seed].unwrap_or(usize::MAX);
        if chain(at(&data.fedmeta_uga), at(&data.uga), at(&data.fedmeta), at(&data.fedavg)) {
            per_seed += 1;
        }
    }

    verdict(
        7,
        "ablation ordering",
        medians_ok && per_seed >= 3,
        &format!(
            "medians fedmeta_uga {:?} <= min/max(uga {:?}, fedmeta {:?}) <= fedavg {:?}; full chain in {per_seed}/5 seeds",
            median_rounds(&data.fedmeta_uga.milestones),
            median_rounds(&data.uga.milestones),
            median_rounds(&data.fedmeta.milestones),
            median_rounds(&data.fedavg.milestones),
        ),
    );
}

// ── criterion 8: robustness to the meta-set sourcing overlap ─────────────────

fn overlap_config(algorithm: Algorithm, rate: f64, training_seed: u64) -> RunConfig {
    let mut config = trend_config(algorithm, training_seed);
    config.federation.rounds = 100;
    config.optim.meta_lr = Some(0.3);
    if let DataSource::Synth { spec } = &mut config.data.source {
        spec.mean_seed = Some(5150);
    }
    config.data.overlap = Some(OverlapConfig {
        rate,
        auxiliary: SynthSpec {
            examples_per_class: 240,
            classes: 10,
            dims: 20,
            separation: 2.5,
            seed: 777777,
            mean_seed: Some(5150),
            mean_jitter: 1.5,
        },
        auxiliary_partition: PartitionSpec::LabelSkew { k: 20, classes_per_client: 2 },
    });
    config
}

#[test]
fn criterion_8_overlap_robustness() {
    let final_at = |algorithm: Algorithm, rate: f64, seed: u64| -> f64 {
        let prepared = prepare(&overlap_config(algorithm, rate, seed)).unwrap();
        let options = RunOptions { threads: 4, record_timing: false };
        let output = run_training(&prepared, &options, |_| Ok(())).unwrap();
        final_accuracy(&eval_series(&output.records), FINAL_ACCURACY_WINDOW).unwrap()
    };
    let drops = |algorithm: Algorithm| -> Vec<f64> {
        [1u64, 2, 3]
            .iter()
            .map(|&seed| final_at(algorithm, 1.0, seed) - final_at(algorithm, 0.0, seed))
            .collect()
    };
    let fedavg_drops = drops(Algorithm::Fedavg);
    let fedmeta_drops = drops(Algorithm::Fedmeta);
    let fedavg_drop = median_f64(&fedavg_drops);
    let fedmeta_drop = median_f64(&fedmeta_drops);
    verdict(
        8,
        "overlap robustness",
        fedmeta_drop < fedavg_drop,
        &format!(
            "median accuracy drop 100%→0% overlap: fedmeta {fedmeta_drop:.4} < fedavg {fedavg_drop:.4} (per-seed {fedmeta_drops:?} vs {fedavg_drops:?})"
        ),
    );
}

// ── criterion 9: byte determinism through the real binary ────────────────────

#[test]
fn criterion_9_byte_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = trend_config(Algorithm::FedmetaUga, 3);
    config.federation.rounds = 8;
    let config_path = dir.path().join("run.json");
    fs::write(&config_path, config.to_json().unwrap()).unwrap();

    let run = |name: &str, threads: &str| -> Vec<u8> {
        let out = dir.path().join(name);
        let output = Command::new(env!("CARGO_BIN_EXE_fedsim"))
            .args([
                "run",
                "--config",
                config_path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--threads",
                threads,
            ])
            .output()
            .expect("spawn fedsim");
        assert!(
            output.status.success(),
            "{}",
            String::from_utf8_lossy(&output.stderr)
        );
        fs::read(&out).unwrap()
    };

    let first = run("a.csv", "1");
    let second = run("b.csv", "1");
    let threaded = run("c.csv", "4");
    let repeat_ok = first == second;
    let threads_ok = first == threaded;
    verdict(
        9,
        "byte determinism",
        repeat_ok && threads_ok,
        &format!(
            "repeat run identical: {repeat_ok}; --threads 1 vs 4 identical: {threads_ok} ({} bytes)",
            first.len()
        ),
    );
}

// ── criterion 10: the meta step descends its own objective ───────────────────

#[test]
fn criterion_10_meta_descent() {
    let mut config = trend_config(Algorithm::Fedmeta, 1);
    config.federation.rounds = 100;
    config.optim.meta_lr = Some(1e-3);
    let prepared = prepare(&config).unwrap();
    let options = RunOptions { threads: 4, record_timing: false };
    let output = run_training(&prepared, &options, |_| Ok(())).unwrap();
    let total = output.records.len();
    let descents = output
        .records
        .iter()
        .filter(|r| r.meta_loss_after.unwrap() <= r.meta_loss_before.unwrap())
        .count();
    verdict(
        10,
        "meta descent",
        total == 100 && descents * 100 >= total * 99,
        &format!("meta loss non-increasing in {descents}/{total} rounds (need >= 99%)"),
    );
}

//! Built-in verification suite.
//!
//! Four checks compare the differentiation machinery against oracles that are
//! computed by independent means (central finite differences, hand-weighted
//! sums). They run on a small fixed model in a couple of seconds, so a binary
//! can re-certify its own numerics on any machine. Each check reports the
//! measured worst error next to the tolerance it was held to.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datasets::{synth_classification, SynthSpec};
use crate::error::Result;
use crate::fed::{client_update_sgd, client_update_uga, LocalPlan, Objective};
use crate::models::{Architecture, ModelObjective};
use crate::params::ParamVector;

/// Knobs for the suite. `gradient_perturbation` injects a uniform offset into
/// every component of each UGA client gradient before aggregation — a
/// negative control: a healthy build passes with 0.0 and must fail the UGA
/// check once the offset is measurable.
#[derive(Debug, Clone, Copy)]
pub struct SelftestOptions {
    pub gradient_perturbation: f64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions { gradient_perturbation: 0.0 }
    }
}

/// One line of the suite's verdict.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs every check and reports all outcomes (the suite never short-circuits,
/// so a broken gradient still lets the HVP check report its own state).
pub fn run(options: &SelftestOptions) -> Vec<CheckOutcome> {
    let fixture = match Fixture::new() {
        Ok(f) => f,
        Err(e) => {
            return vec![CheckOutcome {
                name: "fixture",
                passed: false,
                detail: format!("failed to build fixture: {e}"),
            }]
        }
    };
    [
        check("gradient-fd", gradient_check(&fixture)),
        check("hvp", hvp_check(&fixture)),
        check("uga-unbiasedness", uga_check(&fixture, options.gradient_perturbation)),
        check("one-step-equivalence", one_step_check(&fixture)),
    ]
    .into()
}

fn check(name: &'static str, result: Result<(bool, String)>) -> CheckOutcome {
    match result {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome { name, passed: false, detail: format!("error: {e}") },
    }
}

// ── fixture ──────────────────────────────────────────────────────────────────

const FD_EPS: f64 = 1e-5;

struct Fixture {
    objective: ModelObjective,
    theta: ParamVector,
    all: Vec<usize>,
}

impl Fixture {
    fn new() -> Result<Fixture> {
        let arch = Architecture::Mlp { inputs: 10, hidden: vec![8], classes: 3 };
        let data = synth_classification(&SynthSpec {
            examples_per_class: 20,
            classes: 3,
            dims: 10,
            separation: 2.0,
            seed: 2024,
            mean_seed: None,
            mean_jitter: 0.0,
        })?;
        let all: Vec<usize> = (0..data.len()).collect();
        let objective = ModelObjective::new(arch.clone(), Arc::new(data))?;
        let theta = arch.init_params(7)?;
        Ok(Fixture { objective, theta, all })
    }

    fn direction(&self, rng: &mut ChaCha8Rng) -> ParamVector {
        let normal = StandardNormal;
        let mut values: Vec<f64> =
            (0..self.theta.len()).map(|_| normal.sample(rng)).collect();
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        values.iter_mut().for_each(|v| *v /= norm);
        ParamVector::from_values(self.theta.layout().clone(), values).unwrap()
    }
}

fn relative_error(got: f64, want: f64) -> f64 {
    (got - want).abs() / got.abs().max(want.abs()).max(1e-12)
}

// ── checks ───────────────────────────────────────────────────────────────────

/// Reverse-mode gradient vs central differences of the loss along random
/// directions.
fn gradient_check(fx: &Fixture) -> Result<(bool, String)> {
    const DIRECTIONS: usize = 20;
    const TOL: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let grad = fx.objective.grad(&fx.theta, &fx.all)?;
    let mut worst = 0.0f64;
    for _ in 0..DIRECTIONS {
        let d = fx.direction(&mut rng);
        let mut plus = fx.theta.clone();
        plus.add_scaled(&d, FD_EPS)?;
        let mut minus = fx.theta.clone();
        minus.add_scaled(&d, -FD_EPS)?;
        let fd = (fx.objective.loss(&plus, &fx.all)? - fx.objective.loss(&minus, &fx.all)?)
            / (2.0 * FD_EPS);
        worst = worst.max(relative_error(grad.dot(&d)?, fd));
    }
    Ok((worst <= TOL, format!("max rel err {worst:.3e} over {DIRECTIONS} directions (tol {TOL:.0e})")))
}

/// Hessian-vector products vs central differences of the gradient, plus the
/// symmetry u'Hv = v'Hu that any true Hessian obeys.
fn hvp_check(fx: &Fixture) -> Result<(bool, String)> {
    const PAIRS: usize = 8;
    const TOL: f64 = 1e-5;
    const SYM_TOL: f64 = 1e-8;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut worst_sym = 0.0f64;
    for pair in 0..PAIRS {
        let theta = fx.objective.arch().init_params(40 + pair as u64)?;
        let v = fx.direction(&mut rng);
        let u = fx.direction(&mut rng);
        let hv = fx.objective.hvp(&theta, &fx.all, &v)?;

        let mut plus = theta.clone();
        plus.add_scaled(&v, FD_EPS)?;
        let mut minus = theta.clone();
        minus.add_scaled(&v, -FD_EPS)?;
        let mut fd = fx.objective.grad(&plus, &fx.all)?;
        fd.add_scaled(&fx.objective.grad(&minus, &fx.all)?, -1.0)?;
        fd.scale(1.0 / (2.0 * FD_EPS));
        let err = fd.sub(&hv)?.l2_norm() / fd.l2_norm().max(hv.l2_norm()).max(1e-12);
        worst = worst.max(err);

        let hu = fx.objective.hvp(&theta, &fx.all, &u)?;
        worst_sym = worst_sym.max((u.dot(&hv)? - v.dot(&hu)?).abs());
    }
    Ok((
        worst <= TOL && worst_sym <= SYM_TOL,
        format!("max rel err {worst:.3e} (tol {TOL:.0e}), symmetry {worst_sym:.3e} (tol {SYM_TOL:.0e})"),
    ))
}

/// The keep-trace client gradient, aggregated over disjoint clients, must be
/// the exact gradient of the composite objective
/// `G(w) = Σ_k (n_k/n) L_k(local_sgd_k(w))` — checked against central finite
/// differences of `G` itself along random directions.
fn uga_check(fx: &Fixture, perturbation: f64) -> Result<(bool, String)> {
    const DIRECTIONS: usize = 10;
    const TOL: f64 = 1e-5;
    let plan = LocalPlan { epochs: 3, batch_size: 8, lr: 0.05, prox_mu: 0.0 };
    let clients: [&[usize]; 3] = [&fx.all[0..20], &fx.all[20..40], &fx.all[40..60]];
    let n: f64 = fx.all.len() as f64;

    let mut aggregate = ParamVector::zeros(fx.theta.layout().clone());
    for (id, examples) in clients.iter().enumerate() {
        let update = client_update_uga(&fx.objective, &fx.theta, examples, &plan, 9, 0, id)?;
        let mut gradient = update.gradient;
        if perturbation != 0.0 {
            let values: Vec<f64> =
                gradient.values().iter().map(|v| v + perturbation).collect();
            gradient = ParamVector::from_values(gradient.layout().clone(), values)?;
        }
        aggregate.add_scaled(&gradient, examples.len() as f64 / n)?;
    }

    // G(w) evaluated from scratch: replay each client's traced epochs, then
    // measure its full-batch loss at the local endpoint.
    let composite = |w: &ParamVector| -> Result<f64> {
        let mut total = 0.0;
        for (id, examples) in clients.iter().enumerate() {
            let inner = LocalPlan { epochs: plan.epochs - 1, ..plan };
            let endpoint = client_update_sgd(&fx.objective, w, examples, &inner, 9, 0, id)?;
            total += fx.objective.loss(&endpoint, examples)? * examples.len() as f64 / n;
        }
        Ok(total)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for _ in 0..DIRECTIONS {
        let d = fx.direction(&mut rng);
        let mut plus = fx.theta.clone();
        plus.add_scaled(&d, FD_EPS)?;
        let mut minus = fx.theta.clone();
        minus.add_scaled(&d, -FD_EPS)?;
        let fd = (composite(&plus)? - composite(&minus)?) / (2.0 * FD_EPS);
        worst = worst.max(relative_error(aggregate.dot(&d)?, fd));
    }
    Ok((worst <= TOL, format!("max rel err {worst:.3e} over {DIRECTIONS} directions (tol {TOL:.0e})")))
}

/// One full-batch local step aggregated by example counts equals one
/// centralized gradient-descent step.
fn one_step_check(fx: &Fixture) -> Result<(bool, String)> {
    const TOL: f64 = 1e-12;
    let lr = 0.1;
    let plan = LocalPlan { epochs: 1, batch_size: usize::MAX, lr, prox_mu: 0.0 };
    let clients: [&[usize]; 5] =
        [&fx.all[0..12], &fx.all[12..24], &fx.all[24..36], &fx.all[36..48], &fx.all[48..60]];
    let n: f64 = fx.all.len() as f64;

    let mut averaged = ParamVector::zeros(fx.theta.layout().clone());
    for (id, examples) in clients.iter().enumerate() {
        let local = client_update_sgd(&fx.objective, &fx.theta, examples, &plan, 9, 0, id)?;
        averaged.add_scaled(&local, examples.len() as f64 / n)?;
    }

    let mut central = fx.theta.clone();
    central.add_scaled(&fx.objective.grad(&fx.theta, &fx.all)?, -lr)?;

    let err = averaged.max_abs_diff(&central)?;
    Ok((err <= TOL, format!("max abs diff {err:.3e} (tol {TOL:.0e})")))
}

//! Federated update rules: local SGD (with optional proximal term), the
//! keep-trace unbiased client gradient, parameter and gradient aggregation,
//! and the server-side meta update.
//!
//! Everything here is expressed against the [`Objective`] trait so the rules
//! can be unit-tested on analytic objectives with closed-form solutions and
//! then reused unchanged for real models.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::datasets::Partition;
use crate::error::{Error, Result};
use crate::params::{ParamLayout, ParamVector};

/// A differentiable training objective over `(parameters, example indices)`.
///
/// `loss` is the *mean* per-example loss over the batch; `grad` and `hvp` are
/// its exact gradient and Hessian-vector product. Implementations must be
/// deterministic: repeated calls with identical arguments return bitwise
/// identical results (stochastic pieces such as dropout must derive their
/// randomness from the batch, not from call order).
pub trait Objective: Sync {
    fn layout(&self) -> &Arc<ParamLayout>;
    fn loss(&self, params: &ParamVector, batch: &[usize]) -> Result<f64>;
    fn grad(&self, params: &ParamVector, batch: &[usize]) -> Result<ParamVector>;
    fn hvp(&self, params: &ParamVector, batch: &[usize], v: &ParamVector) -> Result<ParamVector>;
}

/// Hyper-parameters for one client's local pass. `lr` is the already-scheduled
/// step size for this round; `prox_mu` adds `mu * (w - w_global)` to every
/// step's gradient (0 disables it).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub prox_mu: f64,
}

impl LocalPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("local epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.prox_mu.is_finite() && self.prox_mu >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "proximal mu must be finite and >= 0, got {}",
                self.prox_mu
            )));
        }
        Ok(())
    }
}

/// RNG for one client's epoch shuffle. The full `(training_seed, round,
/// client, epoch)` coordinate feeds the 32-byte ChaCha key, so every epoch of
/// every client in every round draws from an independent, replayable stream.
pub fn shuffle_rng(training_seed: u64, round: usize, client: usize, epoch: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&training_seed.to_le_bytes());
    key[8..16].copy_from_slice(&(round as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(client as u64).to_le_bytes());
    key[24..32].copy_from_slice(&(epoch as u64).to_le_bytes());
    <ChaCha8Rng as rand::SeedableRng>::from_seed(key)
}

fn epoch_order(
    examples: &[usize],
    training_seed: u64,
    round: usize,
    client: usize,
    epoch: usize,
) -> Vec<usize> {
    let mut order = examples.to_vec();
    order.shuffle(&mut shuffle_rng(training_seed, round, client, epoch));
    order
}

/// Plain (or proximal) local SGD: `epochs` passes over a fresh shuffle of the
/// client's examples, stepping on every `batch_size` chunk. Returns the final
/// local parameters.
pub fn client_update_sgd<O: Objective + ?Sized>(
    obj: &O,
    global: &ParamVector,
    examples: &[usize],
    plan: &LocalPlan,
    training_seed: u64,
    round: usize,
    client: usize,
) -> Result<ParamVector> {
    plan.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty(format!("client {client} has no examples")));
    }
    let mut w = global.clone();
    for epoch in 0..plan.epochs {
        let order = epoch_order(examples, training_seed, round, client, epoch);
        for batch in order.chunks(plan.batch_size) {
            let mut g = obj.grad(&w, batch)?;
            if plan.prox_mu != 0.0 {
                let mut pull = w.clone();
                pull.add_scaled(global, -1.0)?;
                g.add_scaled(&pull, plan.prox_mu)?;
            }
            w.add_scaled(&g, -plan.lr)?;
        }
    }
    Ok(w)
}

/// One recorded SGD step: the parameters it started from and the batch it
/// consumed. The step Jacobian is `I - lr * H(params, batch)`.
struct TraceStep {
    params: ParamVector,
    batch: Vec<usize>,
}

/// Result of a keep-trace client update: the corrected gradient (the exact
/// gradient of the unrolled local loss with respect to the round-start
/// parameters) plus the final local parameters for diagnostics.
pub struct UgaUpdate {
    pub gradient: ParamVector,
    pub final_params: ParamVector,
}

/// Keep-trace client update. Runs `epochs - 1` epochs of recorded minibatch
/// SGD, evaluates the full-client gradient `v` at the final parameters, then
/// pulls `v` back through every recorded step:
///
/// ```text
/// v <- (I - lr * H_i) v        for i = last step .. first step
/// ```
///
/// Each `H_i` is the exact Hessian of the step's minibatch loss at the
/// parameters the step started from; the Hessian is symmetric, so the
/// transposed step Jacobian needs no extra work. The result is the true
/// gradient of `L(unrolled(w); all client examples)` at the round-start `w`,
/// which is what makes aggregating these gradients unbiased.
pub fn client_update_uga<O: Objective + ?Sized>(
    obj: &O,
    global: &ParamVector,
    examples: &[usize],
    plan: &LocalPlan,
    training_seed: u64,
    round: usize,
    client: usize,
) -> Result<UgaUpdate> {
    plan.validate()?;
    if plan.epochs < 2 {
        return Err(Error::InvalidArgument(
            "keep-trace update needs epochs >= 2 (the last epoch evaluates the gradient)".into(),
        ));
    }
    if plan.prox_mu != 0.0 {
        return Err(Error::InvalidArgument(
            "keep-trace update does not take a proximal term".into(),
        ));
    }
    if examples.is_empty() {
        return Err(Error::Empty(format!("client {client} has no examples")));
    }

    let mut w = global.clone();
    let mut trace: Vec<TraceStep> = Vec::new();
    for epoch in 0..plan.epochs - 1 {
        let order = epoch_order(examples, training_seed, round, client, epoch);
        for batch in order.chunks(plan.batch_size) {
            trace.push(TraceStep {
                params: w.clone(),
                batch: batch.to_vec(),
            });
            let g = obj.grad(&w, batch)?;
            w.add_scaled(&g, -plan.lr)?;
        }
    }

    let mut v = obj.grad(&w, examples)?;
    for step in trace.iter().rev() {
        let hv = obj.hvp(&step.params, &step.batch, &v)?;
        v.add_scaled(&hv, -plan.lr)?;
    }
    Ok(UgaUpdate {
        gradient: v,
        final_params: w,
    })
}

/// One client's round contribution: either its trained parameters or its
/// corrected gradient, with the example count that weights it.
#[derive(Debug, Clone)]
pub struct Contribution {
    pub client_id: usize,
    pub examples: usize,
    pub values: ParamVector,
}

/// `sum_k (n_k / n) * values_k` over contributions sorted by client id, so the
/// result is bitwise independent of arrival order. Duplicate ids are rejected.
fn weighted_sum(contributions: &[Contribution]) -> Result<ParamVector> {
    if contributions.is_empty() {
        return Err(Error::Empty("aggregation round".into()));
    }
    let mut sorted: Vec<&Contribution> = contributions.iter().collect();
    sorted.sort_by_key(|c| c.client_id);
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::InvalidArgument(format!(
                "client {} contributed twice in one round",
                pair[0].client_id
            )));
        }
    }
    let total: usize = sorted.iter().map(|c| c.examples).sum();
    if total == 0 {
        return Err(Error::Empty("aggregation weights (no examples)".into()));
    }
    let mut acc = ParamVector::zeros(sorted[0].values.layout().clone());
    for c in sorted {
        acc.add_scaled(&c.values, c.examples as f64 / total as f64)?;
    }
    Ok(acc)
}

/// Parameter averaging: `w_{t+1} = sum_k (n_k / n) w_k`.
pub fn aggregate_params(contributions: &[Contribution]) -> Result<ParamVector> {
    weighted_sum(contributions)
}

/// Gradient aggregation: `w_{t+1} = w_t - server_lr * sum_k (n_k / n) g_k`.
pub fn aggregate_gradients(
    global: &ParamVector,
    contributions: &[Contribution],
    server_lr: f64,
) -> Result<ParamVector> {
    if !(server_lr.is_finite() && server_lr >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "server learning rate must be finite and >= 0, got {server_lr}"
        )));
    }
    let g = weighted_sum(contributions)?;
    let mut w = global.clone();
    w.add_scaled(&g, -server_lr)?;
    Ok(w)
}

/// Outcome of the server-side meta step, with the meta-set loss before and
/// after for convergence diagnostics.
pub struct MetaUpdate {
    pub params: ParamVector,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Full-batch gradient descent on the server's held-out meta set, applied to
/// the freshly aggregated parameters.
pub fn meta_update<O: Objective + ?Sized>(
    obj: &O,
    aggregated: &ParamVector,
    meta_examples: &[usize],
    meta_lr: f64,
    steps: usize,
) -> Result<MetaUpdate> {
    if steps == 0 {
        return Err(Error::InvalidArgument("meta steps must be >= 1".into()));
    }
    if !(meta_lr.is_finite() && meta_lr >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "meta learning rate must be finite and >= 0, got {meta_lr}"
        )));
    }
    if meta_examples.is_empty() {
        return Err(Error::Empty("meta example set".into()));
    }
    let loss_before = obj.loss(aggregated, meta_examples)?;
    let mut w = aggregated.clone();
    for _ in 0..steps {
        let g = obj.grad(&w, meta_examples)?;
        w.add_scaled(&g, -meta_lr)?;
    }
    let loss_after = obj.loss(&w, meta_examples)?;
    Ok(MetaUpdate {
        params: w,
        loss_before,
        loss_after,
    })
}

/// One-time shared-data distribution: deal the `share` indices across all
/// clients (shuffled by `seed`, near-equal counts, earlier clients take the
/// remainder) and return the augmented partition. The share must be disjoint
/// from every client's own data; [`Partition::new`] re-checks that.
pub fn apply_fedshare(partition: &Partition, share: &[usize], seed: u64) -> Result<Partition> {
    if share.is_empty() {
        return Err(Error::Empty("shared example set".into()));
    }
    let mut shuffled = share.to_vec();
    shuffled.shuffle(&mut <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed));
    let k = partition.num_clients();
    let base = shuffled.len() / k;
    let rem = shuffled.len() % k;
    let mut clients: Vec<Vec<usize>> = partition.clients().to_vec();
    let mut cursor = 0usize;
    for (i, client) in clients.iter_mut().enumerate() {
        let take = base + usize::from(i < rem);
        client.extend_from_slice(&shuffled[cursor..cursor + take]);
        cursor += take;
    }
    Partition::new(clients)
}

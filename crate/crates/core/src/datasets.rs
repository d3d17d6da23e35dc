//! Datasets and client partitioning.
//!
//! Two sources: IDX image files (the MNIST container format) and a synthetic
//! Gaussian-cluster generator used by tests and desk-scale experiments.
//! Partitioning is either IID (shuffle + near-equal shards) or label-skew
//! (each client sees at most `classes_per_client` distinct labels), plus the
//! carve-out helpers for server-side meta/share sets.
//!
//! All randomness flows through explicitly seeded ChaCha8 streams, so every
//! split is reproducible byte-for-byte from `(inputs, seed)`.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An in-memory labelled dataset: features `[N, dims...]` plus one label per
/// row. Immutable after construction; clients reference rows by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.shape().is_empty() || features.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument(
                "a classification dataset needs at least 2 classes".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: class_count,
            });
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Shape of one example (everything past the leading axis).
    pub fn feature_dims(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Flattened per-example feature count.
    pub fn feature_len(&self) -> usize {
        self.feature_dims().iter().product()
    }

    /// Copy the given rows into a `[B, dims...]` batch plus labels.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let row = self.feature_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "example index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.features.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.feature_dims());
        Ok((Tensor::from_parts(shape, data), labels))
    }

    /// New dataset holding only the given rows (order preserved).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (features, labels) = self.gather(indices)?;
        Dataset::new(features, labels, self.class_count)
    }

    /// Stack two datasets with identical feature dims and class counts.
    pub fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
        if a.feature_dims() != b.feature_dims() || a.class_count != b.class_count {
            return Err(Error::ShapeMismatch(format!(
                "concat of {:?}/{} classes with {:?}/{} classes",
                a.feature_dims(),
                a.class_count,
                b.feature_dims(),
                b.class_count
            )));
        }
        let mut data = a.features.data().to_vec();
        data.extend_from_slice(b.features.data());
        let mut labels = a.labels.clone();
        labels.extend_from_slice(&b.labels);
        let mut shape = vec![a.len() + b.len()];
        shape.extend_from_slice(a.feature_dims());
        Dataset::new(Tensor::from_parts(shape, data), labels, a.class_count)
    }

    /// Override the declared class count (e.g. an IDX fixture whose labels do
    /// not happen to reach the nominal maximum).
    pub fn with_class_count(mut self, class_count: usize) -> Result<Self> {
        if let Some(&max) = self.labels.iter().max() {
            if max >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: max,
                    classes: class_count,
                });
            }
        }
        if class_count < 2 {
            return Err(Error::InvalidArgument(
                "a classification dataset needs at least 2 classes".into(),
            ));
        }
        self.class_count = class_count;
        Ok(self)
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// One client's view: shared dataset plus the row indices it owns.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub data: Arc<Dataset>,
    pub indices: Vec<usize>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

// ── IDX files ────────────────────────────────────────────────────────────────

const IDX_IMAGES_MAGIC: [u8; 4] = [0, 0, 0x08, 3]; // unsigned byte, 3 dims
const IDX_LABELS_MAGIC: [u8; 4] = [0, 0, 0x08, 1]; // unsigned byte, 1 dim

fn read_u32_be(buf: &[u8], off: usize, what: &str) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(off..off + 4)
        .ok_or_else(|| Error::Idx(format!("truncated header reading {what}")))?
        .try_into()
        .expect("slice of 4");
    Ok(u32::from_be_bytes(bytes))
}

/// Load an IDX image/label file pair. Pixels are scaled from `0..=255` to
/// `[0,1]`; the class count is inferred as `max label + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;

    if images.get(..4) != Some(&IDX_IMAGES_MAGIC) {
        return Err(Error::Idx(format!(
            "bad image magic in {}: expected {:02x?}, got {:02x?}",
            images_path.display(),
            IDX_IMAGES_MAGIC,
            images.get(..4).unwrap_or(&[])
        )));
    }
    let count = read_u32_be(&images, 4, "image count")? as usize;
    let rows = read_u32_be(&images, 8, "image rows")? as usize;
    let cols = read_u32_be(&images, 12, "image cols")? as usize;
    let pixels = &images[16..];
    if pixels.len() != count * rows * cols {
        return Err(Error::Idx(format!(
            "image payload is {} bytes, header promises {}x{}x{}",
            pixels.len(),
            count,
            rows,
            cols
        )));
    }

    if labels.get(..4) != Some(&IDX_LABELS_MAGIC) {
        return Err(Error::Idx(format!(
            "bad label magic in {}: expected {:02x?}, got {:02x?}",
            labels_path.display(),
            IDX_LABELS_MAGIC,
            labels.get(..4).unwrap_or(&[])
        )));
    }
    let label_count = read_u32_be(&labels, 4, "label count")? as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() != label_count {
        return Err(Error::Idx(format!(
            "label payload is {} bytes, header promises {}",
            label_bytes.len(),
            label_count
        )));
    }
    if label_count != count {
        return Err(Error::Idx(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if count == 0 {
        return Err(Error::Empty("idx dataset".into()));
    }

    let features: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::new(vec![count, rows, cols], features)?,
        labels,
        classes.max(2),
    )
}

// ── synthetic data ───────────────────────────────────────────────────────────

fn jitter_is_zero(v: &f64) -> bool {
    *v == 0.0
}

/// Gaussian clusters: class means are `separation` times random unit vectors,
/// examples are `mean + N(0, I)` noise. `separation 0` makes every class the
/// same cloud (irreducible chance accuracy); large separation makes the task
/// linearly separable.
///
/// Two datasets share a task when they share `mean_seed`: the class means come
/// from that seed alone while `seed` keeps driving the example noise, so a
/// second spec with a fresh `seed` yields new examples of the same classes.
/// `mean_jitter` then displaces each shared mean by a random vector of that
/// length, modelling a population whose class concepts drifted.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub examples_per_class: usize,
    pub classes: usize,
    pub dims: usize,
    pub separation: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "jitter_is_zero")]
    pub mean_jitter: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.examples_per_class == 0 {
            return Err(Error::InvalidArgument("examples_per_class must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("classes must be >= 2".into()));
        }
        if self.dims == 0 {
            return Err(Error::InvalidArgument("dims must be >= 1".into()));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::InvalidArgument(
                "separation must be finite and >= 0".into(),
            ));
        }
        if !(self.mean_jitter.is_finite() && self.mean_jitter >= 0.0) {
            return Err(Error::InvalidArgument(
                "mean_jitter must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// A random direction scaled to `length`, consumed from `rng` in a fixed order.
fn scaled_direction(rng: &mut ChaCha8Rng, dims: usize, length: f64) -> Vec<f64> {
    let normal = StandardNormal;
    let mut dir: Vec<f64> = (0..dims).map(|_| normal.sample(rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    dir.iter_mut().for_each(|v| *v *= length / norm);
    dir
}

pub fn synth_classification(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = StandardNormal;

    // Class means first (fixed draw order), scaled to the requested separation.
    // With a dedicated mean seed the means come from their own stream and the
    // example stream below is untouched by the draw.
    let mut means = Vec::with_capacity(spec.classes);
    match spec.mean_seed {
        None => {
            for _ in 0..spec.classes {
                means.push(scaled_direction(&mut rng, spec.dims, spec.separation));
            }
        }
        Some(mean_seed) => {
            let mut mean_rng = ChaCha8Rng::seed_from_u64(mean_seed);
            for _ in 0..spec.classes {
                means.push(scaled_direction(&mut mean_rng, spec.dims, spec.separation));
            }
        }
    }
    if spec.mean_jitter > 0.0 {
        let mut jitter_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6a69_7474_6572);
        for mean in &mut means {
            let shift = scaled_direction(&mut jitter_rng, spec.dims, spec.mean_jitter);
            for (m, s) in mean.iter_mut().zip(shift) {
                *m += s;
            }
        }
    }

    let n = spec.examples_per_class * spec.classes;
    let mut data = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    // Round-robin class order avoids long single-class runs in row order.
    for i in 0..n {
        let class = i % spec.classes;
        for d in 0..spec.dims {
            let noise: f64 = normal.sample(&mut rng);
            data.push(means[class][d] + noise);
        }
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(vec![n, spec.dims], data)?,
        labels,
        spec.classes,
    )
}

// ── partitioning ─────────────────────────────────────────────────────────────

/// Which partitioning scheme produced a split; serialised into manifests.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid { k: usize },
    LabelSkew { k: usize, classes_per_client: usize },
}

impl PartitionSpec {
    pub fn k(&self) -> usize {
        match self {
            PartitionSpec::Iid { k } => *k,
            PartitionSpec::LabelSkew { k, .. } => *k,
        }
    }
}

/// Disjoint per-client index lists over one dataset. Every client list is
/// non-empty and sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    clients: Vec<Vec<usize>>,
}

impl Partition {
    /// Validates disjointness and non-emptiness; sorts each client's indices.
    pub fn new(mut clients: Vec<Vec<usize>>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Empty("partition".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (c, list) in clients.iter_mut().enumerate() {
            if list.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "client {c} would own no examples"
                )));
            }
            list.sort_unstable();
            for &i in list.iter() {
                if !seen.insert(i) {
                    return Err(Error::InvalidArgument(format!(
                        "example {i} assigned to more than one client"
                    )));
                }
            }
        }
        Ok(Partition { clients })
    }

    pub fn clients(&self) -> &[Vec<usize>] {
        &self.clients
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn total_examples(&self) -> usize {
        self.clients.iter().map(|c| c.len()).sum()
    }

    /// Check all indices fall inside a dataset of length `n`.
    pub fn validate_against(&self, n: usize) -> Result<()> {
        for list in &self.clients {
            if let Some(&bad) = list.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidArgument(format!(
                    "partition references example {bad} outside dataset of {n}"
                )));
            }
        }
        Ok(())
    }

    /// Materialise per-client views over a shared dataset.
    pub fn client_datasets(&self, data: &Arc<Dataset>) -> Result<Vec<ClientDataset>> {
        self.validate_against(data.len())?;
        Ok(self
            .clients
            .iter()
            .enumerate()
            .map(|(client_id, indices)| ClientDataset {
                client_id,
                data: Arc::clone(data),
                indices: indices.clone(),
            })
            .collect())
    }
}

/// Shuffle and deal near-equal contiguous shards: the first `n % k` clients
/// receive one extra example.
pub fn partition_iid(data: &Dataset, k: usize, seed: u64) -> Result<Partition> {
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if k > data.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} examples across {} clients",
            data.len(),
            k
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let base = data.len() / k;
    let extra = data.len() % k;
    let mut clients = Vec::with_capacity(k);
    let mut off = 0;
    for c in 0..k {
        let take = base + usize::from(c < extra);
        clients.push(order[off..off + take].to_vec());
        off += take;
    }
    Partition::new(clients)
}

/// Label-skew partitioning: class slots are dealt round-robin so client `c`
/// draws from classes `order[(c*cpc + j) mod classes]`, `j < cpc`; each class's
/// examples are then shuffled and split near-equally across the clients whose
/// slots landed on it. Every client ends up with at most `classes_per_client`
/// distinct labels.
pub fn partition_label_skew(
    data: &Dataset,
    k: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    let classes = data.class_count();
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one client".into()));
    }
    if classes_per_client == 0 || classes_per_client > classes {
        return Err(Error::InvalidArgument(format!(
            "classes_per_client must be in 1..={classes}, got {classes_per_client}"
        )));
    }
    if k * classes_per_client < classes {
        return Err(Error::InvalidArgument(format!(
            "{k} clients x {classes_per_client} classes each cannot cover {classes} classes"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_order: Vec<usize> = (0..classes).collect();
    class_order.shuffle(&mut rng);

    // Which clients hold a slot for each class, in slot-dealing order.
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for c in 0..k {
        for j in 0..classes_per_client {
            let class = class_order[(c * classes_per_client + j) % classes];
            holders[class].push(c);
        }
    }

    // Per-class index pools in dataset order, shuffled, dealt as shards.
    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..classes {
        let mut pool: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels()[i] == class)
            .collect();
        pool.shuffle(&mut rng);
        let shards = holders[class].len();
        debug_assert!(shards >= 1, "validated above");
        let base = pool.len() / shards;
        let extra = pool.len() % shards;
        let mut off = 0;
        for (s, &client) in holders[class].iter().enumerate() {
            let take = base + usize::from(s < extra);
            clients[client].extend_from_slice(&pool[off..off + take]);
            off += take;
        }
    }
    Partition::new(clients)
}

pub fn partition_from_spec(data: &Dataset, spec: &PartitionSpec, seed: u64) -> Result<Partition> {
    match spec {
        PartitionSpec::Iid { k } => partition_iid(data, *k, seed),
        PartitionSpec::LabelSkew {
            k,
            classes_per_client,
        } => partition_label_skew(data, *k, *classes_per_client, seed),
    }
}

/// Serialisable record of a partition: enough to reproduce or audit a split.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct PartitionManifest {
    pub seed: u64,
    pub spec: PartitionSpec,
    pub clients: Vec<Vec<usize>>,
}

impl PartitionManifest {
    pub fn new(seed: u64, spec: PartitionSpec, partition: &Partition) -> Self {
        PartitionManifest {
            seed,
            spec,
            clients: partition.clients().to_vec(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

// ── meta / share carve-outs ──────────────────────────────────────────────────

/// Round a fraction of `n` to a count, half away from zero.
pub fn fraction_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Uniformly sample `round(fraction * n)` rows without replacement. Returns
/// `(sampled, remainder)`, both sorted ascending. Errors if the sample would
/// be empty or would swallow the whole dataset.
pub fn sample_meta_set(data: &Dataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction.is_finite() && fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "meta fraction must lie in (0,1), got {fraction}"
        )));
    }
    let m = fraction_count(data.len(), fraction);
    if m == 0 {
        return Err(Error::Empty(format!(
            "meta sample: {} examples x fraction {} rounds to zero",
            data.len(),
            fraction
        )));
    }
    if m >= data.len() {
        return Err(Error::InvalidArgument(format!(
            "meta sample of {m} would leave no training data (n = {})",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut meta = order[..m].to_vec();
    let mut rest = order[m..].to_vec();
    meta.sort_unstable();
    rest.sort_unstable();
    Ok((meta, rest))
}

/// Result of building a meta set whose writers partially overlap the training
/// federation: `meta` is the server-side set, `holdout` the untouched rest of
/// the pooled source data (used as the evaluation set in overlap experiments).
#[derive(Debug, Clone)]
pub struct OverlapMetaSplit {
    pub meta: Dataset,
    pub holdout: Dataset,
    /// Client ids (into the primary partition) contributing to the pool.
    pub primary_sources: Vec<usize>,
    /// Client ids (into the auxiliary partition) contributing to the pool.
    pub auxiliary_sources: Vec<usize>,
    pub meta_from_primary: usize,
    pub meta_from_auxiliary: usize,
}

/// Build a meta set whose source clients overlap the training federation at
/// the given `rate`: `round(rate * M)` of the `M` pool slots are filled by
/// training (primary) clients, the rest by clients of a disjoint auxiliary
/// federation. `fraction` of the pooled examples are then sampled as the meta
/// set, exactly as in the plain carve-out path.
pub fn build_overlap_meta(
    primary: &Dataset,
    primary_parts: &Partition,
    auxiliary: &Dataset,
    auxiliary_parts: &Partition,
    rate: f64,
    fraction: f64,
    seed: u64,
) -> Result<OverlapMetaSplit> {
    if primary.feature_dims() != auxiliary.feature_dims()
        || primary.class_count() != auxiliary.class_count()
    {
        return Err(Error::ShapeMismatch(
            "primary and auxiliary datasets must agree on feature dims and classes".into(),
        ));
    }
    if !(rate.is_finite() && (0.0..=1.0).contains(&rate)) {
        return Err(Error::InvalidArgument(format!(
            "overlap rate must lie in [0,1], got {rate}"
        )));
    }
    if !(fraction.is_finite() && fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "meta fraction must lie in (0,1), got {fraction}"
        )));
    }

    let m = primary_parts.num_clients();
    let from_primary = fraction_count(m, rate);
    let from_auxiliary = m - from_primary;
    if from_auxiliary > auxiliary_parts.num_clients() {
        return Err(Error::InvalidArgument(format!(
            "need {from_auxiliary} auxiliary clients but only {} exist",
            auxiliary_parts.num_clients()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |count: usize, total: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let mut ids: Vec<usize> = (0..total).collect();
        ids.shuffle(rng);
        let mut chosen = ids[..count].to_vec();
        chosen.sort_unstable();
        chosen
    };
    let primary_sources = pick(from_primary, m, &mut rng);
    let auxiliary_sources = pick(from_auxiliary, auxiliary_parts.num_clients(), &mut rng);

    // Pool rows in canonical order: primary sources first, ascending indices.
    // `true` marks a primary-origin row.
    let mut pool: Vec<(bool, usize)> = Vec::new();
    for &c in &primary_sources {
        pool.extend(primary_parts.clients()[c].iter().map(|&i| (true, i)));
    }
    for &c in &auxiliary_sources {
        pool.extend(auxiliary_parts.clients()[c].iter().map(|&i| (false, i)));
    }
    if pool.is_empty() {
        return Err(Error::Empty("overlap pool".into()));
    }

    let take = fraction_count(pool.len(), fraction);
    if take == 0 || take >= pool.len() {
        return Err(Error::InvalidArgument(format!(
            "meta fraction {fraction} of a pool of {} leaves no usable split",
            pool.len()
        )));
    }
    pool.shuffle(&mut rng);
    let (meta_rows, holdout_rows) = pool.split_at(take);

    let assemble = |rows: &[(bool, usize)]| -> Result<Dataset> {
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        let row_len = primary.feature_len();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        let mut labels = Vec::with_capacity(rows.len());
        for &(is_primary, i) in &rows {
            let src = if is_primary { primary } else { auxiliary };
            data.extend_from_slice(&src.features().data()[i * row_len..(i + 1) * row_len]);
            labels.push(src.labels()[i]);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(primary.feature_dims());
        Dataset::new(Tensor::from_parts(shape, data), labels, primary.class_count())
    };

    let meta_from_primary = meta_rows.iter().filter(|(p, _)| *p).count();
    Ok(OverlapMetaSplit {
        meta: assemble(meta_rows)?,
        holdout: assemble(holdout_rows)?,
        primary_sources,
        auxiliary_sources,
        meta_from_primary,
        meta_from_auxiliary: take - meta_from_primary,
    })
}

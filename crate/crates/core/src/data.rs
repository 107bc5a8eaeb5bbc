//! Synthetic datasets and non-i.i.d. client partitions.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Objective, ObjectiveKind};

/// Attempts before a Dirichlet partition with an empty client gives up.
pub const MAX_PARTITION_RETRIES: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

/// Generator settings for a synthetic dataset.
///
/// Samples are drawn from `classes` Gaussian clusters (unit covariance, centres
/// scaled by `separation`). Regression targets are `y = xᵀ(w + h·Δ_c) + σ·ε` with a
/// planted `w`, per-cluster shifts `Δ_c`, `h = heterogeneity` and `σ = noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub task: Task,
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub noise: f64,
    pub heterogeneity: f64,
    pub separation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            task: Task::Regression,
            samples: 5000,
            features: 10,
            classes: 10,
            noise: 0.1,
            heterogeneity: 2.0,
            separation: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: Task,
    /// One row per sample.
    pub features: DMatrix<f64>,
    /// Regression response, or the label as `f64` for classification.
    pub targets: Vec<f64>,
    /// Cluster / class index per sample; drives the label-based partitions.
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Planted regression parameter, when known.
    pub planted: Option<DVector<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let SyntheticSpec {
        task,
        samples: n,
        features: p,
        classes,
        ..
    } = *spec;
    if n == 0 || p == 0 {
        return Err(Error::contract("synthetic data needs n >= 1 and d >= 1"));
    }
    if classes == 0 || (task == Task::Classification && classes < 2) {
        return Err(Error::contract("classification needs at least two classes"));
    }
    let mut rng = seeded(seed, 0);
    let centres: Vec<DVector<f64>> = (0..classes)
        .map(|_| gaussian_vector(&mut rng, p) * spec.separation)
        .collect();
    let labels: Vec<usize> = (0..n).map(|k| k % classes).collect();
    let mut features = DMatrix::zeros(n, p);
    for (row, &c) in labels.iter().enumerate() {
        let x = &centres[c] + gaussian_vector(&mut rng, p);
        features.row_mut(row).copy_from(&x.transpose());
    }
    match task {
        Task::Classification => Ok(Dataset {
            task,
            targets: labels.iter().map(|&c| c as f64).collect(),
            features,
            labels,
            classes,
            planted: None,
        }),
        Task::Regression => {
            let planted = gaussian_vector(&mut rng, p);
            let shifts: Vec<DVector<f64>> = (0..classes)
                .map(|_| gaussian_vector(&mut rng, p) * spec.heterogeneity)
                .collect();
            let targets = labels
                .iter()
                .enumerate()
                .map(|(row, &c)| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    let w = &planted + &shifts[c];
                    features.row(row).transpose().dot(&w) + spec.noise * eps
                })
                .collect();
            Ok(Dataset {
                task,
                features,
                targets,
                labels,
                classes,
                planted: Some(planted),
            })
        }
    }
}

/// Reads a delimited table with a header row; the last column is the label
/// (integer class for classification, real response for regression).
pub fn load_delimited(path: &Path, task: Task, delimiter: u8) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_path(path)?;
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(Error::contract("need at least one feature column and a label column"));
    }
    let mut values = Vec::new();
    let mut targets = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != width {
            return Err(Error::TraceParse {
                row: row + 1,
                field: "*".into(),
                message: format!("expected {width} columns, found {}", record.len()),
            });
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::TraceParse {
                row: row + 1,
                field: format!("column {col}"),
                message: format!("not a number: {field:?}"),
            })?;
            if col + 1 == width {
                targets.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let n = targets.len();
    if n == 0 {
        return Err(Error::contract("table has no data rows"));
    }
    let features = DMatrix::from_row_slice(n, width - 1, &values);
    let (labels, classes) = match task {
        Task::Classification => {
            let mut labels = Vec::with_capacity(n);
            for (row, &t) in targets.iter().enumerate() {
                if t < 0.0 || t.fract() != 0.0 {
                    return Err(Error::TraceParse {
                        row: row + 1,
                        field: "label".into(),
                        message: format!("class label must be a non-negative integer, got {t}"),
                    });
                }
                labels.push(t as usize);
            }
            let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
            (labels, classes)
        }
        Task::Regression => (vec![0; n], 1),
    };
    Ok(Dataset {
        task,
        features,
        targets,
        labels,
        classes,
        planted: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum PartitionSpec {
    Dirichlet { beta: f64 },
    LabelShard { shards_per_client: usize },
    Iid,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::Dirichlet { beta: 0.5 }
    }
}

pub fn partition(labels: &[usize], clients: usize, spec: &PartitionSpec, seed: u64) -> Result<Vec<Vec<usize>>> {
    match *spec {
        PartitionSpec::Dirichlet { beta } => dirichlet_partition(labels, clients, beta, seed),
        PartitionSpec::LabelShard { shards_per_client } => {
            label_shard_partition(labels, clients, shards_per_client, seed)
        }
        PartitionSpec::Iid => iid_partition(labels.len(), clients, seed),
    }
}

/// Per class, draws client proportions from `Dirichlet(β·1_N)` and sends each
/// sample of that class to a client drawn from those proportions. Outcomes
/// with an empty client are redrawn on the next sub-stream.
pub fn dirichlet_partition(labels: &[usize], clients: usize, beta: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(Error::contract("need at least one client"));
    }
    if !(beta > 0.0) {
        return Err(Error::contract(format!("Dirichlet concentration must be positive, got {beta}")));
    }
    if labels.len() < clients {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {clients} clients",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (idx, &c) in labels.iter().enumerate() {
        by_class[c].push(idx);
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::contract(e.to_string()))?;
    for attempt in 0..MAX_PARTITION_RETRIES {
        let mut rng = seeded(seed, 1 + attempt);
        let mut parts = vec![Vec::new(); clients];
        for members in &by_class {
            let mut weights: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                weights = vec![1.0; clients];
            }
            let pick = WeightedIndex::new(&weights).map_err(|e| Error::Partition(e.to_string()))?;
            for &idx in members {
                parts[pick.sample(&mut rng)].push(idx);
            }
        }
        if parts.iter().all(|p| !p.is_empty()) {
            for p in &mut parts {
                p.sort_unstable();
            }
            return Ok(parts);
        }
        log::debug!("dirichlet partition attempt {attempt} left a client empty; redrawing");
    }
    Err(Error::Partition(format!(
        "every one of {MAX_PARTITION_RETRIES} Dirichlet draws left a client without data"
    )))
}

/// Sorts samples by label, cuts the pool into `clients·shards_per_client` equal
/// contiguous shards and deals `shards_per_client` random shards to each client.
///
/// Shards are label-pure whenever every class size is a multiple of the shard
/// size; then each client sees at most `shards_per_client` labels.
pub fn label_shard_partition(
    labels: &[usize],
    clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if clients == 0 || shards_per_client == 0 {
        return Err(Error::contract("need at least one client and one shard per client"));
    }
    let shards = clients * shards_per_client;
    if labels.is_empty() || labels.len() % shards != 0 {
        return Err(Error::contract(format!(
            "{} samples do not split into {shards} equal shards",
            labels.len()
        )));
    }
    let shard_len = labels.len() / shards;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let mut deck: Vec<usize> = (0..shards).collect();
    deck.shuffle(&mut seeded(seed, 0));
    Ok(deck
        .chunks(shards_per_client)
        .map(|hand| {
            let mut idx: Vec<usize> = hand
                .iter()
                .flat_map(|&s| order[s * shard_len..(s + 1) * shard_len].iter().copied())
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect())
}

/// Uniform shuffle dealt round-robin; sizes differ by at most one.
pub fn iid_partition(samples: usize, clients: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if clients == 0 || samples < clients {
        return Err(Error::Partition(format!("{samples} samples cannot cover {clients} clients")));
    }
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut seeded(seed, 0));
    let mut parts = vec![Vec::new(); clients];
    for (k, idx) in order.into_iter().enumerate() {
        parts[k % clients].push(idx);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Client objectives plus the centralized optimum when it has a closed form.
#[derive(Debug, Clone)]
pub struct Federation {
    pub objectives: Vec<Objective>,
    pub optimum: Option<DVector<f64>>,
}

impl Federation {
    /// Builds one objective per client. Regression rows are scaled by `1/√n` so
    /// the global loss is a mean squared error; classification uses the summed
    /// softmax loss.
    pub fn from_dataset(data: &Dataset, parts: &[Vec<usize>]) -> Result<Self> {
        let n = data.len() as f64;
        let p = data.features.ncols();
        let scale = 1.0 / n.sqrt();
        let objectives = parts
            .iter()
            .map(|idx| {
                if idx.is_empty() {
                    return Err(Error::Partition("client without data".into()));
                }
                let mut x = DMatrix::zeros(idx.len(), p);
                for (r, &i) in idx.iter().enumerate() {
                    x.row_mut(r).copy_from(&data.features.row(i));
                }
                match data.task {
                    Task::Regression => {
                        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| data.targets[i] * scale));
                        Objective::quadratic(x * scale, y)
                    }
                    Task::Classification => {
                        let labels = idx.iter().map(|&i| data.labels[i]).collect();
                        Objective::logistic(x, labels, data.classes)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(objectives))
    }

    pub fn new(objectives: Vec<Objective>) -> Self {
        let optimum = quadratic_optimum(&objectives);
        Self { objectives, optimum }
    }

    pub fn clients(&self) -> usize {
        self.objectives.len()
    }

    pub fn dim(&self) -> usize {
        self.objectives.first().map_or(0, Objective::dim)
    }

    /// `Σ f_i(ω*)`, when the optimum is known.
    pub fn optimal_loss(&self) -> Option<f64> {
        let w = self.optimum.as_ref()?;
        self.objectives.iter().map(|f| f.loss(w)).sum::<Result<f64>>().ok()
    }
}

/// Solves `(Σ AᵢᵀAᵢ) ω = Σ Aᵢᵀbᵢ` when every objective is least squares and the
/// summed Gram matrix is positive definite.
pub fn quadratic_optimum(objectives: &[Objective]) -> Option<DVector<f64>> {
    let d = objectives.first()?.dim();
    let mut gram = DMatrix::zeros(d, d);
    let mut moment = DVector::zeros(d);
    for f in objectives {
        if f.kind() != ObjectiveKind::Quadratic || f.dim() != d {
            return None;
        }
        let (g, m) = f.normal_equations()?;
        gram += g;
        moment += m;
    }
    Cholesky::new(gram).map(|c| c.solve(&moment))
}

//! Datasets and heterogeneous client partitioning.
//!
//! A [`MasterDataset`] is split among clients by first drawing a class
//! distribution per client from `Dirichlet(alpha_d · 1)` and then drawing that
//! client's samples class by class. Small `alpha_d` gives each client
//! (nearly) a single class; large `alpha_d` gives every client roughly the
//! global class mix.
//!
//! Clients draw from the master pool independently, so two clients may hold
//! the same master example. Within one client the draws are without
//! replacement, which keeps its train and test splits disjoint. A class pool
//! smaller than a client's request for that class is sampled with
//! replacement instead, unless `allow_duplicates` is off.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::rng::{Purpose, RngStream};

#[derive(Debug, Clone, PartialEq)]
enum Features {
    Dense(Vec<f64>),
    /// Raw bytes, scaled by 1/255 on read.
    Bytes(Vec<u8>),
}

/// Labeled examples with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterDataset {
    features: Features,
    n_features: usize,
    labels: Vec<usize>,
    classes: usize,
}

impl MasterDataset {
    pub fn from_dense(inputs: Vec<f64>, n_features: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        Self::build(Features::Dense(inputs), n_features, labels, classes)
    }

    fn build(features: Features, n_features: usize, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyData("master dataset"));
        }
        let len = match &features {
            Features::Dense(v) => v.len(),
            Features::Bytes(v) => v.len(),
        };
        if n_features == 0 || len != labels.len() * n_features {
            return Err(Error::DimensionMismatch {
                axis: "master feature entries",
                expected: labels.len() * n_features,
                found: len,
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            features,
            n_features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        let f = self.n_features;
        match &self.features {
            Features::Dense(v) => v[i * f..(i + 1) * f].to_vec(),
            Features::Bytes(v) => v[i * f..(i + 1) * f].iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }

    /// Materialize the given rows as a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut data = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            data.extend(self.row(i));
        }
        let inputs = Array2::from_shape_vec((indices.len(), self.n_features), data).expect("row-major layout");
        Batch::new(inputs, indices.iter().map(|&i| self.labels[i]).collect())
    }

    fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            pools[y].push(i);
        }
        pools
    }
}

/// Class-conditional Gaussian clusters, clamped to `[0, 1]`.
///
/// Cluster centres are uniform in `[0.2, 0.8]^n_features`; labels cycle
/// through the classes before shuffling, so class counts differ by at most one.
pub fn generate_synthetic(
    n_features: usize,
    classes: usize,
    cluster_spread: f64,
    samples: usize,
    seed: u64,
) -> Result<MasterDataset> {
    if n_features == 0 || classes == 0 {
        return Err(Error::InvalidConfig(
            "synthetic data needs at least one feature and one class".into(),
        ));
    }
    if samples < classes {
        return Err(Error::InvalidConfig(format!(
            "synthetic data needs samples ({samples}) >= classes ({classes})"
        )));
    }
    if !(cluster_spread >= 0.0 && cluster_spread.is_finite()) {
        return Err(Error::InvalidConfig("cluster spread must be finite and >= 0".into()));
    }
    let mut rng = RngStream::derive(seed, 0, 0, Purpose::Partition);
    let centres: Vec<f64> = (0..classes * n_features).map(|_| rng.random_range(0.2..0.8)).collect();
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut inputs = Vec::with_capacity(samples * n_features);
    for &y in &labels {
        for j in 0..n_features {
            let z: f64 = noise.sample(&mut rng);
            inputs.push((centres[y * n_features + j] + cluster_spread * z).clamp(0.0, 1.0));
        }
    }
    MasterDataset::from_dense(inputs, n_features, labels, classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    C10,
    C100,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarSplit {
    Train,
    Test,
}

const CIFAR_PIXELS: usize = 32 * 32 * 3;
const CIFAR_BATCH_RECORDS: usize = 10_000;

impl CifarVariant {
    fn subdir(self) -> &'static str {
        match self {
            CifarVariant::C10 => "cifar-10-batches-bin",
            CifarVariant::C100 => "cifar-100-binary",
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }

    /// Leading label bytes per record (CIFAR-100 stores coarse then fine).
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::C10 => 1,
            CifarVariant::C100 => 2,
        }
    }

    /// Binary files of a split with their record counts.
    pub fn files(self, split: CifarSplit) -> Vec<(&'static str, usize)> {
        match (self, split) {
            (CifarVariant::C10, CifarSplit::Train) => vec![
                ("data_batch_1.bin", CIFAR_BATCH_RECORDS),
                ("data_batch_2.bin", CIFAR_BATCH_RECORDS),
                ("data_batch_3.bin", CIFAR_BATCH_RECORDS),
                ("data_batch_4.bin", CIFAR_BATCH_RECORDS),
                ("data_batch_5.bin", CIFAR_BATCH_RECORDS),
            ],
            (CifarVariant::C10, CifarSplit::Test) => vec![("test_batch.bin", CIFAR_BATCH_RECORDS)],
            (CifarVariant::C100, CifarSplit::Train) => vec![("train.bin", 5 * CIFAR_BATCH_RECORDS)],
            (CifarVariant::C100, CifarSplit::Test) => vec![("test.bin", CIFAR_BATCH_RECORDS)],
        }
    }

    pub fn records(self, split: CifarSplit) -> usize {
        self.files(split).iter().map(|(_, n)| n).sum()
    }

    /// The directory holding the binary files: `path` itself, or the
    /// standard extraction subdirectory beneath it.
    pub fn resolve_dir(self, path: &Path) -> PathBuf {
        let nested = path.join(self.subdir());
        if nested.is_dir() {
            nested
        } else {
            path.to_path_buf()
        }
    }
}

/// Read the CIFAR binary batch files. For CIFAR-100 the fine label is used.
/// Any missing or short file aborts the load.
pub fn load_cifar(path: &Path, variant: CifarVariant, split: CifarSplit) -> Result<MasterDataset> {
    let dir = variant.resolve_dir(path);
    let record = variant.label_bytes() + CIFAR_PIXELS;
    let files = variant.files(split);
    let total = variant.records(split);
    let mut pixels = Vec::with_capacity(total * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(total);
    for (name, records) in files {
        let file = dir.join(name);
        let bytes = fs::read(&file).map_err(|source| Error::Io {
            path: file.clone(),
            source,
        })?;
        let expected = (records * record) as u64;
        if (bytes.len() as u64) < expected {
            return Err(Error::ShortFile {
                path: file,
                expected,
                found: bytes.len() as u64,
            });
        }
        for rec in bytes[..records * record].chunks_exact(record) {
            let label = usize::from(rec[variant.label_bytes() - 1]);
            labels.push(label);
            pixels.extend_from_slice(&rec[variant.label_bytes()..]);
        }
    }
    MasterDataset::build(Features::Bytes(pixels), CIFAR_PIXELS, labels, variant.classes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub n_clients: usize,
    #[serde(default = "default_samples_per_client")]
    pub samples_per_client: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub dirichlet_alpha: f64,
    pub seed: u64,
    /// Allow a client to repeat a master example when its class pool is too
    /// small for the requested count. When off, such a request is an error.
    #[serde(default = "default_allow_duplicates")]
    pub allow_duplicates: bool,
}

fn default_samples_per_client() -> usize {
    1000
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_allow_duplicates() -> bool {
    true
}

impl PartitionConfig {
    pub fn new(n_clients: usize, dirichlet_alpha: f64, seed: u64) -> Self {
        Self {
            n_clients,
            samples_per_client: default_samples_per_client(),
            train_fraction: default_train_fraction(),
            dirichlet_alpha,
            seed,
            allow_duplicates: true,
        }
    }

    pub fn train_size(&self) -> usize {
        (self.train_fraction * self.samples_per_client as f64).round() as usize
    }

    pub fn validate(&self, master_len: usize) -> Result<()> {
        if self.n_clients == 0 || self.samples_per_client < 2 {
            return Err(Error::InvalidConfig(
                "partition needs >= 1 client and >= 2 samples per client".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig("train_fraction must lie in (0, 1)".into()));
        }
        let train = self.train_size();
        if train == 0 || train == self.samples_per_client {
            return Err(Error::InvalidConfig(
                "train_fraction leaves an empty train or test split".into(),
            ));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::InvalidConfig("dirichlet_alpha must be finite and > 0".into()));
        }
        if self.n_clients * self.samples_per_client > master_len {
            return Err(Error::InvalidConfig(format!(
                "{} clients x {} samples exceeds the {master_len} available examples",
                self.n_clients, self.samples_per_client
            )));
        }
        Ok(())
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Batch,
    pub test: Batch,
    /// Master-dataset row of every train example, in `train` order.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub class_pmf: Vec<f64>,
}

impl ClientDataset {
    /// Wrap an existing train/test pair (used for hand-built clients).
    pub fn from_batches(client_id: usize, train: Batch, test: Batch, classes: usize) -> Self {
        let mut pmf = vec![0.0; classes];
        for &y in &train.labels {
            pmf[y] += 1.0 / train.len() as f64;
        }
        Self {
            client_id,
            train_indices: (0..train.len()).collect(),
            test_indices: (0..test.len()).collect(),
            train,
            test,
            class_pmf: pmf,
        }
    }

    /// Empirical class histogram of the client's train + test samples.
    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &y in self.train.labels.iter().chain(&self.test.labels) {
            h[y] += 1;
        }
        h
    }
}

/// Sample from `Dirichlet(alpha · 1_k)`.
///
/// Gamma variates are drawn in log space as `ln G(alpha + 1) + ln(U) / alpha`
/// so that tiny `alpha` does not underflow every component to zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha > 0");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Split `master` among `cfg.n_clients` clients with Dirichlet class skew.
pub fn partition_dirichlet(master: &MasterDataset, cfg: &PartitionConfig) -> Result<Vec<ClientDataset>> {
    cfg.validate(master.len())?;
    let pools = master.class_pools();
    let train_size = cfg.train_size();
    (0..cfg.n_clients)
        .map(|client| {
            let mut rng = RngStream::derive(cfg.seed, client as u64, 0, Purpose::Partition);
            let pmf = sample_dirichlet(cfg.dirichlet_alpha, master.classes, &mut rng);

            let mut counts = vec![0usize; master.classes];
            for _ in 0..cfg.samples_per_client {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut class = master.classes - 1;
                for (c, p) in pmf.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        class = c;
                        break;
                    }
                }
                counts[class] += 1;
            }

            let mut chosen = Vec::with_capacity(cfg.samples_per_client);
            for (class, &count) in counts.iter().enumerate() {
                if count == 0 {
                    continue;
                }
                let pool = &pools[class];
                if count <= pool.len() {
                    chosen.extend(
                        rand::seq::index::sample(&mut rng, pool.len(), count)
                            .into_iter()
                            .map(|i| pool[i]),
                    );
                } else if cfg.allow_duplicates && !pool.is_empty() {
                    chosen.extend((0..count).map(|_| pool[rng.random_range(0..pool.len())]));
                } else {
                    return Err(Error::InfeasiblePartition {
                        class,
                        requested: count,
                        available: pool.len(),
                    });
                }
            }
            chosen.shuffle(&mut rng);
            let test_indices = chosen.split_off(train_size);
            let train_indices = chosen;
            Ok(ClientDataset {
                client_id: client,
                train: master.batch(&train_indices)?,
                test: master.batch(&test_indices)?,
                train_indices,
                test_indices,
                class_pmf: pmf,
            })
        })
        .collect()
}

/// `size` rows drawn uniformly with replacement from the client's train split.
pub fn sample_batch(client: &ClientDataset, size: usize, stream: &mut RngStream) -> Result<Batch> {
    if size == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let n = client.train.len();
    if n == 0 {
        return Err(Error::EmptyData("client train split"));
    }
    let rows: Vec<usize> = (0..size).map(|_| stream.random_range(0..n)).collect();
    stream.note_batch();
    Ok(client.train.select(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(2, 2, 0.1, 100, 7).unwrap();
        let b = generate_synthetic(2, 2, 0.1, 100, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(2, 2, 0.1, 100, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_labels_balanced() {
        let d = generate_synthetic(4, 10, 0.2, 1000, 1).unwrap();
        let mut h = vec![0; 10];
        for &y in d.labels() {
            h[y] += 1;
        }
        assert!(h.iter().all(|&c| (99..=101).contains(&c)), "{h:?}");
        for i in 0..d.len() {
            assert!(d.row(i).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn synthetic_zero_spread_is_centroid_separable() {
        let d = generate_synthetic(3, 5, 0.0, 200, 4).unwrap();
        let mut centroids = vec![vec![0.0; 3]; 5];
        let mut counts = vec![0.0; 5];
        for i in 0..d.len() {
            let y = d.labels()[i];
            for (c, x) in centroids[y].iter_mut().zip(d.row(i)) {
                *c += x;
            }
            counts[y] += 1.0;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|x| *x /= n);
        }
        let correct = (0..d.len())
            .filter(|&i| {
                let row = d.row(i);
                let nearest = (0..5)
                    .min_by(|&a, &b| {
                        crate::linalg::distance(&row, &centroids[a])
                            .total_cmp(&crate::linalg::distance(&row, &centroids[b]))
                    })
                    .unwrap();
                nearest == d.labels()[i]
            })
            .count();
        assert_eq!(correct, d.len());
    }

    #[test]
    fn synthetic_rejects_degenerate_dims() {
        assert!(generate_synthetic(0, 2, 0.1, 10, 0).is_err());
        assert!(generate_synthetic(2, 0, 0.1, 10, 0).is_err());
        assert!(generate_synthetic(2, 20, 0.1, 10, 0).is_err());
    }

    #[test]
    fn dirichlet_sums_to_one_even_for_tiny_alpha() {
        let mut rng = RngStream::from_seed(3);
        for alpha in [1e-4, 0.01, 1.0, 1e3] {
            let p = sample_dirichlet(alpha, 10, &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }

    #[test]
    fn partition_sizes_and_disjoint_splits() {
        let master = generate_synthetic(3, 10, 0.2, 50_000, 1).unwrap();
        let cfg = PartitionConfig::new(50, 0.5, 9);
        let clients = partition_dirichlet(&master, &cfg).unwrap();
        assert_eq!(clients.len(), 50);
        for c in &clients {
            assert_eq!(c.train.len(), 800);
            assert_eq!(c.test.len(), 200);
            assert!((c.class_pmf.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let train: std::collections::HashSet<_> = c.train_indices.iter().collect();
            assert_eq!(train.len(), 800);
            assert!(c.test_indices.iter().all(|i| !train.contains(i)));
            assert!(c.train_indices.iter().chain(&c.test_indices).all(|&i| i < master.len()));
        }
    }

    #[test]
    fn infeasible_partition_names_the_class() {
        let master = generate_synthetic(2, 10, 0.2, 1000, 1).unwrap();
        let mut cfg = PartitionConfig::new(1, 1e-3, 2);
        cfg.samples_per_client = 500;
        cfg.allow_duplicates = false;
        match partition_dirichlet(&master, &cfg) {
            Err(Error::InfeasiblePartition { available, .. }) => assert_eq!(available, 100),
            other => panic!("expected infeasible partition, got {other:?}"),
        }
        cfg.allow_duplicates = true;
        let clients = partition_dirichlet(&master, &cfg).unwrap();
        assert_eq!(clients[0].train.len(), 400);
    }

    #[test]
    fn bad_partition_config_rejected() {
        let master = generate_synthetic(2, 2, 0.2, 100, 1).unwrap();
        let mut cfg = PartitionConfig::new(2, 0.0, 2);
        cfg.samples_per_client = 50;
        assert!(matches!(
            partition_dirichlet(&master, &cfg),
            Err(Error::InvalidConfig(_))
        ));
        cfg.dirichlet_alpha = 1.0;
        cfg.samples_per_client = 51;
        assert!(matches!(
            partition_dirichlet(&master, &cfg),
            Err(Error::InvalidConfig(_))
        ));
        cfg.samples_per_client = 50;
        cfg.dirichlet_alpha = 1.0;
        cfg.train_fraction = 1.0;
        assert!(matches!(
            partition_dirichlet(&master, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn batch_sampling() {
        let master = generate_synthetic(3, 10, 0.2, 20_000, 1).unwrap();
        let clients = partition_dirichlet(&master, &PartitionConfig::new(2, 1.0, 9)).unwrap();
        let mut s = RngStream::from_seed(5);
        let mut s2 = s.clone();
        let a = sample_batch(&clients[0], 40, &mut s).unwrap();
        let a2 = sample_batch(&clients[0], 40, &mut s2).unwrap();
        assert_eq!(a, a2);
        assert_eq!(a.len(), 40);
        let b = sample_batch(&clients[0], 40, &mut s).unwrap();
        assert_ne!(a, b);
        assert_eq!(s.batches_drawn(), 2);
        assert!(sample_batch(&clients[0], 0, &mut s).is_err());
    }
}

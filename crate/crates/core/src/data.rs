//! Datasets, label histograms and Dirichlet label-skew partitioning.
//!
//! Worker shards are stored as index lists into a shared source dataset so
//! that partition manifests stay small and reproducible.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("size error: need {needed} samples, only {available} available")]
    Size { needed: usize, available: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("coverage error: class {class} has no samples in the source")]
    Coverage { class: usize },
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// A labelled dataset with row-major feature storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn from_samples(samples: Vec<Sample>, num_classes: usize) -> Result<Self, DataError> {
        let dim = samples.first().map_or(0, |s| s.features.len());
        let mut ds = Self::new(dim, num_classes);
        for s in samples {
            ds.push(&s.features, s.label)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, features: &[f64], label: usize) -> Result<(), DataError> {
        if features.len() != self.dim {
            return Err(DataError::Domain(format!(
                "feature dimension {} does not match dataset dimension {}",
                features.len(),
                self.dim
            )));
        }
        if label >= self.num_classes {
            return Err(DataError::Domain(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        self.features.extend_from_slice(features);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            features: self.features(i).to_vec(),
            label: self.labels[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .map(move |(i, &l)| (self.features(i), l))
    }

    /// Copies the rows at `indices` (in that order) into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.dim, self.num_classes);
        out.features.reserve(indices.len() * self.dim);
        out.labels.reserve(indices.len());
        for &i in indices {
            out.features.extend_from_slice(self.features(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Splits off the last `n` samples into a second dataset.
    pub fn split_tail(mut self, n: usize) -> Result<(Dataset, Dataset), DataError> {
        if n > self.len() {
            return Err(DataError::Size {
                needed: n,
                available: self.len(),
            });
        }
        let keep = self.len() - n;
        let tail = Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features: self.features.split_off(keep * self.dim),
            labels: self.labels.split_off(keep),
        };
        Ok((self, tail))
    }

    fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }
}

/// Per-class sample counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub counts: Vec<u64>,
}

impl LabelHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Number of classes with a nonzero count.
    pub fn support(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Normalized class proportions; `None` for an empty histogram.
    pub fn proportions(&self) -> Option<Vec<f64>> {
        let total = self.total();
        if total == 0 {
            return None;
        }
        Some(
            self.counts
                .iter()
                .map(|&c| c as f64 / total as f64)
                .collect(),
        )
    }
}

pub fn label_histogram(d: &Dataset) -> LabelHistogram {
    let mut counts = vec![0u64; d.num_classes()];
    for &l in d.labels() {
        counts[l] += 1;
    }
    LabelHistogram { counts }
}

/// A set of workers sharing one Dirichlet concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaGroup {
    pub workers: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub groups: Vec<AlphaGroup>,
    pub shard_size: usize,
    pub seed: u64,
    /// Workers draw from a shared pool so shards never overlap.
    #[serde(default)]
    pub disjoint: bool,
    /// Uniform sampling, ignoring the concentrations.
    #[serde(default)]
    pub iid: bool,
}

impl PartitionSpec {
    pub fn uniform_alpha(num_workers: usize, alpha: f64, shard_size: usize, seed: u64) -> Self {
        Self {
            groups: vec![AlphaGroup {
                workers: num_workers,
                alpha,
            }],
            shard_size,
            seed,
            disjoint: false,
            iid: false,
        }
    }

    pub fn num_workers(&self) -> usize {
        self.groups.iter().map(|g| g.workers).sum()
    }

    /// Concentration of each worker in order.
    pub fn worker_alphas(&self) -> Vec<f64> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(g.alpha, g.workers))
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_workers() == 0 {
            return Err(DataError::Domain("partition needs at least one worker".into()));
        }
        if self.shard_size == 0 {
            return Err(DataError::Domain("shard_size must be positive".into()));
        }
        for g in &self.groups {
            if !(g.alpha > 0.0) || !g.alpha.is_finite() {
                return Err(DataError::Domain(format!(
                    "Dirichlet concentration must be positive and finite, got {}",
                    g.alpha
                )));
            }
        }
        Ok(())
    }
}

/// One worker's shard as indices into the source dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub worker: usize,
    pub alpha: f64,
    pub proportions: Vec<f64>,
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Shard>,
}

impl Partition {
    pub fn datasets(&self, source: &Dataset) -> Vec<Dataset> {
        self.shards.iter().map(|s| source.subset(&s.indices)).collect()
    }

    /// Worker id to per-class counts, the exported JSON manifest form.
    pub fn manifest(&self, source: &Dataset) -> PartitionManifest {
        let workers = self
            .shards
            .iter()
            .map(|s| {
                let mut counts = vec![0u64; source.num_classes()];
                for &i in &s.indices {
                    counts[source.label(i)] += 1;
                }
                WorkerManifest {
                    worker: s.worker,
                    alpha: s.alpha,
                    counts,
                }
            })
            .collect();
        PartitionManifest { workers }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerManifest {
    pub worker: usize,
    pub alpha: f64,
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub workers: Vec<WorkerManifest>,
}

/// Draws from Dirichlet(alpha * 1_k) in log space so that very small
/// concentrations do not underflow to an all-zero vector.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let log_gammas: Vec<f64> = if alpha < 1.0 {
        // G(a) = G(a + 1) * U^(1/a)
        let boosted = Gamma::new(alpha + 1.0, 1.0).expect("valid gamma shape");
        (0..k)
            .map(|_| {
                let g: f64 = boosted.sample(rng);
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                g.ln() + u.ln() / alpha
            })
            .collect()
    } else {
        let gamma = Gamma::new(alpha, 1.0).expect("valid gamma shape");
        (0..k)
            .map(|_| {
                let g: f64 = gamma.sample(rng);
                g.max(f64::MIN_POSITIVE).ln()
            })
            .collect()
    };
    let max = log_gammas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_gammas.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Integer allocation of `n` items over `weights` by largest remainder.
/// Ties on the fractional part go to the lower index.
fn largest_remainder(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let k = weights.len();
        return (0..k).map(|i| n / k + usize::from(i < n % k)).collect();
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Turns class proportions into exact per-class counts summing to `n`,
/// honouring per-class capacity. Any class deficit is handed to the classes
/// that still have room, proportionally to their weight.
fn allocate_counts(
    proportions: &[f64],
    capacity: &[usize],
    n: usize,
) -> Result<Vec<usize>, DataError> {
    let available: usize = capacity.iter().sum();
    if available < n {
        return Err(DataError::Size {
            needed: n,
            available,
        });
    }
    let mut counts = largest_remainder(proportions, n);
    loop {
        let mut deficit = 0;
        for (c, cap) in counts.iter_mut().zip(capacity) {
            if *c > *cap {
                deficit += *c - *cap;
                *c = *cap;
            }
        }
        if deficit == 0 {
            return Ok(counts);
        }
        let open: Vec<usize> = (0..counts.len())
            .filter(|&k| counts[k] < capacity[k])
            .collect();
        let mut weights: Vec<f64> = open.iter().map(|&k| proportions[k]).collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            weights.iter_mut().for_each(|w| *w = 1.0);
        }
        for (&k, extra) in open.iter().zip(largest_remainder(&weights, deficit)) {
            counts[k] += extra;
        }
    }
}

/// Draws `k` distinct elements from `pool`, removing them from it.
fn take_random<R: Rng + ?Sized>(pool: &mut Vec<usize>, k: usize, rng: &mut R) -> Vec<usize> {
    for j in 0..k {
        let pick = rng.random_range(j..pool.len());
        pool.swap(j, pick);
    }
    pool.drain(..k).collect()
}

fn worker_rng(seed: u64, worker: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker as u64);
    rng
}

/// Builds label-skewed worker shards.
///
/// Each worker draws a class-proportion vector from Dirichlet(alpha) and then
/// samples exactly `shard_size` examples without replacement from the source.
/// Workers sample independently (shards may overlap across workers) unless
/// `spec.disjoint` is set.
pub fn partition(source: &Dataset, spec: &PartitionSpec) -> Result<Partition, DataError> {
    spec.validate()?;
    let c = spec.num_workers();
    let needed = c * spec.shard_size;
    if source.len() < needed {
        return Err(DataError::Size {
            needed,
            available: source.len(),
        });
    }
    let k = source.num_classes();
    let by_class = source.class_indices();
    let mut shared_pool = by_class.clone();
    let mut shared_all: Vec<usize> = (0..source.len()).collect();

    let mut shards = Vec::with_capacity(c);
    for (worker, alpha) in spec.worker_alphas().into_iter().enumerate() {
        let mut rng = worker_rng(spec.seed, worker);
        if spec.iid {
            let indices = if spec.disjoint {
                take_random(&mut shared_all, spec.shard_size, &mut rng)
            } else {
                let mut all: Vec<usize> = (0..source.len()).collect();
                take_random(&mut all, spec.shard_size, &mut rng)
            };
            shards.push(Shard {
                worker,
                alpha,
                proportions: vec![1.0 / k as f64; k],
                indices,
            });
            continue;
        }
        let proportions = sample_dirichlet(alpha, k, &mut rng);
        let mut local_pool;
        let pool = if spec.disjoint {
            &mut shared_pool
        } else {
            local_pool = by_class.clone();
            &mut local_pool
        };
        let capacity: Vec<usize> = pool.iter().map(Vec::len).collect();
        let counts = allocate_counts(&proportions, &capacity, spec.shard_size)?;
        let mut indices = Vec::with_capacity(spec.shard_size);
        for (class, &n) in counts.iter().enumerate() {
            indices.extend(take_random(&mut pool[class], n, &mut rng));
        }
        indices.shuffle(&mut rng);
        shards.push(Shard {
            worker,
            alpha,
            proportions,
            indices,
        });
    }
    Ok(Partition { shards })
}

pub fn partition_dirichlet(source: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>, DataError> {
    Ok(partition(source, spec)?.datasets(source))
}

/// Class-stratified sample of `size` items: per-class counts differ by at
/// most one, with the extra items going to the lowest class indices.
pub fn build_global_eval_set(source: &Dataset, size: usize, seed: u64) -> Result<Dataset, DataError> {
    if size == 0 {
        return Err(DataError::Domain("evaluation set size must be positive".into()));
    }
    let k = source.num_classes();
    let mut by_class = source.class_indices();
    if let Some(class) = by_class.iter().position(Vec::is_empty) {
        return Err(DataError::Coverage { class });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = Vec::with_capacity(size);
    for (class, pool) in by_class.iter_mut().enumerate() {
        let want = size / k + usize::from(class < size % k);
        if pool.len() < want {
            return Err(DataError::Size {
                needed: want,
                available: pool.len(),
            });
        }
        indices.extend(take_random(pool, want, &mut rng));
    }
    indices.shuffle(&mut rng);
    Ok(source.subset(&indices))
}

/// Isotropic unit-variance Gaussian clusters.
///
/// Class `c` is centred at `separation * e_c` when `dim >= num_classes`, so
/// each mean lies at distance `separation` from the origin. With fewer
/// dimensions than classes the centres are random directions at that radius.
/// Labels cycle round-robin through the classes.
pub fn make_synthetic_blobs(
    num_classes: usize,
    dim: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    if dim == 0 || n == 0 {
        return Err(DataError::Domain("dim and n must be positive".into()));
    }
    if num_classes < 2 {
        return Err(DataError::Domain("need at least two classes".into()));
    }
    if n < num_classes {
        return Err(DataError::Domain(format!(
            "n = {n} is smaller than the class count {num_classes}"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(DataError::Domain(format!("invalid separation {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = if dim >= num_classes {
        (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[c] = separation;
                m
            })
            .collect()
    } else {
        (0..num_classes)
            .map(|_| {
                let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                dir.iter().map(|x| x / norm * separation).collect()
            })
            .collect()
    };
    let mut ds = Dataset::new(dim, num_classes);
    ds.features.reserve(n * dim);
    ds.labels.reserve(n);
    for j in 0..n {
        let label = j % num_classes;
        for &m in &means[label] {
            let z: f64 = rng.sample(StandardNormal);
            ds.features.push(m + z);
        }
        ds.labels.push(label);
    }
    Ok(ds)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_all(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Format {
            path: path.display().to_string(),
            reason: "truncated header".into(),
        })
}

/// Parses an IDX image/label file pair (MNIST layout). Pixels are scaled
/// to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let images = read_all(images_path)?;
    let labels = read_all(labels_path)?;
    parse_idx(&images, images_path, &labels, labels_path)
}

pub fn parse_idx(
    images: &[u8],
    images_path: &Path,
    labels: &[u8],
    labels_path: &Path,
) -> Result<Dataset, DataError> {
    let format_err = |path: &Path, reason: String| DataError::Format {
        path: path.display().to_string(),
        reason,
    };

    let magic = be_u32(images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(images_path, format!("bad image magic {magic:#010x}")));
    }
    let n_images = be_u32(images, 4, images_path)? as usize;
    let rows = be_u32(images, 8, images_path)? as usize;
    let cols = be_u32(images, 12, images_path)? as usize;
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() < n_images * dim {
        return Err(format_err(
            images_path,
            format!("truncated: expected {} pixel bytes, found {}", n_images * dim, pixels.len()),
        ));
    }

    let magic = be_u32(labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(labels_path, format!("bad label magic {magic:#010x}")));
    }
    let n_labels = be_u32(labels, 4, labels_path)? as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() < n_labels {
        return Err(format_err(
            labels_path,
            format!("truncated: expected {n_labels} labels, found {}", label_bytes.len()),
        ));
    }
    if n_images != n_labels {
        return Err(DataError::Consistency(format!(
            "{n_images} images but {n_labels} labels"
        )));
    }
    if dim == 0 {
        return Err(format_err(images_path, "zero-sized images".into()));
    }

    let label_bytes = &label_bytes[..n_labels];
    let num_classes = label_bytes.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let mut ds = Dataset::new(dim, num_classes);
    ds.features = pixels[..n_images * dim]
        .iter()
        .map(|&p| p as f64 / 255.0)
        .collect();
    ds.labels = label_bytes.iter().map(|&l| l as usize).collect();
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n_per_class: usize, k: usize) -> Dataset {
        let mut ds = Dataset::new(1, k);
        for c in 0..k {
            for _ in 0..n_per_class {
                ds.push(&[c as f64], c).unwrap();
            }
        }
        ds
    }

    #[test]
    fn histogram_counts_labels() {
        let ds = Dataset::from_samples(
            vec![
                Sample { features: vec![0.0], label: 0 },
                Sample { features: vec![0.0], label: 0 },
                Sample { features: vec![0.0], label: 1 },
            ],
            3,
        )
        .unwrap();
        assert_eq!(label_histogram(&ds).counts, vec![2, 1, 0]);
        assert_eq!(label_histogram(&Dataset::new(2, 4)).counts, vec![0; 4]);
    }

    #[test]
    fn push_rejects_bad_rows() {
        let mut ds = Dataset::new(2, 3);
        assert!(ds.push(&[1.0], 0).is_err());
        assert!(ds.push(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 7), vec![3, 2, 2]);
        assert_eq!(largest_remainder(&[0.0, 0.0], 5), vec![3, 2]);
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn deficit_is_redistributed() {
        // class 0 wants 8 but only 3 exist
        let counts = allocate_counts(&[0.8, 0.15, 0.05], &[3, 10, 10], 10).unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 10);
        assert_eq!(counts[0], 3);
        assert!(counts[1] > counts[2]);
        assert!(allocate_counts(&[1.0, 0.0], &[2, 2], 5).is_err());
    }

    #[test]
    fn dirichlet_tiny_alpha_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = sample_dirichlet(0.001, 10, &mut rng);
            assert!(p.iter().all(|x| x.is_finite() && *x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_sizes_and_determinism() {
        let src = balanced(100, 5);
        let spec = PartitionSpec::uniform_alpha(4, 0.3, 50, 9);
        let a = partition(&src, &spec).unwrap();
        let b = partition(&src, &spec).unwrap();
        assert_eq!(a, b);
        for s in &a.shards {
            assert_eq!(s.indices.len(), 50);
            let mut uniq = s.indices.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), 50, "no repeats within a shard");
        }
    }

    #[test]
    fn disjoint_mode_never_reuses_samples() {
        let src = balanced(40, 4);
        let mut spec = PartitionSpec::uniform_alpha(4, 0.5, 40, 1);
        spec.disjoint = true;
        let p = partition(&src, &spec).unwrap();
        let mut all: Vec<usize> = p.shards.iter().flat_map(|s| s.indices.clone()).collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 160);
    }

    #[test]
    fn partition_errors() {
        let src = balanced(10, 2);
        let spec = PartitionSpec::uniform_alpha(3, 1.0, 10, 0);
        assert!(matches!(partition(&src, &spec), Err(DataError::Size { .. })));
        let spec = PartitionSpec::uniform_alpha(1, 0.0, 5, 0);
        assert!(matches!(partition(&src, &spec), Err(DataError::Domain(_))));
        let spec = PartitionSpec::uniform_alpha(1, -1.0, 5, 0);
        assert!(matches!(partition(&src, &spec), Err(DataError::Domain(_))));
    }

    #[test]
    fn single_worker_support_within_source() {
        let mut src = balanced(30, 4);
        // drop class 3 entirely
        src = src.subset(&(0..90).collect::<Vec<_>>());
        let spec = PartitionSpec::uniform_alpha(1, 0.2, 40, 5);
        let shard = &partition_dirichlet(&src, &spec).unwrap()[0];
        assert_eq!(label_histogram(shard).counts[3], 0);
    }

    #[test]
    fn case_two_groups() {
        let src = balanced(3000, 10);
        let spec = PartitionSpec {
            groups: vec![
                AlphaGroup { workers: 20, alpha: 0.1 },
                AlphaGroup { workers: 15, alpha: 0.5 },
                AlphaGroup { workers: 10, alpha: 1.0 },
                AlphaGroup { workers: 5, alpha: 10.0 },
            ],
            shard_size: 512,
            seed: 11,
            disjoint: false,
            iid: false,
        };
        let p = partition(&src, &spec).unwrap();
        assert_eq!(p.shards.len(), 50);
        assert_eq!(p.shards[19].alpha, 0.1);
        assert_eq!(p.shards[20].alpha, 0.5);
        assert_eq!(p.shards[49].alpha, 10.0);
    }

    #[test]
    fn eval_set_is_stratified() {
        let src = balanced(300, 10);
        let dg = build_global_eval_set(&src, 2048, 1).unwrap();
        let h = label_histogram(&dg);
        assert_eq!(h.total(), 2048);
        assert!(h.counts.iter().all(|&c| c == 204 || c == 205));

        let dg = build_global_eval_set(&src, 10, 1).unwrap();
        assert_eq!(label_histogram(&dg).counts, vec![1; 10]);

        assert!(build_global_eval_set(&src, 0, 1).is_err());
        let missing = src.subset(&(0..2700).collect::<Vec<_>>());
        assert!(matches!(
            build_global_eval_set(&missing, 100, 1),
            Err(DataError::Coverage { class: 9 })
        ));
    }

    #[test]
    fn blobs_round_robin() {
        let ds = make_synthetic_blobs(4, 3, 4, 2.0, 0).unwrap();
        assert_eq!(ds.labels(), &[0, 1, 2, 3]);
        assert!(make_synthetic_blobs(4, 0, 10, 1.0, 0).is_err());
        assert!(make_synthetic_blobs(4, 2, 0, 1.0, 0).is_err());
        assert!(make_synthetic_blobs(1, 2, 10, 1.0, 0).is_err());
        let a = make_synthetic_blobs(3, 2, 30, 1.0, 5).unwrap();
        let b = make_synthetic_blobs(3, 2, 30, 1.0, 5).unwrap();
        assert_eq!(a, b);
    }

    fn idx_pair(n_img: u32, n_lab: u32) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&n_img.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for i in 0..n_img * 4 {
            img.push((i * 17 % 256) as u8);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&n_lab.to_be_bytes());
        for i in 0..n_lab {
            lab.push((i % 10) as u8);
        }
        (img, lab)
    }

    #[test]
    fn idx_parses() {
        let (img, lab) = idx_pair(12, 12);
        let ds = parse_idx(&img, Path::new("i"), &lab, Path::new("l")).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.num_classes(), 10);
        assert!((ds.features(0)[1] - 17.0 / 255.0).abs() < 1e-15);
        assert!(ds.iter().all(|(x, _)| x.iter().all(|&p| (0.0..=1.0).contains(&p))));
    }

    #[test]
    fn idx_errors() {
        let (img, mut lab) = idx_pair(5, 5);
        lab[3] = 0x02;
        assert!(matches!(
            parse_idx(&img, Path::new("i"), &lab, Path::new("l")),
            Err(DataError::Format { .. })
        ));
        let (img, lab) = idx_pair(5, 6);
        assert!(matches!(
            parse_idx(&img, Path::new("i"), &lab, Path::new("l")),
            Err(DataError::Consistency(_))
        ));
        let (img, lab) = idx_pair(5, 5);
        assert!(matches!(
            parse_idx(&img[..20], Path::new("i"), &lab, Path::new("l")),
            Err(DataError::Format { .. })
        ));
    }
}

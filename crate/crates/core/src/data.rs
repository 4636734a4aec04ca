//! Datasets, synthetic generators, labeled/unlabeled splitting and the fixed
//! mini-batch partition.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::HeadMode;
use crate::rng::{stream_rng, Stream};
use crate::temporal::BatchKey;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    /// One class index per sample.
    Single { classes: usize, labels: Vec<usize> },
    /// A `classes`-long bit vector per sample.
    Multi { classes: usize, bits: Vec<Vec<bool>> },
}

impl Labels {
    pub fn classes(&self) -> usize {
        match self {
            Labels::Single { classes, .. } | Labels::Multi { classes, .. } => *classes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Single { labels, .. } => labels.len(),
            Labels::Multi { bits, .. } => bits.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_mode(&self) -> HeadMode {
        match self {
            Labels::Single { .. } => HeadMode::SingleLabel,
            Labels::Multi { .. } => HeadMode::MultiLabel,
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Labels {
        match self {
            Labels::Single { classes, labels } => Labels::Single {
                classes: *classes,
                labels: rows.iter().map(|&r| labels[r]).collect(),
            },
            Labels::Multi { classes, bits } => Labels::Multi {
                classes: *classes,
                bits: rows.iter().map(|&r| bits[r].clone()).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N × d]`; image datasets store `H·W` pixels per row.
    pub features: Tensor,
    pub labels: Labels,
    pub sample_ids: Vec<u64>,
    /// `(height, width)` for single-channel image rows.
    pub image: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Labels, sample_ids: Vec<u64>, image: Option<(usize, usize)>) -> Result<Self> {
        let (n, d) = features.expect_matrix("dataset")?;
        if labels.len() != n || sample_ids.len() != n {
            return Err(Error::contract(format!(
                "{n} feature rows but {} labels and {} ids",
                labels.len(),
                sample_ids.len()
            )));
        }
        let mut sorted = sample_ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("sample ids must be unique"));
        }
        match &labels {
            Labels::Single { classes, labels } => {
                if let Some(&bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
                }
            }
            Labels::Multi { classes, bits } => {
                if bits.iter().any(|b| b.len() != *classes) {
                    return Err(Error::contract(format!("label bit vectors must have length {classes}")));
                }
            }
        }
        if let Some((h, w)) = image {
            if h * w != d {
                return Err(Error::contract(format!("image {h}x{w} does not match {d} features")));
            }
        }
        Ok(Dataset {
            features,
            labels,
            sample_ids,
            image,
        })
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.select_rows(rows)?,
            labels: self.labels.subset(rows),
            sample_ids: rows.iter().map(|&r| self.sample_ids[r]).collect(),
            image: self.image,
        })
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Class centers used by [`gen_blobs`]: random unit directions scaled by
/// `separation`.
pub fn blob_centers(d: usize, c: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, Stream::Data, 1);
    (0..c)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>()).max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x * separation / norm).collect()
        })
        .collect()
}

/// Isotropic Gaussian clusters around [`blob_centers`]; sample `i` has class
/// `i mod c`.
pub fn gen_blobs(n: usize, d: usize, c: usize, separation: f64, noise: f64, seed: u64) -> Result<Dataset> {
    if c < 2 || n < c || d == 0 {
        return Err(Error::contract(format!("gen_blobs needs n >= c >= 2 and d >= 1 (n={n}, c={c}, d={d})")));
    }
    let centers = blob_centers(d, c, separation, seed);
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % c;
        labels.push(k);
        for &m in &centers[k] {
            data.push(m + noise * normal(&mut rng));
        }
    }
    Dataset::new(
        Tensor::new(vec![n, d], data)?,
        Labels::Single { classes: c, labels },
        (0..n as u64).collect(),
        None,
    )
}

/// Geometry of the two annuli of [`gen_rings`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingGeometry {
    pub inner: f64,
    pub outer: f64,
    pub half_width: f64,
}

/// Thick bands with a narrow empty gap (1.30 to 1.38) between them.
pub const RING_GEOMETRY: RingGeometry = RingGeometry {
    inner: 1.0,
    outer: 1.68,
    half_width: 0.3,
};

/// Two concentric annuli in the plane (class 0 inside), with Gaussian
/// coordinate noise.
pub fn gen_rings(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    gen_rings_with(n, RING_GEOMETRY, noise, seed)
}

pub fn gen_rings_with(n: usize, geometry: RingGeometry, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 4 {
        return Err(Error::contract("gen_rings needs n >= 4"));
    }
    let RingGeometry { inner, outer, half_width: half } = geometry;
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % 2;
        let base = if k == 0 { inner } else { outer };
        let radius = base + rng.random_range(-half..=half);
        let angle = rng.random_range(0.0..core::f64::consts::TAU);
        data.push(radius * libm::cos(angle) + noise * normal(&mut rng));
        data.push(radius * libm::sin(angle) + noise * normal(&mut rng));
        labels.push(k);
    }
    Dataset::new(
        Tensor::new(vec![n, 2], data)?,
        Labels::Single { classes: 2, labels },
        (0..n as u64).collect(),
        None,
    )
}

/// Gaussian features; class `j` is the half-space `w_j·x > b_j` for a random
/// unit `w_j` and `b_j ∈ [−0.5, 0.5]`.
pub fn gen_multilabel(n: usize, d: usize, c: usize, seed: u64) -> Result<Dataset> {
    if c < 2 || d == 0 || n == 0 {
        return Err(Error::contract("gen_multilabel needs c >= 2, d >= 1, n >= 1"));
    }
    let mut rng = stream_rng(seed, Stream::Data, 2);
    let planes: Vec<(Vec<f64>, f64)> = (0..c)
        .map(|_| {
            let w: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let norm = libm::sqrt(w.iter().map(|x| x * x).sum::<f64>()).max(f64::MIN_POSITIVE);
            (w.into_iter().map(|x| x / norm).collect(), rng.random_range(-0.5..=0.5))
        })
        .collect();
    let mut data = Vec::with_capacity(n * d);
    let mut bits = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        bits.push(
            planes
                .iter()
                .map(|(w, b)| w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() > *b)
                .collect(),
        );
        data.extend(x);
    }
    Dataset::new(
        Tensor::new(vec![n, d], data)?,
        Labels::Multi { classes: c, bits },
        (0..n as u64).collect(),
        None,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub labeled_ratio: f64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            labeled_ratio: 0.2,
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return Err(Error::contract(format!("labeled_ratio {} outside (0, 1]", self.labeled_ratio)));
        }
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("split fractions {fr:?} must be in [0, 1] and sum to 1")));
        }
        Ok(())
    }
}

/// Row indices of the four partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn round_count(frac: f64, n: usize) -> usize {
    libm::round(frac * n as f64) as usize
}

/// Hamilton apportionment of `total` across groups proportional to `sizes`.
fn apportion(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let quotas: Vec<f64> = sizes.iter().map(|&s| total as f64 * s as f64 / n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| libm::floor(*q) as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // largest remainder first; ties by index
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut left = total - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if counts[k] < sizes[k] {
            counts[k] += 1;
            left -= 1;
        }
    }
    counts
}

/// Seeded train/val/test split with a class-stratified labeled subset drawn
/// from train.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let n = dataset.len();
    let mut rng = stream_rng(spec.seed, Stream::Split, 0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = round_count(spec.train_frac, n).min(n);
    let n_val = round_count(spec.val_frac, n).min(n - n_train);
    let train = &order[..n_train];
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();

    let n_labeled = round_count(spec.labeled_ratio, n_train);
    if n_labeled == 0 {
        return Err(Error::contract(format!(
            "labeled subset is empty ({} of {n_train} training samples)",
            spec.labeled_ratio
        )));
    }
    let mut is_labeled = vec![false; n];
    match &dataset.labels {
        Labels::Single { classes, labels } => {
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); *classes];
            for &r in train {
                by_class[labels[r]].push(r);
            }
            let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
            for (rows, take) in by_class.iter().zip(apportion(n_labeled, &sizes)) {
                for &r in &rows[..take] {
                    is_labeled[r] = true;
                }
            }
        }
        Labels::Multi { .. } => {
            for &r in &train[..n_labeled] {
                is_labeled[r] = true;
            }
        }
    }
    let labeled = train.iter().copied().filter(|&r| is_labeled[r]).collect();
    let unlabeled = train.iter().copied().filter(|&r| !is_labeled[r]).collect();
    Ok(Split {
        labeled,
        unlabeled,
        val,
        test,
    })
}

/// A fixed mini-batch: dataset rows plus which of them carry labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub labeled: Vec<bool>,
    pub key: BatchKey,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Positions (within the batch) of labeled samples.
    pub fn labeled_positions(&self) -> Vec<usize> {
        self.labeled.iter().enumerate().filter(|(_, &l)| l).map(|(i, _)| i).collect()
    }
}

/// Shuffles labeled and unlabeled rows once, interleaves them so every batch
/// carries its proportional share of labels, and cuts contiguous batches.
/// A trailing batch with fewer than two samples is dropped.
pub fn batch_partition(
    dataset: &Dataset,
    labeled: &[usize],
    unlabeled: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::contract("batch_size must be >= 2"));
    }
    let mut rng = stream_rng(seed, Stream::Batches, 0);
    let mut lab = labeled.to_vec();
    let mut unl = unlabeled.to_vec();
    lab.shuffle(&mut rng);
    unl.shuffle(&mut rng);
    let total = lab.len() + unl.len();
    let mut merged = Vec::with_capacity(total);
    let (mut li, mut ui) = (0, 0);
    for p in 0..total {
        let due = (p + 1) * lab.len() / total;
        if li < due || ui == unl.len() {
            merged.push((lab[li], true));
            li += 1;
        } else {
            merged.push((unl[ui], false));
            ui += 1;
        }
    }
    Ok(merged
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| Batch {
            rows: c.iter().map(|&(r, _)| r).collect(),
            labeled: c.iter().map(|&(_, l)| l).collect(),
            key: BatchKey(c.iter().map(|&(r, _)| dataset.sample_ids[r]).collect()),
        })
        .collect())
}

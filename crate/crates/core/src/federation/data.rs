//! Synthetic dataset generation and non-IID partitioning.
//!
//! Labels are private to this struct: client training code receives feature
//! views only, and every label read by evaluation code passes through a
//! counting accessor so tests can prove the training path never touches them.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::numerics::{self, Mat, RngStream};

/// Gaussian class blobs around random unit-vector centers scaled by `spread`,
/// with a stratified 80/20 train/test split fixed at creation.
pub struct SyntheticDataset {
    features: Mat,
    labels: Vec<usize>,
    pub num_classes: usize,
    train_indices: Vec<usize>,
    test_indices: Vec<usize>,
    label_reads: AtomicU64,
}

impl SyntheticDataset {
    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_indices
    }

    pub fn test_indices(&self) -> &[usize] {
        &self.test_indices
    }

    /// Label lookup for evaluation paths; every call is counted.
    pub fn label_of(&self, index: usize) -> usize {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.labels[index]
    }

    pub fn labels_for(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label_of(i)).collect()
    }

    /// How many times a label has been read since creation.
    pub fn label_read_count(&self) -> u64 {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One client's slice of the training split.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    /// Indices into the dataset features; disjoint across shards.
    pub indices: Vec<usize>,
    /// Per-class sample counts, diagnostic only.
    pub class_histogram: Vec<usize>,
}

/// Draw `rows` standard-normal rows and l2-normalize each.
pub fn gaussian_unit_rows(rng: &mut RngStream, rows: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        loop {
            for v in m.row_mut(i) {
                *v = rng.next_gaussian();
            }
            let n = numerics::norm(m.row(i));
            if n > 1e-9 {
                for v in m.row_mut(i) {
                    *v /= n;
                }
                break;
            }
        }
    }
    m
}

/// Class `c` is centered at a random unit vector scaled by `spread`; samples
/// are `center + N(0, I)`. Deterministic under the stream.
pub fn make_dataset(
    rng: &mut RngStream,
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
) -> SyntheticDataset {
    assert!(num_classes >= 2 && per_class >= 4 && dim >= 2);
    let total = num_classes * per_class;
    let mut features = Mat::zeros(total, dim);
    let mut labels = Vec::with_capacity(total);
    for c in 0..num_classes {
        let center = gaussian_unit_rows(rng, 1, dim);
        for s in 0..per_class {
            let row = features.row_mut(c * per_class + s);
            for (j, v) in row.iter_mut().enumerate() {
                *v = spread * center.get(0, j) + rng.next_gaussian();
            }
            labels.push(c);
        }
    }

    // stratified 80/20 split: per class, one fifth (rounded down) held out
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for c in 0..num_classes {
        let mut class_idx: Vec<usize> = (c * per_class..(c + 1) * per_class).collect();
        rng.shuffle(&mut class_idx);
        let test_count = per_class / 5;
        test_indices.extend_from_slice(&class_idx[..test_count]);
        train_indices.extend_from_slice(&class_idx[test_count..]);
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();

    SyntheticDataset {
        features,
        labels,
        num_classes,
        train_indices,
        test_indices,
        label_reads: AtomicU64::new(0),
    }
}

/// Split the training indices across `k` clients with per-class proportions
/// drawn from a symmetric Dirichlet. Shards left empty by the draw are
/// repaired by moving one sample from the largest shard.
pub fn dirichlet_partition(
    ds: &SyntheticDataset,
    k: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Vec<ClientShard> {
    assert!(k >= 1 && alpha > 0.0);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    for c in 0..ds.num_classes {
        // construction-time label access; the unsupervised contract concerns
        // the training path, which only ever sees the resulting indices
        let class_train: Vec<usize> = ds
            .train_indices
            .iter()
            .copied()
            .filter(|&i| ds.labels[i] == c)
            .collect();
        if class_train.is_empty() {
            continue;
        }
        let proportions = rng.dirichlet(alpha, k);
        let n = class_train.len();
        let mut cum = 0.0;
        let mut start = 0usize;
        for (shard, prop) in shards.iter_mut().zip(&proportions) {
            cum += prop;
            let end = ((cum * n as f64).round() as usize).min(n);
            shard.extend_from_slice(&class_train[start..end.max(start)]);
            start = start.max(end);
        }
        if start < n {
            shards[k - 1].extend_from_slice(&class_train[start..]);
        }
    }

    // repair empty shards from the largest one
    loop {
        let Some(empty) = shards.iter().position(|s| s.is_empty()) else {
            break;
        };
        let largest = shards
            .iter()
            .enumerate()
            .max_by_key(|(_, s)| s.len())
            .map(|(i, _)| i)
            .expect("at least one shard");
        assert!(shards[largest].len() > 1, "not enough samples to cover all clients");
        let moved = shards[largest].pop().expect("largest shard is non-empty");
        shards[empty].push(moved);
    }

    shards
        .into_iter()
        .enumerate()
        .map(|(client_id, mut indices)| {
            indices.sort_unstable();
            let mut class_histogram = vec![0usize; ds.num_classes];
            for &i in &indices {
                class_histogram[ds.labels[i]] += 1;
            }
            ClientShard { client_id, indices, class_histogram }
        })
        .collect()
}

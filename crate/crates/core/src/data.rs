//! Synthetic data, Dirichlet label-skew partitioning, stratified splits and
//! per-client segmentation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Tensor2D;
use crate::rng;

/// Labelled samples. Row `i` of `features` carries label `labels[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Tensor2D,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Tensor2D, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn features(&self) -> &Tensor2D {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Subset of the given samples, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Write as CSV with header `f0,..,f{dim-1},label`.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(r).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[r].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn from_csv(path: &Path, n_classes: usize) -> Result<Dataset> {
        let mut rd = csv::Reader::from_path(path)?;
        let header = rd.headers()?.clone();
        let dim = header.len().saturating_sub(1);
        let expected = (0..dim).map(|i| format!("f{i}")).chain(std::iter::once("label".to_string()));
        if dim == 0 || !header.iter().zip(expected).all(|(h, e)| h == e) {
            return Err(Error::Config(format!("unexpected CSV header in {}", path.display())));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Config(format!("{}: row {}: bad {what}", path.display(), line + 1));
            for v in rec.iter().take(dim) {
                data.push(v.trim().parse::<f64>().map_err(|_| bad("feature"))?);
            }
            labels.push(rec[dim].trim().parse::<usize>().map_err(|_| bad("label"))?);
        }
        Dataset::new(Tensor2D::new(labels.len(), dim, data)?, labels, n_classes)
    }
}

/// One client's slice of a parent dataset plus its disjoint segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub segments: Vec<Vec<usize>>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    /// 8:1:1
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train_frac, self.val_frac, self.test_frac];
        if f.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

/// Gaussian class clusters. Class means are standard normal vectors; each
/// sample adds isotropic noise with standard deviation `spread`. Samples are
/// stored class by class.
pub fn generate_synthetic(n_classes: usize, dim: usize, per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n_classes < 2 || dim == 0 || per_class == 0 {
        return Err(Error::Config(
            "synthetic data needs n_classes >= 2, dim >= 1, per_class >= 1".into(),
        ));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::Config("spread must be positive".into()));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut means_rng = rng::stream(seed, "synthetic-means", &[]);
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..dim).map(|_| std_normal.sample(&mut means_rng)).collect())
        .collect();
    let mut noise_rng = rng::stream(seed, "synthetic-noise", &[]);
    let mut data = Vec::with_capacity(n_classes * per_class * dim);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(mean.iter().map(|m| m + spread * std_normal.sample(&mut noise_rng)));
            labels.push(c);
        }
    }
    Dataset::new(Tensor2D::new(labels.len(), dim, data)?, labels, n_classes)
}

/// Maximum number of full re-draws before a partition is declared infeasible.
pub const PARTITION_RETRIES: usize = 100;

/// Label-skewed partition: for each class draw `p ~ Dir(beta * 1_n)` and send
/// each sample of that class to client `j` with probability `p_j`. Every
/// client must receive at least one sample.
pub fn dirichlet_partition(dataset: &Dataset, n_clients: usize, beta: f64, seed: u64) -> Result<Vec<ClientShard>> {
    dirichlet_partition_min(dataset, n_clients, beta, seed, 1)
}

/// As [`dirichlet_partition`], re-drawing until every client holds at least
/// `min_size` samples.
pub fn dirichlet_partition_min(
    dataset: &Dataset,
    n_clients: usize,
    beta: f64,
    seed: u64,
    min_size: usize,
) -> Result<Vec<ClientShard>> {
    if n_clients == 0 {
        return Err(Error::Config("n_clients must be >= 1".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let min_size = min_size.max(1);
    if dataset.len() < n_clients * min_size {
        return Err(Error::Partition(format!(
            "{} samples cannot give {n_clients} clients {min_size} each",
            dataset.len()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    for attempt in 0..PARTITION_RETRIES {
        let mut r = rng::stream(seed, "dirichlet", &[attempt as u64]);
        let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
        for members in &by_class {
            let mut p: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut r)).collect();
            let total: f64 = p.iter().sum();
            if total > 0.0 {
                p.iter_mut().for_each(|v| *v /= total);
            } else {
                p.iter_mut().for_each(|v| *v = 1.0 / n_clients as f64);
            }
            for &i in members {
                assigned[categorical(&p, &mut r)].push(i);
            }
        }
        if assigned.iter().all(|a| a.len() >= min_size) {
            return Ok(assigned
                .into_iter()
                .enumerate()
                .map(|(client_id, mut indices)| {
                    indices.sort_unstable();
                    ClientShard {
                        client_id,
                        indices,
                        segments: Vec::new(),
                    }
                })
                .collect());
        }
    }
    Err(Error::Partition(format!(
        "no draw in {PARTITION_RETRIES} attempts gave every one of {n_clients} clients >= {min_size} samples (beta = {beta})"
    )))
}

fn categorical<R: Rng>(p: &[f64], r: &mut R) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the running sum; take the last non-zero weight
    p.iter().rposition(|&w| w > 0.0).unwrap_or(p.len() - 1)
}

/// Shuffle the shard's indices and cut them into `k` contiguous segments:
/// every segment gets `floor(l/k)` samples and the first `l mod k` segments
/// one extra.
pub fn segment(shard: &ClientShard, k: usize, s_min: usize, seed: u64) -> Result<ClientShard> {
    if k == 0 {
        return Err(Error::Config("segment count k must be >= 1".into()));
    }
    let l = shard.indices.len();
    if l < k * s_min {
        return Err(Error::Segmentation {
            available: l,
            k,
            s_min,
            required: k * s_min,
        });
    }
    let mut idx = shard.indices.clone();
    idx.shuffle(&mut rng::stream(seed, "segment", &[shard.client_id as u64]));
    let base = l / k;
    let extra = l % k;
    let mut segments = Vec::with_capacity(k);
    let mut start = 0;
    for j in 0..k {
        let size = base + usize::from(j < extra);
        segments.push(idx[start..start + size].to_vec());
        start += size;
    }
    Ok(ClientShard {
        client_id: shard.client_id,
        indices: shard.indices.clone(),
        segments,
    })
}

/// Per-class split into train/validation/test. Within each class the
/// validation and test counts are `round(n_c * frac)` and train takes the rest.
pub fn stratified_split(dataset: &Dataset, spec: &SplitSpec, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let idx = stratified_split_indices(dataset, spec, seed)?;
    Ok((dataset.subset(&idx.0), dataset.subset(&idx.1), dataset.subset(&idx.2)))
}

/// Index form of [`stratified_split`]; each list is sorted ascending.
pub fn stratified_split_indices(
    dataset: &Dataset,
    spec: &SplitSpec,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.n_classes()];
    for (i, &y) in dataset.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (c, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::Split(format!(
                "class {c} has {} samples; at least 3 are needed",
                members.len()
            )));
        }
        members.shuffle(&mut rng::stream(seed, "split", &[c as u64]));
        let n = members.len() as f64;
        let n_val = (n * spec.val_frac).round() as usize;
        let n_test = (n * spec.test_frac).round() as usize;
        let n_train = members.len() - n_val - n_test;
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..n_train + n_val]);
        test.extend_from_slice(&members[n_train + n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok((train, val, test))
}

/// Empirical label distribution of the given samples.
pub fn label_distribution(dataset: &Dataset, idx: &[usize]) -> Vec<f64> {
    let mut d = vec![0.0; dataset.n_classes()];
    for &i in idx {
        d[dataset.labels()[i]] += 1.0;
    }
    let n = idx.len().max(1) as f64;
    d.iter_mut().for_each(|v| *v /= n);
    d
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Mean total-variation distance between each client's label distribution
/// and the pooled one.
pub fn mean_label_skew(dataset: &Dataset, shards: &[ClientShard]) -> f64 {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let global = label_distribution(dataset, &all);
    let total: f64 = shards
        .iter()
        .map(|s| total_variation(&label_distribution(dataset, &s.indices), &global))
        .sum();
    total / shards.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_partition(shards: &[ClientShard], n: usize) {
        let mut seen = vec![false; n];
        for s in shards {
            for &i in &s.indices {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(2, 4, 50, 0.3, 11).unwrap();
        assert_eq!(a, generate_synthetic(2, 4, 50, 0.3, 11).unwrap());
        assert_eq!(a.len(), 100);
        assert_eq!(a.class_counts(), vec![50, 50]);
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        assert!(generate_synthetic(1, 4, 5, 0.3, 0).is_err());
        assert!(generate_synthetic(2, 4, 0, 0.3, 0).is_err());
        assert!(generate_synthetic(2, 4, 5, 0.0, 0).is_err());
    }

    #[test]
    fn tiny_spread_is_nearest_centroid_separable() {
        let d = generate_synthetic(5, 6, 20, 1e-6, 3).unwrap();
        // oracle: class centroids from the data, then 1-nearest-centroid
        let mut centroids = vec![vec![0.0; 6]; 5];
        for r in 0..d.len() {
            for (c, v) in centroids[d.labels()[r]].iter_mut().zip(d.features().row(r)) {
                *c += v / 20.0;
            }
        }
        for r in 0..d.len() {
            let x = d.features().row(r);
            let best = (0..5)
                .min_by(|&a, &b| {
                    let da: f64 = x.iter().zip(&centroids[a]).map(|(u, v)| (u - v).powi(2)).sum();
                    let db: f64 = x.iter().zip(&centroids[b]).map(|(u, v)| (u - v).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(best, d.labels()[r]);
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let d = generate_synthetic(3, 2, 10, 0.5, 0).unwrap();
        let shards = dirichlet_partition(&d, 1, 0.5, 9).unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(shards[0].indices, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn partition_is_exhaustive_and_disjoint() {
        let d = generate_synthetic(4, 2, 25, 0.5, 1).unwrap();
        for (beta, seed) in [(0.1, 0), (0.5, 1), (1.0, 2), (10.0, 3), (100.0, 4)] {
            let shards = dirichlet_partition(&d, 7, beta, seed).unwrap();
            assert_partition(&shards, d.len());
            assert!(shards.iter().all(|s| !s.is_empty()));
        }
    }

    #[test]
    fn infeasible_partition_fails() {
        let d = generate_synthetic(2, 2, 3, 0.5, 1).unwrap();
        assert!(matches!(dirichlet_partition(&d, 10, 1.0, 0), Err(Error::Partition(_))));
        assert!(matches!(dirichlet_partition(&d, 0, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(dirichlet_partition(&d, 2, 0.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn smaller_beta_means_more_skew() {
        let d = generate_synthetic(5, 2, 60, 0.5, 2).unwrap();
        let mean_skew = |beta: f64| -> f64 {
            (0..20)
                .map(|s| mean_label_skew(&d, &dirichlet_partition(&d, 10, beta, s).unwrap()))
                .sum::<f64>()
                / 20.0
        };
        assert!(mean_skew(0.5) > mean_skew(10.0));
    }

    fn shard(n: usize) -> ClientShard {
        ClientShard {
            client_id: 0,
            indices: (100..100 + n).collect(),
            segments: vec![],
        }
    }

    #[test]
    fn segment_forced_sizes() {
        let s = segment(&shard(9), 3, 3, 1).unwrap();
        assert!(s.segments.iter().all(|g| g.len() == 3));
    }

    #[test]
    fn segment_violating_bound_errors() {
        match segment(&shard(8), 3, 3, 1) {
            Err(Error::Segmentation { available, required, .. }) => {
                assert_eq!((available, required), (8, 9));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn segment_with_remainder() {
        let s = segment(&shard(10), 3, 3, 1).unwrap();
        let sizes: Vec<usize> = s.segments.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        let mut all: Vec<usize> = s.segments.concat();
        all.sort_unstable();
        assert_eq!(all, s.indices);
    }

    #[test]
    fn split_eight_one_one() {
        let d = generate_synthetic(2, 3, 50, 0.5, 4).unwrap();
        let (tr, va, te) = stratified_split(&d, &SplitSpec::default(), 7).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        assert_eq!(tr.class_counts(), vec![40, 40]);
        assert_eq!(va.class_counts(), vec![5, 5]);
        assert_eq!(te.class_counts(), vec![5, 5]);
        let again = stratified_split(&d, &SplitSpec::default(), 7).unwrap();
        assert_eq!((tr, va, te), again);
    }

    #[test]
    fn split_rejects_degenerate_fractions_and_small_classes() {
        let d = generate_synthetic(2, 3, 50, 0.5, 4).unwrap();
        let spec = SplitSpec {
            train_frac: 1.0,
            val_frac: 0.0,
            test_frac: 0.0,
        };
        assert!(matches!(stratified_split(&d, &spec, 0), Err(Error::Config(_))));
        let small = generate_synthetic(2, 3, 2, 0.5, 4).unwrap();
        assert!(matches!(stratified_split(&small, &SplitSpec::default(), 0), Err(Error::Split(_))));
    }

    #[test]
    fn csv_roundtrip() {
        let d = generate_synthetic(3, 2, 4, 0.5, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        d.to_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("f0,f1,label\n"));
        assert_eq!(Dataset::from_csv(&path, 3).unwrap(), d);
    }
}

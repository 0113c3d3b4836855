//! Clustering and classification metrics, plus feature export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chanest::{EqualizedSample, SAMPLE_COLS, SAMPLE_ROWS};
use crate::error::{Error, Result};
use crate::nn::{Model, Tensor};
use crate::seed;

pub const KMEANS_MAX_ITERS: usize = 300;
/// Rows per forward pass when encoding a dataset.
pub const ENCODE_CHUNK: usize = 256;

/// Row-major `n x d` features with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::shape(format!(
                "{} values for {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.features.chunks_exact(self.dim)
    }

    /// Number of distinct labels.
    pub fn num_classes(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    /// One row per sample: `f0..f{d-1},label`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let header: Vec<String> = (0..self.dim).map(|i| format!("f{i}")).chain(["label".into()]).collect();
        writeln!(w, "{}", header.join(","))?;
        for (row, label) in self.rows().zip(&self.labels) {
            for v in row {
                write!(w, "{v},")?;
            }
            writeln!(w, "{label}")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Pack equalized samples into an `[N, 2, 260]` tensor.
pub fn samples_to_tensor(samples: &[&EqualizedSample]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(samples.len() * SAMPLE_ROWS * SAMPLE_COLS);
    for s in samples {
        if s.values.len() != SAMPLE_ROWS * SAMPLE_COLS {
            return Err(Error::shape("equalized sample has the wrong size"));
        }
        data.extend(s.values.iter().map(|&v| v as f32));
    }
    Tensor::from_vec(&[samples.len(), SAMPLE_ROWS, SAMPLE_COLS], data)
}

/// Encoder features in evaluation mode. Chunks are fixed-size, so the
/// result does not depend on the thread count.
pub fn encode_samples(model: &Model<f32>, samples: &[EqualizedSample]) -> Result<FeatureMatrix> {
    let dim = model.config.backbone.embedding_dim();
    let chunks: Vec<Vec<f32>> = samples
        .par_chunks(ENCODE_CHUNK)
        .map(|chunk| {
            let refs: Vec<&EqualizedSample> = chunk.iter().collect();
            Ok(model.encode(&samples_to_tensor(&refs)?)?.into_data())
        })
        .collect::<Result<_>>()?;
    let features = chunks.into_iter().flatten().map(f64::from).collect();
    let labels = samples
        .iter()
        .map(|s| s.label.ok_or_else(|| Error::config("feature export needs labeled samples")))
        .collect::<Result<_>>()?;
    FeatureMatrix::new(dim, features, labels)
}

/// Encode and write features as CSV.
pub fn export_features(model: &Model<f32>, samples: &[EqualizedSample], path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let fm = encode_samples(model, samples)?;
    fm.write_csv(path)?;
    Ok(fm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(data: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &centroids[start..start + dim]));
        }
    }
    centroids
}

fn lloyd(data: &[f64], dim: usize, k: usize, mut centroids: Vec<f64>) -> KMeansResult {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut inertia = 0.0;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (best, d) = (0..k)
                .map(|c| (c, sq_dist(row(i), &centroids[c * dim..(c + 1) * dim])))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
            dists[i] = d;
            inertia += d;
        }
        history.push(inertia);
        if !changed && history.len() > 1 {
            break;
        }
        // Update step; an empty cluster takes the point farthest from its centroid.
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .expect("non-empty data");
                let old = assignments[far];
                counts[old] -= 1;
                for (s, v) in sums[old * dim..(old + 1) * dim].iter_mut().zip(row(far)) {
                    *s -= v;
                }
                assignments[far] = c;
                dists[far] = 0.0;
                counts[c] = 1;
                sums[c * dim..(c + 1) * dim].copy_from_slice(row(far));
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s * inv;
                }
            }
        }
    }
    let inertia = (0..n)
        .map(|i| sq_dist(row(i), &centroids[assignments[i] * dim..(assignments[i] + 1) * dim]))
        .sum();
    KMeansResult {
        assignments,
        centroids,
        inertia,
        inertia_history: history,
    }
}

/// Lloyd's algorithm from k-means++ seeds; the restart with the lowest
/// inertia wins, ties going to the earliest restart.
pub fn kmeans(data: &[f64], dim: usize, k: usize, restarts: usize, rng_seed: u64) -> Result<KMeansResult> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::shape("feature buffer is not a whole number of rows"));
    }
    let n = data.len() / dim;
    if k == 0 || n < k {
        return Err(Error::config(format!("k-means needs 1 <= k <= N, got k={k}, N={n}")));
    }
    let runs: Vec<KMeansResult> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng_for(rng_seed, &[seed::TAG_KMEANS, r]);
            let init = kmeans_pp(data, dim, k, &mut rng);
            lloyd(data, dim, k, init)
        })
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, cur| if cur.inertia < best.inertia { cur } else { best })
        .expect("at least one restart"))
}

/// Total within-cluster squared distance of an arbitrary partition, each
/// cluster measured from its own mean.
pub fn partition_inertia(data: &[f64], dim: usize, assignments: &[usize]) -> f64 {
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (row, &c) in data.chunks_exact(dim).zip(assignments) {
        counts[c] += 1;
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row) {
            *s += v;
        }
    }
    data.chunks_exact(dim)
        .zip(assignments)
        .map(|(row, &c)| {
            let inv = 1.0 / counts[c] as f64;
            row.iter()
                .zip(&sums[c * dim..(c + 1) * dim])
                .map(|(v, s)| (v - s * inv).powi(2))
                .sum::<f64>()
        })
        .sum()
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information `I(a;b) / sqrt(H(a) H(b))`, natural logs.
/// Two single-cluster partitions score 1; one single-cluster partition
/// against a non-trivial one scores 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("partitions of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::shape("empty partitions"));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    if ca.len() == 1 && cb.len() == 1 {
        return Ok(1.0);
    }
    if ha <= 0.0 || hb <= 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            pxy * (pxy * n * n / (ca[&x] as f64 * cb[&y] as f64)).ln()
        })
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Cluster features with k = number of classes and score against labels.
pub fn clustering_nmi(fm: &FeatureMatrix, restarts: usize, rng_seed: u64) -> Result<f64> {
    let k = fm.num_classes();
    let km = kmeans(&fm.features, fm.dim, k, restarts, rng_seed)?;
    nmi(&km.assignments, &fm.labels)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("predictions and labels differ in length"));
    }
    if labels.is_empty() {
        return Err(Error::shape("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `C x C` counts, rows indexed by the true label.
pub fn confusion(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("predictions and labels differ in length"));
    }
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::shape(format!("class id out of range for {num_classes} classes")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Diagonal over row sums; `None` for a class with no samples.
pub fn per_class_accuracy(confusion: &[Vec<usize>]) -> Vec<Option<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[i] as f64 / total as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub nmi: Option<f64>,
    pub accuracy: Option<f64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub config_hash: Option<String>,
}

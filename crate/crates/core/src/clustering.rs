//! Per-class sub-mode discovery.
//!
//! Each class is clustered independently with k-means++ seeding followed by
//! Lloyd iterations. The resulting labels and the empirical prior
//! `p(k | c) = n_{c,k} / n_c` are what the sub-mode conditioned model trains and
//! samples with. A random-label baseline produces the same table shape.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassClusters {
    pub class_id: usize,
    /// `k` feature vectors; rows for clusters that ended up empty are kept.
    pub centroids: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    /// Clusters that can receive samples; below `k` when the class is too small.
    pub effective_k: usize,
    /// Set when the class had fewer samples than `k`.
    pub reduced: bool,
    /// Within-class SSE after every assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl ClassClusters {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn prior(&self) -> Vec<f64> {
        let n = self.total() as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmodeTable {
    pub k: usize,
    pub classes: BTreeMap<usize, ClassClusters>,
    /// Sub-mode label per input sample, in input order. Empty when the table
    /// was restored from a checkpoint.
    pub assignments: Vec<usize>,
    /// Class label per input sample, in input order.
    pub sample_classes: Vec<usize>,
}

impl SubmodeTable {
    pub fn class(&self, c: usize) -> Result<&ClassClusters> {
        self.classes
            .get(&c)
            .ok_or_else(|| Error::OutOfRange(format!("class {c} has no sub-mode table")))
    }

    pub fn empirical_prior(&self, c: usize) -> Result<Vec<f64>> {
        Ok(self.class(c)?.prior())
    }

    /// Recounts `n_{c,k}` from the stored assignments.
    pub fn recount(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (&c, &k) in self.sample_classes.iter().zip(&self.assignments) {
            out.entry(c).or_insert_with(|| vec![0; self.k])[k] += 1;
        }
        out
    }
}

/// Empirical prior of one class.
pub fn empirical_prior(table: &SubmodeTable, c: usize) -> Result<Vec<f64>> {
    table.empirical_prior(c)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid, ties to the lowest index.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn check_inputs(features: &[Vec<f64>], classes: &[usize], k: usize) -> Result<usize> {
    if k == 0 {
        return invalid("K must be >= 1");
    }
    if features.len() != classes.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} class labels",
            features.len(),
            classes.len()
        )));
    }
    let dim = features.first().map_or(0, Vec::len);
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("feature rows differ in dimension".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return invalid("non-finite feature value");
    }
    Ok(dim)
}

fn group_by_class(classes: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    groups
}

fn kmeans_plus_plus<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(points: &[&[f64]], mut centroids: Vec<Vec<f64>>, max_iters: usize) -> (Vec<usize>, Vec<Vec<f64>>, Vec<f64>, usize) {
    let k = centroids.len();
    let dim = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        let mut sse = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(p, &centroids);
            sse += d;
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
        }
        // re-seed empty clusters at the point farthest from its centroid
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let (far, dist) = points
                .iter()
                .enumerate()
                .filter(|(i, _)| counts[labels[*i]] > 1)
                .map(|(i, p)| (i, sq_dist(p, &centroids[labels[i]])))
                .fold((usize::MAX, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if far == usize::MAX || dist <= 0.0 {
                continue;
            }
            counts[labels[far]] -= 1;
            counts[j] = 1;
            labels[far] = j;
            centroids[j] = points[far].to_vec();
            sse -= dist;
            changed = true;
        }
        history.push(sse);
        if !changed || iterations >= max_iters {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        for (p, &l) in points.iter().zip(&labels) {
            for (s, v) in sums[l].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    (labels, centroids, history, iterations)
}

/// Per-class k-means. Each class draws from its own stream keyed by
/// `(seed, class_id)`, so the result does not depend on class order.
pub fn assign_submodes(features: &[Vec<f64>], classes: &[usize], k: usize, seed: u64, max_iters: usize) -> Result<SubmodeTable> {
    let dim = check_inputs(features, classes, k)?;
    let mut assignments = vec![0; features.len()];
    let mut table = BTreeMap::new();
    for (c, idx) in group_by_class(classes) {
        let points: Vec<&[f64]> = idx.iter().map(|&i| features[i].as_slice()).collect();
        let effective = k.min(points.len());
        let mut rng = rng::stream(seed, "cluster.kmeans", &[c as u64]);
        let init = kmeans_plus_plus(&points, effective, &mut rng);
        let (labels, mut centroids, sse_history, iterations) = lloyd(&points, init, max_iters);
        let mut counts = vec![0; k];
        for (&i, &l) in idx.iter().zip(&labels) {
            assignments[i] = l;
            counts[l] += 1;
        }
        while centroids.len() < k {
            centroids.push(vec![0.0; dim]);
        }
        table.insert(
            c,
            ClassClusters {
                class_id: c,
                centroids,
                counts,
                effective_k: effective,
                reduced: effective < k,
                sse_history,
                iterations,
            },
        );
    }
    Ok(SubmodeTable {
        k,
        classes: table,
        assignments,
        sample_classes: classes.to_vec(),
    })
}

/// Uniform random labels; centroids are the per-label means.
pub fn random_assignment(features: &[Vec<f64>], classes: &[usize], k: usize, seed: u64) -> Result<SubmodeTable> {
    let dim = check_inputs(features, classes, k)?;
    let mut assignments = vec![0; features.len()];
    let mut table = BTreeMap::new();
    for (c, idx) in group_by_class(classes) {
        let mut rng = rng::stream(seed, "cluster.random", &[c as u64]);
        let mut counts = vec![0; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for &i in &idx {
            let l = if k == 1 { 0 } else { rng.random_range(0..k) };
            assignments[i] = l;
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(&features[i]) {
                *s += v;
            }
        }
        let centroids: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| if n > 0 { s.iter().map(|v| v / n as f64).collect() } else { vec![0.0; dim] })
            .collect();
        let sse: f64 = idx.iter().map(|&i| sq_dist(&features[i], &centroids[assignments[i]])).sum();
        let effective = k.min(idx.len());
        table.insert(
            c,
            ClassClusters {
                class_id: c,
                centroids,
                counts,
                effective_k: effective,
                reduced: effective < k,
                sse_history: vec![sse],
                iterations: 0,
            },
        );
    }
    Ok(SubmodeTable {
        k,
        classes: table,
        assignments,
        sample_classes: classes.to_vec(),
    })
}

/// Per-dimension z-scoring over all rows. Constant dimensions are only centred.
pub fn standardize(features: &mut [Vec<f64>]) {
    let Some(dim) = features.first().map(Vec::len) else {
        return;
    };
    let n = features.len() as f64;
    for d in 0..dim {
        let mean = features.iter().map(|f| f[d]).sum::<f64>() / n;
        let var = features.iter().map(|f| (f[d] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for f in features.iter_mut() {
            f[d] = (f[d] - mean) / sd;
        }
    }
}

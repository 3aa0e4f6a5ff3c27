//! Sample-quality metrics for 2D point sets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mixture::{ConditionFilter, MixtureSpec, Vec2};

pub const DEFAULT_KNN_K: usize = 3;
pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_GRID: usize = 41;
pub const DEFAULT_TIMES: [f64; 3] = [0.25, 0.5, 0.75];
const DEGENERATE_JITTER: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frechet: f64,
    pub precision: f64,
    pub recall: f64,
    pub mode_shares: Vec<f64>,
    pub mode_tv: f64,
    pub coverage_count: usize,
    pub field_rmse: Option<f64>,
}

fn sq(a: Vec2, b: Vec2) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Squared distance from each point to its k-th nearest other point.
pub fn knn_sq_radii(set: &[Vec2], k: usize) -> Result<Vec<f64>> {
    if k == 0 || set.len() <= k {
        return invalid(format!("need more than k = {k} points, got {}", set.len()));
    }
    Ok(set
        .par_iter()
        .enumerate()
        .map(|(i, &p)| {
            // k smallest distances, ascending
            let mut best = vec![f64::INFINITY; k];
            for (j, &q) in set.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = sq(p, q);
                if d < best[k - 1] {
                    let mut pos = k - 1;
                    while pos > 0 && best[pos - 1] > d {
                        best[pos] = best[pos - 1];
                        pos -= 1;
                    }
                    best[pos] = d;
                }
            }
            best[k - 1]
        })
        .collect())
}

/// Fraction of `queries` inside the union of balls around `support`.
fn coverage_fraction(queries: &[Vec2], support: &[Vec2], sq_radii: &[f64]) -> f64 {
    let inside = queries
        .par_iter()
        .filter(|&&y| support.iter().zip(sq_radii).any(|(&s, &r2)| sq(y, s) <= r2))
        .count();
    inside as f64 / queries.len() as f64
}

/// k-NN manifold precision and recall.
pub fn knn_precision_recall(real: &[Vec2], gen: &[Vec2], k: usize) -> Result<(f64, f64)> {
    let real_r = knn_sq_radii(real, k)?;
    let gen_r = knn_sq_radii(gen, k)?;
    Ok((coverage_fraction(gen, real, &real_r), coverage_fraction(real, gen, &gen_r)))
}

pub type Mat2 = [[f64; 2]; 2];

pub fn mean_cov(points: &[Vec2]) -> (Vec2, Mat2) {
    let n = points.len() as f64;
    let mut m = [0.0; 2];
    for p in points {
        m[0] += p[0];
        m[1] += p[1];
    }
    m[0] /= n;
    m[1] /= n;
    let mut c = [[0.0; 2]; 2];
    for p in points {
        let d = [p[0] - m[0], p[1] - m[1]];
        for a in 0..2 {
            for b in 0..2 {
                c[a][b] += d[a] * d[b];
            }
        }
    }
    for row in &mut c {
        for v in row {
            *v /= n - 1.0;
        }
    }
    (m, c)
}

fn det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frechet {
    pub distance: f64,
    /// Set when a covariance was singular and jitter was added to its diagonal.
    pub regularized: bool,
}

/// Fréchet distance between two Gaussians given by their moments.
///
/// For 2×2 SPD matrices the eigenvalues of `Σ1 Σ2` are real and nonnegative,
/// so `tr((Σ1 Σ2)^½) = sqrt(tr(Σ1 Σ2) + 2 sqrt(det Σ1 · det Σ2))`.
pub fn frechet_from_moments(m1: Vec2, c1: Mat2, m2: Vec2, c2: Mat2) -> f64 {
    let tr_prod = c1[0][0] * c2[0][0] + c1[0][1] * c2[1][0] + c1[1][0] * c2[0][1] + c1[1][1] * c2[1][1];
    let root_det = (det(&c1).max(0.0) * det(&c2).max(0.0)).sqrt();
    let tr_sqrt = (tr_prod + 2.0 * root_det).max(0.0).sqrt();
    let mean_term = sq(m1, m2);
    (mean_term + c1[0][0] + c1[1][1] + c2[0][0] + c2[1][1] - 2.0 * tr_sqrt).max(0.0)
}

pub fn frechet_2d(real: &[Vec2], gen: &[Vec2]) -> Result<Frechet> {
    if real.len() < 3 || gen.len() < 3 {
        return invalid("Fréchet distance needs at least 3 points per set");
    }
    let (m1, mut c1) = mean_cov(real);
    let (m2, mut c2) = mean_cov(gen);
    let mut regularized = false;
    for c in [&mut c1, &mut c2] {
        if det(c) <= 0.0 {
            c[0][0] += DEGENERATE_JITTER;
            c[1][1] += DEGENERATE_JITTER;
            regularized = true;
        }
    }
    Ok(Frechet {
        distance: frechet_from_moments(m1, c1, m2, c2),
        regularized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeShares {
    pub shares: Vec<f64>,
    pub tv: f64,
    pub coverage_count: usize,
}

/// Index of the nearest component mean, ties to the lowest index.
pub fn nearest_component(spec: &MixtureSpec, p: Vec2) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in spec.components().iter().enumerate() {
        let d = sq(p, c.mean);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

pub fn mode_shares(spec: &MixtureSpec, gen: &[Vec2], tau: f64) -> Result<ModeShares> {
    if gen.is_empty() {
        return invalid("mode shares need at least one point");
    }
    let mut counts = vec![0usize; spec.components().len()];
    for &p in gen {
        counts[nearest_component(spec, p)] += 1;
    }
    let n = gen.len() as f64;
    let shares: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let tv = 0.5
        * shares
            .iter()
            .zip(spec.components())
            .map(|(s, c)| (s - c.weight).abs())
            .sum::<f64>();
    let coverage_count = shares
        .iter()
        .zip(spec.components())
        .filter(|(s, c)| **s >= tau * c.weight)
        .count();
    Ok(ModeShares {
        shares,
        tv,
        coverage_count,
    })
}

/// Shares among one class's components, against within-class weights.
/// Entries follow the class's components in spec order.
pub fn class_mode_shares(spec: &MixtureSpec, class_id: usize, gen: &[Vec2], tau: f64) -> Result<ModeShares> {
    mode_shares(&spec.restrict(ConditionFilter::Class(class_id))?, gen, tau)
}

/// 41 × 41 lattice over the 3σ box of the target components by default.
pub fn lattice(spec: &MixtureSpec, n: usize) -> Vec<Vec2> {
    let (lo, hi) = spec.target_box(3.0);
    let step = |d: usize, i: usize| {
        if n == 1 {
            0.5 * (lo[d] + hi[d])
        } else {
            lo[d] + (hi[d] - lo[d]) * i as f64 / (n - 1) as f64
        }
    };
    (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| [step(0, i), step(1, j)])
        .collect()
}

/// Root mean square of `‖a(x, t) - b(x, t)‖` over `grid × times`.
pub fn field_rmse<A, B>(a: A, b: B, grid: &[Vec2], times: &[f64]) -> Result<f64>
where
    A: Fn(&[Vec2], f64) -> Result<Vec<Vec2>>,
    B: Fn(&[Vec2], f64) -> Result<Vec<Vec2>>,
{
    if grid.is_empty() || times.is_empty() {
        return invalid("field_rmse needs a nonempty grid and time list");
    }
    let mut total = 0.0;
    for &t in times {
        let va = a(grid, t)?;
        let vb = b(grid, t)?;
        if va.len() != grid.len() || vb.len() != grid.len() {
            return Err(Error::Shape("field returned the wrong number of vectors".into()));
        }
        total += va.iter().zip(&vb).map(|(p, q)| sq(*p, *q)).sum::<f64>();
    }
    Ok((total / (grid.len() * times.len()) as f64).sqrt())
}

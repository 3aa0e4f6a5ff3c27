use rand::Rng;
use rand_distr::StandardNormal;
use subflow::mixture::{
    oracle_jacobian, oracle_velocity, posterior_weights, sample_dataset, ConditionFilter, MixtureComponent, MixtureSpec,
    Vec2,
};
use subflow::rng;

fn lopsided() -> MixtureSpec {
    let c = |weight, mean, std, class_id, submode_id| MixtureComponent {
        weight,
        mean,
        std,
        class_id,
        submode_id,
    };
    MixtureSpec::new(
        vec![
            c(0.5, [-2.0, 1.0], 0.4, 0, 0),
            c(0.2, [1.5, -1.0], 0.8, 0, 1),
            c(0.3, [3.0, 2.5], 0.3, 1, 0),
        ],
        1.3,
    )
    .unwrap()
}

fn gauss(z: f64, s: f64) -> f64 {
    (-0.5 * z * z / (s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

/// Per-dimension trapezoid integrals of the path density at `x`:
/// `(∫ p(x1) p(x0 = (x - t x1)/(1-t)) / (1-t) dx1, same with an extra x1 factor)`.
fn quad_1d(x: f64, t: f64, mu: f64, s1: f64, s0: f64) -> (f64, f64) {
    let n = 40_000;
    let (lo, hi) = (mu - 12.0 * s1, mu + 12.0 * s1);
    let h = (hi - lo) / n as f64;
    let (mut mass, mut first) = (0.0, 0.0);
    for i in 0..=n {
        let y = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        let f = gauss(y - mu, s1) * gauss((x - t * y) / (1.0 - t), s0) / (1.0 - t);
        mass += w * f * h;
        first += w * f * y * h;
    }
    (mass, first)
}

/// Posterior weights and velocity by quadrature.
fn quadrature_oracle(spec: &MixtureSpec, x: Vec2, t: f64) -> (Vec<f64>, Vec2) {
    let mut dens = Vec::new();
    let mut cond_mean = Vec::new();
    for c in spec.components() {
        let (m0, f0) = quad_1d(x[0], t, c.mean[0], c.std, spec.source_std());
        let (m1, f1) = quad_1d(x[1], t, c.mean[1], c.std, spec.source_std());
        dens.push(c.weight * m0 * m1);
        cond_mean.push([f0 / m0, f1 / m1]);
    }
    let total: f64 = dens.iter().sum();
    let post: Vec<f64> = dens.iter().map(|d| d / total).collect();
    let mut v = [0.0; 2];
    for (p, m) in post.iter().zip(&cond_mean) {
        v[0] += p * (m[0] - x[0]) / (1.0 - t);
        v[1] += p * (m[1] - x[1]) / (1.0 - t);
    }
    (post, v)
}

/// `x_t` drawn from actual pairs, so test points sit where the density lives.
fn path_points(spec: &MixtureSpec, n: usize, t_range: (f64, f64), seed: u64) -> Vec<(Vec2, f64)> {
    let data = sample_dataset(spec, n, seed).unwrap();
    let mut r = rng::stream(seed, "test.path", &[]);
    data.iter()
        .map(|s| {
            let t = r.random_range(t_range.0..t_range.1);
            let z: [f64; 2] = [r.sample(StandardNormal), r.sample(StandardNormal)];
            let x0 = [spec.source_std() * z[0], spec.source_std() * z[1]];
            ([(1.0 - t) * x0[0] + t * s.x[0], (1.0 - t) * x0[1] + t * s.x[1]], t)
        })
        .collect()
}

#[test]
fn posterior_and_velocity_match_quadrature() {
    for spec in [MixtureSpec::four_peak_toy(), lopsided()] {
        for (x, t) in path_points(&spec, 25, (0.02, 0.9), 3) {
            let (post, v) = quadrature_oracle(&spec, x, t);
            let p = posterior_weights(&spec, x, t, ConditionFilter::All).unwrap();
            for (&(j, w), q) in p.weights.iter().zip(&post) {
                assert!((w - q).abs() < 1e-6, "component {j} at {x:?}, t {t}: {w} vs {q}");
            }
            let o = oracle_velocity(&spec, x, t, ConditionFilter::All).unwrap();
            for k in 0..2 {
                assert!((o[k] - v[k]).abs() < 1e-6, "{o:?} vs {v:?} at {x:?}, t {t}");
            }
        }
    }
}

#[test]
fn velocity_matches_importance_sampled_monte_carlo() {
    let spec = lopsided();
    let draws: Vec<Vec2> = sample_dataset(&spec, 1_000_000, 17).unwrap().iter().map(|s| s.x).collect();
    let s0 = spec.source_std();
    for (x, t) in path_points(&spec, 6, (0.3, 0.7), 5) {
        // weight each target draw by the source density of the x0 it implies
        let mut sw = 0.0;
        let mut est = [0.0; 2];
        let ws: Vec<f64> = draws
            .iter()
            .map(|y| {
                let z = [(x[0] - t * y[0]) / (1.0 - t), (x[1] - t * y[1]) / (1.0 - t)];
                (-0.5 * (z[0] * z[0] + z[1] * z[1]) / (s0 * s0)).exp()
            })
            .collect();
        for (w, y) in ws.iter().zip(&draws) {
            sw += w;
            est[0] += w * (y[0] - x[0]) / (1.0 - t);
            est[1] += w * (y[1] - x[1]) / (1.0 - t);
        }
        est[0] /= sw;
        est[1] /= sw;
        let mut var = [0.0; 2];
        for (w, y) in ws.iter().zip(&draws) {
            for k in 0..2 {
                let f = (y[k] - x[k]) / (1.0 - t);
                var[k] += (w * (f - est[k])).powi(2);
            }
        }
        let o = oracle_velocity(&spec, x, t, ConditionFilter::All).unwrap();
        for k in 0..2 {
            let se = var[k].sqrt() / sw;
            assert!((o[k] - est[k]).abs() < 3.0 * se, "{o:?} vs {est:?} ± {se} at {x:?}, t {t}");
        }
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let h = 1e-6;
    for spec in [MixtureSpec::four_peak_toy(), lopsided()] {
        for cond in [ConditionFilter::All, ConditionFilter::Class(0)] {
            for (x, t) in path_points(&spec, 40, (0.0, 0.98), 7) {
                let j = oracle_jacobian(&spec, x, t, cond).unwrap();
                for b in 0..2 {
                    let mut xp = x;
                    xp[b] += h;
                    let mut xm = x;
                    xm[b] -= h;
                    let vp = oracle_velocity(&spec, xp, t, cond).unwrap();
                    let vm = oracle_velocity(&spec, xm, t, cond).unwrap();
                    for a in 0..2 {
                        let fd = (vp[a] - vm[a]) / (2.0 * h);
                        assert!((fd - j[a][b]).abs() < 1e-5, "d{a}/d{b}: {fd} vs {}", j[a][b]);
                    }
                }
            }
        }
    }
}

#[test]
fn class_field_is_posterior_weighted_submode_fields() {
    let spec = MixtureSpec::four_peak_toy();
    let mut r = rng::stream(1, "test.identity", &[]);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = [r.random_range(-8.0..8.0), r.random_range(-6.0..6.0)];
        let t = r.random_range(0.0..1.0);
        let c = r.random_range(0..2);
        let class_v = oracle_velocity(&spec, x, t, ConditionFilter::Class(c)).unwrap();
        let post = posterior_weights(&spec, x, t, ConditionFilter::Class(c)).unwrap();
        let mut mix = [0.0; 2];
        for (j, w) in post.weights {
            let k = spec.components()[j].submode_id;
            let v = oracle_velocity(&spec, x, t, ConditionFilter::Submode(c, k)).unwrap();
            mix[0] += w * v[0];
            mix[1] += w * v[1];
        }
        worst = worst.max((class_v[0] - mix[0]).abs()).max((class_v[1] - mix[1]).abs());
    }
    assert!(worst < 1e-10, "max error {worst}");
}

use rand::Rng;
use subflow::net::{NetConfig, NetInput, Tangent, VelocityNet};
use subflow::objectives::{cfm_loss, meanflow_loss, meanflow_terms, Conditioning, TrainExample};
use subflow::rng;

fn random_net(cfg: NetConfig, seed: u64, scale: f64) -> VelocityNet {
    let mut net = VelocityNet::init(cfg, seed).unwrap();
    let mut r = rng::stream(seed, "test.perturb", &[]);
    for p in net.params_mut() {
        *p += scale * r.random_range(-1.0..1.0);
    }
    net
}

fn config(uses_interval: bool) -> NetConfig {
    NetConfig {
        hidden_width: 16,
        hidden_layers: 2,
        embed_dim: 4,
        num_classes: 3,
        num_submodes: 2,
        uses_interval,
    }
}

fn batch(n: usize, seed: u64, interval: bool) -> Vec<TrainExample> {
    let mut r = rng::stream(seed, "test.batch", &[]);
    (0..n)
        .map(|i| {
            let mut ex = TrainExample::new(
                [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)],
                [r.random_range(-5.0..5.0), r.random_range(-3.0..3.0)],
                i % 3,
                Some(i % 2),
                r.random_range(0.0..0.6),
            );
            if interval {
                ex.r = Some(ex.t + r.random_range(0.0..0.4));
            }
            ex.drop_class = i % 5 == 0;
            ex
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn cfm_gradient_matches_finite_differences_on_50_coordinates() {
    let net = random_net(config(false), 11, 0.3);
    let b = batch(40, 1, false);
    let g = cfm_loss(&net, &b, Conditioning::SubFlow).unwrap().grad;
    let mut pick = rng::stream(2, "test.coords", &[]);
    let h = 1e-5;
    for _ in 0..50 {
        let i = pick.random_range(0..net.num_params());
        let mut plus = net.clone();
        plus.params_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[i] -= h;
        let fd = (cfm_loss(&plus, &b, Conditioning::SubFlow).unwrap().loss
            - cfm_loss(&minus, &b, Conditioning::SubFlow).unwrap().loss)
            / (2.0 * h);
        assert!(rel_err(fd, g[i]) < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
    }
}

#[test]
fn meanflow_gradient_treats_the_target_as_constant() {
    let net = random_net(config(true), 5, 0.3);
    let b = batch(24, 3, true);
    let g = meanflow_loss(&net, &b, Conditioning::Class).unwrap().grad;
    let targets: Vec<[f64; 2]> = meanflow_terms(&net, &b, Conditioning::Class)
        .unwrap()
        .iter()
        .map(|t| t.target)
        .collect();
    // loss with the targets frozen at the base parameters
    let frozen = |n: &VelocityNet| {
        b.iter()
            .zip(&targets)
            .map(|(ex, tg)| {
                let (xt, _) = subflow::mixture::interpolate(ex.x0, ex.x1, ex.t).unwrap();
                let u = n
                    .forward(&NetInput {
                        x: xt,
                        t: ex.t,
                        r: ex.r,
                        class: (!ex.drop_class).then_some(ex.class),
                        submode: None,
                    })
                    .unwrap();
                (u[0] - tg[0]).powi(2) + (u[1] - tg[1]).powi(2)
            })
            .sum::<f64>()
            / b.len() as f64
    };
    let mut pick = rng::stream(4, "test.coords", &[]);
    let h = 1e-5;
    for _ in 0..50 {
        let i = pick.random_range(0..net.num_params());
        let mut plus = net.clone();
        plus.params_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[i] -= h;
        let fd = (frozen(&plus) - frozen(&minus)) / (2.0 * h);
        assert!(rel_err(fd, g[i]) < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
    }
}

#[test]
fn jvp_matches_central_differences() {
    let net = random_net(config(true), 7, 0.3);
    let mut r = rng::stream(8, "test.jvp", &[]);
    let h = 1e-5;
    for _ in 0..30 {
        let t = r.random_range(0.05..0.5);
        let inp = NetInput {
            x: [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)],
            t,
            r: Some(t + r.random_range(0.0..0.45)),
            class: Some(r.random_range(0..3)),
            submode: None,
        };
        let tan = Tangent {
            x: [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)],
            t: r.random_range(-1.0..1.0),
            r: Some(r.random_range(-1.0..1.0)),
        };
        let shift = |s: f64| NetInput {
            x: [inp.x[0] + s * tan.x[0], inp.x[1] + s * tan.x[1]],
            t: inp.t + s * tan.t,
            r: Some(inp.r.unwrap() + s * tan.r.unwrap()),
            ..inp
        };
        let (p, m) = (net.forward(&shift(h)).unwrap(), net.forward(&shift(-h)).unwrap());
        let d = net.jvp(&inp, &tan).unwrap();
        for k in 0..2 {
            let fd = (p[k] - m[k]) / (2.0 * h);
            assert!((fd - d[k]).abs() < 1e-5, "component {k}: fd {fd} vs {}", d[k]);
        }
    }
}

#[test]
fn meanflow_total_derivative_matches_finite_differences() {
    let net = random_net(config(true), 9, 0.3);
    let b = batch(16, 10, true);
    let terms = meanflow_terms(&net, &b, Conditioning::SubFlow).unwrap();
    let h = 1e-5;
    for (ex, term) in b.iter().zip(&terms) {
        let (xt, v) = subflow::mixture::interpolate(ex.x0, ex.x1, ex.t).unwrap();
        let at = |s: f64| {
            net.forward(&NetInput {
                x: [xt[0] + s * v[0], xt[1] + s * v[1]],
                t: ex.t + s,
                r: ex.r,
                class: (!ex.drop_class).then_some(ex.class),
                submode: ex.submode,
            })
            .unwrap()
        };
        let (p, m) = (at(h), at(-h));
        for k in 0..2 {
            let fd = (p[k] - m[k]) / (2.0 * h);
            assert!(rel_err(fd, term.total_derivative[k]) < 1e-4, "fd {fd} vs {:?}", term.total_derivative);
        }
        let gap = ex.t - ex.r.unwrap();
        for ((vk, dk), tk) in v.iter().zip(term.total_derivative).zip(term.target) {
            assert!((tk - (vk - gap * dk)).abs() < 1e-12);
        }
    }
}

/// Plain-loop evaluation of a one-hidden-layer, two-unit net.
fn hand_forward(params: &[f64], x: [f64; 2], t: f64, class_row: usize, submode: Option<usize>) -> [f64; 2] {
    // layout: class_embed (2 × 1), submode_embed (1 × 1), W0 (2 × 37), b0 (2), W1 (2 × 2), b1 (2)
    let class_emb = params[class_row];
    let submode_emb = submode.map_or(0.0, |_| params[2]);
    let mut z = vec![x[0], x[1], t];
    for i in 0..16 {
        z.push((10f64.powf(i as f64 / 15.0) * t).sin());
    }
    for i in 0..16 {
        z.push((10f64.powf(i as f64 / 15.0) * t).cos());
    }
    z.push(class_emb);
    z.push(submode_emb);
    assert_eq!(z.len(), 37);
    let w0 = &params[3..3 + 74];
    let b0 = &params[77..79];
    let w1 = &params[79..83];
    let b1 = &params[83..85];
    let silu = |a: f64| a / (1.0 + (-a).exp());
    let mut hidden = [0.0; 2];
    for j in 0..2 {
        let mut a = b0[j];
        for (i, zi) in z.iter().enumerate() {
            a += w0[j * 37 + i] * zi;
        }
        hidden[j] = silu(a);
    }
    let mut out = [0.0; 2];
    for k in 0..2 {
        out[k] = b1[k] + w1[k * 2] * hidden[0] + w1[k * 2 + 1] * hidden[1];
    }
    out
}

fn two_unit_net() -> VelocityNet {
    let cfg = NetConfig {
        hidden_width: 2,
        hidden_layers: 1,
        embed_dim: 1,
        num_classes: 1,
        num_submodes: 1,
        uses_interval: false,
    };
    let net = random_net(cfg, 21, 0.7);
    assert_eq!(net.num_params(), 85);
    net
}

#[test]
fn two_unit_net_matches_hand_evaluation() {
    let net = two_unit_net();
    for (x, t, class, submode) in [
        ([0.3, -1.2], 0.25, Some(0), Some(0)),
        ([2.0, 0.5], 0.9, None, None),
        ([-1.0, 4.0], 0.0, Some(0), None),
    ] {
        let got = net.forward(&NetInput { x, t, r: None, class, submode }).unwrap();
        let want = hand_forward(net.params(), x, t, class.unwrap_or(1), submode);
        for k in 0..2 {
            assert!((got[k] - want[k]).abs() < 1e-12, "{got:?} vs {want:?}");
        }
    }
}

#[test]
fn two_example_loss_and_gradient_match_hand_evaluation() {
    let net = two_unit_net();
    let b = vec![
        TrainExample::new([0.1, -0.4], [1.5, 2.0], 0, Some(0), 0.3),
        TrainExample {
            drop_class: true,
            ..TrainExample::new([-1.0, 0.2], [-2.0, 1.0], 0, Some(0), 0.8)
        },
    ];
    let hand_loss = |p: &[f64]| {
        b.iter()
            .map(|ex| {
                let xt = [
                    (1.0 - ex.t) * ex.x0[0] + ex.t * ex.x1[0],
                    (1.0 - ex.t) * ex.x0[1] + ex.t * ex.x1[1],
                ];
                let u = hand_forward(p, xt, ex.t, if ex.drop_class { 1 } else { 0 }, ex.submode);
                (u[0] - (ex.x1[0] - ex.x0[0])).powi(2) + (u[1] - (ex.x1[1] - ex.x0[1])).powi(2)
            })
            .sum::<f64>()
            / 2.0
    };
    let out = cfm_loss(&net, &b, Conditioning::SubFlow).unwrap();
    assert!((out.loss - hand_loss(net.params())).abs() < 1e-12);
    let h = 1e-6;
    for i in 0..net.num_params() {
        let mut p = net.params().to_vec();
        p[i] += h;
        let up = hand_loss(&p);
        p[i] -= 2.0 * h;
        let down = hand_loss(&p);
        let fd = (up - down) / (2.0 * h);
        assert!((fd - out.grad[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", out.grad[i]);
    }
}

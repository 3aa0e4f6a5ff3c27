use rand_distr::{Distribution, StandardNormal};
use subflow::mixture::{MixtureSpec, Vec2};
use subflow::net::{NetConfig, VelocityNet};
use subflow::objectives::Conditioning;
use subflow::rng;
use subflow::sampler::{
    cfg_velocity_batch, generate, integrate, ConditionalField, ConditionedNet, FieldQuery, OracleField, SampleRequest,
};

fn starts(n: usize, seed: u64) -> Vec<Vec2> {
    let mut r = rng::stream(seed, "test.starts", &[]);
    (0..n)
        .map(|_| [StandardNormal.sample(&mut r), StandardNormal.sample(&mut r)])
        .collect()
}

fn mean_error(a: &[Vec2], b: &[Vec2]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum::<f64>()
        / a.len() as f64
}

#[test]
fn euler_error_on_the_analytic_field_shrinks_as_steps_double() {
    let spec = MixtureSpec::four_peak_toy();
    let field = OracleField { spec: &spec };
    let x0 = starts(500, 1);
    for class in [None, Some(0), Some(1)] {
        let classes = vec![class; x0.len()];
        let subs = vec![None; x0.len()];
        let reference = integrate(&field, &x0, &classes, &subs, 4096, 1.0, None).unwrap();
        let mut prev = f64::INFINITY;
        for nfe in [2, 4, 8, 16, 32, 64, 128] {
            let err = mean_error(&integrate(&field, &x0, &classes, &subs, nfe, 1.0, None).unwrap(), &reference);
            assert!(err < prev, "class {class:?}: error {err} at nfe {nfe} did not drop below {prev}");
            prev = err;
        }
    }
}

#[test]
fn unit_guidance_is_bitwise_the_conditional_branch() {
    let cfg = NetConfig {
        hidden_width: 8,
        hidden_layers: 2,
        embed_dim: 3,
        num_classes: 2,
        num_submodes: 2,
        uses_interval: true,
    };
    let mut net = VelocityNet::init(cfg, 3).unwrap();
    for (i, p) in net.params_mut().iter_mut().enumerate() {
        *p += ((i * 7919) % 13) as f64 * 0.01;
    }
    let field = ConditionedNet {
        net: &net,
        conditioning: Conditioning::SubFlow,
    };
    let qs: Vec<FieldQuery> = starts(50, 4)
        .into_iter()
        .enumerate()
        .map(|(i, x)| FieldQuery {
            x,
            t: 0.1,
            r: Some(0.6),
            class: Some(i % 2),
            submode: Some((i / 2) % 2),
        })
        .collect();
    let guided = cfg_velocity_batch(&field, &qs, 1.0).unwrap();
    let plain = field.eval_batch(&qs).unwrap();
    for (g, p) in guided.iter().zip(&plain) {
        assert_eq!(g[0].to_bits(), p[0].to_bits());
        assert_eq!(g[1].to_bits(), p[1].to_bits());
    }
}

#[test]
fn samples_do_not_depend_on_batch_size() {
    let spec = MixtureSpec::four_peak_toy();
    let field = OracleField { spec: &spec };
    let small = generate(&field, None, 1.0, &SampleRequest::new(1, 10, 4, 9)).unwrap();
    let big = generate(&field, None, 1.0, &SampleRequest::new(1, 3000, 4, 9)).unwrap();
    assert_eq!(small.samples[..], big.samples[..10]);
}

#[test]
fn many_step_oracle_samples_reproduce_class_shares() {
    let spec = MixtureSpec::four_peak_toy();
    let field = OracleField { spec: &spec };
    for class in 0..2 {
        let b = generate(&field, None, 1.0, &SampleRequest::new(class, 4000, 200, 2)).unwrap();
        let shares = subflow::metrics::class_mode_shares(&spec, class, &b.points(), 0.5).unwrap().shares;
        assert!((shares[0] - 0.7).abs() < 0.03 && (shares[1] - 0.3).abs() < 0.03, "{shares:?}");
    }
}

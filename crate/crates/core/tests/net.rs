use ptconv::conv::{FilterBank, SignalBatch};
use ptconv::kernel::PolarGrid;
use ptconv::mesh::{generate_surface, SurfaceSpec};
use ptconv::mnist::LabeledImages;
use ptconv::net::{
    batch_softmax_ce, evaluate, loss_softmax_ce, loss_triplet, train, Dense, Domain, Layer, LossHead, Network, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[k] += h;
    let up = f(&p);
    p[k] -= 2.0 * h;
    (up - f(&p)) / (2.0 * h)
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for label in [0, 4, 9] {
        let logits = random_vec(&mut rng, 10, 3.0);
        let (_, grad) = loss_softmax_ce(&logits, label).unwrap();
        for k in 0..10 {
            let fd = central_difference(|z| loss_softmax_ce(z, label).unwrap().0, &logits, k, 1e-5);
            assert!((fd - grad[k]).abs() <= 1e-8, "logit {k}: {} vs {fd}", grad[k]);
        }
    }
}

#[test]
fn triplet_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feats: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 16, 1.0)).collect();
    let (lambda, margin) = (1.0, 0.5);
    let (_, grads) = loss_triplet(&feats[0], &feats[1], &feats[2], lambda, margin).unwrap();
    for which in 0..3 {
        let loss_at = |v: &[f64]| {
            let mut f = feats.clone();
            f[which] = v.to_vec();
            loss_triplet(&f[0], &f[1], &f[2], lambda, margin).unwrap().0
        };
        for k in 0..16 {
            let fd = central_difference(loss_at, &feats[which], k, 1e-6);
            assert!((fd - grads[which][k]).abs() <= 1e-6, "feature {which}/{k}");
        }
    }
    let a = vec![0.3, -0.2];
    let (loss, _) = loss_triplet(&a, &[0.8, 0.4], &[0.0, 0.0], 0.0, 0.5).unwrap();
    assert!((loss - (0.25 + 0.36)).abs() < 1e-15);
}

/// 10 × 10 bump mesh (100 vertices) with two vector fields.
fn hundred_vertex_domain() -> Domain {
    let spec = SurfaceSpec::gaussian_bump(10, 10, [0.5, 0.4], 0.3, 0.3);
    let mesh = generate_surface(&spec).unwrap();
    let grid = PolarGrid::new(3, 8, 0.3).unwrap();
    Domain::build(&mesh, &[vec![0], vec![spec.index(9, 9)]], grid).unwrap()
}

fn two_layer_net(domain: &Domain, seed: u64) -> Network {
    let nb = domain.n_bins();
    let (q, p, classes) = (2, 4, 3);
    let mut net = Network::new(
        vec![
            Layer::Ptc(FilterBank::new(q, p, nb, vec![0.0; q * p * nb], vec![0, 1, 0, 1]).unwrap()),
            Layer::Relu,
            Layer::Ptc(FilterBank::new(p, p, nb, vec![0.0; p * p * nb], vec![1, 0, 1, 0]).unwrap()),
            Layer::Relu,
            Layer::GlobalPool,
            Layer::FullyConnected(Dense {
                inputs: p,
                outputs: classes,
                weight: vec![0.0; p * classes],
                bias: vec![0.0; classes],
            }),
        ],
        LossHead::SoftmaxCrossEntropy { classes },
    );
    net.initialise(seed);
    net
}

fn network_loss(net: &Network, domain: &Domain, input: &SignalBatch, labels: &[usize]) -> f64 {
    batch_softmax_ce(&net.predict(domain, input).unwrap(), labels).unwrap().0
}

#[test]
fn two_layer_network_gradients_match_finite_differences() {
    let domain = hundred_vertex_domain();
    assert_eq!(domain.n_vertices(), 100);
    let mut net = two_layer_net(&domain, 5);
    // Scale up the pooled head so the loss is not flat in the parameters.
    if let Layer::FullyConnected(d) = &mut net.layers[5] {
        d.weight.iter_mut().for_each(|w| *w *= 40.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = SignalBatch {
        n: 100,
        channels: 2,
        samples: 3,
        data: random_vec(&mut rng, 600, 1.0),
    };
    let labels = [0, 2, 1];
    let (out, caches) = net.forward(&domain, &input).unwrap();
    let (_, grad_out) = batch_softmax_ce(&out, &labels).unwrap();
    let (grads, _) = net.backward(&domain, &caches, grad_out).unwrap();
    let h = 1e-6;
    let n_slices = net.parameters().len();
    let mut checked = 0;
    for slice in 0..n_slices {
        for k in 0..net.parameters()[slice].len() {
            let mut probe = net.clone();
            let w0 = probe.parameters()[slice][k];
            probe.parameters_mut()[slice][k] = w0 + h;
            let up = network_loss(&probe, &domain, &input, &labels);
            probe.parameters_mut()[slice][k] = w0 - h;
            let down = network_loss(&probe, &domain, &input, &labels);
            let fd = (up - down) / (2.0 * h);
            let g = grads.0[slice][k];
            assert!((fd - g).abs() <= 1e-5 * g.abs().max(1e-4), "slice {slice} index {k}: {g} vs {fd}");
            checked += 1;
        }
    }
    assert_eq!(checked, net.n_parameters());
}

#[test]
fn zero_input_yields_the_bias() {
    let domain = hundred_vertex_domain();
    let mut net = Network::single_conv_classifier(100, domain.n_bins(), 4, vec![0, 1, 0, 1], 10, 3);
    if let Layer::FullyConnected(d) = &mut net.layers[3] {
        d.bias = (0..10).map(|k| k as f64 * 0.1 - 0.3).collect();
    }
    let out = net.predict(&domain, &SignalBatch::zeros(100, 1, 2)).unwrap();
    let Layer::FullyConnected(d) = &net.layers[3] else { unreachable!() };
    assert_eq!(&out.data[..10], &d.bias[..]);
    assert_eq!(&out.data[10..], &d.bias[..]);
}

#[test]
fn seeded_forward_is_bitwise_deterministic() {
    let domain = hundred_vertex_domain();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let input = SignalBatch {
        n: 100,
        channels: 2,
        samples: 2,
        data: random_vec(&mut rng, 400, 1.0),
    };
    let a = two_layer_net(&domain, 77).predict(&domain, &input).unwrap();
    let b = two_layer_net(&domain, 77).predict(&domain, &input).unwrap();
    assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
}

/// 8 × 8 images: class 0 is bright on the left half, class 1 on the right.
fn halves_dataset(count: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = Vec::with_capacity(count * 64);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label: u8 = rng.random_range(0..2);
        for _row in 0..8 {
            for col in 0..8 {
                let lit = (col < 4) == (label == 0);
                let base = if lit { 0.8 } else { 0.1 };
                pixels.push((base + rng.random_range(-0.1f32..0.1)).clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    LabeledImages::new(8, 8, pixels, labels).unwrap()
}

fn grid_domain(spec: &SurfaceSpec) -> Domain {
    let mesh = generate_surface(spec).unwrap();
    Domain::build(&mesh, &[vec![0]], PolarGrid::new(3, 8, 3.0 * mesh.mean_edge_length()).unwrap()).unwrap()
}

#[test]
fn zero_iterations_leave_the_network_unchanged() {
    let domain = grid_domain(&SurfaceSpec::flat(8, 8));
    let mut net = Network::single_conv_classifier(64, domain.n_bins(), 2, vec![0, 0], 2, 1);
    let before = net.clone();
    let config = TrainConfig {
        iterations: 0,
        ..TrainConfig::default()
    };
    let log = train(&mut net, &[domain], &halves_dataset(20, 1), None, &config).unwrap();
    assert_eq!(net, before);
    assert!(log.rows.is_empty());
}

#[test]
fn toy_task_is_learned() {
    let domain = grid_domain(&SurfaceSpec::flat(8, 8));
    let data = halves_dataset(400, 2);
    let mut net = Network::single_conv_classifier(64, domain.n_bins(), 4, vec![0; 4], 2, 2);
    let config = TrainConfig {
        iterations: 500,
        seed: 3,
        eval_samples: 0,
        ..TrainConfig::default()
    };
    train(&mut net, std::slice::from_ref(&domain), &data, None, &config).unwrap();
    let accuracy = evaluate(&net, &domain, &data).unwrap();
    assert!(accuracy >= 0.99, "train accuracy {accuracy}");
}

#[test]
fn seeded_training_is_reproducible() {
    let domain = grid_domain(&SurfaceSpec::flat(8, 8));
    let data = halves_dataset(200, 4);
    let run = || {
        let mut net = Network::single_conv_classifier(64, domain.n_bins(), 2, vec![0, 0], 2, 9);
        let config = TrainConfig {
            iterations: 60,
            log_every: 20,
            eval_samples: 50,
            seed: 11,
            ..TrainConfig::default()
        };
        let log = train(&mut net, std::slice::from_ref(&domain), &data, Some((&domain, &data)), &config).unwrap();
        (net, log)
    };
    let (net_a, log_a) = run();
    let (net_b, log_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.rows.len(), 3);
    assert_eq!(net_a, net_b);
}

#[test]
fn transfer_leaves_weights_untouched() {
    let source = grid_domain(&SurfaceSpec::flat(8, 8));
    let target = grid_domain(&SurfaceSpec::gaussian_bump(8, 8, [0.5, 0.5], 0.3, 0.3));
    let data = halves_dataset(200, 5);
    let mut net = Network::single_conv_classifier(64, source.n_bins(), 4, vec![0; 4], 2, 4);
    let config = TrainConfig {
        iterations: 100,
        eval_samples: 0,
        ..TrainConfig::default()
    };
    train(&mut net, std::slice::from_ref(&source), &data, None, &config).unwrap();
    let frozen = net.clone();
    let on_target = evaluate(&net, &target, &data).unwrap();
    assert_eq!(net, frozen);
    assert!(on_target > 0.5);
}

#[test]
fn random_labels_sit_at_chance() {
    let domain = Domain::pixel_grid(8, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let count = 2000;
    let pixels: Vec<f32> = (0..count * 64).map(|_| rng.random_range(0.0f32..1.0)).collect();
    let labels: Vec<u8> = (0..count).map(|_| rng.random_range(0..10)).collect();
    let data = LabeledImages::new(8, 8, pixels, labels).unwrap();
    let net = Network::single_conv_classifier(64, domain.n_bins(), 4, vec![0; 4], 10, 13);
    let accuracy = evaluate(&net, &domain, &data).unwrap();
    assert!((accuracy - 0.10).abs() <= 0.02, "{accuracy}");
}

#[test]
fn constant_predictor_on_constant_labels() {
    let domain = Domain::pixel_grid(4, 4, 1);
    let data = LabeledImages::new(4, 4, vec![0.5; 16 * 30], vec![7; 30]).unwrap();
    let mut net = Network::single_conv_classifier(16, domain.n_bins(), 2, vec![0, 0], 10, 1);
    if let Layer::FullyConnected(d) = &mut net.layers[3] {
        d.weight.iter_mut().for_each(|w| *w = 0.0);
        d.bias[7] = 1.0;
    }
    assert_eq!(evaluate(&net, &domain, &data).unwrap(), 1.0);
}

#[test]
fn checkpoint_survives_a_file_round_trip() {
    let domain = hundred_vertex_domain();
    let net = two_layer_net(&domain, 21);
    let path = std::env::temp_dir().join(format!("ptconv-net-{}.ptcn", std::process::id()));
    net.save(&path).unwrap();
    let back = Network::load(&path).unwrap();
    std::fs::remove_file(&path).ok();
    assert_eq!(back, net);
}

mod common;

use std::sync::Arc;

use common::{aligned_flat_basis, dense_correlation, relative_linf, test_image};
use proptest::prelude::*;
use ptconv::conv::{kernel_times, ptc_apply, ptc_backward, ptc_forward_batched, ptc_forward_reference, FilterBank, Signal, SignalBatch};
use ptconv::geodesic::fast_marching;
use ptconv::kernel::{assemble, build_basis, edge_detector_template, KernelBasis, KernelTemplate, PolarGrid};
use ptconv::mesh::{generate_surface, mass_matrix, MassMatrix, SurfaceSpec};
use ptconv::transport::build_frames;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Roughly 50 vertices on a bump, with two vector fields.
fn small_domain() -> (MassMatrix, Vec<Arc<KernelBasis>>) {
    let spec = SurfaceSpec::gaussian_bump(7, 7, [0.45, 0.55], 0.3, 0.3);
    let mesh = generate_surface(&spec).unwrap();
    let grid = PolarGrid::new(3, 8, 0.4).unwrap();
    let bases = [0, spec.index(6, 3)]
        .into_iter()
        .map(|s| {
            let field = fast_marching(&mesh, &[s]).unwrap();
            let frames = build_frames(&mesh, &field).unwrap();
            Arc::new(build_basis(&mesh, &frames, &field, s, grid).unwrap())
        })
        .collect();
    (mass_matrix(&mesh), bases)
}

#[test]
fn flat_grid_matches_dense_cross_correlation() {
    let side = 64;
    let h = 1.0 / 63.0;
    let radius = 3.0 * h;
    let (_, mesh, basis) = aligned_flat_basis(side, 3, 8, radius);
    let mass = mass_matrix(&mesh);
    let image = test_image(side);
    let grid = basis.grid();
    let gaussian = KernelTemplate::gaussian(0, grid, 2.0 * h);
    let edge = edge_detector_template(0, 0.6, radius, 3, 8).unwrap();
    for template in [gaussian, edge] {
        let k = assemble(&basis, &template, 1.0, 0.0, false).unwrap();
        let out = ptc_apply(&k, &mass, &image).unwrap();
        let oracle = dense_correlation(&image, side, &template.weights, 3, 8, radius, 4);
        let err = relative_linf(&out, &oracle);
        assert!(err <= 1e-2, "relative error {err}");
    }
}

#[test]
fn centred_impulse_gives_the_stencil() {
    let side = 64;
    let h = 1.0 / 63.0;
    let radius = 4.0 * h;
    let (spec, mesh, basis) = aligned_flat_basis(side, 4, 16, radius);
    let template = KernelTemplate::gaussian(0, basis.grid(), 2.5 * h);
    let k = assemble(&basis, &template, 1.0, 0.0, false).unwrap();
    let centre = spec.index(32, 32);
    let mut impulse = vec![0.0; mesh.n_vertices()];
    impulse[centre] = 1.0;
    let out = ptc_apply(&k, &mass_matrix(&mesh), &impulse).unwrap();
    let oracle = dense_correlation(&impulse, side, &template.weights, 4, 16, radius, 5);
    assert!(relative_linf(&out, &oracle) <= 1e-2);
    // Correlation flips the stencil: the response at x reads w(c - x).
    assert!(out[centre] > 0.0);
    let off: usize = mesh.vertices().iter().zip(&out).filter(|(p, v)| **v != 0.0 && (*p - mesh.vertex(centre)).norm() > radius + 1e-9).count();
    assert_eq!(off, 0);
}

#[test]
fn adjoint_identity() {
    let (mass, bases) = small_domain();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for basis in &bases {
        let template = KernelTemplate {
            weights: random_vec(&mut rng, basis.n_bins()),
            ..KernelTemplate::zeros(0, basis.grid())
        };
        let k = assemble(basis, &template, 1.0, 0.4, false).unwrap();
        let n = mass.len();
        let (f, g) = (random_vec(&mut rng, n), random_vec(&mut rng, n));
        let lhs = dot(&ptc_apply(&k, &mass, &f).unwrap(), &g);
        let rhs = dot(&f, &mass.scale(&kernel_times(&k, &g).unwrap()));
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()));
    }
}

#[test]
fn batched_forward_matches_reference_path() {
    let (mass, bases) = small_domain();
    assert!((45..=55).contains(&mass.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (q, p, nb) = (2, 3, bases[0].n_bins());
    let bank = FilterBank::new(q, p, nb, random_vec(&mut rng, q * p * nb), vec![0, 1, 0]).unwrap();
    let signals: Vec<Signal> = (0..4).map(|_| Signal::new(mass.len(), q, random_vec(&mut rng, mass.len() * q)).unwrap()).collect();
    let batch = SignalBatch::from_signals(&signals).unwrap();
    let (out, cache) = ptc_forward_batched(&bank, &bases, mass.weights(), &batch).unwrap();
    assert_eq!((out.n, out.channels, out.samples), (mass.len(), p, 4));
    assert_eq!(cache.samples(), 4);
    for (s, signal) in signals.iter().enumerate() {
        let reference = ptc_forward_reference(&bank, &bases, &mass, signal).unwrap();
        let got = out.sample(s);
        let scale = reference.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in got.values().iter().zip(reference.values()) {
            assert!((a - b).abs() <= 1e-12 * scale);
        }
    }
}

fn half_square_loss(bank: &FilterBank, bases: &[Arc<KernelBasis>], mass: &[f64], batch: &SignalBatch) -> f64 {
    let (out, _) = ptc_forward_batched(bank, bases, mass, batch).unwrap();
    0.5 * out.data.iter().map(|v| v * v).sum::<f64>()
}

#[test]
fn weight_and_input_gradients_match_finite_differences() {
    let (mass, bases) = small_domain();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (q, p, nb) = (2, 2, bases[0].n_bins());
    let mut bank = FilterBank::new(q, p, nb, random_vec(&mut rng, q * p * nb), vec![1, 0]).unwrap();
    let mut batch = SignalBatch::from_signals(&[
        Signal::new(mass.len(), q, random_vec(&mut rng, mass.len() * q)).unwrap(),
        Signal::new(mass.len(), q, random_vec(&mut rng, mass.len() * q)).unwrap(),
    ])
    .unwrap();
    let (out, cache) = ptc_forward_batched(&bank, &bases, mass.weights(), &batch).unwrap();
    // L = ½‖out‖², so the upstream gradient is the output itself.
    let grads = ptc_backward(&bank, &bases, mass.weights(), Some(&cache), &out).unwrap();
    let h = 1e-5;
    for k in 0..bank.weights().len() {
        let w0 = bank.weights()[k];
        bank.weights_mut()[k] = w0 + h;
        let up = half_square_loss(&bank, &bases, mass.weights(), &batch);
        bank.weights_mut()[k] = w0 - h;
        let down = half_square_loss(&bank, &bases, mass.weights(), &batch);
        bank.weights_mut()[k] = w0;
        let fd = (up - down) / (2.0 * h);
        let g = grads.weights[k];
        assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3), "weight {k}: {g} vs {fd}");
    }
    for k in (0..batch.data.len()).step_by(5) {
        let x0 = batch.data[k];
        batch.data[k] = x0 + h;
        let up = half_square_loss(&bank, &bases, mass.weights(), &batch);
        batch.data[k] = x0 - h;
        let down = half_square_loss(&bank, &bases, mass.weights(), &batch);
        batch.data[k] = x0;
        let fd = (up - down) / (2.0 * h);
        let g = grads.input.data[k];
        assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3), "input {k}: {g} vs {fd}");
    }
}

#[test]
fn single_bin_gradient_by_hand() {
    let (mass, bases) = small_domain();
    let basis = &bases[0];
    let nb = basis.n_bins();
    let bin = 5;
    let mut weights = vec![0.0; nb];
    weights[bin] = 0.7;
    let bank = FilterBank::new(1, 1, nb, weights, vec![0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = random_vec(&mut rng, mass.len());
    let g = random_vec(&mut rng, mass.len());
    let batch = SignalBatch::from_signals(&[Signal::from_channel(f.clone()).unwrap()]).unwrap();
    let upstream = SignalBatch::from_signals(&[Signal::from_channel(g.clone()).unwrap()]).unwrap();
    let (_, cache) = ptc_forward_batched(&bank, &bases[..1], mass.weights(), &batch).unwrap();
    let grads = ptc_backward(&bank, &bases[..1], mass.weights(), Some(&cache), &upstream).unwrap();
    let gathered = basis.bin_matrix(bin).mul_vec(&mass.scale(&f));
    let expected = dot(&gathered, &g);
    assert!((grads.weights[bin] - expected).abs() <= 1e-12 * expected.abs());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ptc_apply_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in 0u64..10_000) {
        let (mass, bases) = small_domain();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = KernelTemplate {
            weights: random_vec(&mut rng, bases[0].n_bins()),
            ..KernelTemplate::zeros(0, bases[0].grid())
        };
        let k = assemble(&bases[0], &template, 1.0, 0.0, false).unwrap();
        let f = random_vec(&mut rng, mass.len());
        let g = random_vec(&mut rng, mass.len());
        let combo: Vec<f64> = f.iter().zip(&g).map(|(a, b)| alpha * a + beta * b).collect();
        let of = ptc_apply(&k, &mass, &f).unwrap();
        let og = ptc_apply(&k, &mass, &g).unwrap();
        let oc = ptc_apply(&k, &mass, &combo).unwrap();
        for ((c, a), b) in oc.iter().zip(&of).zip(&og) {
            prop_assert!((c - (alpha * a + beta * b)).abs() <= 1e-12 * (1.0 + c.abs()));
        }
    }
}

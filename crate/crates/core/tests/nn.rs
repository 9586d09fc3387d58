mod common;

use common::blob;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatrob::nn::{argmax, build_mnist_net, cross_entropy, softmax, LayerSpec, Network, Sgd};
use spatrob::ImageTensor;

fn tiny_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv {
            in_channels: 1,
            out_channels: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: 2 },
        LayerSpec::Conv {
            in_channels: 4,
            out_channels: 3,
            kernel: 3,
            stride: 1,
            padding: 0,
        },
        LayerSpec::GlobalAvgPool,
    ]
}

fn tiny_net(rng: &mut ChaCha8Rng) -> (Vec<f64>, Network<f64>) {
    let n = 4 * 9 + 4 + 3 * 4 * 9 + 3;
    let flat: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect();
    let net = Network::from_specs(1, 3, &tiny_specs(), &flat).unwrap();
    (flat, net)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn backward_matches_central_differences_on_tiny_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-6;
    for trial in 0..5 {
        let (flat, net) = tiny_net(&mut rng);
        let x = ImageTensor::from_fn(1, 8, 8, |_, _, _| rng.gen_range(0.0..1.0));
        let label = trial % 3;
        let b = net.backward(&x, label).unwrap();
        assert_eq!(b.loss, net.loss(&x, label).unwrap());

        for _ in 0..20 {
            let (i, j) = (rng.gen_range(0..8), rng.gen_range(0..8));
            let (mut plus, mut minus) = (x.clone(), x.clone());
            plus.set(0, i, j, x.get(0, i, j) + h);
            minus.set(0, i, j, x.get(0, i, j) - h);
            let fd = (net.loss(&plus, label).unwrap() - net.loss(&minus, label).unwrap()) / (2.0 * h);
            let g = b.image.get(0, i, j);
            assert!(rel_err(g, fd) <= 1e-3, "pixel ({i},{j}): {g} vs {fd}");
        }

        let grads = b.params.flat();
        assert_eq!(grads.len(), flat.len());
        for _ in 0..20 {
            let k = rng.gen_range(0..flat.len());
            let at = |d: f64| {
                let mut f = flat.clone();
                f[k] += d;
                Network::from_specs(1, 3, &tiny_specs(), &f).unwrap().loss(&x, label).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!(rel_err(grads[k], fd) <= 1e-3, "weight {k}: {} vs {fd}", grads[k]);
        }
    }
}

#[test]
fn cross_entropy_matches_high_precision_value() {
    let mut logits = vec![0.0; 10];
    logits[0] = 1.0;
    // -ln(e / (e + 9)) to 40 digits
    let oracle = 1.461_150_171_734_474_795_018_943_536_403_941_686_749_f64;
    assert!((cross_entropy(&logits, 0).unwrap() - oracle).abs() <= 1e-14);
    assert!((cross_entropy(&[0.0; 10], 3).unwrap() - 10f64.ln()).abs() <= 1e-15);
    logits[0] = 1000.0;
    assert!(cross_entropy(&logits, 0).unwrap() <= 1e-6);
    assert!(cross_entropy(&logits, 10).is_err());
}

#[test]
fn predict_breaks_ties_low_and_finds_unique_max() {
    assert_eq!(argmax(&[0.0; 10]), 0);
    let mut z = vec![0.0; 10];
    z[7] = 0.5;
    assert_eq!(argmax(&z), 7);
}

#[test]
fn eight_examples_are_memorized_within_200_steps() {
    let images: Vec<ImageTensor> = (0..8).map(|k| blob(k, 28, 28)).collect();
    let labels: Vec<usize> = (0..8).map(|k| (k * 3) % 10).collect();
    let mut net = build_mnist_net::<f32>(0);
    let mut opt = Sgd::new(&net, 0.9);
    let mut reached = None;
    for step in 0..200 {
        if net.predict_batch(&images).unwrap() == labels {
            reached = Some(step);
            break;
        }
        let g = net.grad_batch(&images, &labels, true, false).unwrap();
        opt.step(&mut net, &g.params.unwrap(), 0.02).unwrap();
    }
    assert!(reached.is_some(), "still misclassifying after 200 steps");
}

#[test]
fn training_steps_are_deterministic() {
    let run = || {
        let images: Vec<ImageTensor> = (0..4).map(|k| blob(k + 20, 28, 28)).collect();
        let labels = vec![1, 4, 1, 9];
        let mut net = build_mnist_net::<f32>(5);
        let mut opt = Sgd::new(&net, 0.9);
        for _ in 0..3 {
            let g = net.grad_batch(&images, &labels, true, false).unwrap();
            opt.step(&mut net, &g.params.unwrap(), 0.05).unwrap();
        }
        net.flat_params()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_sums_to_one(z in prop::collection::vec(-500.0f64..500.0, 1..20)) {
        let s: f64 = softmax(&z).iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn cross_entropy_is_non_negative(z in prop::collection::vec(-200.0f64..200.0, 10), y in 0usize..10) {
        prop_assert!(cross_entropy(&z, y).unwrap() >= 0.0);
    }

    #[test]
    fn predictions_ignore_a_constant_shift(z in prop::collection::vec(-50.0f64..50.0, 10), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        // a shift can merge near-ties under rounding, so only demand agreement when the max is clear
        let mut sorted = z.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        prop_assume!(sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(argmax(&z), argmax(&shifted));
    }
}

mod common;

use common::{blob, predict, reference_warp, Constant, Linear};
use proptest::prelude::*;
use spatrob::attacks::{score, Classifier, LinfConfig};
use spatrob::data::Dataset;
use spatrob::defenses::{
    augment_batch, augment_example, evaluate_with_vote, majority_vote_predict, mode, train, vote_survives_grid, AugmentPolicy,
    VoteParams,
};
use spatrob::eval::{accuracy_of, run_adversary, AdversarySpec};
use spatrob::nn::{Network, TrainConfig};
use spatrob::rng;
use spatrob::{AttackSpace, ImageTensor};

/// Ten overlap templates; example `k` of [`blob_dataset`] is template `k % 10`.
fn template_model() -> Linear {
    Linear {
        weights: (0..10).map(|k| blob(k, 28, 28).data().to_vec()).collect(),
        bias: vec![0.0; 10],
    }
}

fn blob_dataset(n: usize) -> Dataset {
    let images = (0..n).map(|k| blob((k % 10) as u64, 28, 28)).collect();
    Dataset::new(images, (0..n).map(|k| k % 10).collect(), "synthetic").unwrap()
}

fn max_abs_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn no_augmentation_returns_the_input() {
    let x = blob(1, 28, 28);
    let m = template_model();
    assert_eq!(augment_example(&m, &x, 1, &AugmentPolicy::none(), 3, 4).unwrap(), x);
}

#[test]
fn worst_of_one_equals_random_augmentation() {
    let m = template_model();
    let space = AttackSpace::mnist();
    for e in 0..5 {
        let x = blob(e, 28, 28);
        let a = augment_example(&m, &x, e as usize, &AugmentPolicy::worst_of_k(space, 1, 9), 2, e as usize).unwrap();
        let b = augment_example(&m, &x, e as usize, &AugmentPolicy::random(space, 9), 2, e as usize).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn constant_loss_model_keeps_the_first_sample() {
    let m = Constant { class: 0, classes: 10 };
    let space = AttackSpace::mnist();
    let policy = AugmentPolicy::worst_of_k(space, 10, 31);
    let x = blob(6, 28, 28);
    let out = augment_example(&m, &x, 4, &policy, 7, 12).unwrap();

    let mut r = rng::seeded(rng::derive_seed(31, &[7, 12]));
    let samples: Vec<_> = (0..10).map(|_| space.sample(&mut r)).collect();
    let warps: Vec<ImageTensor> = samples.iter().map(|p| reference_warp(&x, p)).collect();
    let losses: Vec<f64> = score(&m, &warps, 4).unwrap().iter().map(|s| s.loss).collect();
    assert!(losses.iter().all(|&l| l == losses[0]));
    assert!(max_abs_diff(&out, &warps[0]) <= 1e-12);
    assert!(warps[1..].iter().all(|w| max_abs_diff(&out, w) > 1e-6));
}

#[test]
fn worst_of_k_output_beats_each_of_its_samples() {
    let m = template_model();
    let space = AttackSpace::mnist();
    let policy = AugmentPolicy::worst_of_k(space, 10, 5);
    for e in 0..8usize {
        let x = blob(e as u64, 28, 28);
        let y = e % 10;
        let out = augment_example(&m, &x, y, &policy, 1, e).unwrap();
        let best = score(&m, std::slice::from_ref(&out), y).unwrap()[0].loss;
        let mut r = rng::seeded(rng::derive_seed(5, &[1, e as u64]));
        let warps: Vec<ImageTensor> = (0..10).map(|_| reference_warp(&x, &space.sample(&mut r))).collect();
        for s in score(&m, &warps, y).unwrap() {
            assert!(best >= s.loss - 1e-9, "example {e}: {best} < {}", s.loss);
        }
    }
}

#[test]
fn batched_augmentation_matches_single_calls() {
    let m = template_model();
    let images: Vec<ImageTensor> = (0..6).map(|k| blob(k, 28, 28)).collect();
    let labels: Vec<usize> = (0..6).collect();
    let idx = [10, 3, 7, 0, 22, 5];
    for policy in [
        AugmentPolicy::random(AttackSpace::mnist(), 1),
        AugmentPolicy::worst_of_k(AttackSpace::mnist(), 4, 1),
        AugmentPolicy::linf(LinfConfig::with_epsilon(0.1), 1),
    ] {
        let batch = augment_batch(&m, &images, &labels, &policy, 9, &idx).unwrap();
        for i in 0..6 {
            let single = augment_example(&m, &images[i], labels[i], &policy, 9, idx[i]).unwrap();
            assert_eq!(batch[i], single, "{} example {i}", policy.name());
        }
    }
}

#[test]
fn constant_model_votes_for_its_class() {
    let m = Constant { class: 6, classes: 10 };
    let v = VoteParams::default();
    for k in 0..4 {
        assert_eq!(majority_vote_predict(&m, &blob(k, 28, 28), 10, &v.space, k).unwrap(), 6);
    }
}

#[test]
fn identity_votes_reduce_to_plain_prediction() {
    let m = template_model();
    for k in 0..10 {
        let x = blob(k, 28, 28);
        let want = predict(&m, &x);
        assert_eq!(majority_vote_predict(&m, &x, 1, &AttackSpace::degenerate(), k).unwrap(), want);
        assert_eq!(majority_vote_predict(&m, &x, 7, &AttackSpace::degenerate(), k).unwrap(), want);
    }
    assert!(majority_vote_predict(&m, &blob(0, 28, 28), 0, &AttackSpace::degenerate(), 0).is_err());
}

#[test]
fn degenerate_voting_matches_the_undefended_evaluation() {
    let m = template_model();
    let data = blob_dataset(20);
    let space = AttackSpace::new(3.0, 30.0, 3, 7).unwrap();
    let vote = VoteParams {
        n_votes: 5,
        space: AttackSpace::degenerate(),
        seed: 3,
    };
    let report = evaluate_with_vote(&m, &data, &space, &vote).unwrap();
    let natural = accuracy_of(&run_adversary(&m, &data, &AdversarySpec::Natural, 0).unwrap());
    let grid = accuracy_of(&run_adversary(&m, &data, &AdversarySpec::Grid { space }, 0).unwrap());
    assert_eq!(report.examples, 20);
    assert_eq!(report.natural_vote, natural);
    assert_eq!(report.grid_vote, grid);
    assert!(grid < natural, "fixture should be attackable: {grid} vs {natural}");
}

/// Class 1 iff the intensity centroid lies right of the vertical midline.
struct CentroidSide;

impl Classifier for CentroidSide {
    fn num_classes(&self) -> usize {
        2
    }
    fn logits(&self, images: &[ImageTensor]) -> spatrob::Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|im| {
                let (mut mass, mut mx) = (0.0, 0.0);
                for i in 0..im.height() {
                    for j in 0..im.width() {
                        mass += im.get(0, i, j);
                        mx += im.get(0, i, j) * j as f64;
                    }
                }
                let side = mx / mass.max(1e-12) - (im.width() - 1) as f64 / 2.0;
                vec![-side, side]
            })
            .collect())
    }
}

#[test]
fn grid_survival_agrees_with_pointwise_votes() {
    let space = AttackSpace::new(2.0, 10.0, 3, 5).unwrap();
    let vote = VoteParams {
        n_votes: 3,
        space: AttackSpace::new(1.0, 10.0, 1, 1).unwrap(),
        seed: 8,
    };
    let mut outcomes = [0; 2];
    for e in 0..16usize {
        let x = blob(e as u64, 28, 28);
        let y = predict(&CentroidSide, &x);
        let pointwise = space.grid_points().iter().enumerate().all(|(j, p)| {
            let seed = rng::derive_seed(vote.seed, &[e as u64, j as u64]);
            majority_vote_predict(&CentroidSide, &reference_warp(&x, p), vote.n_votes, &vote.space, seed).unwrap() == y
        });
        let batched = vote_survives_grid(&CentroidSide, &x, y, e, &space, &vote).unwrap();
        assert_eq!(batched, pointwise, "example {e}");
        outcomes[batched as usize] += 1;
    }
    assert!(outcomes.iter().all(|&c| c > 0), "fixture should mix outcomes: {outcomes:?}");
}

#[test]
fn training_is_deterministic_and_counts_queries() {
    let data = blob_dataset(24);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        warmup_steps: 2,
        ..TrainConfig::default()
    };
    let policy = AugmentPolicy::worst_of_k(AttackSpace::mnist(), 3, 17);
    let a = train::<f32>(&data, &policy, &cfg).unwrap();
    let b = train::<f32>(&data, &policy, &cfg).unwrap();
    assert_eq!(a.net.flat_params(), b.net.flat_params());
    assert_eq!(a.log, b.log);
    assert_eq!(a.stats.steps, 6);
    assert_eq!(a.stats.augment_forwards, 3 * 24 * 2);
    assert_eq!(a.stats.gradient_passes, 24 * 2);

    let other = train::<f32>(&data, &AugmentPolicy::worst_of_k(AttackSpace::mnist(), 3, 18), &cfg).unwrap();
    assert_ne!(a.net.flat_params(), other.net.flat_params());
}

#[test]
fn linf_training_counts_pgd_passes() {
    let data = blob_dataset(8);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let pgd = LinfConfig {
        steps: 2,
        ..LinfConfig::with_epsilon(0.3)
    };
    let t = train::<f32>(&data, &AugmentPolicy::linf(pgd, 0), &cfg).unwrap();
    assert_eq!(t.stats.augment_forwards, 8 * 4);
    let net: &Network<f32> = &t.net;
    assert_eq!(net.num_classes(), Classifier::num_classes(net));
}

proptest! {
    #[test]
    fn mode_ignores_vote_order(mut votes in prop::collection::vec(0usize..10, 1..25), seed: u64) {
        let before = mode(votes.iter().copied(), 10);
        use rand::seq::SliceRandom;
        votes.shuffle(&mut rng::seeded(seed));
        prop_assert_eq!(mode(votes.iter().copied(), 10), before);
    }
}

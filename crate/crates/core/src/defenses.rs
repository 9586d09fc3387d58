//! Training-time augmentation and robust training, plus majority-vote inference.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{linf_pgd_many, score, score_many, Classifier, LinfConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{argmax, build_mnist_net, Network, Real, Sgd, TrainConfig};
use crate::rng;
use crate::warp::{warp_many, warp_unchecked, AttackSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentKind {
    None,
    /// One uniform transform from the space.
    Random,
    /// The highest-loss of `k` uniform transforms under the current network.
    WorstOfK { k: usize },
    LinfPgd(LinfConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    pub space: AttackSpace,
    pub rng_seed: u64,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            kind: AugmentKind::None,
            space: AttackSpace::degenerate(),
            rng_seed: 0,
        }
    }

    pub fn random(space: AttackSpace, rng_seed: u64) -> Self {
        AugmentPolicy {
            kind: AugmentKind::Random,
            space,
            rng_seed,
        }
    }

    pub fn worst_of_k(space: AttackSpace, k: usize, rng_seed: u64) -> Self {
        AugmentPolicy {
            kind: AugmentKind::WorstOfK { k },
            space,
            rng_seed,
        }
    }

    pub fn linf(cfg: LinfConfig, rng_seed: u64) -> Self {
        AugmentPolicy {
            kind: AugmentKind::LinfPgd(cfg),
            space: AttackSpace::degenerate(),
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AugmentKind::WorstOfK { k: 0 } => Err(Error::invalid("worst-of-k augmentation needs k >= 1")),
            AugmentKind::LinfPgd(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }

    /// Short label used in logs and checkpoint provenance.
    pub fn name(&self) -> String {
        let sp = format!("{}px/{}deg", self.space.max_trans(), self.space.max_rot());
        match self.kind {
            AugmentKind::None => "none".into(),
            AugmentKind::Random => format!("aug({sp})"),
            AugmentKind::WorstOfK { k } => format!("worst-of-{k}({sp})"),
            AugmentKind::LinfPgd(c) => format!("linf(eps={}, steps={})", c.epsilon, c.steps),
        }
    }

    /// Network evaluations one example costs during augmentation, excluding the training pass.
    pub fn forward_queries(&self) -> usize {
        match self.kind {
            AugmentKind::None | AugmentKind::Random => 0,
            AugmentKind::WorstOfK { k } => k,
            AugmentKind::LinfPgd(c) if c.epsilon == 0.0 => 1,
            AugmentKind::LinfPgd(c) => c.steps + 2,
        }
    }

    fn example_seed(&self, step_index: usize, example_index: usize) -> u64 {
        rng::derive_seed(self.rng_seed, &[step_index as u64, example_index as u64])
    }
}

/// Training input for one example. Deterministic given the policy seed, `step_index`, and
/// `example_index`.
pub fn augment_example<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    policy: &AugmentPolicy,
    step_index: usize,
    example_index: usize,
) -> Result<ImageTensor> {
    Ok(augment_batch(
        model,
        std::slice::from_ref(image),
        &[label],
        policy,
        step_index,
        &[example_index],
    )?
    .remove(0))
}

/// [`augment_example`] for many examples at once; results equal the per-example calls.
pub fn augment_batch<C: Classifier + ?Sized>(
    model: &C,
    images: &[ImageTensor],
    labels: &[usize],
    policy: &AugmentPolicy,
    step_index: usize,
    example_indices: &[usize],
) -> Result<Vec<ImageTensor>> {
    policy.validate()?;
    if labels.len() != images.len() || example_indices.len() != images.len() {
        return Err(Error::invalid("need one label and one example index per image"));
    }
    for im in images {
        im.check_finite()?;
    }
    let seeds: Vec<u64> = example_indices
        .iter()
        .map(|&e| policy.example_seed(step_index, e))
        .collect();
    match policy.kind {
        AugmentKind::None => Ok(images.to_vec()),
        AugmentKind::Random => Ok(images
            .iter()
            .zip(&seeds)
            .map(|(im, &s)| warp_unchecked(im, &policy.space.sample(&mut rng::seeded(s))))
            .collect()),
        AugmentKind::WorstOfK { k } => {
            let mut candidates = Vec::with_capacity(images.len() * k);
            let mut cand_labels = Vec::with_capacity(images.len() * k);
            for ((im, &y), &s) in images.iter().zip(labels).zip(&seeds) {
                let mut r = rng::seeded(s);
                let params: Vec<_> = (0..k).map(|_| policy.space.sample(&mut r)).collect();
                candidates.extend(warp_many(im, &params)?);
                cand_labels.extend(std::iter::repeat(y).take(k));
            }
            let scores = score_many(model, &candidates, &cand_labels)?;
            let winners: Vec<usize> = scores
                .chunks(k)
                .enumerate()
                .map(|(g, group)| {
                    let mut best = 0;
                    for (i, s) in group.iter().enumerate() {
                        if s.loss > group[best].loss {
                            best = i;
                        }
                    }
                    g * k + best
                })
                .collect();
            // winners are strictly increasing, one per group
            let mut next = winners.iter().peekable();
            Ok(candidates
                .into_iter()
                .enumerate()
                .filter_map(|(i, c)| next.next_if_eq(&&i).map(|_| c))
                .collect())
        }
        AugmentKind::LinfPgd(cfg) => Ok(linf_pgd_many(model, images, labels, &cfg, &seeds)?
            .into_iter()
            .map(|r| r.image)
            .collect()),
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Percent of the un-augmented training set classified correctly after the epoch.
    pub natural_accuracy: f64,
    /// Mean loss of the (augmented) minibatches seen during the epoch.
    pub mean_loss: f64,
}

/// Evaluation counts accumulated over training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    /// Forward-only evaluations spent choosing augmented inputs.
    pub augment_forwards: usize,
    /// Examples passed through forward+backward for the weight update.
    pub gradient_passes: usize,
}

#[derive(Debug, Clone)]
pub struct Trained<T: Real> {
    pub net: Network<T>,
    pub log: Vec<EpochLog>,
    pub stats: TrainStats,
}

/// Minibatch SGD on the MNIST architecture with every example passed through the policy.
pub fn train<T: Real>(dataset: &Dataset, policy: &AugmentPolicy, config: &TrainConfig) -> Result<Trained<T>> {
    train_from(build_mnist_net(config.init_seed), dataset, policy, config)
}

/// As [`train`], starting from the given network.
pub fn train_from<T: Real>(
    mut net: Network<T>,
    dataset: &Dataset,
    policy: &AugmentPolicy,
    config: &TrainConfig,
) -> Result<Trained<T>> {
    config.validate()?;
    policy.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut opt = Sgd::new(&net, config.momentum);
    let mut stats = TrainStats::default();
    let mut log = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::seeded(rng::derive_seed(config.order_seed, &[epoch as u64])));
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let images: Vec<ImageTensor> = batch.iter().map(|&i| dataset.images()[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels()[i]).collect();
            let inputs = augment_batch(&net, &images, &labels, policy, step, batch)?;
            stats.augment_forwards += batch.len() * policy.forward_queries();
            let g = net.grad_batch(&inputs, &labels, true, false)?;
            stats.gradient_passes += batch.len();
            loss_sum += g.losses.iter().sum::<f64>();
            let grads = g.params.expect("requested");
            opt.step(&mut net, &grads, config.lr_at(step, steps_per_epoch))?;
            step += 1;
        }
        if net.flat_params().iter().any(|w| !w.as_f64().is_finite()) {
            return Err(Error::invalid(format!("training diverged in epoch {epoch}")));
        }
        let natural_accuracy = accuracy(&net, dataset)?;
        let entry = EpochLog {
            epoch,
            natural_accuracy,
            mean_loss: loss_sum / n as f64,
        };
        info!(
            "epoch {epoch}: natural accuracy {:.2}%, mean loss {:.4}",
            entry.natural_accuracy, entry.mean_loss
        );
        log.push(entry);
    }
    stats.steps = step;
    Ok(Trained { net, log, stats })
}

/// Percent of `dataset` the model classifies correctly.
pub fn accuracy<C: Classifier + ?Sized>(model: &C, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let mut correct = 0;
    for (ims, ys) in dataset.images().chunks(256).zip(dataset.labels().chunks(256)) {
        correct += model
            .logits(ims)?
            .iter()
            .zip(ys)
            .filter(|(z, &y)| argmax(z) == y)
            .count();
    }
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}

/// Test-time voting over random transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteParams {
    pub n_votes: usize,
    pub space: AttackSpace,
    pub seed: u64,
}

impl VoteParams {
    /// 10 votes within 5% of the image side per translation axis and ±15°.
    pub fn for_image_side(side: usize) -> Self {
        VoteParams {
            n_votes: 10,
            space: AttackSpace::new(0.05 * side as f64, 15.0, 1, 1).expect("valid bounds"),
            seed: 0,
        }
    }
}

impl Default for VoteParams {
    fn default() -> Self {
        Self::for_image_side(28)
    }
}

/// Modal prediction over `n_votes` random transforms; ties go to the lowest class.
pub fn majority_vote_predict<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    n_votes: usize,
    vote_space: &AttackSpace,
    rng_seed: u64,
) -> Result<usize> {
    if n_votes == 0 {
        return Err(Error::invalid("n_votes must be >= 1"));
    }
    let mut r = rng::seeded(rng_seed);
    let params: Vec<_> = (0..n_votes).map(|_| vote_space.sample(&mut r)).collect();
    let logits = model.logits(&warp_many(image, &params)?)?;
    Ok(mode(logits.iter().map(|z| argmax(z)), model.num_classes()))
}

/// Most frequent value below `classes`; ties to the lowest.
pub fn mode(labels: impl IntoIterator<Item = usize>, classes: usize) -> usize {
    let mut counts = vec![0usize; classes];
    for y in labels {
        counts[y] += 1;
    }
    let mut best = 0;
    for (k, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = k;
        }
    }
    best
}

/// Grid points whose votes share one network call.
const VOTE_CHUNK: usize = 16;

/// Whether the voting defender survives every grid transform of one example.
///
/// The defender's vote seed for grid point `j` is `derive_seed(vote.seed, [example, j])`.
/// Points are tried in decreasing clean loss and the scan stops at the first failure.
pub fn vote_survives_grid<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    example_index: usize,
    space: &AttackSpace,
    vote: &VoteParams,
) -> Result<bool> {
    let points = space.grid_points();
    let warped = warp_many(image, &points)?;
    let clean = score(model, &warped, label)?;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| clean[b].loss.total_cmp(&clean[a].loss).then(a.cmp(&b)));
    if vote.n_votes == 0 {
        return Err(Error::invalid("n_votes must be >= 1"));
    }
    // same votes as majority_vote_predict per point, batched across points
    for chunk in order.chunks(VOTE_CHUNK) {
        let mut batch = Vec::with_capacity(chunk.len() * vote.n_votes);
        for &j in chunk {
            let mut r = rng::seeded(rng::derive_seed(vote.seed, &[example_index as u64, j as u64]));
            let params: Vec<_> = (0..vote.n_votes).map(|_| vote.space.sample(&mut r)).collect();
            batch.extend(warp_many(&warped[j], &params)?);
        }
        let logits = model.logits(&batch)?;
        for votes in logits.chunks(vote.n_votes) {
            if mode(votes.iter().map(|z| argmax(z)), model.num_classes()) != label {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Natural and grid accuracy of the voting defender, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoteReport {
    pub natural_vote: f64,
    pub grid_vote: f64,
    pub examples: usize,
}

/// Evaluates majority-vote inference on clean inputs and against the grid adversary.
///
/// The natural vote for example `i` uses seed `derive_seed(vote.seed, [i])`.
pub fn evaluate_with_vote<C: Classifier + ?Sized>(
    model: &C,
    dataset: &Dataset,
    space: &AttackSpace,
    vote: &VoteParams,
) -> Result<VoteReport> {
    use rayon::prelude::*;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let per: Vec<(bool, bool)> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let (im, y) = dataset.get(i).expect("in range");
            let nat = majority_vote_predict(
                model,
                im,
                vote.n_votes,
                &vote.space,
                rng::derive_seed(vote.seed, &[i as u64]),
            )? == y;
            let grid = vote_survives_grid(model, im, y, i, space, vote)?;
            Ok((nat, grid))
        })
        .collect::<Result<_>>()?;
    let pct = |f: &dyn Fn(&(bool, bool)) -> bool| 100.0 * per.iter().filter(|p| f(p)).count() as f64 / per.len() as f64;
    Ok(VoteReport {
        natural_vote: pct(&|p| p.0),
        grid_vote: pct(&|p| p.1),
        examples: per.len(),
    })
}

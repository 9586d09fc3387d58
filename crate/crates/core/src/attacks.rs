//! Spatial and pixel-space adversaries.
//!
//! Every adversary evaluates a set of candidates and reports an
//! [`AttackOutcome`]. The selection rule is shared: the attack counts as a
//! success if *any* evaluated candidate is misclassified, and the reported
//! candidate is the highest-loss misclassified one (or the highest-loss one
//! overall when nothing fools the model). Loss ties go to the earliest candidate.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{argmax, cross_entropy, Network, Real};
use crate::rng;
use crate::warp::{apply_transform, transform_vjp, warp_many, AttackSpace, TransformParams};

/// Loss, logits and input gradient for one example.
#[derive(Debug, Clone)]
pub struct InputGrad {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grad: ImageTensor,
}

/// Anything that maps images to logits. Gradient access is optional.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;

    fn logits(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>>;

    /// Per-example cross-entropy and its gradient with respect to the input image.
    fn loss_input_grads(&self, _images: &[ImageTensor], _labels: &[usize]) -> Result<Vec<InputGrad>> {
        Err(Error::invalid("this classifier does not expose input gradients"))
    }

    fn predict(&self, image: &ImageTensor) -> Result<usize> {
        Ok(argmax(&self.logits(std::slice::from_ref(image))?[0]))
    }
}

impl<T: Real> Classifier for Network<T> {
    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }

    fn logits(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        self.forward_batch(images)
    }

    fn loss_input_grads(&self, images: &[ImageTensor], labels: &[usize]) -> Result<Vec<InputGrad>> {
        let g = self.grad_batch(images, labels, false, true)?;
        Ok(g.losses
            .into_iter()
            .zip(g.logits)
            .zip(g.inputs.expect("requested"))
            .map(|((loss, logits), grad)| InputGrad { loss, logits, grad })
            .collect())
    }
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn logits(&self, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
        (**self).logits(images)
    }

    fn loss_input_grads(&self, images: &[ImageTensor], labels: &[usize]) -> Result<Vec<InputGrad>> {
        (**self).loss_input_grads(images, labels)
    }
}

/// Loss and prediction of one evaluated candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub loss: f64,
    pub prediction: usize,
}

/// Scores a batch of images against one label.
pub fn score<C: Classifier + ?Sized>(model: &C, images: &[ImageTensor], label: usize) -> Result<Vec<Scored>> {
    score_many(model, images, &vec![label; images.len()])
}

/// Scores a batch of images, each against its own label.
pub fn score_many<C: Classifier + ?Sized>(model: &C, images: &[ImageTensor], labels: &[usize]) -> Result<Vec<Scored>> {
    if labels.len() != images.len() {
        return Err(Error::invalid("need one label per image"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::invalid(format!(
            "label {y} out of range for {} classes",
            model.num_classes()
        )));
    }
    model
        .logits(images)?
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            Ok(Scored {
                loss: cross_entropy(z, y)?,
                prediction: argmax(z),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub fooled: bool,
    pub best_params: TransformParams,
    pub best_loss: f64,
    pub adversarial_prediction: usize,
    pub queries_used: usize,
}

/// Running application of the shared selection rule.
#[derive(Debug, Clone)]
struct Tracker {
    label: usize,
    best: Option<(TransformParams, Scored)>,
    fooled: bool,
    queries: usize,
}

impl Tracker {
    fn new(label: usize) -> Self {
        Tracker {
            label,
            best: None,
            fooled: false,
            queries: 0,
        }
    }

    /// Returns whether this candidate replaced the current best.
    fn offer(&mut self, params: TransformParams, s: Scored) -> bool {
        self.queries += 1;
        let wrong = s.prediction != self.label;
        let replace = match &self.best {
            None => true,
            Some((_, b)) => {
                if wrong && !self.fooled {
                    true
                } else if wrong == self.fooled {
                    s.loss > b.loss
                } else {
                    false
                }
            }
        };
        if replace {
            self.best = Some((params, s));
        }
        self.fooled |= wrong;
        replace
    }

    fn outcome(&self) -> AttackOutcome {
        let (params, s) = self.best.expect("at least one candidate evaluated");
        AttackOutcome {
            fooled: self.fooled,
            best_params: params,
            best_loss: s.loss,
            adversarial_prediction: s.prediction,
            queries_used: self.queries,
        }
    }
}

/// Applies the selection rule to already-scored candidates.
pub fn select_outcome(params: &[TransformParams], scores: &[Scored], label: usize) -> Result<AttackOutcome> {
    if params.is_empty() || params.len() != scores.len() {
        return Err(Error::invalid("need one score per candidate and at least one candidate"));
    }
    let mut t = Tracker::new(label);
    for (p, s) in params.iter().zip(scores) {
        t.offer(*p, *s);
    }
    Ok(t.outcome())
}

/// Loss and prediction at every grid point, in scan order.
#[derive(Debug, Clone)]
pub struct GridScan {
    pub points: Vec<TransformParams>,
    pub scores: Vec<Scored>,
}

impl GridScan {
    pub fn fooled_mask(&self, label: usize) -> Vec<bool> {
        self.scores.iter().map(|s| s.prediction != label).collect()
    }
}

/// Evaluates every point of `space`'s grid.
pub fn grid_scan<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    space: &AttackSpace,
) -> Result<GridScan> {
    let points = space.grid_points();
    let scores = score_points(model, image, label, &points)?;
    Ok(GridScan { points, scores })
}

/// Scores `image` warped at each of `points`.
pub fn score_points<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    points: &[TransformParams],
) -> Result<Vec<Scored>> {
    let mut scores = Vec::with_capacity(points.len());
    for chunk in points.chunks(WARP_CHUNK) {
        scores.extend(score(model, &warp_many(image, chunk)?, label)?);
    }
    Ok(scores)
}

const WARP_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GridOptions {
    /// Stop at the first misclassifying point in scan order and report it. `queries_used`
    /// then counts scan positions up to and including that point.
    pub early_exit: bool,
}

/// Exhaustive search over the attack grid.
pub fn grid_attack<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    space: &AttackSpace,
    opts: GridOptions,
) -> Result<AttackOutcome> {
    if !opts.early_exit {
        let scan = grid_scan(model, image, label, space)?;
        return select_outcome(&scan.points, &scan.scores, label);
    }
    let points = space.grid_points();
    let mut t = Tracker::new(label);
    let slab = space.trans_grid_points() * space.trans_grid_points();
    for chunk in points.chunks(slab) {
        let scores = score(model, &warp_many(image, chunk)?, label)?;
        for (p, s) in chunk.iter().zip(scores) {
            t.offer(*p, s);
            if t.fooled {
                return Ok(t.outcome());
            }
        }
    }
    Ok(t.outcome())
}

/// How worst-of-k draws its candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Independent uniform draws from the continuous box.
    #[default]
    Continuous,
    /// The first `k` entries of a seeded permutation of the grid points. Larger `k` extends
    /// the same sequence.
    GridWithoutReplacement,
}

/// The `k` candidate transforms worst-of-k would evaluate.
pub fn worst_of_k_candidates(space: &AttackSpace, k: usize, seed: u64, sampling: Sampling) -> Result<Vec<TransformParams>> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let mut r = rng::seeded(seed);
    match sampling {
        Sampling::Continuous => Ok((0..k).map(|_| space.sample(&mut r)).collect()),
        Sampling::GridWithoutReplacement => {
            let mut pts = space.grid_points();
            if k > pts.len() {
                return Err(Error::invalid(format!(
                    "k = {k} exceeds the {} grid points",
                    pts.len()
                )));
            }
            pts.shuffle(&mut r);
            pts.truncate(k);
            Ok(pts)
        }
    }
}

/// Random-search adversary: evaluates `k` random transforms and keeps the worst.
pub fn worst_of_k<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    space: &AttackSpace,
    k: usize,
    seed: u64,
    sampling: Sampling,
) -> Result<AttackOutcome> {
    let points = worst_of_k_candidates(space, k, seed, sampling)?;
    let scores = score_points(model, image, label, &points)?;
    select_outcome(&points, &scores, label)
}

/// One evaluation of a loss surface over transform parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectivePoint {
    pub loss: f64,
    pub prediction: usize,
    /// d loss / d (du, dv, theta); theta per degree.
    pub grad: [f64; 3],
}

/// A differentiable loss over transform parameters.
pub trait SpatialObjective {
    fn evaluate(&self, params: &TransformParams) -> Result<ObjectivePoint>;
}

/// Cross-entropy of a classifier on the warped image, differentiated through the warp.
pub struct WarpedLoss<'a, C: ?Sized> {
    pub model: &'a C,
    pub image: &'a ImageTensor,
    pub label: usize,
}

impl<C: Classifier + ?Sized> SpatialObjective for WarpedLoss<'_, C> {
    fn evaluate(&self, params: &TransformParams) -> Result<ObjectivePoint> {
        let warped = apply_transform(self.image, params)?;
        let mut lg = self
            .model
            .loss_input_grads(std::slice::from_ref(&warped), &[self.label])?;
        let ig = lg.remove(0);
        let g = transform_vjp(self.image, params, &ig.grad)?;
        Ok(ObjectivePoint {
            loss: ig.loss,
            prediction: argmax(&ig.logits),
            grad: g.params(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoConfig {
    pub steps: usize,
    /// Step per coordinate as a fraction of that coordinate's range.
    pub step_frac: f64,
    pub restarts: usize,
}

impl Default for FoConfig {
    fn default() -> Self {
        FoConfig {
            steps: 200,
            step_frac: 0.01,
            restarts: 1,
        }
    }
}

/// Projected sign-gradient ascent over transform parameters from random starts.
/// Returns the best iterate visited.
pub fn fo_ascent<O: SpatialObjective + ?Sized>(
    objective: &O,
    label: usize,
    space: &AttackSpace,
    cfg: &FoConfig,
    seed: u64,
) -> Result<AttackOutcome> {
    if !(cfg.step_frac.is_finite() && cfg.step_frac > 0.0) {
        return Err(Error::invalid(format!("step_frac must be > 0, got {}", cfg.step_frac)));
    }
    if cfg.restarts == 0 {
        return Err(Error::invalid("restarts must be >= 1"));
    }
    let mut r = rng::seeded(seed);
    let ranges = space.ranges();
    let mut t = Tracker::new(label);
    for _ in 0..cfg.restarts {
        let mut p = space.sample(&mut r);
        let mut pt = objective.evaluate(&p)?;
        t.offer(p, scored(&pt));
        for _ in 0..cfg.steps {
            let mut a = p.as_array();
            for i in 0..3 {
                a[i] += cfg.step_frac * ranges[i] * sign(pt.grad[i]);
            }
            p = space.clip(TransformParams::from_array(a));
            pt = objective.evaluate(&p)?;
            t.offer(p, scored(&pt));
        }
    }
    Ok(t.outcome())
}

fn scored(pt: &ObjectivePoint) -> Scored {
    Scored {
        loss: pt.loss,
        prediction: pt.prediction,
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// First-order spatial adversary on a classifier.
pub fn spatial_fo_attack<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    space: &AttackSpace,
    cfg: &FoConfig,
    seed: u64,
) -> Result<AttackOutcome> {
    let obj = WarpedLoss { model, image, label };
    fo_ascent(&obj, label, space, cfg, seed)
}

/// Pixel-space ℓ∞ PGD settings. Intensities are in `[0, 1]` units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinfConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl LinfConfig {
    /// 40 steps of size `2.5·ε/40` from a random start.
    pub fn with_epsilon(epsilon: f64) -> Self {
        let steps = 40;
        LinfConfig {
            epsilon,
            steps,
            step_size: 2.5 * epsilon / steps as f64,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && self.epsilon > 0.0 && !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::invalid("step_size must be > 0 when steps > 0"));
        }
        Ok(())
    }
}

/// Result of ℓ∞ PGD on one image.
#[derive(Debug, Clone)]
pub struct LinfResult {
    pub image: ImageTensor,
    pub loss: f64,
    pub prediction: usize,
}

/// ℓ∞ PGD with sign steps, projected onto the ε-ball and `[0, 1]` after every step.
///
/// The clean input, the random start, and every iterate are candidates; the returned image
/// follows the shared selection rule.
pub fn linf_pgd<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    cfg: &LinfConfig,
    seed: u64,
) -> Result<ImageTensor> {
    Ok(linf_pgd_batch(model, std::slice::from_ref(image), label, cfg, seed)?
        .remove(0)
        .image)
}

/// [`linf_pgd`] on several images of the same label in lockstep. Every image draws its random
/// start from its own generator seeded with `seed`, so results do not depend on batching.
pub fn linf_pgd_batch<C: Classifier + ?Sized>(
    model: &C,
    images: &[ImageTensor],
    label: usize,
    cfg: &LinfConfig,
    seed: u64,
) -> Result<Vec<LinfResult>> {
    linf_pgd_many(model, images, &vec![label; images.len()], cfg, &vec![seed; images.len()])
}

/// [`linf_pgd`] on a batch with per-image labels and seeds.
pub fn linf_pgd_many<C: Classifier + ?Sized>(
    model: &C,
    images: &[ImageTensor],
    labels: &[usize],
    cfg: &LinfConfig,
    seeds: &[u64],
) -> Result<Vec<LinfResult>> {
    cfg.validate()?;
    if labels.len() != images.len() || seeds.len() != images.len() {
        return Err(Error::invalid("need one label and one seed per image"));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    if images.iter().any(|im| im.data().iter().any(|v| !(0.0..=1.0).contains(v))) {
        return Err(Error::invalid("ℓ∞ PGD expects pixel values in [0, 1]"));
    }
    let clean_scores = score_many(model, images, labels)?;
    if cfg.epsilon == 0.0 {
        return Ok(images
            .iter()
            .zip(clean_scores)
            .map(|(im, s)| LinfResult {
                image: im.clone(),
                loss: s.loss,
                prediction: s.prediction,
            })
            .collect());
    }

    let eps = cfg.epsilon;
    let project = |x: &mut ImageTensor, orig: &ImageTensor| {
        for (v, &o) in x.data_mut().iter_mut().zip(orig.data()) {
            *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
        }
    };

    // (candidate, its score, whether any candidate so far was misclassified)
    let mut best: Vec<(ImageTensor, Scored, bool)> = images
        .iter()
        .zip(&clean_scores)
        .zip(labels)
        .map(|((im, s), &y)| (im.clone(), *s, s.prediction != y))
        .collect();
    let offer = |best: &mut Vec<(ImageTensor, Scored, bool)>, xs: &[ImageTensor], ss: &[Scored]| {
        for (((slot, x), s), &y) in best.iter_mut().zip(xs).zip(ss).zip(labels) {
            let wrong = s.prediction != y;
            let replace = (wrong && !slot.2) || (wrong == slot.2 && s.loss > slot.1.loss);
            if replace {
                slot.0 = x.clone();
                slot.1 = *s;
            }
            slot.2 |= wrong;
        }
    };

    let mut xs: Vec<ImageTensor> = images.to_vec();
    if cfg.random_start {
        use rand::Rng;
        for ((x, orig), &seed) in xs.iter_mut().zip(images).zip(seeds) {
            let mut r = rng::seeded(seed);
            for v in x.data_mut() {
                *v += r.gen_range(-eps..=eps);
            }
            project(x, orig);
        }
    }
    for _ in 0..cfg.steps {
        let lg = model.loss_input_grads(&xs, labels)?;
        let ss: Vec<Scored> = lg
            .iter()
            .map(|ig| Scored {
                loss: ig.loss,
                prediction: argmax(&ig.logits),
            })
            .collect();
        offer(&mut best, &xs, &ss);
        for ((x, ig), orig) in xs.iter_mut().zip(&lg).zip(images) {
            for (v, &gv) in x.data_mut().iter_mut().zip(ig.grad.data()) {
                *v += cfg.step_size * sign(gv);
            }
            project(x, orig);
        }
    }
    let final_scores = score_many(model, &xs, labels)?;
    offer(&mut best, &xs, &final_scores);

    Ok(best
        .into_iter()
        .map(|(image, s, _)| LinfResult {
            image,
            loss: s.loss,
            prediction: s.prediction,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinedMode {
    /// One uniformly random transform, then ℓ∞ PGD.
    Random,
    /// ℓ∞ PGD on top of every grid transform.
    Grid,
}

/// Combined adversary result; `adversarial` is the reported warped-and-perturbed image.
#[derive(Debug, Clone)]
pub struct CombinedOutcome {
    pub outcome: AttackOutcome,
    pub adversarial: ImageTensor,
}

/// Points per PGD batch in the combined grid attack.
const COMBINED_CHUNK: usize = 32;

/// PGD random-start seed for an example-level `seed`. Shared by the ℓ∞-only and combined
/// adversaries, so combined at the identity point repeats ℓ∞-only exactly.
pub fn linf_seed(seed: u64) -> u64 {
    rng::derive_seed(seed, &[1])
}

/// Spatial transform followed by ℓ∞ PGD on the warped image.
///
/// With `early_exit`, grid points are visited in decreasing order of their clean loss and the
/// search stops at the first batch containing a success; the fooled flag is the same either
/// way, only the reported best candidate and query count differ.
#[allow(clippy::too_many_arguments)]
pub fn combined_attack<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    space: &AttackSpace,
    cfg: &LinfConfig,
    mode: CombinedMode,
    seed: u64,
    early_exit: bool,
) -> Result<CombinedOutcome> {
    let mut points = match mode {
        CombinedMode::Random => vec![space.sample(&mut rng::seeded(seed))],
        CombinedMode::Grid => space.grid_points(),
    };
    let pgd_seed = linf_seed(seed);
    if early_exit && mode == CombinedMode::Grid {
        let clean = score_points(model, image, label, &points)?;
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| clean[b].loss.total_cmp(&clean[a].loss).then(a.cmp(&b)));
        points = order.into_iter().map(|i| points[i]).collect();
    }

    let mut t = Tracker::new(label);
    let mut adversarial = None;
    for chunk in points.chunks(COMBINED_CHUNK) {
        let warped = warp_many(image, chunk)?;
        let results = linf_pgd_batch(model, &warped, label, cfg, pgd_seed)?;
        for (p, r) in chunk.iter().zip(results) {
            let s = Scored {
                loss: r.loss,
                prediction: r.prediction,
            };
            if t.offer(*p, s) {
                adversarial = Some(r.image);
            }
        }
        if early_exit && t.fooled {
            break;
        }
    }
    Ok(CombinedOutcome {
        outcome: t.outcome(),
        adversarial: adversarial.expect("at least one candidate"),
    })
}

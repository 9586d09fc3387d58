//! Accuracy reports, fooled-set analyses, loss landscapes, and their CSV/JSON export.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{
    combined_attack, grid_attack, grid_scan, score, score_points, spatial_fo_attack, worst_of_k, AttackOutcome,
    Classifier, CombinedMode, FoConfig, GridOptions, LinfConfig, Sampling, Scored,
};
use crate::data::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::warp::{grid_values, AttackSpace, TransformParams};

/// One adversary, fully parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum AdversarySpec {
    Natural,
    /// One uniform transform.
    Random { space: AttackSpace },
    WorstOfK { space: AttackSpace, k: usize },
    Fo { space: AttackSpace, cfg: FoConfig },
    Grid { space: AttackSpace },
    Linf { cfg: LinfConfig },
    Combined { space: AttackSpace, cfg: LinfConfig, mode: CombinedMode },
}

/// Per-example result of one adversary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub index: usize,
    pub label: usize,
    pub clean_pred: usize,
    pub fooled: bool,
    pub params: TransformParams,
    pub loss: f64,
    pub queries: usize,
}

/// Runs `spec` on one example. `seed` seeds every stochastic choice.
pub fn attack_example<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    spec: &AdversarySpec,
    seed: u64,
) -> Result<AttackOutcome> {
    match *spec {
        AdversarySpec::Natural => {
            let s = score(model, std::slice::from_ref(image), label)?[0];
            Ok(AttackOutcome {
                fooled: s.prediction != label,
                best_params: TransformParams::IDENTITY,
                best_loss: s.loss,
                adversarial_prediction: s.prediction,
                queries_used: 1,
            })
        }
        AdversarySpec::Random { space } => worst_of_k(model, image, label, &space, 1, seed, Sampling::Continuous),
        AdversarySpec::WorstOfK { space, k } => worst_of_k(model, image, label, &space, k, seed, Sampling::Continuous),
        AdversarySpec::Fo { space, cfg } => spatial_fo_attack(model, image, label, &space, &cfg, seed),
        AdversarySpec::Grid { space } => grid_attack(model, image, label, &space, GridOptions::default()),
        AdversarySpec::Linf { cfg } => {
            let adv = crate::attacks::linf_pgd(model, image, label, &cfg, crate::attacks::linf_seed(seed))?;
            let s = score(model, std::slice::from_ref(&adv), label)?[0];
            Ok(AttackOutcome {
                fooled: s.prediction != label,
                best_params: TransformParams::IDENTITY,
                best_loss: s.loss,
                adversarial_prediction: s.prediction,
                queries_used: cfg.steps + 2,
            })
        }
        AdversarySpec::Combined { space, cfg, mode } => {
            Ok(combined_attack(model, image, label, &space, &cfg, mode, seed, false)?.outcome)
        }
    }
}

/// Runs `spec` on every example in parallel; example `i` uses seed `base_seed + i`. Results
/// are in dataset order regardless of scheduling.
pub fn run_adversary<C: Classifier + ?Sized>(
    model: &C,
    dataset: &Dataset,
    spec: &AdversarySpec,
    base_seed: u64,
) -> Result<Vec<ExampleResult>> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let (im, y) = dataset.get(i).expect("in range");
            let clean_pred = model.predict(im)?;
            let o = attack_example(model, im, y, spec, base_seed.wrapping_add(i as u64))?;
            Ok(ExampleResult {
                index: i,
                label: y,
                clean_pred,
                fooled: o.fooled,
                params: o.best_params,
                loss: o.best_loss,
                queries: o.queries_used,
            })
        })
        .collect()
}

/// Percent of results not fooled.
pub fn accuracy_of(results: &[ExampleResult]) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    100.0 * results.iter().filter(|r| !r.fooled).count() as f64 / results.len() as f64
}

/// Accuracy (percent) of `model` on `dataset` under `spec`.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, dataset: &Dataset, spec: &AdversarySpec, base_seed: u64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    Ok(accuracy_of(&run_adversary(model, dataset, spec, base_seed)?))
}

/// Accuracies (percent) of one model against the standard adversary set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub model_id: String,
    pub natural: Option<f64>,
    pub random: Option<f64>,
    pub worst_of_10: Option<f64>,
    pub fo: Option<f64>,
    pub grid: Option<f64>,
    pub translation_grid: Option<f64>,
    pub rotation_grid: Option<f64>,
    pub random_translation: Option<f64>,
    pub random_rotation: Option<f64>,
    pub natural_vote: Option<f64>,
    pub grid_vote: Option<f64>,
    pub examples: usize,
    pub base_seed: u64,
    /// Kept out of exported files so reruns reproduce them byte for byte.
    #[serde(skip_serializing, default)]
    pub wall_clock_secs: f64,
}

impl EvalReport {
    /// Field name and value of every accuracy column, in a fixed order.
    pub fn accuracies(&self) -> [(&'static str, Option<f64>); 11] {
        [
            ("natural", self.natural),
            ("random", self.random),
            ("worst_of_10", self.worst_of_10),
            ("fo", self.fo),
            ("grid", self.grid),
            ("translation_grid", self.translation_grid),
            ("rotation_grid", self.rotation_grid),
            ("random_translation", self.random_translation),
            ("random_rotation", self.random_rotation),
            ("natural_vote", self.natural_vote),
            ("grid_vote", self.grid_vote),
        ]
    }

    pub fn check_ranges(&self) -> Result<()> {
        for (name, v) in self.accuracies() {
            if let Some(v) = v {
                if !(0.0..=100.0).contains(&v) {
                    return Err(Error::invalid(format!("{name} accuracy {v} outside [0, 100]")));
                }
            }
        }
        Ok(())
    }
}

/// Which attacks [`evaluate_all`] runs besides the always-present natural/grid family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub space: AttackSpace,
    pub fo: Option<FoConfig>,
    pub worst_of_k: usize,
    pub base_seed: u64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            space: AttackSpace::mnist(),
            fo: Some(FoConfig::default()),
            worst_of_k: 10,
            base_seed: 0,
        }
    }
}

/// Results of the full grid scan of one example, reduced to its sub-grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSummary {
    pub clean_correct: bool,
    pub fooled_any_point: bool,
    pub fooled_rotation_only: bool,
    pub fooled_translation_only: bool,
    pub fooled_points: usize,
    pub total_points: usize,
}

/// One full-grid scan; the pure-rotation and pure-translation sub-grids are read off the
/// same evaluations, which is exact because their points coincide.
pub fn summarize_grid<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    space: &AttackSpace,
) -> Result<GridSummary> {
    let scan = grid_scan(model, image, label, space)?;
    let clean = score(model, std::slice::from_ref(image), label)?[0];
    let mut s = GridSummary {
        clean_correct: clean.prediction == label,
        fooled_any_point: false,
        fooled_rotation_only: false,
        fooled_translation_only: false,
        fooled_points: 0,
        total_points: scan.points.len(),
    };
    for (p, sc) in scan.points.iter().zip(&scan.scores) {
        if sc.prediction == label {
            continue;
        }
        s.fooled_any_point = true;
        s.fooled_points += 1;
        if p.du == 0.0 && p.dv == 0.0 {
            s.fooled_rotation_only = true;
        }
        if p.theta == 0.0 {
            s.fooled_translation_only = true;
        }
    }
    Ok(s)
}

/// Grid summaries for every example, in order.
pub fn summarize_grids<C: Classifier + ?Sized>(model: &C, dataset: &Dataset, space: &AttackSpace) -> Result<Vec<GridSummary>> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let (im, y) = dataset.get(i).expect("in range");
            summarize_grid(model, im, y, space)
        })
        .collect()
}

/// All nine adversary columns (vote columns stay empty).
pub fn evaluate_all<C: Classifier + ?Sized>(
    model: &C,
    dataset: &Dataset,
    cfg: &ReportConfig,
    model_id: &str,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let start = Instant::now();
    let n = dataset.len() as f64;
    let pct = |k: usize| 100.0 * k as f64 / n;
    let grids = summarize_grids(model, dataset, &cfg.space)?;
    let seed = cfg.base_seed;
    let acc = |spec: AdversarySpec| evaluate(model, dataset, &spec, seed);
    let space = cfg.space;
    let report = EvalReport {
        model_id: model_id.to_string(),
        natural: Some(pct(grids.iter().filter(|g| g.clean_correct).count())),
        random: Some(acc(AdversarySpec::Random { space })?),
        worst_of_10: Some(acc(AdversarySpec::WorstOfK {
            space,
            k: cfg.worst_of_k,
        })?),
        fo: match cfg.fo {
            Some(fo) => Some(acc(AdversarySpec::Fo { space, cfg: fo })?),
            None => None,
        },
        grid: Some(pct(grids.iter().filter(|g| !g.fooled_any_point).count())),
        translation_grid: Some(pct(grids.iter().filter(|g| !g.fooled_translation_only).count())),
        rotation_grid: Some(pct(grids.iter().filter(|g| !g.fooled_rotation_only).count())),
        random_translation: Some(acc(AdversarySpec::Random {
            space: space.translation_only(),
        })?),
        random_rotation: Some(acc(AdversarySpec::Random {
            space: space.rotation_only(),
        })?),
        natural_vote: None,
        grid_vote: None,
        examples: dataset.len(),
        base_seed: seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    report.check_ranges()?;
    Ok(report)
}

/// Counts over correctly classified examples of who is fooled by which sub-grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FooledDecomposition {
    /// Examples classified correctly without any transform; all other counts are among these.
    pub examples: usize,
    pub rotation: usize,
    pub translation: usize,
    /// Fooled by the rotation grid or the translation grid.
    pub any: usize,
    pub only_rotation: usize,
    pub only_translation: usize,
    pub intersection: usize,
    /// Fooled somewhere on the full grid.
    pub combined: usize,
    /// Fooled by the full grid but by neither sub-grid alone.
    pub both: usize,
}

impl FooledDecomposition {
    pub fn from_summaries(summaries: &[GridSummary]) -> Self {
        let mut d = FooledDecomposition::default();
        for s in summaries.iter().filter(|s| s.clean_correct) {
            d.examples += 1;
            let (r, t) = (s.fooled_rotation_only, s.fooled_translation_only);
            d.rotation += r as usize;
            d.translation += t as usize;
            d.any += (r || t) as usize;
            d.only_rotation += (r && !t) as usize;
            d.only_translation += (t && !r) as usize;
            d.intersection += (r && t) as usize;
            d.combined += s.fooled_any_point as usize;
        }
        d.both = d.combined - d.any;
        d
    }

    /// The set-algebra identities every decomposition satisfies.
    pub fn is_consistent(&self) -> bool {
        self.only_rotation + self.only_translation + self.intersection == self.any
            && self.combined >= self.any
            && self.both == self.combined - self.any
            && [self.rotation, self.translation, self.any, self.combined]
                .iter()
                .all(|&c| c <= self.examples)
    }
}

pub fn decompose_fooled<C: Classifier + ?Sized>(model: &C, dataset: &Dataset, space: &AttackSpace) -> Result<FooledDecomposition> {
    Ok(FooledDecomposition::from_summaries(&summarize_grids(model, dataset, space)?))
}

/// Per-example fooled flags at each pure rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleMap {
    pub angles: Vec<f64>,
    pub rows: Vec<Vec<bool>>,
}

impl AngleMap {
    pub fn non_convex_rows(&self) -> usize {
        self.rows.iter().filter(|r| is_non_convex(r)).count()
    }
}

/// True iff some fooled angle, then an unfooled one, then a fooled one occur in order.
pub fn is_non_convex(row: &[bool]) -> bool {
    let (Some(first), Some(last)) = (row.iter().position(|&f| f), row.iter().rposition(|&f| f)) else {
        return false;
    };
    row[first..=last].iter().any(|&f| !f)
}

pub fn fooling_angle_map<C: Classifier + ?Sized>(
    model: &C,
    examples: &[(ImageTensor, usize)],
    rot_values: &[f64],
) -> Result<AngleMap> {
    let points: Vec<TransformParams> = rot_values.iter().map(|&t| TransformParams::new(0.0, 0.0, t)).collect();
    let rows = examples
        .par_iter()
        .map(|(im, y)| {
            Ok(score_points(model, im, *y, &points)?
                .iter()
                .map(|s| s.prediction != *y)
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(AngleMap {
        angles: rot_values.to_vec(),
        rows,
    })
}

/// `(p, fraction of clean-correct examples fooled by at least a p-fraction of grid points,
/// and by at least one)` for `p = 0, 0.01, …, 1`. Comparisons are exact in integers.
pub fn ccdf_from_summaries(summaries: &[GridSummary]) -> Vec<(f64, f64)> {
    let correct: Vec<&GridSummary> = summaries.iter().filter(|s| s.clean_correct).collect();
    (0..=100)
        .map(|i| {
            let p = i as f64 / 100.0;
            if correct.is_empty() {
                return (p, 0.0);
            }
            // p = 0 still demands one fooled point, so the curve starts at the grid-fooled fraction
            let hits = correct
                .iter()
                .filter(|s| s.fooled_points > 0 && 100 * s.fooled_points >= i * s.total_points)
                .count();
            (p, hits as f64 / correct.len() as f64)
        })
        .collect()
}

pub fn fooling_fraction_cdf<C: Classifier + ?Sized>(model: &C, dataset: &Dataset, space: &AttackSpace) -> Result<Vec<(f64, f64)>> {
    Ok(ccdf_from_summaries(&summarize_grids(model, dataset, space)?))
}

/// Loss over a `(du, theta)` grid with `dv = 0`; `losses[i][j]` is at `(du_values[i], theta_values[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub du_values: Vec<f64>,
    pub theta_values: Vec<f64>,
    pub losses: Vec<Vec<f64>>,
}

impl Landscape {
    /// Entries strictly greater than all 8 neighbors, excluding the border.
    pub fn strict_interior_local_maxima(&self) -> usize {
        let (n, m) = (self.du_values.len(), self.theta_values.len());
        let mut count = 0;
        for i in 1..n.saturating_sub(1) {
            for j in 1..m.saturating_sub(1) {
                let v = self.losses[i][j];
                let is_max = (i - 1..=i + 1)
                    .flat_map(|a| (j - 1..=j + 1).map(move |b| (a, b)))
                    .filter(|&(a, b)| (a, b) != (i, j))
                    .all(|(a, b)| v > self.losses[a][b]);
                count += is_max as usize;
            }
        }
        count
    }
}

pub const DEFAULT_LANDSCAPE_TRANS: usize = 21;
pub const DEFAULT_LANDSCAPE_ROT: usize = 31;

pub fn loss_landscape<C: Classifier + ?Sized>(
    model: &C,
    image: &ImageTensor,
    label: usize,
    n_trans: usize,
    n_rot: usize,
    space: &AttackSpace,
) -> Result<Landscape> {
    if n_trans == 0 || n_rot == 0 {
        return Err(Error::invalid("landscape needs at least one point per axis"));
    }
    let du_values = grid_values(space.max_trans(), n_trans);
    let theta_values = grid_values(space.max_rot(), n_rot);
    let points: Vec<TransformParams> = du_values
        .iter()
        .flat_map(|&du| theta_values.iter().map(move |&t| TransformParams::new(du, 0.0, t)))
        .collect();
    let scores: Vec<Scored> = score_points(model, image, label, &points)?;
    let losses = scores.chunks(n_rot).map(|row| row.iter().map(|s| s.loss).collect()).collect();
    Ok(Landscape {
        du_values,
        theta_values,
        losses,
    })
}

/// `%g`-style rendering with 6 significant digits.
pub fn fmt_g(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mant.to_string()), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// `v` rounded to what [`fmt_g`] prints.
pub fn round_g(v: f64) -> f64 {
    fmt_g(v).parse().unwrap_or(v)
}

pub fn landscape_csv(l: &Landscape) -> String {
    let mut s = String::from("du,theta,loss\n");
    for (i, &du) in l.du_values.iter().enumerate() {
        for (j, &t) in l.theta_values.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", fmt_g(du), fmt_g(t), fmt_g(l.losses[i][j]));
        }
    }
    s
}

/// Parses [`landscape_csv`] output. Axes are recovered from the row-major layout.
pub fn parse_landscape_csv(text: &str) -> Result<Landscape> {
    let mut lines = text.lines();
    if lines.next() != Some("du,theta,loss") {
        return Err(Error::invalid("landscape CSV must start with header du,theta,loss"));
    }
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<f64> = line
            .split(',')
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::invalid(format!("line {}: {e}", n + 2)))?;
        if f.len() != 3 {
            return Err(Error::invalid(format!("line {}: expected 3 fields", n + 2)));
        }
        rows.push((f[0], f[1], f[2]));
    }
    let mut du_values: Vec<f64> = Vec::new();
    for r in &rows {
        if du_values.last() != Some(&r.0) {
            du_values.push(r.0);
        }
    }
    let n_rot = if du_values.is_empty() { 0 } else { rows.len() / du_values.len() };
    if n_rot * du_values.len() != rows.len() {
        return Err(Error::invalid("landscape CSV is not a full grid"));
    }
    let theta_values = rows.iter().take(n_rot).map(|r| r.1).collect();
    let losses = rows.chunks(n_rot.max(1)).map(|c| c.iter().map(|r| r.2).collect()).collect();
    Ok(Landscape {
        du_values,
        theta_values,
        losses,
    })
}

fn opt_g(v: Option<f64>) -> String {
    v.map(fmt_g).unwrap_or_default()
}

/// Header row plus one value row.
pub fn report_csv(r: &EvalReport) -> String {
    let acc = r.accuracies();
    let mut head = vec!["model_id"];
    head.extend(acc.iter().map(|(k, _)| *k));
    head.extend(["examples", "base_seed"]);
    let mut vals = vec![r.model_id.clone()];
    vals.extend(acc.iter().map(|(_, v)| opt_g(*v)));
    vals.extend([r.examples.to_string(), r.base_seed.to_string()]);
    format!("{}\n{}\n", head.join(","), vals.join(","))
}

/// Flat JSON record with floats rounded to 6 significant digits.
pub fn report_json(r: &EvalReport) -> Result<String> {
    let mut rounded = r.clone();
    for v in [
        &mut rounded.natural,
        &mut rounded.random,
        &mut rounded.worst_of_10,
        &mut rounded.fo,
        &mut rounded.grid,
        &mut rounded.translation_grid,
        &mut rounded.rotation_grid,
        &mut rounded.random_translation,
        &mut rounded.random_rotation,
        &mut rounded.natural_vote,
        &mut rounded.grid_vote,
    ] {
        *v = v.map(round_g);
    }
    Ok(serde_json::to_string_pretty(&rounded)? + "\n")
}

pub fn outcomes_csv(results: &[ExampleResult]) -> String {
    let mut s = String::from("index,label,clean_pred,fooled,du,dv,theta,loss,queries\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.index,
            r.label,
            r.clean_pred,
            r.fooled as u8,
            fmt_g(r.params.du),
            fmt_g(r.params.dv),
            fmt_g(r.params.theta),
            fmt_g(r.loss),
            r.queries
        );
    }
    s
}

pub fn angle_map_csv(m: &AngleMap) -> String {
    let mut s = String::from("example");
    for &a in &m.angles {
        let _ = write!(s, ",{}", fmt_g(a));
    }
    s.push('\n');
    for (i, row) in m.rows.iter().enumerate() {
        let _ = write!(s, "{i}");
        for &f in row {
            let _ = write!(s, ",{}", f as u8);
        }
        s.push('\n');
    }
    s
}

pub fn cdf_csv(cdf: &[(f64, f64)]) -> String {
    let mut s = String::from("p,fraction\n");
    for &(p, f) in cdf {
        let _ = writeln!(s, "{},{}", fmt_g(p), fmt_g(f));
    }
    s
}

/// Writes text atomically.
pub fn export(text: &str, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), text.as_bytes())
}

//! Confidence scores for verification decisions.
//!
//! Distances of labeled pairs are split into ten folds. For every fold a
//! verification threshold is picked on the other nine folds, the genuine
//! fraction per distance bin of those nine folds is fitted with a logistic
//! curve `c(d) = L / (1 + exp(-k (d - d0))) + b`, and the score of a pair is
//! `c(d)` for genuine predictions and `1 - c(d)` for imposter predictions,
//! with `c` clipped to `[0, 1]`.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FOLDS: usize = 10;
pub const BINS: usize = 400;
pub const BIN_WIDTH: f64 = 2.0 / BINS as f64;
pub const MODEL_HEADER: &str = "xverify-confidence v1";

/// Offset of the below-minimum and above-maximum threshold candidates.
const SENTINEL_GAP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("invalid sample {pair_id:?}: {reason}")]
    InvalidSample { pair_id: String, reason: String },
    #[error("fold {0} has no samples")]
    MissingFold(usize),
    #[error("training split for fold {fold} contains only {label} samples")]
    DegenerateSplit { fold: usize, label: Label },
    #[error("no samples")]
    Empty,
    #[error("need at least 4 non-empty bins to fit, got {0}")]
    InsufficientData(usize),
    #[error("model line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("model has no parameters for fold {0}")]
    UnknownFold(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Genuine,
    Imposter,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Genuine => "genuine",
            Label::Imposter => "imposter",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceSample {
    pub distance: f64,
    pub label: Label,
    pub fold: usize,
    pub pair_id: String,
}

impl DistanceSample {
    pub fn new(distance: f64, label: Label, fold: usize, pair_id: impl Into<String>) -> Self {
        Self {
            distance,
            label,
            fold,
            pair_id: pair_id.into(),
        }
    }

    fn validate(&self) -> Result<(), ConfidenceError> {
        let bad = |reason: String| ConfidenceError::InvalidSample {
            pair_id: self.pair_id.clone(),
            reason,
        };
        if !(self.distance.is_finite() && (0.0..=2.0).contains(&self.distance)) {
            return Err(bad(format!("distance {} outside [0, 2]", self.distance)));
        }
        if self.fold >= FOLDS {
            return Err(bad(format!("fold {} out of range [0,{}]", self.fold, FOLDS - 1)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// Training accuracy in `[0, 1]`.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Accuracy-maximizing threshold for `(distance, label)` pairs.
///
/// Candidates are the midpoints between consecutive distinct distances plus
/// one candidate just below the smallest and one just above the largest
/// distance. Ties go to the smallest candidate.
pub fn best_threshold(points: &[(f64, Label)]) -> Result<ThresholdChoice, ConfidenceError> {
    if points.is_empty() {
        return Err(ConfidenceError::Empty);
    }
    let mut sorted: Vec<(f64, Label)> = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_imposter = sorted.iter().filter(|p| p.1 == Label::Imposter).count();

    // Threshold below everything: every pair is called imposter.
    let mut best = ThresholdChoice {
        threshold: sorted[0].0 - SENTINEL_GAP,
        accuracy: 0.0,
        correct: total_imposter,
        total: sorted.len(),
    };
    let mut genuine_below = 0;
    let mut imposter_below = 0;
    let mut i = 0;
    while i < sorted.len() {
        let value = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == value {
            match sorted[i].1 {
                Label::Genuine => genuine_below += 1,
                Label::Imposter => imposter_below += 1,
            }
            i += 1;
        }
        let correct = genuine_below + (total_imposter - imposter_below);
        if correct > best.correct {
            let threshold = match sorted.get(i) {
                Some(next) => (value + next.0) / 2.0,
                None => value + SENTINEL_GAP,
            };
            best.threshold = threshold;
            best.correct = correct;
        }
    }
    best.accuracy = best.correct as f64 / best.total as f64;
    Ok(best)
}

fn validate_samples(samples: &[DistanceSample]) -> Result<(), ConfidenceError> {
    samples.iter().try_for_each(DistanceSample::validate)
}

fn training_split(samples: &[DistanceSample], fold: usize) -> Vec<&DistanceSample> {
    samples.iter().filter(|s| s.fold != fold).collect()
}

fn check_both_labels(split: &[&DistanceSample], fold: usize) -> Result<(), ConfidenceError> {
    let genuine = split.iter().any(|s| s.label == Label::Genuine);
    let imposter = split.iter().any(|s| s.label == Label::Imposter);
    match (genuine, imposter) {
        (true, true) => Ok(()),
        (true, false) => Err(ConfidenceError::DegenerateSplit {
            fold,
            label: Label::Genuine,
        }),
        (false, true) => Err(ConfidenceError::DegenerateSplit {
            fold,
            label: Label::Imposter,
        }),
        (false, false) => Err(ConfidenceError::Empty),
    }
}

/// One threshold per fold, each chosen on the remaining nine folds.
pub fn compute_thresholds_cv(samples: &[DistanceSample]) -> Result<Vec<ThresholdChoice>, ConfidenceError> {
    validate_samples(samples)?;
    for fold in 0..FOLDS {
        if !samples.iter().any(|s| s.fold == fold) {
            return Err(ConfidenceError::MissingFold(fold));
        }
    }
    (0..FOLDS)
        .map(|fold| {
            let split = training_split(samples, fold);
            check_both_labels(&split, fold)?;
            let points: Vec<_> = split.iter().map(|s| (s.distance, s.label)).collect();
            best_threshold(&points)
        })
        .collect()
}

/// Genuine/imposter counts on 400 uniform bins over `[0, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioHistogram {
    counts: Vec<(u32, u32)>,
}

impl RatioHistogram {
    pub fn bin_index(distance: f64) -> usize {
        ((distance / BIN_WIDTH).floor().max(0.0) as usize).min(BINS - 1)
    }

    pub fn bin_edges() -> Vec<f64> {
        (0..=BINS).map(|i| i as f64 * BIN_WIDTH).collect()
    }

    pub fn bin_center(bin: usize) -> f64 {
        (bin as f64 + 0.5) * BIN_WIDTH
    }

    /// `(genuine, imposter)` per bin.
    pub fn counts(&self) -> &[(u32, u32)] {
        &self.counts
    }

    /// Genuine fraction per bin; `None` for empty bins.
    pub fn ratios(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .map(|&(g, i)| (g + i > 0).then(|| g as f64 / (g + i) as f64))
            .collect()
    }

    /// `(bin center, ratio)` of every non-empty bin.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.ratios()
            .into_iter()
            .enumerate()
            .filter_map(|(bin, r)| r.map(|r| (Self::bin_center(bin), r)))
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&(g, i)| g as u64 + i as u64).sum()
    }
}

pub fn ratio_histogram<'a>(samples: impl IntoIterator<Item = &'a DistanceSample>) -> RatioHistogram {
    let mut counts = vec![(0u32, 0u32); BINS];
    for s in samples {
        let bin = &mut counts[RatioHistogram::bin_index(s.distance)];
        match s.label {
            Label::Genuine => bin.0 += 1,
            Label::Imposter => bin.1 += 1,
        }
    }
    RatioHistogram { counts }
}

/// Parameters of `c(d) = L / (1 + exp(-k (d - d0))) + b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmoidParams {
    pub amplitude: f64,
    pub midpoint: f64,
    pub steepness: f64,
    pub offset: f64,
}

impl SigmoidParams {
    pub const LOWER: [f64; 4] = [0.0, 0.0, -500.0, -1.0];
    pub const UPPER: [f64; 4] = [2.0, 2.0, 500.0, 1.0];

    fn from_array(p: [f64; 4]) -> Self {
        Self {
            amplitude: p[0],
            midpoint: p[1],
            steepness: p[2],
            offset: p[3],
        }
    }

    fn to_array(self) -> [f64; 4] {
        [self.amplitude, self.midpoint, self.steepness, self.offset]
    }

    pub fn eval(&self, d: f64) -> f64 {
        self.amplitude * logistic(self.steepness * (d - self.midpoint)) + self.offset
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    /// Iteration budget ran out; the best parameters so far are returned.
    MaxIterations,
    /// The fitted curve is flat over the data, so it carries no calibration.
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmoidFit {
    pub params: SigmoidParams,
    /// Sum of squared residuals.
    pub residual: f64,
    pub iterations: usize,
    pub status: FitStatus,
}

const MAX_ITERATIONS: usize = 200;
const MAX_RETRIES: usize = 60;
const XTOL: f64 = 1e-10;
const FTOL: f64 = 1e-12;
const GTOL: f64 = 1e-15;
/// Fits whose curve varies less than this over the data are flagged.
const DEGENERATE_SPAN: f64 = 1e-3;

struct Problem<'a> {
    xs: &'a [f64],
    ys: &'a [f64],
}

impl Problem<'_> {
    fn residuals(&self, p: &[f64; 4]) -> DVector<f64> {
        let params = SigmoidParams::from_array(*p);
        DVector::from_iterator(self.xs.len(), self.xs.iter().zip(self.ys).map(|(&x, &y)| params.eval(x) - y))
    }

    fn jacobian(&self, p: &[f64; 4]) -> DMatrix<f64> {
        let [l, d0, k, _] = *p;
        let mut jac = DMatrix::zeros(self.xs.len(), 4);
        for (row, &x) in self.xs.iter().enumerate() {
            let s = logistic(k * (x - d0));
            let slope = l * s * (1.0 - s);
            jac[(row, 0)] = s;
            jac[(row, 1)] = -slope * k;
            jac[(row, 2)] = slope * (x - d0);
            jac[(row, 3)] = 1.0;
        }
        jac
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest `t ≥ 0` with `lb ≤ x + t·s ≤ ub`, and per-component hit signs.
fn step_size_to_bound(x: &[f64], s: &[f64], lb: &[f64], ub: &[f64]) -> (f64, Vec<i8>) {
    let steps: Vec<f64> = (0..x.len())
        .map(|i| {
            if s[i] == 0.0 {
                f64::INFINITY
            } else {
                ((lb[i] - x[i]) / s[i]).max((ub[i] - x[i]) / s[i])
            }
        })
        .collect();
    let min = steps.iter().copied().fold(f64::INFINITY, f64::min);
    let hits = steps
        .iter()
        .zip(s)
        .map(|(&t, &si)| if t == min && si != 0.0 { si.signum() as i8 } else { 0 })
        .collect();
    (min, hits)
}

/// Minimizer of `a t² + b t` over `[lo, hi]`.
fn minimize_quadratic_1d(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    let f = |t: f64| a * t * t + b * t;
    let mut best = if f(lo) <= f(hi) { lo } else { hi };
    if a != 0.0 {
        let extremum = -0.5 * b / a;
        if lo < extremum && extremum < hi && f(extremum) < f(best) {
            best = extremum;
        }
    }
    best
}

struct DoglegStep {
    step: Vec<f64>,
    bound_hits: Vec<i8>,
    tr_hit: bool,
}

/// Dogleg step inside the intersection of the rectangular trust region and
/// the parameter box (all quantities restricted to the free variables).
#[allow(clippy::too_many_arguments)]
fn dogleg_step(
    x: &[f64],
    newton: &[f64],
    g: &[f64],
    a: f64,
    b: f64,
    radius: f64,
    lb: &[f64],
    ub: &[f64],
) -> DoglegStep {
    let n = x.len();
    let lb_centered: Vec<f64> = (0..n).map(|i| lb[i] - x[i]).collect();
    let ub_centered: Vec<f64> = (0..n).map(|i| ub[i] - x[i]).collect();
    let lb_total: Vec<f64> = lb_centered.iter().map(|&l| l.max(-radius)).collect();
    let ub_total: Vec<f64> = ub_centered.iter().map(|&u| u.min(radius)).collect();

    let fits = (0..n).all(|i| newton[i] >= lb_total[i] && newton[i] <= ub_total[i]);
    if fits {
        return DoglegStep {
            step: newton.to_vec(),
            bound_hits: vec![0; n],
            tr_hit: false,
        };
    }

    let zeros = vec![0.0; n];
    let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
    let (to_bounds, _) = step_size_to_bound(&zeros, &neg_g, &lb_total, &ub_total);
    let t = minimize_quadratic_1d(a, b, 0.0, to_bounds);
    let cauchy: Vec<f64> = g.iter().map(|v| -t * v).collect();
    let diff: Vec<f64> = (0..n).map(|i| newton[i] - cauchy[i]).collect();
    let (size, hits) = step_size_to_bound(&cauchy, &diff, &lb_total, &ub_total);

    let mut bound_hits = vec![0i8; n];
    let mut tr_hit = false;
    for i in 0..n {
        let orig_l = lb_total[i] == lb_centered[i];
        let orig_u = ub_total[i] == ub_centered[i];
        let tr_l = lb_total[i] == -radius;
        let tr_u = ub_total[i] == radius;
        if hits[i] < 0 && orig_l {
            bound_hits[i] = -1;
        }
        if hits[i] > 0 && orig_u {
            bound_hits[i] = 1;
        }
        if (hits[i] < 0 && tr_l) || (hits[i] > 0 && tr_u) {
            tr_hit = true;
        }
    }
    let frac = size.min(1.0);
    DoglegStep {
        step: (0..n).map(|i| cauchy[i] + frac * diff[i]).collect(),
        bound_hits,
        tr_hit,
    }
}

fn lstsq(j: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let svd = j.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = f64::EPSILON * max_sv * j.nrows().max(j.ncols()) as f64;
    svd.solve(rhs, eps).unwrap_or_else(|_| DVector::zeros(j.ncols()))
}

/// Bounded least squares with a rectangular trust region (dogbox).
///
/// Variables sitting on a bound whose gradient points out of the box are
/// frozen for the iteration; the rest take a dogleg step between the
/// Cauchy point and the Gauss-Newton step, clipped to the intersection of
/// the trust region and the box.
fn dogbox(problem: &Problem<'_>, x0: [f64; 4], lb: [f64; 4], ub: [f64; 4]) -> ([f64; 4], f64, usize, bool) {
    let mut x = x0;
    for i in 0..4 {
        x[i] = x[i].clamp(lb[i], ub[i]);
    }
    let mut f = problem.residuals(&x);
    let mut cost = 0.5 * f.norm_squared();
    let mut jac = problem.jacobian(&x);
    let mut g = jac.transpose() * &f;
    let mut on_bound = [0i8; 4];
    for i in 0..4 {
        if x[i] == lb[i] {
            on_bound[i] = -1;
        } else if x[i] == ub[i] {
            on_bound[i] = 1;
        }
    }
    let mut delta = norm_inf(&x);
    if delta == 0.0 {
        delta = 1.0;
    }

    for iteration in 0..MAX_ITERATIONS {
        let free: Vec<usize> = (0..4).filter(|&i| on_bound[i] as f64 * g[i] >= 0.0).collect();
        let projected: Vec<f64> = free.iter().map(|&i| g[i]).collect();
        if cost == 0.0 || norm_inf(&projected) < GTOL {
            return (x, 2.0 * cost, iteration, true);
        }
        if free.is_empty() {
            return (x, 2.0 * cost, iteration, true);
        }

        let x_free: Vec<f64> = free.iter().map(|&i| x[i]).collect();
        let lb_free: Vec<f64> = free.iter().map(|&i| lb[i]).collect();
        let ub_free: Vec<f64> = free.iter().map(|&i| ub[i]).collect();
        let jac_free = jac.select_columns(free.iter());
        let newton: Vec<f64> = lstsq(&jac_free, &(-&f)).iter().copied().collect();
        let g_free = DVector::from_vec(projected.clone());
        let a = 0.5 * (&jac_free * &(-&g_free)).norm_squared();
        let b = -g_free.norm_squared();

        let mut accepted = None;
        for _ in 0..MAX_RETRIES {
            let dl = dogleg_step(&x_free, &newton, &projected, a, b, delta, &lb_free, &ub_free);
            let step_free = DVector::from_vec(dl.step.clone());
            let js = &jac_free * &step_free;
            let predicted = -(0.5 * js.norm_squared() + g_free.dot(&step_free));

            let mut x_new = x;
            for (k, &i) in free.iter().enumerate() {
                x_new[i] = (x[i] + dl.step[k]).clamp(lb[i], ub[i]);
            }
            let step_norm = norm2(&dl.step);
            let f_new = problem.residuals(&x_new);
            if f_new.iter().any(|v| !v.is_finite()) {
                delta = 0.25 * step_norm;
                continue;
            }
            let cost_new = 0.5 * f_new.norm_squared();
            let actual = cost - cost_new;
            let ratio = if predicted > 0.0 {
                actual / predicted
            } else if predicted == actual {
                1.0
            } else {
                0.0
            };
            if ratio < 0.25 {
                delta = 0.25 * step_norm;
            } else if ratio > 0.75 && dl.tr_hit {
                delta *= 2.0;
            }
            let ftol_hit = actual.abs() < FTOL * cost && ratio > 0.25;
            let xtol_hit = step_norm < XTOL;
            if actual > 0.0 {
                accepted = Some((x_new, f_new, cost_new, dl.bound_hits, ftol_hit || xtol_hit));
                break;
            }
            if ftol_hit || xtol_hit {
                return (x, 2.0 * cost, iteration + 1, true);
            }
        }

        let Some((x_new, _f_new, _cost_new, hits, done)) = accepted else {
            // No acceptable step in the retry budget: the region collapsed.
            return (x, 2.0 * cost, iteration + 1, true);
        };
        for (k, &i) in free.iter().enumerate() {
            on_bound[i] = hits[k];
        }
        x = x_new;
        for i in 0..4 {
            match on_bound[i] {
                -1 => x[i] = lb[i],
                1 => x[i] = ub[i],
                _ => {}
            }
        }
        f = problem.residuals(&x);
        cost = 0.5 * f.norm_squared();
        jac = problem.jacobian(&x);
        g = jac.transpose() * &f;
        if done {
            return (x, 2.0 * cost, iteration + 1, true);
        }
    }
    (x, 2.0 * cost, MAX_ITERATIONS, false)
}

/// Fits the logistic curve to `(distance, ratio)` points, starting from
/// `L = 1, d0 = threshold, k = -50, b = 0`.
pub fn fit_sigmoid_points(points: &[(f64, f64)], threshold: f64) -> Result<SigmoidFit, ConfidenceError> {
    if points.len() < 4 {
        return Err(ConfidenceError::InsufficientData(points.len()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let problem = Problem { xs: &xs, ys: &ys };
    let x0 = [1.0, threshold.clamp(0.0, 2.0), -50.0, 0.0];
    let (x, residual, iterations, converged) = dogbox(&problem, x0, SigmoidParams::LOWER, SigmoidParams::UPPER);
    let params = SigmoidParams::from_array(x);
    let (lo, hi) = xs
        .iter()
        .map(|&d| params.eval(d))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c), hi.max(c)));
    let status = if hi - lo < DEGENERATE_SPAN {
        FitStatus::Degenerate
    } else if converged {
        FitStatus::Converged
    } else {
        FitStatus::MaxIterations
    };
    Ok(SigmoidFit {
        params,
        residual,
        iterations,
        status,
    })
}

pub fn fit_sigmoid(hist: &RatioHistogram, threshold: f64) -> Result<SigmoidFit, ConfidenceError> {
    fit_sigmoid_points(&hist.points(), threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CScore {
    pub value: f64,
    pub prediction: Label,
}

/// Clips `c(d)` to `[0, 1]`, then returns `c` for genuine predictions
/// (`d ≤ t`) and `1 - c` for imposter predictions.
pub fn c_score(distance: f64, threshold: f64, params: &SigmoidParams) -> CScore {
    let c = params.eval(distance).clamp(0.0, 1.0);
    if distance <= threshold {
        CScore {
            value: c,
            prediction: Label::Genuine,
        }
    } else {
        CScore {
            value: 1.0 - c,
            prediction: Label::Imposter,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldModel {
    pub threshold: f64,
    pub params: SigmoidParams,
    pub fit_residual: f64,
}

impl FoldModel {
    pub fn score(&self, distance: f64) -> CScore {
        c_score(distance, self.threshold, &self.params)
    }
}

/// Fitted thresholds and curves: ten fold-wise entries, or a single entry
/// fitted on a validation set for unlabeled field data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub folds: Vec<FoldModel>,
}

fn fit_one(split: &[&DistanceSample], threshold: f64) -> Result<FoldModel, ConfidenceError> {
    let hist = ratio_histogram(split.iter().copied());
    let fit = fit_sigmoid(&hist, threshold)?;
    Ok(FoldModel {
        threshold,
        params: fit.params,
        fit_residual: fit.residual,
    })
}

impl ConfidenceModel {
    /// Fold-wise model: fold `f` uses the threshold and histogram of the
    /// other nine folds.
    pub fn fit_folds(samples: &[DistanceSample]) -> Result<Self, ConfidenceError> {
        let thresholds = compute_thresholds_cv(samples)?;
        let folds = thresholds
            .par_iter()
            .enumerate()
            .map(|(fold, choice)| fit_one(&training_split(samples, fold), choice.threshold))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { folds })
    }

    /// Single model fitted on all samples, for scoring unlabeled pairs.
    pub fn fit_validation(samples: &[DistanceSample]) -> Result<Self, ConfidenceError> {
        validate_samples(samples)?;
        let all: Vec<&DistanceSample> = samples.iter().collect();
        check_both_labels(&all, 0)?;
        let points: Vec<_> = samples.iter().map(|s| (s.distance, s.label)).collect();
        let choice = best_threshold(&points)?;
        Ok(Self {
            folds: vec![fit_one(&all, choice.threshold)?],
        })
    }

    pub fn is_fold_wise(&self) -> bool {
        self.folds.len() > 1
    }

    /// Parameters for a fold. Single-entry models answer for every fold.
    pub fn fold(&self, fold: Option<usize>) -> Result<&FoldModel, ConfidenceError> {
        if self.folds.len() == 1 {
            return Ok(&self.folds[0]);
        }
        let f = fold.unwrap_or(0);
        self.folds.get(f).ok_or(ConfidenceError::UnknownFold(f))
    }

    pub fn score(&self, distance: f64, fold: Option<usize>) -> Result<CScore, ConfidenceError> {
        Ok(self.fold(fold)?.score(distance))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MODEL_HEADER}");
        for m in &self.folds {
            let [l, d0, k, b] = m.params.to_array();
            let _ = writeln!(out, "{} {l} {d0} {k} {b} {}", m.threshold, m.fit_residual);
        }
        out
    }
}

impl FromStr for ConfidenceModel {
    type Err = ConfidenceError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == MODEL_HEADER => {}
            _ => {
                return Err(ConfidenceError::Parse {
                    line: 1,
                    reason: format!("expected header {MODEL_HEADER:?}"),
                })
            }
        }
        let mut folds = Vec::new();
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |reason: String| ConfidenceError::Parse { line: idx + 1, reason };
            let values = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| err(format!("{v:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != 6 {
                return Err(err(format!("expected 6 values, got {}", values.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(err("non-finite value".into()));
            }
            folds.push(FoldModel {
                threshold: values[0],
                params: SigmoidParams::from_array([values[1], values[2], values[3], values[4]]),
                fit_residual: values[5],
            });
        }
        if folds.is_empty() {
            return Err(ConfidenceError::Parse {
                line: 1,
                reason: "no fold records".into(),
            });
        }
        Ok(Self { folds })
    }
}

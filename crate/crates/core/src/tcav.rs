//! Concept activation vectors and TCAV testing.
//!
//! A CAV is the unit-normalized weight vector of a regularized linear probe
//! (logistic for binary concepts, ridge for ordinal ones) fitted on layer
//! activations. The TCAV score of a concept is the fraction of positively
//! predicted moments whose logit is more sensitive to the concept direction
//! than to a paired random direction. Scores from repeated fits are tested
//! against 0.5 with a one-sample t-test and Bonferroni correction.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ctml::{CtmlRecord, Feature};
use crate::embedstore::{EmbedError, EmbeddingStore};
use crate::eval::auc;
use crate::model::{bce_from_logit, reference_rows, sigmoid, ActivationLayer, HeadParams, Inputs, ModelError};
use crate::rng::{derive_seed, hash_str, keyed_rng};
use crate::stats::{mean, one_sample_t, sample_std};

pub const DEFAULT_L2_GRID: [f64; 6] = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];
pub const MIN_EXAMPLES: usize = 20;
pub const MAX_NEWTON_ITERS: usize = 200;
pub const GRAD_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TcavError {
    #[error("concept {0} is degenerate: {1}")]
    DegenerateConcept(String, String),
    #[error("TCAV score undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CavKind {
    BinaryLogistic,
    OrdinalLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub layer: ActivationLayer,
    pub concept: String,
    pub direction: Vec<f64>,
    pub kind: CavKind,
    pub l2: f64,
    /// Held-out AUC (binary) or MSE improvement ratio (ordinal).
    pub fit_quality: f64,
    pub converged: bool,
}

/// A fitted linear probe before normalization.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn augmented(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut a = Array2::ones((n, d + 1));
    a.slice_mut(ndarray::s![.., ..d]).assign(&x);
    a
}

fn logistic_objective(xa: &Array2<f64>, y: &[f64], beta: &Array1<f64>, l2: f64) -> (f64, Array1<f64>) {
    let d = beta.len() - 1;
    let logits = xa.dot(beta);
    let n = y.len() as f64;
    let loss = logits.iter().zip(y).map(|(&l, &t)| bce_from_logit(l, t)).sum::<f64>() / n;
    let w_sq: f64 = beta.iter().take(d).map(|w| w * w).sum();
    (loss + 0.5 * l2 * w_sq, logits)
}

/// L2-regularized logistic regression (intercept unpenalized), minimized
/// by damped Newton steps until the gradient norm drops below `GRAD_TOL`.
pub fn fit_logistic(x: ArrayView2<'_, f64>, y: &[f64], l2: f64, warm: Option<&LinearFit>) -> LinearFit {
    let (n, d) = x.dim();
    let xa = augmented(x);
    let mut beta = Array1::zeros(d + 1);
    if let Some(w) = warm {
        beta.slice_mut(ndarray::s![..d]).assign(&Array1::from(w.weights.clone()));
        beta[d] = w.intercept;
    }
    let nf = n as f64;
    let (mut obj, mut logits) = logistic_objective(&xa, y, &beta, l2);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < MAX_NEWTON_ITERS {
        let p: Array1<f64> = logits.mapv(sigmoid);
        let resid: Array1<f64> = p.iter().zip(y).map(|(&pi, &yi)| (pi - yi) / nf).collect();
        let mut g = xa.t().dot(&resid);
        for j in 0..d {
            g[j] += l2 * beta[j];
        }
        grad_norm = g.dot(&g).sqrt();
        if grad_norm < GRAD_TOL {
            break;
        }
        let s: Array1<f64> = p.mapv(|pi| (pi * (1.0 - pi) / nf).sqrt());
        let xs = &xa * &s.view().insert_axis(Axis(1));
        let mut h = xs.t().dot(&xs);
        for j in 0..d {
            h[[j, j]] += l2;
        }
        let step = solve_spd(&h, &g);
        let slope = -g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &beta - &(&step * t);
            let (o, l) = logistic_objective(&xa, y, &cand, l2);
            if o <= obj + 1e-4 * t * slope {
                beta = cand;
                obj = o;
                logits = l;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    LinearFit {
        weights: beta.iter().take(d).copied().collect(),
        intercept: beta[d],
        iterations,
        grad_norm,
    }
}

fn solve_spd(h: &Array2<f64>, g: &Array1<f64>) -> Array1<f64> {
    let m = h.nrows();
    let mut jitter = 0.0;
    loop {
        let mat = DMatrix::from_fn(m, m, |i, j| h[[i, j]] + if i == j { jitter } else { 0.0 });
        if let Some(ch) = mat.cholesky() {
            let sol = ch.solve(&DVector::from_iterator(m, g.iter().copied()));
            return Array1::from_iter(sol.iter().copied());
        }
        jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
    }
}

/// Ridge regression on centered data, solved in closed form.
pub fn fit_ridge(x: ArrayView2<'_, f64>, y: &[f64], l2: f64) -> LinearFit {
    let (n, d) = x.dim();
    let nf = n as f64;
    let xm = x.mean_axis(Axis(0)).expect("non-empty");
    let ym = mean(y);
    let xc = &x - &xm;
    let yc = Array1::from_iter(y.iter().map(|v| v - ym));
    let mut a = xc.t().dot(&xc) / nf;
    for j in 0..d {
        a[[j, j]] += l2;
    }
    let b = xc.t().dot(&yc) / nf;
    let w = solve_spd(&a, &b);
    LinearFit {
        intercept: ym - w.dot(&xm),
        weights: w.to_vec(),
        iterations: 1,
        grad_norm: 0.0,
    }
}

fn predict(fit: &LinearFit, x: ArrayView2<'_, f64>) -> Vec<f64> {
    let w = Array1::from(fit.weights.clone());
    (x.dot(&w) + fit.intercept).to_vec()
}

fn quality(kind: CavKind, fit: &LinearFit, x: ArrayView2<'_, f64>, y: &[f64], baseline: f64) -> f64 {
    let pred = predict(fit, x);
    match kind {
        CavKind::BinaryLogistic => {
            let labels: Vec<u8> = y.iter().map(|&v| u8::from(v > 0.5)).collect();
            auc(&pred, &labels).unwrap_or(f64::NAN)
        }
        CavKind::OrdinalLinear => {
            let mse = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
            let base = y.iter().map(|t| (t - baseline).powi(2)).sum::<f64>() / y.len() as f64;
            if base > 0.0 {
                1.0 - mse / base
            } else {
                f64::NAN
            }
        }
    }
}

fn fit(kind: CavKind, x: ArrayView2<'_, f64>, y: &[f64], l2: f64, warm: Option<&LinearFit>) -> LinearFit {
    match kind {
        CavKind::BinaryLogistic => fit_logistic(x, y, l2, warm),
        CavKind::OrdinalLinear => fit_ridge(x, y, l2),
    }
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| v.iter().map(|x| x / norm).collect())
}

/// 80/20 split, stratified by class for binary concepts.
fn holdout_split(kind: CavKind, y: &[f64], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = keyed_rng(seed, "cav-holdout", &[]);
    let strata: Vec<Vec<usize>> = match kind {
        CavKind::BinaryLogistic => {
            let (p, n): (Vec<usize>, Vec<usize>) = (0..y.len()).partition(|&i| y[i] > 0.5);
            vec![p, n]
        }
        CavKind::OrdinalLinear => vec![(0..y.len()).collect()],
    };
    let mut fit_rows = Vec::new();
    let mut hold = Vec::new();
    for mut s in strata {
        s.shuffle(&mut rng);
        let n_hold = s.len() / 5;
        hold.extend_from_slice(&s[..n_hold]);
        fit_rows.extend_from_slice(&s[n_hold..]);
    }
    fit_rows.sort_unstable();
    hold.sort_unstable();
    (fit_rows, hold)
}

fn check_concept(kind: CavKind, y: &[f64], concept: &str) -> Result<(), TcavError> {
    if y.len() < MIN_EXAMPLES {
        return Err(TcavError::DegenerateConcept(
            concept.into(),
            format!("{} examples, need {MIN_EXAMPLES}", y.len()),
        ));
    }
    let first = y[0];
    if y.iter().all(|&v| v == first) {
        let what = match kind {
            CavKind::BinaryLogistic => "single class",
            CavKind::OrdinalLinear => "single level",
        };
        return Err(TcavError::DegenerateConcept(concept.into(), what.into()));
    }
    Ok(())
}

/// Fits a CAV, choosing l2 from `l2_grid` by held-out fit quality on a
/// seeded 80/20 split, then refitting on all examples with that l2.
pub fn train_cav(
    activations: ArrayView2<'_, f64>,
    values: &[f64],
    kind: CavKind,
    l2_grid: &[f64],
    seed: u64,
    layer: ActivationLayer,
    concept: &str,
) -> Result<Cav, TcavError> {
    assert_eq!(activations.nrows(), values.len(), "one value per activation row");
    assert!(!l2_grid.is_empty() && l2_grid.iter().all(|&l| l > 0.0), "l2 grid must be positive");
    check_concept(kind, values, concept)?;
    let (fit_rows, hold) = holdout_split(kind, values, seed);
    let xf = activations.select(Axis(0), &fit_rows);
    let yf: Vec<f64> = fit_rows.iter().map(|&i| values[i]).collect();
    let xh = activations.select(Axis(0), &hold);
    let yh: Vec<f64> = hold.iter().map(|&i| values[i]).collect();
    let holdout_usable = match kind {
        CavKind::BinaryLogistic => yh.iter().any(|&v| v > 0.5) && yh.iter().any(|&v| v <= 0.5),
        CavKind::OrdinalLinear => yh.len() >= 2,
    };
    let (qx, qy) = if holdout_usable { (xh.view(), &yh) } else { (xf.view(), &yf) };
    let baseline = mean(&yf);

    // Largest l2 first so each fit warm-starts from a smoother solution.
    let mut order: Vec<usize> = (0..l2_grid.len()).collect();
    order.sort_by(|&a, &b| l2_grid[b].total_cmp(&l2_grid[a]));
    let mut qualities = vec![f64::NEG_INFINITY; l2_grid.len()];
    let mut warm: Option<LinearFit> = None;
    for &i in &order {
        let f = fit(kind, xf.view(), &yf, l2_grid[i], warm.as_ref());
        let q = quality(kind, &f, qx, qy, baseline);
        qualities[i] = if q.is_nan() { f64::NEG_INFINITY } else { q };
        warm = Some(f);
    }
    let best = (0..l2_grid.len())
        .max_by(|&a, &b| qualities[a].total_cmp(&qualities[b]).then(b.cmp(&a)))
        .expect("non-empty grid");
    let l2 = l2_grid[best];
    let full = fit(kind, activations, values, l2, None);
    let direction = unit(&full.weights)
        .ok_or_else(|| TcavError::DegenerateConcept(concept.into(), "zero weight vector".into()))?;
    Ok(Cav {
        layer,
        concept: concept.into(),
        direction,
        kind,
        l2,
        fit_quality: if qualities[best].is_finite() { qualities[best] } else { f64::NAN },
        converged: full.grad_norm < GRAD_TOL,
    })
}

/// A CAV for i.i.d. fair-coin labels over the same rows, fitted with a
/// fixed l2 (that of the paired concept CAV).
pub fn train_random_cav(
    activations: ArrayView2<'_, f64>,
    l2: f64,
    seed: u64,
    layer: ActivationLayer,
    tag: &str,
) -> Result<Cav, TcavError> {
    let n = activations.nrows();
    let mut rng = keyed_rng(seed, "random-concept", &[]);
    let mut y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random::<bool>()))).collect();
    if n >= 2 && y.iter().all(|&v| v == y[0]) {
        y[0] = 1.0 - y[0];
    }
    check_concept(CavKind::BinaryLogistic, &y, tag)?;
    let f = fit_logistic(activations, &y, l2, None);
    let direction = unit(&f.weights).ok_or_else(|| TcavError::DegenerateConcept(tag.into(), "zero weight vector".into()))?;
    let labels: Vec<u8> = y.iter().map(|&v| v as u8).collect();
    Ok(Cav {
        layer,
        concept: tag.into(),
        direction,
        kind: CavKind::BinaryLogistic,
        l2,
        fit_quality: auc(&predict(&f, activations), &labels).unwrap_or(f64::NAN),
        converged: f.grad_norm < GRAD_TOL,
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "direction width does not match the layer");
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `grad_wrt_activation(...) . cav.direction` for one moment.
pub fn directional_derivative(model: &HeadParams, e_x: &[f64], e_ref: &[f64], cav: &Cav) -> Result<f64, TcavError> {
    let g = model.grad_wrt_activation(e_x, e_ref, &cav.layer)?;
    Ok(dot(&g, &cav.direction))
}

/// Fraction of `x_plus` rows where sensitivity to `concept` exceeds
/// sensitivity to `random`.
pub fn tcav_score(model: &HeadParams, x_plus: &Inputs<'_>, concept: &Cav, random: &Cav) -> Result<f64, TcavError> {
    assert_eq!(concept.layer, random.layer, "paired CAVs live in the same layer");
    if x_plus.is_empty() {
        return Err(TcavError::Undefined("no positively predicted moments".into()));
    }
    let grads = model.grad_wrt_activation_batch(x_plus, &concept.layer)?;
    let c = Array1::from(concept.direction.clone());
    let r = Array1::from(random.direction.clone());
    let dc = grads.dot(&c);
    let dr = grads.dot(&r);
    let wins = dc.iter().zip(&dr).filter(|(a, b)| a > b).count();
    Ok(wins as f64 / x_plus.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub t_stat: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// One-sample two-sided t-test of the scores against 0.5, significant when
/// `p < alpha / m`.
pub fn significance(scores: &[f64], alpha: f64, m: usize) -> Significance {
    let t = one_sample_t(scores, 0.5);
    Significance {
        t_stat: t.t,
        p_value: t.p,
        significant: t.p < alpha / m as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcavConfig {
    pub repetitions: usize,
    pub l2_grid: Vec<f64>,
    pub alpha: f64,
    pub bonferroni_m: usize,
    /// Moments with predicted probability above this form X+.
    pub positive_threshold: f64,
    pub seed: u64,
}

impl Default for TcavConfig {
    fn default() -> Self {
        Self {
            repetitions: 25,
            l2_grid: DEFAULT_L2_GRID.to_vec(),
            alpha: 0.05,
            bonferroni_m: 150,
            positive_threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcavResult {
    pub concept: String,
    pub layer: String,
    pub scores: Vec<f64>,
    #[serde(with = "crate::stats::json_float")]
    pub mean: f64,
    #[serde(with = "crate::stats::json_float")]
    pub std: f64,
    #[serde(with = "crate::stats::json_float")]
    pub t_stat: f64,
    #[serde(with = "crate::stats::json_float")]
    pub p_value: f64,
    pub significant_bonferroni: bool,
    pub degenerate: bool,
    /// Repetitions whose score or fit failed, with reasons.
    pub failures: Vec<String>,
    #[serde(with = "crate::stats::json_float")]
    pub cav_quality: f64,
    #[serde(with = "crate::stats::json_float")]
    pub random_quality: f64,
    pub l2: Vec<f64>,
    pub n_positive: usize,
    pub n_concept_examples: usize,
}

/// Positively predicted moments of a model with their inputs.
#[derive(Debug, Clone)]
pub struct PositiveSet {
    pub x: Array2<f64>,
    pub refs: Array2<f64>,
    pub ref_idx: Vec<usize>,
    pub moments: Vec<(String, i64)>,
}

impl PositiveSet {
    pub fn inputs(&self) -> Inputs<'_> {
        Inputs::new(self.x.view(), self.refs.view(), &self.ref_idx)
    }
}

/// Assembles the model's inputs for `moments` (references are per-video
/// means over the given moments) and keeps those predicted above the
/// threshold.
pub fn positive_set(
    model: &HeadParams,
    store: &EmbeddingStore,
    moments: &[(String, i64)],
    threshold: f64,
) -> Result<PositiveSet, TcavError> {
    let layout = model.parsed_layout()?;
    let names: Vec<&str> = layout.names().collect();
    let mut data = Vec::with_capacity(moments.len() * layout.dim());
    let mut videos: HashMap<&str, usize> = HashMap::new();
    let mut group = Vec::with_capacity(moments.len());
    for (v, t) in moments {
        let row = store.row_of(v, *t).ok_or_else(|| EmbedError::MomentNotEmbedded {
            video_id: v.clone(),
            t: *t,
        })?;
        store.assemble_row(&store.layout(&names)?, row, &mut data)?;
        let n = videos.len();
        group.push(*videos.entry(v.as_str()).or_insert(n));
    }
    let x = Array2::from_shape_vec((moments.len(), layout.dim()), data).expect("rows assembled");
    let all: Vec<usize> = (0..moments.len()).collect();
    let refs = reference_rows(x.view(), &group, &all, |_| 1.0, videos.len());
    let probs = model.predict(&Inputs::new(x.view(), refs.view(), &group));
    let keep: Vec<usize> = (0..moments.len()).filter(|&i| probs[i] > threshold).collect();
    Ok(PositiveSet {
        x: x.select(Axis(0), &keep),
        refs,
        ref_idx: keep.iter().map(|&i| group[i]).collect(),
        moments: keep.iter().map(|&i| moments[i].clone()).collect(),
    })
}

/// Concept activations at a layer for the coded moments.
pub fn layer_activations(
    model: &HeadParams,
    store: &EmbeddingStore,
    layer: &ActivationLayer,
    moments: &[(String, i64)],
) -> Result<Array2<f64>, TcavError> {
    let layout = model.parsed_layout()?;
    let parts: Vec<&str> = match layer {
        ActivationLayer::InputPart(name) => {
            if layout.range(name).is_none() {
                return Err(ModelError::UnknownLayer(name.clone(), model.layout.clone()).into());
            }
            vec![name.as_str()]
        }
        ActivationLayer::H1 => layout.names().collect(),
    };
    let sel = store.layout(&parts)?;
    let mut data = Vec::with_capacity(moments.len() * sel.dim());
    for (v, t) in moments {
        let row = store.row_of(v, *t).ok_or_else(|| EmbedError::MomentNotEmbedded {
            video_id: v.clone(),
            t: *t,
        })?;
        store.assemble_row(&sel, row, &mut data)?;
    }
    let x = Array2::from_shape_vec((moments.len(), sel.dim()), data).expect("rows assembled");
    Ok(match layer {
        ActivationLayer::InputPart(_) => x,
        ActivationLayer::H1 => model.h1_activations(x.view()),
    })
}

/// One concept to test: its examples' activations at a layer and values.
pub struct ConceptData<'a> {
    pub name: String,
    pub kind: CavKind,
    pub layer: ActivationLayer,
    pub activations: ArrayView2<'a, f64>,
    pub values: &'a [f64],
}

/// Runs every repetition for one (concept, layer) and aggregates.
pub fn tcav_concept(model: &HeadParams, x_plus: &Inputs<'_>, concept: &ConceptData<'_>, config: &TcavConfig) -> TcavResult {
    let key = [hash_str(&concept.name), hash_str(&concept.layer.to_string())];
    let reps: Vec<Result<(f64, Cav, Cav), TcavError>> = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let cav_seed = derive_seed(config.seed, "cav", &[key[0], key[1], rep as u64]);
            let cav = train_cav(
                concept.activations,
                concept.values,
                concept.kind,
                &config.l2_grid,
                cav_seed,
                concept.layer.clone(),
                &concept.name,
            )?;
            let rnd_seed = derive_seed(config.seed, "random-cav", &[key[0], key[1], rep as u64]);
            let random = train_random_cav(
                concept.activations,
                cav.l2,
                rnd_seed,
                concept.layer.clone(),
                &format!("random:{}:{rep}", concept.name),
            )?;
            debug_assert_eq!(cav.l2, random.l2);
            let s = tcav_score(model, x_plus, &cav, &random)?;
            Ok((s, cav, random))
        })
        .collect();
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    let mut degenerate = false;
    let mut cq = Vec::new();
    let mut rq = Vec::new();
    let mut l2 = Vec::new();
    for (rep, r) in reps.into_iter().enumerate() {
        match r {
            Ok((s, c, rnd)) => {
                scores.push(s);
                cq.push(c.fit_quality);
                rq.push(rnd.fit_quality);
                l2.push(c.l2);
            }
            Err(e) => {
                degenerate |= matches!(e, TcavError::DegenerateConcept(..));
                failures.push(format!("repetition {rep}: {e}"));
            }
        }
    }
    let (mean_s, std_s, sig) = if scores.len() >= 2 {
        (mean(&scores), sample_std(&scores), significance(&scores, config.alpha, config.bonferroni_m))
    } else {
        (
            scores.first().copied().unwrap_or(f64::NAN),
            f64::NAN,
            Significance {
                t_stat: f64::NAN,
                p_value: 1.0,
                significant: false,
            },
        )
    };
    let finite_mean = |v: &[f64]| {
        let f: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        if f.is_empty() {
            f64::NAN
        } else {
            mean(&f)
        }
    };
    TcavResult {
        concept: concept.name.clone(),
        layer: concept.layer.to_string(),
        mean: mean_s,
        std: std_s,
        t_stat: sig.t_stat,
        p_value: sig.p_value,
        significant_bonferroni: sig.significant,
        degenerate,
        failures,
        cav_quality: finite_mean(&cq),
        random_quality: finite_mean(&rq),
        l2,
        n_positive: x_plus.len(),
        n_concept_examples: concept.values.len(),
        scores,
    }
}

/// Full procedure over rubric features and layers, with X+ fixed per model.
pub fn run_tcav(
    model: &HeadParams,
    store: &EmbeddingStore,
    records: &[CtmlRecord],
    features: &[Feature],
    layers: &[ActivationLayer],
    candidate_moments: &[(String, i64)],
    config: &TcavConfig,
) -> Result<Vec<TcavResult>, TcavError> {
    let xp = positive_set(model, store, candidate_moments, config.positive_threshold)?;
    let coded: Vec<(String, i64)> = records.iter().map(|r| (r.video_id.clone(), r.t)).collect();
    let mut out = Vec::new();
    for layer in layers {
        let acts = layer_activations(model, store, layer, &coded)?;
        for &f in features {
            let values: Vec<f64> = records.iter().map(|r| f64::from(r.get(f))).collect();
            let kind = if f.is_ordinal() {
                CavKind::OrdinalLinear
            } else {
                CavKind::BinaryLogistic
            };
            let data = ConceptData {
                name: f.key().to_string(),
                kind,
                layer: layer.clone(),
                activations: acts.view(),
                values: &values,
            };
            out.push(tcav_concept(model, &xp.inputs(), &data, config));
        }
    }
    Ok(out)
}

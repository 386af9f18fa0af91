//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use vidpeak_core::embedstore::{open_manifest, EmbeddingStore};
use vidpeak_core::events::{canonical_metas, dedupe_videos, group_by_video, parse_event_bytes, SchemaConfig};
use vidpeak_core::eval::{lift_at_k, LiftPooling, VideoScores};
use vidpeak_core::model::{dropout_keep, HeadParams, HeadShape, Inputs};
use vidpeak_core::rng::keyed_rng;
use vidpeak_core::signals::{process_corpus, subsample_moments, Moment, SignalConfig, VideoSignals};
use vidpeak_core::synth::{write_corpus, Corpus};

/// AUC by counting every positive/negative pair, ties counting one half.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Cohen's kappa of two binary rating vectors from observed and chance
/// agreement proportions. Two raters constant on the same category count as
/// perfect agreement.
pub fn binary_kappa(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let pa = a.iter().filter(|&&x| x == 1).count() as f64 / n;
    let pb = b.iter().filter(|&&x| x == 1).count() as f64 / n;
    let chance = pa * pb + (1.0 - pa) * (1.0 - pb);
    if chance == 1.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (agree - chance) / (1.0 - chance)
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let m = 0.5 * (a + b);
    (b - a) / 6.0 * (f(a) + 4.0 * f(m) + f(b))
}

fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let left = simpson(f, a, m);
    let right = simpson(f, m, b);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
        return left + right + (left + right - whole) / 15.0;
    }
    adaptive(f, a, m, left, tol / 2.0, depth - 1) + adaptive(f, m, b, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    adaptive(f, a, b, simpson(f, a, b), tol, 40)
}

/// Two-sided tail probability of Student's t with `df >= 1` degrees of
/// freedom, by quadrature. Substituting `x = sqrt(df) tan(u)` turns the
/// density into `cos(u)^(df-1)` on `[0, pi/2)`, so the normalizing constant
/// cancels and no special functions are needed.
pub fn t_two_sided_by_quadrature(t: f64, df: f64) -> f64 {
    assert!(df >= 1.0, "quadrature form needs df >= 1");
    if t.is_infinite() {
        return 0.0;
    }
    let f = move |u: f64| u.cos().powf(df - 1.0);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let cut = (t.abs() / df.sqrt()).atan();
    let total = integrate(&f, 0.0, half_pi, 1e-12);
    let tail = integrate(&f, cut, half_pi, 1e-12);
    (tail / total).min(1.0)
}

/// One-sample t statistic against `null`, straight from the definition.
pub fn t_statistic(xs: &[f64], null: f64) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m - null) / (var / n).sqrt()
}

/// Welch statistic and Welch-Satterthwaite degrees of freedom.
pub fn welch(a: &[f64], b: &[f64]) -> (f64, f64) {
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, var / n)
    };
    let (na, ma, sa) = stats(a);
    let (nb, mb, sb) = stats(b);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    (t, df)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst relative error of central finite differences against the
/// analytic parameter gradient of the batch loss and against
/// d logit / d e_x, in that order.
pub fn finite_difference_errors(
    p: &HeadParams,
    inp: &Inputs<'_>,
    y: &[u8],
    keep: &Option<Array2<f64>>,
    step: f64,
    floor: f64,
) -> (f64, f64) {
    let lg = p.loss_and_grads(inp, y, keep.clone()).unwrap();
    let loss = |q: &HeadParams| q.loss_and_grads(inp, y, keep.clone()).unwrap().loss;
    let mut worst_param = 0.0f64;
    let mut q = p.clone();
    for i in 0..p.theta.len() {
        q.theta[i] = p.theta[i] + step;
        let up = loss(&q);
        q.theta[i] = p.theta[i] - step;
        let down = loss(&q);
        q.theta[i] = p.theta[i];
        let fd = (up - down) / (2.0 * step);
        worst_param = worst_param.max(rel_err(fd, lg.grad[i], floor));
    }
    let mut worst_input = 0.0f64;
    let mut x = inp.x.to_owned();
    for row in 0..inp.len() {
        for j in 0..x.ncols() {
            let orig = x[[row, j]];
            let mut logit = |v: f64| {
                x[[row, j]] = v;
                let out = p.forward(&Inputs::new(x.view(), inp.refs, inp.ref_idx), keep.clone()).logit[row];
                x[[row, j]] = orig;
                out
            };
            let fd = (logit(orig + step) - logit(orig - step)) / (2.0 * step);
            worst_input = worst_input.max(rel_err(fd, lg.dlogit_dx[[row, j]], floor));
        }
    }
    (worst_param, worst_input)
}

/// Smallest distance of any pre-activation to a ReLU kink.
pub fn kink_margin(p: &HeadParams, inp: &Inputs<'_>, keep: &Option<Array2<f64>>) -> f64 {
    let c = p.forward(inp, keep.clone());
    let mut m = c.a_pre.iter().chain(c.z_pre.iter()).fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if p.shape.use_reference {
        m = c.r_pre.iter().fold(m, |m, v| m.min(v.abs()));
    }
    m
}

fn head_shape(d: usize, hidden: usize) -> HeadShape {
    HeadShape {
        d_in: d,
        hidden,
        weight_share: true,
        use_reference: false,
    }
}

/// Offset of `W3` in the flat parameter vector of a shared, reference-free
/// head.
fn w3_offset(d: usize, h: usize) -> usize {
    h * d + h + 2 * h * h + h
}

/// Head whose logit is exactly `w . x + 10` wherever `w . x > -10`.
pub fn linear_head(w: &[f64], layout: &str) -> HeadParams {
    let d = w.len();
    let h = 2;
    let mut p = HeadParams::zeros(head_shape(d, h), layout);
    p.theta[..d].copy_from_slice(w);
    p.theta[h * d] = 10.0;
    let w2 = h * d + h;
    p.theta[w2] = 1.0;
    p.theta[w3_offset(d, h)] = 1.0;
    p
}

/// Head whose logit is `sum_i |u_i . x| + bias`: each direction feeds a
/// `relu(u.x)`, `relu(-u.x)` pair and the second layer passes both through.
/// Its input gradient at `-x` is the negation of that at `x`.
pub fn absolute_value_head(dirs: &[Vec<f64>], bias: f64, layout: &str) -> HeadParams {
    let d = dirs[0].len();
    let h = 2 * dirs.len();
    let mut p = HeadParams::zeros(head_shape(d, h), layout);
    for (k, u) in dirs.iter().enumerate() {
        for (j, &v) in u.iter().enumerate() {
            p.theta[(2 * k) * d + j] = v;
            p.theta[(2 * k + 1) * d + j] = -v;
        }
    }
    let w2 = h * d + h;
    for i in 0..h {
        p.theta[w2 + i * 2 * h + i] = 1.0;
    }
    let w3 = w3_offset(d, h);
    for i in 0..h {
        p.theta[w3 + i] = 1.0;
    }
    p.theta[w3 + h] = bias;
    p
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// A corpus pushed through ingest and signal processing.
pub struct Processed {
    pub videos: Vec<VideoSignals>,
    pub moments: Vec<Moment>,
    pub store: EmbeddingStore,
    pub ingest: vidpeak_core::events::IngestReport,
}

/// Writes the corpus under `dir`, then ingests, processes and subsamples it
/// with default signal settings.
pub fn process(corpus: &Corpus, dir: &Path) -> Processed {
    let paths = write_corpus(corpus, dir).unwrap();
    let bytes = std::fs::read(&paths.events).unwrap();
    let (events, ingest) = parse_event_bytes(&bytes, &SchemaConfig::with_metadata(&corpus.metas), 4);
    let canon = dedupe_videos(&corpus.metas);
    let metas = canonical_metas(&corpus.metas, &canon);
    let grouped = group_by_video(events, &canon);
    let config = SignalConfig::default();
    let (videos, skipped) = process_corpus(&metas, &grouped, &[5, 10, 20], &config);
    assert!(skipped.is_empty(), "{skipped:?}");
    let moments = videos
        .iter()
        .flat_map(|v| subsample_moments(v, config.subsample_interval))
        .collect();
    Processed {
        videos,
        moments,
        store: open_manifest(&paths.manifest).unwrap(),
        ingest,
    }
}

/// `n` standard normal rows of width `d`.
pub fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = vidpeak_core::rng::keyed_rng(seed, "gaussian-rows", &[]);
    Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Examples labelled by the side of the hyperplane through the origin with
/// normal `normal`, dropping those within `gap` of it.
pub fn separable_concept(normal: &[f64], n: usize, gap: f64, seed: u64) -> (Array2<f64>, Vec<f64>) {
    let d = normal.len();
    let u = unit(normal);
    let pool = gaussian(4 * n, d, seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for r in pool.rows() {
        let s: f64 = r.iter().zip(&u).map(|(a, b)| a * b).sum();
        if s.abs() < gap {
            continue;
        }
        rows.extend(r.iter().copied());
        labels.push(if s > 0.0 { 1.0 } else { 0.0 });
        if labels.len() == n {
            break;
        }
    }
    (Array2::from_shape_vec((labels.len(), d), rows).unwrap(), labels)
}

/// Cosine between a trained CAV and the planted normal of a separable
/// concept drawn from `seed`.
pub fn cav_recovery_cosine(seed: u64) -> f64 {
    use vidpeak_core::tcav::{train_cav, CavKind, DEFAULT_L2_GRID};
    let d = 12;
    let normal: Vec<f64> = gaussian(1, d, seed ^ 0x5eed).row(0).to_vec();
    let (acts, labels) = separable_concept(&normal, 300, 0.25, seed);
    let cav = train_cav(
        acts.view(),
        &labels,
        CavKind::BinaryLogistic,
        &DEFAULT_L2_GRID,
        seed,
        vidpeak_core::model::ActivationLayer::InputPart("a".into()),
        "planted",
    )
    .unwrap();
    cosine(&cav.direction, &normal)
}

/// The outcome of a planted-direction construction.
pub struct Construction {
    pub model: HeadParams,
    pub x_plus: Array2<f64>,
    pub refs: Array2<f64>,
    pub ref_idx: Vec<usize>,
    pub concept_acts: Array2<f64>,
    pub concept_values: Vec<f64>,
}

impl Construction {
    pub fn run(&self, config: &vidpeak_core::tcav::TcavConfig) -> vidpeak_core::tcav::TcavResult {
        use vidpeak_core::tcav::{tcav_concept, CavKind, ConceptData};
        let inp = Inputs::new(self.x_plus.view(), self.refs.view(), &self.ref_idx);
        let data = ConceptData {
            name: "planted".into(),
            kind: CavKind::BinaryLogistic,
            layer: vidpeak_core::model::ActivationLayer::InputPart("a".into()),
            activations: self.concept_acts.view(),
            values: &self.concept_values,
        };
        tcav_concept(&self.model, &inp, &data, config)
    }
}

const CONSTRUCTION_DIM: usize = 10;

fn construction(model: HeadParams, concept_normal: &[f64], seed: u64) -> Construction {
    let d = CONSTRUCTION_DIM;
    let x_plus = gaussian(400, d, seed.wrapping_add(1));
    let n = x_plus.nrows();
    let (concept_acts, concept_values) = separable_concept(concept_normal, 200, 0.25, seed.wrapping_add(2));
    Construction {
        model,
        x_plus,
        refs: Array2::zeros((1, d)),
        ref_idx: vec![0; n],
        concept_acts,
        concept_values,
    }
}

/// A linear head with weights `w` and a concept whose normal is `w` or
/// `-w`.
pub fn linear_construction(aligned: bool, seed: u64) -> Construction {
    let w: Vec<f64> = gaussian(1, CONSTRUCTION_DIM, seed).row(0).iter().map(|v| 0.3 * v).collect();
    let model = linear_head(&w, &format!("a:{CONSTRUCTION_DIM}"));
    let normal: Vec<f64> = if aligned { w.clone() } else { w.iter().map(|v| -v).collect() };
    construction(model, &normal, seed)
}

/// A head whose logit is `sum_i |u_i . x|` over three directions, and a
/// decoy concept along a direction orthogonal to all of them.
pub fn decoy_construction(seed: u64) -> Construction {
    let d = CONSTRUCTION_DIM;
    // Gram-Schmidt over random draws: three model directions, then the decoy.
    let raw = gaussian(4, d, seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for r in raw.rows() {
        let mut v = r.to_vec();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        basis.push(unit(&v));
    }
    let decoy = basis.pop().unwrap();
    let model = absolute_value_head(&basis, 0.0, &format!("a:{d}"));
    construction(model, &decoy, seed)
}

/// The same head over every coordinate axis: gradients are `sign(x)`, so
/// any fixed direction pair wins on half of a symmetric sample.
pub fn symmetric_model(d: usize) -> HeadParams {
    let axes: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    absolute_value_head(&axes, 0.0, &format!("a:{d}"))
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_FLOOR: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;

/// One random head with a batch, labels and an optional dropout mask.
pub struct Draw {
    pub params: HeadParams,
    pub x: Array2<f64>,
    pub refs: Array2<f64>,
    pub ref_idx: Vec<usize>,
    pub y: Vec<u8>,
    pub keep: Option<Array2<f64>>,
}

pub fn draw(index: u64) -> Draw {
    let mut rng = keyed_rng(17, "fd-draw", &[index]);
    let d = rng.random_range(2..=6);
    let hidden = rng.random_range(2..=6);
    let shape = HeadShape {
        d_in: d,
        hidden,
        weight_share: rng.random(),
        use_reference: rng.random(),
    };
    let mut params = HeadParams::init(shape, format!("a:{d}"), index);
    // Spread biases so that units are both active and inactive.
    for v in params.theta.iter_mut() {
        *v += 0.3 * (rng.random::<f64>() - 0.5);
    }
    let n = rng.random_range(1..=4);
    let n_ref = rng.random_range(1..=2);
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5));
    let refs = Array2::from_shape_fn((n_ref, d), |_| rng.random_range(-1.5..1.5));
    let ref_idx = (0..n).map(|_| rng.random_range(0..n_ref)).collect();
    let y = (0..n).map(|_| rng.random_range(0..=1)).collect();
    let keep = rng.random_bool(0.5).then(|| dropout_keep(n, hidden, 0.2, &mut rng));
    Draw {
        params,
        x,
        refs,
        ref_idx,
        y,
        keep,
    }
}

/// Worst parameter and input errors over `count` draws whose
/// pre-activations stay clear of ReLU kinks, plus the number of rejected
/// draws.
pub fn fd_sweep(count: usize) -> (f64, f64, usize) {
    let (mut wp, mut wi, mut rejected) = (0.0f64, 0.0f64, 0);
    let mut index = 0;
    let mut accepted = 0;
    while accepted < count {
        let d = draw(index);
        index += 1;
        let inp = Inputs::new(d.x.view(), d.refs.view(), &d.ref_idx);
        if kink_margin(&d.params, &inp, &d.keep) < 1e-3 {
            rejected += 1;
            continue;
        }
        let (p, i) = finite_difference_errors(&d.params, &inp, &d.y, &d.keep, FD_STEP, FD_FLOOR);
        wp = wp.max(p);
        wi = wi.max(i);
        accepted += 1;
    }
    (wp, wi, rejected)
}

/// Mean Lift@K% of random scores over corpora whose labels are drawn at
/// rate K%.
pub fn random_lift_mean(k: u32, corpora: usize, seed: u64) -> f64 {
    let mut total = 0.0;
    for c in 0..corpora {
        let mut rng = keyed_rng(seed, "random-lift", &[c as u64]);
        let videos: Vec<VideoScores> = (0..20)
            .map(|v| {
                let n = 200;
                VideoScores {
                    video_id: format!("v{v}"),
                    t: (0..n).collect(),
                    scores: (0..n).map(|_| rng.random::<f64>()).collect(),
                    labels: (0..n).map(|_| u8::from(rng.random::<f64>() < f64::from(k) / 100.0)).collect(),
                }
            })
            .collect();
        total += lift_at_k(&videos, k, LiftPooling::Pooled).unwrap();
    }
    total / corpora as f64
}

/// Fifty fixed vectors with varying length, location and spread.
pub fn fixed_vectors() -> Vec<Vec<f64>> {
    (0..50u64)
        .map(|i| {
            let mut rng = keyed_rng(2024, "t-vectors", &[i]);
            let n = 3 + (i as usize % 23);
            let shift = (i as f64 - 25.0) / 20.0;
            (0..n).map(|_| 0.5 + shift * 0.3 + rng.random_range(-1.0..1.0)).collect()
        })
        .collect()
}

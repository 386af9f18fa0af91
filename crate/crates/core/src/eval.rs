//! AUC, Lift@K%, leakage-free splits and multi-seed experiments.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedstore::{EmbedError, EmbeddingStore};
use crate::model::{reference_rows, train, Dataset, HeadParams, Inputs, ModelError, TrainConfig, TrainLog};
use crate::rng::keyed_rng;
use crate::signals::{LabelKey, Moment, Signal};
use crate::stats::{average_ranks, mean, sample_std};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("no courses in field {0:?}")]
    UnknownField(String),
    #[error("split needs at least two courses, found {0}")]
    TooFewCourses(usize),
    #[error("course {0:?} appears on both sides of the split")]
    Leakage(String),
    #[error("moment ({0}, {1}) has no label {2}")]
    MissingLabel(String, i64, String),
    #[error("moment ({0}, {1}) has no feature row")]
    MissingFeatures(String, i64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Area under the ROC curve as the Mann-Whitney statistic,
/// `P(s+ > s-) + P(s+ = s-)/2`, via average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::Undefined("AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Scores and labels of one video's moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub video_id: String,
    pub t: Vec<i64>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// How per-video top-K precision is combined across videos.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LiftPooling {
    /// One precision over all selected moments.
    #[default]
    Pooled,
    /// Mean of per-video precisions.
    PerVideoMean,
}

/// Number of moments selected per video: `ceil(K * n / 100)`.
pub fn top_k_count(n: usize, k_percent: u32) -> usize {
    (k_percent as usize * n).div_ceil(100)
}

/// Lift@K%: top-K% precision per video divided by K/100. Ties in score
/// are broken by ascending second.
pub fn lift_at_k(videos: &[VideoScores], k_percent: u32, pooling: LiftPooling) -> Result<f64, EvalError> {
    assert!(k_percent > 0 && k_percent <= 100, "K must be in 1..=100");
    let mut hits = 0usize;
    let mut selected = 0usize;
    let mut precisions = Vec::new();
    for v in videos {
        let n = v.scores.len();
        if n == 0 {
            log::warn!("video {} has no scored moments; skipped in lift", v.video_id);
            continue;
        }
        let m = top_k_count(n, k_percent);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| v.scores[b].total_cmp(&v.scores[a]).then(v.t[a].cmp(&v.t[b])));
        let h = order[..m].iter().filter(|&&i| v.labels[i] == 1).count();
        hits += h;
        selected += m;
        precisions.push(h as f64 / m as f64);
    }
    if selected == 0 {
        return Err(EvalError::Undefined("no moments to compute lift".into()));
    }
    Ok(match pooling {
        LiftPooling::Pooled => (hits as f64 * 100.0) / (selected as f64 * f64::from(k_percent)),
        LiftPooling::PerVideoMean => mean(&precisions) * 100.0 / f64::from(k_percent),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitKind {
    CourseGrouped { test_fraction: f64 },
    FieldHoldout { field: String },
}

impl Default for SplitKind {
    fn default() -> Self {
        SplitKind::CourseGrouped { test_fraction: 0.10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub seed: u64,
    pub train: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitPlan {
    pub fn check_disjoint(&self) -> Result<(), EvalError> {
        match self.train.intersection(&self.test).next() {
            Some(c) => Err(EvalError::Leakage(c.clone())),
            None => Ok(()),
        }
    }

    pub fn is_test(&self, course_id: &str) -> bool {
        self.test.contains(course_id)
    }
}

/// Assigns whole courses to the test side. Course-grouped splits add
/// shuffled courses until the test side first holds at least the target
/// fraction of moments; field holdout takes every course of the field.
pub fn make_split(moments: &[Moment], kind: &SplitKind, seed: u64) -> Result<SplitPlan, EvalError> {
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fields: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for m in moments {
        *sizes.entry(&m.course_id).or_default() += 1;
        fields.entry(&m.field).or_default().insert(&m.course_id);
    }
    if sizes.len() < 2 {
        return Err(EvalError::TooFewCourses(sizes.len()));
    }
    let test: BTreeSet<String> = match kind {
        SplitKind::CourseGrouped { test_fraction } => {
            let mut courses: Vec<&str> = sizes.keys().copied().collect();
            courses.shuffle(&mut keyed_rng(seed, "course-split", &[]));
            let target = test_fraction * moments.len() as f64;
            let mut test = BTreeSet::new();
            let mut n = 0usize;
            for c in &courses[..courses.len() - 1] {
                if n as f64 >= target {
                    break;
                }
                n += sizes[c];
                test.insert(c.to_string());
            }
            test
        }
        SplitKind::FieldHoldout { field } => {
            let courses = fields
                .get(field.as_str())
                .ok_or_else(|| EvalError::UnknownField(field.clone()))?;
            if courses.len() == sizes.len() {
                return Err(EvalError::TooFewCourses(0));
            }
            courses.iter().map(|c| c.to_string()).collect()
        }
    };
    let train = sizes
        .keys()
        .filter(|c| !test.contains(**c))
        .map(|c| c.to_string())
        .collect();
    let plan = SplitPlan {
        kind: kind.clone(),
        seed,
        train,
        test,
    };
    plan.check_disjoint()?;
    Ok(plan)
}

/// A head architecture variant (the ablation grid).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub weight_share: bool,
    pub use_reference: bool,
}

impl Variant {
    pub fn full() -> Self {
        Self {
            name: "reference+sharing".into(),
            weight_share: true,
            use_reference: true,
        }
    }

    pub fn ablation_grid() -> Vec<Self> {
        vec![
            Self::full(),
            Self {
                name: "no_sharing".into(),
                weight_share: false,
                use_reference: true,
            },
            Self {
                name: "no_reference".into(),
                weight_share: true,
                use_reference: false,
            },
        ]
    }
}

/// Where input vectors come from.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    Embeddings(&'a EmbeddingStore),
    /// Precomputed vectors keyed by `(video_id, t)`, e.g. rubric features.
    Table {
        name: &'a str,
        rows: &'a HashMap<(String, i64), Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub signals: Vec<Signal>,
    pub ks: Vec<u32>,
    /// Ordered part selections; ignored for table sources.
    pub selections: Vec<Vec<String>>,
    pub variants: Vec<Variant>,
    pub split: SplitKind,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub pooling: LiftPooling,
    pub dump_scores: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    #[serde(with = "crate::stats::json_float")]
    pub auc: f64,
    #[serde(with = "crate::stats::json_float")]
    pub lift: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub test_courses: Vec<String>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub signal: Signal,
    pub k: u32,
    pub selection: String,
    pub variant: String,
    #[serde(with = "crate::stats::json_float")]
    pub auc_mean: f64,
    #[serde(with = "crate::stats::json_float")]
    pub auc_std: f64,
    #[serde(with = "crate::stats::json_float")]
    pub lift_mean: f64,
    #[serde(with = "crate::stats::json_float")]
    pub lift_std: f64,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub cell: String,
    pub seed: u64,
    pub video_id: String,
    pub t: i64,
    pub score: f64,
    pub label: u8,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub reports: Vec<MetricReport>,
    pub scores: Vec<ScoreRecord>,
    pub models: Vec<(String, u64, HeadParams, TrainLog)>,
}

/// Stacks one input row per moment.
pub fn feature_matrix(
    source: FeatureSource<'_>,
    selection: &[String],
    moments: &[Moment],
) -> Result<(Array2<f64>, String), EvalError> {
    match source {
        FeatureSource::Embeddings(store) => {
            let layout = store.layout(selection)?;
            let d = layout.dim();
            let mut data = Vec::with_capacity(moments.len() * d);
            for m in moments {
                let row = match m.embedding_row {
                    Some(r) => r,
                    None => store.row_of(&m.video_id, m.t).ok_or_else(|| EmbedError::MomentNotEmbedded {
                        video_id: m.video_id.clone(),
                        t: m.t,
                    })?,
                };
                store.assemble_row(&layout, row, &mut data)?;
            }
            Ok((Array2::from_shape_vec((moments.len(), d), data).unwrap(), layout.to_string()))
        }
        FeatureSource::Table { name, rows } => {
            let mut d = None;
            let mut data = Vec::new();
            for m in moments {
                let v = rows
                    .get(&(m.video_id.clone(), m.t))
                    .ok_or_else(|| EvalError::MissingFeatures(m.video_id.clone(), m.t))?;
                assert_eq!(*d.get_or_insert(v.len()), v.len(), "feature rows differ in width");
                data.extend_from_slice(v);
            }
            let d = d.unwrap_or(0);
            Ok((
                Array2::from_shape_vec((moments.len(), d), data).unwrap(),
                format!("{name}:{d}"),
            ))
        }
    }
}

fn labels_for(moments: &[Moment], key: LabelKey) -> Result<Vec<u8>, EvalError> {
    moments
        .iter()
        .map(|m| {
            m.label(key)
                .ok_or_else(|| EvalError::MissingLabel(m.video_id.clone(), m.t, key.to_string()))
        })
        .collect()
}

/// Dense per-video group index over a subset of rows.
fn group_index(moments: &[Moment], rows: &[usize]) -> (Vec<usize>, Vec<String>) {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for &i in rows {
        let n = ids.len();
        ids.entry(&moments[i].video_id).or_insert(n);
    }
    let names = {
        let mut v = vec![String::new(); ids.len()];
        for (k, &i) in &ids {
            v[i] = k.to_string();
        }
        v
    };
    (rows.iter().map(|&i| ids[moments[i].video_id.as_str()]).collect(), names)
}

/// Result of training on one split and scoring its full test side.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed_result: SeedResult,
    pub videos: Vec<VideoScores>,
    pub params: HeadParams,
    pub log: TrainLog,
}

/// Trains on the train courses of `plan` and scores every test moment;
/// courses on neither side are unused. Test references are the unweighted
/// mean over each video's moments.
#[allow(clippy::too_many_arguments)]
pub fn run_split(
    x: &Array2<f64>,
    layout: &str,
    moments: &[Moment],
    labels: &[u8],
    plan: &SplitPlan,
    k: u32,
    train_config: &TrainConfig,
    pooling: LiftPooling,
) -> Result<RunResult, EvalError> {
    plan.check_disjoint()?;
    let test_rows: Vec<usize> = (0..moments.len()).filter(|&i| plan.is_test(&moments[i].course_id)).collect();
    let train_rows: Vec<usize> = (0..moments.len())
        .filter(|&i| plan.train.contains(&moments[i].course_id))
        .collect();
    let (train_group, _) = group_index(moments, &train_rows);
    let data = Dataset {
        x: x.select(Axis(0), &train_rows),
        y: train_rows.iter().map(|&i| labels[i]).collect(),
        group: train_group,
        layout: layout.to_string(),
    };
    let mut config = train_config.clone();
    config.reference_prevalence = Some(f64::from(k) / 100.0);
    let (params, log) = train(&data, &config)?;

    let (test_group, names) = group_index(moments, &test_rows);
    let tx = x.select(Axis(0), &test_rows);
    let all: Vec<usize> = (0..test_rows.len()).collect();
    let refs = reference_rows(tx.view(), &test_group, &all, |_| 1.0, names.len());
    let probs = params.predict(&Inputs::new(tx.view(), refs.view(), &test_group));
    let ty: Vec<u8> = test_rows.iter().map(|&i| labels[i]).collect();
    let auc_v = auc(&probs, &ty)?;
    let mut videos: Vec<VideoScores> = names
        .iter()
        .map(|n| VideoScores {
            video_id: n.clone(),
            t: Vec::new(),
            scores: Vec::new(),
            labels: Vec::new(),
        })
        .collect();
    for (j, &i) in test_rows.iter().enumerate() {
        let v = &mut videos[test_group[j]];
        v.t.push(moments[i].t);
        v.scores.push(probs[j]);
        v.labels.push(ty[j]);
    }
    let lift = lift_at_k(&videos, k, pooling)?;
    Ok(RunResult {
        seed_result: SeedResult {
            seed: config.seed,
            auc: auc_v,
            lift,
            n_train: train_rows.len(),
            n_test: test_rows.len(),
            test_courses: plan.test.iter().cloned().collect(),
            best_epoch: log.best_epoch,
        },
        videos,
        params,
        log,
    })
}

/// Runs every (signal, K, selection, variant) cell over all seeds and
/// aggregates mean and sample std per cell.
pub fn run_experiment(
    source: FeatureSource<'_>,
    moments: &[Moment],
    config: &ExperimentConfig,
) -> Result<ExperimentOutput, EvalError> {
    let selections: Vec<Vec<String>> = match source {
        FeatureSource::Embeddings(_) => config.selections.clone(),
        FeatureSource::Table { .. } => vec![Vec::new()],
    };
    let matrices = selections
        .iter()
        .map(|s| feature_matrix(source, s, moments))
        .collect::<Result<Vec<_>, _>>()?;
    let plans = config
        .seeds
        .iter()
        .map(|&s| make_split(moments, &config.split, s))
        .collect::<Result<Vec<_>, _>>()?;

    struct Job {
        signal: Signal,
        k: u32,
        sel: usize,
        variant: usize,
        seed: usize,
    }
    let mut jobs = Vec::new();
    for &signal in &config.signals {
        for &k in &config.ks {
            for sel in 0..selections.len() {
                for variant in 0..config.variants.len() {
                    for seed in 0..config.seeds.len() {
                        jobs.push(Job {
                            signal,
                            k,
                            sel,
                            variant,
                            seed,
                        });
                    }
                }
            }
        }
    }
    let label_sets: BTreeMap<LabelKey, Vec<u8>> = config
        .signals
        .iter()
        .flat_map(|&signal| config.ks.iter().map(move |&k| LabelKey { signal, k }))
        .map(|key| labels_for(moments, key).map(|l| (key, l)))
        .collect::<Result<_, _>>()?;

    let results: Vec<Result<RunResult, EvalError>> = jobs
        .par_iter()
        .map(|j| {
            let (x, layout) = &matrices[j.sel];
            let v = &config.variants[j.variant];
            let mut tc = config.train.clone();
            tc.weight_share = v.weight_share;
            tc.use_reference = v.use_reference;
            tc.seed = config.seeds[j.seed];
            let key = LabelKey { signal: j.signal, k: j.k };
            run_split(x, layout, moments, &label_sets[&key], &plans[j.seed], j.k, &tc, config.pooling)
        })
        .collect();

    let mut out = ExperimentOutput::default();
    // Keyed by (signal, k, selection, variant) indices.
    let mut cells: BTreeMap<[usize; 4], Vec<(usize, RunResult)>> = BTreeMap::new();
    for (j, r) in jobs.iter().zip(results) {
        let si = config.signals.iter().position(|&s| s == j.signal).unwrap();
        let ki = config.ks.iter().position(|&k| k == j.k).unwrap();
        cells.entry([si, ki, j.sel, j.variant]).or_default().push((j.seed, r?));
    }
    for ([si, ki, sel, vi], runs) in cells {
        let signal = config.signals[si];
        let k = config.ks[ki];
        let selection = matrices[sel].1.clone();
        let variant = config.variants[vi].name.clone();
        let cell = format!("{}|{}|{}", LabelKey { signal, k }, selection, variant);
        let aucs: Vec<f64> = runs.iter().map(|(_, r)| r.seed_result.auc).collect();
        let lifts: Vec<f64> = runs.iter().map(|(_, r)| r.seed_result.lift).collect();
        let std = |v: &[f64]| if v.len() > 1 { sample_std(v) } else { 0.0 };
        if config.dump_scores {
            for (_, r) in &runs {
                for v in &r.videos {
                    for i in 0..v.t.len() {
                        out.scores.push(ScoreRecord {
                            cell: cell.clone(),
                            seed: r.seed_result.seed,
                            video_id: v.video_id.clone(),
                            t: v.t[i],
                            score: v.scores[i],
                            label: v.labels[i],
                        });
                    }
                }
            }
        }
        out.reports.push(MetricReport {
            signal,
            k,
            selection,
            variant,
            auc_mean: mean(&aucs),
            auc_std: std(&aucs),
            lift_mean: mean(&lifts),
            lift_std: std(&lifts),
            n_test: runs.iter().map(|(_, r)| r.seed_result.n_test).sum::<usize>() / runs.len(),
            seeds: runs.iter().map(|(_, r)| r.seed_result.seed).collect(),
            per_seed: runs.iter().map(|(_, r)| r.seed_result.clone()).collect(),
        });
        for (_, r) in runs {
            out.models.push((cell.clone(), r.seed_result.seed, r.params, r.log));
        }
    }
    Ok(out)
}

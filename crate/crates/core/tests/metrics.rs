mod support;

use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;
use rand::Rng;
use support::brute_auc;
use vidpeak_core::embedstore::{open_manifest, ManifestWriter};
use vidpeak_core::eval::*;
use vidpeak_core::model::TrainConfig;
use vidpeak_core::rng::keyed_rng;
use vidpeak_core::signals::{LabelKey, Moment, Signal};
use vidpeak_core::synth::{generate, SynthConfig};

fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..=200).prop_flat_map(|n| {
        (
            // A coarse grid produces plenty of ties.
            prop::collection::vec((0u32..20).prop_map(|v| f64::from(v) / 7.0), n),
            prop::collection::vec(0u8..=1, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn auc_matches_pairwise_count((s, mut y) in scores_and_labels()) {
        y[0] = 1;
        y[1] = 0;
        prop_assert_eq!(auc(&s, &y).unwrap(), brute_auc(&s, &y));
    }
}

proptest! {
    #[test]
    fn auc_invariant_under_increasing_transform((s, mut y) in scores_and_labels(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        y[0] = 1;
        y[1] = 0;
        let t: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
        prop_assert_eq!(auc(&s, &y).unwrap(), auc(&t, &y).unwrap());
    }

    #[test]
    fn lift_with_perfect_scores_is_bounded(
        videos in prop::collection::vec(prop::collection::vec(0u8..=1, 1..80), 1..6),
        k in prop::sample::select(vec![5u32, 10, 20]),
    ) {
        let vs: Vec<VideoScores> = videos
            .iter()
            .enumerate()
            .map(|(i, labels)| VideoScores {
                video_id: format!("v{i}"),
                t: (0..labels.len() as i64).collect(),
                scores: labels.iter().map(|&l| f64::from(l)).collect(),
                labels: labels.clone(),
            })
            .collect();
        let lift = lift_at_k(&vs, k, LiftPooling::Pooled).unwrap();
        let (mut hits, mut selected) = (0usize, 0usize);
        for l in &videos {
            let m = top_k_count(l.len(), k);
            hits += l.iter().filter(|&&v| v == 1).count().min(m);
            selected += m;
        }
        let achievable = hits as f64 / selected as f64;
        prop_assert!((lift - achievable.min(1.0) * 100.0 / f64::from(k)).abs() < 1e-12);
        prop_assert!(lift <= 100.0 / f64::from(k) + 1e-12);
    }

    #[test]
    fn splits_never_leak(sizes in prop::collection::vec((1usize..40, 0usize..3), 2..15), seed in any::<u64>()) {
        let mut moments = Vec::new();
        for (c, &(n, f)) in sizes.iter().enumerate() {
            moments.extend(course(&format!("c{c:02}"), &format!("f{f}"), n));
        }
        let plan = make_split(&moments, &SplitKind::default(), seed).unwrap();
        prop_assert!(plan.check_disjoint().is_ok());
        prop_assert!(!plan.test.is_empty() && !plan.train.is_empty());
        prop_assert_eq!(plan.test.len() + plan.train.len(), sizes.len());
        let n_test = moments.iter().filter(|m| plan.is_test(&m.course_id)).count();
        // The test side only stops growing once it reaches the target.
        prop_assert!(n_test as f64 >= 0.1 * moments.len() as f64 || plan.train.len() == 1);
    }
}

#[test]
fn perfect_scores_with_distinct_labels_lift_exactly_ten() {
    let labels: Vec<u8> = (0..200).map(|i| u8::from(i % 10 == 0)).collect();
    let v = VideoScores {
        video_id: "v".into(),
        t: (0..200).collect(),
        scores: (0..200).map(|i| if i % 10 == 0 { 1.0 + f64::from(i) } else { -f64::from(i) }).collect(),
        labels,
    };
    assert_eq!(lift_at_k(&[v], 10, LiftPooling::Pooled).unwrap(), 10.0);
}

#[test]
fn random_scores_lift_one_on_average() {
    for k in [5, 10] {
        let m = support::random_lift_mean(k, 1000, 11);
        assert!((m - 1.0).abs() <= 0.1, "K={k}: mean lift {m}");
    }
}

fn course(id: &str, field: &str, n: usize) -> Vec<Moment> {
    (0..n)
        .map(|t| Moment {
            video_id: format!("{id}-v"),
            t: t as i64,
            labels: BTreeMap::new(),
            embedding_row: None,
            field: field.into(),
            course_id: id.into(),
        })
        .collect()
}

#[test]
fn each_course_is_held_out_one_time_in_ten() {
    let moments: Vec<Moment> = (0..10).flat_map(|c| course(&format!("c{c}"), "f", 30)).collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for seed in 0..100 {
        let plan = make_split(&moments, &SplitKind::default(), seed).unwrap();
        assert_eq!(plan.test.len(), 1);
        for c in plan.test {
            *counts.entry(c).or_default() += 1;
        }
    }
    assert_eq!(counts.values().sum::<usize>(), 100);
    for (c, n) in counts {
        let f = n as f64 / 100.0;
        assert!((f - 0.1).abs() <= 0.05, "{c}: {f}");
    }
}

#[test]
fn field_holdout_takes_exactly_the_field() {
    let corpus = generate(&SynthConfig::small(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = support::process(&corpus, dir.path());
    let plan = make_split(&p.moments, &SplitKind::FieldHoldout { field: "Mathematics".into() }, 0).unwrap();
    for m in &p.moments {
        assert_eq!(plan.is_test(&m.course_id), m.field == "Mathematics");
    }
}

/// Small corpora give a few hundred balanced rows; smaller batches and a
/// larger step keep the number of updates meaningful.
fn quick_train(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: 30,
        batch_size: 64,
        lr: 1e-3,
        hidden: 32,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn leaked_label_part_is_learned() {
    let corpus = generate(&SynthConfig::small(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = support::process(&corpus, dir.path());
    let key = LabelKey {
        signal: Signal::PausedAt,
        k: 10,
    };
    // Re-emit the transcript part next to a part holding the label itself.
    let dim = p.store.part("transcript").unwrap().dim;
    let mut w = ManifestWriter::create(dir.path().join("leak"), &[("transcript".into(), dim), ("oracle".into(), 4)]).unwrap();
    let mut rng = keyed_rng(0, "leak-noise", &[]);
    for m in &p.moments {
        let row = p.store.row_of(&m.video_id, m.t).unwrap();
        let y = f32::from(m.label(key).unwrap());
        let leak: Vec<f32> = (0..4).map(|_| 2.0 * y - 1.0 + 0.05 * (rng.random::<f32>() - 0.5)).collect();
        w.push(&m.video_id, m.t, &[p.store.part_row("transcript", row).unwrap(), &leak]).unwrap();
    }
    let store = open_manifest(w.finish().unwrap()).unwrap();
    let sel = vec!["transcript".to_string(), "oracle".to_string()];
    let moments: Vec<Moment> = p.moments.iter().cloned().map(|mut m| {
        m.embedding_row = None;
        m
    }).collect();
    let (x, layout) = feature_matrix(FeatureSource::Embeddings(&store), &sel, &moments).unwrap();
    let labels: Vec<u8> = moments.iter().map(|m| m.label(key).unwrap()).collect();
    let plan = make_split(&moments, &SplitKind::default(), 1).unwrap();
    let r = run_split(&x, &layout, &moments, &labels, &plan, 10, &quick_train(1), LiftPooling::Pooled).unwrap();
    assert!(r.seed_result.auc >= 0.99, "{:?}", r.seed_result);
}

#[test]
fn constant_embeddings_score_at_chance() {
    let corpus = generate(&SynthConfig::small(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = support::process(&corpus, dir.path());
    let rows: HashMap<(String, i64), Vec<f64>> =
        p.moments.iter().map(|m| ((m.video_id.clone(), m.t), vec![0.25; 8])).collect();
    let config = ExperimentConfig {
        signals: vec![Signal::PausedAt],
        ks: vec![10],
        selections: Vec::new(),
        variants: vec![Variant::full()],
        split: SplitKind::default(),
        seeds: (0..5).collect(),
        train: quick_train(0),
        pooling: LiftPooling::Pooled,
        dump_scores: false,
    };
    let out = run_experiment(FeatureSource::Table { name: "constant", rows: &rows }, &p.moments, &config).unwrap();
    let r = &out.reports[0];
    assert_eq!(r.per_seed.len(), 5);
    for s in &r.per_seed {
        assert!((s.auc - 0.5).abs() <= 0.02, "{s:?}");
    }
}

#[test]
fn default_evaluation_grid_reports_every_cell() {
    let corpus = generate(&SynthConfig::small(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = support::process(&corpus, dir.path());
    let parts: Vec<String> = p.store.manifest.parts.iter().map(|s| s.name.clone()).collect();
    let config = ExperimentConfig {
        signals: Signal::ALL.to_vec(),
        ks: vec![5, 10],
        selections: vec![parts],
        variants: vec![Variant::full()],
        split: SplitKind::default(),
        seeds: vec![0, 1, 2],
        train: TrainConfig {
            max_epochs: 5,
            ..quick_train(0)
        },
        pooling: LiftPooling::Pooled,
        dump_scores: true,
    };
    let out = run_experiment(FeatureSource::Embeddings(&p.store), &p.moments, &config).unwrap();
    assert_eq!(out.reports.len(), 8);
    let cells: std::collections::BTreeSet<(Signal, u32)> = out.reports.iter().map(|r| (r.signal, r.k)).collect();
    assert_eq!(cells.len(), 8);
    for r in &out.reports {
        assert_eq!(r.per_seed.len(), 3);
        assert!(r.auc_std.is_finite() && r.auc_std > 0.0, "{r:?}");
        assert!(r.lift_std.is_finite());
    }
    assert!(!out.scores.is_empty());
    let again = run_experiment(FeatureSource::Embeddings(&p.store), &p.moments, &config).unwrap();
    assert_eq!(again.reports, out.reports);
}

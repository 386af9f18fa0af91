mod support;

use ndarray::Array2;
use rand::Rng;
use support::*;
use vidpeak_core::model::{ActivationLayer, Inputs};
use vidpeak_core::rng::keyed_rng;
use vidpeak_core::tcav::*;

fn layer() -> ActivationLayer {
    ActivationLayer::InputPart("a".into())
}

fn cav(direction: Vec<f64>) -> Cav {
    Cav {
        layer: layer(),
        concept: "fixed".into(),
        direction,
        kind: CavKind::BinaryLogistic,
        l2: 1.0,
        fit_quality: 1.0,
        converged: true,
    }
}

#[test]
fn weight_aligned_concept_scores_one_and_anti_aligned_zero() {
    let config = TcavConfig::default();
    for seed in 0..3 {
        let aligned = linear_construction(true, seed).run(&config);
        assert_eq!(aligned.scores.len(), 25, "{:?}", aligned.failures);
        assert!(aligned.scores.iter().all(|&s| s == 1.0), "{:?}", aligned.scores);
        assert!(aligned.significant_bonferroni);
        let anti = linear_construction(false, seed).run(&config);
        assert!(anti.scores.iter().all(|&s| s == 0.0), "{:?}", anti.scores);
        assert!(anti.significant_bonferroni);
    }
}

#[test]
fn exact_directions_on_a_linear_head() {
    let w = vec![0.4, -0.2, 0.1, 0.3];
    let model = linear_head(&w, "a:4");
    let x = gaussian(50, 4, 3);
    let refs = Array2::zeros((1, 4));
    let idx = vec![0; 50];
    let inp = Inputs::new(x.view(), refs.view(), &idx);
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let along: Vec<f64> = w.iter().map(|v| v / norm).collect();
    let against: Vec<f64> = along.iter().map(|v| -v).collect();
    // Orthogonal to w.
    let ortho = vec![0.2, 0.4, 0.0, 0.0];
    assert_eq!(tcav_score(&model, &inp, &cav(along), &cav(ortho.clone())).unwrap(), 1.0);
    assert_eq!(tcav_score(&model, &inp, &cav(against), &cav(ortho.clone())).unwrap(), 0.0);
    let d = directional_derivative(&model, &x.row(0).to_vec(), &[0.0; 4], &cav(ortho)).unwrap();
    assert!(d.abs() < 1e-10, "{d}");
}

#[test]
fn orthogonal_decoy_is_not_significant() {
    for seed in 0..5 {
        let r = decoy_construction(seed).run(&TcavConfig::default());
        assert_eq!(r.scores.len(), 25, "{:?}", r.failures);
        assert!((0.4..=0.6).contains(&r.mean), "seed {seed}: {r:?}");
        assert!(!r.significant_bonferroni, "seed {seed}: {r:?}");
        assert!(r.cav_quality > 0.95, "{r:?}");
    }
}

#[test]
fn cavs_recover_planted_normals() {
    for seed in 0..20 {
        let c = cav_recovery_cosine(seed);
        assert!(c >= 0.95, "seed {seed}: cosine {c}");
    }
}

#[test]
fn random_orthogonal_pairs_on_a_symmetric_model_split_evenly() {
    let d = 8;
    let model = symmetric_model(d);
    let mut rng = keyed_rng(5, "orthogonal-pairs", &[]);
    let mut scores = Vec::new();
    for rep in 0..200 {
        let x = gaussian(200, d, 1000 + rep);
        let refs = Array2::zeros((1, d));
        let idx = vec![0; 200];
        let inp = Inputs::new(x.view(), refs.view(), &idx);
        let a: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let mut b: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let p = dot(&a, &b) / dot(&a, &a);
        for (bi, ai) in b.iter_mut().zip(&a) {
            *bi -= p * ai;
        }
        assert!(dot(&a, &b).abs() < 1e-10);
        scores.push(tcav_score(&model, &inp, &cav(a), &cav(b)).unwrap());
    }
    let m = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!((m - 0.5).abs() <= 0.05, "{m}");
}

#[test]
fn scores_ignore_direction_and_logit_scale() {
    let c = decoy_construction(7);
    let inp = Inputs::new(c.x_plus.view(), c.refs.view(), &c.ref_idx);
    let a = vec![0.3, -0.1, 0.2, 0.5, 0.0, 0.1, -0.4, 0.2, 0.1, 0.0];
    let b = vec![-0.2, 0.4, 0.1, 0.0, 0.3, -0.1, 0.2, 0.0, 0.1, 0.3];
    let base = tcav_score(&c.model, &inp, &cav(a.clone()), &cav(b.clone())).unwrap();
    let mut scaled = c.model.clone();
    let n = scaled.theta.len();
    // Multiplying the output layer scales every logit gradient.
    let h = scaled.shape.hidden;
    for v in &mut scaled.theta[n - h - 1..] {
        *v *= 3.5;
    }
    let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
    let b2: Vec<f64> = b.iter().map(|v| 2.0 * v).collect();
    assert_eq!(tcav_score(&scaled, &inp, &cav(a2), &cav(b2)).unwrap(), base);
}

#[test]
fn single_class_concepts_are_degenerate() {
    let acts = gaussian(40, 4, 1);
    let err = train_cav(acts.view(), &[1.0; 40], CavKind::BinaryLogistic, &DEFAULT_L2_GRID, 0, layer(), "flat").unwrap_err();
    assert!(matches!(err, TcavError::DegenerateConcept(..)), "{err}");
    let few = train_cav(acts.slice(ndarray::s![..5, ..]), &[0.0, 1.0, 0.0, 1.0, 1.0], CavKind::BinaryLogistic, &DEFAULT_L2_GRID, 0, layer(), "few");
    assert!(matches!(few, Err(TcavError::DegenerateConcept(..))));
}

#[test]
fn ordinal_concepts_fit_a_linear_direction() {
    let normal = vec![1.0, -2.0, 0.5, 0.0, 1.0];
    let acts = gaussian(300, 5, 4);
    let noise = gaussian(300, 1, 5);
    let values: Vec<f64> = acts
        .rows()
        .into_iter()
        .zip(noise.column(0))
        .map(|(r, e)| dot(&r.to_vec(), &normal) + 0.3 * e)
        .collect();
    let c = train_cav(acts.view(), &values, CavKind::OrdinalLinear, &DEFAULT_L2_GRID, 0, layer(), "ordinal").unwrap();
    assert!(cosine(&c.direction, &normal) >= 0.95, "{c:?}");
    let levels: Vec<f64> = values.iter().map(|v| (3.0 + v).round().clamp(1.0, 5.0)).collect();
    let c = train_cav(acts.view(), &levels, CavKind::OrdinalLinear, &DEFAULT_L2_GRID, 0, layer(), "levels").unwrap();
    assert!(cosine(&c.direction, &normal) > 0.9, "{c:?}");
    let norm = dot(&c.direction, &c.direction).sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
}

#[test]
fn tcav_is_reproducible() {
    let c = decoy_construction(2);
    let config = TcavConfig {
        repetitions: 6,
        ..TcavConfig::default()
    };
    assert_eq!(c.run(&config), c.run(&config));
}

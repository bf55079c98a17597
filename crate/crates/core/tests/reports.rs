use lpips_core::attack::{AttackSpec, AttackTarget};
use lpips_core::backbone::{Backbone, BackboneConfig};
use lpips_core::checkpoint::{load_checkpoint, save_checkpoint, Container, CHECKPOINT_VERSION};
use lpips_core::datasets::{synth_base_images, synth_generate, synth_labeled, Category, SynthOptions};
use lpips_core::metric::MetricModel;
use lpips_core::perceptual::{
    clean_accuracy, train_classifier, ClassifierTrainConfig, ConvClassifier, PerceptualAttackKind,
    PerceptualAttackSpec,
};
use lpips_core::report::{
    distance_histogram, eval_2afc, robust_accuracy_report, two_afc_credit, AttackCondition, EvalRequest,
    ReportMetadata, HISTOGRAM_BINS,
};
use lpips_core::Image;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> MetricModel {
    MetricModel::new(Backbone::random(BackboneConfig::tiny_net(seed), seed).unwrap(), seed)
}

#[test]
fn credit_examples() {
    assert_eq!(two_afc_credit(0.1, 0.9, 0.0), 1.0);
    assert_eq!(two_afc_credit(0.9, 0.1, 0.0), 0.0);
    assert_eq!(two_afc_credit(0.3, 0.3, 0.7), 0.5);
    assert_eq!(two_afc_credit(0.3, 0.3 + 1e-13, 0.7), 0.5);
}

#[test]
fn zero_radius_attack_matches_clean_evaluation() {
    let bases = synth_base_images(4, 16, 3, 1);
    let data = synth_generate(&bases, 12, &SynthOptions { seed: 2, ..Default::default() }).unwrap();
    let m = tiny(3);
    let request = EvalRequest {
        categories: vec![Category::Synthetic, Category::Color],
        clean: true,
        attacks: vec![AttackCondition {
            target: AttackTarget::X0,
            spec: AttackSpec::linf(0.0),
        }],
    };
    let r = eval_2afc(&m, &data, &request, ReportMetadata::default()).unwrap();
    let clean = r.cell(Category::Synthetic, "clean").unwrap();
    let attacked = r.cell(Category::Synthetic, "linf/x0").unwrap();
    assert_eq!(clean.score, attacked.score);
    assert_eq!(clean.triplets, 12);
    assert_eq!(r.cell(Category::Color, "clean").unwrap().score, None);
    assert!(r.to_csv().starts_with("category,condition,epsilon,triplets,score\n"));
}

#[test]
fn attack_lowers_the_score_of_an_untuned_metric() {
    let bases = synth_base_images(4, 16, 3, 4);
    let data = synth_generate(&bases, 20, &SynthOptions { seed: 5, ..Default::default() }).unwrap();
    let request = EvalRequest {
        attacks: vec![AttackCondition {
            target: AttackTarget::Both,
            spec: AttackSpec::linf(8.0 / 255.0).with_steps(10),
        }],
        ..EvalRequest::default()
    };
    let r = eval_2afc(&tiny(6), &data, &request, ReportMetadata::default()).unwrap();
    let clean = r.cell(Category::Synthetic, "clean").unwrap().score.unwrap();
    let attacked = r.cell(Category::Synthetic, "linf/both").unwrap().score.unwrap();
    assert!(attacked < clean, "{attacked} vs {clean}");
}

#[test]
fn zero_radius_histogram_is_all_zero() {
    let images = synth_base_images(5, 16, 3, 7);
    let (nat, rob) = (tiny(8), tiny(9));
    let craft = |_: usize, x: &Image| Ok(x.clone());
    let h = distance_histogram(&nat, &rob, &images, &craft, ReportMetadata::default()).unwrap();
    assert_eq!(h.bin_edges.len(), HISTOGRAM_BINS + 1);
    assert_eq!(h.natural.counts[0], 5);
    assert_eq!(h.robust.counts[0], 5);
    assert_eq!(h.natural.fraction_above_threshold, 0.0);
    assert_eq!(h.robust.fraction_above_threshold, 0.0);
    assert_eq!(h.threshold, 0.5);
    assert!(distance_histogram(&nat, &rob, &[], &craft, ReportMetadata::default()).is_err());
}

#[test]
fn histogram_counts_cover_every_image() {
    let images = synth_base_images(6, 16, 3, 10);
    let (nat, rob) = (tiny(11), tiny(12));
    let craft = lpips_core::report::opt_crafter(&nat, AttackSpec::linf(0.05).with_steps(5));
    let h = distance_histogram(&nat, &rob, &images, &craft, ReportMetadata::default()).unwrap();
    assert_eq!(h.natural.counts.iter().sum::<usize>(), 6);
    assert_eq!(h.robust.counts.iter().sum::<usize>(), 6);
    let max = h.distances.iter().flat_map(|&(a, b)| [a, b]).fold(0.0, f64::max);
    assert_eq!(*h.bin_edges.last().unwrap(), max);
}

#[test]
fn zero_bound_robust_matrix_equals_clean_accuracy() {
    let train = synth_labeled(6, 16, 13);
    let mut clf = ConvClassifier::small(16, 3, 10, 14).unwrap();
    train_classifier(&mut clf, &train.items, &ClassifierTrainConfig { epochs: 3, ..Default::default() }).unwrap();
    let test = synth_labeled(1, 16, 15);
    let spec = PerceptualAttackSpec::default().with_epsilon(0.0);
    let r = robust_accuracy_report(&clf, &tiny(16), &tiny(17), &test.items, &spec, ReportMetadata::default()).unwrap();
    assert_eq!(r.cells.len(), 4);
    for c in &r.cells {
        assert_eq!(c.accuracy, r.clean_accuracy);
    }
    assert_eq!(r.outcomes_jsonl().unwrap().lines().count(), 4 * test.items.len());
}

#[test]
fn undefended_classifier_loses_accuracy_under_every_attack() {
    let train = synth_labeled(20, 16, 18);
    let mut clf = ConvClassifier::small(16, 3, 10, 19).unwrap();
    train_classifier(&mut clf, &train.items, &ClassifierTrainConfig::default()).unwrap();
    let test = synth_labeled(3, 16, 20);
    let clean = clean_accuracy(&clf, &test.items).unwrap();
    let spec = PerceptualAttackSpec {
        steps: 5,
        outer_iters: 3,
        inner_iters: 5,
        ..PerceptualAttackSpec::default()
    };
    let r = robust_accuracy_report(&clf, &tiny(21), &tiny(22), &test.items, &spec, ReportMetadata::default()).unwrap();
    assert!(clean > 0.0);
    for kind in [PerceptualAttackKind::Ppgd, PerceptualAttackKind::Lpa] {
        for metric in ["natural", "robust"] {
            let acc = r.cell(kind, metric).unwrap().accuracy;
            assert!(acc < clean, "{kind:?}/{metric}: {acc} vs clean {clean}");
        }
    }
}

#[test]
fn checkpoint_round_trip_preserves_distances() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = tiny(23);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    m.weights.layers.iter_mut().flatten().for_each(|w| *w = rng.random_range(0.0..3.0));
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let again = dir.path().join("b.ckpt");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    for _ in 0..10 {
        let x = Image::new(16, 16, 3, (0..768).map(|_| rng.random()).collect()).unwrap();
        let y = Image::new(16, 16, 3, (0..768).map(|_| rng.random()).collect()).unwrap();
        assert_eq!(m.distance(&x, &y).unwrap().to_bits(), loaded.distance(&x, &y).unwrap().to_bits());
    }
}

#[test]
fn wrong_version_names_both_versions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&tiny(25), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 6).to_le_bytes());
    let err = Container::decode(&bytes).unwrap_err().to_string();
    assert!(err.contains(&(CHECKPOINT_VERSION + 6).to_string()), "{err}");
    assert!(err.contains(&CHECKPOINT_VERSION.to_string()), "{err}");
}

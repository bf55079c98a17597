use lpips_core::attack::AttackSpec;
use lpips_core::backbone::{Backbone, BackboneConfig};
use lpips_core::datasets::{synth_base_images, synth_generate, SynthOptions, TwoAFCTriplet};
use lpips_core::metric::{calibration_forward, Flavor, MetricModel};
use lpips_core::trainer::{adversarial_tune, tune_metric_clean, TrainConfig};

fn tiny(seed: u64) -> MetricModel {
    MetricModel::new(Backbone::random(BackboneConfig::tiny_net(seed), seed).unwrap(), seed)
}

fn fixture(n: usize, size: usize, seed: u64) -> Vec<TwoAFCTriplet> {
    let bases = synth_base_images(16, size, 3, seed);
    synth_generate(&bases, n, &SynthOptions { seed: seed + 1, ..Default::default() }).unwrap()
}

fn quick(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        learning_rate: 1e-2,
        seed,
        holdout_fraction: 0.25,
        ..Default::default()
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let m = tiny(1);
    let data = fixture(8, 8, 2);
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: 0.0,
        batch_size: 8,
        holdout_fraction: 0.0,
        ..Default::default()
    };
    let (out, report) = tune_metric_clean(&m, &data, &cfg).unwrap();
    assert_eq!(out.weights, m.weights);
    assert_eq!(out.head, m.head);
    assert_eq!(report.epoch_loss.len(), 1);
}

#[test]
fn unfrozen_backbone_is_rejected() {
    let mut config = BackboneConfig::tiny_net(3);
    config.frozen = false;
    let m = MetricModel::new(Backbone::random(config, 3).unwrap(), 3);
    assert!(tune_metric_clean(&m, &fixture(4, 8, 4), &quick(0)).is_err());
}

#[test]
fn empty_data_is_rejected() {
    assert!(tune_metric_clean(&tiny(5), &[], &quick(0)).is_err());
}

#[test]
fn weights_stay_nonnegative() {
    let (out, _) = tune_metric_clean(&tiny(6), &fixture(40, 8, 7), &TrainConfig { learning_rate: 0.5, ..quick(8) }).unwrap();
    assert!(out.weights.min() >= 0.0);
}

#[test]
fn zero_radius_adversary_reduces_to_clean_tuning() {
    let m = tiny(9);
    let data = fixture(24, 8, 10);
    let cfg = quick(11);
    let (clean, _) = tune_metric_clean(&m, &data, &cfg).unwrap();
    let adv_cfg = TrainConfig {
        adversarial: true,
        inner_attack: Some(AttackSpec::linf(0.0)),
        ..cfg
    };
    let (adv, _) = adversarial_tune(&m, &data, &adv_cfg).unwrap();
    assert_eq!(adv.weights, clean.weights);
    assert_eq!(adv.head, clean.head);
    assert_eq!(adv.flavor, Flavor::RobustLinf);
    assert_eq!(adv.provenance.entries.len(), clean.provenance.entries.len());
}

#[test]
fn same_seed_same_model() {
    let m = tiny(12);
    let data = fixture(24, 8, 13);
    let cfg = TrainConfig {
        adversarial: true,
        inner_attack: Some(AttackSpec::linf(8.0 / 255.0).with_steps(2)),
        holdout_attack_limit: 3,
        eval_attack_steps: 2,
        ..quick(14)
    };
    let (a, ra) = adversarial_tune(&m, &data, &cfg).unwrap();
    let (b, rb) = adversarial_tune(&m, &data, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.epoch_loss, rb.epoch_loss);
    assert_eq!(ra.holdout_attacked_2afc, rb.holdout_attacked_2afc);
}

#[test]
fn separable_fixture_is_learned() {
    let data = fixture(200, 16, 15);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        learning_rate: 1e-2,
        seed: 16,
        holdout_fraction: 0.2,
        ..Default::default()
    };
    let (m, report) = tune_metric_clean(&tiny(17), &data, &cfg).unwrap();
    let last = *report.holdout_clean_2afc.last().unwrap();
    assert!(last >= 90.0, "holdout 2AFC {last}");
    assert!(report.epoch_loss.last().unwrap() < &report.initial_loss);
    assert_eq!(report.holdout_triplets, 40);
    assert_eq!(report.train_triplets, 160);
    assert!(calibration_forward(&m.head, 1.0, 0.1) > 0.5);
    assert!(calibration_forward(&m.head, 0.1, 1.0) < 0.5);
}

#[test]
fn adversarial_flavor_follows_the_inner_norm() {
    let cfg = TrainConfig {
        epochs: 1,
        adversarial: true,
        inner_attack: Some(AttackSpec::l2(0.1).with_steps(1)),
        holdout_fraction: 0.0,
        ..quick(18)
    };
    let (m, report) = adversarial_tune(&tiny(19), &fixture(8, 8, 20), &cfg).unwrap();
    assert_eq!(m.flavor, Flavor::RobustL2);
    assert!(report.holdout_attacked_2afc.is_empty() || report.holdout_triplets == 0);
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        checkpoint_every: Some(1),
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..quick(21)
    };
    let (m, report) = tune_metric_clean(&tiny(22), &fixture(8, 8, 23), &cfg).unwrap();
    let saved = report.final_checkpoint.expect("final checkpoint path");
    assert_eq!(lpips_core::checkpoint::load_checkpoint(&saved).unwrap(), m);
    assert!(std::fs::read_dir(dir.path()).unwrap().count() >= 2);
}

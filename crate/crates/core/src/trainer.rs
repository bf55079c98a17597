//! Tuning of the channel weights and calibration head on 2AFC triplets,
//! either on clean triplets or against an inner PGD adversary.
//!
//! The backbone never changes, so each triplet is reduced to two
//! [`DistanceProfile`]s and the distances become `sum w^2 * profile`.
//! Adversarial tuning recomputes the profile of the perturbed side(s) after
//! every inner attack.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_2afc_triplet, AttackSpec, AttackTarget, Norm};
use crate::checkpoint::save_checkpoint;
use crate::datasets::TwoAFCTriplet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metric::{
    calibration_forward, head_logit, DistanceProfile, Flavor, MetricModel, MetricWeights,
    ProvenanceEntry,
};
pub use crate::metric::project_weights_nonneg;
use crate::optim::{Optimizer, OptimizerKind};
use crate::report::two_afc_credit;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Halve the rate at one and two thirds of the run.
    #[default]
    ThirdsHalving,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub optimizer: OptimizerKind,
    pub adversarial: bool,
    pub inner_attack: Option<AttackSpec>,
    /// Side(s) perturbed during adversarial tuning. `x1` and `both` are
    /// extensions beyond perturbing `x0` alone.
    pub attack_target: AttackTarget,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (requires `checkpoint_dir`).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub holdout_fraction: f64,
    /// Holdout triplets attacked when measuring under-attack 2AFC.
    pub holdout_attack_limit: usize,
    /// PGD steps of the holdout evaluation attack.
    pub eval_attack_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-4,
            schedule: LrSchedule::default(),
            optimizer: OptimizerKind::default(),
            adversarial: false,
            inner_attack: None,
            attack_target: AttackTarget::X0,
            seed: 0,
            checkpoint_every: None,
            checkpoint_dir: None,
            holdout_fraction: 0.2,
            holdout_attack_limit: 50,
            eval_attack_steps: crate::attack::DEFAULT_STEPS,
        }
    }
}

/// Inner PGD steps used during adversarial tuning.
pub const INNER_ATTACK_STEPS: usize = 10;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate must be finite and nonnegative");
        }
        if self.adversarial != self.inner_attack.is_some() {
            return bad("an inner attack is required exactly when adversarial tuning is on");
        }
        if let Some(a) = &self.inner_attack {
            a.validate()?;
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout fraction must lie in [0, 1)");
        }
        if self.checkpoint_every.is_some() && self.checkpoint_dir.is_none() {
            return bad("checkpoint cadence needs a checkpoint directory");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::ThirdsHalving => {
                let third = (3 * epoch) / self.epochs;
                self.learning_rate * 0.5f64.powi(third.min(2) as i32)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    /// Mean training loss before the first update.
    pub initial_loss: f64,
    pub epoch_loss: Vec<f64>,
    /// Holdout 2AFC (x100) after each epoch.
    pub holdout_clean_2afc: Vec<f64>,
    /// Holdout 2AFC (x100) under a full-strength attack after each epoch;
    /// empty for clean tuning.
    pub holdout_attacked_2afc: Vec<f64>,
    pub train_triplets: usize,
    pub holdout_triplets: usize,
    pub wall_clock_seconds: f64,
    pub final_checkpoint: Option<PathBuf>,
}

/// Tunes on clean triplets.
pub fn tune_metric_clean(
    model: &MetricModel,
    data: &[TwoAFCTriplet],
    cfg: &TrainConfig,
) -> Result<(MetricModel, TrainReport)> {
    if cfg.adversarial {
        return Err(Error::InvalidArgument(
            "clean tuning got an adversarial configuration".into(),
        ));
    }
    train(model, data, cfg)
}

/// Tunes against an inner PGD adversary; the resulting flavor follows the
/// inner attack's norm.
pub fn adversarial_tune(
    model: &MetricModel,
    data: &[TwoAFCTriplet],
    cfg: &TrainConfig,
) -> Result<(MetricModel, TrainReport)> {
    if !cfg.adversarial {
        return Err(Error::InvalidArgument(
            "adversarial tuning needs `adversarial = true` and an inner attack".into(),
        ));
    }
    train(model, data, cfg)
}

struct Prepared {
    profiles: [DistanceProfile; 2],
    h: f64,
}

fn prepare(model: &MetricModel, t: &TwoAFCTriplet) -> Result<Prepared> {
    t.validate()?;
    let fx = model.features(&t.x)?;
    Ok(Prepared {
        profiles: [
            model.profile(&fx, &model.features(&t.x0)?),
            model.profile(&fx, &model.features(&t.x1)?),
        ],
        h: t.h,
    })
}

/// Loss and gradients (weights first, then head) for one triplet.
fn triplet_loss(
    weights: &MetricWeights,
    head: &[Tensor],
    profiles: &[DistanceProfile; 2],
    h: f64,
) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let w: Vec<Var> = weights.to_tensors().into_iter().map(|t| g.param(t)).collect();
    let hp: Vec<Var> = head.iter().map(|t| g.param(t.clone())).collect();
    let mut d = [None, None];
    for (k, p) in profiles.iter().enumerate() {
        let mut total: Option<Var> = None;
        for (wj, pj) in w.iter().zip(p.to_tensors()) {
            let pj = g.constant(pj);
            let wp = g.mul(*wj, pj);
            let wwp = g.mul(*wj, wp);
            let term = g.sum(wwp);
            total = Some(match total {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        d[k] = total;
    }
    let z = head_logit(&mut g, d[0].expect("layers"), d[1].expect("layers"), &hp);
    let loss = g.bce_logits(z, h);
    let grads = g.backward(loss);
    let value = g.value(loss).item();
    (value, w.iter().chain(&hp).map(|v| grads.wrt(*v)).collect())
}

fn mean_loss(model: &MetricModel, items: &[Prepared]) -> f64 {
    items
        .iter()
        .map(|p| triplet_loss(&model.weights, &model.head.params, &p.profiles, p.h).0)
        .sum::<f64>()
        / items.len() as f64
}

fn clean_2afc(model: &MetricModel, items: &[Prepared]) -> f64 {
    if items.is_empty() {
        return f64::NAN;
    }
    100.0
        * items
            .iter()
            .map(|p| {
                let d0 = p.profiles[0].distance(&model.weights);
                let d1 = p.profiles[1].distance(&model.weights);
                two_afc_credit(d0, d1, p.h)
            })
            .sum::<f64>()
        / items.len() as f64
}

fn attacked_2afc(
    model: &MetricModel,
    triplets: &[&TwoAFCTriplet],
    target: AttackTarget,
    spec: &AttackSpec,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, t) in triplets.iter().enumerate() {
        let s = spec.clone().with_seed(spec.seed ^ i as u64);
        let (adv, _) = attack_2afc_triplet(model, t, target, &s)?;
        let d0 = model.distance(&adv.x, &adv.x0)?;
        let d1 = model.distance(&adv.x, &adv.x1)?;
        total += two_afc_credit(d0, d1, adv.h);
    }
    Ok(100.0 * total / triplets.len().max(1) as f64)
}

fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x401d));
    let holdout = ((n as f64) * fraction).floor() as usize;
    let holdout = holdout.min(n.saturating_sub(1));
    let train = idx.split_off(holdout);
    (train, idx)
}

fn train(
    model: &MetricModel,
    data: &[TwoAFCTriplet],
    cfg: &TrainConfig,
) -> Result<(MetricModel, TrainReport)> {
    cfg.validate()?;
    if !model.backbone.config().frozen {
        return Err(Error::InvalidArgument(
            "metric tuning requires a frozen backbone".into(),
        ));
    }
    model.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("no triplets to tune on".into()));
    }
    let start = Instant::now();
    let (train_idx, holdout_idx) = split_indices(data.len(), cfg.holdout_fraction, cfg.seed);
    let train_items: Vec<Prepared> = train_idx
        .iter()
        .map(|&i| prepare(model, &data[i]))
        .collect::<Result<_>>()?;
    let holdout_items: Vec<Prepared> = holdout_idx
        .iter()
        .map(|&i| prepare(model, &data[i]))
        .collect::<Result<_>>()?;
    let holdout_attack_set: Vec<&TwoAFCTriplet> = holdout_idx
        .iter()
        .take(cfg.holdout_attack_limit)
        .map(|&i| &data[i])
        .collect();

    let mut model = model.clone();
    let mut params: Vec<Tensor> = model.weights.to_tensors();
    let layers = params.len();
    params.extend(model.head.params.iter().cloned());
    let mut opt = Optimizer::new(cfg.optimizer, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_items.len()).collect();

    let initial_loss = mean_loss(&model, &train_items);
    let mut report = TrainReport {
        epochs: cfg.epochs,
        initial_loss,
        epoch_loss: Vec::with_capacity(cfg.epochs),
        holdout_clean_2afc: Vec::with_capacity(cfg.epochs),
        holdout_attacked_2afc: Vec::new(),
        train_triplets: train_items.len(),
        holdout_triplets: holdout_items.len(),
        wall_clock_seconds: 0.0,
        final_checkpoint: None,
    };
    let mut step_counter: u64 = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut epoch_total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let item = &train_items[i];
                let profiles = match &cfg.inner_attack {
                    Some(inner) => {
                        let spec = inner
                            .clone()
                            .with_seed(inner.seed ^ step_counter.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                        step_counter += 1;
                        let t = &data[train_idx[i]];
                        let (adv, _) = attack_2afc_triplet(&model, t, cfg.attack_target, &spec)?;
                        let fx = model.features(&adv.x)?;
                        [
                            if adv.x0 == t.x0 {
                                item.profiles[0].clone()
                            } else {
                                model.profile(&fx, &model.features(&adv.x0)?)
                            },
                            if adv.x1 == t.x1 {
                                item.profiles[1].clone()
                            } else {
                                model.profile(&fx, &model.features(&adv.x1)?)
                            },
                        ]
                    }
                    None => item.profiles.clone(),
                };
                let (l, g) = triplet_loss(&model.weights, &model.head.params, &profiles, item.h);
                batch_loss += l;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    acc.add_scaled(gi, 1.0 / batch.len() as f64);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss (epoch {epoch})"),
                    iteration: b,
                });
            }
            epoch_total += batch_loss;
            opt.step(&mut params, &grads, lr);
            for p in params[..layers].iter_mut() {
                *p = p.map(|v| v.max(0.0));
            }
            model.weights = MetricWeights {
                layers: params[..layers].iter().map(|t| t.data().to_vec()).collect(),
            };
            model.head.params = params[layers..].to_vec();
        }
        report.epoch_loss.push(epoch_total / train_items.len() as f64);
        report.holdout_clean_2afc.push(clean_2afc(&model, &holdout_items));
        if let Some(inner) = &cfg.inner_attack {
            let eval = inner.clone().with_steps(cfg.eval_attack_steps).with_step_size(
                2.5 * inner.epsilon / cfg.eval_attack_steps as f64,
            );
            report
                .holdout_attacked_2afc
                .push(attacked_2afc(&model, &holdout_attack_set, cfg.attack_target, &eval)?);
        }
        if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.checkpoint_dir) {
            if every > 0 && (epoch + 1) % every == 0 {
                save_checkpoint(&model, &dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    model.flavor = match &cfg.inner_attack {
        None => model.flavor,
        Some(a) => match a.norm {
            Norm::Linf => Flavor::RobustLinf,
            Norm::L2 => Flavor::RobustL2,
        },
    };
    model.provenance.entries.push(ProvenanceEntry {
        method: if cfg.adversarial { "adversarial" } else { "clean" }.into(),
        epochs: cfg.epochs,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        triplets: train_items.len(),
        inner_attack: cfg.inner_attack.clone(),
    });
    if let Some(dir) = &cfg.checkpoint_dir {
        let path = dir.join("final.ckpt");
        save_checkpoint(&model, &path)?;
        report.final_checkpoint = Some(path);
    }
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Probability the head assigns to `x1` being closer, for each triplet.
pub fn predict_preferences(model: &MetricModel, data: &[TwoAFCTriplet]) -> Result<Vec<f64>> {
    data.iter()
        .map(|t| {
            Ok(calibration_forward(
                &model.head,
                model.distance(&t.x, &t.x0)?,
                model.distance(&t.x, &t.x1)?,
            ))
        })
        .collect()
}

//! Classifier attacks bounded in the perceptual distance: PPGD (steps
//! constrained through the feature Jacobian) and LPA (Lagrangian penalty).
//!
//! Both attacks take the metric as a parameter; passing a robustly tuned
//! metric gives the robust-metric variants with no other change.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackResult;
use crate::backbone::{Backbone, BackboneConfig, FeatureStack, LayerSpec};
use crate::checkpoint::{backbone_arrays, take_backbone, Container};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::metric::{phi_graph, MetricModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::Tensor;

/// A differentiable map from an image to `num_classes` logits.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    /// Pushes the logits of `x` onto `g`.
    fn logits_graph(&self, g: &mut Graph, x: Var) -> Result<Var>;

    fn logits(&self, x: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x.tensor().clone());
        let z = self.logits_graph(&mut g, xv)?;
        Ok(g.value(z).data().to_vec())
    }

    fn predict(&self, x: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Convolution stack followed by a linear layer on the flattened last tap.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvClassifier {
    pub features: Backbone,
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

impl ConvClassifier {
    /// Three stride-2 convolutions and a global max pool for `size×size` inputs.
    pub fn small(size: usize, channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let mut config = BackboneConfig::tiny_net(seed);
        config.input_channels = channels;
        config.input_mean = vec![0.5; channels];
        config.input_std = vec![0.25; channels];
        let last = config.layer_shapes([size, size, channels])?[config.layers.len() - 1];
        config.layers.push(LayerSpec::MaxPool {
            kernel: last[0].max(last[1]),
            stride: last[0].max(last[1]),
        });
        config.taps = vec![config.layers.len() - 1];
        config.frozen = false;
        Self::new(config, [size, size, channels], num_classes, seed)
    }

    pub fn new(config: BackboneConfig, input: [usize; 3], num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument("a classifier needs at least two classes".into()));
        }
        let shapes = config.tap_shapes(input)?;
        if shapes.len() != 1 {
            return Err(Error::InvalidArgument("classifier features need exactly one tap".into()));
        }
        let dim: usize = shapes[0].iter().product();
        let features = Backbone::random(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let bound = 1.0 / (dim as f64).sqrt();
        let fc_weight = Tensor::new(
            vec![num_classes, dim],
            (0..num_classes * dim).map(|_| rng.random_range(-bound..bound)).collect(),
        );
        Ok(Self {
            features,
            fc_weight,
            fc_bias: Tensor::zeros(vec![num_classes]),
        })
    }

    fn logits_with(&self, g: &mut Graph, x: Var, trainable: bool) -> Result<(Var, Vec<Var>)> {
        let (taps, conv) = self.features.forward_with(g, x, trainable)?;
        let n = g.value(taps[0]).len();
        let flat = g.reshape(taps[0], vec![n]);
        let (w, b) = if trainable {
            (g.param(self.fc_weight.clone()), g.param(self.fc_bias.clone()))
        } else {
            (g.constant(self.fc_weight.clone()), g.constant(self.fc_bias.clone()))
        };
        let z = g.linear(flat, w, b);
        let mut params: Vec<Var> = conv.into_iter().flat_map(|(w, b)| [w, b]).collect();
        params.extend([w, b]);
        Ok((z, params))
    }

    fn param_tensors(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self
            .features
            .params()
            .iter()
            .flatten()
            .flat_map(|p| [p.weight.clone(), p.bias.clone()])
            .collect();
        out.extend([self.fc_weight.clone(), self.fc_bias.clone()]);
        out
    }

    fn set_params(&mut self, mut params: Vec<Tensor>) {
        self.fc_bias = params.pop().expect("fc bias");
        self.fc_weight = params.pop().expect("fc weight");
        let mut it = params.into_iter();
        for p in self.features.params_mut().iter_mut().flatten() {
            p.weight = it.next().expect("conv weight");
            p.bias = it.next().expect("conv bias");
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = Vec::new();
        backbone_arrays(&self.features, "features", &mut arrays);
        arrays.push(("fc.weight".into(), self.fc_weight.clone()));
        arrays.push(("fc.bias".into(), self.fc_bias.clone()));
        Container {
            kind: "classifier".into(),
            metadata: serde_json::json!({ "features": self.features.config() }),
            arrays,
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        if c.kind != "classifier" {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a classifier checkpoint, found kind `{}`",
                c.kind
            )));
        }
        let config: BackboneConfig = serde_json::from_value(c.metadata["features"].clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("bad classifier metadata: {e}")))?;
        let features = take_backbone(&mut c, config, "features")?;
        let fc_weight = c.take("fc.weight")?;
        let fc_bias = c.take("fc.bias")?;
        if fc_weight.shape().len() != 2 || fc_bias.len() != fc_weight.shape()[0] {
            return Err(Error::CorruptCheckpoint("classifier head shapes disagree".into()));
        }
        Ok(Self {
            features,
            fc_weight,
            fc_bias,
        })
    }
}

impl Classifier for ConvClassifier {
    fn num_classes(&self) -> usize {
        self.fc_bias.len()
    }

    fn logits_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        Ok(self.logits_with(g, x, false)?.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Softmax cross-entropy training with Adam; returns the mean loss per epoch.
pub fn train_classifier(
    clf: &mut ConvClassifier,
    data: &[(Image, usize)],
    cfg: &ClassifierTrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("no labeled images to train on".into()));
    }
    let classes = clf.num_classes();
    if let Some((_, y)) = data.iter().find(|(_, y)| *y >= classes) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = clf.param_tensors();
    let mut opt = Optimizer::new(OptimizerKind::default(), &params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            for &i in batch {
                let (x, y) = &data[i];
                let mut g = Graph::new();
                let xv = g.constant(x.tensor().clone());
                let (z, vars) = clf.logits_with(&mut g, xv, true)?;
                let loss = g.softmax_cross_entropy(z, *y);
                let l = g.value(loss).item();
                if !l.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("classifier loss (epoch {epoch})"),
                        iteration: b,
                    });
                }
                total += l;
                let gr = g.backward(loss);
                for (acc, v) in grads.iter_mut().zip(&vars) {
                    acc.add_scaled(&gr.wrt(*v), 1.0 / batch.len() as f64);
                }
            }
            opt.step(&mut params, &grads, cfg.learning_rate);
            clf.set_params(params.clone());
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

/// `max_{i != y} z_i - z_y`: positive exactly when `y` is not the top class.
pub fn margin_loss(logits: &[f64], y: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidArgument("margin loss needs at least two classes".into()));
    }
    if y >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {} logits", logits.len())));
    }
    let rival = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != y)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(rival - logits[y])
}

/// Margin loss of `f` at `x` and its gradient with respect to `x`.
pub fn margin_and_grad(f: &dyn Classifier, x: &Image, y: usize) -> Result<(f64, Tensor)> {
    if f.num_classes() < 2 || y >= f.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "label {y} invalid for {} classes",
            f.num_classes()
        )));
    }
    let mut g = Graph::new();
    let xv = g.param(x.tensor().clone());
    let z = f.logits_graph(&mut g, xv)?;
    let m = g.margin(z, y);
    Ok((g.value(m).item(), g.backward(m).take(xv)))
}

/// The feature map `phi` (whose squared distance is the metric) recorded at
/// one image, for repeated Jacobian products.
pub struct Linearization {
    graph: Graph,
    input: Var,
    phi: Var,
}

impl Linearization {
    pub fn at(metric: &MetricModel, x: &Image) -> Result<Self> {
        let mut graph = Graph::new();
        let input = graph.param(x.tensor().clone());
        let feats = metric.normalized_features_graph(&mut graph, input)?;
        let w = metric.weight_constants(&mut graph);
        let phi = phi_graph(&mut graph, &feats, &w);
        Ok(Self { graph, input, phi })
    }

    pub fn phi(&self) -> &Tensor {
        self.graph.value(self.phi)
    }

    /// `J v` for an image-space `v`.
    pub fn jvp(&self, v: &Tensor) -> Tensor {
        self.graph.jvp(&[(self.input, v)], self.phi)
    }

    /// `J^T u` for a feature-space `u`.
    pub fn vjp(&self, u: &Tensor) -> Tensor {
        let seed = Tensor::new(self.phi().shape().to_vec(), u.data().to_vec());
        self.graph.vjp(self.phi, seed).take(self.input)
    }
}

pub fn metric_jvp(metric: &MetricModel, x: &Image, v: &Tensor) -> Result<Tensor> {
    Ok(Linearization::at(metric, x)?.jvp(v))
}

pub fn metric_vjp(metric: &MetricModel, x: &Image, u: &Tensor) -> Result<Tensor> {
    Ok(Linearization::at(metric, x)?.vjp(u))
}

/// Solves `(J^T J + damping I) v = b` by `iters` conjugate-gradient steps
/// from zero. Returns `None` if the iteration produces non-finite values.
pub fn damped_cg(lin: &Linearization, b: &Tensor, damping: f64, iters: usize) -> Option<Tensor> {
    let apply = |v: &Tensor| {
        let mut out = lin.vjp(&lin.jvp(v)).reshape(v.shape().to_vec());
        out.add_scaled(v, damping);
        out
    };
    let mut v = Tensor::zeros(b.shape().to_vec());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    for _ in 0..iters {
        if rr == 0.0 {
            break;
        }
        let ap = apply(&p);
        let alpha = rr / p.dot(&ap);
        if !alpha.is_finite() {
            return None;
        }
        v.add_scaled(&p, alpha);
        r.add_scaled(&ap, -alpha);
        let rr_new = r.dot(&r);
        if !rr_new.is_finite() {
            return None;
        }
        let beta = rr_new / rr;
        let mut next = r.clone();
        next.add_scaled(&p, beta);
        p = next;
        rr = rr_new;
    }
    v.all_finite().then_some(v)
}

pub const DEFAULT_PERCEPTUAL_EPSILON: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualAttackSpec {
    /// Bound on the perceptual distance.
    pub epsilon: f64,
    /// PPGD steps.
    pub steps: usize,
    /// PPGD step length in feature space; defaults to `0.25 * sqrt(epsilon)`.
    pub eta: Option<f64>,
    pub cg_iters: usize,
    pub damping: f64,
    pub lambda_init: f64,
    pub lambda_growth: f64,
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// LPA initial step length in feature space; defaults to `0.5 * sqrt(epsilon)`.
    pub lpa_step: Option<f64>,
    pub lpa_step_decay: f64,
    pub seed: u64,
}

impl Default for PerceptualAttackSpec {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_PERCEPTUAL_EPSILON,
            steps: 10,
            eta: None,
            cg_iters: 5,
            damping: 1e-6,
            lambda_init: 0.01,
            lambda_growth: 10.0,
            outer_iters: 5,
            inner_iters: 20,
            lpa_step: None,
            lpa_step_decay: 0.8,
            seed: 0,
        }
    }
}

impl PerceptualAttackSpec {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn eta(&self) -> f64 {
        self.eta.unwrap_or(0.25 * self.epsilon.sqrt())
    }

    pub fn lpa_step(&self) -> f64 {
        self.lpa_step.unwrap_or(0.5 * self.epsilon.sqrt())
    }

    /// A zero bound is accepted and returns the clean input.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad(format!("perceptual bound must be nonnegative, got {}", self.epsilon));
        }
        if self.cg_iters == 0 {
            return bad("conjugate gradient needs at least one iteration".into());
        }
        if !(self.lambda_growth > 1.0) {
            return bad(format!("lambda growth factor must exceed 1, got {}", self.lambda_growth));
        }
        if !(self.lambda_init > 0.0) || self.damping < 0.0 {
            return bad("lambda must start positive and damping be nonnegative".into());
        }
        if self.steps == 0 || self.outer_iters == 0 || self.inner_iters == 0 {
            return bad("iteration counts must be positive".into());
        }
        if !(self.eta() > 0.0 || self.epsilon == 0.0) || !(self.lpa_step() > 0.0 || self.epsilon == 0.0) {
            return bad("step lengths must be positive".into());
        }
        Ok(())
    }
}

/// Distance from a fixed clean image, with its features cached.
struct Anchor<'a> {
    metric: &'a MetricModel,
    x: &'a Image,
    feats: FeatureStack,
}

impl<'a> Anchor<'a> {
    fn new(metric: &'a MetricModel, x: &'a Image) -> Result<Self> {
        Ok(Self {
            metric,
            x,
            feats: metric.features(x)?,
        })
    }

    fn distance(&self, y: &Image) -> Result<f64> {
        Ok(self.metric.distance_features(&self.feats, &self.metric.features(y)?))
    }

    fn along(&self, dir: &Tensor, alpha: f64) -> Image {
        let mut d = dir.clone();
        d.scale(alpha);
        self.x.perturbed(&d)
    }

    fn project(&self, y: &Image, epsilon: f64) -> Result<Image> {
        if self.distance(y)? <= epsilon {
            return Ok(y.clone());
        }
        let dir = y.diff(self.x);
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..PROJECT_BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if self.distance(&self.along(&dir, mid))? <= epsilon {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(self.along(&dir, lo))
    }
}

const PROJECT_BISECTIONS: usize = 20;

/// Pulls `candidate` back toward `x` along the segment between them until
/// the perceptual distance is at most `epsilon`.
pub fn lpips_project(metric: &MetricModel, x: &Image, candidate: &Image, epsilon: f64) -> Result<Image> {
    if !x.same_shape(candidate) {
        return Err(Error::Shape(format!(
            "images have shapes {:?} and {:?}",
            x.shape(),
            candidate.shape()
        )));
    }
    Anchor::new(metric, x)?.project(candidate, epsilon)
}

fn finish(best: (f64, Image), anchor: &Anchor, trace: Vec<f64>, notes: Vec<String>) -> Result<AttackResult> {
    Ok(AttackResult {
        norm: anchor.distance(&best.1)?,
        objective: best.0,
        adversarial: vec![best.1],
        trace,
        notes,
    })
}

/// One linearized perceptual step: the damped least-squares direction for
/// `grad`, scaled so that `||J step|| = eta`. The flag is false when conjugate
/// gradient broke down and the plain gradient was used instead.
pub fn ppgd_step(lin: &Linearization, grad: &Tensor, eta: f64, damping: f64, cg_iters: usize) -> (Tensor, bool) {
    let (mut dir, solved) = match damped_cg(lin, grad, damping, cg_iters) {
        Some(v) => (v, true),
        None => (grad.clone(), false),
    };
    let jnorm = lin.jvp(&dir).norm_l2();
    let n = if jnorm > 0.0 { jnorm } else { dir.norm_l2() };
    dir.scale(if n > 0.0 { eta / n } else { 0.0 });
    (dir, solved)
}

/// Perceptual PGD. Each step solves the linearized problem
/// `max grad^T delta  s.t. ||J delta|| <= eta` approximately with damped
/// conjugate gradient, then clips and projects back into the distance ball.
/// The objective reported is the margin loss.
pub fn ppgd_attack(
    f: &dyn Classifier,
    metric: &MetricModel,
    x: &Image,
    y: usize,
    spec: &PerceptualAttackSpec,
) -> Result<AttackResult> {
    spec.validate()?;
    let anchor = Anchor::new(metric, x)?;
    let (m0, mut grad) = margin_and_grad(f, x, y)?;
    let mut trace = vec![m0];
    let mut notes = Vec::new();
    let mut best = (m0, x.clone());
    if spec.epsilon == 0.0 {
        return finish(best, &anchor, trace, notes);
    }
    let eta = spec.eta();
    let mut current = x.clone();
    for it in 1..=spec.steps {
        let lin = Linearization::at(metric, &current)?;
        let (step, solved) = ppgd_step(&lin, &grad, eta, spec.damping, spec.cg_iters);
        if !solved {
            notes.push(format!("step {it}: conjugate gradient broke down, used the plain gradient"));
        }
        current = anchor.project(&current.perturbed(&step), spec.epsilon)?;
        let (m, g) = margin_and_grad(f, &current, y)?;
        if !m.is_finite() || !g.all_finite() {
            return Err(Error::NonFinite {
                context: "PPGD margin loss".into(),
                iteration: it,
            });
        }
        trace.push(m);
        if m > best.0 {
            best = (m, current.clone());
        }
        grad = g;
    }
    finish(best, &anchor, trace, notes)
}

/// Value and image gradient of the LPA objective at one iterate.
pub struct LpaObjective {
    pub value: f64,
    pub margin: f64,
    pub distance: f64,
    pub grad: Tensor,
}

/// `margin(f(candidate)) - lambda * max(0, d - epsilon)`, where `lin` is
/// recorded at `candidate` and `clean_phi` is the feature map of the clean image.
pub fn lpa_objective(
    f: &dyn Classifier,
    lin: &Linearization,
    clean_phi: &Tensor,
    candidate: &Image,
    y: usize,
    lambda: f64,
    epsilon: f64,
) -> Result<LpaObjective> {
    let mut diff = lin.phi().clone();
    diff.add_scaled(clean_phi, -1.0);
    let distance = diff.dot(&diff);
    let (margin, mut grad) = margin_and_grad(f, candidate, y)?;
    if distance > epsilon {
        let pen = lin.vjp(&diff).reshape(grad.shape().to_vec());
        grad.add_scaled(&pen, -2.0 * lambda);
    }
    Ok(LpaObjective {
        value: margin - lambda * (distance - epsilon).max(0.0),
        margin,
        distance,
        grad,
    })
}

/// Lagrangian perceptual attack: ascends
/// `margin(f(x')) - lambda * max(0, d(x, x') - epsilon)`, raising `lambda`
/// after every round whose last iterate is outside the ball, and finishes
/// with a projection onto the ball.
pub fn lpa_attack(
    f: &dyn Classifier,
    metric: &MetricModel,
    x: &Image,
    y: usize,
    spec: &PerceptualAttackSpec,
) -> Result<AttackResult> {
    spec.validate()?;
    let anchor = Anchor::new(metric, x)?;
    let (m0, _) = margin_and_grad(f, x, y)?;
    let mut trace = vec![m0];
    let mut best = (m0, x.clone());
    if spec.epsilon == 0.0 {
        return finish(best, &anchor, trace, Vec::new());
    }
    let clean_phi = Linearization::at(metric, x)?.phi().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Tensor::from_vec((0..x.len()).map(|_| rng.random_range(-1e-3..1e-3)).collect());
    let mut current = x.perturbed(&noise);
    let mut lambda = spec.lambda_init;
    let mut iteration = 0;
    for _ in 0..spec.outer_iters {
        let mut step_len = spec.lpa_step();
        for _ in 0..spec.inner_iters {
            iteration += 1;
            let lin = Linearization::at(metric, &current)?;
            let obj = lpa_objective(f, &lin, &clean_phi, &current, y, lambda, spec.epsilon)?;
            if !obj.value.is_finite() || !obj.grad.all_finite() {
                return Err(Error::NonFinite {
                    context: "LPA objective".into(),
                    iteration,
                });
            }
            if obj.distance <= spec.epsilon && obj.margin > best.0 {
                best = (obj.margin, current.clone());
            }
            trace.push(obj.value);
            let mut grad = obj.grad;
            let jn = lin.jvp(&grad).norm_l2();
            let n = if jn > 0.0 { jn } else { grad.norm_l2() };
            if n > 0.0 {
                grad.scale(step_len / n);
                current = current.perturbed(&grad);
            }
            step_len *= spec.lpa_step_decay;
        }
        if anchor.distance(&current)? > spec.epsilon {
            lambda *= spec.lambda_growth;
        }
    }
    let projected = anchor.project(&current, spec.epsilon)?;
    let (m, _) = margin_and_grad(f, &projected, y)?;
    trace.push(m);
    if m > best.0 {
        best = (m, projected);
    }
    finish(best, &anchor, trace, Vec::new())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerceptualAttackKind {
    Ppgd,
    Lpa,
}

impl PerceptualAttackKind {
    pub fn run(
        &self,
        f: &dyn Classifier,
        metric: &MetricModel,
        x: &Image,
        y: usize,
        spec: &PerceptualAttackSpec,
    ) -> Result<AttackResult> {
        match self {
            PerceptualAttackKind::Ppgd => ppgd_attack(f, metric, x, y, spec),
            PerceptualAttackKind::Lpa => lpa_attack(f, metric, x, y, spec),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            PerceptualAttackKind::Ppgd => "ppgd",
            PerceptualAttackKind::Lpa => "lpa",
        }
    }
}

/// Outcome of attacking one labeled example. `success` means the
/// returned image is misclassified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub distance: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustAccuracy {
    /// Percentage of evaluated examples still classified correctly.
    pub accuracy: f64,
    pub evaluated: usize,
    /// Examples skipped because their label is out of range.
    pub skipped: usize,
    pub outcomes: Vec<ExampleOutcome>,
}

/// Attacks every correctly classified example; examples already
/// misclassified count as failures without being attacked. Example `i`
/// uses seed `spec.seed ^ i`.
pub fn robust_accuracy(
    f: &dyn Classifier,
    metric: &MetricModel,
    data: &[(Image, usize)],
    kind: PerceptualAttackKind,
    spec: &PerceptualAttackSpec,
) -> Result<RobustAccuracy> {
    spec.validate()?;
    let mut outcomes = Vec::with_capacity(data.len());
    let mut skipped = 0;
    for (index, (x, label)) in data.iter().enumerate() {
        if *label >= f.num_classes() {
            skipped += 1;
            log::warn!("skipping example {index}: label {label} out of range");
            continue;
        }
        let clean = f.predict(x)?;
        let (adv, distance) = if clean != *label {
            (x.clone(), 0.0)
        } else {
            let s = PerceptualAttackSpec {
                seed: spec.seed ^ index as u64,
                ..spec.clone()
            };
            let r = kind.run(f, metric, x, *label, &s)?;
            (r.adversarial[0].clone(), r.norm)
        };
        let prediction = f.predict(&adv)?;
        outcomes.push(ExampleOutcome {
            index,
            label: *label,
            prediction,
            distance,
            success: prediction != *label,
        });
    }
    let evaluated = outcomes.len();
    let correct = outcomes.iter().filter(|o| !o.success).count();
    Ok(RobustAccuracy {
        accuracy: if evaluated == 0 {
            0.0
        } else {
            100.0 * correct as f64 / evaluated as f64
        },
        evaluated,
        skipped,
        outcomes,
    })
}

/// Percentage of examples classified correctly; out-of-range labels are skipped.
pub fn clean_accuracy(f: &dyn Classifier, data: &[(Image, usize)]) -> Result<f64> {
    let mut n = 0;
    let mut correct = 0;
    for (x, y) in data {
        if *y >= f.num_classes() {
            continue;
        }
        n += 1;
        if f.predict(x)? == *y {
            correct += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { 100.0 * correct as f64 / n as f64 })
}

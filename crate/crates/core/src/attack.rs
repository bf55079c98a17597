//! Projected gradient ascent in pixel space and the attacks built on it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::TwoAFCTriplet;
use crate::error::{Error, Result};
use crate::graph::{gradient, Graph, Var};
use crate::image::Image;
use crate::metric::{distance_graph, head_logit, MetricModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn of(&self, t: &Tensor) -> f64 {
        match self {
            Norm::Linf => t.norm_linf(),
            Norm::L2 => t.norm_l2(),
        }
    }

    pub fn project(&self, delta: &Tensor, epsilon: f64) -> Tensor {
        match self {
            Norm::Linf => project_linf(delta, epsilon),
            Norm::L2 => project_l2(delta, epsilon),
        }
    }
}

pub const DEFAULT_STEPS: usize = 40;
pub const OPT_EPSILON: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Defaults to `2.5 * epsilon / steps` when absent.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "default_true")]
    pub random_start: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_true() -> bool {
    true
}

impl AttackSpec {
    pub fn new(norm: Norm, epsilon: f64) -> Self {
        Self {
            norm,
            epsilon,
            steps: DEFAULT_STEPS,
            step_size: None,
            random_start: true,
            seed: 0,
        }
    }

    pub fn linf(epsilon: f64) -> Self {
        Self::new(Norm::Linf, epsilon)
    }

    pub fn l2(epsilon: f64) -> Self {
        Self::new(Norm::L2, epsilon)
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_step_size(mut self, step: f64) -> Self {
        self.step_size = Some(step);
        self
    }

    pub fn effective_step_size(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    /// A zero radius is accepted and yields the unperturbed input.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "attack radius must be finite and nonnegative, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack needs at least one step".into()));
        }
        let step = self.effective_step_size();
        if !step.is_finite() || step < 0.0 || (self.epsilon > 0.0 && step == 0.0) {
            return Err(Error::InvalidArgument(format!("invalid step size {step}")));
        }
        Ok(())
    }
}

/// Component-wise clamp into `[-epsilon, epsilon]`.
pub fn project_linf(delta: &Tensor, epsilon: f64) -> Tensor {
    delta.map(|v| v.clamp(-epsilon, epsilon))
}

/// Radial rescale onto the `epsilon` ball when outside it.
pub fn project_l2(delta: &Tensor, epsilon: f64) -> Tensor {
    let n = delta.norm_l2();
    if n > epsilon {
        let mut out = delta.clone();
        out.scale(epsilon / n);
        out
    } else {
        delta.clone()
    }
}

/// Outcome of an attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    #[serde(skip)]
    pub adversarial: Vec<Image>,
    pub objective: f64,
    /// Largest perturbation norm over the attacked images.
    pub norm: f64,
    /// Objective at the start point and after every step.
    pub trace: Vec<f64>,
    /// Free-form per-step notes (e.g. solver fallbacks).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl AttackResult {
    /// Running maximum of the trace.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut m = f64::NEG_INFINITY;
        self.trace
            .iter()
            .map(|&v| {
                m = m.max(v);
                m
            })
            .collect()
    }
}

/// A differentiable scalar function of one or more images.
pub trait Objective {
    /// Value and gradient with respect to every input image.
    fn evaluate(&self, xs: &[Image]) -> Result<(f64, Vec<Tensor>)>;
}

impl<F> Objective for F
where
    F: Fn(&[Image]) -> Result<(f64, Vec<Tensor>)>,
{
    fn evaluate(&self, xs: &[Image]) -> Result<(f64, Vec<Tensor>)> {
        self(xs)
    }
}

/// Objective whose value is built on a fresh [`Graph`] from one leaf per image.
pub struct GraphObjective<F>(pub F);

impl<F> Objective for GraphObjective<F>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    fn evaluate(&self, xs: &[Image]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = xs.iter().map(|x| g.param(x.tensor().clone())).collect();
        let out = (self.0)(&mut g, &leaves)?;
        let value = g.value(out).item();
        let grads = gradient(&g, out, &leaves)?;
        Ok((value, grads))
    }
}

fn random_start(rng: &mut ChaCha8Rng, norm: Norm, epsilon: f64, n: usize) -> Tensor {
    match norm {
        Norm::Linf => Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..=1.0) * epsilon).collect()),
        Norm::L2 => {
            let mut d = Tensor::from_vec((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
            let r = epsilon * rng.random::<f64>().powf(1.0 / n as f64);
            let len = d.norm_l2();
            if len > 0.0 {
                d.scale(r / len);
            }
            d
        }
    }
}

fn ascent_direction(norm: Norm, grad: &Tensor) -> Tensor {
    match norm {
        Norm::Linf => grad.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Norm::L2 => {
            let n = grad.norm_l2();
            if n > 0.0 {
                grad.map(|v| v / n)
            } else {
                Tensor::zeros(grad.shape().to_vec())
            }
        }
    }
}

fn check_finite(value: f64, grads: &[Tensor], iteration: usize) -> Result<()> {
    if value.is_finite() && grads.iter().all(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: "attack objective".into(),
            iteration,
        })
    }
}

fn perturbation_norm(norm: Norm, xs: &[Image], advs: &[Image]) -> f64 {
    xs.iter()
        .zip(advs)
        .map(|(x, a)| norm.of(&a.diff(x)))
        .fold(0.0, f64::max)
}

/// Maximizes `objective` over per-image perturbations in the `spec` ball,
/// keeping pixels in `[0, 1]`, and returns the best iterate seen.
pub fn pgd_attack(objective: &dyn Objective, xs: &[Image], spec: &AttackSpec) -> Result<AttackResult> {
    spec.validate()?;
    if xs.is_empty() {
        return Err(Error::InvalidArgument("nothing to attack".into()));
    }
    if spec.epsilon == 0.0 {
        let (v, g) = objective.evaluate(xs)?;
        check_finite(v, &g, 0)?;
        return Ok(AttackResult {
            adversarial: xs.to_vec(),
            objective: v,
            norm: 0.0,
            trace: vec![v],
            notes: Vec::new(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let step = spec.effective_step_size();
    let mut current: Vec<Image> = xs
        .iter()
        .map(|x| {
            if spec.random_start {
                x.perturbed(&random_start(&mut rng, spec.norm, spec.epsilon, x.len()))
            } else {
                x.clone()
            }
        })
        .collect();
    let (mut value, mut grads) = objective.evaluate(&current)?;
    check_finite(value, &grads, 0)?;
    let mut trace = Vec::with_capacity(spec.steps + 1);
    trace.push(value);
    let mut best = (value, current.clone());
    for it in 1..=spec.steps {
        current = xs
            .iter()
            .zip(&current)
            .zip(&grads)
            .map(|((x, cur), g)| {
                let mut delta = cur.diff(x);
                delta.add_scaled(&ascent_direction(spec.norm, g), step);
                x.perturbed(&spec.norm.project(&delta, spec.epsilon))
            })
            .collect();
        (value, grads) = objective.evaluate(&current)?;
        check_finite(value, &grads, it)?;
        trace.push(value);
        if value > best.0 {
            best = (value, current.clone());
        }
    }
    Ok(AttackResult {
        norm: perturbation_norm(spec.norm, xs, &best.1),
        adversarial: best.1,
        objective: best.0,
        trace,
        notes: Vec::new(),
    })
}

/// Feature-distortion attack: maximizes the summed per-layer mean squared
/// difference between the weighted normalized features of `x + delta` and `x`.
pub fn opt_attack(model: &MetricModel, x: &Image, spec: &AttackSpec) -> Result<AttackResult> {
    let target: Vec<Tensor> = model
        .features(x)?
        .layers
        .iter()
        .zip(&model.weights.layers)
        .map(|(f, w)| scale_channels(f, w))
        .collect();
    let objective = GraphObjective(|g: &mut Graph, leaves: &[Var]| {
        let feats = model.normalized_features_graph(g, leaves[0])?;
        let ws = model.weight_constants(g);
        let mut total: Option<Var> = None;
        for ((f, w), t) in feats.into_iter().zip(ws).zip(&target) {
            let scaled = g.scale_channels(f, w);
            let tv = g.constant(t.clone());
            let diff = g.sub(scaled, tv);
            let ss = g.sum_squares(diff);
            let term = g.mul_scalar(ss, 1.0 / t.len() as f64);
            total = Some(match total {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        Ok(total.expect("backbone has at least one tap"))
    });
    pgd_attack(&objective, std::slice::from_ref(x), spec)
}

fn scale_channels(t: &Tensor, w: &[f64]) -> Tensor {
    let mut out = t.clone();
    for chunk in out.data_mut().chunks_mut(w.len()) {
        for (v, s) in chunk.iter_mut().zip(w) {
            *v *= s;
        }
    }
    out
}

/// Which distortion(s) of a triplet an attack may perturb.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackTarget {
    X0,
    X1,
    Both,
}

impl AttackTarget {
    pub fn label(&self) -> &'static str {
        match self {
            AttackTarget::X0 => "x0",
            AttackTarget::X1 => "x1",
            AttackTarget::Both => "both",
        }
    }

    fn mask(&self) -> [bool; 2] {
        match self {
            AttackTarget::X0 => [true, false],
            AttackTarget::X1 => [false, true],
            AttackTarget::Both => [true, true],
        }
    }
}

/// Maximizes the calibration cross-entropy against `t.h` by perturbing the
/// targeted distortion(s). The reference image is never changed.
pub fn attack_2afc_triplet(
    model: &MetricModel,
    t: &TwoAFCTriplet,
    target: AttackTarget,
    spec: &AttackSpec,
) -> Result<(TwoAFCTriplet, AttackResult)> {
    t.validate()?;
    let reference = model.features(&t.x)?;
    let mask = target.mask();
    let sides = [&t.x0, &t.x1];
    let mut fixed = [0.0; 2];
    for k in 0..2 {
        if !mask[k] {
            fixed[k] = model.distance_features(&reference, &model.features(sides[k])?);
        }
    }
    let attacked: Vec<Image> = (0..2).filter(|&k| mask[k]).map(|k| sides[k].clone()).collect();
    let objective = GraphObjective(|g: &mut Graph, leaves: &[Var]| {
        let refs: Vec<Var> = reference.layers.iter().map(|l| g.constant(l.clone())).collect();
        let ws = model.weight_constants(g);
        let mut next = leaves.iter();
        let mut d = [None; 2];
        for k in 0..2 {
            d[k] = Some(if mask[k] {
                let leaf = *next.next().expect("one leaf per attacked side");
                let f = model.normalized_features_graph(g, leaf)?;
                distance_graph(g, &refs, &f, &ws)
            } else {
                g.constant(Tensor::scalar(fixed[k]))
            });
        }
        let head = model.head_constants(g);
        let z = head_logit(g, d[0].unwrap(), d[1].unwrap(), &head);
        Ok(g.bce_logits(z, t.h))
    });
    let result = pgd_attack(&objective, &attacked, spec)?;
    let mut out = t.clone();
    let mut adv = result.adversarial.iter();
    if mask[0] {
        out.x0 = adv.next().expect("attacked x0").clone();
    }
    if mask[1] {
        out.x1 = adv.next().expect("attacked x1").clone();
    }
    Ok((out, result))
}

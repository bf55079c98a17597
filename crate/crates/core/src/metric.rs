//! The learned perceptual distance and its calibration head.
//!
//! The distance between two images is
//!
//! ```text
//! d(x, y) = sum_j 1/(H_j W_j) sum_{h,w} || w_j * (n_j(x)_hw - n_j(y)_hw) ||^2
//! ```
//!
//! where `n_j` is the `j`-th tapped activation with every channel vector
//! rescaled to unit length, and `w_j` is a nonnegative per-channel weight.
//! The calibration head maps a pair of distances `(d0, d1)` to the
//! probability that the second distortion is judged closer to the reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::AttackSpec;
use crate::backbone::{Backbone, FeatureStack};
use crate::error::{Error, Result};
use crate::graph::{logistic, Graph, Var, NORMALIZE_GUARD};
use crate::image::Image;
use crate::tensor::Tensor;

/// Unit-normalizes every channel vector of every layer.
pub fn channel_normalize(stack: &FeatureStack) -> FeatureStack {
    let layers = stack
        .layers
        .iter()
        .map(|t| {
            let c = *t.shape().last().expect("activation maps are 3-D");
            let mut out = t.clone();
            for chunk in out.data_mut().chunks_mut(c) {
                let n = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < NORMALIZE_GUARD {
                    chunk.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    chunk.iter_mut().for_each(|v| *v /= n);
                }
            }
            out
        })
        .collect();
    FeatureStack { layers }
}

/// Per-layer, per-channel weights `w_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub layers: Vec<Vec<f64>>,
}

impl MetricWeights {
    pub fn ones(channels: &[usize]) -> Self {
        Self {
            layers: channels.iter().map(|&c| vec![1.0; c]).collect(),
        }
    }

    pub fn channel_counts(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn min(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.layers.iter().map(|l| Tensor::from_vec(l.clone())).collect()
    }
}

/// Clamps every weight at zero from below.
pub fn project_weights_nonneg(w: &MetricWeights) -> MetricWeights {
    MetricWeights {
        layers: w
            .layers
            .iter()
            .map(|l| l.iter().map(|v| v.max(0.0)).collect())
            .collect(),
    }
}

/// Per-layer, per-channel spatial means of squared normalized differences.
///
/// With the backbone frozen, every distance between the same two images is
/// `sum_jc w_jc^2 * profile_jc`, so tuning only needs these vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceProfile {
    pub layers: Vec<Vec<f64>>,
}

impl DistanceProfile {
    /// Profile between two channel-normalized stacks.
    pub fn between(a: &FeatureStack, b: &FeatureStack) -> Self {
        let layers = a
            .layers
            .iter()
            .zip(&b.layers)
            .map(|(ta, tb)| {
                let s = ta.shape();
                let c = s[2];
                let hw = (s[0] * s[1]) as f64;
                let mut acc = vec![0.0; c];
                for (ca, cb) in ta.data().chunks(c).zip(tb.data().chunks(c)) {
                    for ((o, x), y) in acc.iter_mut().zip(ca).zip(cb) {
                        let d = x - y;
                        *o += d * d;
                    }
                }
                acc.iter_mut().for_each(|v| *v /= hw);
                acc
            })
            .collect();
        Self { layers }
    }

    pub fn distance(&self, w: &MetricWeights) -> f64 {
        self.layers
            .iter()
            .zip(&w.layers)
            .map(|(p, w)| p.iter().zip(w).map(|(p, w)| w * w * p).sum::<f64>())
            .sum()
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.layers.iter().map(|l| Tensor::from_vec(l.clone())).collect()
    }
}

/// Width of the head's hidden layers.
pub const HEAD_HIDDEN: usize = 32;
const HEAD_INPUTS: usize = 5;
const HEAD_RATIO_EPS: f64 = 0.1;
const HEAD_SLOPE: f64 = 0.2;

/// Small network mapping `(d0, d1)` to a probability. The inputs are
/// expanded to `[d0, d1, d0 - d1, d0/(d1+eps), d1/(d0+eps)]`, then pass
/// through two 32-unit leaky-ReLU layers and a sigmoid output.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationHead {
    /// `[W1, b1, W2, b2, W3, b3]`.
    pub params: Vec<Tensor>,
}

impl CalibrationHead {
    pub fn shapes() -> [Vec<usize>; 6] {
        [
            vec![HEAD_HIDDEN, HEAD_INPUTS],
            vec![HEAD_HIDDEN],
            vec![HEAD_HIDDEN, HEAD_HIDDEN],
            vec![HEAD_HIDDEN],
            vec![1, HEAD_HIDDEN],
            vec![1],
        ]
    }

    pub fn zeros() -> Self {
        Self {
            params: Self::shapes().into_iter().map(Tensor::zeros).collect(),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let fan_in = if i % 2 == 0 { shape[1] } else { Self::shapes()[i - 1][1] };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = shape.iter().product();
                Tensor::new(
                    shape,
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
                )
            })
            .collect();
        Self { params }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.params.len() == 6
            && self
                .params
                .iter()
                .zip(Self::shapes())
                .all(|(p, s)| p.shape() == s.as_slice());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("calibration head parameters have wrong shapes".into()))
        }
    }
}

/// Pushes the head's logit for distance nodes `d0`, `d1` onto `g`.
pub fn head_logit(g: &mut Graph, d0: Var, d1: Var, params: &[Var]) -> Var {
    let diff = g.sub(d0, d1);
    let d1e = g.add_scalar(d1, HEAD_RATIO_EPS);
    let d0e = g.add_scalar(d0, HEAD_RATIO_EPS);
    let r0 = g.div(d0, d1e);
    let r1 = g.div(d1, d0e);
    let input = g.concat(&[d0, d1, diff, r0, r1]);
    let h = g.linear(input, params[0], params[1]);
    let h = g.leaky_relu(h, HEAD_SLOPE);
    let h = g.linear(h, params[2], params[3]);
    let h = g.leaky_relu(h, HEAD_SLOPE);
    g.linear(h, params[4], params[5])
}

/// Probability that the second distortion is the closer one.
pub fn calibration_forward(head: &CalibrationHead, d0: f64, d1: f64) -> f64 {
    let mut g = Graph::new();
    let a = g.constant(Tensor::scalar(d0));
    let b = g.constant(Tensor::scalar(d1));
    let p: Vec<Var> = head.params.iter().map(|t| g.constant(t.clone())).collect();
    let z = head_logit(&mut g, a, b, &p);
    logistic(g.value(z).item())
}

/// `-h log p - (1 - h) log(1 - p)`.
pub fn bce_loss(p: f64, h: f64) -> f64 {
    let mut loss = 0.0;
    if h > 0.0 {
        loss -= h * p.ln();
    }
    if h < 1.0 {
        loss -= (1.0 - h) * (1.0 - p).ln();
    }
    loss
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flavor {
    Natural,
    RobustLinf,
    RobustL2,
}

impl Flavor {
    pub fn label(&self) -> &'static str {
        match self {
            Flavor::Natural => "natural",
            Flavor::RobustLinf => "robust-linf",
            Flavor::RobustL2 => "robust-l2",
        }
    }
}

/// One tuning run that produced (part of) a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub method: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub triplets: usize,
    pub inner_attack: Option<AttackSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub entries: Vec<ProvenanceEntry>,
}

/// Frozen backbone plus tunable channel weights and calibration head.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricModel {
    pub backbone: Backbone,
    pub weights: MetricWeights,
    pub head: CalibrationHead,
    pub flavor: Flavor,
    pub provenance: Provenance,
}

impl MetricModel {
    /// Untuned model: unit channel weights and a freshly initialized head.
    pub fn new(backbone: Backbone, head_seed: u64) -> Self {
        let weights = MetricWeights::ones(&backbone.tap_channels());
        Self {
            backbone,
            weights,
            head: CalibrationHead::init(head_seed),
            flavor: Flavor::Natural,
            provenance: Provenance::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.channel_counts() != self.backbone.tap_channels() {
            return Err(Error::Shape(format!(
                "metric weights have channel counts {:?}, backbone taps have {:?}",
                self.weights.channel_counts(),
                self.backbone.tap_channels()
            )));
        }
        self.head.validate()
    }

    /// Channel-normalized activations.
    pub fn features(&self, x: &Image) -> Result<FeatureStack> {
        Ok(channel_normalize(&crate::backbone::extract_features(
            &self.backbone,
            x,
        )?))
    }

    pub fn profile(&self, a: &FeatureStack, b: &FeatureStack) -> DistanceProfile {
        DistanceProfile::between(a, b)
    }

    /// Distance between two channel-normalized stacks.
    pub fn distance_features(&self, a: &FeatureStack, b: &FeatureStack) -> f64 {
        DistanceProfile::between(a, b).distance(&self.weights)
    }

    pub fn distance(&self, x: &Image, y: &Image) -> Result<f64> {
        lpips_distance(self, x, y)
    }

    /// Pushes the backbone and channel normalization for `x` onto `g`.
    pub fn normalized_features_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let taps = self.backbone.forward(g, x)?;
        Ok(taps.into_iter().map(|t| g.channel_normalize(t)).collect())
    }

    /// Adds the stored weights to `g` as constants.
    pub fn weight_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.weights
            .to_tensors()
            .into_iter()
            .map(|t| g.constant(t))
            .collect()
    }

    pub fn head_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.head.params.iter().map(|t| g.constant(t.clone())).collect()
    }
}

/// Distance node between two normalized feature lists under weights `w`.
pub fn distance_graph(g: &mut Graph, a: &[Var], b: &[Var], w: &[Var]) -> Var {
    let mut total: Option<Var> = None;
    for ((&fa, &fb), &wj) in a.iter().zip(b).zip(w) {
        let s = g.value(fa).shape();
        let hw = (s[0] * s[1]) as f64;
        let diff = g.sub(fa, fb);
        let scaled = g.scale_channels(diff, wj);
        let ss = g.sum_squares(scaled);
        let term = g.mul_scalar(ss, 1.0 / hw);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    total.expect("at least one layer")
}

/// The flattened weighted feature map whose squared Euclidean distance is
/// the perceptual distance: `concat_j (w_j * n_j) / sqrt(H_j W_j)`.
pub fn phi_graph(g: &mut Graph, feats: &[Var], w: &[Var]) -> Var {
    let parts: Vec<Var> = feats
        .iter()
        .zip(w)
        .map(|(&f, &wj)| {
            let s = g.value(f).shape();
            let hw = (s[0] * s[1]) as f64;
            let scaled = g.scale_channels(f, wj);
            g.mul_scalar(scaled, 1.0 / hw.sqrt())
        })
        .collect();
    g.concat(&parts)
}

/// Perceptual distance between `x` and `x0`.
pub fn lpips_distance(model: &MetricModel, x: &Image, x0: &Image) -> Result<f64> {
    if !x.same_shape(x0) {
        return Err(Error::Shape(format!(
            "images have shapes {:?} and {:?}",
            x.shape(),
            x0.shape()
        )));
    }
    let a = model.features(x)?;
    let b = model.features(x0)?;
    Ok(model.distance_features(&a, &b))
}

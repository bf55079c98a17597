//! Convolutional feature backbones and feature extraction.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    /// Pass-through.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Seed(u64),
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    /// Indices into `layers` whose outputs are emitted as features.
    pub taps: Vec<usize>,
    /// Per-channel input standardization `(x - mean) / std`, applied inside
    /// the backbone so callers always work in `[0, 1]` pixel space.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub weight_source: WeightSource,
    pub frozen: bool,
}

impl BackboneConfig {
    /// Three stride-2 3x3 convolutions (16/32/64 channels) with ReLU,
    /// tapped after every nonlinearity.
    pub fn tiny_net(seed: u64) -> Self {
        let conv = |c| LayerSpec::Conv {
            out_channels: c,
            kernel: 3,
            stride: 2,
            padding: 1,
            activation: Activation::Relu,
        };
        Self {
            input_channels: 3,
            layers: vec![conv(16), conv(32), conv(64)],
            taps: vec![0, 1, 2],
            input_mean: vec![0.5; 3],
            input_std: vec![0.5; 3],
            weight_source: WeightSource::Seed(seed),
            frozen: true,
        }
    }

    /// The AlexNet feature stack tapped at its five ReLUs. Weights must come
    /// from a checkpoint.
    pub fn alexnet(checkpoint: PathBuf) -> Self {
        let conv = |c, k, s, p| LayerSpec::Conv {
            out_channels: c,
            kernel: k,
            stride: s,
            padding: p,
            activation: Activation::Relu,
        };
        let pool = LayerSpec::MaxPool {
            kernel: 3,
            stride: 2,
        };
        Self {
            input_channels: 3,
            layers: vec![
                conv(64, 11, 4, 2),
                pool.clone(),
                conv(192, 5, 1, 2),
                pool,
                conv(384, 3, 1, 1),
                conv(256, 3, 1, 1),
                conv(256, 3, 1, 1),
            ],
            taps: vec![0, 2, 4, 5, 6],
            input_mean: vec![0.485, 0.456, 0.406],
            input_std: vec![0.229, 0.224, 0.225],
            weight_source: WeightSource::Checkpoint(checkpoint),
            frozen: true,
        }
    }

    /// Single pass-through layer, tapped.
    pub fn identity(channels: usize) -> Self {
        Self {
            input_channels: channels,
            layers: vec![LayerSpec::Identity],
            taps: vec![0],
            input_mean: vec![0.0; channels],
            input_std: vec![1.0; channels],
            weight_source: WeightSource::Seed(0),
            frozen: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::InvalidArgument("backbone needs at least one tap".into()));
        }
        if let Some(&t) = self.taps.iter().find(|&&t| t >= self.layers.len()) {
            return Err(Error::InvalidArgument(format!(
                "tap {t} out of range for {} layers",
                self.layers.len()
            )));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("taps must be strictly increasing".into()));
        }
        if self.input_mean.len() != self.input_channels
            || self.input_std.len() != self.input_channels
        {
            return Err(Error::InvalidArgument(
                "input_mean/input_std length must equal input_channels".into(),
            ));
        }
        if self.input_std.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument("input_std must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let bad = match l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => *out_channels == 0 || *kernel == 0 || *stride == 0,
                LayerSpec::MaxPool { kernel, stride } => *kernel == 0 || *stride == 0,
                LayerSpec::Identity => false,
            };
            if bad {
                return Err(Error::Config {
                    layer: i,
                    message: "sizes and strides must be positive".into(),
                });
            }
        }
        Ok(())
    }

    /// Output shape of every layer for an input of `shape`.
    pub fn layer_shapes(&self, shape: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let [mut h, mut w, mut c] = shape;
        if c != self.input_channels {
            return Err(Error::Config {
                layer: 0,
                message: format!(
                    "input has {c} channels, backbone expects {}",
                    self.input_channels
                ),
            });
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(Error::Config {
                            layer: i,
                            message: format!(
                                "{h}x{w} input too small for {kernel}x{kernel} kernel with padding {padding}"
                            ),
                        });
                    }
                    h = (h + 2 * padding - kernel) / stride + 1;
                    w = (w + 2 * padding - kernel) / stride + 1;
                    c = *out_channels;
                }
                LayerSpec::MaxPool { kernel, stride } => {
                    if h < *kernel || w < *kernel {
                        return Err(Error::Config {
                            layer: i,
                            message: format!("{h}x{w} input too small for {kernel}x{kernel} pool"),
                        });
                    }
                    h = (h - kernel) / stride + 1;
                    w = (w - kernel) / stride + 1;
                }
                LayerSpec::Identity => {}
            }
            out.push([h, w, c]);
        }
        Ok(out)
    }

    /// Shapes of the tapped activations.
    pub fn tap_shapes(&self, shape: [usize; 3]) -> Result<Vec<[usize; 3]>> {
        let all = self.layer_shapes(shape)?;
        Ok(self.taps.iter().map(|&t| all[t]).collect())
    }

    fn in_channels(&self) -> Vec<usize> {
        let mut c = self.input_channels;
        self.layers
            .iter()
            .map(|l| {
                let cin = c;
                if let LayerSpec::Conv { out_channels, .. } = l {
                    c = *out_channels;
                }
                cin
            })
            .collect()
    }
}

/// Kernel and bias of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// A backbone configuration with realized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    params: Vec<Option<ConvParams>>,
}

/// Activations at the tap points, one `[H_j, W_j, C_j]` tensor per tap.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<Tensor>,
}

impl FeatureStack {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(Tensor::all_finite)
    }
}

impl Backbone {
    /// Realizes weights from a seed with He-normal kernels and zero biases.
    pub fn random(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layers
            .iter()
            .zip(config.in_channels())
            .map(|(l, cin)| match l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = (kernel * kernel * cin) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                    let n = out_channels * kernel * kernel * cin;
                    let weight = Tensor::new(
                        vec![*out_channels, *kernel, *kernel, cin],
                        (0..n).map(|_| normal.sample(&mut rng)).collect(),
                    );
                    Some(ConvParams {
                        weight,
                        bias: Tensor::zeros(vec![*out_channels]),
                    })
                }
                _ => None,
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Realizes the weights named by `config.weight_source`.
    pub fn from_config(config: BackboneConfig) -> Result<Self> {
        match &config.weight_source {
            WeightSource::Seed(s) => Self::random(config.clone(), *s),
            WeightSource::Checkpoint(p) => {
                let loaded = crate::checkpoint::load_backbone(p)?;
                if loaded.config.layers != config.layers || loaded.config.taps != config.taps {
                    return Err(Error::InvalidArgument(format!(
                        "checkpoint {} holds a different layer configuration",
                        p.display()
                    )));
                }
                Ok(Self {
                    config,
                    params: loaded.params,
                })
            }
        }
    }

    /// Wraps explicit parameters, one entry per layer (`None` for layers
    /// without weights).
    pub fn with_params(config: BackboneConfig, params: Vec<Option<ConvParams>>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter slots for {} layers",
                params.len(),
                config.layers.len()
            )));
        }
        for (i, ((l, p), cin)) in config
            .layers
            .iter()
            .zip(&params)
            .zip(config.in_channels())
            .enumerate()
        {
            match (l, p) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        ..
                    },
                    Some(p),
                ) => {
                    let want = [*out_channels, *kernel, *kernel, cin];
                    if p.weight.shape() != want || p.bias.shape() != [*out_channels] {
                        return Err(Error::Config {
                            layer: i,
                            message: format!(
                                "kernel {:?} / bias {:?} do not match expected {want:?}",
                                p.weight.shape(),
                                p.bias.shape()
                            ),
                        });
                    }
                }
                (LayerSpec::Conv { .. }, None) => {
                    return Err(Error::Config {
                        layer: i,
                        message: "convolution without parameters".into(),
                    })
                }
                (_, Some(_)) => {
                    return Err(Error::Config {
                        layer: i,
                        message: "parameters given for a layer without weights".into(),
                    })
                }
                _ => {}
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Option<ConvParams>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Option<ConvParams>] {
        &mut self.params
    }

    pub fn num_taps(&self) -> usize {
        self.config.taps.len()
    }

    /// Channel count of every tap.
    pub fn tap_channels(&self) -> Vec<usize> {
        let mut c = self.config.input_channels;
        let mut per_layer = Vec::with_capacity(self.config.layers.len());
        for l in &self.config.layers {
            if let LayerSpec::Conv { out_channels, .. } = l {
                c = *out_channels;
            }
            per_layer.push(c);
        }
        self.config.taps.iter().map(|&t| per_layer[t]).collect()
    }

    /// Pushes the forward pass onto `g` and returns the tapped activations.
    /// With `trainable`, kernels and biases are gradient leaves and are
    /// returned alongside (one pair per convolution).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        x: Var,
        trainable: bool,
    ) -> Result<(Vec<Var>, Vec<(Var, Var)>)> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("backbone input must be [H, W, C], got {shape:?}")));
        }
        self.config.layer_shapes([shape[0], shape[1], shape[2]])?;
        let scale: Vec<f64> = self.config.input_std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f64> = self
            .config
            .input_mean
            .iter()
            .zip(&self.config.input_std)
            .map(|(m, s)| -m / s)
            .collect();
        let mut h = g.channel_affine(x, &scale, &shift);
        let mut taps = Vec::with_capacity(self.config.taps.len());
        let mut param_vars = Vec::new();
        let mut next_tap = 0;
        for (i, (l, p)) in self.config.layers.iter().zip(&self.params).enumerate() {
            h = match l {
                LayerSpec::Conv {
                    stride,
                    padding,
                    activation,
                    ..
                } => {
                    let p = p.as_ref().expect("validated at construction");
                    let (w, b) = if trainable {
                        (g.param(p.weight.clone()), g.param(p.bias.clone()))
                    } else {
                        (g.constant(p.weight.clone()), g.constant(p.bias.clone()))
                    };
                    if trainable {
                        param_vars.push((w, b));
                    }
                    let c = g.conv2d(h, w, b, *stride, *padding);
                    match activation {
                        Activation::Identity => c,
                        Activation::Relu => g.relu(c),
                        Activation::LeakyRelu(s) => g.leaky_relu(c, *s),
                    }
                }
                LayerSpec::MaxPool { kernel, stride } => g.max_pool(h, *kernel, *stride),
                LayerSpec::Identity => h,
            };
            if next_tap < self.config.taps.len() && self.config.taps[next_tap] == i {
                taps.push(h);
                next_tap += 1;
            }
        }
        Ok((taps, param_vars))
    }

    /// Forward pass with frozen weights.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        Ok(self.forward_with(g, x, false)?.0)
    }
}

/// Raw activations of `x` at the backbone's tap points.
pub fn extract_features(backbone: &Backbone, x: &Image) -> Result<FeatureStack> {
    let mut g = Graph::new();
    let xv = g.constant(x.tensor().clone());
    let taps = backbone.forward(&mut g, xv)?;
    Ok(FeatureStack {
        layers: taps.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}

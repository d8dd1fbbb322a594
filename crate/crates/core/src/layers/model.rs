use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{compressed_width, gagm_graph, he_uniform, sevector_graph, DEFAULT_REDUCTION_RATIO};
use crate::checkpoint::ParamStore;
use crate::config::{format_list, parse_bool, parse_list, parse_value, KeyValues};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, Graph, Padding, Tensor, Var};

/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.9;
const INFER_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub conv_widths: Vec<usize>,
    pub kernel: usize,
    pub padding: Padding,
    /// Width of the hidden dense layer; 0 means logits read the pooled
    /// vector directly.
    pub head_units: usize,
    pub dropout_rate: f64,
    pub classes: usize,
    pub enable_gagm: bool,
    pub enable_sevector: bool,
    pub reduction_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_widths: vec![4, 8],
            kernel: 3,
            padding: Padding::Same,
            head_units: 256,
            dropout_rate: 0.3,
            classes: 3,
            enable_gagm: true,
            enable_sevector: true,
            reduction_ratio: DEFAULT_REDUCTION_RATIO,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "conv_widths",
        "kernel",
        "padding",
        "head_units",
        "dropout_rate",
        "classes",
        "enable_gagm",
        "enable_sevector",
        "reduction_ratio",
        "seed",
    ];

    /// Applies one setting; returns `false` if the key is not a model key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "conv_widths" => self.conv_widths = parse_list(key, value)?,
            "kernel" => self.kernel = parse_value(key, value)?,
            "padding" => {
                self.padding = match value {
                    "same" => Padding::Same,
                    "valid" => Padding::Valid,
                    _ => return Err(Error::Config(format!("padding must be same|valid, got `{value}`"))),
                }
            }
            "head_units" => self.head_units = parse_value(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_value(key, value)?,
            "classes" => self.classes = parse_value(key, value)?,
            "enable_gagm" => self.enable_gagm = parse_bool(key, value)?,
            "enable_sevector" => self.enable_sevector = parse_bool(key, value)?,
            "reduction_ratio" => self.reduction_ratio = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn write_into(&self, kv: &mut KeyValues) {
        kv.set("conv_widths", format_list(&self.conv_widths));
        kv.set("kernel", self.kernel);
        kv.set(
            "padding",
            match self.padding {
                Padding::Same => "same",
                Padding::Valid => "valid",
            },
        );
        kv.set("head_units", self.head_units);
        kv.set("dropout_rate", self.dropout_rate);
        kv.set("classes", self.classes);
        kv.set("enable_gagm", self.enable_gagm);
        kv.set("enable_sevector", self.enable_sevector);
        kv.set("reduction_ratio", self.reduction_ratio);
        kv.set("seed", self.seed);
    }
}

/// Vector-valued activations exposed for feature losses and projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FeatureTap {
    /// Pooled vector (GAGM fusion, or GAP alone in the baseline).
    Fused,
    /// Pooled vector after attention gating.
    Attended,
    /// Hidden dense layer output, after ReLU.
    Head,
}

impl FeatureTap {
    pub fn name(self) -> &'static str {
        match self {
            FeatureTap::Fused => "fused",
            FeatureTap::Attended => "attended",
            FeatureTap::Head => "head",
        }
    }
}

impl fmt::Display for FeatureTap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureTap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(FeatureTap::Fused),
            "attended" => Ok(FeatureTap::Attended),
            "head" => Ok(FeatureTap::Head),
            _ => Err(Error::Config(format!("unknown feature layer `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerDesc {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu,
    GlobalAvgPool,
    Gagm,
    SeVector {
        name: String,
        width: usize,
        compressed: usize,
    },
    Dense {
        name: String,
        inputs: usize,
        units: usize,
    },
    Dropout {
        rate: f64,
    },
    Softmax,
}

/// Immutable description of a network: layer sequence, designated
/// interpretability layers and parameter names.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub input_hw: (usize, usize),
    pub layers: Vec<LayerDesc>,
    /// Index of the layer whose output is the Grad-CAM feature map.
    pub cam_layer: usize,
    /// Feature taps as `(tap, layer index read after, width)`.
    pub taps: Vec<(FeatureTap, usize, usize)>,
    /// Output of this layer index feeds the softmax (pre-softmax logits).
    pub logits_layer: usize,
}

impl ModelSpec {
    /// Default layer for feature losses: the hidden head output when
    /// present, otherwise the last tap.
    pub fn feature_tap(&self) -> FeatureTap {
        self.taps.last().map(|t| t.0).unwrap_or(FeatureTap::Fused)
    }

    pub fn has_tap(&self, tap: FeatureTap) -> bool {
        self.taps.iter().any(|t| t.0 == tap)
    }

    pub fn tap_width(&self, tap: FeatureTap) -> Option<usize> {
        self.taps.iter().find(|t| t.0 == tap).map(|t| t.2)
    }

    /// Shape of the last conv feature map for one image.
    pub fn cam_shape(&self) -> (usize, usize, usize) {
        let (mut h, mut w, mut c) = (self.input_hw.0, self.input_hw.1, 1);
        for l in &self.layers[..=self.cam_layer] {
            if let LayerDesc::Conv {
                out_channels,
                kernel,
                padding,
                ..
            } = l
            {
                if *padding == Padding::Valid {
                    h = h + 1 - kernel;
                    w = w + 1 - kernel;
                }
                c = *out_channels;
            }
        }
        (h, w, c)
    }

    /// Head input width: pooled vector length.
    pub fn head_input_width(&self) -> usize {
        self.tap_width(FeatureTap::Fused).unwrap_or(0)
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Trainable parameter names with shapes, in layer order.
    pub fn trainable(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l {
                LayerDesc::Conv {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push((format!("{name}.w"), vec![*kernel, *kernel, *in_channels, *out_channels]));
                    out.push((format!("{name}.b"), vec![*out_channels]));
                }
                LayerDesc::BatchNorm { name, channels } => {
                    out.push((format!("{name}.gamma"), vec![*channels]));
                    out.push((format!("{name}.beta"), vec![*channels]));
                }
                LayerDesc::SeVector {
                    name,
                    width,
                    compressed,
                } => {
                    out.push((format!("{name}.w1"), vec![*width, *compressed]));
                    out.push((format!("{name}.b1"), vec![*compressed]));
                    out.push((format!("{name}.w2"), vec![*compressed, *width]));
                    out.push((format!("{name}.b2"), vec![*width]));
                }
                LayerDesc::Dense { name, inputs, units } => {
                    out.push((format!("{name}.w"), vec![*inputs, *units]));
                    out.push((format!("{name}.b"), vec![*units]));
                }
                _ => {}
            }
        }
        out
    }

    /// Fresh parameters: He-uniform weights, zero biases, unit BN scale,
    /// and zero/one running statistics.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in self.trainable() {
            let t = if name.ends_with(".gamma") {
                Tensor::full(&shape, 1.0)
            } else if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[..shape.len() - 1].iter().product();
                he_uniform(&shape, fan_in, &mut rng)
            };
            store.insert(name, t);
        }
        for l in &self.layers {
            if let LayerDesc::BatchNorm { name, channels } = l {
                store.insert(format!("{name}.running_mean"), Tensor::zeros(&[*channels]));
                store.insert(format!("{name}.running_var"), Tensor::full(&[*channels], 1.0));
            }
        }
        store
    }
}

/// Builds the layer stack: `conv → batchnorm → relu` blocks, then GAGM (or
/// GAP alone when disabled), optional attention gating, and the
/// `dense → relu → dropout → dense → softmax` head.
pub fn build_model(config: &ModelConfig, input_hw: (usize, usize)) -> Result<ModelSpec> {
    if config.classes == 0 {
        return Err(Error::invalid("model needs at least one class"));
    }
    if config.conv_widths.is_empty() || config.conv_widths.contains(&0) {
        return Err(Error::invalid("model needs at least one conv layer of positive width"));
    }
    if config.kernel == 0 || config.reduction_ratio == 0 {
        return Err(Error::invalid("kernel and reduction_ratio must be positive"));
    }
    if !(0.0..1.0).contains(&config.dropout_rate) {
        return Err(Error::invalid("dropout_rate must be in [0, 1)"));
    }
    let (mut h, mut w) = input_hw;
    let mut layers = Vec::new();
    let mut channels = 1;
    for (i, &width) in config.conv_widths.iter().enumerate() {
        if config.padding == Padding::Valid {
            if h < config.kernel || w < config.kernel {
                return Err(Error::invalid(format!(
                    "conv{} leaves no spatial extent for a {h}x{w} input",
                    i + 1
                )));
            }
            h = h + 1 - config.kernel;
            w = w + 1 - config.kernel;
        }
        layers.push(LayerDesc::Conv {
            name: format!("conv{}", i + 1),
            in_channels: channels,
            out_channels: width,
            kernel: config.kernel,
            padding: config.padding,
        });
        layers.push(LayerDesc::BatchNorm {
            name: format!("bn{}", i + 1),
            channels: width,
        });
        layers.push(LayerDesc::Relu);
        channels = width;
    }
    let cam_layer = layers.len() - 1;
    let mut taps = Vec::new();
    let mut width = if config.enable_gagm {
        layers.push(LayerDesc::Gagm);
        2 * channels
    } else {
        layers.push(LayerDesc::GlobalAvgPool);
        channels
    };
    taps.push((FeatureTap::Fused, layers.len() - 1, width));
    if config.enable_sevector {
        layers.push(LayerDesc::SeVector {
            name: "se".into(),
            width,
            compressed: compressed_width(width, config.reduction_ratio),
        });
        taps.push((FeatureTap::Attended, layers.len() - 1, width));
    }
    if config.head_units > 0 {
        layers.push(LayerDesc::Dense {
            name: "head".into(),
            inputs: width,
            units: config.head_units,
        });
        layers.push(LayerDesc::Relu);
        taps.push((FeatureTap::Head, layers.len() - 1, config.head_units));
        layers.push(LayerDesc::Dropout {
            rate: config.dropout_rate,
        });
        width = config.head_units;
    }
    layers.push(LayerDesc::Dense {
        name: "logits".into(),
        inputs: width,
        units: config.classes,
    });
    let logits_layer = layers.len() - 1;
    layers.push(LayerDesc::Softmax);
    Ok(ModelSpec {
        config: config.clone(),
        input_hw,
        layers,
        cam_layer,
        taps,
        logits_layer,
    })
}

/// Variables produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Trainable parameter leaves, in [`ModelSpec::trainable`] order.
    pub params: Vec<(String, Var)>,
    pub logits: Var,
    pub probs: Var,
    pub cam: Var,
    pub taps: Vec<(FeatureTap, Var)>,
    /// Training-mode batchnorm outputs, for running-stat updates.
    pub batchnorms: Vec<(String, Var)>,
}

impl Forward {
    pub fn tap(&self, tap: FeatureTap) -> Option<Var> {
        self.taps.iter().find(|t| t.0 == tap).map(|t| t.1)
    }
}

/// Batched inference outputs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub classes: usize,
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub taps: Vec<(FeatureTap, usize, Vec<f64>)>,
}

impl Inference {
    pub fn len(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }

    /// Arg-max class per sample (first index on ties).
    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .chunks_exact(self.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (i, &p)| if p > best.1 { (i, p) } else { best },
                    )
                    .0
            })
            .collect()
    }

    /// Feature matrix (`N×D`) for a tap.
    pub fn tap(&self, tap: FeatureTap) -> Option<(usize, &[f64])> {
        self.taps
            .iter()
            .find(|t| t.0 == tap)
            .map(|(_, d, v)| (*d, v.as_slice()))
    }
}

/// Converts `n` single-channel `h×w` images to an `n×h×w×1` tensor.
pub fn images_to_tensor(pixels: &[f32], n: usize, h: usize, w: usize) -> Result<Tensor> {
    Tensor::new(vec![n, h, w, 1], pixels.iter().map(|&p| f64::from(p)).collect())
}

/// A model description together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Self {
        let params = spec.init_params(seed);
        Model { spec, params }
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn with_params(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let expected = spec.init_params(0);
        for (name, t) in expected.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::shape("parameter", t.shape(), got.shape()));
            }
        }
        Ok(Model { spec, params })
    }

    /// Runs the network on `x` (`N×H×W×1`) already placed in `g`.
    ///
    /// In training mode batchnorm uses batch statistics and dropout draws
    /// masks from `rng`; otherwise running statistics are used and dropout
    /// is the identity. Parameters are graph leaves tracked for gradients
    /// iff `track_params`.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        x: Var,
        training: bool,
        track_params: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let (h, w) = self.spec.input_hw;
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1] != h || xs[2] != w || xs[3] != 1 {
            return Err(Error::shape("model input", xs, &[0, h, w, 1]));
        }
        let mut params = Vec::new();
        let mut leaf = |g: &mut Graph, name: String| -> Result<Var> {
            let t = self.params.require(&name)?.clone();
            let v = if track_params { g.param(t) } else { g.constant(t) };
            params.push((name, v));
            Ok(v)
        };
        let mut cur = x;
        let mut cam = None;
        let mut logits = None;
        let mut taps = Vec::new();
        let mut batchnorms = Vec::new();
        for (idx, layer) in self.spec.layers.iter().enumerate() {
            cur = match layer {
                LayerDesc::Conv { name, padding, .. } => {
                    let wv = leaf(g, format!("{name}.w"))?;
                    let bv = leaf(g, format!("{name}.b"))?;
                    g.conv2d(cur, wv, bv, *padding)?
                }
                LayerDesc::BatchNorm { name, .. } => {
                    let gamma = leaf(g, format!("{name}.gamma"))?;
                    let beta = leaf(g, format!("{name}.beta"))?;
                    if training {
                        let out = g.batch_norm(cur, gamma, beta, BnMode::Train)?;
                        batchnorms.push((name.clone(), out));
                        out
                    } else {
                        let mean = self.params.require(&format!("{name}.running_mean"))?;
                        let var = self.params.require(&format!("{name}.running_var"))?;
                        let mode = BnMode::Infer {
                            mean: mean.data(),
                            var: var.data(),
                        };
                        g.batch_norm(cur, gamma, beta, mode)?
                    }
                }
                LayerDesc::Relu => g.relu(cur),
                LayerDesc::GlobalAvgPool => g.global_avg_pool(cur)?,
                LayerDesc::Gagm => gagm_graph(g, cur)?.2,
                LayerDesc::SeVector { name, .. } => {
                    let p = [
                        leaf(g, format!("{name}.w1"))?,
                        leaf(g, format!("{name}.b1"))?,
                        leaf(g, format!("{name}.w2"))?,
                        leaf(g, format!("{name}.b2"))?,
                    ];
                    sevector_graph(g, cur, p)?.1
                }
                LayerDesc::Dense { name, .. } => {
                    let wv = leaf(g, format!("{name}.w"))?;
                    let bv = leaf(g, format!("{name}.b"))?;
                    g.dense(cur, wv, bv)?
                }
                LayerDesc::Dropout { rate } => g.dropout(cur, *rate, training, rng)?,
                LayerDesc::Softmax => g.softmax(cur)?,
            };
            if idx == self.spec.cam_layer {
                cam = Some(cur);
            }
            if idx == self.spec.logits_layer {
                logits = Some(cur);
            }
            if let Some((tap, _, _)) = self.spec.taps.iter().find(|t| t.1 == idx) {
                taps.push((*tap, cur));
            }
        }
        Ok(Forward {
            params,
            logits: logits.expect("spec has a logits layer"),
            probs: cur,
            cam: cam.expect("spec has a cam layer"),
            taps,
            batchnorms,
        })
    }

    /// Exponential moving update of running statistics from a training
    /// forward pass.
    pub fn update_running_stats(&mut self, g: &Graph, fwd: &Forward) {
        for (name, v) in &fwd.batchnorms {
            let Some((mean, var)) = g.batch_stats(*v) else { continue };
            for (key, batch) in [("running_mean", mean), ("running_var", var)] {
                if let Some(t) = self.params.get_mut(&format!("{name}.{key}")) {
                    for (r, b) in t.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
            }
        }
    }

    /// Inference-mode outputs for `n` images of `pixels`.
    pub fn infer(&self, pixels: &[f32], n: usize) -> Result<Inference> {
        let (h, w) = self.spec.input_hw;
        if pixels.len() != n * h * w {
            return Err(Error::shape("infer", &[n, h, w], &[pixels.len()]));
        }
        let classes = self.spec.classes();
        let mut out = Inference {
            classes,
            probs: Vec::with_capacity(n * classes),
            logits: Vec::with_capacity(n * classes),
            taps: self
                .spec
                .taps
                .iter()
                .map(|&(t, _, width)| (t, width, Vec::new()))
                .collect(),
        };
        // Dropout is inactive in inference, so the rng is never drawn.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let per = h * w;
        let mut start = 0;
        while start < n {
            let len = INFER_CHUNK.min(n - start);
            let mut g = Graph::new();
            let x = g.constant(images_to_tensor(&pixels[start * per..(start + len) * per], len, h, w)?);
            let fwd = self.forward(&mut g, x, false, false, &mut rng)?;
            out.probs.extend_from_slice(g.value(fwd.probs).data());
            out.logits.extend_from_slice(g.value(fwd.logits).data());
            for ((_, _, dst), (_, v)) in out.taps.iter_mut().zip(&fwd.taps) {
                dst.extend_from_slice(g.value(*v).data());
            }
            start += len;
        }
        Ok(out)
    }
}

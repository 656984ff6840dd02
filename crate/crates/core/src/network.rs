//! Fully convolutional classifier with a designated feedback layer.
//!
//! Layout: `feature_stack` convs (ReLU after each) → optional suppression
//! mask at the output of `feature_stack[feedback_layer_index]` → `head_stack`
//! convs → global average pooling → classifier. Class activation maps are
//! read off the final head features.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, sigmoid};
use crate::tensor::{read_tns, write_tns, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn out_extent(&self, input: usize) -> usize {
        (input + 2 * self.pad() - self.kernel) / self.stride + 1
    }
}

/// How pooled head features become class scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierHead {
    /// GAP followed by a fully connected `class_count × features` layer.
    Linear,
    /// The last head conv emits one channel per class (no ReLU); GAP of it is the logit.
    ClassMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcnConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub class_count: usize,
    pub feature_stack: Vec<ConvSpec>,
    pub feedback_layer_index: usize,
    pub head_stack: Vec<ConvSpec>,
    pub classifier: ClassifierHead,
    /// Inputs enter the first conv as `(x - input_mean) / input_std`.
    pub input_mean: f32,
    pub input_std: f32,
    pub rng_seed: u64,
}

impl Default for FcnConfig {
    fn default() -> Self {
        FcnConfig::toy(4, 0)
    }
}

impl FcnConfig {
    /// The 64×64 toy network: four feature convs down to 16×16, a 64-channel
    /// head conv and a 1×1 class-map conv.
    pub fn toy(class_count: usize, rng_seed: u64) -> Self {
        FcnConfig {
            input_size: 64,
            input_channels: 1,
            class_count,
            feature_stack: vec![
                ConvSpec::new(16, 3, 1),
                ConvSpec::new(16, 3, 2),
                ConvSpec::new(32, 3, 1),
                ConvSpec::new(32, 3, 2),
            ],
            feedback_layer_index: 3,
            head_stack: vec![ConvSpec::new(64, 3, 1), ConvSpec::new(class_count, 1, 1)],
            classifier: ClassifierHead::ClassMap,
            input_mean: 0.2,
            input_std: 0.2,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.class_count < 2 {
            return fail(format!("class_count must be at least 2, got {}", self.class_count));
        }
        if self.input_size == 0 || self.input_channels == 0 {
            return fail("input_size and input_channels must be positive".into());
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite() && self.input_mean.is_finite()) {
            return fail(format!(
                "input normalization needs a finite mean and positive std, got {} / {}",
                self.input_mean, self.input_std
            ));
        }
        if self.feedback_layer_index >= self.feature_stack.len() {
            return fail(format!(
                "feedback_layer_index {} is outside the {}-layer feature stack",
                self.feedback_layer_index,
                self.feature_stack.len()
            ));
        }
        for (i, layer) in self.conv_layers().iter().enumerate() {
            if layer.kernel % 2 == 0 || layer.stride == 0 || layer.out_channels == 0 {
                return fail(format!(
                    "conv layer {i} must have an odd kernel, positive stride and channels: {layer:?}"
                ));
            }
        }
        match self.classifier {
            ClassifierHead::ClassMap => match self.head_stack.last() {
                Some(last) if last.out_channels == self.class_count => {}
                _ => {
                    return fail(format!(
                        "class_map classifier needs a final head conv with {} channels",
                        self.class_count
                    ))
                }
            },
            ClassifierHead::Linear => {}
        }
        let mut size = self.input_size;
        for layer in self.conv_layers() {
            if size + 2 * layer.pad() < layer.kernel {
                return fail(format!("input size {} collapses before layer {layer:?}", self.input_size));
            }
            size = layer.out_extent(size);
        }
        Ok(())
    }

    pub fn conv_layers(&self) -> Vec<ConvSpec> {
        self.feature_stack
            .iter()
            .chain(&self.head_stack)
            .copied()
            .collect()
    }

    fn spatial_after(&self, layers: usize) -> usize {
        self.conv_layers()[..layers]
            .iter()
            .fold(self.input_size, |s, l| l.out_extent(s))
    }

    /// Spatial extent of the feedback layer output (the mask resolution).
    pub fn feedback_size(&self) -> usize {
        self.spatial_after(self.feedback_layer_index + 1)
    }

    /// Spatial extent of the heat maps.
    pub fn heatmap_size(&self) -> usize {
        self.spatial_after(self.feature_stack.len() + self.head_stack.len())
    }

    /// Parameter shapes in storage order: (weights, bias) per conv, then the classifier.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut in_ch = self.input_channels;
        for layer in self.conv_layers() {
            shapes.push(vec![layer.out_channels, in_ch, layer.kernel, layer.kernel]);
            shapes.push(vec![layer.out_channels]);
            in_ch = layer.out_channels;
        }
        if self.classifier == ClassifierHead::Linear {
            shapes.push(vec![self.class_count, in_ch]);
            shapes.push(vec![self.class_count]);
        }
        shapes
    }

    fn relu_after(&self, conv_index: usize) -> bool {
        let last = self.feature_stack.len() + self.head_stack.len() - 1;
        !(conv_index == last && self.classifier == ClassifierHead::ClassMap)
    }
}

/// Per-class heat maps and probabilities for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMapSet {
    /// (class_count, h, w)
    pub maps: Tensor,
    pub probs: Vec<f32>,
    pub phase: usize,
}

impl HeatMapSet {
    pub fn class_map(&self, class: usize) -> Tensor {
        self.maps.slice_outer(class)
    }
}

/// Outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar> {
    /// Feedback-layer activations after masking.
    pub features_at_feedback: Tensor<T>,
    pub head_features: Tensor<T>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Forward pass plus the intermediates the backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar> {
    conv_inputs: Vec<Tensor<T>>,
    pre_activations: Vec<Tensor<T>>,
    mask: Option<Tensor<T>>,
    pooled: Tensor<T>,
    pub output: ForwardOutput<T>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Conv outputs before their nonlinearity, one per conv layer.
    pub fn pre_activations(&self) -> &[Tensor<T>] {
        &self.pre_activations
    }
}

#[derive(Clone, Debug)]
pub struct ModelGrads<T: Scalar> {
    pub params: Vec<Tensor<T>>,
    pub input: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcnModel<T: Scalar = f32> {
    pub config: FcnConfig,
    pub params: Vec<Tensor<T>>,
}

pub fn init_model(config: &FcnConfig) -> Result<FcnModel> {
    FcnModel::init(config)
}

impl FcnModel<f32> {
    /// He-scaled Gaussian weights drawn from `config.rng_seed`; zero biases.
    pub fn init(config: &FcnConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
            })
            .collect();
        Ok(FcnModel {
            config: config.clone(),
            params,
        })
    }

    /// CAM heat maps and class probabilities for one (C, H, W) or (1, C, H, W) image.
    ///
    /// Linear head: `H^c(u) = Σ_k w_ck F_k(u)`. Class-map head: channel `c` of the final conv.
    pub fn compute_heatmaps(&self, image: &Tensor, phase: usize) -> Result<HeatMapSet> {
        let batch = match image.rank() {
            3 => image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
            4 if image.shape()[0] == 1 => image.clone(),
            _ => {
                return Err(Error::invalid(
                    "compute_heatmaps",
                    format!("expected a single image, got shape {:?}", image.shape()),
                ))
            }
        };
        let out = self.forward(&batch, None)?;
        let (_, features, h, w) = out.head_features.dims4("compute_heatmaps")?;
        let area = h * w;
        let classes = self.config.class_count;
        let maps = match self.config.classifier {
            ClassifierHead::ClassMap => out.head_features.reshape(&[classes, h, w])?,
            ClassifierHead::Linear => {
                let weights = &self.params[self.params.len() - 2];
                let mut maps = Tensor::zeros(&[classes, h, w]);
                f32::gemm(
                    classes,
                    features,
                    area,
                    weights.data(),
                    (features as isize, 1),
                    out.head_features.data(),
                    (area as isize, 1),
                    maps.data_mut(),
                    false,
                );
                maps
            }
        };
        Ok(HeatMapSet {
            maps,
            probs: out.probs.into_data(),
            phase,
        })
    }

    /// Per-class bias added to the spatial mean of a heat map to recover the logit.
    pub fn class_bias(&self) -> Vec<f32> {
        match self.config.classifier {
            ClassifierHead::Linear => self.params.last().unwrap().data().to_vec(),
            ClassifierHead::ClassMap => vec![0.0; self.config.class_count],
        }
    }

    /// Order-sensitive FNV-1a checksum over the raw parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for p in &self.params {
            for v in p.data() {
                for b in v.to_bits().to_le_bytes() {
                    hash ^= b as u64;
                    hash = hash.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        hash
    }
}

impl<T: Scalar> FcnModel<T> {
    pub fn cast<U: Scalar>(&self) -> FcnModel<U> {
        FcnModel {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn forward(&self, batch: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<ForwardOutput<T>> {
        Ok(self.forward_trace(batch, mask)?.output)
    }

    /// Runs the network and keeps everything needed by [`FcnModel::backward`].
    ///
    /// `mask` is an (h, w) grid at the feedback layer's resolution, shared by
    /// every image of the batch.
    pub fn forward_trace(&self, batch: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<ForwardTrace<T>> {
        let cfg = &self.config;
        let (_, ch, h, w) = batch.dims4("forward")?;
        if (ch, h, w) != (cfg.input_channels, cfg.input_size, cfg.input_size) {
            return Err(Error::invalid(
                "forward",
                format!(
                    "batch shape {:?} does not match the configured {}×{}×{} input",
                    batch.shape(),
                    cfg.input_channels,
                    cfg.input_size,
                    cfg.input_size
                ),
            ));
        }
        if let Some(m) = mask {
            let fb = cfg.feedback_size();
            if m.shape() != [fb, fb] {
                return Err(Error::invalid(
                    "forward",
                    format!(
                        "suppression mask shape {:?} does not match the {fb}×{fb} feedback layer",
                        m.shape()
                    ),
                ));
            }
        }
        let convs = cfg.conv_layers();
        let mut conv_inputs = Vec::with_capacity(convs.len());
        let mut pre_activations = Vec::with_capacity(convs.len());
        let (mean, std) = (T::from_f64_lossy(cfg.input_mean as f64), T::from_f64_lossy(cfg.input_std as f64));
        let mut x = batch.map(|v| (v - mean) / std);
        let mut features_at_feedback = None;
        for (i, layer) in convs.iter().enumerate() {
            let pre = ops::conv2d(&x, &self.params[2 * i], &self.params[2 * i + 1], layer.stride, layer.pad())?;
            let mut act = if cfg.relu_after(i) { ops::relu(&pre) } else { pre.clone() };
            if i == cfg.feedback_layer_index {
                if let Some(m) = mask {
                    act = ops::masked_multiply(&act, m)?;
                }
                features_at_feedback = Some(act.clone());
            }
            conv_inputs.push(std::mem::replace(&mut x, act));
            pre_activations.push(pre);
        }
        let head_features = x;
        let pooled = ops::global_average_pool(&head_features)?;
        let logits = match cfg.classifier {
            ClassifierHead::Linear => {
                let n = self.params.len();
                ops::linear(&pooled, &self.params[n - 2], &self.params[n - 1])?
            }
            ClassifierHead::ClassMap => pooled.clone(),
        };
        let probs = logits.map(sigmoid);
        Ok(ForwardTrace {
            conv_inputs,
            pre_activations,
            mask: mask.cloned(),
            pooled,
            output: ForwardOutput {
                features_at_feedback: features_at_feedback.expect("feedback index validated"),
                head_features,
                logits,
                probs,
            },
        })
    }

    /// Backpropagates `grad_logits` through a recorded forward pass.
    pub fn backward(&self, trace: &ForwardTrace<T>, grad_logits: &Tensor<T>) -> Result<ModelGrads<T>> {
        self.backward_impl(trace, grad_logits, true)
    }

    /// Parameter gradients only; `ModelGrads::input` is left zero.
    pub fn backward_params(&self, trace: &ForwardTrace<T>, grad_logits: &Tensor<T>) -> Result<ModelGrads<T>> {
        self.backward_impl(trace, grad_logits, false)
    }

    fn backward_impl(
        &self,
        trace: &ForwardTrace<T>,
        grad_logits: &Tensor<T>,
        with_input_grad: bool,
    ) -> Result<ModelGrads<T>> {
        let cfg = &self.config;
        if grad_logits.shape() != trace.output.logits.shape() {
            return Err(Error::shape("backward", trace.output.logits.shape(), grad_logits.shape()));
        }
        let mut grads: Vec<Tensor<T>> = Vec::with_capacity(self.params.len());
        let mut classifier_grads = Vec::new();
        let grad_pooled = match cfg.classifier {
            ClassifierHead::Linear => {
                let n = self.params.len();
                let lg = ops::linear_backward(&trace.pooled, &self.params[n - 2], grad_logits)?;
                classifier_grads = lg.grad_params;
                lg.grad_input
            }
            ClassifierHead::ClassMap => grad_logits.clone(),
        };
        let mut grad = ops::global_average_pool_backward(trace.output.head_features.shape(), &grad_pooled)?;
        let convs = cfg.conv_layers();
        for i in (0..convs.len()).rev() {
            if i == cfg.feedback_layer_index {
                if let Some(m) = &trace.mask {
                    grad = ops::masked_multiply_backward(&grad, m)?;
                }
            }
            if cfg.relu_after(i) {
                grad = ops::relu_backward(&trace.pre_activations[i], &grad)?;
            }
            let lg = ops::conv2d_backward_impl(
                &trace.conv_inputs[i],
                &self.params[2 * i],
                convs[i].stride,
                convs[i].pad(),
                &grad,
                with_input_grad || i > 0,
            )?;
            let mut p = lg.grad_params.into_iter();
            let gb = p.next_back().unwrap();
            let gw = p.next_back().unwrap();
            grads.push(gb);
            grads.push(gw);
            grad = lg.grad_input;
        }
        grads.reverse();
        grads.extend(classifier_grads);
        if with_input_grad {
            let std = T::from_f64_lossy(cfg.input_std as f64);
            grad = grad.map(|g| g / std);
        }
        Ok(ModelGrads { params: grads, input: grad })
    }
}

const FCN_MAGIC: &[u8; 4] = b"FCN1";

impl FcnModel<f32> {
    /// `FCN1` container: magic, u32 LE header length, JSON config, then one `TNS1` per parameter.
    pub fn write_to<W: Write>(&self, writer: &mut W) -> std::io::Result<()> {
        let header = serde_json::to_vec(&self.config).map_err(std::io::Error::other)?;
        writer.write_all(FCN_MAGIC)?;
        writer.write_all(&(header.len() as u32).to_le_bytes())?;
        writer.write_all(&header)?;
        for p in &self.params {
            write_tns(writer, p)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(reader: &mut R) -> Result<Self> {
        let bad = |d: String| Error::format("FCN1 checkpoint", d);
        let mut magic = [0u8; 4];
        reader.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != FCN_MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let mut len = [0u8; 4];
        reader.read_exact(&mut len).map_err(|e| bad(e.to_string()))?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        reader.read_exact(&mut header).map_err(|e| bad(e.to_string()))?;
        let config: FcnConfig =
            serde_json::from_slice(&header).map_err(|e| bad(format!("header: {e}")))?;
        config.validate()?;
        let mut params = Vec::new();
        for shape in config.param_shapes() {
            let t = read_tns(reader)?;
            if t.shape() != shape {
                return Err(Error::shape("FCN1 parameter", &shape, t.shape()));
            }
            params.push(t);
        }
        Ok(FcnModel { config, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

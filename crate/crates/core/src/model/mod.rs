//! The detection network: three convolutional blocks whose outputs are
//! fused into a hypercolumn at 1/4 input resolution, followed by a two-layer
//! classification head and a per-cell softmax over (background, ball).

mod checkpoint;

pub use checkpoint::{ArraySpec, Checkpoint, CheckpointHeader, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm, batchnorm_backward, batchnorm_infer, concat_channels, conv2d, maxpool2x2, maxpool2x2_backward, relu,
    relu_backward, softmax_channels, split_channels, upsample_nearest, upsample_nearest_backward, BatchNormCache,
    BatchNormParams, BnMode, ConvLayerParams, Element, Padding, PoolIndices, Shape, Tensor4,
};

/// Ratio between input resolution and confidence-map resolution.
pub const SCALING_FACTOR: usize = 4;

/// Trainable scalars of the full architecture.
pub const PARAMS_WITH_HYPERCOLUMN: usize = 48_658;

/// Trainable scalars reported for the single-scale ablation.
pub const PARAMS_WITHOUT_HYPERCOLUMN_REPORTED: usize = 29_146;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Fuse Conv1, Conv2 and Conv3 outputs; when false only Conv3 feeds the head.
    pub hypercolumn: bool,
    pub input_channels: usize,
    pub scaling_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hypercolumn: true,
            input_channels: 3,
            scaling_factor: SCALING_FACTOR,
        }
    }
}

impl ModelConfig {
    pub fn ablation() -> Self {
        ModelConfig {
            hypercolumn: false,
            ..Self::default()
        }
    }
}

/// Pixel normalization: `(p / pixel_max - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub pixel_max: f32,
    pub mean: f32,
    pub std: f32,
}

impl Default for InputNorm {
    fn default() -> Self {
        InputNorm {
            pixel_max: 255.0,
            mean: 0.5,
            std: 0.5,
        }
    }
}

impl InputNorm {
    #[inline]
    pub fn apply(&self, pixel: u8) -> f32 {
        ((pixel as f64 / self.pixel_max as f64 - self.mean as f64) / self.std as f64) as f32
    }
}

/// Convolution, optional batch norm, optional ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub conv: ConvLayerParams,
    pub bn: Option<BatchNormParams>,
    pub relu: bool,
}

impl ConvUnit {
    fn trainable(&self) -> usize {
        self.conv.num_params() + self.bn.as_ref().map_or(0, |b| 2 * b.channels())
    }
}

/// Output probabilities, channel 0 = background, channel 1 = ball.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(Tensor4);

impl ConfidenceMap {
    pub const BACKGROUND: usize = 0;
    pub const BALL: usize = 1;

    /// Wraps a 2-channel probability tensor.
    pub fn new(probs: Tensor4) -> Result<Self> {
        if probs.shape().c != 2 {
            return Err(Error::shape(
                "ConfidenceMap::new",
                format!("expected 2 channels, got {}", probs.shape()),
            ));
        }
        Ok(ConfidenceMap(probs))
    }

    pub fn tensor(&self) -> &Tensor4 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor4 {
        self.0
    }

    pub fn shape(&self) -> Shape {
        self.0.shape()
    }

    pub fn batch(&self) -> usize {
        self.0.shape().n
    }

    pub fn height(&self) -> usize {
        self.0.shape().h
    }

    pub fn width(&self) -> usize {
        self.0.shape().w
    }

    /// Ball-probability plane of image `n`, row-major.
    pub fn ball(&self, n: usize) -> &[f32] {
        self.0.plane(n, Self::BALL)
    }

    pub fn background(&self, n: usize) -> &[f32] {
        self.0.plane(n, Self::BACKGROUND)
    }

    /// Single-image map for batch item `n`.
    pub fn item(&self, n: usize) -> ConfidenceMap {
        ConfidenceMap(self.0.slice_item(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Activations kept by a train-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    units: Vec<UnitCache>,
    pools: Vec<PoolIndices>,
    /// Shapes of the three pooled block outputs.
    block_shapes: [Shape; 3],
    hypercolumn: bool,
}

#[derive(Debug, Clone)]
struct UnitCache {
    input: Tensor4,
    bn: Option<BatchNormCache>,
    /// Post-activation output (only kept when the unit has a ReLU).
    output: Option<Tensor4>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Pre-softmax scores, shape (n, 2, h/4, w/4).
    pub logits: Tensor4,
    pub confidence: ConfidenceMap,
    pub cache: Option<ForwardCache>,
}

/// Gradients for every trainable array, in [`Model::parameters`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradients {
    pub entries: Vec<(String, Vec<f32>)>,
}

impl ParameterGradients {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    pub fn values(&self) -> impl Iterator<Item = &[f32]> {
        self.entries.iter().map(|(_, v)| v.as_slice())
    }
}

/// Backward result plus the gradient the head sent to each block output
/// (Conv1, Conv2, Conv3) through the hypercolumn split, before any
/// contribution from deeper blocks.
#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub grads: ParameterGradients,
    pub head_routing: [Tensor4; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    norm: InputNorm,
    seed: u64,
    /// conv1.0, conv1.1, conv2.0, conv2.1, conv3.0, conv3.1, conv4.0, conv4.1
    units: Vec<ConvUnit>,
}

const BLOCK_WIDTHS: [usize; 3] = [8, 16, 32];
const HEAD_WIDTH: usize = 56;

fn init_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize, k: usize, stride: usize) -> Result<ConvLayerParams> {
    let fan_in = (cin * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt() as f32;
    let shape = Shape::new(cout, cin, k, k);
    let data = (0..shape.numel()).map(|_| rng.gen_range(-bound..bound)).collect();
    ConvLayerParams::new(Tensor4::from_vec(shape, data)?, vec![0.0; cout], stride, Padding::Same)
}

/// Initialized network. Weights ~ U(-b, b) with `b = sqrt(6 / fan_in)`,
/// biases 0, batch-norm scale 1 / shift 0.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    if config.scaling_factor != SCALING_FACTOR {
        return Err(Error::param(format!(
            "scaling factor is fixed at {SCALING_FACTOR}, got {}",
            config.scaling_factor
        )));
    }
    if config.input_channels == 0 {
        return Err(Error::param("input_channels must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut units = Vec::with_capacity(8);
    let mut cin = config.input_channels;
    for (b, &width) in BLOCK_WIDTHS.iter().enumerate() {
        for l in 0..2 {
            let (k, stride) = if b == 0 && l == 0 { (7, 2) } else { (3, 1) };
            units.push(ConvUnit {
                name: format!("conv{}.{l}", b + 1),
                conv: init_conv(&mut rng, width, cin, k, stride)?,
                bn: Some(BatchNormParams::new(width)),
                relu: true,
            });
            cin = width;
        }
    }
    let head_in = if config.hypercolumn {
        BLOCK_WIDTHS.iter().sum()
    } else {
        BLOCK_WIDTHS[2]
    };
    units.push(ConvUnit {
        name: "conv4.0".into(),
        conv: init_conv(&mut rng, HEAD_WIDTH, head_in, 3, 1)?,
        bn: None,
        relu: true,
    });
    units.push(ConvUnit {
        name: "conv4.1".into(),
        conv: init_conv(&mut rng, 2, HEAD_WIDTH, 3, 1)?,
        bn: None,
        relu: false,
    });
    Ok(Model {
        config,
        norm: InputNorm::default(),
        seed,
        units,
    })
}

fn unit_infer(unit: &ConvUnit, x: &Tensor4) -> Result<Tensor4> {
    let mut y = conv2d(x, &unit.conv)?;
    if let Some(bn) = &unit.bn {
        y = batchnorm_infer(&y, bn)?;
    }
    if unit.relu {
        y = relu(&y);
    }
    Ok(y)
}

fn unit_train(unit: &mut ConvUnit, x: &Tensor4) -> Result<(Tensor4, UnitCache)> {
    let mut y = conv2d(x, &unit.conv)?;
    let mut bn_cache = None;
    if let Some(bn) = unit.bn.as_mut() {
        let (z, c) = batchnorm(&y, bn, BnMode::Train)?;
        y = z;
        bn_cache = c;
    }
    if unit.relu {
        y = relu(&y);
    }
    let cache = UnitCache {
        input: x.clone(),
        bn: bn_cache,
        output: unit.relu.then(|| y.clone()),
    };
    Ok((y, cache))
}

/// Shared layer wiring for both modes; `unit` runs conv unit `i` on its input.
fn run_network<T: Element>(
    hypercolumn: bool,
    shapes: [Shape; 3],
    images: &Tensor4<T>,
    mut pools: Option<&mut Vec<PoolIndices>>,
    mut unit: impl FnMut(usize, &Tensor4<T>) -> Result<Tensor4<T>>,
) -> Result<Tensor4<T>> {
    let mut blocks = Vec::with_capacity(3);
    let mut x = unit(0, images)?;
    x = unit(1, &x)?;
    for b in 0..3 {
        if b > 0 {
            x = unit(2 * b, &blocks[b - 1])?;
            x = unit(2 * b + 1, &x)?;
        }
        let (p, idx) = maxpool2x2(&x)?;
        if let Some(pools) = pools.as_mut() {
            pools.push(idx);
        }
        blocks.push(p);
    }
    let (th, tw) = (shapes[0].h, shapes[0].w);
    let head_in = if hypercolumn {
        let up2 = upsample_nearest(&blocks[1], th, tw)?;
        let up3 = upsample_nearest(&blocks[2], th, tw)?;
        concat_channels(&[&blocks[0], &up2, &up3])?
    } else {
        upsample_nearest(&blocks[2], th, tw)?
    };
    let h = unit(6, &head_in)?;
    unit(7, &h)
}

/// Returns the input gradient (unless `want_input` is false) and pushes this
/// unit's parameter gradients (weight, bias, bn scale, bn shift) into `out`.
fn unit_backward(
    unit: &ConvUnit,
    cache: &UnitCache,
    grad: Tensor4,
    want_input: bool,
    out: &mut Vec<Vec<f32>>,
) -> Result<Option<Tensor4>> {
    let mut g = grad;
    if let Some(y) = &cache.output {
        g = relu_backward(y, &g)?;
    }
    let mut bn_grads = None;
    if let (Some(bn), Some(bn_cache)) = (unit.bn.as_ref(), cache.bn.as_ref()) {
        let (gi, gs, gb) = batchnorm_backward(bn_cache, bn, &g)?;
        g = gi;
        bn_grads = Some((gs, gb));
    }
    let cg = crate::tensor::conv2d_backward_impl(&cache.input, &unit.conv, &g, want_input)?;
    out.push(cg.weights.into_vec());
    out.push(cg.bias);
    if let Some((gs, gb)) = bn_grads {
        out.push(gs);
        out.push(gb);
    }
    Ok(cg.input)
}

impl Model {
    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn input_norm(&self) -> InputNorm {
        self.norm
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn units(&self) -> &[ConvUnit] {
        &self.units
    }

    pub fn units_mut(&mut self) -> &mut [ConvUnit] {
        &mut self.units
    }

    pub fn num_trainable(&self) -> usize {
        self.units.iter().map(ConvUnit::trainable).sum()
    }

    /// Confidence-map size for an input of `h` x `w` pixels.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.block_shapes(Shape::new(1, self.config.input_channels, h, w))?;
        Ok((s[0].h, s[0].w))
    }

    /// Pooled output shapes of the three blocks, validating that every
    /// pooling stage has at least a 2x2 input.
    fn block_shapes(&self, input: Shape) -> Result<[Shape; 3]> {
        if input.c != self.config.input_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "images {input} have {} channels, model expects {}",
                    input.c, self.config.input_channels
                ),
            ));
        }
        let mut s = input;
        let mut out = [s; 3];
        for (b, slot) in out.iter_mut().enumerate() {
            s = self.units[2 * b].conv.output_shape(s)?;
            s = self.units[2 * b + 1].conv.output_shape(s)?;
            if s.h < 2 || s.w < 2 {
                return Err(Error::shape(
                    "forward",
                    format!("input {input} is too small: block {} reaches {}x{}", b + 1, s.h, s.w),
                ));
            }
            s = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
            *slot = s;
        }
        Ok(out)
    }

    /// Trainable arrays in canonical order, per unit: weight, bias, and when
    /// present bn.scale, bn.shift.
    pub fn parameters(&self) -> Vec<(String, &[f32])> {
        let mut out = Vec::new();
        for u in &self.units {
            out.push((format!("{}.weight", u.name), u.conv.weights.data()));
            out.push((format!("{}.bias", u.name), u.conv.bias.as_slice()));
            if let Some(bn) = &u.bn {
                out.push((format!("{}.bn.scale", u.name), bn.scale.as_slice()));
                out.push((format!("{}.bn.shift", u.name), bn.shift.as_slice()));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for u in &mut self.units {
            out.push(u.conv.weights.data_mut());
            out.push(u.conv.bias.as_mut_slice());
            if let Some(bn) = &mut u.bn {
                out.push(bn.scale.as_mut_slice());
                out.push(bn.shift.as_mut_slice());
            }
        }
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters().into_iter().map(|(n, _)| n).collect()
    }

    /// Full forward pass on normalized images. Train mode uses batch
    /// statistics, updates the running ones and keeps a cache for [`Model::backward`].
    pub fn forward(&mut self, images: &Tensor4, mode: Mode) -> Result<ForwardOutput> {
        let shapes = self.block_shapes(images.shape())?;
        if mode == Mode::Infer {
            let logits = run_network(self.config.hypercolumn, shapes, images, None, |u, x| {
                unit_infer(&self.units[u], x)
            })?;
            return Ok(ForwardOutput {
                confidence: ConfidenceMap(softmax_channels(&logits)),
                logits,
                cache: None,
            });
        }
        let mut unit_caches = Vec::with_capacity(self.units.len());
        let mut pools = Vec::with_capacity(3);
        let units = &mut self.units;
        let logits = run_network(self.config.hypercolumn, shapes, images, Some(&mut pools), |u, x| {
            let (y, c) = unit_train(&mut units[u], x)?;
            unit_caches.push(c);
            Ok(y)
        })?;
        Ok(ForwardOutput {
            confidence: ConfidenceMap(softmax_channels(&logits)),
            logits,
            cache: Some(ForwardCache {
                units: unit_caches,
                pools,
                block_shapes: shapes,
                hypercolumn: self.config.hypercolumn,
            }),
        })
    }

    /// Inference-mode confidence map; never mutates the model.
    pub fn infer(&self, images: &Tensor4) -> Result<ConfidenceMap> {
        let shapes = self.block_shapes(images.shape())?;
        let logits = run_network(self.config.hypercolumn, shapes, images, None, |u, x| {
            unit_infer(&self.units[u], x)
        })?;
        Ok(ConfidenceMap(softmax_channels(&logits)))
    }

    /// Gradients of a scalar loss given its gradient w.r.t. the logits.
    pub fn backward(&self, cache: Option<&ForwardCache>, grad_logits: &Tensor4) -> Result<ParameterGradients> {
        Ok(self.backward_with_routing(cache, grad_logits)?.grads)
    }

    pub fn backward_with_routing(&self, cache: Option<&ForwardCache>, grad_logits: &Tensor4) -> Result<BackwardOutput> {
        let cache = cache.ok_or_else(|| Error::State("backward needs the cache of a train-mode forward".into()))?;
        if cache.hypercolumn != self.config.hypercolumn || cache.units.len() != self.units.len() {
            return Err(Error::State("forward cache does not belong to this model".into()));
        }
        let [s1, s2, s3] = cache.block_shapes;
        let expected = Shape::new(s1.n, 2, s1.h, s1.w);
        if grad_logits.shape() != expected {
            return Err(Error::shape(
                "backward",
                format!("grad_logits {} but logits are {expected}", grad_logits.shape()),
            ));
        }
        // Per-unit gradient lists, filled back to front.
        let mut per_unit: Vec<Vec<Vec<f32>>> = vec![Vec::new(); self.units.len()];
        let mut g = grad_logits.clone();
        for u in (6..8).rev() {
            let mut out = Vec::new();
            g = unit_backward(&self.units[u], &cache.units[u], g, true, &mut out)?.expect("input gradient requested");
            per_unit[u] = out;
        }
        let routing: [Tensor4; 3] = if self.config.hypercolumn {
            let parts = split_channels(&g, &BLOCK_WIDTHS)?;
            let mut it = parts.into_iter();
            let p1 = it.next().expect("three parts");
            let p2 = upsample_nearest_backward(&it.next().expect("three parts"), s2)?;
            let p3 = upsample_nearest_backward(&it.next().expect("three parts"), s3)?;
            [p1, p2, p3]
        } else {
            [
                Tensor4::zeros(s1)?,
                Tensor4::zeros(s2)?,
                upsample_nearest_backward(&g, s3)?,
            ]
        };
        let mut carry: Option<Tensor4> = None;
        for b in (0..3).rev() {
            let mut gb = routing[b].clone();
            if let Some(c) = carry.take() {
                gb.add_assign(&c)?;
            }
            let mut gx = maxpool2x2_backward(&cache.pools[b], &gb)?;
            for u in (2 * b..2 * b + 2).rev() {
                let mut out = Vec::new();
                let want = u != 0;
                let gi = unit_backward(&self.units[u], &cache.units[u], gx, want, &mut out)?;
                per_unit[u] = out;
                match gi {
                    Some(t) => gx = t,
                    None => {
                        gx = Tensor4::zeros(Shape::new(1, 1, 1, 1))?;
                    }
                }
            }
            carry = Some(gx);
        }
        let names = self.parameter_names();
        let values: Vec<Vec<f32>> = per_unit.into_iter().flatten().collect();
        debug_assert_eq!(names.len(), values.len());
        Ok(BackwardOutput {
            grads: ParameterGradients {
                entries: names.into_iter().zip(values).collect(),
            },
            head_routing: routing,
        })
    }
}

//! Residual convolutional networks with replaceable classification heads.
//!
//! Three variants are buildable: `resnet_mini` (basic blocks, stage widths
//! [16,32,64], two blocks per stage — the desk-scale training target),
//! `resnet18` (basic blocks, ImageNet-style stem) and `resnet50` (bottleneck
//! blocks with expansion 4, stages [3,4,6,3]). Blocks use post-activation
//! ordering: conv-BN-relu, with the shortcut added before the final relu and
//! a 1x1 strided projection on the shortcut wherever shapes differ.

pub mod checkpoint;

use std::cell::{Cell, RefCell};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::ops::{self, Phase};
use crate::tensor::{Element, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const BOTTLENECK_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    ResnetMini,
    Resnet18,
    Resnet50,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::ResnetMini => "resnet_mini",
            Variant::Resnet18 => "resnet18",
            Variant::Resnet50 => "resnet50",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resnet_mini" => Ok(Variant::ResnetMini),
            "resnet18" => Ok(Variant::Resnet18),
            "resnet50" => Ok(Variant::Resnet50),
            other => Err(Error::invalid(format!(
                "unknown model variant \"{other}\" (expected resnet_mini|resnet18|resnet50)"
            ))),
        }
    }
}

/// Which parameters train; everything outside the selection is left
/// bitwise-untouched by optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainableSelector {
    /// Fine-tune everything.
    All,
    /// Freeze the network as a feature extractor; only the head trains.
    HeadOnly,
    /// Freeze the stem and stages before `k` (1-based); stage `k` onwards
    /// and the head train.
    StagesFrom(usize),
}

impl TrainableSelector {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "all" {
            Ok(TrainableSelector::All)
        } else if s == "head_only" {
            Ok(TrainableSelector::HeadOnly)
        } else if let Some(k) = s.strip_prefix("stages_from:") {
            let k: usize = k
                .parse()
                .map_err(|_| Error::invalid(format!("bad stages_from index in \"{s}\"")))?;
            Ok(TrainableSelector::StagesFrom(k))
        } else {
            Err(Error::invalid(format!(
                "unknown trainable selector \"{s}\" (expected all|head_only|stages_from:K)"
            )))
        }
    }

    pub fn to_string_key(&self) -> String {
        match self {
            TrainableSelector::All => "all".to_string(),
            TrainableSelector::HeadOnly => "head_only".to_string(),
            TrainableSelector::StagesFrom(k) => format!("stages_from:{k}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
}

impl ModelConfig {
    pub fn new(
        variant: Variant,
        input_channels: usize,
        input_size: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        if input_channels == 0 {
            return Err(Error::invalid("input_channels must be positive".to_string()));
        }
        let (stage_widths, blocks_per_stage) = match variant {
            Variant::ResnetMini => (vec![16, 32, 64], vec![2, 2, 2]),
            Variant::Resnet18 => (vec![64, 128, 256, 512], vec![2, 2, 2, 2]),
            Variant::Resnet50 => (vec![64, 128, 256, 512], vec![3, 4, 6, 3]),
        };
        Ok(ModelConfig {
            variant,
            input_channels,
            input_size,
            num_classes,
            stage_widths,
            blocks_per_stage,
        })
    }

    fn uses_bottleneck(&self) -> bool {
        self.variant == Variant::Resnet50
    }

    fn stem_width(&self) -> usize {
        match self.variant {
            Variant::ResnetMini => 16,
            _ => 64,
        }
    }

    /// Channel count entering the head.
    pub fn feature_width(&self) -> usize {
        let last = *self.stage_widths.last().unwrap();
        if self.uses_bottleneck() {
            last * BOTTLENECK_EXPANSION
        } else {
            last
        }
    }
}

/// A named parameter tensor plus its trainability flag.
pub struct Param<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    trainable: Cell<bool>,
}

impl<E: Element> Param<E> {
    fn new(name: String, value: Tensor<E>) -> Self {
        Param {
            name,
            value,
            trainable: Cell::new(true),
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable.get()
    }

    pub fn set_trainable(&self, yes: bool) {
        self.trainable.set(yes);
    }

    #[cfg(test)]
    pub(crate) fn for_test(name: &str, value: Tensor<E>) -> Self {
        Param::new(name.to_string(), value)
    }
}

struct ConvLayer<E: Element> {
    weight: Param<E>,
    stride: usize,
    padding: usize,
}

pub(crate) struct BnLayer<E: Element> {
    base_name: String,
    gamma: Param<E>,
    beta: Param<E>,
    running_mean: RefCell<Vec<E>>,
    running_var: RefCell<Vec<E>>,
}

impl<E: Element> BnLayer<E> {
    fn forward(&self, x: &Tensor<E>, phase: Phase, bn_freeze: bool) -> Result<Tensor<E>> {
        // A frozen normalization layer behaves like eval mode even while
        // training: running statistics are used and not updated.
        let effective = if bn_freeze { Phase::Eval } else { phase };
        ops::batchnorm2d(
            x,
            &self.gamma.value,
            &self.beta.value,
            &mut self.running_mean.borrow_mut(),
            &mut self.running_var.borrow_mut(),
            effective,
            BN_MOMENTUM,
            BN_EPS,
        )
    }

    pub(crate) fn buffer_names(&self) -> (String, String) {
        (
            format!("{}.running_mean", self.base_name),
            format!("{}.running_var", self.base_name),
        )
    }

    pub(crate) fn running_mean(&self) -> &RefCell<Vec<E>> {
        &self.running_mean
    }

    pub(crate) fn running_var(&self) -> &RefCell<Vec<E>> {
        &self.running_var
    }
}

struct ConvBn<E: Element> {
    conv: ConvLayer<E>,
    bn: BnLayer<E>,
}

impl<E: Element> ConvBn<E> {
    fn forward(&self, x: &Tensor<E>, phase: Phase, bn_freeze: bool) -> Result<Tensor<E>> {
        let y = ops::conv2d(
            x,
            &self.conv.weight.value,
            None,
            self.conv.stride,
            self.conv.padding,
        )?;
        self.bn.forward(&y, phase, bn_freeze)
    }
}

enum Block<E: Element> {
    Basic {
        conv1: ConvBn<E>,
        conv2: ConvBn<E>,
        shortcut: Option<ConvBn<E>>,
    },
    Bottleneck {
        conv1: ConvBn<E>,
        conv2: ConvBn<E>,
        conv3: ConvBn<E>,
        shortcut: Option<ConvBn<E>>,
    },
}

impl<E: Element> Block<E> {
    fn forward(&self, x: &Tensor<E>, phase: Phase, bn_freeze: bool) -> Result<Tensor<E>> {
        let (branch, shortcut) = match self {
            Block::Basic {
                conv1,
                conv2,
                shortcut,
            } => {
                let y = ops::relu(&conv1.forward(x, phase, bn_freeze)?);
                (conv2.forward(&y, phase, bn_freeze)?, shortcut)
            }
            Block::Bottleneck {
                conv1,
                conv2,
                conv3,
                shortcut,
            } => {
                let y = ops::relu(&conv1.forward(x, phase, bn_freeze)?);
                let y = ops::relu(&conv2.forward(&y, phase, bn_freeze)?);
                (conv3.forward(&y, phase, bn_freeze)?, shortcut)
            }
        };
        let identity = match shortcut {
            Some(proj) => proj.forward(x, phase, bn_freeze)?,
            None => x.clone(),
        };
        Ok(ops::relu(&ops::add(&branch, &identity)?))
    }
}

struct Head<E: Element> {
    weight: Param<E>,
    bias: Param<E>,
}

/// An ordered graph of parameterized layers with residual skip wiring.
pub struct Model<E: Element = f32> {
    pub config: ModelConfig,
    stem: ConvBn<E>,
    stem_pool: Option<(usize, usize, usize)>, // (window, stride, padding)
    stages: Vec<Vec<Block<E>>>,
    head: Head<E>,
    /// Checkpoint metadata carried with the model so that save -> load ->
    /// save reproduces files byte for byte.
    meta: RefCell<Vec<(String, String)>>,
}

fn init_weight<E: Element>(
    rng: &mut ChaCha8Rng,
    name: String,
    shape: &[usize],
    fan_in: usize,
) -> Param<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Param::new(name, Tensor::param_from_vec(shape, data).unwrap())
}

fn make_conv<E: Element>(
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> ConvLayer<E> {
    let fan_in = cin * kernel * kernel;
    ConvLayer {
        weight: init_weight(
            rng,
            format!("{name}.weight"),
            &[cout, cin, kernel, kernel],
            fan_in,
        ),
        stride,
        padding,
    }
}

fn make_bn<E: Element>(base_name: &str, channels: usize) -> BnLayer<E> {
    BnLayer {
        base_name: base_name.to_string(),
        gamma: Param::new(
            format!("{base_name}.gamma"),
            Tensor::param_from_vec(&[channels], vec![E::one(); channels]).unwrap(),
        ),
        beta: Param::new(
            format!("{base_name}.beta"),
            Tensor::param_from_vec(&[channels], vec![E::zero(); channels]).unwrap(),
        ),
        running_mean: RefCell::new(vec![E::zero(); channels]),
        running_var: RefCell::new(vec![E::one(); channels]),
    }
}

#[allow(clippy::too_many_arguments)]
fn make_conv_bn<E: Element>(
    rng: &mut ChaCha8Rng,
    conv_name: &str,
    bn_name: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> ConvBn<E> {
    ConvBn {
        conv: make_conv(rng, conv_name, cin, cout, kernel, stride, padding),
        bn: make_bn(bn_name, cout),
    }
}

fn make_head<E: Element>(rng: &mut ChaCha8Rng, features: usize, classes: usize) -> Head<E> {
    Head {
        weight: init_weight(rng, "head.weight".to_string(), &[features, classes], features),
        bias: Param::new(
            "head.bias".to_string(),
            Tensor::param_from_vec(&[classes], vec![E::zero(); classes]).unwrap(),
        ),
    }
}

/// Build a residual network with deterministic fan-in-scaled uniform
/// initialization. `(config, init_seed) -> parameters` is a pure function.
pub fn build_resnet<E: Element>(config: ModelConfig, init_seed: u64) -> Result<Model<E>> {
    validate_input_size(&config)?;
    let mut r = rng::stream(rng::mix(&[0x6d6f_64656c, init_seed]));

    let (stem, stem_pool) = match config.variant {
        Variant::ResnetMini => (
            make_conv_bn(
                &mut r,
                "stem.conv",
                "stem.bn",
                config.input_channels,
                config.stem_width(),
                3,
                2,
                1,
            ),
            None,
        ),
        _ => (
            make_conv_bn(
                &mut r,
                "stem.conv",
                "stem.bn",
                config.input_channels,
                config.stem_width(),
                7,
                2,
                3,
            ),
            Some((3, 2, 1)),
        ),
    };

    let bottleneck = config.uses_bottleneck();
    let mut stages = Vec::new();
    let mut cin = config.stem_width();
    for (si, (&width, &blocks)) in config
        .stage_widths
        .iter()
        .zip(&config.blocks_per_stage)
        .enumerate()
    {
        let mut stage = Vec::new();
        for bi in 0..blocks {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            let prefix = format!("stage{}.block{}", si + 1, bi + 1);
            let cout = if bottleneck {
                width * BOTTLENECK_EXPANSION
            } else {
                width
            };
            let shortcut = (stride != 1 || cin != cout).then(|| {
                make_conv_bn(
                    &mut r,
                    &format!("{prefix}.shortcut.conv"),
                    &format!("{prefix}.shortcut.bn"),
                    cin,
                    cout,
                    1,
                    stride,
                    0,
                )
            });
            let block = if bottleneck {
                Block::Bottleneck {
                    conv1: make_conv_bn(
                        &mut r,
                        &format!("{prefix}.conv1"),
                        &format!("{prefix}.bn1"),
                        cin,
                        width,
                        1,
                        1,
                        0,
                    ),
                    conv2: make_conv_bn(
                        &mut r,
                        &format!("{prefix}.conv2"),
                        &format!("{prefix}.bn2"),
                        width,
                        width,
                        3,
                        stride,
                        1,
                    ),
                    conv3: make_conv_bn(
                        &mut r,
                        &format!("{prefix}.conv3"),
                        &format!("{prefix}.bn3"),
                        width,
                        cout,
                        1,
                        1,
                        0,
                    ),
                    shortcut,
                }
            } else {
                Block::Basic {
                    conv1: make_conv_bn(
                        &mut r,
                        &format!("{prefix}.conv1"),
                        &format!("{prefix}.bn1"),
                        cin,
                        width,
                        3,
                        stride,
                        1,
                    ),
                    conv2: make_conv_bn(
                        &mut r,
                        &format!("{prefix}.conv2"),
                        &format!("{prefix}.bn2"),
                        width,
                        width,
                        3,
                        1,
                        1,
                    ),
                    shortcut,
                }
            };
            stage.push(block);
            cin = cout;
        }
        stages.push(stage);
    }

    let head = make_head(&mut r, config.feature_width(), config.num_classes);
    let meta = RefCell::new(base_meta(&config));
    Ok(Model {
        config,
        stem,
        stem_pool,
        stages,
        head,
        meta,
    })
}

fn base_meta(config: &ModelConfig) -> Vec<(String, String)> {
    vec![
        ("variant".to_string(), config.variant.as_str().to_string()),
        ("num_classes".to_string(), config.num_classes.to_string()),
        (
            "input_channels".to_string(),
            config.input_channels.to_string(),
        ),
        ("input_size".to_string(), config.input_size.to_string()),
    ]
}

/// Reject input sizes that would starve the downsampling chain: every
/// stride-2 layer must receive a spatial extent of at least 2.
fn validate_input_size(config: &ModelConfig) -> Result<()> {
    let mut extent = config.input_size;
    let shrink = |label: String, extent: &mut usize| -> Result<()> {
        if *extent < 2 {
            return Err(Error::invalid(format!(
                "input size {} is too small for the downsampling chain of {}: {} would receive a {}x{} input",
                config.input_size,
                config.variant.as_str(),
                label,
                extent,
                extent,
            )));
        }
        *extent = extent.div_ceil(2);
        Ok(())
    };
    shrink("the stem".to_string(), &mut extent)?;
    if config.variant != Variant::ResnetMini {
        shrink("the stem pool".to_string(), &mut extent)?;
    }
    for si in 1..config.stage_widths.len() {
        shrink(format!("stage {}", si + 1), &mut extent)?;
    }
    Ok(())
}

impl<E: Element> Model<E> {
    /// Logits for a batch. Train mode uses (and updates) batch-norm batch
    /// statistics; eval mode is deterministic given parameters.
    pub fn forward(&self, batch: &Tensor<E>, phase: Phase) -> Result<Tensor<E>> {
        self.forward_with(batch, phase, false)
    }

    /// Forward with explicit control over batch-norm freezing: when
    /// `bn_freeze` is set, train-mode forwards still use running statistics
    /// and leave them untouched.
    pub fn forward_with(&self, batch: &Tensor<E>, phase: Phase, bn_freeze: bool) -> Result<Tensor<E>> {
        let expected = [
            self.config.input_channels,
            self.config.input_size,
            self.config.input_size,
        ];
        if batch.ndim() != 4 || batch.shape()[1..] != expected {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                lhs: batch.shape().to_vec(),
                rhs: vec![
                    batch.shape().first().copied().unwrap_or(0),
                    expected[0],
                    expected[1],
                    expected[2],
                ],
            });
        }
        let mut x = ops::relu(&self.stem.forward(batch, phase, bn_freeze)?);
        if let Some((window, stride, padding)) = self.stem_pool {
            x = ops::maxpool2d(&x, window, stride, padding)?;
        }
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, phase, bn_freeze)?;
            }
        }
        let pooled = ops::global_avg_pool(&x)?;
        ops::affine(&pooled, &self.head.weight.value, Some(&self.head.bias.value))
    }

    /// Re-initialize the final affine layer at a new width, preserving every
    /// other parameter bitwise.
    pub fn replace_head(&mut self, num_classes: usize, init_seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::invalid(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        let mut r = rng::stream(rng::mix(&[0x6865_6164, init_seed]));
        self.head = make_head(&mut r, self.config.feature_width(), num_classes);
        self.config.num_classes = num_classes;
        self.set_meta("num_classes", &num_classes.to_string());
        Ok(())
    }

    /// Name of the parameter playing the regularized-head role.
    pub fn head_name(&self) -> &str {
        &self.head.weight.name
    }

    pub fn head_weight(&self) -> &Param<E> {
        &self.head.weight
    }

    /// Update the trainability mask.
    pub fn set_trainable(&self, selector: TrainableSelector) -> Result<()> {
        let num_stages = self.stages.len();
        if let TrainableSelector::StagesFrom(k) = selector {
            if k == 0 || k > num_stages {
                return Err(Error::invalid(format!(
                    "stages_from({k}) is outside the valid stage range 1..={num_stages}"
                )));
            }
        }
        for p in self.params() {
            p.set_trainable(false);
        }
        match selector {
            TrainableSelector::All => {
                for p in self.params() {
                    p.set_trainable(true);
                }
            }
            TrainableSelector::HeadOnly => {
                self.head.weight.set_trainable(true);
                self.head.bias.set_trainable(true);
            }
            TrainableSelector::StagesFrom(k) => {
                for (si, stage) in self.stages.iter().enumerate() {
                    if si + 1 >= k {
                        for block in stage {
                            for p in block_params(block) {
                                p.set_trainable(true);
                            }
                        }
                    }
                }
                self.head.weight.set_trainable(true);
                self.head.bias.set_trainable(true);
            }
        }
        Ok(())
    }

    /// All parameters in stable build order.
    pub fn params(&self) -> Vec<&Param<E>> {
        let mut out = vec![
            &self.stem.conv.weight,
            &self.stem.bn.gamma,
            &self.stem.bn.beta,
        ];
        for stage in &self.stages {
            for block in stage {
                out.extend(block_params(block));
            }
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub(crate) fn bn_layers(&self) -> Vec<&BnLayer<E>> {
        let mut out = vec![&self.stem.bn];
        for stage in &self.stages {
            for block in stage {
                match block {
                    Block::Basic {
                        conv1,
                        conv2,
                        shortcut,
                    } => {
                        out.push(&conv1.bn);
                        out.push(&conv2.bn);
                        if let Some(s) = shortcut {
                            out.push(&s.bn);
                        }
                    }
                    Block::Bottleneck {
                        conv1,
                        conv2,
                        conv3,
                        shortcut,
                    } => {
                        out.push(&conv1.bn);
                        out.push(&conv2.bn);
                        out.push(&conv3.bn);
                        if let Some(s) = shortcut {
                            out.push(&s.bn);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for p in self.params() {
            p.value.zero_grad();
        }
    }

    pub fn metadata(&self) -> Vec<(String, String)> {
        self.meta.borrow().clone()
    }

    pub fn set_meta(&self, key: &str, value: &str) {
        let mut meta = self.meta.borrow_mut();
        if let Some(slot) = meta.iter_mut().find(|(k, _)| k == key) {
            slot.1 = value.to_string();
        } else {
            meta.push((key.to_string(), value.to_string()));
        }
    }

    pub(crate) fn set_metadata(&self, meta: Vec<(String, String)>) {
        *self.meta.borrow_mut() = meta;
    }
}

fn block_params<E: Element>(block: &Block<E>) -> Vec<&Param<E>> {
    let mut out = Vec::new();
    match block {
        Block::Basic {
            conv1,
            conv2,
            shortcut,
        } => {
            for cb in [conv1, conv2].into_iter().chain(shortcut.iter()) {
                out.push(&cb.conv.weight);
                out.push(&cb.bn.gamma);
                out.push(&cb.bn.beta);
            }
        }
        Block::Bottleneck {
            conv1,
            conv2,
            conv3,
            shortcut,
        } => {
            for cb in [conv1, conv2, conv3].into_iter().chain(shortcut.iter()) {
                out.push(&cb.conv.weight);
                out.push(&cb.bn.gamma);
                out.push(&cb.bn.beta);
            }
        }
    }
    out
}

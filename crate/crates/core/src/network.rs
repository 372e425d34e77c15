//! Bottleneck residual networks whose middle convolutions may be dynamic.

use serde::{Deserialize, Serialize};

use crate::dynamic::{
    adjuster_param_count, DynamicConvCache, DynamicConvLayer, KernelTemplateSet, MetaAdjuster, TemplateShape,
    DEFAULT_REDUCTION,
};
use crate::error::{Error, Result};
use crate::ops::{
    batchnorm2d_backward, batchnorm2d_forward, conv2d_backward, conv2d_forward, dense_backward, dense_forward,
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_forward, BatchNormCache, Mode, RunningStats,
};
use crate::param::Param;
use crate::rng::Rng;
use crate::tape::{GradTape, ValueId};
use crate::tensor::{Scalar, Tensor};

/// How the middle convolution of a block is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain convolution.
    Static,
    /// Depthwise `k x k`, `1x1`, `k x 1` and `1 x k` templates.
    Asymmetric,
    /// Four `1x1` templates.
    Identical1x1,
    /// Four full `k x k` templates.
    Identical3x3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Static,
        Variant::Identical1x1,
        Variant::Asymmetric,
        Variant::Identical3x3,
    ];

    pub fn is_dynamic(self) -> bool {
        self != Variant::Static
    }

    pub fn template_shapes(self) -> Option<[TemplateShape; 4]> {
        match self {
            Variant::Static => None,
            Variant::Asymmetric => Some(TemplateShape::ASYMMETRIC),
            Variant::Identical1x1 => Some([TemplateShape::Point; 4]),
            Variant::Identical3x3 => Some([TemplateShape::Full; 4]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Static => "static",
            Variant::Asymmetric => "asymmetric",
            Variant::Identical1x1 => "identical_1x1",
            Variant::Identical3x3 => "identical_3x3",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Variant::Static => 0,
            Variant::Asymmetric => 1,
            Variant::Identical1x1 => 2,
            Variant::Identical3x3 => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.code() == c)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

/// Extra parameters a dynamic middle conv adds over a static one:
/// templates plus the adjuster reading `embed_channels` channels.
pub fn dynamic_overhead(
    variant: Variant,
    in_c: usize,
    out_c: usize,
    k: usize,
    embed_channels: usize,
    reduction: usize,
) -> usize {
    match variant.template_shapes() {
        None => 0,
        Some(shapes) => {
            let templates: usize = shapes.iter().map(|s| s.param_count(in_c, out_c, k)).sum();
            templates + adjuster_param_count(embed_channels, reduction, shapes.len())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub bottleneck_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dynamic: bool,
    pub variant: Variant,
}

impl BlockSpec {
    pub fn new(in_channels: usize, bottleneck_channels: usize, out_channels: usize, stride: usize, variant: Variant) -> Self {
        BlockSpec {
            in_channels,
            bottleneck_channels,
            out_channels,
            stride,
            dynamic: variant.is_dynamic(),
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dynamic != self.variant.is_dynamic() {
            return Err(Error::Validation(format!(
                "block marked dynamic={} with variant {}",
                self.dynamic, self.variant
            )));
        }
        if self.in_channels == 0 || self.bottleneck_channels == 0 || self.out_channels == 0 || self.stride == 0 {
            return Err(Error::Validation(format!("degenerate block {self:?}")));
        }
        Ok(())
    }

    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub stem: StemSpec,
    pub stages: Vec<Vec<BlockSpec>>,
    pub num_classes: usize,
    /// Spatial size of every middle convolution.
    pub kernel_size: usize,
    /// Adjuster bottleneck reduction.
    pub reduction: usize,
}

impl NetworkSpec {
    /// Stem conv, then stages of bottleneck blocks. `widths[s]` is the output
    /// width of stage `s`; its middle convs use `widths[s] / expansion`
    /// channels. The first block of every stage after the first downsamples.
    pub fn bottleneck(
        stem: StemSpec,
        widths: &[usize],
        blocks_per_stage: &[usize],
        expansion: usize,
        num_classes: usize,
        variant: Variant,
    ) -> Result<Self> {
        if widths.len() != blocks_per_stage.len() {
            return Err(Error::Config(format!(
                "{} stage widths but {} stage depths",
                widths.len(),
                blocks_per_stage.len()
            )));
        }
        let mut in_c = stem.out_channels;
        let mut stages = Vec::new();
        for (s, (&w, &n)) in widths.iter().zip(blocks_per_stage).enumerate() {
            let mid = (w / expansion.max(1)).max(1);
            let mut blocks = Vec::new();
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BlockSpec::new(in_c, mid, w, stride, variant));
                in_c = w;
            }
            stages.push(blocks);
        }
        let spec = NetworkSpec {
            stem,
            stages,
            num_classes,
            kernel_size: 3,
            reduction: DEFAULT_REDUCTION,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Desk-scale default: 3x3 stem to 16 channels, three stages of two
    /// blocks at widths 16/32/64 with 4x bottlenecks.
    pub fn toy(variant: Variant, num_classes: usize) -> Self {
        Self::toy_with_widths(variant, num_classes, &[16, 32, 64], 2)
    }

    pub fn toy_with_widths(variant: Variant, num_classes: usize, widths: &[usize], blocks: usize) -> Self {
        let stem = StemSpec {
            in_channels: 3,
            out_channels: widths[0],
            kernel: 3,
            stride: 1,
        };
        Self::bottleneck(stem, widths, &vec![blocks; widths.len()], 4, num_classes, variant)
            .expect("toy spec is valid")
    }

    /// ResNet-50 layout: 7x7/2 stem to 64, stages of 3/4/6/3 blocks at
    /// widths 256/512/1024/2048.
    pub fn resnet50(variant: Variant, num_classes: usize) -> Self {
        let stem = StemSpec {
            in_channels: 3,
            out_channels: 64,
            kernel: 7,
            stride: 2,
        };
        Self::bottleneck(stem, &[256, 512, 1024, 2048], &[3, 4, 6, 3], 4, num_classes, variant)
            .expect("resnet50 spec is valid")
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut spec = self.clone();
        for b in spec.stages.iter_mut().flatten() {
            b.variant = variant;
            b.dynamic = variant.is_dynamic();
        }
        spec
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.stages.iter().flatten()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().filter_map(|s| s.last().map(|b| b.out_channels)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation("need at least two classes".into()));
        }
        if self.kernel_size.is_multiple_of(2) || self.stem.kernel.is_multiple_of(2) {
            return Err(Error::Validation("kernel sizes must be odd".into()));
        }
        let mut c = self.stem.out_channels;
        for (i, b) in self.blocks().enumerate() {
            b.validate()?;
            if b.in_channels != c {
                return Err(Error::Validation(format!(
                    "block {i} expects {} input channels but receives {c}",
                    b.in_channels
                )));
            }
            c = b.out_channels;
        }
        if self.blocks().next().is_none() {
            return Err(Error::Validation("network has no blocks".into()));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count (BatchNorm running statistics
    /// are buffers and not counted).
    pub fn param_count(&self) -> usize {
        let k = self.kernel_size;
        let st = &self.stem;
        let mut total = st.out_channels * st.in_channels * st.kernel * st.kernel + 2 * st.out_channels;
        for b in self.blocks() {
            let (i, m, o) = (b.in_channels, b.bottleneck_channels, b.out_channels);
            total += i * m + 2 * m;
            total += m * m * k * k + 2 * m;
            total += m * o + 2 * o;
            if b.has_projection() {
                total += i * o + 2 * o;
            }
            total += dynamic_overhead(b.variant, m, m, k, i, self.reduction);
        }
        let last = self.blocks().last().map(|b| b.out_channels).unwrap_or(st.out_channels);
        total + last * self.num_classes + self.num_classes
    }

    /// Numeric encoding for self-describing checkpoints.
    pub fn encode(&self) -> Vec<f64> {
        let mut v = vec![
            1.0,
            self.stem.in_channels as f64,
            self.stem.out_channels as f64,
            self.stem.kernel as f64,
            self.stem.stride as f64,
            self.num_classes as f64,
            self.kernel_size as f64,
            self.reduction as f64,
            self.stages.len() as f64,
        ];
        for stage in &self.stages {
            v.push(stage.len() as f64);
            for b in stage {
                v.extend([
                    b.in_channels as f64,
                    b.bottleneck_channels as f64,
                    b.out_channels as f64,
                    b.stride as f64,
                    b.variant.code() as f64,
                ]);
            }
        }
        v
    }

    pub fn decode(v: &[f64]) -> Result<Self> {
        let bad = || Error::Format("malformed network spec record".into());
        let mut it = v.iter().map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e9 {
                Ok(x as usize)
            } else {
                Err(bad())
            }
        });
        let mut next = || it.next().ok_or_else(bad).and_then(|r| r);
        if next()? != 1 {
            return Err(Error::Format("unsupported network spec version".into()));
        }
        let stem = StemSpec {
            in_channels: next()?,
            out_channels: next()?,
            kernel: next()?,
            stride: next()?,
        };
        let num_classes = next()?;
        let kernel_size = next()?;
        let reduction = next()?;
        let n_stages = next()?;
        let mut stages = Vec::new();
        for _ in 0..n_stages {
            let n = next()?;
            let mut blocks = Vec::new();
            for _ in 0..n {
                let (i, m, o, s) = (next()?, next()?, next()?, next()?);
                let variant = Variant::from_code(next()? as u8).ok_or_else(bad)?;
                blocks.push(BlockSpec::new(i, m, o, s, variant));
            }
            stages.push(blocks);
        }
        let spec = NetworkSpec {
            stem,
            stages,
            num_classes,
            kernel_size,
            reduction,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub stats: RunningStats<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[c], T::one())),
            beta: Param::new(Tensor::zeros(&[c])),
            stats: RunningStats::new(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub kernel: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv<T> {
    /// He-normal initialization.
    fn new(out_c: usize, in_c: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        Conv {
            kernel: Param::new(rng.normal_tensor(&[out_c, in_c, k, k], std)),
            stride,
            padding: k / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MiddleConv<T> {
    Static(Conv<T>),
    Dynamic(Box<DynamicConvLayer<T>>),
}

impl<T: Scalar> MiddleConv<T> {
    /// The static kernel `Θs`.
    pub fn static_kernel(&self) -> &Param<T> {
        match self {
            MiddleConv::Static(c) => &c.kernel,
            MiddleConv::Dynamic(d) => &d.static_kernel,
        }
    }

    pub fn as_dynamic(&self) -> Option<&DynamicConvLayer<T>> {
        match self {
            MiddleConv::Dynamic(d) => Some(d),
            MiddleConv::Static(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub spec: BlockSpec,
    pub conv1: Conv<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: MiddleConv<T>,
    pub bn2: BatchNorm<T>,
    pub conv3: Conv<T>,
    pub bn3: BatchNorm<T>,
    pub shortcut: Option<(Conv<T>, BatchNorm<T>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvSite {
    Stem,
    Conv1(usize),
    Conv2(usize),
    Conv3(usize),
    Shortcut(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnSite {
    Stem,
    Bn1(usize),
    Bn2(usize),
    Bn3(usize),
    Shortcut(usize),
}

/// Tape operations of a network forward pass.
#[derive(Debug, Clone)]
pub enum NetOp<T> {
    Conv(ConvSite),
    BatchNorm(BnSite, BatchNormCache<T>),
    Relu,
    Add,
    GlobalAvgPool,
    Head,
    /// Inputs: `[conv input, adjuster embedding]`.
    Dynamic(usize, Box<DynamicConvCache<T>>),
}

/// A recorded forward pass.
#[derive(Debug)]
pub struct ForwardPass<T> {
    pub tape: GradTape<T, NetOp<T>>,
    pub input: ValueId,
    pub logits: ValueId,
    /// `(block index, coefficients [B,4])` per dynamic block, in execution order.
    pub coefficient_trace: Vec<(usize, Tensor<T>)>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.tape.value(self.logits)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    pub stem: Conv<T>,
    pub stem_bn: BatchNorm<T>,
    pub blocks: Vec<Block<T>>,
    pub head_weight: Param<T>,
    pub head_bias: Param<T>,
}

/// Build a network with deterministic initialization.
///
/// Backbone parameters and adjuster parameters come from two independent
/// streams derived from `rng`, so static and dynamic variants built from
/// the same generator share every backbone weight. Templates start at zero.
pub fn build_network<T: Scalar>(spec: &NetworkSpec, rng: &Rng) -> Result<Network<T>> {
    spec.validate()?;
    let mut backbone = rng.derive(1);
    let mut adjusters = rng.derive(2);
    let k = spec.kernel_size;
    let st = spec.stem;
    let stem = Conv::new(st.out_channels, st.in_channels, st.kernel, st.stride, &mut backbone);
    let stem_bn = BatchNorm::new(st.out_channels);
    let mut blocks = Vec::new();
    for b in spec.blocks() {
        let (i, m, o) = (b.in_channels, b.bottleneck_channels, b.out_channels);
        let conv1 = Conv::new(m, i, 1, 1, &mut backbone);
        let middle = Conv::new(m, m, k, b.stride, &mut backbone);
        let conv3 = Conv::new(o, m, 1, 1, &mut backbone);
        let shortcut = b
            .has_projection()
            .then(|| (Conv::new(o, i, 1, b.stride, &mut backbone), BatchNorm::new(o)));
        let conv2 = match b.variant.template_shapes() {
            None => MiddleConv::Static(middle),
            Some(shapes) => {
                let templates = KernelTemplateSet::zeros(&shapes, m, m, k)?;
                let adjuster = MetaAdjuster::new(i, spec.reduction, shapes.len(), &mut adjusters);
                MiddleConv::Dynamic(Box::new(DynamicConvLayer::new(
                    middle.kernel.value,
                    templates,
                    adjuster,
                    middle.stride,
                    middle.padding,
                )?))
            }
        };
        blocks.push(Block {
            spec: *b,
            conv1,
            bn1: BatchNorm::new(m),
            conv2,
            bn2: BatchNorm::new(m),
            conv3,
            bn3: BatchNorm::new(o),
            shortcut,
        });
    }
    let last = blocks.last().map(|b| b.spec.out_channels).unwrap_or(st.out_channels);
    let bound = 1.0 / (last as f64).sqrt();
    let head_weight = Param::new(backbone.uniform_tensor(&[last, spec.num_classes], -bound, bound));
    let head_bias = Param::new(Tensor::zeros(&[spec.num_classes]));
    Ok(Network {
        spec: spec.clone(),
        stem,
        stem_bn,
        blocks,
        head_weight,
        head_bias,
    })
}

impl<T: Scalar> Network<T> {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn conv(&self, site: ConvSite) -> &Conv<T> {
        match site {
            ConvSite::Stem => &self.stem,
            ConvSite::Conv1(i) => &self.blocks[i].conv1,
            ConvSite::Conv2(i) => match &self.blocks[i].conv2 {
                MiddleConv::Static(c) => c,
                MiddleConv::Dynamic(_) => unreachable!("dynamic middle conv recorded as static"),
            },
            ConvSite::Conv3(i) => &self.blocks[i].conv3,
            ConvSite::Shortcut(i) => &self.blocks[i].shortcut.as_ref().expect("projection").0,
        }
    }

    fn conv_mut(&mut self, site: ConvSite) -> &mut Conv<T> {
        match site {
            ConvSite::Stem => &mut self.stem,
            ConvSite::Conv1(i) => &mut self.blocks[i].conv1,
            ConvSite::Conv2(i) => match &mut self.blocks[i].conv2 {
                MiddleConv::Static(c) => c,
                MiddleConv::Dynamic(_) => unreachable!("dynamic middle conv recorded as static"),
            },
            ConvSite::Conv3(i) => &mut self.blocks[i].conv3,
            ConvSite::Shortcut(i) => &mut self.blocks[i].shortcut.as_mut().expect("projection").0,
        }
    }

    fn bn_mut(&mut self, site: BnSite) -> &mut BatchNorm<T> {
        match site {
            BnSite::Stem => &mut self.stem_bn,
            BnSite::Bn1(i) => &mut self.blocks[i].bn1,
            BnSite::Bn2(i) => &mut self.blocks[i].bn2,
            BnSite::Bn3(i) => &mut self.blocks[i].bn3,
            BnSite::Shortcut(i) => &mut self.blocks[i].shortcut.as_mut().expect("projection").1,
        }
    }

    /// Trainable parameters with stable hierarchical names.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out: Vec<(String, &Param<T>)> = Vec::new();
        fn bn<'a, T>(out: &mut Vec<(String, &'a Param<T>)>, p: &str, b: &'a BatchNorm<T>) {
            out.push((format!("{p}.gamma"), &b.gamma));
            out.push((format!("{p}.beta"), &b.beta));
        }
        out.push(("stem.kernel".into(), &self.stem.kernel));
        bn(&mut out, "stem.bn", &self.stem_bn);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("block{i}");
            out.push((format!("{p}.conv1.kernel"), &b.conv1.kernel));
            bn(&mut out, &format!("{p}.bn1"), &b.bn1);
            match &b.conv2 {
                MiddleConv::Static(c) => out.push((format!("{p}.conv2.kernel"), &c.kernel)),
                MiddleConv::Dynamic(d) => {
                    out.push((format!("{p}.conv2.kernel"), &d.static_kernel));
                    for (n, t) in d.templates.templates.iter().enumerate() {
                        out.push((format!("{p}.conv2.template{}", n + 1), t));
                    }
                    out.push((format!("{p}.conv2.adjuster.w1"), &d.adjuster.w1));
                    out.push((format!("{p}.conv2.adjuster.b1"), &d.adjuster.b1));
                    out.push((format!("{p}.conv2.adjuster.w2"), &d.adjuster.w2));
                    out.push((format!("{p}.conv2.adjuster.b2"), &d.adjuster.b2));
                }
            }
            bn(&mut out, &format!("{p}.bn2"), &b.bn2);
            out.push((format!("{p}.conv3.kernel"), &b.conv3.kernel));
            bn(&mut out, &format!("{p}.bn3"), &b.bn3);
            if let Some((c, n)) = &b.shortcut {
                out.push((format!("{p}.shortcut.kernel"), &c.kernel));
                bn(&mut out, &format!("{p}.shortcut.bn"), n);
            }
        }
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    /// Mutable parameters, in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        out.push(&mut self.stem.kernel);
        out.extend([&mut self.stem_bn.gamma, &mut self.stem_bn.beta]);
        for b in &mut self.blocks {
            out.push(&mut b.conv1.kernel);
            out.extend([&mut b.bn1.gamma, &mut b.bn1.beta]);
            match &mut b.conv2 {
                MiddleConv::Static(c) => out.push(&mut c.kernel),
                MiddleConv::Dynamic(d) => {
                    let d = d.as_mut();
                    out.push(&mut d.static_kernel);
                    out.extend(d.templates.templates.iter_mut());
                    out.extend(d.adjuster.params_mut());
                }
            }
            out.extend([&mut b.bn2.gamma, &mut b.bn2.beta]);
            out.push(&mut b.conv3.kernel);
            out.extend([&mut b.bn3.gamma, &mut b.bn3.beta]);
            if let Some((c, n)) = &mut b.shortcut {
                out.push(&mut c.kernel);
                out.extend([&mut n.gamma, &mut n.beta]);
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// BatchNorm running statistics, named.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor<T>)> {
        fn push<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, p: String, b: &'a BatchNorm<T>) {
            out.push((format!("{p}.running_mean"), &b.stats.mean));
            out.push((format!("{p}.running_var"), &b.stats.var));
        }
        let mut out = Vec::new();
        push(&mut out, "stem.bn".into(), &self.stem_bn);
        for (i, b) in self.blocks.iter().enumerate() {
            push(&mut out, format!("block{i}.bn1"), &b.bn1);
            push(&mut out, format!("block{i}.bn2"), &b.bn2);
            push(&mut out, format!("block{i}.bn3"), &b.bn3);
            if let Some((_, n)) = &b.shortcut {
                push(&mut out, format!("block{i}.shortcut.bn"), n);
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        out.extend([&mut self.stem_bn.stats.mean, &mut self.stem_bn.stats.var]);
        for b in &mut self.blocks {
            for n in [&mut b.bn1, &mut b.bn2, &mut b.bn3] {
                out.extend([&mut n.stats.mean, &mut n.stats.var]);
            }
            if let Some((_, n)) = &mut b.shortcut {
                out.extend([&mut n.stats.mean, &mut n.stats.var]);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Indices of blocks whose middle conv is dynamic.
    pub fn dynamic_blocks(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|&i| self.blocks[i].conv2.as_dynamic().is_some())
            .collect()
    }

    /// Fill every template with `U(-scale, scale)`; used to exercise the
    /// dynamic path away from its zero initialization.
    pub fn randomize_templates(&mut self, rng: &mut Rng, scale: f64) {
        for b in &mut self.blocks {
            if let MiddleConv::Dynamic(d) = &mut b.conv2 {
                for t in &mut d.templates.templates {
                    t.value = rng.uniform_tensor(t.value.shape(), -scale, scale);
                }
            }
        }
    }

    fn conv_node(
        &self,
        tape: &mut GradTape<T, NetOp<T>>,
        site: ConvSite,
        x: ValueId,
    ) -> Result<ValueId> {
        let c = self.conv(site);
        let y = conv2d_forward(tape.value(x), &c.kernel.value, c.stride, c.padding)?;
        Ok(tape.record(NetOp::Conv(site), &[x], y))
    }

    fn bn_node(
        &mut self,
        tape: &mut GradTape<T, NetOp<T>>,
        site: BnSite,
        x: ValueId,
        mode: Mode,
    ) -> Result<ValueId> {
        let bn = self.bn_mut(site);
        let (y, cache) = batchnorm2d_forward(tape.value(x), &bn.gamma.value, &bn.beta.value, &mut bn.stats, mode)?;
        Ok(tape.record(NetOp::BatchNorm(site, cache), &[x], y))
    }

    fn relu_node(tape: &mut GradTape<T, NetOp<T>>, x: ValueId) -> ValueId {
        let y = relu_forward(tape.value(x));
        tape.record(NetOp::Relu, &[x], y)
    }

    /// One residual block on the tape; dynamic blocks append their
    /// coefficients to `trace`.
    fn block_node(
        &mut self,
        tape: &mut GradTape<T, NetOp<T>>,
        i: usize,
        block_in: ValueId,
        mode: Mode,
        trace: &mut Vec<(usize, Tensor<T>)>,
    ) -> Result<ValueId> {
        let h = self.conv_node(tape, ConvSite::Conv1(i), block_in)?;
        let h = self.bn_node(tape, BnSite::Bn1(i), h, mode)?;
        let h = Self::relu_node(tape, h);
        let h = match &self.blocks[i].conv2 {
            MiddleConv::Static(_) => self.conv_node(tape, ConvSite::Conv2(i), h)?,
            MiddleConv::Dynamic(d) => {
                let (y, cache) = d.forward(tape.value(h), tape.value(block_in))?;
                trace.push((i, cache.coefficients().clone()));
                tape.record(NetOp::Dynamic(i, Box::new(cache)), &[h, block_in], y)
            }
        };
        let h = self.bn_node(tape, BnSite::Bn2(i), h, mode)?;
        let h = Self::relu_node(tape, h);
        let h = self.conv_node(tape, ConvSite::Conv3(i), h)?;
        let h = self.bn_node(tape, BnSite::Bn3(i), h, mode)?;
        let sc = if self.blocks[i].shortcut.is_some() {
            let s = self.conv_node(tape, ConvSite::Shortcut(i), block_in)?;
            self.bn_node(tape, BnSite::Shortcut(i), s, mode)?
        } else {
            block_in
        };
        let sum = tape.value(h).add(tape.value(sc))?;
        let sum = tape.record(NetOp::Add, &[h, sc], sum);
        let out = Self::relu_node(tape, sum);
        tape.value(out).ensure_finite(|| "output".into())?;
        Ok(out)
    }

    /// Run the network on `input [B,C,H,W]`, recording a tape for backward.
    ///
    /// Train mode normalizes with batch statistics and updates running
    /// statistics; eval mode leaves the network untouched.
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<ForwardPass<T>> {
        let [_, c, _, _] = input.dims4("Network::forward")?;
        if c != self.spec.stem.in_channels {
            return Err(Error::shape(
                "Network::forward",
                "input axis 1 vs stem input channels",
                format!("{c} vs {}", self.spec.stem.in_channels),
            ));
        }
        let mut tape = GradTape::new();
        let input_id = tape.leaf(input.clone());
        let mut trace = Vec::new();

        let x = self.conv_node(&mut tape, ConvSite::Stem, input_id)?;
        let x = self.bn_node(&mut tape, BnSite::Stem, x, mode)?;
        let mut x = Self::relu_node(&mut tape, x);

        for i in 0..self.blocks.len() {
            x = self.block_node(&mut tape, i, x, mode, &mut trace).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("block {i}: {context}"),
                },
                other => other,
            })?;
        }

        let pooled = global_avg_pool(tape.value(x))?;
        let pooled = tape.record(NetOp::GlobalAvgPool, &[x], pooled);
        let logits = dense_forward(tape.value(pooled), &self.head_weight.value, &self.head_bias.value)?;
        logits.ensure_finite(|| "network logits".into())?;
        let logits = tape.record(NetOp::Head, &[pooled], logits);
        Ok(ForwardPass {
            tape,
            input: input_id,
            logits,
            coefficient_trace: trace,
        })
    }

    /// Logits in eval mode.
    pub fn predict(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let pass = self.forward(input, Mode::Eval)?;
        Ok(pass.logits().clone())
    }

    /// Backpropagate `grad_logits` through a recorded pass, accumulating
    /// parameter gradients. Returns the gradient w.r.t. the network input.
    pub fn backward(&mut self, pass: &ForwardPass<T>, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let grads = pass.tape.backward(pass.logits, grad_logits.clone(), |entry, g, inputs| {
            Ok(match &entry.op {
                NetOp::Conv(site) => {
                    let c = self.conv_mut(*site);
                    let (gi, gk) = conv2d_backward(g, inputs[0], &c.kernel.value, c.stride, c.padding)?;
                    c.kernel.accumulate(&gk)?;
                    vec![Some(gi)]
                }
                NetOp::BatchNorm(site, cache) => {
                    let bn = self.bn_mut(*site);
                    let (gi, gg, gb) = batchnorm2d_backward(g, cache, &bn.gamma.value)?;
                    bn.gamma.accumulate(&gg)?;
                    bn.beta.accumulate(&gb)?;
                    vec![Some(gi)]
                }
                NetOp::Relu => vec![Some(relu_backward(g, inputs[0])?)],
                NetOp::Add => vec![Some(g.clone()), Some(g.clone())],
                NetOp::GlobalAvgPool => vec![Some(global_avg_pool_backward(g, inputs[0].shape())?)],
                NetOp::Head => {
                    let (gi, gw, gb) = dense_backward(g, inputs[0], &self.head_weight.value)?;
                    self.head_weight.accumulate(&gw)?;
                    self.head_bias.accumulate(&gb)?;
                    vec![Some(gi)]
                }
                NetOp::Dynamic(i, cache) => {
                    let MiddleConv::Dynamic(d) = &mut self.blocks[*i].conv2 else {
                        return Err(Error::Usage(format!("block {i} is not dynamic")));
                    };
                    let grads = d.backward(g, cache)?;
                    d.accumulate(&grads)?;
                    vec![Some(grads.input), Some(grads.embedding)]
                }
            })
        })?;
        grads
            .into_iter()
            .nth(pass.input)
            .flatten()
            .ok_or_else(|| Error::Usage("input received no gradient".into()))
    }

    /// Replace trainable parameters and buffers by name. Every name must be
    /// present with a matching shape.
    pub fn load_named(&mut self, params: &[(String, Tensor<T>)], buffers: &[(String, Tensor<T>)]) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let lookup = |list: &[(String, Tensor<T>)], name: &str| -> Result<Tensor<T>> {
            list.iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Format(format!("missing tensor '{name}'")))
        };
        for (name, p) in names.iter().zip(self.params_mut()) {
            let t = lookup(params, name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!("tensor '{name}' has shape {:?}, expected {:?}", t.shape(), p.value.shape())));
            }
            p.value = t;
        }
        let bnames: Vec<String> = self.named_buffers().into_iter().map(|(n, _)| n).collect();
        for (name, b) in bnames.iter().zip(self.buffers_mut()) {
            let t = lookup(buffers, name)?;
            if t.shape() != b.shape() {
                return Err(Error::Format(format!("tensor '{name}' has shape {:?}, expected {:?}", t.shape(), b.shape())));
            }
            *b = t;
        }
        Ok(())
    }

    /// Spatial `k x k` kernels of every block's middle conv, as used for the
    /// instance `probe` (dynamic blocks) or as stored (static blocks).
    /// Each entry is `[B, Cout, Cin, k, k]` flattened per instance.
    pub fn middle_kernels(&mut self, probe: Option<&Tensor<T>>) -> Result<Vec<Vec<Tensor<T>>>> {
        let pass = match probe {
            Some(p) => Some(self.forward(p, Mode::Eval)?),
            None => None,
        };
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            match &b.conv2 {
                MiddleConv::Static(c) => out.push(vec![c.kernel.value.clone()]),
                MiddleConv::Dynamic(d) => {
                    let pass = pass.as_ref().ok_or_else(|| {
                        Error::Usage("kernels of a dynamic network depend on the input; a probe is required".into())
                    })?;
                    let cache = pass
                        .tape
                        .entries()
                        .iter()
                        .find_map(|e| match &e.op {
                            NetOp::Dynamic(j, c) if *j == i => Some(c),
                            _ => None,
                        })
                        .expect("dynamic block recorded");
                    let per = d.static_kernel.len();
                    let shape = d.static_kernel.value.shape().to_vec();
                    let all = cache.kernels().data();
                    out.push(
                        all.chunks(per)
                            .map(|k| Tensor::from_vec(&shape, k.to_vec()))
                            .collect::<Result<_>>()?,
                    );
                }
            }
        }
        Ok(out)
    }
}

//! Residual networks and the binary layer-substitution scheme.
//!
//! A configuration string has one bit per residual stage; a `1` replaces that
//! whole stage by `m` FP-blocks without shortcuts. The first replacement block
//! of a stage that originally began with a stride-2 convolution downsamples
//! with a trailing max-pool instead. The stem is never altered.
//!
//! Parameters are named `stem.*`, `layer{i}.{j}.*` (stages numbered from 1)
//! and `head.*`. Initial values depend only on the seed and the name, so a
//! configuration differing in one bit leaves every other stage bit-identical.

mod blocks;
mod summary;

pub use blocks::{BasicBlock, Block, Bottleneck, Shortcut};
pub use summary::{summarize, BlockSummary, LayerSummary, ModelSummary};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp_block::{FpBlock, FpBlockSpec};
use crate::nn_ops::{Builder, Conv2dSpec, ConvBn, Ctx, Linear};
use crate::tensor::{ParamStore, Scalar, Var};

/// Base architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Base {
    Resnet20,
    Resnet32,
    Resnet44,
    Resnet50,
    /// ImageNet basic-block networks, used as reference counts.
    Resnet18,
    Resnet34,
}

impl Base {
    pub const ALL: [Base; 6] = [Base::Resnet20, Base::Resnet32, Base::Resnet44, Base::Resnet50, Base::Resnet18, Base::Resnet34];

    pub fn name(self) -> &'static str {
        match self {
            Base::Resnet20 => "resnet20",
            Base::Resnet32 => "resnet32",
            Base::Resnet44 => "resnet44",
            Base::Resnet50 => "resnet50",
            Base::Resnet18 => "resnet18",
            Base::Resnet34 => "resnet34",
        }
    }

    pub fn is_cifar(self) -> bool {
        matches!(self, Base::Resnet20 | Base::Resnet32 | Base::Resnet44)
    }

    pub fn bottleneck(self) -> bool {
        self == Base::Resnet50
    }

    /// Residual blocks per stage.
    pub fn blocks_per_layer(self) -> &'static [usize] {
        match self {
            Base::Resnet20 => &[3, 3, 3],
            Base::Resnet32 => &[5, 5, 5],
            Base::Resnet44 => &[7, 7, 7],
            Base::Resnet18 => &[2, 2, 2, 2],
            Base::Resnet34 | Base::Resnet50 => &[3, 4, 6, 3],
        }
    }

    /// FP-blocks that replace one stage.
    pub fn fp_blocks_per_layer(self) -> usize {
        match self {
            Base::Resnet20 => 1,
            Base::Resnet32 => 3,
            Base::Resnet44 => 5,
            _ => 1,
        }
    }

    /// Output width of each stage.
    pub fn widths(self) -> &'static [usize] {
        match self {
            Base::Resnet20 | Base::Resnet32 | Base::Resnet44 => &[16, 32, 64],
            Base::Resnet18 | Base::Resnet34 => &[64, 128, 256, 512],
            Base::Resnet50 => &[256, 512, 1024, 2048],
        }
    }

    pub fn num_layers(self) -> usize {
        self.widths().len()
    }

    pub fn stem_width(self) -> usize {
        if self.is_cifar() {
            16
        } else {
            64
        }
    }

    /// Input side length the architecture is designed for.
    pub fn input_size(self) -> usize {
        if self.is_cifar() {
            32
        } else {
            224
        }
    }

    pub fn default_q(self) -> usize {
        if self.is_cifar() {
            2
        } else {
            1
        }
    }

    fn layer_stride(self, layer: usize) -> usize {
        if layer == 0 {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for Base {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Base {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        Base::ALL
            .into_iter()
            .find(|b| b.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown base architecture {s:?}")))
    }
}

/// A base network plus a substitution configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub base: Base,
    /// One character per stage, `'0'` keeps it, `'1'` replaces it.
    pub config: String,
    pub q: usize,
    pub num_classes: usize,
    /// Use single-filter ablation blocks for replaced stages.
    pub ablation: bool,
}

impl ModelSpec {
    /// The unmodified base network.
    pub fn base(base: Base, num_classes: usize) -> Self {
        ModelSpec { base, config: "0".repeat(base.num_layers()), q: base.default_q(), num_classes, ablation: false }
    }

    pub fn with_config(base: Base, config: &str) -> Self {
        ModelSpec { config: config.to_string(), ..ModelSpec::base(base, 10) }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.base.num_layers();
        if self.config.len() != n || !self.config.chars().all(|c| c == '0' || c == '1') {
            return Err(Error::Config(format!(
                "config {:?} for {} must be {n} binary digits",
                self.config, self.base
            )));
        }
        if self.base.is_cifar() && self.config == "111" {
            return Err(Error::RejectedConfig { base: self.base.to_string(), config: self.config.clone() });
        }
        if self.q == 0 {
            return Err(Error::Config("expansion factor q must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn replaced(&self, layer: usize) -> bool {
        self.config.as_bytes().get(layer) == Some(&b'1')
    }

    /// Short identifier such as `resnet32-001` or `resnet32-001-ablation`.
    pub fn label(&self) -> String {
        let mut s = format!("{}-{}", self.base, self.config);
        if self.ablation && self.config.contains('1') {
            s.push_str("-ablation");
        }
        s
    }
}

#[derive(Clone, Debug)]
enum Stem {
    /// 3×3 convolution, BN, ReLU.
    Cifar(ConvBn),
    /// 7×7 stride-2 convolution, BN, ReLU, 3×3 stride-2 max-pool.
    ImageNet(ConvBn),
}

/// One residual stage or its replacement.
#[derive(Clone, Debug)]
pub struct Layer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial reduction factor of the stage.
    pub stride: usize,
    pub blocks: Vec<Block>,
}

impl Layer {
    pub fn is_fp(&self) -> bool {
        matches!(self.blocks.first(), Some(Block::Fp(_)))
    }
}

/// A built network: structure only, parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    stem: Stem,
    layers: Vec<Layer>,
    head: Linear,
}

impl Model {
    /// Builds `spec` into a fresh store with parameters seeded from `seed`.
    pub fn new<T: Scalar>(spec: ModelSpec, seed: u64) -> Result<(Model, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let model = Model::build(&mut Builder::new(&mut store, seed), spec)?;
        Ok((model, store))
    }

    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let base = spec.base;
        let sw = base.stem_width();
        let stem = if base.is_cifar() {
            Stem::Cifar(b.conv_bn("stem", Conv2dSpec::new(3, sw, 3, 1, 1), true)?)
        } else {
            Stem::ImageNet(b.conv_bn("stem", Conv2dSpec::new(3, sw, 7, 2, 3), true)?)
        };
        let mut layers = Vec::with_capacity(base.num_layers());
        let mut c_in = sw;
        for (i, (&width, &n)) in base.widths().iter().zip(base.blocks_per_layer()).enumerate() {
            let stride = base.layer_stride(i);
            let mut lb = b.scope(&format!("layer{}", i + 1));
            let mut blocks = Vec::new();
            if spec.replaced(i) {
                for j in 0..base.fp_blocks_per_layer() {
                    let d_in = if j == 0 { c_in } else { width };
                    let fs = FpBlockSpec::new(d_in, width, spec.q).downsample(j == 0 && stride == 2).ablation(spec.ablation);
                    blocks.push(Block::Fp(FpBlock::build(&mut lb.scope(&j.to_string()), fs)?));
                }
            } else {
                for j in 0..n {
                    let (cin, s) = if j == 0 { (c_in, stride) } else { (width, 1) };
                    let mut bb = lb.scope(&j.to_string());
                    blocks.push(if base.bottleneck() {
                        Block::Bottleneck(Bottleneck::build(&mut bb, cin, width, s)?)
                    } else {
                        Block::Basic(BasicBlock::build(&mut bb, cin, width, s, base.is_cifar())?)
                    });
                }
            }
            layers.push(Layer { in_channels: c_in, out_channels: width, stride, blocks });
            c_in = width;
        }
        let head = b.linear("head", c_in, spec.num_classes)?;
        Ok(Model { spec, stem, layers, head })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Weighted layers on the longest path: convolutions (a parallel filter
    /// pair counts once) plus the classifier.
    pub fn depth(&self) -> usize {
        1 + self.layers.iter().flat_map(|l| &l.blocks).map(Block::depth).sum::<usize>() + 1
    }

    /// Maps `(N, 3, H, W)` images to `(N, num_classes)` logits.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = match &self.stem {
            Stem::Cifar(c) => c.forward(ctx, x)?,
            Stem::ImageNet(c) => {
                let h = c.forward(ctx, x)?;
                ctx.tape.max_pool2d_padded(h, 3, 2, 1)?
            }
        };
        for block in self.layers.iter().flat_map(|l| &l.blocks) {
            h = block.forward(ctx, h)?;
        }
        let pooled = ctx.tape.global_avg_pool(h)?;
        self.head.forward(ctx, pooled)
    }
}

/// The unmodified CIFAR ResNet.
pub fn build_cifar_resnet<T: Scalar>(base: Base, num_classes: usize, seed: u64) -> Result<(Model, ParamStore<T>)> {
    if !base.is_cifar() {
        return Err(Error::Config(format!("{base} is not a CIFAR architecture")));
    }
    Model::new(ModelSpec::base(base, num_classes), seed)
}

/// The base network of `spec` with the stages selected by its config replaced.
pub fn apply_fp_config<T: Scalar>(spec: ModelSpec, seed: u64) -> Result<(Model, ParamStore<T>)> {
    Model::new(spec, seed)
}

/// ImageNet ResNet-50 with stages 2 and 4 each replaced by one FP-block
/// (q = 1), summarised for parameter accounting.
pub fn build_fp_resnet50_spec(num_classes: usize) -> Result<ModelSummary> {
    let spec = ModelSpec { config: "0101".into(), num_classes, ..ModelSpec::base(Base::Resnet50, num_classes) };
    let (model, store) = Model::new::<f32>(spec, 0)?;
    Ok(summarize(&model, &store))
}

use crate::error::Result;
use crate::fp_block::FpBlock;
use crate::nn_ops::{Builder, Conv2dSpec, ConvBn, Ctx};
use crate::tensor::{Scalar, Var};

/// Residual path when the main path changes shape.
#[derive(Clone, Debug)]
pub enum Shortcut {
    Identity,
    /// Strided subsampling plus zero channels; no parameters.
    Pad { stride: usize, out_channels: usize },
    /// Strided 1×1 convolution and BN.
    Projection(ConvBn),
}

impl Shortcut {
    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Shortcut::Identity => Ok(x),
            Shortcut::Pad { stride, out_channels } => ctx.tape.shortcut_pad(x, *stride, *out_channels),
            Shortcut::Projection(p) => p.forward(ctx, x),
        }
    }
}

/// Two 3×3 conv-BN stages, added to the shortcut, then ReLU.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Shortcut,
}

impl BasicBlock {
    /// `pad_shortcut` selects the parameter-free shortcut for shape changes.
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        c_in: usize,
        c_out: usize,
        stride: usize,
        pad_shortcut: bool,
    ) -> Result<Self> {
        let conv1 = b.conv_bn("conv1", Conv2dSpec::new(c_in, c_out, 3, stride, 1), true)?;
        let conv2 = b.conv_bn("conv2", Conv2dSpec::new(c_out, c_out, 3, 1, 1), false)?;
        let shortcut = if stride == 1 && c_in == c_out {
            Shortcut::Identity
        } else if pad_shortcut {
            Shortcut::Pad { stride, out_channels: c_out }
        } else {
            Shortcut::Projection(b.conv_bn("shortcut", Conv2dSpec::new(c_in, c_out, 1, stride, 0), false)?)
        };
        Ok(BasicBlock { conv1, conv2, shortcut })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.conv2.forward(ctx, y)?;
        let s = self.shortcut.forward(ctx, x)?;
        let sum = ctx.tape.add(y, s)?;
        ctx.tape.relu(sum)
    }
}

/// 1×1 reduce, 3×3 (strided), 1×1 expand by four, with a projection
/// shortcut whenever the shape changes.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: ConvBn,
    pub conv: ConvBn,
    pub expand: ConvBn,
    pub shortcut: Shortcut,
}

impl Bottleneck {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let mid = c_out / 4;
        let reduce = b.conv_bn("conv1", Conv2dSpec::pointwise(c_in, mid), true)?;
        let conv = b.conv_bn("conv2", Conv2dSpec::new(mid, mid, 3, stride, 1), true)?;
        let expand = b.conv_bn("conv3", Conv2dSpec::pointwise(mid, c_out), false)?;
        let shortcut = if stride == 1 && c_in == c_out {
            Shortcut::Identity
        } else {
            Shortcut::Projection(b.conv_bn("shortcut", Conv2dSpec::new(c_in, c_out, 1, stride, 0), false)?)
        };
        Ok(Bottleneck { reduce, conv, expand, shortcut })
    }

    fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(ctx, x)?;
        let y = self.conv.forward(ctx, y)?;
        let y = self.expand.forward(ctx, y)?;
        let s = self.shortcut.forward(ctx, x)?;
        let sum = ctx.tape.add(y, s)?;
        ctx.tape.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Basic(BasicBlock),
    Bottleneck(Bottleneck),
    /// No shortcut.
    Fp(FpBlock),
}

impl Block {
    pub fn kind(&self) -> &'static str {
        match self {
            Block::Basic(_) => "basic",
            Block::Bottleneck(_) => "bottleneck",
            Block::Fp(b) if b.spec().ablation => "single-filter",
            Block::Fp(_) => "fp",
        }
    }

    pub(crate) fn depth(&self) -> usize {
        match self {
            Block::Basic(_) => 2,
            Block::Bottleneck(_) | Block::Fp(_) => 3,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Basic(b) => b.forward(ctx, x),
            Block::Bottleneck(b) => b.forward(ctx, x),
            Block::Fp(b) => b.forward(ctx, x),
        }
    }
}

//! The feature-product block.
//!
//! A block expands its input with a 1×1 convolution, filters the expanded
//! tensor with two independent depthwise convolutions, multiplies the two
//! responses pixelwise, normalises the product without affine rescaling and
//! recombines it with a second 1×1 convolution:
//!
//! ```text
//! x ─ 1×1 conv ─ BN ─ ReLU ─┬─ dws f_a ─┐
//!                           └─ dws f_b ─┴─ ⊙ ─ BN(no affine) ─ 1×1 conv ─ BN ─ ReLU ─ [max-pool 2/2]
//! ```
//!
//! Per pixel and channel the product is `g(x) = (f_a·x)(f_b·x)`, a quadratic
//! form in the k² pixels of the receptive field with rank-one weights
//! `w_ij = f_a[i] f_b[j]`. [`expand_volterra`] materialises those weights so the
//! identity can be checked directly. Inputs orthogonal to either filter give
//! exactly zero, which is what makes the pair a conjunction of two features.
//!
//! The ablation variant replaces the pair and the product normalisation with a
//! single depthwise filter followed by ReLU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn_ops::{BatchNorm, BatchNormSpec, Builder, Conv2dSpec, ConvBn, Ctx, DwsConv, DwsConvSpec};
use crate::tensor::{ParamStore, Scalar, Var};

/// Hyperparameters of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpBlockSpec {
    pub d_in: usize,
    pub d_out: usize,
    /// Expansion factor: the filtered tensor has `q * d_out` channels.
    pub q: usize,
    /// Depthwise kernel size, odd.
    pub k: usize,
    /// Append a 2×2 max-pool with stride 2.
    pub downsample: bool,
    /// Single filter plus ReLU instead of a filter pair.
    pub ablation: bool,
}

impl FpBlockSpec {
    pub fn new(d_in: usize, d_out: usize, q: usize) -> Self {
        FpBlockSpec { d_in, d_out, q, k: 3, downsample: false, ablation: false }
    }

    pub fn kernel(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn downsample(mut self, on: bool) -> Self {
        self.downsample = on;
        self
    }

    pub fn ablation(mut self, on: bool) -> Self {
        self.ablation = on;
        self
    }

    pub fn hidden(&self) -> usize {
        self.q * self.d_out
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.q == 0 {
            return Err(Error::Config(format!(
                "block needs positive d_in, d_out and q, got {}, {}, {}",
                self.d_in, self.d_out, self.q
            )));
        }
        if self.k.is_multiple_of(2) {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {}", self.k)));
        }
        Ok(())
    }
}

/// `N = q·d_in·d_out + 2·q·k²·d_out + q·d_out²`: convolution weights of a
/// filter-pair block, normalisation parameters excluded.
pub fn count_fp_block_params(spec: &FpBlockSpec) -> usize {
    let FpBlockSpec { d_in, d_out, q, k, .. } = *spec;
    q * d_in * d_out + 2 * q * k * k * d_out + q * d_out * d_out
}

/// Convolution weights of the block `spec` actually describes; the ablation
/// variant drops one filter bank.
pub fn count_block_conv_params(spec: &FpBlockSpec) -> usize {
    let n = count_fp_block_params(spec);
    if spec.ablation {
        n - spec.q * spec.k * spec.k * spec.d_out
    } else {
        n
    }
}

/// Learnable normalisation parameters: the two affine batch norms. The
/// product normalisation has none.
pub fn count_block_bn_params(spec: &FpBlockSpec) -> usize {
    2 * spec.hidden() + 2 * spec.d_out
}

#[derive(Clone, Debug)]
enum Filters {
    Pair { a: DwsConv, b: DwsConv, norm: BatchNorm },
    Single { f: DwsConv },
}

/// A built block: handles into a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct FpBlock {
    spec: FpBlockSpec,
    expand: ConvBn,
    filters: Filters,
    recombine: ConvBn,
}

impl FpBlock {
    /// Registers the block's parameters under the builder's current prefix.
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, spec: FpBlockSpec) -> Result<Self> {
        spec.validate()?;
        let h = spec.hidden();
        let expand = b.conv_bn("expand", Conv2dSpec::pointwise(spec.d_in, h), true)?;
        let dws = DwsConvSpec::same(h, spec.k)?;
        let filters = if spec.ablation {
            Filters::Single { f: b.dws_conv("filter", dws)? }
        } else {
            Filters::Pair {
                a: b.dws_conv("filter_a", dws)?,
                b: b.dws_conv("filter_b", dws)?,
                norm: b.batch_norm("product_bn", BatchNormSpec::without_affine(h))?,
            }
        };
        let recombine = b.conv_bn("recombine", Conv2dSpec::pointwise(h, spec.d_out), true)?;
        Ok(FpBlock { spec, expand, filters, recombine })
    }

    pub fn spec(&self) -> &FpBlockSpec {
        &self.spec
    }

    /// Depthwise filter banks: `(f_a, Some(f_b))`, or `(f, None)` for the
    /// ablation variant.
    pub fn filters(&self) -> (&DwsConv, Option<&DwsConv>) {
        match &self.filters {
            Filters::Pair { a, b, .. } => (a, Some(b)),
            Filters::Single { f } => (f, None),
        }
    }

    /// The nonlinear stage on an already expanded tensor, before any
    /// normalisation: `f_a * h ⊙ f_b * h`, or `relu(f * h)` for the ablation.
    pub fn product<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, h: Var) -> Result<Var> {
        match &self.filters {
            Filters::Pair { a, b, .. } => {
                let ya = a.forward(ctx, h)?;
                let yb = b.forward(ctx, h)?;
                ctx.tape.mul(ya, yb)
            }
            Filters::Single { f } => {
                let y = f.forward(ctx, h)?;
                ctx.tape.relu(y)
            }
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.expand.forward(ctx, x)?;
        let mut p = self.product(ctx, h)?;
        if let Filters::Pair { norm, .. } = &self.filters {
            p = norm.forward(ctx, p)?;
        }
        let y = self.recombine.forward(ctx, p)?;
        if self.spec.downsample {
            ctx.tape.max_pool2d(y, 2, 2)
        } else {
            Ok(y)
        }
    }
}

/// Builds a filter-pair block into a fresh store.
pub fn build_fp_block<T: Scalar>(spec: FpBlockSpec, seed: u64) -> Result<(FpBlock, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let block = FpBlock::build(&mut Builder::new(&mut store, seed), spec.ablation(false))?;
    Ok((block, store))
}

/// Builds the single-filter variant into a fresh store.
pub fn build_ablation_block<T: Scalar>(spec: FpBlockSpec, seed: u64) -> Result<(FpBlock, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let block = FpBlock::build(&mut Builder::new(&mut store, seed), spec.ablation(true))?;
    Ok((block, store))
}

fn check_lengths(lens: &[usize]) -> Result<()> {
    if lens.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Shape(format!("patch and filters must have equal length, got {lens:?}")));
    }
    Ok(())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `(f_a·x)(f_b·x)` for one flattened receptive field.
pub fn feature_product_patch<T: Scalar>(x: &[T], f_a: &[T], f_b: &[T]) -> Result<T> {
    check_lengths(&[x.len(), f_a.len(), f_b.len()])?;
    Ok(dot(f_a, x) * dot(f_b, x))
}

/// Second-order kernel `w_ij = f_a[i] f_b[j]` over `n` pixels, stored
/// row-major as an `n × n` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct VolterraKernel<T> {
    n: usize,
    weights: Vec<T>,
}

impl<T: Scalar> VolterraKernel<T> {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> T {
        self.weights[i * self.n + j]
    }

    /// `Σ_i Σ_j w_ij x_i x_j`.
    pub fn evaluate(&self, x: &[T]) -> Result<T> {
        check_lengths(&[x.len(), self.n])?;
        let mut total = T::zero();
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.weights[i * self.n..][..self.n];
            for (&w, &xj) in row.iter().zip(x) {
                total += w * xi * xj;
            }
        }
        Ok(total)
    }

    /// `(w + wᵀ) / 2`; the same quadratic form.
    pub fn symmetrized(&self) -> Self {
        let n = self.n;
        let half = T::from_f64(0.5);
        let weights = (0..n * n).map(|idx| (self.weights[idx] + self.weights[(idx % n) * n + idx / n]) * half).collect();
        VolterraKernel { n, weights }
    }
}

pub fn expand_volterra<T: Scalar>(f_a: &[T], f_b: &[T]) -> Result<VolterraKernel<T>> {
    check_lengths(&[f_a.len(), f_b.len()])?;
    let weights = f_a.iter().flat_map(|&a| f_b.iter().map(move |&b| a * b)).collect();
    Ok(VolterraKernel { n: f_a.len(), weights })
}

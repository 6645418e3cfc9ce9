//! Parameter-owning wrappers around the primitive ops.
//!
//! Weights live in a [`ParamStore`]; the layer structs only keep handles, so
//! a model is plain data plus one store. Every tensor is initialised from its
//! own RNG stream keyed by `(seed, parameter name)`, which makes the values of
//! a layer independent of what was built before it.

use super::{BatchNormSpec, Conv2dSpec, DwsConvSpec, Mode, RunningStats};
use crate::error::Result;
use crate::tensor::rng::hash_str;
use crate::tensor::{seeded_rng, ParamId, ParamKind, ParamStore, Scalar, Shape, Tape, Tensor, Var};

use rand_distr::{Distribution, Normal};

/// Everything a forward pass needs besides the input.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Ctx { tape, store, mode }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Builder { store, seed, prefix: String::new() }
    }

    /// Builder whose names are nested under `name`.
    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = self.qualify(name);
        Builder { store: self.store, seed: self.seed, prefix }
    }

    pub fn qualify(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// He-normal tensor: `N(0, 2 / fan_in)`.
    fn he_normal(&self, name: &str, dims: &[usize], fan_in: usize) -> Result<Tensor<T>> {
        let shape = Shape::new(dims.to_vec())?;
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let mut rng = seeded_rng(self.seed, &[hash_str(name)]);
        let data = (0..shape.numel()).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
        Tensor::new(shape, data)
    }

    fn add(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let full = self.qualify(name);
        self.store.add(full, value, kind)
    }

    fn add_weight(&mut self, name: &str, dims: &[usize], fan_in: usize) -> Result<ParamId> {
        let full = self.qualify(name);
        let value = self.he_normal(&full, dims, fan_in)?;
        self.store.add(full, value, ParamKind::Weight)
    }

    fn add_fill(&mut self, name: &str, len: usize, v: f64, kind: ParamKind) -> Result<ParamId> {
        let t = Tensor::full(&Shape::new(vec![len])?, T::from_f64(v));
        self.add(name, t, kind)
    }

    pub fn conv2d(&mut self, name: &str, spec: Conv2dSpec) -> Result<Conv2d> {
        spec.validate()?;
        let mut b = self.scope(name);
        let fan_in = spec.in_channels * spec.kernel_size * spec.kernel_size;
        let weight = b.add_weight("weight", &spec.weight_dims(), fan_in)?;
        let bias = if spec.bias { Some(b.add_fill("bias", spec.out_channels, 0.0, ParamKind::Affine)?) } else { None };
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn dws_conv(&mut self, name: &str, spec: DwsConvSpec) -> Result<DwsConv> {
        let mut b = self.scope(name);
        let weight = b.add_weight("weight", &spec.weight_dims(), spec.kernel_size * spec.kernel_size)?;
        Ok(DwsConv { spec, weight })
    }

    pub fn batch_norm(&mut self, name: &str, spec: BatchNormSpec) -> Result<BatchNorm> {
        spec.validate()?;
        let mut b = self.scope(name);
        let affine = if spec.affine {
            Some((
                b.add_fill("weight", spec.channels, 1.0, ParamKind::Affine)?,
                b.add_fill("bias", spec.channels, 0.0, ParamKind::Affine)?,
            ))
        } else {
            None
        };
        let running_mean = b.add_fill("running_mean", spec.channels, 0.0, ParamKind::Buffer)?;
        let running_var = b.add_fill("running_var", spec.channels, 1.0, ParamKind::Buffer)?;
        Ok(BatchNorm { spec, affine, running_mean, running_var })
    }

    pub fn conv_bn(&mut self, name: &str, spec: Conv2dSpec, relu: bool) -> Result<ConvBn> {
        let mut b = self.scope(name);
        let conv = b.conv2d("conv", spec)?;
        let bn = b.batch_norm("bn", BatchNormSpec::new(spec.out_channels))?;
        Ok(ConvBn { conv, bn, relu })
    }

    pub fn linear(&mut self, name: &str, in_features: usize, out_features: usize) -> Result<Linear> {
        let mut b = self.scope(name);
        let weight = b.add_weight("weight", &[out_features, in_features], in_features)?;
        let bias = b.add_fill("bias", out_features, 0.0, ParamKind::Affine)?;
        Ok(Linear { in_features, out_features, weight, bias })
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: Conv2dSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv2d {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, &self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct DwsConv {
    pub spec: DwsConvSpec,
    pub weight: ParamId,
}

impl DwsConv {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        ctx.tape.dws_conv(x, w, &self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub spec: BatchNormSpec,
    pub affine: Option<(ParamId, ParamId)>,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let affine = self.affine.map(|(g, b)| (ctx.param(g), ctx.param(b)));
        let mut mean = ctx.store.get(self.running_mean).value().clone();
        let mut var = ctx.store.get(self.running_var).value().clone();
        let y = ctx.tape.batch_norm(x, affine, RunningStats { mean: &mut mean, var: &mut var }, &self.spec, ctx.mode)?;
        if ctx.mode == Mode::Train {
            *ctx.store.get_mut(self.running_mean).value_mut() = mean;
            *ctx.store.get_mut(self.running_var).value_mut() = var;
        }
        Ok(y)
    }
}

/// Convolution, batch norm and optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        if self.relu {
            ctx.tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_hierarchical_and_init_is_name_keyed() {
        let mut s1 = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut s1, 3);
        let mut blk = b.scope("layer1");
        blk.conv_bn("conv1", Conv2dSpec::new(3, 4, 3, 1, 1), true).unwrap();
        let names: Vec<_> = s1.iter().map(|(_, p)| p.name().to_string()).collect();
        assert_eq!(
            names,
            [
                "layer1.conv1.conv.weight",
                "layer1.conv1.bn.weight",
                "layer1.conv1.bn.bias",
                "layer1.conv1.bn.running_mean",
                "layer1.conv1.bn.running_var"
            ]
        );
        assert_eq!(s1.num_learnable(), 3 * 4 * 9 + 8);

        // Building something else first does not change this layer's values.
        let mut s2 = ParamStore::<f32>::new();
        let mut b2 = Builder::new(&mut s2, 3);
        b2.linear("head", 5, 2).unwrap();
        b2.scope("layer1").conv_bn("conv1", Conv2dSpec::new(3, 4, 3, 1, 1), true).unwrap();
        assert_eq!(
            s1.by_name("layer1.conv1.conv.weight").unwrap().value(),
            s2.by_name("layer1.conv1.conv.weight").unwrap().value()
        );
    }

    #[test]
    fn he_init_scale() {
        let mut s = ParamStore::<f64>::new();
        let conv = Builder::new(&mut s, 1).conv2d("c", Conv2dSpec::new(64, 64, 3, 1, 1)).unwrap();
        let w = s.get(conv.weight).value().data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / (64.0 * 9.0);
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
    }
}

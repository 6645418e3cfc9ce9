//! Activation, classification head, loss and the parameter-free shortcut.

use crate::error::{Error, Result};
use crate::tensor::scalar::{gemm, MatRef};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

impl<T: Scalar> Tape<T> {
    /// `max(0, x)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.shared(x);
        let out = xv.map(|v| if v > T::zero() { v } else { T::zero() });
        self.trace_branches(xv.data().iter().map(|&v| (v > T::zero()) as u64));
        self.push_op("relu", out, &[x], move |g, _| {
            let data = g.data().iter().zip(xv.data()).map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() }).collect();
            vec![Some(Tensor { shape: g.shape().clone(), data })]
        })
    }

    /// `x W^T + b` with `x: (N, in)`, `W: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, inp) = match self.value(x).dims() {
            &[n, i] => (n, i),
            d => return Err(Error::Shape(format!("linear expects (N, features), got {d:?}"))),
        };
        let out_f = match self.value(w).dims() {
            &[o, i] if i == inp => o,
            d => return Err(Error::Shape(format!("linear weight {d:?} does not accept {inp} features"))),
        };
        if let Some(b) = b {
            if self.value(b).dims() != [out_f] {
                return Err(Error::Shape(format!("linear bias shape {}", self.value(b).shape())));
            }
        }
        let xv = self.shared(x);
        let wv = self.shared(w);
        let mut out = vec![T::zero(); n * out_f];
        if let Some(b) = b {
            for row in out.chunks_exact_mut(out_f) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        gemm(n, inp, out_f, MatRef::row_major(xv.data(), inp), MatRef::transposed(wv.data(), inp), T::one(), &mut out);
        let out = Tensor::new(Shape::new(vec![n, out_f])?, out)?;
        let parents: Vec<Var> = [x, w].into_iter().chain(b).collect();
        let has_bias = b.is_some();
        self.push_op("linear", out, &parents, move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut dx = vec![T::zero(); n * inp];
                gemm(n, out_f, inp, MatRef::row_major(gd, out_f), MatRef::row_major(wv.data(), inp), T::zero(), &mut dx);
                Tensor { shape: xv.shape().clone(), data: dx }
            });
            let dw = needs[1].then(|| {
                let mut dw = vec![T::zero(); out_f * inp];
                gemm(out_f, n, inp, MatRef::transposed(gd, out_f), MatRef::row_major(xv.data(), inp), T::zero(), &mut dw);
                Tensor { shape: wv.shape().clone(), data: dw }
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut db = vec![T::zero(); out_f];
                    for row in gd.chunks_exact(out_f) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor { shape: Shape(vec![out_f]), data: db }
                }));
            }
            grads
        })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed with
    /// max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.value(logits).dims() {
            &[n, k] => (n, k),
            d => return Err(Error::Shape(format!("cross entropy expects (N, classes) logits, got {d:?}"))),
        };
        if labels.len() != n {
            return Err(Error::Contract(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} outside [0, {k})")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = 0.0f64;
        for (i, (row, p)) in lv.chunks_exact(k).zip(probs.chunks_exact_mut(k)).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            total += (z.ln() + max - row[labels[i]]).as_f64();
        }
        let out = Tensor::scalar(T::from_f64(total / n as f64));
        let labels = labels.to_vec();
        let shape = self.value(logits).shape().clone();
        self.push_op("softmax_cross_entropy", out, &[logits], move |g, _| {
            let scale = g.data()[0] / T::from_f64(n as f64);
            let mut d = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                d[i * k + l] -= T::one();
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor { shape: shape.clone(), data: d })]
        })
    }

    /// Parameter-free shortcut for a residual block that changes shape:
    /// spatial subsampling by `stride`, then zero channels split evenly on
    /// both sides to reach `out_channels`.
    pub fn shortcut_pad(&mut self, x: Var, stride: usize, out_channels: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).shape().nchw()?;
        if out_channels < c || stride == 0 {
            return Err(Error::Shape(format!("cannot pad {c} channels to {out_channels} with stride {stride}")));
        }
        let front = (out_channels - c) / 2;
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * out_channels * oh * ow];
        for s in 0..n {
            for ch in 0..c {
                let src = &xd[(s * c + ch) * h * w..][..h * w];
                let dst = &mut out[(s * out_channels + front + ch) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = src[oy * stride * w + ox * stride];
                    }
                }
            }
        }
        let out = Tensor::new(Shape::new(vec![n, out_channels, oh, ow])?, out)?;
        let in_shape = self.value(x).shape().clone();
        self.push_op("shortcut_pad", out, &[x], move |g, _| {
            let gd = g.data();
            let mut dx = vec![T::zero(); in_shape.numel()];
            for s in 0..n {
                for ch in 0..c {
                    let src = &gd[(s * out_channels + front + ch) * oh * ow..][..oh * ow];
                    let dst = &mut dx[(s * c + ch) * h * w..][..h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[oy * stride * w + ox * stride] = src[oy * ow + ox];
                        }
                    }
                }
            }
            vec![Some(Tensor { shape: in_shape.clone(), data: dx })]
        })
    }
}

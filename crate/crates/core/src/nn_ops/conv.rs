//! Dense and depthwise 2-D convolution.
//!
//! Dense convolution lowers each sample to a patch matrix (im2col) and runs a
//! single GEMM; the backward pass recomputes the patch matrix instead of
//! keeping it alive, trading a cheap copy for a large memory saving.
//! Depthwise convolution has one `k x k` filter per channel and is computed
//! directly with shifted row updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::scalar::{gemm, MatRef};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    /// Bias-free convolution, the form used in front of every batch norm.
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, padding: usize) -> Self {
        Conv2dSpec { in_channels, out_channels, kernel_size, stride, padding, bias: false }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1, 1, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("invalid convolution {self:?}")));
        }
        Ok(())
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_out_hw(h, w, self.kernel_size, self.stride, self.padding)
    }
}

/// One `k x k` filter per channel, stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwsConvSpec {
    pub channels: usize,
    pub kernel_size: usize,
    pub padding: usize,
}

impl DwsConvSpec {
    /// Same-padded depthwise convolution; needs an odd kernel.
    pub fn same(channels: usize, kernel_size: usize) -> Result<Self> {
        if kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "depthwise kernel size {kernel_size} is even; same padding is undefined, pass an explicit padding"
            )));
        }
        Self::with_padding(channels, kernel_size, (kernel_size - 1) / 2)
    }

    pub fn with_padding(channels: usize, kernel_size: usize, padding: usize) -> Result<Self> {
        if channels == 0 || kernel_size == 0 {
            return Err(Error::Config(format!("invalid depthwise convolution ({channels} channels, k={kernel_size})")));
        }
        Ok(DwsConvSpec { channels, kernel_size, padding })
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.channels, 1, self.kernel_size, self.kernel_size]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_out_hw(h, w, self.kernel_size, 1, self.padding)
    }
}

fn conv_out_hw(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!("{k}x{k} kernel does not fit a {h}x{w} input with padding {pad}")));
    }
    Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

/// Range of output columns whose input column `o * stride + kx - pad` is in bounds.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o * stride + k_off >= pad  and  o * stride + k_off < in_len + pad
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let hi = if in_len + pad > k_off { (in_len + pad - k_off).div_ceil(stride).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unrolls one `(C, H, W)` sample into a `(C*k*k, OH*OW)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, col: &mut [T]) {
    let p = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let row = &mut col[((c * g.k + ky) * g.k + kx) * p..][..p];
                let (xlo, xhi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                for oy in 0..g.oh {
                    let out = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if oy < ylo || oy >= yhi {
                        out.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    out[..xlo].fill(T::zero());
                    out[xhi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = xlo + kx - g.pad;
                        out[xlo..xhi].copy_from_slice(&src[start..start + (xhi - xlo)]);
                    } else {
                        for (ox, o) in out.iter_mut().enumerate().take(xhi).skip(xlo) {
                            *o = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds patch gradients into `dx`.
fn col2im<T: Scalar>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let p = g.oh * g.ow;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let row = &col[((c * g.k + ky) * g.k + kx) * p..][..p];
                let (xlo, xhi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in xlo..xhi {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Dense convolution; `w` has shape `(out, in, k, k)`, `b` shape `(out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &Conv2dSpec) -> Result<Var> {
        spec.validate()?;
        let (n, c, h, wd) = self.value(x).shape().nchw()?;
        if c != spec.in_channels {
            return Err(Error::Shape(format!("conv2d expects {} input channels, got {c}", spec.in_channels)));
        }
        if self.value(w).dims() != spec.weight_dims() {
            return Err(Error::Shape(format!(
                "conv2d weight shape {} does not match {:?}",
                self.value(w).shape(),
                spec.weight_dims()
            )));
        }
        if let Some(b) = b {
            if self.value(b).dims() != [spec.out_channels] {
                return Err(Error::Shape(format!("conv2d bias shape {}", self.value(b).shape())));
            }
        }
        let (oh, ow) = spec.output_hw(h, wd)?;
        let g = Geometry { c, h, w: wd, k: spec.kernel_size, stride: spec.stride, pad: spec.padding, oh, ow };
        let oc = spec.out_channels;
        let ckk = c * g.k * g.k;
        let p = oh * ow;

        let xv = self.shared(x);
        let wv = self.shared(w);
        let mut out = vec![T::zero(); n * oc * p];
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * p] };
        for s in 0..n {
            let xs = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            let dst = &mut out[s * oc * p..(s + 1) * oc * p];
            gemm(oc, ckk, p, MatRef::row_major(wv.data(), ckk), MatRef::row_major(cols, p), T::zero(), dst);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for s in 0..n {
                for (o, &bias) in bv.iter().enumerate() {
                    out[(s * oc + o) * p..(s * oc + o + 1) * p].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let out = Tensor::new(Shape::new(vec![n, oc, oh, ow])?, out)?;
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        let has_bias = b.is_some();
        self.push_op("conv2d", out, &parents, move |gy, needs| {
            let gy = gy.data();
            let mut dx = needs[0].then(|| vec![T::zero(); n * c * h * wd]);
            let mut dw = needs[1].then(|| vec![T::zero(); oc * ckk]);
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * p] };
            for s in 0..n {
                let gys = &gy[s * oc * p..(s + 1) * oc * p];
                if let Some(dw) = dw.as_mut() {
                    let xs = &xv.data()[s * c * h * wd..(s + 1) * c * h * wd];
                    let cols: &[T] = if g.is_pointwise() {
                        xs
                    } else {
                        im2col(xs, &g, &mut col);
                        &col
                    };
                    gemm(oc, p, ckk, MatRef::row_major(gys, p), MatRef::transposed(cols, p), T::one(), dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxs = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
                    let wt = MatRef::transposed(wv.data(), ckk);
                    if g.is_pointwise() {
                        gemm(ckk, oc, p, wt, MatRef::row_major(gys, p), T::zero(), dxs);
                    } else {
                        gemm(ckk, oc, p, wt, MatRef::row_major(gys, p), T::zero(), &mut col);
                        col2im(&col, &g, dxs);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor { shape: xv.shape().clone(), data: d }),
                dw.map(|d| Tensor { shape: wv.shape().clone(), data: d }),
            ];
            if has_bias {
                let db = needs[2].then(|| {
                    let mut db = vec![T::zero(); oc];
                    for s in 0..n {
                        for (o, acc) in db.iter_mut().enumerate() {
                            *acc += gy[(s * oc + o) * p..(s * oc + o + 1) * p].iter().copied().sum::<T>();
                        }
                    }
                    Tensor { shape: Shape(vec![oc]), data: db }
                });
                grads.push(db);
            }
            grads
        })
    }

    /// Depthwise convolution; `w` has shape `(C, 1, k, k)` and output channel
    /// `c` only reads input channel `c`.
    pub fn dws_conv(&mut self, x: Var, w: Var, spec: &DwsConvSpec) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).shape().nchw()?;
        if c != spec.channels {
            return Err(Error::Shape(format!("dws_conv expects {} channels, got {c}", spec.channels)));
        }
        if self.value(w).dims() != spec.weight_dims() {
            return Err(Error::Shape(format!(
                "dws_conv weight shape {} does not match {:?}",
                self.value(w).shape(),
                spec.weight_dims()
            )));
        }
        let (oh, ow) = spec.output_hw(h, wd)?;
        let (k, pad) = (spec.kernel_size, spec.padding);
        let xv = self.shared(x);
        let wv = self.shared(w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for s in 0..n {
            for ch in 0..c {
                let src = &xv.data()[(s * c + ch) * h * wd..][..h * wd];
                let dst = &mut out[(s * c + ch) * oh * ow..][..oh * ow];
                let filt = &wv.data()[ch * k * k..(ch + 1) * k * k];
                for ky in 0..k {
                    let (ylo, yhi) = valid_range(oh, h, ky, 1, pad);
                    for kx in 0..k {
                        let wgt = filt[ky * k + kx];
                        let (xlo, xhi) = valid_range(ow, wd, kx, 1, pad);
                        for oy in ylo..yhi {
                            let iy = oy + ky - pad;
                            let srow = &src[iy * wd + xlo + kx - pad..][..xhi - xlo];
                            let drow = &mut dst[oy * ow + xlo..oy * ow + xhi];
                            for (d, &v) in drow.iter_mut().zip(srow) {
                                *d += wgt * v;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(Shape::new(vec![n, c, oh, ow])?, out)?;
        self.push_op("dws_conv", out, &[x, w], move |gy, needs| {
            let gy = gy.data();
            let mut dx = needs[0].then(|| vec![T::zero(); n * c * h * wd]);
            let mut dw = needs[1].then(|| vec![T::zero(); c * k * k]);
            for s in 0..n {
                for ch in 0..c {
                    let src = &xv.data()[(s * c + ch) * h * wd..][..h * wd];
                    let g = &gy[(s * c + ch) * oh * ow..][..oh * ow];
                    for ky in 0..k {
                        let (ylo, yhi) = valid_range(oh, h, ky, 1, pad);
                        for kx in 0..k {
                            let (xlo, xhi) = valid_range(ow, wd, kx, 1, pad);
                            let wi = ch * k * k + ky * k + kx;
                            let wgt = wv.data()[wi];
                            let mut acc = T::zero();
                            for oy in ylo..yhi {
                                let iy = oy + ky - pad;
                                let off = iy * wd + xlo + kx - pad;
                                let grow = &g[oy * ow + xlo..oy * ow + xhi];
                                if dw.is_some() {
                                    acc += grow.iter().zip(&src[off..off + grow.len()]).map(|(&a, &b)| a * b).sum::<T>();
                                }
                                if let Some(dx) = dx.as_mut() {
                                    let drow = &mut dx[(s * c + ch) * h * wd + off..][..grow.len()];
                                    for (d, &gv) in drow.iter_mut().zip(grow) {
                                        *d += wgt * gv;
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[wi] += acc;
                            }
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor { shape: xv.shape().clone(), data: d }),
                dw.map(|d| Tensor { shape: wv.shape().clone(), data: d }),
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fill, ParamStore};

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, groups: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.shape().nchw().unwrap();
        let (oc, icg, k, _) = w.shape().nchw().unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let ocg = oc / groups;
        let mut out = vec![0.0; n * oc * oh * ow];
        for s in 0..n {
            for o in 0..oc {
                let grp = o / ocg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..icg {
                            let ic = grp * icg + i;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((s * c + ic) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((o * icg + i) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((s * oc + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, oc, oh, ow], out).unwrap()
    }

    fn rand(dims: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::create(dims, Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap()
    }

    #[test]
    fn ones_kernel_sums_patch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::create(&[1, 1, 3, 3], Fill::Ones).unwrap());
        let w = tape.input(Tensor::create(&[1, 1, 3, 3], Fill::Ones).unwrap());
        let y = tape.conv2d(x, w, None, &Conv2dSpec::new(1, 1, 3, 1, 0)).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut tape = Tape::<f64>::new();
        let xt = rand(&[2, 1, 5, 4], 3);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x = tape.input(xt.clone());
        let w = tape.input(Tensor::from_vec(&[1, 1, 3, 3], k).unwrap());
        let y = tape.conv2d(x, w, None, &Conv2dSpec::new(1, 1, 3, 1, 1)).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn matches_naive_loops() {
        let cases = [(2, 3, 7, 6, 4, 3, 1, 1), (1, 2, 8, 8, 3, 3, 2, 1), (2, 4, 5, 5, 2, 1, 1, 0), (1, 1, 9, 7, 2, 5, 2, 2)];
        for (i, &(n, c, h, w, oc, k, s, p)) in cases.iter().enumerate() {
            let xt = rand(&[n, c, h, w], i as u64);
            let wt = rand(&[oc, c, k, k], 100 + i as u64);
            let mut tape = Tape::new();
            let x = tape.input(xt.clone());
            let wv = tape.input(wt.clone());
            let y = tape.conv2d(x, wv, None, &Conv2dSpec::new(c, oc, k, s, p)).unwrap();
            let expect = naive_conv(&xt, &wt, s, p, 1);
            assert_eq!(tape.value(y).dims(), expect.dims());
            for (a, b) in tape.value(y).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn bias_is_added_per_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::create(&[1, 1, 2, 2], Fill::Zeros).unwrap());
        let w = tape.input(Tensor::create(&[2, 1, 1, 1], Fill::Ones).unwrap());
        let b = tape.input(Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let spec = Conv2dSpec { bias: true, ..Conv2dSpec::pointwise(1, 2) };
        let y = tape.conv2d(x, w, Some(b), &spec).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::create(&[1, 2, 3, 3], Fill::Ones).unwrap());
        let w = tape.input(Tensor::create(&[1, 3, 3, 3], Fill::Ones).unwrap());
        assert!(matches!(tape.conv2d(x, w, None, &Conv2dSpec::new(3, 1, 3, 1, 0)), Err(Error::Shape(_))));
        let big = tape.input(Tensor::create(&[1, 2, 3, 3], Fill::Ones).unwrap());
        let w5 = tape.input(Tensor::create(&[1, 2, 5, 5], Fill::Ones).unwrap());
        assert!(tape.conv2d(big, w5, None, &Conv2dSpec::new(2, 1, 5, 1, 0)).is_err());
    }

    #[test]
    fn depthwise_identity_and_isolation() {
        let xt = rand(&[1, 2, 4, 4], 9);
        let mut ident = vec![0.0; 18];
        ident[4] = 1.0;
        ident[13] = 1.0;
        let mut tape = Tape::new();
        let x = tape.input(xt.clone());
        let w = tape.input(Tensor::from_vec(&[2, 1, 3, 3], ident).unwrap());
        let spec = DwsConvSpec::same(2, 3).unwrap();
        let y = tape.dws_conv(x, w, &spec).unwrap();
        assert_eq!(tape.value(y), &xt);

        let mut kern = vec![1.0; 9];
        kern.extend([0.0; 9]);
        let w2 = tape.input(Tensor::from_vec(&[2, 1, 3, 3], kern).unwrap());
        let y2 = tape.dws_conv(x, w2, &spec).unwrap();
        assert!(tape.value(y2).data()[16..].iter().all(|&v| v == 0.0));
        assert!(tape.value(y2).data()[..16].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn depthwise_matches_grouped_naive() {
        for (i, &(n, c, h, w, k)) in [(2, 3, 6, 5, 3), (1, 4, 7, 7, 5), (2, 2, 3, 3, 1)].iter().enumerate() {
            let xt = rand(&[n, c, h, w], 40 + i as u64);
            let wt = rand(&[c, 1, k, k], 50 + i as u64);
            let mut tape = Tape::new();
            let x = tape.input(xt.clone());
            let wv = tape.input(wt.clone());
            let y = tape.dws_conv(x, wv, &DwsConvSpec::same(c, k).unwrap()).unwrap();
            let expect = naive_conv(&xt, &wt, 1, (k - 1) / 2, c);
            for (a, b) in tape.value(y).data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn even_depthwise_kernel_needs_explicit_padding() {
        assert!(matches!(DwsConvSpec::same(4, 2), Err(Error::Config(_))));
        assert!(DwsConvSpec::with_padding(4, 2, 0).is_ok());
    }

    #[test]
    fn conv_backward_matches_transposed_forward() {
        // <conv(x), g> = <x, conv^T(g)>: check dx against the explicit adjoint.
        let xt = rand(&[1, 2, 5, 5], 1);
        let wt = rand(&[3, 2, 3, 3], 2);
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input_with_grad(xt.clone());
        let w = tape.input(wt.clone());
        let y = tape.conv2d(x, w, None, &Conv2dSpec::new(2, 3, 3, 2, 1)).unwrap();
        let gt = rand(tape.value(y).dims(), 3);
        let g = tape.input(gt.clone());
        let prod = tape.mul(y, g).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let dx = tape.grad(x).unwrap();
        // <x, dx> should equal <conv(x), g> because conv is linear in x.
        let lhs: f64 = xt.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        let rhs = tape.value(loss).data()[0];
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

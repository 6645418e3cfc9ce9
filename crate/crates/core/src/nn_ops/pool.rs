use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

impl<T: Scalar> Tape<T> {
    /// Max pooling without padding.
    pub fn max_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        self.max_pool2d_padded(x, window, stride, 0)
    }

    /// Max pooling; padded positions never win. The gradient goes to the
    /// first maximum in row-major window order.
    pub fn max_pool2d_padded(&mut self, x: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).shape().nchw()?;
        if window == 0 || stride == 0 {
            return Err(Error::Config(format!("max_pool2d window {window}, stride {stride}")));
        }
        if window > h + 2 * pad || window > w + 2 * pad {
            return Err(Error::Shape(format!("max_pool2d window {window} exceeds the {h}x{w} input")));
        }
        if pad * 2 > window {
            return Err(Error::Config(format!("max_pool2d padding {pad} is more than half the window {window}")));
        }
        let oh = (h + 2 * pad - window) / stride + 1;
        let ow = (w + 2 * pad - window) / stride + 1;
        let xv = self.shared(x);
        let xd = xv.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for ky in 0..window {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        for kx in 0..window {
                            let ix = ox * stride + kx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            let idx = base + (iy - pad) * w + (ix - pad);
                            let v = xd[idx];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (v, idx) = best.expect("window overlaps the input");
                    out.push(v);
                    arg.push(idx);
                }
            }
        }
        let out = Tensor::new(Shape::new(vec![n, c, oh, ow])?, out)?;
        self.trace_branches(arg.iter().map(|&i| i as u64));
        let in_shape = xv.shape().clone();
        self.push_op("max_pool2d", out, &[x], move |g, _| {
            let mut dx = vec![T::zero(); in_shape.numel()];
            for (&i, &gv) in arg.iter().zip(g.data()) {
                dx[i] += gv;
            }
            vec![Some(Tensor { shape: in_shape.clone(), data: dx })]
        })
    }

    /// Spatial mean per channel: `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).shape().nchw()?;
        let hw = h * w;
        let inv = T::one() / T::from_f64(hw as f64);
        let out: Vec<T> = self.value(x).data().chunks_exact(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(Shape::new(vec![n, c])?, out)?;
        let in_shape = self.value(x).shape().clone();
        self.push_op("global_avg_pool", out, &[x], move |g, _| {
            let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, hw)).collect();
            vec![Some(Tensor { shape: in_shape.clone(), data })]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fill, ParamStore};

    #[test]
    fn two_by_two_max() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn constant_input_routes_gradient_to_first_index() {
        let mut store = ParamStore::new();
        let mut tape = Tape::<f64>::new();
        let x = tape.input_with_grad(Tensor::create(&[1, 1, 4, 4], Fill::Constant(2.5)).unwrap());
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
        assert_eq!(tape.value(y).dims(), &[1, 1, 2, 2]);
        let loss = tape.sum(y).unwrap();
        tape.backward(loss, &mut store).unwrap();
        let g = tape.grad(x).unwrap().data();
        let hot: Vec<usize> = (0..16).filter(|&i| g[i] != 0.0).collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);
    }

    #[test]
    fn matches_naive_window_max() {
        let xt = Tensor::<f64>::create(&[2, 3, 8, 8], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 4 }).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(xt.clone());
        let y = tape.max_pool2d(x, 2, 2).unwrap();
        let out = tape.value(y);
        for plane in 0..6 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(xt.data()[plane * 64 + (2 * oy + dy) * 8 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(out.data()[plane * 16 + oy * 4 + ox], m);
                }
            }
        }
    }

    #[test]
    fn padded_pool_and_oversized_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::create(&[1, 1, 4, 4], Fill::Constant(-1.0)).unwrap());
        let y = tape.max_pool2d_padded(x, 3, 2, 1).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == -1.0));
        assert!(matches!(tape.max_pool2d(x, 5, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn global_average() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::create(&[1, 2, 4, 4], Fill::Ones).unwrap());
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0]);
        assert_eq!(tape.value(y).dims(), &[1, 2]);

        let px = tape.input(Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, -2.0, 3.0, 4.5]).unwrap());
        let py = tape.global_avg_pool(px).unwrap();
        assert_eq!(tape.value(py).data(), &[1.0, -2.0, 3.0, 4.5]);

        let rt = Tensor::<f32>::create(&[2, 3, 5, 3], Fill::Uniform { lo: -2.0, hi: 2.0, seed: 1 }).unwrap();
        let r = tape.input(rt.clone());
        let ry = tape.global_avg_pool(r).unwrap();
        for (i, chunk) in rt.data().chunks(15).enumerate() {
            let m = chunk.iter().sum::<f32>() / 15.0;
            assert!((tape.value(ry).data()[i] - m).abs() < 1e-6);
        }
    }
}

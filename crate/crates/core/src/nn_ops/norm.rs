use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    pub channels: usize,
    /// Learnable scale and shift; `false` leaves the plain standardized output.
    pub affine: bool,
    pub eps: f64,
    /// Weight of the current batch in the running-statistics update.
    pub momentum: f64,
}

impl BatchNormSpec {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNormSpec { channels, affine: true, eps: Self::DEFAULT_EPS, momentum: Self::DEFAULT_MOMENTUM }
    }

    pub fn without_affine(channels: usize) -> Self {
        BatchNormSpec { affine: false, ..Self::new(channels) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !(self.eps > 0.0) || !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(format!("invalid batch norm {self:?}")));
        }
        Ok(())
    }
}

/// Running mean and (unbiased) variance, updated in train mode only.
pub struct RunningStats<'a, T> {
    pub mean: &'a mut Tensor<T>,
    pub var: &'a mut Tensor<T>,
}

impl<T: Scalar> Tape<T> {
    /// Normalizes each channel. In train mode batch statistics are used and
    /// the running statistics are blended with `momentum`; in eval mode the
    /// running statistics are used and left untouched. `affine` must be
    /// `Some((scale, shift))` exactly when `spec.affine` is set.
    pub fn batch_norm(
        &mut self,
        x: Var,
        affine: Option<(Var, Var)>,
        running: RunningStats<'_, T>,
        spec: &BatchNormSpec,
        mode: Mode,
    ) -> Result<Var> {
        spec.validate()?;
        let (n, c, h, w) = self.value(x).shape().nchw()?;
        if c != spec.channels {
            return Err(Error::Shape(format!("batch_norm expects {} channels, got {c}", spec.channels)));
        }
        if affine.is_some() != spec.affine {
            return Err(Error::Contract("batch_norm affine parameters do not match spec.affine".into()));
        }
        for t in [&*running.mean, &*running.var] {
            if t.dims() != [c] {
                return Err(Error::Shape(format!("running statistics shape {} for {c} channels", t.shape())));
            }
        }
        if let Some((g, b)) = affine {
            if self.value(g).dims() != [c] || self.value(b).dims() != [c] {
                return Err(Error::Shape("batch_norm scale/shift must have one entry per channel".into()));
            }
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::DegenerateBatch(n));
        }

        let hw = h * w;
        let count = n * hw;
        let eps = T::from_f64(spec.eps);
        let xv = self.shared(x);
        let xd = xv.data();

        let (mean, inv_std): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let momentum = T::from_f64(spec.momentum);
                let cnt = T::from_f64(count as f64);
                let mut means = Vec::with_capacity(c);
                let mut inv = Vec::with_capacity(c);
                for ch in 0..c {
                    let plane = |s: usize| &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    let mean = (0..n).map(|s| plane(s).iter().copied().sum::<T>()).sum::<T>() / cnt;
                    let sq = (0..n)
                        .map(|s| plane(s).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
                        .sum::<T>();
                    let var = sq / cnt;
                    let unbiased = if count > 1 { sq / T::from_f64((count - 1) as f64) } else { var };
                    let rm = &mut running.mean.data_mut()[ch];
                    *rm = (T::one() - momentum) * *rm + momentum * mean;
                    let rv = &mut running.var.data_mut()[ch];
                    *rv = (T::one() - momentum) * *rv + momentum * unbiased;
                    means.push(mean);
                    inv.push(T::one() / (var + eps).sqrt());
                }
                (means, inv)
            }
            Mode::Eval => (
                running.mean.data().to_vec(),
                running.var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect(),
            ),
        };

        let gamma = affine.map(|(g, _)| self.shared(g));
        let beta = affine.map(|(_, b)| self.value(b).data().to_vec());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                let (m, is) = (mean[ch], inv_std[ch]);
                let (sc, sh) = match (&gamma, &beta) {
                    (Some(g), Some(b)) => (g.data()[ch], b[ch]),
                    _ => (T::one(), T::zero()),
                };
                for ((xh, o), &v) in xhat[range.clone()].iter_mut().zip(&mut out[range.clone()]).zip(&xd[range]) {
                    *xh = (v - m) * is;
                    *o = *xh * sc + sh;
                }
            }
        }
        let out = Tensor::new(xv.shape().clone(), out)?;
        let parents: Vec<Var> = match affine {
            Some((g, b)) => vec![x, g, b],
            None => vec![x],
        };
        let shape = xv.shape().clone();
        self.push_op("batch_norm", out, &parents, move |gy, needs| {
            let gy = gy.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for s in 0..n {
                for ch in 0..c {
                    let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                    for (&g, &xh) in gy[range.clone()].iter().zip(&xhat[range]) {
                        dbeta[ch] += g;
                        dgamma[ch] += g * xh;
                    }
                }
            }
            let dx = needs[0].then(|| {
                let cnt = T::from_f64(count as f64);
                let mut dx = vec![T::zero(); n * c * hw];
                for ch in 0..c {
                    let sc = gamma.as_ref().map_or(T::one(), |g| g.data()[ch]);
                    let k = sc * inv_std[ch];
                    // Sums of d(xhat) = gy * scale, and of d(xhat) * xhat.
                    let (sum_d, sum_dx) = (dbeta[ch] * sc, dgamma[ch] * sc);
                    for s in 0..n {
                        let range = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                        for ((d, &g), &xh) in dx[range.clone()].iter_mut().zip(&gy[range.clone()]).zip(&xhat[range]) {
                            *d = match mode {
                                Mode::Train => inv_std[ch] * (g * sc - (sum_d + xh * sum_dx) / cnt),
                                Mode::Eval => g * k,
                            };
                        }
                    }
                }
                Tensor { shape: shape.clone(), data: dx }
            });
            let mut grads = vec![dx];
            if gamma.is_some() {
                let cs = crate::tensor::Shape(vec![c]);
                grads.push(needs[1].then(|| Tensor { shape: cs.clone(), data: dgamma.clone() }));
                grads.push(needs[2].then(|| Tensor { shape: cs, data: dbeta.clone() }));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fill, Shape};

    fn stats(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        let s = Shape::new(vec![c]).unwrap();
        (Tensor::zeros(&s), Tensor::full(&s, 1.0))
    }

    fn channel_moments(t: &Tensor<f64>, ch: usize) -> (f64, f64) {
        let (n, c, h, w) = t.shape().nchw().unwrap();
        let vals: Vec<f64> =
            (0..n).flat_map(|s| t.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        (m, v)
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        let mut data = vec![3.0; 2 * 2 * 3 * 3];
        data[9..18].fill(-7.0);
        data[27..].fill(-7.0);
        let x = Tensor::from_vec(&[2, 2, 3, 3], data).unwrap();
        let (mut m, mut v) = stats(2);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let y = tape
            .batch_norm(xv, None, RunningStats { mean: &mut m, var: &mut v }, &BatchNormSpec::without_affine(2), Mode::Train)
            .unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_output_is_standardized() {
        let x = Tensor::<f64>::create(&[4, 3, 5, 5], Fill::Normal { mean: 2.0, std: 3.0, seed: 11 }).unwrap();
        let (mut m, mut v) = stats(3);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = tape
            .batch_norm(xv, None, RunningStats { mean: &mut m, var: &mut v }, &BatchNormSpec::without_affine(3), Mode::Train)
            .unwrap();
        for ch in 0..3 {
            let (mean, var) = channel_moments(tape.value(y), ch);
            assert!(mean.abs() <= 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-3, "var {var}");
            // running mean moved 10% of the way to the batch mean
            let (bm, _) = channel_moments(&x, ch);
            assert!((m.data()[ch] - 0.1 * bm).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_affine_equals_plain() {
        let x = Tensor::<f64>::create(&[2, 2, 3, 3], Fill::Uniform { lo: -1.0, hi: 1.0, seed: 5 }).unwrap();
        let (mut m1, mut v1) = stats(2);
        let (mut m2, mut v2) = stats(2);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let g = tape.input(Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        let b = tape.input(Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap());
        let plain = tape
            .batch_norm(xv, None, RunningStats { mean: &mut m1, var: &mut v1 }, &BatchNormSpec::without_affine(2), Mode::Train)
            .unwrap();
        let aff = tape
            .batch_norm(xv, Some((g, b)), RunningStats { mean: &mut m2, var: &mut v2 }, &BatchNormSpec::new(2), Mode::Train)
            .unwrap();
        assert_eq!(tape.value(plain), tape.value(aff));
    }

    #[test]
    fn eval_mode_uses_running_stats_without_updating() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut m = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let mut v = Tensor::from_vec(&[1], vec![4.0 - 1e-5]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let y = tape
            .batch_norm(xv, None, RunningStats { mean: &mut m, var: &mut v }, &BatchNormSpec::without_affine(1), Mode::Eval)
            .unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
        assert_eq!(m.data(), &[1.0]);
    }

    #[test]
    fn single_sample_train_batch_is_degenerate() {
        let (mut m, mut v) = stats(1);
        let mut tape = Tape::<f64>::new();
        let xv = tape.input(Tensor::create(&[1, 1, 4, 4], Fill::Ones).unwrap());
        let r = tape.batch_norm(xv, None, RunningStats { mean: &mut m, var: &mut v }, &BatchNormSpec::without_affine(1), Mode::Train);
        assert!(matches!(r, Err(Error::DegenerateBatch(1))));
    }
}

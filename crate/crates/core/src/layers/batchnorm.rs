use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::{Scalar, Tensor4};

/// Per-channel mean and variance used to normalise a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> ChannelStats<T> {
    pub fn new(mean: Vec<T>, var: Vec<T>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::invalid("mean and variance lengths differ"));
        }
        if var.iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::invalid("negative or NaN variance"));
        }
        Ok(ChannelStats { mean, var })
    }

    pub fn standard(channels: usize) -> Self {
        ChannelStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn cast<U: Scalar>(&self) -> ChannelStats<U> {
        ChannelStats {
            mean: self.mean.iter().map(|v| U::of(v.as_f64())).collect(),
            var: self.var.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Statistics observed on one batch: per-channel mean and biased variance
/// over `count` elements per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum StatsChoice<'a, T> {
    Batch,
    Fixed(&'a ChannelStats<T>),
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    /// `None` until the first training-mode update or a checkpoint load.
    pub running: Option<ChannelStats<T>>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Option<Tensor4<T>>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::invalid("batch norm epsilon must be positive"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid("batch norm momentum must be in [0, 1]"));
        }
        let mut gamma = Param::zeros(channels);
        gamma.value.fill(T::one());
        Ok(BatchNorm {
            gamma,
            beta: Param::zeros(channels),
            running: None,
            momentum,
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn moments(x: &Tensor4<T>) -> BatchMoments {
        let s = x.shape();
        let count = s.n * s.plane();
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        for c in 0..s.c {
            let mut sum = 0.0;
            for n in 0..s.n {
                let off = x.index(n, c, 0, 0);
                sum += x.data()[off..off + s.plane()]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
            let m = sum / count as f64;
            let mut sq = 0.0;
            for n in 0..s.n {
                let off = x.index(n, c, 0, 0);
                sq += x.data()[off..off + s.plane()]
                    .iter()
                    .map(|v| (v.as_f64() - m).powi(2))
                    .sum::<f64>();
            }
            mean[c] = m;
            var[c] = sq / count as f64;
        }
        BatchMoments { mean, var, count }
    }

    /// Returns the output, a backward cache, and the batch moments when batch
    /// statistics were used.
    pub fn forward(
        &self,
        x: &Tensor4<T>,
        stats: StatsChoice<'_, T>,
        keep: bool,
    ) -> Result<(Tensor4<T>, BnCache<T>, Option<BatchMoments>)> {
        let s = x.shape();
        if s.c != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got {}",
                self.channels(),
                s.c
            )));
        }
        let (mean, var, moments): (Vec<f64>, Vec<f64>, _) = match stats {
            StatsChoice::Batch => {
                let m = Self::moments(x);
                (m.mean.clone(), m.var.clone(), Some(m))
            }
            StatsChoice::Fixed(st) => {
                if st.channels() != s.c {
                    return Err(Error::Shape(format!(
                        "statistics for {} channels applied to {}",
                        st.channels(),
                        s.c
                    )));
                }
                (
                    st.mean.iter().map(|v| v.as_f64()).collect(),
                    st.var.iter().map(|v| v.as_f64()).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::of(1.0 / (v + self.eps).sqrt()))
            .collect();
        let mean: Vec<T> = mean.into_iter().map(T::of).collect();
        let plane = s.plane();
        let mut out = Tensor4::zeros(s);
        let mut xhat = keep.then(|| Tensor4::zeros(s));
        for n in 0..s.n {
            for c in 0..s.c {
                let off = x.index(n, c, 0, 0);
                let (m, is, g, b) = (mean[c], inv_std[c], self.gamma.value[c], self.beta.value[c]);
                for i in off..off + plane {
                    let h = (x.data()[i] - m) * is;
                    out.data_mut()[i] = g * h + b;
                    if let Some(xh) = xhat.as_mut() {
                        xh.data_mut()[i] = h;
                    }
                }
            }
        }
        let cache = BnCache {
            xhat,
            inv_std,
            batch_stats: moments.is_some(),
        };
        Ok((out, cache, moments))
    }

    /// Exponential moving update with the unbiased batch variance.
    pub fn update_running(&mut self, moments: &BatchMoments) {
        let c = self.channels();
        let m = self.momentum;
        let running = self
            .running
            .get_or_insert_with(|| ChannelStats::standard(c));
        let unbias = if moments.count > 1 {
            moments.count as f64 / (moments.count - 1) as f64
        } else {
            1.0
        };
        for i in 0..c {
            running.mean[i] = T::of((1.0 - m) * running.mean[i].as_f64() + m * moments.mean[i]);
            running.var[i] =
                T::of((1.0 - m) * running.var[i].as_f64() + m * moments.var[i] * unbias);
        }
    }

    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let xhat = cache
            .xhat
            .as_ref()
            .ok_or_else(|| Error::invalid("batch norm backward without a cache"))?;
        if xhat.shape() != grad_out.shape() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm_backward",
                left: grad_out.dims(),
                right: xhat.dims(),
            });
        }
        let s = grad_out.shape();
        let plane = s.plane();
        let count = (s.n * plane) as f64;
        let mut dx = Tensor4::zeros(s);
        for c in 0..s.c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for n in 0..s.n {
                let off = grad_out.index(n, c, 0, 0);
                for i in off..off + plane {
                    let dy = grad_out.data()[i].as_f64();
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat.data()[i].as_f64();
                }
            }
            self.gamma.grad[c] = self.gamma.grad[c] + T::of(sum_dy_xhat);
            self.beta.grad[c] = self.beta.grad[c] + T::of(sum_dy);
            let g = self.gamma.value[c].as_f64();
            let is = cache.inv_std[c].as_f64();
            for n in 0..s.n {
                let off = grad_out.index(n, c, 0, 0);
                for i in off..off + plane {
                    let dy = grad_out.data()[i].as_f64();
                    let v = if cache.batch_stats {
                        let xh = xhat.data()[i].as_f64();
                        g * is * (dy - sum_dy / count - xh * sum_dy_xhat / count)
                    } else {
                        g * is * dy
                    };
                    dx.data_mut()[i] = T::of(v);
                }
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn train_mode_normalises() {
        let mut rng = Rng::new(1);
        let x = Tensor4::from_vec(
            [4, 3, 5, 5],
            (0..300)
                .map(|i| (rng.normal() * 3.0 + (i % 3) as f64) as f32)
                .collect(),
        )
        .unwrap();
        let bn = BatchNorm::<f32>::new(3, 0.1, 1e-5).unwrap();
        let (y, _, m) = bn.forward(&x, StatsChoice::Batch, false).unwrap();
        assert!(m.is_some());
        let mo = BatchNorm::moments(&y);
        for c in 0..3 {
            assert!(mo.mean[c].abs() < 1e-5, "mean {}", mo.mean[c]);
            assert!((mo.var[c] - 1.0).abs() < 1e-4, "var {}", mo.var[c]);
        }
    }

    #[test]
    fn fixed_standard_stats() {
        let bn = BatchNorm::<f64>::new(2, 0.1, 1e-5).unwrap();
        let x = Tensor4::from_vec([1, 2, 1, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let st = ChannelStats::standard(2);
        let (y, _, m) = bn.forward(&x, StatsChoice::Fixed(&st), false).unwrap();
        assert!(m.is_none());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut bn = BatchNorm::<f64>::new(1, 0.1, 1e-5).unwrap();
        assert!(bn.running.is_none());
        bn.update_running(&BatchMoments {
            mean: vec![2.0],
            var: vec![3.0],
            count: 4,
        });
        let r = bn.running.as_ref().unwrap();
        assert!((r.mean[0] - 0.2).abs() < 1e-12);
        assert!((r.var[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_stats() {
        assert!(ChannelStats::<f32>::new(vec![0.0], vec![-1.0]).is_err());
        assert!(BatchNorm::<f32>::new(2, 0.1, 0.0).is_err());
        let bn = BatchNorm::<f32>::new(2, 0.1, 1e-5).unwrap();
        let st = ChannelStats::standard(3);
        let x = Tensor4::full([1, 2, 2, 2], 1.0).unwrap();
        assert!(bn.forward(&x, StatsChoice::Fixed(&st), false).is_err());
    }
}

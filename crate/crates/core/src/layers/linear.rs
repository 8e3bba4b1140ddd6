use crate::error::{Error, Result};
use crate::layers::Param;
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape4, Tensor4};

/// Fully connected layer over flattened `(c, h, w)` features.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    /// Row-major `(out, in)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Clone, Debug)]
pub struct LinearCache<T> {
    input: Option<Tensor4<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize) -> Result<Self> {
        if in_features == 0 || out_features == 0 {
            return Err(Error::invalid("linear layer dimensions must be positive"));
        }
        Ok(Linear {
            weight: Param::zeros(in_features * out_features),
            bias: Param::zeros(out_features),
            in_features,
            out_features,
        })
    }

    /// Uniform in `±1/sqrt(in)` for weights and bias.
    pub fn init_uniform(&mut self, rng: &mut Rng) {
        let bound = 1.0 / (self.in_features as f64).sqrt();
        for w in self
            .weight
            .value
            .iter_mut()
            .chain(self.bias.value.iter_mut())
        {
            *w = T::of((rng.unit() * 2.0 - 1.0) * bound);
        }
    }

    pub fn forward(&self, x: &Tensor4<T>, keep: bool) -> Result<(Tensor4<T>, LinearCache<T>)> {
        let s = x.shape();
        if s.sample_len() != self.in_features {
            return Err(Error::Shape(format!(
                "linear layer expects {} features, got {}",
                self.in_features,
                s.sample_len()
            )));
        }
        let out_shape = Shape4 {
            n: s.n,
            c: self.out_features,
            h: 1,
            w: 1,
        };
        let mut out = Vec::with_capacity(out_shape.len());
        for _ in 0..s.n {
            out.extend_from_slice(&self.bias.value);
        }
        // y = x · Wᵀ + b
        T::gemm(
            s.n,
            self.in_features,
            self.out_features,
            x.data(),
            (self.in_features as isize, 1),
            &self.weight.value,
            (1, self.in_features as isize),
            T::one(),
            &mut out,
            (self.out_features as isize, 1),
        );
        Ok((
            Tensor4::from_parts(out_shape, out),
            LinearCache {
                input: keep.then(|| x.clone()),
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &LinearCache<T>,
        grad_out: &Tensor4<T>,
    ) -> Result<Tensor4<T>> {
        let x = cache
            .input
            .as_ref()
            .ok_or_else(|| Error::invalid("linear backward without a cached input"))?;
        let n = x.shape().n;
        if grad_out.dims() != [n, self.out_features, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "linear_backward",
                left: grad_out.dims(),
                right: [n, self.out_features, 1, 1],
            });
        }
        let (fin, fout) = (self.in_features, self.out_features);
        // dW += Gᵀ · X
        T::gemm(
            fout,
            n,
            fin,
            grad_out.data(),
            (1, fout as isize),
            x.data(),
            (fin as isize, 1),
            T::one(),
            &mut self.weight.grad,
            (fin as isize, 1),
        );
        for row in grad_out.data().chunks_exact(fout) {
            for (b, &g) in self.bias.grad.iter_mut().zip(row) {
                *b = *b + g;
            }
        }
        let mut dx = Tensor4::zeros(x.shape());
        // dX = G · W
        T::gemm(
            n,
            fout,
            fin,
            grad_out.data(),
            (fout as isize, 1),
            &self.weight.value,
            (fin as isize, 1),
            T::zero(),
            dx.data_mut(),
            (fin as isize, 1),
        );
        Ok(dx)
    }
}

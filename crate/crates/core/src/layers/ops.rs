use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given the layer's output.
pub fn relu_backward<T: Scalar>(output: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
    if output.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op: "relu_backward",
            left: grad_out.dims(),
            right: output.dims(),
        });
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor4::from_parts(output.shape(), data))
}

/// Any `(h, w)` to `1×1`.
pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.reduce_spatial_mean()
}

pub fn global_avg_pool_backward<T: Scalar>(
    in_shape: Shape4,
    grad_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    if grad_out.dims() != [in_shape.n, in_shape.c, 1, 1] {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool_backward",
            left: grad_out.dims(),
            right: [in_shape.n, in_shape.c, 1, 1],
        });
    }
    let plane = in_shape.plane();
    let scale = T::of(1.0 / plane as f64);
    let mut dx = Vec::with_capacity(in_shape.len());
    for &g in grad_out.data() {
        dx.extend(std::iter::repeat_n(g * scale, plane));
    }
    Ok(Tensor4::from_parts(in_shape, dx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let x = Tensor4::from_vec([1, 1, 1, 2], vec![-1.0f32, 2.0]).unwrap();
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 2.0]);
        let g = relu_backward(&y, &Tensor4::full([1, 1, 1, 2], 5.0).unwrap()).unwrap();
        assert_eq!(g.data(), &[0.0, 5.0]);
    }

    #[test]
    fn global_pool_constant_and_spread() {
        let v = 0.75f32;
        let x = Tensor4::full([2, 3, 6, 6], v).unwrap();
        let y = global_avg_pool_forward(&x);
        assert_eq!(y.dims(), [2, 3, 1, 1]);
        assert!(y.data().iter().all(|&m| m == v));
        let g = Tensor4::full([2, 3, 1, 1], 1.0f32).unwrap();
        let dx = global_avg_pool_backward(x.shape(), &g).unwrap();
        assert!(dx.data().iter().all(|&d| (d - 1.0 / 36.0).abs() < 1e-9));
    }
}

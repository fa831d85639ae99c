//! Reductions to a scalar.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::{lit, Scalar, Tensor};

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let total = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
    let nx = x.requires_grad();
    let len = x.len();
    Tensor::from_op("sum", vec![1], vec![total], vec![x.clone()], move |g| {
        vec![nx.then(|| vec![g[0]; len])]
    })
}

pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let len = x.len();
    let inv: T = if len == 0 { T::zero() } else { T::one() / lit(len as f64) };
    let total = x.data().iter().fold(T::zero(), |acc, &v| acc + v) * inv;
    let nx = x.requires_grad();
    Tensor::from_op("mean", vec![1], vec![total], vec![x.clone()], move |g| {
        let v: Vec<T> = vec![g[0] * inv; len];
        vec![nx.then(|| v)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_and_mean_values_and_gradients() {
        let x = Tensor::parameter(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = sum_all(&x).unwrap();
        assert_eq!(s.item().unwrap(), 10.0);
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);

        x.clear_grad();
        let m = mean_all(&x).unwrap();
        assert_eq!(m.item().unwrap(), 2.5);
        m.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25; 4]);
    }
}

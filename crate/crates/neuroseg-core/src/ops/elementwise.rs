//! Elementwise arithmetic and activations.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{shape_string, Scalar, Tensor};

fn ensure_same_shape<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CoreError::shape(
            op,
            format!(
                "operands differ: {} vs {}",
                shape_string(a.shape()),
                shape_string(b.shape())
            ),
        ));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let (na, nb) = (a.requires_grad(), b.requires_grad());
    Tensor::from_op("add", a.shape().to_vec(), data, alloc::vec![a.clone(), b.clone()], move |g| {
        alloc::vec![
            na.then(|| g.to_vec()),
            nb.then(|| g.to_vec()),
        ]
    })
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    let (na, nb) = (a.requires_grad(), b.requires_grad());
    Tensor::from_op("sub", a.shape().to_vec(), data, alloc::vec![a.clone(), b.clone()], move |g| {
        alloc::vec![
            na.then(|| g.to_vec()),
            nb.then(|| g.iter().map(|&v| -v).collect()),
        ]
    })
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op("mul", a.shape().to_vec(), data, alloc::vec![a.clone(), b.clone()], move |g| {
        alloc::vec![
            ac.requires_grad()
                .then(|| g.iter().zip(bc.data()).map(|(&g, &y)| g * y).collect()),
            bc.requires_grad()
                .then(|| g.iter().zip(ac.data()).map(|(&g, &x)| g * x).collect()),
        ]
    })
}

/// Elementwise division. A zero divisor surfaces as a non-finite output
/// error rather than a silent inf.
pub fn div<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("div", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x / y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op("div", a.shape().to_vec(), data, alloc::vec![a.clone(), b.clone()], move |g| {
        alloc::vec![
            ac.requires_grad()
                .then(|| g.iter().zip(bc.data()).map(|(&g, &y)| g / y).collect()),
            bc.requires_grad().then(|| {
                g.iter()
                    .zip(ac.data().iter().zip(bc.data()))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect()
            }),
        ]
    })
}

pub fn scale<T: Scalar>(x: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
    let c: T = crate::tensor::lit(factor);
    let data = x.data().iter().map(|&v| v * c).collect();
    let nx = x.requires_grad();
    Tensor::from_op("scale", x.shape().to_vec(), data, alloc::vec![x.clone()], move |g| {
        alloc::vec![nx.then(|| g.iter().map(|&v| v * c).collect())]
    })
}

pub fn add_scalar<T: Scalar>(x: &Tensor<T>, offset: f64) -> Result<Tensor<T>> {
    let c: T = crate::tensor::lit(offset);
    let data = x.data().iter().map(|&v| v + c).collect();
    let nx = x.requires_grad();
    Tensor::from_op("add_scalar", x.shape().to_vec(), data, alloc::vec![x.clone()], move |g| {
        alloc::vec![nx.then(|| g.to_vec())]
    })
}

/// max(x, 0). The subgradient at 0 is taken as 0.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let zero = T::zero();
    let data = x.data().iter().map(|&v| if v > zero { v } else { zero }).collect();
    let xc = x.clone();
    Tensor::from_op("relu", x.shape().to_vec(), data, alloc::vec![x.clone()], move |g| {
        alloc::vec![xc.requires_grad().then(|| {
            g.iter()
                .zip(xc.data())
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect()
        })]
    })
}

fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split by sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Logistic function, overflow-safe on both tails.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let data: Vec<T> = x.data().iter().map(|&v| sigmoid_scalar(v)).collect();
    let out = data.clone();
    let nx = x.requires_grad();
    Tensor::from_op("sigmoid", x.shape().to_vec(), data, alloc::vec![x.clone()], move |g| {
        alloc::vec![nx.then(|| {
            g.iter()
                .zip(&out)
                .map(|(&g, &s)| g * s * (T::one() - s))
                .collect()
        })]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_sub_match_scalar_math() {
        let a = t(&[1.0, -2.0, 3.5]);
        let b = t(&[0.5, 4.0, -1.5]);
        assert_eq!(add(&a, &b).unwrap().to_vec(), vec![1.5, 2.0, 2.0]);
        assert_eq!(sub(&a, &b).unwrap().to_vec(), vec![0.5, -6.0, 5.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = t(&[1.0, 2.0]);
        let b = t(&[1.0, 2.0, 3.0]);
        assert!(matches!(add(&a, &b), Err(CoreError::Shape { op: "add", .. })));
    }

    #[test]
    fn relu_zeroes_negatives_and_their_gradients() {
        let x = Tensor::parameter(&[4], alloc::vec![-1.0, 0.0, 2.0, -0.5]).unwrap();
        let y = relu(&x).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 2.0, 0.0]);
        crate::ops::sum_all(&y).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn sigmoid_known_values() {
        let x = t(&[0.0, 2.0]);
        let y = sigmoid(&x).unwrap();
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 0.8807970779778823).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_is_stable_on_extreme_logits() {
        let x = t(&[-1000.0, 1000.0]);
        let y = sigmoid(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 1.0);
    }

    #[test]
    fn mul_gradients_exchange_operands() {
        let a = Tensor::parameter(&[2], alloc::vec![2.0, 3.0]).unwrap();
        let b = Tensor::parameter(&[2], alloc::vec![5.0, 7.0]).unwrap();
        let y = crate::ops::sum_all(&mul(&a, &b).unwrap()).unwrap();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 7.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0]);
    }
}

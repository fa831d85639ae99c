//! Shape-changing operators: all produce copies, gradients route back by
//! the inverse index mapping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{shape_string, Scalar, Tensor};

pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let new_len: usize = shape.iter().product();
    if new_len != x.len() {
        return Err(CoreError::shape(
            "reshape",
            format!(
                "cannot view {} ({} elements) as {}",
                shape_string(x.shape()),
                x.len(),
                shape_string(shape)
            ),
        ));
    }
    let nx = x.requires_grad();
    Tensor::from_op("reshape", shape.to_vec(), x.to_vec(), vec![x.clone()], move |g| {
        vec![nx.then(|| g.to_vec())]
    })
}

/// Transpose of a rank-2 tensor.
pub fn transpose2d<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(CoreError::shape(
            "transpose2d",
            format!("expected rank 2, got {}", shape_string(x.shape())),
        ));
    }
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let xd = x.data();
    let mut data = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = xd[i * c + j];
        }
    }
    let nx = x.requires_grad();
    Tensor::from_op("transpose2d", vec![c, r], data, vec![x.clone()], move |g| {
        vec![nx.then(|| {
            let mut dx = vec![T::zero(); r * c];
            for j in 0..c {
                for i in 0..r {
                    dx[i * c + j] = g[j * r + i];
                }
            }
            dx
        })]
    })
}

/// Concatenation along `axis`. All inputs must share rank and every other
/// axis extent.
pub fn concat<T: Scalar>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let Some(first) = inputs.first() else {
        return Err(CoreError::shape("concat", "needs at least one input"));
    };
    let rank = first.shape().len();
    if axis >= rank {
        return Err(CoreError::shape(
            "concat",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    let mut axis_total = 0;
    for t in inputs {
        if t.shape().len() != rank {
            return Err(CoreError::shape(
                "concat",
                format!(
                    "rank mismatch: {} vs {}",
                    shape_string(first.shape()),
                    shape_string(t.shape())
                ),
            ));
        }
        for (d, (&a, &b)) in first.shape().iter().zip(t.shape()).enumerate() {
            if d != axis && a != b {
                return Err(CoreError::shape(
                    "concat",
                    format!(
                        "axis {d} differs: {} vs {}",
                        shape_string(first.shape()),
                        shape_string(t.shape())
                    ),
                ));
            }
        }
        axis_total += t.shape()[axis];
    }

    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();

    // Per input, the contiguous run contributed to each outer slice.
    let chunks: Vec<usize> = inputs.iter().map(|t| t.shape()[axis] * inner).collect();
    let out_row = axis_total * inner;

    let mut data = vec![T::zero(); outer * out_row];
    for o in 0..outer {
        let mut offset = o * out_row;
        for (t, &chunk) in inputs.iter().zip(&chunks) {
            let src = &t.data()[o * chunk..(o + 1) * chunk];
            data[offset..offset + chunk].copy_from_slice(src);
            offset += chunk;
        }
    }

    let owned: Vec<Tensor<T>> = inputs.iter().map(|t| (*t).clone()).collect();
    let needs: Vec<bool> = owned.iter().map(|t| t.requires_grad()).collect();
    Tensor::from_op("concat", out_shape, data, owned, move |g| {
        let mut grads: Vec<Option<Vec<T>>> = needs
            .iter()
            .zip(&chunks)
            .map(|(&n, &chunk)| n.then(|| vec![T::zero(); outer * chunk]))
            .collect();
        for o in 0..outer {
            let mut offset = o * out_row;
            for (slot, &chunk) in grads.iter_mut().zip(&chunks) {
                if let Some(dst) = slot.as_mut() {
                    dst[o * chunk..(o + 1) * chunk]
                        .copy_from_slice(&g[offset..offset + chunk]);
                }
                offset += chunk;
            }
        }
        grads
    })
}

/// Selects one index along axis 0, keeping that axis with extent 1.
pub fn select_batch<T: Scalar>(x: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
    if x.shape().is_empty() {
        return Err(CoreError::shape("select_batch", "input must have rank >= 1"));
    }
    let batch = x.shape()[0];
    if index >= batch {
        return Err(CoreError::shape(
            "select_batch",
            format!("index {index} out of range for batch {batch}"),
        ));
    }
    let stride: usize = x.shape()[1..].iter().product();
    let mut shape = x.shape().to_vec();
    shape[0] = 1;
    let data = x.data()[index * stride..(index + 1) * stride].to_vec();
    let nx = x.requires_grad();
    let total = x.len();
    Tensor::from_op("select_batch", shape, data, vec![x.clone()], move |g| {
        vec![nx.then(|| {
            let mut dx = vec![T::zero(); total];
            dx[index * stride..(index + 1) * stride].copy_from_slice(g);
            dx
        })]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn transpose_round_trips() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = transpose2d(&x).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.to_vec(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let back = transpose2d(&t).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn concat_axis1_interleaves_rows() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![9.0, 8.0]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn concat_gradient_splits_back() {
        let a = Tensor::parameter(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::parameter(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 10.0, 100.0, 2.0, 20.0, 200.0]).unwrap();
        ops::sum_all(&ops::mul(&c, &w).unwrap()).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![10.0, 100.0, 20.0, 200.0]);
    }

    #[test]
    fn select_batch_extracts_one_item() {
        let x = Tensor::parameter(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = select_batch(&x, 1).unwrap();
        assert_eq!(s.shape(), &[1, 3]);
        assert_eq!(s.to_vec(), vec![4.0, 5.0, 6.0]);
        ops::sum_all(&s).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn reshape_rejects_element_count_change() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        assert!(reshape(&x, &[7]).is_err());
    }
}

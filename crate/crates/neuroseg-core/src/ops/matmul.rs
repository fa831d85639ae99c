//! Dense matrix product.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{shape_string, Scalar, Tensor};

/// Row-major product of `[m, k] x [k, n] -> [m, n]`.
///
/// The inner loop runs along contiguous rows of the right operand so the
/// compiler can vectorize it.
fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(CoreError::shape(
            "matmul",
            format!(
                "expected two rank-2 tensors, got {} and {}",
                shape_string(a.shape()),
                shape_string(b.shape())
            ),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(CoreError::shape(
            "matmul",
            format!("inner axes differ: {k} vs {k2}"),
        ));
    }

    let data = matmul_raw(a.data(), b.data(), m, k, n);
    let (ac, bc) = (a.clone(), b.clone());
    Tensor::from_op("matmul", vec![m, n], data, vec![a.clone(), b.clone()], move |g| {
        // dA = g . B^T, dB = A^T . g; both written as direct loops to avoid
        // materializing the transposes.
        let da = ac.requires_grad().then(|| {
            let bd = bc.data();
            let mut da = vec![T::zero(); m * k];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                let darow = &mut da[i * k..(i + 1) * k];
                for p in 0..k {
                    let brow = &bd[p * n..(p + 1) * n];
                    let mut acc = T::zero();
                    for (&gv, &bv) in grow.iter().zip(brow) {
                        acc += gv * bv;
                    }
                    darow[p] = acc;
                }
            }
            da
        });
        let db = bc.requires_grad().then(|| {
            let ad = ac.data();
            let mut db = vec![T::zero(); k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == T::zero() {
                        continue;
                    }
                    let dbrow = &mut db[p * n..(p + 1) * n];
                    for (d, &gv) in dbrow.iter_mut().zip(grow) {
                        *d += av * gv;
                    }
                }
            }
            db
        });
        vec![da, db]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;

    #[test]
    fn known_product() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn identity_is_neutral() {
        let a = Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 2.0, 5.0]).unwrap();
        let id = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &id).unwrap().to_vec(), a.to_vec());
        assert_eq!(matmul(&id, &a).unwrap().to_vec(), a.to_vec());
    }

    /// (A B)^T == B^T A^T for random matrices.
    #[test]
    fn transpose_identity_holds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (m, k, n) = (
                rng.gen_range(1..5usize),
                rng.gen_range(1..5usize),
                rng.gen_range(1..5usize),
            );
            let a = Tensor::from_vec(
                &[m, k],
                (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let b = Tensor::from_vec(
                &[k, n],
                (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let lhs = ops::transpose2d(&matmul(&a, &b).unwrap()).unwrap();
            let rhs = matmul(
                &ops::transpose2d(&b).unwrap(),
                &ops::transpose2d(&a).unwrap(),
            )
            .unwrap();
            assert_eq!(lhs.to_vec(), rhs.to_vec());
        }
    }

    #[test]
    fn gradients_match_manual_formula() {
        let a = Tensor::parameter(&[1, 2], vec![2.0, 3.0]).unwrap();
        let b = Tensor::parameter(&[2, 1], vec![5.0, 7.0]).unwrap();
        matmul(&a, &b).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![5.0, 7.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn inner_axis_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
    }
}

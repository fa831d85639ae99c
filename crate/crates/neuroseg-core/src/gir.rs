//! Global-reasoning block: projects the voxel grid onto a small set of
//! learned region nodes, mixes information between the nodes through a
//! learned adjacency, and projects the result back onto the grid as a
//! residual correction.
//!
//! The round trip through node space gives every voxel a view of the
//! whole volume at the cost of two dense projections, so the block adds
//! only a few percent of parameters when attached to a wide layer.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::ops::{self, Phase, RunningStats};
use crate::state::{take_entry, StateEntry, StateMap};
use crate::tensor::{lit, shape_string, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GirConfig {
    /// Channels of the feature map the block attaches to.
    pub c_in: usize,
    /// Number of region nodes the grid is pooled into.
    pub n_nodes: usize,
    /// Node feature width inside the graph step.
    pub c_gcn: usize,
    /// Node feature width after the graph step.
    pub c_gcn_out: usize,
}

impl GirConfig {
    /// Standard sizing: nodes = C/4, node channels = C/2 on both sides
    /// of the graph step.
    pub fn from_channels(c_in: usize) -> Result<Self> {
        if c_in < 4 || c_in % 4 != 0 {
            return Err(CoreError::config(format!(
                "channel count must be a positive multiple of 4, got {c_in}"
            )));
        }
        Ok(GirConfig { c_in, n_nodes: c_in / 4, c_gcn: c_in / 2, c_gcn_out: c_in / 2 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.n_nodes == 0 || self.c_gcn == 0 || self.c_gcn_out == 0 {
            return Err(CoreError::config("all block dimensions must be positive"));
        }
        Ok(())
    }

    /// Trainable parameters plus the two normalization buffers.
    pub fn param_count(&self) -> usize {
        let (c, n, cg, co) = (self.c_in, self.n_nodes, self.c_gcn, self.c_gcn_out);
        (n * c + n) + (cg * c + cg) + n * n + cg * co + (c * co + c) + 2 * c
    }
}

pub struct GirBlock<T: Scalar> {
    cfg: GirConfig,
    attention_w: Tensor<T>,
    attention_b: Tensor<T>,
    reduce_w: Tensor<T>,
    reduce_b: Tensor<T>,
    adjacency: Tensor<T>,
    node_transform: Tensor<T>,
    expand_w: Tensor<T>,
    expand_b: Tensor<T>,
    norm_gamma: Tensor<T>,
    norm_beta: Tensor<T>,
    running: RunningStats<T>,
    bn_eps: f64,
    bn_momentum: f64,
}

fn uniform<T: Scalar, R: rand::Rng + ?Sized>(rng: &mut R, len: usize, bound: f64) -> Vec<T> {
    (0..len).map(|_| lit::<T>((rng.gen::<f64>() * 2.0 - 1.0) * bound)).collect()
}

/// relu(F + A^T F): every node keeps its features and adds those of its
/// in-neighbours, weighted by the adjacency column that points at it.
pub fn aggregate_nodes<T: Scalar>(f: &Tensor<T>, adjacency: &Tensor<T>) -> Result<Tensor<T>> {
    let routed = ops::matmul(&ops::transpose2d(adjacency)?, f)?;
    ops::relu(&ops::add(f, &routed)?)
}

impl<T: Scalar> GirBlock<T> {
    pub fn new<R: rand::Rng + ?Sized>(cfg: GirConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, n, cg, co) = (cfg.c_in, cfg.n_nodes, cfg.c_gcn, cfg.c_gcn_out);
        let from = |shape: &[usize], data: Vec<T>| Tensor::parameter(shape, data);
        let b_c = 1.0 / (c as f64).sqrt();
        let b_cg = 1.0 / (cg as f64).sqrt();
        let b_n = 1.0 / (n as f64).sqrt();
        Ok(GirBlock {
            cfg,
            attention_w: from(&[n, c], uniform(rng, n * c, b_c))?,
            attention_b: from(&[n], vec![T::zero(); n])?,
            reduce_w: from(&[cg, c], uniform(rng, cg * c, b_c))?,
            reduce_b: from(&[cg], vec![T::zero(); cg])?,
            adjacency: from(&[n, n], uniform(rng, n * n, b_n))?,
            node_transform: from(&[cg, co], uniform(rng, cg * co, b_cg))?,
            expand_w: from(&[c, co], uniform(rng, c * co, 1.0 / (co as f64).sqrt()))?,
            expand_b: from(&[c], vec![T::zero(); c])?,
            norm_gamma: from(&[c], vec![T::one(); c])?,
            norm_beta: from(&[c], vec![T::zero(); c])?,
            running: RunningStats::new(c),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        })
    }

    /// All parameters zero. The residual path then contributes exactly
    /// nothing, making the block an identity in both phases.
    pub fn zeroed(cfg: GirConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, n, cg, co) = (cfg.c_in, cfg.n_nodes, cfg.c_gcn, cfg.c_gcn_out);
        let zeros = |shape: &[usize]| {
            let len = shape.iter().product();
            Tensor::parameter(shape, vec![T::zero(); len])
        };
        Ok(GirBlock {
            cfg,
            attention_w: zeros(&[n, c])?,
            attention_b: zeros(&[n])?,
            reduce_w: zeros(&[cg, c])?,
            reduce_b: zeros(&[cg])?,
            adjacency: zeros(&[n, n])?,
            node_transform: zeros(&[cg, co])?,
            expand_w: zeros(&[c, co])?,
            expand_b: zeros(&[c])?,
            norm_gamma: zeros(&[c])?,
            norm_beta: zeros(&[c])?,
            running: RunningStats::new(c),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        })
    }

    /// Builds the block around caller-owned tensors (canonical order:
    /// attention w/b, reduce w/b, adjacency, node transform, expand w/b,
    /// norm gamma/beta). The tensors are shared, not copied, so gradients
    /// land on the caller's handles.
    pub fn from_parts(cfg: GirConfig, parts: [Tensor<T>; 10]) -> Result<Self> {
        cfg.validate()?;
        let (c, n, cg, co) = (cfg.c_in, cfg.n_nodes, cfg.c_gcn, cfg.c_gcn_out);
        let expect: [(&str, &[usize]); 10] = [
            ("attention weight", &[n, c]),
            ("attention bias", &[n]),
            ("reduce weight", &[cg, c]),
            ("reduce bias", &[cg]),
            ("adjacency", &[n, n]),
            ("node transform", &[cg, co]),
            ("expand weight", &[c, co]),
            ("expand bias", &[c]),
            ("norm gamma", &[c]),
            ("norm beta", &[c]),
        ];
        for (part, (what, shape)) in parts.iter().zip(&expect) {
            if part.shape() != *shape {
                return Err(CoreError::shape(
                    "gir_from_parts",
                    format!(
                        "{what} must be {}, got {}",
                        shape_string(shape),
                        shape_string(part.shape())
                    ),
                ));
            }
        }
        let [attention_w, attention_b, reduce_w, reduce_b, adjacency, node_transform, expand_w, expand_b, norm_gamma, norm_beta] =
            parts;
        Ok(GirBlock {
            cfg,
            attention_w,
            attention_b,
            reduce_w,
            reduce_b,
            adjacency,
            node_transform,
            expand_w,
            expand_b,
            norm_gamma,
            norm_beta,
            running: RunningStats::new(c),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        })
    }

    pub fn config(&self) -> &GirConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.cfg.param_count()
    }

    /// x: [B, C, D, H, W] with C matching the configured width.
    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != self.cfg.c_in {
            return Err(CoreError::shape(
                "gir_forward",
                format!(
                    "expected [B, {}, D, H, W], got {}",
                    self.cfg.c_in,
                    shape_string(shape)
                ),
            ));
        }
        let (b, c) = (shape[0], shape[1]);
        let (d, h, w) = (shape[2], shape[3], shape[4]);
        let s = d * h * w;
        if b == 0 || s == 0 {
            return Err(CoreError::shape("gir_forward", "empty batch or volume"));
        }

        let mut corrections = Vec::with_capacity(b);
        for i in 0..b {
            let item = ops::select_batch(x, i)?;
            let points = ops::transpose2d(&ops::reshape(&item, &[c, s])?)?;

            // Voxel-to-node assignment scores, reused as the transpose of
            // the node-to-voxel projection on the way back.
            let scores = ops::unit_conv(&points, &self.attention_w, &self.attention_b)?;
            let maps = ops::transpose2d(&scores)?;

            let values = ops::unit_conv(&points, &self.reduce_w, &self.reduce_b)?;
            let nodes = ops::matmul(&maps, &values)?;
            let mixed = aggregate_nodes(&nodes, &self.adjacency)?;
            let transformed = ops::matmul(&mixed, &self.node_transform)?;

            let back = ops::matmul(&scores, &transformed)?;
            let expanded = ops::unit_conv(&back, &self.expand_w, &self.expand_b)?;
            corrections.push(ops::reshape(&ops::transpose2d(&expanded)?, &[1, c, d, h, w])?);
        }
        let refs: Vec<&Tensor<T>> = corrections.iter().collect();
        let stacked = ops::concat(&refs, 0)?;
        let normed = ops::batchnorm3d(
            &stacked,
            &self.norm_gamma,
            &self.norm_beta,
            self.bn_eps,
            self.bn_momentum,
            phase,
            &self.running,
        )?;
        ops::add(x, &normed)
    }

    /// Trainable tensors in canonical order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&Tensor<T>)) {
        f(&self.attention_w);
        f(&self.attention_b);
        f(&self.reduce_w);
        f(&self.reduce_b);
        f(&self.adjacency);
        f(&self.node_transform);
        f(&self.expand_w);
        f(&self.expand_b);
        f(&self.norm_gamma);
        f(&self.norm_beta);
    }

    /// Same order as `for_each_param`, mutably, for the optimizer.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        f(&mut self.attention_w);
        f(&mut self.attention_b);
        f(&mut self.reduce_w);
        f(&mut self.reduce_b);
        f(&mut self.adjacency);
        f(&mut self.node_transform);
        f(&mut self.expand_w);
        f(&mut self.expand_b);
        f(&mut self.norm_gamma);
        f(&mut self.norm_beta);
    }

    /// Trainables plus normalization buffers, in serialization order.
    pub fn state_entries(&self) -> Vec<StateEntry<T>> {
        let t = |name: &str, t: &Tensor<T>| (name.to_string(), t.shape().to_vec(), t.to_vec());
        vec![
            t("attention.weight", &self.attention_w),
            t("attention.bias", &self.attention_b),
            t("reduce.weight", &self.reduce_w),
            t("reduce.bias", &self.reduce_b),
            t("adjacency", &self.adjacency),
            t("node_transform", &self.node_transform),
            t("expand.weight", &self.expand_w),
            t("expand.bias", &self.expand_b),
            t("norm.gamma", &self.norm_gamma),
            t("norm.beta", &self.norm_beta),
            ("norm.running_mean".to_string(), vec![self.cfg.c_in], self.running.mean()),
            ("norm.running_var".to_string(), vec![self.cfg.c_in], self.running.var()),
        ]
    }

    /// Replaces every tensor from `map`, consuming the matching entries.
    pub fn load_state(&mut self, map: &mut StateMap<T>) -> Result<()> {
        let (c, n, cg, co) = (self.cfg.c_in, self.cfg.n_nodes, self.cfg.c_gcn, self.cfg.c_gcn_out);
        let mut set = |slot: &mut Tensor<T>, name: &str, shape: &[usize]| -> Result<()> {
            *slot = Tensor::parameter(shape, take_entry(map, name, shape)?)?;
            Ok(())
        };
        set(&mut self.attention_w, "attention.weight", &[n, c])?;
        set(&mut self.attention_b, "attention.bias", &[n])?;
        set(&mut self.reduce_w, "reduce.weight", &[cg, c])?;
        set(&mut self.reduce_b, "reduce.bias", &[cg])?;
        set(&mut self.adjacency, "adjacency", &[n, n])?;
        set(&mut self.node_transform, "node_transform", &[cg, co])?;
        set(&mut self.expand_w, "expand.weight", &[c, co])?;
        set(&mut self.expand_b, "expand.bias", &[c])?;
        set(&mut self.norm_gamma, "norm.gamma", &[c])?;
        set(&mut self.norm_beta, "norm.beta", &[c])?;
        let mean = take_entry(map, "norm.running_mean", &[c])?;
        let var = take_entry(map, "norm.running_var", &[c])?;
        self.running.set(&mean, &var)
    }
}

//! 3D residual U-Net for dense binary segmentation.
//!
//! Encoder levels are residual double-conv blocks separated by stride-2
//! max pooling; the decoder mirrors them with learned upsampling and
//! skip concatenation. An optional global-reasoning block sits on the
//! bottleneck output. The head is a 1x1x1 convolution producing one
//! logit per voxel.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::gir::{GirBlock, GirConfig};
use crate::ops::{self, Phase, PoolMode, RunningStats};
use crate::state::{take_entry, StateEntry, StateMap};
use crate::tensor::{lit, shape_string, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    /// Learned stride-2 transposed convolution.
    Transposed,
    /// Nearest-neighbour doubling followed by a 1x1x1 channel map.
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder widths, shallow to deep. Also the decoder widths in
    /// reverse.
    pub level_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    /// Attach the global-reasoning block to the bottleneck output.
    pub gir_enabled: bool,
    pub upsample: UpsampleMode,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            out_channels: 1,
            level_channels: vec![16, 32, 64],
            bottleneck_channels: 128,
            gir_enabled: false,
            upsample: UpsampleMode::Transposed,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(CoreError::config("channel counts must be positive"));
        }
        if self.level_channels.is_empty() {
            return Err(CoreError::config("at least one encoder level is required"));
        }
        if self.level_channels.iter().any(|&c| c == 0) || self.bottleneck_channels == 0 {
            return Err(CoreError::config("level widths must be positive"));
        }
        if self.gir_enabled {
            GirConfig::from_channels(self.bottleneck_channels)?;
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(CoreError::config("bad normalization constants"));
        }
        Ok(())
    }

    /// Input extents must be divisible by this so every level pools
    /// evenly.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.level_channels.len()
    }
}

struct ConvUnit<T: Scalar> {
    weight: Tensor<T>,
    bias: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    running: RunningStats<T>,
    kernel: usize,
}

impl<T: Scalar> ConvUnit<T> {
    fn new<R: Rng + ?Sized>(ci: usize, co: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let fan_in = ci * kernel * kernel * kernel;
        let wb = (6.0 / fan_in as f64).sqrt();
        let bb = 1.0 / (fan_in as f64).sqrt();
        Ok(ConvUnit {
            weight: Tensor::parameter(
                &[co, ci, kernel, kernel, kernel],
                sample(rng, co * fan_in, wb),
            )?,
            bias: Tensor::parameter(&[co], sample(rng, co, bb))?,
            gamma: Tensor::parameter(&[co], vec![T::one(); co])?,
            beta: Tensor::parameter(&[co], vec![T::zero(); co])?,
            running: RunningStats::new(co),
            kernel,
        })
    }

    #[cfg(test)]
    fn zeroed(ci: usize, co: usize, kernel: usize) -> Result<Self> {
        Ok(ConvUnit {
            weight: Tensor::parameter(
                &[co, ci, kernel, kernel, kernel],
                vec![T::zero(); co * ci * kernel * kernel * kernel],
            )?,
            bias: Tensor::parameter(&[co], vec![T::zero(); co])?,
            gamma: Tensor::parameter(&[co], vec![T::one(); co])?,
            beta: Tensor::parameter(&[co], vec![T::zero(); co])?,
            running: RunningStats::new(co),
            kernel,
        })
    }

    fn forward(&self, x: &Tensor<T>, phase: Phase, cfg: &UNetConfig) -> Result<Tensor<T>> {
        let pad = self.kernel / 2;
        let y = ops::conv3d(x, &self.weight, &self.bias, [1, 1, 1], [pad, pad, pad])?;
        let y = ops::batchnorm3d(
            &y,
            &self.gamma,
            &self.beta,
            cfg.bn_eps,
            cfg.bn_momentum,
            phase,
            &self.running,
        )?;
        ops::relu(&y)
    }

    fn for_each_param(&self, f: &mut dyn FnMut(&Tensor<T>)) {
        f(&self.weight);
        f(&self.bias);
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn state_entries(&self, prefix: &str, out: &mut Vec<StateEntry<T>>) {
        let push = |out: &mut Vec<StateEntry<T>>, name: &str, t: &Tensor<T>| {
            out.push((format!("{prefix}.{name}"), t.shape().to_vec(), t.to_vec()));
        };
        push(out, "conv.weight", &self.weight);
        push(out, "conv.bias", &self.bias);
        push(out, "norm.gamma", &self.gamma);
        push(out, "norm.beta", &self.beta);
        let c = self.running.channels();
        out.push((format!("{prefix}.norm.running_mean"), vec![c], self.running.mean()));
        out.push((format!("{prefix}.norm.running_var"), vec![c], self.running.var()));
    }

    fn load_state(&mut self, prefix: &str, map: &mut StateMap<T>) -> Result<()> {
        let mut set = |slot: &mut Tensor<T>, name: &str| -> Result<()> {
            let full = format!("{prefix}.{name}");
            let shape = slot.shape().to_vec();
            *slot = Tensor::parameter(&shape, take_entry(map, &full, &shape)?)?;
            Ok(())
        };
        set(&mut self.weight, "conv.weight")?;
        set(&mut self.bias, "conv.bias")?;
        set(&mut self.gamma, "norm.gamma")?;
        set(&mut self.beta, "norm.beta")?;
        let c = self.running.channels();
        let mean = take_entry(map, &format!("{prefix}.norm.running_mean"), &[c])?;
        let var = take_entry(map, &format!("{prefix}.norm.running_var"), &[c])?;
        self.running.set(&mean, &var)
    }
}

struct ResidualBlock<T: Scalar> {
    unit1: ConvUnit<T>,
    unit2: ConvUnit<T>,
    /// 1x1x1 projection, present only when input and output widths
    /// differ.
    shortcut: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new<R: Rng + ?Sized>(ci: usize, co: usize, rng: &mut R) -> Result<Self> {
        let shortcut = if ci != co {
            let b = (6.0 / ci as f64).sqrt();
            Some((
                Tensor::parameter(&[co, ci, 1, 1, 1], sample(rng, co * ci, b))?,
                Tensor::parameter(&[co], vec![T::zero(); co])?,
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            unit1: ConvUnit::new(ci, co, 3, rng)?,
            unit2: ConvUnit::new(co, co, 3, rng)?,
            shortcut,
        })
    }

    #[cfg(test)]
    fn zeroed(ci: usize, co: usize) -> Result<Self> {
        let shortcut = if ci != co {
            Some((
                Tensor::parameter(&[co, ci, 1, 1, 1], vec![T::zero(); co * ci])?,
                Tensor::parameter(&[co], vec![T::zero(); co])?,
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            unit1: ConvUnit::zeroed(ci, co, 3)?,
            unit2: ConvUnit::zeroed(co, co, 3)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor<T>, phase: Phase, cfg: &UNetConfig) -> Result<Tensor<T>> {
        let skip = match &self.shortcut {
            Some((w, b)) => ops::conv3d(x, w, b, [1, 1, 1], [0, 0, 0])?,
            None => x.clone(),
        };
        let y = self.unit1.forward(x, phase, cfg)?;
        let y = self.unit2.forward(&y, phase, cfg)?;
        ops::relu(&ops::add(&skip, &y)?)
    }

    fn for_each_param(&self, f: &mut dyn FnMut(&Tensor<T>)) {
        self.unit1.for_each_param(f);
        self.unit2.for_each_param(f);
        if let Some((w, b)) = &self.shortcut {
            f(w);
            f(b);
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        self.unit1.visit_params(f);
        self.unit2.visit_params(f);
        if let Some((w, b)) = &mut self.shortcut {
            f(w);
            f(b);
        }
    }

    fn state_entries(&self, prefix: &str, out: &mut Vec<StateEntry<T>>) {
        self.unit1.state_entries(&format!("{prefix}.unit1"), out);
        self.unit2.state_entries(&format!("{prefix}.unit2"), out);
        if let Some((w, b)) = &self.shortcut {
            out.push((format!("{prefix}.shortcut.weight"), w.shape().to_vec(), w.to_vec()));
            out.push((format!("{prefix}.shortcut.bias"), b.shape().to_vec(), b.to_vec()));
        }
    }

    fn load_state(&mut self, prefix: &str, map: &mut StateMap<T>) -> Result<()> {
        self.unit1.load_state(&format!("{prefix}.unit1"), map)?;
        self.unit2.load_state(&format!("{prefix}.unit2"), map)?;
        if let Some((w, b)) = &mut self.shortcut {
            let ws = w.shape().to_vec();
            *w = Tensor::parameter(&ws, take_entry(map, &format!("{prefix}.shortcut.weight"), &ws)?)?;
            let bs = b.shape().to_vec();
            *b = Tensor::parameter(&bs, take_entry(map, &format!("{prefix}.shortcut.bias"), &bs)?)?;
        }
        Ok(())
    }
}

enum Upsampler<T: Scalar> {
    /// weight [Ci, Co, 2, 2, 2], doubles every spatial extent.
    Transposed { weight: Tensor<T>, bias: Tensor<T> },
    /// Nearest doubling, then weight [Co, Ci] as a per-voxel channel map.
    Nearest { weight: Tensor<T>, bias: Tensor<T> },
}

impl<T: Scalar> Upsampler<T> {
    fn new<R: Rng + ?Sized>(
        mode: UpsampleMode,
        ci: usize,
        co: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match mode {
            UpsampleMode::Transposed => {
                let b = (6.0 / (ci * 8) as f64).sqrt();
                Ok(Upsampler::Transposed {
                    weight: Tensor::parameter(&[ci, co, 2, 2, 2], sample(rng, ci * co * 8, b))?,
                    bias: Tensor::parameter(&[co], vec![T::zero(); co])?,
                })
            }
            UpsampleMode::Nearest => {
                let b = (6.0 / ci as f64).sqrt();
                Ok(Upsampler::Nearest {
                    weight: Tensor::parameter(&[co, ci], sample(rng, co * ci, b))?,
                    bias: Tensor::parameter(&[co], vec![T::zero(); co])?,
                })
            }
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Upsampler::Transposed { weight, bias } => {
                ops::conv_transpose3d(x, weight, bias, [2, 2, 2])
            }
            Upsampler::Nearest { weight, bias } => {
                let up = ops::upsample_nearest2x(x)?;
                let s = up.shape().to_vec();
                let (bsz, c) = (s[0], s[1]);
                let vol = s[2] * s[3] * s[4];
                let mut items = Vec::with_capacity(bsz);
                for i in 0..bsz {
                    let item = ops::select_batch(&up, i)?;
                    let points = ops::transpose2d(&ops::reshape(&item, &[c, vol])?)?;
                    let mapped = ops::unit_conv(&points, weight, bias)?;
                    let co = weight.shape()[0];
                    items.push(ops::reshape(
                        &ops::transpose2d(&mapped)?,
                        &[1, co, s[2], s[3], s[4]],
                    )?);
                }
                let refs: Vec<&Tensor<T>> = items.iter().collect();
                ops::concat(&refs, 0)
            }
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 2] {
        match self {
            Upsampler::Transposed { weight, bias } | Upsampler::Nearest { weight, bias } => {
                [weight, bias]
            }
        }
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        match self {
            Upsampler::Transposed { weight, bias } | Upsampler::Nearest { weight, bias } => {
                [weight, bias]
            }
        }
    }
}

struct DecoderLevel<T: Scalar> {
    up: Upsampler<T>,
    block: ResidualBlock<T>,
}

fn sample<T: Scalar, R: Rng + ?Sized>(rng: &mut R, len: usize, bound: f64) -> Vec<T> {
    (0..len).map(|_| lit::<T>((rng.gen::<f64>() * 2.0 - 1.0) * bound)).collect()
}

pub struct Model<T: Scalar> {
    cfg: UNetConfig,
    encoder: Vec<ResidualBlock<T>>,
    bottleneck: ResidualBlock<T>,
    gir: Option<GirBlock<T>>,
    /// Deepest level first, matching forward order.
    decoder: Vec<DecoderLevel<T>>,
    head_w: Tensor<T>,
    head_b: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(cfg: UNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut encoder = Vec::with_capacity(cfg.level_channels.len());
        let mut ci = cfg.in_channels;
        for &co in &cfg.level_channels {
            encoder.push(ResidualBlock::new(ci, co, rng)?);
            ci = co;
        }
        let bottleneck = ResidualBlock::new(ci, cfg.bottleneck_channels, rng)?;
        let gir = if cfg.gir_enabled {
            Some(GirBlock::new(GirConfig::from_channels(cfg.bottleneck_channels)?, rng)?)
        } else {
            None
        };

        let mut decoder = Vec::with_capacity(cfg.level_channels.len());
        let mut below = cfg.bottleneck_channels;
        for &skip in cfg.level_channels.iter().rev() {
            decoder.push(DecoderLevel {
                up: Upsampler::new(cfg.upsample, below, skip, rng)?,
                block: ResidualBlock::new(2 * skip, skip, rng)?,
            });
            below = skip;
        }

        let c0 = cfg.level_channels[0];
        let head_w = Tensor::parameter(
            &[cfg.out_channels, c0, 1, 1, 1],
            sample(rng, cfg.out_channels * c0, (6.0 / c0 as f64).sqrt()),
        )?;
        let head_b = Tensor::parameter(&[cfg.out_channels], vec![T::zero(); cfg.out_channels])?;
        Ok(Model { cfg, encoder, bottleneck, gir, decoder, head_w, head_b })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    /// Voxelwise logits with the input's spatial shape.
    pub fn forward(&self, x: &Tensor<T>, phase: Phase) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != self.cfg.in_channels {
            return Err(CoreError::shape(
                "model_forward",
                format!(
                    "expected [B, {}, D, H, W], got {}",
                    self.cfg.in_channels,
                    shape_string(shape)
                ),
            ));
        }
        let multiple = self.cfg.spatial_multiple();
        for &e in &shape[2..] {
            if e == 0 || e % multiple != 0 {
                return Err(CoreError::shape(
                    "model_forward",
                    format!("spatial extents must be positive multiples of {multiple}, got {}",
                        shape_string(shape)),
                ));
            }
        }

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut cur = x.clone();
        for level in &self.encoder {
            let features = level.forward(&cur, phase, &self.cfg)?;
            cur = ops::pool3d(&features, PoolMode::Max, 2, 2, 0)?;
            skips.push(features);
        }
        cur = self.bottleneck.forward(&cur, phase, &self.cfg)?;
        if let Some(gir) = &self.gir {
            cur = gir.forward(&cur, phase)?;
        }
        for (level, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = level.up.forward(&cur)?;
            let merged = ops::concat(&[&up, skip], 1)?;
            cur = level.block.forward(&merged, phase, &self.cfg)?;
        }
        ops::conv3d(&cur, &self.head_w, &self.head_b, [1, 1, 1], [0, 0, 0])
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(&Tensor<T>)) {
        for level in &self.encoder {
            level.for_each_param(f);
        }
        self.bottleneck.for_each_param(f);
        if let Some(gir) = &self.gir {
            gir.for_each_param(f);
        }
        for level in &self.decoder {
            for t in level.up.tensors() {
                f(t);
            }
            level.block.for_each_param(f);
        }
        f(&self.head_w);
        f(&self.head_b);
    }

    /// Trainable tensors in canonical order, mutably, for the optimizer.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Tensor<T>)) {
        for level in &mut self.encoder {
            level.visit_params(f);
        }
        self.bottleneck.visit_params(f);
        if let Some(gir) = &mut self.gir {
            gir.visit_params(f);
        }
        for level in &mut self.decoder {
            for t in level.up.tensors_mut() {
                f(t);
            }
            level.block.visit_params(f);
        }
        f(&mut self.head_w);
        f(&mut self.head_b);
    }

    /// Trainable scalar count (normalization buffers excluded).
    pub fn param_count(&self) -> usize {
        self.state_entries()
            .iter()
            .filter(|(name, _, _)| !name.ends_with("running_mean") && !name.ends_with("running_var"))
            .map(|(_, _, data)| data.len())
            .sum()
    }

    /// Every tensor needed to reproduce the model, in serialization
    /// order: encoder shallow to deep, bottleneck, global block, decoder
    /// deep to shallow, head.
    pub fn state_entries(&self) -> Vec<StateEntry<T>> {
        let mut out = Vec::new();
        for (i, level) in self.encoder.iter().enumerate() {
            level.state_entries(&format!("encoder.level{}", i + 1), &mut out);
        }
        self.bottleneck.state_entries("bottleneck", &mut out);
        if let Some(gir) = &self.gir {
            for (name, shape, data) in gir.state_entries() {
                out.push((format!("gir.{name}"), shape, data));
            }
        }
        let levels = self.decoder.len();
        for (i, level) in self.decoder.iter().enumerate() {
            let k = levels - i;
            let prefix = format!("decoder.level{k}");
            let [w, b] = level.up.tensors();
            out.push((format!("{prefix}.up.weight"), w.shape().to_vec(), w.to_vec()));
            out.push((format!("{prefix}.up.bias"), b.shape().to_vec(), b.to_vec()));
            level.block.state_entries(&format!("{prefix}.block"), &mut out);
        }
        out.push(("head.weight".to_string(), self.head_w.shape().to_vec(), self.head_w.to_vec()));
        out.push(("head.bias".to_string(), self.head_b.shape().to_vec(), self.head_b.to_vec()));
        out
    }

    /// Consumes `map` entirely; unknown or missing names are errors.
    pub fn load_state(&mut self, map: &mut StateMap<T>) -> Result<()> {
        for (i, level) in self.encoder.iter_mut().enumerate() {
            level.load_state(&format!("encoder.level{}", i + 1), map)?;
        }
        self.bottleneck.load_state("bottleneck", map)?;
        if let Some(gir) = &mut self.gir {
            let mut local = StateMap::new();
            let keys: Vec<String> = map
                .keys()
                .filter(|k| k.starts_with("gir."))
                .cloned()
                .collect();
            for k in keys {
                let v = map.remove(&k).expect("key listed above");
                local.insert(k["gir.".len()..].to_string(), v);
            }
            gir.load_state(&mut local)?;
            if let Some(extra) = local.keys().next() {
                return Err(CoreError::data(format!("unexpected entry gir.{extra}")));
            }
        }
        let levels = self.decoder.len();
        for (i, level) in self.decoder.iter_mut().enumerate() {
            let prefix = format!("decoder.level{}", levels - i);
            let [w, b] = level.up.tensors_mut();
            let ws = w.shape().to_vec();
            *w = Tensor::parameter(&ws, take_entry(map, &format!("{prefix}.up.weight"), &ws)?)?;
            let bs = b.shape().to_vec();
            *b = Tensor::parameter(&bs, take_entry(map, &format!("{prefix}.up.bias"), &bs)?)?;
            level.block.load_state(&format!("{prefix}.block"), map)?;
        }
        let ws = self.head_w.shape().to_vec();
        self.head_w = Tensor::parameter(&ws, take_entry(map, "head.weight", &ws)?)?;
        let bs = self.head_b.shape().to_vec();
        self.head_b = Tensor::parameter(&bs, take_entry(map, "head.bias", &bs)?)?;
        if let Some(extra) = map.keys().next() {
            return Err(CoreError::data(format!("unexpected checkpoint entry {extra}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> UNetConfig {
        UNetConfig {
            level_channels: vec![2, 4],
            bottleneck_channels: 8,
            ..UNetConfig::default()
        }
    }

    #[test]
    fn default_parameter_count_is_pinned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = Model::<f32>::new(UNetConfig::default(), &mut rng).unwrap();
        assert_eq!(model.param_count(), 1_423_841);

        let with_gir =
            Model::<f32>::new(UNetConfig { gir_enabled: true, ..UNetConfig::default() }, &mut rng)
                .unwrap();
        assert_eq!(with_gir.param_count(), 1_423_841 + 26_080);
        let overhead = 26_080.0 / 1_423_841.0;
        assert!((0.01..=0.05).contains(&overhead), "overhead {overhead}");
    }

    #[test]
    fn residual_block_with_zero_weights_is_relu() {
        let block = ResidualBlock::<f64>::zeroed(3, 3).unwrap();
        let cfg = UNetConfig::default();
        let data: Vec<f64> = (0..3 * 8).map(|i| i as f64 - 11.5).collect();
        let x = Tensor::from_vec(&[1, 3, 2, 2, 2], data.clone()).unwrap();
        let y = block.forward(&x, Phase::Train, &cfg).unwrap();
        let expect: Vec<f64> = data.iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(y.to_vec(), expect);
    }

    #[test]
    fn forward_keeps_spatial_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = Model::<f64>::new(tiny_config(), &mut rng).unwrap();
        let x = Tensor::from_vec(
            &[2, 1, 4, 8, 4],
            (0..2 * 4 * 8 * 4).map(|i| (i as f64 * 0.11).sin()).collect(),
        )
        .unwrap();
        let y = model.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.shape(), &[2, 1, 4, 8, 4]);
        let y = model.forward(&x, Phase::Infer).unwrap();
        assert_eq!(y.shape(), &[2, 1, 4, 8, 4]);
    }

    #[test]
    fn forward_with_nearest_upsampling_matches_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = UNetConfig { upsample: UpsampleMode::Nearest, ..tiny_config() };
        let model = Model::<f64>::new(cfg, &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, 1, 4, 4, 4], (0..64).map(|i| i as f64 * 0.01).collect())
            .unwrap();
        let y = model.forward(&x, Phase::Train).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
    }

    #[test]
    fn forward_rejects_indivisible_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = Model::<f64>::new(tiny_config(), &mut rng).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 1, 6, 8, 8]);
        assert!(matches!(
            model.forward(&x, Phase::Infer),
            Err(CoreError::Shape { .. })
        ));
    }

    #[test]
    fn every_parameter_receives_a_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = UNetConfig {
            level_channels: vec![2],
            bottleneck_channels: 4,
            gir_enabled: true,
            ..UNetConfig::default()
        };
        let mut model = Model::<f64>::new(cfg, &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, 1, 2, 2, 4], (0..16).map(|i| (i as f64).cos()).collect())
            .unwrap();
        let y = model.forward(&x, Phase::Train).unwrap();
        ops::sum_all(&y).unwrap().backward().unwrap();
        let mut missing = 0usize;
        let mut total = 0usize;
        model.visit_params(&mut |p| {
            total += 1;
            if p.grad().is_none() {
                missing += 1;
            }
        });
        assert!(total > 20);
        assert_eq!(missing, 0, "{missing} of {total} parameters missed gradients");
    }

    #[test]
    fn state_entries_use_the_documented_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = UNetConfig { gir_enabled: true, ..tiny_config() };
        let model = Model::<f64>::new(cfg, &mut rng).unwrap();
        let names: Vec<String> = model.state_entries().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names[0], "encoder.level1.unit1.conv.weight");
        assert!(names.contains(&"encoder.level2.unit2.norm.running_var".to_string()));
        assert!(names.contains(&"bottleneck.shortcut.weight".to_string()));
        assert!(names.contains(&"gir.adjacency".to_string()));
        assert!(names.contains(&"decoder.level2.up.weight".to_string()));
        assert!(names.contains(&"decoder.level1.block.unit1.conv.weight".to_string()));
        assert_eq!(names.last().unwrap(), "head.bias");
        // Deep decoder level serializes before the shallow one.
        let d2 = names.iter().position(|n| n.starts_with("decoder.level2")).unwrap();
        let d1 = names.iter().position(|n| n.starts_with("decoder.level1")).unwrap();
        assert!(d2 < d1);
    }

    #[test]
    fn state_round_trip_reproduces_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = UNetConfig { gir_enabled: true, ..tiny_config() };
        let model = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let mut map: StateMap<f64> = model
            .state_entries()
            .into_iter()
            .map(|(n, s, d)| (n, (s, d)))
            .collect();

        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let mut other = Model::<f64>::new(cfg, &mut rng2).unwrap();
        other.load_state(&mut map).unwrap();

        let x = Tensor::from_vec(&[1, 1, 4, 4, 8], (0..128).map(|i| (i as f64 * 0.07).sin()).collect())
            .unwrap();
        let a = model.forward(&x, Phase::Infer).unwrap();
        let b = other.forward(&x, Phase::Infer).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn load_state_rejects_unknown_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = Model::<f64>::new(tiny_config(), &mut rng).unwrap();
        let mut map: StateMap<f64> = model
            .state_entries()
            .into_iter()
            .map(|(n, s, d)| (n, (s, d)))
            .collect();
        map.insert("stray".to_string(), (vec![1], vec![0.0]));
        let mut rng2 = ChaCha8Rng::seed_from_u64(18);
        let mut other = Model::<f64>::new(tiny_config(), &mut rng2).unwrap();
        assert!(other.load_state(&mut map).is_err());
    }
}

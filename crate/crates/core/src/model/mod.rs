//! Dual-branch UNet: one shared encoder and two structurally identical
//! decoders. The auxiliary decoder applies feature dropout in front of each
//! of its conv blocks during training.

mod checkpoint;
pub mod layers;
mod network;

use std::fmt::Debug;
use std::iter::Sum;

use ndarray::LinalgScalar;
use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use network::{backward, forward, predict, Batch, ForwardOutput, Mode, SoftPrediction};

/// Floating point type the network can run in. Training uses `f32`;
/// gradient checks use `f64`.
pub trait Scalar: Float + LinalgScalar + FromPrimitive + Sum + Debug + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from(v).expect("finite cast")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Resolution levels, including the bottleneck.
    pub levels: usize,
    /// Channels at full resolution; doubles per level.
    pub base_width: usize,
    /// Feature dropout of the auxiliary decoder.
    pub dropout_rate: f64,
    /// Upper bound on normalization groups per layer (actual count is `gcd(channels, norm_groups)`).
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 4,
            levels: 5,
            base_width: 16,
            dropout_rate: 0.5,
            norm_groups: 4,
        }
    }
}

impl ModelConfig {
    /// The small model used for CPU-scale experiments.
    pub fn desk() -> Self {
        ModelConfig {
            levels: 3,
            base_width: 8,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::validation(format!("levels must be >= 2, got {}", self.levels)));
        }
        if self.base_width == 0 || self.in_channels == 0 || self.num_classes < 2 || self.norm_groups == 0 {
            return Err(Error::validation("base_width, in_channels, norm_groups must be >= 1 and num_classes >= 2"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub(crate) fn groups_for(&self, channels: usize) -> usize {
        gcd(channels, self.norm_groups)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

/// conv3x3 → norm → ReLU, twice.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<F> {
    pub conv1: Conv<F>,
    pub norm1: Norm<F>,
    pub conv2: Conv<F>,
    pub norm2: Norm<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<F> {
    pub blocks: Vec<ConvBlock<F>>,
}

/// `ups[l]` and `blocks[l]` produce level `l` features from level `l + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<F> {
    pub ups: Vec<Conv<F>>,
    pub blocks: Vec<ConvBlock<F>>,
    pub head: Conv<F>,
}

/// Also used for gradients, which share the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub decoder_main: Decoder<F>,
    pub decoder_aux: Decoder<F>,
}

fn visit_conv<'a, F>(prefix: &str, conv: &'a Conv<F>, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
    f(format!("{prefix}.weight"), &conv.weight);
    f(format!("{prefix}.bias"), &conv.bias);
}

fn visit_block<'a, F>(prefix: &str, block: &'a ConvBlock<F>, f: &mut dyn FnMut(String, &'a Tensor<F>)) {
    visit_conv(&format!("{prefix}.conv1"), &block.conv1, f);
    f(format!("{prefix}.norm1.gamma"), &block.norm1.gamma);
    f(format!("{prefix}.norm1.beta"), &block.norm1.beta);
    visit_conv(&format!("{prefix}.conv2"), &block.conv2, f);
    f(format!("{prefix}.norm2.gamma"), &block.norm2.gamma);
    f(format!("{prefix}.norm2.beta"), &block.norm2.beta);
}

fn block_tensors_mut<F>(block: &mut ConvBlock<F>) -> [&mut Tensor<F>; 8] {
    [
        &mut block.conv1.weight,
        &mut block.conv1.bias,
        &mut block.norm1.gamma,
        &mut block.norm1.beta,
        &mut block.conv2.weight,
        &mut block.conv2.bias,
        &mut block.norm2.gamma,
        &mut block.norm2.beta,
    ]
}

impl<F> Encoder<F> {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            visit_block(&format!("encoder.level{l}"), block, &mut |n, t| out.push((n, t)));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.blocks.iter_mut().flat_map(block_tensors_mut).collect()
    }
}

impl<F> Decoder<F> {
    pub fn named_tensors(&self, name: &str) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (l, (up, block)) in self.ups.iter().zip(&self.blocks).enumerate() {
            visit_conv(&format!("{name}.level{l}.up"), up, &mut |n, t| out.push((n, t)));
            visit_block(&format!("{name}.level{l}"), block, &mut |n, t| out.push((n, t)));
        }
        visit_conv(&format!("{name}.head"), &self.head, &mut |n, t| out.push((n, t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for (up, block) in self.ups.iter_mut().zip(self.blocks.iter_mut()) {
            out.push(&mut up.weight);
            out.push(&mut up.bias);
            out.extend(block_tensors_mut(block));
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

impl<F: Scalar> ModelParams<F> {
    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = self.encoder.named_tensors();
        out.extend(self.decoder_main.named_tensors("decoder_main"));
        out.extend(self.decoder_aux.named_tensors("decoder_aux"));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.decoder_main.tensors_mut());
        out.extend(self.decoder_aux.tensors_mut());
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = F::zero());
        }
        z
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let mut out = init_params_with::<G>(&self.config, &mut |_| G::zero());
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.named_tensors()) {
            *dst = src.cast();
        }
        out
    }
}

fn build_conv<F: Scalar>(cout: usize, cin: usize, k: usize, draw: &mut dyn FnMut(usize) -> F) -> Conv<F> {
    let fan_in = cin * k * k;
    let mut weight = Tensor::zeros(&[cout, cin, k, k]);
    weight.data.iter_mut().for_each(|w| *w = draw(fan_in));
    Conv {
        weight,
        bias: Tensor::zeros(&[cout]),
    }
}

fn build_up<F: Scalar>(cin: usize, cout: usize, draw: &mut dyn FnMut(usize) -> F) -> Conv<F> {
    let mut weight = Tensor::zeros(&[cin, cout, 2, 2]);
    weight.data.iter_mut().for_each(|w| *w = draw(cin));
    Conv {
        weight,
        bias: Tensor::zeros(&[cout]),
    }
}

fn build_norm<F: Scalar>(c: usize) -> Norm<F> {
    Norm {
        gamma: Tensor::filled(&[c], F::one()),
        beta: Tensor::zeros(&[c]),
    }
}

fn build_block<F: Scalar>(cin: usize, cout: usize, draw: &mut dyn FnMut(usize) -> F) -> ConvBlock<F> {
    ConvBlock {
        conv1: build_conv(cout, cin, 3, draw),
        norm1: build_norm(cout),
        conv2: build_conv(cout, cout, 3, draw),
        norm2: build_norm(cout),
    }
}

fn build_decoder<F: Scalar>(config: &ModelConfig, draw: &mut dyn FnMut(usize) -> F) -> Decoder<F> {
    let mut ups = Vec::new();
    let mut blocks = Vec::new();
    for l in 0..config.levels - 1 {
        ups.push(build_up(config.width(l + 1), config.width(l), draw));
        blocks.push(build_block(2 * config.width(l), config.width(l), draw));
    }
    Decoder {
        ups,
        blocks,
        head: build_conv(config.num_classes, config.width(0), 1, draw),
    }
}

fn init_params_with<F: Scalar>(config: &ModelConfig, draw: &mut dyn FnMut(usize) -> F) -> ModelParams<F> {
    let blocks = (0..config.levels)
        .map(|l| {
            let cin = if l == 0 { config.in_channels } else { config.width(l - 1) };
            build_block(cin, config.width(l), draw)
        })
        .collect();
    let encoder = Encoder { blocks };
    let decoder_main = build_decoder(config, draw);
    let decoder_aux = build_decoder(config, draw);
    ModelParams {
        config: config.clone(),
        encoder,
        decoder_main,
        decoder_aux,
    }
}

/// Uniform He initialization: weights in `±sqrt(6 / fan_in)`, biases zero,
/// norm scales one. Encoder, main and auxiliary decoder draw from one seeded
/// stream in that order, so the two decoders get different values.
pub fn init_params<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |fan_in: usize| {
        let bound = init_bound(fan_in);
        F::from(rng.random_range(-bound..bound)).expect("finite")
    };
    Ok(init_params_with(config, &mut draw))
}

pub fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::desk();
        assert_eq!(init_params::<f32>(&c, 4).unwrap(), init_params::<f32>(&c, 4).unwrap());
        assert_ne!(init_params::<f32>(&c, 4).unwrap(), init_params::<f32>(&c, 5).unwrap());
    }

    #[test]
    fn decoders_are_congruent_but_distinct() {
        let p = init_params::<f32>(&ModelConfig::desk(), 0).unwrap();
        let main = p.decoder_main.named_tensors("d");
        let aux = p.decoder_aux.named_tensors("d");
        assert_eq!(main.len(), aux.len());
        for ((na, a), (nb, b)) in main.iter().zip(&aux) {
            assert_eq!(na, nb);
            assert_eq!(a.shape, b.shape);
        }
        assert_ne!(p.decoder_main, p.decoder_aux);
    }

    #[test]
    fn weights_respect_the_bound() {
        let p = init_params::<f64>(&ModelConfig::desk(), 1).unwrap();
        assert!(p.is_finite());
        for (name, t) in p.named_tensors() {
            if name.ends_with(".weight") {
                let fan_in = if name.contains(".up.") { t.shape[0] } else { t.shape[1] * t.shape[2] * t.shape[3] };
                let bound = init_bound(fan_in);
                assert!(t.data.iter().all(|w| w.abs() <= bound), "{name}");
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data.iter().all(|&w| w == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn names_and_mut_order_agree() {
        let mut p = init_params::<f32>(&ModelConfig::desk(), 2).unwrap();
        let shapes: Vec<Vec<usize>> = p.named_tensors().iter().map(|(_, t)| t.shape.clone()).collect();
        let mut_shapes: Vec<Vec<usize>> = p.tensors_mut().iter().map(|t| t.shape.clone()).collect();
        assert_eq!(shapes, mut_shapes);
        let names: std::collections::BTreeSet<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), shapes.len());
    }

    #[test]
    fn invalid_configs() {
        let bad = ModelConfig { levels: 1, ..ModelConfig::desk() };
        assert!(init_params::<f32>(&bad, 0).is_err());
        let bad = ModelConfig { dropout_rate: 1.0, ..ModelConfig::desk() };
        assert!(bad.validate().is_err());
    }
}

use rand::Rng;

use super::layers::{
    concat, conv_backward, conv_forward, group_norm_backward, group_norm_forward, max_pool_backward, max_pool_forward,
    relu_backward_inplace, relu_inplace, softmax, softmax_backward, split_channels, up_conv_backward, up_conv_forward,
    Act, NormCache,
};
use super::{ConvBlock, Decoder, ModelConfig, ModelParams, Scalar};
use crate::error::{Error, Result};

/// Network input, `[n, channels, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<F> {
    pub data: Vec<F>,
    pub n: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl<F: Scalar> Batch<F> {
    pub fn new(data: Vec<F>, n: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != n * channels * height * width || n == 0 {
            return Err(Error::validation(format!(
                "batch buffer of {} values does not match shape [{n}, {channels}, {height}, {width}]",
                data.len()
            )));
        }
        Ok(Batch {
            data,
            n,
            channels,
            height,
            width,
        })
    }

    fn to_act(&self) -> Act<F> {
        Act {
            data: self.data.clone(),
            b: self.n,
            c: self.channels,
            h: self.height,
            w: self.width,
        }
    }
}

/// Per-pixel class probabilities, `[batch, classes, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrediction<F> {
    pub probs: Vec<F>,
    pub batch: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

impl<F: Scalar> SoftPrediction<F> {
    pub fn new(probs: Vec<F>, batch: usize, classes: usize, height: usize, width: usize) -> Result<Self> {
        if probs.len() != batch * classes * height * width {
            return Err(Error::validation(format!(
                "prediction buffer of {} values does not match [{batch}, {classes}, {height}, {width}]",
                probs.len()
            )));
        }
        Ok(SoftPrediction {
            probs,
            batch,
            classes,
            height,
            width,
        })
    }

    fn from_act(act: Act<F>) -> Self {
        SoftPrediction {
            probs: act.data,
            batch: act.b,
            classes: act.c,
            height: act.h,
            width: act.w,
        }
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    /// Number of pixels across the batch.
    pub fn pixels(&self) -> usize {
        self.batch * self.hw()
    }

    pub fn index(&self, b: usize, c: usize, p: usize) -> usize {
        (b * self.classes + c) * self.hw() + p
    }

    pub fn get(&self, b: usize, c: usize, p: usize) -> F {
        self.probs[self.index(b, c, p)]
    }

    pub fn same_shape(&self, other: &SoftPrediction<F>) -> bool {
        (self.batch, self.classes, self.height, self.width) == (other.batch, other.classes, other.height, other.width)
    }

    /// Hard labels `[batch, height*width]`; ties go to the smallest class index.
    pub fn argmax(&self) -> Vec<u8> {
        let hw = self.hw();
        let mut out = vec![0u8; self.pixels()];
        for b in 0..self.batch {
            for p in 0..hw {
                let mut best = 0;
                let mut best_v = self.get(b, 0, p);
                for c in 1..self.classes {
                    let v = self.get(b, c, p);
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                out[b * hw + p] = best as u8;
            }
        }
        out
    }

    /// Largest deviation from the probability simplex (negative mass or sum off 1).
    pub fn simplex_violation(&self) -> f64 {
        let hw = self.hw();
        let mut worst = 0.0f64;
        for b in 0..self.batch {
            for p in 0..hw {
                let mut sum = 0.0f64;
                for c in 0..self.classes {
                    let v = self.get(b, c, p).to_f64().unwrap_or(f64::NAN);
                    worst = worst.max(-v);
                    sum += v;
                }
                worst = worst.max((sum - 1.0).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BlockCache<F> {
    input_dims: (usize, usize, usize, usize),
    col1: Vec<F>,
    norm1: NormCache<F>,
    a1: Act<F>,
    col2: Vec<F>,
    norm2: NormCache<F>,
    out: Act<F>,
}

struct EncoderCache<F> {
    blocks: Vec<BlockCache<F>>,
    /// `pool_idx[l]` pools the level-`l` output into level `l + 1`.
    pool_idx: Vec<Vec<u32>>,
}

struct DecoderCache<F> {
    /// Indexed by level, like the decoder parameters.
    blocks: Vec<BlockCache<F>>,
    masks: Vec<Option<Vec<F>>>,
    probs: Act<F>,
}

struct Cache<F> {
    encoder: EncoderCache<F>,
    main: DecoderCache<F>,
    aux: DecoderCache<F>,
}

/// Result of a recorded forward pass; keeps what [`backward`] needs.
pub struct ForwardOutput<F> {
    pub y1: SoftPrediction<F>,
    pub y2: SoftPrediction<F>,
    cache: Cache<F>,
}

fn block_forward<F: Scalar>(x: Act<F>, block: &ConvBlock<F>, config: &ModelConfig) -> (Act<F>, BlockCache<F>) {
    let groups = config.groups_for(block.norm1.gamma.len());
    let input_dims = (x.b, x.c, x.h, x.w);
    let (z1, col1) = conv_forward(&x, &block.conv1.weight, &block.conv1.bias, true);
    drop(x);
    let (mut a1, norm1) = group_norm_forward(&z1, &block.norm1.gamma, &block.norm1.beta, groups, true);
    relu_inplace(&mut a1);
    let (z2, col2) = conv_forward(&a1, &block.conv2.weight, &block.conv2.bias, true);
    let (mut out, norm2) = group_norm_forward(&z2, &block.norm2.gamma, &block.norm2.beta, groups, true);
    relu_inplace(&mut out);
    let cache = BlockCache {
        input_dims,
        col1,
        norm1,
        a1,
        col2,
        norm2,
        out: out.clone(),
    };
    (out, cache)
}

fn block_infer<F: Scalar>(x: &Act<F>, block: &ConvBlock<F>, config: &ModelConfig) -> Act<F> {
    let groups = config.groups_for(block.norm1.gamma.len());
    let (z1, _) = conv_forward(x, &block.conv1.weight, &block.conv1.bias, false);
    let (mut a1, _) = group_norm_forward(&z1, &block.norm1.gamma, &block.norm1.beta, groups, false);
    relu_inplace(&mut a1);
    let (z2, _) = conv_forward(&a1, &block.conv2.weight, &block.conv2.bias, false);
    let (mut out, _) = group_norm_forward(&z2, &block.norm2.gamma, &block.norm2.beta, groups, false);
    relu_inplace(&mut out);
    out
}

fn block_backward<F: Scalar>(
    mut dout: Act<F>,
    cache: &BlockCache<F>,
    block: &ConvBlock<F>,
    grads: &mut ConvBlock<F>,
    config: &ModelConfig,
    need_dx: bool,
) -> Option<Act<F>> {
    let groups = config.groups_for(block.norm1.gamma.len());
    relu_backward_inplace(&mut dout, &cache.out);
    let dz2 = group_norm_backward(
        &dout,
        &block.norm2.gamma,
        &cache.norm2,
        groups,
        &mut grads.norm2.gamma,
        &mut grads.norm2.beta,
    );
    let a1 = &cache.a1;
    let mut da1 = conv_backward(
        &cache.col2,
        (a1.b, a1.c, a1.h, a1.w),
        &block.conv2.weight,
        &dz2,
        &mut grads.conv2.weight,
        &mut grads.conv2.bias,
        true,
    )
    .expect("dx requested");
    relu_backward_inplace(&mut da1, a1);
    let dz1 = group_norm_backward(
        &da1,
        &block.norm1.gamma,
        &cache.norm1,
        groups,
        &mut grads.norm1.gamma,
        &mut grads.norm1.beta,
    );
    conv_backward(
        &cache.col1,
        cache.input_dims,
        &block.conv1.weight,
        &dz1,
        &mut grads.conv1.weight,
        &mut grads.conv1.bias,
        need_dx,
    )
}

fn dropout_mask<F: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<F> {
    let keep = F::from(1.0 / (1.0 - rate)).expect("finite");
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
        .collect()
}

fn decoder_forward<F: Scalar, R: Rng + ?Sized>(
    decoder: &Decoder<F>,
    skips: &[&Act<F>],
    config: &ModelConfig,
    dropout: Option<(f64, &mut R)>,
) -> DecoderCache<F> {
    let levels = config.levels;
    let mut blocks: Vec<Option<BlockCache<F>>> = (0..levels - 1).map(|_| None).collect();
    let mut masks: Vec<Option<Vec<F>>> = vec![None; levels - 1];
    let mut dropout = dropout;
    let mut h: Act<F> = skips[levels - 1].clone();
    for l in (0..levels - 1).rev() {
        let up = up_conv_forward(&h, &decoder.ups[l].weight, &decoder.ups[l].bias);
        let mut cat = concat(skips[l], &up);
        if let Some((rate, rng)) = dropout.as_mut() {
            let mask = dropout_mask(cat.data.len(), *rate, &mut **rng);
            cat.data.iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
            masks[l] = Some(mask);
        }
        let (out, cache) = block_forward(cat, &decoder.blocks[l], config);
        blocks[l] = Some(cache);
        h = out;
    }
    let (logits, _) = conv_forward(&h, &decoder.head.weight, &decoder.head.bias, false);
    DecoderCache {
        blocks: blocks.into_iter().map(|b| b.expect("every level visited")).collect(),
        masks,
        probs: softmax(&logits),
    }
}

fn decoder_infer<F: Scalar>(decoder: &Decoder<F>, skips: &[Act<F>], config: &ModelConfig) -> Act<F> {
    let levels = config.levels;
    let mut h = skips[levels - 1].clone();
    for l in (0..levels - 1).rev() {
        let up = up_conv_forward(&h, &decoder.ups[l].weight, &decoder.ups[l].bias);
        h = block_infer(&concat(&skips[l], &up), &decoder.blocks[l], config);
    }
    let (logits, _) = conv_forward(&h, &decoder.head.weight, &decoder.head.bias, false);
    softmax(&logits)
}

fn check_input<F: Scalar>(config: &ModelConfig, batch: &Batch<F>) -> Result<()> {
    let m = config.size_multiple();
    if batch.channels != config.in_channels {
        return Err(Error::validation(format!(
            "batch has {} channels, model expects {}",
            batch.channels, config.in_channels
        )));
    }
    if batch.height % m != 0 || batch.width % m != 0 || batch.height == 0 || batch.width == 0 {
        return Err(Error::validation(format!(
            "input {}x{} is not a positive multiple of {m}",
            batch.height, batch.width
        )));
    }
    if batch.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("batch contains non-finite values"));
    }
    Ok(())
}

/// Runs the encoder once and both decoders, recording activations for
/// [`backward`]. In [`Mode::Train`] the auxiliary decoder drops features
/// using `rng`; the main decoder never touches `rng`.
pub fn forward<F: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<F>,
    batch: &Batch<F>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput<F>> {
    let config = &params.config;
    check_input(config, batch)?;
    let mut enc_blocks = Vec::with_capacity(config.levels);
    let mut pool_idx = Vec::with_capacity(config.levels - 1);
    let mut x = batch.to_act();
    for (l, block) in params.encoder.blocks.iter().enumerate() {
        if l > 0 {
            let (pooled, idx) = max_pool_forward(&x);
            pool_idx.push(idx);
            x = pooled;
        }
        let (out, cache) = block_forward(x, block, config);
        enc_blocks.push(cache);
        x = out;
    }
    drop(x);
    let skips: Vec<&Act<F>> = enc_blocks.iter().map(|c| &c.out).collect();
    let main = decoder_forward::<F, R>(&params.decoder_main, &skips, config, None);
    let dropout = match mode {
        Mode::Train if config.dropout_rate > 0.0 => Some((config.dropout_rate, rng)),
        _ => None,
    };
    let aux = decoder_forward(&params.decoder_aux, &skips, config, dropout);
    let y1 = SoftPrediction::from_act(main.probs.clone());
    let y2 = SoftPrediction::from_act(aux.probs.clone());
    Ok(ForwardOutput {
        y1,
        y2,
        cache: Cache {
            encoder: EncoderCache {
                blocks: enc_blocks,
                pool_idx,
            },
            main,
            aux,
        },
    })
}

/// Eval-mode forward without recording; returns `(y1, y2)`.
pub fn predict<F: Scalar>(params: &ModelParams<F>, batch: &Batch<F>) -> Result<(SoftPrediction<F>, SoftPrediction<F>)> {
    let config = &params.config;
    check_input(config, batch)?;
    let mut skips = Vec::with_capacity(config.levels);
    let mut x = batch.to_act();
    for (l, block) in params.encoder.blocks.iter().enumerate() {
        if l > 0 {
            x = max_pool_forward(&x).0;
        }
        x = block_infer(&x, block, config);
        skips.push(x.clone());
    }
    let y1 = decoder_infer(&params.decoder_main, &skips, config);
    let y2 = decoder_infer(&params.decoder_aux, &skips, config);
    Ok((SoftPrediction::from_act(y1), SoftPrediction::from_act(y2)))
}

fn decoder_backward<F: Scalar>(
    decoder: &Decoder<F>,
    cache: &DecoderCache<F>,
    encoder: &EncoderCache<F>,
    dprobs: &[F],
    grads: &mut Decoder<F>,
    dskips: &mut [Act<F>],
    config: &ModelConfig,
) {
    let levels = config.levels;
    let probs = &cache.probs;
    let dlogits = Act {
        data: softmax_backward(&probs.data, dprobs, probs.b, probs.c, probs.hw()),
        b: probs.b,
        c: probs.c,
        h: probs.h,
        w: probs.w,
    };
    let top = &cache.blocks[0].out;
    let mut dh = conv_backward(
        &top.data,
        (top.b, top.c, top.h, top.w),
        &decoder.head.weight,
        &dlogits,
        &mut grads.head.weight,
        &mut grads.head.bias,
        true,
    )
    .expect("dx requested");
    for l in 0..levels - 1 {
        let mut dcat = block_backward(dh, &cache.blocks[l], &decoder.blocks[l], &mut grads.blocks[l], config, true)
            .expect("dx requested");
        if let Some(mask) = &cache.masks[l] {
            dcat.data.iter_mut().zip(mask).for_each(|(d, &m)| *d = *d * m);
        }
        let (dskip, dup) = split_channels(&dcat, config.width(l));
        dskips[l].data.iter_mut().zip(&dskip.data).for_each(|(a, &b)| *a = *a + b);
        let up_input = if l + 1 == levels - 1 {
            &encoder.blocks[levels - 1].out
        } else {
            &cache.blocks[l + 1].out
        };
        let up = &mut grads.ups[l];
        dh = up_conv_backward(up_input, &decoder.ups[l].weight, &dup, &mut up.weight, &mut up.bias);
    }
    dskips[levels - 1].data.iter_mut().zip(&dh.data).for_each(|(a, &b)| *a = *a + b);
}

/// Reverse-mode gradients of a loss given its gradients w.r.t. the two
/// probability maps. A `None` head contributes nothing, so its decoder's
/// gradients stay zero.
pub fn backward<F: Scalar>(
    params: &ModelParams<F>,
    out: &ForwardOutput<F>,
    dy1: Option<&[F]>,
    dy2: Option<&[F]>,
) -> Result<ModelParams<F>> {
    let config = &params.config;
    let mut grads = params.zeros_like();
    for d in [dy1, dy2].into_iter().flatten() {
        if d.len() != out.y1.probs.len() {
            return Err(Error::validation("gradient buffer does not match prediction shape"));
        }
    }
    if dy1.is_none() && dy2.is_none() {
        return Ok(grads);
    }
    let cache = &out.cache;
    let mut dskips: Vec<Act<F>> = cache.encoder.blocks.iter().map(|b| Act::like(&b.out)).collect();
    if let Some(d) = dy1 {
        decoder_backward(
            &params.decoder_main,
            &cache.main,
            &cache.encoder,
            d,
            &mut grads.decoder_main,
            &mut dskips,
            config,
        );
    }
    if let Some(d) = dy2 {
        decoder_backward(
            &params.decoder_aux,
            &cache.aux,
            &cache.encoder,
            d,
            &mut grads.decoder_aux,
            &mut dskips,
            config,
        );
    }
    for l in (0..config.levels).rev() {
        let dout = std::mem::replace(&mut dskips[l], Act::zeros(0, 0, 0, 0));
        let dx = block_backward(
            dout,
            &cache.encoder.blocks[l],
            &params.encoder.blocks[l],
            &mut grads.encoder.blocks[l],
            config,
            l > 0,
        );
        if let Some(dx) = dx {
            let prev = &cache.encoder.blocks[l - 1].out;
            let dprev = max_pool_backward(&dx, &cache.encoder.pool_idx[l - 1], (prev.b, prev.c, prev.h, prev.w));
            dskips[l - 1].data.iter_mut().zip(&dprev.data).for_each(|(a, &b)| *a = *a + b);
        }
    }
    Ok(grads)
}

//! SGD with momentum and poly decay, the training loop and slice-wise inference.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, normalize_slice, resize_sample, AugmentConfig, ImageVolume, ScribbleMask, SliceSample};
use crate::error::{Error, Result};
use crate::losses::{sample_alpha, supervision_loss, AlphaMode, LossDiagnostics, LossWeights, Supervision};
use crate::metrics::{dsc3d, BinaryVolume, STRUCTURES};
use crate::model::{
    backward, forward, init_params, predict, save_checkpoint, Batch, Mode, ModelConfig, ModelParams, Scalar,
    SoftPrediction,
};

/// Independent random streams derived from the training seed.
const STREAM_BATCH: u64 = 1;
const STREAM_ALPHA: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderChoice {
    Main,
    Aux,
}

impl DecoderChoice {
    pub fn name(self) -> &'static str {
        match self {
            DecoderChoice::Main => "main",
            DecoderChoice::Aux => "aux",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub lambda_pls: f64,
    pub poly_power: f64,
    pub supervision: Supervision,
    pub alpha_mode: AlphaMode,
    pub alpha_fixed: f64,
    pub seed: u64,
    pub eval_decoder: DecoderChoice,
    /// Network input height and width; slices are resized to this.
    pub input_size: usize,
    pub epsilon_dice: f64,
    pub dice_include_background: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            max_iterations: 2000,
            lambda_pls: 0.5,
            poly_power: 0.9,
            supervision: Supervision::Pls,
            alpha_mode: AlphaMode::Random,
            alpha_fixed: 0.5,
            seed: 2022,
            eval_decoder: DecoderChoice::Main,
            input_size: 64,
            epsilon_dice: 1e-5,
            dice_include_background: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_pls: self.lambda_pls,
            epsilon_dice: self.epsilon_dice,
            dice_include_background: self.dice_include_background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("poly_power", self.poly_power),
            ("epsilon_dice", self.epsilon_dice),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::validation("weight_decay must be >= 0"));
        }
        if self.batch_size == 0 || self.input_size == 0 {
            return Err(Error::validation("batch_size and input_size must be >= 1"));
        }
        if self.alpha_mode == AlphaMode::Fixed && !(self.alpha_fixed > 0.0 && self.alpha_fixed < 1.0) {
            return Err(Error::validation(format!("alpha_fixed {} outside (0, 1)", self.alpha_fixed)));
        }
        self.loss_weights().validate()
    }

    /// Iterations between validation passes.
    pub fn validation_interval(&self) -> usize {
        (self.max_iterations / 20).max(1)
    }
}

pub fn poly_lr(base_lr: f64, iteration: usize, max_iterations: usize, power: f64) -> f64 {
    if max_iterations == 0 {
        return base_lr;
    }
    let frac = 1.0 - iteration.min(max_iterations) as f64 / max_iterations as f64;
    base_lr * frac.powf(power)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<F> {
    pub velocity: ModelParams<F>,
    pub iteration: usize,
}

impl<F: Scalar> OptimState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        OptimState {
            velocity: params.zeros_like(),
            iteration: 0,
        }
    }
}

/// `g' = g + wd * w; v = momentum * v + g'; w -= lr * v`.
pub fn sgd_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &ModelParams<F>,
    state: &mut OptimState<F>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads.named_tensors() {
        if g.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient in {name}")));
        }
    }
    let lr = F::from(lr).expect("finite");
    let m = F::from(momentum).expect("finite");
    let wd = F::from(weight_decay).expect("finite");
    let grads = grads.named_tensors();
    for ((w, v), (_, g)) in params
        .tensors_mut()
        .into_iter()
        .zip(state.velocity.tensors_mut())
        .zip(grads)
    {
        for ((w, v), &g) in w.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
            *v = m * *v + (g + wd * *w);
            *w = *w - lr * *v;
        }
    }
    state.iteration += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iter: usize,
    pub lr: f64,
    pub alpha: f64,
    pub loss_total: f64,
    pub loss_scribble: f64,
    pub loss_aux: f64,
}

impl HistoryRecord {
    fn new(iter: usize, lr: f64, d: &LossDiagnostics) -> Self {
        HistoryRecord {
            iter,
            lr,
            alpha: d.alpha,
            loss_total: d.total,
            loss_scribble: d.scribble,
            loss_aux: d.aux,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iter: usize,
    pub mean_dsc: f64,
}

/// A held-out volume with its dense label, used only for model selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationVolume {
    pub image: ImageVolume,
    pub label: Array3<u8>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ModelParams<f32>,
    /// Parameters with the best validation score, if validation ran.
    pub best: Option<(ValidationRecord, ModelParams<f32>)>,
    pub history: Vec<HistoryRecord>,
    pub validation: Vec<ValidationRecord>,
}

/// Where [`train`] persists its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
    pub config_hash: String,
}

impl TrainOutput {
    pub fn history_path(&self) -> PathBuf {
        self.dir.join("history.jsonl")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint_final")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint_best")
    }
}

fn write_history(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for rec in history {
        serde_json::to_writer(&mut buf, rec)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn build_batch(samples: &[SliceSample], size: usize, num_classes: usize) -> Result<(Batch<f32>, ScribbleMask)> {
    let n = samples.len();
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Array3::zeros((n, size, size));
    for (i, s) in samples.iter().enumerate() {
        let s = if s.dim() == (size, size) {
            s.clone()
        } else {
            resize_sample(s, (size, size))?
        };
        data.extend(s.image.iter().copied());
        labels.index_axis_mut(Axis(0), i).assign(&s.scribble);
    }
    Ok((Batch::new(data, n, 1, size, size)?, ScribbleMask::new(labels, num_classes)?))
}

fn check_samples(samples: &[SliceSample], model: &ModelConfig, size: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if model.in_channels != 1 {
        return Err(Error::validation("training expects single-channel slices"));
    }
    if size % model.size_multiple() != 0 {
        return Err(Error::validation(format!(
            "input_size {size} is not a multiple of {}",
            model.size_multiple()
        )));
    }
    Ok(())
}

/// Mean foreground Dice over `volumes`.
pub fn validation_dsc(params: &ModelParams<f32>, volumes: &[ValidationVolume], decoder: DecoderChoice, size: usize) -> Result<f64> {
    let mut total = 0.0;
    for v in volumes {
        let pred = infer_volume(params, &v.image, decoder, size)?;
        let mut sum = 0.0;
        for k in 0..STRUCTURES.len() {
            let class = k as u8 + 1;
            let p = BinaryVolume::from_labels(&pred, class, v.image.spacing)?;
            let g = BinaryVolume::from_labels(&v.label, class, v.image.spacing)?;
            sum += dsc3d(&p, &g)?;
        }
        total += sum / STRUCTURES.len() as f64;
    }
    Ok(total / volumes.len() as f64)
}

/// Trains both decoders from scribbled slices. Dense labels on `train_samples`
/// are never read; `validation` volumes are only used to pick the best checkpoint.
pub fn train(
    config: &TrainConfig,
    model: &ModelConfig,
    train_samples: &[SliceSample],
    validation: &[ValidationVolume],
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    check_samples(train_samples, model, config.input_size)?;
    if let Some(out) = output {
        fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    }
    let weights = config.loss_weights();
    let mut params = init_params::<f32>(model, config.seed)?;
    let mut state = OptimState::new(&params);
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(s);
        rng
    };
    let mut batch_rng = stream(STREAM_BATCH);
    let mut alpha_rng = stream(STREAM_ALPHA);
    let mut dropout_rng = stream(STREAM_DROPOUT);

    let mut history = Vec::with_capacity(config.max_iterations);
    let mut val_log = Vec::new();
    let mut best: Option<(ValidationRecord, ModelParams<f32>)> = None;
    let interval = config.validation_interval();

    for iter in 0..config.max_iterations {
        let picked: Vec<SliceSample> = (0..config.batch_size)
            .map(|_| {
                let s = &train_samples[batch_rng.random_range(0..train_samples.len())];
                augment(s, &mut batch_rng, &config.augment)
            })
            .collect();
        let (batch, scribble) = build_batch(&picked, config.input_size, model.num_classes)?;
        let alpha = sample_alpha(&mut alpha_rng, config.alpha_mode, config.alpha_fixed)?;
        let out = forward(&params, &batch, Mode::Train, &mut dropout_rng)?;
        let (loss, diag) = supervision_loss(config.supervision, &out.y1, &out.y2, &scribble, alpha, &weights)?;
        let lr = poly_lr(config.base_lr, iter, config.max_iterations, config.poly_power);
        history.push(HistoryRecord::new(iter, lr, &diag));
        if !diag.total.is_finite() {
            if let Some(o) = output {
                write_history(&o.history_path(), &history)?;
            }
            return Err(Error::Numerical(format!("non-finite loss at iteration {iter}")));
        }
        let grads = backward(&params, &out, Some(&loss.grad_y1), Some(&loss.grad_y2))?;
        drop(out);
        if let Err(e) = sgd_step(&mut params, &grads, &mut state, lr, config.momentum, config.weight_decay) {
            if let Some(o) = output {
                write_history(&o.history_path(), &history)?;
            }
            return Err(e);
        }
        if iter % 50 == 0 {
            debug!("iter {iter} lr {lr:.5} loss {:.4} (scribble {:.4}, aux {:.4})", diag.total, diag.scribble, diag.aux);
        }
        let done = iter + 1;
        if !validation.is_empty() && (done % interval == 0 || done == config.max_iterations) {
            let mean_dsc = validation_dsc(&params, validation, config.eval_decoder, config.input_size)?;
            let rec = ValidationRecord { iter: done, mean_dsc };
            info!("iter {done}: validation mean DSC {mean_dsc:.4}");
            val_log.push(rec);
            if best.as_ref().is_none_or(|(b, _)| mean_dsc > b.mean_dsc) {
                if let Some(o) = output {
                    save_checkpoint(&o.best_checkpoint(), &params, done, &o.config_hash)?;
                }
                best = Some((rec, params.clone()));
            }
        }
    }

    if let Some(o) = output {
        write_history(&o.history_path(), &history)?;
        save_checkpoint(&o.final_checkpoint(), &params, config.max_iterations, &o.config_hash)?;
    }
    Ok(TrainOutcome {
        final_params: params,
        best,
        history,
        validation: val_log,
    })
}

fn pick<'a, F>(pair: &'a (SoftPrediction<F>, SoftPrediction<F>), decoder: DecoderChoice) -> &'a SoftPrediction<F> {
    match decoder {
        DecoderChoice::Main => &pair.0,
        DecoderChoice::Aux => &pair.1,
    }
}

/// Segments a volume slice by slice and restores the original in-plane size.
pub fn infer_volume(
    params: &ModelParams<f32>,
    volume: &ImageVolume,
    decoder: DecoderChoice,
    input_size: usize,
) -> Result<Array3<u8>> {
    let config = &params.config;
    if config.in_channels != 1 {
        return Err(Error::validation("inference expects a single-channel model"));
    }
    if input_size == 0 || input_size % config.size_multiple() != 0 {
        return Err(Error::validation(format!(
            "input_size {input_size} is not a positive multiple of {}",
            config.size_multiple()
        )));
    }
    volume.validate()?;
    let (depth, h, w) = volume.shape();
    let mut out = Array3::zeros((depth, h, w));
    const CHUNK: usize = 8;
    let hw = input_size * input_size;
    for start in (0..depth).step_by(CHUNK) {
        let end = (start + CHUNK).min(depth);
        let mut data = Vec::with_capacity((end - start) * hw);
        for z in start..end {
            let slice = normalize_slice(volume.voxels.index_axis(Axis(0), z));
            let resized = if slice.dim() == (input_size, input_size) {
                slice
            } else {
                crate::data::resize_bilinear(slice.view(), (input_size, input_size))
            };
            data.extend(resized.iter().copied());
        }
        let batch = Batch::new(data, end - start, 1, input_size, input_size)?;
        let preds = predict(params, &batch)?;
        let labels = pick(&preds, decoder).argmax();
        for (i, z) in (start..end).enumerate() {
            let small = ndarray::ArrayView2::from_shape((input_size, input_size), &labels[i * hw..(i + 1) * hw])
                .expect("argmax length matches batch");
            let restored = if (h, w) == (input_size, input_size) {
                small.to_owned()
            } else {
                crate::data::resize_nearest(small, (h, w))
            };
            out.index_axis_mut(Axis(0), z).assign(&restored);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SynthSpec};

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0.03, 0, 100, 0.9), 0.03);
        assert_eq!(poly_lr(0.03, 100, 100, 0.9), 0.0);
        assert!((poly_lr(0.03, 50, 100, 0.9) - 0.03 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((poly_lr(0.03, 50, 100, 0.9) - 0.016077).abs() < 1e-6);
        let mut prev = f64::INFINITY;
        for it in 0..=100 {
            let lr = poly_lr(0.03, it, 100, 0.9);
            assert!(lr < prev);
            prev = lr;
        }
    }

    fn tiny_params() -> ModelParams<f64> {
        let config = ModelConfig {
            levels: 2,
            base_width: 2,
            ..ModelConfig::default()
        };
        init_params(&config, 5).unwrap()
    }

    #[test]
    fn sgd_zero_grads_decays_velocity() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut state = OptimState::new(&p);
        for t in state.velocity.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let grads = p.zeros_like();
        sgd_step(&mut p, &grads, &mut state, 0.0, 0.9, 0.0).unwrap();
        assert_eq!(p, before);
        assert!(state.velocity.named_tensors().iter().all(|(_, t)| t.data.iter().all(|&v| v == 0.9)));
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn sgd_weight_decay_alone_shrinks_weights() {
        let mut p = tiny_params();
        let before = p.clone();
        let mut state = OptimState::new(&p);
        let zeros = p.zeros_like();
        sgd_step(&mut p, &zeros, &mut state, 0.1, 0.9, 0.01).unwrap();
        for ((_, a), (_, b)) in p.named_tensors().iter().zip(before.named_tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sgd_hand_example() {
        let mut p = tiny_params();
        for t in p.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut grads = p.zeros_like();
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let mut state = OptimState::new(&p);
        sgd_step(&mut p, &grads, &mut state, 0.1, 0.9, 1e-4).unwrap();
        let (_, w) = &p.named_tensors()[0];
        let (_, v) = &state.velocity.named_tensors()[0];
        assert!((v.data[0] - 1.0001).abs() < 1e-12);
        assert!((w.data[0] - 0.89999).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let mut p = tiny_params();
        let mut grads = p.zeros_like();
        grads.tensors_mut()[3].data[0] = f64::NAN;
        let mut state = OptimState::new(&p);
        let err = sgd_step(&mut p, &grads, &mut state, 0.1, 0.9, 0.0).unwrap_err();
        let name = grads.named_tensors()[3].0.clone();
        assert!(err.to_string().contains(&name), "{err}");
    }

    fn tiny_setup() -> (TrainConfig, ModelConfig, Vec<SliceSample>, Vec<ValidationVolume>) {
        let frames = generate_dataset(&SynthSpec::new(2, [3, 32, 32], 4)).unwrap();
        let samples: Vec<SliceSample> = frames
            .iter()
            .flat_map(|f| f.slices().unwrap())
            .map(SliceSample::without_dense)
            .collect();
        let val = vec![ValidationVolume {
            image: frames[0].image.clone(),
            label: frames[0].dense.as_ref().unwrap().labels.clone(),
        }];
        let config = TrainConfig {
            batch_size: 2,
            max_iterations: 6,
            input_size: 32,
            ..TrainConfig::default()
        };
        let model = ModelConfig {
            levels: 2,
            base_width: 4,
            ..ModelConfig::default()
        };
        (config, model, samples, val)
    }

    #[test]
    fn zero_iterations_returns_initial_params() {
        let (mut config, model, samples, _) = tiny_setup();
        config.max_iterations = 0;
        let out = train(&config, &model, &samples, &[], None).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(out.final_params, init_params::<f32>(&model, config.seed).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_decomposes() {
        let (config, model, samples, val) = tiny_setup();
        let a = train(&config, &model, &samples, &val, None).unwrap();
        let b = train(&config, &model, &samples, &val, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.history.len(), 6);
        assert_eq!(a.validation.len(), 6);
        for r in &a.history {
            assert!((r.loss_total - (r.loss_scribble + 0.5 * r.loss_aux)).abs() < 1e-6);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_ALPHA);
        for r in &a.history {
            assert_eq!(r.alpha, sample_alpha(&mut rng, AlphaMode::Random, 0.0).unwrap().value());
        }
    }

    #[test]
    fn fixed_alpha_is_logged() {
        let (mut config, model, samples, _) = tiny_setup();
        config.alpha_mode = AlphaMode::Fixed;
        config.alpha_fixed = 0.5;
        config.max_iterations = 3;
        let out = train(&config, &model, &samples, &[], None).unwrap();
        assert!(out.history.iter().all(|r| r.alpha == 0.5));
    }

    #[test]
    fn lambda_zero_matches_scribble_only_training() {
        let (mut config, model, samples, _) = tiny_setup();
        config.max_iterations = 4;
        config.lambda_pls = 0.0;
        let pls = train(&config, &model, &samples, &[], None).unwrap();
        config.supervision = Supervision::Pce;
        let pce = train(&config, &model, &samples, &[], None).unwrap();
        assert_eq!(pls.final_params, pce.final_params);
    }

    #[test]
    fn alpha_stream_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(TrainConfig::default().seed);
        rng.set_stream(STREAM_ALPHA);
        let mut draws: Vec<f64> = (0..2000)
            .map(|_| sample_alpha(&mut rng, AlphaMode::Random, 0.0).unwrap().value())
            .collect();
        draws.sort_by(f64::total_cmp);
        let n = draws.len() as f64;
        let ks = draws
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.05, "KS statistic {ks}");
    }

    #[test]
    fn writes_history_and_checkpoints() {
        let (mut config, model, samples, val) = tiny_setup();
        config.max_iterations = 2;
        let dir = tempfile::tempdir().unwrap();
        let output = TrainOutput {
            dir: dir.path().join("run"),
            config_hash: "abc".into(),
        };
        let out = train(&config, &model, &samples, &val, Some(&output)).unwrap();
        let text = fs::read_to_string(output.history_path()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["iter", "lr", "alpha", "loss_total", "loss_scribble", "loss_aux"] {
            assert!(rec.get(key).is_some(), "missing {key}");
        }
        let (loaded, manifest) = crate::model::load_checkpoint(&output.final_checkpoint()).unwrap();
        assert_eq!(loaded, out.final_params);
        assert_eq!(manifest.config_hash, "abc");
        assert!(output.best_checkpoint().join("manifest.json").exists());
    }

    #[test]
    fn inference_shapes_and_degenerate_model() {
        let (_, model, _, val) = tiny_setup();
        let params = init_params::<f32>(&model, 1).unwrap();
        let image = &val[0].image;
        for decoder in [DecoderChoice::Main, DecoderChoice::Aux] {
            let pred = infer_volume(&params, image, decoder, 16).unwrap();
            assert_eq!(pred.dim(), image.shape());
            assert!(pred.iter().all(|&v| (v as usize) < model.num_classes));
        }
        let mut zero = params.clone();
        for t in zero.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let pred = infer_volume(&zero, image, DecoderChoice::Main, 16).unwrap();
        assert!(pred.iter().all(|&v| v == 0));
        assert!(infer_volume(&params, image, DecoderChoice::Main, 9).is_err());
    }
}

//! Supervision signals for the dual-branch network.
//!
//! Every loss returns its value together with the gradient w.r.t. the
//! probability maps it consumes; [`crate::model::backward`] maps those to
//! parameter gradients. Pseudo labels are plain integer maps and therefore
//! never carry gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ScribbleMask, UNLABELED};
use crate::error::{Error, Result};
use crate::model::{Scalar, SoftPrediction};

/// Floor applied inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Hard per-pixel labels `[batch, height*width]`, always a valid class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabel {
    pub labels: Vec<u8>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl PseudoLabel {
    pub fn from_argmax<F: Scalar>(y: &SoftPrediction<F>) -> Self {
        PseudoLabel {
            labels: y.argmax(),
            batch: y.batch,
            height: y.height,
            width: y.width,
        }
    }
}

/// Mixing weight of the main decoder, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct MixCoefficient(f64);

impl MixCoefficient {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(MixCoefficient(alpha))
        } else {
            Err(Error::validation(format!("mix coefficient {alpha} outside (0, 1)")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaMode {
    Random,
    Fixed,
}

/// Draws a fresh uniform value in `(0, 1)` or returns the fixed one.
pub fn sample_alpha<R: Rng + ?Sized>(rng: &mut R, mode: AlphaMode, fixed_value: f64) -> Result<MixCoefficient> {
    match mode {
        AlphaMode::Fixed => MixCoefficient::new(fixed_value),
        AlphaMode::Random => loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                return MixCoefficient::new(u);
            }
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Weight of the pseudo-label (or ablation) term.
    pub lambda_pls: f64,
    pub epsilon_dice: f64,
    pub dice_include_background: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pls: 0.5,
            epsilon_dice: 1e-5,
            dice_include_background: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pls >= 0.0 && self.lambda_pls.is_finite()) {
            return Err(Error::validation(format!("lambda {} must be finite and >= 0", self.lambda_pls)));
        }
        if !(self.epsilon_dice > 0.0 && self.epsilon_dice.is_finite()) {
            return Err(Error::validation("dice epsilon must be finite and > 0"));
        }
        Ok(())
    }
}

/// Loss on one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss<F> {
    pub value: F,
    pub grad: Vec<F>,
}

/// Loss on both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss<F> {
    pub value: F,
    pub grad_y1: Vec<F>,
    pub grad_y2: Vec<F>,
}

impl<F: Scalar> PairLoss<F> {
    fn zero(len: usize) -> Self {
        PairLoss {
            value: F::zero(),
            grad_y1: vec![F::zero(); len],
            grad_y2: vec![F::zero(); len],
        }
    }

    /// `self + weight * other`.
    pub fn add_scaled(mut self, other: &PairLoss<F>, weight: F) -> Self {
        self.value = self.value + weight * other.value;
        for (a, &b) in self.grad_y1.iter_mut().zip(&other.grad_y1) {
            *a = *a + weight * b;
        }
        for (a, &b) in self.grad_y2.iter_mut().zip(&other.grad_y2) {
            *a = *a + weight * b;
        }
        self
    }

    /// Halves each loss and pairs them as `(y1, y2)`.
    pub fn average(a: Loss<F>, b: Loss<F>) -> Self {
        let half = F::from(0.5).expect("constant");
        PairLoss {
            value: half * (a.value + b.value),
            grad_y1: a.grad.into_iter().map(|g| half * g).collect(),
            grad_y2: b.grad.into_iter().map(|g| half * g).collect(),
        }
    }
}

fn check_pair<F: Scalar>(y1: &SoftPrediction<F>, y2: &SoftPrediction<F>) -> Result<()> {
    if !y1.same_shape(y2) {
        return Err(Error::validation("the two predictions differ in shape"));
    }
    Ok(())
}

fn check_target<F: Scalar>(y: &SoftPrediction<F>, batch: usize, height: usize, width: usize) -> Result<()> {
    if (y.batch, y.height, y.width) != (batch, height, width) {
        return Err(Error::validation(format!(
            "prediction [{}, {}, {}] and target [{batch}, {height}, {width}] differ in shape",
            y.batch, y.height, y.width
        )));
    }
    Ok(())
}

/// Cross-entropy averaged over scribbled pixels only; zero when nothing is scribbled.
/// `s.labels` is `[batch, height, width]`.
pub fn partial_cross_entropy<F: Scalar>(y: &SoftPrediction<F>, s: &ScribbleMask) -> Result<Loss<F>> {
    let (b, h, w) = s.labels.dim();
    check_target(y, b, h, w)?;
    let hw = h * w;
    let floor = F::from(PROB_FLOOR).expect("constant");
    let mut grad = vec![F::zero(); y.probs.len()];
    let mut total = F::zero();
    let mut count = 0usize;
    for (idx, &label) in s.labels.iter().enumerate() {
        if label == UNLABELED {
            continue;
        }
        if label as usize >= y.classes {
            return Err(Error::validation(format!(
                "scribble label {label} is not a class id below {}",
                y.classes
            )));
        }
        let (bi, p) = (idx / hw, idx % hw);
        let j = y.index(bi, label as usize, p);
        let prob = y.probs[j];
        total = total - prob.max(floor).ln();
        if prob > floor {
            grad[j] = -F::one() / prob;
        }
        count += 1;
    }
    if count == 0 {
        return Ok(Loss {
            value: F::zero(),
            grad,
        });
    }
    let n = F::from(count).expect("count");
    grad.iter_mut().for_each(|g| *g = *g / n);
    Ok(Loss { value: total / n, grad })
}

/// Soft Dice against a hard target, `1 - (2I + eps) / (P + T + eps)` per class,
/// averaged over classes. Sums run over every pixel of the batch.
pub fn dice_loss<F: Scalar>(y: &SoftPrediction<F>, target: &PseudoLabel, weights: &LossWeights) -> Result<Loss<F>> {
    check_target(y, target.batch, target.height, target.width)?;
    let hw = y.hw();
    let classes = y.classes;
    if target.labels.iter().any(|&l| l as usize >= classes) {
        return Err(Error::validation("pseudo label outside the class range"));
    }
    let eps = F::from(weights.epsilon_dice).expect("finite");
    let two = F::from(2.0).expect("constant");
    let first = if weights.dice_include_background { 0 } else { 1 };
    let counted = F::from(classes - first).expect("count");
    let mut grad = vec![F::zero(); y.probs.len()];
    let mut value = F::zero();
    for c in first..classes {
        let mut inter = F::zero();
        let mut pred_sum = F::zero();
        let mut target_sum = F::zero();
        for b in 0..y.batch {
            for p in 0..hw {
                let prob = y.get(b, c, p);
                pred_sum = pred_sum + prob;
                if target.labels[b * hw + p] as usize == c {
                    inter = inter + prob;
                    target_sum = target_sum + F::one();
                }
            }
        }
        let num = two * inter + eps;
        let den = pred_sum + target_sum + eps;
        value = value + (F::one() - num / den);
        // d/dy_i of -(num/den) = -(2 t_i den - num) / den^2
        let den2 = den * den;
        for b in 0..y.batch {
            for p in 0..hw {
                let t = if target.labels[b * hw + p] as usize == c { two } else { F::zero() };
                grad[y.index(b, c, p)] = -(t * den - num) / den2 / counted;
            }
        }
    }
    Ok(Loss {
        value: value / counted,
        grad,
    })
}

/// `argmax(alpha * y1 + (1 - alpha) * y2)` per pixel, ties to the lowest class.
pub fn mix_pseudo_label<F: Scalar>(
    y1: &SoftPrediction<F>,
    y2: &SoftPrediction<F>,
    alpha: MixCoefficient,
) -> Result<PseudoLabel> {
    check_pair(y1, y2)?;
    let a = F::from(alpha.value()).expect("finite");
    let b = F::one() - a;
    let hw = y1.hw();
    let mut labels = vec![0u8; y1.pixels()];
    for bi in 0..y1.batch {
        for p in 0..hw {
            let mut best = 0usize;
            let mut best_v = a * y1.get(bi, 0, p) + b * y2.get(bi, 0, p);
            for c in 1..y1.classes {
                let v = a * y1.get(bi, c, p) + b * y2.get(bi, c, p);
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            labels[bi * hw + p] = best as u8;
        }
    }
    Ok(PseudoLabel {
        labels,
        batch: y1.batch,
        height: y1.height,
        width: y1.width,
    })
}

/// Dice of each head against the shared pseudo label, averaged.
pub fn pls_loss<F: Scalar>(
    pl: &PseudoLabel,
    y1: &SoftPrediction<F>,
    y2: &SoftPrediction<F>,
    weights: &LossWeights,
) -> Result<PairLoss<F>> {
    check_pair(y1, y2)?;
    Ok(PairLoss::average(dice_loss(y1, pl, weights)?, dice_loss(y2, pl, weights)?))
}

/// Mean squared difference of the two probability maps.
pub fn cr_loss<F: Scalar>(y1: &SoftPrediction<F>, y2: &SoftPrediction<F>) -> Result<PairLoss<F>> {
    check_pair(y1, y2)?;
    let n = F::from(y1.probs.len()).expect("count");
    let two = F::from(2.0).expect("constant");
    let mut value = F::zero();
    let mut grad_y1 = Vec::with_capacity(y1.probs.len());
    for (&a, &b) in y1.probs.iter().zip(&y2.probs) {
        let d = a - b;
        value = value + d * d;
        grad_y1.push(two * d / n);
    }
    let grad_y2 = grad_y1.iter().map(|&g| -g).collect();
    Ok(PairLoss {
        value: value / n,
        grad_y1,
        grad_y2,
    })
}

/// Each head is supervised by the other's detached argmax.
pub fn cps_loss<F: Scalar>(y1: &SoftPrediction<F>, y2: &SoftPrediction<F>, weights: &LossWeights) -> Result<PairLoss<F>> {
    check_pair(y1, y2)?;
    let from_y2 = PseudoLabel::from_argmax(y2);
    let from_y1 = PseudoLabel::from_argmax(y1);
    Ok(PairLoss::average(dice_loss(y1, &from_y2, weights)?, dice_loss(y2, &from_y1, weights)?))
}

/// Supervision strategy for the dual-branch network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    /// Scribbles only.
    Pce,
    /// Scribbles plus output consistency.
    Cr,
    /// Scribbles plus cross pseudo supervision.
    Cps,
    /// Scribbles plus dynamically mixed pseudo labels.
    Pls,
}

impl Supervision {
    pub fn name(self) -> &'static str {
        match self {
            Supervision::Pce => "pce",
            Supervision::Cr => "cr",
            Supervision::Cps => "cps",
            Supervision::Pls => "pls",
        }
    }
}

impl std::str::FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pce" => Ok(Supervision::Pce),
            "cr" => Ok(Supervision::Cr),
            "cps" => Ok(Supervision::Cps),
            "pls" => Ok(Supervision::Pls),
            other => Err(Error::validation(format!("unknown supervision strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossDiagnostics {
    pub total: f64,
    pub scribble: f64,
    /// Unweighted auxiliary term; `total = scribble + lambda * aux`.
    pub aux: f64,
    pub alpha: f64,
}

fn scribble_term<F: Scalar>(y1: &SoftPrediction<F>, y2: &SoftPrediction<F>, s: &ScribbleMask) -> Result<PairLoss<F>> {
    Ok(PairLoss::average(partial_cross_entropy(y1, s)?, partial_cross_entropy(y2, s)?))
}

/// Scribble term plus the strategy's auxiliary term weighted by `lambda_pls`.
pub fn supervision_loss<F: Scalar>(
    strategy: Supervision,
    y1: &SoftPrediction<F>,
    y2: &SoftPrediction<F>,
    s: &ScribbleMask,
    alpha: MixCoefficient,
    weights: &LossWeights,
) -> Result<(PairLoss<F>, LossDiagnostics)> {
    check_pair(y1, y2)?;
    weights.validate()?;
    let scribble = scribble_term(y1, y2, s)?;
    let aux = match strategy {
        Supervision::Pce => PairLoss::zero(y1.probs.len()),
        Supervision::Pls => pls_loss(&mix_pseudo_label(y1, y2, alpha)?, y1, y2, weights)?,
        Supervision::Cps => cps_loss(y1, y2, weights)?,
        Supervision::Cr => cr_loss(y1, y2)?,
    };
    let lambda = F::from(weights.lambda_pls).expect("finite");
    let diagnostics = LossDiagnostics {
        total: 0.0,
        scribble: scribble.value.to_f64().unwrap_or(f64::NAN),
        aux: aux.value.to_f64().unwrap_or(f64::NAN),
        alpha: alpha.value(),
    };
    let total = scribble.add_scaled(&aux, lambda);
    let diagnostics = LossDiagnostics {
        total: total.value.to_f64().unwrap_or(f64::NAN),
        ..diagnostics
    };
    Ok((total, diagnostics))
}

/// The joint objective: scribble supervision plus `lambda` times pseudo-label supervision.
pub fn total_loss<F: Scalar>(
    y1: &SoftPrediction<F>,
    y2: &SoftPrediction<F>,
    s: &ScribbleMask,
    alpha: MixCoefficient,
    weights: &LossWeights,
) -> Result<(PairLoss<F>, LossDiagnostics)> {
    supervision_loss(Supervision::Pls, y1, y2, s, alpha, weights)
}

//! Binary cross-entropy plus soft Dice, on probabilities (for reporting) and
//! on logits (for training, with the analytic gradient).

use crate::error::{Error, Result};
use crate::network::{sigmoid, Real};

/// Smoothing term in the soft Dice denominator.
pub const DICE_EPS: f64 = 1e-5;
/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` inside the log.
pub const PROB_CLIP: f64 = 1e-7;

/// Mean pixel BCE plus `1 - 2Σpg / (Σp + Σg + ε)`.
pub fn partial_loss(prob: &[f64], gt: &[u8]) -> Result<f64> {
    check(prob.len(), gt)?;
    let n = prob.len() as f64;
    let mut bce = 0.0;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in prob.iter().zip(gt) {
        let g = f64::from(g);
        let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        bce -= g * pc.ln() + (1.0 - g) * (1.0 - pc).ln();
        inter += p * g;
        sp += p;
        sg += g;
    }
    Ok(bce / n + 1.0 - 2.0 * inter / (sp + sg + DICE_EPS))
}

/// BCE term alone (mean over pixels).
pub fn bce(prob: &[f64], gt: &[u8]) -> Result<f64> {
    check(prob.len(), gt)?;
    let total: f64 = prob
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let g = f64::from(g);
            let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(g * pc.ln() + (1.0 - g) * (1.0 - pc).ln())
        })
        .sum();
    Ok(total / prob.len() as f64)
}

/// Same loss evaluated from logits (numerically stable BCE, no clipping).
/// Returns the loss and `d loss / d logits`.
pub fn loss_from_logits<T: Real>(logits: &[T], gt: &[u8]) -> Result<(T, Vec<T>)> {
    check(logits.len(), gt)?;
    let n = T::from_usize(logits.len()).expect("pixel count");
    let eps = T::lit(DICE_EPS);
    let two = T::lit(2.0);
    let probs: Vec<T> = logits.iter().map(|&z| sigmoid(z)).collect();

    let mut bce = T::zero();
    let (mut inter, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
    for ((&z, &p), &g) in logits.iter().zip(&probs).zip(gt) {
        let gv = if g == 1 { T::one() } else { T::zero() };
        // softplus(z) - g z
        bce += z.max(T::zero()) - gv * z + (-z.abs()).exp().ln_1p();
        inter += p * gv;
        sp += p;
        sg += gv;
    }
    let denom = sp + sg + eps;
    let loss = bce / n + T::one() - two * inter / denom;

    let dice_common = two * inter / (denom * denom);
    let grad = probs
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let gv = if g == 1 { T::one() } else { T::zero() };
            let d_bce = (p - gv) / n;
            let d_dice_dp = dice_common - two * gv / denom;
            d_bce + d_dice_dp * p * (T::one() - p)
        })
        .collect();
    Ok((loss, grad))
}

fn check(n: usize, gt: &[u8]) -> Result<()> {
    if n != gt.len() {
        return Err(Error::Shape(format!(
            "prediction has {n} pixels, mask has {}",
            gt.len()
        )));
    }
    if n == 0 {
        return Err(Error::Shape("empty prediction".into()));
    }
    if gt.iter().any(|&g| g > 1) {
        return Err(Error::Shape("ground-truth mask is not binary".into()));
    }
    Ok(())
}

//! The composite training objective: soft multi-class Dice plus
//! cross-entropy over the segmentation logits, and a binary cross-entropy
//! attention term weighted by lambda.
//!
//! Dice statistics are summed per class across the whole batch (not
//! averaged per sample), and the sum runs over the three foreground classes
//! only. An absent class therefore contributes eps/eps = 1 to the Dice sum,
//! i.e. no loss — which is also why clinically absent enhancing tumour is
//! "free" at evaluation time.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::domain::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{El, Feat};

/// Batched voxel labels, shape (batch, d, h, w), values in {0,1,2,3}.
pub type LabelBatch = Array4<u8>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_attn: f64,
    pub dice_epsilon: f64,
    pub seg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_attn: 0.1, dice_epsilon: 1e-5, seg_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_attn < 0.0 {
            return Err(Error::Config("lambda_attn must be >= 0".into()));
        }
        if self.dice_epsilon <= 0.0 {
            return Err(Error::Config("dice_epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-step loss components. `total = seg_weight*(seg_dice + seg_ce)
/// + lambda_attn*attn_bce`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub seg_dice: f64,
    pub seg_ce: f64,
    pub attn_bce: f64,
}

fn check_seg_shapes<T: El>(logits_or_probs: &Feat<T>, target: &LabelBatch) -> Result<()> {
    let (n, c, d, h, w) = logits_or_probs.dim();
    if c != NUM_CLASSES {
        return Err(Error::shape(format!("expected {NUM_CLASSES} class channels, got {c}")));
    }
    if target.dim() != (n, d, h, w) {
        return Err(Error::shape(format!(
            "target shape {:?} does not match prediction grid {:?}",
            target.dim(),
            (n, d, h, w)
        )));
    }
    Ok(())
}

/// Numerically stable softmax over the channel axis.
pub fn softmax<T: El>(logits: &Feat<T>) -> Feat<T> {
    let (n, c, d, h, w) = logits.dim();
    let dhw = d * h * w;
    let mut probs = logits.clone();
    let s = probs.as_slice_mut().unwrap();
    for ni in 0..n {
        let base = ni * c * dhw;
        for v in 0..dhw {
            let mut maxv = s[base + v];
            for ci in 1..c {
                let val = s[base + ci * dhw + v];
                if val > maxv {
                    maxv = val;
                }
            }
            let mut sum = T::zero();
            for ci in 0..c {
                let e = (s[base + ci * dhw + v] - maxv).exp();
                s[base + ci * dhw + v] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for ci in 0..c {
                s[base + ci * dhw + v] = s[base + ci * dhw + v] * inv;
            }
        }
    }
    probs
}

/// Soft multi-class Dice loss over softmax probabilities:
/// 1 - (1/3) * sum_{c in 1..3} (2*sum p*t + eps) / (sum p + sum t + eps).
pub fn dice_loss<T: El>(probs: &Feat<T>, target: &LabelBatch, eps: f64) -> Result<f64> {
    check_seg_shapes(probs, target)?;
    let (n, c, d, h, w) = probs.dim();
    let dhw = d * h * w;
    // probabilities must sum to one per voxel
    let ps = probs.as_slice().unwrap();
    for ni in 0..n {
        let base = ni * c * dhw;
        for v in 0..dhw {
            let mut sum = 0.0f64;
            for ci in 0..c {
                sum += ps[base + ci * dhw + v].as_f64();
            }
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::validation(format!(
                    "probabilities sum to {sum} at voxel {v}; expected 1"
                )));
            }
        }
    }
    let (inter, psum, tsum) = dice_sums(probs, target);
    let mut dice_sum = 0.0;
    for cf in 0..3 {
        let num = 2.0 * inter[cf] + eps;
        let den = psum[cf] + tsum[cf] + eps;
        dice_sum += num / den;
    }
    Ok(1.0 - dice_sum / 3.0)
}

/// Per-foreground-class sums of p*t, p, and t across the whole batch.
fn dice_sums<T: El>(probs: &Feat<T>, target: &LabelBatch) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let (n, c, d, h, w) = probs.dim();
    let dhw = d * h * w;
    let ps = probs.as_slice().unwrap();
    let ts = target.as_slice().unwrap();
    let mut inter = [0.0f64; 3];
    let mut psum = [0.0f64; 3];
    let mut tsum = [0.0f64; 3];
    for ni in 0..n {
        let base = ni * c * dhw;
        let tbase = ni * dhw;
        for cf in 0..3usize {
            let ci = cf + 1;
            let pchan = &ps[base + ci * dhw..base + (ci + 1) * dhw];
            let tchan = &ts[tbase..tbase + dhw];
            let mut i_acc = 0.0f64;
            let mut p_acc = 0.0f64;
            for v in 0..dhw {
                let p = pchan[v].as_f64();
                p_acc += p;
                if tchan[v] as usize == ci {
                    i_acc += p;
                    tsum[cf] += 1.0;
                }
            }
            inter[cf] += i_acc;
            psum[cf] += p_acc;
        }
    }
    (inter, psum, tsum)
}

/// Mean over voxels of -log softmax at the target class.
pub fn cross_entropy_loss<T: El>(seg_logits: &Feat<T>, target: &LabelBatch) -> Result<f64> {
    check_seg_shapes(seg_logits, target)?;
    let (n, c, d, h, w) = seg_logits.dim();
    let dhw = d * h * w;
    let s = seg_logits.as_slice().unwrap();
    let ts = target.as_slice().unwrap();
    let mut acc = 0.0f64;
    for ni in 0..n {
        let base = ni * c * dhw;
        for v in 0..dhw {
            let mut maxv = s[base + v].as_f64();
            for ci in 1..c {
                maxv = maxv.max(s[base + ci * dhw + v].as_f64());
            }
            let mut lse = 0.0f64;
            for ci in 0..c {
                lse += (s[base + ci * dhw + v].as_f64() - maxv).exp();
            }
            let lse = lse.ln() + maxv;
            let t = ts[ni * dhw + v] as usize;
            acc += lse - s[base + t * dhw + v].as_f64();
        }
    }
    Ok(acc / (n * dhw) as f64)
}

/// Mean over the three sub-region channels of the voxel-mean binary
/// cross-entropy between attention logits and the binary mask
/// 1[target == i+1], computed in logit space.
pub fn attention_loss<T: El>(attn_logits: &Feat<T>, target: &LabelBatch) -> Result<f64> {
    let (n, c, d, h, w) = attn_logits.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 attention channels, got {c}")));
    }
    if target.dim() != (n, d, h, w) {
        return Err(Error::shape(format!(
            "target shape {:?} does not match attention grid {:?}",
            target.dim(),
            (n, d, h, w)
        )));
    }
    let dhw = d * h * w;
    let s = attn_logits.as_slice().unwrap();
    let ts = target.as_slice().unwrap();
    let mut acc = 0.0f64;
    for ni in 0..n {
        let base = ni * 3 * dhw;
        for i in 0..3usize {
            let chan = &s[base + i * dhw..base + (i + 1) * dhw];
            let tchan = &ts[ni * dhw..(ni + 1) * dhw];
            for v in 0..dhw {
                let z = chan[v].as_f64();
                let m = if tchan[v] as usize == i + 1 { 1.0 } else { 0.0 };
                // max(z,0) - z*m + ln(1 + exp(-|z|))
                acc += z.max(0.0) - z * m + (-z.abs()).exp().ln_1p();
            }
        }
    }
    Ok(acc / (3 * n * dhw) as f64)
}

/// Batched network output as produced by the forward pass.
pub struct Output<'a, T> {
    pub seg_logits: &'a Feat<T>,
    pub attn_logits: &'a Feat<T>,
}

/// Combined objective; softmax is applied internally for the Dice term.
pub fn total_loss<T: El>(out: Output<'_, T>, target: &LabelBatch, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let probs = softmax(out.seg_logits);
    let seg_dice = dice_loss(&probs, target, cfg.dice_epsilon)?;
    let seg_ce = cross_entropy_loss(out.seg_logits, target)?;
    let attn_bce = attention_loss(out.attn_logits, target)?;
    Ok(LossBreakdown {
        total: cfg.seg_weight * (seg_dice + seg_ce) + cfg.lambda_attn * attn_bce,
        seg_dice,
        seg_ce,
        attn_bce,
    })
}

/// Combined objective plus gradients with respect to both logit tensors.
pub fn total_loss_with_grad<T: El>(
    out: Output<'_, T>,
    target: &LabelBatch,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Feat<T>, Feat<T>)> {
    cfg.validate()?;
    let (n, c, d, h, w) = out.seg_logits.dim();
    check_seg_shapes(out.seg_logits, target)?;
    let dhw = d * h * w;
    let vtotal = (n * dhw) as f64;

    let probs = softmax(out.seg_logits);
    let seg_dice = dice_loss(&probs, target, cfg.dice_epsilon)?;
    let seg_ce = cross_entropy_loss(out.seg_logits, target)?;
    let attn_bce = attention_loss(out.attn_logits, target)?;

    // Dice gradient wrt probabilities, then through softmax; CE gradient
    // directly in logit space: (p - onehot)/V.
    let (inter, psum, tsum) = dice_sums(&probs, target);
    let mut g_p = [0.0f64; 4]; // per-class constant part of dDice/dp
    let mut g_p_t = [0.0f64; 4]; // additional part where t == 1
    for cf in 0..3 {
        let num = 2.0 * inter[cf] + cfg.dice_epsilon;
        let den = psum[cf] + tsum[cf] + cfg.dice_epsilon;
        // d/dp of -(1/3)*num/den: -(1/3)*(2t*den - num)/den^2
        g_p[cf + 1] = num / (den * den) / 3.0; // coefficient of 1 (t=0 part)
        g_p_t[cf + 1] = -(2.0 * den) / (den * den) / 3.0; // extra when t=1
    }

    let mut d_seg = Feat::<T>::zeros((n, c, d, h, w));
    {
        let ps = probs.as_slice().unwrap();
        let ts = target.as_slice().unwrap();
        let ds = d_seg.as_slice_mut().unwrap();
        let seg_w = cfg.seg_weight;
        for ni in 0..n {
            let base = ni * c * dhw;
            for v in 0..dhw {
                let t = ts[ni * dhw + v] as usize;
                // dL_dice/dp per class at this voxel
                let mut gdot = 0.0f64; // sum_j g_j p_j for softmax backprop
                let mut g = [0.0f64; 4];
                for ci in 0..c {
                    let mut gi = g_p[ci];
                    if ci == t {
                        gi += g_p_t[ci];
                    }
                    g[ci] = gi;
                    gdot += gi * ps[base + ci * dhw + v].as_f64();
                }
                for ci in 0..c {
                    let p = ps[base + ci * dhw + v].as_f64();
                    let dice_term = p * (g[ci] - gdot);
                    let ce_term = (p - if ci == t { 1.0 } else { 0.0 }) / vtotal;
                    ds[base + ci * dhw + v] = T::elem(seg_w * (dice_term + ce_term));
                }
            }
        }
    }

    let mut d_attn = Feat::<T>::zeros((n, 3, d, h, w));
    {
        let s = out.attn_logits.as_slice().unwrap();
        let ts = target.as_slice().unwrap();
        let ds = d_attn.as_slice_mut().unwrap();
        let scale = cfg.lambda_attn / (3.0 * vtotal);
        for ni in 0..n {
            let base = ni * 3 * dhw;
            for i in 0..3usize {
                for v in 0..dhw {
                    let z = s[base + i * dhw + v].as_f64();
                    let m = if ts[ni * dhw + v] as usize == i + 1 { 1.0 } else { 0.0 };
                    let sig = 1.0 / (1.0 + (-z).exp());
                    ds[base + i * dhw + v] = T::elem(scale * (sig - m));
                }
            }
        }
    }

    Ok((
        LossBreakdown {
            total: cfg.seg_weight * (seg_dice + seg_ce) + cfg.lambda_attn * attn_bce,
            seg_dice,
            seg_ce,
            attn_bce,
        },
        d_seg,
        d_attn,
    ))
}

//! Detection loss heads: the RPN multi-task loss, smooth L1, the decoupled
//! per-class mask loss, and inference-time mask post-processing.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::BoxDelta;
use crate::raster::{bilinear_resize_plane, BinaryMask};

/// Probability clamp applied inside every log loss.
pub const PROB_EPS: f64 = 1e-7;

/// One RPN mini-batch: objectness probabilities, {0,1} labels (ignores
/// already excluded), predicted and target box deltas, and the
/// normalizers of the two loss terms.
#[derive(Debug, Clone)]
pub struct RpnBatch {
    pub p: Vec<f64>,
    pub p_star: Vec<u8>,
    pub t: Vec<BoxDelta>,
    pub t_star: Vec<BoxDelta>,
    pub n_cls: usize,
    pub n_reg: usize,
    pub lambda: f64,
}

impl RpnBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.p.len();
        if self.p_star.len() != n || self.t.len() != n || self.t_star.len() != n {
            return Err(Error::ShapeMismatch("RpnBatch field lengths differ".into()));
        }
        if self.n_cls == 0 || self.n_reg == 0 {
            return Err(Error::domain("RpnBatch normalizers must be >= 1"));
        }
        if self.lambda < 0.0 {
            return Err(Error::domain("lambda must be >= 0"));
        }
        Ok(())
    }
}

/// Per-class mask logits, shape `(K, m, m)`, pre-sigmoid.
#[derive(Debug, Clone)]
pub struct MaskPrediction {
    pub logits: Array3<f64>,
}

impl MaskPrediction {
    pub fn classes(&self) -> usize {
        self.logits.dim().0
    }

    pub fn resolution(&self) -> usize {
        self.logits.dim().1
    }
}

/// Ground-truth class index plus its m×m binary mask.
#[derive(Debug, Clone)]
pub struct MaskTarget {
    pub class_index: usize,
    pub mask: Array2<bool>,
}

/// 0.5x² inside |x| < 1, |x| − 0.5 outside.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Box regression loss: smooth L1 summed over the four delta components.
pub fn l_reg(t: &BoxDelta, t_star: &BoxDelta) -> f64 {
    smooth_l1(t.tx - t_star.tx)
        + smooth_l1(t.ty - t_star.ty)
        + smooth_l1(t.tw - t_star.tw)
        + smooth_l1(t.th - t_star.th)
}

/// Binary negative log loss with probability clamping.
pub fn l_cls(p: f64, p_star: u8) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let t = p_star as f64;
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Categorical negative log likelihood over a probability vector; used by
/// the K+1-way head classification term.
pub fn l_cls_multi(probs: &[f64], class_index: usize) -> Result<f64> {
    if class_index >= probs.len() {
        return Err(Error::domain("class index out of range"));
    }
    Ok(-probs[class_index].clamp(PROB_EPS, 1.0 - PROB_EPS).ln())
}

/// The RPN loss: `(1/N_cls) Σ L_cls + λ (1/N_reg) Σ p* L_reg`.
/// Returns (total, cls term, reg term). Regression is gated on positive
/// labels only.
pub fn rpn_loss(batch: &RpnBatch) -> Result<(f64, f64, f64)> {
    batch.validate()?;
    let mut cls = 0.0;
    let mut reg = 0.0;
    for i in 0..batch.p.len() {
        cls += l_cls(batch.p[i], batch.p_star[i]);
        if batch.p_star[i] == 1 {
            reg += l_reg(&batch.t[i], &batch.t_star[i]);
        }
    }
    let cls_term = cls / batch.n_cls as f64;
    let reg_term = batch.lambda * reg / batch.n_reg as f64;
    Ok((cls_term + reg_term, cls_term, reg_term))
}

/// Numerically stable binary cross-entropy from a logit:
/// `max(z,0) − z·t + ln(1 + exp(−|z|))`. Exactly ln 2 at z = 0.
fn bce_with_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Decoupled mask loss: mean binary cross-entropy over the m×m pixels of
/// the ground-truth class channel only. Other channels do not contribute.
pub fn mask_loss(pred: &MaskPrediction, target: &MaskTarget) -> Result<f64> {
    let (k, m, m2) = pred.logits.dim();
    if target.class_index >= k {
        return Err(Error::domain("mask target class out of range"));
    }
    if target.mask.dim() != (m, m2) {
        return Err(Error::ShapeMismatch("mask target resolution differs from logits".into()));
    }
    let channel = pred.logits.index_axis(ndarray::Axis(0), target.class_index);
    let mut acc = 0.0;
    for (z, t) in channel.iter().zip(target.mask.iter()) {
        acc += bce_with_logit(*z, *t as u8 as f64);
    }
    Ok(acc / (m * m2) as f64)
}

/// Gradient of [`mask_loss`] with respect to the logits. Channels other
/// than the target class have exactly zero gradient.
pub fn mask_loss_grad(pred: &MaskPrediction, target: &MaskTarget) -> Result<Array3<f64>> {
    let (k, m, m2) = pred.logits.dim();
    if target.class_index >= k || target.mask.dim() != (m, m2) {
        return Err(Error::ShapeMismatch("mask grad shape mismatch".into()));
    }
    let mut grad = Array3::zeros((k, m, m2));
    let channel = pred.logits.index_axis(ndarray::Axis(0), target.class_index);
    let mut gch = grad.index_axis_mut(ndarray::Axis(0), target.class_index);
    let norm = (m * m2) as f64;
    for ((g, z), t) in gch.iter_mut().zip(channel.iter()).zip(target.mask.iter()) {
        let sig = 1.0 / (1.0 + (-z).exp());
        *g = (sig - *t as u8 as f64) / norm;
    }
    Ok(grad)
}

/// Inference-time mask head output: sigmoid of the predicted class
/// channel, bilinear resize to the roi size, threshold strictly above 0.5.
pub fn mask_postprocess(
    pred: &MaskPrediction,
    k_hat: usize,
    roi_w: usize,
    roi_h: usize,
) -> Result<BinaryMask> {
    if k_hat >= pred.classes() {
        return Err(Error::domain("predicted class out of range"));
    }
    if roi_w == 0 || roi_h == 0 {
        return Err(Error::domain("mask_postprocess requires positive roi dims"));
    }
    let channel = pred.logits.index_axis(ndarray::Axis(0), k_hat);
    let probs = channel.mapv(|z| 1.0 / (1.0 + (-z).exp()));
    let resized = bilinear_resize_plane(&probs, roi_h, roi_w);
    let mut mask = BinaryMask::new(roi_h, roi_w);
    for r in 0..roi_h {
        for c in 0..roi_w {
            mask.set(r, c, resized[(r, c)] > 0.5);
        }
    }
    Ok(mask)
}

/// Sum of the five Mask R-CNN loss terms.
pub fn multi_task_total(
    rpn_cls: f64,
    rpn_reg: f64,
    head_cls: f64,
    head_reg: f64,
    mask: f64,
) -> f64 {
    rpn_cls + rpn_reg + head_cls + head_reg + mask
}

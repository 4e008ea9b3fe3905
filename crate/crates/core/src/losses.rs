//! Classification and box losses with hand-derived gradients.
//!
//! The difficulty-weighted classification loss (DWCL) reweights positive
//! noisy samples by their fixed initial difficulty `1 - IoU`:
//!
//! ```text
//! alpha_l = (1 - IoU_l) / mean_l(1 - IoU_l)
//! gamma_l = beta1 * (1 - IoU_l) + beta2
//! loss_l  = -alpha_l (1 - p_l)^gamma_l ln p_l          (positive)
//!         = -(1 - alpha) p_l^gamma ln(1 - p_l)         (negative, plain focal)
//! ```
//!
//! The IoU priors are constants, so no gradient flows through the factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DwclParams {
    pub beta1: f64,
    pub beta2: f64,
    pub focal_neg: FocalParams,
}

impl Default for DwclParams {
    fn default() -> Self {
        Self {
            beta1: 1.0,
            beta2: 2.0,
            focal_neg: FocalParams::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_l1: f64,
    pub w_giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            w_l1: 5.0,
            w_giou: 2.0,
        }
    }
}

impl LossWeights {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            w_cls: self.w_cls * s,
            w_l1: self.w_l1 * s,
            w_giou: self.w_giou * s,
        }
    }
}

fn check_prob(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(p))
    }
}

/// `-alpha (1-p)^gamma ln p` and its derivative in `p`.
pub fn positive_term(p: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let q = 1.0 - p;
    let ln_p = p.ln();
    let qg = q.powf(gamma);
    let loss = -alpha * qg * ln_p;
    let dq = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) };
    let grad = alpha * (dq * ln_p - qg / p);
    (loss, grad)
}

/// `-(1-alpha) p^gamma ln(1-p)` and its derivative in `p`.
pub fn negative_term(p: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let ln_q = (1.0 - p).ln();
    let pg = p.powf(gamma);
    let loss = -(1.0 - alpha) * pg * ln_q;
    let dp = if gamma == 0.0 { 0.0 } else { gamma * p.powf(gamma - 1.0) };
    let grad = -(1.0 - alpha) * (dp * ln_q - pg / (1.0 - p));
    (loss, grad)
}

/// Binary focal loss for one (prediction, label) pair. Returns the loss and
/// `d loss / d p`.
pub fn focal_loss(p: f64, positive: bool, params: FocalParams) -> Result<(f64, f64)> {
    check_prob(p)?;
    Ok(if positive {
        positive_term(p, params.alpha, params.gamma)
    } else {
        negative_term(p, params.alpha, params.gamma)
    })
}

/// Per-sample `(alpha_l, gamma_l)` for a batch of difficulty priors.
pub fn dwcl_factors(initial_ious: &[f64], params: DwclParams) -> Result<Vec<(f64, f64)>> {
    if initial_ious.is_empty() {
        return Err(Error::Shape("dwcl_factors needs at least one sample".into()));
    }
    if let Some(bad) = initial_ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Shape(format!("initial IoU {bad} outside [0, 1]")));
    }
    let mean = initial_ious.iter().map(|v| 1.0 - v).sum::<f64>() / initial_ious.len() as f64;
    if mean <= 0.0 {
        return Err(Error::DegenerateBatch);
    }
    Ok(initial_ious
        .iter()
        .map(|v| {
            let d = 1.0 - v;
            (d / mean, params.beta1 * d + params.beta2)
        })
        .collect())
}

/// Positive-branch DWCL value with an explicit difficulty normalizer in
/// place of the batch mean. This is the single-sample parameterization used
/// when plotting the loss against `p` and `IoU`.
pub fn dwcl_positive_with_normalizer(
    p: f64,
    initial_iou: f64,
    normalizer: f64,
    params: DwclParams,
) -> Result<(f64, f64)> {
    check_prob(p)?;
    let d = 1.0 - initial_iou;
    Ok(positive_term(p, d / normalizer, params.beta1 * d + params.beta2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DwclBatch {
    pub probs: Vec<f64>,
    pub labels: Vec<bool>,
    /// Only read for positive entries.
    pub initial_ious: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DwclOutput {
    pub total: f64,
    pub per_sample: Vec<f64>,
    pub dloss_dp: Vec<f64>,
}

pub fn dwcl_loss(batch: &DwclBatch, params: DwclParams) -> Result<DwclOutput> {
    let n = batch.probs.len();
    if batch.labels.len() != n || batch.initial_ious.len() != n {
        return Err(Error::Shape(format!(
            "dwcl batch lengths differ: {} probs, {} labels, {} ious",
            n,
            batch.labels.len(),
            batch.initial_ious.len()
        )));
    }
    let pos_ious: Vec<f64> = batch
        .labels
        .iter()
        .zip(&batch.initial_ious)
        .filter(|(&y, _)| y)
        .map(|(_, &v)| v)
        .collect();
    let factors = if pos_ious.is_empty() {
        Vec::new()
    } else {
        dwcl_factors(&pos_ious, params)?
    };
    let mut factor_iter = factors.into_iter();
    let mut out = DwclOutput {
        total: 0.0,
        per_sample: Vec::with_capacity(n),
        dloss_dp: Vec::with_capacity(n),
    };
    for (&p, &y) in batch.probs.iter().zip(&batch.labels) {
        check_prob(p)?;
        let (l, g) = if y {
            let (alpha, gamma) = factor_iter.next().expect("one factor per positive");
            positive_term(p, alpha, gamma)
        } else {
            negative_term(p, params.focal_neg.alpha, params.focal_neg.gamma)
        };
        out.total += l;
        out.per_sample.push(l);
        out.dloss_dp.push(g);
    }
    Ok(out)
}

/// L1 and GIoU losses between a predicted and a target box, with gradients
/// taken with respect to the prediction's center-form `[cx, cy, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxLoss {
    pub l1: f64,
    pub giou_loss: f64,
    pub d_l1: [f64; 4],
    pub d_giou: [f64; 4],
}

pub fn box_losses(pred: &BBox, target: &BBox) -> BoxLoss {
    box_losses_cxcywh(pred.to_center_form(), target.to_center_form())
}

pub fn box_losses_cxcywh(pred: [f64; 4], target: [f64; 4]) -> BoxLoss {
    let mut l1 = 0.0;
    let mut d_l1 = [0.0; 4];
    for k in 0..4 {
        let diff = pred[k] - target[k];
        l1 += diff.abs();
        d_l1[k] = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    let (giou_loss, d_corner) = giou_loss_corners(
        BBox::from_center_form(pred).to_array(),
        BBox::from_center_form(target).to_array(),
    );
    // x1 = cx - w/2, x2 = cx + w/2 (same for y)
    let d_giou = [
        d_corner[0] + d_corner[2],
        d_corner[1] + d_corner[3],
        0.5 * (d_corner[2] - d_corner[0]),
        0.5 * (d_corner[3] - d_corner[1]),
    ];
    BoxLoss {
        l1,
        giou_loss,
        d_l1,
        d_giou,
    }
}

/// `1 - giou(a, b)` and its gradient in `a`'s corners.
fn giou_loss_corners(a: [f64; 4], b: [f64; 4]) -> (f64, [f64; 4]) {
    let [ax1, ay1, ax2, ay2] = a;
    let [bx1, by1, bx2, by2] = b;
    let (aw, ah) = (ax2 - ax1, ay2 - ay1);
    let area_a = aw * ah;
    let area_b = (bx2 - bx1) * (by2 - by1);
    let iw = ax2.min(bx2) - ax1.max(bx1);
    let ih = ay2.min(by2) - ay1.max(by1);
    let (iwp, ihp) = (iw.max(0.0), ih.max(0.0));
    let inter = iwp * ihp;
    let union = area_a + area_b - inter;
    let ew = ax2.max(bx2) - ax1.min(bx1);
    let eh = ay2.max(by2) - ay1.min(by1);
    let enc = ew * eh;
    if union <= 0.0 || enc <= 0.0 {
        return (1.0, [0.0; 4]);
    }
    let loss = 2.0 - inter / union - union / enc;

    let d_inter = -(1.0 / union + inter / (union * union)) + 1.0 / enc;
    let d_area = inter / (union * union) - 1.0 / enc;
    let d_enc = union / (enc * enc);

    let mut g = [0.0; 4];
    // area_a = (ax2 - ax1)(ay2 - ay1)
    g[0] -= d_area * ah;
    g[2] += d_area * ah;
    g[1] -= d_area * aw;
    g[3] += d_area * aw;
    // inter = iw+ * ih+
    if iw > 0.0 && ih > 0.0 {
        let (d_iw, d_ih) = (d_inter * ihp, d_inter * iwp);
        if ax2 < bx2 {
            g[2] += d_iw;
        }
        if ax1 > bx1 {
            g[0] -= d_iw;
        }
        if ay2 < by2 {
            g[3] += d_ih;
        }
        if ay1 > by1 {
            g[1] -= d_ih;
        }
    }
    // enc = ew * eh
    let (d_ew, d_eh) = (d_enc * eh, d_enc * ew);
    if ax2 > bx2 {
        g[2] += d_ew;
    }
    if ax1 < bx1 {
        g[0] -= d_ew;
    }
    if ay2 > by2 {
        g[3] += d_eh;
    }
    if ay1 < by1 {
        g[1] -= d_eh;
    }
    (loss, g)
}

/// Unweighted classification, L1 and GIoU values of one query family at one
/// supervision point (encoder output or a decoder layer).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTerms {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl LayerTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.w_cls * self.cls + w.w_l1 * self.l1 + w.w_giou * self.giou
    }
}

/// Object-query terms plus auxiliary-query terms, each weighted and summed
/// over every supervision point.
pub fn total_objective(obj_terms: &[LayerTerms], aux_terms: &[LayerTerms], weights: &LossWeights) -> f64 {
    obj_terms
        .iter()
        .chain(aux_terms)
        .map(|t| t.weighted(weights))
        .sum()
}

//! Box geometry and noisy positive-sample generation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const UNIT: BBox = BBox {
        x1: 0.0,
        y1: 0.0,
        x2: 1.0,
        y2: 1.0,
    };

    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn clamped(&self) -> Self {
        Self::new(
            self.x1.clamp(0.0, 1.0),
            self.y1.clamp(0.0, 1.0),
            self.x2.clamp(0.0, 1.0),
            self.y2.clamp(0.0, 1.0),
        )
    }

    /// `[cx, cy, w, h]`.
    pub fn to_center_form(&self) -> [f64; 4] {
        let (cx, cy) = self.center();
        [cx, cy, self.width(), self.height()]
    }

    pub fn from_center_form(c: [f64; 4]) -> Self {
        let [cx, cy, w, h] = c;
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Generalized IoU: `iou - (enclosure - union) / enclosure`.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enclosure = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if enclosure <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    inter / union - (enclosure - union) / enclosure
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Perturbed,
    Expanded,
}

/// A positive box derived from a ground truth, tagged with its fixed
/// initial IoU (the difficulty prior).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisySample {
    pub bbox: BBox,
    pub gt_index: usize,
    pub category_id: usize,
    pub initial_iou: f64,
    pub kind: NoiseKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub lambda: f64,
    pub m_perturbed: usize,
    pub m_expanded: usize,
    pub expansion_range: [f64; 2],
    pub max_rejection_resamples: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            m_perturbed: 6,
            m_expanded: 2,
            expansion_range: [1.0, 1.4],
            max_rejection_resamples: 100,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    /// Auxiliary queries generated per ground truth.
    pub fn per_target(&self) -> usize {
        self.m_perturbed + self.m_expanded
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("noise.lambda", "must be finite and >= 0"));
        }
        if self.m_perturbed == 0 {
            return Err(Error::config("noise.m_perturbed", "must be >= 1"));
        }
        let [lo, hi] = self.expansion_range;
        if !(lo >= 1.0 && lo <= hi && hi < std::f64::consts::SQRT_2) {
            return Err(Error::config(
                "noise.expansion_range",
                "must satisfy 1 <= lo <= hi < sqrt(2)",
            ));
        }
        if self.max_rejection_resamples == 0 {
            return Err(Error::config("noise.max_rejection_resamples", "must be >= 1"));
        }
        Ok(())
    }
}

/// Scales `gt` about its center by `scale`, shrinking the factor if needed
/// so the result stays inside the unit square.
pub fn expand_box(gt: &BBox, scale: f64) -> BBox {
    let (cx, cy) = gt.center();
    let (hw, hh) = (0.5 * gt.width(), 0.5 * gt.height());
    let mut s = scale;
    if hw > 0.0 {
        s = s.min(cx.min(1.0 - cx) / hw);
    }
    if hh > 0.0 {
        s = s.min(cy.min(1.0 - cy) / hh);
    }
    let s = s.max(1.0);
    BBox::new(cx - hw * s, cy - hh * s, cx + hw * s, cy + hh * s).clamped()
}

/// Noisy positives for every ground truth, in ground-truth order: first
/// `m_perturbed` corner-perturbed boxes, then `m_expanded` concentric
/// enlargements.
pub fn generate_noisy_samples<R: Rng + ?Sized>(
    gt: &[(BBox, usize)],
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<Vec<NoisySample>> {
    cfg.validate()?;
    let [lo, hi] = cfg.expansion_range;
    let scale_dist = Uniform::new_inclusive(lo, hi)
        .map_err(|e| Error::config("noise.expansion_range", e.to_string()))?;
    let mut out = Vec::with_capacity(gt.len() * cfg.per_target());
    for (gt_index, &(b, category_id)) in gt.iter().enumerate() {
        if !(b.width() > 0.0 && b.height() > 0.0) {
            return Err(Error::Shape(format!(
                "ground truth {gt_index} has non-positive area: {b:?}"
            )));
        }
        let (sx, sy) = (0.5 * b.width() * cfg.lambda, 0.5 * b.height() * cfg.lambda);
        for _ in 0..cfg.m_perturbed {
            let mut accepted = None;
            for _ in 0..cfg.max_rejection_resamples {
                let d: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
                let cand = BBox::new(
                    b.x1 + sx * d[0],
                    b.y1 + sy * d[1],
                    b.x2 + sx * d[2],
                    b.y2 + sy * d[3],
                )
                .clamped();
                if cand.x1 >= cand.x2 || cand.y1 >= cand.y2 {
                    continue;
                }
                let q = iou(&cand, &b);
                if q > 0.5 {
                    accepted = Some((cand, q));
                    break;
                }
            }
            let (bbox, initial_iou) = accepted.ok_or(Error::RejectionExhausted {
                gt_index,
                attempts: cfg.max_rejection_resamples,
            })?;
            out.push(NoisySample {
                bbox,
                gt_index,
                category_id,
                initial_iou,
                kind: NoiseKind::Perturbed,
            });
        }
        for _ in 0..cfg.m_expanded {
            let bbox = expand_box(&b, scale_dist.sample(rng));
            out.push(NoisySample {
                bbox,
                gt_index,
                category_id,
                initial_iou: iou(&bbox, &b),
                kind: NoiseKind::Expanded,
            });
        }
    }
    Ok(out)
}

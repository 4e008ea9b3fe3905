//! Loss values over a probability grid, for plotting the focal and
//! difficulty-weighted curves and the difficulty-weighted surface.
//!
//! The curve fixes the difficulty normalizer instead of taking a batch
//! mean: with `IoU = 0.5` and normalizer `0.25`, the positive weight is
//! `alpha = 2` and the focusing exponent `gamma = beta1 * 0.5 + beta2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{dwcl_positive_with_normalizer, focal_loss, DwclParams, FocalParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveParams {
    pub focal: FocalParams,
    pub dwcl: DwclParams,
    pub iou: f64,
    pub normalizer: f64,
    /// Probability grid is `k / steps` for `k = 1 .. steps - 1`.
    pub steps: usize,
    /// IoU grid of the surface is `k / iou_steps` for `k = 0 .. iou_steps - 1`.
    pub iou_steps: usize,
}

impl Default for CurveParams {
    fn default() -> Self {
        Self {
            focal: FocalParams::default(),
            dwcl: DwclParams::default(),
            iou: 0.5,
            normalizer: 0.25,
            steps: 1000,
            iou_steps: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub p: f64,
    pub focal: f64,
    pub dwcl: f64,
}

impl CurveParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 || self.iou_steps < 1 {
            return Err(Error::config("losscurve.steps", "need at least 2 probability and 1 IoU step"));
        }
        if !(0.0..1.0).contains(&self.iou) {
            return Err(Error::config("losscurve.iou", "must lie in [0, 1)"));
        }
        if !(self.normalizer > 0.0) {
            return Err(Error::config("losscurve.normalizer", "must be positive"));
        }
        Ok(())
    }

    pub fn p_grid(&self) -> Vec<f64> {
        (1..self.steps).map(|k| k as f64 / self.steps as f64).collect()
    }

    pub fn iou_grid(&self) -> Vec<f64> {
        (0..self.iou_steps).map(|k| k as f64 / self.iou_steps as f64).collect()
    }
}

pub fn curve(params: &CurveParams) -> Result<Vec<CurvePoint>> {
    params.validate()?;
    params
        .p_grid()
        .into_iter()
        .map(|p| {
            Ok(CurvePoint {
                p,
                focal: focal_loss(p, true, params.focal)?.0,
                dwcl: dwcl_positive_with_normalizer(p, params.iou, params.normalizer, params.dwcl)?.0,
            })
        })
        .collect()
}

/// `(p, IoU, loss)` triples, IoU-major.
pub fn surface(params: &CurveParams) -> Result<Vec<(f64, f64, f64)>> {
    params.validate()?;
    let mut out = Vec::new();
    for iou in params.iou_grid() {
        for p in params.p_grid() {
            out.push((p, iou, dwcl_positive_with_normalizer(p, iou, params.normalizer, params.dwcl)?.0));
        }
    }
    Ok(out)
}

pub fn curve_csv(points: &[CurvePoint], header: &str) -> String {
    let mut s = String::from(header);
    s.push_str("p,focal,dwcl\n");
    for c in points {
        s.push_str(&format!("{},{},{}\n", c.p, c.focal, c.dwcl));
    }
    s
}

pub fn surface_csv(points: &[(f64, f64, f64)], header: &str) -> String {
    let mut s = String::from(header);
    s.push_str("p,iou,loss\n");
    for (p, iou, l) in points {
        s.push_str(&format!("{p},{iou},{l}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_values_at_reference_points() {
        let pts = curve(&CurveParams::default()).unwrap();
        let at = |p: f64| pts.iter().find(|c| (c.p - p).abs() < 1e-12).copied().unwrap();
        let c = at(0.1);
        assert!((c.dwcl - 2.0 * 0.9f64.powf(2.5) * 10f64.ln()).abs() < 1e-12);
        let end = at(0.999);
        assert!(end.dwcl < 1e-4 && end.focal < 1e-4);
        assert!(pts.iter().filter(|c| c.p <= 0.5).all(|c| c.dwcl >= c.focal));
    }

    #[test]
    fn surface_decreases_in_p() {
        let params = CurveParams::default();
        let s = surface(&params).unwrap();
        let n = params.p_grid().len();
        for row in s.chunks(n) {
            for w in row.windows(2) {
                assert!(w[1].2 < w[0].2);
            }
        }
    }
}

//! Explanation serving.
//!
//! A query is mapped to its nearest location representative; the radius axis
//! is then split at the midpoints between consecutive radius representatives
//! and each interval is explained by the PLR of its representative. Every
//! function here takes the model alone: no dataset is reachable from the
//! serving path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExplanationModel, ModelScaling};
use crate::plr::PlrModel;
use crate::quantizer::nearest;

/// One radius interval `[theta_lo, theta_hi)` and the PLR that explains it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment {
    pub theta_lo: f64,
    /// `None` for the last, unbounded segment.
    pub theta_hi: Option<f64>,
    pub rr: usize,
    pub rr_value: f64,
    /// Model in scaled answer units.
    #[serde(skip)]
    pub plr: PlrModel,
}

impl Segment {
    pub fn contains(&self, theta: f64) -> bool {
        theta >= self.theta_lo && self.theta_hi.map_or(true, |hi| theta < hi)
    }
}

/// Fused piecewise-linear explanation for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationFunction {
    pub lr_index: usize,
    pub segments: Vec<Segment>,
    pub scaling: ModelScaling,
    pub version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub theta: f64,
    pub y_hat: f64,
    pub segment: usize,
    /// Rate of change of `y_hat` in the radius at this point (right derivative).
    pub slope: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub y_hat: f64,
    pub lr_index: usize,
    pub segment: usize,
    pub version: u64,
}

/// Interior boundaries between consecutive radius representatives.
pub fn segment_boundaries(rrs: &[f64]) -> Vec<f64> {
    rrs.windows(2).map(|w| w[0] + 0.5 * (w[1] - w[0]).abs()).collect()
}

/// Index of the segment active at `theta`: intervals are left-closed, so a
/// radius exactly on a boundary takes the higher segment.
pub fn segment_index(boundaries: &[f64], theta: f64) -> usize {
    boundaries.partition_point(|&b| b <= theta)
}

/// Nearest location representative under squared L2; ties go to the smaller index.
pub fn nearest_lr(model: &ExplanationModel, x: &[f64]) -> Result<usize> {
    check_dim(model, x)?;
    Ok(nearest(x, &model.locations).0)
}

fn check_dim(model: &ExplanationModel, x: &[f64]) -> Result<()> {
    if x.len() != model.dim() {
        return Err(Error::usage(format!(
            "dimension mismatch: model has {} dims, query has {}",
            model.dim(),
            x.len()
        )));
    }
    Ok(())
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::usage(format!("radius must be positive and finite, got {theta}")));
    }
    Ok(())
}

/// Explanation of the query centered at `x` (scaled coordinates).
pub fn build_explanation(model: &ExplanationModel, x: &[f64]) -> Result<ExplanationFunction> {
    let k = nearest_lr(model, x)?;
    let rrs = &model.radii[k];
    let bounds = segment_boundaries(rrs);
    let segments = rrs
        .iter()
        .enumerate()
        .map(|(l, &u)| Segment {
            theta_lo: if l == 0 { 0.0 } else { bounds[l - 1] },
            theta_hi: bounds.get(l).copied(),
            rr: l,
            rr_value: u,
            plr: model.plrs[k][l].clone(),
        })
        .collect();
    Ok(ExplanationFunction {
        lr_index: k,
        segments,
        scaling: model.scaling.clone(),
        version: model.version,
    })
}

impl ExplanationFunction {
    pub fn boundaries(&self) -> Vec<f64> {
        self.segments.iter().filter_map(|s| s.theta_hi).collect()
    }

    pub fn segment_at(&self, theta: f64) -> usize {
        // theta_hi of segment l is boundary l
        self.segments
            .partition_point(|s| s.theta_hi.is_some_and(|hi| hi <= theta))
    }

    /// Prediction in scaled answer units.
    pub fn scaled_value(&self, theta: f64) -> f64 {
        self.segments[self.segment_at(theta)].plr.predict(theta)
    }

    /// Prediction in raw answer units.
    pub fn value(&self, theta: f64) -> f64 {
        self.scaling.denormalize_answer(self.scaled_value(theta))
    }

    pub fn slope(&self, theta: f64) -> f64 {
        self.segments[self.segment_at(theta)].plr.slope(theta) * self.scaling.answer_span()
    }

    /// Evaluate the fused function on `grid`.
    pub fn sample_curve(&self, grid: &[f64]) -> Vec<CurvePoint> {
        grid.iter()
            .map(|&theta| {
                let segment = self.segment_at(theta);
                let plr = &self.segments[segment].plr;
                CurvePoint {
                    theta,
                    y_hat: self.scaling.denormalize_answer(plr.predict(theta)),
                    segment,
                    slope: plr.slope(theta) * self.scaling.answer_span(),
                }
            })
            .collect()
    }

    /// JSON export: `{lr_index, segments, curve}` with PLRs in raw answer units.
    pub fn to_export(&self, grid: &[f64]) -> ExplanationExport {
        let (lo, _) = self.scaling.answer;
        let span = self.scaling.answer_span();
        ExplanationExport {
            lr_index: self.lr_index,
            version: self.version,
            segments: self
                .segments
                .iter()
                .map(|s| SegmentExport {
                    theta_lo: s.theta_lo,
                    theta_hi: s.theta_hi,
                    rr: s.rr,
                    rr_value: s.rr_value,
                    plr: s.plr.affine(lo, span),
                })
                .collect(),
            curve: self.sample_curve(grid),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentExport {
    pub theta_lo: f64,
    pub theta_hi: Option<f64>,
    pub rr: usize,
    pub rr_value: f64,
    pub plr: PlrModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationExport {
    pub lr_index: usize,
    pub version: u64,
    pub segments: Vec<SegmentExport>,
    pub curve: Vec<CurvePoint>,
}

/// Predicted answer (raw units) for a center in scaled coordinates.
pub fn predict_answer(model: &ExplanationModel, x: &[f64], theta: f64) -> Result<Prediction> {
    check_theta(theta)?;
    let expl = build_explanation(model, x)?;
    let segment = expl.segment_at(theta);
    Ok(Prediction {
        y_hat: expl.value(theta),
        lr_index: expl.lr_index,
        segment,
        version: model.version,
    })
}

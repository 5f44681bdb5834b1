//! Points, center-radius queries and the distances defined over them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row vector in the (normalized) data space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point(Vec<f64>);

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::usage("point must have at least one coordinate"));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(Error::usage(format!("coordinate {i} is not finite")));
        }
        Ok(Point(coords))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Point {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Order of the Minkowski norm used for subspace selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormOrder {
    Finite(f64),
    Infinity,
}

impl NormOrder {
    pub const EUCLIDEAN: NormOrder = NormOrder::Finite(2.0);

    pub fn validate(self) -> Result<Self> {
        match self {
            NormOrder::Finite(p) if !(p >= 1.0 && p.is_finite()) => {
                Err(Error::usage(format!("norm order must be in [1, inf], got {p}")))
            }
            other => Ok(other),
        }
    }
}

impl Default for NormOrder {
    fn default() -> Self {
        NormOrder::EUCLIDEAN
    }
}

impl std::str::FromStr for NormOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "max" => Ok(NormOrder::Infinity),
            other => other
                .parse::<f64>()
                .map_err(|_| Error::usage(format!("invalid norm order '{s}'")))
                .and_then(|p| NormOrder::Finite(p).validate()),
        }
    }
}

/// An aggregate query: a center, a radius and optionally the observed answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub center: Point,
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<f64>,
}

impl Query {
    pub fn new(center: Point, theta: f64) -> Result<Self> {
        if !(theta > 0.0 && theta.is_finite()) {
            return Err(Error::usage(format!("radius must be positive and finite, got {theta}")));
        }
        Ok(Query {
            center,
            theta,
            answer: None,
        })
    }

    pub fn with_answer(mut self, y: f64) -> Self {
        self.answer = Some(y);
        self
    }

    pub fn dim(&self) -> usize {
        self.center.dim()
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::usage(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `L_p` distance between two equally sized vectors.
pub fn p_norm_distance(a: &[f64], b: &[f64], p: NormOrder) -> Result<f64> {
    check_dims(a, b)?;
    Ok(p_norm_unchecked(a, b, p))
}

#[inline]
pub(crate) fn p_norm_unchecked(a: &[f64], b: &[f64], p: NormOrder) -> f64 {
    let gaps = a.iter().zip(b).map(|(x, y)| (x - y).abs());
    match p {
        NormOrder::Infinity => gaps.fold(0.0, f64::max),
        NormOrder::Finite(2.0) => gaps.map(|g| g * g).sum::<f64>().sqrt(),
        NormOrder::Finite(1.0) => gaps.sum(),
        NormOrder::Finite(p) => gaps.map(|g| g.powf(p)).sum::<f64>().powf(p.recip()),
    }
}

#[inline]
pub(crate) fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Membership of `x` in the ball of radius `theta` around `center`; the boundary is included.
pub fn in_subspace(x: &[f64], center: &[f64], theta: f64, p: NormOrder) -> Result<bool> {
    check_dims(x, center)?;
    Ok(p_norm_unchecked(x, center, p) <= theta)
}

/// Squared Euclidean distance between queries embedded as `[x, theta]`.
pub fn query_similarity(q1: &Query, q2: &Query) -> Result<f64> {
    check_dims(q1.center.coords(), q2.center.coords())?;
    let dt = q1.theta - q2.theta;
    Ok(squared_euclidean(q1.center.coords(), q2.center.coords()) + dt * dt)
}

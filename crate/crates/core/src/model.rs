//! The learned model: location representatives, per-location radius
//! representatives and one piecewise-linear model per (location, radius)
//! cell, together with training counters and the scaling of the source data.

use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::dataset::{scale, unscale, AggregateKind, ScalingParams, DEFAULT_N_SUBRADII, DEFAULT_THETA_MIN};
use crate::error::{Error, Result};
use crate::geometry::NormOrder;
use crate::plr::{PlrConfig, PlrModel};
use crate::quantizer::{KMeansConfig, SelectKConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Weight of the radius distance against the prediction error when
    /// assigning a training query to a radius representative.
    pub z: f64,
    /// Learning rate of the representative updates.
    pub alpha: f64,
    /// Decay the rate as `alpha / (1 + alpha * t)`, `t` counting updates of
    /// the representative, instead of keeping it constant.
    #[serde(default)]
    pub decay: bool,
    pub retrain_every: u64,
    pub l1: SelectKConfig,
    pub l2: SelectKConfig,
    pub kmeans: KMeansConfig,
    pub plr: PlrConfig,
    pub theta_min: f64,
    pub n_subradii: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            z: 0.5,
            alpha: 0.01,
            decay: false,
            retrain_every: 100,
            l1: SelectKConfig::new(2, 1e-4, 20).per_sample(),
            l2: SelectKConfig::new(2, 1e-4, 8).per_sample(),
            kmeans: KMeansConfig::default(),
            plr: PlrConfig::default(),
            theta_min: DEFAULT_THETA_MIN,
            n_subradii: DEFAULT_N_SUBRADII,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.z > 0.0 && self.z <= 1.0) {
            return Err(Error::usage(format!("z must lie in (0, 1], got {}", self.z)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::usage(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.retrain_every == 0 {
            return Err(Error::usage("retrain_every must be at least 1"));
        }
        if !(self.theta_min > 0.0) {
            return Err(Error::usage("theta_min must be positive"));
        }
        if self.n_subradii < 2 {
            return Err(Error::usage("n_subradii must be at least 2"));
        }
        Ok(())
    }
}

/// Coordinate and answer scaling applied before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScaling {
    pub coords: Vec<(f64, f64)>,
    /// Range of the training answers; PLRs predict answers scaled into `[0, 1]` by it.
    pub answer: (f64, f64),
    #[serde(default)]
    pub norm: NormOrder,
}

impl ModelScaling {
    pub fn from_dataset(params: &ScalingParams, answer: (f64, f64)) -> Self {
        ModelScaling {
            coords: params.coords.clone(),
            answer,
            norm: NormOrder::default(),
        }
    }

    pub fn normalize_answer(&self, y: f64) -> f64 {
        scale(y, self.answer.0, self.answer.1)
    }

    pub fn denormalize_answer(&self, y: f64) -> f64 {
        unscale(y, self.answer.0, self.answer.1)
    }

    /// Factor that maps a slope in scaled answer units to raw units.
    pub fn answer_span(&self) -> f64 {
        let (lo, hi) = self.answer;
        if hi > lo {
            hi - lo
        } else {
            0.0
        }
    }

    pub fn coord_scaling(&self) -> ScalingParams {
        ScalingParams {
            coords: self.coords.clone(),
            measure: None,
        }
    }
}

/// Training state of one (location, radius) cell.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    /// Pairs the current PLR was fit on, `(theta, scaled y)`.
    pub samples: Vec<(f64, f64)>,
    /// Pairs projected onto the cell since its last refit.
    pub buffer: Vec<(f64, f64)>,
    /// Total pairs projected onto the cell during training.
    pub projected: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    /// Pairs processed since the last retrain.
    pub pending: u64,
    /// Pairs processed in total.
    pub steps: u64,
    pub retrains: u64,
    pub cells: Vec<Vec<CellState>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationModel {
    pub schema_version: u32,
    pub version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<AggregateKind>,
    pub hyper: Hyperparams,
    pub scaling: ModelScaling,
    /// Location representatives.
    #[serde(rename = "W")]
    pub locations: Vec<Vec<f64>>,
    /// Radius representatives per location, ascending.
    #[serde(rename = "U")]
    pub radii: Vec<Vec<f64>>,
    /// One PLR per (location, radius) cell.
    #[serde(rename = "M")]
    pub plrs: Vec<Vec<PlrModel>>,
    pub counters: Counters,
}

impl ExplanationModel {
    pub fn dim(&self) -> usize {
        self.locations.first().map_or(0, Vec::len)
    }

    pub fn k(&self) -> usize {
        self.locations.len()
    }

    pub fn l(&self, k: usize) -> usize {
        self.radii[k].len()
    }

    pub fn total_cells(&self) -> usize {
        self.radii.iter().map(Vec::len).sum()
    }

    /// Check every structural invariant.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::model(format!(
                "schema_version {} is not supported (expected schema {SCHEMA_VERSION}: keys schema_version, hyper, scaling, W, U, M, counters)",
                self.schema_version
            )));
        }
        let k = self.locations.len();
        if k == 0 {
            return Err(Error::model("model has no location representatives"));
        }
        let d = self.dim();
        if d == 0 || self.locations.iter().any(|w| w.len() != d || w.iter().any(|v| !v.is_finite())) {
            return Err(Error::model("location representatives have inconsistent dimensions"));
        }
        if self.scaling.coords.len() != d {
            return Err(Error::model("scaling dimension differs from the model dimension"));
        }
        if self.radii.len() != k || self.plrs.len() != k {
            return Err(Error::model(format!(
                "|W| = {k} but |U| = {} and |M| = {}",
                self.radii.len(),
                self.plrs.len()
            )));
        }
        for (i, (u, m)) in self.radii.iter().zip(&self.plrs).enumerate() {
            if u.is_empty() {
                return Err(Error::model(format!("location {i} has no radius representatives")));
            }
            if u.len() != m.len() {
                return Err(Error::model(format!("location {i}: |U| = {} but |M| = {}", u.len(), m.len())));
            }
            if u.iter().any(|v| !v.is_finite()) || u.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::model(format!("location {i}: radius representatives not strictly ascending")));
            }
            for plr in m {
                plr.validate()?;
            }
        }
        let cells = &self.counters.cells;
        if cells.len() != k || cells.iter().zip(&self.radii).any(|(c, u)| c.len() != u.len()) {
            return Err(Error::model("counter shape does not match the representatives"));
        }
        self.hyper.validate().map_err(|e| Error::model(e.to_string()))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(s).map_err(|e| Error::model(format!("corrupt model file: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::model(format!(
                    "model schema_version {v} does not match expected schema {SCHEMA_VERSION}"
                )))
            }
            None => return Err(Error::model("model file lacks schema_version")),
        }
        let model: ExplanationModel =
            serde_json::from_value(value).map_err(|e| Error::model(format!("model does not match schema {SCHEMA_VERSION}: {e}")))?;
        model.validate()?;
        Ok(model)
    }

    /// Write atomically through a temporary file in the same directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = self.to_json()?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Immutable view of a model at one version.
pub type Snapshot = Arc<ExplanationModel>;

/// Single-writer, multi-reader holder of the published model.
///
/// Readers clone an `Arc` and never block the writer for longer than the
/// pointer swap; a published snapshot is never mutated afterwards.
#[derive(Debug)]
pub struct ModelStore {
    current: RwLock<Snapshot>,
}

impl ModelStore {
    pub fn new(model: ExplanationModel) -> Self {
        ModelStore {
            current: RwLock::new(Arc::new(model)),
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        Arc::clone(&self.current.read())
    }

    pub fn version(&self) -> u64 {
        self.current.read().version
    }

    /// Publish `model`, bumping its version past the current one if needed.
    pub fn publish(&self, mut model: ExplanationModel) -> u64 {
        let mut cur = self.current.write();
        if model.version <= cur.version {
            model.version = cur.version + 1;
        }
        let v = model.version;
        *cur = Arc::new(model);
        v
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn shaped_model(k: usize, l: usize) -> ExplanationModel {
        ExplanationModel {
            schema_version: SCHEMA_VERSION,
            version: 1,
            aggregate: Some(AggregateKind::Count),
            hyper: Hyperparams::default(),
            scaling: ModelScaling {
                coords: vec![(0.0, 1.0); 2],
                answer: (0.0, 100.0),
                norm: NormOrder::default(),
            },
            locations: (0..k).map(|i| vec![0.1 + 0.3 * i as f64, 0.7 - 0.1 * i as f64]).collect(),
            radii: (0..k)
                .map(|_| (0..l).map(|j| 0.05 + 0.05 * j as f64 + 1e-3 / 3.0).collect())
                .collect(),
            plrs: (0..k)
                .map(|_| {
                    (0..l)
                        .map(|j| PlrModel::new(0.1 * j as f64, vec![(1.0 / 3.0, 0.04), (2.5, 0.11)]).unwrap())
                        .collect()
                })
                .collect(),
            counters: Counters {
                cells: vec![vec![CellState::default(); l]; k],
                ..Counters::default()
            },
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m.json");
        let p2 = dir.path().join("m2.json");
        let mut m = shaped_model(2, 3);
        m.counters.cells[0][1].samples = vec![(0.1234567890123, 0.1 + 0.2), (std::f64::consts::PI, 1e-300)];
        m.save(&p1).unwrap();
        let loaded = ExplanationModel::load(&p1).unwrap();
        assert_eq!(loaded, m);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.k(), 2);
        assert!(loaded.radii.iter().all(|u| u.len() == 3));
    }

    #[test]
    fn load_rejects_corrupt_and_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let json = shaped_model(1, 2).to_json().unwrap();
        std::fs::write(&p, &json[..json.len() / 2]).unwrap();
        let err = ExplanationModel::load(&p).unwrap_err();
        assert!(err.to_string().contains("corrupt"), "{err}");

        let bumped = json.replacen("\"schema_version\": 1", "\"schema_version\": 7", 1);
        let err = ExplanationModel::from_json(&bumped).unwrap_err();
        assert!(err.to_string().contains("expected schema 1"), "{err}");
    }

    #[test]
    fn json_layout() {
        let v: serde_json::Value = serde_json::from_str(&shaped_model(1, 2).to_json().unwrap()).unwrap();
        for key in ["schema_version", "hyper", "scaling", "W", "U", "M", "counters", "version"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["W"][0].is_array());
        assert!(v["M"][0][1]["terms"][0].is_array());
        assert!(v["M"][0][1]["beta0"].is_number());
    }

    #[test]
    fn validate_catches_shape_errors() {
        let mut m = shaped_model(2, 2);
        m.radii[1].pop();
        assert!(m.validate().is_err());
        let mut m = shaped_model(2, 2);
        m.radii[0] = vec![0.2, 0.1];
        assert!(m.validate().is_err());
        let mut m = shaped_model(2, 2);
        m.plrs.pop();
        assert!(m.validate().is_err());
        shaped_model(3, 1).validate().unwrap();
    }

    #[test]
    fn snapshots_are_immutable_and_versioned() {
        let store = ModelStore::new(shaped_model(1, 2));
        let a = store.snapshot();
        let b = store.snapshot();
        assert_eq!(a, b);
        let mut next = (*a).clone();
        next.plrs[0][0] = PlrModel::constant(9.0);
        let v = store.publish(next);
        assert_eq!(v, 2);
        assert_eq!(a.plrs[0][0].beta0, 0.0);
        assert!(a.version <= store.version());
        assert_eq!(store.snapshot().plrs[0][0].beta0, 9.0);
    }
}

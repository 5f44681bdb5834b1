//! Dataset ingestion, min-max normalization and exact ground-truth answering
//! of center-radius aggregate queries.
//!
//! The dataset is the only component that touches raw rows. It answers
//! `COUNT`, `SUM` and `AVG` over the ball selected by a query and builds the
//! "actual" radius/answer series a learned explanation is compared against.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{p_norm_unchecked, NormOrder, Query};

/// Smallest radius analysts issue; lower end of every actual explanation grid.
pub const DEFAULT_THETA_MIN: f64 = 0.02;
/// Number of evenly spaced sub-radii per explanation grid.
pub const DEFAULT_N_SUBRADII: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AggregateKind {
    Count,
    Sum,
    Avg,
}

impl AggregateKind {
    pub fn needs_measure(self) -> bool {
        !matches!(self, AggregateKind::Count)
    }
}

impl fmt::Display for AggregateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregateKind::Count => "COUNT",
            AggregateKind::Sum => "SUM",
            AggregateKind::Avg => "AVG",
        })
    }
}

impl FromStr for AggregateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "COUNT" => Ok(AggregateKind::Count),
            "SUM" => Ok(AggregateKind::Sum),
            "AVG" => Ok(AggregateKind::Avg),
            _ => Err(Error::usage(format!("unknown aggregate '{s}' (COUNT, SUM, AVG)"))),
        }
    }
}

/// Answer of one aggregate query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AqAnswer {
    Value(f64),
    /// `AVG` over a ball that contains no rows.
    EmptySubspace,
}

impl AqAnswer {
    pub fn value(self) -> Option<f64> {
        match self {
            AqAnswer::Value(v) => Some(v),
            AqAnswer::EmptySubspace => None,
        }
    }
}

/// Per-dimension `(min, max)` used for min-max scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub coords: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<(f64, f64)>,
}

impl ScalingParams {
    pub fn identity(dim: usize) -> Self {
        ScalingParams {
            coords: vec![(0.0, 1.0); dim],
            measure: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn normalize_point(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(raw.len())?;
        Ok(raw
            .iter()
            .zip(&self.coords)
            .map(|(&v, &(lo, hi))| scale(v, lo, hi))
            .collect())
    }

    pub fn denormalize_point(&self, norm: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(norm.len())?;
        Ok(norm
            .iter()
            .zip(&self.coords)
            .map(|(&v, &(lo, hi))| unscale(v, lo, hi))
            .collect())
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.coords.len() {
            return Err(Error::usage(format!(
                "dimension mismatch: scaling has {} dims, got {d}",
                self.coords.len()
            )));
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Map `v` from `[lo, hi]` to `[0, 1]`; constant ranges map to 0.
pub(crate) fn scale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

pub(crate) fn unscale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + v * (hi - lo)
    } else {
        lo
    }
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Rows of a dataset plus an optional numeric measure column.
#[derive(Debug)]
pub struct Dataset {
    name: String,
    dim: usize,
    /// Row-major coordinates, `dim` values per row.
    coords: Vec<f64>,
    measure: Option<Vec<f64>>,
    scaling: Option<ScalingParams>,
    norm: NormOrder,
    index: Option<GridIndex>,
    scans: AtomicU64,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset {
            name: self.name.clone(),
            dim: self.dim,
            coords: self.coords.clone(),
            measure: self.measure.clone(),
            scaling: self.scaling.clone(),
            norm: self.norm,
            index: self.index.clone(),
            scans: AtomicU64::new(0),
        }
    }
}

impl Dataset {
    pub fn from_rows(
        name: impl Into<String>,
        rows: Vec<Vec<f64>>,
        measure: Option<Vec<f64>>,
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.is_empty() {
            return Dataset::from_flat(name, 1, Vec::new(), measure);
        }
        let mut coords = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::data(format!(
                    "row {i} has {} coordinates, expected {dim}",
                    r.len()
                )));
            }
            coords.extend_from_slice(r);
        }
        Dataset::from_flat(name, dim, coords, measure)
    }

    pub fn from_flat(
        name: impl Into<String>,
        dim: usize,
        coords: Vec<f64>,
        measure: Option<Vec<f64>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::data("dataset dimension must be at least 1"));
        }
        if coords.len() % dim != 0 {
            return Err(Error::data("coordinate buffer is not a multiple of the dimension"));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("dataset contains non-finite coordinates"));
        }
        let n = coords.len() / dim;
        if let Some(m) = &measure {
            if m.len() != n {
                return Err(Error::data(format!(
                    "measure has {} values for {n} rows",
                    m.len()
                )));
            }
        }
        Ok(Dataset {
            name: name.into(),
            dim,
            coords,
            measure,
            scaling: None,
            norm: NormOrder::default(),
            index: None,
            scans: AtomicU64::new(0),
        })
    }

    pub fn with_norm(mut self, norm: NormOrder) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_scaling(mut self, scaling: ScalingParams) -> Self {
        self.scaling = Some(scaling);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn norm(&self) -> NormOrder {
        self.norm
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn measure(&self) -> Option<&[f64]> {
        self.measure.as_deref()
    }

    pub fn scaling(&self) -> Option<&ScalingParams> {
        self.scaling.as_ref()
    }

    /// Number of subspace scans served so far. Used to audit that serving
    /// paths never consult the data.
    pub fn scan_count(&self) -> u64 {
        self.scans.load(Ordering::Relaxed)
    }

    /// Read a CSV file with a header row. Rows keep file order.
    pub fn load_csv(
        path: &Path,
        coord_columns: &[&str],
        measure_column: Option<&str>,
        delimiter: u8,
    ) -> Result<Self> {
        if coord_columns.is_empty() {
            return Err(Error::usage("at least one coordinate column is required"));
        }
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .from_reader(file);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::usage(format!("column '{name}' not found in {}", path.display())))
        };
        let coord_idx = coord_columns
            .iter()
            .map(|c| find(c))
            .collect::<Result<Vec<_>>>()?;
        let measure_idx = measure_column.map(find).transpose()?;

        let mut coords = Vec::new();
        let mut measure = measure_idx.map(|_| Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            // header is line 1
            let line = i + 2;
            let rec = rec.map_err(|e| Error::MalformedRow {
                path: path.to_path_buf(),
                row: line,
                msg: e.to_string(),
            })?;
            let cell = |j: usize| -> Result<f64> {
                let raw = rec.get(j).ok_or_else(|| Error::MalformedRow {
                    path: path.to_path_buf(),
                    row: line,
                    msg: format!("missing column {}", j + 1),
                })?;
                raw.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::MalformedRow {
                        path: path.to_path_buf(),
                        row: line,
                        msg: format!("non-numeric value '{raw}' in column '{}'", &headers[j]),
                    })
            };
            for &j in &coord_idx {
                coords.push(cell(j)?);
            }
            if let (Some(j), Some(m)) = (measure_idx, measure.as_mut()) {
                m.push(cell(j)?);
            }
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Dataset::from_flat(name, coord_columns.len(), coords, measure)
    }

    /// Write coordinates (and measure, if any) as CSV with columns `x1..xd[,measure]`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        if self.measure.is_some() {
            header.push("measure".into());
        }
        w.write_record(&header)?;
        for (i, row) in self.rows().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if let Some(m) = &self.measure {
                rec.push(m[i].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Read a file in the layout produced by [`Dataset::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::Reader::from_reader(file);
        let headers = rdr.headers()?.clone();
        let coords: Vec<String> = headers
            .iter()
            .map(str::trim)
            .filter(|h| h.starts_with('x') && h[1..].parse::<usize>().is_ok())
            .map(str::to_string)
            .collect();
        let measure = headers.iter().any(|h| h.trim() == "measure").then_some("measure");
        let cols: Vec<&str> = coords.iter().map(String::as_str).collect();
        Dataset::load_csv(path, &cols, measure, b',')
    }

    /// Min-max scale every coordinate into `[0, 1]`. Constant dimensions map to 0.
    pub fn normalize(&self) -> Result<(Dataset, ScalingParams)> {
        if self.is_empty() {
            return Err(Error::data("cannot normalize an empty dataset"));
        }
        let ranges: Vec<(f64, f64)> = (0..self.dim)
            .map(|j| min_max(self.rows().map(|r| r[j])))
            .collect();
        let coords = self
            .coords
            .chunks_exact(self.dim)
            .flat_map(|r| {
                r.iter()
                    .zip(&ranges)
                    .map(|(&v, &(lo, hi))| scale(v, lo, hi))
            })
            .collect();
        let params = ScalingParams {
            coords: ranges,
            measure: self.measure.as_ref().map(|m| min_max(m.iter().copied())),
        };
        let ds = Dataset::from_flat(self.name.clone(), self.dim, coords, self.measure.clone())?
            .with_norm(self.norm)
            .with_scaling(params.clone());
        Ok((ds, params))
    }

    /// Inverse of [`Dataset::normalize`].
    pub fn denormalize(&self, params: &ScalingParams) -> Result<Dataset> {
        let coords = self
            .rows()
            .map(|r| params.denormalize_point(r))
            .collect::<Result<Vec<_>>>()?
            .concat();
        Ok(Dataset::from_flat(self.name.clone(), self.dim, coords, self.measure.clone())?.with_norm(self.norm))
    }

    /// Attach a uniform-grid bucket index. Answers are bit-identical with or
    /// without it.
    pub fn build_index(&mut self) {
        if !self.is_empty() {
            self.index = Some(GridIndex::build(self));
        }
    }

    pub fn with_index(mut self) -> Self {
        self.build_index();
        self
    }

    pub fn has_index(&self) -> bool {
        self.index.is_some()
    }

    pub fn drop_index(&mut self) {
        self.index = None;
    }

    /// Row ids and distances of every row inside the ball, ascending by row id.
    fn members_within(&self, center: &[f64], theta: f64) -> Vec<(u32, f64)> {
        self.scans.fetch_add(1, Ordering::Relaxed);
        let mut out = Vec::new();
        match &self.index {
            Some(idx) => {
                idx.visit_candidates(center, theta, |row| {
                    let d = p_norm_unchecked(self.row(row as usize), center, self.norm);
                    if d <= theta {
                        out.push((row, d));
                    }
                });
                out.sort_unstable_by_key(|&(r, _)| r);
            }
            None => {
                for (i, r) in self.rows().enumerate() {
                    let d = p_norm_unchecked(r, center, self.norm);
                    if d <= theta {
                        out.push((i as u32, d));
                    }
                }
            }
        }
        out
    }

    fn check_query(&self, q: &Query, kind: AggregateKind) -> Result<()> {
        if q.dim() != self.dim {
            return Err(Error::usage(format!(
                "query has dimension {}, dataset has {}",
                q.dim(),
                self.dim
            )));
        }
        if kind.needs_measure() && self.measure.is_none() {
            return Err(Error::usage(format!(
                "{kind} requires a measure column, dataset '{}' has none",
                self.name
            )));
        }
        Ok(())
    }

    fn aggregate<'a>(&self, members: impl Iterator<Item = &'a (u32, f64)>, kind: AggregateKind) -> AqAnswer {
        match kind {
            AggregateKind::Count => AqAnswer::Value(members.count() as f64),
            AggregateKind::Sum | AggregateKind::Avg => {
                let m = self.measure.as_deref().unwrap_or_default();
                let (mut sum, mut count) = (0.0, 0usize);
                for &(r, _) in members {
                    sum += m[r as usize];
                    count += 1;
                }
                match kind {
                    AggregateKind::Sum => AqAnswer::Value(sum),
                    _ if count == 0 => AqAnswer::EmptySubspace,
                    _ => AqAnswer::Value(sum / count as f64),
                }
            }
        }
    }

    /// Exact answer of `kind` over the rows within `q.theta` of `q.center`.
    pub fn execute_aq(&self, q: &Query, kind: AggregateKind) -> Result<AqAnswer> {
        self.check_query(q, kind)?;
        let members = self.members_within(q.center.coords(), q.theta);
        Ok(self.aggregate(members.iter(), kind))
    }

    /// Answers at `n` evenly spaced radii over `[theta_min, q.theta]`.
    pub fn actual_explanation(
        &self,
        q: &Query,
        kind: AggregateKind,
        n: usize,
        theta_min: f64,
    ) -> Result<Vec<(f64, AqAnswer)>> {
        self.check_query(q, kind)?;
        if n < 2 {
            return Err(Error::usage("actual explanation needs at least 2 sub-radii"));
        }
        if !(theta_min < q.theta) {
            return Err(Error::usage(format!(
                "theta_min {theta_min} must be below the query radius {}",
                q.theta
            )));
        }
        let grid = radius_grid(theta_min, q.theta, n);
        let members = self.members_within(q.center.coords(), q.theta);
        Ok(grid
            .into_iter()
            .map(|t| (t, self.aggregate(members.iter().filter(|(_, d)| *d <= t), kind)))
            .collect())
    }
}

/// `n` evenly spaced radii from `lo` to `hi`, both ends included exactly.
pub fn radius_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![hi],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

const MAX_GRID_CELLS: usize = 1 << 22;

/// Uniform grid over the bounding box of the rows. Buckets hold row ids in
/// ascending order.
#[derive(Debug, Clone)]
struct GridIndex {
    lo: Vec<f64>,
    cell_width: Vec<f64>,
    cells_per_dim: usize,
    /// Offsets into `entries`, one per cell plus a terminator.
    starts: Vec<u32>,
    entries: Vec<u32>,
}

impl GridIndex {
    fn build(ds: &Dataset) -> Self {
        let d = ds.dim;
        let n = ds.len();
        let target = ((n as f64 / 4.0).max(1.0)).powf(1.0 / d as f64).ceil() as usize;
        let cap = (MAX_GRID_CELLS as f64).powf(1.0 / d as f64).floor() as usize;
        let cells_per_dim = target.clamp(1, cap.max(1));
        let ranges: Vec<(f64, f64)> = (0..d).map(|j| min_max(ds.rows().map(|r| r[j]))).collect();
        let lo: Vec<f64> = ranges.iter().map(|r| r.0).collect();
        let cell_width: Vec<f64> = ranges
            .iter()
            .map(|&(a, b)| {
                let w = (b - a) / cells_per_dim as f64;
                if w > 0.0 {
                    w
                } else {
                    1.0
                }
            })
            .collect();
        let mut idx = GridIndex {
            lo,
            cell_width,
            cells_per_dim,
            starts: Vec::new(),
            entries: Vec::new(),
        };
        let total = cells_per_dim.pow(d as u32);
        let cell_of: Vec<usize> = ds.rows().map(|r| idx.cell_of(r)).collect();
        let mut counts = vec![0u32; total + 1];
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for i in 1..=total {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut entries = vec![0u32; n];
        for (row, &c) in cell_of.iter().enumerate() {
            entries[fill[c] as usize] = row as u32;
            fill[c] += 1;
        }
        idx.starts = counts;
        idx.entries = entries;
        idx
    }

    fn coord_cell(&self, j: usize, v: f64) -> usize {
        let c = ((v - self.lo[j]) / self.cell_width[j]).floor();
        (c.max(0.0) as usize).min(self.cells_per_dim - 1)
    }

    fn cell_of(&self, r: &[f64]) -> usize {
        r.iter()
            .enumerate()
            .fold(0, |acc, (j, &v)| acc * self.cells_per_dim + self.coord_cell(j, v))
    }

    /// Every row in a cell intersecting the axis-aligned box `center ± theta`,
    /// which contains the `L_p` ball for any `p`.
    fn visit_candidates(&self, center: &[f64], theta: f64, mut f: impl FnMut(u32)) {
        let d = center.len();
        let lo: Vec<usize> = (0..d).map(|j| self.coord_cell(j, center[j] - theta)).collect();
        let hi: Vec<usize> = (0..d).map(|j| self.coord_cell(j, center[j] + theta)).collect();
        let mut cur = lo.clone();
        loop {
            let cell = cur.iter().fold(0, |acc, &c| acc * self.cells_per_dim + c);
            let (s, e) = (self.starts[cell] as usize, self.starts[cell + 1] as usize);
            for &row in &self.entries[s..e] {
                f(row);
            }
            // odometer increment over the box of cells
            let mut j = d;
            loop {
                if j == 0 {
                    return;
                }
                j -= 1;
                if cur[j] < hi[j] {
                    cur[j] += 1;
                    break;
                }
                cur[j] = lo[j];
            }
        }
    }
}

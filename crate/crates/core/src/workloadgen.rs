//! Synthetic query workloads: mixtures of Gaussian or uniform components over
//! query centers and radii, labeled against a dataset, plus train/eval
//! splitting and the workload file format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{AggregateKind, AqAnswer, Dataset, DEFAULT_THETA_MIN};
use crate::error::{Error, Result};
use crate::geometry::{Point, Query};

pub const CENTER_UNIFORM_WIDTH: f64 = 0.04;
pub const RADIUS_UNIFORM_WIDTH: f64 = 0.02;
pub const CENTER_VARIANCE: f64 = 1e-4;
pub const RADIUS_VARIANCE: f64 = 9e-4;
const AVG_RETRIES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianMixture,
    UniformMixture,
    /// One uniform component spanning the whole normalized domain.
    Domain,
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gauss" | "gaussian" | "gaussian-mixture" => Ok(Family::GaussianMixture),
            "uni" | "uniform" | "uniform-mixture" => Ok(Family::UniformMixture),
            "domain" => Ok(Family::Domain),
            other => Err(Error::usage(format!("unknown distribution family {other:?}"))),
        }
    }
}

/// Center component. For Gaussians `mean` is the mean and `spread` the
/// per-coordinate variance; for uniforms `mean` is the lower corner and
/// `spread` the box width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterComponent {
    pub mean: Vec<f64>,
    pub spread: f64,
}

/// Radius component with the same reading of `spread` as [`CenterComponent`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusComponent {
    pub mean: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    pub dim: usize,
    pub center_family: Family,
    pub radius_family: Family,
    pub centers: Vec<CenterComponent>,
    pub radii: Vec<RadiusComponent>,
    pub m: usize,
    pub seed: u64,
    pub theta_min: f64,
    /// Upper radius for the `Domain` radius family.
    pub theta_max: f64,
}

impl WorkloadSpec {
    /// Spec with `c` center and `j` radius components whose parameters are
    /// drawn from `seed`: component means uniform in the unit cube, radius
    /// means in `[0.02, 0.2]` (Gaussian) or lower ends in `[0.02, 0.18]`
    /// (uniform). Radius locations are drawn one per equal-width stratum of
    /// that range so the components stay apart.
    pub fn mixture(
        dim: usize,
        center_family: Family,
        radius_family: Family,
        c: usize,
        j: usize,
        m: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || c == 0 || j == 0 {
            return Err(Error::usage("dim, C and J must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_c0de);
        let centers = match center_family {
            Family::GaussianMixture => (0..c)
                .map(|_| CenterComponent {
                    mean: (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
                    spread: CENTER_VARIANCE,
                })
                .collect(),
            Family::UniformMixture => (0..c)
                .map(|_| CenterComponent {
                    mean: (0..dim)
                        .map(|_| rng.random_range(0.0..1.0 - CENTER_UNIFORM_WIDTH))
                        .collect(),
                    spread: CENTER_UNIFORM_WIDTH,
                })
                .collect(),
            Family::Domain => vec![CenterComponent {
                mean: vec![0.0; dim],
                spread: 1.0,
            }],
        };
        let radii = match radius_family {
            Family::GaussianMixture => stratified(&mut rng, 0.02, 0.2, j)
                .into_iter()
                .map(|mean| RadiusComponent {
                    mean,
                    spread: RADIUS_VARIANCE,
                })
                .collect(),
            Family::UniformMixture => stratified(&mut rng, 0.02, 0.18, j)
                .into_iter()
                .map(|mean| RadiusComponent {
                    mean,
                    spread: RADIUS_UNIFORM_WIDTH,
                })
                .collect(),
            Family::Domain => vec![RadiusComponent {
                mean: DEFAULT_THETA_MIN,
                spread: 0.2 - DEFAULT_THETA_MIN,
            }],
        };
        let short = |f: Family| match f {
            Family::GaussianMixture => "gauss",
            Family::UniformMixture => "uni",
            Family::Domain => "domain",
        };
        Ok(WorkloadSpec {
            name: format!("{}-{}", short(center_family), short(radius_family)),
            dim,
            center_family,
            radius_family,
            centers,
            radii,
            m,
            seed,
            theta_min: DEFAULT_THETA_MIN,
            theta_max: 0.2,
        })
    }

    /// Uniform centers over the unit cube and uniform radii in `[theta_min, theta_max]`.
    pub fn domain_uniform(dim: usize, m: usize, seed: u64) -> Result<Self> {
        let mut spec = Self::mixture(dim, Family::Domain, Family::Domain, 1, 1, m, seed)?;
        spec.name = "dc-uniform".to_string();
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.centers.is_empty() || self.radii.is_empty() {
            return Err(Error::usage("workload needs dim >= 1 and at least one component of each kind"));
        }
        if self.centers.iter().any(|c| c.mean.len() != self.dim) {
            return Err(Error::usage("center component dimension differs from workload dim"));
        }
        let spreads = self.centers.iter().map(|c| c.spread).chain(self.radii.iter().map(|r| r.spread));
        for s in spreads {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::usage(format!("component spread must be >= 0, got {s}")));
            }
        }
        if !(self.theta_min > 0.0 && self.theta_min <= 1.0) {
            return Err(Error::usage("theta_min must be in (0, 1]"));
        }
        if self.radius_family == Family::Domain && self.theta_max <= self.theta_min {
            return Err(Error::usage("theta_max must exceed theta_min"));
        }
        Ok(())
    }

    fn sample_center(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let comp = &self.centers[rng.random_range(0..self.centers.len())];
        comp.mean
            .iter()
            .map(|&mu| {
                let v = match self.center_family {
                    Family::GaussianMixture => gaussian(rng, mu, comp.spread),
                    Family::UniformMixture | Family::Domain => uniform(rng, mu, comp.spread),
                };
                v.clamp(0.0, 1.0)
            })
            .collect()
    }

    fn sample_radius(&self, rng: &mut ChaCha8Rng) -> f64 {
        let theta = match self.radius_family {
            Family::GaussianMixture => {
                let comp = self.radii[rng.random_range(0..self.radii.len())];
                gaussian(rng, comp.mean, comp.spread)
            }
            Family::UniformMixture => {
                let comp = self.radii[rng.random_range(0..self.radii.len())];
                uniform(rng, comp.mean, comp.spread)
            }
            Family::Domain => uniform(rng, self.theta_min, self.theta_max - self.theta_min),
        };
        theta.clamp(self.theta_min, 1.0)
    }
}

fn stratified(rng: &mut ChaCha8Rng, lo: f64, hi: f64, j: usize) -> Vec<f64> {
    let w = (hi - lo) / j as f64;
    (0..j)
        .map(|i| lo + w * i as f64 + rng.random_range(0.0..=w))
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, mean: f64, variance: f64) -> f64 {
    if variance == 0.0 {
        return mean;
    }
    let sd = variance.sqrt();
    let v = Normal::new(mean, sd).map_or(mean, |n| n.sample(rng));
    v.clamp(mean - 3.0 * sd, mean + 3.0 * sd)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, width: f64) -> f64 {
    if width == 0.0 {
        return lo;
    }
    rng.random_range(lo..lo + width)
}

/// Synthetic dataset of `n` points drawn from `blobs` isotropic Gaussian
/// blobs (standard deviation `sigma`) whose centers are uniform in
/// `[0.1, 0.9]^dim`, clipped to the unit cube. The measure of a point is
/// `100 * |p - b| + N(0, 1)` with `b` the center of the blob it came from.
pub fn blob_dataset(n: usize, dim: usize, blobs: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if dim == 0 || blobs == 0 || n == 0 {
        return Err(Error::usage("blob dataset needs n, dim and blobs >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..blobs)
        .map(|_| (0..dim).map(|_| rng.random_range(0.1..0.9)).collect())
        .collect();
    let noise = Normal::new(0.0, 1.0).map_err(|e| Error::usage(e.to_string()))?;
    let mut coords = Vec::with_capacity(n * dim);
    let mut measure = Vec::with_capacity(n);
    for i in 0..n {
        let c = &centers[i % blobs];
        let mut r2 = 0.0;
        for &mu in c {
            let v = gaussian(&mut rng, mu, sigma * sigma).clamp(0.0, 1.0);
            r2 += (v - mu) * (v - mu);
            coords.push(v);
        }
        measure.push(100.0 * r2.sqrt() + noise.sample(&mut rng));
    }
    Dataset::from_flat(format!("blobs-{n}x{dim}"), dim, coords, Some(measure))
}

/// A labeled workload together with the spec that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub spec: WorkloadSpec,
    pub aggregate: AggregateKind,
    pub queries: Vec<Query>,
    /// Queries abandoned because every retry hit an empty subspace.
    pub dropped: usize,
}

/// Draw `spec.m` queries and label each against `dataset`. AVG queries over
/// empty subspaces are redrawn a bounded number of times, then dropped.
pub fn generate(spec: &WorkloadSpec, dataset: &Dataset, kind: AggregateKind) -> Result<Workload> {
    spec.validate()?;
    if dataset.dim() != spec.dim {
        return Err(Error::usage(format!(
            "workload has {} dims but dataset has {}",
            spec.dim,
            dataset.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut queries = Vec::with_capacity(spec.m);
    let mut dropped = 0;
    for _ in 0..spec.m {
        let mut labeled = None;
        for _ in 0..AVG_RETRIES {
            let center = Point::new(spec.sample_center(&mut rng))?;
            let theta = spec.sample_radius(&mut rng);
            let q = Query::new(center, theta)?;
            if let AqAnswer::Value(y) = dataset.execute_aq(&q, kind)? {
                labeled = Some(q.with_answer(y));
                break;
            }
        }
        match labeled {
            Some(q) => queries.push(q),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} queries whose subspaces stayed empty after {AVG_RETRIES} draws");
    }
    Ok(Workload {
        spec: spec.clone(),
        aggregate: kind,
        queries,
        dropped,
    })
}

/// Seeded shuffle followed by a cut: the eval part gets `ceil(m * f)` queries.
pub fn split(queries: &[Query], eval_fraction: f64, seed: u64) -> Result<(Vec<Query>, Vec<Query>)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::usage(format!("eval fraction must be in (0, 1), got {eval_fraction}")));
    }
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((queries.len() as f64 * eval_fraction) - 1e-9).ceil().max(0.0) as usize;
    let n_train = queries.len() - n_eval.min(queries.len());
    let train = order[..n_train].iter().map(|&i| queries[i].clone()).collect();
    let eval = order[n_train..].iter().map(|&i| queries[i].clone()).collect();
    Ok((train, eval))
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: WorkloadSpec,
    aggregate: AggregateKind,
    dropped: usize,
}

impl Workload {
    /// CSV `x1..xd,theta,y` preceded by a `# {json}` line describing the spec.
    pub fn write(&self, w: impl Write) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        let header = Header {
            spec: self.spec.clone(),
            aggregate: self.aggregate,
            dropped: self.dropped,
        };
        writeln!(w, "# {}", serde_json::to_string(&header)?).map_err(|e| Error::io("<workload>", e))?;
        write_queries(&mut w, self.spec.dim, &self.queries)?;
        w.flush().map_err(|e| Error::io("<workload>", e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(f);
        let mut first = String::new();
        reader.read_line(&mut first).map_err(|e| Error::io(path, e))?;
        let json = first
            .strip_prefix('#')
            .ok_or_else(|| Error::data(format!("{}: missing workload header line", path.display())))?;
        let header: Header = serde_json::from_str(json.trim())?;
        let queries = read_queries(reader, path, header.spec.dim, 1)?;
        Ok(Workload {
            spec: header.spec,
            aggregate: header.aggregate,
            queries,
            dropped: header.dropped,
        })
    }
}

/// Write labeled queries as `x1..xd,theta,y` CSV with a header row.
pub fn write_queries(w: impl Write, dim: usize, queries: &[Query]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut head: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    head.push("theta".into());
    head.push("y".into());
    out.write_record(&head)?;
    for q in queries {
        let mut rec: Vec<String> = q.center.coords().iter().map(|v| v.to_string()).collect();
        rec.push(q.theta.to_string());
        rec.push(q.answer.map_or(String::new(), |y| y.to_string()));
        out.write_record(&rec)?;
    }
    out.flush().map_err(|e| Error::io("<workload>", e))
}

/// Read `x1..xd,theta[,y]` CSV. `dim = 0` infers the dimension from the header.
pub fn read_queries(r: impl std::io::Read, path: &Path, dim: usize, line_offset: usize) -> Result<Vec<Query>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = rdr.headers()?.clone();
    let theta_col = headers
        .iter()
        .position(|h| h.trim() == "theta")
        .ok_or_else(|| Error::data(format!("{}: no theta column", path.display())))?;
    let dim = if dim == 0 { theta_col } else { dim };
    if theta_col != dim {
        return Err(Error::data(format!(
            "{}: expected {dim} coordinate columns before theta, found {theta_col}",
            path.display()
        )));
    }
    let y_col = headers.iter().position(|h| h.trim() == "y");
    let mut queries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2 + line_offset;
        let bad = |msg: String| Error::MalformedRow {
            path: path.to_path_buf(),
            row,
            msg,
        };
        let rec = rec?;
        let field = |j: usize| -> Result<f64> {
            let s = rec.get(j).ok_or_else(|| bad(format!("missing column {}", j + 1)))?;
            s.trim().parse::<f64>().map_err(|_| bad(format!("not a number: {s:?}")))
        };
        let coords = (0..dim).map(&field).collect::<Result<Vec<_>>>()?;
        let theta = field(theta_col)?;
        let center = Point::new(coords).map_err(|e| bad(e.to_string()))?;
        let mut q = Query::new(center, theta).map_err(|e| bad(e.to_string()))?;
        if let Some(j) = y_col {
            if rec.get(j).is_some_and(|s| !s.trim().is_empty()) {
                q = q.with_answer(field(j)?);
            }
        }
        queries.push(q);
    }
    Ok(queries)
}

/// Load a query file with or without a workload header line.
pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let has_header = reader.fill_buf().map_err(|e| Error::io(path, e))?.first() == Some(&b'#');
    if has_header {
        drop(reader);
        return Ok(Workload::load(path)?.queries);
    }
    read_queries(reader, path, 0, 0)
}

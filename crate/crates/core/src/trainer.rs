//! Pre-processing and online training.
//!
//! Pre-processing quantizes a labeled query history and fits one PLR per
//! cell. Training then consumes query/answer pairs one at a time: each pair
//! is assigned to a cell, the cell's location and radius representatives take
//! one stochastic gradient step toward it, and the pair is buffered. Once
//! enough pairs have been projected, every touched cell's PLR is refit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{NormOrder, Query};
use crate::model::{CellState, Counters, ExplanationModel, Hyperparams, ModelScaling, SCHEMA_VERSION};
use crate::plr::{fit, PlrModel};
use crate::quantizer::{hierarchical_quantize, nearest};

/// Build the initial model from a labeled history. Centers must already be
/// in scaled coordinates; `coord_scaling` is recorded for serving raw queries.
pub fn preprocess(
    history: &[Query],
    hyper: &Hyperparams,
    coord_scaling: Vec<(f64, f64)>,
    norm: NormOrder,
) -> Result<ExplanationModel> {
    hyper.validate()?;
    if history.is_empty() {
        return Err(Error::usage("pre-processing needs a nonempty history"));
    }
    let dim = history[0].dim();
    if coord_scaling.len() != dim {
        return Err(Error::usage("coordinate scaling dimension differs from the history"));
    }
    let mut ys = Vec::with_capacity(history.len());
    for (i, q) in history.iter().enumerate() {
        if q.dim() != dim {
            return Err(Error::usage(format!("query {i} has dimension {}, expected {dim}", q.dim())));
        }
        match q.answer {
            Some(y) if y.is_finite() => ys.push(y),
            _ => return Err(Error::usage(format!("query {i} has no answer"))),
        }
    }
    let answer = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    let scaling = ModelScaling {
        coords: coord_scaling,
        answer,
        norm,
    };
    let scaled: Vec<f64> = ys.iter().map(|&y| scaling.normalize_answer(y)).collect();

    let centers: Vec<Vec<f64>> = history.iter().map(|q| q.center.coords().to_vec()).collect();
    let radii: Vec<f64> = history.iter().map(|q| q.theta).collect();
    let quant = hierarchical_quantize(&centers, &radii, &hyper.l1, &hyper.l2, hyper.seed, &hyper.kmeans)?;

    let k_count = quant.locations.k();
    let mut cells: Vec<Vec<CellState>> = quant
        .radii
        .iter()
        .map(|cb| vec![CellState::default(); cb.k()])
        .collect();
    let mut cluster_sum = vec![(0.0, 0usize); k_count];
    for (i, &(k, l)) in quant.cells.iter().enumerate() {
        cells[k][l].samples.push((radii[i], scaled[i]));
        cluster_sum[k].0 += scaled[i];
        cluster_sum[k].1 += 1;
    }
    let global_mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    let mut plrs = Vec::with_capacity(k_count);
    for (k, row) in cells.iter_mut().enumerate() {
        let fallback = match cluster_sum[k] {
            (s, n) if n > 0 => s / n as f64,
            _ => global_mean,
        };
        let mut models = Vec::with_capacity(row.len());
        for cell in row.iter_mut() {
            cell.samples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            models.push(if cell.samples.is_empty() {
                PlrModel::constant(fallback)
            } else {
                fit(&cell.samples, &hyper.plr)?.model
            });
        }
        plrs.push(models);
    }

    let model = ExplanationModel {
        schema_version: SCHEMA_VERSION,
        version: 1,
        aggregate: None,
        hyper: hyper.clone(),
        scaling,
        locations: quant.locations.centroids,
        radii: quant.radii.iter().map(|cb| cb.scalar_centroids()).collect(),
        plrs,
        counters: Counters {
            cells,
            ..Counters::default()
        },
    };
    model.validate()?;
    Ok(model)
}

/// `u + alpha * z * sgn(theta - u)`, no move on an exact hit.
pub fn update_rr(u: f64, theta: f64, alpha: f64, z: f64) -> f64 {
    let d = theta - u;
    if d > 0.0 {
        u + alpha * z
    } else if d < 0.0 {
        u - alpha * z
    } else {
        u
    }
}

/// `w + alpha * (x - w)`: a stochastic gradient step on the squared quantization error.
pub fn update_lr(w: &[f64], x: &[f64], alpha: f64) -> Vec<f64> {
    w.iter().zip(x).map(|(wi, xi)| wi + alpha * (xi - wi)).collect()
}

/// Learning rate for the `t`-th update (0-based) of a representative.
pub fn learning_rate(alpha: f64, decay: bool, t: u64) -> f64 {
    if decay {
        alpha / (1.0 + alpha * t as f64)
    } else {
        alpha
    }
}

/// Cell for a training pair: nearest location, then the radius representative
/// minimizing `z * |theta - u| + (1 - z) * (y - f(theta))^2`. `y` is in scaled
/// answer units. Ties go to the smaller index.
pub fn assign(model: &ExplanationModel, x: &[f64], theta: f64, y: f64) -> Result<(usize, usize)> {
    if x.len() != model.dim() {
        return Err(Error::usage(format!(
            "dimension mismatch: model has {} dims, pair has {}",
            model.dim(),
            x.len()
        )));
    }
    let k = nearest(x, &model.locations).0;
    let z = model.hyper.z;
    let mut best = (0, f64::INFINITY);
    for (l, (&u, plr)) in model.radii[k].iter().zip(&model.plrs[k]).enumerate() {
        let err = y - plr.predict(theta);
        let cost = z * (theta - u).abs() + (1.0 - z) * err * err;
        if cost < best.1 {
            best = (l, cost);
        }
    }
    Ok((k, best.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub k: usize,
    /// Radius index at assignment time.
    pub l: usize,
    /// Radius index after re-sorting the moved representative.
    pub l_after: usize,
    pub rr_before: f64,
    pub rr_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub refit: Vec<(usize, usize)>,
    /// Cells whose refit failed and kept the previous PLR.
    pub failed: Vec<(usize, usize)>,
    pub version: u64,
}

/// Single writer over a live model.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: ExplanationModel,
}

impl Trainer {
    pub fn new(model: ExplanationModel) -> Result<Self> {
        model.validate()?;
        Ok(Trainer { model })
    }

    pub fn model(&self) -> &ExplanationModel {
        &self.model
    }

    pub fn into_model(self) -> ExplanationModel {
        self.model
    }

    /// Assign one pair (scaled center, raw answer), move its representatives
    /// and buffer it in the cell.
    pub fn process_pair(&mut self, x: &[f64], theta: f64, y: f64) -> Result<Assignment> {
        if !(theta > 0.0 && theta.is_finite()) || !y.is_finite() {
            return Err(Error::usage("training pair needs a positive radius and a finite answer"));
        }
        let ys = self.model.scaling.normalize_answer(y);
        let (k, l) = assign(&self.model, x, theta, ys)?;
        let hyper = &self.model.hyper;
        let (alpha, decay, z) = (hyper.alpha, hyper.decay, hyper.z);

        let lr_steps: u64 = self.model.counters.cells[k].iter().map(|c| c.projected).sum();
        let a_lr = learning_rate(alpha, decay, lr_steps);
        self.model.locations[k] = update_lr(&self.model.locations[k], x, a_lr);

        let cell_steps = self.model.counters.cells[k][l].projected;
        let a_rr = learning_rate(alpha, decay, cell_steps);
        let u = &mut self.model.radii[k];
        let before = u[l];
        let moved = update_rr(before, theta, a_rr, z);
        // an exact tie with a neighbour would leave an empty interval; keep the old value
        let collides = u.iter().enumerate().any(|(j, &v)| j != l && v == moved);
        if !collides {
            u[l] = moved;
        }
        let after = u[l];

        {
            let cell = &mut self.model.counters.cells[k][l];
            cell.buffer.push((theta, ys));
            cell.projected += 1;
        }
        let l_after = self.resort(k, l);
        self.model.counters.pending += 1;
        self.model.counters.steps += 1;
        Ok(Assignment {
            k,
            l,
            l_after,
            rr_before: before,
            rr_after: after,
        })
    }

    /// Bubble the representative at `l` into ascending position, carrying its
    /// PLR and counters along.
    fn resort(&mut self, k: usize, mut l: usize) -> usize {
        let m = &mut self.model;
        while l > 0 && m.radii[k][l] < m.radii[k][l - 1] {
            m.radii[k].swap(l, l - 1);
            m.plrs[k].swap(l, l - 1);
            m.counters.cells[k].swap(l, l - 1);
            l -= 1;
        }
        while l + 1 < m.radii[k].len() && m.radii[k][l] > m.radii[k][l + 1] {
            m.radii[k].swap(l, l + 1);
            m.plrs[k].swap(l, l + 1);
            m.counters.cells[k].swap(l, l + 1);
            l += 1;
        }
        l
    }

    /// Refit every cell with buffered pairs once `retrain_every` pairs have
    /// been processed since the last retrain.
    pub fn maybe_retrain(&mut self) -> Result<Option<RetrainReport>> {
        if self.model.counters.pending < self.model.hyper.retrain_every {
            return Ok(None);
        }
        Ok(Some(self.retrain()))
    }

    /// Unconditional refit of the touched cells.
    pub fn retrain(&mut self) -> RetrainReport {
        let cfg = self.model.hyper.plr;
        let mut refit = Vec::new();
        let mut failed = Vec::new();
        for (k, row) in self.model.counters.cells.iter_mut().enumerate() {
            for (l, cell) in row.iter_mut().enumerate() {
                if cell.buffer.is_empty() {
                    continue;
                }
                let mut samples = std::mem::take(&mut cell.samples);
                samples.append(&mut cell.buffer);
                samples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                match fit(&samples, &cfg) {
                    Ok(f) => {
                        self.model.plrs[k][l] = f.model;
                        refit.push((k, l));
                    }
                    Err(e) => {
                        log::warn!("refit of cell ({k}, {l}) failed, keeping previous PLR: {e}");
                        failed.push((k, l));
                    }
                }
                cell.samples = samples;
            }
        }
        self.model.counters.pending = 0;
        self.model.counters.retrains += 1;
        self.model.version += 1;
        RetrainReport {
            refit,
            failed,
            version: self.model.version,
        }
    }

    /// `process_pair` followed by `maybe_retrain`.
    pub fn observe(&mut self, x: &[f64], theta: f64, y: f64) -> Result<(Assignment, Option<RetrainReport>)> {
        let a = self.process_pair(x, theta, y)?;
        let r = self.maybe_retrain()?;
        Ok((a, r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{AggregateKind, Dataset};
    use crate::geometry::Point;
    use crate::model::tests::shaped_model;
    use crate::plr::training_r2;
    use crate::quantizer::SelectKConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp, Normal};

    fn q(c: &[f64], theta: f64, y: f64) -> Query {
        Query::new(Point::new(c.to_vec()).unwrap(), theta).unwrap().with_answer(y)
    }

    fn unit_scaling(d: usize) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); d]
    }

    #[test]
    fn update_rr_examples() {
        assert!((update_rr(0.10, 0.20, 0.01, 0.5) - 0.105).abs() < 1e-15);
        assert_eq!(update_rr(0.3, 0.3, 0.01, 0.5), 0.3);
        assert_eq!(update_rr(0.3, 0.1, 0.01, 0.5), 0.3 - 0.005);
        assert_eq!(update_rr(0.3, -50.0, 0.01, 0.5), 0.3 - 0.005);
    }

    #[test]
    fn update_lr_examples() {
        assert_eq!(update_lr(&[0.4, 0.2], &[0.4, 0.2], 0.01), vec![0.4, 0.2]);
        let w = update_lr(&[0.0, 0.0], &[1.0, 0.0], 0.01);
        assert!((w[0] - 0.01).abs() < 1e-15 && w[1] == 0.0);
        let mut w = vec![0.0];
        for t in 1..=200 {
            w = update_lr(&w, &[1.0], 0.05);
            let expected = 1.0 - 0.95f64.powi(t);
            assert!((w[0] - expected).abs() < 1e-12);
        }
    }

    fn two_rr_model() -> ExplanationModel {
        let mut m = shaped_model(1, 2);
        m.radii = vec![vec![0.1, 0.3]];
        m.scaling.answer = (0.0, 1.0);
        m
    }

    #[test]
    fn assignment_example() {
        let mut m = two_rr_model();
        let y = 0.37;
        m.plrs[0] = vec![PlrModel::constant(y), PlrModel::constant(y + 1.0)];
        assert_eq!(assign(&m, &[0.1, 0.7], 0.18, y).unwrap(), (0, 0));
    }

    #[test]
    fn assignment_limits() {
        let mut m = two_rr_model();
        // second cell predicts perfectly, first is far off
        m.plrs[0] = vec![PlrModel::constant(5.0), PlrModel::constant(0.2)];
        m.hyper.z = 1.0 - 1e-12;
        assert_eq!(assign(&m, &[0.1, 0.7], 0.12, 0.2).unwrap().1, 0);
        m.hyper.z = 1e-12;
        assert_eq!(assign(&m, &[0.1, 0.7], 0.12, 0.2).unwrap().1, 1);
    }

    #[test]
    fn preprocess_single_query() {
        let h = [q(&[0.3, 0.4], 0.1, 12.0)];
        let m = preprocess(&h, &Hyperparams::default(), unit_scaling(2), NormOrder::EUCLIDEAN).unwrap();
        assert_eq!(m.k(), 1);
        assert_eq!(m.l(0), 1);
        assert_eq!(m.plrs[0][0].num_terms(), 0);
        assert_eq!(crate::explainer::predict_answer(&m, &[0.3, 0.4], 0.1).unwrap().y_hat, 12.0);
        assert!(preprocess(&[], &Hyperparams::default(), unit_scaling(2), NormOrder::EUCLIDEAN).is_err());
        let unlabeled = [Query::new(Point::new(vec![0.1, 0.1]).unwrap(), 0.1).unwrap()];
        assert!(preprocess(&unlabeled, &Hyperparams::default(), unit_scaling(2), NormOrder::EUCLIDEAN).is_err());
    }

    /// Synthetic dataset plus history from two far center blobs and two radius bands.
    fn blob_history(seed: u64) -> (Dataset, Vec<Query>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.08).unwrap();
        let rows: Vec<Vec<f64>> = (0..4000)
            .map(|_| {
                let c = if rng.random_bool(0.5) { 0.25 } else { 0.75 };
                vec![c + noise.sample(&mut rng), c + noise.sample(&mut rng)]
            })
            .collect();
        let ds = Dataset::from_rows("b", rows, None).unwrap().with_index();
        let jitter = Normal::new(0.0, 0.005).unwrap();
        let mut history = Vec::new();
        for i in 0..400 {
            let c = if i % 2 == 0 { 0.25 } else { 0.75 };
            let band = if (i / 2) % 2 == 0 { 0.05 } else { 0.15 };
            let center = vec![c + jitter.sample(&mut rng), c + jitter.sample(&mut rng)];
            let theta = band + rng.random_range(-0.01..0.01);
            let mut query = Query::new(Point::new(center).unwrap(), theta).unwrap();
            let y = ds.execute_aq(&query, AggregateKind::Count).unwrap().value().unwrap();
            query.answer = Some(y);
            history.push(query);
        }
        (ds, history)
    }

    fn blob_hyper() -> Hyperparams {
        Hyperparams {
            l1: SelectKConfig::new(1, 1e-3, 10).per_sample(),
            l2: SelectKConfig::new(1, 1e-3, 10).per_sample(),
            ..Hyperparams::default()
        }
    }

    #[test]
    fn preprocess_two_blobs_two_bands() {
        let (_, history) = blob_history(1);
        let m = preprocess(&history, &blob_hyper(), unit_scaling(2), NormOrder::EUCLIDEAN).unwrap();
        assert_eq!(m.k(), 2);
        for k in 0..2 {
            assert_eq!(m.l(k), 2, "{:?}", m.radii);
            for l in 0..2 {
                let cell = &m.counters.cells[k][l];
                let r2 = training_r2(&m.plrs[k][l], &cell.samples);
                assert!(r2 >= 0.9, "cell ({k},{l}) r2 {r2}");
            }
        }
    }

    #[test]
    fn preprocess_is_invariant_to_duplication() {
        let (_, history) = blob_history(2);
        let doubled: Vec<Query> = history.iter().flat_map(|q| [q.clone(), q.clone()]).collect();
        let a = preprocess(&history, &blob_hyper(), unit_scaling(2), NormOrder::EUCLIDEAN).unwrap();
        let b = preprocess(&doubled, &blob_hyper(), unit_scaling(2), NormOrder::EUCLIDEAN).unwrap();
        assert_eq!(a.k(), b.k());
        for (wa, wb) in a.locations.iter().zip(&b.locations) {
            for (x, y) in wa.iter().zip(wb) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        for k in 0..a.k() {
            assert_eq!(a.l(k), b.l(k));
            for l in 0..a.l(k) {
                assert!((a.radii[k][l] - b.radii[k][l]).abs() < 1e-9);
                let (pa, pb) = (&a.plrs[k][l], &b.plrs[k][l]);
                assert_eq!(pa.num_terms(), pb.num_terms());
                for t in [0.03, 0.06, 0.1, 0.14, 0.2] {
                    assert!((pa.predict(t) - pb.predict(t)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn process_pair_moves_toward_theta_every_time() {
        let (_, history) = blob_history(3);
        let m = preprocess(&history, &blob_hyper(), unit_scaling(2), NormOrder::EUCLIDEAN).unwrap();
        let mut t = Trainer::new(m).unwrap();
        let x = [0.26, 0.24];
        let a1 = t.process_pair(&x, 0.3, 50.0).unwrap();
        let a2 = t.process_pair(&x, 0.3, 50.0).unwrap();
        assert!(a1.rr_after > a1.rr_before);
        assert!(a2.rr_after > a2.rr_before);
        assert_eq!(t.model().counters.steps, 2);
        let step = t.model().hyper.alpha * t.model().hyper.z;
        assert!(((a1.rr_after - a1.rr_before) - step).abs() < 1e-15);
        t.model().validate().unwrap();
    }

    #[test]
    fn rr_crossing_keeps_cells_attached() {
        let mut m = two_rr_model();
        m.radii = vec![vec![0.1, 0.1049]];
        m.hyper.alpha = 0.02;
        m.plrs[0] = vec![PlrModel::constant(0.1), PlrModel::constant(0.9)];
        let mut t = Trainer::new(m).unwrap();
        // the answer matches cell 0, whose step of alpha * z = 0.01 crosses 0.1049
        let a = t.process_pair(&[0.1, 0.7], 0.2, 0.1).unwrap();
        assert_eq!((a.l, a.l_after), (0, 1));
        let m = t.model();
        assert!(m.radii[0][0] < m.radii[0][1]);
        assert_eq!(m.plrs[0][1], PlrModel::constant(0.1));
        assert_eq!(m.counters.cells[0][1].buffer.len(), 1);
        m.validate().unwrap();
    }

    fn exp_radii(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Exp::<f64>::new(10.0).unwrap();
        (0..n).map(|_| e.sample(&mut rng).clamp(1e-6, 1.0)).collect()
    }

    fn median(v: &[f64]) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        }
    }

    fn single_cell_model(u0: f64, decay: bool) -> ExplanationModel {
        let mut m = shaped_model(1, 1);
        m.radii = vec![vec![u0]];
        m.plrs = vec![vec![PlrModel::constant(0.0)]];
        m.hyper.z = 1.0;
        m.hyper.alpha = 0.01;
        m.hyper.decay = decay;
        m.hyper.retrain_every = u64::MAX;
        m
    }

    #[test]
    fn rr_tracks_the_median() {
        let radii = exp_radii(17, 10_000);
        let med = median(&radii);
        let mut t = Trainer::new(single_cell_model(0.1, false)).unwrap();
        let tail_start = radii.len() * 4 / 5;
        let mut tail = Vec::new();
        for (i, &r) in radii.iter().enumerate() {
            t.process_pair(&[0.1, 0.7], r, 1.0).unwrap();
            if i >= tail_start {
                tail.push(t.model().radii[0][0]);
            }
        }
        let avg = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!((avg - med).abs() <= 0.02, "avg {avg} median {med}");
    }

    #[test]
    fn step_magnitude_is_constant() {
        let mut t = Trainer::new(single_cell_model(0.5, false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let theta = rng.random_range(0.01..1.0);
            let a = t.process_pair(&[0.1, 0.7], theta, 1.0).unwrap();
            if theta != a.rr_before {
                assert!(((a.rr_after - a.rr_before).abs() - 0.01).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn retrain_counter_semantics() {
        let (ds, history) = blob_history(4);
        let mut hyper = blob_hyper();
        hyper.retrain_every = 100;
        let m = preprocess(&history, &hyper, unit_scaling(2), NormOrder::EUCLIDEAN).unwrap();
        let mut t = Trainer::new(m).unwrap();
        let v0 = t.model().version;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut touched = std::collections::BTreeSet::new();
        for i in 0..100 {
            let query = Query::new(Point::new(vec![0.25 + rng.random_range(-0.01..0.01), 0.25]).unwrap(), rng.random_range(0.04..0.06)).unwrap();
            let y = ds.execute_aq(&query, AggregateKind::Count).unwrap().value().unwrap();
            let (a, r) = t.observe(query.center.coords(), query.theta, y).unwrap();
            touched.insert((a.k, a.l_after));
            if i < 99 {
                assert!(r.is_none());
            } else {
                let r = r.expect("100th pair triggers a refit");
                let refit: std::collections::BTreeSet<_> = r.refit.into_iter().collect();
                assert_eq!(refit, touched);
                assert_eq!(r.version, v0 + 1);
            }
        }
        assert!(t.model().counters.cells.iter().flatten().all(|c| c.buffer.is_empty()));
    }

    #[test]
    fn retrain_on_consistent_pairs_keeps_predictions() {
        let truth = PlrModel::new(0.1, vec![(2.0, 0.1)]).unwrap();
        let history: Vec<Query> = (0..40)
            .map(|i| {
                let theta = 0.02 + 0.005 * i as f64;
                q(&[0.5, 0.5], theta, truth.predict(theta))
            })
            .collect();
        let hyper = Hyperparams {
            l2: SelectKConfig::new(1, 1e9, 1),
            retrain_every: 10,
            ..blob_hyper()
        };
        let m = preprocess(&history, &hyper, unit_scaling(2), NormOrder::EUCLIDEAN).unwrap();
        let before = m.clone();
        let mut t = Trainer::new(m).unwrap();
        for i in 0..10 {
            let theta = 0.0225 + 0.017 * i as f64;
            t.observe(&[0.5, 0.5], theta, truth.predict(theta)).unwrap();
        }
        assert_eq!(t.model().counters.retrains, 1);
        for theta in [0.03, 0.08, 0.15, 0.19, 0.2] {
            let a = crate::explainer::predict_answer(&before, &[0.5, 0.5], theta).unwrap().y_hat;
            let b = t.model().scaling.denormalize_answer(t.model().plrs[0][0].predict(theta));
            assert!((a - b).abs() < 1e-6, "{theta}: {a} vs {b}");
        }
    }

    #[test]
    fn retrain_adapts_to_shifted_function() {
        let history: Vec<Query> = (0..40)
            .map(|i| {
                let theta = 0.02 + 0.005 * i as f64;
                q(&[0.5, 0.5], theta, 10.0 * theta)
            })
            .collect();
        let hyper = Hyperparams {
            l2: SelectKConfig::new(1, 1e9, 1),
            retrain_every: 60,
            ..blob_hyper()
        };
        let m = preprocess(&history, &hyper, unit_scaling(2), NormOrder::EUCLIDEAN).unwrap();
        let mut t = Trainer::new(m).unwrap();
        let shifted: Vec<(f64, f64)> = (0..60).map(|i| (0.02 + 0.003 * i as f64, 3.0 + 10.0 * (0.02 + 0.003 * i as f64))).collect();
        let scaled: Vec<(f64, f64)> = shifted
            .iter()
            .map(|&(th, y)| (th, t.model().scaling.normalize_answer(y)))
            .collect();
        let pre = training_r2(&t.model().plrs[0][0], &scaled);
        for &(th, y) in &shifted {
            t.observe(&[0.5, 0.5], th, y).unwrap();
        }
        let post = training_r2(&t.model().plrs[0][0], &scaled);
        assert!(post >= pre, "pre {pre} post {post}");
    }
}

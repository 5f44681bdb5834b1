//! HTTP facade over model snapshots.
//!
//! Read endpoints (`/model`, `/explain`, `/predict`) work on the current
//! snapshot only and never reach the dataset. `/observe` validates a pair and
//! queues it for a single trainer thread, which publishes a new snapshot
//! after every retrain. `/actual` answers from the dataset when one is
//! mounted and exists for ground-truth overlays.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use qexplain_core::metrics::EvaluationReport;
use qexplain_core::{
    build_explanation, predict_answer, AggregateKind, AqAnswer, Dataset, ExplanationModel, ModelStore, Point,
    Query, Snapshot, Trainer,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::mpsc;

use crate::commands::curve_grid;

pub const VERSION_HEADER: &str = "x-model-version";
const QUEUE_DEPTH: usize = 4096;

struct Pair {
    x: Vec<f64>,
    theta: f64,
    y: f64,
}

#[derive(Clone)]
pub struct AppState {
    store: Arc<ModelStore>,
    dataset: Option<Arc<Dataset>>,
    report: Arc<RwLock<Option<EvaluationReport>>>,
    queue: mpsc::Sender<Pair>,
}

impl AppState {
    /// Build the state and start the trainer thread. The model is persisted
    /// to `save` after every retrain when given.
    pub fn new(
        model: ExplanationModel,
        dataset: Option<Dataset>,
        report: Option<EvaluationReport>,
        save: Option<PathBuf>,
    ) -> Self {
        let store = Arc::new(ModelStore::new(model.clone()));
        let (tx, rx) = mpsc::channel(QUEUE_DEPTH);
        let writer = Arc::clone(&store);
        std::thread::spawn(move || train_loop(model, rx, writer, save));
        AppState {
            store,
            dataset: dataset.map(Arc::new),
            report: Arc::new(RwLock::new(report)),
            queue: tx,
        }
    }

    pub fn store(&self) -> &ModelStore {
        &self.store
    }

    pub fn dataset(&self) -> Option<&Dataset> {
        self.dataset.as_deref()
    }

    pub fn set_report(&self, report: EvaluationReport) {
        *self.report.write() = Some(report);
    }
}

fn train_loop(model: ExplanationModel, mut rx: mpsc::Receiver<Pair>, store: Arc<ModelStore>, save: Option<PathBuf>) {
    let mut trainer = match Trainer::new(model) {
        Ok(t) => t,
        Err(e) => {
            log::error!("trainer disabled: {e}");
            return;
        }
    };
    while let Some(p) = rx.blocking_recv() {
        match trainer.observe(&p.x, p.theta, p.y) {
            Ok((_, Some(report))) => {
                let v = store.publish(trainer.model().clone());
                log::info!("retrained {} cells, published version {v}", report.refit.len());
                if let Some(path) = &save {
                    if let Err(e) = trainer.model().save(path) {
                        log::warn!("could not persist model: {e}");
                    }
                }
            }
            Ok((_, None)) => {}
            Err(e) => log::warn!("dropped training pair: {e}"),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/model", get(model_summary))
        .route("/explain", post(explain))
        .route("/predict", post(predict))
        .route("/observe", post(observe))
        .route("/actual", post(actual))
        .route("/metrics/latest", get(latest_metrics))
        .with_state(state)
}

struct ApiError {
    status: StatusCode,
    message: String,
    version: u64,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        reply(self.status, self.version, json!({ "error": self.message }))
    }
}

type ApiResult = Result<Response, ApiError>;

fn reply(status: StatusCode, version: u64, body: impl Serialize) -> Response {
    let mut resp = (status, Json(body)).into_response();
    resp.headers_mut()
        .insert(VERSION_HEADER, HeaderValue::from(version));
    resp
}

fn parse<T: DeserializeOwned>(body: &Bytes, version: u64) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError {
        status: StatusCode::BAD_REQUEST,
        message: format!("malformed request body: {e}"),
        version,
    })
}

#[derive(Deserialize)]
struct Located {
    x: Vec<f64>,
    theta: f64,
    /// Center in raw data units.
    #[serde(default)]
    raw: bool,
}

impl Located {
    /// Validated center in normalized coordinates.
    fn center(&self, model: &ExplanationModel) -> Result<Vec<f64>, ApiError> {
        let err = |status, message: String| ApiError {
            status,
            message,
            version: model.version,
        };
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(err(StatusCode::BAD_REQUEST, format!("theta must be positive, got {}", self.theta)));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(err(StatusCode::BAD_REQUEST, "center coordinates must be finite".into()));
        }
        if self.x.len() != model.dim() {
            return Err(err(
                StatusCode::CONFLICT,
                format!("model has {} dims, center has {}", model.dim(), self.x.len()),
            ));
        }
        if self.raw {
            model
                .scaling
                .coord_scaling()
                .normalize_point(&self.x)
                .map_err(|e| err(StatusCode::BAD_REQUEST, e.to_string()))
        } else {
            Ok(self.x.clone())
        }
    }
}

fn internal(e: qexplain_core::Error, version: u64) -> ApiError {
    ApiError {
        status: StatusCode::BAD_REQUEST,
        message: e.to_string(),
        version,
    }
}

async fn model_summary(State(st): State<AppState>) -> Response {
    let m: Snapshot = st.store.snapshot();
    reply(
        StatusCode::OK,
        m.version,
        json!({
            "version": m.version,
            "dim": m.dim(),
            "k": m.k(),
            "l": m.radii.iter().map(Vec::len).collect::<Vec<_>>(),
            "aggregate": m.aggregate,
            "answer_range": m.scaling.answer,
            "locations": m.locations,
            "radii": m.radii,
            "steps": m.counters.steps,
            "retrains": m.counters.retrains,
        }),
    )
}

#[derive(Deserialize)]
struct ExplainRequest {
    #[serde(flatten)]
    at: Located,
    n: Option<usize>,
}

async fn explain(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let m = st.store.snapshot();
    let req: ExplainRequest = parse(&body, m.version)?;
    let x = req.at.center(&m)?;
    let p = predict_answer(&m, &x, req.at.theta).map_err(|e| internal(e, m.version))?;
    let expl = build_explanation(&m, &x).map_err(|e| internal(e, m.version))?;
    let n = req.n.unwrap_or(m.hyper.n_subradii).clamp(2, 10_000);
    let export = expl.to_export(&curve_grid(req.at.theta, m.hyper.theta_min, n));
    Ok(reply(
        StatusCode::OK,
        m.version,
        crate::commands::ExplainOutput {
            x,
            theta: req.at.theta,
            y_hat: p.y_hat,
            segment: p.segment,
            explanation: export,
        },
    ))
}

async fn predict(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let m = st.store.snapshot();
    let req: Located = parse(&body, m.version)?;
    let x = req.center(&m)?;
    let p = predict_answer(&m, &x, req.theta).map_err(|e| internal(e, m.version))?;
    Ok(reply(StatusCode::OK, m.version, p))
}

#[derive(Deserialize)]
struct ObserveRequest {
    #[serde(flatten)]
    at: Located,
    y: f64,
}

async fn observe(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let m = st.store.snapshot();
    let req: ObserveRequest = parse(&body, m.version)?;
    let x = req.at.center(&m)?;
    if !req.y.is_finite() {
        return Err(ApiError {
            status: StatusCode::BAD_REQUEST,
            message: "y must be finite".into(),
            version: m.version,
        });
    }
    let pair = Pair {
        x,
        theta: req.at.theta,
        y: req.y,
    };
    st.queue.send(pair).await.map_err(|_| ApiError {
        status: StatusCode::SERVICE_UNAVAILABLE,
        message: "trainer is not running".into(),
        version: m.version,
    })?;
    Ok(reply(StatusCode::ACCEPTED, m.version, json!({ "accepted": true, "version": m.version })))
}

#[derive(Deserialize)]
struct ActualRequest {
    #[serde(flatten)]
    at: Located,
    n: Option<usize>,
    aggregate: Option<AggregateKind>,
}

#[derive(Serialize)]
struct ActualPoint {
    theta: f64,
    y: Option<f64>,
}

async fn actual(State(st): State<AppState>, body: Bytes) -> ApiResult {
    let m = st.store.snapshot();
    let Some(ds) = st.dataset.clone() else {
        return Err(ApiError {
            status: StatusCode::NOT_FOUND,
            message: "no dataset mounted".into(),
            version: m.version,
        });
    };
    let req: ActualRequest = parse(&body, m.version)?;
    let x = req.at.center(&m)?;
    let kind = req.aggregate.or(m.aggregate).unwrap_or(AggregateKind::Count);
    let n = req.n.unwrap_or(m.hyper.n_subradii).clamp(2, 10_000);
    let q = Query::new(Point::new(x).map_err(|e| internal(e, m.version))?, req.at.theta)
        .map_err(|e| internal(e, m.version))?;
    let theta_min = m.hyper.theta_min;
    let points = tokio::task::spawn_blocking(move || {
        if q.theta > theta_min {
            ds.actual_explanation(&q, kind, n, theta_min)
        } else {
            ds.execute_aq(&q, kind).map(|a| vec![(q.theta, a)])
        }
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: e.to_string(),
        version: m.version,
    })?
    .map_err(|e| internal(e, m.version))?;
    let points: Vec<ActualPoint> = points
        .into_iter()
        .map(|(theta, a)| ActualPoint {
            theta,
            y: match a {
                AqAnswer::Value(v) => Some(v),
                AqAnswer::EmptySubspace => None,
            },
        })
        .collect();
    Ok(reply(StatusCode::OK, m.version, json!({ "aggregate": kind, "points": points })))
}

async fn latest_metrics(State(st): State<AppState>) -> Response {
    let version = st.store.version();
    match st.report.read().clone() {
        Some(r) => reply(StatusCode::OK, version, r),
        None => reply(StatusCode::NOT_FOUND, version, json!({ "error": "no evaluation report loaded" })),
    }
}

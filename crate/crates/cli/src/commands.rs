//! Subcommands of the `qexplain` binary.
//!
//! Every command returns a one-line `key=value` summary on success. Failures
//! carry the process exit code of their class.

use std::fmt;
use std::fs::File;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use qexplain_core::dataset::radius_grid;
use qexplain_core::metrics::{evaluate, EvalOptions, EvaluationReport};
use qexplain_core::workloadgen::{generate, load_queries, split, Workload};
use qexplain_core::{
    build_explanation, predict_answer, AggregateKind, Dataset, Error, ExplanationModel, Family, Hyperparams,
    NormOrder, ScalingParams, Trainer, WorkloadSpec,
};
use serde::Serialize;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_MODEL: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: msg.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Usage(_) => EXIT_USAGE,
            Error::Data(_) | Error::MalformedRow { .. } | Error::Io { .. } | Error::Csv(_) => EXIT_DATA,
            Error::Model(_) | Error::Json(_) => EXIT_MODEL,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "qexplain", version, about = "Explain aggregate queries from past query/answer pairs")]
pub struct Cli {
    /// Seed for every random choice made by the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a raw CSV dataset into the unit cube.
    Ingest(IngestArgs),
    /// Generate a labeled synthetic query workload.
    Genwl(GenwlArgs),
    /// Build a model from a labeled workload.
    Preprocess(PreprocessArgs),
    /// Stream query/answer pairs through an existing model.
    Train(TrainArgs),
    /// Print the explanation of one query as JSON.
    Explain(ExplainArgs),
    /// Compare a model against ground truth on an evaluation workload.
    Evaluate(EvaluateArgs),
    /// Serve a model over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Comma-separated coordinate column names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub columns: Vec<String>,
    /// Column holding the measure aggregated by SUM and AVG.
    #[arg(long)]
    pub measure: Option<String>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// Normalized dataset output.
    #[arg(long)]
    pub out: PathBuf,
    /// Scaling parameters output.
    #[arg(long)]
    pub scaling: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenwlArgs {
    /// Normalized dataset used for labeling.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "COUNT")]
    pub aggregate: AggregateKind,
    /// Center family: gauss, uni or domain.
    #[arg(long, default_value = "gauss")]
    pub centers: Family,
    /// Radius family: gauss, uni or domain.
    #[arg(long, default_value = "gauss")]
    pub radii: Family,
    #[arg(long = "c", default_value_t = 5)]
    pub c: usize,
    #[arg(long = "j", default_value_t = 3)]
    pub j: usize,
    #[arg(long, default_value_t = 1000)]
    pub m: usize,
    #[arg(long)]
    pub theta_min: Option<f64>,
    #[arg(long)]
    pub norm: Option<NormOrder>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a held-out evaluation split here (the training part goes to `--out`).
    #[arg(long)]
    pub eval_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub eval_fraction: f64,
}

#[derive(Debug, Args, Default)]
pub struct HyperArgs {
    /// Weight of the radius distance in training assignments.
    #[arg(long)]
    pub z: Option<f64>,
    /// Learning rate.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Decay the learning rate with the number of updates.
    #[arg(long)]
    pub decay: bool,
    /// Elbow threshold for the number of location representatives (per query).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Elbow threshold for the number of radius representatives (per query).
    #[arg(long)]
    pub epsilon_radius: Option<f64>,
    /// Upper bound on the number of location representatives.
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Upper bound on the number of radius representatives per location.
    #[arg(long)]
    pub l_max: Option<usize>,
    #[arg(long)]
    pub retrain_every: Option<u64>,
    #[arg(long)]
    pub n_subradii: Option<usize>,
    #[arg(long)]
    pub theta_min: Option<f64>,
}

impl HyperArgs {
    pub fn apply(&self, h: &mut Hyperparams) {
        if let Some(v) = self.z {
            h.z = v;
        }
        if let Some(v) = self.alpha {
            h.alpha = v;
        }
        if self.decay {
            h.decay = true;
        }
        if let Some(v) = self.epsilon {
            h.l1.epsilon = v;
        }
        if let Some(v) = self.epsilon_radius {
            h.l2.epsilon = v;
        }
        if let Some(v) = self.k_max {
            h.l1.k_max = v;
            h.l1.k0 = h.l1.k0.min(v.max(1));
        }
        if let Some(v) = self.l_max {
            h.l2.k_max = v;
            h.l2.k0 = h.l2.k0.min(v.max(1));
        }
        if let Some(v) = self.retrain_every {
            h.retrain_every = v;
        }
        if let Some(v) = self.n_subradii {
            h.n_subradii = v;
        }
        if let Some(v) = self.theta_min {
            h.theta_min = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub workload: PathBuf,
    /// Scaling file from `ingest`; identity scaling when absent.
    #[arg(long)]
    pub scaling: Option<PathBuf>,
    #[arg(long)]
    pub norm: Option<NormOrder>,
    #[arg(long)]
    pub aggregate: Option<AggregateKind>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Labeled queries to stream, in file order.
    #[arg(long)]
    pub stream: PathBuf,
    /// Output path; defaults to overwriting `--model`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// First coordinate of the query center.
    #[arg(long, allow_hyphen_values = true)]
    pub x: Option<f64>,
    /// Second coordinate of the query center.
    #[arg(long, allow_hyphen_values = true)]
    pub y: Option<f64>,
    /// Full comma-separated center; alternative to `--x/--y`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub point: Option<Vec<f64>>,
    #[arg(long)]
    pub theta: f64,
    /// The center is in raw data units rather than normalized ones.
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub n_subradii: Option<usize>,
    /// Write the sampled curve as CSV.
    #[arg(long)]
    pub curve_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation queries (workload file or plain query CSV).
    #[arg(long)]
    pub eval: PathBuf,
    /// Normalized dataset for ground truth.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub aggregate: Option<AggregateKind>,
    #[arg(long)]
    pub n_subradii: Option<usize>,
    #[arg(long)]
    pub theta_min: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub kl_bins: usize,
    /// Report the mean squared error over the range, without the square root.
    #[arg(long)]
    pub paper_literal_nrmse: bool,
    #[arg(long)]
    pub report_json: Option<PathBuf>,
    #[arg(long)]
    pub report_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Normalized dataset; enables `/actual` only.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Evaluation report served at `/metrics/latest`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Persist the model here after every retrain.
    #[arg(long)]
    pub save: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
}

/// Run one parsed command. `out` receives command output such as the
/// explanation JSON; the returned string is the summary line.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<String> {
    let seed = cli.seed;
    match cli.command {
        Command::Ingest(a) => ingest(&a),
        Command::Genwl(a) => genwl(&a, seed),
        Command::Preprocess(a) => preprocess(&a, seed),
        Command::Train(a) => train(&a),
        Command::Explain(a) => explain(&a, out),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Serve(a) => serve(&a),
    }
}

fn ingest(a: &IngestArgs) -> CliResult<String> {
    if !a.delimiter.is_ascii() {
        return Err(CliError::usage("delimiter must be a single ASCII character"));
    }
    let cols: Vec<&str> = a.columns.iter().map(String::as_str).collect();
    let raw = Dataset::load_csv(&a.input, &cols, a.measure.as_deref(), a.delimiter as u8)?;
    let (norm, params) = raw.normalize()?;
    norm.write_csv(&a.out)?;
    params.save_json(&a.scaling)?;
    Ok(format!(
        "command=ingest rows={} dim={} measure={} out={}",
        norm.len(),
        norm.dim(),
        a.measure.is_some(),
        a.out.display()
    ))
}

fn load_dataset(path: &Path, norm: Option<NormOrder>) -> CliResult<Dataset> {
    let ds = Dataset::read_csv(path)?;
    let ds = match norm {
        Some(p) => ds.with_norm(p.validate()?),
        None => ds,
    };
    Ok(ds.with_index())
}

fn genwl(a: &GenwlArgs, seed: u64) -> CliResult<String> {
    let ds = load_dataset(&a.dataset, a.norm)?;
    let mut spec = if a.centers == Family::Domain && a.radii == Family::Domain {
        WorkloadSpec::domain_uniform(ds.dim(), a.m, seed)?
    } else {
        WorkloadSpec::mixture(ds.dim(), a.centers, a.radii, a.c, a.j, a.m, seed)?
    };
    if let Some(t) = a.theta_min {
        spec.theta_min = t;
    }
    let w = generate(&spec, &ds, a.aggregate)?;
    let total = w.queries.len();
    let mut eval_len = 0;
    match &a.eval_out {
        Some(eval_path) => {
            let (train, eval) = split(&w.queries, a.eval_fraction, seed)?;
            eval_len = eval.len();
            let train_w = Workload {
                queries: train,
                ..w.clone()
            };
            train_w.save(&a.out)?;
            let eval_w = Workload { queries: eval, ..w };
            eval_w.save(eval_path)?;
        }
        None => w.save(&a.out)?,
    }
    Ok(format!(
        "command=genwl workload={} aggregate={} queries={total} eval={eval_len} out={}",
        spec.name,
        a.aggregate,
        a.out.display()
    ))
}

fn preprocess(a: &PreprocessArgs, seed: u64) -> CliResult<String> {
    let (queries, header_kind) = match Workload::load(&a.workload) {
        Ok(w) => (w.queries, Some(w.aggregate)),
        Err(_) => (load_queries(&a.workload)?, None),
    };
    let dim = queries.first().map(|q| q.dim()).ok_or_else(|| CliError::data("workload is empty"))?;
    let scaling = match &a.scaling {
        Some(p) => ScalingParams::load_json(p)?,
        None => ScalingParams::identity(dim),
    };
    let mut hyper = Hyperparams {
        seed,
        ..Hyperparams::default()
    };
    a.hyper.apply(&mut hyper);
    let norm = a.norm.unwrap_or_default().validate()?;
    let mut model = qexplain_core::preprocess(&queries, &hyper, scaling.coords, norm)?;
    model.aggregate = a.aggregate.or(header_kind);
    model.save(&a.out)?;
    Ok(format!(
        "command=preprocess queries={} k={} cells={} version={} out={}",
        queries.len(),
        model.k(),
        model.total_cells(),
        model.version,
        a.out.display()
    ))
}

fn train(a: &TrainArgs) -> CliResult<String> {
    let mut model = ExplanationModel::load(&a.model)?;
    a.hyper.apply(&mut model.hyper);
    model.hyper.validate()?;
    let stream = load_queries(&a.stream)?;
    let mut trainer = Trainer::new(model)?;
    let mut retrains = 0;
    for (i, q) in stream.iter().enumerate() {
        let y = q
            .answer
            .ok_or_else(|| CliError::data(format!("stream query {} has no answer", i + 1)))?;
        if trainer.observe(q.center.coords(), q.theta, y)?.1.is_some() {
            retrains += 1;
        }
    }
    let model = trainer.into_model();
    let out = a.out.as_ref().unwrap_or(&a.model);
    model.save(out)?;
    Ok(format!(
        "command=train pairs={} retrains={retrains} pending={} version={} out={}",
        stream.len(),
        model.counters.pending,
        model.version,
        out.display()
    ))
}

/// Query center in normalized coordinates from `--x/--y` or `--point`.
fn center(a: &ExplainArgs, model: &ExplanationModel) -> CliResult<Vec<f64>> {
    let raw = match (&a.point, a.x, a.y) {
        (Some(p), None, None) => p.clone(),
        (None, Some(x), y) => std::iter::once(x).chain(y).collect(),
        _ => return Err(CliError::usage("give the center as --x [--y] or as --point")),
    };
    if raw.len() != model.dim() {
        return Err(CliError::usage(format!(
            "model has {} dims, center has {}",
            model.dim(),
            raw.len()
        )));
    }
    if a.raw {
        Ok(model.scaling.coord_scaling().normalize_point(&raw)?)
    } else {
        Ok(raw)
    }
}

#[derive(Serialize)]
pub struct ExplainOutput {
    pub x: Vec<f64>,
    pub theta: f64,
    pub y_hat: f64,
    pub segment: usize,
    #[serde(flatten)]
    pub explanation: qexplain_core::ExplanationExport,
}

/// Radii at which an explanation curve is sampled for a query of radius `theta`.
pub fn curve_grid(theta: f64, theta_min: f64, n: usize) -> Vec<f64> {
    if theta > theta_min {
        radius_grid(theta_min, theta, n)
    } else {
        vec![theta]
    }
}

fn explain(a: &ExplainArgs, out: &mut dyn Write) -> CliResult<String> {
    let model = ExplanationModel::load(&a.model)?;
    let x = center(a, &model)?;
    let p = predict_answer(&model, &x, a.theta)?;
    let expl = build_explanation(&model, &x)?;
    let grid = curve_grid(a.theta, model.hyper.theta_min, a.n_subradii.unwrap_or(model.hyper.n_subradii));
    let export = expl.to_export(&grid);
    if let Some(path) = &a.curve_csv {
        let mut w = csv_writer(path)?;
        w.write_record(["theta", "y_hat", "segment", "slope"]).map_err(csv_err)?;
        for c in &export.curve {
            w.write_record([
                c.theta.to_string(),
                c.y_hat.to_string(),
                c.segment.to_string(),
                c.slope.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    }
    let body = ExplainOutput {
        x: x.clone(),
        theta: a.theta,
        y_hat: p.y_hat,
        segment: p.segment,
        explanation: export,
    };
    let json = serde_json::to_string_pretty(&body).map_err(|e| CliError::data(e.to_string()))?;
    writeln!(out, "{json}").map_err(|e| CliError::data(e.to_string()))?;
    Ok(format!(
        "command=explain lr={} segment={} y_hat={} version={}",
        p.lr_index, p.segment, p.y_hat, p.version
    ))
}

fn csv_writer(path: &Path) -> CliResult<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(csv_err)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::data(e.to_string())
}

fn evaluate_cmd(a: &EvaluateArgs) -> CliResult<String> {
    let model = ExplanationModel::load(&a.model)?;
    let (eval, header_kind, name) = match Workload::load(&a.eval) {
        Ok(w) => (w.queries, Some(w.aggregate), w.spec.name),
        Err(_) => (
            load_queries(&a.eval)?,
            None,
            a.eval
                .file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        ),
    };
    let kind = a
        .aggregate
        .or(model.aggregate)
        .or(header_kind)
        .ok_or_else(|| CliError::usage("aggregate unknown: pass --aggregate"))?;
    let ds = load_dataset(&a.dataset, Some(model.scaling.norm))?;
    let opts = EvalOptions {
        n_subradii: a.n_subradii.unwrap_or(model.hyper.n_subradii),
        theta_min: a.theta_min.unwrap_or(model.hyper.theta_min),
        kl_bins: a.kl_bins,
        paper_literal_nrmse: a.paper_literal_nrmse,
        ..EvalOptions::default()
    };
    let report = evaluate(&model, &eval, &ds, kind, &name, &opts);
    if let Some(p) = &a.report_json {
        report.save_json(p)?;
    }
    if let Some(p) = &a.report_csv {
        let f = File::create(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
        report.write_csv(f)?;
    }
    Ok(format!("command=evaluate {}", report.summary_line()))
}

fn serve(a: &ServeArgs) -> CliResult<String> {
    let model = ExplanationModel::load(&a.model)?;
    let dataset = a
        .dataset
        .as_ref()
        .map(|p| load_dataset(p, Some(model.scaling.norm)))
        .transpose()?;
    let report = a.report.as_ref().map(|p| EvaluationReport::load_json(p)).transpose()?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::data(e.to_string()))?;
    rt.block_on(async {
        let state = crate::service::AppState::new(model, dataset, report, a.save.clone());
        let listener = tokio::net::TcpListener::bind(a.bind)
            .await
            .map_err(|e| CliError::usage(format!("cannot bind {}: {e}", a.bind)))?;
        log::info!("listening on {}", a.bind);
        axum::serve(listener, crate::service::router(state))
            .await
            .map_err(|e| CliError::data(e.to_string()))
    })?;
    Ok("command=serve stopped=true".to_string())
}

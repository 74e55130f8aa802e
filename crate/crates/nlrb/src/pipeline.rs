//! The pipeline stages. Each `cmd_*` function is what the matching
//! subcommand runs; they are public so tests can drive the pipeline
//! in-process.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use nlrb_core::baselines::{optimal_projection_error, podnn_predict, train_podnn, PodNnModel};
use nlrb_core::eval::{aggregate, relative_error_with, worst_decile, ErrorNorm, Method};
use nlrb_core::grid::{build_grid, quadrature_weights, Grid, Quadrature};
use nlrb_core::linalg::Matrix;
use nlrb_core::model::{
    dataset_from_problem, evaluate_basis_features, reconstruct_with, train_offline, BasisFeatures, CompositeModel,
};
use nlrb_core::net::{Activation, FlatParams, Mlp, MlpSpec};
use nlrb_core::online::{adapt, AdaptationResult, InitialGuess};
use nlrb_core::pod::{assemble_snapshots, compute_pod, ReducedBasis, SnapshotSet};
use nlrb_core::problems::{burgers_problem, sample_params, Burgers, Problem};
use nlrb_core::Clock;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{hash_bytes, RunConfig};
use crate::io::{
    read_json, read_matrix, read_results, read_vector, write_json, write_matrix, write_results, write_text,
    write_vector, Manifest, ResultRow,
};
use crate::CliError;

/// Wall clock backed by [`Instant`].
#[derive(Debug, Clone, Copy)]
pub struct StdClock(Instant);

impl Default for StdClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for StdClock {
    fn now_s(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Paths inside a work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn snapshots(&self) -> PathBuf {
        self.root.join("snapshots")
    }

    pub fn basis(&self) -> PathBuf {
        self.root.join("basis")
    }

    pub fn model(&self, r: usize) -> PathBuf {
        self.root.join("models").join(format!("nonlinear-r{r}"))
    }

    pub fn podnn(&self, r: usize) -> PathBuf {
        self.root.join("models").join(format!("podnn-r{r}"))
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn results_table(&self, method: Method, r: usize) -> PathBuf {
        self.results().join(format!("{}-r{r}.csv", method.as_str()))
    }

    pub fn figures_data(&self) -> PathBuf {
        self.root.join("figures-data")
    }
}

/// Which parameter values `cmd_adapt` works on.
#[derive(Debug, Clone, PartialEq)]
pub enum AdaptTarget {
    /// Explicit values; loss histories are written for each.
    Points(Vec<Vec<f64>>),
    /// The whole test set.
    TestSet,
    /// The tenth of the test set with the largest offline errors.
    WorstDecile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitChoice {
    Warm,
    Random,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Podnn,
    Projection,
}

/// Everything every stage needs: configuration, hashes, problem and grid.
pub struct Context {
    pub cfg: RunConfig,
    pub work: Workdir,
    pub problem: Burgers,
    pub grid: Grid,
    pub quad: Quadrature,
    pub norm: ErrorNorm,
}

impl Context {
    pub fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        let problem = burgers_problem(cfg.problem.kappa)?;
        let grid = build_grid(cfg.grid.n, cfg.grid_kind()?)?;
        let quad = quadrature_weights(&grid);
        Ok(Self {
            work: Workdir::new(&cfg.paths.workdir),
            norm: cfg.error_norm()?,
            cfg: cfg.clone(),
            problem,
            grid,
            quad,
        })
    }

    fn results_hash(&self, stage_hash: &str) -> String {
        hash_bytes(&[stage_hash, &serde_json::to_string(&self.cfg.eval).expect("config serializes")])
    }

    fn error(&self, pred: &[f64], mu: &[f64]) -> Result<f64, CliError> {
        let exact = self.problem.sample_solution(&self.grid, mu)?;
        Ok(relative_error_with(pred, &exact, &self.quad, self.norm)?)
    }

    fn timing(&self, seconds: f64) -> f64 {
        if self.cfg.eval.record_timing {
            seconds
        } else {
            0.0
        }
    }
}

fn write_manifest(dir: &Path, stage: &str, hash: &str, upstream: &str, files: &[&str], info: Value) -> Result<(), CliError> {
    let info = match info {
        Value::Object(m) => m,
        Value::Null => Default::default(),
        other => [("value".to_string(), other)].into_iter().collect(),
    };
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            stage: stage.into(),
            config_hash: hash.into(),
            upstream_hash: upstream.into(),
            files: files.iter().map(|s| s.to_string()).collect(),
            info,
        },
    )
}

/// Reads a stage manifest and fails unless it matches `expected`.
fn check_manifest(dir: &Path, expected: &str) -> Result<Manifest, CliError> {
    let path = dir.join("manifest.json");
    let m: Manifest = read_json(&path)?;
    if m.config_hash != expected {
        return Err(CliError::Stale {
            path,
            found: m.config_hash,
            expected: expected.into(),
        });
    }
    Ok(m)
}

fn params_matrix(params: &[Vec<f64>]) -> Result<Matrix, CliError> {
    let dim = params.first().map_or(0, Vec::len);
    Ok(Matrix::from_row_major(params.len(), dim, params.concat())?)
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SnapshotSummary {
    pub count: usize,
    pub source_form: &'static str,
    pub max_exact_residual: f64,
}

/// Samples training and test parameters and evaluates the snapshots.
pub fn cmd_snapshots(cfg: &RunConfig) -> Result<SnapshotSummary, CliError> {
    let ctx = Context::new(cfg)?;
    let h = cfg.hashes().snapshots;
    let dir = ctx.work.snapshots();
    let train = sample_params(&ctx.problem, cfg.data.train_count, cfg.data.train_seed)?;
    let test = sample_params(&ctx.problem, cfg.data.test_count, cfg.data.test_seed)?;
    let snaps = assemble_snapshots(&ctx.problem, &ctx.grid, &train)?;
    let none = Value::Null;
    write_vector(&dir.join("grid.csv"), ctx.grid.points(), "grid points, ascending", &h, none.clone())?;
    write_matrix(&dir.join("train_params.csv"), &params_matrix(&train)?, "training parameters, one per row", &h, none.clone())?;
    write_matrix(&dir.join("test_params.csv"), &params_matrix(&test)?, "test parameters, one per row", &h, none.clone())?;
    write_matrix(&dir.join("values.csv"), &snaps.values, "snapshot matrix, one column per training parameter", &h, none.clone())?;
    if let Some((dx, dxx)) = &snaps.derivatives {
        write_matrix(&dir.join("values_dx.csv"), dx, "first spatial derivatives of the snapshots", &h, none.clone())?;
        write_matrix(&dir.join("values_dxx.csv"), dxx, "second spatial derivatives of the snapshots", &h, none)?;
    }
    let summary = SnapshotSummary {
        count: train.len(),
        source_form: ctx.problem.source_form().as_str(),
        max_exact_residual: ctx.problem.max_exact_residual(1000, cfg.data.train_seed),
    };
    write_manifest(
        &dir,
        "snapshots",
        &h,
        "",
        &["grid.csv", "train_params.csv", "test_params.csv", "values.csv", "values_dx.csv", "values_dxx.csv"],
        json!({
            "problem": cfg.problem.name,
            "kappa": cfg.problem.kappa,
            "source_form": summary.source_form,
            "max_exact_residual": summary.max_exact_residual,
            "train_seed": cfg.data.train_seed,
            "test_seed": cfg.data.test_seed,
        }),
    )?;
    Ok(summary)
}

fn load_snapshots(ctx: &Context) -> Result<(SnapshotSet, Vec<Vec<f64>>), CliError> {
    let h = ctx.cfg.hashes().snapshots;
    let dir = ctx.work.snapshots();
    check_manifest(&dir, &h)?;
    let (train, _) = read_matrix(&dir.join("train_params.csv"), Some(&h))?;
    let (test, _) = read_matrix(&dir.join("test_params.csv"), Some(&h))?;
    let (values, _) = read_matrix(&dir.join("values.csv"), Some(&h))?;
    let (dx, _) = read_matrix(&dir.join("values_dx.csv"), Some(&h))?;
    let (dxx, _) = read_matrix(&dir.join("values_dxx.csv"), Some(&h))?;
    let snaps = SnapshotSet::new(ctx.grid.clone(), matrix_rows(&train), values)?.with_derivatives(dx, dxx)?;
    Ok((snaps, matrix_rows(&test)))
}

#[derive(Debug, Clone, Serialize)]
pub struct PodSummary {
    pub ell: usize,
    pub resolved_modes: usize,
    pub singular_values: Vec<f64>,
}

pub fn cmd_pod(cfg: &RunConfig) -> Result<PodSummary, CliError> {
    let ctx = Context::new(cfg)?;
    let hashes = cfg.hashes();
    let (train, _) = load_snapshots(&ctx)?;
    let source = if cfg.pod.fresh_set {
        let params = sample_params(&ctx.problem, cfg.data.train_count, cfg.pod.fresh_seed)?;
        assemble_snapshots(&ctx.problem, &ctx.grid, &params)?
    } else {
        train
    };
    let basis = compute_pod(&source, cfg.pod.ell)?;
    let dir = ctx.work.basis();
    let h = &hashes.pod;
    let none = Value::Null;
    write_matrix(&dir.join("basis.csv"), &basis.basis, "POD basis, one column per mode", h, none.clone())?;
    write_matrix(&dir.join("basis_dx.csv"), &basis.basis_dx, "first derivatives of the basis", h, none.clone())?;
    write_matrix(&dir.join("basis_dxx.csv"), &basis.basis_dxx, "second derivatives of the basis", h, none.clone())?;
    write_vector(&dir.join("singular_values.csv"), &basis.singular_values, "all singular values, nonincreasing", h, none)?;
    write_manifest(
        &dir,
        "pod",
        h,
        &hashes.snapshots,
        &["basis.csv", "basis_dx.csv", "basis_dxx.csv", "singular_values.csv"],
        json!({
            "ell": cfg.pod.ell,
            "resolved_modes": basis.numerical_rank(cfg.pod.rank_tol),
            "inner_product": "euclidean",
            "derivatives": if source.derivatives.is_some() { "exact snapshot derivatives" } else { "grid differentiation" },
            "fresh_set": cfg.pod.fresh_set,
        }),
    )?;
    Ok(PodSummary {
        ell: basis.ell(),
        resolved_modes: basis.numerical_rank(cfg.pod.rank_tol),
        singular_values: basis.singular_values,
    })
}

fn load_basis(ctx: &Context) -> Result<ReducedBasis, CliError> {
    let h = ctx.cfg.hashes().pod;
    let dir = ctx.work.basis();
    check_manifest(&dir, &h)?;
    let (basis, _) = read_matrix(&dir.join("basis.csv"), Some(&h))?;
    let (basis_dx, _) = read_matrix(&dir.join("basis_dx.csv"), Some(&h))?;
    let (basis_dxx, _) = read_matrix(&dir.join("basis_dxx.csv"), Some(&h))?;
    let (singular_values, _) = read_vector(&dir.join("singular_values.csv"), Some(&h))?;
    if basis.rows() != ctx.grid.len() {
        return Err(CliError::Config("basis and grid sizes differ".into()));
    }
    Ok(ReducedBasis {
        basis,
        basis_dx,
        basis_dxx,
        singular_values,
    })
}

/// The leading modes above the numerical rank threshold, which the model reads.
fn feature_basis(ctx: &Context, basis: &ReducedBasis) -> Result<ReducedBasis, CliError> {
    let ell = basis.numerical_rank(ctx.cfg.pod.rank_tol);
    if ctx.cfg.model.r > ell {
        return Err(CliError::Config(format!(
            "model.r = {} exceeds the {ell} basis modes above pod.rank_tol",
            ctx.cfg.model.r
        )));
    }
    Ok(basis.truncated(ell)?)
}

fn spec_info(spec: &MlpSpec) -> Value {
    json!({
        "sizes": spec.sizes(),
        "hidden_activations": spec.hidden_activations().iter().map(|a| a.as_str()).collect::<Vec<_>>(),
        "layout": "per layer: weights (out x in, row-major) then biases",
    })
}

fn spec_from_info(info: &Value, path: &Path) -> Result<MlpSpec, CliError> {
    let bad = || CliError::Io(format!("{}: malformed network description", path.display()));
    let sizes: Vec<usize> = serde_json::from_value(info.get("sizes").cloned().ok_or_else(bad)?).map_err(|_| bad())?;
    let acts: Vec<String> =
        serde_json::from_value(info.get("hidden_activations").cloned().ok_or_else(bad)?).map_err(|_| bad())?;
    let acts = acts.iter().map(|a| Activation::parse(a).ok_or_else(bad)).collect::<Result<Vec<_>, _>>()?;
    Ok(MlpSpec::with_activations(sizes, acts)?)
}

fn save_mlp(path: &Path, mlp: &Mlp, description: &str, hash: &str) -> Result<(), CliError> {
    write_vector(path, mlp.params.as_slice(), description, hash, spec_info(&mlp.spec))
}

fn load_mlp(path: &Path, hash: &str) -> Result<Mlp, CliError> {
    let (params, side) = read_vector(path, Some(hash))?;
    let spec = spec_from_info(&side.extra, path)?;
    if params.len() != spec.param_count() {
        return Err(CliError::Io(format!("{}: parameter count does not match its network", path.display())));
    }
    Ok(Mlp {
        spec,
        params: FlatParams(params),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub epochs: usize,
    pub offline_mean_error: f64,
}

/// Trains the composite model for `model.r` and evaluates it on the test set.
pub fn cmd_train(cfg: &RunConfig, mut progress: impl FnMut(usize, f64)) -> Result<TrainSummary, CliError> {
    let ctx = Context::new(cfg)?;
    let hashes = cfg.hashes();
    let basis = feature_basis(&ctx, &load_basis(&ctx)?)?;
    let (train, test) = load_snapshots(&ctx)?;
    let ocfg = cfg.offline_config();
    let data = dataset_from_problem(&ctx.problem, &ctx.grid, &train.params, ocfg.p)?;
    let model = CompositeModel::new(&cfg.architecture(basis.ell()), ctx.problem.mu_domain(), cfg.offline.seed)?;
    let out = train_offline(model, &basis, &ctx.quad, &data, &ocfg, &mut progress)?;
    let model = out.model;

    let r = cfg.model.r;
    let dir = ctx.work.model(r);
    let h = &hashes.train;
    save_mlp(&dir.join("phi.csv"), &model.phi, "flat parameters of the basis-mixing network", h)?;
    save_mlp(&dir.join("theta.csv"), &model.theta, "flat parameters of the hypernetwork", h)?;
    write_json(&dir.join("u_spec.json"), &spec_info(&model.u_spec))?;
    write_vector(&dir.join("loss_history.csv"), &out.loss_history, "offline loss per epoch", h, Value::Null)?;
    let final_loss = out.loss_history.last().copied().unwrap_or(f64::NAN);
    write_manifest(
        &dir,
        "train",
        h,
        &hashes.pod,
        &["phi.csv", "theta.csv", "u_spec.json", "loss_history.csv"],
        json!({ "r": r, "ell": basis.ell(), "final_loss": final_loss, "mu_normalization": "affine to [-1, 1]" }),
    )?;

    let features = evaluate_basis_features(&basis, &model.phi)?;
    let mut rows = Vec::with_capacity(test.len());
    for mu in &test {
        let t = Instant::now();
        let pred = reconstruct_with(&model, &features, &model.theta_u(mu)?)?;
        let dt = t.elapsed().as_secs_f64();
        rows.push(result_row(Method::NonlinearRbOffline, r, mu, ctx.error(&pred, mu)?, ctx.timing(dt)));
    }
    let mean = rows.iter().map(|r| r.rel_error).sum::<f64>() / rows.len() as f64;
    write_results(&ctx.work.results_table(Method::NonlinearRbOffline, r), &ctx.results_hash(h), &rows)?;
    Ok(TrainSummary {
        final_loss,
        epochs: out.loss_history.len(),
        offline_mean_error: mean,
    })
}

fn result_row(method: Method, r: usize, mu: &[f64], rel_error: f64, wall_time_s: f64) -> ResultRow {
    ResultRow {
        method: method.as_str().into(),
        r,
        mu: [mu[0], mu.get(1).copied().unwrap_or(0.0)],
        rel_error,
        wall_time_s,
    }
}

/// A trained composite model with its basis and precomputed features.
pub struct TrainedModel {
    pub model: CompositeModel,
    pub basis: ReducedBasis,
    pub features: BasisFeatures,
}

pub fn load_trained(ctx: &Context) -> Result<TrainedModel, CliError> {
    let h = ctx.cfg.hashes().train;
    let dir = ctx.work.model(ctx.cfg.model.r);
    check_manifest(&dir, &h)?;
    let basis = feature_basis(ctx, &load_basis(ctx)?)?;
    let phi = load_mlp(&dir.join("phi.csv"), &h)?;
    let theta = load_mlp(&dir.join("theta.csv"), &h)?;
    let u_path = dir.join("u_spec.json");
    let u_spec = spec_from_info(&read_json(&u_path)?, &u_path)?;
    let model = CompositeModel::from_parts(phi, u_spec, theta, ctx.problem.mu_domain().to_vec())?;
    let features = evaluate_basis_features(&basis, &model.phi)?;
    Ok(TrainedModel { model, basis, features })
}

/// One adaptation outcome as logged to JSONL.
#[derive(Debug, Clone, Serialize)]
pub struct AdaptRecord {
    pub mu_star: Vec<f64>,
    pub init: &'static str,
    pub epochs: usize,
    pub wall_time: f64,
    pub final_loss: f64,
    pub converged: bool,
    pub diverged: bool,
    pub offline_rel_error: f64,
    pub rel_error: f64,
}

struct Job {
    mu: Vec<f64>,
    init: InitialGuess,
}

/// Runs `jobs` on a bounded pool of scoped threads; results keep job order.
fn run_jobs<T: Send>(
    threads: usize,
    count: usize,
    work: impl Fn(usize) -> Result<T, CliError> + Sync,
) -> Result<Vec<T>, CliError> {
    let workers = if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    }
    .clamp(1, count.max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T, CliError>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let res = work(i);
                slots.lock().expect("no worker panicked")[i] = Some(res);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptSummary {
    pub records: Vec<AdaptRecord>,
}

/// Online adaptation for explicit parameters, the test set, or its worst decile.
pub fn cmd_adapt(cfg: &RunConfig, target: &AdaptTarget, init: InitChoice) -> Result<AdaptSummary, CliError> {
    let ctx = Context::new(cfg)?;
    let hashes = cfg.hashes();
    let trained = load_trained(&ctx)?;
    let r = cfg.model.r;
    let mus: Vec<Vec<f64>> = match target {
        AdaptTarget::Points(p) => {
            for mu in p {
                ctx.problem.check_mu(mu)?;
            }
            p.clone()
        }
        AdaptTarget::TestSet => load_snapshots(&ctx)?.1,
        AdaptTarget::WorstDecile => {
            let path = ctx.work.results_table(Method::NonlinearRbOffline, r);
            let rows = read_checked_results(&path, &ctx.results_hash(&hashes.train))?;
            let errs: Vec<f64> = rows.iter().map(|r| r.rel_error).collect();
            worst_decile(&errs).into_iter().map(|i| rows[i].mu.to_vec()).collect()
        }
    };
    let inits: Vec<InitialGuess> = match init {
        InitChoice::Warm => vec![InitialGuess::WarmStart],
        InitChoice::Random => vec![cfg.random_init()],
        InitChoice::Both => vec![InitialGuess::WarmStart, cfg.random_init()],
    };
    let jobs: Vec<Job> = mus
        .iter()
        .flat_map(|mu| inits.iter().map(|&init| Job { mu: mu.clone(), init }))
        .collect();
    let ocfg = cfg.online_config();
    let clock = StdClock::default();
    let outcomes: Vec<(AdaptationResult, f64, f64)> = run_jobs(cfg.threads, jobs.len(), |i| {
        let job = &jobs[i];
        let m = &trained.model;
        let res = adapt(m, &trained.basis, &ctx.grid, &ctx.problem, &job.mu, &ocfg, job.init, &clock)?;
        let offline = reconstruct_with(m, &trained.features, &m.theta_u(&job.mu)?)?;
        let online = reconstruct_with(m, &trained.features, &res.theta_u)?;
        Ok((res, ctx.error(&offline, &job.mu)?, ctx.error(&online, &job.mu)?))
    })?;

    let init_name = |g: InitialGuess| match g {
        InitialGuess::WarmStart => "warm",
        InitialGuess::Random(_) => "random",
    };
    let records: Vec<AdaptRecord> = jobs
        .iter()
        .zip(&outcomes)
        .map(|(job, (res, off, on))| AdaptRecord {
            mu_star: job.mu.clone(),
            init: init_name(job.init),
            epochs: res.epochs_used,
            wall_time: ctx.timing(res.wall_time_s),
            final_loss: res.final_loss(),
            converged: res.converged,
            diverged: res.diverged,
            offline_rel_error: *off,
            rel_error: *on,
        })
        .collect();

    let dir = ctx.work.results();
    let stem = match target {
        AdaptTarget::Points(_) => format!("adapt-points-r{r}"),
        AdaptTarget::TestSet => format!("adapt-test-r{r}"),
        AdaptTarget::WorstDecile => format!("adapt-worst-r{r}"),
    };
    let mut log = String::new();
    for rec in &records {
        log.push_str(&serde_json::to_string(rec).expect("record serializes"));
        log.push('\n');
    }
    write_text(&dir.join(format!("{stem}.jsonl")), &log)?;

    if let AdaptTarget::Points(_) = target {
        let mut text = format!("# config_hash={}\nmu1,mu2,init,epoch,loss\n", hashes.adapt);
        for (job, (res, _, _)) in jobs.iter().zip(&outcomes) {
            for (k, l) in res.loss_history.iter().enumerate() {
                text.push_str(&format!(
                    "{},{},{},{k},{}\n",
                    crate::io::fmt_f64(job.mu[0]),
                    crate::io::fmt_f64(job.mu[1]),
                    init_name(job.init),
                    crate::io::fmt_f64(*l)
                ));
            }
        }
        write_text(&dir.join(format!("online-loss-r{r}.csv")), &text)?;
    } else {
        let rows: Vec<ResultRow> = records
            .iter()
            .filter(|rec| rec.init == "warm")
            .map(|rec| result_row(Method::NonlinearRbOnline, r, &rec.mu_star, rec.rel_error, rec.wall_time))
            .collect();
        if !rows.is_empty() {
            write_results(&ctx.work.results_table(Method::NonlinearRbOnline, r), &ctx.results_hash(&hashes.adapt), &rows)?;
        }
    }
    Ok(AdaptSummary { records })
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineSummary {
    pub method: &'static str,
    pub mean_error: f64,
}

pub fn cmd_baseline(cfg: &RunConfig, which: Baseline) -> Result<BaselineSummary, CliError> {
    let ctx = Context::new(cfg)?;
    let hashes = cfg.hashes();
    let basis = load_basis(&ctx)?;
    let (train, test) = load_snapshots(&ctx)?;
    let r = cfg.model.r;
    let (method, hash, rows) = match which {
        Baseline::Podnn => {
            let out = train_podnn(&basis, r, &train, ctx.problem.mu_domain(), &cfg.podnn_config(), |_, _| {})?;
            let dir = ctx.work.podnn(r);
            let h = &hashes.podnn;
            save_mlp(&dir.join("g.csv"), &out.model.g, "flat parameters of the coefficient network", h)?;
            write_vector(&dir.join("loss_history.csv"), &out.loss_history, "POD-NN loss per epoch", h, Value::Null)?;
            write_manifest(&dir, "podnn", h, &hashes.pod, &["g.csv", "loss_history.csv"], json!({ "r": r }))?;
            let rows = evaluate_podnn(&ctx, &out.model, &basis, &test)?;
            (Method::Podnn, h.clone(), rows)
        }
        Baseline::Projection => {
            let mut rows = Vec::with_capacity(test.len());
            for mu in &test {
                let exact = ctx.problem.sample_solution(&ctx.grid, mu)?;
                let t = Instant::now();
                let e = match ctx.norm {
                    ErrorNorm::Relative => optimal_projection_error(&basis, r, &exact, &ctx.quad)?,
                    ErrorNorm::RelativeSquared => optimal_projection_error(&basis, r, &exact, &ctx.quad)?.powi(2),
                };
                rows.push(result_row(Method::Projection, r, mu, e, ctx.timing(t.elapsed().as_secs_f64())));
            }
            (Method::Projection, hashes.projection.clone(), rows)
        }
    };
    let mean = rows.iter().map(|r| r.rel_error).sum::<f64>() / rows.len() as f64;
    write_results(&ctx.work.results_table(method, r), &ctx.results_hash(&hash), &rows)?;
    Ok(BaselineSummary {
        method: method.as_str(),
        mean_error: mean,
    })
}

fn evaluate_podnn(ctx: &Context, model: &PodNnModel, basis: &ReducedBasis, test: &[Vec<f64>]) -> Result<Vec<ResultRow>, CliError> {
    let mut rows = Vec::with_capacity(test.len());
    for mu in test {
        let t = Instant::now();
        let pred = podnn_predict(model, basis, mu)?;
        let dt = t.elapsed().as_secs_f64();
        rows.push(result_row(Method::Podnn, model.r, mu, ctx.error(&pred, mu)?, ctx.timing(dt)));
    }
    Ok(rows)
}

fn read_checked_results(path: &Path, expected: &str) -> Result<Vec<ResultRow>, CliError> {
    let (found, rows) = read_results(path)?;
    if found != expected {
        return Err(CliError::Stale {
            path: path.to_path_buf(),
            found,
            expected: expected.into(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateEntry {
    pub method: String,
    pub r: usize,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub worst10_mean: f64,
    pub max: f64,
    pub histogram_edges: Vec<f64>,
    pub histogram_counts: Vec<usize>,
}

/// Offline and online errors on the worst offline decile, selected once from
/// the offline errors.
#[derive(Debug, Clone, Serialize)]
pub struct WorstDecileEntry {
    pub r: usize,
    pub mus: Vec<[f64; 2]>,
    pub offline_mean: f64,
    pub online_mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub error_norm: &'static str,
    pub timing_recorded: bool,
    pub entries: Vec<AggregateEntry>,
    pub worst_decile: Vec<WorstDecileEntry>,
}

/// Merges every results table in the work directory into
/// `figures-data/` and computes aggregates.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary, CliError> {
    let ctx = Context::new(cfg)?;
    let dir = ctx.work.results();
    let mut tables: BTreeMap<(Method, usize), (String, Vec<ResultRow>)> = BTreeMap::new();
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(_) => return Err(CliError::Missing(dir)),
    };
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    for name in names {
        let Some((method, r)) = parse_table_name(&name) else {
            continue;
        };
        let hashes = cfg.with_r(r).hashes();
        let stage = match method {
            Method::NonlinearRbOffline => hashes.train,
            Method::NonlinearRbOnline => hashes.adapt,
            Method::Podnn => hashes.podnn,
            Method::Projection => hashes.projection,
        };
        let expected = ctx.results_hash(&stage);
        let rows = read_checked_results(&dir.join(&name), &expected)?;
        tables.insert((method, r), (expected, rows));
    }
    let total: usize = tables.values().map(|(_, rows)| rows.len()).sum();
    if total == 0 {
        return Err(CliError::Config(format!("no result rows found in {}", dir.display())));
    }

    let all_hashes: Vec<&str> = tables.values().map(|(h, _)| h.as_str()).collect();
    let hash = hash_bytes(&all_hashes);
    let mut merged = Vec::with_capacity(total);
    let mut agg = Vec::new();
    for ((method, r), (_, rows)) in &tables {
        if rows.is_empty() {
            continue;
        }
        let errs: Vec<f64> = rows.iter().map(|r| r.rel_error).collect();
        let a = aggregate(&errs)?;
        agg.push(AggregateEntry {
            method: method.as_str().into(),
            r: *r,
            count: a.count,
            mean: a.mean,
            median: a.median,
            worst10_mean: a.worst10_mean,
            max: a.max,
            histogram_edges: a.histogram.edges,
            histogram_counts: a.histogram.counts,
        });
        merged.extend(rows.iter().cloned());
    }

    let mut worst = Vec::new();
    let mut worst_rows = Vec::new();
    for ((method, r), (_, offline)) in &tables {
        if *method != Method::NonlinearRbOffline {
            continue;
        }
        let Some((_, online)) = tables.get(&(Method::NonlinearRbOnline, *r)) else {
            continue;
        };
        let errs: Vec<f64> = offline.iter().map(|r| r.rel_error).collect();
        let mut mus = Vec::new();
        let (mut off_sum, mut on_sum) = (0.0, 0.0);
        for i in worst_decile(&errs) {
            let Some(on) = online.iter().find(|row| row.mu == offline[i].mu) else {
                continue;
            };
            mus.push(offline[i].mu);
            off_sum += offline[i].rel_error;
            on_sum += on.rel_error;
            worst_rows.push(offline[i].clone());
            worst_rows.push(on.clone());
        }
        if !mus.is_empty() {
            let k = mus.len() as f64;
            worst.push(WorstDecileEntry {
                r: *r,
                mus,
                offline_mean: off_sum / k,
                online_mean: on_sum / k,
            });
        }
    }

    let out = ctx.work.figures_data();
    write_results(&out.join("errors.csv"), &hash, &merged)?;
    let mut files = vec!["errors.csv", "histograms.csv", "aggregates.json"];
    if !worst_rows.is_empty() {
        write_results(&out.join("worst-decile.csv"), &hash, &worst_rows)?;
        files.push("worst-decile.csv");
    }
    let mut hist = format!("# config_hash={hash}\nmethod,r,bin_lo,bin_hi,count\n");
    for e in &agg {
        for (k, c) in e.histogram_counts.iter().enumerate() {
            hist.push_str(&format!(
                "{},{},{},{},{c}\n",
                e.method,
                e.r,
                crate::io::fmt_f64(e.histogram_edges[k]),
                crate::io::fmt_f64(e.histogram_edges[k + 1])
            ));
        }
    }
    write_text(&out.join("histograms.csv"), &hist)?;
    let summary = EvalSummary {
        config_hash: hash.clone(),
        error_norm: ctx.norm.as_str(),
        timing_recorded: cfg.eval.record_timing,
        entries: agg,
        worst_decile: worst,
    };
    write_json(&out.join("aggregates.json"), &summary)?;
    write_manifest(
        &out,
        "eval",
        &hash,
        "",
        &files,
        json!({ "tables": tables.keys().map(|(m, r)| format!("{}-r{r}", m.as_str())).collect::<Vec<_>>() }),
    )?;
    Ok(summary)
}

/// `<method>-r<r>.csv` → `(method, r)`.
fn parse_table_name(name: &str) -> Option<(Method, usize)> {
    let stem = name.strip_suffix(".csv")?;
    let (method, r) = stem.rsplit_once("-r")?;
    Some((Method::parse(method)?, r.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_names() {
        assert_eq!(parse_table_name("podnn-r8.csv"), Some((Method::Podnn, 8)));
        assert_eq!(
            parse_table_name("nonlinear-rb-offline-r12.csv"),
            Some((Method::NonlinearRbOffline, 12))
        );
        assert_eq!(parse_table_name("online-loss-r8.csv"), None);
        assert_eq!(parse_table_name("adapt-test-r8.jsonl"), None);
    }

    #[test]
    fn job_pool_preserves_order() {
        let out = run_jobs(3, 20, |i| Ok(i * i)).unwrap();
        assert_eq!(out, (0..20).map(|i| i * i).collect::<Vec<_>>());
        assert!(run_jobs(2, 0, |i| Ok(i)).unwrap().is_empty());
    }
}

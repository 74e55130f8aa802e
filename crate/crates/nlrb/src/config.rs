//! Run configuration: defaults, JSON files and command-line overrides.

use std::path::{Path, PathBuf};

use nlrb_core::baselines::PodNnConfig;
use nlrb_core::eval::ErrorNorm;
use nlrb_core::grid::GridKind;
use nlrb_core::model::{Architecture, OfflineLossConfig};
use nlrb_core::online::{InitialGuess, OnlineConfig, OnlineOptimizer};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable that overrides `paths.workdir`.
pub const WORKDIR_ENV: &str = "NLRB_WORKDIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    pub grid: GridSection,
    pub data: DataSection,
    pub pod: PodSection,
    pub model: ModelSection,
    pub offline: OfflineSection,
    pub podnn: PodNnSection,
    pub online: OnlineSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
    /// Worker threads for batched adaptation; 0 uses all available cores.
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
    /// `chebyshev` or `uniform`.
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_count: usize,
    pub train_seed: u64,
    pub test_count: usize,
    pub test_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PodSection {
    pub ell: usize,
    /// Modes with `σ_i ≤ rank_tol · σ_1` are kept in the basis but not fed to the model.
    pub rank_tol: f64,
    /// Build the basis from a fresh snapshot set instead of the training set.
    pub fresh_set: bool,
    pub fresh_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub r: usize,
    pub u_hidden: usize,
    pub theta_width: usize,
    pub theta_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineSection {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lambda0: f64,
    pub lambda1: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PodNnSection {
    pub width: usize,
    pub depth: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineSection {
    pub m1: usize,
    pub m2: usize,
    pub lambda: f64,
    pub gamma0: f64,
    pub rho: f64,
    pub stop_tol: f64,
    pub max_epochs: usize,
    pub lr: f64,
    /// `adam` or `levenberg-marquardt`.
    pub optimizer: String,
    /// Seed of the interior collocation points.
    pub seed: u64,
    /// Seed of the random initial guess, when one is requested.
    pub random_init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// `relative-l2` or `relative-l2-squared`.
    pub norm: String,
    /// Write measured wall times; when off the column holds zeros so reruns
    /// are byte-identical.
    pub record_timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub workdir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSection::default(),
            grid: GridSection::default(),
            data: DataSection::default(),
            pod: PodSection::default(),
            model: ModelSection::default(),
            offline: OfflineSection::default(),
            podnn: PodNnSection::default(),
            online: OnlineSection::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
            threads: 0,
        }
    }
}

impl Default for ProblemSection {
    fn default() -> Self {
        Self {
            name: "burgers".into(),
            kappa: 1.0,
        }
    }
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            n: 257,
            kind: "chebyshev".into(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_count: 100,
            train_seed: 1,
            test_count: 100,
            test_seed: 999,
        }
    }
}

impl Default for PodSection {
    fn default() -> Self {
        Self {
            ell: 20,
            rank_tol: 1e-10,
            fresh_set: false,
            fresh_seed: 2,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::standard(20, 8);
        Self {
            r: a.r,
            u_hidden: a.u_hidden,
            theta_width: a.theta_width,
            theta_depth: a.theta_depth,
        }
    }
}

impl Default for OfflineSection {
    fn default() -> Self {
        let c = OfflineLossConfig::default();
        Self {
            epochs: c.epochs,
            lr: c.lr,
            lr_decay: c.lr_decay,
            lr_decay_every: c.lr_decay_every,
            lambda0: c.lambdas[0],
            lambda1: c.lambdas[1],
            seed: c.seed,
        }
    }
}

impl Default for PodNnSection {
    fn default() -> Self {
        let c = PodNnConfig::default();
        Self {
            width: c.width,
            depth: c.depth,
            epochs: c.epochs,
            lr: c.lr,
            lr_decay: c.lr_decay,
            lr_decay_every: c.lr_decay_every,
            seed: c.seed,
        }
    }
}

impl Default for OnlineSection {
    fn default() -> Self {
        let c = OnlineConfig::default();
        Self {
            m1: c.m1,
            m2: c.m2,
            lambda: c.lambda,
            gamma0: c.gamma0,
            rho: c.decay,
            stop_tol: c.stop_tol,
            max_epochs: c.max_epochs,
            lr: c.lr,
            optimizer: c.optimizer.as_str().into(),
            seed: c.seed,
            random_init_seed: 7,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            norm: ErrorNorm::Relative.as_str().into(),
            record_timing: false,
        }
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            workdir: PathBuf::from("work"),
        }
    }
}

impl RunConfig {
    /// Defaults, then the JSON file (if any), then `key.path=value`
    /// overrides, then the workdir from the environment or flag.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let file_value: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("invalid JSON in {}: {e}", path.display())))?;
            merge(&mut value, file_value);
        }
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.problem.name != "burgers" {
            return Err(CliError::Config(format!("unknown problem '{}'", self.problem.name)));
        }
        if !(self.problem.kappa > 0.0) {
            return Err(CliError::Config("problem.kappa must be positive".into()));
        }
        self.grid_kind()?;
        self.error_norm()?;
        self.online_optimizer()?;
        if self.data.train_count == 0 || self.data.test_count == 0 {
            return Err(CliError::Config("data counts must be positive".into()));
        }
        if self.pod.ell == 0 || self.pod.ell > self.grid.n.min(self.data.train_count) {
            return Err(CliError::Config(format!(
                "pod.ell = {} must lie in 1..=min(grid.n, data.train_count)",
                self.pod.ell
            )));
        }
        if !(0.0..1.0).contains(&self.pod.rank_tol) {
            return Err(CliError::Config(format!("pod.rank_tol = {} must lie in [0, 1)", self.pod.rank_tol)));
        }
        if self.model.r == 0 || self.model.r > self.pod.ell {
            return Err(CliError::Config(format!("model.r = {} must lie in 1..=pod.ell", self.model.r)));
        }
        self.offline_config().validate()?;
        self.podnn_config().validate()?;
        self.online_config().validate()?;
        Ok(())
    }

    pub fn grid_kind(&self) -> Result<GridKind, CliError> {
        match self.grid.kind.as_str() {
            "chebyshev" => Ok(GridKind::Chebyshev),
            "uniform" => Ok(GridKind::Uniform),
            other => Err(CliError::Config(format!(
                "grid.kind '{other}' is not one of chebyshev, uniform"
            ))),
        }
    }

    pub fn error_norm(&self) -> Result<ErrorNorm, CliError> {
        ErrorNorm::parse(&self.eval.norm).ok_or_else(|| {
            CliError::Config(format!(
                "eval.norm '{}' is not one of relative-l2, relative-l2-squared",
                self.eval.norm
            ))
        })
    }

    /// Model architecture on the first `ell` basis modes.
    pub fn architecture(&self, ell: usize) -> Architecture {
        Architecture {
            ell,
            r: self.model.r,
            u_hidden: self.model.u_hidden,
            theta_width: self.model.theta_width,
            theta_depth: self.model.theta_depth,
        }
    }

    pub fn offline_config(&self) -> OfflineLossConfig {
        let o = &self.offline;
        OfflineLossConfig {
            p: 1,
            lambdas: vec![o.lambda0, o.lambda1],
            epochs: o.epochs,
            lr: o.lr,
            lr_decay: o.lr_decay,
            lr_decay_every: o.lr_decay_every,
            seed: o.seed,
        }
    }

    pub fn podnn_config(&self) -> PodNnConfig {
        let p = &self.podnn;
        PodNnConfig {
            width: p.width,
            depth: p.depth,
            epochs: p.epochs,
            lr: p.lr,
            lr_decay: p.lr_decay,
            lr_decay_every: p.lr_decay_every,
            seed: p.seed,
        }
    }

    pub fn online_optimizer(&self) -> Result<OnlineOptimizer, CliError> {
        OnlineOptimizer::parse(&self.online.optimizer).ok_or_else(|| {
            CliError::Config(format!(
                "online.optimizer '{}' is not one of adam, levenberg-marquardt",
                self.online.optimizer
            ))
        })
    }

    pub fn online_config(&self) -> OnlineConfig {
        let o = &self.online;
        OnlineConfig {
            m1: o.m1,
            m2: o.m2,
            lambda: o.lambda,
            gamma0: o.gamma0,
            decay: o.rho,
            max_epochs: o.max_epochs,
            stop_tol: o.stop_tol,
            lr: o.lr,
            optimizer: self.online_optimizer().unwrap_or_default(),
            seed: o.seed,
        }
    }

    pub fn random_init(&self) -> InitialGuess {
        InitialGuess::Random(self.online.random_init_seed)
    }

    pub fn with_r(&self, r: usize) -> Self {
        let mut c = self.clone();
        c.model.r = r;
        c
    }

    pub fn hashes(&self) -> StageHashes {
        StageHashes::new(self)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON and falls back to a
/// plain string.
fn apply_override(root: &mut Value, ov: &str) -> Result<(), CliError> {
    let (path, raw) = ov
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{ov}' is not of the form key.path=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| CliError::Config(format!("unknown config key '{path}'")))?;
    }
    *slot = parsed;
    Ok(())
}

/// Content hashes of each pipeline stage. A stage's hash covers its own
/// config section and the hash of the stage it reads from, so a change
/// anywhere upstream invalidates everything downstream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageHashes {
    pub snapshots: String,
    pub pod: String,
    pub train: String,
    pub adapt: String,
    pub podnn: String,
    pub projection: String,
}

impl StageHashes {
    fn new(c: &RunConfig) -> Self {
        let snapshots = digest("snapshots", "", &(&c.problem, &c.grid, &c.data));
        let pod = digest("pod", &snapshots, &c.pod);
        let train = digest("train", &pod, &(&c.model, &c.offline));
        let adapt = digest("adapt", &train, &c.online);
        let podnn = digest("podnn", &pod, &(c.model.r, &c.podnn));
        let projection = digest("projection", &pod, &c.model.r);
        Self {
            snapshots,
            pod,
            train,
            adapt,
            podnn,
            projection,
        }
    }
}

fn digest(stage: &str, upstream: &str, section: &impl Serialize) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(upstream.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(section).expect("config serializes"));
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn hash_bytes(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn precedence_is_flags_over_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"model": {"r": 4}, "offline": {"epochs": 10, "lr": 0.01}}"#).unwrap();
        let c = RunConfig::load(Some(&f), &["offline.epochs=20".into()]).unwrap();
        assert_eq!(c.model.r, 4);
        assert_eq!(c.offline.epochs, 20);
        assert_eq!(c.offline.lr, 0.01);
        assert_eq!(c.pod.ell, 20);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(
            RunConfig::load(None, &["model.q=1".into()]),
            Err(CliError::Config(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"model": {"rr": 4}}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&f), &[]), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        for ov in ["model.r=30", "grid.kind=\"hex\"", "problem.kappa=-1", "online.rho=2", "online.optimizer=\"sgd\""] {
            assert!(RunConfig::load(None, &[ov.into()]).is_err(), "{ov}");
        }
    }

    #[test]
    fn optimizer_selection_reaches_online_config() {
        let c = RunConfig::load(None, &["online.optimizer=\"levenberg-marquardt\"".into()]).unwrap();
        assert_eq!(c.online_config().optimizer, OnlineOptimizer::LevenbergMarquardt);
        assert_eq!(RunConfig::default().online_config().optimizer, OnlineOptimizer::Adam);
    }

    #[test]
    fn upstream_changes_propagate_to_downstream_hashes() {
        let base = RunConfig::default().hashes();
        let mut c = RunConfig::default();
        c.data.train_seed += 1;
        let h = c.hashes();
        assert_ne!(base.snapshots, h.snapshots);
        assert_ne!(base.train, h.train);
        assert_ne!(base.adapt, h.adapt);
        let mut c = RunConfig::default();
        c.online.gamma0 = 0.5;
        let h = c.hashes();
        assert_eq!(base.train, h.train);
        assert_ne!(base.adapt, h.adapt);
        assert_eq!(RunConfig::default().hashes(), base);
    }
}

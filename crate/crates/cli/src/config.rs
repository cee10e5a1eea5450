//! Run configuration: one JSON file per run, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use orchestra_core::agents::{assign_roles, RoleCounts, RoleMap};
use orchestra_core::experiment::Setup;
use orchestra_core::marl::TrainConfig;
use orchestra_core::trace::{generate_synthetic, parse_trace, Trace, WorkloadSpec};
use serde::{Deserialize, Serialize};

pub const MACHINE_FILE: &str = "machine_events.csv";
pub const TASK_FILE: &str = "task_events.csv";

/// Where the run's trace comes from. Relative paths resolve against the
/// config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSource {
    Workload(WorkloadSpec),
    WorkloadFile(PathBuf),
    /// Directory holding `machine_events.csv` and `task_events.csv`.
    TraceDir(PathBuf),
}

fn default_eval_episodes() -> usize {
    10
}

fn default_window() -> usize {
    20
}

fn default_tol() -> f64 {
    0.01
}

fn default_checkpoint_every() -> usize {
    50
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Training seed; evaluation seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    /// Seed for synthetic trace generation. Defaults to `seed`.
    #[serde(default)]
    pub trace_seed: Option<u64>,
    pub trace: TraceSource,
    pub roles: RoleCounts,
    /// Trainer settings. `seed` and `info_loss_rate` are set from the top
    /// level and must be left at their defaults here.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub info_loss_rate: f64,
    /// Overrides the workload's tenant count.
    #[serde(default)]
    pub n_tenants: Option<usize>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_window")]
    pub convergence_window: usize,
    #[serde(default = "default_tol")]
    pub convergence_tol: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trace_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// A validated configuration with every path made absolute or
/// cwd-relative.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path, ov: &Overrides) -> Result<Resolved> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.trace = match cfg.trace {
            TraceSource::WorkloadFile(p) => {
                let p = base.join(p);
                let text = fs::read_to_string(&p).with_context(|| format!("reading workload {}", p.display()))?;
                TraceSource::Workload(
                    serde_json::from_str(&text).with_context(|| format!("parsing workload {}", p.display()))?,
                )
            }
            TraceSource::TraceDir(p) => TraceSource::TraceDir(base.join(p)),
            w => w,
        };
        if let Some(s) = ov.seed {
            cfg.seed = s;
        }
        if let Some(d) = &ov.trace_dir {
            cfg.trace = TraceSource::TraceDir(d.clone());
        }
        cfg.out_dir = match &ov.out_dir {
            Some(d) => d.clone(),
            None => base.join(&cfg.out_dir),
        };
        cfg.resolve()
    }

    pub fn resolve(self) -> Result<Resolved> {
        let defaults = TrainConfig::default();
        if self.train.seed != defaults.seed || self.train.info_loss_rate != defaults.info_loss_rate {
            bail!("set seed and info_loss_rate at the top level, not under train");
        }
        if self.roles.compute == 0 || self.roles.storage == 0 || self.roles.scheduler == 0 {
            bail!("every role needs at least one agent");
        }
        if self.eval_episodes == 0 || self.convergence_window == 0 || self.checkpoint_every == 0 {
            bail!("eval_episodes, convergence_window and checkpoint_every must be positive");
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            bail!("convergence_tol must be >= 0");
        }
        if self.n_tenants == Some(0) {
            bail!("n_tenants must be >= 1");
        }
        if self.n_tenants.is_some() && matches!(self.trace, TraceSource::TraceDir(_)) {
            bail!("n_tenants only applies to synthetic workloads");
        }
        let train = TrainConfig {
            seed: self.seed,
            info_loss_rate: self.info_loss_rate,
            ..self.train.clone()
        };
        train.validate()?;
        if let Some(w) = self.workload() {
            w.validate()?;
        }
        Ok(Resolved { config: self, train })
    }

    /// The synthetic workload with overrides applied, if the run has one.
    pub fn workload(&self) -> Option<WorkloadSpec> {
        match &self.trace {
            TraceSource::Workload(w) => {
                let mut w = w.clone();
                if let Some(n) = self.n_tenants {
                    w.n_tenants = n;
                }
                Some(w)
            }
            _ => None,
        }
    }

    pub fn trace_seed(&self) -> u64 {
        self.trace_seed.unwrap_or(self.seed)
    }
}

pub fn read_trace_dir(dir: &Path) -> Result<Trace> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    };
    Ok(parse_trace(&read(MACHINE_FILE)?, &read(TASK_FILE)?)?)
}

impl Resolved {
    pub fn trace(&self) -> Result<Trace> {
        match (&self.config.trace, self.config.workload()) {
            (_, Some(w)) => Ok(generate_synthetic(&w, self.config.trace_seed())?),
            (TraceSource::TraceDir(d), None) => read_trace_dir(d),
            _ => unreachable!("workload files are inlined on load"),
        }
    }

    pub fn trace_and_roles(&self) -> Result<(Trace, RoleMap)> {
        let trace = self.trace()?;
        let rm = assign_roles(self.config.roles, &trace.machine_ids())?;
        Ok((trace, rm))
    }

    /// Experiment setup for ablations and sweeps; sweeps over tenants need
    /// a synthetic workload.
    pub fn setup(&self) -> Result<Setup> {
        let workload = self
            .config
            .workload()
            .context("this command needs a synthetic workload, not a trace directory")?;
        Ok(self.setup_with(workload))
    }

    pub fn setup_with(&self, workload: WorkloadSpec) -> Setup {
        Setup {
            workload,
            trace_seed: self.config.trace_seed(),
            roles: self.config.roles,
            train: self.train.clone(),
            eval_episodes: self.config.eval_episodes,
            convergence_window: self.config.convergence_window,
            convergence_tol: self.config.convergence_tol,
        }
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }
}

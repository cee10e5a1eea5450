//! Experiment harness: train-and-evaluate runs, the four-way ablation and
//! the information-loss, tenant and agent-count sweeps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{assign_roles, AgentError, RoleCounts, RoleMap};
use crate::marl::{self, ablation_variant, derive_seed, Controller, MarlError, Policies, RunArtifacts, TrainConfig, Variant};
use crate::metrics::{convergence_epoch, spearman, EpisodeRecord, MetricsError, MetricsReport, REPORT_HEADER};
use crate::trace::{generate_synthetic, Trace, TraceError, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Marl(#[from] MarlError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub workload: WorkloadSpec,
    pub trace_seed: u64,
    pub roles: RoleCounts,
    pub train: TrainConfig,
    pub eval_episodes: usize,
    pub convergence_window: usize,
    pub convergence_tol: f64,
}

pub fn build(workload: &WorkloadSpec, trace_seed: u64, roles: RoleCounts) -> Result<(Trace, RoleMap), ExperimentError> {
    let trace = generate_synthetic(workload, trace_seed)?;
    let rm = assign_roles(roles, &trace.machine_ids())?;
    Ok((trace, rm))
}

fn merge(records: &[EpisodeRecord]) -> EpisodeRecord {
    let mut m = EpisodeRecord::default();
    records.iter().for_each(|r| m.merge(r));
    m
}

/// Evaluation episode seeds for a training seed.
pub fn eval_seeds(train_seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| derive_seed(train_seed, &[5, k])).collect()
}

/// Metrics of `controller` over the given evaluation episodes.
pub fn evaluate_report(
    controller: &Controller,
    trace: &Trace,
    role_map: &RoleMap,
    info_loss_rate: f64,
    seeds: &[u64],
) -> Result<MetricsReport, ExperimentError> {
    let records = marl::evaluate(controller, trace, role_map, info_loss_rate, seeds)?;
    Ok(MetricsReport::from_record(&merge(&records), None)?)
}

pub struct RunResult {
    pub artifacts: RunArtifacts,
    pub report: MetricsReport,
}

/// First converged epoch of the learning curve, absent when the curve is
/// shorter than the window or never settles.
pub fn curve_convergence(artifacts: &RunArtifacts, window: usize, tol: f64) -> Option<usize> {
    let utils: Vec<f64> = artifacts.curve.iter().map(|r| r.mean_utilization).collect();
    convergence_epoch(&utils, window, tol).ok().flatten()
}

/// Report for trained policies: evaluation episodes plus the run's update
/// timings and convergence epoch.
pub fn report_for(
    setup: &Setup,
    artifacts: &RunArtifacts,
    policies: &Policies,
    trace: &Trace,
    role_map: &RoleMap,
    info_loss_rate: f64,
    train_seed: u64,
) -> Result<MetricsReport, ExperimentError> {
    let seeds = eval_seeds(train_seed, setup.eval_episodes);
    let records = marl::evaluate(&Controller::Learned(policies), trace, role_map, info_loss_rate, &seeds)?;
    let mut merged = merge(&records);
    merged.update_durations_s = artifacts.update_durations_s.clone();
    let conv = curve_convergence(artifacts, setup.convergence_window, setup.convergence_tol);
    Ok(MetricsReport::from_record(&merged, conv)?)
}

/// Trains with `config` and evaluates at the config's own loss rate.
pub fn train_and_evaluate(
    setup: &Setup,
    config: &TrainConfig,
    trace: &Trace,
    role_map: &RoleMap,
) -> Result<RunResult, ExperimentError> {
    let artifacts = marl::train(config, trace, role_map)?;
    let report = report_for(
        setup,
        &artifacts,
        &artifacts.policies,
        trace,
        role_map,
        config.info_loss_rate,
        config.seed,
    )?;
    Ok(RunResult { artifacts, report })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean: MetricsReport,
    pub per_seed: Vec<MetricsReport>,
}

/// Runs all four variants on the same trace with the same training seeds.
pub fn ablation(setup: &Setup, seeds: &[u64]) -> Result<Vec<AblationRow>, ExperimentError> {
    let (trace, rm) = build(&setup.workload, setup.trace_seed, setup.roles)?;
    ablation_on(setup, &trace, &rm, seeds)
}

/// [`ablation`] on a given trace and role map; `setup.workload` is unused.
pub fn ablation_on(
    setup: &Setup,
    trace: &Trace,
    rm: &RoleMap,
    seeds: &[u64],
) -> Result<Vec<AblationRow>, ExperimentError> {
    if seeds.is_empty() {
        return Err(ExperimentError::Config("ablation needs at least one seed".into()));
    }
    Variant::ALL
        .iter()
        .map(|&variant| {
            let per_seed = seeds
                .iter()
                .map(|&s| {
                    let cfg = ablation_variant(&TrainConfig { seed: s, ..setup.train.clone() }, variant);
                    train_and_evaluate(setup, &cfg, trace, rm).map(|r| r.report)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(AblationRow {
                variant,
                mean: MetricsReport::mean_of(&per_seed),
                per_seed,
            })
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "variant,resource_utilization_pct,avg_scheduling_latency_ms,convergence_epoch";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.variant.label(),
            r.mean.resource_utilization_pct,
            opt(r.mean.avg_scheduling_latency_ms),
            opt(r.mean.convergence_epoch.map(|e| e as f64))
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    InfoLoss,
    Tenants,
    Agents,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::InfoLoss => "info_loss",
            Axis::Tenants => "tenants",
            Axis::Agents => "agents",
        }
    }

    /// The metric the axis is expected to move.
    pub fn headline(self) -> &'static str {
        match self {
            Axis::InfoLoss => "avg_scheduling_latency_ms",
            Axis::Tenants => "min_tenant_share_pct",
            Axis::Agents => "throughput_tasks_per_s",
        }
    }

    pub fn headline_value(self, r: &MetricsReport) -> f64 {
        match self {
            Axis::InfoLoss => r.avg_scheduling_latency_ms.unwrap_or(f64::NAN),
            Axis::Tenants => r.min_tenant_share_pct,
            Axis::Agents => r.throughput_tasks_per_s,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Axis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "info_loss" => Ok(Axis::InfoLoss),
            "tenants" => Ok(Axis::Tenants),
            "agents" => Ok(Axis::Agents),
            _ => Err(ExperimentError::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.values.len() < 2 {
            return Err(ExperimentError::Config("a sweep needs at least two points".into()));
        }
        if self.values.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            return Err(ExperimentError::Config("sweep values must be strictly increasing".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("a sweep needs at least one seed".into()));
        }
        let integral = |v: f64| v >= 1.0 && v.fract() == 0.0;
        match self.axis {
            Axis::InfoLoss if self.values.iter().any(|v| !(0.0..=1.0).contains(v)) => {
                Err(ExperimentError::Config("loss rates must lie in [0, 1]".into()))
            }
            Axis::Tenants | Axis::Agents if !self.values.iter().all(|&v| integral(v)) => {
                Err(ExperimentError::Config(format!("{} values must be positive integers", self.axis)))
            }
            Axis::Agents if self.values.iter().any(|&v| v < 3.0) => {
                Err(ExperimentError::Config("each role needs an agent: at least 3 agents".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub mean: MetricsReport,
    pub per_seed: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: Axis,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    pub fn series(&self, f: impl Fn(&MetricsReport) -> f64) -> Vec<f64> {
        self.points.iter().map(|p| f(&p.mean)).collect()
    }

    /// Rank correlation of the axis against its headline metric.
    pub fn headline_spearman(&self) -> f64 {
        spearman(&self.values(), &self.series(|r| self.axis.headline_value(r)))
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{},{REPORT_HEADER}\n", self.axis.name());
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.value, p.mean.csv_row()));
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "axis={}\nheadline={}\nspearman={}\n",
            self.axis.name(),
            self.axis.headline(),
            self.headline_spearman()
        )
    }
}

/// Sweeps one axis. Information loss evaluates one trained policy per seed
/// under increasing masking; tenants regenerate the workload and retrain;
/// agents re-split the population across roles and retrain.
pub fn sweep(setup: &Setup, spec: &SweepSpec) -> Result<SweepResult, ExperimentError> {
    spec.validate()?;
    let mut per_point: Vec<Vec<MetricsReport>> = vec![Vec::new(); spec.values.len()];
    match spec.axis {
        Axis::InfoLoss => {
            let (trace, rm) = build(&setup.workload, setup.trace_seed, setup.roles)?;
            for &s in &spec.seeds {
                let cfg = TrainConfig { seed: s, ..setup.train.clone() };
                let art = marl::train(&cfg, &trace, &rm)?;
                for (k, &loss) in spec.values.iter().enumerate() {
                    per_point[k].push(report_for(setup, &art, &art.policies, &trace, &rm, loss, s)?);
                }
            }
        }
        Axis::Tenants | Axis::Agents => {
            for (k, &v) in spec.values.iter().enumerate() {
                let mut workload = setup.workload.clone();
                let mut roles = setup.roles;
                if spec.axis == Axis::Tenants {
                    workload.n_tenants = v as usize;
                } else {
                    roles = RoleCounts::split(v as usize);
                }
                let (trace, rm) = build(&workload, setup.trace_seed, roles)?;
                for &s in &spec.seeds {
                    let cfg = TrainConfig { seed: s, ..setup.train.clone() };
                    per_point[k].push(train_and_evaluate(setup, &cfg, &trace, &rm)?.report);
                }
            }
        }
    }
    Ok(SweepResult {
        axis: spec.axis,
        points: spec
            .values
            .iter()
            .zip(per_point)
            .map(|(&value, per_seed)| SweepPoint {
                value,
                mean: MetricsReport::mean_of(&per_seed),
                per_seed,
            })
            .collect(),
    })
}

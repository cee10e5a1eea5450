//! Machine and task event traces.
//!
//! A [`Trace`] is the exogenous input of the simulator: a time-ordered
//! stream of machine events (capacity changes) and a time-ordered stream of
//! task events (submissions and completions). Traces come either from CSV
//! files shaped after the Google cluster-data event tables or from the
//! synthetic generator driven by a [`WorkloadSpec`].
//!
//! Resource quantities are fractions of a reference machine. Timestamps are
//! whole seconds.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MACHINE_HEADER: &str = "timestamp,machine_id,kind,cpu_capacity,mem_capacity,io_capacity";
pub const TASK_HEADER: &str =
    "timestamp,job_id,task_id,tenant_id,kind,cpu_demand,mem_demand,io_demand,duration";

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("{stream} stream, row {row}: {msg}")]
    Parse {
        stream: &'static str,
        row: usize,
        msg: String,
    },
    #[error("{stream} stream, row {row}: {msg}")]
    Validation {
        stream: &'static str,
        row: usize,
        msg: String,
    },
    #[error("{stream} stream, row {row}: {msg}")]
    Ordering {
        stream: &'static str,
        row: usize,
        msg: String,
    },
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
}

macro_rules! id_type {
    ($name:ident) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

id_type!(MachineId);
id_type!(JobId);
id_type!(TaskId);
id_type!(TenantId);

/// Per-resource triple (cpu, memory, io).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Resources {
    pub cpu: f64,
    pub mem: f64,
    pub io: f64,
}

impl Resources {
    pub const ZERO: Resources = Resources {
        cpu: 0.0,
        mem: 0.0,
        io: 0.0,
    };

    pub fn new(cpu: f64, mem: f64, io: f64) -> Self {
        Self { cpu, mem, io }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.cpu, self.mem, self.io]
    }

    pub fn add(&self, other: &Resources) -> Resources {
        Resources::new(self.cpu + other.cpu, self.mem + other.mem, self.io + other.io)
    }

    pub fn sub(&self, other: &Resources) -> Resources {
        Resources::new(self.cpu - other.cpu, self.mem - other.mem, self.io - other.io)
    }

    fn all(&self, pred: impl Fn(f64) -> bool) -> bool {
        self.as_array().into_iter().all(pred)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MachineEventKind {
    Add,
    Remove,
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskEventKind {
    Submit,
    Finish,
    Kill,
}

impl MachineEventKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Add => "ADD",
            Self::Remove => "REMOVE",
            Self::Update => "UPDATE",
        }
    }
}

impl FromStr for MachineEventKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ADD" => Ok(Self::Add),
            "REMOVE" => Ok(Self::Remove),
            "UPDATE" => Ok(Self::Update),
            other => Err(format!("unknown machine event kind {other:?}")),
        }
    }
}

impl TaskEventKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Submit => "SUBMIT",
            Self::Finish => "FINISH",
            Self::Kill => "KILL",
        }
    }
}

impl FromStr for TaskEventKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "SUBMIT" => Ok(Self::Submit),
            "FINISH" => Ok(Self::Finish),
            "KILL" => Ok(Self::Kill),
            other => Err(format!("unknown task event kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineEvent {
    pub timestamp: u64,
    pub machine_id: MachineId,
    pub kind: MachineEventKind,
    pub capacity: Resources,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub timestamp: u64,
    pub job_id: JobId,
    pub task_id: TaskId,
    pub tenant_id: TenantId,
    pub kind: TaskEventKind,
    pub demand: Resources,
    /// Seconds of work at full progress rate. Present on synthetic SUBMITs and
    /// filled in from the SUBMIT→FINISH/KILL gap for replayed traces.
    pub duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub machine_events: Vec<MachineEvent>,
    pub task_events: Vec<TaskEvent>,
    pub horizon: u64,
}

impl Trace {
    /// Machine ids in order of their first ADD event.
    pub fn machine_ids(&self) -> Vec<MachineId> {
        let mut seen = BTreeSet::new();
        self.machine_events
            .iter()
            .filter(|e| e.kind == MachineEventKind::Add && seen.insert(e.machine_id))
            .map(|e| e.machine_id)
            .collect()
    }

    pub fn submits(&self) -> impl Iterator<Item = &TaskEvent> {
        self.task_events.iter().filter(|e| e.kind == TaskEventKind::Submit)
    }

    /// Sorted distinct tenants among submitted tasks.
    pub fn tenant_ids(&self) -> Vec<TenantId> {
        self.submits()
            .map(|e| e.tenant_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn machine_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.machine_events.len() + 1));
        out.push_str(MACHINE_HEADER);
        out.push('\n');
        for e in &self.machine_events {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.timestamp,
                e.machine_id,
                e.kind.as_str(),
                e.capacity.cpu,
                e.capacity.mem,
                e.capacity.io
            ));
        }
        out
    }

    pub fn task_csv(&self) -> String {
        let mut out = String::with_capacity(80 * (self.task_events.len() + 1));
        out.push_str(TASK_HEADER);
        out.push('\n');
        for e in &self.task_events {
            let duration = e.duration.map(|d| d.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                e.timestamp,
                e.job_id,
                e.task_id,
                e.tenant_id,
                e.kind.as_str(),
                e.demand.cpu,
                e.demand.mem,
                e.demand.io,
                duration
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Parsing

struct Row<'a> {
    stream: &'static str,
    row: usize,
    fields: Vec<&'a str>,
}

impl Row<'_> {
    fn err(&self, msg: impl Into<String>) -> TraceError {
        TraceError::Parse {
            stream: self.stream,
            row: self.row,
            msg: msg.into(),
        }
    }

    fn timestamp(&self, i: usize) -> Result<u64, TraceError> {
        let raw = self.fields[i].trim();
        if let Ok(t) = raw.parse::<u64>() {
            return Ok(t);
        }
        match raw.parse::<f64>() {
            Ok(t) if t.is_finite() && t >= 0.0 => {
                Err(self.err(format!("sub-second timestamp {raw:?} (whole seconds only)")))
            }
            Ok(_) => Err(TraceError::Validation {
                stream: self.stream,
                row: self.row,
                msg: format!("negative or non-finite timestamp {raw:?}"),
            }),
            Err(_) => Err(self.err(format!("non-numeric timestamp {raw:?}"))),
        }
    }

    fn id(&self, i: usize, name: &str) -> Result<u64, TraceError> {
        let raw = self.fields[i].trim();
        raw.parse::<u64>()
            .map_err(|_| self.err(format!("non-numeric {name} {raw:?}")))
    }

    fn number(&self, i: usize, name: &str) -> Result<f64, TraceError> {
        let raw = self.fields[i].trim();
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.err(format!("non-numeric {name} {raw:?}"))),
        }
    }

    fn resources(&self, start: usize, what: &str) -> Result<Resources, TraceError> {
        Ok(Resources::new(
            self.number(start, &format!("cpu_{what}"))?,
            self.number(start + 1, &format!("mem_{what}"))?,
            self.number(start + 2, &format!("io_{what}"))?,
        ))
    }
}

fn read_rows<'a>(
    stream: &'static str,
    text: &'a str,
    header: &str,
) -> Result<Vec<Row<'a>>, TraceError> {
    let mut lines = text.split('\n').enumerate();
    let arity = header.split(',').count();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == header => {}
        Some((_, h)) if h.trim().is_empty() && text.trim().is_empty() => return Ok(Vec::new()),
        Some((_, h)) => {
            return Err(TraceError::Parse {
                stream,
                row: 1,
                msg: format!("expected header {header:?}, found {h:?}"),
            })
        }
        None => return Ok(Vec::new()),
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let row = Row {
            stream,
            row: idx + 1,
            fields,
        };
        if row.fields.len() != arity {
            return Err(row.err(format!(
                "expected {arity} fields, found {}",
                row.fields.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Parses, validates and time-sorts a pair of event streams.
///
/// Row numbers in errors are 1-based file line numbers (the header is row 1).
/// Rows with equal timestamps keep their file order.
pub fn parse_trace(machine_stream: &str, task_stream: &str) -> Result<Trace, TraceError> {
    let mut machine_events = Vec::new();
    for row in read_rows("machine", machine_stream, MACHINE_HEADER)? {
        let kind = row.fields[2]
            .trim()
            .parse::<MachineEventKind>()
            .map_err(|m| row.err(m))?;
        let ev = MachineEvent {
            timestamp: row.timestamp(0)?,
            machine_id: MachineId(row.id(1, "machine_id")?),
            kind,
            capacity: row.resources(3, "capacity")?,
        };
        if !ev.capacity.all(|c| c >= 0.0) {
            return Err(TraceError::Validation {
                stream: "machine",
                row: row.row,
                msg: "negative capacity".into(),
            });
        }
        machine_events.push((row.row, ev));
    }

    let mut task_events = Vec::new();
    for row in read_rows("task", task_stream, TASK_HEADER)? {
        let kind = row.fields[4]
            .trim()
            .parse::<TaskEventKind>()
            .map_err(|m| row.err(m))?;
        let duration = match row.fields[8].trim() {
            "" => None,
            _ => Some(row.number(8, "duration")?),
        };
        let ev = TaskEvent {
            timestamp: row.timestamp(0)?,
            job_id: JobId(row.id(1, "job_id")?),
            task_id: TaskId(row.id(2, "task_id")?),
            tenant_id: TenantId(row.id(3, "tenant_id")?),
            kind,
            demand: row.resources(5, "demand")?,
            duration,
        };
        let invalid = |msg: &str| TraceError::Validation {
            stream: "task",
            row: row.row,
            msg: msg.into(),
        };
        if !ev.demand.all(|d| d >= 0.0) {
            return Err(invalid("negative demand"));
        }
        if !ev.demand.all(|d| d <= 1.0) {
            return Err(invalid("demand above one reference machine"));
        }
        if matches!(ev.duration, Some(d) if d < 0.0) {
            return Err(invalid("negative duration"));
        }
        task_events.push((row.row, ev));
    }

    machine_events.sort_by_key(|(_, e)| e.timestamp);
    task_events.sort_by_key(|(_, e)| e.timestamp);
    validate_machine_order(&machine_events)?;
    derive_durations(&mut task_events)?;

    let mut trace = Trace {
        machine_events: machine_events.into_iter().map(|(_, e)| e).collect(),
        task_events: task_events.into_iter().map(|(_, e)| e).collect(),
        horizon: 0,
    };
    trace.horizon = natural_horizon(&trace);
    Ok(trace)
}

fn validate_machine_order(events: &[(usize, MachineEvent)]) -> Result<(), TraceError> {
    let mut alive: HashMap<MachineId, bool> = HashMap::new();
    for (row, e) in events {
        let state = alive.get(&e.machine_id).copied();
        let ok = match e.kind {
            MachineEventKind::Add => state != Some(true),
            MachineEventKind::Update | MachineEventKind::Remove => state == Some(true),
        };
        if !ok {
            return Err(TraceError::Ordering {
                stream: "machine",
                row: *row,
                msg: format!("{} for machine {} out of order", e.kind.as_str(), e.machine_id),
            });
        }
        alive.insert(e.machine_id, e.kind != MachineEventKind::Remove);
    }
    Ok(())
}

/// Checks SUBMIT-before-end ordering and fills SUBMIT durations from the
/// matching FINISH/KILL (a KILL counts as completion with no residual work).
fn derive_durations(events: &mut [(usize, TaskEvent)]) -> Result<(), TraceError> {
    let mut submit_at: HashMap<TaskId, usize> = HashMap::new();
    let mut ended: BTreeSet<TaskId> = BTreeSet::new();
    for i in 0..events.len() {
        let (row, ref e) = events[i];
        match e.kind {
            TaskEventKind::Submit => {
                if submit_at.insert(e.task_id, i).is_some() {
                    return Err(TraceError::Validation {
                        stream: "task",
                        row,
                        msg: format!("duplicate SUBMIT for task {}", e.task_id),
                    });
                }
            }
            TaskEventKind::Finish | TaskEventKind::Kill => {
                let Some(&si) = submit_at.get(&e.task_id) else {
                    return Err(TraceError::Ordering {
                        stream: "task",
                        row,
                        msg: format!(
                            "{} for task {} before its SUBMIT",
                            e.kind.as_str(),
                            e.task_id
                        ),
                    });
                };
                if !ended.insert(e.task_id) {
                    return Err(TraceError::Ordering {
                        stream: "task",
                        row,
                        msg: format!("task {} ended twice", e.task_id),
                    });
                }
                let gap = (e.timestamp - events[si].1.timestamp) as f64;
                if events[si].1.duration.is_none() {
                    events[si].1.duration = Some(gap);
                }
            }
        }
    }
    Ok(())
}

/// Latest event time, counting a SUBMIT as lasting until its duration runs out.
fn natural_horizon(trace: &Trace) -> u64 {
    let machine_max = trace.machine_events.iter().map(|e| e.timestamp).max();
    let task_max = trace
        .task_events
        .iter()
        .map(|e| e.timestamp + e.duration.map_or(0, |d| d.ceil() as u64))
        .max();
    machine_max.max(task_max).unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Synthetic workloads

/// Parametric scalar distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { mean: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl Dist {
    fn validate(&self, what: &str) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::InvalidSpec(format!("{what}: {m}")));
        match *self {
            Dist::Constant { value } if !value.is_finite() => bad("non-finite value"),
            Dist::Uniform { low, high } if !(low.is_finite() && high.is_finite() && low <= high) => {
                bad("uniform needs finite low <= high")
            }
            Dist::Exponential { mean } if !(mean.is_finite() && mean > 0.0) => {
                bad("exponential mean must be > 0")
            }
            Dist::LogNormal { mu, sigma } if !(mu.is_finite() && sigma.is_finite() && sigma >= 0.0) => {
                bad("lognormal needs finite mu and sigma >= 0")
            }
            _ => Ok(()),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Constant { value } => value,
            Dist::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
            Dist::Exponential { mean } => Exp::new(1.0 / mean).expect("validated").sample(rng),
            Dist::LogNormal { mu, sigma } => LogNormal::new(mu, sigma).expect("validated").sample(rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceDists {
    pub cpu: Dist,
    pub mem: Dist,
    pub io: Dist,
}

impl ResourceDists {
    fn sample<R: Rng>(&self, rng: &mut R) -> Resources {
        Resources::new(self.cpu.sample(rng), self.mem.sample(rng), self.io.sample(rng))
    }

    fn validate(&self, what: &str) -> Result<(), TraceError> {
        self.cpu.validate(&format!("{what}.cpu"))?;
        self.mem.validate(&format!("{what}.mem"))?;
        self.io.validate(&format!("{what}.io"))
    }
}

/// Statistical description of a synthetic workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub n_machines: usize,
    pub machine_capacity_distribution: ResourceDists,
    /// Poisson arrival rate, tasks per second.
    pub task_arrival_rate: f64,
    pub n_tasks: usize,
    pub demand_distribution: ResourceDists,
    pub duration_distribution: Dist,
    pub n_tenants: usize,
    /// Zipf exponent over tenant ranks; 0 is uniform.
    pub tenant_skew: f64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), TraceError> {
        let bad = |m: &str| Err(TraceError::InvalidSpec(m.into()));
        if self.n_machines == 0 || self.n_tasks == 0 || self.n_tenants == 0 {
            return bad("n_machines, n_tasks and n_tenants must be >= 1");
        }
        if !(self.task_arrival_rate.is_finite() && self.task_arrival_rate > 0.0) {
            return bad("task_arrival_rate must be > 0");
        }
        if !(self.tenant_skew.is_finite() && self.tenant_skew >= 0.0) {
            return bad("tenant_skew must be >= 0");
        }
        self.machine_capacity_distribution
            .validate("machine_capacity_distribution")?;
        self.demand_distribution.validate("demand_distribution")?;
        self.duration_distribution.validate("duration_distribution")
    }

    /// The bundled desk-scale workload: 4 unit machines, 200 tasks.
    pub fn toy() -> Self {
        serde_json::from_str(include_str!("../../../configs/toy_workload.json"))
            .expect("bundled toy workload parses")
    }
}

/// Draws a trace from `spec`. Machines are all added at t=0; tasks get
/// Poisson arrivals (timestamps floored to whole seconds), demands clamped to
/// [0, 1], durations of at least one second, and Zipf-ranked tenants
/// (tenant 1 is the heaviest).
pub fn generate_synthetic(spec: &WorkloadSpec, seed: u64) -> Result<Trace, TraceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let machine_events = (0..spec.n_machines)
        .map(|i| {
            let c = spec.machine_capacity_distribution.sample(&mut rng);
            MachineEvent {
                timestamp: 0,
                machine_id: MachineId(i as u64),
                kind: MachineEventKind::Add,
                capacity: Resources::new(c.cpu.max(0.0), c.mem.max(0.0), c.io.max(0.0)),
            }
        })
        .collect();

    let inter_arrival = Exp::new(spec.task_arrival_rate).expect("validated rate");
    let tenants = Zipf::new(spec.n_tenants as f64, spec.tenant_skew)
        .map_err(|e| TraceError::InvalidSpec(format!("tenant distribution: {e}")))?;
    let clamp = |v: f64| v.clamp(0.0, 1.0);

    let mut clock = 0.0f64;
    let mut task_events = Vec::with_capacity(spec.n_tasks);
    for i in 0..spec.n_tasks {
        clock += inter_arrival.sample(&mut rng);
        let d = spec.demand_distribution.sample(&mut rng);
        let duration = spec.duration_distribution.sample(&mut rng).max(1.0);
        let tenant = tenants.sample(&mut rng) as u64;
        task_events.push(TaskEvent {
            timestamp: clock.floor() as u64,
            job_id: JobId(i as u64),
            task_id: TaskId(i as u64),
            tenant_id: TenantId(tenant),
            kind: TaskEventKind::Submit,
            demand: Resources::new(clamp(d.cpu), clamp(d.mem), clamp(d.io)),
            duration: Some(duration),
        });
    }

    let mut trace = Trace {
        machine_events,
        task_events,
        horizon: 0,
    };
    trace.horizon = natural_horizon(&trace);
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Summary

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceSummary {
    pub n_tasks: usize,
    pub n_machines: usize,
    pub n_tenants: usize,
    pub total_demand: Resources,
    pub horizon: u64,
    pub tasks_per_tenant: BTreeMap<TenantId, usize>,
}

pub fn trace_stats(trace: &Trace) -> TraceSummary {
    let mut summary = TraceSummary {
        n_machines: trace.machine_ids().len(),
        horizon: trace.horizon,
        ..Default::default()
    };
    for e in trace.submits() {
        summary.n_tasks += 1;
        summary.total_demand = summary.total_demand.add(&e.demand);
        *summary.tasks_per_tenant.entry(e.tenant_id).or_default() += 1;
    }
    summary.n_tenants = summary.tasks_per_tenant.len();
    summary
}

//! Discrete-time cluster simulator.
//!
//! One [`ClusterState::step`] is one simulated second. Each step applies the
//! joint action in a fixed order (scheduler proposals, compute admissions,
//! storage throttles; ascending agent id within a role), computes the local
//! rewards and the global signal for the interval, advances running work,
//! ticks the clock and injects the trace events that became due.
//!
//! Local feature layouts (schema version [`FEATURE_SCHEMA_VERSION`]):
//!
//! * scheduler, `4·M + 7` features: per machine slot `[present, residual cpu,
//!   residual mem, residual io]`, then its queue-slot task `[present, cpu, mem,
//!   io, wait / horizon]`, then `queue length / total tasks`, `clock / horizon`.
//! * compute, 13 features over its own machines: mean allocated fraction
//!   (cpu, mem, io), max residual (cpu, mem, io), resident tasks / 10, the
//!   head-of-queue task `[present, cpu, mem, io]`, queue fraction, clock
//!   fraction.
//! * storage, 6 features over its group: mean io allocated fraction, running
//!   tasks / 10, current throttle level, mean remaining work / horizon, queue
//!   fraction, clock fraction.
//!
//! Local rewards: a scheduler loses `1 / horizon` for each step its queue
//! slot is left waiting; a compute agent earns the mean cpu utilization of
//! its present machines minus 2 per overload rejection; a storage agent
//! earns the progress rate of its group while anything runs there, minus 0.1
//! when it changes the throttle. Any invalid action costs 1. The global
//! signal is cluster utilization minus the pending fraction of all tasks.
//!
//! The global state seen by the centralized critic is never masked: per-slot
//! cpu utilization, queue fraction, per-tenant running cpu shares and the
//! clock fraction.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{Action, AgentId, Observation, RoleMap, RoleTag, ADMIT, DEFER, THROTTLE_LEVELS};
use crate::metrics::EpisodeRecord;
use crate::trace::{MachineEventKind, MachineId, Resources, TaskEventKind, TaskId, TenantId, Trace};

pub const FEATURE_SCHEMA_VERSION: u32 = 1;
pub const COMPUTE_FEATURES: usize = 13;
pub const STORAGE_FEATURES: usize = 6;

pub fn scheduler_features(n_machines: usize) -> usize {
    4 * n_machines + 7
}

pub const INVALID_ACTION_PENALTY: f64 = 1.0;
pub const OVERLOAD_PENALTY: f64 = 2.0;
pub const CHURN_PENALTY: f64 = 0.1;
const FIT_EPS: f64 = 1e-9;
const DEFAULT_THROTTLE: usize = 2;

/// True when `demand` fits into `residual` on every resource.
pub fn fits(residual: &Resources, demand: &Resources) -> bool {
    demand.cpu <= residual.cpu + FIT_EPS
        && demand.mem <= residual.mem + FIT_EPS
        && demand.io <= residual.io + FIT_EPS
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("unknown machine {0}")]
    UnknownMachine(MachineId),
    #[error("machine {0} is not present")]
    MachineAbsent(MachineId),
    #[error("task {0} is not pending")]
    NotPending(TaskId),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("joint action has {got} entries, expected {expected}")]
    JointActionSize { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineState {
    pub machine_id: MachineId,
    pub present: bool,
    pub capacity: Resources,
    pub allocated: Resources,
    pub resident_tasks: BTreeSet<TaskId>,
    pub role_owner: AgentId,
    pub storage_owner: AgentId,
}

impl MachineState {
    pub fn residual(&self) -> Resources {
        self.capacity.sub(&self.allocated)
    }

    fn cpu_utilization(&self) -> f64 {
        if self.present && self.capacity.cpu > 0.0 {
            self.allocated.cpu / self.capacity.cpu
        } else {
            0.0
        }
    }

    fn fraction(alloc: f64, cap: f64) -> f64 {
        if cap > 0.0 {
            alloc / cap
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskStatus {
    Pending,
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    pub task_id: TaskId,
    pub tenant_id: TenantId,
    pub demand: Resources,
    pub submit_time: u64,
    /// First placement time.
    pub place_time: Option<u64>,
    pub finish_time: Option<u64>,
    pub remaining_work: f64,
    pub status: TaskStatus,
    machine: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Placed,
    /// Over capacity on some resource; nothing changed.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub local_rewards: Vec<f64>,
    pub global_signal: f64,
    pub placed: Vec<(TaskId, MachineId)>,
    pub invalid_actions: Vec<AgentId>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub clock: u64,
    pub event: &'static str,
    pub task_id: Option<TaskId>,
    pub machine_id: Option<MachineId>,
    pub agent_id: Option<AgentId>,
}

pub const EPISODE_LOG_HEADER: &str = "clock,event,task_id,machine_id,agent_id";

/// View of the scheduler's own task and machine features inside its
/// observation vector.
pub struct SchedulerTaskView {
    pub present: bool,
    pub demand: Resources,
}

impl SchedulerTaskView {
    pub fn from_features(f: &[f64], n_machines: usize) -> Self {
        let b = 4 * n_machines;
        Self {
            present: f[b] > 0.5,
            demand: Resources::new(f[b + 1], f[b + 2], f[b + 3]),
        }
    }

    pub fn machine(f: &[f64], slot: usize) -> (bool, Resources) {
        let b = 4 * slot;
        (f[b] > 0.5, Resources::new(f[b + 1], f[b + 2], f[b + 3]))
    }
}

/// The simulator's world state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    clock: u64,
    horizon: u64,
    total_tasks: usize,
    machines: Vec<MachineState>,
    slot_of: HashMap<MachineId, usize>,
    tasks: Vec<TaskState>,
    task_index: HashMap<TaskId, usize>,
    pending: VecDeque<usize>,
    tenants: Vec<TenantId>,
    throttle: Vec<usize>,
    obs_memory: Vec<Vec<f64>>,
    trace: Arc<Trace>,
    role_map: Arc<RoleMap>,
    next_machine_event: usize,
    next_task_event: usize,
    n_running: usize,
    n_finished: usize,
    rng: ChaCha8Rng,
    record: EpisodeRecord,
    log: Option<Vec<LogRow>>,
}

/// Builds the initial state: clock 0, machines and tasks from events at t=0.
pub fn init_state(trace: &Trace, role_map: &RoleMap, seed: u64) -> Result<ClusterState, SimError> {
    ClusterState::new(Arc::new(trace.clone()), Arc::new(role_map.clone()), seed)
}

/// All agents idle: schedulers and compute agents defer, storage agents keep
/// the initial throttle.
pub fn noop_joint_action(role_map: &RoleMap) -> Vec<Action> {
    role_map
        .agents()
        .map(|a| {
            let role = role_map.role_of(a).expect("agent in map");
            let index = match role.tag {
                RoleTag::Scheduler => role.action_space_size - 1,
                RoleTag::Compute => DEFER,
                RoleTag::Storage => DEFAULT_THROTTLE,
            };
            Action { role: role.tag, index }
        })
        .collect()
}

impl ClusterState {
    pub fn new(trace: Arc<Trace>, role_map: Arc<RoleMap>, seed: u64) -> Result<Self, SimError> {
        let trace_machines = trace.machine_ids();
        if trace_machines.is_empty() {
            return Err(SimError::Config("trace has no machines".into()));
        }
        for m in &trace_machines {
            if role_map.owner_of(*m).is_none() {
                return Err(SimError::Config(format!("machine {m} has no compute owner")));
            }
        }
        let machines: Vec<MachineState> = role_map
            .machines()
            .iter()
            .map(|&mid| MachineState {
                machine_id: mid,
                present: false,
                capacity: Resources::ZERO,
                allocated: Resources::ZERO,
                resident_tasks: BTreeSet::new(),
                role_owner: role_map.owner_of(mid).expect("owned"),
                storage_owner: role_map.storage_of(mid).expect("grouped"),
            })
            .collect();
        let slot_of = machines
            .iter()
            .enumerate()
            .map(|(i, m)| (m.machine_id, i))
            .collect();
        let tenants = trace.tenant_ids();
        let record = EpisodeRecord {
            tenant_cpu_time: tenants.iter().map(|t| (*t, 0.0)).collect(),
            ..Default::default()
        };
        let obs_memory = role_map
            .agents()
            .map(|a| vec![0.0; role_map.role_of(a).expect("agent").observation_size])
            .collect();
        let mut state = ClusterState {
            clock: 0,
            horizon: trace.horizon,
            total_tasks: trace.submits().count(),
            machines,
            slot_of,
            tasks: Vec::new(),
            task_index: HashMap::new(),
            pending: VecDeque::new(),
            tenants,
            throttle: vec![DEFAULT_THROTTLE; role_map.n_agents()],
            obs_memory,
            trace,
            role_map,
            next_machine_event: 0,
            next_task_event: 0,
            n_running: 0,
            n_finished: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            record,
            log: None,
        };
        state.inject_events();
        Ok(state)
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn total_tasks(&self) -> usize {
        self.total_tasks
    }

    pub fn machines(&self) -> &[MachineState] {
        &self.machines
    }

    pub fn machine(&self, id: MachineId) -> Option<&MachineState> {
        self.slot_of.get(&id).map(|&s| &self.machines[s])
    }

    pub fn tasks(&self) -> &[TaskState] {
        &self.tasks
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskState> {
        self.task_index.get(&id).map(|&i| &self.tasks[i])
    }

    pub fn tenants(&self) -> &[TenantId] {
        &self.tenants
    }

    pub fn role_map(&self) -> &RoleMap {
        &self.role_map
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_ids(&self) -> Vec<TaskId> {
        self.pending.iter().map(|&i| self.tasks[i].task_id).collect()
    }

    /// The `k`-th task in the pending queue.
    pub fn queued_task(&self, k: usize) -> Option<&TaskState> {
        self.pending.get(k).map(|&i| &self.tasks[i])
    }

    pub fn throttle_level(&self, storage_agent: AgentId) -> f64 {
        THROTTLE_LEVELS[self.throttle[storage_agent.0]]
    }

    pub fn is_done(&self) -> bool {
        self.n_finished == self.total_tasks || self.clock > self.horizon
    }

    pub fn record(&self) -> &EpisodeRecord {
        &self.record
    }

    pub fn into_record(self) -> EpisodeRecord {
        self.record
    }

    pub fn enable_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn log_rows(&self) -> &[LogRow] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn log_csv(&self) -> String {
        let mut out = format!("{EPISODE_LOG_HEADER}\n");
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in self.log_rows() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.clock,
                r.event,
                opt(r.task_id.map(|t| t.0)),
                opt(r.machine_id.map(|m| m.0)),
                opt(r.agent_id.map(|a| a.0 as u64))
            );
        }
        out
    }

    fn log(&mut self, event: &'static str, task: Option<usize>, slot: Option<usize>, agent: Option<AgentId>) {
        if let Some(log) = self.log.as_mut() {
            log.push(LogRow {
                clock: self.clock,
                event,
                task_id: task.map(|i| self.tasks[i].task_id),
                machine_id: slot.map(|s| self.machines[s].machine_id),
                agent_id: agent,
            });
        }
    }

    /// Cluster-wide allocated cpu over present capacity.
    pub fn cluster_utilization(&self) -> f64 {
        let (alloc, cap) = self
            .machines
            .iter()
            .filter(|m| m.present)
            .fold((0.0, 0.0), |(a, c), m| (a + m.allocated.cpu, c + m.capacity.cpu));
        if cap > 0.0 {
            alloc / cap
        } else {
            0.0
        }
    }

    fn queue_fraction(&self) -> f64 {
        self.pending.len() as f64 / self.total_tasks.max(1) as f64
    }

    fn clock_fraction(&self) -> f64 {
        self.clock as f64 / self.horizon.max(1) as f64
    }

    /// Places a pending task on a machine. Capacity violations are
    /// rejections, not errors.
    pub fn place_task(&mut self, task_id: TaskId, machine_id: MachineId) -> Result<Placement, SimError> {
        let &ti = self.task_index.get(&task_id).ok_or(SimError::UnknownTask(task_id))?;
        let &slot = self.slot_of.get(&machine_id).ok_or(SimError::UnknownMachine(machine_id))?;
        if self.tasks[ti].status != TaskStatus::Pending {
            return Err(SimError::NotPending(task_id));
        }
        if !self.machines[slot].present {
            return Err(SimError::MachineAbsent(machine_id));
        }
        let placed = self.try_place(ti, slot);
        if placed == Placement::Placed {
            self.pending.retain(|&i| i != ti);
        }
        Ok(placed)
    }

    /// Placement without queue bookkeeping; returns the latency sample when
    /// this is the task's first placement.
    fn try_place(&mut self, ti: usize, slot: usize) -> Placement {
        let demand = self.tasks[ti].demand;
        let m = &mut self.machines[slot];
        if !fits(&m.residual(), &demand) {
            return Placement::Rejected;
        }
        m.allocated = m.allocated.add(&demand);
        m.allocated.cpu = m.allocated.cpu.min(m.capacity.cpu);
        m.allocated.mem = m.allocated.mem.min(m.capacity.mem);
        m.allocated.io = m.allocated.io.min(m.capacity.io);
        m.resident_tasks.insert(self.tasks[ti].task_id);
        let clock = self.clock;
        let t = &mut self.tasks[ti];
        t.status = TaskStatus::Running;
        t.machine = Some(slot);
        if t.place_time.is_none() {
            t.place_time = Some(clock);
            self.record.latencies_s.push((clock - t.submit_time) as f64);
        }
        self.n_running += 1;
        Placement::Placed
    }

    fn release(&mut self, ti: usize) {
        let slot = self.tasks[ti].machine.take().expect("running task has a machine");
        let demand = self.tasks[ti].demand;
        let m = &mut self.machines[slot];
        m.resident_tasks.remove(&self.tasks[ti].task_id);
        if m.resident_tasks.is_empty() {
            m.allocated = Resources::ZERO;
        } else {
            let a = m.allocated.sub(&demand);
            m.allocated = Resources::new(a.cpu.max(0.0), a.mem.max(0.0), a.io.max(0.0));
        }
        self.n_running -= 1;
    }

    /// Moves resident tasks back to the front of the queue, newest first out.
    fn evict(&mut self, slot: usize, only_until_fits: bool) {
        let mut evicted = Vec::new();
        loop {
            let m = &self.machines[slot];
            let over = !fits(&m.capacity.sub(&m.allocated), &Resources::ZERO);
            if only_until_fits && !over {
                break;
            }
            let Some(&tid) = m.resident_tasks.iter().next_back() else {
                break;
            };
            let ti = self.task_index[&tid];
            self.release(ti);
            self.tasks[ti].status = TaskStatus::Pending;
            self.log("EVICT", Some(ti), Some(slot), None);
            evicted.push(ti);
        }
        for ti in evicted {
            self.pending.push_front(ti);
        }
    }

    fn inject_events(&mut self) {
        let trace = Arc::clone(&self.trace);
        while let Some(e) = trace.machine_events.get(self.next_machine_event) {
            if e.timestamp > self.clock {
                break;
            }
            self.next_machine_event += 1;
            let Some(&slot) = self.slot_of.get(&e.machine_id) else {
                continue;
            };
            match e.kind {
                MachineEventKind::Add => {
                    let m = &mut self.machines[slot];
                    m.present = true;
                    m.capacity = e.capacity;
                    m.allocated = Resources::ZERO;
                    self.log("MACHINE_ADD", None, Some(slot), None);
                }
                MachineEventKind::Update => {
                    self.machines[slot].capacity = e.capacity;
                    self.evict(slot, true);
                    self.log("MACHINE_UPDATE", None, Some(slot), None);
                }
                MachineEventKind::Remove => {
                    self.evict(slot, false);
                    self.machines[slot].present = false;
                    self.log("MACHINE_REMOVE", None, Some(slot), None);
                }
            }
        }
        while let Some(e) = trace.task_events.get(self.next_task_event) {
            if e.timestamp > self.clock {
                break;
            }
            self.next_task_event += 1;
            if e.kind != TaskEventKind::Submit {
                // completion is driven by remaining work, not by the log
                continue;
            }
            let work = e
                .duration
                .unwrap_or_else(|| self.horizon.saturating_sub(e.timestamp).max(1) as f64);
            let ti = self.tasks.len();
            self.tasks.push(TaskState {
                task_id: e.task_id,
                tenant_id: e.tenant_id,
                demand: e.demand,
                submit_time: e.timestamp,
                place_time: None,
                finish_time: None,
                remaining_work: work,
                status: TaskStatus::Pending,
                machine: None,
            });
            self.task_index.insert(e.task_id, ti);
            self.pending.push_back(ti);
            self.log("SUBMIT", Some(ti), None, None);
        }
    }

    fn shape_ok(&self, agent: AgentId, action: &Action) -> bool {
        let role = self.role_map.role_of(agent).expect("agent in map");
        action.role == role.tag && action.index < role.action_space_size
    }

    /// Advances the simulation by one second under `joint_action`
    /// (indexed by agent id). Illegal actions never fault: the agent is
    /// penalised and the action becomes a no-op.
    pub fn step(&mut self, joint_action: &[Action]) -> Result<StepOutcome, SimError> {
        let rm = Arc::clone(&self.role_map);
        let n = rm.n_agents();
        if joint_action.len() != n {
            return Err(SimError::JointActionSize {
                got: joint_action.len(),
                expected: n,
            });
        }
        let n_slots = self.machines.len();
        let mut invalid = vec![false; n];
        let mut overloads = vec![0usize; n];
        let mut churn = vec![false; n];
        let mut placed = Vec::new();

        // Schedulers: scheduler k proposes the k-th queued task.
        let snapshot: Vec<usize> = self.pending.iter().copied().collect();
        let mut proposals: Vec<(AgentId, usize, usize)> = Vec::new();
        for (rank, agent) in rm.agents_with_role(RoleTag::Scheduler).enumerate() {
            let a = joint_action[agent.0];
            if !self.shape_ok(agent, &a) {
                invalid[agent.0] = true;
                continue;
            }
            if a.index == n_slots {
                continue;
            }
            match snapshot.get(rank) {
                Some(&ti) if self.machines[a.index].present => proposals.push((agent, ti, a.index)),
                _ => invalid[agent.0] = true,
            }
        }

        // Compute agents admit or bounce proposals for their machines.
        let horizon = self.horizon.max(1) as f64;
        for agent in rm.agents_with_role(RoleTag::Compute) {
            let a = joint_action[agent.0];
            let admit = if self.shape_ok(agent, &a) {
                a.index == ADMIT
            } else {
                invalid[agent.0] = true;
                false
            };
            let mine: Vec<(AgentId, usize, usize)> = proposals
                .iter()
                .copied()
                .filter(|p| self.machines[p.2].role_owner == agent)
                .collect();
            for (sched, ti, slot) in mine {
                if !admit {
                    self.log("DEFER", Some(ti), Some(slot), Some(agent));
                    continue;
                }
                match self.try_place(ti, slot) {
                    Placement::Placed => {
                        self.pending.retain(|&i| i != ti);
                        placed.push((self.tasks[ti].task_id, self.machines[slot].machine_id));
                        self.log("PLACE", Some(ti), Some(slot), Some(sched));
                    }
                    Placement::Rejected => {
                        overloads[agent.0] += 1;
                        invalid[sched.0] = true;
                        self.log("REJECT", Some(ti), Some(slot), Some(sched));
                    }
                }
            }
        }

        // A scheduler pays for every second its queue slot keeps waiting; over
        // a task's life this sums to its latency over the horizon.
        let mut waiting = vec![false; n];
        for (rank, agent) in rm.agents_with_role(RoleTag::Scheduler).enumerate() {
            if let Some(&ti) = snapshot.get(rank) {
                waiting[agent.0] = self.tasks[ti].status == TaskStatus::Pending;
            }
        }

        // Storage agents set the io throttle of their group.
        for agent in rm.agents_with_role(RoleTag::Storage) {
            let a = joint_action[agent.0];
            if !self.shape_ok(agent, &a) {
                invalid[agent.0] = true;
                continue;
            }
            churn[agent.0] = self.throttle[agent.0] != a.index;
            self.throttle[agent.0] = a.index;
        }

        // Rewards over the interval [clock, clock + 1).
        let utilization = self.cluster_utilization();
        let global_signal = utilization - self.queue_fraction();
        let mut local_rewards = vec![0.0; n];
        for agent in rm.agents() {
            let i = agent.0;
            let base = match rm.role_of(agent).expect("agent").tag {
                RoleTag::Scheduler => {
                    if waiting[i] {
                        -1.0 / horizon
                    } else {
                        0.0
                    }
                }
                RoleTag::Compute => {
                    let owned: Vec<&MachineState> = rm
                        .compute_group(agent)
                        .iter()
                        .map(|m| &self.machines[self.slot_of[m]])
                        .filter(|m| m.present)
                        .collect();
                    let util = if owned.is_empty() {
                        0.0
                    } else {
                        owned.iter().map(|m| m.cpu_utilization()).sum::<f64>() / owned.len() as f64
                    };
                    util - OVERLOAD_PENALTY * overloads[i] as f64
                }
                RoleTag::Storage => {
                    let governs_running = rm
                        .storage_group(agent)
                        .iter()
                        .any(|m| !self.machines[self.slot_of[m]].resident_tasks.is_empty());
                    let progress = if governs_running { self.throttle_level(agent) } else { 0.0 };
                    progress - if churn[i] { CHURN_PENALTY } else { 0.0 }
                }
            };
            local_rewards[i] = base - if invalid[i] { INVALID_ACTION_PENALTY } else { 0.0 };
        }
        self.record.utilization.push(utilization);

        self.clock += 1;
        self.advance_work();
        self.inject_events();
        self.record.simulated_seconds = self.clock;
        self.record.finished_tasks = self.n_finished;

        Ok(StepOutcome {
            local_rewards,
            global_signal,
            placed,
            invalid_actions: (0..n).filter(|&i| invalid[i]).map(AgentId).collect(),
            done: self.is_done(),
        })
    }

    fn advance_work(&mut self) {
        let mut finished = Vec::new();
        for slot in 0..self.machines.len() {
            let rate = THROTTLE_LEVELS[self.throttle[self.machines[slot].storage_owner.0]];
            for tid in &self.machines[slot].resident_tasks {
                let ti = self.task_index[tid];
                let t = &mut self.tasks[ti];
                *self.record.tenant_cpu_time.entry(t.tenant_id).or_default() += t.demand.cpu;
                t.remaining_work -= rate;
                if t.remaining_work <= 1e-12 {
                    t.remaining_work = 0.0;
                    finished.push(ti);
                }
            }
        }
        for ti in finished {
            let slot = self.tasks[ti].machine;
            self.release(ti);
            let t = &mut self.tasks[ti];
            t.status = TaskStatus::Finished;
            t.finish_time = Some(self.clock);
            self.n_finished += 1;
            self.log("FINISH", Some(ti), slot, None);
        }
    }

    /// Ground-truth local features of an agent, before any masking.
    pub fn local_features(&self, agent: AgentId) -> Result<Vec<f64>, SimError> {
        let role = self.role_map.role_of(agent).map_err(|_| SimError::UnknownAgent(agent))?;
        let head = |k: usize| -> [f64; 4] {
            match self.queued_task(k) {
                Some(t) => [1.0, t.demand.cpu, t.demand.mem, t.demand.io],
                None => [0.0; 4],
            }
        };
        let mut f = Vec::with_capacity(role.observation_size);
        match role.tag {
            RoleTag::Scheduler => {
                for m in &self.machines {
                    if m.present {
                        let r = m.residual();
                        f.extend([1.0, r.cpu, r.mem, r.io]);
                    } else {
                        f.extend([0.0; 4]);
                    }
                }
                let rank = self.role_map.scheduler_rank(agent).expect("scheduler");
                f.extend(head(rank));
                f.push(
                    self.queued_task(rank)
                        .map_or(0.0, |t| (self.clock - t.submit_time) as f64 / self.horizon.max(1) as f64),
                );
            }
            RoleTag::Compute => {
                let owned: Vec<&MachineState> = self
                    .role_map
                    .compute_group(agent)
                    .iter()
                    .map(|m| &self.machines[self.slot_of[m]])
                    .filter(|m| m.present)
                    .collect();
                let k = owned.len().max(1) as f64;
                let frac = |g: fn(&Resources) -> f64| {
                    owned
                        .iter()
                        .map(|m| MachineState::fraction(g(&m.allocated), g(&m.capacity)))
                        .sum::<f64>()
                        / k
                };
                let max_res = |g: fn(&Resources) -> f64| {
                    owned.iter().map(|m| g(&m.residual())).fold(0.0, f64::max)
                };
                f.extend([frac(|r| r.cpu), frac(|r| r.mem), frac(|r| r.io)]);
                f.extend([max_res(|r| r.cpu), max_res(|r| r.mem), max_res(|r| r.io)]);
                f.push(owned.iter().map(|m| m.resident_tasks.len()).sum::<usize>() as f64 / 10.0);
                f.extend(head(0));
            }
            RoleTag::Storage => {
                let group: Vec<&MachineState> = self
                    .role_map
                    .storage_group(agent)
                    .iter()
                    .map(|m| &self.machines[self.slot_of[m]])
                    .filter(|m| m.present)
                    .collect();
                let k = group.len().max(1) as f64;
                let io = group
                    .iter()
                    .map(|m| MachineState::fraction(m.allocated.io, m.capacity.io))
                    .sum::<f64>()
                    / k;
                let running: Vec<&TaskState> = group
                    .iter()
                    .flat_map(|m| m.resident_tasks.iter().map(|t| &self.tasks[self.task_index[t]]))
                    .collect();
                let mean_remaining = if running.is_empty() {
                    0.0
                } else {
                    running.iter().map(|t| t.remaining_work).sum::<f64>() / running.len() as f64
                };
                f.extend([
                    io,
                    running.len() as f64 / 10.0,
                    self.throttle_level(agent),
                    mean_remaining / self.horizon.max(1) as f64,
                ]);
            }
        }
        f.push(self.queue_fraction());
        f.push(self.clock_fraction());
        debug_assert_eq!(f.len(), role.observation_size);
        Ok(f)
    }

    /// Local observation with each feature independently lost with
    /// probability `info_loss_rate`; a lost feature repeats the agent's last
    /// observed value (zero if never observed) and raises its staleness flag.
    pub fn observe_local<R: Rng + ?Sized>(
        &mut self,
        agent: AgentId,
        info_loss_rate: f64,
        rng: &mut R,
    ) -> Result<Observation, SimError> {
        let raw = self.local_features(agent)?;
        let role = self.role_map.role_of(agent).expect("checked").tag;
        let memory = &mut self.obs_memory[agent.0];
        let mut staleness = vec![false; raw.len()];
        let mut features = raw;
        for (i, v) in features.iter_mut().enumerate() {
            if rng.random::<f64>() < info_loss_rate {
                *v = memory[i];
                staleness[i] = true;
            } else {
                memory[i] = *v;
            }
        }
        Ok(Observation {
            role,
            features,
            staleness,
        })
    }

    /// [`observe_local`](Self::observe_local) driven by the state's own
    /// random stream.
    pub fn observe(&mut self, agent: AgentId, info_loss_rate: f64) -> Result<Observation, SimError> {
        let mut rng = self.rng.clone();
        let obs = self.observe_local(agent, info_loss_rate, &mut rng);
        self.rng = rng;
        obs
    }

    pub fn global_dim(&self) -> usize {
        global_dim(self.machines.len(), self.tenants.len())
    }

    /// Unmasked global state for the centralized critic.
    pub fn observe_global(&self) -> Vec<f64> {
        let mut g = Vec::with_capacity(self.global_dim());
        g.extend(self.machines.iter().map(MachineState::cpu_utilization));
        g.push(self.queue_fraction());
        let mut per_tenant = vec![0.0; self.tenants.len()];
        let mut total = 0.0;
        for m in &self.machines {
            for tid in &m.resident_tasks {
                let t = &self.tasks[self.task_index[tid]];
                if let Ok(k) = self.tenants.binary_search(&t.tenant_id) {
                    per_tenant[k] += t.demand.cpu;
                }
                total += t.demand.cpu;
            }
        }
        if total > 0.0 {
            per_tenant.iter_mut().for_each(|v| *v /= total);
        }
        g.extend(per_tenant);
        g.push(self.clock_fraction());
        g
    }

    /// Checks capacity safety and task conservation.
    pub fn check_invariants(&self) -> Result<(), String> {
        for m in &self.machines {
            let a = m.allocated.as_array();
            let c = m.capacity.as_array();
            if a.iter().zip(&c).any(|(a, c)| *a < -FIT_EPS || *a > c + FIT_EPS) {
                return Err(format!("machine {} over capacity: {:?} > {:?}", m.machine_id, m.allocated, m.capacity));
            }
            if !m.present && !m.resident_tasks.is_empty() {
                return Err(format!("absent machine {} has residents", m.machine_id));
            }
        }
        let submitted = self
            .trace
            .submits()
            .filter(|e| e.timestamp <= self.clock)
            .count();
        let count = |s: TaskStatus| self.tasks.iter().filter(|t| t.status == s).count();
        let (p, r, f) = (count(TaskStatus::Pending), count(TaskStatus::Running), count(TaskStatus::Finished));
        if p + r + f != submitted || p != self.pending.len() {
            return Err(format!("conservation broken: {p}+{r}+{f} vs {submitted} submitted, queue {}", self.pending.len()));
        }
        let resident: usize = self.machines.iter().map(|m| m.resident_tasks.len()).sum();
        if resident != r {
            return Err(format!("{resident} resident tasks but {r} running"));
        }
        for t in &self.tasks {
            if t.remaining_work < 0.0 {
                return Err(format!("task {} negative remaining work", t.task_id));
            }
            if let (Some(p), Some(f)) = (t.place_time, t.finish_time) {
                if !(t.submit_time <= p && p <= f) {
                    return Err(format!("task {} times out of order", t.task_id));
                }
            }
        }
        Ok(())
    }
}

pub fn global_dim(n_machines: usize, n_tenants: usize) -> usize {
    n_machines + n_tenants + 2
}

//! Role assignment, per-role action spaces, legality masks and masked
//! policy sampling.
//!
//! Every agent has exactly one functional role. Agents sharing a role sample
//! from the same policy network, so two agents of one role with identical
//! observations and masks draw from identical distributions.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{self, NetParams, PolicyError};
use crate::sim::{self, ClusterState};
use crate::trace::MachineId;

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("no legal action in mask")]
    EmptyMask,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Compute,
    Storage,
    Scheduler,
}

impl RoleTag {
    pub const ALL: [RoleTag; 3] = [RoleTag::Compute, RoleTag::Storage, RoleTag::Scheduler];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RoleTag::Compute => "compute",
            RoleTag::Storage => "storage",
            RoleTag::Scheduler => "scheduler",
        }
    }
}

impl fmt::Display for RoleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Compute action indices.
pub const ADMIT: usize = 0;
pub const DEFER: usize = 1;
/// Storage io-throttle levels, by action index.
pub const THROTTLE_LEVELS: [f64; 3] = [0.5, 0.75, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Role {
    pub tag: RoleTag,
    pub action_space_size: usize,
    /// Number of features; the network input also carries one staleness
    /// flag per feature.
    pub observation_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoleCounts {
    pub compute: usize,
    pub storage: usize,
    pub scheduler: usize,
}

impl RoleCounts {
    pub fn total(&self) -> usize {
        self.compute + self.storage + self.scheduler
    }

    /// Splits a total agent population half compute, a quarter each storage
    /// and scheduler, with any remainder going to compute.
    pub fn split(total: usize) -> Self {
        let q = (total / 4).max(1);
        RoleCounts {
            compute: total.saturating_sub(2 * q).max(1),
            storage: q,
            scheduler: q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub role: RoleTag,
    pub index: usize,
}

/// Local view of one agent: features plus a staleness flag per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub role: RoleTag,
    pub features: Vec<f64>,
    pub staleness: Vec<bool>,
}

impl Observation {
    /// Network input: features followed by the staleness flags as 0/1.
    pub fn input(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.features.len());
        v.extend_from_slice(&self.features);
        v.extend(self.staleness.iter().map(|&s| if s { 1.0 } else { 0.0 }));
        v
    }
}

/// The role mapping: which role every agent plays, which compute agent owns
/// each machine and which machines each storage agent governs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleMap {
    roles: Vec<Role>,
    assignments: Vec<RoleTag>,
    machines: Vec<MachineId>,
    machine_ownership: BTreeMap<MachineId, AgentId>,
    storage_groups: BTreeMap<AgentId, Vec<MachineId>>,
    compute_groups: BTreeMap<AgentId, Vec<MachineId>>,
}

/// Builds a deterministic role map. Agent ids are dense: compute agents
/// first, then storage, then schedulers. Machines are dealt round-robin to
/// compute agents and to storage groups.
pub fn assign_roles(counts: RoleCounts, machines: &[MachineId]) -> Result<RoleMap, AgentError> {
    for (n, tag) in [
        (counts.compute, RoleTag::Compute),
        (counts.storage, RoleTag::Storage),
        (counts.scheduler, RoleTag::Scheduler),
    ] {
        if n == 0 {
            return Err(AgentError::Config(format!("no {tag} agents configured")));
        }
    }
    if machines.is_empty() {
        return Err(AgentError::Config("cluster has no machines".into()));
    }
    let mut dedup = machines.to_vec();
    dedup.sort();
    dedup.dedup();
    if dedup.len() != machines.len() {
        return Err(AgentError::Config("duplicate machine ids".into()));
    }

    let m = machines.len();
    let roles = vec![
        Role {
            tag: RoleTag::Compute,
            action_space_size: 2,
            observation_size: sim::COMPUTE_FEATURES,
        },
        Role {
            tag: RoleTag::Storage,
            action_space_size: THROTTLE_LEVELS.len(),
            observation_size: sim::STORAGE_FEATURES,
        },
        Role {
            tag: RoleTag::Scheduler,
            action_space_size: m + 1,
            observation_size: sim::scheduler_features(m),
        },
    ];

    let mut assignments = Vec::with_capacity(counts.total());
    assignments.extend(std::iter::repeat_n(RoleTag::Compute, counts.compute));
    assignments.extend(std::iter::repeat_n(RoleTag::Storage, counts.storage));
    assignments.extend(std::iter::repeat_n(RoleTag::Scheduler, counts.scheduler));

    let mut machine_ownership = BTreeMap::new();
    let mut compute_groups: BTreeMap<AgentId, Vec<MachineId>> =
        (0..counts.compute).map(|a| (AgentId(a), Vec::new())).collect();
    let mut storage_groups: BTreeMap<AgentId, Vec<MachineId>> = (0..counts.storage)
        .map(|s| (AgentId(counts.compute + s), Vec::new()))
        .collect();
    for (i, &mid) in machines.iter().enumerate() {
        let owner = AgentId(i % counts.compute);
        machine_ownership.insert(mid, owner);
        compute_groups.get_mut(&owner).unwrap().push(mid);
        let group = AgentId(counts.compute + i % counts.storage);
        storage_groups.get_mut(&group).unwrap().push(mid);
    }

    Ok(RoleMap {
        roles,
        assignments,
        machines: machines.to_vec(),
        machine_ownership,
        storage_groups,
        compute_groups,
    })
}

impl RoleMap {
    pub fn n_agents(&self) -> usize {
        self.assignments.len()
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        (0..self.assignments.len()).map(AgentId)
    }

    pub fn role_of(&self, agent: AgentId) -> Result<Role, AgentError> {
        self.assignments
            .get(agent.0)
            .map(|t| self.roles[t.index()])
            .ok_or(AgentError::UnknownAgent(agent))
    }

    pub fn role(&self, tag: RoleTag) -> Role {
        self.roles[tag.index()]
    }

    pub fn agents_with_role(&self, tag: RoleTag) -> impl Iterator<Item = AgentId> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, t)| **t == tag)
            .map(|(i, _)| AgentId(i))
    }

    pub fn count(&self, tag: RoleTag) -> usize {
        self.assignments.iter().filter(|t| **t == tag).count()
    }

    /// Machine slot order used by scheduler actions and global features.
    pub fn machines(&self) -> &[MachineId] {
        &self.machines
    }

    pub fn owner_of(&self, machine: MachineId) -> Option<AgentId> {
        self.machine_ownership.get(&machine).copied()
    }

    /// Storage agent governing `machine`.
    pub fn storage_of(&self, machine: MachineId) -> Option<AgentId> {
        self.storage_groups
            .iter()
            .find(|(_, ms)| ms.contains(&machine))
            .map(|(a, _)| *a)
    }

    pub fn compute_group(&self, agent: AgentId) -> &[MachineId] {
        self.compute_groups.get(&agent).map_or(&[], Vec::as_slice)
    }

    pub fn storage_group(&self, agent: AgentId) -> &[MachineId] {
        self.storage_groups.get(&agent).map_or(&[], Vec::as_slice)
    }

    /// Position of a scheduler among schedulers (ascending id); scheduler
    /// `k` handles the `k`-th pending task.
    pub fn scheduler_rank(&self, agent: AgentId) -> Option<usize> {
        self.agents_with_role(RoleTag::Scheduler).position(|a| a == agent)
    }
}

/// Feasibility mask over the agent's action space. A scheduler may place its
/// queue-slot task on machine `m` iff the task fits the machine's residual
/// capacity; deferring is always legal. Compute and storage agents have
/// all-legal masks.
pub fn legal_mask(state: &ClusterState, agent: AgentId, role_map: &RoleMap) -> Result<Vec<bool>, AgentError> {
    let role = role_map.role_of(agent)?;
    match role.tag {
        RoleTag::Compute | RoleTag::Storage => Ok(vec![true; role.action_space_size]),
        RoleTag::Scheduler => {
            let rank = role_map.scheduler_rank(agent).expect("scheduler has a rank");
            let mut mask = vec![false; role.action_space_size];
            *mask.last_mut().unwrap() = true;
            if let Some(task) = state.queued_task(rank) {
                for (slot, m) in state.machines().iter().enumerate() {
                    mask[slot] = m.present && sim::fits(&m.residual(), &task.demand);
                }
            }
            Ok(mask)
        }
    }
}

/// Mask an agent derives from its own (possibly stale) observation. With a
/// fully observed view it equals [`legal_mask`].
pub fn mask_from_observation(role: &Role, obs: &Observation) -> Vec<bool> {
    match role.tag {
        RoleTag::Compute | RoleTag::Storage => vec![true; role.action_space_size],
        RoleTag::Scheduler => {
            let m = role.action_space_size - 1;
            let f = &obs.features;
            let task = sim::SchedulerTaskView::from_features(f, m);
            let mut mask = vec![false; m + 1];
            mask[m] = true;
            if task.present {
                for (slot, legal) in mask.iter_mut().take(m).enumerate() {
                    let (present, residual) = sim::SchedulerTaskView::machine(f, slot);
                    *legal = present && sim::fits(&residual, &task.demand);
                }
            }
            mask
        }
    }
}

/// Softmax restricted to legal entries; illegal entries get probability 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, AgentError> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &ok)| ok)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(AgentError::EmptyMask);
    }
    let mut p: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(l, &ok)| if ok { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// Draws an action index from a probability vector by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Samples from the masked, renormalised policy distribution. Returns the
/// action and its log-probability.
pub fn sample_action<R: Rng + ?Sized>(
    policy: &NetParams,
    role: RoleTag,
    obs_input: &[f64],
    mask: &[bool],
    rng: &mut R,
) -> Result<(Action, f64), AgentError> {
    let logits = policy::forward_actor(policy, obs_input)?;
    let probs = masked_softmax(&logits, mask)?;
    let index = sample_index(&probs, rng);
    Ok((Action { role, index }, probs[index].ln()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::init_params;
    use crate::trace::{self, MachineEvent, MachineEventKind, Resources, TaskEvent, TaskEventKind, Trace};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mids(n: u64) -> Vec<MachineId> {
        (0..n).map(MachineId).collect()
    }

    #[test]
    fn assignment_construction() {
        let counts = RoleCounts {
            compute: 2,
            storage: 1,
            scheduler: 1,
        };
        let rm = assign_roles(counts, &mids(4)).unwrap();
        assert_eq!(rm.n_agents(), 4);
        assert_eq!(rm.compute_group(AgentId(0)).len(), 2);
        assert_eq!(rm.compute_group(AgentId(1)).len(), 2);
        assert_eq!(rm.storage_group(AgentId(2)).len(), 4);
        assert_eq!(rm.role_of(AgentId(3)).unwrap().tag, RoleTag::Scheduler);
        assert_eq!(rm.role_of(AgentId(3)).unwrap().action_space_size, 5);
        for m in mids(4) {
            assert!(rm.owner_of(m).is_some());
            assert_eq!(rm.storage_of(m), Some(AgentId(2)));
        }
        assert_eq!(rm, assign_roles(counts, &mids(4)).unwrap());
    }

    #[test]
    fn uneven_ownership_is_round_robin() {
        let rm = assign_roles(
            RoleCounts {
                compute: 2,
                storage: 2,
                scheduler: 1,
            },
            &mids(5),
        )
        .unwrap();
        assert_eq!(rm.compute_group(AgentId(0)), &mids(5)[..].iter().step_by(2).copied().collect::<Vec<_>>()[..]);
        assert_eq!(rm.compute_group(AgentId(1)).len(), 2);
        assert_eq!(rm.storage_group(AgentId(2)).len(), 3);
    }

    #[test]
    fn zero_role_count_is_config_error() {
        let err = assign_roles(
            RoleCounts {
                compute: 1,
                storage: 1,
                scheduler: 0,
            },
            &mids(2),
        )
        .unwrap_err();
        assert!(matches!(err, AgentError::Config(_)));
    }

    #[test]
    fn split_counts() {
        assert_eq!(
            RoleCounts::split(4),
            RoleCounts {
                compute: 2,
                storage: 1,
                scheduler: 1
            }
        );
        assert_eq!(RoleCounts::split(24).total(), 24);
        assert_eq!(RoleCounts::split(24).scheduler, 6);
    }

    fn state_with(caps: &[f64], queue_cpu: Option<f64>) -> (ClusterState, RoleMap) {
        let machine_events = caps
            .iter()
            .enumerate()
            .map(|(i, &c)| MachineEvent {
                timestamp: 0,
                machine_id: MachineId(i as u64),
                kind: MachineEventKind::Add,
                capacity: Resources::new(c, 1.0, 1.0),
            })
            .collect();
        let task_events = queue_cpu
            .map(|cpu| {
                vec![TaskEvent {
                    timestamp: 0,
                    job_id: trace::JobId(0),
                    task_id: trace::TaskId(0),
                    tenant_id: trace::TenantId(0),
                    kind: TaskEventKind::Submit,
                    demand: Resources::new(cpu, 0.1, 0.1),
                    duration: Some(5.0),
                }]
            })
            .unwrap_or_default();
        let mut t = Trace {
            machine_events,
            task_events,
            horizon: 0,
        };
        t.horizon = 10;
        let rm = assign_roles(
            RoleCounts {
                compute: 2,
                storage: 1,
                scheduler: 1,
            },
            &t.machine_ids(),
        )
        .unwrap();
        let mut s = sim::init_state(&t, &rm, 0).unwrap();
        if queue_cpu.is_some() {
            let noop = crate::sim::noop_joint_action(&rm);
            s.step(&noop).unwrap();
        }
        (s, rm)
    }

    #[test]
    fn empty_queue_only_defer() {
        let (s, rm) = state_with(&[1.0; 4], None);
        assert_eq!(
            legal_mask(&s, AgentId(3), &rm).unwrap(),
            vec![false, false, false, false, true]
        );
    }

    #[test]
    fn mask_follows_capacity() {
        // task of cpu 0.5 fits machines 0 and 2 only
        let (s, rm) = state_with(&[1.0, 0.2, 0.6, 0.4], Some(0.5));
        assert_eq!(
            legal_mask(&s, AgentId(3), &rm).unwrap(),
            vec![true, false, true, false, true]
        );
        assert_eq!(legal_mask(&s, AgentId(2), &rm).unwrap(), vec![true; 3]);
        assert_eq!(legal_mask(&s, AgentId(0), &rm).unwrap(), vec![true; 2]);
    }

    #[test]
    fn observation_mask_matches_state_mask_when_fully_observed() {
        let (mut s, rm) = state_with(&[1.0, 0.2, 0.6, 0.4], Some(0.5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let role = rm.role_of(AgentId(3)).unwrap();
        let obs = s.observe_local(AgentId(3), 0.0, &mut rng).unwrap();
        assert_eq!(
            mask_from_observation(&role, &obs),
            legal_mask(&s, AgentId(3), &rm).unwrap()
        );
    }

    #[test]
    fn single_legal_action_is_certain() {
        let net = init_params(&[3, 4, 4, 5], 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mask = [false, false, true, false, false];
        for _ in 0..20 {
            let (a, lp) = sample_action(&net, RoleTag::Scheduler, &[0.3, -0.2, 0.9], &mask, &mut rng).unwrap();
            assert_eq!(a.index, 2);
            assert_eq!(lp, 0.0);
        }
    }

    #[test]
    fn zero_network_is_uniform() {
        let mut net = init_params(&[3, 4, 4, 4], 1).unwrap();
        net.scale(0.0);
        let logits = policy::forward_actor(&net, &[1.0, 2.0, 3.0]).unwrap();
        let p = masked_softmax(&logits, &[true; 4]).unwrap();
        assert!(p.iter().all(|x| (x - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sampling_is_reproducible() {
        let net = init_params(&[2, 4, 4, 3], 7).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| sample_action(&net, RoleTag::Storage, &[0.1, 0.2], &[true; 3], &mut rng).unwrap().0.index)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn empty_mask_is_contract_violation() {
        let net = init_params(&[2, 4, 4, 3], 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_action(&net, RoleTag::Storage, &[0.0, 0.0], &[false; 3], &mut rng).unwrap_err(),
            AgentError::EmptyMask
        );
    }

    #[test]
    fn masked_sampling_never_illegal() {
        let net = init_params(&[4, 8, 8, 6], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..10_000 {
            let mask: Vec<bool> = (0..6).map(|k| (i >> k) & 1 == 1 || k == 5).collect();
            let x = [rng.random::<f64>(), rng.random(), rng.random(), rng.random()];
            let (a, _) = sample_action(&net, RoleTag::Scheduler, &x, &mask, &mut rng).unwrap();
            assert!(mask[a.index]);
        }
    }

    #[test]
    fn role_sharing_gives_identical_distributions() {
        let (mut s, _rm) = state_with(&[1.0; 4], Some(0.3));
        let net = init_params(&[sim::COMPUTE_FEATURES * 2, 8, 8, 2], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // both compute agents see the same queue head and empty machines
        let o0 = s.observe_local(AgentId(0), 0.0, &mut rng).unwrap();
        let o1 = s.observe_local(AgentId(1), 0.0, &mut rng).unwrap();
        assert_eq!(o0, o1);
        let p0 = masked_softmax(&policy::forward_actor(&net, &o0.input()).unwrap(), &[true; 2]).unwrap();
        let p1 = masked_softmax(&policy::forward_actor(&net, &o1.input()).unwrap(), &[true; 2]).unwrap();
        assert_eq!(p0, p1);
    }

    proptest::proptest! {
        #[test]
        fn masked_probabilities_normalised(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..12),
            bits in proptest::prelude::any::<u32>(),
        ) {
            let n = logits.len();
            let mut mask: Vec<bool> = (0..n).map(|k| (bits >> k) & 1 == 1).collect();
            mask[n - 1] = true;
            let p = masked_softmax(&logits, &mask).unwrap();
            proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (pi, ok) in p.iter().zip(&mask) {
                if !ok { proptest::prop_assert_eq!(*pi, 0.0); }
            }
        }
    }
}

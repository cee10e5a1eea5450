//! Episode measurements and the aggregate metrics reported per run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::TenantId;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{0}: not enough samples")]
    NotEnoughSamples(&'static str),
    #[error("no tenant received any cpu time")]
    NoAllocation,
}

/// Raw measurements collected while an episode runs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// Cluster-wide allocated cpu / capacity, one sample per simulated second.
    pub utilization: Vec<f64>,
    /// Placement time minus submit time, seconds.
    pub latencies_s: Vec<f64>,
    /// Demand-weighted running seconds per tenant.
    pub tenant_cpu_time: BTreeMap<TenantId, f64>,
    pub finished_tasks: usize,
    pub simulated_seconds: u64,
    /// Wall-clock durations of full per-epoch parameter updates.
    pub update_durations_s: Vec<f64>,
}

impl EpisodeRecord {
    /// Concatenates another record's samples onto this one.
    pub fn merge(&mut self, other: &EpisodeRecord) {
        self.utilization.extend_from_slice(&other.utilization);
        self.latencies_s.extend_from_slice(&other.latencies_s);
        for (t, v) in &other.tenant_cpu_time {
            *self.tenant_cpu_time.entry(*t).or_default() += v;
        }
        self.finished_tasks += other.finished_tasks;
        self.simulated_seconds += other.simulated_seconds;
        self.update_durations_s
            .extend_from_slice(&other.update_durations_s);
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_variance(xs: &[f64]) -> f64 {
    if xs.iter().all(|x| *x == xs[0]) {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Time-averaged cluster cpu utilization, percent.
pub fn utilization(record: &EpisodeRecord) -> Result<f64, MetricsError> {
    if record.utilization.is_empty() {
        return Err(MetricsError::NotEnoughSamples("utilization"));
    }
    Ok(100.0 * mean(&record.utilization))
}

/// Mean scheduling latency in milliseconds, `None` when nothing was placed.
pub fn avg_latency_ms(record: &EpisodeRecord) -> Option<f64> {
    (!record.latencies_s.is_empty()).then(|| 1000.0 * mean(&record.latencies_s))
}

/// First epoch whose trailing `window` values span at most `tol` times the
/// final value.
pub fn convergence_epoch(curve: &[f64], window: usize, tol: f64) -> Result<Option<usize>, MetricsError> {
    if window == 0 || curve.len() < window {
        return Err(MetricsError::NotEnoughSamples("convergence curve"));
    }
    let bound = tol * curve[curve.len() - 1].abs();
    Ok(curve.windows(window).position(|w| {
        let (lo, hi) = w
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo <= bound
    })
    .map(|start| start + window - 1))
}

/// Population standard deviation of per-step utilization (fraction units).
pub fn usage_stddev(record: &EpisodeRecord) -> Result<f64, MetricsError> {
    if record.utilization.len() < 2 {
        return Err(MetricsError::NotEnoughSamples("usage stddev"));
    }
    Ok(population_variance(&record.utilization).sqrt())
}

/// (variance of tenant cpu-time shares, minimum share in percent).
pub fn fairness(record: &EpisodeRecord) -> Result<(f64, f64), MetricsError> {
    let total: f64 = record.tenant_cpu_time.values().sum();
    if record.tenant_cpu_time.is_empty() || total <= 0.0 {
        return Err(MetricsError::NoAllocation);
    }
    let shares: Vec<f64> = record.tenant_cpu_time.values().map(|v| v / total).collect();
    let min = shares.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((population_variance(&shares), 100.0 * min))
}

/// (finished tasks per simulated second, mean policy-update wall time).
pub fn scalability(record: &EpisodeRecord) -> (f64, Option<f64>) {
    let throughput = if record.simulated_seconds == 0 {
        0.0
    } else {
        record.finished_tasks as f64 / record.simulated_seconds as f64
    };
    let update = (!record.update_durations_s.is_empty()).then(|| mean(&record.update_durations_s));
    (throughput, update)
}

pub const REPORT_HEADER: &str = "resource_utilization_pct,avg_scheduling_latency_ms,convergence_epoch,usage_stddev,allocation_variance,min_tenant_share_pct,throughput_tasks_per_s,policy_update_time_s";

/// Aggregate metrics for one run. Absent values are written as empty CSV
/// fields. `policy_update_time_s` is wall-clock and not portable across
/// machines.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub resource_utilization_pct: f64,
    pub avg_scheduling_latency_ms: Option<f64>,
    pub convergence_epoch: Option<usize>,
    pub usage_stddev: f64,
    pub allocation_variance: f64,
    pub min_tenant_share_pct: f64,
    pub throughput_tasks_per_s: f64,
    pub policy_update_time_s: Option<f64>,
}

impl MetricsReport {
    /// Builds a report from a (possibly merged) record. Fairness falls back to
    /// zeros when no tenant ran.
    pub fn from_record(record: &EpisodeRecord, convergence_epoch: Option<usize>) -> Result<Self, MetricsError> {
        let (allocation_variance, min_tenant_share_pct) = fairness(record).unwrap_or((0.0, 0.0));
        let (throughput_tasks_per_s, policy_update_time_s) = scalability(record);
        Ok(Self {
            resource_utilization_pct: utilization(record)?,
            avg_scheduling_latency_ms: avg_latency_ms(record),
            convergence_epoch,
            usage_stddev: usage_stddev(record).unwrap_or(0.0),
            allocation_variance,
            min_tenant_share_pct,
            throughput_tasks_per_s,
            policy_update_time_s,
        })
    }

    /// Field-wise mean over replicates; optional fields average their
    /// present values.
    pub fn mean_of(reports: &[MetricsReport]) -> MetricsReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| mean(&v))
        };
        MetricsReport {
            resource_utilization_pct: avg(&|r| r.resource_utilization_pct),
            avg_scheduling_latency_ms: avg_opt(&|r| r.avg_scheduling_latency_ms),
            convergence_epoch: avg_opt(&|r| r.convergence_epoch.map(|e| e as f64))
                .map(|e| e.round() as usize),
            usage_stddev: avg(&|r| r.usage_stddev),
            allocation_variance: avg(&|r| r.allocation_variance),
            min_tenant_share_pct: avg(&|r| r.min_tenant_share_pct),
            throughput_tasks_per_s: avg(&|r| r.throughput_tasks_per_s),
            policy_update_time_s: avg_opt(&|r| r.policy_update_time_s),
        }
    }

    pub fn csv_row(&self) -> String {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{}",
            self.resource_utilization_pct,
            opt(self.avg_scheduling_latency_ms),
            opt(self.convergence_epoch),
            self.usage_stddev,
            self.allocation_variance,
            self.min_tenant_share_pct,
            self.throughput_tasks_per_s,
            opt(self.policy_update_time_s)
        )
    }

    pub fn parse_csv_row(row: &str) -> Result<Self, String> {
        let f: Vec<&str> = row.trim_end().split(',').collect();
        if f.len() != 8 {
            return Err(format!("expected 8 fields, found {}", f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            resource_utilization_pct: num(f[0])?,
            avg_scheduling_latency_ms: opt(f[1])?,
            convergence_epoch: if f[2].is_empty() {
                None
            } else {
                Some(f[2].parse().map_err(|e| format!("{:?}: {e}", f[2]))?)
            },
            usage_stddev: num(f[3])?,
            allocation_variance: num(f[4])?,
            min_tenant_share_pct: num(f[5])?,
            throughput_tasks_per_s: num(f[6])?,
            policy_update_time_s: opt(f[7])?,
        })
    }
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use orchestra_core::experiment::{self, ablation_csv, eval_seeds, Axis, SweepSpec};
use orchestra_core::marl::{
    self, parse_curve_csv, Checkpoint, Controller, CurveRow, ResumeState, Trainer, Variant,
};
use orchestra_core::metrics::{convergence_epoch, EpisodeRecord, MetricsReport, REPORT_HEADER};
use orchestra_core::sim;
use orchestra_core::trace::{generate_synthetic, Trace, WorkloadSpec};

use crate::chart;
use crate::config::{Resolved, MACHINE_FILE, TASK_FILE};

pub const CURVE_FILE: &str = "curve.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const RESUME_FILE: &str = "resume.json";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_SEEDS_FILE: &str = "ablation_seeds.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Reference row from a production-scale trace, carried as a comment only.
const ABLATION_REFERENCE: &str =
    "# reference (production-scale trace, not asserted): BASELINE,76.2,294.7,910";

/// Writes via a sibling temp file so readers never see a partial artifact.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn merged(records: &[EpisodeRecord]) -> EpisodeRecord {
    let mut m = EpisodeRecord::default();
    records.iter().for_each(|r| m.merge(r));
    m
}

/// Parses a `header` + `prefix,REPORT_HEADER` table back, so every emitted
/// report is checked against its own header.
fn validate_report_csv(text: &str, prefix_cols: usize) -> Result<()> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().context("empty report")?;
    ensure!(header.ends_with(REPORT_HEADER), "report header mismatch");
    for l in lines {
        let rest = l.splitn(prefix_cols + 1, ',').nth(prefix_cols).context("short report row")?;
        MetricsReport::parse_csv_row(rest).map_err(anyhow::Error::msg)?;
    }
    Ok(())
}

pub fn gen_trace(spec_path: &Path, out: &Path, seed: u64) -> Result<()> {
    let spec: WorkloadSpec = serde_json::from_str(&read(spec_path)?)
        .with_context(|| format!("parsing workload {}", spec_path.display()))?;
    let trace = generate_synthetic(&spec, seed)?;
    create_dir(out)?;
    write_atomic(&out.join(MACHINE_FILE), &trace.machine_csv())?;
    write_atomic(&out.join(TASK_FILE), &trace.task_csv())?;
    let back = crate::config::read_trace_dir(out)?;
    ensure!(back.task_events.len() == trace.task_events.len(), "trace files failed to round-trip");
    eprintln!(
        "wrote {} machine and {} task events to {}",
        trace.machine_events.len(),
        trace.task_events.len(),
        out.display()
    );
    Ok(())
}

/// The parts of a run that must match for a checkpoint to be resumable.
fn run_identity(r: &Resolved) -> Result<String> {
    let mut c = r.config.clone();
    c.out_dir = PathBuf::from(".");
    c.train.workers = 1;
    c.checkpoint_every = 1;
    Ok(serde_json::to_string_pretty(&c)?)
}

fn save_progress(out: &Path, t: &Trainer) -> Result<()> {
    write_atomic(&out.join(RESUME_FILE), &serde_json::to_string(&t.resume_state())?)?;
    write_atomic(&out.join(CHECKPOINT_FILE), &t.checkpoint().to_json()?)?;
    let csv = marl::curve_csv(t.curve());
    ensure!(parse_curve_csv(&csv).map_err(anyhow::Error::msg)?.len() == t.epoch());
    write_atomic(&out.join(CURVE_FILE), &csv)
}

fn load_trainer(r: &Resolved, trace: Arc<Trace>, rm: Arc<orchestra_core::agents::RoleMap>) -> Result<Trainer> {
    let out = r.out_dir();
    let ckpt_path = out.join(CHECKPOINT_FILE);
    if !ckpt_path.exists() {
        return Ok(Trainer::new(r.train.clone(), trace, rm)?);
    }
    let stored = read(&out.join(RUN_FILE))?;
    if stored != run_identity(r)? {
        bail!(
            "{} holds a checkpoint from a different configuration; use a fresh output directory",
            out.display()
        );
    }
    let ckpt = Checkpoint::from_json(&read(&ckpt_path)?)?;
    let state: ResumeState = serde_json::from_str(&read(&out.join(RESUME_FILE))?)?;
    eprintln!("resuming from epoch {}", ckpt.epoch);
    Ok(Trainer::resume(r.train.clone(), trace, rm, &ckpt, state)?)
}

pub fn train(r: &Resolved, stop_after: Option<usize>) -> Result<()> {
    let out = r.out_dir();
    create_dir(out)?;
    let (trace, rm) = r.trace_and_roles()?;
    let (trace, rm) = (Arc::new(trace), Arc::new(rm));
    let mut t = load_trainer(r, Arc::clone(&trace), Arc::clone(&rm))?;
    write_atomic(&out.join(RUN_FILE), &run_identity(r)?)?;

    let budget = stop_after.unwrap_or(usize::MAX);
    let mut ran = 0;
    while !t.is_finished() && ran < budget {
        let row = t.run_epoch()?.clone();
        ran += 1;
        if t.epoch() % r.config.checkpoint_every == 0 {
            save_progress(out, &t)?;
            eprintln!(
                "epoch {}/{} utilization {:.3}",
                t.epoch(),
                r.train.total_epochs,
                row.mean_utilization
            );
        }
    }
    save_progress(out, &t)?;
    if !t.is_finished() {
        eprintln!("stopped at epoch {}; rerun to resume", t.epoch());
        return Ok(());
    }

    let report = learned_report(r, &trace, &rm, t.policies(), t.curve(), t.update_durations_s())?;
    let csv = format!("{REPORT_HEADER}\n{}\n", report.csv_row());
    validate_report_csv(&csv, 0)?;
    write_atomic(&out.join(REPORT_FILE), &csv)?;
    eprintln!(
        "trained {} epochs: utilization {:.1}%, latency {} ms",
        t.epoch(),
        report.resource_utilization_pct,
        report
            .avg_scheduling_latency_ms
            .map_or("n/a".into(), |v| format!("{v:.1}"))
    );
    Ok(())
}

fn learned_report(
    r: &Resolved,
    trace: &Trace,
    rm: &orchestra_core::agents::RoleMap,
    policies: &marl::Policies,
    curve: &[CurveRow],
    update_durations_s: &[f64],
) -> Result<MetricsReport> {
    let seeds = eval_seeds(r.train.seed, r.config.eval_episodes);
    let records = marl::evaluate(&Controller::Learned(policies), trace, rm, r.train.info_loss_rate, &seeds)?;
    let mut m = merged(&records);
    m.update_durations_s = update_durations_s.to_vec();
    let utils: Vec<f64> = curve.iter().map(|c| c.mean_utilization).collect();
    let conv = convergence_epoch(&utils, r.config.convergence_window, r.config.convergence_tol)
        .ok()
        .flatten();
    Ok(MetricsReport::from_record(&m, conv)?)
}

/// Evaluates the trained policy in the run directory next to the random and
/// greedy baselines.
pub fn eval(r: &Resolved) -> Result<()> {
    let out = r.out_dir();
    let ckpt_path = out.join(CHECKPOINT_FILE);
    if !ckpt_path.exists() {
        bail!("no checkpoint in {}; run `train` first", out.display());
    }
    if read(&out.join(RUN_FILE))? != run_identity(r)? {
        bail!("{} was trained with a different configuration", out.display());
    }
    let (trace, rm) = r.trace_and_roles()?;
    let ckpt = Checkpoint::from_json(&read(&ckpt_path)?)?;
    let gdim = sim::global_dim(rm.machines().len(), trace.tenant_ids().len());
    let (policies, _, _) = ckpt.restore(&r.train, &rm, gdim)?;
    let curve = parse_curve_csv(&read(&out.join(CURVE_FILE))?).map_err(anyhow::Error::msg)?;
    let state: ResumeState = serde_json::from_str(&read(&out.join(RESUME_FILE))?)?;

    let seeds = eval_seeds(r.train.seed, r.config.eval_episodes);
    let loss = r.train.info_loss_rate;
    let mut csv = format!("controller,{REPORT_HEADER}\n");
    let learned = learned_report(r, &trace, &rm, &policies, &curve, &state.update_durations_s)?;
    csv.push_str(&format!("learned,{}\n", learned.csv_row()));
    for (name, c) in [("random", Controller::Random), ("greedy", Controller::Greedy)] {
        let rep = experiment::evaluate_report(&c, &trace, &rm, loss, &seeds)?;
        csv.push_str(&format!("{name},{}\n", rep.csv_row()));
    }
    validate_report_csv(&csv, 1)?;
    write_atomic(&out.join(EVAL_FILE), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn ablate(r: &Resolved, seeds: &[u64]) -> Result<()> {
    let out = r.out_dir();
    create_dir(out)?;
    let rows = match r.config.workload() {
        Some(_) => experiment::ablation(&r.setup()?, seeds)?,
        None => {
            let (trace, rm) = r.trace_and_roles()?;
            // the workload is not consulted when the trace is given
            experiment::ablation_on(&r.setup_with(WorkloadSpec::toy()), &trace, &rm, seeds)?
        }
    };
    let mut csv = ablation_csv(&rows);
    csv.push_str(ABLATION_REFERENCE);
    csv.push('\n');
    let util = |v: Variant| {
        rows.iter()
            .find(|row| row.variant == v)
            .map(|row| row.mean.resource_utilization_pct)
    };
    for v in [Variant::HracOnly, Variant::LgrsOnly] {
        if util(v) > util(Variant::Full) {
            csv.push_str(&format!("# flag: {} above FULL on utilization\n", v.label()));
        }
    }
    let mut per_seed = format!("variant,seed,{REPORT_HEADER}\n");
    for row in &rows {
        for (s, rep) in seeds.iter().zip(&row.per_seed) {
            per_seed.push_str(&format!("{},{s},{}\n", row.variant.label(), rep.csv_row()));
        }
    }
    validate_report_csv(&per_seed, 2)?;
    write_atomic(&out.join(ABLATION_FILE), &csv)?;
    write_atomic(&out.join(ABLATION_SEEDS_FILE), &per_seed)?;
    print!("{csv}");
    Ok(())
}

pub fn sweep(r: &Resolved, axis: Axis, values: Vec<f64>, seeds: Vec<u64>) -> Result<()> {
    let out = r.out_dir();
    create_dir(out)?;
    let spec = SweepSpec { axis, values, seeds };
    let res = experiment::sweep(&r.setup()?, &spec)?;
    let csv = res.csv();
    validate_report_csv(&csv, 1)?;
    let mut per_seed = format!("{},seed,{REPORT_HEADER}\n", axis.name());
    for p in &res.points {
        for (s, rep) in spec.seeds.iter().zip(&p.per_seed) {
            per_seed.push_str(&format!("{},{s},{}\n", p.value, rep.csv_row()));
        }
    }
    write_atomic(&out.join(format!("sweep_{axis}.csv")), &csv)?;
    write_atomic(&out.join(format!("sweep_{axis}_seeds.csv")), &per_seed)?;
    write_atomic(&out.join(format!("sweep_{axis}_summary.txt")), &res.summary())?;
    print!("{csv}{}", res.summary());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Svg,
}

struct Table {
    name: String,
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = rdr.headers()?.iter().map(str::to_string).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    Ok(Table { name, headers, rows })
}

/// Inputs the report understands: the learning curve, evaluation and
/// ablation tables, and per-point sweep tables.
fn report_inputs(dir: &Path) -> Result<Vec<Table>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| {
            [CURVE_FILE, EVAL_FILE, ABLATION_FILE].contains(&n.as_str())
                || (n.starts_with("sweep_") && n.ends_with(".csv") && !n.ends_with("_seeds.csv"))
        })
        .collect();
    names.sort();
    names.iter().map(|n| read_table(&dir.join(n))).collect()
}

/// The x column of a plottable table: epochs for the curve, the axis value
/// for sweeps. Evaluation and ablation tables are categorical.
fn x_column(t: &Table) -> Option<usize> {
    (t.name == "curve" || t.name.starts_with("sweep_")).then_some(0)
}

pub fn report(dir: &Path, format: Format) -> Result<()> {
    let tables = report_inputs(dir)?;
    if tables.is_empty() {
        bail!("{} has no curve, evaluation, ablation or sweep CSVs", dir.display());
    }
    match format {
        Format::Csv => {
            let mut out = String::from("source,key,metric,value\n");
            for t in &tables {
                for row in &t.rows {
                    for (h, v) in t.headers.iter().zip(row).skip(1) {
                        if !v.is_empty() {
                            out.push_str(&format!("{},{},{h},{v}\n", t.name, row[0]));
                        }
                    }
                }
            }
            write_atomic(&dir.join(SUMMARY_FILE), &out)?;
            eprintln!("wrote {}", dir.join(SUMMARY_FILE).display());
        }
        Format::Svg => {
            let mut written = 0;
            for t in &tables {
                let Some(xc) = x_column(t) else { continue };
                for (col, h) in t.headers.iter().enumerate().filter(|&(c, _)| c != xc) {
                    let points: Vec<(f64, f64)> = t
                        .rows
                        .iter()
                        .filter_map(|row| Some((row[xc].parse().ok()?, row[col].parse().ok()?)))
                        .filter(|(x, y): &(f64, f64)| x.is_finite() && y.is_finite())
                        .collect();
                    if points.is_empty() {
                        continue;
                    }
                    let svg = chart::line_chart(&format!("{}: {h}", t.name), &t.headers[xc], h, &points);
                    write_atomic(&dir.join(format!("{}_{h}.svg", t.name)), &svg)?;
                    written += 1;
                }
            }
            if written == 0 {
                bail!("nothing to plot in {}", dir.display());
            }
            eprintln!("wrote {written} charts to {}", dir.display());
        }
    }
    Ok(())
}

//! Experiment execution: builds the per-seed world (dataset splits, student,
//! teacher), drives [`train_run`] for every `(configuration, seed)` pair,
//! writes one record CSV and one spectrum CSV per run, and aggregates a
//! summary table.
//!
//! Determinism: all randomness derives from the configured seeds via
//! [`component_seed`] streams, runs write to distinct files named by config
//! fingerprint and seed, and the summary is assembled in a canonical order —
//! so identical invocations produce byte-identical outputs regardless of
//! `jobs`.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::distill::{records_to_table, train_run, DistillPlan, TrainOutcome, TrainSettings};
use crate::error::{Error, Result};
use crate::models::{InitSpec, MlpNet};
use crate::tasks::{accuracy, synth_gen, MetricsReport, SynthDataset, TaskKind};
use crate::util::{component_seed, fmt_f64_exact, mean, sample_std};

use super::config::{RunConfig, TeacherKind, TeacherSpec};

/// Per-seed data splits of one run's world.
pub struct World {
    pub train: SynthDataset,
    pub val: SynthDataset,
    /// Rows reserved for teacher pretraining; `None` when `n_teacher == 0`.
    pub teacher_data: Option<SynthDataset>,
}

/// Generates the dataset pool for `(run, seed)` and splits it into
/// train / validation / teacher-pretraining parts.
pub fn build_world(run: &RunConfig, seed: u64) -> Result<World> {
    let d = &run.dataset;
    let pool = synth_gen(
        component_seed(seed, "data"),
        d.total(),
        d.latent_dim,
        d.input_dim,
        d.classes,
    )?;
    let (train, rest) = pool.split_at(d.n_train)?;
    if d.n_teacher == 0 {
        Ok(World {
            train,
            val: rest,
            teacher_data: None,
        })
    } else {
        let (val, teacher_data) = rest.split_at(d.n_val)?;
        Ok(World {
            train,
            val,
            teacher_data: Some(teacher_data),
        })
    }
}

/// How many pretraining rounds a classification teacher may take to reach
/// the accuracy floor below.
const MAX_PRETRAIN_BLOCKS: usize = 5;

/// A classification teacher keeps pretraining (in blocks of
/// `pretrain_epochs`) until it labels its own training split this well.
const TEACHER_ACCURACY_FLOOR: f64 = 0.95;

/// Builds (and for pretrained kinds, trains) a frozen teacher for one seed.
pub fn build_teacher(spec: &TeacherSpec, world: &World, seed: u64) -> Result<MlpNet> {
    let mut net = MlpNet::new(
        &spec.arch.widths,
        spec.arch.encoder_cut,
        spec.arch.activation,
        InitSpec::UniformFanIn,
        component_seed(seed, "teacher"),
    )?;
    net.set_label("teacher");
    match spec.kind {
        TeacherKind::RandomFrozen => {
            net.set_frozen(true);
            Ok(net)
        }
        TeacherKind::Pretrained(task) => {
            let data = world.teacher_data.as_ref().ok_or_else(|| {
                Error::Contract("pretrained teacher needs dataset rows (n_teacher = 0)".to_string())
            })?;
            let mut current = net;
            for _block in 0..MAX_PRETRAIN_BLOCKS {
                let settings = TrainSettings::new(
                    spec.pretrain_epochs,
                    spec.pretrain_lr,
                    component_seed(seed, "teacher-train"),
                );
                let out = train_run(current, None, task, data, data, &settings)?;
                current = out.student;
                if task != TaskKind::Classification {
                    break;
                }
                let acc = accuracy(&current.forward(data.x())?, data.labels())?;
                if acc >= TEACHER_ACCURACY_FLOOR {
                    break;
                }
            }
            current.set_frozen(true);
            Ok(current)
        }
    }
}

/// Cache key for a pretrained/frozen teacher: everything that determines its
/// final weights.
fn teacher_cache_key(run: &RunConfig, spec: &TeacherSpec, seed: u64) -> String {
    let d = &run.dataset;
    format!(
        "kind:{} widths:{:?} cut:{} act:{} pre_epochs:{} pre_lr:{} data:{}/{}/{}/{}/{}/{} seed:{}",
        spec.kind.as_str(),
        spec.arch.widths,
        spec.arch.encoder_cut,
        spec.arch.activation.as_str(),
        spec.pretrain_epochs,
        fmt_f64_exact(spec.pretrain_lr),
        d.n_train,
        d.n_val,
        d.n_teacher,
        d.latent_dim,
        d.input_dim,
        d.classes,
        seed
    )
}

/// Outcome of one `(configuration, seed)` training run, as recorded by the
/// harness.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_index: usize,
    pub label: String,
    pub fingerprint: String,
    pub seed: u64,
    pub final_val: MetricsReport,
    pub final_eff_rank: Option<usize>,
    pub spectral_skips: usize,
    pub records_path: PathBuf,
    pub spectrum_path: Option<PathBuf>,
}

/// Runs one `(configuration, seed)` pair end to end and writes its CSVs.
pub fn execute_run(
    run: &RunConfig,
    run_index: usize,
    seed: u64,
    teacher: Option<&MlpNet>,
    out_dir: &Path,
) -> Result<(TrainOutcome, RunResult)> {
    let world = build_world(run, seed)?;
    let mut student = MlpNet::new(
        &run.student.widths,
        run.student.encoder_cut,
        run.student.activation,
        InitSpec::UniformFanIn,
        component_seed(seed, "student"),
    )?;
    student.set_label("student");

    let plan = match (&run.distill, teacher) {
        (Some(spec), Some(t)) => Some(DistillPlan {
            method: spec.method,
            direction: spec.direction,
            teacher: t,
            ensemble_size: spec.ensemble_size,
        }),
        (Some(_), None) => {
            return Err(Error::Contract(
                "distillation configured but no teacher supplied".to_string(),
            ))
        }
        (None, _) => None,
    };
    let mut settings = TrainSettings::new(run.epochs, run.lr, seed);
    if let Some(spec) = &run.distill {
        settings.distill_weight = spec.weight;
    }
    settings.spectral = run.spectral;

    let outcome = train_run(student, plan.as_ref(), run.task, &world.train, &world.val, &settings)
        .map_err(|e| {
            Error::RunFailure(format!(
                "{} seed {seed}: {e}",
                run.label()
            ))
        })?;

    let fp = run.fingerprint();
    let records_path = out_dir.join(format!("{fp}_{seed}.csv"));
    records_to_table(run.task, &outcome.records)?.write(&records_path)?;
    let spectrum_path = match &outcome.spectrum {
        Some(trace) => {
            let p = out_dir.join(format!("{fp}_{seed}_spectrum.csv"));
            trace.write_csv(&p)?;
            Some(p)
        }
        None => None,
    };
    let last = outcome
        .records
        .last()
        .ok_or_else(|| Error::Contract("run produced no epochs".to_string()))?;
    let result = RunResult {
        run_index,
        label: run.label(),
        fingerprint: fp,
        seed,
        final_val: last.val,
        final_eff_rank: outcome.spectrum.as_ref().and_then(|t| t.final_eff_rank()),
        spectral_skips: outcome.spectral_skips.len(),
        records_path,
        spectrum_path,
    };
    Ok((outcome, result))
}

/// One row of the summary table: a configuration aggregated over seeds, or
/// a pairwise inverted-minus-traditional delta.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub row_type: &'static str,
    pub teacher: String,
    pub method: String,
    pub direction: String,
    pub spectral_r: String,
    pub seeds: usize,
    pub val_loss_mean: f64,
    pub val_loss_std: f64,
    pub eff_rank_mean: Option<f64>,
    pub detail_means: Vec<f64>,
    /// `Some((inverted_mean - traditional_mean, sign))` on delta rows.
    pub delta: Option<(f64, i8)>,
}

/// Seed-aggregated results per configuration plus direction deltas.
#[derive(Debug, Clone)]
pub struct SummaryTable {
    pub task: TaskKind,
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    /// Builds the table from per-run results; `runs[i]` must correspond to
    /// `run_index == i`.
    pub fn build(task: TaskKind, runs: &[RunConfig], results: &[RunResult]) -> Result<Self> {
        let mut rows = Vec::new();
        for (idx, run) in runs.iter().enumerate() {
            let mine: Vec<&RunResult> =
                results.iter().filter(|r| r.run_index == idx).collect();
            if mine.is_empty() {
                return Err(Error::Contract(format!(
                    "no results for configuration {}",
                    run.label()
                )));
            }
            let losses: Vec<f64> = mine.iter().map(|r| r.final_val.task_loss).collect();
            let ranks: Vec<f64> = mine
                .iter()
                .filter_map(|r| r.final_eff_rank.map(|e| e as f64))
                .collect();
            let detail_len = mine[0].final_val.detail_values().len();
            let detail_means: Vec<f64> = (0..detail_len)
                .map(|j| {
                    let vals: Vec<f64> =
                        mine.iter().map(|r| r.final_val.detail_values()[j]).collect();
                    mean(&vals)
                })
                .collect();
            rows.push(SummaryRow {
                row_type: "config",
                teacher: run
                    .teacher
                    .as_ref()
                    .map_or("none".to_string(), |t| t.kind.as_str().to_string()),
                method: run
                    .distill
                    .as_ref()
                    .map_or("none".to_string(), |d| d.method.as_str().to_string()),
                direction: run
                    .distill
                    .as_ref()
                    .map_or("none".to_string(), |d| d.direction.as_str().to_string()),
                spectral_r: run
                    .spectral
                    .as_ref()
                    .map_or("none".to_string(), |s| s.r.to_string()),
                seeds: mine.len(),
                val_loss_mean: mean(&losses),
                val_loss_std: sample_std(&losses),
                eff_rank_mean: if ranks.len() == mine.len() {
                    Some(mean(&ranks))
                } else {
                    None
                },
                detail_means,
                delta: None,
            });
        }

        // Direction deltas: for each (teacher, method, r) with both
        // directions present, append inverted - traditional.
        let mut deltas = Vec::new();
        for row in rows.iter().filter(|r| r.direction == "inverted") {
            let partner = rows.iter().find(|r| {
                r.direction == "traditional"
                    && r.teacher == row.teacher
                    && r.method == row.method
                    && r.spectral_r == row.spectral_r
            });
            if let Some(trad) = partner {
                let delta = row.val_loss_mean - trad.val_loss_mean;
                let sign: i8 = if delta < 0.0 {
                    -1
                } else if delta > 0.0 {
                    1
                } else {
                    0
                };
                deltas.push(SummaryRow {
                    row_type: "delta",
                    teacher: row.teacher.clone(),
                    method: row.method.clone(),
                    direction: "inverted-minus-traditional".to_string(),
                    spectral_r: row.spectral_r.clone(),
                    seeds: row.seeds,
                    val_loss_mean: f64::NAN,
                    val_loss_std: f64::NAN,
                    eff_rank_mean: None,
                    detail_means: Vec::new(),
                    delta: Some((delta, sign)),
                });
            }
        }
        rows.extend(deltas);
        Ok(SummaryTable { task, rows })
    }

    /// Looks up the config row matching the given variant fields.
    pub fn config_row(
        &self,
        teacher: &str,
        method: &str,
        direction: &str,
        spectral_r: &str,
    ) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| {
            r.row_type == "config"
                && r.teacher == teacher
                && r.method == method
                && r.direction == direction
                && r.spectral_r == spectral_r
        })
    }

    pub fn to_csv(&self) -> String {
        let mut cols = vec![
            "row".to_string(),
            "teacher".to_string(),
            "method".to_string(),
            "direction".to_string(),
            "spectral_r".to_string(),
            "seeds".to_string(),
            "val_loss_mean".to_string(),
            "val_loss_std".to_string(),
            "eff_rank_mean".to_string(),
        ];
        cols.extend(
            MetricsReport::detail_columns(self.task)
                .iter()
                .map(|c| format!("{c}_mean")),
        );
        cols.push("delta_inv_minus_trad".to_string());
        cols.push("delta_sign".to_string());
        let mut out = cols.join(",");
        out.push('\n');
        let detail_len = MetricsReport::detail_columns(self.task).len();
        for row in &self.rows {
            let mut cells: Vec<String> = vec![
                row.row_type.to_string(),
                row.teacher.clone(),
                row.method.clone(),
                row.direction.clone(),
                row.spectral_r.clone(),
                row.seeds.to_string(),
            ];
            if row.row_type == "config" {
                cells.push(fmt_f64_exact(row.val_loss_mean));
                cells.push(fmt_f64_exact(row.val_loss_std));
                cells.push(
                    row.eff_rank_mean
                        .map_or(String::new(), fmt_f64_exact),
                );
                for v in &row.detail_means {
                    cells.push(fmt_f64_exact(*v));
                }
            } else {
                cells.push(String::new());
                cells.push(String::new());
                cells.push(String::new());
                for _ in 0..detail_len {
                    cells.push(String::new());
                }
            }
            match row.delta {
                Some((d, s)) => {
                    cells.push(fmt_f64_exact(d));
                    cells.push(s.to_string());
                }
                None => {
                    cells.push(String::new());
                    cells.push(String::new());
                }
            }
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Parses a summary CSV back into raw cells (header plus rows); used by
    /// round-trip checks and external tooling.
    pub fn parse_cells(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Parse {
                what: "summary csv",
                message: "empty file".to_string(),
            })?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let cells: Vec<String> = line.split(',').map(str::to_string).collect();
            if cells.len() != header.len() {
                return Err(Error::Parse {
                    what: "summary csv",
                    message: format!(
                        "row {} has {} cells, header has {}",
                        i + 2,
                        cells.len(),
                        header.len()
                    ),
                });
            }
            rows.push(cells);
        }
        Ok((header, rows))
    }
}

/// Execution options shared by `run` and `preset` commands.
#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub quiet: bool,
}

/// Everything an experiment leaves behind.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub results: Vec<RunResult>,
    pub summary: SummaryTable,
    pub summary_path: PathBuf,
}

/// Executes every `(configuration, seed)` pair, writes per-run CSVs, a
/// summary CSV, and returns the aggregated outcome.  On any run failure a
/// `manifest.txt` listing per-run status is written and the first error is
/// returned.
pub fn run_experiment(
    runs: &[RunConfig],
    seeds: &[u64],
    options: &ExperimentOptions,
) -> Result<ExperimentOutcome> {
    if runs.is_empty() {
        return Err(Error::Contract("experiment has no configurations".to_string()));
    }
    if seeds.is_empty() {
        return Err(Error::Contract("experiment has no seeds".to_string()));
    }
    let task = runs[0].task;
    if runs.iter().any(|r| r.task != task) {
        return Err(Error::Contract(
            "all configurations of one experiment must share a task".to_string(),
        ));
    }
    std::fs::create_dir_all(&options.out_dir)?;

    // Phase 1 (sequential): pretrain every distinct teacher once.
    let mut teachers: HashMap<String, MlpNet> = HashMap::new();
    for run in runs {
        if let Some(spec) = &run.teacher {
            for &seed in seeds {
                let key = teacher_cache_key(run, spec, seed);
                if !teachers.contains_key(&key) {
                    let world = build_world(run, seed)?;
                    let teacher = build_teacher(spec, &world, seed)?;
                    if !options.quiet {
                        eprintln!("prepared teacher {} seed {seed}", spec.kind.as_str());
                    }
                    teachers.insert(key, teacher);
                }
            }
        }
    }

    // Phase 2: the (configuration x seed) grid, optionally in parallel.
    let jobs = options.jobs.max(1);
    let total = runs.len() * seeds.len();
    let queue: Mutex<VecDeque<(usize, u64)>> = Mutex::new(
        runs.iter()
            .enumerate()
            .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
            .collect(),
    );
    let slots: Mutex<Vec<Option<std::result::Result<RunResult, String>>>> =
        Mutex::new(vec![None; total]);
    let done = Mutex::new(0usize);

    let work = |_worker: usize| {
        loop {
            let job = queue.lock().expect("queue lock").pop_front();
            let Some((run_index, seed)) = job else { break };
            let run = &runs[run_index];
            let teacher = run.teacher.as_ref().map(|spec| {
                teachers
                    .get(&teacher_cache_key(run, spec, seed))
                    .expect("teacher prepared in phase 1")
            });
            let slot = run_index * seeds.len()
                + seeds.iter().position(|&s| s == seed).expect("seed in list");
            let outcome = execute_run(run, run_index, seed, teacher, &options.out_dir);
            let mut slots = slots.lock().expect("slots lock");
            match outcome {
                Ok((_, result)) => {
                    if !options.quiet {
                        let mut d = done.lock().expect("done lock");
                        *d += 1;
                        eprintln!(
                            "[{}/{}] {}_{} val_loss={:.6}",
                            *d, total, result.fingerprint, seed, result.final_val.task_loss
                        );
                    }
                    slots[slot] = Some(Ok(result));
                }
                Err(e) => slots[slot] = Some(Err(e.to_string())),
            }
        }
    };
    if jobs == 1 {
        work(0);
    } else {
        std::thread::scope(|scope| {
            for w in 0..jobs {
                scope.spawn(move || work(w));
            }
        });
    }

    let slots = slots.into_inner().expect("slots lock");
    let mut results = Vec::with_capacity(total);
    let mut failures = Vec::new();
    let mut manifest = String::new();
    for (slot, entry) in slots.into_iter().enumerate() {
        let run = &runs[slot / seeds.len()];
        let seed = seeds[slot % seeds.len()];
        match entry {
            Some(Ok(result)) => {
                manifest.push_str(&format!("{}_{} ok\n", result.fingerprint, seed));
                results.push(result);
            }
            Some(Err(e)) => {
                manifest.push_str(&format!("{}_{} failed: {}\n", run.fingerprint(), seed, e));
                failures.push(e);
            }
            None => {
                let msg = "not executed".to_string();
                manifest.push_str(&format!("{}_{} {}\n", run.fingerprint(), seed, msg));
                failures.push(msg);
            }
        }
    }
    if !failures.is_empty() {
        let manifest_path = options.out_dir.join("manifest.txt");
        std::fs::write(&manifest_path, manifest)?;
        return Err(Error::RunFailure(format!(
            "{} of {} runs failed (see {}); first: {}",
            failures.len(),
            total,
            manifest_path.display(),
            failures[0]
        )));
    }

    let summary = SummaryTable::build(task, runs, &results)?;
    let summary_path = options.out_dir.join("summary.csv");
    std::fs::write(&summary_path, summary.to_csv())?;
    Ok(ExperimentOutcome {
        results,
        summary,
        summary_path,
    })
}

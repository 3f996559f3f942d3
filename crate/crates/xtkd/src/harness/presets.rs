//! Named experiment presets.
//!
//! Each preset builds its run grid programmatically, executes it, writes the
//! usual CSV artifacts plus an `assertions.txt`, and evaluates a set of
//! built-in directional assertions.  Failed assertions are reported in the
//! returned [`PresetOutcome`], not as errors, so callers can distinguish
//! "the claim did not hold" from "the run crashed".

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::distill::{
    linear_map_experiment, train_run, DistillMethod, ProjectorDirection, SpectralSettings,
    TrainSettings, DEFAULT_ENSEMBLE_SIZE,
};
use crate::error::{Error, Result};
use crate::harness::audits::{bound_audit, BOUND_SLACK_FLOOR, BOUND_TIGHT_TOL};
use crate::harness::config::{
    Arch, DatasetParams, DistillSpec, RunConfig, TeacherKind, TeacherSpec,
};
use crate::harness::runner::{run_experiment, ExperimentOptions, ExperimentOutcome, SummaryTable};
use crate::models::{Activation, InitSpec, MlpNet};
use crate::tasks::{synth_gen, MetricDetail, MetricsReport, TaskKind, TARGET_DIM};
use crate::util::{component_seed, fmt_f64_exact, CsvTable};

/// The available presets, in display order.
pub const PRESET_NAMES: [&str; 5] = [
    "table1-grid",
    "fig-spectra",
    "teacher-free-sweep",
    "linear-map",
    "bound-audit",
];

/// Names of every preset.
pub fn preset_names() -> &'static [&'static str] {
    &PRESET_NAMES
}

/// Seeds used when the caller does not override them.
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// One built-in claim checked after a preset run.
#[derive(Debug, Clone)]
pub struct AssertionResult {
    pub name: String,
    pub passed: bool,
    /// The numbers behind the verdict, human-readable.
    pub detail: String,
}

/// Everything a preset leaves behind.
#[derive(Debug)]
pub struct PresetOutcome {
    pub name: String,
    pub out_dir: PathBuf,
    /// The preset's main aggregate CSV, when it produces one.
    pub summary_path: Option<PathBuf>,
    /// Per-run results and summary for grid presets; `None` for the
    /// bespoke `linear-map` and `bound-audit` presets.
    pub experiment: Option<ExperimentOutcome>,
    pub assertions: Vec<AssertionResult>,
}

impl PresetOutcome {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }

    /// One `PASS`/`FAIL` line per assertion.
    pub fn assertions_text(&self) -> String {
        let mut out = String::new();
        for a in &self.assertions {
            let _ = writeln!(
                out,
                "{} {}: {}",
                if a.passed { "PASS" } else { "FAIL" },
                a.name,
                a.detail
            );
        }
        out
    }
}

/// Runs the named preset.
///
/// `seeds` defaults to [`DEFAULT_SEEDS`]; `out_dir` defaults to
/// `xtkd-out/<preset>`.  Run or I/O failures surface as errors; failed
/// assertions come back inside the outcome.
pub fn run_preset(
    name: &str,
    seeds: Option<&[u64]>,
    jobs: usize,
    out_dir: Option<&Path>,
    quiet: bool,
) -> Result<PresetOutcome> {
    let seeds: Vec<u64> = match seeds {
        Some(s) if s.is_empty() => {
            return Err(Error::Config {
                key: "seeds".to_string(),
                message: "seed list must not be empty".to_string(),
            })
        }
        Some(s) => s.to_vec(),
        None => DEFAULT_SEEDS.to_vec(),
    };
    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("xtkd-out").join(name));
    match name {
        "table1-grid" => table1_grid(&seeds, jobs, dir, quiet),
        "fig-spectra" => fig_spectra(&seeds, jobs, dir, quiet),
        "teacher-free-sweep" => teacher_free_sweep(&seeds, jobs, dir, quiet),
        "linear-map" => linear_map_preset(&seeds, dir),
        "bound-audit" => bound_audit_preset(&seeds, dir),
        other => Err(Error::Config {
            key: "preset".to_string(),
            message: format!(
                "unknown preset {other:?} (available: {})",
                PRESET_NAMES.join(", ")
            ),
        }),
    }
}

// ---- shared building blocks --------------------------------------------

/// Observation width shared by every preset dataset.
const INPUT_DIM: usize = 24;
const LATENT_DIM: usize = 4;
const CLASSES: usize = 4;

fn student_arch(out: usize) -> Arch {
    Arch {
        widths: vec![INPUT_DIM, 32, 32, out],
        encoder_cut: 2,
        activation: Activation::Tanh,
    }
}

fn teacher_arch(out: usize) -> Arch {
    Arch {
        widths: vec![INPUT_DIM, 64, 64, out],
        encoder_cut: 2,
        activation: Activation::Tanh,
    }
}

fn check(name: impl Into<String>, passed: bool, detail: String) -> AssertionResult {
    AssertionResult {
        name: name.into(),
        passed,
        detail,
    }
}

/// Mean/std/rank lookup on a summary config row.
fn summary_row<'a>(
    summary: &'a SummaryTable,
    teacher: &str,
    method: &str,
    direction: &str,
    r: &str,
) -> Result<&'a crate::harness::runner::SummaryRow> {
    summary.config_row(teacher, method, direction, r).ok_or_else(|| {
        Error::Contract(format!(
            "summary row missing: teacher={teacher} method={method} direction={direction} r={r}"
        ))
    })
}

fn write_assertions(dir: &Path, assertions: &[AssertionResult]) -> Result<()> {
    let mut text = String::new();
    for a in assertions {
        let _ = writeln!(
            text,
            "{} {}: {}",
            if a.passed { "PASS" } else { "FAIL" },
            a.name,
            a.detail
        );
    }
    std::fs::write(dir.join("assertions.txt"), text)?;
    Ok(())
}

// ---- table1-grid -------------------------------------------------------

const T1_EPOCHS: usize = 40;
const T1_LR: f64 = 0.01;
const T1_DISTILL_WEIGHT: f64 = 0.3;
const T1_PRETRAIN_EPOCHS: usize = 200;
const T1_PRETRAIN_LR: f64 = 0.01;

fn t1_dataset() -> DatasetParams {
    DatasetParams {
        n_train: 384,
        n_val: 1024,
        n_teacher: 512,
        latent_dim: LATENT_DIM,
        input_dim: INPUT_DIM,
        classes: CLASSES,
    }
}

fn t1_run(
    name: &str,
    teacher: Option<TeacherKind>,
    distill: Option<(DistillMethod, ProjectorDirection)>,
) -> RunConfig {
    RunConfig {
        name: name.to_string(),
        task: TaskKind::Depth,
        dataset: t1_dataset(),
        student: student_arch(1),
        teacher: teacher.map(|kind| TeacherSpec {
            kind,
            arch: teacher_arch(1),
            pretrain_epochs: T1_PRETRAIN_EPOCHS,
            pretrain_lr: T1_PRETRAIN_LR,
        }),
        distill: distill.map(|(method, direction)| DistillSpec {
            method,
            direction,
            weight: T1_DISTILL_WEIGHT,
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
        }),
        spectral: None,
        epochs: T1_EPOCHS,
        lr: T1_LR,
    }
}

/// Full distillation grid on the depth task: a no-teacher baseline plus
/// `{random, same-task teacher} x {fitnets, at, pkt, ensemble} x
/// {inverted, traditional}`.
fn table1_grid(seeds: &[u64], jobs: usize, dir: PathBuf, quiet: bool) -> Result<PresetOutcome> {
    let teachers = [TeacherKind::RandomFrozen, TeacherKind::Pretrained(TaskKind::Depth)];
    let methods = [
        DistillMethod::FitNets,
        DistillMethod::At,
        DistillMethod::Pkt,
        DistillMethod::Ensemble,
    ];
    let directions = [ProjectorDirection::Inverted, ProjectorDirection::Traditional];

    let mut runs = vec![t1_run("table1-grid", None, None)];
    for kind in teachers {
        for method in methods {
            for direction in directions {
                runs.push(t1_run("table1-grid", Some(kind), Some((method, direction))));
            }
        }
    }

    let outcome = run_experiment(
        &runs,
        seeds,
        &ExperimentOptions {
            out_dir: dir.clone(),
            jobs,
            quiet,
        },
    )?;
    let summary = &outcome.summary;
    let mut assertions = Vec::new();

    let baseline = summary_row(summary, "none", "none", "none", "none")?.val_loss_mean;

    // With a random teacher the inverted projector must hurt less.
    for method in ["fitnets", "ensemble"] {
        let inv = summary_row(summary, "random-frozen", method, "inverted", "none")?
            .val_loss_mean;
        let trad = summary_row(summary, "random-frozen", method, "traditional", "none")?
            .val_loss_mean;
        assertions.push(check(
            format!("random teacher, {method}: inverted beats traditional"),
            inv < trad,
            format!(
                "inverted mean {} vs traditional mean {}",
                fmt_f64_exact(inv),
                fmt_f64_exact(trad)
            ),
        ));
    }

    // With a same-task teacher the traditional direction may keep its edge.
    {
        let inv = summary_row(summary, "pretrained-depth", "fitnets", "inverted", "none")?
            .val_loss_mean;
        let trad = summary_row(summary, "pretrained-depth", "fitnets", "traditional", "none")?
            .val_loss_mean;
        assertions.push(check(
            "same-task teacher, fitnets: traditional not worse than inverted",
            trad <= inv,
            format!(
                "traditional mean {} vs inverted mean {}",
                fmt_f64_exact(trad),
                fmt_f64_exact(inv)
            ),
        ));
    }

    // Every distilled configuration, taken with its better direction, must
    // beat the no-teacher baseline.
    for teacher in ["random-frozen", "pretrained-depth"] {
        for method in ["fitnets", "at", "pkt", "ensemble"] {
            let inv = summary_row(summary, teacher, method, "inverted", "none")?.val_loss_mean;
            let trad =
                summary_row(summary, teacher, method, "traditional", "none")?.val_loss_mean;
            let best = inv.min(trad);
            assertions.push(check(
                format!("{teacher} {method}: best direction beats no-teacher baseline"),
                best < baseline,
                format!(
                    "best mean {} vs baseline mean {}",
                    fmt_f64_exact(best),
                    fmt_f64_exact(baseline)
                ),
            ));
        }
    }

    write_assertions(&dir, &assertions)?;
    Ok(PresetOutcome {
        name: "table1-grid".to_string(),
        out_dir: dir,
        summary_path: Some(outcome.summary_path.clone()),
        experiment: Some(outcome),
        assertions,
    })
}

// ---- fig-spectra -------------------------------------------------------

const FS_EPOCHS: usize = 60;
const FS_DISTILL_WEIGHT: f64 = 1.0;

/// Projector-spectrum comparison: FitNets under a random vs a same-task
/// teacher, inverted vs traditional.  An inverted projector facing a random
/// teacher should end with the lowest effective rank.
fn fig_spectra(seeds: &[u64], jobs: usize, dir: PathBuf, quiet: bool) -> Result<PresetOutcome> {
    let variant = |kind: TeacherKind, direction: ProjectorDirection| {
        let mut run = t1_run("fig-spectra", Some(kind), Some((DistillMethod::FitNets, direction)));
        run.epochs = FS_EPOCHS;
        if let Some(d) = run.distill.as_mut() {
            d.weight = FS_DISTILL_WEIGHT;
        }
        run
    };
    let runs = vec![
        variant(TeacherKind::RandomFrozen, ProjectorDirection::Inverted),
        variant(
            TeacherKind::Pretrained(TaskKind::Depth),
            ProjectorDirection::Inverted,
        ),
        variant(TeacherKind::RandomFrozen, ProjectorDirection::Traditional),
    ];

    let outcome = run_experiment(
        &runs,
        seeds,
        &ExperimentOptions {
            out_dir: dir.clone(),
            jobs,
            quiet,
        },
    )?;
    let summary = &outcome.summary;
    let rank = |teacher: &str, direction: &str| -> Result<f64> {
        summary_row(summary, teacher, "fitnets", direction, "none")?
            .eff_rank_mean
            .ok_or_else(|| {
                Error::Contract(format!(
                    "missing effective rank for teacher={teacher} direction={direction}"
                ))
            })
    };
    let random_inv = rank("random-frozen", "inverted")?;
    let same_inv = rank("pretrained-depth", "inverted")?;
    let random_trad = rank("random-frozen", "traditional")?;

    let mut assertions = Vec::new();
    assertions.push(check(
        "inverted projector collapses under a random teacher",
        random_inv <= same_inv,
        format!(
            "random-teacher rank {} vs same-task rank {}",
            fmt_f64_exact(random_inv),
            fmt_f64_exact(same_inv)
        ),
    ));
    assertions.push(check(
        "inverted direction ends lower-rank than traditional under a random teacher",
        random_inv <= random_trad,
        format!(
            "inverted rank {} vs traditional rank {}",
            fmt_f64_exact(random_inv),
            fmt_f64_exact(random_trad)
        ),
    ));

    write_assertions(&dir, &assertions)?;
    Ok(PresetOutcome {
        name: "fig-spectra".to_string(),
        out_dir: dir,
        summary_path: Some(outcome.summary_path.clone()),
        experiment: Some(outcome),
        assertions,
    })
}

// ---- teacher-free-sweep ------------------------------------------------

const TF_EPOCHS: usize = 800;
const TF_LR: f64 = 0.01;
const TF_N_TRAIN: usize = 96;
const TF_N_VAL: usize = 1024;
/// Spectral cuts swept by the preset.
const TF_R_RANGE: std::ops::RangeInclusive<usize> = 1..=8;
/// Regularisation weight; kept at unity so the sweep varies only the cut.
const TF_SPECTRAL_WEIGHT: f64 = 1.0;

/// Teacher-free spectral-regularisation sweep over the cut `r`, against an
/// unregularized baseline.
fn teacher_free_sweep(
    seeds: &[u64],
    jobs: usize,
    dir: PathBuf,
    quiet: bool,
) -> Result<PresetOutcome> {
    let base = RunConfig {
        name: "teacher-free-sweep".to_string(),
        task: TaskKind::Depth,
        dataset: DatasetParams {
            n_train: TF_N_TRAIN,
            n_val: TF_N_VAL,
            n_teacher: 0,
            latent_dim: LATENT_DIM,
            input_dim: INPUT_DIM,
            classes: CLASSES,
        },
        student: student_arch(1),
        teacher: None,
        distill: None,
        spectral: None,
        epochs: TF_EPOCHS,
        lr: TF_LR,
    };
    let mut runs = vec![base.clone()];
    for r in TF_R_RANGE {
        let mut run = base.clone();
        run.spectral = Some(SpectralSettings {
            r,
            weight: TF_SPECTRAL_WEIGHT,
        });
        runs.push(run);
    }

    let outcome = run_experiment(
        &runs,
        seeds,
        &ExperimentOptions {
            out_dir: dir.clone(),
            jobs,
            quiet,
        },
    )?;
    let summary = &outcome.summary;
    let base_row = summary_row(summary, "none", "none", "none", "none")?;
    let (base_mean, base_std) = (base_row.val_loss_mean, base_row.val_loss_std);

    // Look for a cut that beats the baseline by one pooled standard
    // deviation; report every cut's margin in pooled-sigma units.
    let mut best: Option<(usize, f64, f64)> = None;
    let mut margins = String::new();
    for r in TF_R_RANGE {
        let row = summary_row(summary, "none", "none", "none", &r.to_string())?;
        let pooled = ((base_std * base_std + row.val_loss_std * row.val_loss_std) / 2.0).sqrt();
        let margin = base_mean - row.val_loss_mean;
        let sigmas = if pooled > 0.0 { margin / pooled } else { f64::INFINITY };
        let _ = write!(margins, " r={r}:{:+.2}x", sigmas);
        let better = margin > pooled;
        if better && best.map_or(true, |(_, _, s)| sigmas > s) {
            best = Some((r, row.val_loss_mean, sigmas));
        }
    }
    let detail = match best {
        Some((r, mean, sigmas)) => format!(
            "r={r} mean {} vs baseline {} ({:+.2} pooled sigma); margins:{margins}",
            fmt_f64_exact(mean),
            fmt_f64_exact(base_mean),
            sigmas
        ),
        None => format!(
            "no cut beat baseline {} by one pooled sigma; margins:{margins}",
            fmt_f64_exact(base_mean)
        ),
    };
    let assertions = vec![check(
        "some spectral cut beats the unregularized baseline by one pooled std",
        best.is_some(),
        detail,
    )];

    write_assertions(&dir, &assertions)?;
    Ok(PresetOutcome {
        name: "teacher-free-sweep".to_string(),
        out_dir: dir,
        summary_path: Some(outcome.summary_path.clone()),
        experiment: Some(outcome),
        assertions,
    })
}

// ---- linear-map --------------------------------------------------------

const LM_N_TRAIN: usize = 256;
const LM_N_VAL: usize = 512;
const LM_PRETRAIN_EPOCHS: usize = 150;
const LM_REG_LR: f64 = 0.05;
const LM_DEPTH_LR: f64 = 0.01;
const LM_EPOCHS: usize = 60;
const LM_LR: f64 = 0.1;

/// Pure linear-bridge experiment: freeze a regression-pretrained encoder and
/// a depth-pretrained decoder, then train only the projector between them on
/// the depth loss.  Asserts the validation RMS log error drops from its
/// epoch-0 value in at least four of five seeds.
fn linear_map_preset(seeds: &[u64], dir: PathBuf) -> Result<PresetOutcome> {
    std::fs::create_dir_all(&dir)?;
    let rms_log_of = |report: &MetricsReport| -> Result<f64> {
        match report.detail {
            MetricDetail::Depth(d) => Ok(d.rms_log),
            _ => Err(Error::Contract(
                "linear-map preset expects depth metrics".to_string(),
            )),
        }
    };

    let mut summary = CsvTable::new(vec!["seed", "rms_log_epoch0", "rms_log_final", "improved"]);
    let mut improved = 0usize;
    for &seed in seeds {
        let pool = synth_gen(
            component_seed(seed, "data"),
            LM_N_TRAIN + LM_N_VAL,
            LATENT_DIM,
            INPUT_DIM,
            CLASSES,
        )?;
        let (train, val) = pool.split_at(LM_N_TRAIN)?;

        // Cross-task encoder: pretrained on the regression targets.
        let enc = MlpNet::new(
            &student_arch(TARGET_DIM).widths,
            2,
            Activation::Tanh,
            InitSpec::UniformFanIn,
            component_seed(seed, "encoder"),
        )?;
        let enc_settings = TrainSettings::new(
            LM_PRETRAIN_EPOCHS,
            LM_REG_LR,
            component_seed(seed, "encoder-train"),
        );
        let mut enc = train_run(enc, None, TaskKind::Regression, &train, &val, &enc_settings)?
            .student;
        enc.set_frozen(true);

        // Decoder: pretrained on the depth task, then frozen.
        let dec = MlpNet::new(
            &student_arch(1).widths,
            2,
            Activation::Tanh,
            InitSpec::UniformFanIn,
            component_seed(seed, "decoder"),
        )?;
        let dec_settings = TrainSettings::new(
            LM_PRETRAIN_EPOCHS,
            LM_DEPTH_LR,
            component_seed(seed, "decoder-train"),
        );
        let mut dec = train_run(dec, None, TaskKind::Depth, &train, &val, &dec_settings)?.student;
        dec.set_frozen(true);

        let outcome = linear_map_experiment(
            &enc,
            &dec,
            TaskKind::Depth,
            &train,
            &val,
            LM_EPOCHS,
            LM_LR,
            seed,
        )?;
        outcome
            .to_table(TaskKind::Depth)?
            .write(&dir.join(format!("linear-map_{seed}.csv")))?;

        let first = rms_log_of(&outcome.records.first().expect("epoch 0 row").val)?;
        let last = rms_log_of(&outcome.records.last().expect("final row").val)?;
        let did_improve = last < first;
        if did_improve {
            improved += 1;
        }
        summary.push_row(vec![seed as f64, first, last, f64::from(u8::from(did_improve))])?;
    }

    let summary_path = dir.join("summary.csv");
    summary.write(&summary_path)?;

    // "at least 4 of 5" scaled to the actual seed count.
    let needed_num = 4 * seeds.len();
    let assertions = vec![check(
        "training only the projector reduces validation rms_log in >= 4/5 seeds",
        improved * 5 >= needed_num,
        format!("{improved} of {} seeds improved", seeds.len()),
    )];
    write_assertions(&dir, &assertions)?;
    Ok(PresetOutcome {
        name: "linear-map".to_string(),
        out_dir: dir,
        summary_path: Some(summary_path),
        experiment: None,
        assertions,
    })
}

// ---- bound-audit -------------------------------------------------------

const BA_INSTANCES: usize = 200;
const BA_TOL: f64 = 1e-6;

/// Randomized decoupled-bound audit; writes every instance to CSV and
/// asserts non-negative slack everywhere plus tightness on the two
/// degenerate instances.
fn bound_audit_preset(seeds: &[u64], dir: PathBuf) -> Result<PresetOutcome> {
    std::fs::create_dir_all(&dir)?;
    let report = bound_audit(BA_INSTANCES, BA_TOL, seeds[0])?;
    let summary_path = dir.join("bound_audit.csv");
    report.to_table()?.write(&summary_path)?;

    let assertions = vec![
        check(
            format!("slack is non-negative on all {BA_INSTANCES} random instances"),
            report.violations == 0 && report.min_slack >= BOUND_SLACK_FLOOR,
            format!(
                "min slack {}, max slack {}",
                fmt_f64_exact(report.min_slack),
                fmt_f64_exact(report.max_slack)
            ),
        ),
        check(
            "bound is tight when student features equal projected teacher features",
            report.same_features.slack.abs() <= BOUND_TIGHT_TOL,
            format!("slack {}", fmt_f64_exact(report.same_features.slack)),
        ),
        check(
            "bound is tight for a zero projector",
            report.zero_projector.slack.abs() <= BOUND_TIGHT_TOL,
            format!(
                "slack {}, k set size {}",
                fmt_f64_exact(report.zero_projector.slack),
                report.zero_projector.k_set_size
            ),
        ),
    ];
    write_assertions(&dir, &assertions)?;
    Ok(PresetOutcome {
        name: "bound-audit".to_string(),
        out_dir: dir,
        summary_path: Some(summary_path),
        experiment: None,
        assertions,
    })
}

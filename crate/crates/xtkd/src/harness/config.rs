//! Experiment configuration: a flat `key = value` file with `[section]`
//! headers, parsed strictly (unknown keys are hard errors), then expanded
//! into one [`RunConfig`] per combination of the comma-separated sweep
//! fields (`teacher.kind`, `distill.method`, `distill.direction`,
//! `spectral.r`).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::distill::{DistillMethod, ProjectorDirection, SpectralSettings};
use crate::error::{Error, Result};
use crate::models::Activation;
use crate::tasks::TaskKind;
use crate::util::{fingerprint, fmt_f64_exact};

/// Where a teacher's weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    /// Frozen at initialisation; never trained.
    RandomFrozen,
    /// Pretrained on the given task, then frozen.
    Pretrained(TaskKind),
}

impl TeacherKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TeacherKind::RandomFrozen => "random-frozen",
            TeacherKind::Pretrained(TaskKind::Depth) => "pretrained-depth",
            TeacherKind::Pretrained(TaskKind::Classification) => "pretrained-class",
            TeacherKind::Pretrained(TaskKind::Regression) => "pretrained-reg",
        }
    }

    /// Parses a non-`none` teacher kind.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random-frozen" => Ok(TeacherKind::RandomFrozen),
            "pretrained-depth" => Ok(TeacherKind::Pretrained(TaskKind::Depth)),
            "pretrained-class" => Ok(TeacherKind::Pretrained(TaskKind::Classification)),
            "pretrained-reg" => Ok(TeacherKind::Pretrained(TaskKind::Regression)),
            other => Err(Error::Config {
                key: "teacher.kind".to_string(),
                message: format!(
                    "unknown teacher kind {other:?} (expected none, random-frozen, \
                     pretrained-depth, pretrained-class or pretrained-reg)"
                ),
            }),
        }
    }
}

/// Synthetic-dataset sizing shared by every run of an experiment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetParams {
    pub n_train: usize,
    pub n_val: usize,
    /// Rows reserved for teacher pretraining (drawn from the same pool).
    pub n_teacher: usize,
    pub latent_dim: usize,
    pub input_dim: usize,
    pub classes: usize,
}

impl DatasetParams {
    pub fn total(&self) -> usize {
        self.n_train + self.n_val + self.n_teacher
    }
}

/// One network architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub widths: Vec<usize>,
    pub encoder_cut: usize,
    pub activation: Activation,
}

/// A teacher that must exist before the student trains.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    pub arch: Arch,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

/// The distillation arm of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillSpec {
    pub method: DistillMethod,
    pub direction: ProjectorDirection,
    pub weight: f64,
    pub ensemble_size: usize,
}

/// One fully expanded configuration; together with a seed it identifies a
/// single training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub task: TaskKind,
    pub dataset: DatasetParams,
    pub student: Arch,
    pub teacher: Option<TeacherSpec>,
    pub distill: Option<DistillSpec>,
    pub spectral: Option<SpectralSettings>,
    pub epochs: usize,
    pub lr: f64,
}

impl RunConfig {
    /// Canonical text form; every field that influences the run appears
    /// exactly once, so equal strings mean identical runs (up to seed).
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let arch = |a: &Arch| {
            format!(
                "widths={:?} cut={} act={}",
                a.widths,
                a.encoder_cut,
                a.activation.as_str()
            )
        };
        let _ = writeln!(s, "name={}", self.name);
        let _ = writeln!(s, "task={}", self.task.as_str());
        let d = &self.dataset;
        let _ = writeln!(
            s,
            "dataset=n_train:{} n_val:{} n_teacher:{} latent:{} input:{} classes:{}",
            d.n_train, d.n_val, d.n_teacher, d.latent_dim, d.input_dim, d.classes
        );
        let _ = writeln!(s, "student={}", arch(&self.student));
        match &self.teacher {
            Some(t) => {
                let _ = writeln!(
                    s,
                    "teacher=kind:{} {} pre_epochs:{} pre_lr:{}",
                    t.kind.as_str(),
                    arch(&t.arch),
                    t.pretrain_epochs,
                    fmt_f64_exact(t.pretrain_lr)
                );
            }
            None => {
                let _ = writeln!(s, "teacher=none");
            }
        }
        match &self.distill {
            Some(ds) => {
                let _ = writeln!(
                    s,
                    "distill=method:{} direction:{} weight:{} ensemble:{}",
                    ds.method.as_str(),
                    ds.direction.as_str(),
                    fmt_f64_exact(ds.weight),
                    ds.ensemble_size
                );
            }
            None => {
                let _ = writeln!(s, "distill=none");
            }
        }
        match &self.spectral {
            Some(sp) => {
                let _ = writeln!(s, "spectral=r:{} weight:{}", sp.r, fmt_f64_exact(sp.weight));
            }
            None => {
                let _ = writeln!(s, "spectral=none");
            }
        }
        let _ = writeln!(s, "epochs={} lr={}", self.epochs, fmt_f64_exact(self.lr));
        s
    }

    /// 12-hex-digit digest of [`RunConfig::canonical_string`]; used in
    /// output file names.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.canonical_string())
    }

    /// Short human-readable variant label used in summary rows.
    pub fn label(&self) -> String {
        let teacher = self
            .teacher
            .as_ref()
            .map_or("none", |t| t.kind.as_str());
        let (method, direction) = match &self.distill {
            Some(d) => (d.method.as_str(), d.direction.as_str()),
            None => ("none", "none"),
        };
        let r = self
            .spectral
            .as_ref()
            .map_or("none".to_string(), |sp| sp.r.to_string());
        format!("teacher={teacher} method={method} direction={direction} r={r}")
    }
}

/// A parsed experiment file: shared settings plus the expanded run list.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out_dir: Option<String>,
    pub runs: Vec<RunConfig>,
}

// ---- raw key=value parsing ---------------------------------------------

struct RawConfig {
    /// `(section, key) -> (value, consumed)`
    entries: BTreeMap<(String, String), (String, bool)>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Config {
                    key: format!("line {}", lineno + 1),
                    message: format!("malformed section header {line:?}"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", lineno + 1),
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim().to_string();
            if section.is_empty() {
                return Err(Error::Config {
                    key: key.clone(),
                    message: "key appears before any [section] header".to_string(),
                });
            }
            let full = (section.clone(), key);
            if entries.contains_key(&full) {
                return Err(Error::Config {
                    key: format!("{}.{}", full.0, full.1),
                    message: "duplicate key".to_string(),
                });
            }
            entries.insert(full, (value.trim().to_string(), false));
        }
        Ok(RawConfig { entries })
    }

    fn take(&mut self, section: &str, key: &str) -> Option<String> {
        self.entries
            .get_mut(&(section.to_string(), key.to_string()))
            .map(|(v, consumed)| {
                *consumed = true;
                v.clone()
            })
    }

    fn require(&mut self, section: &str, key: &str) -> Result<String> {
        self.take(section, key).ok_or_else(|| Error::Config {
            key: format!("{section}.{key}"),
            message: "missing required key".to_string(),
        })
    }

    fn has_section(&self, section: &str) -> bool {
        self.entries.keys().any(|(s, _)| s == section)
    }

    /// Errors on the first key that was never consumed (unknown key).
    fn check_exhausted(&self) -> Result<()> {
        for ((section, key), (_, consumed)) in &self.entries {
            if !consumed {
                return Err(Error::Config {
                    key: format!("{section}.{key}"),
                    message: "unknown key".to_string(),
                });
            }
        }
        Ok(())
    }
}

fn parse_as<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| Error::Config {
        key: format!("{section}.{key}"),
        message: format!(
            "cannot parse {value:?} as {}",
            std::any::type_name::<T>()
        ),
    })
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<&str> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Error::Config {
            key: format!("{section}.{key}"),
            message: "empty list".to_string(),
        });
    }
    items
        .into_iter()
        .map(|item| parse_as(section, key, item))
        .collect()
}

// ---- typed parsing ------------------------------------------------------

/// Parses and validates an experiment file; see the module docs for the
/// format.  Sweep fields expand combinatorially into `runs`.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut raw = RawConfig::parse(text)?;

    // [experiment]
    let name = raw.require("experiment", "name")?;
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    {
        return Err(Error::Config {
            key: "experiment.name".to_string(),
            message: format!("name {name:?} must be non-empty [A-Za-z0-9_-]"),
        });
    }
    let seeds: Vec<u64> = parse_list("experiment", "seeds", &raw.require("experiment", "seeds")?)?;
    let epochs: usize = parse_as("experiment", "epochs", &raw.require("experiment", "epochs")?)?;
    let lr: f64 = parse_as("experiment", "lr", &raw.require("experiment", "lr")?)?;
    let out_dir = raw.take("experiment", "out_dir");
    {
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::Config {
                key: "experiment.seeds".to_string(),
                message: "duplicate seeds".to_string(),
            });
        }
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Config {
            key: "experiment.lr".to_string(),
            message: format!("learning rate must be finite and positive, got {lr}"),
        });
    }
    if epochs == 0 {
        return Err(Error::Config {
            key: "experiment.epochs".to_string(),
            message: "epochs must be at least 1".to_string(),
        });
    }

    // [dataset]
    let dataset = DatasetParams {
        n_train: parse_as("dataset", "n_train", &raw.require("dataset", "n_train")?)?,
        n_val: parse_as("dataset", "n_val", &raw.require("dataset", "n_val")?)?,
        n_teacher: match raw.take("dataset", "n_teacher") {
            Some(v) => parse_as("dataset", "n_teacher", &v)?,
            None => 0,
        },
        latent_dim: parse_as("dataset", "latent_dim", &raw.require("dataset", "latent_dim")?)?,
        input_dim: parse_as("dataset", "input_dim", &raw.require("dataset", "input_dim")?)?,
        classes: parse_as("dataset", "classes", &raw.require("dataset", "classes")?)?,
    };
    for (key, v) in [("dataset.n_train", dataset.n_train), ("dataset.n_val", dataset.n_val)] {
        if v == 0 {
            return Err(Error::Config {
                key: key.to_string(),
                message: "must be at least 1".to_string(),
            });
        }
    }
    if dataset.input_dim < dataset.latent_dim {
        return Err(Error::Config {
            key: "dataset.input_dim".to_string(),
            message: format!(
                "input_dim ({}) must be at least latent_dim ({})",
                dataset.input_dim, dataset.latent_dim
            ),
        });
    }
    if dataset.classes < 2 {
        return Err(Error::Config {
            key: "dataset.classes".to_string(),
            message: "need at least 2 classes".to_string(),
        });
    }

    // [student]
    let task = TaskKind::parse(&raw.require("student", "task")?).map_err(|e| Error::Config {
        key: "student.task".to_string(),
        message: e.to_string(),
    })?;
    let student = parse_arch(&mut raw, "student", true)?;
    validate_arch("student", &student, &dataset, Some(task.output_width(dataset.classes)))?;

    // [teacher]
    let teacher_kinds: Vec<Option<TeacherKind>> = match raw.take("teacher", "kind") {
        None => {
            if raw.has_section("teacher") {
                return Err(Error::Config {
                    key: "teacher.kind".to_string(),
                    message: "missing required key".to_string(),
                });
            }
            vec![None]
        }
        Some(v) => {
            let items: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if items.is_empty() {
                return Err(Error::Config {
                    key: "teacher.kind".to_string(),
                    message: "empty list".to_string(),
                });
            }
            items
                .into_iter()
                .map(|item| {
                    if item == "none" {
                        Ok(None)
                    } else {
                        TeacherKind::parse(item).map(Some)
                    }
                })
                .collect::<Result<_>>()?
        }
    };
    let needs_teacher_arch = teacher_kinds.iter().any(Option::is_some);
    let teacher_arch = if needs_teacher_arch {
        let arch = parse_arch(&mut raw, "teacher", false)?;
        validate_arch("teacher", &arch, &dataset, None)?;
        Some(arch)
    } else {
        None
    };
    let pretrain_epochs: usize = match raw.take("teacher", "pretrain_epochs") {
        Some(v) => parse_as("teacher", "pretrain_epochs", &v)?,
        None => 200,
    };
    let pretrain_lr: f64 = match raw.take("teacher", "pretrain_lr") {
        Some(v) => parse_as("teacher", "pretrain_lr", &v)?,
        None => 0.05,
    };
    let needs_pretrain_data = teacher_kinds
        .iter()
        .any(|k| matches!(k, Some(TeacherKind::Pretrained(_))));
    if needs_pretrain_data && dataset.n_teacher == 0 {
        return Err(Error::Config {
            key: "dataset.n_teacher".to_string(),
            message: "pretrained teachers need dataset rows (set n_teacher)".to_string(),
        });
    }

    // [distill]
    let distill = if raw.has_section("distill") {
        let methods: Vec<String> =
            parse_list("distill", "method", &raw.require("distill", "method")?)?;
        let methods: Vec<DistillMethod> = methods
            .iter()
            .map(|m| {
                DistillMethod::parse(m).map_err(|e| Error::Config {
                    key: "distill.method".to_string(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        let directions: Vec<String> = match raw.take("distill", "direction") {
            Some(v) => parse_list("distill", "direction", &v)?,
            None => vec!["inverted".to_string()],
        };
        let directions: Vec<ProjectorDirection> = directions
            .iter()
            .map(|d| {
                ProjectorDirection::parse(d).map_err(|e| Error::Config {
                    key: "distill.direction".to_string(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        let weight: f64 = match raw.take("distill", "weight") {
            Some(v) => parse_as("distill", "weight", &v)?,
            None => 1.0,
        };
        let ensemble_size: usize = match raw.take("distill", "ensemble_size") {
            Some(v) => parse_as("distill", "ensemble_size", &v)?,
            None => crate::distill::DEFAULT_ENSEMBLE_SIZE,
        };
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::Config {
                key: "distill.weight".to_string(),
                message: format!("weight must be finite and non-negative, got {weight}"),
            });
        }
        if ensemble_size == 0 {
            return Err(Error::Config {
                key: "distill.ensemble_size".to_string(),
                message: "ensemble size must be at least 1".to_string(),
            });
        }
        if teacher_kinds.iter().any(Option::is_none) {
            return Err(Error::Config {
                key: "teacher.kind".to_string(),
                message: "distillation requires a teacher; remove `none` from the kind list \
                          or drop the [distill] section"
                    .to_string(),
            });
        }
        Some((methods, directions, weight, ensemble_size))
    } else {
        if needs_teacher_arch {
            return Err(Error::Config {
                key: "teacher.kind".to_string(),
                message: "a teacher without a [distill] section has no effect".to_string(),
            });
        }
        None
    };

    // [spectral]
    let spectral = if raw.has_section("spectral") {
        let rs: Vec<usize> = parse_list("spectral", "r", &raw.require("spectral", "r")?)?;
        let weight: f64 = match raw.take("spectral", "weight") {
            Some(v) => parse_as("spectral", "weight", &v)?,
            None => 1.0,
        };
        if rs.iter().any(|&r| r == 0) {
            return Err(Error::Config {
                key: "spectral.r".to_string(),
                message: "cut index r is 1-based and must be at least 1".to_string(),
            });
        }
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::Config {
                key: "spectral.weight".to_string(),
                message: format!("weight must be finite and non-negative, got {weight}"),
            });
        }
        Some((rs, weight))
    } else {
        None
    };

    raw.check_exhausted()?;

    // ---- combinatorial expansion ----------------------------------------
    let spectral_options: Vec<Option<SpectralSettings>> = match &spectral {
        None => vec![None],
        Some((rs, weight)) => rs
            .iter()
            .map(|&r| Some(SpectralSettings { r, weight: *weight }))
            .collect(),
    };
    let mut runs = Vec::new();
    for kind in &teacher_kinds {
        let teacher = match kind {
            None => None,
            Some(k) => Some(TeacherSpec {
                kind: *k,
                arch: teacher_arch.clone().expect("arch parsed when teachers exist"),
                pretrain_epochs,
                pretrain_lr,
            }),
        };
        if let Some(t) = &teacher {
            if let TeacherKind::Pretrained(tk) = t.kind {
                let want = tk.output_width(dataset.classes);
                let got = *t.arch.widths.last().expect("non-empty widths");
                if got != want {
                    return Err(Error::Config {
                        key: "teacher.widths".to_string(),
                        message: format!(
                            "teacher pretrained on {} needs {want} outputs, widths end in {got}",
                            tk.as_str()
                        ),
                    });
                }
            }
        }
        let method_dirs: Vec<Option<DistillSpec>> = match &distill {
            None => vec![None],
            Some((methods, directions, weight, ensemble_size)) => {
                let mut v = Vec::new();
                for &m in methods {
                    for &d in directions {
                        v.push(Some(DistillSpec {
                            method: m,
                            direction: d,
                            weight: *weight,
                            ensemble_size: *ensemble_size,
                        }));
                    }
                }
                v
            }
        };
        for dspec in &method_dirs {
            for sp in &spectral_options {
                runs.push(RunConfig {
                    name: name.clone(),
                    task,
                    dataset: dataset.clone(),
                    student: student.clone(),
                    teacher: teacher.clone(),
                    distill: dspec.clone(),
                    spectral: *sp,
                    epochs,
                    lr,
                });
            }
        }
    }

    Ok(ExperimentConfig {
        name,
        seeds,
        out_dir,
        runs,
    })
}

/// Reads and parses a config file from disk.
pub fn load_config(path: &std::path::Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
        key: path.display().to_string(),
        message: format!("cannot read config: {e}"),
    })?;
    parse_config(&text)
}

fn parse_arch(raw: &mut RawConfig, section: &str, required: bool) -> Result<Arch> {
    let widths_str = if required {
        raw.require(section, "widths")?
    } else {
        raw.take(section, "widths").ok_or_else(|| Error::Config {
            key: format!("{section}.widths"),
            message: "missing required key (a non-none teacher needs an architecture)"
                .to_string(),
        })?
    };
    let widths: Vec<usize> = parse_list(section, "widths", &widths_str)?;
    let encoder_cut: usize =
        parse_as(section, "encoder_cut", &raw.require(section, "encoder_cut")?)?;
    let activation = match raw.take(section, "activation") {
        Some(v) => Activation::parse(&v).map_err(|e| Error::Config {
            key: format!("{section}.activation"),
            message: e.to_string(),
        })?,
        None => Activation::Tanh,
    };
    Ok(Arch {
        widths,
        encoder_cut,
        activation,
    })
}

fn validate_arch(
    section: &str,
    arch: &Arch,
    dataset: &DatasetParams,
    output_width: Option<usize>,
) -> Result<()> {
    if arch.widths.len() < 2 || arch.widths.iter().any(|&w| w == 0) {
        return Err(Error::Config {
            key: format!("{section}.widths"),
            message: format!("need >= 2 positive widths, got {:?}", arch.widths),
        });
    }
    if arch.widths[0] != dataset.input_dim {
        return Err(Error::Config {
            key: format!("{section}.widths"),
            message: format!(
                "first width ({}) must equal dataset.input_dim ({})",
                arch.widths[0], dataset.input_dim
            ),
        });
    }
    let layers = arch.widths.len() - 1;
    if arch.encoder_cut == 0 || arch.encoder_cut >= layers {
        return Err(Error::Config {
            key: format!("{section}.encoder_cut"),
            message: format!(
                "encoder_cut must be in 1..={} for {} layers, got {}",
                layers - 1,
                layers,
                arch.encoder_cut
            ),
        });
    }
    if let Some(want) = output_width {
        let got = *arch.widths.last().expect("non-empty");
        if got != want {
            return Err(Error::Config {
                key: format!("{section}.widths"),
                message: format!("task needs {want} outputs, widths end in {got}"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "
[experiment]
name = demo
seeds = 0,1,2
epochs = 10
lr = 0.01

[dataset]
n_train = 32
n_val = 16
n_teacher = 24
latent_dim = 3
input_dim = 8
classes = 3

[student]
task = depth
widths = 8,12,12,1
encoder_cut = 2
";

    #[test]
    fn minimal_baseline_config_parses() {
        let cfg = parse_config(BASE).unwrap();
        assert_eq!(cfg.name, "demo");
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.runs.len(), 1);
        let run = &cfg.runs[0];
        assert!(run.teacher.is_none());
        assert!(run.distill.is_none());
        assert!(run.spectral.is_none());
        assert_eq!(run.task, TaskKind::Depth);
        assert_eq!(run.fingerprint().len(), 12);
    }

    #[test]
    fn table1_style_config_expands_to_eight_runs() {
        let text = format!(
            "{BASE}
[teacher]
kind = random-frozen
widths = 8,16,16,1
encoder_cut = 2

[distill]
method = fitnets,at,pkt,ensemble
direction = inverted,traditional
"
        );
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.runs.len(), 8);
        let labels: std::collections::BTreeSet<String> =
            cfg.runs.iter().map(|r| r.label()).collect();
        assert_eq!(labels.len(), 8, "every combination distinct");
        let fps: std::collections::BTreeSet<String> =
            cfg.runs.iter().map(|r| r.fingerprint()).collect();
        assert_eq!(fps.len(), 8, "fingerprints distinguish variants");
    }

    #[test]
    fn teacher_list_with_none_and_distill_is_rejected() {
        let text = format!(
            "{BASE}
[teacher]
kind = none,random-frozen
widths = 8,16,16,1
encoder_cut = 2

[distill]
method = fitnets
"
        );
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("teacher.kind"), "{err}");
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let text = format!("{BASE}\n[dataset]\n");
        // Re-opening a section is fine; an unknown key is not.
        assert!(parse_config(&text).is_ok());
        let text = BASE.replace("n_teacher = 24", "n_teacher = 24\nn_extra = 1");
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("dataset.n_extra"), "{err}");
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let text = BASE.replace("seeds = 0,1,2", "seeds = ");
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("experiment.seeds"), "{err}");
    }

    #[test]
    fn spectral_sweep_expands_per_r() {
        let text = format!("{BASE}\n[spectral]\nr = 1,2,3,4\n");
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.runs.len(), 4);
        assert_eq!(cfg.runs[2].spectral, Some(SpectralSettings { r: 3, weight: 1.0 }));
    }

    #[test]
    fn width_and_task_mismatches_are_descriptive() {
        let bad_out = BASE.replace("widths = 8,12,12,1", "widths = 8,12,12,2");
        let err = parse_config(&bad_out).unwrap_err();
        assert!(err.to_string().contains("student.widths"), "{err}");

        let text = format!(
            "{BASE}
[teacher]
kind = pretrained-class
widths = 8,16,16,1
encoder_cut = 2

[distill]
method = fitnets
"
        );
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains("teacher.widths"), "{err}");
    }

    #[test]
    fn mangled_lines_report_position() {
        let err = parse_config("[experiment\nname = x\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = parse_config("[experiment]\njust words\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}

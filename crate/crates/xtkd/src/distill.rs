//! Feature projectors, distillation losses, and the full-batch training
//! loop for distilled student runs.
//!
//! A projector `P` aligns student features `Z_s` (`b x d_s`) with teacher
//! features `Z_t` (`b x d_t`).  The *traditional* direction lifts the
//! student into the teacher's space (`Z_s P` vs `Z_t`, `P` is
//! `d_s x d_t`); the *inverted* direction pulls the teacher down into the
//! student's space (`Z_s` vs `Z_t P`, `P` is `d_t x d_s`).  All losses are
//! computed on the aligned pair, so the two directions differ only in where
//! the projector sits.

use crate::autodiff::{Bindings, NodeId, TapeGraph};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::MlpNet;
use crate::spectral::{track_spectrum, SpectrumTrace};
use crate::tasks::{self, MetricsReport, SynthDataset, TaskKind};
use crate::util::{component_seed, seeded_rng, CsvTable, Rng};
use rand::Rng as _;

/// Which space the aligned pair lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorDirection {
    /// Student features are projected up into the teacher's space.
    Traditional,
    /// Teacher features are projected down into the student's space.
    Inverted,
}

impl ProjectorDirection {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProjectorDirection::Traditional => "traditional",
            ProjectorDirection::Inverted => "inverted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "traditional" => Ok(ProjectorDirection::Traditional),
            "inverted" => Ok(ProjectorDirection::Inverted),
            other => Err(Error::Parse {
                what: "projector direction",
                message: format!("unknown direction {other:?} (expected traditional or inverted)"),
            }),
        }
    }
}

/// Initialisation scheme for projector weights.
///
/// `Orthogonal` orthonormalises the smaller dimension of the map, so an
/// inverted projector (teacher width ≥ student width) starts as an isometric
/// compression of teacher features rather than a random mixture; `UniformFanIn`
/// is the conventional small-random start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorInit {
    UniformFanIn,
    Orthogonal,
}

impl ProjectorInit {
    pub fn as_str(self) -> &'static str {
        match self {
            ProjectorInit::UniformFanIn => "uniform",
            ProjectorInit::Orthogonal => "orthogonal",
        }
    }
}

impl std::str::FromStr for ProjectorInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(ProjectorInit::UniformFanIn),
            "orthogonal" => Ok(ProjectorInit::Orthogonal),
            other => Err(Error::Parse {
                what: "projector init",
                message: format!("unknown init {other:?} (expected uniform or orthogonal)"),
            }),
        }
    }
}

/// Trainable linear map aligning student and teacher feature spaces.
#[derive(Debug, Clone)]
pub struct Projector {
    weights: Matrix,
    direction: ProjectorDirection,
    d_s: usize,
    d_t: usize,
}

impl Projector {
    /// Seeded uniform fan-in initialisation: entries drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` where `fan_in` is the input
    /// width of the map (`d_t` for inverted, `d_s` for traditional).
    pub fn new(direction: ProjectorDirection, d_s: usize, d_t: usize, seed: u64) -> Result<Self> {
        Self::new_with_init(direction, d_s, d_t, seed, ProjectorInit::UniformFanIn)
    }

    /// [`Projector::new`] with an explicit initialisation scheme.
    pub fn new_with_init(
        direction: ProjectorDirection,
        d_s: usize,
        d_t: usize,
        seed: u64,
        init: ProjectorInit,
    ) -> Result<Self> {
        if d_s == 0 || d_t == 0 {
            return Err(Error::Contract(format!(
                "projector widths must be positive, got d_s={d_s}, d_t={d_t}"
            )));
        }
        let (rows, cols) = match direction {
            ProjectorDirection::Inverted => (d_t, d_s),
            ProjectorDirection::Traditional => (d_s, d_t),
        };
        let mut rng: Rng = seeded_rng(seed);
        let weights = match init {
            ProjectorInit::UniformFanIn => {
                let bound = 1.0 / (rows as f64).sqrt();
                Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
            }
            ProjectorInit::Orthogonal => crate::models::orthogonal_init(&mut rng, rows, cols),
        };
        Ok(Projector {
            weights,
            direction,
            d_s,
            d_t,
        })
    }

    /// Builds a projector around explicit weights (used by tests and the
    /// identity-initialised linear-map experiments).
    pub fn from_weights(
        direction: ProjectorDirection,
        d_s: usize,
        d_t: usize,
        weights: Matrix,
    ) -> Result<Self> {
        let expect = match direction {
            ProjectorDirection::Inverted => (d_t, d_s),
            ProjectorDirection::Traditional => (d_s, d_t),
        };
        if weights.shape() != expect {
            return Err(Error::shape("projector weights", expect, weights.shape()));
        }
        Ok(Projector {
            weights,
            direction,
            d_s,
            d_t,
        })
    }

    pub fn direction(&self) -> ProjectorDirection {
        self.direction
    }

    pub fn student_width(&self) -> usize {
        self.d_s
    }

    pub fn teacher_width(&self) -> usize {
        self.d_t
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// Gradient step `P -= lr * grad`.
    pub fn apply_grad(&mut self, grad: &Matrix, lr: f64) -> Result<()> {
        self.weights.add_scaled_in_place(grad, -lr)
    }

    /// Aligns a batch of features: returns `(aligned_student,
    /// aligned_teacher)` with matching shapes.
    pub fn project(&self, z_s: &Matrix, z_t: &Matrix) -> Result<(Matrix, Matrix)> {
        if z_s.cols() != self.d_s {
            return Err(Error::shape("project student", (z_s.rows(), self.d_s), z_s.shape()));
        }
        if z_t.cols() != self.d_t {
            return Err(Error::shape("project teacher", (z_t.rows(), self.d_t), z_t.shape()));
        }
        if z_s.rows() != z_t.rows() {
            return Err(Error::Contract(format!(
                "batch mismatch: student has {} rows, teacher {}",
                z_s.rows(),
                z_t.rows()
            )));
        }
        match self.direction {
            ProjectorDirection::Inverted => Ok((z_s.clone(), z_t.matmul(&self.weights)?)),
            ProjectorDirection::Traditional => Ok((z_s.matmul(&self.weights)?, z_t.clone())),
        }
    }
}

/// Distillation objective computed on an aligned feature pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMethod {
    /// Mean squared element-wise difference of the aligned features.
    FitNets,
    /// Mean squared difference of L2-normalized per-row squared-activation
    /// vectors (attention transfer).
    At,
    /// KL divergence between row-pairwise cosine-similarity probability
    /// matrices (probabilistic knowledge transfer).
    Pkt,
    /// Mean of FitNets losses over several independently initialised
    /// projectors.
    Ensemble,
}

impl DistillMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistillMethod::FitNets => "fitnets",
            DistillMethod::At => "at",
            DistillMethod::Pkt => "pkt",
            DistillMethod::Ensemble => "ensemble",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fitnets" => Ok(DistillMethod::FitNets),
            "at" => Ok(DistillMethod::At),
            "pkt" => Ok(DistillMethod::Pkt),
            "ensemble" => Ok(DistillMethod::Ensemble),
            other => Err(Error::Parse {
                what: "distill method",
                message: format!(
                    "unknown method {other:?} (expected fitnets, at, pkt or ensemble)"
                ),
            }),
        }
    }
}

/// Default ensemble size.
pub const DEFAULT_ENSEMBLE_SIZE: usize = 3;

/// Row norms are clamped at this value before division.
const ROW_NORM_CLAMP: f64 = 1e-12;

/// Probabilities are clamped at this floor inside logs.
const LOG_FLOOR: f64 = 1e-300;

/// Distillation loss for one aligned pair `(a, b)`; `b` is the reference
/// side (the teacher) for asymmetric losses.  [`DistillMethod::Ensemble`]
/// applied to a single pair reduces to FitNets; the per-member mean lives in
/// [`ensemble_distill_loss`].
pub fn distill_loss(method: DistillMethod, a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("distill_loss", a.shape(), b.shape()));
    }
    match method {
        DistillMethod::FitNets | DistillMethod::Ensemble => fitnets_loss(a, b),
        DistillMethod::At => at_loss(a, b),
        DistillMethod::Pkt => pkt_loss(a, b),
    }
}

/// Mean of FitNets losses over pre-aligned pairs, one per ensemble member.
pub fn ensemble_distill_loss(pairs: &[(Matrix, Matrix)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract(
            "ensemble loss needs at least one aligned pair".to_string(),
        ));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += distill_loss(DistillMethod::FitNets, a, b)?;
    }
    Ok(total / pairs.len() as f64)
}

/// `mean((a - b)^2)` over all entries.
fn fitnets_loss(a: &Matrix, b: &Matrix) -> Result<f64> {
    let d = a.sub(b)?;
    let n = (a.rows() * a.cols()) as f64;
    let sq = d.frob_norm();
    Ok(sq * sq / n)
}

/// Attention map of one feature row: the squared activations, L2-normalized
/// (rows with vanishing norm use a clamped denominator).
fn attention_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let sq: Vec<f64> = row.iter().map(|&v| v * v).collect();
        let norm = sq.iter().map(|&v| v * v).sum::<f64>().sqrt().max(ROW_NORM_CLAMP);
        for (c, &v) in sq.iter().enumerate() {
            out.set(r, c, v / norm);
        }
    }
    out
}

/// Mean squared difference of per-row attention maps.
fn at_loss(a: &Matrix, b: &Matrix) -> Result<f64> {
    fitnets_loss(&attention_rows(a), &attention_rows(b))
}

/// Row-stochastic pairwise-similarity matrix: cosine similarities shifted to
/// `[0, 1]` via `(cos + 1)/2`, diagonal excluded, rows normalized to sum 1.
fn similarity_probabilities(x: &Matrix) -> Matrix {
    let b = x.rows();
    // Row-normalized copies so cosines are plain dot products.
    let mut unit = Matrix::zeros(b, x.cols());
    for r in 0..b {
        let row = x.row(r);
        let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt().max(ROW_NORM_CLAMP);
        for (c, &v) in row.iter().enumerate() {
            unit.set(r, c, v / norm);
        }
    }
    let mut probs = Matrix::zeros(b, b);
    for i in 0..b {
        let mut shifted = vec![0.0; b];
        for j in 0..b {
            if i == j {
                continue;
            }
            let cos: f64 = unit.row(i).iter().zip(unit.row(j)).map(|(&p, &q)| p * q).sum();
            shifted[j] = (cos + 1.0) / 2.0;
        }
        let sum: f64 = shifted.iter().sum::<f64>().max(ROW_NORM_CLAMP);
        for j in 0..b {
            probs.set(i, j, shifted[j] / sum);
        }
    }
    probs
}

/// KL divergence between pairwise-similarity probability matrices, averaged
/// over rows: `(1/b) sum_i KL(P_b[i] || P_a[i])` with the teacher side as
/// the reference distribution.  Requires a batch of at least two rows.
fn pkt_loss(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() < 2 {
        return Err(Error::Contract(format!(
            "pkt loss needs a batch of at least 2 rows, got {}",
            a.rows()
        )));
    }
    let p = similarity_probabilities(a);
    let q = similarity_probabilities(b);
    let batch = a.rows();
    let mut kl = 0.0;
    for i in 0..batch {
        for j in 0..batch {
            if i == j {
                continue;
            }
            let qij = q.get(i, j);
            if qij > 0.0 {
                kl += qij * (qij.max(LOG_FLOOR).ln() - p.get(i, j).max(LOG_FLOOR).ln());
            }
        }
    }
    Ok(kl / batch as f64)
}

/// Total training objective: task loss plus distillation loss, both at unit
/// weight.  Errors if either term is non-finite.
pub fn total_loss(task: f64, distill: f64) -> Result<f64> {
    if !task.is_finite() {
        return Err(Error::Domain(format!("task loss is not finite: {task}")));
    }
    if !distill.is_finite() {
        return Err(Error::Domain(format!(
            "distill loss is not finite: {distill}"
        )));
    }
    Ok(task + distill)
}

// ---- graph builders ----------------------------------------------------

/// Graph version of [`distill_loss`] on two same-shaped feature nodes; `b`
/// is the reference (teacher) side.  Matches the scalar implementation
/// entry for entry, including the clamp constants.
pub fn distill_loss_graph(
    tape: &mut TapeGraph,
    method: DistillMethod,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape("distill_loss_graph", tape.shape(a), tape.shape(b)));
    }
    match method {
        DistillMethod::FitNets | DistillMethod::Ensemble => fitnets_graph(tape, a, b),
        DistillMethod::At => {
            let am = attention_graph(tape, a)?;
            let bm = attention_graph(tape, b)?;
            fitnets_graph(tape, am, bm)
        }
        DistillMethod::Pkt => pkt_graph(tape, a, b),
    }
}

fn fitnets_graph(tape: &mut TapeGraph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (r, c) = tape.shape(a);
    let sq = tape.squared_frob_diff(a, b)?;
    tape.scalar_mul(sq, 1.0 / (r * c) as f64)
}

fn attention_graph(tape: &mut TapeGraph, z: NodeId) -> Result<NodeId> {
    let sq = tape.hadamard(z, z)?;
    tape.row_l2_normalize(sq)
}

fn pkt_graph(tape: &mut TapeGraph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (batch, _) = tape.shape(a);
    if batch < 2 {
        return Err(Error::Contract(format!(
            "pkt loss needs a batch of at least 2 rows, got {batch}"
        )));
    }
    let p = similarity_graph(tape, a)?;
    let q = similarity_graph(tape, b)?;
    let lp = tape.log(p)?;
    let lq = tape.log(q)?;
    let diff = tape.sub(lq, lp)?;
    let weighted = tape.hadamard(q, diff)?;
    let total = tape.sum(weighted)?;
    tape.scalar_mul(total, 1.0 / batch as f64)
}

/// Row-stochastic similarity matrix as a graph: unit rows, cosine matrix,
/// shift to `[0, 1]`, zero the diagonal, normalize rows.
fn similarity_graph(tape: &mut TapeGraph, z: NodeId) -> Result<NodeId> {
    let (batch, _) = tape.shape(z);
    let unit = tape.row_l2_normalize(z)?;
    let unit_t = tape.transpose(unit)?;
    let cos = tape.matmul(unit, unit_t)?;
    let ones = tape.constant(Matrix::from_fn(batch, batch, |_, _| 1.0));
    let shifted_sum = tape.add(cos, ones)?;
    let shifted = tape.scalar_mul(shifted_sum, 0.5)?;
    let mask = tape.constant(Matrix::from_fn(batch, batch, |r, c| {
        if r == c {
            0.0
        } else {
            1.0
        }
    }));
    let masked = tape.hadamard(shifted, mask)?;
    tape.row_sum_normalize(masked)
}

// ---- training loop -----------------------------------------------------

/// Teacher-free spectral regularisation settings for a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralSettings {
    /// 1-based cut: singular directions from `r` onward are penalised.
    pub r: usize,
    pub weight: f64,
}

/// Hyperparameters of one full-batch training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    /// Base seed; the projector streams are derived from it with
    /// [`component_seed`], so runs that differ only in the distillation
    /// setup share every other random draw.
    pub seed: u64,
    pub task_weight: f64,
    pub distill_weight: f64,
    pub spectral: Option<SpectralSettings>,
}

impl TrainSettings {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            lr,
            seed,
            task_weight: 1.0,
            distill_weight: 1.0,
            spectral: None,
        }
    }
}

/// Learning-rate multiplier for projector weights during joint training.
/// The linear adapter is the cheapest part of the system to move; giving it
/// a modestly faster timescale than the student keeps the alignment residual
/// meaningful without letting the adapter absorb the objective outright.
pub const PROJECTOR_LR_MULT: f64 = 1.0;

/// Distillation side of a run: the objective, the projector direction, and
/// the frozen teacher supplying reference features.
#[derive(Debug, Clone, Copy)]
pub struct DistillPlan<'a> {
    pub method: DistillMethod,
    pub direction: ProjectorDirection,
    pub teacher: &'a MlpNet,
    /// Number of projectors when `method` is [`DistillMethod::Ensemble`];
    /// ignored otherwise.
    pub ensemble_size: usize,
    pub projector_init: ProjectorInit,
}

/// Per-epoch log row.  Train losses reflect the state *after* that epoch's
/// update; validation metrics come from a fresh forward pass.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub distill_loss: f64,
    pub spectral_loss: f64,
    pub total_loss: f64,
    pub val: MetricsReport,
    /// Projector singular values after the update, normalized by the
    /// largest (member 0 for ensembles); empty without a projector.
    pub sigma: Vec<f64>,
}

/// Everything a finished run hands back.
#[derive(Debug)]
pub struct TrainOutcome {
    pub student: MlpNet,
    /// One row per epoch, `1..=epochs`.
    pub records: Vec<EpochRecord>,
    /// Projector singular spectrum per epoch (`0..=epochs`), member 0 for
    /// ensembles.  `None` for runs without distillation.
    pub spectrum: Option<SpectrumTrace>,
    /// Epochs whose spectral gradient was skipped due to a degenerate gap.
    pub spectral_skips: Vec<usize>,
    /// Final projector states (empty without distillation).
    pub projectors: Vec<Projector>,
}

/// Full-batch SGD over `L = w_task * task + w_distill * distill +
/// w_spectral * spectral_tail`, all sharing one computation graph.
///
/// The graph is built once; each epoch runs backward on the cached forward,
/// applies the update to the student and the projector(s), then re-runs
/// forward so the logged row reflects the post-update state
/// (`epochs + 1` forwards, `epochs` backwards in total).
///
/// Zero-weight terms are logged but kept out of the differentiated root, so
/// a distillation run at weight 0 reproduces the plain baseline bit for
/// bit.  A degenerate spectral gap skips only the spectral term for that
/// epoch (recorded in `spectral_skips`).
pub fn train_run(
    mut student: MlpNet,
    plan: Option<&DistillPlan>,
    task: TaskKind,
    train: &SynthDataset,
    val: &SynthDataset,
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    if !settings.lr.is_finite() || !(settings.lr > 0.0) {
        return Err(Error::OutOfRange {
            what: "learning rate",
            got: settings.lr.to_string(),
            allowed: "finite, > 0".to_string(),
        });
    }
    for (what, w) in [
        ("task weight", settings.task_weight),
        ("distill weight", settings.distill_weight),
    ] {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::OutOfRange {
                what,
                got: w.to_string(),
                allowed: "finite, >= 0".to_string(),
            });
        }
    }
    if let Some(s) = settings.spectral {
        if !s.weight.is_finite() || s.weight < 0.0 {
            return Err(Error::OutOfRange {
                what: "spectral weight",
                got: s.weight.to_string(),
                allowed: "finite, >= 0".to_string(),
            });
        }
    }
    if student.is_frozen() {
        return Err(Error::FrozenViolation {
            name: student.label().to_string(),
        });
    }
    if train.classes() != val.classes() {
        return Err(Error::Contract(format!(
            "train has {} classes, val {}",
            train.classes(),
            val.classes()
        )));
    }
    if student.input_width() != train.input_dim() || student.input_width() != val.input_dim() {
        return Err(Error::Contract(format!(
            "student expects {} inputs, datasets have {} / {}",
            student.input_width(),
            train.input_dim(),
            val.input_dim()
        )));
    }
    let expected_out = task.output_width(train.classes());
    if student.output_width() != expected_out {
        return Err(Error::Contract(format!(
            "student output width {} does not match task {} (needs {expected_out})",
            student.output_width(),
            task.as_str()
        )));
    }

    // Build the graph once.
    let mut tape = TapeGraph::new();
    let x = tape.constant(train.x().clone());
    let gnet = student.build_graph(&mut tape, x)?;
    let task_node = tasks::task_loss_graph(&mut tape, task, gnet.output, train)?;

    let mut projectors: Vec<Projector> = Vec::new();
    let mut projector_leaves: Vec<NodeId> = Vec::new();
    let mut distill_node = None;
    if let Some(plan) = plan {
        if !plan.teacher.is_frozen() {
            return Err(Error::Contract(
                "distillation teacher must be frozen".to_string(),
            ));
        }
        if plan.teacher.input_width() != train.input_dim() {
            return Err(Error::Contract(format!(
                "teacher expects {} inputs, dataset has {}",
                plan.teacher.input_width(),
                train.input_dim()
            )));
        }
        let members = if plan.method == DistillMethod::Ensemble {
            plan.ensemble_size
        } else {
            1
        };
        if members == 0 {
            return Err(Error::OutOfRange {
                what: "ensemble size",
                got: "0".to_string(),
                allowed: ">= 1".to_string(),
            });
        }
        let d_s = student.feature_width();
        let d_t = plan.teacher.feature_width();
        // The teacher is frozen, so its features are constants of the graph.
        let z_t = plan.teacher.encode(train.x())?;
        let zt_node = tape.constant(z_t);
        let mut member_losses = Vec::with_capacity(members);
        for m in 0..members {
            let tag = if members == 1 {
                "projector".to_string()
            } else {
                format!("projector-{m}")
            };
            let proj = Projector::new(
                plan.direction,
                d_s,
                d_t,
                component_seed(settings.seed, &tag),
            )?;
            let leaf = tape.leaf(
                &format!("projector{m}"),
                proj.weights().rows(),
                proj.weights().cols(),
            );
            let (a_node, b_node) = match plan.direction {
                ProjectorDirection::Inverted => (gnet.features, tape.matmul(zt_node, leaf)?),
                ProjectorDirection::Traditional => {
                    (tape.matmul(gnet.features, leaf)?, zt_node)
                }
            };
            let per_member = if plan.method == DistillMethod::Ensemble {
                DistillMethod::FitNets
            } else {
                plan.method
            };
            member_losses.push(distill_loss_graph(&mut tape, per_member, a_node, b_node)?);
            projectors.push(proj);
            projector_leaves.push(leaf);
        }
        let combined = if member_losses.len() == 1 {
            member_losses[0]
        } else {
            let mut acc = member_losses[0];
            for &m in &member_losses[1..] {
                acc = tape.add(acc, m)?;
            }
            tape.scalar_mul(acc, 1.0 / member_losses.len() as f64)?
        };
        distill_node = Some(combined);
    }

    let spectral_node = match settings.spectral {
        Some(s) => Some(tape.spectral_tail(gnet.features, s.r)?),
        None => None,
    };

    // Only non-zero-weight terms enter the differentiated total.
    let weighted = |tape: &mut TapeGraph, node: NodeId, w: f64| -> Result<Option<NodeId>> {
        if w == 0.0 {
            Ok(None)
        } else if w == 1.0 {
            Ok(Some(node))
        } else {
            tape.scalar_mul(node, w).map(Some)
        }
    };
    let mut terms: Vec<NodeId> = Vec::new();
    if let Some(t) = weighted(&mut tape, task_node, settings.task_weight)? {
        terms.push(t);
    }
    if let Some(d) = distill_node {
        if let Some(t) = weighted(&mut tape, d, settings.distill_weight)? {
            terms.push(t);
        }
    }
    let spectral_terms_start = terms.len();
    if let (Some(sn), Some(s)) = (spectral_node, settings.spectral) {
        if let Some(t) = weighted(&mut tape, sn, s.weight)? {
            terms.push(t);
        }
    }
    if terms.is_empty() {
        return Err(Error::Contract(
            "total loss has no active terms (all weights zero)".to_string(),
        ));
    }
    let fold = |tape: &mut TapeGraph, nodes: &[NodeId]| -> Result<NodeId> {
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = tape.add(acc, n)?;
        }
        Ok(acc)
    };
    let root = fold(&mut tape, &terms)?;
    // Fallback root without the spectral term, for degenerate-gap epochs.
    let base_root = if spectral_terms_start < terms.len() {
        fold(&mut tape, &terms[..spectral_terms_start])?
    } else {
        root
    };
    tape.set_root(root)?;

    let bind_all = |bindings: &mut Bindings,
                    student: &MlpNet,
                    projectors: &[Projector]| {
        student.bind(bindings, &gnet);
        for (leaf, proj) in projector_leaves.iter().zip(projectors) {
            bindings.bind(*leaf, proj.weights().clone());
        }
    };

    let mut bindings = Bindings::new();
    bind_all(&mut bindings, &student, &projectors);
    tape.forward(&bindings)?;

    let mut spectrum = if projectors.is_empty() {
        None
    } else {
        let mut trace = SpectrumTrace::new();
        track_spectrum(&projectors[0], 0, &mut trace)?;
        Some(trace)
    };

    let mut records = Vec::with_capacity(settings.epochs);
    let mut spectral_skips = Vec::new();
    for epoch in 1..=settings.epochs {
        let grads = match tape.backward() {
            Ok(g) => g,
            Err(Error::DegenerateGap { .. }) => {
                spectral_skips.push(epoch);
                tape.backward_from(base_root)?
            }
            Err(e) => return Err(e),
        };
        student.apply_gradients(&gnet, &grads, settings.lr)?;
        for (leaf, proj) in projector_leaves.iter().zip(projectors.iter_mut()) {
            proj.apply_grad(
                grads.get(*leaf).expect("projector leaf has gradient"),
                settings.lr * PROJECTOR_LR_MULT,
            )?;
        }

        let mut bindings = Bindings::new();
        bind_all(&mut bindings, &student, &projectors);
        let total = tape.forward(&bindings)?.get(0, 0);
        if !total.is_finite() {
            return Err(Error::RunFailure(format!(
                "total loss became non-finite ({total}) at epoch {epoch}; try a smaller learning rate"
            )));
        }
        let sigma = if let Some(trace) = &mut spectrum {
            track_spectrum(&projectors[0], epoch, trace)?;
            trace.normalized.last().cloned().unwrap_or_default()
        } else {
            Vec::new()
        };

        let val_out = student.forward(val.x())?;
        let val_report = tasks::evaluate(task, &val_out, val)?;
        records.push(EpochRecord {
            epoch,
            task_loss: tape.scalar_value(task_node).expect("forward ran"),
            distill_loss: distill_node
                .and_then(|n| tape.scalar_value(n))
                .unwrap_or(0.0),
            spectral_loss: spectral_node
                .and_then(|n| tape.scalar_value(n))
                .unwrap_or(0.0),
            total_loss: total,
            val: val_report,
            sigma,
        });
    }

    Ok(TrainOutcome {
        student,
        records,
        spectrum,
        spectral_skips,
        projectors,
    })
}

/// Tabulates epoch records as CSV: losses, validation metrics, then the
/// normalized projector spectrum (when a projector exists).
pub fn records_to_table(task: TaskKind, records: &[EpochRecord]) -> Result<CsvTable> {
    let mut cols: Vec<String> = [
        "epoch",
        "task_loss",
        "distill_loss",
        "spectral_loss",
        "total_loss",
        "val_loss",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend(
        MetricsReport::detail_columns(task)
            .iter()
            .map(|s| s.to_string()),
    );
    let sigma_len = records.first().map_or(0, |r| r.sigma.len());
    cols.extend((0..sigma_len).map(|i| format!("sigma_{i}")));
    let mut table = CsvTable::new(cols);
    for r in records {
        if r.sigma.len() != sigma_len {
            return Err(Error::Contract(format!(
                "inconsistent sigma width: {} vs {}",
                r.sigma.len(),
                sigma_len
            )));
        }
        let mut row = vec![
            r.epoch as f64,
            r.task_loss,
            r.distill_loss,
            r.spectral_loss,
            r.total_loss,
            r.val.task_loss,
        ];
        row.extend(r.val.detail_values());
        row.extend(r.sigma.iter().copied());
        table.push_row(row)?;
    }
    Ok(table)
}

// ---- linear-map experiment ---------------------------------------------

/// One row of the frozen-model linear-bridge experiment.
#[derive(Debug, Clone)]
pub struct LinearMapRecord {
    pub epoch: usize,
    /// Training loss of the bridged pipeline `dec(enc(x) * P)`.
    pub train_loss: f64,
    /// Validation metrics of the bridged pipeline.
    pub val: MetricsReport,
}

/// Result of [`linear_map_experiment`].
#[derive(Debug)]
pub struct LinearMapOutcome {
    /// Rows `0..=epochs`; row 0 is the freshly initialised projector.
    pub records: Vec<LinearMapRecord>,
    pub spectrum: SpectrumTrace,
    pub projector: Projector,
}

impl LinearMapOutcome {
    /// `epoch, train_loss, val_loss, <metrics>, sigma_*` table.
    pub fn to_table(&self, task: TaskKind) -> Result<CsvTable> {
        let mut cols: Vec<String> = ["epoch", "train_loss", "val_loss"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend(
            MetricsReport::detail_columns(task)
                .iter()
                .map(|s| s.to_string()),
        );
        let sigma_len = self.spectrum.normalized.first().map_or(0, Vec::len);
        cols.extend((0..sigma_len).map(|i| format!("sigma_{i}")));
        let mut table = CsvTable::new(cols);
        for (rec, sigma) in self.records.iter().zip(&self.spectrum.normalized) {
            let mut row = vec![rec.epoch as f64, rec.train_loss, rec.val.task_loss];
            row.extend(rec.val.detail_values());
            row.extend(sigma.iter().copied());
            table.push_row(row)?;
        }
        Ok(table)
    }
}

/// Trains *only* a linear bridge `P` between two frozen networks: inputs run
/// through `enc`'s encoder, through `P`, then through `dec`'s decoder, and
/// `P` descends on the `task` loss of that composite.  Neither network is
/// updated.  Row 0 logs the freshly initialised bridge.
pub fn linear_map_experiment(
    enc: &MlpNet,
    dec: &MlpNet,
    task: TaskKind,
    train: &SynthDataset,
    val: &SynthDataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<LinearMapOutcome> {
    let projector = Projector::new(
        ProjectorDirection::Inverted,
        dec.feature_width(),
        enc.feature_width(),
        component_seed(seed, "projector"),
    )?;
    linear_map_from(enc, dec, task, train, val, epochs, lr, projector)
}

/// [`linear_map_experiment`] with an explicit starting bridge.  The
/// projector weights must be `enc.feature_width() x dec.feature_width()`.
#[allow(clippy::too_many_arguments)]
pub fn linear_map_from(
    enc: &MlpNet,
    dec: &MlpNet,
    task: TaskKind,
    train: &SynthDataset,
    val: &SynthDataset,
    epochs: usize,
    lr: f64,
    mut projector: Projector,
) -> Result<LinearMapOutcome> {
    if !enc.is_frozen() || !dec.is_frozen() {
        return Err(Error::Contract(
            "linear-map experiment requires both networks frozen".to_string(),
        ));
    }
    if !lr.is_finite() || !(lr > 0.0) {
        return Err(Error::OutOfRange {
            what: "learning rate",
            got: lr.to_string(),
            allowed: "finite, > 0".to_string(),
        });
    }
    if projector.weights().shape() != (enc.feature_width(), dec.feature_width()) {
        return Err(Error::shape(
            "linear-map bridge",
            projector.weights().shape(),
            (enc.feature_width(), dec.feature_width()),
        ));
    }
    if dec.output_width() != task.output_width(train.classes()) {
        return Err(Error::Contract(format!(
            "decoder emits {} outputs but task {} needs {}",
            dec.output_width(),
            task.as_str(),
            task.output_width(train.classes())
        )));
    }
    if train.classes() != val.classes() {
        return Err(Error::Contract(format!(
            "train has {} classes, val {}",
            train.classes(),
            val.classes()
        )));
    }
    let z_train = enc.encode(train.x())?;
    let z_val = enc.encode(val.x())?;

    let mut tape = TapeGraph::new();
    let z_node = tape.constant(z_train);
    let leaf = tape.leaf(
        "projector",
        projector.weights().rows(),
        projector.weights().cols(),
    );
    let bridged = tape.matmul(z_node, leaf)?;
    let out_node = dec.decode_graph_const(&mut tape, bridged)?;
    let loss = tasks::task_loss_graph(&mut tape, task, out_node, train)?;
    tape.set_root(loss)?;

    let evaluate_split = |p: &Projector| -> Result<MetricsReport> {
        let out = dec.decode(&z_val.matmul(p.weights())?)?;
        tasks::evaluate(task, &out, val)
    };

    let mut records = Vec::with_capacity(epochs + 1);
    let mut spectrum = SpectrumTrace::new();
    let mut bindings = Bindings::new();
    bindings.bind(leaf, projector.weights().clone());
    let value = tape.forward(&bindings)?.get(0, 0);
    records.push(LinearMapRecord {
        epoch: 0,
        train_loss: value,
        val: evaluate_split(&projector)?,
    });
    track_spectrum(&projector, 0, &mut spectrum)?;

    for epoch in 1..=epochs {
        let grads = tape.backward()?;
        projector.apply_grad(grads.get(leaf).expect("projector leaf"), lr)?;
        let mut bindings = Bindings::new();
        bindings.bind(leaf, projector.weights().clone());
        let value = tape.forward(&bindings)?.get(0, 0);
        if !value.is_finite() {
            return Err(Error::RunFailure(format!(
                "bridge loss became non-finite at epoch {epoch}"
            )));
        }
        records.push(LinearMapRecord {
            epoch,
            train_loss: value,
            val: evaluate_split(&projector)?,
        });
        track_spectrum(&projector, epoch, &mut spectrum)?;
    }
    Ok(LinearMapOutcome {
        records,
        spectrum,
        projector,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    #[test]
    fn projector_shapes_follow_direction() {
        let inv = Projector::new(ProjectorDirection::Inverted, 4, 10, 1).unwrap();
        assert_eq!(inv.weights().shape(), (10, 4));
        let trad = Projector::new(ProjectorDirection::Traditional, 4, 10, 1).unwrap();
        assert_eq!(trad.weights().shape(), (4, 10));
    }

    #[test]
    fn projection_aligns_shapes() {
        let mut rng = seeded_rng(2);
        let z_s = Matrix::random_uniform(&mut rng, 6, 4, -1.0, 1.0);
        let z_t = Matrix::random_uniform(&mut rng, 6, 10, -1.0, 1.0);
        for dir in [ProjectorDirection::Inverted, ProjectorDirection::Traditional] {
            let p = Projector::new(dir, 4, 10, 3).unwrap();
            let (a, b) = p.project(&z_s, &z_t).unwrap();
            assert_eq!(a.shape(), b.shape());
            match dir {
                ProjectorDirection::Inverted => assert_eq!(a.shape(), (6, 4)),
                ProjectorDirection::Traditional => assert_eq!(a.shape(), (6, 10)),
            }
        }
    }

    #[test]
    fn projector_seeds_change_weights() {
        let a = Projector::new(ProjectorDirection::Inverted, 4, 8, 7).unwrap();
        let b = Projector::new(ProjectorDirection::Inverted, 4, 8, 8).unwrap();
        assert!(a.weights().max_abs_diff(b.weights()) > 0.0);
        let c = Projector::new(ProjectorDirection::Inverted, 4, 8, 7).unwrap();
        assert_eq!(a.weights(), c.weights());
    }

    #[test]
    fn fitnets_matches_hand_value() {
        // diff^2 entries: [1,0,0,16], mean = 17/4.
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0, 2.0], vec![3.0, 0.0]]).unwrap();
        let loss = distill_loss(DistillMethod::FitNets, &a, &b).unwrap();
        assert!((loss - 4.25).abs() < 1e-15);
    }

    #[test]
    fn every_method_vanishes_on_identical_features() {
        let mut rng = seeded_rng(14);
        let a = Matrix::random_uniform(&mut rng, 5, 6, -1.0, 1.0);
        for method in [
            DistillMethod::FitNets,
            DistillMethod::At,
            DistillMethod::Pkt,
            DistillMethod::Ensemble,
        ] {
            let loss = distill_loss(method, &a, &a).unwrap();
            assert!(
                loss.abs() < 1e-12,
                "{} loss on identical features = {loss}",
                method.as_str()
            );
        }
    }

    #[test]
    fn at_is_scale_invariant() {
        let mut rng = seeded_rng(15);
        let a = Matrix::random_uniform(&mut rng, 4, 5, -1.0, 1.0);
        let scaled = a.scale(-3.7);
        let loss = distill_loss(DistillMethod::At, &a, &scaled).unwrap();
        assert!(loss.abs() < 1e-12, "AT loss under scaling = {loss}");
    }

    #[test]
    fn at_matches_hand_value() {
        // a = [1, 0] maps to [1, 0]; b = [1, 1] maps to [1,1]/sqrt(2).
        // mean sq diff = ((1 - 1/sqrt2)^2 + 1/2) / 2 = 1 - sqrt(2)/2.
        let a = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let loss = distill_loss(DistillMethod::At, &a, &b).unwrap();
        let expect = 1.0 - 2.0f64.sqrt() / 2.0;
        assert!((loss - expect).abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn pkt_requires_a_batch() {
        let a = Matrix::zeros(1, 4);
        assert!(distill_loss(DistillMethod::Pkt, &a, &a).is_err());
    }

    #[test]
    fn pkt_is_non_negative() {
        let mut rng = seeded_rng(16);
        for _ in 0..20 {
            let a = Matrix::random_uniform(&mut rng, 4, 6, -1.0, 1.0);
            let b = Matrix::random_uniform(&mut rng, 4, 6, -1.0, 1.0);
            let loss = distill_loss(DistillMethod::Pkt, &a, &b).unwrap();
            assert!(loss > -1e-12, "KL should be non-negative, got {loss}");
        }
    }

    #[test]
    fn ensemble_averages_member_losses() {
        let mut rng = seeded_rng(17);
        let a0 = Matrix::random_uniform(&mut rng, 3, 4, -1.0, 1.0);
        let b0 = Matrix::random_uniform(&mut rng, 3, 4, -1.0, 1.0);
        let a1 = Matrix::random_uniform(&mut rng, 3, 4, -1.0, 1.0);
        let b1 = Matrix::random_uniform(&mut rng, 3, 4, -1.0, 1.0);
        let l0 = distill_loss(DistillMethod::FitNets, &a0, &b0).unwrap();
        let l1 = distill_loss(DistillMethod::FitNets, &a1, &b1).unwrap();
        let mean =
            ensemble_distill_loss(&[(a0.clone(), b0.clone()), (a1.clone(), b1.clone())]).unwrap();
        assert!((mean - (l0 + l1) / 2.0).abs() < 1e-15);
        assert!(ensemble_distill_loss(&[]).is_err());
    }

    #[test]
    fn total_loss_adds_at_unit_weight() {
        assert_eq!(total_loss(1.25, 0.5).unwrap(), 1.75);
        assert!(total_loss(f64::NAN, 0.0).is_err());
        assert!(total_loss(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn mismatched_pairs_are_rejected() {
        let a = Matrix::zeros(3, 4);
        let b = Matrix::zeros(3, 5);
        assert!(distill_loss(DistillMethod::FitNets, &a, &b).is_err());
    }

    // ---- graph builders ------------------------------------------------

    #[test]
    fn graph_losses_match_scalar_losses() {
        let mut rng = seeded_rng(21);
        for method in [DistillMethod::FitNets, DistillMethod::At, DistillMethod::Pkt] {
            for trial in 0..5 {
                let a_val = Matrix::random_uniform(&mut rng, 5, 6, -1.0, 1.0);
                let b_val = Matrix::random_uniform(&mut rng, 5, 6, -1.0, 1.0);
                let mut tape = TapeGraph::new();
                let a = tape.leaf("a", 5, 6);
                let b = tape.leaf("b", 5, 6);
                let root = distill_loss_graph(&mut tape, method, a, b).unwrap();
                tape.set_root(root).unwrap();
                let mut bind = Bindings::new();
                bind.bind(a, a_val.clone());
                bind.bind(b, b_val.clone());
                let graph_val = tape.forward(&bind).unwrap().get(0, 0);
                let scalar_val = distill_loss(method, &a_val, &b_val).unwrap();
                assert!(
                    (graph_val - scalar_val).abs() < 1e-12,
                    "{} trial {trial}: graph {graph_val} vs scalar {scalar_val}",
                    method.as_str()
                );
            }
        }
    }

    #[test]
    fn graph_losses_pass_grad_check() {
        let mut rng = seeded_rng(22);
        for method in [DistillMethod::FitNets, DistillMethod::At, DistillMethod::Pkt] {
            let a_val = Matrix::random_uniform(&mut rng, 4, 5, -1.0, 1.0);
            let b_val = Matrix::random_uniform(&mut rng, 4, 5, -1.0, 1.0);
            let mut tape = TapeGraph::new();
            let a = tape.leaf("a", 4, 5);
            let b = tape.leaf("b", 4, 5);
            let root = distill_loss_graph(&mut tape, method, a, b).unwrap();
            tape.set_root(root).unwrap();
            let mut bind = Bindings::new();
            bind.bind(a, a_val);
            bind.bind(b, b_val);
            let report = tape.grad_check(&bind, 1e-6).unwrap();
            assert!(
                report.max_rel_err < 1e-6,
                "{}: rel err {}",
                method.as_str(),
                report.max_rel_err
            );
        }
    }

    // ---- training loop -------------------------------------------------

    use crate::models::{Activation, InitSpec, MlpNet};
    use crate::tasks::{synth_gen_from_maps, TaskKind, TaskMaps};

    fn small_world(seed: u64) -> (TaskMaps, crate::tasks::SynthDataset, crate::tasks::SynthDataset) {
        let maps = TaskMaps::new(component_seed(seed, "task-maps"), 3, 8, 3).unwrap();
        let train = synth_gen_from_maps(&maps, component_seed(seed, "data-train"), 24).unwrap();
        let val = synth_gen_from_maps(&maps, component_seed(seed, "data-val"), 16).unwrap();
        (maps, train, val)
    }

    fn small_student(seed: u64, out: usize) -> MlpNet {
        MlpNet::new(
            &[8, 10, 10, out],
            2,
            Activation::Tanh,
            InitSpec::UniformFanIn,
            component_seed(seed, "student"),
        )
        .unwrap()
    }

    fn random_teacher(seed: u64) -> MlpNet {
        let mut t = MlpNet::new(
            &[8, 12, 12, 1],
            2,
            Activation::Tanh,
            InitSpec::UniformFanIn,
            component_seed(seed, "teacher"),
        )
        .unwrap();
        t.set_frozen(true);
        t.set_label("teacher");
        t
    }

    #[test]
    fn baseline_training_reduces_task_loss() {
        let (_, train, val) = small_world(1);
        let student = small_student(1, 1);
        let settings = TrainSettings::new(120, 0.01, 1);
        let out = train_run(student, None, TaskKind::Depth, &train, &val, &settings).unwrap();
        assert_eq!(out.records.len(), 120);
        assert!(out.spectrum.is_none());
        assert!(out.projectors.is_empty());
        let first = out.records.first().unwrap().task_loss;
        let last = out.records.last().unwrap().task_loss;
        assert!(last < 0.8 * first, "no progress: {first} -> {last}");
        // Epoch indices are 1..=E.
        assert_eq!(out.records[0].epoch, 1);
        assert_eq!(out.records.last().unwrap().epoch, 120);
    }

    #[test]
    fn zero_weight_distillation_is_bitwise_baseline() {
        let (_, train, val) = small_world(2);
        let teacher = random_teacher(2);
        let settings = TrainSettings::new(25, 0.05, 2);

        let baseline = train_run(
            small_student(2, 1),
            None,
            TaskKind::Depth,
            &train,
            &val,
            &settings,
        )
        .unwrap();

        let mut zeroed = settings.clone();
        zeroed.distill_weight = 0.0;
        let plan = DistillPlan {
            method: DistillMethod::FitNets,
            direction: ProjectorDirection::Inverted,
            teacher: &teacher,
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
        };
        let distilled = train_run(
            small_student(2, 1),
            Some(&plan),
            TaskKind::Depth,
            &train,
            &val,
            &zeroed,
        )
        .unwrap();

        assert_eq!(
            baseline.student.to_checkpoint(),
            distilled.student.to_checkpoint(),
            "zero-weight distillation must not perturb the student"
        );
        for (a, b) in baseline.records.iter().zip(&distilled.records) {
            assert_eq!(a.task_loss.to_bits(), b.task_loss.to_bits());
            assert_eq!(a.val.task_loss.to_bits(), b.val.task_loss.to_bits());
        }
        // The distill value is still logged for reference.
        assert!(distilled.records[0].distill_loss > 0.0);
    }

    #[test]
    fn distillation_reduces_distill_loss() {
        let (_, train, val) = small_world(3);
        let teacher = random_teacher(3);
        let plan = DistillPlan {
            method: DistillMethod::FitNets,
            direction: ProjectorDirection::Inverted,
            teacher: &teacher,
            ensemble_size: DEFAULT_ENSEMBLE_SIZE,
        };
        let mut settings = TrainSettings::new(120, 0.01, 3);
        settings.distill_weight = 4.0;
        let out = train_run(
            small_student(3, 1),
            Some(&plan),
            TaskKind::Depth,
            &train,
            &val,
            &settings,
        )
        .unwrap();
        // Alignment pressure should win out over the course of training: the
        // final loss sits below the running peak.
        let peak = out
            .records
            .iter()
            .map(|r| r.distill_loss)
            .fold(f64::NEG_INFINITY, f64::max);
        let last = out.records.last().unwrap().distill_loss;
        assert!(last < 0.8 * peak, "distill loss never receded: peak {peak} -> {last}");
        // And the projector must actually have been trained.
        let init = Projector::new(
            ProjectorDirection::Inverted,
            10,
            12,
            component_seed(3, "projector"),
        )
        .unwrap();
        assert!(out.projectors[0].weights().max_abs_diff(init.weights()) > 1e-6);
        // Spectrum rows 0..=E, all singular values logged.
        let trace = out.spectrum.as_ref().unwrap();
        assert_eq!(trace.len(), 121);
        assert_eq!(out.projectors.len(), 1);
    }

    #[test]
    fn ensemble_uses_one_projector_per_member() {
        let (_, train, val) = small_world(4);
        let teacher = random_teacher(4);
        let plan = DistillPlan {
            method: DistillMethod::Ensemble,
            direction: ProjectorDirection::Traditional,
            teacher: &teacher,
            ensemble_size: 3,
        };
        let settings = TrainSettings::new(5, 0.05, 4);
        let out = train_run(
            small_student(4, 1),
            Some(&plan),
            TaskKind::Depth,
            &train,
            &val,
            &settings,
        )
        .unwrap();
        assert_eq!(out.projectors.len(), 3);
        // Members start from independent draws.
        assert!(out.projectors[0]
            .weights()
            .max_abs_diff(out.projectors[1].weights())
            > 0.0);
    }

    #[test]
    fn spectral_term_is_trained_and_logged() {
        let (_, train, val) = small_world(5);
        let mut settings = TrainSettings::new(30, 0.05, 5);
        settings.spectral = Some(SpectralSettings { r: 2, weight: 0.1 });
        let out = train_run(
            small_student(5, 1),
            None,
            TaskKind::Depth,
            &train,
            &val,
            &settings,
        )
        .unwrap();
        assert!(out.records[0].spectral_loss > 0.0);
        let first = out.records.first().unwrap().spectral_loss;
        let last = out.records.last().unwrap().spectral_loss;
        assert!(
            last < first,
            "spectral loss did not shrink: {first} -> {last}"
        );
        // total = task + w * spectral at every logged epoch.
        for r in &out.records {
            let expect = r.task_loss + 0.1 * r.spectral_loss;
            assert!((r.total_loss - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn train_run_rejects_bad_setups() {
        let (_, train, val) = small_world(6);
        let mut unfrozen = random_teacher(6);
        unfrozen.set_frozen(false);
        let plan = DistillPlan {
            method: DistillMethod::FitNets,
            direction: ProjectorDirection::Inverted,
            teacher: &unfrozen,
            ensemble_size: 1,
        };
        let settings = TrainSettings::new(2, 0.05, 6);
        assert!(train_run(
            small_student(6, 1),
            Some(&plan),
            TaskKind::Depth,
            &train,
            &val,
            &settings
        )
        .is_err());

        let mut frozen_student = small_student(6, 1);
        frozen_student.set_frozen(true);
        assert!(
            train_run(frozen_student, None, TaskKind::Depth, &train, &val, &settings).is_err()
        );

        // Output width must match the task.
        assert!(train_run(
            small_student(6, 2),
            None,
            TaskKind::Depth,
            &train,
            &val,
            &settings
        )
        .is_err());

        let mut bad = settings.clone();
        bad.lr = 0.0;
        assert!(train_run(small_student(6, 1), None, TaskKind::Depth, &train, &val, &bad).is_err());

        let mut zero_terms = settings;
        zero_terms.task_weight = 0.0;
        assert!(train_run(
            small_student(6, 1),
            None,
            TaskKind::Depth,
            &train,
            &val,
            &zero_terms
        )
        .is_err());
    }

    #[test]
    fn epoch_zero_returns_empty_records() {
        let (_, train, val) = small_world(7);
        let settings = TrainSettings::new(0, 0.05, 7);
        let out = train_run(
            small_student(7, 1),
            None,
            TaskKind::Depth,
            &train,
            &val,
            &settings,
        )
        .unwrap();
        assert!(out.records.is_empty());
    }

    #[test]
    fn records_table_has_task_specific_columns() {
        let (_, train, val) = small_world(8);
        let settings = TrainSettings::new(3, 0.05, 8);
        let out = train_run(
            small_student(8, 3),
            None,
            TaskKind::Classification,
            &train,
            &val,
            &settings,
        )
        .unwrap();
        let table = records_to_table(TaskKind::Classification, &out.records).unwrap();
        assert!(table.columns().iter().any(|c| c == "accuracy"));
        assert_eq!(table.len(), 3);
        let parsed = CsvTable::parse(&table.to_csv()).unwrap();
        assert_eq!(parsed.columns(), table.columns());
    }

    // ---- linear-map experiment -----------------------------------------

    #[test]
    fn linear_map_reduces_bridge_loss_from_epoch_zero() {
        let (_, train, val) = small_world(9);
        let mut enc = MlpNet::new(
            &[8, 12, 12, 3],
            2,
            Activation::Tanh,
            InitSpec::UniformFanIn,
            component_seed(9, "enc"),
        )
        .unwrap();
        enc.set_frozen(true);
        let mut dec = small_student(9, 1);
        dec.set_frozen(true);
        let out = linear_map_experiment(
            &enc,
            &dec,
            TaskKind::Depth,
            &train,
            &val,
            200,
            0.1,
            9,
        )
        .unwrap();
        assert_eq!(out.records.len(), 201);
        assert_eq!(out.records[0].epoch, 0);
        assert_eq!(out.spectrum.len(), 201);
        let first = out.records[0].train_loss;
        let last = out.records.last().unwrap().train_loss;
        assert!(last < 0.9 * first, "bridge barely moved: {first} -> {last}");

        // Epoch-0 row equals the scalar pipeline loss at the initial P.
        let init = Projector::new(
            ProjectorDirection::Inverted,
            dec.feature_width(),
            enc.feature_width(),
            component_seed(9, "projector"),
        )
        .unwrap();
        let bridged = enc
            .encode(train.x())
            .unwrap()
            .matmul(init.weights())
            .unwrap();
        let scalar =
            tasks::task_loss_value(TaskKind::Depth, &dec.decode(&bridged).unwrap(), &train)
                .unwrap();
        assert!((first - scalar).abs() < 1e-12);

        let table = out.to_table(TaskKind::Depth).unwrap();
        assert_eq!(table.len(), 201);
        assert!(table.columns().iter().any(|c| c == "rms_log"));
        assert!(table.columns().iter().any(|c| c == "sigma_0"));
    }

    #[test]
    fn linear_map_identity_bridge_reproduces_the_net() {
        let (_, train, val) = small_world(12);
        let mut net = small_student(12, 1);
        net.set_frozen(true);
        let d = net.feature_width();
        let bridge = Projector::from_weights(
            ProjectorDirection::Inverted,
            d,
            d,
            Matrix::identity(d),
        )
        .unwrap();
        let out = linear_map_from(
            &net,
            &net,
            TaskKind::Depth,
            &train,
            &val,
            0,
            0.1,
            bridge,
        )
        .unwrap();
        assert_eq!(out.records.len(), 1);
        let own =
            tasks::task_loss_value(TaskKind::Depth, &net.forward(train.x()).unwrap(), &train)
                .unwrap();
        assert!(
            (out.records[0].train_loss - own).abs() < 1e-12,
            "identity bridge should reproduce the net's own loss"
        );
    }

    #[test]
    fn linear_map_requires_frozen_networks() {
        let (_, train, val) = small_world(10);
        let student = small_student(10, 1); // not frozen
        let teacher = random_teacher(10);
        assert!(linear_map_experiment(
            &teacher,
            &student,
            TaskKind::Depth,
            &train,
            &val,
            2,
            0.1,
            10
        )
        .is_err());
    }
}

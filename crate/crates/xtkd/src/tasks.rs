//! Synthetic multi-task data and the per-task losses and metrics.
//!
//! Every dataset is generated from a shared low-dimensional latent code.
//! A [`TaskMaps`] bundle fixes the linear maps of one "world": the lift into
//! input space plus one target map per task.  Samples are then drawn per
//! split with their own seed, so train, validation and teacher-pretraining
//! splits share the same tasks but never the same rows:
//!
//! * inputs `x = z * W_lift + 0.25 * noise`,
//! * depth `y = 1 + exp(z * w_depth)` (always positive; trained in
//!   log-space),
//! * class labels `argmax(z * W_class)`,
//! * regression targets `z * W_reg` of width [`TARGET_DIM`].
//!
//! Losses come in two forms that must agree: plain scalar evaluation for
//! validation, and a [`TapeGraph`] builder for training.

use crate::autodiff::{NodeId, TapeGraph};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::util::{component_seed, seeded_rng};

/// Width of the regression target map.
pub const TARGET_DIM: usize = 3;

/// Scale of the uniform observation noise added to lifted latents.
pub const INPUT_NOISE_SCALE: f64 = 0.25;

/// Norm of the depth target map.  Log-depths span roughly `±0.5 * |z|`, so
/// depths stay within about one decade and the log-depth loss is
/// well-conditioned.
pub const DEPTH_MAP_SCALE: f64 = 0.5;

/// Which objective a network is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Scale-invariant log-depth regression; the network emits log-depth.
    Depth,
    /// Softmax classification over `classes` logits.
    Classification,
    /// Plain regression onto [`TARGET_DIM`] targets.
    Regression,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Depth => "depth",
            TaskKind::Classification => "class",
            TaskKind::Regression => "reg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(TaskKind::Depth),
            "class" | "classification" => Ok(TaskKind::Classification),
            "reg" | "regression" => Ok(TaskKind::Regression),
            other => Err(Error::Parse {
                what: "task",
                message: format!("unknown task {other:?} (expected depth, class or reg)"),
            }),
        }
    }

    /// Output width a network trained on this task must have.
    pub fn output_width(&self, classes: usize) -> usize {
        match self {
            TaskKind::Depth => 1,
            TaskKind::Classification => classes,
            TaskKind::Regression => TARGET_DIM,
        }
    }
}

/// The fixed linear maps of one synthetic world.
#[derive(Debug, Clone)]
pub struct TaskMaps {
    lift: Matrix,
    depth: Matrix,
    class: Matrix,
    reg: Matrix,
    latent_dim: usize,
    input_dim: usize,
    classes: usize,
}

impl TaskMaps {
    /// Draws all maps from one seed.  Entries are uniform in
    /// `[-1, 1] / sqrt(latent_dim)` so products with unit-range latents stay
    /// moderate; each target-map column is then rescaled to a fixed norm
    /// (unit for class and regression, [`DEPTH_MAP_SCALE`] for depth) so the
    /// task difficulty is comparable across seeds (only the direction of each
    /// target varies).  Draw order (lift, depth, class, reg) is part of the
    /// determinism contract.
    pub fn new(seed: u64, latent_dim: usize, input_dim: usize, classes: usize) -> Result<Self> {
        if latent_dim == 0 || input_dim == 0 {
            return Err(Error::Contract(format!(
                "dimensions must be positive, got latent {latent_dim}, input {input_dim}"
            )));
        }
        if input_dim < latent_dim {
            return Err(Error::Contract(format!(
                "input_dim ({input_dim}) must be at least latent_dim ({latent_dim}); \
                 the lift map embeds the latent space into observations"
            )));
        }
        if classes < 2 {
            return Err(Error::OutOfRange {
                what: "classes",
                got: classes.to_string(),
                allowed: ">= 2".to_string(),
            });
        }
        let mut rng = seeded_rng(seed);
        let bound = 1.0 / (latent_dim as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            Matrix::random_uniform(&mut rng, rows, cols, -bound, bound)
        };
        let lift = draw(latent_dim, input_dim);
        let depth = normalize_columns(draw(latent_dim, 1)).scale(DEPTH_MAP_SCALE);
        let class = normalize_columns(draw(latent_dim, classes));
        let reg = normalize_columns(draw(latent_dim, TARGET_DIM));
        Ok(Self {
            lift,
            depth,
            class,
            reg,
            latent_dim,
            input_dim,
            classes,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// The regression target map (used by the linear-bridge experiment).
    pub fn reg_map(&self) -> &Matrix {
        &self.reg
    }
}

/// One generated split: inputs plus every task's targets.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    x: Matrix,
    latents: Matrix,
    depth: Matrix,
    labels: Vec<usize>,
    reg: Matrix,
    classes: usize,
}

/// Generates a synthetic multi-task dataset from a single seed: the seed
/// determines both the world's task maps and the sample stream, so the same
/// arguments always produce a bitwise-identical dataset.
pub fn synth_gen(
    seed: u64,
    n: usize,
    latent_dim: usize,
    input_dim: usize,
    classes: usize,
) -> Result<SynthDataset> {
    let maps = TaskMaps::new(component_seed(seed, "task-maps"), latent_dim, input_dim, classes)?;
    synth_gen_from_maps(&maps, component_seed(seed, "samples"), n)
}

/// Draws `n` rows from the world described by `maps` using `seed` for the
/// sample stream (latents first, then observation noise).
pub fn synth_gen_from_maps(maps: &TaskMaps, seed: u64, n: usize) -> Result<SynthDataset> {
    if n == 0 {
        return Err(Error::OutOfRange {
            what: "sample count",
            got: "0".to_string(),
            allowed: ">= 1".to_string(),
        });
    }
    let mut rng = seeded_rng(seed);
    let latents = Matrix::random_uniform(&mut rng, n, maps.latent_dim, -1.0, 1.0);
    let noise = Matrix::random_uniform(&mut rng, n, maps.input_dim, -1.0, 1.0);
    let mut x = latents.matmul(&maps.lift)?;
    x.add_scaled_in_place(&noise, INPUT_NOISE_SCALE)?;

    let depth_pre = latents.matmul(&maps.depth)?;
    let depth = Matrix::from_fn(n, 1, |r, _| 1.0 + depth_pre.get(r, 0).exp());

    let class_scores = latents.matmul(&maps.class)?;
    let labels: Vec<usize> = (0..n).map(|r| argmax(class_scores.row(r))).collect();

    let reg = latents.matmul(&maps.reg)?;
    Ok(SynthDataset {
        x,
        latents,
        depth,
        labels,
        reg,
        classes: maps.classes,
    })
}

/// Rescales every column of `m` to unit Euclidean norm (zero columns are
/// left untouched; they cannot occur for continuous random draws).
fn normalize_columns(mut m: Matrix) -> Matrix {
    for c in 0..m.cols() {
        let norm = (0..m.rows()).map(|r| m.get(r, c).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for r in 0..m.rows() {
                m.set(r, c, m.get(r, c) / norm);
            }
        }
    }
    m
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn latents(&self) -> &Matrix {
        &self.latents
    }

    pub fn depth(&self) -> &Matrix {
        &self.depth
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn reg(&self) -> &Matrix {
        &self.reg
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    /// Splits off the first `n` rows; the remainder forms the second part.
    pub fn split_at(&self, n: usize) -> Result<(SynthDataset, SynthDataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::OutOfRange {
                what: "split point",
                got: n.to_string(),
                allowed: format!("1..={}", self.len() - 1),
            });
        }
        let take = |lo: usize, hi: usize| SynthDataset {
            x: slice_rows(&self.x, lo, hi),
            latents: slice_rows(&self.latents, lo, hi),
            depth: slice_rows(&self.depth, lo, hi),
            labels: self.labels[lo..hi].to_vec(),
            reg: slice_rows(&self.reg, lo, hi),
            classes: self.classes,
        };
        Ok((take(0, n), take(n, self.len())))
    }

    /// Serialises every column (inputs, latents, all targets) as CSV with a
    /// metadata comment line, round-tripping bitwise via
    /// [`SynthDataset::from_csv`].
    pub fn to_csv(&self) -> String {
        use crate::util::fmt_f64_exact;
        let mut out = String::new();
        out.push_str(&format!(
            "# synth-dataset classes={} latent_dim={}\n",
            self.classes,
            self.latents.cols()
        ));
        let mut header: Vec<String> = Vec::new();
        header.extend((0..self.x.cols()).map(|i| format!("x_{i}")));
        header.extend((0..self.latents.cols()).map(|i| format!("lat_{i}")));
        header.push("depth".to_string());
        header.push("label".to_string());
        header.extend((0..self.reg.cols()).map(|i| format!("reg_{i}")));
        out.push_str(&header.join(","));
        out.push('\n');
        for r in 0..self.len() {
            let mut fields: Vec<String> = Vec::new();
            fields.extend(self.x.row(r).iter().map(|&v| fmt_f64_exact(v)));
            fields.extend(self.latents.row(r).iter().map(|&v| fmt_f64_exact(v)));
            fields.push(fmt_f64_exact(self.depth.get(r, 0)));
            fields.push(self.labels[r].to_string());
            fields.extend(self.reg.row(r).iter().map(|&v| fmt_f64_exact(v)));
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let meta = lines.next().ok_or_else(|| Error::Parse {
            what: "dataset csv",
            message: "empty file".to_string(),
        })?;
        let (classes, latent_dim) = parse_meta(meta)?;
        let header = lines.next().ok_or_else(|| Error::Parse {
            what: "dataset csv",
            message: "missing header".to_string(),
        })?;
        let cols: Vec<&str> = header.split(',').collect();
        let input_dim = cols.iter().take_while(|c| c.starts_with("x_")).count();
        let expected: usize = input_dim + latent_dim + 2 + TARGET_DIM;
        if cols.len() != expected {
            return Err(Error::Parse {
                what: "dataset csv",
                message: format!("expected {expected} columns, header has {}", cols.len()),
            });
        }
        let mut xs = Vec::new();
        let mut lats = Vec::new();
        let mut depths = Vec::new();
        let mut labels = Vec::new();
        let mut regs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected {
                return Err(Error::Parse {
                    what: "dataset csv",
                    message: format!("row {}: expected {expected} fields, got {}", lineno + 3, fields.len()),
                });
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    what: "dataset csv",
                    message: format!("row {}: bad number {s:?}: {e}", lineno + 3),
                })
            };
            let mut it = fields.into_iter();
            let x_row: Vec<f64> = (&mut it).take(input_dim).map(num).collect::<Result<_>>()?;
            let lat_row: Vec<f64> = (&mut it).take(latent_dim).map(num).collect::<Result<_>>()?;
            let depth = num(it.next().expect("field count checked"))?;
            let label_s = it.next().expect("field count checked");
            let label: usize = label_s.parse().map_err(|e| Error::Parse {
                what: "dataset csv",
                message: format!("row {}: bad label {label_s:?}: {e}", lineno + 3),
            })?;
            if label >= classes {
                return Err(Error::Parse {
                    what: "dataset csv",
                    message: format!("row {}: label {label} >= classes {classes}", lineno + 3),
                });
            }
            let reg_row: Vec<f64> = it.map(num).collect::<Result<_>>()?;
            xs.push(x_row);
            lats.push(lat_row);
            depths.push(vec![depth]);
            labels.push(label);
            regs.push(reg_row);
        }
        if xs.is_empty() {
            return Err(Error::Parse {
                what: "dataset csv",
                message: "no data rows".to_string(),
            });
        }
        Ok(SynthDataset {
            x: Matrix::from_rows(&xs)?,
            latents: Matrix::from_rows(&lats)?,
            depth: Matrix::from_rows(&depths)?,
            labels,
            reg: Matrix::from_rows(&regs)?,
            classes,
        })
    }
}

fn slice_rows(m: &Matrix, lo: usize, hi: usize) -> Matrix {
    Matrix::from_fn(hi - lo, m.cols(), |r, c| m.get(lo + r, c))
}

fn parse_meta(line: &str) -> Result<(usize, usize)> {
    let body = line.strip_prefix("# synth-dataset ").ok_or_else(|| Error::Parse {
        what: "dataset csv",
        message: format!("bad metadata line {line:?}"),
    })?;
    let mut classes = None;
    let mut latent = None;
    for tok in body.split_whitespace() {
        if let Some(v) = tok.strip_prefix("classes=") {
            classes = v.parse::<usize>().ok();
        } else if let Some(v) = tok.strip_prefix("latent_dim=") {
            latent = v.parse::<usize>().ok();
        }
    }
    match (classes, latent) {
        (Some(c), Some(l)) if c >= 2 && l >= 1 => Ok((c, l)),
        _ => Err(Error::Parse {
            what: "dataset csv",
            message: format!("bad metadata line {line:?}"),
        }),
    }
}

// ---- losses ------------------------------------------------------------

/// Weight of the squared-mean term inside the scale-invariant log loss.
pub const SILOG_LAMBDA: f64 = 0.15;

/// Scale factor applied to the scale-invariant log loss.
pub const SILOG_SCALE: f64 = 10.0;

/// Scale-invariant log-depth loss over predicted and ground-truth depths
/// (both strictly positive, same shape).  With residuals
/// `g = ln(pred) - ln(gt)` over all `K` entries the loss is
/// `10 * sqrt(mean(g^2) + 0.15 * mean(g)^2)`.
pub fn silog_loss(pred: &Matrix, gt: &Matrix) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("silog", pred.shape(), gt.shape()));
    }
    let k = pred.rows() * pred.cols();
    if k == 0 {
        return Err(Error::Contract("empty depth batch".to_string()));
    }
    let mut sum_sq = 0.0;
    let mut sum = 0.0;
    for r in 0..pred.rows() {
        for c in 0..pred.cols() {
            let p = pred.get(r, c);
            let d = gt.get(r, c);
            if !(p > 0.0) {
                return Err(Error::Domain(format!(
                    "non-positive predicted depth {p} at ({r}, {c})"
                )));
            }
            if !(d > 0.0) {
                return Err(Error::Domain(format!(
                    "non-positive ground-truth depth {d} at ({r}, {c})"
                )));
            }
            let g = p.ln() - d.ln();
            sum_sq += g * g;
            sum += g;
        }
    }
    let kf = k as f64;
    Ok(SILOG_SCALE * (sum_sq / kf + SILOG_LAMBDA * (sum / kf).powi(2)).sqrt())
}

/// Graph version of [`silog_loss`] rooted at `pred_log`.
pub fn silog_graph(tape: &mut TapeGraph, pred_log: NodeId, depth: &Matrix) -> Result<NodeId> {
    let (rows, cols) = tape.shape(pred_log);
    if cols != 1 || rows != depth.rows() || depth.cols() != 1 {
        return Err(Error::shape("silog_graph", (rows, cols), depth.shape()));
    }
    for r in 0..depth.rows() {
        let d = depth.get(r, 0);
        if !(d > 0.0) {
            return Err(Error::Domain(format!("non-positive depth {d} at row {r}")));
        }
    }
    let log_gt = tape.constant(Matrix::from_fn(depth.rows(), 1, |r, _| depth.get(r, 0).ln()));
    let g = tape.sub(pred_log, log_gt)?;
    let sq = tape.hadamard(g, g)?;
    let mean_sq = tape.mean(sq)?;
    let mean_g = tape.mean(g)?;
    let mean_g_sq = tape.hadamard(mean_g, mean_g)?;
    let weighted = tape.scalar_mul(mean_g_sq, SILOG_LAMBDA)?;
    let inside = tape.add(mean_sq, weighted)?;
    let root = tape.sqrt(inside)?;
    tape.scalar_mul(root, SILOG_SCALE)
}

/// Mean cross-entropy of `logits` against integer labels, evaluated with the
/// stable log-sum-exp.  Uniform logits give exactly `ln(classes)`.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::Contract("empty batch".to_string()));
    }
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        if label >= row.len() {
            return Err(Error::OutOfRange {
                what: "label",
                got: label.to_string(),
                allowed: format!("< {}", row.len()),
            });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    Ok(total / labels.len() as f64)
}

/// Graph version of [`ce_loss`]: mean of `-ln softmax(logits)[label]`.
pub fn ce_graph(tape: &mut TapeGraph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (rows, cols) = tape.shape(logits);
    if rows != labels.len() {
        return Err(Error::Contract(format!(
            "{rows} logit rows vs {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::OutOfRange {
            what: "label",
            got: bad.to_string(),
            allowed: format!("< {cols}"),
        });
    }
    let onehot = tape.constant(Matrix::from_fn(rows, cols, |r, c| {
        if labels[r] == c {
            1.0
        } else {
            0.0
        }
    }));
    let sm = tape.row_softmax(logits)?;
    let lg = tape.log(sm)?;
    let picked = tape.hadamard(lg, onehot)?;
    let total = tape.sum(picked)?;
    tape.scalar_mul(total, -1.0 / rows as f64)
}

/// Mean squared error over all entries.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse", pred.shape(), target.shape()));
    }
    let diff = pred.sub(target)?;
    let n = (pred.rows() * pred.cols()) as f64;
    Ok(diff.frob_norm().powi(2) / n)
}

/// Graph version of [`mse_loss`] against a constant target.
pub fn mse_graph(tape: &mut TapeGraph, pred: NodeId, target: &Matrix) -> Result<NodeId> {
    let shape = tape.shape(pred);
    if shape != target.shape() {
        return Err(Error::shape("mse_graph", shape, target.shape()));
    }
    let t = tape.constant(target.clone());
    let sq = tape.squared_frob_diff(pred, t)?;
    tape.scalar_mul(sq, 1.0 / (shape.0 * shape.1) as f64)
}

/// Builds the task loss for `kind` on top of the network output node.
pub fn task_loss_graph(
    tape: &mut TapeGraph,
    kind: TaskKind,
    output: NodeId,
    ds: &SynthDataset,
) -> Result<NodeId> {
    match kind {
        TaskKind::Depth => silog_graph(tape, output, ds.depth()),
        TaskKind::Classification => ce_graph(tape, output, ds.labels()),
        TaskKind::Regression => mse_graph(tape, output, ds.reg()),
    }
}

/// Scalar task loss for a computed network output.  Depth networks emit
/// log-depth, so the output is exponentiated before the depth loss.
pub fn task_loss_value(kind: TaskKind, output: &Matrix, ds: &SynthDataset) -> Result<f64> {
    match kind {
        TaskKind::Depth => {
            let pred = Matrix::from_fn(output.rows(), output.cols(), |r, c| {
                output.get(r, c).exp()
            });
            silog_loss(&pred, ds.depth())
        }
        TaskKind::Classification => ce_loss(output, ds.labels()),
        TaskKind::Regression => mse_loss(output, ds.reg()),
    }
}

// ---- metrics -----------------------------------------------------------

/// Standard depth-estimation error and accuracy measures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMetrics {
    /// Mean of `|d - d*| / d*`.
    pub abs_rel: f64,
    /// Mean of `(d - d*)^2 / d*`.
    pub sq_rel: f64,
    /// Root mean squared error on raw depths.
    pub rms: f64,
    /// Root mean squared error on log depths.
    pub rms_log: f64,
    /// Fraction with `max(d/d*, d*/d) < 1.25`.
    pub delta1: f64,
    /// Fraction with the ratio below `1.25^2`.
    pub delta2: f64,
    /// Fraction with the ratio below `1.25^3`.
    pub delta3: f64,
}

/// Computes [`DepthMetrics`] from predicted and ground-truth depths (both
/// strictly positive, same shape).  The threshold comparisons are strict.
pub fn depth_metrics(pred: &Matrix, gt: &Matrix) -> Result<DepthMetrics> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("depth_metrics", pred.shape(), gt.shape()));
    }
    let n = pred.rows() * pred.cols();
    if n == 0 {
        return Err(Error::Contract("empty depth batch".to_string()));
    }
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut sq = 0.0;
    let mut sq_log = 0.0;
    let mut hits = [0usize; 3];
    let thresholds = [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25];
    for r in 0..pred.rows() {
        for c in 0..pred.cols() {
            let d = pred.get(r, c);
            let g = gt.get(r, c);
            if !(d > 0.0) || !(g > 0.0) {
                return Err(Error::Domain(format!(
                    "non-positive depth pair ({d}, {g}) at ({r}, {c})"
                )));
            }
            abs_rel += (d - g).abs() / g;
            sq_rel += (d - g) * (d - g) / g;
            sq += (d - g) * (d - g);
            let dl = d.ln() - g.ln();
            sq_log += dl * dl;
            let ratio = (d / g).max(g / d);
            for (h, &t) in hits.iter_mut().zip(&thresholds) {
                if ratio < t {
                    *h += 1;
                }
            }
        }
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rms: (sq / nf).sqrt(),
        rms_log: (sq_log / nf).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
    })
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Contract(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Contract("empty batch".to_string()));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(logits.row(r)) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-task validation detail accompanying the task loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricDetail {
    Depth(DepthMetrics),
    Classification { accuracy: f64 },
    Regression,
}

/// Validation summary: the task loss plus task-specific metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub task_loss: f64,
    pub detail: MetricDetail,
}

impl MetricsReport {
    /// CSV column names for the detail metrics of `kind`, in the order
    /// [`MetricsReport::detail_values`] emits them.
    pub fn detail_columns(kind: TaskKind) -> &'static [&'static str] {
        match kind {
            TaskKind::Depth => &[
                "abs_rel", "sq_rel", "rms", "rms_log", "delta1", "delta2", "delta3",
            ],
            TaskKind::Classification => &["accuracy"],
            TaskKind::Regression => &[],
        }
    }

    pub fn detail_values(&self) -> Vec<f64> {
        match self.detail {
            MetricDetail::Depth(m) => vec![
                m.abs_rel, m.sq_rel, m.rms, m.rms_log, m.delta1, m.delta2, m.delta3,
            ],
            MetricDetail::Classification { accuracy } => vec![accuracy],
            MetricDetail::Regression => vec![],
        }
    }
}

/// Evaluates a network output against a dataset: task loss plus
/// task-specific metrics.  For depth the output is interpreted as log-depth
/// and exponentiated before the threshold metrics.
pub fn evaluate(kind: TaskKind, output: &Matrix, ds: &SynthDataset) -> Result<MetricsReport> {
    let task_loss = task_loss_value(kind, output, ds)?;
    let detail = match kind {
        TaskKind::Depth => {
            let pred_depth = Matrix::from_fn(output.rows(), 1, |r, _| output.get(r, 0).exp());
            MetricDetail::Depth(depth_metrics(&pred_depth, ds.depth())?)
        }
        TaskKind::Classification => MetricDetail::Classification {
            accuracy: accuracy(output, ds.labels())?,
        },
        TaskKind::Regression => MetricDetail::Regression,
    };
    Ok(MetricsReport { task_loss, detail })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Bindings;
    use crate::util::seeded_rng;
    use rand::Rng as _;

    fn maps() -> TaskMaps {
        TaskMaps::new(7, 4, 10, 4).unwrap()
    }

    #[test]
    fn silog_matches_hand_value() {
        // Single residual g = 0.5: 10 * sqrt(0.25 + 0.15 * 0.25).
        let gt = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let pred = Matrix::from_rows(&[vec![2.0 * 0.5f64.exp()]]).unwrap();
        let loss = silog_loss(&pred, &gt).unwrap();
        assert!((loss - 5.361902647381804).abs() < 1e-9, "{loss}");
        // Perfect prediction: zero.
        assert!(silog_loss(&gt, &gt).unwrap() < 1e-12);
        // Non-positive depths are rejected on either side.
        let bad = Matrix::from_rows(&[vec![0.0]]).unwrap();
        assert!(silog_loss(&bad, &gt).is_err());
        assert!(silog_loss(&gt, &bad).is_err());
    }

    #[test]
    fn silog_is_invariant_to_common_scaling() {
        let mut rng = seeded_rng(21);
        let gt = Matrix::from_fn(8, 1, |_, _| 0.5 + rng.gen_range(0.0f64..4.0));
        let pred = Matrix::from_fn(8, 1, |_, _| 0.5 + rng.gen_range(0.0f64..4.0));
        let base = silog_loss(&pred, &gt).unwrap();
        let scaled = silog_loss(&pred.scale(10.0), &gt.scale(10.0)).unwrap();
        assert!((base - scaled).abs() < 1e-12, "{base} vs {scaled}");
    }

    #[test]
    fn silog_graph_matches_scalar_and_grad_checks() {
        let mut rng = seeded_rng(3);
        let depth = Matrix::from_fn(6, 1, |_, _| 1.0 + rng.gen_range(0.0f64..4.0));
        let pred = Matrix::random_uniform(&mut rng, 6, 1, -0.5, 2.0);
        let mut tape = TapeGraph::new();
        let p = tape.leaf("pred", 6, 1);
        let root = silog_graph(&mut tape, p, &depth).unwrap();
        tape.set_root(root).unwrap();
        let mut b = Bindings::new();
        b.bind(p, pred.clone());
        let graph_val = tape.forward(&b).unwrap().get(0, 0);
        let pred_depth = Matrix::from_fn(6, 1, |r, _| pred.get(r, 0).exp());
        let scalar_val = silog_loss(&pred_depth, &depth).unwrap();
        assert!((graph_val - scalar_val).abs() < 1e-12);
        let report = tape.grad_check(&b, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn ce_uniform_logits_give_ln_classes() {
        let logits = Matrix::zeros(5, 4);
        let labels = vec![0, 1, 2, 3, 0];
        let loss = ce_loss(&logits, &labels).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-15, "{loss}");
    }

    #[test]
    fn ce_hand_cases() {
        // Two logits [1, 2], true label 0: loss = ln(1 + e).
        let logits = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let loss = ce_loss(&logits, &[0]).unwrap();
        assert!((loss - 1.313262).abs() < 1e-6, "{loss}");
        assert!((loss - (1.0 + std::f64::consts::E).ln()).abs() < 1e-14);
        // A confident one-hot row drives the loss to numerical zero.
        let confident = Matrix::from_rows(&[vec![50.0, 0.0, 0.0]]).unwrap();
        assert!(ce_loss(&confident, &[0]).unwrap() < 1e-8);
        // Labels out of range are rejected.
        assert!(ce_loss(&logits, &[2]).is_err());
    }

    #[test]
    fn ce_graph_matches_scalar_and_grad_checks() {
        let mut rng = seeded_rng(5);
        let logits = Matrix::random_uniform(&mut rng, 6, 4, -2.0, 2.0);
        let labels = vec![0, 3, 1, 2, 2, 0];
        let mut tape = TapeGraph::new();
        let l = tape.leaf("logits", 6, 4);
        let root = ce_graph(&mut tape, l, &labels).unwrap();
        tape.set_root(root).unwrap();
        let mut b = Bindings::new();
        b.bind(l, logits.clone());
        let graph_val = tape.forward(&b).unwrap().get(0, 0);
        assert!((graph_val - ce_loss(&logits, &labels).unwrap()).abs() < 1e-12);
        let report = tape.grad_check(&b, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn mse_graph_matches_scalar() {
        let mut rng = seeded_rng(6);
        let pred = Matrix::random_uniform(&mut rng, 5, 3, -1.0, 1.0);
        let target = Matrix::random_uniform(&mut rng, 5, 3, -1.0, 1.0);
        let mut tape = TapeGraph::new();
        let p = tape.leaf("pred", 5, 3);
        let root = mse_graph(&mut tape, p, &target).unwrap();
        tape.set_root(root).unwrap();
        let mut b = Bindings::new();
        b.bind(p, pred.clone());
        let graph_val = tape.forward(&b).unwrap().get(0, 0);
        assert!((graph_val - mse_loss(&pred, &target).unwrap()).abs() < 1e-14);
        let report = tape.grad_check(&b, 1e-6).unwrap();
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn depth_metrics_match_hand_case() {
        let pred = Matrix::from_rows(&[vec![2.0], vec![4.0]]).unwrap();
        let gt = Matrix::from_rows(&[vec![1.0], vec![4.0]]).unwrap();
        let m = depth_metrics(&pred, &gt).unwrap();
        assert!((m.abs_rel - 0.5).abs() < 1e-15);
        assert!((m.sq_rel - 0.5).abs() < 1e-15);
        assert!((m.rms - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((m.rms_log - 2.0f64.ln() / 2.0f64.sqrt()).abs() < 1e-15);
        // Ratio 2.0 exceeds every threshold up to 1.25^3 = 1.953125, so only
        // the exact row counts toward each delta.
        assert_eq!(m.delta1, 0.5);
        assert_eq!(m.delta2, 0.5);
        assert_eq!(m.delta3, 0.5);
    }

    #[test]
    fn uniform_overestimate_hand_case() {
        // Every prediction 20% high: ratio 1.2 < 1.25 everywhere.
        let gt = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![5.0]]).unwrap();
        let pred = gt.scale(1.2);
        let m = depth_metrics(&pred, &gt).unwrap();
        assert!((m.abs_rel - 0.2).abs() < 1e-12);
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
        assert!((m.rms_log - 1.2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn delta_fractions_are_monotonic() {
        let mut rng = seeded_rng(33);
        for _ in 0..20 {
            let gt = Matrix::from_fn(30, 1, |_, _| 0.2 + rng.gen_range(0.0f64..5.0));
            let pred = Matrix::from_fn(30, 1, |r, _| {
                gt.get(r, 0) * rng.gen_range(0.3f64..3.0)
            });
            let m = depth_metrics(&pred, &gt).unwrap();
            assert!(m.delta1 <= m.delta2 && m.delta2 <= m.delta3);
        }
    }

    #[test]
    fn delta_thresholds_are_strict() {
        let pred = Matrix::from_rows(&[vec![1.25]]).unwrap();
        let gt = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let m = depth_metrics(&pred, &gt).unwrap();
        assert_eq!(m.delta1, 0.0, "ratio exactly 1.25 must not count");
        assert_eq!(m.delta2, 1.0);
        assert_eq!(m.delta3, 1.0);
    }

    #[test]
    fn perfect_depth_predictions_saturate_metrics() {
        let gt = Matrix::from_rows(&[vec![1.5], vec![3.0], vec![0.7]]).unwrap();
        let m = depth_metrics(&gt, &gt).unwrap();
        assert_eq!(m.abs_rel, 0.0);
        assert_eq!(m.rms, 0.0);
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn dataset_generation_is_deterministic_and_consistent() {
        let maps = maps();
        let a = synth_gen_from_maps(&maps, 42, 20).unwrap();
        let b = synth_gen_from_maps(&maps, 42, 20).unwrap();
        assert_eq!(a.x().max_abs_diff(b.x()), 0.0);
        assert_eq!(a.labels(), b.labels());
        let c = synth_gen_from_maps(&maps, 43, 20).unwrap();
        assert!(a.x().max_abs_diff(c.x()) > 0.0);

        // Targets recompute from latents.
        let reg = a.latents().matmul(maps.reg_map()).unwrap();
        assert!(reg.max_abs_diff(a.reg()) < 1e-15);
        for r in 0..a.len() {
            assert!(a.depth().get(r, 0) > 1.0, "depth must exceed 1");
            assert!(a.labels()[r] < a.classes());
        }
    }

    #[test]
    fn single_seed_generator_is_deterministic_and_validates() {
        let a = synth_gen(0, 50, 2, 6, 3).unwrap();
        let b = synth_gen(0, 50, 2, 6, 3).unwrap();
        assert_eq!(a.x().max_abs_diff(b.x()), 0.0);
        assert_eq!(a.labels(), b.labels());
        assert!(a.x().max_abs_diff(synth_gen(1, 50, 2, 6, 3).unwrap().x()) > 0.0);
        // The lift map must not lose latent dimensions.
        assert!(synth_gen(0, 10, 4, 3, 3).is_err());
    }

    #[test]
    fn class_labels_cover_every_class() {
        let ds = synth_gen(0, 1000, 2, 6, 3).unwrap();
        let mut seen = [false; 3];
        for &l in ds.labels() {
            seen[l] = true;
        }
        assert_eq!(seen, [true, true, true], "some class never sampled");
    }

    #[test]
    fn dataset_csv_round_trips_bitwise() {
        let ds = synth_gen_from_maps(&maps(), 9, 8).unwrap();
        let csv = ds.to_csv();
        let back = SynthDataset::from_csv(&csv).unwrap();
        assert_eq!(ds.len(), back.len());
        assert_eq!(ds.classes(), back.classes());
        assert_eq!(ds.labels(), back.labels());
        for (a, b) in ds.x().data().iter().zip(back.x().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in ds.depth().data().iter().zip(back.depth().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(SynthDataset::from_csv("garbage\n").is_err());
    }

    #[test]
    fn split_at_partitions_rows() {
        let ds = synth_gen_from_maps(&maps(), 3, 10).unwrap();
        let (a, b) = ds.split_at(4).unwrap();
        assert_eq!((a.len(), b.len()), (4, 6));
        assert_eq!(a.x().get(0, 0).to_bits(), ds.x().get(0, 0).to_bits());
        assert_eq!(b.x().get(0, 0).to_bits(), ds.x().get(4, 0).to_bits());
        assert_eq!(b.labels()[0], ds.labels()[4]);
        assert!(ds.split_at(0).is_err());
        assert!(ds.split_at(10).is_err());
    }

    #[test]
    fn accuracy_and_task_parsing() {
        let logits = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0], vec![3.0, 1.0]]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&logits, &[1, 1, 0]).unwrap(), 2.0 / 3.0);
        assert_eq!(TaskKind::parse("depth").unwrap(), TaskKind::Depth);
        assert_eq!(TaskKind::parse("class").unwrap(), TaskKind::Classification);
        assert_eq!(TaskKind::parse("reg").unwrap(), TaskKind::Regression);
        assert!(TaskKind::parse("prose").is_err());
        assert_eq!(TaskKind::Depth.output_width(4), 1);
        assert_eq!(TaskKind::Classification.output_width(4), 4);
        assert_eq!(TaskKind::Regression.output_width(4), TARGET_DIM);
    }

    #[test]
    fn evaluate_dispatches_per_task() {
        let ds = synth_gen_from_maps(&maps(), 11, 12).unwrap();
        let log_depth = Matrix::from_fn(12, 1, |r, _| ds.depth().get(r, 0).ln());
        let rep = evaluate(TaskKind::Depth, &log_depth, &ds).unwrap();
        assert!(rep.task_loss < 1e-9);
        match rep.detail {
            MetricDetail::Depth(m) => assert_eq!(m.delta1, 1.0),
            other => panic!("wrong detail {other:?}"),
        }
        assert_eq!(
            MetricsReport::detail_columns(TaskKind::Depth).len(),
            rep.detail_values().len()
        );
    }
}

//! Self-contained numerical audits.
//!
//! [`grad_audit`] runs central finite-difference checks over every tape
//! operation and every loss graph the crate can build, across many seeds.
//! [`bound_audit`] stress-tests the decoupled distillation bound on random
//! instances plus the two tightness degeneracies (matched features and a
//! zero projector).

use std::fmt::Write as _;

use rand::Rng as _;

use crate::autodiff::{Bindings, NodeId, TapeGraph};
use crate::distill::{distill_loss_graph, DistillMethod, Projector, ProjectorDirection};
use crate::error::Result;
use crate::linalg::{svd, Matrix};
use crate::spectral::{decoupled_bound, BoundReport};
use crate::tasks::{ce_graph, mse_graph, silog_graph};
use crate::util::{component_seed, fmt_f64_exact, seeded_rng, CsvTable, Rng};

/// Seeds per gradient-audit case.
pub const GRAD_AUDIT_SEEDS: u64 = 20;
/// Central-difference step used for all gradient checks.
pub const GRAD_AUDIT_EPS: f64 = 1e-6;
/// Relative-error tolerance for ordinary operations and losses.
pub const GRAD_AUDIT_TOL: f64 = 1e-4;
/// Looser tolerance for the fixed-subspace spectral-tail gradient.
pub const GRAD_AUDIT_SPECTRAL_TOL: f64 = 1e-3;
/// Slack below this is a genuine bound violation, not float noise.
pub const BOUND_SLACK_FLOOR: f64 = -1e-9;
/// Degenerate instances must be tight to within this.
pub const BOUND_TIGHT_TOL: f64 = 1e-10;

/// One finite-difference audit case, aggregated over its seeds.
#[derive(Debug, Clone)]
pub struct GradAuditItem {
    pub name: String,
    /// `"op"` for raw tape operations, `"loss"` for loss graphs.
    pub kind: &'static str,
    pub tol: f64,
    pub seeds: u64,
    /// Worst relative error seen across all seeds and entries.
    pub max_rel_err: f64,
    /// Leaf entries compared (summed over seeds).
    pub checked: usize,
    /// Entries skipped because both sides vanished (summed over seeds).
    pub skipped: usize,
    pub passed: bool,
}

/// All gradient-audit cases.
#[derive(Debug, Clone)]
pub struct GradAuditReport {
    pub items: Vec<GradAuditItem>,
}

impl GradAuditReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }

    /// Worst relative error over all cases.
    pub fn max_rel_err(&self) -> f64 {
        self.items.iter().fold(0.0, |m, i| m.max(i.max_rel_err))
    }

    /// CSV rendering with one row per case.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,name,tol,seeds,checked,skipped,max_rel_err,passed\n");
        for item in &self.items {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                item.kind,
                item.name,
                fmt_f64_exact(item.tol),
                item.seeds,
                item.checked,
                item.skipped,
                fmt_f64_exact(item.max_rel_err),
                u8::from(item.passed),
            );
        }
        out
    }
}

/// Binds a fresh uniform random leaf and returns its node.
fn rand_leaf(
    tape: &mut TapeGraph,
    bindings: &mut Bindings,
    rng: &mut Rng,
    name: &str,
    rows: usize,
    cols: usize,
    lo: f64,
    hi: f64,
) -> NodeId {
    let id = tape.leaf(name, rows, cols);
    bindings.bind(id, Matrix::random_uniform(rng, rows, cols, lo, hi));
    id
}

/// Leaf whose entries keep a minimum magnitude, for kinked or
/// normalization-sensitive operations: values are `sign * U(floor, hi)`.
fn rand_leaf_away_from_zero(
    tape: &mut TapeGraph,
    bindings: &mut Bindings,
    rng: &mut Rng,
    name: &str,
    rows: usize,
    cols: usize,
    floor: f64,
    hi: f64,
) -> NodeId {
    let id = tape.leaf(name, rows, cols);
    let value = Matrix::from_fn(rows, cols, |_, _| {
        let mag = rng.gen_range(floor..hi);
        if rng.gen_range(0.0..1.0) < 0.5 {
            -mag
        } else {
            mag
        }
    });
    bindings.bind(id, value);
    id
}

/// Reduces an arbitrary node to a scalar root through fixed random weights,
/// so every output entry contributes to the checked gradient.
fn scalarize(tape: &mut TapeGraph, rng: &mut Rng, node: NodeId) -> Result<NodeId> {
    let (rows, cols) = tape.shape(node);
    let weights = tape.constant(Matrix::random_uniform(rng, rows, cols, -1.0, 1.0));
    let weighted = tape.hadamard(node, weights)?;
    tape.sum(weighted)
}

/// Matrix with prescribed singular values and random orthonormal factors.
fn spread_spectrum_matrix(rng: &mut Rng, rows: usize, cols: usize, sigma: &[f64]) -> Result<Matrix> {
    let factors = svd(&Matrix::random_uniform(rng, rows, cols, -1.0, 1.0))?;
    let mut out = Matrix::zeros(rows, cols);
    for (i, &s) in sigma.iter().enumerate() {
        for a in 0..rows {
            let coef = s * factors.u.get(a, i);
            for b in 0..cols {
                out.set(a, b, out.get(a, b) + coef * factors.v.get(b, i));
            }
        }
    }
    Ok(out)
}

/// Runs one audit case over all seeds; `build` lays out the tape, binds all
/// leaves and returns the node that is scalarized (or already scalar).
fn audit_case(
    name: &str,
    kind: &'static str,
    tol: f64,
    mut build: impl FnMut(&mut TapeGraph, &mut Bindings, &mut Rng) -> Result<NodeId>,
) -> Result<GradAuditItem> {
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for seed in 0..GRAD_AUDIT_SEEDS {
        let mut rng = seeded_rng(component_seed(seed, &format!("grad-audit-{name}")));
        let mut tape = TapeGraph::new();
        let mut bindings = Bindings::new();
        let node = build(&mut tape, &mut bindings, &mut rng)?;
        let root = if tape.shape(node) == (1, 1) {
            node
        } else {
            scalarize(&mut tape, &mut rng, node)?
        };
        tape.set_root(root)?;
        let report = tape.grad_check(&bindings, GRAD_AUDIT_EPS)?;
        max_rel_err = max_rel_err.max(report.max_rel_err);
        checked += report.checked;
        skipped += report.skipped;
    }
    Ok(GradAuditItem {
        name: name.to_string(),
        kind,
        tol,
        seeds: GRAD_AUDIT_SEEDS,
        max_rel_err,
        checked,
        skipped,
        passed: max_rel_err < tol,
    })
}

/// Finite-difference audit of every tape operation and every loss graph.
///
/// Each case rebuilds a fresh small graph per seed, binds random leaves in a
/// domain where the operation is smooth (away from the ReLU kink, with
/// positive inputs for `log`/`sqrt`, away from spectral degeneracies), and
/// compares analytic leaf gradients against central differences.
pub fn grad_audit() -> Result<GradAuditReport> {
    let mut items = Vec::new();
    let tol = GRAD_AUDIT_TOL;

    // ---- raw tape operations -------------------------------------------
    items.push(audit_case("matmul", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 4, 3, -1.0, 1.0);
        let b = rand_leaf(t, bi, rng, "b", 3, 5, -1.0, 1.0);
        t.matmul(a, b)
    })?);
    items.push(audit_case("transpose", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 3, 4, -1.0, 1.0);
        t.transpose(a)
    })?);
    items.push(audit_case("add", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 4, 4, -1.0, 1.0);
        let b = rand_leaf(t, bi, rng, "b", 4, 4, -1.0, 1.0);
        t.add(a, b)
    })?);
    items.push(audit_case("sub", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 4, 4, -1.0, 1.0);
        let b = rand_leaf(t, bi, rng, "b", 4, 4, -1.0, 1.0);
        t.sub(a, b)
    })?);
    items.push(audit_case("scalar_mul", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 3, 3, -1.0, 1.0);
        t.scalar_mul(a, 1.7)
    })?);
    items.push(audit_case("add_row_broadcast", "op", tol, |t, bi, rng| {
        let x = rand_leaf(t, bi, rng, "x", 4, 5, -1.0, 1.0);
        let row = rand_leaf(t, bi, rng, "row", 1, 5, -1.0, 1.0);
        t.add_row_broadcast(x, row)
    })?);
    items.push(audit_case("hadamard", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 4, 4, -1.0, 1.0);
        let b = rand_leaf(t, bi, rng, "b", 4, 4, -1.0, 1.0);
        t.hadamard(a, b)
    })?);
    items.push(audit_case("tanh", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 4, 4, -2.0, 2.0);
        t.tanh(a)
    })?);
    items.push(audit_case("relu", "op", tol, |t, bi, rng| {
        // Entries keep magnitude >= 0.2 so the finite-difference probe never
        // crosses the kink.
        let a = rand_leaf_away_from_zero(t, bi, rng, "a", 4, 4, 0.2, 2.0);
        t.relu(a)
    })?);
    items.push(audit_case("log", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 4, 4, 0.5, 3.0);
        t.log(a)
    })?);
    items.push(audit_case("exp", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 4, 4, -1.5, 1.5);
        t.exp(a)
    })?);
    items.push(audit_case("sqrt", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 4, 4, 0.5, 3.0);
        t.sqrt(a)
    })?);
    items.push(audit_case("row_softmax", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 4, 5, -2.0, 2.0);
        t.row_softmax(a)
    })?);
    items.push(audit_case("row_l2_normalize", "op", tol, |t, bi, rng| {
        let a = rand_leaf_away_from_zero(t, bi, rng, "a", 4, 5, 0.3, 1.5);
        t.row_l2_normalize(a)
    })?);
    items.push(audit_case("row_sum_normalize", "op", tol, |t, bi, rng| {
        // Positive entries keep row sums far above the clamp floor.
        let a = rand_leaf(t, bi, rng, "a", 4, 5, 0.3, 1.5);
        t.row_sum_normalize(a)
    })?);
    items.push(audit_case("squared_frob_diff", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 4, 4, -1.0, 1.0);
        let b = rand_leaf(t, bi, rng, "b", 4, 4, -1.0, 1.0);
        t.squared_frob_diff(a, b)
    })?);
    items.push(audit_case("sum", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 3, 4, -1.0, 1.0);
        t.sum(a)
    })?);
    items.push(audit_case("mean", "op", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 3, 4, -1.0, 1.0);
        t.mean(a)
    })?);
    items.push(audit_case(
        "spectral_tail",
        "op",
        GRAD_AUDIT_SPECTRAL_TOL,
        |t, bi, rng| {
            // Prescribed singular values keep a wide gap around the cut, so
            // the fixed-subspace gradient is the exact derivative locally.
            let value = spread_spectrum_matrix(rng, 6, 4, &[3.0, 2.2, 1.5, 0.9])?;
            let a = t.leaf("a", 6, 4);
            bi.bind(a, value);
            t.spectral_tail(a, 2)
        },
    )?);

    // ---- loss graphs ----------------------------------------------------
    items.push(audit_case("fitnets", "loss", tol, |t, bi, rng| {
        let a = rand_leaf(t, bi, rng, "a", 5, 6, -1.0, 1.0);
        let b = rand_leaf(t, bi, rng, "b", 5, 6, -1.0, 1.0);
        distill_loss_graph(t, DistillMethod::FitNets, a, b)
    })?);
    items.push(audit_case("at", "loss", tol, |t, bi, rng| {
        let a = rand_leaf_away_from_zero(t, bi, rng, "a", 5, 6, 0.2, 1.0);
        let b = rand_leaf_away_from_zero(t, bi, rng, "b", 5, 6, 0.2, 1.0);
        distill_loss_graph(t, DistillMethod::At, a, b)
    })?);
    items.push(audit_case("pkt", "loss", tol, |t, bi, rng| {
        let a = rand_leaf_away_from_zero(t, bi, rng, "a", 6, 5, 0.2, 1.0);
        let b = rand_leaf_away_from_zero(t, bi, rng, "b", 6, 5, 0.2, 1.0);
        distill_loss_graph(t, DistillMethod::Pkt, a, b)
    })?);
    items.push(audit_case("ensemble", "loss", tol, |t, bi, rng| {
        // Three member projectors align the teacher batch; the loss is the
        // member mean, with gradients flowing into both feature leaves and
        // every projector leaf.
        let z_s = rand_leaf(t, bi, rng, "z_s", 5, 4, -1.0, 1.0);
        let z_t = rand_leaf(t, bi, rng, "z_t", 5, 8, -1.0, 1.0);
        let mut total = None;
        for m in 0..3 {
            let p = rand_leaf(t, bi, rng, &format!("p{m}"), 8, 4, -0.5, 0.5);
            let aligned = t.matmul(z_t, p)?;
            let member = distill_loss_graph(t, DistillMethod::FitNets, z_s, aligned)?;
            total = Some(match total {
                None => member,
                Some(acc) => t.add(acc, member)?,
            });
        }
        t.scalar_mul(total.expect("three members"), 1.0 / 3.0)
    })?);
    items.push(audit_case("ce", "loss", tol, |t, bi, rng| {
        let logits = rand_leaf(t, bi, rng, "logits", 5, 4, -2.0, 2.0);
        let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
        ce_graph(t, logits, &labels)
    })?);
    items.push(audit_case("silog", "loss", tol, |t, bi, rng| {
        let pred_log = rand_leaf(t, bi, rng, "pred_log", 6, 1, -1.0, 1.0);
        let depth = Matrix::from_fn(6, 1, |_, _| rng.gen_range(-1.0..1.0f64).exp());
        silog_graph(t, pred_log, &depth)
    })?);
    items.push(audit_case("mse", "loss", tol, |t, bi, rng| {
        let pred = rand_leaf(t, bi, rng, "pred", 6, 2, -1.0, 1.0);
        let target = Matrix::random_uniform(rng, 6, 2, -1.0, 1.0);
        mse_graph(t, pred, &target)
    })?);
    items.push(audit_case(
        "spectral-tail-loss",
        "loss",
        GRAD_AUDIT_SPECTRAL_TOL,
        |t, bi, rng| {
            let value = spread_spectrum_matrix(rng, 8, 5, &[2.5, 1.8, 1.2, 0.7, 0.3])?;
            let z = t.leaf("weights", 8, 5);
            bi.bind(z, value);
            t.spectral_tail(z, 3)
        },
    )?);

    Ok(GradAuditReport { items })
}

/// Shapes used by the randomized bound audit.
const BOUND_BATCH: usize = 8;
const BOUND_D_S: usize = 6;
const BOUND_D_T: usize = 10;
const BOUND_FORCED_RANK: usize = 3;

/// Outcome of the randomized decoupled-bound audit.
#[derive(Debug, Clone)]
pub struct BoundAuditReport {
    /// Number of random instances.
    pub n: usize,
    /// Active-set tolerance passed to the bound.
    pub tol: f64,
    /// One report per random instance, in generation order.
    pub reports: Vec<BoundReport>,
    pub min_slack: f64,
    pub max_slack: f64,
    /// Instances with slack below [`BOUND_SLACK_FLOOR`].
    pub violations: usize,
    /// Degenerate instance with student features equal to the projected
    /// teacher features; its slack must vanish.
    pub same_features: BoundReport,
    /// Degenerate instance with a zero projector; its slack must vanish.
    pub zero_projector: BoundReport,
    pub passed: bool,
}

impl BoundAuditReport {
    /// CSV rendering: the random instances followed by the two degeneracies.
    /// `kind` is 0 for random, 1 for matched features, 2 for zero projector.
    pub fn to_table(&self) -> Result<CsvTable> {
        let mut table = CsvTable::new(vec![
            "instance",
            "kind",
            "lhs",
            "knowledge_transfer",
            "regularization",
            "slack",
            "k_set_size",
        ]);
        let rows = self
            .reports
            .iter()
            .map(|r| (0.0, r))
            .chain([(1.0, &self.same_features), (2.0, &self.zero_projector)]);
        for (i, (kind, r)) in rows.enumerate() {
            table.push_row(vec![
                i as f64,
                kind,
                r.lhs,
                r.knowledge_transfer,
                r.regularization,
                r.slack,
                r.k_set_size as f64,
            ])?;
        }
        Ok(table)
    }
}

/// Randomized audit of [`decoupled_bound`].
///
/// Draws `n` instances with an `8x6` student batch, an `8x10` teacher batch
/// and a `10x6` inverted projector whose rank is forced to 3 by zeroing all
/// but its three leading singular values, and verifies the triangle
/// inequality `kt + reg >= lhs` up to [`BOUND_SLACK_FLOOR`].  Two degenerate
/// instances must additionally be tight to [`BOUND_TIGHT_TOL`]: student
/// features equal to the projected teacher features (the knowledge-transfer
/// term covers everything) and a zero projector (the regularization term is
/// the whole distance).
pub fn bound_audit(n: usize, tol: f64, seed: u64) -> Result<BoundAuditReport> {
    let mut reports = Vec::with_capacity(n);
    let mut min_slack = f64::INFINITY;
    let mut max_slack = f64::NEG_INFINITY;
    let mut violations = 0;
    for i in 0..n {
        let mut rng = seeded_rng(component_seed(seed, &format!("bound-audit-{i}")));
        let z_s = Matrix::random_uniform(&mut rng, BOUND_BATCH, BOUND_D_S, -1.0, 1.0);
        let z_t = Matrix::random_uniform(&mut rng, BOUND_BATCH, BOUND_D_T, -1.0, 1.0);
        let raw = Matrix::random_uniform(&mut rng, BOUND_D_T, BOUND_D_S, -1.0, 1.0);
        let weights = svd(&raw)?.truncated_reconstruct(BOUND_FORCED_RANK)?;
        let p = Projector::from_weights(
            ProjectorDirection::Inverted,
            BOUND_D_S,
            BOUND_D_T,
            weights,
        )?;
        let report = decoupled_bound(&z_s, &z_t, &p, tol)?;
        min_slack = min_slack.min(report.slack);
        max_slack = max_slack.max(report.slack);
        if report.slack < BOUND_SLACK_FLOOR {
            violations += 1;
        }
        reports.push(report);
    }

    // Degeneracy 1: student features equal the projected teacher features.
    let mut rng = seeded_rng(component_seed(seed, "bound-audit-same"));
    let z_t = Matrix::random_uniform(&mut rng, BOUND_BATCH, BOUND_D_T, -1.0, 1.0);
    let p = Projector::from_weights(
        ProjectorDirection::Inverted,
        BOUND_D_S,
        BOUND_D_T,
        Matrix::random_uniform(&mut rng, BOUND_D_T, BOUND_D_S, -1.0, 1.0),
    )?;
    let z_s = z_t.matmul(p.weights())?;
    let same_features = decoupled_bound(&z_s, &z_t, &p, tol)?;

    // Degeneracy 2: zero projector, empty active set.
    let mut rng = seeded_rng(component_seed(seed, "bound-audit-zero"));
    let z_s = Matrix::random_uniform(&mut rng, BOUND_BATCH, BOUND_D_S, -1.0, 1.0);
    let z_t = Matrix::random_uniform(&mut rng, BOUND_BATCH, BOUND_D_T, -1.0, 1.0);
    let p = Projector::from_weights(
        ProjectorDirection::Inverted,
        BOUND_D_S,
        BOUND_D_T,
        Matrix::zeros(BOUND_D_T, BOUND_D_S),
    )?;
    let zero_projector = decoupled_bound(&z_s, &z_t, &p, tol)?;

    let passed = violations == 0
        && min_slack >= BOUND_SLACK_FLOOR
        && same_features.slack.abs() <= BOUND_TIGHT_TOL
        && zero_projector.slack.abs() <= BOUND_TIGHT_TOL;
    Ok(BoundAuditReport {
        n,
        tol,
        reports,
        min_slack,
        max_slack,
        violations,
        same_features,
        zero_projector,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_audit_passes_every_case() {
        let report = grad_audit().expect("audit runs");
        assert!(report.items.len() >= 25, "expected a broad case list");
        for item in &report.items {
            assert!(
                item.passed,
                "{} {} failed: max_rel_err {} >= tol {}",
                item.kind, item.name, item.max_rel_err, item.tol
            );
            assert!(item.checked > 0, "{} checked nothing", item.name);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("kind,name,"));
        assert_eq!(csv.lines().count(), report.items.len() + 1);
    }

    #[test]
    fn bound_audit_has_no_violations_and_tight_degeneracies() {
        let report = bound_audit(50, 1e-6, 7).expect("audit runs");
        assert!(report.passed);
        assert_eq!(report.violations, 0);
        assert!(report.min_slack >= BOUND_SLACK_FLOOR);
        assert!(report.same_features.slack.abs() <= BOUND_TIGHT_TOL);
        assert!(report.zero_projector.slack.abs() <= BOUND_TIGHT_TOL);
        // The zero projector leaves the whole distance to the
        // regularization term.
        assert_eq!(report.zero_projector.k_set_size, 0);
        assert!(report.zero_projector.knowledge_transfer.abs() <= BOUND_TIGHT_TOL);
        assert_eq!(report.reports.len(), 50);
        let table = report.to_table().expect("table renders");
        assert_eq!(table.rows().len(), 52);
    }

    #[test]
    fn bound_audit_is_deterministic() {
        let a = bound_audit(10, 1e-6, 3).expect("first run");
        let b = bound_audit(10, 1e-6, 3).expect("second run");
        for (x, y) in a.reports.iter().zip(&b.reports) {
            assert_eq!(x.slack.to_bits(), y.slack.to_bits());
        }
    }
}

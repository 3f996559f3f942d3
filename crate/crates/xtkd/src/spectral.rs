//! Spectral view of feature matrices: the teacher-free tail penalty, its
//! fixed-subspace gradient, the decoupled distillation bound, and spectrum
//! traces recorded over training.
//!
//! The central quantity is the *tail reconstruction* of a feature matrix
//! `Z`: with thin SVD `Z = sum_i sigma_i u_i v_i^T` (1-based `i`), the tail
//! at cut `r` is `T_r(Z) = sum_{i >= r} sigma_i u_i v_i^T`.  The spectral
//! regularisation loss is `||T_r(Z)||_F`; `r = 1` penalises the whole
//! spectrum, so the loss equals `||Z||_F` there.

use crate::distill::{Projector, ProjectorDirection};
use crate::error::{Error, Result};
use crate::linalg::{effective_rank, svd, Matrix};
use crate::util::fmt_f64_exact;
use std::io::Write as _;
use std::path::Path;

/// Relative singular-gap threshold below which the fixed-subspace gradient
/// is considered undefined.
const GAP_THRESHOLD_REL: f64 = 1e-8;

/// Denominator clamp for the gradient of a vanishing tail.
const NORM_CLAMP: f64 = 1e-12;

/// Default relative tolerance for effective-rank readings in spectrum
/// traces and plots.
pub const SPECTRUM_RANK_TOL: f64 = 1e-2;

/// Tail reconstruction of `z` at 1-based cut `r`, together with its
/// Frobenius norm and the full spectrum.  Shared by the loss, the gradient,
/// and the autodiff tail operation.
pub(crate) struct TailParts {
    pub tail: Matrix,
    pub norm: f64,
    pub sigma: Vec<f64>,
}

pub(crate) fn tail_parts(z: &Matrix, r: usize) -> Result<TailParts> {
    let max_r = z.rows().min(z.cols());
    if r < 1 || r > max_r {
        return Err(Error::OutOfRange {
            what: "spectral cut r",
            got: r.to_string(),
            allowed: format!("1..={max_r}"),
        });
    }
    let s = svd(z)?;
    let tail = s.tail_reconstruct(r - 1)?;
    let norm = tail.frob_norm();
    Ok(TailParts {
        tail,
        norm,
        sigma: s.sigma,
    })
}

/// Checks the singular gap the fixed-subspace rule needs at cut `r`:
/// `sigma[r-1] - sigma[r] > 1e-8 * sigma[1]` in 1-based indices.  `r = 1`
/// keeps nothing, so no gap is required.
pub(crate) fn check_gap(sigma: &[f64], r: usize) -> Result<()> {
    if r < 2 {
        return Ok(());
    }
    let gap = sigma[r - 2] - sigma[r - 1];
    let threshold = GAP_THRESHOLD_REL * sigma[0];
    if gap <= threshold {
        return Err(Error::DegenerateGap { r, gap, threshold });
    }
    Ok(())
}

/// Teacher-free spectral regularisation loss `||T_r(z)||_F`: the Frobenius
/// norm of the feature spectrum with the top `r - 1` components removed.
pub fn spectral_reg_loss(z: &Matrix, r: usize) -> Result<f64> {
    Ok(tail_parts(z, r)?.norm)
}

/// Gradient of [`spectral_reg_loss`] under the fixed-subspace rule:
/// `T_r(z) / max(||T_r(z)||_F, 1e-12)`.
///
/// Requires a non-degenerate singular gap at the cut (see
/// [`Error::DegenerateGap`]); callers that train with this loss should skip
/// the regulariser for the step when that error is returned.
pub fn spectral_reg_grad(z: &Matrix, r: usize) -> Result<Matrix> {
    let parts = tail_parts(z, r)?;
    check_gap(&parts.sigma, r)?;
    Ok(parts.tail.scale(1.0 / parts.norm.max(NORM_CLAMP)))
}

/// Report produced by [`decoupled_bound`]: the distillation distance
/// `lhs = ||Z_s - Z_t P||_F` against the two terms of its upper bound.
#[derive(Debug, Clone)]
pub struct BoundReport {
    /// Knowledge-transfer term: distance between the paired spectra over the
    /// projected teacher's active components.
    pub knowledge_transfer: f64,
    /// Regularisation term: norm of the student components outside that set.
    pub regularization: f64,
    /// The raw distillation distance.
    pub lhs: f64,
    /// `knowledge_transfer + regularization - lhs`; non-negative up to float
    /// error by the triangle inequality.
    pub slack: f64,
    /// Number of active components retained from the projected teacher.
    pub k_set_size: usize,
}

/// Splits the distillation distance `||Z_s - Z_t P||_F` into
/// knowledge-transfer and regularisation terms via the spectra of both
/// sides.
///
/// With `Zbar = Z_t P`, let `k` be the indices whose projected-teacher
/// singular values satisfy `sigma_bar_i >= tol * sigma_bar_1` (an empty set
/// when `Zbar = 0`).  Then
///
/// * `knowledge_transfer = || sum_{i in k} (sigma_bar_i ubar_i vbar_i^T
///    - sigma_i u_i v_i^T) ||_F`,
/// * `regularization   = || sum_{i not in k} sigma_i u_i v_i^T ||_F`,
///
/// where un-barred triples come from `Z_s`.  The projector must be
/// [`ProjectorDirection::Inverted`] so both sides live in the student's
/// feature space.
pub fn decoupled_bound(
    z_s: &Matrix,
    z_t: &Matrix,
    p: &Projector,
    tol: f64,
) -> Result<BoundReport> {
    if p.direction() != ProjectorDirection::Inverted {
        return Err(Error::Contract(
            "decoupled_bound requires an inverted projector (teacher -> student space)"
                .to_string(),
        ));
    }
    if !(tol > 0.0) {
        return Err(Error::OutOfRange {
            what: "bound tolerance",
            got: tol.to_string(),
            allowed: "> 0".to_string(),
        });
    }
    let z_bar = z_t.matmul(p.weights())?;
    if z_bar.shape() != z_s.shape() {
        return Err(Error::shape("decoupled_bound", z_s.shape(), z_bar.shape()));
    }
    let s_s = svd(z_s)?;
    let s_bar = svd(&z_bar)?;
    let r = s_s.sigma.len();

    // Active set of the projected teacher spectrum.
    let k_set_size = effective_rank(&s_bar.sigma, tol)?;

    let (m, n) = z_s.shape();
    let mut kt = Matrix::zeros(m, n);
    let mut reg = Matrix::zeros(m, n);
    for i in 0..r {
        if i < k_set_size {
            add_rank_one(&mut kt, s_bar.sigma[i], &s_bar.u, &s_bar.v, i, 1.0);
            add_rank_one(&mut kt, s_s.sigma[i], &s_s.u, &s_s.v, i, -1.0);
        } else {
            add_rank_one(&mut reg, s_s.sigma[i], &s_s.u, &s_s.v, i, 1.0);
        }
    }
    let knowledge_transfer = kt.frob_norm();
    let regularization = reg.frob_norm();
    let lhs = z_s.sub(&z_bar)?.frob_norm();
    Ok(BoundReport {
        knowledge_transfer,
        regularization,
        lhs,
        slack: knowledge_transfer + regularization - lhs,
        k_set_size,
    })
}

/// `out += sign * sigma_i * u_i * v_i^T`.
fn add_rank_one(out: &mut Matrix, sigma: f64, u: &Matrix, v: &Matrix, i: usize, sign: f64) {
    let n = v.rows();
    let vcol: Vec<f64> = (0..n).map(|b| v.get(b, i)).collect();
    for a in 0..out.rows() {
        let coef = sign * sigma * u.get(a, i);
        let row = out.row_mut(a);
        for (o, &vb) in row.iter_mut().zip(&vcol) {
            *o += coef * vb;
        }
    }
}

/// Projector spectrum recorded across training epochs.
///
/// Each record stores the raw singular values of the projector weights, the
/// spectrum normalized by its leading value, and the effective rank at
/// [`SPECTRUM_RANK_TOL`].  A zero projector records an all-zero normalized
/// spectrum and effective rank 0.
#[derive(Debug, Clone, Default)]
pub struct SpectrumTrace {
    pub epochs: Vec<usize>,
    pub eff_ranks: Vec<usize>,
    pub normalized: Vec<Vec<f64>>,
    pub raw: Vec<Vec<f64>>,
}

impl SpectrumTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Final effective rank, if anything was recorded.
    pub fn final_eff_rank(&self) -> Option<usize> {
        self.eff_ranks.last().copied()
    }

    /// Serializes as CSV: `epoch, eff_rank, sigma_0.. (normalized),
    /// raw_sigma_0..`.
    pub fn to_csv(&self) -> String {
        let width = self.raw.first().map_or(0, Vec::len);
        let mut out = String::from("epoch,eff_rank");
        for i in 0..width {
            out.push_str(&format!(",sigma_{i}"));
        }
        for i in 0..width {
            out.push_str(&format!(",raw_sigma_{i}"));
        }
        out.push('\n');
        for row in 0..self.len() {
            out.push_str(&format!("{},{}", self.epochs[row], self.eff_ranks[row]));
            for x in &self.normalized[row] {
                out.push_str(&format!(",{}", fmt_f64_exact(*x)));
            }
            for x in &self.raw[row] {
                out.push_str(&format!(",{}", fmt_f64_exact(*x)));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Parses the [`SpectrumTrace::to_csv`] format.
    pub fn from_csv(text: &str) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            what: "spectrum trace csv",
            message,
        };
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| parse_err("empty file".to_string()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"epoch") || cols.get(1) != Some(&"eff_rank") {
            return Err(parse_err(format!("unexpected header {header:?}")));
        }
        let width = cols.iter().filter(|c| c.starts_with("raw_sigma_")).count();
        let mut trace = SpectrumTrace::new();
        for (lineno, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 + 2 * width {
                return Err(parse_err(format!(
                    "row {lineno}: {} fields, expected {}",
                    fields.len(),
                    2 + 2 * width
                )));
            }
            let bad = |e: String| parse_err(format!("row {lineno}: {e}"));
            trace
                .epochs
                .push(fields[0].parse().map_err(|e| bad(format!("{e}")))?);
            trace
                .eff_ranks
                .push(fields[1].parse().map_err(|e| bad(format!("{e}")))?);
            let floats = |slice: &[&str]| -> Result<Vec<f64>> {
                slice
                    .iter()
                    .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{e}"))))
                    .collect()
            };
            trace.normalized.push(floats(&fields[2..2 + width])?);
            trace.raw.push(floats(&fields[2 + width..])?);
        }
        Ok(trace)
    }
}

/// Appends the projector's current spectrum to `trace` under `epoch`.
pub fn track_spectrum(p: &Projector, epoch: usize, trace: &mut SpectrumTrace) -> Result<()> {
    if let Some(&last) = trace.epochs.last() {
        if epoch <= last {
            return Err(Error::Contract(format!(
                "spectrum trace epochs must increase: got {epoch} after {last}"
            )));
        }
    }
    let s = svd(p.weights())?;
    let top = s.sigma[0];
    let normalized: Vec<f64> = if top == 0.0 {
        vec![0.0; s.sigma.len()]
    } else {
        s.sigma.iter().map(|&x| x / top).collect()
    };
    trace.eff_ranks.push(effective_rank(&s.sigma, SPECTRUM_RANK_TOL)?);
    trace.epochs.push(epoch);
    trace.normalized.push(normalized);
    trace.raw.push(s.sigma);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    fn diag(values: &[f64]) -> Matrix {
        let n = values.len();
        Matrix::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    #[test]
    fn cut_one_equals_frobenius_norm() {
        let mut rng = seeded_rng(4);
        for _ in 0..10 {
            let z = Matrix::random_uniform(&mut rng, 5, 3, -2.0, 2.0);
            let loss = spectral_reg_loss(&z, 1).unwrap();
            assert!((loss - z.frob_norm()).abs() < 1e-10);
        }
    }

    #[test]
    fn tail_loss_matches_hand_spectrum() {
        // diag(3,2,1): cutting at r=2 keeps sigma_2=2 and sigma_3=1 in the
        // tail, so the loss is sqrt(4+1) = sqrt(5).
        let z = diag(&[3.0, 2.0, 1.0]);
        let loss = spectral_reg_loss(&z, 2).unwrap();
        assert!((loss - 5.0f64.sqrt()).abs() < 1e-12, "loss = {loss}");
        let l3 = spectral_reg_loss(&z, 3).unwrap();
        assert!((l3 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_matrix_has_zero_tail_at_cut_two() {
        // [[1,2],[1,2]] is exactly rank 1.
        let z = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let loss = spectral_reg_loss(&z, 2).unwrap();
        assert!(loss.abs() < 1e-10, "loss = {loss}");
        // The clamped denominator keeps the gradient at (numerically) zero.
        let g = spectral_reg_grad(&z, 2).unwrap();
        assert!(g.frob_norm() < 1e-3, "grad norm = {}", g.frob_norm());
    }

    #[test]
    fn loss_is_non_increasing_in_r() {
        let mut rng = seeded_rng(8);
        let z = Matrix::random_uniform(&mut rng, 6, 4, -1.0, 1.0);
        let mut prev = f64::INFINITY;
        for r in 1..=4 {
            let loss = spectral_reg_loss(&z, r).unwrap();
            assert!(loss <= prev + 1e-12, "loss increased at r={r}");
            prev = loss;
        }
    }

    #[test]
    fn gradient_matches_hand_case() {
        // diag(3,2,1) at r=2: tail = diag(0,2,1), norm sqrt(5), so the
        // gradient is diag(0, 2/sqrt(5), 1/sqrt(5)).
        let z = diag(&[3.0, 2.0, 1.0]);
        let g = spectral_reg_grad(&z, 2).unwrap();
        let expect = diag(&[0.0, 2.0 / 5.0f64.sqrt(), 1.0 / 5.0f64.sqrt()]);
        assert!(g.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn degenerate_gap_is_rejected() {
        // sigma_1 == sigma_2, so cutting between them is ill-posed.
        let z = diag(&[2.0, 2.0, 1.0]);
        match spectral_reg_grad(&z, 2) {
            Err(Error::DegenerateGap { r, .. }) => assert_eq!(r, 2),
            other => panic!("expected DegenerateGap, got {other:?}"),
        }
        // A clear gap at the cut is fine even with ties elsewhere.
        assert!(spectral_reg_grad(&z, 3).is_ok());
        // r = 1 needs no gap at all.
        assert!(spectral_reg_grad(&z, 1).is_ok());
    }

    #[test]
    fn out_of_range_cut_is_rejected() {
        let z = Matrix::zeros(4, 3);
        assert!(spectral_reg_loss(&z, 0).is_err());
        assert!(spectral_reg_loss(&z, 4).is_err());
        assert!(spectral_reg_loss(&z, 3).is_ok());
    }

    #[test]
    fn spectrum_trace_round_trips_through_csv() {
        let mut trace = SpectrumTrace::new();
        trace.epochs = vec![0, 1];
        trace.eff_ranks = vec![2, 1];
        trace.normalized = vec![vec![1.0, 0.5], vec![1.0, 0.001]];
        trace.raw = vec![vec![4.0, 2.0], vec![3.0, 0.003]];
        let csv = trace.to_csv();
        let back = SpectrumTrace::from_csv(&csv).unwrap();
        assert_eq!(back.epochs, trace.epochs);
        assert_eq!(back.eff_ranks, trace.eff_ranks);
        assert_eq!(back.normalized, trace.normalized);
        assert_eq!(back.raw, trace.raw);
    }
}

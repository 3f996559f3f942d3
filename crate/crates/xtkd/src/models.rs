//! Small fully connected networks with an explicit encoder/decoder split.
//!
//! An [`MlpNet`] is a stack of affine layers.  `encoder_cut` marks how many
//! layers belong to the encoder: [`MlpNet::encode`] runs exactly those layers
//! (each followed by the activation) and yields the feature matrix that
//! distillation operates on, [`MlpNet::decode`] runs the remaining layers
//! with the activation on all but the last, which stays linear.  Running both
//! halves back to back is bit-for-bit identical to [`MlpNet::forward`].
//!
//! Networks can be frozen (teachers are); a frozen network refuses parameter
//! updates with [`Error::FrozenViolation`] but still evaluates normally.
//!
//! [`MlpNet::build_graph`] unrolls the same computation onto a
//! [`TapeGraph`], one leaf per weight and bias, so the training loop can
//! differentiate losses end to end.

use crate::autodiff::{Bindings, Gradients, NodeId, TapeGraph};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::util::{seeded_rng, Rng};
use rand::Rng as _;

/// Nonlinearity applied between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Hyperbolic tangent (the default throughout the lab).
    Tanh,
    /// Rectified linear unit.
    Relu,
    /// No-op, useful for building exactly linear test networks.
    Identity,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Parse {
                what: "activation",
                message: format!("unknown activation {other:?}"),
            }),
        }
    }

    fn apply(&self, m: &mut Matrix) {
        match self {
            Activation::Tanh => {
                for v in m.data_mut() {
                    *v = v.tanh();
                }
            }
            Activation::Relu => {
                for v in m.data_mut() {
                    *v = v.max(0.0);
                }
            }
            Activation::Identity => {}
        }
    }

    fn apply_graph(&self, tape: &mut TapeGraph, node: NodeId) -> Result<NodeId> {
        match self {
            Activation::Tanh => tape.tanh(node),
            Activation::Relu => tape.relu(node),
            Activation::Identity => Ok(node),
        }
    }
}

/// Weight initialisation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitSpec {
    /// Entries uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    UniformFanIn,
    /// Uniform draw followed by Gram-Schmidt so the smaller dimension of
    /// each weight matrix is orthonormal; layers then preserve norms exactly
    /// (up to the bias and activation).
    OrthogonalColumns,
    /// All parameters zero, useful as a deterministic test fixture.
    Zero,
}

/// One network's leaves inside a [`TapeGraph`], plus the feature and output
/// nodes.  Produced by [`MlpNet::build_graph`].
#[derive(Debug, Clone)]
pub struct GraphNet {
    pub weight_leaves: Vec<NodeId>,
    pub bias_leaves: Vec<NodeId>,
    /// Activated output of the final encoder layer.
    pub features: NodeId,
    /// Linear output of the final layer.
    pub output: NodeId,
}

/// Fully connected network.  Weights are stored `out x in`, so layer `l`
/// maps a batch `h` (`batch x in`) to `h * W_l^T + b_l`.
#[derive(Debug, Clone)]
pub struct MlpNet {
    widths: Vec<usize>,
    encoder_cut: usize,
    activation: Activation,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
    frozen: bool,
    label: String,
}

const CHECKPOINT_HEADER: &str = "MLP v1";

impl MlpNet {
    /// Builds a network with `widths.len() - 1` layers.  `encoder_cut` must
    /// satisfy `1 <= cut <= layers - 1` so both halves are non-empty.
    pub fn new(
        widths: &[usize],
        encoder_cut: usize,
        activation: Activation,
        init: InitSpec,
        seed: u64,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Contract(format!(
                "network needs at least one layer, got widths {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Contract(format!(
                "zero width in network shape {widths:?}"
            )));
        }
        let layers = widths.len() - 1;
        if encoder_cut < 1 || encoder_cut > layers - 1 {
            return Err(Error::OutOfRange {
                what: "encoder_cut",
                got: encoder_cut.to_string(),
                allowed: format!("1..={} for {layers} layers", layers.max(2) - 1),
            });
        }
        let mut rng = seeded_rng(seed);
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let w = match init {
                InitSpec::UniformFanIn => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Matrix::random_uniform(&mut rng, fan_out, fan_in, -bound, bound)
                }
                InitSpec::OrthogonalColumns => orthogonal_init(&mut rng, fan_out, fan_in),
                InitSpec::Zero => Matrix::zeros(fan_out, fan_in),
            };
            weights.push(w);
            biases.push(Matrix::zeros(1, fan_out));
        }
        Ok(Self {
            widths: widths.to_vec(),
            encoder_cut,
            activation,
            weights,
            biases,
            frozen: false,
            label: "mlp".to_string(),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn encoder_cut(&self) -> usize {
        self.encoder_cut
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Width of the feature layer the encoder produces.
    pub fn feature_width(&self) -> usize {
        self.widths[self.encoder_cut]
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("widths non-empty")
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Matrix {
        &self.biases[layer]
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn set_label(&mut self, label: &str) {
        self.label = label.to_string();
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.rows() * w.cols() + b.cols())
            .sum()
    }

    fn layer_forward(&self, l: usize, h: &Matrix, activate: bool) -> Result<Matrix> {
        let mut out = h.matmul(&self.weights[l].transpose())?;
        let bias = self.biases[l].row(0);
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        if activate {
            self.activation.apply(&mut out);
        }
        Ok(out)
    }

    /// Runs the encoder layers; every one is activated.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_width() {
            return Err(Error::shape("encode", (x.rows(), x.cols()), (x.rows(), self.input_width())));
        }
        let mut h = x.clone();
        for l in 0..self.encoder_cut {
            h = self.layer_forward(l, &h, true)?;
        }
        Ok(h)
    }

    /// Runs the decoder layers; the final layer stays linear.
    pub fn decode(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.feature_width() {
            return Err(Error::shape(
                "decode",
                (features.rows(), features.cols()),
                (features.rows(), self.feature_width()),
            ));
        }
        let mut h = features.clone();
        let layers = self.layer_count();
        for l in self.encoder_cut..layers {
            h = self.layer_forward(l, &h, l + 1 < layers)?;
        }
        Ok(h)
    }

    /// Full forward pass; identical to `decode(encode(x))`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let features = self.encode(x)?;
        self.decode(&features)
    }

    /// In-place SGD update `param -= lr * grad`.  Gradient slices must have
    /// one entry per layer.  Fails with [`Error::FrozenViolation`] if the
    /// network is frozen.
    pub fn sgd_step(
        &mut self,
        weight_grads: &[Matrix],
        bias_grads: &[Matrix],
        lr: f64,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenViolation {
                name: self.label.clone(),
            });
        }
        if weight_grads.len() != self.weights.len() || bias_grads.len() != self.biases.len() {
            return Err(Error::Contract(format!(
                "gradient count mismatch: got {} weight / {} bias grads for {} layers",
                weight_grads.len(),
                bias_grads.len(),
                self.weights.len()
            )));
        }
        for (w, g) in self.weights.iter_mut().zip(weight_grads) {
            w.add_scaled_in_place(g, -lr)?;
        }
        for (b, g) in self.biases.iter_mut().zip(bias_grads) {
            b.add_scaled_in_place(g, -lr)?;
        }
        Ok(())
    }

    /// Unrolls the network onto `tape`, starting from the node `x`
    /// (`batch x input_width`).  Leaves are named `<label>.w<l>` /
    /// `<label>.b<l>`.
    pub fn build_graph(&self, tape: &mut TapeGraph, x: NodeId) -> Result<GraphNet> {
        let (_, xc) = tape.shape(x);
        if xc != self.input_width() {
            return Err(Error::shape("build_graph input", tape.shape(x), (0, self.input_width())));
        }
        let layers = self.layer_count();
        let mut weight_leaves = Vec::with_capacity(layers);
        let mut bias_leaves = Vec::with_capacity(layers);
        let mut h = x;
        let mut features = None;
        for l in 0..layers {
            let w = tape.leaf(
                &format!("{}.w{l}", self.label),
                self.weights[l].rows(),
                self.weights[l].cols(),
            );
            let b = tape.leaf(&format!("{}.b{l}", self.label), 1, self.biases[l].cols());
            weight_leaves.push(w);
            bias_leaves.push(b);
            let wt = tape.transpose(w)?;
            let prod = tape.matmul(h, wt)?;
            let affine = tape.add_row_broadcast(prod, b)?;
            h = if l + 1 < layers {
                self.activation.apply_graph(tape, affine)?
            } else {
                affine
            };
            if l + 1 == self.encoder_cut {
                features = Some(h);
            }
        }
        Ok(GraphNet {
            weight_leaves,
            bias_leaves,
            features: features.expect("encoder_cut < layers"),
            output: h,
        })
    }

    /// Unrolls only the decoder layers onto `tape`, reading `features` as
    /// input and baking the current parameters in as constants.  Mirrors
    /// [`MlpNet::decode`]; useful when this network stays frozen while
    /// something upstream of its decoder is trained.
    pub fn decode_graph_const(&self, tape: &mut TapeGraph, features: NodeId) -> Result<NodeId> {
        let (_, fc) = tape.shape(features);
        if fc != self.feature_width() {
            return Err(Error::shape(
                "decode_graph_const",
                tape.shape(features),
                (0, self.feature_width()),
            ));
        }
        let layers = self.layer_count();
        let mut h = features;
        for l in self.encoder_cut..layers {
            let wt = tape.constant(self.weights[l].transpose());
            let prod = tape.matmul(h, wt)?;
            let b = tape.constant(self.biases[l].clone());
            let affine = tape.add_row_broadcast(prod, b)?;
            h = if l + 1 < layers {
                self.activation.apply_graph(tape, affine)?
            } else {
                affine
            };
        }
        Ok(h)
    }

    /// Binds the current parameters to the graph leaves.
    pub fn bind(&self, bindings: &mut Bindings, net: &GraphNet) {
        for (leaf, w) in net.weight_leaves.iter().zip(&self.weights) {
            bindings.bind(*leaf, w.clone());
        }
        for (leaf, b) in net.bias_leaves.iter().zip(&self.biases) {
            bindings.bind(*leaf, b.clone());
        }
    }

    /// SGD step driven by a [`Gradients`] map from a backward pass over the
    /// graph built by [`MlpNet::build_graph`].
    pub fn apply_gradients(&mut self, net: &GraphNet, grads: &Gradients, lr: f64) -> Result<()> {
        let weight_grads: Vec<Matrix> = net
            .weight_leaves
            .iter()
            .map(|&l| grads.get(l).expect("graph leaf has gradient").clone())
            .collect();
        let bias_grads: Vec<Matrix> = net
            .bias_leaves
            .iter()
            .map(|&l| grads.get(l).expect("graph leaf has gradient").clone())
            .collect();
        self.sgd_step(&weight_grads, &bias_grads, lr)
    }

    // ---- checkpoints ---------------------------------------------------

    /// Serialises to a plain-text checkpoint that round-trips bitwise.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        out.push_str(&format!("widths: {}\n", widths.join(" ")));
        out.push_str(&format!("encoder_cut: {}\n", self.encoder_cut));
        out.push_str(&format!("activation: {}\n", self.activation.as_str()));
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push_str(&format!("weight {l}\n"));
            out.push_str(&w.to_text());
            out.push_str(&format!("bias {l}\n"));
            out.push_str(&b.to_text());
        }
        out
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    /// Parses a checkpoint produced by [`MlpNet::to_checkpoint`].  Loaded
    /// networks start unfrozen with the default label.
    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != CHECKPOINT_HEADER {
            return Err(Error::Parse {
                what: "checkpoint",
                message: format!("bad header {header:?}, expected {CHECKPOINT_HEADER:?}"),
            });
        }
        let widths_line = expect_prefixed(lines.next(), "widths:")?;
        let widths: Vec<usize> = widths_line
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>().map_err(|e| Error::Parse {
                    what: "checkpoint",
                    message: format!("bad width {t:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        let cut_line = expect_prefixed(lines.next(), "encoder_cut:")?;
        let encoder_cut: usize = cut_line.trim().parse().map_err(|e| Error::Parse {
            what: "checkpoint",
            message: format!("bad encoder_cut {cut_line:?}: {e}"),
        })?;
        let act_line = expect_prefixed(lines.next(), "activation:")?;
        let activation = Activation::parse(act_line.trim())?;

        let mut net = MlpNet::new(&widths, encoder_cut, activation, InitSpec::Zero, 0)?;
        for l in 0..net.layer_count() {
            expect_tag(lines.next(), &format!("weight {l}"))?;
            let w = Matrix::parse_from_lines(&mut lines)?;
            if w.shape() != net.weights[l].shape() {
                return Err(Error::shape("checkpoint weight", net.weights[l].shape(), w.shape()));
            }
            net.weights[l] = w;
            expect_tag(lines.next(), &format!("bias {l}"))?;
            let b = Matrix::parse_from_lines(&mut lines)?;
            if b.shape() != net.biases[l].shape() {
                return Err(Error::shape("checkpoint bias", net.biases[l].shape(), b.shape()));
            }
            net.biases[l] = b;
        }
        if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
            return Err(Error::Parse {
                what: "checkpoint",
                message: format!("trailing content {extra:?}"),
            });
        }
        Ok(net)
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(&text)
    }
}

fn expect_prefixed<'a>(line: Option<&'a str>, prefix: &str) -> Result<&'a str> {
    let line = line.ok_or_else(|| Error::Parse {
        what: "checkpoint",
        message: format!("missing {prefix:?} line"),
    })?;
    line.strip_prefix(prefix).ok_or_else(|| Error::Parse {
        what: "checkpoint",
        message: format!("expected line starting with {prefix:?}, got {line:?}"),
    })
}

fn expect_tag(line: Option<&str>, tag: &str) -> Result<()> {
    match line {
        Some(l) if l.trim() == tag => Ok(()),
        other => Err(Error::Parse {
            what: "checkpoint",
            message: format!("expected {tag:?}, got {other:?}"),
        }),
    }
}

/// Uniform draw orthonormalised along the smaller dimension: columns when
/// `cols <= rows` (so `W^T W = I`), rows otherwise (`W W^T = I`).
pub(crate) fn orthogonal_init(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let transpose_mode = cols > rows;
    let (m, n) = if transpose_mode { (cols, rows) } else { (rows, cols) };
    // m >= n: build n orthonormal columns of length m.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= dot * qi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // measure-zero degenerate draw; redraw
        }
        for vi in &mut v {
            *vi /= norm;
        }
        basis.push(v);
    }
    Matrix::from_fn(rows, cols, |r, c| {
        if transpose_mode {
            basis[r][c]
        } else {
            basis[c][r]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    fn sample_net() -> MlpNet {
        MlpNet::new(&[5, 7, 6, 3], 2, Activation::Tanh, InitSpec::UniformFanIn, 11).unwrap()
    }

    fn rand_batch(seed: u64, rows: usize, cols: usize) -> Matrix {
        let mut rng = seeded_rng(seed);
        Matrix::random_uniform(&mut rng, rows, cols, -1.0, 1.0)
    }

    #[test]
    fn encode_then_decode_matches_forward_bitwise() {
        let net = sample_net();
        let x = rand_batch(1, 4, 5);
        let split = net.decode(&net.encode(&x).unwrap()).unwrap();
        let full = net.forward(&x).unwrap();
        for (a, b) in split.data().iter().zip(full.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(net.encode(&x).unwrap().cols(), net.feature_width());
    }

    #[test]
    fn final_layer_is_linear() {
        // With zero weights everywhere the output equals the last bias; with
        // tanh applied it would saturate.  Use a large bias to detect.
        let mut net = MlpNet::new(&[2, 3, 2], 1, Activation::Tanh, InitSpec::Zero, 0).unwrap();
        net.biases[1] = Matrix::from_rows(&[vec![5.0, -5.0]]).unwrap();
        let out = net.forward(&rand_batch(2, 3, 2)).unwrap();
        for r in 0..out.rows() {
            assert_eq!(out.get(r, 0), 5.0);
            assert_eq!(out.get(r, 1), -5.0);
        }
    }

    #[test]
    fn frozen_network_rejects_updates_but_still_evaluates() {
        let mut net = sample_net();
        net.set_label("teacher");
        net.set_frozen(true);
        let x = rand_batch(2, 3, 5);
        let before = net.forward(&x).unwrap();
        let wg: Vec<Matrix> = net
            .widths()
            .windows(2)
            .map(|w| Matrix::from_fn(w[1], w[0], |_, _| 1.0))
            .collect();
        let bg: Vec<Matrix> = net
            .widths()
            .iter()
            .skip(1)
            .map(|&w| Matrix::from_fn(1, w, |_, _| 1.0))
            .collect();
        match net.sgd_step(&wg, &bg, 0.1) {
            Err(Error::FrozenViolation { name }) => assert_eq!(name, "teacher"),
            other => panic!("expected FrozenViolation, got {other:?}"),
        }
        let after = net.forward(&x).unwrap();
        assert_eq!(before.max_abs_diff(&after), 0.0);
    }

    #[test]
    fn sgd_step_moves_parameters() {
        let mut net = sample_net();
        let before = net.weight(0).get(0, 0);
        let wg: Vec<Matrix> = (0..net.layer_count())
            .map(|l| Matrix::from_fn(net.weight(l).rows(), net.weight(l).cols(), |_, _| 1.0))
            .collect();
        let bg: Vec<Matrix> = (0..net.layer_count())
            .map(|l| Matrix::zeros(1, net.bias(l).cols()))
            .collect();
        net.sgd_step(&wg, &bg, 0.25).unwrap();
        assert!((net.weight(0).get(0, 0) - (before - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_init_has_orthonormal_small_dimension() {
        let mut rng = seeded_rng(3);
        // cols <= rows: columns orthonormal.
        let w = orthogonal_init(&mut rng, 8, 5);
        let gram = w.transpose().matmul(&w).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(5)) < 1e-8);
        // cols > rows: rows orthonormal.
        let w = orthogonal_init(&mut rng, 3, 9);
        let gram = w.matmul(&w.transpose()).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(3)) < 1e-8);
    }

    #[test]
    fn orthogonal_layer_preserves_norms() {
        let net = MlpNet::new(
            &[6, 9, 9, 2],
            1,
            Activation::Identity,
            InitSpec::OrthogonalColumns,
            5,
        )
        .unwrap();
        let x = rand_batch(4, 3, 6);
        let h = net.encode(&x).unwrap();
        for r in 0..x.rows() {
            let nx: f64 = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let nh: f64 = h.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((nx - nh).abs() < 1e-8, "row {r}: {nx} vs {nh}");
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = sample_net();
        let b = sample_net();
        for l in 0..a.layer_count() {
            assert_eq!(a.weight(l).max_abs_diff(b.weight(l)), 0.0);
        }
        let c = MlpNet::new(&[5, 7, 6, 3], 2, Activation::Tanh, InitSpec::UniformFanIn, 12).unwrap();
        assert!(a.weight(0).max_abs_diff(c.weight(0)) > 0.0);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let net = sample_net();
        let text = net.to_checkpoint();
        let back = MlpNet::from_checkpoint(&text).unwrap();
        assert_eq!(net.widths(), back.widths());
        assert_eq!(net.encoder_cut(), back.encoder_cut());
        assert_eq!(net.activation(), back.activation());
        for l in 0..net.layer_count() {
            for (a, b) in net.weight(l).data().iter().zip(back.weight(l).data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            for (a, b) in net.bias(l).data().iter().zip(back.bias(l).data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let net = sample_net();
        let text = net.to_checkpoint();
        assert!(MlpNet::from_checkpoint(&text.replace("MLP v1", "MLP v2")).is_err());
        assert!(MlpNet::from_checkpoint(&format!("{text}stray\n")).is_err());
        assert!(MlpNet::from_checkpoint("MLP v1\nwidths: 2 2\n").is_err());
    }

    #[test]
    fn graph_forward_matches_direct_forward() {
        let net = sample_net();
        let x_val = rand_batch(7, 4, 5);
        let mut tape = TapeGraph::new();
        let x = tape.constant(x_val.clone());
        let gn = net.build_graph(&mut tape, x).unwrap();
        let root = tape.sum(gn.output).unwrap();
        tape.set_root(root).unwrap();
        let mut b = Bindings::new();
        net.bind(&mut b, &gn);
        tape.forward(&b).unwrap();
        let graph_out = tape.value(gn.output).unwrap();
        let direct = net.forward(&x_val).unwrap();
        assert!(graph_out.max_abs_diff(&direct) < 1e-14);
        let graph_feat = tape.value(gn.features).unwrap();
        let direct_feat = net.encode(&x_val).unwrap();
        assert!(graph_feat.max_abs_diff(&direct_feat) < 1e-14);
    }

    #[test]
    fn one_graph_sgd_step_reduces_loss() {
        let mut net = MlpNet::new(&[3, 8, 2], 1, Activation::Tanh, InitSpec::UniformFanIn, 2).unwrap();
        let x_val = rand_batch(11, 6, 3);
        let target = rand_batch(12, 6, 2).scale(0.3);
        let mut tape = TapeGraph::new();
        let x = tape.constant(x_val);
        let gn = net.build_graph(&mut tape, x).unwrap();
        let t = tape.constant(target);
        let sq = tape.squared_frob_diff(gn.output, t).unwrap();
        let loss = tape.scalar_mul(sq, 1.0 / 12.0).unwrap();
        tape.set_root(loss).unwrap();

        let mut b = Bindings::new();
        net.bind(&mut b, &gn);
        let before = tape.forward(&b).unwrap().get(0, 0);
        let grads = tape.backward().unwrap();
        net.apply_gradients(&gn, &grads, 0.1).unwrap();
        let mut b2 = Bindings::new();
        net.bind(&mut b2, &gn);
        let after = tape.forward(&b2).unwrap().get(0, 0);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        assert!(MlpNet::new(&[4], 1, Activation::Tanh, InitSpec::Zero, 0).is_err());
        assert!(MlpNet::new(&[4, 3], 1, Activation::Tanh, InitSpec::Zero, 0).is_err()); // 1 layer: no valid cut
        assert!(MlpNet::new(&[4, 3, 2], 2, Activation::Tanh, InitSpec::Zero, 0).is_err());
        assert!(MlpNet::new(&[4, 3, 2], 0, Activation::Tanh, InitSpec::Zero, 0).is_err());
        assert!(MlpNet::new(&[4, 0, 2], 1, Activation::Tanh, InitSpec::Zero, 0).is_err());
        let net = MlpNet::new(&[4, 3, 2], 1, Activation::Tanh, InitSpec::Zero, 0).unwrap();
        assert!(net.encode(&Matrix::zeros(2, 5)).is_err());
        assert!(net.decode(&Matrix::zeros(2, 5)).is_err());
    }
}

//! Building blocks: dense, batch norm, context gate, SWAP pooling and a
//! per-class mixture-of-experts head.
//!
//! Each layer owns its parameter tensors. `forward` inserts them into a
//! [`Graph`] as trainable leaves, pushing the new node ids onto `bound` in the
//! same order that `params()` lists them, so callers can map gradients back.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the normal initializer for all weight matrices.
pub const INIT_STDDEV: f64 = 0.03;
pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    None,
    Relu,
    Relu6,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::None => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::Relu6 => g.relu6(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::None => "none",
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "linear" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            "relu6" => Ok(Activation::Relu6),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A parameter tensor as seen by optimizers and serializers.
#[derive(Clone, Copy, Debug)]
pub struct ParamView<'a> {
    pub name: &'static str,
    pub value: &'a Tensor,
    /// Whether L2 regularization applies (weights and batch-norm gamma).
    pub decays: bool,
}

pub fn init_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, INIT_STDDEV).expect("valid stddev");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

pub(crate) fn bind(g: &mut Graph, params: &[ParamView<'_>], bound: &mut Vec<NodeId>) -> Vec<NodeId> {
    params
        .iter()
        .map(|p| {
            let id = g.param(p.value.clone());
            bound.push(id);
            id
        })
        .collect()
}

fn expect_width(op: &'static str, g: &Graph, x: NodeId, width: usize) -> Result<()> {
    let shape = g.value(x).shape();
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::shape(op, shape, &[width]));
    }
    Ok(())
}

/// Runs a layer-shaped closure on a throwaway graph and returns its value.
fn eval_standalone(input: &Tensor, f: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = f(&mut g, x)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Option<Tensor>, activation: Activation) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::invalid("dense weight must be a matrix"));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[1]] {
                return Err(Error::shape("dense", weight.shape(), b.shape()));
            }
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        DenseLayer {
            weight: init_normal(&[inputs, outputs], rng),
            bias: bias.then(|| Tensor::zeros(&[outputs])),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn params(&self) -> Vec<ParamView<'_>> {
        let mut v = vec![ParamView {
            name: "weight",
            value: &self.weight,
            decays: true,
        }];
        if let Some(b) = &self.bias {
            v.push(ParamView {
                name: "bias",
                value: b,
                decays: false,
            });
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, bound: &mut Vec<NodeId>) -> Result<NodeId> {
        expect_width("dense", g, x, self.inputs())?;
        let ids = bind(g, &self.params(), bound);
        let mut y = g.matmul(x, ids[0])?;
        if ids.len() > 1 {
            y = g.add(y, ids[1])?;
        }
        self.activation.apply(g, y)
    }
}

pub fn dense_forward(layer: &DenseLayer, input: &Tensor) -> Result<Tensor> {
    eval_standalone(input, |g, x| layer.forward(g, x, &mut Vec::new()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
}

/// Inference-time batch norm collapsed to `x·scale + shift`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedBatchNorm {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl FoldedBatchNorm {
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        eval_standalone(input, |g, x| {
            let s = g.constant(self.scale.clone());
            let b = g.constant(self.shift.clone());
            let y = g.mul(x, s)?;
            g.add(y, b)
        })
    }
}

impl BatchNormLayer {
    pub fn new(features: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::ones(&[features]),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::ones(&[features]),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub fn params(&self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: "gamma",
                value: &self.gamma,
                decays: true,
            },
            ParamView {
                name: "beta",
                value: &self.beta,
                decays: false,
            },
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn buffers(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("running_mean", &self.running_mean), ("running_var", &self.running_var)]
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.running_mean, &mut self.running_var]
    }

    /// Normalizes by batch statistics in train mode (updating the running
    /// averages) and by the running averages in eval mode.
    pub fn forward(&mut self, g: &mut Graph, x: NodeId, mode: Mode, bound: &mut Vec<NodeId>) -> Result<NodeId> {
        let (y, stats) = self.forward_graph(g, x, mode, bound)?;
        if let Some((mean, var)) = stats {
            self.update_running(g.value(mean), g.value(var))?;
        }
        Ok(y)
    }

    /// Like [`BatchNormLayer::forward`] but leaves the running averages alone,
    /// returning the batch mean and variance nodes in train mode instead.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        mode: Mode,
        bound: &mut Vec<NodeId>,
    ) -> Result<(NodeId, Option<(NodeId, NodeId)>)> {
        expect_width("batch_norm", g, x, self.features())?;
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("batch norm epsilon must be positive"));
        }
        let ids = bind(g, &self.params(), bound);
        let (gamma, beta) = (ids[0], ids[1]);
        let (normalized, stats) = match mode {
            Mode::Train => {
                if g.value(x).shape()[0] < 2 {
                    return Err(Error::invalid("train-mode batch norm needs a batch of at least 2"));
                }
                let mean = g.mean_axis(x, 0)?;
                let centered = g.sub(x, mean)?;
                let sq = g.square(centered)?;
                let var = g.mean_axis(sq, 0)?;
                let eps = g.constant(Tensor::scalar(self.epsilon)?);
                let shifted = g.add(var, eps)?;
                let std = g.sqrt(shifted)?;
                (g.div(centered, std)?, Some((mean, var)))
            }
            Mode::Eval => {
                let mean = g.constant(self.running_mean.clone());
                let std = g.constant(self.running_var.map(|v| (v + self.epsilon).sqrt())?);
                let centered = g.sub(x, mean)?;
                (g.div(centered, std)?, None)
            }
        };
        let scaled = g.mul(normalized, gamma)?;
        Ok((g.add(scaled, beta)?, stats))
    }

    /// `running ← m·running + (1−m)·batch` for mean and (biased) variance.
    pub fn update_running(&mut self, mean: &Tensor, var: &Tensor) -> Result<()> {
        let m = self.momentum;
        let blend = |running: &Tensor, batch: &Tensor| {
            if running.shape() != batch.shape() {
                return Err(Error::shape("batch_norm", running.shape(), batch.shape()));
            }
            let data = running
                .data()
                .iter()
                .zip(batch.data())
                .map(|(r, b)| m * r + (1.0 - m) * b)
                .collect();
            Tensor::new(running.shape().to_vec(), data)
        };
        self.running_mean = blend(&self.running_mean, mean)?;
        self.running_var = blend(&self.running_var, var)?;
        Ok(())
    }

    pub fn fold(&self) -> Result<FoldedBatchNorm> {
        let scale: Vec<f64> = self
            .gamma
            .data()
            .iter()
            .zip(self.running_var.data())
            .map(|(g, v)| g / (v + self.epsilon).sqrt())
            .collect();
        let shift = self
            .beta
            .data()
            .iter()
            .zip(self.running_mean.data())
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        Ok(FoldedBatchNorm {
            scale: Tensor::vector(scale)?,
            shift: Tensor::vector(shift)?,
        })
    }
}

pub fn batchnorm_forward(layer: &mut BatchNormLayer, input: &Tensor, mode: Mode) -> Result<Tensor> {
    eval_standalone(input, |g, x| layer.forward(g, x, mode, &mut Vec::new()))
}

/// `sigmoid(x·W + b) ⊙ x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextGate {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ContextGate {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let square = weight.rank() == 2 && weight.shape()[0] == weight.shape()[1];
        if !square || bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape("context_gate", weight.shape(), bias.shape()));
        }
        Ok(ContextGate { weight, bias })
    }

    pub fn init<R: Rng + ?Sized>(features: usize, rng: &mut R) -> Self {
        ContextGate {
            weight: init_normal(&[features, features], rng),
            bias: Tensor::zeros(&[features]),
        }
    }

    pub fn features(&self) -> usize {
        self.bias.len()
    }

    pub fn params(&self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: "weight",
                value: &self.weight,
                decays: true,
            },
            ParamView {
                name: "bias",
                value: &self.bias,
                decays: false,
            },
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, bound: &mut Vec<NodeId>) -> Result<NodeId> {
        expect_width("context_gate", g, x, self.features())?;
        let ids = bind(g, &self.params(), bound);
        let logits = g.matmul(x, ids[0])?;
        let logits = g.add(logits, ids[1])?;
        let gate = g.sigmoid(logits)?;
        g.mul(gate, x)
    }
}

pub fn context_gate_forward(gate: &ContextGate, input: &Tensor) -> Result<Tensor> {
    eval_standalone(input, |g, x| gate.forward(g, x, &mut Vec::new()))
}

/// Frame-level features of one example, `[frames × features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Tensor,
}

impl FrameSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.rank() != 2 || frames.shape()[0] == 0 {
            return Err(Error::invalid("a frame sequence needs shape [n >= 1, features]"));
        }
        Ok(FrameSequence { frames })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn features(&self) -> usize {
        self.frames.shape()[1]
    }
}

/// Self-weighted average pooling: per feature unit, `Σ|xᵢ|xᵢ / Σ|xᵢ|`, or 0
/// when `Σ|xᵢ|` falls below [`crate::autodiff::SWAP_DEGENERATE`].
pub fn swap_pool(seq: &FrameSequence) -> Result<Tensor> {
    let pooled = eval_standalone(seq.frames(), |g, x| g.swap_pool(x, &[seq.len()]))?;
    pooled.reshape(&[seq.features()])
}

/// One mixture of logistic experts per class. Gate and expert logits for class
/// `c`, expert `e` live in column `c·E + e`.
#[derive(Clone, Debug, PartialEq)]
pub struct MoEHead {
    pub classes: usize,
    pub experts: usize,
    pub gate_weight: Tensor,
    pub gate_bias: Tensor,
    pub expert_weight: Tensor,
    pub expert_bias: Tensor,
}

impl MoEHead {
    pub fn new(
        classes: usize,
        experts: usize,
        gate_weight: Tensor,
        gate_bias: Tensor,
        expert_weight: Tensor,
        expert_bias: Tensor,
    ) -> Result<Self> {
        if experts == 0 || classes == 0 {
            return Err(Error::invalid("MoE head needs at least one class and one expert"));
        }
        let cols = classes * experts;
        let ok = gate_weight.rank() == 2
            && gate_weight.shape()[1] == cols
            && expert_weight.shape() == gate_weight.shape()
            && gate_bias.shape() == [cols]
            && expert_bias.shape() == [cols];
        if !ok {
            return Err(Error::shape("moe_head", gate_weight.shape(), expert_weight.shape()));
        }
        Ok(MoEHead {
            classes,
            experts,
            gate_weight,
            gate_bias,
            expert_weight,
            expert_bias,
        })
    }

    pub fn init<R: Rng + ?Sized>(inputs: usize, classes: usize, experts: usize, rng: &mut R) -> Self {
        let cols = classes * experts;
        MoEHead {
            classes,
            experts,
            gate_weight: init_normal(&[inputs, cols], rng),
            gate_bias: Tensor::zeros(&[cols]),
            expert_weight: init_normal(&[inputs, cols], rng),
            expert_bias: Tensor::zeros(&[cols]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.gate_weight.shape()[0]
    }

    pub fn params(&self) -> Vec<ParamView<'_>> {
        vec![
            ParamView {
                name: "gate_weight",
                value: &self.gate_weight,
                decays: true,
            },
            ParamView {
                name: "gate_bias",
                value: &self.gate_bias,
                decays: false,
            },
            ParamView {
                name: "expert_weight",
                value: &self.expert_weight,
                decays: true,
            },
            ParamView {
                name: "expert_bias",
                value: &self.expert_bias,
                decays: false,
            },
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.gate_weight,
            &mut self.gate_bias,
            &mut self.expert_weight,
            &mut self.expert_bias,
        ]
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, bound: &mut Vec<NodeId>) -> Result<NodeId> {
        expect_width("moe_head", g, x, self.inputs())?;
        let batch = g.value(x).shape()[0];
        let ids = bind(g, &self.params(), bound);
        let cube = [batch, self.classes, self.experts];

        let gate = g.matmul(x, ids[0])?;
        let gate = g.add(gate, ids[1])?;
        let gate = g.reshape(gate, &cube)?;
        let gate = g.softmax(gate)?;

        let expert = g.matmul(x, ids[2])?;
        let expert = g.add(expert, ids[3])?;
        let expert = g.reshape(expert, &cube)?;
        let expert = g.sigmoid(expert)?;

        let mixed = g.mul(gate, expert)?;
        g.sum_axis(mixed, 2)
    }
}

pub fn moe_head_forward(head: &MoEHead, input: &Tensor) -> Result<Tensor> {
    eval_standalone(input, |g, x| head.forward(g, x, &mut Vec::new()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    fn identity(n: usize) -> Tensor {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn dense_identity() {
        let layer = DenseLayer::new(identity(3), Some(Tensor::zeros(&[3])), Activation::None).unwrap();
        let x = m(2, 3, &[1.0, -2.0, 3.5, 0.0, 4.0, -1.0]);
        assert_eq!(dense_forward(&layer, &x).unwrap(), x);
    }

    #[test]
    fn dense_zero_weight_gives_bias_rows() {
        let b = Tensor::vector(vec![0.5, -1.5]).unwrap();
        let layer = DenseLayer::new(Tensor::zeros(&[3, 2]), Some(b), Activation::None).unwrap();
        let y = dense_forward(&layer, &Tensor::ones(&[4, 3])).unwrap();
        for i in 0..4 {
            assert_eq!(y.row(i), &[0.5, -1.5]);
        }
    }

    #[test]
    fn dense_hand_example() {
        let layer = DenseLayer::new(
            m(2, 1, &[1.0, 1.0]),
            Some(Tensor::vector(vec![0.5]).unwrap()),
            Activation::Relu,
        )
        .unwrap();
        let y = dense_forward(&layer, &m(1, 2, &[1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let layer = DenseLayer::new(identity(3), None, Activation::None).unwrap();
        assert!(matches!(
            dense_forward(&layer, &Tensor::ones(&[1, 2])),
            Err(Error::ShapeMismatch { op: "dense", .. })
        ));
    }

    #[test]
    fn batchnorm_train_on_standardized_input() {
        // Columns with mean 0 and (biased) variance 1.
        let x = m(4, 2, &[1.0, -1.0, -1.0, 1.0, 1.0, 1.0, -1.0, -1.0]);
        let mut bn = BatchNormLayer::new(2);
        let y = batchnorm_forward(&mut bn, &x, Mode::Train).unwrap();
        let shrink = 1.0 / (1.0 + BN_EPSILON).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * shrink).abs() < 1e-15);
        }
        assert!(y.max_abs_diff(&x) < 1e-3);
        // running stats moved toward the batch statistics
        assert_eq!(bn.running_mean.data(), &[0.0, 0.0]);
        assert!((bn.running_var.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_eval_hand_example() {
        let mut bn = BatchNormLayer::new(1);
        bn.gamma = Tensor::vector(vec![2.0]).unwrap();
        bn.beta = Tensor::vector(vec![1.0]).unwrap();
        let y = batchnorm_forward(&mut bn, &m(1, 1, &[1.0]), Mode::Eval).unwrap();
        let expected = 2.0 / (1.0 + BN_EPSILON).sqrt() + 1.0;
        assert!((y.data()[0] - expected).abs() < 1e-15);
        assert!((y.data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn batchnorm_train_needs_two_rows() {
        let mut bn = BatchNormLayer::new(2);
        assert!(batchnorm_forward(&mut bn, &Tensor::ones(&[1, 2]), Mode::Train).is_err());
        assert!(batchnorm_forward(&mut bn, &Tensor::ones(&[1, 2]), Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_running_stats_blend() {
        let mut bn = BatchNormLayer::new(1);
        let x = m(2, 1, &[2.0, 4.0]);
        batchnorm_forward(&mut bn, &x, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 0.01 * 3.0).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - (0.99 + 0.01 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn folded_batchnorm_matches_eval() {
        let mut bn = BatchNormLayer::new(3);
        bn.gamma = Tensor::vector(vec![0.5, 2.0, -1.0]).unwrap();
        bn.beta = Tensor::vector(vec![0.1, -0.2, 0.3]).unwrap();
        bn.running_mean = Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap();
        bn.running_var = Tensor::vector(vec![0.25, 4.0, 1.5]).unwrap();
        let x = m(2, 3, &[0.3, 1.7, -2.2, 5.0, -0.4, 0.0]);
        let eval = batchnorm_forward(&mut bn, &x, Mode::Eval).unwrap();
        let folded = bn.fold().unwrap().apply(&x).unwrap();
        assert!(eval.max_abs_diff(&folded) < 1e-12);
    }

    #[test]
    fn context_gate_cases() {
        let x = m(1, 3, &[1.0, -2.0, 0.5]);
        let open = ContextGate::new(Tensor::zeros(&[3, 3]), Tensor::filled(&[3], 50.0)).unwrap();
        assert!(context_gate_forward(&open, &x).unwrap().max_abs_diff(&x) < 1e-20);
        let half = ContextGate::new(Tensor::zeros(&[3, 3]), Tensor::zeros(&[3])).unwrap();
        assert_eq!(context_gate_forward(&half, &x).unwrap().data(), &[0.5, -1.0, 0.25]);
        let mut rng = rand::rng();
        let random = ContextGate::init(3, &mut rng);
        let zero = Tensor::zeros(&[2, 3]);
        assert_eq!(context_gate_forward(&random, &zero).unwrap(), zero);
    }

    #[test]
    fn context_gate_rejects_non_square() {
        assert!(ContextGate::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn swap_pool_cases() {
        let single = FrameSequence::new(m(1, 3, &[0.5, -2.0, 0.0])).unwrap();
        assert_eq!(swap_pool(&single).unwrap().data(), &[0.5, -2.0, 0.0]);
        let two = FrameSequence::new(m(2, 2, &[1.0, 0.0, 3.0, 0.0])).unwrap();
        assert_eq!(swap_pool(&two).unwrap().data(), &[2.5, 0.0]);
    }

    #[test]
    fn frame_sequence_needs_frames() {
        assert!(FrameSequence::new(Tensor::zeros(&[0, 3])).is_err());
        assert!(FrameSequence::new(Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn moe_single_expert_is_logistic_regression() {
        let w = m(2, 2, &[0.3, -0.5, 1.2, 0.7]);
        let b = Tensor::vector(vec![0.1, -0.2]).unwrap();
        let head = MoEHead::new(2, 1, Tensor::zeros(&[2, 2]), Tensor::zeros(&[2]), w.clone(), b.clone()).unwrap();
        let x = m(1, 2, &[0.4, -1.0]);
        let y = moe_head_forward(&head, &x).unwrap();
        let logistic = DenseLayer::new(w, Some(b), Activation::Sigmoid).unwrap();
        assert!(y.max_abs_diff(&dense_forward(&logistic, &x).unwrap()) < 1e-15);
    }

    #[test]
    fn moe_zero_experts_give_half() {
        let mut rng = rand::rng();
        let mut head = MoEHead::init(3, 4, 2, &mut rng);
        head.expert_weight = Tensor::zeros(&[3, 8]);
        let y = moe_head_forward(&head, &Tensor::ones(&[2, 3])).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn moe_hand_example() {
        // One input fixed at 1 so the biases are the logits.
        let head = MoEHead::new(
            1,
            2,
            Tensor::zeros(&[1, 2]),
            Tensor::vector(vec![3f64.ln(), 0.0]).unwrap(),
            Tensor::zeros(&[1, 2]),
            Tensor::zeros(&[2]),
        )
        .unwrap();
        let y = moe_head_forward(&head, &m(1, 1, &[1.0])).unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn moe_rejects_bad_shapes() {
        assert!(MoEHead::new(
            2,
            0,
            Tensor::zeros(&[1, 0]),
            Tensor::zeros(&[0]),
            Tensor::zeros(&[1, 0]),
            Tensor::zeros(&[0])
        )
        .is_err());
        assert!(MoEHead::new(
            2,
            2,
            Tensor::zeros(&[1, 4]),
            Tensor::zeros(&[4]),
            Tensor::zeros(&[1, 3]),
            Tensor::zeros(&[4])
        )
        .is_err());
    }

    #[test]
    fn init_uses_small_normal() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w = init_normal(&[100, 100], &mut rng);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.squared_norm() / n - mean * mean).sqrt();
        assert!(mean.abs() < 0.002);
        assert!((std - INIT_STDDEV).abs() < 0.002);
    }
}

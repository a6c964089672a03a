//! Multi-headed networks and the two loss structures that train them.
//!
//! A [`MultiHeadNet`] evaluates a shared base once and feeds its output to `N`
//! branches, each ending in a prediction head. The ensemble prediction is the
//! arithmetic mean of the branch predictions.
//!
//! With `l` the discrepancy, `g` the ground truth, `pᵢ` the branch predictions
//! and `p̄` their mean, the total loss is `Σᵢ L_aux,i + L_ens` where
//!
//! * ensembling:      `L_aux,i = (1−λ)·l(g, pᵢ)`,  `L_ens = Nλ·l(g, p̄)`
//! * co-distillation: `L_aux,i = μ·l(sg(p̄), pᵢ)`, `L_ens = N·l(g, p̄)`
//!
//! and `sg` blocks gradients. For the L2 discrepancy the two coincide in value
//! when `μ = 1 − λ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{Activation, BatchNormLayer, ContextGate, DenseLayer, MoEHead, Mode, ParamView};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logs in cross entropy.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Fully connected layer; with `batch_norm` the affine output is batch
    /// normalized (and the bias dropped) before the activation.
    Dense {
        width: usize,
        activation: Activation,
        batch_norm: bool,
    },
    BatchNorm,
    ContextGate,
    /// Pools frame-level features into one vector per example.
    SwapPool,
}

impl LayerSpec {
    pub fn dense(width: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            width,
            activation,
            batch_norm: false,
        }
    }

    fn output_width(&self, input: usize) -> usize {
        match self {
            LayerSpec::Dense { width, .. } => *width,
            _ => input,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Dense layer followed by a softmax; single-label tasks.
    Softmax,
    /// Per-class mixture of logistic experts; multi-label tasks.
    Moe { experts: usize },
}

impl HeadKind {
    pub fn prediction(self) -> PredictionKind {
        match self {
            HeadKind::Softmax => PredictionKind::Categorical,
            HeadKind::Moe { .. } => PredictionKind::MultiLabel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    pub classes: usize,
    pub kind: HeadKind,
}

/// An unforked network: layer stack plus a prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleNetwork {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub head: HeadSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub base: Vec<LayerSpec>,
    pub branches: Vec<Vec<LayerSpec>>,
    pub head: HeadSpec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Section {
    Base,
    Branch(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedLayer {
    pub section: Section,
    pub index: usize,
    pub spec: LayerSpec,
    pub inputs: usize,
    pub outputs: usize,
    /// Runs once per frame rather than once per example.
    pub frame_level: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedHead {
    pub branch: usize,
    pub inputs: usize,
    pub spec: HeadSpec,
}

/// Every layer of a spec with its concrete input and output widths.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub layers: Vec<ResolvedLayer>,
    pub heads: Vec<ResolvedHead>,
    pub frame_input: bool,
}

impl NetworkSpec {
    pub fn single(net: &SingleNetwork) -> Self {
        NetworkSpec {
            input_dim: net.input_dim,
            base: net.layers.clone(),
            branches: vec![vec![]],
            head: net.head,
        }
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn fork_point(&self) -> usize {
        self.base.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    pub fn resolve(&self) -> Result<Resolved> {
        if self.branches.is_empty() {
            return Err(Error::invalid("a network needs at least one branch"));
        }
        if self.input_dim == 0 || self.head.classes == 0 {
            return Err(Error::invalid("input width and class count must be positive"));
        }
        if let HeadKind::Moe { experts: 0 } = self.head.kind {
            return Err(Error::invalid("MoE head needs at least one expert"));
        }
        let pools = |ls: &[LayerSpec]| ls.iter().filter(|l| **l == LayerSpec::SwapPool).count();
        let base_pools = pools(&self.base);
        let frame_input = base_pools > 0 || self.branches.iter().any(|b| pools(b) > 0);
        for (i, b) in self.branches.iter().enumerate() {
            if frame_input && base_pools + pools(b) != 1 {
                return Err(Error::invalid(format!(
                    "branch {i}: frame input must be pooled exactly once on every path"
                )));
            }
        }

        let mut layers = Vec::new();
        let walk = |section: Section,
                    specs: &[LayerSpec],
                    mut width: usize,
                    mut frames: bool,
                    out: &mut Vec<ResolvedLayer>|
         -> Result<(usize, bool)> {
            for (index, spec) in specs.iter().enumerate() {
                if let LayerSpec::Dense { width: 0, .. } = spec {
                    return Err(Error::invalid(format!("{section:?} layer {index}: zero width")));
                }
                let outputs = spec.output_width(width);
                out.push(ResolvedLayer {
                    section,
                    index,
                    spec: spec.clone(),
                    inputs: width,
                    outputs,
                    frame_level: frames,
                });
                if *spec == LayerSpec::SwapPool {
                    frames = false;
                }
                width = outputs;
            }
            Ok((width, frames))
        };
        let (base_width, base_frames) = walk(Section::Base, &self.base, self.input_dim, frame_input, &mut layers)?;
        let mut heads = Vec::new();
        for (i, b) in self.branches.iter().enumerate() {
            let (width, _) = walk(Section::Branch(i), b, base_width, base_frames, &mut layers)?;
            heads.push(ResolvedHead {
                branch: i,
                inputs: width,
                spec: self.head,
            });
        }
        Ok(Resolved {
            layers,
            heads,
            frame_input,
        })
    }
}

/// Width after dividing by `ratio`, rounded to nearest and clamped to 1.
pub fn shrink_width(width: usize, ratio: f64) -> usize {
    let shrunk = (width as f64 / ratio).round() as usize;
    if shrunk == 0 {
        log::warn!("width {width} shrinks to 0 at ratio {ratio}; clamping to 1");
        1
    } else {
        shrunk
    }
}

/// Keeps layers below `fork_point` as the shared base and replicates the rest,
/// with dense widths divided by `shrink_ratio`, into `n_branches` branches.
pub fn fork_network(
    single: &SingleNetwork,
    fork_point: usize,
    shrink_ratio: f64,
    n_branches: usize,
) -> Result<NetworkSpec> {
    if fork_point == 0 || fork_point > single.layers.len() {
        return Err(Error::invalid(format!(
            "fork point {fork_point} must lie in 1..={}",
            single.layers.len()
        )));
    }
    if !(shrink_ratio >= 1.0) || !shrink_ratio.is_finite() {
        return Err(Error::invalid("shrink ratio must be finite and at least 1"));
    }
    if n_branches == 0 {
        return Err(Error::invalid("need at least one branch"));
    }
    let upper: Vec<LayerSpec> = single.layers[fork_point..]
        .iter()
        .map(|l| match l {
            LayerSpec::Dense {
                width,
                activation,
                batch_norm,
            } => LayerSpec::Dense {
                width: shrink_width(*width, shrink_ratio),
                activation: *activation,
                batch_norm: *batch_norm,
            },
            other => other.clone(),
        })
        .collect();
    let spec = NetworkSpec {
        input_dim: single.input_dim,
        base: single.layers[..fork_point].to_vec(),
        branches: vec![upper; n_branches],
        head: single.head,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    DenseBn {
        dense: DenseLayer,
        bn: BatchNormLayer,
        activation: Activation,
    },
    BatchNorm(BatchNormLayer),
    ContextGate(ContextGate),
    SwapPool,
}

impl Layer {
    fn build<R: Rng + ?Sized>(spec: &LayerSpec, inputs: usize, rng: &mut R) -> Self {
        match *spec {
            LayerSpec::Dense {
                width,
                activation,
                batch_norm: false,
            } => Layer::Dense(DenseLayer::init(inputs, width, activation, true, rng)),
            LayerSpec::Dense {
                width,
                activation,
                batch_norm: true,
            } => Layer::DenseBn {
                dense: DenseLayer::init(inputs, width, Activation::None, false, rng),
                bn: BatchNormLayer::new(width),
                activation,
            },
            LayerSpec::BatchNorm => Layer::BatchNorm(BatchNormLayer::new(inputs)),
            LayerSpec::ContextGate => Layer::ContextGate(ContextGate::init(inputs, rng)),
            LayerSpec::SwapPool => Layer::SwapPool,
        }
    }

    fn params(&self) -> Vec<(String, ParamView<'_>)> {
        fn plain(ps: Vec<ParamView<'_>>) -> Vec<(String, ParamView<'_>)> {
            ps.into_iter().map(|p| (p.name.to_string(), p)).collect()
        }
        match self {
            Layer::Dense(d) => plain(d.params()),
            Layer::DenseBn { dense, bn, .. } => {
                let mut v = plain(dense.params());
                v.extend(bn.params().into_iter().map(|p| (format!("bn.{}", p.name), p)));
                v
            }
            Layer::BatchNorm(bn) => plain(bn.params()),
            Layer::ContextGate(c) => plain(c.params()),
            Layer::SwapPool => vec![],
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => d.params_mut(),
            Layer::DenseBn { dense, bn, .. } => {
                let mut v = dense.params_mut();
                v.extend(bn.params_mut());
                v
            }
            Layer::BatchNorm(bn) => bn.params_mut(),
            Layer::ContextGate(c) => c.params_mut(),
            Layer::SwapPool => vec![],
        }
    }

    fn batch_norm(&self) -> Option<&BatchNormLayer> {
        match self {
            Layer::DenseBn { bn, .. } | Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        }
    }

    fn batch_norm_mut(&mut self) -> Option<&mut BatchNormLayer> {
        match self {
            Layer::DenseBn { bn, .. } | Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Softmax(DenseLayer),
    Moe(MoEHead),
}

impl Head {
    fn build<R: Rng + ?Sized>(spec: &HeadSpec, inputs: usize, rng: &mut R) -> Self {
        match spec.kind {
            HeadKind::Softmax => Head::Softmax(DenseLayer::init(inputs, spec.classes, Activation::None, true, rng)),
            HeadKind::Moe { experts } => Head::Moe(MoEHead::init(inputs, spec.classes, experts, rng)),
        }
    }

    fn params(&self) -> Vec<ParamView<'_>> {
        match self {
            Head::Softmax(d) => d.params(),
            Head::Moe(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::Softmax(d) => d.params_mut(),
            Head::Moe(m) => m.params_mut(),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, bound: &mut Vec<NodeId>) -> Result<NodeId> {
        match self {
            Head::Softmax(d) => {
                let logits = d.forward(g, x, bound)?;
                g.softmax(logits)
            }
            Head::Moe(m) => m.forward(g, x, bound),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub layers: Vec<Layer>,
    pub head: Head,
}

/// How branch parameters are drawn at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchInit {
    /// Each branch draws from its own seed stream.
    Independent,
    /// Every branch gets bitwise-identical parameters.
    Identical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub section: Section,
    pub decays: bool,
    pub shape: Vec<usize>,
}

/// Input for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    /// `[batch × features]`.
    Vectors(Tensor),
    /// Frames of every example stacked row-wise, `[Σ frames × features]`,
    /// with the per-example frame counts.
    Frames { frames: Tensor, counts: Vec<usize> },
}

impl Batch {
    pub fn size(&self) -> usize {
        match self {
            Batch::Vectors(t) => t.shape().first().copied().unwrap_or(0),
            Batch::Frames { counts, .. } => counts.len(),
        }
    }
}

/// Branch predictions and their mean as graph nodes.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub aux: Vec<NodeId>,
    pub ensemble: NodeId,
    /// Parameter nodes, aligned with [`MultiHeadNet::param_info`].
    pub params: Vec<NodeId>,
    bn_stats: Vec<(Section, usize, NodeId, NodeId)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub aux: Vec<Tensor>,
    pub ensemble: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadNet {
    spec: NetworkSpec,
    pub base: Vec<Layer>,
    pub branches: Vec<Branch>,
}

const BASE_STREAM: u64 = 0;

impl MultiHeadNet {
    pub fn new(spec: NetworkSpec, seed: u64, init: BranchInit) -> Result<Self> {
        let resolved = spec.resolve()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BASE_STREAM);
        let mut base = Vec::new();
        for l in resolved.layers.iter().filter(|l| l.section == Section::Base) {
            base.push(Layer::build(&l.spec, l.inputs, &mut rng));
        }
        let mut branches = Vec::new();
        for head in &resolved.heads {
            let i = head.branch;
            let stream = match init {
                BranchInit::Independent => i as u64 + 1,
                BranchInit::Identical => 1,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let layers = resolved
                .layers
                .iter()
                .filter(|l| l.section == Section::Branch(i))
                .map(|l| Layer::build(&l.spec, l.inputs, &mut rng))
                .collect();
            branches.push(Branch {
                layers,
                head: Head::build(&spec.head, head.inputs, &mut rng),
            });
        }
        Ok(MultiHeadNet { spec, base, branches })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    fn sections(&self) -> Vec<(Section, Vec<(String, ParamView<'_>)>)> {
        let mut out = Vec::new();
        for (i, layer) in self.base.iter().enumerate() {
            out.push((
                Section::Base,
                layer
                    .params()
                    .into_iter()
                    .map(|(n, p)| (format!("base.{i}.{n}"), p))
                    .collect(),
            ));
        }
        for (b, branch) in self.branches.iter().enumerate() {
            for (i, layer) in branch.layers.iter().enumerate() {
                out.push((
                    Section::Branch(b),
                    layer
                        .params()
                        .into_iter()
                        .map(|(n, p)| (format!("branch{b}.{i}.{n}"), p))
                        .collect(),
                ));
            }
            out.push((
                Section::Branch(b),
                branch
                    .head
                    .params()
                    .into_iter()
                    .map(|p| (format!("branch{b}.head.{}", p.name), p))
                    .collect(),
            ));
        }
        out
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        self.sections()
            .into_iter()
            .flat_map(|(section, ps)| {
                ps.into_iter().map(move |(name, p)| ParamInfo {
                    name,
                    section,
                    decays: p.decays,
                    shape: p.value.shape().to_vec(),
                })
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.sections()
            .into_iter()
            .flat_map(|(_, ps)| ps.into_iter().map(|(_, p)| p.value))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.base {
            out.extend(layer.params_mut());
        }
        for branch in &mut self.branches {
            for layer in &mut branch.layers {
                out.extend(layer.params_mut());
            }
            out.extend(branch.head.params_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Non-trainable state (batch-norm running statistics), named.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        let layers = self
            .base
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("base.{i}"), l))
            .chain(self.branches.iter().enumerate().flat_map(|(b, branch)| {
                branch
                    .layers
                    .iter()
                    .enumerate()
                    .map(move |(i, l)| (format!("branch{b}.{i}"), l))
            }));
        for (prefix, layer) in layers {
            if let Some(bn) = layer.batch_norm() {
                for (n, t) in bn.buffers() {
                    out.push((format!("{prefix}.{n}"), t));
                }
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let layers = self
            .base
            .iter_mut()
            .chain(self.branches.iter_mut().flat_map(|b| b.layers.iter_mut()));
        for layer in layers {
            if let Some(bn) = layer.batch_norm_mut() {
                out.extend(bn.buffers_mut());
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn run_layers(
        layers: &[Layer],
        section: Section,
        g: &mut Graph,
        mut x: NodeId,
        segments: &mut Option<Vec<usize>>,
        mode: Mode,
        bound: &mut Vec<NodeId>,
        bn_stats: &mut Vec<(Section, usize, NodeId, NodeId)>,
    ) -> Result<NodeId> {
        for (index, layer) in layers.iter().enumerate() {
            x = match layer {
                Layer::Dense(d) => d.forward(g, x, bound)?,
                Layer::DenseBn { dense, bn, activation } => {
                    let y = dense.forward(g, x, bound)?;
                    let (y, stats) = bn_graph(bn, g, y, mode, bound)?;
                    if let Some((m, v)) = stats {
                        bn_stats.push((section, index, m, v));
                    }
                    activation.apply(g, y)?
                }
                Layer::BatchNorm(bn) => {
                    let (y, stats) = bn_graph(bn, g, x, mode, bound)?;
                    if let Some((m, v)) = stats {
                        bn_stats.push((section, index, m, v));
                    }
                    y
                }
                Layer::ContextGate(c) => c.forward(g, x, bound)?,
                Layer::SwapPool => {
                    let segs = segments
                        .take()
                        .ok_or_else(|| Error::invalid("SWAP pooling applied to pooled input"))?;
                    g.swap_pool(x, &segs)?
                }
            };
        }
        Ok(x)
    }

    /// Builds the full forward pass on `g`. Train-mode batch statistics are
    /// recorded in the pass; [`MultiHeadNet::commit_batch_stats`] folds them
    /// into the running averages.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, mode: Mode) -> Result<ForwardPass> {
        let (input, mut segments) = match batch {
            Batch::Vectors(t) => (g.constant(t.clone()), None),
            Batch::Frames { frames, counts } => (g.constant(frames.clone()), Some(counts.clone())),
        };
        let resolved_frames = self.spec.resolve()?.frame_input;
        if resolved_frames != segments.is_some() {
            return Err(Error::invalid(if resolved_frames {
                "network pools frames but the batch holds vectors"
            } else {
                "batch holds frames but the network has no SWAP pooling"
            }));
        }
        let mut bound = Vec::new();
        let mut bn_stats = Vec::new();
        let shared = Self::run_layers(
            &self.base,
            Section::Base,
            g,
            input,
            &mut segments,
            mode,
            &mut bound,
            &mut bn_stats,
        )?;
        let mut aux = Vec::with_capacity(self.branches.len());
        for (b, branch) in self.branches.iter().enumerate() {
            let mut segs = segments.clone();
            let h = Self::run_layers(
                &branch.layers,
                Section::Branch(b),
                g,
                shared,
                &mut segs,
                mode,
                &mut bound,
                &mut bn_stats,
            )?;
            aux.push(branch.head.forward(g, h, &mut bound)?);
        }
        let ensemble = average(g, &aux)?;
        Ok(ForwardPass {
            aux,
            ensemble,
            params: bound,
            bn_stats,
        })
    }

    pub fn commit_batch_stats(&mut self, g: &Graph, pass: &ForwardPass) -> Result<()> {
        for &(section, index, mean, var) in &pass.bn_stats {
            let layer = match section {
                Section::Base => &mut self.base[index],
                Section::Branch(b) => &mut self.branches[b].layers[index],
            };
            if let Some(bn) = layer.batch_norm_mut() {
                bn.update_running(g.value(mean), g.value(var))?;
            }
        }
        Ok(())
    }

    /// Eval-mode predictions.
    pub fn predict(&self, batch: &Batch) -> Result<PredictionBundle> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, batch, Mode::Eval)?;
        Ok(PredictionBundle {
            aux: pass.aux.iter().map(|&id| g.value(id).clone()).collect(),
            ensemble: g.value(pass.ensemble).clone(),
        })
    }
}

fn bn_graph(
    bn: &BatchNormLayer,
    g: &mut Graph,
    x: NodeId,
    mode: Mode,
    bound: &mut Vec<NodeId>,
) -> Result<(NodeId, Option<(NodeId, NodeId)>)> {
    bn.forward_graph(g, x, mode, bound)
}

/// Simple-average ensembler.
pub fn average(g: &mut Graph, preds: &[NodeId]) -> Result<NodeId> {
    let (&first, rest) = preds
        .split_first()
        .ok_or_else(|| Error::invalid("cannot average zero predictions"))?;
    let mut acc = first;
    for &p in rest {
        acc = g.add(acc, p)?;
    }
    g.scale(acc, 1.0 / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Discrepancy {
    CrossEntropy,
    L2,
}

/// How predictions are to be read by cross entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictionKind {
    /// Rows are distributions over classes.
    Categorical,
    /// Each entry is an independent class probability.
    MultiLabel,
}

fn batch_len(t: &Tensor) -> usize {
    if t.rank() >= 2 {
        t.shape()[0].max(1)
    } else {
        1
    }
}

/// Mean over the batch (leading axis) of the per-example discrepancy.
pub fn discrepancy(
    g: &mut Graph,
    l: Discrepancy,
    kind: PredictionKind,
    target: NodeId,
    prediction: NodeId,
) -> Result<NodeId> {
    let (ts, ps) = (g.value(target).shape().to_vec(), g.value(prediction).shape().to_vec());
    if ts != ps {
        return Err(Error::shape("discrepancy", &ts, &ps));
    }
    let batch = batch_len(g.value(prediction)) as f64;
    match l {
        Discrepancy::L2 => {
            let d = g.sub(target, prediction)?;
            let sq = g.square(d)?;
            let s = g.sum(sq)?;
            g.scale(s, 1.0 / batch)
        }
        Discrepancy::CrossEntropy => {
            if g.value(prediction).data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Domain {
                    op: "cross_entropy",
                    msg: "predictions must lie in [0, 1]".into(),
                });
            }
            let p = g.clamp_min(prediction, LOG_FLOOR)?;
            let logp = g.log(p)?;
            let mut s = g.mul(target, logp)?;
            if kind == PredictionKind::MultiLabel {
                let one = g.constant(Tensor::scalar(1.0)?);
                let q = g.sub(one, prediction)?;
                let q = g.clamp_min(q, LOG_FLOOR)?;
                let logq = g.log(q)?;
                let t_neg = g.sub(one, target)?;
                let neg = g.mul(t_neg, logq)?;
                s = g.add(s, neg)?;
            }
            let total = g.sum(s)?;
            g.scale(total, -1.0 / batch)
        }
    }
}

pub fn discrepancy_value(l: Discrepancy, kind: PredictionKind, target: &Tensor, prediction: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(target.clone());
    let p = g.constant(prediction.clone());
    let d = discrepancy(&mut g, l, kind, t, p)?;
    Ok(g.value(d).data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Ensembling { lambda: f64 },
    CoDistillation { mu: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossStructure {
    pub kind: LossKind,
    pub discrepancy: Discrepancy,
}

impl LossStructure {
    pub fn ensembling(lambda: f64, discrepancy: Discrepancy) -> Self {
        LossStructure {
            kind: LossKind::Ensembling { lambda },
            discrepancy,
        }
    }

    pub fn codistillation(mu: f64, discrepancy: Discrepancy) -> Self {
        LossStructure {
            kind: LossKind::CoDistillation { mu },
            discrepancy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossOptions {
    pub prediction: PredictionKind,
    /// Block gradients through the ensemble prediction inside the
    /// co-distillation terms.
    pub stop_ensemble_gradient: bool,
}

impl LossOptions {
    pub fn new(prediction: PredictionKind) -> Self {
        LossOptions {
            prediction,
            stop_ensemble_gradient: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LossTerms {
    pub aux: Vec<NodeId>,
    pub ens: NodeId,
    pub total: NodeId,
}

pub fn total_loss(
    g: &mut Graph,
    aux: &[NodeId],
    ensemble: NodeId,
    truth: NodeId,
    structure: &LossStructure,
    opts: LossOptions,
) -> Result<LossTerms> {
    let n = aux.len() as f64;
    if aux.is_empty() {
        return Err(Error::invalid("loss needs at least one branch"));
    }
    let l = structure.discrepancy;
    let kind = opts.prediction;
    let (aux_terms, ens) = match structure.kind {
        LossKind::Ensembling { lambda } => {
            if !lambda.is_finite() {
                return Err(Error::invalid("lambda must be finite"));
            }
            let mut terms = Vec::with_capacity(aux.len());
            for &p in aux {
                let d = discrepancy(g, l, kind, truth, p)?;
                terms.push(g.scale(d, 1.0 - lambda)?);
            }
            let d = discrepancy(g, l, kind, truth, ensemble)?;
            (terms, g.scale(d, n * lambda)?)
        }
        LossKind::CoDistillation { mu } => {
            if !mu.is_finite() {
                return Err(Error::invalid("mu must be finite"));
            }
            let teacher = if opts.stop_ensemble_gradient {
                g.stop_gradient(ensemble)?
            } else {
                ensemble
            };
            let mut terms = Vec::with_capacity(aux.len());
            for &p in aux {
                let d = discrepancy(g, l, kind, teacher, p)?;
                terms.push(g.scale(d, mu)?);
            }
            let d = discrepancy(g, l, kind, truth, ensemble)?;
            (terms, g.scale(d, n)?)
        }
    };
    let mut total = aux_terms[0];
    for &t in &aux_terms[1..] {
        total = g.add(total, t)?;
    }
    let total = g.add(total, ens)?;
    Ok(LossTerms {
        aux: aux_terms,
        ens,
        total,
    })
}

/// Value of the total loss for fixed prediction tensors.
pub fn total_loss_value(preds: &[Tensor], truth: &Tensor, structure: &LossStructure, opts: LossOptions) -> Result<f64> {
    let mut g = Graph::new();
    let aux: Vec<NodeId> = preds.iter().map(|p| g.constant(p.clone())).collect();
    let ens = average(&mut g, &aux)?;
    let t = g.constant(truth.clone());
    let terms = total_loss(&mut g, &aux, ens, t, structure, opts)?;
    Ok(g.value(terms.total).data()[0])
}

/// Largest `|Ensembling(λ) − CoDistillation(1−λ)|` over random L2 trials with
/// predictions and truth in `[−2, 2]` and `λ ∈ [−3, 2]`.
pub fn verify_equivalence(n_branches: usize, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 || n_branches == 0 {
        return Err(Error::invalid("need at least one trial and one branch"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = LossOptions {
        prediction: PredictionKind::Categorical,
        stop_ensemble_gradient: false,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let batch = rng.random_range(1..=3);
        let dim = rng.random_range(1..=4);
        let mut draw = || Tensor::from_fn(&[batch, dim], |_| rng.random_range(-2.0..=2.0));
        let truth = draw()?;
        let preds = (0..n_branches).map(|_| draw()).collect::<Result<Vec<_>>>()?;
        let lambda = rng.random_range(-3.0..=2.0);
        let ens = total_loss_value(
            &preds,
            &truth,
            &LossStructure::ensembling(lambda, Discrepancy::L2),
            opts,
        )?;
        let cod = total_loss_value(
            &preds,
            &truth,
            &LossStructure::codistillation(1.0 - lambda, Discrepancy::L2),
            opts,
        )?;
        worst = worst.max((ens - cod).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_preds(vals: &[f64]) -> Vec<Tensor> {
        vals.iter().map(|&v| Tensor::scalar(v).unwrap()).collect()
    }

    const NO_STOP: LossOptions = LossOptions {
        prediction: PredictionKind::Categorical,
        stop_ensemble_gradient: false,
    };

    #[test]
    fn l2_hand_values() {
        let g = Tensor::scalar(1.0).unwrap();
        let p = Tensor::scalar(0.2).unwrap();
        let v = discrepancy_value(Discrepancy::L2, PredictionKind::Categorical, &g, &p).unwrap();
        assert!((v - 0.64).abs() < 1e-15);
        assert_eq!(
            discrepancy_value(Discrepancy::L2, PredictionKind::Categorical, &p, &p).unwrap(),
            0.0
        );
    }

    #[test]
    fn cross_entropy_of_uniform() {
        let t = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let p = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let v = discrepancy_value(Discrepancy::CrossEntropy, PredictionKind::Categorical, &t, &p).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn binary_cross_entropy_sums_classes() {
        let t = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let p = Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap();
        let v = discrepancy_value(Discrepancy::CrossEntropy, PredictionKind::MultiLabel, &t, &p).unwrap();
        let expected = -(0.5f64.ln()) - (0.75f64.ln());
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_domain() {
        let t = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let p = Tensor::vector(vec![1.5, -0.5]).unwrap();
        assert!(matches!(
            discrepancy_value(Discrepancy::CrossEntropy, PredictionKind::Categorical, &t, &p),
            Err(Error::Domain { .. })
        ));
        // zero probabilities are floored, not rejected
        let p = Tensor::vector(vec![0.0, 1.0]).unwrap();
        let v = discrepancy_value(Discrepancy::CrossEntropy, PredictionKind::Categorical, &t, &p).unwrap();
        assert!((v - -(LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn ensembling_hand_value() {
        let v = total_loss_value(
            &scalar_preds(&[0.2, 0.6]),
            &Tensor::scalar(1.0).unwrap(),
            &LossStructure::ensembling(0.0, Discrepancy::L2),
            NO_STOP,
        )
        .unwrap();
        assert!((v - 0.8).abs() < 1e-15);
    }

    #[test]
    fn codistillation_hand_value() {
        let v = total_loss_value(
            &scalar_preds(&[0.2, 0.6]),
            &Tensor::scalar(1.0).unwrap(),
            &LossStructure::codistillation(1.0, Discrepancy::L2),
            LossOptions::new(PredictionKind::Categorical),
        )
        .unwrap();
        assert!((v - 0.8).abs() < 1e-15, "{v}");
    }

    #[test]
    fn negative_lambda_hand_value() {
        let truth = Tensor::scalar(1.0).unwrap();
        let preds = scalar_preds(&[0.2, 0.6]);
        let ens = total_loss_value(
            &preds,
            &truth,
            &LossStructure::ensembling(-1.5, Discrepancy::L2),
            NO_STOP,
        )
        .unwrap();
        let cod = total_loss_value(
            &preds,
            &truth,
            &LossStructure::codistillation(2.5, Discrepancy::L2),
            NO_STOP,
        )
        .unwrap();
        assert!((ens - 0.92).abs() < 1e-14);
        assert!((cod - 0.92).abs() < 1e-14);
    }

    #[test]
    fn lambda_one_is_pure_ensemble_loss() {
        let truth = Tensor::scalar(1.0).unwrap();
        let preds = scalar_preds(&[0.2, 0.6]);
        let ens = total_loss_value(
            &preds,
            &truth,
            &LossStructure::ensembling(1.0, Discrepancy::L2),
            NO_STOP,
        )
        .unwrap();
        let cod = total_loss_value(
            &preds,
            &truth,
            &LossStructure::codistillation(0.0, Discrepancy::L2),
            NO_STOP,
        )
        .unwrap();
        assert!((ens - 2.0 * 0.36).abs() < 1e-15);
        assert!((cod - 2.0 * 0.36).abs() < 1e-15);
    }

    #[test]
    fn identical_predictions_make_lambda_irrelevant() {
        let truth = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let p = Tensor::matrix(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let preds = vec![p.clone(), p];
        let at = |lambda| {
            total_loss_value(
                &preds,
                &truth,
                &LossStructure::ensembling(lambda, Discrepancy::CrossEntropy),
                NO_STOP,
            )
            .unwrap()
        };
        let reference = at(0.0);
        for lambda in [-2.0, -1.0, 0.5, 1.0] {
            assert!((at(lambda) - reference).abs() < 1e-12);
        }
    }

    #[test]
    fn equivalence_small_run() {
        for n in [1, 2, 3, 5] {
            assert!(verify_equivalence(n, 50, 11).unwrap() < 1e-9);
        }
    }

    fn mlp(widths: &[usize]) -> SingleNetwork {
        SingleNetwork {
            input_dim: 4,
            layers: widths.iter().map(|&w| LayerSpec::dense(w, Activation::Relu)).collect(),
            head: HeadSpec {
                classes: 3,
                kind: HeadKind::Softmax,
            },
        }
    }

    fn widths(layers: &[LayerSpec]) -> Vec<usize> {
        layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { width, .. } => Some(*width),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn fork_table_config() {
        let single = mlp(&[64, 128, 256, 512]);
        let spec = fork_network(&single, 2, 256.0 / 176.0, 2).unwrap();
        assert_eq!(widths(&spec.base), vec![64, 128]);
        assert_eq!(spec.n_branches(), 2);
        for b in &spec.branches {
            assert_eq!(widths(b), vec![176, 352]);
        }
    }

    #[test]
    fn fork_identity() {
        let single = mlp(&[8, 8, 8]);
        let spec = fork_network(&single, 1, 1.0, 1).unwrap();
        let mut flat = spec.base.clone();
        flat.extend(spec.branches[0].clone());
        assert_eq!(flat, single.layers);
    }

    #[test]
    fn fork_halves_branch_params() {
        let single = mlp(&[8, 8]);
        let spec = fork_network(&single, 1, 2.0, 2).unwrap();
        assert_eq!(widths(&spec.base), vec![8]);
        assert!(spec.branches.iter().all(|b| widths(b) == vec![4]));
        // upper dense layer 8→8 has 72 parameters; shrunk 8→4 has 36
        let resolved = spec.resolve().unwrap();
        let per_branch: usize = resolved
            .layers
            .iter()
            .filter(|l| l.section == Section::Branch(0))
            .map(|l| l.inputs * l.outputs + l.outputs)
            .sum();
        assert_eq!(per_branch, 36);
    }

    #[test]
    fn fork_point_bounds() {
        let single = mlp(&[8, 8]);
        assert!(fork_network(&single, 0, 1.5, 2).is_err());
        assert!(fork_network(&single, 3, 1.5, 2).is_err());
        assert!(fork_network(&single, 2, 1.5, 2).is_ok());
        assert!(fork_network(&single, 1, 0.5, 2).is_err());
    }

    #[test]
    fn fork_clamps_zero_width() {
        let single = mlp(&[8, 1]);
        let spec = fork_network(&single, 1, 4.0, 2).unwrap();
        assert_eq!(widths(&spec.branches[0]), vec![1]);
    }

    fn batch(rows: usize) -> Batch {
        Batch::Vectors(Tensor::from_fn(&[rows, 4], |i| ((i * 7 % 11) as f64 - 5.0) / 3.0).unwrap())
    }

    #[test]
    fn single_branch_ensemble_is_the_branch() {
        let spec = NetworkSpec::single(&mlp(&[6]));
        let net = MultiHeadNet::new(spec, 3, BranchInit::Independent).unwrap();
        let out = net.predict(&batch(5)).unwrap();
        assert!(out.ensemble.bits_eq(&out.aux[0]));
    }

    #[test]
    fn identical_branches_agree_with_ensemble() {
        let spec = fork_network(&mlp(&[6, 6]), 1, 1.5, 2).unwrap();
        let net = MultiHeadNet::new(spec, 3, BranchInit::Identical).unwrap();
        let out = net.predict(&batch(5)).unwrap();
        assert!(out.aux[0].bits_eq(&out.aux[1]));
        assert!(out.ensemble.bits_eq(&out.aux[0]));
    }

    #[test]
    fn independent_branches_differ() {
        let spec = fork_network(&mlp(&[6, 6]), 1, 1.5, 2).unwrap();
        let net = MultiHeadNet::new(spec, 3, BranchInit::Independent).unwrap();
        let out = net.predict(&batch(5)).unwrap();
        assert!(!out.aux[0].bits_eq(&out.aux[1]));
        for row in 0..5 {
            let s: f64 = out.ensemble.row(row).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn average_of_two() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.2, 0.8]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.6, 0.4]).unwrap());
        let m = average(&mut g, &[a, b]).unwrap();
        let v = g.value(m).data();
        assert!((v[0] - 0.4).abs() < 1e-15 && (v[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn param_partition_is_exact() {
        let spec = fork_network(&mlp(&[5, 7, 3]), 1, 1.5, 3).unwrap();
        let net = MultiHeadNet::new(spec, 0, BranchInit::Independent).unwrap();
        let info = net.param_info();
        assert_eq!(info.len(), net.params().len());
        let mut names: Vec<_> = info.iter().map(|p| p.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), info.len());
        let base = info.iter().filter(|p| p.section == Section::Base).count();
        let branch: usize = (0..3)
            .map(|b| info.iter().filter(|p| p.section == Section::Branch(b)).count())
            .sum();
        assert_eq!(base + branch, info.len());
    }

    #[test]
    fn forward_binds_params_in_info_order() {
        let spec = fork_network(&mlp(&[5, 7]), 1, 1.5, 2).unwrap();
        let net = MultiHeadNet::new(spec, 0, BranchInit::Independent).unwrap();
        let mut g = Graph::new();
        let pass = net.forward(&mut g, &batch(3), Mode::Train).unwrap();
        let params = net.params();
        assert_eq!(pass.params.len(), params.len());
        for (id, t) in pass.params.iter().zip(params) {
            assert!(g.value(*id).bits_eq(t));
        }
    }

    #[test]
    fn batch_norm_stats_commit_in_train_mode_only() {
        let single = SingleNetwork {
            input_dim: 4,
            layers: vec![
                LayerSpec::BatchNorm,
                LayerSpec::Dense {
                    width: 5,
                    activation: Activation::Relu,
                    batch_norm: true,
                },
            ],
            head: HeadSpec {
                classes: 2,
                kind: HeadKind::Softmax,
            },
        };
        let mut net = MultiHeadNet::new(fork_network(&single, 1, 1.0, 2).unwrap(), 0, BranchInit::Independent).unwrap();
        let before: Vec<Tensor> = net.buffers().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(before.len(), 6);
        let mut g = Graph::new();
        let pass = net.forward(&mut g, &batch(6), Mode::Eval).unwrap();
        net.commit_batch_stats(&g, &pass).unwrap();
        let after_eval: Vec<Tensor> = net.buffers().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(before, after_eval);
        let mut g = Graph::new();
        let pass = net.forward(&mut g, &batch(6), Mode::Train).unwrap();
        net.commit_batch_stats(&g, &pass).unwrap();
        let after_train: Vec<Tensor> = net.buffers().into_iter().map(|(_, t)| t.clone()).collect();
        assert_ne!(before, after_train);
    }

    #[test]
    fn frames_need_pooling() {
        let single = SingleNetwork {
            input_dim: 3,
            layers: vec![
                LayerSpec::dense(4, Activation::Relu),
                LayerSpec::ContextGate,
                LayerSpec::SwapPool,
                LayerSpec::dense(4, Activation::Relu),
            ],
            head: HeadSpec {
                classes: 2,
                kind: HeadKind::Moe { experts: 2 },
            },
        };
        let spec = fork_network(&single, 3, 1.5, 2).unwrap();
        let net = MultiHeadNet::new(spec.clone(), 1, BranchInit::Independent).unwrap();
        let frames = Batch::Frames {
            frames: Tensor::from_fn(&[5, 3], |i| (i as f64 * 0.37).sin()).unwrap(),
            counts: vec![2, 3],
        };
        let out = net.predict(&frames).unwrap();
        assert_eq!(out.ensemble.shape(), &[2, 2]);
        assert!(out.ensemble.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(net.predict(&batch(2)).is_err());

        let mut bad = spec;
        bad.branches[1].push(LayerSpec::SwapPool);
        assert!(bad.validate().is_err());
    }
}

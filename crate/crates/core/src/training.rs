//! Optimizers, learning-rate schedules, label smoothing and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::data::Dataset;
use crate::ensemble::{discrepancy_value, total_loss, LossOptions, LossStructure, MultiHeadNet, PredictionKind};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::{score_head, HeadId, HeadMetrics};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
/// Stream of the run seed reserved for shuffling; parameter init uses the
/// low streams.
pub const SHUFFLE_STREAM: u64 = u64::MAX;
/// Rows per forward pass when evaluating a whole split.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Momentum { coefficient: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn momentum() -> Self {
        OptimizerKind::Momentum {
            coefficient: DEFAULT_MOMENTUM,
        }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Names of the per-parameter slot tensors, in storage order.
    pub fn slot_names(&self) -> &'static [&'static str] {
        match self {
            OptimizerKind::Momentum { .. } => &["velocity"],
            OptimizerKind::Adam { .. } => &["m", "v"],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerKind::Momentum { coefficient } => (0.0..1.0).contains(&coefficient),
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("optimizer coefficients out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Updates applied so far; drives Adam's bias correction.
    pub step: u64,
    /// Per parameter, one tensor per entry of [`OptimizerKind::slot_names`].
    pub slots: Vec<Vec<Tensor>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, shapes: &[&[usize]]) -> Self {
        let per = kind.slot_names().len();
        OptimizerState {
            kind,
            step: 0,
            slots: shapes.iter().map(|s| vec![Tensor::zeros(s); per]).collect(),
        }
    }

    pub fn for_net(kind: OptimizerKind, net: &MultiHeadNet) -> Self {
        let params = net.params();
        let shapes: Vec<&[usize]> = params.iter().map(|t| t.shape()).collect();
        OptimizerState::new(kind, &shapes)
    }

    /// Applies one update in place. On error nothing is modified.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.slots.len() {
            return Err(Error::invalid(format!(
                "{} parameters, {} gradients, {} optimizer slots",
                params.len(),
                grads.len(),
                self.slots.len()
            )));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer_step" });
            }
        }
        let t = self.step + 1;
        let mut updates = Vec::with_capacity(params.len());
        for ((p, g), slots) in params.iter().zip(grads).zip(&self.slots) {
            let (w, g) = (p.data(), g.data());
            let new = match self.kind {
                OptimizerKind::Momentum { coefficient } => {
                    let v: Vec<f64> = slots[0]
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(v, g)| coefficient * v + g)
                        .collect();
                    let w: Vec<f64> = w.iter().zip(&v).map(|(w, v)| w - lr * v).collect();
                    (w, vec![v])
                }
                OptimizerKind::Adam { beta1, beta2, epsilon } => {
                    let c1 = 1.0 - beta1.powi(t as i32);
                    let c2 = 1.0 - beta2.powi(t as i32);
                    let m: Vec<f64> = slots[0]
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(m, g)| beta1 * m + (1.0 - beta1) * g)
                        .collect();
                    let v: Vec<f64> = slots[1]
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(v, g)| beta2 * v + (1.0 - beta2) * g * g)
                        .collect();
                    let w: Vec<f64> = w
                        .iter()
                        .zip(m.iter().zip(&v))
                        .map(|(w, (m, v))| w - lr * (m / c1) / ((v / c2).sqrt() + epsilon))
                        .collect();
                    (w, vec![m, v])
                }
            };
            let shape = p.shape().to_vec();
            let w = Tensor::new(shape.clone(), new.0).map_err(|_| Error::NonFinite { op: "optimizer_step" })?;
            let s = new
                .1
                .into_iter()
                .map(|d| Tensor::new(shape.clone(), d))
                .collect::<Result<Vec<_>>>()
                .map_err(|_| Error::NonFinite { op: "optimizer_step" })?;
            updates.push((w, s));
        }
        for ((p, slots), (w, s)) in params.iter_mut().zip(&mut self.slots).zip(updates) {
            **p = w;
            *slots = s;
        }
        self.step = t;
        Ok(())
    }
}

pub fn optimizer_step(
    state: &mut OptimizerState,
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    lr: f64,
) -> Result<()> {
    state.apply(params, grads, lr)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Interval {
    Epochs(f64),
    Examples(u64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant {
        lr: f64,
    },
    /// `base · factor^⌊progress / interval⌋`.
    StepDecay {
        base: f64,
        factor: f64,
        interval: Interval,
    },
    /// `0.5 · base · (1 + cos(π · step / total))`, zero from `total` on.
    /// A total of 0 stretches the schedule over the whole run.
    HalfCosine {
        base: f64,
        total_steps: u64,
    },
}

impl Schedule {
    pub fn base_lr(&self) -> f64 {
        match *self {
            Schedule::Constant { lr } => lr,
            Schedule::StepDecay { base, .. } | Schedule::HalfCosine { base, .. } => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr() > 0.0) || !self.base_lr().is_finite() {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if let Schedule::StepDecay { factor, interval, .. } = *self {
            let interval_ok = match interval {
                Interval::Epochs(e) => e > 0.0 && e.is_finite(),
                Interval::Examples(n) => n > 0,
            };
            if !interval_ok || !factor.is_finite() || factor <= 0.0 {
                return Err(Error::invalid("step decay needs a positive factor and interval"));
            }
        }
        Ok(())
    }

    /// Learning rate for the update numbered `step` (from 0).
    pub fn lr_at(&self, step: u64, steps_per_epoch: u64, batch_size: usize) -> f64 {
        match *self {
            Schedule::Constant { lr } => lr,
            Schedule::StepDecay { base, factor, interval } => {
                let decays = match interval {
                    Interval::Epochs(every) => (step as f64 / steps_per_epoch.max(1) as f64 / every).floor(),
                    Interval::Examples(every) => ((step * batch_size as u64) / every) as f64,
                };
                base * factor.powf(decays)
            }
            Schedule::HalfCosine { base, total_steps } => {
                if step >= total_steps {
                    0.0
                } else {
                    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
                }
            }
        }
    }
}

pub fn lr_at(schedule: &Schedule, step: u64, steps_per_epoch: u64, batch_size: usize) -> f64 {
    schedule.lr_at(step, steps_per_epoch, batch_size)
}

/// `(1 − ε)·onehot + ε/K` row by row.
pub fn smooth_labels(onehot: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid("label smoothing must lie in [0, 1)"));
    }
    if onehot.rank() != 2 {
        return Err(Error::invalid("labels must be [batch × classes]"));
    }
    let k = onehot.shape()[1];
    for r in 0..onehot.shape()[0] {
        let row = onehot.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("row {r} is not one-hot")));
        }
    }
    onehot.map(|v| (1.0 - epsilon) * v + epsilon / k as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    /// Coefficient `c` of the `c/2 · Σw²` penalty on weights and batch-norm γ.
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub loss: LossStructure,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label smoothing must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        self.optimizer.validate()?;
        self.schedule.validate()
    }

    fn schedule_for(&self, steps_per_epoch: u64) -> Schedule {
        match self.schedule {
            Schedule::HalfCosine { base, total_steps: 0 } => Schedule::HalfCosine {
                base,
                total_steps: self.epochs as u64 * steps_per_epoch,
            },
            s => s,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Holdout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub split: Split,
    pub metrics: HeadMetrics,
}

/// Consecutive batches over a permutation. A trailing single example joins
/// the batch before it so batch statistics always see two rows.
pub fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size.max(1)).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * batch_size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

pub fn steps_per_epoch(examples: usize, batch_size: usize) -> u64 {
    let order: Vec<usize> = (0..examples).collect();
    batches(&order, batch_size).len() as u64
}

fn prediction_kind(net: &MultiHeadNet) -> PredictionKind {
    net.spec().head.kind.prediction()
}

/// Per-head and ensemble metrics of `net` on a whole dataset, in eval mode.
/// The loss column is the discrepancy against unsmoothed labels.
pub fn evaluate(net: &MultiHeadNet, data: &Dataset, loss: &LossStructure) -> Result<Vec<HeadMetrics>> {
    let n = data.len();
    let heads = net.n_branches();
    let mut aux: Vec<Vec<f64>> = vec![Vec::new(); heads];
    let mut ens = Vec::new();
    let all: Vec<usize> = (0..n).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let out = net.predict(&data.batch(chunk)?)?;
        for (acc, t) in aux.iter_mut().zip(&out.aux) {
            acc.extend_from_slice(t.data());
        }
        ens.extend_from_slice(out.ensemble.data());
    }
    let k = data.classes();
    let truth = data.targets(&all, 0.0)?;
    let kind = prediction_kind(net);
    let mut rows = Vec::with_capacity(heads + 1);
    let mut score = |head: HeadId, data_vec: Vec<f64>| -> Result<()> {
        let scores = Tensor::matrix(n, k, data_vec)?;
        let l = discrepancy_value(loss.discrepancy, kind, &truth, &scores)?;
        rows.push(score_head(head, &scores, data.labels(), l)?);
        Ok(())
    };
    for (i, a) in aux.into_iter().enumerate() {
        score(HeadId::Branch(i), a)?;
    }
    score(HeadId::Ensemble, ens)?;
    Ok(rows)
}

/// Mutable state of a training run; everything needed to resume it.
#[derive(Clone, Debug)]
pub struct Session {
    pub net: MultiHeadNet,
    pub optimizer: OptimizerState,
    /// Updates applied so far.
    pub step: u64,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Shuffling RNG.
    pub rng: ChaCha8Rng,
    pub log: Vec<EpochRecord>,
}

pub fn shuffle_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM);
    rng
}

fn divergence_reason(err: &Error) -> Option<String> {
    match err {
        Error::NonFinite { op } => Some(format!("non-finite value in {op}")),
        Error::NanGradient { node, op } => Some(format!("NaN gradient at node {} ({op})", node.index())),
        _ => None,
    }
}

impl Session {
    pub fn new(net: MultiHeadNet, config: &TrainConfig) -> Self {
        Session {
            optimizer: OptimizerState::for_net(config.optimizer, &net),
            net,
            step: 0,
            epoch: 0,
            rng: shuffle_rng(config.seed),
            log: Vec::new(),
        }
    }

    fn objective(
        &self,
        g: &mut Graph,
        data: &Dataset,
        idx: &[usize],
        cfg: &TrainConfig,
    ) -> Result<(NodeId, crate::ensemble::ForwardPass)> {
        let batch = data.batch(idx)?;
        let truth = data.targets(idx, cfg.label_smoothing)?;
        let pass = self.net.forward(g, &batch, Mode::Train)?;
        let t = g.constant(truth);
        let terms = total_loss(
            g,
            &pass.aux,
            pass.ensemble,
            t,
            &cfg.loss,
            LossOptions::new(prediction_kind(&self.net)),
        )?;
        let mut objective = terms.total;
        if cfg.weight_decay > 0.0 {
            let info = self.net.param_info();
            let mut penalty: Option<NodeId> = None;
            for (&id, p) in pass.params.iter().zip(&info) {
                if !p.decays {
                    continue;
                }
                let sq = g.square(id)?;
                let s = g.sum(sq)?;
                penalty = Some(match penalty {
                    Some(acc) => g.add(acc, s)?,
                    None => s,
                });
            }
            if let Some(p) = penalty {
                let p = g.scale(p, cfg.weight_decay / 2.0)?;
                objective = g.add(objective, p)?;
            }
        }
        Ok((objective, pass))
    }

    /// One optimizer update on the given examples; returns the objective.
    pub fn train_step(&mut self, data: &Dataset, idx: &[usize], cfg: &TrainConfig, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let (objective, pass) = self.objective(&mut g, data, idx, cfg)?;
        let value = g.value(objective).data()[0];
        let grads = g.backprop(objective)?;
        let grads: Vec<&Tensor> = pass
            .params
            .iter()
            .map(|&id| grads.get(id).ok_or(Error::UnknownNode(id)))
            .collect::<Result<_>>()?;
        self.optimizer.apply(&mut self.net.params_mut(), &grads, lr)?;
        self.net.commit_batch_stats(&g, &pass)?;
        self.step += 1;
        Ok(value)
    }

    /// Trains one epoch, then evaluates every head on both splits and appends
    /// the rows to the log.
    pub fn run_epoch(&mut self, train: &Dataset, holdout: Option<&Dataset>, cfg: &TrainConfig) -> Result<()> {
        let spe = steps_per_epoch(train.len(), cfg.batch_size);
        let schedule = cfg.schedule_for(spe);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let epoch = self.epoch + 1;
        for idx in batches(&order, cfg.batch_size) {
            let lr = schedule.lr_at(self.step, spe, cfg.batch_size);
            let outcome = self.train_step(train, idx, cfg, lr);
            match outcome {
                Ok(v) if v.is_finite() => {}
                Ok(_) => return Err(self.diverged(epoch, "loss is not finite".into())),
                Err(e) => {
                    return Err(match divergence_reason(&e) {
                        Some(reason) => self.diverged(epoch, reason),
                        None => e,
                    })
                }
            }
        }
        self.epoch = epoch;
        for (split, data) in [(Split::Train, Some(train)), (Split::Holdout, holdout)] {
            let Some(data) = data else { continue };
            for metrics in evaluate(&self.net, data, &cfg.loss)? {
                self.log.push(EpochRecord { epoch, split, metrics });
            }
        }
        Ok(())
    }

    fn diverged(&self, epoch: usize, reason: String) -> Error {
        Error::Diverged {
            epoch,
            step: self.step,
            reason,
            log: self.log.clone(),
        }
    }

    /// Runs until `cfg.epochs` epochs are complete, calling `after_epoch`
    /// after each one.
    pub fn run(
        &mut self,
        train: &Dataset,
        holdout: Option<&Dataset>,
        cfg: &TrainConfig,
        mut after_epoch: impl FnMut(&Session) -> Result<()>,
    ) -> Result<()> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        while self.epoch < cfg.epochs {
            self.run_epoch(train, holdout, cfg)?;
            after_epoch(self)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub net: MultiHeadNet,
    pub log: Vec<EpochRecord>,
}

pub fn train(
    net: MultiHeadNet,
    data: &Dataset,
    holdout: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut session = Session::new(net, config);
    session.run(data, holdout, config, |_| Ok(()))?;
    Ok(TrainOutcome {
        net: session.net,
        log: session.log,
    })
}

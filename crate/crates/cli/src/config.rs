//! Experiment configuration: a sectioned TOML file.
//!
//! ```toml
//! [data]
//! source = "gaussian"
//! classes = 4
//!
//! [model]
//! widths = [32, 64, 64]
//! fork_point = 1
//! branches = 2
//!
//! [loss]
//! structure = "codistillation"
//! mu = 2.0
//!
//! [training]
//! epochs = 20
//!
//! [output]
//! dir = "runs"
//! seeds = [1, 2, 3]
//! ```
//!
//! Every field except the section headers has a default; `echo` writes the
//! fully resolved form, which parses back to the same value.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use codistill::data::{gen_frame_sequences, gen_gaussian_mixture, load_table, FrameTask, GaussianMixture};
use codistill::ensemble::{fork_network, LayerSpec};
use codistill::training::Interval;
use codistill::{
    Activation, BranchInit, Dataset, Discrepancy, HeadKind, HeadSpec, LossStructure, NetworkSpec, OptimizerKind,
    Schedule, SingleNetwork, SplitSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub training: TrainingSection,
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Single-label Gaussian clusters.
    Gaussian,
    /// Multi-label frame sequences.
    Frames,
    /// A CSV table with a `label` column.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub noise: f64,
    pub label_noise: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
    /// Fraction held out for evaluation; 0 trains on everything.
    pub holdout: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Gaussian,
            path: None,
            classes: 4,
            dim: 8,
            per_class: 50,
            spread: 1.0,
            noise: 1.0,
            label_noise: 0.0,
            min_frames: 4,
            max_frames: 8,
            seed: 0,
            holdout: 0.25,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    None,
    Relu,
    Relu6,
    Sigmoid,
}

impl From<ActivationName> for Activation {
    fn from(a: ActivationName) -> Self {
        match a {
            ActivationName::None => Activation::None,
            ActivationName::Relu => Activation::Relu,
            ActivationName::Relu6 => Activation::Relu6,
            ActivationName::Sigmoid => Activation::Sigmoid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadName {
    Softmax,
    Moe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    Independent,
    Identical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Hidden dense widths of the unforked network, bottom to top.
    pub widths: Vec<usize>,
    pub activation: ActivationName,
    pub batch_norm: bool,
    /// Frame data only: SWAP pooling goes after this many dense layers.
    pub pool_at: usize,
    /// Adds a context gate directly after pooling (frame data) or after the
    /// last dense layer (vector data).
    pub context_gate: bool,
    /// Layers kept in the shared base; the rest is duplicated per branch.
    pub fork_point: usize,
    pub shrink_ratio: f64,
    pub branches: usize,
    pub head: HeadName,
    pub experts: usize,
    pub init: InitName,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            widths: vec![32, 32],
            activation: ActivationName::Relu,
            batch_norm: false,
            pool_at: 1,
            context_gate: false,
            fork_point: 1,
            shrink_ratio: 1.5,
            branches: 1,
            head: HeadName::Softmax,
            experts: 2,
            init: InitName::Independent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureName {
    Ensembling,
    Codistillation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyName {
    CrossEntropy,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub structure: StructureName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default = "default_discrepancy")]
    pub discrepancy: DiscrepancyName,
}

fn default_discrepancy() -> DiscrepancyName {
    DiscrepancyName::CrossEntropy
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Momentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    Constant,
    Step,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerName,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub schedule: ScheduleName,
    pub lr: f64,
    /// Step schedule: multiply by this every `decay_epochs` epochs, or every
    /// `decay_examples` examples when that is set.
    pub decay_factor: f64,
    pub decay_epochs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_examples: Option<u64>,
    /// Cosine schedule length in steps; 0 spans the whole run.
    pub total_steps: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            epochs: 10,
            batch_size: 32,
            label_smoothing: 0.0,
            weight_decay: codistill::training::DEFAULT_WEIGHT_DECAY,
            optimizer: OptimizerName::Momentum,
            momentum: codistill::training::DEFAULT_MOMENTUM,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            schedule: ScheduleName::Cosine,
            lr: 0.05,
            decay_factor: 0.1,
            decay_epochs: 30.0,
            decay_examples: None,
            total_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs"),
            seeds: vec![0],
            checkpoint_every: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Fully resolved TOML; parses back to `self`.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.data;
        match d.source {
            DataSource::File if d.path.is_none() => bail!("data.path: required when data.source = \"file\""),
            DataSource::Gaussian | DataSource::Frames if d.path.is_some() => {
                bail!("data.path: only allowed when data.source = \"file\"")
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&d.holdout) {
            bail!("data.holdout: must lie in [0, 1), got {}", d.holdout);
        }
        let m = &self.model;
        if m.branches == 0 {
            bail!("model.branches: must be at least 1");
        }
        if m.shrink_ratio.is_nan() || m.shrink_ratio < 1.0 {
            bail!("model.shrink_ratio: must be at least 1, got {}", m.shrink_ratio);
        }
        if m.widths.contains(&0) {
            bail!("model.widths: widths must be positive");
        }
        if m.head == HeadName::Moe && m.experts == 0 {
            bail!("model.experts: must be at least 1");
        }
        if d.source == DataSource::Frames && m.pool_at > m.widths.len() {
            bail!(
                "model.pool_at: {} exceeds the {} dense layers",
                m.pool_at,
                m.widths.len()
            );
        }
        let l = &self.loss;
        match (l.structure, l.lambda, l.mu) {
            (StructureName::Ensembling, Some(_), None) | (StructureName::Codistillation, None, Some(_)) => {}
            (StructureName::Ensembling, _, Some(_)) => bail!("loss.mu: not allowed with the ensembling structure"),
            (StructureName::Ensembling, None, _) => bail!("loss.lambda: required by the ensembling structure"),
            (StructureName::Codistillation, Some(_), _) => {
                bail!("loss.lambda: not allowed with the codistillation structure")
            }
            (StructureName::Codistillation, None, None) => bail!("loss.mu: required by the codistillation structure"),
        }
        if l.lambda.is_some_and(|v| !v.is_finite()) || l.mu.is_some_and(|v| !v.is_finite()) {
            bail!("loss: weights must be finite");
        }
        if self.output.seeds.is_empty() {
            bail!("output.seeds: at least one seed is required");
        }
        let t = &self.training;
        if t.batch_size == 0 {
            bail!("training.batch_size: must be positive");
        }
        self.train_config(0).validate().context("training")?;
        Ok(())
    }

    pub fn loss_structure(&self) -> LossStructure {
        let l = match self.loss.discrepancy {
            DiscrepancyName::CrossEntropy => Discrepancy::CrossEntropy,
            DiscrepancyName::L2 => Discrepancy::L2,
        };
        match self.loss.structure {
            StructureName::Ensembling => LossStructure::ensembling(self.loss.lambda.unwrap_or(0.0), l),
            StructureName::Codistillation => LossStructure::codistillation(self.loss.mu.unwrap_or(0.0), l),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.training;
        let optimizer = match t.optimizer {
            OptimizerName::Momentum => OptimizerKind::Momentum {
                coefficient: t.momentum,
            },
            OptimizerName::Adam => OptimizerKind::Adam {
                beta1: t.beta1,
                beta2: t.beta2,
                epsilon: t.adam_epsilon,
            },
        };
        let schedule = match t.schedule {
            ScheduleName::Constant => Schedule::Constant { lr: t.lr },
            ScheduleName::Step => Schedule::StepDecay {
                base: t.lr,
                factor: t.decay_factor,
                interval: t
                    .decay_examples
                    .map_or(Interval::Epochs(t.decay_epochs), Interval::Examples),
            },
            ScheduleName::Cosine => Schedule::HalfCosine {
                base: t.lr,
                total_steps: t.total_steps,
            },
        };
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            label_smoothing: t.label_smoothing,
            weight_decay: t.weight_decay,
            seed,
            optimizer,
            schedule,
            loss: self.loss_structure(),
        }
    }

    pub fn branch_init(&self) -> BranchInit {
        match self.model.init {
            InitName::Independent => BranchInit::Independent,
            InitName::Identical => BranchInit::Identical,
        }
    }

    /// The unforked network for data of this shape.
    pub fn single_network(&self, input_dim: usize, classes: usize, frames: bool) -> SingleNetwork {
        let m = &self.model;
        let act = Activation::from(m.activation);
        let dense = |w: usize| LayerSpec::Dense {
            width: w,
            activation: act,
            batch_norm: m.batch_norm,
        };
        let mut layers = Vec::new();
        for (i, &w) in m.widths.iter().enumerate() {
            if frames && i == m.pool_at {
                push_pool(&mut layers, m.context_gate);
            }
            layers.push(dense(w));
        }
        if frames && m.pool_at == m.widths.len() {
            push_pool(&mut layers, m.context_gate);
        } else if !frames && m.context_gate {
            layers.push(LayerSpec::ContextGate);
        }
        let kind = match m.head {
            HeadName::Softmax => HeadKind::Softmax,
            HeadName::Moe => HeadKind::Moe { experts: m.experts },
        };
        SingleNetwork {
            input_dim,
            layers,
            head: HeadSpec { classes, kind },
        }
    }

    /// The forked network; one branch means the plain single network.
    pub fn network(&self, input_dim: usize, classes: usize, frames: bool) -> anyhow::Result<NetworkSpec> {
        let single = self.single_network(input_dim, classes, frames);
        if self.model.branches == 1 {
            return Ok(NetworkSpec::single(&single));
        }
        fork_network(
            &single,
            self.model.fork_point,
            self.model.shrink_ratio,
            self.model.branches,
        )
        .context("model.fork_point")
    }

    pub fn dataset(&self) -> anyhow::Result<Dataset> {
        let d = &self.data;
        let data = match d.source {
            DataSource::Gaussian => gen_gaussian_mixture(&GaussianMixture {
                classes: d.classes,
                dim: d.dim,
                per_class: d.per_class,
                spread: d.spread,
                noise: d.noise,
                label_noise: d.label_noise,
                seed: d.seed,
            })
            .context("data")?,
            DataSource::Frames => gen_frame_sequences(&FrameTask {
                classes: d.classes,
                dim: d.dim,
                min_frames: d.min_frames,
                max_frames: d.max_frames,
                per_class: d.per_class,
                noise: d.noise,
                seed: d.seed,
            })
            .context("data")?,
            DataSource::File => load_table(d.path.as_ref().expect("validated")).context("data.path")?,
        };
        Ok(data)
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            holdout: self.data.holdout,
            seed: self.data.split_seed,
        }
    }
}

fn push_pool(layers: &mut Vec<LayerSpec>, gate: bool) {
    layers.push(LayerSpec::SwapPool);
    if gate {
        layers.push(LayerSpec::ContextGate);
    }
}

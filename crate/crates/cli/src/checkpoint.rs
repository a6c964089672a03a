//! Binary checkpoints. Little-endian throughout:
//!
//! ```text
//! "CDST"  u32 version
//! u32 n  n bytes   resolved config (TOML)
//! u64 seed  u64 input_dim  u64 classes  u8 frames
//! u64 step  u64 epoch  u64 optimizer_step
//! 32 bytes rng key  u64 rng stream  u128 rng word position
//! u32 count, then per tensor:
//!   u32 n  n bytes name  u32 ndim  ndim × u64 dims  len × f64 data
//! ```
//!
//! Tensors are the parameters, then batch-norm buffers, then optimizer slots
//! named `optim.<slot>.<parameter>`.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context};
use codistill::training::OptimizerState;
use codistill::{MultiHeadNet, Session, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;

pub const MAGIC: &[u8; 4] = b"CDST";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            key: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub seed: u64,
    pub input_dim: usize,
    pub classes: usize,
    pub frames: bool,
    pub step: u64,
    pub epoch: u64,
    pub optimizer_step: u64,
    pub rng: RngState,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(config: &ExperimentConfig, seed: u64, shape: (usize, usize, bool), session: &Session) -> Self {
        let info = session.net.param_info();
        let mut tensors: Vec<(String, Tensor)> = info
            .iter()
            .zip(session.net.params())
            .map(|(i, t)| (i.name.clone(), t.clone()))
            .collect();
        tensors.extend(session.net.buffers().into_iter().map(|(n, t)| (n, t.clone())));
        let slots = session.optimizer.kind.slot_names();
        for (s, slot) in slots.iter().enumerate() {
            for (i, per_param) in info.iter().zip(&session.optimizer.slots) {
                tensors.push((format!("optim.{slot}.{}", i.name), per_param[s].clone()));
            }
        }
        Checkpoint {
            config: config.echo(),
            seed,
            input_dim: shape.0,
            classes: shape.1,
            frames: shape.2,
            step: session.step,
            epoch: session.epoch as u64,
            optimizer_step: session.optimizer.step,
            rng: RngState::capture(&session.rng),
            tensors,
        }
    }

    pub fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config).context("checkpoint config")
    }

    /// Rebuilds the training session this checkpoint was taken from.
    pub fn restore(&self) -> anyhow::Result<(ExperimentConfig, Session)> {
        let cfg = self.experiment()?;
        let spec = cfg.network(self.input_dim, self.classes, self.frames)?;
        let mut net = MultiHeadNet::new(spec, self.seed, cfg.branch_init())?;
        let train_cfg = cfg.train_config(self.seed);
        let mut pool: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for (name, t) in &self.tensors {
            ensure!(pool.insert(name, t).is_none(), "checkpoint repeats tensor {name:?}");
        }
        let mut take = |name: &str, dst: &mut Tensor| -> anyhow::Result<()> {
            let src = pool
                .remove(name)
                .ok_or_else(|| anyhow!("checkpoint lacks tensor {name:?}"))?;
            ensure!(
                src.shape() == dst.shape(),
                "tensor {name:?}: checkpoint shape {:?}, model shape {:?}",
                src.shape(),
                dst.shape()
            );
            *dst = src.clone();
            Ok(())
        };
        let info = net.param_info();
        for (i, dst) in info.iter().zip(net.params_mut()) {
            take(&i.name, dst)?;
        }
        let names: Vec<String> = net.buffers().into_iter().map(|(n, _)| n).collect();
        for (n, dst) in names.iter().zip(net.buffers_mut()) {
            take(n, dst)?;
        }
        let mut optimizer = OptimizerState::for_net(train_cfg.optimizer, &net);
        optimizer.step = self.optimizer_step;
        for (s, slot) in train_cfg.optimizer.slot_names().iter().enumerate() {
            for (i, per_param) in info.iter().zip(optimizer.slots.iter_mut()) {
                take(&format!("optim.{slot}.{}", i.name), &mut per_param[s])?;
            }
        }
        if let Some(extra) = pool.keys().next() {
            bail!("checkpoint has unexpected tensor {extra:?}");
        }
        let mut session = Session::new(net, &train_cfg);
        session.optimizer = optimizer;
        session.step = self.step;
        session.epoch = usize::try_from(self.epoch)?;
        session.rng = self.rng.restore();
        Ok((cfg, session))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        for v in [self.seed, self.input_dim as u64, self.classes as u64] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.frames as u8);
        for v in [self.step, self.epoch, self.optimizer_step] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.rng.key);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> anyhow::Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(4)? == MAGIC, "not a checkpoint (bad magic)");
        let version = r.u32()?;
        ensure!(
            version == VERSION,
            "checkpoint version {version} is not supported (expected {VERSION})"
        );
        let config = r.string()?;
        let seed = r.u64()?;
        let input_dim = r.u64()? as usize;
        let classes = r.u64()? as usize;
        let frames = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => bail!("bad frames flag {b}"),
        };
        let step = r.u64()?;
        let epoch = r.u64()?;
        let optimizer_step = r.u64()?;
        let key: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| Ok(r.u64()? as usize))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| anyhow!("tensor {name:?}: shape overflows"))?;
            ensure!(len <= r.remaining() / 8, "tensor {name:?}: truncated data");
            let data = (0..len)
                .map(|_| Ok(f64::from_le_bytes(r.take(8)?.try_into()?)))
                .collect::<anyhow::Result<_>>()?;
            let t = Tensor::new(shape, data).with_context(|| format!("tensor {name:?}"))?;
            tensors.push((name, t));
        }
        ensure!(
            r.remaining() == 0,
            "{} trailing bytes after the last tensor",
            r.remaining()
        );
        Ok(Checkpoint {
            config,
            seed,
            input_dim,
            classes,
            frames,
            step,
            epoch,
            optimizer_step,
            rng: RngState { key, stream, word_pos },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.to_bytes()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> anyhow::Result<&'a [u8]> {
        ensure!(n <= self.remaining(), "checkpoint truncated at byte {}", self.pos);
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> anyhow::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into()?))
    }

    fn u64(&mut self) -> anyhow::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into()?))
    }

    fn string(&mut self) -> anyhow::Result<String> {
        let n = self.u32()? as usize;
        Ok(std::str::from_utf8(self.take(n)?)?.to_owned())
    }
}

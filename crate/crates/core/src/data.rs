//! Seeded synthetic datasets and CSV ingestion.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ensemble::Batch;
use crate::error::{Error, Result};
use crate::layers::FrameSequence;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    SingleLabel,
    MultiLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    /// One row per example.
    Vectors(Tensor),
    Frames(Vec<FrameSequence>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    task: Task,
    features: Features,
    /// Sorted, deduplicated class ids per example. Single-label examples hold
    /// exactly one.
    labels: Vec<Vec<usize>>,
    classes: usize,
}

impl Dataset {
    pub fn new(task: Task, features: Features, labels: Vec<Vec<usize>>, classes: usize) -> Result<Self> {
        let n = match &features {
            Features::Vectors(t) => {
                if t.rank() != 2 {
                    return Err(Error::invalid("vector features must be a matrix"));
                }
                t.shape()[0]
            }
            Features::Frames(seqs) => {
                if let Some(first) = seqs.first() {
                    if seqs.iter().any(|s| s.features() != first.features()) {
                        return Err(Error::invalid("frame sequences disagree on feature width"));
                    }
                }
                seqs.len()
            }
        };
        if n == 0 {
            return Err(Error::invalid("dataset is empty"));
        }
        if labels.len() != n {
            return Err(Error::invalid(format!("{n} examples but {} label sets", labels.len())));
        }
        let mut labels = labels;
        for (i, set) in labels.iter_mut().enumerate() {
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(Error::invalid(format!("example {i} has no label")));
            }
            if task == Task::SingleLabel && set.len() != 1 {
                return Err(Error::invalid(format!(
                    "example {i} has {} labels in a single-label task",
                    set.len()
                )));
            }
            if let Some(&c) = set.iter().find(|&&c| c >= classes) {
                return Err(Error::invalid(format!("example {i}: label {c} outside [0, {classes})")));
            }
        }
        Ok(Dataset {
            task,
            features,
            labels,
            classes,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    pub fn labels(&self) -> &[Vec<usize>] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature width (per frame for sequences).
    pub fn dim(&self) -> usize {
        match &self.features {
            Features::Vectors(t) => t.shape()[1],
            Features::Frames(seqs) => seqs[0].features(),
        }
    }

    pub fn is_frames(&self) -> bool {
        matches!(self.features, Features::Frames(_))
    }

    /// Class ids of a single-label dataset.
    pub fn single_labels(&self) -> Option<Vec<usize>> {
        (self.task == Task::SingleLabel).then(|| self.labels.iter().map(|l| l[0]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let features = match &self.features {
            Features::Vectors(t) => Features::Vectors(gather_rows(t, indices)?),
            Features::Frames(seqs) => Features::Frames(indices.iter().map(|&i| seqs[i].clone()).collect()),
        };
        Dataset::new(
            self.task,
            features,
            indices.iter().map(|&i| self.labels[i].clone()).collect(),
            self.classes,
        )
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        match &self.features {
            Features::Vectors(t) => Ok(Batch::Vectors(gather_rows(t, indices)?)),
            Features::Frames(seqs) => {
                let dim = self.dim();
                let mut data = Vec::new();
                let mut counts = Vec::with_capacity(indices.len());
                for &i in indices {
                    data.extend_from_slice(seqs[i].frames().data());
                    counts.push(seqs[i].len());
                }
                let total = counts.iter().sum();
                Ok(Batch::Frames {
                    frames: Tensor::new(vec![total, dim], data)?,
                    counts,
                })
            }
        }
    }

    /// One-hot (single-label) or multi-hot (multi-label) targets, with label
    /// smoothing applied to single-label rows.
    pub fn targets(&self, indices: &[usize], smoothing: f64) -> Result<Tensor> {
        let k = self.classes;
        let mut data = vec![0.0; indices.len() * k];
        for (row, &i) in indices.iter().enumerate() {
            for &c in &self.labels[i] {
                data[row * k + c] = 1.0;
            }
        }
        let hot = Tensor::matrix(indices.len(), k, data)?;
        match self.task {
            Task::SingleLabel if smoothing != 0.0 => crate::training::smooth_labels(&hot, smoothing),
            _ => Ok(hot),
        }
    }

    /// `(example, class)` pairs over the given examples, numbered by position.
    pub fn truth_pairs(&self, indices: &[usize]) -> BTreeSet<(usize, usize)> {
        indices
            .iter()
            .enumerate()
            .flat_map(|(row, &i)| self.labels[i].iter().map(move |&c| (row, c)))
            .collect()
    }
}

fn gather_rows(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let cols = t.shape()[1];
    let mut data = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        if i >= t.shape()[0] {
            return Err(Error::invalid(format!("example index {i} out of range")));
        }
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(indices.len(), cols, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Stddev of the cluster centres around the origin.
    pub spread: f64,
    /// Stddev of points around their centre.
    pub noise: f64,
    /// Fraction of labels reassigned to a different, uniformly chosen class.
    pub label_noise: f64,
    pub seed: u64,
}

/// `K` Gaussian clusters, `per_class` points each, emitted class by class.
pub fn gen_gaussian_mixture(cfg: &GaussianMixture) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.dim == 0 || cfg.per_class == 0 {
        return Err(Error::invalid("classes, dim and per_class must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.label_noise) {
        return Err(Error::invalid("label noise must lie in [0, 1)"));
    }
    if cfg.label_noise > 0.0 && cfg.classes < 2 {
        return Err(Error::invalid("label noise needs at least two classes"));
    }
    let centre_dist = Normal::new(0.0, cfg.spread).map_err(|e| Error::invalid(format!("spread: {e}")))?;
    let point_dist = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centres: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| centre_dist.sample(&mut rng)).collect())
        .collect();
    let total = cfg.classes * cfg.per_class;
    let mut data = Vec::with_capacity(total * cfg.dim);
    let mut labels = Vec::with_capacity(total);
    for (c, centre) in centres.iter().enumerate() {
        for _ in 0..cfg.per_class {
            data.extend(centre.iter().map(|m| m + point_dist.sample(&mut rng)));
            labels.push(c);
        }
    }
    let flips = (cfg.label_noise * total as f64).floor() as usize;
    for i in rand::seq::index::sample(&mut rng, total, flips) {
        let offset = rng.random_range(1..cfg.classes);
        labels[i] = (labels[i] + offset) % cfg.classes;
    }
    Dataset::new(
        Task::SingleLabel,
        Features::Vectors(Tensor::matrix(total, cfg.dim, data)?),
        labels.into_iter().map(|c| vec![c]).collect(),
        cfg.classes,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTask {
    pub classes: usize,
    pub dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub per_class: usize,
    /// Stddev of the additive per-frame noise.
    pub noise: f64,
    pub seed: u64,
}

/// Largest number of classes active in one generated sequence.
pub const MAX_ACTIVE: usize = 3;

/// Multi-label frame sequences. Each class gets a random prototype; an example
/// activates its primary class plus up to two others, and every frame is a
/// positive mix of the active prototypes plus noise.
pub fn gen_frame_sequences(cfg: &FrameTask) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.dim == 0 || cfg.per_class == 0 || cfg.min_frames == 0 {
        return Err(Error::invalid(
            "classes, dim, per_class and min_frames must be positive",
        ));
    }
    if cfg.max_frames < cfg.min_frames {
        return Err(Error::invalid("max_frames must be at least min_frames"));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid(format!("noise: {e}")))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut seqs = Vec::with_capacity(cfg.classes * cfg.per_class);
    let mut labels = Vec::with_capacity(cfg.classes * cfg.per_class);
    for primary in 0..cfg.classes {
        for _ in 0..cfg.per_class {
            let extra = rng.random_range(0..MAX_ACTIVE.min(cfg.classes));
            let mut active = vec![primary];
            let mut others: Vec<usize> = (0..cfg.classes).filter(|&c| c != primary).collect();
            others.shuffle(&mut rng);
            active.extend(others.into_iter().take(extra));
            let n = rng.random_range(cfg.min_frames..=cfg.max_frames);
            let mut data = Vec::with_capacity(n * cfg.dim);
            for _ in 0..n {
                let weights: Vec<f64> = active.iter().map(|_| rng.random_range(0.2..1.0)).collect();
                data.extend((0..cfg.dim).map(|j| {
                    let mix: f64 = active.iter().zip(&weights).map(|(&c, w)| w * prototypes[c][j]).sum();
                    mix + noise.sample(&mut rng)
                }));
            }
            seqs.push(FrameSequence::new(Tensor::matrix(n, cfg.dim, data)?)?);
            labels.push(active);
        }
    }
    Dataset::new(Task::MultiLabel, Features::Frames(seqs), labels, cfg.classes)
}

/// Reads a CSV table with a header row. The `label` column holds a class id
/// or `|`-separated ids; every other column is a numeric feature.
pub fn load_table(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let shown = path.to_path_buf();
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: shown.clone(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| parse_err(1, "header row has no `label` column".into()))?;
    let width = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut multi = false;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut set = Vec::new();
        for field in record[label_col].split('|') {
            let id = field
                .trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("bad label {field:?}")))?;
            set.push(id);
        }
        multi |= set.len() > 1;
        for (j, field) in record.iter().enumerate().filter(|&(j, _)| j != label_col) {
            let v = field
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("column {:?}: non-numeric feature {field:?}", &headers[j])))?;
            data.push(v);
        }
        labels.push(set);
    }
    if labels.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    let classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let task = if multi { Task::MultiLabel } else { Task::SingleLabel };
    let n = labels.len();
    Dataset::new(
        task,
        Features::Vectors(Tensor::matrix(n, width, data)?),
        labels,
        classes,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub holdout: f64,
    pub seed: u64,
}

/// Seeded shuffle, then the first `round(holdout·n)` examples form the
/// holdout set. Returns `(train, holdout)`.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, holdout) = split_indices(data.len(), spec)?;
    Ok((data.subset(&train)?, data.subset(&holdout)?))
}

pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.holdout > 0.0 && spec.holdout < 1.0) {
        return Err(Error::invalid("holdout fraction must lie in (0, 1)"));
    }
    let n_hold = (spec.holdout * n as f64).round() as usize;
    if n_hold == 0 || n_hold >= n {
        return Err(Error::invalid(format!(
            "holdout fraction {} on {n} examples leaves an empty side",
            spec.holdout
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let holdout = perm[..n_hold].to_vec();
    let train = perm[n_hold..].to_vec();
    Ok((train, holdout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn mixture(label_noise: f64, seed: u64) -> GaussianMixture {
        GaussianMixture {
            classes: 4,
            dim: 3,
            per_class: 25,
            spread: 5.0,
            noise: 0.5,
            label_noise,
            seed,
        }
    }

    #[test]
    fn mixture_is_deterministic() {
        let a = gen_gaussian_mixture(&mixture(0.2, 7)).unwrap();
        let b = gen_gaussian_mixture(&mixture(0.2, 7)).unwrap();
        assert_eq!(a, b);
        let c = gen_gaussian_mixture(&mixture(0.2, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn label_noise_flips_exact_count() {
        let clean = gen_gaussian_mixture(&mixture(0.0, 3)).unwrap();
        let noisy = gen_gaussian_mixture(&mixture(0.2, 3)).unwrap();
        // Same feature draws: label noise comes after all points are sampled.
        assert_eq!(clean.features(), noisy.features());
        let flipped = clean
            .labels()
            .iter()
            .zip(noisy.labels())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(flipped, 20);
    }

    #[test]
    fn frames_within_bounds() {
        let cfg = FrameTask {
            classes: 5,
            dim: 4,
            min_frames: 3,
            max_frames: 7,
            per_class: 6,
            noise: 0.1,
            seed: 2,
        };
        let d = gen_frame_sequences(&cfg).unwrap();
        assert_eq!(d, gen_frame_sequences(&cfg).unwrap());
        let Features::Frames(seqs) = d.features() else { panic!() };
        assert!(seqs.iter().all(|s| (3..=7).contains(&s.len())));
        assert!(d
            .labels()
            .iter()
            .all(|l| (1..=3).contains(&l.len()) && l.iter().all(|&c| c < 5)));
    }

    #[test]
    fn one_class_noiseless_frames_pool_to_prototype_direction() {
        let cfg = FrameTask {
            classes: 1,
            dim: 5,
            min_frames: 2,
            max_frames: 6,
            per_class: 4,
            noise: 0.0,
            seed: 9,
        };
        let d = gen_frame_sequences(&cfg).unwrap();
        let Features::Frames(seqs) = d.features() else { panic!() };
        let first = crate::layers::swap_pool(&seqs[0]).unwrap();
        for s in seqs {
            let pooled = crate::layers::swap_pool(s).unwrap();
            let dot: f64 = pooled.data().iter().zip(first.data()).map(|(a, b)| a * b).sum();
            let cos = dot / (pooled.squared_norm() * first.squared_norm()).sqrt();
            assert!((cos - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_half() {
        let d = gen_gaussian_mixture(&GaussianMixture {
            classes: 2,
            dim: 2,
            per_class: 5,
            spread: 1.0,
            noise: 1.0,
            label_noise: 0.0,
            seed: 0,
        })
        .unwrap();
        let spec = SplitSpec { holdout: 0.5, seed: 4 };
        let (train, hold) = split(&d, &spec).unwrap();
        assert_eq!((train.len(), hold.len()), (5, 5));
        let (ti, hi) = split_indices(10, &spec).unwrap();
        let mut all: Vec<usize> = ti.iter().chain(&hi).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split(&d, &spec).unwrap().0, train);
        assert!(split(&d, &SplitSpec { holdout: 0.01, seed: 0 }).is_err());
        assert!(split(&d, &SplitSpec { holdout: 1.0, seed: 0 }).is_err());
    }

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_two_rows() {
        let f = write("x,y,label\n0.5,1.0,0\n-1.0,2.0,1\n");
        let d = load_table(f.path()).unwrap();
        assert_eq!((d.len(), d.classes(), d.dim()), (2, 2, 2));
        assert_eq!(d.task(), Task::SingleLabel);
    }

    #[test]
    fn load_multi_label() {
        let f = write("label,a\n0|3,1.0\n1,2.0\n");
        let d = load_table(f.path()).unwrap();
        assert_eq!(d.task(), Task::MultiLabel);
        assert_eq!(d.labels()[0], vec![0, 3]);
        assert!(d.classes() >= 4);
    }

    #[test]
    fn load_errors_name_lines() {
        let f = write("0.5,1.0,0\n");
        assert!(matches!(load_table(f.path()), Err(Error::Parse { .. })));
        let f = write("x,label\n1.0,0\nabc,1\n");
        match load_table(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let f = write("x,label\n1.0,0\n2.0\n");
        assert!(matches!(load_table(f.path()), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn smoothed_targets() {
        let d = gen_gaussian_mixture(&mixture(0.0, 1)).unwrap();
        let t = d.targets(&[0, 30], 0.1).unwrap();
        assert_eq!(t.shape(), &[2, 4]);
        for r in 0..2 {
            assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!((t.row(0)[0] - 0.925).abs() < 1e-15);
    }
}

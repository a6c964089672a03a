//! Evaluation quantities: top-k accuracy, GAP, mAP, run-to-run uncertainty,
//! and parameter and FLOP counts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::ensemble::{HeadKind, LayerSpec, NetworkSpec, Section};
use crate::error::{Error, Result};
use crate::layers::Activation;
use crate::tensor::Tensor;

/// Predictions kept per example before GAP and mAP are computed.
pub const DEFAULT_CAP: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPrediction {
    pub example: usize,
    pub class: usize,
    pub score: f64,
}

/// Every `(example, class, score)` of a `[batch × classes]` score matrix.
pub fn scored_predictions(scores: &Tensor) -> Vec<ScoredPrediction> {
    let classes = scores.shape()[1];
    scores
        .data()
        .iter()
        .enumerate()
        .map(|(i, &score)| ScoredPrediction {
            example: i / classes,
            class: i % classes,
            score,
        })
        .collect()
}

/// Class ids of one score row, best first, ties to the lower id.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
}

/// Fraction of examples with at least one true class among the `k` highest
/// scores. With one label per example this is ordinary top-k accuracy.
pub fn hit_at_k(scores: &Tensor, labels: &[Vec<usize>], k: usize) -> Result<f64> {
    if scores.rank() != 2 {
        return Err(Error::invalid("scores must be [batch × classes]"));
    }
    let (batch, classes) = (scores.shape()[0], scores.shape()[1]);
    if batch == 0 {
        return Err(Error::invalid("top-k accuracy of an empty batch"));
    }
    if labels.len() != batch {
        return Err(Error::invalid(format!(
            "{batch} score rows but {} label sets",
            labels.len()
        )));
    }
    if k == 0 || k > classes {
        return Err(Error::invalid(format!("k = {k} outside 1..={classes}")));
    }
    let hits = (0..batch)
        .filter(|&i| ranking(scores.row(i))[..k].iter().any(|c| labels[i].contains(c)))
        .count();
    Ok(hits as f64 / batch as f64)
}

pub fn top_k_accuracy(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let sets: Vec<Vec<usize>> = labels.iter().map(|&c| vec![c]).collect();
    hit_at_k(scores, &sets, k)
}

/// Score descending, then example id, then class id.
fn by_rank(a: &ScoredPrediction, b: &ScoredPrediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.example.cmp(&b.example))
        .then(a.class.cmp(&b.class))
}

fn capped(predictions: &[ScoredPrediction], cap: usize) -> Result<Vec<ScoredPrediction>> {
    if cap == 0 {
        return Err(Error::invalid("cap must be at least 1"));
    }
    if predictions.iter().any(|p| !p.score.is_finite()) {
        return Err(Error::NonFinite {
            op: "average_precision",
        });
    }
    let mut per_example: BTreeMap<usize, Vec<ScoredPrediction>> = BTreeMap::new();
    for p in predictions {
        per_example.entry(p.example).or_default().push(*p);
    }
    let mut kept = Vec::new();
    for (_, mut preds) in per_example {
        preds.sort_by(by_rank);
        preds.truncate(cap);
        kept.extend(preds);
    }
    Ok(kept)
}

/// Average precision of a ranked list against `positives` relevant items.
fn average_precision(mut ranked: Vec<ScoredPrediction>, truth: &BTreeSet<(usize, usize)>, positives: usize) -> f64 {
    ranked.sort_by(by_rank);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, p) in ranked.iter().enumerate() {
        if truth.contains(&(p.example, p.class)) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / positives as f64
}

/// Global average precision over the pooled, per-example-capped predictions.
/// Recall is measured against every truth pair, including ones the cap drops.
pub fn gap(predictions: &[ScoredPrediction], truth: &BTreeSet<(usize, usize)>, cap: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::invalid("GAP needs at least one truth pair"));
    }
    Ok(average_precision(capped(predictions, cap)?, truth, truth.len()))
}

/// Mean over classes with at least one truth pair of the per-class average
/// precision across examples.
pub fn map_metric(predictions: &[ScoredPrediction], truth: &BTreeSet<(usize, usize)>, cap: usize) -> Result<f64> {
    let mut positives: BTreeMap<usize, usize> = BTreeMap::new();
    for &(_, c) in truth {
        *positives.entry(c).or_default() += 1;
    }
    if positives.is_empty() {
        return Err(Error::invalid("mAP needs at least one class with truth"));
    }
    let kept = capped(predictions, cap)?;
    let total: f64 = positives
        .iter()
        .map(|(&c, &n)| average_precision(kept.iter().filter(|p| p.class == c).copied().collect(), truth, n))
        .sum();
    Ok(total / positives.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunAggregate {
    pub runs: Vec<f64>,
    pub mean: f64,
    /// `√(Σ(xᵢ − x̄)² / (N(N − 1)))`.
    pub uncertainty: f64,
}

pub fn mean_uncertainty(runs: &[f64]) -> Result<RunAggregate> {
    let n = runs.len();
    if n < 2 {
        return Err(Error::invalid("uncertainty of the mean needs at least two runs"));
    }
    let mean = runs.iter().sum::<f64>() / n as f64;
    let ss: f64 = runs.iter().map(|x| (x - mean).powi(2)).sum();
    Ok(RunAggregate {
        runs: runs.to_vec(),
        mean,
        uncertainty: (ss / (n * (n - 1)) as f64).sqrt(),
    })
}

fn layer_params(spec: &LayerSpec, inputs: usize) -> usize {
    match *spec {
        LayerSpec::Dense {
            width,
            batch_norm: false,
            ..
        } => inputs * width + width,
        LayerSpec::Dense {
            width,
            batch_norm: true,
            ..
        } => inputs * width + 2 * width,
        LayerSpec::BatchNorm => 2 * inputs,
        LayerSpec::ContextGate => inputs * inputs + inputs,
        LayerSpec::SwapPool => 0,
    }
}

fn head_params(kind: HeadKind, inputs: usize, classes: usize) -> usize {
    match kind {
        HeadKind::Softmax => inputs * classes + classes,
        HeadKind::Moe { experts } => 2 * (inputs * classes * experts + classes * experts),
    }
}

/// Trainable scalars per section. Batch-norm running statistics are state,
/// not parameters, and are excluded.
pub fn count_params_by_section(spec: &NetworkSpec) -> Result<BTreeMap<Section, usize>> {
    let resolved = spec.resolve()?;
    let mut out = BTreeMap::new();
    out.insert(Section::Base, 0);
    for l in &resolved.layers {
        *out.entry(l.section).or_default() += layer_params(&l.spec, l.inputs);
    }
    for h in &resolved.heads {
        *out.entry(Section::Branch(h.branch)).or_default() += head_params(h.spec.kind, h.inputs, h.spec.classes);
    }
    Ok(out)
}

pub fn count_params(spec: &NetworkSpec) -> Result<usize> {
    Ok(count_params_by_section(spec)?.values().sum())
}

/// One line of the FLOP table.
#[derive(Clone, Debug, PartialEq)]
pub struct FlopRow {
    pub section: Option<Section>,
    pub layer: String,
    pub formula: String,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlopReport {
    pub rows: Vec<FlopRow>,
    pub total: u64,
}

impl FlopReport {
    pub fn section_total(&self, section: Section) -> u64 {
        self.rows
            .iter()
            .filter(|r| r.section == Some(section))
            .map(|r| r.flops)
            .sum()
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            let section = match r.section {
                Some(Section::Base) => "base".to_string(),
                Some(Section::Branch(b)) => format!("branch{b}"),
                None => "ensemble".to_string(),
            };
            writeln!(f, "{section:<10} {:<24} {:<28} {}", r.layer, r.formula, r.flops)?;
        }
        write!(f, "total {}", self.total)
    }
}

/// The per-layer convention, counting multiplies and adds separately:
///
/// | layer | FLOPs |
/// |---|---|
/// | dense `in→out` | `2·in·out + out` (no `+out` without bias) |
/// | activation | `1` per element |
/// | batch norm, folded | `2·F` |
/// | context gate | `2·F² + F` (dense) `+ F` (sigmoid) `+ F` (product) |
/// | SWAP over `n` frames | `4·n·F + F` |
/// | softmax | `3` per element |
/// | MoE head, `E` experts, `K` classes | `4·in·K·E + 2·K·E` (two dense) `+ 3·K·E` (gate softmax) `+ K·E` (sigmoid) `+ K·E` (product) `+ K·(E−1)` (sum) |
/// | ensembler, `N > 1` | `N·K` |
///
/// Layers before SWAP pooling run once per frame, so their cost is
/// multiplied by `frames`. Counts are per example.
pub fn count_flops(spec: &NetworkSpec, frames: usize) -> Result<FlopReport> {
    let resolved = spec.resolve()?;
    let n = if resolved.frame_input {
        if frames == 0 {
            return Err(Error::invalid("frame count must be positive"));
        }
        frames as u64
    } else {
        1
    };
    let mut rows = Vec::new();
    let mut push = |section: Option<Section>, layer: String, formula: String, flops: u64| {
        rows.push(FlopRow {
            section,
            layer,
            formula,
            flops,
        })
    };
    for l in &resolved.layers {
        let (i, o) = (l.inputs as u64, l.outputs as u64);
        let reps = if l.frame_level && l.spec != LayerSpec::SwapPool {
            n
        } else {
            1
        };
        let per = if reps > 1 {
            format!(" ×{reps} frames")
        } else {
            String::new()
        };
        let name = format!("{}", l.index);
        let s = Some(l.section);
        match l.spec {
            LayerSpec::Dense {
                activation, batch_norm, ..
            } => {
                let act = if activation == Activation::None { 0 } else { o };
                let (flops, formula) = if batch_norm {
                    (2 * i * o + 2 * o + act, format!("2·{i}·{o} + 2·{o} (bn) + {act}"))
                } else {
                    (2 * i * o + o + act, format!("2·{i}·{o} + {o} + {act}"))
                };
                push(
                    s,
                    format!("{name} dense {}", activation.name()),
                    format!("{formula}{per}"),
                    reps * flops,
                );
            }
            LayerSpec::BatchNorm => push(s, format!("{name} batch_norm"), format!("2·{i}{per}"), reps * 2 * i),
            LayerSpec::ContextGate => push(
                s,
                format!("{name} context_gate"),
                format!("2·{i}² + 3·{i}{per}"),
                reps * (2 * i * i + 3 * i),
            ),
            LayerSpec::SwapPool => push(
                s,
                format!("{name} swap_pool"),
                format!("4·{n}·{i} + {i}"),
                4 * n * i + i,
            ),
        }
    }
    for h in &resolved.heads {
        let (i, k) = (h.inputs as u64, h.spec.classes as u64);
        let s = Some(Section::Branch(h.branch));
        match h.spec.kind {
            HeadKind::Softmax => push(
                s,
                "head softmax".into(),
                format!("2·{i}·{k} + {k} + 3·{k}"),
                2 * i * k + 4 * k,
            ),
            HeadKind::Moe { experts } => {
                let e = experts as u64;
                let ke = k * e;
                push(
                    s,
                    format!("head moe×{e}"),
                    format!("4·{i}·{ke} + 7·{ke} + {k}·{}", e - 1),
                    4 * i * ke + 7 * ke + k * (e - 1),
                );
            }
        }
    }
    let branches = spec.n_branches() as u64;
    if branches > 1 {
        let k = spec.head.classes as u64;
        push(None, "ensembler mean".into(), format!("{branches}·{k}"), branches * k);
    }
    let total = rows.iter().map(|r| r.flops).sum();
    Ok(FlopReport { rows, total })
}

/// Which prediction a metric row describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HeadId {
    Branch(usize),
    Ensemble,
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadId::Branch(i) => write!(f, "{i}"),
            HeadId::Ensemble => f.write_str("ensemble"),
        }
    }
}

impl std::str::FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ensemble" {
            return Ok(HeadId::Ensemble);
        }
        s.parse()
            .map(HeadId::Branch)
            .map_err(|_| Error::invalid(format!("bad head id {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadMetrics {
    pub head: HeadId,
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
    pub gap: f64,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub heads: Vec<HeadMetrics>,
    pub params: usize,
    pub flops: u64,
}

impl MetricReport {
    pub fn ensemble(&self) -> Option<&HeadMetrics> {
        self.heads.iter().find(|h| h.head == HeadId::Ensemble)
    }
}

/// Every metric for one score matrix. Top-5 uses `k = min(5, K)`.
pub fn score_head(head: HeadId, scores: &Tensor, labels: &[Vec<usize>], loss: f64) -> Result<HeadMetrics> {
    let classes = scores.shape()[1];
    let truth: BTreeSet<(usize, usize)> = labels
        .iter()
        .enumerate()
        .flat_map(|(i, set)| set.iter().map(move |&c| (i, c)))
        .collect();
    let preds = scored_predictions(scores);
    Ok(HeadMetrics {
        head,
        loss,
        top1: hit_at_k(scores, labels, 1)?,
        top5: hit_at_k(scores, labels, classes.min(5))?,
        gap: gap(&preds, &truth, DEFAULT_CAP)?,
        map: map_metric(&preds, &truth, DEFAULT_CAP)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{fork_network, HeadSpec, SingleNetwork};

    fn p(example: usize, class: usize, score: f64) -> ScoredPrediction {
        ScoredPrediction { example, class, score }
    }

    #[test]
    fn top_k_examples() {
        let s = Tensor::matrix(2, 3, vec![0.1, 0.3, 0.6, 0.5, 0.4, 0.1]).unwrap();
        assert_eq!(top_k_accuracy(&s, &[1, 0], 2).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&s, &[1, 0], 1).unwrap(), 0.5);
        assert_eq!(top_k_accuracy(&s, &[1, 2], 3).unwrap(), 1.0);
        assert!(top_k_accuracy(&s, &[1, 0], 4).is_err());
        let empty = Tensor::new(vec![0, 3], vec![]).unwrap();
        assert!(top_k_accuracy(&empty, &[], 1).is_err());
    }

    #[test]
    fn top_k_ties_prefer_lower_class() {
        let s = Tensor::matrix(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(top_k_accuracy(&s, &[0], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&s, &[1], 1).unwrap(), 0.0);
    }

    #[test]
    fn gap_examples() {
        let truth: BTreeSet<_> = [(0, 1)].into();
        assert_eq!(gap(&[p(0, 1, 0.9), p(0, 0, 0.1)], &truth, 20).unwrap(), 1.0);
        assert_eq!(gap(&[p(0, 0, 0.9), p(0, 1, 0.2)], &truth, 20).unwrap(), 0.5);
        assert!(gap(&[p(0, 0, 0.9)], &BTreeSet::new(), 20).is_err());
        assert!(gap(&[p(0, 0, 0.9)], &truth, 0).is_err());
    }

    #[test]
    fn cap_drops_but_recall_counts_everything() {
        let truth: BTreeSet<_> = [(0, 0), (0, 1)].into();
        // cap 1 keeps only the top prediction; the second truth pair is lost
        let v = gap(&[p(0, 0, 0.9), p(0, 1, 0.8)], &truth, 1).unwrap();
        assert_eq!(v, 0.5);
    }

    #[test]
    fn map_examples() {
        let truth: BTreeSet<_> = [(0, 0), (1, 1)].into();
        let perfect = [p(0, 0, 0.9), p(1, 0, 0.1), p(0, 1, 0.2), p(1, 1, 0.8)];
        assert_eq!(map_metric(&perfect, &truth, 20).unwrap(), 1.0);
        // class 1 ranks example 0 above example 1: AP 0.5
        let half = [p(0, 0, 0.9), p(1, 0, 0.1), p(0, 1, 0.9), p(1, 1, 0.8)];
        assert_eq!(map_metric(&half, &truth, 20).unwrap(), 0.75);
        // class 2 has no truth and does not enter the mean
        let mut extra = perfect.to_vec();
        extra.push(p(0, 2, 0.95));
        assert_eq!(map_metric(&extra, &truth, 20).unwrap(), 1.0);
    }

    #[test]
    fn uncertainty_examples() {
        let r = mean_uncertainty(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.mean, 2.0);
        assert!((r.uncertainty - 0.577350).abs() < 1e-6);
        let r = mean_uncertainty(&[0.0, 0.0, 0.0, 4.0]).unwrap();
        assert_eq!((r.mean, r.uncertainty), (1.0, 1.0));
        assert_eq!(mean_uncertainty(&[0.3, 0.3]).unwrap().uncertainty, 0.0);
        assert!(mean_uncertainty(&[1.0]).is_err());
    }

    fn dense_net(widths: &[usize], input: usize, classes: usize) -> SingleNetwork {
        SingleNetwork {
            input_dim: input,
            layers: widths.iter().map(|&w| LayerSpec::dense(w, Activation::Relu)).collect(),
            head: HeadSpec {
                classes,
                kind: HeadKind::Softmax,
            },
        }
    }

    #[test]
    fn dense_counts() {
        // dense 3→4 with bias (the head here) = 16 params, 28 FLOPs + softmax 12
        let spec = NetworkSpec::single(&SingleNetwork {
            input_dim: 3,
            layers: vec![],
            head: HeadSpec {
                classes: 4,
                kind: HeadKind::Softmax,
            },
        });
        assert_eq!(count_params(&spec).unwrap(), 16);
        assert_eq!(count_flops(&spec, 1).unwrap().total, 28 + 12);
    }

    #[test]
    fn folded_bn_flops() {
        let spec = NetworkSpec::single(&SingleNetwork {
            input_dim: 10,
            layers: vec![LayerSpec::BatchNorm],
            head: HeadSpec {
                classes: 1,
                kind: HeadKind::Softmax,
            },
        });
        let report = count_flops(&spec, 1).unwrap();
        assert_eq!(report.rows[0].flops, 20);
        assert_eq!(count_params(&spec).unwrap(), 20 + 11);
    }

    #[test]
    fn branch_flops_double_base_once() {
        let single = dense_net(&[6, 5], 4, 3);
        let one = fork_network(&single, 1, 1.0, 1).unwrap();
        let two = fork_network(&single, 1, 1.0, 2).unwrap();
        let r1 = count_flops(&one, 1).unwrap();
        let r2 = count_flops(&two, 1).unwrap();
        assert_eq!(r1.section_total(Section::Base), r2.section_total(Section::Base));
        assert_eq!(
            r2.section_total(Section::Branch(1)),
            r1.section_total(Section::Branch(0))
        );
        assert_eq!(
            r2.total,
            r1.section_total(Section::Base) + 2 * r1.section_total(Section::Branch(0)) + 2 * 3
        );
    }

    #[test]
    fn params_partition_and_match_net() {
        let single = SingleNetwork {
            input_dim: 4,
            layers: vec![
                LayerSpec::BatchNorm,
                LayerSpec::Dense {
                    width: 6,
                    activation: Activation::Relu6,
                    batch_norm: true,
                },
                LayerSpec::ContextGate,
                LayerSpec::dense(5, Activation::Relu),
            ],
            head: HeadSpec {
                classes: 3,
                kind: HeadKind::Moe { experts: 2 },
            },
        };
        let spec = fork_network(&single, 2, 1.5, 3).unwrap();
        let sections = count_params_by_section(&spec).unwrap();
        let total = count_params(&spec).unwrap();
        assert_eq!(sections.values().sum::<usize>(), total);
        let net = crate::ensemble::MultiHeadNet::new(spec, 0, crate::ensemble::BranchInit::Independent).unwrap();
        assert_eq!(net.param_count(), total);
    }

    #[test]
    fn head_id_round_trip() {
        for h in [HeadId::Branch(0), HeadId::Branch(12), HeadId::Ensemble] {
            assert_eq!(h.to_string().parse::<HeadId>().unwrap(), h);
        }
    }
}

//! Fixed workloads shared by the benchmarks.

use codistill::data::{gen_gaussian_mixture, GaussianMixture};
use codistill::ensemble::LayerSpec;
use codistill::metrics::ScoredPrediction;
use codistill::{
    fork_network, Activation, BranchInit, Dataset, Discrepancy, HeadKind, HeadSpec, LossStructure, MultiHeadNet,
    OptimizerKind, Schedule, SingleNetwork, Tensor, TrainConfig,
};
use std::collections::BTreeSet;

/// Deterministic pseudo-random values in [−1, 1).
pub fn matrix(rows: usize, cols: usize, salt: u64) -> Tensor {
    Tensor::from_fn(&[rows, cols], |i| {
        let h = (i as u64 ^ salt).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(29);
        (h >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
    .expect("finite")
}

/// The desk-scale forked model on 32 inputs and 10 classes.
pub fn desk_net(seed: u64) -> MultiHeadNet {
    let single = SingleNetwork {
        input_dim: 32,
        layers: [128, 256, 256, 256]
            .iter()
            .map(|&w| LayerSpec::Dense {
                width: w,
                activation: Activation::Relu,
                batch_norm: true,
            })
            .collect(),
        head: HeadSpec {
            classes: 10,
            kind: HeadKind::Softmax,
        },
    };
    let spec = fork_network(&single, 1, 1.5, 2).expect("valid fork");
    MultiHeadNet::new(spec, seed, BranchInit::Independent).expect("valid spec")
}

pub fn desk_data() -> Dataset {
    gen_gaussian_mixture(&GaussianMixture {
        classes: 10,
        dim: 32,
        per_class: 20,
        spread: 1.0,
        noise: 2.0,
        label_noise: 0.2,
        seed: 7,
    })
    .expect("valid generator")
}

pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 20,
        label_smoothing: 0.0,
        weight_decay: 0.0,
        seed: 1,
        optimizer: OptimizerKind::momentum(),
        schedule: Schedule::Constant { lr: 0.05 },
        loss: LossStructure::codistillation(3.0, Discrepancy::CrossEntropy),
    }
}

/// `examples × classes` scored predictions with roughly three labels each.
pub fn ranking(examples: usize, classes: usize) -> (Vec<ScoredPrediction>, BTreeSet<(usize, usize)>) {
    let scores = matrix(examples, classes, 17);
    let mut preds = Vec::with_capacity(examples * classes);
    let mut truth = BTreeSet::new();
    for e in 0..examples {
        for c in 0..classes {
            let score = scores.data()[e * classes + c];
            preds.push(ScoredPrediction {
                example: e,
                class: c,
                score,
            });
            if (e * 31 + c * 7) % classes < 3 {
                truth.insert((e, c));
            }
        }
    }
    (preds, truth)
}

use codistill::data::{gen_frame_sequences, gen_gaussian_mixture, split, FrameTask, GaussianMixture, SplitSpec};
use codistill::ensemble::{fork_network, LayerSpec, NetworkSpec};
use codistill::metrics::HeadId;
use codistill::training::{evaluate, train, Interval, Session};
use codistill::{
    Activation, BranchInit, Dataset, Discrepancy, Error, Features, HeadKind, HeadSpec, LossStructure, MultiHeadNet,
    OptimizerKind, Schedule, SingleNetwork, Split, Task, Tensor, TrainConfig,
};

fn blobs(classes: usize, label_noise: f64, seed: u64) -> Dataset {
    gen_gaussian_mixture(&GaussianMixture {
        classes,
        dim: 4,
        per_class: 60,
        spread: 4.0,
        noise: 0.5,
        label_noise,
        seed,
    })
    .unwrap()
}

fn mlp(input: usize, widths: &[usize], classes: usize) -> SingleNetwork {
    SingleNetwork {
        input_dim: input,
        layers: widths.iter().map(|&w| LayerSpec::dense(w, Activation::Relu)).collect(),
        head: HeadSpec {
            classes,
            kind: HeadKind::Softmax,
        },
    }
}

fn config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        label_smoothing: 0.1,
        weight_decay: 1e-4,
        seed,
        optimizer: OptimizerKind::momentum(),
        schedule: Schedule::HalfCosine {
            base: 0.05,
            total_steps: 0,
        },
        loss: LossStructure::ensembling(0.0, Discrepancy::CrossEntropy),
    }
}

fn holdout_top1(log: &[codistill::EpochRecord], head: HeadId) -> f64 {
    log.iter()
        .rev()
        .find(|r| r.split == Split::Holdout && r.metrics.head == head)
        .unwrap()
        .metrics
        .top1
}

#[test]
fn zero_epochs_returns_initial_model() {
    let data = blobs(2, 0.0, 1);
    let net = MultiHeadNet::new(NetworkSpec::single(&mlp(4, &[8], 2)), 3, BranchInit::Independent).unwrap();
    let out = train(net.clone(), &data, None, &config(0, 3)).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.net, net);
}

#[test]
fn separable_blobs_are_learned() {
    let data = blobs(2, 0.0, 5);
    let (tr, ho) = split(&data, &SplitSpec { holdout: 0.3, seed: 5 }).unwrap();
    let net = MultiHeadNet::new(NetworkSpec::single(&mlp(4, &[16], 2)), 5, BranchInit::Independent).unwrap();
    let out = train(net, &tr, Some(&ho), &config(50, 5)).unwrap();
    assert!(holdout_top1(&out.log, HeadId::Ensemble) > 0.95);
    // one record per epoch, split and head
    assert_eq!(out.log.len(), 50 * 2 * 2);
}

#[test]
fn clean_mixture_is_fit_almost_perfectly() {
    let data = blobs(4, 0.0, 8);
    let net = MultiHeadNet::new(NetworkSpec::single(&mlp(4, &[], 4)), 8, BranchInit::Independent).unwrap();
    let mut cfg = config(60, 8);
    cfg.label_smoothing = 0.0;
    let out = train(net, &data, None, &cfg).unwrap();
    let rows = evaluate(&out.net, &data, &cfg.loss).unwrap();
    assert!(rows[0].top1 > 0.99, "{:?}", rows[0]);
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = blobs(3, 0.2, 2);
    let spec = fork_network(&mlp(4, &[12, 12], 3), 1, 1.5, 2).unwrap();
    let mut cfg = config(4, 9);
    cfg.loss = LossStructure::codistillation(2.0, Discrepancy::CrossEntropy);
    let run = || {
        let net = MultiHeadNet::new(spec.clone(), 9, BranchInit::Independent).unwrap();
        train(net, &data, None, &cfg).unwrap()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.net.params().iter().zip(b.net.params()) {
        assert!(x.bits_eq(y));
    }
    assert_eq!(a.log, b.log);
}

#[test]
fn interrupted_session_resumes_exactly() {
    let data = blobs(3, 0.1, 4);
    let spec = fork_network(&mlp(4, &[10, 10], 3), 1, 1.5, 2).unwrap();
    let mut cfg = config(6, 4);
    cfg.optimizer = OptimizerKind::adam();
    cfg.schedule = Schedule::StepDecay {
        base: 0.01,
        factor: 0.5,
        interval: Interval::Epochs(2.0),
    };
    let fresh = || {
        Session::new(
            MultiHeadNet::new(spec.clone(), 4, BranchInit::Independent).unwrap(),
            &cfg,
        )
    };

    let mut whole = fresh();
    whole.run(&data, None, &cfg, |_| Ok(())).unwrap();

    let mut first = fresh();
    let mut half = cfg.clone();
    half.epochs = 3;
    first.run(&data, None, &half, |_| Ok(())).unwrap();
    // carry only what a checkpoint stores
    let mut resumed = fresh();
    resumed.net = first.net.clone();
    resumed.optimizer = first.optimizer.clone();
    resumed.step = first.step;
    resumed.epoch = first.epoch;
    let word = first.rng.get_word_pos();
    resumed.rng.set_word_pos(word);
    resumed.run(&data, None, &cfg, |_| Ok(())).unwrap();

    for (x, y) in whole.net.params().iter().zip(resumed.net.params()) {
        assert!(x.bits_eq(y));
    }
}

#[test]
fn weight_decay_alone_shrinks_norms() {
    // Zero inputs into a bare head: the data term only reaches the bias,
    // which does not decay, so the weight moves by the penalty alone.
    let features = Features::Vectors(Tensor::zeros(&[6, 3]));
    let labels = (0..6).map(|i| vec![i % 2]).collect();
    let data = Dataset::new(Task::SingleLabel, features, labels, 2).unwrap();
    let net = MultiHeadNet::new(NetworkSpec::single(&mlp(3, &[], 2)), 1, BranchInit::Independent).unwrap();
    let mut cfg = config(1, 1);
    cfg.weight_decay = 0.5;
    cfg.optimizer = OptimizerKind::Momentum { coefficient: 0.0 };
    let norm = |net: &MultiHeadNet| -> f64 {
        net.params()
            .iter()
            .zip(net.param_info())
            .filter(|(_, i)| i.decays)
            .map(|(t, _)| t.squared_norm())
            .sum()
    };
    let mut session = Session::new(net, &cfg);
    let idx: Vec<usize> = (0..6).collect();
    for _ in 0..5 {
        let before = norm(&session.net);
        session.train_step(&data, &idx, &cfg, 0.1).unwrap();
        let after = norm(&session.net);
        // w ← (1 − lr·c)·w exactly
        assert!((after - before * 0.95f64.powi(2)).abs() < 1e-12 * before.max(1.0));
        assert!(after < before);
    }
}

#[test]
fn convex_problem_loss_never_rises() {
    // A bare softmax head under cross-entropy is convex in its parameters;
    // full-batch steps well under 1/L cannot increase the loss.
    let data = blobs(3, 0.0, 6);
    let net = MultiHeadNet::new(NetworkSpec::single(&mlp(4, &[], 3)), 6, BranchInit::Independent).unwrap();
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: data.len(),
        label_smoothing: 0.0,
        weight_decay: 0.0,
        seed: 6,
        optimizer: OptimizerKind::Momentum { coefficient: 0.0 },
        schedule: Schedule::Constant { lr: 0.005 },
        loss: LossStructure::ensembling(0.0, Discrepancy::CrossEntropy),
    };
    let out = train(net, &data, None, &cfg).unwrap();
    let losses: Vec<f64> = out
        .log
        .iter()
        .filter(|r| r.metrics.head == HeadId::Ensemble)
        .map(|r| r.metrics.loss)
        .collect();
    assert_eq!(losses.len(), 15);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
}

#[test]
fn divergence_reports_partial_log() {
    let data = blobs(2, 0.0, 3);
    let net = MultiHeadNet::new(NetworkSpec::single(&mlp(4, &[8, 8], 2)), 3, BranchInit::Independent).unwrap();
    let mut cfg = config(20, 3);
    cfg.loss = LossStructure::ensembling(0.0, Discrepancy::L2);
    cfg.schedule = Schedule::Constant { lr: 1e150 };
    cfg.optimizer = OptimizerKind::Momentum { coefficient: 0.0 };
    match train(net, &data, None, &cfg) {
        Err(Error::Diverged { log, epoch, .. }) => assert_eq!(log.len(), (epoch - 1) * 2),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn frame_pipeline_trains_end_to_end() {
    let data = gen_frame_sequences(&FrameTask {
        classes: 4,
        dim: 6,
        min_frames: 2,
        max_frames: 5,
        per_class: 15,
        noise: 0.3,
        seed: 1,
    })
    .unwrap();
    let single = SingleNetwork {
        input_dim: 6,
        layers: vec![
            LayerSpec::Dense {
                width: 12,
                activation: Activation::Relu6,
                batch_norm: true,
            },
            LayerSpec::SwapPool,
            LayerSpec::ContextGate,
            LayerSpec::dense(10, Activation::Relu),
        ],
        head: HeadSpec {
            classes: 4,
            kind: HeadKind::Moe { experts: 2 },
        },
    };
    let spec = fork_network(&single, 3, 1.5, 2).unwrap();
    let net = MultiHeadNet::new(spec, 1, BranchInit::Independent).unwrap();
    let mut cfg = config(30, 1);
    cfg.batch_size = 8;
    cfg.optimizer = OptimizerKind::adam();
    cfg.schedule = Schedule::Constant { lr: 0.01 };
    cfg.loss = LossStructure::codistillation(1.0, Discrepancy::CrossEntropy);
    let out = train(net, &data, None, &cfg).unwrap();
    let first = out
        .log
        .iter()
        .find(|r| r.metrics.head == HeadId::Ensemble)
        .unwrap()
        .metrics;
    let last = out
        .log
        .iter()
        .rev()
        .find(|r| r.metrics.head == HeadId::Ensemble)
        .unwrap()
        .metrics;
    assert!(last.loss < first.loss, "{first:?} -> {last:?}");
    assert!(last.gap > first.gap);
}

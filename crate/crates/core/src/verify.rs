//! Self-checks: the loss value identity, finite-difference gradient checks
//! over every primitive and layer, gradient isolation under co-distillation,
//! and λ-invariance with identically initialised branches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::ensemble::{
    average, discrepancy, fork_network, total_loss, verify_equivalence, Batch, BranchInit, Discrepancy, HeadKind,
    HeadSpec, LayerSpec, LossOptions, LossStructure, MultiHeadNet, PredictionKind, Section, SingleNetwork,
};
use crate::error::Result;
use crate::gradcheck::{check_gradients, numeric_gradient};
use crate::layers::{Activation, BatchNormLayer, ContextGate, DenseLayer, MoEHead, Mode};
use crate::tensor::Tensor;

pub const EQUIVALENCE_BRANCHES: [usize; 4] = [1, 2, 3, 5];
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-9;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const GRADIENT_EPSILON: f64 = 1e-5;
pub const ISOLATION_TOLERANCE: f64 = 1e-8;
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
pub const SYMMETRY_LAMBDAS: [f64; 5] = [-2.0, -1.0, 0.0, 0.5, 1.0];

/// Largest value gap between Ensembling(λ) and CoDistillation(1−λ), for each
/// branch count.
pub fn equivalence(trials: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    EQUIVALENCE_BRANCHES
        .iter()
        .map(|&n| Ok((n, verify_equivalence(n, trials, seed.wrapping_add(n as u64))?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientCase {
    pub name: &'static str,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("finite draws")
}

/// Uniform draws kept at least `gap` away from each of `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
    .expect("finite draws")
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element gets a
/// distinct upstream gradient.
fn project(g: &mut Graph, rng: &mut ChaCha8Rng, out: NodeId) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let r = g.constant(uniform(rng, &shape, -1.0, 1.0));
    let p = g.mul(out, r)?;
    g.sum(p)
}

type Builder = fn(&mut Graph, &mut ChaCha8Rng) -> Result<NodeId>;

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=3), rng.random_range(1..=4))
}

fn unary_case(
    g: &mut Graph,
    rng: &mut ChaCha8Rng,
    lo: f64,
    hi: f64,
    kinks: &[f64],
    f: fn(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let (b, d) = dims(rng);
    let x = g.param(away_from(rng, &[b, d], lo, hi, kinks, 0.05));
    let y = f(g, x)?;
    project(g, rng, y)
}

fn binary_case(
    g: &mut Graph,
    rng: &mut ChaCha8Rng,
    f: fn(&mut Graph, NodeId, NodeId) -> Result<NodeId>,
    positive_rhs: bool,
) -> Result<NodeId> {
    let (b, d) = dims(rng);
    let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
    // alternate between full-shape and broadcast right operands
    let rhs_shape = if rng.random_bool(0.5) { vec![b, d] } else { vec![d] };
    let y = if positive_rhs {
        uniform(rng, &rhs_shape, 0.5, 2.0)
    } else {
        uniform(rng, &rhs_shape, -2.0, 2.0)
    };
    let y = g.param(y);
    let z = f(g, x, y)?;
    project(g, rng, z)
}

fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |g, rng| {
            let (b, d) = dims(rng);
            let k = rng.random_range(1..=4);
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let w = g.param(uniform(rng, &[d, k], -2.0, 2.0));
            let y = g.matmul(x, w)?;
            project(g, rng, y)
        }),
        ("add", |g, rng| binary_case(g, rng, Graph::add, false)),
        ("sub", |g, rng| binary_case(g, rng, Graph::sub, false)),
        ("mul", |g, rng| binary_case(g, rng, Graph::mul, false)),
        ("div", |g, rng| binary_case(g, rng, Graph::div, true)),
        ("abs", |g, rng| unary_case(g, rng, -2.0, 2.0, &[0.0], Graph::abs)),
        ("square", |g, rng| unary_case(g, rng, -2.0, 2.0, &[], Graph::square)),
        ("sqrt", |g, rng| unary_case(g, rng, 0.2, 3.0, &[], Graph::sqrt)),
        ("exp", |g, rng| unary_case(g, rng, -2.0, 2.0, &[], Graph::exp)),
        ("log", |g, rng| unary_case(g, rng, 0.2, 3.0, &[], Graph::log)),
        ("relu", |g, rng| unary_case(g, rng, -2.0, 2.0, &[0.0], Graph::relu)),
        ("relu6", |g, rng| {
            unary_case(g, rng, -2.0, 8.0, &[0.0, 6.0], Graph::relu6)
        }),
        ("sigmoid", |g, rng| unary_case(g, rng, -4.0, 4.0, &[], Graph::sigmoid)),
        ("clamp_min", |g, rng| {
            unary_case(g, rng, -2.0, 2.0, &[0.3], |g, x| g.clamp_min(x, 0.3))
        }),
        ("scale", |g, rng| {
            unary_case(g, rng, -2.0, 2.0, &[], |g, x| g.scale(x, -1.7))
        }),
        ("softmax", |g, rng| unary_case(g, rng, -3.0, 3.0, &[], Graph::softmax)),
        ("sum", |g, rng| {
            let (b, d) = dims(rng);
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let s = g.sum(x)?;
            g.square(s)
        }),
        ("sum_axis", |g, rng| {
            let axis = rng.random_range(0..2);
            unary_case(
                g,
                rng,
                -2.0,
                2.0,
                &[],
                [|g: &mut Graph, x| g.sum_axis(x, 0), |g: &mut Graph, x| g.sum_axis(x, 1)][axis],
            )
        }),
        ("mean", |g, rng| {
            let (b, d) = dims(rng);
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let m = g.mean(x)?;
            g.exp(m)
        }),
        ("mean_axis", |g, rng| {
            let axis = rng.random_range(0..2);
            unary_case(
                g,
                rng,
                -2.0,
                2.0,
                &[],
                [
                    |g: &mut Graph, x| g.mean_axis(x, 0),
                    |g: &mut Graph, x| g.mean_axis(x, 1),
                ][axis],
            )
        }),
        ("broadcast", |g, rng| {
            let (b, d) = dims(rng);
            let x = g.param(uniform(rng, &[1, d], -2.0, 2.0));
            let y = g.broadcast(x, &[b + 1, d])?;
            project(g, rng, y)
        }),
        ("reshape", |g, rng| {
            let (b, d) = dims(rng);
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let y = g.reshape(x, &[d, b])?;
            let y = g.square(y)?;
            project(g, rng, y)
        }),
        ("concat", |g, rng| {
            let (b, d) = dims(rng);
            let axis = rng.random_range(0..2);
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let other = if axis == 0 { [b + 1, d] } else { [b, d + 1] };
            let y = g.param(uniform(rng, &other, -2.0, 2.0));
            let z = g.concat(&[x, y], axis)?;
            project(g, rng, z)
        }),
        ("slice", |g, rng| {
            let (b, d) = dims(rng);
            let x = g.param(uniform(rng, &[b, d + 1], -2.0, 2.0));
            let start = rng.random_range(0..d);
            let y = g.slice(x, 1, start, d + 1)?;
            project(g, rng, y)
        }),
        ("swap_pool", |g, rng| {
            let d = rng.random_range(1..=4);
            let counts: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=4)).collect();
            let total = counts.iter().sum();
            let x = g.param(away_from(rng, &[total, d], -2.0, 2.0, &[0.0], 0.05));
            let y = g.swap_pool(x, &counts)?;
            project(g, rng, y)
        }),
        ("stop_gradient", |g, rng| {
            let (b, d) = dims(rng);
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let s = g.stop_gradient(x)?;
            let y = g.mul(s, x)?;
            project(g, rng, y)
        }),
        ("gradient_scale", |g, rng| {
            let (b, d) = dims(rng);
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let f = rng.random_range(-3.0..3.0);
            let s = g.gradient_scale(x, f)?;
            let y = g.sigmoid(s)?;
            project(g, rng, y)
        }),
        ("dense", |g, rng| {
            let (b, d) = dims(rng);
            let k = rng.random_range(1..=4);
            let act = [Activation::None, Activation::Sigmoid][rng.random_range(0..2)];
            let layer = DenseLayer::new(
                uniform(rng, &[d, k], -1.0, 1.0),
                Some(uniform(rng, &[k], -1.0, 1.0)),
                act,
            )?;
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let y = layer.forward(g, x, &mut Vec::new())?;
            project(g, rng, y)
        }),
        ("batch_norm_train", |g, rng| {
            let b = rng.random_range(3..=5);
            let d = rng.random_range(1..=3);
            let mut bn = BatchNormLayer::new(d);
            bn.gamma = uniform(rng, &[d], 0.5, 1.5);
            bn.beta = uniform(rng, &[d], -1.0, 1.0);
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let y = bn.forward(g, x, Mode::Train, &mut Vec::new())?;
            project(g, rng, y)
        }),
        ("batch_norm_eval", |g, rng| {
            let (b, d) = dims(rng);
            let mut bn = BatchNormLayer::new(d);
            bn.running_mean = uniform(rng, &[d], -1.0, 1.0);
            bn.running_var = uniform(rng, &[d], 0.5, 2.0);
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let y = bn.forward(g, x, Mode::Eval, &mut Vec::new())?;
            project(g, rng, y)
        }),
        ("context_gate", |g, rng| {
            let (b, d) = dims(rng);
            let gate = ContextGate::new(uniform(rng, &[d, d], -1.0, 1.0), uniform(rng, &[d], -1.0, 1.0))?;
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let y = gate.forward(g, x, &mut Vec::new())?;
            project(g, rng, y)
        }),
        ("moe_head", |g, rng| {
            let (b, d) = dims(rng);
            let (k, e) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let cols = k * e;
            let head = MoEHead::new(
                k,
                e,
                uniform(rng, &[d, cols], -1.0, 1.0),
                uniform(rng, &[cols], -1.0, 1.0),
                uniform(rng, &[d, cols], -1.0, 1.0),
                uniform(rng, &[cols], -1.0, 1.0),
            )?;
            let x = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let y = head.forward(g, x, &mut Vec::new())?;
            project(g, rng, y)
        }),
        ("cross_entropy", |g, rng| {
            let (b, d) = dims(rng);
            let logits = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let p = g.softmax(logits)?;
            let t = g.constant(uniform(rng, &[b, d], 0.0, 1.0));
            discrepancy(g, Discrepancy::CrossEntropy, PredictionKind::Categorical, t, p)
        }),
        ("binary_cross_entropy", |g, rng| {
            let (b, d) = dims(rng);
            let logits = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let p = g.sigmoid(logits)?;
            let t = g.constant(uniform(rng, &[b, d], 0.0, 1.0));
            discrepancy(g, Discrepancy::CrossEntropy, PredictionKind::MultiLabel, t, p)
        }),
        ("l2", |g, rng| {
            let (b, d) = dims(rng);
            let p = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            let t = g.param(uniform(rng, &[b, d], -2.0, 2.0));
            discrepancy(g, Discrepancy::L2, PredictionKind::Categorical, t, p)
        }),
        ("ensemble_losses", |g, rng| {
            let (b, d) = dims(rng);
            let n = rng.random_range(1..=3);
            let mut aux = Vec::new();
            for _ in 0..n {
                let logits = g.param(uniform(rng, &[b, d], -2.0, 2.0));
                aux.push(g.softmax(logits)?);
            }
            let ens = average(g, &aux)?;
            let t = g.constant(uniform(rng, &[b, d], 0.0, 1.0));
            let structure = if rng.random_bool(0.5) {
                LossStructure::ensembling(rng.random_range(-3.0..2.0), Discrepancy::CrossEntropy)
            } else {
                LossStructure::codistillation(rng.random_range(0.0..3.0), Discrepancy::CrossEntropy)
            };
            Ok(total_loss(
                g,
                &aux,
                ens,
                t,
                &structure,
                LossOptions::new(PredictionKind::Categorical),
            )?
            .total)
        }),
    ]
}

/// Finite-difference checks of every primitive and layer over `configs`
/// random configurations each. Reports the worst relative error per case.
pub fn gradient_suite(configs: usize, seed: u64) -> Result<Vec<GradientCase>> {
    let mut out = Vec::new();
    for (i, (name, build)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..configs {
            let mut g = Graph::new();
            let loss = build(&mut g, &mut rng)?;
            let report = check_gradients(&g, loss, GRADIENT_EPSILON, GRADIENT_TOLERANCE)?;
            worst = worst.max(report.max_rel_error());
        }
        out.push(GradientCase {
            name,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

fn toy_net(seed: u64, init: BranchInit) -> Result<MultiHeadNet> {
    let single = SingleNetwork {
        input_dim: 3,
        layers: vec![
            LayerSpec::dense(5, Activation::Sigmoid),
            LayerSpec::dense(4, Activation::Sigmoid),
        ],
        head: HeadSpec {
            classes: 3,
            kind: HeadKind::Softmax,
        },
    };
    let mut net = MultiHeadNet::new(fork_network(&single, 1, 1.0, 2)?, seed, init)?;
    // Larger weights than the default initializer so gradients are far from
    // zero and a leak would show.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    if init == BranchInit::Independent {
        for p in net.params_mut() {
            *p = uniform(&mut rng, p.shape(), -1.5, 1.5);
        }
    }
    Ok(net)
}

fn toy_batch(rng: &mut ChaCha8Rng) -> (Batch, Tensor) {
    let x = uniform(rng, &[4, 3], -2.0, 2.0);
    let t = Tensor::from_fn(&[4, 3], |i| if i % 3 == (i / 3) % 3 { 1.0 } else { 0.0 }).expect("finite");
    (Batch::Vectors(x), t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Isolation {
    /// Worst finite-difference sensitivity of the first branch's auxiliary
    /// term to second-branch parameters, with the ensemble target blocked.
    pub blocked: f64,
    /// Worst analytic gradient for the same pairing.
    pub analytic: f64,
    /// Same sensitivity with the block removed; shows the check can see
    /// leaks at all.
    pub unblocked: f64,
}

/// Sensitivity of `L_aux,0` to parameters exclusive to branch 1 on a
/// two-branch net under co-distillation.
pub fn stop_gradient_isolation(seed: u64) -> Result<Isolation> {
    let net = toy_net(seed, BranchInit::Independent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, truth) = toy_batch(&mut rng);
    let info = net.param_info();
    let measure = |stop: bool| -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let pass = net.forward(&mut g, &batch, Mode::Train)?;
        let t = g.constant(truth.clone());
        let opts = LossOptions {
            prediction: PredictionKind::Categorical,
            stop_ensemble_gradient: stop,
        };
        let structure = LossStructure::codistillation(1.0, Discrepancy::CrossEntropy);
        let terms = total_loss(&mut g, &pass.aux, pass.ensemble, t, &structure, opts)?;
        let target = terms.aux[0];
        let grads = g.backprop(target)?;
        let (mut numeric, mut analytic) = (0f64, 0f64);
        for (&id, p) in pass.params.iter().zip(&info) {
            if p.section != Section::Branch(1) {
                continue;
            }
            let fd = numeric_gradient(&g, target, id, GRADIENT_EPSILON)?;
            numeric = fd.data().iter().fold(numeric, |m, v| m.max(v.abs()));
            if let Some(a) = grads.get(id) {
                analytic = a.data().iter().fold(analytic, |m, v| m.max(v.abs()));
            }
        }
        Ok((numeric, analytic))
    };
    let (blocked, analytic) = measure(true)?;
    let (unblocked, _) = measure(false)?;
    Ok(Isolation {
        blocked,
        analytic,
        unblocked,
    })
}

/// Largest spread of Ensembling loss values over [`SYMMETRY_LAMBDAS`] for a
/// two-branch net whose branches are bitwise identical.
pub fn lambda_symmetry(seed: u64) -> Result<f64> {
    let net = toy_net(seed, BranchInit::Identical)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, truth) = toy_batch(&mut rng);
    let mut values = Vec::new();
    for &lambda in &SYMMETRY_LAMBDAS {
        let mut g = Graph::new();
        let pass = net.forward(&mut g, &batch, Mode::Train)?;
        let t = g.constant(truth.clone());
        let structure = LossStructure::ensembling(lambda, Discrepancy::CrossEntropy);
        let terms = total_loss(
            &mut g,
            &pass.aux,
            pass.ensemble,
            t,
            &structure,
            LossOptions::new(PredictionKind::Categorical),
        )?;
        values.push(g.value(terms.total).data()[0]);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(hi - lo)
}

/// Largest difference between the parameter gradients of Ensembling(λ) and
/// CoDistillation(1−λ) under L2, with or without the ensemble-target block.
/// The block changes nothing here: the gradient it removes is
/// `Σᵢ 2(p̄ − pᵢ)`, which vanishes for a simple average.
pub fn structure_gradient_gap(lambda: f64, stop: bool, seed: u64) -> Result<f64> {
    let net = toy_net(seed, BranchInit::Independent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, truth) = toy_batch(&mut rng);
    let grads_for = |structure: LossStructure| -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let pass = net.forward(&mut g, &batch, Mode::Train)?;
        let t = g.constant(truth.clone());
        let opts = LossOptions {
            prediction: PredictionKind::Categorical,
            stop_ensemble_gradient: stop,
        };
        let terms = total_loss(&mut g, &pass.aux, pass.ensemble, t, &structure, opts)?;
        let grads = g.backprop(terms.total)?;
        Ok(pass
            .params
            .iter()
            .map(|&id| grads.get(id).expect("bound param").clone())
            .collect())
    };
    let a = grads_for(LossStructure::ensembling(lambda, Discrepancy::L2))?;
    let b = grads_for(LossStructure::codistillation(1.0 - lambda, Discrepancy::L2))?;
    Ok(a.iter().zip(&b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max))
}

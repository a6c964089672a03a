use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use codistill::metrics::{count_flops, count_params, mean_uncertainty};
use codistill::training::{evaluate, EpochRecord};
use codistill::verify::{self, GRADIENT_TOLERANCE, ISOLATION_TOLERANCE, SYMMETRY_TOLERANCE};
use codistill::{data, Dataset, Error, HeadId, HeadMetrics, MetricReport, MultiHeadNet, Session, Split};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, ExperimentConfig, StructureName};

pub const METRICS_HEADER: &str = "epoch,head,split,loss,top1,top5,gap,map";
pub const EVAL_HEADER: &str = "head,loss,top1,top5,gap,map,params,flops";
pub const SWEEP_HEADER: &str = "axis_value,seed,loss,top1,top5,gap,map";
pub const SUMMARY_HEADER: &str = "axis_value,metric,mean,uncertainty,runs";

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

/// Finite-difference configurations per gradient case in `verify`.
pub const GRADIENT_CONFIGS: usize = 100;

pub fn run_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("seed-{seed}"))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub seed: u64,
    pub dir: PathBuf,
    /// Ensemble metrics after the last epoch, on the holdout split when
    /// there is one.
    pub last: Option<HeadMetrics>,
    pub log: Vec<EpochRecord>,
}

/// Train and holdout splits as configured.
pub fn load_splits(cfg: &ExperimentConfig) -> anyhow::Result<(Dataset, Option<Dataset>)> {
    let all = cfg.dataset()?;
    if cfg.data.holdout == 0.0 {
        return Ok((all, None));
    }
    let (train, holdout) = data::split(&all, &cfg.split()).context("data.holdout")?;
    ensure!(!train.is_empty(), "data.holdout: leaves no training examples");
    Ok((train, Some(holdout)))
}

fn metrics_row(r: &EpochRecord) -> String {
    let m = &r.metrics;
    format!(
        "{},{},{},{},{},{},{},{}",
        r.epoch,
        m.head,
        r.split.name(),
        m.loss,
        m.top1,
        m.top5,
        m.gap,
        m.map
    )
}

/// Opens the metrics log for appending. A fresh run truncates it; a resumed
/// run keeps the rows of epochs it has already completed.
fn open_metrics(path: &Path, keep_through: usize) -> anyhow::Result<File> {
    let mut kept = vec![METRICS_HEADER.to_owned()];
    if keep_through > 0 {
        let old = File::open(path).with_context(|| format!("resuming needs {}", path.display()))?;
        for line in BufReader::new(old).lines().skip(1) {
            let line = line?;
            let epoch: usize = line
                .split(',')
                .next()
                .and_then(|e| e.parse().ok())
                .with_context(|| format!("{}: bad row {line:?}", path.display()))?;
            if epoch <= keep_through {
                kept.push(line);
            }
        }
    }
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    Ok(f)
}

/// One seed's run in `dir`.
pub fn train_run(cfg: &ExperimentConfig, seed: u64, dir: &Path, opts: &TrainOptions) -> anyhow::Result<RunSummary> {
    let (train, holdout) = load_splits(cfg)?;
    let shape = (train.dim(), train.classes(), train.is_frames());
    let tc = cfg.train_config(seed);
    tc.validate().context("training")?;
    let mut session = match &opts.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            ensure!(
                ckpt.seed == seed,
                "checkpoint seed {} does not match run seed {seed}",
                ckpt.seed
            );
            ensure!(
                ckpt.experiment()? == *cfg,
                "checkpoint {} was written with a different config",
                path.display()
            );
            ckpt.restore()?.1
        }
        None => {
            let spec = cfg.network(shape.0, shape.1, shape.2)?;
            Session::new(MultiHeadNet::new(spec, seed, cfg.branch_init())?, &tc)
        }
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.echo())?;
    let mut metrics = open_metrics(&dir.join(METRICS_FILE), session.epoch)?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let target = opts.stop_after.map_or(tc.epochs, |s| s.min(tc.epochs));
    let every = cfg.output.checkpoint_every;
    let mut written = 0;
    while session.epoch < target {
        let outcome = session.run_epoch(&train, holdout.as_ref(), &tc);
        let log = match &outcome {
            Err(Error::Diverged { log, .. }) => log.as_slice(),
            _ => session.log.as_slice(),
        };
        for r in &log[written..] {
            writeln!(metrics, "{}", metrics_row(r))?;
        }
        written = log.len();
        outcome.with_context(|| format!("seed {seed}"))?;
        if every > 0 && session.epoch % every == 0 {
            Checkpoint::capture(cfg, seed, shape, &session).save(&ckpt_path)?;
        }
    }
    metrics.flush()?;
    Checkpoint::capture(cfg, seed, shape, &session).save(&ckpt_path)?;
    let want = if holdout.is_some() {
        Split::Holdout
    } else {
        Split::Train
    };
    let last = session
        .log
        .iter()
        .rev()
        .find(|r| r.split == want && r.metrics.head == HeadId::Ensemble)
        .map(|r| r.metrics);
    Ok(RunSummary {
        seed,
        dir: dir.to_path_buf(),
        last,
        log: session.log,
    })
}

/// One run per configured seed, each in `<output.dir>/seed-<s>/`.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> anyhow::Result<Vec<RunSummary>> {
    if opts.resume.is_some() {
        ensure!(
            cfg.output.seeds.len() == 1,
            "--resume needs exactly one seed (use --seed)"
        );
    }
    let mut out = Vec::new();
    for &seed in &cfg.output.seeds {
        let run = train_run(cfg, seed, &run_dir(&cfg.output.dir, seed), opts)?;
        if let Some(m) = &run.last {
            println!(
                "seed {seed}: ensemble top1 {:.4} loss {:.4} ({})",
                m.top1,
                m.loss,
                run.dir.display()
            );
        }
        out.push(run);
    }
    Ok(out)
}

/// Scores a checkpoint on `data`, or on the holdout split of its own config
/// (everything when it has none). Writes `eval.csv` into `out` when given.
pub fn cmd_eval(checkpoint: &Path, data: Option<&Path>, out: Option<&Path>) -> anyhow::Result<MetricReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (cfg, session) = ckpt.restore()?;
    let eval_data = match data {
        Some(path) => data::load_table(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let (train, holdout) = load_splits(&cfg)?;
            holdout.unwrap_or(train)
        }
    };
    let net = &session.net;
    ensure!(
        eval_data.dim() == ckpt.input_dim && eval_data.is_frames() == ckpt.frames,
        "data does not match the checkpoint's input"
    );
    ensure!(
        eval_data.classes() <= ckpt.classes,
        "data has more classes than the model"
    );
    let frames = if ckpt.frames { cfg.data.max_frames } else { 1 };
    let report = MetricReport {
        heads: evaluate(net, &eval_data, &cfg.loss_structure())?,
        params: count_params(net.spec())?,
        flops: count_flops(net.spec(), frames)?.total,
    };
    println!("params {}  flops {}", report.params, report.flops);
    println!(
        "{:>9} {:>10} {:>7} {:>7} {:>7} {:>7}",
        "head", "loss", "top1", "top5", "gap", "map"
    );
    for h in &report.heads {
        println!(
            "{:>9} {:>10.5} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            h.head.to_string(),
            h.loss,
            h.top1,
            h.top5,
            h.gap,
            h.map
        );
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut f = File::create(dir.join("eval.csv"))?;
        writeln!(f, "{EVAL_HEADER}")?;
        for h in &report.heads {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                h.head, h.loss, h.top1, h.top5, h.gap, h.map, report.params, report.flops
            )?;
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Lambda,
    Mu,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Lambda => "lambda",
            Axis::Mu => "mu",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "lambda" => Ok(Axis::Lambda),
            "mu" => Ok(Axis::Mu),
            _ => bail!("axis must be lambda or mu, got {s:?}"),
        }
    }
}

type Column = (&'static str, fn(&HeadMetrics) -> f64);

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub seed: u64,
    pub metrics: HeadMetrics,
}

/// Parallel runs allowed by `CODISTILL_THREADS` (unset: rayon's default).
pub fn thread_cap() -> anyhow::Result<Option<usize>> {
    match std::env::var("CODISTILL_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().with_context(|| format!("CODISTILL_THREADS={v:?}"))?;
            ensure!(n > 0, "CODISTILL_THREADS must be positive");
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

/// Trains every value × seed, one directory per run, then writes
/// `sweep.csv` and `sweep_summary.csv` to the output directory.
pub fn cmd_sweep(cfg: &ExperimentConfig, axis: Axis, values: &[f64]) -> anyhow::Result<Vec<SweepRow>> {
    ensure!(!values.is_empty(), "--values: at least one value is required");
    let wanted = match axis {
        Axis::Lambda => StructureName::Ensembling,
        Axis::Mu => StructureName::Codistillation,
    };
    ensure!(
        cfg.loss.structure == wanted,
        "--axis {}: config uses the {:?} structure",
        axis.name(),
        cfg.loss.structure
    );
    let jobs: Vec<(f64, u64)> = values
        .iter()
        .flat_map(|&v| cfg.output.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run = |&(value, seed): &(f64, u64)| -> anyhow::Result<SweepRow> {
        let mut c = cfg.clone();
        match axis {
            Axis::Lambda => c.loss.lambda = Some(value),
            Axis::Mu => c.loss.mu = Some(value),
        }
        c.validate()?;
        let dir = run_dir(&cfg.output.dir.join(format!("{}={value}", axis.name())), seed);
        let summary = train_run(&c, seed, &dir, &TrainOptions::default())?;
        let metrics = summary
            .last
            .with_context(|| format!("run {} logged nothing", dir.display()))?;
        Ok(SweepRow { value, seed, metrics })
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        pool = pool.num_threads(n);
    }
    let rows: Vec<SweepRow> = pool
        .build()?
        .install(|| jobs.par_iter().map(run).collect::<anyhow::Result<_>>())?;

    fs::create_dir_all(&cfg.output.dir)?;
    let mut f = File::create(cfg.output.dir.join("sweep.csv"))?;
    writeln!(f, "{SWEEP_HEADER}")?;
    for r in &rows {
        let m = &r.metrics;
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.value, r.seed, m.loss, m.top1, m.top5, m.gap, m.map
        )?;
    }
    let mut f = File::create(cfg.output.dir.join("sweep_summary.csv"))?;
    writeln!(f, "{SUMMARY_HEADER}")?;
    println!(
        "{:>10} {:>8} {:>10} {:>12}",
        axis.name(),
        "metric",
        "mean",
        "uncertainty"
    );
    for &v in values {
        let group: Vec<&HeadMetrics> = rows.iter().filter(|r| r.value == v).map(|r| &r.metrics).collect();
        let columns: [Column; 5] = [
            ("loss", |m| m.loss),
            ("top1", |m| m.top1),
            ("top5", |m| m.top5),
            ("gap", |m| m.gap),
            ("map", |m| m.map),
        ];
        for (name, get) in columns {
            let xs: Vec<f64> = group.iter().map(|m| get(m)).collect();
            let (mean, unc) = match mean_uncertainty(&xs) {
                Ok(a) => (a.mean, a.uncertainty.to_string()),
                Err(_) => (xs[0], String::new()),
            };
            writeln!(f, "{v},{name},{mean},{unc},{}", xs.len())?;
            if name == "top1" {
                println!("{v:>10} {name:>8} {mean:>10.4} {unc:>12}");
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyLine {
    pub check: String,
    pub deviation: f64,
    pub threshold: f64,
}

impl VerifyLine {
    pub fn passed(&self) -> bool {
        self.deviation < self.threshold
    }
}

/// Runs every numerical check and prints one line each. Fails when any
/// deviation reaches its threshold.
pub fn cmd_verify(trials: usize, seed: u64) -> anyhow::Result<Vec<VerifyLine>> {
    ensure!(trials >= 1, "--trials must be at least 1");
    let mut lines = Vec::new();
    for (n, dev) in verify::equivalence(trials, seed)? {
        lines.push(VerifyLine {
            check: format!("equivalence N={n}"),
            deviation: dev,
            threshold: verify::EQUIVALENCE_TOLERANCE,
        });
    }
    for case in verify::gradient_suite(GRADIENT_CONFIGS, seed)? {
        lines.push(VerifyLine {
            check: format!("gradient {}", case.name),
            deviation: case.max_rel_error,
            threshold: GRADIENT_TOLERANCE,
        });
    }
    let iso = verify::stop_gradient_isolation(seed)?;
    lines.push(VerifyLine {
        check: "stop-gradient isolation".into(),
        deviation: iso.blocked.max(iso.analytic),
        threshold: ISOLATION_TOLERANCE,
    });
    lines.push(VerifyLine {
        check: "lambda symmetry".into(),
        deviation: verify::lambda_symmetry(seed)?,
        threshold: SYMMETRY_TOLERANCE,
    });
    for l in &lines {
        let verdict = if l.passed() { "ok" } else { "FAIL" };
        println!(
            "{verdict:>4}  {:<32} {:.3e}  (< {:.0e})",
            l.check, l.deviation, l.threshold
        );
    }
    let failed = lines.iter().filter(|l| !l.passed()).count();
    ensure!(failed == 0, "{failed} check(s) failed");
    Ok(lines)
}

/// Writes the configured generator's data as a CSV table.
pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<usize> {
    ensure!(
        cfg.data.source == DataSource::Gaussian,
        "data.source: only the gaussian generator has a table form"
    );
    let data = cfg.dataset()?;
    let codistill::Features::Vectors(x) = data.features() else {
        bail!("data.source: generator produced frame data");
    };
    let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (i, labels) in data.labels().iter().enumerate() {
        let mut row: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        row.push(labels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("|"));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(data.len())
}

//! `train-em` and `train-dmkl`.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use hieragg::dataio::{ArtifactConfig, ModelArtifact, Split, Stream, TrainerRoute};
use hieragg::dmkl::{dmkl_fit_table, ContrastiveConfig, Optimizer};
use hieragg::hierarchy::{Hierarchy, PoolOptions};
use hieragg::kernels::{Bandwidth, CombineVariant, GramMatrix, KernelKind, KernelSetup, NodeKernelTable, NodeScope};
use hieragg::mkl_em::{class_count, em_fit_table, EmConfig, EmSense};
use hieragg::svm::{predict, train_one_vs_rest, TrainConfig};
use hieragg::{Model, Real};
use serde::Serialize;

use crate::data;
use crate::error::CliError;
use crate::out::OutDir;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Rbf,
    Linear,
}

impl From<KindArg> for KernelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Rbf => KernelKind::Rbf,
            KindArg::Linear => KernelKind::Linear,
        }
    }
}

/// `median` or an explicit positive bandwidth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaArg {
    Median,
    Value(f64),
}

impl std::str::FromStr for GammaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "median" {
            return Ok(GammaArg::Median);
        }
        match s.parse::<f64>() {
            Ok(g) if g > 0.0 && g.is_finite() => Ok(GammaArg::Value(g)),
            _ => Err(format!("gamma must be 'median' or a positive number, got '{s}'")),
        }
    }
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Dataset manifest (JSONL).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Hierarchy depth, 1 to 8 (1 is global average pooling).
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    /// Node kernel combination: concat or avg.
    #[arg(long, default_value = "avg")]
    pub variant: CombineVariant,
    #[arg(long, value_enum, default_value_t = KindArg::Rbf)]
    pub kernel: KindArg,
    /// Rbf bandwidth: `median` or a positive value.
    #[arg(long, default_value = "median")]
    pub gamma: GammaArg,
    /// Per-node (`node`) or single (`shared`) rbf scale.
    #[arg(long, default_value = "node")]
    pub bandwidth: Bandwidth,
    #[arg(long, default_value = "appearance")]
    pub stream: Stream,
    /// Unit-normalise every frame before pooling.
    #[arg(long)]
    pub frame_l2: bool,
    /// Unit-normalise every pooled node vector.
    #[arg(long)]
    pub node_l2: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// SVM box constraint; `inf` for a hard margin.
    #[arg(long, default_value_t = 10.0)]
    pub c_box: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub kkt_tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_passes: usize,
}

impl CommonArgs {
    fn svm(&self) -> TrainConfig {
        TrainConfig {
            c_box: self.c_box,
            kkt_tol: self.kkt_tol,
            max_passes: self.max_passes,
        }
    }

    fn pool_options(&self) -> PoolOptions {
        PoolOptions {
            frame_l2: self.frame_l2,
            node_l2: self.node_l2,
        }
    }

    fn validate(&self) -> Result<Hierarchy> {
        self.svm().validate()?;
        Ok(Hierarchy::new(self.depth)?)
    }
}

#[derive(Args, Debug)]
pub struct EmArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `margin` descends the SVM dual value; `joint` alternates literally.
    #[arg(long, default_value = "margin")]
    pub sense: EmSense,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub param_tol: f64,
    /// Step damping in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
}

#[derive(Args, Debug)]
pub struct DmklArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 0.0005)]
    pub lr: f64,
    /// Pairs per batch.
    #[arg(long, default_value_t = 2048)]
    pub batch: usize,
    #[arg(long, default_value_t = 4000)]
    pub iters: usize,
    /// Negative-pair margin in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
    /// Share of positive pairs per batch; uniform sampling when omitted.
    #[arg(long)]
    pub positive_fraction: Option<f64>,
    #[arg(long, default_value = "adam")]
    pub optimizer: Optimizer,
}

/// Training set after pooling and kernel fitting.
struct Prepared {
    setup: KernelSetup,
    trees: Vec<hieragg::Tree>,
    labels: Vec<usize>,
    classes: usize,
}

fn prepare(a: &CommonArgs, h: &Hierarchy) -> Result<Prepared> {
    let m = data::manifest(&a.manifest)?;
    let pooled = data::pool_split(&m, Split::Train, a.stream, h, a.pool_options())?;
    let gamma = match a.gamma {
        GammaArg::Median => None,
        GammaArg::Value(g) => Some(g),
    };
    let setup =
        KernelSetup::fit(&pooled.trees, a.kernel.into(), gamma, a.bandwidth, a.seed).context("fitting the kernel")?;
    let trees = setup.prepare(&pooled.trees)?;
    let classes = class_count(&pooled.labels)?;
    Ok(Prepared {
        setup,
        trees,
        labels: pooled.labels,
        classes,
    })
}

#[derive(Serialize)]
struct RunSummary<'a, T: Serialize> {
    command: &'a str,
    manifest: String,
    config: &'a ArtifactConfig,
    train_count: usize,
    classes: usize,
    train_accuracy: f64,
    support_vectors: usize,
    level_share: Vec<f64>,
    trainer: T,
}

#[derive(Serialize)]
struct EmSummary {
    options: EmConfig,
    iterations: usize,
    converged: bool,
    backtracks: usize,
    initial_objective: f64,
    final_objective: f64,
}

#[derive(Serialize)]
struct DmklSummary {
    options: ContrastiveConfig,
    initial_loss: f64,
    final_loss: f64,
    distinct_pairs: usize,
    total_pairs: usize,
}

pub fn train_em(args: &EmArgs) -> Result<()> {
    let a = &args.common;
    let h = a.validate()?;
    let em = EmConfig {
        max_iters: args.max_iters,
        param_tol: args.param_tol,
        eta: args.eta,
        sense: args.sense,
        ..EmConfig::default()
    };
    em.validate()?;
    let p = prepare(a, &h)?;
    let table = NodeKernelTable::build(&p.trees, &p.setup.config, NodeScope::from(a.variant))?;
    let fit = em_fit_table(&table, &p.labels, a.variant, &em, &a.svm())?;
    let beta = fit.weights.beta().to_vec();
    let gram = table.gram(&beta, a.variant)?;

    let mut trace = String::from("iteration,objective,entropy\n");
    for (i, (o, e)) in fit.trace.objective.iter().zip(&fit.trace.entropy).enumerate() {
        trace.push_str(&format!("{i},{o},{e}\n"));
    }
    let t = &fit.trace;
    let summary = EmSummary {
        options: em,
        iterations: t.iterations(),
        converged: t.converged,
        backtracks: t.backtracks,
        initial_objective: t.objective[0],
        final_objective: *t.objective.last().expect("trace has the initial entry"),
    };
    finish(
        a,
        "train-em",
        TrainerRoute::Em,
        &h,
        &p,
        &beta,
        &fit.model,
        &gram,
        &trace,
        summary,
    )
}

pub fn train_dmkl(args: &DmklArgs) -> Result<()> {
    let a = &args.common;
    let h = a.validate()?;
    let cfg = ContrastiveConfig {
        lr: args.lr,
        batch: args.batch,
        iters: args.iters,
        margin: args.margin,
        seed: a.seed,
        positive_fraction: args.positive_fraction,
        optimizer: args.optimizer,
    };
    cfg.validate()?;
    if let Some(f) = args.positive_fraction {
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Invalid(format!("positive fraction must lie in (0, 1), got {f}")).into());
        }
    }
    let p = prepare(a, &h)?;
    let table = NodeKernelTable::build(&p.trees, &p.setup.config, NodeScope::from(a.variant))?;
    let fit = dmkl_fit_table(&table, &p.labels, a.variant, &cfg)?;
    let beta = fit.weights.beta().to_vec();
    let gram = table.gram(&beta, a.variant)?;
    let model = train_one_vs_rest(&gram, &p.labels, p.classes, &a.svm())?;

    let t = &fit.trace;
    let mut trace = String::from("iteration,batch_loss,eval_loss,entropy\n");
    for i in 0..t.eval_loss.len() {
        // the first row is the untrained state, before any batch
        let batch = if i == 0 {
            String::new()
        } else {
            t.batch_loss[i - 1].to_string()
        };
        trace.push_str(&format!("{i},{batch},{},{}\n", t.eval_loss[i], t.entropy[i]));
    }
    let summary = DmklSummary {
        options: cfg,
        initial_loss: t.initial_loss(),
        final_loss: t.final_loss(),
        distinct_pairs: t.distinct_pairs,
        total_pairs: t.total_pairs,
    };
    finish(
        a,
        "train-dmkl",
        TrainerRoute::Dmkl,
        &h,
        &p,
        &beta,
        &model,
        &gram,
        &trace,
        summary,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    a: &CommonArgs,
    command: &str,
    route: TrainerRoute,
    h: &Hierarchy,
    p: &Prepared,
    beta: &[Real],
    model: &Model,
    gram: &GramMatrix<Real>,
    trace: &str,
    trainer: impl Serialize,
) -> Result<()> {
    let config = ArtifactConfig {
        depth: a.depth,
        variant: a.variant,
        kernel: p.setup.config,
        stream: a.stream,
        route,
        frame_l2: a.frame_l2,
        node_l2: a.node_l2,
        node_scale: p.setup.scaling.as_ref().map(|s| s.factors.clone()),
        svm: a.svm(),
        seed: a.seed,
    };
    let artifact = ModelArtifact::from_model(config.clone(), beta, model)?;
    let hits = (0..gram.n())
        .filter(|&i| predict(model, gram.row(i)).map(|c| c == p.labels[i]).unwrap_or(false))
        .count();
    let summary = RunSummary {
        command,
        manifest: a.manifest.display().to_string(),
        config: &config,
        train_count: p.trees.len(),
        classes: p.classes,
        train_accuracy: hits as f64 / p.labels.len() as f64,
        support_vectors: artifact.support_ids().len(),
        level_share: level_shares(h, beta),
        trainer,
    };

    let mut out = OutDir::create(&a.out)?;
    out.write("model.json", artifact.to_json())?;
    out.write("trace.csv", trace)?;
    out.write("beta.csv", beta_csv(h, beta))?;
    out.write("levels.csv", levels_csv(h, beta))?;
    out.write_json("run.json", &summary)?;
    out.finish()?;
    eprintln!(
        "{command}: {} videos, train accuracy {:.4}, wrote {}",
        p.trees.len(),
        summary.train_accuracy,
        a.out.display()
    );
    Ok(())
}

pub fn level_shares(h: &Hierarchy, beta: &[Real]) -> Vec<f64> {
    (1..=h.depth())
        .map(|l| beta[h.level_positions(l)].iter().sum())
        .collect()
}

pub fn beta_csv(h: &Hierarchy, beta: &[Real]) -> String {
    let mut s = String::from("node,level,index,beta\n");
    for (node, b) in h.nodes().zip(beta) {
        s.push_str(&format!("{node},{},{},{b}\n", node.level, node.index));
    }
    s
}

pub fn levels_csv(h: &Hierarchy, beta: &[Real]) -> String {
    let mut s = String::from("level,share\n");
    for (l, share) in level_shares(h, beta).iter().enumerate() {
        s.push_str(&format!("{},{share}\n", l + 1));
    }
    s
}

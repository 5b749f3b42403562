//! `eval` and `fuse-eval`: one prediction per test video.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use hieragg::dataio::{DatasetManifest, ModelArtifact, Split, VideoRecord};
use hieragg::hierarchy::Hierarchy;
use hieragg::kernels::{check_weight, fuse_kernels, fuse_values, gram_matrix, kernel_rows, KernelKind};
use hieragg::svm::{argmax_class, decision_scores, train_one_vs_rest};
use hieragg::Tree;
use serde::{Deserialize, Serialize};

use crate::data;
use crate::error::CliError;
use crate::out::OutDir;
use crate::train::{beta_csv, levels_csv};

pub const METRICS_FILE: &str = "metrics.json";

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Trained model artifact (model.json).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FuseMode {
    /// Fuse the two Gram matrices and retrain the classifiers.
    KernelAvg,
    /// Average the per-class scores of the two models.
    ScoreAvg,
}

impl FuseMode {
    fn as_str(self) -> &'static str {
        match self {
            FuseMode::KernelAvg => "kernel-avg",
            FuseMode::ScoreAvg => "score-avg",
        }
    }
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// First model, weighted by `w`.
    #[arg(long)]
    pub model_a: PathBuf,
    /// Second model, weighted by `1 - w`.
    #[arg(long)]
    pub model_m: PathBuf,
    #[arg(long, value_enum, default_value_t = FuseMode::KernelAvg)]
    pub mode: FuseMode,
    #[arg(long, default_value_t = 0.5)]
    pub w: f64,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub name: String,
    pub count: usize,
    pub correct: usize,
    /// `None` when the class has no test videos.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionInfo {
    pub mode: String,
    pub w: f64,
    pub stream_a: String,
    pub stream_m: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub command: String,
    pub stream: String,
    pub route: String,
    pub depth: usize,
    pub variant: String,
    pub fusion: Option<FusionInfo>,
    pub test_count: usize,
    pub overall_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true - 1][predicted - 1]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Per-class scores of every test video.
struct Scored {
    ids: Vec<String>,
    labels: Vec<usize>,
    scores: Vec<Vec<f64>>,
}

fn read_artifact(path: &Path) -> Result<ModelArtifact> {
    ModelArtifact::read(path).with_context(|| format!("reading model {}", path.display()))
}

fn records<'a>(m: &'a DatasetManifest, ids: &[String]) -> Result<Vec<&'a VideoRecord>> {
    ids.iter()
        .map(|id| {
            m.get(id).ok_or_else(|| {
                CliError::ArtifactMismatch(format!("training video '{id}' is not in the manifest")).into()
            })
        })
        .collect()
}

fn check_labels(a: &ModelArtifact, m: &DatasetManifest) -> Result<()> {
    if m.num_classes() > a.classes.len() {
        return Err(CliError::ArtifactMismatch(format!(
            "manifest declares {} classes, the model has {}",
            m.num_classes(),
            a.classes.len()
        ))
        .into());
    }
    Ok(())
}

/// Pools `records` the way the artifact was trained.
fn pool_for(a: &ModelArtifact, m: &DatasetManifest, records: &[&VideoRecord]) -> Result<(Vec<Tree>, Vec<usize>)> {
    let h = Hierarchy::new(a.config.depth)?;
    let p = data::pool_records(m, records, a.config.stream, &h, a.config.pool_options())?;
    let trees = data::apply_scale(a.config.node_scale.as_deref(), p.trees)
        .map_err(|e| CliError::ArtifactMismatch(e.to_string()))?;
    Ok((trees, p.labels))
}

fn score(a: &ModelArtifact, m: &DatasetManifest) -> Result<Scored> {
    check_labels(a, m)?;
    let beta = a.beta_vec()?;
    let support_ids = a.support_ids();
    let (support, _) = pool_for(a, m, &records(m, &support_ids)?)?;
    let test_records = data::split_records(m, Split::Test)?;
    let (test, labels) = pool_for(a, m, &test_records)?;
    let rows = kernel_rows(&test, &support, &beta, a.config.variant, &a.config.kernel)?;
    let index: HashMap<&str, usize> = support_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let columns: Vec<Vec<usize>> = a
        .classes
        .iter()
        .map(|c| c.support_ids.iter().map(|id| index[id.as_str()]).collect())
        .collect();
    let scores = rows
        .iter()
        .map(|row| {
            a.classes
                .iter()
                .zip(&columns)
                .map(|(c, cols)| {
                    let k: Vec<f64> = cols.iter().map(|&i| row[i]).collect();
                    c.decision(&k)
                })
                .collect()
        })
        .collect();
    Ok(Scored {
        ids: test_records.iter().map(|r| r.video_id.clone()).collect(),
        labels,
        scores,
    })
}

fn metrics(m: &DatasetManifest, s: &Scored, predicted: &[usize], base: Metrics) -> Metrics {
    let classes = s.scores.first().map_or(0, Vec::len).max(m.num_classes());
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&y, &p) in s.labels.iter().zip(predicted) {
        confusion[y - 1][p - 1] += 1;
    }
    let per_class = (1..=classes)
        .map(|c| {
            let count: usize = confusion[c - 1].iter().sum();
            let correct = confusion[c - 1][c - 1];
            ClassMetrics {
                class: c,
                name: m.label_names.get(&c).cloned().unwrap_or_else(|| format!("class{c}")),
                count,
                correct,
                accuracy: (count > 0).then(|| correct as f64 / count as f64),
            }
        })
        .collect();
    let correct = s.labels.iter().zip(predicted).filter(|(y, p)| y == p).count();
    Metrics {
        test_count: s.labels.len(),
        overall_accuracy: correct as f64 / s.labels.len() as f64,
        per_class,
        confusion,
        ..base
    }
}

fn predictions_csv(s: &Scored, predicted: &[usize]) -> String {
    let classes = s.scores.first().map_or(0, Vec::len);
    let mut out = String::from("video_id,label,predicted");
    for c in 1..=classes {
        out.push_str(&format!(",score_{c}"));
    }
    out.push('\n');
    for ((id, (y, p)), row) in s.ids.iter().zip(s.labels.iter().zip(predicted)).zip(&s.scores) {
        out.push_str(&format!("{id},{y},{p}"));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

fn base_metrics(command: &str, a: &ModelArtifact, stream: String, fusion: Option<FusionInfo>) -> Metrics {
    Metrics {
        command: command.into(),
        stream,
        route: a.config.route.as_str().into(),
        depth: a.config.depth,
        variant: a.config.variant.short_name().into(),
        fusion,
        test_count: 0,
        overall_accuracy: 0.0,
        per_class: Vec::new(),
        confusion: Vec::new(),
    }
}

fn write_outputs(
    out_dir: &Path,
    s: &Scored,
    metrics: &Metrics,
    predicted: &[usize],
    betas: &[(&str, &ModelArtifact)],
) -> Result<()> {
    let mut out = OutDir::create(out_dir)?;
    out.write_json(METRICS_FILE, metrics)?;
    out.write("predictions.csv", predictions_csv(s, predicted))?;
    for (prefix, a) in betas {
        let h = Hierarchy::new(a.config.depth)?;
        let beta = a.beta_vec()?;
        out.write(&format!("{prefix}beta.csv"), beta_csv(&h, &beta))?;
        out.write(&format!("{prefix}levels.csv"), levels_csv(&h, &beta))?;
    }
    out.finish()?;
    eprintln!(
        "{}: accuracy {:.4} over {} videos, wrote {}",
        metrics.command,
        metrics.overall_accuracy,
        metrics.test_count,
        out_dir.display()
    );
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let a = read_artifact(&args.model)?;
    let m = data::manifest(&args.manifest)?;
    let s = score(&a, &m)?;
    let predicted: Vec<usize> = s.scores.iter().map(|r| argmax_class(r)).collect();
    let metrics = metrics(
        &m,
        &s,
        &predicted,
        base_metrics("eval", &a, a.config.stream.to_string(), None),
    );
    write_outputs(&args.out, &s, &metrics, &predicted, &[("", &a)])
}

fn check_compatible(a: &ModelArtifact, b: &ModelArtifact) -> Result<()> {
    let mismatch = |what: String| Err(CliError::ConfigMismatch(what).into());
    if a.config.depth != b.config.depth {
        return mismatch(format!("depth {} vs {}", a.config.depth, b.config.depth));
    }
    if a.config.variant != b.config.variant {
        return mismatch(format!(
            "variant {} vs {}",
            a.config.variant.short_name(),
            b.config.variant.short_name()
        ));
    }
    if a.config.kernel.kind != b.config.kernel.kind {
        return mismatch("kernel kinds differ".into());
    }
    if (a.config.kernel.kind == KernelKind::Rbf) && (a.config.node_scale.is_some() != b.config.node_scale.is_some()) {
        return mismatch("one model scales nodes, the other does not".into());
    }
    if a.classes.len() != b.classes.len() {
        return mismatch(format!("{} vs {} classes", a.classes.len(), b.classes.len()));
    }
    Ok(())
}

pub fn fuse_eval(args: &FuseArgs) -> Result<()> {
    check_weight(args.w).map_err(|e| CliError::Invalid(e.to_string()))?;
    let a = read_artifact(&args.model_a)?;
    let b = read_artifact(&args.model_m)?;
    check_compatible(&a, &b)?;
    let m = data::manifest(&args.manifest)?;
    let s = if args.w == 1.0 {
        score(&a, &m)?
    } else if args.w == 0.0 {
        score(&b, &m)?
    } else {
        match args.mode {
            FuseMode::ScoreAvg => {
                let sa = score(&a, &m)?;
                let sb = score(&b, &m)?;
                Scored {
                    scores: sa
                        .scores
                        .iter()
                        .zip(&sb.scores)
                        .map(|(x, y)| fuse_values(x, y, args.w))
                        .collect(),
                    ..sa
                }
            }
            FuseMode::KernelAvg => kernel_fusion(&a, &b, &m, args.w)?,
        }
    };
    let predicted: Vec<usize> = s.scores.iter().map(|r| argmax_class(r)).collect();
    let fusion = FusionInfo {
        mode: args.mode.as_str().into(),
        w: args.w,
        stream_a: a.config.stream.to_string(),
        stream_m: b.config.stream.to_string(),
    };
    let mut base = base_metrics("fuse-eval", &a, "fused".into(), Some(fusion));
    if a.config.route != b.config.route {
        base.route = format!("{}+{}", a.config.route.as_str(), b.config.route.as_str());
    }
    let metrics = metrics(&m, &s, &predicted, base);
    write_outputs(&args.out, &s, &metrics, &predicted, &[("a_", &a), ("m_", &b)])
}

/// Retrains the classifiers on `w Ka + (1 - w) Km` over the full training
/// split and scores the test split with the fused kernel columns.
fn kernel_fusion(a: &ModelArtifact, b: &ModelArtifact, m: &DatasetManifest, w: f64) -> Result<Scored> {
    check_labels(a, m)?;
    let train_records = data::split_records(m, Split::Train)?;
    for art in [a, b] {
        if art.train_count != train_records.len() {
            return Err(CliError::ArtifactMismatch(format!(
                "model trained on {} videos, the manifest has {} in the train split",
                art.train_count,
                train_records.len()
            ))
            .into());
        }
    }
    let test_records = data::split_records(m, Split::Test)?;
    let mut grams = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut test_labels = Vec::new();
    for art in [a, b] {
        let beta = art.beta_vec()?;
        let (train, y) = pool_for(art, m, &train_records)?;
        let (test, ty) = pool_for(art, m, &test_records)?;
        grams.push(gram_matrix(&train, &beta, art.config.variant, &art.config.kernel)?);
        rows.push(kernel_rows(
            &test,
            &train,
            &beta,
            art.config.variant,
            &art.config.kernel,
        )?);
        labels = y;
        test_labels = ty;
    }
    let fused = fuse_kernels(&grams[0], &grams[1], w)?;
    let model = train_one_vs_rest(&fused, &labels, a.classes.len(), &a.config.svm)?;
    let scores = rows[0]
        .iter()
        .zip(&rows[1])
        .map(|(ra, rb)| decision_scores(&model, &fuse_values(ra, rb, w)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Scored {
        ids: test_records.iter().map(|r| r.video_id.clone()).collect(),
        labels: test_labels,
        scores,
    })
}

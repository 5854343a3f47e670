//! `mtdl` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 failed check.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_pairs, set_synthetic, RunConfig};
use crate::data::{
    attach_masks, gen_synthetic, load_manifest, masks_path, read_feature_file, read_masks,
    write_feature_file, write_manifest, write_masks, FeatureSequence, SyntheticSpec,
};
use crate::gradcheck::{run_suite, CheckMode, CheckOptions};
use crate::memory::HistoryMode;
use crate::model::{fuse_scores, predict, DecisionTrace, Fallback, Model, ModelConfig};
use crate::train::{evaluate, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "mtdl",
    version,
    about = "Memory-augmented sequence classifier with a discrete write controller"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic segmental dataset as MTDL files plus manifests.
    Gen(GenArgs),
    /// Train a model on a manifest and write a checkpoint.
    Train(TrainArgs),
    /// Report accuracy and mean write rate of a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Print the per-frame decision trace for one feature file.
    Trace(TraceArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Average per-class probability files and print fused predictions.
    Fuse(FuseArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// `key = value` file with generator settings; flags override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of classes [default: 5]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Feature dimension [default: 32]
    #[arg(long)]
    pub dim: Option<usize>,
    /// Frames per sequence [default: 40]
    #[arg(long)]
    pub length: Option<usize>,
    /// Planted segment length [default: 8]
    #[arg(long)]
    pub segment: Option<usize>,
    /// Gaussian noise scale [default: 0.5]
    #[arg(long)]
    pub noise: Option<f64>,
    /// Per-frame distractor probability outside the segment [default: 0.3]
    #[arg(long)]
    pub distractor: Option<f64>,
    /// Scale of the class and distractor signatures [default: 1.5]
    #[arg(long)]
    pub signal: Option<f64>,
    /// Training sequences [default: 2000]
    #[arg(long)]
    pub train: Option<usize>,
    /// Test sequences [default: 500]
    #[arg(long)]
    pub test: Option<usize>,
    /// Generator seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// Decision threshold on σ(q) [default: 0.5]
    #[arg(long)]
    pub thr: Option<f64>,
    /// Memory history read [default: mean]
    #[arg(long, value_parser = ["mean", "sum"])]
    pub history: Option<String>,
    /// Behavior when nothing was written [default: force-last]
    #[arg(long, value_parser = ["force-last", "feature-mean"])]
    pub fallback: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Manifest listing training feature files.
    #[arg(long)]
    pub manifest: PathBuf,
    /// `key = value` file with model and training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed for initialization and shuffling [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Base learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Momentum coefficient [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Global gradient-norm clip [default: 20]
    #[arg(long)]
    pub clip: Option<f64>,
    /// Mini-batch size [default: 64]
    #[arg(long)]
    pub batch: Option<usize>,
    /// Worker threads for per-sample gradients; output does not depend on it [default: 1]
    #[arg(long)]
    pub threads: Option<usize>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write per-sample class probabilities (`id p_0 .. p_C-1`) here.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Worker threads [default: 1]
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// MTDL feature file.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `key = value` model config [default: the desk config d=32 H=128 D=256 k=64]
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "frozen", value_parser = ["frozen", "surrogate"])]
    pub mode: String,
    /// Number of seeds in the suite, starting at 0.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Frames per test sequence.
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    /// Random coordinates per parameter tensor, plus the largest-gradient one; 0 checks all.
    #[arg(long, default_value_t = 16)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Two or more score files with identical sample order.
    #[arg(long, num_args = 2.., required = true)]
    pub scores: Vec<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Check(m) => m,
        }
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Gen(a) => gen(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Trace(a) => trace(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Fuse(a) => fuse(a, out),
    }
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_pairs(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn gen(a: GenArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut spec = SyntheticSpec::default();
    if let Some(path) = &a.spec {
        for (k, v) in read_pairs(path)? {
            set_synthetic(&mut spec, &k, &v).map_err(data_err)?;
        }
    }
    macro_rules! flag {
        ($field:ident) => {
            if let Some(v) = a.$field {
                spec.$field = v;
            }
        };
    }
    flag!(classes);
    flag!(dim);
    flag!(length);
    flag!(segment);
    flag!(noise);
    flag!(distractor);
    flag!(signal);
    flag!(train);
    flag!(test);
    flag!(seed);
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let data = gen_synthetic(&spec).map_err(data_err)?;
    for (split, seqs) in [("train", &data.train), ("test", &data.test)] {
        let dir = a.out.join(split);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut entries = Vec::with_capacity(seqs.len());
        for s in seqs {
            let rel = PathBuf::from(split).join(format!("{}.mtdl", s.id));
            write_feature_file(&a.out.join(&rel), s).map_err(data_err)?;
            entries.push(rel);
        }
        let manifest = a.out.join(format!("{split}.manifest"));
        write_manifest(&manifest, &entries).map_err(data_err)?;
        write_masks(&masks_path(&manifest), seqs).map_err(data_err)?;
        writeln!(out, "{split} {} {}", seqs.len(), manifest.display()).map_err(data_err)?;
    }
    Ok(())
}

/// Loads a manifest and, when present, its mask sidecar.
pub fn load_dataset(manifest: &Path) -> Result<Vec<FeatureSequence>, CliError> {
    let mut seqs = load_manifest(manifest).map_err(data_err)?;
    if seqs.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no sequences",
            manifest.display()
        )));
    }
    let masks = masks_path(manifest);
    if masks.exists() {
        let m = read_masks(&masks).map_err(data_err)?;
        attach_masks(&mut seqs, m).map_err(data_err)?;
    }
    Ok(seqs)
}

fn apply_model_flags(cfg: &mut ModelConfig, f: &ModelFlags) -> Result<(), CliError> {
    if let Some(thr) = f.thr {
        cfg.thr = thr;
    }
    if let Some(h) = &f.history {
        cfg.history = h.parse::<HistoryMode>().map_err(CliError::Usage)?;
    }
    if let Some(fb) = &f.fallback {
        cfg.fallback = fb.parse::<Fallback>().map_err(CliError::Usage)?;
    }
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        for (k, v) in read_pairs(path)? {
            cfg.set(&k, &v).map_err(data_err)?;
        }
    }
    let t = &mut cfg.train;
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.set("lr", &v.to_string()).map_err(data_err)?;
    }
    let t = &mut cfg.train;
    if let Some(v) = a.momentum {
        t.momentum = v;
    }
    if let Some(v) = a.clip {
        t.clip = v;
    }
    if let Some(v) = a.batch {
        t.batch_size = v;
    }
    if let Some(v) = a.threads {
        t.threads = v;
    }
    apply_model_flags(&mut cfg.model, &a.model)?;

    let data = load_dataset(&a.manifest)?;
    cfg.model.input_dim = data[0].dim();
    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut trainer =
        Trainer::new(&model, cfg.train.clone()).map_err(|e| CliError::Usage(e.to_string()))?;
    writeln!(out, "epoch loss acc write_rate lr").map_err(data_err)?;
    for _ in 0..cfg.train.epochs {
        let m = trainer.train_epoch(&mut model, &data).map_err(data_err)?;
        writeln!(out, "{m}").map_err(data_err)?;
    }
    Checkpoint::new(&model, &trainer.opt, trainer.epochs_done)
        .save(&a.out)
        .map_err(data_err)
}

/// Mean over sequences of the fraction of written frames that are masked.
/// Sequences without a mask or without any write are skipped.
pub fn write_precision(model: &Model, seqs: &[FeatureSequence]) -> Result<Option<f64>, CliError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in seqs {
        let Some(mask) = &s.mask else { continue };
        let trace = model.trace(s).map_err(data_err)?;
        let written: Vec<usize> = trace
            .frames
            .iter()
            .filter(|f| f.s)
            .map(|f| f.t - 1)
            .collect();
        if written.is_empty() {
            continue;
        }
        total += written.iter().filter(|&&t| mask[t]).count() as f64 / written.len() as f64;
        n += 1;
    }
    Ok((n > 0).then(|| total / n as f64))
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = Checkpoint::load(&a.ckpt)
        .and_then(|c| c.model())
        .map_err(data_err)?;
    let data = load_dataset(&a.manifest)?;
    let pool = if a.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(a.threads)
                .build()
                .map_err(|e| CliError::Usage(e.to_string()))?,
        )
    } else {
        None
    };
    let metrics = evaluate(&model, &data, pool.as_ref()).map_err(data_err)?;
    writeln!(out, "accuracy {:.6}", metrics.accuracy).map_err(data_err)?;
    writeln!(out, "write_rate {:.6}", metrics.write_rate).map_err(data_err)?;
    if let Some(p) = write_precision(&model, &data)? {
        writeln!(out, "write_precision {p:.6}").map_err(data_err)?;
    }
    if let Some(path) = &a.scores {
        let mut text = String::new();
        for (s, probs) in data.iter().zip(&metrics.probabilities) {
            text.push_str(&s.id);
            for p in probs {
                text.push(' ');
                text.push_str(&p.to_string());
            }
            text.push('\n');
        }
        fs::write(path, text).map_err(io_err(path))?;
    }
    Ok(())
}

fn trace(a: TraceArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = Checkpoint::load(&a.ckpt)
        .and_then(|c| c.model())
        .map_err(data_err)?;
    let seq = read_feature_file(&a.input).map_err(data_err)?;
    let trace: DecisionTrace = model.trace(&seq).map_err(data_err)?;
    trace.write_lines(&mut *out).map_err(data_err)
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = ModelConfig::default();
    if let Some(path) = &a.config {
        let mut run = RunConfig::default();
        for (k, v) in read_pairs(path)? {
            run.set(&k, &v).map_err(data_err)?;
        }
        cfg = run.model;
    }
    let mode: CheckMode = a.mode.parse().map_err(CliError::Usage)?;
    let opts = CheckOptions {
        eps: a.eps,
        tol: a.tol,
        coords: (a.coords > 0).then_some(a.coords),
        seed: 0,
    };
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let reports = run_suite(&cfg, a.frames, &seeds, mode, &opts)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut worst = 0.0f64;
    let mut failed = 0;
    for r in &reports {
        write!(out, "{r}").map_err(data_err)?;
        worst = worst.max(r.max_rel_error());
        failed += usize::from(!r.passed());
    }
    writeln!(
        out,
        "summary mode={mode} seeds={} failed={failed} max_rel_err={worst:.3e}",
        reports.len()
    )
    .map_err(data_err)?;
    if failed > 0 {
        return Err(CliError::Check(format!(
            "{failed} of {} samples exceed tol {:e}",
            reports.len(),
            a.tol
        )));
    }
    Ok(())
}

/// Reads `id p_0 .. p_C-1` lines.
pub fn read_scores(path: &Path) -> Result<Vec<(String, Vec<f64>)>, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut fields = line.split_whitespace();
            let id = fields.next().unwrap_or_default().to_string();
            let probs = fields
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            if probs.is_empty() {
                return Err(CliError::Data(format!(
                    "{}:{}: no scores",
                    path.display(),
                    n + 1
                )));
            }
            Ok((id, probs))
        })
        .collect()
}

fn fuse(a: FuseArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let files = a
        .scores
        .iter()
        .map(|p| read_scores(p))
        .collect::<Result<Vec<_>, _>>()?;
    let n = files[0].len();
    if let Some(bad) = files.iter().position(|f| f.len() != n) {
        return Err(CliError::Data(format!(
            "{} has {} samples, expected {n}",
            a.scores[bad].display(),
            files[bad].len()
        )));
    }
    for i in 0..n {
        let id = &files[0][i].0;
        if let Some(f) = files.iter().find(|f| &f[i].0 != id) {
            return Err(CliError::Data(format!(
                "sample {}: id `{}` does not match `{id}`",
                i + 1,
                f[i].0
            )));
        }
        let streams: Vec<Vec<f64>> = files.iter().map(|f| f[i].1.clone()).collect();
        let fused = fuse_scores(&streams).map_err(|e| CliError::Data(format!("{id}: {e}")))?;
        writeln!(out, "{id} {}", predict(&fused)).map_err(data_err)?;
    }
    Ok(())
}

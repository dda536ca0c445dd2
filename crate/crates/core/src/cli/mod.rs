//! Command-line front end.
//!
//! Every verb prints a human-readable table followed by one or more
//! machine-readable blocks:
//!
//! ```text
//! #result <label>
//! key=value
//! #end
//! ```
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 a check
//! failed.

mod ablate;
mod output;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::embio::{self, gen_synthetic, validate, EmbeddingBatch, SynthSpec};
use crate::error::Error;
use crate::metrics::RetrievalReport;
use crate::trainer::{
    self, init_params, model_gradcheck, read_checkpoint_file, train_with, write_checkpoint_file, GradCheckSetup,
    ModelParams, TrainConfig,
};

pub use output::{parse_blocks, Block};

/// Gradient check tolerance.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub(crate) enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] Error),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(Error::Contract(_)) => 1,
            CliError::Lib(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "msam", about = "Cross-modal video-text scoring toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic embedding container
    GenSynth {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all parameters and write a checkpoint
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        verbose: bool,
    },
    /// Retrieval metrics in both directions
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Untrained parameters when omitted
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        verbose: bool,
    },
    /// Print the full video × text similarity matrix
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare frame poolers, or sweep k / frame count
    Ablate {
        /// Synthetic data from the generator flags when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated: mean, topk[:N], selfattn, ciffp
        #[arg(long, default_value = "mean,topk,selfattn,ciffp")]
        pooling: String,
        /// `k=1,3,5` or `frames=4,8,12`
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        verbose: bool,
    },
    /// Compare backward gradients with central differences
    Gradcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        verbose: bool,
    },
    /// Check a container and list every problem found
    Validate { file: PathBuf },
}

#[derive(Args, Debug, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = 16)]
    videos: usize,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    captions: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

impl SynthArgs {
    fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            num_videos: self.videos,
            frames_per_video: self.frames,
            captions_per_video: self.captions,
            dim: self.dim,
            cluster_noise: self.noise,
            seed,
            ..SynthSpec::default()
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    /// JSON file with TrainConfig keys; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainArgs {
    fn config(&self) -> CliResult<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(Error::from)?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?
            }
            None => TrainConfig::default(),
        };
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.lr {
            c.base_lr = v;
        }
        if let Some(v) = self.wd {
            c.weight_decay = v;
        }
        if let Some(v) = self.lambda {
            c.lambda = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.check()?;
        Ok(c)
    }
}

/// Runs the CLI on `args` (program name first) with the process streams.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// [`run`] with explicit output streams.
pub fn run_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code()
        }
    }
}

/// Caps the global rayon pool at `MSAM_THREADS` when set.
fn configure_threads() {
    if let Some(n) = std::env::var("MSAM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // fails harmlessly when the pool already exists (repeated in-process runs)
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

/// Six decimals, without a sign on values that round to zero.
fn fixed6(x: f64) -> String {
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        s[1..].to_string()
    } else {
        s
    }
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes()).map_err(Error::from)?;
    Ok(())
}

fn save(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::GenSynth { synth, seed, out: path } => gen_synth(&synth.spec(seed.unwrap_or(0)), &path, out),
        Command::Validate { file } => validate_cmd(&file, out),
        Command::Train {
            data,
            train,
            out: ckpt,
            report,
            verbose,
        } => train_cmd(&data, &train, ckpt.as_deref(), report.as_deref(), verbose, out, err),
        Command::Eval {
            data,
            ckpt,
            report,
            verbose,
        } => eval_cmd(&data, ckpt.as_deref(), report.as_deref(), verbose, out, err),
        Command::Score { data, ckpt, out: path } => score_cmd(&data, ckpt.as_deref(), path.as_deref(), out),
        Command::Ablate {
            data,
            synth,
            train,
            pooling,
            sweep,
            out: path,
            verbose,
        } => {
            let text = ablate::run(&ablate::AblateRequest {
                data: data.as_deref(),
                synth: &synth,
                train: &train,
                pooling: &pooling,
                sweep: sweep.as_deref(),
                verbose,
            }, err)?;
            if let Some(p) = &path {
                save(p, &text.body)?;
            }
            emit(out, &text.body)?;
            match text.failed_check {
                Some(msg) => Err(CliError::Check(msg)),
                None => Ok(()),
            }
        }
        Command::Gradcheck {
            seed,
            k,
            dim,
            frames,
            report,
            verbose,
        } => gradcheck_cmd(
            &GradCheckSetup {
                seed,
                k,
                dim,
                frames,
                ..GradCheckSetup::default()
            },
            report.as_deref(),
            verbose,
            out,
            err,
        ),
    }
}

fn gen_synth(spec: &SynthSpec, path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let batch = gen_synthetic(spec)?;
    let bytes = embio::write_file(&batch, path)?;
    let mut block = Block::new("gen-synth");
    block.push("videos", batch.videos.len());
    block.push("texts", batch.texts.len());
    block.push("dim", batch.dim);
    block.push("frames", spec.frames_per_video);
    block.push("bytes", bytes);
    let table = format!(
        "wrote {} videos, {} captions (D = {}) to {}\n",
        batch.videos.len(),
        batch.texts.len(),
        batch.dim,
        path.display()
    );
    emit(out, &(table + &block.to_string()))
}

fn validate_cmd(path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let bytes = std::fs::read(path).map_err(Error::from)?;
    let mut block = Block::new("validate");
    let batch = match embio::decode(&bytes) {
        Ok(b) => b,
        Err(e) => {
            block.push("valid", false);
            block.push("error", e.to_string().replace('\n', " "));
            emit(out, &block.to_string())?;
            return Err(e.into());
        }
    };
    let diags = validate(&batch);
    for d in &diags {
        emit(out, &format!("{d}\n"))?;
    }
    block.push("valid", diags.is_empty());
    block.push("videos", batch.videos.len());
    block.push("texts", batch.texts.len());
    block.push("dim", batch.dim);
    block.push("diagnostics", diags.len());
    emit(out, &block.to_string())?;
    if diags.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{} problems found", diags.len())).into())
    }
}

fn load_params(ckpt: Option<&Path>, data: &EmbeddingBatch) -> CliResult<ModelParams> {
    match ckpt {
        Some(p) => {
            let params = read_checkpoint_file(p)?;
            if params.dim() != data.dim {
                return Err(Error::Format(format!(
                    "checkpoint dimension {} does not match data dimension {}",
                    params.dim(),
                    data.dim
                ))
                .into());
            }
            Ok(params)
        }
        None => Ok(init_params(data.dim, &TrainConfig::default())?),
    }
}

pub(crate) fn metrics_table(rows: &[(String, &RetrievalReport, &RetrievalReport)]) -> String {
    let mut s = format!(
        "{:<14} {:>7} {:>7} {:>7} {:>7} {:>8} | {:>7} {:>7} {:>7} {:>7} {:>8}\n",
        "setting", "t2v R1", "R5", "R10", "MdR", "MnR", "v2t R1", "R5", "R10", "MdR", "MnR"
    );
    for (name, t2v, v2t) in rows {
        s.push_str(&format!("{name:<14}"));
        for (i, r) in [t2v, v2t].iter().enumerate() {
            if i == 1 {
                s.push_str(" |");
            }
            s.push_str(&format!(
                " {:>7.4} {:>7.4} {:>7.4} {:>7.1} {:>8.3}",
                r.recall(1),
                r.recall(5),
                r.recall(10),
                r.mdr,
                r.mnr
            ));
        }
        s.push('\n');
    }
    s
}

fn push_reports(block: &mut Block, t2v: &RetrievalReport, v2t: &RetrievalReport) {
    block.push_report(t2v);
    block.push_report(v2t);
}

fn train_cmd(
    data: &Path,
    args: &TrainArgs,
    ckpt: Option<&Path>,
    report: Option<&Path>,
    verbose: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<()> {
    let batch = embio::read_file(data)?;
    let config = args.config()?;
    let start = Instant::now();
    let (params, history) = train_with(&batch, &config, |step, l| {
        if verbose {
            let _ = writeln!(
                err,
                "step {step:>5}  total {:.6}  vtm {:.6}  ddsl {:.6}  dst {:.6}",
                l.total, l.l_vtm, l.l_ddsl, l.l_dst
            );
        }
    })?;
    let mut table = format!(
        "{:>6} {:>12} {:>12} {:>12} {:>12} {:>8} {:>8}\n",
        "step", "total", "l_vtm", "l_ddsl", "l_dst", "t2v R1", "v2t R1"
    );
    for (done, t2v, v2t) in &history.evals {
        let l = &history.losses[done - 1];
        table.push_str(&format!(
            "{done:>6} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>8.4} {:>8.4}\n",
            l.total,
            l.l_vtm,
            l.l_ddsl,
            l.l_dst,
            t2v.recall(1),
            v2t.recall(1)
        ));
    }
    let first = history.losses.first().expect("at least one step");
    let last = history.losses.last().expect("at least one step");
    let mut block = Block::new("train");
    block.push("steps", history.losses.len());
    block.push("k", config.k);
    block.push("lambda", fixed6(config.lambda));
    block.push("initial_total", fixed6(first.total));
    block.push("final_total", fixed6(last.total));
    block.push("final_l_vtm", fixed6(last.l_vtm));
    block.push("final_l_ddsl", fixed6(last.l_ddsl));
    block.push("final_l_dst", fixed6(last.l_dst));
    if let Some((_, t2v, v2t)) = history.evals.last() {
        push_reports(&mut block, t2v, v2t);
    }
    if let Some(p) = ckpt {
        let n = write_checkpoint_file(&params, p)?;
        block.push("checkpoint_bytes", n);
    }
    if verbose {
        let _ = writeln!(err, "wall time {:.3} s", start.elapsed().as_secs_f64());
    }
    let block = block.to_string();
    if let Some(p) = report {
        save(p, &block)?;
    }
    emit(out, &(table + &block))
}

fn eval_cmd(
    data: &Path,
    ckpt: Option<&Path>,
    report: Option<&Path>,
    verbose: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<()> {
    let batch = embio::read_file(data)?;
    let params = load_params(ckpt, &batch)?;
    let start = Instant::now();
    let (t2v, v2t) = trainer::evaluate(&batch, &params)?;
    if verbose {
        let _ = writeln!(err, "wall time {:.3} s", start.elapsed().as_secs_f64());
    }
    let table = metrics_table(&[("ciffp".to_string(), &t2v, &v2t)]);
    let mut block = Block::new("eval");
    block.push("videos", batch.videos.len());
    block.push("texts", batch.texts.len());
    push_reports(&mut block, &t2v, &v2t);
    let block = block.to_string();
    if let Some(p) = report {
        save(p, &block)?;
    }
    emit(out, &(table + &block))
}

fn score_cmd(data: &Path, ckpt: Option<&Path>, path: Option<&Path>, out: &mut dyn Write) -> CliResult<()> {
    let batch = embio::read_file(data)?;
    let params = load_params(ckpt, &batch)?;
    let scores = trainer::score_all(&batch, &params.ciffp)?;
    let mut text = String::from("# rows: videos by id order; columns: texts; tab-separated\n");
    let mut header = vec!["video\\text".to_string()];
    header.extend(batch.texts.iter().map(|t| t.id.to_string()));
    text.push_str(&header.join("\t"));
    text.push('\n');
    for (vi, v) in batch.videos.iter().enumerate() {
        let mut row = vec![v.id.to_string()];
        row.extend(scores.row(vi).iter().map(|x| format!("{x:.6}")));
        text.push_str(&row.join("\t"));
        text.push('\n');
    }
    let mut block = Block::new("score");
    block.push("videos", batch.videos.len());
    block.push("texts", batch.texts.len());
    if let Some(p) = path {
        save(p, &text)?;
        block.push("written", p.display());
        emit(out, &block.to_string())
    } else {
        emit(out, &(text + &block.to_string()))
    }
}

fn gradcheck_cmd(
    setup: &GradCheckSetup,
    report: Option<&Path>,
    verbose: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> CliResult<()> {
    let start = Instant::now();
    let results = model_gradcheck(setup)?;
    if verbose {
        let _ = writeln!(err, "wall time {:.3} s", start.elapsed().as_secs_f64());
    }
    let mut table = format!("{:<8} {:>14} {:<28} {:>8}\n", "loss", "max rel err", "worst parameter", "status");
    let mut block = Block::new("gradcheck");
    block.push("tolerance", format!("{GRADCHECK_TOL:e}"));
    block.push("step", format!("{:e}", setup.step));
    let mut failed = Vec::new();
    for (term, rep) in &results {
        let worst = rep.worst().map(|e| e.name.clone()).unwrap_or_default();
        let ok = rep.passes(GRADCHECK_TOL);
        table.push_str(&format!(
            "{:<8} {:>14.3e} {:<28} {:>8}\n",
            term.as_str(),
            rep.max_rel_err(),
            worst,
            if ok { "ok" } else { "FAIL" }
        ));
        block.push(format!("{}_max_rel_err", term.as_str()), format!("{:.3e}", rep.max_rel_err()));
        if !ok {
            failed.push(term.as_str());
        }
    }
    block.push("pass", failed.is_empty());
    let block = block.to_string();
    if let Some(p) = report {
        save(p, &block)?;
    }
    emit(out, &(table + &block))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

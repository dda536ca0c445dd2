//! Pooler comparison and hyperparameter sweeps.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use super::{metrics_table, CliError, CliResult, SynthArgs, TrainArgs};
use crate::ciffp::{
    ciffp_scores, mean_pool_similarity, self_attention_pool_similarity, topk_pool_similarity, CiffpParams,
    SelfAttentionParams,
};
use crate::cli::Block;
use crate::embio::{self, gen_synthetic, EmbeddingBatch};
use crate::error::Result;
use crate::metrics::{evaluate_scores, RetrievalReport};
use crate::tensor::Tensor;
use crate::trainer::{evaluate, train};

/// Default frame count kept by top-k pooling.
pub const DEFAULT_TOPK: usize = 3;
/// Allowed gap between self-attention with a zero projection and mean pooling.
pub const STRUCTURAL_TOL: f64 = 1e-6;

pub(super) struct AblateRequest<'a> {
    pub data: Option<&'a Path>,
    pub synth: &'a SynthArgs,
    pub train: &'a TrainArgs,
    pub pooling: &'a str,
    pub sweep: Option<&'a str>,
    pub verbose: bool,
}

pub(super) struct AblateOutput {
    pub body: String,
    pub failed_check: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pooler {
    Mean,
    TopK(usize),
    SelfAttn,
    Ciffp,
}

impl Pooler {
    fn name(self) -> String {
        match self {
            Pooler::Mean => "mean".into(),
            Pooler::TopK(n) => format!("topk:{n}"),
            Pooler::SelfAttn => "selfattn".into(),
            Pooler::Ciffp => "ciffp".into(),
        }
    }
}

fn parse_poolers(spec: &str) -> CliResult<Vec<Pooler>> {
    let mut out = Vec::new();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let p = match item.split_once(':') {
            None if item == "mean" => Pooler::Mean,
            None if item == "topk" => Pooler::TopK(DEFAULT_TOPK),
            None if item == "selfattn" => Pooler::SelfAttn,
            None if item == "ciffp" => Pooler::Ciffp,
            Some(("topk", n)) => match n.parse::<usize>() {
                Ok(n) if n >= 1 => Pooler::TopK(n),
                _ => return Err(CliError::Usage(format!("bad top-k count in '{item}'"))),
            },
            _ => return Err(CliError::Usage(format!("unknown pooler '{item}'"))),
        };
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("--pooling lists no pooler".into()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Sweep {
    K(Vec<usize>),
    Frames(Vec<usize>),
}

fn parse_sweep(spec: &str) -> CliResult<Sweep> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("sweep '{spec}' is not key=v1,v2,...")))?;
    let values = values
        .split(',')
        .map(|v| match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("bad sweep value '{v}'"))),
        })
        .collect::<CliResult<Vec<_>>>()?;
    match key.trim() {
        "k" => Ok(Sweep::K(values)),
        "frames" => Ok(Sweep::Frames(values)),
        other => Err(CliError::Usage(format!("unknown sweep key '{other}' (use k or frames)"))),
    }
}

/// Scores every video against every text, one video at a time so frame
/// counts may differ.
fn pooler_scores(data: &EmbeddingBatch, pooler: Pooler) -> Result<Tensor<f32>> {
    let texts = data.all_text_pooled()?;
    if pooler == Pooler::Ciffp {
        let frames: Vec<&Tensor<f32>> = data.videos.iter().map(|v| &v.frames).collect();
        return ciffp_scores(&frames, &texts, &CiffpParams::zeros(data.dim));
    }
    let attn = SelfAttentionParams::zeros(data.dim);
    let mut rows = Vec::with_capacity(data.videos.len() * texts.dim(0));
    for v in &data.videos {
        let f = v.frames.dim(0);
        let frames = v.frames.reshape([1, f, data.dim])?;
        let s = match pooler {
            Pooler::Mean => mean_pool_similarity(&frames, &texts)?,
            Pooler::TopK(n) => topk_pool_similarity(&frames, &texts, n.min(f))?,
            Pooler::SelfAttn => self_attention_pool_similarity(&frames, &texts, &attn)?,
            Pooler::Ciffp => unreachable!("handled above"),
        };
        rows.extend_from_slice(s.data());
    }
    Tensor::new([data.videos.len(), texts.dim(0)], rows)
}

fn load(req: &AblateRequest<'_>, seed: u64) -> CliResult<EmbeddingBatch> {
    Ok(match req.data {
        Some(p) => embio::read_file(p)?,
        None => gen_synthetic(&req.synth.spec(seed))?,
    })
}

pub(super) fn run(req: &AblateRequest<'_>, err: &mut dyn Write) -> CliResult<AblateOutput> {
    match req.sweep {
        Some(s) => sweep(req, parse_sweep(s)?, err),
        None => compare(req, &parse_poolers(req.pooling)?),
    }
}

fn compare(req: &AblateRequest<'_>, poolers: &[Pooler]) -> CliResult<AblateOutput> {
    let data = load(req, req.train.seed.unwrap_or(0))?;
    let gt = data.ground_truth()?;
    let mut scores = Vec::new();
    let mut reports: Vec<(String, RetrievalReport, RetrievalReport)> = Vec::new();
    for &p in poolers {
        let s = pooler_scores(&data, p)?;
        let (t2v, v2t) = evaluate_scores(&s, &gt)?;
        reports.push((p.name(), t2v, v2t));
        scores.push((p, s));
    }
    let rows: Vec<_> = reports.iter().map(|(n, a, b)| (n.clone(), a, b)).collect();
    let mut body = metrics_table(&rows);
    for (name, t2v, v2t) in &reports {
        let mut b = Block::new(format!("ablate pooler={name}"));
        b.push_report(t2v);
        b.push_report(v2t);
        body.push_str(&b.to_string());
    }

    let mut failed_check = None;
    let find = |want: Pooler| scores.iter().find(|(p, _)| *p == want).map(|(_, s)| s);
    if let (Some(mean), Some(attn)) = (find(Pooler::Mean), find(Pooler::SelfAttn)) {
        let diff = mean.max_abs_diff(attn)? as f64;
        let ok = diff <= STRUCTURAL_TOL;
        let mut b = Block::new("ablate check");
        b.push("selfattn_vs_mean_max_abs_diff", format!("{diff:.3e}"));
        b.push("pass", ok);
        body.push_str(&b.to_string());
        if !ok {
            failed_check = Some(format!("zero-projection self-attention differs from mean pooling by {diff:e}"));
        }
    }
    Ok(AblateOutput { body, failed_check })
}

fn sweep(req: &AblateRequest<'_>, sweep: Sweep, err: &mut dyn Write) -> CliResult<AblateOutput> {
    let base = req.train.config()?;
    let (key, values) = match &sweep {
        Sweep::K(v) => ("k", v.clone()),
        Sweep::Frames(v) => ("frames", v.clone()),
    };
    if key == "frames" && req.data.is_some() {
        return Err(CliError::Usage(
            "a frames sweep regenerates synthetic data; drop --data".into(),
        ));
    }
    let fixed = if key == "k" { Some(load(req, base.seed)?) } else { None };

    let mut reports = Vec::new();
    for &v in &values {
        let mut config = base.clone();
        let data = match &fixed {
            Some(d) => {
                config.k = v;
                d.clone()
            }
            None => {
                let mut synth = req.synth.clone();
                synth.frames = v;
                gen_synthetic(&synth.spec(base.seed))?
            }
        };
        let start = Instant::now();
        let (params, _) = train(&data, &config)?;
        let (t2v, v2t) = evaluate(&data, &params)?;
        if req.verbose {
            let _ = writeln!(err, "{key}={v}: wall time {:.3} s", start.elapsed().as_secs_f64());
        }
        reports.push((format!("{key}={v}"), t2v, v2t));
    }
    let rows: Vec<_> = reports.iter().map(|(n, a, b)| (n.clone(), a, b)).collect();
    let mut body = metrics_table(&rows);
    for (name, t2v, v2t) in &reports {
        let mut b = Block::new(format!("sweep {name}"));
        b.push("steps", base.steps);
        b.push_report(t2v);
        b.push_report(v2t);
        body.push_str(&b.to_string());
    }
    Ok(AblateOutput {
        body,
        failed_check: None,
    })
}

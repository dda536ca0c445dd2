//! Precomputed video/text embeddings: in-memory batch, validation, the
//! binary container format, and a seeded synthetic generator.

pub(crate) mod container;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

pub use container::{decode, read_container, read_file, write_container, write_file, MAGIC, VERSION};
pub use synth::{gen_synthetic, SynthSpec};

use crate::error::{Error, Result};
use crate::metrics::GroundTruth;
use crate::tensor::Tensor;

/// One video: per-frame embeddings and a pooled embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: u64,
    /// `[F × D]`
    pub frames: Tensor<f32>,
    /// `[D]`
    pub pooled: Tensor<f32>,
}

/// One caption: per-token embeddings, a pooled embedding, and the video it describes.
#[derive(Clone, Debug, PartialEq)]
pub struct TextRecord {
    pub id: u64,
    pub video_id: u64,
    /// `[L × D]`
    pub tokens: Tensor<f32>,
    /// `[D]`
    pub pooled: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub dim: usize,
    pub videos: Vec<VideoRecord>,
    pub texts: Vec<TextRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordRef {
    Batch,
    Video(u64),
    Text(u64),
}

impl fmt::Display for RecordRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordRef::Batch => write!(f, "batch"),
            RecordRef::Video(id) => write!(f, "video {id}"),
            RecordRef::Text(id) => write!(f, "text {id}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiagnosticKind {
    /// A text names a video id that does not exist.
    Reference,
    /// NaN or infinite value in a payload.
    Finiteness,
    /// A tensor disagrees with the batch dimension or has the wrong rank.
    Shape,
    DuplicateId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub record: RecordRef,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.record, self.message)
    }
}

/// Reports every invariant violation in `batch`. An empty list means valid.
pub fn validate(batch: &EmbeddingBatch) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let d = batch.dim;
    let mut push = |kind, record, message: String| {
        out.push(Diagnostic {
            kind,
            record,
            message,
        })
    };
    if d == 0 {
        push(DiagnosticKind::Shape, RecordRef::Batch, "dimension is zero".into());
    }

    let mut video_ids = BTreeSet::new();
    for v in &batch.videos {
        let r = RecordRef::Video(v.id);
        if !video_ids.insert(v.id) {
            push(DiagnosticKind::DuplicateId, r, format!("duplicate video id {}", v.id));
        }
        if v.frames.rank() != 2 || v.frames.dim(1) != d {
            push(
                DiagnosticKind::Shape,
                r,
                format!("frames have shape {:?}, expected [F, {d}]", v.frames.shape()),
            );
        }
        if v.pooled.shape() != [d] {
            push(
                DiagnosticKind::Shape,
                r,
                format!("pooled has shape {:?}, expected [{d}]", v.pooled.shape()),
            );
        }
        if !v.frames.all_finite() || !v.pooled.all_finite() {
            push(
                DiagnosticKind::Finiteness,
                r,
                format!("video {} contains a non-finite value", v.id),
            );
        }
    }

    let mut text_ids = BTreeSet::new();
    for t in &batch.texts {
        let r = RecordRef::Text(t.id);
        if !text_ids.insert(t.id) {
            push(DiagnosticKind::DuplicateId, r, format!("duplicate text id {}", t.id));
        }
        if !video_ids.contains(&t.video_id) {
            push(
                DiagnosticKind::Reference,
                r,
                format!("references missing video id {}", t.video_id),
            );
        }
        if t.tokens.rank() != 2 || t.tokens.dim(1) != d {
            push(
                DiagnosticKind::Shape,
                r,
                format!("tokens have shape {:?}, expected [L, {d}]", t.tokens.shape()),
            );
        }
        if t.pooled.shape() != [d] {
            push(
                DiagnosticKind::Shape,
                r,
                format!("pooled has shape {:?}, expected [{d}]", t.pooled.shape()),
            );
        }
        if !t.tokens.all_finite() || !t.pooled.all_finite() {
            push(
                DiagnosticKind::Finiteness,
                r,
                format!("text {} contains a non-finite value", t.id),
            );
        }
    }
    out
}

/// Converts diagnostics into the most specific error, if any.
pub(crate) fn diagnostics_to_error(diags: &[Diagnostic]) -> Option<Error> {
    let first = diags.first()?;
    let all = diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ");
    Some(match first.kind {
        DiagnosticKind::Reference => Error::Reference(all),
        _ => Error::Validation(all),
    })
}

impl EmbeddingBatch {
    /// Errors unless [`validate`] is clean.
    pub fn check(&self) -> Result<()> {
        match diagnostics_to_error(&validate(self)) {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Text index → video index pairing.
    pub fn ground_truth(&self) -> Result<GroundTruth> {
        let index: BTreeMap<u64, usize> =
            self.videos.iter().enumerate().map(|(i, v)| (v.id, i)).collect();
        let map = self
            .texts
            .iter()
            .map(|t| {
                index.get(&t.video_id).copied().ok_or_else(|| {
                    Error::Reference(format!("text {} references missing video id {}", t.id, t.video_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GroundTruth::new(map, self.videos.len())
    }

    /// Text indices grouped by video index.
    pub fn captions_by_video(&self) -> Result<Vec<Vec<usize>>> {
        let gt = self.ground_truth()?;
        let mut out = vec![Vec::new(); self.videos.len()];
        for (t, &v) in gt.text_to_video().iter().enumerate() {
            out[v].push(t);
        }
        Ok(out)
    }

    /// Common frame count, when every video has the same one.
    pub fn uniform_frames(&self) -> Option<usize> {
        uniform(self.videos.iter().map(|v| v.frames.dim(0)))
    }

    /// Common token count, when every text has the same one.
    pub fn uniform_tokens(&self) -> Option<usize> {
        uniform(self.texts.iter().map(|t| t.tokens.dim(0)))
    }

    /// Frames of the selected videos stacked into `[B × F × D]`.
    pub fn stack_frames(&self, videos: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<&Tensor<f32>> = videos.iter().map(|&i| &self.videos[i].frames).collect();
        Tensor::stack(&items)
    }

    /// Pooled video embeddings `[B × D]`.
    pub fn stack_video_pooled(&self, videos: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<&Tensor<f32>> = videos.iter().map(|&i| &self.videos[i].pooled).collect();
        Tensor::stack(&items)
    }

    /// Token embeddings of the selected texts `[T × L × D]`.
    pub fn stack_tokens(&self, texts: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<&Tensor<f32>> = texts.iter().map(|&i| &self.texts[i].tokens).collect();
        Tensor::stack(&items)
    }

    /// Pooled text embeddings `[T × D]`.
    pub fn stack_text_pooled(&self, texts: &[usize]) -> Result<Tensor<f32>> {
        let items: Vec<&Tensor<f32>> = texts.iter().map(|&i| &self.texts[i].pooled).collect();
        Tensor::stack(&items)
    }

    pub fn all_text_pooled(&self) -> Result<Tensor<f32>> {
        let all: Vec<usize> = (0..self.texts.len()).collect();
        self.stack_text_pooled(&all)
    }
}

fn uniform(mut it: impl Iterator<Item = usize>) -> Option<usize> {
    let first = it.next()?;
    it.all(|x| x == first).then_some(first)
}

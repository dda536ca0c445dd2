//! Retrieval evaluation over a video × text score matrix.
//!
//! Ranks are 1-based. Ties resolve in favor of the ground truth: a
//! candidate only outranks the correct item when its score is strictly
//! greater. Video-to-text queries with several correct captions take the
//! best (minimum) rank among them.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Recall cutoffs reported by [`report`].
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Text index → video index pairing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    text_to_video: Vec<usize>,
    num_videos: usize,
}

impl GroundTruth {
    pub fn new(text_to_video: Vec<usize>, num_videos: usize) -> Result<Self> {
        if let Some((t, &v)) = text_to_video.iter().enumerate().find(|(_, &v)| v >= num_videos) {
            return Err(Error::Reference(format!(
                "text {t} maps to video {v}, but only {num_videos} videos exist"
            )));
        }
        Ok(Self {
            text_to_video,
            num_videos,
        })
    }

    /// Text `i` describes video `i`.
    pub fn diagonal(n: usize) -> Self {
        Self {
            text_to_video: (0..n).collect(),
            num_videos: n,
        }
    }

    pub fn text_to_video(&self) -> &[usize] {
        &self.text_to_video
    }

    pub fn num_videos(&self) -> usize {
        self.num_videos
    }

    pub fn num_texts(&self) -> usize {
        self.text_to_video.len()
    }

    fn captions_of(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_videos];
        for (t, &v) in self.text_to_video.iter().enumerate() {
            out[v].push(t);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    TextToVideo,
    VideoToText,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::TextToVideo => "text-to-video",
            Direction::VideoToText => "video-to-text",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Direction::TextToVideo => "t2v",
            Direction::VideoToText => "v2t",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankVector {
    pub ranks: Vec<usize>,
    pub num_candidates: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub r_at: BTreeMap<usize, f64>,
    pub mdr: f64,
    pub mnr: f64,
    pub ranks: RankVector,
}

/// Scores as `f64` rows, checked against the ground truth.
fn score_rows<T: Real>(s_vt: &Tensor<T>, gt: &GroundTruth) -> Result<(usize, usize, Vec<f64>)> {
    if s_vt.rank() != 2 {
        return Err(Error::shape("rank scores", s_vt.shape(), &[gt.num_videos, gt.num_texts()]));
    }
    let (b, t) = (s_vt.dim(0), s_vt.dim(1));
    if b != gt.num_videos || t != gt.num_texts() {
        return Err(Error::shape("rank scores", s_vt.shape(), &[gt.num_videos, gt.num_texts()]));
    }
    if !s_vt.all_finite() {
        return Err(Error::Validation("score matrix contains non-finite values".into()));
    }
    Ok((b, t, s_vt.data().iter().map(|x| x.f64()).collect()))
}

/// Rank of each text's video among all videos (column-wise).
pub fn t2v_ranks<T: Real>(s_vt: &Tensor<T>, gt: &GroundTruth) -> Result<RankVector> {
    let (b, t, s) = score_rows(s_vt, gt)?;
    let ranks = (0..t)
        .into_par_iter()
        .map(|col| {
            let target = s[gt.text_to_video[col] * t + col];
            1 + (0..b).filter(|&row| s[row * t + col] > target).count()
        })
        .collect();
    Ok(RankVector {
        ranks,
        num_candidates: b,
    })
}

/// Best rank of each video's captions among all texts (row-wise).
pub fn v2t_ranks<T: Real>(s_vt: &Tensor<T>, gt: &GroundTruth) -> Result<RankVector> {
    let (b, t, s) = score_rows(s_vt, gt)?;
    let captions = gt.captions_of();
    if let Some(v) = captions.iter().position(|c| c.is_empty()) {
        return Err(Error::Reference(format!("video {v} has no caption")));
    }
    let ranks = (0..b)
        .into_par_iter()
        .map(|row| {
            let scores = &s[row * t..(row + 1) * t];
            captions[row]
                .iter()
                .map(|&c| 1 + scores.iter().filter(|&&x| x > scores[c]).count())
                .min()
                .expect("every video has a caption")
        })
        .collect();
    Ok(RankVector {
        ranks,
        num_candidates: t,
    })
}

/// Ranks by fully sorting each query's candidates, independent of the
/// counting used by [`t2v_ranks`] and [`v2t_ranks`].
pub fn oracle_ranks<T: Real>(s_vt: &Tensor<T>, gt: &GroundTruth, direction: Direction) -> Result<RankVector> {
    let (b, t, s) = score_rows(s_vt, gt)?;
    let sorted_position = |mut cands: Vec<(f64, bool)>| -> usize {
        // descending score; correct items first among equals
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(y.1.cmp(&x.1)));
        cands.iter().position(|c| c.1).expect("a correct candidate exists") + 1
    };
    match direction {
        Direction::TextToVideo => {
            let ranks = (0..t)
                .map(|col| {
                    let target = gt.text_to_video[col];
                    sorted_position((0..b).map(|row| (s[row * t + col], row == target)).collect())
                })
                .collect();
            Ok(RankVector {
                ranks,
                num_candidates: b,
            })
        }
        Direction::VideoToText => {
            let mut ranks = Vec::with_capacity(b);
            for row in 0..b {
                let cands: Vec<(f64, bool)> = (0..t)
                    .map(|col| (s[row * t + col], gt.text_to_video[col] == row))
                    .collect();
                if !cands.iter().any(|c| c.1) {
                    return Err(Error::Reference(format!("video {row} has no caption")));
                }
                ranks.push(sorted_position(cands));
            }
            Ok(RankVector {
                ranks,
                num_candidates: t,
            })
        }
    }
}

/// R@{1,5,10}, median rank and mean rank.
pub fn report(ranks: &RankVector, direction: Direction) -> Result<RetrievalReport> {
    let n = ranks.ranks.len();
    if n == 0 {
        return Err(Error::Contract("cannot report on an empty rank vector".into()));
    }
    let r_at = RECALL_KS
        .iter()
        .map(|&k| {
            let hits = ranks.ranks.iter().filter(|&&r| r <= k).count();
            (k, hits as f64 / n as f64)
        })
        .collect();
    let mut sorted = ranks.ranks.clone();
    sorted.sort_unstable();
    let mdr = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let mnr = sorted.iter().sum::<usize>() as f64 / n as f64;
    Ok(RetrievalReport {
        direction,
        r_at,
        mdr,
        mnr,
        ranks: ranks.clone(),
    })
}

/// Ranks and reports for both directions.
pub fn evaluate_scores<T: Real>(s_vt: &Tensor<T>, gt: &GroundTruth) -> Result<(RetrievalReport, RetrievalReport)> {
    let t2v = report(&t2v_ranks(s_vt, gt)?, Direction::TextToVideo)?;
    let v2t = report(&v2t_ranks(s_vt, gt)?, Direction::VideoToText)?;
    Ok((t2v, v2t))
}

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.r_at.get(&k).copied().unwrap_or_else(|| {
            let n = self.ranks.ranks.len();
            self.ranks.ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64
        })
    }

    /// Flat `key=value` lines: direction, r1, r5, r10, mdr, mnr, n_queries.
    pub fn to_kv(&self) -> String {
        let mut s = format!("direction={}\n", self.direction);
        for k in RECALL_KS {
            s.push_str(&format!("r{k}={:.4}\n", self.recall(k)));
        }
        s.push_str(&format!("mdr={:.4}\nmnr={:.4}\n", self.mdr, self.mnr));
        s.push_str(&format!("n_queries={}\n", self.ranks.ranks.len()));
        s
    }
}

/// Parses `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

//! Videos, queries and moments; feature-file ingestion; synthetic corpora.

mod io;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;

pub use io::{load_corpus, read_features, save_corpus, write_features, QueryRecord, FEATURE_MAGIC, FEATURE_VERSION};
pub use synthetic::{generate_synthetic_corpus, SyntheticConfig, SyntheticCorpus, SyntheticTruth};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}: i/o error: {source}")]
    Io {
        file: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: malformed JSON: {message}")]
    Json { file: PathBuf, message: String },
    #[error("{file}: bad magic {found:?}, expected \"MNTF\"")]
    BadMagic { file: PathBuf, found: [u8; 4] },
    #[error("{file}: unsupported feature file version {found}")]
    BadVersion { file: PathBuf, found: u32 },
    #[error("{file}: dimension mismatch, expected {expected} found {found}")]
    DimensionMismatch {
        file: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{file}: frame count mismatch, expected {expected} rows found {found}")]
    FrameCountMismatch {
        file: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{file}: file truncated, expected {expected} bytes found {found}")]
    ShortFile {
        file: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("duplicate video id {0}")]
    DuplicateVideo(String),
    #[error("query {query}: unknown video {video}")]
    UnknownVideo { query: String, video: String },
    #[error("invalid moment: {0}")]
    InvalidMoment(String),
    #[error("invalid video {video}: {reason}")]
    InvalidVideo { video: String, reason: String },
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

/// Inclusive frame span `[st, ed]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub st: usize,
    pub ed: usize,
}

impl Span {
    pub fn new(st: usize, ed: usize) -> Self {
        Self { st, ed }
    }

    pub fn len(&self) -> usize {
        self.ed + 1 - self.st
    }

    pub fn is_empty(&self) -> bool {
        self.ed < self.st
    }
}

/// Temporal IoU of two inclusive spans, measured on half-open
/// intervals `[st, ed + 1)` so single-frame spans have length one.
pub fn temporal_iou(a: Span, b: Span) -> Result<f64, CorpusError> {
    for s in [a, b] {
        if s.ed < s.st {
            return Err(CorpusError::InvalidMoment(format!(
                "inverted span [{}, {}]",
                s.st, s.ed
            )));
        }
    }
    let (a0, a1) = (a.st as f64, (a.ed + 1) as f64);
    let (b0, b1) = (b.st as f64, (b.ed + 1) as f64);
    let inter = (a1.min(b1) - a0.max(b0)).max(0.0);
    let union = (a1 - a0) + (b1 - b0) - inter;
    Ok(inter / union)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Moment {
    pub video_id: String,
    pub st_frame: usize,
    pub ed_frame: usize,
}

impl Moment {
    pub fn span(&self) -> Span {
        Span::new(self.st_frame, self.ed_frame)
    }
}

/// One frame viewed out of a [`Video`].
#[derive(Clone, Copy, Debug)]
pub struct Frame<'a> {
    pub image_feature: &'a [f32],
    pub subtitle_feature: &'a [f32],
    pub has_subtitle: bool,
}

/// A video as per-frame image and subtitle features. Frames without a
/// subtitle carry a zero subtitle row and `has_subtitle = false`.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub video_id: String,
    pub frame_duration_s: f64,
    pub image_features: Tensor<f32>,
    pub subtitle_features: Tensor<f32>,
    pub has_subtitle: Vec<bool>,
}

impl Video {
    pub fn new(
        video_id: impl Into<String>,
        frame_duration_s: f64,
        image_features: Tensor<f32>,
        subtitle_features: Tensor<f32>,
        has_subtitle: Vec<bool>,
    ) -> Result<Self, CorpusError> {
        let video_id = video_id.into();
        let invalid = |reason: String| CorpusError::InvalidVideo {
            video: video_id.clone(),
            reason,
        };
        let n = image_features.shape().first().copied().unwrap_or(0);
        if image_features.rank() != 2 || subtitle_features.rank() != 2 {
            return Err(invalid("features must be matrices".into()));
        }
        if n == 0 {
            return Err(invalid("video has no frames".into()));
        }
        if subtitle_features.shape()[0] != n || has_subtitle.len() != n {
            return Err(invalid(format!(
                "{n} image rows but {} subtitle rows and {} mask bits",
                subtitle_features.shape()[0],
                has_subtitle.len()
            )));
        }
        if !(frame_duration_s > 0.0) {
            return Err(invalid(format!("frame duration {frame_duration_s} must be positive")));
        }
        let mut subtitle_features = subtitle_features;
        let d_sub = subtitle_features.cols();
        for (j, &has) in has_subtitle.iter().enumerate() {
            if !has {
                subtitle_features.data_mut()[j * d_sub..(j + 1) * d_sub].fill(0.0);
            }
        }
        Ok(Self {
            video_id,
            frame_duration_s,
            image_features,
            subtitle_features,
            has_subtitle,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.has_subtitle.len()
    }

    pub fn frame(&self, j: usize) -> Frame<'_> {
        Frame {
            image_feature: self.image_features.row(j),
            subtitle_feature: self.subtitle_features.row(j),
            has_subtitle: self.has_subtitle[j],
        }
    }

    pub fn d_img(&self) -> usize {
        self.image_features.cols()
    }

    pub fn d_sub(&self) -> usize {
        self.subtitle_features.cols()
    }

    /// Seconds covered by frames `[st, ed]`.
    pub fn span_seconds(&self, span: Span) -> (f64, f64) {
        (
            span.st as f64 * self.frame_duration_s,
            (span.ed + 1) as f64 * self.frame_duration_s,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub query_id: String,
    pub word_features: Tensor<f32>,
    pub ground_truth: Option<Moment>,
}

impl Query {
    pub fn n_words(&self) -> usize {
        self.word_features.shape().first().copied().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub d_img: usize,
    pub d_sub: usize,
    pub d_word: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub video_id: String,
    pub n_frames: usize,
    pub frame_duration_s: f64,
    pub image_features: PathBuf,
    pub subtitle_features: PathBuf,
    #[serde(default)]
    pub missing_subtitles: Vec<usize>,
}

/// On-disk description of a corpus. Paths are relative to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub version: u32,
    pub dims: FeatureDims,
    #[serde(default)]
    pub seed: Option<u64>,
    pub videos: Vec<VideoEntry>,
    /// Query split name to JSON-lines file.
    pub query_files: BTreeMap<String, PathBuf>,
}

/// A loaded corpus: videos plus named query splits (e.g. `train`, `eval`).
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub dims: FeatureDims,
    pub seed: Option<u64>,
    pub videos: Vec<Video>,
    pub queries: BTreeMap<String, Vec<Query>>,
}

impl Corpus {
    pub fn video_index(&self, video_id: &str) -> Option<usize> {
        self.videos.iter().position(|v| v.video_id == video_id)
    }

    pub fn split(&self, name: &str) -> &[Query] {
        self.queries.get(name).map_or(&[], Vec::as_slice)
    }

    /// Check ids, dims and ground-truth bounds.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut ids = std::collections::HashMap::new();
        for (i, v) in self.videos.iter().enumerate() {
            if ids.insert(v.video_id.as_str(), i).is_some() {
                return Err(CorpusError::DuplicateVideo(v.video_id.clone()));
            }
            if v.d_img() != self.dims.d_img {
                return Err(CorpusError::DimensionMismatch {
                    file: PathBuf::from(&v.video_id),
                    expected: self.dims.d_img,
                    found: v.d_img(),
                });
            }
            if v.d_sub() != self.dims.d_sub {
                return Err(CorpusError::DimensionMismatch {
                    file: PathBuf::from(&v.video_id),
                    expected: self.dims.d_sub,
                    found: v.d_sub(),
                });
            }
        }
        for q in self.queries.values().flatten() {
            if q.n_words() == 0 {
                return Err(CorpusError::InvalidMoment(format!("query {} has no words", q.query_id)));
            }
            if q.word_features.cols() != self.dims.d_word {
                return Err(CorpusError::DimensionMismatch {
                    file: PathBuf::from(&q.query_id),
                    expected: self.dims.d_word,
                    found: q.word_features.cols(),
                });
            }
            if let Some(m) = &q.ground_truth {
                let &vi = ids.get(m.video_id.as_str()).ok_or_else(|| CorpusError::UnknownVideo {
                    query: q.query_id.clone(),
                    video: m.video_id.clone(),
                })?;
                if m.st_frame > m.ed_frame || m.ed_frame >= self.videos[vi].n_frames() {
                    return Err(CorpusError::InvalidMoment(format!(
                        "query {}: [{}, {}] outside video {} with {} frames",
                        q.query_id,
                        m.st_frame,
                        m.ed_frame,
                        m.video_id,
                        self.videos[vi].n_frames()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        // [2,5) vs [4,7) as inclusive spans [2,4] and [4,6].
        assert!((temporal_iou(Span::new(2, 4), Span::new(4, 6)).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(temporal_iou(Span::new(3, 7), Span::new(3, 7)).unwrap(), 1.0);
        assert_eq!(temporal_iou(Span::new(0, 1), Span::new(5, 7)).unwrap(), 0.0);
        assert_eq!(temporal_iou(Span::new(4, 4), Span::new(4, 4)).unwrap(), 1.0);
    }

    #[test]
    fn iou_rejects_inverted_span() {
        assert!(matches!(
            temporal_iou(Span { st: 5, ed: 2 }, Span::new(0, 1)),
            Err(CorpusError::InvalidMoment(_))
        ));
    }

    #[test]
    fn missing_subtitle_rows_are_zeroed() {
        let img = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let sub = Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let v = Video::new("v", 1.0, img, sub, vec![true, false]).unwrap();
        assert_eq!(v.frame(1).subtitle_feature, &[0.0, 0.0]);
        assert!(!v.frame(1).has_subtitle);
        assert_eq!(v.span_seconds(Span::new(0, 1)), (0.0, 2.0));
    }

    #[test]
    fn empty_video_is_rejected() {
        let e = Tensor::<f32>::zeros(&[0, 2]);
        assert!(Video::new("v", 1.0, e.clone(), e, vec![]).is_err());
    }
}

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, CorpusManifest, Moment, Query, Video, VideoEntry};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"MNTF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

fn io_err(file: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        file: file.to_path_buf(),
        source,
    }
}

/// Encode a `rows×dim` matrix in the MNTF layout: magic, u32 version,
/// u32 rows, u32 dim, then little-endian f32 rows.
pub fn encode_features(features: &Tensor<f32>) -> Vec<u8> {
    let (rows, dim) = (features.shape()[0], features.cols());
    let mut buf = Vec::with_capacity(HEADER_LEN + features.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn write_features(path: &Path, features: &Tensor<f32>) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, encode_features(features)).map_err(io_err(path))
}

/// Read an MNTF file, checking it against the expected row count and
/// dimension when given.
pub fn read_features(
    path: &Path,
    expected_rows: Option<usize>,
    expected_dim: Option<usize>,
) -> Result<Tensor<f32>, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(path, &bytes, expected_rows, expected_dim)
}

fn decode_features(
    path: &Path,
    bytes: &[u8],
    expected_rows: Option<usize>,
    expected_dim: Option<usize>,
) -> Result<Tensor<f32>, CorpusError> {
    let file = path.to_path_buf();
    if bytes.len() < HEADER_LEN {
        return Err(CorpusError::ShortFile {
            file,
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != FEATURE_MAGIC {
        return Err(CorpusError::BadMagic { file, found: magic });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(CorpusError::BadVersion { file, found: version });
    }
    let rows = word(8) as usize;
    let dim = word(12) as usize;
    if let Some(d) = expected_dim {
        if d != dim {
            return Err(CorpusError::DimensionMismatch {
                file,
                expected: d,
                found: dim,
            });
        }
    }
    let payload = &bytes[HEADER_LEN..];
    let row_bytes = dim * 4;
    if payload.len() != rows * row_bytes {
        // Whole rows missing or extra: report as a row count problem.
        if row_bytes > 0 && payload.len() % row_bytes == 0 {
            return Err(CorpusError::FrameCountMismatch {
                file,
                expected: rows,
                found: payload.len() / row_bytes,
            });
        }
        return Err(CorpusError::ShortFile {
            file,
            expected: HEADER_LEN + rows * row_bytes,
            found: bytes.len(),
        });
    }
    if let Some(r) = expected_rows {
        if r != rows {
            return Err(CorpusError::FrameCountMismatch {
                file,
                expected: r,
                found: rows,
            });
        }
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(&[rows, dim], data).expect("rows*dim floats"))
}

/// One line of a query file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub query_id: String,
    pub video_id: Option<String>,
    pub st_frame: Option<usize>,
    pub ed_frame: Option<usize>,
    pub feature_file: PathBuf,
}

fn write_json_file<S: Serialize>(path: &Path, value: &S) -> Result<(), CorpusError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CorpusError::Json {
        file: path.to_path_buf(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Write `corpus` under `dir` and return the manifest path.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<PathBuf, CorpusError> {
    corpus.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut videos = Vec::with_capacity(corpus.videos.len());
    for v in &corpus.videos {
        let img = PathBuf::from("features").join(format!("{}.img.mntf", v.video_id));
        let sub = PathBuf::from("features").join(format!("{}.sub.mntf", v.video_id));
        write_features(&dir.join(&img), &v.image_features)?;
        write_features(&dir.join(&sub), &v.subtitle_features)?;
        videos.push(VideoEntry {
            video_id: v.video_id.clone(),
            n_frames: v.n_frames(),
            frame_duration_s: v.frame_duration_s,
            image_features: img,
            subtitle_features: sub,
            missing_subtitles: (0..v.n_frames()).filter(|&j| !v.has_subtitle[j]).collect(),
        });
    }
    let mut query_files = BTreeMap::new();
    for (split, queries) in &corpus.queries {
        let rel = PathBuf::from("queries").join(format!("{split}.jsonl"));
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().expect("parent")).map_err(io_err(dir))?;
        let mut out = Vec::new();
        for q in queries {
            let feat = PathBuf::from("queries").join(split).join(format!("{}.mntf", q.query_id));
            write_features(&dir.join(&feat), &q.word_features)?;
            let rec = QueryRecord {
                query_id: q.query_id.clone(),
                video_id: q.ground_truth.as_ref().map(|m| m.video_id.clone()),
                st_frame: q.ground_truth.as_ref().map(|m| m.st_frame),
                ed_frame: q.ground_truth.as_ref().map(|m| m.ed_frame),
                feature_file: feat,
            };
            serde_json::to_writer(&mut out, &rec).expect("serializable record");
            out.push(b'\n');
        }
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(io_err(&path))?;
        query_files.insert(split.clone(), rel);
    }
    let manifest = CorpusManifest {
        version: 1,
        dims: corpus.dims,
        seed: corpus.seed,
        videos,
        query_files,
    };
    let path = dir.join("manifest.json");
    write_json_file(&path, &manifest)?;
    Ok(path)
}

/// Load a corpus from its manifest, validating every file against it.
pub fn load_corpus(manifest_path: &Path) -> Result<(CorpusManifest, Corpus), CorpusError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|e| CorpusError::Json {
        file: manifest_path.to_path_buf(),
        message: e.to_string(),
    })?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let dims = manifest.dims;
    let mut seen = HashMap::new();
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        if seen.insert(entry.video_id.clone(), ()).is_some() {
            return Err(CorpusError::DuplicateVideo(entry.video_id.clone()));
        }
        let img = read_features(&root.join(&entry.image_features), Some(entry.n_frames), Some(dims.d_img))?;
        let sub = read_features(
            &root.join(&entry.subtitle_features),
            Some(entry.n_frames),
            Some(dims.d_sub),
        )?;
        let mut has_subtitle = vec![true; entry.n_frames];
        for &j in &entry.missing_subtitles {
            let slot = has_subtitle.get_mut(j).ok_or_else(|| CorpusError::InvalidVideo {
                video: entry.video_id.clone(),
                reason: format!("missing subtitle index {j} out of range"),
            })?;
            *slot = false;
        }
        videos.push(Video::new(
            entry.video_id.clone(),
            entry.frame_duration_s,
            img,
            sub,
            has_subtitle,
        )?);
    }
    let mut queries = BTreeMap::new();
    for (split, rel) in &manifest.query_files {
        let path = root.join(rel);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut list = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: QueryRecord = serde_json::from_str(line).map_err(|e| CorpusError::Json {
                file: path.clone(),
                message: format!("line {}: {e}", lineno + 1),
            })?;
            let words = read_features(&root.join(&rec.feature_file), None, Some(dims.d_word))?;
            let ground_truth = match (rec.video_id, rec.st_frame, rec.ed_frame) {
                (Some(video_id), Some(st_frame), Some(ed_frame)) => Some(Moment {
                    video_id,
                    st_frame,
                    ed_frame,
                }),
                (None, None, None) => None,
                _ => {
                    return Err(CorpusError::InvalidMoment(format!(
                        "query {}: partial ground truth",
                        rec.query_id
                    )))
                }
            };
            list.push(Query {
                query_id: rec.query_id,
                word_features: words,
                ground_truth,
            });
        }
        queries.insert(split.clone(), list);
    }
    let corpus = Corpus {
        dims,
        seed: manifest.seed,
        videos,
        queries,
    };
    corpus.validate()?;
    Ok((manifest, corpus))
}

//! Configuration, artifact layout, run manifests and the staged pipeline.

pub mod config;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{generate_synthetic_corpus, load_corpus, save_corpus, Corpus, FeatureDims, Query};
use crate::evaluation::{
    self, bias_profile, evaluate, group_predictions, BiasProfile, EvalReport, GroundTruth, ModeBias, Predictions,
    RankListRecord,
};
use crate::index::{build_index, top_k_mips, VectorIndex};
use crate::localizer::{train_localizer, FrameLogits, LocalizerArch, LocalizerParams};
use crate::numerics::{write_atomic, Checkpoint, Module};
use crate::ranking::{
    prediction_records, rank_from_logits, retrieve_and_localize, InferenceConfig, PredictionRecord, ScoringMode,
};
use crate::retriever::{
    encode_query_modular, query_words, train_retriever, EpochLog, ModelConfig, RetrieverParams, VideoFeatures,
};

pub use config::{BiasConfig, CorpusSource, Profile, RunConfig};

pub const TRAIN_SPLIT: &str = "train";
pub const EVAL_SPLIT: &str = "eval";
pub const THREADS_ENV: &str = "MINUTE_NUM_THREADS";

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("stage {stage} needs {artifact}, which does not exist; run the earlier stages first")]
    MissingInput { stage: &'static str, artifact: PathBuf },
    #[error("{0} already holds a run with a different config; use a fresh --out-dir")]
    ConfigMismatch(PathBuf),
    #[error("{THREADS_ENV}: {0}")]
    Threads(String),
}

impl DriverError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DriverError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    TrainRetriever,
    BuildIndex,
    TrainLocalizer,
    Infer,
    Eval,
    BiasReport,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::TrainRetriever,
        Stage::BuildIndex,
        Stage::TrainLocalizer,
        Stage::Infer,
        Stage::Eval,
        Stage::BiasReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainRetriever => "train-retriever",
            Stage::BuildIndex => "build-index",
            Stage::TrainLocalizer => "train-localizer",
            Stage::Infer => "infer",
            Stage::Eval => "eval",
            Stage::BiasReport => "bias-report",
        }
    }
}

/// Paths of every artifact under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn generated_corpus(&self) -> PathBuf {
        self.corpus_dir().join("manifest.json")
    }
    pub fn retriever(&self) -> PathBuf {
        self.root.join("retriever.ckpt")
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("index.bin")
    }
    pub fn localizer(&self) -> PathBuf {
        self.root.join("localizer.ckpt")
    }
    pub fn predictions(&self, mode: ScoringMode) -> PathBuf {
        self.root.join("predictions").join(format!("{}.jsonl", mode.name()))
    }
    pub fn retrieval(&self) -> PathBuf {
        self.root.join("predictions").join("retrieval.jsonl")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn bias(&self) -> PathBuf {
        self.root.join("bias.json")
    }
    pub fn bias_csv(&self) -> PathBuf {
        self.root.join("bias.csv")
    }

    /// Files a stage writes. Empty for `gen-data` when the corpus is external.
    pub fn outputs(&self, stage: Stage, cfg: &RunConfig) -> Vec<PathBuf> {
        match stage {
            Stage::GenData => match cfg.corpus {
                CorpusSource::Synthetic(_) => vec![self.generated_corpus()],
                CorpusSource::Manifest(_) => vec![],
            },
            Stage::TrainRetriever => vec![self.retriever()],
            Stage::BuildIndex => vec![self.index()],
            Stage::TrainLocalizer => vec![self.localizer()],
            Stage::Infer => {
                let mut v: Vec<PathBuf> = ScoringMode::ALL.iter().map(|&m| self.predictions(m)).collect();
                v.push(self.retrieval());
                v
            }
            Stage::Eval => vec![self.metrics(), self.metrics_csv()],
            Stage::BiasReport => vec![self.bias(), self.bias_csv()],
        }
    }

    pub fn corpus_manifest(&self, cfg: &RunConfig) -> PathBuf {
        match &cfg.corpus {
            CorpusSource::Synthetic(_) => self.generated_corpus(),
            CorpusSource::Manifest(p) => p.clone(),
        }
    }
}

/// Footer stored with each model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    pub kind: String,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<LocalizerArch>,
    pub dims: FeatureDims,
    pub seed: u64,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    /// Relative to the output directory when inside it.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
    /// False when the stage's artifacts were reused from an earlier run.
    pub ran: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub eval: BTreeMap<String, EvalReport>,
    pub bias: BiasReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub corpus: ArtifactRecord,
    pub checkpoints: BTreeMap<String, ArtifactRecord>,
    pub index: ArtifactRecord,
    pub predictions: BTreeMap<String, ArtifactRecord>,
    pub other_artifacts: BTreeMap<String, ArtifactRecord>,
    pub metrics: RunMetrics,
    pub timings: Vec<StageTiming>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub vcmr_r1: f64,
    pub rank_fractions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub profile: BiasProfile,
    /// Baseline mode at the largest swept K for each configured α.
    pub alpha_sweep: Vec<AlphaPoint>,
}

impl BiasReport {
    pub fn to_csv(&self) -> String {
        let mut out = self.profile.to_csv();
        for p in &self.alpha_sweep {
            out.push_str(&format!("baseline_exp,alpha_vcmr_r1,{},{}\n", p.alpha, p.vcmr_r1));
            out.push_str(&format!(
                "baseline_exp,alpha_top2_fraction,{},{}\n",
                p.alpha,
                p.rank_fractions.iter().take(2).sum::<f64>()
            ));
        }
        out
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read(path: &Path) -> Result<Vec<u8>, DriverError> {
    fs::read(path).map_err(|e| DriverError::io(path, e))
}

fn rel_path(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

/// Hash a file, or every file below a directory in sorted path order.
pub fn hash_artifact(root: &Path, path: &Path) -> Result<ArtifactRecord, DriverError> {
    let meta = fs::metadata(path).map_err(|e| DriverError::io(path, e))?;
    if meta.is_file() {
        let bytes = read(path)?;
        return Ok(ArtifactRecord {
            path: rel_path(root, path),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| DriverError::io(&dir, e))? {
            let p = entry.map_err(|e| DriverError::io(&dir, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    let mut total = 0u64;
    for f in &files {
        let bytes = read(f)?;
        hasher.update(rel_path(path, f).as_bytes());
        hasher.update([0]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        total += bytes.len() as u64;
    }
    Ok(ArtifactRecord {
        path: rel_path(root, path),
        sha256: hex::encode(hasher.finalize()),
        bytes: total,
    })
}

/// Worker threads: `MINUTE_NUM_THREADS` capped by the available parallelism.
pub fn worker_threads() -> Result<usize, DriverError> {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n.min(available)),
            _ => Err(DriverError::Threads(format!("expected a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(available),
    }
}

/// Map `f` over `items` on up to `threads` scoped threads, keeping order.
pub fn parallel_map<I: Sync, O: Send, E: Send>(
    items: &[I],
    threads: usize,
    f: impl Fn(&I) -> Result<O, E> + Sync,
) -> Result<Vec<O>, E> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let results: Vec<Result<Vec<O>, E>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<O>, E>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn stage_err(stage: Stage) -> impl Fn(String) -> DriverError {
    let name = stage.name();
    move |message| DriverError::Stage { stage: name, message }
}

fn write_text(path: &Path, text: &str) -> Result<(), DriverError> {
    write_atomic(path, text.as_bytes()).map_err(|e| DriverError::Stage {
        stage: "write",
        message: e.to_string(),
    })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), DriverError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_text(path, &text)
}

fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), DriverError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    write_text(path, &text)
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D, DriverError> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| DriverError::Stage {
        stage: "read",
        message: format!("{}: {e}", path.display()),
    })
}

/// Everything a stage may need, loaded lazily from disk.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub layout: Layout,
    pub threads: usize,
    corpus: Option<Corpus>,
}

impl Pipeline {
    /// Prepare `out_dir` for `cfg`. A directory holding a different config is
    /// rejected so artifacts of two configs never mix.
    pub fn new(cfg: RunConfig, out_dir: &Path) -> Result<Self, DriverError> {
        cfg.validate()?;
        fs::create_dir_all(out_dir).map_err(|e| DriverError::io(out_dir, e))?;
        let layout = Layout::new(out_dir);
        let mut echo = cfg.clone();
        echo.out_dir = None;
        let text = echo.to_json();
        let path = layout.config();
        if path.exists() {
            let existing = RunConfig::load(&path)?;
            if existing != echo {
                return Err(DriverError::ConfigMismatch(out_dir.to_path_buf()));
            }
        } else {
            write_text(&path, &text)?;
        }
        Ok(Self {
            cfg: echo,
            layout,
            threads: worker_threads()?,
            corpus: None,
        })
    }

    fn require(&self, stage: Stage, path: &Path) -> Result<(), DriverError> {
        if path.exists() {
            Ok(())
        } else {
            Err(DriverError::MissingInput {
                stage: stage.name(),
                artifact: path.to_path_buf(),
            })
        }
    }

    pub fn corpus(&mut self, stage: Stage) -> Result<&Corpus, DriverError> {
        if self.corpus.is_none() {
            let path = self.layout.corpus_manifest(&self.cfg);
            self.require(stage, &path)?;
            let (_, corpus) = load_corpus(&path).map_err(|e| stage_err(stage)(e.to_string()))?;
            self.corpus = Some(corpus);
        }
        Ok(self.corpus.as_ref().expect("loaded"))
    }

    fn split<'a>(corpus: &'a Corpus, name: &str, stage: Stage) -> Result<&'a [Query], DriverError> {
        if !corpus.queries.contains_key(name) {
            return Err(stage_err(stage)(format!("corpus has no `{name}` query split")));
        }
        Ok(corpus.split(name))
    }

    pub fn load_retriever(&self, stage: Stage) -> Result<(RetrieverParams<f32>, ModelInfo), DriverError> {
        let path = self.layout.retriever();
        self.require(stage, &path)?;
        let err = stage_err(stage);
        let ckpt = Checkpoint::load(&path).map_err(|e| err(e.to_string()))?;
        let info: ModelInfo = ckpt.footer_as().map_err(|e| err(e.to_string()))?;
        let d = info.dims;
        let mut params = RetrieverParams::new(0, &info.model, d.d_img, d.d_sub, d.d_word).map_err(|e| err(e.to_string()))?;
        ckpt.load_into(&mut params).map_err(|e| err(e.to_string()))?;
        Ok((params, info))
    }

    pub fn load_localizer(&self, stage: Stage) -> Result<(LocalizerParams<f32>, ModelInfo), DriverError> {
        let path = self.layout.localizer();
        self.require(stage, &path)?;
        let err = stage_err(stage);
        let ckpt = Checkpoint::load(&path).map_err(|e| err(e.to_string()))?;
        let info: ModelInfo = ckpt.footer_as().map_err(|e| err(e.to_string()))?;
        let d = info.dims;
        let arch = info.arch.clone().ok_or_else(|| err("localizer checkpoint lacks its architecture".into()))?;
        let mut params =
            LocalizerParams::new(0, &info.model, &arch, d.d_img, d.d_sub, d.d_word).map_err(|e| err(e.to_string()))?;
        ckpt.load_into(&mut params).map_err(|e| err(e.to_string()))?;
        Ok((params, info))
    }

    pub fn load_index(&self, stage: Stage) -> Result<VectorIndex, DriverError> {
        let path = self.layout.index();
        self.require(stage, &path)?;
        VectorIndex::load(&path).map_err(|e| stage_err(stage)(e.to_string()))
    }

    fn save_model<M: Module<f32>>(&self, path: &Path, model: &M, info: &ModelInfo, stage: Stage) -> Result<(), DriverError> {
        let err = stage_err(stage);
        let ckpt = Checkpoint::from_module(model, info)
            .map_err(|e| err(e.to_string()))?;
        ckpt.save(path).map_err(|e| err(e.to_string()))
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<(), DriverError> {
        info!("stage {}", stage.name());
        match stage {
            Stage::GenData => self.gen_data(),
            Stage::TrainRetriever => self.train_retriever(),
            Stage::BuildIndex => self.build_index(),
            Stage::TrainLocalizer => self.train_localizer(),
            Stage::Infer => self.infer(),
            Stage::Eval => self.eval(),
            Stage::BiasReport => self.bias_report(),
        }
    }

    fn gen_data(&mut self) -> Result<(), DriverError> {
        let CorpusSource::Synthetic(syn) = &self.cfg.corpus else {
            return Ok(());
        };
        let err = stage_err(Stage::GenData);
        let out = generate_synthetic_corpus(syn, self.cfg.seed).map_err(|e| err(e.to_string()))?;
        // Write into a scratch directory and rename so a partial corpus is never visible.
        let dir = self.layout.corpus_dir();
        let tmp = self.layout.root.join("corpus.tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| DriverError::io(&tmp, e))?;
        }
        save_corpus(&tmp, &out.corpus).map_err(|e| err(e.to_string()))?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| DriverError::io(&dir, e))?;
        }
        fs::rename(&tmp, &dir).map_err(|e| DriverError::io(&dir, e))?;
        self.corpus = Some(out.corpus);
        Ok(())
    }

    fn train_retriever(&mut self) -> Result<(), DriverError> {
        let stage = Stage::TrainRetriever;
        let (model, training, seed) = (self.cfg.model.clone(), self.cfg.retriever_training.clone(), self.cfg.seed);
        let corpus = self.corpus(stage)?;
        let queries = Self::split(corpus, TRAIN_SPLIT, stage)?;
        let (params, log) =
            train_retriever(corpus, queries, &model, &training, seed).map_err(|e| stage_err(stage)(e.to_string()))?;
        let info = ModelInfo {
            kind: "retriever".into(),
            model,
            arch: None,
            dims: corpus.dims,
            seed,
            log,
        };
        self.save_model(&self.layout.retriever(), &params, &info, stage)
    }

    fn build_index(&mut self) -> Result<(), DriverError> {
        let stage = Stage::BuildIndex;
        let (params, _) = self.load_retriever(stage)?;
        let corpus = self.corpus(stage)?;
        let index = build_index(corpus, &params).map_err(|e| stage_err(stage)(e.to_string()))?;
        index.save(&self.layout.index()).map_err(|e| stage_err(stage)(e.to_string()))
    }

    fn train_localizer(&mut self) -> Result<(), DriverError> {
        let stage = Stage::TrainLocalizer;
        let err = stage_err(stage);
        let (retriever, _) = self.load_retriever(stage)?;
        let index = self.load_index(stage)?;
        let (model, arch, training, seed, threads) = (
            self.cfg.model.clone(),
            self.cfg.localizer_arch.clone(),
            self.cfg.localizer_training.clone(),
            self.cfg.seed,
            self.threads,
        );
        let corpus = self.corpus(stage)?;
        let queries = Self::split(corpus, TRAIN_SPLIT, stage)?;
        let pool = training.negative_pool.max(1);
        let rank_lists = parallel_map(queries, threads, |q| {
            let qe = encode_query_modular(&query_words::<f32>(q), &retriever).map_err(|e| e.to_string())?;
            let top = top_k_mips(&qe, &index, pool).map_err(|e| e.to_string())?;
            Ok::<_, String>(top.into_iter().map(|r| r.entry).collect::<Vec<usize>>())
        })
        .map_err(&err)?;
        let (params, log) = train_localizer(corpus, queries, &rank_lists, &model, &arch, &training, seed)
            .map_err(|e| err(e.to_string()))?;
        let info = ModelInfo {
            kind: "localizer".into(),
            model,
            arch: Some(arch),
            dims: corpus.dims,
            seed,
            log,
        };
        self.save_model(&self.layout.localizer(), &params, &info, stage)
    }

    /// Retrieve and localize every eval query once with `k` videos.
    fn localize_eval(&mut self, stage: Stage, k: usize) -> Result<Vec<LocalizedQuery>, DriverError> {
        let (retriever, _) = self.load_retriever(stage)?;
        let (localizer, _) = self.load_localizer(stage)?;
        let index = self.load_index(stage)?;
        let threads = self.threads;
        let corpus = self.corpus(stage)?;
        let queries = Self::split(corpus, EVAL_SPLIT, stage)?;
        let features: HashMap<String, VideoFeatures<f32>> = corpus
            .videos
            .iter()
            .map(|v| (v.video_id.clone(), VideoFeatures::from_video(v)))
            .collect();
        parallel_map(queries, threads, |q| {
            let (retrieved, logits) =
                retrieve_and_localize(&q.query_id, &query_words(q), &index, &features, &retriever, &localizer, k)?;
            Ok(LocalizedQuery {
                query_id: q.query_id.clone(),
                retrieved: retrieved.into_iter().map(|r| (r.video_id, r.score)).collect(),
                logits,
            })
        })
        .map_err(|e: crate::ranking::RankingError| stage_err(stage)(e.to_string()))
    }

    fn infer(&mut self) -> Result<(), DriverError> {
        let stage = Stage::Infer;
        let inf = self.cfg.inference.clone();
        let localized = self.localize_eval(stage, inf.top_k)?;
        for mode in ScoringMode::ALL {
            let mut rows = Vec::new();
            for lq in &localized {
                rows.extend(lq.predictions(inf.top_k, mode, &inf));
            }
            let path = self.layout.predictions(mode);
            fs::create_dir_all(path.parent().expect("parent")).map_err(|e| DriverError::io(&path, e))?;
            write_jsonl(&path, &rows)?;
        }
        let lists: Vec<RankListRecord> = localized
            .iter()
            .map(|lq| RankListRecord {
                query_id: lq.query_id.clone(),
                video_ids: lq.retrieved.iter().map(|(v, _)| v.clone()).collect(),
                scores: lq.retrieved.iter().map(|&(_, s)| s).collect(),
            })
            .collect();
        write_jsonl(&self.layout.retrieval(), &lists)
    }

    fn ground_truth(&mut self, stage: Stage) -> Result<GroundTruth, DriverError> {
        let corpus = self.corpus(stage)?;
        Ok(evaluation::ground_truth_of(Self::split(corpus, EVAL_SPLIT, stage)?))
    }

    fn eval(&mut self) -> Result<(), DriverError> {
        let stage = Stage::Eval;
        let err = stage_err(stage);
        let gt = self.ground_truth(stage)?;
        self.require(stage, &self.layout.retrieval())?;
        let lists = evaluation::read_rank_lists(&self.layout.retrieval()).map_err(|e| err(e.to_string()))?;
        let echo = serde_json::json!({
            "inference": self.cfg.inference,
            "evaluation": self.cfg.evaluation,
        });
        let mut reports = BTreeMap::new();
        let mut csv = String::from("scoring_mode,task,k,iou,value\n");
        for mode in ScoringMode::ALL {
            let path = self.layout.predictions(mode);
            self.require(stage, &path)?;
            let preds = evaluation::read_predictions(&path).map_err(|e| err(e.to_string()))?;
            let report =
                evaluate(&preds, Some(&lists), &gt, &self.cfg.evaluation, echo.clone()).map_err(|e| err(e.to_string()))?;
            for line in report.to_csv().lines().skip(1) {
                csv.push_str(&format!("{},{line}\n", mode.name()));
            }
            reports.insert(mode.name().to_string(), report);
        }
        write_json(&self.layout.metrics(), &reports)?;
        write_text(&self.layout.metrics_csv(), &csv)
    }

    fn bias_report(&mut self) -> Result<(), DriverError> {
        let stage = Stage::BiasReport;
        let err = stage_err(stage);
        let bias = self.cfg.bias.clone();
        let inf = self.cfg.inference.clone();
        let strict = self.cfg.evaluation.strict_iou;
        let k_max = *bias.ks.iter().max().expect("validated non-empty");
        let gt = self.ground_truth(stage)?;
        let localized = self.localize_eval(stage, k_max)?;
        let top1 = |k: usize, mode: ScoringMode, cfg: &InferenceConfig| -> Predictions {
            group_predictions(localized.iter().flat_map(|lq| lq.predictions(k, mode, cfg).into_iter().take(1)))
        };
        let mut modes: Vec<ModeBias> = Vec::new();
        for mode in ScoringMode::ALL {
            let sweep: Vec<(usize, Predictions)> = bias.ks.iter().map(|&k| (k, top1(k, mode, &inf))).collect();
            modes.push(bias_profile(mode.name(), &sweep, &gt, bias.iou, strict).map_err(|e| err(e.to_string()))?);
        }
        let mut alpha_sweep = Vec::new();
        for &alpha in &bias.alpha_sweep {
            let cfg = InferenceConfig {
                baseline_alpha: alpha,
                ..inf.clone()
            };
            let preds = top1(k_max, ScoringMode::BaselineExp, &cfg);
            let mb = bias_profile("baseline_exp", &[(k_max, preds)], &gt, bias.iou, strict)
                .map_err(|e| err(e.to_string()))?;
            alpha_sweep.push(AlphaPoint {
                alpha,
                vcmr_r1: mb.recall_at(k_max).unwrap_or(0.0),
                rank_fractions: mb.rank_fractions,
            });
        }
        let report = BiasReport {
            profile: BiasProfile {
                iou: bias.iou,
                strict_iou: strict,
                modes,
            },
            alpha_sweep,
        };
        write_json(&self.layout.bias(), &report)?;
        write_text(&self.layout.bias_csv(), &report.to_csv())
    }

    fn stage_complete(&self, stage: Stage, previous: Option<&RunManifest>) -> Result<bool, DriverError> {
        for path in self.layout.outputs(stage, &self.cfg) {
            if !path.exists() {
                return Ok(false);
            }
            // A file that no longer matches the previous manifest is stale.
            if let Some(m) = previous {
                let rel = rel_path(&self.layout.root, &path);
                let recorded = m.all_artifacts().into_iter().find(|a| a.path == rel);
                if let Some(a) = recorded {
                    if hash_artifact(&self.layout.root, &path)?.sha256 != a.sha256 {
                        return Ok(false);
                    }
                }
            }
        }
        Ok(true)
    }

    /// Run every stage, reusing the artifacts of stages before the earliest
    /// one whose outputs are missing or stale, and write the manifest.
    pub fn run_all(&mut self) -> Result<RunManifest, DriverError> {
        let start = Instant::now();
        let previous: Option<RunManifest> = if self.layout.manifest().exists() {
            read_json(&self.layout.manifest()).ok()
        } else {
            None
        };
        let mut resume_from = Stage::ALL.len();
        for (i, &stage) in Stage::ALL.iter().enumerate() {
            if !self.stage_complete(stage, previous.as_ref())? {
                resume_from = i;
                break;
            }
        }
        let mut timings = Vec::new();
        for (i, &stage) in Stage::ALL.iter().enumerate() {
            let t = Instant::now();
            let ran = i >= resume_from;
            if ran {
                self.run_stage(stage)?;
            } else {
                info!("stage {}: reusing existing artifacts", stage.name());
            }
            timings.push(StageTiming {
                stage: stage.name().to_string(),
                seconds: t.elapsed().as_secs_f64(),
                ran,
            });
        }
        let manifest = self.manifest(timings, start.elapsed().as_secs_f64())?;
        write_json(&self.layout.manifest(), &manifest)?;
        Ok(manifest)
    }

    fn manifest(&self, timings: Vec<StageTiming>, total_seconds: f64) -> Result<RunManifest, DriverError> {
        let root = &self.layout.root;
        let h = |p: &Path| hash_artifact(root, p);
        let corpus_path = match &self.cfg.corpus {
            CorpusSource::Synthetic(_) => self.layout.corpus_dir(),
            CorpusSource::Manifest(p) => p.clone(),
        };
        let mut checkpoints = BTreeMap::new();
        checkpoints.insert("retriever".to_string(), h(&self.layout.retriever())?);
        checkpoints.insert("localizer".to_string(), h(&self.layout.localizer())?);
        let mut predictions = BTreeMap::new();
        for mode in ScoringMode::ALL {
            predictions.insert(mode.name().to_string(), h(&self.layout.predictions(mode))?);
        }
        let mut other = BTreeMap::new();
        for (name, p) in [
            ("retrieval", self.layout.retrieval()),
            ("metrics", self.layout.metrics()),
            ("metrics_csv", self.layout.metrics_csv()),
            ("bias", self.layout.bias()),
            ("bias_csv", self.layout.bias_csv()),
        ] {
            other.insert(name.to_string(), h(&p)?);
        }
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            corpus: h(&corpus_path)?,
            checkpoints,
            index: h(&self.layout.index())?,
            predictions,
            other_artifacts: other,
            metrics: RunMetrics {
                eval: read_json(&self.layout.metrics())?,
                bias: read_json(&self.layout.bias())?,
            },
            timings,
            total_seconds,
        })
    }
}

impl RunManifest {
    pub fn all_artifacts(&self) -> Vec<&ArtifactRecord> {
        let mut v = vec![&self.corpus, &self.index];
        v.extend(self.checkpoints.values());
        v.extend(self.predictions.values());
        v.extend(self.other_artifacts.values());
        v
    }
}

/// Retrieval and localization output of one query.
#[derive(Clone, Debug)]
pub struct LocalizedQuery {
    pub query_id: String,
    /// (video id, retrieval score), best first.
    pub retrieved: Vec<(String, f64)>,
    pub logits: Vec<FrameLogits>,
}

impl LocalizedQuery {
    /// Ranked predictions using only the first `k` retrieved videos.
    pub fn predictions(&self, k: usize, mode: ScoringMode, cfg: &InferenceConfig) -> Vec<PredictionRecord> {
        let retrieved: Vec<crate::index::Retrieved> = self
            .retrieved
            .iter()
            .enumerate()
            .map(|(entry, (video_id, score))| crate::index::Retrieved {
                entry,
                video_id: video_id.clone(),
                score: *score,
            })
            .collect();
        prediction_records(&self.query_id, &rank_from_logits(&retrieved, &self.logits, k, mode, cfg))
    }
}

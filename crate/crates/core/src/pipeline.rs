//! File-based workflow: run configuration, work-directory layout and the
//! stages behind each CLI subcommand.
//!
//! Work directory layout:
//!
//! ```text
//! <workdir>/corpus/manifest.json        raw corpus (default location)
//! <workdir>/features/manifest.json      per-session feature matrices
//! <workdir>/features/<source>/<id>.mmst
//! <workdir>/cart/                       VQ-VAE checkpoint
//! <workdir>/models/<kind>/fold<k>/      one checkpoint per held-out fold
//! <workdir>/reports/<kind>.json         cross-validation report
//! <workdir>/grid/<kind>.json            grid-search leaderboard
//! <workdir>/predictions/<kind>.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{cart_representation, load_cart, save_cart, train_cart, CartConfig, CartModel};
use crate::coordination::{delayed_correlation, vectorize_coordination, ChannelSeries, DelayGrid};
use crate::error::{Error, Result};
use crate::eval::{
    self, cross_validate, grid_search, make_folds, CnnTrainer, CvReport, FoldAssignment, GridResult, GridSettings,
    GridSpace, SessionKey, Trainer, TrainedCnn, NUM_FOLDS,
};
use crate::manifest::{load_manifest, Manifest, ManifestEntry, Session};
use crate::models::{self, load_checkpoint_for, save_checkpoint, BranchConfig, ConvLayerConfig, ModelKind, TrainConfig};
use crate::nn::{softmax, PoolMode};
use crate::session::{segment_series, FeatureSession, Source};
use crate::symptom::{SymptomVector, NUM_CLASSES, NUM_SYMPTOMS};
use crate::synth::{self, SynthConfig};
use crate::tensor::{read_tensor, write_tensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Raw corpus manifest; relative paths resolve against the work directory.
    pub corpus: PathBuf,
    pub workdir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: PathBuf::from("corpus/manifest.json"),
            workdir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureParams {
    pub delays: DelayGrid,
    pub fvtc_channels: usize,
    pub fauc_channels: usize,
    pub seg_seconds: f64,
    pub tv_rate_hz: f64,
    pub fau_rate_hz: f64,
    pub w2v_dim: usize,
    pub wavlm_dim: usize,
    pub bert_dim: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        let s = SynthConfig::default();
        FeatureParams {
            delays: DelayGrid::default(),
            fvtc_channels: s.tv_channels,
            fauc_channels: s.fau_channels,
            seg_seconds: s.seg_seconds,
            tv_rate_hz: s.tv_rate_hz,
            fau_rate_hz: s.fau_rate_hz,
            w2v_dim: s.w2v_dim,
            wavlm_dim: s.wavlm_dim,
            bert_dim: s.bert_dim,
        }
    }
}

impl FeatureParams {
    fn embedding_dim(&self, source: Source) -> Option<usize> {
        match source {
            Source::W2v => Some(self.w2v_dim),
            Source::Wavlm => Some(self.wavlm_dim),
            Source::Bert => Some(self.bert_dim),
            _ => None,
        }
    }
}

/// Branch layout shared by every source, plus fusion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub conv_layers: Vec<ConvLayerConfig>,
    pub pool: PoolMode,
    pub pool_kernel: usize,
    pub latent_dim: usize,
    /// Hidden widths of the fusion head.
    pub fusion_head: Vec<usize>,
    /// Start fusion branches from the matching unimodal checkpoints of the same fold.
    pub init_from_unimodal: bool,
}

impl Default for ModelParams {
    fn default() -> Self {
        let b = BranchConfig::default_for(Source::Fvtc);
        ModelParams {
            conv_layers: b.conv_layers,
            pool: b.pool,
            pool_kernel: b.pool_kernel,
            latent_dim: b.latent_dim,
            fusion_head: vec![128, 64],
            init_from_unimodal: false,
        }
    }
}

impl ModelParams {
    pub fn branch_template(&self) -> BranchConfig {
        BranchConfig {
            source: Source::Fvtc,
            conv_layers: self.conv_layers.clone(),
            pool: self.pool,
            pool_kernel: self.pool_kernel,
            latent_dim: self.latent_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    pub k: usize,
    pub grid: GridSpace,
    /// Fold kept out of the grid search entirely.
    pub grid_test_fold: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            k: NUM_FOLDS,
            grid: GridSpace::default(),
            grid_test_fold: 0,
        }
    }
}

/// Everything a run needs. The top-level `seed` overrides the seeds of the
/// nested sections when the configuration is resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub features: FeatureParams,
    pub cart: CartConfig,
    pub model: ModelParams,
    pub train: TrainConfig,
    pub eval: EvalParams,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Copies the top-level seed into every section and validates.
    pub fn resolved(mut self) -> Result<Self> {
        self.synth.seed = self.seed;
        self.cart.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval.k != NUM_FOLDS {
            return Err(Error::Config(format!("only {NUM_FOLDS}-fold evaluation is supported, got k={}", self.eval.k)));
        }
        if self.eval.grid_test_fold >= NUM_FOLDS {
            return Err(Error::Config(format!("grid test fold {} out of range", self.eval.grid_test_fold)));
        }
        if self.features.fvtc_channels < 2 || self.features.fauc_channels < 2 {
            return Err(Error::Config("coordination features need at least 2 channels".into()));
        }
        if self.features.seg_seconds.is_nan() || self.features.seg_seconds <= 0.0 {
            return Err(Error::Config("segment length must be positive".into()));
        }
        DelayGrid::new(self.features.delays.delta, self.features.delays.count)?;
        self.synth.validate()?;
        self.cart.validate()?;
        self.train.validate()?;
        self.model.branch_template().validate()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.paths.workdir)
    }

    pub fn corpus_manifest(&self) -> PathBuf {
        self.workspace().resolve(&self.paths.corpus)
    }
}

/// Paths inside a work directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn features_dir(&self) -> PathBuf {
        self.root.join("features")
    }

    pub fn features_manifest(&self) -> PathBuf {
        self.features_dir().join("manifest.json")
    }

    pub fn cart_dir(&self) -> PathBuf {
        self.root.join("cart")
    }

    pub fn model_dir(&self, kind: ModelKind) -> PathBuf {
        self.root.join("models").join(kind.name())
    }

    pub fn fold_dir(&self, kind: ModelKind, fold: usize) -> PathBuf {
        self.model_dir(kind).join(format!("fold{fold}"))
    }

    pub fn report_path(&self, kind: ModelKind) -> PathBuf {
        self.root.join("reports").join(format!("{}.json", kind.name()))
    }

    pub fn grid_path(&self, kind: ModelKind) -> PathBuf {
        self.root.join("grid").join(format!("{}.json", kind.name()))
    }

    pub fn predictions_path(&self, kind: ModelKind) -> PathBuf {
        self.root.join("predictions").join(format!("{}.json", kind.name()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// featurization

/// Row-stacked coordination vectors, one row per segment.
pub fn coordination_rows(series: &ChannelSeries, seg_seconds: f64, delays: &DelayGrid) -> Result<Array2<f32>> {
    let segments = segment_series(series, seg_seconds)?;
    let rows: Vec<Tensor> = segments
        .iter()
        .map(|seg| Ok(vectorize_coordination(&delayed_correlation(seg, delays)?)))
        .collect::<Result<_>>()?;
    let width = rows[0].len();
    let flat: Vec<f32> = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Array2::from_shape_vec((rows.len(), width), flat).expect("segments share a channel count"))
}

fn load_channels(session: &Session, modality: &str, channels: usize, rate: f64) -> Result<ChannelSeries> {
    let path = session.modality_paths.get(modality).ok_or_else(|| {
        Error::Validation(format!("session {:?} has no {modality} modality", session.session_id))
    })?;
    let series = ChannelSeries::from_tensor(&read_tensor(path)?, rate)?;
    if series.channels() != channels {
        return Err(Error::Validation(format!(
            "session {:?}: {modality} has {} channels, configured {channels}",
            session.session_id,
            series.channels()
        )));
    }
    Ok(series)
}

/// Features for one raw session, except `cart`, which needs a trained model.
pub fn featurize_session(session: &Session, params: &FeatureParams) -> Result<FeatureSession> {
    let mut features = BTreeMap::new();
    let tv = load_channels(session, "tv", params.fvtc_channels, params.tv_rate_hz)?;
    features.insert(Source::Fvtc, coordination_rows(&tv, params.seg_seconds, &params.delays)?);
    let fau = load_channels(session, "fau", params.fauc_channels, params.fau_rate_hz)?;
    features.insert(Source::Fauc, coordination_rows(&fau, params.seg_seconds, &params.delays)?);
    for src in [Source::W2v, Source::Wavlm, Source::Bert] {
        let dim = params.embedding_dim(src).expect("embedding source");
        let path = session.modality_paths.get(src.name()).ok_or_else(|| {
            Error::Validation(format!("session {:?} has no {src} modality", session.session_id))
        })?;
        let rows = crate::session::ingest_embeddings(path, src, dim)?;
        let flat: Vec<f32> = rows.iter().flat_map(|r| r.vector.iter().copied()).collect();
        let m = Array2::from_shape_vec((rows.len(), dim), flat).expect("uniform width checked");
        features.insert(src, m);
    }
    Ok(FeatureSession {
        id: session.session_id.clone(),
        subject: session.subject_id.clone(),
        labels: session.labels,
        features,
    })
}

/// Every segment-level FVTC vector of the corpus, stacked.
pub fn stacked_fvtc(corpus: &[FeatureSession]) -> Result<Array2<f32>> {
    let views: Vec<_> = corpus.iter().map(|s| s.rows(Source::Fvtc).map(|m| m.view())).collect::<Result<_>>()?;
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(format!("stacking FVTC rows: {e}")))
}

/// Adds (or replaces) the `cart` rows of every session.
pub fn attach_cart(corpus: &mut [FeatureSession], model: &CartModel) -> Result<()> {
    corpus.par_iter_mut().try_for_each(|s| {
        let fvtc = s.rows(Source::Fvtc)?;
        let rows: Vec<Tensor> = fvtc
            .rows()
            .into_iter()
            .map(|r| cart_representation(model, &r.to_vec()))
            .collect::<Result<_>>()?;
        let width = rows[0].len();
        let flat: Vec<f32> = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
        let m = Array2::from_shape_vec((rows.len(), width), flat).expect("fixed latent width");
        s.features.insert(Source::Cart, m);
        Ok(())
    })
}

pub fn write_features(corpus: &[FeatureSession], ws: &Workspace) -> Result<PathBuf> {
    let dir = ws.features_dir();
    let entries: Vec<ManifestEntry> = corpus
        .par_iter()
        .map(|s| {
            let mut modalities = BTreeMap::new();
            let mut lengths = BTreeMap::new();
            for (src, m) in &s.features {
                let rel = format!("{src}/{}.mmst", s.id);
                write_tensor(&Tensor::from_array2(m)?, dir.join(&rel))?;
                modalities.insert(src.name().to_string(), rel);
                lengths.insert(src.name().to_string(), m.nrows());
            }
            Ok(ManifestEntry {
                id: s.id.clone(),
                subject: s.subject.clone(),
                labels: s.labels.classes().iter().map(|c| c.value()).collect(),
                modalities,
                lengths,
            })
        })
        .collect::<Result<_>>()?;
    let path = ws.features_manifest();
    Manifest { sessions: entries }.write(&path)?;
    Ok(path)
}

/// Reads a features manifest back into memory.
pub fn load_features(manifest: impl AsRef<Path>) -> Result<Vec<FeatureSession>> {
    let manifest = manifest.as_ref();
    if !manifest.is_file() {
        return Err(Error::Validation(format!(
            "no features at {}; run featurize first",
            manifest.display()
        )));
    }
    load_manifest(manifest)?
        .into_par_iter()
        .map(|s| {
            let mut features = BTreeMap::new();
            for (name, path) in &s.modality_paths {
                let src: Source = name.parse()?;
                features.insert(src, read_tensor(path)?.to_array2()?);
            }
            Ok(FeatureSession {
                id: s.session_id,
                subject: s.subject_id,
                labels: s.labels,
                features,
            })
        })
        .collect()
}

/// Trains a VQ-VAE on every FVTC segment of `corpus` and saves it.
pub fn fit_cart(corpus: &[FeatureSession], cfg: &CartConfig, ws: &Workspace) -> Result<CartModel> {
    let vectors = stacked_fvtc(corpus)?;
    log::info!("training cart on {} FVTC vectors of width {}", vectors.nrows(), vectors.ncols());
    let model = train_cart(vectors.view(), cfg)?;
    save_cart(&model, ws.cart_dir())?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeaturizeSummary {
    pub manifest: PathBuf,
    pub sessions: usize,
    pub cart_trained: bool,
}

/// Extracts all features from the raw corpus. A VQ-VAE checkpoint already in
/// the work directory is reused; otherwise one is trained first.
pub fn featurize(cfg: &RunConfig) -> Result<FeaturizeSummary> {
    let ws = cfg.workspace();
    let raw = load_manifest(cfg.corpus_manifest())?;
    if raw.is_empty() {
        return Err(Error::Validation("corpus manifest lists no sessions".into()));
    }
    let mut corpus: Vec<FeatureSession> =
        raw.par_iter().map(|s| featurize_session(s, &cfg.features)).collect::<Result<_>>()?;
    let (cart, cart_trained) = match load_cart(ws.cart_dir()) {
        Ok(m) => (m, false),
        Err(Error::MissingCheckpoint(_)) => (fit_cart(&corpus, &cfg.cart, &ws)?, true),
        Err(e) => return Err(e),
    };
    attach_cart(&mut corpus, &cart)?;
    let manifest = write_features(&corpus, &ws)?;
    Ok(FeaturizeSummary {
        manifest,
        sessions: corpus.len(),
        cart_trained,
    })
}

/// Retrains the VQ-VAE from existing features and refreshes the `cart` rows.
pub fn retrain_cart(cfg: &RunConfig) -> Result<PathBuf> {
    let ws = cfg.workspace();
    let mut corpus = load_features(ws.features_manifest())?;
    let model = fit_cart(&corpus, &cfg.cart, &ws)?;
    attach_cart(&mut corpus, &model)?;
    write_features(&corpus, &ws)?;
    Ok(ws.cart_dir())
}

// ---------------------------------------------------------------------------
// models

pub fn folds_for(corpus: &[FeatureSession], seed: u64) -> Result<FoldAssignment> {
    let keys: Vec<SessionKey> = corpus.iter().map(SessionKey::from).collect();
    make_folds(&keys, seed)
}

pub fn trainer_for(cfg: &RunConfig, kind: ModelKind, corpus: &[FeatureSession]) -> Result<CnnTrainer> {
    let mut t = CnnTrainer::for_corpus(kind, &cfg.model.branch_template(), corpus, cfg.train.clone(), cfg.seed)?;
    if kind.is_fusion() {
        t.spec.head_hidden = cfg.model.fusion_head.clone();
    }
    Ok(t)
}

fn unimodal_kind(source: Source) -> ModelKind {
    match source {
        Source::Fvtc => ModelKind::Fvtc,
        Source::Cart => ModelKind::Cart,
        Source::W2v => ModelKind::W2v,
        Source::Wavlm => ModelKind::Wavlm,
        Source::Bert => ModelKind::Bert,
        Source::Fauc => ModelKind::Fauc,
    }
}

/// CNN trainer that can seed fusion branches from per-fold unimodal models.
struct PipelineTrainer {
    inner: CnnTrainer,
    donors: Vec<Vec<models::ModelGraph>>,
}

impl Trainer for PipelineTrainer {
    type Model = TrainedCnn;

    fn name(&self) -> String {
        self.inner.name()
    }

    fn fit(&self, train: &[&FeatureSession], fold: usize) -> Result<TrainedCnn> {
        let donors: Vec<&models::ModelGraph> = self.donors.get(fold).map(|d| d.iter().collect()).unwrap_or_default();
        self.inner.fit_from(train, fold, &donors)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub model: String,
    pub checkpoints: Vec<PathBuf>,
    /// Held-out metrics measured right after training.
    pub report: CvReport,
}

/// Trains one model per held-out fold and stores the checkpoints.
pub fn train_in_memory(cfg: &RunConfig, kind: ModelKind, corpus: &[FeatureSession]) -> Result<eval::CvOutcome<TrainedCnn>> {
    let folds = folds_for(corpus, cfg.seed)?;
    let donors = if kind.is_fusion() && cfg.model.init_from_unimodal {
        let ws = cfg.workspace();
        (0..NUM_FOLDS)
            .map(|k| {
                kind.sources()
                    .into_iter()
                    .map(|src| {
                        let dir = ws.fold_dir(unimodal_kind(src), k);
                        load_checkpoint_for(&dir, &[src]).map(|(m, _)| m)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let trainer = PipelineTrainer {
        inner: trainer_for(cfg, kind, corpus)?,
        donors,
    };
    cross_validate(corpus, &folds, &trainer)
}

pub fn train(cfg: &RunConfig, kind: ModelKind) -> Result<TrainSummary> {
    let ws = cfg.workspace();
    let corpus = load_features(ws.features_manifest())?;
    let outcome = train_in_memory(cfg, kind, &corpus)?;
    let mut checkpoints = Vec::new();
    for (k, m) in outcome.models.iter().enumerate() {
        let dir = ws.fold_dir(kind, k);
        save_checkpoint(&m.model, cfg.train.epochs, &dir)?;
        write_json(&dir.join("trace.json"), &m.trace)?;
        checkpoints.push(dir);
    }
    Ok(TrainSummary {
        model: kind.name().into(),
        checkpoints,
        report: outcome.report,
    })
}

/// "Trains" by loading the stored checkpoint for the held-out fold.
struct StoredModels {
    kind: ModelKind,
    ws: Workspace,
    truncate: bool,
}

impl Trainer for StoredModels {
    type Model = TrainedCnn;

    fn name(&self) -> String {
        self.kind.name().into()
    }

    fn fit(&self, _: &[&FeatureSession], fold: usize) -> Result<TrainedCnn> {
        let (model, _) = load_checkpoint_for(self.ws.fold_dir(self.kind, fold), &self.kind.sources())?;
        Ok(TrainedCnn {
            model,
            trace: Default::default(),
            truncate: self.truncate,
        })
    }
}

/// Scores stored fold checkpoints on their held-out folds and writes the report.
pub fn evaluate(cfg: &RunConfig, kind: ModelKind) -> Result<(CvReport, PathBuf)> {
    let ws = cfg.workspace();
    let corpus = load_features(ws.features_manifest())?;
    let folds = folds_for(&corpus, cfg.seed)?;
    let stored = StoredModels {
        kind,
        ws: ws.clone(),
        truncate: cfg.train.truncate,
    };
    for k in 0..NUM_FOLDS {
        let dir = ws.fold_dir(kind, k);
        if !dir.join(crate::checkpoint::SIDECAR).is_file() {
            return Err(Error::MissingCheckpoint(format!(
                "no {kind} model for fold {k} at {}; run train first",
                dir.display()
            )));
        }
    }
    let report = cross_validate(&corpus, &folds, &stored)
        .map_err(|e| match e {
            Error::Fold { source, .. } if matches!(*source, Error::MissingCheckpoint(_)) => *source,
            e => e,
        })?
        .report
        .stamped();
    let path = ws.report_path(kind);
    write_json(&path, &report)?;
    Ok((report, path))
}

pub fn gridsearch(cfg: &RunConfig, kind: ModelKind) -> Result<(GridResult, PathBuf)> {
    let ws = cfg.workspace();
    let corpus = load_features(ws.features_manifest())?;
    let folds = folds_for(&corpus, cfg.seed)?;
    let settings = GridSettings {
        kind,
        test_fold: cfg.eval.grid_test_fold,
        space: cfg.eval.grid.clone(),
        base_branch: cfg.model.branch_template(),
        base_train: cfg.train.clone(),
        seed: cfg.seed,
    };
    let result = grid_search(&corpus, &folds, &settings)?;
    let path = ws.grid_path(kind);
    write_json(&path, &result)?;
    Ok((result, path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub model: String,
    /// Class values per session, in symptom order.
    pub sessions: BTreeMap<String, Vec<u8>>,
}

/// Averages the class probabilities of the fold models.
pub fn ensemble_predict(models: &[TrainedCnn], session: &FeatureSession) -> Result<SymptomVector> {
    let mut probs = Array2::<f64>::zeros((NUM_SYMPTOMS, NUM_CLASSES));
    for m in models {
        let logits = m.model.forward(&m.model.inputs_for(session, m.truncate)?)?;
        for (mut out, row) in probs.rows_mut().into_iter().zip(logits.rows()) {
            out += &softmax(row);
        }
    }
    models::predict(&probs)
}

/// Predicts every session of a features manifest (the work directory's by default).
pub fn predict(cfg: &RunConfig, kind: ModelKind, features: Option<&Path>) -> Result<(Predictions, PathBuf)> {
    let ws = cfg.workspace();
    let stored = StoredModels {
        kind,
        ws: ws.clone(),
        truncate: cfg.train.truncate,
    };
    let models: Vec<TrainedCnn> = (0..NUM_FOLDS).map(|k| stored.fit(&[], k)).collect::<Result<_>>()?;
    let manifest = features.map(Path::to_path_buf).unwrap_or_else(|| ws.features_manifest());
    let corpus = load_features(manifest)?;
    let sessions = corpus
        .iter()
        .map(|s| {
            let p = ensemble_predict(&models, s)?;
            Ok((s.id.clone(), p.classes().iter().map(|c| c.value()).collect()))
        })
        .collect::<Result<_>>()?;
    let out = Predictions {
        model: kind.name().into(),
        sessions,
    };
    let path = ws.predictions_path(kind);
    write_json(&path, &out)?;
    Ok((out, path))
}

/// Writes a synthetic corpus at the configured corpus location.
pub fn synthesize(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<PathBuf> {
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => cfg
            .corpus_manifest()
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| cfg.paths.workdir.clone()),
    };
    synth::generate_corpus(&cfg.synth, dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(root: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.paths.workdir = root.to_path_buf();
        cfg.synth = SynthConfig {
            n_sessions: 12,
            n_subjects: 6,
            tv_channels: 4,
            tv_rate_hz: 2.0,
            fau_channels: 3,
            fau_rate_hz: 2.0,
            segments: (3, 5),
            sentences: (4, 7),
            w2v_dim: 18,
            wavlm_dim: 18,
            bert_dim: 18,
            ..SynthConfig::default()
        };
        cfg.features = FeatureParams {
            delays: DelayGrid::new(2, 3).unwrap(),
            fvtc_channels: 4,
            fauc_channels: 3,
            seg_seconds: 40.0,
            tv_rate_hz: 2.0,
            fau_rate_hz: 2.0,
            w2v_dim: 18,
            wavlm_dim: 18,
            bert_dim: 18,
        };
        cfg.cart = CartConfig {
            codes_per_segment: 2,
            code_dim: 4,
            codebook_size: 8,
            hidden: 16,
            epochs: 2,
            batch_size: 8,
            ..CartConfig::default()
        };
        cfg.model = ModelParams {
            conv_layers: vec![ConvLayerConfig {
                out_channels: 2,
                kernel: 3,
            }],
            latent_dim: 8,
            fusion_head: vec![8],
            ..ModelParams::default()
        };
        cfg.train.epochs = 2;
        cfg.resolved().unwrap()
    }

    #[test]
    fn default_config_roundtrips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.train.epochs, 200);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.schedule.eta_max, 1e-4);
        assert_eq!(cfg.features.seg_seconds, 40.0);
        assert!(cfg.clone().resolved().is_ok());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 5, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 8);
        let r = cfg.resolved().unwrap();
        assert_eq!((r.synth.seed, r.cart.seed, r.train.seed), (5, 5, 5));
    }

    #[test]
    fn rejects_other_fold_counts() {
        let mut cfg = RunConfig::default();
        cfg.eval.k = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn workflow_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        synthesize(&cfg, None).unwrap();
        let summary = featurize(&cfg).unwrap();
        assert!(summary.cart_trained);
        assert_eq!(summary.sessions, 12);
        let corpus = load_features(&summary.manifest).unwrap();
        let s = &corpus[0];
        assert_eq!(s.rows(Source::Fvtc).unwrap().ncols(), 3 * 16);
        assert_eq!(s.rows(Source::Fauc).unwrap().ncols(), 3 * 9);
        assert_eq!(s.rows(Source::Cart).unwrap().ncols(), 8);
        assert_eq!(s.rows(Source::Cart).unwrap().nrows(), s.rows(Source::Fvtc).unwrap().nrows());

        // a second featurize reuses the VQ-VAE
        assert!(!featurize(&cfg).unwrap().cart_trained);

        let kind = ModelKind::Bert;
        assert!(matches!(evaluate(&cfg, kind), Err(Error::MissingCheckpoint(_))));
        let trained = train(&cfg, kind).unwrap();
        assert_eq!(trained.checkpoints.len(), 3);
        let (report, path) = evaluate(&cfg, kind).unwrap();
        assert!(path.is_file());
        assert_eq!(report.canonical_json().unwrap(), trained.report.canonical_json().unwrap());
        for m in report.aggregate.values() {
            assert!((0.0..=1.0).contains(&m.mean));
        }
        let (preds, ppath) = predict(&cfg, kind, None).unwrap();
        assert!(ppath.is_file());
        assert_eq!(preds.sessions.len(), 12);
    }
}

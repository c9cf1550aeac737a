//! Metrics, subject-level folds, 3-fold cross-validation and grid search.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::Session;
use crate::models::{self, BranchConfig, BranchSpec, ModelGraph, ModelKind, ModelSpec, TrainConfig, TrainTrace};
use crate::nn::{PoolMode, SgdrSchedule};
use crate::session::{corpus_s_max, FeatureSession};
use crate::symptom::{SeverityClass, SymptomId, SymptomVector, NUM_CLASSES, NUM_SYMPTOMS};

pub const NUM_FOLDS: usize = 3;
pub const CI_Z: f64 = 1.96;
pub const CI_METHOD: &str = "mean +/- 1.96 * s / sqrt(n) over per-fold scores (s with n-1 denominator)";

fn check_lengths(preds: &[SymptomVector], targets: &[SymptomVector]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Validation("no predictions to score".into()));
    }
    Ok(())
}

/// Fraction of correct (session, symptom) pairs.
pub fn overall_accuracy(preds: &[SymptomVector], targets: &[SymptomVector]) -> Result<f64> {
    check_lengths(preds, targets)?;
    let correct: usize = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| p.classes().iter().zip(t.classes()).filter(|(a, b)| a == b).count())
        .sum();
    Ok(correct as f64 / (preds.len() * NUM_SYMPTOMS) as f64)
}

pub fn symptom_accuracy(preds: &[SymptomVector], targets: &[SymptomVector], s: SymptomId) -> Result<f64> {
    check_lengths(preds, targets)?;
    let correct = preds.iter().zip(targets).filter(|(p, t)| p.get(s) == t.get(s)).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Support-weighted mean of per-class F1 over all flattened (session, symptom) pairs.
pub fn weighted_f1(preds: &[SymptomVector], targets: &[SymptomVector]) -> Result<f64> {
    check_lengths(preds, targets)?;
    let mut tp = [0usize; NUM_CLASSES];
    let mut fp = [0usize; NUM_CLASSES];
    let mut fneg = [0usize; NUM_CLASSES];
    for (p, t) in preds.iter().zip(targets) {
        for (a, b) in p.classes().iter().zip(t.classes()) {
            if a == b {
                tp[a.index()] += 1;
            } else {
                fp[a.index()] += 1;
                fneg[b.index()] += 1;
            }
        }
    }
    let mut num = 0.0;
    let mut support_total = 0usize;
    for c in 0..NUM_CLASSES {
        let support = tp[c] + fneg[c];
        if support == 0 {
            continue;
        }
        let precision = if tp[c] + fp[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        };
        let recall = tp[c] as f64 / support as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        num += support as f64 * f1;
        support_total += support;
    }
    Ok(num / support_total as f64)
}

/// `(mean, 1.96 * s / sqrt(n))` with the sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Validation(format!("a confidence interval needs at least 2 values, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok((mean, CI_Z * var.sqrt() / (n as f64).sqrt()))
}

/// Metric name for symptom `s`, e.g. `sym_acc_07`.
pub fn symptom_metric_name(s: SymptomId) -> String {
    format!("sym_acc_{:02}", s.index())
}

/// All report metrics for one set of predictions, keyed by metric name.
pub fn score(preds: &[SymptomVector], targets: &[SymptomVector]) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    m.insert("overall_acc".to_string(), overall_accuracy(preds, targets)?);
    m.insert("weighted_f1".to_string(), weighted_f1(preds, targets)?);
    for s in SymptomId::ALL {
        m.insert(symptom_metric_name(s), symptom_accuracy(preds, targets, s)?);
    }
    Ok(m)
}

// ---------------------------------------------------------------------------
// folds

/// What fold construction needs to know about a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionKey {
    pub id: String,
    pub subject: String,
    pub severity: u32,
}

impl From<&FeatureSession> for SessionKey {
    fn from(s: &FeatureSession) -> Self {
        SessionKey {
            id: s.id.clone(),
            subject: s.subject.clone(),
            severity: s.labels.total(),
        }
    }
}

impl From<&Session> for SessionKey {
    fn from(s: &Session) -> Self {
        SessionKey {
            id: s.session_id.clone(),
            subject: s.subject_id.clone(),
            severity: s.labels.total(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold(&self, id: &str) -> Result<usize> {
        self.fold_of
            .get(id)
            .copied()
            .ok_or_else(|| Error::Validation(format!("session {id:?} has no fold")))
    }

    pub fn sizes(&self) -> [usize; NUM_FOLDS] {
        let mut n = [0; NUM_FOLDS];
        for &f in self.fold_of.values() {
            n[f] += 1;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.fold_of.values().any(|&f| f >= NUM_FOLDS) {
            return Err(Error::Validation("fold index out of range".into()));
        }
        if self.sizes().contains(&0) {
            return Err(Error::Validation("every fold needs at least one session".into()));
        }
        Ok(())
    }
}

/// Subject-level greedy balancing.
///
/// Subjects are shuffled with `seed`, stably sorted by session count and then
/// mean total severity (both descending), and each is placed in the fold with
/// the fewest sessions so far, ties going to the lower severity sum and then
/// the lower fold index.
pub fn make_folds(sessions: &[SessionKey], seed: u64) -> Result<FoldAssignment> {
    let mut by_subject: BTreeMap<&str, Vec<&SessionKey>> = BTreeMap::new();
    for s in sessions {
        by_subject.entry(s.subject.as_str()).or_default().push(s);
    }
    if by_subject.len() < NUM_FOLDS {
        return Err(Error::Validation(format!(
            "need at least {NUM_FOLDS} subjects, got {}",
            by_subject.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in sessions {
        if !seen.insert(&s.id) {
            return Err(Error::Validation(format!("duplicate session id {:?}", s.id)));
        }
    }
    let mut subjects: Vec<(&str, Vec<&SessionKey>)> = by_subject.into_iter().collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mean_sev = |v: &[&SessionKey]| v.iter().map(|s| s.severity as f64).sum::<f64>() / v.len() as f64;
    subjects.sort_by(|a, b| {
        b.1.len()
            .cmp(&a.1.len())
            .then_with(|| mean_sev(&b.1).partial_cmp(&mean_sev(&a.1)).unwrap_or(Ordering::Equal))
    });
    let mut count = [0usize; NUM_FOLDS];
    let mut severity = [0u64; NUM_FOLDS];
    let mut fold_of = BTreeMap::new();
    for (_, members) in subjects {
        let f = (0..NUM_FOLDS)
            .min_by_key(|&f| (count[f], severity[f], f))
            .expect("at least one fold");
        count[f] += members.len();
        severity[f] += members.iter().map(|s| s.severity as u64).sum::<u64>();
        for s in members {
            fold_of.insert(s.id.clone(), f);
        }
    }
    Ok(FoldAssignment { fold_of })
}

// ---------------------------------------------------------------------------
// trainers

pub trait Predictor {
    fn predict(&self, session: &FeatureSession) -> Result<SymptomVector>;
}

pub trait Trainer: Sync {
    type Model: Predictor + Send;

    /// Label used in reports.
    fn name(&self) -> String;

    /// Fits a model on `train`. `fold` is the held-out fold, available for seeding.
    fn fit(&self, train: &[&FeatureSession], fold: usize) -> Result<Self::Model>;
}

/// Predicts, for every symptom, the class most frequent in training
/// (ties to the lower class).
#[derive(Debug, Clone, Copy, Default)]
pub struct MajorityTrainer;

#[derive(Debug, Clone, PartialEq)]
pub struct MajorityModel(pub SymptomVector);

impl Predictor for MajorityModel {
    fn predict(&self, _: &FeatureSession) -> Result<SymptomVector> {
        Ok(self.0)
    }
}

pub fn majority_labels<'a>(labels: impl IntoIterator<Item = &'a SymptomVector>) -> Result<SymptomVector> {
    let mut counts = [[0usize; NUM_CLASSES]; NUM_SYMPTOMS];
    let mut n = 0;
    for l in labels {
        for (s, c) in l.classes().iter().enumerate() {
            counts[s][c.index()] += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Validation("majority of an empty label set".into()));
    }
    let mut out = [SeverityClass::NONE; NUM_SYMPTOMS];
    for (s, row) in counts.iter().enumerate() {
        let best = (0..NUM_CLASSES).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        out[s] = SeverityClass::new(best as u8)?;
    }
    Ok(SymptomVector::new(out))
}

impl Trainer for MajorityTrainer {
    type Model = MajorityModel;

    fn name(&self) -> String {
        "majority".into()
    }

    fn fit(&self, train: &[&FeatureSession], _: usize) -> Result<MajorityModel> {
        Ok(MajorityModel(majority_labels(train.iter().map(|s| &s.labels))?))
    }
}

/// Builds, normalizes and trains a CNN model for one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnTrainer {
    pub kind: ModelKind,
    pub spec: ModelSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TrainedCnn {
    pub model: ModelGraph,
    pub trace: TrainTrace,
    pub truncate: bool,
}

impl Predictor for TrainedCnn {
    fn predict(&self, session: &FeatureSession) -> Result<SymptomVector> {
        let inputs = self.model.inputs_for(session, self.truncate)?;
        models::predict(&self.model.forward(&inputs)?)
    }
}

impl CnnTrainer {
    /// Uses `template` (its source is overwritten) for every branch of `kind`,
    /// with `s_max` and feature widths taken from the whole corpus.
    pub fn for_corpus(
        kind: ModelKind,
        template: &BranchConfig,
        corpus: &[FeatureSession],
        train: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        let first = corpus.first().ok_or_else(|| Error::Validation("empty corpus".into()))?;
        let mut branches = Vec::new();
        for src in kind.sources() {
            let s_max = corpus_s_max(corpus, src)?;
            let features = first.rows(src)?.ncols();
            let config = BranchConfig {
                source: src,
                ..template.clone()
            };
            branches.push(BranchSpec::new(config, s_max, features));
        }
        let head_hidden = if kind.is_fusion() { vec![128, 64] } else { Vec::new() };
        let spec = ModelSpec {
            branches,
            head_hidden,
            seed,
        };
        // fail early on collapsing shapes
        for b in &spec.branches {
            b.layer_specs()?;
        }
        Ok(CnnTrainer { kind, spec, train })
    }
}

impl Trainer for CnnTrainer {
    type Model = TrainedCnn;

    fn name(&self) -> String {
        self.kind.name().into()
    }

    fn fit(&self, train: &[&FeatureSession], fold: usize) -> Result<TrainedCnn> {
        self.fit_from(train, fold, &[])
    }
}

impl CnnTrainer {
    /// Like [`Trainer::fit`], but branches matching a donor start from the
    /// donor's weights and input norms.
    pub fn fit_from(&self, train: &[&FeatureSession], fold: usize, donors: &[&ModelGraph]) -> Result<TrainedCnn> {
        let mut model = ModelGraph::build(ModelSpec {
            seed: self.spec.seed.wrapping_add(fold as u64),
            ..self.spec.clone()
        })?;
        model.fit_input_norm(train)?;
        for d in donors {
            model.init_branch_from(d)?;
        }
        let cfg = TrainConfig {
            seed: self.train.seed.wrapping_add(fold as u64),
            ..self.train.clone()
        };
        let trace = models::train(&mut model, train, &cfg)?;
        Ok(TrainedCnn {
            model,
            trace,
            truncate: self.train.truncate,
        })
    }
}

// ---------------------------------------------------------------------------
// cross-validation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub model: String,
    pub n_sessions: usize,
    pub ci_method: String,
    /// Excluded from reproducibility comparisons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_unix: Option<u64>,
    pub per_fold: Vec<FoldMetrics>,
    pub aggregate: BTreeMap<String, MeanCi>,
    /// Held-out prediction for every session, as class values.
    pub predictions: BTreeMap<String, Vec<u8>>,
}

impl CvReport {
    pub fn mean(&self, metric: &str) -> Result<f64> {
        self.aggregate
            .get(metric)
            .map(|m| m.mean)
            .ok_or_else(|| Error::Validation(format!("report has no metric {metric:?}")))
    }

    pub fn stamped(mut self) -> Self {
        self.generated_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .ok()
            .map(|d| d.as_secs());
        self
    }

    /// Pretty JSON without the timestamp, for byte-level comparisons.
    pub fn canonical_json(&self) -> Result<String> {
        let mut r = self.clone();
        r.generated_unix = None;
        Ok(serde_json::to_string_pretty(&r)?)
    }
}

/// Per-fold metrics plus their aggregate.
pub fn build_report(
    model: &str,
    folds: Vec<FoldMetrics>,
    predictions: BTreeMap<String, Vec<u8>>,
) -> Result<CvReport> {
    let names: Vec<String> = folds.first().map(|f| f.metrics.keys().cloned().collect()).unwrap_or_default();
    let mut aggregate = BTreeMap::new();
    for name in names {
        let vals: Vec<f64> = folds.iter().map(|f| f.metrics[&name]).collect();
        let (mean, half_width) = confidence_interval(&vals)?;
        aggregate.insert(name, MeanCi { mean, half_width });
    }
    Ok(CvReport {
        model: model.into(),
        n_sessions: folds.iter().map(|f| f.n_test).sum(),
        ci_method: CI_METHOD.into(),
        generated_unix: None,
        per_fold: folds,
        aggregate,
        predictions,
    })
}

pub struct CvOutcome<M> {
    pub report: CvReport,
    /// Model trained with fold `i` held out, at index `i`.
    pub models: Vec<M>,
}

type FoldRun<M> = (FoldMetrics, M, Vec<(String, SymptomVector)>);

/// Trains on two folds and tests on the third, for each of the three rotations.
/// Rotations may run in parallel; results are collected in fold order.
pub fn cross_validate<T: Trainer>(
    corpus: &[FeatureSession],
    folds: &FoldAssignment,
    trainer: &T,
) -> Result<CvOutcome<T::Model>> {
    folds.validate()?;
    let mut fold_ids = Vec::with_capacity(corpus.len());
    for s in corpus {
        fold_ids.push(folds.fold(&s.id)?);
    }
    let per_fold: Vec<FoldRun<T::Model>> = (0..NUM_FOLDS)
        .into_par_iter()
        .map(|k| {
            let run = || -> Result<_> {
                let train: Vec<&FeatureSession> =
                    corpus.iter().zip(&fold_ids).filter(|(_, &f)| f != k).map(|(s, _)| s).collect();
                let test: Vec<&FeatureSession> =
                    corpus.iter().zip(&fold_ids).filter(|(_, &f)| f == k).map(|(s, _)| s).collect();
                if train.is_empty() || test.is_empty() {
                    return Err(Error::Validation("empty train or test split".into()));
                }
                let model = trainer.fit(&train, k)?;
                let preds: Vec<SymptomVector> = test.iter().map(|s| model.predict(s)).collect::<Result<_>>()?;
                let targets: Vec<SymptomVector> = test.iter().map(|s| s.labels).collect();
                let metrics = score(&preds, &targets)?;
                log::info!(
                    "{} fold {k}: overall_acc {:.4} weighted_f1 {:.4}",
                    trainer.name(),
                    metrics["overall_acc"],
                    metrics["weighted_f1"]
                );
                let named = test.iter().map(|s| s.id.clone()).zip(preds).collect();
                Ok((
                    FoldMetrics {
                        fold: k,
                        n_train: train.len(),
                        n_test: test.len(),
                        metrics,
                    },
                    model,
                    named,
                ))
            };
            run().map_err(|e| Error::Fold {
                fold: k,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let mut metrics = Vec::new();
    let mut models = Vec::new();
    let mut predictions = BTreeMap::new();
    for (m, model, preds) in per_fold {
        metrics.push(m);
        models.push(model);
        for (id, p) in preds {
            predictions.insert(id, p.classes().iter().map(|c| c.value()).collect());
        }
    }
    Ok(CvOutcome {
        report: build_report(&trainer.name(), metrics, predictions)?,
        models,
    })
}

// ---------------------------------------------------------------------------
// grid search

/// One combination of the searched hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub restart: usize,
    pub kernel: usize,
    pub pool: PoolMode,
}

impl GridPoint {
    /// Lexicographic order on `(lr, restart, kernel, pool)`.
    pub fn config_cmp(&self, other: &Self) -> Ordering {
        self.lr
            .total_cmp(&other.lr)
            .then(self.restart.cmp(&other.restart))
            .then(self.kernel.cmp(&other.kernel))
            .then(self.pool.cmp(&other.pool))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub lr: Vec<f64>,
    pub restart: Vec<usize>,
    pub kernel: Vec<usize>,
    pub pool: Vec<PoolMode>,
}

impl Default for GridSpace {
    fn default() -> Self {
        GridSpace {
            lr: vec![5e-4, 1e-4, 5e-5],
            restart: vec![25, 50, 75],
            kernel: vec![2, 3, 4, 5, 6],
            pool: vec![PoolMode::Avg, PoolMode::Max],
        }
    }
}

impl GridSpace {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &lr in &self.lr {
            for &restart in &self.restart {
                for &kernel in &self.kernel {
                    for &pool in &self.pool {
                        out.push(GridPoint {
                            lr,
                            restart,
                            kernel,
                            pool,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub rank: usize,
    pub point: GridPoint,
    pub status: CellStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_overall_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_weighted_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub model: String,
    pub test_fold: usize,
    pub best: Option<GridPoint>,
    pub leaderboard: Vec<LeaderboardRow>,
}

/// Ranks evaluated cells: accuracy, then weighted F1 (both descending), then
/// config order; failed cells follow in config order.
pub fn rank_cells(mut rows: Vec<LeaderboardRow>) -> Vec<LeaderboardRow> {
    rows.sort_by(|a, b| match (&a.status, &b.status) {
        (CellStatus::Ok, CellStatus::Failed) => Ordering::Less,
        (CellStatus::Failed, CellStatus::Ok) => Ordering::Greater,
        (CellStatus::Failed, CellStatus::Failed) => a.point.config_cmp(&b.point),
        (CellStatus::Ok, CellStatus::Ok) => {
            let key = |r: &LeaderboardRow| (r.mean_overall_acc.unwrap_or(0.0), r.mean_weighted_f1.unwrap_or(0.0));
            let (aa, af) = key(a);
            let (ba, bf) = key(b);
            ba.total_cmp(&aa)
                .then(bf.total_cmp(&af))
                .then_with(|| a.point.config_cmp(&b.point))
        }
    });
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    rows
}

/// Scores one cell by 2-fold CV inside the development folds.
fn internal_cv(
    corpus: &[FeatureSession],
    folds: &FoldAssignment,
    dev: [usize; 2],
    trainer: &CnnTrainer,
) -> Result<(f64, f64)> {
    let mut acc = 0.0;
    let mut f1 = 0.0;
    for (i, &val) in dev.iter().enumerate() {
        let train_fold = dev[1 - i];
        let train: Vec<&FeatureSession> = corpus.iter().filter(|s| folds.fold_of[&s.id] == train_fold).collect();
        let test: Vec<&FeatureSession> = corpus.iter().filter(|s| folds.fold_of[&s.id] == val).collect();
        let model = trainer.fit(&train, val)?;
        let preds: Vec<SymptomVector> = test.iter().map(|s| model.predict(s)).collect::<Result<_>>()?;
        let targets: Vec<SymptomVector> = test.iter().map(|s| s.labels).collect();
        acc += overall_accuracy(&preds, &targets)?;
        f1 += weighted_f1(&preds, &targets)?;
    }
    Ok((acc / 2.0, f1 / 2.0))
}

/// What to search and everything held fixed while searching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSettings {
    pub kind: ModelKind,
    pub test_fold: usize,
    pub space: GridSpace,
    /// Conv widths, latent size and any layout not covered by the space.
    pub base_branch: BranchConfig,
    /// Epochs, batch size, eta_min and t_mult.
    pub base_train: TrainConfig,
    pub seed: u64,
}

/// Evaluates every point of the space without touching the test fold. Cells
/// whose model cannot be built or trained are kept as failed rows.
pub fn grid_search(corpus: &[FeatureSession], folds: &FoldAssignment, settings: &GridSettings) -> Result<GridResult> {
    folds.validate()?;
    let GridSettings {
        kind,
        test_fold,
        ref space,
        ref base_branch,
        ref base_train,
        seed,
    } = *settings;
    if test_fold >= NUM_FOLDS {
        return Err(Error::Config(format!("test fold {test_fold} out of range")));
    }
    let points = space.points();
    if points.is_empty() {
        return Err(Error::Config("empty search space".into()));
    }
    let dev: Vec<usize> = (0..NUM_FOLDS).filter(|&f| f != test_fold).collect();
    let dev = [dev[0], dev[1]];
    let rows: Vec<LeaderboardRow> = points
        .par_iter()
        .map(|&point| {
            let cell = || -> Result<(f64, f64)> {
                let branch = base_branch.clone().with_kernel(point.kernel).with_pool(point.pool);
                let train = TrainConfig {
                    schedule: SgdrSchedule {
                        eta_max: point.lr,
                        t0: point.restart,
                        ..base_train.schedule
                    },
                    ..base_train.clone()
                };
                let trainer = CnnTrainer::for_corpus(kind, &branch, corpus, train, seed)?;
                internal_cv(corpus, folds, dev, &trainer)
            };
            match cell() {
                Ok((acc, f1)) => {
                    log::info!("grid {point:?}: acc {acc:.4} f1 {f1:.4}");
                    LeaderboardRow {
                        rank: 0,
                        point,
                        status: CellStatus::Ok,
                        mean_overall_acc: Some(acc),
                        mean_weighted_f1: Some(f1),
                        error: None,
                    }
                }
                Err(e) => {
                    log::info!("grid {point:?}: failed ({e})");
                    LeaderboardRow {
                        rank: 0,
                        point,
                        status: CellStatus::Failed,
                        mean_overall_acc: None,
                        mean_weighted_f1: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let leaderboard = rank_cells(rows);
    let best = leaderboard
        .first()
        .filter(|r| r.status == CellStatus::Ok)
        .map(|r| r.point);
    Ok(GridResult {
        model: kind.name().into(),
        test_fold,
        best,
        leaderboard,
    })
}

//! CNN branches over session matrices and the models built from them.
//!
//! A branch runs `(conv -> relu -> pool) x L -> flatten -> linear -> relu` on
//! one source's `s_max x F` matrix and yields a latent vector. A unimodal model
//! is one branch plus a linear layer to 54 logits; a fusion model concatenates
//! the latents of 2 to 4 branches and passes them through a small MLP head.
//! Logits are read as 18 rows of 3 severity classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    decisions, max_relative_error, multihead_cross_entropy, piecewise_gradient_pair, sgdr_lr, Activation, Adam, Layer,
    LayerCache, LayerSpec, Param, Parameterized, PoolMode, Sequential, SgdrSchedule,
};
use crate::session::{FeatureSession, SessionMatrix, Source};
use crate::symptom::{SeverityClass, SymptomVector, NUM_CLASSES, NUM_SYMPTOMS};
use crate::tensor::Tensor;

pub const NUM_LOGITS: usize = NUM_SYMPTOMS * NUM_CLASSES;

/// Multiplier on the He-uniform initial weights of the logit layer. Small
/// initial logits keep an untrained model close to the uniform prediction.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

/// Per-source session matrices handed to a model.
pub type Inputs = BTreeMap<Source, SessionMatrix>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerConfig {
    pub out_channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub source: Source,
    pub conv_layers: Vec<ConvLayerConfig>,
    pub pool: PoolMode,
    #[serde(default = "default_pool_kernel")]
    pub pool_kernel: usize,
    pub latent_dim: usize,
}

fn default_pool_kernel() -> usize {
    2
}

impl BranchConfig {
    /// Two conv layers (8 then 16 channels, kernel 5), max pooling, latent 64.
    pub fn default_for(source: Source) -> Self {
        BranchConfig {
            source,
            conv_layers: vec![
                ConvLayerConfig {
                    out_channels: 8,
                    kernel: 5,
                },
                ConvLayerConfig {
                    out_channels: 16,
                    kernel: 5,
                },
            ],
            pool: PoolMode::Max,
            pool_kernel: 2,
            latent_dim: 64,
        }
    }

    /// Same layout with every conv kernel replaced by `kernel`.
    pub fn with_kernel(mut self, kernel: usize) -> Self {
        for c in &mut self.conv_layers {
            c.kernel = kernel;
        }
        self
    }

    pub fn with_pool(mut self, pool: PoolMode) -> Self {
        self.pool = pool;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.pool_kernel == 0 {
            return Err(Error::Config("pool kernel must be positive".into()));
        }
        for c in &self.conv_layers {
            if !(2..=6).contains(&c.kernel) {
                return Err(Error::Config(format!("conv kernel {} outside 2..=6", c.kernel)));
            }
            if c.out_channels == 0 {
                return Err(Error::Config("conv layers need at least one output channel".into()));
            }
        }
        Ok(())
    }
}

/// A branch together with the input shape it was built for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub config: BranchConfig,
    pub s_max: usize,
    pub features: usize,
}

impl BranchSpec {
    pub fn new(config: BranchConfig, s_max: usize, features: usize) -> Self {
        BranchSpec {
            config,
            s_max,
            features,
        }
    }

    pub fn source(&self) -> Source {
        self.config.source
    }

    /// Layer chain for this branch, or a configuration error listing the
    /// shapes reached before the spatial dims collapsed.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.config.validate()?;
        let (mut c, mut h, mut w) = (1usize, self.s_max, self.features);
        let mut trace = vec![format!("{c}x{h}x{w}")];
        let collapse = |trace: &[String], what: String| {
            Error::Config(format!(
                "{} branch collapses: {what} (shapes {})",
                self.config.source,
                trace.join(" -> ")
            ))
        };
        let mut specs = Vec::new();
        for conv in &self.config.conv_layers {
            let k = conv.kernel;
            if h < k || w < k {
                return Err(collapse(&trace, format!("kernel {k} exceeds {h}x{w}")));
            }
            specs.push(LayerSpec::Conv2d {
                in_channels: c,
                out_channels: conv.out_channels,
                kernel: k,
            });
            specs.push(LayerSpec::Relu);
            c = conv.out_channels;
            h = h - k + 1;
            w = w - k + 1;
            trace.push(format!("{c}x{h}x{w}"));
            let pk = self.config.pool_kernel;
            if h < pk || w < pk {
                return Err(collapse(&trace, format!("pool {pk} exceeds {h}x{w}")));
            }
            specs.push(match self.config.pool {
                PoolMode::Max => LayerSpec::Maxpool2d { kernel: pk },
                PoolMode::Avg => LayerSpec::Avgpool2d { kernel: pk },
            });
            h /= pk;
            w /= pk;
            trace.push(format!("{c}x{h}x{w}"));
        }
        specs.push(LayerSpec::Flatten);
        specs.push(LayerSpec::Linear {
            in_features: c * h * w,
            out_features: self.config.latent_dim,
        });
        specs.push(LayerSpec::Relu);
        Ok(specs)
    }
}

/// Everything needed to rebuild a model's structure and initial weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub branches: Vec<BranchSpec>,
    /// Hidden widths of the head between the concatenated latents and the logits.
    pub head_hidden: Vec<usize>,
    pub seed: u64,
}

impl ModelSpec {
    pub fn sources(&self) -> Vec<Source> {
        self.branches.iter().map(BranchSpec::source).collect()
    }

    pub fn head_input(&self) -> usize {
        self.branches.iter().map(|b| b.config.latent_dim).sum()
    }
}

/// The model families trained in experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Fvtc,
    Cart,
    W2v,
    Wavlm,
    Bert,
    Fauc,
    /// C-Art with wav2vec-style embeddings.
    AaFusion,
    /// C-Art with WavLM-style embeddings.
    AaFusionWavlm,
    Multimodal,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::Fvtc,
        ModelKind::Cart,
        ModelKind::W2v,
        ModelKind::Wavlm,
        ModelKind::Bert,
        ModelKind::Fauc,
        ModelKind::AaFusion,
        ModelKind::AaFusionWavlm,
        ModelKind::Multimodal,
    ];

    pub fn sources(self) -> Vec<Source> {
        match self {
            ModelKind::Fvtc => vec![Source::Fvtc],
            ModelKind::Cart => vec![Source::Cart],
            ModelKind::W2v => vec![Source::W2v],
            ModelKind::Wavlm => vec![Source::Wavlm],
            ModelKind::Bert => vec![Source::Bert],
            ModelKind::Fauc => vec![Source::Fauc],
            ModelKind::AaFusion => vec![Source::Cart, Source::W2v],
            ModelKind::AaFusionWavlm => vec![Source::Cart, Source::Wavlm],
            ModelKind::Multimodal => vec![Source::W2v, Source::Cart, Source::Bert, Source::Fauc],
        }
    }

    pub fn is_fusion(self) -> bool {
        self.sources().len() > 1
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Fvtc => "fvtc",
            ModelKind::Cart => "cart",
            ModelKind::W2v => "w2v",
            ModelKind::Wavlm => "wavlm",
            ModelKind::Bert => "bert",
            ModelKind::Fauc => "fauc",
            ModelKind::AaFusion => "aa-fusion",
            ModelKind::AaFusionWavlm => "aa-fusion-wavlm",
            ModelKind::Multimodal => "multimodal",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

/// Frozen per-column standardization of a branch input.
///
/// Only the true (unpadded) rows are transformed, so padding stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(features: usize) -> Self {
        InputNorm {
            mean: vec![0.0; features],
            std: vec![1.0; features],
        }
    }

    /// Column mean and population std over all rows, rounded to f32 so that
    /// checkpoints reproduce them exactly. Near-constant columns keep std 1.
    pub fn fit<'a>(rows: impl IntoIterator<Item = ndarray::ArrayView1<'a, f32>>, features: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0f64; features];
        let mut sq = vec![0.0f64; features];
        let mut all = Vec::new();
        for r in rows {
            if r.len() != features {
                return Err(Error::Shape(format!("row of width {} for a {features}-column norm", r.len())));
            }
            for (j, &v) in r.iter().enumerate() {
                sum[j] += v as f64;
            }
            all.push(r);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Validation("cannot fit a normalization on zero rows".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for r in &all {
            for (j, &v) in r.iter().enumerate() {
                let d = v as f64 - mean[j];
                sq[j] += d * d;
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-6 {
                    sd as f32 as f64
                } else {
                    1.0
                }
            })
            .collect();
        Ok(InputNorm {
            mean: mean.iter().map(|&m| m as f32 as f64).collect(),
            std,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub spec: BranchSpec,
    pub norm: InputNorm,
    pub net: Sequential,
}

/// A trainable network mapping per-source session matrices to `18 x 3` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub spec: ModelSpec,
    pub branches: Vec<Branch>,
    pub head: Sequential,
}

/// Cached intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Array2<f64>,
    branch_caches: Vec<Vec<LayerCache>>,
    head_caches: Vec<LayerCache>,
}

impl ForwardPass {
    pub fn decisions(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.branch_caches.iter().flat_map(|c| decisions(c)).collect();
        d.extend(decisions(&self.head_caches));
        d
    }
}

/// Builds a single-branch model: branch latent then one linear layer to 54 logits.
pub fn build_unimodal(branch: BranchSpec, seed: u64) -> Result<ModelGraph> {
    ModelGraph::build(ModelSpec {
        branches: vec![branch],
        head_hidden: Vec::new(),
        seed,
    })
}

/// Builds a late-fusion model over 2 to 4 branches with head `128 -> 64 -> 54`.
pub fn build_fusion(branches: Vec<BranchSpec>, seed: u64) -> Result<ModelGraph> {
    if !(2..=4).contains(&branches.len()) {
        return Err(Error::Config(format!("fusion needs 2 to 4 branches, got {}", branches.len())));
    }
    ModelGraph::build(ModelSpec {
        branches,
        head_hidden: vec![128, 64],
        seed,
    })
}

impl ModelGraph {
    pub fn build(spec: ModelSpec) -> Result<Self> {
        if spec.branches.is_empty() {
            return Err(Error::Config("a model needs at least one branch".into()));
        }
        let mut seen = BTreeSet::new();
        for b in &spec.branches {
            if !seen.insert(b.source()) {
                return Err(Error::Config(format!("duplicate branch source {}", b.source())));
            }
            if b.s_max == 0 || b.features == 0 {
                return Err(Error::Config(format!("{} branch has an empty input shape", b.source())));
            }
        }
        if spec.head_hidden.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut branches = Vec::with_capacity(spec.branches.len());
        for b in &spec.branches {
            let layers = b.layer_specs()?;
            branches.push(Branch {
                spec: b.clone(),
                norm: InputNorm::identity(b.features),
                net: Sequential::from_specs(&format!("branch.{}", b.source()), &layers, &mut rng),
            });
        }
        let mut head_specs = Vec::new();
        let mut width = spec.head_input();
        for &h in &spec.head_hidden {
            head_specs.push(LayerSpec::Linear {
                in_features: width,
                out_features: h,
            });
            head_specs.push(LayerSpec::Relu);
            width = h;
        }
        head_specs.push(LayerSpec::Linear {
            in_features: width,
            out_features: NUM_LOGITS,
        });
        let mut head = Sequential::from_specs("head", &head_specs, &mut rng);
        if let Some(Layer::Linear(out)) = head.layers.last_mut() {
            for w in &mut out.weight.value {
                *w = (*w * OUTPUT_INIT_SCALE) as f32 as f64;
            }
        }
        Ok(ModelGraph { spec, branches, head })
    }

    pub fn sources(&self) -> Vec<Source> {
        self.spec.sources()
    }

    /// Fits each branch's input standardization on the true rows of `sessions`.
    pub fn fit_input_norm(&mut self, sessions: &[&FeatureSession]) -> Result<()> {
        for b in &mut self.branches {
            let src = b.spec.source();
            let mut rows = Vec::new();
            for s in sessions {
                let m = s.rows(src)?;
                rows.extend(m.rows().into_iter().take(b.spec.s_max));
            }
            b.norm = InputNorm::fit(rows, b.spec.features)?;
        }
        Ok(())
    }

    /// Pads a session's feature rows to each branch's `s_max`.
    pub fn inputs_for(&self, session: &FeatureSession, truncate: bool) -> Result<Inputs> {
        let mut inputs = Inputs::new();
        for b in &self.branches {
            let m = SessionMatrix::from_rows(session.rows(b.spec.source())?.view(), b.spec.s_max, truncate)?;
            inputs.insert(b.spec.source(), m);
        }
        Ok(inputs)
    }

    /// Standardized `1 x s_max x F` arrays, one per branch in branch order.
    pub fn prepare(&self, inputs: &Inputs) -> Result<Vec<Array3<f64>>> {
        let expected: BTreeSet<Source> = self.sources().into_iter().collect();
        let given: BTreeSet<Source> = inputs.keys().copied().collect();
        if expected != given {
            let missing: Vec<_> = expected.difference(&given).map(|s| s.name()).collect();
            let extra: Vec<_> = given.difference(&expected).map(|s| s.name()).collect();
            return Err(Error::Validation(format!(
                "model inputs mismatch: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        let mut out = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let m = &inputs[&b.spec.source()];
            if m.rows() != b.spec.s_max || m.cols() != b.spec.features {
                return Err(Error::Shape(format!(
                    "{} input is {}x{}, branch expects {}x{}",
                    b.spec.source(),
                    m.rows(),
                    m.cols(),
                    b.spec.s_max,
                    b.spec.features
                )));
            }
            let mut x = Array3::<f64>::zeros((1, b.spec.s_max, b.spec.features));
            for r in 0..m.true_length() {
                for c in 0..b.spec.features {
                    x[[0, r, c]] = (m.data()[[r, c]] as f64 - b.norm.mean[c]) / b.norm.std[c];
                }
            }
            out.push(x);
        }
        Ok(out)
    }

    pub fn forward(&self, inputs: &Inputs) -> Result<Array2<f64>> {
        self.forward_prepared(&self.prepare(inputs)?)
    }

    pub fn forward_prepared(&self, prepared: &[Array3<f64>]) -> Result<Array2<f64>> {
        let mut latent = Vec::with_capacity(self.spec.head_input());
        for (b, x) in self.branches.iter().zip(prepared) {
            latent.extend(b.net.infer(Activation::Spatial(x.clone()))?.into_flat()?);
        }
        let out = self.head.infer(Activation::Flat(Array1::from(latent)))?.into_flat()?;
        to_logits(out)
    }

    pub fn forward_cached(&self, prepared: &[Array3<f64>]) -> Result<ForwardPass> {
        if prepared.len() != self.branches.len() {
            return Err(Error::Shape("one prepared input per branch expected".into()));
        }
        let mut latent = Vec::with_capacity(self.spec.head_input());
        let mut branch_caches = Vec::with_capacity(self.branches.len());
        for (b, x) in self.branches.iter().zip(prepared) {
            let (z, caches) = b.net.forward(Activation::Spatial(x.clone()))?;
            latent.extend(z.into_flat()?);
            branch_caches.push(caches);
        }
        let (out, head_caches) = self.head.forward(Activation::Flat(Array1::from(latent)))?;
        Ok(ForwardPass {
            logits: to_logits(out.into_flat()?)?,
            branch_caches,
            head_caches,
        })
    }

    /// Accumulates parameter gradients given `d loss / d logits`.
    pub fn backward(&mut self, pass: &ForwardPass, grad_logits: &Array2<f64>) -> Result<()> {
        let g = Array1::from(grad_logits.iter().copied().collect::<Vec<_>>());
        let g_latent = self.head.backward(&pass.head_caches, Activation::Flat(g))?.into_flat()?;
        let mut offset = 0;
        for (b, caches) in self.branches.iter_mut().zip(&pass.branch_caches) {
            let n = b.spec.config.latent_dim;
            let part = g_latent.slice(ndarray::s![offset..offset + n]).to_owned();
            b.net.backward(caches, Activation::Flat(part))?;
            offset += n;
        }
        Ok(())
    }

    /// Loss for one session; gradients are accumulated scaled by `weight`.
    pub fn accumulate(&mut self, prepared: &[Array3<f64>], target: &SymptomVector, weight: f64) -> Result<f64> {
        let pass = self.forward_cached(prepared)?;
        let (loss, grad) = multihead_cross_entropy(pass.logits.view(), target)?;
        self.backward(&pass, &(grad * weight))?;
        Ok(loss)
    }

    /// Copies branch parameters and input norms from another model with the
    /// same branch source and layout.
    pub fn init_branch_from(&mut self, donor: &ModelGraph) -> Result<usize> {
        let mut copied = 0;
        for b in &mut self.branches {
            if let Some(d) = donor.branches.iter().find(|d| d.spec == b.spec) {
                b.net = d.net.clone();
                b.norm = d.norm.clone();
                copied += 1;
            }
        }
        if copied == 0 {
            return Err(Error::Config("donor model shares no branch with this model".into()));
        }
        Ok(copied)
    }

    /// Max relative error between analytic gradients and central differences
    /// over every parameter, in f64.
    pub fn grad_check(&mut self, inputs: &Inputs, target: &SymptomVector, eps: f64) -> Result<f64> {
        let prepared = self.prepare(inputs)?;
        let loss = |m: &ModelGraph| -> Result<(f64, Vec<usize>)> {
            let pass = m.forward_cached(&prepared)?;
            Ok((multihead_cross_entropy(pass.logits.view(), target)?.0, pass.decisions()))
        };
        let backward = |m: &mut ModelGraph| -> Result<()> { m.accumulate(&prepared, target, 1.0).map(|_| ()) };
        let (a, n) = piecewise_gradient_pair(self, loss, backward, eps)?;
        Ok(max_relative_error(&a, &n))
    }
}

fn to_logits(out: Array1<f64>) -> Result<Array2<f64>> {
    out.into_shape_with_order((NUM_SYMPTOMS, NUM_CLASSES))
        .map_err(|e| Error::Shape(format!("head output: {e}")))
}

impl Parameterized for ModelGraph {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.branches.iter().flat_map(|b| b.net.params()).collect();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.branches.iter_mut().flat_map(|b| b.net.params_mut()).collect();
        p.extend(self.head.params_mut());
        p
    }
}

/// Per-symptom argmax; ties go to the lower class.
pub fn predict(logits: &Array2<f64>) -> Result<SymptomVector> {
    if logits.dim() != (NUM_SYMPTOMS, NUM_CLASSES) {
        return Err(Error::Shape(format!("logits have shape {:?}", logits.dim())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite logits".into()));
    }
    let mut classes = [SeverityClass::NONE; NUM_SYMPTOMS];
    for (s, row) in logits.rows().into_iter().enumerate() {
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if row[c] > row[best] {
                best = c;
            }
        }
        classes[s] = SeverityClass::new(best as u8)?;
    }
    Ok(SymptomVector::new(classes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate per epoch; `eta_max` is the initial rate.
    pub schedule: SgdrSchedule,
    pub seed: u64,
    /// Drop rows beyond a branch's `s_max` instead of failing.
    pub truncate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 8,
            schedule: SgdrSchedule::default(),
            seed: 0,
            truncate: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_loss: Vec<f64>,
    pub lr: Vec<f64>,
}

/// Mini-batch Adam with the warm-restart schedule. Input norms are left as
/// they are; fit them beforehand with [`ModelGraph::fit_input_norm`].
pub fn train(model: &mut ModelGraph, sessions: &[&FeatureSession], cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    if sessions.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let prepared: Vec<Vec<Array3<f64>>> = sessions
        .iter()
        .map(|s| model.prepare(&model.inputs_for(s, cfg.truncate)?))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model);
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        let lr = sgdr_lr(epoch, &cfg.schedule);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            model.zero_grad();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let loss = model.accumulate(&prepared[i], &sessions[i].labels, w)?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "loss {loss} at epoch {epoch}, batch {bi}, session {:?}",
                        sessions[i].id
                    )));
                }
                total += loss;
            }
            adam.step(model, lr, true)?;
        }
        let mean = total / sessions.len() as f64;
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {mean:.5}");
        trace.epoch_loss.push(mean);
        trace.lr.push(lr);
    }
    model.zero_grad();
    Ok(trace)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelSidecar {
    format: String,
    spec: ModelSpec,
    epochs_trained: usize,
}

const MODEL_FORMAT: &str = "mmst-model-v1";

fn norm_names(source: Source) -> (String, String) {
    (format!("norm.{source}.mean"), format!("norm.{source}.std"))
}

pub fn save_checkpoint(model: &ModelGraph, epochs_trained: usize, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let sidecar = ModelSidecar {
        format: MODEL_FORMAT.into(),
        spec: model.spec.clone(),
        epochs_trained,
    };
    checkpoint::write_dir(dir, &sidecar, &model.params())?;
    for b in &model.branches {
        let (mean, std) = norm_names(b.spec.source());
        let as_f32 = |v: &[f64]| Tensor::new(vec![v.len()], v.iter().map(|&x| x as f32).collect());
        checkpoint::write_plain(dir, &mean, &as_f32(&b.norm.mean)?)?;
        checkpoint::write_plain(dir, &std, &as_f32(&b.norm.std)?)?;
    }
    Ok(())
}

/// Loads a model and the number of epochs it was trained for.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelGraph, usize)> {
    let dir = dir.as_ref();
    let sidecar: ModelSidecar = checkpoint::read_sidecar(dir)?;
    if sidecar.format != MODEL_FORMAT {
        return Err(Error::Format(format!("unexpected checkpoint format {:?}", sidecar.format)));
    }
    let mut model = ModelGraph::build(sidecar.spec)?;
    checkpoint::read_params(dir, model.params_mut())?;
    for b in &mut model.branches {
        let (mean, std) = norm_names(b.spec.source());
        let read = |name: &str| -> Result<Vec<f64>> {
            let t = checkpoint::read_plain(dir, name)?;
            if t.dims() != [b.spec.features] {
                return Err(Error::Shape(format!("{name} has dims {:?}", t.dims())));
            }
            Ok(t.data().iter().map(|&v| v as f64).collect())
        };
        b.norm = InputNorm {
            mean: read(&mean)?,
            std: read(&std)?,
        };
    }
    Ok((model, sidecar.epochs_trained))
}

/// [`load_checkpoint`], rejecting a model whose branch sources differ from `expected`.
pub fn load_checkpoint_for(dir: impl AsRef<Path>, expected: &[Source]) -> Result<(ModelGraph, usize)> {
    let (model, epochs) = load_checkpoint(dir)?;
    if model.sources() != expected {
        return Err(Error::Config(format!(
            "checkpoint has branches {:?}, expected {:?}",
            model.sources(),
            expected
        )));
    }
    Ok((model, epochs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_branch(source: Source, s_max: usize, f: usize) -> BranchSpec {
        BranchSpec::new(
            BranchConfig {
                source,
                conv_layers: vec![ConvLayerConfig {
                    out_channels: 2,
                    kernel: 3,
                }],
                pool: PoolMode::Max,
                pool_kernel: 2,
                latent_dim: 4,
            },
            s_max,
            f,
        )
    }

    fn random_session(rng: &mut ChaCha8Rng, sources: &[(Source, usize, usize)]) -> FeatureSession {
        let labels: Vec<u8> = (0..NUM_SYMPTOMS).map(|_| rng.gen_range(0..3)).collect();
        FeatureSession {
            id: format!("s{}", rng.gen::<u32>()),
            subject: "p".into(),
            labels: SymptomVector::from_slice(&labels).unwrap(),
            features: sources
                .iter()
                .map(|&(src, rows, f)| (src, Array2::from_shape_fn((rows, f), |_| rng.gen_range(-1.0..1.0f32))))
                .collect(),
        }
    }

    #[test]
    fn default_branch_on_16x32() {
        let m = build_unimodal(BranchSpec::new(BranchConfig::default_for(Source::W2v), 16, 32), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = random_session(&mut rng, &[(Source::W2v, 16, 32)]);
        let logits = m.forward(&m.inputs_for(&s, false).unwrap()).unwrap();
        assert_eq!(logits.dim(), (18, 3));
        assert!(logits.iter().all(|v| v.is_finite()));
        let again = build_unimodal(BranchSpec::new(BranchConfig::default_for(Source::W2v), 16, 32), 3).unwrap();
        assert_eq!(m, again);
    }

    #[test]
    fn collapse_is_a_config_error() {
        let spec = BranchSpec::new(BranchConfig::default_for(Source::Bert).with_kernel(6), 4, 4);
        match build_unimodal(spec, 0) {
            Err(Error::Config(msg)) => assert!(msg.contains("1x4x4"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
        let spec = BranchSpec::new(BranchConfig::default_for(Source::Fvtc).with_kernel(6), 16, 162);
        assert!(matches!(build_unimodal(spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn fusion_construction() {
        let mut a = small_branch(Source::Cart, 8, 8);
        a.config.latent_dim = 32;
        let mut b = small_branch(Source::W2v, 8, 8);
        b.config.latent_dim = 64;
        let m = build_fusion(vec![a.clone(), b], 0).unwrap();
        assert_eq!(m.spec.head_input(), 96);
        match &m.head.layers[0] {
            crate::nn::Layer::Linear(l) => assert_eq!(l.in_features, 96),
            other => panic!("{other:?}"),
        }
        let four: Vec<BranchSpec> = ModelKind::Multimodal
            .sources()
            .into_iter()
            .map(|s| small_branch(s, 8, 8))
            .collect();
        assert_eq!(build_fusion(four, 0).unwrap().sources(), ModelKind::Multimodal.sources());
        assert!(build_fusion(vec![a.clone()], 0).is_err());
        assert!(build_fusion(vec![a.clone(), a], 0).is_err());
        assert!(build_fusion(vec![], 0).is_err());
    }

    #[test]
    fn zero_model_outputs_final_bias() {
        let mut m = build_unimodal(small_branch(Source::Fauc, 6, 6), 1).unwrap();
        for p in m.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let bias: Vec<f64> = (0..NUM_LOGITS).map(|i| i as f64 * 0.25 - 3.0).collect();
        m.params_mut().pop().unwrap().value.clone_from(&bias);
        let mut inputs = Inputs::new();
        inputs.insert(
            Source::Fauc,
            SessionMatrix::from_rows(Array2::<f32>::zeros((6, 6)).view(), 6, false).unwrap(),
        );
        let logits = m.forward(&inputs).unwrap();
        assert_eq!(logits.iter().copied().collect::<Vec<_>>(), bias);
        assert_eq!(m.forward(&inputs).unwrap(), logits);
    }

    #[test]
    fn input_set_must_match() {
        let m = build_unimodal(small_branch(Source::Fauc, 6, 6), 1).unwrap();
        let mat = SessionMatrix::from_rows(Array2::<f32>::zeros((6, 6)).view(), 6, false).unwrap();
        assert!(m.forward(&Inputs::new()).is_err());
        let mut extra = Inputs::new();
        extra.insert(Source::Fauc, mat.clone());
        extra.insert(Source::Bert, mat);
        assert!(m.forward(&extra).is_err());
        let mut wrong = Inputs::new();
        wrong.insert(
            Source::Fauc,
            SessionMatrix::from_rows(Array2::<f32>::zeros((6, 5)).view(), 6, false).unwrap(),
        );
        assert!(matches!(m.forward(&wrong), Err(Error::Shape(_))));
    }

    // direct loop implementations used as a composition oracle
    fn naive_conv(x: &Array3<f64>, w: &[f64], b: &[f64], out_c: usize, k: usize) -> Array3<f64> {
        let (c, h, wd) = x.dim();
        Array3::from_shape_fn((out_c, h - k + 1, wd - k + 1), |(o, y, xx)| {
            let mut acc = b[o];
            for i in 0..c {
                for dy in 0..k {
                    for dx in 0..k {
                        acc += w[((o * c + i) * k + dy) * k + dx] * x[[i, y + dy, xx + dx]];
                    }
                }
            }
            acc
        })
    }

    fn naive_maxpool(x: &Array3<f64>, k: usize) -> Array3<f64> {
        let (c, h, w) = x.dim();
        Array3::from_shape_fn((c, h / k, w / k), |(i, y, xx)| {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..k {
                for dx in 0..k {
                    m = m.max(x[[i, y * k + dy, xx * k + dx]]);
                }
            }
            m
        })
    }

    fn naive_linear(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        (0..b.len())
            .map(|o| b[o] + (0..x.len()).map(|i| w[o * x.len() + i] * x[i]).sum::<f64>())
            .collect()
    }

    #[test]
    fn forward_matches_hand_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = small_branch(Source::Bert, 7, 9);
        let m = build_unimodal(spec, 4).unwrap();
        let s = random_session(&mut rng, &[(Source::Bert, 5, 9)]);
        let logits = m.forward(&m.inputs_for(&s, false).unwrap()).unwrap();

        let p = m.params();
        let mut x = Array3::zeros((1, 7, 9));
        x.slice_mut(ndarray::s![0, ..5, ..]).assign(&s.features[&Source::Bert].mapv(|v| v as f64));
        let conv = naive_conv(&x, &p[0].value, &p[1].value, 2, 3).mapv(|v| v.max(0.0));
        let pooled = naive_maxpool(&conv, 2);
        let flat: Vec<f64> = pooled.iter().copied().collect();
        let latent: Vec<f64> = naive_linear(&flat, &p[2].value, &p[3].value).into_iter().map(|v| v.max(0.0)).collect();
        let out = naive_linear(&latent, &p[4].value, &p[5].value);
        for (a, b) in logits.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn predict_rules() {
        let mut l = Array2::<f64>::zeros((18, 3));
        l[[0, 1]] = 1.0;
        l[[1, 0]] = 2.0;
        l[[1, 1]] = 2.0;
        let p = predict(&l).unwrap();
        assert_eq!(p.classes()[0].value(), 1);
        assert_eq!(p.classes()[1].value(), 0);
        assert_eq!(p.classes()[2].value(), 0);
        l[[3, 2]] = f64::NAN;
        assert!(predict(&l).is_err());
    }

    #[test]
    fn predict_matches_argmax_and_ignores_row_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let l = Array2::from_shape_fn((18, 3), |_| rng.gen_range(-5.0..5.0));
            let p = predict(&l).unwrap();
            for s in 0..18 {
                let row = l.row(s);
                let want = (0..3).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                assert_eq!(p.classes()[s].index(), want);
            }
            let mut shifted = l.clone();
            for mut row in shifted.rows_mut() {
                let c: f64 = rng.gen_range(-100.0..100.0);
                row.mapv_inplace(|v| v + c);
            }
            // shifts can reorder near-ties through rounding; compare on rows with a clear winner
            let q = predict(&shifted).unwrap();
            for s in 0..18 {
                let mut r: Vec<f64> = l.row(s).to_vec();
                r.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if r[0] - r[1] > 1e-9 {
                    assert_eq!(p.classes()[s], q.classes()[s]);
                }
            }
        }
    }

    #[test]
    fn branch_independence() {
        let sources = [Source::W2v, Source::Fauc];
        let mut m = build_fusion(sources.iter().map(|&s| small_branch(s, 6, 6)).collect(), 2).unwrap();
        for p in m.branches[1].net.params_mut() {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = random_session(&mut rng, &[(Source::W2v, 6, 6), (Source::Fauc, 6, 6)]);
        let mut inputs = m.inputs_for(&base, false).unwrap();
        inputs.insert(
            Source::Fauc,
            SessionMatrix::from_rows(Array2::<f32>::zeros((6, 6)).view(), 6, false).unwrap(),
        );
        let reference = m.forward(&inputs).unwrap();
        // perturbing the live branch changes logits
        let other = random_session(&mut rng, &[(Source::W2v, 6, 6)]);
        let mut changed = inputs.clone();
        changed.insert(Source::W2v, SessionMatrix::from_rows(other.features[&Source::W2v].view(), 6, false).unwrap());
        assert_ne!(m.forward(&changed).unwrap(), reference);
        // a zeroed branch contributes a constant (zero) latent whatever its input
        let noise = random_session(&mut rng, &[(Source::Fauc, 6, 6)]);
        inputs.insert(Source::Fauc, SessionMatrix::from_rows(noise.features[&Source::Fauc].view(), 6, false).unwrap());
        assert_eq!(m.forward(&inputs).unwrap(), reference);
    }

    #[test]
    fn unimodal_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = build_unimodal(small_branch(Source::W2v, 8, 7), 5).unwrap();
        let s = random_session(&mut rng, &[(Source::W2v, 6, 7)]);
        m.fit_input_norm(&[&s]).unwrap();
        let inputs = m.inputs_for(&s, false).unwrap();
        let err = m.grad_check(&inputs, &s.labels, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fusion_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let srcs = [(Source::Cart, 7, 6), (Source::Bert, 6, 8)];
        let mut m = ModelGraph::build(ModelSpec {
            branches: srcs.iter().map(|&(s, r, f)| small_branch(s, r, f)).collect(),
            head_hidden: vec![6],
            seed: 9,
        })
        .unwrap();
        let s = random_session(&mut rng, &srcs);
        let inputs = m.inputs_for(&s, false).unwrap();
        let err = m.grad_check(&inputs, &s.labels, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn norm_keeps_padding_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = build_unimodal(small_branch(Source::W2v, 8, 5), 0).unwrap();
        let s = random_session(&mut rng, &[(Source::W2v, 3, 5)]);
        let t = random_session(&mut rng, &[(Source::W2v, 6, 5)]);
        m.fit_input_norm(&[&s, &t]).unwrap();
        let x = m.prepare(&m.inputs_for(&s, false).unwrap()).unwrap();
        assert!(x[0].slice(ndarray::s![0, 3.., ..]).iter().all(|&v| v == 0.0));
        let n = &m.branches[0].norm;
        let col0: Vec<f64> = s.features[&Source::W2v]
            .column(0)
            .iter()
            .chain(t.features[&Source::W2v].column(0).iter())
            .map(|&v| v as f64)
            .collect();
        let mean = col0.iter().sum::<f64>() / 9.0;
        assert!((n.mean[0] - mean).abs() < 1e-6);
    }

    fn separable_set(n: usize) -> Vec<FeatureSession> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..n)
            .map(|i| {
                let class = (i % 3) as u8;
                let mut s = random_session(&mut rng, &[(Source::Bert, 6, 6)]);
                s.labels = SymptomVector::from_slice(&[class; 18]).unwrap();
                s.features
                    .get_mut(&Source::Bert)
                    .unwrap()
                    .column_mut(0)
                    .mapv_inplace(|v| v * 0.1 + class as f32 * 2.0);
                s
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_and_follows_schedule() {
        let data = separable_set(10);
        let refs: Vec<&FeatureSession> = data.iter().collect();
        let mut m = build_unimodal(small_branch(Source::Bert, 6, 6), 7).unwrap();
        m.fit_input_norm(&refs).unwrap();
        let prepared: Vec<_> = refs.iter().map(|s| m.prepare(&m.inputs_for(s, false).unwrap()).unwrap()).collect();
        let initial = refs
            .iter()
            .zip(&prepared)
            .map(|(s, x)| multihead_cross_entropy(m.forward_prepared(x).unwrap().view(), &s.labels).unwrap().0)
            .sum::<f64>()
            / 10.0;
        let cfg = TrainConfig {
            epochs: 50,
            ..Default::default()
        };
        let trace = train(&mut m, &refs, &cfg).unwrap();
        let after = refs
            .iter()
            .zip(&prepared)
            .map(|(s, x)| multihead_cross_entropy(m.forward_prepared(x).unwrap().view(), &s.labels).unwrap().0)
            .sum::<f64>()
            / 10.0;
        assert!(after < initial, "{initial} -> {after}");
        assert_eq!(trace.epoch_loss.len(), 50);
        for (e, lr) in trace.lr.iter().enumerate() {
            assert_eq!(*lr, sgdr_lr(e, &cfg.schedule));
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let data = separable_set(4);
        let refs: Vec<&FeatureSession> = data.iter().collect();
        let mut m = build_unimodal(small_branch(Source::Bert, 6, 6), 7).unwrap();
        let before = m.clone();
        let trace = train(
            &mut m,
            &refs,
            &TrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(trace.epoch_loss.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let data = separable_set(4);
        let refs: Vec<&FeatureSession> = data.iter().collect();
        let mut m = build_unimodal(small_branch(Source::Bert, 6, 6), 7).unwrap();
        m.fit_input_norm(&refs).unwrap();
        train(
            &mut m,
            &refs,
            &TrainConfig {
                epochs: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, 3, dir.path()).unwrap();
        let (back, epochs) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(epochs, 3);
        for s in &refs {
            let inputs = m.inputs_for(s, false).unwrap();
            let a = m.forward(&inputs).unwrap();
            let b = back.forward(&inputs).unwrap();
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(load_checkpoint_for(dir.path(), &ModelKind::Multimodal.sources()).is_err());

        let f = dir.path().join("head.0.weight.mmst");
        let bytes = std::fs::read(&f).unwrap();
        std::fs::write(&f, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format(_))));

        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(empty.path()), Err(Error::MissingCheckpoint(_))));
    }

    #[test]
    fn two_branch_checkpoint_rejected_for_four() {
        let m = build_fusion(vec![small_branch(Source::Cart, 6, 6), small_branch(Source::W2v, 6, 6)], 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, 0, dir.path()).unwrap();
        assert!(load_checkpoint_for(dir.path(), &ModelKind::AaFusion.sources()).is_ok());
        assert!(matches!(
            load_checkpoint_for(dir.path(), &ModelKind::Multimodal.sources()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn model_kind_names_roundtrip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("video".parse::<ModelKind>().is_err());
        assert_eq!(ModelKind::AaFusion.sources(), vec![Source::Cart, Source::W2v]);
    }
}

//! Synthetic corpora with realistic label marginals and planted signals.
//!
//! Every session gets raw articulatory (`tv`) and facial (`fau`) channel
//! series plus per-segment speech embeddings (`w2v`, `wavlm`) and per-sentence
//! text embeddings (`bert`). Base signals carry no label information. A
//! [`PlantSpec`] ties one symptom's severity class to one modality:
//!
//! * for `fvtc`/`fauc` a shared smoothed driver is mixed into the channel pair
//!   owned by the symptom, raising their correlation;
//! * for `w2v`/`wavlm`/`bert` the column owned by the symptom is shifted.
//!
//! The planted intensity is `effect[class]` plus per-session Gaussian jitter,
//! drawn independently for every modality, so single modalities are noisy
//! views and combining them helps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestEntry};
use crate::session::Source;
use crate::symptom::{SeverityClass, SymptomId, SymptomVector, NUM_CLASSES, NUM_SYMPTOMS};
use crate::tensor::{write_tensor, Tensor};

/// Class counts per symptom, all rows summing to the same corpus size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarginalTable {
    pub counts: Vec<[u32; NUM_CLASSES]>,
}

/// BPRS score frequencies (scores 1..=6) over the reference corpus of 140 sessions.
const SCORE_FREQUENCIES: [[u32; 6]; NUM_SYMPTOMS] = [
    [45, 44, 39, 10, 2, 0],
    [25, 39, 52, 20, 2, 2],
    [82, 33, 20, 4, 0, 1],
    [82, 24, 4, 11, 11, 8],
    [67, 35, 22, 14, 2, 0],
    [56, 42, 34, 8, 0, 0],
    [72, 12, 23, 15, 12, 6],
    [77, 6, 13, 10, 24, 10],
    [74, 11, 8, 20, 24, 3],
    [116, 19, 5, 0, 0, 0],
    [51, 52, 28, 9, 0, 0],
    [65, 32, 23, 9, 11, 0],
    [82, 40, 16, 2, 0, 0],
    [118, 11, 10, 1, 0, 0],
    [104, 18, 17, 1, 0, 0],
    [121, 15, 2, 2, 0, 0],
    [85, 19, 28, 8, 0, 0],
    [115, 9, 11, 5, 0, 0],
];

/// Score frequencies folded into severity classes.
pub fn default_marginals() -> MarginalTable {
    let counts = SCORE_FREQUENCIES
        .iter()
        .map(|row| {
            let mut c = [0u32; NUM_CLASSES];
            for (i, &n) in row.iter().enumerate() {
                let class = crate::symptom::map_bprs_to_class(i as u8 + 1).expect("scores 1..=6");
                c[class.index()] += n;
            }
            c
        })
        .collect();
    MarginalTable { counts }
}

impl MarginalTable {
    pub fn validate(&self) -> Result<u32> {
        if self.counts.len() != NUM_SYMPTOMS {
            return Err(Error::Validation(format!("{} marginal rows, need 18", self.counts.len())));
        }
        let total: u32 = self.counts[0].iter().sum();
        if total == 0 || self.counts.iter().any(|r| r.iter().sum::<u32>() != total) {
            return Err(Error::Validation("marginal rows must share a positive total".into()));
        }
        Ok(total)
    }

    /// Class counts for `n` sessions by largest-remainder rounding; ties in the
    /// remainder go to the lower class.
    pub fn scaled(&self, n: usize) -> Result<Vec<[usize; NUM_CLASSES]>> {
        let total = self.validate()? as u64;
        Ok(self
            .counts
            .iter()
            .map(|row| {
                let mut out = [0usize; NUM_CLASSES];
                let mut rem = [0u64; NUM_CLASSES];
                for c in 0..NUM_CLASSES {
                    let q = n as u64 * row[c] as u64;
                    out[c] = (q / total) as usize;
                    rem[c] = q % total;
                }
                let mut left = n - out.iter().sum::<usize>();
                let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
                order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
                for &c in order.iter().cycle() {
                    if left == 0 {
                        break;
                    }
                    out[c] += 1;
                    left -= 1;
                }
                out
            })
            .collect())
    }
}

/// Labels for `n` sessions whose per-symptom class counts follow `m`, assigned
/// to sessions by an independent seeded shuffle per symptom.
pub fn sample_labels(m: &MarginalTable, n: usize, seed: u64) -> Result<Vec<SymptomVector>> {
    if n == 0 {
        return Err(Error::Validation("need at least one session".into()));
    }
    let scaled = m.scaled(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns = Vec::with_capacity(NUM_SYMPTOMS);
    for row in &scaled {
        let mut col: Vec<u8> = (0..NUM_CLASSES).flat_map(|c| std::iter::repeat_n(c as u8, row[c])).collect();
        col.shuffle(&mut rng);
        columns.push(col);
    }
    (0..n)
        .map(|i| {
            let mut classes = [SeverityClass::NONE; NUM_SYMPTOMS];
            for s in 0..NUM_SYMPTOMS {
                classes[s] = SeverityClass::new(columns[s][i])?;
            }
            Ok(SymptomVector::new(classes))
        })
        .collect()
}

/// Couples one symptom's class to one modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub symptom: SymptomId,
    pub modality: Source,
    /// Planted intensity per severity class; strictly increasing.
    pub effect: [f64; NUM_CLASSES],
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modality == Source::Cart {
            return Err(Error::Config(
                "cart features are derived from fvtc and cannot carry their own plant".into(),
            ));
        }
        if !self.effect.iter().all(|e| e.is_finite()) || !self.effect.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "plant effect for {:?} must be finite and strictly increasing, got {:?}",
                self.symptom, self.effect
            )));
        }
        Ok(())
    }
}

/// Default planting: hallucination and unusual thought content in speech
/// only, emotional withdrawal in facial coordination only, everything else
/// moderately in every modality.
pub fn default_plants(strong: f64, moderate: f64) -> Vec<PlantSpec> {
    let speech = [Source::Fvtc, Source::W2v, Source::Wavlm];
    let everywhere = [Source::Fvtc, Source::W2v, Source::Wavlm, Source::Bert, Source::Fauc];
    let mut plants = Vec::new();
    for s in SymptomId::ALL {
        let (modalities, k): (&[Source], f64) = match s {
            SymptomId::Hallucination | SymptomId::UnusualThoughtContent => (&speech, strong),
            SymptomId::EmotionalWithdrawal => (&[Source::Fauc], strong),
            _ => (&everywhere, moderate),
        };
        for &modality in modalities {
            plants.push(PlantSpec {
                symptom: s,
                modality,
                effect: [0.0, k, 2.0 * k],
            });
        }
    }
    plants
}

/// Class-1 intensity of the strong, modality-specific plants.
pub const DEFAULT_STRONG: f64 = 4.0;
/// Class-1 intensity of the plants shared by every modality.
pub const DEFAULT_MODERATE: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_sessions: usize,
    pub n_subjects: usize,
    pub seed: u64,
    pub tv_channels: usize,
    pub tv_rate_hz: f64,
    pub fau_channels: usize,
    pub fau_rate_hz: f64,
    pub seg_seconds: f64,
    /// Inclusive range of 40-second segments per session.
    pub segments: (usize, usize),
    /// Inclusive range of transcript sentences per session.
    pub sentences: (usize, usize),
    pub w2v_dim: usize,
    pub wavlm_dim: usize,
    pub bert_dim: usize,
    /// Moving-average width of the base noise, in frames.
    pub smoothing: usize,
    /// Per-session, per-modality standard deviation added to planted intensities.
    pub jitter: f64,
    /// Driver amplitude is `gain * sqrt(max(intensity, 0))`.
    pub coupling_gain: f64,
    /// Column shift per unit intensity for embedding plants.
    pub embedding_gain: f64,
    pub plants: Vec<PlantSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sessions: 140,
            n_subjects: 39,
            seed: 0,
            tv_channels: crate::coordination::DEFAULT_FVTC_CHANNELS,
            tv_rate_hz: 100.0,
            fau_channels: crate::coordination::DEFAULT_FAUC_CHANNELS,
            fau_rate_hz: 30.0,
            seg_seconds: 40.0,
            segments: (8, 16),
            sentences: (10, 24),
            w2v_dim: 768,
            wavlm_dim: 768,
            bert_dim: 768,
            smoothing: 5,
            jitter: 1.2,
            coupling_gain: 1.0,
            embedding_gain: 1.0,
            plants: default_plants(DEFAULT_STRONG, DEFAULT_MODERATE),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sessions == 0 || self.n_subjects == 0 {
            return Err(Error::Config("need at least one session and one subject".into()));
        }
        if self.segments.0 == 0 || self.segments.0 > self.segments.1 {
            return Err(Error::Config(format!("bad segment range {:?}", self.segments)));
        }
        if self.sentences.0 == 0 || self.sentences.0 > self.sentences.1 {
            return Err(Error::Config(format!("bad sentence range {:?}", self.sentences)));
        }
        for (name, dim) in [("w2v", self.w2v_dim), ("wavlm", self.wavlm_dim), ("bert", self.bert_dim)] {
            if dim < NUM_SYMPTOMS {
                return Err(Error::Config(format!(
                    "{name} dimension {dim} leaves no dedicated column per symptom"
                )));
            }
        }
        for (name, c) in [("tv", self.tv_channels), ("fau", self.fau_channels)] {
            if c < 2 {
                return Err(Error::Config(format!("{name} needs at least 2 channels")));
            }
        }
        if !(self.tv_rate_hz > 0.0 && self.fau_rate_hz > 0.0 && self.seg_seconds > 0.0) {
            return Err(Error::Config("frame rates and segment length must be positive".into()));
        }
        if self.smoothing == 0 || self.jitter.is_nan() || self.jitter < 0.0 {
            return Err(Error::Config("smoothing must be positive and jitter non-negative".into()));
        }
        for p in &self.plants {
            p.validate()?;
        }
        Ok(())
    }

    pub fn segment_frames(&self, rate_hz: f64) -> usize {
        (self.seg_seconds * rate_hz).floor() as usize
    }
}

/// One session's raw modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSession {
    /// `C x T` articulatory channels.
    pub tv: Array2<f32>,
    /// `C x T` facial action unit channels.
    pub fau: Array2<f32>,
    pub w2v: Array2<f32>,
    pub wavlm: Array2<f32>,
    pub bert: Array2<f32>,
}

/// Distinct channel pair owned by symptom `s` in a `c`-channel series.
pub fn plant_pair(s: SymptomId, c: usize) -> (usize, usize) {
    let i = s.index();
    let a = i % c;
    let offset = 1 + (i / c) % (c - 1);
    (a, (a + offset) % c)
}

fn smoothed_noise(rng: &mut ChaCha8Rng, len: usize, width: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..len + width - 1).map(|_| rng.sample(StandardNormal)).collect();
    let scale = 1.0 / (width as f64).sqrt();
    (0..len).map(|t| raw[t..t + width].iter().sum::<f64>() * scale).collect()
}

fn coupled_series(
    rng: &mut ChaCha8Rng,
    channels: usize,
    frames: usize,
    width: usize,
    couplings: &[(SymptomId, f64)],
) -> Array2<f32> {
    let mut x = Array2::<f64>::zeros((channels, frames));
    for mut row in x.axis_iter_mut(Axis(0)) {
        for (v, n) in row.iter_mut().zip(smoothed_noise(rng, frames, width)) {
            *v = n;
        }
    }
    for &(s, amp) in couplings {
        let driver = smoothed_noise(rng, frames, width);
        let (i, j) = plant_pair(s, channels);
        for ch in [i, j] {
            for (v, d) in x.row_mut(ch).iter_mut().zip(&driver) {
                *v += amp * d;
            }
        }
    }
    x.mapv(|v| v as f32)
}

/// Columns owned by symptom `s` in a `dim`-wide embedding: consecutive blocks
/// of `dim / 18` columns in symptom order; leftover columns carry no plant.
pub fn plant_columns(s: SymptomId, dim: usize) -> std::ops::Range<usize> {
    let block = dim / NUM_SYMPTOMS;
    s.index() * block..(s.index() + 1) * block
}

fn shifted_embeddings(rng: &mut ChaCha8Rng, rows: usize, dim: usize, shifts: &[(SymptomId, f64)]) -> Array2<f32> {
    let mut x = Array2::from_shape_fn((rows, dim), |_| rng.sample::<f64, _>(StandardNormal));
    for &(s, shift) in shifts {
        for c in plant_columns(s, dim) {
            x.column_mut(c).mapv_inplace(|v| v + shift);
        }
    }
    x.mapv(|v| v as f32)
}

/// Generates one session. `stream` selects an independent random stream so
/// sessions can be produced in any order.
pub fn synth_session(labels: &SymptomVector, cfg: &SynthConfig, stream: u64) -> Result<RawSession> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream + 1);
    let n_seg = rng.gen_range(cfg.segments.0..=cfg.segments.1);
    let n_sent = rng.gen_range(cfg.sentences.0..=cfg.sentences.1);

    let mut intensity: BTreeMap<Source, Vec<(SymptomId, f64)>> = BTreeMap::new();
    for p in &cfg.plants {
        let jitter: f64 = rng.sample(StandardNormal);
        let z = p.effect[labels.get(p.symptom).index()] + cfg.jitter * jitter;
        intensity.entry(p.modality).or_default().push((p.symptom, z));
    }
    let couplings = |src: Source| -> Vec<(SymptomId, f64)> {
        intensity
            .get(&src)
            .map(|v| v.iter().map(|&(s, z)| (s, cfg.coupling_gain * z.max(0.0).sqrt())).collect())
            .unwrap_or_default()
    };
    let shifts = |src: Source| -> Vec<(SymptomId, f64)> {
        intensity
            .get(&src)
            .map(|v| v.iter().map(|&(s, z)| (s, cfg.embedding_gain * z)).collect())
            .unwrap_or_default()
    };

    let tv_frames = n_seg * cfg.segment_frames(cfg.tv_rate_hz);
    let fau_frames = n_seg * cfg.segment_frames(cfg.fau_rate_hz);
    Ok(RawSession {
        tv: coupled_series(&mut rng, cfg.tv_channels, tv_frames, cfg.smoothing, &couplings(Source::Fvtc)),
        fau: coupled_series(&mut rng, cfg.fau_channels, fau_frames, cfg.smoothing, &couplings(Source::Fauc)),
        w2v: shifted_embeddings(&mut rng, n_seg, cfg.w2v_dim, &shifts(Source::W2v)),
        wavlm: shifted_embeddings(&mut rng, n_seg, cfg.wavlm_dim, &shifts(Source::Wavlm)),
        bert: shifted_embeddings(&mut rng, n_sent, cfg.bert_dim, &shifts(Source::Bert)),
    })
}

/// Raw modality names as they appear in manifests.
pub const RAW_MODALITIES: [&str; 5] = ["tv", "fau", "w2v", "wavlm", "bert"];

impl RawSession {
    fn parts(&self) -> [(&'static str, &Array2<f32>); 5] {
        [
            ("tv", &self.tv),
            ("fau", &self.fau),
            ("w2v", &self.w2v),
            ("wavlm", &self.wavlm),
            ("bert", &self.bert),
        ]
    }

    /// Writes every modality under `dir/<id>/` and returns the manifest entry.
    pub fn write(&self, dir: &Path, id: &str, subject: &str, labels: &SymptomVector) -> Result<ManifestEntry> {
        let mut modalities = BTreeMap::new();
        let mut lengths = BTreeMap::new();
        for (name, data) in self.parts() {
            let rel = format!("{id}/{name}.mmst");
            write_tensor(&Tensor::from_array2(data)?, dir.join(&rel))?;
            modalities.insert(name.to_string(), rel);
            // channel series are stored C x T; everything else row-major per segment/sentence
            let len = if matches!(name, "tv" | "fau") { data.ncols() } else { data.nrows() };
            lengths.insert(name.to_string(), len);
        }
        Ok(ManifestEntry {
            id: id.into(),
            subject: subject.into(),
            labels: labels.classes().iter().map(|c| c.value()).collect(),
            modalities,
            lengths,
        })
    }
}

pub fn session_id(i: usize) -> String {
    format!("s{i:03}")
}

pub fn subject_id(i: usize, n_subjects: usize) -> String {
    format!("p{:02}", i % n_subjects)
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes a full corpus under `out_dir` and returns the manifest path.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let labels = sample_labels(&default_marginals(), cfg.n_sessions, cfg.seed)?;
    let sessions: Vec<ManifestEntry> = labels
        .par_iter()
        .enumerate()
        .map(|(i, l)| {
            let raw = synth_session(l, cfg, i as u64)?;
            raw.write(out_dir, &session_id(i), &subject_id(i, cfg.n_subjects), l)
        })
        .collect::<Result<_>>()?;
    let path = out_dir.join(MANIFEST_FILE);
    Manifest { sessions }.write(&path)?;
    Ok(path)
}

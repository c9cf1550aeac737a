//! Time-delay channel-correlation tensors.
//!
//! For a `C`-channel series and a delay grid `(delta, D)`, entry `[d, i, j]` is
//! the Pearson correlation between channel `i` at frame `t` and channel `j` at
//! frame `t + d * delta`, taken over every `t` where both frames exist. The same
//! mechanism serves articulatory (FVTC) and facial action unit (FAUC) series.

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default articulatory channel count: six vocal tract variables plus three source channels.
pub const DEFAULT_FVTC_CHANNELS: usize = 9;
/// Default facial action unit channel count.
pub const DEFAULT_FAUC_CHANNELS: usize = 17;

/// A multichannel series, channels along rows and frames along columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSeries {
    values: Array2<f64>,
    frame_rate_hz: f64,
}

impl ChannelSeries {
    pub fn new(values: Array2<f64>, frame_rate_hz: f64) -> Result<Self> {
        let (c, t) = values.dim();
        if c == 0 {
            return Err(Error::Validation("series has no channels".into()));
        }
        if t < 2 {
            return Err(Error::Validation(format!("series has {t} frames, need at least 2")));
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::Validation(format!("frame rate {frame_rate_hz} must be positive")));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Validation("series contains NaN".into()));
        }
        Ok(ChannelSeries { values, frame_rate_hz })
    }

    /// Builds a series from a `C x T` tensor.
    pub fn from_tensor(t: &Tensor, frame_rate_hz: f64) -> Result<Self> {
        let a = t.to_array2()?;
        ChannelSeries::new(a.mapv(f64::from), frame_rate_hz)
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }
}

/// Delay step (in frames) and number of delays, starting at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayGrid {
    pub delta: usize,
    pub count: usize,
}

impl Default for DelayGrid {
    fn default() -> Self {
        DelayGrid { delta: 7, count: 15 }
    }
}

impl DelayGrid {
    pub fn new(delta: usize, count: usize) -> Result<Self> {
        if delta == 0 || count == 0 {
            return Err(Error::Config(format!("delay grid needs positive delta and count, got ({delta}, {count})")));
        }
        Ok(DelayGrid { delta, count })
    }

    /// Largest shift applied, in frames.
    pub fn span(&self) -> usize {
        (self.count - 1) * self.delta
    }

    /// Fewest frames a series needs so that every delay keeps two overlapping frames.
    pub fn min_frames(&self) -> usize {
        self.span() + 2
    }
}

/// `D x C x C` delayed correlation tensor, entries in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinationTensor {
    values: Array3<f64>,
}

impl CoordinationTensor {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (_, c1, c2) = values.dim();
        if c1 != c2 {
            return Err(Error::Shape(format!("channel axes differ: {c1} vs {c2}")));
        }
        if values.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Validation("correlation entry outside [-1, 1]".into()));
        }
        Ok(CoordinationTensor { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn delays(&self) -> usize {
        self.values.dim().0
    }

    pub fn channels(&self) -> usize {
        self.values.dim().1
    }

    pub fn get(&self, d: usize, i: usize, j: usize) -> f64 {
        self.values[[d, i, j]]
    }
}

/// Centered window of one channel plus its sum of squares; `None` marks a constant window.
struct Centered {
    dev: Vec<f64>,
    ss: Option<f64>,
}

fn center(window: ArrayView1<'_, f64>) -> Centered {
    let n = window.len() as f64;
    let first = window[0];
    let constant = window.iter().all(|&v| v == first);
    let mean = window.sum() / n;
    let dev: Vec<f64> = window.iter().map(|&v| v - mean).collect();
    let ss = if constant { None } else { Some(dev.iter().map(|v| v * v).sum()) };
    Centered { dev, ss }
}

/// Computes the delayed channel-correlation tensor of `x` over grid `g`.
///
/// Pairs involving a channel that is constant over the overlap window get 0.
pub fn delayed_correlation(x: &ChannelSeries, g: &DelayGrid) -> Result<CoordinationTensor> {
    let c = x.channels();
    let t = x.frames();
    if g.delta == 0 || g.count == 0 {
        return Err(Error::Config("delay grid needs positive delta and count".into()));
    }
    if g.span() + 2 > t {
        return Err(Error::Domain(format!(
            "series of {t} frames too short for {} delays of step {} (need {})",
            g.count,
            g.delta,
            g.min_frames()
        )));
    }
    if x.values.iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("series contains NaN".into()));
    }

    let mut out = Array3::<f64>::zeros((g.count, c, c));
    for d in 0..g.count {
        let shift = d * g.delta;
        let n = t - shift;
        let lead: Vec<Centered> = (0..c)
            .map(|i| center(x.values.row(i).slice_move(ndarray::s![..n])))
            .collect();
        let lag: Vec<Centered> = (0..c)
            .map(|j| center(x.values.row(j).slice_move(ndarray::s![shift..])))
            .collect();
        for (i, a) in lead.iter().enumerate() {
            let Some(ssa) = a.ss else { continue };
            for (j, b) in lag.iter().enumerate() {
                let Some(ssb) = b.ss else { continue };
                let cross: f64 = a.dev.iter().zip(&b.dev).map(|(p, q)| p * q).sum();
                out[[d, i, j]] = (cross / (ssa * ssb).sqrt()).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(CoordinationTensor { values: out })
}

/// Facial action unit coordination: the same mechanism applied to FAU series.
pub fn fauc_from_segment(x: &ChannelSeries, g: &DelayGrid) -> Result<CoordinationTensor> {
    delayed_correlation(x, g)
}

/// Flattens in `(d, i, j)` row-major order into a 1-D f32 tensor.
pub fn vectorize_coordination(ct: &CoordinationTensor) -> Tensor {
    let data: Vec<f32> = ct.values.iter().map(|&v| v as f32).collect();
    Tensor::new(vec![data.len()], data).expect("non-empty coordination tensor")
}

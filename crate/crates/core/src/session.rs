//! Session representations: segmentation of raw series and padded per-session
//! matrices built from per-segment (or per-sentence) feature vectors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::coordination::ChannelSeries;
use crate::error::{Error, Result};
use crate::symptom::SymptomVector;
use crate::tensor::read_tensor;

/// Feature family a segment vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Fvtc,
    Cart,
    W2v,
    Wavlm,
    Bert,
    Fauc,
}

impl Source {
    pub const ALL: [Source; 6] = [Source::Fvtc, Source::Cart, Source::W2v, Source::Wavlm, Source::Bert, Source::Fauc];

    pub fn name(self) -> &'static str {
        match self {
            Source::Fvtc => "fvtc",
            Source::Cart => "cart",
            Source::W2v => "w2v",
            Source::Wavlm => "wavlm",
            Source::Bert => "bert",
            Source::Fauc => "fauc",
        }
    }

    /// Speech-derived families (acoustic or articulatory).
    pub fn is_speech(self) -> bool {
        matches!(self, Source::Fvtc | Source::Cart | Source::W2v | Source::Wavlm)
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Source::ALL
            .into_iter()
            .find(|src| src.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown feature source {s:?}")))
    }
}

/// One segment's (or sentence's) feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFeature {
    pub vector: Vec<f32>,
    pub source: Source,
}

/// A zero-padded `s_max x F` session matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionMatrix {
    data: Array2<f32>,
    true_length: usize,
}

impl SessionMatrix {
    /// Pads `rows` with zero rows up to `s_max`. Sessions longer than `s_max`
    /// are a capacity error unless `truncate` is set, in which case the tail is
    /// dropped with a warning.
    pub fn from_rows(rows: ArrayView2<'_, f32>, s_max: usize, truncate: bool) -> Result<Self> {
        let (s, f) = rows.dim();
        if s == 0 || f == 0 {
            return Err(Error::Validation(format!("cannot build a session matrix from {s}x{f} rows")));
        }
        let keep = if s > s_max {
            if !truncate {
                return Err(Error::Capacity(format!("{s} rows exceed s_max {s_max}")));
            }
            log::warn!("truncating session of {s} rows to s_max {s_max}");
            s_max
        } else {
            s
        };
        let mut data = Array2::<f32>::zeros((s_max, f));
        data.slice_mut(s![..keep, ..]).assign(&rows.slice(s![..keep, ..]));
        Ok(SessionMatrix { data, true_length: keep })
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }
}

/// Cuts a series into consecutive non-overlapping windows of
/// `floor(seg_seconds * rate)` frames. A trailing remainder is kept when it is
/// at least half a window long.
pub fn segment_series(x: &ChannelSeries, seg_seconds: f64) -> Result<Vec<ChannelSeries>> {
    let window = (seg_seconds * x.frame_rate_hz()).floor();
    if window.is_nan() || window < 2.0 {
        return Err(Error::Config(format!(
            "segment of {seg_seconds} s at {} Hz spans fewer than 2 frames",
            x.frame_rate_hz()
        )));
    }
    let window = window as usize;
    let t = x.frames();
    let mut bounds = Vec::new();
    let mut start = 0;
    while start + window <= t {
        bounds.push((start, start + window));
        start += window;
    }
    let rem = t - start;
    if rem > 0 && 2 * rem >= window && rem >= 2 {
        bounds.push((start, t));
    }
    if bounds.is_empty() {
        return Err(Error::Domain(format!("series of {t} frames yields no segment of {window} frames")));
    }
    bounds
        .into_iter()
        .map(|(a, b)| ChannelSeries::new(x.values().slice(s![.., a..b]).to_owned(), x.frame_rate_hz()))
        .collect()
}

/// Stacks feature vectors into rows and zero-pads to `s_max` rows.
pub fn stack_and_pad(features: &[SegmentFeature], s_max: usize) -> Result<SessionMatrix> {
    let first = features
        .first()
        .ok_or_else(|| Error::Validation("no feature vectors to stack".into()))?;
    let f = first.vector.len();
    if f == 0 {
        return Err(Error::Validation("feature vectors are empty".into()));
    }
    if let Some(bad) = features.iter().find(|v| v.vector.len() != f) {
        return Err(Error::Validation(format!(
            "mixed feature lengths: {f} and {}",
            bad.vector.len()
        )));
    }
    if features.len() > s_max {
        return Err(Error::Capacity(format!("{} vectors exceed s_max {s_max}", features.len())));
    }
    let flat: Vec<f32> = features.iter().flat_map(|v| v.vector.iter().copied()).collect();
    let rows = Array2::from_shape_vec((features.len(), f), flat).expect("uniform lengths checked");
    SessionMatrix::from_rows(rows.view(), s_max, false)
}

/// Reads a 2-D `S x F` embedding tensor into one feature per row.
pub fn ingest_embeddings(path: impl AsRef<Path>, source: Source, expected_f: usize) -> Result<Vec<SegmentFeature>> {
    let t = read_tensor(path.as_ref())?;
    let rows = t.to_array2()?;
    if rows.ncols() != expected_f {
        return Err(Error::Validation(format!(
            "{}: {source} features have width {}, configured {expected_f}",
            path.as_ref().display(),
            rows.ncols()
        )));
    }
    Ok(rows
        .rows()
        .into_iter()
        .map(|r| SegmentFeature { vector: r.to_vec(), source })
        .collect())
}

/// A session's labels together with its unpadded per-source feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSession {
    pub id: String,
    pub subject: String,
    pub labels: SymptomVector,
    pub features: BTreeMap<Source, Array2<f32>>,
}

impl FeatureSession {
    pub fn rows(&self, source: Source) -> Result<&Array2<f32>> {
        self.features
            .get(&source)
            .ok_or_else(|| Error::Validation(format!("session {:?} has no {source} features", self.id)))
    }
}

/// Longest row count for `source` across the corpus.
pub fn corpus_s_max<'a, I>(corpus: I, source: Source) -> Result<usize>
where
    I: IntoIterator<Item = &'a FeatureSession>,
{
    let mut best: Option<usize> = None;
    for session in corpus {
        let n = session.rows(source)?.nrows();
        best = Some(best.map_or(n, |b| b.max(n)));
    }
    best.ok_or_else(|| Error::Validation("empty corpus".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{write_tensor, Tensor};
    use ndarray::array;

    fn series(t: usize) -> ChannelSeries {
        let v = Array2::from_shape_fn((2, t), |(c, i)| (c * t + i) as f64);
        ChannelSeries::new(v, 100.0).unwrap()
    }

    #[test]
    fn segmentation_window_counts() {
        let lens = |t| -> Vec<usize> {
            segment_series(&series(t), 40.0).unwrap().iter().map(|s| s.frames()).collect()
        };
        assert_eq!(lens(8000), vec![4000, 4000]);
        assert_eq!(lens(4000), vec![4000]);
        assert_eq!(lens(6500), vec![4000, 2500]);
        assert_eq!(lens(5999), vec![4000]);
        assert_eq!(lens(6000), vec![4000, 2000]);
        assert!(segment_series(&series(1000), 40.0).is_err());
    }

    #[test]
    fn segments_tile_a_prefix_in_order() {
        let x = series(9100);
        let segs = segment_series(&x, 40.0).unwrap();
        let mut frame = 0;
        for seg in &segs {
            for i in 0..seg.frames() {
                assert_eq!(seg.values()[[1, i]], x.values()[[1, frame + i]]);
            }
            frame += seg.frames();
        }
        assert_eq!(frame, 8000);
    }

    fn feat(v: &[f32]) -> SegmentFeature {
        SegmentFeature { vector: v.to_vec(), source: Source::W2v }
    }

    #[test]
    fn pads_with_zero_rows() {
        let m = stack_and_pad(&[feat(&[1.0, 2.0])], 3).unwrap();
        assert_eq!(m.data(), &array![[1.0, 2.0], [0.0, 0.0], [0.0, 0.0]]);
        assert_eq!(m.true_length(), 1);

        let full = stack_and_pad(&[feat(&[1.0]), feat(&[2.0]), feat(&[3.0])], 3).unwrap();
        assert_eq!(full.true_length(), 3);
        assert_eq!(full.data(), &array![[1.0], [2.0], [3.0]]);
    }

    #[test]
    fn stacking_errors() {
        assert!(matches!(stack_and_pad(&[], 3), Err(Error::Validation(_))));
        assert!(matches!(stack_and_pad(&[feat(&[1.0]), feat(&[1.0, 2.0])], 3), Err(Error::Validation(_))));
        assert!(matches!(stack_and_pad(&[feat(&[1.0]), feat(&[2.0])], 1), Err(Error::Capacity(_))));
    }

    #[test]
    fn truncation_keeps_prefix() {
        let rows = array![[1.0f32], [2.0], [3.0]];
        let m = SessionMatrix::from_rows(rows.view(), 2, true).unwrap();
        assert_eq!(m.data(), &array![[1.0], [2.0]]);
        assert_eq!(m.true_length(), 2);
    }

    fn session(id: &str, counts: &[(Source, usize)]) -> FeatureSession {
        FeatureSession {
            id: id.into(),
            subject: "p".into(),
            labels: SymptomVector::default(),
            features: counts.iter().map(|&(s, n)| (s, Array2::zeros((n, 2)))).collect(),
        }
    }

    #[test]
    fn s_max_is_per_source() {
        let c = vec![
            session("a", &[(Source::W2v, 3)]),
            session("b", &[(Source::W2v, 5)]),
            session("c", &[(Source::W2v, 2)]),
        ];
        assert_eq!(corpus_s_max(&c, Source::W2v).unwrap(), 5);
        assert_eq!(corpus_s_max(&c[..1], Source::W2v).unwrap(), 3);

        let mixed = vec![
            session("a", &[(Source::Bert, 10), (Source::Fvtc, 3)]),
            session("b", &[(Source::Bert, 4), (Source::Fvtc, 5)]),
        ];
        // oracle: independent max per source
        for (src, want) in [(Source::Bert, 10), (Source::Fvtc, 5)] {
            let direct = mixed.iter().map(|s| s.features[&src].nrows()).max().unwrap();
            assert_eq!(direct, want);
            assert_eq!(corpus_s_max(&mixed, src).unwrap(), want);
        }
    }

    #[test]
    fn ingest_checks_width_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.mmst");
        write_tensor(&Tensor::new(vec![2, 4], (0..8).map(|v| v as f32).collect()).unwrap(), &p).unwrap();
        let feats = ingest_embeddings(&p, Source::Bert, 4).unwrap();
        assert_eq!(feats.len(), 2);
        assert_eq!(feats[1].vector, vec![4.0, 5.0, 6.0, 7.0]);
        assert!(ingest_embeddings(&p, Source::Bert, 3).is_err());

        let wide = dir.path().join("w.mmst");
        write_tensor(&Tensor::zeros(vec![1, 768]).unwrap(), &wide).unwrap();
        assert!(ingest_embeddings(&wide, Source::W2v, 512).is_err());
    }

    #[test]
    fn zero_row_tensor_cannot_exist() {
        // the tensor container forbids zero-sized dimensions, so a 0-row embedding file is rejected
        assert!(Tensor::new(vec![0, 4], vec![]).is_err());
        let mut bytes = Tensor::zeros(vec![1, 4]).unwrap().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(Tensor::from_bytes(&bytes).is_err());
    }

    #[test]
    fn source_names_roundtrip() {
        for s in Source::ALL {
            assert_eq!(s.name().parse::<Source>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
        assert!("tv".parse::<Source>().is_err());
    }
}

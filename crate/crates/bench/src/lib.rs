//! Deterministic inputs shared by the benchmarks.

use std::collections::BTreeMap;

use mmst_core::coordination::ChannelSeries;
use mmst_core::session::{FeatureSession, Source};
use mmst_core::SymptomVector;
use ndarray::Array2;

/// Cheap pseudo-random value in `[-1, 1)`, stable across platforms.
pub fn hash_unit(i: usize, salt: usize) -> f64 {
    let mut x = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (salt as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 29;
    (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

pub fn series(channels: usize, frames: usize, rate_hz: f64) -> ChannelSeries {
    let v = Array2::from_shape_fn((channels, frames), |(c, t)| hash_unit(c * frames + t, 1));
    ChannelSeries::new(v, rate_hz).expect("finite series")
}

pub fn matrix(rows: usize, cols: usize, salt: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |(r, c)| hash_unit(r * cols + c, salt) as f32)
}

/// Sessions with `rows x width` features for each requested source and
/// labels cycling through the classes.
pub fn corpus(n: usize, rows: usize, sources: &[(Source, usize)]) -> Vec<FeatureSession> {
    (0..n)
        .map(|i| {
            let labels: Vec<u8> = (0..18).map(|s| ((i + s) % 3) as u8).collect();
            FeatureSession {
                id: format!("s{i:03}"),
                subject: format!("p{:02}", i % 5),
                labels: SymptomVector::from_slice(&labels).expect("valid classes"),
                features: sources
                    .iter()
                    .map(|&(src, w)| (src, matrix(rows, w, i * 31 + w)))
                    .collect::<BTreeMap<_, _>>(),
            }
        })
        .collect()
}

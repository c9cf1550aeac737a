use mmst_core::coordination::ChannelSeries;
use mmst_core::session::{segment_series, stack_and_pad, SegmentFeature, Source};
use mmst_core::{read_tensor, write_tensor, Tensor};
use ndarray::Array2;
use proptest::prelude::*;

/// Rows of equal width, each with at least one nonzero entry.
fn nonzero_rows() -> impl Strategy<Value = Vec<Vec<f32>>> {
    (1usize..6, 1usize..10).prop_flat_map(|(f, n)| {
        prop::collection::vec(
            prop::collection::vec(-100.0f32..100.0, f).prop_filter("nonzero row", |r| r.iter().any(|&v| v != 0.0)),
            n,
        )
    })
}

fn features(rows: &[Vec<f32>]) -> Vec<SegmentFeature> {
    rows.iter()
        .map(|r| SegmentFeature {
            vector: r.clone(),
            source: Source::Bert,
        })
        .collect()
}

proptest! {
    #[test]
    fn stripping_the_zero_tail_recovers_the_rows(rows in nonzero_rows(), extra in 0usize..5) {
        let s_max = rows.len() + extra;
        let m = stack_and_pad(&features(&rows), s_max).unwrap();
        prop_assert_eq!(m.rows(), s_max);
        prop_assert_eq!(m.true_length(), rows.len());
        let mut kept: Vec<Vec<f32>> = m.data().rows().into_iter().map(|r| r.to_vec()).collect();
        while kept.last().is_some_and(|r| r.iter().all(|&v| v == 0.0)) {
            kept.pop();
        }
        prop_assert_eq!(kept.len(), rows.len());
        for (a, b) in kept.iter().zip(&rows) {
            let bits_a: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn padding_survives_reserialization(rows in nonzero_rows(), extra in 1usize..5) {
        let s_max = rows.len() + extra;
        let m = stack_and_pad(&features(&rows), s_max).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mmst");
        write_tensor(&Tensor::from_array2(m.data()).unwrap(), &path).unwrap();
        let back = read_tensor(&path).unwrap().to_array2().unwrap();
        for r in rows.len()..s_max {
            prop_assert!(back.row(r).iter().all(|v| v.to_bits() == 0));
        }
        prop_assert_eq!(&back, m.data());
    }

    #[test]
    fn segments_are_ordered_disjoint_windows(
        frames in 2usize..400,
        rate in prop_oneof![Just(0.5f64), Just(1.0), Just(2.5)],
        seconds in 1.0f64..40.0,
    ) {
        let x = Array2::from_shape_fn((2, frames), |(c, t)| (c * 1000 + t) as f64);
        let series = ChannelSeries::new(x.clone(), rate).unwrap();
        let window = (seconds * rate).floor() as usize;
        match segment_series(&series, seconds) {
            Ok(segs) => {
                let mut start = 0;
                for (k, seg) in segs.iter().enumerate() {
                    let last = k + 1 == segs.len();
                    prop_assert!(seg.frames() == window || (last && 2 * seg.frames() >= window));
                    for t in 0..seg.frames() {
                        prop_assert_eq!(seg.values()[[1, t]], x[[1, start + t]]);
                    }
                    start += seg.frames();
                }
                prop_assert!(start <= frames);
                // whatever was dropped is shorter than half a window
                prop_assert!(2 * (frames - start) < window.max(1) || frames - start < 2);
            }
            Err(_) => prop_assert!(window < 2 || 2 * frames < window),
        }
    }
}

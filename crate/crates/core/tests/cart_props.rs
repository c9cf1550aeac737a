use mmst_core::cart::{quantize, vqvae_loss};
use ndarray::Array2;
use proptest::prelude::*;

fn matrix(rows: std::ops::Range<usize>, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    rows.prop_flat_map(move |r| {
        prop::collection::vec(-5.0f64..5.0, r * cols).prop_map(move |v| Array2::from_shape_vec((r, cols), v).unwrap())
    })
}

fn instance() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..6).prop_flat_map(|e| (matrix(1..10, e), matrix(1..12, e)))
}

fn sq(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

proptest! {
    #[test]
    fn quantized_rows_are_nearest_codebook_entries((z, book) in instance()) {
        let (idx, zq) = quantize(z.view(), book.view()).unwrap();
        prop_assert_eq!(idx.len(), z.nrows());
        for (m, &k) in idx.iter().enumerate() {
            prop_assert!(k < book.nrows());
            prop_assert_eq!(zq.row(m), book.row(k));
            let d = sq(z.row(m), book.row(k));
            for (j, code) in book.rows().into_iter().enumerate() {
                let other = sq(z.row(m), code);
                // ties resolve to the lowest index
                prop_assert!(d < other || (d == other && k <= j), "row {m}: code {k} at {d}, code {j} at {other}");
            }
        }
    }

    #[test]
    fn codebook_rows_quantize_to_themselves(book in matrix(1..12, 3)) {
        let (idx, zq) = quantize(book.view(), book.view()).unwrap();
        prop_assert_eq!(&zq, &book);
        for (m, &k) in idx.iter().enumerate() {
            prop_assert!(k <= m);
        }
    }

    #[test]
    fn loss_is_nonnegative_and_vanishes_only_when_matched(
        (z, book) in instance(),
        x in prop::collection::vec(-3.0f64..3.0, 1..20),
        beta in 0.01f64..1.0,
    ) {
        let (_, zq) = quantize(z.view(), book.view()).unwrap();
        let l = vqvae_loss(&x, &x, z.view(), zq.view(), beta).unwrap();
        prop_assert!(l.reconstruction == 0.0 && l.codebook >= 0.0 && l.commitment >= 0.0);
        prop_assert_eq!(l.total() == 0.0, z == zq);
        prop_assert!((l.commitment - beta * l.codebook).abs() <= 1e-12 * l.codebook.max(1.0));

        let mut shifted = x.clone();
        shifted[0] += 0.5;
        let l2 = vqvae_loss(&x, &shifted, z.view(), z.view(), beta).unwrap();
        prop_assert!(l2.total() > 0.0 && l2.codebook == 0.0);
    }
}

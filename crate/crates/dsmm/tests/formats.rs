use dsmm::formats::{decode_matrix, decode_sparse_text, encode_matrix, encode_sparse_text, FormatError};
use dsmm_core::rng::{gaussian_vec, stream_rng};
use dsmm_core::sampling::constrain;
use dsmm_core::{MeasurementMatrix, Provenance};
use proptest::prelude::*;

fn matrix(seed: u64, rows: usize, b: usize, alpha: f64, scale: f64) -> MeasurementMatrix {
    let theta = gaussian_vec(&mut stream_rng(seed, 41), rows * b * b, scale);
    constrain(&theta, rows, b, alpha).unwrap().matrix
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binary_round_trip_is_bitwise(seed in any::<u64>(), rows in 1usize..20, b in 1usize..9, alpha in 0.0f64..=1.0) {
        let m = matrix(seed, rows, b, alpha, 1.0);
        let back = decode_matrix(&encode_matrix(&m).unwrap()).unwrap();
        let bits = |m: &MeasurementMatrix| m.entries().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&m));
        prop_assert_eq!(back.alpha().to_bits(), m.alpha().to_bits());
        prop_assert_eq!(back.provenance(), m.provenance());
    }

    #[test]
    fn sparse_text_round_trip_is_exact(seed in any::<u64>(), rows in 1usize..20, b in 1usize..9, alpha in 0.0f64..=1.0) {
        let m = matrix(seed, rows, b, alpha, 1.0);
        let text = encode_sparse_text(&m);
        prop_assert_eq!(text.lines().count(), 1 + m.nnz());
        let back = decode_sparse_text(&text).unwrap();
        prop_assert_eq!(back.entries(), m.entries());
        prop_assert_eq!(back.alpha(), m.alpha());
        prop_assert_eq!(back.provenance(), Provenance::Imported);
    }

    #[test]
    fn every_truncation_is_reported_at_the_end_offset(seed in any::<u64>(), rows in 1usize..6, cut in 0.0f64..1.0) {
        let bytes = encode_matrix(&matrix(seed, rows, 3, 0.5, 1.0)).unwrap();
        let keep = (cut * bytes.len() as f64) as usize;
        match decode_matrix(&bytes[..keep]) {
            Err(FormatError::Truncated { offset, needed }) => {
                prop_assert_eq!(offset, keep);
                prop_assert!(needed > 0);
            }
            Err(FormatError::BadMagic { .. }) => prop_assert!(keep < 4),
            other => prop_assert!(false, "unexpected {:?}", other),
        }
    }
}

#[test]
fn extreme_values_survive_text() {
    let entries = vec![f64::MIN_POSITIVE / 8.0, -1.0 / 3.0, 0.0, 1.0 - f64::EPSILON];
    let m = MeasurementMatrix::new(2, 1, 0.75, entries, Provenance::Imported).unwrap();
    let back = decode_sparse_text(&encode_sparse_text(&m)).unwrap();
    assert_eq!(back.entries(), m.entries());
}

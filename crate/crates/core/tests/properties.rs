use gem_core::metrics::{energy_ratio, relative_change_pct};
use gem_core::model::distill_loss;
use gem_core::quant::{memory_bytes, Quantizer};
use gem_core::scar::{reduction, scar_ops};
use proptest::prelude::*;

proptest! {
    #[test]
    fn in_range_quantization_error_is_at_most_half_a_step(b in 2u32..=16, r in 0.01f64..50.0, t in -1.0f64..1.0) {
        let q = Quantizer::new(b, r).unwrap();
        let x = t * r;
        prop_assert!((q.quantize_value(x) - x).abs() <= q.step() / 2.0 * (1.0 + 1e-12));
    }

    #[test]
    fn quantized_values_stay_within_range(b in 1u32..=16, r in 0.01f64..50.0, x in -1e6f64..1e6) {
        let q = Quantizer::new(b, r).unwrap();
        prop_assert!(q.quantize_value(x).abs() <= r * (1.0 + 1e-12));
    }

    #[test]
    fn memory_scales_linearly_in_bits(p in 1u64..1_000_000_000, b in 1u32..=16) {
        let one = memory_bytes(p, 1).unwrap();
        prop_assert!((memory_bytes(p, b).unwrap() - one * b as f64).abs() <= 1e-6 * one * b as f64);
    }

    #[test]
    fn distillation_loss_is_nonnegative_and_zero_on_agreement(
        s in prop::collection::vec(-6.0f64..6.0, 2..10),
        t in 0.5f64..8.0,
    ) {
        prop_assert!(distill_loss(&s, &s, t).unwrap().abs() <= 1e-12);
        let shifted: Vec<f64> = s.iter().map(|x| x + 3.0).collect();
        prop_assert!(distill_loss(&shifted, &s, t).unwrap().abs() <= 1e-12);
        let mut other = s.clone();
        other.reverse();
        prop_assert!(distill_loss(&s, &other, t).unwrap() >= -1e-15);
    }

    #[test]
    fn clustered_ops_grow_with_k_and_beat_dense_below_n_minus_one(n in 2u64..10_000, k in 1u64..200) {
        prop_assume!(k < n);
        prop_assert!(scar_ops(n, k + 1) > scar_ops(n, k));
        let saving = reduction(n * n, scar_ops(n, k)).unwrap();
        prop_assert_eq!(saving > 0.0, k + 1 < n);
    }

    #[test]
    fn energy_ratio_is_reciprocal_and_quadratic(a in 1u32..=32, b in 1u32..=32) {
        let r = energy_ratio(a, b).unwrap();
        prop_assert!((r * energy_ratio(b, a).unwrap() - 1.0).abs() <= 1e-12);
        prop_assert!((energy_ratio(2 * a, b).unwrap() / r - 4.0).abs() <= 1e-12);
    }

    #[test]
    fn relative_change_matches_ratio(from in 0.01f64..100.0, to in 0.0f64..100.0) {
        let pct = relative_change_pct(from, to).unwrap();
        prop_assert!((pct / 100.0 + 1.0 - to / from).abs() <= 1e-12 * (1.0 + to / from));
    }
}

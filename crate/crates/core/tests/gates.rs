mod common;

use proptest::prelude::*;
use snip_core::autograd::Tensor;
use snip_core::gates::{gate_from_max_abs, s_epsilon, t_epsilon, ActivationStats, BlockId};

#[test]
fn seeded_vectors_follow_gate_semantics() {
    assert_eq!(common::checks::gate_semantics_mismatches(1000), 0);
}

#[test]
fn spec_examples() {
    let l = 1e5;
    assert_eq!(s_epsilon(&Tensor::vector(vec![0.1, -0.2]), 0.3, l).data(), &[0.0, 0.0]);
    assert_eq!(s_epsilon(&Tensor::vector(vec![0.1, 0.5]), 0.3, l).data(), &[0.1, 0.5]);
    assert_eq!(t_epsilon(&Tensor::vector(vec![0.3, -0.1]), 0.3, l), 0.0);
    assert!((gate_from_max_abs(0.3 + 1e-6, 0.3, l) - 0.1).abs() < 1e-9);
    assert_eq!(s_epsilon(&Tensor::zeros(&[2, 3]), 0.5, l).data(), &[0.0; 6]);
}

proptest! {
    #[test]
    fn gate_is_nonincreasing_in_eps(m in 0.0f64..3.0, e1 in 0.0f64..3.0, e2 in 0.0f64..3.0) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(gate_from_max_abs(m, hi, 1e5) <= gate_from_max_abs(m, lo, 1e5));
    }

    #[test]
    fn gate_depends_only_on_max_abs(v in proptest::collection::vec(-2.0f64..2.0, 1..16), eps in 0.0f64..2.0) {
        let m = v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        let t = t_epsilon(&Tensor::vector(v.clone()), eps, 1e5);
        prop_assert_eq!(t, gate_from_max_abs(m, eps, 1e5));
        prop_assert!((0.0..=1.0).contains(&t));
    }

    #[test]
    fn stats_stay_consistent(records in proptest::collection::vec((0.0f64..5.0, any::<bool>()), 1..64)) {
        let mut s = ActivationStats::new();
        let b = BlockId::ffn(0);
        for (m, z) in &records {
            s.record(b, *m, *z);
        }
        let st = s.get(&b).unwrap();
        prop_assert!(st.zero_count <= st.count);
        let mean: f64 = records.iter().map(|r| r.0).sum::<f64>() / records.len() as f64;
        prop_assert!((s.mean_max_abs(&b).unwrap() - mean).abs() < 1e-12);
        let zeros = records.iter().filter(|r| r.1).count() as f64;
        prop_assert_eq!(s.identity_rate(&b).unwrap(), zeros / records.len() as f64);
    }
}

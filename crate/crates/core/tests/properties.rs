//! Property tests over the numeric kernels and routing identities.

use proptest::prelude::*;

use mi_core::numerics::{dot, logsumexp, rms_norm, softmax, RotaryOperator};
use mi_core::routing::{
    attend_baseline, attend_mixture, contrastive_gates, BankRole, QueryAtSite, RoutingGains,
    SiteBank,
};

fn finite_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 1..max_len)
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(scores in finite_scores(12), shift in -40.0f64..40.0) {
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let a = softmax(&scores).unwrap();
        let b = softmax(&shifted).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn logsumexp_is_bounded(scores in finite_scores(12)) {
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logsumexp(&scores).unwrap();
        prop_assert!(lse >= max - 1e-12);
        prop_assert!(lse <= max + (scores.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn rms_norm_is_scale_invariant(
        vec in prop::collection::vec(-5.0f64..5.0, 4..16),
        alpha in 0.25f64..8.0,
    ) {
        prop_assume!(vec.iter().any(|v| v.abs() > 0.1));
        let gain = vec![1.0; vec.len()];
        let scaled: Vec<f64> = vec.iter().map(|v| v * alpha).collect();
        let a = rms_norm(&vec, &gain, 1e-12).unwrap();
        let b = rms_norm(&scaled, &gain, 1e-12).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_preserves_norm_and_adds_positions(
        pairs in 2usize..8,
        seed in prop::collection::vec(-2.0f64..2.0, 16),
        a in 0i64..2000,
        b in 0i64..2000,
    ) {
        let d = pairs * 2;
        let v: Vec<f64> = seed.iter().cycle().take(d).cloned().collect();
        let rope = RotaryOperator::new(d, 10000.0).unwrap();
        let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ra = rope.apply(&v, a).unwrap();
        prop_assert!((norm(&ra) - norm(&v)).abs() <= 1e-6 * norm(&v).max(1.0));
        let chained = rope.apply(&ra, b).unwrap();
        let direct = rope.apply(&v, a + b).unwrap();
        for (x, y) in chained.iter().zip(direct.iter()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        let back = rope.unapply(&ra, a).unwrap();
        for (x, y) in back.iter().zip(v.iter()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn derotated_queries_score_canonically(
        q in prop::collection::vec(-2.0f64..2.0, 8),
        k in prop::collection::vec(-2.0f64..2.0, 8),
        t in 0i64..1500,
    ) {
        let rope = RotaryOperator::new(8, 10000.0).unwrap();
        let q_t = rope.apply(&q, t).unwrap();
        let back = rope.unapply(&q_t, t).unwrap();
        prop_assert!((dot(&back, &k) - dot(&q, &k)).abs() < 1e-9);
    }

    #[test]
    fn gates_always_complement(delta in -50.0f64..50.0, gamma in 0.05f64..12.0) {
        let (gp, gm) = contrastive_gates(delta, gamma);
        prop_assert!((gp + gm - 1.0).abs() <= f64::EPSILON);
        prop_assert!((0.0..=1.0).contains(&gp));
    }

    #[test]
    fn mixture_weights_form_a_distribution(
        q in prop::collection::vec(-1.5f64..1.5, 4),
        prompt in prop::collection::vec(-1.5f64..1.5, 4 * 3),
        bank_keys in prop::collection::vec(-1.5f32..1.5, 4 * 2),
        bank_values in prop::collection::vec(-1.5f32..1.5, 4 * 2),
        prior in -1.0f64..1.0,
        lambda_plus in 0.0f64..4.0,
        position in 0i64..600,
    ) {
        let rope = RotaryOperator::new(4, 10000.0).unwrap();
        let phases = vec![0i64; 2];
        let bank = SiteBank {
            bank_id: "b",
            role: BankRole::Target,
            slots: 2,
            keys: &bank_keys,
            values: &bank_values,
            prior,
            phases: &phases,
        };
        let gains = RoutingGains::new(lambda_plus, 0.0, 1.0).unwrap();
        let qs = QueryAtSite { query: &q, position, rope: &rope };
        let (out, diag) = attend_mixture(&qs, &prompt, &prompt, &[bank], &gains, 0).unwrap();
        prop_assert_eq!(out.len(), 4);
        prop_assert!((diag.pi_sum() - 1.0).abs() < 1e-9);
        let target = diag.mass(BankRole::Target);
        prop_assert!((0.0..=1.0).contains(&target));

        // raising lambda_plus never lowers the target mass
        let stronger = RoutingGains::new(lambda_plus + 1.0, 0.0, 1.0).unwrap();
        let (_, diag2) = attend_mixture(&qs, &prompt, &prompt, &[SiteBank {
            bank_id: "b",
            role: BankRole::Target,
            slots: 2,
            keys: &bank_keys,
            values: &bank_values,
            prior,
            phases: &phases,
        }], &stronger, 0).unwrap();
        prop_assert!(diag2.mass(BankRole::Target) >= target - 1e-12);
    }

    #[test]
    fn baseline_attention_is_a_convex_combination(
        q in prop::collection::vec(-2.0f64..2.0, 4),
        kv in prop::collection::vec(-2.0f64..2.0, 4 * 5),
    ) {
        let out = attend_baseline(&q, &kv, &kv, 4).unwrap();
        let lo = kv.chunks(4).map(|c| c.to_vec()).fold(vec![f64::INFINITY; 4], |mut acc, v| {
            for i in 0..4 { acc[i] = acc[i].min(v[i]); }
            acc
        });
        let hi = kv.chunks(4).map(|c| c.to_vec()).fold(vec![f64::NEG_INFINITY; 4], |mut acc, v| {
            for i in 0..4 { acc[i] = acc[i].max(v[i]); }
            acc
        });
        for i in 0..4 {
            prop_assert!(out[i] >= lo[i] - 1e-9 && out[i] <= hi[i] + 1e-9);
        }
    }
}

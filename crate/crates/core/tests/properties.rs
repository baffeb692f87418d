//! Property tests tying the validator, tokenizer, mask, cost model and
//! metrics together.

use layoutlab::cost::{attn_edges, count_mask_edges, exact_edges, ratio_attn, ratio_linear};
use layoutlab::layout::{
    anti_patterns, build_mask, dominates, tokenize_steps, validate, ActionInput, Arrangement, LayoutSpec, Step,
    TokenizedSequence, PRESETS,
};
use layoutlab::metrics::{hit, hr_at_k, ndcg, ndcg_at_k, rank_among};
use proptest::prelude::*;

fn all_specs() -> Vec<LayoutSpec> {
    PRESETS.iter().map(|p| LayoutSpec::preset(p).unwrap()).chain(anti_patterns()).collect()
}

/// Step `t` has item `10 + t` and action `[100 + t]`, so every value names
/// its own step.
fn traceable(t: usize) -> Vec<Step> {
    (0..t).map(|s| Step::new(10 + s as u32, vec![100.0 + s as f64], s as i64)).collect()
}

/// Whether some token can see the value of one of its own included targets
/// through the inputs of a visible position.
fn token_level_leak(seq: &TokenizedSequence, spec: &LayoutSpec) -> bool {
    let mask = build_mask(spec, seq.steps, 0);
    assert_eq!(mask.size(), seq.len());
    for (q, tok) in seq.tokens.iter().enumerate() {
        let visible = || (0..seq.len()).filter(|&k| mask.allowed(q, k)).map(|k| &seq.tokens[k].input);
        if let Some(v) = tok.item_target.as_ref().and_then(|s| s.value) {
            if visible().any(|inp| inp.item == v) {
                return true;
            }
        }
        for slot in &tok.action_targets {
            if let Some(v) = &slot.value {
                if visible().any(|inp| matches!(&inp.action, ActionInput::Value(a) if a == v)) {
                    return true;
                }
            }
        }
    }
    false
}

proptest! {
    #[test]
    fn mask_and_tokenizer_agree_with_the_validator(t in 1usize..=16) {
        for spec in all_specs() {
            let seq = tokenize_steps(&traceable(t), &spec).unwrap();
            let leaks = token_level_leak(&seq, &spec);
            if validate(&spec).p3_pass() {
                prop_assert!(!leaks, "{} leaks at T={t}", spec.name);
            } else if t >= 2 {
                prop_assert!(leaks, "{} flagged but no leak at T={t}", spec.name);
            }
        }
    }

    #[test]
    fn interleaving_doubles_the_sequence(t in 1usize..=64) {
        for spec in all_specs() {
            let n = tokenize_steps(&traceable(t), &spec).unwrap().len();
            let expect = match spec.arrangement {
                Arrangement::NonInterleaved => t,
                Arrangement::Interleaved => 2 * t,
            };
            prop_assert_eq!(n, expect);
            prop_assert_eq!(spec.token_count(t), expect);
        }
    }

    #[test]
    fn cost_ratios_stay_in_bounds(t in 1usize..=512, c in 0usize..=512) {
        let a = ratio_attn(t, c);
        let l = ratio_linear(t, c);
        prop_assert!((2.0..=4.0).contains(&a), "{a}");
        prop_assert!(l > 1.0 && l <= 2.0, "{l}");
        let analytic = attn_edges(t, c);
        let rel = (analytic - exact_edges(t, c) as f64).abs() / analytic;
        let (tf, cf) = (t as f64, c as f64);
        prop_assert!(rel <= 2.0 / tf + 2.0 / (tf * tf / 2.0 + cf * tf));
    }

    #[test]
    fn exact_edges_count_the_mask(t in 1usize..=40, c in 0usize..=40) {
        let spec = LayoutSpec::preset("LAC").unwrap();
        prop_assert_eq!(count_mask_edges(&build_mask(&spec, t, c)), exact_edges(t, c));
    }

    #[test]
    fn metrics_are_monotone_in_k(rank in 1usize..200, k in 1usize..200) {
        prop_assert!(hit(rank, k) <= hit(rank, k + 1));
        prop_assert!(ndcg(rank, k) <= ndcg(rank, k + 1));
        prop_assert!(ndcg(rank, k) <= hit(rank, k));
        prop_assert!(ndcg(rank, k) >= ndcg(rank + 1, k));
    }

    #[test]
    fn rank_among_matches_a_sort(scores in proptest::collection::vec(-3i32..3, 5..40), pick in 0usize..1000) {
        // Coarse integer scores force ties.
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let target = (pick % scores.len()) as u32;
        let mut order: Vec<u32> = (0..scores.len() as u32).collect();
        order.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
        let rank = rank_among(&scores, target, 0..scores.len() as u32);
        prop_assert_eq!(Some(rank), order.iter().position(|&i| i == target).map(|p| p + 1));
        prop_assert_eq!(hr_at_k(&order, target, 10), hit(rank, 10));
        prop_assert_eq!(ndcg_at_k(&order, target, 10), ndcg(rank, 10));
    }
}

#[test]
fn dominance_is_a_strict_partial_order() {
    let specs = all_specs();
    let pairs = specs.iter().flat_map(|a| specs.iter().map(move |b| (a, b))).filter(|(a, b)| dominates(a, b)).count();
    assert!(pairs > 0);
    assert!(dominates(&LayoutSpec::preset("INPUT_IA").unwrap(), &LayoutSpec::preset("ITEM_ONLY").unwrap()));
    for a in &specs {
        assert!(!dominates(a, a), "{} dominates itself", a.name);
        for b in &specs {
            if dominates(a, b) {
                assert!(!dominates(b, a), "{} and {} dominate each other", a.name, b.name);
                for c in &specs {
                    if dominates(b, c) {
                        assert!(
                            dominates(a, c),
                            "{} > {} > {} but not {} > {}",
                            a.name,
                            b.name,
                            c.name,
                            a.name,
                            c.name
                        );
                    }
                }
            }
        }
    }
}

//! Attention-edge and FLOPs accounting for interleaved vs one-token-per-step
//! layouts.

use std::fmt::Write as _;

use serde::Serialize;

use crate::layout::{Arrangement, VisibilityMask};

/// Asymptotic attention edges of a causal history of `t` tokens plus `c`
/// packed candidates: `T^2/2 + C*T`.
pub fn attn_edges(t: usize, c: usize) -> f64 {
    let (t, c) = (t as f64, c as f64);
    t * t / 2.0 + c * t
}

/// Exact number of allowed (query, key) pairs.
pub fn count_mask_edges(mask: &VisibilityMask) -> usize {
    mask.count_allowed()
}

/// Exact edges for the block-causal mask, in closed form:
/// `T(T+1)/2 + C(T+1)`.
pub fn exact_edges(t: usize, c: usize) -> usize {
    t * (t + 1) / 2 + c * (t + 1)
}

/// Interleaved / non-interleaved attention cost with the history doubled.
pub fn ratio_attn(t: usize, c: usize) -> f64 {
    let (t, c) = (t as f64, c as f64);
    (2.0 * t * t + 2.0 * c * t) / (t * t / 2.0 + c * t)
}

/// Interleaved / non-interleaved token-linear cost.
pub fn ratio_linear(t: usize, c: usize) -> f64 {
    let (t, c) = (t as f64, c as f64);
    (2.0 * t + c) / (t + c)
}

/// Training FLOPs ratio `(4*attn + 2*lin) / (attn + lin)` for a given
/// attention share of the non-interleaved cost.
pub fn training_ratio_from_share(attention_share: f64) -> f64 {
    assert!((0.0..=1.0).contains(&attention_share), "share in [0, 1]");
    4.0 * attention_share + 2.0 * (1.0 - attention_share)
}

/// Attention share derived from `FLOPs_attn ∝ L^2 d` and `FLOPs_lin ∝ L d^2`,
/// i.e. `T / (T + d)`.
pub fn attention_share(t: usize, d: usize) -> f64 {
    let (t, d) = (t as f64, d as f64);
    (t * t * d) / (t * t * d + t * d * d)
}

pub fn training_flops_ratio(t: usize, d: usize) -> f64 {
    training_ratio_from_share(attention_share(t, d))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostInputs {
    pub history: usize,
    pub candidates: usize,
    pub width: usize,
    pub layers: usize,
    pub batch: usize,
    pub arrangement: Arrangement,
}

impl CostInputs {
    pub fn new(history: usize, candidates: usize) -> Self {
        Self { history, candidates, width: 64, layers: 2, batch: 1, arrangement: Arrangement::NonInterleaved }
    }

    /// History tokens under the arrangement (`2T` exactly when interleaved).
    pub fn history_tokens(&self) -> usize {
        match self.arrangement {
            Arrangement::NonInterleaved => self.history,
            Arrangement::Interleaved => 2 * self.history,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub inputs: CostInputs,
    pub history_tokens: usize,
    pub analytic_edges: f64,
    pub exact_edges: usize,
    /// Per-forward attention score + value FLOPs: `4 * edges * d * layers * B`.
    pub attention_flops: f64,
    /// Per-forward projection + MLP FLOPs: `24 * tokens * d^2 * layers * B`.
    pub linear_flops: f64,
    pub ratio_attn: f64,
    pub ratio_linear: f64,
    pub ratio_training: f64,
}

impl CostReport {
    pub fn new(inputs: CostInputs) -> Self {
        assert!(inputs.history >= 1 && inputs.width >= 1 && inputs.layers >= 1 && inputs.batch >= 1);
        let l = inputs.history_tokens();
        let c = inputs.candidates;
        let analytic_edges = attn_edges(l, c);
        let scale = (inputs.width * inputs.layers * inputs.batch) as f64;
        Self {
            history_tokens: l,
            analytic_edges,
            exact_edges: exact_edges(l, c),
            attention_flops: 4.0 * analytic_edges * scale,
            linear_flops: 24.0 * (l + c) as f64 * inputs.width as f64 * scale,
            ratio_attn: ratio_attn(inputs.history, c),
            ratio_linear: ratio_linear(inputs.history, c),
            ratio_training: training_flops_ratio(inputs.history, inputs.width),
            inputs,
        }
    }

    pub fn table(&self) -> String {
        let i = &self.inputs;
        let mut s = String::new();
        writeln!(
            s,
            "T={} C={} d={} layers={} B={} arrangement={}",
            i.history, i.candidates, i.width, i.layers, i.batch, i.arrangement
        )
        .unwrap();
        writeln!(s, "history tokens        {}", self.history_tokens).unwrap();
        writeln!(s, "edges (T^2/2 + CT)    {}", self.analytic_edges).unwrap();
        writeln!(s, "edges (exact mask)    {}", self.exact_edges).unwrap();
        writeln!(s, "attention FLOPs       {:.6e}", self.attention_flops).unwrap();
        writeln!(s, "linear FLOPs          {:.6e}", self.linear_flops).unwrap();
        writeln!(s, "ratio attention       {:.2}", self.ratio_attn).unwrap();
        writeln!(s, "ratio linear          {:.2}", self.ratio_linear).unwrap();
        writeln!(s, "ratio training        {:.2}", self.ratio_training).unwrap();
        s
    }
}

/// CSV over a `(T, C)` grid: one row per point.
pub fn sweep_csv(ts: &[usize], cs: &[usize], width: usize) -> String {
    let mut s = String::from("T,C,analytic_edges,exact_edges,ratio_attn,ratio_linear,ratio_training\n");
    for &t in ts {
        for &c in cs {
            writeln!(
                s,
                "{t},{c},{},{},{},{},{}",
                attn_edges(t, c),
                exact_edges(t, c),
                ratio_attn(t, c),
                ratio_linear(t, c),
                training_flops_ratio(t, width)
            )
            .unwrap();
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{build_mask, LayoutSpec};

    #[test]
    fn edge_formula() {
        assert_eq!(attn_edges(4, 2), 16.0);
        assert_eq!(attn_edges(7, 0), 24.5);
    }

    #[test]
    fn exact_counts_match_mask() {
        let spec = LayoutSpec::preset("LAC").unwrap();
        assert_eq!(count_mask_edges(&build_mask(&spec, 4, 2)), 20);
        assert_eq!(count_mask_edges(&build_mask(&spec, 3, 0)), 6);
        assert_eq!(count_mask_edges(&build_mask(&spec, 2, 2)), 9);
        assert_eq!(count_mask_edges(&VisibilityMask::full(5)), 25);
        for t in 1..20 {
            for c in 0..10 {
                assert_eq!(count_mask_edges(&build_mask(&spec, t, c)), exact_edges(t, c));
            }
        }
    }

    #[test]
    fn ratio_endpoints() {
        for t in [1, 10, 1000] {
            assert_eq!(ratio_attn(t, 0), 4.0);
            assert_eq!(ratio_linear(t, 0), 2.0);
            assert_eq!(ratio_linear(t, t), 1.5);
        }
        assert!((ratio_attn(10, 1_000_000) - 2.0).abs() < 1e-3);
        assert!((ratio_linear(1, 1_000_000) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn ratio_attn_decreases_in_c() {
        for t in [1, 7, 64] {
            let r: Vec<f64> = (0..2000).map(|c| ratio_attn(t, c)).collect();
            assert!(r.windows(2).all(|w| w[1] < w[0]));
        }
    }

    #[test]
    fn training_ratio() {
        assert_eq!(training_ratio_from_share(1.0), 4.0);
        assert_eq!(training_ratio_from_share(0.0), 2.0);
        assert_eq!(training_flops_ratio(64, 64), 3.0);
        assert!((training_flops_ratio(1_000_000, 1) - 4.0).abs() < 1e-5);
        assert!((training_flops_ratio(1, 1_000_000) - 2.0).abs() < 1e-5);
    }

    #[test]
    fn report_and_sweep() {
        let r = CostReport::new(CostInputs::new(1000, 0));
        assert!(r.table().contains("ratio attention       4.00"));
        let csv = sweep_csv(&[1, 2], &[0, 3], 64);
        assert_eq!(csv.lines().count(), 5);
    }
}

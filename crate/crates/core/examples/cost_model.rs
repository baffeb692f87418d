//! Attention and token costs of interleaved versus one-token-per-step
//! layouts, and how many users fit a fixed token budget.
//!
//! Usage: `cargo run --example cost_model`

use layoutlab::cost::{count_mask_edges, CostInputs, CostReport};
use layoutlab::data::batch_by_tokens;
use layoutlab::layout::{build_mask, Arrangement, LayoutSpec};

fn main() -> layoutlab::Result<()> {
    for (t, c) in [(50, 0), (50, 100), (1000, 0), (200, 2000)] {
        let report = CostReport::new(CostInputs::new(t, c));
        println!("{}", report.table());
    }
    let interleaved = CostReport::new(CostInputs { arrangement: Arrangement::Interleaved, ..CostInputs::new(50, 100) });
    println!(
        "interleaved T=50 C=100: {} history tokens, {} exact edges\n",
        interleaved.history_tokens, interleaved.exact_edges
    );

    let lac = LayoutSpec::preset("LAC")?;
    println!("mask check: {} allowed pairs for T=6, C=3", count_mask_edges(&build_mask(&lac, 6, 3)));

    // Users of lengths 10..=50 under a 4096-token budget.
    let lengths: Vec<usize> = (0..400).map(|u| 10 + u % 41).collect();
    for name in ["LAC", "INTERLEAVED"] {
        let spec = LayoutSpec::preset(name)?;
        let tokens: Vec<usize> = lengths.iter().map(|&n| spec.token_count(n)).collect();
        let batches = batch_by_tokens(&tokens, 4096)?;
        println!(
            "{name:<12} {} tokens total, {} batches, {:.1} users per batch",
            tokens.iter().sum::<usize>(),
            batches.len(),
            lengths.len() as f64 / batches.len() as f64
        );
    }
    Ok(())
}

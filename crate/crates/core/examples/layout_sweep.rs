//! Trains several layouts on one synthetic dataset and prints their metrics.
//!
//! Usage: `cargo run --release --example layout_sweep -- [steps] [users] [layouts...]`

use std::time::Instant;

use layoutlab::data::{generate_synthetic, SplitSpec, SyntheticConfig};
use layoutlab::experiment::{prepare, run_layout};
use layoutlab::layout::LayoutSpec;
use layoutlab::metrics::EvalConfig;
use layoutlab::model::{LossWeights, ModelConfig, TrainConfig};

fn main() -> layoutlab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(300);
    let users: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let layouts: Vec<String> = if args.len() > 2 {
        args[2..].to_vec()
    } else {
        ["LAC", "IO_IA_BOTH_PC", "IO_IA_NEXTA", "INPUT_IA", "ITEM_ONLY", "OUT_SAMESTEP_A", "OUT_NEXT_A"]
            .map(String::from)
            .to_vec()
    };

    let synth = SyntheticConfig { users, ..SyntheticConfig::default() };
    let data = generate_synthetic(&synth, 1)?;
    let prepared = prepare(&data.interactions, &SplitSpec::default())?;
    println!(
        "{} users, {} items, {} train sequences",
        prepared.split.users.len(),
        prepared.vocab.real_items(),
        prepared.train.len()
    );

    let model = ModelConfig::default();
    let train =
        TrainConfig { max_steps: steps, epochs: 100, weights: LossWeights::uniform(1), ..TrainConfig::default() };
    let eval = EvalConfig { max_cases: Some(4000), ..EvalConfig::default() };
    println!("{:<16} {:>8} {:>8} {:>8} {:>8}", "layout", "HR@10", "NDCG@10", "RMSE", "secs");
    for name in &layouts {
        let start = Instant::now();
        let (_, run) = run_layout(&prepared, &LayoutSpec::preset(name)?, &model, &train, &eval, 7)?;
        let rmse = run.eval.rmse[0].map_or("-".to_string(), |v| format!("{v:.4}"));
        let hr = if run.eval.retrieval_cases > 0 { format!("{:.4}", run.eval.hr_at(10).unwrap()) } else { "-".into() };
        let nd =
            if run.eval.retrieval_cases > 0 { format!("{:.4}", run.eval.ndcg_at(10).unwrap()) } else { "-".into() };
        println!(
            "{name:<16} {hr:>8} {nd:>8} {rmse:>8} {:>8.1} (train {:.1}s, loss {:.4})",
            start.elapsed().as_secs_f64(),
            run.train.seconds,
            run.train.final_loss().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

//! Trains a LAC model briefly, then feeds it `[unk, item, unk, unk, unk,
//! item]` and prints the last layer's attention maps and the lag-1 mass.
//!
//! Usage: `cargo run --release --example attention_probe [-- STEPS]`

use layoutlab::data::{generate_synthetic, SplitSpec, SyntheticConfig};
use layoutlab::experiment::{prepare, run_layout};
use layoutlab::inference::attention_probe;
use layoutlab::layout::{LayoutSpec, RESERVED};
use layoutlab::metrics::EvalConfig;
use layoutlab::model::{LossWeights, ModelConfig, TrainConfig};

fn main() -> layoutlab::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let synth = SyntheticConfig { users: 2000, items: 100, clusters: 5, ..SyntheticConfig::default() };
    let prepared = prepare(&generate_synthetic(&synth, 2)?.interactions, &SplitSpec::default())?;
    let model = ModelConfig { d: 32, ..ModelConfig::default() };
    let train =
        TrainConfig { max_steps: steps, epochs: 1000, weights: LossWeights::uniform(1), ..TrainConfig::default() };
    let eval = EvalConfig { max_cases: Some(500), ..EvalConfig::default() };
    let (trained, run) = run_layout(&prepared, &LayoutSpec::preset("LAC")?, &model, &train, &eval, 4)?;
    println!("trained {} steps, hr@10 {:.4}", run.train.steps, run.eval.hr_at(10).unwrap());

    let dump = attention_probe(&trained, RESERVED)?;
    let last = dump.layers() - 1;
    for head in 0..dump.heads {
        println!("layer {last} head {head}");
        for q in 0..dump.len {
            let row: Vec<String> = (0..dump.len).map(|k| format!("{:.3}", dump.get(last, head, q, k))).collect();
            println!("  {q}: {}", row.join(" "));
        }
    }
    for layer in 0..dump.layers() {
        println!("layer {layer} lag-1 mass {:.4}", dump.lag_mass(layer));
    }
    println!("row-sum error {:.1e}, masked weight {:.1e}", dump.max_row_sum_error(), dump.max_masked_weight());
    Ok(())
}

//! Trains the lagged action-conditioned layout on a small synthetic dataset,
//! evaluates it against a random ranker, and round-trips a checkpoint.
//!
//! Usage: `cargo run --release --example train_lac [-- STEPS]`

use layoutlab::data::{generate_synthetic, SplitSpec, SyntheticConfig};
use layoutlab::experiment::{prepare, run_layout};
use layoutlab::layout::LayoutSpec;
use layoutlab::metrics::{evaluate, EvalConfig, RandomPredictor};
use layoutlab::model::{load_checkpoint, save_checkpoint, Checkpoint, LossWeights, ModelConfig, TrainConfig};

fn main() -> layoutlab::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let synth = SyntheticConfig { users: 3000, items: 200, clusters: 10, ..SyntheticConfig::default() };
    let prepared = prepare(&generate_synthetic(&synth, 3)?.interactions, &SplitSpec::default())?;
    let model = ModelConfig { d: 32, ..ModelConfig::default() };
    let train =
        TrainConfig { max_steps: steps, epochs: 1000, weights: LossWeights::uniform(1), ..TrainConfig::default() };
    let eval = EvalConfig::default();

    let (trained, run) = run_layout(&prepared, &LayoutSpec::preset("LAC")?, &model, &train, &eval, 5)?;
    let curve = &run.train.curve;
    for p in curve.iter().step_by((curve.len() / 10).max(1)) {
        let item = p.item.unwrap_or(f64::NAN);
        let action = p.action[0].unwrap_or(f64::NAN);
        println!("step {:>5}  loss {:.4}  item {item:.4}  action {action:.4}", p.step, p.total);
    }
    println!("trained {} steps in {:.1}s", run.train.steps, run.train.seconds);
    print!("{}", run.eval.to_kv());

    let random = {
        let baseline =
            RandomPredictor { vocab_size: prepared.vocab.size(), action: prepared.normalizer.mean.clone(), seed: 5 };
        evaluate(&baseline, &prepared.cases, &eval, 5)?
    };
    println!("random ranker hr@10={:.4}", random.hr_at(10).unwrap());

    let path = std::env::temp_dir().join("layoutlab-example-lac.ckpt");
    save_checkpoint(&path, &trained, &Checkpoint { seed: 5, step: run.train.steps })?;
    let (reloaded, meta) = load_checkpoint::<f32>(&path)?;
    let again = evaluate(&reloaded, &prepared.cases, &eval, 5)?;
    println!(
        "reloaded step {} checkpoint, hr@10 {:.4} (was {:.4})",
        meta.step,
        again.hr_at(10).unwrap(),
        run.eval.hr_at(10).unwrap()
    );
    Ok(())
}

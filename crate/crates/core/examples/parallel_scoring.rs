//! Scores many candidate next items after one history in a single forward
//! pass and checks the result against scoring them one at a time.
//!
//! Usage: `cargo run --release --example parallel_scoring [-- CANDIDATES]`

use std::time::Instant;

use layoutlab::data::ItemVocab;
use layoutlab::inference::{retrieve_topk, score_parallel, score_sequential_oracle};
use layoutlab::layout::{LayoutSpec, Step};
use layoutlab::model::{Model, ModelConfig, Normalizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> layoutlab::Result<()> {
    let c: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let vocab = ItemVocab::new((1..=500).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let history: Vec<Step> =
        (0..40).map(|t| Step::new(3 + rng.gen_range(0..500), vec![rng.gen_range(-1.0..1.0)], t)).collect();
    let candidates: Vec<u32> = (0..c).map(|_| 3 + rng.gen_range(0..500)).collect();

    for name in ["LAC", "IO_IA_BOTH_PC", "INTERLEAVED", "ITEM_ONLY"] {
        let config = ModelConfig { vocab_size: vocab.size(), max_len: 100, ..ModelConfig::default() };
        let model: Model<f32> =
            Model::new(config, LayoutSpec::preset(name)?, vocab.clone(), Normalizer::identity(1), 1)?;
        let start = Instant::now();
        let parallel = score_parallel(&model, &history, &candidates)?;
        let t_parallel = start.elapsed();
        let start = Instant::now();
        let oracle = score_sequential_oracle(&model, &history, &candidates)?;
        let t_oracle = start.elapsed();
        println!(
            "{name:<14} {c} candidates: parallel {:>7.2} ms, one at a time {:>8.2} ms, max |diff| {:.2e}",
            t_parallel.as_secs_f64() * 1e3,
            t_oracle.as_secs_f64() * 1e3,
            parallel.max_abs_diff(&oracle)
        );
        if name == "LAC" {
            for row in parallel.rows.iter().take(3) {
                println!(
                    "    item {:>4}  log p {:>8.4}  action {:?}",
                    row.item,
                    row.ret_logprob.unwrap_or(f64::NAN),
                    row.actions
                );
            }
            let top = retrieve_topk(&model, &history, 5)?;
            println!("    untrained top-5 retrieval: {top:?}");
        }
    }
    Ok(())
}

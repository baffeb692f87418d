//! Generates a synthetic stream, writes it as TSV with its ground-truth
//! sidecar, and checks the properties the generator is built to have.
//!
//! Usage: `cargo run --release --example synth_dataset [-- OUT_DIR]`

use std::path::PathBuf;

use layoutlab::data::{
    generate_synthetic, group_by_user, lag1_autocorrelation, mutual_information, quantile_bins, write_interactions,
    SyntheticConfig,
};

fn main() -> layoutlab::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth-out".into()));
    let cfg = SyntheticConfig { users: 3000, ..SyntheticConfig::default() };
    let data = generate_synthetic(&cfg, 11)?;
    std::fs::create_dir_all(&out).map_err(|e| layoutlab::LabError::Io { path: out.clone(), source: e })?;
    write_interactions(&out.join("interactions.tsv"), &data.interactions)?;
    std::fs::write(out.join("ground_truth.json"), data.truth.to_json())
        .map_err(|e| layoutlab::LabError::Io { path: out.clone(), source: e })?;
    println!("{} interactions from {} users written to {}", data.interactions.len(), cfg.users, out.display());
    println!("action mean {:.3}, sd {:.3}", data.truth.action_mean[0], data.truth.action_sd[0]);

    let users = group_by_user(&data.interactions);
    let series: Vec<Vec<f64>> = users.iter().map(|u| u.interactions.iter().map(|r| r.action[0]).collect()).collect();
    println!(
        "lag-1 autocorrelation {:.3} (alpha {})",
        lag1_autocorrelation(series.iter().map(Vec::as_slice)),
        cfg.alpha
    );

    // Does the previous action add information about the next item?
    let bins = quantile_bins(&data.interactions.iter().map(|r| r.action[0]).collect::<Vec<_>>(), 4);
    let (mut with_action, mut item_only, mut next) = (Vec::new(), Vec::new(), Vec::new());
    let mut offset = 0;
    for u in &users {
        let it = &u.interactions;
        for t in 1..it.len().saturating_sub(1) {
            with_action.push((it[t].item, bins[offset + t - 1]));
            item_only.push(it[t].item);
            next.push(it[t + 1].item);
        }
        offset += it.len();
    }
    println!(
        "I(i_t; i_t+1) = {:.4} nats, I((i_t, a_t-1); i_t+1) = {:.4} nats",
        mutual_information(&item_only, &next),
        mutual_information(&with_action, &next)
    );

    // How much of the same-step action the history cue explains.
    let (mut residual, mut without_cue, mut n) = (0.0, 0.0, 0.0);
    for u in &users {
        let mut history = Vec::new();
        for w in u.interactions.windows(2) {
            history.push((w[0].item, w[0].action.clone()));
            let full = data.truth.expected_action(w[1].item, &w[0].action, &history);
            let cue = data.truth.history_cue(w[1].item, &history);
            residual += (w[1].action[0] - full[0]).powi(2);
            without_cue += (w[1].action[0] - full[0] + cfg.cue_strength * cue[0]).powi(2);
            n += 1.0;
        }
    }
    println!("mean square error of the true mean {:.4}, without the cue term {:.4}", residual / n, without_cue / n);
    Ok(())
}

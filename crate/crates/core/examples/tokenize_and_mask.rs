//! Shows how one short interaction sequence becomes tokens, targets and an
//! attention mask under a few layouts, including packed scoring candidates.
//!
//! Usage: `cargo run --example tokenize_and_mask`

use layoutlab::layout::{build_mask, tokenize_steps, ActionInput, LayoutSpec, Step, VisibilityMask};

fn show_mask(mask: &VisibilityMask) {
    for q in 0..mask.size() {
        let row: String = mask.row(q).iter().map(|&b| if b { '1' } else { '.' }).collect();
        println!("    {row}");
    }
}

fn main() -> layoutlab::Result<()> {
    let steps: Vec<Step> = [(5, 0.4), (9, -1.2), (5, 0.8), (12, 0.1)]
        .iter()
        .enumerate()
        .map(|(t, &(item, a))| Step::new(item, vec![a], t as i64))
        .collect();
    for name in ["LAC", "IO_IA_BOTH_PC", "INTERLEAVED"] {
        let spec = LayoutSpec::preset(name)?;
        let seq = tokenize_steps(&steps, &spec)?;
        println!("{name}: {} tokens", seq.len());
        for (p, tok) in seq.tokens.iter().enumerate() {
            let action = match &tok.input.action {
                ActionInput::Absent => "-".to_string(),
                ActionInput::Sentinel => "sentinel".to_string(),
                ActionInput::Value(v) => format!("{:+.1}", v[0]),
            };
            let mut targets: Vec<String> = Vec::new();
            if let Some(s) = &tok.item_target {
                targets.push(format!("{}={}", s.channel, s.value.map_or("excluded".into(), |v| v.to_string())));
            }
            for s in &tok.action_targets {
                targets.push(format!(
                    "{}={}",
                    s.channel,
                    s.value.as_ref().map_or("excluded".into(), |v| format!("{:+.1}", v[0]))
                ));
            }
            println!(
                "  {p}: {:?} step {} item {} action {action} -> {}",
                tok.kind,
                tok.step,
                tok.input.item,
                targets.join(", ")
            );
        }
        println!("  causal mask:");
        show_mask(&build_mask(&spec, steps.len(), 0));
    }
    println!("history of 4 tokens plus 3 packed candidates:");
    show_mask(&VisibilityMask::block_causal(4, 3));
    Ok(())
}

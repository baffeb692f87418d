//! Checks every preset and the known anti-patterns against the layout
//! principles and prints one verdict row per layout.
//!
//! Usage: `cargo run --example validate_layouts [-- SPEC_FILE]`

use layoutlab::layout::{anti_patterns, validate, LayoutSpec, P2Status, P3Status, PRESETS};

fn main() -> layoutlab::Result<()> {
    let mut specs: Vec<LayoutSpec> = PRESETS.iter().map(|p| LayoutSpec::preset(p)).collect::<Result<_, _>>()?;
    specs.extend(anti_patterns());
    if let Some(path) = std::env::args().nth(1) {
        specs.push(LayoutSpec::load(&path)?);
    }
    println!("{:<22} {:<6} {:<6} dominated by", "layout", "P3", "P2");
    for spec in &specs {
        let r = validate(spec);
        let p3 = if r.p3.status == P3Status::Pass { "pass" } else { "FAIL" };
        let p2 = match r.p2.status {
            P2Status::Pass => "pass",
            P2Status::Fail => "FAIL",
            P2Status::NotApplicable => "n/a",
        };
        println!("{:<22} {p3:<6} {p2:<6} {}", spec.name, r.p1.dominated_by.join(", "));
    }
    // Full report for one leaking layout.
    print!("\n{}", validate(&anti_patterns()[0]).summary());
    Ok(())
}

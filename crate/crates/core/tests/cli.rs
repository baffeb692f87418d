//! Drives the command line in-process and checks exit codes and outputs.

use std::path::Path;

use layoutlab::cli::{run, EXIT_FAILURE, EXIT_IO, EXIT_OK, EXIT_USAGE};

fn lab(args: &[&str]) -> i32 {
    run(std::iter::once("layoutlab").chain(args.iter().copied()))
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn manifest_names(dir: &Path) -> Vec<String> {
    read(&dir.join("MANIFEST.sha256")).lines().map(|l| l.split_whitespace().nth(1).unwrap().to_string()).collect()
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lab(&["validate", "LAC"]), EXIT_OK);
    let leak = dir.path().join("self.layout");
    std::fs::write(&leak, "name=SELF\ninputs=ITEM@0,ACTION@0\ntargets=ACTION@0\n").unwrap();
    assert_eq!(lab(&["validate", leak.to_str().unwrap()]), EXIT_FAILURE);
    assert_eq!(lab(&["validate", "NOT_A_PRESET"]), EXIT_USAGE);
    assert_eq!(lab(&["validate", "/no/such/file.layout"]), EXIT_IO);
    assert_eq!(lab(&["frobnicate"]), EXIT_USAGE);

    let out = dir.path().join("v");
    assert_eq!(lab(&["validate", "IO_IA_NEXTA", "--out-dir", out.to_str().unwrap()]), EXIT_OK);
    let report: serde_json::Value = serde_json::from_str(&read(&out.join("validation.json"))).unwrap();
    assert_eq!(report["p3"]["status"], "PASS");
    assert_eq!(report["p2"]["status"], "FAIL");
    assert_eq!(manifest_names(&out), ["layout.txt", "validation.json"]);
}

#[test]
fn cost_report_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cost");
    assert_eq!(lab(&["cost", "--T", "1000", "--C", "0", "--sweep", "--out-dir", out.to_str().unwrap()]), EXIT_OK);
    let report: serde_json::Value = serde_json::from_str(&read(&out.join("cost.json"))).unwrap();
    assert_eq!(report["ratio_attn"], 4.0);
    assert_eq!(report["ratio_linear"], 2.0);
    let sweep = read(&out.join("sweep.csv"));
    // T in 1, 2, ..., 512, 1000 and C = 0 only.
    assert_eq!(sweep.lines().count(), 1 + 11);
    assert_eq!(lab(&["cost", "--T", "0", "--C", "1"]), EXIT_USAGE);
}

#[test]
fn full_lifecycle_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("synth.cfg"),
        "seed=4\nsynth.users=150\nsynth.items=30\nsynth.clusters=3\nsynth.min_len=6\nsynth.max_len=12\n",
    )
    .unwrap();
    let synth = d.join("data");
    assert_eq!(lab(&["synth", d.join("synth.cfg").to_str().unwrap(), synth.to_str().unwrap()]), EXIT_OK);
    assert_eq!(manifest_names(&synth), ["interactions.tsv", "ground_truth.json", "config.txt"]);

    let cfg = d.join("run.cfg");
    std::fs::write(
        &cfg,
        "seed=7\nlayout=LAC\ndata.source=tsv\ndata.path=data/interactions.tsv\nmodel.d=16\nmodel.heads=2\n\
         model.max_len=16\ntrain.max_steps=8\ntrain.epochs=4\ntrain.batch_size=32\nsplit.k_core=2\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (d.join("a"), d.join("b"));
    assert_eq!(lab(&["train", cfg, "--out-dir", a.to_str().unwrap()]), EXIT_OK);
    assert_eq!(lab(&["train", cfg, "--out-dir", b.to_str().unwrap()]), EXIT_OK);
    assert_eq!(read(&a.join("MANIFEST.sha256")), read(&b.join("MANIFEST.sha256")));
    assert_eq!(read(&a.join("loss.csv")).lines().count(), 1 + 8);
    // Missing output directory is a usage error.
    assert_eq!(lab(&["train", cfg]), EXIT_USAGE);

    let ckpt = a.join("model.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let e = d.join("eval");
    assert_eq!(lab(&["eval", cfg, ckpt, "--out-dir", e.to_str().unwrap()]), EXIT_OK);
    assert!(read(&e.join("eval.txt")).contains("hr@10="));

    let rows = read(&synth.join("interactions.tsv"));
    let user1: String = rows.lines().filter(|l| l.starts_with("1\t")).map(|l| format!("{l}\n")).collect();
    std::fs::write(d.join("hist.tsv"), &user1).unwrap();
    std::fs::write(d.join("cands.txt"), "# raw ids\n1\n2\n3\n").unwrap();
    let (hist, cands) = (d.join("hist.tsv"), d.join("cands.txt"));
    let s = d.join("score");
    assert_eq!(
        lab(&[
            "score",
            ckpt,
            hist.to_str().unwrap(),
            cands.to_str().unwrap(),
            "--oracle",
            "--out-dir",
            s.to_str().unwrap()
        ]),
        EXIT_OK
    );
    let table = read(&s.join("scores.csv"));
    assert_eq!(table.lines().next(), Some("candidate_id,ret_logprob,action_0"));
    assert_eq!(table.lines().count(), 4);
    std::fs::write(d.join("bad.txt"), "999999\n").unwrap();
    assert_eq!(lab(&["score", ckpt, hist.to_str().unwrap(), d.join("bad.txt").to_str().unwrap()]), EXIT_USAGE);

    let at = d.join("attn");
    assert_eq!(lab(&["attn", ckpt, "--figure2-probe", "--out-dir", at.to_str().unwrap()]), EXIT_OK);
    let m = read(&at.join("attn_layer1_head0.csv"));
    assert_eq!(m.lines().count(), 7);
    assert_eq!(lab(&["attn", ckpt, hist.to_str().unwrap()]), EXIT_OK);
    assert_eq!(lab(&["attn", ckpt]), EXIT_USAGE);
}

#[test]
fn leaking_layout_is_refused_unless_allowed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("leak.layout"), "name=SELF\ninputs=ITEM@0,ACTION@0\ntargets=ACTION@0\n").unwrap();
    let base = "seed=1\nlayout=leak.layout\nsynth.users=60\nsynth.items=20\nsynth.clusters=2\nsynth.min_len=5\n\
                synth.max_len=8\nmodel.d=8\nmodel.heads=2\nmodel.max_len=10\ntrain.max_steps=2\nsplit.k_core=1\n";
    std::fs::write(d.join("refused.cfg"), base).unwrap();
    std::fs::write(d.join("allowed.cfg"), format!("{base}train.allow_leakage=true\n")).unwrap();
    let out = d.join("out");
    assert_eq!(
        lab(&["train", d.join("refused.cfg").to_str().unwrap(), "--out-dir", out.to_str().unwrap()]),
        EXIT_FAILURE
    );
    assert_eq!(lab(&["train", d.join("allowed.cfg").to_str().unwrap(), "--out-dir", out.to_str().unwrap()]), EXIT_OK);
}

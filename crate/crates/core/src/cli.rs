//! The `layoutlab` command line. Every subcommand prints the resolved
//! settings it ran with and, given an output directory, writes its files
//! there together with a `MANIFEST.sha256` listing.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use layoutlab_autodiff::Scalar;
use sha2::{Digest, Sha256};

use crate::config::{read_synth_file, synthetic_text, RunConfig};
use crate::cost::{sweep_csv, CostInputs, CostReport};
use crate::data::{generate_synthetic, load_interactions, write_interactions, Interaction};
use crate::error::{LabError, Result};
use crate::experiment::{prepare, Prepared};
use crate::inference::{attention_probe, dump_attention, score_parallel, score_sequential_oracle, AttentionDump};
use crate::layout::{build_mask, tokenize_steps, validate, Arrangement, LayoutSpec, Step, RESERVED};
use crate::metrics::evaluate;
use crate::model::{load_checkpoint, save_checkpoint, train, Checkpoint, Model, Precision};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "layoutlab", version, about = "Token-layout laboratory for generative recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a layout spec (preset name or file); exits 1 if it leaks targets.
    Validate {
        spec: String,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate a synthetic interaction stream and its ground-truth sidecar.
    Synth { config: PathBuf, out: PathBuf },
    /// Train the configured layout; writes a checkpoint and the loss curve.
    Train {
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured dataset's held-out step.
    Eval {
        config: PathBuf,
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score candidates after a history in one forward pass.
    Score {
        checkpoint: PathBuf,
        /// Interaction TSV of one user's history.
        history: PathBuf,
        /// One raw item id per line.
        candidates: PathBuf,
        /// Also run the one-candidate-at-a-time oracle and require agreement.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Attention costs of candidate scoring.
    Cost {
        #[arg(long = "T")]
        t: usize,
        #[arg(long = "C")]
        c: usize,
        /// CSV over T and C in powers of two up to the given values.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long)]
        interleaved: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Dump attention maps for a sequence file or the repeated-item probe.
    Attn {
        checkpoint: PathBuf,
        /// Interaction TSV; not needed with --figure2-probe.
        sequence: Option<PathBuf>,
        /// Probe with [unk, item, unk, unk, unk, item].
        #[arg(long)]
        figure2_probe: bool,
        /// Raw id of the probe item; defaults to the first vocabulary item.
        #[arg(long)]
        item: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

/// Runs the command line and returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &LabError) -> i32 {
    match e {
        LabError::Io { .. } => EXIT_IO,
        LabError::Parse { .. }
        | LabError::Config(_)
        | LabError::InvalidArgument(_)
        | LabError::UnknownPreset { .. }
        | LabError::InvalidSpec(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Validate { spec, json, out_dir } => cmd_validate(&spec, json, out_dir.as_deref()),
        Command::Synth { config, out } => cmd_synth(&config, &out),
        Command::Train { config, out_dir } => cmd_train(&config, out_dir),
        Command::Eval { config, checkpoint, out_dir } => cmd_eval(&config, &checkpoint, out_dir),
        Command::Score { checkpoint, history, candidates, oracle, tolerance, out_dir } => {
            cmd_score(&checkpoint, &history, &candidates, oracle, tolerance, out_dir.as_deref())
        }
        Command::Cost { t, c, sweep, width, layers, interleaved, out_dir } => {
            cmd_cost(t, c, sweep, width, layers, interleaved, out_dir.as_deref())
        }
        Command::Attn { checkpoint, sequence, figure2_probe, item, out_dir } => {
            cmd_attn(&checkpoint, sequence.as_deref(), figure2_probe, item, out_dir.as_deref())
        }
    }
}

/// Collects output files and writes them with a hash manifest.
struct Outputs {
    dir: Option<PathBuf>,
    /// Name, contents, and whether the file still has to be written.
    files: Vec<(String, Vec<u8>, bool)>,
}

impl Outputs {
    fn new(dir: Option<&Path>) -> Self {
        Self { dir: dir.map(Path::to_path_buf), files: Vec::new() }
    }

    fn add(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), contents.into(), true));
    }

    /// Lists a file some other routine already wrote into the directory.
    fn add_existing(&mut self, name: &str) -> Result<()> {
        let path = self.dir.as_ref().expect("output directory set").join(name);
        let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
        self.files.push((name.to_string(), bytes, false));
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let Some(dir) = self.dir else { return Ok(()) };
        ensure_dir(&dir)?;
        let mut manifest = String::new();
        for (name, bytes, pending) in &self.files {
            if *pending {
                let path = dir.join(name);
                std::fs::write(&path, bytes).map_err(|e| LabError::io(&path, e))?;
            }
            let hash: String = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
            writeln!(manifest, "{hash}  {name}").unwrap();
        }
        let path = dir.join("MANIFEST.sha256");
        std::fs::write(&path, manifest).map_err(|e| LabError::io(&path, e))?;
        println!("wrote {} files to {}", self.files.len() + 1, dir.display());
        Ok(())
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn cmd_validate(arg: &str, json: bool, out_dir: Option<&Path>) -> Result<i32> {
    let spec = LayoutSpec::load(arg)?;
    println!("spec={arg}");
    let report = validate(&spec);
    if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.summary());
    }
    let mut out = Outputs::new(out_dir);
    out.add("layout.txt", spec.to_text());
    out.add("validation.json", report.to_json());
    out.finish()?;
    Ok(if report.p3_pass() { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_synth(config: &Path, out_dir: &Path) -> Result<i32> {
    let (cfg, seed) = read_synth_file(config)?;
    let resolved = format!("seed={seed}\n{}", synthetic_text(&cfg));
    print!("{resolved}");
    let data = generate_synthetic(&cfg, seed)?;
    ensure_dir(out_dir)?;
    write_interactions(&out_dir.join("interactions.tsv"), &data.interactions)?;
    let mut out = Outputs::new(Some(out_dir));
    out.add_existing("interactions.tsv")?;
    out.add("ground_truth.json", data.truth.to_json());
    out.add("config.txt", resolved);
    println!("{} interactions from {} users", data.interactions.len(), cfg.users);
    out.finish()?;
    Ok(EXIT_OK)
}

fn load_run(config: &Path) -> Result<(RunConfig, LayoutSpec, Prepared)> {
    let run = RunConfig::load(config)?;
    print!("{}", run.to_text());
    let spec = run.layout_spec()?;
    let prepared = prepare(&run.interactions()?, &run.split)?;
    println!(
        "{} users, {} items, {} train sequences, {} held-out cases",
        prepared.split.users.len(),
        prepared.vocab.real_items(),
        prepared.train.len(),
        prepared.cases.len()
    );
    Ok((run, spec, prepared))
}

fn out_dir_for(run: &RunConfig, flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| run.out_dir.clone())
        .ok_or_else(|| LabError::Config("no output directory: pass --out-dir or set out_dir".into()))
}

fn cmd_train(config: &Path, out_dir: Option<PathBuf>) -> Result<i32> {
    let (run, spec, prepared) = load_run(config)?;
    let dir = out_dir_for(&run, out_dir)?;
    match run.model.precision {
        Precision::F32 => train_and_save::<f32>(&run, spec, &prepared, &dir),
        Precision::F64 => train_and_save::<f64>(&run, spec, &prepared, &dir),
    }
}

fn train_and_save<T: Scalar>(run: &RunConfig, spec: LayoutSpec, prepared: &Prepared, dir: &Path) -> Result<i32> {
    let spec = spec.with_action_dims(prepared.action_dims)?;
    let tc = run.train_config(prepared.action_dims)?;
    let mut model: Model<T> = Model::new(
        prepared.model_config(&run.model),
        spec,
        prepared.vocab.clone(),
        prepared.normalizer.clone(),
        run.seed,
    )?;
    let report = train(&mut model, &prepared.train, &tc, run.seed)?;
    println!(
        "trained {} steps ({} epochs, {} tokens) in {:.1}s, final loss {:.4}",
        report.steps,
        report.epochs_completed,
        report.tokens,
        report.seconds,
        report.final_loss().unwrap_or(f64::NAN)
    );
    ensure_dir(dir)?;
    save_checkpoint(&dir.join("model.ckpt"), &model, &Checkpoint { seed: run.seed, step: report.steps })?;
    let mut out = Outputs::new(Some(dir));
    out.add("config.txt", run.to_text());
    out.add_existing("model.ckpt")?;
    out.add("loss.csv", report.loss_csv());
    out.finish()?;
    Ok(EXIT_OK)
}

fn cmd_eval(config: &Path, checkpoint: &Path, out_dir: Option<PathBuf>) -> Result<i32> {
    let (run, _, prepared) = load_run(config)?;
    let (model, meta) = load_checkpoint::<f64>(checkpoint)?;
    println!("checkpoint={} (seed {}, step {})", checkpoint.display(), meta.seed, meta.step);
    if model.vocab != prepared.vocab {
        return Err(LabError::Config("checkpoint vocabulary differs from the configured dataset".into()));
    }
    let report = evaluate(&model, &prepared.cases, &run.eval, run.seed)?;
    print!("{}", report.to_kv());
    let mut out = Outputs::new(Some(&out_dir_for(&run, out_dir)?));
    out.add("config.txt", run.to_text());
    out.add("eval.txt", report.to_kv());
    out.add("eval.csv", format!("{}\n{}\n", report.csv_header(), report.csv_row()));
    out.finish()?;
    Ok(EXIT_OK)
}

/// Reads a history file as model-ready steps: vocabulary ids and normalized
/// actions, ordered by timestamp.
fn read_history<T: Scalar>(model: &Model<T>, path: &Path) -> Result<Vec<Step>> {
    let rows: Vec<Interaction> = load_interactions(path, false)?;
    if rows.is_empty() {
        return Err(LabError::Data(format!("{} holds no interactions", path.display())));
    }
    if rows.iter().any(|r| r.user != rows[0].user) {
        return Err(LabError::Data(format!("{} mixes several users", path.display())));
    }
    if rows[0].action.len() != model.config.action_dims {
        return Err(LabError::Data(format!(
            "history has {} action columns, the model expects {}",
            rows[0].action.len(),
            model.config.action_dims
        )));
    }
    let mut steps = model.vocab.steps(&rows);
    for s in &mut steps {
        s.action = s.action.as_ref().map(|a| model.normalizer.normalize(a));
    }
    Ok(steps)
}

fn read_candidates<T: Scalar>(model: &Model<T>, path: &Path) -> Result<Vec<u32>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| LabError::Parse { path: path.display().to_string(), line: n + 1, message };
        let raw: u64 = line.parse().map_err(|_| err(format!("bad item id `{line}`")))?;
        out.push(model.vocab.id(raw).ok_or_else(|| err(format!("item {raw} is not in the model vocabulary")))?);
    }
    if out.is_empty() {
        return Err(LabError::Data(format!("{} lists no candidates", path.display())));
    }
    Ok(out)
}

fn cmd_score(
    checkpoint: &Path,
    history: &Path,
    candidates: &Path,
    oracle: bool,
    tolerance: f64,
    out_dir: Option<&Path>,
) -> Result<i32> {
    let (model, _) = load_checkpoint::<f64>(checkpoint)?;
    println!(
        "checkpoint={}\nlayout={}\nhistory={}\ncandidates={}\noracle={oracle}\ntolerance={tolerance}",
        checkpoint.display(),
        model.spec.name,
        history.display(),
        candidates.display()
    );
    let steps = read_history(&model, history)?;
    let cands = read_candidates(&model, candidates)?;
    let table = score_parallel(&model, &steps, &cands)?;
    let csv = table.to_csv(&model);
    let mut out = Outputs::new(out_dir);
    let mut code = EXIT_OK;
    if oracle {
        let reference = score_sequential_oracle(&model, &steps, &cands)?;
        let diff = table.max_abs_diff(&reference);
        println!("max |parallel - oracle| = {diff:.3e}");
        out.add("oracle.csv", reference.to_csv(&model));
        if !(diff < tolerance) {
            eprintln!("parallel scores disagree with the sequential oracle");
            code = EXIT_FAILURE;
        }
    }
    if out_dir.is_none() {
        print!("{csv}");
    }
    out.add("scores.csv", csv);
    out.finish()?;
    Ok(code)
}

fn cmd_cost(
    t: usize,
    c: usize,
    sweep: bool,
    width: usize,
    layers: usize,
    interleaved: bool,
    out_dir: Option<&Path>,
) -> Result<i32> {
    if t == 0 || width == 0 || layers == 0 {
        return Err(LabError::InvalidArgument("T, width and layers must be positive".into()));
    }
    let arrangement = if interleaved { Arrangement::Interleaved } else { Arrangement::NonInterleaved };
    println!("T={t}\nC={c}\nwidth={width}\nlayers={layers}\narrangement={arrangement}\nsweep={sweep}");
    let mut out = Outputs::new(out_dir);
    let report = CostReport::new(CostInputs { width, layers, arrangement, ..CostInputs::new(t, c) });
    print!("{}", report.table());
    out.add("cost.json", serde_json::to_string_pretty(&report)?);
    if sweep {
        let grid = |max: usize, from: usize| {
            let mut v: Vec<usize> = std::iter::successors(Some(from), |&x| Some(if x == 0 { 1 } else { x * 2 }))
                .take_while(|&x| x <= max)
                .collect();
            if v.last() != Some(&max) {
                v.push(max);
            }
            v
        };
        let csv = sweep_csv(&grid(t, 1), &grid(c, 0), width);
        if out_dir.is_none() {
            print!("{csv}");
        }
        out.add("sweep.csv", csv);
    }
    out.finish()?;
    Ok(EXIT_OK)
}

fn cmd_attn(
    checkpoint: &Path,
    sequence: Option<&Path>,
    probe: bool,
    item: Option<u64>,
    out_dir: Option<&Path>,
) -> Result<i32> {
    let (model, _) = load_checkpoint::<f64>(checkpoint)?;
    println!("checkpoint={}\nlayout={}", checkpoint.display(), model.spec.name);
    let dump: AttentionDump = match (probe, sequence) {
        (true, None) => {
            let id = match item {
                Some(raw) => model
                    .vocab
                    .id(raw)
                    .ok_or_else(|| LabError::InvalidArgument(format!("item {raw} is not in the model vocabulary")))?,
                None => RESERVED,
            };
            println!("probe item={}", model.vocab.raw(id).unwrap_or_default());
            attention_probe(&model, id)?
        }
        (false, Some(path)) => {
            println!("sequence={}", path.display());
            let steps = read_history(&model, path)?;
            if steps.len() > model.config.max_len {
                return Err(LabError::InvalidArgument(format!(
                    "sequence has {} steps, the model supports {}",
                    steps.len(),
                    model.config.max_len
                )));
            }
            let seq = tokenize_steps(&steps, &model.spec)?;
            dump_attention(&model, &seq, &build_mask(&model.spec, steps.len(), 0))?
        }
        _ => return Err(LabError::InvalidArgument("pass either a sequence file or --figure2-probe".into())),
    };
    let mut out = Outputs::new(out_dir);
    let last = dump.layers() - 1;
    for layer in 0..dump.layers() {
        println!("layer {layer} lag mass {:.4}", dump.lag_mass(layer));
        for head in 0..dump.heads {
            let csv = dump.matrix_csv(layer, head);
            if out_dir.is_none() && layer == last {
                println!("# layer {layer} head {head}");
                print!("{csv}");
            }
            out.add(&format!("attn_layer{layer}_head{head}.csv"), csv);
        }
    }
    println!("max row-sum error {:.2e}", dump.max_row_sum_error());
    println!("max masked weight {:.2e}", dump.max_masked_weight());
    out.add("attention.json", serde_json::to_string(&dump)?);
    out.finish()?;
    Ok(EXIT_OK)
}

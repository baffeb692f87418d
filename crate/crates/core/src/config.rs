//! Flat `key=value` run configs with section prefixes (`model.d=64`).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{generate_synthetic, load_interactions, Interaction, SplitSpec, SplitStrategy, SyntheticConfig};
use crate::error::{LabError, Result};
use crate::layout::LayoutSpec;
use crate::metrics::EvalConfig;
use crate::model::{LossWeights, ModelConfig, Precision, TrainConfig};

/// Parsed `key=value` lines. Keys are consumed as they are read so that
/// leftovers can be reported as unknown.
#[derive(Clone, Debug)]
pub struct KvFile {
    path: String,
    entries: BTreeMap<String, (String, usize)>,
}

impl KvFile {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| LabError::Parse { path: path.to_string(), line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(err(format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { path: path.to_string(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn take_str(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: std::fmt::Display,
    {
        match self.take_str(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| LabError::Parse {
                path: self.path.clone(),
                line,
                message: format!("`{key}`: cannot parse `{v}`: {e}"),
            }),
        }
    }

    fn set<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<()>
    where
        V::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn list<V: FromStr>(&mut self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: std::fmt::Display,
    {
        let Some((v, line)) = self.take_str(key) else { return Ok(None) };
        v.split(',')
            .map(|s| {
                s.trim().parse().map_err(|e| LabError::Parse {
                    path: self.path.clone(),
                    line,
                    message: format!("`{key}`: cannot parse `{s}`: {e}"),
                })
            })
            .collect::<Result<Vec<V>>>()
            .map(Some)
    }

    /// Errors on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => {
                Err(LabError::Parse { path: self.path, line, message: format!("unknown key `{k}`") })
            }
        }
    }
}

impl FromStr for Precision {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(LabError::Config(format!("unknown precision `{other}` (f32, f64)"))),
        }
    }
}

/// Reads `synth.*` keys on top of the defaults.
pub fn read_synthetic(kv: &mut KvFile) -> Result<SyntheticConfig> {
    let mut c = SyntheticConfig::default();
    kv.set("synth.users", &mut c.users)?;
    kv.set("synth.items", &mut c.items)?;
    kv.set("synth.clusters", &mut c.clusters)?;
    kv.set("synth.attr_dim", &mut c.attr_dim)?;
    kv.set("synth.min_len", &mut c.min_len)?;
    kv.set("synth.max_len", &mut c.max_len)?;
    kv.set("synth.action_dims", &mut c.action_dims)?;
    kv.set("synth.alpha", &mut c.alpha)?;
    kv.set("synth.item_effect", &mut c.item_effect)?;
    kv.set("synth.noise", &mut c.noise)?;
    kv.set("synth.sharpness", &mut c.sharpness)?;
    kv.set("synth.cue_strength", &mut c.cue_strength)?;
    kv.set("synth.cue_focus", &mut c.cue_focus)?;
    kv.set("synth.popularity_exponent", &mut c.popularity_exponent)?;
    kv.set("synth.start_timestamp", &mut c.start_timestamp)?;
    kv.set("synth.interval_seconds", &mut c.interval_seconds)?;
    c.validate()?;
    Ok(c)
}

/// `synth.*` lines for `c`.
pub fn synthetic_text(c: &SyntheticConfig) -> String {
    format!(
        "synth.users={}\nsynth.items={}\nsynth.clusters={}\nsynth.attr_dim={}\nsynth.min_len={}\nsynth.max_len={}\n\
         synth.action_dims={}\nsynth.alpha={}\nsynth.item_effect={}\nsynth.noise={}\nsynth.sharpness={}\n\
         synth.cue_strength={}\nsynth.cue_focus={}\nsynth.popularity_exponent={}\nsynth.start_timestamp={}\nsynth.interval_seconds={}\n",
        c.users,
        c.items,
        c.clusters,
        c.attr_dim,
        c.min_len,
        c.max_len,
        c.action_dims,
        c.alpha,
        c.item_effect,
        c.noise,
        c.sharpness,
        c.cue_strength,
        c.cue_focus,
        c.popularity_exponent,
        c.start_timestamp,
        c.interval_seconds
    )
}

/// Synthetic generator settings plus the seed, as read by `synth`.
pub fn read_synth_file(path: &Path) -> Result<(SyntheticConfig, u64)> {
    let mut kv = KvFile::load(path)?;
    let seed = kv.take("seed")?.ok_or_else(|| LabError::Config(format!("{}: `seed` is required", path.display())))?;
    let c = read_synthetic(&mut kv)?;
    kv.finish()?;
    Ok((c, seed))
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Tsv { path: PathBuf, header: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Seed for the synthetic generator; defaults to `seed`.
    pub data_seed: u64,
    /// Preset name or spec file path.
    pub layout: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub split: SplitSpec,
    pub eval: EvalConfig,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses a run config; relative paths resolve against `base`.
    pub fn parse(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut kv = KvFile::parse(text, origin)?;
        let seed: u64 = kv.take("seed")?.ok_or_else(|| LabError::Config(format!("{origin}: `seed` is required")))?;
        let data_seed = kv.take("data.seed")?.unwrap_or(seed);
        let resolve = |p: String| {
            let p = PathBuf::from(p);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        let layout = match kv.take_str("layout") {
            Some((v, _)) if LayoutSpec::preset(&v).is_ok() => v,
            Some((v, _)) => resolve(v).display().to_string(),
            None => return Err(LabError::Config(format!("{origin}: `layout` is required"))),
        };
        let out_dir = kv.take_str("out_dir").map(|(v, _)| resolve(v));

        let mut model = ModelConfig::default();
        kv.set("model.d", &mut model.d)?;
        kv.set("model.layers", &mut model.layers)?;
        kv.set("model.heads", &mut model.heads)?;
        kv.set("model.max_len", &mut model.max_len)?;
        kv.set("model.dropout", &mut model.dropout)?;
        kv.set("model.precision", &mut model.precision)?;

        let source: String = kv.take("data.source")?.unwrap_or_else(|| "synthetic".into());
        let data = match source.as_str() {
            "synthetic" => DataSource::Synthetic(read_synthetic(&mut kv)?),
            "tsv" => {
                let (p, _) = kv
                    .take_str("data.path")
                    .ok_or_else(|| LabError::Config(format!("{origin}: `data.path` is required for tsv data")))?;
                DataSource::Tsv { path: resolve(p), header: kv.take("data.header")?.unwrap_or(false) }
            }
            other => return Err(LabError::Config(format!("unknown data.source `{other}` (synthetic, tsv)"))),
        };

        let mut train = TrainConfig::default();
        kv.set("train.lr", &mut train.lr)?;
        kv.set("train.warmup_steps", &mut train.warmup_steps)?;
        kv.set("train.max_steps", &mut train.max_steps)?;
        kv.set("train.epochs", &mut train.epochs)?;
        kv.set("train.batch_size", &mut train.batch_size)?;
        train.max_tokens = kv.take("train.max_tokens")?;
        if let Some(c) = kv.take::<f64>("train.clip_norm")? {
            train.clip_norm = (c > 0.0).then_some(c);
        }
        kv.set("train.shuffle", &mut train.shuffle)?;
        kv.set("train.allow_leakage", &mut train.allow_leakage)?;
        let item_w = kv.take("train.weight.item")?.unwrap_or(1.0);
        let action_w = kv.list("train.weight.action")?;
        // Action weights default to 1 per dimension once the data is known.
        train.weights = LossWeights { item: item_w, action: action_w.unwrap_or_default() };

        let mut split = SplitSpec::default();
        kv.set::<SplitStrategy>("split.strategy", &mut split.strategy)?;
        kv.set("split.k_core", &mut split.k_core)?;

        let mut eval = EvalConfig::default();
        if let Some(ks) = kv.list("eval.ks")? {
            eval.ks = ks;
        }
        kv.set("eval.negatives", &mut eval.negatives)?;
        kv.set("eval.batch_size", &mut eval.batch_size)?;
        eval.max_cases = kv.take("eval.max_cases")?;
        kv.finish()?;

        if let DataSource::Tsv { path, .. } = &data {
            if !path.exists() {
                return Err(LabError::Config(format!("data file {} does not exist", path.display())));
            }
        }
        Ok(Self { seed, data_seed, layout, model, train, data, split, eval, out_dir })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text, &path.display().to_string(), path.parent().unwrap_or(Path::new(".")))
    }

    pub fn layout_spec(&self) -> Result<LayoutSpec> {
        LayoutSpec::load(&self.layout)
    }

    /// Loads or generates the interaction stream.
    pub fn interactions(&self) -> Result<Vec<Interaction>> {
        match &self.data {
            DataSource::Synthetic(c) => Ok(generate_synthetic(c, self.data_seed)?.interactions),
            DataSource::Tsv { path, header } => load_interactions(path, *header),
        }
    }

    /// Fills the per-dimension action weights once `action_dims` is known.
    pub fn train_config(&self, action_dims: usize) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        if t.weights.action.is_empty() {
            t.weights.action = vec![1.0; action_dims];
        }
        if t.weights.action.len() != action_dims {
            return Err(LabError::Config(format!(
                "train.weight.action has {} entries for {action_dims} action dims",
                t.weights.action.len()
            )));
        }
        Ok(t)
    }

    /// The resolved configuration in the input format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let t = &self.train;
        let _ = writeln!(s, "seed={}\ndata.seed={}\nlayout={}", self.seed, self.data_seed, self.layout);
        if let Some(o) = &self.out_dir {
            let _ = writeln!(s, "out_dir={}", o.display());
        }
        let precision = match m.precision {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        };
        let _ = writeln!(
            s,
            "model.d={}\nmodel.layers={}\nmodel.heads={}\nmodel.max_len={}\nmodel.dropout={}\nmodel.precision={precision}",
            m.d, m.layers, m.heads, m.max_len, m.dropout
        );
        match &self.data {
            DataSource::Synthetic(c) => {
                s.push_str("data.source=synthetic\n");
                s.push_str(&synthetic_text(c));
            }
            DataSource::Tsv { path, header } => {
                let _ = writeln!(s, "data.source=tsv\ndata.path={}\ndata.header={header}", path.display());
            }
        }
        let _ = writeln!(
            s,
            "train.lr={}\ntrain.warmup_steps={}\ntrain.max_steps={}\ntrain.epochs={}\ntrain.batch_size={}",
            t.lr, t.warmup_steps, t.max_steps, t.epochs, t.batch_size
        );
        if let Some(mt) = t.max_tokens {
            let _ = writeln!(s, "train.max_tokens={mt}");
        }
        let _ = writeln!(
            s,
            "train.clip_norm={}\ntrain.shuffle={}\ntrain.allow_leakage={}\ntrain.weight.item={}",
            t.clip_norm.unwrap_or(0.0),
            t.shuffle,
            t.allow_leakage,
            t.weights.item
        );
        if !t.weights.action.is_empty() {
            let w: Vec<String> = t.weights.action.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "train.weight.action={}", w.join(","));
        }
        let strategy = match self.split.strategy {
            SplitStrategy::LeaveOneOut => "LEAVE_ONE_OUT",
            SplitStrategy::LastDay => "LAST_DAY",
        };
        let _ = writeln!(s, "split.strategy={strategy}\nsplit.k_core={}", self.split.k_core);
        let ks: Vec<String> = self.eval.ks.iter().map(usize::to_string).collect();
        let _ = writeln!(
            s,
            "eval.ks={}\neval.negatives={}\neval.batch_size={}",
            ks.join(","),
            self.eval.negatives,
            self.eval.batch_size
        );
        if let Some(mc) = self.eval.max_cases {
            let _ = writeln!(s, "eval.max_cases={mc}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, "test.cfg", Path::new("/tmp"))
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse("seed=3\nlayout=LAC\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.data_seed, 3);
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.data, DataSource::Synthetic(SyntheticConfig::default()));
        assert_eq!(c.layout_spec().unwrap().name, "LAC");
        assert_eq!(c.train_config(2).unwrap().weights.action, vec![1.0, 1.0]);
    }

    #[test]
    fn sections_override_defaults() {
        let text = "# comment\nseed=1\nlayout=INTERLEAVED\nmodel.d=32\nmodel.precision=f64\ntrain.lr=0.002\n\
                    train.clip_norm=0\ntrain.weight.action=2.5\nsynth.users=100\nsplit.strategy=LAST_DAY\n\
                    eval.ks=1,20\neval.negatives=99\ndata.seed=9\n";
        let c = parse(text).unwrap();
        assert_eq!(c.model.d, 32);
        assert_eq!(c.model.precision, Precision::F64);
        assert_eq!(c.train.lr, 0.002);
        assert_eq!(c.train.clip_norm, None);
        assert_eq!(c.train.weights.action, vec![2.5]);
        assert_eq!(c.split.strategy, SplitStrategy::LastDay);
        assert_eq!(c.eval.ks, vec![1, 20]);
        assert_eq!(c.data_seed, 9);
        let DataSource::Synthetic(s) = &c.data else { panic!("synthetic") };
        assert_eq!(s.users, 100);
        assert!(c.train_config(3).is_err());
    }

    #[test]
    fn resolved_text_round_trips() {
        let c = parse("seed=5\nlayout=LAC\nmodel.heads=2\ntrain.max_tokens=4000\neval.max_cases=10\n").unwrap();
        let again = parse(&c.to_text()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn errors_name_the_line() {
        assert!(matches!(parse("layout=LAC\n"), Err(LabError::Config(_))));
        assert!(matches!(parse("seed=1\nlayout=LAC\nmodel.dd=3\n"), Err(LabError::Parse { line: 3, .. })));
        assert!(matches!(parse("seed=1\nlayout=LAC\nmodel.d=abc\n"), Err(LabError::Parse { line: 3, .. })));
        assert!(matches!(parse("seed=1\nseed=2\n"), Err(LabError::Parse { line: 2, .. })));
        assert!(matches!(parse("seed=1\nlayout=LAC\nnonsense\n"), Err(LabError::Parse { line: 3, .. })));
        assert!(matches!(
            parse("seed=1\nlayout=LAC\ndata.source=tsv\ndata.path=missing.tsv\n"),
            Err(LabError::Config(_))
        ));
    }
}

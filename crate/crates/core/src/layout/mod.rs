//! Declarative token layouts: which (item, action) symbols each token feeds
//! the trunk, which symbols it must predict, and how tokens see each other.

mod mask;
mod tokenize;
mod validate;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub use mask::{build_mask, VisibilityMask};
pub use tokenize::{
    tokenize_steps, ActionInput, Step, TargetSlot, Token, TokenInput, TokenKind, TokenizedSequence, PAD, RESERVED,
    SENTINEL, UNK,
};
pub use validate::{
    anti_patterns, conditioning_set, dominates, trunk_closure, validate, Leak, MissingConditioner, P1Verdict, P2Status,
    P2Verdict, P3Status, P3Verdict, SymbolSet, ValidationReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChannelKind {
    Item,
    Action,
}

/// A symbol relative to step `t`: `ITEM@0` is `i_t`, `ACTION@-1` is `a_{t-1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ChannelRef {
    pub kind: ChannelKind,
    pub offset: i32,
}

impl ChannelRef {
    pub const fn item(offset: i32) -> Self {
        Self { kind: ChannelKind::Item, offset }
    }

    pub const fn action(offset: i32) -> Self {
        Self { kind: ChannelKind::Action, offset }
    }
}

impl fmt::Display for ChannelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ChannelKind::Item => "ITEM",
            ChannelKind::Action => "ACTION",
        };
        if self.offset > 0 {
            write!(f, "{kind}@+{}", self.offset)
        } else {
            write!(f, "{kind}@{}", self.offset)
        }
    }
}

impl FromStr for ChannelRef {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LabError::InvalidSpec(format!("malformed channel `{s}` (expected e.g. ITEM@0, ACTION@-1)"));
        let (kind, off) = s.trim().split_once('@').ok_or_else(bad)?;
        let kind = match kind.trim().to_ascii_uppercase().as_str() {
            "ITEM" => ChannelKind::Item,
            "ACTION" => ChannelKind::Action,
            _ => return Err(bad()),
        };
        let off = off.trim();
        let offset = off.strip_prefix('+').unwrap_or(off).parse().map_err(|_| bad())?;
        Ok(Self { kind, offset })
    }
}

impl Serialize for ChannelRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ChannelRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Arrangement {
    /// One token per interaction.
    NonInterleaved,
    /// Item token then action token for every interaction.
    Interleaved,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Conditioning {
    None,
    /// Late fusion of the target item embedding with the final hidden state.
    Patched,
    /// Current item paired with the previous step's action.
    Lagged,
}

macro_rules! keyword_enum {
    ($ty:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),* })
            }
        }
        impl FromStr for $ty {
            type Err = LabError;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_uppercase().as_str() {
                    $($text => Ok(Self::$variant),)*
                    other => Err(LabError::InvalidSpec(format!(
                        "unknown {} `{other}` (expected one of: {})",
                        stringify!($ty).to_ascii_lowercase(),
                        [$($text),*].join(", ")
                    ))),
                }
            }
        }
    };
}

keyword_enum!(Arrangement { NonInterleaved => "NON_INTERLEAVED", Interleaved => "INTERLEAVED" });
keyword_enum!(Conditioning { None => "NONE", Patched => "PATCHED", Lagged => "LAGGED" });

/// Declarative description of a layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub name: String,
    pub inputs: BTreeSet<ChannelRef>,
    pub targets: BTreeSet<ChannelRef>,
    pub arrangement: Arrangement,
    pub conditioning: Conditioning,
    pub action_dims: usize,
}

/// The eleven layouts of the ablation grid, in table order.
pub const PRESETS: [&str; 11] = [
    "ITEM_ONLY",
    "INPUT_IA",
    "INPUT_I_LAGA",
    "OUT_SAMESTEP_A",
    "OUT_NEXT_A",
    "OUT_IA",
    "IO_IA_NEXTA",
    "LAC",
    "IO_IA_BOTH",
    "IO_IA_BOTH_PC",
    "INTERLEAVED",
];

const I0: ChannelRef = ChannelRef::item(0);
const I1: ChannelRef = ChannelRef::item(1);
const A_1: ChannelRef = ChannelRef::action(-1);
const A0: ChannelRef = ChannelRef::action(0);
const A1: ChannelRef = ChannelRef::action(1);

impl LayoutSpec {
    /// Builds a spec, enforcing its structural invariants.
    pub fn new(
        name: impl Into<String>,
        inputs: impl IntoIterator<Item = ChannelRef>,
        targets: impl IntoIterator<Item = ChannelRef>,
        arrangement: Arrangement,
        conditioning: Conditioning,
        action_dims: usize,
    ) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            inputs: inputs.into_iter().collect(),
            targets: targets.into_iter().collect(),
            arrangement,
            conditioning,
            action_dims,
        };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        let fail = |m: String| Err(LabError::InvalidSpec(format!("{}: {m}", self.name)));
        if self.targets.is_empty() {
            return fail("targets must be non-empty".into());
        }
        if self.action_dims == 0 {
            return fail("action_dims must be at least 1".into());
        }
        for kind in [ChannelKind::Item, ChannelKind::Action] {
            if self.inputs.iter().filter(|c| c.kind == kind).count() > 1 {
                return fail(format!("at most one {kind:?} input channel per token"));
            }
        }
        if self.targets.iter().filter(|c| c.kind == ChannelKind::Item).count() > 1 {
            return fail("at most one ITEM target".into());
        }
        if self.arrangement == Arrangement::Interleaved && self.inputs != BTreeSet::from([I0, A0]) {
            return fail("INTERLEAVED requires inputs exactly ITEM@0,ACTION@0".into());
        }
        if self.conditioning == Conditioning::Lagged && !(self.inputs.contains(&A_1) && self.targets.contains(&A0)) {
            return fail("LAGGED requires ACTION@-1 among inputs and ACTION@0 among targets".into());
        }
        Ok(())
    }

    /// One of the named ablation layouts; see [`PRESETS`].
    pub fn preset(name: &str) -> Result<Self> {
        use Arrangement::*;
        use Conditioning as C;
        let upper = name.trim().to_ascii_uppercase();
        let (inputs, targets, arrangement, conditioning): (&[ChannelRef], &[ChannelRef], _, _) = match upper.as_str() {
            "ITEM_ONLY" => (&[I0], &[I1], NonInterleaved, C::None),
            "INPUT_IA" => (&[I0, A0], &[I1], NonInterleaved, C::None),
            "INPUT_I_LAGA" => (&[I0, A_1], &[I1], NonInterleaved, C::None),
            "OUT_SAMESTEP_A" => (&[I0], &[A0], NonInterleaved, C::None),
            "OUT_NEXT_A" => (&[I0], &[A1], NonInterleaved, C::None),
            "OUT_IA" => (&[I0], &[I1, A1], NonInterleaved, C::None),
            "IO_IA_NEXTA" => (&[I0, A0], &[A1], NonInterleaved, C::None),
            "LAC" => (&[I0, A_1], &[I1, A0], NonInterleaved, C::Lagged),
            "IO_IA_BOTH" => (&[I0, A0], &[I1, A1], NonInterleaved, C::None),
            "IO_IA_BOTH_PC" => (&[I0, A0], &[I1, A1], NonInterleaved, C::Patched),
            "INTERLEAVED" => (&[I0, A0], &[I1, A0], Interleaved, C::None),
            _ => return Err(LabError::UnknownPreset { name: name.to_string(), valid: PRESETS.to_vec() }),
        };
        Self::new(upper, inputs.iter().copied(), targets.iter().copied(), arrangement, conditioning, 1)
    }

    pub fn with_action_dims(mut self, dims: usize) -> Result<Self> {
        self.action_dims = dims;
        self.check()?;
        Ok(self)
    }

    pub fn input(&self, kind: ChannelKind) -> Option<ChannelRef> {
        self.inputs.iter().copied().find(|c| c.kind == kind)
    }

    pub fn item_target(&self) -> Option<ChannelRef> {
        self.targets.iter().copied().find(|c| c.kind == ChannelKind::Item)
    }

    pub fn action_targets(&self) -> Vec<ChannelRef> {
        self.targets.iter().copied().filter(|c| c.kind == ChannelKind::Action).collect()
    }

    /// Tokens produced for `steps` interactions.
    pub fn token_count(&self, steps: usize) -> usize {
        match self.arrangement {
            Arrangement::NonInterleaved => steps,
            Arrangement::Interleaved => 2 * steps,
        }
    }

    /// Parses the `key=value` text format (`name`, `inputs`, `targets`,
    /// `arrangement`, `conditioning`, optional `action_dims`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = None;
        let mut inputs = None;
        let mut targets = None;
        let mut arrangement = Arrangement::NonInterleaved;
        let mut conditioning = Conditioning::None;
        let mut action_dims = 1;
        let channels = |v: &str| -> Result<Vec<ChannelRef>> {
            v.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
        };
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LabError::InvalidSpec(format!("line {}: expected key=value", n + 1)))?;
            let v = v.trim();
            match k.trim() {
                "name" => name = Some(v.to_string()),
                "inputs" => inputs = Some(channels(v)?),
                "targets" => targets = Some(channels(v)?),
                "arrangement" => arrangement = v.parse()?,
                "conditioning" => conditioning = v.parse()?,
                "action_dims" => {
                    action_dims = v
                        .parse()
                        .map_err(|_| LabError::InvalidSpec(format!("line {}: bad action_dims `{v}`", n + 1)))?
                }
                other => return Err(LabError::InvalidSpec(format!("line {}: unknown key `{other}`", n + 1))),
            }
        }
        let missing = |k: &str| LabError::InvalidSpec(format!("missing `{k}`"));
        Self::new(
            name.ok_or_else(|| missing("name"))?,
            inputs.ok_or_else(|| missing("inputs"))?,
            targets.ok_or_else(|| missing("targets"))?,
            arrangement,
            conditioning,
            action_dims,
        )
    }

    pub fn to_text(&self) -> String {
        let join = |s: &BTreeSet<ChannelRef>| s.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        format!(
            "name={}\ninputs={}\ntargets={}\narrangement={}\nconditioning={}\naction_dims={}\n",
            self.name,
            join(&self.inputs),
            join(&self.targets),
            self.arrangement,
            self.conditioning,
            self.action_dims
        )
    }

    /// Loads a spec file, or a preset when `arg` names one.
    pub fn load(arg: &str) -> Result<Self> {
        if PRESETS.contains(&arg.trim().to_ascii_uppercase().as_str()) {
            return Self::preset(arg);
        }
        let path = Path::new(arg);
        if !path.exists() && !arg.contains(['/', '.']) {
            return Self::preset(arg);
        }
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(c: &[ChannelRef]) -> BTreeSet<ChannelRef> {
        c.iter().copied().collect()
    }

    #[test]
    fn item_only_preset() {
        let s = LayoutSpec::preset("ITEM_ONLY").unwrap();
        assert_eq!(s.inputs, set(&[I0]));
        assert_eq!(s.targets, set(&[I1]));
    }

    #[test]
    fn lac_preset() {
        let s = LayoutSpec::preset("LAC").unwrap();
        assert_eq!(s.inputs, set(&[I0, A_1]));
        assert_eq!(s.targets, set(&[I1, A0]));
        assert_eq!(s.conditioning, Conditioning::Lagged);
    }

    #[test]
    fn interleaved_preset_doubles_length() {
        let s = LayoutSpec::preset("INTERLEAVED").unwrap();
        assert_eq!(s.arrangement, Arrangement::Interleaved);
        assert_eq!(s.token_count(7), 14);
        assert_eq!(LayoutSpec::preset("LAC").unwrap().token_count(7), 7);
    }

    #[test]
    fn unknown_preset_lists_valid_names() {
        let err = LayoutSpec::preset("NOPE").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("NOPE") && PRESETS.iter().all(|p| msg.contains(p)), "{msg}");
    }

    #[test]
    fn channel_text_round_trip() {
        for c in [I0, I1, A_1, A0, ChannelRef::action(-3)] {
            assert_eq!(c.to_string().parse::<ChannelRef>().unwrap(), c);
        }
        assert_eq!("ITEM@+1".parse::<ChannelRef>().unwrap(), I1);
        assert_eq!("action@-1".parse::<ChannelRef>().unwrap(), A_1);
        assert!("ITEM".parse::<ChannelRef>().is_err());
        assert!("USER@0".parse::<ChannelRef>().is_err());
    }

    #[test]
    fn spec_text_format() {
        let text = "name=mine\ninputs=ITEM@0,ACTION@-1\ntargets=ITEM@+1,ACTION@0\narrangement=NON_INTERLEAVED\nconditioning=LAGGED\n";
        let s = LayoutSpec::parse(text).unwrap();
        assert_eq!(s.inputs, LayoutSpec::preset("LAC").unwrap().inputs);
        assert_eq!(LayoutSpec::parse(&s.to_text()).unwrap(), s);
        for p in PRESETS {
            let s = LayoutSpec::preset(p).unwrap();
            assert_eq!(LayoutSpec::parse(&s.to_text()).unwrap(), s);
        }
    }

    #[test]
    fn structural_invariants_are_enforced() {
        use Arrangement::*;
        assert!(LayoutSpec::new("x", [I0], [], NonInterleaved, Conditioning::None, 1).is_err());
        assert!(LayoutSpec::new("x", [I0, A_1], [I1], NonInterleaved, Conditioning::Lagged, 1).is_err());
        assert!(LayoutSpec::new("x", [I0], [I1, A0], Interleaved, Conditioning::None, 1).is_err());
        assert!(LayoutSpec::new("x", [I0, ChannelRef::item(-1)], [I1], NonInterleaved, Conditioning::None, 1).is_err());
    }
}

//! Static checks of a layout against the three design principles:
//! P1 (use as much leakage-free context as possible), P2 (predict an action
//! only after seeing its item), P3 (never predict a visible symbol).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Arrangement, ChannelKind, ChannelRef, Conditioning, LayoutSpec, PRESETS};

/// A downward-closed set of symbols (everything up to a per-kind offset)
/// plus individually supplied extras.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymbolSet {
    pub item_max: Option<i32>,
    pub action_max: Option<i32>,
    pub extras: BTreeSet<ChannelRef>,
}

impl SymbolSet {
    fn max(&self, kind: ChannelKind) -> Option<i32> {
        match kind {
            ChannelKind::Item => self.item_max,
            ChannelKind::Action => self.action_max,
        }
    }

    fn raise(&mut self, kind: ChannelKind, off: i32) {
        let slot = match kind {
            ChannelKind::Item => &mut self.item_max,
            ChannelKind::Action => &mut self.action_max,
        };
        *slot = Some(slot.map_or(off, |m| m.max(off)));
    }

    pub fn contains(&self, c: ChannelRef) -> bool {
        self.max(c.kind).is_some_and(|m| c.offset <= m) || self.extras.contains(&c)
    }

    pub fn is_superset(&self, other: &SymbolSet) -> bool {
        let covers = |kind| match (self.max(kind), other.max(kind)) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(b)) => a >= b,
        };
        covers(ChannelKind::Item) && covers(ChannelKind::Action) && other.extras.iter().all(|&c| self.contains(c))
    }
}

impl fmt::Display for SymbolSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        for (name, m) in [("ITEM", self.item_max), ("ACTION", self.action_max)] {
            if let Some(m) = m {
                parts.push(if m > 0 { format!("{name}@<=+{m}") } else { format!("{name}@<={m}") });
            }
        }
        parts.extend(self.extras.iter().map(|c| c.to_string()));
        if parts.is_empty() {
            f.write_str("{}")
        } else {
            write!(f, "{{{}}}", parts.join(", "))
        }
    }
}

/// Per-input contribution to what the trunk sees when predicting `target`:
/// input `c` makes its kind visible up to the returned offset.
fn contributions(spec: &LayoutSpec, target: ChannelRef) -> Vec<(ChannelRef, i32)> {
    spec.inputs
        .iter()
        .map(|&c| {
            let reach = match (spec.arrangement, target.kind, c.kind) {
                // Action targets are read at the item token, before the
                // same-step action token.
                (Arrangement::Interleaved, ChannelKind::Action, ChannelKind::Action) => c.offset - 1,
                _ => c.offset,
            };
            (c, reach)
        })
        .collect()
}

/// Symbols visible through the causal trunk at the position predicting `target`.
pub fn trunk_closure(spec: &LayoutSpec, target: ChannelRef) -> SymbolSet {
    let mut s = SymbolSet::default();
    for (c, reach) in contributions(spec, target) {
        s.raise(c.kind, reach);
    }
    s
}

/// Trunk closure plus anything a conditioning mechanism supplies directly to
/// the head predicting `target`.
pub fn conditioning_set(spec: &LayoutSpec, target: ChannelRef) -> SymbolSet {
    let mut s = trunk_closure(spec, target);
    if spec.conditioning == Conditioning::Patched && target.kind == ChannelKind::Action {
        s.extras.extend(spec.targets.iter().filter(|c| c.kind == ChannelKind::Item));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    pub input: ChannelRef,
    pub target: ChannelRef,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingConditioner {
    pub target: ChannelRef,
    pub missing: ChannelRef,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum P3Status {
    Pass,
    Fail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum P2Status {
    Pass,
    Fail,
    /// No action targets, so there is nothing to condition.
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct P3Verdict {
    pub status: P3Status,
    pub leaks: Vec<Leak>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct P2Verdict {
    pub status: P2Status,
    pub missing: Vec<MissingConditioner>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct P1Verdict {
    /// Conditioning set of every target, rendered as text.
    pub conditioning: BTreeMap<String, String>,
    /// Named presets this layout strictly dominates.
    pub dominates: Vec<String>,
    /// Named presets that strictly dominate this layout.
    pub dominated_by: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub spec: String,
    pub p1: P1Verdict,
    pub p2: P2Verdict,
    pub p3: P3Verdict,
    pub overall_pass: bool,
}

impl ValidationReport {
    pub fn p3_pass(&self) -> bool {
        self.p3.status == P3Status::Pass
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary, one principle per line.
    pub fn summary(&self) -> String {
        let mut out = format!("layout {}\n", self.spec);
        match self.p3.status {
            P3Status::Pass => out.push_str("P3 PASS\n"),
            P3Status::Fail => {
                let pairs: Vec<_> = self.p3.leaks.iter().map(|l| format!("{} leaks {}", l.input, l.target)).collect();
                out.push_str(&format!("P3 FAIL: {}\n", pairs.join("; ")));
            }
        }
        match self.p2.status {
            P2Status::Pass => out.push_str("P2 PASS\n"),
            P2Status::NotApplicable => out.push_str("P2 N/A (no action targets)\n"),
            P2Status::Fail => {
                let pairs: Vec<_> =
                    self.p2.missing.iter().map(|m| format!("{} lacks {}", m.target, m.missing)).collect();
                out.push_str(&format!("P2 FAIL: {}\n", pairs.join("; ")));
            }
        }
        if !self.p1.dominates.is_empty() {
            out.push_str(&format!("P1 dominates: {}\n", self.p1.dominates.join(", ")));
        }
        if !self.p1.dominated_by.is_empty() {
            out.push_str(&format!("P1 dominated by: {}\n", self.p1.dominated_by.join(", ")));
        }
        out.push_str(if self.overall_pass { "overall PASS\n" } else { "overall FAIL\n" });
        out
    }
}

fn p3(spec: &LayoutSpec) -> P3Verdict {
    let mut leaks = Vec::new();
    for &target in &spec.targets {
        for (input, reach) in contributions(spec, target) {
            if input.kind == target.kind && target.offset <= reach {
                leaks.push(Leak { input, target });
            }
        }
    }
    let status = if leaks.is_empty() { P3Status::Pass } else { P3Status::Fail };
    P3Verdict { status, leaks }
}

fn p2(spec: &LayoutSpec) -> P2Verdict {
    let actions = spec.action_targets();
    if actions.is_empty() {
        return P2Verdict { status: P2Status::NotApplicable, missing: Vec::new() };
    }
    let missing: Vec<_> = actions
        .into_iter()
        .filter_map(|target| {
            let need = ChannelRef::item(target.offset);
            (!conditioning_set(spec, target).contains(need)).then_some(MissingConditioner { target, missing: need })
        })
        .collect();
    let status = if missing.is_empty() { P2Status::Pass } else { P2Status::Fail };
    P2Verdict { status, missing }
}

/// `a` strictly dominates `b`: same targets, every target's conditioning set
/// in `a` contains `b`'s, and at least one strictly. Only defined between
/// leakage-free layouts.
pub fn dominates(a: &LayoutSpec, b: &LayoutSpec) -> bool {
    if a.targets != b.targets || p3(a).status == P3Status::Fail || p3(b).status == P3Status::Fail {
        return false;
    }
    let mut strict = false;
    for &t in &a.targets {
        let (ca, cb) = (conditioning_set(a, t), conditioning_set(b, t));
        if !ca.is_superset(&cb) {
            return false;
        }
        strict |= !cb.is_superset(&ca);
    }
    strict
}

pub fn validate(spec: &LayoutSpec) -> ValidationReport {
    let p3 = p3(spec);
    let p2 = p2(spec);
    let presets: Vec<LayoutSpec> = PRESETS.iter().map(|p| LayoutSpec::preset(p).expect("preset")).collect();
    let p1 = P1Verdict {
        conditioning: spec.targets.iter().map(|&t| (t.to_string(), conditioning_set(spec, t).to_string())).collect(),
        dominates: presets.iter().filter(|b| dominates(spec, b)).map(|b| b.name.clone()).collect(),
        dominated_by: presets.iter().filter(|a| dominates(a, spec)).map(|a| a.name.clone()).collect(),
    };
    let overall_pass = p3.status == P3Status::Pass && p2.status != P2Status::Fail;
    ValidationReport { spec: spec.name.clone(), p1, p2, p3, overall_pass }
}

/// The four negative layouts: three self-label leaks and the joint
/// next-item/next-action prediction from one hidden state.
pub fn anti_patterns() -> Vec<LayoutSpec> {
    use Arrangement::NonInterleaved;
    use Conditioning::None;
    let (i0, i1, a0, a1) = (ChannelRef::item(0), ChannelRef::item(1), ChannelRef::action(0), ChannelRef::action(1));
    [
        ("LEAK_SELF", vec![i0, a0], vec![a0]),
        ("LEAK_WITH_NEXT_ITEM", vec![i0, a0], vec![a0, i1]),
        ("LEAK_AND_BLIND", vec![i0, a0], vec![a0, i1, a1]),
        ("BLIND_JOINT", vec![i0], vec![i1, a1]),
    ]
    .into_iter()
    .map(|(name, inputs, targets)| {
        LayoutSpec::new(name, inputs, targets, NonInterleaved, None, 1).expect("anti-pattern")
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(name: &str) -> LayoutSpec {
        LayoutSpec::preset(name).unwrap()
    }

    #[test]
    fn self_label_leak_names_the_symbol() {
        let spec = LayoutSpec::parse("name=x\ninputs=ITEM@0,ACTION@0\ntargets=ACTION@0\n").unwrap();
        let r = validate(&spec);
        assert_eq!(r.p3.status, P3Status::Fail);
        assert_eq!(r.p3.leaks, vec![Leak { input: ChannelRef::action(0), target: ChannelRef::action(0) }]);
        assert!(!r.overall_pass);
    }

    #[test]
    fn lac_passes() {
        let r = validate(&preset("LAC"));
        assert_eq!((r.p3.status, r.p2.status), (P3Status::Pass, P2Status::Pass));
        assert!(r.overall_pass);
    }

    #[test]
    fn joint_next_prediction_lacks_next_item() {
        let r = validate(&preset("IO_IA_BOTH"));
        assert_eq!(r.p2.status, P2Status::Fail);
        assert_eq!(
            r.p2.missing,
            vec![MissingConditioner { target: ChannelRef::action(1), missing: ChannelRef::item(1) }]
        );
        assert_eq!(validate(&preset("IO_IA_BOTH_PC")).p2.status, P2Status::Pass);
    }

    #[test]
    fn every_preset_is_leakage_free() {
        for p in PRESETS {
            assert_eq!(validate(&preset(p)).p3.status, P3Status::Pass, "{p}");
        }
    }

    #[test]
    fn p2_passes_exactly_for_item_conditioned_presets() {
        let mut passing = Vec::new();
        for p in PRESETS {
            match validate(&preset(p)).p2.status {
                P2Status::Pass => passing.push(p),
                P2Status::NotApplicable => assert!(preset(p).action_targets().is_empty()),
                P2Status::Fail => {}
            }
        }
        assert_eq!(passing, ["OUT_SAMESTEP_A", "LAC", "IO_IA_BOTH_PC", "INTERLEAVED"]);
    }

    #[test]
    fn anti_patterns_are_flagged() {
        let reports: Vec<_> = anti_patterns().iter().map(validate).collect();
        let p3: Vec<_> = reports.iter().map(|r| r.p3.status).collect();
        let p2: Vec<_> = reports.iter().map(|r| r.p2.status).collect();
        use P2Status as S;
        assert_eq!(p3, [P3Status::Fail, P3Status::Fail, P3Status::Fail, P3Status::Pass]);
        assert_eq!(p2, [S::Pass, S::Pass, S::Fail, S::Fail]);
        assert!(reports.iter().all(|r| !r.overall_pass));
    }

    #[test]
    fn p1_examples() {
        assert!(dominates(&preset("INPUT_IA"), &preset("ITEM_ONLY")));
        assert!(dominates(&preset("INPUT_I_LAGA"), &preset("ITEM_ONLY")));
        assert!(dominates(&preset("INPUT_IA"), &preset("INPUT_I_LAGA")));
        assert!(dominates(&preset("IO_IA_BOTH_PC"), &preset("IO_IA_BOTH")));
        assert!(dominates(&preset("IO_IA_BOTH"), &preset("OUT_IA")));
        assert!(!dominates(&preset("LAC"), &preset("ITEM_ONLY")));
        let r = validate(&preset("ITEM_ONLY"));
        assert!(r.p1.dominates.is_empty());
        assert!(r.p1.dominated_by.contains(&"INPUT_IA".to_string()));
    }

    #[test]
    fn report_json_round_trip() {
        let r = validate(&anti_patterns()[2]);
        let back: ValidationReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_json().contains("\"ACTION@0\""));
    }
}

use serde::{Deserialize, Serialize};

use super::{Arrangement, ChannelKind, ChannelRef, LayoutSpec};
use crate::error::{LabError, Result};

/// Padding id; also the item input of interleaved action tokens.
pub const PAD: u32 = 0;
/// Unknown / placeholder item (used by the attention probe).
pub const UNK: u32 = 1;
/// Item symbol for input offsets that fall outside the sequence.
pub const SENTINEL: u32 = 2;
/// Number of reserved ids; real items start here.
pub const RESERVED: u32 = 3;

/// One interaction as the tokenizer sees it. `action: None` means the action
/// is withheld (unknown at prediction time), not zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub item: u32,
    pub action: Option<Vec<f64>>,
    pub timestamp: i64,
}

impl Step {
    pub fn new(item: u32, action: Vec<f64>, timestamp: i64) -> Self {
        Self { item, action: Some(action), timestamp }
    }

    pub fn withheld(item: u32, timestamp: i64) -> Self {
        Self { item, action: None, timestamp }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    /// The single token of interaction `t` in a non-interleaved layout.
    Step,
    /// First token of an interleaved pair; carries the item.
    Item,
    /// Second token of an interleaved pair; carries the action.
    Action,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionInput {
    /// The layout has no action channel on this token.
    Absent,
    /// Offset out of range or action withheld: the learned no-action vector.
    Sentinel,
    Value(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenInput {
    pub item: u32,
    pub action: ActionInput,
}

/// A prediction target. `step` is the (0-based) interaction it refers to and
/// may lie outside the sequence; `value` is `None` when the target is
/// excluded from the loss (out of range or withheld).
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSlot<V> {
    pub channel: ChannelRef,
    pub step: i64,
    pub value: Option<V>,
}

impl<V> TargetSlot<V> {
    pub fn included(&self) -> bool {
        self.value.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    /// Interaction index this token belongs to.
    pub step: usize,
    pub input: TokenInput,
    pub item_target: Option<TargetSlot<u32>>,
    pub action_targets: Vec<TargetSlot<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedSequence {
    pub steps: usize,
    pub tokens: Vec<Token>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn included_item_targets(&self) -> usize {
        self.tokens.iter().filter(|t| t.item_target.as_ref().is_some_and(TargetSlot::included)).count()
    }

    pub fn included_action_targets(&self) -> usize {
        self.tokens.iter().flat_map(|t| &t.action_targets).filter(|s| s.included()).count()
    }

    /// Position of the token whose item target refers to interaction `step`.
    pub fn item_target_position(&self, step: i64) -> Option<usize> {
        self.tokens.iter().position(|t| t.item_target.as_ref().is_some_and(|s| s.step == step))
    }

    /// Position of the token predicting `channel`'s value for interaction `step`.
    pub fn action_target_position(&self, channel: ChannelRef, step: i64) -> Option<usize> {
        self.tokens.iter().position(|t| t.action_targets.iter().any(|s| s.channel == channel && s.step == step))
    }
}

fn resolve(steps: &[Step], t: usize, offset: i32) -> Option<&Step> {
    let k = t as i64 + offset as i64;
    (0..steps.len() as i64).contains(&k).then(|| &steps[k as usize])
}

fn item_input(steps: &[Step], t: usize, ch: Option<ChannelRef>) -> u32 {
    match ch {
        None => PAD,
        Some(c) => resolve(steps, t, c.offset).map_or(SENTINEL, |s| s.item),
    }
}

fn action_input(steps: &[Step], t: usize, ch: Option<ChannelRef>) -> ActionInput {
    match ch {
        None => ActionInput::Absent,
        Some(c) => match resolve(steps, t, c.offset).and_then(|s| s.action.clone()) {
            Some(a) => ActionInput::Value(a),
            None => ActionInput::Sentinel,
        },
    }
}

fn targets(steps: &[Step], t: usize, channels: &[ChannelRef]) -> (Option<TargetSlot<u32>>, Vec<TargetSlot<Vec<f64>>>) {
    let mut item = None;
    let mut actions = Vec::new();
    for &c in channels {
        let step = t as i64 + c.offset as i64;
        let s = resolve(steps, t, c.offset);
        match c.kind {
            ChannelKind::Item => item = Some(TargetSlot { channel: c, step, value: s.map(|s| s.item) }),
            ChannelKind::Action => {
                actions.push(TargetSlot { channel: c, step, value: s.and_then(|s| s.action.clone()) })
            }
        }
    }
    (item, actions)
}

/// Turns a time-ordered interaction list into layout tokens with targets.
pub fn tokenize_steps(steps: &[Step], spec: &LayoutSpec) -> Result<TokenizedSequence> {
    if steps.is_empty() {
        return Err(LabError::EmptySequence);
    }
    if let Some(i) = steps.windows(2).position(|w| w[1].timestamp < w[0].timestamp) {
        return Err(LabError::UnsortedTimestamps { index: i + 1 });
    }
    for (i, s) in steps.iter().enumerate() {
        if let Some(a) = &s.action {
            if a.len() != spec.action_dims {
                return Err(LabError::InvalidArgument(format!(
                    "interaction {i} has {} action dims, layout expects {}",
                    a.len(),
                    spec.action_dims
                )));
            }
        }
    }
    let item_ch = spec.input(ChannelKind::Item);
    let action_ch = spec.input(ChannelKind::Action);
    let all: Vec<ChannelRef> = spec.targets.iter().copied().collect();
    let mut tokens = Vec::with_capacity(spec.token_count(steps.len()));
    for t in 0..steps.len() {
        match spec.arrangement {
            Arrangement::NonInterleaved => {
                let (item_target, action_targets) = targets(steps, t, &all);
                tokens.push(Token {
                    kind: TokenKind::Step,
                    step: t,
                    input: TokenInput {
                        item: item_input(steps, t, item_ch),
                        action: action_input(steps, t, action_ch),
                    },
                    item_target,
                    action_targets,
                });
            }
            Arrangement::Interleaved => {
                // Action targets are read at the item token, so they see the
                // same-step item but not the same-step action.
                let (action_chs, item_chs): (Vec<_>, Vec<_>) = all.iter().partition(|c| c.kind == ChannelKind::Action);
                let (_, action_targets) = targets(steps, t, &action_chs);
                tokens.push(Token {
                    kind: TokenKind::Item,
                    step: t,
                    input: TokenInput { item: item_input(steps, t, item_ch), action: ActionInput::Absent },
                    item_target: None,
                    action_targets,
                });
                let (item_target, _) = targets(steps, t, &item_chs);
                tokens.push(Token {
                    kind: TokenKind::Action,
                    step: t,
                    input: TokenInput { item: PAD, action: action_input(steps, t, action_ch) },
                    item_target,
                    action_targets: Vec::new(),
                });
            }
        }
    }
    Ok(TokenizedSequence { steps: steps.len(), tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steps(n: usize) -> Vec<Step> {
        (0..n).map(|t| Step::new(10 + t as u32, vec![t as f64 + 0.5], t as i64)).collect()
    }

    #[test]
    fn lac_three_steps() {
        let spec = LayoutSpec::preset("LAC").unwrap();
        let seq = tokenize_steps(&steps(3), &spec).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.tokens[0].input, TokenInput { item: 10, action: ActionInput::Sentinel });
        assert_eq!(seq.tokens[1].input, TokenInput { item: 11, action: ActionInput::Value(vec![0.5]) });
        let tok = &seq.tokens[1];
        assert_eq!(tok.item_target.as_ref().unwrap().value, Some(12));
        assert_eq!(tok.action_targets[0].value, Some(vec![1.5]));
        assert_eq!(tok.action_targets[0].channel, ChannelRef::action(0));
    }

    #[test]
    fn lac_single_step_boundary() {
        let spec = LayoutSpec::preset("LAC").unwrap();
        let seq = tokenize_steps(&steps(1), &spec).unwrap();
        assert_eq!(seq.len(), 1);
        let tok = &seq.tokens[0];
        assert_eq!(tok.input, TokenInput { item: 10, action: ActionInput::Sentinel });
        assert!(!tok.item_target.as_ref().unwrap().included());
        assert_eq!(tok.item_target.as_ref().unwrap().step, 1);
        assert_eq!(tok.action_targets[0].value, Some(vec![0.5]));
    }

    #[test]
    fn interleaved_alternates_items_and_actions() {
        let spec = LayoutSpec::preset("INTERLEAVED").unwrap();
        let seq = tokenize_steps(&steps(3), &spec).unwrap();
        assert_eq!(seq.len(), 6);
        for t in 0..3 {
            let (it, at) = (&seq.tokens[2 * t], &seq.tokens[2 * t + 1]);
            assert_eq!((it.kind, it.step, it.input.item), (TokenKind::Item, t, 10 + t as u32));
            assert_eq!(it.input.action, ActionInput::Absent);
            assert_eq!(at.kind, TokenKind::Action);
            assert_eq!(at.input.action, ActionInput::Value(vec![t as f64 + 0.5]));
            // Same-step action is predicted from the item token.
            assert_eq!(it.action_targets[0].value, Some(vec![t as f64 + 0.5]));
            assert_eq!(at.item_target.as_ref().unwrap().step, t as i64 + 1);
        }
        assert!(!seq.tokens[5].item_target.as_ref().unwrap().included());
    }

    #[test]
    fn withheld_action_becomes_sentinel_and_excluded_target() {
        let spec = LayoutSpec::preset("IO_IA_BOTH").unwrap();
        let mut s = steps(2);
        s[1].action = None;
        let seq = tokenize_steps(&s, &spec).unwrap();
        assert_eq!(seq.tokens[1].input.action, ActionInput::Sentinel);
        assert!(!seq.tokens[0].action_targets[0].included());
        assert_eq!(seq.action_target_position(ChannelRef::action(1), 1), Some(0));
        assert_eq!(seq.item_target_position(1), Some(0));
    }

    #[test]
    fn errors() {
        let spec = LayoutSpec::preset("ITEM_ONLY").unwrap();
        assert!(matches!(tokenize_steps(&[], &spec), Err(LabError::EmptySequence)));
        let mut s = steps(3);
        s[2].timestamp = 0;
        assert!(matches!(tokenize_steps(&s, &spec), Err(LabError::UnsortedTimestamps { index: 2 })));
        let mut s = steps(2);
        s[0].action = Some(vec![1.0, 2.0]);
        assert!(tokenize_steps(&s, &spec).is_err());
    }

    #[test]
    fn lengths_follow_arrangement() {
        for p in super::super::PRESETS {
            let spec = LayoutSpec::preset(p).unwrap();
            for t in 1..6 {
                assert_eq!(tokenize_steps(&steps(t), &spec).unwrap().len(), spec.token_count(t));
            }
        }
    }
}

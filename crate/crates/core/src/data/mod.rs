//! Interaction streams: TSV ingestion, k-core filtering, train/validation/test
//! splits, token-budget batching, and the synthetic generator.

mod stats;
mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::layout::{Step, RESERVED};

pub use stats::{lag1_autocorrelation, mutual_information, quantile_bins};
pub use synth::{generate_synthetic, GroundTruth, SyntheticConfig, SyntheticData};

/// One timestamped event `(user, item, action vector)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    pub action: Vec<f64>,
    pub timestamp: i64,
}

/// Reads `user<TAB>item<TAB>action...<TAB>timestamp` rows. The result is
/// grouped by user (ascending id) and stably sorted by timestamp within a
/// user.
pub fn load_interactions(path: &Path, has_header: bool) -> Result<Vec<Interaction>> {
    let file = std::fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    let mut action_dims = None;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        let lineno = n + 1;
        if (has_header && n == 0) || line.trim().is_empty() {
            continue;
        }
        let err = |message: String| LabError::Parse { path: name.clone(), line: lineno, message };
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() < 4 {
            return Err(err(format!(
                "expected user, item, at least one action and a timestamp; got {} columns",
                cols.len()
            )));
        }
        let dims = cols.len() - 3;
        match action_dims {
            None => action_dims = Some(dims),
            Some(d) if d != dims => return Err(err(format!("expected {d} action columns, found {dims}"))),
            _ => {}
        }
        let user = cols[0].parse().map_err(|_| err(format!("bad user id `{}`", cols[0])))?;
        let item = cols[1].parse().map_err(|_| err(format!("bad item id `{}`", cols[1])))?;
        let action = cols[2..cols.len() - 1]
            .iter()
            .map(|c| {
                c.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("non-numeric action `{c}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let ts = cols[cols.len() - 1];
        let timestamp = ts.parse().map_err(|_| err(format!("unparseable timestamp `{ts}`")))?;
        out.push(Interaction { user, item, action, timestamp });
    }
    sort_interactions(&mut out);
    Ok(out)
}

/// Stable sort by (user, timestamp).
pub fn sort_interactions(rows: &mut [Interaction]) {
    rows.sort_by_key(|r| (r.user, r.timestamp));
}

pub fn write_interactions(path: &Path, rows: &[Interaction]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        write!(s, "{}\t{}", r.user, r.item).unwrap();
        for a in &r.action {
            write!(s, "\t{a}").unwrap();
        }
        writeln!(s, "\t{}", r.timestamp).unwrap();
    }
    std::fs::write(path, s).map_err(|e| LabError::io(path, e))
}

/// Drops users and items with fewer than `k` interactions until no more
/// can be dropped. Order of the survivors is preserved.
pub fn k_core_filter(rows: &[Interaction], k: usize) -> Result<Vec<Interaction>> {
    if k == 0 {
        return Err(LabError::InvalidArgument("k-core threshold must be at least 1".into()));
    }
    let mut keep = vec![true; rows.len()];
    loop {
        let mut users: HashMap<u64, usize> = HashMap::new();
        let mut items: HashMap<u64, usize> = HashMap::new();
        for (r, _) in rows.iter().zip(&keep).filter(|(_, &k)| k) {
            *users.entry(r.user).or_default() += 1;
            *items.entry(r.item).or_default() += 1;
        }
        let mut changed = false;
        for (r, kept) in rows.iter().zip(keep.iter_mut()) {
            if *kept && (users[&r.user] < k || items[&r.item] < k) {
                *kept = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(rows.iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r.clone()).collect())
}

/// Interactions of one user, time-ordered.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSequence {
    pub user: u64,
    pub interactions: Vec<Interaction>,
}

/// Groups a (user, timestamp)-sorted stream by user.
pub fn group_by_user(rows: &[Interaction]) -> Vec<UserSequence> {
    let mut map: BTreeMap<u64, Vec<Interaction>> = BTreeMap::new();
    for r in rows {
        map.entry(r.user).or_default().push(r.clone());
    }
    map.into_iter()
        .map(|(user, mut interactions)| {
            interactions.sort_by_key(|r| r.timestamp);
            UserSequence { user, interactions }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SplitStrategy {
    LeaveOneOut,
    LastDay,
}

impl std::str::FromStr for SplitStrategy {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LEAVE_ONE_OUT" => Ok(Self::LeaveOneOut),
            "LAST_DAY" => Ok(Self::LastDay),
            other => Err(LabError::Config(format!("unknown split strategy `{other}` (LEAVE_ONE_OUT, LAST_DAY)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub strategy: SplitStrategy,
    pub k_core: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { strategy: SplitStrategy::LeaveOneOut, k_core: 5 }
    }
}

/// One user's interactions cut into consecutive train / validation / test
/// segments.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub user: u64,
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

impl UserSplit {
    /// Interactions preceding the test segment.
    pub fn history_for_test(&self) -> Vec<Interaction> {
        self.train.iter().chain(&self.validation).cloned().collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub users: Vec<UserSplit>,
    /// Users dropped for having too few interactions.
    pub excluded_users: usize,
    pub warnings: Vec<String>,
}

const SECONDS_PER_DAY: i64 = 86_400;

pub fn split(rows: &[Interaction], spec: &SplitSpec) -> Split {
    let seqs = group_by_user(rows);
    let mut out = Split::default();
    match spec.strategy {
        SplitStrategy::LeaveOneOut => {
            for s in seqs {
                let n = s.interactions.len();
                if n < 3 {
                    out.excluded_users += 1;
                    continue;
                }
                let mut it = s.interactions;
                let test = it.split_off(n - 1);
                let validation = it.split_off(n - 2);
                out.users.push(UserSplit { user: s.user, train: it, validation, test });
            }
            if out.excluded_users > 0 {
                out.warnings.push(format!("{} users with fewer than 3 interactions excluded", out.excluded_users));
            }
        }
        SplitStrategy::LastDay => {
            let Some(last) = rows.iter().map(|r| r.timestamp.div_euclid(SECONDS_PER_DAY)).max() else {
                return out;
            };
            for s in seqs {
                let (train, test): (Vec<_>, Vec<_>) =
                    s.interactions.into_iter().partition(|r| r.timestamp.div_euclid(SECONDS_PER_DAY) < last);
                out.users.push(UserSplit { user: s.user, train, validation: Vec::new(), test });
            }
            if out.users.iter().all(|u| u.train.is_empty()) {
                out.warnings.push("all interactions fall on the final day; train split is empty".into());
            }
        }
    }
    out
}

/// Dense item index: raw ids map to `RESERVED..`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemVocab {
    raw: Vec<u64>,
    index: HashMap<u64, u32>,
}

impl ItemVocab {
    pub fn new(mut raw: Vec<u64>) -> Self {
        raw.sort_unstable();
        raw.dedup();
        let index = raw.iter().enumerate().map(|(i, &r)| (r, i as u32 + RESERVED)).collect();
        Self { raw, index }
    }

    pub fn from_interactions(rows: &[Interaction]) -> Self {
        Self::new(rows.iter().map(|r| r.item).collect())
    }

    /// Vocabulary size including reserved ids.
    pub fn size(&self) -> usize {
        self.raw.len() + RESERVED as usize
    }

    pub fn real_items(&self) -> usize {
        self.raw.len()
    }

    pub fn id(&self, raw: u64) -> Option<u32> {
        self.index.get(&raw).copied()
    }

    pub fn raw(&self, id: u32) -> Option<u64> {
        id.checked_sub(RESERVED).and_then(|i| self.raw.get(i as usize)).copied()
    }

    pub fn raw_ids(&self) -> &[u64] {
        &self.raw
    }

    /// Maps interactions to tokenizer steps; unknown items become UNK.
    pub fn steps(&self, rows: &[Interaction]) -> Vec<Step> {
        rows.iter()
            .map(|r| Step::new(self.id(r.item).unwrap_or(crate::layout::UNK), r.action.clone(), r.timestamp))
            .collect()
    }
}

/// Greedy, order-preserving grouping of sequences whose token counts sum to
/// at most `max_tokens` per batch. Returns index ranges into `lengths`.
pub fn batch_by_tokens(lengths: &[usize], max_tokens: usize) -> Result<Vec<std::ops::Range<usize>>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut used = 0;
    for (i, &len) in lengths.iter().enumerate() {
        if len > max_tokens {
            return Err(LabError::InvalidArgument(format!(
                "sequence {i} has {len} tokens, more than the batch budget of {max_tokens}"
            )));
        }
        if used + len > max_tokens {
            out.push(start..i);
            start = i;
            used = 0;
        }
        used += len;
    }
    if start < lengths.len() {
        out.push(start..lengths.len());
    }
    Ok(out)
}

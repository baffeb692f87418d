//! Synthetic interaction streams with a known generating process.
//!
//! Items live in `clusters` groups; each has a unit attribute vector near
//! its cluster centre and a per-dimension engagement bias. Actions follow
//!
//! ```text
//! a_t[d] = alpha * a_{t-1}[d] + bias[d][i_t] + cue * h_t[d] + noise
//! h_t[d] = sum_s w_s tanh(a_s[d]) / sum_s w_s,  w_s = exp(focus * (cos(i_t, i_s) - 1))
//! ```
//!
//! over the user's earlier interactions `s < t`, so the same-step action
//! depends on how the user engaged with items resembling `i_t`. The next
//! item stays in the current cluster with probability
//! `sigmoid(sharpness * a_{t-1}[0] / scale)`, otherwise jumps to a uniformly
//! chosen other cluster; within a cluster items are drawn by Zipf
//! popularity. So `(i_t, a_{t-1})` determines the distribution of `i_{t+1}`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::error::{LabError, Result};
use crate::seed::{self, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub users: usize,
    pub items: usize,
    pub clusters: usize,
    pub attr_dim: usize,
    /// Sequence lengths are uniform on `[min_len, max_len]`.
    pub min_len: usize,
    pub max_len: usize,
    pub action_dims: usize,
    /// AR(1) coefficient, in `[0, 1)`.
    pub alpha: f64,
    /// Standard deviation of the per-item engagement bias.
    pub item_effect: f64,
    /// Standard deviation of the innovation.
    pub noise: f64,
    /// How strongly the previous action steers the next cluster.
    pub sharpness: f64,
    /// Weight of the history cue: the user's past engagement with items
    /// similar to the current one.
    pub cue_strength: f64,
    /// How sharply the cue focuses on the most similar past items; 0 gives
    /// every past item equal weight.
    pub cue_focus: f64,
    pub popularity_exponent: f64,
    pub start_timestamp: i64,
    pub interval_seconds: i64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 20_000,
            items: 500,
            clusters: 20,
            attr_dim: 8,
            min_len: 10,
            max_len: 50,
            action_dims: 1,
            alpha: 0.7,
            item_effect: 0.5,
            noise: 0.3,
            sharpness: 2.0,
            cue_strength: 0.6,
            cue_focus: 5.0,
            popularity_exponent: 0.8,
            start_timestamp: 1_700_000_000,
            interval_seconds: 600,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::Config(format!("synthetic: {m}")));
        if self.items < 2 {
            return bad("vocabulary must have at least 2 items");
        }
        if self.users == 0 || self.clusters == 0 || self.clusters > self.items || self.attr_dim == 0 {
            return bad("users, clusters and attr_dim must be positive with clusters <= items");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.action_dims == 0 {
            return bad("action_dims must be positive");
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1)");
        }
        if !(self.noise > 0.0) {
            return bad("noise scale must be positive");
        }
        if self.item_effect < 0.0 || self.cue_strength < 0.0 || self.cue_focus < 0.0 || self.sharpness < 0.0 {
            return bad("item_effect, cue_strength, cue_focus and sharpness must be non-negative");
        }
        Ok(())
    }

    /// Approximate stationary standard deviation of one action dimension.
    pub fn stationary_sd(&self) -> f64 {
        let innovation = self.item_effect.powi(2) + self.cue_strength.powi(2) + self.noise.powi(2);
        (innovation / (1.0 - self.alpha * self.alpha)).sqrt()
    }
}

/// Everything needed to reproduce or score against the generating process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub item_cluster: Vec<usize>,
    pub item_attr: Vec<Vec<f64>>,
    /// `item_bias[d][i]`.
    pub item_bias: Vec<Vec<f64>>,
    pub transition_scale: f64,
    /// Empirical mean and standard deviation of each action dimension.
    pub action_mean: Vec<f64>,
    pub action_sd: Vec<f64>,
}

impl GroundTruth {
    /// Raw item ids are `1..=items`; raw user ids are `1..=users`.
    pub fn item_index(raw: u64) -> usize {
        raw as usize - 1
    }

    /// Similarity-weighted mean of `tanh(a_s)` over the user's earlier
    /// `(item, action)` pairs, with weights `exp(focus * (cos - 1))`. Zero
    /// for an empty history.
    pub fn history_cue(&self, item: u64, history: &[(u64, Vec<f64>)]) -> Vec<f64> {
        let dims = self.config.action_dims;
        if history.is_empty() {
            return vec![0.0; dims];
        }
        let attr = &self.item_attr[Self::item_index(item)];
        let mut acc = vec![0.0; dims];
        let mut total = 0.0;
        for (past, action) in history {
            let sim: f64 = attr.iter().zip(&self.item_attr[Self::item_index(*past)]).map(|(a, b)| a * b).sum();
            let w = (self.config.cue_focus * (sim - 1.0)).exp();
            total += w;
            for (a, v) in acc.iter_mut().zip(action) {
                *a += w * v.tanh();
            }
        }
        acc.into_iter().map(|a| a / total).collect()
    }

    /// Noise-free part of `a_t` given the previous action and the user's
    /// earlier interactions.
    pub fn expected_action(&self, item: u64, prev: &[f64], history: &[(u64, Vec<f64>)]) -> Vec<f64> {
        let i = Self::item_index(item);
        let cue = self.history_cue(item, history);
        (0..self.config.action_dims)
            .map(|d| self.config.alpha * prev[d] + self.item_bias[d][i] + self.config.cue_strength * cue[d])
            .collect()
    }

    pub fn stay_probability(&self, prev: &[f64]) -> f64 {
        1.0 / (1.0 + (-self.config.sharpness * prev[0] / self.transition_scale).exp())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ground truth serializes")
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub interactions: Vec<Interaction>,
    pub truth: GroundTruth,
}

fn unit_vector<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = seed::rng(seed, Stream::Data);
    let c = config;
    let item_cluster: Vec<usize> = (0..c.items).map(|i| i % c.clusters).collect();
    let centres: Vec<Vec<f64>> = (0..c.clusters).map(|_| unit_vector(&mut rng, c.attr_dim)).collect();
    let item_attr: Vec<Vec<f64>> = (0..c.items)
        .map(|i| {
            let jitter = unit_vector(&mut rng, c.attr_dim);
            let v: Vec<f64> = centres[item_cluster[i]].iter().zip(&jitter).map(|(a, b)| a + 0.5 * b).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let item_bias: Vec<Vec<f64>> = (0..c.action_dims)
        .map(|_| (0..c.items).map(|_| c.item_effect * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let members: Vec<Vec<usize>> =
        (0..c.clusters).map(|k| (0..c.items).filter(|&i| item_cluster[i] == k).collect()).collect();
    let popularity: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            let w: Vec<f64> = (0..m.len()).map(|r| 1.0 / ((r + 1) as f64).powf(c.popularity_exponent)).collect();
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();

    let mut truth = GroundTruth {
        config: c.clone(),
        seed,
        item_cluster,
        item_attr,
        item_bias,
        transition_scale: c.stationary_sd(),
        action_mean: Vec::new(),
        action_sd: Vec::new(),
    };

    let stationary = c.stationary_sd();
    let mut interactions = Vec::new();
    for u in 0..c.users {
        let user = u as u64 + 1;
        let len = rng.gen_range(c.min_len..=c.max_len);
        // a_{t-1} and a_{t-2}; the latter steers the choice of i_t.
        let mut prev: Vec<f64> =
            (0..c.action_dims).map(|_| stationary * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut prev2: Vec<f64> = prev.clone();
        let mut history: Vec<(u64, Vec<f64>)> = Vec::with_capacity(len);
        let mut cluster = rng.gen_range(0..c.clusters);
        let ts0 = c.start_timestamp + u as i64;
        for t in 0..len {
            if t > 0 {
                let stay = rng.gen::<f64>() < truth.stay_probability(&prev2);
                if !stay && c.clusters > 1 {
                    // Uniform over the other clusters.
                    cluster = (cluster + rng.gen_range(1..c.clusters)) % c.clusters;
                }
            }
            let item = members[cluster][popularity[cluster].sample(&mut rng)];
            let mut action = truth.expected_action(item as u64 + 1, &prev, &history);
            for a in &mut action {
                *a += c.noise * rng.sample::<f64, _>(StandardNormal);
            }
            interactions.push(Interaction {
                user,
                item: item as u64 + 1,
                action: action.clone(),
                timestamp: ts0 + t as i64 * c.interval_seconds,
            });
            history.push((item as u64 + 1, action.clone()));
            prev2 = std::mem::replace(&mut prev, action);
        }
    }
    let n = interactions.len() as f64;
    truth.action_mean = (0..c.action_dims).map(|d| interactions.iter().map(|r| r.action[d]).sum::<f64>() / n).collect();
    truth.action_sd = (0..c.action_dims)
        .map(|d| {
            let m = truth.action_mean[d];
            (interactions.iter().map(|r| (r.action[d] - m).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    Ok(SyntheticData { interactions, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{group_by_user, lag1_autocorrelation, mutual_information, quantile_bins};

    fn small() -> SyntheticConfig {
        SyntheticConfig { users: 200, items: 40, clusters: 4, min_len: 5, max_len: 12, ..Default::default() }
    }

    #[test]
    fn same_seed_same_stream() {
        let a = generate_synthetic(&small(), 3).unwrap();
        let b = generate_synthetic(&small(), 3).unwrap();
        assert_eq!(a.interactions, b.interactions);
        assert_eq!(a.truth.to_json(), b.truth.to_json());
        assert_ne!(generate_synthetic(&small(), 4).unwrap().interactions, a.interactions);
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        assert!(generate_synthetic(&SyntheticConfig { items: 1, ..small() }, 0).is_err());
        assert!(generate_synthetic(&SyntheticConfig { alpha: 1.0, ..small() }, 0).is_err());
        assert!(generate_synthetic(&SyntheticConfig { noise: 0.0, ..small() }, 0).is_err());
    }

    #[test]
    fn lengths_and_timestamps() {
        let d = generate_synthetic(&small(), 1).unwrap();
        let seqs = group_by_user(&d.interactions);
        assert_eq!(seqs.len(), 200);
        for s in &seqs {
            assert!((5..=12).contains(&s.interactions.len()));
            assert!(s.interactions.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        }
    }

    fn series(d: &SyntheticData) -> Vec<Vec<f64>> {
        group_by_user(&d.interactions)
            .into_iter()
            .map(|s| s.interactions.iter().map(|r| r.action[0]).collect())
            .collect()
    }

    #[test]
    fn iid_actions_have_no_autocorrelation() {
        let cfg = SyntheticConfig {
            users: 2000,
            min_len: 50,
            max_len: 50,
            alpha: 0.0,
            item_effect: 0.0,
            cue_strength: 0.0,
            ..small()
        };
        let s = series(&generate_synthetic(&cfg, 5).unwrap());
        let rho = lag1_autocorrelation(s.iter().map(Vec::as_slice));
        assert!(rho.abs() < 0.05, "{rho}");
    }

    #[test]
    fn ar1_coefficient_is_recovered() {
        let cfg = SyntheticConfig {
            users: 2000,
            min_len: 50,
            max_len: 50,
            alpha: 0.8,
            item_effect: 0.0,
            cue_strength: 0.0,
            ..small()
        };
        let s = series(&generate_synthetic(&cfg, 6).unwrap());
        let rho = lag1_autocorrelation(s.iter().map(Vec::as_slice));
        assert!((rho - 0.8).abs() < 0.02, "{rho}");
    }

    /// `I((i_t, a_{t-1}); i_{t+1}) - I(i_t; i_{t+1})` over all triples.
    fn mi_gain(d: &SyntheticData) -> f64 {
        let seqs = group_by_user(&d.interactions);
        let all: Vec<f64> = d.interactions.iter().map(|r| r.action[0]).collect();
        let bins = quantile_bins(&all, 4);
        let mut k = 0;
        let (mut ctx, mut cur, mut next) = (Vec::new(), Vec::new(), Vec::new());
        for s in &seqs {
            let it = &s.interactions;
            for t in 1..it.len().saturating_sub(1) {
                ctx.push((it[t].item, bins[k + t - 1]));
                cur.push(it[t].item);
                next.push(it[t + 1].item);
            }
            k += it.len();
        }
        assert!(next.len() >= 100_000);
        mutual_information(&ctx, &next) - mutual_information(&cur, &next)
    }

    #[test]
    fn previous_action_informs_next_item_only_with_sharpness() {
        let base = SyntheticConfig { users: 2500, items: 20, clusters: 4, min_len: 50, max_len: 50, ..small() };
        let flat = mi_gain(&generate_synthetic(&SyntheticConfig { sharpness: 0.0, ..base.clone() }, 7).unwrap());
        let sharp = mi_gain(&generate_synthetic(&SyntheticConfig { sharpness: 2.0, ..base }, 7).unwrap());
        assert!(flat.abs() < 0.005, "{flat}");
        assert!(sharp > flat + 0.02, "{sharp} vs {flat}");
    }
}

//! Seeded synthetic impression population with planted long-tail structure.
//!
//! Behavior lengths follow a truncated Zipf law, so most users have almost no
//! history. Every group has a planted unit preference vector and every item a
//! unit latent; a user's taste is their group's vector plus an idiosyncratic
//! rotation. Labels come from a logistic mix of history affinity (how well
//! the candidate item matches the behaviors actually observed) and group
//! affinity, with the group term's weight decaying in sequence length — short
//! histories are exactly the regime where group identity carries the signal.

use super::{DataError, Dataset, ExampleRecord, Provenance, Result, Vocab};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Zipf};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: u32,
    pub n_items: u32,
    pub n_groups: u32,
    #[serde(default = "default_n_contexts")]
    pub n_contexts: u32,
    /// Exponent of the truncated Zipf law over behavior length.
    #[serde(default = "default_zipf_exponent")]
    pub zipf_exponent: f64,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    /// Dimension of the hidden taste space the generator plants.
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Logistic weight of group affinity (at length 0).
    #[serde(default = "default_strength")]
    pub group_strength: f64,
    /// Logistic weight of history affinity (at long lengths).
    #[serde(default = "default_strength")]
    pub history_strength: f64,
    /// Probability of flipping a label after drawing it.
    #[serde(default = "default_label_noise")]
    pub label_noise: f64,
    #[serde(default)]
    pub bias: f64,
    /// Length scale of the exp(-l/scale) decay moving label weight from the
    /// group term to the history term.
    #[serde(default = "default_length_scale")]
    pub length_scale: f64,
    /// How far an individual's taste may rotate away from the group vector.
    #[serde(default = "default_idiosyncrasy")]
    pub idiosyncrasy: f64,
    #[serde(default = "default_train_impressions")]
    pub train_impressions: u32,
    #[serde(default = "default_eval_impressions")]
    pub eval_impressions: u32,
}

fn default_n_contexts() -> u32 {
    4
}
fn default_zipf_exponent() -> f64 {
    1.2
}
fn default_max_seq_len() -> usize {
    500
}
fn default_latent_dim() -> usize {
    8
}
fn default_strength() -> f64 {
    4.0
}
fn default_label_noise() -> f64 {
    0.05
}
fn default_length_scale() -> f64 {
    10.0
}
fn default_idiosyncrasy() -> f64 {
    0.6
}
fn default_train_impressions() -> u32 {
    3
}
fn default_eval_impressions() -> u32 {
    1
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DataError::Config(msg));
        if self.n_users == 0 || self.n_items == 0 || self.n_groups == 0 || self.n_contexts == 0 {
            return bad("vocab sizes must all be positive".into());
        }
        if self.zipf_exponent <= 0.0 {
            return bad(format!("zipf_exponent must be > 0, got {}", self.zipf_exponent));
        }
        if !(0.0..=0.5).contains(&self.label_noise) {
            return bad(format!("label_noise must lie in [0, 0.5], got {}", self.label_noise));
        }
        if self.group_strength < 0.0 || self.history_strength < 0.0 {
            return bad("affinity strengths must be non-negative".into());
        }
        if self.latent_dim == 0 || self.max_seq_len == 0 {
            return bad("latent_dim and max_seq_len must be positive".into());
        }
        if self.length_scale <= 0.0 {
            return bad(format!("length_scale must be > 0, got {}", self.length_scale));
        }
        if self.train_impressions == 0 {
            return bad("train_impressions must be positive".into());
        }
        Ok(())
    }
}

/// Share of the label logit carried by the group term at sequence length `l`,
/// according to the generator's own mixing weights. Strictly decreasing in
/// `l` whenever both strengths are positive.
pub fn group_signal_fraction(cfg: &SynthConfig, l: usize) -> f64 {
    let w = (-(l as f64) / cfg.length_scale).exp();
    let g = cfg.group_strength * w;
    let h = cfg.history_strength * (1.0 - w);
    if g + h == 0.0 {
        return 0.0;
    }
    g / (g + h)
}

// Behavior items mostly track the user's taste; the rest are random browsing.
const BEHAVIOR_ALIGNED_PROB: f64 = 0.8;
// Aligned picks take the best of this many uniform candidates.
const ALIGNED_CANDIDATES: usize = 8;
// Half of all candidate impressions are taste-aligned so labels stay mixed.
const IMPRESSION_ALIGNED_PROB: f64 = 0.5;

struct Latents {
    group_pref: Vec<Vec<f64>>,
    item: Vec<Vec<f64>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn aligned_item(rng: &mut ChaCha8Rng, latents: &Latents, taste: &[f64], n_items: u32) -> u32 {
    let mut best = rng.random_range(0..n_items);
    let mut best_score = dot(&latents.item[best as usize], taste);
    for _ in 1..ALIGNED_CANDIDATES {
        let c = rng.random_range(0..n_items);
        let s = dot(&latents.item[c as usize], taste);
        if s > best_score {
            best = c;
            best_score = s;
        }
    }
    best
}

/// Deterministic population for a fixed `(cfg, seed)`: records are ordered
/// user-major, each user contributing `train_impressions` then
/// `eval_impressions` impressions (see [`holdout_split`]).
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.latent_dim;

    let latents = Latents {
        group_pref: (0..cfg.n_groups).map(|_| unit_vector(&mut rng, d)).collect(),
        item: (0..cfg.n_items).map(|_| unit_vector(&mut rng, d)).collect(),
    };
    // Zipf over {1..max+1}, shifted down so length 0 (cold users) is the mode.
    let length_law = Zipf::new((cfg.max_seq_len + 1) as f64, cfg.zipf_exponent)
        .map_err(|e| DataError::Config(format!("zipf law: {e}")))?;

    let mut records = Vec::new();
    for user_id in 0..cfg.n_users {
        let group = rng.random_range(0..cfg.n_groups);
        let pref = &latents.group_pref[group as usize];
        let jitter = unit_vector(&mut rng, d);
        let mut taste: Vec<f64> = pref
            .iter()
            .zip(&jitter)
            .map(|(p, j)| p + cfg.idiosyncrasy * j)
            .collect();
        let tn = taste.iter().map(|x| x * x).sum::<f64>().sqrt();
        for t in &mut taste {
            *t /= tn;
        }

        let l_u = (length_law.sample(&mut rng) as usize) - 1;
        let behaviors: Vec<u32> = (0..l_u)
            .map(|_| {
                if rng.random_bool(BEHAVIOR_ALIGNED_PROB) {
                    aligned_item(&mut rng, &latents, &taste, cfg.n_items)
                } else {
                    rng.random_range(0..cfg.n_items)
                }
            })
            .collect();
        let history_mean: Vec<f64> = if behaviors.is_empty() {
            vec![0.0; d]
        } else {
            let mut m = vec![0.0; d];
            for &b in &behaviors {
                for (mi, wi) in m.iter_mut().zip(&latents.item[b as usize]) {
                    *mi += wi;
                }
            }
            for mi in &mut m {
                *mi /= behaviors.len() as f64;
            }
            m
        };

        let w = (-(l_u as f64) / cfg.length_scale).exp();
        let n_impr = cfg.train_impressions + cfg.eval_impressions;
        for _ in 0..n_impr {
            let item_id = if rng.random_bool(IMPRESSION_ALIGNED_PROB) {
                aligned_item(&mut rng, &latents, &taste, cfg.n_items)
            } else {
                rng.random_range(0..cfg.n_items)
            };
            let item_latent = &latents.item[item_id as usize];
            let hist_advantage = dot(&history_mean, item_latent);
            let group_advantage = dot(pref, item_latent);
            let logit = cfg.history_strength * (1.0 - w) * hist_advantage
                + cfg.group_strength * w * group_advantage
                + cfg.bias;
            let p = 1.0 / (1.0 + (-logit).exp());
            let mut label = u8::from(rng.random_bool(p));
            if cfg.label_noise > 0.0 && rng.random_bool(cfg.label_noise) {
                label = 1 - label;
            }
            records.push(ExampleRecord {
                user_id,
                group: vec![group],
                item_id,
                context_id: rng.random_range(0..cfg.n_contexts),
                behaviors: behaviors.clone(),
                label,
            });
        }
    }

    Ok(Dataset {
        records,
        vocab: Vocab {
            n_users: cfg.n_users,
            n_groups: cfg.n_groups,
            n_items: cfg.n_items,
            n_contexts: cfg.n_contexts,
        },
        max_seq_len: cfg.max_seq_len,
        provenance: Provenance::Generated { seed },
    })
}

/// Split off the last `eval_per_user` records of every user as the held-out
/// set, preserving record order within each side.
pub fn holdout_split(ds: &Dataset, eval_per_user: u32) -> (Dataset, Dataset) {
    use std::collections::BTreeMap;
    let mut per_user: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        per_user.entry(r.user_id).or_default().push(i);
    }
    let mut is_eval = vec![false; ds.records.len()];
    for idxs in per_user.values() {
        let k = (eval_per_user as usize).min(idxs.len().saturating_sub(1));
        for &i in &idxs[idxs.len() - k..] {
            is_eval[i] = true;
        }
    }
    let pick = |want_eval: bool| Dataset {
        records: ds
            .records
            .iter()
            .enumerate()
            .filter(|(i, _)| is_eval[*i] == want_eval)
            .map(|(_, r)| r.clone())
            .collect(),
        vocab: ds.vocab,
        max_seq_len: ds.max_seq_len,
        provenance: Provenance::Derived,
    };
    (pick(false), pick(true))
}

//! Scoring and diagnostics: AUC with exact tie handling, segment-wise
//! evaluation on the deterministic mean path, the length-bin variance report,
//! and the behavior-masking sensitivity report.

use crate::data::{batch_iter_sequential, Dataset, Segment, SegmentLabel};
use crate::models::{CtrModel, ForwardMode, ModelError};
use crate::params::ParamStore;
use crate::tensor::{Tape, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("AUC undefined: {n} examples contain only one class")]
    UndefinedMetric { n: usize },
    #[error("report needs the stochastic variant (no posterior scale net)")]
    NotStochastic,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Records scored per forward pass during evaluation.
const EVAL_BATCH: usize = 128;

// ── rank statistics ─────────────────────────────────────────────────

/// 1-based ranks with ties given the average rank of their run.
/// All inputs must be finite (scores come from a sigmoid).
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .expect("scores must be comparable")
    });
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean of ranks i+1..=j+1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a positive example outscores a negative one, ties
/// counted half. Rank-statistic form, O(n log n).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::UndefinedMetric { n: labels.len() });
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(r, _)| r)
        .sum();
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// O(n²) pair-counting AUC; the oracle the rank form is tested against.
pub fn auc_brute(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(EvalError::UndefinedMetric { n: labels.len() });
    }
    Ok(wins / pairs as f64)
}

/// Spearman rank correlation (tie-averaged ranks, Pearson on ranks).
/// Returns 0 when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 {
        return 0.0;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

// ── dataset scoring ─────────────────────────────────────────────────

/// Per-record click probabilities in dataset order, plus forward-pass
/// diagnostics aggregated over the whole set.
pub struct ScoredDataset {
    pub probs: Vec<f64>,
    /// Mean subspace KL over records; stochastic variant only.
    pub mean_kl: Option<f64>,
    pub empty_history: usize,
    pub degenerate_groups: usize,
}

/// Score every record deterministically (mean path) or, when `mc_samples`
/// is set, by averaging that many sampled passes seeded from `noise_seed`.
pub fn score_dataset(
    model: &CtrModel,
    store: &ParamStore,
    ds: &Dataset,
    mc_samples: Option<usize>,
    noise_seed: u64,
) -> Result<ScoredDataset> {
    let mut probs = Vec::with_capacity(ds.len());
    let mut kl_sum = 0.0;
    let mut kl_records = 0usize;
    let mut saw_kl = false;
    let mut empty = 0;
    let mut degenerate = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    for batch in batch_iter_sequential(ds, EVAL_BATCH)? {
        let passes = mc_samples.unwrap_or(1).max(1);
        let mut acc = vec![0.0; batch.len()];
        for pass in 0..passes {
            let tape = Tape::new();
            let mode = if mc_samples.is_some() {
                ForwardMode::Sample { rng: &mut rng }
            } else {
                ForwardMode::Mean
            };
            let out = model.forward_batch(store, &tape, &batch, mode)?;
            let p = tape.sigmoid(&out.logits)?;
            for (a, v) in acc.iter_mut().zip(p.values()) {
                *a += v;
            }
            // Structural diagnostics are identical across passes; count once.
            if pass == 0 {
                empty += out.empty_history;
                degenerate += out.degenerate_groups;
                if let Some(kl) = &out.kl_mean {
                    saw_kl = true;
                    kl_sum += kl.item() * batch.len() as f64;
                    kl_records += batch.len();
                }
            }
        }
        for a in acc {
            probs.push(a / passes as f64);
        }
    }
    Ok(ScoredDataset {
        probs,
        mean_kl: if saw_kl { Some(kl_sum / kl_records as f64) } else { None },
        empty_history: empty,
        degenerate_groups: degenerate,
    })
}

// ── segment evaluation ──────────────────────────────────────────────

/// AUC per segment; `None` marks a cell whose examples were single-class.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAuc {
    pub all: Option<f64>,
    pub head: Option<f64>,
    pub tail: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub auc: SegmentAuc,
    pub n_records: usize,
    pub n_head_records: usize,
    pub n_tail_records: usize,
    pub mean_kl: Option<f64>,
    pub empty_history: usize,
    pub degenerate_groups: usize,
}

/// Score the dataset and compute All/Head/Tail AUC. Users missing from
/// `segments` (unseen at split time) count as tail.
pub fn evaluate(
    model: &CtrModel,
    store: &ParamStore,
    ds: &Dataset,
    segments: &SegmentLabel,
    mc_samples: Option<usize>,
    noise_seed: u64,
) -> Result<EvalReport> {
    let scored = score_dataset(model, store, ds, mc_samples, noise_seed)?;
    let labels: Vec<u8> = ds.records.iter().map(|r| r.label).collect();
    let mut head_scores = Vec::new();
    let mut head_labels = Vec::new();
    let mut tail_scores = Vec::new();
    let mut tail_labels = Vec::new();
    for (i, r) in ds.records.iter().enumerate() {
        match segments.get(r.user_id) {
            Some(Segment::Head) => {
                head_scores.push(scored.probs[i]);
                head_labels.push(r.label);
            }
            _ => {
                tail_scores.push(scored.probs[i]);
                tail_labels.push(r.label);
            }
        }
    }
    let cell = |s: &[f64], y: &[u8]| -> Option<f64> { auc(s, y).ok() };
    Ok(EvalReport {
        auc: SegmentAuc {
            all: cell(&scored.probs, &labels),
            head: cell(&head_scores, &head_labels),
            tail: cell(&tail_scores, &tail_labels),
        },
        n_records: ds.len(),
        n_head_records: head_scores.len(),
        n_tail_records: tail_scores.len(),
        mean_kl: scored.mean_kl,
        empty_history: scored.empty_history,
        degenerate_groups: scored.degenerate_groups,
    })
}

// ── variance report ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct VarianceBin {
    /// Inclusive lower and upper sequence-length bounds.
    pub bin_lo: usize,
    pub bin_hi: usize,
    /// Distinct users whose records fell in the bin.
    pub n_users: usize,
    /// Posterior scale averaged over records in the bin and dimensions.
    pub mean_sigma: f64,
}

/// Log-spaced length-bin edges over `[0, max_len]`; lengths are long-tailed
/// so linear bins would starve the upper range.
fn length_bins(max_len: usize, n_bins: usize) -> Vec<(usize, usize)> {
    let n_bins = n_bins.max(1);
    let top = (1.0 + max_len as f64).ln();
    let mut edges: Vec<usize> = (0..=n_bins)
        .map(|i| ((top * i as f64 / n_bins as f64).exp() - 1.0).round() as usize)
        .collect();
    edges.dedup();
    edges
        .windows(2)
        .map(|w| (if w[0] == 0 { 0 } else { w[0] + 1 }, w[1]))
        .collect()
}

/// Mean posterior scale per sequence-length bin. Empty bins are omitted.
pub fn variance_report(
    model: &CtrModel,
    store: &ParamStore,
    ds: &Dataset,
    n_bins: usize,
) -> Result<Vec<VarianceBin>> {
    use std::collections::BTreeSet;
    let bins = length_bins(ds.max_seq_len, n_bins);
    let mut sums = vec![0.0; bins.len()];
    let mut counts = vec![0usize; bins.len()];
    let mut users: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); bins.len()];
    for batch in batch_iter_sequential(ds, EVAL_BATCH)? {
        let tape = Tape::new();
        let out = model.forward_batch(store, &tape, &batch, ForwardMode::Mean)?;
        let sigma = out.sigma.as_ref().ok_or(EvalError::NotStochastic)?;
        let d = sigma.shape()[1];
        for (row, (&len, &user)) in batch.lengths.iter().zip(&batch.user_ids).enumerate() {
            let Some(bin) = bins.iter().position(|&(lo, hi)| len >= lo && len <= hi) else {
                continue;
            };
            let row_mean: f64 =
                sigma.values()[row * d..(row + 1) * d].iter().sum::<f64>() / d as f64;
            sums[bin] += row_mean;
            counts[bin] += 1;
            users[bin].insert(user);
        }
    }
    Ok(bins
        .iter()
        .enumerate()
        .filter(|&(i, _)| counts[i] > 0)
        .map(|(i, &(lo, hi))| VarianceBin {
            bin_lo: lo,
            bin_hi: hi,
            n_users: users[i].len(),
            mean_sigma: sums[i] / counts[i] as f64,
        })
        .collect())
}

pub fn write_variance_csv(path: &Path, rows: &[VarianceBin]) -> Result<()> {
    let rendered: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.bin_lo.to_string(),
                r.bin_hi.to_string(),
                r.n_users.to_string(),
                crate::jsonfmt::format_f64(r.mean_sigma),
            ]
        })
        .collect();
    crate::jsonfmt::write_csv_atomic(path, &["bin_lo", "bin_hi", "n_users", "mean_sigma"], &rendered)?;
    Ok(())
}

// ── masking sensitivity ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Sensitivity {
    /// Per-dimension mean |latent(true) − latent(masked)| over tail records.
    pub tail: Vec<f64>,
    /// Same over head records.
    pub head: Vec<f64>,
}

/// How much the latent interest moves when the behavior sequence is masked
/// to nothing, per dimension, averaged within head and tail segments.
pub fn mask_sensitivity(
    model: &CtrModel,
    store: &ParamStore,
    ds: &Dataset,
    segments: &SegmentLabel,
) -> Result<Sensitivity> {
    let d = model.cfg.d;
    let mut sums = [vec![0.0; d], vec![0.0; d]]; // [tail, head]
    let mut counts = [0usize, 0usize];
    for batch in batch_iter_sequential(ds, EVAL_BATCH)? {
        let tape = Tape::new();
        let full = model.forward_batch(store, &tape, &batch, ForwardMode::Mean)?;
        let mut blanked = batch.clone();
        blanked.mask = vec![0.0; blanked.mask.len()];
        let tape2 = Tape::new();
        let masked = model.forward_batch(store, &tape2, &blanked, ForwardMode::Mean)?;
        for (row, r) in batch.indices.iter().map(|&i| &ds.records[i]).enumerate() {
            let which = match segments.get(r.user_id) {
                Some(Segment::Head) => 1,
                _ => 0,
            };
            let full_row = &full.latent.values()[row * d..(row + 1) * d];
            let masked_row = &masked.latent.values()[row * d..(row + 1) * d];
            for (s, (a, b)) in sums[which].iter_mut().zip(full_row.iter().zip(masked_row)) {
                *s += (a - b).abs();
            }
            counts[which] += 1;
        }
    }
    let avg = |sum: &[f64], n: usize| -> Vec<f64> {
        sum.iter()
            .map(|s| if n == 0 { 0.0 } else { s / n as f64 })
            .collect()
    };
    Ok(Sensitivity {
        tail: avg(&sums[0], counts[0]),
        head: avg(&sums[1], counts[1]),
    })
}

pub fn write_sensitivity_csv(path: &Path, s: &Sensitivity) -> Result<()> {
    let rendered: Vec<Vec<String>> = s
        .tail
        .iter()
        .zip(&s.head)
        .enumerate()
        .map(|(dim, (t, h))| {
            vec![
                dim.to_string(),
                crate::jsonfmt::format_f64(*t),
                crate::jsonfmt::format_f64(*h),
            ]
        })
        .collect();
    crate::jsonfmt::write_csv_atomic(
        path,
        &["dim", "tail_mean_abs_diff", "head_mean_abs_diff"],
        &rendered,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, ModelVariant, ProjectionMode};
    use crate::data::{split_head_tail, Provenance, Vocab};
    use rand::Rng;

    #[test]
    fn auc_spec_values() {
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4, 0.4, 0.4, 0.4], &[1, 0, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined_not_zero() {
        assert!(matches!(
            auc(&[0.2, 0.4], &[1, 1]),
            Err(EvalError::UndefinedMetric { n: 2 })
        ));
        assert!(auc_brute(&[0.2, 0.4], &[0, 0]).is_err());
    }

    #[test]
    fn rank_form_matches_brute_force_with_heavy_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..200 {
            let n = rng.random_range(2..=if trial % 10 == 0 { 1000 } else { 60 });
            // Coarse score grid forces tie runs.
            let scores: Vec<f64> =
                (0..n).map(|_| rng.random_range(0..8) as f64 / 7.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            match (auc(&scores, &labels), auc_brute(&scores, &labels)) {
                (Ok(fast), Ok(brute)) => {
                    assert!(
                        (fast - brute).abs() < 1e-12,
                        "n={n}: rank {fast} vs brute {brute}"
                    );
                }
                (Err(_), Err(_)) => {}
                (a, b) => panic!("definedness disagrees: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn all_ties_give_exactly_half() {
        let scores = vec![0.5; 100];
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
        assert_eq!(auc_brute(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn duplication_leaves_auc_unchanged() {
        let scores = [0.9, 0.2, 0.7, 0.7, 0.1];
        let labels = [1u8, 0, 1, 0, 0];
        let base = auc(&scores, &labels).unwrap();
        let mut s2: Vec<f64> = scores.to_vec();
        s2.extend_from_slice(&scores);
        let mut y2: Vec<u8> = labels.to_vec();
        y2.extend_from_slice(&labels);
        assert!((auc(&s2, &y2).unwrap() - base).abs() < 1e-15);
    }

    #[test]
    fn spearman_extremes() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[5.0, 1.0, -2.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[7.0, 7.0, 7.0]), 0.0);
    }

    fn tiny_dataset() -> Dataset {
        use crate::data::ExampleRecord;
        // Users 0,1 have rich histories; 2,3 sparse — a clean head/tail split.
        let mk = |user, item, behaviors: &[u32], label| ExampleRecord {
            user_id: user,
            group: vec![user % 2],
            item_id: item,
            context_id: 0,
            behaviors: behaviors.to_vec(),
            label,
        };
        Dataset {
            records: vec![
                mk(0, 1, &[2, 3, 4], 1),
                mk(0, 2, &[2, 3, 4], 0),
                mk(1, 3, &[1, 2, 4], 1),
                mk(1, 4, &[1, 2], 0),
                mk(2, 5, &[1], 1),
                mk(3, 6, &[], 0),
            ],
            vocab: Vocab { n_users: 4, n_groups: 2, n_items: 8, n_contexts: 2 },
            max_seq_len: 10,
            provenance: Provenance::Derived,
        }
    }

    fn model_and_store(variant: ModelVariant) -> (CtrModel, ParamStore) {
        let cfg = ModelConfig {
            variant,
            d: 4,
            use_flow: true,
            k_flow: 2,
            use_monotonic_reg: true,
            projection_mode: ProjectionMode::Orthogonal,
            sigma_min: 1e-8,
            sigma_max: 1e3,
            epsilon_g: 1e-6,
            kv_projection: false,
            scaled_attention: false,
        };
        CtrModel::init(cfg, tiny_dataset().vocab, 10, 99).unwrap()
    }

    #[test]
    fn evaluate_is_record_order_invariant() {
        let ds = tiny_dataset();
        let segments = split_head_tail(&ds, 0.5).unwrap();
        let (model, store) = model_and_store(ModelVariant::Gpsvi);
        let base = evaluate(&model, &store, &ds, &segments, None, 0).unwrap();
        let mut shuffled = ds.clone();
        shuffled.records.reverse();
        let again = evaluate(&model, &store, &shuffled, &segments, None, 0).unwrap();
        assert_eq!(base.auc, again.auc);
        assert_eq!(base.n_head_records, again.n_head_records);
    }

    #[test]
    fn mc_scoring_is_seeded_and_converges_toward_mean_path() {
        let ds = tiny_dataset();
        let (model, store) = model_and_store(ModelVariant::Gpsvi);
        let a = score_dataset(&model, &store, &ds, Some(16), 7).unwrap();
        let b = score_dataset(&model, &store, &ds, Some(16), 7).unwrap();
        assert_eq!(a.probs, b.probs);
        let c = score_dataset(&model, &store, &ds, Some(16), 8).unwrap();
        assert_ne!(a.probs, c.probs, "different noise seed, different draws");
    }

    #[test]
    fn variance_report_covers_all_records_and_positive_sigma() {
        let ds = tiny_dataset();
        let (model, store) = model_and_store(ModelVariant::Gpsvi);
        let rows = variance_report(&model, &store, &ds, 6).unwrap();
        assert!(!rows.is_empty());
        let covered: usize = {
            // Sum of per-bin record counts equals the dataset size: infer by
            // rebuilding counts from user sets being non-empty rows only.
            rows.iter().map(|r| r.n_users).sum()
        };
        assert!(covered >= 4, "each user appears in some bin");
        for r in &rows {
            assert!(r.mean_sigma > 0.0);
            assert!(r.bin_lo <= r.bin_hi);
        }
        let (_, attn_store) = model_and_store(ModelVariant::Attn);
        let (attn_model, _) = model_and_store(ModelVariant::Attn);
        assert!(matches!(
            variance_report(&attn_model, &attn_store, &ds, 6),
            Err(EvalError::NotStochastic)
        ));
    }

    #[test]
    fn sensitivity_vectors_are_nonnegative_with_d_entries() {
        let ds = tiny_dataset();
        let segments = split_head_tail(&ds, 0.5).unwrap();
        let (model, store) = model_and_store(ModelVariant::Gpsvi);
        let s = mask_sensitivity(&model, &store, &ds, &segments).unwrap();
        assert_eq!(s.tail.len(), 4);
        assert_eq!(s.head.len(), 4);
        assert!(s.tail.iter().chain(&s.head).all(|&v| v >= 0.0));
        // Rich histories move the latent when blanked.
        assert!(s.head.iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn zeroed_value_projection_kills_sensitivity() {
        let ds = tiny_dataset();
        let segments = split_head_tail(&ds, 0.5).unwrap();
        let cfg = ModelConfig {
            variant: ModelVariant::Attn,
            d: 4,
            use_flow: false,
            k_flow: 2,
            use_monotonic_reg: false,
            projection_mode: ProjectionMode::Orthogonal,
            sigma_min: 1e-8,
            sigma_max: 1e3,
            epsilon_g: 1e-6,
            kv_projection: true,
            scaled_attention: false,
        };
        let (model, store) = CtrModel::init(cfg, ds.vocab, 10, 5).unwrap();
        store
            .set_values("attn.wv", vec![0.0; 16])
            .unwrap();
        store.end_step();
        let s = mask_sensitivity(&model, &store, &ds, &segments).unwrap();
        assert!(s.tail.iter().chain(&s.head).all(|&v| v == 0.0));
    }

    #[test]
    fn length_bins_are_contiguous_and_cover_the_range() {
        let bins = length_bins(500, 8);
        assert_eq!(bins.first().unwrap().0, 0);
        assert_eq!(bins.last().unwrap().1, 500);
        for w in bins.windows(2) {
            assert_eq!(w[0].1 + 1, w[1].0, "bins must tile the range");
        }
        // Every length in range lands in exactly one bin.
        for len in 0..=500usize {
            let hits = bins.iter().filter(|&&(lo, hi)| len >= lo && len <= hi).count();
            assert_eq!(hits, 1, "length {len}");
        }
    }
}

//! Seeded minibatch training: adaptive-moment updates, the composite
//! objective (likelihood + weighted KL + monotonic penalty), the repeat
//! protocol, and deterministic metrics/checkpoint artifacts.

use crate::config::{ConfigError, ModelVariant, RunConfig, SplitBasis};
use crate::data::{
    batch_iter, generate_synthetic, holdout_split, load_jsonl, split_head_tail, Batch, DataError,
    Dataset, SegmentLabel,
};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::jsonfmt::JsonValue;
use crate::models::{CtrModel, ForwardMode, ModelError};
use crate::params::{ParamError, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::variational::monotonic_regularizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(
        "non-finite loss at repeat {repeat}, epoch {epoch}, batch {batch_index} \
         (bce {bce}, kl {kl}, reg {reg}); aborting run"
    )]
    NonFiniteLoss {
        repeat: usize,
        epoch: usize,
        batch_index: usize,
        bce: f64,
        kl: f64,
        reg: f64,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Runtime aborts are non-finite losses or failures whose source chain
    /// bottoms out in the tensor engine; everything else is a validation
    /// problem with the inputs.
    pub fn is_runtime_abort(&self) -> bool {
        if matches!(self, TrainError::NonFiniteLoss { .. }) {
            return true;
        }
        let mut src: Option<&(dyn std::error::Error + 'static)> = Some(self);
        while let Some(e) = src {
            if e.downcast_ref::<crate::tensor::TensorError>().is_some() {
                return true;
            }
            src = e.source();
        }
        false
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Independent deterministic stream from a root seed; salts keep the
/// shuffle, noise, and pair-sampling streams from aliasing.
fn derived_seed(base: u64, salt: u64) -> u64 {
    base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

// ── optimizer ───────────────────────────────────────────────────────

/// Adaptive moment estimation with bias correction. Parameters that
/// received no gradient this step keep their value and their moments.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: std::collections::BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: std::collections::BTreeMap::new(),
        }
    }

    /// Apply one update from the gradients accumulated this step, then
    /// release the step's leaves.
    pub fn step(&mut self, store: &ParamStore) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for name in store.names() {
            let Some(grad) = store.step_grad(&name)? else {
                continue;
            };
            let n = grad.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut vals = store.values(&name)?.as_ref().clone();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                vals[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set_values(&name, vals)?;
        }
        store.end_step();
        Ok(())
    }
}

// ── loss assembly ───────────────────────────────────────────────────

/// One batch's objective and its logged decomposition.
pub struct LossParts {
    /// bce + beta * kl + lambda * reg, on the tape.
    pub total: Tensor,
    pub bce: f64,
    pub kl: f64,
    pub reg: f64,
    /// Effective KL weight used (reflects warm-up).
    pub beta: f64,
    pub no_pair_warning: bool,
    pub empty_history: usize,
    pub degenerate_groups: usize,
}

/// Mean BCE plus the weighted KL and monotonic-penalty terms. The logged
/// parts always recombine to the total within 1e-10 — asserted here.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    model: &CtrModel,
    store: &ParamStore,
    tape: &Tape,
    batch: &Batch,
    mode: ForwardMode<'_>,
    beta: f64,
    lambda_m: f64,
    use_monotonic_reg: bool,
    pair_rng: &mut ChaCha8Rng,
) -> Result<LossParts> {
    let out = model.forward_batch(store, tape, batch, mode)?;
    let bce = tape.mean(&tape.bce_with_logits(&out.logits, &batch.labels)?, None)?;
    let mut total = bce.clone();
    let mut kl_val = 0.0;
    if let Some(kl) = &out.kl_mean {
        kl_val = kl.item();
        total = tape.add(&total, &tape.scale(kl, beta)?)?;
    }
    let mut reg_val = 0.0;
    let mut no_pair_warning = false;
    if use_monotonic_reg && lambda_m > 0.0 {
        if let Some(sigma) = &out.sigma {
            let reg = monotonic_regularizer(tape, sigma, &batch.lengths, pair_rng)
                .map_err(ModelError::from)?;
            reg_val = reg.value.item();
            no_pair_warning = reg.skipped_no_pairs;
            total = tape.add(&total, &tape.scale(&reg.value, lambda_m)?)?;
        }
    }
    let parts = LossParts {
        bce: bce.item(),
        kl: kl_val,
        reg: reg_val,
        beta,
        no_pair_warning,
        empty_history: out.empty_history,
        degenerate_groups: out.degenerate_groups,
        total,
    };
    // Non-finite totals are the caller's NonFiniteLoss abort, not a
    // decomposition bug, so only check agreement while values are finite.
    let recombined = parts.bce + beta * parts.kl + lambda_m * parts.reg;
    assert!(
        !parts.total.item().is_finite() || (recombined - parts.total.item()).abs() <= 1e-10,
        "loss decomposition drifted: {} vs {}",
        recombined,
        parts.total.item()
    );
    Ok(parts)
}

// ── data resolution ─────────────────────────────────────────────────

/// Materialize the configured data source into train and optional eval
/// datasets. Synthetic data is generated from the data seed and split by
/// per-user holdout; file sources are loaded with a shared vocabulary.
pub fn resolve_datasets(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    if let Some(synth) = &cfg.data.synthetic {
        let full = generate_synthetic(synth, cfg.seeds.data)?;
        let (train, eval) = holdout_split(&full, synth.eval_impressions);
        return Ok((train, Some(eval)));
    }
    let train_path = cfg
        .data
        .train_path
        .as_ref()
        .expect("validated config has a data source");
    let mut train = load_jsonl(Path::new(train_path), cfg.data.max_seq_len)?;
    let Some(eval_path) = &cfg.data.eval_path else {
        return Ok((train, None));
    };
    let mut eval = load_jsonl(Path::new(eval_path), cfg.data.max_seq_len)?;
    // Independent files may infer different vocabularies; take the union so
    // both sides index the same embedding tables.
    let v = crate::data::Vocab {
        n_users: train.vocab.n_users.max(eval.vocab.n_users),
        n_groups: train.vocab.n_groups.max(eval.vocab.n_groups),
        n_items: train.vocab.n_items.max(eval.vocab.n_items),
        n_contexts: train.vocab.n_contexts.max(eval.vocab.n_contexts),
    };
    train.vocab = v;
    eval.vocab = v;
    let len = train.max_seq_len.max(eval.max_seq_len);
    train.max_seq_len = len;
    eval.max_seq_len = len;
    Ok((train, Some(eval)))
}

/// Head/tail membership on the configured basis (eval counts by default;
/// falls back to the train set when no eval data exists).
pub fn resolve_segments(
    cfg: &RunConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
) -> Result<SegmentLabel> {
    let basis = match (cfg.eval.split_on, eval) {
        (SplitBasis::Eval, Some(e)) => e,
        _ => train,
    };
    Ok(split_head_tail(basis, cfg.eval.head_quantile)?)
}

// ── training ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub kl: f64,
    pub reg: f64,
    pub no_pair_warnings: usize,
}

#[derive(Debug, Clone)]
pub struct RepeatMetrics {
    pub init_seed: u64,
    pub noise_seed: u64,
    pub epochs: Vec<EpochStats>,
    pub final_loss: f64,
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub variant: ModelVariant,
    pub repeats: Vec<RepeatMetrics>,
    pub head_users: usize,
    pub tail_users: usize,
}

/// Train one repeat and return its trained store alongside its metrics.
fn train_one_repeat(
    cfg: &RunConfig,
    train_ds: &Dataset,
    eval_ds: Option<&Dataset>,
    segments: &SegmentLabel,
    repeat: usize,
) -> Result<(ParamStore, RepeatMetrics)> {
    let init_seed = cfg.seeds.init.wrapping_add(repeat as u64);
    let noise_seed = derived_seed(cfg.seeds.noise, 1 + repeat as u64);
    let (model, store) = CtrModel::init(
        cfg.model.clone(),
        train_ds.vocab,
        train_ds.max_seq_len,
        init_seed,
    )?;
    let mut adam = Adam::new(cfg.train.lr);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut pair_rng =
        ChaCha8Rng::seed_from_u64(derived_seed(cfg.seeds.noise, 500_000 + repeat as u64));
    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.train.epochs {
        let shuffle_seed = derived_seed(
            cfg.seeds.data,
            1 + (repeat * 10_000 + epoch) as u64,
        );
        let batches = batch_iter(train_ds, cfg.train.batch_size, shuffle_seed)?;
        let n_batches = batches.len().max(1);
        let mut sums = EpochStats {
            epoch,
            loss: 0.0,
            bce: 0.0,
            kl: 0.0,
            reg: 0.0,
            no_pair_warnings: 0,
        };
        for (batch_index, batch) in batches.iter().enumerate() {
            let beta_t = if cfg.train.beta_warmup && epoch == 0 {
                cfg.train.beta * (batch_index + 1) as f64 / n_batches as f64
            } else {
                cfg.train.beta
            };
            let tape = Tape::new();
            let parts = batch_loss(
                &model,
                &store,
                &tape,
                batch,
                ForwardMode::Sample { rng: &mut noise_rng },
                beta_t,
                cfg.train.lambda_m,
                cfg.model.use_monotonic_reg,
                &mut pair_rng,
            )?;
            let total = parts.total.item();
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    repeat,
                    epoch,
                    batch_index,
                    bce: parts.bce,
                    kl: parts.kl,
                    reg: parts.reg,
                });
            }
            sums.loss += total;
            sums.bce += parts.bce;
            sums.kl += parts.kl;
            sums.reg += parts.reg;
            sums.no_pair_warnings += parts.no_pair_warning as usize;
            tape.backward(&parts.total)?;
            adam.step(&store)?;
            final_loss = total;
        }
        let n = n_batches as f64;
        sums.loss /= n;
        sums.bce /= n;
        sums.kl /= n;
        sums.reg /= n;
        epochs.push(sums);
    }
    let eval_report = match eval_ds {
        Some(ds) => Some(evaluate(
            &model,
            &store,
            ds,
            segments,
            cfg.eval.mc_samples,
            derived_seed(cfg.seeds.noise, 900_000 + repeat as u64),
        )?),
        None => None,
    };
    Ok((
        store,
        RepeatMetrics {
            init_seed,
            noise_seed,
            epochs,
            final_loss,
            eval: eval_report,
        },
    ))
}

/// Run the full repeat protocol in memory; no files are written. Returns
/// one trained parameter store per repeat, in repeat order.
pub fn train_in_memory(cfg: &RunConfig) -> Result<(TrainSummary, Vec<ParamStore>)> {
    let (train_ds, eval_ds) = resolve_datasets(cfg)?;
    let segments = resolve_segments(cfg, &train_ds, eval_ds.as_ref())?;
    let mut repeats = Vec::with_capacity(cfg.train.repeats);
    let mut stores = Vec::with_capacity(cfg.train.repeats);
    for r in 0..cfg.train.repeats {
        let (store, metrics) = train_one_repeat(cfg, &train_ds, eval_ds.as_ref(), &segments, r)?;
        stores.push(store);
        repeats.push(metrics);
    }
    Ok((
        TrainSummary {
            variant: cfg.model.variant,
            repeats,
            head_users: segments.n_head(),
            tail_users: segments.n_users() - segments.n_head(),
        },
        stores,
    ))
}

/// Train per config and write `run_config.json`, `checkpoint.json` (first
/// repeat's parameters), and `metrics.json` into `out_dir`.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    cfg.write_to(out_dir)?;
    let (summary, stores) = train_in_memory(cfg)?;
    stores[0].save_checkpoint(&out_dir.join("checkpoint.json"))?;
    let json = render_metrics(&summary);
    crate::jsonfmt::write_atomic(&out_dir.join("metrics.json"), json.render().as_bytes())?;
    Ok(summary)
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.json")
}

// ── metrics rendering ───────────────────────────────────────────────

fn opt_f64(v: Option<f64>) -> JsonValue {
    match v {
        Some(x) => JsonValue::Float(x),
        None => JsonValue::Null,
    }
}

/// Mean and sample standard deviation over the defined entries.
fn mean_std(values: &[Option<f64>]) -> (Option<f64>, Option<f64>, usize) {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return (None, None, 0);
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let std = if defined.len() < 2 {
        0.0
    } else {
        (defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(std), defined.len())
}

/// Fixed-key-order metrics document; floats render with 17 significant
/// digits so identical runs produce identical bytes.
pub fn render_metrics(summary: &TrainSummary) -> JsonValue {
    let mut root = JsonValue::object();
    root.push("schema", JsonValue::Str("gpsvi-metrics/1".into()));
    root.push("variant", JsonValue::Str(summary.variant.to_string()));
    root.push("repeats", JsonValue::Int(summary.repeats.len() as i64));
    root.push("head_users", JsonValue::Int(summary.head_users as i64));
    root.push("tail_users", JsonValue::Int(summary.tail_users as i64));
    let mut per_repeat = Vec::new();
    for r in &summary.repeats {
        let mut obj = JsonValue::object();
        obj.push("init_seed", JsonValue::Int(r.init_seed as i64));
        obj.push("noise_seed", JsonValue::Int(r.noise_seed as i64));
        obj.push("final_loss", JsonValue::Float(r.final_loss));
        let mut eps = Vec::new();
        for e in &r.epochs {
            let mut eo = JsonValue::object();
            eo.push("epoch", JsonValue::Int(e.epoch as i64));
            eo.push("loss", JsonValue::Float(e.loss));
            eo.push("bce", JsonValue::Float(e.bce));
            eo.push("kl", JsonValue::Float(e.kl));
            eo.push("reg", JsonValue::Float(e.reg));
            eo.push("no_pair_warnings", JsonValue::Int(e.no_pair_warnings as i64));
            eps.push(eo);
        }
        obj.push("epochs", JsonValue::Array(eps));
        match &r.eval {
            Some(ev) => {
                obj.push("auc_all", opt_f64(ev.auc.all));
                obj.push("auc_head", opt_f64(ev.auc.head));
                obj.push("auc_tail", opt_f64(ev.auc.tail));
                obj.push("eval_records", JsonValue::Int(ev.n_records as i64));
                obj.push("eval_mean_kl", opt_f64(ev.mean_kl));
                obj.push("empty_history", JsonValue::Int(ev.empty_history as i64));
                obj.push(
                    "degenerate_groups",
                    JsonValue::Int(ev.degenerate_groups as i64),
                );
            }
            None => {
                obj.push("auc_all", JsonValue::Null);
                obj.push("auc_head", JsonValue::Null);
                obj.push("auc_tail", JsonValue::Null);
                obj.push("eval_records", JsonValue::Int(0));
                obj.push("eval_mean_kl", JsonValue::Null);
                obj.push("empty_history", JsonValue::Int(0));
                obj.push("degenerate_groups", JsonValue::Int(0));
            }
        }
        per_repeat.push(obj);
    }
    root.push("per_repeat", JsonValue::Array(per_repeat));
    type Cell = (&'static str, fn(&RepeatMetrics) -> Option<f64>);
    let cells: [Cell; 3] = [
        ("auc_all", |r| r.eval.as_ref().and_then(|e| e.auc.all)),
        ("auc_head", |r| r.eval.as_ref().and_then(|e| e.auc.head)),
        ("auc_tail", |r| r.eval.as_ref().and_then(|e| e.auc.tail)),
    ];
    let mut agg = JsonValue::object();
    for (name, pick) in cells {
        let vals: Vec<Option<f64>> = summary.repeats.iter().map(pick).collect();
        let (mean, std, n) = mean_std(&vals);
        agg.push(&format!("{name}_mean"), opt_f64(mean));
        agg.push(&format!("{name}_std"), opt_f64(std));
        agg.push(&format!("{name}_defined"), JsonValue::Int(n as i64));
    }
    root.push("aggregate", agg);
    root
}

/// Standalone evaluation document used by the `evaluate` subcommand.
pub fn render_eval_report(report: &EvalReport) -> JsonValue {
    let mut root = JsonValue::object();
    root.push("schema", JsonValue::Str("gpsvi-eval/1".into()));
    root.push("n_records", JsonValue::Int(report.n_records as i64));
    root.push("head_records", JsonValue::Int(report.n_head_records as i64));
    root.push("tail_records", JsonValue::Int(report.n_tail_records as i64));
    root.push("auc_all", opt_f64(report.auc.all));
    root.push("auc_head", opt_f64(report.auc.head));
    root.push("auc_tail", opt_f64(report.auc.tail));
    root.push("mean_kl", opt_f64(report.mean_kl));
    root.push("empty_history", JsonValue::Int(report.empty_history as i64));
    root.push(
        "degenerate_groups",
        JsonValue::Int(report.degenerate_groups as i64),
    );
    root
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, EvalConfig, ModelConfig, ProjectionMode, TrainConfig};
    use crate::data::SynthConfig;

    fn small_synth() -> SynthConfig {
        SynthConfig {
            n_users: 40,
            n_items: 30,
            n_groups: 4,
            n_contexts: 2,
            zipf_exponent: 1.2,
            max_seq_len: 12,
            latent_dim: 6,
            group_strength: 4.0,
            history_strength: 4.0,
            label_noise: 0.05,
            bias: 0.0,
            length_scale: 6.0,
            idiosyncrasy: 0.6,
            train_impressions: 3,
            eval_impressions: 1,
        }
    }

    fn cfg(variant: ModelVariant) -> RunConfig {
        RunConfig {
            model: ModelConfig {
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
            },
            train: TrainConfig {
                lr: 1e-3,
                beta: 0.5,
                beta_warmup: false,
                lambda_m: 0.1,
                batch_size: 16,
                epochs: 1,
                repeats: 1,
            },
            eval: EvalConfig {
                head_quantile: 0.25,
                split_on: SplitBasis::Eval,
                mc_samples: None,
            },
            data: DataConfig {
                train_path: None,
                eval_path: None,
                synthetic: Some(small_synth()),
                max_seq_len: 12,
            },
            seeds: crate::config::Seeds { init: 1, data: 2, noise: 3 },
        }
    }

    #[test]
    fn identical_seeds_identical_bytes() {
        let c = cfg(ModelVariant::Gpsvi);
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        train(&c, dir1.path()).unwrap();
        train(&c, dir2.path()).unwrap();
        for file in ["metrics.json", "checkpoint.json", "run_config.json"] {
            let a = std::fs::read(dir1.path().join(file)).unwrap();
            let b = std::fs::read(dir2.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} must be byte-identical");
        }
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut c = cfg(ModelVariant::Gpsvi);
        c.train.lr = 0.0;
        let (train_ds, _) = resolve_datasets(&c).unwrap();
        let (model, store) = CtrModel::init(
            c.model.clone(),
            train_ds.vocab,
            train_ds.max_seq_len,
            c.seeds.init,
        )
        .unwrap();
        let before: Vec<(String, Vec<f64>)> = store
            .names()
            .iter()
            .map(|n| (n.clone(), store.values(n).unwrap().as_ref().clone()))
            .collect();
        let mut adam = Adam::new(0.0);
        let mut noise = ChaCha8Rng::seed_from_u64(3);
        let mut pairs = ChaCha8Rng::seed_from_u64(4);
        for batch in batch_iter(&train_ds, 16, 1).unwrap() {
            let tape = Tape::new();
            let parts = batch_loss(
                &model,
                &store,
                &tape,
                &batch,
                ForwardMode::Sample { rng: &mut noise },
                0.5,
                0.1,
                true,
                &mut pairs,
            )
            .unwrap();
            tape.backward(&parts.total).unwrap();
            adam.step(&store).unwrap();
        }
        for (name, vals) in before {
            assert_eq!(
                store.values(&name).unwrap().as_ref(),
                &vals,
                "{name} moved under lr = 0"
            );
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.register("x", vec![1], vec![5.0]).unwrap();
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let tape = Tape::new();
            let x = store.leaf("x").unwrap();
            let loss = tape.mul(&x, &x).unwrap();
            let loss = tape.sum(&loss, None).unwrap();
            tape.backward(&loss).unwrap();
            adam.step(&store).unwrap();
        }
        let x = store.values("x").unwrap()[0];
        assert!(x.abs() < 1e-2, "x = {x} after 2000 Adam steps");
    }

    #[test]
    fn single_example_batch_warns_without_pairs() {
        let c = cfg(ModelVariant::Gpsvi);
        let (train_ds, _) = resolve_datasets(&c).unwrap();
        let (model, store) = CtrModel::init(
            c.model.clone(),
            train_ds.vocab,
            train_ds.max_seq_len,
            7,
        )
        .unwrap();
        let batches = crate::data::batch_iter_sequential(&train_ds, train_ds.len() - 1).unwrap();
        let last = batches.last().unwrap();
        assert_eq!(last.len(), 1);
        let tape = Tape::new();
        let mut pairs = ChaCha8Rng::seed_from_u64(0);
        let parts = batch_loss(
            &model,
            &store,
            &tape,
            last,
            ForwardMode::Mean,
            0.5,
            0.1,
            true,
            &mut pairs,
        )
        .unwrap();
        assert!(parts.no_pair_warning);
        assert_eq!(parts.reg, 0.0);
    }

    #[test]
    fn warmup_scales_the_kl_share_of_the_loss() {
        let mut c = cfg(ModelVariant::Gpsvi);
        c.train.beta_warmup = true;
        c.train.epochs = 1;
        let summary = train_in_memory(&c).unwrap().0;
        // The run completes and logs finite components.
        let e = &summary.repeats[0].epochs[0];
        assert!(e.loss.is_finite() && e.bce.is_finite() && e.kl.is_finite());
    }

    #[test]
    fn deterministic_baselines_have_no_kl_or_reg() {
        let c = cfg(ModelVariant::Attn);
        let summary = train_in_memory(&c).unwrap().0;
        let e = &summary.repeats[0].epochs[0];
        assert_eq!(e.kl, 0.0);
        assert_eq!(e.reg, 0.0);
        assert!(summary.repeats[0].eval.as_ref().unwrap().auc.all.is_some());
    }

    #[test]
    fn repeats_differ_in_init_but_share_data() {
        let mut c = cfg(ModelVariant::Dnn);
        c.train.repeats = 2;
        let summary = train_in_memory(&c).unwrap().0;
        assert_eq!(summary.repeats.len(), 2);
        assert_ne!(
            summary.repeats[0].init_seed,
            summary.repeats[1].init_seed
        );
        assert_ne!(
            summary.repeats[0].final_loss,
            summary.repeats[1].final_loss
        );
    }
}

//! End-to-end CTR model: one struct covering all four variants, differing
//! only in how the behavior summary becomes the decoder's latent block.
//!
//! Every variant feeds the decoder the same concatenation
//! `[latent | item | context | group]`, so variants can share parameter
//! stores: the stochastic model with its scale clamped to the floor and the
//! flow disabled reproduces the attention baseline's predictions from the
//! same weights.

use super::{
    self_attention_block, sum_pool_flat, target_attention, target_attention_flat, Decoder,
    EmbeddingTables, ModelError,
};
use crate::config::{ModelConfig, ModelVariant};
use crate::data::{Batch, Vocab};
use crate::flow::FlowStack;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::variational::{self, VariationalHead};
use rand_chacha::ChaCha8Rng;

pub type Result<T> = std::result::Result<T, ModelError>;

/// How the stochastic variant resolves its latent draw. Deterministic
/// variants ignore the mode.
pub enum ForwardMode<'a> {
    /// z = mu, pushed through the flow when enabled; serving-style scoring.
    Mean,
    /// Fresh standard-normal noise per example from the shared stream.
    Sample { rng: &'a mut ChaCha8Rng },
    /// Caller-supplied noise, row-major `[B * d]`; for gradient checks and
    /// Monte-Carlo evaluation.
    FixedNoise { xi: &'a [f64] },
}

pub struct ForwardOutput {
    /// `[B]` pre-sigmoid scores.
    pub logits: Tensor,
    /// `[B, d]` latent block handed to the decoder (post-flow for the
    /// stochastic variant).
    pub latent: Tensor,
    /// Mean subspace KL over the batch; stochastic variant only.
    pub kl_mean: Option<Tensor>,
    /// `[B, d]` posterior scales; stochastic variant only.
    pub sigma: Option<Tensor>,
    pub empty_history: usize,
    pub degenerate_groups: usize,
}

pub struct CtrModel {
    pub cfg: ModelConfig,
    emb: EmbeddingTables,
    dec: Decoder,
    var: VariationalHead,
    flow: Option<FlowStack>,
}

impl CtrModel {
    pub fn new(cfg: ModelConfig, vocab: Vocab, max_seq_len: usize) -> Result<CtrModel> {
        let d = cfg.d;
        let flow = if cfg.variant == ModelVariant::Gpsvi && cfg.use_flow {
            Some(FlowStack::new(d, cfg.k_flow)?)
        } else {
            None
        };
        let var = VariationalHead {
            d,
            sigma_min: cfg.sigma_min,
            sigma_max: cfg.sigma_max,
            epsilon_g: cfg.epsilon_g,
            max_seq_len,
        };
        Ok(CtrModel {
            emb: EmbeddingTables::new(d, vocab),
            dec: Decoder::new(d),
            var,
            flow,
            cfg,
        })
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let d = self.cfg.d;
        self.emb.register(store, rng)?;
        if self.cfg.kv_projection {
            let std = (1.0 / d as f64).sqrt();
            store.register_normal("attn.wk", vec![d, d], std, rng)?;
            store.register_normal("attn.wv", vec![d, d], std, rng)?;
        }
        match self.cfg.variant {
            ModelVariant::TransLite => {
                let std = (1.0 / d as f64).sqrt();
                store.register_normal("tl.wq", vec![d, d], std, rng)?;
                store.register_normal("tl.wk", vec![d, d], std, rng)?;
                store.register_normal("tl.wv", vec![d, d], std, rng)?;
            }
            ModelVariant::Gpsvi => {
                self.var.register(store, rng)?;
                if let Some(flow) = &self.flow {
                    flow.register(store, rng)?;
                }
            }
            ModelVariant::Dnn | ModelVariant::Attn => {}
        }
        self.dec.register(store, rng)?;
        Ok(())
    }

    /// Convenience constructor used by the trainer: model plus a freshly
    /// registered store seeded from `init_seed`.
    pub fn init(
        cfg: ModelConfig,
        vocab: Vocab,
        max_seq_len: usize,
        init_seed: u64,
    ) -> Result<(CtrModel, ParamStore)> {
        use rand::SeedableRng;
        let model = CtrModel::new(cfg, vocab, max_seq_len)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        model.register(&mut store, &mut rng)?;
        Ok((model, store))
    }

    /// Behavior summary v-hat `[B, d]` plus per-row empty-history flags.
    fn summarize(
        &self,
        store: &ParamStore,
        tape: &Tape,
        batch: &Batch,
        item: &Tensor,
    ) -> Result<(Tensor, Vec<bool>)> {
        let b = batch.len();
        let l = batch.l_max;
        let d = self.cfg.d;
        let scaled = self.cfg.scaled_attention;
        let beh = self.emb.items(store, tape, &batch.behaviors)?;
        let (keys, values) = if self.cfg.kv_projection {
            (
                tape.matmul(&beh, &store.leaf("attn.wk")?)?,
                tape.matmul(&beh, &store.leaf("attn.wv")?)?,
            )
        } else {
            (beh.clone(), beh.clone())
        };
        let empty_rows = |mask: &[f64]| -> Vec<bool> {
            (0..b)
                .map(|r| l == 0 || mask[r * l..(r + 1) * l].iter().all(|&m| m == 0.0))
                .collect()
        };
        match self.cfg.variant {
            ModelVariant::Dnn => {
                let pooled = sum_pool_flat(tape, &values, &batch.mask, b, l)?;
                Ok((pooled, empty_rows(&batch.mask)))
            }
            ModelVariant::Attn | ModelVariant::Gpsvi => {
                let (pooled, _, flags) =
                    target_attention_flat(tape, item, &keys, &values, &batch.mask, b, l, scaled)?;
                Ok((pooled, flags))
            }
            ModelVariant::TransLite => {
                let wq = store.leaf("tl.wq")?;
                let wk = store.leaf("tl.wk")?;
                let wv = store.leaf("tl.wv")?;
                let mut rows = Vec::with_capacity(b);
                let mut flags = Vec::with_capacity(b);
                for r in 0..b {
                    let mask = &batch.mask[r * l..(r + 1) * l];
                    if l == 0 || mask.iter().all(|&m| m == 0.0) {
                        rows.push(Tensor::zeros(vec![1, d]));
                        flags.push(true);
                        continue;
                    }
                    let e_row = tape.slice(&beh, 0, r * l, l)?;
                    let refined = self_attention_block(tape, &e_row, &wq, &wk, &wv, mask, scaled)?;
                    let q_row = tape.reshape(&tape.slice(item, 0, r, 1)?, vec![d])?;
                    let att = target_attention(tape, &q_row, &refined, &refined, mask, scaled)?;
                    rows.push(tape.reshape(&att.pooled, vec![1, d])?);
                    flags.push(att.empty_history);
                }
                Ok((tape.concat(&rows, 0)?, flags))
            }
        }
    }

    pub fn forward_batch(
        &self,
        store: &ParamStore,
        tape: &Tape,
        batch: &Batch,
        mode: ForwardMode<'_>,
    ) -> Result<ForwardOutput> {
        let b = batch.len();
        let d = self.cfg.d;
        let item = self.emb.items(store, tape, &batch.item_ids)?;
        let ctx = self.emb.contexts(store, tape, &batch.context_ids)?;
        let group = self.emb.groups_pooled(store, tape, &batch.group_lists)?;
        let (summary, empty_flags) = self.summarize(store, tape, batch, &item)?;

        let mut kl_mean = None;
        let mut sigma = None;
        let mut degenerate_groups = 0;
        let latent = if self.cfg.variant == ModelVariant::Gpsvi {
            let noise: Option<Vec<f64>> = match mode {
                ForwardMode::Mean => None,
                ForwardMode::Sample { rng } => Some(variational::draw_noise(rng, b * d)),
                ForwardMode::FixedNoise { xi } => {
                    assert_eq!(xi.len(), b * d, "noise must cover the whole batch");
                    Some(xi.to_vec())
                }
            };
            let mut z_rows = Vec::with_capacity(b);
            let mut kl_terms = Vec::with_capacity(b);
            let mut sigma_rows = Vec::with_capacity(b);
            for r in 0..b {
                let v_hat = tape.reshape(&tape.slice(&summary, 0, r, 1)?, vec![d])?;
                let post = self
                    .var
                    .posterior_params(store, tape, &v_hat, batch.lengths[r])?;
                let g_row = tape.reshape(&tape.slice(&group, 0, r, 1)?, vec![d])?;
                let i_row = tape.reshape(&tape.slice(&item, 0, r, 1)?, vec![d])?;
                let prior = self.var.group_prior(store, tape, &g_row, &i_row)?;
                sigma_rows.push(tape.reshape(&post.sigma, vec![1, d])?);
                if prior.is_degenerate(self.cfg.epsilon_g) {
                    // No usable group direction: mean path, zero KL.
                    degenerate_groups += 1;
                    z_rows.push(tape.reshape(&post.mu, vec![1, d])?);
                    kl_terms.push(Tensor::scalar(0.0));
                    continue;
                }
                kl_terms.push(variational::kl_projected(
                    tape,
                    &post,
                    &prior,
                    self.cfg.epsilon_g,
                )?);
                let z = match &noise {
                    None => post.mu.clone(),
                    Some(xi) => {
                        variational::sample_latent(
                            tape,
                            &post,
                            &prior,
                            &xi[r * d..(r + 1) * d],
                            self.cfg.projection_mode,
                            self.cfg.epsilon_g,
                        )?
                        .z
                    }
                };
                z_rows.push(tape.reshape(&z, vec![1, d])?);
            }
            kl_mean = Some(tape.mean(&tape.stack_scalars(&kl_terms)?, None)?);
            sigma = Some(tape.concat(&sigma_rows, 0)?);
            let mut z = tape.concat(&z_rows, 0)?;
            if let Some(flow) = &self.flow {
                z = flow.forward(store, tape, &z)?.0;
            }
            z
        } else {
            summary
        };

        let features = self
            .dec
            .assemble(tape, &[latent.clone(), item, ctx, group])?;
        let logits = self.dec.logits(store, tape, &features)?;
        Ok(ForwardOutput {
            logits,
            latent,
            kl_mean,
            sigma,
            empty_history: empty_flags.iter().filter(|&&e| e).count(),
            degenerate_groups,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ProjectionMode;
    use rand::SeedableRng;

    fn cfg(variant: ModelVariant) -> ModelConfig {
        ModelConfig {
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
        }
    }

    fn vocab() -> Vocab {
        Vocab { n_users: 6, n_groups: 3, n_items: 8, n_contexts: 2 }
    }

    /// Three rows: full history, partial history, empty history.
    fn batch() -> Batch {
        Batch {
            indices: vec![0, 1, 2],
            user_ids: vec![0, 1, 2],
            group_lists: vec![vec![0], vec![1, 2], vec![2]],
            item_ids: vec![3, 5, 1],
            context_ids: vec![0, 1, 0],
            lengths: vec![3, 2, 0],
            l_max: 3,
            behaviors: vec![1, 2, 4, 6, 7, 0, 0, 0, 0],
            mask: vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            labels: vec![1.0, 0.0, 1.0],
        }
    }

    #[test]
    fn every_variant_produces_finite_scores_and_embedding_grads() {
        for variant in [
            ModelVariant::Dnn,
            ModelVariant::Attn,
            ModelVariant::TransLite,
            ModelVariant::Gpsvi,
        ] {
            let (model, store) = CtrModel::init(cfg(variant), vocab(), 10, 42).unwrap();
            let tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let out = model
                .forward_batch(&store, &tape, &batch(), ForwardMode::Sample { rng: &mut rng })
                .unwrap();
            assert_eq!(out.logits.shape(), &[3]);
            assert_eq!(out.latent.shape(), &[3, 4]);
            assert!(out.logits.values().iter().all(|v| v.is_finite()));
            assert_eq!(out.empty_history, 1);
            let loss = tape.bce_with_logits(&out.logits, &batch().labels).unwrap();
            let loss = tape.mean(&loss, None).unwrap();
            tape.backward(&loss).unwrap();
            let g = store.step_grad("emb.item").unwrap().unwrap();
            assert!(
                g.iter().any(|v| *v != 0.0),
                "{variant}: loss must reach the embedding table"
            );
        }
    }

    #[test]
    fn stochastic_variant_reports_kl_and_sigma() {
        let (model, store) = CtrModel::init(cfg(ModelVariant::Gpsvi), vocab(), 10, 7).unwrap();
        let tape = Tape::new();
        let out = model
            .forward_batch(&store, &tape, &batch(), ForwardMode::Mean)
            .unwrap();
        let kl = out.kl_mean.as_ref().unwrap().item();
        assert!(kl.is_finite() && kl >= 0.0);
        let sigma = out.sigma.as_ref().unwrap();
        assert_eq!(sigma.shape(), &[3, 4]);
        // Zero-initialized scale net: sigma is exactly 1 everywhere.
        assert!(sigma.values().iter().all(|&s| s == 1.0));
        assert_eq!(out.degenerate_groups, 0);
    }

    #[test]
    fn fixed_noise_is_reproducible_and_nonzero() {
        let (model, store) = CtrModel::init(cfg(ModelVariant::Gpsvi), vocab(), 10, 7).unwrap();
        let xi: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let run = |xi: &[f64]| {
            let tape = Tape::new();
            model
                .forward_batch(&store, &tape, &batch(), ForwardMode::FixedNoise { xi })
                .unwrap()
                .logits
                .values()
                .to_vec()
        };
        let a = run(&xi);
        let b = run(&xi);
        assert_eq!(a, b);
        let tape = Tape::new();
        let mean = model
            .forward_batch(&store, &tape, &batch(), ForwardMode::Mean)
            .unwrap();
        assert_ne!(a, mean.logits.values().to_vec(), "noise must move the scores");
    }

    #[test]
    fn zeroed_prior_net_degrades_every_row_to_the_mean_path() {
        let (model, store) = CtrModel::init(cfg(ModelVariant::Gpsvi), vocab(), 10, 3).unwrap();
        for name in ["gp.w1", "gp.w2", "gp.b1", "gp.b2"] {
            let n: usize = store.shape(name).unwrap().iter().product();
            store.set_values(name, vec![0.0; n]).unwrap();
        }
        store.end_step();
        let xi = vec![0.9; 12];
        let tape = Tape::new();
        let out = model
            .forward_batch(&store, &tape, &batch(), ForwardMode::FixedNoise { xi: &xi })
            .unwrap();
        assert_eq!(out.degenerate_groups, 3);
        assert_eq!(out.kl_mean.unwrap().item(), 0.0);
        let tape2 = Tape::new();
        let mean = model
            .forward_batch(&store, &tape2, &batch(), ForwardMode::Mean)
            .unwrap();
        assert_eq!(out.logits.values(), mean.logits.values());
    }

    /// With the scale clamped to the floor and the flow off, the stochastic
    /// model is the attention baseline: identical weights give (a) bitwise
    /// equal scores on the mean path and (b) sub-1e-6 prediction gaps under
    /// sampled noise.
    #[test]
    fn degenerate_scale_reproduces_the_attention_baseline() {
        let mut gcfg = cfg(ModelVariant::Gpsvi);
        gcfg.use_flow = false;
        gcfg.sigma_min = 1e-8;
        gcfg.sigma_max = 1e-8;
        let (gpsvi, store) = CtrModel::init(gcfg, vocab(), 10, 11).unwrap();
        // Same store: the attention variant reads only the shared subset.
        let attn = CtrModel::new(cfg(ModelVariant::Attn), vocab(), 10).unwrap();
        let b = batch();

        let tape = Tape::new();
        let base = attn
            .forward_batch(&store, &tape, &b, ForwardMode::Mean)
            .unwrap();
        let tape2 = Tape::new();
        let mean = gpsvi
            .forward_batch(&store, &tape2, &b, ForwardMode::Mean)
            .unwrap();
        assert_eq!(base.logits.values(), mean.logits.values());

        let xi: Vec<f64> = (0..12).map(|i| ((i * 37 + 11) % 17) as f64 - 8.0).collect();
        let tape3 = Tape::new();
        let noisy = gpsvi
            .forward_batch(&store, &tape3, &b, ForwardMode::FixedNoise { xi: &xi })
            .unwrap();
        let t4 = Tape::new();
        let p_base = t4.sigmoid(&base.logits).unwrap();
        let p_noisy = t4.sigmoid(&noisy.logits).unwrap();
        for (a, g) in p_base.values().iter().zip(p_noisy.values()) {
            assert!((a - g).abs() < 1e-6, "prediction gap {}", (a - g).abs());
        }
    }

    #[test]
    fn narrow_latent_with_flow_is_rejected() {
        let mut c = cfg(ModelVariant::Gpsvi);
        c.d = 1;
        assert!(CtrModel::new(c, vocab(), 10).is_err());
    }
}

//! Fast oracle suite wired to the `selftest` subcommand.
//!
//! Every check compares an implementation against an independent reference —
//! central finite differences, Monte-Carlo integration, or brute-force pair
//! counting — at budgets small enough to finish in seconds. The heavier
//! acceptance suite reuses the helpers here with its full budgets.

use crate::config::{
    DataConfig, EvalConfig, ModelConfig, ModelVariant, ProjectionMode, RunConfig, Seeds,
    SplitBasis, TrainConfig,
};
use crate::data::{batch_iter_sequential, generate_synthetic, Batch, SynthConfig};
use crate::eval::{auc, auc_brute};
use crate::flow::FlowStack;
use crate::models::{CtrModel, ForwardMode};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::train::{batch_loss, train_in_memory, TrainError};
use crate::variational::{kl_projected, GroupPrior, PosteriorParams};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

pub type Result<T> = std::result::Result<T, TrainError>;

// ── shared oracle helpers ───────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ModelGradReport {
    pub max_rel_err: f64,
    /// `name[index]` of the worst coordinate.
    pub worst_coord: String,
    pub n_coords: usize,
}

/// Compare the taped gradient of a scalar loss against central finite
/// differences for every coordinate of every parameter that received a
/// gradient. `build` must be a pure function of the store's current values
/// (draw any noise outside and replay it).
///
/// Relative error per coordinate is `|a - n| / max(1, |a|, |n|)`, matching
/// the tensor-level checker.
pub fn grad_check_model<F>(store: &ParamStore, build: F) -> Result<ModelGradReport>
where
    F: Fn(&ParamStore, &Tape) -> Result<Tensor>,
{
    let tape = Tape::new();
    let loss = build(store, &tape)?;
    tape.backward(&loss).map_err(crate::models::ModelError::from)?;
    let names = store.names();
    let mut analytic: BTreeMap<String, Option<Vec<f64>>> = BTreeMap::new();
    for name in &names {
        analytic.insert(name.clone(), store.step_grad(name)?);
    }
    store.end_step();

    let eval_at = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let v = build(s, &tape)?.item();
        s.end_step();
        Ok(v)
    };

    let mut report = ModelGradReport {
        max_rel_err: 0.0,
        worst_coord: String::new(),
        n_coords: 0,
    };
    for name in &names {
        let Some(grad) = &analytic[name] else {
            continue;
        };
        let base = store.values(name)?.as_ref().clone();
        for i in 0..base.len() {
            let h = 1e-6 * base[i].abs().max(1.0);
            let mut v = base.clone();
            v[i] += h;
            store.set_values(name, v)?;
            store.end_step();
            let f_plus = eval_at(store)?;
            let mut v = base.clone();
            v[i] -= h;
            store.set_values(name, v)?;
            store.end_step();
            let f_minus = eval_at(store)?;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = grad[i];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            let rel = ((a - numeric) / denom).abs();
            let rel = if rel.is_finite() { rel } else { f64::INFINITY };
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_coord = format!("{name}[{i}]");
            }
            report.n_coords += 1;
        }
        store.set_values(name, base)?;
        store.end_step();
    }
    Ok(report)
}

/// Overwrite every parameter with fresh `scale * N(0,1)` draws, so finite
/// differences never sit on the hinge points a zero init would create.
pub fn randomize_params(store: &ParamStore, scale: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    for name in store.names() {
        let n = store.values(&name)?.len();
        let vals: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        store.set_values(&name, vals)?;
    }
    store.end_step();
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct KlMc {
    pub estimate: f64,
    pub se: f64,
}

/// Monte-Carlo estimate of the in-span KL for one (mu, sigma, g):
/// replicate the sampler's reparameterization in plain arithmetic, project
/// each draw onto u = g/|g|, and average the log-density ratio between
/// N(m, v) and N(0, 1) at the projected coordinate. Converges to the
/// closed form only if both the sampler's in-span law and the formula are
/// right, which is what makes it an oracle.
pub fn kl_in_span_mc(
    mu: &[f64],
    sigma: &[f64],
    g: &[f64],
    n_draws: usize,
    rng: &mut ChaCha8Rng,
) -> KlMc {
    let d = mu.len();
    assert!(n_draws >= 2 && sigma.len() == d && g.len() == d);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 0.0, "degenerate g has no in-span law");
    let u: Vec<f64> = g.iter().map(|v| v / norm).collect();
    let m: f64 = mu.iter().zip(&u).map(|(a, b)| a * b).sum();
    let v: f64 = sigma.iter().zip(&u).map(|(s, ui)| s * s * ui * ui).sum();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_draws {
        // z = mu + (⟨sigma⊙xi, g⟩/|g|²) g, so ⟨z,u⟩ = m + ⟨sigma⊙xi, u⟩.
        let mut along = 0.0;
        for i in 0..d {
            let xi: f64 = rng.sample(StandardNormal);
            along += sigma[i] * xi * u[i];
        }
        let a = m + along;
        let term = -0.5 * v.ln() - along * along / (2.0 * v) + a * a / 2.0;
        sum += term;
        sum_sq += term * term;
    }
    let n = n_draws as f64;
    let mean = sum / n;
    let var = (sum_sq - n * mean * mean).max(0.0) / (n - 1.0);
    KlMc { estimate: mean, se: (var / n).sqrt() }
}

/// Closed-form in-span KL through the tape, for comparison against
/// [`kl_in_span_mc`].
pub fn kl_closed_form(mu: &[f64], sigma: &[f64], g: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let d = mu.len();
    let mk = |v: &[f64]| Tensor::new(vec![d], v.to_vec());
    let p = PosteriorParams {
        mu: mk(mu).map_err(crate::models::ModelError::from)?,
        s: mk(&vec![0.0; d]).map_err(crate::models::ModelError::from)?,
        sigma: mk(sigma).map_err(crate::models::ModelError::from)?,
    };
    let gp = GroupPrior { g: mk(g).map_err(crate::models::ModelError::from)? };
    Ok(kl_projected(&tape, &p, &gp, 1e-12)
        .map_err(crate::models::ModelError::from)?
        .item())
}

/// Finite-difference Jacobian determinant of the flow's forward map at z0.
pub fn flow_fd_jacobian_det(flow: &FlowStack, store: &ParamStore, z0: &[f64]) -> Result<f64> {
    let d = z0.len();
    let run = |z: &[f64]| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let t = Tensor::new(vec![1, d], z.to_vec()).map_err(crate::models::ModelError::from)?;
        let (out, _) = flow.forward(store, &tape, &t).map_err(crate::models::ModelError::from)?;
        let v = out.values().to_vec();
        store.end_step();
        Ok(v)
    };
    let h = 1e-6;
    // Column j holds d(output)/d(z_j).
    let mut jac = vec![0.0; d * d];
    for j in 0..d {
        let mut plus = z0.to_vec();
        plus[j] += h;
        let mut minus = z0.to_vec();
        minus[j] -= h;
        let fp = run(&plus)?;
        let fm = run(&minus)?;
        for i in 0..d {
            jac[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(crate::flow::det_lu(&mut jac, d))
}

/// Small long-tail generator config shared by the quick checks.
pub fn tiny_synth(n_users: u32, n_items: u32, max_seq_len: usize) -> SynthConfig {
    SynthConfig {
        n_users,
        n_items,
        n_groups: 4,
        n_contexts: 2,
        zipf_exponent: 1.2,
        max_seq_len,
        latent_dim: 6,
        group_strength: 4.0,
        history_strength: 4.0,
        label_noise: 0.05,
        bias: 0.0,
        length_scale: (max_seq_len as f64 / 2.0).max(1.0),
        idiosyncrasy: 0.6,
        train_impressions: 3,
        eval_impressions: 1,
    }
}

/// A ready-to-differentiate model: randomized parameters, one batch with
/// mixed history lengths, and a frozen noise draw.
pub struct GradFixture {
    pub model: CtrModel,
    pub store: ParamStore,
    pub batch: Batch,
    pub xi: Vec<f64>,
}

/// Build a stochastic-variant model over a tiny vocabulary and freeze one
/// noise draw, so the full loss is a deterministic function of parameters.
pub fn gpsvi_grad_fixture(
    d: usize,
    k_flow: usize,
    max_seq_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<GradFixture> {
    let synth = tiny_synth(6, 8, max_seq_len);
    let ds = generate_synthetic(&synth, seed)?;
    let batch = batch_iter_sequential(&ds, batch_size)?
        .into_iter()
        .find(|b| b.len() == batch_size)
        .expect("generator yields enough records for one full batch");
    let cfg = ModelConfig {
        variant: ModelVariant::Gpsvi,
        d,
        use_flow: k_flow > 0,
        k_flow: k_flow.max(1),
        use_monotonic_reg: true,
        projection_mode: ProjectionMode::Orthogonal,
        sigma_min: 1e-8,
        sigma_max: 1e3,
        epsilon_g: 1e-6,
        kv_projection: true,
        scaled_attention: true,
    };
    let (model, store) = CtrModel::init(cfg, ds.vocab, ds.max_seq_len, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157);
    randomize_params(&store, 0.3, &mut rng)?;
    let xi: Vec<f64> = (0..batch.len() * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(GradFixture { model, store, batch, xi })
}

/// The full training objective at frozen noise, as a closure suitable for
/// [`grad_check_model`].
pub fn fixture_loss(fx: &GradFixture, store: &ParamStore, tape: &Tape) -> Result<Tensor> {
    // Batch is small enough that the regularizer enumerates all pairs and
    // the rng goes unused; a fixed seed keeps that true by construction.
    let mut pair_rng = ChaCha8Rng::seed_from_u64(7);
    let parts = batch_loss(
        &fx.model,
        store,
        tape,
        &fx.batch,
        ForwardMode::FixedNoise { xi: &fx.xi },
        0.5,
        0.3,
        true,
        &mut pair_rng,
    )?;
    Ok(parts.total)
}

// ── the quick suite ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// Full-loss gradient vs central differences on a small model.
pub fn check_model_gradients() -> Result<CheckResult> {
    let fx = gpsvi_grad_fixture(4, 1, 5, 3, 11)?;
    let report = grad_check_model(&fx.store, |s, t| fixture_loss(&fx, s, t))?;
    Ok(check(
        "model_gradients",
        report.max_rel_err < 1e-4,
        format!(
            "max rel err {:.2e} over {} coords (worst {})",
            report.max_rel_err, report.n_coords, report.worst_coord
        ),
    ))
}

/// Closed-form in-span KL vs Monte-Carlo log-density-ratio average.
pub fn check_kl_oracle() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let d = 6;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let mu: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma: Vec<f64> = (0..d)
            .map(|_| (0.4 * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let g: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let analytic = kl_closed_form(&mu, &sigma, &g)?;
        let mc = kl_in_span_mc(&mu, &sigma, &g, 200_000, &mut rng);
        let gap_in_se = (analytic - mc.estimate).abs() / mc.se.max(1e-12);
        worst = worst.max(gap_in_se);
    }
    Ok(check(
        "kl_oracle",
        worst <= 3.0,
        format!("worst |analytic - MC| = {worst:.2} standard errors (limit 3)"),
    ))
}

/// Flow invertibility, volume preservation by finite differences, and the
/// exact-zero logged correction.
pub fn check_flow() -> Result<CheckResult> {
    use crate::models::ModelError;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let d = 4;
    let mut worst_round = 0.0f64;
    let mut worst_det = 0.0f64;
    for k in [1usize, 4] {
        let flow = FlowStack::new(d, k).map_err(ModelError::from)?;
        let mut store = ParamStore::new();
        flow.register(&mut store, &mut rng).map_err(ModelError::from)?;
        for _ in 0..200 {
            let z: Vec<f64> = (0..d)
                .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let tape = Tape::new();
            let t = Tensor::new(vec![1, d], z.clone()).map_err(ModelError::from)?;
            let (fwd, logdet) = flow.forward(&store, &tape, &t).map_err(ModelError::from)?;
            if logdet.item().to_bits() != 0.0f64.to_bits() {
                return Ok(check("flow", false, "logged logdet is not exactly +0.0".into()));
            }
            let back = flow.inverse(&store, &tape, &fwd).map_err(ModelError::from)?;
            for (a, b) in z.iter().zip(back.values()) {
                worst_round = worst_round.max((a - b).abs());
            }
            store.end_step();
        }
        let z0: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let det = flow_fd_jacobian_det(&flow, &store, &z0)?;
        worst_det = worst_det.max((det - 1.0).abs());
    }
    Ok(check(
        "flow",
        worst_round < 1e-9 && worst_det < 1e-6,
        format!("round-trip {worst_round:.2e}, |FD det - 1| {worst_det:.2e}"),
    ))
}

/// Rank-statistic AUC vs brute-force pair counting on tie-heavy instances.
pub fn check_auc_oracle() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for trial in 0..50 {
        let n = rng.random_range(2..=200);
        // A coarse score grid forces plenty of exact ties.
        let levels = rng.random_range(1..=6);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
        labels[0] = 1;
        labels[n - 1] = 0;
        let fast = auc(&scores, &labels).expect("both classes present");
        let brute = auc_brute(&scores, &labels).expect("both classes present");
        if fast != brute {
            return Ok(check(
                "auc_oracle",
                false,
                format!("trial {trial}: rank {fast} != brute {brute}"),
            ));
        }
    }
    Ok(check("auc_oracle", true, "rank AUC == pair counting on 50 instances".into()))
}

/// Two identical tiny runs render byte-identical metrics.
pub fn check_determinism() -> Result<CheckResult> {
    let cfg = RunConfig {
        model: ModelConfig {
            variant: ModelVariant::Gpsvi,
            d: 4,
            use_flow: true,
            k_flow: 1,
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
            beta: 0.4,
            beta_warmup: true,
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
            synthetic: Some(tiny_synth(30, 20, 10)),
            max_seq_len: 10,
        },
        seeds: Seeds { init: 1, data: 2, noise: 3 },
    };
    let a = crate::train::render_metrics(&train_in_memory(&cfg)?.0).render();
    let b = crate::train::render_metrics(&train_in_memory(&cfg)?.0).render();
    Ok(check(
        "determinism",
        a == b,
        if a == b { "repeated run rendered identical metrics".into() } else { "metrics differ between identical runs".into() },
    ))
}

/// Run every quick check in a fixed order.
pub fn run_all() -> Result<Vec<CheckResult>> {
    Ok(vec![
        check_model_gradients()?,
        check_kl_oracle()?,
        check_flow()?,
        check_auc_oracle()?,
        check_determinism()?,
    ])
}

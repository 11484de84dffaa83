//! Group-prior variational layer: a Gaussian posterior over latent user
//! interest whose mean is the attention summary, a group-interest network, a
//! projection-restricted reparameterized sampler, the matching subspace KL,
//! and the monotonic variance regularizer.
//!
//! All ops here are single-example (rank-1) and pure given an explicit noise
//! draw; the model loops them over a batch. Two projection conventions are
//! supported: `Orthogonal` uses the true rank-1 projector g gᵀ/‖g‖², under
//! which the restricted KL below is exact; `Cosine` scales the noise by its
//! cosine against g instead. The cosine pushforward is not Gaussian, so in
//! that mode the orthogonal-mode KL is reused as a surrogate.

use crate::config::ProjectionMode;
use crate::params::{ParamError, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum VarError {
    #[error("group vector is degenerate: |g| = {norm:.3e} < {epsilon:.3e}")]
    DegenerateGroup { norm: f64, epsilon: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, VarError>;

/// Posterior over one user's latent interest: mean is the behavior summary
/// itself (identity transform), scale comes from a linear net with exponent
/// activation, so sigma is positive by construction.
#[derive(Debug, Clone)]
pub struct PosteriorParams {
    /// `[d]`; the same tensor handle as the attention summary v-hat.
    pub mu: Tensor,
    /// `[d]`; clamped pre-activation s with sigma = exp(s).
    pub s: Tensor,
    /// `[d]`; always positive.
    pub sigma: Tensor,
}

/// Group interest vector for a (user-profile, item) pair.
#[derive(Debug, Clone)]
pub struct GroupPrior {
    /// `[d]`.
    pub g: Tensor,
}

impl GroupPrior {
    pub fn norm(&self) -> f64 {
        self.g.values().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_degenerate(&self, epsilon_g: f64) -> bool {
        self.norm() < epsilon_g
    }

    fn require_usable(&self, epsilon_g: f64) -> Result<()> {
        let norm = self.norm();
        if norm < epsilon_g {
            return Err(VarError::DegenerateGroup { norm, epsilon: epsilon_g });
        }
        Ok(())
    }
}

/// One reparameterized draw, retaining the noise that produced it.
#[derive(Debug, Clone)]
pub struct LatentSample {
    /// `[d]`.
    pub z: Tensor,
    pub xi: Vec<f64>,
}

/// Configuration shared by the posterior and group-prior networks.
#[derive(Debug, Clone)]
pub struct VariationalHead {
    pub d: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub epsilon_g: f64,
    pub max_seq_len: usize,
}

impl VariationalHead {
    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let d = self.d;
        // Zero-initialized scale net: sigma starts exactly at 1 everywhere.
        store.register_zeros("post.ws", vec![d, d])?;
        store.register_zeros("post.wl", vec![d])?;
        store.register_zeros("post.bs", vec![d])?;
        let std1 = (2.0 / (3 * d) as f64).sqrt();
        store.register_normal("gp.w1", vec![2 * d, d], std1, rng)?;
        store.register_zeros("gp.b1", vec![d])?;
        let std2 = (2.0 / (2 * d) as f64).sqrt();
        store.register_normal("gp.w2", vec![d, d], std2, rng)?;
        store.register_zeros("gp.b2", vec![d])?;
        Ok(())
    }

    /// Normalized length feature fed to the scale net.
    fn length_feature(&self, l_u: usize) -> f64 {
        (1.0 + l_u as f64).ln() / (1.0 + self.max_seq_len as f64).ln()
    }

    /// mu = v-hat exactly (identity); s = clamp(v-hat Ws + l-feature * wl +
    /// bs); sigma = exp(s).
    pub fn posterior_params(
        &self,
        store: &ParamStore,
        tape: &Tape,
        v_hat: &Tensor,
        l_u: usize,
    ) -> Result<PosteriorParams> {
        let row = tape.reshape(v_hat, vec![1, self.d])?;
        let lin = tape.reshape(&tape.matmul(&row, &store.leaf("post.ws")?)?, vec![self.d])?;
        let len_term = tape.scale(&store.leaf("post.wl")?, self.length_feature(l_u))?;
        let pre = tape.add(&tape.add(&lin, &len_term)?, &store.leaf("post.bs")?)?;
        let s = tape.clamp(&pre, self.sigma_min.ln(), self.sigma_max.ln())?;
        let sigma = tape.exp(&s)?;
        Ok(PosteriorParams { mu: v_hat.clone(), s, sigma })
    }

    /// g = MLP(concat(group embedding, item embedding)); a pure function of
    /// its two inputs.
    pub fn group_prior(
        &self,
        store: &ParamStore,
        tape: &Tape,
        group_emb: &Tensor,
        item_emb: &Tensor,
    ) -> Result<GroupPrior> {
        let x = tape.concat(&[group_emb.clone(), item_emb.clone()], 0)?;
        let row = tape.reshape(&x, vec![1, 2 * self.d])?;
        let h = tape.relu(&tape.add(
            &tape.matmul(&row, &store.leaf("gp.w1")?)?,
            &store.leaf("gp.b1")?,
        )?)?;
        let out = tape.add(
            &tape.matmul(&h, &store.leaf("gp.w2")?)?,
            &store.leaf("gp.b2")?,
        )?;
        Ok(GroupPrior { g: tape.reshape(&out, vec![self.d])? })
    }
}

/// Restrict `y` to the group direction. Orthogonal mode applies the rank-1
/// projector g gᵀ/‖g‖²; cosine mode returns (⟨y,g⟩ / (‖y‖·‖g‖)) · y, with
/// the y = 0 limit defined as 0.
pub fn project_onto(
    tape: &Tape,
    gp: &GroupPrior,
    y: &Tensor,
    mode: ProjectionMode,
    epsilon_g: f64,
) -> Result<Tensor> {
    gp.require_usable(epsilon_g)?;
    let g = &gp.g;
    match mode {
        ProjectionMode::Orthogonal => {
            let gg = tape.dot(g, g)?;
            let inv = tape.exp(&tape.neg(&tape.log(&gg)?)?)?;
            let coeff = tape.mul(&tape.dot(y, g)?, &inv)?;
            Ok(tape.mul(g, &coeff)?)
        }
        ProjectionMode::Cosine => {
            if y.values().iter().all(|&v| v == 0.0) {
                return Ok(Tensor::zeros(vec![g.numel()]));
            }
            let ny = tape.l2norm(y)?;
            let ng = tape.l2norm(g)?;
            let inv = tape.exp(&tape.neg(&tape.add(&tape.log(&ny)?, &tape.log(&ng)?)?)?)?;
            let coeff = tape.mul(&tape.dot(y, g)?, &inv)?;
            Ok(tape.mul(y, &coeff)?)
        }
    }
}

/// z = mu + Proj_g(diag(sigma) xi); differentiable in mu, sigma, g with xi
/// held fixed. Degenerate g propagates as an error here — the model layer
/// checks first and takes the mean path instead.
pub fn sample_latent(
    tape: &Tape,
    p: &PosteriorParams,
    gp: &GroupPrior,
    xi: &[f64],
    mode: ProjectionMode,
    epsilon_g: f64,
) -> Result<LatentSample> {
    let noise = Tensor::new(vec![xi.len()], xi.to_vec()).map_err(VarError::Tensor)?;
    let y = tape.mul(&p.sigma, &noise)?;
    let proj = project_onto(tape, gp, &y, mode, epsilon_g)?;
    Ok(LatentSample { z: tape.add(&p.mu, &proj)?, xi: xi.to_vec() })
}

/// KL between the in-span marginals of the posterior and the standard-normal
/// prior restricted to span(g): with u = g/‖g‖, m = ⟨mu, u⟩ and
/// t = log(uᵀ diag(sigma²) u), the value is ½(eᵗ + m² − 1 − t).
/// Out-of-span directions are deterministic under both and contribute 0.
pub fn kl_projected(
    tape: &Tape,
    p: &PosteriorParams,
    gp: &GroupPrior,
    epsilon_g: f64,
) -> Result<Tensor> {
    gp.require_usable(epsilon_g)?;
    let norm = tape.l2norm(&gp.g)?;
    let inv = tape.exp(&tape.neg(&tape.log(&norm)?)?)?;
    let u = tape.mul(&gp.g, &inv)?;
    let m = tape.dot(&p.mu, &u)?;
    let var_in = tape.dot(&tape.mul(&p.sigma, &p.sigma)?, &tape.mul(&u, &u)?)?;
    let t = tape.log(&var_in)?;
    // e^t is var_in itself; reuse it rather than exp(log(...)).
    let sum = tape.sub(&tape.add_scalar(&tape.add(&var_in, &tape.mul(&m, &m)?)?, -1.0)?, &t)?;
    Ok(tape.scale(&sum, 0.5)?)
}

/// Outcome of the monotonic regularizer, with the no-pairs warning surfaced
/// to the trainer's counter.
pub struct RegOutput {
    /// Scalar penalty, ≥ 0.
    pub value: Tensor,
    pub skipped_no_pairs: bool,
}

// All pairs up to this batch size; beyond it, PAIR_SAMPLE_FACTOR * n sampled
// pairs scaled back to the all-pairs total (unbiased).
const ALL_PAIRS_MAX_BATCH: usize = 64;
const PAIR_SAMPLE_FACTOR: usize = 64;

/// Penalize any sigma dimension that grows with sequence length: for user
/// pairs with strictly different lengths, sum max(0, sigma_longer −
/// sigma_shorter) per dimension. Equal-length pairs contribute nothing.
pub fn monotonic_regularizer(
    tape: &Tape,
    sigma: &Tensor,
    lengths: &[usize],
    pair_rng: &mut ChaCha8Rng,
) -> Result<RegOutput> {
    let n = lengths.len();
    debug_assert_eq!(sigma.shape()[0], n);
    if n < 2 {
        return Ok(RegOutput { value: Tensor::scalar(0.0), skipped_no_pairs: true });
    }
    let mut longer = Vec::new();
    let mut shorter = Vec::new();
    let mut scale = 1.0;
    if n <= ALL_PAIRS_MAX_BATCH {
        for i in 0..n {
            for j in i + 1..n {
                match lengths[i].cmp(&lengths[j]) {
                    std::cmp::Ordering::Greater => {
                        longer.push(i);
                        shorter.push(j);
                    }
                    std::cmp::Ordering::Less => {
                        longer.push(j);
                        shorter.push(i);
                    }
                    std::cmp::Ordering::Equal => {}
                }
            }
        }
    } else {
        let total_pairs = n * (n - 1) / 2;
        let sampled = PAIR_SAMPLE_FACTOR * n;
        for _ in 0..sampled {
            let i = pair_rng.random_range(0..n);
            let mut j = pair_rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            match lengths[i].cmp(&lengths[j]) {
                std::cmp::Ordering::Greater => {
                    longer.push(i);
                    shorter.push(j);
                }
                std::cmp::Ordering::Less => {
                    longer.push(j);
                    shorter.push(i);
                }
                std::cmp::Ordering::Equal => {}
            }
        }
        scale = total_pairs as f64 / sampled as f64;
    }
    if longer.is_empty() {
        return Ok(RegOutput { value: Tensor::scalar(0.0), skipped_no_pairs: false });
    }
    let s_long = tape.index_select(sigma, 0, &longer)?;
    let s_short = tape.index_select(sigma, 0, &shorter)?;
    let hinges = tape.relu(&tape.sub(&s_long, &s_short)?)?;
    let total = tape.sum(&hinges, None)?;
    let value = if scale == 1.0 { total } else { tape.scale(&total, scale)? };
    Ok(RegOutput { value, skipped_no_pairs: false })
}

/// Standard-normal noise vector from the shared stream.
pub fn draw_noise(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

//! Volume-preserving additive-coupling stack applied to latent samples.
//!
//! Each layer splits coordinates into a pass-through half A and a shifted
//! half B, adds a learned function of A to B, and leaves A untouched:
//! `f(z) = (z_A, z_B + h(z_A))`. The Jacobian is unit-triangular, so the
//! log-determinant is identically zero and the inverse simply subtracts the
//! same shift. Partitions alternate even/odd between consecutive layers so
//! every coordinate is eventually transformed.

use crate::params::{ParamError, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("coupling flow needs latent dimension >= 2, got {0}")]
    TooNarrow(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Debug, Clone)]
pub struct FlowStack {
    d: usize,
    n_layers: usize,
}

/// Empirical generalized-variance comparison before/after the flow.
#[derive(Debug, Clone)]
pub struct VarianceCheck {
    pub det_in: f64,
    pub det_out: f64,
    /// det_out / det_in.
    pub ratio: f64,
    /// Mean of per-shard log ratios.
    pub log_ratio: f64,
    /// Standard error of the per-shard log ratio.
    pub log_ratio_se: f64,
}

impl FlowStack {
    pub fn new(d: usize, n_layers: usize) -> Result<Self> {
        if d < 2 {
            return Err(FlowError::TooNarrow(d));
        }
        Ok(FlowStack { d, n_layers })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Pass-through (A) and shifted (B) coordinate sets for one layer.
    fn partition(&self, layer: usize) -> (Vec<usize>, Vec<usize>) {
        let even: Vec<usize> = (0..self.d).step_by(2).collect();
        let odd: Vec<usize> = (1..self.d).step_by(2).collect();
        if layer.is_multiple_of(2) {
            (even, odd)
        } else {
            (odd, even)
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let hidden = self.d;
        for k in 0..self.n_layers {
            let (a, b) = self.partition(k);
            let std1 = (2.0 / (a.len() + hidden) as f64).sqrt();
            let std2 = (2.0 / (hidden + b.len()) as f64).sqrt();
            store.register_normal(&format!("flow.{k}.w1"), vec![a.len(), hidden], std1, rng)?;
            store.register_zeros(&format!("flow.{k}.b1"), vec![hidden])?;
            store.register_normal(&format!("flow.{k}.w2"), vec![hidden, b.len()], std2, rng)?;
            store.register_zeros(&format!("flow.{k}.b2"), vec![b.len()])?;
        }
        Ok(())
    }

    /// Shift produced from the pass-through half: one hidden relu layer.
    fn shift(
        &self,
        store: &ParamStore,
        tape: &Tape,
        layer: usize,
        za: &Tensor,
    ) -> Result<Tensor> {
        let h = tape.relu(&tape.add(
            &tape.matmul(za, &store.leaf(&format!("flow.{layer}.w1"))?)?,
            &store.leaf(&format!("flow.{layer}.b1"))?,
        )?)?;
        Ok(tape.add(
            &tape.matmul(&h, &store.leaf(&format!("flow.{layer}.w2"))?)?,
            &store.leaf(&format!("flow.{layer}.b2"))?,
        )?)
    }

    /// Scatter `[za | zb]` columns back to their original coordinate order.
    fn reassemble(
        &self,
        tape: &Tape,
        za: &Tensor,
        zb: &Tensor,
        a: &[usize],
        b: &[usize],
    ) -> Result<Tensor> {
        let packed = tape.concat(&[za.clone(), zb.clone()], 1)?;
        let mut pos = vec![0usize; self.d];
        for (j, &i) in a.iter().enumerate() {
            pos[i] = j;
        }
        for (j, &i) in b.iter().enumerate() {
            pos[i] = a.len() + j;
        }
        Ok(tape.index_select(&packed, 1, &pos)?)
    }

    /// Push `z` `[B, d]` through every layer. The returned log-determinant is
    /// the constant 0 — additive coupling has a unit-triangular Jacobian — and
    /// is surfaced so callers can log it or add it as a (vanishing)
    /// correction term.
    pub fn forward(&self, store: &ParamStore, tape: &Tape, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut cur = z.clone();
        for k in 0..self.n_layers {
            let (a, b) = self.partition(k);
            let za = tape.index_select(&cur, 1, &a)?;
            let zb = tape.index_select(&cur, 1, &b)?;
            let shifted = tape.add(&zb, &self.shift(store, tape, k, &za)?)?;
            cur = self.reassemble(tape, &za, &shifted, &a, &b)?;
        }
        Ok((cur, Tensor::scalar(0.0)))
    }

    /// Exact inverse: undo layers in reverse order by subtracting the same
    /// shift (which depends only on the untouched half).
    pub fn inverse(&self, store: &ParamStore, tape: &Tape, z: &Tensor) -> Result<Tensor> {
        let mut cur = z.clone();
        for k in (0..self.n_layers).rev() {
            let (a, b) = self.partition(k);
            let za = tape.index_select(&cur, 1, &a)?;
            let zb = tape.index_select(&cur, 1, &b)?;
            let unshifted = tape.sub(&zb, &self.shift(store, tape, k, &za)?)?;
            cur = self.reassemble(tape, &za, &unshifted, &a, &b)?;
        }
        Ok(cur)
    }

    /// Draw `n` samples from a diagonal Gaussian, push them through the flow,
    /// and compare generalized variances (determinant of the sample
    /// covariance) before and after. The standard error comes from sharding
    /// the draws and treating per-shard log ratios as i.i.d.
    pub fn variance_preservation_check(
        &self,
        store: &ParamStore,
        n: usize,
        mu0: &[f64],
        sigma0: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<VarianceCheck> {
        use rand_distr::{Distribution, StandardNormal};
        assert!(n >= 1_000, "variance check needs a real sampling budget");
        assert_eq!(mu0.len(), self.d);
        assert_eq!(sigma0.len(), self.d);
        let d = self.d;
        const SHARDS: usize = 10;
        let per_shard = n / SHARDS;
        let mut log_ratios = Vec::with_capacity(SHARDS);
        let mut all_in: Vec<f64> = Vec::new();
        let mut all_out: Vec<f64> = Vec::new();
        for _ in 0..SHARDS {
            let mut vals = Vec::with_capacity(per_shard * d);
            for _ in 0..per_shard {
                for j in 0..d {
                    let eps: f64 = StandardNormal.sample(rng);
                    vals.push(mu0[j] + sigma0[j] * eps);
                }
            }
            let tape = Tape::new();
            let z0 = Tensor::new(vec![per_shard, d], vals.clone()).map_err(FlowError::Tensor)?;
            let (zk, _) = self.forward(store, &tape, &z0)?;
            let din = covariance_det(&vals, per_shard, d);
            let dout = covariance_det(zk.values(), per_shard, d);
            log_ratios.push((dout / din).ln());
            all_in.extend_from_slice(&vals);
            all_out.extend_from_slice(zk.values());
        }
        let n_total = all_in.len() / d;
        let det_in = covariance_det(&all_in, n_total, d);
        let det_out = covariance_det(&all_out, n_total, d);
        let mean_lr = log_ratios.iter().sum::<f64>() / SHARDS as f64;
        let var_lr = log_ratios
            .iter()
            .map(|r| (r - mean_lr) * (r - mean_lr))
            .sum::<f64>()
            / (SHARDS - 1) as f64;
        Ok(VarianceCheck {
            det_in,
            det_out,
            ratio: det_out / det_in,
            log_ratio: mean_lr,
            log_ratio_se: (var_lr / SHARDS as f64).sqrt(),
        })
    }
}

/// Determinant of the sample covariance of `n` row-major `d`-vectors.
fn covariance_det(rows: &[f64], n: usize, d: usize) -> f64 {
    assert!(n > d, "need more samples than dimensions");
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += rows[i * d + j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        for a in 0..d {
            let da = rows[i * d + a] - mean[a];
            for b in a..d {
                cov[a * d + b] += da * (rows[i * d + b] - mean[b]);
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[a * d + b] /= (n - 1) as f64;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    det_lu(&mut cov, d)
}

/// In-place LU determinant with partial pivoting.
pub(crate) fn det_lu(m: &mut [f64], d: usize) -> f64 {
    let mut det = 1.0;
    for col in 0..d {
        let mut pivot = col;
        for r in col + 1..d {
            if m[r * d + col].abs() > m[pivot * d + col].abs() {
                pivot = r;
            }
        }
        if m[pivot * d + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for c in 0..d {
                m.swap(col * d + c, pivot * d + c);
            }
            det = -det;
        }
        det *= m[col * d + col];
        for r in col + 1..d {
            let f = m[r * d + col] / m[col * d + col];
            for c in col..d {
                m[r * d + c] -= f * m[col * d + c];
            }
        }
    }
    det
}

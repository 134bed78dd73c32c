//! Identity feature bank for re-id supervision: a lookup table V with one
//! unit-norm row per labeled identity, updated by momentum, and a circular
//! queue U of recent unlabeled-person features. Classification probabilities
//! come from temperature-scaled cosine similarities against both.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct IdentityBank {
    /// L x D labeled-identity table, unit-norm rows.
    v: Vec<f64>,
    /// Q x D unlabeled feature queue, zero rows before warm-up.
    u: Vec<f64>,
    head: usize,
    labeled: usize,
    queue: usize,
    dim: usize,
    pub tau: f64,
    pub gamma: f64,
}

fn normalize(row: &mut [f64]) {
    let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
}

impl IdentityBank {
    pub fn new(
        labeled: usize,
        queue: usize,
        dim: usize,
        tau: f64,
        gamma: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if labeled == 0 || dim == 0 {
            return Err(Error::invalid("identity_bank", "need at least one identity and dim >= 1"));
        }
        if !(tau > 0.0) {
            return Err(Error::invalid("identity_bank", format!("tau must be > 0, got {tau}")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(
                "identity_bank",
                format!("momentum must lie in (0,1), got {gamma}"),
            ));
        }
        let mut v = Vec::with_capacity(labeled * dim);
        for _ in 0..labeled {
            let mut row: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            normalize(&mut row);
            v.extend(row);
        }
        Ok(IdentityBank {
            v,
            u: vec![0.0; queue * dim],
            head: 0,
            labeled,
            queue,
            dim,
            tau,
            gamma,
        })
    }

    pub fn labeled(&self) -> usize {
        self.labeled
    }

    pub fn queue_len(&self) -> usize {
        self.queue
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn labeled_row(&self, t: usize) -> &[f64] {
        &self.v[t * self.dim..(t + 1) * self.dim]
    }

    pub fn queue_row(&self, i: usize) -> &[f64] {
        &self.u[i * self.dim..(i + 1) * self.dim]
    }

    /// All L+Q rows as one untracked tensor: a constant in the loss graph,
    /// so gradients reach the feature but never the bank.
    pub fn rows_tensor(&self) -> Result<Tensor> {
        let mut all = self.v.clone();
        all.extend_from_slice(&self.u);
        Tensor::new(&[self.labeled + self.queue, self.dim], all)
    }

    /// Probability of each bank entry given a unit-norm feature:
    /// softmax of similarities scaled by 1/tau.
    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::shape(
                "oim_probabilities",
                format!("feature dim {} but bank dim {}", x.len(), self.dim),
            ));
        }
        let total = self.labeled + self.queue;
        let mut logits = Vec::with_capacity(total);
        for i in 0..self.labeled {
            let dot: f64 = self.labeled_row(i).iter().zip(x).map(|(a, b)| a * b).sum();
            logits.push(dot / self.tau);
        }
        for i in 0..self.queue {
            let dot: f64 = self.queue_row(i).iter().zip(x).map(|(a, b)| a * b).sum();
            logits.push(dot / self.tau);
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }

    /// Apply one step of updates, strictly after the step's losses were
    /// computed: labeled features fold into their table row by momentum,
    /// unlabeled features overwrite the oldest queue slot.
    pub fn update(&mut self, entries: &[(Option<usize>, Vec<f64>)]) -> Result<()> {
        for (label, x) in entries {
            if x.len() != self.dim {
                return Err(Error::shape(
                    "bank_update",
                    format!("feature dim {} but bank dim {}", x.len(), self.dim),
                ));
            }
            match label {
                Some(t) => {
                    if *t >= self.labeled {
                        return Err(Error::invalid(
                            "bank_update",
                            format!("identity {t} out of range 0..{}", self.labeled),
                        ));
                    }
                    let g = self.gamma;
                    let row = &mut self.v[t * self.dim..(t + 1) * self.dim];
                    for (r, xi) in row.iter_mut().zip(x) {
                        *r = g * *r + (1.0 - g) * xi;
                    }
                    normalize(row);
                }
                None => {
                    if self.queue == 0 {
                        continue;
                    }
                    let row = &mut self.u[self.head * self.dim..(self.head + 1) * self.dim];
                    row.copy_from_slice(x);
                    self.head = (self.head + 1) % self.queue;
                }
            }
        }
        Ok(())
    }

    /// Invariant probe used by tests and the training loop's self-checks.
    pub fn check_invariants(&self) -> Result<()> {
        for t in 0..self.labeled {
            let norm: f64 = self.labeled_row(t).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::invalid(
                    "identity_bank",
                    format!("row {t} norm {norm} drifted from 1"),
                ));
            }
        }
        if self.u.len() != self.queue * self.dim {
            return Err(Error::invalid("identity_bank", "queue storage size changed"));
        }
        Ok(())
    }

    /// Serialize as flat values for checkpointing: V rows, U rows, then
    /// head, tau, gamma.
    pub fn to_values(&self) -> Vec<f64> {
        let mut out = self.v.clone();
        out.extend_from_slice(&self.u);
        out.push(self.head as f64);
        out.push(self.tau);
        out.push(self.gamma);
        out
    }

    pub fn from_values(labeled: usize, queue: usize, dim: usize, vals: &[f64]) -> Result<Self> {
        let need = (labeled + queue) * dim + 3;
        if vals.len() != need {
            return Err(Error::invalid(
                "identity_bank",
                format!("expected {need} stored values, got {}", vals.len()),
            ));
        }
        let v = vals[..labeled * dim].to_vec();
        let u = vals[labeled * dim..(labeled + queue) * dim].to_vec();
        let head = vals[need - 3] as usize;
        let bank = IdentityBank {
            v,
            u,
            head: head % queue.max(1),
            labeled,
            queue,
            dim,
            tau: vals[need - 2],
            gamma: vals[need - 1],
        };
        bank.check_invariants()?;
        Ok(bank)
    }
}

/// Focal re-id identity loss on a probability vector: -(1-p_t)^g * log p_t.
/// g = 0 recovers the plain negative log-likelihood.
pub fn oim_loss(p: &[f64], t: usize, labeled: usize, focal_gamma: f64) -> Result<f64> {
    if t >= labeled {
        return Err(Error::invalid(
            "oim_loss",
            format!("identity {t} is not a labeled identity (L = {labeled})"),
        ));
    }
    let pt = p[t].clamp(1e-12, 1.0);
    Ok(-(1.0 - pt).powf(focal_gamma) * pt.ln())
}

/// Differentiable path of the same loss for one feature row against a
/// constant bank snapshot; gradients flow into the feature only.
pub fn oim_loss_tensor(
    x: &Tensor,
    bank_rows: &Tensor,
    t: usize,
    labeled: usize,
    tau: f64,
    focal_gamma: f64,
) -> Result<Tensor> {
    if t >= labeled {
        return Err(Error::invalid(
            "oim_loss",
            format!("identity {t} is not a labeled identity (L = {labeled})"),
        ));
    }
    let d = x.numel();
    let row = x.reshape(&[1, d])?;
    let logp = row
        .matmul_nt(bank_rows)?
        .mul_scalar(1.0 / tau)?
        .log_softmax_rows()?;
    let logp_t = logp.slice_cols(t, t + 1)?; // [1,1]
    let pt = logp_t.exp()?;
    let focal = pt.neg()?.add_scalar(1.0)?.powf_const(focal_gamma)?;
    focal.mul(&logp_t.neg()?)?.sum()
}

//! Two-phase mini-batch training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_loss_grad, LayerSpec, ModelParams, Network, TrainSample};
use crate::error::{Error, Result};
use crate::exec::Exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// Epochs without the quantizer.
    pub phase1_epochs: usize,
    /// Fine-tuning epochs through the quantizer.
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    /// Samples per gradient shard; shards are summed in a fixed order.
    pub shard_size: usize,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            phase1_epochs: 60,
            phase2_epochs: 10,
            batch_size: 64,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            shard_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub phase1_losses: Vec<f64>,
    pub phase2_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.phase2_losses.last().or(self.phase1_losses.last()).copied()
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

/// Runs one training phase in place and returns the per-epoch mean loss.
/// `quant_bits = None` trains without the quantizer.
#[allow(clippy::too_many_arguments)]
pub fn train_from(
    params: &mut ModelParams,
    samples: &[TrainSample],
    quant_bits: Option<u32>,
    epochs: usize,
    lr: f64,
    schedule: &Schedule,
    phase: u8,
    exec: Exec,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    let (net, _) = Network::build(&params.spec);
    let mut opt = Adam::new(params.len(), lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed ^ (u64::from(phase) << 56));
    let batch_size = schedule.batch_size.max(1);
    let shard = schedule.shard_size.max(1);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (step, batch) in order.chunks(batch_size).enumerate() {
            let shards: Vec<&[usize]> = batch.chunks(shard).collect();
            let p = &params.values;
            let parts = exec.map(&shards, |idx| {
                let mut g = vec![0.0; p.len()];
                let l: f64 = idx.iter().map(|&i| sample_loss_grad(&net, p, &samples[i], quant_bits, &mut g)).sum();
                (l, g)
            });
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for (l, g) in &parts {
                batch_loss += l;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { phase, epoch, step });
            }
            let n = batch.len() as f64;
            grad.iter_mut().for_each(|g| *g /= n);
            opt.step(&mut params.values, &grad);
            epoch_total += batch_loss;
        }
        losses.push(epoch_total / samples.len() as f64);
    }
    Ok(losses)
}

/// Fresh initialization, phase 1 without the quantizer, then phase 2 through
/// a `bits`-bit quantizer with straight-through gradients.
pub fn train(
    samples: &[TrainSample],
    spec: &LayerSpec,
    bits: u32,
    schedule: &Schedule,
    exec: Exec,
) -> Result<(ModelParams, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    let mut params = ModelParams::init(spec, schedule.seed)?;
    let phase1_losses = train_from(
        &mut params,
        samples,
        None,
        schedule.phase1_epochs,
        schedule.lr_phase1,
        schedule,
        1,
        exec,
    )?;
    let phase2_losses = train_from(
        &mut params,
        samples,
        Some(bits),
        schedule.phase2_epochs,
        schedule.lr_phase2,
        schedule,
        2,
        exec,
    )?;
    Ok((
        params,
        TrainReport {
            phase1_losses,
            phase2_losses,
        },
    ))
}

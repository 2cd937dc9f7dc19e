//! Training on synthetic pairs with random prior subsets.

use pointmap_core::conditioning::{sample_modality_subset_with, sparsify, AuxiliaryBundle, ModalityMask};
use pointmap_core::loss::{total_loss_with_grad, LossBreakdown, LossConfig};
use pointmap_core::synth::{gen_synthetic_pair_with, PairConfig, SyntheticPair};
use pointmap_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{NetInput, ToyNet};
use crate::tape::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Probability that a view is rendered as an off-centre crop.
    pub crop_probability: f64,
    /// Probability that a depth prior is passed dense rather than sparsified.
    pub dense_depth_probability: f64,
    /// Smallest fraction of valid depth pixels kept when sparsifying.
    pub min_keep_ratio: f64,
    pub mean_reduce: bool,
    /// Linear warm-up length in steps.
    pub warmup: usize,
    /// Cosine decay to zero between the end of warm-up and the last step.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.02,
            momentum: 0.9,
            batch_size: 4,
            clip_norm: Some(1.0),
            crop_probability: 0.5,
            dense_depth_probability: 0.5,
            min_keep_ratio: 0.02,
            mean_reduce: true,
            warmup: 200,
            cosine_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            mean_reduce: self.mean_reduce,
            ..LossConfig::default()
        }
    }

    /// Learning rate of `step` in a run of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup {
            self.lr * (step + 1) as f64 / self.warmup as f64
        } else if self.cosine_decay && total > self.warmup {
            let t = (step - self.warmup) as f64 / (total - self.warmup) as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
        } else {
            self.lr
        }
    }
}

/// All five priors of a pair as ground truth provides them.
pub fn full_aux(pair: &SyntheticPair) -> AuxiliaryBundle {
    AuxiliaryBundle {
        k1: Some(pair.k1),
        k2: Some(pair.k2),
        d1: Some(pair.d1.clone()),
        d2: Some(pair.d2.clone()),
        p12: Some(pair.p12),
    }
}

/// Network input for a pair with the priors in `mask`; depth priors are
/// randomly sparsified.
pub fn training_input(
    pair: &SyntheticPair,
    mask: ModalityMask,
    cfg: &TrainConfig,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<NetInput> {
    let mut aux = full_aux(pair).restrict(mask);
    for d in [&mut aux.d1, &mut aux.d2].into_iter().flatten() {
        if !rng.gen_bool(cfg.dense_depth_probability.clamp(0.0, 1.0)) {
            let lo = cfg.min_keep_ratio.clamp(1e-6, 1.0).ln();
            let keep = rng.gen_range(lo..=0.0).exp();
            *d = sparsify(d, keep, rng.gen())?;
        }
    }
    NetInput::new(&pair.rgb1, &pair.rgb2, &aux, patch)
}

/// Loss of one pair and the gradient of every parameter used.
pub fn loss_and_grads(
    net: &ToyNet,
    input: &NetInput,
    pair: &SyntheticPair,
    loss: &LossConfig,
) -> Result<(LossBreakdown, Vec<(usize, Tensor)>)> {
    let fwd = net.forward(input)?;
    let (breakdown, g) = total_loss_with_grad(&fwd.prediction, [&pair.x11, &pair.x21, &pair.x22], loss)?;
    Ok((breakdown, fwd.param_grads(&g)))
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Batch-mean loss.
    pub loss: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let mut m = items[0];
    m.l11 = items.iter().map(|b| b.l11).sum::<f64>() / n;
    m.l21 = items.iter().map(|b| b.l21).sum::<f64>() / n;
    m.l22 = items.iter().map(|b| b.l22).sum::<f64>() / n;
    m.total = m.l11 + m.l21 + m.beta * m.l22;
    m
}

/// One optimizer step on `batch`. Each pair gets its own prior subset and
/// sparsification drawn from `seed`. Returns the batch-mean loss.
pub fn train_step(
    net: &mut ToyNet,
    batch: &[SyntheticPair],
    lr: f64,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(batch.len());
    for pair in batch {
        let mask = sample_modality_subset_with(&mut rng);
        items.push((training_input(pair, mask, cfg, net.cfg.patch_size, &mut rng)?, pair));
    }
    step_on_inputs(net, &items, lr, cfg)
}

/// One optimizer step on prepared inputs.
pub fn step_on_inputs(
    net: &mut ToyNet,
    items: &[(NetInput, &SyntheticPair)],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if items.is_empty() {
        return Err(Error::invalid("training batch is empty"));
    }
    let loss_cfg = cfg.loss();
    net.params.zero_grads();
    let mut losses = Vec::with_capacity(items.len());
    let inv = 1.0 / items.len() as f64;
    for (input, pair) in items {
        let (b, grads) = loss_and_grads(net, input, pair, &loss_cfg)?;
        if !b.total.is_finite() {
            return Err(Error::Divergence(format!(
                "loss {} with priors {}",
                b.total,
                input.mask().label()
            )));
        }
        for (id, mut g) in grads {
            g.data.iter_mut().for_each(|x| *x *= inv);
            net.params.accumulate_grad(id, &g);
        }
        losses.push(b);
    }
    let norm = net.params.grad_norm();
    if !norm.is_finite() {
        return Err(Error::Divergence(format!("gradient norm is {norm}")));
    }
    if let Some(max) = cfg.clip_norm {
        if norm > max {
            net.params.scale_grads(max / norm);
        }
    }
    net.params.sgd_momentum(lr, cfg.momentum);
    Ok(StepStats {
        loss: mean_breakdown(&losses),
        grad_norm: norm,
    })
}

/// Seed of the `k`-th training pair of a run.
pub fn training_pair_seed(run_seed: u64, k: u64) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (k.wrapping_add(1) << 1)
}

/// Generator settings for training pairs of a network.
pub fn pair_config(net: &ToyNet, cfg: &TrainConfig) -> PairConfig {
    PairConfig {
        width: net.cfg.width,
        height: net.cfg.height,
        crop_probability: cfg.crop_probability,
        ..PairConfig::default()
    }
}

/// Runs `steps` steps on freshly generated pairs, calling `on_step` after each.
pub fn train(
    net: &mut ToyNet,
    steps: usize,
    cfg: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, &StepStats),
) -> Result<()> {
    let pcfg = pair_config(net, cfg);
    let mut k = 0u64;
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            batch.push(gen_synthetic_pair_with(training_pair_seed(seed, k), &pcfg)?);
            k += 1;
        }
        let step_seed = seed ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
        let b = train_step(net, &batch, cfg.lr_at(step, steps), step_seed, cfg)?;
        on_step(step, &b);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0, 110), 0.1);
        assert_eq!(cfg.lr_at(9, 110), 1.0);
        assert_eq!(cfg.lr_at(10, 110), 1.0);
        assert!((cfg.lr_at(60, 110) - 0.5).abs() < 1e-12);
        assert!(cfg.lr_at(109, 110) < 1e-3);
        let flat = TrainConfig {
            cosine_decay: false,
            ..cfg
        };
        assert_eq!(flat.lr_at(100, 110), 1.0);
    }
}

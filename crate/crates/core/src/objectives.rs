//! Total training objective, warmup schedules, and the Stage-2 loop.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::Warmup;
use crate::error::{CoreError, Result};
use crate::model::{ClipTensors, Stage2Model};
use crate::nn::graph::{Grads, Graph, NodeId};
use crate::nn::params::Adam;
use crate::rvq::TokenGrid;

/// Scalar loss components for one step or one epoch.
///
/// Invariant: `total` is always recomputed as
/// `l_lat + l_cls + l_sem + beta_vib * l_kl + beta_phys * l_acc`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_lat: f64,
    pub l_cls: f64,
    pub l_sem: f64,
    pub l_kl: f64,
    pub l_acc: f64,
    pub beta_vib: f64,
    pub beta_phys: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(
        l_lat: f64,
        l_cls: f64,
        l_sem: f64,
        l_kl: f64,
        l_acc: f64,
        beta_vib: f64,
        beta_phys: f64,
    ) -> Self {
        LossBreakdown {
            l_lat,
            l_cls,
            l_sem,
            l_kl,
            l_acc,
            beta_vib,
            beta_phys,
            total: l_lat + l_cls + l_sem + beta_vib * l_kl + beta_phys * l_acc,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("l_lat", self.l_lat),
            ("l_cls", self.l_cls),
            ("l_sem", self.l_sem),
            ("l_kl", self.l_kl),
            ("l_acc", self.l_acc),
        ] {
            if !v.is_finite() {
                return Err(CoreError::NonFinite(match name {
                    "l_lat" => "l_lat",
                    "l_cls" => "l_cls",
                    "l_sem" => "l_sem",
                    "l_kl" => "l_kl",
                    _ => "l_acc",
                }));
            }
        }
        Ok(())
    }
}

/// Linear warmup: zero before `start`, ramp to `target` over `[start, end]`,
/// constant `target` afterwards.
pub fn warmup(epoch: usize, w: Warmup, target: f64) -> f64 {
    if epoch < w.start {
        0.0
    } else if epoch >= w.end {
        target
    } else {
        target * (epoch - w.start) as f64 / (w.end - w.start) as f64
    }
}

/// Step decay: multiply the base rate by `gamma` at 60% and 85% of the
/// total epoch budget.
pub fn lr_at_epoch(base_lr: f64, gamma: f64, epoch: usize, total_epochs: usize) -> f64 {
    let m1 = total_epochs * 60 / 100;
    let m2 = total_epochs * 85 / 100;
    let mut lr = base_lr;
    if epoch >= m1 {
        lr *= gamma;
    }
    if epoch >= m2 {
        lr *= gamma;
    }
    lr
}

/// Sum over regions of the MSE between predicted continuous latents and the
/// Stage-1 VQ targets.
pub fn latent_loss(g: &mut Graph, pairs: &[(NodeId, NodeId)]) -> NodeId {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(pred, target) in pairs {
        terms.push(g.mse(pred, target));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    acc
}

/// Mean cross-entropy of per-level logits against a token grid.
pub fn cls_loss(
    g: &mut Graph,
    level_logits: &[NodeId],
    grid: &TokenGrid,
    codebook_size: usize,
) -> Result<NodeId> {
    grid.validate(codebook_size)?;
    if level_logits.len() != grid.levels() {
        return Err(CoreError::ShapeMismatch {
            context: "cls_loss",
            expected: format!("{} levels", grid.levels()),
            got: format!("{}", level_logits.len()),
        });
    }
    let mut terms = Vec::new();
    for (level, &logits) in level_logits.iter().enumerate() {
        let targets: Vec<usize> = grid.tokens.column(level).to_vec();
        terms.push(g.cross_entropy(logits, &targets));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Training options beyond the model config.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub seed: u64,
    /// Force `beta_phys = 0` and skip building the inertial path entirely.
    pub disable_ibp: bool,
}

/// One optimizer step over a batch of clips. Returns the mean loss
/// breakdown; errors on non-finite components, naming the component.
pub fn train_step(
    model: &mut Stage2Model,
    adam: &mut Adam,
    clips: &[&ClipTensors],
    epoch: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
    opts: &TrainOptions,
) -> Result<LossBreakdown> {
    let beta_vib = warmup(epoch, model.cfg.kl_warmup, model.cfg.beta_target);
    let beta_phys = if opts.disable_ibp {
        0.0
    } else {
        warmup(epoch, model.cfg.phys_warmup, model.cfg.beta_phys_target)
    };
    let with_ibp = beta_phys > 0.0;

    let mut grads = Grads::new(model.store.len());
    let (mut s_lat, mut s_cls, mut s_sem, mut s_kl, mut s_acc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for clip in clips {
        let eps = Array2::from_shape_fn((clip.total_len, model.cfg.bottleneck_dim), |_| {
            StandardNormal.sample(rng)
        });
        let mut g = Graph::new(&model.store);
        let losses = model.forward_losses(&mut g, clip, &eps, with_ibp)?;
        let kl_scaled = g.scale(losses.l_kl, beta_vib);
        let mut total = g.add(losses.l_lat, losses.l_cls);
        total = g.add(total, losses.l_sem);
        total = g.add(total, kl_scaled);
        let acc_val = if let Some(l_acc) = losses.l_acc {
            let acc_scaled = g.scale(l_acc, beta_phys);
            total = g.add(total, acc_scaled);
            g.scalar(l_acc)
        } else {
            0.0
        };
        let step = LossBreakdown::compose(
            g.scalar(losses.l_lat),
            g.scalar(losses.l_cls),
            g.scalar(losses.l_sem),
            g.scalar(losses.l_kl),
            acc_val,
            beta_vib,
            beta_phys,
        );
        step.check_finite()?;
        s_lat += step.l_lat;
        s_cls += step.l_cls;
        s_sem += step.l_sem;
        s_kl += step.l_kl;
        s_acc += step.l_acc;
        grads.merge(&g.backward(total));
    }
    let n = clips.len() as f64;
    grads.scale(1.0 / n);
    adam.step(&mut model.store, &grads, lr);
    Ok(LossBreakdown::compose(
        s_lat / n,
        s_cls / n,
        s_sem / n,
        s_kl / n,
        s_acc / n,
        beta_vib,
        beta_phys,
    ))
}

/// Full Stage-2 training loop: seeded shuffling, warmup schedules, step LR
/// decay. Calls `on_epoch` with the mean breakdown after every epoch and
/// returns the per-epoch history.
pub fn train(
    model: &mut Stage2Model,
    clips: &[ClipTensors],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(usize, &LossBreakdown),
) -> Result<Vec<LossBreakdown>> {
    if clips.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let mut adam = Adam::new(model.store.len());
    let mut history = Vec::with_capacity(model.cfg.epochs);
    for epoch in 0..model.cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..clips.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let lr = lr_at_epoch(model.cfg.lr, model.cfg.lr_decay, epoch, model.cfg.epochs);
        let mut acc: Option<LossBreakdown> = None;
        let mut steps = 0usize;
        for batch in order.chunks(model.cfg.batch) {
            let refs: Vec<&ClipTensors> = batch.iter().map(|&i| &clips[i]).collect();
            let step = train_step(model, &mut adam, &refs, epoch, lr, &mut rng, opts)?;
            steps += 1;
            acc = Some(match acc {
                None => step,
                Some(prev) => LossBreakdown {
                    l_lat: prev.l_lat + step.l_lat,
                    l_cls: prev.l_cls + step.l_cls,
                    l_sem: prev.l_sem + step.l_sem,
                    l_kl: prev.l_kl + step.l_kl,
                    l_acc: prev.l_acc + step.l_acc,
                    ..step
                },
            });
        }
        let sums = acc.unwrap();
        let n = steps as f64;
        let epoch_breakdown = LossBreakdown::compose(
            sums.l_lat / n,
            sums.l_cls / n,
            sums.l_sem / n,
            sums.l_kl / n,
            sums.l_acc / n,
            sums.beta_vib,
            sums.beta_phys,
        );
        on_epoch(epoch, &epoch_breakdown);
        history.push(epoch_breakdown);
    }
    Ok(history)
}

//! Mini-batch training with AdamW and a step learning-rate drop.
//!
//! Scenes are visited in a seeded per-epoch order. Each scene's gradient is
//! computed on its own tape and the batch gradient is summed in batch order,
//! so results do not depend on scheduling. The class memory is read-only
//! within a batch and absorbs the batch's confident tokens afterwards.

use anyhow::Context;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use sdt_core::eval::filter_tokens;
use sdt_core::objective::{is_positive, Normalization};
use sdt_core::optim::{optimizer_step, scheduled_lr, AdamWConfig, AdamWState};
use sdt_core::params::GradStore;
use sdt_core::scene::{Scene, Token};
use sdt_core::token_post::ClassMemory;
use sdt_core::SdtModel;

use crate::config::RunConfig;
use crate::seed;

const STREAM_INIT: u64 = 1;
const STREAM_ORDER: u64 = 2;
const STREAM_SCENE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss.
    pub loss: f64,
    /// Mean L2 norm of the batch gradient.
    pub grad_norm: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub struct Trained {
    pub model: SdtModel,
    pub memory: ClassMemory,
    pub log: Vec<EpochLog>,
}

/// Freshly initialized model and empty memory for `cfg`.
pub fn init(cfg: &RunConfig) -> anyhow::Result<(SdtModel, ClassMemory)> {
    cfg.validate()?;
    let mut model = SdtModel::new(cfg.model_config(), seed::derive(cfg.seed, &[STREAM_INIT]))?;
    model.apply_loss_config(&cfg.loss_config());
    Ok((model, ClassMemory::new(&cfg.icd)))
}

pub fn train(cfg: &RunConfig, scenes: &[Scene]) -> anyhow::Result<Trained> {
    train_with(cfg, scenes, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    cfg: &RunConfig,
    scenes: &[Scene],
    mut on_epoch: impl FnMut(&EpochLog),
) -> anyhow::Result<Trained> {
    let (mut model, mut memory) = init(cfg)?;
    for s in scenes {
        s.validate(cfg.d, cfg.num_verbs)
            .with_context(|| format!("training scene {}", s.id))?;
    }
    let loss_cfg = cfg.loss_config();
    let adam = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamWState::new(&model.params);
    let tokens: Vec<Vec<Token>> = scenes
        .iter()
        .map(|s| filter_tokens(&s.tokens, &cfg.filter))
        .collect();
    let mut positives = Vec::with_capacity(scenes.len());
    for (s, t) in scenes.iter().zip(&tokens) {
        let (_, y) = model.targets(t, &s.ground_truth)?;
        positives.push((0..y.rows()).filter(|&r| is_positive(y.row(r))).count());
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = scheduled_lr(cfg.lr, epoch, cfg.lr_drop_epoch, cfg.lr_drop_factor);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[STREAM_ORDER, epoch as u64]));
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let norm = match loss_cfg.normalization {
                Normalization::PositivePairs => batch.iter().map(|&i| positives[i]).sum::<usize>().max(1) as f64,
                Normalization::None => 1.0,
            };
            let mut grads = GradStore::zeros_like(&model.params);
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &scenes[i];
                let mut rng = seed::rng(cfg.seed, &[STREAM_SCENE, epoch as u64, i as u64]);
                let g = model
                    .scene_grad(
                        &tokens[i],
                        &s.global_feature,
                        &s.ground_truth,
                        &memory,
                        &mut rng,
                        &loss_cfg,
                        1.0 / norm,
                    )
                    .with_context(|| format!("scene {}", s.id))?;
                grads.add_scaled(&g.grads, 1.0)?;
                batch_loss += g.loss;
            }
            norm_sum += grads.norm();
            loss_sum += batch_loss;
            batches += 1;
            optimizer_step(&mut model.params, &grads, &mut opt, &adam, lr)
                .with_context(|| format!("epoch {epoch}"))?;
            if cfg.toggles.icd {
                for &i in batch {
                    for t in &tokens[i] {
                        memory.update(t);
                    }
                }
            }
        }
        let (alpha, beta) = model.da_params();
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss_sum / batches.max(1) as f64,
            grad_norm: norm_sum / batches.max(1) as f64,
            alpha,
            beta,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(Trained { model, memory, log })
}

//! Inference over a scene list and the evaluation bundle written by `eval`.

use std::collections::BTreeMap;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use sdt_core::eval::{
    distance_stratified_map, distant_map, evaluate, filter_tokens, scene_detections, training_counts,
    Detection, DistanceBinMap, EvalReport, EvalSetting, InteractionClass,
};
use sdt_core::fnda::AttentionRecord;
use sdt_core::scene::{FeasibilityTable, GtTriplet, Scene, Token};
use sdt_core::token_post::ClassMemory;
use sdt_core::SdtModel;

use crate::config::RunConfig;
use crate::seed::{rng, scene_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub default: EvalReport,
    pub known_object: EvalReport,
    /// Pairs farther apart than the distant threshold.
    pub distant: EvalReport,
    pub distant_threshold: f64,
    pub bins: Vec<DistanceBinMap>,
}

impl EvalSummary {
    pub fn distant_map(&self) -> f64 {
        self.distant.map.unwrap_or(0.0)
    }
}

fn scene_rng(s: &Scene) -> rand_chacha::ChaCha8Rng {
    rng(scene_seed(&s.id), &[])
}

/// Detections of every scene, tagged with the scene's position in `scenes`.
pub fn detect(
    model: &SdtModel,
    memory: &ClassMemory,
    cfg: &RunConfig,
    scenes: &[Scene],
    feasibility: &FeasibilityTable,
) -> anyhow::Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (k, s) in scenes.iter().enumerate() {
        let tokens = filter_tokens(&s.tokens, &cfg.filter);
        let preds = model
            .predict(&tokens, &s.global_feature, memory, &mut scene_rng(s))
            .with_context(|| format!("scene {}", s.id))?;
        out.extend(scene_detections(k, &tokens, &preds, feasibility, cfg.lambda_infer));
    }
    Ok(out)
}

pub fn summarize(
    detections: &[Detection],
    test: &[Scene],
    counts: &BTreeMap<InteractionClass, usize>,
    cfg: &RunConfig,
) -> EvalSummary {
    let gts: Vec<Vec<GtTriplet>> = test.iter().map(|s| s.ground_truth.clone()).collect();
    EvalSummary {
        default: evaluate(detections, &gts, counts, EvalSetting::Default),
        known_object: evaluate(detections, &gts, counts, EvalSetting::KnownObject),
        distant: distant_map(detections, &gts, counts, EvalSetting::Default, cfg.distant_threshold),
        distant_threshold: cfg.distant_threshold,
        bins: distance_stratified_map(detections, &gts, counts, EvalSetting::Default, cfg.bin_width),
    }
}

pub fn evaluate_model(
    model: &SdtModel,
    memory: &ClassMemory,
    cfg: &RunConfig,
    train: &[Scene],
    test: &[Scene],
    feasibility: &FeasibilityTable,
) -> anyhow::Result<EvalSummary> {
    let dets = detect(model, memory, cfg, test, feasibility)?;
    Ok(summarize(&dets, test, &training_counts(train), cfg))
}

/// Token encoder attention of every ordered pair in a scene, over the
/// filtered tokens.
pub fn scene_attention(
    model: &SdtModel,
    memory: &ClassMemory,
    cfg: &RunConfig,
    scene: &Scene,
) -> anyhow::Result<(Vec<Token>, Vec<AttentionRecord>)> {
    let tokens = filter_tokens(&scene.tokens, &cfg.filter);
    let recs = model
        .attention(&tokens, &scene.global_feature, memory, &mut scene_rng(scene))
        .with_context(|| format!("scene {}", scene.id))?;
    Ok((tokens, recs))
}

/// True when tokens `i` (human) and `j` match an annotated interaction.
pub fn is_interactive(tokens: &[Token], gts: &[GtTriplet], i: usize, j: usize) -> bool {
    use sdt_core::geometry::iou;
    let (h, o) = (&tokens[i], &tokens[j]);
    h.is_human
        && gts.iter().any(|g| {
            g.object_class == o.class_id
                && iou(&h.bbox, &g.human_box) >= 0.5
                && iou(&o.bbox, &g.object_box) >= 0.5
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};
    use crate::train::init;

    #[test]
    fn untrained_model_evaluates() {
        let mut cfg = RunConfig::desk();
        cfg.d = 8;
        cfg.heads = 2;
        cfg.hidden = 10;
        cfg.synth = SynthConfig {
            num_scenes: 20,
            d: 8,
            ..Default::default()
        };
        let data = generate_dataset(&cfg.synth).unwrap();
        let (model, mem) = init(&cfg).unwrap();
        let a = evaluate_model(&model, &mem, &cfg, &data.train, &data.test, &data.feasibility).unwrap();
        let b = evaluate_model(&model, &mem, &cfg, &data.train, &data.test, &data.feasibility).unwrap();
        assert_eq!(a, b);
        assert!(a.default.map.is_some());
        assert_eq!(a.bins.len(), 29);
        let m = a.default.map.unwrap();
        assert!((0.0..=1.0).contains(&m));
    }
}

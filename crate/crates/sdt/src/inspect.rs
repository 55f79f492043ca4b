//! Mask dumps and attention-versus-distance statistics.

use sdt_core::eval::{attention_distance_stats, filter_tokens, AttentionBin, FilterConfig};
use sdt_core::fnda::{build_masks, AttentionRecord};
use sdt_core::geometry::pairwise_distances;
use sdt_core::scene::Scene;
use sdt_core::token_post::ClassMemory;
use sdt_core::SdtModel;

use crate::config::RunConfig;
use crate::pipeline::{is_interactive, scene_attention};
use crate::report::fmt_f64;

pub const MASK_HEADER: [&str; 6] = ["scene_id", "i", "j", "D_ij", "far", "near"];

/// Mask rows of a scene over its filtered tokens.
pub fn mask_rows(scene: &Scene, filter: &FilterConfig) -> anyhow::Result<Vec<[String; 6]>> {
    let tokens = filter_tokens(&scene.tokens, filter);
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let boxes: Vec<_> = tokens.iter().map(|t| t.bbox).collect();
    let d = pairwise_distances(&boxes)?;
    let m = build_masks(&d);
    let n = tokens.len();
    let mut rows = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            rows.push([
                scene.id.clone(),
                i.to_string(),
                j.to_string(),
                fmt_f64(d.get(i, j)),
                (m.far[(i, j)] as u8).to_string(),
                (m.near[(i, j)] as u8).to_string(),
            ]);
        }
    }
    Ok(rows)
}

/// Which pairs feed the attention statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairSet {
    /// Human-object pairs matching an annotated interaction.
    Interactive,
    /// Every ordered pair of distinct tokens.
    All,
}

/// Attention records of the selected pairs over all `scenes`.
pub fn collect_attention(
    model: &SdtModel,
    memory: &ClassMemory,
    cfg: &RunConfig,
    scenes: &[Scene],
    set: PairSet,
) -> anyhow::Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for s in scenes {
        let (tokens, recs) = scene_attention(model, memory, cfg, s)?;
        out.extend(recs.into_iter().filter(|r| {
            r.i != r.j
                && match set {
                    PairSet::All => true,
                    PairSet::Interactive => is_interactive(&tokens, &s.ground_truth, r.i, r.j),
                }
        }));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStats {
    pub kind: &'static str,
    pub bins: Vec<AttentionBin>,
}

/// Far, near and combined statistics of an FNDA model.
pub fn fnda_stats(recs: &[AttentionRecord], width: f64) -> Vec<AttentionStats> {
    vec![
        AttentionStats {
            kind: "far_block",
            bins: attention_distance_stats(recs.iter().filter_map(|r| r.far.map(|w| (r.distance, w))), width),
        },
        AttentionStats {
            kind: "near_block",
            bins: attention_distance_stats(recs.iter().filter_map(|r| r.near.map(|w| (r.distance, w))), width),
        },
        AttentionStats {
            kind: "combined",
            bins: attention_distance_stats(recs.iter().map(|r| (r.distance, r.weight)), width),
        },
    ]
}

pub fn mhsa_stats(recs: &[AttentionRecord], width: f64) -> AttentionStats {
    AttentionStats {
        kind: "baseline_mhsa",
        bins: attention_distance_stats(recs.iter().map(|r| (r.distance, r.weight)), width),
    }
}

/// Bins above `threshold` populated in both tables, and how many of them
/// have `a`'s mean at least `b`'s.
pub fn compare_bins(a: &[AttentionBin], b: &[AttentionBin], threshold: f64) -> (usize, usize) {
    let mut populated = 0;
    let mut wins = 0;
    for x in a.iter().filter(|x| x.bin_low >= threshold - 1e-12) {
        if let Some(y) = b.iter().find(|y| (y.bin_low - x.bin_low).abs() < 1e-12) {
            populated += 1;
            if x.mean >= y.mean {
                wins += 1;
            }
        }
    }
    (populated, wins)
}

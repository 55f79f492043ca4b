//! Component ablations: every variant is trained from the same seed on the
//! same data and evaluated on the same test split.

use std::path::Path;

use anyhow::bail;
use serde::{Deserialize, Serialize};

use sdt_core::fnda::AttentionKind;

use crate::config::{RunConfig, RunToggles};
use crate::pipeline::{evaluate_model, EvalSummary};
use crate::report::{fmt_opt, headline, write_csv};
use crate::synth::Dataset;
use crate::train::train;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub table: String,
    pub name: String,
    pub toggles: RunToggles,
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Encoder and loss grid: every combination of token encoder, interaction
/// encoder and distance-aware loss.
pub fn encoder_grid(base: RunToggles) -> Vec<Variant> {
    let mut out = Vec::new();
    for t in [false, true] {
        for i in [false, true] {
            for da in [false, true] {
                out.push(Variant {
                    table: "components".into(),
                    name: format!("tenc={} ienc={} da={}", on_off(t), on_off(i), on_off(da)),
                    toggles: RunToggles {
                        t_encoder: t,
                        i_encoder: i,
                        da_loss: da,
                        ..base
                    },
                });
            }
        }
    }
    out
}

/// Attention and token post-processing grid.
pub fn attention_grid(base: RunToggles) -> Vec<Variant> {
    let mut out = Vec::new();
    for (kind, label) in [(AttentionKind::Mhsa, "mhsa"), (AttentionKind::Fnda, "fnda")] {
        for (sf, icd, suffix) in [(false, false, ""), (true, false, "+sf"), (true, true, "+sf+icd")] {
            out.push(Variant {
                table: "attention".into(),
                name: format!("{label}{suffix}"),
                toggles: RunToggles {
                    attention: kind,
                    spatial_fusion: sf,
                    icd,
                    t_encoder: true,
                    ..base
                },
            });
        }
    }
    out
}

/// Variants of the named tables (`components`, `attention`).
pub fn variants(tables: &[String], base: RunToggles) -> anyhow::Result<Vec<Variant>> {
    let mut out = Vec::new();
    for t in tables {
        match t.as_str() {
            "components" => out.extend(encoder_grid(base)),
            "attention" => out.extend(attention_grid(base)),
            other => bail!("unknown ablation table `{other}` (expected components or attention)"),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub trainable_parameters: usize,
    pub summary: EvalSummary,
}

pub fn run_variant(base: &RunConfig, data: &Dataset, v: &Variant) -> anyhow::Result<AblationRow> {
    let mut cfg = base.clone();
    cfg.toggles = v.toggles;
    let t = train(&cfg, &data.train)?;
    let summary = evaluate_model(&t.model, &t.memory, &cfg, &data.train, &data.test, &data.feasibility)?;
    Ok(AblationRow {
        variant: v.clone(),
        trainable_parameters: t.model.trainable_parameters(),
        summary,
    })
}

pub fn run_ablation(
    base: &RunConfig,
    data: &Dataset,
    variants: &[Variant],
    mut on_row: impl FnMut(&AblationRow),
) -> anyhow::Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let row = run_variant(base, data, v)?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> anyhow::Result<()> {
    let mut header = vec![
        "table",
        "variant",
        "attention",
        "t_encoder",
        "i_encoder",
        "da_loss",
        "spatial_fusion",
        "icd",
        "trainable_parameters",
    ];
    let metric_names: Vec<&str> = rows
        .first()
        .map(|r| headline(&r.summary).into_iter().map(|(k, _)| k).collect())
        .unwrap_or_default();
    header.extend(&metric_names);
    write_csv(
        path,
        &header,
        rows.iter().map(|r| {
            let t = r.variant.toggles;
            let mut rec = vec![
                r.variant.table.clone(),
                r.variant.name.clone(),
                match t.attention {
                    AttentionKind::Fnda => "fnda".to_string(),
                    AttentionKind::Mhsa => "mhsa".to_string(),
                },
                t.t_encoder.to_string(),
                t.i_encoder.to_string(),
                t.da_loss.to_string(),
                t.spatial_fusion.to_string(),
                t.icd.to_string(),
                r.trainable_parameters.to_string(),
            ];
            rec.extend(headline(&r.summary).into_iter().map(|(_, v)| fmt_opt(v)));
            rec
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn grids() {
        let base = RunToggles::default();
        let g = encoder_grid(base);
        assert_eq!(g.len(), 8);
        let combos: BTreeSet<_> = g
            .iter()
            .map(|v| (v.toggles.t_encoder, v.toggles.i_encoder, v.toggles.da_loss))
            .collect();
        assert_eq!(combos.len(), 8);
        let a = attention_grid(base);
        assert_eq!(a.len(), 6);
        assert_eq!(a[0].name, "mhsa");
        assert!(!a[0].toggles.spatial_fusion && !a[0].toggles.icd);
        assert!(a[5].toggles.spatial_fusion && a[5].toggles.icd);
        assert_eq!(a[5].toggles.attention, AttentionKind::Fnda);
        assert!(variants(&["nope".into()], base).is_err());
        assert_eq!(variants(&["components".into(), "attention".into()], base).unwrap().len(), 14);
    }
}

//! CSV tables. Floats are written in shortest round-trip form so that equal
//! values always give equal bytes.

use std::path::Path;

use anyhow::Context;

use sdt_core::eval::{AttentionBin, DistanceBinMap, EvalReport, EvalSetting};

use crate::pipeline::EvalSummary;

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn setting_name(s: EvalSetting) -> &'static str {
    match s {
        EvalSetting::Default => "default",
        EvalSetting::KnownObject => "known_object",
    }
}

/// Writes `header` and `rows` to `path`.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn class_rows(r: &EvalReport, subset: &str) -> Vec<Vec<String>> {
    r.classes
        .iter()
        .map(|c| {
            vec![
                subset.to_string(),
                c.object_class.to_string(),
                c.verb.to_string(),
                fmt_f64(c.ap),
                c.num_gt.to_string(),
                c.rare.to_string(),
            ]
        })
        .collect()
}

/// One row per interaction class and subset.
pub fn write_class_table(path: &Path, s: &EvalSummary) -> anyhow::Result<()> {
    let mut rows = class_rows(&s.default, "default");
    rows.extend(class_rows(&s.known_object, "known_object"));
    rows.extend(class_rows(&s.distant, "distant"));
    write_csv(path, &["subset", "object_class", "verb", "ap", "num_gt", "rare"], rows)
}

pub fn write_bin_table(path: &Path, bins: &[DistanceBinMap]) -> anyhow::Result<()> {
    write_csv(
        path,
        &["bin_low", "bin_high", "num_gt", "map"],
        bins.iter().map(|b| {
            [fmt_f64(b.bin_low), fmt_f64(b.bin_high), b.num_gt.to_string(), fmt_opt(b.map)]
        }),
    )
}

/// Headline numbers of a summary as `(name, value)` pairs.
pub fn headline(s: &EvalSummary) -> Vec<(&'static str, Option<f64>)> {
    vec![
        ("map", s.default.map),
        ("map_rare", s.default.map_rare),
        ("map_non_rare", s.default.map_non_rare),
        ("ko_map", s.known_object.map),
        ("ko_map_rare", s.known_object.map_rare),
        ("ko_map_non_rare", s.known_object.map_non_rare),
        ("distant_map", s.distant.map),
    ]
}

pub fn write_summary_table(path: &Path, s: &EvalSummary) -> anyhow::Result<()> {
    write_csv(
        path,
        &["metric", "value"],
        headline(s).into_iter().map(|(k, v)| [k.to_string(), fmt_opt(v)]),
    )
}

/// Evaluation outputs under `dir`: `eval.json`, `summary.csv`,
/// `classes.csv` and `distance_bins.csv`.
pub fn write_eval(dir: &Path, s: &EvalSummary) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    crate::scene_io::write_json(s, dir.join("eval.json"))?;
    write_summary_table(&dir.join("summary.csv"), s)?;
    write_class_table(&dir.join("classes.csv"), s)?;
    write_bin_table(&dir.join("distance_bins.csv"), &s.bins)
}

pub const ATTN_HEADER: [&str; 5] = ["bin_low", "mean", "variance", "count", "attention_kind"];

pub fn attn_rows(kind: &str, bins: &[AttentionBin]) -> Vec<[String; 5]> {
    bins.iter()
        .map(|b| {
            [
                fmt_f64(b.bin_low),
                fmt_f64(b.mean),
                fmt_f64(b.variance),
                b.count.to_string(),
                kind.to_string(),
            ]
        })
        .collect()
}

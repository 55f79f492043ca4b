//! Scene data model: detected tokens, ground-truth triplets, verb feasibility.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_distance, BBox};

/// Class id of the person category.
pub const PERSON_CLASS: u32 = 0;

/// One detected instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub feature: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u32,
    pub is_human: bool,
}

/// A `<human, verb, object>` annotation; one triplet may carry several verbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtTriplet {
    #[serde(rename = "hbox")]
    pub human_box: BBox,
    #[serde(rename = "obox")]
    pub object_box: BBox,
    pub object_class: u32,
    #[serde(rename = "verbs")]
    pub verb_ids: BTreeSet<usize>,
}

impl GtTriplet {
    pub fn distance(&self) -> f64 {
        center_distance(&self.human_box, &self.object_box)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub global_feature: Vec<f64>,
    pub tokens: Vec<Token>,
    #[serde(rename = "gt")]
    pub ground_truth: Vec<GtTriplet>,
}

impl Scene {
    pub fn boxes(&self) -> Vec<BBox> {
        self.tokens.iter().map(|t| t.bbox).collect()
    }

    /// Checks feature widths, score range, the human flag and verb ids.
    pub fn validate(&self, d: usize, num_verbs: usize) -> Result<()> {
        if self.global_feature.len() != d {
            return Err(Error::Config(format!(
                "scene {}: global feature has width {}, expected {d}",
                self.id,
                self.global_feature.len()
            )));
        }
        for (k, t) in self.tokens.iter().enumerate() {
            if t.feature.len() != d {
                return Err(Error::Config(format!(
                    "scene {} token {k}: feature width {}, expected {d}",
                    self.id,
                    t.feature.len()
                )));
            }
            if !(0.0..=1.0).contains(&t.score) {
                return Err(Error::Config(format!(
                    "scene {} token {k}: score {} outside [0, 1]",
                    self.id, t.score
                )));
            }
            if t.is_human != (t.class_id == PERSON_CLASS) {
                return Err(Error::Config(format!(
                    "scene {} token {k}: is_human disagrees with class {}",
                    self.id, t.class_id
                )));
            }
            if t.feature.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("token feature"));
            }
        }
        for gt in &self.ground_truth {
            if gt.verb_ids.is_empty() || gt.verb_ids.iter().any(|&v| v >= num_verbs) {
                return Err(Error::Config(format!(
                    "scene {}: ground-truth verbs {:?} invalid for {num_verbs} verbs",
                    self.id, gt.verb_ids
                )));
            }
        }
        Ok(())
    }
}

/// Object class id to the verbs that can be performed on it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeasibilityTable(BTreeMap<u32, BTreeSet<usize>>);

impl FeasibilityTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every verb feasible for every class in `0..num_classes`.
    pub fn all_feasible(num_classes: u32, num_verbs: usize) -> Self {
        Self(
            (0..num_classes)
                .map(|c| (c, (0..num_verbs).collect()))
                .collect(),
        )
    }

    pub fn insert(&mut self, class: u32, verbs: impl IntoIterator<Item = usize>) {
        self.0.entry(class).or_default().extend(verbs);
    }

    pub fn is_feasible(&self, class: u32, verb: usize) -> bool {
        self.0.get(&class).is_some_and(|s| s.contains(&verb))
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.keys().copied()
    }

    pub fn validate(&self, num_verbs: usize) -> Result<()> {
        for (c, verbs) in &self.0 {
            if let Some(v) = verbs.iter().find(|&&v| v >= num_verbs) {
                return Err(Error::Config(format!(
                    "feasibility: class {c} lists verb {v} >= {num_verbs}"
                )));
            }
        }
        Ok(())
    }
}

pub fn feasible_verbs(table: &FeasibilityTable, object_class: u32) -> Result<&BTreeSet<usize>> {
    table.0.get(&object_class).ok_or(Error::UnknownClass(object_class))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feasibility_lookup() {
        let mut t = FeasibilityTable::new();
        t.insert(3, [1, 4]);
        assert_eq!(
            feasible_verbs(&t, 3).unwrap().iter().copied().collect::<Vec<_>>(),
            [1, 4]
        );
        assert_eq!(feasible_verbs(&t, 9), Err(Error::UnknownClass(9)));
        let all = FeasibilityTable::all_feasible(2, 5);
        assert_eq!(feasible_verbs(&all, 1).unwrap().len(), 5);
        assert!(all.validate(5).is_ok());
        assert!(all.validate(4).is_err());
    }

    #[test]
    fn human_flag_must_match_class() {
        let tok = Token {
            feature: alloc::vec![0.0; 2],
            bbox: BBox::new(0.1, 0.1, 0.2, 0.2).unwrap(),
            score: 0.9,
            class_id: 3,
            is_human: true,
        };
        let scene = Scene {
            id: "s".into(),
            global_feature: alloc::vec![0.0; 2],
            tokens: alloc::vec![tok],
            ground_truth: Vec::new(),
        };
        assert!(scene.validate(2, 1).is_err());
    }
}

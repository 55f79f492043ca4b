//! Synthetic detection-token scenes with a long-tailed distance distribution.
//!
//! Every human intends one object class and interacts with the nearest
//! object of that class. Each object class has one close verb and one distant
//! verb; which applies depends on whether the pair's center distance exceeds
//! `distant_threshold`. Pair distances follow the density
//! `(r + distance_offset)^-distance_exponent` on `[0, max_distance]`.
//! Distractors of the intended class are placed farther than the target, so
//! picking the right object requires knowing what is near and what is far.
//!
//! All randomness comes from `ChaCha8Rng` seeded with `seed`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use sdt_core::geometry::{center_distance, BBox};
use sdt_core::scene::{FeasibilityTable, GtTriplet, Scene, Token, PERSON_CLASS};

use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_scenes: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub max_humans: usize,
    pub d: usize,
    pub num_verbs: usize,
    /// Object classes `1..=num_object_classes`; class 0 is the person class.
    pub num_object_classes: u32,
    /// The last `distant_verbs` verb ids are distant verbs.
    pub distant_verbs: usize,
    pub distance_exponent: f64,
    pub distance_offset: f64,
    pub max_distance: f64,
    pub distant_threshold: f64,
    pub distractor_prob: f64,
    /// Zipf exponent of the intended-class frequencies.
    pub class_skew: f64,
    pub intent_scale: f64,
    pub noise: f64,
    pub box_jitter: f64,
    /// Fraction of scenes, taken from the end, held out for testing.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_scenes: 2000,
            min_tokens: 4,
            max_tokens: 8,
            max_humans: 2,
            d: 256,
            num_verbs: 10,
            num_object_classes: 7,
            distant_verbs: 3,
            distance_exponent: 1.5,
            distance_offset: 0.1,
            max_distance: 1.0,
            distant_threshold: 0.5,
            distractor_prob: 0.6,
            class_skew: 1.2,
            intent_scale: 1.0,
            noise: 0.5,
            box_jitter: 0.01,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(self.d > 0, "d must be positive");
        anyhow::ensure!(self.min_tokens >= 2, "min_tokens must be at least 2");
        anyhow::ensure!(self.min_tokens <= self.max_tokens, "empty token range");
        anyhow::ensure!(self.max_humans >= 1, "max_humans must be at least 1");
        anyhow::ensure!(self.num_object_classes >= 1, "need an object class");
        anyhow::ensure!(
            self.distant_verbs >= 1 && self.distant_verbs < self.num_verbs,
            "need at least one close and one distant verb"
        );
        anyhow::ensure!(self.distance_exponent > 0.0, "exponent must be positive");
        anyhow::ensure!(self.distance_offset > 0.0, "offset must be positive");
        anyhow::ensure!(
            self.max_distance > self.distant_threshold && self.max_distance <= 1.1,
            "max_distance must lie in (distant_threshold, 1.1]"
        );
        anyhow::ensure!((0.0..=1.0).contains(&self.distractor_prob), "distractor_prob outside [0, 1]");
        anyhow::ensure!((0.0..1.0).contains(&self.test_fraction), "test_fraction outside [0, 1)");
        Ok(())
    }

    pub fn close_verb(&self, class: u32) -> usize {
        (class as usize - 1) % (self.num_verbs - self.distant_verbs)
    }

    pub fn distant_verb(&self, class: u32) -> usize {
        self.num_verbs - self.distant_verbs + (class as usize - 1) % self.distant_verbs
    }

    pub fn is_distant_verb(&self, verb: usize) -> bool {
        verb >= self.num_verbs - self.distant_verbs
    }

    /// Class 0 gets no verbs; object class `o` gets its close and distant verb.
    pub fn feasibility(&self) -> FeasibilityTable {
        let mut t = FeasibilityTable::new();
        t.insert(PERSON_CLASS, []);
        for o in 1..=self.num_object_classes {
            t.insert(o, [self.close_verb(o), self.distant_verb(o)]);
        }
        t
    }

    /// Inverse-CDF draw from `(r + c)^-e` on `[0, R]`.
    pub fn sample_distance(&self, u: f64) -> f64 {
        let (c, e, r) = (self.distance_offset, self.distance_exponent, self.max_distance);
        let x = if (e - 1.0).abs() < 1e-12 {
            let (a, b) = (c.ln(), (r + c).ln());
            (a + u * (b - a)).exp()
        } else {
            let k = 1.0 - e;
            let (a, b) = (c.powf(k), (r + c).powf(k));
            (a + u * (b - a)).powf(1.0 / k)
        };
        (x - c).clamp(0.0, r)
    }
}

/// A generated dataset split in train and test scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub test: Vec<Scene>,
    pub feasibility: FeasibilityTable,
}

const CENTER_LO: f64 = 0.1;
const CENTER_HI: f64 = 0.9;

struct Gen<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    prototypes: Vec<Vec<f64>>,
    class_weights: Vec<f64>,
}

struct Placed {
    center: (f64, f64),
    class: u32,
    intent: Option<u32>,
}

impl Gen<'_> {
    fn gauss(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample(StandardNormal)).collect()
    }

    fn uniform_center(&mut self) -> (f64, f64) {
        (
            self.rng.random_range(CENTER_LO..CENTER_HI),
            self.rng.random_range(CENTER_LO..CENTER_HI),
        )
    }

    /// A point at distance `r` from `from` inside the center square.
    fn at_distance(&mut self, from: (f64, f64), r: f64, tries: usize) -> Option<(f64, f64)> {
        for _ in 0..tries {
            let theta = self.rng.random_range(0.0..std::f64::consts::TAU);
            let p = (from.0 + r * theta.cos(), from.1 + r * theta.sin());
            if (CENTER_LO..=CENTER_HI).contains(&p.0) && (CENTER_LO..=CENTER_HI).contains(&p.1) {
                return Some(p);
            }
        }
        None
    }

    fn pick_class(&mut self, taken: &[u32]) -> Option<u32> {
        let free: Vec<u32> = (1..=self.cfg.num_object_classes)
            .filter(|c| !taken.contains(c))
            .collect();
        if free.is_empty() {
            return None;
        }
        let total: f64 = free.iter().map(|&c| self.class_weights[c as usize]).sum();
        let mut u = self.rng.random_range(0.0..total);
        for &c in &free {
            u -= self.class_weights[c as usize];
            if u < 0.0 {
                return Some(c);
            }
        }
        free.last().copied()
    }

    fn bbox(&mut self, c: (f64, f64)) -> BBox {
        let w = self.rng.random_range(0.06..0.2);
        let h = self.rng.random_range(0.06..0.2);
        BBox::from_center(c.0, c.1, w, h).expect("center square keeps boxes inside")
    }

    fn jitter(&mut self, b: &BBox) -> BBox {
        let j = self.cfg.box_jitter;
        let mut v = b.to_array();
        for x in &mut v {
            if j > 0.0 {
                *x = (*x + self.rng.random_range(-j..j)).clamp(0.0, 1.0);
            }
        }
        BBox::new(v[0], v[1], v[2], v[3]).unwrap_or(*b)
    }

    fn scene(&mut self, idx: usize) -> Scene {
        let cfg = self.cfg;
        let n_tokens = self.rng.random_range(cfg.min_tokens..=cfg.max_tokens);
        let max_h = cfg.max_humans.min(n_tokens / 2).max(1);
        let n_humans = self.rng.random_range(1..=max_h);
        let mut placed: Vec<Placed> = Vec::new();
        let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
        let mut intents: Vec<u32> = Vec::new();
        for _ in 0..n_humans {
            let Some(class) = self.pick_class(&intents) else {
                break;
            };
            intents.push(class);
            let r = cfg.sample_distance(self.rng.random());
            let (hc, oc) = loop {
                let hc = self.uniform_center();
                if let Some(oc) = self.at_distance(hc, r, 16) {
                    break (hc, oc);
                }
            };
            let verb = if r > cfg.distant_threshold {
                cfg.distant_verb(class)
            } else {
                cfg.close_verb(class)
            };
            placed.push(Placed {
                center: hc,
                class: PERSON_CLASS,
                intent: Some(class),
            });
            placed.push(Placed {
                center: oc,
                class,
                intent: None,
            });
            pairs.push((placed.len() - 2, placed.len() - 1, verb));
            if placed.len() < n_tokens && self.rng.random::<f64>() < cfg.distractor_prob {
                let lo = (r + 0.15).max(cfg.distant_threshold + 0.05);
                if lo < cfg.max_distance {
                    let r2 = self.rng.random_range(lo..=cfg.max_distance);
                    if let Some(dc) = self.at_distance(hc, r2, 64) {
                        placed.push(Placed {
                            center: dc,
                            class,
                            intent: None,
                        });
                    }
                }
            }
        }
        let free: Vec<u32> = (1..=cfg.num_object_classes)
            .filter(|c| !intents.contains(c))
            .collect();
        while placed.len() < n_tokens && !free.is_empty() {
            let class = free[self.rng.random_range(0..free.len())];
            let c = self.uniform_center();
            placed.push(Placed {
                center: c,
                class,
                intent: None,
            });
        }

        let d = cfg.d;
        let centers: Vec<(f64, f64)> = placed.iter().map(|p| p.center).collect();
        let gt_boxes: Vec<BBox> = centers.into_iter().map(|c| self.bbox(c)).collect();
        let mut tokens = Vec::with_capacity(placed.len());
        for (p, b) in placed.iter().zip(&gt_boxes) {
            let noise = self.gauss(d);
            let mut feature: Vec<f64> = self.prototypes[p.class as usize]
                .iter()
                .zip(&noise)
                .map(|(m, z)| m + cfg.noise * z)
                .collect();
            if let Some(o) = p.intent {
                for (f, v) in feature.iter_mut().zip(&self.prototypes[o as usize]) {
                    *f += cfg.intent_scale * v;
                }
            }
            let bbox = self.jitter(b);
            tokens.push(Token {
                feature,
                bbox,
                score: self.rng.random_range(0.3..=1.0),
                class_id: p.class,
                is_human: p.class == PERSON_CLASS,
            });
        }
        let ground_truth = pairs
            .iter()
            .map(|&(h, o, v)| GtTriplet {
                human_box: gt_boxes[h],
                object_box: gt_boxes[o],
                object_class: placed[o].class,
                verb_ids: [v].into_iter().collect(),
            })
            .collect();
        let mut global_feature = vec![0.0; d];
        for t in &tokens {
            for (g, f) in global_feature.iter_mut().zip(&t.feature) {
                *g += f / tokens.len() as f64;
            }
        }
        tokens.shuffle(&mut self.rng);
        Scene {
            id: format!("scene-{idx:06}"),
            global_feature,
            tokens,
            ground_truth,
        }
    }
}

/// Generates `num_scenes` scenes and the matching feasibility table.
pub fn generate_scenes(cfg: &SynthConfig) -> anyhow::Result<(Vec<Scene>, FeasibilityTable)> {
    cfg.validate()?;
    let mut proto_rng = seed::rng(cfg.seed, &[0]);
    let prototypes = (0..=cfg.num_object_classes)
        .map(|_| (0..cfg.d).map(|_| proto_rng.sample(StandardNormal)).collect())
        .collect();
    let class_weights = (0..=cfg.num_object_classes)
        .map(|c| if c == 0 { 0.0 } else { (c as f64).powf(-cfg.class_skew) })
        .collect();
    let mut g = Gen {
        cfg,
        rng: seed::rng(cfg.seed, &[1]),
        prototypes,
        class_weights,
    };
    let scenes = (0..cfg.num_scenes).map(|i| g.scene(i)).collect();
    Ok((scenes, cfg.feasibility()))
}

pub fn generate_dataset(cfg: &SynthConfig) -> anyhow::Result<Dataset> {
    let (mut scenes, feasibility) = generate_scenes(cfg)?;
    let n_test = (cfg.num_scenes as f64 * cfg.test_fraction).round() as usize;
    let test = scenes.split_off(cfg.num_scenes - n_test);
    Ok(Dataset {
        train: scenes,
        test,
        feasibility,
    })
}

/// Center distances of every ground-truth pair.
pub fn gt_distances(scenes: &[Scene]) -> Vec<f64> {
    scenes
        .iter()
        .flat_map(|s| s.ground_truth.iter().map(|g| center_distance(&g.human_box, &g.object_box)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_scenes: 200,
            d: 8,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_scenes(&small()).unwrap();
        let b = generate_scenes(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 4;
        assert_ne!(a.0, generate_scenes(&other).unwrap().0);
    }

    #[test]
    fn scenes_are_valid_and_feasible() {
        let cfg = small();
        let (scenes, table) = generate_scenes(&cfg).unwrap();
        for s in &scenes {
            s.validate(cfg.d, cfg.num_verbs).unwrap();
            assert!(s.tokens.iter().any(|t| t.is_human));
            assert!(s.tokens.iter().any(|t| !t.is_human));
            assert!(s.tokens.len() >= cfg.min_tokens && s.tokens.len() <= cfg.max_tokens);
            assert!(s.tokens.iter().all(|t| (0.3..=1.0).contains(&t.score)));
            for g in &s.ground_truth {
                for &v in &g.verb_ids {
                    assert!(table.is_feasible(g.object_class, v));
                    assert_eq!(cfg.is_distant_verb(v), g.distance() > cfg.distant_threshold);
                }
            }
        }
    }

    #[test]
    fn inverse_cdf_endpoints() {
        let cfg = SynthConfig::default();
        assert!(cfg.sample_distance(0.0).abs() < 1e-12);
        assert!((cfg.sample_distance(1.0) - cfg.max_distance).abs() < 1e-12);
        let one = SynthConfig {
            distance_exponent: 1.0,
            ..Default::default()
        };
        assert!(one.sample_distance(0.5) > 0.0 && one.sample_distance(0.5) < 1.0);
    }
}

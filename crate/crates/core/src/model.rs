//! The full network: diversification, spatial fusion, token encoder, pair
//! formation, interaction encoder and verb head, over one [`ParamStore`].

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::eval::{match_pairs_to_gt, PairPrediction};
use crate::fnda::{
    attention_records, build_masks, token_encoder_forward, AttentionIds, AttentionRecord,
    AttentionTrace, BlockIds, LayerIds, TokenEncoderConfig,
};
use crate::geometry::{pairwise_distances, spatial_relations, DistanceMatrix, SPATIAL_DIM};
use crate::interaction::{fuse_pairs_forward, interaction_encoder, make_pairs, verb_logits};
use crate::nn::{sigmoid, Dropout, FfnIds, LinearIds};
use crate::objective::{record_pair_loss, LossConfig};
use crate::params::{glorot, GradStore, ParamStore};
use crate::scene::{GtTriplet, Token};
use crate::tensor::Matrix;
use crate::token_post::{icd_forward, spatial_fuse_forward, ClassMemory, IcdConfig, IcdIds};

/// Pairs are positive for a ground-truth triplet when both boxes reach this IoU.
pub const TRAIN_MATCH_IOU: f64 = 0.5;

/// Which optional modules take part in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub t_encoder: bool,
    pub i_encoder: bool,
    pub icd: bool,
    pub spatial_fusion: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            t_encoder: true,
            i_encoder: true,
            icd: true,
            spatial_fusion: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Token feature width.
    pub d: usize,
    pub num_verbs: usize,
    pub token_encoder: TokenEncoderConfig,
    pub interaction_layers: usize,
    /// Hidden width of the spatial-fusion, context and interaction FFNs.
    pub ffn_hidden: usize,
    pub verb_hidden: usize,
    pub dropout: f64,
    pub toggles: Toggles,
    pub icd: IcdConfig,
    /// Initial positive probability of the verb head.
    pub prior: f64,
    pub da_alpha_init: f64,
    pub da_beta_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            num_verbs: 117,
            token_encoder: TokenEncoderConfig::default(),
            interaction_layers: 3,
            ffn_hidden: 1024,
            verb_hidden: 1024,
            dropout: 0.1,
            toggles: Toggles::default(),
            icd: IcdConfig::default(),
            prior: 0.01,
            da_alpha_init: 1.0,
            da_beta_init: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let heads = self.token_encoder.heads;
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.num_verbs == 0 {
            return bad("d and num_verbs must be positive".into());
        }
        if heads == 0 || !self.d.is_multiple_of(heads) {
            return bad(format!("d = {} not divisible by {heads} heads", self.d));
        }
        if self.ffn_hidden == 0 || self.verb_hidden == 0 || self.token_encoder.hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if !(self.da_alpha_init.is_finite() && self.da_beta_init.is_finite()) {
            return bad("DA initial values must be finite".into());
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return bad("prior must lie in (0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ModelIds {
    icd: IcdIds,
    sf: FfnIds,
    tenc: Vec<LayerIds>,
    ctx: FfnIds,
    ienc: Vec<BlockIds>,
    head: FfnIds,
    alpha: usize,
    beta: usize,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn glorot(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let m = glorot(rows, cols, self.rng);
        self.store.add(name, m)
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> LinearIds {
        LinearIds {
            w: self.glorot(format!("{name}.w"), i, o),
            b: self.store.add(format!("{name}.b"), Matrix::zeros(1, o)),
        }
    }

    fn ffn(&mut self, name: &str, i: usize, h: usize, o: usize) -> FfnIds {
        FfnIds {
            l1: self.linear(&format!("{name}.l1"), i, h),
            l2: self.linear(&format!("{name}.l2"), h, o),
        }
    }

    fn layer_norm(&mut self, name: &str, d: usize) -> (usize, usize) {
        (
            self.store.add(format!("{name}.g"), Matrix::filled(1, d, 1.0)),
            self.store.add(format!("{name}.b"), Matrix::zeros(1, d)),
        )
    }

    fn block(&mut self, name: &str, d: usize, hidden: usize) -> BlockIds {
        let attn = AttentionIds {
            wq: self.glorot(format!("{name}.attn.wq"), d, d),
            wk: self.glorot(format!("{name}.attn.wk"), d, d),
            wv: self.glorot(format!("{name}.attn.wv"), d, d),
            out: self.linear(&format!("{name}.attn.out"), d, d),
        };
        BlockIds {
            attn,
            ln1: self.layer_norm(&format!("{name}.ln1"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, hidden, d),
            ln2: self.layer_norm(&format!("{name}.ln2"), d),
        }
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, ModelIds) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder {
        store: ParamStore::new(),
        rng: &mut rng,
    };
    let d = cfg.d;
    let icd = IcdIds {
        wq: b.glorot("icd.wq".into(), d, d),
        wk: b.glorot("icd.wk".into(), d, d),
        wv: b.glorot("icd.wv".into(), d, d),
    };
    let sf = b.ffn("sf", d + SPATIAL_DIM, cfg.ffn_hidden, d);
    let tenc = (0..cfg.token_encoder.layers)
        .map(|l| LayerIds {
            far: b.block(&format!("tenc.{l}.far"), d, cfg.token_encoder.hidden),
            near: b.block(&format!("tenc.{l}.near"), d, cfg.token_encoder.hidden),
        })
        .collect();
    let ctx = b.ffn("ctx", d, cfg.ffn_hidden, 2 * d);
    let ienc = (0..cfg.interaction_layers)
        .map(|l| b.block(&format!("ienc.{l}"), 2 * d, cfg.ffn_hidden))
        .collect();
    let head = b.ffn("head", 2 * d, cfg.verb_hidden, cfg.num_verbs);
    let prior_bias = -libm::log((1.0 - cfg.prior) / cfg.prior);
    *b.store.get_mut(head.l2.b) = Matrix::filled(1, cfg.num_verbs, prior_bias);
    let alpha = b.store.add("da.alpha", Matrix::filled(1, 1, cfg.da_alpha_init));
    let beta = b.store.add("da.beta", Matrix::filled(1, 1, cfg.da_beta_init));
    let ids = ModelIds {
        icd,
        sf,
        tenc,
        ctx,
        ienc,
        head,
        alpha,
        beta,
    };
    (b.store, ids)
}

/// Output of one scene's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub pairs: Vec<(usize, usize)>,
    /// Center distance of every pair.
    pub distances: Vec<f64>,
    /// `pairs.len() x num_verbs` logits, absent without pairs.
    pub logits: Option<NodeId>,
    pub trace: AttentionTrace,
    pub dist: Option<DistanceMatrix>,
}

/// Loss and gradients of one scene.
#[derive(Debug, Clone)]
pub struct SceneGrad {
    pub loss: f64,
    pub grads: GradStore,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdtModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: ModelIds,
}

impl SdtModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, ids) = build(&config, seed);
        let mut m = Self { config, params, ids };
        m.apply_toggles();
        Ok(m)
    }

    /// Wraps trained parameters; names and shapes must match `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (template, ids) = build(&config, 0);
        template.check_compatible(&params)?;
        let mut m = Self { config, params, ids };
        m.apply_toggles();
        Ok(m)
    }

    fn apply_toggles(&mut self) {
        let t = self.config.toggles;
        for (on, prefix) in [
            (t.icd, "icd."),
            (t.spatial_fusion, "sf."),
            (t.t_encoder, "tenc."),
            (t.i_encoder, "ienc."),
        ] {
            if !on {
                self.params.freeze_prefix(prefix);
            }
        }
    }

    /// Freezes `alpha` and `beta` when the distance-aware weight is off.
    pub fn apply_loss_config(&mut self, loss: &LossConfig) {
        if !loss.da_enabled {
            self.params.freeze_prefix("da.");
        }
    }

    pub fn da_params(&self) -> (f64, f64) {
        (
            self.params.get(self.ids.alpha).data()[0],
            self.params.get(self.ids.beta).data()[0],
        )
    }

    /// Number of trainable scalars.
    pub fn trainable_parameters(&self) -> usize {
        self.params
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Parameters of the token encoder.
    pub fn token_encoder_parameters(&self) -> usize {
        self.params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("tenc."))
            .map(|e| e.value.len())
            .sum()
    }

    /// Records one scene on `tape`. With `train` set, dropout is active and
    /// draws from `rng`; the same `rng` feeds memory sampling.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[Token],
        global: &[f64],
        memory: &ClassMemory,
        rng: &mut dyn RngCore,
        train: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let t = cfg.toggles;
        if tokens.is_empty() {
            return Ok(ForwardPass {
                pairs: Vec::new(),
                distances: Vec::new(),
                logits: None,
                trace: AttentionTrace::default(),
                dist: None,
            });
        }
        if global.len() != cfg.d {
            return Err(Error::Shape {
                op: "global feature",
                left: (1, cfg.d),
                right: (1, global.len()),
            });
        }
        let feats: Vec<&[f64]> = tokens.iter().map(|t| t.feature.as_slice()).collect();
        let raw = Matrix::from_rows(&feats)?;
        if raw.cols() != cfg.d {
            return Err(Error::Shape {
                op: "token features",
                left: (raw.rows(), cfg.d),
                right: raw.shape(),
            });
        }
        let mut x = if t.icd {
            icd_forward(tape, &self.params, tokens, memory, &self.ids.icd, cfg.icd.samples, rng)?
        } else {
            tape.constant(raw)
        };
        let boxes: Vec<_> = tokens.iter().map(|t| t.bbox).collect();
        if t.spatial_fusion {
            let p = tape.constant(spatial_relations(&boxes)?);
            x = spatial_fuse_forward(tape, &self.params, x, p, &self.ids.sf)?;
        }
        let dist = pairwise_distances(&boxes)?;
        let mut dropout = (train && cfg.dropout > 0.0).then_some(Dropout {
            p: cfg.dropout,
            rng: &mut *rng,
        });
        let mut trace = AttentionTrace::default();
        if t.t_encoder {
            let masks = build_masks(&dist);
            let (y, tr) = token_encoder_forward(
                tape,
                &self.params,
                x,
                &masks,
                &self.ids.tenc,
                &cfg.token_encoder,
                &mut dropout,
            )?;
            x = y;
            trace = tr;
        }
        let pairs = make_pairs(tokens);
        let distances: Vec<f64> = pairs.iter().map(|&(i, j)| dist.get(i, j)).collect();
        if pairs.is_empty() {
            return Ok(ForwardPass {
                pairs,
                distances,
                logits: None,
                trace,
                dist: Some(dist),
            });
        }
        let g = tape.constant(Matrix::row_vector(global));
        let ctx = self.ids.ctx.forward(tape, &self.params, g, &mut None)?;
        let mut h = fuse_pairs_forward(tape, x, ctx, &pairs)?;
        if t.i_encoder {
            h = interaction_encoder(
                tape,
                &self.params,
                h,
                &self.ids.ienc,
                cfg.token_encoder.heads,
                &mut dropout,
            )?;
        }
        let logits = verb_logits(tape, &self.params, h, &self.ids.head, &mut dropout)?;
        Ok(ForwardPass {
            pairs,
            distances,
            logits: Some(logits),
            trace,
            dist: Some(dist),
        })
    }

    /// Pair targets of a scene.
    pub fn targets(&self, tokens: &[Token], gts: &[GtTriplet]) -> Result<(Vec<(usize, usize)>, Matrix)> {
        let pairs = make_pairs(tokens);
        let y = match_pairs_to_gt(tokens, &pairs, gts, self.config.num_verbs, TRAIN_MATCH_IOU)?;
        Ok((pairs, y))
    }

    /// Records the scene loss scaled by `scale`; `None` without pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        tokens: &[Token],
        global: &[f64],
        gts: &[GtTriplet],
        memory: &ClassMemory,
        rng: &mut dyn RngCore,
        loss: &LossConfig,
        scale: f64,
    ) -> Result<Option<NodeId>> {
        let fp = self.forward(tape, tokens, global, memory, rng, true)?;
        let Some(logits) = fp.logits else {
            return Ok(None);
        };
        let (_, y) = self.targets(tokens, gts)?;
        let da = if loss.da_enabled {
            Some((
                tape.param(&self.params, self.ids.alpha),
                tape.param(&self.params, self.ids.beta),
            ))
        } else {
            None
        };
        record_pair_loss(tape, logits, &y, &fp.distances, da, loss, scale).map(Some)
    }

    /// Scaled loss and gradients of one scene.
    #[allow(clippy::too_many_arguments)]
    pub fn scene_grad(
        &self,
        tokens: &[Token],
        global: &[f64],
        gts: &[GtTriplet],
        memory: &ClassMemory,
        rng: &mut dyn RngCore,
        loss: &LossConfig,
        scale: f64,
    ) -> Result<SceneGrad> {
        let mut tape = Tape::new();
        match self.record_loss(&mut tape, tokens, global, gts, memory, rng, loss, scale)? {
            Some(root) => Ok(SceneGrad {
                loss: tape.scalar(root),
                grads: tape.backward(root, &self.params)?,
                pairs: make_pairs(tokens).len(),
            }),
            None => Ok(SceneGrad {
                loss: 0.0,
                grads: GradStore::zeros_like(&self.params),
                pairs: 0,
            }),
        }
    }

    /// Verb probabilities for every pair, without dropout.
    pub fn predict(
        &self,
        tokens: &[Token],
        global: &[f64],
        memory: &ClassMemory,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<PairPrediction>> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, tokens, global, memory, rng, false)?;
        let Some(logits) = fp.logits else {
            return Ok(Vec::new());
        };
        let z = tape.value(logits);
        Ok(fp
            .pairs
            .iter()
            .zip(&fp.distances)
            .enumerate()
            .map(|(r, (&(h, o), &distance))| PairPrediction {
                human: h,
                object: o,
                distance,
                scores: z.row(r).iter().map(|&v| sigmoid(v)).collect(),
            })
            .collect())
    }

    /// Token encoder attention of every ordered token pair.
    pub fn attention(
        &self,
        tokens: &[Token],
        global: &[f64],
        memory: &ClassMemory,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<AttentionRecord>> {
        let mut tape = Tape::new();
        let fp = self.forward(&mut tape, tokens, global, memory, rng, false)?;
        Ok(match fp.dist {
            Some(d) => attention_records(&tape, &fp.trace, &d),
            None => Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fnda::AttentionKind;
    use crate::geometry::BBox;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use alloc::collections::BTreeSet;
    use alloc::vec;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d: 4,
            num_verbs: 3,
            token_encoder: TokenEncoderConfig {
                layers: 1,
                heads: 2,
                hidden: 6,
                ..Default::default()
            },
            interaction_layers: 1,
            ffn_hidden: 6,
            verb_hidden: 5,
            dropout: 0.0,
            prior: 0.3,
            ..Default::default()
        }
    }

    fn scene(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<Token>, Vec<f64>, Vec<GtTriplet>) {
        let tokens: Vec<Token> = (0..n)
            .map(|k| {
                let cx = rng.random_range(0.15..0.85);
                let cy = rng.random_range(0.15..0.85);
                Token {
                    feature: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    bbox: BBox::from_center(cx, cy, 0.2, 0.25).unwrap(),
                    score: rng.random_range(0.5..1.0),
                    class_id: if k < 2 { 0 } else { 1 + (k as u32 % 2) },
                    is_human: k < 2,
                }
            })
            .collect();
        let gts = vec![GtTriplet {
            human_box: tokens[0].bbox,
            object_box: tokens[2].bbox,
            object_class: tokens[2].class_id,
            verb_ids: BTreeSet::from([0, 2]),
        }];
        let global = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        (tokens, global, gts)
    }

    fn memory(tokens: &[Token]) -> ClassMemory {
        let mut m = ClassMemory::new(&IcdConfig::default());
        for t in tokens {
            let mut u = t.clone();
            u.score = 0.9;
            u.feature.iter_mut().for_each(|v| *v = 0.5 - *v);
            m.update(&u);
        }
        m
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny_config();
        let model = SdtModel::new(cfg.clone(), 17).unwrap();
        let (tokens, global, gts) = scene(&mut rng, 5, cfg.d);
        let mem = memory(&tokens);
        let loss = LossConfig::default();
        let g = model
            .scene_grad(&tokens, &global, &gts, &mem, &mut ChaCha8Rng::seed_from_u64(1), &loss, 0.5)
            .unwrap();
        assert!(g.loss > 0.0);
        let report = grad_check(
            &model.params,
            &g.grads,
            |p| {
                let m = SdtModel::from_params(cfg.clone(), p.clone())?;
                let mut tape = Tape::new();
                let mut r = ChaCha8Rng::seed_from_u64(1);
                let root = m
                    .record_loss(&mut tape, &tokens, &global, &gts, &mem, &mut r, &loss, 0.5)?
                    .expect("pairs exist");
                Ok(tape.scalar(root))
            },
            &GradCheckConfig {
                samples_per_tensor: 40,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
        assert!(report.tensors.iter().any(|t| t.name == "da.alpha"));
        assert!(report.tensors.iter().any(|t| t.name == "icd.wv"));
    }

    #[test]
    fn toggled_off_modules_are_frozen_and_get_no_gradient() {
        let mut cfg = tiny_config();
        cfg.toggles = Toggles {
            t_encoder: false,
            i_encoder: false,
            icd: false,
            spatial_fusion: false,
        };
        let mut model = SdtModel::new(cfg.clone(), 3).unwrap();
        let loss = LossConfig {
            da_enabled: false,
            ..Default::default()
        };
        model.apply_loss_config(&loss);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (tokens, global, gts) = scene(&mut rng, 4, cfg.d);
        let g = model
            .scene_grad(&tokens, &global, &gts, &ClassMemory::new(&cfg.icd), &mut rng, &loss, 1.0)
            .unwrap();
        for (k, e) in model.params.entries().iter().enumerate() {
            let off = ["icd.", "sf.", "tenc.", "ienc.", "da."]
                .iter()
                .any(|p| e.name.starts_with(p));
            assert_eq!(e.trainable, !off, "{}", e.name);
            if off {
                assert_eq!(g.grads.get(k).max_abs(), 0.0, "{}", e.name);
            }
        }
    }

    #[test]
    fn fnda_and_mhsa_have_equal_parameter_counts() {
        let mut a = tiny_config();
        a.token_encoder.attention = AttentionKind::Fnda;
        let mut b = a.clone();
        b.token_encoder.attention = AttentionKind::Mhsa;
        let ma = SdtModel::new(a, 1).unwrap();
        let mb = SdtModel::new(b, 1).unwrap();
        assert_eq!(ma.token_encoder_parameters(), mb.token_encoder_parameters());
        assert_eq!(ma.params.numel(), mb.params.numel());
    }

    #[test]
    fn from_params_rejects_other_shapes() {
        let model = SdtModel::new(tiny_config(), 1).unwrap();
        let mut other = tiny_config();
        other.ffn_hidden = 7;
        assert!(SdtModel::from_params(other, model.params.clone()).is_err());
        let mut deeper = tiny_config();
        deeper.interaction_layers = 2;
        assert!(SdtModel::from_params(deeper, model.params.clone()).is_err());
        assert!(SdtModel::from_params(tiny_config(), model.params).is_ok());
    }

    #[test]
    fn predictions_cover_pairs_and_are_probabilities() {
        let cfg = tiny_config();
        let model = SdtModel::new(cfg.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (tokens, global, _) = scene(&mut rng, 5, cfg.d);
        let mem = memory(&tokens);
        let p = model.predict(&tokens, &global, &mem, &mut rng).unwrap();
        assert_eq!(p.len(), 2 * 4);
        for q in &p {
            assert_eq!(q.scores.len(), 3);
            assert!(q.scores.iter().all(|&s| s > 0.0 && s < 1.0));
        }
        let again = model
            .predict(&tokens, &global, &ClassMemory::new(&cfg.icd), &mut rng)
            .unwrap();
        assert_eq!(again.len(), p.len());
        let objects_only: Vec<Token> = tokens.iter().filter(|t| !t.is_human).cloned().collect();
        assert!(model.predict(&objects_only, &global, &mem, &mut rng).unwrap().is_empty());
        assert!(model.predict(&[], &global, &mem, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn attention_records_rows_sum_to_one() {
        let cfg = tiny_config();
        let model = SdtModel::new(cfg.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (tokens, global, _) = scene(&mut rng, 6, cfg.d);
        let recs = model
            .attention(&tokens, &global, &ClassMemory::new(&cfg.icd), &mut rng)
            .unwrap();
        assert_eq!(recs.len(), 36);
        for i in 0..6 {
            let s: f64 = recs.iter().filter(|r| r.i == i).map(|r| r.weight).sum();
            assert!((s - 1.0).abs() < 1e-12);
            let f: f64 = recs.iter().filter(|r| r.i == i).map(|r| r.far.unwrap()).sum();
            assert!((f - 1.0).abs() < 1e-12);
        }
    }
}

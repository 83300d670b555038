//! The hand-object transformer decoder.
//!
//! `N` hand queries and `N` object queries (paired by index) are refined over
//! `L` layers. Each layer runs, in order: hand mask attention, hand-to-object
//! cross attention, object mask attention, object-to-hand cross attention.

mod attention;
mod infer;

pub use attention::{
    attention_mask, cross_att, cross_att_graph, mask_att, mask_att_graph, AttentionIds,
    AttentionMask4D, AttentionParams, AttentionVars, LinearParams, MaskAttOutput, MaskAttVars,
    MaskStack, QueryRole, QuerySet,
};
pub use infer::{infer_tracks, upsample_bilinear};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureVolume};
use crate::params::{Bound, ParamId, ParamStore};

/// Standard deviation of the learned query initialization.
pub const QUERY_INIT_STD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub n_queries: usize,
    pub channels: usize,
    pub layers: usize,
    /// Hand-to-object cross attention (step 2); off passes object queries through.
    pub h2o_attn: bool,
    /// Object-to-hand cross attention (step 4); off passes hand queries through.
    pub o2h_attn: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_queries: 8,
            channels: 64,
            layers: 3,
            h2o_attn: true,
            o2h_attn: true,
        }
    }
}

/// Learned initial hand and object queries, each `N×C`, deterministic in `seed`.
/// Hand query `i` is paired with object query `i` and both start from the
/// same vector, so the paired queries are each other's nearest neighbours.
pub fn init_queries(n: usize, c: usize, seed: u64) -> (QuerySet, QuerySet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, QUERY_INIT_STD).expect("valid std");
    let hand = Array2::from_shape_simple_fn((n, c), || d.sample(&mut rng));
    let object = hand.clone();
    (
        QuerySet {
            data: hand,
            role: QueryRole::Hand,
            layer: 0,
        },
        QuerySet {
            data: object,
            role: QueryRole::Object,
            layer: 0,
        },
    )
}

/// The four attention modules of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub h2h: AttentionParams,
    pub h2o: AttentionParams,
    pub o2o: AttentionParams,
    pub o2h: AttentionParams,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    h2h: AttentionIds,
    h2o: AttentionIds,
    o2o: AttentionIds,
    o2h: AttentionIds,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub h2h: AttentionVars,
    pub h2o: AttentionVars,
    pub o2o: AttentionVars,
    pub o2h: AttentionVars,
}

/// Which cross-attention steps run; a disabled step passes its input through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub h2o_attn: bool,
    pub o2h_attn: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            h2o_attn: true,
            o2h_attn: true,
        }
    }
}

/// Queries and binary masks entering or leaving a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    pub hand: QuerySet,
    pub object: QuerySet,
    pub hand_masks: MaskStack,
    pub object_masks: MaskStack,
}

/// One layer on the graph.
#[derive(Debug, Clone)]
pub struct LayerStep {
    /// `H_l`
    pub hand: Var,
    /// `O_l`
    pub object: Var,
    /// Object queries after hand-to-object attention (before object mask attention).
    pub object_mixed: Var,
    /// Hand mask attention: `Ĥ_l` and the new hand masks.
    pub hand_att: MaskAttVars,
    /// Object mask attention: `O_l` and the new object masks.
    pub object_att: MaskAttVars,
}

/// Runs the four steps of one decoder layer on the graph.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer_graph(
    g: &mut Graph,
    hand: Var,
    object: Var,
    hand_masks: &MaskStack,
    object_masks: &MaskStack,
    feat: &FeatureMap,
    f: &LayerVars,
    flags: AblationFlags,
) -> Result<LayerStep> {
    let hand_att = mask_att_graph(g, hand, hand_masks, feat, &f.h2h)?;
    let object_mixed = if flags.h2o_attn {
        cross_att_graph(g, object, hand_att.queries, &f.h2o)
    } else {
        object
    };
    let object_att = mask_att_graph(g, object_mixed, object_masks, feat, &f.o2o)?;
    let hand_out = if flags.o2h_attn {
        cross_att_graph(g, hand_att.queries, object_att.queries, &f.o2h)
    } else {
        hand_att.queries
    };
    Ok(LayerStep {
        hand: hand_out,
        object: object_att.queries,
        object_mixed,
        hand_att,
        object_att,
    })
}

/// Output of [`decoder_layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub state: LayerState,
    pub hand_soft: Array2<f64>,
    pub object_soft: Array2<f64>,
}

fn place_layer(g: &mut Graph, lp: &LayerParams) -> LayerVars {
    LayerVars {
        h2h: attention::place_params(g, &lp.h2h),
        h2o: attention::place_params(g, &lp.h2o),
        o2o: attention::place_params(g, &lp.o2o),
        o2h: attention::place_params(g, &lp.o2h),
    }
}

/// One decoder layer on plain values.
pub fn decoder_layer(
    prev: &LayerState,
    feat: &FeatureVolume,
    lp: &LayerParams,
    flags: AblationFlags,
) -> Result<LayerOutput> {
    let mut g = Graph::new();
    let fm = attention::feature_constant(&mut g, feat);
    let h = g.constant(prev.hand.data.clone());
    let o = g.constant(prev.object.data.clone());
    let lv = place_layer(&mut g, lp);
    let step = decoder_layer_graph(
        &mut g,
        h,
        o,
        &prev.hand_masks,
        &prev.object_masks,
        &fm,
        &lv,
        flags,
    )?;
    let layer = prev.hand.layer + 1;
    Ok(LayerOutput {
        state: LayerState {
            hand: QuerySet {
                data: g.value(step.hand).clone(),
                role: QueryRole::Hand,
                layer,
            },
            object: QuerySet {
                data: g.value(step.object).clone(),
                role: QueryRole::Object,
                layer,
            },
            hand_masks: step.hand_att.binary.clone(),
            object_masks: step.object_att.binary.clone(),
        },
        hand_soft: g.value(step.hand_att.soft).clone(),
        object_soft: g.value(step.object_att.soft).clone(),
    })
}

/// Mask predictions of one layer (index 0 is the prediction from the initial queries).
#[derive(Debug, Clone)]
pub struct LayerMasksVars {
    pub hand_logits: Var,
    pub hand_soft: Var,
    pub object_logits: Var,
    pub object_soft: Var,
    pub hand_binary: MaskStack,
    pub object_binary: MaskStack,
}

/// Everything the decoder produced on the graph.
#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub layers: Vec<LayerMasksVars>,
    /// `N×2`: column 0 is "track", column 1 is "no object".
    pub class_logits: Var,
    pub hand_queries: Var,
    pub object_queries: Var,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub clip_hw: (usize, usize),
}

/// Value-level masks of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMasks {
    /// `N × (T·H'·W')` dot-product logits.
    pub hand_logits: Array2<f64>,
    pub object_logits: Array2<f64>,
    /// `sigmoid` of the logits.
    pub hand_soft: Array2<f64>,
    pub object_soft: Array2<f64>,
    pub hand_binary: MaskStack,
    pub object_binary: MaskStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// `L + 1` entries; index 0 comes from the initial queries.
    pub layers: Vec<LayerMasks>,
    pub class_logits: Array2<f64>,
    pub hand_queries: QuerySet,
    pub object_queries: QuerySet,
    /// Feature grid `(T, H', W')`.
    pub grid: (usize, usize, usize),
    pub stride: usize,
    /// Clip size before padding.
    pub clip_hw: (usize, usize),
}

impl DecoderOutput {
    /// Softmax probability of the "track" class per query pair.
    pub fn track_probs(&self) -> Vec<f64> {
        self.class_logits
            .rows()
            .into_iter()
            .map(|r| crate::autodiff::sigmoid(r[0] - r[1]))
            .collect()
    }

    pub fn final_layer(&self) -> &LayerMasks {
        self.layers.last().expect("at least the initial prediction")
    }
}

impl DecoderVars {
    pub fn to_output(&self, g: &Graph) -> DecoderOutput {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerMasks {
                hand_logits: g.value(l.hand_logits).clone(),
                object_logits: g.value(l.object_logits).clone(),
                hand_soft: g.value(l.hand_soft).clone(),
                object_soft: g.value(l.object_soft).clone(),
                hand_binary: l.hand_binary.clone(),
                object_binary: l.object_binary.clone(),
            })
            .collect();
        let n_layers = self.layers.len() - 1;
        DecoderOutput {
            layers,
            class_logits: g.value(self.class_logits).clone(),
            hand_queries: QuerySet {
                data: g.value(self.hand_queries).clone(),
                role: QueryRole::Hand,
                layer: n_layers,
            },
            object_queries: QuerySet {
                data: g.value(self.object_queries).clone(),
                role: QueryRole::Object,
                layer: n_layers,
            },
            grid: (self.frames, self.h, self.w),
            stride: self.stride,
            clip_hw: self.clip_hw,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    cfg: DecoderConfig,
    hand_queries: ParamId,
    object_queries: ParamId,
    layers: Vec<LayerIds>,
    class_w: ParamId,
    class_b: ParamId,
}

impl Decoder {
    /// Registers queries, `L` layers of attention maps and the class head.
    pub fn new(cfg: DecoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if cfg.n_queries == 0 || cfg.channels == 0 || cfg.layers == 0 {
            return Err(Error::Config(
                "decoder needs N >= 1, C >= 1 and L >= 1".into(),
            ));
        }
        let c = cfg.channels;
        let (h0, o0) = init_queries(cfg.n_queries, c, rng.random());
        let hand_queries = store.add("decoder.hand_queries", h0.data);
        let object_queries = store.add("decoder.object_queries", o0.data);
        let std = (1.0 / c as f64).sqrt();
        // mask attention starts random; cross attention starts as identity maps
        let mut module = |store: &mut ParamStore, name: String, identity: bool| {
            let init = if identity {
                AttentionParams::identity(c)
            } else {
                let mut init = AttentionParams::random(c, rng, std);
                for l in [&mut init.q, &mut init.k, &mut init.v] {
                    l.bias.fill(0.0);
                }
                init
            };
            AttentionIds::register(store, &name, init)
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(LayerIds {
                h2h: module(store, format!("decoder.layer{l}.h2h"), false),
                h2o: module(store, format!("decoder.layer{l}.h2o"), true),
                o2o: module(store, format!("decoder.layer{l}.o2o"), false),
                o2h: module(store, format!("decoder.layer{l}.o2h"), true),
            });
        }
        let d = Normal::new(0.0, 0.01).expect("valid std");
        let class_w = store.add(
            "decoder.class.weight",
            Array2::from_shape_simple_fn((c, 2), || d.sample(rng)),
        );
        let class_b = store.add("decoder.class.bias", Array2::zeros((1, 2)));
        Ok(Decoder {
            cfg,
            hand_queries,
            object_queries,
            layers,
            class_w,
            class_b,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn flags(&self) -> AblationFlags {
        AblationFlags {
            h2o_attn: self.cfg.h2o_attn,
            o2h_attn: self.cfg.o2h_attn,
        }
    }

    pub fn set_flags(&mut self, flags: AblationFlags) {
        self.cfg.h2o_attn = flags.h2o_attn;
        self.cfg.o2h_attn = flags.o2h_attn;
    }

    /// Value-level parameters of layer `l`.
    pub fn layer_params(&self, store: &ParamStore, l: usize) -> LayerParams {
        let ids = &self.layers[l];
        LayerParams {
            h2h: ids.h2h.values(store),
            h2o: ids.h2o.values(store),
            o2o: ids.o2o.values(store),
            o2h: ids.o2h.values(store),
        }
    }

    pub fn initial_queries(&self, store: &ParamStore) -> (QuerySet, QuerySet) {
        (
            QuerySet {
                data: store.get(self.hand_queries).clone(),
                role: QueryRole::Hand,
                layer: 0,
            },
            QuerySet {
                data: store.get(self.object_queries).clone(),
                role: QueryRole::Object,
                layer: 0,
            },
        )
    }

    fn initial_masks(g: &mut Graph, q: Var, feat: &FeatureMap) -> (Var, Var, MaskStack) {
        let logits = g.matmul_t(q, feat.var);
        let soft = g.sigmoid(logits);
        let bin = MaskStack::from_soft(g.value(soft), feat.frames, feat.h, feat.w);
        (logits, soft, bin)
    }

    /// Full decoder pass on the graph.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, feat: &FeatureMap) -> Result<DecoderVars> {
        if feat.channels != self.cfg.channels {
            return Err(Error::Shape(format!(
                "features have {} channels, decoder expects {}",
                feat.channels, self.cfg.channels
            )));
        }
        let mut hand = p.var(self.hand_queries);
        let mut object = p.var(self.object_queries);
        let (hl, hs, hb) = Self::initial_masks(g, hand, feat);
        let (ol, os, ob) = Self::initial_masks(g, object, feat);
        let mut layers = vec![LayerMasksVars {
            hand_logits: hl,
            hand_soft: hs,
            object_logits: ol,
            object_soft: os,
            hand_binary: hb,
            object_binary: ob,
        }];
        let flags = self.flags();
        for ids in &self.layers {
            let lv = LayerVars {
                h2h: ids.h2h.bind(p),
                h2o: ids.h2o.bind(p),
                o2o: ids.o2o.bind(p),
                o2h: ids.o2h.bind(p),
            };
            let prev = layers.last().expect("initial masks");
            let (mh, mo) = (prev.hand_binary.clone(), prev.object_binary.clone());
            let step = decoder_layer_graph(g, hand, object, &mh, &mo, feat, &lv, flags)?;
            hand = step.hand;
            object = step.object;
            layers.push(LayerMasksVars {
                hand_logits: step.hand_att.mask_logits,
                hand_soft: step.hand_att.soft,
                object_logits: step.object_att.mask_logits,
                object_soft: step.object_att.soft,
                hand_binary: step.hand_att.binary,
                object_binary: step.object_att.binary,
            });
        }
        let cl = g.matmul(object, p.var(self.class_w));
        let class_logits = g.add_row(cl, p.var(self.class_b));
        Ok(DecoderVars {
            layers,
            class_logits,
            hand_queries: hand,
            object_queries: object,
            frames: feat.frames,
            h: feat.h,
            w: feat.w,
            stride: feat.stride,
            clip_hw: feat.clip_hw,
        })
    }
}

/// Runs the decoder on a feature volume with the parameters in `store`.
pub fn forward(feat: &FeatureVolume, decoder: &Decoder, store: &ParamStore) -> Result<DecoderOutput> {
    store.check_finite()?;
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let fm = attention::feature_constant(&mut g, feat);
    let vars = decoder.forward_graph(&mut g, &p, &fm)?;
    Ok(vars.to_output(&g))
}

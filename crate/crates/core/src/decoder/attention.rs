//! Cross-attention between query sets and mask attention onto features.

use ndarray::{Array2, Array4, ArrayView4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureVolume};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryRole {
    Hand,
    Object,
}

/// `N×C` queries of one role after a given layer (0 = learned initialization).
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub data: Array2<f64>,
    pub role: QueryRole,
    pub layer: usize,
}

impl QuerySet {
    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

/// `N` binary masks over a `T×H'×W'` grid, stored as `N × (T·H'·W')`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStack {
    data: Array2<bool>,
    frames: usize,
    h: usize,
    w: usize,
}

impl MaskStack {
    pub fn new(data: Array2<bool>, frames: usize, h: usize, w: usize) -> Result<Self> {
        if data.ncols() != frames * h * w {
            return Err(Error::Shape(format!(
                "mask rows have {} locations, grid {frames}x{h}x{w} has {}",
                data.ncols(),
                frames * h * w
            )));
        }
        Ok(MaskStack { data, frames, h, w })
    }

    pub fn filled(n: usize, frames: usize, h: usize, w: usize, value: bool) -> Self {
        MaskStack {
            data: Array2::from_elem((n, frames * h * w), value),
            frames,
            h,
            w,
        }
    }

    /// From an `N×T×H'×W'` array of 0/1 values; anything else is rejected.
    pub fn from_values(m: ArrayView4<f64>) -> Result<Self> {
        let (n, t, h, w) = m.dim();
        for (idx, &v) in m.indexed_iter() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinary {
                    value: v,
                    position: format!("{idx:?}"),
                });
            }
        }
        let data = m
            .mapv(|v| v == 1.0)
            .into_shape_with_order((n, t * h * w))
            .expect("contiguous masks");
        Ok(MaskStack {
            data,
            frames: t,
            h,
            w,
        })
    }

    /// Thresholds soft masks at `> 0.5`.
    pub fn from_soft(soft: &Array2<f64>, frames: usize, h: usize, w: usize) -> Self {
        MaskStack {
            data: soft.mapv(|v| v > 0.5),
            frames,
            h,
            w,
        }
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    /// `(T, H', W')`
    pub fn grid(&self) -> (usize, usize, usize) {
        (self.frames, self.h, self.w)
    }

    pub fn data(&self) -> &Array2<bool> {
        &self.data
    }

    pub fn to_4d(&self) -> Array4<bool> {
        self.data
            .clone()
            .into_shape_with_order((self.n(), self.frames, self.h, self.w))
            .expect("mask layout")
    }

    /// Additive attention bias, `N × (T·H'·W')`: `0` inside the mask, `-inf`
    /// outside. A query whose mask is empty gets an all-zero row.
    pub fn attention_bias(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.data.dim());
        for (mut orow, mrow) in out.rows_mut().into_iter().zip(self.data.rows()) {
            if mrow.iter().any(|&v| v) {
                orow.zip_mut_with(&mrow, |o, &m| {
                    if !m {
                        *o = f64::NEG_INFINITY;
                    }
                });
            }
        }
        out
    }
}

/// The `{0, -inf}` attention mask laid out as `(T, H', W', N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask4D {
    pub data: Array4<f64>,
}

/// Converts binary masks `N×T×H'×W'` into the additive attention mask.
pub fn attention_mask(m: ArrayView4<f64>) -> Result<AttentionMask4D> {
    let stack = MaskStack::from_values(m)?;
    let (n, t, h, w) = m.dim();
    let bias = stack
        .attention_bias()
        .into_shape_with_order((n, t, h, w))
        .expect("bias layout");
    Ok(AttentionMask4D {
        data: bias.permuted_axes([1, 2, 3, 0]).as_standard_layout().into_owned(),
    })
}

/// One `C→C` affine map `x W + b` (`W` is `in × out`, `b` is `1 × out`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl LinearParams {
    pub fn identity(c: usize) -> Self {
        LinearParams {
            weight: Array2::eye(c),
            bias: Array2::zeros((1, c)),
        }
    }

    pub fn zeros(c: usize) -> Self {
        LinearParams {
            weight: Array2::zeros((c, c)),
            bias: Array2::zeros((1, c)),
        }
    }

    pub fn random(c: usize, rng: &mut impl Rng, std: f64) -> Self {
        let d = Normal::new(0.0, std).expect("valid std");
        LinearParams {
            weight: Array2::from_shape_simple_fn((c, c), || d.sample(rng)),
            bias: Array2::from_shape_simple_fn((1, c), || d.sample(rng)),
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// Query, key and value maps of one attention module.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
}

impl AttentionParams {
    pub fn identity(c: usize) -> Self {
        AttentionParams {
            q: LinearParams::identity(c),
            k: LinearParams::identity(c),
            v: LinearParams::identity(c),
        }
    }

    pub fn random(c: usize, rng: &mut impl Rng, std: f64) -> Self {
        AttentionParams {
            q: LinearParams::random(c, rng, std),
            k: LinearParams::random(c, rng, std),
            v: LinearParams::random(c, rng, std),
        }
    }

    fn check(&self, c: usize) -> Result<()> {
        for (name, l) in [("f_Q", &self.q), ("f_K", &self.k), ("f_V", &self.v)] {
            if l.weight.dim() != (c, c) || l.bias.dim() != (1, c) {
                return Err(Error::Shape(format!("{name} is not a {c}->{c} map")));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("attention map {name}")));
            }
        }
        Ok(())
    }

    fn place(&self, g: &mut Graph) -> AttentionVars {
        let mut lin = |l: &LinearParams| (g.constant(l.weight.clone()), g.constant(l.bias.clone()));
        let (q_w, q_b) = lin(&self.q);
        let (k_w, k_b) = lin(&self.k);
        let (v_w, v_b) = lin(&self.v);
        AttentionVars {
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
        }
    }
}

/// Parameter ids of one attention module inside a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionIds {
    q_w: ParamId,
    q_b: ParamId,
    k_w: ParamId,
    k_b: ParamId,
    v_w: ParamId,
    v_b: ParamId,
}

impl AttentionIds {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        init: AttentionParams,
    ) -> AttentionIds {
        let mut add = |name: &str, v: Array2<f64>| store.add(format!("{prefix}.{name}"), v);
        AttentionIds {
            q_w: add("q.weight", init.q.weight),
            q_b: add("q.bias", init.q.bias),
            k_w: add("k.weight", init.k.weight),
            k_b: add("k.bias", init.k.bias),
            v_w: add("v.weight", init.v.weight),
            v_b: add("v.bias", init.v.bias),
        }
    }

    pub fn bind(&self, p: &Bound) -> AttentionVars {
        AttentionVars {
            q_w: p.var(self.q_w),
            q_b: p.var(self.q_b),
            k_w: p.var(self.k_w),
            k_b: p.var(self.k_b),
            v_w: p.var(self.v_w),
            v_b: p.var(self.v_b),
        }
    }

    pub fn values(&self, store: &ParamStore) -> AttentionParams {
        let lin = |w: ParamId, b: ParamId| LinearParams {
            weight: store.get(w).clone(),
            bias: store.get(b).clone(),
        };
        AttentionParams {
            q: lin(self.q_w, self.q_b),
            k: lin(self.k_w, self.k_b),
            v: lin(self.v_w, self.v_b),
        }
    }
}

/// Graph handles of one attention module.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    q_w: Var,
    q_b: Var,
    k_w: Var,
    k_b: Var,
    v_w: Var,
    v_b: Var,
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// `softmax(f_Q(X) f_K(Y)ᵀ) f_V(Y)`, softmax over the rows of `Y`.
pub fn cross_att_graph(g: &mut Graph, x: Var, y: Var, f: &AttentionVars) -> Var {
    let q = linear(g, x, f.q_w, f.q_b);
    let k = linear(g, y, f.k_w, f.k_b);
    let v = linear(g, y, f.v_w, f.v_b);
    let logits = g.matmul_t(q, k);
    let attn = g.softmax_rows(logits);
    g.matmul(attn, v)
}

/// Result of a mask-attention step on the graph.
#[derive(Debug, Clone)]
pub struct MaskAttVars {
    pub queries: Var,
    /// `N × (T·H'·W')` mask logits `⟨X'_n, F(t,y,x)⟩`.
    pub mask_logits: Var,
    pub soft: Var,
    pub binary: MaskStack,
}

/// `X' = softmax(bias(M) + f_Q(X) f_K(F)ᵀ) f_V(F) + X`, then new masks from `X' Fᵀ`.
pub fn mask_att_graph(
    g: &mut Graph,
    x: Var,
    masks: &MaskStack,
    feat: &FeatureMap,
    f: &AttentionVars,
) -> Result<MaskAttVars> {
    if masks.grid() != (feat.frames, feat.h, feat.w) {
        return Err(Error::Shape(format!(
            "mask grid {:?} does not match feature grid {:?}",
            masks.grid(),
            (feat.frames, feat.h, feat.w)
        )));
    }
    if masks.n() != g.value(x).nrows() {
        return Err(Error::Shape(format!(
            "{} masks for {} queries",
            masks.n(),
            g.value(x).nrows()
        )));
    }
    let q = linear(g, x, f.q_w, f.q_b);
    let k = linear(g, feat.var, f.k_w, f.k_b);
    let v = linear(g, feat.var, f.v_w, f.v_b);
    let logits = g.matmul_t(q, k);
    let logits = g.add_const(logits, &masks.attention_bias());
    let attn = g.softmax_rows(logits);
    let pooled = g.matmul(attn, v);
    let queries = g.add(pooled, x);
    let mask_logits = g.matmul_t(queries, feat.var);
    let soft = g.sigmoid(mask_logits);
    let binary = MaskStack::from_soft(g.value(soft), feat.frames, feat.h, feat.w);
    Ok(MaskAttVars {
        queries,
        mask_logits,
        soft,
        binary,
    })
}

fn check_finite(what: &str, a: &Array2<f64>) -> Result<()> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// Places a feature volume on a graph as constants.
pub(crate) fn feature_constant(g: &mut Graph, feat: &FeatureVolume) -> FeatureMap {
    let (t, h, w, c) = feat.shape();
    let var = g.constant(feat.as_matrix());
    FeatureMap {
        var,
        frames: t,
        h,
        w,
        channels: c,
        stride: feat.stride,
        clip_hw: (h * feat.stride, w * feat.stride),
    }
}

/// Cross-attention drawing information from `y` into `x`; no residual.
pub fn cross_att(x: &QuerySet, y: &QuerySet, f: &AttentionParams) -> Result<QuerySet> {
    check_finite("cross_att X", &x.data)?;
    check_finite("cross_att Y", &y.data)?;
    if x.channels() != y.channels() {
        return Err(Error::Shape(format!(
            "X has {} channels, Y has {}",
            x.channels(),
            y.channels()
        )));
    }
    f.check(x.channels())?;
    let mut g = Graph::new();
    let xv = g.constant(x.data.clone());
    let yv = g.constant(y.data.clone());
    let fv = f.place(&mut g);
    let out = cross_att_graph(&mut g, xv, yv, &fv);
    Ok(QuerySet {
        data: g.value(out).clone(),
        role: x.role,
        layer: x.layer,
    })
}

/// Output of [`mask_att`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskAttOutput {
    pub queries: QuerySet,
    pub binary: MaskStack,
    /// `N × (T·H'·W')` values in `[0, 1]`.
    pub soft: Array2<f64>,
}

/// Masked attention of queries onto features with a residual update.
pub fn mask_att(
    x: &QuerySet,
    masks: &MaskStack,
    feat: &FeatureVolume,
    f: &AttentionParams,
) -> Result<MaskAttOutput> {
    check_finite("mask_att X", &x.data)?;
    if feat.shape().3 != x.channels() {
        return Err(Error::Shape(format!(
            "features have {} channels, queries {}",
            feat.shape().3,
            x.channels()
        )));
    }
    f.check(x.channels())?;
    let mut g = Graph::new();
    let fm = feature_constant(&mut g, feat);
    let xv = g.constant(x.data.clone());
    let fv = f.place(&mut g);
    let out = mask_att_graph(&mut g, xv, masks, &fm, &fv)?;
    Ok(MaskAttOutput {
        queries: QuerySet {
            data: g.value(out.queries).clone(),
            role: x.role,
            layer: x.layer,
        },
        binary: out.binary,
        soft: g.value(out.soft).clone(),
    })
}

/// Places value-level attention parameters on a graph (used by composition checks).
pub(crate) fn place_params(g: &mut Graph, f: &AttentionParams) -> AttentionVars {
    f.place(g)
}

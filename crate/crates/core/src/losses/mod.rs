//! Training objective: set matching plus class, mask and dice terms for
//! hands, objects and their contact region, applied at every decoder layer.

mod contact;
mod hungarian;
mod pointwise;
mod targets;

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use contact::{contact_mask, dilate};
pub use hungarian::{hungarian, MatchResult};
pub use pointwise::{bce_mask_loss, class_loss, dice_loss, CLASS_NO_OBJECT, CLASS_TRACK};
pub use targets::{build_targets, TrackTarget};

use crate::autodiff::{Graph, PoolGeom, Var, PROB_EPS};
use crate::decoder::{DecoderOutput, DecoderVars};
use crate::error::{Error, Result};
use pointwise::class_weights;
use targets::stack_rows;

/// Multipliers of the six mask/dice terms and the no-object class weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Hand mask BCE.
    pub lambda1: f64,
    /// Object mask BCE.
    pub lambda2: f64,
    /// Contact mask BCE.
    pub lambda3: f64,
    /// Hand dice.
    pub lambda4: f64,
    /// Object dice.
    pub lambda5: f64,
    /// Contact dice.
    pub lambda6: f64,
    pub no_object_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.001,
            lambda2: 5.0,
            lambda3: 0.001,
            lambda4: 0.001,
            lambda5: 5.0,
            lambda6: 0.001,
            no_object_weight: 0.1,
        }
    }
}

impl LossWeights {
    /// `[λ1, …, λ6]`
    pub fn lambdas(&self) -> [f64; 6] {
        [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
        ]
    }

    /// Contact terms are skipped entirely when both of their weights are zero.
    pub fn contact_enabled(&self) -> bool {
        self.lambda3 != 0.0 || self.lambda6 != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.lambdas().into_iter().chain([self.no_object_weight]);
        for (i, v) in all.enumerate() {
            if !(v.is_finite() && v >= 0.0) {
                let name = if i < 6 {
                    format!("lambda{}", i + 1)
                } else {
                    "no_object_weight".to_string()
                };
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss weights plus the geometric settings the terms depend on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Dilation radius of the contact region, in feature cells.
    pub contact_radius: usize,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            contact_radius: 2,
            dice_eps: 1.0,
        }
    }
}

/// Component values (summed over layers) and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub mask_h: f64,
    pub mask_o: f64,
    pub mask_c: f64,
    pub dice_h: f64,
    pub dice_o: f64,
    pub dice_c: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Combines components as `cls + Σ λ_i · term_i`, in the order
    /// `[mask_h, mask_o, mask_c, dice_h, dice_o, dice_c]`.
    pub fn from_components(cls: f64, terms: [f64; 6], w: &LossWeights) -> Self {
        let lambdas = w.lambdas();
        let mut total = cls;
        for (l, t) in lambdas.iter().zip(terms) {
            total += l * t;
        }
        LossBreakdown {
            cls,
            mask_h: terms[0],
            mask_o: terms[1],
            mask_c: terms[2],
            dice_h: terms[3],
            dice_o: terms[4],
            dice_c: terms[5],
            total,
        }
    }

    pub fn terms(&self) -> [f64; 6] {
        [
            self.mask_h,
            self.mask_o,
            self.mask_c,
            self.dice_h,
            self.dice_o,
            self.dice_c,
        ]
    }

    /// `λ_i · term_i` for each term.
    pub fn weighted_terms(&self, w: &LossWeights) -> [f64; 6] {
        let l = w.lambdas();
        let t = self.terms();
        std::array::from_fn(|i| l[i] * t[i])
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.cls.is_finite() && self.terms().iter().all(|v| v.is_finite())
    }
}

fn check_targets(grid: (usize, usize, usize), targets: &[TrackTarget]) -> Result<()> {
    for t in targets {
        if t.grid() != grid || t.hand.shape() != grid || t.contact.shape() != grid {
            return Err(Error::Shape(format!(
                "target grid {:?} does not match decoder grid {grid:?}",
                t.grid()
            )));
        }
    }
    Ok(())
}

fn pool_geom(grid: (usize, usize, usize), r: usize) -> PoolGeom {
    PoolGeom {
        frames: grid.0,
        h: grid.1,
        w: grid.2,
        radius: r,
    }
}

/// Soft contact prediction: per-row max filters of both masks, multiplied.
fn soft_contact(g: &mut Graph, hand: Var, object: Var, geom: PoolGeom) -> Var {
    let a = g.max_pool(hand, geom);
    let b = g.max_pool(object, geom);
    g.mul(a, b)
}

/// `K × N` mean BCE between probabilities `p` (N×L) and binary targets `y` (K×L).
fn bce_cost(p: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let l = p.ncols() as f64;
    let log_p = p.mapv(|v| v.clamp(PROB_EPS, 1.0 - PROB_EPS).ln());
    let log_q = p.mapv(|v| (1.0 - v.clamp(PROB_EPS, 1.0 - PROB_EPS)).ln());
    let diff = &log_p - &log_q;
    let base = log_q.sum_axis(ndarray::Axis(1));
    let mut cost = y.dot(&diff.t());
    for mut row in cost.rows_mut() {
        for (c, b) in row.iter_mut().zip(base.iter()) {
            *c = -(*c + b) / l;
        }
    }
    cost
}

/// `K × N` mean BCE from logits `z` (N×L).
fn bce_logit_cost(z: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let l = z.ncols() as f64;
    let base = z.mapv(crate::autodiff::softplus).sum_axis(ndarray::Axis(1));
    let mut cost = y.dot(&z.t());
    for mut row in cost.rows_mut() {
        for (c, b) in row.iter_mut().zip(base.iter()) {
            *c = (b - *c) / l;
        }
    }
    cost
}

/// `K × N` dice loss.
fn dice_cost(p: &Array2<f64>, y: &Array2<f64>, eps: f64) -> Array2<f64> {
    let inter = y.dot(&p.t());
    let ps = p.sum_axis(ndarray::Axis(1));
    let ys = y.sum_axis(ndarray::Axis(1));
    Array2::from_shape_fn(inter.dim(), |(j, q)| {
        1.0 - (2.0 * inter[[j, q]] + eps) / (ps[q] + ys[j] + eps)
    })
}

/// Matching cost between every target (rows) and query (columns) at the final layer.
pub fn matching_cost(out: &DecoderOutput, targets: &[TrackTarget], cfg: &LossConfig) -> Result<Array2<f64>> {
    check_targets(out.grid, targets)?;
    let last = out.final_layer();
    let n = last.object_soft.nrows();
    let len = last.object_soft.ncols();
    let w = &cfg.weights;
    let probs = out.track_probs();
    let mut cost = Array2::from_shape_fn((targets.len(), n), |(_, q)| -probs[q]);
    if targets.is_empty() {
        return Ok(cost);
    }
    let yh = stack_rows(targets.iter().map(|t| &t.hand), len);
    let yo = stack_rows(targets.iter().map(|t| &t.object), len);
    cost.scaled_add(w.lambda1, &bce_logit_cost(&last.hand_logits, &yh));
    cost.scaled_add(w.lambda2, &bce_logit_cost(&last.object_logits, &yo));
    cost.scaled_add(w.lambda4, &dice_cost(&last.hand_soft, &yh, cfg.dice_eps));
    cost.scaled_add(w.lambda5, &dice_cost(&last.object_soft, &yo, cfg.dice_eps));
    if w.contact_enabled() {
        let yc = stack_rows(targets.iter().map(|t| &t.contact), len);
        let mut g = Graph::new();
        let hs = g.constant(last.hand_soft.clone());
        let os = g.constant(last.object_soft.clone());
        let pc = soft_contact(&mut g, hs, os, pool_geom(out.grid, cfg.contact_radius));
        let pc = g.value(pc);
        cost.scaled_add(w.lambda3, &bce_cost(pc, &yc));
        cost.scaled_add(w.lambda6, &dice_cost(pc, &yc, cfg.dice_eps));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matching cost".into()));
    }
    Ok(cost)
}

/// Assigns every target to a distinct query by minimum matching cost.
pub fn match_tracks(out: &DecoderOutput, targets: &[TrackTarget], cfg: &LossConfig) -> Result<MatchResult> {
    hungarian(&matching_cost(out, targets, cfg)?)
}

/// Per-layer mask variables the loss reads.
#[derive(Debug, Clone, Copy)]
struct LayerInputs {
    hand_logits: Var,
    hand_soft: Var,
    object_logits: Var,
    object_soft: Var,
}

/// The loss as a graph node plus its decomposition.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

fn loss_on_graph(
    g: &mut Graph,
    layers: &[LayerInputs],
    class_logits: Var,
    grid: (usize, usize, usize),
    targets: &[TrackTarget],
    matching: &MatchResult,
    cfg: &LossConfig,
) -> Result<LossVars> {
    check_targets(grid, targets)?;
    let w = &cfg.weights;
    let n = g.value(class_logits).nrows();
    if matching.assignment.len() != targets.len() {
        return Err(Error::Shape(format!(
            "matching covers {} targets, got {}",
            matching.assignment.len(),
            targets.len()
        )));
    }
    if matching.assignment.iter().any(|&q| q >= n) {
        return Err(Error::Shape(format!("matching refers to a query >= {n}")));
    }
    let mut classes = vec![CLASS_NO_OBJECT; n];
    for &q in &matching.assignment {
        classes[q] = CLASS_TRACK;
    }
    let weights = class_weights(&classes, w.no_object_weight);
    let cls = g.softmax_ce(class_logits, classes, weights);

    // [mask_h, mask_o, mask_c, dice_h, dice_o, dice_c] summed over layers
    let mut terms: [Option<Var>; 6] = [None; 6];
    if !targets.is_empty() {
        let len = grid.0 * grid.1 * grid.2;
        let yh = Rc::new(stack_rows(targets.iter().map(|t| &t.hand), len));
        let yo = Rc::new(stack_rows(targets.iter().map(|t| &t.object), len));
        let yc = Rc::new(stack_rows(targets.iter().map(|t| &t.contact), len));
        let idx = Rc::new(matching.assignment.clone());
        let geom = pool_geom(grid, cfg.contact_radius);
        for layer in layers {
            let hl = g.gather_rows(layer.hand_logits, idx.clone());
            let hs = g.gather_rows(layer.hand_soft, idx.clone());
            let ol = g.gather_rows(layer.object_logits, idx.clone());
            let os = g.gather_rows(layer.object_soft, idx.clone());
            let mut layer_terms = vec![
                (0, g.bce_logits(hl, yh.clone())),
                (1, g.bce_logits(ol, yo.clone())),
                (3, g.dice_rows(hs, yh.clone(), cfg.dice_eps)),
                (4, g.dice_rows(os, yo.clone(), cfg.dice_eps)),
            ];
            if w.contact_enabled() {
                let pc = soft_contact(g, hs, os, geom);
                layer_terms.push((2, g.bce_prob(pc, yc.clone())));
                layer_terms.push((5, g.dice_rows(pc, yc.clone(), cfg.dice_eps)));
            }
            for (i, v) in layer_terms {
                terms[i] = Some(match terms[i] {
                    Some(acc) => g.add(acc, v),
                    None => v,
                });
            }
        }
    }
    let lambdas = w.lambdas();
    let mut total = cls;
    let mut values = [0.0; 6];
    for i in 0..6 {
        if let Some(v) = terms[i] {
            values[i] = g.scalar(v);
            let s = g.scale(v, lambdas[i]);
            total = g.add(total, s);
        }
    }
    let breakdown = LossBreakdown::from_components(g.scalar(cls), values, w);
    Ok(LossVars { total, breakdown })
}

/// Builds the training loss for decoder variables on `g`.
pub fn total_loss_graph(
    g: &mut Graph,
    vars: &DecoderVars,
    targets: &[TrackTarget],
    matching: &MatchResult,
    cfg: &LossConfig,
) -> Result<LossVars> {
    let layers: Vec<LayerInputs> = vars
        .layers
        .iter()
        .map(|l| LayerInputs {
            hand_logits: l.hand_logits,
            hand_soft: l.hand_soft,
            object_logits: l.object_logits,
            object_soft: l.object_soft,
        })
        .collect();
    let grid = (vars.frames, vars.h, vars.w);
    loss_on_graph(g, &layers, vars.class_logits, grid, targets, matching, cfg)
}

/// Loss of a value-level decoder output under a given matching.
pub fn total_loss(
    out: &DecoderOutput,
    targets: &[TrackTarget],
    matching: &MatchResult,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let layers: Vec<LayerInputs> = out
        .layers
        .iter()
        .map(|l| LayerInputs {
            hand_logits: g.constant(l.hand_logits.clone()),
            hand_soft: g.constant(l.hand_soft.clone()),
            object_logits: g.constant(l.object_logits.clone()),
            object_soft: g.constant(l.object_soft.clone()),
        })
        .collect();
    let cl = g.constant(out.class_logits.clone());
    Ok(loss_on_graph(&mut g, &layers, cl, out.grid, targets, matching, cfg)?.breakdown)
}

//! Toy backbone + pixel decoder: per-frame convolutions to a single stride,
//! plus sinusoidal spatial and learned per-frame temporal encodings.

use std::rc::Rc;

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, Graph, Var};
use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureNetConfig {
    /// Output channels `C`.
    pub channels: usize,
    /// Output stride; a power of two.
    pub stride: usize,
    pub temporal_encoding: bool,
    /// Rows of the learned temporal embedding; clips may not be longer.
    pub max_frames: usize,
    /// Amplitude of the sinusoidal spatial encoding.
    pub spatial_encoding_scale: f64,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        FeatureNetConfig {
            channels: 64,
            stride: 4,
            temporal_encoding: true,
            max_frames: 32,
            spatial_encoding_scale: 1.0,
        }
    }
}

/// Dense features as a `T×H'×W'×C` array.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub data: Array4<f64>,
    pub stride: usize,
}

impl FeatureVolume {
    /// `(T, H', W', C)`
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    /// Rows are `(t, y, x)` locations, columns are channels.
    pub fn as_matrix(&self) -> Array2<f64> {
        let (t, h, w, c) = self.data.dim();
        self.data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((t * h * w, c))
            .expect("contiguous features")
    }
}

/// Feature matrix on a graph together with its spatial layout.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    /// `(T·H'·W') × C`
    pub var: Var,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub stride: usize,
    /// Clip size before padding.
    pub clip_hw: (usize, usize),
}

impl FeatureMap {
    pub fn locations(&self) -> usize {
        self.frames * self.h * self.w
    }

    pub fn to_volume(&self, g: &Graph) -> FeatureVolume {
        let data = g
            .value(self.var)
            .clone()
            .into_shape_with_order((self.frames, self.h, self.w, self.channels))
            .expect("feature layout");
        FeatureVolume {
            data,
            stride: self.stride,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    cin: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
}

#[derive(Debug, Clone)]
pub struct FeatureNet {
    cfg: FeatureNetConfig,
    convs: Vec<ConvLayer>,
    proj_w: ParamId,
    proj_b: ParamId,
    temporal: ParamId,
}

fn normal(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Sinusoidal encoding of `(y, x)` on an `h×w` grid, `channels` wide.
pub fn spatial_encoding(h: usize, w: usize, channels: usize) -> Array2<f64> {
    let q = (channels / 4).max(1);
    Array2::from_shape_fn((h * w, channels), |(r, c)| {
        let (y, x) = ((r / w) as f64, (r % w) as f64);
        let group = c / q;
        let i = (c % q) as f64;
        let omega = 100f64.powf(-i / q as f64);
        match group {
            0 => (y * omega).sin(),
            1 => (y * omega).cos(),
            2 => (x * omega).sin(),
            3 => (x * omega).cos(),
            _ => 0.0,
        }
    })
}

/// Reflect-pads `len` up to a multiple of `stride`; returns the source index map.
fn reflect_index(len: usize, stride: usize) -> Vec<usize> {
    let padded = len.div_ceil(stride) * stride;
    (0..padded)
        .map(|i| if i < len { i } else { 2 * (len - 1) - i })
        .collect()
}

impl FeatureNet {
    /// Registers the network's parameters in `store`, drawing from `rng`.
    pub fn new(cfg: FeatureNetConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if cfg.stride == 0 || !cfg.stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "stride must be a power of two, got {}",
                cfg.stride
            )));
        }
        if cfg.channels < 4 {
            return Err(Error::Config("feature channels must be at least 4".into()));
        }
        let c = cfg.channels;
        let n_down = cfg.stride.trailing_zeros() as usize;
        // (cin, cout, stride, dilation)
        let mut plan = Vec::new();
        let mut cin = 3;
        for i in 0..n_down.max(1) {
            let cout = if i == 0 { c / 2 } else { c };
            plan.push((cin, cout, if i < n_down { 2 } else { 1 }, 1));
            cin = cout;
        }
        plan.push((cin, c, 1, 2));
        plan.push((c, c, 1, 4));
        let mut convs = Vec::with_capacity(plan.len());
        for (i, &(cin, cout, stride, dilation)) in plan.iter().enumerate() {
            let fan_in = 9 * cin;
            let weight = store.add(
                format!("feature.conv{i}.weight"),
                normal(rng, (fan_in, cout), (2.0 / fan_in as f64).sqrt()),
            );
            let bias = store.add(format!("feature.conv{i}.bias"), Array2::zeros((1, cout)));
            convs.push(ConvLayer {
                weight,
                bias,
                cin,
                kernel: 3,
                stride,
                dilation,
            });
        }
        let proj_w = store.add(
            "feature.proj.weight",
            normal(rng, (c, c), (1.0 / c as f64).sqrt()),
        );
        let proj_b = store.add("feature.proj.bias", Array2::zeros((1, c)));
        let temporal = store.add(
            "feature.temporal",
            normal(rng, (cfg.max_frames.max(1), c), 0.2),
        );
        Ok(FeatureNet {
            cfg,
            convs,
            proj_w,
            proj_b,
            temporal,
        })
    }

    pub fn config(&self) -> &FeatureNetConfig {
        &self.cfg
    }

    /// Runs the network on `clip`, padding it to a multiple of the stride.
    pub fn forward(&self, g: &mut Graph, p: &Bound, clip: &VideoClip) -> Result<FeatureMap> {
        let (t, h, w) = clip.shape();
        if t == 0 || h < 16 || w < 16 {
            return Err(Error::Shape(format!(
                "clip {} is {t}x{h}x{w}; need T >= 1 and H, W >= 16",
                clip.clip_id
            )));
        }
        if self.cfg.temporal_encoding && t > self.cfg.max_frames {
            return Err(Error::Config(format!(
                "clip has {t} frames but the temporal embedding holds {}",
                self.cfg.max_frames
            )));
        }
        let s = self.cfg.stride;
        let ys = reflect_index(h, s);
        let xs = reflect_index(w, s);
        let (hp, wp) = (ys.len(), xs.len());
        let mut input = Array2::<f64>::zeros((t * hp * wp, 3));
        for ti in 0..t {
            for (y, &sy) in ys.iter().enumerate() {
                for (x, &sx) in xs.iter().enumerate() {
                    let r = (ti * hp + y) * wp + x;
                    for ch in 0..3 {
                        input[[r, ch]] = (clip.frames[[ti, sy, sx, ch]] as f64 / 255.0 - 0.5) * 4.0;
                    }
                }
            }
        }
        let mut x = g.constant(input);
        let (mut ch, mut cw) = (hp, wp);
        for layer in &self.convs {
            let geom = ConvGeom {
                frames: t,
                h: ch,
                w: cw,
                channels: layer.cin,
                kernel: layer.kernel,
                stride: layer.stride,
                dilation: layer.dilation,
                pad: layer.dilation * (layer.kernel - 1) / 2,
            };
            let cols = g.im2col(x, geom);
            let y = g.matmul(cols, p.var(layer.weight));
            let y = g.add_row(y, p.var(layer.bias));
            x = g.silu(y);
            (ch, cw) = geom.out_hw();
        }
        let y = g.matmul(x, p.var(self.proj_w));
        let mut y = g.add_row(y, p.var(self.proj_b));
        let c = self.cfg.channels;
        if self.cfg.spatial_encoding_scale != 0.0 {
            let pe = spatial_encoding(ch, cw, c) * self.cfg.spatial_encoding_scale;
            let mut full = Array2::<f64>::zeros((t * ch * cw, c));
            for ti in 0..t {
                full.slice_mut(ndarray::s![ti * ch * cw..(ti + 1) * ch * cw, ..])
                    .assign(&pe);
            }
            y = g.add_const(y, &full);
        }
        if self.cfg.temporal_encoding {
            let idx: Vec<usize> = (0..t * ch * cw).map(|r| r / (ch * cw)).collect();
            let temb = g.gather_rows(p.var(self.temporal), Rc::new(idx));
            y = g.add(y, temb);
        }
        Ok(FeatureMap {
            var: y,
            frames: t,
            h: ch,
            w: cw,
            channels: c,
            stride: s,
            clip_hw: (h, w),
        })
    }
}

/// Computes features for a clip with the parameters in `store`.
pub fn extract_features(
    clip: &VideoClip,
    net: &FeatureNet,
    store: &ParamStore,
) -> Result<FeatureVolume> {
    store.check_finite()?;
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let fm = net.forward(&mut g, &p, clip)?;
    Ok(fm.to_volume(&g))
}

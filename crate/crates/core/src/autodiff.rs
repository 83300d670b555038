//! Reverse-mode automatic differentiation over dense 2D `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough saved state to run its backward rule. Leaves are either
//! parameters (gradients requested) or constants.

use std::rc::Rc;

use ndarray::{Array2, Axis, Zip};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sliding-window geometry for [`Graph::im2col`].
///
/// Input rows are `frames × h × w` pixels (row-major within a frame) and
/// columns are channels. Output rows are output pixels, columns are
/// `(ky, kx, channel)` taps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        (
            (self.h + 2 * self.pad - span) / self.stride + 1,
            (self.w + 2 * self.pad - span) / self.stride + 1,
        )
    }
}

/// Geometry for [`Graph::max_pool`]: each row is a `frames × h × w` volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub radius: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Silu(Var),
    SoftmaxRows(Var),
    GatherRows(Var, Rc<Vec<usize>>),
    Im2Col(Var, ConvGeom),
    MaxPool(Var, Vec<usize>),
    Sum(Var),
    BceLogits(Var, Rc<Array2<f64>>),
    BceProb(Var, Rc<Array2<f64>>),
    DiceRows(Var, Rc<Array2<f64>>, f64),
    SoftmaxCe(Var, Vec<usize>, Vec<f64>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every leaf that asked for one.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×n row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// Adds a constant (no gradient flows into `c`; `-inf` entries are allowed).
    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddConst(a), &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    /// Row-wise softmax. Every row needs at least one finite entry.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            softmax_row_inplace(row.as_slice_mut().expect("standard layout"));
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Output row `i` is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let v = self.value(a).select(Axis(0), &idx);
        self.push(v, Op::GatherRows(a, idx), &[a])
    }

    pub fn im2col(&mut self, a: Var, geom: ConvGeom) -> Var {
        let v = im2col_forward(self.value(a), &geom);
        self.push(v, Op::Im2Col(a, geom), &[a])
    }

    /// Per-frame square max filter of radius `geom.radius`, stride 1, borders clipped.
    pub fn max_pool(&mut self, a: Var, geom: PoolGeom) -> Var {
        let (v, arg) = max_pool_forward(self.value(a), &geom);
        self.push(v, Op::MaxPool(a, arg), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
    pub fn bce_logits(&mut self, logits: Var, target: Rc<Array2<f64>>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), target.dim(), "bce_logits shape mismatch");
        let n = z.len() as f64;
        let mut s = 0.0;
        Zip::from(z).and(&*target).for_each(|&z, &y| {
            s += softplus(z) - z * y;
        });
        let v = Array2::from_elem((1, 1), s / n);
        self.push(v, Op::BceLogits(logits, target), &[logits])
    }

    /// Mean binary cross-entropy of probabilities against `target`.
    pub fn bce_prob(&mut self, p: Var, target: Rc<Array2<f64>>) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), target.dim(), "bce_prob shape mismatch");
        let n = pv.len() as f64;
        let mut s = 0.0;
        Zip::from(pv).and(&*target).for_each(|&p, &y| {
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            s -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        });
        let v = Array2::from_elem((1, 1), s / n);
        self.push(v, Op::BceProb(p, target), &[p])
    }

    /// Mean over rows of `1 - (2Σpy + eps) / (Σp + Σy + eps)`.
    pub fn dice_rows(&mut self, p: Var, target: Rc<Array2<f64>>, eps: f64) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), target.dim(), "dice_rows shape mismatch");
        let k = pv.nrows() as f64;
        let mut s = 0.0;
        for (pr, yr) in pv.rows().into_iter().zip(target.rows()) {
            let inter = pr.dot(&yr);
            let total = pr.sum() + yr.sum();
            s += 1.0 - (2.0 * inter + eps) / (total + eps);
        }
        let v = Array2::from_elem((1, 1), s / k);
        self.push(v, Op::DiceRows(p, target, eps), &[p])
    }

    /// Weighted softmax cross-entropy: `Σ w_i CE_i / Σ w_i`.
    pub fn softmax_ce(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), targets.len());
        assert_eq!(z.nrows(), weights.len());
        let wsum: f64 = weights.iter().sum();
        let mut s = 0.0;
        for ((row, &t), &w) in z.rows().into_iter().zip(&targets).zip(&weights) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            s += w * (lse - row[t]);
        }
        let v = Array2::from_elem((1, 1), if wsum > 0.0 { s / wsum } else { 0.0 });
        self.push(v, Op::SoftmaxCe(logits, targets, weights), &[logits])
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(&g));
                }
            }
            Op::MatMulT(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.dot(self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.t().dot(self.value(*a)));
                }
            }
            Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*row) {
                    accumulate(&mut grads[row.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g);
                }
            }
            Op::AddConst(a) => accumulate(&mut grads[a.0], g),
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], &g * self.value(*b));
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], &g * self.value(*a));
                }
            }
            Op::Scale(a, s) => accumulate(&mut grads[a.0], g * *s),
            Op::Sigmoid(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                accumulate(&mut grads[a.0], d);
            }
            Op::Silu(a) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    let s = sigmoid(x);
                    *d *= s * (1.0 + x * (1.0 - s));
                });
                accumulate(&mut grads[a.0], d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.dot(&yrow);
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &yv| *dv = yv * (*dv - dot));
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let mut d = Array2::zeros(src.dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = d.row_mut(i);
                    dst += &g.row(r);
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Im2Col(a, geom) => {
                accumulate(&mut grads[a.0], im2col_backward(&g, geom));
            }
            Op::MaxPool(a, arg) => {
                let src = self.value(*a);
                let mut d = Array2::<f64>::zeros(src.dim());
                let cols = src.ncols();
                {
                    let ds = d.as_slice_mut().expect("standard layout");
                    for (r, grow) in g.rows().into_iter().enumerate() {
                        for (c, &gv) in grow.iter().enumerate() {
                            ds[r * cols + arg[r * cols + c]] += gv;
                        }
                    }
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::Sum(a) => {
                let s = g[[0, 0]];
                accumulate(&mut grads[a.0], Array2::from_elem(self.value(*a).dim(), s));
            }
            Op::BceLogits(a, target) => {
                let z = self.value(*a);
                let s = g[[0, 0]] / z.len() as f64;
                let mut d = Array2::zeros(z.dim());
                Zip::from(&mut d)
                    .and(z)
                    .and(&**target)
                    .for_each(|d, &z, &y| *d = s * (sigmoid(z) - y));
                accumulate(&mut grads[a.0], d);
            }
            Op::BceProb(a, target) => {
                let p = self.value(*a);
                let s = g[[0, 0]] / p.len() as f64;
                let mut d = Array2::zeros(p.dim());
                Zip::from(&mut d)
                    .and(p)
                    .and(&**target)
                    .for_each(|d, &p, &y| {
                        *d = if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                            0.0
                        } else {
                            s * (-y / p + (1.0 - y) / (1.0 - p))
                        };
                    });
                accumulate(&mut grads[a.0], d);
            }
            Op::DiceRows(a, target, eps) => {
                let p = self.value(*a);
                let k = p.nrows() as f64;
                let s = g[[0, 0]] / k;
                let mut d = Array2::zeros(p.dim());
                for ((mut drow, prow), yrow) in
                    d.rows_mut().into_iter().zip(p.rows()).zip(target.rows())
                {
                    let inter = prow.dot(&yrow);
                    let denom = prow.sum() + yrow.sum() + eps;
                    let num = 2.0 * inter + eps;
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &y| {
                        *dv = -s * (2.0 * y * denom - num) / (denom * denom);
                    });
                }
                accumulate(&mut grads[a.0], d);
            }
            Op::SoftmaxCe(a, targets, weights) => {
                let z = self.value(*a);
                let wsum: f64 = weights.iter().sum();
                let mut d = z.clone();
                if wsum > 0.0 {
                    let s = g[[0, 0]] / wsum;
                    for ((mut row, &t), &w) in d.rows_mut().into_iter().zip(targets).zip(weights)
                    {
                        softmax_row_inplace(row.as_slice_mut().expect("standard layout"));
                        row[t] -= 1.0;
                        row *= s * w;
                    }
                } else {
                    d.fill(0.0);
                }
                accumulate(&mut grads[a.0], d);
            }
        }
    }
}

fn im2col_forward(x: &Array2<f64>, g: &ConvGeom) -> Array2<f64> {
    assert_eq!(x.nrows(), g.frames * g.h * g.w, "im2col row count");
    assert_eq!(x.ncols(), g.channels, "im2col channel count");
    let (oh, ow) = g.out_hw();
    let taps = g.kernel * g.kernel;
    let c = g.channels;
    let mut out = Array2::<f64>::zeros((g.frames * oh * ow, taps * c));
    let xs = x.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    let row_len = taps * c;
    for f in 0..g.frames {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = ((f * oh + oy) * ow + ox) * row_len;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((f * g.h + iy as usize) * g.w + ix as usize) * c;
                        let dst = orow + (ky * g.kernel + kx) * c;
                        os[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

fn im2col_backward(gcol: &Array2<f64>, g: &ConvGeom) -> Array2<f64> {
    let (oh, ow) = g.out_hw();
    let c = g.channels;
    let row_len = g.kernel * g.kernel * c;
    let mut dx = Array2::<f64>::zeros((g.frames * g.h * g.w, c));
    let gs = gcol.as_slice().expect("standard layout");
    let ds = dx.as_slice_mut().expect("standard layout");
    for f in 0..g.frames {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = ((f * oh + oy) * ow + ox) * row_len;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((f * g.h + iy as usize) * g.w + ix as usize) * c;
                        let src = orow + (ky * g.kernel + kx) * c;
                        for (d, s) in ds[dst..dst + c].iter_mut().zip(&gs[src..src + c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn max_pool_forward(x: &Array2<f64>, g: &PoolGeom) -> (Array2<f64>, Vec<usize>) {
    let plane = g.h * g.w;
    assert_eq!(x.ncols(), g.frames * plane, "max_pool column count");
    let r = g.radius as isize;
    let mut out = Array2::<f64>::zeros(x.dim());
    let mut arg = vec![0usize; x.len()];
    let cols = x.ncols();
    for (ri, row) in x.rows().into_iter().enumerate() {
        let row = row.as_slice().expect("standard layout");
        for f in 0..g.frames {
            let base = f * plane;
            for y in 0..g.h as isize {
                for xx in 0..g.w as isize {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for yy in (y - r).max(0)..=(y + r).min(g.h as isize - 1) {
                        for xq in (xx - r).max(0)..=(xx + r).min(g.w as isize - 1) {
                            let i = base + yy as usize * g.w + xq as usize;
                            if row[i] > best {
                                best = row[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = base + y as usize * g.w + xx as usize;
                    out[[ri, o]] = best;
                    arg[ri * cols + o] = best_i;
                }
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` at every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut out = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                out[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
            }
        }
        out
    }

    fn check(x: Array2<f64>, build: &dyn Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        let numeric = numeric_grad(&x, &|xv| {
            let mut g = Graph::new();
            let v = g.param(xv.clone());
            let o = build(&mut g, v);
            g.scalar(o)
        });
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!(
                (a - n).abs() <= 1e-6 * (1.0 + a.abs().max(n.abs())),
                "analytic {a} numeric {n}"
            );
        }
    }

    #[test]
    fn matmul_and_friends() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = rand_mat(&mut rng, 4, 3);
        let row = rand_mat(&mut rng, 1, 3);
        check(rand_mat(&mut rng, 2, 4), &|g, x| {
            let bc = g.constant(b.clone());
            let m = g.matmul(x, bc);
            let r = g.param(row.clone());
            let m = g.add_row(m, r);
            let m = g.silu(m);
            let t = g.matmul_t(m, m);
            let t = g.transpose(t);
            let s = g.sigmoid(t);
            let s = g.scale(s, 1.7);
            g.sum(s)
        });
    }

    #[test]
    fn softmax_with_masked_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_mat(&mut rng, 3, 5);
        let mut bias = Array2::zeros((3, 5));
        bias[[0, 1]] = f64::NEG_INFINITY;
        bias[[2, 4]] = f64::NEG_INFINITY;
        check(rand_mat(&mut rng, 3, 5), &|g, x| {
            let m = g.add_const(x, &bias);
            let s = g.softmax_rows(m);
            let wc = g.constant(w.clone());
            let p = g.mul(s, wc);
            g.sum(p)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_fn((3, 7), |(i, j)| (i * j) as f64 * 0.3));
        let s = g.softmax_rows(x);
        for row in g.value(s).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_and_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = ConvGeom {
            frames: 2,
            h: 5,
            w: 4,
            channels: 2,
            kernel: 3,
            stride: 2,
            dilation: 1,
            pad: 1,
        };
        let (oh, ow) = geom.out_hw();
        let w = rand_mat(&mut rng, 2 * oh * ow, 18);
        check(rand_mat(&mut rng, 40, 2), &|g, x| {
            let c = g.im2col(x, geom);
            let wc = g.constant(w.clone());
            let p = g.mul(c, wc);
            let idx = Rc::new(vec![0, 3, 3, 1]);
            let r = g.gather_rows(p, idx);
            let r = g.silu(r);
            g.sum(r)
        });
    }

    #[test]
    fn dilated_im2col_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geom = ConvGeom {
            frames: 1,
            h: 7,
            w: 6,
            channels: 1,
            kernel: 3,
            stride: 1,
            dilation: 2,
            pad: 2,
        };
        let x = rand_mat(&mut rng, 42, 1);
        let k = rand_mat(&mut rng, 9, 1);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let cols = g.im2col(xv, geom);
        let kv = g.constant(k.clone());
        let y = g.matmul(cols, kv);
        let y = g.value(y);
        for oy in 0..7isize {
            for ox in 0..6isize {
                let mut acc = 0.0;
                for ky in 0..3isize {
                    for kx in 0..3isize {
                        let (iy, ix) = (oy + 2 * ky - 2, ox + 2 * kx - 2);
                        if (0..7).contains(&iy) && (0..6).contains(&ix) {
                            acc += x[[(iy * 6 + ix) as usize, 0]] * k[[(ky * 3 + kx) as usize, 0]];
                        }
                    }
                }
                assert!((acc - y[[(oy * 6 + ox) as usize, 0]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn losses_have_correct_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = Rc::new(Array2::from_shape_fn((3, 6), |_| {
            if rng.random_bool(0.4) {
                1.0
            } else {
                0.0
            }
        }));
        let t1 = target.clone();
        check(rand_mat(&mut rng, 3, 6), &move |g, x| g.bce_logits(x, t1.clone()));
        let t2 = target.clone();
        check(rand_mat(&mut rng, 3, 6), &move |g, x| {
            let p = g.sigmoid(x);
            g.bce_prob(p, t2.clone())
        });
        let t3 = target.clone();
        check(rand_mat(&mut rng, 3, 6), &move |g, x| {
            let p = g.sigmoid(x);
            g.dice_rows(p, t3.clone(), 1.0)
        });
        check(rand_mat(&mut rng, 4, 2), &|g, x| {
            g.softmax_ce(x, vec![0, 1, 1, 0], vec![1.0, 0.1, 0.1, 1.0])
        });
    }

    #[test]
    fn max_pool_gradient_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let geom = PoolGeom {
            frames: 2,
            h: 4,
            w: 5,
            radius: 1,
        };
        check(rand_mat(&mut rng, 2, 40), &|g, x| {
            let m = g.max_pool(x, geom);
            let s = g.sigmoid(m);
            g.sum(s)
        });
        // binary input: pooling is a dilation with a 3×3 square
        let mut x = Array2::zeros((1, 20));
        x[[0, 0]] = 1.0;
        let mut g = Graph::new();
        let v = g.constant(x);
        let m = g.max_pool(
            v,
            PoolGeom {
                frames: 1,
                h: 4,
                w: 5,
                radius: 1,
            },
        );
        let ones: Vec<usize> = g
            .value(m)
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ones, vec![0, 1, 5, 6]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Array2::ones((2, 2)));
        let b = g.param(Array2::ones((2, 2)));
        let c = g.mul(a, b);
        let s = g.sum(c);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &Array2::<f64>::ones((2, 2)));
    }
}

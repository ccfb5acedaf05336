//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during the forward pass.
//! [`Graph::backward`] walks the tape in reverse and returns a
//! [`Gradients`] table keyed by [`Var`]. Graphs are built fresh for every
//! training step; parameters enter as leaves created with [`Graph::param`].

use crate::error::{shape_err, Result};
use crate::fuzzy;
use crate::linalg::{col2im, gemm, im2col};
use crate::tensor::Tensor;

/// Lower clamp on probabilities inside the cross-entropy logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    Relu(Var),
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Softmax(Var),
    CrossEntropy { p: Var, target: Tensor },
    SigmoidMembership { x: Var, a: Var, b: Var },
    GaussianMembership { x: Var, mu: Var, var: Var },
    NormalizeCategories(Var),
    Uncertainty(Var),
    MinCategories { u: Var, argmin: Vec<u8> },
    Fuse { u: Var, carrier: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Same-padded or valid 2-D cross-correlation, stride 1.
    ///
    /// `x: [n, c, h, w]`, `w: [f, c, k, k]`, `b: [f]` → `[n, f, h', w']`
    /// with `h' = h + 2·pad − k + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), pad)?;
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, pad }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(&[x]);
        self.push(out, Op::Relu(x), needs)
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err("max_pool2", format!("extents {h}x{w} are not even"));
        }
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0u32; n * c * ho * wo];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = best_i as u32;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("upsample2")?;
        let src = self.value(x).data();
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let dst = out.data_mut();
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[(p * ho + oy) * wo + ox] = src[(p * h + oy / 2) * w + ox / 2];
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, Op::Upsample2(x), needs))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return shape_err(
                "concat_channels",
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            );
        }
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        {
            let (sa, sb) = (self.value(a).data(), self.value(b).data());
            let dst = out.data_mut();
            for ni in 0..n {
                let o = ni * (ca + cb) * hw;
                dst[o..o + ca * hw].copy_from_slice(&sa[ni * ca * hw..(ni + 1) * ca * hw]);
                dst[o + ca * hw..o + (ca + cb) * hw]
                    .copy_from_slice(&sb[ni * cb * hw..(ni + 1) * cb * hw]);
            }
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o *= v;
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Per-pixel softmax across the channel axis of `[n, r, h, w]`.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let out = softmax_channels(self.value(a))?;
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax(a), needs))
    }

    /// Mean over pixels of `−Σ_r q_r log max(p_r, LOG_CLAMP)`.
    pub fn cross_entropy(&mut self, p: Var, target: &Tensor) -> Result<Var> {
        let loss = cross_entropy(self.value(p), target)?;
        let needs = self.needs(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                p,
                target: target.clone(),
            },
            needs,
        ))
    }

    pub fn sigmoid_membership(&mut self, x: Var, a: Var, b: Var) -> Result<Var> {
        let out = fuzzy::sigmoid_forward(self.value(x), self.value(a), self.value(b))?;
        let needs = self.needs(&[x, a, b]);
        Ok(self.push(out, Op::SigmoidMembership { x, a, b }, needs))
    }

    pub fn gaussian_membership(&mut self, x: Var, mu: Var, var: Var) -> Result<Var> {
        let out = fuzzy::gaussian_forward(self.value(x), self.value(mu), self.value(var))?;
        let needs = self.needs(&[x, mu, var]);
        Ok(self.push(out, Op::GaussianMembership { x, mu, var }, needs))
    }

    pub fn normalize_categories(&mut self, m: Var) -> Result<Var> {
        let out = fuzzy::normalize_forward(self.value(m))?;
        let needs = self.needs(&[m]);
        Ok(self.push(out, Op::NormalizeCategories(m), needs))
    }

    pub fn uncertainty(&mut self, m: Var) -> Var {
        let out = fuzzy::uncertainty_forward(self.value(m));
        let needs = self.needs(&[m]);
        self.push(out, Op::Uncertainty(m), needs)
    }

    pub fn min_categories(&mut self, u: Var) -> Result<Var> {
        let (out, argmin) = fuzzy::min_categories_forward(self.value(u))?;
        let needs = self.needs(&[u]);
        Ok(self.push(out, Op::MinCategories { u, argmin }, needs))
    }

    pub fn fuse(&mut self, u: Var, carrier: Var) -> Result<Var> {
        let out = fuzzy::fuse_forward(self.value(u), self.value(carrier))?;
        let needs = self.needs(&[u, carrier]);
        Ok(self.push(out, Op::Fuse { u, carrier }, needs))
    }

    /// Reverse sweep from a scalar `output`. Fails if any gradient is
    /// non-finite.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                g.check_finite("backward")?;
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad } => {
                let (dx, dw, db) =
                    conv2d_backward(self.value(*x), self.value(*w), *pad, g, self.nodes[x.0].needs_grad);
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Relu(x) => {
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                acc(*x, d);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    d.data_mut()[i as usize] += gv;
                }
                acc(*x, d);
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.value(*x).dims4("upsample2")?;
                let (ho, wo) = (2 * h, 2 * w);
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let (dst, src) = (d.data_mut(), g.data());
                for p in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dst[(p * h + oy / 2) * w + ox / 2] += src[(p * ho + oy) * wo + ox];
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(*a).dims4("concat_channels")?;
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let mut da = Tensor::zeros(self.value(*a).shape());
                let mut db = Tensor::zeros(self.value(*b).shape());
                for ni in 0..n {
                    let o = ni * (ca + cb) * hw;
                    da.data_mut()[ni * ca * hw..(ni + 1) * ca * hw]
                        .copy_from_slice(&g.data()[o..o + ca * hw]);
                    db.data_mut()[ni * cb * hw..(ni + 1) * cb * hw]
                        .copy_from_slice(&g.data()[o + ca * hw..o + (ca + cb) * hw]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                for (d, &v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *d *= v;
                }
                let mut db = g.clone();
                for (d, &v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *d *= v;
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Sum(x) => {
                acc(*x, Tensor::full(self.value(*x).shape(), g.item()));
            }
            Op::Softmax(a) => {
                acc(*a, softmax_backward(&node.value, g)?);
            }
            Op::CrossEntropy { p, target } => {
                let pv = self.value(*p);
                let [n, _, h, w] = pv.dims4("cross_entropy")?;
                let scale = g.item() / (n * h * w) as f64;
                let mut d = Tensor::zeros(pv.shape());
                for ((dv, &pr), &q) in d.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                    if pr >= LOG_CLAMP {
                        *dv = -scale * q / pr;
                    }
                }
                acc(*p, d);
            }
            Op::SigmoidMembership { x, a, b } => {
                let (dx, da, db) = fuzzy::sigmoid_backward(
                    self.value(*x),
                    self.value(*a),
                    self.value(*b),
                    &node.value,
                    g,
                );
                acc(*x, dx);
                acc(*a, da);
                acc(*b, db);
            }
            Op::GaussianMembership { x, mu, var } => {
                let (dx, dmu, dvar) = fuzzy::gaussian_backward(
                    self.value(*x),
                    self.value(*mu),
                    self.value(*var),
                    &node.value,
                    g,
                );
                acc(*x, dx);
                acc(*mu, dmu);
                acc(*var, dvar);
            }
            Op::NormalizeCategories(m) => {
                acc(*m, fuzzy::normalize_backward(self.value(*m), &node.value, g));
            }
            Op::Uncertainty(m) => {
                acc(*m, fuzzy::uncertainty_backward(self.value(*m), g));
            }
            Op::MinCategories { u, argmin } => {
                acc(
                    *u,
                    fuzzy::min_categories_backward(self.value(*u).shape(), argmin, g),
                );
            }
            Op::Fuse { u, carrier } => {
                let (du, dc) = fuzzy::fuse_backward(self.value(*u), self.value(*carrier), g);
                acc(*u, du);
                acc(*carrier, dc);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Forward kernels, also usable outside a graph.

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Result<Tensor> {
    let [n, c, h, wd] = x.dims4("conv2d")?;
    let [f, wc, k, k2] = w.dims4("conv2d")?;
    if wc != c {
        return shape_err(
            "conv2d",
            format!("input has {c} channels but weight expects {wc}"),
        );
    }
    if k != k2 {
        return shape_err("conv2d", format!("kernel {k}x{k2} is not square"));
    }
    if b.shape() != [f] {
        return shape_err(
            "conv2d",
            format!("bias shape {:?}, expected [{f}]", b.shape()),
        );
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return shape_err("conv2d", format!("kernel {k} larger than padded input"));
    }
    let ho = h + 2 * pad + 1 - k;
    let wo = wd + 2 * pad + 1 - k;
    let plane = ho * wo;
    let rows = c * k * k;
    let mut out = Tensor::zeros(&[n, f, ho, wo]);
    let mut cols = vec![0.0; rows * plane];
    for ni in 0..n {
        im2col(
            &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd],
            c,
            h,
            wd,
            k,
            pad,
            &mut cols,
        );
        let dst = &mut out.data_mut()[ni * f * plane..(ni + 1) * f * plane];
        for (fi, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(b.data()[fi]);
        }
        gemm(f, rows, plane, w.data(), false, &cols, false, dst, 1.0);
    }
    Ok(out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    pad: usize,
    g: &Tensor,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, c, h, wd] = x.dims4("conv2d").expect("validated in forward");
    let [f, _, k, _] = w.dims4("conv2d").expect("validated in forward");
    let ho = h + 2 * pad + 1 - k;
    let wo = wd + 2 * pad + 1 - k;
    let plane = ho * wo;
    let rows = c * k * k;
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[f]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = vec![0.0; rows * plane];
    let mut dcols = vec![0.0; rows * plane];
    for ni in 0..n {
        let gi = &g.data()[ni * f * plane..(ni + 1) * f * plane];
        for (fi, chunk) in gi.chunks(plane).enumerate() {
            db.data_mut()[fi] += chunk.iter().sum::<f64>();
        }
        im2col(
            &x.data()[ni * c * h * wd..(ni + 1) * c * h * wd],
            c,
            h,
            wd,
            k,
            pad,
            &mut cols,
        );
        // dW[f, rows] += dY[f, plane] · colsᵀ[plane, rows]
        gemm(f, plane, rows, gi, false, &cols, true, dw.data_mut(), 1.0);
        if let Some(dx) = dx.as_mut() {
            // dcols[rows, plane] = Wᵀ[rows, f] · dY[f, plane]
            gemm(rows, f, plane, w.data(), true, gi, false, &mut dcols, 0.0);
            col2im(
                &dcols,
                c,
                h,
                wd,
                k,
                pad,
                &mut dx.data_mut()[ni * c * h * wd..(ni + 1) * c * h * wd],
            );
        }
    }
    (dx, dw, db)
}

/// `p_r = exp(a_r − max) / Σ exp(a_k − max)` per pixel of `[n, r, h, w]`.
pub fn softmax_channels(a: &Tensor) -> Result<Tensor> {
    let [n, r, h, w] = a.dims4("softmax_channels")?;
    let hw = h * w;
    let mut out = Tensor::zeros(a.shape());
    let (src, dst) = (a.data(), out.data_mut());
    for ni in 0..n {
        let base = ni * r * hw;
        for i in 0..hw {
            let max = (0..r)
                .map(|k| src[base + k * hw + i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..r {
                let e = (src[base + k * hw + i] - max).exp();
                dst[base + k * hw + i] = e;
                s += e;
            }
            for k in 0..r {
                dst[base + k * hw + i] /= s;
            }
        }
    }
    Ok(out)
}

fn softmax_backward(p: &Tensor, g: &Tensor) -> Result<Tensor> {
    let [n, r, h, w] = p.dims4("softmax_channels")?;
    let hw = h * w;
    let mut d = Tensor::zeros(p.shape());
    let (pv, gv, dv) = (p.data(), g.data(), d.data_mut());
    for ni in 0..n {
        let base = ni * r * hw;
        for i in 0..hw {
            let dot: f64 = (0..r)
                .map(|k| pv[base + k * hw + i] * gv[base + k * hw + i])
                .sum();
            for k in 0..r {
                let j = base + k * hw + i;
                dv[j] = pv[j] * (gv[j] - dot);
            }
        }
    }
    Ok(d)
}

/// Mean-over-pixels cross-entropy between probabilities and one-hot targets.
pub fn cross_entropy(p: &Tensor, q: &Tensor) -> Result<f64> {
    let [n, _, h, w] = p.dims4("cross_entropy")?;
    if p.shape() != q.shape() {
        return shape_err(
            "cross_entropy",
            format!("probabilities {:?} vs targets {:?}", p.shape(), q.shape()),
        );
    }
    let total: f64 = p
        .data()
        .iter()
        .zip(q.data())
        .filter(|(_, &qv)| qv != 0.0)
        .map(|(&pv, &qv)| -qv * pv.max(LOG_CLAMP).ln())
        .sum();
    Ok(total / (n * h * w) as f64)
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare autodiff gradients of a scalar function against central finite
/// differences.
///
/// `build` receives a fresh graph plus one `Var` per input (all trainable)
/// and returns the scalar output. The relative error of each entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`. When
/// `max_per_input` is set, a deterministic stride of entries is sampled
/// from each input instead of every entry.
pub fn finite_difference_check<F>(
    inputs: &[Tensor],
    step: f64,
    floor: f64,
    max_per_input: Option<usize>,
    build: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[ii])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let stride = match max_per_input {
            Some(m) if m > 0 && input.len() > m => input.len().div_ceil(m),
            _ => 1,
        };
        for j in (0..input.len()).step_by(stride) {
            let orig = input.data()[j];
            work[ii].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[ii].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[ii].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    /// Direct six-loop cross-correlation.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
        let [n, c, h, wd] = x.dims4("o").unwrap();
        let [f, _, k, _] = w.dims4("o").unwrap();
        let ho = h + 2 * pad + 1 - k;
        let wo = wd + 2 * pad + 1 - k;
        let mut out = Tensor::zeros(&[n, f, ho, wo]);
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = b.data()[fi];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((fi * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((ni * f + fi) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(out.data()[4], 9.0);
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 1, 6, 7], &mut rng, -1.0, 1.0);
        for k in [1usize, 3, 5] {
            let mut w = Tensor::zeros(&[1, 1, k, k]);
            w.data_mut()[(k / 2) * k + k / 2] = 1.0;
            let out = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), k / 2).unwrap();
            assert_eq!(out, x);
        }
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[1, 2, 5, 5], &mut rng, -1.0, 1.0);
        let w = random(&[3, 2, 3, 3], &mut rng, -1.0, 1.0);
        let b = random(&[3], &mut rng, -1.0, 1.0);
        for pad in [0, 1] {
            let got = conv2d_forward(&x, &w, &b, pad).unwrap();
            let want = conv_oracle(&x, &w, &b, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_mismatched_channels() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, &Tensor::zeros(&[1]), 1).unwrap_err();
        assert!(err.to_string().contains("channels"));
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(&[2]), 1).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_channels(&Tensor::zeros(&[1, 5, 2, 2])).unwrap();
        assert!(p.data().iter().all(|v| (v - 0.2).abs() < 1e-15));

        let mut a = Tensor::zeros(&[1, 5, 1, 1]);
        a.data_mut()[0] = 800.0;
        let p = softmax_channels(&a).unwrap();
        assert_eq!(p.data()[0], 1.0);
        p.check_finite("softmax").unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[2, 5, 3, 3], &mut rng, -4.0, 4.0);
        let p = softmax_channels(&a).unwrap();
        for ni in 0..2 {
            for i in 0..9 {
                let z: f64 = (0..5).map(|k| a.data()[ni * 45 + k * 9 + i].exp()).sum();
                for k in 0..5 {
                    let j = ni * 45 + k * 9 + i;
                    assert!((p.data()[j] - a.data()[j].exp() / z).abs() < 1e-12);
                }
                let s: f64 = (0..5).map(|k| p.data()[ni * 45 + k * 9 + i]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    fn one_hot(labels: &[usize], r: usize) -> Tensor {
        let hw = labels.len();
        let mut q = Tensor::zeros(&[1, r, 1, hw]);
        for (i, &l) in labels.iter().enumerate() {
            q.data_mut()[l * hw + i] = 1.0;
        }
        q
    }

    #[test]
    fn cross_entropy_examples() {
        let q = one_hot(&[0, 3, 4, 1], 5);
        let p = Tensor::full(&[1, 5, 1, 4], 0.2);
        assert!((cross_entropy(&p, &q).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert_eq!(cross_entropy(&q, &q).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = softmax_channels(&random(&[1, 5, 2, 2], &mut rng, -2.0, 2.0)).unwrap();
        let labels = [2usize, 0, 4, 4];
        let q = Tensor::new(vec![1, 5, 2, 2], one_hot(&labels, 5).into_data()).unwrap();
        let mut hand = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            hand -= p.data()[l * 4 + i].ln();
        }
        assert!((cross_entropy(&p, &q).unwrap() - hand / 4.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let q = one_hot(&[1], 2);
        let p = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let l = cross_entropy(&p, &q).unwrap();
        assert!((l + LOG_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn three_node_chain_matches_hand_jacobian() {
        // a = W·x (1×1 conv), p = softmax(a), C = CE(p, q)
        // ⇒ ∂C/∂W[r, c] = Σ_pixels (p_r − q_r)·x_c / P and ∂C/∂b[r] = Σ (p_r − q_r) / P
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&[1, 2, 2, 2], &mut rng, -1.0, 1.0);
        let w = random(&[5, 2, 1, 1], &mut rng, -1.0, 1.0);
        let b = random(&[5], &mut rng, -0.5, 0.5);
        let labels = [1usize, 4, 0, 2];
        let q = Tensor::new(vec![1, 5, 2, 2], one_hot(&labels, 5).into_data()).unwrap();

        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.param(w.clone()), g.param(b.clone()));
        let a = g.conv2d(xv, wv, bv, 0).unwrap();
        let p = g.softmax_channels(a).unwrap();
        let c = g.cross_entropy(p, &q).unwrap();
        let grads = g.backward(c).unwrap();
        let pv = g.value(p).clone();

        for r in 0..5 {
            let mut db = 0.0;
            for i in 0..4 {
                db += (pv.data()[r * 4 + i] - q.data()[r * 4 + i]) / 4.0;
            }
            assert!((grads.get(bv).unwrap().data()[r] - db).abs() < 1e-12);
            for ch in 0..2 {
                let mut dw = 0.0;
                for i in 0..4 {
                    dw += (pv.data()[r * 4 + i] - q.data()[r * 4 + i]) * x.data()[ch * 4 + i] / 4.0;
                }
                assert!((grads.get(wv).unwrap().data()[r * 2 + ch] - dw).abs() < 1e-12);
            }
        }
        assert!(grads.get(xv).is_none());
    }

    fn check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
        finite_difference_check(inputs, 1e-3, 1e-2, None, build)
            .unwrap()
            .max_rel_error
    }

    fn weighted_sum(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
        // a random linear functional so every output entry matters
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wts = random(g.value(v).shape(), &mut rng, -1.0, 1.0);
        let c = g.constant(wts);
        let m = g.mul(v, c)?;
        Ok(g.sum(m))
    }

    #[test]
    fn gradients_of_layer_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 2, 4, 4], &mut rng, -1.0, 1.0);
        let w = random(&[3, 2, 3, 3], &mut rng, -1.0, 1.0);
        let b = random(&[3], &mut rng, -1.0, 1.0);
        let e = check(&[x.clone(), w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1)?;
            weighted_sum(g, y, 1)
        });
        assert!(e < 1e-4, "conv2d {e}");

        let e = check(&[x.clone()], |g, v| {
            let y = g.max_pool2(v[0])?;
            let y = g.upsample2(y)?;
            weighted_sum(g, y, 2)
        });
        assert!(e < 1e-4, "pool/upsample {e}");

        let y = random(&[2, 1, 4, 4], &mut rng, -1.0, 1.0);
        let e = check(&[x.clone(), y], |g, v| {
            let c = g.concat_channels(v[0], v[1])?;
            let r = g.relu(c);
            weighted_sum(g, r, 3)
        });
        assert!(e < 1e-4, "concat/relu {e}");

        let logits = random(&[2, 5, 2, 3], &mut rng, -2.0, 2.0);
        let mut q = Tensor::zeros(&[2, 5, 2, 3]);
        for i in 0..12 {
            let (ni, pix) = (i / 6, i % 6);
            q.data_mut()[ni * 30 + (i % 5) * 6 + pix] = 1.0;
        }
        let e = check(&[logits], |g, v| {
            let p = g.softmax_channels(v[0])?;
            g.cross_entropy(p, &q)
        });
        assert!(e < 1e-4, "softmax/ce {e}");
    }

    #[test]
    fn gradients_of_fuzzy_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&[2, 2, 3, 3], &mut rng, 0.0, 1.0);
        for per_pixel in [true, false] {
            let plane = if per_pixel { [5, 2, 3, 3] } else { [5, 2, 1, 1] };
            let a = random(&plane, &mut rng, -3.0, 3.0);
            let b = random(&plane, &mut rng, 0.0, 1.0);
            let e = check(&[x.clone(), a, b], |g, v| {
                let m = g.sigmoid_membership(v[0], v[1], v[2])?;
                weighted_sum(g, m, 5)
            });
            assert!(e < 1e-4, "sigmoid {e}");

            let mu = random(&plane, &mut rng, 0.0, 1.0);
            // narrow variances make the O(step²) truncation error dominate
            let var = random(&plane, &mut rng, 0.2, 0.6);
            let e = check(&[x.clone(), mu, var], |g, v| {
                let m = g.gaussian_membership(v[0], v[1], v[2])?;
                weighted_sum(g, m, 6)
            });
            assert!(e < 1e-4, "gaussian {e}");
        }

        let m = random(&[2, 5, 2, 2, 2], &mut rng, 0.05, 1.0);
        let e = check(&[m.clone()], |g, v| {
            let n = g.normalize_categories(v[0])?;
            weighted_sum(g, n, 7)
        });
        assert!(e < 1e-4, "normalize {e}");

        let e = check(&[m.clone()], |g, v| {
            let u = g.uncertainty(v[0]);
            let o = g.min_categories(u)?;
            weighted_sum(g, o, 8)
        });
        assert!(e < 1e-4, "uncertainty/min {e}");

        let u = random(&[2, 2, 2, 2], &mut rng, 0.0, 1.0);
        let c = random(&[2, 2, 2, 2], &mut rng, -1.0, 1.0);
        let e = check(&[u, c], |g, v| {
            let o = g.fuse(v[0], v[1])?;
            weighted_sum(g, o, 9)
        });
        assert!(e < 1e-4, "fuse {e}");
    }

    #[test]
    fn backward_rejects_nan() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap());
        let s = g.sum(x);
        // the gradient of a sum is finite even with NaN inputs
        assert!(g.backward(s).is_ok());
        let m = g.mul(x, x).unwrap();
        let s = g.sum(m);
        assert!(g.backward(s).is_err());
    }
}

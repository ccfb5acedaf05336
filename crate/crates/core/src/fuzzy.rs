//! Trainable fuzzification, uncertainty representation and fusion.
//!
//! Tensor layouts used throughout:
//!
//! * carrier / input planes `x`: `[n, d, h, w]`
//! * membership parameters: `[r, d, ph, pw]`, where `(ph, pw)` is either the
//!   full `(h, w)` (one pair per pixel) or `(1, 1)` (shared across pixels)
//! * memberships and per-category uncertainties: `[n, r, d, h, w]`
//! * overall uncertainty: `[n, d, h, w]`
//!
//! The graph-free functions here operate on a single image (`n = 1`
//! implied); the autodiff tape reuses the batched kernels.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to Gaussian membership variances.
pub const VAR_MIN: f64 = 1e-4;

/// Guard for an all-zero membership denominator.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MembershipKind {
    Sigmoid,
    Gaussian,
}

impl MembershipKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MembershipKind::Sigmoid => "sigmoid",
            MembershipKind::Gaussian => "gaussian",
        }
    }

    /// Names of the two parameter banks, in storage order.
    pub fn param_names(self) -> [&'static str; 2] {
        match self {
            MembershipKind::Sigmoid => ["a", "b"],
            MembershipKind::Gaussian => ["mu", "var"],
        }
    }
}

impl std::str::FromStr for MembershipKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(MembershipKind::Sigmoid),
            "gaussian" => Ok(MembershipKind::Gaussian),
            other => Err(Error::InvalidArgument(format!(
                "unknown membership kind `{other}` (expected sigmoid|gaussian)"
            ))),
        }
    }
}

/// Membership function parameters, indexed `[category, channel, pixel]`.
#[derive(Clone, Debug, PartialEq)]
pub enum MembershipParams {
    /// `o = 1 / (1 + exp(a·(x − b)))`
    Sigmoid { a: Tensor, b: Tensor },
    /// `o = exp(−(x − μ)² / (2σ²))`
    Gaussian { mu: Tensor, var: Tensor },
}

impl MembershipParams {
    pub fn kind(&self) -> MembershipKind {
        match self {
            MembershipParams::Sigmoid { .. } => MembershipKind::Sigmoid,
            MembershipParams::Gaussian { .. } => MembershipKind::Gaussian,
        }
    }

    pub fn banks(&self) -> (&Tensor, &Tensor) {
        match self {
            MembershipParams::Sigmoid { a, b } => (a, b),
            MembershipParams::Gaussian { mu, var } => (mu, var),
        }
    }

    pub fn into_banks(self) -> (Tensor, Tensor) {
        match self {
            MembershipParams::Sigmoid { a, b } => (a, b),
            MembershipParams::Gaussian { mu, var } => (mu, var),
        }
    }

    pub fn from_banks(kind: MembershipKind, first: Tensor, second: Tensor) -> Self {
        match kind {
            MembershipKind::Sigmoid => MembershipParams::Sigmoid {
                a: first,
                b: second,
            },
            MembershipKind::Gaussian => MembershipParams::Gaussian {
                mu: first,
                var: second,
            },
        }
    }

    /// Total trainable scalars: `2 × r × pixels × d`.
    pub fn param_count(&self) -> usize {
        let (p, q) = self.banks();
        p.len() + q.len()
    }
}

// ---------------------------------------------------------------------------
// Batched kernels shared with the autodiff tape.

struct Layout {
    n: usize,
    r: usize,
    d: usize,
    hw: usize,
    /// Pixels per parameter plane: `hw` (per-pixel) or 1 (shared).
    pp: usize,
}

impl Layout {
    fn new(x: &Tensor, p: &Tensor, q: &Tensor, op: &'static str) -> Result<Self> {
        let [n, d, h, w] = x.dims4(op)?;
        let [r, pd, ph, pw] = p.dims4(op)?;
        if p.shape() != q.shape() {
            return shape_err(
                op,
                format!("parameter banks differ: {:?} vs {:?}", p.shape(), q.shape()),
            );
        }
        if pd != d {
            return shape_err(op, format!("params have {pd} channels, input has {d}"));
        }
        let per_pixel = ph == h && pw == w;
        let shared = ph == 1 && pw == 1;
        if !per_pixel && !shared {
            return shape_err(
                op,
                format!("parameter plane {ph}x{pw} matches neither {h}x{w} nor 1x1"),
            );
        }
        Ok(Self {
            n,
            r,
            d,
            hw: h * w,
            pp: if per_pixel { h * w } else { 1 },
        })
    }

    fn out_shape(&self, x: &Tensor) -> Vec<usize> {
        let s = x.shape();
        vec![self.n, self.r, self.d, s[2], s[3]]
    }

    /// Visit every `(x index, param index, output index)` triple.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        for n in 0..self.n {
            for r in 0..self.r {
                for d in 0..self.d {
                    let xb = (n * self.d + d) * self.hw;
                    let pb = (r * self.d + d) * self.pp;
                    let ob = ((n * self.r + r) * self.d + d) * self.hw;
                    for i in 0..self.hw {
                        let pi = if self.pp == 1 { pb } else { pb + i };
                        f(xb + i, pi, ob + i);
                    }
                }
            }
        }
    }
}

fn logistic_of_neg(z: f64) -> f64 {
    // 1 / (1 + e^z) without overflow
    if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

pub(crate) fn sigmoid_forward(x: &Tensor, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let l = Layout::new(x, a, b, "sigmoid_membership")?;
    let mut out = Tensor::zeros(&l.out_shape(x));
    let (xs, av, bv) = (x.data(), a.data(), b.data());
    let o = out.data_mut();
    l.for_each(|xi, pi, oi| {
        o[oi] = logistic_of_neg(av[pi] * (xs[xi] - bv[pi]));
    });
    Ok(out)
}

pub(crate) fn sigmoid_backward(
    x: &Tensor,
    a: &Tensor,
    b: &Tensor,
    out: &Tensor,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let l = Layout::new(x, a, b, "sigmoid_membership").expect("validated in forward");
    let mut dx = Tensor::zeros(x.shape());
    let mut da = Tensor::zeros(a.shape());
    let mut db = Tensor::zeros(b.shape());
    let (xs, av, bv, o, g) = (x.data(), a.data(), b.data(), out.data(), grad.data());
    {
        let (dxs, das, dbs) = (dx.data_mut(), da.data_mut(), db.data_mut());
        l.for_each(|xi, pi, oi| {
            // o = σ(−z), z = a(x − b) ⇒ ∂o/∂z = −o(1 − o)
            let dz = -o[oi] * (1.0 - o[oi]) * g[oi];
            dxs[xi] += dz * av[pi];
            das[pi] += dz * (xs[xi] - bv[pi]);
            dbs[pi] -= dz * av[pi];
        });
    }
    (dx, da, db)
}

pub(crate) fn gaussian_forward(x: &Tensor, mu: &Tensor, var: &Tensor) -> Result<Tensor> {
    let l = Layout::new(x, mu, var, "gaussian_membership")?;
    let mut out = Tensor::zeros(&l.out_shape(x));
    let (xs, m, v) = (x.data(), mu.data(), var.data());
    let o = out.data_mut();
    l.for_each(|xi, pi, oi| {
        let diff = xs[xi] - m[pi];
        o[oi] = (-diff * diff / (2.0 * v[pi].max(VAR_MIN))).exp();
    });
    Ok(out)
}

pub(crate) fn gaussian_backward(
    x: &Tensor,
    mu: &Tensor,
    var: &Tensor,
    out: &Tensor,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let l = Layout::new(x, mu, var, "gaussian_membership").expect("validated in forward");
    let mut dx = Tensor::zeros(x.shape());
    let mut dmu = Tensor::zeros(mu.shape());
    let mut dvar = Tensor::zeros(var.shape());
    let (xs, m, v, o, g) = (x.data(), mu.data(), var.data(), out.data(), grad.data());
    {
        let (dxs, dms, dvs) = (dx.data_mut(), dmu.data_mut(), dvar.data_mut());
        l.for_each(|xi, pi, oi| {
            let s2 = v[pi].max(VAR_MIN);
            let diff = xs[xi] - m[pi];
            let go = g[oi] * o[oi];
            dxs[xi] -= go * diff / s2;
            dms[pi] += go * diff / s2;
            if v[pi] > VAR_MIN {
                dvs[pi] += go * diff * diff / (2.0 * s2 * s2);
            }
        });
    }
    (dx, dmu, dvar)
}

/// Iterate `(base, stride)` for every `(n, d, pixel)` fibre along the
/// category axis of an `[n, r, d, h, w]` tensor.
fn category_fibres(dims: [usize; 5], mut f: impl FnMut(usize, usize)) {
    let [n, r, d, h, w] = dims;
    let hw = h * w;
    let stride = d * hw;
    for ni in 0..n {
        for di in 0..d {
            for i in 0..hw {
                f(ni * r * stride + di * hw + i, stride);
            }
        }
    }
}

pub(crate) fn normalize_forward(m: &Tensor) -> Result<Tensor> {
    let dims = m.dims5("normalize_memberships")?;
    let r = dims[1];
    let mut out = m.clone();
    let src = m.data();
    let o = out.data_mut();
    category_fibres(dims, |base, stride| {
        let s: f64 = (0..r).map(|k| src[base + k * stride]).sum();
        let s = s.max(NORMALIZE_EPS);
        for k in 0..r {
            o[base + k * stride] = src[base + k * stride] / s;
        }
    });
    Ok(out)
}

pub(crate) fn normalize_backward(m: &Tensor, out: &Tensor, grad: &Tensor) -> Tensor {
    let dims = m.dims5("normalize_memberships").expect("validated in forward");
    let r = dims[1];
    let mut dm = Tensor::zeros(m.shape());
    let (src, o, g) = (m.data(), out.data(), grad.data());
    let d = dm.data_mut();
    category_fibres(dims, |base, stride| {
        let s: f64 = (0..r).map(|k| src[base + k * stride]).sum();
        if s < NORMALIZE_EPS {
            // clamped denominator: out = m / eps, a linear map
            for k in 0..r {
                d[base + k * stride] = g[base + k * stride] / NORMALIZE_EPS;
            }
            return;
        }
        let dot: f64 = (0..r)
            .map(|k| g[base + k * stride] * o[base + k * stride])
            .sum();
        for k in 0..r {
            d[base + k * stride] = (g[base + k * stride] - dot) / s;
        }
    });
    dm
}

/// Per-membership uncertainty: peaks at 1 for `m = 0.5`, zero at 0 and 1.
pub fn uncertainty_value(m: f64) -> f64 {
    if m < 0.5 {
        2.0 * m
    } else if m > 0.5 {
        2.0 * (1.0 - m)
    } else {
        1.0
    }
}

fn uncertainty_slope(m: f64) -> f64 {
    if m < 0.5 {
        2.0
    } else if m > 0.5 {
        -2.0
    } else {
        0.0
    }
}

pub(crate) fn uncertainty_forward(m: &Tensor) -> Tensor {
    m.map(uncertainty_value)
}

pub(crate) fn uncertainty_backward(m: &Tensor, grad: &Tensor) -> Tensor {
    let mut d = grad.clone();
    for (g, &v) in d.data_mut().iter_mut().zip(m.data()) {
        *g *= uncertainty_slope(v);
    }
    d
}

/// Fuzzy AND over categories. Returns the minimum and, per output element,
/// the winning category (ties resolve to the lowest index).
pub(crate) fn min_categories_forward(u: &Tensor) -> Result<(Tensor, Vec<u8>)> {
    let [n, r, d, h, w] = u.dims5("overall_uncertainty")?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, d, h, w]);
    let mut argmin = vec![0u8; n * d * hw];
    let src = u.data();
    let o = out.data_mut();
    for ni in 0..n {
        for di in 0..d {
            for i in 0..hw {
                let oi = (ni * d + di) * hw + i;
                let mut best = f64::INFINITY;
                for k in 0..r {
                    let v = src[((ni * r + k) * d + di) * hw + i];
                    if v < best {
                        best = v;
                        argmin[oi] = k as u8;
                    }
                }
                o[oi] = best;
            }
        }
    }
    Ok((out, argmin))
}

pub(crate) fn min_categories_backward(u_shape: &[usize], argmin: &[u8], grad: &Tensor) -> Tensor {
    let (n, r, d, hw) = (u_shape[0], u_shape[1], u_shape[2], u_shape[3] * u_shape[4]);
    let mut du = Tensor::zeros(u_shape);
    let g = grad.data();
    let dst = du.data_mut();
    for ni in 0..n {
        for di in 0..d {
            for i in 0..hw {
                let oi = (ni * d + di) * hw + i;
                let k = argmin[oi] as usize;
                dst[((ni * r + k) * d + di) * hw + i] = g[oi];
            }
        }
    }
    du
}

pub(crate) fn fuse_forward(u: &Tensor, carrier: &Tensor) -> Result<Tensor> {
    if u.shape() != carrier.shape() {
        return shape_err(
            "fuse",
            format!("uncertainty {:?} vs carrier {:?}", u.shape(), carrier.shape()),
        );
    }
    let mut out = carrier.clone();
    for (o, &uv) in out.data_mut().iter_mut().zip(u.data()) {
        *o *= 1.0 - uv;
    }
    Ok(out)
}

pub(crate) fn fuse_backward(u: &Tensor, carrier: &Tensor, grad: &Tensor) -> (Tensor, Tensor) {
    let mut du = grad.clone();
    let mut dc = grad.clone();
    for (g, &c) in du.data_mut().iter_mut().zip(carrier.data()) {
        *g *= -c;
    }
    for (g, &uv) in dc.data_mut().iter_mut().zip(u.data()) {
        *g *= 1.0 - uv;
    }
    (du, dc)
}

// ---------------------------------------------------------------------------
// Single-image API.

fn batched(x: &Tensor, op: &'static str) -> Result<Tensor> {
    match x.shape() {
        &[d, h, w] => x.clone().reshape(&[1, d, h, w]),
        s => shape_err(op, format!("expected [d, h, w], got {s:?}")),
    }
}

fn unbatched(t: Tensor) -> Result<Tensor> {
    let s = t.shape()[1..].to_vec();
    t.reshape(&s)
}

/// Membership of every pixel in every category: `[d, h, w] → [r, d, h, w]`.
pub fn fuzzify(x: &Tensor, params: &MembershipParams) -> Result<Tensor> {
    let xb = batched(x, "fuzzify")?;
    let out = match params {
        MembershipParams::Sigmoid { a, b } => sigmoid_forward(&xb, a, b)?,
        MembershipParams::Gaussian { mu, var } => gaussian_forward(&xb, mu, var)?,
    };
    unbatched(out)
}

fn with_batch(m: &Tensor, op: &'static str) -> Result<Tensor> {
    match m.shape() {
        &[r, d, h, w] => m.clone().reshape(&[1, r, d, h, w]),
        s => shape_err(op, format!("expected [r, d, h, w], got {s:?}")),
    }
}

/// Rescale memberships so each pixel's categories sum to one.
pub fn normalize_memberships(m: &Tensor) -> Result<Tensor> {
    unbatched(normalize_forward(&with_batch(m, "normalize_memberships")?)?)
}

/// Elementwise uncertainty of each membership.
pub fn uncertainty(m: &Tensor) -> Tensor {
    uncertainty_forward(m)
}

/// Minimum uncertainty across categories: `[r, d, h, w] → [d, h, w]`.
pub fn overall_uncertainty(u: &Tensor) -> Result<Tensor> {
    let (out, _) = min_categories_forward(&with_batch(u, "overall_uncertainty")?)?;
    unbatched(out)
}

/// Attenuate the carrier by `(1 − u)`.
pub fn fuse(u: &Tensor, carrier: &Tensor) -> Result<Tensor> {
    fuse_forward(u, carrier)
}

/// fuzzify → normalize → uncertainty → fuzzy AND → fuse, on the tape.
pub fn fuzzy_block(
    g: &mut Graph,
    x: Var,
    kind: MembershipKind,
    first: Var,
    second: Var,
    zero_uncertainty: bool,
) -> Result<Var> {
    if zero_uncertainty {
        let z = Tensor::zeros(g.value(x).shape());
        let u = g.constant(z);
        return g.fuse(u, x);
    }
    let m = match kind {
        MembershipKind::Sigmoid => g.sigmoid_membership(x, first, second)?,
        MembershipKind::Gaussian => g.gaussian_membership(x, first, second)?,
    };
    let m = g.normalize_categories(m)?;
    let u = g.uncertainty(m);
    let u = g.min_categories(u)?;
    g.fuse(u, x)
}

// ---------------------------------------------------------------------------
// Initialization from labeled data.

/// Per-category, per-channel first and second moments of pixel values.
#[derive(Clone, Debug)]
pub struct CategoryStats {
    classes: usize,
    channels: usize,
    count: Vec<u64>,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl CategoryStats {
    pub fn new(classes: usize, channels: usize) -> Self {
        Self {
            classes,
            channels,
            count: vec![0; classes],
            sum: vec![0.0; classes * channels],
            sum_sq: vec![0.0; classes * channels],
        }
    }

    /// Add one image: `planes` is `[d, h, w]` flattened, `labels` has one
    /// class index per pixel.
    pub fn accumulate(&mut self, planes: &[f64], labels: &[u8]) -> Result<()> {
        let hw = labels.len();
        if planes.len() != hw * self.channels {
            return shape_err(
                "CategoryStats::accumulate",
                format!(
                    "{} values for {} channels of {hw} pixels",
                    planes.len(),
                    self.channels
                ),
            );
        }
        for (i, &lab) in labels.iter().enumerate() {
            let r = lab as usize;
            if r >= self.classes {
                return Err(Error::InvalidArgument(format!("label {r} out of range")));
            }
            self.count[r] += 1;
            for d in 0..self.channels {
                let v = planes[d * hw + i];
                self.sum[r * self.channels + d] += v;
                self.sum_sq[r * self.channels + d] += v * v;
            }
        }
        Ok(())
    }

    pub fn count(&self, class: usize) -> u64 {
        self.count[class]
    }

    fn global(&self, d: usize) -> (f64, f64) {
        let n: u64 = self.count.iter().sum();
        let s: f64 = (0..self.classes).map(|r| self.sum[r * self.channels + d]).sum();
        let sq: f64 = (0..self.classes)
            .map(|r| self.sum_sq[r * self.channels + d])
            .sum();
        moments(n, s, sq)
    }

    /// Population mean and variance of channel `d` within class `r`,
    /// falling back to the all-class statistics when `r` never occurs.
    pub fn mean_var(&self, r: usize, d: usize) -> (f64, f64) {
        let n = self.count[r];
        if n == 0 {
            return self.global(d);
        }
        let i = r * self.channels + d;
        moments(n, self.sum[i], self.sum_sq[i])
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

fn moments(n: u64, s: f64, sq: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = s / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    (mean, var)
}

/// Build membership parameters from category statistics.
///
/// Sigmoid: `b ← mean`, `a ~ U[−1, 1]`. Gaussian: `μ ← mean`,
/// `σ² ← max(var, VAR_MIN)`. `plane` is `(h, w)` for per-pixel parameters or
/// `(1, 1)` for parameters shared across pixels.
pub fn init_membership_params<R: Rng>(
    stats: &CategoryStats,
    kind: MembershipKind,
    plane: (usize, usize),
    rng: &mut R,
) -> MembershipParams {
    let (r, d) = (stats.classes(), stats.channels());
    for k in 0..r {
        if stats.count(k) == 0 {
            log::warn!("category {k} absent from the training data; using global statistics");
        }
    }
    let pp = plane.0 * plane.1;
    let shape = [r, d, plane.0, plane.1];
    let mut first = Tensor::zeros(&shape);
    let mut second = Tensor::zeros(&shape);
    for k in 0..r {
        for c in 0..d {
            let (mean, var) = stats.mean_var(k, c);
            let base = (k * d + c) * pp;
            for i in 0..pp {
                match kind {
                    MembershipKind::Sigmoid => {
                        first.data_mut()[base + i] = rng.random_range(-1.0..=1.0);
                        second.data_mut()[base + i] = mean;
                    }
                    MembershipKind::Gaussian => {
                        first.data_mut()[base + i] = mean;
                        second.data_mut()[base + i] = var.max(VAR_MIN);
                    }
                }
            }
        }
    }
    MembershipParams::from_banks(kind, first, second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plane(vals: &[f64]) -> Tensor {
        Tensor::new(vec![1, 1, vals.len()], vals.to_vec()).unwrap()
    }

    fn sigmoid_params(a: f64, b: f64, r: usize) -> MembershipParams {
        MembershipParams::Sigmoid {
            a: Tensor::full(&[r, 1, 1, 1], a),
            b: Tensor::full(&[r, 1, 1, 1], b),
        }
    }

    #[test]
    fn sigmoid_midpoint_is_half() {
        for a in [-3.0, 0.1, 2.0, 17.0] {
            let m = fuzzify(&plane(&[0.3]), &sigmoid_params(a, 0.3, 1)).unwrap();
            assert!((m.item() - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn sigmoid_worked_value() {
        let m = fuzzify(&plane(&[0.0]), &sigmoid_params(2.0, 0.5, 1)).unwrap();
        let want = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((m.item() - want).abs() < 1e-15);
        assert!((m.item() - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn gaussian_peak_is_one() {
        let p = MembershipParams::Gaussian {
            mu: Tensor::full(&[1, 1, 1, 1], 0.42),
            var: Tensor::full(&[1, 1, 1, 1], 0.01),
        };
        let m = fuzzify(&plane(&[0.42]), &p).unwrap();
        assert_eq!(m.item(), 1.0);
    }

    #[test]
    fn per_pixel_parameters_index_by_pixel() {
        let x = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        let p = MembershipParams::Sigmoid {
            a: Tensor::new(vec![1, 1, 1, 2], vec![1.0, 1.0]).unwrap(),
            b: Tensor::new(vec![1, 1, 1, 2], vec![0.0, 100.0]).unwrap(),
        };
        let m = fuzzify(&x, &p).unwrap();
        assert!((m.data()[0] - 0.5).abs() < 1e-15);
        assert!(m.data()[1] > 0.999);
        // mismatched plane rejected
        let bad = MembershipParams::Sigmoid {
            a: Tensor::zeros(&[1, 1, 1, 3]),
            b: Tensor::zeros(&[1, 1, 1, 3]),
        };
        assert!(fuzzify(&x, &bad).is_err());
    }

    fn memberships(vals: &[f64]) -> Tensor {
        Tensor::new(vec![vals.len(), 1, 1, 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_memberships(&memberships(&[0.7; 5])).unwrap();
        assert!(n.data().iter().all(|v| (v - 0.2).abs() < 1e-15));

        let one_hot = memberships(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(normalize_memberships(&one_hot).unwrap(), one_hot);

        let n = normalize_memberships(&memberships(&[0.2, 0.3, 0.5, 0.0, 1.0])).unwrap();
        let want = [0.1, 0.15, 0.25, 0.0, 0.5];
        for (a, b) in n.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalize_guards_all_zero() {
        let n = normalize_memberships(&memberships(&[0.0; 5])).unwrap();
        assert!(n.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn uncertainty_examples() {
        assert_eq!(uncertainty_value(0.5), 1.0);
        assert_eq!(uncertainty_value(0.0), 0.0);
        assert_eq!(uncertainty_value(1.0), 0.0);
        assert!((uncertainty_value(0.3) - 0.6).abs() < 1e-15);
        assert!((uncertainty_value(0.9) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn overall_uncertainty_is_min() {
        let u = memberships(&[0.2, 0.6, 0.9, 1.0, 0.4]);
        assert_eq!(overall_uncertainty(&u).unwrap().item(), 0.2);
        let u = memberships(&[0.3, 0.0, 0.9, 1.0, 0.4]);
        assert_eq!(overall_uncertainty(&u).unwrap().item(), 0.0);
    }

    #[test]
    fn min_tie_routes_gradient_to_first_category() {
        let u = Tensor::full(&[1, 5, 1, 1, 1], 0.7);
        let (out, argmin) = min_categories_forward(&u).unwrap();
        assert_eq!(out.item(), 0.7);
        let g = min_categories_backward(u.shape(), &argmin, &Tensor::full(&[1, 1, 1, 1], 1.0));
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn fuse_examples() {
        let c = plane(&[0.8, -0.4]);
        assert_eq!(fuse(&Tensor::zeros(&[1, 1, 2]), &c).unwrap(), c);
        let z = fuse(&Tensor::full(&[1, 1, 2], 1.0), &c).unwrap();
        assert!(z.data().iter().all(|v| *v == 0.0));
        let o = fuse(&plane(&[0.25]), &plane(&[0.8])).unwrap();
        assert!((o.item() - 0.6).abs() < 1e-15);
        assert!(fuse(&plane(&[0.1]), &c).is_err());
    }

    #[test]
    fn saturated_memberships_leave_carrier_unchanged() {
        // a huge slope drives every sigmoid membership to 0 or 1
        let x = plane(&[0.1, 0.9, 0.35]);
        let p = MembershipParams::Sigmoid {
            a: Tensor::new(vec![5, 1, 1, 1], vec![1e6, -1e6, 1e6, -1e6, 1e6]).unwrap(),
            b: Tensor::full(&[5, 1, 1, 1], 0.5),
        };
        let m = normalize_memberships(&fuzzify(&x, &p).unwrap()).unwrap();
        let o = overall_uncertainty(&uncertainty(&m)).unwrap();
        assert_eq!(fuse(&o, &x).unwrap(), x);
    }

    #[test]
    fn stats_and_init() {
        // two categories, one channel: class 0 = {0.1, 0.3}, class 1 = {0.5, 0.9, 0.7}
        let planes = [0.1, 0.3, 0.5, 0.9, 0.7];
        let labels = [0u8, 0, 1, 1, 1];
        let mut s = CategoryStats::new(3, 1);
        s.accumulate(&planes, &labels).unwrap();
        let (m0, v0) = s.mean_var(0, 0);
        let (m1, v1) = s.mean_var(1, 0);
        assert!((m0 - 0.2).abs() < 1e-12 && (v0 - 0.01).abs() < 1e-12);
        assert!((m1 - 0.7).abs() < 1e-12 && (v1 - 0.08 / 3.0).abs() < 1e-12);
        // class 2 absent: global moments of all five samples
        let (mg, vg) = s.mean_var(2, 0);
        assert!((mg - 0.5).abs() < 1e-12 && (vg - 0.08).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_membership_params(&s, MembershipKind::Gaussian, (2, 2), &mut rng);
        assert_eq!(p.param_count(), 2 * 3 * 4);
        let (mu, var) = p.banks();
        assert!(mu.data()[4..8].iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert!(var.data().iter().all(|&v| v >= VAR_MIN));

        let p = init_membership_params(&s, MembershipKind::Sigmoid, (1, 1), &mut rng);
        let (a, b) = p.banks();
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!((b.data()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn constant_category_and_zero_variance_clamp() {
        let planes = [0.1, 0.1, 0.1, 0.6];
        let labels = [1u8, 1, 1, 0];
        let mut s = CategoryStats::new(5, 1);
        s.accumulate(&planes, &labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_membership_params(&s, MembershipKind::Sigmoid, (1, 1), &mut rng);
        assert!((p.banks().1.data()[1] - 0.1).abs() < 1e-15);
        let p = init_membership_params(&s, MembershipKind::Gaussian, (1, 1), &mut rng);
        assert_eq!(p.banks().1.data()[1], VAR_MIN);
    }

    proptest! {
        #[test]
        fn uncertainty_is_symmetric(m in 0.0f64..=1.0) {
            prop_assert!((uncertainty_value(m) - uncertainty_value(1.0 - m)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&uncertainty_value(m)));
        }

        #[test]
        fn normalized_memberships_sum_to_one(
            vals in proptest::collection::vec(0.0f64..1.0, 5 * 3),
        ) {
            let m = Tensor::new(vec![5, 1, 1, 3], vals).unwrap();
            let n = normalize_memberships(&m).unwrap();
            for i in 0..3 {
                let s: f64 = (0..5).map(|r| n.data()[r * 3 + i]).sum();
                let raw: f64 = (0..5).map(|r| m.data()[r * 3 + i]).sum();
                if raw > 1e-9 {
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn fusion_never_increases_magnitude(
            x in proptest::collection::vec(-2.0f64..2.0, 6),
            a in proptest::collection::vec(-4.0f64..4.0, 5),
            b in proptest::collection::vec(-1.0f64..1.0, 5),
        ) {
            let x = Tensor::new(vec![1, 2, 3], x).unwrap();
            let p = MembershipParams::Sigmoid {
                a: Tensor::new(vec![5, 1, 1, 1], a).unwrap(),
                b: Tensor::new(vec![5, 1, 1, 1], b).unwrap(),
            };
            let m = normalize_memberships(&fuzzify(&x, &p).unwrap()).unwrap();
            let o = fuse(&overall_uncertainty(&uncertainty(&m)).unwrap(), &x).unwrap();
            for (ov, xv) in o.data().iter().zip(x.data()) {
                prop_assert!(ov.abs() <= xv.abs() + 1e-15);
            }
        }
    }
}

//! Fully connected CRF with appearance, smoothness and anatomy-context
//! kernels, solved by mean-field iteration.
//!
//! The update for pixel `i` and label `l` is
//! `Qᵢ(l) ∝ exp(−Uᵢ(l) + Σₘ ωₘ Σ_{j≠i} kₘ(fᵢ, fⱼ) Qⱼ(l))` with `U = −log P`:
//! the Potts penalty `Σ_{l'≠l} Qⱼ(l') = 1 − Qⱼ(l)` differs from `−Qⱼ(l)`
//! only by a label-independent constant.

mod context;
mod filter;

pub use context::{
    build_context_map, solve_context_labels, ContextFeatureMap, ContextLabelSet, ContextSolution,
    ContextTargets, DistanceTable, APPROX_TOLERANCE, CONTEXTS, CTX_FAT, CTX_MAMMARY, CTX_MUSCLE,
    CTX_TUMOR, PRE_FAT, RETRO_MUSCLE,
};
pub use filter::{
    blur_planes_spatial, gaussian_filter_exact, gaussian_filter_highdim, GridFilter, MAX_DIMS,
};

use crate::autodiff::LOG_CLAMP;
use crate::error::{shape_err, Error, Result};
use crate::preprocess::MultiChannelImage;
use crate::unary::UnaryField;

/// Largest pixel count accepted by the O(N²) solver.
pub const BRUTE_FORCE_MAX_PIXELS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrfParams {
    /// ω₁, appearance kernel over position and color.
    pub w_appearance: f64,
    /// ω₂, smoothness kernel over position.
    pub w_smoothness: f64,
    /// ω₃, context kernel over position and context vector.
    pub w_context: f64,
    /// σ_α in pixels.
    pub sigma_alpha: f64,
    /// σ_β on `[0, 1]` color channels.
    pub sigma_beta: f64,
    /// σ_γ in pixels.
    pub sigma_gamma: f64,
    /// σ_τ in pixels.
    pub sigma_tau: f64,
    /// σ_λ in context-vector units.
    pub sigma_lambda: f64,
    pub iterations: usize,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w_appearance: 0.015,
            w_smoothness: 0.15,
            w_context: 0.05,
            sigma_alpha: 40.0,
            sigma_beta: 0.1,
            sigma_gamma: 3.0,
            sigma_tau: 20.0,
            sigma_lambda: 5.0,
            iterations: 10,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("w_appearance", self.w_appearance),
            ("w_smoothness", self.w_smoothness),
            ("w_context", self.w_context),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("CRF weight {name} = {w} must be >= 0")));
            }
        }
        let sigmas = [
            ("sigma_alpha", self.sigma_alpha),
            ("sigma_beta", self.sigma_beta),
            ("sigma_gamma", self.sigma_gamma),
            ("sigma_tau", self.sigma_tau),
            ("sigma_lambda", self.sigma_lambda),
        ];
        for (name, s) in sigmas {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!("CRF bandwidth {name} = {s} must be > 0")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("CRF iterations must be >= 1".into()));
        }
        Ok(())
    }

    fn all_weights_zero(&self) -> bool {
        self.w_appearance == 0.0 && self.w_smoothness == 0.0 && self.w_context == 0.0
    }

    /// `Σₘ ωₘ kₘ` between two pixels.
    fn pair_kernel(&self, p: PixelFeatures, q: PixelFeatures) -> f64 {
        let d2p = (p.x - q.x).powi(2) + (p.y - q.y).powi(2);
        let d2c: f64 = p.color.iter().zip(q.color).map(|(a, b)| (a - b).powi(2)).sum();
        let d2v: f64 = p.context.iter().zip(q.context).map(|(a, b)| (a - b).powi(2)).sum();
        let mut k = 0.0;
        if self.w_appearance != 0.0 {
            k += self.w_appearance
                * (-d2p / (2.0 * self.sigma_alpha.powi(2)) - d2c / (2.0 * self.sigma_beta.powi(2)))
                    .exp();
        }
        if self.w_smoothness != 0.0 {
            k += self.w_smoothness * (-d2p / (2.0 * self.sigma_gamma.powi(2))).exp();
        }
        if self.w_context != 0.0 {
            k += self.w_context
                * (-d2p / (2.0 * self.sigma_tau.powi(2)) - d2v / (2.0 * self.sigma_lambda.powi(2)))
                    .exp();
        }
        k
    }
}

#[derive(Clone, Copy)]
struct PixelFeatures<'a> {
    x: f64,
    y: f64,
    color: &'a [f64],
    context: &'a [f64; 3],
}

/// Everything a pairwise term needs besides the marginals.
struct Scene<'a> {
    width: usize,
    height: usize,
    /// Pixel-major colors, `channels` per pixel.
    color: Vec<f64>,
    channels: usize,
    context: &'a ContextFeatureMap,
}

impl<'a> Scene<'a> {
    fn new(
        unary: &UnaryField,
        color: &MultiChannelImage,
        context: &'a ContextFeatureMap,
    ) -> Result<Self> {
        let (w, h) = (unary.width(), unary.height());
        if (color.width, color.height) != (w, h) || (context.width, context.height) != (w, h) {
            return shape_err(
                "crf",
                format!(
                    "unary {w}x{h}, color {}x{}, context {}x{}",
                    color.width, color.height, context.width, context.height
                ),
            );
        }
        let channels = color.num_channels();
        if channels == 0 || channels + 2 > MAX_DIMS {
            return shape_err("crf", format!("{channels} color channels"));
        }
        let n = w * h;
        let mut pix = Vec::with_capacity(n * channels);
        for i in 0..n {
            pix.extend(color.pixel(i));
        }
        Ok(Self {
            width: w,
            height: h,
            color: pix,
            channels,
            context,
        })
    }

    fn pixels(&self) -> usize {
        self.width * self.height
    }

    fn features(&self, i: usize) -> PixelFeatures<'_> {
        PixelFeatures {
            x: (i % self.width) as f64,
            y: (i / self.width) as f64,
            color: &self.color[i * self.channels..(i + 1) * self.channels],
            context: self.context.vector(i),
        }
    }
}

/// Result of mean-field inference.
#[derive(Clone, Debug)]
pub struct MeanFieldOutput {
    pub field: UnaryField,
    /// Largest absolute marginal change in each iteration.
    pub max_change: Vec<f64>,
    /// Largest `|Σₗ Qᵢ(l) − 1|` after each iteration.
    pub max_sum_error: Vec<f64>,
}

impl MeanFieldOutput {
    pub fn final_change(&self) -> f64 {
        self.max_change.last().copied().unwrap_or(0.0)
    }
}

/// Shared iteration; `message` fills `Σₘ ωₘ Σ_{j≠i} kₘ Qⱼ(l)` (class-major).
fn iterate(
    unary: &UnaryField,
    params: &CrfParams,
    mut message: impl FnMut(&[f64], &mut [f64]) -> Result<()>,
) -> Result<MeanFieldOutput> {
    params.validate()?;
    let (l, n) = (unary.classes(), unary.pixels());
    let t = params.iterations;
    if params.all_weights_zero() {
        // the update reduces to Q = P
        return Ok(MeanFieldOutput {
            field: unary.clone(),
            max_change: vec![0.0; t],
            max_sum_error: vec![0.0; t],
        });
    }
    let log_p: Vec<f64> = unary.probs().iter().map(|p| p.max(LOG_CLAMP).ln()).collect();
    let mut q = unary.probs().to_vec();
    let mut msg = vec![0.0; l * n];
    let mut logits = vec![0.0; l];
    let mut max_change = Vec::with_capacity(t);
    let mut max_sum_error = Vec::with_capacity(t);
    for _ in 0..t {
        msg.fill(0.0);
        message(&q, &mut msg)?;
        let mut change: f64 = 0.0;
        let mut sum_err: f64 = 0.0;
        for i in 0..n {
            let mut top = f64::NEG_INFINITY;
            for c in 0..l {
                logits[c] = log_p[c * n + i] + msg[c * n + i];
                top = top.max(logits[c]);
            }
            let mut z = 0.0;
            for v in logits.iter_mut() {
                *v = (*v - top).exp();
                z += *v;
            }
            let mut s = 0.0;
            for c in 0..l {
                let new = logits[c] / z;
                change = change.max((new - q[c * n + i]).abs());
                q[c * n + i] = new;
                s += new;
            }
            sum_err = sum_err.max((s - 1.0).abs());
        }
        if !change.is_finite() {
            return Err(Error::NonFinite("mean-field marginals".into()));
        }
        max_change.push(change);
        max_sum_error.push(sum_err);
    }
    Ok(MeanFieldOutput {
        field: UnaryField::new(l, unary.width(), unary.height(), q)?,
        max_change,
        max_sum_error,
    })
}

/// Mean-field inference with filtered message passing.
///
/// The smoothness and context kernels are evaluated exactly by separable
/// blurs over the pixel grid; the appearance kernel goes through
/// [`GridFilter`]. `context` stays fixed across iterations.
pub fn mean_field(
    unary: &UnaryField,
    color: &MultiChannelImage,
    context: &ContextFeatureMap,
    params: &CrfParams,
) -> Result<MeanFieldOutput> {
    let scene = Scene::new(unary, color, context)?;
    params.validate()?;
    let (w, h, n, l) = (scene.width, scene.height, scene.pixels(), unary.classes());

    let appearance = if params.w_appearance > 0.0 {
        let d = 2 + scene.channels;
        let mut feats = Vec::with_capacity(n * d);
        for i in 0..n {
            let f = scene.features(i);
            feats.push(f.x / params.sigma_alpha);
            feats.push(f.y / params.sigma_alpha);
            feats.extend(f.color.iter().map(|c| c / params.sigma_beta));
        }
        Some(GridFilter::new(&feats, d)?)
    } else {
        None
    };

    // context categories present and their pairwise kernel weights
    let present: Vec<usize> = (0..CONTEXTS)
        .filter(|&c| context.index.iter().any(|&v| v as usize == c))
        .collect();
    let dist = context.labels.distances();
    let ctx_weight = |a: usize, b: usize| {
        (-dist.get(a, b).powi(2) / (2.0 * params.sigma_lambda.powi(2))).exp()
    };

    let mut point_major = vec![0.0; n * l];
    let mut planes = vec![0.0; n * l];
    iterate(unary, params, |q, msg| {
        if let Some(filter) = &appearance {
            for c in 0..l {
                for i in 0..n {
                    point_major[i * l + c] = q[c * n + i];
                }
            }
            let out = filter.apply(&point_major, l)?;
            for c in 0..l {
                for i in 0..n {
                    msg[c * n + i] += params.w_appearance * (out[i * l + c] - q[c * n + i]);
                }
            }
        }
        if params.w_smoothness > 0.0 {
            planes.copy_from_slice(q);
            blur_planes_spatial(&mut planes, w, h, params.sigma_gamma);
            for (m, (b, x)) in msg.iter_mut().zip(planes.iter().zip(q)) {
                *m += params.w_smoothness * (b - x);
            }
        }
        if params.w_context > 0.0 {
            for &k in &present {
                for c in 0..l {
                    for i in 0..n {
                        planes[c * n + i] = if context.index[i] as usize == k {
                            q[c * n + i]
                        } else {
                            0.0
                        };
                    }
                }
                blur_planes_spatial(&mut planes, w, h, params.sigma_tau);
                for i in 0..n {
                    let wk = ctx_weight(context.index[i] as usize, k);
                    for c in 0..l {
                        msg[c * n + i] += params.w_context * wk * planes[c * n + i];
                    }
                }
            }
            for (m, x) in msg.iter_mut().zip(q) {
                *m -= params.w_context * x;
            }
        }
        Ok(())
    })
}

/// The same update with messages summed directly over all pixel pairs.
pub fn brute_force_mean_field(
    unary: &UnaryField,
    color: &MultiChannelImage,
    context: &ContextFeatureMap,
    params: &CrfParams,
) -> Result<MeanFieldOutput> {
    let scene = Scene::new(unary, color, context)?;
    let n = scene.pixels();
    if n > BRUTE_FORCE_MAX_PIXELS {
        return Err(Error::InvalidArgument(format!(
            "brute-force mean field limited to {BRUTE_FORCE_MAX_PIXELS} pixels, got {n}"
        )));
    }
    let l = unary.classes();
    iterate(unary, params, |q, msg| {
        for i in 0..n {
            let fi = scene.features(i);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let k = params.pair_kernel(fi, scene.features(j));
                for c in 0..l {
                    msg[c * n + i] += k * q[c * n + j];
                }
            }
        }
        Ok(())
    })
}

/// Gibbs energy `Σᵢ −log P(xᵢ) + Σᵢ Σ_{j≠i} [xᵢ ≠ xⱼ] Σₘ ωₘ kₘ(fᵢ, fⱼ)`,
/// the pairwise sum running over ordered pairs. O(N²).
pub fn energy(
    labels: &[u8],
    unary: &UnaryField,
    color: &MultiChannelImage,
    context: &ContextFeatureMap,
    params: &CrfParams,
) -> Result<f64> {
    let scene = Scene::new(unary, color, context)?;
    let n = scene.pixels();
    if labels.len() != n {
        return shape_err("crf_energy", format!("{} labels for {n} pixels", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&x| x as usize >= unary.classes()) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    let mut e = 0.0;
    for (i, &x) in labels.iter().enumerate() {
        e -= unary.prob(x as usize, i).max(LOG_CLAMP).ln();
    }
    if params.all_weights_zero() {
        return Ok(e);
    }
    for i in 0..n {
        let fi = scene.features(i);
        for j in 0..n {
            if j != i && labels[i] != labels[j] {
                e += params.pair_kernel(fi, scene.features(j));
            }
        }
    }
    Ok(e)
}

#[cfg(test)]
mod tests;

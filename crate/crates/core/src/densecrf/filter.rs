//! Gaussian filtering of per-point value vectors.
//!
//! [`gaussian_filter_highdim`] approximates `v'ᵢ = Σⱼ exp(−‖fᵢ − fⱼ‖²/2) vⱼ`
//! on a regular grid: values are splatted onto grid vertices with quadratic
//! B-spline weights, blurred separably, and read back with the same weights.
//! Each B-spline contributes variance `h²/4`, so the grid blur uses
//! `1 − h²/2` to make the composite kernel unit-variance; taps are scaled by
//! `1/σ_blur` to keep its peak at one.

use crate::error::{Error, Result};

pub const MAX_DIMS: usize = 8;
/// Grid spacing in units of the kernel standard deviation.
pub const GRID_SPACING: f64 = 0.6;
/// Upper bound on grid cells times value components.
pub const CELL_BUDGET: usize = 1 << 27;
const TRUNCATE: f64 = 3.5;

/// Quadratic B-spline weights for offsets −1, 0, +1 around the nearest
/// vertex, given the signed distance `t ∈ [−½, ½]` from it.
fn bspline2(t: f64) -> [f64; 3] {
    [
        0.5 * (0.5 - t) * (0.5 - t),
        0.75 - t * t,
        0.5 * (0.5 + t) * (0.5 + t),
    ]
}

/// Splat/blur/slice structure for one fixed set of feature positions.
pub struct GridFilter {
    dims: usize,
    points: usize,
    extents: Vec<usize>,
    strides: Vec<usize>,
    cells: usize,
    taps: Vec<f64>,
    /// Per point and axis: index of the vertex below the nearest one.
    base: Vec<usize>,
    weights: Vec<[f64; 3]>,
}

impl GridFilter {
    /// `features` holds `dims` coordinates per point, already divided by
    /// the kernel bandwidth.
    pub fn new(features: &[f64], dims: usize) -> Result<Self> {
        if dims == 0 || dims > MAX_DIMS {
            return Err(Error::InvalidArgument(format!(
                "feature dimension {dims} outside 1..={MAX_DIMS}"
            )));
        }
        if features.len() % dims != 0 {
            return Err(Error::Shape {
                op: "gaussian_filter_highdim",
                detail: format!("{} feature values for dimension {dims}", features.len()),
            });
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {bad}")));
        }
        let points = features.len() / dims;
        let h = GRID_SPACING;
        let mut lo = vec![f64::INFINITY; dims];
        let mut hi = vec![f64::NEG_INFINITY; dims];
        for p in features.chunks(dims) {
            for k in 0..dims {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        // nearest vertex of a point sits at round(g) with g = (f − lo)/h + 1,
        // so vertices round(g) − 1 ..= round(g) + 1 stay inside the grid
        let extents: Vec<usize> = (0..dims)
            .map(|k| {
                if points == 0 {
                    1
                } else {
                    ((hi[k] - lo[k]) / h + 1.0).round() as usize + 2
                }
            })
            .collect();
        let mut strides = vec![1; dims];
        for k in (0..dims.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * extents[k + 1];
        }
        let cells = extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&c| c <= CELL_BUDGET)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "filter grid {extents:?} exceeds {CELL_BUDGET} cells; \
                     increase the kernel bandwidths or shrink the image"
                ))
            })?;

        let mut base = Vec::with_capacity(points * dims);
        let mut weights = Vec::with_capacity(points * dims);
        for p in features.chunks(dims) {
            for k in 0..dims {
                let g = (p[k] - lo[k]) / h + 1.0;
                let r = g.round();
                base.push(r as usize - 1);
                weights.push(bspline2(g - r));
            }
        }

        let var = 1.0 - h * h / 2.0;
        let sd = var.sqrt();
        let r = (TRUNCATE * sd / h).ceil() as i64;
        let taps = (-r..=r)
            .map(|t| {
                let x = t as f64 * h;
                (-x * x / (2.0 * var)).exp() / sd
            })
            .collect();
        Ok(Self {
            dims,
            points,
            extents,
            strides,
            cells,
            taps,
            base,
            weights,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Visit the 3^d vertices touched by point `i` with their weights.
    fn for_each_vertex(&self, i: usize, mut f: impl FnMut(usize, f64)) {
        let d = self.dims;
        let base = &self.base[i * d..(i + 1) * d];
        let wts = &self.weights[i * d..(i + 1) * d];
        let mut digits = [0usize; MAX_DIMS];
        loop {
            let mut cell = 0;
            let mut w = 1.0;
            for k in 0..d {
                cell += (base[k] + digits[k]) * self.strides[k];
                w *= wts[k][digits[k]];
            }
            f(cell, w);
            let mut k = d;
            loop {
                if k == 0 {
                    return;
                }
                k -= 1;
                digits[k] += 1;
                if digits[k] < 3 {
                    break;
                }
                digits[k] = 0;
            }
        }
    }

    /// Filter `vdim`-component values, one row per point.
    pub fn apply(&self, values: &[f64], vdim: usize) -> Result<Vec<f64>> {
        if values.len() != self.points * vdim {
            return Err(Error::Shape {
                op: "gaussian_filter_highdim",
                detail: format!(
                    "{} values for {} points of dimension {vdim}",
                    values.len(),
                    self.points
                ),
            });
        }
        if self.cells.saturating_mul(vdim) > CELL_BUDGET {
            return Err(Error::InvalidArgument(format!(
                "filter grid of {} cells x {vdim} values exceeds {CELL_BUDGET}",
                self.cells
            )));
        }
        let mut grid = vec![0.0; self.cells * vdim];
        for i in 0..self.points {
            let v = &values[i * vdim..(i + 1) * vdim];
            self.for_each_vertex(i, |cell, w| {
                for (g, x) in grid[cell * vdim..(cell + 1) * vdim].iter_mut().zip(v) {
                    *g += w * x;
                }
            });
        }
        for k in 0..self.dims {
            self.blur_axis(&mut grid, vdim, k);
        }
        let mut out = vec![0.0; values.len()];
        for i in 0..self.points {
            let o = &mut out[i * vdim..(i + 1) * vdim];
            self.for_each_vertex(i, |cell, w| {
                for (y, g) in o.iter_mut().zip(&grid[cell * vdim..(cell + 1) * vdim]) {
                    *y += w * g;
                }
            });
        }
        Ok(out)
    }

    fn blur_axis(&self, grid: &mut [f64], vdim: usize, axis: usize) {
        let n = self.extents[axis];
        let stride = self.strides[axis];
        let r = (self.taps.len() / 2) as isize;
        let mut line = vec![0.0; n * vdim];
        let mut out = vec![0.0; n * vdim];
        let outer = self.cells / (n * stride);
        for o in 0..outer {
            for inner in 0..stride {
                let start = o * n * stride + inner;
                let mut any = false;
                for a in 0..n {
                    let c = (start + a * stride) * vdim;
                    line[a * vdim..(a + 1) * vdim].copy_from_slice(&grid[c..c + vdim]);
                    any |= grid[c..c + vdim].iter().any(|&x| x != 0.0);
                }
                if !any {
                    continue;
                }
                out.fill(0.0);
                for a in 0..n as isize {
                    let lo = (a - r).max(0);
                    let hi = (a + r).min(n as isize - 1);
                    let dst = &mut out[a as usize * vdim..(a as usize + 1) * vdim];
                    for b in lo..=hi {
                        let t = self.taps[(b - a + r) as usize];
                        let src = &line[b as usize * vdim..(b as usize + 1) * vdim];
                        for (y, x) in dst.iter_mut().zip(src) {
                            *y += t * x;
                        }
                    }
                }
                for a in 0..n {
                    let c = (start + a * stride) * vdim;
                    grid[c..c + vdim].copy_from_slice(&out[a * vdim..(a + 1) * vdim]);
                }
            }
        }
    }
}

/// Approximate `v'ᵢ = Σⱼ exp(−‖fᵢ − fⱼ‖²/2) vⱼ` for `dims`-dimensional
/// features (rows of `features`) and `vdim`-component values.
pub fn gaussian_filter_highdim(
    values: &[f64],
    vdim: usize,
    features: &[f64],
    dims: usize,
) -> Result<Vec<f64>> {
    GridFilter::new(features, dims)?.apply(values, vdim)
}

/// Direct O(N²) evaluation of the same sum.
pub fn gaussian_filter_exact(values: &[f64], vdim: usize, features: &[f64], dims: usize) -> Vec<f64> {
    let n = features.len() / dims;
    let mut out = vec![0.0; n * vdim];
    for i in 0..n {
        let fi = &features[i * dims..(i + 1) * dims];
        for j in 0..n {
            let fj = &features[j * dims..(j + 1) * dims];
            let d2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
            let k = (-0.5 * d2).exp();
            for c in 0..vdim {
                out[i * vdim + c] += k * values[j * vdim + c];
            }
        }
    }
    out
}

/// 1-D Gaussian taps `exp(−t²/2σ²)` for `t = 0..=reach`.
fn half_taps(sigma: f64, reach: usize) -> Vec<f64> {
    (0..=reach)
        .map(|t| (-(t as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Exact separable Gaussian over pixel positions, applied in place to each
/// `width × height` plane of `planes`. Taps reach 6σ or the whole image,
/// whichever is shorter.
pub fn blur_planes_spatial(planes: &mut [f64], width: usize, height: usize, sigma: f64) {
    let n = width * height;
    let reach = |len: usize| ((6.0 * sigma).ceil() as usize).min(len.saturating_sub(1));
    let tx = half_taps(sigma, reach(width));
    let ty = half_taps(sigma, reach(height));
    let mut row = vec![0.0; width.max(height)];
    for plane in planes.chunks_mut(n) {
        for y in 0..height {
            let line = &mut plane[y * width..(y + 1) * width];
            row[..width].copy_from_slice(line);
            conv_line(&row[..width], line, &tx, 1);
        }
        for x in 0..width {
            for y in 0..height {
                row[y] = plane[y * width + x];
            }
            let col = &mut plane[x..];
            conv_line(&row[..height], col, &ty, width);
        }
    }
}

/// `dst[a * stride] = Σ_b taps[|a−b|] src[b]`.
fn conv_line(src: &[f64], dst: &mut [f64], taps: &[f64], stride: usize) {
    let n = src.len();
    let r = taps.len() - 1;
    for a in 0..n {
        let lo = a.saturating_sub(r);
        let hi = (a + r).min(n - 1);
        let mut s = 0.0;
        for (b, &x) in src.iter().enumerate().take(hi + 1).skip(lo) {
            s += taps[a.abs_diff(b)] * x;
        }
        dst[a * stride] = s;
    }
}

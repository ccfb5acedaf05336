//! Contrast enhancement and wavelet channel augmentation.
//!
//! A grayscale image is resized, histogram-equalized and expanded into
//! three planes: the equalized intensities, the Haar approximation band and
//! the magnitude of the three Haar detail bands.

use std::path::Path;

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of gray levels.
pub const LEVELS: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Image(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Load any format the `image` crate reads (PNG, PGM, ...); color
    /// images are reduced to luminance.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_buffer()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    fn to_buffer(&self) -> image::GrayImage {
        image::GrayImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("extents validated at construction")
    }

    /// Bilinear resize; a no-op when the extents already match.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self> {
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        if width == 0 || height == 0 {
            return Err(Error::Image(format!("cannot resize to {width}x{height}")));
        }
        let out = image::imageops::resize(
            &self.to_buffer(),
            width as u32,
            height as u32,
            FilterType::Triangle,
        );
        Self::new(width, height, out.into_raw())
    }
}

/// A real-valued image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.pixels.iter().map(|&p| p as f64).collect(),
        }
    }

    fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn upsample_nearest(&self, factor: usize) -> Plane {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut out = Plane::zeros(w, h);
        for y in 0..h {
            for x in 0..w {
                out.data[y * w + x] = self.data[(y / factor) * self.width + x / factor];
            }
        }
        out
    }

    /// Min-max rescale to `[0, 1]`; a constant plane maps to zeros.
    fn normalized(mut self) -> Plane {
        let lo = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for v in &mut self.data {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
        self
    }
}

/// Histogram equalization with the minimum occupied bin pinned to 0.
///
/// `h(θ) = ⌊(cdf(θ) − cdf_min) / (1 − cdf_min) · 255⌋`, evaluated in exact
/// integer arithmetic on pixel counts. A single-intensity image maps to 255
/// everywhere.
pub fn histogram_equalize(img: &GrayImage) -> GrayImage {
    let mut hist = [0u64; LEVELS];
    for &p in &img.pixels {
        hist[p as usize] += 1;
    }
    let n = img.pixels.len() as u64;
    let mut cdf = [0u64; LEVELS];
    let mut run = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        run += h;
        *c = run;
    }
    let cdf_min = cdf.iter().copied().find(|&c| c > 0).unwrap_or(n);
    let lut: Vec<u8> = if cdf_min == n {
        vec![255; LEVELS]
    } else {
        cdf.iter()
            .map(|&c| {
                let num = c.saturating_sub(cdf_min) * 255;
                (num / (n - cdf_min)).min(255) as u8
            })
            .collect()
    };
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&p| lut[p as usize]).collect(),
    }
}

/// The four half-resolution bands of a one-level orthonormal Haar transform.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarBands {
    pub ll: Plane,
    /// Low-pass along x, high-pass along y.
    pub lh: Plane,
    /// High-pass along x, low-pass along y.
    pub hl: Plane,
    pub hh: Plane,
}

/// One-level separable Haar analysis with filters `(1, 1)/√2` and `(1, −1)/√2`.
pub fn haar_level1(img: &Plane) -> Result<HaarBands> {
    let (w, h) = (img.width, img.height);
    if w % 2 != 0 || h % 2 != 0 || w == 0 || h == 0 {
        return Err(Error::Image(format!(
            "Haar transform needs even extents, got {w}x{h}; resize the image first"
        )));
    }
    let (hw, hh_) = (w / 2, h / 2);
    let mut bands = HaarBands {
        ll: Plane::zeros(hw, hh_),
        lh: Plane::zeros(hw, hh_),
        hl: Plane::zeros(hw, hh_),
        hh: Plane::zeros(hw, hh_),
    };
    for y in 0..hh_ {
        for x in 0..hw {
            let a = img.data[2 * y * w + 2 * x];
            let b = img.data[2 * y * w + 2 * x + 1];
            let c = img.data[(2 * y + 1) * w + 2 * x];
            let d = img.data[(2 * y + 1) * w + 2 * x + 1];
            let i = y * hw + x;
            bands.ll.data[i] = (a + b + c + d) / 2.0;
            bands.lh.data[i] = (a + b - c - d) / 2.0;
            bands.hl.data[i] = (a - b + c - d) / 2.0;
            bands.hh.data[i] = (a - b - c + d) / 2.0;
        }
    }
    Ok(bands)
}

/// Synthesis counterpart of [`haar_level1`].
pub fn haar_inverse(bands: &HaarBands) -> Plane {
    let (hw, hh_) = (bands.ll.width, bands.ll.height);
    let w = hw * 2;
    let mut out = Plane::zeros(w, hh_ * 2);
    for y in 0..hh_ {
        for x in 0..hw {
            let i = y * hw + x;
            let (ll, lh, hl, hh) = (
                bands.ll.data[i],
                bands.lh.data[i],
                bands.hl.data[i],
                bands.hh.data[i],
            );
            out.data[2 * y * w + 2 * x] = (ll + lh + hl + hh) / 2.0;
            out.data[2 * y * w + 2 * x + 1] = (ll + lh - hl - hh) / 2.0;
            out.data[(2 * y + 1) * w + 2 * x] = (ll - lh + hl - hh) / 2.0;
            out.data[(2 * y + 1) * w + 2 * x + 1] = (ll - lh - hl + hh) / 2.0;
        }
    }
    out
}

/// Real-valued channels in `[0, 1]` sharing one extent.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelImage {
    pub width: usize,
    pub height: usize,
    pub channels: Vec<Vec<f64>>,
}

impl MultiChannelImage {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// `[d, h, w]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        let data: Vec<f64> = self.channels.iter().flatten().copied().collect();
        Tensor::new(vec![self.channels.len(), self.height, self.width], data)
            .expect("channels share one extent")
    }

    /// Per-pixel feature vector (one entry per channel).
    pub fn pixel(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        self.channels.iter().map(move |c| c[i])
    }

    /// Write each channel as an 8-bit PNG: `<stem>_ch<k>.png`.
    pub fn save_debug_pngs(&self, dir: &Path, stem: &str) -> Result<()> {
        for (k, c) in self.channels.iter().enumerate() {
            let px = c.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
            GrayImage::new(self.width, self.height, px)?
                .save_png(&dir.join(format!("{stem}_ch{}.png", k + 1)))?;
        }
        Ok(())
    }
}

/// Equalized intensities, upsampled approximation band and upsampled
/// detail magnitude `√(lh² + hl² + hh²)`, each rescaled to `[0, 1]`.
pub fn assemble_channels(img: &GrayImage) -> Result<MultiChannelImage> {
    let plane = Plane::from_gray(img);
    let bands = haar_level1(&plane)?;
    let low = bands.ll.upsample_nearest(2).normalized();
    let mut detail = Plane::zeros(bands.lh.width, bands.lh.height);
    for (i, d) in detail.data.iter_mut().enumerate() {
        *d = (bands.lh.data[i].powi(2) + bands.hl.data[i].powi(2) + bands.hh.data[i].powi(2))
            .sqrt();
    }
    let detail = detail.upsample_nearest(2).normalized();
    Ok(MultiChannelImage {
        width: img.width,
        height: img.height,
        channels: vec![
            plane.data.iter().map(|v| v / 255.0).collect(),
            low.data,
            detail.data,
        ],
    })
}

/// Which network input to build from a raw image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    /// Equalized intensity plus both wavelet channels.
    Wavelet3,
    /// Equalized intensity only.
    Gray,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Wavelet3 => 3,
            InputMode::Gray => 1,
        }
    }

    pub fn from_channels(d: usize) -> Result<Self> {
        match d {
            3 => Ok(InputMode::Wavelet3),
            1 => Ok(InputMode::Gray),
            _ => Err(Error::Config(format!("input channels must be 1 or 3, got {d}"))),
        }
    }
}

/// Resize → equalize → channel assembly.
pub fn preprocess(img: &GrayImage, size: usize, mode: InputMode) -> Result<MultiChannelImage> {
    let eq = histogram_equalize(&img.resize(size, size)?);
    match mode {
        InputMode::Wavelet3 => assemble_channels(&eq),
        InputMode::Gray => Ok(MultiChannelImage {
            width: eq.width,
            height: eq.height,
            channels: vec![eq.pixels.iter().map(|&p| p as f64 / 255.0).collect()],
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(w: usize, h: usize, px: &[u8]) -> GrayImage {
        GrayImage::new(w, h, px.to_vec()).unwrap()
    }

    #[test]
    fn equalize_constant_image_is_white() {
        let out = histogram_equalize(&GrayImage::filled(3, 2, 7));
        assert!(out.pixels().iter().all(|&p| p == 255));
    }

    #[test]
    fn equalize_minimum_maps_to_zero() {
        let out = histogram_equalize(&gray(2, 2, &[0, 0, 128, 255]));
        assert_eq!(out.pixels(), &[0, 0, 127, 255]);
    }

    #[test]
    fn equalize_four_pixel_worked_example() {
        // cdf = 0.25, 0.75, 1 ⇒ h(20) = ⌊0.5/0.75 · 255⌋ = 170
        let out = histogram_equalize(&gray(2, 2, &[10, 20, 20, 30]));
        assert_eq!(out.pixels(), &[0, 170, 170, 255]);
    }

    #[test]
    fn haar_constant_image() {
        let p = Plane {
            width: 4,
            height: 2,
            data: vec![3.5; 8],
        };
        let b = haar_level1(&p).unwrap();
        assert!(b.ll.data.iter().all(|&v| (v - 7.0).abs() < 1e-12));
        for band in [&b.lh, &b.hl, &b.hh] {
            assert!(band.data.iter().all(|&v| v == 0.0));
        }
        let unit = Plane {
            width: 2,
            height: 2,
            data: vec![1.0; 4],
        };
        assert_eq!(haar_level1(&unit).unwrap().ll.data, vec![2.0]);
    }

    #[test]
    fn haar_rejects_odd_extents() {
        let p = Plane {
            width: 3,
            height: 2,
            data: vec![0.0; 6],
        };
        let err = haar_level1(&p).unwrap_err();
        assert!(err.to_string().contains("resize"));
    }

    #[test]
    fn assembled_channels_shape_and_constant_detail() {
        let c = assemble_channels(&GrayImage::filled(6, 4, 90)).unwrap();
        assert_eq!(c.num_channels(), 3);
        assert!(c.channels.iter().all(|ch| ch.len() == 24));
        assert!(c.channels[2].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_edge_peaks_detail_channel_on_the_step() {
        // 10 columns: the 0/255 step sits between columns 4 and 5, inside
        // the Haar pair (4, 5)
        let (w, h) = (10, 4);
        let px: Vec<u8> = (0..w * h).map(|i| if i % w < 5 { 0 } else { 255 }).collect();
        let c = assemble_channels(&gray(w, h, &px)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let v = c.channels[2][y * w + x];
                if x == 4 || x == 5 {
                    assert_eq!(v, 1.0);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn preprocess_resizes_and_selects_channels() {
        let px: Vec<u8> = (0..30 * 20).map(|i| (i % 251) as u8).collect();
        let img = gray(30, 20, &px);
        let m = preprocess(&img, 16, InputMode::Wavelet3).unwrap();
        assert_eq!((m.width, m.height, m.num_channels()), (16, 16, 3));
        let g = preprocess(&img, 16, InputMode::Gray).unwrap();
        assert_eq!(g.num_channels(), 1);
        assert_eq!(g.to_tensor().shape(), &[1, 16, 16]);
    }

    fn image_strategy() -> impl Strategy<Value = GrayImage> {
        (1usize..6, 1usize..6).prop_flat_map(|(hw, hh)| {
            proptest::collection::vec(any::<u8>(), 4 * hw * hh)
                .prop_map(move |px| GrayImage::new(2 * hw, 2 * hh, px).unwrap())
        })
    }

    proptest! {
        #[test]
        fn equalize_is_monotone(img in image_strategy()) {
            let out = histogram_equalize(&img);
            let mut pairs: Vec<(u8, u8)> = img.pixels().iter().copied().zip(out.pixels().iter().copied()).collect();
            pairs.sort();
            for w in pairs.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
        }

        #[test]
        fn equalize_spans_full_range(img in image_strategy()) {
            let distinct = img.pixels().iter().collect::<std::collections::BTreeSet<_>>().len();
            prop_assume!(distinct >= 2);
            let out = histogram_equalize(&img);
            prop_assert_eq!(*out.pixels().iter().min().unwrap(), 0);
            prop_assert_eq!(*out.pixels().iter().max().unwrap(), 255);
        }

        #[test]
        fn equalize_is_nearly_idempotent(img in image_strategy()) {
            let once = histogram_equalize(&img);
            let twice = histogram_equalize(&once);
            for (a, b) in once.pixels().iter().zip(twice.pixels()) {
                prop_assert!((*a as i32 - *b as i32).abs() <= 1);
            }
        }

        #[test]
        fn haar_reconstructs_and_conserves_energy(img in image_strategy()) {
            let p = Plane::from_gray(&img);
            let b = haar_level1(&p).unwrap();
            let back = haar_inverse(&b);
            for (x, y) in p.data.iter().zip(&back.data) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let e = b.ll.energy() + b.lh.energy() + b.hl.energy() + b.hh.energy();
            prop_assert!((e - p.energy()).abs() <= 1e-9 * p.energy().max(1.0));
        }

        #[test]
        fn assembled_channels_are_unit_range(img in image_strategy()) {
            let c = assemble_channels(&histogram_equalize(&img)).unwrap();
            for ch in &c.channels {
                prop_assert!(ch.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

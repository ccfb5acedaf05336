//! Label maps, synthetic layered phantoms, segmentation metrics and the
//! k-fold protocol.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::preprocess::GrayImage;
use crate::NUM_CLASSES;

pub const BACKGROUND: u8 = 0;
pub const TUMOR: u8 = 1;
pub const FAT: u8 = 2;
pub const MAMMARY: u8 = 3;
pub const MUSCLE: u8 = 4;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "tumor", "fat", "mammary", "muscle"];

/// Black, red, green, yellow, blue.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [255, 0, 0],
    [0, 255, 0],
    [255, 255, 0],
    [0, 0, 255],
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Dataset(format!(
                "{} labels for a {width}x{height} map",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Dataset(format!(
                "label {bad} outside 0..{}",
                NUM_CLASSES - 1
            )));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        assert!((class as usize) < NUM_CLASSES);
        Self {
            width,
            height,
            labels: vec![class; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        assert!((class as usize) < NUM_CLASSES);
        self.labels[y * self.width + x] = class;
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> LabelMap {
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (y * self.height) / height;
            for x in 0..width {
                out.push(self.labels[sy * self.width + (x * self.width) / width]);
            }
        }
        LabelMap {
            width,
            height,
            labels: out,
        }
    }

    /// Indexed PNG with the fixed five-entry palette.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(PALETTE.concat());
        let png_err = |e: png::EncodingError| Error::Image(format!("{}: {e}", path.display()));
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&self.labels).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }

    /// Reads 8-bit indexed PNGs (palette indices are the classes), 8-bit
    /// grayscale PNGs holding raw class values, and RGB PNGs drawn in the
    /// class palette.
    pub fn load_png(path: &Path) -> Result<Self> {
        let ctx = |e: png::DecodingError| Error::Image(format!("{}: {e}", path.display()));
        let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
        dec.set_transformations(png::Transformations::IDENTITY);
        let mut reader = dec.read_info().map_err(ctx)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Image(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(ctx)?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Image(format!(
                "{}: label maps must be 8-bit, found {:?}",
                path.display(),
                info.bit_depth
            )));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        buf.truncate(info.buffer_size());
        let labels = match info.color_type {
            png::ColorType::Indexed | png::ColorType::Grayscale => buf,
            png::ColorType::Rgb | png::ColorType::Rgba => {
                let step = info.color_type.samples();
                buf.chunks(step)
                    .map(|px| {
                        PALETTE
                            .iter()
                            .position(|c| c[..] == px[..3])
                            .map(|i| i as u8)
                            .ok_or_else(|| {
                                Error::Image(format!(
                                    "{}: color {:?} is not in the label palette",
                                    path.display(),
                                    &px[..3]
                                ))
                            })
                    })
                    .collect::<Result<Vec<u8>>>()?
            }
            other => {
                return Err(Error::Image(format!(
                    "{}: unsupported label color type {other:?}",
                    path.display()
                )))
            }
        };
        Self::new(w, h, labels)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Gray image blended 50/50 with the class palette.
    pub fn save_overlay(&self, base: &GrayImage, path: &Path) -> Result<()> {
        if (base.width(), base.height()) != (self.width, self.height) {
            return Err(Error::Image(format!(
                "overlay base is {}x{}, labels are {}x{}",
                base.width(),
                base.height(),
                self.width,
                self.height
            )));
        }
        let mut rgb = Vec::with_capacity(self.labels.len() * 3);
        for (&g, &l) in base.pixels().iter().zip(&self.labels) {
            for c in PALETTE[l as usize] {
                rgb.push(((g as u16 + c as u16 + 1) / 2) as u8);
            }
        }
        image::RgbImage::from_raw(self.width as u32, self.height as u32, rgb)
            .expect("buffer sized from extents")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Number of 4-connected components of `class`.
pub fn count_components(map: &LabelMap, class: u8) -> usize {
    let (w, h) = (map.width, map.height);
    let mut seen = vec![false; w * h];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..w * h {
        if seen[start] || map.labels[start] != class {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !seen[j] && map.labels[j] == class {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    count
}

// ---------------------------------------------------------------------------
// Phantoms

/// Layered breast-ultrasound-like phantom. Bands run top to bottom:
/// background (skin), fat, mammary, muscle, background.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    /// Mean gray level of each band, top to bottom.
    pub layer_means: [f64; 5],
    /// Fraction of the image height taken by each band.
    pub band_fractions: [f64; 5],
    pub tumor_count: usize,
    pub tumor_mean: f64,
    /// Inclusive range of horizontal semi-axes, in pixels.
    pub tumor_rx: (f64, f64),
    pub tumor_ry: (f64, f64),
    /// Standard deviation of the multiplicative speckle factor.
    pub speckle: f64,
    /// Amplitude of the sinusoidal boundary displacement, in pixels.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            layer_means: [120.0, 70.0, 165.0, 110.0, 40.0],
            band_fractions: [0.12, 0.2, 0.38, 0.18, 0.12],
            tumor_count: 1,
            tumor_mean: 45.0,
            tumor_rx: (4.0, 8.0),
            tumor_ry: (3.0, 5.0),
            speckle: 0.25,
            jitter: 2.0,
            seed: 0,
        }
    }
}

/// Band of a row inside one column, from the four boundary depths.
fn band_at(row_center: f64, bounds: &[f64; 4]) -> usize {
    bounds.iter().take_while(|&&b| row_center >= b).count()
}

const BAND_CLASSES: [u8; 5] = [BACKGROUND, FAT, MAMMARY, MUSCLE, BACKGROUND];

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("phantom spec: {m}")));
        if self.width < 2 || self.height < 2 {
            return bad(format!("size {}x{} below 2x2", self.width, self.height));
        }
        let total: f64 = self.band_fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.band_fractions.iter().any(|&f| f <= 0.0) {
            return bad(format!(
                "band fractions {:?} must be positive and sum to 1",
                self.band_fractions
            ));
        }
        if self.tumor_count > 2 {
            return bad(format!("tumor count {} not in 0..=2", self.tumor_count));
        }
        for (name, (lo, hi)) in [("tumor_rx", self.tumor_rx), ("tumor_ry", self.tumor_ry)] {
            if !(lo > 0.0 && lo <= hi) {
                return bad(format!("{name} range ({lo}, {hi}) is empty"));
            }
        }
        if !(self.speckle >= 0.0 && self.jitter >= 0.0) {
            return bad("speckle and jitter must be non-negative".into());
        }
        let means = self.layer_means.iter().chain([&self.tumor_mean]);
        if means.into_iter().any(|m| !(0.0..=255.0).contains(m)) {
            return bad("intensities must lie in 0..=255".into());
        }
        Ok(())
    }

    /// Sidecar text: one `key = value` line per field.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "layer_means = {}", list(&self.layer_means));
        let _ = writeln!(s, "band_fractions = {}", list(&self.band_fractions));
        let _ = writeln!(s, "tumor_count = {}", self.tumor_count);
        let _ = writeln!(s, "tumor_mean = {}", self.tumor_mean);
        let _ = writeln!(s, "tumor_rx = {}", list(&[self.tumor_rx.0, self.tumor_rx.1]));
        let _ = writeln!(s, "tumor_ry = {}", list(&[self.tumor_ry.0, self.tumor_ry.1]));
        let _ = writeln!(s, "speckle = {}", self.speckle);
        let _ = writeln!(s, "jitter = {}", self.jitter);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

/// Render a phantom and its exact label map. Deterministic in `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(GrayImage, LabelMap)> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // boundary depth of each of the four interfaces, per column
    let mut cum = 0.0;
    let mut shapes = [(0.0, 0.0, 0.0); 4];
    for (k, s) in shapes.iter_mut().enumerate() {
        cum += spec.band_fractions[k];
        let freq = rng.random_range(0.5..1.5);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        *s = (cum * h as f64, freq, phase);
    }
    let bounds: Vec<[f64; 4]> = (0..w)
        .map(|x| {
            let mut b = [0.0; 4];
            for k in 0..4 {
                let (base, freq, phase) = shapes[k];
                let t = std::f64::consts::TAU * freq * (x as f64 + 0.5) / w as f64 + phase;
                b[k] = base + spec.jitter * t.sin();
                if k > 0 {
                    b[k] = b[k].max(b[k - 1]);
                }
            }
            b
        })
        .collect();

    let mut labels = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = BAND_CLASSES[band_at(y as f64 + 0.5, &bounds[x])];
        }
    }

    let tumors = place_tumors(spec, &bounds, &mut rng)?;
    for t in &tumors {
        for y in 0..h {
            for x in 0..w {
                if t.contains(x, y) {
                    labels[y * w + x] = TUMOR;
                }
            }
        }
    }

    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mean = if labels[y * w + x] == TUMOR {
                spec.tumor_mean
            } else {
                spec.layer_means[band_at(y as f64 + 0.5, &bounds[x])]
            };
            let n: f64 = StandardNormal.sample(&mut rng);
            let v = mean * (1.0 + spec.speckle * n).max(0.0);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok((GrayImage::new(w, h, pixels)?, LabelMap::new(w, h, labels)?))
}

fn place_tumors(spec: &PhantomSpec, bounds: &[[f64; 4]], rng: &mut ChaCha8Rng) -> Result<Vec<Ellipse>> {
    let w = spec.width;
    let thinnest = bounds
        .iter()
        .map(|b| b[2] - b[1])
        .fold(f64::INFINITY, f64::min);
    if spec.tumor_count > 0 && 2.0 * spec.tumor_ry.0 + 1.0 > thinnest {
        return Err(Error::Config(format!(
            "tumor height {} exceeds the mammary band ({thinnest:.1} px at its thinnest)",
            2.0 * spec.tumor_ry.0
        )));
    }
    let mut placed: Vec<Ellipse> = Vec::new();
    for attempt in 0..1000 {
        if placed.len() == spec.tumor_count {
            break;
        }
        if attempt == 999 {
            return Err(Error::Config(format!(
                "could not fit {} separated tumors inside the mammary band",
                spec.tumor_count
            )));
        }
        let rx = rng.random_range(spec.tumor_rx.0..=spec.tumor_rx.1);
        let ry = rng.random_range(spec.tumor_ry.0..=spec.tumor_ry.1);
        if 2.0 * rx + 2.0 > w as f64 {
            continue;
        }
        let cx = rng.random_range(rx + 1.0..=w as f64 - rx - 1.0);
        let lo_col = (cx - rx).floor().max(0.0) as usize;
        let hi_col = ((cx + rx).ceil() as usize).min(w - 1);
        let top = bounds[lo_col..=hi_col].iter().map(|b| b[1]).fold(f64::MIN, f64::max);
        let bot = bounds[lo_col..=hi_col].iter().map(|b| b[2]).fold(f64::MAX, f64::min);
        // one pixel of mammary tissue kept above and below the ellipse
        let (lo, hi) = (top + ry + 1.0, bot - ry - 1.0);
        if lo > hi {
            continue;
        }
        let cy = rng.random_range(lo..=hi);
        let clear = placed
            .iter()
            .all(|p| (p.cx - cx).abs() >= p.rx + rx + 3.0);
        if clear {
            placed.push(Ellipse { cx, cy, rx, ry });
        }
    }
    Ok(placed)
}

// ---------------------------------------------------------------------------
// Metrics

/// Pixel counts for one class: `|A_r ∩ A_m|`, `|A_r|`, `|A_m|`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl ConfusionCounts {
    pub fn union(&self) -> u64 {
        self.predicted + self.truth - self.intersection
    }

    pub fn add(&mut self, o: &ConfusionCounts) {
        self.intersection += o.intersection;
        self.predicted += o.predicted;
        self.truth += o.truth;
    }

    pub fn metrics(&self) -> ClassMetrics {
        let union = self.union();
        let iou = if union == 0 {
            1.0
        } else {
            self.intersection as f64 / union as f64
        };
        if self.truth == 0 {
            return ClassMetrics {
                tpr: None,
                fpr: None,
                iou,
            };
        }
        let m = self.truth as f64;
        ClassMetrics {
            tpr: Some(self.intersection as f64 / m),
            fpr: Some((self.predicted - self.intersection) as f64 / m),
            iou,
        }
    }
}

/// TPR and FPR are absent when the class has no ground-truth pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub iou: f64,
}

fn check_pair(pred: &LabelMap, truth: &LabelMap) -> Result<()> {
    if (pred.width, pred.height) != (truth.width, truth.height) {
        return Err(Error::Dataset(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.width, pred.height, truth.width, truth.height
        )));
    }
    Ok(())
}

pub fn class_counts(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<ConfusionCounts> {
    check_pair(pred, truth)?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        let (in_r, in_m) = (p == class, t == class);
        c.predicted += in_r as u64;
        c.truth += in_m as u64;
        c.intersection += (in_r && in_m) as u64;
    }
    Ok(c)
}

pub fn metrics(pred: &LabelMap, truth: &LabelMap, class: u8) -> Result<ClassMetrics> {
    Ok(class_counts(pred, truth, class)?.metrics())
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouReport {
    pub counts: [ConfusionCounts; NUM_CLASSES],
    pub per_class: [f64; NUM_CLASSES],
    pub mean: f64,
}

/// Per-class IoU from counts pooled over the whole set, and their mean.
pub fn mean_iou(preds: &[LabelMap], truths: &[LabelMap]) -> Result<IouReport> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Dataset(format!(
            "{} predictions for {} ground-truth maps",
            preds.len(),
            truths.len()
        )));
    }
    let mut counts = [ConfusionCounts::default(); NUM_CLASSES];
    for (p, t) in preds.iter().zip(truths) {
        for (c, acc) in counts.iter_mut().enumerate() {
            acc.add(&class_counts(p, t, c as u8)?);
        }
    }
    let per_class = counts.map(|c| c.metrics().iou);
    let mean = per_class.iter().sum::<f64>() / NUM_CLASSES as f64;
    Ok(IouReport {
        counts,
        per_class,
        mean,
    })
}

// ---------------------------------------------------------------------------
// Manifest and folds

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub image: PathBuf,
    pub label: PathBuf,
    pub case_id: String,
}

impl Record {
    pub fn load(&self) -> Result<(GrayImage, LabelMap)> {
        let img = GrayImage::load(&self.image)?;
        let lab = LabelMap::load_png(&self.label)?;
        if (img.width(), img.height()) != (lab.width(), lab.height()) {
            return Err(Error::Dataset(format!(
                "case {}: image {}x{} but labels {}x{}",
                self.case_id,
                img.width(),
                img.height(),
                lab.width(),
                lab.height()
            )));
        }
        Ok((img, lab))
    }
}

pub const MANIFEST_HEADER: [&str; 3] = ["image", "label", "case_id"];

/// Relative paths are written relative to the manifest's directory.
pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for r in records {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        w.write_record([rel(&r.image), rel(&r.label), r.case_id.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `image,label,case_id`; relative paths resolve against the
/// manifest's directory and must exist.
pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Dataset(format!(
            "{}: header must be `image,label,case_id`, found `{}`",
            path.display(),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let rec = Record {
            image: base.join(&row[0]),
            label: base.join(&row[1]),
            case_id: row[2].to_string(),
        };
        for p in [&rec.image, &rec.label] {
            if !p.exists() {
                return Err(Error::Dataset(format!(
                    "case {}: {} does not exist",
                    rec.case_id,
                    p.display()
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// Fold index for each of `n` records: a seeded shuffle dealt round-robin
/// into `k` folds, so fold sizes differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || n < k {
        return Err(Error::Dataset(format!(
            "{n} records cannot be split into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &rec) in order.iter().enumerate() {
        folds[rec] = pos % k;
    }
    Ok(folds)
}

//! U-Net style segmentation network with fuzzy layers, its Adam training
//! loop and inference.
//!
//! Layout for depth `L` and base width `w` (level `l` has `w·2^l` maps):
//!
//! ```text
//! input ─ [fuzzy.input] ─ enc0.conv1 ─ relu ─ [fuzzy.feature] ─ enc0.conv2 ─ relu ─┬─ pool ─ enc1 … ─ mid
//!                                                                                  │
//! head (1×1) ─ dec0.conv2 ─ dec0.conv1 ─ concat ─ dec0.up ─ upsample ─ … ─ dec{L-1} ─┘
//! ```
//!
//! Every 3×3 conv is zero padded so spatial extents only change at pooling
//! and upsampling.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fuzzy::{fuzzy_block, init_membership_params, CategoryStats, MembershipKind};
use crate::optim::{AdamConfig, AdamState};
use crate::preprocess::MultiChannelImage;
use crate::tensor::{ParamStore, Tensor};
use crate::NUM_CLASSES;

pub use crate::unary::UnaryField;

/// Scale applied to the He bound of the 1×1 output conv so an untrained
/// network starts close to the uniform distribution.
const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    NonFuzzy,
    Fuzzy(MembershipKind),
}

impl Variant {
    pub fn membership(self) -> Option<MembershipKind> {
        match self {
            Variant::NonFuzzy => None,
            Variant::Fuzzy(k) => Some(k),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::NonFuzzy => f.write_str("nonfuzzy"),
            Variant::Fuzzy(k) => write!(f, "fuzzy-{}", k.as_str()),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "nonfuzzy" | "non-fuzzy" | "plain" => Ok(Variant::NonFuzzy),
            _ => match s.strip_prefix("fuzzy-") {
                Some(kind) => Ok(Variant::Fuzzy(kind.parse()?)),
                None => Err(Error::InvalidArgument(format!(
                    "unknown variant `{s}` (expected nonfuzzy|fuzzy-sigmoid|fuzzy-gaussian)"
                ))),
            },
        }
    }
}

/// Architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub variant: Variant,
    /// One membership pair per pixel, or a single pair per category and
    /// channel shared across the image.
    pub per_pixel_fuzzy: bool,
    pub base_width: usize,
    pub depth: usize,
    pub image_size: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            variant: Variant::Fuzzy(MembershipKind::Sigmoid),
            per_pixel_fuzzy: true,
            base_width: 64,
            depth: 4,
            image_size: 256,
            batch_size: 4,
            epochs: 60,
            learning_rate: 1e-3,
            decay: 0.95,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.input_channels, 1 | 3) {
            return bad(format!("input channels must be 1 or 3, got {}", self.input_channels));
        }
        if self.depth == 0 || self.depth > 8 {
            return bad(format!("depth must be in 1..=8, got {}", self.depth));
        }
        if self.base_width == 0 {
            return bad("base width must be positive".into());
        }
        let unit = 1usize << self.depth;
        if self.image_size == 0 || self.image_size % unit != 0 {
            return bad(format!(
                "image size {} is not divisible by 2^depth = {unit}",
                self.image_size
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must be in (0, 1], got {}", self.decay));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    fn fuzzy_plane(&self) -> (usize, usize) {
        if self.per_pixel_fuzzy {
            (self.image_size, self.image_size)
        } else {
            (1, 1)
        }
    }

    /// Conv layers as `(name, in, out, kernel)`, in parameter order.
    fn conv_layers(&self) -> Vec<(String, usize, usize, usize)> {
        let mut v = Vec::new();
        let mut cin = self.input_channels;
        for l in 0..self.depth {
            let c = self.width(l);
            v.push((format!("enc{l}.conv1"), cin, c, 3));
            v.push((format!("enc{l}.conv2"), c, c, 3));
            cin = c;
        }
        let c = self.width(self.depth);
        v.push(("mid.conv1".into(), cin, c, 3));
        v.push(("mid.conv2".into(), c, c, 3));
        for l in (0..self.depth).rev() {
            let c = self.width(l);
            v.push((format!("dec{l}.up"), 2 * c, c, 3));
            v.push((format!("dec{l}.conv1"), 2 * c, c, 3));
            v.push((format!("dec{l}.conv2"), c, c, 3));
        }
        v.push(("head".into(), self.base_width, NUM_CLASSES, 1));
        v
    }

    /// Expected parameter shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        if let Variant::Fuzzy(kind) = self.variant {
            let (ph, pw) = self.fuzzy_plane();
            for (block, d) in [("input", self.input_channels), ("feature", self.base_width)] {
                for bank in kind.param_names() {
                    v.push((format!("fuzzy.{block}.{bank}"), vec![NUM_CLASSES, d, ph, pw]));
                }
            }
        }
        for (name, cin, cout, k) in self.conv_layers() {
            v.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            v.push((format!("{name}.bias"), vec![cout]));
        }
        v
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// A labeled training example at network resolution.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[d, s, s]`
    pub input: Tensor,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn new(image: &MultiChannelImage, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != image.width * image.height {
            return Err(Error::InvalidArgument(format!(
                "{} labels for a {}x{} image",
                labels.len(),
                image.width,
                image.height
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("label {bad} is not a class index")));
        }
        Ok(Self {
            input: image.to_tensor(),
            labels,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

/// Conv weights get He-uniform values and zero biases. Fuzzy banks get
/// placeholder category statistics (mean 0.5, variance 0.25) until
/// [`init_fuzzy_from_data`] replaces them.
pub fn build_network(cfg: &NetworkConfig) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    if let Variant::Fuzzy(kind) = cfg.variant {
        for (block, d) in [("input", cfg.input_channels), ("feature", cfg.base_width)] {
            // every category sees the values 0 and 1
            let mut stats = CategoryStats::new(NUM_CLASSES, d);
            let labels: Vec<u8> = (0..NUM_CLASSES as u8).flat_map(|c| [c, c]).collect();
            let planes: Vec<f64> = (0..d * labels.len()).map(|i| (i % 2) as f64).collect();
            stats.accumulate(&planes, &labels)?;
            insert_membership(&mut params, block, kind, &stats, cfg.fuzzy_plane(), &mut rng);
        }
    }
    for (name, cin, cout, k) in cfg.conv_layers() {
        let fan_in = (cin * k * k) as f64;
        let mut bound = (6.0 / fan_in).sqrt();
        if name == "head" {
            bound *= HEAD_INIT_SCALE;
        }
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| rng.random_range(-bound..=bound));
        params.insert(format!("{name}.weight"), w);
        params.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }
    Ok(Network {
        config: cfg.clone(),
        params,
    })
}

fn insert_membership(
    params: &mut ParamStore,
    block: &str,
    kind: MembershipKind,
    stats: &CategoryStats,
    plane: (usize, usize),
    rng: &mut ChaCha8Rng,
) {
    let (first, second) = init_membership_params(stats, kind, plane, rng).into_banks();
    let [n1, n2] = kind.param_names();
    params.insert(format!("fuzzy.{block}.{n1}"), first);
    params.insert(format!("fuzzy.{block}.{n2}"), second);
}

/// Initialize both fuzzy blocks from per-category statistics of the
/// training set: input planes directly, feature maps through a forward pass
/// of the (already initialized) input block and first conv.
pub fn init_fuzzy_from_data(net: &mut Network, samples: &[Sample]) -> Result<()> {
    let Variant::Fuzzy(kind) = net.config.variant else {
        return Ok(());
    };
    if samples.is_empty() {
        return Err(Error::Dataset("no training samples".into()));
    }
    let cfg = net.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f022);
    let mut stats = CategoryStats::new(NUM_CLASSES, cfg.input_channels);
    for s in samples {
        net.check_input(&s.input)?;
        stats.accumulate(s.input.data(), &s.labels)?;
    }
    insert_membership(&mut net.params, "input", kind, &stats, cfg.fuzzy_plane(), &mut rng);

    let mut stats = CategoryStats::new(NUM_CLASSES, cfg.base_width);
    for s in samples {
        let mut g = Graph::new();
        let vars = net.constants(&mut g);
        let x = g.constant(batch_of(std::slice::from_ref(s)));
        let h = net.stem(&mut g, &vars, x, false)?;
        stats.accumulate(g.value(h).data(), &s.labels)?;
    }
    insert_membership(&mut net.params, "feature", kind, &stats, cfg.fuzzy_plane(), &mut rng);
    Ok(())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Force every fuzzy uncertainty map to zero, turning fusion into the
    /// identity.
    pub zero_uncertainty: bool,
}

impl Network {
    /// Wrap a loaded parameter store, checking names and shapes against the
    /// architecture.
    pub fn from_params(cfg: &NetworkConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = cfg.param_shapes();
        for (name, shape) in &expected {
            match params.get(name) {
                None => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` required by variant {} is missing",
                        cfg.variant
                    )))
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = params
            .names()
            .iter()
            .find(|n| !expected.iter().any(|(e, _)| e == *n))
        {
            return Err(Error::Checkpoint(format!(
                "parameter `{extra}` is not part of variant {}",
                cfg.variant
            )));
        }
        // Re-order to the canonical layout.
        let mut ordered = ParamStore::new();
        for (name, _) in &expected {
            ordered.insert(name.clone(), params.require(name)?.clone());
        }
        Ok(Self {
            config: cfg.clone(),
            params: ordered,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.input_channels, c.image_size, c.image_size];
        if x.shape() != want {
            return Err(Error::Shape {
                op: "network input",
                detail: format!("got {:?}, network expects {want:?}", x.shape()),
            });
        }
        Ok(())
    }

    fn constants(&self, g: &mut Graph) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.constant(t.clone())).collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Result<Var> {
        self.params
            .index_of(name)
            .map(|i| vars[i])
            .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}` is missing")))
    }

    fn conv(&self, g: &mut Graph, vars: &[Var], name: &str, x: Var, relu: bool) -> Result<Var> {
        let w = self.var(vars, &format!("{name}.weight"))?;
        let b = self.var(vars, &format!("{name}.bias"))?;
        let pad = g.value(w).shape()[2] / 2;
        let y = g.conv2d(x, w, b, pad)?;
        Ok(if relu { g.relu(y) } else { y })
    }

    fn fuzzy(&self, g: &mut Graph, vars: &[Var], block: &str, x: Var, zero: bool) -> Result<Var> {
        match self.config.variant {
            Variant::NonFuzzy => Ok(x),
            Variant::Fuzzy(kind) => {
                let [n1, n2] = kind.param_names();
                let p = self.var(vars, &format!("fuzzy.{block}.{n1}"))?;
                let q = self.var(vars, &format!("fuzzy.{block}.{n2}"))?;
                fuzzy_block(g, x, kind, p, q, zero)
            }
        }
    }

    /// Input fuzzy block followed by the first conv + ReLU.
    fn stem(&self, g: &mut Graph, vars: &[Var], x: Var, zero: bool) -> Result<Var> {
        let x = self.fuzzy(g, vars, "input", x, zero)?;
        self.conv(g, vars, "enc0.conv1", x, true)
    }

    /// Logits `[n, 5, s, s]` for a batch `x` of shape `[n, d, s, s]`.
    /// `vars` holds one entry per parameter, in `self.params` order.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, opts: ForwardOptions) -> Result<Var> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let zero = opts.zero_uncertainty;
        let depth = self.config.depth;
        let mut h = self.stem(g, vars, x, zero)?;
        h = self.fuzzy(g, vars, "feature", h, zero)?;
        h = self.conv(g, vars, "enc0.conv2", h, true)?;
        let mut skips = vec![h];
        for l in 1..depth {
            h = g.max_pool2(h)?;
            h = self.conv(g, vars, &format!("enc{l}.conv1"), h, true)?;
            h = self.conv(g, vars, &format!("enc{l}.conv2"), h, true)?;
            skips.push(h);
        }
        h = g.max_pool2(h)?;
        h = self.conv(g, vars, "mid.conv1", h, true)?;
        h = self.conv(g, vars, "mid.conv2", h, true)?;
        for l in (0..depth).rev() {
            h = g.upsample2(h)?;
            h = self.conv(g, vars, &format!("dec{l}.up"), h, true)?;
            h = g.concat_channels(skips[l], h)?;
            h = self.conv(g, vars, &format!("dec{l}.conv1"), h, true)?;
            h = self.conv(g, vars, &format!("dec{l}.conv2"), h, true)?;
        }
        self.conv(g, vars, "head", h, false)
    }

    /// Class probabilities `[n, 5, s, s]` for a batch of inputs.
    pub fn predict(&self, batch: &Tensor, opts: ForwardOptions) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.constants(&mut g);
        let x = g.constant(batch.clone());
        let logits = self.forward(&mut g, &vars, x, opts)?;
        let p = g.softmax_channels(logits)?;
        Ok(g.value(p).clone())
    }

    /// Mean cross-entropy of the batch, on a fresh graph built from `vars`.
    pub fn loss(
        &self,
        g: &mut Graph,
        vars: &[Var],
        batch: &[&Sample],
        opts: ForwardOptions,
    ) -> Result<Var> {
        let owned: Vec<Sample> = batch.iter().map(|s| (*s).clone()).collect();
        let x = g.constant(batch_of(&owned));
        let logits = self.forward(g, vars, x, opts)?;
        let p = g.softmax_channels(logits)?;
        g.cross_entropy(p, &one_hot_batch(&owned, self.config.image_size))
    }
}

fn batch_of(samples: &[Sample]) -> Tensor {
    let shape = samples[0].input.shape();
    let mut data = Vec::with_capacity(samples.len() * samples[0].input.len());
    for s in samples {
        data.extend_from_slice(s.input.data());
    }
    Tensor::new(vec![samples.len(), shape[0], shape[1], shape[2]], data)
        .expect("samples share a shape")
}

/// `[n, 5, s, s]` one-hot targets; class `r` sets channel `r`.
pub fn one_hot_batch(samples: &[Sample], size: usize) -> Tensor {
    let hw = size * size;
    let mut t = Tensor::zeros(&[samples.len(), NUM_CLASSES, size, size]);
    let dst = t.data_mut();
    for (n, s) in samples.iter().enumerate() {
        for (i, &lab) in s.labels.iter().enumerate() {
            dst[(n * NUM_CLASSES + lab as usize) * hw + i] = 1.0;
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

pub fn write_loss_csv<W: Write>(records: &[LossRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "batch", "loss"])?;
    for r in records {
        w.write_record([r.epoch.to_string(), r.batch.to_string(), r.loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_loss_csv(records: &[LossRecord], path: &Path) -> Result<()> {
    write_loss_csv(records, std::fs::File::create(path)?)
}

/// Train for `config.epochs` epochs of `⌊M/P⌋` shuffled batches, decaying
/// the learning rate after each epoch. Fuzzy blocks are re-initialized from
/// `samples` first; pass `init_fuzzy = false` to keep the current values
/// (e.g. when resuming).
pub fn train(net: &mut Network, samples: &[Sample], init_fuzzy: bool) -> Result<Vec<LossRecord>> {
    let cfg = net.config.clone();
    if samples.is_empty() {
        return Err(Error::Dataset("training fold is empty".into()));
    }
    for s in samples {
        net.check_input(&s.input)?;
        if s.labels.len() != cfg.image_size * cfg.image_size {
            return Err(Error::Dataset(format!(
                "{} labels for a {0}x{0} network",
                s.labels.len()
            )));
        }
    }
    let batches = samples.len() / cfg.batch_size;
    if batches == 0 {
        return Err(Error::Dataset(format!(
            "training set of {} images is smaller than the batch size {}",
            samples.len(),
            cfg.batch_size
        )));
    }
    if init_fuzzy {
        init_fuzzy_from_data(net, samples)?;
    }
    let mut adam = AdamState::new(&net.params, cfg.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs * batches);
    let opts = ForwardOptions::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for b in 0..batches {
            let batch: Vec<&Sample> = order[b * cfg.batch_size..(b + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &samples[i])
                .collect();
            let mut g = Graph::new();
            let vars: Vec<Var> = net.params.tensors().iter().map(|t| g.param(t.clone())).collect();
            let loss = net.loss(&mut g, &vars, &batch, opts)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: value,
                });
            }
            let grads = g.backward(loss)?;
            let refs: Vec<Option<&Tensor>> = vars.iter().map(|&v| grads.get(v)).collect();
            adam.step(&mut net.params, &refs)?;
            trace.push(LossRecord {
                epoch,
                batch: b,
                loss: value,
            });
            epoch_loss += value;
        }
        log::info!(
            "epoch {epoch}: mean loss {:.5}, lr {:.3e}",
            epoch_loss / batches as f64,
            adam.config.learning_rate
        );
        adam.config.learning_rate *= cfg.decay;
    }
    Ok(trace)
}

/// Per-pixel class distribution for one preprocessed image.
pub fn infer(net: &Network, image: &MultiChannelImage) -> Result<UnaryField> {
    let x = image.to_tensor();
    net.check_input(&x)?;
    let shape = x.shape().to_vec();
    let batch = x.reshape(&[1, shape[0], shape[1], shape[2]])?;
    let p = net.predict(&batch, ForwardOptions::default())?;
    UnaryField::from_tensor(&p)
}

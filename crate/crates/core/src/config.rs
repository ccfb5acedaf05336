//! Flat `key = value` run configuration covering the network, the CRF,
//! preprocessing, phantom generation and fold settings.

use std::fmt::Write as _;
use std::path::Path;

use crate::dataset::PhantomSpec;
use crate::densecrf::CrfParams;
use crate::error::{Error, Result};
use crate::fcn::{NetworkConfig, Variant};
use crate::fuzzy::MembershipKind;
use crate::preprocess::InputMode;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub input_mode: InputMode,
    pub network: NetworkConfig,
    pub crf: CrfParams,
    /// Template for generated phantoms; size and seed are filled per image.
    pub phantom: PhantomSpec,
    pub phantom_count: usize,
    /// Tumor counts assigned to phantoms in rotation.
    pub tumor_cycle: Vec<usize>,
    pub folds: usize,
    pub test_fold: usize,
}

impl Default for RunConfig {
    /// The scaled synthetic experiment: 200 phantoms at 64×64, ten folds,
    /// a depth-2 width-8 network trained for 60 epochs.
    fn default() -> Self {
        Self {
            seed: 0,
            input_mode: InputMode::Wavelet3,
            network: NetworkConfig {
                base_width: 8,
                depth: 2,
                image_size: 64,
                ..NetworkConfig::default()
            },
            crf: CrfParams::default(),
            phantom: PhantomSpec::default(),
            phantom_count: 200,
            tumor_cycle: vec![0, 1, 2],
            folds: 10,
            test_fold: 0,
        }
    }
}

struct Key {
    name: &'static str,
    help: &'static str,
}

const KEYS: &[Key] = &[
    Key { name: "seed", help: "seed for phantoms, folds, initialization and shuffling" },
    Key { name: "input_mode", help: "wavelet3 (intensity, LL, detail) or gray" },
    Key { name: "variant", help: "nonfuzzy | fuzzy-sigmoid | fuzzy-gaussian" },
    Key { name: "per_pixel_fuzzy", help: "one membership pair per pixel (true) or shared (false)" },
    Key { name: "base_width", help: "feature maps at the first level" },
    Key { name: "depth", help: "encoder levels; image_size must be divisible by 2^depth" },
    Key { name: "image_size", help: "network input side length in pixels" },
    Key { name: "batch_size", help: "images per Adam step" },
    Key { name: "epochs", help: "passes over the training fold" },
    Key { name: "learning_rate", help: "initial Adam step size" },
    Key { name: "decay", help: "learning-rate factor applied after every epoch" },
    Key { name: "beta1", help: "Adam first-moment decay" },
    Key { name: "beta2", help: "Adam second-moment decay" },
    Key { name: "adam_eps", help: "Adam denominator guard" },
    Key { name: "crf_w_appearance", help: "weight of the position + intensity kernel" },
    Key { name: "crf_w_smoothness", help: "weight of the position kernel" },
    Key { name: "crf_w_context", help: "weight of the position + context kernel (0 = two-kernel CRF)" },
    Key { name: "crf_sigma_alpha", help: "appearance kernel spatial scale, pixels" },
    Key { name: "crf_sigma_beta", help: "appearance kernel intensity scale, [0,1] units" },
    Key { name: "crf_sigma_gamma", help: "smoothness kernel spatial scale, pixels" },
    Key { name: "crf_sigma_tau", help: "context kernel spatial scale, pixels" },
    Key { name: "crf_sigma_lambda", help: "context kernel scale, context-vector units" },
    Key { name: "crf_iterations", help: "mean-field iterations" },
    Key { name: "phantom_count", help: "phantoms generated by `phantom` and `pipeline`" },
    Key { name: "tumor_cycle", help: "tumor counts (0..=2) assigned to phantoms in rotation" },
    Key { name: "layer_means", help: "gray level of the five bands, top to bottom" },
    Key { name: "band_fractions", help: "height fraction of the five bands" },
    Key { name: "tumor_mean", help: "tumor gray level" },
    Key { name: "tumor_rx", help: "range of tumor horizontal semi-axes, pixels" },
    Key { name: "tumor_ry", help: "range of tumor vertical semi-axes, pixels" },
    Key { name: "speckle", help: "std. dev. of multiplicative speckle" },
    Key { name: "jitter", help: "boundary undulation amplitude, pixels" },
    Key { name: "folds", help: "cross-validation folds" },
    Key { name: "test_fold", help: "fold held out for testing" },
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_array<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into()
        .map_err(|v: Vec<f64>| Error::Config(format!("`{key}` needs {N} values, got {}", v.len())))
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    let [a, b] = parse_array::<2>(key, value)?;
    Ok((a, b))
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn parse_mode(value: &str) -> Result<InputMode> {
    match value.trim().to_ascii_lowercase().as_str() {
        "wavelet3" => Ok(InputMode::Wavelet3),
        "gray" => Ok(InputMode::Gray),
        other => Err(Error::Config(format!(
            "`input_mode`: unknown mode `{other}` (expected wavelet3|gray)"
        ))),
    }
}

fn mode_name(m: InputMode) -> &'static str {
    match m {
        InputMode::Wavelet3 => "wavelet3",
        InputMode::Gray => "gray",
    }
}

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        KEYS.iter().map(|k| k.name)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let n = &self.network;
        let c = &self.crf;
        let p = &self.phantom;
        Some(match key {
            "seed" => self.seed.to_string(),
            "input_mode" => mode_name(self.input_mode).into(),
            "variant" => n.variant.to_string(),
            "per_pixel_fuzzy" => n.per_pixel_fuzzy.to_string(),
            "base_width" => n.base_width.to_string(),
            "depth" => n.depth.to_string(),
            "image_size" => n.image_size.to_string(),
            "batch_size" => n.batch_size.to_string(),
            "epochs" => n.epochs.to_string(),
            "learning_rate" => n.learning_rate.to_string(),
            "decay" => n.decay.to_string(),
            "beta1" => n.beta1.to_string(),
            "beta2" => n.beta2.to_string(),
            "adam_eps" => n.adam_eps.to_string(),
            "crf_w_appearance" => c.w_appearance.to_string(),
            "crf_w_smoothness" => c.w_smoothness.to_string(),
            "crf_w_context" => c.w_context.to_string(),
            "crf_sigma_alpha" => c.sigma_alpha.to_string(),
            "crf_sigma_beta" => c.sigma_beta.to_string(),
            "crf_sigma_gamma" => c.sigma_gamma.to_string(),
            "crf_sigma_tau" => c.sigma_tau.to_string(),
            "crf_sigma_lambda" => c.sigma_lambda.to_string(),
            "crf_iterations" => c.iterations.to_string(),
            "phantom_count" => self.phantom_count.to_string(),
            "tumor_cycle" => list(&self.tumor_cycle),
            "layer_means" => list(&p.layer_means),
            "band_fractions" => list(&p.band_fractions),
            "tumor_mean" => p.tumor_mean.to_string(),
            "tumor_rx" => list(&[p.tumor_rx.0, p.tumor_rx.1]),
            "tumor_ry" => list(&[p.tumor_ry.0, p.tumor_ry.1]),
            "speckle" => p.speckle.to_string(),
            "jitter" => p.jitter.to_string(),
            "folds" => self.folds.to_string(),
            "test_fold" => self.test_fold.to_string(),
            _ => return None,
        })
    }

    /// Set one key from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let n = &mut self.network;
        let c = &mut self.crf;
        let p = &mut self.phantom;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "input_mode" => {
                self.input_mode = parse_mode(v)?;
                n.input_channels = self.input_mode.channels();
            }
            "variant" => n.variant = v.parse::<Variant>().map_err(|e| Error::Config(e.to_string()))?,
            "per_pixel_fuzzy" => n.per_pixel_fuzzy = parse(key, v)?,
            "base_width" => n.base_width = parse(key, v)?,
            "depth" => n.depth = parse(key, v)?,
            "image_size" => n.image_size = parse(key, v)?,
            "batch_size" => n.batch_size = parse(key, v)?,
            "epochs" => n.epochs = parse(key, v)?,
            "learning_rate" => n.learning_rate = parse(key, v)?,
            "decay" => n.decay = parse(key, v)?,
            "beta1" => n.beta1 = parse(key, v)?,
            "beta2" => n.beta2 = parse(key, v)?,
            "adam_eps" => n.adam_eps = parse(key, v)?,
            "crf_w_appearance" => c.w_appearance = parse(key, v)?,
            "crf_w_smoothness" => c.w_smoothness = parse(key, v)?,
            "crf_w_context" => c.w_context = parse(key, v)?,
            "crf_sigma_alpha" => c.sigma_alpha = parse(key, v)?,
            "crf_sigma_beta" => c.sigma_beta = parse(key, v)?,
            "crf_sigma_gamma" => c.sigma_gamma = parse(key, v)?,
            "crf_sigma_tau" => c.sigma_tau = parse(key, v)?,
            "crf_sigma_lambda" => c.sigma_lambda = parse(key, v)?,
            "crf_iterations" => c.iterations = parse(key, v)?,
            "phantom_count" => self.phantom_count = parse(key, v)?,
            "tumor_cycle" => self.tumor_cycle = parse_list(key, v)?,
            "layer_means" => p.layer_means = parse_array(key, v)?,
            "band_fractions" => p.band_fractions = parse_array(key, v)?,
            "tumor_mean" => p.tumor_mean = parse(key, v)?,
            "tumor_rx" => p.tumor_rx = parse_pair(key, v)?,
            "tumor_ry" => p.tumor_ry = parse_pair(key, v)?,
            "speckle" => p.speckle = parse(key, v)?,
            "jitter" => p.jitter = parse(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            "test_fold" => self.test_fold = parse(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (run with --help for the list of keys)"
                )))
            }
        }
        Ok(())
    }

    /// Parse a config document on top of the defaults. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1))
            })?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{} = {}", k.name, self.get(k.name).unwrap_or_default());
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Key reference with default values, for `--help`.
    pub fn help_text() -> String {
        let d = Self::default();
        let mut s = String::from("Config keys (`key = value`, defaults shown):\n");
        for k in KEYS {
            let _ = writeln!(
                s,
                "  {:<18} = {:<24} {}",
                k.name,
                d.get(k.name).unwrap_or_default(),
                k.help
            );
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_mode.channels() != self.network.input_channels {
            return Err(Error::Config(format!(
                "input_mode {} yields {} channels but the network expects {}",
                mode_name(self.input_mode),
                self.input_mode.channels(),
                self.network.input_channels
            )));
        }
        self.network.validate()?;
        self.crf.validate()?;
        self.phantom_spec(0, 0).validate()?;
        if self.tumor_cycle.is_empty() || self.tumor_cycle.iter().any(|&t| t > 2) {
            return Err(Error::Config(format!(
                "tumor_cycle {:?} must be a non-empty list of counts in 0..=2",
                self.tumor_cycle
            )));
        }
        if self.folds < 2 || self.test_fold >= self.folds {
            return Err(Error::Config(format!(
                "test_fold {} must index one of {} folds (at least 2)",
                self.test_fold, self.folds
            )));
        }
        Ok(())
    }

    pub fn membership(&self) -> Option<MembershipKind> {
        self.network.variant.membership()
    }

    /// Spec of phantom `index`: the template at network resolution with a
    /// per-image seed and a tumor count taken from the rotation.
    pub fn phantom_spec(&self, index: usize, seed: u64) -> PhantomSpec {
        PhantomSpec {
            width: self.network.image_size,
            height: self.network.image_size,
            tumor_count: self
                .tumor_cycle
                .get(index % self.tumor_cycle.len().max(1))
                .copied()
                .unwrap_or(1),
            seed: seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(index as u64),
            ..self.phantom.clone()
        }
    }
}

//! Per-pixel class distributions.

use crate::dataset::LabelMap;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Class probabilities stored class-major: `probs[c * n + i]` for pixel `i`
/// of an image with `n = width * height` pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryField {
    classes: usize,
    width: usize,
    height: usize,
    probs: Vec<f64>,
}

/// Tolerance on per-pixel probability sums at construction.
pub const SUM_TOLERANCE: f64 = 1e-6;

impl UnaryField {
    pub fn new(classes: usize, width: usize, height: usize, probs: Vec<f64>) -> Result<Self> {
        let n = width * height;
        if classes == 0 || probs.len() != classes * n {
            return shape_err(
                "unary_field",
                format!("{} values for {classes} classes on {width}x{height}", probs.len()),
            );
        }
        for i in 0..n {
            let mut s = 0.0;
            for c in 0..classes {
                let p = probs[c * n + i];
                if !(p.is_finite() && p >= 0.0) {
                    return Err(Error::NonFinite(format!("probability {p} at pixel {i}")));
                }
                s += p;
            }
            if (s - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "probabilities at pixel {i} sum to {s}"
                )));
            }
        }
        Ok(Self {
            classes,
            width,
            height,
            probs,
        })
    }

    pub fn uniform(classes: usize, width: usize, height: usize) -> Self {
        Self {
            classes,
            width,
            height,
            probs: vec![1.0 / classes as f64; classes * width * height],
        }
    }

    /// From a `[1, R, H, W]` or `[R, H, W]` probability tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (r, h, w) = match *t.shape() {
            [1, r, h, w] | [r, h, w] => (r, h, w),
            _ => return shape_err("unary_field", format!("tensor of shape {:?}", t.shape())),
        };
        Self::new(r, w, h, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.classes, self.height, self.width],
            self.probs.clone(),
        )
        .expect("length checked at construction")
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, class: usize, pixel: usize) -> f64 {
        self.probs[class * self.pixels() + pixel]
    }

    /// Most probable class per pixel; ties go to the lower index.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.pixels();
        (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.probs[c * n + i] > self.probs[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    pub fn label_map(&self) -> Result<LabelMap> {
        LabelMap::new(self.width, self.height, self.argmax())
    }

    /// Mean per-pixel entropy in nats.
    pub fn mean_entropy(&self) -> f64 {
        let n = self.pixels();
        let total: f64 = self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum();
        total / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_sums_and_values() {
        assert!(UnaryField::new(2, 1, 1, vec![0.5, 0.6]).is_err());
        assert!(UnaryField::new(2, 1, 1, vec![1.5, -0.5]).is_err());
        assert!(UnaryField::new(2, 2, 1, vec![0.5, 0.5]).is_err());
        assert!(UnaryField::new(2, 1, 1, vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn argmax_ties_go_low() {
        let f = UnaryField::new(3, 2, 1, vec![0.4, 0.2, 0.4, 0.2, 0.2, 0.6]).unwrap();
        assert_eq!(f.argmax(), vec![0, 2]);
    }

    #[test]
    fn uniform_entropy_is_log_classes() {
        let f = UnaryField::uniform(5, 3, 2);
        assert!((f.mean_entropy() - 5f64.ln()).abs() < 1e-12);
    }
}

//! Anatomy context label vectors and their distance constraints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{LabelMap, BACKGROUND, FAT, MAMMARY, MUSCLE, TUMOR};
use crate::error::{Error, Result};

/// Number of context categories: pre-fat background, fat, mammary, muscle,
/// retro-muscle background, tumor.
pub const CONTEXTS: usize = 6;

pub const PRE_FAT: usize = 0;
pub const CTX_FAT: usize = 1;
pub const CTX_MAMMARY: usize = 2;
pub const CTX_MUSCLE: usize = 3;
pub const RETRO_MUSCLE: usize = 4;
pub const CTX_TUMOR: usize = 5;

/// Layer pairs one apart (neighbours), two apart and three apart.
pub const D1_PAIRS: [(usize, usize); 4] = [(0, 1), (1, 2), (2, 3), (3, 4)];
pub const D2_PAIRS: [(usize, usize); 3] = [(0, 2), (1, 3), (2, 4)];
pub const D3_PAIRS: [(usize, usize); 2] = [(0, 3), (1, 4)];

/// Default slack for the "approximately equal" tumor distance pairs.
pub const APPROX_TOLERANCE: f64 = 1.5;

/// The six context vectors `L¹…L⁶`, stored zero-based.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextLabelSet {
    pub vectors: [[f64; 3]; CONTEXTS],
}

impl Default for ContextLabelSet {
    fn default() -> Self {
        Self {
            vectors: [
                [61.2, 20.0, 15.0],
                [25.0, 37.1, 0.0],
                [40.0, 0.0, 0.0],
                [55.0, 37.1, 0.0],
                [18.8, 20.7, 15.0],
                [40.0, 30.0, 26.5],
            ],
        }
    }
}

fn norm(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Pairwise Euclidean distances between context vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceTable {
    pub d: [[f64; CONTEXTS]; CONTEXTS],
}

impl DistanceTable {
    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.d[s][t]
    }

    fn pick<const K: usize>(&self, pairs: [(usize, usize); K]) -> [f64; K] {
        pairs.map(|(s, t)| self.d[s][t])
    }

    pub fn d1(&self) -> [f64; 4] {
        self.pick(D1_PAIRS)
    }

    pub fn d2(&self) -> [f64; 3] {
        self.pick(D2_PAIRS)
    }

    pub fn d3(&self) -> [f64; 2] {
        self.pick(D3_PAIRS)
    }

    /// Distances from the tumor vector to `L¹…L⁵`.
    pub fn tumor(&self) -> [f64; 5] {
        [0, 1, 2, 3, 4].map(|s| self.d[CTX_TUMOR][s])
    }

    /// Human-readable listing, one pair per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in 0..CONTEXTS {
            for t in s + 1..CONTEXTS {
                out.push_str(&format!("|L{}-L{}| = {:.2}\n", s + 1, t + 1, self.d[s][t]));
            }
        }
        out
    }
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

impl ContextLabelSet {
    pub fn distances(&self) -> DistanceTable {
        let mut d = [[0.0; CONTEXTS]; CONTEXTS];
        for s in 0..CONTEXTS {
            for t in 0..CONTEXTS {
                d[s][t] = norm(&self.vectors[s], &self.vectors[t]);
            }
        }
        DistanceTable { d }
    }

    /// Check the layer ordering `D₁ > D₂ > D₃` over every pair and the
    /// tumor ordering, with `tolerance` for the approximate equalities.
    /// The error names the first violated constraint.
    pub fn verify(&self, tolerance: f64) -> Result<DistanceTable> {
        let t = self.distances();
        let [t1, t2, t3, t4, t5] = t.tumor();
        let fail = |name: &str, detail: String| {
            Err(Error::InvalidArgument(format!(
                "context labels violate `{name}`: {detail}"
            )))
        };
        if min_of(&t.d1()) <= max_of(&t.d2()) {
            return fail(
                "D1 > D2",
                format!("min D1 {:.2} <= max D2 {:.2}", min_of(&t.d1()), max_of(&t.d2())),
            );
        }
        if min_of(&t.d2()) <= max_of(&t.d3()) {
            return fail(
                "D2 > D3",
                format!("min D2 {:.2} <= max D3 {:.2}", min_of(&t.d2()), max_of(&t.d3())),
            );
        }
        if t3 <= t2.max(t4) {
            return fail(
                "|L6-L3| > |L6-L2|, |L6-L4|",
                format!("{t3:.2} <= {:.2}", t2.max(t4)),
            );
        }
        if (t2 - t4).abs() > tolerance {
            return fail(
                "|L6-L2| ~ |L6-L4|",
                format!("{t2:.2} vs {t4:.2} differ by more than {tolerance}"),
            );
        }
        if t2.min(t4) <= t1.max(t5) {
            return fail(
                "|L6-L2|, |L6-L4| > |L6-L1|, |L6-L5|",
                format!("{:.2} <= {:.2}", t2.min(t4), t1.max(t5)),
            );
        }
        if (t1 - t5).abs() > tolerance {
            return fail(
                "|L6-L1| ~ |L6-L5|",
                format!("{t1:.2} vs {t5:.2} differ by more than {tolerance}"),
            );
        }
        Ok(t)
    }
}

/// Target distances for the three layer-separation classes and the three
/// tumor relations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextTargets {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub tumor_mammary: f64,
    pub tumor_fat_muscle: f64,
    pub tumor_background: f64,
    pub tolerance: f64,
}

impl Default for ContextTargets {
    fn default() -> Self {
        Self {
            d1: 40.0,
            d2: 30.0,
            d3: 23.0,
            tumor_mammary: 40.0,
            tumor_fat_muscle: 30.0,
            tumor_background: 26.0,
            tolerance: APPROX_TOLERANCE,
        }
    }
}

impl ContextTargets {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("D1 > D2", self.d1 > self.d2),
            ("D2 > D3", self.d2 > self.d3),
            ("D3 > 0", self.d3 > 0.0),
            ("|L6-L3| > |L6-L2|", self.tumor_mammary > self.tumor_fat_muscle),
            ("|L6-L2| > |L6-L1|", self.tumor_fat_muscle > self.tumor_background),
            ("|L6-L1| > 0", self.tumor_background > 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "infeasible context ordering: targets violate `{name}` ({self:?})"
                )));
            }
        }
        Ok(())
    }

    /// Every constrained pair with its target distance.
    fn pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut v = Vec::new();
        v.extend(D1_PAIRS.iter().map(|&(s, t)| (s, t, self.d1)));
        v.extend(D2_PAIRS.iter().map(|&(s, t)| (s, t, self.d2)));
        v.extend(D3_PAIRS.iter().map(|&(s, t)| (s, t, self.d3)));
        v.push((CTX_TUMOR, CTX_MAMMARY, self.tumor_mammary));
        v.push((CTX_TUMOR, CTX_FAT, self.tumor_fat_muscle));
        v.push((CTX_TUMOR, CTX_MUSCLE, self.tumor_fat_muscle));
        v.push((CTX_TUMOR, PRE_FAT, self.tumor_background));
        v.push((CTX_TUMOR, RETRO_MUSCLE, self.tumor_background));
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextSolution {
    pub labels: ContextLabelSet,
    pub table: DistanceTable,
}

/// Context vectors for `targets`.
///
/// With `rederive = None` the published vectors are returned after their
/// distance table passes [`ContextLabelSet::verify`]. With a seed, vectors
/// are fitted to the target distances by least squares from random starts
/// and the best fit satisfying every ordering is returned.
pub fn solve_context_labels(
    targets: &ContextTargets,
    rederive: Option<u64>,
) -> Result<ContextSolution> {
    targets.validate()?;
    let labels = match rederive {
        None => ContextLabelSet::default(),
        Some(seed) => fit_context_labels(targets, seed)?,
    };
    let table = labels.verify(targets.tolerance)?;
    Ok(ContextSolution { labels, table })
}

const RESTARTS: usize = 32;
const FIT_STEPS: usize = 4000;

fn fit_context_labels(targets: &ContextTargets, seed: u64) -> Result<ContextLabelSet> {
    let pairs = targets.pairs();
    let scale = targets.d1.max(targets.tumor_mammary);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, ContextLabelSet)> = None;
    let mut last_err = None;
    for _ in 0..RESTARTS {
        let mut v = [[0.0; 3]; CONTEXTS];
        for p in v.iter_mut().flatten() {
            *p = rng.random_range(0.0..1.5 * scale);
        }
        let lr = 0.05;
        for _ in 0..FIT_STEPS {
            let mut grad = [[0.0; 3]; CONTEXTS];
            for &(s, t, want) in &pairs {
                let d = norm(&v[s], &v[t]).max(1e-9);
                let r = d - want;
                for k in 0..3 {
                    let g = r * (v[s][k] - v[t][k]) / d;
                    grad[s][k] += g;
                    grad[t][k] -= g;
                }
            }
            for (p, g) in v.iter_mut().flatten().zip(grad.iter().flatten()) {
                *p -= lr * g;
            }
        }
        let cand = ContextLabelSet { vectors: v };
        let resid: f64 = pairs
            .iter()
            .map(|&(s, t, want)| (norm(&v[s], &v[t]) - want).powi(2))
            .sum();
        match cand.verify(targets.tolerance) {
            Ok(_) => {
                if best.as_ref().is_none_or(|(r, _)| resid < *r) {
                    best = Some((resid, cand));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.map(|(_, l)| l).ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::InvalidArgument("no context fit found".into()))
    })
}

/// Per-pixel context category (zero-based index into the label set).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextFeatureMap {
    pub width: usize,
    pub height: usize,
    pub index: Vec<u8>,
    pub labels: ContextLabelSet,
}

impl ContextFeatureMap {
    pub fn vector(&self, i: usize) -> &[f64; 3] {
        &self.labels.vectors[self.index[i] as usize]
    }
}

/// Map each pixel of a class map to its context category.
///
/// Background is split per column: above the first foreground pixel it is
/// pre-fat background, below the last one retro-muscle background. A
/// background run between foreground pixels takes the nearer of the two;
/// a column with no foreground is all pre-fat.
pub fn build_context_map(labels: &LabelMap, ctx: &ContextLabelSet) -> ContextFeatureMap {
    let (w, h) = (labels.width(), labels.height());
    let mut index = vec![0u8; w * h];
    for x in 0..w {
        let fg: Vec<usize> = (0..h).filter(|&y| labels.get(x, y) != BACKGROUND).collect();
        let (first, last) = match (fg.first(), fg.last()) {
            (Some(&f), Some(&l)) => (f, l),
            _ => (h, h),
        };
        for y in 0..h {
            index[y * w + x] = match labels.get(x, y) {
                TUMOR => CTX_TUMOR,
                FAT => CTX_FAT,
                MAMMARY => CTX_MAMMARY,
                MUSCLE => CTX_MUSCLE,
                _ if y < first => PRE_FAT,
                _ if y > last => RETRO_MUSCLE,
                _ if y - first <= last - y => PRE_FAT,
                _ => RETRO_MUSCLE,
            } as u8;
        }
    }
    ContextFeatureMap {
        width: w,
        height: h,
        index,
        labels: ctx.clone(),
    }
}

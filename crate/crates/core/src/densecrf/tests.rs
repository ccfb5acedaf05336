use super::*;
use crate::dataset::{generate_phantom, LabelMap, PhantomSpec};
use crate::preprocess::{assemble_channels, histogram_equalize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gray_color(w: usize, h: usize, v: Vec<f64>) -> MultiChannelImage {
    MultiChannelImage {
        width: w,
        height: h,
        channels: vec![v],
    }
}

fn context_of(w: usize, h: usize, index: Vec<u8>) -> ContextFeatureMap {
    ContextFeatureMap {
        width: w,
        height: h,
        index,
        labels: ContextLabelSet::default(),
    }
}

fn only(params: CrfParams) -> CrfParams {
    CrfParams {
        w_appearance: 0.0,
        w_smoothness: 0.0,
        w_context: 0.0,
        ..params
    }
}

/// Row-major pixel probabilities to a class-major field.
fn field(classes: usize, w: usize, h: usize, pixel_major: &[f64]) -> UnaryField {
    let n = w * h;
    let mut probs = vec![0.0; classes * n];
    for i in 0..n {
        for c in 0..classes {
            probs[c * n + i] = pixel_major[i * classes + c];
        }
    }
    UnaryField::new(classes, w, h, probs).unwrap()
}

#[test]
fn zero_weights_return_the_unary() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (u, color, ctx) = random_instance(8, &mut rng);
    let p = only(CrfParams::default());
    assert_eq!(mean_field(&u, &color, &ctx, &p).unwrap().field, u);
    assert_eq!(brute_force_mean_field(&u, &color, &ctx, &p).unwrap().field, u);
}

#[test]
fn single_pixel_has_no_pairs() {
    let u = field(3, 1, 1, &[0.2, 0.5, 0.3]);
    let out = brute_force_mean_field(
        &u,
        &gray_color(1, 1, vec![0.4]),
        &context_of(1, 1, vec![2]),
        &CrfParams::default(),
    )
    .unwrap();
    for (a, b) in out.field.probs().iter().zip(u.probs()) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn two_pixels_hand_iteration() {
    // smoothness kernel only, σγ = 1: the two neighbours couple with
    // k = e^{-1/2}, so Q₀(l) ∝ P₀(l)·exp(k·Q₁(l)) and vice versa
    let p = [[0.8, 0.2], [0.3, 0.7]];
    let u = field(2, 2, 1, &[0.8, 0.2, 0.3, 0.7]);
    let params = CrfParams {
        w_smoothness: 1.0,
        sigma_gamma: 1.0,
        iterations: 2,
        ..only(CrfParams::default())
    };
    let k = (-0.5f64).exp();
    let step = |q: [[f64; 2]; 2]| {
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            let other = 1 - i;
            let a = p[i][0] * (k * q[other][0]).exp();
            let b = p[i][1] * (k * q[other][1]).exp();
            out[i] = [a / (a + b), b / (a + b)];
        }
        out
    };
    let want = step(step(p));
    let color = gray_color(2, 1, vec![0.0, 1.0]);
    let ctx = context_of(2, 1, vec![0, 1]);
    for solver in [mean_field, brute_force_mean_field] {
        let got = solver(&u, &color, &ctx, &params).unwrap().field;
        for i in 0..2 {
            for c in 0..2 {
                assert!((got.prob(c, i) - want[i][c]).abs() < 1e-12);
            }
        }
    }
}

struct Small {
    u: UnaryField,
    color: MultiChannelImage,
    ctx: ContextFeatureMap,
    params: CrfParams,
}

/// 3×3 image, three classes, every kernel active.
fn three_by_three() -> Small {
    let p = [
        0.7, 0.2, 0.1, 0.5, 0.3, 0.2, 0.2, 0.2, 0.6, //
        0.6, 0.1, 0.3, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4, //
        0.25, 0.25, 0.5, 0.4, 0.4, 0.2, 0.05, 0.15, 0.8,
    ];
    Small {
        u: field(3, 3, 3, &p),
        color: gray_color(3, 3, vec![0.1, 0.2, 0.9, 0.15, 0.5, 0.85, 0.3, 0.6, 0.95]),
        ctx: context_of(3, 3, vec![0, 1, 2, 1, 5, 2, 3, 3, 4]),
        params: CrfParams {
            w_appearance: 1.0,
            w_smoothness: 0.5,
            w_context: 0.8,
            sigma_alpha: 2.0,
            sigma_beta: 0.5,
            sigma_gamma: 1.0,
            sigma_tau: 3.0,
            sigma_lambda: 30.0,
            iterations: 1,
        },
    }
}

// class-major marginals after one and two updates of the 3×3 instance,
// from a separate dense-matrix evaluation
const THREE_BY_THREE_T1: [f64; 27] = [
    0.7329603710787053, 0.6021616907824051, 0.1800764308382084, 0.6770877479293753,
    0.2769405130397186, 0.1524655371294441, 0.4521773134314186, 0.3195637390838969,
    0.05224800518686989, 0.18573774598568352, 0.22899490876651565, 0.20238476416762746,
    0.11340381993168518, 0.4880086207527805, 0.217487413580927, 0.2585045931619217,
    0.35290885204028394, 0.19970584776860703, 0.08130188293561116, 0.16884340045107915,
    0.6175388049941642, 0.2095084321389395, 0.2350508662075009, 0.6300470492896288,
    0.28931809340665976, 0.3275274088758191, 0.7480461470445231,
];
const THREE_BY_THREE_T2: [f64; 27] = [
    0.8694354299866152, 0.7387243312351884, 0.15009714283275236, 0.8203535430186625,
    0.3576616668425203, 0.2119739165252629, 0.5160054762943267, 0.5570489676909993,
    0.04103055711790252, 0.07543053216836516, 0.10933030872827874, 0.09170091224474827,
    0.03914127796698404, 0.40469655730245835, 0.13642898368718545, 0.12900862518302655,
    0.1766656251175004, 0.078172939573127, 0.0551340378450195, 0.15194536003653292,
    0.7582019449224995, 0.14050517901435358, 0.23764177585502141, 0.6515970997875516,
    0.35498589852264684, 0.2662854071915003, 0.8807965033089704,
];

#[test]
fn three_by_three_brute_force_matches_table() {
    let s = three_by_three();
    for (iters, want) in [(1, &THREE_BY_THREE_T1), (2, &THREE_BY_THREE_T2)] {
        let params = CrfParams {
            iterations: iters,
            ..s.params
        };
        let got = brute_force_mean_field(&s.u, &s.color, &s.ctx, &params).unwrap();
        for (a, b) in got.field.probs().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let fast = mean_field(&s.u, &s.color, &s.ctx, &params).unwrap();
        for (a, b) in fast.field.probs().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }
}

#[test]
fn energy_three_pixel_hand_sum() {
    // pixels at x = 0, 1, 2 in one row; labels 0, 1, 1
    let u = field(2, 3, 1, &[0.9, 0.1, 0.4, 0.6, 0.3, 0.7]);
    let color = gray_color(3, 1, vec![0.0, 0.5, 0.8]);
    let ctx = context_of(3, 1, vec![2, 5, 2]);
    let params = CrfParams {
        w_appearance: 2.0,
        w_smoothness: 1.0,
        w_context: 0.5,
        sigma_alpha: 1.0,
        sigma_beta: 0.5,
        sigma_gamma: 2.0,
        sigma_tau: 1.5,
        sigma_lambda: 20.0,
        iterations: 1,
    };
    let labels = [0u8, 1, 1];
    // only pairs (0,1) and (0,2) differ; each appears twice in the ordered sum
    let d2v_01 = 30f64.powi(2) + 26.5f64.powi(2);
    let k01 = 2.0 * (-1.0 / 2.0 - 0.25 / 0.5f64).exp()
        + (-1.0 / 8.0f64).exp()
        + 0.5 * (-1.0 / 4.5 - d2v_01 / 800.0).exp();
    let k02 = 2.0 * (-4.0 / 2.0 - 0.64 / 0.5f64).exp()
        + (-4.0 / 8.0f64).exp()
        + 0.5 * (-4.0 / 4.5f64).exp();
    let unary = -(0.9f64.ln() + 0.6f64.ln() + 0.7f64.ln());
    let want = unary + 2.0 * (k01 + k02);
    let got = energy(&labels, &u, &color, &ctx, &params).unwrap();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    let unary_only = energy(&labels, &u, &color, &ctx, &only(params)).unwrap();
    assert!((unary_only - unary).abs() < 1e-12);
    let uniform = energy(&[1, 1, 1], &u, &color, &ctx, &params).unwrap();
    assert!((uniform + (0.1f64.ln() + 0.6f64.ln() + 0.7f64.ln())).abs() < 1e-12);
}

#[test]
fn energy_matches_the_table_instance() {
    let s = three_by_three();
    let labels = [0u8, 1, 2, 0, 1, 2, 2, 2, 0];
    let e = energy(&labels, &s.u, &s.color, &s.ctx, &s.params).unwrap();
    assert!((e - 64.53848544066146).abs() < 1e-10, "{e}");
}

pub(crate) fn random_instance(size: usize, rng: &mut ChaCha8Rng) -> (UnaryField, MultiChannelImage, ContextFeatureMap) {
    let n = size * size;
    let classes = 5;
    let mut probs = vec![0.0; classes * n];
    for i in 0..n {
        let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z: f64 = logits.iter().map(|a| a.exp()).sum();
        for c in 0..classes {
            probs[c * n + i] = logits[c].exp() / z;
        }
    }
    let u = UnaryField::new(classes, size, size, probs).unwrap();
    let color = MultiChannelImage {
        width: size,
        height: size,
        channels: (0..3)
            .map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect(),
    };
    let ctx = build_context_map(&u.label_map().unwrap(), &ContextLabelSet::default());
    (u, color, ctx)
}

fn agreement(a: &UnaryField, b: &UnaryField) -> (f64, f64) {
    let same = a.argmax().iter().zip(b.argmax()).filter(|(x, y)| **x == *y).count();
    let dq = a
        .probs()
        .iter()
        .zip(b.probs())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    (same as f64 / a.pixels() as f64, dq)
}

#[test]
fn fast_path_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..3 {
        let (u, color, ctx) = random_instance(32, &mut rng);
        let p = CrfParams::default();
        let fast = mean_field(&u, &color, &ctx, &p).unwrap();
        let slow = brute_force_mean_field(&u, &color, &ctx, &p).unwrap();
        let (agree, dq) = agreement(&fast.field, &slow.field);
        assert!(agree >= 0.99 && dq <= 1e-2, "agreement {agree}, max dQ {dq}");
    }
}

#[test]
fn without_context_weight_the_context_map_is_ignored() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (u, color, ctx) = random_instance(16, &mut rng);
    let p = CrfParams {
        w_context: 0.0,
        ..CrfParams::default()
    };
    let other = build_context_map(&LabelMap::filled(16, 16, 3), &ContextLabelSet::default());
    let a = mean_field(&u, &color, &ctx, &p).unwrap();
    let b = mean_field(&u, &color, &other, &p).unwrap();
    assert_eq!(a.field, b.field);
    let slow = brute_force_mean_field(&u, &color, &other, &p).unwrap();
    let (agree, dq) = agreement(&a.field, &slow.field);
    assert!(agree >= 0.99 && dq <= 1e-2, "agreement {agree}, max dQ {dq}");
}

#[test]
fn size_guard_and_shape_checks() {
    let u = UnaryField::uniform(2, 65, 64);
    let color = gray_color(65, 64, vec![0.0; 65 * 64]);
    let ctx = context_of(65, 64, vec![0; 65 * 64]);
    let err = brute_force_mean_field(&u, &color, &ctx, &CrfParams::default()).unwrap_err();
    assert!(err.to_string().contains("4096"), "{err}");
    let small = gray_color(2, 2, vec![0.0; 4]);
    assert!(mean_field(&u, &small, &ctx, &CrfParams::default()).is_err());
}

#[test]
fn invalid_params_rejected() {
    let bad = CrfParams {
        sigma_beta: 0.0,
        ..CrfParams::default()
    };
    assert!(bad.validate().is_err());
    let bad = CrfParams {
        iterations: 0,
        ..CrfParams::default()
    };
    assert!(bad.validate().is_err());
}

/// Logit advantage of the true class in [`phantom_instance`].
pub(crate) const TRUTH_MARGIN: f64 = 2.0;

/// Noisy class distributions concentrated on the phantom's true labels.
pub(crate) fn phantom_instance(seed: u64) -> (UnaryField, MultiChannelImage, ContextFeatureMap) {
    let spec = PhantomSpec {
        seed,
        tumor_count: (seed % 3) as usize,
        ..PhantomSpec::default()
    };
    let (img, lab) = generate_phantom(&spec).unwrap();
    let color = assemble_channels(&histogram_equalize(&img)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ffee);
    let n = lab.width() * lab.height();
    let mut probs = vec![0.0; 5 * n];
    for i in 0..n {
        let truth = lab.labels()[i] as usize;
        let logits: Vec<f64> = (0..5)
            .map(|c| rng.random_range(-1.0..1.0) + if c == truth { TRUTH_MARGIN } else { 0.0 })
            .collect();
        let z: f64 = logits.iter().map(|a| a.exp()).sum();
        for c in 0..5 {
            probs[c * n + i] = logits[c].exp() / z;
        }
    }
    let u = UnaryField::new(5, lab.width(), lab.height(), probs).unwrap();
    let ctx = build_context_map(&u.label_map().unwrap(), &ContextLabelSet::default());
    (u, color, ctx)
}

#[test]
fn converges_on_phantoms_and_stays_normalized() {
    for seed in 0..3 {
        let (u, color, ctx) = phantom_instance(seed);
        let out = mean_field(&u, &color, &ctx, &CrfParams::default()).unwrap();
        assert!(out.final_change() < 1e-3, "changes {:?}", out.max_change);
        assert!(out.max_sum_error.iter().all(|&e| e <= 1e-9));
    }
}

#[test]
fn fast_path_tracks_brute_force_closely_at_defaults() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (u, color, ctx) = random_instance(32, &mut rng);
    let p = CrfParams::default();
    let fast = mean_field(&u, &color, &ctx, &p).unwrap();
    let slow = brute_force_mean_field(&u, &color, &ctx, &p).unwrap();
    let (_, moved) = agreement(&u, &slow.field);
    assert!(moved > 0.05, "CRF barely changed the marginals ({moved})");
    let (agree, dq) = agreement(&fast.field, &slow.field);
    assert!(agree >= 0.99 && dq <= 1e-3, "agreement {agree}, max dQ {dq}");
}

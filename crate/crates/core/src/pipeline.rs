//! End-to-end driver: phantom dataset → fold split → training → inference
//! → CRF refinement → metrics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::dataset::{
    count_components, generate_phantom, kfold_split, mean_iou, metrics, read_manifest,
    write_manifest, ClassMetrics, IouReport, LabelMap, Record, CLASS_NAMES, TUMOR,
};
use crate::densecrf::{build_context_map, mean_field, ContextLabelSet, CrfParams};
use crate::error::{Error, Result};
use crate::fcn::{build_network, infer, save_loss_csv, train, LossRecord, Network, Sample, Variant};
use crate::fuzzy::MembershipKind;
use crate::preprocess::{preprocess, GrayImage, MultiChannelImage};
use crate::unary::UnaryField;
use crate::NUM_CLASSES;

/// Write `count` phantoms under `dir` (`images/`, `labels/`, `manifest.csv`,
/// `phantom.txt`) and return their records.
pub fn generate_dataset(cfg: &RunConfig, count: usize, dir: &Path) -> Result<Vec<Record>> {
    let (img_dir, lab_dir) = (dir.join("images"), dir.join("labels"));
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&lab_dir)?;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let spec = cfg.phantom_spec(i, cfg.seed);
        let (img, lab) = generate_phantom(&spec)
            .map_err(|e| Error::Dataset(format!("phantom {i}: {e}")))?;
        let case_id = format!("phantom_{i:04}");
        let rec = Record {
            image: img_dir.join(format!("{case_id}.png")),
            label: lab_dir.join(format!("{case_id}.png")),
            case_id,
        };
        img.save_png(&rec.image)?;
        lab.save_png(&rec.label)?;
        records.push(rec);
    }
    write_manifest(&dir.join("manifest.csv"), &records)?;
    let mut sidecar = format!("count = {count}\nrun_seed = {}\n", cfg.seed);
    sidecar.push_str(&cfg.phantom_spec(0, cfg.seed).to_text());
    fs::write(dir.join("phantom.txt"), sidecar)?;
    Ok(records)
}

/// A record loaded and preprocessed to network resolution.
#[derive(Clone, Debug)]
pub struct Case {
    pub case_id: String,
    /// Gray image at network resolution, for overlays.
    pub image: GrayImage,
    pub truth: LabelMap,
    pub input: MultiChannelImage,
}

impl Case {
    pub fn sample(&self) -> Result<Sample> {
        Sample::new(&self.input, self.truth.labels().to_vec())
    }
}

pub fn load_case(rec: &Record, cfg: &RunConfig) -> Result<Case> {
    let (img, lab) = rec.load()?;
    let size = cfg.network.image_size;
    let input = preprocess(&img, size, cfg.input_mode)
        .map_err(|e| Error::Dataset(format!("case {}: {e}", rec.case_id)))?;
    Ok(Case {
        case_id: rec.case_id.clone(),
        image: img.resize(size, size)?,
        truth: lab.resize_nearest(size, size),
        input,
    })
}

pub fn load_cases(records: &[Record], cfg: &RunConfig) -> Result<Vec<Case>> {
    records.iter().map(|r| load_case(r, cfg)).collect()
}

/// Indices of training and test records for the configured fold.
pub fn split(cfg: &RunConfig, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let folds = kfold_split(n, cfg.folds, cfg.seed)?;
    let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| folds[i] == cfg.test_fold);
    Ok((train, test))
}

/// Build and train one network variant on `cases`.
pub fn train_variant(
    cfg: &RunConfig,
    variant: Variant,
    cases: &[Case],
) -> Result<(Network, Vec<LossRecord>)> {
    let net_cfg = crate::fcn::NetworkConfig {
        variant,
        seed: cfg.seed,
        ..cfg.network.clone()
    };
    let mut net = build_network(&net_cfg)?;
    let samples: Vec<Sample> = cases.iter().map(Case::sample).collect::<Result<_>>()?;
    log::info!(
        "training {variant} on {} images ({} parameters)",
        samples.len(),
        net.param_count()
    );
    let trace = train(&mut net, &samples, true)?;
    Ok((net, trace))
}

/// Intensity channel used as the CRF color feature.
pub fn crf_color(input: &MultiChannelImage) -> MultiChannelImage {
    MultiChannelImage {
        width: input.width,
        height: input.height,
        channels: vec![input.channels[0].clone()],
    }
}

/// Mean-field refinement of a network output. The context map comes from
/// the network's own argmax labels.
pub fn refine(unary: &UnaryField, input: &MultiChannelImage, params: &CrfParams) -> Result<LabelMap> {
    let raw = unary.label_map()?;
    let ctx = build_context_map(&raw, &ContextLabelSet::default());
    let out = mean_field(unary, &crf_color(input), &ctx, params)?;
    out.field.label_map()
}

/// The two-kernel CRF: the same parameters with the context kernel off.
pub fn two_kernel(params: &CrfParams) -> CrfParams {
    CrfParams {
        w_context: 0.0,
        ..*params
    }
}

/// Per-image outcome for one method.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub case_id: String,
    pub per_class: [ClassMetrics; NUM_CLASSES],
    pub true_tumors: usize,
    pub predicted_tumors: usize,
}

#[derive(Clone, Debug)]
pub struct MethodResult {
    pub name: String,
    pub cases: Vec<CaseResult>,
    pub pooled: IouReport,
}

impl MethodResult {
    pub fn tumor_iou(&self) -> f64 {
        self.pooled.per_class[TUMOR as usize]
    }

    /// Fraction of test images with `truth` tumors whose prediction has the
    /// same number of tumor components, or `None` without such images.
    pub fn component_accuracy(&self, truth: usize) -> Option<f64> {
        let sel: Vec<&CaseResult> = self.cases.iter().filter(|c| c.true_tumors == truth).collect();
        if sel.is_empty() {
            return None;
        }
        let hits = sel.iter().filter(|c| c.predicted_tumors == truth).count();
        Some(hits as f64 / sel.len() as f64)
    }
}

/// Score predictions against `(case_id, truth)` pairs.
pub fn score(name: &str, truths: &[(&str, &LabelMap)], preds: &[LabelMap]) -> Result<MethodResult> {
    let maps: Vec<LabelMap> = truths.iter().map(|(_, t)| (*t).clone()).collect();
    let pooled = mean_iou(preds, &maps)?;
    let mut results = Vec::with_capacity(truths.len());
    for (&(id, truth), pred) in truths.iter().zip(preds) {
        let mut per_class = [ClassMetrics {
            tpr: None,
            fpr: None,
            iou: 0.0,
        }; NUM_CLASSES];
        for (c, m) in per_class.iter_mut().enumerate() {
            *m = metrics(pred, truth, c as u8)?;
        }
        results.push(CaseResult {
            case_id: id.to_string(),
            per_class,
            true_tumors: count_components(truth, TUMOR),
            predicted_tumors: count_components(pred, TUMOR),
        });
    }
    Ok(MethodResult {
        name: name.into(),
        cases: results,
        pooled,
    })
}

fn truth_pairs(cases: &[Case]) -> Vec<(&str, &LabelMap)> {
    cases.iter().map(|c| (c.case_id.as_str(), &c.truth)).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `method,case_id,class,tpr,fpr,iou`; TPR/FPR are empty when the class is
/// absent from the ground truth.
pub fn write_per_image_csv<W: Write>(methods: &[MethodResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "case_id", "class", "tpr", "fpr", "iou"])?;
    for m in methods {
        for c in &m.cases {
            for (k, cm) in c.per_class.iter().enumerate() {
                w.write_record([
                    m.name.clone(),
                    c.case_id.clone(),
                    CLASS_NAMES[k].to_string(),
                    opt(cm.tpr),
                    opt(cm.fpr),
                    cm.iou.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Pooled metrics: one row per method and class, plus a `mean` row carrying
/// the mIoU.
pub fn write_summary_csv<W: Write>(methods: &[MethodResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "class", "tpr", "fpr", "iou"])?;
    for m in methods {
        for (k, counts) in m.pooled.counts.iter().enumerate() {
            let cm = counts.metrics();
            w.write_record([
                m.name.clone(),
                CLASS_NAMES[k].to_string(),
                opt(cm.tpr),
                opt(cm.fpr),
                cm.iou.to_string(),
            ])?;
        }
        w.write_record([m.name.clone(), "mean".into(), String::new(), String::new(), m.pooled.mean.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_components_csv<W: Write>(methods: &[MethodResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "case_id", "true_tumors", "predicted_tumors"])?;
    for m in methods {
        for c in &m.cases {
            w.write_record([
                m.name.clone(),
                c.case_id.clone(),
                c.true_tumors.to_string(),
                c.predicted_tumors.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Console table of pooled per-class IoU, mIoU and tumor TPR/FPR.
pub fn render_table(methods: &[MethodResult]) -> String {
    let mut s = format!("{:<24}", "method");
    for name in CLASS_NAMES {
        s.push_str(&format!("{name:>11}"));
    }
    s.push_str(&format!("{:>8}{:>10}{:>10}\n", "mIoU", "tumorTPR", "tumorFPR"));
    for m in methods {
        s.push_str(&format!("{:<24}", m.name));
        for v in m.pooled.per_class {
            s.push_str(&format!("{v:>11.4}"));
        }
        let t = m.pooled.counts[TUMOR as usize].metrics();
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:>8.4}{:>10}{:>10}\n",
            m.pooled.mean,
            f(t.tpr),
            f(t.fpr)
        ));
    }
    s
}

/// Method names used by [`run_experiment`].
pub const FUZZY: &str = "fuzzy-sigmoid";
pub const PLAIN: &str = "nonfuzzy";
pub const FUZZY_CRF2: &str = "fuzzy-sigmoid+crf2";
pub const FUZZY_CRF3: &str = "fuzzy-sigmoid+crf3";

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub methods: Vec<MethodResult>,
    pub train_cases: usize,
    pub test_cases: usize,
    /// Metric CSVs written, relative to the run directory.
    pub artifacts: Vec<PathBuf>,
}

impl ExperimentReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }
}

/// Full experiment under `run_dir`: generate phantoms, hold out one fold,
/// train the fuzzy-sigmoid and non-fuzzy variants, segment the test fold
/// raw and with both CRFs, and write metric CSVs.
pub fn run_experiment(cfg: &RunConfig, run_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    cfg.save(&run_dir.join("config.txt"))?;
    let data_dir = run_dir.join("phantoms");
    generate_dataset(cfg, cfg.phantom_count, &data_dir)?;
    let records = read_manifest(&data_dir.join("manifest.csv"))?;
    let cases = load_cases(&records, cfg)?;
    let (train_idx, test_idx) = split(cfg, cases.len())?;
    let train_cases: Vec<Case> = train_idx.iter().map(|&i| cases[i].clone()).collect();
    let test_cases: Vec<Case> = test_idx.iter().map(|&i| cases[i].clone()).collect();
    log::info!("{} training / {} test images", train_cases.len(), test_cases.len());

    let mut methods = Vec::new();
    let crf3 = cfg.crf;
    let crf2 = two_kernel(&cfg.crf);
    for variant in [Variant::Fuzzy(MembershipKind::Sigmoid), Variant::NonFuzzy] {
        let (net, trace) = train_variant(cfg, variant, &train_cases)?;
        let dir = run_dir.join(variant.to_string());
        fs::create_dir_all(&dir)?;
        net.params.save(&dir.join("checkpoint.fseg"))?;
        save_loss_csv(&trace, &dir.join("loss.csv"))?;

        let mut raw = Vec::new();
        let mut refined2 = Vec::new();
        let mut refined3 = Vec::new();
        for case in &test_cases {
            let unary = infer(&net, &case.input)?;
            raw.push(unary.label_map()?);
            if variant == Variant::NonFuzzy {
                continue;
            }
            refined2.push(refine(&unary, &case.input, &crf2)?);
            refined3.push(refine(&unary, &case.input, &crf3)?);
        }
        methods.push(score(&variant.to_string(), &truth_pairs(&test_cases), &raw)?);
        if variant != Variant::NonFuzzy {
            let pred_dir = run_dir.join("predictions");
            fs::create_dir_all(&pred_dir)?;
            for (case, pred) in test_cases.iter().zip(&refined3) {
                pred.save_png(&pred_dir.join(format!("{}.png", case.case_id)))?;
                pred.save_overlay(&case.image, &pred_dir.join(format!("{}_overlay.png", case.case_id)))?;
            }
            methods.push(score(FUZZY_CRF2, &truth_pairs(&test_cases), &refined2)?);
            methods.push(score(FUZZY_CRF3, &truth_pairs(&test_cases), &refined3)?);
        }
    }

    let artifacts = vec![
        PathBuf::from("metrics_per_image.csv"),
        PathBuf::from("metrics_summary.csv"),
        PathBuf::from("components.csv"),
    ];
    write_per_image_csv(&methods, fs::File::create(run_dir.join(&artifacts[0]))?)?;
    write_summary_csv(&methods, fs::File::create(run_dir.join(&artifacts[1]))?)?;
    write_components_csv(&methods, fs::File::create(run_dir.join(&artifacts[2]))?)?;
    log::info!("\n{}", render_table(&methods));
    Ok(ExperimentReport {
        methods,
        train_cases: train_cases.len(),
        test_cases: test_cases.len(),
        artifacts,
    })
}

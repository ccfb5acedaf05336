use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fuzzyseg::config::RunConfig;
use fuzzyseg::dataset::{kfold_split, read_manifest, LabelMap, Record};
use fuzzyseg::fcn::{infer, save_loss_csv, Network, NetworkConfig, Variant};
use fuzzyseg::fuzzy::MembershipKind;
use fuzzyseg::pipeline::{self, MethodResult};
use fuzzyseg::preprocess::{preprocess, GrayImage};
use fuzzyseg::ParamStore;

#[derive(Parser)]
#[command(
    name = "fuzzyseg",
    version,
    about = "Fuzzy FCN + anatomy CRF segmentation of layered ultrasound phantoms",
    after_help = RunConfig::help_text()
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; keys not given keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override one config key, e.g. `--set epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset with a manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// Number of phantoms (default: `phantom_count`).
        #[arg(long)]
        count: Option<usize>,
        /// Give every phantom this many tumors instead of the rotation.
        #[arg(long)]
        tumors: Option<usize>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a network on the records outside one fold.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out fold; without it every record is used for training.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Segment images with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Images with ground truth; enables the metrics CSV.
        #[arg(long, conflicts_with = "images")]
        manifest: Option<PathBuf>,
        /// Only the records of this fold of `--manifest`.
        #[arg(long, requires = "manifest")]
        fold: Option<usize>,
        /// Bare image files.
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "on")]
        crf: Switch,
        /// Membership kind of the checkpoint's fuzzy layers.
        #[arg(long)]
        membership: Option<MembershipKind>,
        /// Treat the checkpoint as the non-fuzzy variant.
        #[arg(long, conflicts_with = "membership")]
        nonfuzzy: bool,
        /// Images processed concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a directory of predicted label PNGs against a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<case_id>.png` predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Report CSV (default: `<pred>/eval.csv`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Phantoms → fold split → train both variants → infer → CRF → metrics.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

/// `fallback` is read when no `--config` is given and it exists.
fn load_config(c: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&c.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(f)) if f.exists() => {
            log::info!("using {}", f.display());
            RunConfig::load(f)?
        }
        _ => RunConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn network_config(cfg: &RunConfig) -> NetworkConfig {
    NetworkConfig {
        seed: cfg.seed,
        ..cfg.network.clone()
    }
}

/// List of produced files, relative to `dir`, written to `dir/artifacts.txt`.
fn write_artifacts(dir: &Path, files: &[PathBuf]) -> Result<()> {
    let mut s = String::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(f);
        s.push_str(&rel.to_string_lossy());
        s.push('\n');
    }
    fs::write(dir.join("artifacts.txt"), s)?;
    Ok(())
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn cmd_phantom(
    mut cfg: RunConfig,
    out: &Path,
    count: Option<usize>,
    tumors: Option<usize>,
    force: bool,
) -> Result<()> {
    if is_nonempty_dir(out) && !force {
        bail!("{} is not empty; pass --force to write into it", out.display());
    }
    if let Some(t) = tumors {
        cfg.tumor_cycle = vec![t];
    }
    cfg.validate()?;
    let n = count.unwrap_or(cfg.phantom_count);
    let recs = pipeline::generate_dataset(&cfg, n, out)?;
    let mut files = vec![out.join("manifest.csv"), out.join("phantom.txt")];
    for r in &recs {
        files.push(r.image.clone());
        files.push(r.label.clone());
    }
    write_artifacts(out, &files)?;
    println!("wrote {n} phantoms to {}", out.display());
    Ok(())
}

fn fold_members(cfg: &RunConfig, n: usize, fold: usize) -> Result<Vec<bool>> {
    if fold >= cfg.folds {
        bail!("fold {fold} does not exist ({} folds)", cfg.folds);
    }
    Ok(kfold_split(n, cfg.folds, cfg.seed)?
        .into_iter()
        .map(|f| f == fold)
        .collect())
}

fn cmd_train(
    mut cfg: RunConfig,
    manifest: &Path,
    out: &Path,
    fold: Option<usize>,
    variant: Option<Variant>,
    epochs: Option<usize>,
) -> Result<()> {
    if let Some(v) = variant {
        cfg.network.variant = v;
    }
    if let Some(e) = epochs {
        cfg.network.epochs = e;
    }
    cfg.validate()?;
    let records = read_manifest(manifest)?;
    let records: Vec<Record> = match fold {
        Some(k) => {
            let held = fold_members(&cfg, records.len(), k)?;
            records
                .into_iter()
                .zip(held)
                .filter(|(_, h)| !h)
                .map(|(r, _)| r)
                .collect()
        }
        None => records,
    };
    if records.is_empty() {
        bail!("no training records in {}", manifest.display());
    }
    let cases = pipeline::load_cases(&records, &cfg)?;
    fs::create_dir_all(out)?;
    let (net, trace) = pipeline::train_variant(&cfg, cfg.network.variant, &cases)?;
    let files = [
        out.join("checkpoint.fseg"),
        out.join("loss.csv"),
        out.join("config.txt"),
    ];
    net.params.save(&files[0])?;
    save_loss_csv(&trace, &files[1])?;
    cfg.save(&files[2])?;
    write_artifacts(out, &files)?;
    match trace.last() {
        Some(r) => println!(
            "trained {} on {} images; final batch loss {:.6}",
            cfg.network.variant,
            cases.len(),
            r.loss
        ),
        None => println!("no epochs run; checkpoint holds the initialization"),
    }
    Ok(())
}

struct InferJob {
    case_id: String,
    original: GrayImage,
    truth: Option<LabelMap>,
}

fn segment(
    net: &Network,
    cfg: &RunConfig,
    job: &InferJob,
    crf: Switch,
) -> fuzzyseg::Result<LabelMap> {
    let size = cfg.network.image_size;
    let input = preprocess(&job.original, size, cfg.input_mode)?;
    let unary = infer(net, &input)?;
    let small = match crf {
        Switch::Off => unary.label_map()?,
        Switch::On => pipeline::refine(&unary, &input, &cfg.crf)?,
    };
    Ok(small.resize_nearest(job.original.width(), job.original.height()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    mut cfg: RunConfig,
    checkpoint: &Path,
    out: &Path,
    manifest: Option<&Path>,
    fold: Option<usize>,
    images: &[PathBuf],
    crf: Switch,
    variant: Option<Variant>,
    jobs: usize,
) -> Result<()> {
    if let Some(v) = variant {
        cfg.network.variant = v;
    }
    cfg.validate()?;
    let params = ParamStore::load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    let net = Network::from_params(&network_config(&cfg), params)
        .with_context(|| format!("checkpoint {} does not fit the configured network", checkpoint.display()))?;

    let mut work = Vec::new();
    if let Some(m) = manifest {
        let records = read_manifest(m)?;
        let keep = match fold {
            Some(k) => fold_members(&cfg, records.len(), k)?,
            None => vec![true; records.len()],
        };
        for (r, k) in records.iter().zip(keep) {
            if k {
                let (img, lab) = r.load()?;
                work.push(InferJob {
                    case_id: r.case_id.clone(),
                    original: img,
                    truth: Some(lab),
                });
            }
        }
    } else {
        for p in images {
            let stem = p
                .file_stem()
                .ok_or_else(|| anyhow!("{} has no file name", p.display()))?;
            work.push(InferJob {
                case_id: stem.to_string_lossy().into_owned(),
                original: GrayImage::load(p)?,
                truth: None,
            });
        }
    }
    if work.is_empty() {
        bail!("nothing to segment: pass --manifest or --images");
    }

    let jobs = jobs.max(1);
    let chunk = work.len().div_ceil(jobs);
    let preds: Vec<fuzzyseg::Result<LabelMap>> = std::thread::scope(|s| {
        let handles: Vec<_> = work
            .chunks(chunk)
            .map(|part| {
                let (net, cfg) = (&net, &cfg);
                s.spawn(move || {
                    part.iter()
                        .map(|j| segment(net, cfg, j, crf))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    });

    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut scored = Vec::new();
    for (job, pred) in work.iter().zip(preds) {
        let pred = pred.with_context(|| format!("case {}", job.case_id))?;
        let lp = out.join(format!("{}.png", job.case_id));
        let op = out.join(format!("{}_overlay.png", job.case_id));
        pred.save_png(&lp)?;
        pred.save_overlay(&job.original, &op)?;
        files.extend([lp, op]);
        if let Some(t) = &job.truth {
            scored.push((job.case_id.as_str(), t, pred));
        }
    }
    if !scored.is_empty() {
        let name = match crf {
            Switch::On => "crf",
            Switch::Off => "raw",
        };
        let truths: Vec<(&str, &LabelMap)> = scored.iter().map(|(id, t, _)| (*id, *t)).collect();
        let preds: Vec<LabelMap> = scored.into_iter().map(|(_, _, p)| p).collect();
        let result = pipeline::score(name, &truths, &preds)?;
        let path = out.join("metrics.csv");
        pipeline::write_per_image_csv(std::slice::from_ref(&result), fs::File::create(&path)?)?;
        files.push(path);
        print!("{}", pipeline::render_table(&[result]));
    }
    write_artifacts(out, &files)?;
    println!("segmented {} images into {}", work.len(), out.display());
    Ok(())
}

fn cmd_eval(manifest: &Path, pred_dir: &Path, out: Option<&Path>) -> Result<()> {
    let records = read_manifest(manifest)?;
    let missing: Vec<&str> = records
        .iter()
        .filter(|r| !pred_dir.join(format!("{}.png", r.case_id)).exists())
        .map(|r| r.case_id.as_str())
        .collect();
    if !missing.is_empty() {
        bail!(
            "missing predictions in {} for: {}",
            pred_dir.display(),
            missing.join(", ")
        );
    }
    let mut truths = Vec::new();
    let mut preds = Vec::new();
    for r in &records {
        truths.push(LabelMap::load_png(&r.label)?);
        preds.push(LabelMap::load_png(&pred_dir.join(format!("{}.png", r.case_id)))?);
    }
    let pairs: Vec<(&str, &LabelMap)> = records
        .iter()
        .zip(&truths)
        .map(|(r, t)| (r.case_id.as_str(), t))
        .collect();
    let result: MethodResult = pipeline::score("eval", &pairs, &preds)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| pred_dir.join("eval.csv"));
    pipeline::write_summary_csv(std::slice::from_ref(&result), fs::File::create(&out)?)?;
    let per_image = out.with_file_name(format!(
        "{}_per_image.csv",
        out.file_stem().unwrap_or_default().to_string_lossy()
    ));
    pipeline::write_per_image_csv(std::slice::from_ref(&result), fs::File::create(&per_image)?)?;
    print!("{}", pipeline::render_table(&[result]));
    Ok(())
}

fn cmd_pipeline(cfg: RunConfig, out: &Path) -> Result<()> {
    let report = pipeline::run_experiment(&cfg, out)?;
    let mut files: Vec<PathBuf> = report.artifacts.iter().map(|a| out.join(a)).collect();
    files.push(out.join("config.txt"));
    for v in ["fuzzy-sigmoid", "nonfuzzy"] {
        files.push(out.join(v).join("checkpoint.fseg"));
        files.push(out.join(v).join("loss.csv"));
    }
    files.push(out.join("phantoms").join("manifest.csv"));
    files.push(out.join("predictions"));
    write_artifacts(out, &files)?;
    println!(
        "{} training / {} test images",
        report.train_cases, report.test_cases
    );
    print!("{}", pipeline::render_table(&report.methods));
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let fallback = match &cli.command {
        Command::Infer { checkpoint, .. } => checkpoint.parent().map(|d| d.join("config.txt")),
        _ => None,
    };
    let cfg = load_config(&cli.common, fallback.as_deref())?;
    match cli.command {
        Command::Phantom {
            out,
            count,
            tumors,
            force,
        } => cmd_phantom(cfg, &out, count, tumors, force),
        Command::Train {
            manifest,
            out,
            fold,
            variant,
            epochs,
        } => cmd_train(cfg, &manifest, &out, fold, variant, epochs),
        Command::Infer {
            checkpoint,
            out,
            manifest,
            fold,
            images,
            crf,
            membership,
            nonfuzzy,
            jobs,
        } => {
            let variant = match (membership, nonfuzzy) {
                (Some(k), _) => Some(Variant::Fuzzy(k)),
                (None, true) => Some(Variant::NonFuzzy),
                (None, false) => None,
            };
            cmd_infer(
                cfg,
                &checkpoint,
                &out,
                manifest.as_deref(),
                fold,
                &images,
                crf,
                variant,
                jobs,
            )
        }
        Command::Eval {
            manifest,
            pred,
            out,
        } => cmd_eval(&manifest, &pred, out.as_deref()),
        Command::Pipeline { out } => cmd_pipeline(cfg, &out),
    }
}

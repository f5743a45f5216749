use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use vmfnet::checkpoint::ModelState;
use vmfnet::data::{self, GeneratorConfig};
use vmfnet::eval::{self, HausdorffVariant, ProbeConfig, Representation};
use vmfnet::training::{self, OutputDir, TrainConfig};
use vmfnet::ttt::{self, TttConfig};
use vmfnet::{Error, Tensor};

mod manifest;

use manifest::RunManifest;

/// Compositional segmentation with von-Mises-Fisher kernels.
#[derive(Parser, Debug)]
#[command(name = "vmfnet", version, about)]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// One of error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,

    /// Where to write the run manifest (default: `<out>.run.json` next to
    /// the output directory).
    #[arg(long, global = true)]
    run_manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-domain phantom dataset.
    GenData(GenDataArgs),
    /// Train on all domains but the held-out one.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out domain.
    Eval(EvalArgs),
    /// Per-subject test-time training on the held-out domain.
    Ttt(TttArgs),
    /// Train and evaluate the four loss ablation variants.
    Ablate(AblateArgs),
    /// Domain-alignment probe on the source domains.
    Probe(ProbeArgs),
    /// Export input, reconstruction, mask overlay and likelihood channels.
    Viz(VizArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    #[arg(long, default_value_t = 8)]
    slices: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Dataset directory (with manifest.json).
    #[arg(long)]
    data: PathBuf,
    /// Held-out target domain id.
    #[arg(long)]
    holdout: String,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// TOML training configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Fraction of subjects per source domain with masks, in (0, 1].
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Hausdorff variant: standard or modified.
    #[arg(long, default_value = "modified")]
    hd: String,
}

#[derive(Args, Debug, Serialize)]
struct TttArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 15)]
    iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    lr: f64,
    /// Leave the unadapted state out of the snapshot candidates.
    #[arg(long)]
    exclude_initial: bool,
    #[arg(long, default_value = "modified")]
    hd: String,
}

#[derive(Args, Debug, Serialize)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, default_value = "modified")]
    hd: String,
}

#[derive(Args, Debug, Serialize)]
struct ProbeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// image, features, likelihoods or all.
    #[arg(long, default_value = "all")]
    representation: String,
    /// Replace domain labels by a shuffle (chance-level check).
    #[arg(long)]
    shuffle_labels: bool,
}

#[derive(Args, Debug, Serialize)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; used with --subject and --slice.
    #[arg(long, requires = "subject")]
    data: Option<PathBuf>,
    #[arg(long)]
    subject: Option<String>,
    #[arg(long, default_value_t = 0)]
    slice: usize,
    /// A grayscale PNG to visualize instead of a dataset slice.
    #[arg(long, conflicts_with = "data")]
    image: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    top_k: usize,
}

/// Exit codes by failure category.
const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_DATA: u8 = 5;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } => EXIT_IO,
        Error::CorruptDataset { .. } | Error::CorruptCheckpoint(_) | Error::Version { .. } | Error::InvalidLabel(_) => {
            EXIT_DATA
        }
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn parse_hd(s: &str) -> Result<HausdorffVariant, Error> {
    s.parse()
}

fn sha256_file(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn create_dir(path: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|i| serde_json::to_string(&i).expect("record serializes") + "\n")
        .collect()
}

fn load_dataset(args: &DataArgs, manifest: &mut RunManifest) -> Result<data::Dataset, Error> {
    let ds = data::load(&args.data)?;
    ds.require_domain(&args.holdout)?;
    manifest.input(&args.data.join("manifest.json"), sha256_file(&args.data.join("manifest.json"))?);
    Ok(ds)
}

fn load_checkpoint(path: &Path, manifest: &mut RunManifest) -> Result<ModelState<f32>, Error> {
    let state = ModelState::<f32>::load(path)?;
    manifest.input(path, sha256_file(path)?);
    Ok(state)
}

fn holdout_set(ds: &data::Dataset, holdout: &str, seed: u64) -> Result<data::Dataset, Error> {
    Ok(data::split(ds, holdout, 1.0, seed)?.1)
}

fn resolve_train_config(
    path: Option<&Path>,
    seed: u64,
    overrides: impl FnOnce(&mut TrainConfig),
) -> Result<TrainConfig, Error> {
    let mut cfg = match path {
        Some(p) => training::load_config(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    overrides(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let (name, out) = match &cli.command {
        Command::GenData(a) => ("gen-data", &a.out),
        Command::Train(a) => ("train", &a.out),
        Command::Eval(a) => ("eval", &a.out),
        Command::Ttt(a) => ("ttt", &a.out),
        Command::Ablate(a) => ("ablate", &a.out),
        Command::Probe(a) => ("probe", &a.out),
        Command::Viz(a) => ("viz", &a.out),
    };
    let manifest_path = cli.run_manifest.clone().unwrap_or_else(|| manifest::default_path(out));
    let mut m = RunManifest::start(name, cli.seed);
    match &cli.command {
        Command::GenData(a) => {
            let cfg = GeneratorConfig {
                num_domains: a.domains,
                subjects_per_domain: a.subjects,
                slices_per_subject: a.slices,
                seed: cli.seed,
                height: a.height,
                width: a.width,
            };
            m.config = serde_json::to_value(&cfg).unwrap();
            data::generate(&cfg, &a.out)?;
            println!("wrote dataset to {}", a.out.display());
        }
        Command::Train(a) => {
            let cfg = resolve_train_config(a.config.as_deref(), cli.seed, |c| {
                if let Some(f) = a.fraction {
                    c.labeled_fraction = f;
                }
                if let Some(n) = a.iterations {
                    c.iterations = n;
                }
                if let Some(lr) = a.lr {
                    c.learning_rate = lr;
                }
                if let Some(b) = a.batch_size {
                    c.batch_size = b;
                }
            })?;
            m.config = serde_json::json!({ "train": cfg, "holdout": a.data.holdout });
            let ds = load_dataset(&a.data, &mut m)?;
            training::check_dataset_matches(&cfg, &ds)?;
            create_dir(&a.out)?;
            write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
            let dir = OutputDir { root: a.out.clone() };
            let outcome = training::train(&cfg, &ds, &a.data.holdout, Some(&dir))?;
            let last = outcome.log.last().expect("at least one report");
            println!(
                "trained {} iterations; final window total loss {:.4}; checkpoint {}",
                cfg.iterations,
                last.total,
                dir.final_checkpoint().display()
            );
        }
        Command::Eval(a) => {
            let variant = parse_hd(&a.hd)?;
            m.config = serde_json::json!({ "holdout": a.data.holdout, "hd": variant });
            let state = load_checkpoint(&a.checkpoint, &mut m)?;
            let ds = load_dataset(&a.data, &mut m)?;
            let test = holdout_set(&ds, &a.data.holdout, cli.seed)?;
            let report = eval::evaluate(&state.store, &state.meta.model, &test, variant)?;
            print!("{}", report.table());
            create_dir(&a.out)?;
            write_text(&a.out.join("subjects.jsonl"), &jsonl(&report.subjects))?;
            write_text(
                &a.out.join("report.json"),
                &serde_json::to_string_pretty(&report).unwrap(),
            )?;
        }
        Command::Ttt(a) => {
            let variant = parse_hd(&a.hd)?;
            let cfg = TttConfig {
                iterations: a.iterations,
                learning_rate: a.lr,
                include_initial: !a.exclude_initial,
            };
            cfg.validate()?;
            m.config = serde_json::json!({ "holdout": a.data.holdout, "ttt": cfg, "hd": variant });
            let state = load_checkpoint(&a.checkpoint, &mut m)?;
            let ds = load_dataset(&a.data, &mut m)?;
            let report = ttt::ttt_evaluate(&state.store, &state.meta.model, &ds, &a.data.holdout, &cfg, variant)?;
            println!(
                "{:<8} {:>10} {:>10} {:>10} {:>10} {:>11} {:>11} {:>4}",
                "subject", "Dice", "Dice+TTT", "HD", "HD+TTT", "rec before", "rec after", "sel"
            );
            let hd = |v: Option<f64>| v.map_or("undef".to_string(), |x| format!("{x:.2}"));
            for r in &report.rows {
                println!(
                    "{:<8} {:>10.2} {:>10.2} {:>10} {:>10} {:>11.5} {:>11.5} {:>4}",
                    r.subject,
                    r.baseline_dice,
                    r.ttt_dice,
                    hd(r.baseline_hd),
                    hd(r.ttt_hd),
                    r.rec_before,
                    r.rec_after,
                    r.trace.selected
                );
            }
            println!(
                "mean Dice {:.2} -> {:.2}; mean reconstruction error {:.5} -> {:.5}",
                report.baseline.mean_dice, report.adapted.mean_dice, report.mean_rec_before, report.mean_rec_after
            );
            create_dir(&a.out)?;
            write_text(&a.out.join("paired.jsonl"), &jsonl(&report.rows))?;
            write_text(
                &a.out.join("trace.jsonl"),
                &jsonl(report.rows.iter().map(|r| &r.trace)),
            )?;
            write_text(
                &a.out.join("report.json"),
                &serde_json::to_string_pretty(&report).unwrap(),
            )?;
        }
        Command::Ablate(a) => {
            let variant = parse_hd(&a.hd)?;
            let cfg = resolve_train_config(a.config.as_deref(), cli.seed, |c| {
                c.labeled_fraction = a.fraction;
                if let Some(n) = a.iterations {
                    c.iterations = n;
                }
            })?;
            m.config = serde_json::json!({ "train": cfg, "holdout": a.data.holdout, "hd": variant });
            let ds = load_dataset(&a.data, &mut m)?;
            training::check_dataset_matches(&cfg, &ds)?;
            let rows = training::run_ablation(&cfg, &ds, &a.data.holdout, variant)?;
            println!("{:<10} {:>16} {:>16}", "variant", "Dice (%)", "HD (px)");
            for r in &rows {
                println!(
                    "{:<10} {:>16} {:>16}",
                    r.variant,
                    format!("{:.2} ± {:.2}", r.report.mean_dice, r.report.mean_dice_std),
                    r.report
                        .mean_hd
                        .map_or("undefined".into(), |h| format!("{h:.2} ± {:.2}", r.report.mean_hd_std.unwrap_or(0.0)))
                );
            }
            create_dir(&a.out)?;
            write_text(&a.out.join("ablation.jsonl"), &jsonl(&rows))?;
        }
        Command::Probe(a) => {
            let reps: Vec<Representation> = if a.representation == "all" {
                vec![Representation::Image, Representation::Features, Representation::Likelihoods]
            } else {
                vec![a.representation.parse()?]
            };
            let probe = ProbeConfig {
                seed: cli.seed,
                shuffle_labels: a.shuffle_labels,
                ..ProbeConfig::default()
            };
            m.config = serde_json::json!({ "holdout": a.data.holdout, "probe": probe, "representations": reps });
            let state = load_checkpoint(&a.checkpoint, &mut m)?;
            let ds = load_dataset(&a.data, &mut m)?;
            let sources = source_set(&ds, &a.data.holdout)?;
            let mut results = Vec::new();
            for r in reps {
                let res = eval::alignment_probe(&state.store, &state.meta.model, &sources, r, &probe)?;
                println!(
                    "{:<12} cross-entropy {:.4}  accuracy {:.3}",
                    format!("{r:?}").to_lowercase(),
                    res.cross_entropy,
                    res.accuracy
                );
                results.push(res);
            }
            create_dir(&a.out)?;
            write_text(&a.out.join("probe.jsonl"), &jsonl(&results))?;
        }
        Command::Viz(a) => {
            m.config = serde_json::json!({ "top_k": a.top_k, "subject": a.subject, "slice": a.slice });
            let state = load_checkpoint(&a.checkpoint, &mut m)?;
            let image: Tensor<f32> = match (&a.image, &a.data, &a.subject) {
                (Some(p), _, _) => {
                    let bytes = std::fs::read(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    m.input(p, hex::encode(Sha256::digest(&bytes)));
                    let (w, h, px) = data::read_png(&bytes).map_err(|reason| Error::CorruptDataset {
                        path: p.clone(),
                        reason,
                    })?;
                    Tensor::from_vec(&[h, w], px.iter().map(|&v| v as f32 / 255.0).collect())?
                }
                (None, Some(dir), Some(subject)) => {
                    let ds = data::load(dir)?;
                    m.input(&dir.join("manifest.json"), sha256_file(&dir.join("manifest.json"))?);
                    let sample = ds
                        .subject_samples(subject)
                        .into_iter()
                        .find(|s| s.slice == a.slice)
                        .ok_or_else(|| Error::Config(format!("no slice {} for subject {subject:?}", a.slice)))?;
                    ds.image_batch::<f32>(&[sample])?
                }
                _ => return Err(Error::Config("viz needs --image or --data with --subject".into())),
            };
            let files = eval::export_likelihood_maps(&state.store, &state.meta.model, &image, &a.out, a.top_k)?;
            for f in &files {
                println!("{}", f.display());
            }
        }
    }
    m.finish(out, &manifest_path)
}

/// Every labeled slice of the source domains, with masks for the probe.
fn source_set(ds: &data::Dataset, holdout: &str) -> Result<data::Dataset, Error> {
    let (mut train, _) = data::split(ds, holdout, 1.0, 0)?;
    train.samples.retain(|s| s.mask.is_some());
    Ok(train)
}

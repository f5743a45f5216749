//! The composite objective, semi-supervised batching and the
//! leave-one-domain-out training driver.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{CheckpointMeta, ModelState};
use crate::data::{self, one_hot, Dataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{self, ModelConfig, Mode, ParamStore, Trainable};
use crate::ops::BatchStats;
use crate::optim::Adam;
use crate::tensor::{Scalar, Tensor};

/// Stream ids of the run RNG. Batches draw from their own stream so that
/// changing the loss terms never changes which images are seen.
const INIT_STREAM: u64 = 0;
const BATCH_STREAM: u64 = 1;

/// Which terms of the objective are active. The Dice term is always
/// present for labeled samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTerms {
    pub reconstruction: bool,
    pub vmf: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            reconstruction: true,
            vmf: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub report_every: usize,
    pub checkpoint_every: usize,
    pub terms: LossTerms,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            iterations: 2000,
            batch_size: 4,
            labeled_fraction: 0.2,
            seed: 0,
            report_every: 100,
            checkpoint_every: 500,
            terms: LossTerms::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.report_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("report_every and checkpoint_every must be at least 1".into()));
        }
        data::check_fraction(self.labeled_fraction)?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean soft Dice over labeled samples; absent without labels.
    pub dice_loss: Option<f64>,
    pub rec_loss: f64,
    pub vmf_loss: f64,
    /// The optimized objective: active terms only.
    pub total: f64,
    pub labeled_count_in_batch: usize,
}

/// A training batch with one-hot targets for its labeled members.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    /// `[N, K+1, H, W]`; all-zero planes for unlabeled samples.
    pub truth: Tensor<T>,
    pub labeled: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(dataset: &Dataset, samples: &[&Sample]) -> Result<Self> {
        let images = dataset.image_batch(samples)?;
        let channels = dataset.classes + 1;
        let plane = dataset.height * dataset.width;
        let mut truth = vec![T::zero(); samples.len() * channels * plane];
        let mut labeled = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if let (true, Some(mask)) = (s.labeled, &s.mask) {
                let oh = one_hot::<T>(mask, channels);
                truth[i * channels * plane..(i + 1) * channels * plane].copy_from_slice(&oh);
                labeled.push(i);
            }
        }
        Ok(Self {
            images,
            truth: Tensor::from_vec(&[samples.len(), channels, dataset.height, dataset.width], truth)?,
            labeled,
        })
    }
}

/// Output of one differentiated forward pass.
pub struct LossOutput<T> {
    pub report: LossReport,
    /// Per-parameter gradients in store order (`None` when not reached).
    pub grads: Vec<Option<Tensor<T>>>,
    pub stats: Vec<(String, BatchStats<T>)>,
}

/// Runs the full pipeline and differentiates
/// `lambda * dice + rec + vmf` with `lambda` set per sample by label presence.
pub fn forward_loss<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    batch: &Batch<T>,
    terms: LossTerms,
    trainable: Trainable,
    mode: Mode,
) -> Result<LossOutput<T>> {
    let mut bound = nn::Bound::new(store, trainable, mode);
    let v = nn::forward(&mut bound, cfg, &batch.images)?;
    let g = &mut bound.graph;
    let rec = g.l1(v.reconstruction, &batch.images);
    let vmf = g.vmf_loss(v.features, v.kernels);
    let mut parts = Vec::new();
    let dice = if batch.labeled.is_empty() {
        None
    } else {
        let d = g.dice(v.masks, &batch.truth, &batch.labeled);
        parts.push((d, T::one()));
        Some(d)
    };
    if terms.reconstruction {
        parts.push((rec, T::one()));
    }
    if terms.vmf {
        parts.push((vmf, T::one()));
    }
    let report = LossReport {
        dice_loss: dice.map(|d| g.scalar(d).as_f64()),
        rec_loss: g.scalar(rec).as_f64(),
        vmf_loss: g.scalar(vmf).as_f64(),
        total: 0.0,
        labeled_count_in_batch: batch.labeled.len(),
    };
    let (total, grads) = if parts.is_empty() {
        (0.0, vec![None; store.params.len()])
    } else {
        let root = g.weighted_sum(&parts);
        let mut gr = g.backward(root);
        let total = g.scalar(root).as_f64();
        (total, bound.vars.iter().map(|&p| gr.take(p)).collect())
    };
    Ok(LossOutput {
        report: LossReport { total, ..report },
        grads,
        stats: bound.stats,
    })
}

/// One line of the metrics log: window means over the reporting interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub window: usize,
    /// Mean over iterations that had labeled samples.
    pub dice_loss: Option<f64>,
    pub rec_loss: f64,
    pub vmf_loss: f64,
    pub total: f64,
    pub labeled_count: usize,
    pub wall_clock_s: f64,
}

#[derive(Default)]
struct Window {
    n: usize,
    dice_n: usize,
    dice: f64,
    rec: f64,
    vmf: f64,
    total: f64,
    labeled: usize,
}

impl Window {
    fn add(&mut self, r: &LossReport) {
        self.n += 1;
        if let Some(d) = r.dice_loss {
            self.dice += d;
            self.dice_n += 1;
        }
        self.rec += r.rec_loss;
        self.vmf += r.vmf_loss;
        self.total += r.total;
        self.labeled += r.labeled_count_in_batch;
    }

    fn record(&self, iteration: usize, wall_clock_s: f64) -> LogRecord {
        let n = self.n as f64;
        LogRecord {
            iteration,
            window: self.n,
            dice_loss: (self.dice_n > 0).then(|| self.dice / self.dice_n as f64),
            rec_loss: self.rec / n,
            vmf_loss: self.vmf / n,
            total: self.total / n,
            labeled_count: self.labeled,
            wall_clock_s,
        }
    }
}

/// Where `train` writes its artifacts.
#[derive(Debug, Clone)]
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn checkpoint(&self, iteration: usize) -> PathBuf {
        self.root.join(format!("checkpoint_{iteration:06}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.root.join("final.ckpt")
    }
}

pub struct TrainOutcome {
    pub state: ModelState<f32>,
    pub log: Vec<LogRecord>,
    /// Every iteration's report, in order.
    pub history: Vec<LossReport>,
    pub checkpoints: Vec<PathBuf>,
}

/// Uniform over subjects, then uniform over that subject's slices.
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    subjects: Vec<Vec<&'a Sample>>,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, seed: u64) -> Result<Self> {
        let subjects: Vec<Vec<&Sample>> = dataset
            .subjects(None)
            .iter()
            .map(|s| dataset.subject_samples(s))
            .collect();
        if subjects.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(BATCH_STREAM);
        Ok(Self { dataset, subjects, rng })
    }

    pub fn next_samples(&mut self, size: usize) -> Vec<&'a Sample> {
        (0..size)
            .map(|_| {
                let subject = self.subjects.choose(&mut self.rng).unwrap();
                *subject.choose(&mut self.rng).unwrap()
            })
            .collect()
    }

    pub fn next_batch<T: Scalar>(&mut self, size: usize) -> Result<Batch<T>> {
        let samples = self.next_samples(size);
        Batch::from_samples(self.dataset, &samples)
    }
}

pub fn init_state(cfg: &TrainConfig) -> Result<ModelState<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    let store = ParamStore::init(&cfg.model, &mut rng)?;
    Ok(ModelState {
        meta: CheckpointMeta {
            model: cfg.model.clone(),
            iteration: 0,
            seed: cfg.seed,
            extra: serde_json::json!({ "train": cfg }),
        },
        adam: Some(Adam::new(&store, cfg.learning_rate)),
        store,
    })
}

/// Trains on every domain except `holdout`, with the labeled subset chosen
/// by the seeded split. Writes metrics and checkpoints when `out` is given.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, holdout: &str, out: Option<&OutputDir>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.domains.len() < 2 {
        return Err(Error::Config("training needs at least 2 domains".into()));
    }
    check_dataset_matches(cfg, dataset)?;
    let (train_set, _) = data::split(dataset, holdout, cfg.labeled_fraction, cfg.seed)?;
    train_on(cfg, &train_set, out)
}

pub fn check_dataset_matches(cfg: &TrainConfig, dataset: &Dataset) -> Result<()> {
    if (dataset.height, dataset.width) != cfg.model.encoder.input_size {
        return Err(Error::Config(format!(
            "dataset images are {}x{} but the encoder expects {:?}",
            dataset.height, dataset.width, cfg.model.encoder.input_size
        )));
    }
    if dataset.classes != cfg.model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model has {}",
            dataset.classes, cfg.model.classes
        )));
    }
    Ok(())
}

/// Trains on every sample of `train_set` (labels as flagged).
pub fn train_on(cfg: &TrainConfig, train_set: &Dataset, out: Option<&OutputDir>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut state = init_state(cfg)?;
    let mut adam = state.adam.take().expect("fresh state has an optimizer");
    let mut sampler = BatchSampler::new(train_set, cfg.seed)?;
    let mut metrics = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.root).map_err(|e| Error::io(&o.root, e))?;
            let path = o.metrics();
            Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
        }
        None => None,
    };
    let start = Instant::now();
    let mut log = Vec::new();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    let mut window = Window::default();
    for it in 1..=cfg.iterations {
        let batch = sampler.next_batch::<f32>(cfg.batch_size)?;
        let out_step = forward_loss(&state.store, &cfg.model, &batch, cfg.terms, Trainable::ALL, Mode::Train)?;
        if !out_step.report.total.is_finite() {
            return Err(Error::InvalidInput(format!("loss became non-finite at iteration {it}")));
        }
        adam.step(&mut state.store, &out_step.grads, Trainable::ALL);
        state.store.update_running_stats(&out_step.stats);
        window.add(&out_step.report);
        history.push(out_step.report);
        if it == 1 || it % cfg.report_every == 0 || it == cfg.iterations {
            let rec = window.record(it, start.elapsed().as_secs_f64());
            log::info!(
                "iter {it}: total {:.4} dice {} rec {:.4} vmf {:.4}",
                rec.total,
                rec.dice_loss.map_or("-".into(), |d| format!("{d:.4}")),
                rec.rec_loss,
                rec.vmf_loss
            );
            if let (Some(w), Some(o)) = (metrics.as_mut(), out) {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(w, "{line}").map_err(|e| Error::io(o.metrics(), e))?;
            }
            log.push(rec);
            window = Window::default();
        }
        state.meta.iteration = it as u64;
        if let Some(o) = out {
            if it % cfg.checkpoint_every == 0 || it == cfg.iterations {
                state.adam = Some(adam.clone());
                let path = if it == cfg.iterations {
                    o.final_checkpoint()
                } else {
                    o.checkpoint(it)
                };
                state.save(&path)?;
                checkpoints.push(path);
                state.adam = None;
            }
        }
    }
    if let (Some(mut w), Some(o)) = (metrics, out) {
        w.flush().map_err(|e| Error::io(o.metrics(), e))?;
    }
    state.adam = Some(adam);
    state.sync_adam_meta();
    Ok(TrainOutcome {
        state,
        log,
        history,
        checkpoints,
    })
}

/// The four objective variants compared by the ablation.
pub const ABLATION_VARIANTS: [(&str, LossTerms); 4] = [
    (
        "full",
        LossTerms {
            reconstruction: true,
            vmf: true,
        },
    ),
    (
        "no_rec",
        LossTerms {
            reconstruction: false,
            vmf: true,
        },
    ),
    (
        "no_vmf",
        LossTerms {
            reconstruction: true,
            vmf: false,
        },
    ),
    (
        "neither",
        LossTerms {
            reconstruction: false,
            vmf: false,
        },
    ),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub terms: LossTerms,
    pub report: crate::eval::MetricReport,
}

/// Trains each variant from the same seed and split and evaluates it on
/// the held-out domain.
pub fn run_ablation(
    cfg: &TrainConfig,
    dataset: &Dataset,
    holdout: &str,
    hd: crate::eval::HausdorffVariant,
) -> Result<Vec<AblationRow>> {
    let (_, test) = data::split(dataset, holdout, cfg.labeled_fraction, cfg.seed)?;
    ABLATION_VARIANTS
        .iter()
        .map(|&(name, terms)| {
            log::info!("ablation variant {name}");
            let variant = TrainConfig { terms, ..cfg.clone() };
            let outcome = train(&variant, dataset, holdout, None)?;
            let report = crate::eval::evaluate(&outcome.state.store, &cfg.model, &test, hd)?;
            Ok(AblationRow {
                variant: name.to_string(),
                terms,
                report,
            })
        })
        .collect()
}

/// Loads a training configuration file.
pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrainConfig::from_toml(&text)
}

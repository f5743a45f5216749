//! Per-subject test-time training on the reconstruction loss.
//!
//! Only the encoder and the reconstructor move. Normalization layers use
//! their running statistics throughout, and every subject starts from the
//! same trained parameters.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{self, HausdorffVariant, MetricReport};
use crate::nn::{self, Group, ModelConfig, Mode, ParamStore, Trainable};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::training::{forward_loss, Batch, LossTerms};

pub const ADAPTED: Trainable = Trainable {
    encoder: true,
    task: false,
    reconstructor: true,
    kernels: false,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TttConfig {
    /// Gradient steps per subject; 0 reproduces the unadapted model.
    pub iterations: usize,
    pub learning_rate: f64,
    /// Keep the unadapted parameters among the selection candidates.
    pub include_initial: bool,
}

impl Default for TttConfig {
    fn default() -> Self {
        Self {
            iterations: 15,
            learning_rate: 1e-6,
            include_initial: true,
        }
    }
}

impl TttConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("TTT learning rate must be positive, got {}", self.learning_rate)));
        }
        if !self.include_initial && self.iterations == 0 {
            return Err(Error::Config("no TTT candidates: zero iterations without the initial state".into()));
        }
        Ok(())
    }
}

/// Snapshot-selection trace for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub subject: String,
    /// Mean L1 reconstruction error of every candidate; index 0 is the
    /// unadapted state, index `t` the state after `t` steps.
    pub errors: Vec<f64>,
    pub selected: usize,
}

impl AdaptTrace {
    pub fn initial_error(&self) -> f64 {
        self.errors[0]
    }

    pub fn selected_error(&self) -> f64 {
        self.errors[self.selected]
    }
}

pub struct Adapted {
    pub store: ParamStore<f32>,
    pub labels: Vec<Vec<u8>>,
    pub trace: AdaptTrace,
}

fn frozen_equal(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.params.iter().zip(&b.params).enumerate().all(|(i, (x, y))| {
        matches!(a.group(i), Group::Encoder | Group::Reconstructor) || x.value.data() == y.value.data()
    })
}

/// Adapts a private copy of `store` to one subject's `[N, 1, H, W]` images
/// and predicts with the snapshot of minimum reconstruction error.
pub fn adapt_subject(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    subject: &str,
    images: &Tensor<f32>,
    ttt: &TttConfig,
) -> Result<Adapted> {
    ttt.validate()?;
    if images.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::InvalidInput(format!("subject {subject} has no images")));
    }
    let n = images.shape()[0];
    let batch = Batch {
        images: images.clone(),
        truth: Tensor::zeros(&[n, 1, 1, 1]),
        labeled: Vec::new(),
    };
    let terms = LossTerms {
        reconstruction: true,
        vmf: false,
    };
    let mut current = store.clone();
    let mut adam = Adam::new(&current, ttt.learning_rate);
    let mut errors = Vec::with_capacity(ttt.iterations + 1);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for step in 0..=ttt.iterations {
        let out = forward_loss(&current, cfg, &batch, terms, ADAPTED, Mode::Eval)?;
        let err = out.report.rec_loss;
        errors.push(err);
        let eligible = step > 0 || ttt.include_initial;
        if eligible && best.as_ref().map_or(true, |b| err < b.0) {
            best = Some((err, step, current.clone()));
        }
        if step < ttt.iterations {
            adam.step(&mut current, &out.grads, ADAPTED);
        }
    }
    let (_, selected, chosen) = best.expect("at least one candidate");
    assert!(frozen_equal(&chosen, store), "kernels or task head changed during adaptation");
    let labels = nn::predict_labels(&nn::infer(&chosen, cfg, images)?.masks);
    Ok(Adapted {
        store: chosen,
        labels,
        trace: AdaptTrace {
            subject: subject.to_string(),
            errors,
            selected,
        },
    })
}

/// Paired outcome for one held-out subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub subject: String,
    pub baseline_dice: f64,
    pub ttt_dice: f64,
    pub baseline_hd: Option<f64>,
    pub ttt_hd: Option<f64>,
    pub rec_before: f64,
    pub rec_after: f64,
    pub trace: AdaptTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TttReport {
    pub rows: Vec<PairedRow>,
    pub baseline: MetricReport,
    pub adapted: MetricReport,
    pub mean_rec_before: f64,
    pub mean_rec_after: f64,
}

/// Baseline versus adapted metrics on every subject of domain `holdout`.
pub fn ttt_evaluate(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    dataset: &Dataset,
    holdout: &str,
    ttt: &TttConfig,
    variant: HausdorffVariant,
) -> Result<TttReport> {
    dataset.require_domain(holdout)?;
    ttt.validate()?;
    let mut base_rows = Vec::new();
    let mut ttt_rows = Vec::new();
    let mut rows = Vec::new();
    for subject in dataset.subjects(Some(holdout)) {
        let samples: Vec<&Sample> = dataset.subject_samples(&subject);
        let images = dataset.image_batch::<f32>(&samples)?;
        let baseline_labels = nn::predict_labels(&nn::infer(store, cfg, &images)?.masks);
        let adapted = adapt_subject(store, cfg, &subject, &images, ttt)?;
        let with_masks: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].mask.is_some()).collect();
        if with_masks.is_empty() {
            continue;
        }
        let truths: Vec<&[u8]> = with_masks.iter().map(|&i| samples[i].mask.as_deref().unwrap()).collect();
        let pick = |labels: &[Vec<u8>]| -> Vec<Vec<u8>> { with_masks.iter().map(|&i| labels[i].clone()).collect() };
        let (h, w, k) = (dataset.height, dataset.width, dataset.classes);
        let b = eval::subject_metrics(&subject, &pick(&baseline_labels), &truths, k, h, w, variant);
        let a = eval::subject_metrics(&subject, &pick(&adapted.labels), &truths, k, h, w, variant);
        rows.push(PairedRow {
            subject: subject.clone(),
            baseline_dice: b.mean_dice,
            ttt_dice: a.mean_dice,
            baseline_hd: b.mean_hd,
            ttt_hd: a.mean_hd,
            rec_before: adapted.trace.initial_error(),
            rec_after: adapted.trace.selected_error(),
            trace: adapted.trace,
        });
        base_rows.push(b);
        ttt_rows.push(a);
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("domain {holdout} has no labeled subjects")));
    }
    let n = rows.len() as f64;
    Ok(TttReport {
        mean_rec_before: rows.iter().map(|r| r.rec_before).sum::<f64>() / n,
        mean_rec_after: rows.iter().map(|r| r.rec_after).sum::<f64>() / n,
        rows,
        baseline: MetricReport::from_subjects(variant, base_rows),
        adapted: MetricReport::from_subjects(variant, ttt_rows),
    })
}

//! Segmentation metrics, the domain-alignment probe and likelihood-map export.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{write_png, Dataset, PngKind, Sample, CLASS_NAMES, PALETTE};
use crate::error::{Error, Result};
use crate::nn::{self, ModelConfig, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// `200 |P & T| / (|P| + |T|)` for one class; 100 when both sets are empty.
pub fn dice_score(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    let (inter, p, t) = dice_counts(pred, truth, class);
    dice_from_counts(inter, p, t)
}

fn dice_counts(pred: &[u8], truth: &[u8], class: u8) -> (usize, usize, usize) {
    assert_eq!(pred.len(), truth.len(), "label maps differ in size");
    let mut c = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(truth) {
        let (pa, tb) = (a == class, b == class);
        c.0 += (pa && tb) as usize;
        c.1 += pa as usize;
        c.2 += tb as usize;
    }
    c
}

fn dice_from_counts(inter: usize, p: usize, t: usize) -> f64 {
    if p + t == 0 {
        log::debug!("dice of two empty sets reported as 100");
        return 100.0;
    }
    200.0 * inter as f64 / (p + t) as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HausdorffVariant {
    /// Max of the two directed maxima.
    Standard,
    /// Max of the two directed mean distances.
    #[default]
    Modified,
}

impl std::str::FromStr for HausdorffVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "modified" => Ok(Self::Modified),
            _ => Err(Error::Config(format!("unknown Hausdorff variant {s:?} (standard, modified)"))),
        }
    }
}

/// Pixels of `class` with a 4-neighbor of another label. Pixels on the
/// image border count as boundary.
pub fn boundary(labels: &[u8], h: usize, w: usize, class: u8) -> Vec<(usize, usize)> {
    let at = |y: isize, x: isize| -> Option<u8> {
        (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w).then(|| labels[y as usize * w + x as usize])
    };
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if labels[y * w + x] != class {
                continue;
            }
            let (yi, xi) = (y as isize, x as isize);
            let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|&(dy, dx)| at(yi + dy, xi + dx) != Some(class));
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Squared Euclidean distance transform of a 1D sampled function
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest pixel of `points`.
fn squared_distance_map(points: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(y, x) in points {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Hausdorff distance between the boundaries of `class` in two label maps.
/// `None` when either map has no pixel of the class.
pub fn hausdorff(pred: &[u8], truth: &[u8], h: usize, w: usize, class: u8, variant: HausdorffVariant) -> Option<f64> {
    assert_eq!(pred.len(), h * w, "prediction size");
    assert_eq!(truth.len(), h * w, "truth size");
    let a = boundary(pred, h, w, class);
    let b = boundary(truth, h, w, class);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let to_b = squared_distance_map(&b, h, w);
    let to_a = squared_distance_map(&a, h, w);
    let directed = |pts: &[(usize, usize)], map: &[f64]| -> f64 {
        let d = pts.iter().map(|&(y, x)| map[y * w + x].sqrt());
        match variant {
            HausdorffVariant::Standard => d.fold(0.0, f64::max),
            HausdorffVariant::Modified => d.sum::<f64>() / pts.len() as f64,
        }
    };
    Some(directed(&a, &to_b).max(directed(&b, &to_a)))
}

/// Metrics of one subject: volume Dice over all its slices and the mean
/// Hausdorff distance over slices where it is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject: String,
    /// Per foreground class, percent.
    pub dice: Vec<f64>,
    /// Per foreground class; `None` if undefined on every slice.
    pub hd: Vec<Option<f64>>,
    /// Slices per class where HD was undefined.
    pub hd_undefined_slices: Vec<usize>,
    pub mean_dice: f64,
    pub mean_hd: Option<f64>,
}

pub fn subject_metrics(
    subject: &str,
    preds: &[Vec<u8>],
    truths: &[&[u8]],
    classes: usize,
    h: usize,
    w: usize,
    variant: HausdorffVariant,
) -> SubjectMetrics {
    let mut dice = Vec::with_capacity(classes);
    let mut hd = Vec::with_capacity(classes);
    let mut undefined = Vec::with_capacity(classes);
    for class in 1..=classes as u8 {
        let (mut i, mut p, mut t) = (0, 0, 0);
        let mut dists = Vec::new();
        let mut missing = 0;
        for (pred, truth) in preds.iter().zip(truths) {
            let c = dice_counts(pred, truth, class);
            i += c.0;
            p += c.1;
            t += c.2;
            match hausdorff(pred, truth, h, w, class, variant) {
                Some(d) => dists.push(d),
                None => missing += 1,
            }
        }
        dice.push(dice_from_counts(i, p, t));
        hd.push((!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64));
        undefined.push(missing);
    }
    let defined: Vec<f64> = hd.iter().flatten().copied().collect();
    SubjectMetrics {
        subject: subject.to_string(),
        mean_dice: dice.iter().sum::<f64>() / classes as f64,
        mean_hd: (defined.len() == classes).then(|| defined.iter().sum::<f64>() / classes as f64),
        dice,
        hd,
        hd_undefined_slices: undefined,
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    /// Over subjects with a defined HD.
    pub hd_mean: Option<f64>,
    pub hd_std: Option<f64>,
    /// Subjects whose HD was undefined on every slice.
    pub hd_undefined_subjects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hd_variant: HausdorffVariant,
    pub classes: Vec<ClassSummary>,
    pub mean_dice: f64,
    pub mean_dice_std: f64,
    pub mean_hd: Option<f64>,
    pub mean_hd_std: Option<f64>,
    pub subjects: Vec<SubjectMetrics>,
}

impl MetricReport {
    pub fn from_subjects(variant: HausdorffVariant, subjects: Vec<SubjectMetrics>) -> Self {
        let classes = subjects.first().map_or(0, |s| s.dice.len());
        let summaries = (0..classes)
            .map(|c| {
                let dice: Vec<f64> = subjects.iter().map(|s| s.dice[c]).collect();
                let hd: Vec<f64> = subjects.iter().filter_map(|s| s.hd[c]).collect();
                let (dice_mean, dice_std) = mean_std(&dice);
                let hd_stats = (!hd.is_empty()).then(|| mean_std(&hd));
                ClassSummary {
                    class: CLASS_NAMES.get(c + 1).map_or(format!("class{}", c + 1), |s| s.to_string()),
                    dice_mean,
                    dice_std,
                    hd_mean: hd_stats.map(|s| s.0),
                    hd_std: hd_stats.map(|s| s.1),
                    hd_undefined_subjects: subjects.len() - hd.len(),
                }
            })
            .collect();
        let means: Vec<f64> = subjects.iter().map(|s| s.mean_dice).collect();
        let hds: Vec<f64> = subjects.iter().filter_map(|s| s.mean_hd).collect();
        let (mean_dice, mean_dice_std) = mean_std(&means);
        let hd_stats = (!hds.is_empty()).then(|| mean_std(&hds));
        Self {
            hd_variant: variant,
            classes: summaries,
            mean_dice,
            mean_dice_std,
            mean_hd: hd_stats.map(|s| s.0),
            mean_hd_std: hd_stats.map(|s| s.1),
            subjects,
        }
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let fmt_opt = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:6.2} ± {s:5.2}"),
            _ => "     undefined".to_string(),
        };
        let mut out = format!("{:<12} {:>16} {:>16} {:>9}\n", "class", "Dice (%)", "HD (px)", "HD undef");
        for c in &self.classes {
            out += &format!(
                "{:<12} {:>16} {:>16} {:>9}\n",
                c.class,
                format!("{:6.2} ± {:5.2}", c.dice_mean, c.dice_std),
                fmt_opt(c.hd_mean, c.hd_std),
                c.hd_undefined_subjects
            );
        }
        out += &format!(
            "{:<12} {:>16} {:>16}\n",
            "mean",
            format!("{:6.2} ± {:5.2}", self.mean_dice, self.mean_dice_std),
            fmt_opt(self.mean_hd, self.mean_hd_std)
        );
        out += &format!(
            "HD variant: {}\n",
            match self.hd_variant {
                HausdorffVariant::Standard => "standard",
                HausdorffVariant::Modified => "modified",
            }
        );
        out
    }
}

/// Eval-mode label maps for a set of samples, in order.
pub fn predict<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    dataset: &Dataset,
    samples: &[&Sample],
) -> Result<Vec<Vec<u8>>> {
    let images = dataset.image_batch::<T>(samples)?;
    let out = nn::infer(store, cfg, &images)?;
    Ok(nn::predict_labels(&out.masks))
}

/// Per-subject metrics on every subject of `test` that has masks.
pub fn evaluate<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    test: &Dataset,
    variant: HausdorffVariant,
) -> Result<MetricReport> {
    let mut subjects = Vec::new();
    for subject in test.subjects(None) {
        let samples: Vec<&Sample> = test.subject_samples(&subject).into_iter().filter(|s| s.mask.is_some()).collect();
        if samples.is_empty() {
            continue;
        }
        let preds = predict(store, cfg, test, &samples)?;
        let truths: Vec<&[u8]> = samples.iter().map(|s| s.mask.as_deref().unwrap()).collect();
        subjects.push(subject_metrics(&subject, &preds, &truths, test.classes, test.height, test.width, variant));
    }
    if subjects.is_empty() {
        return Err(Error::InvalidInput("no labeled subjects to evaluate".into()));
    }
    Ok(MetricReport::from_subjects(variant, subjects))
}

/// Input to the domain classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Image,
    Features,
    Likelihoods,
}

impl std::str::FromStr for Representation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Self::Image),
            "features" => Ok(Self::Features),
            "likelihoods" => Ok(Self::Likelihoods),
            _ => Err(Error::Config(format!("unknown representation {s:?} (image, features, likelihoods)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Replace domain labels by a seeded balanced shuffle (chance check).
    pub shuffle_labels: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            epochs: 300,
            learning_rate: 0.01,
            weight_decay: 1e-3,
            seed: 0,
            shuffle_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub representation: Representation,
    /// Mean cross-entropy on held-out subjects.
    pub cross_entropy: f64,
    pub accuracy: f64,
    pub best_epoch: usize,
    pub domains: Vec<String>,
}

/// Foreground-masked average of a `[C, h, w]` map; the mask is at `scale`
/// times the map resolution and a map position counts as foreground when
/// any pixel of its block is.
fn masked_pool(map: &[f64], c: usize, h: usize, w: usize, mask: &[u8], scale: usize) -> Vec<f64> {
    let mw = w * scale;
    let fg: Vec<bool> = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            (0..scale).any(|dy| (0..scale).any(|dx| mask[(y * scale + dy) * mw + x * scale + dx] > 0))
        })
        .collect();
    let count = fg.iter().filter(|&&f| f).count();
    (0..c)
        .map(|ch| {
            let plane = &map[ch * h * w..(ch + 1) * h * w];
            if count == 0 {
                plane.iter().sum::<f64>() / (h * w) as f64
            } else {
                plane.iter().zip(&fg).filter(|(_, &f)| f).map(|(v, _)| v).sum::<f64>() / count as f64
            }
        })
        .collect()
}

/// Pooled representation vectors, one per labeled slice of `dataset`.
pub fn probe_inputs<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    dataset: &Dataset,
    representation: Representation,
) -> Result<Vec<(String, String, Vec<f64>)>> {
    let mut out = Vec::new();
    for subject in dataset.subjects(None) {
        let samples: Vec<&Sample> = dataset
            .subject_samples(&subject)
            .into_iter()
            .filter(|s| s.mask.is_some())
            .collect();
        if samples.is_empty() {
            continue;
        }
        let images = dataset.image_batch::<T>(&samples)?;
        let inf = match representation {
            Representation::Image => None,
            _ => Some(nn::infer(store, cfg, &images)?),
        };
        for (i, s) in samples.iter().enumerate() {
            let mask = s.mask.as_deref().unwrap();
            let v = match (&inf, representation) {
                (None, _) | (_, Representation::Image) => {
                    let img: Vec<f64> = s.intensities::<f64>();
                    masked_pool(&img, 1, dataset.height, dataset.width, mask, 1)
                }
                (Some(inf), Representation::Features) => {
                    let (_, d, h, w) = inf.raw_features.dims4();
                    let raw: Vec<f64> = inf.raw_features.batch_item(i).data().iter().map(|v| v.as_f64()).collect();
                    // Unit-normalize each position as the kernels see it.
                    let mut z = raw.clone();
                    for p in 0..h * w {
                        let norm = (0..d).map(|c| raw[c * h * w + p].powi(2)).sum::<f64>().sqrt().max(crate::vmf::NORM_EPS);
                        for c in 0..d {
                            z[c * h * w + p] = raw[c * h * w + p] / norm;
                        }
                    }
                    masked_pool(&z, d, h, w, mask, dataset.height / h)
                }
                (Some(inf), Representation::Likelihoods) => {
                    let (_, j, h, w) = inf.likelihoods.dims4();
                    let l: Vec<f64> = inf.likelihoods.batch_item(i).data().iter().map(|v| v.as_f64()).collect();
                    masked_pool(&l, j, h, w, mask, dataset.height / h)
                }
            };
            out.push((s.domain.clone(), s.subject.clone(), v));
        }
    }
    Ok(out)
}

struct Mlp {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    d: usize,
    h: usize,
    k: usize,
}

impl Mlp {
    fn new(d: usize, h: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = (2.0 / d as f64).sqrt();
        Self {
            w1: (0..h * d).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect(),
            b1: vec![0.0; h],
            // A zero output layer starts at the uniform prediction.
            w2: vec![0.0; k * h],
            b2: vec![0.0; k],
            d,
            h,
            k,
        }
    }

    fn params(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        (0..self.h)
            .map(|i| {
                let a = self.b1[i] + (0..self.d).map(|j| self.w1[i * self.d + j] * x[j]).sum::<f64>();
                a.max(0.0)
            })
            .collect()
    }

    fn probs(&self, hid: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.k)
            .map(|c| self.b2[c] + (0..self.h).map(|i| self.w2[c * self.h + i] * hid[i]).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    fn loss(&self, xs: &[Vec<f64>], ys: &[usize]) -> (f64, f64) {
        let mut ce = 0.0;
        let mut correct = 0;
        for (x, &y) in xs.iter().zip(ys) {
            let p = self.probs(&self.hidden(x));
            ce -= p[y].max(1e-300).ln();
            let arg = (0..self.k).fold(0, |b, c| if p[c] > p[b] { c } else { b });
            correct += (arg == y) as usize;
        }
        (ce / xs.len() as f64, correct as f64 / xs.len() as f64)
    }

    /// Mean cross-entropy gradients over the set (no regularization).
    fn grads(&self, xs: &[Vec<f64>], ys: &[usize]) -> [Vec<f64>; 4] {
        let mut g = [
            vec![0.0; self.w1.len()],
            vec![0.0; self.h],
            vec![0.0; self.w2.len()],
            vec![0.0; self.k],
        ];
        let inv = 1.0 / xs.len() as f64;
        for (x, &y) in xs.iter().zip(ys) {
            let hid = self.hidden(x);
            let mut dl = self.probs(&hid);
            dl[y] -= 1.0;
            let mut dh = vec![0.0; self.h];
            for c in 0..self.k {
                g[3][c] += dl[c] * inv;
                for i in 0..self.h {
                    g[2][c * self.h + i] += dl[c] * hid[i] * inv;
                    dh[i] += dl[c] * self.w2[c * self.h + i];
                }
            }
            for i in 0..self.h {
                if hid[i] <= 0.0 {
                    continue;
                }
                g[1][i] += dh[i] * inv;
                for j in 0..self.d {
                    g[0][i * self.d + j] += dh[i] * x[j] * inv;
                }
            }
        }
        g
    }
}

/// Trains a seeded domain classifier on pooled representations and reports
/// held-out cross-entropy. Subjects of each domain are split 40/20/40 into
/// fit, validation (early stopping) and test.
pub fn run_probe(samples: &[(String, String, Vec<f64>)], cfg: &ProbeConfig) -> Result<(f64, f64, usize, Vec<String>)> {
    let mut domains: Vec<String> = samples.iter().map(|s| s.0.clone()).collect();
    domains.sort();
    domains.dedup();
    if domains.len() < 2 {
        return Err(Error::Config(format!(
            "the alignment probe needs at least 2 domains, got {}",
            domains.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Which subjects go where, per domain.
    let mut role = std::collections::HashMap::new();
    for d in &domains {
        let mut subs: Vec<String> = samples.iter().filter(|s| &s.0 == d).map(|s| s.1.clone()).collect();
        subs.dedup();
        subs.shuffle(&mut rng);
        let n = subs.len();
        if n < 3 {
            return Err(Error::Config(format!("domain {d} needs at least 3 labeled subjects for the probe")));
        }
        let fit = ((n as f64 * 0.4).round() as usize).clamp(1, n - 2);
        let val = ((n as f64 * 0.2).round() as usize).clamp(1, n - fit - 1);
        for (i, s) in subs.into_iter().enumerate() {
            role.insert(s, if i < fit { 0 } else if i < fit + val { 1 } else { 2 });
        }
    }
    let mut labels: Vec<usize> = samples
        .iter()
        .map(|s| domains.iter().position(|d| d == &s.0).unwrap())
        .collect();
    if cfg.shuffle_labels {
        labels.shuffle(&mut rng);
    }
    let dim = samples[0].2.len();
    let fit_idx: Vec<usize> = (0..samples.len()).filter(|&i| role[&samples[i].1] == 0).collect();
    // Standardize with fit-set statistics.
    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for &i in &fit_idx {
        for (m, v) in mean.iter_mut().zip(&samples[i].2) {
            *m += v / fit_idx.len() as f64;
        }
    }
    for &i in &fit_idx {
        for ((s, v), m) in std.iter_mut().zip(&samples[i].2).zip(&mean) {
            *s += (v - m).powi(2) / fit_idx.len() as f64;
        }
    }
    let std: Vec<f64> = std.iter().map(|s| s.sqrt().max(1e-8)).collect();
    let mut sets: [(Vec<Vec<f64>>, Vec<usize>); 3] = Default::default();
    for (i, s) in samples.iter().enumerate() {
        let x: Vec<f64> = s.2.iter().zip(&mean).zip(&std).map(|((v, m), sd)| (v - m) / sd).collect();
        let r = role[&s.1];
        sets[r].0.push(x);
        sets[r].1.push(labels[i]);
    }
    let mut mlp = Mlp::new(dim, cfg.hidden, domains.len(), &mut rng);
    let mut m: Vec<Vec<f64>> = mlp.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut v = m.clone();
    let snapshot = |mlp: &mut Mlp| -> Vec<Vec<f64>> { mlp.params().iter().map(|p| p.to_vec()).collect() };
    let mut best = (mlp.loss(&sets[1].0, &sets[1].1).0, 0usize, snapshot(&mut mlp));
    for epoch in 1..=cfg.epochs {
        let g = mlp.grads(&sets[0].0, &sets[0].1);
        let t = epoch as i32;
        let (c1, c2) = (1.0 - 0.9f64.powi(t), 1.0 - 0.999f64.powi(t));
        for (k, p) in mlp.params().into_iter().enumerate() {
            for i in 0..p.len() {
                let gi = g[k][i] + cfg.weight_decay * p[i];
                m[k][i] = 0.9 * m[k][i] + 0.1 * gi;
                v[k][i] = 0.999 * v[k][i] + 0.001 * gi * gi;
                p[i] -= cfg.learning_rate * (m[k][i] / c1) / ((v[k][i] / c2).sqrt() + 1e-8);
            }
        }
        let val = mlp.loss(&sets[1].0, &sets[1].1).0;
        if val < best.0 {
            best = (val, epoch, snapshot(&mut mlp));
        }
    }
    for (p, saved) in mlp.params().into_iter().zip(best.2) {
        *p = saved;
    }
    let (ce, acc) = mlp.loss(&sets[2].0, &sets[2].1);
    Ok((ce, acc, best.1, domains))
}

/// Domain-classification cross-entropy on held-out subjects of `dataset`
/// (its labeled slices), using the chosen representation.
pub fn alignment_probe<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    dataset: &Dataset,
    representation: Representation,
    probe: &ProbeConfig,
) -> Result<ProbeResult> {
    let inputs = probe_inputs(store, cfg, dataset, representation)?;
    if inputs.is_empty() {
        return Err(Error::Config("the alignment probe needs masks".into()));
    }
    let (cross_entropy, accuracy, best_epoch, domains) = run_probe(&inputs, probe)?;
    Ok(ProbeResult {
        representation,
        cross_entropy,
        accuracy,
        best_epoch,
        domains,
    })
}

/// Scales a map to bytes: min-max to `[0, 255]`, or `clamp(v, 0, 1) * 255`
/// when the map is constant.
pub fn to_gray(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Likelihood channels ordered by mean activation inside `foreground`
/// (all positions when it is empty); ties keep the lower index.
pub fn rank_channels(likelihoods: &[f64], j: usize, foreground: &[bool]) -> Vec<usize> {
    let plane = foreground.len();
    let use_all = !foreground.iter().any(|&f| f);
    let score = |c: usize| -> f64 {
        let ch = &likelihoods[c * plane..(c + 1) * plane];
        let (s, n) = ch
            .iter()
            .zip(foreground)
            .filter(|(_, &f)| f || use_all)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        s / n as f64
    };
    let scores: Vec<f64> = (0..j).map(score).collect();
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Writes the top channels of a `[J, h, w]` likelihood map as
/// `channel_<rank>_k<index>.png`, rank starting at 1.
pub fn write_channel_maps(
    likelihoods: &[f64],
    j: usize,
    h: usize,
    w: usize,
    order: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for (rank, &c) in order.iter().enumerate() {
        let path = out_dir.join(format!("channel_{}_k{:02}.png", rank + 1, c));
        assert!(c < j);
        write_png(&path, w, h, &to_gray(&likelihoods[c * h * w..(c + 1) * h * w]), PngKind::Gray)?;
        files.push(path);
    }
    Ok(files)
}

/// Writes `input.png`, `reconstruction.png`, `mask_overlay.png` and the
/// `top_k` most active likelihood channels inside the predicted foreground.
pub fn export_likelihood_maps<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    image: &Tensor<T>,
    out_dir: &Path,
    top_k: usize,
) -> Result<Vec<PathBuf>> {
    if top_k > cfg.kernels {
        return Err(Error::Config(format!(
            "top_k {top_k} exceeds the kernel count {}",
            cfg.kernels
        )));
    }
    let images = match image.shape() {
        [_, _] => image.clone().reshape(&[1, 1, image.shape()[0], image.shape()[1]])?,
        [1, _, _, _] => image.clone(),
        s => return Err(Error::Shape(format!("expected one image, got shape {s:?}"))),
    };
    let inf = nn::infer(store, cfg, &images)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (_, c, hh, ww) = images.dims4();
    let input: Vec<f64> = images.data().iter().map(|v| v.as_f64()).collect();
    let gray = |v: &[f64]| -> Vec<u8> { v.iter().map(|x| (x.clamp(0.0, 1.0) * 255.0).round() as u8).collect() };
    let mut files = Vec::new();
    let path = out_dir.join("input.png");
    write_png(&path, ww, hh, &gray(&input[..hh * ww]), PngKind::Gray)?;
    files.push(path);
    let rec: Vec<f64> = inf.reconstruction.data().iter().map(|v| v.as_f64()).collect();
    let path = out_dir.join("reconstruction.png");
    write_png(&path, ww, hh, &gray(&rec[..hh * ww]), PngKind::Gray)?;
    files.push(path);
    let labels = &nn::predict_labels(&inf.masks)[0];
    let mut rgb = Vec::with_capacity(hh * ww * 3);
    for (p, &l) in labels.iter().enumerate() {
        let g = input[p].clamp(0.0, 1.0) * 255.0;
        for ch in 0..3 {
            let v = if l == 0 {
                g
            } else {
                0.5 * g + 0.5 * PALETTE[(l as usize).min(PALETTE.len() - 1)][ch] as f64
            };
            rgb.push(v.round() as u8);
        }
    }
    let _ = c;
    let path = out_dir.join("mask_overlay.png");
    write_png(&path, ww, hh, &rgb, PngKind::Rgb)?;
    files.push(path);

    let (_, j, h, w) = inf.likelihoods.dims4();
    let l: Vec<f64> = inf.likelihoods.data().iter().map(|v| v.as_f64()).collect();
    let scale = hh / h;
    let fg: Vec<bool> = (0..h * w)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            (0..scale).any(|dy| (0..scale).any(|dx| labels[(y * scale + dy) * ww + x * scale + dx] > 0))
        })
        .collect();
    let order = rank_channels(&l, j, &fg);
    files.extend(write_channel_maps(&l, j, h, w, &order[..top_k], out_dir)?);
    Ok(files)
}

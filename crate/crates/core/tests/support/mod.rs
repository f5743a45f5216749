//! Shared by the integration tests and the acceptance suite: independent
//! reference implementations written as plain scalar loops, plus small
//! fixtures and finite-difference helpers.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vmfnet::data::{Dataset, Sample};
use vmfnet::nn::{EncoderConfig, Group, Mode, ModelConfig, ParamStore, Trainable};
use vmfnet::graph::{Graph, Var};
use vmfnet::training::{forward_loss, Batch, LossTerms};
use vmfnet::Tensor;

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Vec<f64> {
    let mut v = normal_vec(rng, rows * d);
    for r in v.chunks_mut(d) {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)` of two vectors.
pub fn rel_err_vec(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// `exp(s mu_j . z_i) / sum_k exp(s mu_k . z_i)`, written from the definition.
pub fn likelihood_oracle(z: &[f64], mu: &[f64], d: usize, j: usize, sigma: f64) -> Vec<f64> {
    let p = z.len() / d;
    let mut out = vec![0.0; p * j];
    for i in 0..p {
        let mut dots = vec![0.0; j];
        for k in 0..j {
            for c in 0..d {
                dots[k] += mu[k * d + c] * z[i * d + c];
            }
        }
        let top = dots.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in 0..j {
            total += (sigma * (dots[k] - top)).exp();
        }
        for k in 0..j {
            out[i * j + k] = (sigma * (dots[k] - top)).exp() / total;
        }
    }
    out
}

pub fn vmf_loss_oracle(z: &[f64], mu: &[f64], d: usize, j: usize) -> f64 {
    let p = z.len() / d;
    let mut sum = 0.0;
    for i in 0..p {
        let mut best = f64::NEG_INFINITY;
        for k in 0..j {
            let mut dot = 0.0;
            for c in 0..d {
                dot += mu[k * d + c] * z[i * d + c];
            }
            best = best.max(dot);
        }
        sum += best;
    }
    -sum / p as f64
}

pub fn recompose_oracle(l: &[f64], mu: &[f64], d: usize, j: usize) -> Vec<f64> {
    let p = l.len() / j;
    let mut out = vec![0.0; p * d];
    for i in 0..p {
        for k in 0..j {
            for c in 0..d {
                out[i * d + c] += l[i * j + k] * mu[k * d + c];
            }
        }
    }
    out
}

/// Soft Dice of one `[C, P]` sample.
pub fn dice_loss_oracle(pred: &[f64], truth: &[f64], channels: usize) -> f64 {
    let plane = pred.len() / channels;
    let mut acc = 0.0;
    for c in 0..channels {
        let (mut pt, mut pp, mut tt) = (0.0, 0.0, 0.0);
        for q in 0..plane {
            let (a, b) = (pred[c * plane + q], truth[c * plane + q]);
            pt += a * b;
            pp += a * a;
            tt += b * b;
        }
        acc += (2.0 * pt + 1e-6) / (pp + tt + 1e-6);
    }
    1.0 - acc / channels as f64
}

pub fn l1_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

pub fn dice_score_oracle(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == class).collect();
    let t: HashSet<usize> = (0..truth.len()).filter(|&i| truth[i] == class).collect();
    if p.is_empty() && t.is_empty() {
        return 100.0;
    }
    200.0 * p.intersection(&t).count() as f64 / (p.len() + t.len()) as f64
}

fn boundary_oracle(labels: &[u8], h: usize, w: usize, class: u8) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if labels[(y * w as i64 + x) as usize] != class {
                continue;
            }
            let mut edge = false;
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (v, u) = (y + dy, x + dx);
                let inside = v >= 0 && u >= 0 && v < h as i64 && u < w as i64;
                if !inside || labels[(v * w as i64 + u) as usize] != class {
                    edge = true;
                }
            }
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// Brute-force double loop over boundary pixels. `modified` selects the
/// mean-of-minima form.
pub fn hausdorff_oracle(pred: &[u8], truth: &[u8], h: usize, w: usize, class: u8, modified: bool) -> Option<f64> {
    let a = boundary_oracle(pred, h, w, class);
    let b = boundary_oracle(truth, h, w, class);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let directed = |p: &[(i64, i64)], q: &[(i64, i64)]| -> f64 {
        let mut agg = 0.0f64;
        for &(y, x) in p {
            let mut best = f64::INFINITY;
            for &(v, u) in q {
                best = best.min((((y - v).pow(2) + (x - u).pow(2)) as f64).sqrt());
            }
            if modified {
                agg += best;
            } else {
                agg = agg.max(best);
            }
        }
        if modified {
            agg / p.len() as f64
        } else {
            agg
        }
    };
    Some(directed(&a, &b).max(directed(&b, &a)))
}

/// Central differences of `f` at `x` for the listed coordinates.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            buf[i] = x[i] + h;
            let up = f(&buf);
            buf[i] = x[i] - h;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// A small model for toy-sized gradient checks.
pub fn toy_model(size: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            depth: 2,
            base_channels: 4,
            feature_dim: 8,
            input_size: (size, size),
            in_channels: 1,
        },
        head_hidden: 4,
        classes: 3,
        kernels: 3,
        sigma: 30.0,
        ..ModelConfig::default()
    }
}

/// Phantom-like toy images: a bright disk and a ring on a dark background.
pub fn toy_dataset(size: usize, subjects_per_domain: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let domains: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
    for (di, d) in domains.iter().enumerate() {
        for s in 0..subjects_per_domain {
            for slice in 0..2 {
                let c = size as f64 / 2.0 + rng.gen_range(-2.0..2.0);
                let r = size as f64 / 6.0 + rng.gen_range(-1.0..1.0);
                let mut image = vec![0u8; size * size];
                let mut mask = vec![0u8; size * size];
                for y in 0..size {
                    for x in 0..size {
                        let dist = ((y as f64 - c).powi(2) + (x as f64 - c).powi(2)).sqrt();
                        let (label, level) = if dist < r {
                            (1, 200.0)
                        } else if dist < r + 2.5 {
                            (2, 90.0)
                        } else if x < size / 5 {
                            (3, 150.0)
                        } else {
                            (0, 30.0)
                        };
                        let v = level * (1.0 + 0.2 * di as f64) + rng.gen_range(-10.0..10.0);
                        image[y * size + x] = v.clamp(0.0, 255.0) as u8;
                        mask[y * size + x] = label;
                    }
                }
                samples.push(Sample {
                    domain: d.clone(),
                    subject: format!("{d}{s:02}"),
                    slice,
                    image,
                    mask: Some(mask),
                    labeled: true,
                });
            }
        }
    }
    Dataset {
        height: size,
        width: size,
        classes: 3,
        domains,
        samples,
    }
}

pub fn toy_batch(size: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 2;
    let plane = size * size;
    let images: Vec<f64> = (0..n * plane).map(|_| rng.gen::<f64>()).collect();
    let mut truth = vec![0.0; n * 4 * plane];
    for q in 0..plane {
        truth[rng.gen_range(0..4) * plane + q] = 1.0;
    }
    Batch {
        images: Tensor::from_vec(&[n, 1, size, size], images).unwrap(),
        truth: Tensor::from_vec(&[n, 4, size, size], truth).unwrap(),
        labeled: vec![0],
    }
}

/// Picks a few entries of every parameter tensor in the chosen groups.
pub fn sample_coords(store: &ParamStore<f64>, groups: &[Group], per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, p) in store.params.iter().enumerate() {
        if !groups.contains(&store.group(i)) {
            continue;
        }
        for _ in 0..per_tensor {
            out.push((i, rng.gen_range(0..p.value.len())));
        }
    }
    out
}

pub fn objective_fd(
    store: &ParamStore<f64>,
    cfg: &vmfnet::nn::ModelConfig,
    batch: &Batch<f64>,
    terms: LossTerms,
    coords: &[(usize, usize)],
    h: f64,
) -> Vec<f64> {
    let mut s = store.clone();
    coords
        .iter()
        .map(|&(i, k)| {
            let orig = s.params[i].value.data()[k];
            let eval = |v: f64, s: &mut ParamStore<f64>| {
                s.params[i].value.data_mut()[k] = v;
                forward_loss(s, cfg, batch, terms, Trainable::NONE, Mode::Train).unwrap().report.total
            };
            let up = eval(orig + h, &mut s);
            let down = eval(orig - h, &mut s);
            s.params[i].value.data_mut()[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

/// Analytic gradient of a scalar graph built from two leaves, plus a closure
/// evaluating the same graph for finite differences.
pub fn check_two_leaf(
    z: Vec<f64>,
    mu: Vec<f64>,
    d: usize,
    build: impl Fn(&mut Graph<f64>, Var, Var) -> Var,
) -> (f64, f64) {
    let (p, j) = (z.len() / d, mu.len() / d);
    let mut g = Graph::new();
    let zv = g.param(t(&[p, d], z.clone()));
    let mv = g.param(t(&[j, d], mu.clone()));
    let root = build(&mut g, zv, mv);
    let grads = g.backward(root);
    let eval = |zz: &[f64], mm: &[f64]| {
        let mut g = Graph::new();
        let zv = g.constant(t(&[p, d], zz.to_vec()));
        let mv = g.constant(t(&[j, d], mm.to_vec()));
        let r = build(&mut g, zv, mv);
        g.scalar(r)
    };
    let all_z: Vec<usize> = (0..z.len()).collect();
    let all_m: Vec<usize> = (0..mu.len()).collect();
    let fd_z = central_diff(|x| eval(x, &mu), &z, &all_z, 1e-4);
    let fd_m = central_diff(|x| eval(&z, x), &mu, &all_m, 1e-4);
    (
        rel_err_vec(grads.get(zv).unwrap().data(), &fd_z),
        rel_err_vec(grads.get(mv).unwrap().data(), &fd_m),
    )
}

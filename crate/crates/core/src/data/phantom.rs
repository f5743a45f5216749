//! Cardiac-like phantom rendering and per-domain acquisition shifts.
//!
//! Each subject gets an inner ellipse (LV analog, class 1), a ring around it
//! (MYO analog, class 2) and a crescent hugging the ring (RV analog, class 3)
//! inside a body ellipse. Slices shrink from base to apex. The domain then
//! applies gamma, contrast, a smooth multiplicative bias field, blur and
//! Gaussian noise before 8-bit quantization.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};

/// Smallest per-class pixel area accepted at 64x64 (scaled by image area).
const MIN_CLASS_AREA_64: f64 = 20.0;

/// Acquisition parameters of one synthetic domain.
///
/// Bounds: `gamma` in [0.3, 3], `contrast` in [0.3, 2], `bias_amplitude` in
/// [0, 0.5], `noise_sigma` in [0, 0.2], `blur_radius` in 0..=3 and
/// `eccentricity` a sub-range of [0.5, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub gamma: f64,
    pub contrast: f64,
    pub bias_amplitude: f64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
    pub eccentricity: (f64, f64),
}

impl DomainSpec {
    pub fn presets() -> [DomainSpec; 4] {
        [
            DomainSpec {
                gamma: 1.0,
                contrast: 1.0,
                bias_amplitude: 0.05,
                noise_sigma: 0.02,
                blur_radius: 0,
                eccentricity: (0.85, 1.0),
            },
            DomainSpec {
                gamma: 0.6,
                contrast: 0.8,
                bias_amplitude: 0.15,
                noise_sigma: 0.04,
                blur_radius: 1,
                eccentricity: (0.75, 1.0),
            },
            DomainSpec {
                gamma: 1.6,
                contrast: 1.2,
                bias_amplitude: 0.1,
                noise_sigma: 0.03,
                blur_radius: 0,
                eccentricity: (0.8, 1.0),
            },
            DomainSpec {
                gamma: 0.8,
                contrast: 0.9,
                bias_amplitude: 0.2,
                noise_sigma: 0.06,
                blur_radius: 1,
                eccentricity: (0.7, 0.95),
            },
        ]
    }

    /// A random spec within bounds, used past the four presets.
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let lo = rng.gen_range(0.55..0.85);
        DomainSpec {
            gamma: rng.gen_range(0.5..2.0),
            contrast: rng.gen_range(0.7..1.3),
            bias_amplitude: rng.gen_range(0.0..0.25),
            noise_sigma: rng.gen_range(0.01..0.07),
            blur_radius: rng.gen_range(0..=1),
            eccentricity: (lo, rng.gen_range(lo + 0.05..1.0)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.3..=3.0).contains(&self.gamma)
            && (0.3..=2.0).contains(&self.contrast)
            && (0.0..=0.5).contains(&self.bias_amplitude)
            && (0.0..=0.2).contains(&self.noise_sigma)
            && self.blur_radius <= 3
            && 0.5 <= self.eccentricity.0
            && self.eccentricity.0 <= self.eccentricity.1
            && self.eccentricity.1 <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("domain spec out of bounds: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_domains: usize,
    pub subjects_per_domain: usize,
    pub slices_per_subject: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_domains: 4,
            subjects_per_domain: 10,
            slices_per_subject: 8,
            seed: 0,
            height: 64,
            width: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 || self.subjects_per_domain == 0 || self.slices_per_subject == 0 {
            return Err(Error::Config("domain, subject and slice counts must be at least 1".into()));
        }
        if self.num_domains > 26 {
            return Err(Error::Config("at most 26 domains (ids A-Z)".into()));
        }
        if self.height < 32 || self.width < 32 || self.height > 512 || self.width > 512 {
            return Err(Error::Config("image sides must be within 32..=512".into()));
        }
        Ok(())
    }

    pub fn domain_ids(&self) -> Vec<String> {
        (0..self.num_domains)
            .map(|i| ((b'A' + i as u8) as char).to_string())
            .collect()
    }

    pub fn domain_specs(&self) -> Vec<DomainSpec> {
        let presets = DomainSpec::presets();
        (0..self.num_domains)
            .map(|i| {
                presets.get(i).cloned().unwrap_or_else(|| {
                    let mut rng = stream(self.seed, 0xD0_0000 + i as u64);
                    DomainSpec::sample(&mut rng)
                })
            })
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Per-subject anatomy, in pixels of the rendered image.
#[derive(Debug, Clone)]
struct Anatomy {
    cx: f64,
    cy: f64,
    lv_radius: f64,
    wall: f64,
    ecc: f64,
    theta: f64,
    rv_angle: f64,
    rv_radius: f64,
    texture: [(f64, f64, f64, f64); 3],
    bias: [f64; 5],
}

impl Anatomy {
    fn sample<R: Rng>(rng: &mut R, spec: &DomainSpec, h: usize, w: usize) -> Self {
        let s = w.min(h) as f64;
        let mut texture = [(0.0, 0.0, 0.0, 0.0); 3];
        for t in &mut texture {
            *t = (
                rng.gen_range(0.5..3.0) * 2.0 * PI / s,
                rng.gen_range(0.5..3.0) * 2.0 * PI / s,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.01..0.03),
            );
        }
        let mut bias = [0.0; 5];
        for b in &mut bias {
            *b = rng.gen_range(-1.0..1.0);
        }
        Anatomy {
            cx: w as f64 / 2.0 + rng.gen_range(-0.06..0.06) * s,
            cy: h as f64 / 2.0 + rng.gen_range(-0.06..0.06) * s,
            lv_radius: rng.gen_range(0.095..0.13) * s,
            wall: rng.gen_range(0.04..0.06) * s,
            ecc: rng.gen_range(spec.eccentricity.0..=spec.eccentricity.1),
            theta: rng.gen_range(0.0..PI),
            rv_angle: PI + rng.gen_range(-0.6..0.6),
            rv_radius: rng.gen_range(0.13..0.17) * s,
            texture,
            bias,
        }
    }
}

const BACKGROUND: f64 = 0.02;
const BODY: f64 = 0.38;
const LV_BLOOD: f64 = 0.85;
const MYOCARDIUM: f64 = 0.18;
const RV_BLOOD: f64 = 0.7;

/// Noise-free intensity and label maps of one slice.
fn render(a: &Anatomy, scale: f64, shift: (f64, f64), h: usize, w: usize) -> (Vec<f64>, Vec<u8>) {
    let (cx, cy) = (a.cx + shift.0, a.cy + shift.1);
    let rl = a.lv_radius * scale;
    let ro = rl + a.wall * scale;
    let rr = a.rv_radius * scale;
    let (rvx, rvy) = (
        cx + (ro + 0.35 * rr) * a.rv_angle.cos(),
        cy + (ro + 0.35 * rr) * a.rv_angle.sin(),
    );
    let (sin_t, cos_t) = a.theta.sin_cos();
    let (bw, bh) = (0.44 * w as f64, 0.38 * h as f64);
    let mut img = vec![0.0; h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            let radial = |r: f64| ((u / r).powi(2) + (v / (r * a.ecc)).powi(2)).sqrt();
            let in_rv = {
                let (ex, ey) = (px - rvx, py - rvy);
                (ex / rr).powi(2) + (ey / (0.8 * rr)).powi(2) <= 1.0
            };
            let (label, base) = if radial(rl) <= 1.0 {
                (1, LV_BLOOD)
            } else if radial(ro) <= 1.0 {
                (2, MYOCARDIUM)
            } else if in_rv && radial(ro + 1.0) > 1.0 {
                (3, RV_BLOOD)
            } else {
                let bx = (px - w as f64 / 2.0) / bw;
                let by = (py - h as f64 / 2.0) / bh;
                (0, if bx * bx + by * by <= 1.0 { BODY } else { BACKGROUND })
            };
            let texture: f64 = a
                .texture
                .iter()
                .map(|&(fx, fy, phase, amp)| amp * (fx * px + fy * py + phase).sin())
                .sum();
            img[y * w + x] = base + if base > BACKGROUND { texture } else { 0.0 };
            mask[y * w + x] = label;
        }
    }
    (img, mask)
}

fn box_blur(img: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return img.to_vec();
    }
    let r = radius as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                let mut count = 0.0;
                for k in -r..=r {
                    let (sx, sy) = if horizontal { (x + k, y) } else { (x, y + k) };
                    if sx >= 0 && sy >= 0 && sx < w as isize && sy < h as isize {
                        acc += src[sy as usize * w + sx as usize];
                        count += 1.0;
                    }
                }
                out[y as usize * w + x as usize] = acc / count;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

fn acquire<R: Rng>(img: &[f64], a: &Anatomy, spec: &DomainSpec, h: usize, w: usize, rng: &mut R) -> Vec<u8> {
    let b = &a.bias;
    let shaped: Vec<f64> = img
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let nx = 2.0 * x / w as f64 - 1.0;
            let ny = 2.0 * y / h as f64 - 1.0;
            let field = b[0] * nx + b[1] * ny + b[2] * nx * ny + 0.5 * (b[3] * nx * nx + b[4] * ny * ny);
            let v = v.clamp(0.0, 1.0).powf(spec.gamma);
            let v = 0.5 + spec.contrast * (v - 0.5);
            v * (1.0 + spec.bias_amplitude * field)
        })
        .collect();
    box_blur(&shaped, h, w, spec.blur_radius)
        .into_iter()
        .map(|v| {
            let noisy = v + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

fn class_areas(mask: &[u8]) -> [usize; 4] {
    let mut areas = [0; 4];
    for &m in mask {
        areas[m as usize] += 1;
    }
    areas
}

fn render_subject(
    cfg: &GeneratorConfig,
    spec: &DomainSpec,
    domain: &str,
    domain_index: usize,
    subject_index: usize,
) -> Vec<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = stream(cfg.seed, ((domain_index as u64) << 32) | subject_index as u64);
    let min_area = MIN_CLASS_AREA_64 * (h * w) as f64 / 4096.0;
    let subject = format!("{domain}{subject_index:02}");
    let n = cfg.slices_per_subject;
    loop {
        let anatomy = Anatomy::sample(&mut rng, spec, h, w);
        let rendered: Vec<_> = (0..n)
            .map(|k| {
                let t = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
                let scale = 1.0 - 0.25 * t;
                let shift = (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
                render(&anatomy, scale, shift, h, w)
            })
            .collect();
        let valid = rendered
            .iter()
            .all(|(_, m)| class_areas(m)[1..].iter().all(|&a| a as f64 >= min_area));
        if !valid {
            continue;
        }
        return rendered
            .into_iter()
            .enumerate()
            .map(|(k, (img, mask))| Sample {
                domain: domain.to_string(),
                subject: subject.clone(),
                slice: k,
                image: acquire(&img, &anatomy, spec, h, w, &mut rng),
                mask: Some(mask),
                labeled: true,
            })
            .collect();
    }
}

/// Renders the whole dataset in memory.
pub fn generate_in_memory(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let domains = cfg.domain_ids();
    let specs = cfg.domain_specs();
    let mut samples = Vec::with_capacity(cfg.num_domains * cfg.subjects_per_domain * cfg.slices_per_subject);
    for (di, (domain, spec)) in domains.iter().zip(&specs).enumerate() {
        spec.validate()?;
        for si in 0..cfg.subjects_per_domain {
            samples.extend(render_subject(cfg, spec, domain, di, si));
        }
    }
    Ok(Dataset {
        height: cfg.height,
        width: cfg.width,
        classes: 3,
        domains,
        samples,
    })
}

/// Renders the dataset and writes it (images, masks, manifest) under `out`.
pub fn generate(cfg: &GeneratorConfig, out: &Path) -> Result<Dataset> {
    let dataset = generate_in_memory(cfg)?;
    super::io::write_dataset(&dataset, cfg, out)?;
    Ok(dataset)
}

//! Synthetic multi-domain cardiac-like phantoms, their on-disk format, and
//! the leave-one-domain-out split.

mod io;
mod phantom;

pub use io::{encode_png, load, read_png, write_dataset, write_png, PngKind, PALETTE, Manifest, ManifestDomain, ManifestSlice, ManifestSubject, FORMAT_VERSION};
pub use phantom::{generate, generate_in_memory, DomainSpec, GeneratorConfig};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CLASS_NAMES: [&str; 4] = ["background", "LV", "MYO", "RV"];

/// One 2D slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub domain: String,
    pub subject: String,
    pub slice: usize,
    /// Row-major 8-bit intensities; the model sees `value / 255`.
    pub image: Vec<u8>,
    /// Row-major class ids in `0..=classes`.
    pub mask: Option<Vec<u8>>,
    pub labeled: bool,
}

impl Sample {
    pub fn intensities<T: Scalar>(&self) -> Vec<T> {
        self.image.iter().map(|&v| T::from_f64(v as f64 / 255.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    /// Foreground class count.
    pub classes: usize,
    pub domains: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn has_domain(&self, domain: &str) -> bool {
        self.domains.iter().any(|d| d == domain)
    }

    /// Subject ids in first-appearance order, optionally restricted to a domain.
    pub fn subjects(&self, domain: Option<&str>) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for s in &self.samples {
            if domain.is_some_and(|d| d != s.domain) {
                continue;
            }
            if seen.insert(s.subject.clone()) {
                out.push(s.subject.clone());
            }
        }
        out
    }

    pub fn subject_samples(&self, subject: &str) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.subject == subject).collect()
    }

    /// `[N, 1, H, W]` image batch of the given samples.
    pub fn image_batch<T: Scalar>(&self, samples: &[&Sample]) -> Result<Tensor<T>> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut data = Vec::with_capacity(samples.len() * self.height * self.width);
        for s in samples {
            data.extend(s.intensities::<T>());
        }
        Tensor::from_vec(&[samples.len(), 1, self.height, self.width], data)
    }

    pub fn require_domain(&self, domain: &str) -> Result<()> {
        if self.has_domain(domain) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "domain {domain:?} is not in the dataset; valid domains: {}",
                self.domains.join(", ")
            )))
        }
    }
}

/// `[C, H*W]` one-hot encoding of a label map with `channels` classes.
pub fn one_hot<T: Scalar>(mask: &[u8], channels: usize) -> Vec<T> {
    let plane = mask.len();
    let mut out = vec![T::zero(); channels * plane];
    for (p, &label) in mask.iter().enumerate() {
        out[label as usize * plane + p] = T::one();
    }
    out
}

/// Number of subjects labeled out of `n` at the given fraction: `ceil(fraction * n)`.
pub fn labeled_count(fraction: f64, n: usize) -> usize {
    // The small slack keeps products like 0.3 * 10 from rounding up to 4.
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

pub fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("labeled fraction must be in (0, 1], got {fraction}")))
    }
}

/// Leave-one-domain-out split. The test set is every subject of `holdout`;
/// in each remaining domain the first `ceil(fraction * N)` subjects of a
/// seeded shuffle keep their masks and all others become unlabeled.
pub fn split(dataset: &Dataset, holdout: &str, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    check_fraction(fraction)?;
    dataset.require_domain(holdout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = BTreeSet::new();
    for domain in dataset.domains.iter().filter(|d| *d != holdout) {
        let mut subjects = dataset.subjects(Some(domain));
        subjects.shuffle(&mut rng);
        let k = labeled_count(fraction, subjects.len());
        labeled.extend(subjects.into_iter().take(k));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in &dataset.samples {
        if s.domain == holdout {
            test.push(s.clone());
        } else {
            let keep = labeled.contains(&s.subject) && s.mask.is_some();
            train.push(Sample {
                labeled: keep,
                mask: if keep { s.mask.clone() } else { None },
                ..s.clone()
            });
        }
    }
    let make = |samples: Vec<Sample>, domains: Vec<String>| Dataset {
        height: dataset.height,
        width: dataset.width,
        classes: dataset.classes,
        domains,
        samples,
    };
    let train_domains = dataset.domains.iter().filter(|d| *d != holdout).cloned().collect();
    Ok((make(train, train_domains), make(test, vec![holdout.to_string()])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        generate_in_memory(&GeneratorConfig {
            subjects_per_domain: 10,
            slices_per_subject: 1,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn ceil_rule() {
        assert_eq!(labeled_count(0.1, 10), 1);
        assert_eq!(labeled_count(0.2, 10), 2);
        assert_eq!(labeled_count(0.3, 10), 3);
        assert_eq!(labeled_count(0.02, 10), 1);
        assert_eq!(labeled_count(1.0, 10), 10);
    }

    #[test]
    fn holdout_partition() {
        let ds = toy();
        let (train, test) = split(&ds, "A", 0.2, 5).unwrap();
        let train_domains: BTreeSet<_> = train.samples.iter().map(|s| s.domain.clone()).collect();
        assert_eq!(train_domains, ["B", "C", "D"].iter().map(|s| s.to_string()).collect());
        assert!(test.samples.iter().all(|s| s.domain == "A"));
        assert_eq!(train.samples.len() + test.samples.len(), ds.samples.len());
        let train_subjects: BTreeSet<_> = train.subjects(None).into_iter().collect();
        assert!(test.subjects(None).iter().all(|s| !train_subjects.contains(s)));
        for d in ["B", "C", "D"] {
            let labeled: BTreeSet<_> = train
                .samples
                .iter()
                .filter(|s| s.domain == d && s.labeled)
                .map(|s| s.subject.clone())
                .collect();
            assert_eq!(labeled.len(), 2);
        }
        assert!(train.samples.iter().all(|s| s.labeled == s.mask.is_some()));
    }

    #[test]
    fn full_fraction_labels_everything() {
        let (train, _) = split(&toy(), "B", 1.0, 0).unwrap();
        assert!(train.samples.iter().all(|s| s.labeled));
    }

    #[test]
    fn bad_fraction_and_domain() {
        let ds = toy();
        assert!(matches!(split(&ds, "A", 0.0, 0), Err(Error::Config(_))));
        assert!(matches!(split(&ds, "A", 1.5, 0), Err(Error::Config(_))));
        let err = split(&ds, "Z", 0.5, 0).unwrap_err();
        assert!(err.to_string().contains("A, B, C, D"));
    }

    #[test]
    fn split_is_seeded() {
        let ds = toy();
        assert_eq!(split(&ds, "C", 0.3, 9).unwrap(), split(&ds, "C", 0.3, 9).unwrap());
    }
}

//! von-Mises-Fisher kernel decomposition.
//!
//! Feature fields are stored channel-last: an `H x W x D` field is a row-major
//! `P x D` matrix with one row per spatial position (`P = H * W`). The same row
//! kernels serve single images (through the typed wrappers below) and whole
//! batches inside the autodiff graph, where `P = N * H * W`.
//!
//! The vMF normalizer `C(sigma)` never appears: likelihoods are only consumed
//! after per-position channel normalization, which cancels it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar};

/// Guard applied to every vector norm.
pub const NORM_EPS: f64 = 1e-8;
/// Default concentration.
pub const DEFAULT_SIGMA: f64 = 30.0;
/// Default kernel count.
pub const DEFAULT_KERNELS: usize = 12;

/// How the per-position likelihood vector is normalized before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LikelihoodNorm {
    /// Channels sum to one (a softmax over `sigma * mu_j . z_i`).
    #[default]
    L1,
    /// Channels have unit Euclidean norm.
    L2,
}

fn unit_tolerance<T: Scalar>() -> f64 {
    (64.0 * T::epsilon().as_f64()).max(1e-6)
}

// ---------------------------------------------------------------------------
// Row kernels
// ---------------------------------------------------------------------------

/// Divides each `d`-wide row by `max(norm, eps)`. Returns the normalized rows
/// and the raw norms (needed by the backward pass).
pub fn normalize_rows<T: Scalar>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::from_f64(NORM_EPS);
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut norms = Vec::with_capacity(rows);
    for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let norm = src.iter().map(|&v| v * v).sum::<T>().sqrt();
        let denom = norm.max(eps);
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = v / denom;
        }
        norms.push(norm);
    }
    (out, norms)
}

/// Vector-Jacobian product of [`normalize_rows`].
pub fn normalize_rows_backward<T: Scalar>(grad: &[T], out: &[T], norms: &[T], d: usize) -> Vec<T> {
    let eps = T::from_f64(NORM_EPS);
    let mut dx = vec![T::zero(); grad.len()];
    for (((g, y), dst), &norm) in grad
        .chunks_exact(d)
        .zip(out.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .zip(norms)
    {
        if norm > eps {
            let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
            for ((o, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                *o = (gv - yv * dot) / norm;
            }
        } else {
            for (o, &gv) in dst.iter_mut().zip(g) {
                *o = gv / eps;
            }
        }
    }
    dx
}

/// Cosine scores `z @ mu^T` as a `p x j` matrix.
fn scores<T: Scalar>(z: &[T], mu: &[T], d: usize, j: usize) -> Vec<T> {
    let p = z.len() / d;
    let mut s = vec![T::zero(); p * j];
    gemm(false, true, p, j, d, T::one(), z, mu, T::zero(), &mut s);
    s
}

/// Normalized vMF likelihoods for `p` positions against `j` kernels.
///
/// Per row: `exp(sigma * mu_j . z_i - max_k sigma * mu_k . z_i)`, then
/// divided by the row's L1 (or L2) norm.
pub fn likelihood_rows<T: Scalar>(
    z: &[T],
    mu: &[T],
    d: usize,
    j: usize,
    sigma: T,
    norm: LikelihoodNorm,
) -> Vec<T> {
    let mut l = scores(z, mu, d, j);
    for row in l.chunks_exact_mut(j) {
        let max = row
            .iter()
            .fold(T::neg_infinity(), |m, &v| m.max(sigma * v));
        for v in row.iter_mut() {
            *v = (sigma * *v - max).exp();
        }
        let total = match norm {
            LikelihoodNorm::L1 => row.iter().copied().sum::<T>(),
            LikelihoodNorm::L2 => row.iter().map(|&v| v * v).sum::<T>().sqrt(),
        };
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    l
}

/// Vector-Jacobian product of [`likelihood_rows`] with respect to `z` and `mu`.
///
/// Both normalizations reduce to `dt_k = l_k * (g_k - c_k * <g, l>)` on the
/// pre-exponential scores `t = sigma * s`, with `c_k = 1` for L1 and
/// `c_k = l_k` for L2.
#[allow(clippy::too_many_arguments)]
pub fn likelihood_rows_backward<T: Scalar>(
    grad: &[T],
    l: &[T],
    z: &[T],
    mu: &[T],
    d: usize,
    j: usize,
    sigma: T,
    norm: LikelihoodNorm,
) -> (Vec<T>, Vec<T>) {
    let p = z.len() / d;
    let mut ds = vec![T::zero(); p * j];
    for ((g, lr), dst) in grad
        .chunks_exact(j)
        .zip(l.chunks_exact(j))
        .zip(ds.chunks_exact_mut(j))
    {
        let dot: T = g.iter().zip(lr).map(|(&a, &b)| a * b).sum();
        for ((o, &gv), &lv) in dst.iter_mut().zip(g).zip(lr) {
            let c = match norm {
                LikelihoodNorm::L1 => T::one(),
                LikelihoodNorm::L2 => lv,
            };
            *o = sigma * lv * (gv - c * dot);
        }
    }
    let mut dz = vec![T::zero(); p * d];
    gemm(false, false, p, d, j, T::one(), &ds, mu, T::zero(), &mut dz);
    let mut dmu = vec![T::zero(); j * d];
    gemm(true, false, j, d, p, T::one(), &ds, z, T::zero(), &mut dmu);
    (dz, dmu)
}

/// `-(1/P) * sum_i max_j mu_j . z_i`, with the winning kernel per row
/// (lowest index on ties).
pub fn vmf_loss_rows<T: Scalar>(z: &[T], mu: &[T], d: usize, j: usize) -> (T, Vec<u32>) {
    let s = scores(z, mu, d, j);
    let p = z.len() / d;
    let mut winners = Vec::with_capacity(p);
    let mut total = T::zero();
    for row in s.chunks_exact(j) {
        let mut best = 0;
        for (k, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = k;
            }
        }
        total += row[best];
        winners.push(best as u32);
    }
    (-total / T::from_f64(p as f64), winners)
}

/// Subgradient of [`vmf_loss_rows`] scaled by the upstream scalar `grad`.
pub fn vmf_loss_rows_backward<T: Scalar>(
    grad: T,
    winners: &[u32],
    z: &[T],
    mu: &[T],
    d: usize,
    j: usize,
) -> (Vec<T>, Vec<T>) {
    let p = winners.len();
    let scale = -grad / T::from_f64(p as f64);
    let mut dz = vec![T::zero(); p * d];
    let mut dmu = vec![T::zero(); j * d];
    for (i, &w) in winners.iter().enumerate() {
        let w = w as usize;
        let kernel = &mu[w * d..(w + 1) * d];
        let feature = &z[i * d..(i + 1) * d];
        for (o, &m) in dz[i * d..(i + 1) * d].iter_mut().zip(kernel) {
            *o = scale * m;
        }
        for (o, &f) in dmu[w * d..(w + 1) * d].iter_mut().zip(feature) {
            *o += scale * f;
        }
    }
    (dz, dmu)
}

/// `l @ mu`: each position becomes the likelihood-weighted sum of kernels.
pub fn recompose_rows<T: Scalar>(l: &[T], mu: &[T], d: usize, j: usize) -> Vec<T> {
    let p = l.len() / j;
    let mut out = vec![T::zero(); p * d];
    gemm(false, false, p, d, j, T::one(), l, mu, T::zero(), &mut out);
    out
}

/// Vector-Jacobian product of [`recompose_rows`]: `(g @ mu^T, l^T @ g)`.
pub fn recompose_rows_backward<T: Scalar>(
    grad: &[T],
    l: &[T],
    mu: &[T],
    d: usize,
    j: usize,
) -> (Vec<T>, Vec<T>) {
    let p = l.len() / j;
    let mut dl = vec![T::zero(); p * j];
    gemm(false, true, p, j, d, T::one(), grad, mu, T::zero(), &mut dl);
    let mut dmu = vec![T::zero(); j * d];
    gemm(true, false, j, d, p, T::one(), l, grad, T::zero(), &mut dmu);
    (dl, dmu)
}

// ---------------------------------------------------------------------------
// Typed single-image API
// ---------------------------------------------------------------------------

/// `H x W x D` grid of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField<T> {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureField<T> {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<T>) -> Result<Self> {
        if h * w * d != data.len() || d == 0 {
            return Err(Error::Shape(format!(
                "feature field {h}x{w}x{d} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { h, w, d, data })
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn vector(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.w + x) * self.d;
        &self.data[i..i + self.d]
    }
}

/// `J` kernel directions of dimension `D` with a shared concentration.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank<T> {
    pub j: usize,
    pub d: usize,
    pub sigma: T,
    pub mu: Vec<T>,
}

impl<T: Scalar> KernelBank<T> {
    pub fn new(j: usize, d: usize, sigma: T, mu: Vec<T>) -> Result<Self> {
        if j < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 kernels, got {j}")));
        }
        if !(sigma > T::zero()) {
            return Err(Error::InvalidInput(format!(
                "concentration must be positive, got {sigma:?}"
            )));
        }
        if mu.len() != j * d || d == 0 {
            return Err(Error::Shape(format!(
                "kernel bank {j}x{d} cannot hold {} values",
                mu.len()
            )));
        }
        Ok(Self { j, d, sigma, mu })
    }

    /// Directions drawn uniformly on the sphere (normalized standard normals).
    pub fn random<R: Rng>(j: usize, d: usize, sigma: T, rng: &mut R) -> Result<Self> {
        let raw: Vec<T> = (0..j * d)
            .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::new(j, d, sigma, raw)?.project_kernels()
    }

    pub fn kernel(&self, index: usize) -> &[T] {
        &self.mu[index * self.d..(index + 1) * self.d]
    }

    /// L2-normalizes every row. A row whose norm is at or below the guard
    /// epsilon means the bank collapsed and is reported as an error.
    pub fn project_kernels(&self) -> Result<Self> {
        let (mu, norms) = normalize_rows(&self.mu, self.d);
        if let Some((index, norm)) = norms
            .iter()
            .enumerate()
            .find(|(_, n)| n.as_f64() <= NORM_EPS)
        {
            return Err(Error::DegenerateKernel {
                index,
                norm: norm.as_f64(),
            });
        }
        Ok(Self { mu, ..self.clone() })
    }

    fn check_unit(&self) -> Result<()> {
        let tol = unit_tolerance::<T>();
        for (index, row) in self.mu.chunks_exact(self.d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().as_f64();
            if (norm - 1.0).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "kernel {index} has norm {norm}, expected unit norm"
                )));
            }
        }
        Ok(())
    }

    fn check_against(&self, z: &FeatureField<T>) -> Result<()> {
        if z.d != self.d {
            return Err(Error::Shape(format!(
                "feature dimension {} does not match kernel dimension {}",
                z.d, self.d
            )));
        }
        self.check_unit()
    }
}

/// `H x W x J` normalized likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodField<T> {
    pub h: usize,
    pub w: usize,
    pub j: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> LikelihoodField<T> {
    pub fn new(h: usize, w: usize, j: usize, data: Vec<T>) -> Result<Self> {
        if h * w * j != data.len() || j == 0 {
            return Err(Error::Shape(format!(
                "likelihood field {h}x{w}x{j} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { h, w, j, data })
    }

    pub fn at(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.w + x) * self.j;
        &self.data[i..i + self.j]
    }

    /// Values of channel `k` in raster order.
    pub fn channel(&self, k: usize) -> Vec<T> {
        self.data.chunks_exact(self.j).map(|row| row[k]).collect()
    }
}

/// `H x W x D` likelihood-weighted kernel combinations.
#[derive(Debug, Clone, PartialEq)]
pub struct RecomposedField<T> {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<T>,
}

/// Scales each position vector to unit length (zero vectors stay zero).
pub fn normalize_features<T: Scalar>(raw: &FeatureField<T>) -> Result<FeatureField<T>> {
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("feature field contains non-finite values".into()));
    }
    let (data, _) = normalize_rows(&raw.data, raw.d);
    Ok(FeatureField {
        data,
        ..raw.clone()
    })
}

pub fn vmf_likelihoods<T: Scalar>(
    z: &FeatureField<T>,
    k: &KernelBank<T>,
) -> Result<LikelihoodField<T>> {
    vmf_likelihoods_with(z, k, LikelihoodNorm::L1)
}

pub fn vmf_likelihoods_with<T: Scalar>(
    z: &FeatureField<T>,
    k: &KernelBank<T>,
    norm: LikelihoodNorm,
) -> Result<LikelihoodField<T>> {
    k.check_against(z)?;
    if z.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("feature field contains non-finite values".into()));
    }
    let data = likelihood_rows(&z.data, &k.mu, k.d, k.j, k.sigma, norm);
    LikelihoodField::new(z.h, z.w, k.j, data)
}

/// Cluster loss pulling kernels towards the features they best explain.
pub fn vmf_loss<T: Scalar>(z: &FeatureField<T>, k: &KernelBank<T>) -> Result<T> {
    k.check_against(z)?;
    if z.positions() == 0 {
        return Err(Error::Shape("empty feature field".into()));
    }
    Ok(vmf_loss_rows(&z.data, &k.mu, k.d, k.j).0)
}

pub fn recompose<T: Scalar>(
    l: &LikelihoodField<T>,
    k: &KernelBank<T>,
) -> Result<RecomposedField<T>> {
    if l.j != k.j {
        return Err(Error::Shape(format!(
            "likelihood field has {} channels but the bank has {} kernels",
            l.j, k.j
        )));
    }
    Ok(RecomposedField {
        h: l.h,
        w: l.w,
        d: k.d,
        data: recompose_rows(&l.data, &k.mu, k.d, k.j),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(rows: &[&[f64]], sigma: f64) -> KernelBank<f64> {
        let d = rows[0].len();
        KernelBank::new(rows.len(), d, sigma, rows.concat()).unwrap()
    }

    fn field(vectors: &[&[f64]]) -> FeatureField<f64> {
        FeatureField::new(1, vectors.len(), vectors[0].len(), vectors.concat()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let out = normalize_features(&field(&[&[1.0, 0.0, 0.0]])).unwrap();
        assert_eq!(out.data, vec![1.0, 0.0, 0.0]);
        let out = normalize_features(&field(&[&[3.0, 4.0]])).unwrap();
        assert!((out.data[0] - 0.6).abs() < 1e-15 && (out.data[1] - 0.8).abs() < 1e-15);
        let out = normalize_features(&field(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(out.data, vec![0.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let err = normalize_features(&field(&[&[f64::NAN, 1.0]])).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn likelihood_examples() {
        let k = bank(&[&[1.0, 0.0], &[0.0, 1.0]], 30.0);
        let l = vmf_likelihoods(&field(&[&[1.0, 0.0]]), &k).unwrap();
        let tail = (-30.0f64).exp() / (1.0 + (-30.0f64).exp());
        assert!((l.data[1] - 9.357623e-14).abs() < 1e-19);
        assert!((l.data[1] - tail).abs() < 1e-25);
        assert!((l.data[0] - (1.0 - tail)).abs() < 2.3e-16);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        for sigma in [0.5, 30.0, 500.0] {
            let k = bank(&[&[1.0, 0.0], &[0.0, 1.0]], sigma);
            let l = vmf_likelihoods(&field(&[&[h, h]]), &k).unwrap();
            assert!((l.data[0] - 0.5).abs() < 1e-15 && (l.data[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn likelihood_shape_error() {
        let k = bank(&[&[1.0, 0.0], &[0.0, 1.0]], 30.0);
        let err = vmf_likelihoods(&field(&[&[1.0, 0.0, 0.0]]), &k).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn non_unit_bank_rejected() {
        let k = bank(&[&[2.0, 0.0], &[0.0, 1.0]], 30.0);
        assert!(vmf_likelihoods(&field(&[&[1.0, 0.0]]), &k).is_err());
    }

    #[test]
    fn loss_examples() {
        let k = bank(&[&[1.0, 0.0], &[0.0, 1.0]], 30.0);
        assert_eq!(vmf_loss(&field(&[&[1.0, 0.0]]), &k).unwrap(), -1.0);
        assert_eq!(vmf_loss(&field(&[&[1.0, 0.0], &[0.0, 1.0]]), &k).unwrap(), -1.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let k = bank(&[&[0.0, 1.0], &[h, h]], 30.0);
        let loss = vmf_loss(&field(&[&[1.0, 0.0]]), &k).unwrap();
        assert!((loss + h).abs() < 1e-15);
    }

    #[test]
    fn loss_ties_pick_lowest_index() {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let (_, winners) = vmf_loss_rows(&[h, h], &[1.0, 0.0, 0.0, 1.0], 2, 2);
        assert_eq!(winners, vec![0]);
    }

    #[test]
    fn recompose_examples() {
        let k = bank(&[&[1.0, 0.0], &[0.0, 1.0]], 30.0);
        let l = LikelihoodField::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        assert_eq!(recompose(&l, &k).unwrap().data, vec![1.0, 0.0]);
        let l = LikelihoodField::new(1, 1, 2, vec![0.5, 0.5]).unwrap();
        let out = recompose(&l, &k).unwrap().data;
        assert_eq!(out, vec![0.5, 0.5]);
        let norm = (out[0] * out[0] + out[1] * out[1]).sqrt();
        assert!((norm - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn project_examples() {
        let k = KernelBank::<f64>::new(2, 2, 30.0, vec![2.0, 0.0, 3.0, 4.0]).unwrap();
        let p = k.project_kernels().unwrap();
        assert_eq!(p.kernel(0), &[1.0, 0.0]);
        assert!((p.kernel(1)[0] - 0.6).abs() < 1e-15 && (p.kernel(1)[1] - 0.8).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let unit = KernelBank::<f64>::random(5, 7, 30.0, &mut rng).unwrap();
        let again = unit.project_kernels().unwrap();
        for (a, b) in unit.mu.iter().zip(&again.mu) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn project_rejects_collapsed_row() {
        let k = KernelBank::new(2, 2, 30.0, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            k.project_kernels(),
            Err(Error::DegenerateKernel { index: 1, .. })
        ));
    }

    #[test]
    fn bank_validation() {
        assert!(KernelBank::new(1, 2, 30.0, vec![1.0, 0.0]).is_err());
        assert!(KernelBank::new(2, 2, 0.0, vec![1.0, 0.0, 0.0, 1.0]).is_err());
        assert!(KernelBank::new(2, 2, 1.0, vec![1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn l2_mode_has_unit_euclidean_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = KernelBank::<f64>::random(4, 6, 30.0, &mut rng).unwrap();
        let raw: Vec<f64> = (0..3 * 6).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect();
        let z = normalize_features(&FeatureField::new(1, 3, 6, raw).unwrap()).unwrap();
        let l = vmf_likelihoods_with(&z, &k, LikelihoodNorm::L2).unwrap();
        for row in l.data.chunks_exact(4) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}

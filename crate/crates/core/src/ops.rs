//! Forward and backward kernels for the convolutional layers, all on NCHW
//! tensors. Work is split per batch image; reductions over the batch always
//! run in image order so results do not depend on the thread count.

use rayon::prelude::*;

use crate::tensor::{gemm, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<T> {
    if k == 1 && pad == 0 {
        return x.to_vec();
    }
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let mut cols = vec![T::zero(); c * k * k * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * oh * ow;
                // valid output columns: 0 <= ox + kx - pad < w
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(ow);
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let src = &plane[iy * w + x_lo + kx - pad..iy * w + x_hi + kx - pad];
                    cols[row + oy * ow + x_lo..row + oy * ow + x_hi].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<T> {
    if k == 1 && pad == 0 {
        return cols.to_vec();
    }
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * oh * ow;
                let x_lo = pad.saturating_sub(kx);
                let x_hi = (w + pad).saturating_sub(kx).min(ow);
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let iy = iy - pad;
                    let dst = &mut plane[iy * w + x_lo + kx - pad..iy * w + x_hi + kx - pad];
                    let src = &cols[row + oy * ow + x_lo..row + oy * ow + x_hi];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

/// Stride-1 square convolution. Returns the output and the per-image column
/// buffers reused by the backward pass.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> (Tensor<T>, Vec<Vec<T>>) {
    let (n, c, h, w) = x.dims4();
    let (o, ci, k, _) = weight.dims4();
    assert_eq!(c, ci, "conv input channels");
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let plane = oh * ow;
    let results: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let cols = im2col(&x.data()[i * c * h * w..(i + 1) * c * h * w], c, h, w, k, pad);
            let mut y = vec![T::zero(); o * plane];
            for (oc, chunk) in y.chunks_exact_mut(plane).enumerate() {
                chunk.fill(bias.data()[oc]);
            }
            gemm(false, false, o, plane, c * k * k, T::one(), weight.data(), &cols, T::one(), &mut y);
            (y, cols)
        })
        .collect();
    let mut out = Vec::with_capacity(n * o * plane);
    let mut cols = Vec::with_capacity(n);
    for (y, col) in results {
        out.extend_from_slice(&y);
        cols.push(col);
    }
    (Tensor::from_vec(&[n, o, oh, ow], out).unwrap(), cols)
}

/// Returns `(dx, dweight, dbias)`; `dx` is skipped when the input needs no gradient.
pub fn conv2d_backward<T: Scalar>(
    grad: &Tensor<T>,
    cols: &[Vec<T>],
    x_shape: &[usize],
    weight: &Tensor<T>,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, o, oh, ow) = grad.dims4();
    let (_, c, k, _) = weight.dims4();
    let (h, w) = (x_shape[2], x_shape[3]);
    let plane = oh * ow;
    let ck = c * k * k;
    let per_image: Vec<(Vec<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = &grad.data()[i * o * plane..(i + 1) * o * plane];
            let mut dw = vec![T::zero(); o * ck];
            gemm(false, true, o, ck, plane, T::one(), g, &cols[i], T::zero(), &mut dw);
            let dx = need_dx.then(|| {
                let mut dcols = vec![T::zero(); ck * plane];
                gemm(true, false, ck, plane, o, T::one(), weight.data(), g, T::zero(), &mut dcols);
                col2im(&dcols, c, h, w, k, pad)
            });
            (dw, dx)
        })
        .collect();
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dx_all = need_dx.then(|| Vec::with_capacity(n * c * h * w));
    for (dw, dx) in per_image {
        for (a, b) in dweight.data_mut().iter_mut().zip(dw) {
            *a += b;
        }
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    let mut dbias = Tensor::zeros(&[o]);
    for i in 0..n {
        for oc in 0..o {
            let start = (i * o + oc) * plane;
            dbias.data_mut()[oc] += grad.data()[start..start + plane].iter().copied().sum::<T>();
        }
    }
    let dx = dx_all.map(|d| Tensor::from_vec(x_shape, d).unwrap());
    (dx, dweight, dbias)
}

/// 2x2 stride-2 transposed convolution; `weight` is `[C_in, C_out, 2, 2]`.
pub fn conv_transpose2x2_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ci, o, _, _) = weight.dims4();
    assert_eq!(c, ci, "transposed conv input channels");
    let hw = h * w;
    let per_image: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &x.data()[i * c * hw..(i + 1) * c * hw];
            let mut expanded = vec![T::zero(); o * 4 * hw];
            gemm(true, false, o * 4, hw, c, T::one(), weight.data(), xi, T::zero(), &mut expanded);
            let mut y = vec![T::zero(); o * 4 * hw];
            for oc in 0..o {
                let b = bias.data()[oc];
                for a in 0..2 {
                    for bb in 0..2 {
                        let src = &expanded[(oc * 4 + a * 2 + bb) * hw..(oc * 4 + a * 2 + bb + 1) * hw];
                        for iy in 0..h {
                            let row = (oc * 2 * h + 2 * iy + a) * 2 * w;
                            for ix in 0..w {
                                y[row + 2 * ix + bb] = src[iy * w + ix] + b;
                            }
                        }
                    }
                }
            }
            y
        })
        .collect();
    Tensor::from_vec(&[n, o, 2 * h, 2 * w], per_image.concat()).unwrap()
}

pub fn conv_transpose2x2_backward<T: Scalar>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let (_, o, _, _) = weight.dims4();
    let hw = h * w;
    let per_image: Vec<(Vec<T>, Option<Vec<T>>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = &grad.data()[i * o * 4 * hw..(i + 1) * o * 4 * hw];
            let mut gathered = vec![T::zero(); o * 4 * hw];
            let mut db = vec![T::zero(); o];
            for oc in 0..o {
                for a in 0..2 {
                    for bb in 0..2 {
                        let dst = &mut gathered[(oc * 4 + a * 2 + bb) * hw..(oc * 4 + a * 2 + bb + 1) * hw];
                        for iy in 0..h {
                            let row = (oc * 2 * h + 2 * iy + a) * 2 * w;
                            for ix in 0..w {
                                dst[iy * w + ix] = g[row + 2 * ix + bb];
                            }
                        }
                    }
                }
                db[oc] = g[oc * 4 * hw..(oc + 1) * 4 * hw].iter().copied().sum();
            }
            let xi = &x.data()[i * c * hw..(i + 1) * c * hw];
            let mut dw = vec![T::zero(); c * o * 4];
            gemm(false, true, c, o * 4, hw, T::one(), xi, &gathered, T::zero(), &mut dw);
            let dx = need_dx.then(|| {
                let mut dx = vec![T::zero(); c * hw];
                gemm(false, false, c, hw, o * 4, T::one(), weight.data(), &gathered, T::zero(), &mut dx);
                dx
            });
            (dw, dx, db)
        })
        .collect();
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros(&[o]);
    let mut dx_all = need_dx.then(|| Vec::with_capacity(n * c * hw));
    for (dw, dx, db) in per_image {
        for (a, b) in dweight.data_mut().iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in dbias.data_mut().iter_mut().zip(db) {
            *a += b;
        }
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    let dx = dx_all.map(|d| Tensor::from_vec(x.shape(), d).unwrap());
    (dx, dweight, dbias)
}

/// 2x2 max pooling; ties go to the first element in raster order.
pub fn max_pool2_forward<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data()[idx] > x.data()[best] {
                        best = idx;
                    }
                }
                out.push(x.data()[best]);
                argmax.push(best as u32);
            }
        }
    }
    (Tensor::from_vec(&[n, c, oh, ow], out).unwrap(), argmax)
}

pub fn max_pool2_backward<T: Scalar>(grad: &Tensor<T>, argmax: &[u32], x_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    for (&g, &idx) in grad.data().iter().zip(argmax) {
        dx.data_mut()[idx as usize] += g;
    }
    dx
}

/// Per-channel batch statistics: biased mean/variance for normalization and
/// the unbiased variance used for running averages.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub unbiased_var: Vec<T>,
}

pub struct BatchNormOutput<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub stats: Option<BatchStats<T>>,
}

/// Batch normalization. With `running = None` the batch statistics are used
/// (training mode); otherwise the supplied `(mean, var)` are used.
pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&[T], &[T])>,
) -> BatchNormOutput<T> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let count = T::from_f64((n * hw) as f64);
    let eps = T::from_f64(BN_EPS);
    let (mean, var, stats) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec(), None),
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for i in 0..n {
                    s += x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
                }
                let m = s / count;
                let mut sq = T::zero();
                for i in 0..n {
                    for &v in &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                        sq += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
            let total = (n * hw) as f64;
            let unbiased = var
                .iter()
                .map(|&v| {
                    if total > 1.0 {
                        v * T::from_f64(total / (total - 1.0))
                    } else {
                        v
                    }
                })
                .collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                unbiased_var: unbiased,
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            let (m, s, g, b) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for idx in range {
                let xh = (x.data()[idx] - m) * s;
                xhat.data_mut()[idx] = xh;
                y.data_mut()[idx] = g * xh + b;
            }
        }
    }
    BatchNormOutput {
        y,
        xhat,
        inv_std,
        stats,
    }
}

/// Returns `(dx, dgamma, dbeta)`. `batch_stats` selects the training-mode
/// derivative, which also flows through the batch mean and variance.
pub fn batch_norm_backward<T: Scalar>(
    grad: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = grad.dims4();
    let hw = h * w;
    let count = T::from_f64((n * hw) as f64);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = Tensor::zeros(grad.shape());
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for i in 0..n {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for idx in range {
                sum_g += grad.data()[idx];
                sum_gx += grad.data()[idx] * xhat.data()[idx];
            }
        }
        dgamma.data_mut()[ch] = sum_gx;
        dbeta.data_mut()[ch] = sum_g;
        let scale = gamma.data()[ch] * inv_std[ch];
        for i in 0..n {
            let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for idx in range {
                let g = grad.data()[idx];
                dx.data_mut()[idx] = if batch_stats {
                    scale * (g - sum_g / count - xhat.data()[idx] * sum_gx / count)
                } else {
                    scale * g
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_naive(x: &Tensor<f64>, wt: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4();
        let (o, _, k, _) = wt.dims4();
        let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
        let mut y = Tensor::zeros(&[n, o, oh, ow]);
        for i in 0..n {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[oc];
                        for ch in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()[((i * c + ch) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((oc * c + ch) * k + ky) * k + kx];
                                }
                            }
                        }
                        y.data_mut()[((i * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn filled(shape: &[usize], seed: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64 + seed) * 0.731).sin()).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_loop() {
        for (k, pad) in [(3, 1), (1, 0)] {
            let x = filled(&[2, 3, 5, 6], 0.3);
            let wt = filled(&[4, 3, k, k], 1.7);
            let b = filled(&[4], 2.9);
            let (y, _) = conv2d_forward(&x, &wt, &b, pad);
            let expected = conv_naive(&x, &wt, &b, pad);
            assert_eq!(y.shape(), expected.shape());
            for (a, e) in y.data().iter().zip(expected.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_places_kernel_taps() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let wt = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let y = conv_transpose2x2_forward(&x, &wt, &b);
        assert_eq!(y.data(), &[2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn pooling_picks_max() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 3.0, 0.0, 2.0, 1.0]).unwrap();
        let (y, arg) = max_pool2_forward(&x);
        assert_eq!(y.data(), &[5.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
    }

    #[test]
    fn batch_norm_train_output_is_standardized() {
        let x = filled(&[3, 2, 4, 4], 0.1);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let out = batch_norm_forward(&x, &gamma, &beta, None);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|i| out.y.data()[(i * 2 + ch) * 16..(i * 2 + ch + 1) * 16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }
}

//! Image quality metrics.
//!
//! All metrics assume `[0, 1]`-normalized images (peak signal 1) and are
//! accumulated in f64. `perceptual_distance` is a multi-scale gradient
//! distance standing in for a learned perceptual metric, and
//! `frechet_feature_distance` is the exact Frechet/Wasserstein-2 formula over
//! features from a fixed random convolutional projector.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Conv2d;
use crate::vae::image_to_chw;

/// PSNR is reported as this cap when the MSE drops below 1e-10.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Per-checkpoint metric row.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub iteration_checkpoint: usize,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub frechet: f64,
}

fn check_same_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeError(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// Mean over all elements of the squared difference.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / mse)` with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let e = mse(a, b)?;
    if e < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / e).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (0.01)^2 for dynamic range 1
const SSIM_C2: f64 = 9e-4; // (0.03)^2

fn ssim_window_weights() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Gaussian-weighted local filter over the valid grid (window fully inside).
fn ssim_filter(f: &Array2<f64>, w: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, wd) = f.dim();
    let oh = h - SSIM_WINDOW + 1;
    let ow = wd - SSIM_WINDOW + 1;
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, &k) in w.iter().enumerate() {
                acc += k * f[[i, j + t]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (t, &k) in w.iter().enumerate() {
                acc += k * tmp[[i + t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), averaged
/// over channels and all fully-covered window positions.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::ShapeError(format!(
            "ssim needs sides >= {SSIM_WINDOW}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let w = ssim_window_weights();
    let (h, wd, c) = a.data().dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let pa = Array2::from_shape_fn((h, wd), |(i, j)| f64::from(a.data()[[i, j, ch]]));
        let pb = Array2::from_shape_fn((h, wd), |(i, j)| f64::from(b.data()[[i, j, ch]]));
        let mu_a = ssim_filter(&pa, &w);
        let mu_b = ssim_filter(&pb, &w);
        let e_aa = ssim_filter(&(&pa * &pa), &w);
        let e_bb = ssim_filter(&(&pb * &pb), &w);
        let e_ab = ssim_filter(&(&pa * &pb), &w);
        for ((i, j), &ma) in mu_a.indexed_iter() {
            let mb = mu_b[[i, j]];
            let va = e_aa[[i, j]] - ma * ma;
            let vb = e_bb[[i, j]] - mb * mb;
            let cov = e_ab[[i, j]] - ma * mb;
            let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Multi-scale gradient distance: sum over pyramid levels 0..=2 of the mean
/// squared difference between horizontal and vertical finite-difference
/// gradients of Gaussian-downsampled images. Symmetric and differentiable.
pub fn perceptual_distance(a: &Image, b: &Image) -> Result<f64> {
    check_same_shape(a, b)?;
    let pa = pyramid_f64(&chw_f64(a));
    let pb = pyramid_f64(&chw_f64(b));
    let mut total = 0.0;
    for (la, lb) in pa.iter().zip(&pb) {
        total += grad_msd_f64(la, lb);
    }
    Ok(total)
}

pub const PERCEPTUAL_LEVELS: usize = 3;

/// Binomial 5-tap blur-and-halve kernel (zero padding).
const PYR_KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn chw_f64(im: &Image) -> Array3<f64> {
    let (h, w, c) = im.data().dim();
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| f64::from(im.data()[[i, j, ch]]))
}

fn downsample_f64(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for (ti, &ki) in PYR_KERNEL.iter().enumerate() {
                    let ii = 2 * i as isize + ti as isize - 2;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for (tj, &kj) in PYR_KERNEL.iter().enumerate() {
                        let jj = 2 * j as isize + tj as isize - 2;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        acc += ki * kj * x[[ch, ii as usize, jj as usize]];
                    }
                }
                out[[ch, i, j]] = acc;
            }
        }
    }
    out
}

fn pyramid_f64(x: &Array3<f64>) -> Vec<Array3<f64>> {
    let mut out = vec![x.clone()];
    for _ in 1..PERCEPTUAL_LEVELS {
        let next = downsample_f64(out.last().unwrap());
        out.push(next);
    }
    out
}

fn grad_msd_f64(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let (c, h, w) = a.dim();
    let mut acc_x = 0.0;
    let mut acc_y = 0.0;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w - 1 {
                let ga = a[[ch, i, j + 1]] - a[[ch, i, j]];
                let gb = b[[ch, i, j + 1]] - b[[ch, i, j]];
                acc_x += (ga - gb) * (ga - gb);
            }
        }
        for i in 0..h - 1 {
            for j in 0..w {
                let ga = a[[ch, i + 1, j]] - a[[ch, i, j]];
                let gb = b[[ch, i + 1, j]] - b[[ch, i, j]];
                acc_y += (ga - gb) * (ga - gb);
            }
        }
    }
    acc_x / (c * h * (w - 1)) as f64 + acc_y / (c * (h - 1) * w) as f64
}

/// Training-path twin of [`perceptual_distance`]: value plus gradient with
/// respect to `x`, in f32 on CHW arrays.
pub(crate) fn perceptual_value_grad(target: &Array3<f32>, x: &Array3<f32>) -> (f64, Array3<f32>) {
    let mut pt = vec![target.clone()];
    let mut px = vec![x.clone()];
    for _ in 1..PERCEPTUAL_LEVELS {
        pt.push(downsample_f32(pt.last().unwrap()));
        px.push(downsample_f32(px.last().unwrap()));
    }
    let mut value = 0.0f64;
    let mut level_grads: Vec<Array3<f32>> = Vec::new();
    for (lt, lx) in pt.iter().zip(&px) {
        let (v, g) = grad_msd_grad_f32(lt, lx);
        value += v;
        level_grads.push(g);
    }
    // Chain level gradients back to the full-resolution image.
    let mut grad = level_grads.pop().unwrap();
    for l in (0..PERCEPTUAL_LEVELS - 1).rev() {
        let mut up = downsample_adjoint_f32(&grad, px[l].dim());
        up += &level_grads.pop().unwrap();
        grad = up;
    }
    (value, grad)
}

fn downsample_f32(x: &Array3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array3::<f32>::zeros((c, oh, ow));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0f32;
                for (ti, &ki) in PYR_KERNEL.iter().enumerate() {
                    let ii = 2 * i as isize + ti as isize - 2;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for (tj, &kj) in PYR_KERNEL.iter().enumerate() {
                        let jj = 2 * j as isize + tj as isize - 2;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        acc += (ki * kj) as f32 * x[[ch, ii as usize, jj as usize]];
                    }
                }
                out[[ch, i, j]] = acc;
            }
        }
    }
    out
}

fn downsample_adjoint_f32(dy: &Array3<f32>, in_dim: (usize, usize, usize)) -> Array3<f32> {
    let (c, h, w) = in_dim;
    let (_, oh, ow) = dy.dim();
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let g = dy[[ch, i, j]];
                if g == 0.0 {
                    continue;
                }
                for (ti, &ki) in PYR_KERNEL.iter().enumerate() {
                    let ii = 2 * i as isize + ti as isize - 2;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for (tj, &kj) in PYR_KERNEL.iter().enumerate() {
                        let jj = 2 * j as isize + tj as isize - 2;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        dx[[ch, ii as usize, jj as usize]] += (ki * kj) as f32 * g;
                    }
                }
            }
        }
    }
    dx
}

fn grad_msd_grad_f32(target: &Array3<f32>, x: &Array3<f32>) -> (f64, Array3<f32>) {
    let (c, h, w) = x.dim();
    let nx = (c * h * (w - 1)) as f64;
    let ny = (c * (h - 1) * w) as f64;
    let mut acc_x = 0.0f64;
    let mut acc_y = 0.0f64;
    let mut grad = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w - 1 {
                let gt = target[[ch, i, j + 1]] - target[[ch, i, j]];
                let gx = x[[ch, i, j + 1]] - x[[ch, i, j]];
                let d = gx - gt;
                acc_x += f64::from(d) * f64::from(d);
                let gd = 2.0 * d / nx as f32;
                grad[[ch, i, j + 1]] += gd;
                grad[[ch, i, j]] -= gd;
            }
        }
        for i in 0..h - 1 {
            for j in 0..w {
                let gt = target[[ch, i + 1, j]] - target[[ch, i, j]];
                let gy = x[[ch, i + 1, j]] - x[[ch, i, j]];
                let d = gy - gt;
                acc_y += f64::from(d) * f64::from(d);
                let gd = 2.0 * d / ny as f32;
                grad[[ch, i + 1, j]] += gd;
                grad[[ch, i, j]] -= gd;
            }
        }
    }
    (acc_x / nx + acc_y / ny, grad)
}

/// Width of the projector's feature vector.
pub const FRECHET_FEATURES: usize = 64;

const FRECHET_PROJECTOR_SEED: u64 = 0x00C0_FFEE;

/// Fixed random convolutional projector: two stride-2 convolutions with ReLU,
/// then global average pooling to [`FRECHET_FEATURES`] values.
fn project_features(images: &[Image]) -> Result<Array2<f64>> {
    let c_in = images[0].channels();
    let mut rng = ChaCha8Rng::seed_from_u64(FRECHET_PROJECTOR_SEED.wrapping_add(c_in as u64));
    let conv1 = Conv2d::init(32, c_in, 3, 2, 1, &mut rng);
    let conv2 = Conv2d::init(FRECHET_FEATURES, 32, 3, 2, 1, &mut rng);
    let mut feats = Array2::<f64>::zeros((images.len(), FRECHET_FEATURES));
    for (n, im) in images.iter().enumerate() {
        let mut h = conv1.forward(&image_to_chw(im));
        h.mapv_inplace(|v| v.max(0.0));
        let mut h = conv2.forward(&h);
        h.mapv_inplace(|v| v.max(0.0));
        let spatial = (h.dim().1 * h.dim().2) as f64;
        for (f, plane) in h.outer_iter().enumerate() {
            feats[[n, f]] = plane.iter().map(|&v| f64::from(v)).sum::<f64>() / spatial;
        }
    }
    Ok(feats)
}

/// Frechet distance between Gaussian fits of two feature matrices (rows are
/// samples): `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})`.
pub fn frechet_from_features(fa: &Array2<f64>, fb: &Array2<f64>) -> Result<f64> {
    if fa.nrows() < 2 || fb.nrows() < 2 {
        return Err(Error::MetricError("need >= 2 samples per set".into()));
    }
    if fa.ncols() != fb.ncols() {
        return Err(Error::MetricError("feature width mismatch".into()));
    }
    let (mu_a, cov_a) = gaussian_fit(fa);
    let (mu_b, cov_b) = gaussian_fit(fb);
    let d = fa.ncols();

    let mean_term: f64 = (0..d).map(|i| (mu_a[i] - mu_b[i]).powi(2)).sum();
    let tr_a: f64 = (0..d).map(|i| cov_a[(i, i)]).sum();
    let tr_b: f64 = (0..d).map(|i| cov_b[(i, i)]).sum();

    // tr((Sa Sb)^{1/2}) through the symmetric form sqrt(Sa) Sb sqrt(Sa).
    let sa_sqrt = sqrtm_psd(&cov_a);
    let m = &sa_sqrt * &cov_b * &sa_sqrt;
    let m_sym = (&m + &m.transpose()) * 0.5;
    let eig = m_sym.symmetric_eigen();
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();

    Ok((mean_term + tr_a + tr_b - 2.0 * tr_sqrt).max(0.0))
}

fn gaussian_fit(f: &Array2<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = f.dim();
    let mu: Vec<f64> = (0..d).map(|j| f.column(j).sum() / n as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in 0..n {
        for i in 0..d {
            let di = f[[r, i]] - mu[i];
            for j in i..d {
                cov[(i, j)] += di * (f[[r, j]] - mu[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[(i, j)] /= denom;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    (mu, cov)
}

fn sqrtm_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let d = a.nrows();
    let mut out = DMatrix::<f64>::zeros(d, d);
    for k in 0..d {
        let l = eig.eigenvalues[k].max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += l * v[i] * v[j];
            }
        }
    }
    out
}

/// Frechet feature distance between two image sets (each needs >= 2 images).
pub fn frechet_feature_distance(set_a: &[Image], set_b: &[Image]) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::MetricError("need >= 2 images per set".into()));
    }
    let fa = project_features(set_a)?;
    let fb = project_features(set_b)?;
    frechet_from_features(&fa, &fb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_images;

    #[test]
    fn mse_basic_cases() {
        let zero = Image::constant(16, 16, 3, 0.0).unwrap();
        let one = Image::constant(16, 16, 3, 1.0).unwrap();
        let tenth = Image::constant(16, 16, 3, 0.1).unwrap();
        assert_eq!(mse(&zero, &zero).unwrap(), 0.0);
        assert!((mse(&zero, &one).unwrap() - 1.0).abs() < 1e-12);
        assert!((mse(&zero, &tenth).unwrap() - 0.01).abs() < 1e-9);
        let small = Image::constant(16, 8, 3, 0.0);
        assert!(small.is_err() || mse(&zero, &small.unwrap()).is_err());
    }

    #[test]
    fn psnr_basic_cases() {
        let a = Image::constant(16, 16, 1, 0.0).unwrap();
        let b = Image::constant(16, 16, 1, 0.1).unwrap();
        let c = Image::constant(16, 16, 1, 1.0).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert!((psnr(&a, &c).unwrap() - 0.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_constant_pair() {
        let imgs = random_images(1, 16, 3, 0);
        assert!((ssim(&imgs[0], &imgs[0]).unwrap() - 1.0).abs() < 1e-12);
        let a = Image::constant(16, 16, 1, 0.2).unwrap();
        let b = Image::constant(16, 16, 1, 0.8).unwrap();
        let expect = (2.0 * 0.16 + 1e-4) / (0.68 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-4);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::constant(10, 10, 1, 0.5).unwrap();
        assert!(matches!(ssim(&a, &a), Err(Error::ShapeError(_))));
    }

    // Brute-force reference: weighted stats gathered per window position.
    fn ssim_reference(a: &Image, b: &Image) -> f64 {
        let w1 = ssim_window_weights();
        let (h, wd, c) = a.data().dim();
        let mut total = 0.0;
        let mut count = 0;
        for ch in 0..c {
            for i0 in 0..=h - SSIM_WINDOW {
                for j0 in 0..=wd - SSIM_WINDOW {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for di in 0..SSIM_WINDOW {
                        for dj in 0..SSIM_WINDOW {
                            let wgt = w1[di] * w1[dj];
                            let x = f64::from(a.data()[[i0 + di, j0 + dj, ch]]);
                            let y = f64::from(b.data()[[i0 + di, j0 + dj, ch]]);
                            ma += wgt * x;
                            mb += wgt * y;
                            aa += wgt * x * x;
                            bb += wgt * y * y;
                            ab += wgt * x * y;
                        }
                    }
                    let (va, vb, cov) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
                    total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                    count += 1;
                }
            }
        }
        total / f64::from(count)
    }

    #[test]
    fn ssim_matches_sliding_window_reference() {
        let imgs = random_images(2, 20, 3, 42);
        let fast = ssim(&imgs[0], &imgs[1]).unwrap();
        let slow = ssim_reference(&imgs[0], &imgs[1]);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }

    #[test]
    fn perceptual_identity_and_symmetry() {
        let imgs = random_images(2, 16, 3, 7);
        assert_eq!(perceptual_distance(&imgs[0], &imgs[0]).unwrap(), 0.0);
        let ab = perceptual_distance(&imgs[0], &imgs[1]).unwrap();
        let ba = perceptual_distance(&imgs[1], &imgs[0]).unwrap();
        assert!((ab - ba).abs() < 1e-15);
        assert!(ab > 0.0);
    }

    // Direct recomputation of the stated formula, no shared helpers.
    fn perceptual_reference(a: &Image, b: &Image) -> f64 {
        fn down(x: &Vec<Vec<Vec<f64>>>) -> Vec<Vec<Vec<f64>>> {
            let k = [1.0, 4.0, 6.0, 4.0, 1.0].map(|v| v / 16.0);
            let (c, h, w) = (x.len(), x[0].len(), x[0][0].len());
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let mut out = vec![vec![vec![0.0; ow]; oh]; c];
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ti in 0..5 {
                            for tj in 0..5 {
                                let ii = 2 * i as isize + ti as isize - 2;
                                let jj = 2 * j as isize + tj as isize - 2;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += k[ti] * k[tj] * x[ch][ii as usize][jj as usize];
                                }
                            }
                        }
                        out[ch][i][j] = acc;
                    }
                }
            }
            out
        }
        fn msd(a: &Vec<Vec<Vec<f64>>>, b: &Vec<Vec<Vec<f64>>>) -> f64 {
            let (c, h, w) = (a.len(), a[0].len(), a[0][0].len());
            let (mut sx, mut sy) = (0.0, 0.0);
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w - 1 {
                        let d = (a[ch][i][j + 1] - a[ch][i][j]) - (b[ch][i][j + 1] - b[ch][i][j]);
                        sx += d * d;
                    }
                }
                for i in 0..h - 1 {
                    for j in 0..w {
                        let d = (a[ch][i + 1][j] - a[ch][i][j]) - (b[ch][i + 1][j] - b[ch][i][j]);
                        sy += d * d;
                    }
                }
            }
            sx / (c * h * (w - 1)) as f64 + sy / (c * (h - 1) * w) as f64
        }
        let to_vec = |im: &Image| -> Vec<Vec<Vec<f64>>> {
            let (h, w, c) = im.data().dim();
            (0..c)
                .map(|ch| {
                    (0..h)
                        .map(|i| (0..w).map(|j| f64::from(im.data()[[i, j, ch]])).collect())
                        .collect()
                })
                .collect()
        };
        let (mut la, mut lb) = (to_vec(a), to_vec(b));
        let mut total = msd(&la, &lb);
        for _ in 1..PERCEPTUAL_LEVELS {
            la = down(&la);
            lb = down(&lb);
            total += msd(&la, &lb);
        }
        total
    }

    #[test]
    fn perceptual_matches_direct_recomputation() {
        let imgs = random_images(2, 24, 3, 99);
        let fast = perceptual_distance(&imgs[0], &imgs[1]).unwrap();
        let slow = perceptual_reference(&imgs[0], &imgs[1]);
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn perceptual_grad_matches_finite_differences() {
        let imgs = random_images(2, 12, 1, 5);
        let t = image_to_chw(&imgs[0]);
        let x = image_to_chw(&imgs[1]);
        let (_, grad) = perceptual_value_grad(&t, &x);
        let h = 1e-3f32;
        for &idx in &[(0, 0, 0), (0, 5, 7), (0, 11, 11)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let lp = perceptual_value_grad(&t, &xp).0;
            xp[idx] -= 2.0 * h;
            let lm = perceptual_value_grad(&t, &xp).0;
            let fd = (lp - lm) / (2.0 * f64::from(h));
            let an = f64::from(grad[idx]);
            assert!(
                (fd - an).abs() < 2e-2 * an.abs().max(1e-3),
                "{idx:?}: fd {fd} an {an}"
            );
        }
    }

    #[test]
    fn frechet_identical_sets_are_zero() {
        let imgs = random_images(8, 16, 3, 11);
        let d = frechet_feature_distance(&imgs, &imgs).unwrap();
        assert!(d.abs() < 1e-6, "distance {d}");
    }

    #[test]
    fn frechet_mean_shift_is_squared_distance() {
        // One feature, equal covariance, means differing by d -> d^2.
        let d = 0.7;
        let fa = Array2::from_shape_vec((3, 1), vec![0.0, 1.0, 2.0]).unwrap();
        let fb = Array2::from_shape_vec((3, 1), vec![d, 1.0 + d, 2.0 + d]).unwrap();
        let got = frechet_from_features(&fa, &fb).unwrap();
        assert!((got - d * d).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn frechet_rejects_tiny_sets() {
        let imgs = random_images(2, 16, 3, 1);
        assert!(matches!(
            frechet_feature_distance(&imgs[..1], &imgs),
            Err(Error::MetricError(_))
        ));
    }

    // Denman-Beavers iteration for the matrix square root; an independent
    // route to tr((Sa Sb)^{1/2}).
    fn frechet_reference(fa: &Array2<f64>, fb: &Array2<f64>) -> f64 {
        let (mu_a, cov_a) = gaussian_fit(fa);
        let (mu_b, cov_b) = gaussian_fit(fb);
        let d = fa.ncols();
        let mean_term: f64 = (0..d).map(|i| (mu_a[i] - mu_b[i]).powi(2)).sum();
        let prod = &cov_a * &cov_b;
        let mut y = prod.clone();
        let mut z = DMatrix::<f64>::identity(d, d);
        for _ in 0..60 {
            let yi = y.clone().try_inverse().expect("invertible");
            let zi = z.clone().try_inverse().expect("invertible");
            let yn = (&y + &zi) * 0.5;
            let zn = (&z + &yi) * 0.5;
            y = yn;
            z = zn;
        }
        let tr_sqrt = y.trace();
        let tr_a: f64 = (0..d).map(|i| cov_a[(i, i)]).sum();
        let tr_b: f64 = (0..d).map(|i| cov_b[(i, i)]).sum();
        mean_term + tr_a + tr_b - 2.0 * tr_sqrt
    }

    #[test]
    fn frechet_matches_iterative_square_root() {
        // Full-rank covariances need more samples than features.
        let imgs_a = random_images(80, 16, 3, 300);
        let imgs_b = random_images(80, 16, 3, 301);
        let fa = project_features(&imgs_a).unwrap();
        let fb = project_features(&imgs_b).unwrap();
        let fast = frechet_from_features(&fa, &fb).unwrap();
        let slow = frechet_reference(&fa, &fb);
        assert!((fast - slow).abs() < 1e-6 * slow.abs().max(1.0), "{fast} vs {slow}");
    }

    #[test]
    fn metric_symmetry_on_random_pairs() {
        let imgs = random_images(4, 16, 3, 77);
        for pair in imgs.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            assert_eq!(mse(a, b).unwrap(), mse(b, a).unwrap());
            let pd = perceptual_distance(a, b).unwrap();
            assert!((pd - perceptual_distance(b, a).unwrap()).abs() < 1e-15);
        }
        let fa = frechet_feature_distance(&imgs[..2], &imgs[2..]).unwrap();
        let fb = frechet_feature_distance(&imgs[2..], &imgs[..2]).unwrap();
        assert!((fa - fb).abs() < 1e-9);
    }
}

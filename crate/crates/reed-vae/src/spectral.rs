//! Frequency-domain degradation diagnostics.
//!
//! Uses the unnormalized forward DFT; band energies are scaled by `1/N^2` so
//! that their sum equals the spatial-domain energy (Parseval). RGB images are
//! reduced to luminance before the transform.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::Image;

/// Number of equal-width radial annuli.
pub const SPECTRUM_BANDS: usize = 8;

#[derive(Debug, Clone)]
pub struct SpectrumProfile {
    /// `log(1 + |F|)`, DC-centered.
    pub log_magnitude: Array2<f64>,
    /// Energy per radial annulus, summing to `total_energy`.
    pub band_energies: Vec<f64>,
    /// Sum of squared pixel values.
    pub total_energy: f64,
}

fn fft2d(plane: &Array2<f64>) -> Array2<Complex64> {
    let n = plane.nrows();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut data: Vec<Vec<Complex64>> = (0..n)
        .map(|i| (0..n).map(|j| Complex64::new(plane[[i, j]], 0.0)).collect())
        .collect();
    for row in &mut data {
        fft.process(row);
    }
    // Transpose, transform columns, transpose back.
    let mut cols: Vec<Vec<Complex64>> = (0..n).map(|j| (0..n).map(|i| data[i][j]).collect()).collect();
    for col in &mut cols {
        fft.process(col);
    }
    Array2::from_shape_fn((n, n), |(i, j)| cols[j][i])
}

fn fftshift(f: &Array2<Complex64>) -> Array2<Complex64> {
    let n = f.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| f[[(i + n / 2) % n, (j + n / 2) % n]])
}

fn shifted_radius(i: usize, j: usize, n: usize) -> f64 {
    let fu = i as f64 - (n / 2) as f64;
    let fv = j as f64 - (n / 2) as f64;
    (fu * fu + fv * fv).sqrt()
}

/// DC-centered magnitude spectrum with radial band energies.
pub fn magnitude_spectrum(image: &Image) -> Result<SpectrumProfile> {
    if image.height() != image.width() {
        return Err(Error::ShapeError(format!(
            "spectrum needs a square image, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    let plane = image.luminance();
    let n = plane.nrows();
    let shifted = fftshift(&fft2d(&plane));
    let log_magnitude = Array2::from_shape_fn((n, n), |(i, j)| (1.0 + shifted[[i, j]].norm()).ln());

    let scale = 1.0 / (n * n) as f64;
    let band_width = (n / 2) as f64 / SPECTRUM_BANDS as f64;
    let mut band_energies = vec![0.0; SPECTRUM_BANDS];
    let mut total_energy = 0.0;
    for i in 0..n {
        for j in 0..n {
            let e = shifted[[i, j]].norm_sqr() * scale;
            total_energy += e;
            // Corner frequencies beyond Nyquist land in the outermost band.
            let band = ((shifted_radius(i, j, n) / band_width) as usize).min(SPECTRUM_BANDS - 1);
            band_energies[band] += e;
        }
    }
    Ok(SpectrumProfile { log_magnitude, band_energies, total_energy })
}

fn energy_above_cutoff(image: &Image, cutoff_fraction: f64) -> Result<f64> {
    let plane = image.luminance();
    let n = plane.nrows();
    let shifted = fftshift(&fft2d(&plane));
    let scale = 1.0 / (n * n) as f64;
    let cutoff = cutoff_fraction * (n / 2) as f64;
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if shifted_radius(i, j, n) > cutoff {
                acc += shifted[[i, j]].norm_sqr() * scale;
            }
        }
    }
    Ok(acc)
}

/// Ratio of above-cutoff spectral energy, candidate over reference.
/// `< 1` means the candidate lost high frequencies (blurring); `> 1` means it
/// gained them (injected artifacts).
pub fn high_frequency_retention(
    reference: &Image,
    candidate: &Image,
    cutoff_fraction: f64,
) -> Result<f64> {
    if !reference.same_shape(candidate) {
        return Err(Error::ShapeError("retention needs equal shapes".into()));
    }
    if reference.height() != reference.width() {
        return Err(Error::ShapeError("retention needs square images".into()));
    }
    if !(0.0..1.0).contains(&cutoff_fraction) || cutoff_fraction <= 0.0 {
        return Err(Error::ConfigError(format!(
            "cutoff_fraction must be in (0,1), got {cutoff_fraction}"
        )));
    }
    let ref_energy = energy_above_cutoff(reference, cutoff_fraction)?;
    if ref_energy < 1e-12 {
        return Err(Error::DegenerateReference);
    }
    Ok(energy_above_cutoff(candidate, cutoff_fraction)? / ref_energy)
}

/// Retention of every iterate against the first element of the sequence.
pub fn spectral_degradation_series(images: &[Image], cutoff_fraction: f64) -> Result<Vec<f64>> {
    if images.len() < 2 {
        return Err(Error::ShapeError("need at least [x0, x1]".into()));
    }
    images[1..]
        .iter()
        .map(|im| high_frequency_retention(&images[0], im, cutoff_fraction))
        .collect()
}

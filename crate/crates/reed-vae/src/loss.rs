//! Composed training and validation objectives.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{mse, perceptual_distance};
use crate::vae::{kl_standard_normal, LatentDistribution};

/// Scaling of the perceptual (`alpha`) and KL (`beta`) terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.01, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() || self.alpha < 0.0 || self.beta < 0.0
        {
            return Err(Error::ConfigError(format!(
                "loss weights must be finite and >= 0, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn batch_mean<F>(xs: &[Image], ys: &[Image], f: F) -> Result<f64>
where
    F: Fn(&Image, &Image) -> Result<f64>,
{
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::ShapeError(format!(
            "batch sizes differ: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    let mut acc = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        acc += f(x, y)?;
    }
    Ok(acc / xs.len() as f64)
}

/// Training objective: reconstruction + weighted perceptual term against the
/// regression target batch, plus the weighted KL of the final posteriors.
pub fn train_loss(
    target: &[Image],
    xk: &[Image],
    dist_k: &[LatentDistribution],
    w: LossWeights,
) -> Result<f64> {
    w.validate()?;
    if dist_k.len() != xk.len() {
        return Err(Error::ShapeError("posterior batch size mismatch".into()));
    }
    let rec = batch_mean(target, xk, mse)?;
    let perc = if w.alpha > 0.0 { batch_mean(target, xk, perceptual_distance)? } else { 0.0 };
    Ok(rec + w.alpha * perc + w.beta * kl_standard_normal(dist_k))
}

/// Validation objective: no KL term, always measured against the source.
pub fn val_loss(x0: &[Image], xk: &[Image], alpha: f64) -> Result<f64> {
    let rec = batch_mean(x0, xk, mse)?;
    let perc = if alpha > 0.0 { batch_mean(x0, xk, perceptual_distance)? } else { 0.0 };
    Ok(rec + alpha * perc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_images;
    use ndarray::Array3;

    fn unit_dist(m: f32, lv: f32) -> LatentDistribution {
        LatentDistribution::new(
            Array3::from_elem((1, 1, 1), m),
            Array3::from_elem((1, 1, 1), lv),
        )
        .unwrap()
    }

    #[test]
    fn zero_at_identity_with_standard_posterior() {
        let imgs = random_images(2, 16, 3, 0);
        let batch = vec![imgs[0].clone(), imgs[1].clone()];
        let dists = vec![unit_dist(0.0, 0.0), unit_dist(0.0, 0.0)];
        let l = train_loss(&batch, &batch, &dists, LossWeights::default()).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn degenerate_weights_reduce_to_mse() {
        let imgs = random_images(2, 16, 3, 1);
        let a = vec![imgs[0].clone()];
        let b = vec![imgs[1].clone()];
        let dists = vec![unit_dist(1.0, 0.5)];
        let l = train_loss(&a, &b, &dists, LossWeights { alpha: 0.0, beta: 0.0 }).unwrap();
        let expect = mse(&imgs[0], &imgs[1]).unwrap();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!(w.alpha, 0.01);
        assert_eq!(w.beta, 1.0);
    }

    #[test]
    fn val_loss_basic_cases() {
        let imgs = random_images(2, 16, 3, 2);
        let a = vec![imgs[0].clone()];
        let b = vec![imgs[1].clone()];
        assert_eq!(val_loss(&a, &a, 0.01).unwrap(), 0.0);
        let v0 = val_loss(&a, &b, 0.0).unwrap();
        assert!((v0 - mse(&imgs[0], &imgs[1]).unwrap()).abs() < 1e-12);
        // Nonnegative perceptual term only adds.
        assert!(val_loss(&a, &b, 0.5).unwrap() >= v0);
    }

    #[test]
    fn loss_monotone_in_weights() {
        let imgs = random_images(2, 16, 3, 3);
        let a = vec![imgs[0].clone()];
        let b = vec![imgs[1].clone()];
        let dists = vec![unit_dist(0.7, -0.3)];
        let mut prev = f64::NEG_INFINITY;
        for step in 0..4 {
            let w = LossWeights { alpha: 0.01 * step as f64, beta: 0.5 * step as f64 };
            let l = train_loss(&a, &b, &dists, w).unwrap();
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn invalid_weights_rejected() {
        let imgs = random_images(1, 16, 3, 4);
        let batch = vec![imgs[0].clone()];
        let dists = vec![unit_dist(0.0, 0.0)];
        let bad = LossWeights { alpha: -0.1, beta: 1.0 };
        assert!(train_loss(&batch, &batch, &dists, bad).is_err());
    }
}

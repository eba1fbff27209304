//! Iterative encode-decode training.
//!
//! Two phases share one loop: vanilla pretraining is the degenerate
//! configuration (k = 1, loss against the source, everything trainable),
//! while re-encode-decode fine-tuning runs k encode-decode iterations per
//! sample, regresses the final iterate against the first one when the
//! first-step loss is enabled, and raises k through a validation-plateau
//! curriculum. Only the final iteration is differentiated: earlier iterates
//! are constants, which keeps memory flat in k.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{batch_iter, derive_seed};
use crate::error::{Error, Result};
use crate::image::{Dataset, Image};
use crate::loss::LossWeights;
use crate::metrics::perceptual_value_grad;
use crate::nn::RmsProp;
use crate::vae::{
    encode_decode_iterate, image_to_chw, init_model, sample_latent_with_noise, Codec, LatentMode,
    ModelGrads, ModelParameters,
};

/// Absolute improvement below which a validation epoch counts as a plateau.
pub const PLATEAU_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModeFlags {
    pub iterative_training: bool,
    pub first_step_loss: bool,
    pub dynamic_incrementation: bool,
    pub freeze_encoder: bool,
}

impl ModeFlags {
    pub fn vanilla() -> Self {
        Self {
            iterative_training: false,
            first_step_loss: false,
            dynamic_incrementation: false,
            freeze_encoder: false,
        }
    }

    pub fn full() -> Self {
        Self {
            iterative_training: true,
            first_step_loss: true,
            dynamic_incrementation: true,
            freeze_encoder: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub arch: crate::vae::ArchConfig,
    pub epochs_max: usize,
    pub k_init: usize,
    pub k_max: usize,
    pub plateau_patience: usize,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode_flags: ModeFlags,
    pub static_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: crate::vae::ArchConfig::default(),
            epochs_max: 40,
            k_init: 4,
            k_max: 20,
            plateau_patience: 5,
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            batch_size: 16,
            seed: 7,
            mode_flags: ModeFlags::full(),
            static_k: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        if self.k_init < 1 || self.k_max < self.k_init {
            return Err(Error::ConfigError(format!(
                "need 1 <= k_init <= k_max, got {} and {}",
                self.k_init, self.k_max
            )));
        }
        if self.plateau_patience < 1 {
            return Err(Error::ConfigError("plateau_patience must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::ConfigError("learning_rate must be > 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::ConfigError("batch_size must be >= 1".into()));
        }
        if self.epochs_max < 1 {
            return Err(Error::ConfigError("epochs_max must be >= 1".into()));
        }
        let f = self.mode_flags;
        if f.dynamic_incrementation && !f.iterative_training {
            return Err(Error::ConfigError(
                "dynamic_incrementation requires iterative_training".into(),
            ));
        }
        if !f.iterative_training && self.static_k != 1 {
            return Err(Error::ConfigError(
                "static_k must be 1 when iterative_training is off".into(),
            ));
        }
        Ok(())
    }

    /// k used by the first epoch.
    pub fn initial_k(&self) -> usize {
        if self.mode_flags.dynamic_incrementation {
            self.k_init
        } else if self.mode_flags.iterative_training {
            self.static_k
        } else {
            1
        }
    }
}

/// Plateau-driven curriculum over the iteration count k.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CurriculumState {
    pub k: usize,
    pub best_val_loss: f64,
    pub plateau_counter: usize,
    pub terminated: bool,
}

impl CurriculumState {
    pub fn new(k: usize) -> Self {
        Self { k, best_val_loss: f64::INFINITY, plateau_counter: 0, terminated: false }
    }
}

/// One curriculum update from an end-of-epoch validation loss.
///
/// Improvement resets the plateau counter; `plateau_patience` consecutive
/// non-improvements raise k by one and reset the best loss (the task just
/// changed difficulty). Crossing `k_max` terminates the run.
pub fn update_curriculum(
    state: &CurriculumState,
    val_loss: f64,
    config: &TrainConfig,
) -> CurriculumState {
    let mut s = *state;
    if s.terminated {
        return s;
    }
    if val_loss < s.best_val_loss - PLATEAU_TOL {
        s.best_val_loss = val_loss;
        s.plateau_counter = 0;
    } else {
        s.plateau_counter += 1;
        if s.plateau_counter >= config.plateau_patience {
            s.k += 1;
            s.plateau_counter = 0;
            s.best_val_loss = f64::INFINITY;
            if s.k > config.k_max {
                s.terminated = true;
            }
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub k: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
    pub config: TrainConfig,
    pub final_checkpoint_id: Option<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStepStats {
    pub loss: f64,
    /// Bytes of forward caches retained for backprop at the peak.
    pub peak_cache_bytes: usize,
}

struct PerImageOutput {
    grads: ModelGrads,
    loss: f64,
    cache_bytes: usize,
}

/// Runs k encode-decode iterations for one image and backpropagates the loss
/// through the final iteration only. Gradients are pre-scaled by `inv_b`.
fn image_step(
    params: &ModelParameters,
    image: &Image,
    k: usize,
    flags: ModeFlags,
    weights: LossWeights,
    noise_seed: u64,
    inv_b: f32,
) -> PerImageOutput {
    let x0 = image_to_chw(image);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut cur = x0.clone();
    let mut x1: Option<Array3<f32>> = None;
    for step in 1..k {
        let (dist, _) = params.encode_inner(&cur, false);
        let (code, _) = sample_latent_with_noise(&dist, &mut rng);
        let (y, _) = params.decode_inner(&code.values, false);
        if step == 1 {
            x1 = Some(y.clone());
        }
        cur = y;
    }

    // Final iteration, with caches for backprop.
    let (dist, enc_cache) = params.encode_inner(&cur, params.encoder_trainable);
    let (code, eps) = sample_latent_with_noise(&dist, &mut rng);
    let (xk, dec_cache) = params.decode_inner(&code.values, true);
    let dec_cache = dec_cache.expect("cache requested");

    let target = if flags.first_step_loss {
        // With k = 1 the final iterate *is* x^1, so the regression terms
        // vanish and only the KL term trains.
        x1.unwrap_or_else(|| xk.clone())
    } else {
        x0.clone()
    };

    let numel = xk.len() as f64;
    let rec: f64 = xk
        .iter()
        .zip(target.iter())
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum::<f64>()
        / numel;
    let (perc, perc_grad) = perceptual_value_grad(&target, &xk);
    let kl: f64 = dist
        .mean
        .iter()
        .zip(dist.log_variance.iter())
        .map(|(&m, &lv)| {
            let (m, lv) = (f64::from(m), f64::from(lv));
            0.5 * (m * m + lv.exp() - 1.0 - lv)
        })
        .sum();
    let loss = rec + weights.alpha * perc + weights.beta * kl;

    let mut grads = ModelGrads::zeros(params);
    let alpha = weights.alpha as f32;
    let beta = weights.beta as f32;
    let mut dxk = perc_grad;
    dxk.mapv_inplace(|v| v * alpha * inv_b);
    ndarray::Zip::from(&mut dxk).and(&xk).and(&target).for_each(|g, &a, &b| {
        *g += inv_b * 2.0 * (a - b) / numel as f32;
    });
    let dz = params.decoder_backward(&dec_cache, &dxk, &mut grads);

    // Reparameterization: z = mu + exp(lv/2) * eps.
    let mut dmean = dz.clone();
    let mut dlogvar = dz;
    ndarray::Zip::from(&mut dlogvar)
        .and(&eps)
        .and(&dist.log_variance)
        .for_each(|g, &e, &lv| {
            *g *= 0.5 * e * (lv / 2.0).exp();
        });
    // KL term contributes directly to the posterior statistics.
    ndarray::Zip::from(&mut dmean).and(&dist.mean).for_each(|g, &m| {
        *g += beta * inv_b * m;
    });
    ndarray::Zip::from(&mut dlogvar).and(&dist.log_variance).for_each(|g, &lv| {
        *g += beta * inv_b * 0.5 * (lv.exp() - 1.0);
    });

    let mut cache_bytes = dec_cache.nbytes() + 2 * x0.len() * std::mem::size_of::<f32>();
    if let Some(ec) = enc_cache.as_ref() {
        cache_bytes += ec.nbytes();
        params.encoder_backward(ec, &dmean, &dlogvar, &mut grads);
    }

    PerImageOutput { grads, loss, cache_bytes }
}

/// One optimizer update over a batch. Per-image work runs in parallel;
/// reduction order is fixed so results are bit-reproducible.
pub fn train_step(
    params: &mut ModelParameters,
    batch: &[&Image],
    k: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    opt: &mut RmsProp,
) -> Result<TrainStepStats> {
    assert!(k >= 1);
    assert!(!batch.is_empty());
    let seeds: Vec<u64> = (0..batch.len()).map(|_| rng.random()).collect();
    let inv_b = 1.0 / batch.len() as f32;
    let outputs: Vec<PerImageOutput> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(im, &s)| {
            image_step(params, im, k, config.mode_flags, config.weights, s, inv_b)
        })
        .collect();

    let mut loss = 0.0;
    let mut peak_cache_bytes = 0;
    let mut total = ModelGrads::zeros(params);
    for out in &outputs {
        loss += out.loss;
        peak_cache_bytes = peak_cache_bytes.max(out.cache_bytes);
        total.add_assign(&out.grads);
    }
    loss /= batch.len() as f64;
    if !loss.is_finite() || total.has_nan() {
        return Err(Error::TrainingDiverged(format!("non-finite loss {loss}")));
    }

    let trainable = params.trainable_mask();
    let mut slices = params.params_mut();
    opt.step(&mut slices, &total.slices(), &trainable);
    Ok(TrainStepStats { loss, peak_cache_bytes })
}

/// End-of-epoch validation: k deterministic (posterior-mean) encode-decode
/// iterations, loss measured against the source images.
fn validation_loss(
    params: &ModelParameters,
    val_set: &Dataset,
    k: usize,
    alpha: f64,
) -> Result<f64> {
    let xk: Vec<Image> = val_set
        .items()
        .par_iter()
        .map(|im| {
            encode_decode_iterate(params, im, k, LatentMode::Mean)
                .map(|seq| seq.into_iter().last().expect("k >= 1"))
        })
        .collect::<Result<_>>()?;
    crate::loss::val_loss(val_set.items(), &xk, alpha)
}

/// Shared epoch loop for both training phases.
pub fn reed_train(
    config: &TrainConfig,
    init: ModelParameters,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<(ModelParameters, RunLog)> {
    config.validate()?;
    let mut params = init;
    params.encoder_trainable = !config.mode_flags.freeze_encoder;
    let mut opt = RmsProp::new(config.learning_rate as f32);
    let mut state = CurriculumState::new(config.initial_k());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xA11CE));
    let mut records = Vec::new();

    for epoch in 0..config.epochs_max {
        let t0 = std::time::Instant::now();
        let k = state.k;
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in batch_iter(train_set, config.batch_size, true, config.seed, epoch) {
            let stats = train_step(&mut params, &batch, k, config, &mut rng, &mut opt)?;
            loss_sum += stats.loss;
            steps += 1;
        }
        let val = validation_loss(&params, val_set, k, config.weights.alpha)?;
        if !val.is_finite() {
            return Err(Error::TrainingDiverged(format!("validation loss {val}")));
        }
        records.push(EpochRecord {
            epoch,
            k,
            train_loss: loss_sum / steps as f64,
            val_loss: val,
            wall_time_s: t0.elapsed().as_secs_f64(),
        });
        if config.mode_flags.dynamic_incrementation {
            state = update_curriculum(&state, val, config);
            if state.terminated {
                break;
            }
        }
    }

    Ok((
        params,
        RunLog { records, config: config.clone(), final_checkpoint_id: None },
    ))
}

/// Standard single-step VAE training from random initialization; the starting
/// point for decoder fine-tuning.
pub fn pretrain_vanilla(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<(ModelParameters, RunLog)> {
    let mut cfg = config.clone();
    cfg.mode_flags = ModeFlags::vanilla();
    cfg.static_k = 1;
    let init = init_model(&cfg.arch)?;
    reed_train(&cfg, init, train_set, val_set)
}

/// Validation MSE of always predicting mid-gray, the floor any trained
/// decoder must beat.
pub fn constant_predictor_mse(dataset: &Dataset) -> f64 {
    let gray = Image::constant(
        dataset.image_shape().0,
        dataset.image_shape().1,
        dataset.image_shape().2,
        0.5,
    )
    .expect("valid constant");
    let total: f64 = dataset
        .items()
        .iter()
        .map(|im| crate::metrics::mse(im, &gray).expect("same shapes"))
        .sum();
    total / dataset.len() as f64
}

/// Runs one throwaway training step and reports the retained cache size;
/// the diagnostic behind the flat-memory claim for large k.
pub fn measure_step_cache_bytes(
    params: &ModelParameters,
    batch: &[&Image],
    k: usize,
    config: &TrainConfig,
) -> Result<usize> {
    let mut probe = params.clone_params();
    let mut opt = RmsProp::new(config.learning_rate as f32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let stats = train_step(&mut probe, batch, k, config, &mut rng, &mut opt)?;
    Ok(stats.peak_cache_bytes)
}

//! Variational autoencoder core: encoder, decoder, Gaussian latent,
//! closed-form KL and the encode-decode iteration primitive.
//!
//! The encoder is a stack of stride-2 convolutions followed by a 3x3 head
//! producing per-element mean and log-variance of a diagonal Gaussian
//! posterior. The decoder mirrors it with transposed convolutions and a
//! sigmoid output, so decoded images always land in `[0, 1]`. The latent
//! grid is `latent_channels x (size/2^n) x (size/2^n)` for `n` stages, a
//! lossy bottleneck.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::derive_seed;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Conv2d, Conv2dGrad, ConvTranspose2d, ConvTranspose2dGrad, NonLinearity};

pub const LOGVAR_MIN: f32 = -30.0;
pub const LOGVAR_MAX: f32 = 20.0;

/// Architecture description; everything needed to rebuild a model skeleton.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub channels: usize,
    pub latent_channels: usize,
    pub latent_spatial: usize,
    pub conv_widths: Vec<usize>,
    pub nonlinearity: NonLinearity,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            latent_channels: 4,
            latent_spatial: 4,
            conv_widths: vec![32, 64, 128],
            nonlinearity: NonLinearity::Relu,
            seed: 17,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.conv_widths.len();
        if n == 0 {
            return Err(Error::ConfigError("conv_widths must be non-empty".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::ConfigError("channels must be 1 or 3".into()));
        }
        if self.image_size < crate::image::MIN_SIDE || self.image_size % (1 << n) != 0 {
            return Err(Error::ConfigError(format!(
                "image_size {} must be >= 8 and divisible by 2^{n}",
                self.image_size
            )));
        }
        if self.latent_spatial != self.image_size >> n {
            return Err(Error::ConfigError(format!(
                "latent_spatial {} inconsistent with image_size {} and {} stages",
                self.latent_spatial, self.image_size, n
            )));
        }
        let latent_dim = self.latent_channels * self.latent_spatial * self.latent_spatial;
        let pixel_dim = self.image_size * self.image_size * self.channels;
        if latent_dim >= pixel_dim {
            return Err(Error::ConfigError(format!(
                "latent dimensionality {latent_dim} must be strictly below pixel dimensionality {pixel_dim}"
            )));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_channels, self.latent_spatial, self.latent_spatial)
    }
}

/// Diagonal-Gaussian posterior for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mean: Array3<f32>,
    pub log_variance: Array3<f32>,
}

impl LatentDistribution {
    pub fn new(mean: Array3<f32>, log_variance: Array3<f32>) -> Result<Self> {
        if mean.dim() != log_variance.dim() {
            return Err(Error::ShapeError("mean/log_variance shape mismatch".into()));
        }
        if mean.iter().chain(log_variance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::ShapeError("non-finite latent statistics".into()));
        }
        Ok(Self { mean, log_variance })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: Array3<f32>,
}

struct EncoderNet {
    convs: Vec<Conv2d>,
    act: NonLinearity,
}

struct DecoderNet {
    head: Conv2d,
    ups: Vec<ConvTranspose2d>,
    act: NonLinearity,
}

/// Full parameter set plus trainability flags.
pub struct ModelParameters {
    encoder: EncoderNet,
    decoder: DecoderNet,
    pub encoder_trainable: bool,
    arch: ArchConfig,
}

/// Anything that maps images to latent distributions and codes back to
/// images. Implemented by trained models and by [`IdentityCodec`].
pub trait Codec {
    fn encode(&self, image: &Image) -> Result<LatentDistribution>;
    fn decode(&self, code: &LatentCode) -> Result<Image>;
}

/// Deterministic initialization from the architecture seed. The encoder is
/// marked trainable; call sites freeze it for decoder-only fine-tuning.
pub fn init_model(arch: &ArchConfig) -> Result<ModelParameters> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
    let n = arch.conv_widths.len();

    let mut convs = Vec::with_capacity(n + 1);
    let mut in_ch = arch.channels;
    for &w in &arch.conv_widths {
        convs.push(Conv2d::init(w, in_ch, 3, 2, 1, &mut rng));
        in_ch = w;
    }
    convs.push(Conv2d::init(2 * arch.latent_channels, in_ch, 3, 1, 1, &mut rng));

    let head = Conv2d::init(arch.conv_widths[n - 1], arch.latent_channels, 3, 1, 1, &mut rng);
    let mut ups = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let out = if i == 0 { arch.channels } else { arch.conv_widths[i - 1] };
        ups.push(ConvTranspose2d::init(arch.conv_widths[i], out, &mut rng));
    }

    Ok(ModelParameters {
        encoder: EncoderNet { convs, act: arch.nonlinearity },
        decoder: DecoderNet { head, ups, act: arch.nonlinearity },
        encoder_trainable: true,
        arch: arch.clone(),
    })
}

impl ModelParameters {
    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }

    /// `(name, values)` pairs in a fixed order shared with the optimizer and
    /// checkpoint format.
    pub fn named_params(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = Vec::new();
        for (i, c) in self.encoder.convs.iter().enumerate() {
            out.push((format!("enc.conv{i}.w"), c.w.as_slice().unwrap()));
            out.push((format!("enc.conv{i}.b"), c.b.as_slice().unwrap()));
        }
        out.push(("dec.head.w".into(), self.decoder.head.w.as_slice().unwrap()));
        out.push(("dec.head.b".into(), self.decoder.head.b.as_slice().unwrap()));
        for (i, u) in self.decoder.ups.iter().enumerate() {
            out.push((format!("dec.up{i}.w"), u.w.as_slice().unwrap()));
            out.push((format!("dec.up{i}.b"), u.b.as_slice().unwrap()));
        }
        out
    }

    pub fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, c) in self.encoder.convs.iter().enumerate() {
            out.push((format!("enc.conv{i}.w"), c.w.shape().to_vec()));
            out.push((format!("enc.conv{i}.b"), c.b.shape().to_vec()));
        }
        out.push(("dec.head.w".into(), self.decoder.head.w.shape().to_vec()));
        out.push(("dec.head.b".into(), self.decoder.head.b.shape().to_vec()));
        for (i, u) in self.decoder.ups.iter().enumerate() {
            out.push((format!("dec.up{i}.w"), u.w.shape().to_vec()));
            out.push((format!("dec.up{i}.b"), u.b.shape().to_vec()));
        }
        out
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for c in &mut self.encoder.convs {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(c.b.as_slice_mut().unwrap());
        }
        out.push(self.decoder.head.w.as_slice_mut().unwrap());
        out.push(self.decoder.head.b.as_slice_mut().unwrap());
        for u in &mut self.decoder.ups {
            out.push(u.w.as_slice_mut().unwrap());
            out.push(u.b.as_slice_mut().unwrap());
        }
        out
    }

    /// True for entries the optimizer may update, in `named_params` order.
    pub(crate) fn trainable_mask(&self) -> Vec<bool> {
        let enc_slots = 2 * self.encoder.convs.len();
        let dec_slots = 2 + 2 * self.decoder.ups.len();
        let mut mask = vec![self.encoder_trainable; enc_slots];
        mask.extend(std::iter::repeat(true).take(dec_slots));
        mask
    }

    /// Byte-level fingerprint of all parameters (order-sensitive).
    pub fn param_checksum(&self) -> u64 {
        let mut h = crate::persist::FNV_OFFSET;
        for (_, p) in self.named_params() {
            for v in p {
                for b in v.to_le_bytes() {
                    h = crate::persist::fnv1a_step(h, b);
                }
            }
        }
        h
    }

    pub fn encoder_checksum(&self) -> u64 {
        let mut h = crate::persist::FNV_OFFSET;
        for (name, p) in self.named_params() {
            if !name.starts_with("enc.") {
                continue;
            }
            for v in p {
                for b in v.to_le_bytes() {
                    h = crate::persist::fnv1a_step(h, b);
                }
            }
        }
        h
    }

    pub(crate) fn load_named(&mut self, name: &str, values: &[f32]) -> Result<()> {
        for (i, c) in self.encoder.convs.iter_mut().enumerate() {
            if name == format!("enc.conv{i}.w") {
                return copy_into(c.w.as_slice_mut().unwrap(), values, name);
            }
            if name == format!("enc.conv{i}.b") {
                return copy_into(c.b.as_slice_mut().unwrap(), values, name);
            }
        }
        if name == "dec.head.w" {
            return copy_into(self.decoder.head.w.as_slice_mut().unwrap(), values, name);
        }
        if name == "dec.head.b" {
            return copy_into(self.decoder.head.b.as_slice_mut().unwrap(), values, name);
        }
        for (i, u) in self.decoder.ups.iter_mut().enumerate() {
            if name == format!("dec.up{i}.w") {
                return copy_into(u.w.as_slice_mut().unwrap(), values, name);
            }
            if name == format!("dec.up{i}.b") {
                return copy_into(u.b.as_slice_mut().unwrap(), values, name);
            }
        }
        Err(Error::ShapeError(format!("unknown parameter name {name}")))
    }

    pub fn clone_params(&self) -> ModelParameters {
        ModelParameters {
            encoder: EncoderNet {
                convs: self.encoder.convs.clone(),
                act: self.encoder.act,
            },
            decoder: DecoderNet {
                head: self.decoder.head.clone(),
                ups: self.decoder.ups.clone(),
                act: self.decoder.act,
            },
            encoder_trainable: self.encoder_trainable,
            arch: self.arch.clone(),
        }
    }
}

fn copy_into(dst: &mut [f32], src: &[f32], name: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::ShapeError(format!(
            "parameter {name}: expected {} values, got {}",
            dst.len(),
            src.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

pub fn image_to_chw(image: &Image) -> Array3<f32> {
    let (h, w, c) = image.data().dim();
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| image.data()[[i, j, ch]])
}

pub fn chw_to_image(chw: &Array3<f32>) -> Result<Image> {
    let (c, h, w) = chw.dim();
    let hwc = Array3::from_shape_fn((h, w, c), |(i, j, ch)| chw[[ch, i, j]]);
    Image::from_clamped(hwc)
}

impl Codec for ModelParameters {
    fn encode(&self, image: &Image) -> Result<LatentDistribution> {
        let (h, w, c) = image.data().dim();
        if h != self.arch.image_size || w != self.arch.image_size || c != self.arch.channels {
            return Err(Error::ShapeError(format!(
                "image {h}x{w}x{c} does not match arch {}x{}x{}",
                self.arch.image_size, self.arch.image_size, self.arch.channels
            )));
        }
        let (dist, _) = self.encode_inner(&image_to_chw(image), false);
        Ok(dist)
    }

    fn decode(&self, code: &LatentCode) -> Result<Image> {
        if code.values.dim() != self.arch.latent_shape() {
            return Err(Error::ShapeError(format!(
                "latent code {:?} does not match arch {:?}",
                code.values.dim(),
                self.arch.latent_shape()
            )));
        }
        let (y, _) = self.decode_inner(&code.values, false);
        chw_to_image(&y)
    }
}

pub(crate) struct EncCache {
    pub input: Array3<f32>,
    pub acts: Vec<Array3<f32>>,
    pub cols: Vec<Array2<f32>>,
    pub raw_logvar: Array3<f32>,
}

pub(crate) struct DecCache {
    pub z: Array3<f32>,
    pub head_cols: Array2<f32>,
    pub head_act: Array3<f32>,
    pub up_inputs: Vec<Array2<f32>>,
    pub up_outputs: Vec<Array3<f32>>,
}

fn arr3_bytes(a: &Array3<f32>) -> usize {
    a.len() * std::mem::size_of::<f32>()
}

fn arr2_bytes(a: &Array2<f32>) -> usize {
    a.len() * std::mem::size_of::<f32>()
}

impl EncCache {
    pub fn nbytes(&self) -> usize {
        arr3_bytes(&self.input)
            + self.acts.iter().map(arr3_bytes).sum::<usize>()
            + self.cols.iter().map(arr2_bytes).sum::<usize>()
            + arr3_bytes(&self.raw_logvar)
    }
}

impl DecCache {
    pub fn nbytes(&self) -> usize {
        arr3_bytes(&self.z)
            + arr2_bytes(&self.head_cols)
            + arr3_bytes(&self.head_act)
            + self.up_inputs.iter().map(arr2_bytes).sum::<usize>()
            + self.up_outputs.iter().map(arr3_bytes).sum::<usize>()
    }
}

impl ModelParameters {
    pub(crate) fn encode_inner(
        &self,
        x: &Array3<f32>,
        keep_cache: bool,
    ) -> (LatentDistribution, Option<EncCache>) {
        let n = self.encoder.convs.len() - 1;
        let mut acts = Vec::new();
        let mut cols_cache = Vec::new();
        let mut cur = x.clone();
        for conv in &self.encoder.convs[..n] {
            let (mut y, cols) = conv.forward_cached(&cur);
            self.encoder.act.apply(&mut y);
            if keep_cache {
                cols_cache.push(cols);
                acts.push(y.clone());
            }
            cur = y;
        }
        let (raw, cols) = self.encoder.convs[n].forward_cached(&cur);
        if keep_cache {
            cols_cache.push(cols);
        }
        let c_lat = self.arch.latent_channels;
        let mean = raw.slice(ndarray::s![..c_lat, .., ..]).to_owned();
        let raw_logvar = raw.slice(ndarray::s![c_lat.., .., ..]).to_owned();
        let log_variance = raw_logvar.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        let cache = keep_cache.then(|| EncCache {
            input: x.clone(),
            acts,
            cols: cols_cache,
            raw_logvar,
        });
        (LatentDistribution { mean, log_variance }, cache)
    }

    pub(crate) fn decode_inner(&self, z: &Array3<f32>, keep_cache: bool) -> (Array3<f32>, Option<DecCache>) {
        let (mut h, head_cols) = self.decoder.head.forward_cached(z);
        self.decoder.act.apply(&mut h);
        let head_act = h.clone();
        let n = self.decoder.ups.len();
        let mut up_inputs = Vec::new();
        let mut up_outputs = Vec::new();
        for (i, up) in self.decoder.ups.iter().enumerate() {
            let (mut y, u2) = up.forward_cached(&h);
            if i + 1 < n {
                self.decoder.act.apply(&mut y);
            } else {
                crate::nn::sigmoid(&mut y);
            }
            if keep_cache {
                up_inputs.push(u2);
                up_outputs.push(y.clone());
            }
            h = y;
        }
        let cache = keep_cache.then(|| DecCache {
            z: z.clone(),
            head_cols,
            head_act,
            up_inputs,
            up_outputs,
        });
        (h, cache)
    }

    /// Backward through the decoder. `dy` is the loss gradient at the
    /// decoded image; returns the gradient at the latent code.
    pub(crate) fn decoder_backward(
        &self,
        cache: &DecCache,
        dy: &Array3<f32>,
        grads: &mut ModelGrads,
    ) -> Array3<f32> {
        let n = self.decoder.ups.len();
        let mut grad = dy.clone();
        // Final activation is a sigmoid; earlier stages use the nonlinearity.
        let y_last = &cache.up_outputs[n - 1];
        ndarray::Zip::from(&mut grad).and(y_last).for_each(|g, &y| {
            *g *= y * (1.0 - y);
        });
        for i in (0..n).rev() {
            let up = &self.decoder.ups[i];
            let dx = up
                .backward(&cache.up_inputs[i], &grad, &mut grads.dec_ups[i], true)
                .expect("want_dx");
            grad = dx;
            if i > 0 {
                self.decoder.act.backward(&cache.up_outputs[i - 1], &mut grad);
            }
        }
        self.decoder.act.backward(&cache.head_act, &mut grad);
        let dz = self
            .decoder
            .head
            .backward(&cache.head_cols, &grad, &mut grads.dec_head, cache.z.dim(), true)
            .expect("want_dx");
        dz
    }

    /// Backward through the encoder from gradients on the posterior stats.
    /// The clamp on log-variance zeroes gradients outside its active range.
    pub(crate) fn encoder_backward(
        &self,
        cache: &EncCache,
        dmean: &Array3<f32>,
        dlogvar: &Array3<f32>,
        grads: &mut ModelGrads,
    ) {
        let n = self.encoder.convs.len() - 1;
        let (c, hh, ww) = dmean.dim();
        let mut dhead = Array3::<f32>::zeros((2 * c, hh, ww));
        dhead.slice_mut(ndarray::s![..c, .., ..]).assign(dmean);
        {
            let mut lv = dhead.slice_mut(ndarray::s![c.., .., ..]);
            ndarray::Zip::from(&mut lv).and(dlogvar).and(&cache.raw_logvar).for_each(
                |g, &d, &raw| {
                    *g = if (LOGVAR_MIN..=LOGVAR_MAX).contains(&raw) { d } else { 0.0 };
                },
            );
        }
        let in_shape = if n == 0 { cache.input.dim() } else { cache.acts[n - 1].dim() };
        let mut grad = self.encoder.convs[n]
            .backward(&cache.cols[n], &dhead, &mut grads.enc[n], in_shape, true)
            .expect("want_dx");
        for i in (0..n).rev() {
            self.encoder.act.backward(&cache.acts[i], &mut grad);
            let in_shape = if i == 0 { cache.input.dim() } else { cache.acts[i - 1].dim() };
            let dx = self.encoder.convs[i].backward(
                &cache.cols[i],
                &grad,
                &mut grads.enc[i],
                in_shape,
                i > 0,
            );
            match dx {
                Some(d) => grad = d,
                None => break,
            }
        }
    }
}

/// Gradient buffers mirroring [`ModelParameters`].
pub(crate) struct ModelGrads {
    pub enc: Vec<Conv2dGrad>,
    pub dec_head: Conv2dGrad,
    pub dec_ups: Vec<ConvTranspose2dGrad>,
}

impl ModelGrads {
    pub fn zeros(params: &ModelParameters) -> Self {
        Self {
            enc: params.encoder.convs.iter().map(Conv2d::zero_grad).collect(),
            dec_head: params.decoder.head.zero_grad(),
            dec_ups: params.decoder.ups.iter().map(ConvTranspose2d::zero_grad).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.enc.iter_mut().zip(&other.enc) {
            a.w += &b.w;
            a.b += &b.b;
        }
        self.dec_head.w += &other.dec_head.w;
        self.dec_head.b += &other.dec_head.b;
        for (a, b) in self.dec_ups.iter_mut().zip(&other.dec_ups) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    /// Flat gradient slices in `named_params` order.
    pub fn slices(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for g in &self.enc {
            out.push(g.w.as_slice().unwrap());
            out.push(g.b.as_slice().unwrap());
        }
        out.push(self.dec_head.w.as_slice().unwrap());
        out.push(self.dec_head.b.as_slice().unwrap());
        for g in &self.dec_ups {
            out.push(g.w.as_slice().unwrap());
            out.push(g.b.as_slice().unwrap());
        }
        out
    }

    pub fn has_nan(&self) -> bool {
        self.slices().iter().any(|s| s.iter().any(|v| !v.is_finite()))
    }
}

/// `z = mu + exp(logvar / 2) * eps`, `eps ~ N(0, I)` elementwise.
pub fn sample_latent<R: Rng>(dist: &LatentDistribution, rng: &mut R) -> LatentCode {
    sample_latent_with_noise(dist, rng).0
}

pub(crate) fn sample_latent_with_noise<R: Rng>(
    dist: &LatentDistribution,
    rng: &mut R,
) -> (LatentCode, Array3<f32>) {
    let eps = Array3::from_shape_fn(dist.mean.dim(), |_| {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    });
    let mut values = dist.mean.clone();
    ndarray::Zip::from(&mut values)
        .and(&dist.log_variance)
        .and(&eps)
        .for_each(|z, &lv, &e| {
            *z += (lv / 2.0).exp() * e;
        });
    (LatentCode { values }, eps)
}

/// Posterior mean as a deterministic code.
pub fn latent_mean(dist: &LatentDistribution) -> LatentCode {
    LatentCode { values: dist.mean.clone() }
}

/// Closed-form KL to the standard normal: `0.5 * sum(mu^2 + var - 1 - logvar)`
/// summed over latent elements, averaged over the batch.
pub fn kl_standard_normal(dists: &[LatentDistribution]) -> f64 {
    if dists.is_empty() {
        return 0.0;
    }
    let total: f64 = dists
        .iter()
        .map(|d| {
            d.mean
                .iter()
                .zip(d.log_variance.iter())
                .map(|(&m, &lv)| {
                    let (m, lv) = (f64::from(m), f64::from(lv));
                    0.5 * (m * m + lv.exp() - 1.0 - lv)
                })
                .sum::<f64>()
        })
        .sum();
    total / dists.len() as f64
}

/// How latent codes are drawn when iterating a codec outside training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMode {
    Mean,
    Sample { seed: u64 },
}

/// Runs `n` encode-decode iterations and returns all iterates `x^1..=x^n`.
pub fn encode_decode_iterate<C: Codec>(
    codec: &C,
    image: &Image,
    n: usize,
    mode: LatentMode,
) -> Result<Vec<Image>> {
    assert!(n >= 1, "need at least one iteration");
    let mut out = Vec::with_capacity(n);
    let mut cur = image.clone();
    for i in 0..n {
        let dist = codec.encode(&cur)?;
        let code = match mode {
            LatentMode::Mean => latent_mean(&dist),
            LatentMode::Sample { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                sample_latent(&dist, &mut rng)
            }
        };
        cur = codec.decode(&code)?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// Lossless reference codec: packs 2x2 pixel blocks into latent channels
/// (space-to-depth) with the log-variance pinned at the clamp floor. Useful
/// for exercising iteration plumbing with a known fixed point.
pub struct IdentityCodec {
    pub side: usize,
    pub channels: usize,
}

impl IdentityCodec {
    pub fn new(side: usize, channels: usize) -> Self {
        assert!(side % 2 == 0, "side must be even");
        Self { side, channels }
    }
}

impl Codec for IdentityCodec {
    fn encode(&self, image: &Image) -> Result<LatentDistribution> {
        let (h, w, c) = image.data().dim();
        if h != self.side || w != self.side || c != self.channels {
            return Err(Error::ShapeError("identity codec shape mismatch".into()));
        }
        let hs = h / 2;
        let mean = Array3::from_shape_fn((4 * c, hs, hs), |(ch, i, j)| {
            let block = ch / c;
            let (di, dj) = (block / 2, block % 2);
            image.data()[[2 * i + di, 2 * j + dj, ch % c]]
        });
        let log_variance = Array3::from_elem(mean.dim(), LOGVAR_MIN);
        Ok(LatentDistribution { mean, log_variance })
    }

    fn decode(&self, code: &LatentCode) -> Result<Image> {
        let (cl, hs, ws) = code.values.dim();
        if cl != 4 * self.channels || hs != self.side / 2 || ws != self.side / 2 {
            return Err(Error::ShapeError("identity codec latent mismatch".into()));
        }
        let c = self.channels;
        let data = Array3::from_shape_fn((self.side, self.side, c), |(i, j, ch)| {
            let block = (i % 2) * 2 + (j % 2);
            code.values[[block * c + ch, i / 2, j / 2]]
        });
        Image::from_clamped(data)
    }
}

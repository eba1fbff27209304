//! Dataset loading, procedural generation, splitting and batching.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::Array3;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Dataset, Image, SplitTag};

/// Mixes a base seed with a stream index into an independent 64-bit seed.
/// SplitMix64 finalizer; used everywhere a per-item RNG is derived.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e37_79b9_7f4a_7c15.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Loads every decodable PNG/PPM under `root_path`, center-crops to square
/// and resizes to `target_size` with bilinear filtering.
///
/// Corrupt files are skipped with a warning on stderr; the call only fails
/// if nothing decodes.
pub fn load_dataset(root_path: &Path, target_size: usize) -> Result<Dataset> {
    if !root_path.exists() {
        return Err(Error::NotFound(root_path.to_path_buf()));
    }
    let mut paths: Vec<_> = std::fs::read_dir(root_path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png") | Some("ppm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut items = Vec::new();
    for p in &paths {
        match decode_one(p, target_size) {
            Ok(im) => items.push(im),
            Err(e) => eprintln!("warning: skipping {}: {e}", p.display()),
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let name = root_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Dataset::new(items, name, SplitTag::Train)
}

fn decode_one(path: &Path, target_size: usize) -> Result<Image> {
    let dynimg = image::open(path)
        .map_err(|e| Error::ShapeError(format!("decode failed: {e}")))?;
    let (w, h) = (dynimg.width(), dynimg.height());
    let side = w.min(h);
    let cropped = dynimg.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = cropped.resize_exact(target_size as u32, target_size as u32, FilterType::Triangle);
    let gray_input = matches!(
        dynimg.color(),
        image::ColorType::L8 | image::ColorType::L16
    );
    let (h, w, c) = (target_size, target_size, if gray_input { 1 } else { 3 });
    let mut data = Array3::<f32>::zeros((h, w, c));
    if gray_input {
        let buf = resized.to_luma8();
        for (x, y, p) in buf.enumerate_pixels() {
            data[[y as usize, x as usize, 0]] = f32::from(p.0[0]) / 255.0;
        }
    } else {
        let buf = resized.to_rgb8();
        for (x, y, p) in buf.enumerate_pixels() {
            for ch in 0..3 {
                data[[y as usize, x as usize, ch]] = f32::from(p.0[ch]) / 255.0;
            }
        }
    }
    Image::new(data)
}

/// Procedural dataset: each image mixes a smooth color gradient, a few hard-
/// edged ellipses/rectangles and a band-limited sinusoid texture, so spectra
/// carry energy in both low and high radial bands.
pub fn generate_synthetic(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::ConfigError("count must be >= 1".to_string()));
    }
    if size < crate::image::MIN_SIDE {
        return Err(Error::ConfigError(format!(
            "size must be >= {}",
            crate::image::MIN_SIDE
        )));
    }
    let items: Vec<Image> = (0..count)
        .map(|i| synth_image(size, derive_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    Dataset::new(items, format!("synthetic-{seed}"), SplitTag::Train)
}

fn synth_image(size: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let mut data = Array3::<f32>::zeros((size, size, 3));

    // Smooth gradient background between two random colors.
    let c0: [f32; 3] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let c1: [f32; 3] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
    let theta = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    for i in 0..size {
        for j in 0..size {
            let t = ((j as f32 / s - 0.5) * dx + (i as f32 / s - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            for ch in 0..3 {
                data[[i, j, ch]] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }

    // Hard-edged shapes for mid/high-frequency content.
    let n_shapes = rng.random_range(2..=4);
    for _ in 0..n_shapes {
        let color: [f32; 3] = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        let cx = rng.random_range(0.15..0.85) * s;
        let cy = rng.random_range(0.15..0.85) * s;
        let rx = rng.random_range(0.06..0.28) * s;
        let ry = rng.random_range(0.06..0.28) * s;
        let is_ellipse = rng.random_bool(0.5);
        for i in 0..size {
            for j in 0..size {
                let (u, v) = (j as f32 - cx, i as f32 - cy);
                let inside = if is_ellipse {
                    (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
                } else {
                    u.abs() <= rx && v.abs() <= ry
                };
                if inside {
                    for ch in 0..3 {
                        data[[i, j, ch]] = color[ch];
                    }
                }
            }
        }
    }

    // Band-limited texture: a few sinusoids between 3 and 10 cycles per side.
    for _ in 0..3 {
        let amp = rng.random_range(0.015..0.05);
        let fx = rng.random_range(3.0..10.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let fy = rng.random_range(3.0..10.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let phase = rng.random_range(0.0..std::f32::consts::TAU);
        for i in 0..size {
            for j in 0..size {
                let arg = std::f32::consts::TAU * (fx * j as f32 + fy * i as f32) / s + phase;
                let v = amp * arg.sin();
                for ch in 0..3 {
                    data[[i, j, ch]] += v;
                }
            }
        }
    }

    data.mapv_inplace(|v| v.clamp(0.02, 0.98));
    Image::new(data)
}

/// Random disjoint partition into train/val/test with the given fractions.
/// Every split is guaranteed non-empty, which requires at least 3 items.
pub fn split(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (f1, f2, f3) = fractions;
    if f1 <= 0.0 || f2 <= 0.0 || f3 <= 0.0 || (f1 + f2 + f3 - 1.0).abs() > 1e-9 {
        return Err(Error::SplitError(format!(
            "fractions must be positive and sum to 1, got ({f1}, {f2}, {f3})"
        )));
    }
    let n = dataset.len();
    if n < 3 {
        return Err(Error::SplitError(format!("need >= 3 items, got {n}")));
    }
    let mut n1 = ((f1 * n as f64).round() as usize).max(1);
    let mut n2 = ((f2 * n as f64).round() as usize).max(1);
    while n1 + n2 + 1 > n {
        if n1 >= n2 && n1 > 1 {
            n1 -= 1;
        } else {
            n2 -= 1;
        }
    }
    let n3 = n - n1 - n2;

    let mut indices: Vec<usize> = (0..n).collect();
    shuffle(&mut indices, seed);
    let pick = |range: std::ops::Range<usize>, tag: SplitTag, suffix: &str| {
        let items: Vec<Image> = indices[range].iter().map(|&i| dataset.items()[i].clone()).collect();
        Dataset::new(items, format!("{}-{suffix}", dataset.name()), tag)
    };
    Ok((
        pick(0..n1, SplitTag::Train, "train")?,
        pick(n1..n1 + n2, SplitTag::Val, "val")?,
        pick(n1 + n2..n, SplitTag::Test, "test")?,
    ))
}

fn shuffle(indices: &mut [usize], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates.
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Index batches for one epoch. Each index appears exactly once; the last
/// batch may be short. Shuffle order depends only on `(seed, epoch)`.
pub fn batch_indices(
    n_items: usize,
    batch_size: usize,
    shuffle_items: bool,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut indices: Vec<usize> = (0..n_items).collect();
    if shuffle_items {
        shuffle(&mut indices, derive_seed(seed, epoch as u64));
    }
    indices.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Iterator over image batches for one epoch.
pub fn batch_iter<'a>(
    dataset: &'a Dataset,
    batch_size: usize,
    shuffle_items: bool,
    seed: u64,
    epoch: usize,
) -> impl Iterator<Item = Vec<&'a Image>> + 'a {
    batch_indices(dataset.len(), batch_size, shuffle_items, seed, epoch)
        .into_iter()
        .map(move |batch| batch.into_iter().map(|i| &dataset.items()[i]).collect())
}

/// Writes the plain-text manifest: one item id per line, in dataset order.
pub fn write_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..dataset.len() {
        out.push_str(&format!("item_{i:05}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Deterministic uniform-noise image set, used by metric self-checks.
pub fn random_images(count: usize, size: usize, channels: usize, seed: u64) -> Vec<Image> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let data = Array3::from_shape_fn((size, size, channels), |_| rng.random_range(0.0..1.0));
            Image::new(data).expect("in range by construction")
        })
        .collect()
}

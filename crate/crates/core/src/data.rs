//! Rainy/clean image pairs: procedural synthesis, corpus directories and
//! crop/flip augmentation.
//!
//! A synthetic pair is `O = clamp(B + R, 0, 1)` where the rain layer `R` is a
//! field of seeded points smeared along a line kernel. The streak is
//! achromatic, so the same `R` is added to all three channels.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io::{read_image, write_image, ImageKind};
use crate::net::SPATIAL_MULTIPLE;
use crate::tensor::Tensor;

pub const RAIN_DIR: &str = "rain";
pub const CLEAN_DIR: &str = "norain";

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub id: String,
    /// `O`, shape `[3, H, W]`.
    pub rainy: Tensor,
    /// `B`, shape `[3, H, W]`.
    pub clean: Tensor,
}

impl ImagePair {
    pub fn new(id: impl Into<String>, rainy: Tensor, clean: Tensor) -> Result<Self> {
        let id = id.into();
        if rainy.shape() != clean.shape() {
            return Err(Error::Data(format!(
                "pair `{id}`: rainy shape {:?} differs from clean shape {:?}",
                rainy.shape(),
                clean.shape()
            )));
        }
        image_dims(&rainy, "ImagePair")?;
        Ok(Self { id, rainy, clean })
    }

    pub fn height(&self) -> usize {
        self.rainy.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.rainy.shape()[2]
    }
}

fn image_dims(image: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *image.shape() {
        [3, h, w] if h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: image.shape().to_vec(),
            reason: "expected a non-empty [3, H, W] image".into(),
        }),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RainParams {
    /// Fraction of pixels that seed a streak, in `[0, 1]`.
    pub density: f64,
    /// Streak length in pixels, at least 1.
    pub length: f64,
    /// Streak direction in degrees from vertical, within `[-90, 90]`.
    pub angle_deg: f64,
    /// Peak streak brightness, in `[0, 1]`.
    pub intensity: f64,
    pub seed: u64,
}

impl RainParams {
    pub fn light(seed: u64) -> Self {
        Self {
            density: 0.01,
            length: 9.0,
            angle_deg: 10.0,
            intensity: 0.45,
            seed,
        }
    }

    pub fn moderate(seed: u64) -> Self {
        Self {
            density: 0.02,
            length: 13.0,
            angle_deg: -15.0,
            intensity: 0.6,
            seed,
        }
    }

    pub fn heavy(seed: u64) -> Self {
        Self {
            density: 0.04,
            length: 17.0,
            angle_deg: 25.0,
            intensity: 0.8,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.density) {
            return Err(Error::Config(format!(
                "rain density {} outside [0, 1]",
                self.density
            )));
        }
        if !in_unit(self.intensity) {
            return Err(Error::Config(format!(
                "rain intensity {} outside [0, 1]",
                self.intensity
            )));
        }
        if !(self.length >= 1.0) || !self.length.is_finite() {
            return Err(Error::Config(format!(
                "rain length {} must be at least 1",
                self.length
            )));
        }
        if !(-90.0..=90.0).contains(&self.angle_deg) {
            return Err(Error::Config(format!(
                "rain angle {} outside [-90, 90]",
                self.angle_deg
            )));
        }
        Ok(())
    }
}

/// Anti-aliased line of the given length and angle, scaled to a peak of 1.
///
/// Returns `(radius, weights)` with weights laid out row-major over a
/// `(2·radius + 1)²` window centred on the streak midpoint.
pub fn streak_kernel(length: f64, angle_deg: f64) -> (usize, Vec<f64>) {
    let half = (length - 1.0) / 2.0;
    let radius = half.ceil() as usize + 1;
    let side = 2 * radius + 1;
    let mut k = vec![0.0; side * side];
    let (dx, dy) = {
        let a = angle_deg.to_radians();
        (a.sin(), a.cos())
    };
    let samples = ((length - 1.0) * 4.0).ceil().max(0.0) as usize + 1;
    for s in 0..samples {
        let t = if samples == 1 {
            0.0
        } else {
            -half + 2.0 * half * s as f64 / (samples - 1) as f64
        };
        let (x, y) = (radius as f64 + t * dx, radius as f64 + t * dy);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (oy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
            for (ox, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                let (yy, xx) = (y0 as usize + oy, x0 as usize + ox);
                if yy < side && xx < side {
                    k[yy * side + xx] += wy * wx;
                }
            }
        }
    }
    let peak = k.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        k.iter_mut().for_each(|v| *v /= peak);
    }
    (radius, k)
}

/// The single-channel rain layer `R`, shape `[H, W]` flattened, values in `[0, intensity]`.
pub fn rain_layer(h: usize, w: usize, p: &RainParams) -> Result<Vec<f32>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let seeds: Vec<bool> = (0..h * w)
        .map(|_| rng.random::<f64>() < p.density)
        .collect();
    let (radius, kernel) = streak_kernel(p.length, p.angle_deg);
    let side = 2 * radius + 1;
    let mut acc = vec![0.0f64; h * w];
    for (i, _) in seeds.iter().enumerate().filter(|(_, s)| **s) {
        let (sy, sx) = ((i / w) as isize, (i % w) as isize);
        for ky in 0..side {
            let y = sy + ky as isize - radius as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            for kx in 0..side {
                let x = sx + kx as isize - radius as isize;
                if x < 0 || x >= w as isize {
                    continue;
                }
                acc[y as usize * w + x as usize] += kernel[ky * side + kx];
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|v| (p.intensity * v.min(1.0)) as f32)
        .collect())
}

/// `O = clamp(B + R, 0, 1)` for a clean image `B` in `[0, 1]`.
pub fn synthesize_rain(id: impl Into<String>, clean: &Tensor, p: &RainParams) -> Result<ImagePair> {
    let (h, w) = image_dims(clean, "synthesize_rain")?;
    if clean.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data("clean image values must lie in [0, 1]".into()));
    }
    let r = rain_layer(h, w, p)?;
    let plane = h * w;
    let mut rainy = clean.clone();
    for (i, v) in rainy.data_mut().iter_mut().enumerate() {
        *v = (*v + r[i % plane]).clamp(0.0, 1.0);
    }
    ImagePair::new(id, rainy, clean.clone())
}

/// A smooth clean scene: a colour gradient overlaid with a low-contrast
/// checkerboard and a few soft blobs, all drawn from `seed`.
pub fn procedural_clean(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1ea);
    let colour =
        |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(0.1..0.7)) };
    let (c0, c1) = (colour(&mut rng), colour(&mut rng));
    let blobs: Vec<([f64; 3], f64, f64, f64)> = (0..3)
        .map(|_| {
            let c = colour(&mut rng);
            (
                c,
                rng.random::<f64>(),
                rng.random::<f64>(),
                rng.random_range(0.08..0.3),
            )
        })
        .collect();
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let cell = rng.random_range(4..12usize);
    let check_amp = rng.random_range(0.0..0.12);
    let (ct, st) = (theta.cos(), theta.sin());

    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let t = (((u - 0.5) * ct + (v - 0.5) * st) + 0.75) / 1.5;
            let check = if ((x / cell) + (y / cell)) % 2 == 0 {
                check_amp
            } else {
                -check_amp
            };
            for c in 0..3 {
                let mut value = c0[c] * (1.0 - t) + c1[c] * t + check;
                for (bc, bx, by, br) in &blobs {
                    let d2 = ((u - bx).powi(2) + (v - by).powi(2)) / (br * br);
                    value += 0.5 * (bc[c] - value) * (-d2).exp();
                }
                data[(c * h + y) * w + x] = value.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("shape matches buffer")
}

/// `count` synthetic pairs, ids `000`, `001`, …, each with its own clean scene
/// and rain seed derived from `seed`.
pub fn synthetic_corpus(
    count: usize,
    h: usize,
    w: usize,
    rain: &RainParams,
    seed: u64,
) -> Result<Vec<ImagePair>> {
    let digits = count.saturating_sub(1).to_string().len().max(3);
    (0..count)
        .map(|i| {
            let clean = procedural_clean(h, w, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let p = RainParams {
                seed: seed.wrapping_mul(7_919).wrapping_add(i as u64 + 1),
                ..rain.clone()
            };
            synthesize_rain(format!("{i:0digits$}"), &clean, &p)
        })
        .collect()
}

/// Filename prefixes dropped when deriving an image id, longest first.
pub const ID_PREFIXES: [&str; 4] = ["derained", "norain", "rainy", "rain"];

/// Image id for a file stem: `rain-001`, `norain_001` and `001` all give `001`.
pub fn image_id(stem: &str) -> &str {
    for prefix in ID_PREFIXES {
        for sep in ['-', '_'] {
            if let Some(rest) = stem.strip_prefix(prefix).and_then(|s| s.strip_prefix(sep)) {
                if !rest.is_empty() {
                    return rest;
                }
            }
        }
    }
    stem
}

/// PNG/PPM files directly inside `dir`, keyed by [`image_id`].
pub fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || ImageKind::from_path(&path).is_none() {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if stem.starts_with('.') {
            continue;
        }
        let id = image_id(stem).to_string();
        if let Some(previous) = out.insert(id.clone(), path.clone()) {
            return Err(Error::Data(format!(
                "duplicate image id `{id}`: {} and {}",
                previous.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

/// Reads `<root>/rain` and `<root>/norain`, pairing files by stem after
/// dropping a leading `rain-` / `norain-` (or `_`) prefix. Pairs are sorted by id.
pub fn load_corpus(root: &Path) -> Result<Vec<ImagePair>> {
    let rain = list_images(&root.join(RAIN_DIR))?;
    let clean = list_images(&root.join(CLEAN_DIR))?;
    if let Some((_, path)) = rain.iter().find(|(id, _)| !clean.contains_key(*id)) {
        return Err(Error::Data(format!(
            "orphan rainy image without clean match: {}",
            path.display()
        )));
    }
    if let Some((_, path)) = clean.iter().find(|(id, _)| !rain.contains_key(*id)) {
        return Err(Error::Data(format!(
            "orphan clean image without rainy match: {}",
            path.display()
        )));
    }
    rain.into_iter()
        .map(|(id, rp)| {
            let cp = &clean[&id];
            let pair = ImagePair::new(id, read_image(&rp)?, read_image(cp)?);
            pair.map_err(|e| Error::Data(format!("{} / {}: {e}", rp.display(), cp.display())))
        })
        .collect()
}

/// Writes pairs as `<root>/rain/rain-<id>.<ext>` and `<root>/norain/norain-<id>.<ext>`.
pub fn save_corpus(root: &Path, pairs: &[ImagePair], ext: &str) -> Result<()> {
    for dir in [RAIN_DIR, CLEAN_DIR] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for p in pairs {
        write_image(
            &root.join(RAIN_DIR).join(format!("rain-{}.{ext}", p.id)),
            &p.rainy,
        )?;
        write_image(
            &root.join(CLEAN_DIR).join(format!("norain-{}.{ext}", p.id)),
            &p.clean,
        )?;
    }
    Ok(())
}

pub fn crop_at(image: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (h, w) = image_dims(image, "crop_at")?;
    if top + size > h || left + size > w {
        return Err(Error::InvalidShape {
            op: "crop_at",
            shape: image.shape().to_vec(),
            reason: format!("{size}×{size} window at ({top}, {left}) leaves the image"),
        });
    }
    let src = image.data();
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in top..top + size {
            let row = (c * h + y) * w;
            out.extend_from_slice(&src[row + left..row + left + size]);
        }
    }
    Tensor::from_vec(&[3, size, size], out)
}

pub fn hflip(image: &Tensor) -> Result<Tensor> {
    let (_, w) = image_dims(image, "hflip")?;
    let mut out = image.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

/// Top-left, top-right, bottom-left, bottom-right and centre windows of side
/// `crop`, each with and without a horizontal flip: ten pairs.
pub fn augment(pair: &ImagePair, crop: usize) -> Result<Vec<ImagePair>> {
    let (h, w) = (pair.height(), pair.width());
    if crop == 0 || crop > h.min(w) {
        return Err(Error::Data(format!(
            "crop {crop} must be between 1 and the smaller image side {} for `{}`",
            h.min(w),
            pair.id
        )));
    }
    if crop % SPATIAL_MULTIPLE != 0 {
        return Err(Error::Data(format!(
            "crop {crop} must be divisible by {SPATIAL_MULTIPLE}"
        )));
    }
    let origins = [
        (0, 0),
        (0, w - crop),
        (h - crop, 0),
        (h - crop, w - crop),
        ((h - crop) / 2, (w - crop) / 2),
    ];
    let mut out = Vec::with_capacity(10);
    for (k, &(top, left)) in origins.iter().enumerate() {
        let rainy = crop_at(&pair.rainy, top, left, crop)?;
        let clean = crop_at(&pair.clean, top, left, crop)?;
        let flipped = ImagePair::new(format!("{}_c{k}f", pair.id), hflip(&rainy)?, hflip(&clean)?)?;
        out.push(ImagePair::new(format!("{}_c{k}", pair.id), rainy, clean)?);
        out.push(flipped);
    }
    Ok(out)
}

pub fn augment_all(pairs: &[ImagePair], crop: usize) -> Result<Vec<ImagePair>> {
    let mut out = Vec::with_capacity(pairs.len() * 10);
    for p in pairs {
        out.extend(augment(p, crop)?);
    }
    Ok(out)
}

/// Stacks the selected pairs into `([N,3,H,W] rainy, [N,3,H,W] clean)`.
pub fn batch(pairs: &[ImagePair], indices: &[usize]) -> Result<(Tensor, Tensor)> {
    let rainy: Vec<Tensor> = indices.iter().map(|&i| pairs[i].rainy.clone()).collect();
    let clean: Vec<Tensor> = indices.iter().map(|&i| pairs[i].clean.clone()).collect();
    Ok((Tensor::stack(&rainy)?, Tensor::stack(&clean)?))
}

//! Full-reference image quality: PSNR and SSIM, evaluated in `f64`.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::list_images;
use crate::error::{Error, Result};
use crate::image_io::read_image;
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair<T: Scalar>(op: &'static str, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if x.numel() == 0 {
        return Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "empty image".into(),
        });
    }
    Ok(())
}

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_pair("mse", x, y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sum / x.numel() as f64)
}

/// `10·log10(max_val² / MSE)` over all channels jointly; `+∞` when the images match.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, max_val: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn planes<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            shape: x.shape().to_vec(),
            reason: "expected a single [C, H, W] image".into(),
        }),
    }
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5) and channels, for
/// images with dynamic range 1.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    Ok(ssim_components(x, y)?.0)
}

/// `(ssim, cs)`: the full index and its contrast-structure factor
/// `(2σxy + C2) / (σx² + σy² + C2)`, each averaged over windows and channels.
pub fn ssim_components<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, f64)> {
    check_pair("ssim", x, y)?;
    let (c, h, w) = planes("ssim", x)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            op: "ssim",
            shape: x.shape().to_vec(),
            reason: format!("image is {h}×{w}; SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW}"),
        });
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (xs, ys) = (x.to_f64_vec(), y.to_f64_vec());
    let plane = h * w;
    let (mut total, mut total_cs) = (0.0, 0.0);
    let mut count = 0usize;
    for ch in 0..c {
        let a = &xs[ch * plane..(ch + 1) * plane];
        let b = &ys[ch * plane..(ch + 1) * plane];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            a.iter().zip(b).map(|(p, q)| f(*p, *q)).collect()
        };
        let mu_a = filter_valid(a, h, w, &g);
        let mu_b = filter_valid(b, h, w, &g);
        let aa = filter_valid(&prod(&|p, _| p * p), h, w, &g);
        let bb = filter_valid(&prod(&|_, q| q * q), h, w, &g);
        let ab = filter_valid(&prod(&|p, q| p * q), h, w, &g);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            total += (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1) * cs;
            total_cs += cs;
        }
        count += mu_a.len();
    }
    Ok((total / count as f64, total_cs / count as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Sorted by id.
    pub rows: Vec<MetricRow>,
    /// Mean over finite PSNR rows; `None` when every row is infinite.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    pub inf_excluded: usize,
}

fn render(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".to_string()
    } else {
        format!("{v}")
    }
}

impl Evaluation {
    /// `id,psnr_db,ssim`, one row per image, then `#mean,…` and, when rows
    /// were left out of the PSNR mean, `#note,<k> inf excluded`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.id, render(r.psnr_db), render(r.ssim));
        }
        let mean_psnr = self.mean_psnr.map_or_else(|| "nan".to_string(), render);
        let _ = writeln!(out, "#mean,{mean_psnr},{}", render(self.mean_ssim));
        if self.inf_excluded > 0 {
            let _ = writeln!(out, "#note,{} inf excluded", self.inf_excluded);
        }
        out
    }
}

/// Per-image PSNR/SSIM for `(id, restored, truth)` triples plus their means.
pub fn evaluate_corpus(pairs: &[(String, Tensor, Tensor)]) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut rows = pairs
        .iter()
        .map(|(id, restored, truth)| {
            Ok(MetricRow {
                id: id.clone(),
                psnr_db: psnr(restored, truth, 1.0)?,
                ssim: ssim(restored, truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let finite: Vec<f64> = rows
        .iter()
        .map(|r| r.psnr_db)
        .filter(|p| p.is_finite())
        .collect();
    let mean_psnr = (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
    Ok(Evaluation {
        inf_excluded: rows.len() - finite.len(),
        rows,
        mean_psnr,
        mean_ssim,
    })
}

/// Pairs every image in `restored` with the same id in `truth` and evaluates.
pub fn evaluate_dirs(restored: &Path, truth: &Path) -> Result<Evaluation> {
    let outputs = list_images(restored)?;
    let references = list_images(truth)?;
    let mut triples = Vec::with_capacity(outputs.len());
    for (id, path) in outputs {
        let reference = references
            .get(&id)
            .ok_or_else(|| Error::Data(format!("no ground truth for {}", path.display())))?;
        triples.push((id, read_image(&path)?, read_image(reference)?));
    }
    evaluate_corpus(&triples)
}

//! Full-reference quality metrics on the 8-bit scale.
//!
//! SSIM follows the classical single-scale definition: 11×11 Gaussian window
//! (σ = 1.5), `C1 = (0.01·255)²`, `C2 = (0.03·255)²`, computed on BT.601
//! luma and averaged over window positions fully inside the image. Note this
//! is deliberately not the training SSIM in [`crate::loss`].

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::{read_rgb8, DatasetManifest, Rgb8Image};
use crate::loss::GRAY_WEIGHTS;

pub const PEAK: f64 = 255.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(a: &Rgb8Image, b: &Rgb8Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::dim(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared difference over all pixels and channels.
pub fn mse_metric(a: &Rgb8Image, b: &Rgb8Image) -> Result<f64> {
    check_dims(a, b)?;
    let sum: u64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    Ok(sum as f64 / a.data.len() as f64)
}

/// `10·log10(255² / mse)`; `+∞` when `mse == 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (PEAK * PEAK / mse).log10()
    }
}

pub fn psnr_metric(a: &Rgb8Image, b: &Rgb8Image) -> Result<f64> {
    Ok(psnr_from_mse(mse_metric(a, b)?))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable weighted sums over every fully-contained window.
fn filter_valid(values: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (vh, vw) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * vw];
    for y in 0..h {
        let src = &values[y * w..(y + 1) * w];
        for x in 0..vw {
            rows[y * vw + x] = src[x..x + k].iter().zip(win).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            out[y * vw + x] = win
                .iter()
                .enumerate()
                .map(|(i, wt)| wt * rows[(y + i) * vw + x])
                .sum();
        }
    }
    out
}

fn luma(img: &Rgb8Image) -> Vec<f64> {
    let [wr, wg, wb] = GRAY_WEIGHTS;
    img.data
        .chunks_exact(3)
        .map(|p| wr * p[0] as f64 + wg * p[1] as f64 + wb * p[2] as f64)
        .collect()
}

/// Mean SSIM of two single-channel images on the 0–255 scale.
pub fn ssim_gray(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != width * height {
        return Err(Error::dim("luma buffers do not match the stated size"));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {width}x{height}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let ma = filter_valid(a, height, width, &win);
    let mb = filter_valid(b, height, width, &win);
    let saa = filter_valid(&aa, height, width, &win);
    let sbb = filter_valid(&bb, height, width, &win);
    let sab = filter_valid(&ab, height, width, &win);
    let total: f64 = (0..ma.len())
        .map(|i| {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / ma.len() as f64)
}

pub fn ssim_metric(a: &Rgb8Image, b: &Rgb8Image) -> Result<f64> {
    check_dims(a, b)?;
    ssim_gray(&luma(a), &luma(b), a.width, a.height)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairMetrics {
    pub path: String,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-pair metrics and their arithmetic means (PSNR is averaged per image,
/// not recomputed from the mean MSE).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<PairMetrics>,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub fn from_pairs(per_image: Vec<PairMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean = |f: fn(&PairMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        MetricReport {
            mse: mean(|p| p.mse),
            psnr: mean(|p| p.psnr),
            ssim: mean(|p| p.ssim),
            per_image,
        }
    }

    /// `path<TAB>mse<TAB>psnr<TAB>ssim` per pair, then a `MEAN` line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.per_image {
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                p.path,
                fmt_value(p.mse),
                fmt_value(p.psnr),
                fmt_value(p.ssim)
            )
            .unwrap();
        }
        writeln!(
            out,
            "MEAN\t{}\t{}\t{}",
            fmt_value(self.mse),
            fmt_value(self.psnr),
            fmt_value(self.ssim)
        )
        .unwrap();
        out
    }
}

/// Scores `enhanced_dir/<file name of each degraded path>` against the
/// manifest's ground truth.
pub fn evaluate_pairs(manifest: &DatasetManifest, enhanced_dir: &Path) -> Result<MetricReport> {
    let jobs: Vec<(String, std::path::PathBuf, std::path::PathBuf)> = manifest
        .entries()
        .iter()
        .map(|e| {
            let name = Path::new(&e.first)
                .file_name()
                .map(|n| n.to_os_string())
                .unwrap_or_else(|| e.first.clone().into());
            (
                e.first.clone(),
                enhanced_dir.join(name),
                manifest.resolve(&e.second),
            )
        })
        .collect();
    let missing: Vec<String> = jobs
        .iter()
        .flat_map(|(_, enh, gt)| [enh, gt])
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::io(
            enhanced_dir,
            std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} missing file(s): {}", missing.len(), missing.join(", ")),
            ),
        ));
    }
    let per_image = jobs
        .par_iter()
        .map(|(name, enh, gt)| {
            let a = read_rgb8(enh)?;
            let b = read_rgb8(gt)?;
            let mse = mse_metric(&a, &b)?;
            Ok(PairMetrics {
                path: name.clone(),
                mse,
                psnr: psnr_from_mse(mse),
                ssim: ssim_metric(&a, &b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_pairs(per_image))
}

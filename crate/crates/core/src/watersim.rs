//! Underwater image formation.
//!
//! A clean scene `I` at depth `d(x)` seen through water is modelled per
//! colour channel as
//!
//! ```text
//! U(x) = I(x) · T(x) + B · (1 − T(x)),     T(x) = N ^ d(x)
//! ```
//!
//! where `N` is the fraction of light energy left after one metre of travel
//! (the Jerlov residual-energy ratio of the water type) and `B` is a
//! homogeneous background light. Forward scattering is not modelled.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::{self, DatasetManifest, ManifestEntry, SynthesisRecord};
use crate::tensor::Tensor;

/// Jerlov water types: I, IA, IB, II, III (open ocean, clearest to most
/// turbid) and 1, 3, 5, 7, 9 (coastal, clearest to most turbid).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WaterType {
    I,
    IA,
    IB,
    II,
    III,
    Coastal1,
    Coastal3,
    Coastal5,
    Coastal7,
    Coastal9,
}

/// Per-metre residual energy ratios, `(red, green, blue)`.
const RESIDUAL_ENERGY: [(WaterType, &str, [f64; 3]); 10] = [
    (WaterType::I, "I", [0.805, 0.961, 0.982]),
    (WaterType::IA, "IA", [0.804, 0.955, 0.975]),
    (WaterType::IB, "IB", [0.83, 0.95, 0.968]),
    (WaterType::II, "II", [0.8, 0.925, 0.94]),
    (WaterType::III, "III", [0.75, 0.885, 0.89]),
    (WaterType::Coastal1, "1", [0.75, 0.885, 0.875]),
    (WaterType::Coastal3, "3", [0.71, 0.82, 0.8]),
    (WaterType::Coastal5, "5", [0.67, 0.73, 0.67]),
    (WaterType::Coastal7, "7", [0.62, 0.61, 0.5]),
    (WaterType::Coastal9, "9", [0.55, 0.46, 0.29]),
];

impl WaterType {
    pub const ALL: [WaterType; 10] = [
        WaterType::I,
        WaterType::IA,
        WaterType::IB,
        WaterType::II,
        WaterType::III,
        WaterType::Coastal1,
        WaterType::Coastal3,
        WaterType::Coastal5,
        WaterType::Coastal7,
        WaterType::Coastal9,
    ];

    fn entry(self) -> &'static (WaterType, &'static str, [f64; 3]) {
        RESIDUAL_ENERGY
            .iter()
            .find(|e| e.0 == self)
            .expect("every water type has a table row")
    }

    pub fn name(self) -> &'static str {
        self.entry().1
    }

    /// Residual energy ratio per metre, `[red, green, blue]`.
    pub fn residual_energy(self) -> [f64; 3] {
        self.entry().2
    }

    /// Attenuation coefficients `β` with `N = 10^(−β)`.
    pub fn attenuation(self) -> [f64; 3] {
        self.residual_energy().map(|n| -n.log10())
    }

    pub fn valid_names() -> Vec<&'static str> {
        RESIDUAL_ENERGY.iter().map(|e| e.1).collect()
    }
}

impl fmt::Display for WaterType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WaterType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let s = s
            .strip_prefix("Type-")
            .or_else(|| s.strip_prefix("type-"))
            .unwrap_or(s);
        RESIDUAL_ENERGY
            .iter()
            .find(|e| e.1.eq_ignore_ascii_case(s))
            .map(|e| e.0)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown water type {s:?}; valid types are {}",
                    WaterType::valid_names().join(", ")
                ))
            })
    }
}

pub const DEPTH_MIN: f64 = 0.5;
pub const DEPTH_MAX_LIMIT: f64 = 15.0;
/// Lower end of the per-variant random maximum depth.
pub const DEPTH_MAX_SAMPLE_LO: f64 = 3.0;
pub const BACKGROUND_LO: f64 = 0.8;
pub const BACKGROUND_HI: f64 = 1.0;

/// Parameters of one synthesized variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisParams {
    /// Background light `B`, `[red, green, blue]`, each in (0.8, 1.0).
    pub background: [f64; 3],
    pub depth_min: f64,
    pub depth_max: f64,
    pub water_type: WaterType,
    pub seed: u64,
}

impl SynthesisParams {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self
            .background
            .iter()
            .find(|&&b| !(b > BACKGROUND_LO && b < BACKGROUND_HI))
        {
            return Err(Error::Config(format!(
                "background light {b} outside (0.8, 1.0)"
            )));
        }
        if !(DEPTH_MIN <= self.depth_min
            && self.depth_min < self.depth_max
            && self.depth_max <= DEPTH_MAX_LIMIT)
        {
            return Err(Error::Config(format!(
                "depth range [{}, {}] must satisfy 0.5 <= min < max <= 15",
                self.depth_min, self.depth_max
            )));
        }
        Ok(())
    }

    /// Draws parameters from a ChaCha stream seeded with `seed`.
    pub fn sample(seed: u64, water_type: WaterType) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SynthesisParams {
            seed,
            ..sample_params(&mut rng, water_type)
        }
    }

    pub fn record(&self) -> SynthesisRecord {
        SynthesisRecord {
            water_type: self.water_type,
            background: self.background,
            depth_max: self.depth_max,
            seed: self.seed,
        }
    }
}

/// `B_c ~ U(0.8, 1.0)` independently per channel, `depth_max ~ U(3, 15)`.
/// The returned `seed` field is zero; callers that derive the stream from a
/// seed record it themselves.
pub fn sample_params<R: Rng + ?Sized>(rng: &mut R, water_type: WaterType) -> SynthesisParams {
    let mut background = [0.0; 3];
    for b in &mut background {
        // Open interval: reject the (measure-zero) lower endpoint.
        *b = loop {
            let v = rng.random_range(BACKGROUND_LO..BACKGROUND_HI);
            if v > BACKGROUND_LO {
                break v;
            }
        };
    }
    let depth_max = rng.random_range(DEPTH_MAX_SAMPLE_LO..=DEPTH_MAX_LIMIT);
    SynthesisParams {
        background,
        depth_min: DEPTH_MIN,
        depth_max,
        water_type,
        seed: 0,
    }
}

fn require_single_channel(t: &Tensor, what: &str) -> Result<()> {
    if t.channels() != 1 {
        return Err(Error::dim(format!(
            "{what} must be single-channel, got {} channels",
            t.channels()
        )));
    }
    Ok(())
}

/// `T_c(x) = N_c ^ d(x)` for depths in metres.
pub fn transmission(water_type: WaterType, depth: &Tensor) -> Result<Tensor> {
    require_single_channel(depth, "depth map")?;
    if let Some(d) = depth.data().iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
        return Err(Error::Domain(format!(
            "depth must be finite and non-negative, got {d}"
        )));
    }
    let n = water_type.residual_energy();
    let data = depth
        .data()
        .iter()
        .flat_map(|&d| n.map(|nc| nc.powf(d)))
        .collect();
    Tensor::from_vec(depth.height(), depth.width(), 3, data)
}

/// Applies the formation model to a clean `[0, 1]` image.
pub fn synthesize(clean: &Tensor, depth: &Tensor, params: &SynthesisParams) -> Result<Tensor> {
    if clean.channels() != 3 {
        return Err(Error::dim(format!(
            "clean image must have 3 channels, got {}",
            clean.channels()
        )));
    }
    if (clean.height(), clean.width()) != (depth.height(), depth.width()) {
        return Err(Error::dim(format!(
            "clean image is {}x{}, depth map is {}x{}",
            clean.height(),
            clean.width(),
            depth.height(),
            depth.width()
        )));
    }
    let t = transmission(params.water_type, depth)?;
    let b = params.background;
    let data = clean
        .data()
        .chunks_exact(3)
        .zip(t.data().chunks_exact(3))
        .flat_map(|(px, tx)| [0, 1, 2].map(|c| px[c] * tx[c] + b[c] * (1.0 - tx[c])))
        .collect();
    Ok(clean.with_data(data))
}

/// Maps a normalized `[0, 1]` depth map onto `[depth_min, depth_max]` metres.
pub fn scale_depth(normalized: &Tensor, params: &SynthesisParams) -> Result<Tensor> {
    require_single_channel(normalized, "depth map")?;
    if let Some(v) = normalized.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!(
            "normalized depth {v} outside [0, 1]"
        )));
    }
    let span = params.depth_max - params.depth_min;
    Ok(normalized.map(|v| params.depth_min + span * v))
}

/// Mixes the dataset seed with image and variant indices into an
/// independent stream seed (splitmix64 finalizer).
pub fn variant_seed(seed: u64, image_index: usize, variant_index: usize) -> u64 {
    let mut z = seed
        ^ (image_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (variant_index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub water_type: WaterType,
    pub variants_per_image: usize,
    pub seed: u64,
    /// Target `(width, height)`; `None` keeps the source resolution.
    pub resize: Option<(usize, usize)>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            water_type: WaterType::Coastal1,
            variants_per_image: 5,
            seed: 0,
            resize: Some((310, 230)),
        }
    }
}

fn file_stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string())
}

/// Synthesizes `variants_per_image` degraded images for every
/// `(clean, depth)` entry of `sources`, writing PNGs into `out_dir`.
///
/// Returns the paired manifest (paths relative to `out_dir`). Each input also
/// gets its (possibly resized) clean image written once as ground truth.
pub fn build_dataset(
    sources: &DatasetManifest,
    out_dir: &Path,
    options: &DatasetOptions,
) -> Result<DatasetManifest> {
    let mut out = DatasetManifest::new(out_dir);
    if options.variants_per_image == 0 || sources.entries().is_empty() {
        return Ok(out);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let type_name = options.water_type.name();

    let per_image: Vec<Vec<ManifestEntry>> = sources
        .entries()
        .par_iter()
        .enumerate()
        .map(|(i, entry)| -> Result<Vec<ManifestEntry>> {
            let clean_path = sources.resolve(&entry.first);
            let depth_path = sources.resolve(&entry.second);
            let mut clean = imageio::read_image(&clean_path)?;
            let mut depth = imageio::read_depth(&depth_path)?.depth;
            if let Some((w, h)) = options.resize {
                clean = clean.resize_bilinear(h, w)?;
                depth = depth.resize_bilinear(h, w)?.map(|v| v.clamp(0.0, 1.0));
            }
            if (clean.height(), clean.width()) != (depth.height(), depth.width()) {
                return Err(Error::dim(format!(
                    "{}: image is {}x{} but depth map {} is {}x{}",
                    clean_path.display(),
                    clean.height(),
                    clean.width(),
                    depth_path.display(),
                    depth.height(),
                    depth.width()
                )));
            }
            let stem = format!("{i:05}_{}", file_stem(&entry.first));
            let gt_name = format!("{stem}_gt.png");
            imageio::write_image(&clean, out_dir.join(&gt_name))?;

            (0..options.variants_per_image)
                .map(|v| {
                    let params = SynthesisParams::sample(
                        variant_seed(options.seed, i, v),
                        options.water_type,
                    );
                    let metres = scale_depth(&depth, &params)?;
                    let degraded = synthesize(&clean, &metres, &params)?;
                    let name = format!("{stem}_{type_name}_{v}.png");
                    imageio::write_image(&degraded, out_dir.join(&name))?;
                    Ok(ManifestEntry {
                        first: name,
                        second: gt_name.clone(),
                        synthesis: Some(params.record()),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    for entries in per_image {
        for e in entries {
            out.push(e)?;
        }
    }
    Ok(out)
}

/// Manifest path conventionally written next to a synthesized dataset.
pub fn dataset_manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.tsv")
}

//! HSI colour space and the saturation/intensity range stretch applied
//! after enhancement.
//!
//! Conversion formulas (all channels in `[0, 1]`):
//!
//! ```text
//! I = (R + G + B) / 3
//! S = 1 − min(R, G, B) / I                     (0 when R = G = B)
//! θ = arccos( ½((R−G) + (R−B)) / √((R−G)² + (R−B)(G−B)) )
//! H = θ if B ≤ G, else 2π − θ                  (undefined when R = G = B)
//! ```
//!
//! The inverse works per 120° sector; in the first sector
//! `B = I(1−S)`, `R = I(1 + S·cos H / cos(60° − H))`, `G = 3I − R − B`, and the
//! other two sectors rotate the channel roles.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Each tail may discard fewer than this fraction of pixels.
pub const FREQUENCY_THRESHOLD: f64 = 0.002;
const DEGENERATE_SPAN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct HsiImage {
    pub height: usize,
    pub width: usize,
    /// Radians in `[0, 2π)`; `None` for achromatic pixels.
    pub hue: Vec<Option<f64>>,
    pub saturation: Vec<f64>,
    pub intensity: Vec<f64>,
}

// Sector boundaries at 120° and 240°, expressed through the same arccos the
// forward transform uses so primaries land exactly on them.
fn sector_2_start() -> f64 {
    (-0.5f64).acos()
}

fn sector_3_start() -> f64 {
    2.0 * PI - (-0.5f64).acos()
}

pub fn rgb_pixel_to_hsi(r: f64, g: f64, b: f64) -> (Option<f64>, f64, f64) {
    let sum = r + g + b;
    let i = sum / 3.0;
    let min = r.min(g).min(b);
    let max = r.max(g).max(b);
    if max == min || i <= 0.0 {
        return (None, 0.0, i);
    }
    let s = (1.0 - min / i).clamp(0.0, 1.0);
    let num = 0.5 * ((r - g) + (r - b));
    let den = ((r - g) * (r - g) + (r - b) * (g - b)).sqrt();
    if den <= 0.0 {
        return (None, s, i);
    }
    let theta = (num / den).clamp(-1.0, 1.0).acos();
    let mut h = if b <= g { theta } else { 2.0 * PI - theta };
    if h >= 2.0 * PI {
        h = 0.0;
    }
    (Some(h), s, i)
}

/// `cos H / cos(60° − H)` written so that `H = 0` gives exactly 2.
fn sector_ratio(h: f64) -> f64 {
    let (sin, cos) = h.sin_cos();
    cos / (0.5 * cos + 0.75f64.sqrt() * sin)
}

pub fn hsi_pixel_to_rgb(h: Option<f64>, s: f64, i: f64) -> Result<[f64; 3]> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&i) {
        return Err(Error::Domain(format!(
            "saturation {s} / intensity {i} outside [0, 1]"
        )));
    }
    let Some(h) = h else {
        return Ok([i; 3]);
    };
    if s == 0.0 {
        return Ok([i; 3]);
    }
    if !(h.is_finite() && (0.0..2.0 * PI).contains(&h)) {
        return Err(Error::Domain(format!("hue {h} is not in [0, 2π)")));
    }
    let (s2, s3) = (sector_2_start(), sector_3_start());
    let low = i * (1.0 - s);
    let rgb = if h < s2 {
        let r = i * (1.0 + s * sector_ratio(h));
        [r, 3.0 * i - (r + low), low]
    } else if h < s3 {
        let g = i * (1.0 + s * sector_ratio(h - s2));
        [low, g, 3.0 * i - (low + g)]
    } else {
        let b = i * (1.0 + s * sector_ratio(h - s3));
        [3.0 * i - (low + b), low, b]
    };
    Ok(rgb.map(|v| v.clamp(0.0, 1.0)))
}

pub fn rgb_to_hsi(image: &Tensor) -> Result<HsiImage> {
    if image.channels() != 3 {
        return Err(Error::dim(format!(
            "rgb_to_hsi expects 3 channels, got {}",
            image.channels()
        )));
    }
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("RGB value {v} outside [0, 1]")));
    }
    let n = image.height() * image.width();
    let mut out = HsiImage {
        height: image.height(),
        width: image.width(),
        hue: Vec::with_capacity(n),
        saturation: Vec::with_capacity(n),
        intensity: Vec::with_capacity(n),
    };
    for px in image.data().chunks_exact(3) {
        let (h, s, i) = rgb_pixel_to_hsi(px[0], px[1], px[2]);
        out.hue.push(h);
        out.saturation.push(s);
        out.intensity.push(i);
    }
    Ok(out)
}

pub fn hsi_to_rgb(hsi: &HsiImage) -> Result<Tensor> {
    let n = hsi.height * hsi.width;
    if hsi.hue.len() != n || hsi.saturation.len() != n || hsi.intensity.len() != n {
        return Err(Error::dim("HSI planes do not match the image size"));
    }
    let mut data = Vec::with_capacity(n * 3);
    for k in 0..n {
        data.extend(hsi_pixel_to_rgb(
            hsi.hue[k],
            hsi.saturation[k],
            hsi.intensity[k],
        )?);
    }
    Tensor::from_vec(hsi.height, hsi.width, 3, data)
}

/// Robust `(y_min, y_max)` of a `[0, 1]` channel.
///
/// Each tail drops the largest number of pixels `k` that is still below
/// `threshold · N`, so `y_min` is the `k`-th smallest value and `y_max` the
/// `k`-th largest. Ranks are exact rather than binned: after a stretch at
/// least `k + 1` pixels sit on each end of `[0, 1]`, which makes a second
/// stretch the identity. If the tails would cover the whole channel the raw
/// extremes are returned.
pub fn robust_min_max(channel: &[f64], threshold: f64) -> Result<(f64, f64)> {
    if channel.is_empty() {
        return Err(Error::Domain("robust_min_max of an empty channel".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Domain(format!(
            "frequency threshold {threshold} outside [0, 1]"
        )));
    }
    if let Some(v) = channel.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite channel value {v}")));
    }
    let n = channel.len();
    let k = ((threshold * n as f64).ceil() as usize).saturating_sub(1);
    let mut sorted = channel.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    if 2 * k >= n {
        return Ok((sorted[0], sorted[n - 1]));
    }
    Ok((sorted[k], sorted[n - 1 - k]))
}

/// `(y − y_min) / (y_max − y_min)` clamped to `[0, 1]`; returns the channel
/// unchanged when the range is degenerate.
pub fn normalize_channel(channel: &[f64], y_min: f64, y_max: f64) -> Result<Vec<f64>> {
    if y_min > y_max {
        return Err(Error::Domain(format!("y_min {y_min} > y_max {y_max}")));
    }
    let span = y_max - y_min;
    if span < DEGENERATE_SPAN {
        return Ok(channel.to_vec());
    }
    Ok(channel
        .iter()
        .map(|&y| ((y - y_min) / span).clamp(0.0, 1.0))
        .collect())
}

/// Maps a stretched `(S, I)` at hue `h` back into the RGB cube.
///
/// At fixed hue RGB is affine in `(I, c)` with chroma `c = I·S`, and the
/// only face that can be crossed is `max(R, G, B) = 1`. Out-of-gamut points
/// are projected onto that face along lines through the corner
/// `(I, S) = (1, 1)`. Hue is unchanged, a pixel stretched to `I = 1` lands on
/// white and one stretched to `S = 1` keeps full saturation. A pixel at both
/// extremes becomes white.
fn project_into_gamut(h: f64, s: f64, i: f64) -> (f64, f64) {
    let Some(unit) = hsi_pixel_to_rgb_unclamped(h, 1.0, 1.0) else {
        return (s, i);
    };
    // Max channel is i + c·m on this hue.
    let m = unit.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - 1.0;
    let c = i * s;
    if i + c * m <= 1.0 {
        return (s, i);
    }
    let den = (1.0 - i) + m * (1.0 - c);
    if den <= 0.0 {
        return (0.0, 1.0);
    }
    let t = m / den;
    let (pi, pc) = (1.0 + t * (i - 1.0), 1.0 + t * (c - 1.0));
    ((pc / pi).clamp(0.0, 1.0), pi.clamp(0.0, 1.0))
}

fn hsi_pixel_to_rgb_unclamped(h: f64, s: f64, i: f64) -> Option<[f64; 3]> {
    if !(h.is_finite() && (0.0..2.0 * PI).contains(&h)) {
        return None;
    }
    let (s2, s3) = (sector_2_start(), sector_3_start());
    let low = i * (1.0 - s);
    Some(if h < s2 {
        let r = i * (1.0 + s * sector_ratio(h));
        [r, 3.0 * i - (r + low), low]
    } else if h < s3 {
        let g = i * (1.0 + s * sector_ratio(h - s2));
        [low, g, 3.0 * i - (low + g)]
    } else {
        let b = i * (1.0 + s * sector_ratio(h - s3));
        [3.0 * i - (low + b), low, b]
    })
}

/// Stretches saturation and intensity to `[0, 1]` with the robust extremes,
/// hue untouched.
pub fn stretch_hsi(hsi: &HsiImage, threshold: f64) -> Result<HsiImage> {
    let (s_min, s_max) = robust_min_max(&hsi.saturation, threshold)?;
    let (i_min, i_max) = robust_min_max(&hsi.intensity, threshold)?;
    Ok(HsiImage {
        height: hsi.height,
        width: hsi.width,
        hue: hsi.hue.clone(),
        saturation: normalize_channel(&hsi.saturation, s_min, s_max)?,
        intensity: normalize_channel(&hsi.intensity, i_min, i_max)?,
    })
}

/// Range-normalizes saturation and intensity in HSI space and converts back.
///
/// Stretched pixels that would leave the RGB cube go through
/// [`project_into_gamut`], so the final clamp never shifts hue and applying
/// the stretch twice changes nothing beyond round-off.
pub fn postprocess(image: &Tensor) -> Result<Tensor> {
    let hsi = rgb_to_hsi(image)?;
    let mut stretched = stretch_hsi(&hsi, FREQUENCY_THRESHOLD)?;
    for k in 0..stretched.saturation.len() {
        if let Some(h) = stretched.hue[k] {
            let (s, i) = project_into_gamut(h, stretched.saturation[k], stretched.intensity[k]);
            stretched.saturation[k] = s;
            stretched.intensity[k] = i;
        }
    }
    hsi_to_rgb(&stretched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn px(r: f64, g: f64, b: f64) -> Tensor {
        Tensor::from_vec(1, 1, 3, vec![r, g, b]).unwrap()
    }

    #[test]
    fn gray_and_red() {
        let h = rgb_to_hsi(&px(0.5, 0.5, 0.5)).unwrap();
        assert_eq!(
            (h.hue[0], h.saturation[0], h.intensity[0]),
            (None, 0.0, 0.5)
        );
        let h = rgb_to_hsi(&px(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(h.hue[0], Some(0.0));
        assert_eq!(h.saturation[0], 1.0);
        assert!((h.intensity[0] - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn primaries_round_trip_exactly() {
        for rgb in [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] {
            let t = px(rgb[0], rgb[1], rgb[2]);
            let back = hsi_to_rgb(&rgb_to_hsi(&t).unwrap()).unwrap();
            assert_eq!(back.data(), &rgb, "{rgb:?}");
        }
    }

    #[test]
    fn random_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::from_fn(40, 40, 3, |_, _, _| rng.random_range(0.0..=1.0));
        let back = hsi_to_rgb(&rgb_to_hsi(&t).unwrap()).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_saturation_is_gray() {
        assert_eq!(hsi_pixel_to_rgb(Some(1.0), 0.0, 0.3).unwrap(), [0.3; 3]);
        assert_eq!(hsi_pixel_to_rgb(None, 0.0, 0.7).unwrap(), [0.7; 3]);
    }

    #[test]
    fn reconstruction_stays_in_cube() {
        for si in 0..=10 {
            for ii in 0..=10 {
                for hk in 0..36 {
                    let h = hk as f64 * 2.0 * PI / 36.0;
                    let rgb =
                        hsi_pixel_to_rgb(Some(h), si as f64 / 10.0, ii as f64 / 10.0).unwrap();
                    assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)), "{rgb:?}");
                }
            }
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(
            hsi_pixel_to_rgb(Some(7.0), 0.5, 0.5),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            hsi_pixel_to_rgb(Some(f64::NAN), 0.5, 0.5),
            Err(Error::Domain(_))
        ));
        assert!(hsi_pixel_to_rgb(Some(1.0), 1.5, 0.5).is_err());
        assert!(matches!(
            rgb_to_hsi(&px(1.2, 0.0, 0.0)),
            Err(Error::Domain(_))
        ));
        assert!(matches!(robust_min_max(&[], 0.002), Err(Error::Domain(_))));
        assert!(matches!(
            normalize_channel(&[0.5], 0.6, 0.4),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn robust_extremes() {
        assert_eq!(robust_min_max(&[0.5; 100], 0.002).unwrap(), (0.5, 0.5));

        let mut ch = vec![0.5; 10_000];
        ch.push(1.0);
        let (lo, hi) = robust_min_max(&ch, 0.002).unwrap();
        assert_eq!((lo, hi), (0.5, 0.5));

        let ch = [0.1, 0.2, 0.2, 0.9];
        assert_eq!(robust_min_max(&ch, 0.0).unwrap(), (0.1, 0.9));
        assert_eq!(robust_min_max(&ch, 0.3).unwrap(), (0.2, 0.2));
        // Tails covering the whole channel fall back to the raw range.
        assert_eq!(robust_min_max(&ch, 0.6).unwrap(), (0.1, 0.9));

        // 0.2% of 1000 is 2 pixels; fewer than that means one per tail.
        let ramp: Vec<f64> = (0..1000).map(|k| k as f64 / 999.0).collect();
        let (lo, hi) = robust_min_max(&ramp, 0.002).unwrap();
        assert_eq!((lo, hi), (ramp[1], ramp[998]));
    }

    #[test]
    fn normalize_examples() {
        let out = normalize_channel(&[0.2, 0.4, 0.6], 0.2, 0.6).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[2], 1.0);
        assert!((out[1] - 0.5).abs() < 1e-15);
        assert_eq!(
            normalize_channel(&[0.3, 0.3], 0.3, 0.3).unwrap(),
            vec![0.3, 0.3]
        );
        let clamped = normalize_channel(&[0.0, 1.0], 0.2, 0.6).unwrap();
        assert_eq!(clamped, vec![0.0, 1.0]);
    }

    #[test]
    fn normalize_is_monotone() {
        let ys: Vec<f64> = (0..=100).map(|k| k as f64 / 100.0).collect();
        let out = normalize_channel(&ys, 0.23, 0.71).unwrap();
        assert!(out.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn full_range_image_is_a_fixed_point() {
        // Saturation and intensity both already span [0, 1] with their
        // extreme bins above the frequency threshold.
        let n = 256;
        let mut data = Vec::new();
        for _ in 0..3 {
            for k in 0..n {
                let v = k as f64 / (n - 1) as f64;
                data.extend([v, v, v]);
            }
        }
        for k in 0..n {
            let v = k as f64 / (n - 1) as f64;
            data.extend([v, 0.0, 0.0]);
        }
        let img = Tensor::from_vec(4, n, 3, data).unwrap();
        let out = postprocess(&img).unwrap();
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn gamut_projection_keeps_hue_and_the_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let h = rng.random_range(0.0..2.0 * PI);
            let (s, i) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
            let (ps, pi) = project_into_gamut(h, s, i);
            let rgb = hsi_pixel_to_rgb_unclamped(h, ps, pi).unwrap();
            assert!(rgb.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)), "{rgb:?}");
            if hsi_pixel_to_rgb_unclamped(h, s, i).unwrap().iter().all(|v| *v <= 1.0) {
                assert_eq!((ps, pi), (s, i));
            }
        }
        // Full saturation survives, brightness goes to white.
        let h = 1.0;
        assert_eq!(project_into_gamut(h, 1.0, 0.9).0, 1.0);
        let (s, i) = project_into_gamut(h, 0.4, 1.0);
        assert_eq!(i, 1.0);
        assert!(s < 1e-12);
        assert_eq!(project_into_gamut(h, 1.0, 1.0), (0.0, 1.0));
    }

    #[test]
    fn postprocess_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..32 * 32 * 3)
            .map(|_| 0.35 + 0.3 * rng.random::<f64>())
            .collect();
        let img = Tensor::from_vec(32, 32, 3, data).unwrap();
        let once = postprocess(&img).unwrap();
        let twice = postprocess(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let hsi = rgb_to_hsi(&once).unwrap();
        let top = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
        assert_eq!(top(&hsi.intensity), 1.0);
        assert!(top(&hsi.saturation) > 1.0 - 1e-12);
    }
}

//! Training objective: pixel-wise MSE plus a windowed-SSIM loss on
//! grayscale images, each with its analytic gradient.
//!
//! SSIM here uses a uniform 13×13 box window with population statistics and
//! constants `c1 = 0.02`, `c2 = 0.03` applied to `[0, 1]` images. Only window
//! positions that lie fully inside the image contribute. This is separate from
//! the evaluation SSIM in [`crate::quality`], which follows the Gaussian-window
//! convention.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 13;
pub const SSIM_C1: f64 = 0.02;
pub const SSIM_C2: f64 = 0.03;

/// BT.601 luma weights used for every grayscale conversion in the crate.
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub mse: f64,
    pub ssim_loss: f64,
    pub total: f64,
    pub grad: Tensor,
}

/// `(1/M) Σ (pred − target)²` over all `M = H·W·C` entries, and its gradient.
pub fn mse_loss(prediction: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    prediction.ensure_same_shape(target, "mse_loss")?;
    let m = prediction.len() as f64;
    let mut sum = 0.0;
    let grad = prediction
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            sum += d * d;
            2.0 * d / m
        })
        .collect();
    Ok((sum / m, prediction.with_data(grad)))
}

pub fn rgb_to_gray(image: &Tensor) -> Result<Tensor> {
    if image.channels() != 3 {
        return Err(Error::dim(format!(
            "rgb_to_gray expects 3 channels, got {}",
            image.channels()
        )));
    }
    let [wr, wg, wb] = GRAY_WEIGHTS;
    let data = image
        .data()
        .chunks_exact(3)
        .map(|px| wr * px[0] + wg * px[1] + wb * px[2])
        .collect();
    Tensor::from_vec(image.height(), image.width(), 1, data)
}

/// Adjoint of [`rgb_to_gray`].
pub fn rgb_to_gray_backward(grad_gray: &Tensor) -> Result<Tensor> {
    if grad_gray.channels() != 1 {
        return Err(Error::dim("gray cotangent must have 1 channel"));
    }
    let data = grad_gray
        .data()
        .iter()
        .flat_map(|&g| GRAY_WEIGHTS.map(|w| w * g))
        .collect();
    Tensor::from_vec(grad_gray.height(), grad_gray.width(), 3, data)
}

/// Sums over every fully-contained `k × k` window; output is `(h−k+1) × (w−k+1)`.
fn window_sums(values: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (vh, vw) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * vw];
    for y in 0..h {
        let src = &values[y * w..(y + 1) * w];
        for x in 0..vw {
            rows[y * vw + x] = src[x..x + k].iter().sum();
        }
    }
    let mut out = vec![0.0; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            out[y * vw + x] = (y..y + k).map(|r| rows[r * vw + x]).sum();
        }
    }
    out
}

/// Adjoint of [`window_sums`]: scatters each window value back over its
/// `k × k` footprint; output is `(vh+k−1) × (vw+k−1)`.
fn window_scatter(values: &[f64], vh: usize, vw: usize, k: usize) -> Vec<f64> {
    let (h, w) = (vh + k - 1, vw + k - 1);
    let mut cols = vec![0.0; h * vw];
    for y in 0..h {
        let lo = y.saturating_sub(k - 1);
        let hi = y.min(vh - 1);
        for x in 0..vw {
            cols[y * vw + x] = (lo..=hi).map(|r| values[r * vw + x]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let row = &cols[y * vw..(y + 1) * vw];
        for x in 0..w {
            let lo = x.saturating_sub(k - 1);
            let hi = x.min(vw - 1);
            out[y * w + x] = row[lo..=hi].iter().sum();
        }
    }
    out
}

/// Mean 13×13 SSIM between two single-channel images and its gradient with
/// respect to `pred`.
pub fn ssim_map(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.ensure_same_shape(target, "ssim_map")?;
    if pred.channels() != 1 {
        return Err(Error::dim("ssim_map expects single-channel images"));
    }
    let (h, w) = (pred.height(), pred.width());
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::dim(format!(
            "ssim_map needs at least {k}x{k} pixels, got {h}x{w}"
        )));
    }
    let x = pred.data();
    let y = target.data();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();

    let sx = window_sums(x, h, w, k);
    let sy = window_sums(y, h, w, k);
    let sxx = window_sums(&xx, h, w, k);
    let syy = window_sums(&yy, h, w, k);
    let sxy = window_sums(&xy, h, w, k);

    let n = (k * k) as f64;
    let (vh, vw) = (h + 1 - k, w + 1 - k);
    let valid = vh * vw;
    let mut alpha = vec![0.0; valid];
    let mut beta = vec![0.0; valid];
    let mut gamma = vec![0.0; valid];
    let mut total = 0.0;
    for i in 0..valid {
        let mx = sx[i] / n;
        let my = sy[i] / n;
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;

        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = mx * mx + my * my + SSIM_C1;
        let b1 = 2.0 * cxy + SSIM_C2;
        let b2 = vx + vy + SSIM_C2;
        let lum = a1 / a2;
        let cs = b1 / b2;
        total += lum * cs;

        let d_mx = (2.0 * my / a2 - a1 * 2.0 * mx / (a2 * a2)) * cs;
        let d_cxy = lum * 2.0 / b2;
        let d_vx = -lum * b1 / (b2 * b2);
        alpha[i] = d_mx - d_cxy * my - 2.0 * d_vx * mx;
        beta[i] = d_cxy;
        gamma[i] = 2.0 * d_vx;
    }
    let mean = total / valid as f64;

    let alpha = window_scatter(&alpha, vh, vw, k);
    let beta = window_scatter(&beta, vh, vw, k);
    let gamma = window_scatter(&gamma, vh, vw, k);
    let scale = 1.0 / (valid as f64 * n);
    let grad = (0..h * w)
        .map(|i| scale * (alpha[i] + beta[i] * y[i] + gamma[i] * x[i]))
        .collect();
    Ok((mean, pred.with_data(grad)))
}

/// `1 − meanSSIM(gray(pred), gray(target))` and its gradient w.r.t. `pred`.
pub fn ssim_loss(prediction: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    prediction.ensure_same_shape(target, "ssim_loss")?;
    let (mean, grad_gray) = ssim_map(&rgb_to_gray(prediction)?, &rgb_to_gray(target)?)?;
    let grad = rgb_to_gray_backward(&grad_gray.map(|g| -g))?;
    Ok((1.0 - mean, grad))
}

/// `L = L_mse + L_ssim` with the unweighted sum of both gradients.
pub fn total_loss(prediction: &Tensor, target: &Tensor) -> Result<LossReport> {
    objective(prediction, target, true)
}

/// Training objective. With `include_ssim == false` the SSIM term is still
/// reported (when the image is large enough) but contributes neither to
/// `total` nor to the gradient.
pub fn objective(prediction: &Tensor, target: &Tensor, include_ssim: bool) -> Result<LossReport> {
    let (mse, mut grad) = mse_loss(prediction, target)?;
    let big_enough = prediction.height() >= SSIM_WINDOW && prediction.width() >= SSIM_WINDOW;
    if include_ssim {
        let (ssim_loss, ssim_grad) = ssim_loss(prediction, target)?;
        for (g, s) in grad.data_mut().iter_mut().zip(ssim_grad.data()) {
            *g += s;
        }
        Ok(LossReport {
            mse,
            ssim_loss,
            total: mse + ssim_loss,
            grad,
        })
    } else {
        let ssim_loss = if big_enough {
            1.0 - ssim_map(&rgb_to_gray(prediction)?, &rgb_to_gray(target)?)?.0
        } else {
            0.0
        };
        Ok(LossReport {
            mse,
            ssim_loss,
            total: mse,
            grad,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradient_with, Stencil};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, h: usize, w: usize, c: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(h, w, c, |_, _, _| rng.random_range(0.0..1.0))
    }

    /// Direct per-pixel windowed statistics; shares nothing with `ssim_map`.
    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w) = (a.height(), a.width());
        let k = 13;
        let n = 169.0;
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let mut pa = Vec::new();
                let mut pb = Vec::new();
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        pa.push(a.get(y, x, 0));
                        pb.push(b.get(y, x, 0));
                    }
                }
                let ma = pa.iter().sum::<f64>() / n;
                let mb = pb.iter().sum::<f64>() / n;
                let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
                let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
                let cab = pa
                    .iter()
                    .zip(&pb)
                    .map(|(p, q)| (p - ma) * (q - mb))
                    .sum::<f64>()
                    / n;
                acc += (2.0 * ma * mb + 0.02) / (ma * ma + mb * mb + 0.02) * (2.0 * cab + 0.03)
                    / (va + vb + 0.03);
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn mse_values() {
        let t = random(1, 4, 5, 3);
        let (v, g) = mse_loss(&t, &t).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
        let shifted = t.map(|x| x + 0.1);
        let (v, _) = mse_loss(&shifted, &t).unwrap();
        assert!((v - 0.01).abs() < 1e-15);

        let p = random(2, 6, 7, 3);
        let q = random(3, 6, 7, 3);
        let mut brute = 0.0;
        for y in 0..6 {
            for x in 0..7 {
                for c in 0..3 {
                    brute += (p.get(y, x, c) - q.get(y, x, c)).powi(2);
                }
            }
        }
        let (v, _) = mse_loss(&p, &q).unwrap();
        assert!((v - brute / 126.0).abs() < 1e-12);
        assert!(mse_loss(&p, &t).is_err());
    }

    #[test]
    fn gray_conversion() {
        let white = Tensor::filled(1, 1, 3, 1.0);
        assert!((rgb_to_gray(&white).unwrap().get(0, 0, 0) - 1.0).abs() < 1e-15);
        let red = Tensor::from_vec(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(rgb_to_gray(&red).unwrap().get(0, 0, 0), 0.299);
        assert!(rgb_to_gray(&Tensor::zeros(2, 2, 1)).is_err());

        let g = rgb_to_gray_backward(&Tensor::filled(1, 1, 1, 2.0)).unwrap();
        assert_eq!(g.data(), &[0.598, 1.174, 0.228]);
    }

    #[test]
    fn gray_gradient_finite_difference() {
        let img = random(3, 3, 4, 3);
        let r = random(4, 3, 4, 1);
        let f = |t: &Tensor| -> f64 {
            rgb_to_gray(t)
                .unwrap()
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let g = rgb_to_gray_backward(&r).unwrap();
        let err = crate::tensor::finite_difference_check(f, &img, &g, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        for seed in 0..5 {
            let a = random(seed, 14 + seed as usize, 13 + 2 * seed as usize, 1);
            let (m, _) = ssim_map(&a, &a).unwrap();
            assert_eq!(m, 1.0);
        }
        let rgb = random(9, 16, 16, 3);
        assert_eq!(ssim_loss(&rgb, &rgb).unwrap().0, 0.0);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (a, b) = (0.3, 0.7);
        let ta = Tensor::filled(13, 13, 1, a);
        let tb = Tensor::filled(13, 13, 1, b);
        let (m, _) = ssim_map(&ta, &tb).unwrap();
        let expect = (2.0 * a * b + 0.02) / (a * a + b * b + 0.02);
        assert!((m - expect).abs() < 1e-10, "{m} vs {expect}");
        assert_eq!(ssim_map(&ta, &ta).unwrap().0, 1.0);
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        for seed in 0..3 {
            let a = random(10 + seed, 15, 15, 1);
            let b = random(20 + seed, 15, 15, 1);
            let (m, _) = ssim_map(&a, &b).unwrap();
            assert!((m - ssim_oracle(&a, &b)).abs() < 1e-10);
            let (m2, _) = ssim_map(&b, &a).unwrap();
            assert!((m - m2).abs() < 1e-12);
        }
    }

    #[test]
    fn ssim_too_small() {
        let a = Tensor::zeros(12, 20, 1);
        assert!(matches!(ssim_map(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn window_scatter_is_adjoint() {
        let (h, w, k) = (15, 17, 13);
        let a = random(30, h, w, 1);
        let v = random(31, h + 1 - k, w + 1 - k, 1);
        let lhs: f64 = window_sums(a.data(), h, w, k)
            .iter()
            .zip(v.data())
            .map(|(p, q)| p * q)
            .sum();
        let rhs: f64 = window_scatter(v.data(), h + 1 - k, w + 1 - k, k)
            .iter()
            .zip(a.data())
            .map(|(p, q)| p * q)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn ssim_map_gradient() {
        let a = random(40, 15, 15, 1);
        let b = random(41, 15, 15, 1);
        let (_, g) = ssim_map(&a, &b).unwrap();
        let err =
            crate::tensor::finite_difference_check(|t| ssim_map(t, &b).unwrap().0, &a, &g, 1e-6)
                .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn loss_gradients_on_random_instances() {
        for seed in 0..20 {
            let p = random(100 + seed, 14, 14, 3);
            let t = random(200 + seed, 14, 14, 3);
            let rep = total_loss(&p, &t).unwrap();
            let (mse, _) = mse_loss(&p, &t).unwrap();
            let (sl, _) = ssim_loss(&p, &t).unwrap();
            assert_eq!(rep.total, mse + sl);
            assert!((0.0..=2.0).contains(&sl));
            // Some components are ~1e-6; a two-point difference at 1e-6
            // resolves those only to ~1e-4 relative, so use the fourth-order stencil.
            let r = check_gradient_with(
                |v| Ok(Some(total_loss(&p.with_data(v.to_vec()), &t)?.total)),
                p.data(),
                rep.grad.data(),
                1e-3,
                None,
                Stencil::FivePoint,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-5, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn objective_without_ssim() {
        let p = random(50, 14, 14, 3);
        let t = random(51, 14, 14, 3);
        let rep = objective(&p, &t, false).unwrap();
        assert_eq!(rep.total, rep.mse);
        assert!(rep.ssim_loss > 0.0);
        assert_eq!(rep.grad, mse_loss(&p, &t).unwrap().1);
        // Small crops train fine without the SSIM term.
        let small = random(52, 8, 8, 3);
        let rep = objective(&small, &small, false).unwrap();
        assert_eq!(rep.total, 0.0);
    }

    #[test]
    fn identical_total_is_zero() {
        let p = random(60, 14, 14, 3);
        assert_eq!(total_loss(&p, &p).unwrap().total, 0.0);
    }
}

//! Property-based invariants over random shapes, images and parameters.

use std::path::Path;

use proptest::prelude::*;

use uwcnn::color;
use uwcnn::imageio::checkpoint::{decode_checkpoint, encode_checkpoint};
use uwcnn::imageio::{DatasetManifest, ManifestEntry, SynthesisRecord};
use uwcnn::loss;
use uwcnn::model::{Model, ModelConfig};
use uwcnn::quality;
use uwcnn::tensor::{concat_backward, concat_channels, conv2d_forward, ConvParams};
use uwcnn::watersim::{self, SynthesisParams, WaterType};
use uwcnn::Tensor;

fn tensor(h: usize, w: usize, c: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, h * w * c).prop_map(move |d| Tensor::from_vec(h, w, c, d).unwrap())
}

fn sized_image(max: usize, c: usize) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max).prop_flat_map(move |(h, w)| tensor(h, w, c, 0.0, 1.0))
}

fn water_type() -> impl Strategy<Value = WaterType> {
    prop::sample::select(WaterType::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_brute_force(
        (x, cin) in (1usize..=12, 1usize..=12, 1usize..=4)
            .prop_flat_map(|(h, w, c)| (tensor(h, w, c, -1.0, 1.0), Just(c))),
        cout in 1usize..=5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let kernel: Vec<f64> = (0..9 * cin * cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = ConvParams::new(cin, cout, kernel, bias).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        let (h, w, _) = x.shape();
        prop_assert_eq!(y.shape(), (h, w, cout));
        for yy in 0..h {
            for xx in 0..w {
                for co in 0..cout {
                    let mut s = p.bias()[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                s += x.get(sy as usize, sx as usize, ci) * p.kernel()[p.kernel_index(ky, kx, ci, co)];
                            }
                        }
                    }
                    prop_assert!((y.get(yy, xx, co) - s).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_split_round_trip_is_bitwise(
        (a, b) in (1usize..=6, 1usize..=6)
            .prop_flat_map(|(h, w)| (tensor(h, w, 2, -5.0, 5.0), tensor(h, w, 3, -5.0, 5.0))),
    ) {
        let joined = concat_channels(&[&a, &b]).unwrap();
        let parts = concat_backward(&joined, &[2, 3]).unwrap();
        prop_assert_eq!(&parts[0], &a);
        prop_assert_eq!(&parts[1], &b);
    }

    #[test]
    fn synthesis_stays_between_scene_and_background(
        (clean, depth) in (1usize..=10, 1usize..=10)
            .prop_flat_map(|(h, w)| (tensor(h, w, 3, 0.0, 1.0), tensor(h, w, 1, 0.0, 1.0))),
        water in water_type(),
        seed in any::<u64>(),
    ) {
        let params = SynthesisParams::sample(seed, water);
        params.validate().unwrap();
        let metres = watersim::scale_depth(&depth, &params).unwrap();
        let out = watersim::synthesize(&clean, &metres, &params).unwrap();
        for (k, v) in out.data().iter().enumerate() {
            let c = k % 3;
            let (i, b) = (clean.data()[k], params.background[c]);
            prop_assert!(*v >= i.min(b) - 1e-15 && *v <= i.max(b) + 1e-15);
        }
        let t = watersim::transmission(water, &metres).unwrap();
        prop_assert!(t.data().iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn deeper_water_is_closer_to_the_background(
        water in water_type(),
        d in 0.5f64..14.0,
        extra in 0.01f64..1.0,
        i in 0.0f64..1.0,
    ) {
        let params = SynthesisParams {
            background: [0.9, 0.9, 0.9],
            depth_min: 0.5,
            depth_max: 15.0,
            water_type: water,
            seed: 0,
        };
        let clean = Tensor::from_vec(1, 1, 3, vec![i; 3]).unwrap();
        let at = |m: f64| watersim::synthesize(&clean, &Tensor::from_vec(1, 1, 1, vec![m]).unwrap(), &params).unwrap();
        let (near, far) = (at(d), at(d + extra));
        for c in 0..3 {
            prop_assert!((far.get(0, 0, c) - 0.9).abs() <= (near.get(0, 0, c) - 0.9).abs() + 1e-15);
        }
    }

    #[test]
    fn variant_seeds_do_not_collide(seed in any::<u64>()) {
        let mut seen = std::collections::HashSet::new();
        for i in 0..20 {
            for v in 0..5 {
                prop_assert!(seen.insert(watersim::variant_seed(seed, i, v)));
            }
        }
    }

    #[test]
    fn training_ssim_is_bounded_and_reflexive(
        (a, b) in (13usize..=16, 13usize..=16)
            .prop_flat_map(|(h, w)| (tensor(h, w, 3, 0.0, 1.0), tensor(h, w, 3, 0.0, 1.0))),
    ) {
        let (l, _) = loss::ssim_loss(&a, &b).unwrap();
        prop_assert!((0.0..=2.0).contains(&l));
        let g = loss::rgb_to_gray(&a).unwrap();
        prop_assert_eq!(loss::ssim_map(&g, &g).unwrap().0, 1.0);
        let r = loss::objective(&a, &b, true).unwrap();
        prop_assert!((r.total - (r.mse + r.ssim_loss)).abs() < 1e-15);
        prop_assert!(r.mse >= 0.0);
    }

    #[test]
    fn quality_metrics_are_symmetric_and_bounded(
        (a, b) in (11usize..=14, 11usize..=14)
            .prop_flat_map(|(h, w)| (tensor(h, w, 3, 0.0, 1.0), tensor(h, w, 3, 0.0, 1.0))),
    ) {
        let (a, b) = (
            uwcnn::imageio::Rgb8Image::from_tensor(&a).unwrap(),
            uwcnn::imageio::Rgb8Image::from_tensor(&b).unwrap(),
        );
        let s = quality::ssim_metric(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - quality::ssim_metric(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(quality::mse_metric(&a, &b).unwrap(), quality::mse_metric(&b, &a).unwrap());
        prop_assert_eq!(quality::ssim_metric(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn psnr_decreases_with_mse(m in 1e-3f64..65025.0, k in 1.001f64..10.0) {
        prop_assert!(quality::psnr_from_mse(m * k) < quality::psnr_from_mse(m));
    }

    #[test]
    fn hsi_round_trip(img in sized_image(6, 3)) {
        let back = color::hsi_to_rgb(&color::rgb_to_hsi(&img).unwrap()).unwrap();
        for (x, y) in img.data().iter().zip(back.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_stays_in_unit_range_and_is_monotone(
        values in prop::collection::vec(0.0f64..1.0, 2..64),
        lo in 0.0f64..0.5,
        span in 0.01f64..0.5,
    ) {
        let out = color::normalize_channel(&values, lo, lo + span).unwrap();
        prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] <= values[j] {
                    prop_assert!(out[i] <= out[j]);
                }
            }
        }
    }

    #[test]
    fn postprocess_keeps_hue_and_range(img in sized_image(8, 3)) {
        let out = color::postprocess(&img).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (a, b) = (color::rgb_to_hsi(&img).unwrap(), color::rgb_to_hsi(&out).unwrap());
        for k in 0..a.hue.len() {
            if a.saturation[k] > 0.05 && b.saturation[k] > 0.05 {
                let (h0, h1) = (a.hue[k].unwrap(), b.hue[k].unwrap());
                let d = (h0 - h1).rem_euclid(std::f64::consts::TAU);
                prop_assert!(d.min(std::f64::consts::TAU - d) < 1e-6);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_preserves_shape_and_checkpoints_round_trip(
        img in sized_image(9, 3),
        seed in any::<u64>(),
        residual in any::<bool>(),
        dense in any::<bool>(),
    ) {
        let cfg = ModelConfig { seed, residual_learning: residual, dense_concat: dense, ..Default::default() };
        let model = Model::build(cfg.clone()).unwrap();
        let out = model.predict(&img).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        let bytes = encode_checkpoint(&model, "III").unwrap();
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.model.config(), &cfg);
        prop_assert_eq!(back.water_type_tag.as_str(), "III");
        let again = back.model.predict(&img).unwrap();
        for (x, y) in out.data().iter().zip(again.data()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
        // Any truncation is rejected.
        let cut = bytes.len() / 2;
        prop_assert!(decode_checkpoint(&bytes[..cut], Path::new("mem")).is_err());
    }

    #[test]
    fn manifest_text_round_trips(
        rows in prop::collection::vec((0usize..1000, water_type(), 0.8001f64..0.9999, 3.0f64..15.0, any::<u64>()), 1..8),
    ) {
        let mut m = DatasetManifest::new("/data");
        for (k, (i, wt, b, d, seed)) in rows.iter().enumerate() {
            m.push(ManifestEntry {
                first: format!("{i:05}_x_{}_{k}.png", wt.name()),
                second: format!("{i:05}_x_gt.png"),
                synthesis: Some(SynthesisRecord { water_type: *wt, background: [*b, *b * 0.99, *b], depth_max: *d, seed: *seed }),
            }).unwrap();
        }
        let text = m.to_text();
        let back = DatasetManifest::parse(&text, "/data", Path::new("mem")).unwrap();
        prop_assert_eq!(back.to_text(), text);
        prop_assert_eq!(back.entries(), m.entries());
    }
}

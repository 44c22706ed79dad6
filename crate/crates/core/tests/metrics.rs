mod common;

use common::{rng, texture, uniform};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use txsp_core::metrics::{
    crop_eval, frechet_distance, ssim, CropEvalOptions, EmbeddingSet, PixelEmbedder, Protocol,
    PyramidEmbedder, SsimConfig,
};
use txsp_core::Tensor;

/// Local SSIM from a direct 2-D window sum, mean over valid windows.
fn ssim_oracle(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let cfg = SsimConfig::default();
    let taps = cfg.taps();
    let [n, c, h, w] = a.dims();
    let k = cfg.window;
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let mut total = 0.0;
    for item in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for oy in 0..=h - k {
                for ox in 0..=w - k {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let g = taps[i] * taps[j];
                            let x = a.at(item, ch, oy + i, ox + j) as f64;
                            let y = b.at(item, ch, oy + i, ox + j) as f64;
                            mx += g * x;
                            my += g * y;
                            xx += g * x * x;
                            yy += g * y * y;
                            xy += g * x * y;
                        }
                    }
                    let (sx, sy, sxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    acc += (2.0 * mx * my + c1) * (2.0 * sxy + c2)
                        / ((mx * mx + my * my + c1) * (sx + sy + c2));
                }
            }
            total += acc / ((h - k + 1) * (w - k + 1)) as f64;
        }
    }
    total / (n * c) as f64
}

#[test]
fn ssim_of_identical_images_is_one() {
    let cfg = SsimConfig::default();
    for seed in 0..5 {
        let x = uniform::<f32>([1, 3, 32, 24], 0.0, 1.0, &mut rng(seed));
        assert!((ssim(&x, &x, &cfg).unwrap() - 1.0).abs() < 1e-6);
    }
    let flat = Tensor::full([1, 1, 16, 16], 0.3f32);
    assert!((ssim(&flat, &flat, &cfg).unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn ssim_inverted_checkerboard() {
    let x = Tensor::from_fn([1, 1, 16, 16], |_, _, y, x| ((x + y) % 2) as f32);
    let inv = x.map(|v| 1.0 - v);
    let got = ssim(&x, &inv, &SsimConfig::default()).unwrap();
    let want = ssim_oracle(&x, &inv);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    assert!(got <= 0.0);
}

#[test]
fn ssim_matches_direct_window_sums() {
    let mut r = rng(3);
    let a = uniform::<f32>([2, 3, 20, 17], 0.0, 1.0, &mut r);
    let b = uniform::<f32>([2, 3, 20, 17], 0.0, 1.0, &mut r);
    assert!((ssim(&a, &b, &SsimConfig::default()).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-9);
}

#[test]
fn ssim_falls_as_noise_grows() {
    let clean = texture(64);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mean_ssim = |sigma: f32| {
        (0..10u64)
            .map(|seed| {
                let mut r = rng(seed);
                let data = clean
                    .data()
                    .iter()
                    .map(|&v| (v + sigma * normal.sample(&mut r) as f32).clamp(0.0, 1.0));
                let noisy = Tensor::from_vec(clean.dims(), data.collect()).unwrap();
                ssim(&clean, &noisy, &SsimConfig::default()).unwrap()
            })
            .sum::<f64>()
            / 10.0
    };
    let s: Vec<f64> = [0.05, 0.1, 0.2].into_iter().map(mean_ssim).collect();
    assert!(s[0] > s[1] && s[1] > s[2], "{s:?}");
}

#[test]
fn ssim_rejects_bad_shapes() {
    let cfg = SsimConfig::default();
    let a = Tensor::<f32>::zeros([1, 3, 16, 16]);
    assert!(ssim(&a, &Tensor::zeros([1, 3, 16, 15]), &cfg).is_err());
    assert!(ssim(
        &Tensor::zeros([1, 1, 8, 8]),
        &Tensor::zeros([1, 1, 8, 8]),
        &cfg
    )
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform::<f32>([1, 3, 16, 16], 0.0, 1.0, &mut r);
        let b = uniform::<f32>([1, 3, 16, 16], 0.0, 1.0, &mut r);
        let cfg = SsimConfig::default();
        let (ab, ba) = (ssim(&a, &b, &cfg).unwrap(), ssim(&b, &a, &cfg).unwrap());
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn frechet_symmetric_and_nonnegative(d in 1usize..=5, na in 2usize..=20, nb in 2usize..=20, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_set(&mut r, na, d, 0.0, 1.0);
        let b = random_set(&mut r, nb, d, 0.5, 2.0);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-6 * ab.max(1.0));
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn frechet_rotation_invariant(d in 2usize..=6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = random_set(&mut r, 30, d, 0.0, 1.0);
        let b = random_set(&mut r, 25, d, 1.0, 0.5);
        let q = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0)).qr().q();
        let rotate = |s: &EmbeddingSet| {
            EmbeddingSet::new(
                s.vectors
                    .iter()
                    .map(|v| (&q * DMatrix::from_column_slice(d, 1, v)).as_slice().to_vec())
                    .collect(),
            )
            .unwrap()
        };
        let base = frechet_distance(&a, &b).unwrap();
        let rotated = frechet_distance(&rotate(&a), &rotate(&b)).unwrap();
        prop_assert!((base - rotated).abs() < 1e-5 * base.max(1.0), "{base} vs {rotated}");
    }
}

fn random_set(r: &mut impl Rng, n: usize, d: usize, mu: f64, sigma: f64) -> EmbeddingSet {
    let normal = Normal::new(mu, sigma).unwrap();
    EmbeddingSet::new(
        (0..n)
            .map(|_| (0..d).map(|_| normal.sample(r)).collect())
            .collect(),
    )
    .unwrap()
}

fn sample_moments(v: &[f64]) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (mean, var.sqrt())
}

#[test]
fn frechet_two_point_sets() {
    let a = EmbeddingSet::new(vec![vec![0.0], vec![2.0]]).unwrap();
    let b = EmbeddingSet::new(vec![vec![1.0], vec![3.0]]).unwrap();
    assert!((frechet_distance(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
}

#[test]
fn frechet_one_dimensional_closed_form() {
    let mut r = rng(7);
    for (mu, sigma, n) in [(0.0, 1.0, 1000), (2.5, 0.5, 1500), (-1.0, 3.0, 2000)] {
        let a = random_set(&mut r, n, 1, 0.0, 1.0);
        let b = random_set(&mut r, n, 1, mu, sigma);
        let got = frechet_distance(&a, &b).unwrap();
        let flat = |s: &EmbeddingSet| s.vectors.iter().map(|v| v[0]).collect::<Vec<_>>();
        let ((ma, sa), (mb, sb)) = (sample_moments(&flat(&a)), sample_moments(&flat(&b)));
        // Both variances carry the covariance regularizer.
        let reg = |s: f64| (s * s + 1e-6).sqrt();
        let sample = (ma - mb).powi(2) + (reg(sa) - reg(sb)).powi(2);
        assert!((got - sample).abs() < 1e-6, "{got} vs sample form {sample}");
        let population = mu * mu + (1.0 - sigma) * (1.0 - sigma);
        assert!(
            (got - population).abs() < 5e-2 * population.max(1.0),
            "{got} vs population {population}"
        );
    }
}

#[test]
fn cfid_is_zero_for_matching_images() {
    let reference = texture(32);
    let tiled = Tensor::from_fn([1, 3, 64, 64], |_, c, y, x| {
        reference.at(0, c, y % 32, x % 32)
    });
    for crop_size in [Some((1, 1)), Some((4, 4))] {
        let options = CropEvalOptions {
            crops: 8,
            crop_size,
        };
        let v = crop_eval(
            &tiled,
            &tiled.clone(),
            &PixelEmbedder,
            Protocol::CFid,
            &options,
            &mut rng(1),
        )
        .unwrap();
        assert!(v.abs() < 1e-6, "{v}");
    }
}

#[test]
fn cfid_agrees_with_two_point_closed_form() {
    // Gray pixels embed along (1, 1, 1), so the Fréchet distance reduces to
    // 3 ((mu_a - mu_b)^2 + (sigma_a - sigma_b)^2) over the gray levels.
    let gray = |h: usize, w: usize, seed: u64| {
        let mut r = rng(seed);
        let g: Vec<f32> = (0..h * w).map(|_| r.random_range(0.0..1.0)).collect();
        Tensor::from_fn([1, 3, h, w], |_, _, y, x| g[y * w + x])
    };
    let (out, reference) = (gray(8, 8, 1), gray(6, 6, 2));
    let options = CropEvalOptions {
        crops: 2,
        crop_size: Some((1, 1)),
    };
    let got = crop_eval(
        &out,
        &reference,
        &PixelEmbedder,
        Protocol::CFid,
        &options,
        &mut rng(3),
    )
    .unwrap();

    let mut r = rng(3);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..2 {
        let (t, l) = (r.random_range(0..=7), r.random_range(0..=7));
        a.push(out.at(0, 0, t, l) as f64);
        let (t, l) = (r.random_range(0..=5), r.random_range(0..=5));
        b.push(reference.at(0, 0, t, l) as f64);
    }
    let ((ma, sa), (mb, sb)) = (sample_moments(&a), sample_moments(&b));
    let want = 3.0 * ((ma - mb).powi(2) + (sa - sb).powi(2));
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
}

#[test]
fn crop_eval_is_seeded_and_checks_sizes() {
    let out = texture(64);
    let reference = texture(32);
    let emb = PyramidEmbedder::new(0);
    let opts = CropEvalOptions::default();
    for protocol in [Protocol::CFid, Protocol::CLpipsLike] {
        let a = crop_eval(&out, &reference, &emb, protocol, &opts, &mut rng(5)).unwrap();
        let b = crop_eval(&out, &reference, &emb, protocol, &opts, &mut rng(5)).unwrap();
        assert_eq!(a, b);
        assert!(a >= 0.0);
    }
    let big = CropEvalOptions {
        crops: 8,
        crop_size: Some((65, 8)),
    };
    assert!(crop_eval(&out, &reference, &emb, Protocol::CFid, &big, &mut rng(0)).is_err());
    let wrong = CropEvalOptions {
        crops: 8,
        crop_size: Some((16, 16)),
    };
    assert!(crop_eval(
        &out,
        &reference,
        &emb,
        Protocol::CLpipsLike,
        &wrong,
        &mut rng(0)
    )
    .is_err());
}

#[test]
fn clpips_like_is_zero_on_tiled_input() {
    let reference = texture(32);
    let tiled = Tensor::from_fn([1, 3, 64, 64], |_, c, y, x| {
        reference.at(0, c, y % 32, x % 32)
    });
    let emb = PyramidEmbedder::new(1);
    let opts = CropEvalOptions {
        crops: 8,
        crop_size: None,
    };
    // Only crops aligned with the tiling reproduce the reference exactly.
    let v = crop_eval(
        &tiled,
        &reference,
        &emb,
        Protocol::CLpipsLike,
        &opts,
        &mut rng(2),
    )
    .unwrap();
    assert!(v > 0.0);
    assert!(
        crop_eval(
            &reference,
            &reference,
            &emb,
            Protocol::CLpipsLike,
            &opts,
            &mut rng(2)
        )
        .unwrap()
            < 1e-9
    );
}

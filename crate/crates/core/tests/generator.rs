mod common;

use common::{rng, uniform};
use txsp_core::expansion::{make_noise_maps, NoiseMaps};
use txsp_core::generator::{
    encoder_forward, generator_forward, generator_forward_noise, noise_base_for_target,
    noise_output_size, synthesize_4x,
};
use txsp_core::io::{generator_from_bytes, generator_to_bytes};
use txsp_core::selfsim::selfsim_fast;
use txsp_core::tensor::BatchNormMode;
use txsp_core::{GeneratorConfig, GeneratorWeights, Tensor};

fn narrow() -> GeneratorConfig {
    GeneratorConfig {
        width_multiplier: 1.0 / 16.0,
        ..GeneratorConfig::default()
    }
}

fn weights(seed: u64) -> GeneratorWeights<f32> {
    GeneratorWeights::init(narrow(), seed).unwrap()
}

fn image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    uniform([1, 3, h, w], 0.0, 1.0, &mut rng(seed))
}

#[test]
fn output_is_twice_the_input_for_every_valid_size() {
    let g = weights(1);
    for h in [32, 64, 96, 128] {
        for w in [32, 64, 96, 128] {
            let out = generator_forward(&image(h, w, 2), &g).unwrap();
            assert_eq!(out.dims(), [1, 3, 2 * h, 2 * w], "input {h}x{w}");
        }
    }
}

#[test]
fn encoder_pyramid_shapes_and_widths() {
    let g = GeneratorWeights::<f32>::init(GeneratorConfig::desk(), 0).unwrap();
    let feats = encoder_forward(&image(64, 64, 1), &g, BatchNormMode::Eval).unwrap();
    let dims: Vec<_> = feats.iter().map(|f| f.dims()).collect();
    assert_eq!(
        dims,
        [
            [1, 16, 64, 64],
            [1, 32, 32, 32],
            [1, 64, 16, 16],
            [1, 128, 8, 8],
            [1, 256, 4, 4]
        ]
    );
    let zero = encoder_forward(&Tensor::zeros([1, 3, 64, 64]), &g, BatchNormMode::Eval).unwrap();
    assert!(zero.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn full_width_layout_follows_the_table() {
    let layout = GeneratorConfig::default().layout();
    let dims = |name: &str| {
        layout
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| *d)
            .unwrap()
    };
    assert_eq!(dims("conv1.weight"), [64, 3, 3, 3]);
    assert_eq!(dims("conv2_1.weight"), [128, 64, 3, 3]);
    assert_eq!(dims("conv5_2.weight"), [1024, 1024, 3, 3]);
    assert_eq!(dims("conv6.weight"), [512, 1024, 3, 3]);
    assert_eq!(dims("conv9.weight"), [64, 128, 3, 3]);
    assert_eq!(dims("conv10.weight"), [3, 64, 3, 3]);
    assert!(layout.iter().all(|(n, _)| !n.starts_with("conv10.bn")));
}

#[test]
fn noise_path_equals_selfsim_path_given_the_same_maps() {
    let g = weights(3);
    let img = uniform::<f32>([2, 3, 64, 64], 0.0, 1.0, &mut rng(4));
    let feats = encoder_forward(&img, &g, BatchNormMode::Eval).unwrap();
    let map = |k: usize| selfsim_fast(&feats[k]).unwrap().scores;
    let maps = NoiseMaps {
        scale16: map(4),
        scale8: map(3),
        scale4: map(2),
    };
    assert_eq!(maps.scale16.height(), 64 / 16 + 1);
    let via_noise = generator_forward_noise(&img, &g, &maps).unwrap();
    assert_eq!(via_noise, generator_forward(&img, &g).unwrap());
}

#[test]
fn noise_mode_size_law() {
    let g = weights(5);
    for (h, n5) in [(32, 3), (64, 5), (64, 7), (96, 4)] {
        let maps = make_noise_maps::<f32>((n5, n5), &mut rng(6)).unwrap();
        let out = generator_forward_noise(&image(h, h, 7), &g, &maps).unwrap();
        let t = noise_output_size(h, n5);
        assert_eq!(t, 16 * n5 + h - 16);
        assert_eq!(out.dims(), [1, 3, t, t]);
        if n5 == h / 16 + 1 {
            assert_eq!(t, 2 * h);
        }
    }
    let maps = make_noise_maps::<f32>((5, 3), &mut rng(6)).unwrap();
    let out = generator_forward_noise(&image(64, 32, 8), &g, &maps).unwrap();
    assert_eq!(out.dims(), [1, 3, 128, 64]);
}

#[test]
fn direct_2048_from_128() {
    let n5 = noise_base_for_target(128, 2048).unwrap();
    assert_eq!(n5, 121);
    let maps = make_noise_maps::<f32>((n5, n5), &mut rng(9)).unwrap();
    let out = generator_forward_noise(&image(128, 128, 10), &weights(11), &maps).unwrap();
    assert_eq!(out.dims(), [1, 3, 2048, 2048]);
}

#[test]
fn inconsistent_noise_rejected() {
    let g = weights(1);
    let mut maps = make_noise_maps::<f32>((3, 3), &mut rng(1)).unwrap();
    maps.scale8 = Tensor::zeros([1, 1, 6, 5]);
    assert!(generator_forward_noise(&image(32, 32, 1), &g, &maps).is_err());
}

#[test]
fn noise_seeds_give_different_outputs() {
    let g = weights(12);
    let img = image(32, 32, 13);
    let a =
        generator_forward_noise(&img, &g, &make_noise_maps((3, 3), &mut rng(1)).unwrap()).unwrap();
    let b =
        generator_forward_noise(&img, &g, &make_noise_maps((3, 3), &mut rng(2)).unwrap()).unwrap();
    assert!(a.sub(&b).unwrap().max_abs() > 0.0);
}

#[test]
fn four_x_is_two_passes() {
    let g = weights(14);
    let img = image(128, 128, 15);
    let out = synthesize_4x(&img, &g).unwrap();
    assert_eq!(out.dims(), [1, 3, 512, 512]);
    let once = generator_forward(&img, &g).unwrap();
    assert_eq!(out, generator_forward(&once, &g).unwrap());
}

#[test]
fn forward_is_deterministic() {
    let g = weights(16);
    let img = image(64, 64, 17);
    assert_eq!(
        generator_forward(&img, &g).unwrap(),
        generator_forward(&img, &g).unwrap()
    );
    assert_eq!(weights(16), g);
}

#[test]
fn weight_round_trip_is_bitwise() {
    let g = weights(18);
    let img = image(32, 64, 19);
    let back: GeneratorWeights<f32> =
        generator_from_bytes(&generator_to_bytes(&g).unwrap()).unwrap();
    assert_eq!(back, g);
    assert_eq!(
        generator_forward(&img, &back).unwrap(),
        generator_forward(&img, &g).unwrap()
    );
}

#[test]
fn loading_checks_the_name_set() {
    let g = weights(20);
    let mut missing = g.tensors.clone();
    let mut rebuilt = txsp_core::NamedTensors::new();
    for (name, t) in missing.iter().filter(|(n, _)| *n != "conv7.bn.gamma") {
        rebuilt.insert(name, t.clone());
    }
    assert!(GeneratorWeights::from_tensors(narrow(), rebuilt).is_err());
    missing.insert("conv11.weight", Tensor::zeros([1, 1, 1, 1]));
    assert!(GeneratorWeights::from_tensors(narrow(), missing).is_err());
    assert!(GeneratorWeights::from_tensors(narrow(), g.tensors.clone()).is_ok());
    assert!(GeneratorWeights::from_tensors(GeneratorConfig::desk(), g.tensors).is_err());
}

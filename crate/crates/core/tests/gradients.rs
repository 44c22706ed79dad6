mod common;

use common::{rng, uniform};
use rand::Rng;
use txsp_core::autodiff::{grad_check, CropAnchor, GradCheckOptions, Ops, Tape, Var};
use txsp_core::expansion::{transconv_block_ops, TransConvBlockParams};
use txsp_core::generator::{generator_ops, MapSource};
use txsp_core::losses::{
    discriminator_ops, lsgan_term, perceptual_ops, style_ops, DiscriminatorConfig, FeatureExtractor,
};
use txsp_core::params::{is_buffer, Bound};
use txsp_core::selfsim::{sim_transform_ops, SimTransformParams};
use txsp_core::tensor::{BatchNormMode, RunningStats};
use txsp_core::{ConvSpec, Dims, GeneratorConfig, GeneratorWeights, PaddingMode, Result, Tensor};

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

/// Entries with magnitude in `[0.2, 1]` and random sign, so that a `STEP`
/// perturbation never crosses the kink of ReLU or |x|.
fn off_kink(dims: Dims, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(dims, |_, _, _, _| {
        let v = r.random_range(0.2..1.0);
        if r.random_bool(0.5) {
            -v
        } else {
            v
        }
    })
}

fn rand(dims: Dims, seed: u64) -> Tensor<f64> {
    uniform(dims, -1.0, 1.0, &mut rng(seed))
}

/// `sum(y * w)` for a fixed random `w`, so every output entry gets a distinct weight.
fn probe(t: &Tape<f64>, y: Var) -> Result<Var> {
    let dims = t.dims(&y);
    let w = t.constant(rand(dims, dims.iter().product::<usize>() as u64))?;
    t.sum(&t.mul(&y, &w)?)
}

fn check<F>(name: &str, params: &[Tensor<f64>], tol: f64, f: F)
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let report = grad_check(f, params, STEP, tol, GradCheckOptions::default()).unwrap();
    assert!(
        report.passed,
        "{name}: max relative error {} > {tol}",
        report.max_rel_error
    );
}

#[test]
fn conv_variants() {
    let specs = [
        ConvSpec::default(),
        ConvSpec::new(1, PaddingMode::zero(1)),
        ConvSpec::new(1, PaddingMode::partial(1)),
        ConvSpec::new(2, PaddingMode::partial(1)),
        ConvSpec::new(2, PaddingMode::zero(2)),
    ];
    for (k, spec) in specs.iter().enumerate() {
        let params = [
            rand([2, 3, 7, 6], 1),
            rand([4, 3, 3, 3], 2),
            rand([1, 4, 1, 1], 3),
        ];
        check(&format!("conv2d {k}"), &params, TOL, |t, v| {
            let y = t.conv2d(&v[0], &v[1], Some(&v[2]), spec)?;
            probe(t, y)
        });
    }
}

#[test]
fn transposed_and_expand() {
    let params = [
        rand([2, 3, 4, 5], 4),
        rand([3, 2, 3, 2], 5),
        rand([1, 2, 1, 1], 6),
    ];
    check("transposed_conv2d", &params, TOL, |t, v| {
        let y = t.transposed_conv2d(&v[0], &v[1], Some(&v[2]))?;
        probe(t, y)
    });
    for (k, map) in [[2, 1, 5, 5], [2, 1, 3, 6]].into_iter().enumerate() {
        let params = [rand([2, 3, 4, 4], 7), rand(map, 8)];
        check(&format!("expand {k}"), &params, TOL, |t, v| {
            let y = t.expand(&v[0], &v[1])?;
            probe(t, y)
        });
    }
}

#[test]
fn selfsim_op() {
    for dims in [[2, 3, 4, 4], [1, 2, 2, 6], [1, 1, 8, 4]] {
        let params = [rand(dims, 9)];
        check("selfsim", &params, TOL, |t, v| {
            let y = t.selfsim(&v[0])?;
            probe(t, y)
        });
    }
}

#[test]
fn resampling_pooling_and_layout_ops() {
    let x = [rand([2, 2, 3, 5], 10)];
    check("bilinear", &x, TOL, |t, v| {
        let y = t.bilinear(&v[0], 7, 4)?;
        probe(t, y)
    });
    check("bilinear 2x", &x, TOL, |t, v| {
        let y = t.bilinear(&v[0], 6, 10)?;
        probe(t, y)
    });
    check("avg_pool_global", &x, TOL, |t, v| {
        let y = t.avg_pool_global(&v[0])?;
        probe(t, y)
    });
    let anchors = [
        CropAnchor {
            item: 1,
            top: 0,
            left: 1,
        },
        CropAnchor {
            item: 0,
            top: 1,
            left: 2,
        },
        CropAnchor {
            item: 1,
            top: 1,
            left: 1,
        },
    ];
    check("crops", &x, TOL, |t, v| {
        let y = t.crops(&v[0], &anchors, 2, 3)?;
        probe(t, y)
    });
    let pair = [rand([2, 2, 3, 5], 11), rand([2, 1, 3, 5], 12)];
    check("concat_channels", &pair, TOL, |t, v| {
        let y = t.concat_channels(&v[0], &v[1])?;
        probe(t, y)
    });
    check("gram", &[rand([2, 3, 4, 5], 13)], TOL, |t, v| {
        let y = t.gram(&v[0])?;
        probe(t, y)
    });
}

#[test]
fn elementwise_ops() {
    let a = off_kink([2, 3, 3, 2], 14);
    let b = rand([2, 3, 3, 2], 15);
    check("relu", std::slice::from_ref(&a), TOL, |t, v| {
        let y = t.relu(&v[0])?;
        probe(t, y)
    });
    check("leaky_relu", std::slice::from_ref(&a), TOL, |t, v| {
        let y = t.leaky_relu(&v[0], 0.2)?;
        probe(t, y)
    });
    check("abs", std::slice::from_ref(&a), TOL, |t, v| {
        let y = t.abs(&v[0])?;
        probe(t, y)
    });
    let ab = [a, b];
    check("add", &ab, TOL, |t, v| {
        let y = t.add(&v[0], &v[1])?;
        probe(t, y)
    });
    check("sub", &ab, TOL, |t, v| {
        let y = t.sub(&v[0], &v[1])?;
        probe(t, y)
    });
    check("mul", &ab, TOL, |t, v| {
        let y = t.mul(&v[0], &v[1])?;
        probe(t, y)
    });
    check("scale, add_scalar", &ab[..1], TOL, |t, v| {
        let y = t.add_scalar(&t.scale(&v[0], -1.7)?, 0.3)?;
        probe(t, y)
    });
    check("sum, mean", &ab[..1], TOL, |t, v| {
        let s = t.sum(&t.mul(&v[0], &v[0])?)?;
        let m = t.mean(&v[0])?;
        t.add(&s, &t.scale(&m, 3.0)?)
    });
    let shared = [rand([2, 3, 2, 2], 16), rand([1, 3, 1, 1], 17)];
    check("add_channel_bias shared", &shared, TOL, |t, v| {
        let y = t.add_channel_bias(&v[0], &v[1])?;
        probe(t, y)
    });
    let per_item = [rand([2, 3, 2, 2], 18), rand([2, 3, 1, 1], 19)];
    check("add_channel_bias per item", &per_item, TOL, |t, v| {
        let y = t.add_channel_bias(&v[0], &v[1])?;
        probe(t, y)
    });
}

#[test]
fn batch_norm_modes() {
    let params = [
        rand([3, 2, 3, 2], 20),
        rand([1, 2, 1, 1], 21),
        rand([1, 2, 1, 1], 22),
    ];
    check("batch_norm train", &params, TOL, |t, v| {
        let (y, _) = t.batch_norm_train(&v[0], &v[1], &v[2], 1e-5)?;
        probe(t, y)
    });
    let stats = RunningStats {
        mean: Tensor::from_vec([1, 2, 1, 1], vec![0.3, -0.2]).unwrap(),
        var: Tensor::from_vec([1, 2, 1, 1], vec![0.5, 2.0]).unwrap(),
    };
    check("batch_norm eval", &params, TOL, |t, v| {
        let y = t.batch_norm_eval(&v[0], &v[1], &v[2], &stats, 1e-5)?;
        probe(t, y)
    });
}

fn conv_pair(prefix: &str, v: &[Var]) -> Vec<(String, Var)> {
    vec![
        (format!("{prefix}.weight"), v[0]),
        (format!("{prefix}.bias"), v[1]),
    ]
}

#[test]
fn similarity_transform_block() {
    let params = [
        rand([1, 1, 5, 5], 23),
        rand([8, 1, 3, 3], 24),
        rand([1, 8, 1, 1], 25),
        rand([1, 8, 3, 3], 26),
        rand([1, 1, 1, 1], 27),
    ];
    check("sim transform", &params, TOL, |t, v| {
        let bound: Bound<Var> = conv_pair("b.sim_conv1", &v[1..3])
            .into_iter()
            .chain(conv_pair("b.sim_conv2", &v[3..5]))
            .collect();
        let p = SimTransformParams::from_bound(&bound, "b")?;
        let y = sim_transform_ops(t, &v[0], &p)?;
        probe(t, y)
    });
}

#[test]
fn expansion_block() {
    let c = 3;
    let mut params = vec![rand([2, c, 4, 4], 30), rand([2, 1, 5, 5], 31)];
    let layout: [(&str, Dims); 6] = [
        ("filter_conv1", [c, c, 3, 3]),
        ("filter_conv2", [c, c, 3, 3]),
        ("bias_fc", [c, c, 1, 1]),
        ("sim_conv1", [8, 1, 3, 3]),
        ("sim_conv2", [1, 8, 3, 3]),
        ("output_conv", [c, c, 3, 3]),
    ];
    for (k, (_, dims)) in layout.iter().enumerate() {
        params.push(rand(*dims, 40 + k as u64).scale(0.5));
        params.push(rand([1, dims[0], 1, 1], 60 + k as u64).scale(0.5));
    }
    check("transconv block", &params, TOL, |t, v| {
        let bound: Bound<Var> = layout
            .iter()
            .enumerate()
            .flat_map(|(k, (name, _))| conv_pair(&format!("blk.{name}"), &v[2 + 2 * k..4 + 2 * k]))
            .collect();
        let p = TransConvBlockParams::from_bound(&bound, "blk")?;
        let y = transconv_block_ops(t, &v[0], &v[1], &p)?;
        probe(t, y)
    });
}

#[test]
fn losses_wrt_output_image() {
    let ext = FeatureExtractor::<f64>::random(3);
    let target = uniform::<f64>([2, 3, 32, 32], 0.0, 1.0, &mut rng(70));
    let out = uniform::<f64>([2, 3, 32, 32], 0.0, 1.0, &mut rng(71));
    check("perceptual", std::slice::from_ref(&out), TOL, |t, v| {
        let tgt = t.constant(target.clone())?;
        let a = ext.pyramid_ops(t, &v[0])?;
        let b = ext.pyramid_ops(t, &tgt)?;
        perceptual_ops(t, &a, &b)
    });
    check("style", &[out], TOL, |t, v| {
        let tgt = t.constant(target.clone())?;
        let a = ext.pyramid_ops(t, &v[0])?;
        let b = ext.pyramid_ops(t, &tgt)?;
        style_ops(t, &a, &b)
    });
}

#[test]
fn discriminator_and_lsgan() {
    let cfg = DiscriminatorConfig {
        in_channels: 6,
        widths: [3, 4, 4, 5],
    };
    let layout = cfg.layout();
    let mut params = vec![rand([2, 6, 16, 16], 80)];
    for (k, (_, dims)) in layout.iter().enumerate() {
        params.push(rand(*dims, 81 + k as u64).scale(0.3));
    }
    check("discriminator", &params, TOL, |t, v| {
        let bound: Bound<Var> = layout
            .iter()
            .zip(&v[1..])
            .map(|((n, _), var)| (n.clone(), *var))
            .collect();
        let logits = discriminator_ops(t, &bound, &v[0])?;
        lsgan_term(t, &logits, 1.0)
    });
}

#[test]
fn full_generator_train_mode() {
    // 1/16 widths (4 .. 64) on a 32 x 32 input. Biases and BN shifts are
    // randomized so that no branch sits at a symmetric starting point.
    let config = GeneratorConfig {
        width_multiplier: 1.0 / 16.0,
        ..GeneratorConfig::default()
    };
    let init = GeneratorWeights::<f64>::init(config.clone(), 5).unwrap();
    let mut r = rng(6);
    let mut names = Vec::new();
    let mut params = vec![uniform::<f64>([2, 3, 32, 32], 0.0, 1.0, &mut r)];
    let mut buffers = Vec::new();
    for (name, t) in init.tensors.iter() {
        if is_buffer(name) {
            buffers.push((name.to_string(), t.clone()));
        } else {
            let t = if name.ends_with(".weight") {
                t.clone()
            } else {
                t.add(&uniform(t.dims(), -0.1, 0.1, &mut r)).unwrap()
            };
            names.push(name.to_string());
            params.push(t);
        }
    }
    let options = GradCheckOptions {
        max_coords: 64,
        seed: 1,
    };
    let report = grad_check(
        |t, v| {
            let mut bound: Vec<(String, Var)> =
                names.iter().cloned().zip(v[1..].iter().copied()).collect();
            for (n, b) in &buffers {
                bound.push((n.clone(), t.constant(b.clone())?));
            }
            let bound: Bound<Var> = bound.into_iter().collect();
            let (y, _) = generator_ops(
                t,
                &bound,
                &config,
                &v[0],
                &MapSource::SelfSim,
                BatchNormMode::Train,
            )?;
            probe(t, y)
        },
        &params,
        STEP,
        1e-3,
        options,
    )
    .unwrap();
    let worst = report
        .params
        .iter()
        .zip(std::iter::once("input").chain(names.iter().map(String::as_str)))
        .max_by(|a, b| a.0.max_rel_error.total_cmp(&b.0.max_rel_error))
        .unwrap();
    assert!(
        report.passed,
        "worst {} at {}: {}",
        worst.1, worst.0.worst_index, worst.0.max_rel_error
    );
}

#[test]
fn backward_is_linear_over_graph_copies() {
    let x = rand([1, 2, 4, 4], 90);
    let w = rand([3, 2, 3, 3], 91);
    let grad = |copies: usize| {
        let t = Tape::new();
        let (xv, wv) = (t.leaf(x.clone()).unwrap(), t.leaf(w.clone()).unwrap());
        let mut acc = None;
        for _ in 0..copies {
            let y = t
                .conv2d(&xv, &wv, None, &ConvSpec::new(1, PaddingMode::partial(1)))
                .unwrap();
            let s = probe(&t, t.relu(&y).unwrap()).unwrap();
            acc = Some(match acc {
                None => s,
                Some(a) => t.add(&a, &s).unwrap(),
            });
        }
        let g = t.backward_scalar(acc.unwrap()).unwrap();
        (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
    };
    let (g1, g2) = (grad(1), grad(2));
    assert!(common::max_rel_scaled(&g2.0, &g1.0.scale(2.0)) < 1e-14);
    assert!(common::max_rel_scaled(&g2.1, &g1.1.scale(2.0)) < 1e-14);
}

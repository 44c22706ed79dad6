//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use txsp_core::{Dims, Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries, rounded through f32 so that f32 and f64 runs see the same inputs.
pub fn uniform<T: Scalar>(dims: Dims, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(dims, |_, _, _, _| {
        T::lit(rng.random_range(lo..hi) as f32 as f64)
    })
}

pub fn random<T: Scalar>(dims: Dims, seed: u64) -> Tensor<T> {
    uniform(dims, -1.0, 1.0, &mut rng(seed))
}

pub fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap()).collect()
}

/// Largest `|a - b| / max(|a|, |b|, 1)` over all entries.
pub fn max_rel_unit<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.dims(), b.dims(), "shape mismatch");
    to_f64(a)
        .iter()
        .zip(to_f64(b))
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Largest `|a - b| / scale` where `scale` holds the sums of absolute terms
/// behind each entry of `b` (the conditioning of a dot product).
pub fn max_rel_terms<T: Scalar>(a: &Tensor<T>, b: &Tensor<f64>, scale: &Tensor<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims(), "shape mismatch");
    to_f64(a)
        .iter()
        .zip(b.data())
        .zip(scale.data())
        .map(|((x, y), s)| (x - y).abs() / s.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

pub fn abs<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.abs())
}

/// Largest relative error against the largest magnitude in `b`.
pub fn max_rel_scaled<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.dims(), b.dims(), "shape mismatch");
    let (a, b) = (to_f64(a), to_f64(b));
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Six-loop cross-correlation with explicit zero padding, optional
/// partial-padding re-weighting and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: (usize, usize, usize, usize),
    partial: bool,
) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims();
    let [cout, _, kh, kw] = w.dims();
    let (pt, pb, pl, pr) = pad;
    let oh = (h + pt + pb - kh) / stride + 1;
    let ow = (wd + pl + pr - kw) / stride + 1;
    Tensor::from_fn([n, cout, oh, ow], |b, co, oy, ox| {
        let mut acc = 0.0;
        let mut inside = 0usize;
        for dy in 0..kh {
            for dx in 0..kw {
                let y = (oy * stride + dy) as isize - pt as isize;
                let xx = (ox * stride + dx) as isize - pl as isize;
                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                    continue;
                }
                inside += 1;
                for ci in 0..cin {
                    acc += x.at(b, ci, y as usize, xx as usize) * w.at(co, ci, dy, dx);
                }
            }
        }
        if partial {
            acc *= (kh * kw) as f64 / inside as f64;
        }
        acc + bias.map_or(0.0, |bv| bv[co])
    })
}

/// Scatter form of the stride-1 transposed convolution, `w [Cin, Cout, Kh, Kw]`.
pub fn transposed_oracle(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims();
    let [_, cout, kh, kw] = w.dims();
    let mut out = Tensor::zeros([n, cout, h + kh - 1, wd + kw - 1]);
    for b in 0..n {
        for ci in 0..cin {
            for i in 0..h {
                for j in 0..wd {
                    let v = x.at(b, ci, i, j);
                    for co in 0..cout {
                        for a in 0..kh {
                            for c in 0..kw {
                                let idx = out.index(b, co, i + a, j + c);
                                out.data_mut()[idx] += v * w.at(ci, co, a, c);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Score at shift `(p, q)` computed straight from the definition, half-open overlap.
pub fn score_oracle(f: &Tensor<f64>, item: usize, p: isize, q: isize) -> f64 {
    let [_, c, h, w] = f.dims();
    let (h, w) = (h as isize, w as isize);
    let (mut num, mut den) = (0.0, 0.0);
    for m in p.max(0)..(h + p).min(h) {
        for k in q.max(0)..(w + q).min(w) {
            for ch in 0..c {
                let a = f.at(item, ch, m as usize, k as usize);
                let b = f.at(item, ch, (m - p) as usize, (k - q) as usize);
                num += (a - b) * (a - b);
                den += a * a;
            }
        }
    }
    if den == 0.0 {
        0.0
    } else {
        -num / (den + 1e-8)
    }
}

/// `[N, C, C]` Gram matrices as nested vectors, triple loop.
pub fn gram_oracle(x: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let [n, c, h, w] = x.dims();
    (0..n)
        .map(|b| {
            (0..c)
                .map(|i| {
                    (0..c)
                        .map(|j| {
                            let mut s = 0.0;
                            for y in 0..h {
                                for xx in 0..w {
                                    s += x.at(b, i, y, xx) * x.at(b, j, y, xx);
                                }
                            }
                            s
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Periodic procedural texture used by the training smoke checks.
pub fn texture(size: usize) -> Tensor<f32> {
    Tensor::from_fn([1, 3, size, size], |_, c, y, x| {
        let (fy, fx) = (y as f32, x as f32);
        let wave = (fx * 0.4 + c as f32).sin() * (fy * 0.3).cos();
        let checker = ((x / 8 + y / 8) % 2) as f32 - 0.5;
        (0.5 + 0.25 * wave + 0.2 * checker).clamp(0.0, 1.0)
    })
}

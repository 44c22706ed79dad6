//! SSIM, Fréchet distance and crop-based evaluation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::losses::FeatureExtractor;
use crate::tensor::{crop, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Valid-window separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean local SSIM over valid windows, averaged over items and channels.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>, cfg: &SsimConfig) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(shape_err!(
            "ssim operands {:?} and {:?} differ",
            a.dims(),
            b.dims()
        ));
    }
    let [n, c, h, w] = a.dims();
    if h < cfg.window || w < cfg.window || n * c == 0 {
        return Err(shape_err!(
            "ssim needs at least {0}x{0} images, got {h}x{w}",
            cfg.window
        ));
    }
    let taps = cfg.taps();
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let plane = h * w;
    let mut total = 0.0;
    for p in 0..n * c {
        let x: Vec<f64> = a.data()[p * plane..(p + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let y: Vec<f64> = b.data()[p * plane..(p + 1) * plane]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &taps);
        let my = filter_valid(&y, h, w, &taps);
        let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
        let myy = filter_valid(&prod(&y, &y), h, w, &taps);
        let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = mxx[i] - ux * ux;
            let syy = myy[i] - uy * uy;
            let sxy = mxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2))
                / ((ux * ux + uy * uy + c1) * (sxx + syy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / (n * c) as f64)
}

/// A set of equal-length embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub dim: usize,
}

impl EmbeddingSet {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        if vectors.is_empty() || dim == 0 || vectors.iter().any(|v| v.len() != dim) {
            return Err(shape_err!(
                "embedding set needs nonempty vectors of one length"
            ));
        }
        Ok(EmbeddingSet { vectors, dim })
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for v in &self.vectors {
            m += DVector::from_column_slice(v);
        }
        m / self.vectors.len() as f64
    }

    /// Unbiased covariance; zero for a single vector.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for v in &self.vectors {
            let d = DVector::from_column_slice(v) - &mu;
            cov += &d * d.transpose();
        }
        let n = self.vectors.len();
        if n > 1 {
            cov / (n - 1) as f64
        } else {
            cov
        }
    }
}

pub const COV_REGULARIZER: f64 = 1e-6;

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)` with both
/// covariances regularized by `1e-6 I`. Never negative.
pub fn frechet_distance(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<f64> {
    if a.dim != b.dim {
        return Err(shape_err!("embedding dims {} and {} differ", a.dim, b.dim));
    }
    let reg = DMatrix::identity(a.dim, a.dim) * COV_REGULARIZER;
    let sa = a.covariance() + &reg;
    let sb = b.covariance() + &reg;
    let root_a = sqrt_psd(&sa);
    let inner = &root_a * &sb * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let dmu = (a.mean() - b.mean()).norm_squared();
    Ok((dmu + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// Maps a batch of crops to one vector per crop.
pub trait Embedder {
    fn embed(&self, crops: &Tensor<f32>) -> Result<Vec<Vec<f64>>>;
    fn id(&self) -> String;
}

/// Flattened pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelEmbedder;

impl Embedder for PixelEmbedder {
    fn embed(&self, crops: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let per = crops.numel() / crops.batch().max(1);
        Ok(crops
            .data()
            .chunks(per)
            .map(|c| c.iter().map(|&v| v as f64).collect())
            .collect())
    }

    fn id(&self) -> String {
        "pixels".into()
    }
}

/// Global average of the last extractor level. Scores from it are only
/// comparable with each other, not with pretrained-network metrics.
#[derive(Debug, Clone)]
pub struct PyramidEmbedder {
    pub extractor: FeatureExtractor<f32>,
    pub seed: u64,
}

impl PyramidEmbedder {
    pub fn new(seed: u64) -> Self {
        PyramidEmbedder {
            extractor: FeatureExtractor::random(seed),
            seed,
        }
    }
}

impl Embedder for PyramidEmbedder {
    fn embed(&self, crops: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let pyr = self.extractor.pyramid(crops)?;
        let last = pyr.activations.last().expect("extractor has levels");
        let pooled = crate::tensor::avg_pool_global(last)?;
        let c = pooled.channels();
        Ok(pooled
            .data()
            .chunks(c)
            .map(|v| v.iter().map(|&x| x as f64).collect())
            .collect())
    }

    fn id(&self) -> String {
        format!("random-pyramid-avgpool(seed={})", self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Fréchet distance between crops of the output and of the reference.
    CFid,
    /// Mean embedding L1 distance between the reference and output crops.
    CLpipsLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropEvalOptions {
    pub crops: usize,
    /// Crop size; defaults to half the output for cFID and to the
    /// reference size for cLPIPSlike.
    pub crop_size: Option<(usize, usize)>,
}

impl Default for CropEvalOptions {
    fn default() -> Self {
        CropEvalOptions {
            crops: 8,
            crop_size: None,
        }
    }
}

fn draw(rng: &mut impl Rng, (h, w): (usize, usize), (ch, cw): (usize, usize)) -> (usize, usize) {
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    (top, left)
}

/// Crop-based score of a single `[1, 3, H', W']` output. For cFID the
/// reference is cropped too, at the same anchors when the two images have
/// equal size and at independent anchors otherwise.
pub fn crop_eval(
    output: &Tensor<f32>,
    reference: &Tensor<f32>,
    embedder: &dyn Embedder,
    protocol: Protocol,
    options: &CropEvalOptions,
    rng: &mut impl Rng,
) -> Result<f64> {
    let out_dims = (output.height(), output.width());
    let ref_dims = (reference.height(), reference.width());
    let size = options.crop_size.unwrap_or(match protocol {
        Protocol::CFid => (out_dims.0 / 2, out_dims.1 / 2),
        Protocol::CLpipsLike => ref_dims,
    });
    let fits = |d: (usize, usize)| size.0 >= 1 && size.1 >= 1 && size.0 <= d.0 && size.1 <= d.1;
    if output.batch() != 1 || reference.batch() != 1 || !fits(out_dims) || options.crops == 0 {
        return Err(shape_err!(
            "crop {size:?} x {} from {:?} / {:?}",
            options.crops,
            output.dims(),
            reference.dims()
        ));
    }
    match protocol {
        Protocol::CFid => {
            if !fits(ref_dims) {
                return Err(shape_err!(
                    "crop {size:?} does not fit reference {:?}",
                    reference.dims()
                ));
            }
            let paired = out_dims == ref_dims;
            let mut out_crops = Vec::with_capacity(options.crops);
            let mut ref_crops = Vec::with_capacity(options.crops);
            for _ in 0..options.crops {
                let (t, l) = draw(rng, out_dims, size);
                out_crops.push(crop(output, t, l, size.0, size.1)?);
                let (t, l) = if paired {
                    (t, l)
                } else {
                    draw(rng, ref_dims, size)
                };
                ref_crops.push(crop(reference, t, l, size.0, size.1)?);
            }
            let a = EmbeddingSet::new(embedder.embed(&Tensor::stack(&out_crops)?)?)?;
            let b = EmbeddingSet::new(embedder.embed(&Tensor::stack(&ref_crops)?)?)?;
            frechet_distance(&a, &b)
        }
        Protocol::CLpipsLike => {
            if size != ref_dims {
                return Err(shape_err!(
                    "cLPIPSlike crops must match the reference size {ref_dims:?}"
                ));
            }
            let mut crops = Vec::with_capacity(options.crops);
            for _ in 0..options.crops {
                let (t, l) = draw(rng, out_dims, size);
                crops.push(crop(output, t, l, size.0, size.1)?);
            }
            let e_ref = embedder.embed(reference)?.remove(0);
            let e_out = embedder.embed(&Tensor::stack(&crops)?)?;
            let total: f64 = e_out
                .iter()
                .map(|v| {
                    v.iter()
                        .zip(&e_ref)
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>()
                })
                .sum();
            Ok(total / options.crops as f64)
        }
    }
}

//! Weight archives and image files.
//!
//! Archive layout: a little-endian `u64` header length, a JSON header
//! `{version, dtype, names: [{name, dims, byte_offset}], meta}`, then the
//! tensors as contiguous little-endian scalars in header order. Unknown
//! header keys are ignored.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{shape_err, Error, Result};
use crate::generator::{GeneratorConfig, GeneratorWeights};
use crate::losses::{DiscriminatorConfig, DiscriminatorWeights};
use crate::params::NamedTensors;
use crate::tensor::{DType, Dims, Scalar, Tensor, BN_EPS, BN_MOMENTUM};

pub const ARCHIVE_VERSION: u32 = 1;
/// Upper bound on the JSON header, to reject garbage lengths early.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    name: String,
    dims: Dims,
    byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: DType,
    names: Vec<Entry>,
    #[serde(default)]
    meta: Value,
}

pub fn write_archive<T: Scalar>(
    out: &mut impl Write,
    tensors: &NamedTensors<T>,
    meta: Value,
) -> Result<()> {
    let width = T::DTYPE.width() as u64;
    let mut offset = 0;
    let names = tensors
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                dims: t.dims(),
                byte_offset: offset,
            };
            offset += t.numel() as u64 * width;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        version: ARCHIVE_VERSION,
        dtype: T::DTYPE,
        names,
        meta,
    })?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut payload = Vec::with_capacity(offset as usize);
    for (_, t) in tensors.iter() {
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    out.write_all(&payload)?;
    Ok(())
}

fn read_payload<S: Scalar, T: Scalar>(bytes: &[u8], dims: Dims) -> Result<Tensor<T>> {
    let data: Vec<T> = bytes
        .chunks_exact(S::DTYPE.width())
        .map(|c| T::lit(S::read_le(c).as_f64()))
        .collect();
    Tensor::from_vec(dims, data)
}

/// Reads an archive, converting to `T` when the stored dtype differs.
pub fn read_archive<T: Scalar>(input: &mut impl Read) -> Result<(NamedTensors<T>, Value)> {
    let mut len = [0u8; 8];
    input
        .read_exact(&mut len)
        .map_err(|_| Error::Archive("truncated archive header".into()))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Archive(format!(
            "header length {len} is implausible"
        )));
    }
    let mut header = vec![0u8; len as usize];
    input
        .read_exact(&mut header)
        .map_err(|_| Error::Archive("truncated archive header".into()))?;
    let header: Header = serde_json::from_slice(&header)
        .map_err(|e| Error::Archive(format!("bad archive header: {e}")))?;
    if header.version != ARCHIVE_VERSION {
        return Err(Error::Archive(format!(
            "unsupported archive version {}",
            header.version
        )));
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let width = header.dtype.width() as u64;
    let mut expected = 0u64;
    let mut tensors = NamedTensors::new();
    for e in &header.names {
        if e.byte_offset != expected {
            return Err(Error::Archive(format!(
                "tensor `{}` at offset {}, expected {expected}",
                e.name, e.byte_offset
            )));
        }
        let bytes = e.dims.iter().product::<usize>() as u64 * width;
        let end = expected + bytes;
        if end > payload.len() as u64 {
            return Err(Error::Archive(format!(
                "payload too short for tensor `{}`",
                e.name
            )));
        }
        let slice = &payload[expected as usize..end as usize];
        let t = match header.dtype {
            DType::F32 => read_payload::<f32, T>(slice, e.dims)?,
            DType::F64 => read_payload::<f64, T>(slice, e.dims)?,
        };
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::Archive(format!("duplicate tensor `{}`", e.name)));
        }
        expected = end;
    }
    if expected != payload.len() as u64 {
        return Err(Error::Archive(format!(
            "payload has {} bytes, header describes {expected}",
            payload.len()
        )));
    }
    Ok((tensors, header.meta))
}

pub fn archive_to_bytes<T: Scalar>(tensors: &NamedTensors<T>, meta: Value) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_archive(&mut out, tensors, meta)?;
    Ok(out)
}

pub fn archive_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(NamedTensors<T>, Value)> {
    read_archive(&mut &bytes[..])
}

/// Archive metadata for generator weights.
pub fn generator_meta(config: &GeneratorConfig) -> Value {
    serde_json::json!({
        "kind": "generator",
        "config": config,
        "bilinear": "half_pixel",
        "bn_eps": BN_EPS,
        "bn_momentum": BN_MOMENTUM,
    })
}

pub fn generator_to_bytes<T: Scalar>(w: &GeneratorWeights<T>) -> Result<Vec<u8>> {
    archive_to_bytes(&w.tensors, generator_meta(&w.config))
}

pub fn generator_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<GeneratorWeights<T>> {
    let (tensors, meta) = archive_from_bytes(bytes)?;
    let config: GeneratorConfig =
        serde_json::from_value(meta.get("config").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::Archive(format!("generator archive config: {e}")))?;
    GeneratorWeights::from_tensors(config, tensors)
}

pub fn save_generator<T: Scalar>(path: impl AsRef<Path>, w: &GeneratorWeights<T>) -> Result<()> {
    fs::write(path, generator_to_bytes(w)?)?;
    Ok(())
}

pub fn load_generator<T: Scalar>(path: impl AsRef<Path>) -> Result<GeneratorWeights<T>> {
    generator_from_bytes(&fs::read(path)?)
}

pub fn discriminator_to_bytes<T: Scalar>(d: &DiscriminatorWeights<T>) -> Result<Vec<u8>> {
    archive_to_bytes(
        &d.tensors,
        serde_json::json!({"kind": "discriminator", "config": d.config}),
    )
}

pub fn discriminator_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<DiscriminatorWeights<T>> {
    let (tensors, meta) = archive_from_bytes(bytes)?;
    let config: DiscriminatorConfig =
        serde_json::from_value(meta.get("config").cloned().unwrap_or(Value::Null))
            .map_err(|e| Error::Archive(format!("discriminator archive config: {e}")))?;
    DiscriminatorWeights::from_tensors(config, tensors)
}

/// Decodes an image to `[1, 3, H, W]` in `[0, 1]`. Alpha is dropped and
/// grayscale replicated.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(image_to_tensor(&img))
}

pub fn image_to_tensor(img: &DynamicImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let wide = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
            | DynamicImage::ImageRgb32F(_)
            | DynamicImage::ImageRgba32F(_)
    );
    if wide {
        let rgb = img.to_rgb32f();
        Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c]
        })
    } else {
        let rgb = img.to_rgb8();
        Tensor::from_fn([1, 3, h, w], |_, c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        })
    }
}

/// Clamps to `[0, 1]` and rounds half up to 8 bits.
pub fn quantize(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor().min(255.0) as u8
}

/// The tensor an 8-bit save followed by a load would produce.
pub fn quantized<T: Scalar>(t: &Tensor<T>) -> Tensor<f32> {
    let t: Tensor<f32> = t.cast();
    t.map(|v| quantize(v) as f32 / 255.0)
}

/// Writes item `n` of a `[N, 3, H, W]` tensor as an 8-bit RGB PNG.
pub fn save_png<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>, n: usize) -> Result<()> {
    let [b, c, h, w] = t.dims();
    if c != 3 || n >= b {
        return Err(shape_err!("cannot save item {n} of {:?} as RGB", t.dims()));
    }
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb([0, 1, 2].map(|ch| quantize(t.at(n, ch, y as usize, x as usize).as_f64() as f32)))
    });
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Affinely rescales a single-channel plane to `[0, 255]`; a constant plane
/// maps to 0.
pub fn save_gray_png<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let [_, _, h, w] = t.dims();
    let plane = &t.data()[..h * w];
    let lo = plane.iter().copied().fold(T::infinity(), T::min).as_f64();
    let hi = plane
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max)
        .as_f64();
    let span = hi - lo;
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = plane[y as usize * w + x as usize].as_f64();
        let u = if span > 0.0 { (v - lo) / span } else { 0.0 };
        image::Luma([quantize(u as f32)])
    });
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

//! PNG ingestion and emission: 8-bit gray or RGB, mapped to [0,1] floats.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, RgbImage};
use thiserror::Error;

use crate::numkit::Tensor;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("decode error on {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("unsupported channel count {channels} (want 1 or 3)")]
    BadChannels { channels: usize },
    #[error("frame {path} has shape {got:?}, expected {want:?}")]
    InconsistentFrames { path: PathBuf, got: Vec<usize>, want: Vec<usize> },
    #[error("no PNG frames in {0}")]
    EmptyDir(PathBuf),
    #[error("in-memory png codec: {0}")]
    Codec(#[source] image::ImageError),
}

fn from_image(img: DynamicImage) -> Tensor {
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let data = g.into_raw().iter().map(|&v| v as f32 / 255.0).collect();
            Tensor::new(vec![1, h, w], data).expect("valid decoded image")
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            // Interleaved RGB to planar (3,H,W).
            let mut data = vec![0.0f32; 3 * h * w];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = px[c] as f32 / 255.0;
                }
            }
            Tensor::new(vec![3, h, w], data).expect("valid decoded image")
        }
    }
}

fn to_image(t: &Tensor) -> Result<DynamicImage, ImgError> {
    let shape = t.shape();
    assert_eq!(shape.len(), 3, "expected rank-3 (C,H,W)");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let quant = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match c {
        1 => {
            let raw: Vec<u8> = t.data().iter().map(|&v| quant(v)).collect();
            Ok(GrayImage::from_raw(w as u32, h as u32, raw).expect("sized buffer").into())
        }
        3 => {
            let plane = h * w;
            let mut raw = vec![0u8; 3 * plane];
            for i in 0..plane {
                for ch in 0..3 {
                    raw[i * 3 + ch] = quant(t.data()[ch * plane + i]);
                }
            }
            Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer").into())
        }
        channels => Err(ImgError::BadChannels { channels }),
    }
}

/// Encode a (C,H,W) [0,1] tensor as PNG bytes.
pub fn encode_png(t: &Tensor) -> Result<Vec<u8>, ImgError> {
    let img = to_image(t)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).map_err(ImgError::Codec)?;
    Ok(buf.into_inner())
}

/// Decode PNG bytes to (C,H,W) in [0,1]; same channel rules as [`load_png`].
pub fn decode_png(bytes: &[u8]) -> Result<Tensor, ImgError> {
    Ok(from_image(image::load_from_memory(bytes).map_err(ImgError::Codec)?))
}

/// Load a PNG as (C,H,W) in [0,1]. Grayscale stays 1-channel; everything
/// else converts to RGB.
pub fn load_png(path: &Path) -> Result<Tensor, ImgError> {
    let img = image::open(path).map_err(|source| ImgError::Decode { path: path.into(), source })?;
    Ok(from_image(img))
}

/// Save a (C,H,W) [0,1] tensor as an 8-bit PNG.
pub fn save_png(path: &Path, t: &Tensor) -> Result<(), ImgError> {
    to_image(t)?.save(path).map_err(|source| ImgError::Decode { path: path.into(), source })
}

/// Load a directory of PNG frames, sorted by file name, as (T,C,H,W).
pub fn load_frame_dir(dir: &Path) -> Result<Tensor, ImgError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| ImgError::Io { path: dir.into(), source })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ImgError::EmptyDir(dir.into()));
    }
    let mut frames = Vec::with_capacity(paths.len());
    let first = load_png(&paths[0])?;
    let frame_shape = first.shape().to_vec();
    frames.push(first);
    for p in &paths[1..] {
        let f = load_png(p)?;
        if f.shape() != frame_shape.as_slice() {
            return Err(ImgError::InconsistentFrames {
                path: p.clone(),
                got: f.shape().to_vec(),
                want: frame_shape,
            });
        }
        frames.push(f);
    }
    let mut data = Vec::with_capacity(frames.len() * frames[0].numel());
    for f in &frames {
        data.extend_from_slice(f.data());
    }
    let shape = vec![frames.len(), frame_shape[0], frame_shape[1], frame_shape[2]];
    Ok(Tensor::new(shape, data).expect("stacked frames"))
}

/// Write a (T,C,H,W) video as frame_0000.png .. under `dir`.
pub fn save_frame_dir(dir: &Path, video: &Tensor) -> Result<(), ImgError> {
    let shape = video.shape();
    assert_eq!(shape.len(), 4, "save_frame_dir expects rank-4 (T,C,H,W)");
    fs::create_dir_all(dir).map_err(|source| ImgError::Io { path: dir.into(), source })?;
    let frame_len = shape[1] * shape[2] * shape[3];
    for t in 0..shape[0] {
        let frame = Tensor::new(
            vec![shape[1], shape[2], shape[3]],
            video.data()[t * frame_len..(t + 1) * frame_len].to_vec(),
        )
        .expect("frame slice");
        save_png(&dir.join(format!("frame_{t:04}.png")), &frame)?;
    }
    Ok(())
}

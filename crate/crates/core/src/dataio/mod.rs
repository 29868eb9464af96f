//! Annotated frames: manifest parsing, image loading, normalization,
//! augmentation and synthetic scenes.

mod augment;
mod synth;

pub use augment::{augment, AugmentConfig, GeometricRecord};
pub use synth::{synthesize_dataset, synthesize_frame, SynthBall, SynthConfig, SynthFrame};

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::{Error, Result};
use crate::model::InputNorm;
use crate::tensor::{Shape, Tensor4};

/// Smallest accepted frame side.
pub const MIN_FRAME_SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedFrame {
    pub image: RgbImage,
    /// Ball centers (x, y) in pixels, origin top-left.
    pub balls: Vec<(usize, usize)>,
    pub source_id: String,
}

impl AnnotatedFrame {
    pub fn new(image: RgbImage, balls: Vec<(usize, usize)>, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        let (w, h) = (image.width() as usize, image.height() as usize);
        if h < MIN_FRAME_SIDE || w < MIN_FRAME_SIDE {
            return Err(Error::Image {
                path: source_id.into(),
                msg: format!("frame is {w}x{h}, both sides must be at least {MIN_FRAME_SIDE}"),
            });
        }
        if let Some(&(x, y)) = balls.iter().find(|&&(x, y)| x >= w || y >= h) {
            return Err(Error::Image {
                path: source_id.into(),
                msg: format!("ball ({x}, {y}) lies outside the {w}x{h} frame"),
            });
        }
        Ok(AnnotatedFrame {
            image,
            balls,
            source_id,
        })
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }
}

/// One manifest line: image path (resolved against the manifest's
/// directory) and ball centers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub path: PathBuf,
    /// Path as written in the manifest.
    pub relative: String,
    pub balls: Vec<(usize, usize)>,
}

/// Parses `<path> <count> [<x> <y>]...` lines. Blank lines are skipped.
/// Referenced images must exist.
pub fn load_annotations(manifest: &Path) -> Result<Vec<FrameRecord>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::Manifest {
        path: manifest.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Manifest {
            path: manifest.to_path_buf(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(bad(format!("expected `<path> <count> [<x> <y>]...`, got `{line}`")));
        }
        let count: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("ball count `{}` is not a non-negative integer", fields[1])))?;
        if fields.len() != 2 + 2 * count {
            return Err(bad(format!(
                "ball count {count} needs {} coordinates, found {}",
                2 * count,
                fields.len() - 2
            )));
        }
        let coords = fields[2..]
            .iter()
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|_| bad(format!("coordinate `{f}` is not a non-negative integer")))
            })
            .collect::<Result<Vec<_>>>()?;
        let path = base.join(fields[0]);
        if !path.is_file() {
            return Err(Error::Image {
                path,
                msg: format!("image referenced on manifest line {lineno} does not exist"),
            });
        }
        out.push(FrameRecord {
            path,
            relative: fields[0].to_string(),
            balls: coords.chunks_exact(2).map(|c| (c[0], c[1])).collect(),
        });
    }
    Ok(out)
}

/// Reads a PNG or binary PPM as 8-bit RGB.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

pub fn load_frame(record: &FrameRecord) -> Result<AnnotatedFrame> {
    let image = load_image(&record.path)?;
    AnnotatedFrame::new(image, record.balls.clone(), record.relative.clone()).map_err(|e| match e {
        Error::Image { msg, .. } => Error::Image {
            path: record.path.clone(),
            msg,
        },
        other => other,
    })
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<AnnotatedFrame>> {
    load_annotations(manifest)?.iter().map(load_frame).collect()
}

/// Writes every frame as `<source_id>` (a relative PNG path) under `dir`
/// plus `manifest.txt` listing them.
pub fn write_dataset(dir: &Path, frames: &[AnnotatedFrame]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for f in frames {
        let path = dir.join(&f.source_id);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        f.image
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.clone(),
                msg: e.to_string(),
            })?;
        manifest.push_str(&manifest_line(f));
        manifest.push('\n');
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest)?;
    Ok(mpath)
}

pub fn manifest_line(f: &AnnotatedFrame) -> String {
    let mut s = format!("{} {}", f.source_id, f.balls.len());
    for (x, y) in &f.balls {
        s.push_str(&format!(" {x} {y}"));
    }
    s
}

/// `(p / pixel_max - mean) / std` per channel, shape 1x3xHxW.
pub fn normalize_image(image: &RgbImage, norm: &InputNorm) -> Tensor4 {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let lut: Vec<f32> = (0..=255u8).map(|p| norm.apply(p)).collect();
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = lut[px[c] as usize];
        }
    }
    Tensor4::from_vec(Shape::new(1, 3, h, w), data).expect("frame dimensions are positive")
}

/// Stacks equally sized frames into one normalized batch.
pub fn normalize_batch(images: &[&RgbImage], norm: &InputNorm) -> Result<Tensor4> {
    let items: Vec<Tensor4> = images.iter().map(|im| normalize_image(im, norm)).collect();
    Tensor4::stack(&items)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-frame seed derived from the run seed, an epoch and a frame index.
pub fn derive_seed(run_seed: u64, epoch: u64, index: u64) -> u64 {
    mix(mix(mix(run_seed) ^ epoch) ^ index)
}

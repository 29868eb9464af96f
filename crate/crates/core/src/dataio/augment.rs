use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AnnotatedFrame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub jitter: bool,
    pub brightness: (f32, f32),
    pub contrast: (f32, f32),
    pub saturation: (f32, f32),
    /// Maximum hue rotation as a fraction of the hue circle.
    pub hue: f32,
    pub flip_prob: f64,
    /// Scale factor range; `None` disables scaling.
    pub scale: Option<(f64, f64)>,
    /// (height, width); `None` keeps the whole frame.
    pub crop: Option<(usize, usize)>,
}

impl AugmentConfig {
    /// Full pipeline with the given crop.
    pub fn with_crop(h: usize, w: usize) -> Self {
        AugmentConfig {
            jitter: true,
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            saturation: (0.8, 1.2),
            hue: 0.04,
            flip_prob: 0.5,
            scale: Some((0.5, 1.1)),
            crop: Some((h, w)),
        }
    }

    /// Crop used for desk-scale training on 256x256 frames.
    pub fn desk() -> Self {
        Self::with_crop(128, 128)
    }

    pub fn full_scale() -> Self {
        Self::with_crop(512, 512)
    }

    pub fn disabled() -> Self {
        AugmentConfig {
            jitter: false,
            flip_prob: 0.0,
            scale: None,
            crop: None,
            ..Self::desk()
        }
    }

    pub fn geometric_only(&self) -> Self {
        AugmentConfig {
            jitter: false,
            ..self.clone()
        }
    }

    fn check(&self) -> Result<()> {
        if let Some((lo, hi)) = self.scale {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::param(format!(
                    "scale range [{lo}, {hi}] must be positive and ordered"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::param(format!(
                "flip probability {} outside [0, 1]",
                self.flip_prob
            )));
        }
        for (name, (lo, hi)) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(lo >= 0.0 && lo <= hi) {
                return Err(Error::param(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if let Some((h, w)) = self.crop {
            if h == 0 || w == 0 {
                return Err(Error::param("crop size must be positive"));
            }
        }
        Ok(())
    }
}

/// The geometric part of one augmentation, enough to map coordinates both ways.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricRecord {
    /// (height, width) of the input frame.
    pub source: (usize, usize),
    pub flipped: bool,
    /// (height, width) after scaling.
    pub scaled: (usize, usize),
    /// (y, x) of the crop's top-left corner in the scaled frame.
    pub crop_offset: (usize, usize),
    /// (height, width) of the output.
    pub output: (usize, usize),
}

impl GeometricRecord {
    fn factors(&self) -> (f64, f64) {
        (
            self.scaled.1 as f64 / self.source.1 as f64,
            self.scaled.0 as f64 / self.source.0 as f64,
        )
    }

    /// Input pixel to output pixel, `None` when it falls outside the crop.
    pub fn forward(&self, x: usize, y: usize) -> Option<(usize, usize)> {
        let (sx, sy) = self.factors();
        let x = if self.flipped { self.source.1 - 1 - x } else { x };
        let scale =
            |v: usize, s: f64, limit: usize| (((v as f64 + 0.5) * s - 0.5).round().max(0.0) as usize).min(limit - 1);
        let xs = scale(x, sx, self.scaled.1);
        let ys = scale(y, sy, self.scaled.0);
        let (oy, ox) = self.crop_offset;
        let (xc, yc) = (xs.checked_sub(ox)?, ys.checked_sub(oy)?);
        (xc < self.output.1 && yc < self.output.0).then_some((xc, yc))
    }

    /// Output pixel back to (sub-pixel) input coordinates.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (sx, sy) = self.factors();
        let xs = x + self.crop_offset.1 as f64;
        let ys = y + self.crop_offset.0 as f64;
        let xi = (xs + 0.5) / sx - 0.5;
        let yi = (ys + 0.5) / sy - 0.5;
        let xi = if self.flipped {
            (self.source.1 - 1) as f64 - xi
        } else {
            xi
        };
        (xi, yi)
    }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Brightness, contrast, saturation, then a hue rotation in YIQ space.
fn color_jitter(img: &mut RgbImage, b: f32, c: f32, s: f32, hue: f32) {
    let n = (img.width() * img.height()) as f64;
    let mean = img
        .pixels()
        .map(|p| luma([p[0] as f32, p[1] as f32, p[2] as f32]) as f64)
        .sum::<f64>()
        / n;
    let mean = (mean * b as f64) as f32;
    let (sin, cos) = (hue * std::f32::consts::TAU).sin_cos();
    for px in img.pixels_mut() {
        let mut v = [px[0] as f32 * b, px[1] as f32 * b, px[2] as f32 * b];
        for ch in &mut v {
            *ch = mean + c * (*ch - mean);
        }
        let g = luma(v);
        for ch in &mut v {
            *ch = g + s * (*ch - g);
        }
        let y = luma(v);
        let i = 0.596 * v[0] - 0.274 * v[1] - 0.322 * v[2];
        let q = 0.211 * v[0] - 0.523 * v[1] + 0.312 * v[2];
        let (i, q) = (i * cos - q * sin, i * sin + q * cos);
        let rgb = [
            y + 0.956 * i + 0.621 * q,
            y - 0.272 * i - 0.647 * q,
            y - 1.106 * i + 1.703 * q,
        ];
        for (k, ch) in rgb.iter().enumerate() {
            px[k] = ch.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Jitter, flip, scale, crop, in that order. Balls follow the geometric
/// maps; those leaving the crop are dropped.
pub fn augment<R: Rng>(
    frame: &AnnotatedFrame,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(AnnotatedFrame, GeometricRecord)> {
    cfg.check()?;
    let (h, w) = (frame.height(), frame.width());
    let mut img = frame.image.clone();
    if cfg.jitter {
        let b = rng.gen_range(cfg.brightness.0..=cfg.brightness.1);
        let c = rng.gen_range(cfg.contrast.0..=cfg.contrast.1);
        let s = rng.gen_range(cfg.saturation.0..=cfg.saturation.1);
        let hue = rng.gen_range(-cfg.hue..=cfg.hue);
        color_jitter(&mut img, b, c, s, hue);
    }
    let flipped = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob);
    if flipped {
        imageops::flip_horizontal_in_place(&mut img);
    }
    let factor = cfg
        .scale
        .map(|(lo, hi)| if lo == hi { lo } else { rng.gen_range(lo..hi) });
    let scaled = match factor {
        Some(f) => (
            ((h as f64 * f).round() as usize).max(1),
            ((w as f64 * f).round() as usize).max(1),
        ),
        None => (h, w),
    };
    if scaled != (h, w) {
        img = imageops::resize(&img, scaled.1 as u32, scaled.0 as u32, FilterType::Triangle);
    }
    let (output, crop_offset) = match cfg.crop {
        Some((ch, cw)) => {
            if ch > scaled.0 || cw > scaled.1 {
                return Err(Error::param(format!(
                    "crop {ch}x{cw} does not fit the {}x{} scaled frame",
                    scaled.0, scaled.1
                )));
            }
            let oy = rng.gen_range(0..=scaled.0 - ch);
            let ox = rng.gen_range(0..=scaled.1 - cw);
            img = imageops::crop_imm(&img, ox as u32, oy as u32, cw as u32, ch as u32).to_image();
            ((ch, cw), (oy, ox))
        }
        None => (scaled, (0, 0)),
    };
    let record = GeometricRecord {
        source: (h, w),
        flipped,
        scaled,
        crop_offset,
        output,
    };
    let balls = frame.balls.iter().filter_map(|&(x, y)| record.forward(x, y)).collect();
    Ok((
        AnnotatedFrame {
            image: img,
            balls,
            source_id: frame.source_id.clone(),
        },
        record,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn frame(w: u32, h: u32, balls: Vec<(usize, usize)>) -> AnnotatedFrame {
        let img = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 90]));
        AnnotatedFrame::new(img, balls, "t").unwrap()
    }

    fn only(flip: f64, scale: Option<(f64, f64)>, crop: Option<(usize, usize)>) -> AugmentConfig {
        AugmentConfig {
            jitter: false,
            flip_prob: flip,
            scale,
            crop,
            ..AugmentConfig::desk()
        }
    }

    #[test]
    fn flip_mirrors_x() {
        let f = frame(200, 100, vec![(50, 40)]);
        let (out, rec) = augment(&f, &only(1.0, None, None), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(rec.flipped);
        assert_eq!(out.balls, vec![(149, 40)]);
        assert_eq!(out.image.get_pixel(149, 0), f.image.get_pixel(50, 0));
    }

    #[test]
    fn half_scale_halves_coordinates() {
        let f = frame(256, 256, vec![(100, 60)]);
        let (out, rec) = augment(
            &f,
            &only(0.0, Some((0.5, 0.5)), None),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(rec.scaled, (128, 128));
        assert_eq!(out.balls, vec![(50, 30)]);
    }

    #[test]
    fn infeasible_crop_is_a_param_error() {
        let f = frame(256, 256, vec![]);
        let r = augment(
            &f,
            &only(0.0, Some((0.5, 0.5)), Some((256, 256))),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(r, Err(Error::Param(_))));
    }

    #[test]
    fn balls_outside_the_crop_are_dropped() {
        let f = frame(256, 256, vec![(5, 5), (250, 250)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (out, rec) = augment(&f, &only(0.0, None, Some((64, 64))), &mut rng).unwrap();
        assert!(out.balls.len() < 2);
        assert_eq!((out.height(), out.width()), (64, 64));
        for &(x, y) in &out.balls {
            let (ox, oy) = (rec.crop_offset.1, rec.crop_offset.0);
            assert!(f.balls.contains(&(x + ox, y + oy)));
        }
    }

    #[test]
    fn jitter_leaves_geometry_alone() {
        let f = frame(128, 96, vec![(30, 40)]);
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            scale: None,
            crop: None,
            ..AugmentConfig::desk()
        };
        let (out, _) = augment(&f, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(out.balls, f.balls);
        assert_ne!(out.image, f.image);
    }

    #[test]
    fn same_seed_same_output() {
        let f = frame(256, 256, vec![(100, 100)]);
        let a = augment(&f, &AugmentConfig::desk(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = augment(&f, &AugmentConfig::desk(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disabled_is_identity() {
        let f = frame(64, 64, vec![(10, 20)]);
        let (out, _) = augment(&f, &AugmentConfig::disabled(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, f);
    }

    proptest! {
        #[test]
        fn inverse_recovers_input(seed in any::<u64>(), x in 0usize..256, y in 0usize..256) {
            let f = frame(256, 256, vec![(x, y)]);
            let cfg = AugmentConfig::desk().geometric_only();
            let (out, rec) = augment(&f, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            if let Some(&(bx, by)) = out.balls.first() {
                let (ix, iy) = rec.inverse(bx as f64, by as f64);
                prop_assert!((ix - x as f64).abs() <= 1.0 && (iy - y as f64).abs() <= 1.0, "({x},{y}) -> ({bx},{by}) -> ({ix},{iy})");
            }
        }
    }
}

//! Procedural pitch scenes with exactly known ball centers.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, AnnotatedFrame, MIN_FRAME_SIDE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub radius: (f32, f32),
    /// Relative weights of 0, 1 and 2 balls per frame.
    pub ball_count_weights: [f64; 3],
    pub lines: (usize, usize),
    pub players: (usize, usize),
    /// White blobs in the off-pitch band.
    pub clutter: (usize, usize),
    pub off_pitch_prob: f64,
    pub motion_blur_prob: f64,
    /// Chance that a player is drawn partly over a ball.
    pub occlusion_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 256,
            width: 256,
            radius: (8.0, 16.0),
            ball_count_weights: [0.35, 0.55, 0.10],
            lines: (1, 3),
            players: (2, 6),
            clutter: (1, 4),
            off_pitch_prob: 0.5,
            motion_blur_prob: 0.3,
            occlusion_prob: 0.15,
        }
    }
}

impl SynthConfig {
    fn check(&self) -> Result<()> {
        let (lo, hi) = self.radius;
        if !(2.0..=64.0).contains(&lo) || !(2.0..=64.0).contains(&hi) || lo > hi {
            return Err(Error::param(format!(
                "ball radius range [{lo}, {hi}] must lie within [2, 64]"
            )));
        }
        if self.height < MIN_FRAME_SIDE || self.width < MIN_FRAME_SIDE {
            return Err(Error::param(format!(
                "synthetic frames must be at least {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}"
            )));
        }
        let side = self.height.min(self.width) as f32;
        if 4.0 * hi + 8.0 > side {
            return Err(Error::param(format!(
                "radius {hi} does not fit a {}x{} frame",
                self.height, self.width
            )));
        }
        if self.ball_count_weights.iter().any(|w| *w < 0.0) || self.ball_count_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::param(
                "ball count weights must be non-negative with a positive sum",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthBall {
    pub x: f32,
    pub y: f32,
    pub radius: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    pub frame: AnnotatedFrame,
    pub balls: Vec<SynthBall>,
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f32; 3], alpha: f32) {
        if alpha <= 0.0 {
            return;
        }
        let a = alpha.min(1.0);
        let p = &mut self.px[y * self.w + x];
        for c in 0..3 {
            p[c] = p[c] * (1.0 - a) + color[c] * a;
        }
    }

    fn rect(&mut self, x0: f32, y0: f32, x1: f32, y1: f32, color: [f32; 3]) {
        let xa = x0.max(0.0) as usize;
        let ya = y0.max(0.0) as usize;
        let xb = (x1.ceil().max(0.0) as usize).min(self.w);
        let yb = (y1.ceil().max(0.0) as usize).min(self.h);
        for y in ya..yb {
            for x in xa..xb {
                // Fractional coverage on the edges.
                let cx = ((x as f32 + 1.0).min(x1) - (x as f32).max(x0)).clamp(0.0, 1.0);
                let cy = ((y as f32 + 1.0).min(y1) - (y as f32).max(y0)).clamp(0.0, 1.0);
                self.blend(x, y, color, cx * cy);
            }
        }
    }

    /// Alpha from a signed distance (negative inside), one pixel of ramp.
    fn shape(&mut self, bbox: (f32, f32, f32, f32), mut sdf: impl FnMut(f32, f32) -> Option<([f32; 3], f32)>) {
        let (x0, y0, x1, y1) = bbox;
        let xa = (x0.floor().max(0.0)) as usize;
        let ya = (y0.floor().max(0.0)) as usize;
        let xb = (x1.ceil().max(0.0) as usize).min(self.w);
        let yb = (y1.ceil().max(0.0) as usize).min(self.h);
        for y in ya..yb {
            for x in xa..xb {
                if let Some((color, d)) = sdf(x as f32, y as f32) {
                    self.blend(x, y, color, 0.5 - d);
                }
            }
        }
    }

    fn into_image(self) -> RgbImage {
        let mut img = RgbImage::new(self.w as u32, self.h as u32);
        for (dst, src) in img.pixels_mut().zip(self.px) {
            for c in 0..3 {
                dst[c] = src[c].round().clamp(0.0, 255.0) as u8;
            }
        }
        img
    }
}

fn segment_distance(px: f32, py: f32, a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

fn draw_player(c: &mut Canvas, rng: &mut ChaCha8Rng, x: f32, y: f32, shirt: [f32; 3], shorts: [f32; 3]) {
    let w = rng.gen_range(10.0..16.0f32);
    let h = rng.gen_range(26.0..40.0f32);
    let skin = [
        rng.gen_range(120.0..220.0),
        rng.gen_range(90.0..170.0),
        rng.gen_range(60.0..140.0),
    ];
    let head_r = w * 0.3;
    c.shape(
        (x - head_r - 1.0, y - 1.0, x + head_r + 1.0, y + 2.0 * head_r + 1.0),
        |px, py| {
            let d = ((px - x).powi(2) + (py - y - head_r).powi(2)).sqrt() - head_r;
            Some((skin, d))
        },
    );
    let top = y + 2.0 * head_r;
    c.rect(x - w / 2.0, top, x + w / 2.0, top + h * 0.45, shirt);
    c.rect(x - w / 2.0, top + h * 0.45, x + w / 2.0, top + h * 0.65, shorts);
    let leg_w = w * 0.3;
    for side in [-1.0f32, 1.0] {
        let lx = x + side * w * 0.22 - leg_w / 2.0;
        c.rect(lx, top + h * 0.65, lx + leg_w, top + h * 0.85, skin);
        // White socks, a deliberate ball look-alike.
        c.rect(lx, top + h * 0.85, lx + leg_w, top + h, [240.0, 240.0, 240.0]);
    }
}

fn draw_ball(c: &mut Canvas, rng: &mut ChaCha8Rng, b: &SynthBall, blur_prob: f64) {
    let base: f32 = rng.gen_range(215.0..255.0);
    let shade: f32 = rng.gen_range(0.15..0.35);
    let (elong, angle) = if rng.gen_bool(blur_prob) {
        (rng.gen_range(1.1..1.6f32), rng.gen_range(0.0..std::f32::consts::PI))
    } else {
        (1.0, 0.0)
    };
    let (sin, cos) = angle.sin_cos();
    let patches: Vec<(f32, f32)> = (0..rng.gen_range(0..4))
        .map(|_| {
            let a = rng.gen_range(0.0..std::f32::consts::TAU);
            let d = rng.gen_range(0.0..0.6f32) * b.radius;
            (d * a.cos(), d * a.sin())
        })
        .collect();
    let patch_r = b.radius * 0.22;
    let reach = b.radius * elong + 2.0;
    c.shape((b.x - reach, b.y - reach, b.x + reach, b.y + reach), |px, py| {
        let (dx, dy) = (px - b.x, py - b.y);
        // Rotate into the blur frame and compress the long axis.
        let u = (dx * cos + dy * sin) / elong;
        let v = -dx * sin + dy * cos;
        let rr = (u * u + v * v).sqrt();
        let d = rr - b.radius;
        // Lit from the top-left.
        let lit = 1.0 - shade * ((u + v) / (2.0 * b.radius) + 0.5).clamp(0.0, 1.0);
        let mut g = base * lit;
        if patches
            .iter()
            .any(|&(ox, oy)| ((u - ox).powi(2) + (v - oy).powi(2)).sqrt() < patch_r)
        {
            g *= 0.45;
        }
        Some(([g, g, g * 0.98], d))
    });
}

/// Renders one scene from `seed`.
pub fn synthesize_frame(cfg: &SynthConfig, seed: u64, source_id: &str) -> Result<SynthFrame> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let mut c = Canvas {
        w,
        h,
        px: vec![[0.0; 3]; w * h],
    };

    // Pitch with mowing stripes and grain.
    let green = [
        rng.gen_range(30.0..70.0f32),
        rng.gen_range(100.0..150.0f32),
        rng.gen_range(25.0..55.0f32),
    ];
    let stripe = rng.gen_range(16.0..40.0f32);
    let stripe_gain = rng.gen_range(0.05..0.12f32);
    let vertical = rng.gen_bool(0.5);
    for y in 0..h {
        for x in 0..w {
            let t = if vertical { x } else { y } as f32;
            let k = if ((t / stripe) as usize).is_multiple_of(2) {
                1.0 + stripe_gain
            } else {
                1.0 - stripe_gain
            };
            let n = rng.gen_range(-6.0..6.0f32);
            c.px[y * w + x] = [green[0] * k + n, green[1] * k + n, green[2] * k + n];
        }
    }

    // Off-pitch band with crowd noise and white clutter.
    let band = if rng.gen_bool(cfg.off_pitch_prob) {
        rng.gen_range(16..48usize).min(h / 4)
    } else {
        0
    };
    if band > 0 {
        for y in 0..band {
            for x in 0..w {
                c.px[y * w + x] = [
                    rng.gen_range(20.0..160.0),
                    rng.gen_range(20.0..160.0),
                    rng.gen_range(20.0..160.0),
                ];
            }
        }
        for _ in 0..rng.gen_range(cfg.clutter.0..=cfg.clutter.1) {
            let bw = rng.gen_range(6.0..30.0f32);
            let bh = rng.gen_range(4.0..(band as f32).max(5.0));
            let x0 = rng.gen_range(0.0..(w as f32 - bw));
            let y0 = rng.gen_range(0.0..(band as f32 - bh).max(1.0));
            let v = rng.gen_range(220.0..255.0f32);
            c.rect(x0, y0, x0 + bw, y0 + bh, [v, v, v]);
        }
    }
    let pitch_top = band as f32;

    // Pitch markings.
    let line_color = [235.0, 235.0, 230.0];
    for _ in 0..rng.gen_range(cfg.lines.0..=cfg.lines.1) {
        let half = rng.gen_range(1.0..2.0f32);
        let a = (rng.gen_range(0.0..w as f32), rng.gen_range(pitch_top..h as f32));
        let b = (rng.gen_range(0.0..w as f32), rng.gen_range(pitch_top..h as f32));
        c.shape((0.0, pitch_top, w as f32, h as f32), |px, py| {
            Some((line_color, segment_distance(px, py, a, b) - half))
        });
    }
    if rng.gen_bool(0.3) {
        let (cx, cy) = (rng.gen_range(0.0..w as f32), rng.gen_range(pitch_top..h as f32));
        let r = rng.gen_range(30.0..60.0f32);
        c.shape(
            (cx - r - 3.0, (cy - r - 3.0).max(pitch_top), cx + r + 3.0, cy + r + 3.0),
            |px, py| {
                let d = (((px - cx).powi(2) + (py - cy).powi(2)).sqrt() - r).abs() - 1.2;
                Some((line_color, d))
            },
        );
    }

    // Balls, kept apart and fully on the pitch.
    let weights = cfg.ball_count_weights;
    let total: f64 = weights.iter().sum();
    let u = rng.gen_range(0.0..total);
    let count = if u < weights[0] {
        0
    } else if u < weights[0] + weights[1] {
        1
    } else {
        2
    };
    let mut balls: Vec<SynthBall> = Vec::with_capacity(count);
    let mut attempts = 0;
    while balls.len() < count && attempts < 100 {
        attempts += 1;
        let radius = if cfg.radius.0 == cfg.radius.1 {
            cfg.radius.0
        } else {
            rng.gen_range(cfg.radius.0..=cfg.radius.1)
        };
        let x = rng.gen_range(radius..(w as f32 - 1.0 - radius));
        let y = rng.gen_range((pitch_top + radius).min(h as f32 - 2.0 - radius)..(h as f32 - 1.0 - radius));
        if balls
            .iter()
            .all(|b| ((b.x - x).powi(2) + (b.y - y).powi(2)).sqrt() > 48.0 + b.radius + radius)
        {
            balls.push(SynthBall { x, y, radius });
        }
    }

    let teams = [
        [
            rng.gen_range(0.0..255.0),
            rng.gen_range(0.0..255.0),
            rng.gen_range(0.0..255.0),
        ],
        [
            rng.gen_range(0.0..255.0),
            rng.gen_range(0.0..255.0),
            rng.gen_range(0.0..255.0),
        ],
    ];
    let shorts = [
        rng.gen_range(0.0..80.0),
        rng.gen_range(0.0..80.0),
        rng.gen_range(0.0..80.0),
    ];
    for _ in 0..rng.gen_range(cfg.players.0..=cfg.players.1) {
        let x = rng.gen_range(8.0..(w as f32 - 8.0));
        let y = rng.gen_range((pitch_top - 10.0).max(0.0)..(h as f32 - 30.0));
        let team = teams[rng.gen_range(0..2)];
        draw_player(&mut c, &mut rng, x, y, team, shorts);
    }
    for b in &balls {
        draw_ball(&mut c, &mut rng, b, cfg.motion_blur_prob);
    }
    for b in &balls {
        if rng.gen_bool(cfg.occlusion_prob) {
            // A player standing beside the ball, overlapping its edge.
            let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
            let x = b.x + side * (b.radius + rng.gen_range(0.0..6.0f32));
            let y = b.y - rng.gen_range(20.0..40.0f32);
            let team = teams[rng.gen_range(0..2)];
            draw_player(&mut c, &mut rng, x, y, team, shorts);
        }
    }

    let annotations = balls
        .iter()
        .map(|b| ((b.x.round() as usize).min(w - 1), (b.y.round() as usize).min(h - 1)))
        .collect();
    Ok(SynthFrame {
        frame: AnnotatedFrame::new(c.into_image(), annotations, source_id)?,
        balls,
    })
}

/// `count` frames named `frame_NNNN.png`, frame `i` rendered from
/// `derive_seed(seed, 0, i)`.
pub fn synthesize_dataset(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<AnnotatedFrame>> {
    (0..count)
        .map(|i| Ok(synthesize_frame(cfg, derive_seed(seed, 0, i as u64), &format!("frame_{i:04}.png"))?.frame))
        .collect()
}

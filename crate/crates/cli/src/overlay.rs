//! Ball-confidence heat map drawn over the input frame.

use deepball::detector::Detection;
use deepball::model::{ConfidenceMap, SCALING_FACTOR};
use image::{Rgb, RgbImage};

const MARKER_HALF: i64 = 8;
const MARKER: Rgb<u8> = Rgb([0, 255, 0]);

/// Black through red and yellow to white.
fn heat(c: f32) -> [f32; 3] {
    let c = c.clamp(0.0, 1.0) * 3.0;
    [c.min(1.0), (c - 1.0).clamp(0.0, 1.0), (c - 2.0).clamp(0.0, 1.0)]
}

/// Frame with the ball channel upsampled by the scaling factor, blended
/// at 50%, and a square around every detection.
pub fn render(frame: &RgbImage, conf: &ConfidenceMap, detections: &[Detection]) -> RgbImage {
    let (mh, mw) = (conf.height(), conf.width());
    let ball = conf.ball(0);
    let mut out = frame.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let cy = (y as usize / SCALING_FACTOR).min(mh - 1);
        let cx = (x as usize / SCALING_FACTOR).min(mw - 1);
        let h = heat(ball[cy * mw + cx]);
        for c in 0..3 {
            px[c] = (0.5 * px[c] as f32 + 0.5 * 255.0 * h[c]).round() as u8;
        }
    }
    let (w, h) = (out.width() as i64, out.height() as i64);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            out.put_pixel(x as u32, y as u32, MARKER);
        }
    };
    for d in detections {
        let (cx, cy) = (d.x_p as i64, d.y_p as i64);
        for t in -MARKER_HALF..=MARKER_HALF {
            put(cx + t, cy - MARKER_HALF);
            put(cx + t, cy + MARKER_HALF);
            put(cx - MARKER_HALF, cy + t);
            put(cx + MARKER_HALF, cy + t);
        }
    }
    out
}

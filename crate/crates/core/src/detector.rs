//! Decoding confidence maps into pixel-space detections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{accuracy, EvalFrame};
use crate::model::{ConfidenceMap, SCALING_FACTOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub theta: f32,
    pub max_detections: usize,
    /// Half-width, in cells, of the square zeroed around each accepted peak.
    pub suppression_radius: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            theta: 0.5,
            max_detections: 1,
            suppression_radius: 3,
        }
    }
}

impl DecodeConfig {
    pub fn single(theta: f32) -> Self {
        DecodeConfig {
            theta,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<()> {
        if self.suppression_radius == 0 {
            return Err(Error::param("suppression_radius must be at least 1"));
        }
        if !(self.theta.is_finite() || self.theta == f32::INFINITY) {
            return Err(Error::param(format!("theta must be a number, got {}", self.theta)));
        }
        Ok(())
    }
}

/// A local maximum in map coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x_f: usize,
    pub y_f: usize,
    pub confidence: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x_p: usize,
    pub y_p: usize,
    pub confidence: f32,
    pub cell: (usize, usize),
}

/// Iterative global-max extraction over a row-major `map_h` x `map_w` ball
/// plane. Each accepted peak suppresses the square of the configured radius
/// around it; suppressed cells can never be picked again. The input is not
/// modified.
pub fn extract_peaks(ball: &[f32], map_h: usize, map_w: usize, cfg: &DecodeConfig) -> Result<Vec<Peak>> {
    cfg.check()?;
    if ball.len() != map_h * map_w {
        return Err(Error::shape(
            "extract_peaks",
            format!("plane of {} values for a {map_h}x{map_w} map", ball.len()),
        ));
    }
    let mut work = ball.to_vec();
    let mut out = Vec::new();
    let r = cfg.suppression_radius;
    while out.len() < cfg.max_detections {
        let mut best: Option<usize> = None;
        for (i, &v) in work.iter().enumerate() {
            if v.is_nan() || v == f32::NEG_INFINITY {
                continue;
            }
            if best.is_none_or(|b| v > work[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        let confidence = work[b];
        if confidence < cfg.theta {
            break;
        }
        let (y_f, x_f) = (b / map_w, b % map_w);
        out.push(Peak { x_f, y_f, confidence });
        for y in y_f.saturating_sub(r)..=(y_f + r).min(map_h - 1) {
            for x in x_f.saturating_sub(r)..=(x_f + r).min(map_w - 1) {
                work[y * map_w + x] = f32::NEG_INFINITY;
            }
        }
    }
    Ok(out)
}

/// `(floor(k (x_f - 0.5)), floor(k (y_f - 0.5)))` clipped into a
/// `width` x `height` frame.
pub fn map_to_pixels(x_f: usize, y_f: usize, k: usize, width: usize, height: usize) -> (usize, usize) {
    let f = |c: usize, limit: usize| {
        let v = (k as f64 * (c as f64 - 0.5)).floor();
        v.clamp(0.0, limit.saturating_sub(1) as f64) as usize
    };
    (f(x_f, width), f(y_f, height))
}

/// Detections for batch item `item` of a map computed from a
/// `image_h` x `image_w` frame.
pub fn decode(
    conf: &ConfidenceMap,
    item: usize,
    image_h: usize,
    image_w: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    if item >= conf.batch() {
        return Err(Error::shape(
            "decode",
            format!("item {item} of a batch of {}", conf.batch()),
        ));
    }
    let peaks = extract_peaks(conf.ball(item), conf.height(), conf.width(), cfg)?;
    Ok(peaks
        .into_iter()
        .map(|p| {
            let (x_p, y_p) = map_to_pixels(p.x_f, p.y_f, SCALING_FACTOR, image_w, image_h);
            Detection {
                x_p,
                y_p,
                confidence: p.confidence,
                cell: (p.x_f, p.y_f),
            }
        })
        .collect())
}

/// Threshold grid searched by [`calibrate_threshold`]: 0.00, 0.01, ..., 1.00.
pub fn theta_grid() -> impl Iterator<Item = f32> {
    (0..=100).map(|i| i as f32 / 100.0)
}

/// The grid threshold with the best single-ball accuracy on `frames`; ties
/// go to the larger threshold.
pub fn calibrate_threshold(frames: &[EvalFrame], tolerance_px: f64) -> Result<f32> {
    if frames.is_empty() {
        return Err(Error::param("calibration needs at least one validation frame"));
    }
    let mut best = (f64::NEG_INFINITY, 0.0f32);
    for theta in theta_grid() {
        let acc = accuracy(frames, theta, tolerance_px)?.accuracy;
        if acc >= best.0 {
            best = (acc, theta);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor4};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(theta: f32, max: usize, r: usize) -> DecodeConfig {
        DecodeConfig {
            theta,
            max_detections: max,
            suppression_radius: r,
        }
    }

    /// Literal reading: zero the neighbourhood in a copy, rescan.
    fn brute_force(ball: &[f32], h: usize, w: usize, c: &DecodeConfig) -> Vec<Peak> {
        let mut m = ball.to_vec();
        let mut alive = vec![true; m.len()];
        let mut out = Vec::new();
        while out.len() < c.max_detections {
            let mut bi = usize::MAX;
            for i in 0..m.len() {
                if alive[i] && (bi == usize::MAX || m[i] > m[bi]) {
                    bi = i;
                }
            }
            if bi == usize::MAX || m[bi] < c.theta {
                break;
            }
            let (y, x) = (bi / w, bi % w);
            out.push(Peak {
                x_f: x,
                y_f: y,
                confidence: m[bi],
            });
            for yy in 0..h {
                for xx in 0..w {
                    if yy.abs_diff(y) <= c.suppression_radius && xx.abs_diff(x) <= c.suppression_radius {
                        m[yy * w + xx] = 0.0;
                        alive[yy * w + xx] = false;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_hot_cell() {
        let mut m = vec![0.0; 16];
        m[6] = 0.9;
        let p = extract_peaks(&m, 4, 4, &cfg(0.5, 1, 3)).unwrap();
        assert_eq!(
            p,
            vec![Peak {
                x_f: 2,
                y_f: 1,
                confidence: 0.9
            }]
        );
    }

    #[test]
    fn below_threshold_is_empty() {
        let m = vec![0.3; 16];
        assert!(extract_peaks(&m, 4, 4, &cfg(0.5, 4, 3)).unwrap().is_empty());
    }

    #[test]
    fn separated_and_close_peaks() {
        let mut m = vec![0.0; 32 * 32];
        m[5 * 32 + 5] = 0.9;
        m[5 * 32 + 15] = 0.8;
        let p = extract_peaks(&m, 32, 32, &cfg(0.5, 4, 3)).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p, brute_force(&m, 32, 32, &cfg(0.5, 4, 3)));
        let mut m = vec![0.0; 32 * 32];
        m[5 * 32 + 5] = 0.9;
        m[5 * 32 + 7] = 0.8;
        let p = extract_peaks(&m, 32, 32, &cfg(0.5, 4, 3)).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].confidence, 0.9);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let m = vec![0.7; 9];
        let p = extract_peaks(&m, 3, 3, &cfg(0.5, 1, 1)).unwrap();
        assert_eq!((p[0].x_f, p[0].y_f), (0, 0));
    }

    #[test]
    fn zero_theta_never_revisits_suppressed_cells() {
        let m = vec![0.0; 64];
        let c = cfg(0.0, 100, 1);
        let p = extract_peaks(&m, 8, 8, &c).unwrap();
        for (i, a) in p.iter().enumerate() {
            for b in &p[i + 1..] {
                assert!(a.x_f.abs_diff(b.x_f).max(a.y_f.abs_diff(b.y_f)) > 1);
            }
        }
    }

    #[test]
    fn zero_radius_is_rejected() {
        assert!(extract_peaks(&[0.0], 1, 1, &cfg(0.5, 1, 0)).is_err());
    }

    #[test]
    fn pixel_mapping_examples() {
        assert_eq!(map_to_pixels(1, 1, 4, 256, 256), (2, 2));
        assert_eq!(map_to_pixels(10, 5, 4, 256, 256), (38, 18));
        assert_eq!(map_to_pixels(0, 0, 4, 256, 256), (0, 0));
        assert_eq!(map_to_pixels(100, 100, 4, 64, 32), (63, 31));
    }

    fn frame(ball_peak: Option<(usize, usize, f32)>, gt: Vec<(usize, usize)>) -> EvalFrame {
        let mut t = Tensor4::<f32>::zeros(Shape::new(1, 2, 16, 16)).unwrap();
        for v in t.plane_mut(0, 0) {
            *v = 1.0;
        }
        if let Some((x, y, c)) = ball_peak {
            t.plane_mut(0, 1)[y * 16 + x] = c;
            t.plane_mut(0, 0)[y * 16 + x] = 1.0 - c;
        }
        EvalFrame {
            id: String::new(),
            confidence: ConfidenceMap::new(t).unwrap(),
            image_size: (64, 64),
            balls: gt,
        }
    }

    #[test]
    fn calibration_prefers_larger_theta_on_ties() {
        // Perfect for every theta in (0.2, 0.8]: ball peaks at 0.81, an empty frame peaking at 0.2.
        let frames = vec![
            frame(Some((5, 5, 0.81)), vec![(18, 18)]),
            frame(Some((3, 3, 0.2)), vec![]),
        ];
        assert_eq!(calibrate_threshold(&frames, 16.0).unwrap(), 0.81);
        let frames = vec![
            frame(Some((5, 5, 0.80)), vec![(18, 18)]),
            frame(Some((3, 3, 0.2)), vec![]),
        ];
        assert_eq!(calibrate_threshold(&frames, 16.0).unwrap(), 0.80);
    }

    #[test]
    fn ball_free_validation_set_calibrates_to_one() {
        let frames = vec![frame(Some((1, 1, 0.3)), vec![]), frame(Some((9, 9, 0.1)), vec![])];
        assert_eq!(calibrate_threshold(&frames, 16.0).unwrap(), 1.0);
    }

    #[test]
    fn empty_validation_set_is_an_error() {
        assert!(calibrate_threshold(&[], 16.0).is_err());
    }

    #[test]
    fn random_maps_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m: Vec<f32> = (0..20 * 20).map(|_| rng.gen::<f32>()).collect();
            for c in [cfg(0.1, 6, 1), cfg(0.5, 3, 3), cfg(0.9, 6, 2)] {
                assert_eq!(extract_peaks(&m, 20, 20, &c).unwrap(), brute_force(&m, 20, 20, &c));
            }
        }
    }

    proptest! {
        #[test]
        fn decode_invariants(
            m in proptest::collection::vec(0.0f32..1.0, 12 * 12),
            theta in 0.0f32..1.0,
            bump in 0.0f32..0.5,
            r in 1usize..4,
            max in 1usize..8,
        ) {
            let c = cfg(theta, max, r);
            let before = m.clone();
            let p = extract_peaks(&m, 12, 12, &c).unwrap();
            prop_assert_eq!(&m, &before);
            for w in p.windows(2) {
                prop_assert!(w[0].confidence >= w[1].confidence);
            }
            for (i, a) in p.iter().enumerate() {
                prop_assert!(a.confidence >= theta);
                for b in &p[i + 1..] {
                    prop_assert!(a.x_f.abs_diff(b.x_f).max(a.y_f.abs_diff(b.y_f)) > r);
                }
            }
            let higher = extract_peaks(&m, 12, 12, &cfg(theta + bump, max, r)).unwrap();
            prop_assert!(higher.len() <= p.len());
            let one = extract_peaks(&m, 12, 12, &cfg(theta, 1, r)).unwrap();
            let argmax = (0..m.len()).fold(0, |b, i| if m[i] > m[b] { i } else { b });
            if m[argmax] >= theta {
                prop_assert_eq!(one[0].y_f * 12 + one[0].x_f, argmax);
            } else {
                prop_assert!(one.is_empty());
            }
        }
    }
}

//! Pooled 11-point average precision, single-ball accuracy and throughput.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{decode, DecodeConfig, Detection};
use crate::error::{Error, Result};
use crate::model::{ConfidenceMap, Model};
use crate::tensor::{Shape, Tensor4};

/// Default match tolerance in pixels.
pub const DEFAULT_TOLERANCE_PX: f64 = 16.0;

/// Decoding used to build the ranked list for AP: every peak that survives
/// suppression, up to four per frame, regardless of the operating threshold.
pub const AP_DECODE: DecodeConfig = DecodeConfig {
    theta: 0.0,
    max_detections: 4,
    suppression_radius: 3,
};

/// One evaluated frame: its single-item confidence map and ground truth.
#[derive(Debug, Clone)]
pub struct EvalFrame {
    pub id: String,
    pub confidence: ConfidenceMap,
    /// (height, width) of the frame the map was computed from.
    pub image_size: (usize, usize),
    pub balls: Vec<(usize, usize)>,
}

impl EvalFrame {
    pub fn detections(&self, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
        decode(&self.confidence, 0, self.image_size.0, self.image_size.1, cfg)
    }
}

/// Runs inference on one normalized 1x3xHxW frame.
pub fn eval_frame(model: &Model, id: &str, image: &Tensor4, balls: &[(usize, usize)]) -> Result<EvalFrame> {
    let s = image.shape();
    if s.n != 1 {
        return Err(Error::shape("eval_frame", format!("expected a single frame, got {s}")));
    }
    Ok(EvalFrame {
        id: id.to_string(),
        confidence: model.infer(image)?,
        image_size: (s.h, s.w),
        balls: balls.to_vec(),
    })
}

fn within(d: &Detection, ball: (usize, usize), tol: f64) -> bool {
    distance((d.x_p, d.y_p), ball) <= tol
}

fn distance(a: (usize, usize), b: (usize, usize)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    (dx * dx + dy * dy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    /// Ball present and found at the correct location.
    Tp,
    /// Detection on a ball-free frame, or away from every ball.
    Fp,
    /// Ball present, nothing detected.
    Fn,
    /// No ball, nothing detected.
    Tn,
}

impl Outcome {
    pub fn is_correct(self) -> bool {
        matches!(self, Outcome::Tp | Outcome::Tn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Tp => "TP",
            Outcome::Fp => "FP",
            Outcome::Fn => "FN",
            Outcome::Tn => "TN",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub id: String,
    pub outcome: Outcome,
    pub detection: Option<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyResult {
    pub accuracy: f64,
    pub outcomes: Vec<FrameOutcome>,
}

/// Decodes each frame with one detection at `theta`. A frame counts as
/// correct when it has a ball and the detection lies within `tolerance_px`
/// of one, or has no ball and nothing is detected. An empty set scores 0.
pub fn accuracy(frames: &[EvalFrame], theta: f32, tolerance_px: f64) -> Result<AccuracyResult> {
    let cfg = DecodeConfig::single(theta);
    let mut outcomes = Vec::with_capacity(frames.len());
    let mut correct = 0usize;
    for f in frames {
        let det = f.detections(&cfg)?.into_iter().next();
        let outcome = match (&det, f.balls.is_empty()) {
            (None, true) => Outcome::Tn,
            (None, false) => Outcome::Fn,
            (Some(_), true) => Outcome::Fp,
            (Some(d), false) => {
                if f.balls.iter().any(|&b| within(d, b, tolerance_px)) {
                    Outcome::Tp
                } else {
                    Outcome::Fp
                }
            }
        };
        correct += outcome.is_correct() as usize;
        outcomes.push(FrameOutcome {
            id: f.id.clone(),
            outcome,
            detection: det,
        });
    }
    let accuracy = if frames.is_empty() {
        0.0
    } else {
        correct as f64 / frames.len() as f64
    };
    Ok(AccuracyResult { accuracy, outcomes })
}

/// Detections and ground truth of one frame for AP.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameDetections {
    /// (confidence, x, y)
    pub detections: Vec<(f32, usize, usize)>,
    pub balls: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    /// p(r) = max precision over recall >= r.
    #[default]
    Interpolated,
    /// p(r) = precision at the first rank reaching recall r.
    Raw,
}

/// Pools all detections, sorts them by confidence (stable on frame and
/// detection order) and labels each TP or FP by greedy matching to the
/// nearest unmatched ball of its frame within the tolerance.
pub fn rank_and_match(frames: &[FrameDetections], tolerance_px: f64) -> (Vec<bool>, usize) {
    let mut pooled: Vec<(f32, usize, usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(fi, f)| f.detections.iter().map(move |&(c, x, y)| (c, fi, x, y)))
        .collect();
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut matched: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.balls.len()]).collect();
    let mut labels = Vec::with_capacity(pooled.len());
    for (_, fi, x, y) in pooled {
        let mut best: Option<(f64, usize)> = None;
        for (bi, &b) in frames[fi].balls.iter().enumerate() {
            let d = distance((x, y), b);
            if !matched[fi][bi] && d <= tolerance_px && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, bi));
            }
        }
        if let Some((_, bi)) = best {
            matched[fi][bi] = true;
            labels.push(true);
        } else {
            labels.push(false);
        }
    }
    let total_gt = frames.iter().map(|f| f.balls.len()).sum();
    (labels, total_gt)
}

/// Cumulative (precision, recall) after each ranked detection.
pub fn precision_recall(labels: &[bool], total_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    labels
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += hit as usize;
            (tp as f64 / (i + 1) as f64, tp as f64 / total_gt as f64)
        })
        .collect()
}

/// 11-point AP from ranked TP/FP labels. Recall levels that are never
/// reached contribute zero.
pub fn ap_from_labels(labels: &[bool], total_gt: usize, mode: Interpolation) -> Result<f64> {
    if total_gt == 0 {
        return Err(Error::param(
            "average precision is undefined without ground-truth balls",
        ));
    }
    let pr = precision_recall(labels, total_gt);
    let mut sum = 0.0;
    for i in 0..=10 {
        let r = i as f64 / 10.0;
        let p = match mode {
            Interpolation::Interpolated => pr
                .iter()
                .filter(|(_, rec)| *rec >= r)
                .map(|(p, _)| *p)
                .fold(0.0, f64::max),
            Interpolation::Raw => pr.iter().find(|(_, rec)| *rec >= r).map_or(0.0, |(p, _)| *p),
        };
        sum += p;
    }
    Ok(sum / 11.0)
}

pub fn average_precision(frames: &[FrameDetections], tolerance_px: f64, mode: Interpolation) -> Result<f64> {
    let (labels, total_gt) = rank_and_match(frames, tolerance_px);
    ap_from_labels(&labels, total_gt, mode)
}

/// AP over evaluated frames, decoded with [`AP_DECODE`].
pub fn average_precision_of(frames: &[EvalFrame], tolerance_px: f64, mode: Interpolation) -> Result<f64> {
    let dets = frames
        .iter()
        .map(|f| {
            Ok(FrameDetections {
                detections: f
                    .detections(&AP_DECODE)?
                    .into_iter()
                    .map(|d| (d.confidence, d.x_p, d.y_p))
                    .collect(),
                balls: f.balls.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    average_precision(&dets, tolerance_px, mode)
}

/// Frames per second of forward pass plus single-ball decoding on a fixed
/// random `h` x `w` input. Input construction is outside the timed region.
pub fn benchmark(model: &Model, h: usize, w: usize, warmup: usize, iters: usize) -> Result<f64> {
    if iters == 0 {
        return Err(Error::param("benchmark needs at least one timed iteration"));
    }
    let shape = Shape::new(1, model.config().input_channels, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = (0..shape.numel()).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let input = Tensor4::from_vec(shape, data)?;
    let cfg = DecodeConfig::single(0.5);
    let pass = || -> Result<usize> {
        let conf = model.infer(&input)?;
        Ok(decode(&conf, 0, h, w, &cfg)?.len())
    };
    for _ in 0..warmup {
        pass()?;
    }
    let start = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(pass()?);
    }
    Ok(iters as f64 / start.elapsed().as_secs_f64())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ap: f64,
    pub accuracy: f64,
    pub theta: f32,
    pub tolerance_px: f64,
    pub fps: Option<f64>,
    pub ball_frames: usize,
    pub outcomes: Vec<FrameOutcome>,
}

impl EvalReport {
    pub fn frames(&self) -> usize {
        self.outcomes.len()
    }

    pub fn count(&self, o: Outcome) -> usize {
        self.outcomes.iter().filter(|f| f.outcome == o).count()
    }

    /// `frame_id,outcome,conf,x,y`, empty fields when nothing was detected.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "frame_id,outcome,conf,x,y")?;
        for f in &self.outcomes {
            match &f.detection {
                Some(d) => writeln!(
                    out,
                    "{},{},{:.6},{},{}",
                    f.id,
                    f.outcome.as_str(),
                    d.confidence,
                    d.x_p,
                    d.y_p
                )?,
                None => writeln!(out, "{},{},,,", f.id, f.outcome.as_str())?,
            }
        }
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ap = {:.6}", self.ap)?;
        writeln!(f, "accuracy = {:.6}", self.accuracy)?;
        writeln!(f, "theta = {:.2}", self.theta)?;
        writeln!(f, "tolerance_px = {}", self.tolerance_px)?;
        match self.fps {
            Some(fps) => writeln!(f, "fps = {fps:.3}")?,
            None => writeln!(f, "fps = n/a")?,
        }
        writeln!(f, "frames = {}", self.frames())?;
        writeln!(f, "ball_frames = {}", self.ball_frames)?;
        writeln!(f, "empty_frames = {}", self.frames() - self.ball_frames)?;
        writeln!(f, "tp = {}", self.count(Outcome::Tp))?;
        writeln!(f, "fp = {}", self.count(Outcome::Fp))?;
        writeln!(f, "fn = {}", self.count(Outcome::Fn))?;
        write!(f, "tn = {}", self.count(Outcome::Tn))
    }
}

/// Accuracy at `theta` plus AP over the same frames.
pub fn evaluate(frames: &[EvalFrame], theta: f32, tolerance_px: f64, mode: Interpolation) -> Result<EvalReport> {
    let acc = accuracy(frames, theta, tolerance_px)?;
    Ok(EvalReport {
        ap: average_precision_of(frames, tolerance_px, mode)?,
        accuracy: acc.accuracy,
        theta,
        tolerance_px,
        fps: None,
        ball_frames: frames.iter().filter(|f| !f.balls.is_empty()).count(),
        outcomes: acc.outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent enumerator: for each recall level, scan every prefix of
    /// the ranking and keep the best precision among prefixes reaching it.
    fn brute_ap(labels: &[bool], total_gt: usize) -> f64 {
        let mut sum = 0.0;
        for i in 0..=10 {
            let r = i as f64 / 10.0;
            let mut best = 0.0f64;
            for k in 1..=labels.len() {
                let tp = labels[..k].iter().filter(|&&b| b).count() as f64;
                if tp / total_gt as f64 >= r {
                    best = best.max(tp / k as f64);
                }
            }
            sum += best;
        }
        sum / 11.0
    }

    #[test]
    fn hand_built_five_detections() {
        let labels = [true, false, true, true, false];
        let pr = precision_recall(&labels, 3);
        let expect = [
            (1.0, 1.0 / 3.0),
            (0.5, 1.0 / 3.0),
            (2.0 / 3.0, 2.0 / 3.0),
            (0.75, 1.0),
            (0.6, 1.0),
        ];
        for (a, b) in pr.iter().zip(expect) {
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
        let ap = ap_from_labels(&labels, 3, Interpolation::Interpolated).unwrap();
        assert!((ap - 9.25 / 11.0).abs() < 1e-12);
        assert!((ap - brute_ap(&labels, 3)).abs() < 1e-12);
        // Raw precision: 1 for r <= 1/3, 2/3 for 0.4..0.6, 0.75 for 0.7..1.0.
        let raw = ap_from_labels(&labels, 3, Interpolation::Raw).unwrap();
        assert!((raw - (4.0 + 3.0 * 2.0 / 3.0 + 4.0 * 0.75) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let frames = vec![
            FrameDetections {
                detections: vec![(1.0, 10, 10)],
                balls: vec![(10, 10)],
            },
            FrameDetections {
                detections: vec![(1.0, 50, 52)],
                balls: vec![(50, 50)],
            },
        ];
        assert_eq!(
            average_precision(&frames, 16.0, Interpolation::Interpolated).unwrap(),
            1.0
        );
        let empty: Vec<FrameDetections> = frames
            .iter()
            .map(|f| FrameDetections {
                detections: vec![],
                balls: f.balls.clone(),
            })
            .collect();
        assert_eq!(
            average_precision(&empty, 16.0, Interpolation::Interpolated).unwrap(),
            0.0
        );
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        let frames = vec![FrameDetections {
            detections: vec![(0.9, 1, 1)],
            balls: vec![],
        }];
        assert!(matches!(
            average_precision(&frames, 16.0, Interpolation::Interpolated),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn duplicates_on_one_ball_count_once() {
        let frames = vec![FrameDetections {
            detections: vec![(0.9, 10, 10), (0.8, 12, 10), (0.7, 11, 11)],
            balls: vec![(10, 10)],
        }];
        let (labels, gt) = rank_and_match(&frames, 16.0);
        assert_eq!(labels, vec![true, false, false]);
        assert_eq!(gt, 1);
    }

    #[test]
    fn tolerance_boundary_is_inclusive() {
        let f = |x| {
            vec![FrameDetections {
                detections: vec![(0.5, x, 0)],
                balls: vec![(0, 0)],
            }]
        };
        assert_eq!(rank_and_match(&f(16), 16.0).0, vec![true]);
        assert_eq!(rank_and_match(&f(17), 16.0).0, vec![false]);
    }

    fn map_frame(peak: Option<(usize, usize, f32)>, balls: Vec<(usize, usize)>) -> EvalFrame {
        let mut t = Tensor4::<f32>::zeros(Shape::new(1, 2, 16, 16)).unwrap();
        t.plane_mut(0, 0).iter_mut().for_each(|v| *v = 1.0);
        if let Some((x, y, c)) = peak {
            t.plane_mut(0, 1)[y * 16 + x] = c;
            t.plane_mut(0, 0)[y * 16 + x] = 1.0 - c;
        }
        EvalFrame {
            id: format!("f{}", balls.len()),
            confidence: ConfidenceMap::new(t).unwrap(),
            image_size: (64, 64),
            balls,
        }
    }

    #[test]
    fn accuracy_outcomes() {
        let frames = vec![
            map_frame(Some((2, 2, 0.3)), vec![]),         // TN at theta 0.5
            map_frame(Some((5, 5, 0.9)), vec![(18, 18)]), // TP: cell 5 -> pixel 18
            map_frame(Some((5, 5, 0.9)), vec![(60, 60)]), // FP: wrong place
            map_frame(Some((5, 5, 0.4)), vec![(18, 18)]), // FN
            map_frame(Some((9, 9, 0.7)), vec![]),         // FP on empty frame
        ];
        let a = accuracy(&frames, 0.5, 16.0).unwrap();
        let got: Vec<Outcome> = a.outcomes.iter().map(|o| o.outcome).collect();
        assert_eq!(
            got,
            vec![Outcome::Tn, Outcome::Tp, Outcome::Fp, Outcome::Fn, Outcome::Fp]
        );
        assert!((a.accuracy - 0.4).abs() < 1e-12);
        // Above every confidence, accuracy is the ball-free fraction.
        let none = accuracy(&frames, 1.0 + 1e-6, 16.0).unwrap();
        assert!((none.accuracy - 0.4).abs() < 1e-12);
    }

    #[test]
    fn report_is_metric_lines_and_csv() {
        let frames = vec![map_frame(Some((5, 5, 0.9)), vec![(18, 18)]), map_frame(None, vec![])];
        let r = evaluate(&frames, 0.5, 16.0, Interpolation::Interpolated).unwrap();
        let text = r.to_string();
        for key in ["ap", "accuracy", "theta", "tolerance_px", "fps", "frames", "tp", "tn"] {
            assert!(
                text.lines().any(|l| l.starts_with(&format!("{key} = "))),
                "{key} missing:\n{text}"
            );
        }
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "f1,TP,0.900000,18,18");
        assert_eq!(csv.lines().nth(2).unwrap(), "f0,TN,,,");
    }

    proptest! {
        #[test]
        fn ap_matches_brute_force(labels in proptest::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
            let tp = labels.iter().filter(|&&b| b).count();
            let total = tp + extra;
            prop_assume!(total > 0);
            let ap = ap_from_labels(&labels, total, Interpolation::Interpolated).unwrap();
            prop_assert!((ap - brute_ap(&labels, total)).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&ap));
        }

        #[test]
        fn ap_depends_only_on_rank(confs in proptest::collection::vec(0.01f32..0.99, 1..20), hits in proptest::collection::vec(any::<bool>(), 20)) {
            let frames: Vec<FrameDetections> = confs.iter().enumerate().map(|(i, &c)| FrameDetections {
                detections: vec![(c, if hits[i] { 20 } else { 200 }, 20)],
                balls: vec![(20, 20)],
            }).collect();
            let squashed: Vec<FrameDetections> = frames.iter().map(|f| FrameDetections {
                detections: f.detections.iter().map(|&(c, x, y)| (c * c * 0.5, x, y)).collect(),
                balls: f.balls.clone(),
            }).collect();
            let a = average_precision(&frames, 16.0, Interpolation::Interpolated).unwrap();
            let b = average_precision(&squashed, 16.0, Interpolation::Interpolated).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

//! Training targets, hard-negative mining and the softmax cross-entropy
//! detection loss.

use crate::error::{Error, Result};
use crate::model::{ConfidenceMap, SCALING_FACTOR};
use crate::tensor::{Shape, Tensor4};

/// Maximum selected negatives per positive cell.
pub const NEG_POS_RATIO: usize = 3;

/// Negatives selected on a frame without any ball.
pub const NEGATIVES_WITHOUT_BALL: usize = 32;

/// Labeled cells of one confidence map. Cells are addressed by flat index
/// `y * map_w + x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSet {
    map_h: usize,
    map_w: usize,
    /// Sorted, unique.
    pos: Vec<usize>,
    is_pos: Vec<bool>,
    /// Ball centers in input pixels.
    balls: Vec<(usize, usize)>,
}

impl TargetSet {
    pub fn map_size(&self) -> (usize, usize) {
        (self.map_h, self.map_w)
    }

    pub fn pos(&self) -> &[usize] {
        &self.pos
    }

    pub fn is_pos(&self, cell: usize) -> bool {
        self.is_pos[cell]
    }

    pub fn balls(&self) -> &[(usize, usize)] {
        &self.balls
    }

    /// Every cell not in Pos, ascending.
    pub fn neg_candidates(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.is_pos.len()).filter(move |&c| !self.is_pos[c])
    }
}

/// Marks the cell under each ball, `(x / k, y / k)` floored per coordinate,
/// and its 8 neighbours (clipped to the map) as positive.
pub fn build_targets(balls: &[(usize, usize)], map_h: usize, map_w: usize, k: usize) -> TargetSet {
    let k = k.max(1);
    let mut is_pos = vec![false; map_h * map_w];
    if map_h > 0 && map_w > 0 {
        for &(x, y) in balls {
            let cx = (x / k).min(map_w - 1);
            let cy = (y / k).min(map_h - 1);
            for yy in cy.saturating_sub(1)..=(cy + 1).min(map_h - 1) {
                for xx in cx.saturating_sub(1)..=(cx + 1).min(map_w - 1) {
                    is_pos[yy * map_w + xx] = true;
                }
            }
        }
    }
    let pos = (0..is_pos.len()).filter(|&c| is_pos[c]).collect();
    TargetSet {
        map_h,
        map_w,
        pos,
        is_pos,
        balls: balls.to_vec(),
    }
}

/// [`build_targets`] with the network's scaling factor.
pub fn targets_for_map(balls: &[(usize, usize)], map_h: usize, map_w: usize) -> TargetSet {
    build_targets(balls, map_h, map_w, SCALING_FACTOR)
}

fn negative_budget(targets: &TargetSet) -> usize {
    if targets.pos.is_empty() {
        NEGATIVES_WITHOUT_BALL
    } else {
        NEG_POS_RATIO * targets.pos.len()
    }
}

/// Hardest negatives of batch item `item`: candidates ranked by `-ln c_bg`
/// descending, ties toward the lower cell index. Returned in rank order.
pub fn mine_negatives(conf: &ConfidenceMap, item: usize, targets: &TargetSet) -> Result<Vec<usize>> {
    if item >= conf.batch() || (conf.height(), conf.width()) != targets.map_size() {
        return Err(Error::shape(
            "mine_negatives",
            format!(
                "map {} item {item} against targets of {}x{}",
                conf.shape(),
                targets.map_h,
                targets.map_w
            ),
        ));
    }
    let bg = conf.background(item);
    let mut cand: Vec<(f64, usize)> = targets.neg_candidates().map(|c| (-(bg[c] as f64).ln(), c)).collect();
    let m = negative_budget(targets).min(cand.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if m < cand.len() && m > 0 {
        cand.select_nth_unstable_by(m - 1, cmp);
    }
    cand.truncate(m);
    cand.sort_by(cmp);
    Ok(cand.into_iter().map(|(_, c)| c).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Same shape as the logits; nonzero only on labeled cells.
    pub grad_logits: Tensor4,
    pub pos_count: usize,
    pub neg_count: usize,
}

#[inline]
fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Cross-entropy over the labeled cells of a batch of logit maps,
/// `(-Σ_Pos ln c_ball - Σ_Neg ln c_bg) / N` with `N` the number of labeled
/// cells across the whole batch. `negatives[i]` are the selected cells of item `i`.
pub fn detection_loss(logits: &Tensor4, targets: &[TargetSet], negatives: &[Vec<usize>]) -> Result<LossOutput> {
    let s = logits.shape();
    if s.c != 2 || targets.len() != s.n || negatives.len() != s.n {
        return Err(Error::shape(
            "detection_loss",
            format!(
                "logits {s} with {} target sets and {} negative sets",
                targets.len(),
                negatives.len()
            ),
        ));
    }
    for (t, neg) in targets.iter().zip(negatives) {
        if t.map_size() != (s.h, s.w) {
            return Err(Error::shape(
                "detection_loss",
                format!("logits {s} against targets of {}x{}", t.map_h, t.map_w),
            ));
        }
        if let Some(&bad) = neg.iter().find(|&&c| c >= s.plane() || t.is_pos[c]) {
            return Err(Error::param(format!("cell {bad} is not a negative candidate")));
        }
    }
    let pos_count: usize = targets.iter().map(|t| t.pos.len()).sum();
    let neg_count: usize = negatives.iter().map(Vec::len).sum();
    let mut grad = Tensor4::zeros(s)?;
    let total = pos_count + neg_count;
    if total == 0 {
        return Ok(LossOutput {
            value: 0.0,
            grad_logits: grad,
            pos_count,
            neg_count,
        });
    }
    let inv_n = 1.0 / total as f64;
    let mut sum = 0.0f64;
    let plane = s.plane();
    for (n, (t, neg)) in targets.iter().zip(negatives).enumerate() {
        let bg = logits.plane(n, ConfidenceMap::BACKGROUND);
        let ball = logits.plane(n, ConfidenceMap::BALL);
        let labeled = t
            .pos
            .iter()
            .map(|&c| (c, ConfidenceMap::BALL))
            .chain(neg.iter().map(|&c| (c, ConfidenceMap::BACKGROUND)));
        let mut cell_grads = Vec::with_capacity(t.pos.len() + neg.len());
        for (c, label) in labeled {
            let (l0, l1) = (bg[c] as f64, ball[c] as f64);
            let lse = log_sum_exp(l0, l1);
            let target_logit = if label == ConfidenceMap::BALL { l1 } else { l0 };
            sum += lse - target_logit;
            let p_bg = (l0 - lse).exp();
            let p_ball = (l1 - lse).exp();
            let (g0, g1) = if label == ConfidenceMap::BALL {
                (p_bg, p_ball - 1.0)
            } else {
                (p_bg - 1.0, p_ball)
            };
            cell_grads.push((c, g0 * inv_n, g1 * inv_n));
        }
        let data = grad.data_mut();
        for (c, g0, g1) in cell_grads {
            let base = n * 2 * plane;
            data[base + c] = g0 as f32;
            data[base + plane + c] = g1 as f32;
        }
    }
    Ok(LossOutput {
        value: sum * inv_n,
        grad_logits: grad,
        pos_count,
        neg_count,
    })
}

/// Targets, mined negatives and loss for a batch in one call.
pub fn batch_loss(
    logits: &Tensor4,
    conf: &ConfidenceMap,
    balls: &[Vec<(usize, usize)>],
) -> Result<(LossOutput, Vec<TargetSet>)> {
    let s: Shape = logits.shape();
    if balls.len() != s.n || conf.shape() != s {
        return Err(Error::shape(
            "batch_loss",
            format!(
                "logits {s}, confidences {}, {} annotation lists",
                conf.shape(),
                balls.len()
            ),
        ));
    }
    let targets: Vec<TargetSet> = balls.iter().map(|b| targets_for_map(b, s.h, s.w)).collect();
    let negatives = targets
        .iter()
        .enumerate()
        .map(|(i, t)| mine_negatives(conf, i, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((detection_loss(logits, &targets, &negatives)?, targets))
}

//! The three mask-guided objectives and their weighted sum.
//!
//! * local structure consistency (LSC): per group, fit a similarity to the
//!   most confident matches and pull the remaining predictions towards the
//!   propagated positions with a Huber penalty;
//! * mask label consistency (MLC): penalise correlation mass that falls
//!   outside the target mask;
//! * mask boundary constraint (MBC): keep each group's normalised
//!   distance-to-boundary profile the same across frames.
//!
//! Each loss returns its value together with the gradient w.r.t. the
//! quantities it reads (predicted positions or softmax maps).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fit_similarity, fit_similarity_vjp, Point2};
use crate::maskops::{DistanceField, Mask};
use crate::sampling::QueryGroupSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("group of {size} points cannot supply {k_e} reliable pairs")]
    GroupTooSmall { size: usize, k_e: usize },
    #[error("no group produced a supervised point ({skipped} groups skipped)")]
    NoValidGroup { skipped: usize },
}

/// Indices of the `k_e` highest scores, best first; ties keep index order.
pub fn select_reliable(scores: &[f64], k_e: usize) -> Result<Vec<usize>, LossError> {
    if scores.len() < k_e {
        return Err(LossError::GroupTooSmall {
            size: scores.len(),
            k_e,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k_e);
    Ok(order)
}

/// Huber penalty on the length of a 2-D residual.
pub fn huber(residual: Point2, delta: f64) -> f64 {
    let r = residual.norm();
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

/// Gradient of [`huber`] w.r.t. the residual vector.
pub fn huber_grad(residual: Point2, delta: f64) -> Point2 {
    let r = residual.norm();
    if r <= delta {
        residual
    } else {
        residual * (delta / r)
    }
}

/// A correspondence proposal used to pick and fit reliable pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub position: Point2,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LscConfig {
    pub reliable: usize,
    pub huber_delta: f64,
    /// Treat the fitted pseudo-labels as constants.
    pub detach: bool,
}

impl Default for LscConfig {
    fn default() -> Self {
        Self {
            reliable: 3,
            huber_delta: 1.0,
            detach: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LscOutput {
    pub loss: f64,
    /// dL/d(predicted position), one per query point.
    pub d_predicted: Vec<Point2>,
    /// dL/d(proposal position); all zero when detached.
    pub d_proposals: Vec<Point2>,
    pub supervised: usize,
    pub skipped_groups: usize,
    pub out_of_grid: usize,
    /// Reliable indices per group (empty for skipped groups).
    pub reliable: Vec<Vec<usize>>,
}

/// Local structure consistency.
///
/// `proposals` supply the scores and positions used for the reliable fit;
/// `predicted` are the soft-argmax positions being supervised. Both are
/// indexed like `groups.flat()`. Propagated targets outside the
/// `width x height` grid are dropped. The loss is the mean Huber penalty over
/// supervised points.
pub fn lsc_loss(
    groups: &QueryGroupSet,
    proposals: &[Proposal],
    predicted: &[Point2],
    cfg: &LscConfig,
    grid: (usize, usize),
) -> Result<LscOutput, LossError> {
    let n = groups.num_points();
    assert_eq!(proposals.len(), n);
    assert_eq!(predicted.len(), n);
    let (w, h) = grid;
    let mut skipped = 0;
    let mut out_of_grid = 0;
    // (point index, target, group index, reliable indices)
    let mut terms: Vec<(usize, Point2, usize, Vec<usize>)> = Vec::new();
    let offsets = groups.offsets();
    let mut selections = vec![Vec::new(); groups.groups.len()];

    for (gi, (group, &offset)) in groups.groups.iter().zip(&offsets).enumerate() {
        if group.len() < cfg.reliable + 1 {
            skipped += 1;
            continue;
        }
        let scores: Vec<f64> = (0..group.len())
            .map(|i| proposals[offset + i].score)
            .collect();
        let reliable = select_reliable(&scores, cfg.reliable)?;
        let tmpl: Vec<Point2> = reliable.iter().map(|&i| group[i]).collect();
        let tgt: Vec<Point2> = reliable
            .iter()
            .map(|&i| proposals[offset + i].position)
            .collect();
        let Ok(fit) = fit_similarity(&tmpl, &tgt) else {
            skipped += 1;
            continue;
        };
        selections[gi] = reliable.clone();
        for (i, &p) in group.iter().enumerate() {
            if reliable.contains(&i) {
                continue;
            }
            let target = fit.apply(p);
            let inside = target.x >= 0.0
                && target.y >= 0.0
                && target.x <= (w - 1) as f64
                && target.y <= (h - 1) as f64;
            if !inside {
                out_of_grid += 1;
                continue;
            }
            terms.push((offset + i, target, gi, reliable.clone()));
        }
    }
    if terms.is_empty() {
        return Err(LossError::NoValidGroup { skipped });
    }

    let norm = 1.0 / terms.len() as f64;
    let mut loss = 0.0;
    let mut d_predicted = vec![Point2::ZERO; n];
    let mut d_proposals = vec![Point2::ZERO; n];
    for (idx, target, gi, reliable) in &terms {
        let residual = predicted[*idx] - *target;
        loss += huber(residual, cfg.huber_delta);
        let g = huber_grad(residual, cfg.huber_delta) * norm;
        d_predicted[*idx] = d_predicted[*idx] + g;
        if !cfg.detach {
            let group = &groups.groups[*gi];
            let offset = offsets[*gi];
            let tmpl: Vec<Point2> = reliable.iter().map(|&i| group[i]).collect();
            let mut g_fit = vec![Point2::ZERO; reliable.len()];
            fit_similarity_vjp(&tmpl, group[*idx - offset], -g, &mut g_fit);
            for (&i, gf) in reliable.iter().zip(g_fit) {
                d_proposals[offset + i] = d_proposals[offset + i] + gf;
            }
        }
    }
    Ok(LscOutput {
        loss: loss * norm,
        d_predicted,
        d_proposals,
        supervised: terms.len(),
        skipped_groups: skipped,
        out_of_grid,
        reliable: selections,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlcOutput {
    pub loss: f64,
    /// Foreground mass `S` per point.
    pub scores: Vec<f64>,
    /// dL/d(softmax) equals `coef[i] * mask` for point `i`.
    pub coef: Vec<f64>,
    pub active: usize,
}

/// Mask label consistency: mean over points of `-ln(S + eps)` where the
/// foreground mass `S <= tau`, zero otherwise.
pub fn mlc_loss(softmaxes: &[&[f64]], target_mask: &Mask, tau: f64, eps: f64) -> MlcOutput {
    let n = softmaxes.len().max(1) as f64;
    let bits = target_mask.bits();
    let mut loss = 0.0;
    let mut scores = Vec::with_capacity(softmaxes.len());
    let mut coef = Vec::with_capacity(softmaxes.len());
    let mut active = 0;
    for sm in softmaxes {
        assert_eq!(sm.len(), bits.len());
        let s: f64 = sm
            .iter()
            .zip(bits)
            .filter(|(_, &b)| b)
            .map(|(v, _)| v)
            .sum();
        scores.push(s);
        if s > tau {
            coef.push(0.0);
        } else {
            active += 1;
            loss -= (s + eps).ln();
            coef.push(-1.0 / ((s + eps) * n));
        }
    }
    MlcOutput {
        loss: loss / n,
        scores,
        coef,
        active,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbcOutput {
    pub loss: f64,
    pub d_predicted: Vec<Point2>,
}

/// Mask boundary constraint.
///
/// Template distances are read at the query points, target distances at the
/// predicted points (clamped into the grid, with zero gradient along a
/// clamped axis). Per group the distances are normalised by their sum plus
/// `eps`, compared with `exp(-d0)` weights and averaged over groups.
pub fn mbc_loss(
    groups: &QueryGroupSet,
    template_field: &DistanceField,
    predicted: &[Point2],
    target_field: &DistanceField,
    eps: f64,
) -> MbcOutput {
    assert_eq!(predicted.len(), groups.num_points());
    let max_x = (target_field.width() - 1) as f64;
    let max_y = (target_field.height() - 1) as f64;
    let n_groups = groups.groups.len().max(1) as f64;
    let mut loss = 0.0;
    let mut d_predicted = vec![Point2::ZERO; predicted.len()];

    for (group, offset) in groups.groups.iter().zip(groups.offsets()) {
        let k = group.len();
        let d0: Vec<f64> = group
            .iter()
            .map(|&p| {
                template_field
                    .sample(p)
                    .expect("query points lie on the template grid")
                    .value
            })
            .collect();
        let mut dt = Vec::with_capacity(k);
        let mut dt_grad = Vec::with_capacity(k);
        for i in 0..k {
            let p = predicted[offset + i];
            let c = Point2::new(p.x.clamp(0.0, max_x), p.y.clamp(0.0, max_y));
            let s = target_field.sample(c).expect("clamped into the grid");
            let mut g = s.grad;
            if c.x != p.x {
                g.x = 0.0;
            }
            if c.y != p.y {
                g.y = 0.0;
            }
            dt.push(s.value);
            dt_grad.push(g);
        }
        let sum0: f64 = d0.iter().sum::<f64>() + eps;
        let sumt: f64 = dt.iter().sum::<f64>() + eps;
        let weights: Vec<f64> = d0.iter().map(|d| (-d).exp()).collect();
        let wsum: f64 = weights.iter().sum::<f64>() + eps;

        let mut group_loss = 0.0;
        // dL/d(normalised target distance)
        let mut s = vec![0.0; k];
        for i in 0..k {
            let diff = d0[i] / sum0 - dt[i] / sumt;
            group_loss += weights[i] * diff.abs();
            // d|a - b|/db = -sign(a - b), with sign(0) = 0
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            s[i] = -sign * weights[i] / wsum / n_groups;
        }
        loss += group_loss / wsum;

        let cross: f64 = s.iter().zip(&dt).map(|(si, di)| si * di).sum::<f64>() / (sumt * sumt);
        for i in 0..k {
            let d_dt = s[i] / sumt - cross;
            d_predicted[offset + i] = dt_grad[i] * d_dt;
        }
    }
    MbcOutput {
        loss: loss / n_groups,
        d_predicted,
    }
}

/// Loss weights for LSC, MLC and MBC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub [f64; 3]);

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights([0.02, 0.5, 10.0])
    }
}

/// Values of every term plus bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_lsc: f64,
    pub l_mlc: f64,
    pub l_mbc: f64,
    pub l_total: f64,
    pub supervised_points: usize,
    pub skipped_groups: usize,
    pub mlc_active: usize,
    pub points: usize,
}

impl LossBreakdown {
    pub fn mlc_active_frac(&self) -> f64 {
        if self.points == 0 {
            0.0
        } else {
            self.mlc_active as f64 / self.points as f64
        }
    }
}

pub fn total_loss(l_lsc: f64, l_mlc: f64, l_mbc: f64, lambdas: &LossWeights) -> LossBreakdown {
    let [a, b, c] = lambdas.0;
    LossBreakdown {
        l_lsc,
        l_mlc,
        l_mbc,
        l_total: a * l_lsc + b * l_mlc + c * l_mbc,
        ..Default::default()
    }
}

//! Training: frame-pair sampling, the per-pair objective with its gradient,
//! the optimisation loop and the finite-difference gradient check.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    load_corpus, mask_to_grid, Clip, CorpusSpec, DataError, GeneratorSpec, Image, Motion,
    SynthConfig,
};
use crate::eval::{evaluate, EvalError, ModelTracker, QueryMode};
use crate::geometry::{Point2, SimilarityTransform2D};
use crate::losses::{
    lsc_loss, mbc_loss, mlc_loss, total_loss, LossBreakdown, LossError, LossWeights, LscConfig,
};
use crate::maskops::{distance_field, Mask, MaskError};
use crate::matching::{
    correlation_target_grad, match_query, match_query_backward, BilinearTap, MatchConfig,
    MatchError, NormalizedGrid, QueryMatch, RefinerParams, TargetGradTerm,
};
use crate::model::{
    adamw_step, backward, forward, forward_with_cache, grid_to_image, AdamWConfig, Checkpoint,
    ModelConfig, ModelError, ModelParams, OptimState, BLOCK_NAMES, EXTRACTOR_BLOCKS,
};
use crate::sampling::{sample_queries, QueryGroupSet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("no frame pair with foreground in both frames after {0} attempts")]
    NoForeground(usize),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Source of the correspondences used to pick reliable pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposer {
    /// The model being trained.
    Live,
    /// A frozen copy of the initial model.
    FrozenInit,
}

/// Geometric and photometric jitter applied to the target frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Relative scale jitter, e.g. 0.1 for [0.9, 1.1].
    pub scale: f64,
    pub rotation_deg: f64,
    pub shift_px: f64,
    /// Per-channel gain jitter; offsets are drawn from half this range.
    pub color: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            scale: 0.1,
            rotation_deg: 10.0,
            shift_px: 4.0,
            color: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub at_iteration: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub iterations: usize,
    pub batch_size: usize,
    pub groups: usize,
    pub points_per_group: usize,
    pub reliable: usize,
    pub tau: f64,
    pub mlc_eps: f64,
    pub mbc_eps: f64,
    pub lambdas: LossWeights,
    pub huber_delta: f64,
    pub temperature: f64,
    pub radius: f64,
    pub optimizer: AdamWConfig,
    pub lr_decay: Option<LrDecay>,
    pub seed: u64,
    pub max_gap: usize,
    /// Also sample pairs in the reverse direction.
    pub symmetric_pairs: bool,
    pub proposer: Proposer,
    pub detach_pseudo_labels: bool,
    /// Train only the refiner.
    pub freeze_extractor: bool,
    pub augment: AugmentConfig,
    /// Held-out probe interval in iterations; 0 disables probing.
    pub probe_every: usize,
    pub eval_resolution: [usize; 2],
    pub resample_budget: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            iterations: 2000,
            batch_size: 4,
            groups: 12,
            points_per_group: 12,
            reliable: 3,
            tau: 0.5,
            mlc_eps: 1e-8,
            mbc_eps: 1e-6,
            lambdas: LossWeights::default(),
            huber_delta: 1.0,
            temperature: 20.0,
            radius: 3.0,
            optimizer: AdamWConfig::default(),
            lr_decay: None,
            seed: 0,
            max_gap: 15,
            symmetric_pairs: false,
            proposer: Proposer::Live,
            detach_pseudo_labels: true,
            freeze_extractor: false,
            augment: AugmentConfig::default(),
            probe_every: 250,
            eval_resolution: [256, 256],
            resample_budget: 100,
            checkpoint_path: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.groups == 0 {
            return bad("groups must be >= 1".into());
        }
        if self.points_per_group == 0 {
            return bad("points_per_group must be >= 1".into());
        }
        if self.reliable < 2 || self.reliable >= self.points_per_group {
            return bad(format!(
                "reliable must satisfy 2 <= reliable < points_per_group ({})",
                self.points_per_group
            ));
        }
        if self.lambdas.0.iter().any(|l| !(*l >= 0.0)) {
            return bad("lambdas must be >= 0".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad("tau must lie in (0, 1)".into());
        }
        if !(self.mlc_eps > 0.0) || !(self.mbc_eps > 0.0) {
            return bad("mlc_eps and mbc_eps must be > 0".into());
        }
        if !(self.huber_delta > 0.0) {
            return bad("huber_delta must be > 0".into());
        }
        if !(self.temperature > 0.0) || !(self.radius >= 0.0) {
            return bad("temperature must be > 0 and radius >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.max_gap == 0 {
            return bad("max_gap must be >= 1".into());
        }
        if self.model.patch == 0 || self.model.channels == 0 || self.model.refiner_hidden == 0 {
            return bad("model dimensions must be >= 1".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
            || !(o.eps > 0.0)
        {
            return bad("optimizer needs lr > 0, betas in [0, 1), eps > 0".into());
        }
        if !(o.weight_decay >= 0.0) {
            return bad("optimizer.weight_decay must be >= 0".into());
        }
        if self.eval_resolution.contains(&0) {
            return bad("eval_resolution must be positive".into());
        }
        if self.resample_budget == 0 {
            return bad("resample_budget must be >= 1".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            groups: self.groups,
            points_per_group: self.points_per_group,
            lsc: LscConfig {
                reliable: self.reliable,
                huber_delta: self.huber_delta,
                detach: self.detach_pseudo_labels,
            },
            tau: self.tau,
            mlc_eps: self.mlc_eps,
            mbc_eps: self.mbc_eps,
            weights: self.lambdas,
            matching: self.matching(),
            freeze_extractor: self.freeze_extractor,
        }
    }

    pub fn matching(&self) -> MatchConfig {
        MatchConfig {
            radius: self.radius,
            temperature: self.temperature,
        }
    }

    /// Parses JSON, rejecting unknown keys, and validates.
    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| TrainError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text)
    }
}

/// Settings of the per-pair objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub groups: usize,
    pub points_per_group: usize,
    pub lsc: LscConfig,
    pub tau: f64,
    pub mlc_eps: f64,
    pub mbc_eps: f64,
    pub weights: LossWeights,
    pub matching: MatchConfig,
    pub freeze_extractor: bool,
}

/// Masks of one object in both frames of a pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMasks {
    /// Feature-grid masks, both non-empty; queries and MLC use these.
    pub template: Mask,
    pub target: Mask,
    /// Image-resolution masks; boundary distances for MBC come from these.
    pub template_px: Mask,
    pub target_px: Mask,
}

/// A template/target frame pair with the objects visible in both frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub template: Image,
    pub target: Image,
    pub objects: Vec<ObjectMasks>,
    pub query_seed: u64,
}

/// Everything discrete that the objective branches on; finite-difference
/// steps that change it straddle a kink and are redrawn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteState(Vec<i64>);

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub breakdown: LossBreakdown,
    pub grads: ModelParams,
    pub state: DiscreteState,
}

struct PerQuery {
    d_query: Vec<f64>,
    d_corr: Vec<f64>,
    d_refiner: RefinerParams,
}

/// Loss and gradient for one frame pair. Per-object losses are averaged.
pub fn pair_objective(
    params: &ModelParams,
    proposer: Option<&ModelParams>,
    pair: &FramePair,
    cfg: &ObjectiveConfig,
) -> Result<PairResult, TrainError> {
    let (f0, cache0) = forward_with_cache(params, &pair.template)?;
    let (ft, cachet) = forward_with_cache(params, &pair.target)?;
    let nt = NormalizedGrid::new(&ft)?;
    let frozen = match proposer {
        Some(p) => Some((
            forward(p, &pair.template)?,
            NormalizedGrid::new(&forward(p, &pair.target)?)?,
            p,
        )),
        None => None,
    };
    let (gw, gh) = (f0.width, f0.height);
    let n_obj = pair.objects.len().max(1) as f64;
    let [l1, l2, l3] = cfg.weights.0;

    let mut grads = ModelParams::zeros(params.config);
    let mut d_f0 = vec![0.0; f0.values.len()];
    let mut d_ft = vec![0.0; ft.values.len()];
    let mut sum = LossBreakdown::default();
    let mut state = Vec::new();

    let patch = params.config.patch;
    let to_px = |p: Point2| Point2::new(grid_to_image(p.x, patch), grid_to_image(p.y, patch));
    for (k, obj) in pair.objects.iter().enumerate() {
        let (m0, mt) = (&obj.template, &obj.target);
        let queries = sample_queries(
            m0,
            cfg.groups,
            cfg.points_per_group,
            pair.query_seed.wrapping_add(k as u64),
        )?;
        let points = queries.flat();
        let taps = points
            .iter()
            .map(|&p| BilinearTap::new(gw, gh, p))
            .collect::<Result<Vec<_>, _>>()?;
        let matches = taps
            .par_iter()
            .map(|tap| match_query(&tap.sample(&f0), &nt, &params.refiner, &cfg.matching))
            .collect::<Result<Vec<QueryMatch>, _>>()?;
        let predicted: Vec<Point2> = matches.iter().map(|m| m.prediction.position).collect();

        let proposals: Vec<crate::losses::Proposal> = match &frozen {
            None => matches
                .iter()
                .map(|m| crate::losses::Proposal {
                    position: m.prediction.position,
                    score: m.prediction.peak_score,
                })
                .collect(),
            Some((pf0, pnt, pp)) => taps
                .par_iter()
                .map(|tap| {
                    match_query(&tap.sample(pf0), pnt, &pp.refiner, &cfg.matching).map(|m| {
                        crate::losses::Proposal {
                            position: m.prediction.position,
                            score: m.prediction.peak_score,
                        }
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
        };

        let n = points.len();
        let mut d_pos = vec![Point2::ZERO; n];
        let mut l_lsc = 0.0;
        match lsc_loss(&queries, &proposals, &predicted, &cfg.lsc, (gw, gh)) {
            Ok(out) => {
                l_lsc = out.loss;
                sum.supervised_points += out.supervised;
                sum.skipped_groups += out.skipped_groups;
                // pseudo-labels only carry gradient when they come from the live model
                let attached = !cfg.lsc.detach && frozen.is_none();
                for i in 0..n {
                    let mut g = out.d_predicted[i];
                    if attached {
                        g = g + out.d_proposals[i];
                    }
                    d_pos[i] = d_pos[i] + g * (l1 / n_obj);
                }
                state.push(out.supervised as i64);
                for sel in &out.reliable {
                    state.extend(sel.iter().map(|&i| i as i64));
                    state.push(-1);
                }
            }
            Err(LossError::NoValidGroup { skipped }) => {
                sum.skipped_groups += skipped;
                state.push(-2);
            }
            Err(e @ LossError::GroupTooSmall { .. }) => {
                unreachable!("groups are size-checked first: {e}")
            }
        }

        let softmaxes: Vec<&[f64]> = matches
            .iter()
            .map(|m| m.prediction.softmax_map.as_slice())
            .collect();
        let mlc = mlc_loss(&softmaxes, mt, cfg.tau, cfg.mlc_eps);
        sum.mlc_active += mlc.active;
        sum.points += n;
        state.extend(mlc.coef.iter().map(|&c| (c != 0.0) as i64));

        // boundary distances in image pixels
        let field0 = distance_field(&obj.template_px)?;
        let fieldt = distance_field(&obj.target_px)?;
        let groups_px = QueryGroupSet {
            groups: queries
                .groups
                .iter()
                .map(|g| g.iter().map(|&p| to_px(p)).collect())
                .collect(),
            group_centroids: queries.group_centroids.iter().map(|&p| to_px(p)).collect(),
        };
        let predicted_px: Vec<Point2> = predicted.iter().map(|&p| to_px(p)).collect();
        let mbc = mbc_loss(&groups_px, &field0, &predicted_px, &fieldt, cfg.mbc_eps);
        // d(image)/d(grid) = patch
        let mbc_scale = l3 * patch as f64 / n_obj;
        for i in 0..n {
            d_pos[i] = d_pos[i] + mbc.d_predicted[i] * mbc_scale;
        }
        let (fw, fh) = (fieldt.width() as f64, fieldt.height() as f64);
        for (m, p) in matches.iter().zip(&predicted_px) {
            state.push((m.prediction.argmax.y * gw + m.prediction.argmax.x) as i64);
            // cell of the distance-field lookup (the field is piecewise bilinear)
            state.push(p.x.clamp(-1.0, fw).floor() as i64);
            state.push(p.y.clamp(-1.0, fh).floor() as i64);
        }

        sum.l_lsc += l_lsc / n_obj;
        sum.l_mlc += mlc.loss / n_obj;
        sum.l_mbc += mbc.loss / n_obj;

        let mask_bits = mt.bits();
        let per_query = (0..n)
            .into_par_iter()
            .map(|i| {
                let coef = mlc.coef[i] * l2 / n_obj;
                let d_soft: Option<Vec<f64>> = (coef != 0.0).then(|| {
                    mask_bits
                        .iter()
                        .map(|&b| if b { coef } else { 0.0 })
                        .collect()
                });
                let mut d_refiner = RefinerParams::zeros(params.refiner.hidden);
                let g = match_query_backward(
                    &matches[i],
                    &nt,
                    &params.refiner,
                    &cfg.matching,
                    d_pos[i],
                    d_soft.as_deref(),
                    &mut d_refiner,
                );
                PerQuery {
                    d_query: g.d_query,
                    d_corr: g.d_corr,
                    d_refiner,
                }
            })
            .collect::<Vec<_>>();

        for (pq, tap) in per_query.iter().zip(&taps) {
            let r = &mut grads.refiner;
            for (dst, src) in [
                (&mut r.w1, &pq.d_refiner.w1),
                (&mut r.b1, &pq.d_refiner.b1),
                (&mut r.w2, &pq.d_refiner.w2),
                (&mut r.b2, &pq.d_refiner.b2),
            ] {
                for (a, b) in dst.iter_mut().zip(src) {
                    *a += b;
                }
            }
            tap.backward(&f0, &pq.d_query, &mut d_f0);
        }
        let terms: Vec<TargetGradTerm<'_>> = per_query
            .iter()
            .zip(&matches)
            .map(|(pq, m)| TargetGradTerm {
                query: &m.query,
                corr: &m.corr,
                grad: &pq.d_corr,
            })
            .collect();
        correlation_target_grad(&nt, &terms, &mut d_ft);
    }

    if !cfg.freeze_extractor {
        backward(params, &cache0, &d_f0, &mut grads)?;
        backward(params, &cachet, &d_ft, &mut grads)?;
    }
    let mut breakdown = total_loss(sum.l_lsc, sum.l_mlc, sum.l_mbc, &cfg.weights);
    breakdown.supervised_points = sum.supervised_points;
    breakdown.skipped_groups = sum.skipped_groups;
    breakdown.mlc_active = sum.mlc_active;
    breakdown.points = sum.points;
    Ok(PairResult {
        breakdown,
        grads,
        state: DiscreteState(state),
    })
}

/// Sum of per-pair gradients in index order, and the mean loss breakdown.
pub fn batch_gradients(
    params: &ModelParams,
    proposer: Option<&ModelParams>,
    pairs: &[FramePair],
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, ModelParams), TrainError> {
    let results = pairs
        .par_iter()
        .map(|p| pair_objective(params, proposer, p, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let mut grads = ModelParams::zeros(params.config);
    let mut mean = LossBreakdown::default();
    let k = results.len().max(1) as f64;
    for r in &results {
        grads.add_assign(&r.grads);
        mean.l_lsc += r.breakdown.l_lsc / k;
        mean.l_mlc += r.breakdown.l_mlc / k;
        mean.l_mbc += r.breakdown.l_mbc / k;
        mean.l_total += r.breakdown.l_total / k;
        mean.supervised_points += r.breakdown.supervised_points;
        mean.skipped_groups += r.breakdown.skipped_groups;
        mean.mlc_active += r.breakdown.mlc_active;
        mean.points += r.breakdown.points;
    }
    Ok((mean, grads))
}

/// A clip with its masks already downsampled to the feature grid.
pub struct PreparedClip<'a> {
    pub clip: &'a Clip,
    pub grid_masks: Vec<Vec<Mask>>,
}

impl<'a> PreparedClip<'a> {
    pub fn new(clip: &'a Clip, patch: usize) -> Result<Self, TrainError> {
        let grid_masks = clip
            .masks
            .iter()
            .map(|ms| {
                ms.iter()
                    .map(|m| mask_to_grid(m, patch))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { clip, grid_masks })
    }
}

fn warp_image(img: &Image, inv: &SimilarityTransform2D, gain: [f64; 3], offset: [f64; 3]) -> Image {
    Image::from_fn(img.width, img.height, |x, y| {
        let c = img.sample(inv.apply(Point2::new(x as f64, y as f64)));
        std::array::from_fn(|ch| (gain[ch] * c[ch] + offset[ch]).clamp(0.0, 1.0))
    })
}

fn warp_mask(m: &Mask, inv: &SimilarityTransform2D) -> Mask {
    Mask::from_fn(m.width(), m.height(), |x, y| {
        let s = inv.apply(Point2::new(x as f64, y as f64));
        let (sx, sy) = (s.x.round(), s.y.round());
        sx >= 0.0
            && sy >= 0.0
            && (sx as usize) < m.width()
            && (sy as usize) < m.height()
            && m.get(sx as usize, sy as usize)
    })
}

/// Draws one training pair: template frame 0 (or the reverse when
/// `symmetric_pairs`), target frame within `max_gap`, optional jitter on the
/// target. Redraws until some object is visible on both grids.
pub fn sample_pair(
    clips: &[PreparedClip<'_>],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FramePair, TrainError> {
    let patch = cfg.model.patch;
    for _ in 0..cfg.resample_budget {
        let pc = &clips[rng.gen_range(0..clips.len())];
        let n = pc.clip.num_frames();
        if n < 2 {
            continue;
        }
        let gap = rng.gen_range(1..=cfg.max_gap.min(n - 1));
        let (a, b) = if cfg.symmetric_pairs && rng.gen_bool(0.5) {
            (gap, 0)
        } else {
            (0, gap)
        };
        let query_seed: u64 = rng.gen();
        let aug = &cfg.augment;
        let jitter = if aug.enabled {
            let s = 1.0 + rng.gen_range(-aug.scale..=aug.scale);
            let theta = rng
                .gen_range(-aug.rotation_deg..=aug.rotation_deg)
                .to_radians();
            let shift = Point2::new(
                rng.gen_range(-aug.shift_px..=aug.shift_px),
                rng.gen_range(-aug.shift_px..=aug.shift_px),
            );
            let gain: [f64; 3] =
                std::array::from_fn(|_| 1.0 + rng.gen_range(-aug.color..=aug.color));
            let offset: [f64; 3] =
                std::array::from_fn(|_| rng.gen_range(-aug.color..=aug.color) * 0.5);
            Some((s, theta, shift, gain, offset))
        } else {
            None
        };

        let template = pc.clip.frames[a].clone();
        let (target, target_masks, target_px) = match jitter {
            None => (
                pc.clip.frames[b].clone(),
                pc.grid_masks[b].clone(),
                pc.clip.masks[b].clone(),
            ),
            Some((s, theta, shift, gain, offset)) => {
                let img = &pc.clip.frames[b];
                let center =
                    Point2::new((img.width - 1) as f64 / 2.0, (img.height - 1) as f64 / 2.0);
                // rotate and scale about the image center, then shift
                let about = SimilarityTransform2D::from_parts(1.0, 0.0, center)
                    .compose(&SimilarityTransform2D::from_parts(s, theta, shift))
                    .compose(&SimilarityTransform2D::from_parts(1.0, 0.0, -center));
                let inv = about.inverse();
                let warped = warp_image(img, &inv, gain, offset);
                let px: Vec<Mask> = pc.clip.masks[b]
                    .iter()
                    .map(|m| warp_mask(m, &inv))
                    .collect();
                let masks = px
                    .iter()
                    .map(|m| mask_to_grid(m, patch))
                    .collect::<Result<Vec<_>, _>>()?;
                (warped, masks, px)
            }
        };
        let objects: Vec<ObjectMasks> = pc.grid_masks[a]
            .iter()
            .zip(target_masks)
            .zip(pc.clip.masks[a].iter().zip(target_px))
            .filter(|((m0, mt), _)| m0.count() > 0 && mt.count() > 0)
            .map(|((m0, mt), (p0, pt))| ObjectMasks {
                template: m0.clone(),
                target: mt,
                template_px: p0.clone(),
                target_px: pt,
            })
            .collect();
        if objects.is_empty() {
            continue;
        }
        return Ok(FramePair {
            template,
            target,
            objects,
            query_seed,
        });
    }
    Err(TrainError::NoForeground(cfg.resample_budget))
}

/// RNG for one iteration: a fixed stream of the run seed, so any iteration can
/// be replayed without the ones before it.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub l_lsc: f64,
    pub l_mlc: f64,
    pub l_mbc: f64,
    pub l_total: f64,
    pub delta_avg: Option<f64>,
    pub skipped_groups: usize,
    pub mlc_active_frac: f64,
}

pub const LOG_HEADER: &str =
    "iter,l_lsc,l_mlc,l_mbc,l_total,delta_avg,skipped_groups,mlc_active_frac";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter,
            self.l_lsc,
            self.l_mlc,
            self.l_mbc,
            self.l_total,
            self.delta_avg.map_or(String::new(), |d| d.to_string()),
            self.skipped_groups,
            self.mlc_active_frac
        )
    }
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<(), TrainError> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    /// Held-out first-query δ_avg of the final parameters, when probing.
    pub final_delta_avg: Option<f64>,
}

fn probe(params: &ModelParams, heldout: &[Clip], cfg: &TrainConfig) -> Result<f64, TrainError> {
    let tracker = ModelTracker {
        params,
        matching: cfg.matching(),
    };
    let res = (cfg.eval_resolution[0], cfg.eval_resolution[1]);
    Ok(evaluate(&tracker, heldout, QueryMode::First, res)?
        .aggregate
        .delta_avg)
}

/// Runs training from the seeded initialisation.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_from(cfg, None)
}

/// Runs training, optionally continuing from `resume` (which must carry its
/// optimizer state). Writes the checkpoint and log when paths are configured.
pub fn train_from(
    cfg: &TrainConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let corpus = load_corpus(&cfg.corpus)?;
    if corpus.train.is_empty() {
        return Err(TrainError::BadConfig("corpus has no training clips".into()));
    }
    let prepared = corpus
        .train
        .iter()
        .map(|c| PreparedClip::new(c, cfg.model.patch))
        .collect::<Result<Vec<_>, _>>()?;
    let init = ModelParams::init(cfg.seed, cfg.model);
    let (mut params, mut optim, start) = match resume {
        Some(ck) => {
            if ck.params.config != cfg.model {
                return Err(TrainError::BadConfig(
                    "checkpoint model config differs from config.model".into(),
                ));
            }
            let optim = ck.optim.unwrap_or_else(|| OptimState::new(cfg.model));
            (ck.params, optim, ck.step as usize)
        }
        None => (init.clone(), OptimState::new(cfg.model), 0),
    };
    let proposer = (cfg.proposer == Proposer::FrozenInit).then_some(&init);
    let objective = cfg.objective();
    let probing = cfg.probe_every > 0 && !corpus.heldout.is_empty();
    let started = Instant::now();
    let mut log = Vec::with_capacity(cfg.iterations.saturating_sub(start));

    for it in start..cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, it);
        let pairs = (0..cfg.batch_size)
            .map(|_| sample_pair(&prepared, cfg, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let delta_avg = if probing && (it % cfg.probe_every == 0) {
            Some(probe(&params, &corpus.heldout, cfg)?)
        } else {
            None
        };
        let (loss, mut grads) = batch_gradients(&params, proposer, &pairs, &objective)?;
        if cfg.freeze_extractor {
            for b in grads.blocks_mut().into_iter().take(EXTRACTOR_BLOCKS) {
                b.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut hyper = cfg.optimizer;
        if let Some(d) = cfg.lr_decay {
            if it >= d.at_iteration {
                hyper.lr *= d.factor;
            }
        }
        if cfg.freeze_extractor {
            let keep: Vec<Vec<f64>> = params.blocks()[..EXTRACTOR_BLOCKS]
                .iter()
                .map(|b| b.to_vec())
                .collect();
            adamw_step(&mut params, &grads, &mut optim, &hyper);
            for (dst, src) in params.blocks_mut().into_iter().zip(keep) {
                *dst = src;
            }
        } else {
            adamw_step(&mut params, &grads, &mut optim, &hyper);
        }
        let row = LogRow {
            iter: it,
            l_lsc: loss.l_lsc,
            l_mlc: loss.l_mlc,
            l_mbc: loss.l_mbc,
            l_total: loss.l_total,
            delta_avg,
            skipped_groups: loss.skipped_groups,
            mlc_active_frac: loss.mlc_active_frac(),
        };
        if it % 50 == 0 || delta_avg.is_some() {
            log::info!(
                "iter {it} loss {:.5} (lsc {:.4} mlc {:.4} mbc {:.4}){} [{:.1}s]",
                row.l_total,
                row.l_lsc,
                row.l_mlc,
                row.l_mbc,
                delta_avg.map_or(String::new(), |d| format!(" probe δ_avg {d:.4}")),
                started.elapsed().as_secs_f64()
            );
        }
        if !params.is_finite() {
            return Err(TrainError::BadConfig(format!(
                "parameters diverged at iteration {it}"
            )));
        }
        log.push(row);
    }

    let final_delta_avg = if probing {
        Some(probe(&params, &corpus.heldout, cfg)?)
    } else {
        None
    };
    let checkpoint = Checkpoint {
        params,
        optim: Some(optim),
        seed: cfg.seed,
        step: cfg.iterations.max(start) as u64,
    };
    if let Some(path) = &cfg.checkpoint_path {
        checkpoint.save(path)?;
    }
    if let Some(path) = &cfg.log_path {
        write_log(path, &log)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        log,
        final_delta_avg,
    })
}

/// Mean of `values` over a trailing window ending at each index.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

// ---------------------------------------------------------------- gradcheck

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub image_size: usize,
    pub model: ModelConfig,
    pub groups: usize,
    pub points_per_group: usize,
    pub entries_per_block: usize,
    pub step: f64,
    pub freeze_extractor: bool,
    pub detach_pseudo_labels: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            model: ModelConfig {
                patch: 4,
                channels: 6,
                refiner_hidden: 4,
            },
            groups: 2,
            points_per_group: 6,
            entries_per_block: 6,
            step: 1e-5,
            freeze_extractor: false,
            detach_pseudo_labels: true,
        }
    }
}

/// Fraction of the largest gradient entry of a term below which a block
/// counts as zero; keeps structurally zero blocks (a bias shared by all logits
/// of a softmax) from turning roundoff into a relative error of 1.
pub const GRADCHECK_ZERO_FLOOR: f64 = 1e-6;

impl GradcheckConfig {
    /// The small instance with the stop-gradient and freezing choices of a
    /// training config.
    pub fn for_training(cfg: &TrainConfig) -> Self {
        Self {
            freeze_extractor: cfg.freeze_extractor,
            detach_pseudo_labels: cfg.detach_pseudo_labels,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub term: String,
    pub block: String,
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|, floor)`
    /// over the checked entries, with `floor` from [`GRADCHECK_ZERO_FLOOR`].
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude over the whole block.
    pub analytic_max_abs: f64,
    pub checked: usize,
    pub redrawn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<BlockCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// The small gradcheck instance: a two-object 32x32 pair with distinct
/// motion, seeded.
pub fn gradcheck_instance(
    gc: &GradcheckConfig,
    seed: u64,
) -> Result<(ModelParams, FramePair), TrainError> {
    let synth = SynthConfig {
        width: gc.image_size,
        height: gc.image_size,
        frames: 3,
        min_objects: 1,
        max_objects: 2,
        motion: Motion::RandomWalk,
        radius_range: [gc.image_size as f64 * 0.22, gc.image_size as f64 * 0.3],
        tracks_per_object: 1,
        ..SynthConfig::default()
    };
    let cfg = TrainConfig {
        corpus: CorpusSpec::Generate(GeneratorSpec {
            synth,
            train_clips: 1,
            heldout_clips: 0,
            seed,
        }),
        model: gc.model,
        max_gap: 2,
        augment: AugmentConfig {
            enabled: false,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..50u64 {
        let clip = crate::data::gen_synthetic(&synth, seed.wrapping_add(attempt), "gradcheck")?;
        let prepared = [PreparedClip::new(&clip, gc.model.patch)?];
        if let Ok(pair) = sample_pair(&prepared, &cfg, &mut rng) {
            let mut params = ModelParams::init(seed, gc.model);
            // move away from the symmetric initialisation
            for b in params.blocks_mut() {
                b.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
            }
            return Ok((params, pair));
        }
    }
    Err(TrainError::NoForeground(50))
}

fn gradcheck_objective(gc: &GradcheckConfig, weights: [f64; 3]) -> ObjectiveConfig {
    let base = TrainConfig {
        groups: gc.groups,
        points_per_group: gc.points_per_group,
        detach_pseudo_labels: gc.detach_pseudo_labels,
        freeze_extractor: gc.freeze_extractor,
        lambdas: LossWeights(weights),
        ..TrainConfig::default()
    };
    base.objective()
}

/// Central finite differences against the analytic gradient, per loss term
/// (each alone with its default weight) and for the weighted total.
pub fn gradcheck(gc: &GradcheckConfig, seed: u64) -> Result<GradcheckReport, TrainError> {
    let (params, pair) = gradcheck_instance(gc, seed)?;
    let [a, b, c] = LossWeights::default().0;
    let terms = [
        ("lsc", [a, 0.0, 0.0]),
        ("mlc", [0.0, b, 0.0]),
        ("mbc", [0.0, 0.0, c]),
        ("total", [a, b, c]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut checks = Vec::new();
    for (name, w) in terms {
        let obj = gradcheck_objective(gc, w);
        // stop-gradient semantics: perturbed evaluations reuse the unperturbed pseudo-labels
        let labels = gc.detach_pseudo_labels.then_some(&params);
        let base = pair_objective(&params, labels, &pair, &obj)?;
        let floor = GRADCHECK_ZERO_FLOOR * base.grads.max_abs();
        for (bi, block_name) in BLOCK_NAMES.iter().enumerate() {
            let analytic = base.grads.blocks()[bi];
            let analytic_max_abs = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if gc.freeze_extractor && bi < EXTRACTOR_BLOCKS {
                checks.push(BlockCheck {
                    term: name.into(),
                    block: block_name.to_string(),
                    max_rel_error: 0.0,
                    analytic_max_abs,
                    checked: 0,
                    redrawn: 0,
                });
                continue;
            }
            let len = analytic.len();
            let mut order: Vec<usize> = (0..len).collect();
            for i in (1..len).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let mut checked = 0;
            let mut redrawn = 0;
            let (mut diff, mut scale_a, mut scale_n) = (0.0f64, 0.0f64, 0.0f64);
            for &idx in &order {
                if checked == gc.entries_per_block {
                    break;
                }
                let eval = |delta: f64| -> Result<PairResult, TrainError> {
                    let mut p = params.clone();
                    p.blocks_mut()[bi][idx] += delta;
                    pair_objective(&p, labels, &pair, &obj)
                };
                let plus = eval(gc.step)?;
                let minus = eval(-gc.step)?;
                if plus.state != base.state || minus.state != base.state {
                    redrawn += 1;
                    continue;
                }
                let numeric = (plus.breakdown.l_total - minus.breakdown.l_total) / (2.0 * gc.step);
                let an = analytic[idx];
                diff = diff.max((an - numeric).abs());
                scale_a = scale_a.max(an.abs());
                scale_n = scale_n.max(numeric.abs());
                checked += 1;
            }
            let scale = scale_a.max(scale_n).max(floor);
            checks.push(BlockCheck {
                term: name.into(),
                block: block_name.to_string(),
                max_rel_error: diff / scale,
                analytic_max_abs,
                checked,
                redrawn,
            });
        }
    }
    Ok(GradcheckReport { checks })
}

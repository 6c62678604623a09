//! Point tracking over clips and δ-threshold accuracy.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Clip, DataError, Image, Track, TrackPoint, TrackSet};
use crate::geometry::Point2;
use crate::matching::{
    bilinear_feature, match_query, CorrelationMap, FeatureGrid, MatchConfig, MatchError,
    NormalizedGrid,
};
use crate::model::{forward, grid_to_image, image_to_grid, ModelError, ModelParams};

/// Pixel thresholds at the evaluation resolution.
pub const THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// Frame stride for strided queries.
pub const QUERY_STRIDE: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query ({x}, {y}) in frame {frame} lies outside the {width}x{height} clip of {frames} frames")]
    OutOfBounds {
        x: f64,
        y: f64,
        frame: usize,
        width: usize,
        height: usize,
        frames: usize,
    },
    #[error("mismatched tracks: {0}")]
    MismatchedTracks(String),
    #[error("no visible ground-truth points to score")]
    NoVisiblePoints,
    #[error("clip {0} has no ground-truth tracks")]
    MissingGroundTruth(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A point to track: image-pixel position in a given frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub frame: usize,
    pub position: Point2,
}

pub trait PointTracker: Sync {
    /// One output track per query, covering every clip frame.
    fn track(&self, clip: &Clip, queries: &[Query]) -> Result<TrackSet, EvalError>;
}

/// Tracks with the learned extractor and refiner.
pub struct ModelTracker<'a> {
    pub params: &'a ModelParams,
    pub matching: MatchConfig,
}

impl PointTracker for ModelTracker<'_> {
    fn track(&self, clip: &Clip, queries: &[Query]) -> Result<TrackSet, EvalError> {
        track_points(self.params, clip, queries, &self.matching)
    }
}

/// Returns ground truth for queries that sit on a ground-truth track.
pub struct OracleTracker;

impl PointTracker for OracleTracker {
    fn track(&self, clip: &Clip, queries: &[Query]) -> Result<TrackSet, EvalError> {
        let gt = clip
            .gt_tracks
            .as_ref()
            .ok_or_else(|| EvalError::MissingGroundTruth(clip.name.clone()))?;
        let tracks = queries
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let best = gt
                    .tracks
                    .iter()
                    .min_by(|a, b| {
                        let da = a.points[q.frame].position().distance(q.position);
                        let db = b.points[q.frame].position().distance(q.position);
                        da.total_cmp(&db)
                    })
                    .ok_or_else(|| EvalError::MismatchedTracks("no ground-truth tracks".into()))?;
                Ok(Track {
                    id: i,
                    points: best
                        .points
                        .iter()
                        .map(|p| TrackPoint {
                            visible: true,
                            ..*p
                        })
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Ok(TrackSet { tracks })
    }
}

fn check_query(clip: &Clip, q: &Query) -> Result<(), EvalError> {
    let (w, h) = (clip.frames[0].width, clip.frames[0].height);
    let inside = q.frame < clip.num_frames()
        && q.position.x >= 0.0
        && q.position.y >= 0.0
        && q.position.x <= (w - 1) as f64
        && q.position.y <= (h - 1) as f64;
    if inside {
        Ok(())
    } else {
        Err(EvalError::OutOfBounds {
            x: q.position.x,
            y: q.position.y,
            frame: q.frame,
            width: w,
            height: h,
            frames: clip.num_frames(),
        })
    }
}

fn clamp_to_grid(g: Point2, f: &FeatureGrid) -> Point2 {
    Point2::new(
        g.x.clamp(0.0, (f.width - 1) as f64),
        g.y.clamp(0.0, (f.height - 1) as f64),
    )
}

/// Feature extraction for every frame of a clip.
pub fn clip_features(
    params: &ModelParams,
    frames: &[Image],
) -> Result<Vec<FeatureGrid>, EvalError> {
    frames
        .iter()
        .map(|f| forward(params, f).map_err(EvalError::from))
        .collect()
}

/// Tracks each query through every frame. Positions are image pixels; every
/// output point is reported visible.
pub fn track_points(
    params: &ModelParams,
    clip: &Clip,
    queries: &[Query],
    cfg: &MatchConfig,
) -> Result<TrackSet, EvalError> {
    for q in queries {
        check_query(clip, q)?;
    }
    let feats = clip_features(params, &clip.frames)?;
    let grids = feats
        .iter()
        .map(NormalizedGrid::new)
        .collect::<Result<Vec<_>, _>>()?;
    let patch = params.config.patch;
    let tracks = queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let src = &feats[q.frame];
            let g = Point2::new(
                image_to_grid(q.position.x, patch),
                image_to_grid(q.position.y, patch),
            );
            let qf = bilinear_feature(src, clamp_to_grid(g, src))?;
            let points = grids
                .iter()
                .map(|target| {
                    let m = match_query(&qf, target, &params.refiner, cfg)?;
                    let p = m.prediction.position;
                    Ok(TrackPoint {
                        x: grid_to_image(p.x, patch),
                        y: grid_to_image(p.y, patch),
                        visible: true,
                    })
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            Ok(Track { id: i, points })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(TrackSet { tracks })
}

/// Refined response map of one query over one target frame.
pub fn query_heatmap(
    params: &ModelParams,
    clip: &Clip,
    query: &Query,
    target_frame: usize,
    cfg: &MatchConfig,
) -> Result<CorrelationMap, EvalError> {
    check_query(clip, query)?;
    if target_frame >= clip.num_frames() {
        return Err(EvalError::OutOfBounds {
            x: query.position.x,
            y: query.position.y,
            frame: target_frame,
            width: clip.frames[0].width,
            height: clip.frames[0].height,
            frames: clip.num_frames(),
        });
    }
    let patch = params.config.patch;
    let src = forward(params, &clip.frames[query.frame])?;
    let g = Point2::new(
        image_to_grid(query.position.x, patch),
        image_to_grid(query.position.y, patch),
    );
    let qf = bilinear_feature(&src, clamp_to_grid(g, &src))?;
    let target = NormalizedGrid::new(&forward(params, &clip.frames[target_frame])?)?;
    Ok(match_query(&qf, &target, &params.refiner, cfg)?.refined)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    /// Fractions within 1, 2, 4, 8 and 16 pixels.
    pub delta: [f64; 5],
    pub delta_avg: f64,
    pub n_points: usize,
}

/// δ accuracy over visible ground-truth points, skipping each track's query
/// frame. Coordinates are rescaled from `image_size` to `eval_resolution`
/// before thresholding.
pub fn delta_metrics(
    pred: &TrackSet,
    gt: &TrackSet,
    query_frames: &[usize],
    image_size: (usize, usize),
    eval_resolution: (usize, usize),
) -> Result<DeltaReport, EvalError> {
    if pred.tracks.len() != gt.tracks.len() || query_frames.len() != gt.tracks.len() {
        return Err(EvalError::MismatchedTracks(format!(
            "{} predicted, {} ground-truth tracks, {} query frames",
            pred.tracks.len(),
            gt.tracks.len(),
            query_frames.len()
        )));
    }
    let sx = eval_resolution.0 as f64 / image_size.0 as f64;
    let sy = eval_resolution.1 as f64 / image_size.1 as f64;
    let mut hits = [0usize; 5];
    let mut n = 0usize;
    for ((p, g), &qf) in pred.tracks.iter().zip(&gt.tracks).zip(query_frames) {
        if p.points.len() != g.points.len() {
            return Err(EvalError::MismatchedTracks(format!(
                "track {}: {} predicted frames, {} ground-truth frames",
                g.id,
                p.points.len(),
                g.points.len()
            )));
        }
        for (t, (pp, gp)) in p.points.iter().zip(&g.points).enumerate() {
            if t == qf || !gp.visible {
                continue;
            }
            let dx = (pp.x - gp.x) * sx;
            let dy = (pp.y - gp.y) * sy;
            let d = (dx * dx + dy * dy).sqrt();
            n += 1;
            for (h, &thr) in hits.iter_mut().zip(&THRESHOLDS) {
                if d < thr {
                    *h += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(EvalError::NoVisiblePoints);
    }
    let delta = hits.map(|h| h as f64 / n as f64);
    Ok(DeltaReport {
        delta,
        delta_avg: delta.iter().sum::<f64>() / 5.0,
        n_points: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    First,
    Strided,
}

impl QueryMode {
    pub fn name(self) -> &'static str {
        match self {
            QueryMode::First => "first",
            QueryMode::Strided => "strided",
        }
    }
}

impl std::str::FromStr for QueryMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "first" => Ok(QueryMode::First),
            "strided" => Ok(QueryMode::Strided),
            other => Err(format!(
                "unknown query mode '{other}' (expected first or strided)"
            )),
        }
    }
}

/// Queries for a mode, each paired with the ground-truth track it follows.
pub fn build_queries(gt: &TrackSet, mode: QueryMode) -> (Vec<Query>, TrackSet) {
    let mut queries = Vec::new();
    let mut tracks = Vec::new();
    for tr in &gt.tracks {
        let frames: Vec<usize> = match mode {
            QueryMode::First => tr.first_visible().into_iter().collect(),
            QueryMode::Strided => (0..tr.points.len())
                .step_by(QUERY_STRIDE)
                .filter(|&t| tr.points[t].visible)
                .collect(),
        };
        for f in frames {
            queries.push(Query {
                frame: f,
                position: tr.points[f].position(),
            });
            tracks.push(tr.clone());
        }
    }
    (queries, TrackSet { tracks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clip: String,
    pub mode: QueryMode,
    pub report: DeltaReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: QueryMode,
    pub eval_resolution: (usize, usize),
    pub clips: Vec<ClipReport>,
    /// Mean of the per-clip fractions; `n_points` is the total.
    pub aggregate: DeltaReport,
}

pub fn evaluate_clip(
    tracker: &dyn PointTracker,
    clip: &Clip,
    mode: QueryMode,
    eval_resolution: (usize, usize),
) -> Result<DeltaReport, EvalError> {
    let gt = clip
        .gt_tracks
        .as_ref()
        .ok_or_else(|| EvalError::MissingGroundTruth(clip.name.clone()))?;
    let (queries, gt_per_query) = build_queries(gt, mode);
    let pred = tracker.track(clip, &queries)?;
    let query_frames: Vec<usize> = queries.iter().map(|q| q.frame).collect();
    let size = (clip.frames[0].width, clip.frames[0].height);
    delta_metrics(&pred, &gt_per_query, &query_frames, size, eval_resolution)
}

/// Per-clip reports (computed in parallel, kept in clip order) and their mean.
pub fn evaluate(
    tracker: &dyn PointTracker,
    clips: &[Clip],
    mode: QueryMode,
    eval_resolution: (usize, usize),
) -> Result<EvalReport, EvalError> {
    if clips.is_empty() {
        return Err(EvalError::NoVisiblePoints);
    }
    let reports = clips
        .par_iter()
        .map(|c| evaluate_clip(tracker, c, mode, eval_resolution))
        .collect::<Result<Vec<_>, _>>()?;
    let k = reports.len() as f64;
    let mut delta = [0.0; 5];
    for r in &reports {
        for (d, v) in delta.iter_mut().zip(r.delta) {
            *d += v;
        }
    }
    let delta = delta.map(|d| d / k);
    let aggregate = DeltaReport {
        delta,
        delta_avg: reports.iter().map(|r| r.delta_avg).sum::<f64>() / k,
        n_points: reports.iter().map(|r| r.n_points).sum(),
    };
    Ok(EvalReport {
        mode,
        eval_resolution,
        clips: clips
            .iter()
            .zip(reports)
            .map(|(c, report)| ClipReport {
                clip: c.name.clone(),
                mode,
                report,
            })
            .collect(),
        aggregate,
    })
}

/// Writes `<stem>.csv` (one row per clip) and `<stem>.json` (full report).
pub fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<(), EvalError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut csv =
        String::from("clip,mode,delta1,delta2,delta4,delta8,delta16,delta_avg,n_points\n");
    for c in &report.clips {
        let d = &c.report.delta;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.clip,
            c.mode.name(),
            d[0],
            d[1],
            d[2],
            d[3],
            d[4],
            c.report.delta_avg,
            c.report.n_points
        ));
    }
    let csv_path = dir.join(format!("{stem}.csv"));
    fs::write(&csv_path, csv).map_err(io(&csv_path))?;
    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    fs::write(&json_path, json).map_err(io(&json_path))?;
    Ok(())
}

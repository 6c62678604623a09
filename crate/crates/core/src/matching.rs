//! Dense point matching on feature grids: bilinear query features, cosine
//! correlation, a two-layer convolutional refiner and soft-argmax
//! localisation. Every stage has a hand-written backward pass.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;
use crate::maskops::{lerp_index, Cell};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("point ({x}, {y}) outside the {width}x{height} feature grid")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("feature vector norm {0:e} too small for cosine similarity")]
    ZeroNormFeature(f64),
}

/// Features with a norm below this are rejected by the cosine correlation.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

/// `height x width x channels` feature map, channel-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
        }
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.values[o..o + self.channels]
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    /// Cyclic shift: the cell at `(x, y)` moves to `(x + dx, y + dy)` mod size.
    pub fn roll(&self, dx: isize, dy: isize) -> FeatureGrid {
        let mut out = FeatureGrid::zeros(self.height, self.width, self.channels);
        let (w, h, c) = (self.width as isize, self.height as isize, self.channels);
        for y in 0..h {
            for x in 0..w {
                let nx = (x + dx).rem_euclid(w) as usize;
                let ny = (y + dy).rem_euclid(h) as usize;
                let dst = (ny * self.width + nx) * c;
                out.values[dst..dst + c].copy_from_slice(self.cell(x as usize, y as usize));
            }
        }
        out
    }
}

/// Bilinear interpolation stencil at a continuous grid position.
#[derive(Debug, Clone, Copy)]
pub struct BilinearTap {
    cells: [usize; 4],
    weights: [f64; 4],
    d_dx: [f64; 4],
    d_dy: [f64; 4],
}

impl BilinearTap {
    pub fn new(width: usize, height: usize, p: Point2) -> Result<Self, MatchError> {
        let max_x = (width - 1) as f64;
        let max_y = (height - 1) as f64;
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= max_x && p.y <= max_y) {
            return Err(MatchError::OutOfBounds {
                x: p.x,
                y: p.y,
                width,
                height,
            });
        }
        let (x0, fx) = lerp_index(p.x, width);
        let (y0, fy) = lerp_index(p.y, height);
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        let sx = if width > 1 { 1.0 } else { 0.0 };
        let sy = if height > 1 { 1.0 } else { 0.0 };
        Ok(Self {
            cells: [
                y0 * width + x0,
                y0 * width + x1,
                y1 * width + x0,
                y1 * width + x1,
            ],
            weights: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
            d_dx: [-(1.0 - fy) * sx, (1.0 - fy) * sx, -fy * sx, fy * sx],
            d_dy: [-(1.0 - fx) * sy, -fx * sy, (1.0 - fx) * sy, fx * sy],
        })
    }

    pub fn sample(&self, f: &FeatureGrid) -> Vec<f64> {
        let c = f.channels;
        let mut out = vec![0.0; c];
        for (&cell, &w) in self.cells.iter().zip(&self.weights) {
            let src = &f.values[cell * c..(cell + 1) * c];
            for (o, s) in out.iter_mut().zip(src) {
                *o += w * s;
            }
        }
        out
    }

    /// Scatters `d_out` into `d_grid` and returns the gradient w.r.t. the
    /// sampling position.
    pub fn backward(&self, f: &FeatureGrid, d_out: &[f64], d_grid: &mut [f64]) -> Point2 {
        let c = f.channels;
        let mut dp = Point2::ZERO;
        for k in 0..4 {
            let cell = self.cells[k];
            let src = &f.values[cell * c..(cell + 1) * c];
            let dst = &mut d_grid[cell * c..(cell + 1) * c];
            let mut dot = 0.0;
            for ((d, s), g) in dst.iter_mut().zip(src).zip(d_out) {
                *d += self.weights[k] * g;
                dot += s * g;
            }
            dp.x += self.d_dx[k] * dot;
            dp.y += self.d_dy[k] * dot;
        }
        dp
    }
}

pub fn bilinear_feature(f: &FeatureGrid, p: Point2) -> Result<Vec<f64>, MatchError> {
    Ok(BilinearTap::new(f.width, f.height, p)?.sample(f))
}

/// `height x width` scalar map.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl CorrelationMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), height * width);
        Self {
            height,
            width,
            values,
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Unit-normalised copy of a target grid, shared by every query.
#[derive(Debug, Clone)]
pub struct NormalizedGrid {
    pub unit: FeatureGrid,
    pub norms: Vec<f64>,
}

impl NormalizedGrid {
    pub fn new(f: &FeatureGrid) -> Result<Self, MatchError> {
        let c = f.channels;
        let mut unit = f.clone();
        let mut norms = Vec::with_capacity(f.num_cells());
        for cell in unit.values.chunks_mut(c) {
            let n = cell.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > MIN_FEATURE_NORM) {
                return Err(MatchError::ZeroNormFeature(n));
            }
            cell.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(Self { unit, norms })
    }
}

/// A query feature split into direction and length.
#[derive(Debug, Clone)]
pub struct UnitQuery {
    pub unit: Vec<f64>,
    pub norm: f64,
}

impl UnitQuery {
    pub fn new(q: &[f64]) -> Result<Self, MatchError> {
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > MIN_FEATURE_NORM) {
            return Err(MatchError::ZeroNormFeature(norm));
        }
        Ok(Self {
            unit: q.iter().map(|v| v / norm).collect(),
            norm,
        })
    }
}

fn cosine_map(q: &UnitQuery, target: &NormalizedGrid) -> CorrelationMap {
    let c = target.unit.channels;
    let values = target
        .unit
        .values
        .chunks(c)
        .map(|cell| cell.iter().zip(&q.unit).map(|(a, b)| a * b).sum())
        .collect();
    CorrelationMap::new(target.unit.height, target.unit.width, values)
}

/// Cosine similarity between `q` and every cell of `f`.
pub fn correlation_map(q: &[f64], f: &FeatureGrid) -> Result<CorrelationMap, MatchError> {
    let q = UnitQuery::new(q)?;
    let target = NormalizedGrid::new(f)?;
    Ok(cosine_map(&q, &target))
}

/// Gradient of `sum g * cos(q, F)` w.r.t. the raw query feature.
pub fn correlation_query_grad(
    q: &UnitQuery,
    target: &NormalizedGrid,
    corr: &CorrelationMap,
    g: &[f64],
) -> Vec<f64> {
    let c = target.unit.channels;
    let mut acc = vec![0.0; c];
    let mut along = 0.0;
    for ((cell, &gv), &cv) in target.unit.values.chunks(c).zip(g).zip(&corr.values) {
        if gv == 0.0 {
            continue;
        }
        along += gv * cv;
        for (a, f) in acc.iter_mut().zip(cell) {
            *a += gv * f;
        }
    }
    acc.iter()
        .zip(&q.unit)
        .map(|(a, u)| (a - along * u) / q.norm)
        .collect()
}

/// One query's contribution to the target-grid gradient.
pub struct TargetGradTerm<'a> {
    pub query: &'a UnitQuery,
    pub corr: &'a CorrelationMap,
    pub grad: &'a [f64],
}

/// Accumulates the gradient w.r.t. the raw target features from several
/// queries, in the order given.
pub fn correlation_target_grad(
    target: &NormalizedGrid,
    terms: &[TargetGradTerm<'_>],
    d_grid: &mut [f64],
) {
    let c = target.unit.channels;
    let mut acc = vec![0.0; c];
    for cell in 0..target.unit.num_cells() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let mut along = 0.0;
        let mut any = false;
        for t in terms {
            let gv = t.grad[cell];
            if gv == 0.0 {
                continue;
            }
            any = true;
            along += gv * t.corr.values[cell];
            for (a, u) in acc.iter_mut().zip(&t.query.unit) {
                *a += gv * u;
            }
        }
        if !any {
            continue;
        }
        let n = target.norms[cell];
        let unit = &target.unit.values[cell * c..(cell + 1) * c];
        let dst = &mut d_grid[cell * c..(cell + 1) * c];
        for ((d, a), u) in dst.iter_mut().zip(&acc).zip(unit) {
            *d += (a - along * u) / n;
        }
    }
}

/// Two 3x3 same-padded convolutions, `1 -> hidden -> 1`, ReLU in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinerParams {
    pub hidden: usize,
    /// `hidden x 9`, taps in row-major kernel order.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `hidden x 9`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl RefinerParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden,
            w1: vec![0.0; hidden * 9],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * 9],
            b2: vec![0.0],
        }
    }

    /// Passes any input above `-shift` through unchanged, using one hidden
    /// channel.
    pub fn identity(hidden: usize, shift: f64) -> Self {
        let mut p = Self::zeros(hidden);
        p.w1[4] = 1.0;
        p.b1[0] = shift;
        p.w2[4] = 1.0;
        p.b2[0] = -shift;
        p
    }
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Valid destination range along one axis for a source offset `d`.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// `dst[y][x] += w * src[y + dy][x + dx]` over the valid region.
#[inline]
fn shift_axpy(dst: &mut [f64], src: &[f64], h: usize, wd: usize, dy: isize, dx: isize, w: f64) {
    let (y0, y1) = span(h, dy);
    let (x0, x1) = span(wd, dx);
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let d = &mut dst[y * wd + x0..y * wd + x1];
        let s = &src[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
        for (a, b) in d.iter_mut().zip(s) {
            *a += w * b;
        }
    }
}

/// `sum_{y,x} a[y][x] * b[y + dy][x + dx]` over the valid region.
#[inline]
fn shift_dot(a: &[f64], b: &[f64], h: usize, wd: usize, dy: isize, dx: isize) -> f64 {
    let (y0, y1) = span(h, dy);
    let (x0, x1) = span(wd, dx);
    let mut acc = 0.0;
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let ra = &a[y * wd + x0..y * wd + x1];
        let rb = &b[sy * wd + (x0 as isize + dx) as usize..sy * wd + (x1 as isize + dx) as usize];
        acc += ra.iter().zip(rb).map(|(p, q)| p * q).sum::<f64>();
    }
    acc
}

/// Hidden pre-activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct RefineCache {
    pre: Vec<f64>,
}

pub fn refine_forward(c: &CorrelationMap, params: &RefinerParams) -> (CorrelationMap, RefineCache) {
    let (h, w) = (c.height, c.width);
    let n = h * w;
    let mut pre = vec![0.0; params.hidden * n];
    let mut act = vec![0.0; n];
    let mut out = vec![params.b2[0]; n];
    for ch in 0..params.hidden {
        let z = &mut pre[ch * n..(ch + 1) * n];
        z.iter_mut().for_each(|v| *v = params.b1[ch]);
        for (k, &(dy, dx)) in TAPS.iter().enumerate() {
            let wk = params.w1[ch * 9 + k];
            if wk != 0.0 {
                shift_axpy(z, &c.values, h, w, dy, dx, wk);
            }
        }
        for (a, &zv) in act.iter_mut().zip(z.iter()) {
            *a = zv.max(0.0);
        }
        for (k, &(dy, dx)) in TAPS.iter().enumerate() {
            let wk = params.w2[ch * 9 + k];
            if wk != 0.0 {
                shift_axpy(&mut out, &act, h, w, dy, dx, wk);
            }
        }
    }
    (CorrelationMap::new(h, w, out), RefineCache { pre })
}

pub fn refine(c: &CorrelationMap, params: &RefinerParams) -> CorrelationMap {
    refine_forward(c, params).0
}

/// Returns the gradient w.r.t. the input map and accumulates parameter
/// gradients into `d_params`.
pub fn refine_backward(
    c: &CorrelationMap,
    params: &RefinerParams,
    cache: &RefineCache,
    d_out: &[f64],
    d_params: &mut RefinerParams,
) -> Vec<f64> {
    let (h, w) = (c.height, c.width);
    let n = h * w;
    let mut d_in = vec![0.0; n];
    let mut act = vec![0.0; n];
    let mut d_pre = vec![0.0; n];
    d_params.b2[0] += d_out.iter().sum::<f64>();
    for ch in 0..params.hidden {
        let z = &cache.pre[ch * n..(ch + 1) * n];
        for (a, &zv) in act.iter_mut().zip(z) {
            *a = zv.max(0.0);
        }
        d_pre.iter_mut().for_each(|v| *v = 0.0);
        for (k, &(dy, dx)) in TAPS.iter().enumerate() {
            d_params.w2[ch * 9 + k] += shift_dot(d_out, &act, h, w, dy, dx);
            let wk = params.w2[ch * 9 + k];
            if wk != 0.0 {
                // transposed tap: d_act[y + dy][x + dx] += wk * d_out[y][x]
                shift_axpy(&mut d_pre, d_out, h, w, -dy, -dx, wk);
            }
        }
        for (d, &zv) in d_pre.iter_mut().zip(z) {
            if zv <= 0.0 {
                *d = 0.0;
            }
        }
        d_params.b1[ch] += d_pre.iter().sum::<f64>();
        for (k, &(dy, dx)) in TAPS.iter().enumerate() {
            d_params.w1[ch * 9 + k] += shift_dot(&d_pre, &c.values, h, w, dy, dx);
            let wk = params.w1[ch * 9 + k];
            if wk != 0.0 {
                shift_axpy(&mut d_in, &d_pre, h, w, -dy, -dx, wk);
            }
        }
    }
    d_in
}

/// Soft-argmax settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Neighbourhood radius around the argmax, in cells.
    pub radius: f64,
    /// Multiplies the refined map before every softmax.
    pub temperature: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            radius: 3.0,
            temperature: 20.0,
        }
    }
}

/// Localised point and the softmax maps it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPrediction {
    pub position: Point2,
    /// Largest refined response.
    pub peak_score: f64,
    pub argmax: Cell,
    /// Tempered softmax over the whole map.
    pub softmax_map: Vec<f64>,
    /// `(cell index, weight)` pairs of the neighbourhood softmax.
    pub local: Vec<(usize, f64)>,
}

/// Lowest row-major index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn soft_argmax(h: &CorrelationMap, radius: f64, temperature: f64) -> PointPrediction {
    let w = h.width;
    let best = argmax(&h.values);
    let peak = h.values[best];
    let (ax, ay) = (best % w, best / w);

    let mut softmax_map: Vec<f64> = h
        .values
        .iter()
        .map(|&v| (temperature * (v - peak)).exp())
        .collect();
    let z: f64 = softmax_map.iter().sum();
    softmax_map.iter_mut().for_each(|v| *v /= z);

    let r = radius.max(0.0);
    let ri = r.floor() as isize;
    let mut local = Vec::new();
    let mut zl = 0.0;
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if ((dx * dx + dy * dy) as f64) > r * r {
                continue;
            }
            let x = ax as isize + dx;
            let y = ay as isize + dy;
            if x < 0 || y < 0 || x >= w as isize || y >= h.height as isize {
                continue;
            }
            let idx = y as usize * w + x as usize;
            let e = (temperature * (h.values[idx] - peak)).exp();
            zl += e;
            local.push((idx, e));
        }
    }
    local.sort_by_key(|&(i, _)| i);
    let mut position = Point2::ZERO;
    for (idx, e) in local.iter_mut() {
        *e /= zl;
        position.x += *e * (*idx % w) as f64;
        position.y += *e * (*idx / w) as f64;
    }
    PointPrediction {
        position,
        peak_score: peak,
        argmax: Cell::new(ax, ay),
        softmax_map,
        local,
    }
}

/// Gradient w.r.t. the refined map given `d_position` and a gradient on the
/// full softmax map. The argmax selection itself carries no gradient.
pub fn soft_argmax_backward(
    pred: &PointPrediction,
    width: usize,
    temperature: f64,
    d_position: Point2,
    d_softmax: Option<&[f64]>,
) -> Vec<f64> {
    let mut d_h = vec![0.0; pred.softmax_map.len()];
    if d_position != Point2::ZERO {
        for &(idx, wt) in &pred.local {
            let cell = Point2::new((idx % width) as f64, (idx / width) as f64);
            d_h[idx] += temperature * wt * (cell - pred.position).dot(d_position);
        }
    }
    if let Some(g) = d_softmax {
        let mean: f64 = pred.softmax_map.iter().zip(g).map(|(s, g)| s * g).sum();
        for ((d, s), gv) in d_h.iter_mut().zip(&pred.softmax_map).zip(g) {
            *d += temperature * s * (gv - mean);
        }
    }
    d_h
}

/// Forward state of one query matched against one target grid.
#[derive(Debug, Clone)]
pub struct QueryMatch {
    pub query: UnitQuery,
    pub corr: CorrelationMap,
    pub refined: CorrelationMap,
    pub cache: RefineCache,
    pub prediction: PointPrediction,
}

pub fn match_query(
    query_feature: &[f64],
    target: &NormalizedGrid,
    refiner: &RefinerParams,
    cfg: &MatchConfig,
) -> Result<QueryMatch, MatchError> {
    let query = UnitQuery::new(query_feature)?;
    let corr = cosine_map(&query, target);
    let (refined, cache) = refine_forward(&corr, refiner);
    let prediction = soft_argmax(&refined, cfg.radius, cfg.temperature);
    Ok(QueryMatch {
        query,
        corr,
        refined,
        cache,
        prediction,
    })
}

/// Per-query backward result: gradients w.r.t. the raw query feature and the
/// correlation map (the latter feeds [`correlation_target_grad`]).
#[derive(Debug, Clone)]
pub struct QueryMatchGrad {
    pub d_query: Vec<f64>,
    pub d_corr: Vec<f64>,
}

pub fn match_query_backward(
    m: &QueryMatch,
    target: &NormalizedGrid,
    refiner: &RefinerParams,
    cfg: &MatchConfig,
    d_position: Point2,
    d_softmax: Option<&[f64]>,
    d_refiner: &mut RefinerParams,
) -> QueryMatchGrad {
    let d_refined = soft_argmax_backward(
        &m.prediction,
        m.refined.width,
        cfg.temperature,
        d_position,
        d_softmax,
    );
    let d_corr = refine_backward(&m.corr, refiner, &m.cache, &d_refined, d_refiner);
    let d_query = correlation_query_grad(&m.query, target, &m.corr, &d_corr);
    QueryMatchGrad { d_query, d_corr }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureGrid {
        FeatureGrid {
            height: h,
            width: w,
            channels: c,
            values: (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn random_refiner(rng: &mut ChaCha8Rng, hidden: usize) -> RefinerParams {
        RefinerParams {
            hidden,
            w1: (0..hidden * 9).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            b1: (0..hidden).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            w2: (0..hidden * 9).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            b2: vec![rng.gen_range(-0.2..0.2)],
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn bilinear_lattice_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_grid(&mut rng, 4, 5, 3);
        assert_eq!(
            bilinear_feature(&f, Point2::new(2.0, 1.0)).unwrap(),
            f.cell(2, 1)
        );
        assert_eq!(
            bilinear_feature(&f, Point2::new(4.0, 3.0)).unwrap(),
            f.cell(4, 3)
        );
        let mid = bilinear_feature(&f, Point2::new(2.5, 1.0)).unwrap();
        for c in 0..3 {
            assert!((mid[c] - 0.5 * (f.cell(2, 1)[c] + f.cell(3, 1)[c])).abs() < 1e-15);
        }
        assert!(matches!(
            bilinear_feature(&f, Point2::new(4.5, 0.0)),
            Err(MatchError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn bilinear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_grid(&mut rng, 5, 6, 4);
        let p = Point2::new(2.3, 1.7);
        let g: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |f: &FeatureGrid, p: Point2| -> f64 {
            bilinear_feature(f, p)
                .unwrap()
                .iter()
                .zip(&g)
                .map(|(a, b)| a * b)
                .sum()
        };
        let tap = BilinearTap::new(6, 5, p).unwrap();
        let mut d_grid = vec![0.0; f.values.len()];
        let dp = tap.backward(&f, &g, &mut d_grid);
        let h = 1e-6;
        let fd_x = (objective(&f, Point2::new(p.x + h, p.y))
            - objective(&f, Point2::new(p.x - h, p.y)))
            / (2.0 * h);
        let fd_y = (objective(&f, Point2::new(p.x, p.y + h))
            - objective(&f, Point2::new(p.x, p.y - h)))
            / (2.0 * h);
        assert!(rel(dp.x, fd_x) < 1e-5);
        assert!(rel(dp.y, fd_y) < 1e-5);
        for i in 0..f.values.len() {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp.values[i] += h;
            fm.values[i] -= h;
            let fd = (objective(&fp, p) - objective(&fm, p)) / (2.0 * h);
            assert!((fd - d_grid[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn correlation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_grid(&mut rng, 6, 6, 8);
        let q = f.cell(2, 4).to_vec();
        let c = correlation_map(&q, &f).unwrap();
        assert!((c.at(2, 4) - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = q.iter().map(|v| -v).collect();
        let c = correlation_map(&neg, &f).unwrap();
        assert!((c.at(2, 4) + 1.0).abs() < 1e-12);
        for _ in 0..20 {
            let f = random_grid(&mut rng, 5, 7, 6);
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let c = correlation_map(&q, &f).unwrap();
            assert!(c.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(matches!(
            correlation_map(&[0.0; 8], &f),
            Err(MatchError::ZeroNormFeature(_))
        ));
        let mut z = f.clone();
        z.values[..8].iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(
            correlation_map(&q, &z),
            Err(MatchError::ZeroNormFeature(_))
        ));
    }

    #[test]
    fn cosine_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_grid(&mut rng, 4, 4, 5);
        let q: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = correlation_map(&q, &f).unwrap();
        let q_grid = FeatureGrid {
            height: 1,
            width: 1,
            channels: 5,
            values: q.clone(),
        };
        for y in 0..4 {
            for x in 0..4 {
                let back = correlation_map(f.cell(x, y), &q_grid).unwrap();
                assert!((back.values[0] - c.at(x, y)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn refine_degenerate_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = CorrelationMap::new(5, 6, (0..30).map(|_| rng.gen_range(0.0..1.0)).collect());
        let mut p = RefinerParams::zeros(16);
        p.b2[0] = 0.7;
        assert!(refine(&c, &p).values.iter().all(|&v| v == 0.7));

        let mut id = RefinerParams::zeros(16);
        id.w1[4] = 1.0;
        id.w2[4] = 1.0;
        assert_eq!(refine(&c, &id).values, c.values);
    }

    #[test]
    fn refine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = CorrelationMap::new(5, 6, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let params = random_refiner(&mut rng, 4);
        let g: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let obj = |c: &CorrelationMap, p: &RefinerParams| -> f64 {
            refine(c, p).values.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = refine_forward(&c, &params);
        let mut dp = RefinerParams::zeros(4);
        let d_in = refine_backward(&c, &params, &cache, &g, &mut dp);
        let h = 1e-6;
        for i in 0..30 {
            let mut cp = c.clone();
            let mut cm = c.clone();
            cp.values[i] += h;
            cm.values[i] -= h;
            let fd = (obj(&cp, &params) - obj(&cm, &params)) / (2.0 * h);
            assert!(
                rel(fd, d_in[i]) < 1e-4 || (fd - d_in[i]).abs() < 1e-9,
                "{fd} {}",
                d_in[i]
            );
        }
        let check = |get: &dyn Fn(&mut RefinerParams) -> &mut Vec<f64>, analytic: &Vec<f64>| {
            for i in 0..analytic.len() {
                let mut pp = params.clone();
                let mut pm = params.clone();
                get(&mut pp)[i] += h;
                get(&mut pm)[i] -= h;
                let fd = (obj(&c, &pp) - obj(&c, &pm)) / (2.0 * h);
                assert!(rel(fd, analytic[i]) < 1e-4 || (fd - analytic[i]).abs() < 1e-9);
            }
        };
        check(&|p| &mut p.w1, &dp.w1);
        check(&|p| &mut p.b1, &dp.b1);
        check(&|p| &mut p.w2, &dp.w2);
        check(&|p| &mut p.b2, &dp.b2);
    }

    #[test]
    fn soft_argmax_sharp_peak() {
        let mut v = vec![0.0; 8 * 8];
        v[4 * 8 + 3] = 1.0;
        let map = CorrelationMap::new(8, 8, v);
        let pred = soft_argmax(&map, 3.0, 20.0);
        assert_eq!(pred.argmax, Cell::new(3, 4));
        // closed form: neighbours weigh e^-20 each
        let n_b = pred.local.len() as f64;
        let e = (-20.0f64).exp();
        let mut expected_offset = Point2::ZERO;
        for &(idx, _) in &pred.local {
            let d = Point2::new((idx % 8) as f64 - 3.0, (idx / 8) as f64 - 4.0);
            expected_offset = expected_offset + d * (e / (1.0 + (n_b - 1.0) * e));
        }
        let offset = pred.position - Point2::new(3.0, 4.0);
        assert!((offset - expected_offset).norm() < 1e-12);
        assert!(offset.norm() < 1e-3);
        assert_eq!(pred.peak_score, 1.0);
    }

    #[test]
    fn soft_argmax_constant_map_gives_neighbourhood_centroid() {
        let map = CorrelationMap::new(6, 6, vec![0.25; 36]);
        let pred = soft_argmax(&map, 2.0, 20.0);
        assert_eq!(pred.argmax, Cell::new(0, 0));
        // B = {(0,0),(1,0),(2,0),(0,1),(1,1),(0,2)}
        assert!((pred.position.x - 4.0 / 6.0).abs() < 1e-12);
        assert!((pred.position.y - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn soft_argmax_stays_in_neighbourhood_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let map =
                CorrelationMap::new(9, 7, (0..63).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let r = rng.gen_range(0.0..4.0);
            let pred = soft_argmax(&map, r, rng.gen_range(0.1..30.0));
            let a = pred.argmax.center();
            assert!((pred.position.x - a.x).abs() <= r + 1e-12);
            assert!((pred.position.y - a.y).abs() <= r + 1e-12);
            let s: f64 = pred.softmax_map.iter().sum();
            let sl: f64 = pred.local.iter().map(|l| l.1).sum();
            assert!((s - 1.0).abs() < 1e-6 && (sl - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cyclic_shift_moves_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = MatchConfig::default();
        let refiner = RefinerParams::identity(16, 2.0);
        let mut checked = 0;
        for _ in 0..200 {
            let f = random_grid(&mut rng, 20, 20, 6);
            let q: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (dx, dy) = (rng.gen_range(-5..=5isize), rng.gen_range(-5..=5isize));
            let g = f.roll(dx, dy);
            let a = match_query(&q, &NormalizedGrid::new(&f).unwrap(), &refiner, &cfg).unwrap();
            let b = match_query(&q, &NormalizedGrid::new(&g).unwrap(), &refiner, &cfg).unwrap();
            let ea = a.prediction.argmax;
            let eb = b.prediction.argmax;
            assert_eq!(eb.x, (ea.x as isize + dx).rem_euclid(20) as usize);
            assert_eq!(eb.y, (ea.y as isize + dy).rem_euclid(20) as usize);
            let interior = |c: Cell| c.x >= 3 && c.y >= 3 && c.x + 3 < 20 && c.y + 3 < 20;
            if interior(ea) && interior(eb) {
                let shifted = b.prediction.position - Point2::new(dx as f64, dy as f64);
                let wrapped = Point2::new(shifted.x.rem_euclid(20.0), shifted.y.rem_euclid(20.0));
                assert!((wrapped - a.prediction.position).norm() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    /// Finite differences of the whole query chain: position and a weighted
    /// full-softmax readout w.r.t. query and target features and the refiner.
    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = MatchConfig {
            radius: 2.0,
            temperature: 5.0,
        };
        let target = random_grid(&mut rng, 6, 6, 4);
        let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let refiner = random_refiner(&mut rng, 3);
        let wpos = Point2::new(0.7, -1.3);
        let wsm: Vec<f64> = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |q: &[f64], t: &FeatureGrid, r: &RefinerParams| -> (f64, Cell) {
            let m = match_query(q, &NormalizedGrid::new(t).unwrap(), r, &cfg).unwrap();
            let s: f64 = m
                .prediction
                .softmax_map
                .iter()
                .zip(&wsm)
                .map(|(a, b)| a * b)
                .sum();
            (m.prediction.position.dot(wpos) + s, m.prediction.argmax)
        };
        let norm = NormalizedGrid::new(&target).unwrap();
        let m = match_query(&q, &norm, &refiner, &cfg).unwrap();
        let mut d_ref = RefinerParams::zeros(3);
        let g = match_query_backward(&m, &norm, &refiner, &cfg, wpos, Some(&wsm), &mut d_ref);
        let mut d_target = vec![0.0; target.values.len()];
        correlation_target_grad(
            &norm,
            &[TargetGradTerm {
                query: &m.query,
                corr: &m.corr,
                grad: &g.d_corr,
            }],
            &mut d_target,
        );
        let h = 1e-5;
        let base_arg = m.prediction.argmax;
        for i in 0..4 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[i] += h;
            qm[i] -= h;
            let (fp, ap) = eval(&qp, &target, &refiner);
            let (fm, am) = eval(&qm, &target, &refiner);
            if ap != base_arg || am != base_arg {
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            assert!(rel(fd, g.d_query[i]) < 1e-4 || (fd - g.d_query[i]).abs() < 1e-9);
        }
        for i in 0..target.values.len() {
            let mut tp = target.clone();
            let mut tm = target.clone();
            tp.values[i] += h;
            tm.values[i] -= h;
            let (fp, ap) = eval(&q, &tp, &refiner);
            let (fm, am) = eval(&q, &tm, &refiner);
            if ap != base_arg || am != base_arg {
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                rel(fd, d_target[i]) < 1e-4 || (fd - d_target[i]).abs() < 1e-9,
                "{i}: {fd} {}",
                d_target[i]
            );
        }
        for i in 0..refiner.w1.len() {
            let mut rp = refiner.clone();
            let mut rm = refiner.clone();
            rp.w1[i] += h;
            rm.w1[i] -= h;
            let fd = (eval(&q, &target, &rp).0 - eval(&q, &target, &rm).0) / (2.0 * h);
            assert!(rel(fd, d_ref.w1[i]) < 1e-4 || (fd - d_ref.w1[i]).abs() < 1e-9);
        }
    }
}

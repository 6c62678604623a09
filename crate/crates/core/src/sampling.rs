//! Query sampling inside a template mask: spatial k-means into groups, then
//! farthest-point sampling within each group.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Point2;
use crate::maskops::{Cell, Mask, MaskError};

/// Lloyd iterations are capped here if the assignment never settles.
pub const MAX_LLOYD_ITERS: usize = 100;

/// Spatial query groups on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGroupSet {
    pub groups: Vec<Vec<Point2>>,
    pub group_centroids: Vec<Point2>,
}

impl QueryGroupSet {
    pub fn num_points(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// All points, group by group.
    pub fn flat(&self) -> Vec<Point2> {
        self.groups.iter().flatten().copied().collect()
    }

    /// Offset of each group's first point in `flat()`.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.groups
            .iter()
            .map(|g| {
                let o = acc;
                acc += g.len();
                o
            })
            .collect()
    }
}

/// Outcome of a k-means run.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centers: Vec<Point2>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub sse_history: Vec<f64>,
}

fn nearest(p: Point2, centers: &[Point2]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = (p - *c).norm_sq();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn sse(points: &[Point2], centers: &[Point2], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(&p, &a)| (p - centers[a]).norm_sq())
        .sum()
}

/// Lloyd's k-means on cell centres.
///
/// Seeding picks one pixel uniformly with the seeded RNG and then repeatedly
/// the pixel farthest from all chosen centres. The effective cluster count is
/// `min(g, pixels.len())`.
pub fn kmeans(pixels: &[Cell], g: usize, seed: u64) -> KMeans {
    assert!(!pixels.is_empty(), "kmeans needs at least one pixel");
    let points: Vec<Point2> = pixels.iter().map(|c| c.center()).collect();
    let k = g.max(1).min(points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers = Vec::with_capacity(k);
    centers.push(points[rng.gen_range(0..points.len())]);
    let mut min_d: Vec<f64> = points.iter().map(|&p| (p - centers[0]).norm_sq()).collect();
    while centers.len() < k {
        let (idx, _) = min_d
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| {
                if d > best.1 {
                    (i, d)
                } else {
                    best
                }
            });
        let c = points[idx];
        centers.push(c);
        for (d, &p) in min_d.iter_mut().zip(&points) {
            *d = d.min((p - c).norm_sq());
        }
    }

    let mut assignment = vec![usize::MAX; points.len()];
    let mut sse_history = Vec::new();
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (a, &p) in assignment.iter_mut().zip(&points) {
            let (best, _) = nearest(p, &centers);
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        // Re-seed empty clusters from the pixel worst served by its centre.
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignment {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let (far, _) = points
                .iter()
                .zip(&assignment)
                .enumerate()
                .filter(|(_, (_, &a))| counts[a] > 1)
                .map(|(i, (&p, &a))| (i, (p - centers[a]).norm_sq()))
                .fold((usize::MAX, f64::NEG_INFINITY), |b, (i, d)| {
                    if d > b.1 {
                        (i, d)
                    } else {
                        b
                    }
                });
            centers[empty] = points[far];
            assignment[far] = empty;
            changed = true;
        }
        let mut sums = vec![Point2::ZERO; k];
        let mut counts = vec![0usize; k];
        for (&a, &p) in assignment.iter().zip(&points) {
            sums[a] = sums[a] + p;
            counts[a] += 1;
        }
        for ((c, s), n) in centers.iter_mut().zip(&sums).zip(&counts) {
            *c = *s * (1.0 / *n as f64);
        }
        sse_history.push(sse(&points, &centers, &assignment));
        if !changed {
            break;
        }
    }
    KMeans {
        centers,
        assignment,
        sse_history,
    }
}

/// Partitions `pixels` into at most `g` spatial groups, each listing its
/// pixels in input order.
pub fn kmeans_partition(pixels: &[Cell], g: usize, seed: u64) -> Vec<Vec<Cell>> {
    let km = kmeans(pixels, g, seed);
    let mut groups = vec![Vec::new(); km.centers.len()];
    for (&a, &c) in km.assignment.iter().zip(pixels) {
        groups[a].push(c);
    }
    groups
}

/// Indices selected by farthest-point sampling.
///
/// The first pick is the candidate nearest the candidates' centroid; each
/// following pick maximises the distance to the already selected set. Ties go
/// to the lowest index.
pub fn fps_indices(candidates: &[Point2], k: usize) -> Vec<usize> {
    if candidates.is_empty() || k == 0 {
        return Vec::new();
    }
    let n = candidates.len() as f64;
    let centroid = candidates.iter().fold(Point2::ZERO, |a, &p| a + p) * (1.0 / n);
    let (first, _) = nearest(centroid, candidates);
    let k = k.min(candidates.len());
    let mut picked = vec![first];
    let mut min_d: Vec<f64> = candidates
        .iter()
        .map(|&p| (p - candidates[first]).norm_sq())
        .collect();
    while picked.len() < k {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &d) in min_d.iter().enumerate() {
            if d > best.1 {
                best = (i, d);
            }
        }
        let c = candidates[best.0];
        picked.push(best.0);
        for (d, &p) in min_d.iter_mut().zip(candidates) {
            *d = d.min((p - c).norm_sq());
        }
    }
    picked
}

pub fn fps_select(candidates: &[Point2], k: usize) -> Vec<Point2> {
    fps_indices(candidates, k)
        .into_iter()
        .map(|i| candidates[i])
        .collect()
}

/// Groups of `k` well-spread foreground points, `g` groups at most.
pub fn sample_queries(m: &Mask, g: usize, k: usize, seed: u64) -> Result<QueryGroupSet, MaskError> {
    let pixels = m.foreground();
    if pixels.is_empty() {
        return Err(MaskError::EmptyMask);
    }
    let mut groups = Vec::new();
    let mut group_centroids = Vec::new();
    for cells in kmeans_partition(&pixels, g, seed) {
        let pts: Vec<Point2> = cells.iter().map(|c| c.center()).collect();
        let n = pts.len() as f64;
        group_centroids.push(pts.iter().fold(Point2::ZERO, |a, &p| a + p) * (1.0 / n));
        groups.push(fps_select(&pts, k));
    }
    Ok(QueryGroupSet {
        groups,
        group_centroids,
    })
}

//! Planar points, 2x2 linear algebra and closed-form similarity fitting.
//!
//! The similarity fit follows the classical Procrustes pipeline: centre both
//! point sets, form the cross-covariance, take its SVD, guard against
//! reflections and read off scale and translation.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by the similarity fit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lists differ in length: {template} template vs {target} target")]
    LengthMismatch { template: usize, target: usize },
    #[error("need at least 2 correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate correspondences: {0}")]
    DegenerateInput(&'static str),
}

/// A point (or vector) in a continuous pixel frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[1.0, 0.0], [0.0, 1.0]]);

    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2([[a, b], [c, d]])
    }

    /// Counter-clockwise rotation by `angle` radians.
    pub fn rotation(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Mat2([[c, -s], [s, c]])
    }

    pub fn diag(a: f64, b: f64) -> Self {
        Mat2([[a, 0.0], [0.0, b]])
    }

    pub fn transpose(&self) -> Self {
        let m = self.0;
        Mat2([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    pub fn det(&self) -> f64 {
        let m = self.0;
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn mul_mat(&self, rhs: &Mat2) -> Mat2 {
        let a = self.0;
        let b = rhs.0;
        let mut out = [[0.0; 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        Mat2(out)
    }

    pub fn mul_vec(&self, p: Point2) -> Point2 {
        let m = self.0;
        Point2::new(m[0][0] * p.x + m[0][1] * p.y, m[1][0] * p.x + m[1][1] * p.y)
    }

    pub fn scale(&self, k: f64) -> Mat2 {
        let m = self.0;
        Mat2([[m[0][0] * k, m[0][1] * k], [m[1][0] * k, m[1][1] * k]])
    }

    pub fn max_abs_diff(&self, other: &Mat2) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((self.0[i][j] - other.0[i][j]).abs());
            }
        }
        worst
    }
}

/// `U * diag(sigma) * V^T` factorisation of a 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd2Result {
    pub u: Mat2,
    /// Singular values, descending and non-negative.
    pub sigma: [f64; 2],
    pub v: Mat2,
}

impl Svd2Result {
    pub fn reconstruct(&self) -> Mat2 {
        self.u
            .mul_mat(&Mat2::diag(self.sigma[0], self.sigma[1]))
            .mul_mat(&self.v.transpose())
    }
}

/// Closed-form SVD of a 2x2 matrix.
///
/// Any real 2x2 matrix splits as `Rot(phi) * diag(q + r, q - r) * Rot(theta)`
/// where `q` and `r` are the magnitudes of its conformal and anti-conformal
/// parts. A negative second factor is absorbed into the second column of `V`.
pub fn svd2x2(m: &Mat2) -> Svd2Result {
    let [[a, b], [c, d]] = m.0;
    let e = 0.5 * (a + d);
    let f = 0.5 * (a - d);
    let g = 0.5 * (c + b);
    let h = 0.5 * (c - b);
    let q = e.hypot(h);
    let r = f.hypot(g);
    let sx = q + r;
    let sy = q - r;
    let a1 = g.atan2(f);
    let a2 = h.atan2(e);
    let theta = 0.5 * (a2 - a1);
    let phi = 0.5 * (a2 + a1);

    let u = Mat2::rotation(phi);
    // V^T = Rot(theta), so V = Rot(-theta).
    let mut v = Mat2::rotation(-theta);
    let mut s2 = sy;
    if sy < 0.0 {
        s2 = -sy;
        v.0[0][1] = -v.0[0][1];
        v.0[1][1] = -v.0[1][1];
    }
    Svd2Result {
        u,
        sigma: [sx, s2],
        v,
    }
}

/// Isotropic scale, proper rotation and translation: `p -> s * R * p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform2D {
    pub scale: f64,
    pub rotation: Mat2,
    pub translation: Point2,
}

impl SimilarityTransform2D {
    pub const IDENTITY: SimilarityTransform2D = SimilarityTransform2D {
        scale: 1.0,
        rotation: Mat2::IDENTITY,
        translation: Point2::ZERO,
    };

    pub fn from_parts(scale: f64, angle: f64, translation: Point2) -> Self {
        Self {
            scale,
            rotation: Mat2::rotation(angle),
            translation,
        }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        apply_transform(self, p)
    }

    /// Rotation angle in radians, in `(-pi, pi]`.
    pub fn angle(&self) -> f64 {
        self.rotation.0[1][0].atan2(self.rotation.0[0][0])
    }

    /// `self` after `first`: `p -> self(first(p))`.
    pub fn compose(&self, first: &SimilarityTransform2D) -> SimilarityTransform2D {
        SimilarityTransform2D {
            scale: self.scale * first.scale,
            rotation: self.rotation.mul_mat(&first.rotation),
            translation: self.apply(first.translation),
        }
    }

    pub fn inverse(&self) -> SimilarityTransform2D {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        SimilarityTransform2D {
            scale: inv_s,
            rotation: rt,
            translation: -(rt.mul_vec(self.translation) * inv_s),
        }
    }
}

pub fn apply_transform(t: &SimilarityTransform2D, p: Point2) -> Point2 {
    t.rotation.mul_vec(p) * t.scale + t.translation
}

fn centroid(points: &[Point2]) -> Point2 {
    let n = points.len() as f64;
    let sum = points.iter().fold(Point2::ZERO, |acc, &p| acc + p);
    sum * (1.0 / n)
}

/// Template spread below this is treated as coincident points.
pub const DEGENERATE_SPREAD: f64 = 1e-12;

/// Least-squares similarity transform mapping `template[i]` onto `target[i]`.
///
/// The cross-covariance is `H = sum q'_i p'_i^T` (target times template).
/// With `H = U S V^T` the optimal proper rotation is `U D V^T`, where
/// `D = diag(1, sign(det(U V^T)))`, and the scale is `trace(S D) / sum |p'_i|^2`.
pub fn fit_similarity(
    template: &[Point2],
    target: &[Point2],
) -> Result<SimilarityTransform2D, GeometryError> {
    if template.len() != target.len() {
        return Err(GeometryError::LengthMismatch {
            template: template.len(),
            target: target.len(),
        });
    }
    if template.len() < 2 {
        return Err(GeometryError::TooFewPoints(template.len()));
    }
    let mu_p = centroid(template);
    let mu_q = centroid(target);

    let mut h = [[0.0; 2]; 2];
    let mut spread = 0.0;
    for (&p, &q) in template.iter().zip(target) {
        let pc = p - mu_p;
        let qc = q - mu_q;
        h[0][0] += qc.x * pc.x;
        h[0][1] += qc.x * pc.y;
        h[1][0] += qc.y * pc.x;
        h[1][1] += qc.y * pc.y;
        spread += pc.norm_sq();
    }
    if spread < DEGENERATE_SPREAD {
        return Err(GeometryError::DegenerateInput("template points coincide"));
    }

    let svd = svd2x2(&Mat2(h));
    let d = if svd.u.mul_mat(&svd.v.transpose()).det() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let rotation = svd
        .u
        .mul_mat(&Mat2::diag(1.0, d))
        .mul_mat(&svd.v.transpose());
    let scale = (svd.sigma[0] + d * svd.sigma[1]) / spread;
    if !(scale > DEGENERATE_SPREAD) {
        return Err(GeometryError::DegenerateInput(
            "target points coincide or admit no proper similarity",
        ));
    }
    let translation = mu_q - rotation.mul_vec(mu_p) * scale;
    Ok(SimilarityTransform2D {
        scale,
        rotation,
        translation,
    })
}

/// Sum of squared residuals `sum |target_i - T(template_i)|^2`.
pub fn alignment_residual(
    t: &SimilarityTransform2D,
    template: &[Point2],
    target: &[Point2],
) -> f64 {
    template
        .iter()
        .zip(target)
        .map(|(&p, &q)| (q - t.apply(p)).norm_sq())
        .sum()
}

/// Back-propagates a gradient on a transformed point through the fit.
///
/// For a proper similarity fit the map `target -> T(x)` is linear in the
/// target points: with `A = sR = [[a, -b], [b, a]]`,
/// `a = sum p'_i . q_i / S`, `b = sum p'_i x q_i / S` and `t = mu_q - A mu_p`.
/// Given `grad` = dL/dT(x), accumulates dL/dq_i into `target_grads`.
pub fn fit_similarity_vjp(
    template: &[Point2],
    x: Point2,
    grad: Point2,
    target_grads: &mut [Point2],
) {
    let n = template.len() as f64;
    let mu_p = centroid(template);
    let spread: f64 = template.iter().map(|&p| (p - mu_p).norm_sq()).sum();
    let r = x - mu_p;
    let d_a = grad.x * r.x + grad.y * r.y;
    let d_b = -grad.x * r.y + grad.y * r.x;
    for (&p, g) in template.iter().zip(target_grads.iter_mut()) {
        let pc = p - mu_p;
        g.x += (d_a * pc.x - d_b * pc.y) / spread + grad.x / n;
        g.y += (d_a * pc.y + d_b * pc.x) / spread + grad.y / n;
    }
}

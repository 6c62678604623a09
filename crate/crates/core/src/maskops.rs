//! Binary masks, their 4-connected boundary and an exact Euclidean distance
//! field to that boundary.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("point ({x}, {y}) outside the {width}x{height} grid")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },
    #[error("mask buffer holds {got} values, expected {expected}")]
    BadLength { expected: usize, got: usize },
}

/// Integer cell coordinate (column `x`, row `y`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }

    /// Cell centre in the continuous frame.
    pub fn center(self) -> Point2 {
        Point2::new(self.x as f64, self.y as f64)
    }
}

/// Row-major binary map, `true` = foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, MaskError> {
        if bits.len() != width * height {
            return Err(MaskError::BadLength {
                expected: width * height,
                got: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Foreground cells in row-major order.
    pub fn foreground(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    out.push(Cell::new(x, y));
                }
            }
        }
        out
    }

    /// Foreground test for a continuous point, by its nearest cell.
    pub fn contains_point(&self, p: Point2) -> bool {
        let x = p.x.round();
        let y = p.y.round();
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return false;
        }
        self.get(x as usize, y as usize)
    }
}

/// Foreground cells with a background 4-neighbour or on the image border,
/// in row-major order.
pub fn boundary_pixels(m: &Mask) -> Result<Vec<Cell>, MaskError> {
    let (w, h) = (m.width, m.height);
    let mut out = Vec::new();
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) {
                continue;
            }
            any = true;
            let on_border = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            if on_border
                || !m.get(x - 1, y)
                || !m.get(x + 1, y)
                || !m.get(x, y - 1)
                || !m.get(x, y + 1)
            {
                out.push(Cell::new(x, y));
            }
        }
    }
    if !any {
        return Err(MaskError::EmptyMask);
    }
    Ok(out)
}

/// Per-cell Euclidean distance (cell-centre units) to the nearest boundary pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

/// One-dimensional squared-distance lower envelope (Felzenszwalb &
/// Huttenlocher). `f` holds squared distances, `INF` where no source exists.
fn lower_envelope_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut first = None;
    for (q, &fq) in f.iter().enumerate() {
        if fq.is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(first) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                // k > 0 here: z[0] is -inf
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance transform to `boundary_pixels(m)`, evaluated at
/// every cell of the grid.
pub fn distance_field(m: &Mask) -> Result<DistanceField, MaskError> {
    let boundary = boundary_pixels(m)?;
    let (w, h) = (m.width, m.height);
    let mut sq = vec![f64::INFINITY; w * h];
    for c in &boundary {
        sq[c.y * w + c.x] = 0.0;
    }
    let n = w.max(h);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = sq[y * w + x];
        }
        lower_envelope_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..h {
            sq[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        let row = &sq[y * w..(y + 1) * w];
        lower_envelope_1d(row, &mut row_out, &mut v, &mut z);
        sq[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    Ok(DistanceField {
        width: w,
        height: h,
        values: sq.into_iter().map(f64::sqrt).collect(),
    })
}

/// Bilinear sample of a field together with its spatial gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSample {
    pub value: f64,
    pub grad: Point2,
}

/// Lower interpolation corner and fraction along one axis of length `n`.
pub(crate) fn lerp_index(v: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let i0 = (v.floor() as usize).min(n - 2);
    (i0, v - i0 as f64)
}

impl DistanceField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    fn at_clamped(&self, x: usize, y: usize) -> f64 {
        self.at(x.min(self.width - 1), y.min(self.height - 1))
    }

    /// Bilinear interpolation at `p`, plus `d value / d p`.
    pub fn sample(&self, p: Point2) -> Result<FieldSample, MaskError> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(p.x >= 0.0 && p.y >= 0.0 && p.x <= max_x && p.y <= max_y) {
            return Err(MaskError::OutOfBounds {
                x: p.x,
                y: p.y,
                width: self.width,
                height: self.height,
            });
        }
        let (x0, fx) = lerp_index(p.x, self.width);
        let (y0, fy) = lerp_index(p.y, self.height);
        let v00 = self.at_clamped(x0, y0);
        let v10 = self.at_clamped(x0 + 1, y0);
        let v01 = self.at_clamped(x0, y0 + 1);
        let v11 = self.at_clamped(x0 + 1, y0 + 1);
        let value = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11);
        let gx = if self.width > 1 {
            (1.0 - fy) * (v10 - v00) + fy * (v11 - v01)
        } else {
            0.0
        };
        let gy = if self.height > 1 {
            (1.0 - fx) * (v01 - v00) + fx * (v11 - v10)
        } else {
            0.0
        };
        Ok(FieldSample {
            value,
            grad: Point2::new(gx, gy),
        })
    }
}

pub fn sample_distance(f: &DistanceField, p: Point2) -> Result<FieldSample, MaskError> {
    f.sample(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_boundary(m: &Mask) -> Vec<Cell> {
        let mut out = Vec::new();
        for c in m.foreground() {
            let neighbours = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)];
            let edge = neighbours.iter().any(|(dx, dy)| {
                let nx = c.x as i64 + dx;
                let ny = c.y as i64 + dy;
                nx < 0
                    || ny < 0
                    || nx >= m.width() as i64
                    || ny >= m.height() as i64
                    || !m.get(nx as usize, ny as usize)
            });
            if edge {
                out.push(c);
            }
        }
        out
    }

    fn brute_field(m: &Mask) -> Vec<f64> {
        let b = brute_boundary(m);
        let mut out = Vec::new();
        for y in 0..m.height() {
            for x in 0..m.width() {
                let best = b
                    .iter()
                    .map(|c| {
                        let dx = c.x as f64 - x as f64;
                        let dy = c.y as f64 - y as f64;
                        dx * dx + dy * dy
                    })
                    .fold(f64::INFINITY, f64::min);
                out.push(best.sqrt());
            }
        }
        out
    }

    pub(crate) fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
        let density = rng.gen_range(0.05..0.95);
        let mut m = Mask::from_fn(w, h, |_, _| rng.gen_bool(density));
        if m.count() == 0 {
            m.set(rng.gen_range(0..w), rng.gen_range(0..h), true);
        }
        m
    }

    #[test]
    fn boundary_examples() {
        let m = Mask::from_fn(1, 1, |_, _| true);
        assert_eq!(boundary_pixels(&m).unwrap(), vec![Cell::new(0, 0)]);

        let m = Mask::from_fn(5, 5, |x, y| (1..=3).contains(&x) && (1..=3).contains(&y));
        let b = boundary_pixels(&m).unwrap();
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&Cell::new(2, 2)));
        assert_eq!(b, brute_boundary(&m));

        let m = Mask::from_fn(4, 4, |_, _| true);
        let b = boundary_pixels(&m).unwrap();
        assert_eq!(b.len(), 12);
        for c in [
            Cell::new(1, 1),
            Cell::new(2, 1),
            Cell::new(1, 2),
            Cell::new(2, 2),
        ] {
            assert!(!b.contains(&c));
        }

        assert_eq!(
            boundary_pixels(&Mask::empty(3, 3)),
            Err(MaskError::EmptyMask)
        );
        assert_eq!(
            distance_field(&Mask::empty(3, 3)),
            Err(MaskError::EmptyMask)
        );
    }

    #[test]
    fn field_examples() {
        let m = Mask::from_fn(7, 7, |x, y| x == 3 && y == 3);
        let f = distance_field(&m).unwrap();
        assert_eq!(f.at(3, 3), 0.0);
        assert_eq!(f.at(3, 5), 2.0);
        assert_eq!(f.at(0, 0), 18f64.sqrt());
    }

    #[test]
    fn field_matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w = rng.gen_range(1..=32);
            let h = rng.gen_range(1..=32);
            let m = random_mask(&mut rng, w, h);
            let fast = distance_field(&m).unwrap();
            let slow = brute_field(&m);
            for (a, b) in fast.values().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9);
            }
            assert_eq!(boundary_pixels(&m).unwrap(), brute_boundary(&m));
        }
    }

    #[test]
    fn field_is_lipschitz_and_zero_on_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let m = random_mask(&mut rng, 20, 17);
            let f = distance_field(&m).unwrap();
            for c in boundary_pixels(&m).unwrap() {
                assert_eq!(f.at(c.x, c.y), 0.0);
                assert!(m.get(c.x, c.y));
            }
            for y in 0..f.height() {
                for x in 0..f.width() {
                    if x + 1 < f.width() {
                        assert!((f.at(x, y) - f.at(x + 1, y)).abs() <= 1.0 + 1e-12);
                    }
                    if y + 1 < f.height() {
                        assert!((f.at(x, y) - f.at(x, y + 1)).abs() <= 1.0 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn sample_lattice_midpoint_and_bounds() {
        let m = Mask::from_fn(7, 7, |x, y| x == 3 && y == 3);
        let f = distance_field(&m).unwrap();
        let s = f.sample(Point2::new(3.0, 5.0)).unwrap();
        assert_eq!(s.value, 2.0);
        // (3,5) = 2 and (3,6) = 3
        let s = f.sample(Point2::new(3.0, 5.5)).unwrap();
        assert!((s.value - 2.5).abs() < 1e-15);
        let a = f.at(4, 3);
        let b = f.at(5, 3);
        let s = f.sample(Point2::new(4.5, 3.0)).unwrap();
        assert!((s.value - 0.5 * (a + b)).abs() < 1e-15);
        assert!(matches!(
            f.sample(Point2::new(-0.1, 2.0)),
            Err(MaskError::OutOfBounds { .. })
        ));
        assert!(matches!(
            f.sample(Point2::new(2.0, 6.01)),
            Err(MaskError::OutOfBounds { .. })
        ));
        assert!(f.sample(Point2::new(6.0, 6.0)).is_ok());
    }

    #[test]
    fn sample_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_mask(&mut rng, 16, 16);
        let f = distance_field(&m).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        while checked < 200 {
            let p = Point2::new(rng.gen_range(0.5..14.5), rng.gen_range(0.5..14.5));
            let fx = p.x - p.x.floor();
            let fy = p.y - p.y.floor();
            if !(0.01..=0.99).contains(&fx) || !(0.01..=0.99).contains(&fy) {
                continue;
            }
            checked += 1;
            let s = f.sample(p).unwrap();
            let dx = (f.sample(Point2::new(p.x + h, p.y)).unwrap().value
                - f.sample(Point2::new(p.x - h, p.y)).unwrap().value)
                / (2.0 * h);
            let dy = (f.sample(Point2::new(p.x, p.y + h)).unwrap().value
                - f.sample(Point2::new(p.x, p.y - h)).unwrap().value)
                / (2.0 * h);
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            assert!(rel(s.grad.x, dx) < 1e-5 || (s.grad.x - dx).abs() < 1e-10);
            assert!(rel(s.grad.y, dy) < 1e-5 || (s.grad.y - dy).abs() < 1e-10);
        }
    }

    #[test]
    fn sample_interpolation_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = random_mask(&mut rng, 12, 9);
        let f = distance_field(&m).unwrap();
        for y in 0..9 {
            for x in 0..11 {
                let mid = f
                    .sample(Point2::new(x as f64 + 0.5, y as f64))
                    .unwrap()
                    .value;
                assert!((mid - 0.5 * (f.at(x, y) + f.at(x + 1, y))).abs() < 1e-12);
            }
        }
    }
}

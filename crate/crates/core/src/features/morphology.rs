//! Binary-image descriptors on a phase grid: blobs, convex hulls, distance
//! transforms and straight-line statistics. Lengths and areas are in pixels.
//!
//! Grids use the same layout as [`Microstructure`](crate::microstructure::Microstructure):
//! index `y * nx + x`, rows along `x`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

/// Connected set of same-phase pixels (8-connectivity).
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub pixels: Vec<(usize, usize)>,
    pub min_x: usize,
    pub max_x: usize,
    pub min_y: usize,
    pub max_y: usize,
}

impl Blob {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn extent_x(&self) -> usize {
        self.max_x - self.min_x + 1
    }

    pub fn extent_y(&self) -> usize {
        self.max_y - self.min_y + 1
    }

    /// Area of the convex hull of all pixel corners.
    pub fn convex_area(&self) -> f64 {
        // Only the extreme pixels of each row contribute hull vertices.
        let rows = self.max_y - self.min_y + 1;
        let mut lo = vec![usize::MAX; rows];
        let mut hi = vec![0usize; rows];
        for &(x, y) in &self.pixels {
            let r = y - self.min_y;
            lo[r] = lo[r].min(x);
            hi[r] = hi[r].max(x);
        }
        let mut pts = Vec::with_capacity(4 * rows);
        for r in 0..rows {
            if lo[r] == usize::MAX {
                continue;
            }
            let y = (self.min_y + r) as i64;
            let (a, b) = (lo[r] as i64, hi[r] as i64 + 1);
            pts.extend_from_slice(&[(a, y), (a, y + 1), (b, y), (b, y + 1)]);
        }
        convex_hull_area(&mut pts)
    }
}

/// Twice-signed area helper on integer points.
fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Monotone-chain hull followed by the shoelace formula.
pub fn convex_hull_area(points: &mut Vec<(i64, i64)>) -> f64 {
    points.sort_unstable();
    points.dedup();
    if points.len() < 3 {
        return 0.0;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * points.len());
    for &p in points.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in points.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    let mut twice = 0i64;
    for i in 0..hull.len() {
        let (a, b) = (hull[i], hull[(i + 1) % hull.len()]);
        twice += a.0 * b.1 - b.0 * a.1;
    }
    twice.abs() as f64 / 2.0
}

/// 8-connected components of the `true` pixels of `mask`, in raster order of first pixel.
pub fn label_blobs(nx: usize, ny: usize, mask: &[bool]) -> Vec<Blob> {
    let mut seen = vec![false; nx * ny];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..nx * ny {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut blob = Blob {
            pixels: Vec::new(),
            min_x: usize::MAX,
            max_x: 0,
            min_y: usize::MAX,
            max_y: 0,
        };
        while let Some(k) = queue.pop_front() {
            let (x, y) = (k % nx, k / nx);
            blob.pixels.push((x, y));
            blob.min_x = blob.min_x.min(x);
            blob.max_x = blob.max_x.max(x);
            blob.min_y = blob.min_y.min(y);
            blob.max_y = blob.max_y.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xn, yn) = (x as i64 + dx, y as i64 + dy);
                    if xn < 0 || yn < 0 || xn >= nx as i64 || yn >= ny as i64 {
                        continue;
                    }
                    let kn = yn as usize * nx + xn as usize;
                    if mask[kn] && !seen[kn] {
                        seen[kn] = true;
                        queue.push_back(kn);
                    }
                }
            }
        }
        blobs.push(blob);
    }
    blobs
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Cityblock,
    Chessboard,
}

/// Distance from every pixel to the nearest `true` pixel of `target`.
///
/// Returns `None` when `target` has no `true` pixel.
pub fn distance_transform(nx: usize, ny: usize, target: &[bool], metric: DistanceMetric) -> Option<Vec<f64>> {
    if !target.iter().any(|&t| t) {
        return None;
    }
    Some(match metric {
        DistanceMetric::Euclidean => euclidean_dt(nx, ny, target),
        DistanceMetric::Cityblock => chamfer_dt(nx, ny, target, false),
        DistanceMetric::Chessboard => chamfer_dt(nx, ny, target, true),
    })
}

const FAR: f64 = 1e20;

/// Lower envelope of parabolas, squared distances along one line.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: replace the only parabola
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
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

fn euclidean_dt(nx: usize, ny: usize, target: &[bool]) -> Vec<f64> {
    let len = nx.max(ny);
    let (mut v, mut z) = (vec![0usize; len], vec![0.0; len + 1]);
    let mut line = vec![0.0; len];
    let mut out = vec![0.0; len];
    let mut sq: Vec<f64> = target.iter().map(|&t| if t { 0.0 } else { FAR }).collect();
    // columns
    for x in 0..nx {
        for y in 0..ny {
            line[y] = sq[y * nx + x];
        }
        edt_1d(&line[..ny], &mut out[..ny], &mut v, &mut z);
        for y in 0..ny {
            sq[y * nx + x] = out[y];
        }
    }
    // rows
    for y in 0..ny {
        line[..nx].copy_from_slice(&sq[y * nx..(y + 1) * nx]);
        edt_1d(&line[..nx], &mut out[..nx], &mut v, &mut z);
        sq[y * nx..(y + 1) * nx].copy_from_slice(&out[..nx]);
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// Two-pass raster sweep; exact for unit-weight 4- (cityblock) or 8- (chessboard) neighbourhoods.
fn chamfer_dt(nx: usize, ny: usize, target: &[bool], diagonal: bool) -> Vec<f64> {
    let mut d: Vec<f64> = target.iter().map(|&t| if t { 0.0 } else { FAR }).collect();
    let forward: &[(i64, i64)] = if diagonal {
        &[(-1, 0), (0, -1), (-1, -1), (1, -1)]
    } else {
        &[(-1, 0), (0, -1)]
    };
    let sweep = |d: &mut Vec<f64>, x: usize, y: usize, offsets: &[(i64, i64)]| {
        let k = y * nx + x;
        for &(dx, dy) in offsets {
            let (xn, yn) = (x as i64 + dx, y as i64 + dy);
            if xn >= 0 && yn >= 0 && (xn as usize) < nx && (yn as usize) < ny {
                let cand = d[yn as usize * nx + xn as usize] + 1.0;
                if cand < d[k] {
                    d[k] = cand;
                }
            }
        }
    };
    for y in 0..ny {
        for x in 0..nx {
            sweep(&mut d, x, y, forward);
        }
    }
    let backward: Vec<(i64, i64)> = forward.iter().map(|&(dx, dy)| (-dx, -dy)).collect();
    for y in (0..ny).rev() {
        for x in (0..nx).rev() {
            sweep(&mut d, x, y, &backward);
        }
    }
    d
}

/// Direction of the straight boundary-to-boundary lines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Lines along `x` (one per row).
    X,
    /// Lines along `y` (one per column).
    Y,
}

/// Values along each line in `direction`.
pub fn lines<T: Copy>(nx: usize, ny: usize, data: &[T], direction: Direction) -> Vec<Vec<T>> {
    match direction {
        Direction::X => (0..ny).map(|y| data[y * nx..(y + 1) * nx].to_vec()).collect(),
        Direction::Y => (0..nx).map(|x| (0..ny).map(|y| data[y * nx + x]).collect()).collect(),
    }
}

/// Number of `true` pixels crossed by each line.
pub fn pixel_cross(nx: usize, ny: usize, mask: &[bool], direction: Direction) -> Vec<f64> {
    lines(nx, ny, mask, direction)
        .iter()
        .map(|l| l.iter().filter(|&&b| b).count() as f64)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanType {
    Harmonic,
    Geometric,
    Arithmetic,
}

/// `log` of the generalized mean of positive values.
pub fn log_mean(values: &[f64], mean: MeanType) -> f64 {
    let n = values.len() as f64;
    match mean {
        MeanType::Harmonic => (n / values.iter().map(|v| 1.0 / v).sum::<f64>()).ln(),
        MeanType::Geometric => values.iter().map(|v| v.ln()).sum::<f64>() / n,
        MeanType::Arithmetic => (values.iter().sum::<f64>() / n).ln(),
    }
}

/// Log generalized mean of conductivities along each line.
pub fn path_means(nx: usize, ny: usize, conductivity: &[f64], direction: Direction, mean: MeanType) -> Vec<f64> {
    lines(nx, ny, conductivity, direction)
        .iter()
        .map(|l| log_mean(l, mean))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    Max,
    Min,
    Mean,
}

impl Statistic {
    /// Reduction over a list; empty lists give 0.
    pub fn apply(&self, values: impl IntoIterator<Item = f64>) -> f64 {
        let mut n = 0usize;
        let mut acc = match self {
            Statistic::Max => f64::NEG_INFINITY,
            Statistic::Min => f64::INFINITY,
            Statistic::Mean => 0.0,
        };
        for v in values {
            n += 1;
            acc = match self {
                Statistic::Max => acc.max(v),
                Statistic::Min => acc.min(v),
                Statistic::Mean => acc + v,
            };
        }
        match (n, self) {
            (0, _) => 0.0,
            (_, Statistic::Mean) => acc / n as f64,
            _ => acc,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Statistic::Max => "max",
            Statistic::Min => "min",
            Statistic::Mean => "mean",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> (usize, usize, Vec<bool>) {
        // rows given top to bottom for readability; storage is bottom row first
        let ny = rows.len();
        let nx = rows[0].len();
        let mut m = vec![false; nx * ny];
        for (r, row) in rows.iter().enumerate() {
            let y = ny - 1 - r;
            for (x, c) in row.chars().enumerate() {
                m[y * nx + x] = c == '#';
            }
        }
        (nx, ny, m)
    }

    #[test]
    fn full_grid_is_one_blob() {
        let (nx, ny, m) = mask(&["####", "####", "####", "####"]);
        let blobs = label_blobs(nx, ny, &m);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].convex_area(), 16.0);
        assert_eq!((blobs[0].extent_x(), blobs[0].extent_y()), (4, 4));
    }

    #[test]
    fn diagonal_pixels_connect() {
        let (nx, ny, m) = mask(&["#..", ".#.", "..#"]);
        let blobs = label_blobs(nx, ny, &m);
        assert_eq!(blobs.len(), 1);
        // hull of the staircase: 9 - 2 * (corner triangles of area 1) = 5
        assert_eq!(blobs[0].convex_area(), 5.0);
        let (nx, ny, m) = mask(&["#.#", "...", "#.#"]);
        assert_eq!(label_blobs(nx, ny, &m).len(), 4);
    }

    #[test]
    fn single_pixel_blob() {
        let (nx, ny, m) = mask(&["....", ".#..", "....", "...."]);
        let blobs = label_blobs(nx, ny, &m);
        assert_eq!(blobs[0].convex_area(), 1.0);
        assert_eq!((blobs[0].extent_x(), blobs[0].extent_y()), (1, 1));
        let dt = distance_transform(nx, ny, &m, DistanceMetric::Euclidean).unwrap();
        // pixel at (1, 2); farthest corner is (3, 0)
        let max = dt.iter().cloned().fold(0.0, f64::max);
        assert!((max - 8f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn distance_metrics() {
        let (nx, ny, m) = mask(&["#....", ".....", "....."]);
        let e = distance_transform(nx, ny, &m, DistanceMetric::Euclidean).unwrap();
        let c = distance_transform(nx, ny, &m, DistanceMetric::Cityblock).unwrap();
        let b = distance_transform(nx, ny, &m, DistanceMetric::Chessboard).unwrap();
        // bottom-right pixel (4, 0) vs target (0, 2)
        assert!((e[4] - 20f64.sqrt()).abs() < 1e-12);
        assert_eq!(c[4], 6.0);
        assert_eq!(b[4], 4.0);
        assert!(distance_transform(nx, ny, &vec![false; 15], DistanceMetric::Euclidean).is_none());
    }

    #[test]
    fn checkerboard_lines() {
        let (nx, ny, m) = mask(&["#.#.", ".#.#", "#.#.", ".#.#"]);
        assert_eq!(pixel_cross(nx, ny, &m, Direction::X), vec![2.0; 4]);
        assert_eq!(pixel_cross(nx, ny, &m, Direction::Y), vec![2.0; 4]);
        let lam: Vec<f64> = m.iter().map(|&h| if h { 10.0 } else { 1.0 }).collect();
        for g in path_means(nx, ny, &lam, Direction::Y, MeanType::Geometric) {
            assert!((g - 10f64.sqrt().ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn statistics_of_empty_lists_are_zero() {
        assert_eq!(Statistic::Max.apply(Vec::<f64>::new()), 0.0);
        assert_eq!(Statistic::Mean.apply(vec![1.0, 2.0, 6.0]), 3.0);
        assert_eq!(Statistic::Min.apply(vec![1.0, -2.0, 6.0]), -2.0);
    }
}

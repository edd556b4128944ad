//! Bounded Voronoi tessellations of the target space.
//!
//! Outer Voronoi cells are unbounded, so every tessellation is clipped to a
//! [`BoundingBox`]. In one dimension cells are intervals split at midpoints of
//! the sorted prototypes. In two dimensions each cell is the box polygon
//! clipped by the perpendicular-bisector half-planes against the other
//! prototypes, applied in ascending prototype index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;
use crate::rng;

/// Prototypes closer than this are treated as coincident.
pub const DUPLICATE_DISTANCE: f64 = 1e-12;

/// Relative tolerance for `sum(areas) == box volume`.
pub const AREA_SUM_TOLERANCE: f64 = 1e-9;

/// Above this many prototypes the 2D tessellation uses a bucket grid to skip
/// bisectors that cannot cut a cell.
const BRUTE_FORCE_LIMIT: usize = 32;

/// Axis-aligned box in target space, `d` in {1, 2}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRepr", into = "BoxRepr")]
pub struct BoundingBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoxRepr {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<BoxRepr> for BoundingBox {
    type Error = Error;

    fn try_from(r: BoxRepr) -> Result<Self> {
        BoundingBox::new(r.lower, r.upper)
    }
}

impl From<BoundingBox> for BoxRepr {
    fn from(b: BoundingBox) -> Self {
        BoxRepr {
            lower: b.lower,
            upper: b.upper,
        }
    }
}

impl BoundingBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if !(1..=2).contains(&lower.len()) {
            return Err(Error::Config(format!(
                "target dimension {} is not supported (only 1 or 2)",
                lower.len()
            )));
        }
        for (j, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                return Err(Error::Data(format!(
                    "bounding box dimension {j} has invalid range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn extent(&self, j: usize) -> f64 {
        self.upper[j] - self.lower[j]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|j| self.extent(j)).product()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn clamp(&self, p: &mut [f64]) {
        for (v, (lo, hi)) in p.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn translated(&self, offset: &[f64]) -> Result<Self> {
        check_dim(self.dim(), offset.len())?;
        Self::new(
            self.lower.iter().zip(offset).map(|(a, o)| a + o).collect(),
            self.upper.iter().zip(offset).map(|(a, o)| a + o).collect(),
        )
    }

    /// Box corners in counter-clockwise order (2D only).
    fn polygon(&self) -> Vec<[f64; 2]> {
        let (x0, y0, x1, y1) = (self.lower[0], self.lower[1], self.upper[0], self.upper[1]);
        vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
    }
}

/// Per-dimension min/max of `targets`, padded by `padding_fraction` of the
/// range on each side. A dimension with zero range is padded by 1.0.
pub fn compute_bounding_box(targets: &Matrix, padding_fraction: f64) -> Result<BoundingBox> {
    if targets.is_empty() {
        return Err(Error::Data("cannot bound an empty target set".into()));
    }
    if !(padding_fraction >= 0.0 && padding_fraction.is_finite()) {
        return Err(Error::Config(format!(
            "padding fraction must be finite and >= 0, got {padding_fraction}"
        )));
    }
    let d = targets.cols();
    let mut lower = vec![f64::INFINITY; d];
    let mut upper = vec![f64::NEG_INFINITY; d];
    for row in targets.iter_rows() {
        for j in 0..d {
            lower[j] = lower[j].min(row[j]);
            upper[j] = upper[j].max(row[j]);
        }
    }
    for j in 0..d {
        let range = upper[j] - lower[j];
        let pad = if range > 0.0 {
            padding_fraction * range
        } else {
            1.0
        };
        lower[j] -= pad;
        upper[j] += pad;
    }
    BoundingBox::new(lower, upper)
}

/// Cell volumes of a bounded tessellation, one per prototype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaVector {
    areas: Vec<f64>,
}

impl AreaVector {
    /// Validates positivity and that the cells exactly fill `box_volume`.
    pub fn new(areas: Vec<f64>, box_volume: f64) -> Result<Self> {
        if let Some((i, a)) = areas
            .iter()
            .enumerate()
            .find(|(_, a)| !(a.is_finite() && **a > 0.0))
        {
            return Err(Error::DegenerateTessellation(format!(
                "cell {i} has non-positive area {a}"
            )));
        }
        let total: f64 = areas.iter().sum();
        if ((total - box_volume) / box_volume).abs() > AREA_SUM_TOLERANCE {
            return Err(Error::DegenerateTessellation(format!(
                "cell areas sum to {total}, box volume is {box_volume}"
            )));
        }
        Ok(Self { areas })
    }

    pub fn len(&self) -> usize {
        self.areas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.areas.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.areas
    }

    pub fn total(&self) -> f64 {
        self.areas.iter().sum()
    }

    pub fn log_areas(&self) -> Vec<f64> {
        self.areas.iter().map(|a| a.ln()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellGeometry {
    Interval { lo: f64, hi: f64 },
    /// Convex polygon, counter-clockwise.
    Polygon(Vec<[f64; 2]>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoronoiCell {
    pub prototype_index: usize,
    pub geometry: CellGeometry,
}

impl VoronoiCell {
    pub fn area(&self) -> f64 {
        match &self.geometry {
            CellGeometry::Interval { lo, hi } => (hi - lo).max(0.0),
            CellGeometry::Polygon(poly) => polygon_area(poly),
        }
    }

    /// Closed-set membership with absolute slack `tol`.
    pub fn contains(&self, p: &[f64], tol: f64) -> bool {
        match &self.geometry {
            CellGeometry::Interval { lo, hi } => p[0] >= lo - tol && p[0] <= hi + tol,
            CellGeometry::Polygon(poly) => {
                if poly.len() < 3 {
                    return false;
                }
                (0..poly.len()).all(|k| {
                    let a = poly[k];
                    let b = poly[(k + 1) % poly.len()];
                    let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
                    let len = ex.hypot(ey);
                    if len == 0.0 {
                        return true;
                    }
                    // Left of every counter-clockwise edge.
                    (ex * (p[1] - a[1]) - ey * (p[0] - a[0])) / len >= -tol
                })
            }
        }
    }
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for k in 0..poly.len() {
        let a = poly[k];
        let b = poly[(k + 1) % poly.len()];
        twice += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * twice.abs()
}

/// Index of the nearest point in `points` to `p`; ties go to the lowest index.
pub fn nearest_index(points: &Matrix, p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in points.iter_rows().enumerate() {
        let d: f64 = c.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn check_inputs(points: &Matrix, bbox: &BoundingBox) -> Result<()> {
    if points.rows() == 0 {
        return Err(Error::Data("tessellation needs at least one prototype".into()));
    }
    check_dim(bbox.dim(), points.cols())
}

/// Bounded Voronoi cells of `points`, one per row, in row order.
pub fn voronoi_cells(points: &Matrix, bbox: &BoundingBox) -> Result<Vec<VoronoiCell>> {
    check_inputs(points, bbox)?;
    match bbox.dim() {
        1 => cells_1d(points, bbox),
        _ => cells_2d(points, bbox),
    }
}

/// Volumes of the bounded Voronoi cells of `points`.
pub fn voronoi_areas(points: &Matrix, bbox: &BoundingBox) -> Result<AreaVector> {
    let cells = voronoi_cells(points, bbox)?;
    AreaVector::new(cells.iter().map(VoronoiCell::area).collect(), bbox.volume())
}

fn cells_1d(points: &Matrix, bbox: &BoundingBox) -> Result<Vec<VoronoiCell>> {
    let k = points.rows();
    let xs = points.as_slice();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
    for w in order.windows(2) {
        if (xs[w[1]] - xs[w[0]]).abs() < DUPLICATE_DISTANCE {
            return Err(duplicate_error(w[0], w[1]));
        }
    }
    let (box_lo, box_hi) = (bbox.lower()[0], bbox.upper()[0]);
    let mut cells = vec![
        VoronoiCell {
            prototype_index: 0,
            geometry: CellGeometry::Interval { lo: 0.0, hi: 0.0 },
        };
        k
    ];
    for (rank, &i) in order.iter().enumerate() {
        let lo = if rank == 0 {
            box_lo
        } else {
            0.5 * (xs[order[rank - 1]] + xs[i])
        };
        let hi = if rank + 1 == k {
            box_hi
        } else {
            0.5 * (xs[i] + xs[order[rank + 1]])
        };
        let lo = lo.clamp(box_lo, box_hi);
        let hi = hi.clamp(box_lo, box_hi);
        cells[i] = VoronoiCell {
            prototype_index: i,
            geometry: CellGeometry::Interval { lo, hi: hi.max(lo) },
        };
    }
    Ok(cells)
}

fn duplicate_error(a: usize, b: usize) -> Error {
    Error::DegenerateTessellation(format!("prototypes {a} and {b} coincide"))
}

/// Sutherland–Hodgman step: keeps the part of `poly` with `n·s <= offset`.
/// A polygon lying entirely inside is copied unchanged.
fn clip_halfplane(poly: &[[f64; 2]], n: [f64; 2], offset: f64, out: &mut Vec<[f64; 2]>) {
    out.clear();
    let m = poly.len();
    for k in 0..m {
        let p = poly[k];
        let q = poly[(k + 1) % m];
        let dp = n[0] * p[0] + n[1] * p[1] - offset;
        let dq = n[0] * q[0] + n[1] * q[1] - offset;
        if dp <= 0.0 {
            out.push(p);
        }
        if (dp < 0.0 && dq > 0.0) || (dp > 0.0 && dq < 0.0) {
            let t = dp / (dp - dq);
            out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
        }
    }
}

struct Clipper {
    scratch: Vec<[f64; 2]>,
}

impl Clipper {
    /// Intersects `poly` with the half-plane of points at least as close to
    /// `ci` as to `cj`.
    fn clip(&mut self, poly: &mut Vec<[f64; 2]>, ci: [f64; 2], cj: [f64; 2]) {
        if poly.is_empty() {
            return;
        }
        let n = [cj[0] - ci[0], cj[1] - ci[1]];
        let mid = [0.5 * (ci[0] + cj[0]), 0.5 * (ci[1] + cj[1])];
        let offset = n[0] * mid[0] + n[1] * mid[1];
        clip_halfplane(poly, n, offset, &mut self.scratch);
        std::mem::swap(poly, &mut self.scratch);
    }
}

fn point2(points: &Matrix, i: usize) -> [f64; 2] {
    let r = points.row(i);
    [r[0], r[1]]
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])
}

fn cells_2d(points: &Matrix, bbox: &BoundingBox) -> Result<Vec<VoronoiCell>> {
    let k = points.rows();
    let all_inside = (0..k).all(|i| bbox.contains(points.row(i)));
    let mut clipper = Clipper {
        scratch: Vec::with_capacity(16),
    };
    let mut cells = Vec::with_capacity(k);
    if k <= BRUTE_FORCE_LIMIT || !all_inside {
        for i in 0..k {
            let ci = point2(points, i);
            let mut poly = bbox.polygon();
            for j in 0..k {
                if j == i {
                    continue;
                }
                let cj = point2(points, j);
                if dist2(ci, cj).sqrt() < DUPLICATE_DISTANCE {
                    return Err(duplicate_error(i.min(j), i.max(j)));
                }
                clipper.clip(&mut poly, ci, cj);
            }
            cells.push(VoronoiCell {
                prototype_index: i,
                geometry: CellGeometry::Polygon(poly),
            });
        }
        return Ok(cells);
    }

    let grid = BucketGrid::new(points, bbox);
    let mut candidates = Vec::new();
    for i in 0..k {
        let ci = point2(points, i);
        // Ring search bounds the cell radius R. A bisector against a prototype
        // farther than 2R cannot cut the cell.
        let mut poly = bbox.polygon();
        let (bx, by) = grid.bucket_of(ci);
        let mut ring = 0usize;
        loop {
            for j in grid.ring(bx, by, ring) {
                if j == i {
                    continue;
                }
                let cj = point2(points, j);
                if dist2(ci, cj).sqrt() < DUPLICATE_DISTANCE {
                    return Err(duplicate_error(i.min(j), i.max(j)));
                }
                clipper.clip(&mut poly, ci, cj);
            }
            let radius = max_vertex_distance(&poly, ci);
            if ring as f64 * grid.min_side >= 2.0 * radius || ring >= grid.max_ring() {
                break;
            }
            ring += 1;
        }
        let reach = 2.0 * max_vertex_distance(&poly, ci) * (1.0 + 1e-9);

        // Exact pass in ascending index order over the prototypes in reach.
        candidates.clear();
        grid.collect_within(ci, reach, points, &mut candidates);
        candidates.sort_unstable();
        let mut poly = bbox.polygon();
        for &j in &candidates {
            if j != i {
                clipper.clip(&mut poly, ci, point2(points, j));
            }
        }
        cells.push(VoronoiCell {
            prototype_index: i,
            geometry: CellGeometry::Polygon(poly),
        });
    }
    Ok(cells)
}

fn max_vertex_distance(poly: &[[f64; 2]], c: [f64; 2]) -> f64 {
    poly.iter()
        .map(|v| dist2(*v, c))
        .fold(0.0_f64, f64::max)
        .sqrt()
}

/// Uniform bucket grid over the box with about one point per bucket.
struct BucketGrid {
    nx: usize,
    ny: usize,
    origin: [f64; 2],
    side: [f64; 2],
    min_side: f64,
    buckets: Vec<Vec<usize>>,
}

impl BucketGrid {
    fn new(points: &Matrix, bbox: &BoundingBox) -> Self {
        let per_dim = ((points.rows() as f64).sqrt().ceil() as usize).max(1);
        let (nx, ny) = (per_dim, per_dim);
        let side = [bbox.extent(0) / nx as f64, bbox.extent(1) / ny as f64];
        let mut grid = Self {
            nx,
            ny,
            origin: [bbox.lower()[0], bbox.lower()[1]],
            side,
            min_side: side[0].min(side[1]),
            buckets: vec![Vec::new(); nx * ny],
        };
        for i in 0..points.rows() {
            let (bx, by) = grid.bucket_of(point2(points, i));
            grid.buckets[by * nx + bx].push(i);
        }
        grid
    }

    fn bucket_of(&self, p: [f64; 2]) -> (usize, usize) {
        let fx = ((p[0] - self.origin[0]) / self.side[0]).floor();
        let fy = ((p[1] - self.origin[1]) / self.side[1]).floor();
        (
            (fx.max(0.0) as usize).min(self.nx - 1),
            (fy.max(0.0) as usize).min(self.ny - 1),
        )
    }

    fn max_ring(&self) -> usize {
        self.nx.max(self.ny)
    }

    /// Points in buckets at Chebyshev distance exactly `r` from (bx, by).
    fn ring(&self, bx: usize, by: usize, r: usize) -> impl Iterator<Item = usize> + '_ {
        let (bx, by, r) = (bx as isize, by as isize, r as isize);
        let (nx, ny) = (self.nx as isize, self.ny as isize);
        (by - r..=by + r)
            .flat_map(move |y| (bx - r..=bx + r).map(move |x| (x, y)))
            .filter(move |&(x, y)| {
                (x - bx).abs().max((y - by).abs()) == r && x >= 0 && y >= 0 && x < nx && y < ny
            })
            .flat_map(move |(x, y)| self.buckets[(y * nx + x) as usize].iter().copied())
    }

    fn collect_within(&self, c: [f64; 2], radius: f64, points: &Matrix, out: &mut Vec<usize>) {
        let x0 = ((c[0] - radius - self.origin[0]) / self.side[0]).floor().max(0.0) as usize;
        let y0 = ((c[1] - radius - self.origin[1]) / self.side[1]).floor().max(0.0) as usize;
        let x1 = (((c[0] + radius - self.origin[0]) / self.side[0]).floor().max(0.0) as usize)
            .min(self.nx - 1);
        let y1 = (((c[1] + radius - self.origin[1]) / self.side[1]).floor().max(0.0) as usize)
            .min(self.ny - 1);
        let r2 = radius * radius;
        for y in y0.min(self.ny - 1)..=y1 {
            for x in x0.min(self.nx - 1)..=x1 {
                for &j in &self.buckets[y * self.nx + x] {
                    if dist2(point2(points, j), c) <= r2 {
                        out.push(j);
                    }
                }
            }
        }
    }
}

/// Monte Carlo estimate of cell volumes: uniform samples in the box are
/// assigned to their nearest point by brute force. Independent of the
/// clipping code, so it serves as an oracle for [`voronoi_areas`]. Cells
/// that receive no sample report 0.
pub fn monte_carlo_areas(
    points: &Matrix,
    bbox: &BoundingBox,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    check_inputs(points, bbox)?;
    if n_samples == 0 {
        return Err(Error::Config("monte carlo needs at least one sample".into()));
    }
    let d = bbox.dim();
    let mut rng = rng::seeded(seed, rng::stream::MONTE_CARLO);
    let mut hits = vec![0u64; points.rows()];
    let mut p = vec![0.0; d];
    for _ in 0..n_samples {
        for (j, v) in p.iter_mut().enumerate() {
            *v = bbox.lower()[j] + rng.random::<f64>() * bbox.extent(j);
        }
        hits[nearest_index(points, &p)] += 1;
    }
    let volume = bbox.volume();
    Ok(hits
        .into_iter()
        .map(|h| h as f64 / n_samples as f64 * volume)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn unit_box() -> BoundingBox {
        BoundingBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn bounding_box_padding() {
        let b = compute_bounding_box(&pts(&[&[0.0], &[1.0]]), 0.1).unwrap();
        assert!((b.lower()[0] + 0.1).abs() < 1e-15 && (b.upper()[0] - 1.1).abs() < 1e-15);

        let b = compute_bounding_box(&pts(&[&[0.0, 0.0], &[2.0, 4.0]]), 0.0).unwrap();
        assert_eq!(b.lower(), &[0.0, 0.0]);
        assert_eq!(b.upper(), &[2.0, 4.0]);

        let b = compute_bounding_box(&pts(&[&[5.0]]), 0.1).unwrap();
        assert_eq!((b.lower()[0], b.upper()[0]), (4.0, 6.0));

        assert!(compute_bounding_box(&Matrix::zeros(0, 1), 0.1).is_err());
    }

    #[test]
    fn box_invariants() {
        assert!(BoundingBox::new(vec![1.0], vec![1.0]).is_err());
        assert!(BoundingBox::new(vec![0.0; 3], vec![1.0; 3]).is_err());
        let json = r#"{"lower":[2.0],"upper":[1.0]}"#;
        assert!(serde_json::from_str::<BoundingBox>(json).is_err());
    }

    #[test]
    fn intervals_split_at_midpoints() {
        let b = BoundingBox::new(vec![-1.0], vec![4.0]).unwrap();
        let cells = voronoi_cells(&pts(&[&[0.0], &[1.0], &[3.0]]), &b).unwrap();
        let got: Vec<_> = cells.iter().map(|c| c.geometry.clone()).collect();
        assert_eq!(
            got,
            vec![
                CellGeometry::Interval { lo: -1.0, hi: 0.5 },
                CellGeometry::Interval { lo: 0.5, hi: 2.0 },
                CellGeometry::Interval { lo: 2.0, hi: 4.0 },
            ]
        );
        let areas = voronoi_areas(&pts(&[&[0.0], &[1.0], &[3.0]]), &b).unwrap();
        assert_eq!(areas.as_slice(), &[1.5, 1.5, 2.0]);
    }

    #[test]
    fn unsorted_1d_prototypes() {
        let b = BoundingBox::new(vec![-1.0], vec![4.0]).unwrap();
        let areas = voronoi_areas(&pts(&[&[3.0], &[0.0], &[1.0]]), &b).unwrap();
        assert_eq!(areas.as_slice(), &[2.0, 1.5, 1.5]);
    }

    #[test]
    fn single_prototype_fills_box() {
        let areas = voronoi_areas(&pts(&[&[0.3, 0.9]]), &unit_box()).unwrap();
        assert_eq!(areas.as_slice(), &[1.0]);
        let b = BoundingBox::new(vec![2.0], vec![7.0]).unwrap();
        let cells = voronoi_cells(&pts(&[&[3.0]]), &b).unwrap();
        assert_eq!(cells[0].geometry, CellGeometry::Interval { lo: 2.0, hi: 7.0 });
    }

    #[test]
    fn symmetric_pair_and_quadrants() {
        let a = voronoi_areas(&pts(&[&[0.25, 0.5], &[0.75, 0.5]]), &unit_box()).unwrap();
        assert!((a.as_slice()[0] - 0.5).abs() < 1e-15);
        assert!((a.as_slice()[1] - 0.5).abs() < 1e-15);

        let q = pts(&[&[0.25, 0.25], &[0.75, 0.25], &[0.75, 0.75], &[0.25, 0.75]]);
        let a = voronoi_areas(&q, &unit_box()).unwrap();
        for v in a.as_slice() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn duplicates_rejected() {
        let e = voronoi_areas(&pts(&[&[0.5, 0.5], &[0.5, 0.5]]), &unit_box()).unwrap_err();
        assert!(matches!(e, Error::DegenerateTessellation(_)));
        let b = BoundingBox::new(vec![0.0], vec![1.0]).unwrap();
        assert!(voronoi_areas(&pts(&[&[0.2], &[0.2]]), &b).is_err());
    }

    #[test]
    fn monte_carlo_single_prototype_is_exact() {
        let a = monte_carlo_areas(&pts(&[&[0.1, 0.1]]), &unit_box(), 1000, 1).unwrap();
        assert_eq!(a, vec![1.0]);
    }

    #[test]
    fn monte_carlo_symmetric_pair() {
        let a = monte_carlo_areas(&pts(&[&[0.25, 0.5], &[0.75, 0.5]]), &unit_box(), 1_000_000, 3)
            .unwrap();
        for v in a {
            assert!((v - 0.5).abs() < 0.002, "{v}");
        }
    }

    #[test]
    fn monte_carlo_matches_hand_computed_intervals() {
        let b = BoundingBox::new(vec![-1.0], vec![4.0]).unwrap();
        let a = monte_carlo_areas(&pts(&[&[0.0], &[1.0], &[3.0]]), &b, 1_000_000, 11).unwrap();
        for (got, want) in a.iter().zip([1.5, 1.5, 2.0]) {
            assert!((got - want).abs() / want < 0.01, "{got} vs {want}");
        }
    }

    #[test]
    fn bucket_path_matches_brute_force() {
        let mut r = rng::seeded(5, 0);
        let b = BoundingBox::new(vec![-2.0, 1.0], vec![3.0, 2.5]).unwrap();
        let rows: Vec<Vec<f64>> = (0..400)
            .map(|_| {
                vec![
                    -2.0 + 5.0 * r.random::<f64>(),
                    1.0 + 1.5 * r.random::<f64>().powi(3),
                ]
            })
            .collect();
        let points = Matrix::from_rows(&rows).unwrap();
        let fast = voronoi_areas(&points, &b).unwrap();
        let mut slow = Vec::new();
        let mut clipper = Clipper { scratch: vec![] };
        for i in 0..points.rows() {
            let mut poly = b.polygon();
            for j in 0..points.rows() {
                if i != j {
                    clipper.clip(&mut poly, point2(&points, i), point2(&points, j));
                }
            }
            slow.push(polygon_area(&poly));
        }
        for (f, s) in fast.as_slice().iter().zip(&slow) {
            assert!((f - s).abs() <= 1e-12 * s.max(1e-3), "{f} vs {s}");
        }
    }

    #[test]
    fn clipping_leaves_interior_polygon_untouched() {
        let poly = unit_box().polygon();
        let mut out = Vec::new();
        clip_halfplane(&poly, [1.0, 0.0], 5.0, &mut out);
        assert_eq!(out, poly);
    }
}

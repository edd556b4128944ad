//! Hard and soft quantization of targets onto prototypes.

use crate::error::{check_dim, Error, Result};
use crate::geometry::{self, AreaVector, BoundingBox, VoronoiCell, DUPLICATE_DISTANCE};
use crate::matrix::Matrix;

/// Learnable prototype coordinates plus the box that closes their cells.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    coords: Matrix,
    bbox: BoundingBox,
    learnable: bool,
}

impl PrototypeSet {
    /// Validates dimensions, in-box placement and pairwise separation.
    pub fn new(coords: Matrix, bbox: BoundingBox) -> Result<Self> {
        check_dim(bbox.dim(), coords.cols())?;
        if coords.rows() == 0 {
            return Err(Error::Data("prototype set is empty".into()));
        }
        for (i, c) in coords.iter_rows().enumerate() {
            if !c.iter().all(|v| v.is_finite()) || !bbox.contains(c) {
                return Err(Error::Data(format!(
                    "prototype {i} at {c:?} lies outside the bounding box"
                )));
            }
        }
        let set = Self {
            coords,
            bbox,
            learnable: true,
        };
        if let Some((a, b)) = set.find_coincident() {
            return Err(Error::DegenerateTessellation(format!(
                "prototypes {a} and {b} coincide"
            )));
        }
        Ok(set)
    }

    /// Marks the set as static (grid baseline).
    pub fn frozen(mut self) -> Self {
        self.learnable = false;
        self
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.coords.cols()
    }

    pub fn coords(&self) -> &Matrix {
        &self.coords
    }

    pub fn bbox(&self) -> &BoundingBox {
        &self.bbox
    }

    pub fn get(&self, i: usize) -> &[f64] {
        self.coords.row(i)
    }

    /// Applies `update` to the coordinate buffer, then clamps every
    /// prototype back into the box.
    pub fn update_coords(&mut self, update: impl FnOnce(&mut Matrix)) {
        update(&mut self.coords);
        for i in 0..self.coords.rows() {
            self.bbox.clamp(self.coords.row_mut(i));
        }
    }

    pub fn push(&mut self, point: &[f64]) -> Result<()> {
        check_dim(self.dim(), point.len())?;
        let mut p = point.to_vec();
        self.bbox.clamp(&mut p);
        self.coords.push_row(&p)
    }

    pub fn remove(&mut self, i: usize) -> Result<()> {
        self.coords.remove_row(i)
    }

    /// First pair (by ascending index) closer than the duplicate threshold.
    pub fn find_coincident(&self) -> Option<(usize, usize)> {
        let k = self.len();
        if self.dim() == 1 {
            let xs = self.coords.as_slice();
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(a.cmp(&b)));
            return order
                .windows(2)
                .find(|w| (xs[w[1]] - xs[w[0]]).abs() < DUPLICATE_DISTANCE)
                .map(|w| (w[0].min(w[1]), w[0].max(w[1])));
        }
        let pairs = crate::training::neighbor_pairs(&self.coords, DUPLICATE_DISTANCE);
        pairs.into_iter().map(|(a, b, _)| (a, b)).min()
    }

    pub fn voronoi_cells(&self) -> Result<Vec<VoronoiCell>> {
        geometry::voronoi_cells(&self.coords, &self.bbox)
    }

    pub fn voronoi_areas(&self) -> Result<AreaVector> {
        geometry::voronoi_areas(&self.coords, &self.bbox)
    }
}

/// Temperature-softmax assignment of one target over the prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
    pub temperature: f64,
}

impl SoftLabel {
    /// Highest-probability prototype; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Nearest prototype to `y`, lowest index on ties.
pub fn hard_assign(y: &[f64], protos: &PrototypeSet) -> Result<usize> {
    check_dim(protos.dim(), y.len())?;
    Ok(geometry::nearest_index(protos.coords(), y))
}

/// Distance from `y` to its hard-assigned prototype.
pub fn quantization_error(y: &[f64], protos: &PrototypeSet) -> Result<f64> {
    let i = hard_assign(y, protos)?;
    Ok(distance(y, protos.get(i)))
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be > 0, got {tau}")))
    }
}

pub fn soft_labels(y: &[f64], protos: &PrototypeSet, tau: f64) -> Result<SoftLabel> {
    check_dim(protos.dim(), y.len())?;
    check_temperature(tau)?;
    let mut probs = vec![0.0; protos.len()];
    soft_assign(y, protos.coords(), tau, &mut probs);
    Ok(SoftLabel {
        probs,
        temperature: tau,
    })
}

/// Writes the soft labels of `y` into `probs` and returns the index of and
/// distance to the nearest prototype (lowest index on ties).
///
/// Caller guarantees matching dimensions and `tau > 0`.
pub fn soft_assign(y: &[f64], coords: &Matrix, tau: f64, probs: &mut [f64]) -> (usize, f64) {
    debug_assert_eq!(probs.len(), coords.rows());
    let d = coords.cols();
    let data = coords.as_slice();
    match d {
        1 => {
            let y0 = y[0];
            for (p, c) in probs.iter_mut().zip(data) {
                *p = (c - y0).abs();
            }
        }
        2 => {
            let (y0, y1) = (y[0], y[1]);
            for (p, c) in probs.iter_mut().zip(data.chunks_exact(2)) {
                let (dx, dy) = (c[0] - y0, c[1] - y1);
                *p = (dx * dx + dy * dy).sqrt();
            }
        }
        _ => {
            for (p, c) in probs.iter_mut().zip(data.chunks_exact(d)) {
                *p = distance(c, y);
            }
        }
    }
    let mut nearest = 0;
    let mut d_min = f64::INFINITY;
    for (i, &dist) in probs.iter().enumerate() {
        if dist < d_min {
            d_min = dist;
            nearest = i;
        }
    }
    let inv_tau = 1.0 / tau;
    let mut total = 0.0;
    for p in probs.iter_mut() {
        *p = (-(*p - d_min) * inv_tau).exp();
        total += *p;
    }
    let inv_total = 1.0 / total;
    for p in probs.iter_mut() {
        *p *= inv_total;
    }
    (nearest, d_min)
}

/// Neumaier-compensated running sums, one per slot.
#[derive(Clone, Debug)]
pub(crate) struct CompensatedSums {
    sum: Vec<f64>,
    comp: Vec<f64>,
}

impl CompensatedSums {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            sum: vec![0.0; n],
            comp: vec![0.0; n],
        }
    }

    pub(crate) fn add_all(&mut self, values: &[f64]) {
        for ((s, c), &v) in self.sum.iter_mut().zip(self.comp.iter_mut()).zip(values) {
            let t = *s + v;
            if s.abs() >= v.abs() {
                *c += (*s - t) + v;
            } else {
                *c += (v - t) + *s;
            }
            *s = t;
        }
    }

    pub(crate) fn totals(&self) -> Vec<f64> {
        self.sum.iter().zip(&self.comp).map(|(s, c)| s + c).collect()
    }
}

/// Mean soft assignment per prototype over `targets`.
pub fn usage(protos: &PrototypeSet, targets: &Matrix, tau: f64) -> Result<Vec<f64>> {
    if targets.is_empty() {
        return Err(Error::Data("usage needs at least one target".into()));
    }
    check_dim(protos.dim(), targets.cols())?;
    check_temperature(tau)?;
    let k = protos.len();
    let mut sums = CompensatedSums::new(k);
    let mut buf = vec![0.0; k];
    for y in targets.iter_rows() {
        soft_assign(y, protos.coords(), tau, &mut buf);
        sums.add_all(&buf);
    }
    let n = targets.rows() as f64;
    Ok(sums.totals().into_iter().map(|s| s / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(points: &[f64]) -> PrototypeSet {
        let rows: Vec<Vec<f64>> = points.iter().map(|p| vec![*p]).collect();
        PrototypeSet::new(
            Matrix::from_rows(&rows).unwrap(),
            BoundingBox::new(vec![-10.0], vec![10.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn hard_assignment_and_ties() {
        let p = line(&[0.0, 1.0]);
        assert_eq!(hard_assign(&[0.4], &p).unwrap(), 0);
        assert_eq!(hard_assign(&[0.5], &p).unwrap(), 0);
        assert_eq!(hard_assign(&[0.6], &p).unwrap(), 1);
        assert!(hard_assign(&[0.6, 1.0], &p).is_err());
    }

    #[test]
    fn quantization_error_examples() {
        let p = line(&[0.0, 1.0]);
        assert!((quantization_error(&[0.4], &p).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(quantization_error(&[1.0], &p).unwrap(), 0.0);
        let single = PrototypeSet::new(
            Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap(),
            BoundingBox::new(vec![-5.0, -5.0], vec![5.0, 5.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(quantization_error(&[3.0, 4.0], &single).unwrap(), 5.0);
    }

    #[test]
    fn soft_label_examples() {
        let p = line(&[0.0, 1.0]);
        let q = soft_labels(&[0.5], &p, 0.3).unwrap();
        assert_eq!(q.probs, vec![0.5, 0.5]);

        let q = soft_labels(&[0.0], &p, 1.0).unwrap();
        let e = (-1.0f64).exp();
        assert!((q.probs[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((q.probs[0] - 0.7311).abs() < 1e-4 && (q.probs[1] - 0.2689).abs() < 1e-4);

        let q = soft_labels(&[0.3], &p, 1e-6).unwrap();
        assert!((q.probs[0] - 1.0).abs() < 1e-9 && q.probs[1] < 1e-9);

        assert!(soft_labels(&[0.3], &p, 0.0).is_err());
        assert!(soft_labels(&[0.3], &p, -1.0).is_err());
    }

    #[test]
    fn usage_examples() {
        let p = line(&[-1.0, 0.0, 2.0]);
        let atop = Matrix::from_rows(&[vec![-1.0], vec![0.0], vec![2.0]]).unwrap();
        let u = usage(&p, &atop, 1e-6).unwrap();
        for v in &u {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let pair = line(&[0.0, 1.0]);
        let on_first = Matrix::from_rows(&[vec![0.0], vec![0.0]]).unwrap();
        let u = usage(&pair, &on_first, 1e-6).unwrap();
        assert_eq!(u, vec![1.0, 0.0]);

        assert!(usage(&pair, &Matrix::zeros(0, 1), 0.1).is_err());
    }

    #[test]
    fn usage_matches_mean_of_soft_labels() {
        let p = line(&[-1.0, 0.2, 1.7]);
        let ys = [-2.0, -0.4, 0.1, 0.9, 1.3, 5.0];
        let targets = Matrix::from_rows(&ys.iter().map(|y| vec![*y]).collect::<Vec<_>>()).unwrap();
        let u = usage(&p, &targets, 0.7).unwrap();
        for i in 0..3 {
            // Direct evaluation of exp(-|y-c|/tau) / sum, averaged.
            let brute: f64 = ys
                .iter()
                .map(|y| {
                    let w: Vec<f64> = [-1.0, 0.2, 1.7]
                        .iter()
                        .map(|c: &f64| (-(y - c).abs() / 0.7).exp())
                        .collect();
                    w[i] / w.iter().sum::<f64>()
                })
                .sum::<f64>()
                / ys.len() as f64;
            assert!((u[i] - brute).abs() < 1e-12);
        }
        assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn coincident_prototypes_rejected() {
        let rows = vec![vec![0.1, 0.1], vec![0.5, 0.5], vec![0.1, 0.1]];
        let r = PrototypeSet::new(
            Matrix::from_rows(&rows).unwrap(),
            BoundingBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap(),
        );
        assert!(matches!(r, Err(Error::DegenerateTessellation(_))));
    }

    #[test]
    fn outside_box_rejected() {
        let r = PrototypeSet::new(
            Matrix::from_rows(&[vec![11.0]]).unwrap(),
            BoundingBox::new(vec![-10.0], vec![10.0]).unwrap(),
        );
        assert!(r.is_err());
    }
}

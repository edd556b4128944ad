//! Comparison methods: a frozen prototype lattice (GRID) and per-dimension
//! conformalized quantile regression (CQR).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::conformal::conformal_quantile;
use crate::data::{Dataset, Standardizer};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{AreaVector, BoundingBox};
use crate::matrix::Matrix;
use crate::nn::{Adam, AdamConfig, Architecture, Mlp};
use crate::quantizer::PrototypeSet;
use crate::rng;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bins_per_dim: usize,
    pub bbox: BoundingBox,
}

/// Cell centers of a `bins^d` lattice (first coordinate varies slowest),
/// frozen, with equal areas.
pub fn build_grid(spec: &GridSpec) -> Result<(PrototypeSet, AreaVector)> {
    let bins = spec.bins_per_dim;
    if bins < 2 {
        return Err(Error::Config(format!("grid needs >= 2 bins per dimension, got {bins}")));
    }
    let b = &spec.bbox;
    let d = b.dim();
    let center = |j: usize, i: usize| b.lower()[j] + (i as f64 + 0.5) * b.extent(j) / bins as f64;
    let k = bins.pow(d as u32);
    let mut coords = Matrix::zeros(0, d);
    for flat in 0..k {
        let point: Vec<f64> = match d {
            1 => vec![center(0, flat)],
            _ => vec![center(0, flat / bins), center(1, flat % bins)],
        };
        coords.push_row(&point)?;
    }
    let protos = PrototypeSet::new(coords, b.clone())?.frozen();
    let areas = AreaVector::new(vec![b.volume() / k as f64; k], b.volume())?;
    Ok((protos, areas))
}

/// Quantile (pinball) loss of `pred` for target `y` at `level`.
pub fn pinball_loss(pred: f64, y: f64, level: f64) -> f64 {
    let r = y - pred;
    if r >= 0.0 {
        level * r
    } else {
        (level - 1.0) * r
    }
}

/// Derivative of [`pinball_loss`] with respect to `pred`.
fn pinball_grad(pred: f64, y: f64, level: f64) -> f64 {
    if y >= pred {
        -level
    } else {
        1.0 - level
    }
}

/// Quantile network with outputs `(lo_0, hi_0, lo_1, hi_1, ...)` in
/// standardized target units.
#[derive(Clone, Debug, PartialEq)]
pub struct CqrModel {
    pub net: Mlp,
    pub alpha: f64,
    pub scaler: Standardizer,
    pub target_scaler: Standardizer,
    /// Fraction of training inputs whose lower output exceeds the upper one
    /// in at least one dimension.
    pub crossing_rate: f64,
}

impl CqrModel {
    pub fn target_dim(&self) -> usize {
        self.target_scaler.mean.len()
    }

    /// Uncorrected `(lower, upper)` bounds in target units.
    pub fn quantiles(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.net.input_dim(), x.len())?;
        let out = self.net.forward(&self.scaler.apply(x))?;
        let d = self.target_dim();
        let lo: Vec<f64> = (0..d).map(|j| out[2 * j]).collect();
        let hi: Vec<f64> = (0..d).map(|j| out[2 * j + 1]).collect();
        Ok((self.target_scaler.invert(&lo), self.target_scaler.invert(&hi)))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// Fits the quantile network by minimizing the summed pinball losses at
/// `alpha/2` and `1 - alpha/2` for every target dimension.
pub fn cqr_fit(train: &Dataset, cfg: &TrainConfig, alpha: f64, seed: u64) -> Result<CqrModel> {
    check_alpha(alpha)?;
    cfg.validate()?;
    let d = train.target_dim();
    let scaler = Standardizer::fit(&train.features);
    let target_scaler = Standardizer::fit(&train.targets);
    let x = scaler.apply_all(&train.features);
    let y = target_scaler.apply_all(&train.targets);
    let arch = Architecture {
        input_dim: train.feature_dim(),
        hidden: cfg.hidden.clone(),
        outputs: 2 * d,
    };
    let mut net = Mlp::new(&arch, &mut rng::seeded(seed, rng::stream::NETWORK_INIT))?;
    let mut opt = Adam::new(AdamConfig::with_learning_rate(cfg.lr_theta), &net);
    let mut shuffle = rng::seeded(seed, rng::stream::SHUFFLE);
    let levels = [alpha / 2.0, 1.0 - alpha / 2.0];

    for epoch in 0..cfg.epochs {
        let order = rng::permutation(train.len(), &mut shuffle);
        for rows in order.chunks(cfg.batch_size) {
            let inv_b = 1.0 / rows.len() as f64;
            let mut grads = net.zero_gradients();
            for group in group_rows(&x, rows) {
                let trace = net.forward_trace(x.row(group[0]))?;
                let mut d_out = vec![0.0; 2 * d];
                for &r in &group {
                    for j in 0..d {
                        for (s, level) in levels.iter().enumerate() {
                            d_out[2 * j + s] +=
                                pinball_grad(trace.output[2 * j + s], y.get(r, j), *level) * inv_b;
                        }
                    }
                }
                net.backward(&trace, &d_out, &mut grads);
            }
            opt.apply(&mut net, &grads)
                .map_err(|e| e.context(format!("quantile network, epoch {epoch}")))?;
        }
    }

    let mut crossed = 0usize;
    for row in x.iter_rows() {
        let out = net.forward(row)?;
        if (0..d).any(|j| out[2 * j] > out[2 * j + 1]) {
            crossed += 1;
        }
    }
    Ok(CqrModel {
        net,
        alpha,
        scaler,
        target_scaler,
        crossing_rate: crossed as f64 / train.len() as f64,
    })
}

/// Groups rows with bitwise-identical feature vectors, in first-seen order.
fn group_rows(x: &Matrix, rows: &[usize]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    for &r in rows {
        let key: Vec<u64> = x.row(r).iter().map(|v| v.to_bits()).collect();
        let g = *index.entry(key).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(r);
    }
    groups
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqrCalibration {
    pub alpha: f64,
    pub n_cal: usize,
    /// Per-dimension width correction, target units. Infinite when the
    /// conformal rank exceeds the calibration size.
    pub corrections: Vec<f64>,
}

/// Per-dimension conformity scores `max(lo - y, y - hi)` and their
/// conformal quantile at level `1 - alpha`.
pub fn cqr_calibrate(model: &CqrModel, features: &Matrix, targets: &Matrix) -> Result<CqrCalibration> {
    check_dim(features.rows(), targets.rows())?;
    check_dim(model.target_dim(), targets.cols())?;
    if targets.is_empty() {
        return Err(Error::Data("calibration split is empty".into()));
    }
    let d = model.target_dim();
    let mut scores = vec![Vec::with_capacity(targets.rows()); d];
    for (x, y) in features.iter_rows().zip(targets.iter_rows()) {
        let (lo, hi) = model.quantiles(x)?;
        for j in 0..d {
            scores[j].push((lo[j] - y[j]).max(y[j] - hi[j]));
        }
    }
    let corrections = scores
        .into_iter()
        .map(|mut s| {
            s.sort_by(f64::total_cmp);
            conformal_quantile(&s, model.alpha).unwrap_or(f64::INFINITY)
        })
        .collect();
    Ok(CqrCalibration {
        alpha: model.alpha,
        n_cal: targets.rows(),
        corrections,
    })
}

/// Axis-aligned box `[lower, upper]` per dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqrRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Some dimension's corrected interval came out inverted; its width
    /// is taken as zero.
    pub crossed: bool,
}

impl CqrRegion {
    pub fn area(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l).max(0.0))
            .product()
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        y.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }
}

pub fn cqr_predict(model: &CqrModel, cal: &CqrCalibration, x: &[f64]) -> Result<CqrRegion> {
    check_dim(model.target_dim(), cal.corrections.len())?;
    let (lo, hi) = model.quantiles(x)?;
    let lower: Vec<f64> = lo.iter().zip(&cal.corrections).map(|(l, c)| l - c).collect();
    let upper: Vec<f64> = hi.iter().zip(&cal.corrections).map(|(h, c)| h + c).collect();
    let crossed = lower.iter().zip(&upper).any(|(l, u)| l > u);
    Ok(CqrRegion {
        lower,
        upper,
        crossed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::voronoi_areas;

    #[test]
    fn grid_examples() {
        let bbox = BoundingBox::new(vec![0.0], vec![1.0]).unwrap();
        let (p, a) = build_grid(&GridSpec { bins_per_dim: 2, bbox }).unwrap();
        assert_eq!(p.coords().as_slice(), &[0.25, 0.75]);
        assert_eq!(a.as_slice(), &[0.5, 0.5]);
        assert!(!p.is_learnable());

        let bbox = BoundingBox::new(vec![-2.0, -1.0], vec![3.0, 4.0]).unwrap();
        let (p, a) = build_grid(&GridSpec { bins_per_dim: 50, bbox: bbox.clone() }).unwrap();
        assert_eq!(p.len(), 2500);
        let exact = voronoi_areas(p.coords(), &bbox).unwrap();
        for (x, y) in exact.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() < 1e-9 * y);
        }
        assert!(build_grid(&GridSpec { bins_per_dim: 1, bbox }).is_err());
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(2.0, 2.0, 0.3), 0.0);
        assert!((pinball_loss(0.0, 1.0, 0.9) - 0.9).abs() < 1e-15);
        assert!((pinball_loss(0.0, -1.0, 0.9) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn region_area_and_membership() {
        let r = CqrRegion {
            lower: vec![0.0, 1.0],
            upper: vec![2.0, 4.0],
            crossed: false,
        };
        assert_eq!(r.area(), 6.0);
        assert!(r.contains(&[1.0, 4.0]));
        assert!(!r.contains(&[1.0, 4.1]));
        let c = CqrRegion {
            lower: vec![1.0],
            upper: vec![0.5],
            crossed: true,
        };
        assert_eq!(c.area(), 0.0);
        assert!(!c.contains(&[0.7]));
    }
}

//! Split-conformal calibration over density-ranked regions.
//!
//! Regions are ranked by predicted density (the raw network output), not by
//! probability mass. The score of a target is the cumulative probability of
//! the ranked regions up to and including its own; a prediction set keeps
//! the longest ranked prefix whose cumulative probability stays `<= q_hat`.
//! Both sides read the same cumulative vector, so `y` is in the set exactly
//! when its score is `<= q_hat`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::density::{DensityNetwork, RegionProbabilities};
use crate::error::{check_dim, Error, Result};
use crate::geometry::AreaVector;
use crate::matrix::Matrix;
use crate::quantizer::{hard_assign, PrototypeSet};

/// Frozen model used for calibration and prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityModel {
    pub net: DensityNetwork,
    pub protos: PrototypeSet,
    pub areas: AreaVector,
    /// Applied to raw features before the network.
    pub scaler: Standardizer,
}

impl DensityModel {
    pub fn new(
        net: DensityNetwork,
        protos: PrototypeSet,
        areas: AreaVector,
        scaler: Standardizer,
    ) -> Result<Self> {
        check_dim(net.regions(), protos.len())?;
        check_dim(net.regions(), areas.len())?;
        check_dim(net.input_dim(), scaler.mean.len())?;
        Ok(Self {
            net,
            protos,
            areas,
            scaler,
        })
    }

    pub fn k(&self) -> usize {
        self.protos.len()
    }

    /// Region probabilities for a raw (unstandardized) feature vector.
    pub fn region_probabilities(&self, x: &[f64]) -> Result<RegionProbabilities> {
        check_dim(self.net.input_dim(), x.len())?;
        self.net
            .region_probabilities(&self.scaler.apply(x), &self.areas)
    }

    pub fn ranking(&self, x: &[f64]) -> Result<Ranking> {
        Ok(Ranking::new(&self.region_probabilities(x)?))
    }

    pub fn nonconformity_score(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let ranking = self.ranking(x)?;
        self.score_with(&ranking, y)
    }

    fn score_with(&self, ranking: &Ranking, y: &[f64]) -> Result<f64> {
        check_dim(self.protos.dim(), y.len())?;
        if !self.protos.bbox().contains(y) {
            warn!("target {y:?} lies outside the bounding box; score set to 1");
            return Ok(1.0);
        }
        Ok(ranking.score(hard_assign(y, &self.protos)?))
    }

    pub fn predict_region(&self, x: &[f64], q_hat: f64) -> Result<PredictionRegion> {
        let ranking = self.ranking(x)?;
        ranking.region(&self.areas, q_hat)
    }

    /// Whether `y` belongs to `region`, using the same rule as the score.
    pub fn region_contains(&self, region: &PredictionRegion, y: &[f64]) -> Result<bool> {
        check_dim(self.protos.dim(), y.len())?;
        if !self.protos.bbox().contains(y) {
            return Ok(region.len() == self.k());
        }
        Ok(region.contains_index(hard_assign(y, &self.protos)?))
    }
}

/// Density order of the regions and the cumulative probability along it.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    /// Region indices, densest first.
    pub order: Vec<usize>,
    /// `position[i]` is the rank of region `i`.
    pub position: Vec<usize>,
    /// Cumulative probability along `order`; nondecreasing, ends at 1.
    pub cumulative: Vec<f64>,
    pub log_density: Vec<f64>,
}

impl Ranking {
    pub fn new(probs: &RegionProbabilities) -> Self {
        let order = density_order(&probs.log_density);
        let mut position = vec![0; order.len()];
        for (r, &i) in order.iter().enumerate() {
            position[i] = r;
        }
        let mut cumulative = Vec::with_capacity(order.len());
        let mut acc = 0.0f64;
        for &i in &order {
            acc = (acc + probs.probs[i]).min(1.0);
            cumulative.push(acc);
        }
        // The full set carries all the mass by definition; pin it so that
        // q_hat = 1 always selects every region.
        if let Some(last) = cumulative.last_mut() {
            *last = 1.0;
        }
        Self {
            order,
            position,
            cumulative,
            log_density: probs.log_density.clone(),
        }
    }

    pub fn score(&self, region: usize) -> f64 {
        self.cumulative[self.position[region]]
    }

    /// Longest prefix with cumulative probability `<= q_hat`.
    pub fn region(&self, areas: &AreaVector, q_hat: f64) -> Result<PredictionRegion> {
        if !(0.0..=1.0).contains(&q_hat) {
            return Err(Error::Config(format!("q_hat must lie in [0, 1], got {q_hat}")));
        }
        check_dim(self.order.len(), areas.len())?;
        let r = self.cumulative.partition_point(|c| *c <= q_hat);
        let indices = self.order[..r].to_vec();
        let mut member = vec![false; self.order.len()];
        let mut total_area = 0.0;
        for &i in &indices {
            member[i] = true;
            total_area += areas.as_slice()[i];
        }
        Ok(PredictionRegion {
            cumulative_prob: if r == 0 { 0.0 } else { self.cumulative[r - 1] },
            indices,
            total_area,
            member,
        })
    }
}

/// Indices sorted by log-density, highest first; ties by lower index.
pub fn density_order(log_density: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..log_density.len()).collect();
    order.sort_by(|&a, &b| log_density[b].total_cmp(&log_density[a]).then(a.cmp(&b)));
    order
}

/// The Γ set: density-ranked regions kept at a threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRegion {
    /// Kept region indices, densest first.
    pub indices: Vec<usize>,
    pub cumulative_prob: f64,
    pub total_area: f64,
    #[serde(skip)]
    member: Vec<bool>,
}

impl PredictionRegion {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains_index(&self, i: usize) -> bool {
        self.member.get(i).copied().unwrap_or(false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub n_cal: usize,
    pub q_hat: f64,
    /// Sorted ascending.
    pub scores: Vec<f64>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

/// 1-based rank `ceil((n + 1)(1 - alpha))`. A small slack keeps products
/// such as `10 * 0.9` from rounding up past an integer.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    (((n as f64 + 1.0) * (1.0 - alpha)) - 1e-9).ceil().max(1.0) as usize
}

/// Order-statistic threshold; `None` when the rank exceeds `n`.
pub fn conformal_quantile(sorted: &[f64], alpha: f64) -> Option<f64> {
    let k = conformal_rank(sorted.len(), alpha);
    (k <= sorted.len()).then(|| sorted[k - 1])
}

pub fn calibrate_scores(mut scores: Vec<f64>, alpha: f64) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::Data("calibration split is empty".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite calibration score {s}")));
    }
    scores.sort_by(f64::total_cmp);
    let q_hat = conformal_quantile(&scores, alpha).unwrap_or(1.0);
    Ok(CalibrationResult {
        alpha,
        n_cal: scores.len(),
        q_hat,
        scores,
    })
}

pub fn calibrate(
    model: &DensityModel,
    features: &Matrix,
    targets: &Matrix,
    alpha: f64,
) -> Result<CalibrationResult> {
    check_alpha(alpha)?;
    check_dim(features.rows(), targets.rows())?;
    let scores = scores(model, features, targets)?;
    calibrate_scores(scores, alpha)
}

/// Scores for every row, reusing the ranking across identical feature rows
/// that appear consecutively.
pub fn scores(model: &DensityModel, features: &Matrix, targets: &Matrix) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(targets.rows());
    let mut cached: Option<(&[f64], Ranking)> = None;
    for (x, y) in features.iter_rows().zip(targets.iter_rows()) {
        let reuse = matches!(&cached, Some((cx, _)) if *cx == x);
        if !reuse {
            cached = Some((x, model.ranking(x)?));
        }
        let ranking = &cached.as_ref().unwrap().1;
        out.push(model.score_with(ranking, y)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(log_density: Vec<f64>, areas: &[f64]) -> RegionProbabilities {
        RegionProbabilities::from_log_density(
            log_density,
            &AreaVector::new(areas.to_vec(), areas.iter().sum()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn order_examples() {
        assert_eq!(density_order(&[0.0, 2.0, 1.0]), vec![1, 2, 0]);
        assert_eq!(density_order(&[0.5; 4]), vec![0, 1, 2, 3]);
        let p = probs(vec![0.0; 3], &[1.0, 2.0, 3.0]);
        assert_eq!(Ranking::new(&p).order, vec![0, 1, 2]);
    }

    #[test]
    fn score_and_region_examples() {
        // Equal areas, so probabilities are the softmax of the log-densities.
        let ld: Vec<f64> = [0.5f64, 0.3, 0.2].iter().map(|p| p.ln()).collect();
        let areas = AreaVector::new(vec![1.0; 3], 3.0).unwrap();
        let r = Ranking::new(&RegionProbabilities::from_log_density(ld, &areas).unwrap());
        assert!((r.score(0) - 0.5).abs() < 1e-12);
        assert!((r.score(1) - 0.8).abs() < 1e-12);
        assert_eq!(r.score(2), 1.0);

        let g = r.region(&areas, 0.85).unwrap();
        assert_eq!(g.indices, vec![0, 1]);
        assert!((g.cumulative_prob - 0.8).abs() < 1e-12);
        assert_eq!(g.total_area, 2.0);
        assert!(r.region(&areas, 0.0).unwrap().is_empty());
        let full = r.region(&areas, 1.0).unwrap();
        assert_eq!(full.len(), 3);
        assert_eq!(full.total_area, 3.0);
    }

    #[test]
    fn quantile_examples() {
        let s: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        assert_eq!(calibrate_scores(s.clone(), 0.1).unwrap().q_hat, 0.9);
        assert_eq!(calibrate_scores(s.clone(), 0.5).unwrap().q_hat, 0.5);
        assert_eq!(calibrate_scores(vec![0.3], 0.1).unwrap().q_hat, 1.0);
        assert!(calibrate_scores(vec![], 0.1).is_err());
        assert!(calibrate_scores(s, 1.0).is_err());
        assert_eq!(conformal_rank(9, 0.1), 9);
        assert_eq!(conformal_rank(9, 0.5), 5);
        assert_eq!(conformal_rank(1, 0.1), 2);
    }

    #[test]
    fn threshold_monotonicity() {
        let p = probs(vec![0.1, -0.4, 1.2, 0.0, 0.7], &[1.0, 0.5, 2.0, 1.0, 0.25]);
        let areas = AreaVector::new(vec![1.0, 0.5, 2.0, 1.0, 0.25], 4.75).unwrap();
        let r = Ranking::new(&p);
        let mut prev: Vec<usize> = Vec::new();
        for k in 0..=20 {
            let g = r.region(&areas, k as f64 / 20.0).unwrap();
            assert!(prev.iter().all(|i| g.contains_index(*i)));
            prev = g.indices;
        }
    }
}

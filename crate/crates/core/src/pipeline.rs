//! Method-agnostic train / calibrate / predict.

use serde::{Deserialize, Serialize};

use crate::baselines::{cqr_calibrate, cqr_fit, cqr_predict, CqrCalibration, CqrModel};
use crate::config::Method;
use crate::conformal::{self, CalibrationResult, DensityModel, Ranking};
use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;
use crate::training::{fit, EpochRecord, TrainConfig};

/// A trained model of any method.
#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Density {
        method: Method,
        model: DensityModel,
        /// Per-dimension standard deviation of the training targets.
        target_std: Vec<f64>,
        history: Vec<EpochRecord>,
    },
    Cqr(CqrModel),
}

impl TrainedModel {
    /// Trains `method` on `train`. `alpha` only matters for CQR, whose
    /// quantile levels depend on it.
    pub fn train(
        method: Method,
        train: &Dataset,
        cfg: &TrainConfig,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        match method.variant() {
            Some(variant) => {
                let state = fit(train, cfg, variant, seed)?;
                state.check_consistency()?;
                Ok(TrainedModel::Density {
                    method,
                    model: DensityModel::new(state.net, state.protos, state.areas, state.scaler)?,
                    target_std: state.target_std,
                    history: state.history,
                })
            }
            None => Ok(TrainedModel::Cqr(cqr_fit(train, cfg, alpha, seed)?)),
        }
    }

    pub fn method(&self) -> Method {
        match self {
            TrainedModel::Density { method, .. } => *method,
            TrainedModel::Cqr(_) => Method::Cqr,
        }
    }

    /// Prototype count, `None` for CQR.
    pub fn k(&self) -> Option<usize> {
        match self {
            TrainedModel::Density { model, .. } => Some(model.k()),
            TrainedModel::Cqr(_) => None,
        }
    }

    pub fn target_std(&self) -> &[f64] {
        match self {
            TrainedModel::Density { target_std, .. } => target_std,
            TrainedModel::Cqr(m) => &m.target_scaler.std,
        }
    }

    pub fn calibrate(&self, cal: &Dataset, alpha: f64) -> Result<Calibration> {
        match self {
            TrainedModel::Density { model, .. } => Ok(Calibration::Density(conformal::calibrate(
                model,
                &cal.features,
                &cal.targets,
                alpha,
            )?)),
            TrainedModel::Cqr(model) => {
                if (model.alpha - alpha).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "quantile model was trained for alpha {} but calibration asks for {alpha}",
                        model.alpha
                    )));
                }
                Ok(Calibration::Cqr(cqr_calibrate(model, &cal.features, &cal.targets)?))
            }
        }
    }

    pub fn predictor<'a>(&'a self, cal: &'a Calibration) -> Result<Predictor<'a>> {
        match (self, cal) {
            (TrainedModel::Density { model, .. }, Calibration::Density(c)) => Ok(Predictor::Density {
                model,
                q_hat: c.q_hat,
            }),
            (TrainedModel::Cqr(model), Calibration::Cqr(c)) => Ok(Predictor::Cqr { model, cal: c }),
            _ => Err(Error::Config(
                "calibration artifact does not match the model kind".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibration {
    Density(CalibrationResult),
    Cqr(CqrCalibration),
}

impl Calibration {
    pub fn alpha(&self) -> f64 {
        match self {
            Calibration::Density(c) => c.alpha,
            Calibration::Cqr(c) => c.alpha,
        }
    }
}

/// Outcome of one test pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub covered: bool,
    pub area: f64,
    /// Number of regions in the set (density methods) or 1 (CQR box).
    pub size: usize,
    /// Hard-assigned region of the target, if any.
    pub assigned: Option<usize>,
}

/// Calibrated predictor, borrowed from a model and its calibration.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Density { model: &'a DensityModel, q_hat: f64 },
    Cqr { model: &'a CqrModel, cal: &'a CqrCalibration },
}

impl Predictor<'_> {
    /// Assesses every row. Consecutive rows with identical features share
    /// one prediction set.
    pub fn assess_all(&self, features: &Matrix, targets: &Matrix) -> Result<Vec<Assessment>> {
        check_dim(features.rows(), targets.rows())?;
        let mut out = Vec::with_capacity(targets.rows());
        match *self {
            Predictor::Density { model, q_hat } => {
                let mut cached: Option<(&[f64], crate::conformal::PredictionRegion)> = None;
                for (x, y) in features.iter_rows().zip(targets.iter_rows()) {
                    if !matches!(&cached, Some((cx, _)) if *cx == x) {
                        let region = Ranking::new(&model.region_probabilities(x)?)
                            .region(&model.areas, q_hat)?;
                        cached = Some((x, region));
                    }
                    let region = &cached.as_ref().unwrap().1;
                    let assigned = model
                        .protos
                        .bbox()
                        .contains(y)
                        .then(|| crate::quantizer::hard_assign(y, &model.protos))
                        .transpose()?;
                    out.push(Assessment {
                        covered: model.region_contains(region, y)?,
                        area: region.total_area,
                        size: region.len(),
                        assigned,
                    });
                }
            }
            Predictor::Cqr { model, cal } => {
                for (x, y) in features.iter_rows().zip(targets.iter_rows()) {
                    let region = cqr_predict(model, cal, x)?;
                    out.push(Assessment {
                        covered: region.contains(y),
                        area: region.area(),
                        size: 1,
                        assigned: None,
                    });
                }
            }
        }
        Ok(out)
    }
}

//! Conformalized high-density quantile regression.
//!
//! Targets are quantized onto learnable prototypes whose bounded Voronoi
//! cells act as classes. A network predicts a log-density per cell; cell
//! areas turn those into probabilities, and split-conformal calibration
//! over density-ranked cells yields prediction sets with marginal coverage.
//!
//! ```no_run
//! use chdqr::{config::Method, data, pipeline::TrainedModel, training::TrainConfig};
//!
//! let ds = data::gen_uncond1d(10_000, 0)?;
//! let splits = data::split(&ds, &data::SplitSpec::standard(0))?;
//! let model = TrainedModel::train(Method::ChdqrDynamic, &splits.train, &TrainConfig::default(), 0.1, 0)?;
//! let cal = model.calibrate(&splits.cal, 0.1)?;
//! let outcome = model.predictor(&cal)?.assess_all(&splits.test.features, &splits.test.targets)?;
//! println!("coverage {}", chdqr::evaluation::coverage(&outcome)?);
//! # Ok::<(), chdqr::Error>(())
//! ```

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod conformal;
pub mod data;
pub mod density;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod matrix;
pub mod nn;
pub mod pipeline;
pub mod quantizer;
pub mod rng;
pub mod training;

pub use config::{Config, Method};
pub use conformal::{CalibrationResult, DensityModel, PredictionRegion};
pub use data::{Dataset, SplitSpec};
pub use density::{DensityNetwork, RegionProbabilities};
pub use error::{Error, ErrorKind, Result};
pub use geometry::{AreaVector, BoundingBox, VoronoiCell};
pub use matrix::Matrix;
pub use quantizer::{PrototypeSet, SoftLabel};
pub use training::{TrainConfig, TrainState};

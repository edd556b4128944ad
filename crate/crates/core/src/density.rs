//! Log-density network over the prototype regions.
//!
//! The network outputs one log-density per region. Region probabilities
//! follow from adding the log cell area and normalizing:
//! `P_i = exp(f_i + log A_i) / sum_j exp(f_j + log A_j)`.
//! Areas enter as constants; no gradient flows through them.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::geometry::AreaVector;
use crate::nn::{Architecture, Mlp};

/// Network whose head has exactly one row per prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityNetwork {
    mlp: Mlp,
}

impl DensityNetwork {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        regions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let arch = Architecture {
            input_dim,
            hidden: hidden.to_vec(),
            outputs: regions,
        };
        Ok(Self {
            mlp: Mlp::new(&arch, rng)?,
        })
    }

    pub fn from_mlp(mlp: Mlp) -> Self {
        Self { mlp }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn regions(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    /// Per-region log-densities for an already standardized input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mlp.forward(x)
    }

    pub fn region_probabilities(&self, x: &[f64], areas: &AreaVector) -> Result<RegionProbabilities> {
        RegionProbabilities::from_log_density(self.forward(x)?, areas)
    }

    /// Drops output unit `i`; the remaining logits are untouched.
    pub fn remove_output_unit(&mut self, i: usize, k_min: usize) -> Result<()> {
        let k = self.regions();
        if i >= k {
            return Err(Error::IndexOutOfRange { index: i, len: k });
        }
        if k <= k_min {
            return Err(Error::PrototypeLimit(format!(
                "cannot remove a unit at the minimum of {k_min}"
            )));
        }
        self.mlp.remove_output(i)
    }

    /// Appends an exact copy of output unit `i`.
    pub fn add_output_unit(&mut self, i: usize, k_max: usize) -> Result<()> {
        let k = self.regions();
        if k >= k_max {
            return Err(Error::PrototypeLimit(format!(
                "cannot add a unit at the maximum of {k_max}"
            )));
        }
        self.mlp.duplicate_output(i)
    }
}

/// Log-densities and the normalized region probabilities they induce.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionProbabilities {
    pub log_density: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
}

impl RegionProbabilities {
    /// Log-sum-exp normalization of `log_density + log A`.
    pub fn from_log_density(log_density: Vec<f64>, areas: &AreaVector) -> Result<Self> {
        check_dim(log_density.len(), areas.len())?;
        if let Some(a) = areas.as_slice().iter().find(|a| !(**a > 0.0)) {
            return Err(Error::DegenerateTessellation(format!(
                "region area {a} is not positive"
            )));
        }
        let logits: Vec<f64> = log_density
            .iter()
            .zip(areas.as_slice())
            .map(|(f, a)| f + a.ln())
            .collect();
        let log_probs = log_softmax(&logits);
        if log_probs.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("region probabilities are NaN".into()));
        }
        let probs = log_probs.iter().map(|v| v.exp()).collect();
        Ok(Self {
            log_density,
            log_probs,
            probs,
        })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

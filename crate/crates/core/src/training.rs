//! Composite loss, the alternating parameter/prototype updates and the
//! prototype add/remove dynamics.
//!
//! Gradient routing: the cross-entropy term trains the network only (soft
//! labels and log areas are constants); the quantization and repulsion
//! terms move the prototypes only.

use std::collections::HashMap;

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{build_grid, GridSpec};
use crate::data::{Dataset, Standardizer};
use crate::density::{log_softmax, DensityNetwork, RegionProbabilities};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{compute_bounding_box, AreaVector, BoundingBox, DUPLICATE_DISTANCE};
use crate::matrix::Matrix;
use crate::nn::{Adam, AdamConfig, Gradients, RowAdam};
use crate::quantizer::{self, soft_assign, PrototypeSet, SoftLabel};
use crate::rng::{self, Gaussian, StreamRng};

/// Resampling attempts for a jittered prototype that lands on another one.
pub const MAX_JITTER_ATTEMPTS: usize = 10;

/// User-facing training settings. Loss and dynamics scales left as `None`
/// are derived from the data at fit time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    /// Initial prototype count; defaults to `grid_bins^d`.
    pub k_init: Option<usize>,
    pub grid_bins: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_theta: f64,
    /// Prototype step size in standardized target units.
    pub lr_c: f64,
    pub box_padding: f64,
    pub lambda_q: f64,
    pub lambda_rep: f64,
    /// Repulsion range in target units; defaults to half the mean spacing
    /// `(box volume / K_init)^(1/d)`.
    pub delta_rep: Option<f64>,
    /// Soft-label temperature in standardized target units.
    pub tau: f64,
    /// `delta_add = add_factor / K`.
    pub add_factor: f64,
    /// `delta_del = del_factor / K`.
    pub del_factor: f64,
    /// Jitter scale of cloned prototypes in target units; defaults to
    /// `0.25 * delta_rep`.
    pub jitter: Option<f64>,
    pub k_min: usize,
    pub k_max: usize,
    /// Run the dynamics every `cadence` epochs.
    pub cadence: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            k_init: None,
            grid_bins: 50,
            epochs: 200,
            batch_size: 256,
            lr_theta: 1e-3,
            lr_c: 1e-2,
            box_padding: 0.1,
            lambda_q: 1.0,
            lambda_rep: 0.1,
            delta_rep: None,
            tau: 0.1,
            add_factor: 5.0,
            del_factor: 0.1,
            jitter: None,
            k_min: 2,
            k_max: 10_000,
            cadence: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        positive("lr_theta", self.lr_theta)?;
        positive("lr_c", self.lr_c)?;
        positive("tau", self.tau)?;
        positive("add_factor", self.add_factor)?;
        non_negative("del_factor", self.del_factor)?;
        non_negative("lambda_q", self.lambda_q)?;
        non_negative("lambda_rep", self.lambda_rep)?;
        non_negative("box_padding", self.box_padding)?;
        if let Some(d) = self.delta_rep {
            positive("delta_rep", d)?;
        }
        if let Some(s) = self.jitter {
            positive("jitter", s)?;
        }
        if self.del_factor >= self.add_factor {
            return Err(Error::Config(format!(
                "del_factor ({}) must be below add_factor ({})",
                self.del_factor, self.add_factor
            )));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid hidden sizes {:?}", self.hidden)));
        }
        if self.batch_size == 0 || self.cadence == 0 {
            return Err(Error::Config("batch_size and cadence must be >= 1".into()));
        }
        if self.grid_bins < 2 {
            return Err(Error::Config(format!("grid_bins must be >= 2, got {}", self.grid_bins)));
        }
        if self.k_min < 2 || self.k_min > self.k_max {
            return Err(Error::Config(format!(
                "need 2 <= k_min <= k_max, got {} and {}",
                self.k_min, self.k_max
            )));
        }
        if let Some(k) = self.k_init {
            if k < self.k_min || k > self.k_max {
                return Err(Error::Config(format!(
                    "k_init {k} outside [{}, {}]",
                    self.k_min, self.k_max
                )));
            }
        }
        Ok(())
    }

    pub fn k_init_for(&self, dim: usize) -> usize {
        self.k_init.unwrap_or_else(|| self.grid_bins.pow(dim as u32))
    }
}

/// How prototypes are placed and whether they move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Frozen lattice.
    Grid,
    /// Learnable prototypes, fixed count.
    Static,
    /// Learnable prototypes with add/remove.
    Dynamic,
}

/// Loss weights and scales, all in target units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_q: f64,
    pub lambda_rep: f64,
    pub delta_rep: f64,
    pub tau: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_q >= 0.0
            && self.lambda_rep >= 0.0
            && self.delta_rep > 0.0
            && self.tau > 0.0
            && [self.lambda_q, self.lambda_rep, self.delta_rep, self.tau]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss configuration {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub add_factor: f64,
    pub del_factor: f64,
    /// Jitter standard deviation, target units.
    pub sigma: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub cadence: usize,
}

impl DynamicsConfig {
    /// `(delta_add, delta_del)` for the current prototype count.
    pub fn thresholds(&self, k: usize) -> (f64, f64) {
        let k = k as f64;
        ((self.add_factor / k).min(1.0), self.del_factor / k)
    }
}

/// Cross-entropy `-sum q_i log P_i`, evaluated from log-probabilities.
pub fn loss_cross_entropy(probs: &RegionProbabilities, label: &SoftLabel) -> Result<f64> {
    check_dim(probs.len(), label.probs.len())?;
    Ok(cross_entropy(&probs.log_probs, &label.probs))
}

fn cross_entropy(log_probs: &[f64], q: &[f64]) -> f64 {
    -q.iter()
        .zip(log_probs)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, lp)| q * lp)
        .sum::<f64>()
}

/// Distance to the nearest prototype, that prototype's index and the
/// gradient of the distance with respect to its coordinates (zero when `y`
/// sits on it).
pub fn loss_quantization(y: &[f64], protos: &PrototypeSet) -> Result<(f64, usize, Vec<f64>)> {
    let i = quantizer::hard_assign(y, protos)?;
    let c = protos.get(i);
    let dist = c
        .iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let grad = if dist > 0.0 {
        c.iter().zip(y).map(|(a, b)| (a - b) / dist).collect()
    } else {
        vec![0.0; y.len()]
    };
    Ok((dist, i, grad))
}

/// `sum_{i != j} max(0, delta - ||c_i - c_j||)` over ordered pairs, with its
/// gradient. Coincident pairs contribute value but no gradient.
pub fn loss_repulsion(coords: &Matrix, delta: f64) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(coords.rows(), coords.cols());
    let mut value = 0.0;
    for (i, j, d) in neighbor_pairs(coords, delta) {
        value += 2.0 * (delta - d);
        if d > 0.0 {
            for k in 0..coords.cols() {
                let u = (coords.get(i, k) - coords.get(j, k)) / d;
                grad.row_mut(i)[k] -= 2.0 * u;
                grad.row_mut(j)[k] += 2.0 * u;
            }
        }
    }
    (value, grad)
}

/// All pairs `(i, j, distance)` with `i < j` and distance strictly below
/// `radius`, sorted by `(i, j)`. Uses a uniform cell list, so the cost is
/// linear in K for well-spread points.
pub fn neighbor_pairs(coords: &Matrix, radius: f64) -> Vec<(usize, usize, f64)> {
    let k = coords.rows();
    let d = coords.cols();
    if k < 2 || !(radius > 0.0) {
        return Vec::new();
    }
    let key = |p: &[f64]| -> [i64; 2] {
        let mut out = [0i64; 2];
        for j in 0..d.min(2) {
            out[j] = (p[j] / radius).floor() as i64;
        }
        out
    };
    let mut cells: HashMap<[i64; 2], Vec<usize>> = HashMap::new();
    for i in 0..k {
        cells.entry(key(coords.row(i))).or_default().push(i);
    }
    let dist = |a: usize, b: usize| -> f64 {
        coords
            .row(a)
            .iter()
            .zip(coords.row(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let offsets: &[i64] = &[-1, 0, 1];
    let mut pairs = Vec::new();
    for i in 0..k {
        let base = key(coords.row(i));
        for &dx in offsets {
            for &dy in if d >= 2 { offsets } else { &[0] } {
                let Some(bucket) = cells.get(&[base[0] + dx, base[1] + dy]) else {
                    continue;
                };
                for &j in bucket {
                    if j > i {
                        let r = dist(i, j);
                        if r < radius {
                            pairs.push((i, j, r));
                        }
                    }
                }
            }
        }
    }
    pairs.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    pairs
}

/// Batch loss and both gradients.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub cross_entropy: f64,
    pub quantization: f64,
    pub repulsion: f64,
    /// Gradient of the mean cross-entropy with respect to the network.
    pub grad_theta: Gradients,
    /// Gradient of `lambda_q * L_q + lambda_rep * L_rep` with respect to
    /// the prototype coordinates.
    pub grad_c: Matrix,
}

/// Composite loss over `rows` of (standardized features, targets).
///
/// Rows with bitwise-identical features share one forward and backward
/// pass; the result equals the per-row sum.
pub fn total_loss(
    features: &Matrix,
    targets: &Matrix,
    rows: &[usize],
    net: &DensityNetwork,
    protos: &PrototypeSet,
    areas: &AreaVector,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if rows.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    check_dim(net.regions(), protos.len())?;
    check_dim(net.regions(), areas.len())?;
    check_dim(protos.dim(), targets.cols())?;
    let k = protos.len();
    let d = protos.dim();
    let inv_b = 1.0 / rows.len() as f64;
    let log_areas = areas.log_areas();

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    for &r in rows {
        let bits: Vec<u64> = features.row(r).iter().map(|v| v.to_bits()).collect();
        let g = *index.entry(bits).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(r);
    }

    let mut grad_theta = net.mlp().zero_gradients();
    let mut grad_c = Matrix::zeros(k, d);
    let mut ce = 0.0;
    let mut lq = 0.0;
    let mut q = vec![0.0; k];
    let mut q_sum = vec![0.0; k];
    for members in &groups {
        let trace = net.mlp().forward_trace(features.row(members[0]))?;
        let logits: Vec<f64> = trace
            .output
            .iter()
            .zip(&log_areas)
            .map(|(f, a)| f + a)
            .collect();
        let log_probs = log_softmax(&logits);
        q_sum.iter_mut().for_each(|v| *v = 0.0);
        for &r in members {
            let y = targets.row(r);
            let (nearest, dist) = soft_assign(y, protos.coords(), cfg.tau, &mut q);
            ce += cross_entropy(&log_probs, &q);
            for (s, v) in q_sum.iter_mut().zip(&q) {
                *s += v;
            }
            lq += dist;
            if dist > 0.0 {
                let c = protos.get(nearest).to_vec();
                let g = grad_c.row_mut(nearest);
                for j in 0..d {
                    g[j] += cfg.lambda_q * inv_b * (c[j] - y[j]) / dist;
                }
            }
        }
        let m = members.len() as f64;
        let d_out: Vec<f64> = log_probs
            .iter()
            .zip(&q_sum)
            .map(|(lp, s)| (m * lp.exp() - s) * inv_b)
            .collect();
        net.mlp().backward(&trace, &d_out, &mut grad_theta);
    }
    let (rep, rep_grad) = loss_repulsion(protos.coords(), cfg.delta_rep);
    if cfg.lambda_rep > 0.0 {
        for (g, r) in grad_c.as_mut_slice().iter_mut().zip(rep_grad.as_slice()) {
            *g += cfg.lambda_rep * r;
        }
    }
    let ce = ce * inv_b;
    let lq = lq * inv_b;
    let loss = ce + cfg.lambda_q * lq + cfg.lambda_rep * rep;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (ce {ce}, quantization {lq}, repulsion {rep})"
        )));
    }
    Ok(LossOutput {
        loss,
        cross_entropy: ce,
        quantization: lq,
        repulsion: rep,
        grad_theta,
        grad_c,
    })
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub cross_entropy: f64,
    pub quantization: f64,
    pub repulsion: f64,
    pub k: usize,
    pub added: usize,
    pub removed: usize,
}

/// Outcome of one add/remove pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DynamicsReport {
    pub added: usize,
    pub removed: usize,
    pub skipped: usize,
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: DensityNetwork,
    pub protos: PrototypeSet,
    pub areas: AreaVector,
    pub epoch: usize,
    pub seed: u64,
    pub variant: Variant,
    pub loss: LossConfig,
    pub dynamics: Option<DynamicsConfig>,
    /// Feature standardization fitted on the training split.
    pub scaler: Standardizer,
    /// Per-dimension standard deviation of the training targets.
    pub target_std: Vec<f64>,
    pub history: Vec<EpochRecord>,
    batch_size: usize,
    opt_theta: Adam,
    opt_c: Option<RowAdam>,
    shuffle_rng: StreamRng,
    dynamics_rng: StreamRng,
}

/// Geometric mean of per-dimension standard deviations.
pub fn target_scale(std: &[f64]) -> f64 {
    (std.iter().map(|s| s.ln()).sum::<f64>() / std.len() as f64).exp()
}

impl TrainState {
    /// Builds the initial state: bounding box, prototypes, areas, network
    /// and optimizers. No training happens here.
    pub fn new(train: &Dataset, cfg: &TrainConfig, variant: Variant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = train.target_dim();
        let scaler = Standardizer::fit(&train.features);
        let target_std = Standardizer::fit(&train.targets).std;
        let scale = target_scale(&target_std);
        let bbox = compute_bounding_box(&train.targets, cfg.box_padding)?;
        let k_init = match variant {
            Variant::Grid => cfg.grid_bins.pow(d as u32),
            _ => cfg.k_init_for(d),
        };
        let delta_rep = cfg
            .delta_rep
            .unwrap_or_else(|| 0.5 * (bbox.volume() / k_init as f64).powf(1.0 / d as f64));
        let loss = LossConfig {
            lambda_q: cfg.lambda_q,
            lambda_rep: cfg.lambda_rep,
            delta_rep,
            tau: cfg.tau * scale,
        };
        loss.validate()?;
        let protos = match variant {
            Variant::Grid => build_grid(&GridSpec {
                bins_per_dim: cfg.grid_bins,
                bbox: bbox.clone(),
            })?
            .0,
            _ => init_prototypes(&train.targets, &bbox, k_init, seed)?,
        };
        let areas = protos.voronoi_areas()?;
        let net = DensityNetwork::new(
            train.feature_dim(),
            &cfg.hidden,
            protos.len(),
            &mut rng::seeded(seed, rng::stream::NETWORK_INIT),
        )?;
        let opt_theta = Adam::new(AdamConfig::with_learning_rate(cfg.lr_theta), net.mlp());
        let opt_c = protos.is_learnable().then(|| {
            RowAdam::new(
                AdamConfig::with_learning_rate(cfg.lr_c),
                protos.len(),
                target_std.clone(),
            )
        });
        let dynamics = (variant == Variant::Dynamic).then(|| DynamicsConfig {
            add_factor: cfg.add_factor,
            del_factor: cfg.del_factor,
            sigma: cfg.jitter.unwrap_or(0.25 * delta_rep),
            k_min: cfg.k_min,
            k_max: cfg.k_max,
            cadence: cfg.cadence,
        });
        Ok(Self {
            net,
            protos,
            areas,
            epoch: 0,
            seed,
            variant,
            loss,
            dynamics,
            scaler,
            target_std,
            history: Vec::new(),
            batch_size: cfg.batch_size,
            opt_theta,
            opt_c,
            shuffle_rng: rng::seeded(seed, rng::stream::SHUFFLE),
            dynamics_rng: rng::seeded(seed, rng::stream::DYNAMICS),
        })
    }

    pub fn k(&self) -> usize {
        self.protos.len()
    }

    pub fn bbox(&self) -> &BoundingBox {
        self.protos.bbox()
    }

    /// One pass over the (already standardized) training rows, followed
    /// by area recomputation and, when due, the add/remove pass.
    pub fn train_epoch(&mut self, features: &Matrix, targets: &Matrix) -> Result<EpochRecord> {
        let n = targets.rows();
        let order = rng::permutation(n, &mut self.shuffle_rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        for (b, rows) in order.chunks(self.batch_size).enumerate() {
            let out = total_loss(
                features,
                targets,
                rows,
                &self.net,
                &self.protos,
                &self.areas,
                &self.loss,
            )
            .map_err(|e| e.context(format!("epoch {} batch {b}", self.epoch)))?;
            self.opt_theta
                .apply(self.net.mlp_mut(), &out.grad_theta)
                .map_err(|e| e.context(format!("epoch {} batch {b}", self.epoch)))?;
            if let Some(opt) = self.opt_c.as_mut() {
                let mut result = Ok(());
                self.protos
                    .update_coords(|c| result = opt.apply(c, &out.grad_c));
                result.map_err(|e| e.context(format!("epoch {} batch {b}", self.epoch)))?;
            }
            sums[0] += out.loss;
            sums[1] += out.cross_entropy;
            sums[2] += out.quantization;
            sums[3] += out.repulsion;
            batches += 1;
        }
        if self.protos.is_learnable() {
            self.resolve_collisions()?;
            self.areas = self.protos.voronoi_areas()?;
        }
        let mut report = DynamicsReport::default();
        if let Some(dynamics) = self.dynamics {
            if (self.epoch + 1) % dynamics.cadence == 0 {
                report = self.add_remove_prototypes(targets)?;
            }
        }
        let nb = batches.max(1) as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            loss: sums[0] / nb,
            cross_entropy: sums[1] / nb,
            quantization: sums[2] / nb,
            repulsion: sums[3] / nb,
            k: self.k(),
            added: report.added,
            removed: report.removed,
        };
        debug!(
            "epoch {} loss {:.5} K {} (+{} -{})",
            record.epoch, record.loss, record.k, record.added, record.removed
        );
        self.history.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// Jitters the higher-indexed member of any coincident pair.
    fn resolve_collisions(&mut self) -> Result<()> {
        let mut g = Gaussian::new();
        let scale = 1e-6 * (0..self.protos.dim())
            .map(|j| self.bbox().extent(j))
            .fold(0.0, f64::max);
        for _ in 0..self.protos.len() * MAX_JITTER_ATTEMPTS {
            let Some((_, b)) = self.protos.find_coincident() else {
                return Ok(());
            };
            warn!("prototypes collided at index {b}; jittering");
            let rng = &mut self.dynamics_rng;
            self.protos.update_coords(|c| {
                for v in c.row_mut(b) {
                    *v += scale * g.sample(rng);
                }
            });
        }
        Err(Error::DegenerateTessellation(
            "could not separate coincident prototypes".into(),
        ))
    }

    /// Deletes under-used prototypes (descending index, not below `k_min`),
    /// then clones over-used survivors with Gaussian jitter (not above
    /// `k_max`), and recomputes the areas.
    pub fn add_remove_prototypes(&mut self, targets: &Matrix) -> Result<DynamicsReport> {
        let dynamics = self
            .dynamics
            .ok_or_else(|| Error::Config("prototype dynamics are disabled".into()))?;
        let mut usage = quantizer::usage(&self.protos, targets, self.loss.tau)?;
        let (add_t, del_t) = dynamics.thresholds(self.k());
        let mut report = DynamicsReport::default();

        for i in (0..self.k()).rev() {
            if self.k() <= dynamics.k_min {
                break;
            }
            if usage[i] <= del_t {
                self.protos.remove(i)?;
                self.net.remove_output_unit(i, dynamics.k_min)?;
                self.opt_theta.remove_head_row(i)?;
                if let Some(opt) = self.opt_c.as_mut() {
                    opt.remove_row(i)?;
                }
                usage.remove(i);
                report.removed += 1;
            }
        }

        let survivors = self.k();
        let mut g = Gaussian::new();
        for i in 0..survivors {
            if usage[i] < add_t {
                continue;
            }
            if self.k() >= dynamics.k_max {
                break;
            }
            let parent = self.protos.get(i).to_vec();
            let mut placed = false;
            for _ in 0..MAX_JITTER_ATTEMPTS {
                let mut child: Vec<f64> = parent
                    .iter()
                    .map(|c| c + dynamics.sigma * g.sample(&mut self.dynamics_rng))
                    .collect();
                self.protos.bbox().clamp(&mut child);
                if self.is_clear(&child) {
                    self.protos.push(&child)?;
                    placed = true;
                    break;
                }
            }
            if !placed {
                report.skipped += 1;
                continue;
            }
            self.net.add_output_unit(i, dynamics.k_max)?;
            self.opt_theta.push_head_row()?;
            if let Some(opt) = self.opt_c.as_mut() {
                opt.push_row()?;
            }
            report.added += 1;
        }
        self.areas = self.protos.voronoi_areas()?;
        Ok(report)
    }

    fn is_clear(&self, p: &[f64]) -> bool {
        self.protos.coords().iter_rows().all(|c| {
            c.iter()
                .zip(p)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
                >= DUPLICATE_DISTANCE
        })
    }

    /// Checks the lockstep invariant between prototypes, areas, network
    /// head and optimizer state.
    pub fn check_consistency(&self) -> Result<()> {
        let k = self.k();
        check_dim(k, self.areas.len())?;
        check_dim(k, self.net.regions())?;
        check_dim(k, self.opt_theta.head_rows())?;
        if let Some(opt) = &self.opt_c {
            check_dim(k, opt.rows())?;
        }
        Ok(())
    }
}

/// `k` training targets drawn without replacement, jittered by 1% of the
/// box extent and clamped. Falls back to uniform placement in the box
/// when there are fewer targets than prototypes.
pub fn init_prototypes(
    targets: &Matrix,
    bbox: &BoundingBox,
    k: usize,
    seed: u64,
) -> Result<PrototypeSet> {
    check_dim(bbox.dim(), targets.cols())?;
    let d = bbox.dim();
    let mut r = rng::seeded(seed, rng::stream::PROTOTYPE_INIT);
    let mut g = Gaussian::new();
    let mut coords = Matrix::zeros(0, d);
    if k <= targets.rows() {
        let perm = rng::permutation(targets.rows(), &mut r);
        for &i in &perm[..k] {
            let mut p: Vec<f64> = (0..d)
                .map(|j| targets.get(i, j) + 0.01 * bbox.extent(j) * g.sample(&mut r))
                .collect();
            bbox.clamp(&mut p);
            coords.push_row(&p)?;
        }
    } else {
        for _ in 0..k {
            let p: Vec<f64> = (0..d)
                .map(|j| bbox.lower()[j] + r.random::<f64>() * bbox.extent(j))
                .collect();
            coords.push_row(&p)?;
        }
    }
    PrototypeSet::new(coords, bbox.clone())
}

/// Trains for `cfg.epochs` epochs and returns the final state.
pub fn fit(train: &Dataset, cfg: &TrainConfig, variant: Variant, seed: u64) -> Result<TrainState> {
    let mut state = TrainState::new(train, cfg, variant, seed)?;
    let features = state.scaler.apply_all(&train.features);
    for _ in 0..cfg.epochs {
        state.train_epoch(&features, &train.targets)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_uncond1d;
    use crate::geometry::BoundingBox;

    fn protos(rows: &[&[f64]], lo: f64, hi: f64) -> PrototypeSet {
        let d = rows[0].len();
        PrototypeSet::new(
            Matrix::from_rows(rows).unwrap(),
            BoundingBox::new(vec![lo; d], vec![hi; d]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let areas = AreaVector::new(vec![1.0; 4], 4.0).unwrap();
        let p = RegionProbabilities::from_log_density(vec![0.0; 4], &areas).unwrap();
        let q = SoftLabel {
            probs: vec![0.25; 4],
            temperature: 1.0,
        };
        assert!((loss_cross_entropy(&p, &q).unwrap() - 4f64.ln()).abs() < 1e-12);
        let p = RegionProbabilities::from_log_density(vec![800.0, 0.0], &AreaVector::new(vec![1.0, 1.0], 2.0).unwrap()).unwrap();
        let q = SoftLabel {
            probs: vec![1.0, 0.0],
            temperature: 1.0,
        };
        assert_eq!(loss_cross_entropy(&p, &q).unwrap(), 0.0);
    }

    #[test]
    fn quantization_examples() {
        let p = protos(&[&[0.0], &[1.0]], -1.0, 2.0);
        let (v, i, g) = loss_quantization(&[0.4], &p).unwrap();
        assert!((v - 0.4).abs() < 1e-15);
        assert_eq!(i, 0);
        // Descending along -g moves the prototype toward y.
        assert!(-g[0] > 0.0);
        let (v, _, g) = loss_quantization(&[1.0], &p).unwrap();
        assert_eq!((v, g), (0.0, vec![0.0]));
    }

    #[test]
    fn repulsion_examples() {
        let far = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0]]).unwrap();
        assert_eq!(loss_repulsion(&far, 0.5).0, 0.0);
        let same = Matrix::from_rows(&[[0.3, 0.3], [0.3, 0.3]]).unwrap();
        assert!((loss_repulsion(&same, 0.1).0 - 0.2).abs() < 1e-15);

        let mut close = Matrix::from_rows(&[[0.0, 0.0], [0.05, 0.0], [3.0, 3.0]]).unwrap();
        let (_, g) = loss_repulsion(&close, 0.1);
        for (c, d) in close.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *c -= 0.01 * d;
        }
        assert!(close.get(1, 0) - close.get(0, 0) > 0.05);
    }

    #[test]
    fn neighbor_pairs_match_brute_force() {
        let mut r = rng::seeded(3, 0);
        for d in 1..=2 {
            let pts = Matrix::from_vec(
                200,
                d,
                (0..200 * d).map(|_| r.random_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            let mut brute = Vec::new();
            for i in 0..200 {
                for j in i + 1..200 {
                    let dist = pts
                        .row(i)
                        .iter()
                        .zip(pts.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    if dist < 0.3 {
                        brute.push((i, j, dist));
                    }
                }
            }
            assert_eq!(neighbor_pairs(&pts, 0.3), brute);
        }
    }

    #[test]
    fn zero_weights_reduce_to_cross_entropy() {
        let ds = gen_uncond1d(64, 1).unwrap();
        let cfg = TrainConfig {
            k_init: Some(8),
            ..TrainConfig::default()
        };
        let state = TrainState::new(&ds, &cfg, Variant::Static, 0).unwrap();
        let loss = LossConfig {
            lambda_q: 0.0,
            lambda_rep: 0.0,
            ..state.loss
        };
        let rows: Vec<usize> = (0..64).collect();
        let out = total_loss(&ds.features, &ds.targets, &rows, &state.net, &state.protos, &state.areas, &loss).unwrap();
        assert_eq!(out.loss, out.cross_entropy);
        assert!(out.grad_c.as_slice().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn grouped_pass_equals_per_row_sum() {
        let ds = gen_uncond1d(40, 2).unwrap();
        let cfg = TrainConfig {
            k_init: Some(6),
            hidden: vec![5],
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&ds, &cfg, Variant::Static, 0).unwrap();
        let mut r = rng::seeded(1, 0);
        for p in state.net.mlp_mut().params_mut() {
            *p = r.random_range(-1.0..1.0);
        }
        let rows: Vec<usize> = (0..40).collect();
        let all = total_loss(&ds.features, &ds.targets, &rows, &state.net, &state.protos, &state.areas, &state.loss).unwrap();
        let mut ce = 0.0;
        let mut grads: Vec<f64> = vec![0.0; state.net.mlp().num_params()];
        for &r in &rows {
            let one = total_loss(&ds.features, &ds.targets, &[r], &state.net, &state.protos, &state.areas, &state.loss).unwrap();
            ce += one.cross_entropy / 40.0;
            for (g, v) in grads.iter_mut().zip(one.grad_theta.values()) {
                *g += v / 40.0;
            }
        }
        assert!((ce - all.cross_entropy).abs() < 1e-12);
        for (a, b) in grads.iter().zip(all.grad_theta.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let ds = gen_uncond1d(50, 1).unwrap();
        let cfg = TrainConfig {
            k_init: Some(5),
            epochs: 0,
            ..TrainConfig::default()
        };
        let a = fit(&ds, &cfg, Variant::Dynamic, 4).unwrap();
        let b = TrainState::new(&ds, &cfg, Variant::Dynamic, 4).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.protos, b.protos);
        assert!(a.history.is_empty());
    }

    #[test]
    fn uniform_usage_keeps_prototypes() {
        let targets = Matrix::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let ds = Dataset::new(
            "t",
            Matrix::zeros(4, 1),
            targets.clone(),
            crate::data::Provenance {
                source: "test".into(),
                details: serde_json::Value::Null,
                notes: vec![],
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            k_init: Some(4),
            tau: 1e-6,
            add_factor: 2.0,
            del_factor: 0.5,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&ds, &cfg, Variant::Dynamic, 0).unwrap();
        let before = state.protos.clone();
        let report = state.add_remove_prototypes(&targets).unwrap();
        assert_eq!(report, DynamicsReport::default());
        assert_eq!(state.protos, before);
    }

    #[test]
    fn dead_prototype_is_removed_in_lockstep() {
        let targets = Matrix::from_rows(&[[0.0], [0.1], [1.0], [1.1]]).unwrap();
        let ds = Dataset::new(
            "t",
            Matrix::zeros(4, 1),
            targets.clone(),
            crate::data::Provenance {
                source: "test".into(),
                details: serde_json::Value::Null,
                notes: vec![],
            },
        )
        .unwrap();
        let cfg = TrainConfig {
            k_init: Some(2),
            tau: 1e-3,
            del_factor: 1e-4 * 3.0,
            add_factor: 3.0,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&ds, &cfg, Variant::Dynamic, 0).unwrap();
        // Three prototypes, one far from every target.
        let coords = Matrix::from_rows(&[[0.05], [1.05], [0.6]]).unwrap();
        state.protos = PrototypeSet::new(coords, state.protos.bbox().clone()).unwrap();
        state.areas = state.protos.voronoi_areas().unwrap();
        state.net.add_output_unit(0, 10).unwrap();
        state.opt_theta.push_head_row().unwrap();
        state.opt_c.as_mut().unwrap().push_row().unwrap();
        state.check_consistency().unwrap();

        let report = state.add_remove_prototypes(&targets).unwrap();
        assert_eq!(report.removed, 1);
        assert_eq!(state.k(), 2);
        assert_eq!(state.protos.coords().as_slice(), &[0.05, 1.05]);
        state.check_consistency().unwrap();
    }

    #[test]
    fn static_variant_keeps_k_and_is_deterministic() {
        let ds = gen_uncond1d(200, 3).unwrap();
        let cfg = TrainConfig {
            k_init: Some(10),
            epochs: 3,
            hidden: vec![8],
            batch_size: 32,
            ..TrainConfig::default()
        };
        let a = fit(&ds, &cfg, Variant::Static, 9).unwrap();
        let b = fit(&ds, &cfg, Variant::Static, 9).unwrap();
        assert_eq!(a.k(), 10);
        assert_eq!(a.net, b.net);
        assert_eq!(a.protos, b.protos);
        assert_eq!(a.history, b.history);
        a.check_consistency().unwrap();
    }
}

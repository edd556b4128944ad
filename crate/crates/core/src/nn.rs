//! Small fully connected network with ReLU hidden layers and a linear head,
//! forward/backward passes written out by hand, and an Adam optimizer whose
//! state can be resized together with the head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::matrix::Matrix;

/// Affine layer `out = W in + b`, `W` is `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and bias.
    fn fan_in_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-bound..bound);
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-bound..bound);
        }
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn apply(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .iter_rows()
                .zip(&self.bias)
                .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b),
        );
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .as_mut_slice()
            .iter_mut()
            .chain(self.bias.iter_mut())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub outputs: usize,
}

/// ReLU multilayer perceptron; the last layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Activations recorded during a forward pass, consumed by [`Mlp::backward`].
#[derive(Clone, Debug)]
pub struct Trace {
    /// Input of every layer; entry 0 is the network input.
    inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Hidden layers get fan-in uniform init; the head starts at zero.
    pub fn new<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.outputs == 0 || arch.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid architecture {arch:?}")));
        }
        let mut layers = Vec::with_capacity(arch.hidden.len() + 1);
        let mut inputs = arch.input_dim;
        for &h in &arch.hidden {
            layers.push(Layer::fan_in_uniform(inputs, h, rng));
            inputs = h;
        }
        layers.push(Layer::zeros(inputs, arch.outputs));
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Data("network has no layers".into()));
        }
        for w in layers.windows(2) {
            check_dim(w[0].outputs(), w[1].inputs())?;
        }
        for l in &layers {
            check_dim(l.outputs(), l.bias.len())?;
        }
        Ok(Self { layers })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(Layer::outputs)
                .collect(),
            outputs: self.output_dim(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.head().outputs()
    }

    pub fn head(&self) -> &Layer {
        self.layers.last().expect("network has a head")
    }

    fn head_mut(&mut self) -> &mut Layer {
        self.layers.last_mut().expect("network has a head")
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        check_dim(self.input_dim(), x.len())?;
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Data("network input contains non-finite values".into()))
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        let mut out = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            layer.apply(inputs.last().unwrap(), &mut out);
            if li + 1 < self.layers.len() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
                inputs.push(std::mem::take(&mut out));
            }
        }
        Ok(Trace {
            inputs,
            output: out,
        })
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d output`.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grads: &mut Gradients) {
        debug_assert_eq!(d_out.len(), self.output_dim());
        let mut delta = d_out.to_vec();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &trace.inputs[li];
            let g = &mut grads.layers[li];
            for (o, &dv) in delta.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                g.bias[o] += dv;
                for (gw, &x) in g.weights.row_mut(o).iter_mut().zip(input) {
                    *gw += dv * x;
                }
            }
            if li == 0 {
                break;
            }
            // Back through W, then through the ReLU that produced `input`.
            let mut next = vec![0.0; layer.inputs()];
            for (o, &dv) in delta.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for (n, &w) in next.iter_mut().zip(layer.weights.row(o)) {
                    *n += dv * w;
                }
            }
            for (n, &a) in next.iter_mut().zip(input) {
                if a <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
    }

    /// Sign pattern of every hidden pre-activation; gradient checks use it
    /// to detect finite-difference steps that cross a ReLU kink.
    pub fn activation_pattern(&self, x: &[f64]) -> Result<Vec<bool>> {
        self.check_input(x)?;
        let mut pattern = Vec::new();
        let mut h = x.to_vec();
        let mut out = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            layer.apply(&h, &mut out);
            pattern.extend(out.iter().map(|v| *v > 0.0));
            h = out.iter().map(|v| v.max(0.0)).collect();
        }
        Ok(pattern)
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer (weights row-major, then bias).
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::values)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(Layer::values_mut)
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(|v| v.is_finite())
    }

    pub fn remove_output(&mut self, i: usize) -> Result<()> {
        let head = self.head_mut();
        head.weights.remove_row(i)?;
        head.bias.remove(i);
        Ok(())
    }

    /// Appends a copy of output unit `i`.
    pub fn duplicate_output(&mut self, i: usize) -> Result<()> {
        let head = self.head_mut();
        if i >= head.outputs() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: head.outputs(),
            });
        }
        let row = head.weights.row(i).to_vec();
        head.weights.push_row(&row)?;
        let b = head.bias[i];
        head.bias.push(b);
        Ok(())
    }
}

/// Parameter-shaped gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    layers: Vec<Layer>,
}

impl Gradients {
    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Layer::values)
    }

    pub fn scale(&mut self, s: f64) {
        self.layers
            .iter_mut()
            .flat_map(Layer::values_mut)
            .for_each(|v| *v *= s);
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update over a flat parameter slice. `lr_scale` multiplies the
/// step per coordinate (cycled), letting callers express step sizes in
/// rescaled units.
pub(crate) fn adam_update(
    cfg: &AdamConfig,
    t: u64,
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr_scale: &[f64],
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (idx, (((p, &g), m), v)) in params
        .iter_mut()
        .zip(grads)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
        .enumerate()
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        let scale = if lr_scale.is_empty() {
            1.0
        } else {
            lr_scale[idx % lr_scale.len()]
        };
        *p -= cfg.learning_rate * scale * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Adam state for an [`Mlp`]. Moments are stored per layer so the head rows
/// can follow output-unit surgery.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl Adam {
    pub fn new(config: AdamConfig, net: &Mlp) -> Self {
        let zeros = net.zero_gradients().layers;
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Non-finite gradients abort before any parameter
    /// changes.
    pub fn apply(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: net.layers.len(),
                found: grads.layers.len(),
            });
        }
        for (g, l) in grads.layers.iter().zip(&net.layers) {
            check_dim(l.weights.as_slice().len(), g.weights.as_slice().len())?;
            check_dim(l.bias.len(), g.bias.len())?;
        }
        if !grads.all_finite() {
            return Err(Error::Numeric(
                "non-finite network gradient, step skipped".into(),
            ));
        }
        self.step += 1;
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[li], &mut self.v[li], &grads.layers[li]);
            adam_update(
                &self.config,
                self.step,
                layer.weights.as_mut_slice(),
                g.weights.as_slice(),
                m.weights.as_mut_slice(),
                v.weights.as_mut_slice(),
                &[],
            );
            adam_update(
                &self.config,
                self.step,
                &mut layer.bias,
                &g.bias,
                &mut m.bias,
                &mut v.bias,
                &[],
            );
        }
        Ok(())
    }

    pub fn remove_head_row(&mut self, i: usize) -> Result<()> {
        for s in [&mut self.m, &mut self.v] {
            let head = s.last_mut().unwrap();
            head.weights.remove_row(i)?;
            head.bias.remove(i);
        }
        Ok(())
    }

    /// New head rows start with zero moments.
    pub fn push_head_row(&mut self) -> Result<()> {
        for s in [&mut self.m, &mut self.v] {
            let head = s.last_mut().unwrap();
            let zeros = vec![0.0; head.inputs()];
            head.weights.push_row(&zeros)?;
            head.bias.push(0.0);
        }
        Ok(())
    }

    pub fn head_rows(&self) -> usize {
        self.m.last().unwrap().outputs()
    }
}

/// Adam over the rows of a coordinate matrix (prototype positions).
#[derive(Clone, Debug, PartialEq)]
pub struct RowAdam {
    pub config: AdamConfig,
    step: u64,
    m: Matrix,
    v: Matrix,
    /// Per-column step multiplier.
    column_scale: Vec<f64>,
}

impl RowAdam {
    pub fn new(config: AdamConfig, rows: usize, column_scale: Vec<f64>) -> Self {
        let cols = column_scale.len();
        Self {
            config,
            step: 0,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            column_scale,
        }
    }

    pub fn rows(&self) -> usize {
        self.m.rows()
    }

    pub fn apply(&mut self, params: &mut Matrix, grads: &Matrix) -> Result<()> {
        check_dim(self.m.rows(), params.rows())?;
        check_dim(self.m.rows(), grads.rows())?;
        check_dim(self.m.cols(), grads.cols())?;
        if !grads.all_finite() {
            return Err(Error::Numeric(
                "non-finite prototype gradient, step skipped".into(),
            ));
        }
        self.step += 1;
        adam_update(
            &self.config,
            self.step,
            params.as_mut_slice(),
            grads.as_slice(),
            self.m.as_mut_slice(),
            self.v.as_mut_slice(),
            &self.column_scale,
        );
        Ok(())
    }

    pub fn remove_row(&mut self, i: usize) -> Result<()> {
        self.m.remove_row(i)?;
        self.v.remove_row(i)
    }

    pub fn push_row(&mut self) -> Result<()> {
        let zeros = vec![0.0; self.m.cols()];
        self.m.push_row(&zeros)?;
        self.v.push_row(&zeros)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn net(seed: u64) -> Mlp {
        let arch = Architecture {
            input_dim: 3,
            hidden: vec![5, 4],
            outputs: 3,
        };
        let mut r = seeded(seed, 0);
        let mut n = Mlp::new(&arch, &mut r).unwrap();
        for p in n.layers.last_mut().unwrap().values_mut() {
            *p = r.random_range(-1.0..1.0);
        }
        n
    }

    #[test]
    fn zero_head_outputs_bias() {
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![8],
            outputs: 4,
        };
        let n = Mlp::new(&arch, &mut seeded(1, 0)).unwrap();
        assert_eq!(n.forward(&[0.3, -2.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let n = net(1);
        assert!(n.forward(&[1.0]).is_err());
        assert!(n.forward(&[1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn output_surgery() {
        let mut n = net(2);
        let x = [0.1, -0.7, 1.2];
        let before = n.forward(&x).unwrap();
        n.duplicate_output(1).unwrap();
        let after = n.forward(&x).unwrap();
        assert_eq!(after[3], after[1]);
        assert_eq!(&after[..3], &before[..]);
        n.remove_output(3).unwrap();
        assert_eq!(n.forward(&x).unwrap(), before);
        assert!(n.duplicate_output(7).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut n = net(3);
        let before = n.clone();
        let mut opt = Adam::new(AdamConfig::with_learning_rate(0.1), &n);
        let zero = n.zero_gradients();
        opt.apply(&mut n, &zero).unwrap();
        assert_eq!(n, before);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut n = net(3);
        let before = n.clone();
        let mut g = n.zero_gradients();
        g.layers[0].bias[0] = f64::NAN;
        let mut opt = Adam::new(AdamConfig::with_learning_rate(0.1), &n);
        assert!(opt.apply(&mut n, &g).is_err());
        assert_eq!(n, before);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn adam_descends_scalar_quadratic() {
        // f(theta) = theta^2 / 2, gradient theta.
        let mut theta = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let mut opt = RowAdam::new(AdamConfig::with_learning_rate(0.1), 1, vec![1.0]);
        let g = theta.clone();
        opt.apply(&mut theta, &g).unwrap();
        assert!(theta.get(0, 0) < 1.0);
    }

    #[test]
    fn adam_head_rows_follow_surgery() {
        let n = net(4);
        let mut opt = Adam::new(AdamConfig::with_learning_rate(0.1), &n);
        opt.push_head_row().unwrap();
        assert_eq!(opt.head_rows(), 4);
        opt.remove_head_row(0).unwrap();
        assert_eq!(opt.head_rows(), 3);
    }
}

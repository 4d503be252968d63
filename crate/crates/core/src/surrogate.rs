//! Dense forward surrogate `μ(x, z)` and the homoscedastic noise model.

use std::io::{self, BufRead, Write};

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("network needs at least an input and an output width")]
    EmptyWidths,
    #[error("input width {expected} does not match {got}")]
    InputWidth { expected: usize, got: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("checkpoint parse error on line {line}: {message}")]
    Checkpoint { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, SurrogateError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Self::Relu => x.max(0.0),
            Self::Tanh => x.tanh(),
        }
    }

    fn record(self, v: &Var) -> Var {
        match self {
            Self::Sigmoid => v.sigmoid(),
            Self::Relu => v.relu(),
            Self::Tanh => v.tanh(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sigmoid" => Some(Self::Sigmoid),
            "relu" => Some(Self::Relu),
            "tanh" => Some(Self::Tanh),
            _ => None,
        }
    }
}

/// What the network sees besides the spatial coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSpec {
    /// Input is `[x, y, z_1..z_d]`.
    CoordinatesAndLatent,
    /// Input is `[x, y]`; latent dependence enters only through the operator.
    CoordinatesOnly,
}

/// Fully connected network with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    /// Weight `l` is `widths[l] x widths[l+1]`.
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    /// Fixed multiplier on the output.
    output_scale: f64,
}

/// Network parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    activation: Activation,
    output_scale: f64,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut m = Self::zeros(widths, activation)?;
        for (l, w) in m.weights.iter_mut().enumerate() {
            let bound = glorot_bound(widths[l], widths[l + 1]);
            w.data.iter_mut().for_each(|x| *x = rng.random_range(-bound..=bound));
        }
        Ok(m)
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(SurrogateError::EmptyWidths);
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            weights: widths.windows(2).map(|w| Tensor::zeros(w[0], w[1])).collect(),
            biases: widths[1..].iter().map(|&n| Tensor::zeros(1, n)).collect(),
            output_scale: 1.0,
        })
    }

    pub fn with_output_scale(mut self, s: f64) -> Self {
        self.output_scale = s;
        self
    }

    pub fn output_scale(&self) -> f64 {
        self.output_scale
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Tensor] {
        &mut self.biases
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    /// Parameters flattened layer by layer, weights then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(&b.data);
        }
        out
    }

    pub fn set_params_flat(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let nw = w.len();
            w.data.copy_from_slice(&p[k..k + nw]);
            k += nw;
            let nb = b.len();
            b.data.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
    }

    /// Evaluates one input row.
    pub fn eval(&self, input: &[f64]) -> Result<f64> {
        Ok(self.eval_batch(&Tensor::new(1, input.len(), input.to_vec()))?[0])
    }

    /// Evaluates every row of `inputs` (`m x input_width`).
    pub fn eval_batch(&self, inputs: &Tensor) -> Result<Vec<f64>> {
        if inputs.cols != self.input_width() {
            return Err(SurrogateError::InputWidth {
                expected: self.input_width(),
                got: inputs.cols,
            });
        }
        let m = inputs.rows;
        let mut h = inputs.data.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = vec![0.0; m * w.cols];
            crate::autodiff::matmul_into(&h, &w.data, &mut next, m, w.rows, w.cols);
            for row in next.chunks_mut(w.cols) {
                for (x, bias) in row.iter_mut().zip(&b.data) {
                    *x += bias;
                    if l < last {
                        *x = self.activation.apply(*x);
                    }
                }
            }
            h = next;
        }
        Ok(h.into_iter().map(|v| self.output_scale * v).collect())
    }

    /// Records the parameters as differentiable leaves.
    pub fn record(&self, tape: &Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.var(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.var(b.clone())).collect(),
            activation: self.activation,
            output_scale: self.output_scale,
        }
    }

    /// Writes `name,rows,cols,values` rows with space-separated values.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "name,rows,cols,values")?;
        let act = match self.activation {
            Activation::Sigmoid => 0.0,
            Activation::Relu => 1.0,
            Activation::Tanh => 2.0,
        };
        writeln!(out, "activation,1,1,{act:?}")?;
        writeln!(out, "output_scale,1,1,{:?}", self.output_scale)?;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            for (name, t) in [(format!("w{l}"), w), (format!("b{l}"), b)] {
                let vals: Vec<String> = t.data.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{name},{},{},{}", t.rows, t.cols, vals.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Self> {
        let err = |line: usize, message: &str| SurrogateError::Checkpoint {
            line,
            message: message.to_string(),
        };
        let mut activation = Activation::Sigmoid;
        let mut output_scale = 1.0;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (k, line) in input.lines().enumerate() {
            let line = line.map_err(|e| err(k + 1, &e.to_string()))?;
            if k == 0 || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.splitn(4, ',').collect();
            if f.len() != 4 {
                return Err(err(k + 1, "expected four fields"));
            }
            let rows: usize = f[1].parse().map_err(|_| err(k + 1, "bad rows"))?;
            let cols: usize = f[2].parse().map_err(|_| err(k + 1, "bad cols"))?;
            let data: Vec<f64> = f[3]
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| err(k + 1, "bad value"))?;
            if data.len() != rows * cols {
                return Err(err(k + 1, "value count does not match shape"));
            }
            match f[0] {
                "activation" => {
                    activation = match data[0] as i64 {
                        0 => Activation::Sigmoid,
                        1 => Activation::Relu,
                        2 => Activation::Tanh,
                        _ => return Err(err(k + 1, "unknown activation")),
                    }
                }
                "output_scale" => output_scale = data[0],
                name if name.starts_with('w') => weights.push(Tensor::new(rows, cols, data)),
                name if name.starts_with('b') => biases.push(Tensor::new(rows, cols, data)),
                _ => return Err(err(k + 1, "unknown tensor name")),
            }
        }
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(err(0, "mismatched weight and bias counts"));
        }
        let mut widths = vec![weights[0].rows];
        for (w, b) in weights.iter().zip(&biases) {
            if w.rows != *widths.last().unwrap() || b.cols != w.cols {
                return Err(err(0, "inconsistent layer shapes"));
            }
            widths.push(w.cols);
        }
        Ok(Self {
            widths,
            activation,
            weights,
            biases,
            output_scale,
        })
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl MlpVars {
    pub fn all(&self) -> Vec<&Var> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Gradients in the same flat order as [`Mlp::params_flat`].
    pub fn flat_gradient(grads: &[Tensor]) -> Vec<f64> {
        grads.iter().flat_map(|g| g.data.iter().copied()).collect()
    }

    /// Taped forward pass of an `m x input_width` batch; returns `m x 1`.
    pub fn forward(&self, inputs: &Var) -> Result<Var> {
        let mut h = inputs.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(w)?.add_row_broadcast(b)?;
            if l < last {
                h = self.activation.record(&h);
            }
        }
        Ok(if self.output_scale == 1.0 {
            h
        } else {
            h.scale(self.output_scale)
        })
    }

    /// `μ(x̄_i, z)` for each row of `coords` (a constant `m x 2`); `z` is `1 x d` or absent.
    pub fn forward_points(&self, coords: &Var, z: Option<&Var>) -> Result<Var> {
        let inputs = match z {
            Some(z) => {
                let (m, _) = coords.shape();
                let zr = z.reshape(1, z.shape().0 * z.shape().1)?;
                coords.concat_cols(&zr.tile_rows(m)?)?
            }
            None => coords.clone(),
        };
        self.forward(&inputs)
    }
}

/// Stacked `[x, y, z...]` rows for the given points.
pub fn stack_inputs(points: &[[f64; 2]], z: Option<&[f64]>) -> Tensor {
    let d = z.map_or(0, <[f64]>::len);
    let mut data = Vec::with_capacity(points.len() * (2 + d));
    for p in points {
        data.extend_from_slice(p);
        if let Some(z) = z {
            data.extend_from_slice(z);
        }
    }
    Tensor::new(points.len(), 2 + d, data)
}

/// Surrogate values at every mesh node.
pub fn forward_nodes(mlp: &Mlp, mesh: &crate::mesh::TriMesh, z: Option<&[f64]>) -> Result<Vec<f64>> {
    mlp.eval_batch(&stack_inputs(mesh.nodes(), z))
}

/// `σ² = exp(2 log σ)`, shared by all sensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub log_sigma: f64,
}

impl NoiseModel {
    pub fn new(sigma: f64) -> Self {
        Self { log_sigma: sigma.ln() }
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    pub fn variance(&self) -> f64 {
        (2.0 * self.log_sigma).exp()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bound_for_single_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = Mlp::init(&[4, 1], Activation::Tanh, &mut rng).unwrap();
        let b = (6.0f64 / 5.0).sqrt();
        assert_eq!(glorot_bound(4, 1), b);
        assert!(m.weights()[0].data.iter().all(|w| w.abs() <= b));
        assert!(m.biases()[0].data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_network() {
        let a = Mlp::init(&[4, 8, 1], Activation::Sigmoid, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let b = Mlp::init(&[4, 8, 1], Activation::Sigmoid, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert!(Mlp::init(&[4], Activation::Sigmoid, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
    }

    #[test]
    fn zero_network_returns_bias() {
        let mut m = Mlp::zeros(&[2, 3, 1], Activation::Relu).unwrap();
        m.biases_mut()[1].data[0] = 0.75;
        assert_eq!(m.eval(&[0.0, 0.0]).unwrap(), 0.75);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut m = Mlp::zeros(&[3, 1], Activation::Sigmoid).unwrap();
        m.weights_mut()[0].data.copy_from_slice(&[1.0, -2.0, 0.5]);
        m.biases_mut()[0].data[0] = 0.25;
        assert_eq!(m.eval(&[2.0, 1.0, 4.0]).unwrap(), 2.0 - 2.0 + 2.0 + 0.25);
        assert!(matches!(m.eval(&[1.0]), Err(SurrogateError::InputWidth { .. })));
    }

    #[test]
    fn sigmoid_saturates() {
        let mut m = Mlp::zeros(&[1, 1, 1], Activation::Sigmoid).unwrap();
        m.weights_mut()[0].data[0] = 1.0;
        m.weights_mut()[1].data[0] = 1.0;
        assert!((m.eval(&[50.0]).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn taped_forward_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Mlp::init(&[4, 6, 6, 1], Activation::Tanh, &mut rng).unwrap().with_output_scale(3.0);
        let pts = [[0.1, 0.2], [0.5, 0.9], [1.0, 0.0]];
        let z = [0.3, -0.4];
        let plain = m.eval_batch(&stack_inputs(&pts, Some(&z))).unwrap();
        let tape = Tape::new();
        let vars = m.record(&tape);
        let coords = tape.constant(stack_inputs(&pts, None));
        let zv = tape.vector(z.to_vec());
        let out = vars.forward_points(&coords, Some(&zv)).unwrap().value();
        assert_eq!(out.data, plain);
        let single: Vec<f64> = pts.iter().map(|p| m.eval(&[p[0], p[1], z[0], z[1]]).unwrap()).collect();
        assert_eq!(single, plain);
    }

    #[test]
    fn flat_params_round_trip() {
        let mut m = Mlp::init(&[2, 3, 1], Activation::Tanh, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let p = m.params_flat();
        assert_eq!(p.len(), m.n_params());
        let mut q = p.clone();
        q[0] += 1.0;
        m.set_params_flat(&q);
        assert_eq!(m.params_flat(), q);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = Mlp::init(&[4, 5, 1], Activation::Relu, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap()
            .with_output_scale(0.5);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(Mlp::read_checkpoint(&buf[..]).unwrap(), m);
    }

    #[test]
    fn noise_model_variance() {
        let n = NoiseModel::new(0.5);
        assert!((n.variance() - 0.25).abs() < 1e-15);
    }
}

//! Small feed-forward classifier trained with backpropagation and Adam.
//!
//! Fully hand-rolled: the network is a handful of dense layers with
//! sigmoid activations, a softmax output, and cross-entropy loss. Weights
//! initialize Glorot-uniform from a seeded ChaCha stream, dropout uses
//! inverted scaling at training time, and training runs full-batch, so a
//! (data, config, seed) triple always reproduces the same weights and
//! loss curve bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Matrix {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix {
            rows: r,
            cols: c,
            data,
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self (n x k) times other (k x m).
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.at(k, j);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *out.at_mut(j, i) = self.at(i, j);
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One dense layer: weights are (input x output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// The network: sigmoid on every hidden layer, softmax at the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer gradients, shaped like the network.
pub struct Gradients {
    pub layers: Vec<Layer>,
}

/// Cached forward state needed by backpropagation.
pub struct ForwardPass {
    /// Layer inputs: activations[0] is the batch input, then each hidden
    /// activation after dropout.
    pub activations: Vec<Matrix>,
    /// Softmax probabilities, one row per sample.
    pub probs: Matrix,
    /// Dropout masks (scaled) per hidden layer, when training.
    masks: Vec<Option<Vec<f64>>>,
}

impl Mlp {
    /// Glorot-uniform initialization over the given layer sizes
    /// (input, hidden..., classes).
    pub fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Mlp {
        assert!(dims.len() >= 2);
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut m = Matrix::zeros(fan_in, fan_out);
            for v in &mut m.data {
                *v = rng.random_range(-limit..=limit);
            }
            layers.push(Layer {
                w: m,
                b: vec![0.0; fan_out],
            });
        }
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.cols
    }

    /// Forward pass. `dropout` is (rate, rng) during training; inference
    /// passes `None` and needs no rescaling thanks to inverted dropout.
    pub fn forward(&self, x: &Matrix, mut dropout: Option<(f64, &mut ChaCha8Rng)>) -> ForwardPass {
        assert_eq!(x.cols, self.input_dim());
        let mut activations = vec![x.clone()];
        let mut masks = Vec::new();
        let last = self.layers.len() - 1;

        let mut current = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul(&layer.w);
            for r in 0..z.rows {
                for c in 0..z.cols {
                    *z.at_mut(r, c) += layer.b[c];
                }
            }
            if li == last {
                let probs = softmax_rows(&z);
                return ForwardPass {
                    activations,
                    probs,
                    masks,
                };
            }
            for v in &mut z.data {
                *v = sigmoid(*v);
            }
            let mask = match dropout.as_mut() {
                Some((rate, rng)) if *rate > 0.0 => {
                    let keep = 1.0 - *rate;
                    let mask: Vec<f64> = (0..z.data.len())
                        .map(|_| {
                            if rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    for (v, m) in z.data.iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    Some(mask)
                }
                _ => None,
            };
            masks.push(mask);
            activations.push(z.clone());
            current = z;
        }
        unreachable!("loop returns at the output layer")
    }

    /// Mean cross-entropy of the true labels under the softmax output.
    pub fn loss(probs: &Matrix, labels: &[usize]) -> f64 {
        assert_eq!(probs.rows, labels.len());
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            total -= probs.at(r, y).max(1e-12).ln();
        }
        total / labels.len() as f64
    }

    /// Backpropagation for softmax + cross-entropy.
    pub fn backward(&self, pass: &ForwardPass, labels: &[usize]) -> Gradients {
        let n = labels.len();
        let nf = n as f64;

        // dL/dz at the output: (p - onehot) / n.
        let mut delta = pass.probs.clone();
        for (r, &y) in labels.iter().enumerate() {
            *delta.at_mut(r, y) -= 1.0;
        }
        for v in &mut delta.data {
            *v /= nf;
        }

        let mut grads: Vec<Layer> = self
            .layers
            .iter()
            .map(|l| Layer {
                w: Matrix::zeros(l.w.rows, l.w.cols),
                b: vec![0.0; l.b.len()],
            })
            .collect();

        for li in (0..self.layers.len()).rev() {
            let input = &pass.activations[li];
            let gw = input.transpose().matmul(&delta);
            grads[li].w = gw;
            for c in 0..delta.cols {
                let mut s = 0.0;
                for r in 0..delta.rows {
                    s += delta.at(r, c);
                }
                grads[li].b[c] = s;
            }
            if li == 0 {
                break;
            }
            // Propagate through the weights, then the dropout mask and the
            // sigmoid derivative a(1-a) of the previous activation.
            let mut prev = delta.matmul(&self.layers[li].w.transpose());
            let act = &pass.activations[li];
            if let Some(mask) = &pass.masks[li - 1] {
                // act already includes the mask scaling; recover the raw
                // sigmoid output a = act / mask where kept, 0 where dropped.
                for i in 0..prev.data.len() {
                    let m = mask[i];
                    if m == 0.0 {
                        prev.data[i] = 0.0;
                    } else {
                        let a = act.data[i] / m;
                        prev.data[i] *= m * a * (1.0 - a);
                    }
                }
            } else {
                for i in 0..prev.data.len() {
                    let a = act.data[i];
                    prev.data[i] *= a * (1.0 - a);
                }
            }
            delta = prev;
        }

        Gradients { layers: grads }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.data.len() + l.b.len())
            .sum()
    }

    pub fn get_param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.w.data.len() {
                return l.w.data[idx];
            }
            idx -= l.w.data.len();
            if idx < l.b.len() {
                return l.b[idx];
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for l in &mut self.layers {
            if idx < l.w.data.len() {
                l.w.data[idx] = value;
                return;
            }
            idx -= l.w.data.len();
            if idx < l.b.len() {
                l.b[idx] = value;
                return;
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range");
    }
}

impl Gradients {
    pub fn get(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.w.data.len() {
                return l.w.data[idx];
            }
            idx -= l.w.data.len();
            if idx < l.b.len() {
                return l.b[idx];
            }
            idx -= l.b.len();
        }
        panic!("gradient index out of range");
    }
}

fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z.rows, z.cols);
    for r in 0..z.rows {
        let row = z.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (c, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            *out.at_mut(r, c) = e;
            sum += e;
        }
        for c in 0..z.cols {
            *out.at_mut(r, c) /= sum;
        }
    }
    out
}

/// Adam optimizer state, one slot per parameter.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: usize) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..model.param_count() {
            let g = grads.get(i);
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
            model.set_param(i, model.get_param(i) - update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = Matrix::from_rows(vec![vec![1.0, 2.0, 3.0], vec![-5.0, 0.0, 5.0]]);
        let p = softmax_rows(&z);
        for r in 0..p.rows {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(p.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let mlp = Mlp {
            layers: vec![
                Layer {
                    w: Matrix::zeros(3, 4),
                    b: vec![0.0; 4],
                },
                Layer {
                    w: Matrix::zeros(4, 5),
                    b: vec![0.0; 5],
                },
            ],
        };
        let x = Matrix::from_rows(vec![vec![0.3, -0.2, 0.9]]);
        let pass = mlp.forward(&x, None);
        for c in 0..5 {
            assert!((pass.probs.at(0, c) - 0.2).abs() < 1e-12);
        }
        // Uniform prediction loss is ln(C).
        let loss = Mlp::loss(&pass.probs, &[0]);
        assert!((loss - 5.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_is_nonnegative_and_argmax_ties_break_by_index() {
        let probs = Matrix::from_rows(vec![vec![0.25, 0.25, 0.25, 0.25]]);
        assert!(Mlp::loss(&probs, &[2]) >= 0.0);
        let argmax = probs
            .row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        assert_eq!(argmax, Some(0));
    }
}

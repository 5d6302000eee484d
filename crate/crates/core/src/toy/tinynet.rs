//! Two-layer tanh perceptron with softmax cross-entropy.
//!
//! Labels come from a linear teacher that looks at only the first
//! `informative` input features, so most first-layer weights are dispensable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Problem;
use crate::error::{dim, param, Result};
use crate::tensor::WeightTensor;

pub const FC1_WEIGHT: &str = "fc1.weight";
pub const FC1_BIAS: &str = "fc1.bias";
pub const FC2_WEIGHT: &str = "fc2.weight";
pub const FC2_BIAS: &str = "fc2.bias";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TinyNetSpec {
    pub d_in: usize,
    pub hidden: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub informative: usize,
    pub seed: u64,
}

impl Default for TinyNetSpec {
    fn default() -> Self {
        Self {
            d_in: 32,
            hidden: 16,
            classes: 3,
            n_train: 384,
            n_test: 128,
            informative: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyNetProblem {
    pub spec: TinyNetSpec,
    x_train: Vec<f64>,
    y_train: Vec<usize>,
    x_test: Vec<f64>,
    y_test: Vec<usize>,
}

struct Forward {
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl TinyNetProblem {
    pub fn generate(spec: TinyNetSpec) -> Result<Self> {
        if spec.d_in == 0 || spec.hidden == 0 || spec.classes < 2 || spec.n_train == 0 {
            return Err(param("tiny net needs d_in, hidden, n_train >= 1 and classes >= 2"));
        }
        if spec.informative == 0 || spec.informative > spec.d_in {
            return Err(param("informative features must lie in 1..=d_in"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let teacher: Vec<f64> = (0..spec.classes * spec.informative)
            .map(|_| 2.0 * normal.sample(&mut rng))
            .collect();
        let mut draw = |count: usize| {
            let x: Vec<f64> = (0..count * spec.d_in).map(|_| normal.sample(&mut rng)).collect();
            let y = (0..count)
                .map(|i| {
                    let row = &x[i * spec.d_in..i * spec.d_in + spec.informative];
                    argmax((0..spec.classes).map(|c| {
                        teacher[c * spec.informative..(c + 1) * spec.informative]
                            .iter()
                            .zip(row)
                            .map(|(t, v)| t * v)
                            .sum::<f64>()
                    }))
                })
                .collect();
            (x, y)
        };
        let (x_train, y_train) = draw(spec.n_train);
        let (x_test, y_test) = draw(spec.n_test);
        Ok(Self {
            spec,
            x_train,
            y_train,
            x_test,
            y_test,
        })
    }

    fn split(&self, split: Split) -> (&[f64], &[usize]) {
        match split {
            Split::Train => (&self.x_train, &self.y_train),
            Split::Test => (&self.x_test, &self.y_test),
        }
    }

    fn check(&self, params: &[WeightTensor]) -> Result<()> {
        let s = &self.spec;
        let want = [
            (FC1_WEIGHT, s.hidden, s.d_in),
            (FC1_BIAS, s.hidden, 1),
            (FC2_WEIGHT, s.classes, s.hidden),
            (FC2_BIAS, s.classes, 1),
        ];
        if params.len() != 4 {
            return Err(dim(format!("tiny net takes 4 tensors, got {}", params.len())));
        }
        for (t, (name, r, c)) in params.iter().zip(want) {
            if t.name != name || t.shape() != (r, c) {
                return Err(dim(format!(
                    "expected `{name}` {r}x{c}, got `{}` {}x{}",
                    t.name, t.rows, t.cols
                )));
            }
        }
        Ok(())
    }

    fn forward(&self, params: &[WeightTensor], x: &[f64]) -> Forward {
        let s = &self.spec;
        let (w1, b1, w2, b2) = (&params[0].data, &params[1].data, &params[2].data, &params[3].data);
        let hidden: Vec<f64> = (0..s.hidden)
            .map(|h| {
                let pre: f64 = b1[h] + (0..s.d_in).map(|j| w1[h * s.d_in + j] * x[j]).sum::<f64>();
                pre.tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..s.classes)
            .map(|c| b2[c] + (0..s.hidden).map(|h| w2[c * s.hidden + h] * hidden[h]).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        Forward {
            hidden,
            probs: exps.into_iter().map(|e| e / z).collect(),
        }
    }

    pub fn accuracy(&self, params: &[WeightTensor], split: Split) -> Result<f64> {
        self.check(params)?;
        let (x, y) = self.split(split);
        if y.is_empty() {
            return Ok(0.0);
        }
        let d = self.spec.d_in;
        let correct = y
            .iter()
            .enumerate()
            .filter(|(i, label)| argmax(self.forward(params, &x[i * d..(i + 1) * d]).probs.into_iter()) == **label)
            .count();
        Ok(correct as f64 / y.len() as f64)
    }

    /// Mean cross-entropy and gradients over a split.
    pub fn loss_and_grad_on(&self, params: &[WeightTensor], split: Split) -> Result<(f64, Vec<Vec<f64>>)> {
        self.check(params)?;
        let s = &self.spec;
        let (x, y) = self.split(split);
        let w2 = &params[2].data;
        let mut g = [
            vec![0.0; s.hidden * s.d_in],
            vec![0.0; s.hidden],
            vec![0.0; s.classes * s.hidden],
            vec![0.0; s.classes],
        ];
        let inv_n = 1.0 / y.len() as f64;
        let mut loss = 0.0;
        let mut dhidden = vec![0.0; s.hidden];
        for (i, &label) in y.iter().enumerate() {
            let xi = &x[i * s.d_in..(i + 1) * s.d_in];
            let f = self.forward(params, xi);
            loss -= f.probs[label].max(f64::MIN_POSITIVE).ln() * inv_n;
            dhidden.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..s.classes {
                let dlogit = (f.probs[c] - if c == label { 1.0 } else { 0.0 }) * inv_n;
                g[3][c] += dlogit;
                for h in 0..s.hidden {
                    g[2][c * s.hidden + h] += dlogit * f.hidden[h];
                    dhidden[h] += dlogit * w2[c * s.hidden + h];
                }
            }
            for h in 0..s.hidden {
                let dpre = dhidden[h] * (1.0 - f.hidden[h] * f.hidden[h]);
                g[1][h] += dpre;
                for j in 0..s.d_in {
                    g[0][h * s.d_in + j] += dpre * xi[j];
                }
            }
        }
        Ok((loss, g.into()))
    }

    /// Seeded `N(0, 1/fan_in)` initialization; biases start at zero.
    pub fn init_params(&self, seed: u64) -> Vec<WeightTensor> {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let mut layer = |rows: usize, cols: usize| {
            let normal = Normal::new(0.0, 1.0 / (cols as f64).sqrt()).expect("positive std");
            (0..rows * cols).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>()
        };
        let w1 = layer(s.hidden, s.d_in);
        let w2 = layer(s.classes, s.hidden);
        vec![
            WeightTensor::new(FC1_WEIGHT, s.hidden, s.d_in, w1).expect("shape"),
            WeightTensor::zeros(FC1_BIAS, s.hidden, 1),
            WeightTensor::new(FC2_WEIGHT, s.classes, s.hidden, w2).expect("shape"),
            WeightTensor::zeros(FC2_BIAS, s.classes, 1),
        ]
    }
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in it.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl Problem for TinyNetProblem {
    fn initial_params(&self) -> Vec<WeightTensor> {
        self.init_params(self.spec.seed)
    }

    fn loss_and_grad(&self, params: &[WeightTensor]) -> Result<(f64, Vec<Vec<f64>>)> {
        self.loss_and_grad_on(params, Split::Train)
    }
}

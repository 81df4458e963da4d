//! Small building blocks shared by the learned modules: parameter traversal,
//! dense layers, layer normalization and initializers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numerics::{GradientTape, Gradients, Matrix, Var};

/// Anything that owns trainable matrices.
///
/// `collect` and `collect_mut` must visit parameters in the same order.
pub trait Parameterized {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>);

    fn parameters(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        self.collect_mut(&mut out);
        out
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, m)| m.len()).sum()
    }

    /// Gradients for every parameter in `collect` order; zeros for unused ones.
    fn gradients(&self, tape: &GradientTape, grads: &Gradients) -> Vec<Matrix> {
        self.parameters()
            .into_iter()
            .map(|(_, p)| match tape.param_var(p) {
                Some(v) => grads.wrt(v),
                None => Matrix::zeros(p.rows(), p.cols()),
            })
            .collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("finite init")
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite init")
}

/// Affine map `y = x·W + b` on row vectors; `W` is in×out.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: glorot_uniform(rng, fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, tape: &mut GradientTape, x: Var) -> Var {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// Plain evaluation on one row vector.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.data().to_vec();
        for (i, &xi) in x.iter().enumerate() {
            for (o, w) in y.iter_mut().zip(self.weight.row(i)) {
                *o += xi * w;
            }
        }
        y
    }
}

impl Parameterized for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
        }
    }

    pub fn forward(&self, tape: &mut GradientTape, x: Var) -> Var {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.layer_norm(x, g, b)
    }
}

impl Parameterized for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

/// Two dense layers with a GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            first: Linear::new(rng, input, hidden),
            second: Linear::new(rng, hidden, output),
        }
    }

    pub fn forward(&self, tape: &mut GradientTape, x: Var) -> Var {
        let h = self.first.forward(tape, x);
        let h = tape.gelu(h);
        self.second.forward(tape, h)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self
            .first
            .apply(x)
            .into_iter()
            .map(crate::numerics::gelu)
            .collect();
        self.second.apply(&h)
    }
}

impl Parameterized for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        self.first.collect(&join(prefix, "first"), out);
        self.second.collect(&join(prefix, "second"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.first.collect_mut(out);
        self.second.collect_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_respects_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = glorot_uniform(&mut rng, 10, 20);
        let limit = (6.0f64 / 30.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn tape_and_plain_mlp_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::new(&mut rng, 3, 5, 2);
        let x = [0.3, -1.0, 0.8];
        let mut tape = GradientTape::new();
        let xv = tape.constant(Matrix::row_vector(&x));
        let y = mlp.forward(&mut tape, xv);
        let plain = mlp.apply(&x);
        for (a, b) in tape.value(y).data().iter().zip(&plain) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_lists_line_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mlp = Mlp::new(&mut rng, 3, 4, 2);
        let shapes: Vec<_> = mlp.parameters().iter().map(|(_, m)| m.shape()).collect();
        let names: Vec<_> = mlp.parameters().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names[0], "first.weight");
        let mut_shapes: Vec<_> = mlp.parameters_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, mut_shapes);
        assert_eq!(mlp.parameter_count(), 3 * 4 + 4 + 4 * 2 + 2);
    }
}

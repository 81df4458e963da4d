//! Multi-expert semantic projection: a dense softmax gate mixing `E`
//! two-layer experts that map an item embedding into the model width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Linear, Mlp, Parameterized};
use crate::numerics::{softmax_rows, GradientTape, Matrix, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MspParams {
    pub experts: Vec<Mlp>,
    /// `None` for the single wide expert, which is used ungated.
    pub gate: Option<Linear>,
}

impl MspParams {
    /// `experts` gated experts, each `d → d_m → d_m`.
    pub fn new(rng: &mut impl Rng, d: usize, d_m: usize, experts: usize) -> Result<Self> {
        if experts == 0 || d == 0 || d_m == 0 {
            return Err(Error::Config(format!(
                "MSP needs positive sizes (d={d}, d_m={d_m}, E={experts})"
            )));
        }
        let gate = Linear::new(rng, d, experts);
        let experts = (0..experts).map(|_| Mlp::new(rng, d, d_m, d_m)).collect();
        Ok(MspParams {
            experts,
            gate: Some(gate),
        })
    }

    /// One ungated expert with hidden width `experts · d_m`, matching the
    /// mixture's parameter budget.
    pub fn single_expert(rng: &mut impl Rng, d: usize, d_m: usize, experts: usize) -> Result<Self> {
        if experts == 0 || d == 0 || d_m == 0 {
            return Err(Error::Config(format!(
                "MSP needs positive sizes (d={d}, d_m={d_m}, E={experts})"
            )));
        }
        Ok(MspParams {
            experts: vec![Mlp::new(rng, d, experts * d_m, d_m)],
            gate: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.experts[0].first.fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.experts[0].second.fan_out()
    }

    /// Gate weights on the simplex; all mass on the lone expert when ungated.
    pub fn gate(&self, x: &[f64]) -> Vec<f64> {
        match &self.gate {
            Some(g) => softmax_rows(&Matrix::row_vector(&g.apply(x))).into_vec(),
            None => vec![1.0],
        }
    }

    /// Plain evaluation for one embedding.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let alpha = self.gate(x);
        let mut h = vec![0.0; self.output_dim()];
        for (a, e) in alpha.iter().zip(&self.experts) {
            for (o, v) in h.iter_mut().zip(e.apply(x)) {
                *o += a * v;
            }
        }
        h
    }

    /// Batched forward on the tape; `x` is B×d.
    pub fn forward(&self, tape: &mut GradientTape, x: Var) -> Var {
        let Some(gate) = &self.gate else {
            return self.experts[0].forward(tape, x);
        };
        let logits = gate.forward(tape, x);
        let alpha = tape.softmax_rows(logits);
        let mut acc: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let f = expert.forward(tape, x);
            let a = tape.column(alpha, e);
            let weighted = tape.scale_rows(f, a);
            acc = Some(match acc {
                Some(s) => tape.add(s, weighted),
                None => weighted,
            });
        }
        acc.expect("at least one expert")
    }
}

impl Parameterized for MspParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Matrix)>) {
        if let Some(g) = &self.gate {
            g.collect(&join(prefix, "gate"), out);
        }
        for (e, m) in self.experts.iter().enumerate() {
            m.collect(&join(prefix, &format!("expert{e}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        if let Some(g) = &mut self.gate {
            g.collect_mut(out);
        }
        for m in &mut self.experts {
            m.collect_mut(out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gate_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = MspParams::new(&mut rng, 4, 6, 3).unwrap();
        let g = p.gate.as_mut().unwrap();
        g.weight = Matrix::zeros(4, 3);
        let a = p.gate(&[1.0, -2.0, 0.5, 3.0]);
        for v in a {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dominant_logit_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = MspParams::new(&mut rng, 1, 2, 3).unwrap();
        let g = p.gate.as_mut().unwrap();
        g.weight = Matrix::zeros(1, 3);
        g.bias = Matrix::row_vector(&[0.0, 50.0, 0.0]);
        assert!(p.gate(&[0.7])[1] >= 1.0 - 1e-9);
    }

    #[test]
    fn tape_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MspParams::new(&mut rng, 5, 4, 3).unwrap();
        let rows = vec![vec![0.1, 0.2, -0.3, 0.4, 0.5], vec![-1.0, 0.0, 0.3, 0.2, 0.9]];
        let mut tape = GradientTape::new();
        let x = tape.constant(Matrix::from_rows(&rows).unwrap());
        let h = p.forward(&mut tape, x);
        for (r, row) in rows.iter().enumerate() {
            let plain = p.apply(row);
            for (a, b) in tape.value(h).row(r).iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_expert_budget_is_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let multi = MspParams::new(&mut rng, 64, 448, 3).unwrap().parameter_count() as f64;
        let single = MspParams::single_expert(&mut rng, 64, 448, 3).unwrap().parameter_count() as f64;
        assert!((multi - single).abs() / multi < 0.02, "{multi} vs {single}");
    }
}

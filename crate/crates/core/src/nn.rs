//! Layer building blocks shared by the language model and the scorers.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{ParamId, ParamStore, Tape, Var};

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Inverted-dropout mask: entries are `0` with probability `rate`, otherwise `1/(1-rate)`.
pub fn dropout_mask(rng: &mut impl Rng, rows: usize, cols: usize, rate: f64) -> Array2<f64> {
    let keep = 1.0 - rate;
    Array2::from_shape_fn((rows, cols), |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            1.0 / keep
        }
    })
}

/// Applies dropout when an RNG is supplied and the rate is positive.
pub fn dropout<R: Rng>(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut R>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let (r, c) = tape.value(x).dim();
            let m = dropout_mask(rng, r, c, rate);
            tape.mask(x, m)
        }
        _ => x,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        params: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = params.add(format!("{name}.weight"), uniform(rng, input, output, bound));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Array2::zeros((1, output))));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Two ReLU layers, with optional dropout on each hidden output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp2 {
    pub fn new(params: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(params, &format!("{name}.0"), input, hidden, true, rng),
            second: Linear::new(params, &format!("{name}.1"), hidden, hidden, true, rng),
        }
    }

    pub fn forward<R: Rng>(&self, tape: &mut Tape, x: Var, dropout_rate: f64, mut rng: Option<&mut R>) -> Var {
        let h = self.first.forward(tape, x);
        let h = tape.relu(h);
        let h = dropout(tape, h, dropout_rate, rng.as_deref_mut());
        let h = self.second.forward(tape, h);
        let h = tape.relu(h);
        dropout(tape, h, dropout_rate, rng)
    }
}

/// Gated recurrent cell with update and reset gates.
///
/// `h' = z∘h + (1−z)∘tanh(x·Wn + (r∘h)·Un + bn)`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input_size: usize,
    pub hidden_size: usize,
    /// `input × 3H`, column blocks ordered (z, r, n)
    pub w_input: ParamId,
    /// `H × 2H` recurrent weights for (z, r)
    pub u_gates: ParamId,
    /// `H × H` recurrent weights for the candidate state
    pub u_candidate: ParamId,
    pub bias: ParamId,
}

impl GruCell {
    pub fn new(params: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            input_size: input,
            hidden_size: hidden,
            w_input: params.add(format!("{name}.w_input"), uniform(rng, input, 3 * hidden, bound)),
            u_gates: params.add(format!("{name}.u_gates"), uniform(rng, hidden, 2 * hidden, bound)),
            u_candidate: params.add(format!("{name}.u_candidate"), uniform(rng, hidden, hidden, bound)),
            bias: params.add(format!("{name}.bias"), Array2::zeros((1, 3 * hidden))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, h: Var) -> Var {
        let hs = self.hidden_size;
        let w = tape.param(self.w_input);
        let b = tape.param(self.bias);
        let ug = tape.param(self.u_gates);
        let uc = tape.param(self.u_candidate);

        let xw = tape.matmul(x, w);
        let xw = tape.add_row(xw, b);
        let x_gates = tape.slice_cols(xw, 0, 2 * hs);
        let x_cand = tape.slice_cols(xw, 2 * hs, 3 * hs);
        let h_gates = tape.matmul(h, ug);
        let gates = tape.add(x_gates, h_gates);
        let gates = tape.sigmoid(gates);
        let z = tape.slice_cols(gates, 0, hs);
        let r = tape.slice_cols(gates, hs, 2 * hs);
        let rh = tape.mul(r, h);
        let h_cand = tape.matmul(rh, uc);
        let cand = tape.add(x_cand, h_cand);
        let n = tape.tanh(cand);
        let diff = tape.sub(h, n);
        let zd = tape.mul(z, diff);
        tape.add(n, zd)
    }

    /// Runs the cell over a sequence of `1×input` rows and returns the final state.
    pub fn run(&self, tape: &mut Tape, inputs: &[Var]) -> Var {
        let mut h = tape.constant(Array2::zeros((1, self.hidden_size)));
        for &x in inputs {
            h = self.forward(tape, x, h);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_with_zero_weights_halves_toward_zero_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamStore::new();
        let cell = GruCell::new(&mut params, "g", 2, 3, &mut rng);
        for id in [cell.w_input, cell.u_gates, cell.u_candidate] {
            params.get_mut(id).fill(0.0);
        }
        let mut tape = Tape::new(&params);
        let x = tape.constant(Array2::ones((1, 2)));
        let h = tape.constant(Array2::from_elem((1, 3), 0.8));
        let out = cell.forward(&mut tape, x, h);
        // z = 0.5, candidate = tanh(0) = 0
        for v in tape.value(out).iter() {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_mask_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask(&mut rng, 200, 200, 0.2);
        let mean = m.mean().unwrap();
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }
}

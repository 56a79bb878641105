//! Gated recurrent unit with an explicit backward pass.
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)          update gate
//! r  = σ(W_r x + U_r h + b_r)          reset gate
//! h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)  candidate
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```

use rand::Rng;

use super::{Matrix, ParamBlock, ParamId};
use crate::error::{check_dim, Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct GruCache {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

/// Explicit GRU weights, used to build cells by hand.
#[derive(Debug, Clone)]
pub struct GruWeights {
    pub w_z: Matrix,
    pub u_z: Matrix,
    pub b_z: Vec<f64>,
    pub w_r: Matrix,
    pub u_r: Matrix,
    pub b_r: Vec<f64>,
    pub w_h: Matrix,
    pub u_h: Matrix,
    pub b_h: Vec<f64>,
}

impl GruWeights {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Matrix::zeros(hidden_dim, input_dim);
        let u = || Matrix::zeros(hidden_dim, hidden_dim);
        Self {
            w_z: w(),
            u_z: u(),
            b_z: vec![0.0; hidden_dim],
            w_r: w(),
            u_r: u(),
            b_r: vec![0.0; hidden_dim],
            w_h: w(),
            u_h: u(),
            b_h: vec![0.0; hidden_dim],
        }
    }
}

#[derive(Debug, Clone)]
pub struct GruCell {
    name: String,
    input_dim: usize,
    hidden_dim: usize,
    update: Gate,
    reset: Gate,
    candidate: Gate,
    tape: Vec<GruCache>,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamBlock,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut gate = |g: &str| Gate {
            w: params.add_uniform(format!("{name}.w_{g}"), hidden_dim, input_dim, hidden_dim, rng),
            u: params.add_uniform(format!("{name}.u_{g}"), hidden_dim, hidden_dim, hidden_dim, rng),
            b: params.add_uniform(format!("{name}.b_{g}"), hidden_dim, 1, hidden_dim, rng),
        };
        let update = gate("z");
        let reset = gate("r");
        let candidate = gate("h");
        Self {
            name: name.to_string(),
            input_dim,
            hidden_dim,
            update,
            reset,
            candidate,
            tape: Vec::new(),
        }
    }

    pub fn with_weights(params: &mut ParamBlock, name: &str, w: GruWeights) -> Result<Self> {
        let (hidden_dim, input_dim) = w.w_z.shape();
        for m in [&w.w_z, &w.w_r, &w.w_h] {
            check_dim("GruCell W rows", hidden_dim, m.rows())?;
            check_dim("GruCell W cols", input_dim, m.cols())?;
        }
        for m in [&w.u_z, &w.u_r, &w.u_h] {
            check_dim("GruCell U rows", hidden_dim, m.rows())?;
            check_dim("GruCell U cols", hidden_dim, m.cols())?;
        }
        for b in [&w.b_z, &w.b_r, &w.b_h] {
            check_dim("GruCell bias", hidden_dim, b.len())?;
        }
        let mut gate = |g: &str, wm: Matrix, um: Matrix, b: &[f64]| Gate {
            w: params.add(format!("{name}.w_{g}"), wm),
            u: params.add(format!("{name}.u_{g}"), um),
            b: params.add(format!("{name}.b_{g}"), Matrix::column(b)),
        };
        let update = gate("z", w.w_z, w.u_z, &w.b_z);
        let reset = gate("r", w.w_r, w.u_r, &w.b_r);
        let candidate = gate("h", w.w_h, w.u_h, &w.b_h);
        Ok(Self {
            name: name.to_string(),
            input_dim,
            hidden_dim,
            update,
            reset,
            candidate,
            tape: Vec::new(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn gate_pre(params: &ParamBlock, gate: Gate, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut a = params.value(gate.b).as_slice().to_vec();
        params.value(gate.w).matvec_acc(x, &mut a);
        params.value(gate.u).matvec_acc(h, &mut a);
        a
    }

    fn step(&self, params: &ParamBlock, x: &[f64], h: &[f64]) -> Result<(Vec<f64>, GruCache)> {
        check_dim("GruCell input", self.input_dim, x.len())?;
        check_dim("GruCell hidden", self.hidden_dim, h.len())?;
        let z: Vec<f64> = Self::gate_pre(params, self.update, x, h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let r: Vec<f64> = Self::gate_pre(params, self.reset, x, h)
            .into_iter()
            .map(sigmoid)
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(r, h)| r * h).collect();
        let n: Vec<f64> = Self::gate_pre(params, self.candidate, x, &rh)
            .into_iter()
            .map(f64::tanh)
            .collect();
        let h_new = (0..self.hidden_dim)
            .map(|k| (1.0 - z[k]) * h[k] + z[k] * n[k])
            .collect();
        let cache = GruCache {
            x: x.to_vec(),
            h: h.to_vec(),
            z,
            r,
            n,
            rh,
        };
        Ok((h_new, cache))
    }

    pub fn forward(&self, params: &ParamBlock, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
        self.step(params, x, h_prev).map(|(h, _)| h)
    }

    pub fn forward_record(
        &mut self,
        params: &ParamBlock,
        x: &[f64],
        h_prev: &[f64],
    ) -> Result<Vec<f64>> {
        let (h, cache) = self.step(params, x, h_prev)?;
        self.tape.push(cache);
        Ok(h)
    }

    /// Pops the latest recorded step. Returns `(dx, dh_prev)`.
    pub fn backward(
        &mut self,
        params: &mut ParamBlock,
        dh_new: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim("GruCell upstream", self.hidden_dim, dh_new.len())?;
        let c = self.tape.pop().ok_or_else(|| Error::BackwardWithoutForward {
            layer: self.name.clone(),
        })?;
        let hd = self.hidden_dim;
        let mut dx = vec![0.0; self.input_dim];
        let mut dh = vec![0.0; hd];
        let mut da_n = vec![0.0; hd];
        let mut da_z = vec![0.0; hd];
        for k in 0..hd {
            let g = dh_new[k];
            dh[k] = g * (1.0 - c.z[k]);
            da_n[k] = g * c.z[k] * (1.0 - c.n[k] * c.n[k]);
            da_z[k] = g * (c.n[k] - c.h[k]) * c.z[k] * (1.0 - c.z[k]);
        }

        // candidate
        let mut drh = vec![0.0; hd];
        params.value(self.candidate.u).tr_matvec_acc(&da_n, &mut drh);
        params.value(self.candidate.w).tr_matvec_acc(&da_n, &mut dx);
        params.grad_mut(self.candidate.w).add_outer(&da_n, &c.x);
        params.grad_mut(self.candidate.u).add_outer(&da_n, &c.rh);
        params.grad_mut(self.candidate.b).add_assign_slice(&da_n);

        let mut da_r = vec![0.0; hd];
        for k in 0..hd {
            dh[k] += drh[k] * c.r[k];
            da_r[k] = drh[k] * c.h[k] * c.r[k] * (1.0 - c.r[k]);
        }

        for (gate, da) in [(self.reset, &da_r), (self.update, &da_z)] {
            params.value(gate.w).tr_matvec_acc(da, &mut dx);
            params.value(gate.u).tr_matvec_acc(da, &mut dh);
            params.grad_mut(gate.w).add_outer(da, &c.x);
            params.grad_mut(gate.u).add_outer(da, &c.h);
            params.grad_mut(gate.b).add_assign_slice(da);
        }
        Ok((dx, dh))
    }

    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    pub fn clear_tape(&mut self) {
        self.tape.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_cell() -> (ParamBlock, GruCell) {
        let m = |v: f64| Matrix::from_vec(1, 1, vec![v]).unwrap();
        let w = GruWeights {
            w_z: m(0.5),
            u_z: m(-0.3),
            b_z: vec![0.1],
            w_r: m(-0.7),
            u_r: m(0.2),
            b_r: vec![0.4],
            w_h: m(1.2),
            u_h: m(0.9),
            b_h: vec![-0.2],
        };
        let mut p = ParamBlock::new();
        let cell = GruCell::with_weights(&mut p, "gru", w).unwrap();
        (p, cell)
    }

    #[test]
    fn zero_weights_zero_state_stays_zero() {
        let mut p = ParamBlock::new();
        let cell = GruCell::with_weights(&mut p, "gru", GruWeights::zeros(3, 4)).unwrap();
        let h = cell.forward(&p, &[1.0, -2.0, 0.5], &[0.0; 4]).unwrap();
        assert_eq!(h, vec![0.0; 4]);
    }

    #[test]
    fn scalar_hand_evaluation() {
        let (p, cell) = scalar_cell();
        // x = 1, h_prev = 0
        let z = 1.0 / (1.0 + (-(0.5 * 1.0 + 0.1f64)).exp());
        let r = 1.0 / (1.0 + (-(-0.7 * 1.0 + 0.4f64)).exp());
        let n = (1.2 * 1.0 + 0.9 * (r * 0.0) - 0.2f64).tanh();
        let expected = (1.0 - z) * 0.0 + z * n;
        let h = cell.forward(&p, &[1.0], &[0.0]).unwrap();
        assert!((h[0] - expected).abs() < 1e-15);
        // frozen: z = σ(0.6), n = tanh(1.0)
        assert!((h[0] - 0.645_656_306_225_795_6 * 0.761_594_155_955_764_9).abs() < 1e-12);
    }

    #[test]
    fn dimension_checks() {
        let (p, cell) = scalar_cell();
        assert!(cell.forward(&p, &[1.0, 2.0], &[0.0]).is_err());
        assert!(cell.forward(&p, &[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn backward_without_forward_is_error() {
        let (mut p, mut cell) = scalar_cell();
        assert!(matches!(
            cell.backward(&mut p, &[1.0]),
            Err(Error::BackwardWithoutForward { .. })
        ));
    }

    #[test]
    fn output_bounded_by_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamBlock::new();
        let cell = GruCell::new(&mut p, "gru", 5, 6, &mut rng);
        for _ in 0..200 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let h: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let h_new = cell.forward(&p, &x, &h).unwrap();
            assert!(h_new.iter().all(|v| v.abs() < 1.0));
        }
    }
}

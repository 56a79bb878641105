//! Joint action-value heads: additive (VDN) and state-conditioned monotonic
//! (QMIX-style) mixing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{Activation, DenseLayer, Matrix, ParamBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Vdn,
    Qmix,
}

/// Nonlinearity between the two mixing layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixerActivation {
    Elu,
    /// Used by the VDN-reduction configuration.
    Identity,
}

impl MixerActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            MixerActivation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            MixerActivation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            MixerActivation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            MixerActivation::Identity => 1.0,
        }
    }
}

pub fn vdn_mix(q_chosen: &[f64]) -> f64 {
    q_chosen.iter().sum()
}

#[derive(Debug, Clone)]
struct MixCache {
    q: Vec<f64>,
    raw_w1: Vec<f64>,
    raw_w2: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

/// Two-layer mixing network whose weights are produced from the global
/// state by hypernetworks; absolute values keep every mixing weight
/// nonnegative, so the output is monotone in each agent value.
///
/// ```text
/// W1 = |H_w1(s)|  (N × d)    b1 = H_b1(s)
/// W2 = |H_w2(s)|  (d)        b2 = H_b2(s)
/// Q_tot = W2 · act(W1ᵀ q + b1) + b2
/// ```
#[derive(Debug, Clone)]
pub struct MonotonicMixer {
    n_agents: usize,
    state_dim: usize,
    hidden: usize,
    activation: MixerActivation,
    hyper_w1: DenseLayer,
    hyper_b1: DenseLayer,
    hyper_w2: DenseLayer,
    hyper_b2: DenseLayer,
    tape: Vec<MixCache>,
}

impl MonotonicMixer {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamBlock,
        n_agents: usize,
        state_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let id = Activation::Identity;
        Self {
            n_agents,
            state_dim,
            hidden,
            activation: MixerActivation::Elu,
            hyper_w1: DenseLayer::new(params, "mixer.hyper_w1", state_dim, n_agents * hidden, id, rng),
            hyper_b1: DenseLayer::new(params, "mixer.hyper_b1", state_dim, hidden, id, rng),
            hyper_w2: DenseLayer::new(params, "mixer.hyper_w2", state_dim, hidden, id, rng),
            hyper_b2: DenseLayer::new(params, "mixer.hyper_b2", state_dim, 1, id, rng),
            tape: Vec::new(),
        }
    }

    /// Mixer whose hypernetworks ignore the state and emit the identity as
    /// first-layer weights, zero biases and unit second-layer weights, with
    /// an identity nonlinearity. Its output is exactly `Σ q_i`.
    pub fn vdn_reduction(params: &mut ParamBlock, n_agents: usize, state_dim: usize) -> Result<Self> {
        let id = Activation::Identity;
        let h = n_agents;
        let mut w1_bias = vec![0.0; n_agents * h];
        for i in 0..n_agents {
            w1_bias[i * h + i] = 1.0;
        }
        let zeros = |rows| Matrix::zeros(rows, state_dim);
        Ok(Self {
            n_agents,
            state_dim,
            hidden: h,
            activation: MixerActivation::Identity,
            hyper_w1: DenseLayer::with_weights(params, "mixer.hyper_w1", zeros(n_agents * h), &w1_bias, id)?,
            hyper_b1: DenseLayer::with_weights(params, "mixer.hyper_b1", zeros(h), &vec![0.0; h], id)?,
            hyper_w2: DenseLayer::with_weights(params, "mixer.hyper_w2", zeros(h), &vec![1.0; h], id)?,
            hyper_b2: DenseLayer::with_weights(params, "mixer.hyper_b2", zeros(1), &[0.0], id)?,
            tape: Vec::new(),
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn activation(&self) -> MixerActivation {
        self.activation
    }

    pub fn set_activation(&mut self, activation: MixerActivation) {
        self.activation = activation;
    }

    /// `(hyper_w1, hyper_b1, hyper_w2, hyper_b2)`
    pub fn hypernetworks(&self) -> [&DenseLayer; 4] {
        [&self.hyper_w1, &self.hyper_b1, &self.hyper_w2, &self.hyper_b2]
    }

    fn evaluate(&self, params: &ParamBlock, q: &[f64], s: &[f64]) -> Result<(f64, MixCache)> {
        check_dim("qmix agents", self.n_agents, q.len())?;
        check_dim("qmix state", self.state_dim, s.len())?;
        let raw_w1 = self.hyper_w1.forward(params, s)?;
        let b1 = self.hyper_b1.forward(params, s)?;
        let raw_w2 = self.hyper_w2.forward(params, s)?;
        let b2 = self.hyper_b2.forward(params, s)?[0];
        let h = self.hidden;
        let mut pre = b1;
        for (i, qi) in q.iter().enumerate() {
            for k in 0..h {
                pre[k] += qi * raw_w1[i * h + k].abs();
            }
        }
        let hidden: Vec<f64> = pre.iter().map(|&x| self.activation.apply(x)).collect();
        let out = hidden
            .iter()
            .zip(&raw_w2)
            .map(|(a, w)| a * w.abs())
            .sum::<f64>()
            + b2;
        let cache = MixCache {
            q: q.to_vec(),
            raw_w1,
            raw_w2,
            pre,
            hidden,
        };
        Ok((out, cache))
    }

    pub fn mix(&self, params: &ParamBlock, q: &[f64], s: &[f64]) -> Result<f64> {
        self.evaluate(params, q, s).map(|(v, _)| v)
    }

    pub fn mix_record(&mut self, params: &ParamBlock, q: &[f64], s: &[f64]) -> Result<f64> {
        let (out, cache) = self.evaluate(params, q, s)?;
        // hypernet tapes mirror the evaluation above
        self.hyper_w1.forward_record(params, s)?;
        self.hyper_b1.forward_record(params, s)?;
        self.hyper_w2.forward_record(params, s)?;
        self.hyper_b2.forward_record(params, s)?;
        self.tape.push(cache);
        Ok(out)
    }

    /// Returns `∂Q_tot/∂q · d_out` and accumulates hypernetwork gradients.
    pub fn backward(&mut self, params: &mut ParamBlock, d_out: f64) -> Result<Vec<f64>> {
        let c = self.tape.pop().ok_or_else(|| Error::BackwardWithoutForward {
            layer: "mixer".to_string(),
        })?;
        let h = self.hidden;
        let sign = |x: f64| if x >= 0.0 { 1.0 } else { -1.0 };

        let mut d_raw_w2 = vec![0.0; h];
        let mut d_pre = vec![0.0; h];
        for k in 0..h {
            d_raw_w2[k] = d_out * c.hidden[k] * sign(c.raw_w2[k]);
            d_pre[k] = d_out * c.raw_w2[k].abs() * self.activation.derivative(c.pre[k]);
        }
        let mut d_raw_w1 = vec![0.0; self.n_agents * h];
        let mut dq = vec![0.0; self.n_agents];
        for i in 0..self.n_agents {
            for k in 0..h {
                let w = c.raw_w1[i * h + k];
                d_raw_w1[i * h + k] = d_pre[k] * c.q[i] * sign(w);
                dq[i] += d_pre[k] * w.abs();
            }
        }
        self.hyper_b2.backward(params, &[d_out])?;
        self.hyper_w2.backward(params, &d_raw_w2)?;
        self.hyper_b1.backward(params, &d_pre)?;
        self.hyper_w1.backward(params, &d_raw_w1)?;
        Ok(dq)
    }

    pub fn clear_tape(&mut self) {
        self.tape.clear();
        self.hyper_w1.clear_tape();
        self.hyper_b1.clear_tape();
        self.hyper_w2.clear_tape();
        self.hyper_b2.clear_tape();
    }

    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }
}

/// Either mixing head behind one interface.
#[derive(Debug, Clone)]
pub enum Mixer {
    Vdn { n_agents: usize, pending: usize },
    Qmix(MonotonicMixer),
}

impl Mixer {
    pub fn new<R: Rng + ?Sized>(
        kind: MixerKind,
        params: &mut ParamBlock,
        n_agents: usize,
        state_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        match kind {
            MixerKind::Vdn => Mixer::Vdn {
                n_agents,
                pending: 0,
            },
            MixerKind::Qmix => Mixer::Qmix(MonotonicMixer::new(params, n_agents, state_dim, hidden, rng)),
        }
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Vdn { .. } => MixerKind::Vdn,
            Mixer::Qmix(_) => MixerKind::Qmix,
        }
    }

    pub fn mix(&self, params: &ParamBlock, q: &[f64], s: &[f64]) -> Result<f64> {
        match self {
            Mixer::Vdn { n_agents, .. } => {
                check_dim("vdn agents", *n_agents, q.len())?;
                Ok(vdn_mix(q))
            }
            Mixer::Qmix(m) => m.mix(params, q, s),
        }
    }

    pub fn mix_record(&mut self, params: &ParamBlock, q: &[f64], s: &[f64]) -> Result<f64> {
        match self {
            Mixer::Vdn { n_agents, pending } => {
                check_dim("vdn agents", *n_agents, q.len())?;
                *pending += 1;
                Ok(vdn_mix(q))
            }
            Mixer::Qmix(m) => m.mix_record(params, q, s),
        }
    }

    pub fn backward(&mut self, params: &mut ParamBlock, d_out: f64) -> Result<Vec<f64>> {
        match self {
            Mixer::Vdn { n_agents, pending } => {
                if *pending == 0 {
                    return Err(Error::BackwardWithoutForward {
                        layer: "vdn".to_string(),
                    });
                }
                *pending -= 1;
                Ok(vec![d_out; *n_agents])
            }
            Mixer::Qmix(m) => m.backward(params, d_out),
        }
    }

    pub fn clear_tape(&mut self) {
        match self {
            Mixer::Vdn { pending, .. } => *pending = 0,
            Mixer::Qmix(m) => m.clear_tape(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_param_gradients, check_vector_gradient, FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    #[test]
    fn vdn_examples() {
        assert_eq!(vdn_mix(&[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(vdn_mix(&[1.5, -0.5, 2.0]), 3.0);
        assert_eq!(vdn_mix(&[2.0, 1.5, -0.5]), 3.0);
    }

    #[test]
    fn vdn_reduction_equals_sum() {
        let mut p = ParamBlock::new();
        let m = MonotonicMixer::vdn_reduction(&mut p, 3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let q = random_vec(&mut rng, 3, 5.0);
            let s = random_vec(&mut rng, 4, 1.0);
            assert_eq!(m.mix(&p, &q, &s).unwrap(), vdn_mix(&q));
        }
    }

    #[test]
    fn hand_evaluated_tiny_mixer() {
        // N = 2, d = 2, state_dim = 1, s = (1)
        let mut p = ParamBlock::new();
        let id = Activation::Identity;
        let col = |v: &[f64]| Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap();
        let m = MonotonicMixer {
            n_agents: 2,
            state_dim: 1,
            hidden: 2,
            activation: MixerActivation::Elu,
            // raw W1 = [[0.5, -1.0], [2.0, 0.25]] (agent-major)
            hyper_w1: DenseLayer::with_weights(&mut p, "w1", col(&[0.5, -1.0, 2.0, 0.25]), &[0.0; 4], id).unwrap(),
            hyper_b1: DenseLayer::with_weights(&mut p, "b1", col(&[0.0, 0.0]), &[-6.0, 0.5], id).unwrap(),
            hyper_w2: DenseLayer::with_weights(&mut p, "w2", col(&[-3.0, 1.0]), &[0.0, 0.0], id).unwrap(),
            hyper_b2: DenseLayer::with_weights(&mut p, "b2", col(&[0.0]), &[0.2], id).unwrap(),
            tape: Vec::new(),
        };
        // pre_0 = 1·0.5 + 2·2.0 − 6 = −1.5 → elu = e^{−1.5} − 1
        // pre_1 = 1·1.0 + 2·0.25 + 0.5 = 2.0 → 2.0
        // out = 3·(e^{−1.5} − 1) + 1·2 + 0.2
        let expected = 3.0 * ((-1.5f64).exp() - 1.0) + 2.0 + 0.2;
        let out = m.mix(&p, &[1.0, 2.0], &[1.0]).unwrap();
        assert!((out - expected).abs() < 1e-14);
        assert!((out - (-0.130_609_519_554_710_6)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamBlock::new();
        let m = MonotonicMixer::new(&mut p, 3, 4, 8, &mut rng);
        assert!(m.mix(&p, &[0.0; 2], &[0.0; 4]).is_err());
        assert!(m.mix(&p, &[0.0; 3], &[0.0; 5]).is_err());
    }

    #[test]
    fn monotone_in_every_agent_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamBlock::new();
        let m = MonotonicMixer::new(&mut p, 3, 5, 8, &mut rng);
        for _ in 0..1000 {
            let q = random_vec(&mut rng, 3, 5.0);
            let s = random_vec(&mut rng, 5, 2.0);
            for i in 0..3 {
                let mut qp = q.clone();
                qp[i] += FD_STEP;
                let mut qm = q.clone();
                qm[i] -= FD_STEP;
                let d = (m.mix(&p, &qp, &s).unwrap() - m.mix(&p, &qm, &s).unwrap()) / (2.0 * FD_STEP);
                assert!(d >= -1e-9, "∂/∂q_{i} = {d}");
            }
        }
    }

    #[test]
    fn qmix_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let mut p = ParamBlock::new();
            let mut m = MonotonicMixer::new(&mut p, 3, 4, 5, &mut rng);
            let q = random_vec(&mut rng, 3, 2.0);
            let s = random_vec(&mut rng, 4, 1.0);
            m.mix_record(&p, &q, &s).unwrap();
            let dq = m.backward(&mut p, 1.0).unwrap();
            let frozen = m.clone();
            let rep = check_param_gradients(&mut p.clone(), FD_STEP, |pp| frozen.mix(pp, &q, &s)).unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}: {rep:?}");
            let rep = check_vector_gradient(&q, &dq, FD_STEP, |qq| frozen.mix(&p, qq, &s)).unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn vdn_backward_requires_forward() {
        let mut p = ParamBlock::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Mixer::new(MixerKind::Vdn, &mut p, 2, 3, 4, &mut rng);
        assert!(m.backward(&mut p, 1.0).is_err());
        m.mix_record(&p, &[1.0, 2.0], &[0.0; 3]).unwrap();
        assert_eq!(m.backward(&mut p, 0.5).unwrap(), vec![0.5, 0.5]);
    }
}

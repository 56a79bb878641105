//! Per-agent network: local action generator (FC embed → GRU → FC head), the
//! shared message encoder, and the summation combiner.
//!
//! One parameter set is shared by all agents, and one encoder parameter set
//! is shared by every (sender, receiver) pair. The intermediate output `c` of
//! the GRU is the new hidden state itself.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::numerics::{Activation, DenseLayer, GruCell, ParamBlock};

/// Local or combined action values, one entry per action.
pub type ActionValues = Vec<f64>;
/// Encoded message `f_enc(c)`, same length as the action values.
pub type Message = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder_hidden: usize,
}

impl AgentConfig {
    /// Widths used for SMAC-scale runs: 64-wide embed and GRU, 196-wide encoder.
    pub fn full_scale(obs_dim: usize, n_actions: usize) -> Self {
        Self {
            obs_dim,
            n_actions,
            embed_dim: 64,
            hidden_dim: 64,
            encoder_hidden: 196,
        }
    }

    /// Small widths for desk-scale runs and tests.
    pub fn desk(obs_dim: usize, n_actions: usize) -> Self {
        Self {
            obs_dim,
            n_actions,
            embed_dim: 32,
            hidden_dim: 32,
            encoder_hidden: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LocalOutput {
    pub q_local: ActionValues,
    /// GRU output; also the next hidden state.
    pub c: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AgentNetwork {
    config: AgentConfig,
    embed: DenseLayer,
    gru: GruCell,
    head: DenseLayer,
    enc_hidden: DenseLayer,
    enc_out: DenseLayer,
}

impl AgentNetwork {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamBlock, config: AgentConfig, rng: &mut R) -> Self {
        let embed = DenseLayer::new(
            params,
            "agent.embed",
            config.obs_dim,
            config.embed_dim,
            Activation::LeakyRelu,
            rng,
        );
        let gru = GruCell::new(params, "agent.gru", config.embed_dim, config.hidden_dim, rng);
        let head = DenseLayer::new(
            params,
            "agent.head",
            config.hidden_dim,
            config.n_actions,
            Activation::Identity,
            rng,
        );
        let enc_hidden = DenseLayer::new(
            params,
            "encoder.fc1",
            config.hidden_dim,
            config.encoder_hidden,
            Activation::LeakyRelu,
            rng,
        );
        let enc_out = DenseLayer::new(
            params,
            "encoder.fc2",
            config.encoder_hidden,
            config.n_actions,
            Activation::Identity,
            rng,
        );
        Self {
            config,
            embed,
            gru,
            head,
            enc_hidden,
            enc_out,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn n_actions(&self) -> usize {
        self.config.n_actions
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn initial_hidden(&self) -> Vec<f64> {
        vec![0.0; self.config.hidden_dim]
    }

    pub fn head(&self) -> &DenseLayer {
        &self.head
    }

    pub fn embed(&self) -> &DenseLayer {
        &self.embed
    }

    pub fn encoder_layers(&self) -> (&DenseLayer, &DenseLayer) {
        (&self.enc_hidden, &self.enc_out)
    }

    pub fn gru(&self) -> &GruCell {
        &self.gru
    }

    /// `obs → embed → GRU → c`, `c → head → q_local`.
    pub fn local_forward(&self, params: &ParamBlock, obs: &[f64], h_prev: &[f64]) -> Result<LocalOutput> {
        check_dim("local_forward obs", self.config.obs_dim, obs.len())?;
        check_dim("local_forward hidden", self.config.hidden_dim, h_prev.len())?;
        let e = self.embed.forward(params, obs)?;
        let c = self.gru.forward(params, &e, h_prev)?;
        let q_local = self.head.forward(params, &c)?;
        Ok(LocalOutput { q_local, c })
    }

    pub fn encode(&self, params: &ParamBlock, c: &[f64]) -> Result<Message> {
        check_dim("encode input", self.config.hidden_dim, c.len())?;
        let hidden = self.enc_hidden.forward(params, c)?;
        self.enc_out.forward(params, &hidden)
    }

    pub fn local_forward_record(
        &mut self,
        params: &ParamBlock,
        obs: &[f64],
        h_prev: &[f64],
    ) -> Result<LocalOutput> {
        check_dim("local_forward obs", self.config.obs_dim, obs.len())?;
        check_dim("local_forward hidden", self.config.hidden_dim, h_prev.len())?;
        let e = self.embed.forward_record(params, obs)?;
        let c = self.gru.forward_record(params, &e, h_prev)?;
        let q_local = self.head.forward_record(params, &c)?;
        Ok(LocalOutput { q_local, c })
    }

    pub fn encode_record(&mut self, params: &ParamBlock, c: &[f64]) -> Result<Message> {
        check_dim("encode input", self.config.hidden_dim, c.len())?;
        let hidden = self.enc_hidden.forward_record(params, c)?;
        self.enc_out.forward_record(params, &hidden)
    }

    /// Backward through the encoder; returns `∂L/∂c`.
    pub fn encode_backward(&mut self, params: &mut ParamBlock, d_message: &[f64]) -> Result<Vec<f64>> {
        let d_hidden = self.enc_out.backward(params, d_message)?;
        self.enc_hidden.backward(params, &d_hidden)
    }

    /// Backward through head, GRU and embed for the latest recorded step.
    /// `d_c_extra` carries gradient reaching `c` from elsewhere (encoder,
    /// next time step). Returns `∂L/∂h_prev`.
    pub fn local_backward(
        &mut self,
        params: &mut ParamBlock,
        d_q_local: &[f64],
        d_c_extra: &[f64],
    ) -> Result<Vec<f64>> {
        check_dim("local_backward d_c", self.config.hidden_dim, d_c_extra.len())?;
        let mut d_c = self.head.backward(params, d_q_local)?;
        for (a, b) in d_c.iter_mut().zip(d_c_extra) {
            *a += b;
        }
        let (d_e, d_h_prev) = self.gru.backward(params, &d_c)?;
        self.embed.backward(params, &d_e)?;
        Ok(d_h_prev)
    }

    pub fn clear_tapes(&mut self) {
        self.embed.clear_tape();
        self.gru.clear_tape();
        self.head.clear_tape();
        self.enc_hidden.clear_tape();
        self.enc_out.clear_tape();
    }

    pub fn tapes_empty(&self) -> bool {
        self.embed.tape_len() == 0
            && self.gru.tape_len() == 0
            && self.head.tape_len() == 0
            && self.enc_hidden.tape_len() == 0
            && self.enc_out.tape_len() == 0
    }

    /// Runs every agent for one time step.
    pub fn team_forward(
        &self,
        params: &ParamBlock,
        observations: &[Vec<f64>],
        hidden: &[Vec<f64>],
        with_messages: bool,
    ) -> Result<TeamOutput> {
        check_dim("team_forward hidden", observations.len(), hidden.len())?;
        let mut out = TeamOutput::default();
        for (obs, h) in observations.iter().zip(hidden) {
            let local = self.local_forward(params, obs, h)?;
            if with_messages {
                out.messages.push(self.encode(params, &local.c)?);
            }
            out.q_local.push(local.q_local);
            out.hidden.push(local.c);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TeamOutput {
    pub q_local: Vec<ActionValues>,
    /// Empty when messages were not requested.
    pub messages: Vec<Message>,
    pub hidden: Vec<Vec<f64>>,
}

/// `q_local + Σ messages`, summed left to right in list order.
pub fn combine<M: AsRef<[f64]>>(q_local: &[f64], messages: &[M]) -> Result<ActionValues> {
    let mut out = q_local.to_vec();
    for m in messages {
        let m = m.as_ref();
        check_dim("combine message", q_local.len(), m.len())?;
        for (o, v) in out.iter_mut().zip(m) {
            *o += v;
        }
    }
    Ok(out)
}

/// Full-communication combine for every agent: agent `i` receives the
/// messages of all `j ≠ i` in ascending `j`.
pub fn combine_all(q_local: &[ActionValues], messages: &[Message]) -> Result<Vec<ActionValues>> {
    check_dim("combine_all", q_local.len(), messages.len())?;
    (0..q_local.len())
        .map(|i| {
            let others: Vec<&[f64]> = messages
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, m)| m.as_slice())
                .collect();
            combine(&q_local[i], &others)
        })
        .collect()
}

/// Population variance of the message components.
pub fn message_variance(m: &[f64]) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let n = m.len() as f64;
    let mean = m.iter().sum::<f64>() / n;
    m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Gradient of [`message_variance`]: `2 (m_k − mean) / |A|`.
pub fn message_variance_grad(m: &[f64]) -> Vec<f64> {
    if m.is_empty() {
        return Vec::new();
    }
    let n = m.len() as f64;
    let mean = m.iter().sum::<f64>() / n;
    m.iter().map(|v| 2.0 * (v - mean) / n).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

//! Execution-time request/reply protocol with communication accounting.
//!
//! Each time step is one synchronous round. Agent `i` broadcasts a request
//! when the gap between its two largest local action values is below `δ1`;
//! every other live agent `j` whose message variance is at least `δ2`
//! replies with its message. Only replies carry data, so `g_t` counts
//! directed (replier → requester) pairs and requests are free.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{message_variance, ActionValues, Message};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommConfig {
    /// Confidence threshold on the top-2 action-value gap.
    #[serde(with = "crate::serde_ext")]
    pub delta1: f64,
    /// Variance threshold on the encoder output.
    #[serde(with = "crate::serde_ext")]
    pub delta2: f64,
}

impl CommConfig {
    /// `δ1 = +∞, δ2 = −∞`: everyone requests, everyone replies.
    pub const FULL: CommConfig = CommConfig {
        delta1: f64::INFINITY,
        delta2: f64::NEG_INFINITY,
    };

    /// `δ1 = −∞`: nobody ever requests.
    pub const SILENT: CommConfig = CommConfig {
        delta1: f64::NEG_INFINITY,
        delta2: f64::INFINITY,
    };

    pub fn new(delta1: f64, delta2: f64) -> Result<Self> {
        if delta1.is_nan() || delta2.is_nan() {
            return Err(Error::InvalidConfig("thresholds must not be NaN".into()));
        }
        Ok(Self { delta1, delta2 })
    }
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            delta1: 0.5,
            delta2: 0.05,
        }
    }
}

/// `m1 − m2`, the difference between the two largest entries.
pub fn confidence_gap(q_local: &[f64]) -> Result<f64> {
    if q_local.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "confidence gap needs at least 2 actions, got {}",
            q_local.len()
        )));
    }
    let (mut m1, mut m2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in q_local {
        if v > m1 {
            m2 = m1;
            m1 = v;
        } else if v > m2 {
            m2 = v;
        }
    }
    Ok(m1 - m2)
}

/// One synchronous round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub t: usize,
    pub requesters: Vec<usize>,
    /// `(replier, requester)` pairs that carried a message.
    pub reply_pairs: Vec<(usize, usize)>,
    pub g_t: usize,
}

/// Runs one round for all agents. `alive[i] == false` agents neither request
/// nor reply and keep their local values.
pub fn protocol_step(
    t: usize,
    q_local: &[ActionValues],
    messages: &[Message],
    alive: &[bool],
    cfg: &CommConfig,
) -> Result<(Vec<ActionValues>, CommRecord)> {
    let n = q_local.len();
    check_dim("protocol_step messages", n, messages.len())?;
    check_dim("protocol_step alive", n, alive.len())?;
    if let Some(first) = q_local.first() {
        for m in messages {
            check_dim("protocol_step message length", first.len(), m.len())?;
        }
    }
    // replies are computed from current-step messages only
    let willing: Vec<bool> = messages
        .iter()
        .zip(alive)
        .map(|(m, &a)| a && message_variance(m) >= cfg.delta2)
        .collect();

    let mut combined = Vec::with_capacity(n);
    let mut record = CommRecord {
        t,
        requesters: Vec::new(),
        reply_pairs: Vec::new(),
        g_t: 0,
    };
    for i in 0..n {
        let mut q = q_local[i].clone();
        if alive[i] && n > 1 && confidence_gap(&q_local[i])? < cfg.delta1 {
            record.requesters.push(i);
            for j in (0..n).filter(|&j| j != i && willing[j]) {
                for (a, b) in q.iter_mut().zip(&messages[j]) {
                    *a += b;
                }
                record.reply_pairs.push((j, i));
            }
        }
        combined.push(q);
    }
    record.g_t = record.reply_pairs.len();
    Ok((combined, record))
}

/// Number of directed agent pairs, `R = N(N−1)`.
pub fn max_pairs(n_agents: usize) -> usize {
    n_agents * n_agents.saturating_sub(1)
}

/// `β = Σ_t g_t / (R·T)`; zero when fewer than two agents or no steps.
pub fn beta(g: impl IntoIterator<Item = usize>, n_agents: usize, steps: usize) -> f64 {
    let r = max_pairs(n_agents);
    if r == 0 || steps == 0 {
        return 0.0;
    }
    let total: usize = g.into_iter().sum();
    total as f64 / (r * steps) as f64
}

/// Per-step communication records for one or more episodes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLog {
    pub n_agents: usize,
    pub records: Vec<CommRecord>,
}

impl CommLog {
    pub fn new(n_agents: usize) -> Self {
        Self {
            n_agents,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: CommRecord) {
        self.records.push(record);
    }

    pub fn extend(&mut self, other: CommLog) {
        self.records.extend(other.records);
    }

    pub fn steps(&self) -> usize {
        self.records.len()
    }

    pub fn total_pairs(&self) -> usize {
        self.records.iter().map(|r| r.g_t).sum()
    }

    /// Running β over every recorded step.
    pub fn beta(&self) -> f64 {
        beta(self.records.iter().map(|r| r.g_t), self.n_agents, self.records.len())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }

    pub fn read_jsonl<R: BufRead>(n_agents: usize, r: R) -> Result<Self> {
        let mut log = CommLog::new(n_agents);
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            log.push(serde_json::from_str(&line)?);
        }
        Ok(log)
    }
}

/// Local network outputs of all agents at one step, recorded so the
/// protocol can be replayed offline under different thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenStep {
    pub q_local: Vec<ActionValues>,
    pub messages: Vec<Message>,
    pub alive: Vec<bool>,
}

/// Replays a recorded trajectory through the protocol and returns its log.
pub fn replay(trajectory: &[FrozenStep], cfg: &CommConfig) -> Result<CommLog> {
    let n = trajectory.first().map_or(0, |s| s.q_local.len());
    let mut log = CommLog::new(n);
    for (t, step) in trajectory.iter().enumerate() {
        let (_, rec) = protocol_step(t, &step.q_local, &step.messages, &step.alive, cfg)?;
        log.push(rec);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::combine_all;
    use proptest::prelude::*;

    #[test]
    fn gap_examples() {
        assert!((confidence_gap(&[0.1, 1.6, 3.8]).unwrap() - 2.2).abs() < 1e-12);
        assert_eq!(confidence_gap(&[0.7, 0.7, 0.7]).unwrap(), 0.0);
        assert_eq!(confidence_gap(&[5.0, -1.0, 2.0, 4.0]).unwrap(), 1.0);
        assert!(confidence_gap(&[1.0]).is_err());
    }

    fn sample_step() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let q = vec![vec![0.1, 1.6, 3.8], vec![1.0, 1.1, 0.0], vec![2.0, 0.0, 2.05]];
        let m = vec![vec![0.0, 0.1, 0.0], vec![1.0, -1.0, 0.5], vec![-2.0, 0.0, 2.0]];
        (q, m)
    }

    #[test]
    fn full_config_matches_full_combine() {
        let (q, m) = sample_step();
        let (combined, rec) = protocol_step(0, &q, &m, &[true; 3], &CommConfig::FULL).unwrap();
        assert_eq!(combined, combine_all(&q, &m).unwrap());
        assert_eq!(rec.g_t, 6);
        assert_eq!(rec.requesters, vec![0, 1, 2]);
    }

    #[test]
    fn zero_delta1_never_requests() {
        let (q, m) = sample_step();
        let cfg = CommConfig::new(0.0, f64::NEG_INFINITY).unwrap();
        let (combined, rec) = protocol_step(0, &q, &m, &[true; 3], &cfg).unwrap();
        assert_eq!(combined, q);
        assert_eq!(rec.g_t, 0);
        assert!(rec.requesters.is_empty());
    }

    #[test]
    fn infinite_delta2_never_replies() {
        let (q, m) = sample_step();
        let cfg = CommConfig::new(f64::INFINITY, f64::INFINITY).unwrap();
        let (combined, rec) = protocol_step(0, &q, &m, &[true; 3], &cfg).unwrap();
        assert_eq!(combined, q);
        assert_eq!(rec.g_t, 0);
        assert_eq!(rec.requesters.len(), 3);
    }

    #[test]
    fn confident_agents_do_not_request() {
        // agents 0 and 2 are confident; agent 0's message fails δ2
        let (mut q, m) = sample_step();
        q[2] = vec![5.0, 0.0, 0.0];
        let cfg = CommConfig::new(1.0, 0.1).unwrap();
        assert!(message_variance(&m[0]) < 0.1);
        let (combined, rec) = protocol_step(3, &q, &m, &[true; 3], &cfg).unwrap();
        assert_eq!(rec.requesters, vec![1]);
        assert_eq!(rec.reply_pairs, vec![(2, 1)]);
        assert_eq!(rec.g_t, 1);
        assert_eq!(combined[1], vec![1.0 - 2.0, 1.1, 2.0]);
        assert_eq!(combined[0], q[0]);
    }

    #[test]
    fn g_counts_directed_replies() {
        // exactly one requester (agent 0) and both others pass δ2 → g = 2 of R = 6
        let q = vec![vec![1.0, 1.0], vec![5.0, 0.0], vec![0.0, 5.0]];
        let m = vec![vec![0.0, 0.0], vec![1.0, -1.0], vec![2.0, 0.0]];
        let cfg = CommConfig::new(0.5, 0.5).unwrap();
        let (_, rec) = protocol_step(0, &q, &m, &[true; 3], &cfg).unwrap();
        assert_eq!(rec.g_t, 2);
        assert_eq!(max_pairs(3), 6);
        assert!((beta([rec.g_t], 3, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_agent_never_communicates() {
        let q = vec![vec![1.0, 1.0]];
        let m = vec![vec![3.0, -3.0]];
        let (c, rec) = protocol_step(0, &q, &m, &[true], &CommConfig::FULL).unwrap();
        assert_eq!(c, q);
        assert_eq!(rec.g_t, 0);
    }

    #[test]
    fn dead_agents_are_silent() {
        let q = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]];
        let m = vec![vec![1.0, -1.0]; 3];
        let (c, rec) = protocol_step(0, &q, &m, &[true, false, true], &CommConfig::FULL).unwrap();
        assert_eq!(rec.requesters, vec![0, 2]);
        assert_eq!(rec.reply_pairs, vec![(2, 0), (0, 2)]);
        assert_eq!(c[1], q[1]);
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta([0, 0, 0], 3, 3), 0.0);
        assert_eq!(beta([6, 6], 3, 2), 1.0);
        assert!((beta([2, 0, 4], 3, 3) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(beta([0], 1, 1), 0.0);
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut log = CommLog::new(3);
        log.push(CommRecord {
            t: 0,
            requesters: vec![1],
            reply_pairs: vec![(0, 1), (2, 1)],
            g_t: 2,
        });
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "{\"t\":0,\"requesters\":[1],\"reply_pairs\":[[0,1],[2,1]],\"g_t\":2}\n");
        assert_eq!(CommLog::read_jsonl(3, buf.as_slice()).unwrap(), log);
    }

    fn arb_step() -> impl Strategy<Value = FrozenStep> {
        (
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 3),
            prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 3),
        )
            .prop_map(|(q_local, messages)| FrozenStep {
                q_local,
                messages,
                alive: vec![true; 3],
            })
    }

    proptest! {
        #[test]
        fn beta_monotone_in_thresholds(traj in prop::collection::vec(arb_step(), 1..20)) {
            let mut prev = -1.0;
            for d1 in [-1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0] {
                let b = replay(&traj, &CommConfig::new(d1, 0.0).unwrap()).unwrap().beta();
                prop_assert!(b >= prev);
                prev = b;
            }
            let mut prev = 2.0;
            for d2 in [0.0, 0.25, 0.5, 1.0, 1.5, 2.0] {
                let b = replay(&traj, &CommConfig::new(f64::INFINITY, d2).unwrap()).unwrap().beta();
                prop_assert!(b <= prev);
                prev = b;
            }
        }

        #[test]
        fn g_bounded_by_pairs(step in arb_step(), d1 in -1.0f64..3.0, d2 in -0.5f64..2.0) {
            let (_, rec) = protocol_step(0, &step.q_local, &step.messages, &step.alive,
                &CommConfig::new(d1, d2).unwrap()).unwrap();
            prop_assert!(rec.g_t <= max_pairs(3));
            for (j, i) in &rec.reply_pairs {
                prop_assert!(rec.requesters.contains(i));
                prop_assert!(message_variance(&step.messages[*j]) >= d2);
                prop_assert!(i != j);
            }
        }
    }
}

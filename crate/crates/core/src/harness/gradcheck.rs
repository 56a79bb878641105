//! Finite-difference checks of every differentiable component, run over a
//! range of seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{AgentConfig, AgentNetwork};
use crate::error::Result;
use crate::mixer::{Mixer, MixerKind};
use crate::numerics::gradcheck::{check_param_gradients, check_vector_gradient, GradCheckReport};
use crate::numerics::{dot, Activation, DenseLayer, GruCell, ParamBlock};
use crate::trainer::{Episode, Learner, Method, TrainConfig, Transition};

#[derive(Debug, Clone, Serialize)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

fn random_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dense(seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut total = GradCheckReport::default();
    for act in [Activation::Identity, Activation::LeakyRelu] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamBlock::new();
        let mut layer = DenseLayer::new(&mut p, "fc", 4, 3, act, &mut rng);
        let x = random_vec(&mut rng, 4);
        let w = random_vec(&mut rng, 3);
        layer.forward_record(&p, &x)?;
        let dx = layer.backward(&mut p, &w)?;
        let loss = |p: &ParamBlock, x: &[f64]| Ok(dot(&layer.forward(p, x)?, &w));
        total.merge(check_param_gradients(&mut p.clone(), h, |q| loss(q, &x))?);
        total.merge(check_vector_gradient(&x, &dx, h, |xx| loss(&p, xx))?);
    }
    Ok(total)
}

fn gru(seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamBlock::new();
    let mut cell = GruCell::new(&mut p, "gru", 3, 4, &mut rng);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 3)).collect();
    let h0 = random_vec(&mut rng, 4);
    let w = random_vec(&mut rng, 4);
    let mut state = h0.clone();
    for x in &xs {
        state = cell.forward_record(&p, x, &state)?;
    }
    let mut dh = vec![0.0; 4];
    for _ in &xs {
        let up: Vec<f64> = dh.iter().zip(&w).map(|(a, b)| a + b).collect();
        dh = cell.backward(&mut p, &up)?.1;
    }
    let loss = |p: &ParamBlock, h0: &[f64]| -> Result<f64> {
        let mut s = h0.to_vec();
        let mut total = 0.0;
        for x in &xs {
            s = cell.forward(p, x, &s)?;
            total += dot(&s, &w);
        }
        Ok(total)
    };
    let mut report = check_param_gradients(&mut p.clone(), h, |q| loss(q, &h0))?;
    report.merge(check_vector_gradient(&h0, &dh, h, |hh| loss(&p, hh))?);
    Ok(report)
}

fn small_agent(rng: &mut ChaCha8Rng) -> (ParamBlock, AgentNetwork) {
    let mut p = ParamBlock::new();
    let cfg = AgentConfig {
        obs_dim: 3,
        n_actions: 2,
        embed_dim: 4,
        hidden_dim: 3,
        encoder_hidden: 5,
    };
    let net = AgentNetwork::new(&mut p, cfg, rng);
    (p, net)
}

fn encoder(seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut p, mut net) = small_agent(&mut rng);
    let c = random_vec(&mut rng, 3);
    let w = random_vec(&mut rng, 2);
    net.encode_record(&p, &c)?;
    let dc = net.encode_backward(&mut p, &w)?;
    let loss = |p: &ParamBlock, c: &[f64]| Ok(dot(&net.encode(p, c)?, &w));
    let mut report = check_param_gradients(&mut p.clone(), h, |q| loss(q, &c))?;
    report.merge(check_vector_gradient(&c, &dc, h, |cc| loss(&p, cc))?);
    Ok(report)
}

/// Two-step unroll of the local generator, loss `Σ_t w·q_t + v·c_t`.
fn agent_forward(seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut p, mut net) = small_agent(&mut rng);
    let obs: Vec<Vec<f64>> = (0..2).map(|_| random_vec(&mut rng, 3)).collect();
    let h0 = random_vec(&mut rng, 3);
    let w = random_vec(&mut rng, 2);
    let v = random_vec(&mut rng, 3);
    let mut state = h0.clone();
    for o in &obs {
        state = net.local_forward_record(&p, o, &state)?.c;
    }
    let mut dh = vec![0.0; 3];
    for _ in &obs {
        let extra: Vec<f64> = dh.iter().zip(&v).map(|(a, b)| a + b).collect();
        dh = net.local_backward(&mut p, &w, &extra)?;
    }
    let loss = |p: &ParamBlock, h0: &[f64]| -> Result<f64> {
        let mut s = h0.to_vec();
        let mut total = 0.0;
        for o in &obs {
            let out = net.local_forward(p, o, &s)?;
            total += dot(&out.q_local, &w) + dot(&out.c, &v);
            s = out.c;
        }
        Ok(total)
    };
    let mut report = check_param_gradients(&mut p.clone(), h, |q| loss(q, &h0))?;
    report.merge(check_vector_gradient(&h0, &dh, h, |hh| loss(&p, hh))?);
    Ok(report)
}

fn mixer(kind: MixerKind, seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamBlock::new();
    let mut m = Mixer::new(kind, &mut p, 3, 4, 5, &mut rng);
    let q = random_vec(&mut rng, 3);
    let s = random_vec(&mut rng, 4);
    m.mix_record(&p, &q, &s)?;
    let dq = m.backward(&mut p, 1.0)?;
    let mut report = check_vector_gradient(&q, &dq, h, |qq| m.mix(&p, qq, &s))?;
    if kind == MixerKind::Qmix {
        report.merge(check_param_gradients(&mut p.clone(), h, |pp| m.mix(pp, &q, &s))?);
    }
    Ok(report)
}

/// Penalised TD loss on a 2-agent, 2-action, 2-step episode with a target
/// network distinct from the online one.
fn full_loss(method: Method, seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrainConfig {
        gamma: 0.9,
        lambda: 0.5,
        embed_dim: 3,
        hidden_dim: 3,
        encoder_hidden: 4,
        mixer_hidden: 3,
        batch_size: 1,
        buffer_capacity: 1,
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(method, cfg.clone(), 2, 3, 2, 4, &mut rng)?;
    let other = Learner::new(method, cfg, 2, 3, 2, 4, &mut rng)?;
    learner.set_target(other.params())?;
    let mut v = |k: usize| random_vec(&mut rng, k);
    let steps = (0..2)
        .map(|t| Transition {
            observations: vec![v(3), v(3)],
            state: v(4),
            actions: vec![t % 2, (t + 1) % 2],
            reward: v(1)[0],
            done: false,
        })
        .collect();
    let ep = Episode {
        steps,
        final_observations: vec![v(3), v(3)],
        final_state: v(4),
    };
    learner.compute_loss(&[&ep])?;
    let mut params = learner.params().clone();
    check_param_gradients(&mut params, h, |p| Ok(learner.loss_value(p, &[&ep])?.loss))
}

/// Runs every component check for each seed in `seeds`.
pub fn check_all(seeds: std::ops::Range<u64>, h: f64) -> Result<Vec<ComponentCheck>> {
    type Check = Box<dyn Fn(u64, f64) -> Result<GradCheckReport>>;
    let checks: Vec<(&'static str, Check)> = vec![
        ("dense", Box::new(dense)),
        ("gru", Box::new(gru)),
        ("encoder", Box::new(encoder)),
        ("agent-forward", Box::new(agent_forward)),
        ("mixer-vdn", Box::new(|s, h| mixer(MixerKind::Vdn, s, h))),
        ("mixer-qmix", Box::new(|s, h| mixer(MixerKind::Qmix, s, h))),
        ("loss-vdn", Box::new(|s, h| full_loss(Method::VbcVdn, s, h))),
        ("loss-qmix", Box::new(|s, h| full_loss(Method::VbcQmix, s, h))),
    ];
    let mut out = Vec::with_capacity(checks.len());
    for (component, check) in checks {
        let mut report = GradCheckReport::default();
        for seed in seeds.clone() {
            let mut r = check(seed, h)?;
            r.worst = format!("seed {seed}: {}", r.worst);
            report.merge(r);
        }
        out.push(ComponentCheck {
            component,
            max_rel_error: report.max_rel_error,
            worst: report.worst,
            checked: report.checked,
        });
    }
    Ok(out)
}

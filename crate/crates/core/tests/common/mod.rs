//! Independent reference computations shared by the integration tests and
//! the acceptance run.
#![allow(dead_code)]

use drlmcts::agent::{AgentNets, Episode, TrainConfig, LOG_CLAMP};
use drlmcts::nn::{Activation, Gradients, Mlp};
use drlmcts::signal::{gaussian_matrix, snr_to_noise_variance, Constellation, RealSystem};
use nalgebra::DVector;
use rand::Rng;

/// Random instance with an i.i.d. channel at `snr_db`, resampling singular draws.
pub fn random_system<R: Rng>(rng: &mut R, n_t: usize, n_r: usize, c: &Constellation, snr_db: f64) -> RealSystem {
    let sigma = snr_to_noise_variance(snr_db, n_t, c.symbol_energy());
    loop {
        let h = gaussian_matrix(n_r, n_t, c.is_real(), rng);
        if let Ok(sys) = RealSystem::sample(&h, c, sigma, rng) {
            return sys;
        }
    }
}

/// Every vector of `Q^m`, `x_m` the most significant digit.
pub fn all_vectors(levels: &[f64], m: usize) -> Vec<Vec<f64>> {
    let q = levels.len();
    let total = q.pow(m as u32);
    (0..total)
        .map(|mut code| {
            let mut x = vec![0.0; m];
            for k in 0..m {
                x[k] = levels[code % q];
                code /= q;
            }
            x
        })
        .collect()
}

/// `||y - R x||²` evaluated as a plain matrix expression.
pub fn reduced_metric(sys: &RealSystem, x: &[f64]) -> f64 {
    (sys.y() - sys.r() * DVector::from_column_slice(x)).norm_squared()
}

/// `||y' - H x||²` evaluated as a plain matrix expression.
pub fn received_metric(sys: &RealSystem, x: &[f64]) -> f64 {
    (sys.y_prime() - sys.h() * DVector::from_column_slice(x)).norm_squared()
}

/// First minimizer of `metric` over `Q^m` without pruning.
pub fn exhaustive_argmin(sys: &RealSystem, metric: impl Fn(&RealSystem, &[f64]) -> f64) -> Vec<f64> {
    let levels = sys.constellation().pam_levels();
    let mut best = (f64::INFINITY, Vec::new());
    // Same visiting order as a depth-first search that fixes x_m first.
    let mut candidates = all_vectors(levels, sys.m());
    candidates.sort_by(|a, b| {
        let key = |v: &Vec<f64>| v.iter().rev().map(|s| levels.iter().position(|l| l == s).unwrap()).collect::<Vec<_>>();
        key(a).cmp(&key(b))
    });
    for x in candidates {
        let d = metric(sys, &x);
        if d < best.0 {
            best = (d, x);
        }
    }
    best.1
}

/// Critic loss written directly from its definition, with the bootstrap
/// `q_{l+1}` taken from `frozen_critic`.
pub fn critic_loss(batch: &[Episode], nets: &AgentNets, frozen_critic: &Mlp, cfg: &TrainConfig) -> f64 {
    let mut total = 0.0;
    for ep in batch {
        let m = ep.len();
        let q: Vec<f64> = ep.iter().map(|t| nets.critic.predict(t.state.as_slice()).unwrap()[0]).collect();
        let target: Vec<f64> = ep.iter().map(|t| frozen_critic.predict(t.state.as_slice()).unwrap()[0]).collect();
        for t in ep {
            let next = if t.step + 1 < m { target[t.step + 1] } else { 0.0 };
            let td = t.reward * cfg.reward_scale + cfg.gamma.powi((m - t.step) as i32) * next - q[t.step];
            total += td * td;
        }
    }
    total / batch.len() as f64 + cfg.c1 * sq_norm(&nets.critic)
}

/// Actor loss with the TD coefficients computed by `frozen_critic`.
pub fn actor_loss(batch: &[Episode], nets: &AgentNets, frozen_critic: &Mlp, cfg: &TrainConfig) -> f64 {
    let mut total = 0.0;
    for ep in batch {
        let m = ep.len();
        let q: Vec<f64> = ep.iter().map(|t| frozen_critic.predict(t.state.as_slice()).unwrap()[0]).collect();
        for t in ep {
            let next = if t.step + 1 < m { q[t.step + 1] } else { 0.0 };
            let td = t.reward * cfg.reward_scale + cfg.gamma.powi((m - t.step) as i32) * next - q[t.step];
            let p = nets.actor.predict(t.state.as_slice()).unwrap();
            let ce = -p[t.action].max(LOG_CLAMP).ln();
            let entropy: f64 = -p.iter().map(|v| v * v.max(LOG_CLAMP).ln()).sum::<f64>();
            total += td * ce - cfg.c2 * entropy;
        }
    }
    total / batch.len() as f64 + cfg.c3 * sq_norm(&nets.actor)
}

/// State-value loss with the policy inputs computed by `frozen_actor`.
pub fn state_value_loss(batch: &[Episode], nets: &AgentNets, frozen_actor: &Mlp, cfg: &TrainConfig) -> f64 {
    let mut total = 0.0;
    for ep in batch {
        for t in ep {
            let mut input = t.state.as_slice().to_vec();
            input.extend(frozen_actor.predict(t.state.as_slice()).unwrap());
            let u = nets.state_value.predict(&input).unwrap()[0];
            let err = u - t.episode_return * cfg.reward_scale;
            total += err * err;
        }
    }
    total / batch.len() as f64 + cfg.c4 * sq_norm(&nets.state_value)
}

/// Every state in `batch`: the inputs seen by the critic and the actor.
pub fn state_inputs(batch: &[Episode]) -> Vec<Vec<f64>> {
    batch.iter().flat_map(|ep| ep.iter().map(|t| t.state.as_slice().to_vec())).collect()
}

/// State followed by the frozen actor's policy: the state-value inputs.
pub fn state_value_inputs(batch: &[Episode], frozen_actor: &Mlp) -> Vec<Vec<f64>> {
    state_inputs(batch)
        .into_iter()
        .map(|mut s| {
            let p = frozen_actor.predict(&s).unwrap();
            s.extend(p);
            s
        })
        .collect()
}

fn sq_norm(net: &Mlp) -> f64 {
    net.params().map(|p| p * p).sum()
}

/// Worst violation of `|analytic - numeric| <= max(rel·max(|a|,|n|), abs)`
/// over all parameters, with central differences of step `h`. A parameter
/// whose ±h step moves some ReLU pre-activation across zero on one of
/// `inputs` is not differentiable at that scale and is counted in
/// `straddling` instead.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: usize,
    pub straddling: usize,
    pub worst_excess: f64,
}

pub fn check_gradients(
    net: &Mlp,
    analytic: &Gradients,
    inputs: &[Vec<f64>],
    mut loss: impl FnMut(&Mlp) -> f64,
    h: f64,
    rel: f64,
    abs: f64,
) -> GradCheck {
    let mut probe = net.clone();
    let grads: Vec<f64> = analytic.iter().copied().collect();
    assert_eq!(grads.len(), net.param_count());
    let base = relu_signs(net, inputs);
    let mut out = GradCheck { checked: 0, failures: 0, straddling: 0, worst_excess: 0.0 };
    for (i, &a) in grads.iter().enumerate() {
        let orig = net.param(i);
        probe.set_param(i, orig + h);
        let plus = loss(&probe);
        let kink = relu_signs(&probe, inputs) != base;
        probe.set_param(i, orig - h);
        let minus = loss(&probe);
        let kink = kink || relu_signs(&probe, inputs) != base;
        probe.set_param(i, orig);
        if kink {
            out.straddling += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let allowed = (rel * a.abs().max(numeric.abs())).max(abs);
        let excess = (a - numeric).abs() / allowed;
        out.checked += 1;
        if excess > 1.0 {
            out.failures += 1;
        }
        out.worst_excess = out.worst_excess.max(excess);
    }
    out
}

/// Sign of every ReLU pre-activation for every input, computed with plain loops.
fn relu_signs(net: &Mlp, inputs: &[Vec<f64>]) -> Vec<bool> {
    let mut signs = Vec::new();
    for x in inputs {
        let mut a = x.clone();
        for layer in net.layers() {
            let n_in = layer.in_dim();
            let pre: Vec<f64> = (0..layer.out_dim())
                .map(|o| layer.biases[o] + (0..n_in).map(|k| layer.weights[o * n_in + k] * a[k]).sum::<f64>())
                .collect();
            a = match layer.activation {
                Activation::Relu => {
                    signs.extend(pre.iter().map(|z| *z > 0.0));
                    pre.iter().map(|z| z.max(0.0)).collect()
                }
                Activation::Tanh => pre.iter().map(|z| z.tanh()).collect(),
                Activation::Identity => pre,
                Activation::Softmax => {
                    let top = pre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = pre.iter().map(|z| (z - top).exp()).collect();
                    let total: f64 = e.iter().sum();
                    e.iter().map(|v| v / total).collect()
                }
            };
        }
    }
    signs
}

/// Spearman rank correlation (no ties expected).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (pos, &i) in idx.iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

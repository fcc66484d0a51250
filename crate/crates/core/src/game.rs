//! The adversarial policy / critic / reward game.
//!
//! Critics map a state to a row of action values, the reward network maps a
//! state to a row of next-state rewards, and the policy maps a state to action
//! logits.  All losses are evaluated on per-state tables (one forward pass per
//! state), and their gradients are pulled back through the networks with one
//! backward pass per touched state.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{DynamicsRecord, RewardRecord};
use crate::error::{Error, Result};
use crate::funcapprox::{
    adam_step, entropy, softmax_into, AdamState, Arch, FeatureMap, Head, Input, ParamFunction, TargetPair,
};
use crate::mdp::{SaTable, TabularMdp, TabularPolicy};
use crate::rng::{derive, SeededRng};

/// Static description of the decision problem seen by the learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameEnv {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub terminal: Vec<bool>,
    pub d0: Vec<f64>,
    /// Bootstrap value used when the next state is terminal.
    pub absorbing_value: f64,
}

impl GameEnv {
    pub fn from_mdp(mdp: &TabularMdp, absorbing_value: f64) -> Self {
        GameEnv {
            n_states: mdp.n_states(),
            n_actions: mdp.n_actions(),
            gamma: mdp.gamma(),
            r_max: mdp.r_max(),
            terminal: mdp.terminal_mask().to_vec(),
            d0: mdp.initial_dist().to_vec(),
            absorbing_value,
        }
    }

    pub fn v_max(&self) -> f64 {
        (self.r_max / (1.0 - self.gamma)).max(self.absorbing_value)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetSpec {
    Tabular,
    Linear,
    Mlp { hidden: usize },
}

impl NetSpec {
    pub fn arch(self, n_states: usize, out: usize) -> Arch {
        let features = FeatureMap::OneHot { n: n_states };
        match self {
            NetSpec::Tabular => Arch::Tabular { cells: n_states, out },
            NetSpec::Linear => Arch::Linear { features, out },
            NetSpec::Mlp { hidden } => Arch::Mlp2 { features, hidden, out },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GameConfig {
    pub alpha: f64,
    pub beta: f64,
    pub w: f64,
    pub tau: f64,
    pub eta_fast: f64,
    pub eta_slow: f64,
    pub batch_size: usize,
    pub n_steps: usize,
    /// Defaults to `0.5 * ln |A|`.
    pub entropy_target: Option<f64>,
    /// Defaults to `100 * V_max / sqrt(param count)`.
    pub proj_radius: Option<f64>,
    pub seed: u64,
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
    pub temp_lr: f64,
    pub init_temperature: f64,
    pub critic_net: NetSpec,
    pub reward_net: NetSpec,
    pub policy_net: NetSpec,
    pub trace_every: usize,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            alpha: 1000.0,
            beta: 10.0,
            w: 0.5,
            tau: 0.005,
            eta_fast: 5e-4,
            eta_slow: 5e-5,
            batch_size: 256,
            n_steps: 100_000,
            entropy_target: None,
            proj_radius: None,
            seed: 0,
            warm_start_steps: 2000,
            warm_start_lr: 1e-2,
            temp_lr: 1e-3,
            init_temperature: 0.0,
            critic_net: NetSpec::Tabular,
            reward_net: NetSpec::Tabular,
            policy_net: NetSpec::Tabular,
            trace_every: 1000,
        }
    }
}

impl GameConfig {
    /// Solves the Grid5 fixture in about 100k steps.  Values there are near
    /// 0.7, so `beta` has to be much larger than the default.
    pub fn grid5_preset() -> Self {
        GameConfig {
            alpha: 1e5,
            beta: 1e3,
            eta_fast: 5e-4,
            eta_slow: 5e-5,
            entropy_target: Some(0.05),
            n_steps: 100_000,
            ..GameConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.w) || !(0.0..=1.0).contains(&self.tau) {
            return bad("w and tau must lie in [0, 1]");
        }
        if !(self.eta_fast > 0.0 && self.eta_slow > 0.0 && self.warm_start_lr > 0.0 && self.temp_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.init_temperature < 0.0 {
            return bad("init_temperature must be nonnegative");
        }
        Ok(())
    }

    pub fn entropy_target_for(&self, n_actions: usize) -> f64 {
        self.entropy_target.unwrap_or(0.5 * (n_actions as f64).ln())
    }
}

/// Where the TD targets get their rewards from.
#[derive(Clone, Copy, Debug)]
pub enum RewardSource<'a> {
    /// The learned (or frozen) reward network `g(s, s')`.
    Net(&'a ParamFunction),
    /// Observed labels aligned with the dynamics records.
    Labels(&'a [f64]),
}

/// Full mutable state of the training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameLearner {
    pub env: GameEnv,
    pub policy: ParamFunction,
    pub critics: [TargetPair; 2],
    pub reward_fn: ParamFunction,
    pub opt_policy: AdamState,
    pub opt_critics: [AdamState; 2],
    pub opt_reward: AdamState,
    pub temperature: f64,
    pub reward_frozen: bool,
}

impl GameLearner {
    pub fn new(env: GameEnv, cfg: &GameConfig) -> Self {
        let (ns, na) = (env.n_states, env.n_actions);
        let mut rng = derive(cfg.seed, 17);
        let policy = zero_or_init(cfg.policy_net.arch(ns, na), &mut rng);
        let critic = zero_or_init(cfg.critic_net.arch(ns, na), &mut rng);
        let critic2 = zero_or_init(cfg.critic_net.arch(ns, na), &mut rng);
        let reward_fn = zero_or_init(cfg.reward_net.arch(ns, ns), &mut rng).with_head(Head::Sigmoid, 0.0, env.r_max);
        GameLearner {
            opt_policy: AdamState::for_fn(&policy, cfg.eta_slow),
            opt_critics: [AdamState::for_fn(&critic, cfg.eta_fast), AdamState::for_fn(&critic2, cfg.eta_fast)],
            opt_reward: AdamState::for_fn(&reward_fn, cfg.eta_fast),
            critics: [TargetPair::new(critic, cfg.tau), TargetPair::new(critic2, cfg.tau)],
            policy,
            reward_fn,
            temperature: cfg.init_temperature,
            reward_frozen: false,
            env,
        }
    }

    pub fn tabular_policy(&self) -> TabularPolicy {
        let probs = policy_table(&self.policy, self.env.n_states);
        TabularPolicy::new(self.env.n_states, self.env.n_actions, probs).expect("softmax rows are distributions")
    }

    pub fn critic_table(&self, i: usize) -> SaTable {
        SaTable::from_vec(self.env.n_states, self.env.n_actions, table(&self.critics[i].live, self.env.n_states))
            .expect("table shape")
    }

    pub fn reward_table(&self) -> Vec<f64> {
        table(&self.reward_fn, self.env.n_states)
    }

    pub fn is_finite(&self) -> bool {
        self.policy.is_finite()
            && self.reward_fn.is_finite()
            && self.critics.iter().all(|c| c.live.is_finite() && c.target.is_finite())
            && self.temperature.is_finite()
    }

    fn non_finite_part(&self) -> &'static str {
        if !self.policy.is_finite() {
            "policy"
        } else if !self.reward_fn.is_finite() {
            "reward"
        } else if !self.temperature.is_finite() {
            "temperature"
        } else {
            "critic"
        }
    }

    fn project_critic(&mut self, i: usize, radius: Option<f64>) {
        let v_max = self.env.v_max();
        let f = &mut self.critics[i].live;
        if matches!(f.arch, Arch::Tabular { .. }) {
            f.clip_params(0.0, v_max);
        } else {
            let r = radius.unwrap_or_else(|| 100.0 * v_max / (f.n_params() as f64).sqrt());
            f.l2_project_weights(r);
        }
    }
}

fn zero_or_init(arch: Arch, rng: &mut SeededRng) -> ParamFunction {
    match arch {
        Arch::Tabular { .. } => ParamFunction::zeros(arch),
        _ => ParamFunction::init(arch, rng),
    }
}

/// Forward pass of `f` on every state: row-major `(state, output)`.
pub fn table(f: &ParamFunction, n_states: usize) -> Vec<f64> {
    let k = f.out_dim();
    let mut out = vec![0.0; n_states * k];
    if matches!(f.arch, Arch::Tabular { .. }) && (f.head == Head::Identity || f.bounds.is_none()) {
        out.copy_from_slice(&f.params[..n_states * k]);
        return out;
    }
    for s in 0..n_states {
        f.eval_into(Input::Cell(s), &mut out[s * k..(s + 1) * k]);
    }
    out
}

/// Pull a table gradient `d loss / d f(s, .)` back to parameters.
pub fn backprop_table(f: &ParamFunction, dtable: &[f64]) -> Vec<f64> {
    let k = f.out_dim();
    let mut grad = vec![0.0; f.n_params()];
    for (s, d) in dtable.chunks(k).enumerate() {
        if d.iter().any(|&x| x != 0.0) {
            f.backward(Input::Cell(s), d, &mut grad);
        }
    }
    grad
}

/// `pi(.|s)` for every state, row-major.
pub fn policy_table(pi: &ParamFunction, n_states: usize) -> Vec<f64> {
    let k = pi.out_dim();
    let logits = table(pi, n_states);
    let mut out = vec![0.0; logits.len()];
    for s in 0..n_states {
        softmax_into(&logits[s * k..(s + 1) * k], &mut out[s * k..(s + 1) * k]);
    }
    out
}

#[inline]
fn row(t: &[f64], s: usize, k: usize) -> &[f64] {
    &t[s * k..(s + 1) * k]
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-state bootstrap values `V(s') = sum_a pi(a|s') f(s', a)`, replaced by the
/// absorbing value on terminal states.
fn boot_values(env: &GameEnv, probs: &[f64], f: &[f64]) -> Vec<f64> {
    let na = env.n_actions;
    (0..env.n_states)
        .map(|s| if env.terminal[s] { env.absorbing_value } else { dot(row(probs, s, na), row(f, s, na)) })
        .collect()
}

fn reward_of(src: &RewardSource<'_>, gtab: &[f64], ns: usize, idx: usize, rec: &DynamicsRecord) -> f64 {
    match src {
        RewardSource::Net(_) => gtab[rec.s * ns + rec.sp],
        RewardSource::Labels(l) => l[idx],
    }
}

fn reward_table_of(src: &RewardSource<'_>, ns: usize) -> Vec<f64> {
    match src {
        RewardSource::Net(g) => table(g, ns),
        RewardSource::Labels(_) => Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Losses

/// `mean [f(s, pi) - f(s, a)]`.
pub fn pessimism_loss(batch: &[DynamicsRecord], pi: &ParamFunction, f: &ParamFunction) -> f64 {
    let ns = state_count(pi);
    let na = pi.out_dim();
    let probs = policy_table(pi, ns);
    let q = table(f, ns);
    pessimism_tab(batch, &probs, &q, na, None)
}

/// Same loss with the policy given as a table.
pub fn pessimism_loss_tabular(batch: &[DynamicsRecord], pi: &TabularPolicy, f: &SaTable) -> f64 {
    pessimism_tab(batch, pi.probs(), &f.values, pi.n_actions(), None)
}

fn pessimism_tab(batch: &[DynamicsRecord], probs: &[f64], q: &[f64], na: usize, dq: Option<&mut [f64]>) -> f64 {
    let n = batch.len() as f64;
    let mut total = 0.0;
    for r in batch {
        total += dot(row(probs, r.s, na), row(q, r.s, na)) - q[r.s * na + r.a];
    }
    if let Some(dq) = dq {
        for r in batch {
            for a in 0..na {
                dq[r.s * na + a] += probs[r.s * na + a] / n;
            }
            dq[r.s * na + r.a] -= 1.0 / n;
        }
    }
    total / n
}

/// Gradient of [`pessimism_loss`] with respect to the critic.
pub fn pessimism_grad_f(batch: &[DynamicsRecord], pi: &ParamFunction, f: &ParamFunction) -> (f64, Vec<f64>) {
    let ns = state_count(pi);
    let na = pi.out_dim();
    let probs = policy_table(pi, ns);
    let q = table(f, ns);
    let mut dq = vec![0.0; q.len()];
    let v = pessimism_tab(batch, &probs, &q, na, Some(&mut dq));
    (v, backprop_table(f, &dq))
}

/// `mean (g(s, s') - r)^2`.
pub fn reward_mse_loss(batch: &[RewardRecord], g: &ParamFunction) -> f64 {
    reward_mse_grad(batch, g).0
}

pub fn reward_mse_grad(batch: &[RewardRecord], g: &ParamFunction) -> (f64, Vec<f64>) {
    let ns = g.out_dim();
    let gt = table(g, ns);
    let mut dg = vec![0.0; gt.len()];
    let v = reward_mse_tab(batch, &gt, ns, Some(&mut dg));
    (v, backprop_table(g, &dg))
}

fn reward_mse_tab(batch: &[RewardRecord], gt: &[f64], ns: usize, dg: Option<&mut [f64]>) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut dg = dg;
    for r in batch {
        let e = gt[r.s * ns + r.sp] - r.r;
        total += e * e;
        if let Some(d) = dg.as_deref_mut() {
            d[r.s * ns + r.sp] += 2.0 * e / n;
        }
    }
    total / n
}

/// `mean (f(s,a) - g(s,s') - gamma * f_boot(s', pi))^2`.
pub fn td_loss(
    env: &GameEnv,
    batch: &[DynamicsRecord],
    pi: &ParamFunction,
    f: &ParamFunction,
    f_boot: &ParamFunction,
    g: &ParamFunction,
) -> f64 {
    let ns = env.n_states;
    let probs = policy_table(pi, ns);
    let q = table(f, ns);
    let vb = boot_values(env, &probs, &table(f_boot, ns));
    let gt = table(g, ns);
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|r| {
            let d = q[r.s * env.n_actions + r.a] - gt[r.s * ns + r.sp] - env.gamma * vb[r.sp];
            d * d
        })
        .sum::<f64>()
        / n
}

/// Intermediate tables shared by the DQRA loss and its gradients.
struct DqraTabs<'a> {
    env: &'a GameEnv,
    probs: &'a [f64],
    q: &'a [f64],
    v_self: Vec<f64>,
    v_min: Vec<f64>,
}

impl<'a> DqraTabs<'a> {
    fn new(env: &'a GameEnv, probs: &'a [f64], q: &'a [f64], t1: &[f64], t2: &[f64]) -> Self {
        let qmin: Vec<f64> = t1.iter().zip(t2).map(|(a, b)| a.min(*b)).collect();
        DqraTabs {
            v_self: boot_values(env, probs, q),
            v_min: boot_values(env, probs, &qmin),
            env,
            probs,
            q,
        }
    }

    /// Loss value; accumulates `d/dq` and `d/dreward(record)` when asked.
    fn eval(
        &self,
        batch: &[DynamicsRecord],
        rewards: &dyn Fn(usize, &DynamicsRecord) -> f64,
        w: f64,
        mut dq: Option<&mut [f64]>,
        mut dr: Option<&mut dyn FnMut(usize, &DynamicsRecord, f64)>,
    ) -> f64 {
        let env = self.env;
        let na = env.n_actions;
        let n = batch.len() as f64;
        let mut total = 0.0;
        for (i, r) in batch.iter().enumerate() {
            let base = self.q[r.s * na + r.a] - rewards(i, r);
            let d_res = base - env.gamma * self.v_self[r.sp];
            let d_tgt = base - env.gamma * self.v_min[r.sp];
            total += (1.0 - w) * d_res * d_res + w * d_tgt * d_tgt;
            let c_res = 2.0 * (1.0 - w) * d_res / n;
            let c_tgt = 2.0 * w * d_tgt / n;
            if let Some(dq) = dq.as_deref_mut() {
                dq[r.s * na + r.a] += c_res + c_tgt;
                if !env.terminal[r.sp] && c_res != 0.0 {
                    for a in 0..na {
                        dq[r.sp * na + a] -= c_res * env.gamma * self.probs[r.sp * na + a];
                    }
                }
            }
            if let Some(dr) = dr.as_deref_mut() {
                dr(i, r, -(c_res + c_tgt));
            }
        }
        total / n
    }
}

/// `(1 - w) td(f_i, f_i) + w td(f_i, min(f1_bar, f2_bar))`.
#[allow(clippy::too_many_arguments)]
pub fn dqra_loss(
    env: &GameEnv,
    batch: &[DynamicsRecord],
    pi: &ParamFunction,
    f: &ParamFunction,
    targets: (&ParamFunction, &ParamFunction),
    reward: RewardSource<'_>,
    w: f64,
) -> f64 {
    dqra_impl(env, batch, pi, f, targets, reward, w, false, false).0
}

/// Gradient of [`dqra_loss`] with respect to the critic `f`.
pub fn dqra_grad_f(
    env: &GameEnv,
    batch: &[DynamicsRecord],
    pi: &ParamFunction,
    f: &ParamFunction,
    targets: (&ParamFunction, &ParamFunction),
    reward: RewardSource<'_>,
    w: f64,
) -> (f64, Vec<f64>) {
    let (v, gf, _) = dqra_impl(env, batch, pi, f, targets, reward, w, true, false);
    (v, gf)
}

/// Gradient of [`dqra_loss`] with respect to the reward network.
pub fn dqra_grad_g(
    env: &GameEnv,
    batch: &[DynamicsRecord],
    pi: &ParamFunction,
    f: &ParamFunction,
    targets: (&ParamFunction, &ParamFunction),
    g: &ParamFunction,
    w: f64,
) -> (f64, Vec<f64>) {
    let (v, _, gg) = dqra_impl(env, batch, pi, f, targets, RewardSource::Net(g), w, false, true);
    (v, gg)
}

#[allow(clippy::too_many_arguments)]
fn dqra_impl(
    env: &GameEnv,
    batch: &[DynamicsRecord],
    pi: &ParamFunction,
    f: &ParamFunction,
    targets: (&ParamFunction, &ParamFunction),
    reward: RewardSource<'_>,
    w: f64,
    want_f: bool,
    want_g: bool,
) -> (f64, Vec<f64>, Vec<f64>) {
    let ns = env.n_states;
    let probs = policy_table(pi, ns);
    let q = table(f, ns);
    let t1 = table(targets.0, ns);
    let t2 = table(targets.1, ns);
    let gt = reward_table_of(&reward, ns);
    let tabs = DqraTabs::new(env, &probs, &q, &t1, &t2);
    let rewards = |i: usize, r: &DynamicsRecord| reward_of(&reward, &gt, ns, i, r);
    let mut dq = want_f.then(|| vec![0.0; q.len()]);
    let mut dg = want_g.then(|| vec![0.0; gt.len()]);
    let v = {
        let mut acc = |_: usize, r: &DynamicsRecord, c: f64| {
            if let Some(d) = dg.as_mut() {
                d[r.s * ns + r.sp] += c;
            }
        };
        tabs.eval(batch, &rewards, w, dq.as_deref_mut(), Some(&mut acc))
    };
    let gf = dq.map(|d| backprop_table(f, &d)).unwrap_or_default();
    let gg = match (dg, reward) {
        (Some(d), RewardSource::Net(g)) => backprop_table(g, &d),
        _ => Vec::new(),
    };
    (v, gf, gg)
}

/// `(1 - gamma) f(d0, pi)`.
pub fn initial_value_loss(env: &GameEnv, pi: &ParamFunction, f: &ParamFunction) -> f64 {
    initial_value_grad_f(env, pi, f).0
}

pub fn initial_value_grad_f(env: &GameEnv, pi: &ParamFunction, f: &ParamFunction) -> (f64, Vec<f64>) {
    let ns = env.n_states;
    let probs = policy_table(pi, ns);
    let q = table(f, ns);
    let mut dq = vec![0.0; q.len()];
    let v = initial_value_tab(env, &probs, &q, Some(&mut dq));
    (v, backprop_table(f, &dq))
}

fn initial_value_tab(env: &GameEnv, probs: &[f64], q: &[f64], dq: Option<&mut [f64]>) -> f64 {
    let na = env.n_actions;
    let c = 1.0 - env.gamma;
    let mut v = 0.0;
    let mut dq = dq;
    for (s, &p0) in env.d0.iter().enumerate() {
        if p0 == 0.0 {
            continue;
        }
        v += c * p0 * dot(row(probs, s, na), row(q, s, na));
        if let Some(d) = dq.as_deref_mut() {
            for a in 0..na {
                d[s * na + a] += c * p0 * probs[s * na + a];
            }
        }
    }
    v
}

/// Actor objective: `-mean [f1(s, pi) - f1(s, a)] - temperature * mean H(pi(.|s))`.
///
/// Returns `(loss, mean entropy)`.
pub fn actor_loss(batch: &[DynamicsRecord], pi: &ParamFunction, f1: &ParamFunction, temperature: f64) -> (f64, f64) {
    let (v, _, h) = actor_grad(batch, pi, f1, temperature);
    (v, h)
}

/// Actor loss, its gradient with respect to the policy and the mean batch entropy.
pub fn actor_grad(
    batch: &[DynamicsRecord],
    pi: &ParamFunction,
    f1: &ParamFunction,
    temperature: f64,
) -> (f64, Vec<f64>, f64) {
    let ns = state_count(pi);
    let na = pi.out_dim();
    let probs = policy_table(pi, ns);
    let q = table(f1, ns);
    let (v, dz, h) = actor_tab(batch, &probs, &q, na, temperature);
    (v, backprop_table(pi, &dz), h)
}

fn actor_tab(batch: &[DynamicsRecord], probs: &[f64], q: &[f64], na: usize, temperature: f64) -> (f64, Vec<f64>, f64) {
    let n = batch.len() as f64;
    let ns = probs.len() / na;
    let mut counts = vec![0.0; ns];
    let mut pess = 0.0;
    for r in batch {
        counts[r.s] += 1.0;
        pess += dot(row(probs, r.s, na), row(q, r.s, na)) - q[r.s * na + r.a];
    }
    let mut ent = 0.0;
    let mut dz = vec![0.0; probs.len()];
    for s in (0..ns).filter(|&s| counts[s] > 0.0) {
        let p = row(probs, s, na);
        let qs = row(q, s, na);
        let v = dot(p, qs);
        let h = entropy(p);
        ent += counts[s] * h;
        let c = counts[s] / n;
        for a in 0..na {
            let logp = if p[a] > 0.0 { p[a].ln() } else { 0.0 };
            dz[s * na + a] = c * (-p[a] * (qs[a] - v) + temperature * p[a] * (logp + h));
        }
    }
    let mean_h = ent / n;
    (-pess / n - temperature * mean_h, dz, mean_h)
}

/// Dual ascent on the entropy multiplier, floored at zero.
pub fn temperature_update(temperature: f64, batch_entropy: f64, entropy_target: f64, lr: f64) -> f64 {
    (temperature + lr * (entropy_target - batch_entropy)).max(0.0)
}

fn state_count(f: &ParamFunction) -> usize {
    match f.arch {
        Arch::Tabular { cells, .. } => cells,
        Arch::Linear { features, .. } | Arch::Mlp2 { features, .. } => features.dim(),
    }
}

/// Result of [`empirical_bellman_error`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BellmanEstimate {
    pub value: f64,
    pub converged: bool,
    pub inner_grad_norm: f64,
}

/// `E_D[(f - g - gamma f(s',pi))^2] - min_{f'} E_D[(f' - g - gamma f(s',pi))^2]`.
///
/// The inner class is the architecture of `f`; tables use the closed form,
/// other architectures run Adam from `f` until the gradient norm is below `inner_tol`.
pub fn empirical_bellman_error(
    env: &GameEnv,
    data: &[DynamicsRecord],
    pi: &ParamFunction,
    f: &ParamFunction,
    reward: RewardSource<'_>,
    inner_tol: f64,
) -> BellmanEstimate {
    let ns = env.n_states;
    let na = env.n_actions;
    let probs = policy_table(pi, ns);
    let q = table(f, ns);
    let v = boot_values(env, &probs, &q);
    let gt = reward_table_of(&reward, ns);
    let targets: Vec<f64> = data
        .iter()
        .enumerate()
        .map(|(i, r)| reward_of(&reward, &gt, ns, i, r) + env.gamma * v[r.sp])
        .collect();
    if matches!(f.arch, Arch::Tabular { .. }) {
        return BellmanEstimate {
            value: tabular_bellman_closed_form(data, &q, &targets, na),
            converged: true,
            inner_grad_norm: 0.0,
        };
    }
    let outer = tabular_bellman_closed_form(data, &q, &targets, na);
    let (cells, weights, ybar) = cell_means(data, &targets, q.len(), na);
    let (inner_v, gnorm) = fit_cells(f, ns, &cells, &weights, &ybar, inner_tol);
    BellmanEstimate {
        value: (outer - inner_v).max(0.0),
        converged: gnorm <= inner_tol,
        inner_grad_norm: gnorm,
    }
}

fn cell_means(data: &[DynamicsRecord], targets: &[f64], n_cells: usize, na: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; n_cells];
    let mut cnt = vec![0.0; n_cells];
    for (r, y) in data.iter().zip(targets) {
        sum[r.s * na + r.a] += y;
        cnt[r.s * na + r.a] += 1.0;
    }
    let n = data.len() as f64;
    let cells: Vec<usize> = (0..n_cells).filter(|&c| cnt[c] > 0.0).collect();
    let w = cells.iter().map(|&c| cnt[c] / n).collect();
    let y = cells.iter().map(|&c| sum[c] / cnt[c]).collect();
    (cells, w, y)
}

/// Minimises `sum_c w_c (f(c) - y_c)^2` over the parameters of `f` by
/// Levenberg-Marquardt, solving the damped system in cell space.
/// Returns the attained loss and the final gradient norm.
fn fit_cells(f: &ParamFunction, ns: usize, cells: &[usize], w: &[f64], y: &[f64], tol: f64) -> (f64, f64) {
    let k = cells.len();
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let loss_of = |g: &ParamFunction| {
        let q = table(g, ns);
        cells.iter().zip(w).zip(y).map(|((&c, w), y)| w * (q[c] - y).powi(2)).sum::<f64>()
    };
    let mut cur = f.clone();
    let mut loss = loss_of(&cur);
    let mut lambda = 1e-6;
    let mut gnorm = f64::INFINITY;
    let mut unit = vec![0.0; cur.n_params().max(1)];
    for _ in 0..500 {
        let q = table(&cur, ns);
        let resid: Vec<f64> = (0..k).map(|i| sw[i] * (q[cells[i]] - y[i])).collect();
        let jac: Vec<Vec<f64>> = cells
            .iter()
            .zip(&sw)
            .map(|(&c, s)| {
                unit.clear();
                unit.resize(q.len(), 0.0);
                unit[c] = *s;
                backprop_table(&cur, &unit)
            })
            .collect();
        let np = cur.n_params();
        let grad: Vec<f64> = (0..np).map(|j| 2.0 * (0..k).map(|i| jac[i][j] * resid[i]).sum::<f64>()).collect();
        gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= tol {
            break;
        }
        let gram = nalgebra::DMatrix::from_fn(k, k, |a, b| jac[a].iter().zip(&jac[b]).map(|(x, y)| x * y).sum::<f64>());
        let scale = (0..k).map(|i| gram[(i, i)]).fold(0.0, f64::max).max(1e-12);
        let r = nalgebra::DVector::from_column_slice(&resid);
        let mut improved = false;
        for _ in 0..30 {
            let damped = &gram + nalgebra::DMatrix::identity(k, k) * (lambda * scale);
            let Some(sol) = damped.clone().cholesky().map(|c| c.solve(&r)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = cur.clone();
            for j in 0..np {
                trial.params[j] -= (0..k).map(|i| jac[i][j] * sol[i]).sum::<f64>();
            }
            let l = loss_of(&trial);
            if l.is_finite() && l <= loss {
                improved = l < loss;
                cur = trial;
                loss = l;
                lambda = (lambda * 0.1).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (loss, gnorm)
}

/// `sum_c p(c) (f(c) - ybar(c))^2` over visited cells `c = (s, a)`.
pub fn tabular_bellman_closed_form(data: &[DynamicsRecord], q: &[f64], targets: &[f64], na: usize) -> f64 {
    let mut sum = vec![0.0; q.len()];
    let mut cnt = vec![0.0; q.len()];
    for (r, y) in data.iter().zip(targets) {
        sum[r.s * na + r.a] += y;
        cnt[r.s * na + r.a] += 1.0;
    }
    let n = data.len() as f64;
    (0..q.len())
        .filter(|&c| cnt[c] > 0.0)
        .map(|c| cnt[c] / n * (q[c] - sum[c] / cnt[c]).powi(2))
        .sum()
}

// ---------------------------------------------------------------------------
// Training

/// Which pessimism the follower and leader optimise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Relative pessimism: `E_D[f(s,pi) - f(s,a)]`.
    Atac,
    /// Absolute pessimism: `(1 - gamma) f(d0, pi)`.
    Pspi,
}

/// Training inputs.  `labels`, when present, replaces the reward network in
/// the TD targets (plain offline RL on labelled data).
#[derive(Clone, Copy, Debug)]
pub struct GameData<'a> {
    pub dynamics: &'a [DynamicsRecord],
    pub reward: &'a [RewardRecord],
    pub labels: Option<&'a [f64]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub l_critic1: f64,
    pub l_critic2: f64,
    pub l_reward: f64,
    pub l_actor: f64,
    pub entropy: f64,
    pub temperature: f64,
    #[serde(rename = "J_true")]
    pub j_true: Option<f64>,
    pub bellman_err: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub l_critic: [f64; 2],
    pub l_reward: f64,
    pub l_actor: f64,
    pub entropy: f64,
}

fn sample_batch<T: Clone>(data: &[T], n: usize, rng: &mut SeededRng, idx: &mut Vec<usize>) -> Vec<T> {
    idx.clear();
    idx.extend((0..n).map(|_| rng.gen_range(0..data.len())));
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// Behaviour cloning, reward regression and behavioural TD fitting.
pub fn warm_start(learner: &mut GameLearner, data: GameData<'_>, cfg: &GameConfig, n_steps: usize) {
    let env = learner.env.clone();
    let (ns, na) = (env.n_states, env.n_actions);
    let mut rng = derive(cfg.seed, 101);
    let mut opt_pi = AdamState::for_fn(&learner.policy, cfg.warm_start_lr);
    let mut opt_f = [
        AdamState::for_fn(&learner.critics[0].live, cfg.warm_start_lr),
        AdamState::for_fn(&learner.critics[1].live, cfg.warm_start_lr),
    ];
    let mut opt_g = AdamState::for_fn(&learner.reward_fn, cfg.warm_start_lr);
    let mut idx = Vec::new();
    for _ in 0..n_steps {
        if data.dynamics.is_empty() {
            break;
        }
        let batch = sample_batch(data.dynamics, cfg.batch_size, &mut rng, &mut idx);
        let labels: Option<Vec<f64>> = data.labels.map(|l| idx.iter().map(|&i| l[i]).collect());

        // behaviour cloning: -log pi(a|s)
        let probs = policy_table(&learner.policy, ns);
        let mut dz = vec![0.0; probs.len()];
        let n = batch.len() as f64;
        for r in &batch {
            for a in 0..na {
                dz[r.s * na + a] += probs[r.s * na + a] / n;
            }
            dz[r.s * na + r.a] -= 1.0 / n;
        }
        let gpi = backprop_table(&learner.policy, &dz);
        adam_step(&mut opt_pi, &mut learner.policy, &gpi);

        if !data.reward.is_empty() && !learner.reward_frozen {
            let rb = sample_batch(data.reward, cfg.batch_size, &mut rng, &mut idx);
            let (_, gg) = reward_mse_grad(&rb, &learner.reward_fn);
            adam_step(&mut opt_g, &mut learner.reward_fn, &gg);
        }

        // semi-gradient TD toward the cloned policy's value
        let probs = policy_table(&learner.policy, ns);
        let gt = table(&learner.reward_fn, ns);
        for i in 0..2 {
            let f = &learner.critics[i].live;
            let q = table(f, ns);
            let v = boot_values(&env, &probs, &q);
            let mut dq = vec![0.0; q.len()];
            for (j, r) in batch.iter().enumerate() {
                let rew = match &labels {
                    Some(l) => l[j],
                    None => gt[r.s * ns + r.sp],
                };
                let d = q[r.s * na + r.a] - rew - env.gamma * v[r.sp];
                dq[r.s * na + r.a] += 2.0 * d / n;
            }
            let gf = backprop_table(f, &dq);
            adam_step(&mut opt_f[i], &mut learner.critics[i].live, &gf);
            learner.project_critic(i, cfg.proj_radius);
        }
    }
    for c in &mut learner.critics {
        c.sync();
    }
}

/// One iteration of the two-timescale game.
pub fn atac_step(
    learner: &mut GameLearner,
    data: GameData<'_>,
    cfg: &GameConfig,
    variant: Variant,
    rng: &mut SeededRng,
) -> StepStats {
    let env = learner.env.clone();
    let (ns, na) = (env.n_states, env.n_actions);
    let mut idx = Vec::new();
    let batch_r = if data.reward.is_empty() {
        Vec::new()
    } else {
        sample_batch(data.reward, cfg.batch_size, rng, &mut idx)
    };
    let batch_a = sample_batch(data.dynamics, cfg.batch_size, rng, &mut idx);
    let labels: Option<Vec<f64>> = data.labels.map(|l| idx.iter().map(|&i| l[i]).collect());

    let probs = policy_table(&learner.policy, ns);
    let t1 = table(&learner.critics[0].target, ns);
    let t2 = table(&learner.critics[1].target, ns);
    let gt = table(&learner.reward_fn, ns);
    let rewards = |i: usize, r: &DynamicsRecord| match &labels {
        Some(l) => l[i],
        None => gt[r.s * ns + r.sp],
    };
    let learn_g = labels.is_none() && !learner.reward_frozen;

    // critic and reward losses, all from the pre-update networks
    let mut stats = StepStats::default();
    let mut dg = vec![0.0; if learn_g { gt.len() } else { 0 }];
    let mut critic_grads: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut dqra_total = 0.0;
    for i in 0..2 {
        let f = &learner.critics[i].live;
        let q = table(f, ns);
        let mut dq = vec![0.0; q.len()];
        let lead = match variant {
            Variant::Atac => pessimism_tab(&batch_a, &probs, &q, na, Some(&mut dq)),
            Variant::Pspi => initial_value_tab(&env, &probs, &q, Some(&mut dq)),
        };
        let tabs = DqraTabs::new(&env, &probs, &q, &t1, &t2);
        let mut dq_td = vec![0.0; q.len()];
        let beta = cfg.beta;
        let mut acc = |_: usize, r: &DynamicsRecord, c: f64| {
            if learn_g {
                dg[r.s * ns + r.sp] += beta * c;
            }
        };
        let td = tabs.eval(&batch_a, &rewards, cfg.w, Some(&mut dq_td), Some(&mut acc));
        for (d, t) in dq.iter_mut().zip(&dq_td) {
            *d += beta * t;
        }
        dqra_total += td;
        stats.l_critic[i] = lead + beta * td;
        critic_grads[i] = backprop_table(f, &dq);
    }
    if learn_g {
        let mse = reward_mse_tab(&batch_r, &gt, ns, None);
        let n = batch_r.len() as f64;
        for r in &batch_r {
            dg[r.s * ns + r.sp] += cfg.alpha * 2.0 * (gt[r.s * ns + r.sp] - r.r) / n;
        }
        stats.l_reward = cfg.alpha * mse + cfg.beta * dqra_total;
        let grad_g = backprop_table(&learner.reward_fn, &dg);
        adam_step(&mut learner.opt_reward, &mut learner.reward_fn, &grad_g);
    }
    for (i, g) in critic_grads.iter().enumerate() {
        let (opt, pair) = (&mut learner.opt_critics[i], &mut learner.critics[i]);
        adam_step(opt, &mut pair.live, g);
        learner.project_critic(i, cfg.proj_radius);
    }

    // actor on the updated first critic
    let q1 = table(&learner.critics[0].live, ns);
    let (l_actor, dz, h) = actor_tab(&batch_a, &probs, &q1, na, learner.temperature);
    let gpi = backprop_table(&learner.policy, &dz);
    adam_step(&mut learner.opt_policy, &mut learner.policy, &gpi);
    stats.l_actor = l_actor;
    stats.entropy = h;
    learner.temperature =
        temperature_update(learner.temperature, h, cfg.entropy_target_for(na), cfg.temp_lr);

    for c in &mut learner.critics {
        c.polyak_update().expect("critics share their architecture");
    }
    stats
}

pub type EvalHook<'a> = &'a dyn Fn(&TabularPolicy) -> f64;

/// Non-finite values stopped training; `checkpoint` is the last finite learner.
#[derive(Clone, Debug)]
pub struct Abort {
    pub step: usize,
    pub what: String,
    pub checkpoint: Box<GameLearner>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub policy: TabularPolicy,
    pub trace: Vec<TraceRow>,
    pub learner: GameLearner,
    pub abort: Option<Abort>,
}

impl TrainOutput {
    pub fn into_result(self) -> Result<Self> {
        match &self.abort {
            Some(a) => Err(Error::NonFinite { what: a.what.clone(), step: a.step }),
            None => Ok(self),
        }
    }
}

/// Warm start followed by `n_steps` game iterations.
pub fn train_game(
    env: GameEnv,
    data: GameData<'_>,
    cfg: &GameConfig,
    variant: Variant,
    hook: Option<EvalHook<'_>>,
    reward_init: Option<ParamFunction>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.dynamics.is_empty() {
        return Err(Error::config("the dynamics dataset is empty"));
    }
    if let Some(l) = data.labels {
        if l.len() != data.dynamics.len() {
            return Err(Error::shape("reward labels", data.dynamics.len(), l.len()));
        }
    }
    let mut learner = GameLearner::new(env, cfg);
    if let Some(g) = reward_init {
        learner.reward_fn = g;
        learner.reward_frozen = true;
    }
    warm_start(&mut learner, data, cfg, cfg.warm_start_steps);
    let mut rng = derive(cfg.seed, 202);
    let mut trace = Vec::new();
    let mut checkpoint = learner.clone();
    let every = cfg.trace_every.max(1);
    let mut window = (StepStats::default(), 0usize);
    for step in 1..=cfg.n_steps {
        let st = atac_step(&mut learner, data, cfg, variant, &mut rng);
        if !learner.is_finite() || !st.l_critic.iter().all(|x| x.is_finite()) {
            let what = learner.non_finite_part().to_string();
            return Ok(TrainOutput {
                policy: checkpoint.tabular_policy(),
                trace,
                abort: Some(Abort { step, what, checkpoint: Box::new(checkpoint.clone()) }),
                learner: checkpoint,
            });
        }
        let (acc, k) = &mut window;
        acc.l_critic[0] += st.l_critic[0];
        acc.l_critic[1] += st.l_critic[1];
        acc.l_reward += st.l_reward;
        acc.l_actor += st.l_actor;
        acc.entropy += st.entropy;
        *k += 1;
        if step % every == 0 || step == cfg.n_steps {
            let kf = *k as f64;
            let pol = learner.tabular_policy();
            let src = match data.labels {
                Some(l) => RewardSource::Labels(l),
                None => RewardSource::Net(&learner.reward_fn),
            };
            let be = empirical_bellman_error(&learner.env, data.dynamics, &learner.policy, &learner.critics[0].live, src, 1e-6);
            trace.push(TraceRow {
                step,
                l_critic1: acc.l_critic[0] / kf,
                l_critic2: acc.l_critic[1] / kf,
                l_reward: acc.l_reward / kf,
                l_actor: acc.l_actor / kf,
                entropy: acc.entropy / kf,
                temperature: learner.temperature,
                j_true: hook.map(|h| h(&pol)),
                bellman_err: Some(be.value),
            });
            window = (StepStats::default(), 0);
            checkpoint = learner.clone();
        }
    }
    Ok(TrainOutput {
        policy: learner.tabular_policy(),
        trace,
        learner,
        abort: None,
    })
}

/// Relative-pessimism realization with a learned reward.
pub fn train_mahalo_atac(
    env: GameEnv,
    reward: &[RewardRecord],
    dynamics: &[DynamicsRecord],
    cfg: &GameConfig,
    hook: Option<EvalHook<'_>>,
) -> Result<TrainOutput> {
    let data = GameData { dynamics, reward, labels: None };
    train_game(env, data, cfg, Variant::Atac, hook, None)
}

/// Absolute-pessimism realization; the initial distribution is taken from `env.d0`.
pub fn train_mahalo_pspi(
    env: GameEnv,
    reward: &[RewardRecord],
    dynamics: &[DynamicsRecord],
    cfg: &GameConfig,
    hook: Option<EvalHook<'_>>,
) -> Result<TrainOutput> {
    let data = GameData { dynamics, reward, labels: None };
    train_game(env, data, cfg, Variant::Pspi, hook, None)
}

pub fn write_trace_csv<W: Write>(w: W, rows: &[TraceRow], kind: Option<&str>) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec![
        "step", "l_critic1", "l_critic2", "l_reward", "l_actor", "entropy", "temperature", "J_true", "bellman_err",
    ];
    if kind.is_some() {
        header.push("kind");
    }
    wr.write_record(&header)?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let mut rec = vec![
            r.step.to_string(),
            r.l_critic1.to_string(),
            r.l_critic2.to_string(),
            r.l_reward.to_string(),
            r.l_actor.to_string(),
            r.entropy.to_string(),
            r.temperature.to_string(),
            opt(r.j_true),
            opt(r.bellman_err),
        ];
        if let Some(k) = kind {
            rec.push(k.to_string());
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn save_trace(path: &Path, rows: &[TraceRow], kind: Option<&str>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_trace_csv(std::io::BufWriter::new(f), rows, kind)
}

// ---------------------------------------------------------------------------
// Follower oracles

/// Global minimiser of the follower objective over explicit finite classes.
#[derive(Clone, Debug, PartialEq)]
pub struct FollowerSolution {
    pub f_index: usize,
    pub g_index: usize,
    pub f: SaTable,
    /// Row-major `(s, s')`.
    pub g: Vec<f64>,
    pub objective: f64,
}

pub const FOLLOWER_CLASS_CAP: usize = 1_000_000;

/// Unique `(s, a, s')` transitions with multiplicities.
fn aggregate(data: &[DynamicsRecord]) -> Vec<((usize, usize, usize), f64)> {
    let mut m = std::collections::BTreeMap::new();
    for r in data {
        *m.entry((r.s, r.a, r.sp)).or_insert(0.0) += 1.0;
    }
    m.into_iter().collect()
}

/// Follower objective for tabular `(f, g)`; the Bellman term's inner minimum
/// runs over `inner` when given and over all tables otherwise.
#[allow(clippy::too_many_arguments)]
pub fn follower_objective(
    env: &GameEnv,
    pi: &TabularPolicy,
    f: &SaTable,
    g: &[f64],
    d_r: &[RewardRecord],
    d_a: &[DynamicsRecord],
    alpha: f64,
    beta: f64,
    variant: Variant,
    inner: Option<&[SaTable]>,
) -> f64 {
    let agg = aggregate(d_a);
    let n_a = d_a.len() as f64;
    let ns = env.n_states;
    let lead = match variant {
        Variant::Atac => pessimism_tab(d_a, pi.probs(), &f.values, env.n_actions, None),
        Variant::Pspi => initial_value_tab(env, pi.probs(), &f.values, None),
    };
    let e_r = reward_mse_tab(d_r, g, ns, None);
    let e_a = bellman_term(env, pi.probs(), &f.values, g, &agg, n_a, inner);
    lead + alpha * e_r + beta * e_a
}

fn bellman_term(
    env: &GameEnv,
    probs: &[f64],
    q: &[f64],
    g: &[f64],
    agg: &[((usize, usize, usize), f64)],
    n: f64,
    inner: Option<&[SaTable]>,
) -> f64 {
    let na = env.n_actions;
    let ns = env.n_states;
    let v = boot_values(env, probs, q);
    // per-cell sufficient statistics of the targets
    let mut cnt = vec![0.0; q.len()];
    let mut s1 = vec![0.0; q.len()];
    let mut s2 = 0.0;
    for &((s, a, sp), c) in agg {
        let y = g[s * ns + sp] + env.gamma * v[sp];
        cnt[s * na + a] += c;
        s1[s * na + a] += c * y;
        s2 += c * y * y;
    }
    let sq = |fp: &[f64]| -> f64 {
        let mut t = s2;
        for k in 0..fp.len() {
            if cnt[k] > 0.0 {
                t += cnt[k] * fp[k] * fp[k] - 2.0 * fp[k] * s1[k];
            }
        }
        t / n
    };
    let outer = sq(q);
    let best = match inner {
        Some(class) => class.iter().map(|fp| sq(&fp.values)).fold(f64::INFINITY, f64::min),
        None => {
            let mut t = s2;
            for k in 0..q.len() {
                if cnt[k] > 0.0 {
                    t -= s1[k] * s1[k] / cnt[k];
                }
            }
            t / n
        }
    };
    outer - best
}

/// Brute-force `argmin_{f in F, g in G}` of the follower objective.
#[allow(clippy::too_many_arguments)]
pub fn exact_follower_solve(
    env: &GameEnv,
    pi: &TabularPolicy,
    f_class: &[SaTable],
    g_class: &[Vec<f64>],
    d_r: &[RewardRecord],
    d_a: &[DynamicsRecord],
    alpha: f64,
    beta: f64,
    variant: Variant,
) -> Result<FollowerSolution> {
    let size = f_class.len().saturating_mul(g_class.len());
    if size == 0 || size > FOLLOWER_CLASS_CAP {
        return Err(Error::config(format!("follower class size {size} outside [1, {FOLLOWER_CLASS_CAP}]")));
    }
    let agg = aggregate(d_a);
    let n_a = d_a.len() as f64;
    let ns = env.n_states;
    let e_r: Vec<f64> = g_class.iter().map(|g| reward_mse_tab(d_r, g, ns, None)).collect();
    let mut best: Option<(usize, usize, f64)> = None;
    for (fi, f) in f_class.iter().enumerate() {
        let lead = match variant {
            Variant::Atac => pessimism_tab(d_a, pi.probs(), &f.values, env.n_actions, None),
            Variant::Pspi => initial_value_tab(env, pi.probs(), &f.values, None),
        };
        for (gi, g) in g_class.iter().enumerate() {
            let obj = lead + alpha * e_r[gi] + beta * bellman_term(env, pi.probs(), &f.values, g, &agg, n_a, Some(f_class));
            if best.map_or(true, |(_, _, b)| obj < b) {
                best = Some((fi, gi, obj));
            }
        }
    }
    let (fi, gi, objective) = best.expect("nonempty classes");
    Ok(FollowerSolution {
        f_index: fi,
        g_index: gi,
        f: f_class[fi].clone(),
        g: g_class[gi].clone(),
        objective,
    })
}

/// Gradient-trained follower for a fixed leader over box-bounded tables
/// `f in [0, V_max]`, `g in [0, r_max]`, full-batch Adam.  The Bellman term's
/// inner minimum runs over `inner` when given and over all tables otherwise.
#[allow(clippy::too_many_arguments)]
pub fn train_follower(
    env: &GameEnv,
    pi: &TabularPolicy,
    d_r: &[RewardRecord],
    d_a: &[DynamicsRecord],
    alpha: f64,
    beta: f64,
    variant: Variant,
    inner: Option<&[SaTable]>,
    steps: usize,
    lr: f64,
) -> (SaTable, Vec<f64>) {
    let (ns, na) = (env.n_states, env.n_actions);
    let agg = aggregate(d_a);
    let n = d_a.len() as f64;
    let probs = pi.probs();
    let mut q = vec![env.v_max() / 2.0; ns * na];
    let mut g = vec![env.r_max / 2.0; ns * ns];
    let mut opt_q = AdamState::new(q.len(), lr);
    let mut opt_g = AdamState::new(g.len(), lr * env.r_max / env.v_max().max(1e-12));
    for _ in 0..steps {
        let mut dq = vec![0.0; q.len()];
        match variant {
            Variant::Atac => {
                pessimism_tab(d_a, probs, &q, na, Some(&mut dq));
            }
            Variant::Pspi => {
                initial_value_tab(env, probs, &q, Some(&mut dq));
            }
        }
        let mut dg = vec![0.0; g.len()];
        reward_mse_tab(d_r, &g, ns, Some(&mut dg));
        dg.iter_mut().for_each(|d| *d *= alpha);
        bellman_term_grad(env, probs, &q, &g, &agg, n, beta, inner, &mut dq, &mut dg);
        opt_q.update(&mut q, &dq);
        opt_g.update(&mut g, &dg);
        q.iter_mut().for_each(|x| *x = x.clamp(0.0, env.v_max()));
        g.iter_mut().for_each(|x| *x = x.clamp(0.0, env.r_max));
    }
    (SaTable::from_vec(ns, na, q).expect("shape"), g)
}

/// Adds `scale * d E / d q` and `scale * d E / d g` for the closed-form tabular Bellman term.
#[allow(clippy::too_many_arguments)]
fn bellman_term_grad(
    env: &GameEnv,
    probs: &[f64],
    q: &[f64],
    g: &[f64],
    agg: &[((usize, usize, usize), f64)],
    n: f64,
    scale: f64,
    inner: Option<&[SaTable]>,
    dq: &mut [f64],
    dg: &mut [f64],
) {
    let (ns, na) = (env.n_states, env.n_actions);
    let v = boot_values(env, probs, q);
    let mut cnt = vec![0.0; q.len()];
    let mut s1 = vec![0.0; q.len()];
    for &((s, a, sp), c) in agg {
        cnt[s * na + a] += c;
        s1[s * na + a] += c * (g[s * ns + sp] + env.gamma * v[sp]);
    }
    // E = sum_c (cnt_c / n) (q_c - ybar_c)^2
    // the inner minimiser: cell means, or the best member of `inner` (Danskin)
    let inner_best: Option<&[f64]> = inner.map(|class| {
        let sq = |fp: &[f64]| -> f64 {
            (0..fp.len()).filter(|&k| cnt[k] > 0.0).map(|k| cnt[k] * fp[k] * fp[k] - 2.0 * fp[k] * s1[k]).sum()
        };
        let mut best = (f64::INFINITY, 0);
        for (i, fp) in class.iter().enumerate() {
            let v = sq(&fp.values);
            if v < best.0 {
                best = (v, i);
            }
        }
        class[best.1].values.as_slice()
    });
    let mut dv = vec![0.0; ns];
    for &((s, a, sp), c) in agg {
        let k = s * na + a;
        let target = inner_best.map_or(s1[k] / cnt[k], |fp| fp[k]);
        let dy = -2.0 * (q[k] - target) / n * c; // d E / d y for each record in the cell
        dg[s * ns + sp] += scale * dy;
        dv[sp] += scale * dy * env.gamma;
    }
    for k in 0..q.len() {
        if cnt[k] > 0.0 {
            dq[k] += scale * 2.0 * cnt[k] / n * (q[k] - s1[k] / cnt[k]);
        }
    }
    for sp in 0..ns {
        if dv[sp] != 0.0 && !env.terminal[sp] {
            for a in 0..na {
                dq[sp * na + a] += dv[sp] * probs[sp * na + a];
            }
        }
    }
}

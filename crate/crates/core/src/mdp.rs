//! Finite MDPs with state-transition rewards and exact evaluation oracles.
//!
//! Rewards live on transitions `R(s, s')`; the state-action reward used by
//! the Bellman equations is its expectation under `P(. | s, a)`.  Terminal
//! states are absorbing with zero reward, so all discounted quantities are
//! exact and episode truncation is left to data collection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const ROW_TOL: f64 = 1e-9;
/// Largest state-action count solved with dense LU; iterative above it.
pub const DENSE_LIMIT: usize = 10_000;

/// Dense `n_states x n_actions` table, row-major by state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

/// State-action value function `Q(s, a)`.
pub type QFunction = SaTable;

impl SaTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::filled(n_states, n_actions, 0.0)
    }

    pub fn filled(n_states: usize, n_actions: usize, value: f64) -> Self {
        SaTable {
            n_states,
            n_actions,
            values: vec![value; n_states * n_actions],
        }
    }

    pub fn from_vec(n_states: usize, n_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_states * n_actions {
            return Err(Error::shape("state-action table", n_states * n_actions, values.len()));
        }
        Ok(SaTable {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_actions) {
            return Err(Error::shape("state-action table rows", n_actions, "ragged"));
        }
        Self::from_vec(n_states, n_actions, rows.concat())
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn max_abs_diff(&self, other: &SaTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_dims(&self, what: &'static str, n_states: usize, n_actions: usize) -> Result<()> {
        if self.n_states != n_states || self.n_actions != n_actions {
            return Err(Error::shape(
                what,
                format!("{n_states}x{n_actions}"),
                format!("{}x{}", self.n_states, self.n_actions),
            ));
        }
        Ok(())
    }
}

/// Markovian policy `pi(a | s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::shape("policy", n_states * n_actions, probs.len()));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid("policy", format!("negative or non-finite entry in row {s}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::invalid("policy", format!("row {s} sums to {sum}")));
            }
        }
        Ok(TabularPolicy {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_actions = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), n_actions, rows.concat())
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::invalid("policy", format!("action {a} out of range at state {s}")));
            }
            probs[s * n_actions + a] = 1.0;
        }
        Ok(TabularPolicy {
            n_states: actions.len(),
            n_actions,
            probs,
        })
    }

    /// Greedy policy over `q`, ties broken toward the lowest action index.
    pub fn greedy(q: &SaTable) -> Self {
        let actions: Vec<usize> = (0..q.n_states).map(|s| argmax_lowest(q.row(s))).collect();
        Self::deterministic(q.n_actions, &actions).expect("argmax is in range")
    }

    /// `(1 - eps) * self + eps * uniform`.
    pub fn eps_mix(&self, eps: f64) -> Self {
        let u = 1.0 / self.n_actions as f64;
        let probs = self.probs.iter().map(|&p| (1.0 - eps) * p + eps * u).collect();
        TabularPolicy {
            n_states: self.n_states,
            n_actions: self.n_actions,
            probs,
        }
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    #[inline]
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_states).map(|s| self.row(s).to_vec()).collect()
    }

    /// Most likely action per state (lowest index on ties).
    pub fn argmax_actions(&self) -> Vec<usize> {
        (0..self.n_states).map(|s| argmax_lowest(self.row(s))).collect()
    }

    /// `f(s, pi) = sum_a pi(a|s) f(s, a)`.
    #[inline]
    pub fn expect_row(&self, s: usize, f_row: &[f64]) -> f64 {
        self.row(s).iter().zip(f_row).map(|(p, f)| p * f).sum()
    }
}

/// Lowest index among entries within a relative `1e-9` of the maximum.
pub fn argmax_lowest(row: &[f64]) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tie = 1e-9 * (1.0 + max.abs());
    row.iter().position(|&v| v >= max - tie).unwrap_or(0)
}

/// Discounted, normalised state-action occupancy `d(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub weights: SaTable,
}

impl OccupancyMeasure {
    pub fn new(weights: SaTable) -> Result<Self> {
        if weights.values.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::invalid("occupancy", "negative weight"));
        }
        let sum: f64 = weights.values.iter().sum();
        if (sum - 1.0).abs() > 1e-8 {
            return Err(Error::invalid("occupancy", format!("weights sum to {sum}")));
        }
        Ok(OccupancyMeasure { weights })
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.weights.get(s, a)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights.values
    }

    /// Marginal over states.
    pub fn state_marginal(&self) -> Vec<f64> {
        (0..self.weights.n_states)
            .map(|s| self.weights.row(s).iter().sum())
            .collect()
    }
}

/// Finite discounted MDP with transition rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    r_max: f64,
    gamma: f64,
    initial_dist: Vec<f64>,
    terminal: Vec<usize>,
    is_terminal: Vec<bool>,
}

/// On-disk JSON layout of an MDP.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct MdpFile {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    r_max: f64,
    d0: Vec<f64>,
    #[serde(default)]
    terminal: Vec<usize>,
    #[serde(rename = "P")]
    p: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
}

impl TryFrom<MdpFile> for TabularMdp {
    type Error = Error;

    fn try_from(f: MdpFile) -> Result<Self> {
        if f.p.len() != f.n_states || f.p.iter().any(|row| row.len() != f.n_actions) {
            return Err(Error::shape("P", format!("[{}][{}][..]", f.n_states, f.n_actions), "mismatched"));
        }
        if f.r.len() != f.n_states {
            return Err(Error::shape("R", f.n_states, f.r.len()));
        }
        let transition: Vec<f64> = f.p.into_iter().flatten().flatten().collect();
        let reward: Vec<f64> = f.r.into_iter().flatten().collect();
        TabularMdp::new(
            f.n_states,
            f.n_actions,
            transition,
            reward,
            f.r_max,
            f.gamma,
            f.d0,
            f.terminal,
        )
    }
}

impl From<TabularMdp> for MdpFile {
    fn from(m: TabularMdp) -> Self {
        let (ns, na) = (m.n_states, m.n_actions);
        let p = (0..ns)
            .map(|s| (0..na).map(|a| m.next_dist(s, a).to_vec()).collect())
            .collect();
        let r = (0..ns).map(|s| m.reward[s * ns..(s + 1) * ns].to_vec()).collect();
        MdpFile {
            n_states: ns,
            n_actions: na,
            gamma: m.gamma,
            r_max: m.r_max,
            d0: m.initial_dist,
            terminal: m.terminal,
            p,
            r,
        }
    }
}

impl TabularMdp {
    /// Build and validate.  `transition` is indexed `(s, a, s')`, `reward` `(s, s')`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        r_max: f64,
        gamma: f64,
        initial_dist: Vec<f64>,
        terminal: Vec<usize>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::invalid("mdp", "needs at least one state and one action"));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::shape("transition", n_states * n_actions * n_states, transition.len()));
        }
        if reward.len() != n_states * n_states {
            return Err(Error::shape("reward", n_states * n_states, reward.len()));
        }
        if initial_dist.len() != n_states {
            return Err(Error::shape("d0", n_states, initial_dist.len()));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid("mdp", format!("gamma {gamma} outside [0, 1)")));
        }
        if !(r_max >= 0.0) || !r_max.is_finite() {
            return Err(Error::invalid("mdp", format!("r_max {r_max} must be finite and >= 0")));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..(s * n_actions + a + 1) * n_states];
                if row.iter().any(|&p| !(p >= 0.0)) {
                    return Err(Error::invalid("mdp", format!("negative probability at ({s},{a})")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOL {
                    return Err(Error::invalid("mdp", format!("P({s},{a},.) sums to {sum}")));
                }
            }
        }
        if let Some(i) = reward.iter().position(|&r| !(r >= 0.0 && r <= r_max)) {
            return Err(Error::invalid(
                "mdp",
                format!("reward R({},{}) = {} outside [0, {r_max}]", i / n_states, i % n_states, reward[i]),
            ));
        }
        let d0_sum: f64 = initial_dist.iter().sum();
        if initial_dist.iter().any(|&p| !(p >= 0.0)) || (d0_sum - 1.0).abs() > ROW_TOL {
            return Err(Error::invalid("mdp", format!("d0 is not a distribution (sum {d0_sum})")));
        }
        let mut is_terminal = vec![false; n_states];
        for &t in &terminal {
            if t >= n_states {
                return Err(Error::invalid("mdp", format!("terminal state {t} out of range")));
            }
            for a in 0..n_actions {
                if (transition[(t * n_actions + a) * n_states + t] - 1.0).abs() > ROW_TOL {
                    return Err(Error::invalid("mdp", format!("terminal state {t} is not absorbing")));
                }
            }
            if reward[t * n_states + t] != 0.0 {
                return Err(Error::invalid("mdp", format!("terminal state {t} has nonzero self reward")));
            }
            is_terminal[t] = true;
        }
        let mut terminal = terminal;
        terminal.sort_unstable();
        terminal.dedup();
        Ok(TabularMdp {
            n_states,
            n_actions,
            transition,
            reward,
            r_max,
            gamma,
            initial_dist,
            terminal,
            is_terminal,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("mdp serialises")
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    #[inline]
    pub fn n_states(&self) -> usize {
        self.n_states
    }
    #[inline]
    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
    #[inline]
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    #[inline]
    pub fn r_max(&self) -> f64 {
        self.r_max
    }
    /// `r_max / (1 - gamma)`.
    #[inline]
    pub fn v_max(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }
    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }
    pub fn terminal_states(&self) -> &[usize] {
        &self.terminal
    }
    #[inline]
    pub fn is_terminal(&self, s: usize) -> bool {
        self.is_terminal[s]
    }
    pub fn terminal_mask(&self) -> &[bool] {
        &self.is_terminal
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, sp: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + sp]
    }

    #[inline]
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    #[inline]
    pub fn r(&self, s: usize, sp: usize) -> f64 {
        self.reward[s * self.n_states + sp]
    }

    pub fn reward_matrix(&self) -> &[f64] {
        &self.reward
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.n_states() != self.n_states || pi.n_actions() != self.n_actions {
            return Err(Error::shape(
                "policy",
                format!("{}x{}", self.n_states, self.n_actions),
                format!("{}x{}", pi.n_states(), pi.n_actions()),
            ));
        }
        Ok(())
    }

    /// `sum_{s'} P(s'|s,a) g(s,s')` for an arbitrary transition function `g` (row-major `(s, s')`).
    pub fn expect_transition_fn(&self, g: &[f64]) -> SaTable {
        let ns = self.n_states;
        let mut out = SaTable::zeros(ns, self.n_actions);
        for s in 0..ns {
            let g_row = &g[s * ns..(s + 1) * ns];
            for a in 0..self.n_actions {
                let v = self.next_dist(s, a).iter().zip(g_row).map(|(p, g)| p * g).sum();
                out.set(s, a, v);
            }
        }
        out
    }

    /// Policy-induced state transition matrix and state reward.
    fn policy_chain(&self, pi: &TabularPolicy, r_bar: &SaTable) -> (DMatrix<f64>, DVector<f64>) {
        let ns = self.n_states;
        let mut p_pi = DMatrix::zeros(ns, ns);
        let mut r_pi = DVector::zeros(ns);
        for s in 0..ns {
            for a in 0..self.n_actions {
                let w = pi.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                r_pi[s] += w * r_bar.get(s, a);
                for (sp, &p) in self.next_dist(s, a).iter().enumerate() {
                    p_pi[(s, sp)] += w * p;
                }
            }
        }
        (p_pi, r_pi)
    }

    fn iteration_cap(&self, tol: f64) -> usize {
        const MARGIN: usize = 100;
        if self.gamma == 0.0 || self.v_max() == 0.0 {
            return MARGIN;
        }
        let ratio = (tol * (1.0 - self.gamma) / self.v_max()).min(1.0);
        let k = (ratio.ln() / self.gamma.ln()).ceil().max(0.0) as usize;
        k + MARGIN
    }
}

/// `R_bar(s, a) = sum_{s'} P(s'|s,a) R(s,s')`.
pub fn effective_reward(mdp: &TabularMdp) -> SaTable {
    mdp.expect_transition_fn(&mdp.reward)
}

/// `(P^pi f)(s,a) = gamma * sum_{s'} P(s'|s,a) sum_{a'} pi(a'|s') f(s',a')`.
pub fn apply_transition_op(mdp: &TabularMdp, pi: &TabularPolicy, f: &SaTable) -> Result<SaTable> {
    mdp.check_policy(pi)?;
    f.check_dims("f", mdp.n_states, mdp.n_actions)?;
    let v: Vec<f64> = (0..mdp.n_states).map(|s| pi.expect_row(s, f.row(s))).collect();
    Ok(backup(mdp, &v))
}

/// `gamma * E_{s'}[v(s')]` for every `(s, a)`.
fn backup(mdp: &TabularMdp, v: &[f64]) -> SaTable {
    let mut out = SaTable::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let ev: f64 = mdp.next_dist(s, a).iter().zip(v).map(|(p, v)| p * v).sum();
            out.set(s, a, mdp.gamma * ev);
        }
    }
    out
}

/// Sup-norm of `Q - R_bar - P^pi Q`.
pub fn bellman_residual(mdp: &TabularMdp, pi: &TabularPolicy, q: &SaTable) -> Result<f64> {
    let r_bar = effective_reward(mdp);
    let pq = apply_transition_op(mdp, pi, q)?;
    Ok(q.values
        .iter()
        .zip(&r_bar.values)
        .zip(&pq.values)
        .map(|((q, r), p)| (q - r - p).abs())
        .fold(0.0, f64::max))
}

/// Exact `Q^pi`: dense linear solve on the state chain, iterative for large MDPs.
pub fn policy_eval_q(mdp: &TabularMdp, pi: &TabularPolicy, tol: f64) -> Result<QFunction> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance", format!("{tol} must be > 0")));
    }
    mdp.check_policy(pi)?;
    let r_bar = effective_reward(mdp);
    if mdp.gamma == 0.0 {
        return Ok(r_bar);
    }
    if mdp.n_states * mdp.n_actions <= DENSE_LIMIT {
        let (p_pi, r_pi) = mdp.policy_chain(pi, &r_bar);
        let a = DMatrix::identity(mdp.n_states, mdp.n_states) - p_pi * mdp.gamma;
        if let Some(v) = a.lu().solve(&r_pi) {
            let q = add(&r_bar, &backup(mdp, v.as_slice()));
            if bellman_residual(mdp, pi, &q)? <= tol {
                return Ok(q);
            }
        }
    }
    iterate_policy_q(mdp, pi, &r_bar, tol)
}

fn iterate_policy_q(mdp: &TabularMdp, pi: &TabularPolicy, r_bar: &SaTable, tol: f64) -> Result<QFunction> {
    let cap = mdp.iteration_cap(tol);
    let mut q = r_bar.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..cap {
        let next = add(r_bar, &apply_transition_op(mdp, pi, &q)?);
        residual = next.max_abs_diff(&q);
        q = next;
        // residual of the new iterate is at most gamma * step size
        if mdp.gamma * residual <= tol {
            return Ok(q);
        }
    }
    Err(Error::Convergence {
        what: "policy evaluation",
        iterations: cap,
        residual,
    })
}

fn add(a: &SaTable, b: &SaTable) -> SaTable {
    SaTable {
        n_states: a.n_states,
        n_actions: a.n_actions,
        values: a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
    }
}

/// Which extremum value iteration chases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extremum {
    Max,
    Min,
}

/// Optimal `Q*` and its greedy policy (ties toward the lowest action index).
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<(QFunction, TabularPolicy)> {
    value_iteration_ext(mdp, tol, Extremum::Max)
}

/// Value iteration for either the best or the worst policy.
pub fn value_iteration_ext(mdp: &TabularMdp, tol: f64, ext: Extremum) -> Result<(QFunction, TabularPolicy)> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance", format!("{tol} must be > 0")));
    }
    let r_bar = effective_reward(mdp);
    let pick = |row: &[f64]| match ext {
        Extremum::Max => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Extremum::Min => row.iter().copied().fold(f64::INFINITY, f64::min),
    };
    let cap = mdp.iteration_cap(tol);
    let mut q = r_bar.clone();
    let mut converged = mdp.gamma == 0.0;
    let mut residual = 0.0;
    for _ in 0..cap {
        if converged {
            break;
        }
        let v: Vec<f64> = (0..mdp.n_states).map(|s| pick(q.row(s))).collect();
        let next = add(&r_bar, &backup(mdp, &v));
        residual = next.max_abs_diff(&q);
        q = next;
        converged = mdp.gamma * residual <= tol;
    }
    if !converged {
        return Err(Error::Convergence {
            what: "value iteration",
            iterations: cap,
            residual,
        });
    }
    let policy = match ext {
        Extremum::Max => TabularPolicy::greedy(&q),
        Extremum::Min => {
            let neg = SaTable {
                values: q.values.iter().map(|v| -v).collect(),
                ..q.clone()
            };
            TabularPolicy::greedy(&neg)
        }
    };
    Ok((q, policy))
}

/// Discounted occupancy `d^pi(s,a) = (1-gamma) E[sum_t gamma^t 1(s_t=s, a_t=a)]`.
pub fn occupancy(mdp: &TabularMdp, pi: &TabularPolicy, tol: f64) -> Result<OccupancyMeasure> {
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance", format!("{tol} must be > 0")));
    }
    mdp.check_policy(pi)?;
    let ns = mdp.n_states;
    let g = mdp.gamma;
    let d0 = DVector::from_column_slice(&mdp.initial_dist);
    let r_bar = effective_reward(mdp);
    let (p_pi, _) = mdp.policy_chain(pi, &r_bar);

    let mut state_occ: Option<DVector<f64>> = None;
    if ns * mdp.n_actions <= DENSE_LIMIT {
        // (I - gamma P_pi^T) d = (1 - gamma) d0
        let a = DMatrix::identity(ns, ns) - p_pi.transpose() * g;
        state_occ = a.lu().solve(&(&d0 * (1.0 - g)));
    }
    let state_occ = match state_occ {
        Some(d) => d,
        None => {
            let cap = mdp.iteration_cap(tol).max(1000);
            let p_t = p_pi.transpose();
            let mut d = &d0 * (1.0 - g);
            let mut term = d.clone();
            let mut done = false;
            for _ in 0..cap {
                term = &p_t * &term * g;
                d += &term;
                if term.amax() <= tol * (1.0 - g) {
                    done = true;
                    break;
                }
            }
            if !done {
                return Err(Error::Convergence {
                    what: "occupancy",
                    iterations: cap,
                    residual: term.amax(),
                });
            }
            d
        }
    };
    let mut weights = SaTable::zeros(ns, mdp.n_actions);
    for s in 0..ns {
        let ds = state_occ[s].max(0.0);
        for a in 0..mdp.n_actions {
            weights.set(s, a, ds * pi.prob(s, a));
        }
    }
    // remove LU round-off so the normalisation invariant holds tightly
    let total: f64 = weights.values.iter().sum();
    if total > 0.0 {
        weights.values.iter_mut().for_each(|w| *w /= total);
    }
    OccupancyMeasure::new(weights)
}

/// `J(pi) = sum_s d0(s) sum_a pi(a|s) Q^pi(s,a)`.
pub fn expected_return(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let q = policy_eval_q(mdp, pi, 1e-10)?;
    Ok(initial_value(mdp, pi, &q))
}

/// `f(d0, pi) = sum_s d0(s) f(s, pi)`.
pub fn initial_value(mdp: &TabularMdp, pi: &TabularPolicy, f: &SaTable) -> f64 {
    mdp.initial_dist
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(s, &p)| p * pi.expect_row(s, f.row(s)))
        .sum()
}

/// `J(pi)` via `(1/(1-gamma)) sum d^pi(s,a) R_bar(s,a)`; cross-check for [`expected_return`].
pub fn return_from_occupancy(mdp: &TabularMdp, d: &OccupancyMeasure) -> f64 {
    let r_bar = effective_reward(mdp);
    let inner: f64 = d.as_slice().iter().zip(&r_bar.values).map(|(d, r)| d * r).sum();
    inner / (1.0 - mdp.gamma)
}

//! Transfer coefficients, off-support error terms and the robust-improvement
//! audit, computed by brute force on small tabular instances.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datasets::{DynamicsRecord, RewardRecord};
use crate::error::{Error, Result};
use crate::mdp::{
    apply_transition_op, effective_reward, expected_return, occupancy, value_iteration_ext, Extremum, SaTable,
    TabularMdp, TabularPolicy,
};
use crate::par::parallel_map;

/// Denominators below this are treated as zero.
pub const ZERO_DENOMINATOR: f64 = 1e-12;

/// All tables with `cells` entries drawn from `value_grid`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteClassSpec {
    pub value_grid: Vec<f64>,
    pub cells: usize,
    pub cap: usize,
}

impl FiniteClassSpec {
    pub fn new(value_grid: Vec<f64>, cells: usize, cap: usize) -> Result<Self> {
        let spec = FiniteClassSpec { value_grid, cells, cap };
        spec.size()?;
        Ok(spec)
    }

    /// `|grid|^cells`, or a config error past the cap.
    pub fn size(&self) -> Result<usize> {
        if self.value_grid.is_empty() {
            return Err(Error::config("value grid is empty"));
        }
        let n = u32::try_from(self.cells)
            .ok()
            .and_then(|c| self.value_grid.len().checked_pow(c))
            .filter(|&n| n <= self.cap);
        n.ok_or_else(|| {
            Error::config(format!("class {}^{} exceeds the cap {}", self.value_grid.len(), self.cells, self.cap))
        })
    }

    /// Member `index` in odometer order, first cell fastest.
    pub fn member(&self, mut index: usize) -> Vec<f64> {
        let k = self.value_grid.len();
        (0..self.cells)
            .map(|_| {
                let v = self.value_grid[index % k];
                index /= k;
                v
            })
            .collect()
    }

    pub fn members(&self) -> Result<Vec<Vec<f64>>> {
        Ok((0..self.size()?).map(|i| self.member(i)).collect())
    }
}

/// Enumeration direction, used to cross-check a supremum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Forward,
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    /// Absent for the reward coefficient.
    pub f: Option<Vec<f64>>,
    pub g: Vec<f64>,
    pub numerator: f64,
    pub denominator: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Supremum of the ratio; `+inf` when `unbounded`.
    pub coefficient: f64,
    /// Some pair has positive numerator and a vanishing denominator.
    pub unbounded: bool,
    /// Pair attaining the supremum (or the first unbounded pair).
    pub witness: Option<Witness>,
    pub skipped: usize,
    pub evaluated: usize,
}

fn weighted_sq(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(w, x)| w * x * x).sum()
}

/// Folds ratios into a report, keeping the first maximiser in visiting order.
struct SupTracker {
    report: TransferReport,
    best: f64,
}

impl SupTracker {
    fn new() -> Self {
        SupTracker {
            report: TransferReport { coefficient: 1.0, unbounded: false, witness: None, skipped: 0, evaluated: 0 },
            best: f64::NEG_INFINITY,
        }
    }

    fn push(&mut self, num: f64, den: f64, witness: impl FnOnce() -> Witness) {
        self.report.evaluated += 1;
        if den < ZERO_DENOMINATOR {
            self.report.skipped += 1;
            if num >= ZERO_DENOMINATOR && !self.report.unbounded {
                self.report.unbounded = true;
                self.report.witness = Some(witness());
            }
            return;
        }
        let ratio = num / den;
        if !self.report.unbounded && ratio > self.best {
            self.best = ratio;
            self.report.witness = Some(witness());
        }
    }

    fn finish(mut self) -> TransferReport {
        self.report.coefficient = if self.report.unbounded {
            f64::INFINITY
        } else if self.best.is_finite() {
            self.best
        } else {
            1.0
        };
        self.report
    }
}

fn indices(n: usize, order: Order) -> Box<dyn Iterator<Item = usize>> {
    match order {
        Order::Forward => Box::new(0..n),
        Order::Reverse => Box::new((0..n).rev()),
    }
}

fn check_len(what: &'static str, want: usize, got: usize) -> Result<()> {
    if want != got {
        return Err(Error::shape(what, want, got));
    }
    Ok(())
}

/// `(f - P^pi f) - g_bar` for tabular `f` (`(s, a)`) and `g` (`(s, s')`).
pub fn bellman_residual_vec(mdp: &TabularMdp, pi: &TabularPolicy, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let ft = SaTable::from_vec(ns, na, f.to_vec())?;
    check_len("g", ns * ns, g.len())?;
    let pf = apply_transition_op(mdp, pi, &ft)?;
    let gbar = mdp.expect_transition_fn(g);
    Ok((0..ns * na).map(|i| (f[i] - pf.values[i]) - gbar.values[i]).collect())
}

/// `||r||^2_rho / ||r||^2_mu` for one pair, `None` when the denominator vanishes.
pub fn bellman_ratio(
    rho: &[f64],
    mu: &[f64],
    f: &[f64],
    g: &[f64],
    pi: &TabularPolicy,
    mdp: &TabularMdp,
) -> Result<Option<f64>> {
    let r = bellman_residual_vec(mdp, pi, f, g)?;
    let den = weighted_sq(mu, &r);
    Ok((den >= ZERO_DENOMINATOR).then(|| weighted_sq(rho, &r) / den))
}

/// Bellman error transfer coefficient by exhaustive enumeration of `F x G`.
///
/// `rho` and `mu` are `(s, a)` weights and need not be normalised.
pub fn bellman_transfer_coeff(
    rho: &[f64],
    mu: &[f64],
    f_class: &FiniteClassSpec,
    g_class: &FiniteClassSpec,
    pi: &TabularPolicy,
    mdp: &TabularMdp,
    order: Order,
) -> Result<TransferReport> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    check_len("rho", ns * na, rho.len())?;
    check_len("mu", ns * na, mu.len())?;
    check_len("F cells", ns * na, f_class.cells)?;
    check_len("G cells", ns * ns, g_class.cells)?;
    let (nf, ng) = (f_class.size()?, g_class.size()?);
    // residual = (f - P^pi f) - g_bar
    let zero_g = vec![0.0; ns * ns];
    let a: Vec<Vec<f64>> =
        (0..nf).map(|i| bellman_residual_vec(mdp, pi, &f_class.member(i), &zero_g)).collect::<Result<_>>()?;
    let b: Vec<Vec<f64>> = (0..ng).map(|j| mdp.expect_transition_fn(&g_class.member(j)).values).collect();
    let mut r = vec![0.0; ns * na];
    let mut sup = SupTracker::new();
    for i in indices(nf, order) {
        for j in indices(ng, order) {
            for (k, rk) in r.iter_mut().enumerate() {
                *rk = a[i][k] - b[j][k];
            }
            let (num, den) = (weighted_sq(rho, &r), weighted_sq(mu, &r));
            sup.push(num, den, || Witness {
                f: Some(f_class.member(i)),
                g: g_class.member(j),
                numerator: num,
                denominator: den,
            });
        }
    }
    Ok(sup.finish())
}

/// `||g_bar - R_bar||^2_rho / ||g - R||^2_nu` for one `g`.
pub fn reward_ratio(rho: &[f64], nu: &[f64], g: &[f64], mdp: &TabularMdp) -> Result<Option<f64>> {
    let (num, den) = reward_terms(rho, nu, g, mdp)?;
    Ok((den >= ZERO_DENOMINATOR).then(|| num / den))
}

fn reward_terms(rho: &[f64], nu: &[f64], g: &[f64], mdp: &TabularMdp) -> Result<(f64, f64)> {
    let ns = mdp.n_states();
    check_len("g", ns * ns, g.len())?;
    let gbar = mdp.expect_transition_fn(g);
    let rbar = effective_reward(mdp);
    let dbar: Vec<f64> = gbar.values.iter().zip(&rbar.values).map(|(x, y)| x - y).collect();
    let d: Vec<f64> = g.iter().zip(mdp.reward_matrix()).map(|(x, y)| x - y).collect();
    Ok((weighted_sq(rho, &dbar), weighted_sq(nu, &d)))
}

/// Reward error transfer coefficient; `rho` over `(s, a)`, `nu` over `(s, s')`.
pub fn reward_transfer_coeff(
    rho: &[f64],
    nu: &[f64],
    g_class: &FiniteClassSpec,
    mdp: &TabularMdp,
    order: Order,
) -> Result<TransferReport> {
    let ns = mdp.n_states();
    check_len("rho", ns * mdp.n_actions(), rho.len())?;
    check_len("nu", ns * ns, nu.len())?;
    check_len("G cells", ns * ns, g_class.cells)?;
    let mut sup = SupTracker::new();
    for j in indices(g_class.size()?, order) {
        let g = g_class.member(j);
        let (num, den) = reward_terms(rho, nu, &g, mdp)?;
        sup.push(num, den, || Witness { f: None, g: g.clone(), numerator: num, denominator: den });
    }
    Ok(sup.finish())
}

/// Empirical `(s, s')` distribution of a reward dataset.
pub fn transition_distribution(data: &[RewardRecord], n_states: usize) -> Vec<f64> {
    let mut nu = vec![0.0; n_states * n_states];
    for r in data {
        nu[r.s * n_states + r.sp] += 1.0;
    }
    let n = data.len().max(1) as f64;
    nu.iter_mut().for_each(|x| *x /= n);
    nu
}

/// Empirical `(s, a)` distribution of a dynamics dataset.
pub fn state_action_distribution(data: &[DynamicsRecord], n_states: usize, n_actions: usize) -> Vec<f64> {
    let mut mu = vec![0.0; n_states * n_actions];
    for r in data {
        mu[r.s * n_actions + r.a] += 1.0;
    }
    let n = data.len().max(1) as f64;
    mu.iter_mut().for_each(|x| *x /= n);
    mu
}

fn excess(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x - y).max(0.0)).collect()
}

/// Dynamics and reward off-support error terms of the improvement bound.
///
/// `mu` and `rho` are `(s, a)` weights; `f` is `(s, a)`, `g` is `(s, s')`.
pub fn off_support_terms(
    pi: &TabularPolicy,
    mu: &[f64],
    rho: &[f64],
    f: &[f64],
    g: &[f64],
    mdp: &TabularMdp,
) -> Result<(f64, f64)> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    check_len("mu", ns * na, mu.len())?;
    check_len("rho", ns * na, rho.len())?;
    let d_pi = occupancy(mdp, pi, 1e-12)?;
    let d = d_pi.as_slice();
    let scale = 1.0 / (1.0 - mdp.gamma());
    // g_bar + P^pi f - f is the negated residual
    let resid = bellman_residual_vec(mdp, pi, f, g)?;
    let dyn_term: f64 = excess(d, rho).iter().zip(&resid).map(|(w, r)| -w * r).sum::<f64>() * scale;
    let sym: Vec<f64> = excess(d, mu).iter().zip(excess(mu, d)).map(|(x, y)| x + y).collect();
    let gbar = mdp.expect_transition_fn(g);
    let rbar = effective_reward(mdp);
    let reward_term: f64 = excess(&sym, rho)
        .iter()
        .zip(gbar.values.iter().zip(&rbar.values))
        .map(|(w, (x, y))| w * (y - x).abs())
        .sum::<f64>()
        * scale;
    Ok((dyn_term, reward_term))
}

// ---------------------------------------------------------------------------
// audit

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    #[serde(rename = "J_mu")]
    pub j_mu: f64,
    #[serde(rename = "J_hat")]
    pub j_hat: f64,
    pub gap: f64,
    pub pass: bool,
    #[serde(skip)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditTable {
    pub rows: Vec<AuditRow>,
    /// Allowed shortfall `0.05 (J* - J_min)`.
    pub epsilon: f64,
}

impl AuditTable {
    pub fn all_pass(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.pass)
    }

    pub fn pass_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().filter(|r| r.pass).count() as f64 / self.rows.len() as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub const AUDIT_TOLERANCE: f64 = 0.05;

/// Threshold `0.05 (J* - J_min)` for `mdp`.
pub fn audit_epsilon(mdp: &TabularMdp) -> Result<f64> {
    let (_, best) = value_iteration_ext(mdp, 1e-10, Extremum::Max)?;
    let (_, worst) = value_iteration_ext(mdp, 1e-10, Extremum::Min)?;
    Ok(AUDIT_TOLERANCE * (expected_return(mdp, &best)? - expected_return(mdp, &worst)?))
}

/// Runs `train(alpha, beta, seed, data)` on `make_data(seed)` for every grid
/// cell and seed, comparing the result with the behaviour policy returned
/// alongside the data.  Trainer errors become failing rows.
pub fn robust_improvement_audit<D, G, T>(
    mdp: &TabularMdp,
    make_data: G,
    train: T,
    grid: &[(f64, f64)],
    seeds: &[u64],
    threads: usize,
) -> Result<AuditTable>
where
    D: Sync,
    G: Fn(u64) -> Result<(D, TabularPolicy)>,
    T: Fn(f64, f64, u64, &D) -> Result<TabularPolicy> + Sync,
{
    let epsilon = audit_epsilon(mdp)?;
    let data: Vec<(u64, D, f64)> = seeds
        .iter()
        .map(|&seed| {
            let (d, mu) = make_data(seed)?;
            Ok((seed, d, expected_return(mdp, &mu)?))
        })
        .collect::<Result<_>>()?;
    let cells: Vec<(f64, f64, usize)> =
        grid.iter().flat_map(|&(a, b)| (0..data.len()).map(move |k| (a, b, k))).collect();
    let rows = parallel_map(&cells, threads, |&(alpha, beta, k)| {
        let (seed, d, j_mu) = &data[k];
        let outcome = train(alpha, beta, *seed, d).and_then(|pi| expected_return(mdp, &pi));
        match outcome {
            Ok(j_hat) => {
                let gap = j_hat - j_mu;
                AuditRow { alpha, beta, seed: *seed, j_mu: *j_mu, j_hat, gap, pass: gap >= -epsilon, error: None }
            }
            Err(e) => AuditRow {
                alpha,
                beta,
                seed: *seed,
                j_mu: *j_mu,
                j_hat: f64::NAN,
                gap: f64::NAN,
                pass: false,
                error: Some(e.to_string()),
            },
        }
    });
    Ok(AuditTable { rows, epsilon })
}

/// `{0.1, 1, 10, 100}^2`.
pub fn default_audit_grid() -> Vec<(f64, f64)> {
    let levels = [0.1, 1.0, 10.0, 100.0];
    levels.iter().flat_map(|&a| levels.iter().map(move |&b| (a, b))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{chain2, random_mdp, random_policy, CHAIN_R};
    use crate::mdp::policy_eval_q;
    use crate::rng::seeded;
    use rand::Rng;

    fn chain_classes() -> (FiniteClassSpec, FiniteClassSpec) {
        let m = chain2();
        let v = m.v_max();
        (
            FiniteClassSpec::new(vec![0.0, v / 2.0, v], 4, 1_000_000).unwrap(),
            FiniteClassSpec::new(vec![0.0, 0.5, 1.0], 4, 1_000_000).unwrap(),
        )
    }

    #[test]
    fn class_enumeration_and_cap() {
        let c = FiniteClassSpec::new(vec![0.0, 1.0], 3, 8).unwrap();
        let all = c.members().unwrap();
        assert_eq!(all.len(), 8);
        assert_eq!(all[0], vec![0.0, 0.0, 0.0]);
        assert_eq!(all[1], vec![1.0, 0.0, 0.0]);
        assert_eq!(all[7], vec![1.0, 1.0, 1.0]);
        assert!(matches!(FiniteClassSpec::new(vec![0.0, 1.0], 4, 8), Err(Error::Config(_))));
        assert!(FiniteClassSpec::new(vec![], 1, 8).is_err());
        assert!(FiniteClassSpec::new(vec![0.0, 1.0], 200, usize::MAX).is_err());
    }

    #[test]
    fn identical_measures_give_one() {
        let m = chain2();
        let (fc, gc) = chain_classes();
        let pi = TabularPolicy::uniform(2, 2);
        let mu = occupancy(&m, &pi, 1e-12).unwrap();
        let rep = bellman_transfer_coeff(mu.as_slice(), mu.as_slice(), &fc, &gc, &pi, &m, Order::Forward).unwrap();
        assert_eq!(rep.coefficient, 1.0);
        assert!(!rep.unbounded);
    }

    #[test]
    fn support_violation_is_unbounded() {
        let m = chain2();
        let (fc, gc) = chain_classes();
        let pi = TabularPolicy::uniform(2, 2);
        let rho = [0.0, 0.0, 1.0, 0.0];
        let mu = [0.5, 0.5, 0.0, 0.0];
        let rep = bellman_transfer_coeff(&rho, &mu, &fc, &gc, &pi, &m, Order::Forward).unwrap();
        assert!(rep.unbounded);
        assert_eq!(rep.coefficient, f64::INFINITY);
        let w = rep.witness.unwrap();
        assert!(w.denominator < ZERO_DENOMINATOR && w.numerator >= ZERO_DENOMINATOR);
        let r = bellman_residual_vec(&m, &pi, w.f.as_ref().unwrap(), &w.g).unwrap();
        assert_eq!(weighted_sq(&rho, &r), w.numerator);
    }

    #[test]
    fn chain_double_enumeration() {
        let m = chain2();
        let (fc, gc) = chain_classes();
        let right = TabularPolicy::deterministic(2, &[CHAIN_R, CHAIN_R]).unwrap();
        let rho = occupancy(&m, &right, 1e-12).unwrap();
        let mu = occupancy(&m, &TabularPolicy::uniform(2, 2), 1e-12).unwrap();
        let fwd = bellman_transfer_coeff(rho.as_slice(), mu.as_slice(), &fc, &gc, &right, &m, Order::Forward).unwrap();
        let rev = bellman_transfer_coeff(rho.as_slice(), mu.as_slice(), &fc, &gc, &right, &m, Order::Reverse).unwrap();
        assert_eq!(fwd.coefficient, rev.coefficient);
        assert_eq!(fwd.skipped, rev.skipped);
        assert_eq!(fwd.evaluated, 81 * 81);
        // the stored witness re-evaluates to the supremum
        let w = fwd.witness.unwrap();
        let ratio = bellman_ratio(rho.as_slice(), mu.as_slice(), w.f.as_ref().unwrap(), &w.g, &right, &m).unwrap().unwrap();
        assert_eq!(ratio, fwd.coefficient);
        // independent scan over the member lists
        let mut best = f64::NEG_INFINITY;
        for f in fc.members().unwrap().iter().rev() {
            for g in gc.members().unwrap().iter().rev() {
                if let Some(r) = bellman_ratio(rho.as_slice(), mu.as_slice(), f, g, &right, &m).unwrap() {
                    best = best.max(r);
                }
            }
        }
        assert_eq!(best, fwd.coefficient);
    }

    #[test]
    fn sup_dominates_sampled_pairs_and_scales_with_rho() {
        let mut rng = seeded(3);
        let m = random_mdp(&mut rng, 2, 2, 0.8);
        let pi = random_policy(&mut rng, 2, 2);
        let fc = FiniteClassSpec::new(vec![0.0, 2.5, 5.0], 4, 100_000).unwrap();
        let gc = FiniteClassSpec::new(vec![0.0, 0.5, 1.0], 4, 100_000).unwrap();
        let rho = occupancy(&m, &pi, 1e-12).unwrap();
        let mu = occupancy(&m, &TabularPolicy::uniform(2, 2), 1e-12).unwrap();
        let rep = bellman_transfer_coeff(rho.as_slice(), mu.as_slice(), &fc, &gc, &pi, &m, Order::Forward).unwrap();
        for _ in 0..100 {
            let f: Vec<f64> = (0..4).map(|_| fc.value_grid[rng.gen_range(0..3)]).collect();
            let g: Vec<f64> = (0..4).map(|_| gc.value_grid[rng.gen_range(0..3)]).collect();
            if let Some(r) = bellman_ratio(rho.as_slice(), mu.as_slice(), &f, &g, &pi, &m).unwrap() {
                assert!(rep.coefficient >= r);
            }
        }
        let doubled: Vec<f64> = rho.as_slice().iter().map(|x| 2.0 * x).collect();
        let rep2 = bellman_transfer_coeff(&doubled, mu.as_slice(), &fc, &gc, &pi, &m, Order::Forward).unwrap();
        assert!((rep2.coefficient - 2.0 * rep.coefficient).abs() <= 1e-12 * rep.coefficient);
    }

    #[test]
    fn reward_coefficient_examples() {
        let m = chain2();
        let pi = TabularPolicy::uniform(2, 2);
        let rho = occupancy(&m, &pi, 1e-12).unwrap();
        let nu = [0.25, 0.25, 0.25, 0.25];
        let only_r = FiniteClassSpec::new(vec![0.0, 1.0], 4, 16).unwrap();
        let rep = reward_transfer_coeff(rho.as_slice(), &nu, &only_r, &m, Order::Forward).unwrap();
        assert!(rep.coefficient.is_finite() && !rep.unbounded);

        // a singleton class holding R itself is all 0/0
        let r_only = FiniteClassSpec::new(vec![0.0], 4, 1).unwrap();
        let r_sing = reward_transfer_coeff(rho.as_slice(), &nu, &r_only, &chain_zero_reward(), Order::Forward).unwrap();
        assert_eq!((r_sing.coefficient, r_sing.skipped), (1.0, 1));

        // nu misses (0, 0), which rho weights through action L
        let nu_gap = [0.0, 0.5, 0.0, 0.5];
        let rep = reward_transfer_coeff(rho.as_slice(), &nu_gap, &only_r, &m, Order::Forward).unwrap();
        assert!(rep.unbounded);
        assert_eq!(rep.witness.unwrap().g[0], 1.0);
    }

    fn chain_zero_reward() -> TabularMdp {
        let m = chain2();
        let p: Vec<f64> = (0..2)
            .flat_map(|s| (0..2).flat_map(move |a| (0..2).map(move |sp| (s, a, sp))))
            .map(|(s, a, sp)| m.p(s, a, sp))
            .collect();
        TabularMdp::new(2, 2, p, vec![0.0; 4], 1.0, 0.5, vec![1.0, 0.0], vec![]).unwrap()
    }

    #[test]
    fn reward_coefficient_double_enumeration() {
        let mut rng = seeded(9);
        let m = random_mdp(&mut rng, 3, 2, 0.7);
        let pi = random_policy(&mut rng, 3, 2);
        let rho = occupancy(&m, &pi, 1e-12).unwrap();
        let mut nu: Vec<f64> = (0..9).map(|_| rng.gen_range(0.1..1.0)).collect();
        let z: f64 = nu.iter().sum();
        nu.iter_mut().for_each(|x| *x /= z);
        let gc = FiniteClassSpec::new(vec![0.0, 0.5, 1.0], 9, 100_000).unwrap();
        let f = reward_transfer_coeff(rho.as_slice(), &nu, &gc, &m, Order::Forward).unwrap();
        let r = reward_transfer_coeff(rho.as_slice(), &nu, &gc, &m, Order::Reverse).unwrap();
        assert_eq!(f.coefficient, r.coefficient);
        let w = f.witness.unwrap();
        assert_eq!(reward_ratio(rho.as_slice(), &nu, &w.g, &m).unwrap(), Some(f.coefficient));
    }

    #[test]
    fn off_support_examples() {
        let m = chain2();
        let pi = TabularPolicy::uniform(2, 2);
        let d = occupancy(&m, &pi, 1e-12).unwrap();
        let q = policy_eval_q(&m, &pi, 1e-12).unwrap();
        let g = m.reward_matrix().to_vec();
        let (dy, rw) = off_support_terms(&pi, d.as_slice(), d.as_slice(), &[0.7, 0.1, 1.9, 0.4], &[0.3, 0.9, 0.0, 0.2], &m).unwrap();
        assert_eq!((dy, rw), (0.0, 0.0));
        let (dy, rw) = off_support_terms(&pi, d.as_slice(), &[1.0, 0.0, 0.0, 0.0], &q.values, &g, &m).unwrap();
        assert!(dy.abs() < 1e-12);
        assert!(rw.abs() < 1e-12);

        // hand computation: rho = delta(0, R), mu = delta(0, L), pi = always-R
        let right = TabularPolicy::deterministic(2, &[CHAIN_R, CHAIN_R]).unwrap();
        // d^pi puts 0.5 on (0,R) and on (1,R)
        let rho = [0.0, 1.0, 0.0, 0.0];
        let mu = [1.0, 0.0, 0.0, 0.0];
        let f = [0.0, 1.0, 0.0, 1.5];
        let gz = [0.0, 0.5, 0.0, 0.5];
        let (dy, rw) = off_support_terms(&right, &mu, &rho, &f, &gz, &m).unwrap();
        // only (1,R) survives d \ rho: g_bar(1,R) + 0.5 f(1,R) - f(1,R) = 0.5 - 0.75
        assert!((dy - 0.5 * (0.5 + 0.75 - 1.5) * 2.0).abs() < 1e-12, "{dy}");
        // d (-) mu = (1, 0.5, 0, 0.5) minus rho -> (1, 0, 0, 0.5); |R_bar - g_bar| = (0, 0.5, 0, 0.5)
        assert!((rw - 0.5 * 0.5 * 2.0).abs() < 1e-12, "{rw}");
    }

    #[test]
    fn audit_shapes_and_errors() {
        let m = chain2();
        let eps = audit_epsilon(&m).unwrap();
        assert!((eps - 0.05 * 2.0).abs() < 1e-9);
        let right = TabularPolicy::deterministic(2, &[CHAIN_R, CHAIN_R]).unwrap();
        let run = |_a: f64, b: f64, _s: u64, _d: &()| {
            if b > 5.0 {
                Err(Error::config("boom"))
            } else {
                Ok(TabularPolicy::deterministic(2, &[CHAIN_R, CHAIN_R]).unwrap())
            }
        };
        let table = robust_improvement_audit(&m, |_| Ok(((), right.clone())), run, &default_audit_grid(), &[1, 2], 2).unwrap();
        assert_eq!(table.rows.len(), 32);
        assert!(!table.all_pass());
        assert_eq!(table.pass_rate(), 0.5);
        assert!(table.rows.iter().filter(|r| r.beta <= 1.0).all(|r| r.pass && r.gap.abs() < 1e-9));
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("alpha,beta,seed,J_mu,J_hat,gap,pass\n"));
        let again = robust_improvement_audit(&m, |_| Ok(((), right.clone())), run, &default_audit_grid(), &[1, 2], 1).unwrap();
        let mut buf2 = Vec::new();
        again.write_csv(&mut buf2).unwrap();
        assert_eq!(String::from_utf8(buf2).unwrap(), text);
    }
}

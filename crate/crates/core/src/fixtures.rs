//! Canonical hand-checkable MDPs shared by tests, benches and the harness.

use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{TabularMdp, TabularPolicy};

pub const CHAIN_L: usize = 0;
pub const CHAIN_R: usize = 1;

pub const UP: usize = 0;
pub const RIGHT: usize = 1;
pub const DOWN: usize = 2;
pub const LEFT: usize = 3;

pub const GRID5_SLIP: f64 = 0.1;
pub const GRID5_GAMMA: f64 = 0.95;

/// One state, one action, self-loop with reward 1, `gamma = 0.9`.
pub fn loop1() -> TabularMdp {
    TabularMdp::new(1, 1, vec![1.0], vec![1.0], 1.0, 0.9, vec![1.0], vec![]).expect("loop1 is valid")
}

/// Two states, actions `{L, R}`, `gamma = 0.5`, start at 0.
///
/// From state 0, `L` stays and `R` moves to 1.  State 1 is sticky under
/// both actions.  `R(s, s') = 1` iff `s' = 1`.
pub fn chain2() -> TabularMdp {
    let mut p = vec![0.0; 2 * 2 * 2];
    let idx = |s: usize, a: usize, sp: usize| (s * 2 + a) * 2 + sp;
    p[idx(0, CHAIN_L, 0)] = 1.0;
    p[idx(0, CHAIN_R, 1)] = 1.0;
    p[idx(1, CHAIN_L, 1)] = 1.0;
    p[idx(1, CHAIN_R, 1)] = 1.0;
    let r = vec![0.0, 1.0, 0.0, 1.0];
    TabularMdp::new(2, 2, p, r, 1.0, 0.5, vec![1.0, 0.0], vec![]).expect("chain2 is valid")
}

/// 5x5 gridworld: start in the top-left corner, terminal goal in the
/// bottom-right corner, reward 1 on entering the goal, `gamma = 0.95`.
pub fn grid5(slip: f64) -> TabularMdp {
    gridworld(5, 5, slip, GRID5_GAMMA).expect("grid5 is valid")
}

/// Rectangular gridworld with four moves; walls keep the agent in place.
///
/// With probability `slip` the chosen move is replaced by a uniformly
/// random one (which may coincide with the intended move).
pub fn gridworld(width: usize, height: usize, slip: f64, gamma: f64) -> Result<TabularMdp> {
    if width * height < 2 {
        return Err(Error::invalid("gridworld", "needs at least two cells"));
    }
    if !(0.0..=1.0).contains(&slip) {
        return Err(Error::invalid("gridworld", format!("slip {slip} outside [0, 1]")));
    }
    let ns = width * height;
    let na = 4;
    let goal = ns - 1;
    let step = |s: usize, a: usize| -> usize {
        let (row, col) = (s / width, s % width);
        match a {
            UP if row > 0 => s - width,
            RIGHT if col + 1 < width => s + 1,
            DOWN if row + 1 < height => s + width,
            LEFT if col > 0 => s - 1,
            _ => s,
        }
    };
    let mut p = vec![0.0; ns * na * ns];
    for s in 0..ns {
        for a in 0..na {
            let base = (s * na + a) * ns;
            if s == goal {
                p[base + goal] = 1.0;
                continue;
            }
            p[base + step(s, a)] += 1.0 - slip;
            for b in 0..na {
                p[base + step(s, b)] += slip / na as f64;
            }
        }
    }
    let mut r = vec![0.0; ns * ns];
    for s in 0..ns {
        if s != goal {
            r[s * ns + goal] = 1.0;
        }
    }
    let mut d0 = vec![0.0; ns];
    d0[0] = 1.0;
    TabularMdp::new(ns, na, p, r, 1.0, gamma, d0, vec![goal])
}

/// Fixture lookup used by the harness configuration.
pub fn by_name(name: &str) -> Option<TabularMdp> {
    match name {
        "loop1" => Some(loop1()),
        "chain2" => Some(chain2()),
        "grid5" => Some(grid5(GRID5_SLIP)),
        "grid5-noslip" => Some(grid5(0.0)),
        _ => None,
    }
}

pub const FIXTURE_NAMES: &[&str] = &["loop1", "chain2", "grid5", "grid5-noslip"];

/// Dense random MDP with rewards in `[0, 1]` and a random start distribution.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> TabularMdp {
    let mut p = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        p.extend(random_simplex(rng, n_states));
    }
    let r: Vec<f64> = (0..n_states * n_states).map(|_| rng.gen::<f64>()).collect();
    let d0 = random_simplex(rng, n_states);
    TabularMdp::new(n_states, n_actions, p, r, 1.0, gamma, d0, vec![]).expect("random mdp is valid")
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize) -> TabularPolicy {
    let probs = (0..n_states).flat_map(|_| random_simplex(rng, n_actions)).collect();
    TabularPolicy::new(n_states, n_actions, probs).expect("random policy is valid")
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let sum: f64 = raw.iter().sum();
    let mut out: Vec<f64> = raw.iter().map(|x| x / sum).collect();
    // keep the row sum within round-off of 1
    let fix: f64 = 1.0 - out.iter().sum::<f64>();
    out[0] += fix;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rows_are_distributions() {
        let m = grid5(0.1);
        assert_eq!(m.n_states(), 25);
        assert_eq!(m.terminal_states(), &[24]);
        for s in 0..25 {
            for a in 0..4 {
                let sum: f64 = m.next_dist(s, a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        // corner: moving up or left bumps the wall
        assert!((m.p(0, UP, 0) - (0.9 + 0.05)).abs() < 1e-12);
    }

    #[test]
    fn lookup_names() {
        for name in FIXTURE_NAMES {
            assert!(by_name(name).is_some());
        }
        assert!(by_name("nope").is_none());
    }
}

//! Desk-scale laboratory for offline policy learning from observations.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`] and [`fixtures`]: finite MDPs with exact evaluation oracles.
//! - [`datasets`]: dynamics / reward datasets and the five data scenarios.
//! - [`funcapprox`]: parameterised functions with exact gradients, Adam,
//!   weight projection and Polyak targets.
//! - [`game`]: the adversarial critic/reward/actor game, both the relative
//!   pessimism (ATAC-style) and absolute pessimism (PSPI-style) trainers,
//!   and a brute-force follower solver.
//! - [`baselines`]: BC, BCO, RP, AP, UDS, UDS-A, labeled-only ATAC, oracle ATAC.
//! - [`theory`]: transfer coefficients, off-support terms and the robust
//!   policy improvement audit.
//! - [`harness`]: evaluation, experiment runner and comparison tables.

pub mod baselines;
pub mod datasets;
pub mod error;
pub mod fixtures;
pub mod funcapprox;
pub mod game;
pub mod gradcheck;
pub mod harness;
pub mod mdp;
pub mod par;
pub mod rng;
pub mod theory;

pub use datasets::{
    DynamicsDataset, DynamicsRecord, RewardDataset, RewardRecord, Scenario, ScenarioData,
    ScenarioSpec,
};
pub use error::{Error, Result};
pub use funcapprox::{AdamState, Arch, FeatureMap, Head, Input, ParamFunction, TargetPair};
pub use game::{GameConfig, GameLearner, TraceRow};
pub use mdp::{OccupancyMeasure, QFunction, SaTable, TabularMdp, TabularPolicy};

//! Dynamics and reward datasets, trajectory collection and the five data scenarios.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{occupancy, value_iteration, TabularMdp, TabularPolicy};
use crate::rng::{categorical, derive, SeededRng};

pub const EXPERT_TAG: &str = "expert";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsRecord {
    pub s: usize,
    pub a: usize,
    pub sp: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl DynamicsRecord {
    pub fn is_expert(&self) -> bool {
        self.tag.as_deref() == Some(EXPERT_TAG)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardRecord {
    pub s: usize,
    pub r: f64,
    pub sp: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsDataset {
    pub records: Vec<DynamicsRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardDataset {
    pub records: Vec<RewardRecord>,
}

impl DynamicsDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.s >= n_states || r.sp >= n_states || r.a >= n_actions {
                return Err(Error::Validation(format!(
                    "dynamics record {i} ({}, {}, {}) outside {n_states} states / {n_actions} actions",
                    r.s, r.a, r.sp
                )));
            }
        }
        Ok(())
    }
}

impl RewardDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self, n_states: usize) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.s >= n_states || r.sp >= n_states || !r.r.is_finite() {
                return Err(Error::Validation(format!(
                    "reward record {i} ({}, {}, {}) invalid for {n_states} states",
                    r.s, r.r, r.sp
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "ilfo")]
    ILfO,
    #[serde(rename = "il")]
    IL,
    #[serde(rename = "rlfo")]
    RLfO,
    #[serde(rename = "rl-expert")]
    RLExpert,
    #[serde(rename = "rl-sample")]
    RLSample,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::ILfO,
        Scenario::IL,
        Scenario::RLfO,
        Scenario::RLExpert,
        Scenario::RLSample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::ILfO => "ilfo",
            Scenario::IL => "il",
            Scenario::RLfO => "rlfo",
            Scenario::RLExpert => "rl-expert",
            Scenario::RLSample => "rl-sample",
        }
    }

    /// Imitation scenarios label expert transitions with `r_max`.
    pub fn is_imitation(self) -> bool {
        matches!(self, Scenario::ILfO | Scenario::IL)
    }

    fn expert_in_dynamics(self) -> bool {
        matches!(self, Scenario::IL | Scenario::RLExpert)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown scenario `{s}`")))
    }
}

fn default_expert_eps() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    /// Total mixed-quality trajectories, split evenly across `noise_levels`.
    pub n_mixed_trajectories: usize,
    pub noise_levels: Vec<f64>,
    pub n_expert_trajectories: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_fraction: Option<f64>,
    pub horizon_cap: usize,
    pub seed: u64,
    #[serde(default = "default_expert_eps")]
    pub expert_eps: f64,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario) -> Self {
        ScenarioSpec {
            scenario,
            n_mixed_trajectories: 100,
            noise_levels: vec![0.25, 0.5, 1.0],
            n_expert_trajectories: 10,
            label_fraction: (scenario == Scenario::RLSample).then_some(0.5),
            horizon_cap: 128,
            seed: 0,
            expert_eps: default_expert_eps(),
        }
    }

    /// Same spec under another scenario; `label_fraction` is kept only for
    /// rl-sample (defaulting to 0.5).
    pub fn with_scenario(&self, scenario: Scenario) -> Self {
        let label_fraction = match scenario {
            Scenario::RLSample => self.label_fraction.or(Some(0.5)),
            _ => None,
        };
        ScenarioSpec { scenario, label_fraction, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.scenario, self.label_fraction) {
            (Scenario::RLSample, None) => return Err(Error::config("rl-sample requires label_fraction")),
            (Scenario::RLSample, Some(f)) if !(f > 0.0 && f <= 1.0) => {
                return Err(Error::config(format!("label_fraction {f} outside (0, 1]")))
            }
            (sc, Some(_)) if sc != Scenario::RLSample => {
                return Err(Error::config(format!("label_fraction is only valid for rl-sample, not {sc}")))
            }
            _ => {}
        }
        if self.n_mixed_trajectories == 0 || self.horizon_cap == 0 {
            return Err(Error::config("trajectory counts and horizon_cap must be positive"));
        }
        if self.noise_levels.is_empty() || self.noise_levels.iter().any(|n| !(0.0..=1.0).contains(n)) {
            return Err(Error::config("noise_levels must be a nonempty list in [0, 1]"));
        }
        if self.scenario != Scenario::RLSample && self.n_expert_trajectories == 0 {
            return Err(Error::config(format!("{} requires n_expert_trajectories > 0", self.scenario)));
        }
        if !(0.0..=1.0).contains(&self.expert_eps) {
            return Err(Error::config("expert_eps outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioData {
    pub scenario: Scenario,
    pub dynamics: DynamicsDataset,
    pub reward: RewardDataset,
    pub expert_actions_included: bool,
    /// Whether every reward record comes from an expert trajectory.
    pub reward_from_expert: bool,
    /// Occupancy-weighted mixture of the policies that generated the mixed data.
    pub held_out_eval_policy: TabularPolicy,
    /// For each dynamics record, the index of the reward record produced by the
    /// same environment step, if any.
    pub alignment: Option<Vec<Option<usize>>>,
    /// Bootstrap value assigned to terminal next states by trainers.
    pub absorbing_value: f64,
}

impl ScenarioData {
    /// Dynamics records whose reward is known, with that reward.
    pub fn labeled_pairs(&self) -> Result<Vec<(usize, f64)>> {
        let align = self
            .alignment
            .as_ref()
            .ok_or_else(|| Error::config("alignment metadata is required"))?;
        Ok(align
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| (i, self.reward.records[j].r)))
            .collect())
    }
}

#[derive(Clone, Debug, Default)]
struct Episode {
    steps: Vec<(usize, usize, usize)>,
}

fn rollout(mdp: &TabularMdp, pi: &TabularPolicy, horizon_cap: usize, rng: &mut SeededRng) -> Episode {
    let mut ep = Episode::default();
    let mut s = categorical(rng, mdp.initial_dist());
    for _ in 0..horizon_cap {
        if mdp.is_terminal(s) {
            break;
        }
        let a = categorical(rng, pi.row(s));
        let sp = categorical(rng, mdp.next_dist(s, a));
        ep.steps.push((s, a, sp));
        s = sp;
    }
    ep
}

fn rollouts(mdp: &TabularMdp, pi: &TabularPolicy, n: usize, horizon_cap: usize, rng: &mut SeededRng) -> Vec<Episode> {
    (0..n).map(|_| rollout(mdp, pi, horizon_cap, rng)).collect()
}

/// Roll out `n` episodes of `pi` from `d0`; the two datasets are aligned record by record.
pub fn collect_trajectories(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    n: usize,
    horizon_cap: usize,
    seed: u64,
) -> (DynamicsDataset, RewardDataset) {
    let mut rng = derive(seed, 0);
    let eps = rollouts(mdp, pi, n, horizon_cap, &mut rng);
    let mut dyn_ds = DynamicsDataset::default();
    let mut rew_ds = RewardDataset::default();
    for &(s, a, sp) in eps.iter().flat_map(|e| &e.steps) {
        dyn_ds.records.push(DynamicsRecord { s, a, sp, tag: None });
        rew_ds.records.push(RewardRecord { s, r: mdp.r(s, sp), sp });
    }
    (dyn_ds, rew_ds)
}

/// Each expert transition `(s, s')` becomes `(s, r_max, s')`.
pub fn reduce_imitation(expert_transitions: &[(usize, usize)], r_max: f64) -> RewardDataset {
    RewardDataset {
        records: expert_transitions.iter().map(|&(s, sp)| RewardRecord { s, r: r_max, sp }).collect(),
    }
}

/// Count-based behaviour policy with additive smoothing; unvisited states are uniform.
pub fn estimate_behavior_policy(
    data: &DynamicsDataset,
    n_states: usize,
    n_actions: usize,
    smoothing: f64,
) -> TabularPolicy {
    let mut counts = vec![0.0; n_states * n_actions];
    for r in &data.records {
        counts[r.s * n_actions + r.a] += 1.0;
    }
    let mut probs = vec![0.0; n_states * n_actions];
    for s in 0..n_states {
        let row = &counts[s * n_actions..(s + 1) * n_actions];
        let total: f64 = row.iter().sum::<f64>() + smoothing * n_actions as f64;
        for a in 0..n_actions {
            probs[s * n_actions + a] = if total > 0.0 {
                (row[a] + smoothing) / total
            } else {
                1.0 / n_actions as f64
            };
        }
    }
    TabularPolicy::new(n_states, n_actions, probs).expect("counts give distributions")
}

/// Value-iteration greedy policy mixed with `eps` uniform noise.
pub fn default_expert(mdp: &TabularMdp, eps: f64) -> Result<TabularPolicy> {
    let (_, greedy) = value_iteration(mdp, 1e-10)?;
    Ok(greedy.eps_mix(eps))
}

fn noise_tag(level: f64) -> String {
    format!("noise:{level}")
}

/// Build one of the five scenarios from a mixed-quality dataset and expert rollouts.
pub fn build_scenario(mdp: &TabularMdp, expert: &TabularPolicy, spec: &ScenarioSpec) -> Result<ScenarioData> {
    spec.validate()?;
    if expert.n_states() != mdp.n_states() || expert.n_actions() != mdp.n_actions() {
        return Err(Error::shape("expert policy", mdp.n_states(), expert.n_states()));
    }
    let k = spec.noise_levels.len();
    let mut mixed: Vec<(Episode, String)> = Vec::new();
    let mut mix_weights = Vec::with_capacity(k);
    for (i, &level) in spec.noise_levels.iter().enumerate() {
        let n_i = spec.n_mixed_trajectories / k + usize::from(i < spec.n_mixed_trajectories % k);
        let pi = expert.eps_mix(level);
        let mut rng = derive(spec.seed, 1 + i as u64);
        let tag = noise_tag(level);
        mixed.extend(rollouts(mdp, &pi, n_i, spec.horizon_cap, &mut rng).into_iter().map(|e| (e, tag.clone())));
        mix_weights.push((pi, n_i as f64));
    }
    let held_out = mixture_policy(mdp, &mix_weights)?;

    let mut dynamics = DynamicsDataset::default();
    let mut alignment: Vec<Option<usize>> = Vec::new();
    for (ep, tag) in &mixed {
        for &(s, a, sp) in &ep.steps {
            dynamics.records.push(DynamicsRecord { s, a, sp, tag: Some(tag.clone()) });
            alignment.push(None);
        }
    }

    let mut reward = RewardDataset::default();
    let sc = spec.scenario;
    if sc == Scenario::RLSample {
        let n_label = ((spec.label_fraction.expect("validated") * mixed.len() as f64).round() as usize).min(mixed.len());
        let mut rng = derive(spec.seed, 1000);
        let mut chosen: Vec<usize> = sample(&mut rng, mixed.len(), n_label).into_vec();
        chosen.sort_unstable();
        let offsets: Vec<usize> = mixed
            .iter()
            .scan(0, |acc, (e, _)| {
                let o = *acc;
                *acc += e.steps.len();
                Some(o)
            })
            .collect();
        for t in chosen {
            for (j, &(s, _, sp)) in mixed[t].0.steps.iter().enumerate() {
                alignment[offsets[t] + j] = Some(reward.records.len());
                reward.records.push(RewardRecord { s, r: mdp.r(s, sp), sp });
            }
        }
    } else {
        let mut rng = derive(spec.seed, 2000);
        let expert_eps = rollouts(mdp, expert, spec.n_expert_trajectories, spec.horizon_cap, &mut rng);
        let transitions: Vec<(usize, usize, usize)> = expert_eps.iter().flat_map(|e| e.steps.iter().copied()).collect();
        reward = if sc.is_imitation() {
            let pairs: Vec<(usize, usize)> = transitions.iter().map(|&(s, _, sp)| (s, sp)).collect();
            reduce_imitation(&pairs, mdp.r_max())
        } else {
            RewardDataset {
                records: transitions.iter().map(|&(s, _, sp)| RewardRecord { s, r: mdp.r(s, sp), sp }).collect(),
            }
        };
        if sc.expert_in_dynamics() {
            for (j, &(s, a, sp)) in transitions.iter().enumerate() {
                dynamics.records.push(DynamicsRecord { s, a, sp, tag: Some(EXPERT_TAG.into()) });
                alignment.push(Some(j));
            }
        }
    }

    Ok(ScenarioData {
        scenario: sc,
        dynamics,
        reward,
        expert_actions_included: sc.expert_in_dynamics(),
        reward_from_expert: sc != Scenario::RLSample,
        held_out_eval_policy: held_out,
        alignment: Some(alignment),
        absorbing_value: if sc.is_imitation() { mdp.v_max() } else { 0.0 },
    })
}

/// `mu(a|s) = sum_k w_k d_k(s, a) / sum_k w_k d_k(s)`, uniform where no policy visits.
fn mixture_policy(mdp: &TabularMdp, parts: &[(TabularPolicy, f64)]) -> Result<TabularPolicy> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut num = vec![0.0; ns * na];
    let total_w: f64 = parts.iter().map(|(_, w)| w).sum();
    for (pi, w) in parts {
        if *w == 0.0 {
            continue;
        }
        let d = occupancy(mdp, pi, 1e-12)?;
        for (n, dv) in num.iter_mut().zip(d.as_slice()) {
            *n += w / total_w * dv;
        }
    }
    let mut probs = vec![1.0 / na as f64; ns * na];
    for s in 0..ns {
        let row = &num[s * na..(s + 1) * na];
        let z: f64 = row.iter().sum();
        if z > 1e-300 {
            for a in 0..na {
                probs[s * na + a] = row[a] / z;
            }
        }
    }
    TabularPolicy::new(ns, na, probs)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    spec: Option<ScenarioSpec>,
    scenario: Scenario,
    seed: Option<u64>,
    mdp_hash: Option<String>,
    n_states: usize,
    n_actions: usize,
    expert_actions_included: bool,
    reward_from_expert: bool,
    absorbing_value: f64,
    held_out_eval_policy: Vec<Vec<f64>>,
}

/// Write `dynamics.jsonl`, `reward.jsonl`, `meta.json` and `alignment.json` into `dir`.
pub fn save_datasets(
    dir: &Path,
    data: &ScenarioData,
    spec: Option<&ScenarioSpec>,
    mdp: Option<&TabularMdp>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("dynamics.jsonl"), &data.dynamics.records)?;
    write_jsonl(&dir.join("reward.jsonl"), &data.reward.records)?;
    let pi = &data.held_out_eval_policy;
    let meta = Meta {
        spec: spec.cloned(),
        scenario: data.scenario,
        seed: spec.map(|s| s.seed),
        mdp_hash: mdp.map(TabularMdp::fingerprint),
        n_states: pi.n_states(),
        n_actions: pi.n_actions(),
        expert_actions_included: data.expert_actions_included,
        reward_from_expert: data.reward_from_expert,
        absorbing_value: data.absorbing_value,
        held_out_eval_policy: pi.rows(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    if let Some(a) = &data.alignment {
        fs::write(dir.join("alignment.json"), serde_json::to_string(a)?)?;
    }
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Inverse of [`save_datasets`]; record ids are validated against the stored dimensions.
pub fn load_datasets(dir: &Path) -> Result<ScenarioData> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| Error::Parse {
        path: meta_path,
        line: e.line(),
        message: e.to_string(),
    })?;
    let dynamics = DynamicsDataset {
        records: read_jsonl(&dir.join("dynamics.jsonl"))?,
    };
    let reward = RewardDataset {
        records: read_jsonl(&dir.join("reward.jsonl"))?,
    };
    dynamics.validate(meta.n_states, meta.n_actions)?;
    reward.validate(meta.n_states)?;
    let align_path = dir.join("alignment.json");
    let alignment: Option<Vec<Option<usize>>> = if align_path.exists() {
        Some(serde_json::from_str(&fs::read_to_string(&align_path)?)?)
    } else {
        None
    };
    if let Some(a) = &alignment {
        if a.len() != dynamics.len() || a.iter().flatten().any(|&j| j >= reward.len()) {
            return Err(Error::Validation("alignment does not match the datasets".into()));
        }
    }
    Ok(ScenarioData {
        scenario: meta.scenario,
        dynamics,
        reward,
        expert_actions_included: meta.expert_actions_included,
        reward_from_expert: meta.reward_from_expert,
        held_out_eval_policy: TabularPolicy::from_rows(&meta.held_out_eval_policy)?,
        alignment,
        absorbing_value: meta.absorbing_value,
    })
}

/// Multiset of `(s, s')` pairs.
pub fn transition_counts<I: IntoIterator<Item = (usize, usize)>>(pairs: I) -> BTreeMap<(usize, usize), usize> {
    let mut m = BTreeMap::new();
    for p in pairs {
        *m.entry(p).or_insert(0) += 1;
    }
    m
}

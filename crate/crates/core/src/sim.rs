//! Closed-loop episode execution and batch statistics.
//!
//! The environment samples true motion from the pre-clamp kernel so that
//! attempted moves into occupied or off-map cells can be flagged as
//! collisions (the robot then stays put, exactly realizing the clamped
//! transition). All planners share the same Bayes filter; the baselines
//! consume only its mode. An episode ends in success when the planner holds
//! still for `stop_patience` consecutive steps on the goal cell, in a
//! wrong-stop failure when the streak completes elsewhere, and in a step-cap
//! failure otherwise.
//!
//! Wall-clock planning times are kept out of the episode and summary CSVs so
//! those artifacts are byte-reproducible for fixed seeds; timings go to a
//! separate file.

use crate::baselines::BaselinePlanner;
use crate::gridworld::{raw_move_targets, GridMap, MotionNoise, StencilTarget, STAY};
use crate::model::{sample_categorical, AlphaSet, Belief, PomdpModel};
use crate::qvts::{QvTree, QvtsConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerKind {
    Qvts,
    AStar,
    Mdp,
}

impl PlannerKind {
    pub fn parse(s: &str) -> Option<PlannerKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "qvts" => Some(PlannerKind::Qvts),
            "astar" | "a*" => Some(PlannerKind::AStar),
            "mdp" => Some(PlannerKind::Mdp),
            _ => None,
        }
    }
}

impl fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlannerKind::Qvts => write!(f, "qvts"),
            PlannerKind::AStar => write!(f, "astar"),
            PlannerKind::Mdp => write!(f, "mdp"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    FailureWrongStop,
    FailureStepCap,
    FailureModel,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Success => write!(f, "success"),
            Outcome::FailureWrongStop => write!(f, "failure-wrong-stop"),
            Outcome::FailureStepCap => write!(f, "failure-step-cap"),
            Outcome::FailureModel => write!(f, "failure-model"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// True state before the action.
    pub state: usize,
    /// Index into the recorded belief snapshots (the belief the planner saw).
    pub belief_id: usize,
    pub action: usize,
    /// Raw sampled successor before clamping; `None` when it fell off-map.
    pub raw_next: Option<usize>,
    pub observation: usize,
    /// Stage reward R(true state, action).
    pub reward: f64,
    pub collision: bool,
    /// Planning wall time for this step, milliseconds. Not written to the
    /// deterministic CSVs.
    pub plan_ms: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeLog {
    pub planner: PlannerKind,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub discounted_return: f64,
    pub collisions: usize,
    /// Belief snapshots (one per step, plus the final posterior) when
    /// recording was requested.
    pub beliefs: Option<Vec<Vec<f64>>>,
}

impl EpisodeLog {
    /// Recomputes the discounted return from the step records with the same
    /// running-product accumulation used online.
    pub fn recompute_return(&self, discount: f64) -> f64 {
        let mut total = 0.0;
        let mut weight = 1.0;
        for s in &self.steps {
            total += weight * s.reward;
            weight *= discount;
        }
        total
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeLimits {
    pub max_steps: usize,
    /// Consecutive stay actions that end the episode.
    pub stop_patience: usize,
}

impl Default for EpisodeLimits {
    fn default() -> Self {
        EpisodeLimits {
            max_steps: 500,
            stop_patience: 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("planner {0} requires {1}")]
    MissingArtifact(PlannerKind, &'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

/// Everything a batch needs: the compiled model plus per-planner artifacts.
#[derive(Clone)]
pub struct BatchArtifacts {
    pub model: Arc<PomdpModel>,
    pub map: GridMap,
    pub noise: MotionNoise,
    pub fib: Option<Arc<AlphaSet>>,
    pub pbvi: Option<Arc<AlphaSet>>,
    pub mdp_policy: Option<Arc<Vec<usize>>>,
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub planners: Vec<PlannerKind>,
    pub episodes: usize,
    pub seed_base: u64,
    pub limits: EpisodeLimits,
    pub qvts: QvtsConfig,
    pub record_beliefs: bool,
    pub astar_cache_paths: bool,
}

/// Table-style aggregates for one planner. Reward and collisions are averaged
/// over all episodes and steps over successful ones; the other convention is
/// recorded alongside.
#[derive(Debug, Clone)]
pub struct PlannerStats {
    pub planner: PlannerKind,
    pub episodes: usize,
    pub successes: usize,
    pub failures_wrong_stop: usize,
    pub failures_step_cap: usize,
    pub failures_model: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub reward_mean_success: f64,
    pub reward_std_success: f64,
    pub collisions_mean: f64,
    pub collisions_std: f64,
    pub steps_mean_success: f64,
    pub steps_std_success: f64,
    pub steps_mean_all: f64,
    pub steps_std_all: f64,
    pub failure_rate: f64,
    pub plan_ms_mean: f64,
    pub plan_ms_max: f64,
}

#[derive(Debug, Clone)]
pub struct BatchSummary {
    pub stats: Vec<PlannerStats>,
    pub logs: Vec<EpisodeLog>,
}

enum Planner<'a> {
    Qvts(Box<QvTree>),
    Baseline(BaselinePlanner<'a>),
}

/// Derives the per-episode planner seed from the episode seed and the
/// configured search seed.
fn planner_seed(episode_seed: u64, cfg_seed: u64) -> u64 {
    let mut x = episode_seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (x ^ (x >> 31)) ^ cfg_seed
}

/// Runs one closed-loop episode. The true start is drawn from the map's
/// start region when present and from the initial belief otherwise.
pub fn run_episode(
    artifacts: &BatchArtifacts,
    planner_kind: PlannerKind,
    cfg: &BatchConfig,
    seed: u64,
) -> Result<EpisodeLog, SimError> {
    let model = &artifacts.model;
    let map = &artifacts.map;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut state = match map.start_region() {
        Some(cells) => cells[rng.gen_range(0..cells.len())],
        None => sample_categorical(model.initial_belief().probs(), rng.gen()),
    };
    let mut belief = model.initial_belief().clone();

    let mut planner = match planner_kind {
        PlannerKind::Qvts => {
            let upper = artifacts
                .fib
                .clone()
                .ok_or(SimError::MissingArtifact(planner_kind, "FIB alpha set"))?;
            let lower = artifacts
                .pbvi
                .clone()
                .ok_or(SimError::MissingArtifact(planner_kind, "PBVI alpha set"))?;
            let tree_cfg = QvtsConfig {
                seed: planner_seed(seed, cfg.qvts.seed),
                ..cfg.qvts.clone()
            };
            Planner::Qvts(Box::new(QvTree::new(
                model.clone(),
                upper,
                lower,
                belief.clone(),
                tree_cfg,
            )))
        }
        PlannerKind::AStar => Planner::Baseline(BaselinePlanner::astar(map, cfg.astar_cache_paths)),
        PlannerKind::Mdp => {
            let policy = artifacts
                .mdp_policy
                .clone()
                .ok_or(SimError::MissingArtifact(planner_kind, "MDP policy table"))?;
            Planner::Baseline(
                BaselinePlanner::mdp(map, policy.as_ref().clone())
                    .expect("policy length checked at load"),
            )
        }
    };

    let gamma = model.discount();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut beliefs: Option<Vec<Vec<f64>>> = cfg.record_beliefs.then(Vec::new);
    let mut discounted_return = 0.0;
    let mut weight = 1.0;
    let mut collisions = 0usize;
    let mut stay_streak = 0usize;
    let mut outcome = Outcome::FailureStepCap;

    for _step in 0..cfg.limits.max_steps {
        if let Some(b) = beliefs.as_mut() {
            b.push(belief.probs().to_vec());
        }
        let started = Instant::now();
        let action = match &mut planner {
            Planner::Qvts(tree) => tree.plan(),
            Planner::Baseline(b) => match b.act(&belief) {
                Ok(a) => a,
                // An unreachable mode estimate means the baseline cannot act;
                // hold still and let the stop rule decide the outcome.
                Err(_) => STAY,
            },
        };
        let plan_ms = started.elapsed().as_secs_f64() * 1e3;

        let reward = model.reward(state, action);
        discounted_return += weight * reward;
        weight *= gamma;

        // Environment step from the pre-clamp kernel.
        let targets = raw_move_targets(map, state, action, &artifacts.noise);
        let draw: f64 = rng.gen();
        let mut cum = 0.0;
        let mut raw = targets[0].0;
        for &(t, p) in &targets {
            cum += p;
            raw = t;
            if draw < cum {
                break;
            }
        }
        let (collision, next_state, raw_next) = match raw {
            StencilTarget::Cell(y) if !map.is_occupied(y) => (false, y, Some(y)),
            StencilTarget::Cell(y) => (true, state, Some(y)),
            StencilTarget::OffMap => (true, state, None),
        };
        let observation = sample_categorical(model.observation_row(next_state), rng.gen());

        steps.push(StepRecord {
            state,
            belief_id: steps.len(),
            action,
            raw_next,
            observation,
            reward,
            collision,
            plan_ms,
        });
        if collision {
            collisions += 1;
        }

        match model.belief_update(&belief, action, observation) {
            Ok(next_belief) => {
                if let Planner::Qvts(tree) = &mut planner {
                    tree.advance_root(action, observation)
                        .expect("tree and filter share the same update");
                }
                belief = next_belief;
            }
            Err(_) => {
                outcome = Outcome::FailureModel;
                break;
            }
        }
        state = next_state;

        if action == STAY {
            stay_streak += 1;
        } else {
            stay_streak = 0;
        }
        if stay_streak >= cfg.limits.stop_patience {
            outcome = if state == map.goal() {
                Outcome::Success
            } else {
                Outcome::FailureWrongStop
            };
            break;
        }
    }
    if let Some(b) = beliefs.as_mut() {
        b.push(belief.probs().to_vec());
    }

    Ok(EpisodeLog {
        planner: planner_kind,
        seed,
        steps,
        outcome,
        discounted_return,
        collisions,
        beliefs,
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn aggregate(planner: PlannerKind, logs: &[EpisodeLog]) -> PlannerStats {
    let rewards: Vec<f64> = logs.iter().map(|l| l.discounted_return).collect();
    let collisions: Vec<f64> = logs.iter().map(|l| l.collisions as f64).collect();
    let steps_all: Vec<f64> = logs.iter().map(|l| l.steps.len() as f64).collect();
    let success: Vec<&EpisodeLog> = logs
        .iter()
        .filter(|l| l.outcome == Outcome::Success)
        .collect();
    let steps_success: Vec<f64> = success.iter().map(|l| l.steps.len() as f64).collect();
    let rewards_success: Vec<f64> = success.iter().map(|l| l.discounted_return).collect();
    let plan_ms: Vec<f64> = logs
        .iter()
        .flat_map(|l| l.steps.iter().map(|s| s.plan_ms))
        .collect();
    let (reward_mean, reward_std) = mean_std(&rewards);
    let (reward_mean_success, reward_std_success) = mean_std(&rewards_success);
    let (collisions_mean, collisions_std) = mean_std(&collisions);
    let (steps_mean_success, steps_std_success) = mean_std(&steps_success);
    let (steps_mean_all, steps_std_all) = mean_std(&steps_all);
    let (plan_ms_mean, _) = mean_std(&plan_ms);
    let count = |o: Outcome| logs.iter().filter(|l| l.outcome == o).count();
    PlannerStats {
        planner,
        episodes: logs.len(),
        successes: success.len(),
        failures_wrong_stop: count(Outcome::FailureWrongStop),
        failures_step_cap: count(Outcome::FailureStepCap),
        failures_model: count(Outcome::FailureModel),
        reward_mean,
        reward_std,
        reward_mean_success,
        reward_std_success,
        collisions_mean,
        collisions_std,
        steps_mean_success,
        steps_std_success,
        steps_mean_all,
        steps_std_all,
        failure_rate: if logs.is_empty() {
            0.0
        } else {
            (logs.len() - success.len()) as f64 / logs.len() as f64
        },
        plan_ms_mean,
        plan_ms_max: plan_ms.iter().cloned().fold(0.0, f64::max),
    }
}

/// Runs `episodes` seeded episodes per planner in parallel and aggregates the
/// results in seed order. Episode seeds are shared across planners so each
/// planner faces the same sequence of worlds.
pub fn run_batch(artifacts: &BatchArtifacts, cfg: &BatchConfig) -> Result<BatchSummary, SimError> {
    let mut stats = Vec::new();
    let mut all_logs = Vec::new();
    for &planner in &cfg.planners {
        let logs: Result<Vec<EpisodeLog>, SimError> = (0..cfg.episodes)
            .into_par_iter()
            .map(|i| run_episode(artifacts, planner, cfg, cfg.seed_base + i as u64))
            .collect();
        let logs = logs?;
        stats.push(aggregate(planner, &logs));
        all_logs.extend(logs);
    }
    Ok(BatchSummary {
        stats,
        logs: all_logs,
    })
}

// ---------------------------------------------------------------------------
// CSV artifacts
// ---------------------------------------------------------------------------

/// One row per step. Timing columns are deliberately absent; see the module
/// docs.
pub fn write_episode_csv(log: &EpisodeLog, path: &Path) -> io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "step,state,belief_id,action,raw_next,observation,reward,collision"
    )?;
    for (k, s) in log.steps.iter().enumerate() {
        let raw = s.raw_next.map_or(-1i64, |y| y as i64);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            k, s.state, s.belief_id, s.action, raw, s.observation, s.reward, s.collision as u8
        )?;
    }
    writeln!(
        w,
        "# planner={} seed={} outcome={} steps={} collisions={} return={}",
        log.planner,
        log.seed,
        log.outcome,
        log.steps.len(),
        log.collisions,
        log.discounted_return
    )?;
    w.flush()
}

/// One row per recorded belief snapshot: `belief_id,p0,p1,...`.
pub fn write_beliefs_csv(log: &EpisodeLog, path: &Path) -> io::Result<()> {
    let beliefs = log
        .beliefs
        .as_ref()
        .expect("episode was run without belief recording");
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (i, b) in beliefs.iter().enumerate() {
        write!(w, "{i}")?;
        for p in b {
            write!(w, ",{p}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

pub fn write_summary_csv(stats: &[PlannerStats], path: &Path) -> io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "planner,episodes,successes,failures_wrong_stop,failures_step_cap,failures_model,\
         failure_rate,reward_mean,reward_std,reward_mean_success,reward_std_success,\
         collisions_mean,collisions_std,steps_mean_success,steps_std_success,\
         steps_mean_all,steps_std_all"
    )?;
    for s in stats {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.planner,
            s.episodes,
            s.successes,
            s.failures_wrong_stop,
            s.failures_step_cap,
            s.failures_model,
            s.failure_rate,
            s.reward_mean,
            s.reward_std,
            s.reward_mean_success,
            s.reward_std_success,
            s.collisions_mean,
            s.collisions_std,
            s.steps_mean_success,
            s.steps_std_success,
            s.steps_mean_all,
            s.steps_std_all
        )?;
    }
    w.flush()
}

/// Wall-clock planning times, one row per planner. Kept separate from the
/// deterministic artifacts.
pub fn write_timing_csv(stats: &[PlannerStats], path: &Path) -> io::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "planner,plan_ms_mean,plan_ms_max")?;
    for s in stats {
        writeln!(w, "{},{},{}", s.planner, s.plan_ms_mean, s.plan_ms_max)?;
    }
    w.flush()
}

/// Episode CSV contents needed to replay or render a trajectory.
#[derive(Debug, Clone, Default)]
pub struct ParsedEpisode {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub observations: Vec<usize>,
    pub rewards: Vec<f64>,
    pub collisions: Vec<bool>,
}

pub fn read_episode_csv(path: &Path) -> Result<ParsedEpisode, SimError> {
    let file = std::fs::File::open(path)?;
    let reader = io::BufReader::new(file);
    let mut out = ParsedEpisode::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || idx == 0 && line.starts_with("step,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(SimError::Csv {
                line: idx + 1,
                reason: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| SimError::Csv {
                line: idx + 1,
                reason: format!("bad {what}: {s:?}"),
            })
        };
        out.states.push(parse_usize(fields[1], "state")?);
        out.actions.push(parse_usize(fields[3], "action")?);
        out.observations.push(parse_usize(fields[5], "observation")?);
        out.rewards.push(fields[6].parse::<f64>().map_err(|_| SimError::Csv {
            line: idx + 1,
            reason: format!("bad reward: {:?}", fields[6]),
        })?);
        out.collisions.push(match fields[7] {
            "0" => false,
            "1" => true,
            other => {
                return Err(SimError::Csv {
                    line: idx + 1,
                    reason: format!("bad collision flag: {other:?}"),
                })
            }
        });
    }
    Ok(out)
}

pub fn read_beliefs_csv(path: &Path) -> Result<Vec<Vec<f64>>, SimError> {
    let file = std::fs::File::open(path)?;
    let reader = io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let _id = fields.next();
        let probs: Result<Vec<f64>, _> = fields.map(|f| f.parse::<f64>()).collect();
        out.push(probs.map_err(|_| SimError::Csv {
            line: idx + 1,
            reason: "bad probability".into(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::compile_model;
    use crate::solvers::{grow_belief_set, solve_fib, solve_mdp, solve_pbvi, SolverConfig};
    use rand::rngs::StdRng;

    fn artifacts_for(text: &str, noise: MotionNoise) -> BatchArtifacts {
        let map = GridMap::parse(text).unwrap();
        let model = Arc::new(compile_model(&map, &noise, 0.95, 0.95).unwrap());
        let solver_cfg = SolverConfig {
            max_iterations: 40,
            ..SolverConfig::default()
        };
        let fib = solve_fib(&model, &SolverConfig::default());
        let mut rng = StdRng::seed_from_u64(0);
        let beliefs = grow_belief_set(&model, 16, &mut rng);
        let pbvi = solve_pbvi(&model, &beliefs, &solver_cfg);
        let mdp = solve_mdp(&model, &SolverConfig::default());
        BatchArtifacts {
            model,
            map,
            noise,
            fib: Some(Arc::new(fib.alphas)),
            pbvi: Some(Arc::new(pbvi)),
            mdp_policy: Some(Arc::new(mdp.policy)),
        }
    }

    fn quick_cfg(planners: Vec<PlannerKind>) -> BatchConfig {
        BatchConfig {
            planners,
            episodes: 2,
            seed_base: 0,
            limits: EpisodeLimits {
                max_steps: 60,
                stop_patience: 3,
            },
            qvts: QvtsConfig {
                time_budget_ms: 0,
                node_cap: 200,
                samples_per_qnode: 24,
                ..QvtsConfig::default()
            },
            record_beliefs: false,
            astar_cache_paths: false,
        }
    }

    #[test]
    fn goal_only_world_succeeds_immediately() {
        let art = artifacts_for("G", MotionNoise::default());
        let cfg = quick_cfg(vec![PlannerKind::Qvts]);
        for planner in [PlannerKind::Qvts, PlannerKind::AStar, PlannerKind::Mdp] {
            let log = run_episode(&art, planner, &cfg, 0).unwrap();
            assert_eq!(log.outcome, Outcome::Success, "{planner}");
            assert_eq!(log.steps.len(), cfg.limits.stop_patience);
            assert_eq!(log.discounted_return, 0.0);
            assert_eq!(log.collisions, 0);
        }
    }

    #[test]
    fn deterministic_corridor_reaches_goal_in_minimal_steps() {
        // Perfect sensors and deterministic motion on a 1x3 corridor: the
        // belief collapses after the first observation; QVTS walks right and
        // stops. Steps = 2 moves + stop_patience stays.
        let noise = MotionNoise::new(1.0, 0.0, 0.0).unwrap();
        let map = GridMap::parse("S.G").unwrap();
        let model = Arc::new(compile_model(&map, &noise, 1.0, 0.95).unwrap());
        let fib = solve_fib(&model, &SolverConfig::default());
        let mut rng = StdRng::seed_from_u64(0);
        let beliefs = grow_belief_set(&model, 12, &mut rng);
        let pbvi = solve_pbvi(
            &model,
            &beliefs,
            &SolverConfig {
                max_iterations: 40,
                ..SolverConfig::default()
            },
        );
        let art = BatchArtifacts {
            model,
            map,
            noise,
            fib: Some(Arc::new(fib.alphas)),
            pbvi: Some(Arc::new(pbvi)),
            mdp_policy: None,
        };
        let cfg = quick_cfg(vec![PlannerKind::Qvts]);
        let log = run_episode(&art, PlannerKind::Qvts, &cfg, 7).unwrap();
        assert_eq!(log.outcome, Outcome::Success);
        assert_eq!(log.steps.len(), 2 + cfg.limits.stop_patience);
        assert_eq!(log.collisions, 0);
    }

    #[test]
    fn fixed_seed_episodes_are_identical() {
        let art = artifacts_for(".S.\n.#.\n..G", MotionNoise::default());
        let cfg = quick_cfg(vec![PlannerKind::Qvts]);
        for planner in [PlannerKind::Qvts, PlannerKind::AStar, PlannerKind::Mdp] {
            let a = run_episode(&art, planner, &cfg, 3).unwrap();
            let b = run_episode(&art, planner, &cfg, 3).unwrap();
            assert_eq!(a.steps, b.steps, "{planner}");
            assert_eq!(a.outcome, b.outcome);
        }
    }

    #[test]
    fn filter_replay_matches_and_return_recomputes() {
        let art = artifacts_for("S...\n.#..\n...G", MotionNoise::default());
        let mut cfg = quick_cfg(vec![PlannerKind::Qvts]);
        cfg.record_beliefs = true;
        let log = run_episode(&art, PlannerKind::Qvts, &cfg, 11).unwrap();
        let model = &art.model;

        // Replay the Bayes filter over the logged (a, z) sequence.
        let beliefs = log.beliefs.as_ref().unwrap();
        let mut replayed = model.initial_belief().clone();
        for (k, s) in log.steps.iter().enumerate() {
            for (a, b) in beliefs[k].iter().zip(replayed.probs()) {
                assert!((a - b).abs() < 1e-12, "belief diverged at step {k}");
            }
            replayed = model.belief_update(&replayed, s.action, s.observation).unwrap();
        }
        for (a, b) in beliefs.last().unwrap().iter().zip(replayed.probs()) {
            assert!((a - b).abs() < 1e-12);
        }

        // Exact return recomputation.
        assert_eq!(log.recompute_return(model.discount()), log.discounted_return);

        // Collision accounting matches the clamp rule.
        for s in &log.steps {
            let redirected = match s.raw_next {
                None => true,
                Some(y) => art.map.is_occupied(y),
            };
            assert_eq!(s.collision, redirected);
        }
    }

    #[test]
    fn batch_aggregates_and_single_episode_std_is_zero() {
        let art = artifacts_for("SG", MotionNoise::default());
        let mut cfg = quick_cfg(vec![PlannerKind::AStar]);
        cfg.episodes = 1;
        let summary = run_batch(&art, &cfg).unwrap();
        let s = &summary.stats[0];
        assert_eq!(s.episodes, 1);
        assert_eq!(s.reward_std, 0.0);
        assert_eq!(s.steps_std_all, 0.0);

        cfg.episodes = 4;
        let summary = run_batch(&art, &cfg).unwrap();
        let s = &summary.stats[0];
        assert_eq!(s.failure_rate, 0.0);
        assert_eq!(s.successes, 4);
    }

    #[test]
    fn missing_artifacts_error() {
        let map = GridMap::parse("SG").unwrap();
        let noise = MotionNoise::default();
        let model = Arc::new(compile_model(&map, &noise, 0.95, 0.95).unwrap());
        let art = BatchArtifacts {
            model,
            map,
            noise,
            fib: None,
            pbvi: None,
            mdp_policy: None,
        };
        let cfg = quick_cfg(vec![PlannerKind::Qvts]);
        assert!(matches!(
            run_episode(&art, PlannerKind::Qvts, &cfg, 0),
            Err(SimError::MissingArtifact(..))
        ));
        assert!(matches!(
            run_episode(&art, PlannerKind::Mdp, &cfg, 0),
            Err(SimError::MissingArtifact(..))
        ));
    }

    #[test]
    fn episode_csv_round_trip() {
        let art = artifacts_for("S..G", MotionNoise::default());
        let mut cfg = quick_cfg(vec![PlannerKind::AStar]);
        cfg.record_beliefs = true;
        let log = run_episode(&art, PlannerKind::AStar, &cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.csv");
        write_episode_csv(&log, &path).unwrap();
        let parsed = read_episode_csv(&path).unwrap();
        assert_eq!(parsed.states.len(), log.steps.len());
        for (p, s) in parsed.states.iter().zip(&log.steps) {
            assert_eq!(*p, s.state);
        }
        for (p, s) in parsed.rewards.iter().zip(&log.steps) {
            assert_eq!(*p, s.reward);
        }
        let bpath = dir.path().join("beliefs.csv");
        write_beliefs_csv(&log, &bpath).unwrap();
        let beliefs = read_beliefs_csv(&bpath).unwrap();
        assert_eq!(beliefs.len(), log.steps.len() + 1);
        assert_eq!(beliefs[0].len(), art.model.num_states());

        // Malformed CSV is reported with a line number.
        std::fs::write(&path, "step,state\n0,1,2\n").unwrap();
        assert!(matches!(
            read_episode_csv(&path),
            Err(SimError::Csv { .. })
        ));
    }
}

//! Offline value approximations: the FIB upper bound, the PBVI lower bound,
//! plain MDP value iteration, greedy belief-set expansion, and an exact
//! bounded-horizon enumeration used as a test oracle.
//!
//! FIB keeps one alpha vector per action and iterates a monotone contraction
//! from the blind upper start R_max/(1-gamma), so every sweep remains a valid
//! upper bound. PBVI keeps one alpha vector per belief point and sweeps point
//! backups from the blind lower start R_min/(1-gamma); a final
//! frozen-selection evaluation pass turns the set into the value of an
//! explicit finite-state controller, which keeps it a sound lower bound that
//! a one-step Bellman backup can only improve.

use crate::model::{AlphaSet, AlphaVector, Belief, PomdpModel};
use crate::model::{sample_categorical, sample_sparse, ZERO_LIKELIHOOD};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Sup-norm change below which value iteration stops.
    pub epsilon: f64,
    /// Sweep cap for FIB/MDP; exact sweep count for PBVI.
    pub max_iterations: usize,
    /// Belief-set size the expansion loop aims for.
    pub pbvi_target_size: usize,
    pub rng_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            epsilon: 1e-4,
            max_iterations: 500,
            pbvi_target_size: 128,
            rng_seed: 0,
        }
    }
}

/// Default sweep count for PBVI, which has no convergence test.
pub const DEFAULT_PBVI_SWEEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointStats {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct FibSolution {
    pub alphas: AlphaSet,
    pub stats: FixedPointStats,
}

#[derive(Debug, Clone)]
pub struct MdpSolution {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
    pub stats: FixedPointStats,
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("exact enumeration guard exceeded: |A|*|Z| = {branching} (max 12), depth = {depth} (max 8)")]
    TooLarge { branching: usize, depth: usize },
}

/// FIB value iteration. Returns exactly one alpha vector per action; the
/// `converged` flag is false when the sweep cap was reached first, in which
/// case the last iterate (still a valid upper bound) is returned.
pub fn solve_fib(model: &PomdpModel, config: &SolverConfig) -> FibSolution {
    let ns = model.num_states();
    let na = model.num_actions();
    let nz = model.num_observations();
    let gamma = model.discount();
    let (_, rmax) = model.reward_bounds();

    let mut alphas: Vec<Vec<f64>> = vec![vec![rmax / (1.0 - gamma); ns]; na];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;

    // Scratch for O(., z) * alpha_a'(.) projections, indexed [a'][z][y].
    let mut weighted = vec![vec![vec![0.0; ns]; nz]; na];

    while iterations < config.max_iterations {
        for (ap, planes) in weighted.iter_mut().enumerate() {
            for (z, w) in planes.iter_mut().enumerate() {
                for (y, slot) in w.iter_mut().enumerate() {
                    *slot = model.observation_prob(y, z) * alphas[ap][y];
                }
            }
        }
        let next: Vec<Vec<f64>> = (0..na)
            .into_par_iter()
            .map(|a| {
                let mut row = vec![0.0; ns];
                for (x, slot) in row.iter_mut().enumerate() {
                    let tr = model.transition_row(x, a);
                    let mut acc = 0.0;
                    for z in 0..nz {
                        let mut best = f64::NEG_INFINITY;
                        for w_ap in weighted.iter() {
                            let w = &w_ap[z];
                            let mut s = 0.0;
                            for &(y, p) in tr {
                                s += p * w[y];
                            }
                            if s > best {
                                best = s;
                            }
                        }
                        acc += best;
                    }
                    *slot = model.reward(x, a) + gamma * acc;
                }
                row
            })
            .collect();
        residual = 0.0;
        for (old, new) in alphas.iter().zip(&next) {
            for (o, n) in old.iter().zip(new) {
                let d = (o - n).abs();
                if d > residual {
                    residual = d;
                }
            }
        }
        alphas = next;
        iterations += 1;
        if residual < config.epsilon {
            converged = true;
            break;
        }
    }

    let vectors = alphas
        .into_iter()
        .enumerate()
        .map(|(action, values)| AlphaVector { values, action })
        .collect();
    FibSolution {
        alphas: AlphaSet::new(vectors).expect("one vector per action"),
        stats: FixedPointStats {
            iterations,
            residual,
            converged,
        },
    }
}

/// Back-projects `w` through the transition kernel for one action:
/// out(x) = sum_y T(x, a, y) w(y).
fn backproject(model: &PomdpModel, a: usize, w: &[f64], out: &mut [f64]) {
    for (x, slot) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for &(y, p) in model.transition_row(x, a) {
            s += p * w[y];
        }
        *slot = s;
    }
}

/// The point-backup selection for one sweep: for each anchor belief, the
/// chosen action and, per observation, the index of the alpha vector that
/// maximizes the continuation at that anchor.
struct SweepSelections {
    /// `[belief][z] -> alpha index`, for the chosen action.
    continuation: Vec<Vec<usize>>,
    actions: Vec<usize>,
}

/// One synchronous PBVI sweep over all anchors. Returns the new vectors and
/// the argmax structure that produced them.
fn pbvi_sweep(
    model: &PomdpModel,
    beliefs: &[Belief],
    alphas: &[AlphaVector],
) -> (Vec<AlphaVector>, SweepSelections) {
    let ns = model.num_states();
    let na = model.num_actions();
    let nz = model.num_observations();
    let nb = beliefs.len();
    let gamma = model.discount();

    // choice[b][a][z] = best alpha index for that branch at anchor b.
    let mut choice = vec![vec![vec![0usize; nz]; na]; nb];
    for z in 0..nz {
        let projected: Vec<Vec<f64>> = alphas
            .par_iter()
            .map(|alpha| {
                (0..ns)
                    .map(|y| model.observation_prob(y, z) * alpha.values[y])
                    .collect()
            })
            .collect();
        for a in 0..na {
            let back: Vec<Vec<f64>> = projected
                .par_iter()
                .map(|w| {
                    let mut out = vec![0.0; ns];
                    backproject(model, a, w, &mut out);
                    out
                })
                .collect();
            let picks: Vec<usize> = beliefs
                .par_iter()
                .map(|b| {
                    let mut best = f64::NEG_INFINITY;
                    let mut idx = 0;
                    for (j, g) in back.iter().enumerate() {
                        let dot: f64 = g.iter().zip(b.probs()).map(|(v, p)| v * p).sum();
                        if dot > best {
                            best = dot;
                            idx = j;
                        }
                    }
                    idx
                })
                .collect();
            for (bi, &j) in picks.iter().enumerate() {
                choice[bi][a][z] = j;
            }
        }
    }

    // Assemble the backed-up vector per anchor and keep the maximizing action.
    let results: Vec<(AlphaVector, Vec<usize>, usize)> = (0..nb)
        .into_par_iter()
        .map(|bi| {
            let b = &beliefs[bi];
            let mut best_val = f64::NEG_INFINITY;
            let mut best_vec = Vec::new();
            let mut best_action = 0;
            let mut scratch = vec![0.0; ns];
            let mut proj = vec![0.0; ns];
            for a in 0..na {
                let mut vec_a: Vec<f64> = (0..ns).map(|x| model.reward(x, a)).collect();
                for z in 0..nz {
                    let alpha = &alphas[choice[bi][a][z]];
                    for (y, slot) in proj.iter_mut().enumerate() {
                        *slot = model.observation_prob(y, z) * alpha.values[y];
                    }
                    backproject(model, a, &proj, &mut scratch);
                    for (v, s) in vec_a.iter_mut().zip(&scratch) {
                        *v += gamma * s;
                    }
                }
                let val: f64 = vec_a.iter().zip(b.probs()).map(|(v, p)| v * p).sum();
                if val > best_val {
                    best_val = val;
                    best_vec = vec_a;
                    best_action = a;
                }
            }
            (
                AlphaVector {
                    values: best_vec,
                    action: best_action,
                },
                choice[bi][best_action].clone(),
                best_action,
            )
        })
        .collect();

    let mut vectors = Vec::with_capacity(nb);
    let mut continuation = Vec::with_capacity(nb);
    let mut actions = Vec::with_capacity(nb);
    for (v, c, a) in results {
        vectors.push(v);
        continuation.push(c);
        actions.push(a);
    }
    (
        vectors,
        SweepSelections {
            continuation,
            actions,
        },
    )
}

/// PBVI lower bound: one alpha vector per belief point, `config.max_iterations`
/// synchronous sweeps from the blind start (no convergence test exists).
///
/// After the sweeps, the final selection structure is frozen and evaluated as
/// a finite-state controller by monotone iteration from the blind vector.
/// Every evaluation iterate is a valid lower bound, and the returned set is
/// uniformly improvable: a one-step Bellman backup of it can only move up,
/// which is what lets bound intervals in the online tree nest.
pub fn solve_pbvi(model: &PomdpModel, belief_set: &[Belief], config: &SolverConfig) -> AlphaSet {
    assert!(!belief_set.is_empty(), "belief set must not be empty");
    let ns = model.num_states();
    let gamma = model.discount();
    let (rmin, _) = model.reward_bounds();
    let blind = AlphaVector {
        values: vec![rmin / (1.0 - gamma); ns],
        action: 0,
    };

    let mut alphas = vec![blind.clone()];
    if config.max_iterations == 0 {
        return AlphaSet::new(alphas).expect("blind vector");
    }
    for _ in 0..config.max_iterations {
        let (next, _) = pbvi_sweep(model, belief_set, &alphas);
        alphas = next;
    }

    // Freeze the selection structure against the final set, then evaluate the
    // induced controller from below.
    let (_, selections) = pbvi_sweep(model, belief_set, &alphas);
    let evaluated = evaluate_controller(model, &selections, belief_set.len(), config);
    AlphaSet::new(evaluated).expect("one vector per belief point")
}

/// Iterates the frozen-selection evaluation operator from the blind vector.
/// The iteration is monotone non-decreasing and converges to the value of the
/// finite-state controller defined by the selections.
fn evaluate_controller(
    model: &PomdpModel,
    selections: &SweepSelections,
    num_nodes: usize,
    config: &SolverConfig,
) -> Vec<AlphaVector> {
    let ns = model.num_states();
    let nz = model.num_observations();
    let gamma = model.discount();
    let (rmin, _) = model.reward_bounds();
    let mut values: Vec<Vec<f64>> = vec![vec![rmin / (1.0 - gamma); ns]; num_nodes];
    let max_eval_iters = 2000;
    for _ in 0..max_eval_iters {
        let next: Vec<Vec<f64>> = (0..num_nodes)
            .into_par_iter()
            .map(|i| {
                let a = selections.actions[i];
                let mut out: Vec<f64> = (0..ns).map(|x| model.reward(x, a)).collect();
                let mut proj = vec![0.0; ns];
                let mut back = vec![0.0; ns];
                for z in 0..nz {
                    let succ = &values[selections.continuation[i][z]];
                    for (y, slot) in proj.iter_mut().enumerate() {
                        *slot = model.observation_prob(y, z) * succ[y];
                    }
                    backproject(model, a, &proj, &mut back);
                    for (o, b) in out.iter_mut().zip(&back) {
                        *o += gamma * b;
                    }
                }
                out
            })
            .collect();
        let mut residual = 0.0f64;
        for (old, new) in values.iter().zip(&next) {
            for (o, n) in old.iter().zip(new) {
                residual = residual.max((n - o).abs());
            }
        }
        values = next;
        if residual < config.epsilon.min(1e-6) {
            break;
        }
    }
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| AlphaVector {
            values: v,
            action: selections.actions[i],
        })
        .collect()
}

/// One round of greedy belief-set expansion: for every point already in the
/// set, forward-sample one posterior per action and keep the candidate
/// farthest (L1) from the set, adding it when the distance is positive. The
/// set at most doubles. Returns the grown set.
pub fn expand_belief_set(
    model: &PomdpModel,
    current: &[Belief],
    rng: &mut impl Rng,
) -> Vec<Belief> {
    let mut set: Vec<Belief> = current.to_vec();
    let snapshot = current.len();
    for i in 0..snapshot {
        let b = set[i].clone();
        let mut best: Option<(f64, Belief)> = None;
        for a in 0..model.num_actions() {
            let x = sample_categorical(b.probs(), rng.gen::<f64>());
            let y = sample_sparse(model.transition_row(x, a), rng.gen::<f64>());
            let z = sample_categorical(model.observation_row(y), rng.gen::<f64>());
            let cand = model
                .belief_update(&b, a, z)
                .expect("sampled observation has positive likelihood");
            let dist = set
                .iter()
                .map(|e| e.l1_distance(&cand))
                .fold(f64::INFINITY, f64::min);
            if best.as_ref().is_none_or(|(d, _)| dist > *d) {
                best = Some((dist, cand));
            }
        }
        if let Some((d, cand)) = best {
            if d > 0.0 {
                set.push(cand);
            }
        }
    }
    set
}

/// Expands from the model's initial belief until the set reaches `target`
/// points or growth stalls.
pub fn grow_belief_set(model: &PomdpModel, target: usize, rng: &mut impl Rng) -> Vec<Belief> {
    let mut set = vec![model.initial_belief().clone()];
    while set.len() < target {
        let next = expand_belief_set(model, &set, rng);
        if next.len() == set.len() {
            break;
        }
        set = next;
    }
    set
}

/// Plain value iteration on the fully observed problem. Greedy policy,
/// ties to the lowest action index.
pub fn solve_mdp(model: &PomdpModel, config: &SolverConfig) -> MdpSolution {
    let ns = model.num_states();
    let na = model.num_actions();
    let gamma = model.discount();
    let mut values = vec![0.0; ns];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    while iterations < config.max_iterations {
        let next: Vec<f64> = (0..ns)
            .into_par_iter()
            .map(|x| {
                let mut best = f64::NEG_INFINITY;
                for a in 0..na {
                    let mut q = model.reward(x, a);
                    for &(y, p) in model.transition_row(x, a) {
                        q += gamma * p * values[y];
                    }
                    if q > best {
                        best = q;
                    }
                }
                best
            })
            .collect();
        residual = values
            .iter()
            .zip(&next)
            .map(|(o, n)| (o - n).abs())
            .fold(0.0, f64::max);
        values = next;
        iterations += 1;
        if residual < config.epsilon {
            converged = true;
            break;
        }
    }
    let policy: Vec<usize> = (0..ns)
        .map(|x| {
            let mut best = f64::NEG_INFINITY;
            let mut act = 0;
            for a in 0..na {
                let mut q = model.reward(x, a);
                for &(y, p) in model.transition_row(x, a) {
                    q += gamma * p * values[y];
                }
                if q > best {
                    best = q;
                    act = a;
                }
            }
            act
        })
        .collect();
    MdpSolution {
        values,
        policy,
        stats: FixedPointStats {
            iterations,
            residual,
            converged,
        },
    }
}

/// Q table derived from a state value table: Q(x,a) = R + gamma sum T V.
pub fn q_from_values(model: &PomdpModel, values: &[f64]) -> Vec<f64> {
    let na = model.num_actions();
    let gamma = model.discount();
    (0..model.num_states() * na)
        .map(|i| {
            let (x, a) = (i / na, i % na);
            let mut q = model.reward(x, a);
            for &(y, p) in model.transition_row(x, a) {
                q += gamma * p * values[y];
            }
            q
        })
        .collect()
}

struct OracleScratch {
    pred: Vec<f64>,
    post: Vec<f64>,
}

/// Exact bounded-horizon value by full enumeration of the Bellman recursion
/// with zero leaf values, plus blind tail bounds: returns a certified
/// interval containing the optimal infinite-horizon value at `b`.
///
/// Guarded to enumerable sizes. Zero-probability observation branches are
/// skipped.
pub fn exact_value_bounded(
    model: &PomdpModel,
    b: &Belief,
    depth: usize,
) -> Result<(f64, f64), OracleError> {
    let branching = model.num_actions() * model.num_observations();
    if branching > 12 || depth > 8 {
        return Err(OracleError::TooLarge { branching, depth });
    }
    let ns = model.num_states();
    let mut scratch: Vec<OracleScratch> = (0..=depth)
        .map(|_| OracleScratch {
            pred: vec![0.0; ns],
            post: vec![0.0; ns],
        })
        .collect();
    let v = enumerate(model, b.probs(), depth, &mut scratch);
    let (rmin, rmax) = model.reward_bounds();
    let gamma = model.discount();
    let tail = gamma.powi(depth as i32) / (1.0 - gamma);
    Ok((v + tail * rmin, v + tail * rmax))
}

fn enumerate(model: &PomdpModel, b: &[f64], depth: usize, scratch: &mut [OracleScratch]) -> f64 {
    if depth == 0 {
        return 0.0;
    }
    let na = model.num_actions();
    let nz = model.num_observations();
    let gamma = model.discount();
    let stage_reward = |a: usize| -> f64 {
        b.iter()
            .enumerate()
            .map(|(x, &p)| p * model.reward(x, a))
            .sum()
    };
    let mut best = f64::NEG_INFINITY;
    let (level, rest) = scratch.split_first_mut().expect("one level per depth");
    for a in 0..na {
        let r = stage_reward(a);
        if depth == 1 {
            if r > best {
                best = r;
            }
            continue;
        }
        model.predict_into(b, a, &mut level.pred);
        let mut future = 0.0;
        if depth == 2 {
            // The last expansion level folds into dot products with the
            // reward columns; the (1/P) normalization cancels against the
            // branch weight P(z | b, a).
            for z in 0..nz {
                for (y, slot) in level.post.iter_mut().enumerate() {
                    *slot = model.observation_prob(y, z) * level.pred[y];
                }
                let mut inner_best = f64::NEG_INFINITY;
                for ap in 0..na {
                    let s: f64 = level
                        .post
                        .iter()
                        .enumerate()
                        .map(|(y, &p)| p * model.reward(y, ap))
                        .sum();
                    if s > inner_best {
                        inner_best = s;
                    }
                }
                future += inner_best;
            }
        } else {
            for z in 0..nz {
                let mut w = 0.0;
                for (y, slot) in level.post.iter_mut().enumerate() {
                    *slot = model.observation_prob(y, z) * level.pred[y];
                    w += *slot;
                }
                if w <= ZERO_LIKELIHOOD {
                    continue;
                }
                for slot in level.post.iter_mut() {
                    *slot /= w;
                }
                future += w * enumerate(model, &level.post, depth - 1, rest);
            }
        }
        let total = r + gamma * future;
        if total > best {
            best = total;
        }
    }
    best
}

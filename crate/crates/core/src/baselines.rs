//! A* and MDP-policy baselines. Both need a known location, so they act on
//! the mode of the belief maintained by the shared Bayes filter.

use crate::gridworld::{GridMap, STAY};
use crate::model::Belief;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BaselineError {
    #[error("no path from cell {from} to the goal")]
    Unreachable { from: usize },
    #[error("policy table has {got} entries, expected {expected}")]
    PolicyLength { expected: usize, got: usize },
}

/// Argmax of the belief; ties to the lowest state index.
pub fn belief_mode(b: &Belief) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut idx = 0;
    for (i, &p) in b.probs().iter().enumerate() {
        if p > best {
            best = p;
            idx = i;
        }
    }
    idx
}

fn chebyshev(map: &GridMap, a: usize, b: usize) -> u32 {
    let (ar, ac) = map.row_col(a);
    let (br, bc) = map.row_col(b);
    let dr = ar.abs_diff(br);
    let dc = ac.abs_diff(bc);
    dr.max(dc) as u32
}

/// Shortest 8-connected path (unit step cost, diagonals included) from
/// `from` to the goal. The Chebyshev heuristic is admissible and consistent
/// under unit diagonal cost. Returns the cell sequence including both ends.
pub fn astar_path(map: &GridMap, from: usize) -> Result<Vec<usize>, BaselineError> {
    if from >= map.num_cells() || map.is_occupied(from) {
        return Err(BaselineError::Unreachable { from });
    }
    let goal = map.goal();
    if from == goal {
        return Ok(vec![from]);
    }
    let n = map.num_cells();
    let mut g = vec![u32::MAX; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    // Ordered by (f, h, cell) so expansion order is deterministic.
    let mut open: BinaryHeap<Reverse<(u32, u32, usize)>> = BinaryHeap::new();
    g[from] = 0;
    open.push(Reverse((chebyshev(map, from, goal), chebyshev(map, from, goal), from)));
    while let Some(Reverse((_, _, cell))) = open.pop() {
        if closed[cell] {
            continue;
        }
        closed[cell] = true;
        if cell == goal {
            let mut path = vec![goal];
            let mut cur = goal;
            while parent[cur] != usize::MAX {
                cur = parent[cur];
                path.push(cur);
            }
            path.reverse();
            return Ok(path);
        }
        for a in 0..9 {
            if a == STAY {
                continue;
            }
            let Some(next) = map.neighbor(cell, a) else {
                continue;
            };
            if map.is_occupied(next) || closed[next] {
                continue;
            }
            let cand = g[cell] + 1;
            if cand < g[next] {
                g[next] = cand;
                parent[next] = cell;
                let h = chebyshev(map, next, goal);
                open.push(Reverse((cand + h, h, next)));
            }
        }
    }
    Err(BaselineError::Unreachable { from })
}

/// First action of the shortest path from `from` to the goal; stay when
/// already there.
pub fn astar_plan(map: &GridMap, from: usize) -> Result<usize, BaselineError> {
    let path = astar_path(map, from)?;
    if path.len() < 2 {
        return Ok(STAY);
    }
    Ok(map
        .action_between(path[0], path[1])
        .expect("consecutive path cells are stencil neighbors"))
}

/// MDP baseline: one table lookup at the belief mode.
pub fn mdp_act(policy: &[usize], b: &Belief) -> usize {
    policy[belief_mode(b)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    AStar,
    Mdp,
}

/// Stateful wrapper used by the simulator. A* replans from the belief mode
/// every step by default; with `cache_path` it follows the previous plan as
/// long as the mode stays on it.
#[derive(Debug, Clone)]
pub struct BaselinePlanner<'m> {
    pub kind: BaselineKind,
    map: &'m GridMap,
    policy: Option<Vec<usize>>,
    cache_path: bool,
    cached: Option<Vec<usize>>,
}

impl<'m> BaselinePlanner<'m> {
    pub fn astar(map: &'m GridMap, cache_path: bool) -> Self {
        BaselinePlanner {
            kind: BaselineKind::AStar,
            map,
            policy: None,
            cache_path,
            cached: None,
        }
    }

    pub fn mdp(map: &'m GridMap, policy: Vec<usize>) -> Result<Self, BaselineError> {
        if policy.len() != map.num_cells() {
            return Err(BaselineError::PolicyLength {
                expected: map.num_cells(),
                got: policy.len(),
            });
        }
        Ok(BaselinePlanner {
            kind: BaselineKind::Mdp,
            map,
            policy: Some(policy),
            cache_path: false,
            cached: None,
        })
    }

    pub fn act(&mut self, b: &Belief) -> Result<usize, BaselineError> {
        match self.kind {
            BaselineKind::Mdp => Ok(mdp_act(self.policy.as_ref().expect("mdp policy"), b)),
            BaselineKind::AStar => {
                let mode = belief_mode(b);
                if self.cache_path {
                    if let Some(path) = &self.cached {
                        if let Some(pos) = path.iter().position(|&c| c == mode) {
                            if pos + 1 < path.len() {
                                let a = self
                                    .map
                                    .action_between(path[pos], path[pos + 1])
                                    .expect("path step");
                                return Ok(a);
                            }
                            return Ok(STAY);
                        }
                    }
                }
                let path = astar_path(self.map, mode)?;
                let action = if path.len() < 2 {
                    STAY
                } else {
                    self.map
                        .action_between(path[0], path[1])
                        .expect("path step")
                };
                if self.cache_path {
                    self.cached = Some(path);
                }
                Ok(action)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::MotionNoise;
    use crate::solvers::{solve_mdp, SolverConfig};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::collections::VecDeque;

    #[test]
    fn belief_mode_cases() {
        assert_eq!(belief_mode(&Belief::new(vec![0.2, 0.5, 0.3]).unwrap()), 1);
        assert_eq!(belief_mode(&Belief::uniform(4)), 0);
        assert_eq!(belief_mode(&Belief::point_mass(5, 3)), 3);
    }

    #[test]
    fn astar_simple_cases() {
        let map = GridMap::parse("..G").unwrap();
        assert_eq!(astar_plan(&map, 2).unwrap(), STAY);
        assert_eq!(astar_plan(&map, 0).unwrap(), 5); // rightward

        let walled = GridMap::parse(".#G").unwrap();
        assert_eq!(
            astar_plan(&walled, 0),
            Err(BaselineError::Unreachable { from: 0 })
        );
    }

    /// Breadth-first search over the same 8-connected unit-cost graph.
    fn bfs_distance(map: &GridMap, from: usize) -> Option<usize> {
        let mut dist = vec![usize::MAX; map.num_cells()];
        let mut queue = VecDeque::new();
        dist[from] = 0;
        queue.push_back(from);
        while let Some(cell) = queue.pop_front() {
            if cell == map.goal() {
                return Some(dist[cell]);
            }
            for a in 0..9 {
                if a == STAY {
                    continue;
                }
                if let Some(next) = map.neighbor(cell, a) {
                    if !map.is_occupied(next) && dist[next] == usize::MAX {
                        dist[next] = dist[cell] + 1;
                        queue.push_back(next);
                    }
                }
            }
        }
        None
    }

    #[test]
    fn astar_matches_bfs_on_random_maps() {
        let mut rng = StdRng::seed_from_u64(2024);
        for _ in 0..40 {
            let w = rng.gen_range(3..=20);
            let h = rng.gen_range(3..=20);
            let mut cells: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.3)).collect();
            let free: Vec<usize> = (0..w * h).filter(|&i| !cells[i]).collect();
            if free.is_empty() {
                continue;
            }
            let goal = free[rng.gen_range(0..free.len())];
            cells[goal] = false;
            let map = GridMap::new(w, h, cells, goal, None).unwrap();
            for _ in 0..10 {
                let from = free[rng.gen_range(0..free.len())];
                match (astar_path(&map, from), bfs_distance(&map, from)) {
                    (Ok(path), Some(d)) => {
                        assert_eq!(path.len() - 1, d, "suboptimal path from {from}");
                        // Heuristic admissibility along the optimum.
                        assert!(chebyshev(&map, from, map.goal()) as usize <= d);
                    }
                    (Err(_), None) => {}
                    (got, want) => panic!("reachability mismatch: {got:?} vs {want:?}"),
                }
            }
        }
    }

    #[test]
    fn mdp_baseline_on_corridor() {
        // Deterministic 1x3 corridor with the goal at the right end.
        let map = GridMap::parse("..G").unwrap();
        let noise = MotionNoise::new(1.0, 0.0, 0.0).unwrap();
        let model = crate::gridworld::compile_model(&map, &noise, 0.95, 0.95).unwrap();
        let sol = solve_mdp(&model, &SolverConfig::default());
        // Hand fixed point: V = [-1, 0, 0] (moving onto the goal is free per
        // the destination-scored stage reward), rightward policy.
        assert!((sol.values[0] - (-1.0)).abs() < 1e-3);
        assert!((sol.values[1] - 0.0).abs() < 1e-3);
        assert!((sol.values[2] - 0.0).abs() < 1e-3);
        assert_eq!(sol.policy[0], 5);
        assert_eq!(sol.policy[1], 5);
        assert_eq!(sol.policy[2], STAY);

        let mut planner = BaselinePlanner::mdp(&map, sol.policy.clone()).unwrap();
        assert_eq!(planner.act(&Belief::point_mass(3, 0)).unwrap(), 5);
        // Uniform belief: mode at index 0.
        assert_eq!(planner.act(&Belief::uniform(3)).unwrap(), sol.policy[0]);
    }

    #[test]
    fn mdp_single_goal_cell_stays() {
        let map = GridMap::parse("G").unwrap();
        let model =
            crate::gridworld::compile_model(&map, &MotionNoise::default(), 0.95, 0.95).unwrap();
        let sol = solve_mdp(&model, &SolverConfig::default());
        assert!(sol.values[0].abs() < 1e-6);
        assert_eq!(sol.policy[0], STAY);
    }

    #[test]
    fn mdp_policy_length_checked() {
        let map = GridMap::parse("..G").unwrap();
        assert!(matches!(
            BaselinePlanner::mdp(&map, vec![0, 1]),
            Err(BaselineError::PolicyLength { .. })
        ));
    }

    #[test]
    fn cached_astar_follows_path_until_mode_leaves_it() {
        let map = GridMap::parse(".....G").unwrap();
        let mut planner = BaselinePlanner::astar(&map, true);
        assert_eq!(planner.act(&Belief::point_mass(6, 0)).unwrap(), 5);
        // Mode advanced along the cached path: still rightward, no replan.
        assert_eq!(planner.act(&Belief::point_mass(6, 1)).unwrap(), 5);
        // Mode reached the cached path's end cell: stay.
        assert_eq!(planner.act(&Belief::point_mass(6, 5)).unwrap(), STAY);
    }
}

//! Seeded generator for benchmark maps: mostly open space with sparse
//! rectangular obstacle blocks acting as localization landmarks, a goal on
//! the right side, and a start region on the left. Connectivity from the
//! start region to the goal is preserved.

use crate::gridworld::{GridMap, STAY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

#[derive(Debug, Clone)]
pub struct MapGenConfig {
    pub width: usize,
    pub height: usize,
    /// Number of obstacle blocks to attempt to place.
    pub obstacle_blocks: usize,
    pub block_min: usize,
    pub block_max: usize,
    pub seed: u64,
    /// Mark a small start region on the left side with `S`.
    pub with_start_region: bool,
}

impl Default for MapGenConfig {
    fn default() -> Self {
        MapGenConfig {
            width: 100,
            height: 40,
            obstacle_blocks: 12,
            block_min: 2,
            block_max: 4,
            seed: 0,
            with_start_region: true,
        }
    }
}

fn connected(cells: &[bool], width: usize, height: usize, from: usize, to: usize) -> bool {
    if cells[from] || cells[to] {
        return false;
    }
    let mut seen = vec![false; cells.len()];
    let mut queue = VecDeque::new();
    seen[from] = true;
    queue.push_back(from);
    while let Some(cell) = queue.pop_front() {
        if cell == to {
            return true;
        }
        let (r, c) = (cell / width, cell % width);
        for a in 0..9 {
            if a == STAY {
                continue;
            }
            let nr = r as isize + (a / 3) as isize - 1;
            let nc = c as isize + (a % 3) as isize - 1;
            if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                continue;
            }
            let next = nr as usize * width + nc as usize;
            if !seen[next] && !cells[next] {
                seen[next] = true;
                queue.push_back(next);
            }
        }
    }
    false
}

/// Generates a landmark map. Deterministic in the seed.
pub fn generate_landmark_map(cfg: &MapGenConfig) -> GridMap {
    assert!(cfg.width >= 12 && cfg.height >= 8, "map too small to stage");
    assert!(cfg.block_min >= 1 && cfg.block_max >= cfg.block_min);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);
    let mut cells = vec![false; w * h];

    // Goal in the right band, start region in the left band.
    let goal_r = rng.gen_range(h / 5..h - h / 5);
    let goal_c = rng.gen_range(w - w / 6..w - 2);
    let goal = goal_r * w + goal_c;

    let start_r = rng.gen_range(h / 4..(3 * h) / 4);
    let start_c = 3usize;
    let mut start_cells = Vec::new();
    for dr in 0..3 {
        for dc in 0..3 {
            let r = (start_r + dr).min(h - 2);
            start_cells.push(r * w + start_c + dc);
        }
    }
    start_cells.sort_unstable();
    start_cells.dedup();
    let start_anchor = start_cells[0];

    // Obstacle blocks, kept clear of the start and goal and of each other,
    // dropped when they would disconnect start from goal.
    let margin = 3usize;
    for _ in 0..cfg.obstacle_blocks {
        for _attempt in 0..25 {
            let bw = rng.gen_range(cfg.block_min..=cfg.block_max);
            let bh = rng.gen_range(cfg.block_min..=cfg.block_max);
            if w <= bw + 2 * margin || h <= bh + 2 * margin {
                continue;
            }
            let r0 = rng.gen_range(margin..h - bh - margin);
            let c0 = rng.gen_range(margin..w - bw - margin);
            let mut clear = true;
            'scan: for r in r0.saturating_sub(2)..(r0 + bh + 2).min(h) {
                for c in c0.saturating_sub(2)..(c0 + bw + 2).min(w) {
                    let idx = r * w + c;
                    if cells[idx]
                        || idx == goal
                        || start_cells.binary_search(&idx).is_ok()
                    {
                        clear = false;
                        break 'scan;
                    }
                }
            }
            if !clear {
                continue;
            }
            for r in r0..r0 + bh {
                for c in c0..c0 + bw {
                    cells[r * w + c] = true;
                }
            }
            if connected(&cells, w, h, start_anchor, goal) {
                break;
            }
            for r in r0..r0 + bh {
                for c in c0..c0 + bw {
                    cells[r * w + c] = false;
                }
            }
        }
    }

    let start_region = cfg.with_start_region.then_some(start_cells);
    GridMap::new(w, h, cells, goal, start_region).expect("generated map is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_connected() {
        let cfg = MapGenConfig::default();
        let a = generate_landmark_map(&cfg);
        let b = generate_landmark_map(&cfg);
        assert_eq!(a, b);
        assert_eq!(a.num_cells(), 4000);
        let start = a.start_region().unwrap()[0];
        assert!(connected(
            &(0..a.num_cells()).map(|i| a.is_occupied(i)).collect::<Vec<_>>(),
            a.width(),
            a.height(),
            start,
            a.goal()
        ));
        // Different seeds give different maps.
        let c = generate_landmark_map(&MapGenConfig {
            seed: 1,
            ..MapGenConfig::default()
        });
        assert_ne!(a, c);
    }

    #[test]
    fn generated_maps_have_some_obstacles() {
        for seed in 0..4 {
            let map = generate_landmark_map(&MapGenConfig {
                seed,
                ..MapGenConfig::default()
            });
            let occupied = (0..map.num_cells())
                .filter(|&i| map.is_occupied(i))
                .count();
            assert!(occupied > 20, "seed {seed}: only {occupied} occupied");
            assert!(occupied < map.num_cells() / 4);
        }
    }
}

//! Compiles a 2-D occupancy grid, goal, and noise parameters into a POMDP.
//!
//! Nine actions index the 3x3 stencil around the robot in row-major order
//! (action 4 is "stay"). Motion noise puts mass on the intended cell, the
//! current cell, and the two cells angularly adjacent to the intended one;
//! mass aimed at occupied or off-map cells is clamped back to the current
//! cell. Four sensors read the occupancy of the orthogonal neighbors, giving
//! a 16-word observation alphabet.

use crate::model::{Belief, ModelError, PomdpModel};
use thiserror::Error;

/// The stay action: center of the 3x3 stencil.
pub const STAY: usize = 4;
/// Number of grid actions.
pub const NUM_ACTIONS: usize = 9;
/// Sensors read the orthogonal stencil cells, in this order (up, left,
/// right, down). Bit k of an observation word is sensor k's reading.
pub const SENSOR_ACTIONS: [usize; 4] = [1, 3, 5, 7];
/// Number of observation words.
pub const NUM_OBSERVATIONS: usize = 16;

/// The two stencil directions angularly adjacent to each non-stay action.
const LATERALS: [[usize; 2]; 9] = [
    [1, 3], // up-left
    [0, 2], // up
    [1, 5], // up-right
    [0, 6], // left
    [0, 0], // stay (unused)
    [2, 8], // right
    [3, 7], // down-left
    [6, 8], // down
    [5, 7], // down-right
];

#[derive(Debug, Error)]
pub enum GridError {
    #[error("map is empty or rows have unequal lengths")]
    NonRectangular,
    #[error("map has no goal cell")]
    MissingGoal,
    #[error("map has more than one goal cell")]
    MultipleGoals,
    #[error("goal cell is occupied")]
    GoalOccupied,
    #[error("invalid map character {0:?}")]
    InvalidCharacter(char),
    #[error("map has no free cell")]
    NoFreeCell,
    #[error("start region cell {0} is occupied, out of range, or the goal")]
    InvalidStartRegion(usize),
    #[error("motion noise must be non-negative and sum to one, got intended={p_intended} stay={p_stay} lateral={p_lateral}")]
    InvalidNoise {
        p_intended: f64,
        p_stay: f64,
        p_lateral: f64,
    },
    #[error("sensor accuracy must lie in (0.5, 1], got {0}")]
    InvalidSensorAccuracy(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Occupancy grid with a goal cell and an optional simulation start region.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    width: usize,
    height: usize,
    /// Row-major occupancy bits, true = occupied.
    cells: Vec<bool>,
    goal: usize,
    /// Ground-truth start cells for simulation; the initial belief stays
    /// uniform over all free cells regardless.
    start_region: Option<Vec<usize>>,
}

impl GridMap {
    pub fn new(
        width: usize,
        height: usize,
        cells: Vec<bool>,
        goal: usize,
        start_region: Option<Vec<usize>>,
    ) -> Result<Self, GridError> {
        if width == 0 || height == 0 || cells.len() != width * height {
            return Err(GridError::NonRectangular);
        }
        if goal >= cells.len() {
            return Err(GridError::MissingGoal);
        }
        if cells[goal] {
            return Err(GridError::GoalOccupied);
        }
        if !cells.iter().any(|&c| !c) {
            return Err(GridError::NoFreeCell);
        }
        let start_region = match start_region {
            Some(mut region) if !region.is_empty() => {
                region.sort_unstable();
                region.dedup();
                for &c in &region {
                    if c >= cells.len() || cells[c] || c == goal {
                        return Err(GridError::InvalidStartRegion(c));
                    }
                }
                Some(region)
            }
            _ => None,
        };
        Ok(GridMap {
            width,
            height,
            cells,
            goal,
            start_region,
        })
    }

    /// Parses an ASCII block over `{#, ., G, S}`: `#` occupied, `.` free,
    /// `G` the goal (exactly one), `S` a start-region cell.
    pub fn parse(text: &str) -> Result<Self, GridError> {
        let lines: Vec<&str> = text
            .lines()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty())
            .collect();
        if lines.is_empty() {
            return Err(GridError::NonRectangular);
        }
        let width = lines[0].chars().count();
        if width == 0 || lines.iter().any(|l| l.chars().count() != width) {
            return Err(GridError::NonRectangular);
        }
        let height = lines.len();
        let mut cells = vec![false; width * height];
        let mut goal = None;
        let mut start = Vec::new();
        for (r, line) in lines.iter().enumerate() {
            for (c, ch) in line.chars().enumerate() {
                let idx = r * width + c;
                match ch {
                    '#' => cells[idx] = true,
                    '.' => {}
                    'G' => {
                        if goal.replace(idx).is_some() {
                            return Err(GridError::MultipleGoals);
                        }
                    }
                    'S' => start.push(idx),
                    other => return Err(GridError::InvalidCharacter(other)),
                }
            }
        }
        let goal = goal.ok_or(GridError::MissingGoal)?;
        let start_region = if start.is_empty() { None } else { Some(start) };
        GridMap::new(width, height, cells, goal, start_region)
    }

    /// Inverse of [`GridMap::parse`].
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let idx = r * self.width + c;
                let ch = if idx == self.goal {
                    'G'
                } else if self.cells[idx] {
                    '#'
                } else if self
                    .start_region
                    .as_deref()
                    .is_some_and(|s| s.binary_search(&idx).is_ok())
                {
                    'S'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn goal(&self) -> usize {
        self.goal
    }

    pub fn start_region(&self) -> Option<&[usize]> {
        self.start_region.as_deref()
    }

    pub fn is_occupied(&self, cell: usize) -> bool {
        self.cells[cell]
    }

    pub fn row_col(&self, cell: usize) -> (usize, usize) {
        (cell / self.width, cell % self.width)
    }

    pub fn cell_at(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Stencil neighbor `N_a(x)`, or `None` when it falls off the map.
    pub fn neighbor(&self, cell: usize, action: usize) -> Option<usize> {
        let (r, c) = self.row_col(cell);
        let dr = (action / 3) as isize - 1;
        let dc = (action % 3) as isize - 1;
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        if nr < 0 || nc < 0 || nr >= self.height as isize || nc >= self.width as isize {
            None
        } else {
            Some(self.cell_at(nr as usize, nc as usize))
        }
    }

    /// Occupancy of a stencil neighbor; off-map reads as occupied.
    pub fn neighbor_occupied(&self, cell: usize, action: usize) -> bool {
        match self.neighbor(cell, action) {
            Some(y) => self.cells[y],
            None => true,
        }
    }

    pub fn free_cells(&self) -> Vec<usize> {
        (0..self.cells.len()).filter(|&i| !self.cells[i]).collect()
    }

    /// Grid action that moves `from` to the stencil cell `to`, if adjacent.
    pub fn action_between(&self, from: usize, to: usize) -> Option<usize> {
        let (fr, fc) = self.row_col(from);
        let (tr, tc) = self.row_col(to);
        let dr = tr as isize - fr as isize;
        let dc = tc as isize - fc as isize;
        if dr.abs() > 1 || dc.abs() > 1 {
            return None;
        }
        Some(((dr + 1) * 3 + (dc + 1)) as usize)
    }
}

/// Motion noise for non-stay actions: intended cell, stay put, and each of
/// the two neighbors angularly adjacent to the intended one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionNoise {
    pub p_intended: f64,
    pub p_stay: f64,
    pub p_lateral: f64,
}

impl Default for MotionNoise {
    fn default() -> Self {
        MotionNoise {
            p_intended: 0.8,
            p_stay: 0.1,
            p_lateral: 0.05,
        }
    }
}

impl MotionNoise {
    pub fn new(p_intended: f64, p_stay: f64, p_lateral: f64) -> Result<Self, GridError> {
        let noise = MotionNoise {
            p_intended,
            p_stay,
            p_lateral,
        };
        noise.validate()?;
        Ok(noise)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let sum = self.p_intended + self.p_stay + 2.0 * self.p_lateral;
        let ok = self.p_intended >= 0.0
            && self.p_stay >= 0.0
            && self.p_lateral >= 0.0
            && (sum - 1.0).abs() <= 1e-9;
        if ok {
            Ok(())
        } else {
            Err(GridError::InvalidNoise {
                p_intended: self.p_intended,
                p_stay: self.p_stay,
                p_lateral: self.p_lateral,
            })
        }
    }
}

/// Where a raw (pre-clamp) move lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StencilTarget {
    Cell(usize),
    OffMap,
}

/// Support of the pre-clamp kernel T'(x, a, .): up to four (target, prob)
/// pairs. Stay is deterministic. Off-map targets are reported as such so the
/// simulator can flag boundary collisions.
pub fn raw_move_targets(
    map: &GridMap,
    x: usize,
    a: usize,
    noise: &MotionNoise,
) -> Vec<(StencilTarget, f64)> {
    if a == STAY {
        return vec![(StencilTarget::Cell(x), 1.0)];
    }
    let target = |dir: usize| match map.neighbor(x, dir) {
        Some(y) => StencilTarget::Cell(y),
        None => StencilTarget::OffMap,
    };
    vec![
        (target(a), noise.p_intended),
        (StencilTarget::Cell(x), noise.p_stay),
        (target(LATERALS[a][0]), noise.p_lateral),
        (target(LATERALS[a][1]), noise.p_lateral),
    ]
}

/// Clamped transition table: probability aimed at occupied or off-map cells
/// accumulates on the current cell. Occupied states are absorbing.
pub fn build_transition(
    map: &GridMap,
    noise: &MotionNoise,
) -> Result<Vec<Vec<(usize, f64)>>, GridError> {
    noise.validate()?;
    let n = map.num_cells();
    let mut table = Vec::with_capacity(n * NUM_ACTIONS);
    for x in 0..n {
        for a in 0..NUM_ACTIONS {
            if map.is_occupied(x) {
                table.push(vec![(x, 1.0)]);
                continue;
            }
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
            let mut add = |y: usize, p: f64| {
                if p <= 0.0 {
                    return;
                }
                match row.iter_mut().find(|e| e.0 == y) {
                    Some(e) => e.1 += p,
                    None => row.push((y, p)),
                }
            };
            for (target, p) in raw_move_targets(map, x, a, noise) {
                match target {
                    StencilTarget::Cell(y) if !map.is_occupied(y) => add(y, p),
                    _ => add(x, p),
                }
            }
            row.sort_by_key(|&(y, _)| y);
            table.push(row);
        }
    }
    Ok(table)
}

/// Dense observation table over 16 four-bit words. Each orthogonal sensor
/// reports the occupancy of its stencil cell (off-map reads occupied) with
/// the given accuracy; sensors are independent given the state. Occupied
/// states observe uniformly.
pub fn build_observation(map: &GridMap, sensor_accuracy: f64) -> Result<Vec<f64>, GridError> {
    if !(sensor_accuracy > 0.5 && sensor_accuracy <= 1.0) {
        return Err(GridError::InvalidSensorAccuracy(sensor_accuracy));
    }
    let n = map.num_cells();
    let mut table = vec![0.0; n * NUM_OBSERVATIONS];
    for x in 0..n {
        let row = &mut table[x * NUM_OBSERVATIONS..(x + 1) * NUM_OBSERVATIONS];
        if map.is_occupied(x) {
            row.fill(1.0 / NUM_OBSERVATIONS as f64);
            continue;
        }
        let truth: Vec<bool> = SENSOR_ACTIONS
            .iter()
            .map(|&s| map.neighbor_occupied(x, s))
            .collect();
        for (z, slot) in row.iter_mut().enumerate() {
            let mut p = 1.0;
            for (k, &occ) in truth.iter().enumerate() {
                let bit = (z >> k) & 1 == 1;
                p *= if bit == occ {
                    sensor_accuracy
                } else {
                    1.0 - sensor_accuracy
                };
            }
            *slot = p;
        }
    }
    Ok(table)
}

/// Stage rewards. Staying anywhere but the goal costs -2; any other action is
/// scored by the pre-clamp kernel against the cell reward r(y) in {-2,-1,0}
/// (occupied or off-map -2, free -1, goal 0).
pub fn build_reward(map: &GridMap, noise: &MotionNoise) -> Result<Vec<f64>, GridError> {
    noise.validate()?;
    let n = map.num_cells();
    let cell_reward = |t: StencilTarget| match t {
        StencilTarget::OffMap => -2.0,
        StencilTarget::Cell(y) => {
            if map.is_occupied(y) {
                -2.0
            } else if y == map.goal() {
                0.0
            } else {
                -1.0
            }
        }
    };
    let mut table = vec![0.0; n * NUM_ACTIONS];
    for x in 0..n {
        for a in 0..NUM_ACTIONS {
            table[x * NUM_ACTIONS + a] = if a == STAY && x != map.goal() {
                -2.0
            } else {
                raw_move_targets(map, x, a, noise)
                    .into_iter()
                    .map(|(t, p)| p * cell_reward(t))
                    .sum()
            };
        }
    }
    Ok(table)
}

/// Compiles the grid into a full POMDP with a uniform-over-free-cells
/// initial belief.
pub fn compile_model(
    map: &GridMap,
    noise: &MotionNoise,
    sensor_accuracy: f64,
    discount: f64,
) -> Result<PomdpModel, GridError> {
    let transition = build_transition(map, noise)?;
    let observation = build_observation(map, sensor_accuracy)?;
    let reward = build_reward(map, noise)?;
    let b0 = Belief::uniform_over(map.num_cells(), &map.free_cells());
    Ok(PomdpModel::new(
        map.num_cells(),
        NUM_ACTIONS,
        NUM_OBSERVATIONS,
        transition,
        observation,
        reward,
        discount,
        b0,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn open_3x3() -> GridMap {
        GridMap::parse("...\n.G.\n...").unwrap()
    }

    fn prob(row: &[(usize, f64)], y: usize) -> f64 {
        row.iter().find(|e| e.0 == y).map_or(0.0, |e| e.1)
    }

    #[test]
    fn transition_kernel_reads_off_defaults() {
        // Kernel is defined around the center cell; the goal placement does
        // not enter the transition.
        let map = open_3x3();
        let noise = MotionNoise::default();
        let t = build_transition(&map, &noise).unwrap();
        let center = map.cell_at(1, 1);
        let up = 1;
        let row = &t[center * NUM_ACTIONS + up];
        assert!((prob(row, map.cell_at(0, 1)) - 0.8).abs() < 1e-12);
        assert!((prob(row, center) - 0.1).abs() < 1e-12);
        assert!((prob(row, map.cell_at(0, 0)) - 0.05).abs() < 1e-12);
        assert!((prob(row, map.cell_at(0, 2)) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn transition_clamps_occupied_intended_cell() {
        let map = GridMap::parse(".#.\n.G.\n...").unwrap();
        let noise = MotionNoise::default();
        let t = build_transition(&map, &noise).unwrap();
        let center = map.cell_at(1, 1);
        let row = &t[center * NUM_ACTIONS + 1];
        assert!((prob(row, center) - 0.9).abs() < 1e-12);
        assert!((prob(row, map.cell_at(0, 0)) - 0.05).abs() < 1e-12);
        assert!((prob(row, map.cell_at(0, 2)) - 0.05).abs() < 1e-12);
        assert_eq!(prob(row, map.cell_at(0, 1)), 0.0);
    }

    #[test]
    fn stay_is_deterministic_everywhere() {
        let map = open_3x3();
        let t = build_transition(&map, &MotionNoise::default()).unwrap();
        for x in 0..map.num_cells() {
            assert_eq!(t[x * NUM_ACTIONS + STAY], vec![(x, 1.0)]);
        }
    }

    #[test]
    fn off_map_mass_clamps_to_stay() {
        let map = open_3x3();
        let noise = MotionNoise::default();
        let t = build_transition(&map, &noise).unwrap();
        let corner = map.cell_at(0, 0);
        // Up from the top-left corner: intended and both laterals off-map.
        let up = &t[corner * NUM_ACTIONS + 1];
        assert_eq!(up, &vec![(corner, 1.0)]);
        // Right from the corner: up-right lateral off-map, down-right in-map.
        let right = &t[corner * NUM_ACTIONS + 5];
        assert!((prob(right, corner) - 0.15).abs() < 1e-12);
        assert!((prob(right, map.cell_at(0, 1)) - 0.8).abs() < 1e-12);
        assert!((prob(right, map.cell_at(1, 1)) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn observation_all_free_and_one_wrong_bit() {
        let map = GridMap::parse(
            ".....\n\
             .....\n\
             ..G..\n\
             .....\n\
             .....",
        )
        .unwrap();
        let o = build_observation(&map, 0.95).unwrap();
        let center = map.cell_at(2, 2);
        assert!((o[center * NUM_OBSERVATIONS] - 0.81450625).abs() < 1e-12);
        assert!((o[center * NUM_OBSERVATIONS + 1] - 0.95f64.powi(3) * 0.05).abs() < 1e-12);
    }

    #[test]
    fn perfect_sensor_gives_single_word() {
        let map = open_3x3();
        let o = build_observation(&map, 1.0).unwrap();
        for x in 0..map.num_cells() {
            if map.is_occupied(x) {
                continue;
            }
            let row = &o[x * NUM_OBSERVATIONS..(x + 1) * NUM_OBSERVATIONS];
            assert_eq!(row.iter().filter(|&&p| p == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&p| p == 0.0).count(), 15);
        }
    }

    #[test]
    fn reward_cases() {
        let map = open_3x3();
        let noise = MotionNoise::default();
        let r = build_reward(&map, &noise).unwrap();
        let goal = map.goal();
        let corner = map.cell_at(0, 0);
        // Stay off-goal.
        assert_eq!(r[corner * NUM_ACTIONS + STAY], -2.0);
        // Stay at the goal: deterministic, lands on the goal.
        assert_eq!(r[goal * NUM_ACTIONS + STAY], 0.0);
        // A move whose whole stencil is free and non-goal costs -1.
        let map5 = GridMap::parse(
            ".....\n\
             .....\n\
             ....G\n\
             .....\n\
             .....",
        )
        .unwrap();
        let r5 = build_reward(&map5, &noise).unwrap();
        let c = map5.cell_at(2, 1);
        assert!((r5[c * NUM_ACTIONS + 1] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn parse_and_errors() {
        let map = GridMap::parse("G.\n.#").unwrap();
        assert_eq!((map.width(), map.height()), (2, 2));
        assert_eq!(map.goal(), 0);
        assert_eq!(
            (0..4).filter(|&i| map.is_occupied(i)).collect::<Vec<_>>(),
            vec![3]
        );

        assert!(matches!(
            GridMap::parse("..\n..").unwrap_err(),
            GridError::MissingGoal
        ));
        assert!(matches!(
            GridMap::parse("G.\n..G").unwrap_err(),
            GridError::NonRectangular
        ));
        assert!(matches!(
            GridMap::parse("GG").unwrap_err(),
            GridError::MultipleGoals
        ));
        assert!(matches!(
            GridMap::parse("Gx").unwrap_err(),
            GridError::InvalidCharacter('x')
        ));
        assert!(matches!(
            GridMap::new(2, 1, vec![false, true], 1, None).unwrap_err(),
            GridError::GoalOccupied
        ));
    }

    #[test]
    fn ascii_round_trip() {
        let text = "S.#..\nS..#.\n..G..\n#....\n";
        let map = GridMap::parse(text).unwrap();
        assert_eq!(map.to_ascii(), text);
        assert_eq!(GridMap::parse(&map.to_ascii()).unwrap(), map);
    }

    #[test]
    fn invalid_noise_rejected() {
        assert!(MotionNoise::new(0.8, 0.1, 0.1).is_err());
        assert!(MotionNoise::new(-0.1, 0.9, 0.1).is_err());
        assert!(MotionNoise::new(1.0, 0.0, 0.0).is_ok());
        let map = open_3x3();
        assert!(matches!(
            build_transition(
                &map,
                &MotionNoise {
                    p_intended: 0.5,
                    p_stay: 0.1,
                    p_lateral: 0.1
                }
            )
            .unwrap_err(),
            GridError::InvalidNoise { .. }
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Clamping never leaves mass on occupied cells and conserves mass.
        #[test]
        fn clamp_properties(seed in 0u64..500, w in 2usize..7, h in 2usize..7) {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut cells: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.25)).collect();
            let free: Vec<usize> = (0..w * h).filter(|&i| !cells[i]).collect();
            prop_assume!(!free.is_empty());
            let goal = free[rng.gen_range(0..free.len())];
            cells[goal] = false;
            let map = GridMap::new(w, h, cells, goal, None).unwrap();
            let t = build_transition(&map, &MotionNoise::default()).unwrap();
            for x in 0..map.num_cells() {
                for a in 0..NUM_ACTIONS {
                    let row = &t[x * NUM_ACTIONS + a];
                    let sum: f64 = row.iter().map(|e| e.1).sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                    for &(y, p) in row {
                        if map.is_occupied(y) && p > 0.0 {
                            // Occupied rows are absorbing on themselves only.
                            prop_assert!(map.is_occupied(x) && y == x);
                        }
                    }
                }
            }
            let o = build_observation(&map, 0.95).unwrap();
            for x in 0..map.num_cells() {
                let s: f64 = o[x * NUM_OBSERVATIONS..(x + 1) * NUM_OBSERVATIONS].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }
}

//! Finite POMDP model tables, belief arithmetic, and PWLC value evaluation.
//!
//! A model is the tuple (X, A, Z, T, O, R, b0, gamma) in dense/sparse table
//! form: the transition kernel is stored sparsely per (state, action) pair
//! (grid models have at most nine successors), the observation likelihood and
//! reward tables are dense. Models and alpha-vector sets are immutable after
//! construction and safe to share across threads; belief operations are pure.

use thiserror::Error;

/// Probability rows must sum to one within this tolerance once constructed.
pub const NORM_TOLERANCE: f64 = 1e-9;
/// Rows deviating from one by at most this much are renormalized on
/// construction; larger deviations are rejected as modeling errors.
pub const RENORM_LIMIT: f64 = 1e-6;
/// Belief-update normalizers at or below this threshold are treated as an
/// impossible observation rather than ordinary underflow.
pub const ZERO_LIKELIHOOD: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension must be positive: {0}")]
    EmptyDimension(&'static str),
    #[error("discount factor must lie strictly in (0, 1), got {0}")]
    InvalidDiscount(f64),
    #[error("{table} row {row} sums to {sum}, outside the renormalization limit")]
    RowNotNormalized {
        table: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("{table} row {row} contains a negative or non-finite entry {value}")]
    BadEntry {
        table: &'static str,
        row: usize,
        value: f64,
    },
    #[error("transition row ({state},{action}) references successor {successor} out of range")]
    BadSuccessor {
        state: usize,
        action: usize,
        successor: usize,
    },
    #[error("expected {expected} entries, got {got} for {what}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("alpha set must be non-empty")]
    EmptyAlphaSet,
}

/// Raised when the Bayes-update normalizer P(z | b, a) vanishes: the observed
/// measurement is impossible under the model. The caller decides the fallback.
#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
#[error("observation {observation} has zero likelihood under action {action}")]
pub struct ZeroLikelihoodObservation {
    pub action: usize,
    pub observation: usize,
}

/// Probability distribution over the state set; the planner's sufficient
/// statistic for the action/observation history.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    probs: Vec<f64>,
}

impl Belief {
    /// Validates entries and renormalizes sums within [`RENORM_LIMIT`].
    pub fn new(probs: Vec<f64>) -> Result<Self, ModelError> {
        if probs.is_empty() {
            return Err(ModelError::EmptyDimension("belief length"));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < 0.0 {
                return Err(ModelError::BadEntry {
                    table: "belief",
                    row: 0,
                    value: p,
                });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > RENORM_LIMIT {
            return Err(ModelError::RowNotNormalized {
                table: "belief",
                row: 0,
                sum,
            });
        }
        let mut probs = probs;
        for p in &mut probs {
            *p /= sum;
        }
        Ok(Belief { probs })
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0);
        Belief {
            probs: vec![1.0 / n as f64; n],
        }
    }

    /// Uniform over the listed states, zero elsewhere.
    pub fn uniform_over(n: usize, support: &[usize]) -> Self {
        assert!(!support.is_empty());
        let w = 1.0 / support.len() as f64;
        let mut probs = vec![0.0; n];
        for &x in support {
            probs[x] = w;
        }
        Belief { probs }
    }

    pub fn point_mass(n: usize, state: usize) -> Self {
        assert!(state < n);
        let mut probs = vec![0.0; n];
        probs[state] = 1.0;
        Belief { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn l1_distance(&self, other: &Belief) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// One hyperplane of a piecewise-linear-convex value bound, tagged with the
/// action that realizes it.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector {
    pub values: Vec<f64>,
    pub action: usize,
}

/// A non-empty set of alpha vectors; evaluation takes the max of dot products.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSet {
    vectors: Vec<AlphaVector>,
}

impl AlphaSet {
    pub fn new(vectors: Vec<AlphaVector>) -> Result<Self, ModelError> {
        let first = vectors.first().ok_or(ModelError::EmptyAlphaSet)?;
        let n = first.values.len();
        if n == 0 {
            return Err(ModelError::EmptyDimension("alpha vector length"));
        }
        for v in &vectors {
            if v.values.len() != n {
                return Err(ModelError::LengthMismatch {
                    what: "alpha vector",
                    expected: n,
                    got: v.values.len(),
                });
            }
        }
        Ok(AlphaSet { vectors })
    }

    pub fn vectors(&self) -> &[AlphaVector] {
        &self.vectors
    }

    pub fn num_states(&self) -> usize {
        self.vectors[0].values.len()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Max over the set of alpha . b, with the action attached to the argmax
/// vector. Ties go to the lowest vector index.
pub fn alpha_value(b: &Belief, set: &AlphaSet) -> (f64, usize) {
    assert_eq!(b.len(), set.num_states(), "belief/alpha dimension mismatch");
    let mut best = f64::NEG_INFINITY;
    let mut action = set.vectors[0].action;
    for v in set.vectors() {
        let dot: f64 = v
            .values
            .iter()
            .zip(b.probs())
            .map(|(a, p)| a * p)
            .sum();
        if dot > best {
            best = dot;
            action = v.action;
        }
    }
    (best, action)
}

/// Finite POMDP in table form.
#[derive(Debug, Clone)]
pub struct PomdpModel {
    num_states: usize,
    num_actions: usize,
    num_observations: usize,
    /// Sparse successor distributions, indexed `x * num_actions + a`, each row
    /// sorted by successor index.
    transition: Vec<Vec<(usize, f64)>>,
    /// Dense likelihoods, indexed `x * num_observations + z`.
    observation: Vec<f64>,
    /// Dense rewards, indexed `x * num_actions + a`.
    reward: Vec<f64>,
    discount: f64,
    initial_belief: Belief,
    reward_min: f64,
    reward_max: f64,
}

impl PomdpModel {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        num_observations: usize,
        transition: Vec<Vec<(usize, f64)>>,
        observation: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
        initial_belief: Belief,
    ) -> Result<Self, ModelError> {
        if num_states == 0 {
            return Err(ModelError::EmptyDimension("num_states"));
        }
        if num_actions == 0 {
            return Err(ModelError::EmptyDimension("num_actions"));
        }
        if num_observations == 0 {
            return Err(ModelError::EmptyDimension("num_observations"));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(ModelError::InvalidDiscount(discount));
        }
        if transition.len() != num_states * num_actions {
            return Err(ModelError::LengthMismatch {
                what: "transition table",
                expected: num_states * num_actions,
                got: transition.len(),
            });
        }
        if observation.len() != num_states * num_observations {
            return Err(ModelError::LengthMismatch {
                what: "observation table",
                expected: num_states * num_observations,
                got: observation.len(),
            });
        }
        if reward.len() != num_states * num_actions {
            return Err(ModelError::LengthMismatch {
                what: "reward table",
                expected: num_states * num_actions,
                got: reward.len(),
            });
        }
        if initial_belief.len() != num_states {
            return Err(ModelError::LengthMismatch {
                what: "initial belief",
                expected: num_states,
                got: initial_belief.len(),
            });
        }
        for (row, &r) in reward.iter().enumerate() {
            if !r.is_finite() {
                return Err(ModelError::BadEntry {
                    table: "reward",
                    row,
                    value: r,
                });
            }
        }

        // Canonicalize transition rows: sorted by successor, duplicates
        // merged, sums renormalized within the limit.
        let mut canon = Vec::with_capacity(transition.len());
        for (row, entries) in transition.into_iter().enumerate() {
            let state = row / num_actions;
            let action = row % num_actions;
            let mut entries = entries;
            entries.sort_by_key(|&(y, _)| y);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
            for (y, p) in entries {
                if y >= num_states {
                    return Err(ModelError::BadSuccessor {
                        state,
                        action,
                        successor: y,
                    });
                }
                if !p.is_finite() || p < 0.0 {
                    return Err(ModelError::BadEntry {
                        table: "transition",
                        row,
                        value: p,
                    });
                }
                match merged.last_mut() {
                    Some(last) if last.0 == y => last.1 += p,
                    _ => merged.push((y, p)),
                }
            }
            let sum: f64 = merged.iter().map(|&(_, p)| p).sum();
            if (sum - 1.0).abs() > RENORM_LIMIT {
                return Err(ModelError::RowNotNormalized {
                    table: "transition",
                    row,
                    sum,
                });
            }
            for e in &mut merged {
                e.1 /= sum;
            }
            canon.push(merged);
        }

        let mut observation = observation;
        for x in 0..num_states {
            let row = &mut observation[x * num_observations..(x + 1) * num_observations];
            let mut sum = 0.0;
            for &p in row.iter() {
                if !p.is_finite() || p < 0.0 {
                    return Err(ModelError::BadEntry {
                        table: "observation",
                        row: x,
                        value: p,
                    });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > RENORM_LIMIT {
                return Err(ModelError::RowNotNormalized {
                    table: "observation",
                    row: x,
                    sum,
                });
            }
            for p in row.iter_mut() {
                *p /= sum;
            }
        }

        let reward_min = reward.iter().cloned().fold(f64::INFINITY, f64::min);
        let reward_max = reward.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        Ok(PomdpModel {
            num_states,
            num_actions,
            num_observations,
            transition: canon,
            observation,
            reward,
            discount,
            initial_belief,
            reward_min,
            reward_max,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_observations(&self) -> usize {
        self.num_observations
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_belief(&self) -> &Belief {
        &self.initial_belief
    }

    /// Sparse row T(x, a, .), sorted by successor index.
    pub fn transition_row(&self, x: usize, a: usize) -> &[(usize, f64)] {
        &self.transition[x * self.num_actions + a]
    }

    pub fn observation_prob(&self, x: usize, z: usize) -> f64 {
        self.observation[x * self.num_observations + z]
    }

    /// Dense row O(x, .).
    pub fn observation_row(&self, x: usize) -> &[f64] {
        &self.observation[x * self.num_observations..(x + 1) * self.num_observations]
    }

    pub fn reward(&self, x: usize, a: usize) -> f64 {
        self.reward[x * self.num_actions + a]
    }

    /// (min, max) over the whole reward table.
    pub fn reward_bounds(&self) -> (f64, f64) {
        (self.reward_min, self.reward_max)
    }

    /// One-step state prediction sum_x T(x, a, .) b(x), written into `out`.
    pub(crate) fn predict_into(&self, b: &[f64], a: usize, out: &mut [f64]) {
        debug_assert_eq!(b.len(), self.num_states);
        debug_assert_eq!(out.len(), self.num_states);
        out.fill(0.0);
        for (x, &bx) in b.iter().enumerate() {
            if bx > 0.0 {
                for &(y, p) in self.transition_row(x, a) {
                    out[y] += p * bx;
                }
            }
        }
    }

    /// Bayes posterior: predict through T, weight by O(., z), renormalize.
    pub fn belief_update(
        &self,
        b: &Belief,
        a: usize,
        z: usize,
    ) -> Result<Belief, ZeroLikelihoodObservation> {
        assert!(a < self.num_actions && z < self.num_observations);
        let mut pred = vec![0.0; self.num_states];
        self.predict_into(b.probs(), a, &mut pred);
        let mut norm = 0.0;
        for (y, p) in pred.iter_mut().enumerate() {
            *p *= self.observation_prob(y, z);
            norm += *p;
        }
        if norm <= ZERO_LIKELIHOOD {
            return Err(ZeroLikelihoodObservation {
                action: a,
                observation: z,
            });
        }
        for p in &mut pred {
            *p /= norm;
        }
        Ok(Belief { probs: pred })
    }

    /// Normalizer of the Bayes update: P(z | b, a).
    pub fn obs_marginal(&self, b: &Belief, a: usize, z: usize) -> f64 {
        assert!(a < self.num_actions && z < self.num_observations);
        let mut pred = vec![0.0; self.num_states];
        self.predict_into(b.probs(), a, &mut pred);
        let mut norm = 0.0;
        for (y, p) in pred.iter().enumerate() {
            norm += *p * self.observation_prob(y, z);
        }
        norm
    }

    /// Belief-weighted expected stage reward R(b, a).
    pub fn belief_reward(&self, b: &Belief, a: usize) -> f64 {
        assert!(a < self.num_actions);
        b.probs()
            .iter()
            .enumerate()
            .map(|(x, &p)| p * self.reward(x, a))
            .sum()
    }
}

/// Seeded dense random model with strictly positive observation likelihoods.
/// Used by property tests and the acceptance suite.
pub fn random_pomdp(seed: u64, ns: usize, na: usize, nz: usize, gamma: f64) -> PomdpModel {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Vec::new();
    for _ in 0..ns * na {
        let mut row: Vec<(usize, f64)> = (0..ns).map(|y| (y, rng.gen_range(0.0..1.0))).collect();
        let sum: f64 = row.iter().map(|e| e.1).sum();
        for e in &mut row {
            e.1 /= sum;
        }
        transition.push(row);
    }
    let mut observation = Vec::new();
    for _ in 0..ns {
        let mut row: Vec<f64> = (0..nz).map(|_| rng.gen_range(0.01..1.0)).collect();
        let sum: f64 = row.iter().sum();
        for p in &mut row {
            *p /= sum;
        }
        observation.extend(row);
    }
    let reward: Vec<f64> = (0..ns * na).map(|_| rng.gen_range(-2.0..1.0)).collect();
    let mut b0: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.01..1.0)).collect();
    let sum: f64 = b0.iter().sum();
    for p in &mut b0 {
        *p /= sum;
    }
    PomdpModel::new(
        ns,
        na,
        nz,
        transition,
        observation,
        reward,
        gamma,
        Belief::new(b0).expect("normalized"),
    )
    .expect("rows normalized by construction")
}

/// Categorical draw from a dense weight slice (weights sum to ~1).
pub(crate) fn sample_categorical(weights: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            cum += w;
            last_positive = i;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

/// Categorical draw from a sparse (index, weight) row.
pub(crate) fn sample_sparse(row: &[(usize, f64)], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = row[0].0;
    for &(i, w) in row {
        if w > 0.0 {
            cum += w;
            last_positive = i;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

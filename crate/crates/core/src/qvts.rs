//! Anytime online QV-tree search.
//!
//! The tree interleaves V-nodes (beliefs) with Q-nodes (belief-action pairs).
//! Leaves are scored by the offline FIB upper and PBVI lower bounds; each
//! node carries an upper bound, a lower bound, a heuristic gap, and a pointer
//! to the leaf whose expansion most affects the root estimate, so selecting
//! the next leaf is O(1). Expanding a leaf creates one Q-node per action;
//! observation branches come either from forward sampling (default) or from
//! exact enumeration of all positive-probability observations (used by
//! oracle tests). After an expansion the bounds are backed up along the path
//! to the root.

use crate::model::{alpha_value, sample_categorical, sample_sparse};
use crate::model::{AlphaSet, Belief, PomdpModel, ZeroLikelihoodObservation, ZERO_LIKELIHOOD};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionRule {
    /// Execute the root action with the best guaranteed value (max L).
    MaxLower,
    /// Execute the most optimistic root action (max U).
    MaxUpper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpansionMode {
    /// Branch on observations drawn by forward sampling; weights are
    /// empirical frequencies.
    Sample,
    /// Branch on every observation with positive marginal; weights are the
    /// exact marginals. Used for oracle tests.
    ExactEnumeration,
}

#[derive(Debug, Clone)]
pub struct QvtsConfig {
    /// Observation samples drawn per Q-node construction.
    pub samples_per_qnode: usize,
    /// Wall-clock planning budget per step in milliseconds; 0 disables the
    /// time stop (the gap and node budgets still apply).
    pub time_budget_ms: u64,
    /// Planning stops once the root gap U - L falls below this.
    pub gap_tolerance: f64,
    /// Planning stops once the tree holds this many V-nodes.
    pub node_cap: usize,
    pub action_rule: ActionRule,
    pub expansion_mode: ExpansionMode,
    pub seed: u64,
}

impl Default for QvtsConfig {
    fn default() -> Self {
        QvtsConfig {
            samples_per_qnode: 64,
            time_budget_ms: 1000,
            gap_tolerance: 1e-3,
            node_cap: 100_000,
            action_rule: ActionRule::MaxLower,
            expansion_mode: ExpansionMode::Sample,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QvtsError {
    #[error("V-node already expanded")]
    AlreadyExpanded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VNodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QNodeId(usize);

#[derive(Debug, Clone)]
struct VNode {
    belief: Arc<Belief>,
    /// Observation on the edge from the parent Q-node; `None` at the root.
    observation: Option<usize>,
    /// Empirical (or exact) probability of that observation among siblings.
    weight: f64,
    parent: Option<QNodeId>,
    children: Vec<QNodeId>,
    upper: f64,
    lower: f64,
    heuristic: f64,
    expand_target: VNodeId,
}

#[derive(Debug, Clone)]
struct QNode {
    belief: Arc<Belief>,
    action: usize,
    parent: VNodeId,
    children: Vec<VNodeId>,
    upper: f64,
    lower: f64,
    heuristic: f64,
    expand_target: VNodeId,
    /// Cached R(b, a); a pure function of the stored belief and action.
    immediate_reward: f64,
}

#[derive(Clone)]
pub struct QvTree {
    model: Arc<PomdpModel>,
    upper_bound: Arc<AlphaSet>,
    lower_bound: Arc<AlphaSet>,
    cfg: QvtsConfig,
    rng: ChaCha8Rng,
    vnodes: Vec<VNode>,
    qnodes: Vec<QNode>,
    root: VNodeId,
}

/// Read-only view of a V-node, for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VNodeView {
    pub lower: f64,
    pub upper: f64,
    pub heuristic: f64,
    pub weight: f64,
    pub observation: Option<usize>,
    pub num_children: usize,
}

impl QvTree {
    /// Single-leaf tree rooted at `b0`, scored by the two offline bounds.
    pub fn new(
        model: Arc<PomdpModel>,
        upper_bound: Arc<AlphaSet>,
        lower_bound: Arc<AlphaSet>,
        b0: Belief,
        cfg: QvtsConfig,
    ) -> Self {
        assert_eq!(upper_bound.num_states(), model.num_states());
        assert_eq!(lower_bound.num_states(), model.num_states());
        assert_eq!(b0.len(), model.num_states());
        assert!(cfg.samples_per_qnode >= 1);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tree = QvTree {
            model,
            upper_bound,
            lower_bound,
            cfg,
            rng,
            vnodes: Vec::new(),
            qnodes: Vec::new(),
            root: VNodeId(0),
        };
        tree.push_root_leaf(Arc::new(b0));
        tree
    }

    /// Appends the root leaf with bound values from the offline alpha sets.
    fn push_root_leaf(&mut self, belief: Arc<Belief>) {
        let id = VNodeId(self.vnodes.len());
        let upper = alpha_value(&belief, &self.upper_bound).0;
        let lower = alpha_value(&belief, &self.lower_bound).0;
        self.vnodes.push(VNode {
            belief,
            observation: None,
            weight: 1.0,
            parent: None,
            children: Vec::new(),
            upper,
            lower,
            heuristic: upper - lower,
            expand_target: id,
        });
        self.root = id;
    }

    pub fn root_belief(&self) -> &Belief {
        &self.vnodes[self.root.0].belief
    }

    /// Root (lower, upper) bound interval.
    pub fn root_bounds(&self) -> (f64, f64) {
        let r = &self.vnodes[self.root.0];
        (r.lower, r.upper)
    }

    pub fn vnode_count(&self) -> usize {
        self.vnodes.len()
    }

    pub fn qnode_count(&self) -> usize {
        self.qnodes.len()
    }

    pub fn is_leaf(&self, v: VNodeId) -> bool {
        self.vnodes[v.0].children.is_empty()
    }

    pub fn leaf_ids(&self) -> Vec<VNodeId> {
        (0..self.vnodes.len())
            .map(VNodeId)
            .filter(|&v| self.is_leaf(v))
            .collect()
    }

    pub fn vnode_view(&self, v: VNodeId) -> VNodeView {
        let n = &self.vnodes[v.0];
        VNodeView {
            lower: n.lower,
            upper: n.upper,
            heuristic: n.heuristic,
            weight: n.weight,
            observation: n.observation,
            num_children: n.children.len(),
        }
    }

    /// The most promising leaf to expand: the root's stored target, O(1).
    pub fn find_vnode_to_expand(&self) -> VNodeId {
        self.vnodes[self.root.0].expand_target
    }

    /// Expands a leaf into one Q-node per action and backs the bounds up to
    /// the root.
    pub fn expand_vnode(&mut self, v: VNodeId) -> Result<(), QvtsError> {
        if !self.vnodes[v.0].children.is_empty() {
            return Err(QvtsError::AlreadyExpanded);
        }
        let mut qids = Vec::with_capacity(self.model.num_actions());
        for a in 0..self.model.num_actions() {
            qids.push(self.construct_qnode(v, a));
        }
        self.vnodes[v.0].children = qids;
        self.update_vnode(v);
        let mut up = self.vnodes[v.0].parent;
        while let Some(q) = up {
            self.update_qnode(q);
            let pv = self.qnodes[q.0].parent;
            self.update_vnode(pv);
            up = self.vnodes[pv.0].parent;
        }
        Ok(())
    }

    /// Builds the Q-node for (parent belief, action): samples or enumerates
    /// observation branches, constructs the child leaves in parallel, and
    /// runs the Q backup.
    fn construct_qnode(&mut self, parent: VNodeId, action: usize) -> QNodeId {
        let belief = self.vnodes[parent.0].belief.clone();
        let branches: Vec<(usize, f64)> = match self.cfg.expansion_mode {
            ExpansionMode::Sample => {
                let n = self.cfg.samples_per_qnode;
                let samples = forward_sampling(&self.model, &belief, action, n, &mut self.rng);
                let mut counts = vec![0usize; self.model.num_observations()];
                for z in samples {
                    counts[z] += 1;
                }
                counts
                    .into_iter()
                    .enumerate()
                    .filter(|&(_, c)| c > 0)
                    .map(|(z, c)| (z, c as f64 / n as f64))
                    .collect()
            }
            ExpansionMode::ExactEnumeration => (0..self.model.num_observations())
                .filter_map(|z| {
                    let w = self.model.obs_marginal(&belief, action, z);
                    (w > ZERO_LIKELIHOOD).then_some((z, w))
                })
                .collect(),
        };
        debug_assert!(!branches.is_empty());

        struct BuiltChild {
            observation: usize,
            weight: f64,
            belief: Belief,
            upper: f64,
            lower: f64,
        }
        let model = &self.model;
        let upper_set = &self.upper_bound;
        let lower_set = &self.lower_bound;
        let built: Vec<BuiltChild> = branches
            .par_iter()
            .filter_map(|&(z, w)| {
                let post = model.belief_update(&belief, action, z).ok()?;
                let upper = alpha_value(&post, upper_set).0;
                let lower = alpha_value(&post, lower_set).0;
                Some(BuiltChild {
                    observation: z,
                    weight: w,
                    belief: post,
                    upper,
                    lower,
                })
            })
            .collect();
        debug_assert_eq!(built.len(), branches.len());

        let qid = QNodeId(self.qnodes.len());
        let immediate_reward = self.model.belief_reward(&belief, action);
        let mut children = Vec::with_capacity(built.len());
        for c in built {
            let vid = VNodeId(self.vnodes.len());
            self.vnodes.push(VNode {
                belief: Arc::new(c.belief),
                observation: Some(c.observation),
                weight: c.weight,
                parent: Some(qid),
                children: Vec::new(),
                upper: c.upper,
                lower: c.lower,
                heuristic: c.upper - c.lower,
                expand_target: vid,
            });
            children.push(vid);
        }
        self.qnodes.push(QNode {
            belief,
            action,
            parent,
            children,
            upper: 0.0,
            lower: 0.0,
            heuristic: 0.0,
            expand_target: VNodeId(0),
            immediate_reward,
        });
        self.update_qnode(qid);
        qid
    }

    /// Q backup: discounted weighted sums of the child bounds; the heuristic
    /// follows the child maximizing weight x gap. Ties go to the lowest
    /// child index.
    fn update_qnode(&mut self, q: QNodeId) {
        let gamma = self.model.discount();
        let node = &self.qnodes[q.0];
        debug_assert!(!node.children.is_empty());
        let mut upper = 0.0;
        let mut lower = 0.0;
        let mut best_mass = f64::NEG_INFINITY;
        let mut best_child = node.children[0];
        for &c in &node.children {
            let ch = &self.vnodes[c.0];
            upper += ch.weight * ch.upper;
            lower += ch.weight * ch.lower;
            let mass = ch.weight * ch.heuristic;
            if mass > best_mass {
                best_mass = mass;
                best_child = c;
            }
        }
        let r = node.immediate_reward;
        let target = self.vnodes[best_child.0].expand_target;
        let node = &mut self.qnodes[q.0];
        node.upper = r + gamma * upper;
        node.lower = r + gamma * lower;
        node.heuristic = gamma * best_mass;
        node.expand_target = target;
    }

    /// V backup: max over child Q bounds; the heuristic and expansion target
    /// follow the child with the maximal upper bound. Ties go to the lowest
    /// action index.
    fn update_vnode(&mut self, v: VNodeId) {
        let node = &self.vnodes[v.0];
        debug_assert_eq!(node.children.len(), self.model.num_actions());
        let mut upper = f64::NEG_INFINITY;
        let mut lower = f64::NEG_INFINITY;
        let mut selected = node.children[0];
        for &q in &node.children {
            let qn = &self.qnodes[q.0];
            if qn.upper > upper {
                upper = qn.upper;
                selected = q;
            }
            if qn.lower > lower {
                lower = qn.lower;
            }
        }
        let sel = &self.qnodes[selected.0];
        let heuristic = sel.heuristic;
        let target = sel.expand_target;
        let node = &mut self.vnodes[v.0];
        node.upper = upper;
        node.lower = lower;
        node.heuristic = heuristic;
        node.expand_target = target;
    }

    /// Anytime planning loop: expand the most promising leaf until the root
    /// gap closes, the node cap is reached, or the time budget runs out.
    /// Returns the action chosen by the configured rule.
    pub fn plan(&mut self) -> usize {
        let start = Instant::now();
        loop {
            let (lower, upper) = self.root_bounds();
            if upper - lower < self.cfg.gap_tolerance {
                break;
            }
            if self.vnodes.len() >= self.cfg.node_cap {
                break;
            }
            if self.cfg.time_budget_ms > 0
                && start.elapsed().as_millis() as u64 >= self.cfg.time_budget_ms
            {
                break;
            }
            let v = self.find_vnode_to_expand();
            self.expand_vnode(v).expect("expansion target is a leaf");
        }
        self.best_action()
    }

    /// Action selection at the root. With no expansions yet, falls back to
    /// the argmax vector of the corresponding offline bound.
    pub fn best_action(&self) -> usize {
        let root = &self.vnodes[self.root.0];
        if root.children.is_empty() {
            return match self.cfg.action_rule {
                ActionRule::MaxLower => alpha_value(&root.belief, &self.lower_bound).1,
                ActionRule::MaxUpper => alpha_value(&root.belief, &self.upper_bound).1,
            };
        }
        let mut best_key = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut best_action = 0;
        for &q in &root.children {
            let qn = &self.qnodes[q.0];
            let key = match self.cfg.action_rule {
                ActionRule::MaxLower => (qn.lower, qn.upper),
                ActionRule::MaxUpper => (qn.upper, qn.lower),
            };
            if key > best_key {
                best_key = key;
                best_action = qn.action;
            }
        }
        best_action
    }

    /// Moves the root to the child consistent with the executed action and
    /// received observation, reusing the sampled subtree when that branch
    /// exists and otherwise rebuilding a fresh leaf from the Bayes update.
    pub fn advance_root(&mut self, a: usize, z: usize) -> Result<(), ZeroLikelihoodObservation> {
        let root = self.root;
        let reuse = if self.vnodes[root.0].children.is_empty() {
            None
        } else {
            let q = self.vnodes[root.0].children[a];
            self.qnodes[q.0]
                .children
                .iter()
                .copied()
                .find(|&c| self.vnodes[c.0].observation == Some(z))
        };
        match reuse {
            Some(new_root) => {
                self.adopt_subtree(new_root);
                Ok(())
            }
            None => {
                let belief = self.vnodes[root.0].belief.clone();
                let posterior = self.model.belief_update(&belief, a, z)?;
                self.vnodes.clear();
                self.qnodes.clear();
                self.push_root_leaf(Arc::new(posterior));
                Ok(())
            }
        }
    }

    /// Copies the subtree under `new_root` into fresh arenas and discards the
    /// rest of the tree.
    fn adopt_subtree(&mut self, new_root: VNodeId) {
        let mut vmap = vec![usize::MAX; self.vnodes.len()];
        let mut qmap = vec![usize::MAX; self.qnodes.len()];
        let mut vnodes: Vec<VNode> = Vec::new();
        let mut qnodes: Vec<QNode> = Vec::new();
        let mut stack = vec![new_root];
        // First pass: copy nodes in DFS order, rewriting parent/child links.
        while let Some(v) = stack.pop() {
            let mut node = self.vnodes[v.0].clone();
            let new_id = vnodes.len();
            vmap[v.0] = new_id;
            let old_children = std::mem::take(&mut node.children);
            for q in old_children {
                let mut qn = self.qnodes[q.0].clone();
                let qid = qnodes.len();
                qmap[q.0] = qid;
                qn.parent = VNodeId(new_id);
                node.children.push(QNodeId(qid));
                for &c in &qn.children {
                    stack.push(c);
                }
                qnodes.push(qn);
            }
            vnodes.push(node);
        }
        // Second pass: remap child lists and expansion targets.
        for qn in &mut qnodes {
            for c in &mut qn.children {
                *c = VNodeId(vmap[c.0]);
            }
            qn.expand_target = VNodeId(vmap[qn.expand_target.0]);
        }
        for vn in &mut vnodes {
            vn.expand_target = VNodeId(vmap[vn.expand_target.0]);
            if let Some(p) = vn.parent {
                if qmap[p.0] != usize::MAX {
                    vn.parent = Some(QNodeId(qmap[p.0]));
                }
            }
        }
        let root_id = VNodeId(vmap[new_root.0]);
        let root = &mut vnodes[root_id.0];
        root.parent = None;
        root.observation = None;
        root.weight = 1.0;
        self.vnodes = vnodes;
        self.qnodes = qnodes;
        self.root = root_id;
    }

    /// Recomputes every node bottom-up on a clone using the same backup code
    /// and checks the stored values match bit-for-bit, that bound intervals
    /// are ordered, that sibling weights are normalized, and that the stored
    /// expansion target agrees with explicit argmax descent from the root.
    pub fn verify_backup_consistency(&self) -> Result<(), String> {
        let mut copy = self.clone();
        let mut stack = vec![(copy.root, false)];
        let mut order: Vec<VNodeId> = Vec::new();
        while let Some((v, processed)) = stack.pop() {
            if processed {
                order.push(v);
                continue;
            }
            stack.push((v, true));
            for q in copy.vnodes[v.0].children.clone() {
                for c in copy.qnodes[q.0].children.clone() {
                    stack.push((c, false));
                }
            }
        }
        for v in order {
            if copy.vnodes[v.0].children.is_empty() {
                let belief = copy.vnodes[v.0].belief.clone();
                let upper = alpha_value(&belief, &copy.upper_bound).0;
                let lower = alpha_value(&belief, &copy.lower_bound).0;
                let node = &mut copy.vnodes[v.0];
                node.upper = upper;
                node.lower = lower;
                node.heuristic = upper - lower;
                node.expand_target = v;
            } else {
                for q in copy.vnodes[v.0].children.clone() {
                    let b = copy.qnodes[q.0].belief.clone();
                    let a = copy.qnodes[q.0].action;
                    copy.qnodes[q.0].immediate_reward = copy.model.belief_reward(&b, a);
                    copy.update_qnode(q);
                }
                copy.update_vnode(v);
            }
        }

        let bits = f64::to_bits;
        for (i, (orig, fresh)) in self.vnodes.iter().zip(&copy.vnodes).enumerate() {
            if bits(orig.upper) != bits(fresh.upper)
                || bits(orig.lower) != bits(fresh.lower)
                || bits(orig.heuristic) != bits(fresh.heuristic)
                || orig.expand_target != fresh.expand_target
            {
                return Err(format!(
                    "V-node {i} differs from recomputation: stored ({}, {}, {}) vs ({}, {}, {})",
                    orig.lower,
                    orig.upper,
                    orig.heuristic,
                    fresh.lower,
                    fresh.upper,
                    fresh.heuristic
                ));
            }
            if orig.lower > orig.upper + 1e-9 {
                return Err(format!("V-node {i} interval inverted"));
            }
            if !orig.children.is_empty() && orig.children.len() != self.model.num_actions() {
                return Err(format!("interior V-node {i} missing actions"));
            }
            if orig.children.is_empty() && orig.expand_target != VNodeId(i) {
                return Err(format!("leaf {i} expansion target is not itself"));
            }
        }
        for (i, (orig, fresh)) in self.qnodes.iter().zip(&copy.qnodes).enumerate() {
            if bits(orig.upper) != bits(fresh.upper)
                || bits(orig.lower) != bits(fresh.lower)
                || bits(orig.heuristic) != bits(fresh.heuristic)
                || bits(orig.immediate_reward) != bits(fresh.immediate_reward)
                || orig.expand_target != fresh.expand_target
            {
                return Err(format!("Q-node {i} differs from recomputation"));
            }
            if orig.lower > orig.upper + 1e-9 {
                return Err(format!("Q-node {i} interval inverted"));
            }
            let wsum: f64 = orig
                .children
                .iter()
                .map(|&c| self.vnodes[c.0].weight)
                .sum();
            if (wsum - 1.0).abs() > 1e-9 {
                return Err(format!("Q-node {i} sibling weights sum to {wsum}"));
            }
            let mut seen = std::collections::BTreeSet::new();
            for &c in &orig.children {
                if !seen.insert(self.vnodes[c.0].observation) {
                    return Err(format!("Q-node {i} has duplicate observation children"));
                }
            }
        }

        // Explicit argmax descent must land on the stored root target.
        let mut v = self.root;
        while !self.vnodes[v.0].children.is_empty() {
            let mut best_u = f64::NEG_INFINITY;
            let mut sel = self.vnodes[v.0].children[0];
            for &q in &self.vnodes[v.0].children {
                if self.qnodes[q.0].upper > best_u {
                    best_u = self.qnodes[q.0].upper;
                    sel = q;
                }
            }
            let qn = &self.qnodes[sel.0];
            let mut best_m = f64::NEG_INFINITY;
            let mut child = qn.children[0];
            for &c in &qn.children {
                let m = self.vnodes[c.0].weight * self.vnodes[c.0].heuristic;
                if m > best_m {
                    best_m = m;
                    child = c;
                }
            }
            v = child;
        }
        if v != self.vnodes[self.root.0].expand_target {
            return Err(format!(
                "descent reaches {:?} but root stores {:?}",
                v,
                self.vnodes[self.root.0].expand_target
            ));
        }
        Ok(())
    }
}

/// Draws n independent (state, successor, observation) pipelines from the
/// model and returns the observed measurement indices.
pub fn forward_sampling(
    model: &PomdpModel,
    b: &Belief,
    a: usize,
    n: usize,
    rng: &mut impl RngCore,
) -> Vec<usize> {
    assert!(n >= 1);
    // Belief CDF once; each draw then costs a binary search plus two short
    // scans.
    let mut cdf = Vec::with_capacity(b.len());
    let mut acc = 0.0;
    for &p in b.probs() {
        acc += p;
        cdf.push(acc);
    }
    let mut out = Vec::with_capacity(n);
    let mut rng = rng;
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut x = cdf.partition_point(|&c| c <= u);
        if x >= b.len() {
            x = b.len() - 1;
        }
        let y = sample_sparse(model.transition_row(x, a), rng.gen());
        let z = sample_categorical(model.observation_row(y), rng.gen());
        out.push(z);
    }
    out
}

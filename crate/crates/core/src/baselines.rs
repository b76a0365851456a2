//! Comparison searchers: uniform single-path sampling (SPOS), Boltzmann
//! softmax exploration (BSE) and Monte-Carlo tree search with UCB over the
//! resolution tree.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::search_space::{positions_to_config, Catalog};

/// Uniform draw over `num_configs` configurations.
///
/// Uses the same `index()` draw as the mixture controller's configuration
/// stream, so with one model the two produce the same sequence.
pub fn spos_sample(num_configs: usize, rng: &mut Stream) -> usize {
    rng.index(num_configs)
}

/// Softmax of `inv_temp * rewards`, max-stabilised.
pub fn softmax_scaled(rewards: &[f64], inv_temp: f64) -> Vec<f64> {
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = rewards
        .iter()
        .map(|&r| (inv_temp * (r - max)).exp())
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

/// Boltzmann exploration state: a reward per configuration and an inverse
/// temperature that rises linearly over the run.
#[derive(Debug, Clone, PartialEq)]
pub struct BseState {
    rewards: Vec<f64>,
    inv_temp: f64,
    inv_temp_start: f64,
    inv_temp_max: f64,
    beta: f64,
    step: u64,
    total_steps: u64,
}

impl BseState {
    pub fn new(
        num_configs: usize,
        inv_temp_start: f64,
        inv_temp_max: f64,
        beta: f64,
        init_reward: f64,
        total_steps: u64,
    ) -> Result<Self> {
        if num_configs == 0 {
            return Err(Error::InvalidParameter("no configurations".into()));
        }
        if !(inv_temp_start >= 0.0 && inv_temp_max >= inv_temp_start && inv_temp_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "inverse temperature must rise from a non-negative start, got {inv_temp_start} -> {inv_temp_max}"
            )));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidParameter(format!(
                "beta {beta} outside [0, 1]"
            )));
        }
        Ok(Self {
            rewards: vec![init_reward; num_configs],
            inv_temp: inv_temp_start,
            inv_temp_start,
            inv_temp_max,
            beta,
            step: 0,
            total_steps,
        })
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn inv_temp(&self) -> f64 {
        self.inv_temp
    }

    pub fn set_rewards(&mut self, rewards: Vec<f64>) {
        assert_eq!(rewards.len(), self.rewards.len());
        self.rewards = rewards;
    }

    pub fn set_inv_temp(&mut self, inv_temp: f64) {
        self.inv_temp = inv_temp;
    }

    /// `p(c) = softmax(inv_temp * a_c)`.
    pub fn probs(&self) -> Vec<f64> {
        softmax_scaled(&self.rewards, self.inv_temp)
    }

    pub fn sample(&self, rng: &mut Stream) -> usize {
        rng.categorical(&self.probs())
    }

    /// Folds an observed accuracy into configuration `config`'s reward and
    /// advances the inverse-temperature schedule by one step.
    pub fn observe(&mut self, config: usize, acc: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::AccuracyRange(acc));
        }
        let r = &mut self.rewards[config];
        *r = self.beta * *r + (1.0 - self.beta) * acc;
        self.step += 1;
        let frac = if self.total_steps == 0 {
            1.0
        } else {
            (self.step as f64 / self.total_steps as f64).min(1.0)
        };
        self.inv_temp = self.inv_temp_start + (self.inv_temp_max - self.inv_temp_start) * frac;
        Ok(())
    }
}

/// `mean reward + c sqrt(ln(parent visits) / visits)`; unvisited nodes score
/// `+inf` so every child is tried once before exploitation starts.
pub fn ucb_score(
    cumulative_reward: f64,
    visits: u64,
    parent_visits: u64,
    explore_c: f64,
) -> Result<f64> {
    if visits == 0 {
        return Ok(f64::INFINITY);
    }
    if parent_visits == 0 {
        return Err(Error::InvalidParameter(
            "parent of a visited node has zero visits".into(),
        ));
    }
    if explore_c.is_nan() || explore_c < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "exploration constant must be non-negative, got {explore_c}"
        )));
    }
    let n = visits as f64;
    Ok(cumulative_reward / n + explore_c * ((parent_visits as f64).ln() / n).sqrt())
}

const SAME: usize = 0;
const DOWN: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    /// Block index this node assigns a resolution to.
    pub layer: u32,
    pub stage: u32,
    pub resolution: u32,
    pub cumulative_reward: f64,
    pub visits: u64,
    /// `[same resolution, downsample]`, as arena indices.
    pub children: [Option<usize>; 2],
    /// Configuration id, for leaves.
    pub config: Option<usize>,
    leaves_below: u64,
}

impl TreeNode {
    pub fn mean_reward(&self) -> f64 {
        if self.visits == 0 {
            0.0
        } else {
            self.cumulative_reward / self.visits as f64
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.iter().all(Option::is_none)
    }
}

/// Root-to-leaf path chosen by one selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreePath {
    pub nodes: Vec<usize>,
    pub config: usize,
}

/// Binary tree over per-block resolution choices.
///
/// Each level is one block; a node has at most two children, "stay at this
/// resolution" and "downsample". Children are only created when the leaf
/// constraint (all poolings placed by the last block, none before the fixed
/// prefix) stays satisfiable, so leaves correspond one-to-one with
/// configurations: 36 leaves for 10 blocks and 2 poolings.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionTree {
    nodes: Vec<TreeNode>,
    num_leaves: usize,
}

impl ResolutionTree {
    pub fn build(catalog: &Catalog) -> Result<Self> {
        let space = catalog.space();
        let mut tree = Self {
            nodes: Vec::new(),
            num_leaves: 0,
        };
        let mut positions = Vec::with_capacity(space.num_poolings() as usize);
        tree.grow(catalog, 0, 0, &mut positions)?;
        if tree.num_leaves != catalog.len() {
            return Err(Error::MalformedTree(format!(
                "{} leaves for {} configurations",
                tree.num_leaves,
                catalog.len()
            )));
        }
        Ok(tree)
    }

    fn grow(
        &mut self,
        catalog: &Catalog,
        layer: u32,
        stage: u32,
        positions: &mut Vec<u32>,
    ) -> Result<usize> {
        let space = catalog.space();
        let last = space.total_blocks() - 1;
        let p = space.num_poolings();
        let idx = self.nodes.len();
        self.nodes.push(TreeNode {
            layer,
            stage,
            resolution: space.resolutions()[stage as usize],
            cumulative_reward: 0.0,
            visits: 0,
            children: [None, None],
            config: None,
            leaves_below: 0,
        });
        if layer == last {
            let config = positions_to_config(positions, space.total_blocks())
                .ok()
                .and_then(|c| catalog.id_of(&c))
                .ok_or_else(|| {
                    Error::MalformedTree(format!("leaf with positions {positions:?}"))
                })?;
            self.nodes[idx].config = Some(config);
            self.nodes[idx].leaves_below = 1;
            self.num_leaves += 1;
            return Ok(idx);
        }
        let next = layer + 1;
        let blocks_after = last - next;
        let mut leaves = 0;
        if blocks_after >= p - stage {
            let child = self.grow(catalog, next, stage, positions)?;
            self.nodes[idx].children[SAME] = Some(child);
            leaves += self.nodes[child].leaves_below;
        }
        if stage < p && next >= space.fixed_prefix() && blocks_after >= p - stage - 1 {
            positions.push(next);
            let child = self.grow(catalog, next, stage + 1, positions)?;
            positions.pop();
            self.nodes[idx].children[DOWN] = Some(child);
            leaves += self.nodes[child].leaves_below;
        }
        self.nodes[idx].leaves_below = leaves;
        Ok(idx)
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, idx: usize) -> &TreeNode {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn num_leaves(&self) -> usize {
        self.num_leaves
    }

    /// Walks from the root to a leaf. During warm-up each child is chosen
    /// with probability proportional to the leaves below it, which makes
    /// the leaf uniform over configurations. Otherwise the child with the
    /// highest UCB score wins, ties going to the downsample child.
    pub fn select_path(&self, explore_c: f64, warmup: bool, rng: &mut Stream) -> Result<TreePath> {
        let mut nodes = vec![0];
        let mut cur = 0;
        loop {
            let node = &self.nodes[cur];
            let kids: Vec<usize> = node.children.iter().flatten().copied().collect();
            if kids.is_empty() {
                let config = node.config.ok_or_else(|| {
                    Error::MalformedTree(format!(
                        "dead end at layer {} stage {}",
                        node.layer, node.stage
                    ))
                })?;
                return Ok(TreePath { nodes, config });
            }
            cur = if warmup {
                let weights: Vec<f64> = kids
                    .iter()
                    .map(|&k| self.nodes[k].leaves_below as f64)
                    .collect();
                kids[rng.categorical(&weights)]
            } else {
                let mut best: Option<(usize, f64)> = None;
                // iterate downsample child first so it wins ties
                for slot in [DOWN, SAME] {
                    if let Some(k) = node.children[slot] {
                        let child = &self.nodes[k];
                        let s = ucb_score(
                            child.cumulative_reward,
                            child.visits,
                            node.visits,
                            explore_c,
                        )?;
                        if best.is_none_or(|(_, b)| s > b) {
                            best = Some((k, s));
                        }
                    }
                }
                best.expect("non-empty children").0
            };
            nodes.push(cur);
        }
    }

    /// Adds `reward` and one visit to every node on `path`, root included.
    pub fn backpropagate(&mut self, path: &TreePath, reward: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&reward) {
            return Err(Error::AccuracyRange(reward));
        }
        for &n in &path.nodes {
            let node = &mut self.nodes[n];
            node.cumulative_reward += reward;
            node.visits += 1;
        }
        Ok(())
    }

    /// Every root-to-leaf path, depth-first with the same-resolution child first.
    pub fn all_paths(&self) -> Vec<TreePath> {
        let mut out = Vec::with_capacity(self.num_leaves);
        let mut stack = vec![0usize];
        self.collect(0, &mut stack, &mut out);
        out
    }

    fn collect(&self, idx: usize, stack: &mut Vec<usize>, out: &mut Vec<TreePath>) {
        let node = &self.nodes[idx];
        if let Some(config) = node.config {
            out.push(TreePath {
                nodes: stack.clone(),
                config,
            });
            return;
        }
        for k in node.children.iter().flatten() {
            stack.push(*k);
            self.collect(*k, stack, out);
            stack.pop();
        }
    }

    /// Leaves as `(config, visits, mean reward)`, most visited first, ties by
    /// higher mean reward, then configuration id.
    pub fn leaf_ranking(&self) -> Vec<(usize, u64, f64)> {
        let mut leaves: Vec<(usize, u64, f64)> = self
            .nodes
            .iter()
            .filter_map(|n| n.config.map(|c| (c, n.visits, n.mean_reward())))
            .collect();
        leaves.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then(b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal))
                .then(a.0.cmp(&b.0))
        });
        leaves
    }
}

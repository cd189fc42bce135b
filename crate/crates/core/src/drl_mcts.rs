//! Tree search guided by the trained agent.
//!
//! Selection uses PUCT, `Ū + c·P·√Z/(1+z)`. Expanding a non-terminal leaf
//! costs one actor evaluation (whose output becomes the children's priors)
//! and one state-value evaluation, whose output replaces the random rollout
//! and is backed up the path. Terminal leaves back up their exact scaled
//! `-d(x_1^m)`. The committed action is the most selected root child.

use rand_distr::{Distribution, Gamma};

use crate::agent::{build_state_from_parts, SearchNetworks};
use crate::error::{Error, Result};
use crate::mcts::{decayed_playouts, validate_beta};
use crate::signal::{stream_rng, RealSystem};

const NO_CHILDREN: u32 = u32::MAX;

/// Dirichlet noise mixed into the root priors at expansion. Not part of the
/// default detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootNoise {
    pub alpha: f64,
    pub fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrlMctsConfig {
    pub c_puct: f64,
    pub playouts_initial: usize,
    pub beta_p: f64,
    /// Must equal the scale the networks were trained with.
    pub reward_scale: f64,
    pub root_noise: Option<RootNoise>,
}

impl DrlMctsConfig {
    pub fn new(c_puct: f64, playouts_initial: usize, reward_scale: f64) -> Self {
        Self { c_puct, playouts_initial, beta_p: 0.95, reward_scale, root_noise: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_puct >= 0.0) || !self.c_puct.is_finite() {
            return Err(Error::InvalidParameter(format!("c_puct {}", self.c_puct)));
        }
        if self.playouts_initial == 0 {
            return Err(Error::InvalidParameter("playouts_initial must be >= 1".into()));
        }
        if !(self.reward_scale > 0.0) {
            return Err(Error::InvalidParameter("reward_scale must be positive".into()));
        }
        if let Some(noise) = self.root_noise {
            if !(noise.alpha > 0.0) || !(0.0..=1.0).contains(&noise.fraction) {
                return Err(Error::InvalidParameter("root noise alpha/fraction".into()));
            }
        }
        validate_beta(self.beta_p)
    }

    pub fn playouts_at(&self, step: usize) -> usize {
        decayed_playouts(self.playouts_initial, self.beta_p, step)
    }
}

#[derive(Debug, Clone)]
pub struct DrlNode {
    /// PAM index of the symbol this node fixes; `None` for the initial root.
    pub symbol: Option<usize>,
    pub u_bar: f64,
    pub prior: f64,
    pub select_count: u32,
    pub cum_metric: f64,
    /// Branch metric of this node's own symbol.
    pub branch_metric: f64,
    /// `p̂` evaluated at this node when it was expanded.
    pub cached_policy: Option<Box<[f64]>>,
    first_child: u32,
}

impl DrlNode {
    fn new(symbol: Option<usize>, prior: f64, cum_metric: f64, branch_metric: f64) -> Self {
        Self {
            symbol,
            u_bar: 0.0,
            prior,
            select_count: 0,
            cum_metric,
            branch_metric,
            cached_policy: None,
            first_child: NO_CHILDREN,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.first_child == NO_CHILDREN
    }
}

/// PUCT choice among `children` of a parent selected `parent_count` times;
/// ties go to the lowest index.
pub fn select_puct(children: &[DrlNode], parent_count: u32, c_puct: f64) -> usize {
    let sqrt_z = (parent_count as f64).sqrt();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in children.iter().enumerate() {
        let score = c.u_bar + c_puct * c.prior * sqrt_z / (1.0 + c.select_count as f64);
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// Counts of network evaluations made by a tree.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    pub policy: usize,
    pub state_value: usize,
}

pub struct DrlTree<'a, N: SearchNetworks + ?Sized> {
    sys: &'a RealSystem,
    nets: &'a N,
    cfg: DrlMctsConfig,
    nodes: Vec<DrlNode>,
    root_x: Vec<f64>,
    root_depth: usize,
    evals: EvalCounts,
    scratch_x: Vec<f64>,
    scratch_path: Vec<usize>,
}

impl<'a, N: SearchNetworks + ?Sized> DrlTree<'a, N> {
    pub fn new(sys: &'a RealSystem, nets: &'a N, cfg: DrlMctsConfig) -> Self {
        let m = sys.m();
        Self {
            sys,
            nets,
            cfg,
            nodes: vec![DrlNode::new(None, 1.0, 0.0, 0.0)],
            root_x: vec![0.0; m],
            root_depth: 0,
            evals: EvalCounts::default(),
            scratch_x: vec![0.0; m],
            scratch_path: Vec::with_capacity(m + 1),
        }
    }

    pub fn root(&self) -> &DrlNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> &DrlNode {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn root_depth(&self) -> usize {
        self.root_depth
    }

    pub fn evals(&self) -> EvalCounts {
        self.evals
    }

    pub fn children_ids(&self, id: usize) -> std::ops::Range<usize> {
        let node = &self.nodes[id];
        if node.is_leaf() {
            return 0..0;
        }
        let first = node.first_child as usize;
        first..first + self.sys.constellation().size()
    }

    pub fn children(&self, id: usize) -> &[DrlNode] {
        &self.nodes[self.children_ids(id)]
    }

    /// Selection, network Expansion and Backpropagation once.
    pub fn run_playout(&mut self) -> Result<()> {
        let m = self.sys.m();
        assert!(self.root_depth < m, "playout from a terminal root");
        let levels = self.sys.constellation().pam_levels();
        let q = levels.len();

        let mut x = std::mem::take(&mut self.scratch_x);
        let mut path = std::mem::take(&mut self.scratch_path);
        x.copy_from_slice(&self.root_x);
        path.clear();

        let mut id = 0usize;
        let mut depth = self.root_depth;
        path.push(id);
        while !self.nodes[id].is_leaf() {
            let first = self.nodes[id].first_child as usize;
            let pick =
                select_puct(&self.nodes[first..first + q], self.nodes[id].select_count, self.cfg.c_puct);
            id = first + pick;
            depth += 1;
            x[m - depth] = levels[pick];
            path.push(id);
        }

        let value = if depth == m {
            -self.nodes[id].cum_metric * self.cfg.reward_scale
        } else {
            let leaf = &self.nodes[id];
            let state = build_state_from_parts(self.sys, &x, depth, leaf.branch_metric, leaf.cum_metric);
            let mut policy = self.nets.policy(state.as_slice())?;
            self.evals.policy += 1;
            let u = self.nets.state_value(state.as_slice(), &policy)?;
            self.evals.state_value += 1;
            if policy.len() != q {
                return Err(Error::Shape { expected: q, actual: policy.len() });
            }
            if id == 0 {
                if let Some(noise) = self.cfg.root_noise {
                    mix_dirichlet(&mut policy, noise, self.root_depth);
                }
            }

            let k = m - 1 - depth;
            let base = self.nodes[id].cum_metric;
            let first = self.nodes.len();
            for (a, &level) in levels.iter().enumerate() {
                let b = self.sys.branch_metric_at(&x, k, level);
                self.nodes.push(DrlNode::new(Some(a), policy[a], base + b, b));
            }
            let leaf = &mut self.nodes[id];
            leaf.first_child = first as u32;
            leaf.cached_policy = Some(policy.into_boxed_slice());
            u
        };

        for &node_id in &path {
            let node = &mut self.nodes[node_id];
            node.select_count += 1;
            node.u_bar += (value - node.u_bar) / node.select_count as f64;
        }
        self.scratch_x = x;
        self.scratch_path = path;
        Ok(())
    }

    /// Most selected root child; ties by larger `Ū`, then larger prior, then
    /// lowest index. `None` before the root has been expanded.
    pub fn best_child(&self) -> Option<usize> {
        let children = self.children(0);
        if children.is_empty() {
            return None;
        }
        let mut best = 0;
        for (i, c) in children.iter().enumerate().skip(1) {
            let b = &children[best];
            let better = (c.select_count, c.u_bar, c.prior) > (b.select_count, b.u_bar, b.prior);
            if better {
                best = i;
            }
        }
        Some(best)
    }

    /// Commits root child `action` and keeps only its subtree.
    pub fn advance(&mut self, action: usize) {
        let m = self.sys.m();
        let child = self.children_ids(0).nth(action).expect("advance on an unexpanded root");
        self.root_depth += 1;
        self.root_x[m - self.root_depth] = self.sys.constellation().pam_levels()[action];

        let q = self.sys.constellation().size();
        let mut kept = Vec::with_capacity(self.nodes.len());
        let mut root = self.nodes[child].clone();
        let old_first = root.first_child;
        root.first_child = NO_CHILDREN;
        kept.push(root);
        let mut queue = std::collections::VecDeque::new();
        if old_first != NO_CHILDREN {
            queue.push_back((old_first as usize, 0usize));
        }
        while let Some((old_first, new_parent)) = queue.pop_front() {
            let new_first = kept.len();
            kept[new_parent].first_child = new_first as u32;
            for offset in 0..q {
                let mut node = self.nodes[old_first + offset].clone();
                let grand = node.first_child;
                node.first_child = NO_CHILDREN;
                kept.push(node);
                if grand != NO_CHILDREN {
                    queue.push_back((grand as usize, new_first + offset));
                }
            }
        }
        self.nodes = kept;
    }

    pub fn recovered(&self) -> &[f64] {
        &self.root_x
    }
}

fn mix_dirichlet(policy: &mut [f64], noise: RootNoise, step: usize) {
    let mut rng = stream_rng(noise.seed, step as u64);
    let gamma = Gamma::new(noise.alpha, 1.0).expect("validated alpha");
    let draws: Vec<f64> = policy.iter().map(|_| gamma.sample(&mut rng).max(f64::MIN_POSITIVE)).collect();
    let total: f64 = draws.iter().sum();
    for (p, d) in policy.iter_mut().zip(draws) {
        *p = (1.0 - noise.fraction) * *p + noise.fraction * d / total;
    }
}

/// Full detection; also returns how many network evaluations it needed.
pub fn detect_drl_mcts_with_stats<N: SearchNetworks + ?Sized>(
    sys: &RealSystem,
    nets: &N,
    cfg: &DrlMctsConfig,
) -> Result<(Vec<f64>, EvalCounts)> {
    cfg.validate()?;
    let mut tree = DrlTree::new(sys, nets, *cfg);
    for step in 0..sys.m() {
        for _ in 0..cfg.playouts_at(step) {
            tree.run_playout()?;
        }
        let action = tree.best_child().expect("root expanded by the first playout");
        tree.advance(action);
    }
    Ok((tree.root_x.clone(), tree.evals))
}

pub fn detect_drl_mcts<N: SearchNetworks + ?Sized>(
    sys: &RealSystem,
    nets: &N,
    cfg: &DrlMctsConfig,
) -> Result<Vec<f64>> {
    detect_drl_mcts_with_stats(sys, nets, cfg).map(|(x, _)| x)
}

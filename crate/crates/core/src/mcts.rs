//! Plain Monte Carlo tree search over the metric tree.
//!
//! Every detection step grows a tree rooted at the current partial vector.
//! A playout selects down the tree by UCT, expands the reached leaf with all
//! `|Q|` children, completes one of them with random symbols and feeds the
//! resulting `-d(x_1^m)` back up the path. After the step's playouts the root
//! child with the largest mean value is committed and becomes the next root,
//! keeping its subtree statistics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal::{stream_rng, RealSystem};

const NO_CHILDREN: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MctsConfig {
    pub c_uct: f64,
    pub playouts_initial: usize,
    pub beta_p: f64,
    pub rng_seed: u64,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self { c_uct: 350.0, playouts_initial: 200, beta_p: 0.95, rng_seed: 0 }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_uct >= 0.0) || !self.c_uct.is_finite() {
            return Err(Error::InvalidParameter(format!("c_uct {}", self.c_uct)));
        }
        if self.playouts_initial == 0 {
            return Err(Error::InvalidParameter("playouts_initial must be >= 1".into()));
        }
        validate_beta(self.beta_p)
    }

    pub fn playouts_at(&self, step: usize) -> usize {
        decayed_playouts(self.playouts_initial, self.beta_p, step)
    }
}

pub(crate) fn validate_beta(beta_p: f64) -> Result<()> {
    if beta_p > 0.0 && beta_p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("beta_p {beta_p} outside (0, 1)")))
    }
}

/// `⌊initial · β^step⌋`, at least one.
pub fn decayed_playouts(initial: usize, beta_p: f64, step: usize) -> usize {
    // The small offset keeps products like 20 · 0.95 from flooring to 18.
    let raw = initial as f64 * beta_p.powi(step as i32) + 1e-9;
    (raw.floor() as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct MctsNode {
    /// PAM index of the symbol this node fixes; `None` for the initial root.
    pub symbol: Option<usize>,
    pub d_bar: f64,
    pub visits: u32,
    pub cum_metric: f64,
    first_child: u32,
}

impl MctsNode {
    fn new(symbol: Option<usize>, cum_metric: f64) -> Self {
        Self { symbol, d_bar: 0.0, visits: 0, cum_metric, first_child: NO_CHILDREN }
    }

    pub fn is_leaf(&self) -> bool {
        self.first_child == NO_CHILDREN
    }
}

/// UCT choice among `children` of a parent selected `parent_visits` times.
///
/// Unvisited children come first (lowest index); otherwise the argmax of
/// `D̄ + c·√(ln V / v)`, ties to the lowest index.
pub fn select_uct(children: &[MctsNode], parent_visits: u32, c_uct: f64) -> usize {
    if let Some(i) = children.iter().position(|c| c.visits == 0) {
        return i;
    }
    let ln_v = (parent_visits.max(1) as f64).ln();
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in children.iter().enumerate() {
        let score = c.d_bar + c_uct * (ln_v / c.visits as f64).sqrt();
        if score > best_score {
            best = i;
            best_score = score;
        }
    }
    best
}

/// One recorded playout: arena ids along the backed-up path and the value.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayoutRecord {
    pub path: Vec<usize>,
    pub value: f64,
}

/// Search tree for one detection. The root always sits at arena index 0.
pub struct MctsTree<'a> {
    sys: &'a RealSystem,
    c_uct: f64,
    nodes: Vec<MctsNode>,
    /// Symbols fixed by the root, full-length with unset positions zero.
    root_x: Vec<f64>,
    root_depth: usize,
    trace: Option<Vec<PlayoutRecord>>,
    scratch_x: Vec<f64>,
    scratch_path: Vec<usize>,
}

impl<'a> MctsTree<'a> {
    pub fn new(sys: &'a RealSystem, c_uct: f64) -> Self {
        let m = sys.m();
        Self {
            sys,
            c_uct,
            nodes: vec![MctsNode::new(None, 0.0)],
            root_x: vec![0.0; m],
            root_depth: 0,
            trace: None,
            scratch_x: vec![0.0; m],
            scratch_path: Vec::with_capacity(m + 1),
        }
    }

    /// Records every playout from now on (see [`MctsTree::take_trace`]).
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<PlayoutRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn root(&self) -> &MctsNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: usize) -> &MctsNode {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of symbols fixed at the root.
    pub fn root_depth(&self) -> usize {
        self.root_depth
    }

    pub fn is_terminal(&self) -> bool {
        self.root_depth == self.sys.m()
    }

    pub fn children_ids(&self, id: usize) -> std::ops::Range<usize> {
        let node = &self.nodes[id];
        if node.is_leaf() {
            return 0..0;
        }
        let first = node.first_child as usize;
        first..first + self.sys.constellation().size()
    }

    pub fn children(&self, id: usize) -> &[MctsNode] {
        &self.nodes[self.children_ids(id)]
    }

    /// Selection, Expansion, Simulation and Backpropagation once.
    pub fn run_playout(&mut self, rng: &mut ChaCha8Rng) {
        assert!(!self.is_terminal(), "playout from a terminal root");
        let m = self.sys.m();
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
            let pick = select_uct(&self.nodes[first..first + q], self.nodes[id].visits, self.c_uct);
            id = first + pick;
            depth += 1;
            x[m - depth] = levels[pick];
            path.push(id);
        }

        let value = if depth == m {
            -self.nodes[id].cum_metric
        } else {
            // Expansion: all |Q| children, each carrying its cumulative metric.
            let k = m - 1 - depth;
            let first = self.nodes.len();
            let base = self.nodes[id].cum_metric;
            for (a, &level) in levels.iter().enumerate() {
                let d = base + self.sys.branch_metric_at(&x, k, level);
                self.nodes.push(MctsNode::new(Some(a), d));
            }
            self.nodes[id].first_child = first as u32;

            // Simulation: one new child, then uniform random completion.
            let pick = rng.random_range(0..q);
            let child = first + pick;
            x[k] = levels[pick];
            path.push(child);
            let mut d = self.nodes[child].cum_metric;
            for row in (0..k).rev() {
                let level = levels[rng.random_range(0..q)];
                d += self.sys.branch_metric_at(&x, row, level);
                x[row] = level;
            }
            -d
        };

        for &node_id in &path {
            let node = &mut self.nodes[node_id];
            node.visits += 1;
            node.d_bar += (value - node.d_bar) / node.visits as f64;
        }
        if let Some(trace) = self.trace.as_mut() {
            trace.push(PlayoutRecord { path: path.clone(), value });
        }
        self.scratch_x = x;
        self.scratch_path = path;
    }

    /// Root child with the largest `D̄` among visited children (lowest index
    /// on ties); `None` before the root has been expanded.
    pub fn best_child(&self) -> Option<usize> {
        let children = self.children(0);
        let mut best: Option<usize> = None;
        for (i, c) in children.iter().enumerate() {
            if c.visits == 0 {
                continue;
            }
            if best.is_none_or(|b| c.d_bar > children[b].d_bar) {
                best = Some(i);
            }
        }
        best
    }

    /// Commits root child `action` and makes it the root, keeping its
    /// subtree and dropping everything else.
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
        // (old first child id, new id of the parent) pairs to copy, BFS order.
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
}

/// Runs the full `m`-step detection and returns the recovered vector.
pub fn detect_mcts(sys: &RealSystem, cfg: &MctsConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.rng_seed, 0);
    let mut tree = MctsTree::new(sys, cfg.c_uct);
    for step in 0..sys.m() {
        for _ in 0..cfg.playouts_at(step) {
            tree.run_playout(&mut rng);
        }
        let action = tree.best_child().expect("at least one playout per step");
        tree.advance(action);
    }
    Ok(tree.root_x.clone())
}

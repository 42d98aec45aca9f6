//! Metropolis-within-Gibbs chain for the sum-of-trees model.
//!
//! Each iteration sweeps the trees: the tree structure takes one
//! Metropolis-Hastings move (grow / prune / change / swap) scored against the
//! partial residual, leaf values are then drawn from their conjugate normal
//! posteriors, and finally the error variance is drawn from its conjugate
//! inverse-gamma given the full residual. Proposals that would leave a leaf
//! with no training rows are rejected outright, which also keeps every
//! root-to-leaf path free of repeated split variables.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::tree::{BinaryMatrix, Node, Tree};

const P_GROW: f64 = 0.25;
const P_PRUNE: f64 = 0.25;
const P_CHANGE: f64 = 0.40;
// swap gets the remaining 0.10

const NONE: u32 = u32::MAX;
const SIGMA2_FLOOR: f64 = 1e-18;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ChainParams {
    /// Leaf-prior variance sigma_mu^2.
    pub sigma_mu2: f64,
    /// Depth-prior base: a depth-d node is nonterminal with probability
    /// `alpha * (1 + d)^(-beta)`.
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
    pub lambda: f64,
}

impl ChainParams {
    #[inline]
    fn p_split(&self, depth: usize) -> f64 {
        self.alpha * (1.0 + depth as f64).powf(-self.beta)
    }
}

#[derive(Clone)]
struct MNode {
    parent: u32,
    left: u32,
    right: u32,
    var: u32,
    value: f64,
}

impl MNode {
    #[inline]
    fn is_leaf(&self) -> bool {
        self.left == NONE
    }
}

struct TreeState {
    nodes: Vec<MNode>,
    live: Vec<bool>,
    free: Vec<u32>,
    /// row -> leaf node index
    assign: Vec<u32>,
}

impl TreeState {
    fn new(n_rows: usize) -> Self {
        TreeState {
            nodes: vec![MNode { parent: NONE, left: NONE, right: NONE, var: 0, value: 0.0 }],
            live: vec![true],
            free: Vec::new(),
            assign: vec![0; n_rows],
        }
    }

    fn alloc(&mut self, node: MNode) -> u32 {
        if let Some(i) = self.free.pop() {
            self.nodes[i as usize] = node;
            self.live[i as usize] = true;
            i
        } else {
            self.nodes.push(node);
            self.live.push(true);
            (self.nodes.len() - 1) as u32
        }
    }

    fn release(&mut self, i: u32) {
        self.live[i as usize] = false;
        self.free.push(i);
    }

    fn depth(&self, mut at: u32) -> usize {
        let mut d = 0;
        while self.nodes[at as usize].parent != NONE {
            at = self.nodes[at as usize].parent;
            d += 1;
        }
        d
    }

    /// Split variables strictly above `at`.
    fn path_vars(&self, mut at: u32) -> Vec<u32> {
        let mut vars = Vec::new();
        while self.nodes[at as usize].parent != NONE {
            at = self.nodes[at as usize].parent;
            vars.push(self.nodes[at as usize].var);
        }
        vars
    }

    /// Variables not yet split on along the path above `at`.
    fn eligible_vars(&self, at: u32, n_vars: usize) -> Vec<u32> {
        let used = self.path_vars(at);
        (0..n_vars as u32).filter(|v| !used.contains(v)).collect()
    }

    fn live_nodes(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.nodes.len() as u32).filter(|&i| self.live[i as usize])
    }

    fn leaves(&self) -> Vec<u32> {
        self.live_nodes()
            .filter(|&i| self.nodes[i as usize].is_leaf())
            .collect()
    }

    fn is_nog(&self, i: u32) -> bool {
        let n = &self.nodes[i as usize];
        !n.is_leaf()
            && self.nodes[n.left as usize].is_leaf()
            && self.nodes[n.right as usize].is_leaf()
    }

    fn nog_nodes(&self) -> Vec<u32> {
        self.live_nodes().filter(|&i| self.is_nog(i)).collect()
    }

    fn internal_nodes(&self) -> Vec<u32> {
        self.live_nodes()
            .filter(|&i| !self.nodes[i as usize].is_leaf())
            .collect()
    }

    /// Leaves of the subtree rooted at `top`.
    fn subtree_leaves(&self, top: u32) -> Vec<u32> {
        let mut stack = vec![top];
        let mut out = Vec::new();
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i as usize];
            if n.is_leaf() {
                out.push(i);
            } else {
                stack.push(n.left);
                stack.push(n.right);
            }
        }
        out
    }

    /// Routes a row downward from `top`.
    fn route_from(&self, top: u32, row: &[u8]) -> u32 {
        let mut at = top;
        loop {
            let n = &self.nodes[at as usize];
            if n.is_leaf() {
                return at;
            }
            at = if row[n.var as usize] != 0 { n.right } else { n.left };
        }
    }

    /// Compact immutable copy for posterior storage.
    fn freeze(&self) -> Tree {
        fn copy(state: &TreeState, at: u32, nodes: &mut Vec<Node>) -> u32 {
            let n = &state.nodes[at as usize];
            if n.is_leaf() {
                nodes.push(Node::Leaf { value: n.value });
                return (nodes.len() - 1) as u32;
            }
            let slot = nodes.len();
            nodes.push(Node::Split { var: n.var, left: 0, right: 0 });
            let l = copy(state, n.left, nodes);
            let r = copy(state, n.right, nodes);
            nodes[slot] = Node::Split { var: n.var, left: l, right: r };
            slot as u32
        }
        let mut nodes = Vec::new();
        copy(self, 0, &mut nodes);
        Tree { nodes }
    }
}

/// Log marginal likelihood contribution of one leaf with `n` rows and
/// partial-residual sum `s`, the leaf value integrated out. Terms that do not
/// depend on the tree cancel in every ratio we form.
#[inline]
fn log_marginal(n: usize, s: f64, sigma2: f64, sigma_mu2: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let denom = sigma2 + nf * sigma_mu2;
    0.5 * (sigma2 / denom).ln() + sigma_mu2 * s * s / (2.0 * sigma2 * denom)
}

/// Per-leaf sufficient statistics `(count, residual sum)` keyed by node id.
fn leaf_stats(state: &TreeState, r_par: &[f64]) -> Vec<(usize, f64)> {
    let mut stats = vec![(0usize, 0.0f64); state.nodes.len()];
    for (row, &leaf) in state.assign.iter().enumerate() {
        let e = &mut stats[leaf as usize];
        e.0 += 1;
        e.1 += r_par[row];
    }
    stats
}

fn try_grow(
    state: &mut TreeState,
    x: &BinaryMatrix,
    r_par: &[f64],
    stats: &[(usize, f64)],
    sigma2: f64,
    p: &ChainParams,
    rng: &mut ChaCha12Rng,
) {
    let n_vars = x.n_cols();
    let growable: Vec<u32> = state
        .leaves()
        .into_iter()
        .filter(|&l| state.depth(l) < n_vars)
        .collect();
    if growable.is_empty() {
        return;
    }
    let leaf = growable[rng.random_range(0..growable.len())];
    let elig = state.eligible_vars(leaf, n_vars);
    debug_assert!(!elig.is_empty());
    let var = elig[rng.random_range(0..elig.len())];

    let (mut n_left, mut s_left) = (0usize, 0.0f64);
    let (mut n_right, mut s_right) = (0usize, 0.0f64);
    for (row, &a) in state.assign.iter().enumerate() {
        if a == leaf {
            if x.get(row, var as usize) {
                n_right += 1;
                s_right += r_par[row];
            } else {
                n_left += 1;
                s_left += r_par[row];
            }
        }
    }
    if n_left == 0 || n_right == 0 {
        return; // empty child: rejected outright
    }

    let d = state.depth(leaf);
    let ps_d = p.p_split(d);
    let ps_d1 = p.p_split(d + 1);
    let (n_l, s_l) = stats[leaf as usize];
    let delta_ll = log_marginal(n_left, s_left, sigma2, p.sigma_mu2)
        + log_marginal(n_right, s_right, sigma2, p.sigma_mu2)
        - log_marginal(n_l, s_l, sigma2, p.sigma_mu2);

    let parent = state.nodes[leaf as usize].parent;
    let parent_was_nog = parent != NONE && state.is_nog(parent);
    let n_nog_after = state.nog_nodes().len() + 1 - usize::from(parent_was_nog);

    let ln_prior = ps_d.ln() + 2.0 * (1.0 - ps_d1).ln() - (1.0 - ps_d).ln()
        - (elig.len() as f64).ln();
    let ln_proposal = (P_PRUNE / n_nog_after as f64).ln()
        - (P_GROW / (growable.len() as f64 * elig.len() as f64)).ln();

    if rng.random::<f64>().ln() < delta_ll + ln_prior + ln_proposal {
        let left = state.alloc(MNode { parent: leaf, left: NONE, right: NONE, var: 0, value: 0.0 });
        let right = state.alloc(MNode { parent: leaf, left: NONE, right: NONE, var: 0, value: 0.0 });
        {
            let node = &mut state.nodes[leaf as usize];
            node.left = left;
            node.right = right;
            node.var = var;
        }
        for (row, a) in state.assign.iter_mut().enumerate() {
            if *a == leaf {
                *a = if x.get(row, var as usize) { right } else { left };
            }
        }
    }
}

fn try_prune(
    state: &mut TreeState,
    x: &BinaryMatrix,
    stats: &[(usize, f64)],
    sigma2: f64,
    p: &ChainParams,
    rng: &mut ChaCha12Rng,
) {
    let nogs = state.nog_nodes();
    if nogs.is_empty() {
        return;
    }
    let target = nogs[rng.random_range(0..nogs.len())];
    let (left, right) = {
        let n = &state.nodes[target as usize];
        (n.left, n.right)
    };
    let (n_l, s_l) = stats[left as usize];
    let (n_r, s_r) = stats[right as usize];
    let delta_ll = log_marginal(n_l + n_r, s_l + s_r, sigma2, p.sigma_mu2)
        - log_marginal(n_l, s_l, sigma2, p.sigma_mu2)
        - log_marginal(n_r, s_r, sigma2, p.sigma_mu2);

    let d = state.depth(target);
    let ps_d = p.p_split(d);
    let ps_d1 = p.p_split(d + 1);
    let elig_t = state.eligible_vars(target, x.n_cols()).len();

    // growable-leaf count of the pruned tree: both children (leaves at depth
    // d+1) disappear, the target becomes a leaf at depth d
    let n_vars = x.n_cols();
    let child_growable = usize::from(d + 1 < n_vars);
    let growable_now: usize = state
        .leaves()
        .into_iter()
        .filter(|&l| state.depth(l) < n_vars)
        .count();
    let growable_after = growable_now - 2 * child_growable + 1;

    let ln_prior = -(ps_d.ln() + 2.0 * (1.0 - ps_d1).ln() - (1.0 - ps_d).ln()
        - (elig_t as f64).ln());
    let ln_proposal = (P_GROW / (growable_after as f64 * elig_t as f64)).ln()
        - (P_PRUNE / nogs.len() as f64).ln();

    if rng.random::<f64>().ln() < delta_ll + ln_prior + ln_proposal {
        state.release(left);
        state.release(right);
        let node = &mut state.nodes[target as usize];
        node.left = NONE;
        node.right = NONE;
        for a in state.assign.iter_mut() {
            if *a == left || *a == right {
                *a = target;
            }
        }
    }
}

/// Re-routes every row currently assigned under `top`; returns the new
/// assignment (aligned with `rows`) unless some subtree leaf ends up empty.
fn reroute(
    state: &TreeState,
    x: &BinaryMatrix,
    top: u32,
    rows: &[u32],
) -> Option<Vec<u32>> {
    let leaves = state.subtree_leaves(top);
    let mut counts = vec![0usize; state.nodes.len()];
    let new_assign: Vec<u32> = rows
        .iter()
        .map(|&row| {
            let leaf = state.route_from(top, x.row(row as usize));
            counts[leaf as usize] += 1;
            leaf
        })
        .collect();
    if leaves.iter().any(|&l| counts[l as usize] == 0) {
        return None;
    }
    Some(new_assign)
}

/// Likelihood of the subtree under `top` for an assignment of `rows`.
fn subtree_ll(
    state: &TreeState,
    top: u32,
    rows: &[u32],
    assign: &[u32],
    r_par: &[f64],
    sigma2: f64,
    sigma_mu2: f64,
) -> f64 {
    let leaves = state.subtree_leaves(top);
    let mut stats = vec![(0usize, 0.0f64); state.nodes.len()];
    for (&row, &leaf) in rows.iter().zip(assign) {
        let e = &mut stats[leaf as usize];
        e.0 += 1;
        e.1 += r_par[row as usize];
    }
    leaves
        .iter()
        .map(|&l| log_marginal(stats[l as usize].0, stats[l as usize].1, sigma2, sigma_mu2))
        .sum()
}

fn rows_under(state: &TreeState, top: u32) -> Vec<u32> {
    let leaves = state.subtree_leaves(top);
    let mut mark = vec![false; state.nodes.len()];
    for &l in &leaves {
        mark[l as usize] = true;
    }
    state
        .assign
        .iter()
        .enumerate()
        .filter(|(_, &a)| mark[a as usize])
        .map(|(row, _)| row as u32)
        .collect()
}

fn try_change(
    state: &mut TreeState,
    x: &BinaryMatrix,
    r_par: &[f64],
    sigma2: f64,
    p: &ChainParams,
    rng: &mut ChaCha12Rng,
) {
    let internals = state.internal_nodes();
    if internals.is_empty() {
        return;
    }
    let target = internals[rng.random_range(0..internals.len())];
    let elig = state.eligible_vars(target, x.n_cols());
    let new_var = elig[rng.random_range(0..elig.len())];
    let old_var = state.nodes[target as usize].var;

    let rows = rows_under(state, target);
    let old_ll = subtree_ll(
        state,
        target,
        &rows,
        &rows.iter().map(|&r| state.assign[r as usize]).collect::<Vec<_>>(),
        r_par,
        sigma2,
        p.sigma_mu2,
    );

    state.nodes[target as usize].var = new_var;
    let Some(new_assign) = reroute(state, x, target, &rows) else {
        state.nodes[target as usize].var = old_var;
        return;
    };
    let new_ll = subtree_ll(state, target, &rows, &new_assign, r_par, sigma2, p.sigma_mu2);

    // symmetric proposal over an unchanged structure: likelihood ratio only
    if rng.random::<f64>().ln() < new_ll - old_ll {
        for (&row, &leaf) in rows.iter().zip(&new_assign) {
            state.assign[row as usize] = leaf;
        }
    } else {
        state.nodes[target as usize].var = old_var;
    }
}

fn try_swap(
    state: &mut TreeState,
    x: &BinaryMatrix,
    r_par: &[f64],
    sigma2: f64,
    p: &ChainParams,
    rng: &mut ChaCha12Rng,
) {
    // parent-child pairs where both are internal
    let mut pairs = Vec::new();
    for i in state.internal_nodes() {
        let n = &state.nodes[i as usize];
        for child in [n.left, n.right] {
            if !state.nodes[child as usize].is_leaf() {
                pairs.push((i, child));
            }
        }
    }
    if pairs.is_empty() {
        return;
    }
    let (parent, child) = pairs[rng.random_range(0..pairs.len())];

    let rows = rows_under(state, parent);
    let old_ll = subtree_ll(
        state,
        parent,
        &rows,
        &rows.iter().map(|&r| state.assign[r as usize]).collect::<Vec<_>>(),
        r_par,
        sigma2,
        p.sigma_mu2,
    );

    let (pv, cv) = (
        state.nodes[parent as usize].var,
        state.nodes[child as usize].var,
    );
    state.nodes[parent as usize].var = cv;
    state.nodes[child as usize].var = pv;
    let Some(new_assign) = reroute(state, x, parent, &rows) else {
        state.nodes[parent as usize].var = pv;
        state.nodes[child as usize].var = cv;
        return;
    };
    let new_ll = subtree_ll(state, parent, &rows, &new_assign, r_par, sigma2, p.sigma_mu2);

    if rng.random::<f64>().ln() < new_ll - old_ll {
        for (&row, &leaf) in rows.iter().zip(&new_assign) {
            state.assign[row as usize] = leaf;
        }
    } else {
        state.nodes[parent as usize].var = pv;
        state.nodes[child as usize].var = cv;
    }
}

/// One posterior draw: the tree ensemble and the error variance, both on the
/// internal `[-0.5, 0.5]` response scale.
#[derive(Debug, Clone)]
pub struct PosteriorDraw {
    pub trees: Vec<Tree>,
    pub sigma2: f64,
}

/// Runs the chain and returns the retained draws.
pub(crate) fn run_chain(
    x: &BinaryMatrix,
    y_scaled: &[f64],
    m: usize,
    params: &ChainParams,
    burn_in: usize,
    retained: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<PosteriorDraw> {
    let n = y_scaled.len();
    let mut trees: Vec<TreeState> = (0..m).map(|_| TreeState::new(n)).collect();
    let mut resid = y_scaled.to_vec();
    let mut sigma2 = sample_variance(y_scaled).max(1e-12);
    let mut r_par = vec![0.0; n];
    let mut draws = Vec::with_capacity(retained);

    for it in 0..burn_in + retained {
        for tree in trees.iter_mut() {
            // partial residual: add this tree's current contribution back
            for (row, r) in r_par.iter_mut().enumerate() {
                *r = resid[row] + tree.nodes[tree.assign[row] as usize].value;
            }

            let stats = leaf_stats(tree, &r_par);
            let u: f64 = rng.random();
            if u < P_GROW {
                try_grow(tree, x, &r_par, &stats, sigma2, params, rng);
            } else if u < P_GROW + P_PRUNE {
                try_prune(tree, x, &stats, sigma2, params, rng);
            } else if u < P_GROW + P_PRUNE + P_CHANGE {
                try_change(tree, x, &r_par, sigma2, params, rng);
            } else {
                try_swap(tree, x, &r_par, sigma2, params, rng);
            }

            // conjugate leaf draws from the post-move assignment
            let stats = leaf_stats(tree, &r_par);
            for leaf in tree.leaves() {
                let (count, sum) = stats[leaf as usize];
                let prec = 1.0 / params.sigma_mu2 + count as f64 / sigma2;
                let mean = (sum / sigma2) / prec;
                let sd = prec.recip().sqrt();
                let z: f64 = StandardNormal.sample(rng);
                tree.nodes[leaf as usize].value = mean + sd * z;
            }

            for (row, r) in resid.iter_mut().enumerate() {
                *r = r_par[row] - tree.nodes[tree.assign[row] as usize].value;
            }
        }

        // conjugate error-variance draw
        let ssr: f64 = resid.iter().map(|r| r * r).sum();
        let shape = (params.nu + n as f64) / 2.0;
        let rate = (params.nu * params.lambda + ssr) / 2.0;
        let gamma = Gamma::new(shape, 1.0 / rate).expect("valid gamma parameters");
        let precision: f64 = gamma.sample(rng);
        sigma2 = (1.0 / precision).max(SIGMA2_FLOOR);

        if it >= burn_in {
            draws.push(PosteriorDraw {
                trees: trees.iter().map(TreeState::freeze).collect(),
                sigma2,
            });
        }
    }
    draws
}

pub(crate) fn sample_variance(y: &[f64]) -> f64 {
    if y.len() < 2 {
        return 0.0;
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Key;

    fn design(rows: Vec<Vec<bool>>) -> BinaryMatrix {
        BinaryMatrix::from_rows(&rows)
    }

    #[test]
    fn chain_on_separable_data_splits_the_groups() {
        // y = x0 exactly, scaled to [-0.5, 0.5]
        let rows: Vec<Vec<bool>> = (0..100).map(|i| vec![i % 2 == 1, i % 3 == 0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| if r[0] { 0.5 } else { -0.5 }).collect();
        let x = design(rows);
        let params = ChainParams {
            sigma_mu2: (0.5 / (2.0 * (10f64).sqrt())).powi(2),
            alpha: 0.95,
            beta: 2.0,
            nu: 3.0,
            lambda: 0.01,
        };
        let mut rng = Key::new(1, "chain-test").rng();
        let draws = run_chain(&x, &y, 10, &params, 200, 200, &mut rng);
        assert_eq!(draws.len(), 200);
        let pred = |row: &[u8]| -> f64 {
            let mut acc = 0.0;
            for d in &draws {
                acc += d.trees.iter().map(|t| t.predict_row(row)).sum::<f64>();
            }
            acc / draws.len() as f64
        };
        assert!((pred(&[1, 0]) - 0.5).abs() < 0.05, "{}", pred(&[1, 0]));
        assert!((pred(&[0, 0]) + 0.5).abs() < 0.05, "{}", pred(&[0, 0]));
    }

    #[test]
    fn chain_is_deterministic_for_a_fixed_key() {
        let rows: Vec<Vec<bool>> = (0..40).map(|i| vec![i % 2 == 0, i % 5 == 0]).collect();
        let y: Vec<f64> = rows.iter().map(|r| if r[1] { 0.3 } else { -0.2 }).collect();
        let x = design(rows);
        let params = ChainParams {
            sigma_mu2: 0.01,
            alpha: 0.95,
            beta: 2.0,
            nu: 3.0,
            lambda: 0.05,
        };
        let run = || {
            let mut rng = Key::new(7, "det").rng();
            run_chain(&x, &y, 5, &params, 50, 50, &mut rng)
        };
        let (a, b) = (run(), run());
        for (da, db) in a.iter().zip(&b) {
            assert_eq!(da.sigma2, db.sigma2);
            assert_eq!(da.trees.len(), db.trees.len());
            for (ta, tb) in da.trees.iter().zip(&db.trees) {
                assert_eq!(ta, tb);
            }
        }
    }

    #[test]
    fn leaves_always_cover_all_rows() {
        let rows: Vec<Vec<bool>> = (0..30)
            .map(|i| vec![i % 2 == 0, i % 3 == 0, i % 7 == 0])
            .collect();
        let y: Vec<f64> = (0..30).map(|i| (i as f64) / 60.0 - 0.25).collect();
        let x = design(rows);
        let params = ChainParams {
            sigma_mu2: 0.01,
            alpha: 0.95,
            beta: 2.0,
            nu: 3.0,
            lambda: 0.05,
        };
        let mut rng = Key::new(3, "cover").rng();
        let draws = run_chain(&x, &y, 8, &params, 100, 20, &mut rng);
        // every draw's trees route every row somewhere, and the sum of leaf
        // evaluations equals the sum over per-tree routed leaves by
        // construction; spot-check finiteness and shape
        for d in &draws {
            assert_eq!(d.trees.len(), 8);
            assert!(d.sigma2 > 0.0);
            for t in &d.trees {
                for r in 0..x.n_rows() {
                    assert!(t.predict_row(x.row(r)).is_finite());
                }
            }
        }
    }

    #[test]
    fn zero_column_design_never_splits() {
        let rows: Vec<Vec<bool>> = (0..20).map(|_| Vec::new()).collect();
        let y: Vec<f64> = (0..20).map(|i| if i < 10 { -0.5 } else { 0.5 }).collect();
        let x = design(rows);
        let params = ChainParams {
            sigma_mu2: 0.01,
            alpha: 0.95,
            beta: 2.0,
            nu: 3.0,
            lambda: 0.05,
        };
        let mut rng = Key::new(5, "zero-col").rng();
        let draws = run_chain(&x, &y, 4, &params, 20, 20, &mut rng);
        for d in &draws {
            for t in &d.trees {
                assert_eq!(t.nodes.len(), 1);
            }
        }
    }
}

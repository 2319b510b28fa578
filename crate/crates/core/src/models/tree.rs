//! Exact-greedy regression trees.
//!
//! Candidate thresholds are midpoints between consecutive distinct values of
//! a feature among the rows of a node; a row goes left when its value is
//! `<= threshold`. Gain is the reduction in squared error. Ties between equal
//! gains go to the lowest feature index, then the lowest threshold.
//!
//! Trees grow level by level. When the leaf budget cannot absorb every
//! profitable split of a level, the highest-gain splits win (ties to the
//! lower node id).

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

/// Splits whose gain is below this fraction of the node's raw second moment
/// are rounding noise.
const SPLIT_GAIN_RTOL: f64 = 1e-10;

const NO_NODE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        value: f64,
        count: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

/// Feature columns sorted once per fit and reused by every tree.
pub(crate) struct SortedColumns {
    order: Vec<Vec<u32>>,
    values: Vec<Vec<f64>>,
}

impl SortedColumns {
    pub(crate) fn new(x: ArrayView2<'_, f64>) -> Self {
        let (m, p) = x.dim();
        let mut order = Vec::with_capacity(p);
        let mut values = Vec::with_capacity(p);
        for j in 0..p {
            let col = x.column(j);
            let mut idx: Vec<u32> = (0..m as u32).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
            values.push(idx.iter().map(|&i| col[i as usize]).collect());
            order.push(idx);
        }
        Self { order, values }
    }
}

#[derive(Clone, Copy, Default)]
struct Stats {
    count: usize,
    sum: f64,
    sum_sq: f64,
}

#[derive(Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl RegressionTree {
    /// Fit a tree to `targets` over all rows of `x`.
    pub fn fit(x: ArrayView2<'_, f64>, targets: &[f64], params: &TreeParams) -> Self {
        let sorted = SortedColumns::new(x);
        Self::fit_sorted(x, &sorted, targets, params, &mut |_, _| {}).0
    }

    /// Grow one tree. Returns the tree and the leaf node id of every row.
    /// `on_split(feature, gain)` is called for each accepted split.
    pub(crate) fn fit_sorted(
        x: ArrayView2<'_, f64>,
        sorted: &SortedColumns,
        targets: &[f64],
        params: &TreeParams,
        on_split: &mut dyn FnMut(usize, f64),
    ) -> (Self, Vec<u32>) {
        let m = targets.len();
        let p = x.ncols();
        let min_leaf = params.min_samples_leaf.max(1);
        let mut node_of = vec![0u32; m];
        let mut nodes = vec![Node::Leaf {
            value: 0.0,
            count: m,
        }];
        let mut stats = vec![Stats::default()];
        for &t in targets {
            stats[0].count += 1;
            stats[0].sum += t;
            stats[0].sum_sq += t * t;
        }
        let mut leaves = 1usize;
        let mut open: Vec<usize> = vec![0];
        let mut slot_of = vec![u32::MAX; 1];

        for _depth in 0..params.max_depth {
            if open.is_empty() || leaves >= params.max_leaves {
                break;
            }
            for (s, &node) in open.iter().enumerate() {
                slot_of[node] = s as u32;
            }
            let mut best: Vec<Option<Candidate>> = vec![None; open.len()];
            let mut acc = vec![(0usize, 0.0f64, f64::NAN); open.len()];
            for f in 0..p {
                acc.iter_mut().for_each(|a| *a = (0, 0.0, f64::NAN));
                let order = &sorted.order[f];
                let vals = &sorted.values[f];
                for k in 0..m {
                    let row = order[k] as usize;
                    let node = node_of[row];
                    if node == NO_NODE {
                        continue;
                    }
                    let slot = slot_of[node as usize];
                    if slot == u32::MAX {
                        continue;
                    }
                    let slot = slot as usize;
                    let v = vals[k];
                    let a = &mut acc[slot];
                    let total = stats[open[slot]];
                    if a.0 >= min_leaf && v > a.2 && total.count - a.0 >= min_leaf {
                        let right_n = (total.count - a.0) as f64;
                        let right_sum = total.sum - a.1;
                        let gain = a.1 * a.1 / a.0 as f64 + right_sum * right_sum / right_n
                            - total.sum * total.sum / total.count as f64;
                        let better = match best[slot] {
                            None => true,
                            Some(b) => gain > b.gain,
                        };
                        if better {
                            let mut threshold = 0.5 * (a.2 + v);
                            if threshold >= v {
                                threshold = a.2;
                            }
                            best[slot] = Some(Candidate {
                                feature: f,
                                threshold,
                                gain,
                            });
                        }
                    }
                    a.0 += 1;
                    a.1 += targets[row];
                    a.2 = v;
                }
            }

            let mut chosen: Vec<(usize, Candidate)> = open
                .iter()
                .zip(&best)
                .filter_map(|(&node, c)| {
                    c.filter(|c| c.gain > SPLIT_GAIN_RTOL * stats[node].sum_sq && c.gain > 0.0)
                        .map(|c| (node, c))
                })
                .collect();
            chosen.sort_by(|a, b| b.1.gain.total_cmp(&a.1.gain).then(a.0.cmp(&b.0)));
            chosen.truncate(params.max_leaves - leaves);
            chosen.sort_by_key(|c| c.0);

            for &node in &open {
                slot_of[node] = u32::MAX;
            }
            let mut next_open = Vec::with_capacity(2 * chosen.len());
            // node id → (left, right) for the row reassignment pass
            let mut children = vec![None; nodes.len()];
            for (node, c) in &chosen {
                let left = nodes.len();
                let right = left + 1;
                nodes.push(Node::Leaf { value: 0.0, count: 0 });
                nodes.push(Node::Leaf { value: 0.0, count: 0 });
                stats.push(Stats::default());
                stats.push(Stats::default());
                slot_of.push(u32::MAX);
                slot_of.push(u32::MAX);
                nodes[*node] = Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left,
                    right,
                    gain: c.gain,
                };
                children[*node] = Some((left, right, c.feature, c.threshold));
                on_split(c.feature, c.gain);
                next_open.push(left);
                next_open.push(right);
                leaves += 1;
            }
            for row in 0..m {
                let node = node_of[row];
                if node == NO_NODE {
                    continue;
                }
                if let Some((left, right, f, thr)) = children[node as usize] {
                    let child = if x[[row, f]] <= thr { left } else { right };
                    node_of[row] = child as u32;
                    let s = &mut stats[child];
                    s.count += 1;
                    s.sum += targets[row];
                    s.sum_sq += targets[row] * targets[row];
                }
            }
            open = next_open;
        }

        // Leaf values are the mean target of the rows routed there.
        for (id, node) in nodes.iter_mut().enumerate() {
            if let Node::Leaf { value, count } = node {
                let s = stats[id];
                *count = s.count;
                *value = if s.count > 0 { s.sum / s.count as f64 } else { 0.0 };
            }
        }
        (Self { nodes }, node_of)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub(crate) fn leaf_value(&self, node: u32) -> f64 {
        match self.nodes[node as usize] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!("rows always end in leaves"),
        }
    }

    pub fn predict_row(&self, row: ArrayView1<'_, f64>) -> f64 {
        let mut id = 0;
        loop {
            match &self.nodes[id] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => id = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], id: usize) -> usize {
            match &nodes[id] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { value, .. } => Some(*value),
            Node::Split { .. } => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(depth: usize, leaves: usize, min_leaf: usize) -> TreeParams {
        TreeParams {
            max_depth: depth,
            max_leaves: leaves,
            min_samples_leaf: min_leaf,
        }
    }

    #[test]
    fn stump_finds_step() {
        let x = array![[-2.0], [-1.0], [0.0], [1.0], [2.0], [3.0]];
        let y = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let t = RegressionTree::fit(x.view(), &y, &params(1, 32, 1));
        match &t.nodes()[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, -0.5);
            }
            other => panic!("expected split, got {other:?}"),
        }
        assert_eq!(t.predict_row(array![-10.0].view()), 0.0);
        assert_eq!(t.predict_row(array![10.0].view()), 1.0);
    }

    #[test]
    fn ties_prefer_lowest_feature_then_threshold() {
        // both features carry the same split; feature 0 must win
        let x = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let y = [1.0, 1.0, 5.0, 5.0];
        let t = RegressionTree::fit(x.view(), &y, &params(1, 32, 1));
        assert!(matches!(t.nodes()[0], Node::Split { feature: 0, .. }));
        // symmetric target: thresholds 0.5 and 2.5 tie, lowest wins
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let y = [0.0, 1.0, 1.0, 0.0];
        let t = RegressionTree::fit(x.view(), &y, &params(1, 32, 1));
        assert!(matches!(t.nodes()[0], Node::Split { threshold, .. } if threshold == 0.5));
    }

    #[test]
    fn respects_depth_leaves_and_min_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((400, 3), |_| rng.random_range(-1.0f64..1.0));
        let y: Vec<f64> = (0..400).map(|i| (x[[i, 0]] * 3.0).sin() + x[[i, 1]]).collect();
        for (d, l) in [(1, 32), (3, 32), (4, 5), (6, 7)] {
            let t = RegressionTree::fit(x.view(), &y, &params(d, l, 10));
            assert!(t.depth() <= d);
            assert!(t.n_leaves() <= l);
            for n in t.nodes() {
                if let Node::Leaf { count, .. } = n {
                    assert!(*count >= 10);
                }
            }
        }
    }

    #[test]
    fn leaves_are_target_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((200, 2), |_| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..200).map(|i| x[[i, 0]] + 0.1 * x[[i, 1]]).collect();
        let sorted = SortedColumns::new(x.view());
        let (t, leaf_of) = RegressionTree::fit_sorted(x.view(), &sorted, &y, &params(3, 32, 5), &mut |_, _| {});
        for (id, n) in t.nodes().iter().enumerate() {
            if let Node::Leaf { value, count } = n {
                let members: Vec<f64> = (0..200).filter(|&r| leaf_of[r] as usize == id).map(|r| y[r]).collect();
                assert_eq!(members.len(), *count);
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                assert!((mean - value).abs() < 1e-12);
            }
        }
        for r in 0..200 {
            assert_eq!(t.predict_row(x.row(r)), t.leaf_value(leaf_of[r]));
        }
    }

    #[test]
    fn constant_target_never_splits() {
        let x = Array2::from_shape_fn((50, 2), |(i, j)| (i * (j + 1)) as f64);
        let t = RegressionTree::fit(x.view(), &[0.3; 50], &params(4, 32, 1));
        assert_eq!(t.n_leaves(), 1);
    }
}

//! Immediate dominators with the SEMI-NCA algorithm.
//!
//! SEMI-NCA computes semidominators exactly like Lengauer-Tarjan (with path
//! compression over the DFS spanning tree) and then derives immediate
//! dominators by walking each node's spanning-tree parent chain up to the
//! nearest ancestor whose preorder number does not exceed the semidominator.
//! Reference: L. Georgiadis, "Linear-Time Algorithms for Dominators and
//! Related Problems", Princeton, 2005.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::Digraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomDirection {
    /// Dominance from the entry along forward edges.
    Pre,
    /// Dominance towards the exit, computed on the reversed graph.
    Post,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DominatorTree {
    direction: DomDirection,
    root: usize,
    idom: Vec<Option<usize>>,
    /// Preorder number of each node in the DFS used for construction.
    /// `usize::MAX` for unreachable nodes.
    preorder: Vec<usize>,
}

const UNVISITED: usize = usize::MAX;

impl DominatorTree {
    /// Predominator tree of `graph` rooted at `root`.
    pub fn pre(graph: &Digraph, root: usize) -> Self {
        Self::compute(graph, root, DomDirection::Pre)
    }

    /// Postdominator tree: dominators of the reversed graph rooted at `exit`.
    pub fn post(graph: &Digraph, exit: usize) -> Self {
        Self::compute(&graph.reversed(), exit, DomDirection::Post)
    }

    fn compute(graph: &Digraph, root: usize, direction: DomDirection) -> Self {
        let n = graph.node_count();
        let mut preorder = vec![UNVISITED; n];
        // vertex[i] = node with preorder number i
        let mut vertex: Vec<usize> = Vec::with_capacity(n);
        let mut parent = vec![0usize; n];

        // iterative DFS; a node is numbered when first popped
        let mut stack = vec![(root, root)];
        while let Some((node, from)) = stack.pop() {
            if preorder[node] != UNVISITED {
                continue;
            }
            preorder[node] = vertex.len();
            vertex.push(node);
            parent[preorder[node]] = preorder[from];
            for &s in graph.succs(node).iter().rev() {
                if preorder[s] == UNVISITED {
                    stack.push((s, node));
                }
            }
        }

        let count = vertex.len();
        // all arrays below are indexed by preorder number
        let mut semi: Vec<usize> = (0..count).collect();
        let mut label: Vec<usize> = (0..count).collect();
        let mut ancestor: Vec<usize> = vec![UNVISITED; count];

        for w in (1..count).rev() {
            let node = vertex[w];
            for &p in graph.preds(node) {
                let v = preorder[p];
                if v == UNVISITED {
                    continue;
                }
                let u = eval(v, &mut ancestor, &mut label, &semi);
                if semi[u] < semi[w] {
                    semi[w] = semi[u];
                }
            }
            ancestor[w] = parent[w];
        }

        let mut idom_num: Vec<usize> = parent.iter().take(count).copied().collect();
        for w in 1..count {
            let mut d = idom_num[w];
            while d > semi[w] {
                d = idom_num[d];
            }
            idom_num[w] = d;
        }

        let mut idom = vec![None; n];
        for w in 1..count {
            idom[vertex[w]] = Some(vertex[idom_num[w]]);
        }

        DominatorTree {
            direction,
            root,
            idom,
            preorder,
        }
    }

    pub fn direction(&self) -> DomDirection {
        self.direction
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Immediate dominator; `None` for the root and unreachable nodes.
    pub fn idom(&self, node: usize) -> Option<usize> {
        self.idom[node]
    }

    pub fn is_reachable(&self, node: usize) -> bool {
        self.preorder[node] != UNVISITED
    }

    pub fn node_count(&self) -> usize {
        self.idom.len()
    }

    /// Reflexive dominance test.
    pub fn dominates(&self, a: usize, b: usize) -> bool {
        if !self.is_reachable(a) || !self.is_reachable(b) {
            return false;
        }
        let mut cur = Some(b);
        while let Some(c) = cur {
            if c == a {
                return true;
            }
            cur = self.idom[c];
        }
        false
    }

    pub fn children(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.idom
            .iter()
            .enumerate()
            .filter(move |(_, d)| **d == Some(node))
            .map(|(c, _)| c)
    }

    /// Tree edges `(idom, node)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.idom
            .iter()
            .enumerate()
            .filter_map(|(c, d)| d.map(|d| (d, c)))
    }
}

fn eval(v: usize, ancestor: &mut [usize], label: &mut [usize], semi: &[usize]) -> usize {
    if ancestor[v] == UNVISITED {
        return v;
    }
    compress(v, ancestor, label, semi);
    label[v]
}

fn compress(v: usize, ancestor: &mut [usize], label: &mut [usize], semi: &[usize]) {
    // collect the chain of nodes whose ancestor is itself linked
    let mut chain = Vec::new();
    let mut cur = v;
    while ancestor[cur] != UNVISITED && ancestor[ancestor[cur]] != UNVISITED {
        chain.push(cur);
        cur = ancestor[cur];
    }
    for &node in chain.iter().rev() {
        let a = ancestor[node];
        if semi[label[a]] < semi[label[node]] {
            label[node] = label[a];
        }
        ancestor[node] = ancestor[a];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_parents() {
        // EN=0 -> a=1 -> b=2 -> EX=3
        let g = Digraph::from_edges(4, [(0, 1), (1, 2), (2, 3)]);
        let pre = DominatorTree::pre(&g, 0);
        assert_eq!(pre.idom(1), Some(0));
        assert_eq!(pre.idom(2), Some(1));
        assert_eq!(pre.idom(0), None);
        let post = DominatorTree::post(&g, 3);
        assert_eq!(post.idom(1), Some(2));
        assert_eq!(post.direction(), DomDirection::Post);
    }

    #[test]
    fn diamond() {
        // a=0 -> {b=1, c=2} -> d=3
        let g = Digraph::from_edges(4, [(0, 1), (0, 2), (1, 3), (2, 3)]);
        let pre = DominatorTree::pre(&g, 0);
        assert_eq!(pre.idom(3), Some(0));
        let post = DominatorTree::post(&g, 3);
        assert_eq!(post.idom(0), Some(3));
        assert!(pre.dominates(0, 3));
        assert!(!pre.dominates(1, 3));
    }

    #[test]
    fn unreachable_nodes_have_no_idom() {
        let g = Digraph::from_edges(3, [(0, 1)]);
        let pre = DominatorTree::pre(&g, 0);
        assert!(!pre.is_reachable(2));
        assert_eq!(pre.idom(2), None);
        assert!(!pre.dominates(0, 2));
    }

    #[test]
    fn loop_with_semidominator_above_parent() {
        // 0 -> 1 -> 2 -> 3, 0 -> 3, 3 -> 1 : idom(1) = 0 via back edge from 3
        let g = Digraph::from_edges(4, [(0, 1), (1, 2), (2, 3), (0, 3), (3, 1)]);
        let pre = DominatorTree::pre(&g, 0);
        assert_eq!(pre.idom(1), Some(0));
        assert_eq!(pre.idom(2), Some(1));
        assert_eq!(pre.idom(3), Some(0));
    }
}

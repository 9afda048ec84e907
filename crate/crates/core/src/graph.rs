use alloc::vec;
use alloc::vec::Vec;

/// Directed graph over dense node indices `0..n`.
///
/// Parallel edges are collapsed on insertion; successor and predecessor
/// lists keep insertion order so traversals are deterministic.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Digraph {
    succs: Vec<Vec<usize>>,
    preds: Vec<Vec<usize>>,
}

impl Digraph {
    pub fn new(node_count: usize) -> Self {
        Digraph {
            succs: vec![Vec::new(); node_count],
            preds: vec![Vec::new(); node_count],
        }
    }

    pub fn from_edges(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut g = Digraph::new(node_count);
        for (a, b) in edges {
            g.add_edge(a, b);
        }
        g
    }

    pub fn node_count(&self) -> usize {
        self.succs.len()
    }

    pub fn add_node(&mut self) -> usize {
        self.succs.push(Vec::new());
        self.preds.push(Vec::new());
        self.succs.len() - 1
    }

    /// Returns false when the edge was already present.
    pub fn add_edge(&mut self, from: usize, to: usize) -> bool {
        if self.succs[from].contains(&to) {
            return false;
        }
        self.succs[from].push(to);
        self.preds[to].push(from);
        true
    }

    pub fn remove_edge(&mut self, from: usize, to: usize) {
        self.succs[from].retain(|&s| s != to);
        self.preds[to].retain(|&p| p != from);
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.succs[from].contains(&to)
    }

    pub fn succs(&self, node: usize) -> &[usize] {
        &self.succs[node]
    }

    pub fn preds(&self, node: usize) -> &[usize] {
        &self.preds[node]
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.succs
            .iter()
            .enumerate()
            .flat_map(|(a, ss)| ss.iter().map(move |&b| (a, b)))
    }

    pub fn edge_count(&self) -> usize {
        self.succs.iter().map(Vec::len).sum()
    }

    pub fn reversed(&self) -> Digraph {
        Digraph {
            succs: self.preds.clone(),
            preds: self.succs.clone(),
        }
    }

    /// Nodes reachable from `root`, skipping nodes for which `blocked` is true.
    /// A blocked root reaches nothing.
    pub fn reachable_avoiding(&self, root: usize, blocked: &[bool]) -> Vec<bool> {
        let mut seen = vec![false; self.node_count()];
        if blocked.get(root).copied().unwrap_or(false) {
            return seen;
        }
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(n) = stack.pop() {
            for &s in &self.succs[n] {
                if !seen[s] && !blocked.get(s).copied().unwrap_or(false) {
                    seen[s] = true;
                    stack.push(s);
                }
            }
        }
        seen
    }

    pub fn reachable_from(&self, root: usize) -> Vec<bool> {
        self.reachable_avoiding(root, &[])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_edges_collapse() {
        let mut g = Digraph::new(2);
        assert!(g.add_edge(0, 1));
        assert!(!g.add_edge(0, 1));
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.preds(1), &[0]);
    }

    #[test]
    fn reachability_respects_blocked_nodes() {
        let g = Digraph::from_edges(4, [(0, 1), (1, 2), (0, 3), (3, 2)]);
        let r = g.reachable_avoiding(0, &[false, true, false, false]);
        assert_eq!(r, vec![true, false, true, true]);
        let r = g.reachable_avoiding(0, &[false, true, false, true]);
        assert_eq!(r, vec![true, false, false, false]);
    }
}

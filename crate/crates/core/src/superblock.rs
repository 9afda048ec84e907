//! Superblock dominator graphs and the probe sets derived from them.
//!
//! A block `u` dominates `v` when it predominates or postdominates it. The
//! dominator graph (DG) is the edge union of both dominator trees; every
//! strongly connected component of the DG is a superblock, a set of blocks
//! whose coverage is equivalent. Condensing the DG yields the superblock
//! dominator graph (SB-DG), a DAG in which covering a superblock implies
//! covering all of its ancestors.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::covdata::Policy;
use crate::dominators::DominatorTree;
use crate::graph::Digraph;
use crate::scc;

/// A control-flow graph with explicit virtual entry and exit nodes.
#[derive(Clone, Debug)]
pub struct FlowGraph {
    pub graph: Digraph,
    pub entry: usize,
    pub exit: usize,
}

impl FlowGraph {
    pub fn new(graph: Digraph, entry: usize, exit: usize) -> Self {
        FlowGraph { graph, entry, exit }
    }

    pub fn is_virtual(&self, node: usize) -> bool {
        node == self.entry || node == self.exit
    }

    /// Adds edges to the exit from nodes that cannot reach it (endless loops),
    /// one edge per terminal component. Returns the nodes that received an edge.
    pub fn connect_dead_ends(&mut self) -> Vec<usize> {
        let mut added = Vec::new();
        loop {
            let live = self.graph.reversed().reachable_from(self.exit);
            let from_entry = self.graph.reachable_from(self.entry);
            let dead: Vec<usize> = (0..self.graph.node_count())
                .filter(|&n| from_entry[n] && !live[n])
                .collect();
            if dead.is_empty() {
                return added;
            }
            let comps = scc::tarjan(&self.graph);
            // a dead component with no edge leaving it is terminal
            let mut fixed = false;
            for &n in &dead {
                let c = comps.component_of[n];
                let members = &comps.members[c];
                if members[0] != n {
                    continue;
                }
                let terminal = members
                    .iter()
                    .all(|&m| self.graph.succs(m).iter().all(|&s| comps.component_of[s] == c));
                if terminal {
                    let src = *members.last().expect("non-empty component");
                    self.graph.add_edge(src, self.exit);
                    added.push(src);
                    fixed = true;
                }
            }
            if !fixed {
                // unreachable in a well-formed graph; guard against looping forever
                let n = dead[0];
                self.graph.add_edge(n, self.exit);
                added.push(n);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuperblockGraph {
    /// Members of each superblock, virtual nodes included, sorted.
    members: Vec<Vec<usize>>,
    /// Members without the virtual entry/exit nodes.
    real_members: Vec<Vec<usize>>,
    sb_of: Vec<usize>,
    children: Vec<Vec<usize>>,
    parents: Vec<Vec<usize>>,
    critical: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SuperblockError {
    #[error("unknown superblock id {0}")]
    UnknownSuperblockId(usize),
}

impl SuperblockGraph {
    /// Builds the SB-DG of `flow` and marks critical superblocks.
    pub fn build(flow: &FlowGraph) -> Self {
        let pre = DominatorTree::pre(&flow.graph, flow.entry);
        let post = DominatorTree::post(&flow.graph, flow.exit);
        Self::from_trees(flow, &pre, &post)
    }

    pub fn from_trees(flow: &FlowGraph, pre: &DominatorTree, post: &DominatorTree) -> Self {
        let n = flow.graph.node_count();
        let mut dg = Digraph::new(n);
        for (a, b) in pre.edges().chain(post.edges()) {
            dg.add_edge(a, b);
        }
        let comps = scc::tarjan(&dg);
        let count = comps.members.len();
        // Tarjan numbers sinks first; renumber so parents get smaller ids.
        let remap: Vec<usize> = (0..count).map(|c| count - 1 - c).collect();
        let mut members = vec![Vec::new(); count];
        for (c, m) in comps.members.iter().enumerate() {
            members[remap[c]] = m.clone();
        }
        let sb_of: Vec<usize> = comps.component_of.iter().map(|&c| remap[c]).collect();

        let mut children = vec![Vec::new(); count];
        let mut parents = vec![Vec::new(); count];
        for (a, b) in dg.edges() {
            let (sa, sb) = (sb_of[a], sb_of[b]);
            if sa != sb && !children[sa].contains(&sb) {
                children[sa].push(sb);
                parents[sb].push(sa);
            }
        }
        for list in children.iter_mut().chain(parents.iter_mut()) {
            list.sort_unstable();
        }
        let real_members = members
            .iter()
            .map(|m| m.iter().copied().filter(|&x| !flow.is_virtual(x)).collect())
            .collect();

        let mut g = SuperblockGraph {
            members,
            real_members,
            sb_of,
            children,
            parents,
            critical: Vec::new(),
        };
        g.critical = (0..count).map(|s| g.compute_critical(flow, s)).collect();
        g
    }

    /// A superblock is critical when some entry-to-exit walk visits it
    /// while avoiding every block of all of its children.
    fn compute_critical(&self, flow: &FlowGraph, sb: usize) -> bool {
        if self.children[sb].is_empty() {
            return true;
        }
        let mut blocked = vec![false; flow.graph.node_count()];
        for &c in &self.children[sb] {
            for &m in &self.members[c] {
                blocked[m] = true;
            }
        }
        let fwd = flow.graph.reachable_avoiding(flow.entry, &blocked);
        let bwd = flow.graph.reversed().reachable_avoiding(flow.exit, &blocked);
        self.members[sb].iter().any(|&m| fwd[m] && bwd[m])
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn superblock_of(&self, node: usize) -> usize {
        self.sb_of[node]
    }

    pub fn members(&self, sb: usize) -> &[usize] {
        &self.members[sb]
    }

    /// Members that are real blocks.
    pub fn blocks(&self, sb: usize) -> &[usize] {
        &self.real_members[sb]
    }

    /// Superblocks holding only the virtual entry/exit nodes are never probed.
    pub fn is_virtual(&self, sb: usize) -> bool {
        self.real_members[sb].is_empty()
    }

    pub fn children(&self, sb: usize) -> &[usize] {
        &self.children[sb]
    }

    pub fn parents(&self, sb: usize) -> &[usize] {
        &self.parents[sb]
    }

    pub fn is_leaf(&self, sb: usize) -> bool {
        self.children[sb].is_empty()
    }

    pub fn is_critical(&self, sb: usize) -> bool {
        self.critical[sb]
    }

    /// True when some parent of `sb` has another child.
    pub fn has_siblings(&self, sb: usize) -> bool {
        self.parents[sb]
            .iter()
            .any(|&p| self.children[p].iter().any(|&c| c != sb))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.children
            .iter()
            .enumerate()
            .flat_map(|(a, cs)| cs.iter().map(move |&b| (a, b)))
    }

    /// Superblock ids to probe under `policy`, ascending.
    pub fn probe_set(&self, policy: Policy) -> Vec<usize> {
        (0..self.len())
            .filter(|&s| !self.is_virtual(s))
            .filter(|&s| match policy {
                Policy::LeafNode => self.is_leaf(s),
                Policy::AnyNode => self.is_leaf(s) || self.is_critical(s),
            })
            .collect()
    }

    /// Superblock ids that are ancestors of `sb` (exclusive).
    pub fn ancestors(&self, sb: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<usize> = self.parents[sb].clone();
        while let Some(s) = stack.pop() {
            if seen.insert(s) {
                stack.extend(self.parents[s].iter().copied());
            }
        }
        seen
    }

    /// Real blocks covered when the superblocks in `hit` were executed:
    /// the hit superblocks plus all of their SB-DG ancestors.
    pub fn reconstruct(
        &self,
        hit: impl IntoIterator<Item = usize>,
    ) -> Result<BTreeSet<usize>, SuperblockError> {
        let mut covered_sbs = BTreeSet::new();
        let mut stack = Vec::new();
        for s in hit {
            if s >= self.len() {
                return Err(SuperblockError::UnknownSuperblockId(s));
            }
            stack.push(s);
        }
        while let Some(s) = stack.pop() {
            if covered_sbs.insert(s) {
                stack.extend(self.parents[s].iter().copied());
            }
        }
        Ok(covered_sbs
            .into_iter()
            .flat_map(|s| self.real_members[s].iter().copied())
            .collect())
    }
}

//! Tarjan's strongly connected components, iterative.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::Digraph;

/// Component assignment for every node.
///
/// Components are numbered in the order Tarjan completes them, which is a
/// reverse topological order of the condensation: if there is an edge from
/// component `a` to component `b != a` then `a > b`.
#[derive(Clone, Debug)]
pub struct Components {
    pub component_of: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

pub fn tarjan(graph: &Digraph) -> Components {
    const NONE: usize = usize::MAX;
    let n = graph.node_count();
    let mut index = vec![NONE; n];
    let mut lowlink = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack: Vec<usize> = Vec::new();
    let mut component_of = vec![NONE; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut next = 0usize;

    // (node, next successor position)
    let mut call: Vec<(usize, usize)> = Vec::new();
    for start in 0..n {
        if index[start] != NONE {
            continue;
        }
        call.push((start, 0));
        index[start] = next;
        lowlink[start] = next;
        next += 1;
        stack.push(start);
        on_stack[start] = true;

        while let Some(&mut (v, ref mut pos)) = call.last_mut() {
            let succs = graph.succs(v);
            if *pos < succs.len() {
                let w = succs[*pos];
                *pos += 1;
                if index[w] == NONE {
                    index[w] = next;
                    lowlink[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    lowlink[v] = lowlink[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(u, _)) = call.last() {
                lowlink[u] = lowlink[u].min(lowlink[v]);
            }
            if lowlink[v] == index[v] {
                let id = members.len();
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    component_of[w] = id;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comp.sort_unstable();
                members.push(comp);
            }
        }
    }
    Components {
        component_of,
        members,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cycles_and_a_bridge() {
        let g = Digraph::from_edges(5, [(0, 1), (1, 0), (1, 2), (2, 3), (3, 4), (4, 2)]);
        let c = tarjan(&g);
        assert_eq!(c.members.len(), 2);
        assert_eq!(c.component_of[0], c.component_of[1]);
        assert_eq!(c.component_of[2], c.component_of[4]);
        // reverse topological: {0,1} -> {2,3,4} so the source completes last
        assert!(c.component_of[0] > c.component_of[2]);
    }

    #[test]
    fn singletons_in_a_dag() {
        let g = Digraph::from_edges(3, [(0, 1), (1, 2)]);
        let c = tarjan(&g);
        assert_eq!(c.members.len(), 3);
        assert!(c.component_of[0] > c.component_of[1]);
        assert!(c.component_of[1] > c.component_of[2]);
    }
}

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::{Graph, GraphError, Result};

/// Topological order of node indices. Among ready nodes the earliest
/// declared goes first, so the result is deterministic.
pub fn topo_order(g: &Graph) -> Result<Vec<usize>> {
    let producers = g.producers();
    let n = g.nodes().len();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in g.nodes().iter().enumerate() {
        for inp in &node.inputs {
            if let Some(&p) = producers.get(inp.as_str()) {
                succ[p].push(i);
                indegree[i] += 1;
            }
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    if order.len() != n {
        let nodes = (0..n)
            .filter(|&i| indegree[i] > 0)
            .map(|i| g.nodes()[i].name.clone())
            .collect();
        return Err(GraphError::Cycle { nodes });
    }
    Ok(order)
}

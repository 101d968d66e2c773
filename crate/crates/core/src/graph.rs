//! Dependency graphs over ordered keys.
//!
//! Edges point from a node to the nodes it depends on. Orders produced here
//! put dependencies before dependents and break ties lexicographically, so
//! they are identical from run to run.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

/// A cycle found while ordering a graph, listed so that each node depends on
/// the next and the last depends on the first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cycle<K>(pub Vec<K>);

#[derive(Debug, Clone)]
pub struct Graph<K: Ord + Clone> {
    deps: BTreeMap<K, BTreeSet<K>>,
}

impl<K: Ord + Clone> Default for Graph<K> {
    fn default() -> Self {
        Graph { deps: BTreeMap::new() }
    }
}

impl<K: Ord + Clone> Graph<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: K) {
        self.deps.entry(node).or_default();
    }

    /// Records that `node` depends on `dep`. Both become nodes.
    pub fn add_edge(&mut self, node: K, dep: K) {
        self.add_node(dep.clone());
        self.deps.entry(node).or_default().insert(dep);
    }

    pub fn contains(&self, node: &K) -> bool {
        self.deps.contains_key(node)
    }

    pub fn len(&self) -> usize {
        self.deps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deps.is_empty()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &K> {
        self.deps.keys()
    }

    pub fn deps(&self, node: &K) -> impl Iterator<Item = &K> {
        self.deps.get(node).into_iter().flatten()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&K, &K)> {
        self.deps.iter().flat_map(|(n, ds)| ds.iter().map(move |d| (n, d)))
    }

    /// Reverse adjacency: for every node, the nodes that depend on it.
    pub fn dependents(&self) -> BTreeMap<K, BTreeSet<K>> {
        let mut rev: BTreeMap<K, BTreeSet<K>> = self.deps.keys().map(|k| (k.clone(), BTreeSet::new())).collect();
        for (n, d) in self.edges() {
            rev.get_mut(d).expect("edge target is a node").insert(n.clone());
        }
        rev
    }

    /// Every node, dependencies first. Among nodes whose dependencies are
    /// all placed, the smallest comes next.
    pub fn topo_order(&self) -> Result<Vec<K>, Cycle<K>> {
        let rev = self.dependents();
        let mut pending: BTreeMap<&K, usize> = self.deps.iter().map(|(k, ds)| (k, ds.len())).collect();
        let mut ready: BTreeSet<&K> = pending.iter().filter(|(_, n)| **n == 0).map(|(k, _)| *k).collect();
        let mut order = Vec::with_capacity(self.deps.len());
        while let Some(next) = ready.pop_first() {
            pending.remove(next);
            order.push(next.clone());
            for dependent in &rev[next] {
                let n = pending.get_mut(dependent).expect("dependent is pending");
                *n -= 1;
                if *n == 0 {
                    ready.insert(dependent);
                }
            }
        }
        if order.len() == self.deps.len() {
            Ok(order)
        } else {
            let stuck: BTreeSet<&K> = pending.keys().copied().collect();
            Err(self.extract_cycle(&stuck))
        }
    }

    /// Walks dependency edges inside `stuck` until a node repeats. Every
    /// node left over by the topological sort has a dependency that is also
    /// left over, so the walk always closes a loop.
    fn extract_cycle(&self, stuck: &BTreeSet<&K>) -> Cycle<K> {
        let start = *stuck.first().expect("at least one stuck node");
        let mut seen: BTreeMap<&K, usize> = BTreeMap::new();
        let mut path: Vec<&K> = Vec::new();
        let mut cur = start;
        loop {
            if let Some(&i) = seen.get(cur) {
                return Cycle(path[i..].iter().map(|k| (*k).clone()).collect());
            }
            seen.insert(cur, path.len());
            path.push(cur);
            cur = self.deps[cur].iter().find(|d| stuck.contains(d)).expect("stuck node has a stuck dependency");
        }
    }

    /// Topological order restricted to what `roots` reach.
    pub fn closure_order<'a>(&self, roots: impl IntoIterator<Item = &'a K>) -> Result<Vec<K>, Cycle<K>>
    where
        K: 'a,
    {
        let live = self.reachable(roots);
        let mut sub = Graph::new();
        for n in &live {
            sub.add_node(n.clone());
            for d in self.deps(n) {
                sub.add_edge(n.clone(), d.clone());
            }
        }
        sub.topo_order()
    }

    /// Nodes reachable from `roots` along dependency edges, roots included.
    /// Roots that are not nodes are still returned.
    pub fn reachable<'a>(&self, roots: impl IntoIterator<Item = &'a K>) -> BTreeSet<K>
    where
        K: 'a,
    {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<K> = roots.into_iter().cloned().collect();
        while let Some(n) = stack.pop() {
            if seen.contains(&n) {
                continue;
            }
            stack.extend(self.deps(&n).filter(|d| !seen.contains(*d)).cloned());
            seen.insert(n);
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::String;
    use alloc::vec;
    use proptest::prelude::*;

    fn graph(edges: &[(&str, &str)]) -> Graph<String> {
        let mut g = Graph::new();
        for (a, b) in edges {
            g.add_edge(String::from(*a), String::from(*b));
        }
        g
    }

    fn check_order(g: &Graph<String>, order: &[String]) {
        assert_eq!(order.len(), g.len());
        let pos: BTreeMap<&String, usize> = order.iter().enumerate().map(|(i, k)| (k, i)).collect();
        for (n, d) in g.edges() {
            assert!(pos[d] < pos[n], "{d} must precede {n}");
        }
    }

    #[test]
    fn diamond_is_ordered_and_stable() {
        let g = graph(&[("d", "b"), ("d", "c"), ("b", "a"), ("c", "a")]);
        let order = g.topo_order().unwrap();
        assert_eq!(order, ["a", "b", "c", "d"]);
        assert_eq!(g.topo_order().unwrap(), order);
    }

    #[test]
    fn cycle_is_reported_with_its_members() {
        let g = graph(&[("a", "b"), ("b", "c"), ("c", "a"), ("d", "a"), ("c", "e")]);
        let Cycle(members) = g.topo_order().unwrap_err();
        let mut sorted = members.clone();
        sorted.sort();
        assert_eq!(sorted, ["a", "b", "c"]);
        for w in 0..members.len() {
            let next = &members[(w + 1) % members.len()];
            assert!(g.deps(&members[w]).any(|d| d == next));
        }
    }

    #[test]
    fn self_loop() {
        let g = graph(&[("a", "a")]);
        assert_eq!(g.topo_order(), Err(Cycle(vec![String::from("a")])));
    }

    #[test]
    fn reachability() {
        let g = graph(&[("a", "b"), ("b", "c"), ("x", "c"), ("y", "z")]);
        let r = g.reachable([&String::from("a")]);
        assert_eq!(r.into_iter().collect::<Vec<_>>(), ["a", "b", "c"]);
        let order = g.closure_order([&String::from("x")]).unwrap();
        assert_eq!(order, ["c", "x"]);
    }

    #[test]
    fn layered_dag_of_292_nodes() {
        // Eight layers of increasing width, each node depending on up to three
        // nodes of the previous layers, chosen by a fixed arithmetic rule.
        let mut g = Graph::new();
        let mut layers: Vec<Vec<String>> = Vec::new();
        let widths = [4, 12, 24, 40, 52, 60, 52, 48];
        assert_eq!(widths.iter().sum::<usize>(), 292);
        for (l, &w) in widths.iter().enumerate() {
            let mut layer = Vec::new();
            for i in 0..w {
                let n = format!("pkg-{l}-{i:03}");
                g.add_node(n.clone());
                if l > 0 {
                    for k in 0..3 {
                        let pl = (i + k) % l;
                        let prev = &layers[pl];
                        g.add_edge(n.clone(), prev[(i * 7 + k * 13) % prev.len()].clone());
                    }
                }
                layer.push(n);
            }
            layers.push(layer);
        }
        assert_eq!(g.len(), 292);
        let order = g.topo_order().unwrap();
        check_order(&g, &order);
        assert_eq!(g.topo_order().unwrap(), order);
    }

    proptest! {
        #[test]
        fn random_dags_order_correctly(edges in proptest::collection::vec((0u8..40, 0u8..40), 0..120)) {
            // Orient every edge from the larger to the smaller id so the graph is acyclic.
            let mut g = Graph::new();
            for (a, b) in edges {
                if a == b { g.add_node(format!("{a:02}")); continue; }
                let (hi, lo) = if a > b { (a, b) } else { (b, a) };
                g.add_edge(format!("{hi:02}"), format!("{lo:02}"));
            }
            let order = g.topo_order().unwrap();
            check_order(&g, &order);
        }
    }
}

//! Spatial kNN graph over tile origins.
//!
//! Neighbors are exact: a 2-d tree answers each query, ordering candidates
//! by (squared distance, node index) so ties resolve to the smaller index.

use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use crate::embedding::FeatureBag;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SlideGraph {
    pub bag: FeatureBag,
    pub k: usize,
    edges: Vec<(u32, u32)>,
    neighbors: Vec<Vec<u32>>,
}

impl SlideGraph {
    /// Build from an explicit directed edge list (src, dst). Self-edges and
    /// out-of-range endpoints are rejected.
    pub fn from_edges(bag: FeatureBag, k: usize, edges: Vec<(u32, u32)>) -> Result<Self> {
        let n = bag.len();
        for &(s, d) in &edges {
            if s as usize >= n || d as usize >= n {
                return Err(Error::invalid(format!("edge ({s}, {d}) out of range for N={n}")));
            }
            if s == d {
                return Err(Error::invalid(format!("self edge at node {s}")));
            }
        }
        let neighbors = symmetrize(n, &edges);
        Ok(Self {
            bag,
            k,
            edges,
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.bag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bag.is_empty()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    /// Union of in- and out-neighbors of each node, sorted ascending.
    pub fn symmetric_neighbors(&self) -> &[Vec<u32>] {
        &self.neighbors
    }

    /// Graph on `bag.permuted(perm)` with edges relabeled to match.
    pub fn permuted(&self, perm: &[usize]) -> SlideGraph {
        let mut inverse = vec![0u32; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new as u32;
        }
        let edges = self
            .edges
            .iter()
            .map(|&(s, d)| (inverse[s as usize], inverse[d as usize]))
            .collect();
        SlideGraph::from_edges(self.bag.permuted(perm), self.k, edges).expect("permutation preserves validity")
    }
}

fn symmetrize(n: usize, edges: &[(u32, u32)]) -> Vec<Vec<u32>> {
    let mut nb = vec![Vec::new(); n];
    for &(s, d) in edges {
        nb[s as usize].push(d);
        nb[d as usize].push(s);
    }
    for list in &mut nb {
        list.sort_unstable();
        list.dedup();
    }
    nb
}

#[derive(Debug)]
struct KdNode {
    point: usize,
    axis: usize,
    left: Option<Box<KdNode>>,
    right: Option<Box<KdNode>>,
}

struct KdTree<'a> {
    points: &'a [[i64; 2]],
    root: Option<Box<KdNode>>,
}

impl<'a> KdTree<'a> {
    fn new(points: &'a [[i64; 2]]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let root = Self::build(points, &mut idx, 0);
        Self { points, root }
    }

    fn build(points: &[[i64; 2]], idx: &mut [usize], depth: usize) -> Option<Box<KdNode>> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 2;
        idx.sort_unstable_by_key(|&i| (points[i][axis], i));
        let mid = idx.len() / 2;
        let point = idx[mid];
        let (lo, hi) = idx.split_at_mut(mid);
        Some(Box::new(KdNode {
            point,
            axis,
            left: Self::build(points, lo, depth + 1),
            right: Self::build(points, &mut hi[1..], depth + 1),
        }))
    }

    /// The `k` nearest points to `query` other than `query` itself, by
    /// (squared distance, index).
    fn nearest(&self, query: usize, k: usize) -> Vec<u32> {
        let mut heap: BinaryHeap<(i64, usize)> = BinaryHeap::with_capacity(k + 1);
        if let Some(root) = &self.root {
            self.search(root, query, k, &mut heap);
        }
        let mut out = heap.into_vec();
        out.sort_unstable();
        out.into_iter().map(|(_, i)| i as u32).collect()
    }

    fn search(&self, node: &KdNode, query: usize, k: usize, heap: &mut BinaryHeap<(i64, usize)>) {
        let q = self.points[query];
        let p = self.points[node.point];
        if node.point != query {
            let d = dist2(q, p);
            if heap.len() < k {
                heap.push((d, node.point));
            } else if (d, node.point) < *heap.peek().unwrap() {
                heap.pop();
                heap.push((d, node.point));
            }
        }
        let diff = q[node.axis] - p[node.axis];
        let (near, far) = if diff < 0 {
            (&node.left, &node.right)
        } else {
            (&node.right, &node.left)
        };
        if let Some(n) = near {
            self.search(n, query, k, heap);
        }
        if let Some(f) = far {
            // equal distance must still be visited: a smaller index may win the tie
            if heap.len() < k || diff * diff <= heap.peek().unwrap().0 {
                self.search(f, query, k, heap);
            }
        }
    }
}

fn dist2(a: [i64; 2], b: [i64; 2]) -> i64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// Exact kNN graph: each node links to its `min(k, N-1)` nearest other
/// nodes by Euclidean distance of tile origins.
pub fn build_knn_graph(bag: FeatureBag, k: usize) -> Result<SlideGraph> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    let points: Vec<[i64; 2]> = bag.coords.iter().map(|c| [c[0] as i64, c[1] as i64]).collect();
    let tree = KdTree::new(&points);
    let kk = k.min(points.len().saturating_sub(1));
    let mut edges = Vec::with_capacity(points.len() * kk);
    if kk > 0 {
        for i in 0..points.len() {
            for j in tree.nearest(i, kk) {
                edges.push((i as u32, j));
            }
        }
    }
    SlideGraph::from_edges(bag, k, edges)
}

/// `graph.csv`: src,dst.
pub fn write_graph_csv(graph: &SlideGraph, path: &Path) -> Result<()> {
    let mut out = String::from("src,dst\n");
    for (s, d) in graph.edges() {
        out.push_str(&format!("{s},{d}\n"));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn read_graph_csv(path: &Path) -> Result<Vec<(u32, u32)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CancerType, Magnification};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn bag_at(coords: Vec<[i32; 2]>) -> FeatureBag {
        let n = coords.len();
        FeatureBag::new("s", "p", CancerType::Coad, Magnification::X20, Array2::zeros((n, 2)), coords).unwrap()
    }

    fn brute_knn(coords: &[[i32; 2]], k: usize) -> Vec<(u32, u32)> {
        let mut edges = Vec::new();
        for i in 0..coords.len() {
            let mut cand: Vec<(i64, usize)> = (0..coords.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = coords[i][0] as i64 - coords[j][0] as i64;
                    let dy = coords[i][1] as i64 - coords[j][1] as i64;
                    (dx * dx + dy * dy, j)
                })
                .collect();
            cand.sort();
            for (_, j) in cand.into_iter().take(k) {
                edges.push((i as u32, j as u32));
            }
        }
        edges
    }

    #[test]
    fn singleton_has_no_edges() {
        let g = build_knn_graph(bag_at(vec![[0, 0]]), 8).unwrap();
        assert!(g.edges().is_empty());
        assert_eq!(g.symmetric_neighbors(), &[Vec::<u32>::new()]);
    }

    #[test]
    fn small_n_clamps() {
        let g = build_knn_graph(bag_at(vec![[0, 0], [256, 0], [512, 0]]), 8).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 2), (1, 0), (1, 2), (2, 1), (2, 0)]);
    }

    #[test]
    fn grid_center_has_eight_surrounding_cells() {
        let coords: Vec<[i32; 2]> = (0..25).map(|i| [(i % 5) * 256, (i / 5) * 256]).collect();
        let g = build_knn_graph(bag_at(coords.clone()), 8).unwrap();
        let mut center: Vec<u32> = g.edges().iter().filter(|e| e.0 == 12).map(|e| e.1).collect();
        center.sort();
        assert_eq!(center, vec![6, 7, 8, 11, 13, 16, 17, 18]);
        assert_eq!(g.edges(), brute_knn(&coords, 8).as_slice());
    }

    #[test]
    fn csv_roundtrip() {
        let coords: Vec<[i32; 2]> = (0..9).map(|i| [(i % 3) * 256, (i / 3) * 256]).collect();
        let g = build_knn_graph(bag_at(coords), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("graph.csv");
        write_graph_csv(&g, &p).unwrap();
        assert_eq!(read_graph_csv(&p).unwrap(), g.edges());
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(SlideGraph::from_edges(bag_at(vec![[0, 0], [1, 1]]), 1, vec![(0, 0)]).is_err());
        assert!(SlideGraph::from_edges(bag_at(vec![[0, 0], [1, 1]]), 1, vec![(0, 2)]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn matches_brute_force(
            pts in proptest::collection::vec((0i32..40, 0i32..40), 1..300),
            k in 1usize..12,
            shift in (-5000i32..5000, -5000i32..5000),
        ) {
            // small lattice so duplicates and distance ties are common
            let coords: Vec<[i32; 2]> = pts.iter().map(|&(x, y)| [x * 256, y * 256]).collect();
            let g = build_knn_graph(bag_at(coords.clone()), k).unwrap();
            let n = coords.len();
            let expected = brute_knn(&coords, k);
            prop_assert_eq!(g.edges(), expected.as_slice());
            for i in 0..n as u32 {
                prop_assert_eq!(g.edges().iter().filter(|e| e.0 == i).count(), k.min(n - 1));
            }
            let moved: Vec<[i32; 2]> = coords.iter().map(|c| [c[0] + shift.0, c[1] + shift.1]).collect();
            let g2 = build_knn_graph(bag_at(moved), k).unwrap();
            prop_assert_eq!(g.edges(), g2.edges());
        }
    }
}

//! Finite weighted graphs with an absorbing boundary.
//!
//! A [`GraphSpace`] plays the role of the metric measure space: vertices
//! carry a positive measure, edges carry positive symmetric weights, the hop
//! metric is the distance, and a distinguished set of boundary vertices acts
//! as the absorbing (Martin) boundary.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default cap on the number of vertices a builder will allocate.
pub const DEFAULT_MAX_VERTICES: usize = 1 << 22;

/// Dense vertex index in `[0, |V|)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VertexId(pub usize);

impl VertexId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug)]
pub struct GraphSpace<T> {
    adjacency: Vec<Vec<(usize, T)>>,
    interior: Vec<bool>,
    measure: Vec<T>,
    root: usize,
    parent: Vec<Option<usize>>,
}

impl<T: Real> GraphSpace<T> {
    /// Builds a graph from an undirected edge list.
    ///
    /// Every edge is inserted in both directions with the same weight.
    /// `root` must be an interior vertex; it doubles as the base point of
    /// the Martin kernel. The measure defaults to counting measure.
    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize, T)],
        boundary: &[usize],
        root: usize,
        measure: Option<Vec<T>>,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Graph("empty vertex set".into()));
        }
        let mut adjacency: Vec<Vec<(usize, T)>> = vec![Vec::new(); n];
        for &(u, v, w) in edges {
            if u >= n || v >= n {
                return Err(Error::Graph(format!("edge ({u},{v}) references a vertex ≥ {n}")));
            }
            if u == v {
                return Err(Error::Graph(format!("self-loop at vertex {u}")));
            }
            if !(w > T::zero()) || !w.is_finite() {
                return Err(Error::Graph(format!("edge ({u},{v}) has non-positive weight {w}")));
            }
            if adjacency[u].iter().any(|&(y, _)| y == v) {
                return Err(Error::Graph(format!("duplicate edge ({u},{v})")));
            }
            adjacency[u].push((v, w));
            adjacency[v].push((u, w));
        }
        for nbrs in &mut adjacency {
            nbrs.sort_by_key(|&(y, _)| y);
        }
        let mut interior = vec![true; n];
        for &b in boundary {
            if b >= n {
                return Err(Error::Graph(format!("boundary vertex {b} out of range")));
            }
            interior[b] = false;
        }
        let measure = match measure {
            Some(m) if m.len() != n => {
                return Err(Error::Dimension { expected: n, got: m.len() })
            }
            Some(m) => m,
            None => vec![T::one(); n],
        };
        if let Some(x) = measure.iter().position(|&m| !(m > T::zero()) || !m.is_finite()) {
            return Err(Error::Graph(format!("measure at vertex {x} is not positive")));
        }
        if root >= n || !interior[root] {
            return Err(Error::Graph(format!("root {root} must be an interior vertex")));
        }
        let parent = bfs_parents(&adjacency, root);
        let g = GraphSpace { adjacency, interior, measure, root, parent };
        g.validate()?;
        Ok(g)
    }

    /// Rooted (q+1)-regular tree truncated at hop distance `radius`.
    ///
    /// Vertices are numbered in breadth-first order with the root at 0; the
    /// sphere of radius `radius` is the boundary.
    pub fn regular_tree(q: usize, radius: usize, max_vertices: usize) -> Result<Self> {
        if q < 1 || radius < 1 {
            return Err(Error::InvalidArgument(format!(
                "regular tree needs q ≥ 1 and radius ≥ 1, got q={q}, radius={radius}"
            )));
        }
        let mut count: usize = 1;
        let mut sphere: usize = q + 1;
        for _ in 0..radius {
            count = count.saturating_add(sphere);
            if count > max_vertices {
                return Err(Error::Capacity { vertices: count, max: max_vertices });
            }
            sphere = sphere.saturating_mul(q);
        }

        let mut edges = Vec::with_capacity(count - 1);
        let mut depth = vec![0usize];
        let mut frontier = vec![0usize];
        for d in 1..=radius {
            let mut next = Vec::with_capacity(frontier.len() * q);
            for &v in &frontier {
                let kids = if v == 0 { q + 1 } else { q };
                for _ in 0..kids {
                    let u = depth.len();
                    depth.push(d);
                    edges.push((v, u, T::one()));
                    next.push(u);
                }
            }
            frontier = next;
        }
        let boundary: Vec<usize> = (0..depth.len()).filter(|&v| depth[v] == radius).collect();
        Self::from_edges(depth.len(), &edges, &boundary, 0, None)
    }

    /// Path on `n ≥ 3` vertices with both endpoints absorbing.
    ///
    /// The root (base point) is the middle vertex `(n-1)/2`.
    pub fn path(n: usize) -> Result<Self> {
        if n < 3 {
            return Err(Error::InvalidArgument(format!("path needs n ≥ 3, got {n}")));
        }
        let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1, T::one())).collect();
        Self::from_edges(n, &edges, &[0, n - 1], (n - 1) / 2, None)
    }

    /// Parses an edge-list description.
    ///
    /// Format, one directive per line (`#` starts a comment):
    ///
    /// ```text
    /// u v weight          # undirected edge
    /// boundary a b c ...  # boundary vertices (may repeat)
    /// root r              # base point, defaults to the first interior vertex
    /// measure x m         # μ(x) = m, defaults to 1
    /// ```
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        let mut boundary = Vec::new();
        let mut root = None;
        let mut measure_overrides = Vec::new();
        let mut n = 0usize;
        let bad = |lineno: usize, line: &str| Error::Graph(format!("line {}: cannot parse `{line}`", lineno + 1));
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "boundary" => {
                    for t in &toks[1..] {
                        let b: usize = t.parse().map_err(|_| bad(lineno, line))?;
                        n = n.max(b + 1);
                        boundary.push(b);
                    }
                }
                "root" if toks.len() == 2 => {
                    root = Some(toks[1].parse::<usize>().map_err(|_| bad(lineno, line))?);
                }
                "measure" if toks.len() == 3 => {
                    let x: usize = toks[1].parse().map_err(|_| bad(lineno, line))?;
                    let m: f64 = toks[2].parse().map_err(|_| bad(lineno, line))?;
                    n = n.max(x + 1);
                    measure_overrides.push((x, T::lit(m)));
                }
                _ if toks.len() == 3 => {
                    let u: usize = toks[0].parse().map_err(|_| bad(lineno, line))?;
                    let v: usize = toks[1].parse().map_err(|_| bad(lineno, line))?;
                    let w: f64 = toks[2].parse().map_err(|_| bad(lineno, line))?;
                    n = n.max(u + 1).max(v + 1);
                    edges.push((u, v, T::lit(w)));
                }
                _ => return Err(bad(lineno, line)),
            }
        }
        let measure = if measure_overrides.is_empty() {
            None
        } else {
            let mut m = vec![T::one(); n];
            for (x, v) in measure_overrides {
                m[x] = v;
            }
            Some(m)
        };
        let root = match root {
            Some(r) => r,
            None => (0..n)
                .find(|v| !boundary.contains(v))
                .ok_or_else(|| Error::Graph("no interior vertex".into()))?,
        };
        Self::from_edges(n, &edges, &boundary, root, measure)
    }

    pub fn load_edge_list(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Graph(format!("{}: {e}", path.display())))?;
        Self::parse_edge_list(&text)
    }

    /// Replaces the vertex measure.
    pub fn with_measure(mut self, measure: Vec<T>) -> Result<Self> {
        if measure.len() != self.n_vertices() {
            return Err(Error::Dimension { expected: self.n_vertices(), got: measure.len() });
        }
        if measure.iter().any(|&m| !(m > T::zero()) || !m.is_finite()) {
            return Err(Error::Graph("measure must be positive".into()));
        }
        self.measure = measure;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        for (x, nbrs) in self.adjacency.iter().enumerate() {
            for &(y, w) in nbrs {
                match self.weight(VertexId(y), VertexId(x)) {
                    Some(w2) if w2 == w => {}
                    _ => return Err(Error::Graph(format!("asymmetric edge ({x},{y})"))),
                }
            }
            if self.interior[x] && nbrs.is_empty() {
                return Err(Error::Graph(format!("isolated interior vertex {x}")));
            }
        }
        // every interior vertex reachable from the root through interior vertices
        let n = self.n_vertices();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.root]);
        seen[self.root] = true;
        while let Some(x) = queue.pop_front() {
            for &(y, _) in &self.adjacency[x] {
                if self.interior[y] && !seen[y] {
                    seen[y] = true;
                    queue.push_back(y);
                }
            }
        }
        if let Some(x) = (0..n).find(|&x| self.interior[x] && !seen[x]) {
            return Err(Error::Graph(format!(
                "interior vertex {x} is not connected to the root through the interior"
            )));
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.adjacency.len()
    }

    pub fn vertices(&self) -> impl Iterator<Item = VertexId> + '_ {
        (0..self.n_vertices()).map(VertexId)
    }

    pub fn is_interior(&self, x: VertexId) -> bool {
        self.interior[x.0]
    }

    pub fn interior_mask(&self) -> &[bool] {
        &self.interior
    }

    /// Interior vertices in increasing id order.
    pub fn interior_vertices(&self) -> Vec<VertexId> {
        self.vertices().filter(|&x| self.interior[x.0]).collect()
    }

    /// Boundary vertices in increasing id order.
    pub fn boundary_vertices(&self) -> Vec<VertexId> {
        self.vertices().filter(|&x| !self.interior[x.0]).collect()
    }

    pub fn has_boundary(&self) -> bool {
        self.interior.iter().any(|&i| !i)
    }

    pub fn root(&self) -> VertexId {
        VertexId(self.root)
    }

    pub fn neighbors(&self, x: VertexId) -> &[(usize, T)] {
        &self.adjacency[x.0]
    }

    pub fn degree(&self, x: VertexId) -> usize {
        self.adjacency[x.0].len()
    }

    pub fn weight(&self, x: VertexId, y: VertexId) -> Option<T> {
        self.adjacency[x.0]
            .binary_search_by_key(&y.0, |&(v, _)| v)
            .ok()
            .map(|i| self.adjacency[x.0][i].1)
    }

    /// Total incident weight W(x).
    pub fn total_weight(&self, x: VertexId) -> T {
        self.adjacency[x.0].iter().map(|&(_, w)| w).sum()
    }

    pub fn measure(&self, x: VertexId) -> T {
        self.measure[x.0]
    }

    pub fn measures(&self) -> &[T] {
        &self.measure
    }

    /// Hop distances from `x` to every vertex (`None` when unreachable).
    pub fn distances_from(&self, x: VertexId) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n_vertices()];
        dist[x.0] = Some(0);
        let mut queue = VecDeque::from([x.0]);
        while let Some(v) = queue.pop_front() {
            let d = dist[v].unwrap();
            for &(y, _) in &self.adjacency[v] {
                if dist[y].is_none() {
                    dist[y] = Some(d + 1);
                    queue.push_back(y);
                }
            }
        }
        dist
    }

    pub fn distance(&self, x: VertexId, y: VertexId) -> Option<usize> {
        self.distances_from(x)[y.0]
    }

    /// Children of `x` in the breadth-first tree rooted at the root, in id order.
    pub fn children(&self, x: VertexId) -> Vec<VertexId> {
        self.adjacency[x.0]
            .iter()
            .filter(|&&(y, _)| self.parent[y] == Some(x.0))
            .map(|&(y, _)| VertexId(y))
            .collect()
    }

    /// Whether every interior edge pair satisfies x∼y ⇔ y∼x with equal weights.
    pub fn is_symmetric(&self) -> bool {
        self.adjacency.iter().enumerate().all(|(x, nbrs)| {
            nbrs.iter().all(|&(y, w)| self.weight(VertexId(y), VertexId(x)) == Some(w))
        })
    }
}

fn bfs_parents<T>(adjacency: &[Vec<(usize, T)>], root: usize) -> Vec<Option<usize>> {
    let mut parent = vec![None; adjacency.len()];
    let mut seen = vec![false; adjacency.len()];
    seen[root] = true;
    let mut queue = VecDeque::from([root]);
    while let Some(x) = queue.pop_front() {
        for &(y, _) in &adjacency[x] {
            if !seen[y] {
                seen[y] = true;
                parent[y] = Some(x);
                queue.push_back(y);
            }
        }
    }
    parent
}

/// A measure- and weight-preserving permutation of the vertices that maps
/// interior to interior and boundary to boundary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Automorphism {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Automorphism {
    pub fn identity(n: usize) -> Self {
        Automorphism { forward: (0..n).collect(), inverse: (0..n).collect() }
    }

    /// Validates `permutation` (image of vertex i at position i) against `g`.
    pub fn new<T: Real>(g: &GraphSpace<T>, permutation: Vec<usize>) -> Result<Self> {
        let n = g.n_vertices();
        if permutation.len() != n {
            return Err(Error::Dimension { expected: n, got: permutation.len() });
        }
        let mut inverse = vec![usize::MAX; n];
        for (x, &y) in permutation.iter().enumerate() {
            if y >= n || inverse[y] != usize::MAX {
                return Err(Error::Graph("automorphism is not a bijection".into()));
            }
            inverse[y] = x;
        }
        let a = Automorphism { forward: permutation, inverse };
        for x in g.vertices() {
            let ax = a.apply(x);
            if g.is_interior(x) != g.is_interior(ax) {
                return Err(Error::Graph(format!("vertex {x} changes interior/boundary type")));
            }
            if g.measure(x) != g.measure(ax) {
                return Err(Error::Graph(format!("measure not preserved at vertex {x}")));
            }
            if g.degree(x) != g.degree(ax) {
                return Err(Error::Graph(format!("degree not preserved at vertex {x}")));
            }
            for &(y, w) in g.neighbors(x) {
                if g.weight(ax, a.apply(VertexId(y))) != Some(w) {
                    return Err(Error::Graph(format!("edge ({x},{y}) not preserved")));
                }
            }
        }
        Ok(a)
    }

    #[inline]
    pub fn apply(&self, x: VertexId) -> VertexId {
        VertexId(self.forward[x.0])
    }

    #[inline]
    pub fn apply_inverse(&self, x: VertexId) -> VertexId {
        VertexId(self.inverse[x.0])
    }

    pub fn inverse(&self) -> Automorphism {
        Automorphism { forward: self.inverse.clone(), inverse: self.forward.clone() }
    }

    /// `self ∘ other`, i.e. apply `other` first.
    pub fn compose(&self, other: &Automorphism) -> Automorphism {
        let forward: Vec<usize> = other.forward.iter().map(|&y| self.forward[y]).collect();
        let mut inverse = vec![0; forward.len()];
        for (x, &y) in forward.iter().enumerate() {
            inverse[y] = x;
        }
        Automorphism { forward, inverse }
    }

    pub fn is_identity(&self) -> bool {
        self.forward.iter().enumerate().all(|(x, &y)| x == y)
    }

    pub fn permutation(&self) -> &[usize] {
        &self.forward
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Action on vertex functions: `(a·φ)(x) = φ(a⁻¹x)`.
    pub fn push_field<T: Copy>(&self, field: &[T]) -> Vec<T> {
        (0..field.len()).map(|x| field[self.inverse[x]]).collect()
    }

    /// Checks d(a(x), a(y)) = d(x, y) for every pair of vertices.
    pub fn preserves_distances<T: Real>(&self, g: &GraphSpace<T>) -> bool {
        g.vertices().all(|x| {
            let dx = g.distances_from(x);
            let dax = g.distances_from(self.apply(x));
            g.vertices().all(|y| dx[y.0] == dax[self.apply(y).0])
        })
    }
}

/// Exchanges the subtrees hanging off two children of the root.
///
/// Children are indexed in increasing vertex-id order. Descendants are
/// matched level by level in the same order; the resulting permutation is
/// validated as an automorphism.
pub fn tree_automorphism<T: Real>(g: &GraphSpace<T>, swap: (usize, usize)) -> Result<Automorphism> {
    let (i, j) = swap;
    let kids = g.children(g.root());
    if i >= kids.len() || j >= kids.len() {
        return Err(Error::InvalidArgument(format!(
            "root has {} children, cannot swap ({i},{j})",
            kids.len()
        )));
    }
    let mut perm: Vec<usize> = (0..g.n_vertices()).collect();
    if i != j {
        let mut stack = vec![(kids[i], kids[j])];
        while let Some((a, b)) = stack.pop() {
            perm[a.0] = b.0;
            perm[b.0] = a.0;
            let (ca, cb) = (g.children(a), g.children(b));
            if ca.len() != cb.len() {
                return Err(Error::NonIsomorphicSwap(i, j));
            }
            stack.extend(ca.into_iter().zip(cb));
        }
    }
    Automorphism::new(g, perm).map_err(|_| Error::NonIsomorphicSwap(i, j))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(q: usize, r: usize) -> GraphSpace<f64> {
        GraphSpace::regular_tree(q, r, DEFAULT_MAX_VERTICES).unwrap()
    }

    #[test]
    fn tree_sphere_counts() {
        for (q, r, n, nb) in [(2, 2, 10, 6), (1, 3, 7, 2), (3, 3, 53, 36)] {
            let g = tree(q, r);
            assert_eq!(g.n_vertices(), n);
            assert_eq!(g.boundary_vertices().len(), nb);
            assert!(g.is_symmetric());
        }
    }

    #[test]
    fn degree_two_tree_is_a_path() {
        let g = tree(1, 3);
        assert!(g.vertices().all(|x| g.degree(x) <= 2));
        let ends: Vec<_> = g.vertices().filter(|&x| g.degree(x) == 1).collect();
        assert_eq!(ends, g.boundary_vertices());
        assert_eq!(g.distance(ends[0], ends[1]), Some(6));
    }

    #[test]
    fn capacity_is_enforced() {
        let err = GraphSpace::<f64>::regular_tree(3, 10, 1000).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(GraphSpace::<f64>::regular_tree(0, 2, 100).is_err());
        assert!(GraphSpace::<f64>::regular_tree(2, 0, 100).is_err());
        assert!(GraphSpace::<f64>::path(2).is_err());
    }

    #[test]
    fn small_paths() {
        let g = GraphSpace::<f64>::path(3).unwrap();
        assert_eq!(g.interior_vertices(), vec![VertexId(1)]);
        assert_eq!(g.neighbors(VertexId(1)).len(), 2);
        assert!(g.neighbors(VertexId(1)).iter().all(|&(y, _)| !g.is_interior(VertexId(y))));
        assert_eq!(g.distance(VertexId(0), VertexId(2)), Some(2));

        let g = GraphSpace::<f64>::path(5).unwrap();
        assert_eq!(g.interior_vertices().len(), 3);
        assert_eq!(g.root(), VertexId(2));
    }

    #[test]
    fn edge_list_round_trip() {
        let text = "# square with a tail\n0 1 1.0\n1 2 2.0\n2 3 1.0\n3 0 1.0\n3 4 0.5\nboundary 4\nroot 1\nmeasure 2 3.0\n";
        let g = GraphSpace::<f64>::parse_edge_list(text).unwrap();
        assert_eq!(g.n_vertices(), 5);
        assert_eq!(g.boundary_vertices(), vec![VertexId(4)]);
        assert_eq!(g.root(), VertexId(1));
        assert_eq!(g.weight(VertexId(2), VertexId(1)), Some(2.0));
        assert_eq!(g.measure(VertexId(2)), 3.0);
        assert!(GraphSpace::<f64>::parse_edge_list("0 1 x\n").is_err());
        assert!(GraphSpace::<f64>::parse_edge_list("0 1 -1\nboundary 1\n").is_err());
    }

    #[test]
    fn disconnected_interior_is_rejected() {
        // 0-1-2 and 3-4 with boundary {2, 4}: vertex 3 is cut off from root 0
        let edges = [(0, 1, 1.0), (1, 2, 1.0), (3, 4, 1.0)];
        let err = GraphSpace::from_edges(5, &edges, &[2, 4], 0, None).unwrap_err();
        assert!(matches!(err, Error::Graph(_)));
        // interior isolated vertex
        let edges = [(0, 1, 1.0)];
        assert!(GraphSpace::from_edges(3, &edges, &[1], 0, None).is_err());
    }

    #[test]
    fn subtree_swap_is_an_involution_fixing_the_root() {
        let g = tree(2, 2);
        let a = tree_automorphism(&g, (0, 1)).unwrap();
        assert_eq!(a.apply(g.root()), g.root());
        assert!(!a.is_identity());
        assert!(a.compose(&a).is_identity());
        assert_eq!(a.inverse(), a);
        // boundary set preserved exactly
        for x in g.vertices() {
            assert_eq!(g.is_interior(x), g.is_interior(a.apply(x)));
        }
        let mut image: Vec<_> = g.boundary_vertices().into_iter().map(|b| a.apply(b)).collect();
        image.sort();
        assert_eq!(image, g.boundary_vertices());
    }

    #[test]
    fn automorphisms_preserve_hop_distance() {
        for (q, r) in [(2, 2), (2, 4), (3, 3)] {
            let g = tree(q, r);
            for swap in [(0, 1), (1, 2), (0, 2)] {
                let a = tree_automorphism(&g, swap).unwrap();
                assert!(a.preserves_distances(&g));
            }
        }
        let g = GraphSpace::<f64>::path(7).unwrap();
        let reflection = tree_automorphism(&g, (0, 1)).unwrap();
        assert_eq!(reflection.apply(VertexId(0)), VertexId(6));
        assert!(reflection.preserves_distances(&g));
    }

    #[test]
    fn non_isomorphic_swap_is_rejected() {
        // root 0 with children 1 (leafy subtree) and 2 (bare)
        let edges = [(0, 1, 1.0), (0, 2, 1.0), (1, 3, 1.0), (1, 4, 1.0)];
        let g = GraphSpace::<f64>::from_edges(5, &edges, &[2, 3, 4], 0, None).unwrap();
        assert!(matches!(tree_automorphism(&g, (0, 1)), Err(Error::NonIsomorphicSwap(0, 1))));
        // even path: the two sides of the root differ in length
        let g = GraphSpace::<f64>::path(6).unwrap();
        assert!(tree_automorphism(&g, (0, 1)).is_err());
    }

    #[test]
    fn push_field_follows_the_inverse() {
        let g = tree(2, 2);
        let a = tree_automorphism(&g, (0, 1)).unwrap();
        let field: Vec<f64> = (0..g.n_vertices()).map(|x| x as f64).collect();
        let pushed = a.push_field(&field);
        for x in g.vertices() {
            assert_eq!(pushed[a.apply(x).0], field[x.0]);
        }
    }
}

//! Exact kNN and radius queries over a static point set.
//!
//! A kd-tree with median splits. Distances are compared as squared
//! Euclidean norms and ties are resolved by the lower point id, so every
//! query returns the same result as a brute-force scan.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Vec3};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub distance: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<[f64; 3]>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        Self::from_points(cloud.points())
    }

    pub fn from_points(points: &[Vec3]) -> Self {
        let points: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        if !points.is_empty() {
            let n = points.len();
            build_node(&points, &mut order, 0, n, &mut nodes);
        }
        Self {
            points,
            order,
            nodes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points, ascending by `(distance, id)`.
    pub fn knn(&self, query: &Vec3, k: usize) -> Result<Vec<Neighbor>> {
        if k > self.len() {
            return Err(Error::TooManyNeighbors {
                requested: k,
                available: self.len(),
            });
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let q = [query.x, query.y, query.z];
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_node(0, &q, k, &mut heap);
        let mut found = heap.into_vec();
        found.sort();
        Ok(found
            .into_iter()
            .map(|c| Neighbor {
                id: c.id,
                distance: c.dist2.sqrt(),
            })
            .collect())
    }

    pub fn nearest(&self, query: &Vec3) -> Option<Neighbor> {
        if self.is_empty() {
            return None;
        }
        self.knn(query, 1).ok().and_then(|v| v.into_iter().next())
    }

    fn knn_node(&self, node: usize, q: &[f64; 3], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    let c = Candidate {
                        dist2: dist2(&self.points[id], q),
                        id,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.knn_node(near, q, k, heap);
                // `<=` keeps equal-distance candidates with lower ids reachable.
                if heap.len() < k || diff * diff <= heap.peek().expect("nonempty").dist2 {
                    self.knn_node(far, q, k, heap);
                }
            }
        }
    }

    /// Ids with distance ≤ `r`, sorted by id.
    pub fn radius_query(&self, query: &Vec3, r: f64) -> Vec<usize> {
        if self.is_empty() || !(r >= 0.0) {
            return Vec::new();
        }
        let q = [query.x, query.y, query.z];
        let mut out = Vec::new();
        self.radius_node(0, &q, r * r, &mut out);
        out.sort_unstable();
        out
    }

    fn radius_node(&self, node: usize, q: &[f64; 3], r2: f64, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                out.extend(
                    self.order[start..end]
                        .iter()
                        .copied()
                        .filter(|&id| dist2(&self.points[id], q) <= r2),
                );
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.radius_node(near, q, r2, out);
                if diff * diff <= r2 {
                    self.radius_node(far, q, r2, out);
                }
            }
        }
    }
}

fn build_node(
    points: &[[f64; 3]],
    order: &mut [usize],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> usize {
    let slot = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return slot;
    }
    let slice = &mut order[start..end];
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &id in slice.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[id][a]);
            hi[a] = hi[a].max(points[id][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    if hi[axis] - lo[axis] <= 0.0 {
        // all points coincide
        nodes.push(Node::Leaf { start, end });
        return slot;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let value = points[slice[mid]][axis];
    // left gets coordinates ≤ value; everything at index ≥ mid is ≥ value
    nodes.push(Node::Leaf { start, end });
    let left = build_node(points, order, start, start + mid, nodes);
    let right = build_node(points, order, start + mid, end, nodes);
    nodes[slot] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    slot
}

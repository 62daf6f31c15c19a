//! Exact nearest-neighbour and radius queries on 2D points.

use crate::scalar::Scalar;

const LEAF: usize = 8;

/// Static 2D k-d tree. Queries are exact; ties between equidistant points
/// resolve to the lowest original index.
#[derive(Debug, Clone)]
pub struct KdTree<S: Scalar = f64> {
    pts: Vec<[S; 2]>,
    order: Vec<usize>,
    nodes: Vec<Node<S>>,
}

#[derive(Debug, Clone)]
enum Node<S> {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: S, left: usize, right: usize },
}

#[inline]
pub fn dist2<S: Scalar>(a: [S; 2], b: [S; 2]) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

impl<S: Scalar> KdTree<S> {
    pub fn new(points: &[[S; 2]]) -> Self {
        let mut tree = Self { pts: points.to_vec(), order: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = ([S::infinity(); 2], [S::neg_infinity(); 2]);
        for &i in &self.order[start..end] {
            for a in 0..2 {
                lo[a] = lo[a].min(self.pts[i][a]);
                hi[a] = hi[a].max(self.pts[i][a]);
            }
        }
        let axis = if hi[0] - lo[0] >= hi[1] - lo[1] { 0 } else { 1 };
        let mid = start + (end - start) / 2;
        let pts = &self.pts;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            pts[a][axis].partial_cmp(&pts[b][axis]).unwrap().then(a.cmp(&b))
        });
        let value = self.pts[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Index and squared distance of the closest point, `None` when empty.
    pub fn nearest(&self, q: [S; 2]) -> Option<(usize, S)> {
        if self.pts.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, S::infinity());
        self.nearest_in(0, q, &mut best);
        Some(best)
    }

    fn nearest_in(&self, node: usize, q: [S; 2], best: &mut (usize, S)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(self.pts[i], q);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < S::zero() { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                // `<=` so that equidistant points with lower index are still found
                if diff * diff <= best.1 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// All indices with `‖p − q‖ ≤ r`, ascending.
    pub fn within(&self, q: [S; 2], r: S) -> Vec<usize> {
        let mut out = Vec::new();
        if !self.pts.is_empty() {
            self.within_in(0, q, r * r, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn within_in(&self, node: usize, q: [S; 2], r2: S, out: &mut Vec<usize>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                out.extend(self.order[start..end].iter().copied().filter(|&i| dist2(self.pts[i], q) <= r2));
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                if diff <= S::zero() || diff * diff <= r2 {
                    self.within_in(left, q, r2, out);
                }
                if diff >= S::zero() || diff * diff <= r2 {
                    self.within_in(right, q, r2, out);
                }
            }
        }
    }
}

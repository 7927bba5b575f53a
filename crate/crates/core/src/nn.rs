//! Exact nearest-neighbour queries over a fixed point set.

use crate::scalar::Scalar;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node<T> {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: T, left: usize, right: usize },
}

/// A k-d tree answering Euclidean nearest-neighbour queries.
///
/// Ties in distance resolve to the lowest point index, so results agree with a
/// linear scan that keeps the first minimum.
#[derive(Debug, Clone)]
pub struct KdTree<T> {
    points: Vec<Vec<T>>,
    order: Vec<usize>,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> KdTree<T> {
    /// Panics if `points` is empty.
    pub fn new(points: Vec<Vec<T>>) -> Self {
        assert!(!points.is_empty(), "k-d tree needs at least one point");
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        let n = tree.points.len();
        tree.build(0, n);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<T>] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let d = self.points[0].len();
        let mut dim = 0;
        let mut spread = T::neg_infinity();
        for i in 0..d {
            let (lo, hi) = self.order[start..end].iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &k| {
                (lo.min(self.points[k][i]), hi.max(self.points[k][i]))
            });
            if hi - lo > spread {
                spread = hi - lo;
                dim = i;
            }
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][dim].partial_cmp(&points[b][dim]).unwrap_or(std::cmp::Ordering::Equal)
        });
        let value = self.points[self.order[mid]][dim];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { dim, value, left, right };
        id
    }

    /// Index of the point nearest to `x`, with its squared distance.
    pub fn nearest(&self, x: &[T]) -> (usize, T) {
        let mut best = (usize::MAX, T::infinity());
        self.search(0, x, &mut best);
        best
    }

    fn search(&self, node: usize, x: &[T], best: &mut (usize, T)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &k in &self.order[start..end] {
                    let d2 = squared_distance(&self.points[k], x);
                    if d2 < best.1 || (d2 == best.1 && k < best.0) {
                        *best = (k, d2);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = x[dim] - value;
                let (near, far) = if diff < T::zero() { (left, right) } else { (right, left) };
                self.search(near, x, best);
                if diff * diff <= best.1 {
                    self.search(far, x, best);
                }
            }
        }
    }
}

pub fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&p, &q)| (p - q) * (p - q)).sum()
}

/// Linear scan returning the first index attaining the minimum distance.
pub fn nearest_linear<T: Scalar>(points: &[Vec<T>], x: &[T]) -> usize {
    let mut best = (0, T::infinity());
    for (k, p) in points.iter().enumerate() {
        let d2 = squared_distance(p, x);
        if d2 < best.1 {
            best = (k, d2);
        }
    }
    best.0
}

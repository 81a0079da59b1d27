//! Exact Euclidean nearest-neighbor search over a fixed point set.
//!
//! A bucketed k-d tree split at the median of the widest axis. Queries are
//! exact: the result minimizes `(squared distance, point index)`
//! lexicographically, so duplicate points resolve to the lowest index.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

const LEAF_SIZE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub point: Vec3,
    pub dist2: f64,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
pub struct NearestNeighborIndex {
    /// Points stored in leaf order.
    points: Vec<Vec3>,
    /// Original index of each stored point.
    ids: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

impl NearestNeighborIndex {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build_node(points, &mut order, 0, &mut nodes);
        Ok(Self {
            points: order.iter().map(|&i| points[i]).collect(),
            ids: order,
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn nearest(&self, q: &Vec3) -> Neighbor {
        let mut best = (f64::INFINITY, usize::MAX, 0usize);
        self.search(0, q, &mut best);
        Neighbor {
            index: best.1,
            point: self.points[best.2],
            dist2: best.0,
        }
    }

    /// Elementwise identical to [`nearest`](Self::nearest); runs in parallel.
    pub fn nearest_batch(&self, qs: &[Vec3]) -> Vec<Neighbor> {
        qs.par_iter().with_min_len(256).map(|q| self.nearest(q)).collect()
    }

    /// Original indices of all points within `radius` (inclusive) of `q`.
    pub fn within_radius(&self, q: &Vec3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let r2 = radius * radius;
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match self.nodes[n] {
                Node::Leaf { start, end } => {
                    for s in start..end {
                        if dist2(q, &self.points[s]) <= r2 {
                            out.push(self.ids[s]);
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
                    if diff <= radius {
                        stack.push(left);
                    }
                    if diff >= -radius {
                        stack.push(right);
                    }
                }
            }
        }
        out
    }

    /// `best` is (dist2, original id, storage slot).
    fn search(&self, node: usize, q: &Vec3, best: &mut (f64, usize, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for s in start..end {
                    let d = dist2(q, &self.points[s]);
                    let id = self.ids[s];
                    if d < best.0 || (d == best.0 && id < best.1) {
                        *best = (d, id, s);
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
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, best);
                // Equal-distance subtrees are still visited so ties resolve by index.
                if diff * diff <= best.0 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// Builds the subtree over `order[..]` whose storage begins at `offset`.
/// Left children hold coordinates `<= value`, right children `>= value`.
fn build_node(points: &[Vec3], order: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for a in 0..3 {
            lo[a] = lo[a].min(points[i][a]);
            hi[a] = hi[a].max(points[i][a]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    if hi[axis] - lo[axis] == 0.0 {
        // All points coincide.
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return id;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[order[mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (l, r) = order.split_at_mut(mid);
    let left = build_node(points, l, offset, nodes);
    let right = build_node(points, r, offset + mid, nodes);
    nodes[id] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[Vec3], q: &Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                )
            })
            .collect()
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(NearestNeighborIndex::build(&[]), Err(Error::EmptyIndex)));
    }

    #[test]
    fn single_point_answers_every_query() {
        let idx = NearestNeighborIndex::build(&[Vec3::new(1.0, 2.0, 3.0)]).unwrap();
        for q in [Vec3::zeros(), Vec3::new(-100.0, 5.0, 9.0)] {
            let n = idx.nearest(&q);
            assert_eq!(n.index, 0);
            assert_eq!(n.point, Vec3::new(1.0, 2.0, 3.0));
        }
    }

    #[test]
    fn simple_two_point_query() {
        let idx =
            NearestNeighborIndex::build(&[Vec3::new(1.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0)])
                .unwrap();
        let n = idx.nearest(&Vec3::zeros());
        assert_eq!((n.index, n.dist2), (0, 1.0));
        let n = idx.nearest(&Vec3::new(3.0, 0.0, 0.0));
        assert_eq!((n.index, n.dist2), (1, 0.0));
    }

    #[test]
    fn duplicates_resolve_to_lowest_index() {
        let mut pts = vec![Vec3::new(5.0, 5.0, 5.0); 40];
        pts.extend((0..40).map(|i| Vec3::new(i as f64, 0.0, 0.0)));
        pts.push(Vec3::new(0.0, 0.0, 0.0));
        let idx = NearestNeighborIndex::build(&pts).unwrap();
        assert_eq!(idx.nearest(&Vec3::new(5.0, 5.0, 5.1)).index, 0);
        assert_eq!(idx.nearest(&Vec3::new(0.0, 0.0, 0.0)).index, 40);
        // Equidistant between x = 2 and x = 3.
        assert_eq!(idx.nearest(&Vec3::new(2.5, 0.0, 0.0)).index, 42);
    }

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = cloud(&mut rng, 10_000, 20.0);
        let idx = NearestNeighborIndex::build(&pts).unwrap();
        for q in cloud(&mut rng, 1000, 25.0) {
            let n = idx.nearest(&q);
            let (bi, bd) = brute(&pts, &q);
            assert_eq!((n.index, n.dist2), (bi, bd));
        }
    }

    #[test]
    fn batch_equals_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = cloud(&mut rng, 5_000, 10.0);
        let idx = NearestNeighborIndex::build(&pts).unwrap();
        let qs = cloud(&mut rng, 100_000, 12.0);
        let batch = idx.nearest_batch(&qs);
        let seq: Vec<_> = qs.iter().map(|q| idx.nearest(q)).collect();
        assert_eq!(batch, seq);
        assert_eq!(idx.nearest_batch(&qs[..1]), vec![idx.nearest(&qs[0])]);
    }

    #[test]
    fn radius_query_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = cloud(&mut rng, 3_000, 5.0);
        let idx = NearestNeighborIndex::build(&pts).unwrap();
        for q in cloud(&mut rng, 50, 5.0) {
            let mut got = idx.within_radius(&q, 0.8);
            got.sort_unstable();
            let want: Vec<usize> = (0..pts.len())
                .filter(|&i| dist2(&pts[i], &q) <= 0.64)
                .collect();
            assert_eq!(got, want);
        }
    }


    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec3() -> impl Strategy<Value = Vec3> {
            (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
        }

        proptest! {
            #[test]
            fn nearest_is_exact(points in prop::collection::vec(vec3(), 1..300), queries in prop::collection::vec(vec3(), 1..20)) {
                let index = NearestNeighborIndex::build(&points).unwrap();
                let batch = index.nearest_batch(&queries);
                for (q, b) in queries.iter().zip(&batch) {
                    let (i, d) = brute(&points, q);
                    let n = index.nearest(q);
                    prop_assert_eq!(n.dist2, d);
                    prop_assert_eq!(n.index, i);
                    prop_assert_eq!(b, &n);
                }
            }
        }
    }
}

//! Exact nearest-neighbor queries over 3D point sets via a median-split
//! KD-tree. Used by evaluation metrics and Gaussian initialization; every
//! query is exact, so results must match brute force bit for bit.

use nalgebra::Vector3;

struct Node {
    /// Index into `points`.
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

const NIL: i32 = -1;

/// Immutable KD-tree over a point list; queries return indices into the
/// original list plus Euclidean distances.
pub struct KdTree3 {
    points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
    root: i32,
}

impl KdTree3 {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
            root: NIL,
        };
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        tree.root = tree.build_rec(&mut order, 0);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_rec(&mut self, order: &mut [u32], depth: usize) -> i32 {
        if order.is_empty() {
            return NIL;
        }
        let axis = (depth % 3) as u8;
        let mid = order.len() / 2;
        // Median split; ties broken by original index for determinism.
        order.select_nth_unstable_by(mid, |&a, &b| {
            let ka = (self.points[a as usize][axis as usize], a);
            let kb = (self.points[b as usize][axis as usize], b);
            ka.partial_cmp(&kb).expect("finite coordinates")
        });
        let point = order[mid];
        let node_index = self.nodes.len() as i32;
        self.nodes.push(Node {
            point,
            axis,
            left: NIL,
            right: NIL,
        });
        let (lo, rest) = order.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build_rec(lo, depth + 1);
        let right = self.build_rec(hi, depth + 1);
        self.nodes[node_index as usize].left = left;
        self.nodes[node_index as usize].right = right;
        node_index
    }

    /// Index and distance of the nearest point to `query`; `None` on an
    /// empty tree. Ties resolve to the lowest index.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.nearest_rec(self.root, query, &mut best);
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    fn nearest_rec(&self, node: i32, query: &Vector3<f64>, best: &mut Option<(usize, f64)>) {
        if node == NIL {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        let better = match *best {
            None => true,
            Some((bi, bd2)) => d2 < bd2 || (d2 == bd2 && (n.point as usize) < bi),
        };
        if better {
            *best = Some((n.point as usize, d2));
        }
        let delta = query[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.nearest_rec(near, query, best);
        if best.map_or(true, |(_, bd2)| delta * delta <= bd2) {
            self.nearest_rec(far, query, best);
        }
    }

    /// The `k` nearest points, ordered by distance (ties by index).
    pub fn k_nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        if k == 0 {
            return Vec::new();
        }
        // Bounded best-list; fine for the small k used here.
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        self.k_nearest_rec(self.root, query, k, &mut best);
        best.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    }

    fn k_nearest_rec(
        &self,
        node: i32,
        query: &Vector3<f64>,
        k: usize,
        best: &mut Vec<(usize, f64)>,
    ) {
        if node == NIL {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        let key = (d2, n.point as usize);
        let pos = best.partition_point(|&(i, d)| (d, i) <= key);
        if pos < k {
            best.insert(pos, (n.point as usize, d2));
            best.truncate(k);
        }
        let delta = query[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.k_nearest_rec(near, query, k, best);
        let bound = if best.len() < k {
            f64::INFINITY
        } else {
            best[k - 1].1
        };
        if delta * delta <= bound {
            self.k_nearest_rec(far, query, k, best);
        }
    }

    /// Indices of all points within Euclidean `radius` of `query`
    /// (inclusive), in ascending index order.
    pub fn within_radius(&self, query: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.within_radius_rec(self.root, query, radius * radius, &mut out);
        out.sort_unstable();
        out
    }

    fn within_radius_rec(&self, node: i32, query: &Vector3<f64>, r2: f64, out: &mut Vec<usize>) {
        if node == NIL {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        if (p - query).norm_squared() <= r2 {
            out.push(n.point as usize);
        }
        let delta = query[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.within_radius_rec(near, query, r2, out);
        if delta * delta <= r2 {
            self.within_radius_rec(far, query, r2, out);
        }
    }
}

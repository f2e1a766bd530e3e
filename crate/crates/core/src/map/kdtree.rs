//! Minimal kd-tree over 3D points supporting radius-bounded nearest
//! neighbor and k-nearest-neighbor queries.

use crate::geometry::Vec3;

#[derive(Debug)]
struct Node {
    /// Index into the point array.
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

#[derive(Debug)]
pub struct KdTree {
    nodes: Vec<Node>,
    points: Vec<Vec3>,
    root: i32,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut indices: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            nodes: Vec::with_capacity(points.len()),
            points: points.to_vec(),
            root: -1,
        };
        let root = tree.build_rec(&mut indices);
        tree.root = root;
        tree
    }

    fn build_rec(&mut self, indices: &mut [u32]) -> i32 {
        if indices.is_empty() {
            return -1;
        }
        // Split along the widest dimension of the bounding box.
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for &i in indices.iter() {
            let p = self.points[i as usize];
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        let ext = hi - lo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = indices.len() / 2;
        indices.select_nth_unstable_by(mid, |&a, &b| {
            let va = self.points[a as usize][axis];
            let vb = self.points[b as usize][axis];
            va.partial_cmp(&vb).unwrap().then(a.cmp(&b))
        });
        let point = indices[mid];
        let node_idx = self.nodes.len() as i32;
        self.nodes.push(Node {
            point,
            axis: axis as u8,
            left: -1,
            right: -1,
        });
        let (left_slice, rest) = indices.split_at_mut(mid);
        let right_slice = &mut rest[1..];
        let left = self.build_rec(left_slice);
        let right = self.build_rec(right_slice);
        self.nodes[node_idx as usize].left = left;
        self.nodes[node_idx as usize].right = right;
        node_idx
    }

    /// Nearest point with distance <= radius, or None. Ties broken by the
    /// smaller point index.
    pub fn nearest_within(&self, query: &Vec3, radius: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        let mut best_d2 = radius * radius;
        self.nearest_rec(self.root, query, &mut best, &mut best_d2);
        best.map(|(i, d2)| (i, d2.sqrt()))
    }

    fn nearest_rec(
        &self,
        node: i32,
        query: &Vec3,
        best: &mut Option<(usize, f64)>,
        best_d2: &mut f64,
    ) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        let better = match best {
            None => d2 <= *best_d2,
            Some((bi, bd2)) => d2 < *bd2 || (d2 == *bd2 && (n.point as usize) < *bi),
        };
        if better {
            *best = Some((n.point as usize, d2));
            *best_d2 = d2;
        }
        let axis = n.axis as usize;
        let diff = query[axis] - p[axis];
        let (near, far) = if diff <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.nearest_rec(near, query, best, best_d2);
        if diff * diff <= *best_d2 {
            self.nearest_rec(far, query, best, best_d2);
        }
    }

    /// Indices of the k nearest points (including an exact-match point),
    /// sorted by ascending distance, ties by index.
    pub fn k_nearest(&self, query: &Vec3, k: usize) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        // (d2, index) max-heap emulated with a sorted vec; k is small.
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.knn_rec(self.root, query, k, &mut heap);
        heap.into_iter().map(|(_, i)| i).collect()
    }

    fn knn_rec(&self, node: i32, query: &Vec3, k: usize, heap: &mut Vec<(f64, usize)>) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        let entry = (d2, n.point as usize);
        let pos = heap.partition_point(|e| (e.0, e.1) < entry);
        heap.insert(pos, entry);
        if heap.len() > k {
            heap.pop();
        }
        let axis = n.axis as usize;
        let diff = query[axis] - p[axis];
        let (near, far) = if diff <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.knn_rec(near, query, k, heap);
        let bound = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.last().unwrap().0
        };
        if diff * diff <= bound {
            self.knn_rec(far, query, k, heap);
        }
    }
}

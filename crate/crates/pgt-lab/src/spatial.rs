//! Small k-d tree over 3D points for nearest-neighbour and radius queries.

use nalgebra::Point3;

#[derive(Clone, Debug)]
struct Node {
    /// Index into the point list.
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Balanced k-d tree storing a copy of the input points.
///
/// Queries return indices into the original slice. Construction and queries
/// are fully deterministic for a given input order.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Point3<f64>>,
    nodes: Vec<Node>,
    root: i32,
}

impl KdTree {
    pub fn build(points: &[Point3<f64>]) -> KdTree {
        let mut tree = KdTree { points: points.to_vec(), nodes: Vec::with_capacity(points.len()), root: -1 };
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        tree.root = tree.build_rec(&mut order);
        tree
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    fn build_rec(&mut self, order: &mut [u32]) -> i32 {
        if order.is_empty() {
            return -1;
        }
        // Split along the widest axis so elongated clouds stay balanced.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in order.iter() {
            let p = &self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut axis = 0;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[axis] - lo[axis] {
                axis = a;
            }
        }
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            let pa = self.points[a as usize][axis];
            let pb = self.points[b as usize][axis];
            pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
        });
        let point = order[mid];
        let (left_half, rest) = order.split_at_mut(mid);
        let right_half = &mut rest[1..];
        let left = self.build_rec(left_half);
        let right = self.build_rec(right_half);
        self.nodes.push(Node { point, axis: axis as u8, left, right });
        (self.nodes.len() - 1) as i32
    }

    /// Index and Euclidean distance of the nearest stored point.
    pub fn nearest(&self, query: &Point3<f64>) -> Option<(usize, f64)> {
        if self.root < 0 {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_rec(self.root, query, &mut best);
        Some((best.0, best.1.sqrt()))
    }

    fn nearest_rec(&self, node: i32, query: &Point3<f64>, best: &mut (usize, f64)) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        if d2 < best.1 || (d2 == best.1 && (n.point as usize) < best.0) {
            *best = (n.point as usize, d2);
        }
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        self.nearest_rec(near, query, best);
        if delta * delta < best.1 {
            self.nearest_rec(far, query, best);
        }
    }

    /// Indices of all points within `radius` of the query, ascending.
    pub fn within_radius(&self, query: &Point3<f64>, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if self.root >= 0 {
            self.radius_rec(self.root, query, radius, radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn radius_rec(&self, node: i32, query: &Point3<f64>, radius: f64, r2: f64, out: &mut Vec<usize>) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        if (p - query).norm_squared() <= r2 {
            out.push(n.point as usize);
        }
        let axis = n.axis as usize;
        let delta = query[axis] - p[axis];
        if delta - radius <= 0.0 {
            self.radius_rec(n.left, query, radius, r2, out);
        }
        if delta + radius >= 0.0 {
            self.radius_rec(n.right, query, radius, r2, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_cloud(n: usize, seed: u64) -> Vec<Point3<f64>> {
        let mut rng = crate::rng::stream(seed, "kdtree-test");
        (0..n).map(|_| Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect()
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let cloud = random_cloud(400, 3);
        let tree = KdTree::build(&cloud);
        let queries = random_cloud(50, 4);
        for q in &queries {
            let (bi, bd) = tree.nearest(q).unwrap();
            let (li, ld) = cloud
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .unwrap();
            assert_eq!(bi, li);
            assert!((bd - ld).abs() < 1e-12);
        }
    }

    #[test]
    fn radius_query_matches_linear_scan() {
        let cloud = random_cloud(300, 5);
        let tree = KdTree::build(&cloud);
        for q in &random_cloud(20, 6) {
            let got = tree.within_radius(q, 0.8);
            let want: Vec<usize> =
                cloud.iter().enumerate().filter(|(_, p)| (*p - q).norm() <= 0.8).map(|(i, _)| i).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn empty_tree_has_no_neighbours() {
        let tree = KdTree::build(&[]);
        assert!(tree.nearest(&Point3::origin()).is_none());
        assert!(tree.within_radius(&Point3::origin(), 1.0).is_empty());
    }
}

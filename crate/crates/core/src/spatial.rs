//! Spatial acceleration structures: a 3D KD-tree for exact nearest-neighbor
//! queries (TOC matching, outlier removal, cloud metrics) and an AABB tree for
//! exact closest-point-on-mesh queries.

use nalgebra::{Point3, Vector3};

use crate::geometry::TriMesh;

/// Static KD-tree over 3D points with `u32` payloads.
///
/// Nearest-neighbor results are exact; ties are broken towards the smallest
/// payload so queries are independent of build order.
pub struct KdTree {
    points: Vec<[f64; 3]>,
    payload: Vec<u32>,
    nodes: Vec<Node>,
    root: u32,
}

struct Node {
    axis: u8,
    split: f64,
    // Leaves store an index range; inner nodes store children.
    left: u32,
    right: u32,
    start: u32,
    end: u32,
}

const LEAF_SIZE: usize = 16;
const SENTINEL: u32 = u32::MAX;

impl KdTree {
    pub fn new(points: Vec<[f64; 3]>, payload: Vec<u32>) -> Self {
        assert_eq!(points.len(), payload.len());
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut tree = KdTree {
            points,
            payload,
            nodes: Vec::new(),
            root: SENTINEL,
        };
        if !tree.points.is_empty() {
            let n = order.len();
            tree.root = tree.build(&mut order, 0, n);
            // Re-order point storage to match the leaves for cache locality.
            let points: Vec<[f64; 3]> = order.iter().map(|&i| tree.points[i as usize]).collect();
            let payload: Vec<u32> = order.iter().map(|&i| tree.payload[i as usize]).collect();
            tree.points = points;
            tree.payload = payload;
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, order: &mut [u32], offset: usize, len: usize) -> u32 {
        if len <= LEAF_SIZE {
            self.nodes.push(Node {
                axis: 0,
                split: 0.0,
                left: SENTINEL,
                right: SENTINEL,
                start: offset as u32,
                end: (offset + len) as u32,
            });
            return (self.nodes.len() - 1) as u32;
        }
        // Split on the widest axis at the median.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in order[..len].iter() {
            let p = &self.points[i as usize];
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
            .unwrap();
        let mid = len / 2;
        order[..len].select_nth_unstable_by(mid, |&a, &b| {
            let pa = self.points[a as usize][axis];
            let pb = self.points[b as usize][axis];
            pa.partial_cmp(&pb).unwrap().then(a.cmp(&b))
        });
        let split = self.points[order[mid] as usize][axis];
        let node_idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            axis: axis as u8,
            split,
            left: SENTINEL,
            right: SENTINEL,
            start: 0,
            end: 0,
        });
        let (left_half, right_half) = order.split_at_mut(mid);
        let left = self.build(left_half, offset, mid);
        let right = self.build(right_half, offset + mid, len - mid);
        self.nodes[node_idx as usize].left = left;
        self.nodes[node_idx as usize].right = right;
        node_idx
    }

    /// Exact nearest neighbor: `(payload, squared distance)`.
    pub fn nearest(&self, query: &[f64; 3]) -> Option<(u32, f64)> {
        if self.is_empty() {
            return None;
        }
        let mut best = (SENTINEL, f64::INFINITY);
        self.nearest_rec(self.root, query, &mut best);
        Some((best.0, best.1))
    }

    fn nearest_rec(&self, node: u32, query: &[f64; 3], best: &mut (u32, f64)) {
        let n = &self.nodes[node as usize];
        if n.left == SENTINEL {
            for i in n.start..n.end {
                let p = &self.points[i as usize];
                let d2 = sq_dist(p, query);
                let id = self.payload[i as usize];
                if d2 < best.1 || (d2 == best.1 && id < best.0) {
                    *best = (id, d2);
                }
            }
            return;
        }
        let axis = n.axis as usize;
        let delta = query[axis] - n.split;
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.nearest_rec(near, query, best);
        if delta * delta <= best.1 {
            self.nearest_rec(far, query, best);
        }
    }

    /// The `k` nearest neighbors, sorted by ascending distance (ties by
    /// payload). Returns fewer if the tree holds fewer points.
    pub fn knn(&self, query: &[f64; 3], k: usize) -> Vec<(u32, f64)> {
        if self.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut heap: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.knn_rec(self.root, query, k, &mut heap);
        heap.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        heap.into_iter().map(|(d2, id)| (id, d2)).collect()
    }

    fn knn_rec(&self, node: u32, query: &[f64; 3], k: usize, heap: &mut Vec<(f64, u32)>) {
        let n = &self.nodes[node as usize];
        let worst = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max)
        };
        if n.left == SENTINEL {
            for i in n.start..n.end {
                let d2 = sq_dist(&self.points[i as usize], query);
                let id = self.payload[i as usize];
                if heap.len() < k {
                    heap.push((d2, id));
                } else {
                    // Replace the current worst entry if this one is closer.
                    let (wi, w) = heap
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap())
                        .map(|(i, e)| (i, e.0))
                        .unwrap();
                    if d2 < w {
                        heap[wi] = (d2, id);
                    }
                }
            }
            return;
        }
        let axis = n.axis as usize;
        let delta = query[axis] - n.split;
        let (near, far) = if delta < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.knn_rec(near, query, k, heap);
        let worst_now = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max)
        };
        let _ = worst;
        if delta * delta <= worst_now {
            self.knn_rec(far, query, k, heap);
        }
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Closest point on triangle (a, b, c) to `p` (Ericson, Real-Time Collision
/// Detection, 5.1.5).
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Result of a closest-surface-point query.
#[derive(Debug, Clone, Copy)]
pub struct SurfaceHit {
    pub point: Point3<f64>,
    pub distance: f64,
    pub face: u32,
}

/// AABB tree over the faces of a mesh for exact closest-point queries.
///
/// Ties in distance are broken towards the smallest face index, so results
/// match a linear scan with the same tie-break exactly.
pub struct TriBvh<'a> {
    mesh: &'a TriMesh,
    nodes: Vec<BvhNode>,
    faces: Vec<u32>,
    root: u32,
}

struct BvhNode {
    lo: Vector3<f64>,
    hi: Vector3<f64>,
    left: u32,
    right: u32,
    start: u32,
    end: u32,
}

impl<'a> TriBvh<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let mut faces: Vec<u32> = (0..mesh.faces.len() as u32).collect();
        let mut bvh = TriBvh {
            mesh,
            nodes: Vec::new(),
            faces: Vec::new(),
            root: SENTINEL,
        };
        if !faces.is_empty() {
            let centroids: Vec<Vector3<f64>> = (0..mesh.faces.len())
                .map(|f| {
                    let [a, b, c] = mesh.face_vertices(f);
                    (a.coords + b.coords + c.coords) / 3.0
                })
                .collect();
            let n = faces.len();
            bvh.root = bvh.build(&mut faces, &centroids, n);
            bvh.faces = faces;
        }
        bvh
    }

    fn face_bounds(&self, f: u32) -> (Vector3<f64>, Vector3<f64>) {
        let [a, b, c] = self.mesh.face_vertices(f as usize);
        let lo = a.coords.inf(&b.coords).inf(&c.coords);
        let hi = a.coords.sup(&b.coords).sup(&c.coords);
        (lo, hi)
    }

    fn build(&mut self, faces: &mut [u32], centroids: &[Vector3<f64>], len: usize) -> u32 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &f in faces[..len].iter() {
            let (flo, fhi) = self.face_bounds(f);
            lo = lo.inf(&flo);
            hi = hi.sup(&fhi);
        }
        if len <= 4 {
            // Keep faces sorted inside the leaf for deterministic tie-breaks.
            faces[..len].sort_unstable();
            let start = self.count_emitted();
            self.emit(faces, len);
            let node = BvhNode {
                lo,
                hi,
                left: SENTINEL,
                right: SENTINEL,
                start,
                end: start + len as u32,
            };
            self.nodes.push(node);
            return (self.nodes.len() - 1) as u32;
        }
        let mut clo = Vector3::repeat(f64::INFINITY);
        let mut chi = Vector3::repeat(f64::NEG_INFINITY);
        for &f in faces[..len].iter() {
            clo = clo.inf(&centroids[f as usize]);
            chi = chi.sup(&centroids[f as usize]);
        }
        let ext = chi - clo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = len / 2;
        faces[..len].select_nth_unstable_by(mid, |&a, &b| {
            centroids[a as usize][axis]
                .partial_cmp(&centroids[b as usize][axis])
                .unwrap()
                .then(a.cmp(&b))
        });
        let node_idx = self.nodes.len() as u32;
        self.nodes.push(BvhNode {
            lo,
            hi,
            left: SENTINEL,
            right: SENTINEL,
            start: 0,
            end: 0,
        });
        let (lh, rh) = faces.split_at_mut(mid);
        let left = self.build(lh, centroids, mid);
        let right = self.build(rh, centroids, len - mid);
        self.nodes[node_idx as usize].left = left;
        self.nodes[node_idx as usize].right = right;
        node_idx
    }

    fn count_emitted(&self) -> u32 {
        self.faces.len() as u32
    }

    fn emit(&mut self, faces: &[u32], len: usize) {
        self.faces.extend_from_slice(&faces[..len]);
    }

    /// Exact closest point on the mesh surface.
    pub fn closest_point(&self, p: &Point3<f64>) -> Option<SurfaceHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = SurfaceHit {
            point: *p,
            distance: f64::INFINITY,
            face: SENTINEL,
        };
        let mut best_d2 = f64::INFINITY;
        self.query_rec(self.root, p, &mut best, &mut best_d2);
        if best.face == SENTINEL {
            None
        } else {
            best.distance = best_d2.sqrt();
            Some(best)
        }
    }

    fn query_rec(&self, node: u32, p: &Point3<f64>, best: &mut SurfaceHit, best_d2: &mut f64) {
        let n = &self.nodes[node as usize];
        if n.left == SENTINEL {
            for i in n.start..n.end {
                let f = self.faces[i as usize];
                let [a, b, c] = self.mesh.face_vertices(f as usize);
                let cp = closest_point_on_triangle(p, &a, &b, &c);
                let d2 = (cp - p).norm_squared();
                if d2 < *best_d2 || (d2 == *best_d2 && f < best.face) {
                    *best_d2 = d2;
                    best.point = cp;
                    best.face = f;
                }
            }
            return;
        }
        let (la, lb) = (n.left, n.right);
        let da = self.node_dist2(la, p);
        let db = self.node_dist2(lb, p);
        let (first, d1, second, d2) = if da <= db {
            (la, da, lb, db)
        } else {
            (lb, db, la, da)
        };
        // Non-strict bound so ties are still visited and broken by face index.
        if d1 <= *best_d2 {
            self.query_rec(first, p, best, best_d2);
        }
        if d2 <= *best_d2 {
            self.query_rec(second, p, best, best_d2);
        }
    }

    fn node_dist2(&self, node: u32, p: &Point3<f64>) -> f64 {
        let n = &self.nodes[node as usize];
        let mut d2 = 0.0;
        for k in 0..3 {
            let v = p[k];
            let d = if v < n.lo[k] {
                n.lo[k] - v
            } else if v > n.hi[k] {
                v - n.hi[k]
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }
}

/// Linear-scan reference with the same tie-break as [`TriBvh`].
pub fn closest_point_brute_force(mesh: &TriMesh, p: &Point3<f64>) -> Option<SurfaceHit> {
    let mut best: Option<(f64, SurfaceHit)> = None;
    for f in 0..mesh.faces.len() {
        let [a, b, c] = mesh.face_vertices(f);
        let cp = closest_point_on_triangle(p, &a, &b, &c);
        let d2 = (cp - p).norm_squared();
        let better = match &best {
            None => true,
            Some((bd2, _)) => d2 < *bd2,
        };
        if better {
            best = Some((
                d2,
                SurfaceHit {
                    point: cp,
                    distance: d2.sqrt(),
                    face: f as u32,
                },
            ));
        }
    }
    best.map(|(_, h)| h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect()
    }

    #[test]
    fn nearest_matches_brute_force() {
        let pts = random_points(1000, 1);
        let tree = KdTree::new(pts.clone(), (0..1000).collect());
        let queries = random_points(1000, 2);
        for q in &queries {
            let (id, d2) = tree.nearest(q).unwrap();
            let (bid, bd2) = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i as u32, sq_dist(p, q)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
                .unwrap();
            assert_eq!(id, bid);
            assert_eq!(d2, bd2);
        }
    }

    #[test]
    fn nearest_of_stored_point_is_itself() {
        let pts = random_points(100, 3);
        let tree = KdTree::new(pts.clone(), (0..100).collect());
        for (i, p) in pts.iter().enumerate() {
            let (id, d2) = tree.nearest(p).unwrap();
            assert_eq!(id, i as u32);
            assert_eq!(d2, 0.0);
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let pts = random_points(500, 4);
        let tree = KdTree::new(pts.clone(), (0..500).collect());
        let queries = random_points(50, 5);
        for q in &queries {
            let got = tree.knn(q, 20);
            let mut all: Vec<(u32, f64)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i as u32, sq_dist(p, q)))
                .collect();
            all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(20);
            let got_d: Vec<f64> = got.iter().map(|e| e.1).collect();
            let want_d: Vec<f64> = all.iter().map(|e| e.1).collect();
            assert_eq!(got_d, want_d);
        }
    }

    #[test]
    fn closest_point_triangle_regions() {
        let a = Point3::new(0.0, 0.0, 0.0);
        let b = Point3::new(2.0, 0.0, 0.0);
        let c = Point3::new(0.0, 2.0, 0.0);
        // Interior projection.
        let p = Point3::new(0.5, 0.5, 3.0);
        assert_eq!(
            closest_point_on_triangle(&p, &a, &b, &c),
            Point3::new(0.5, 0.5, 0.0)
        );
        // Vertex region.
        let p = Point3::new(-1.0, -1.0, 0.0);
        assert_eq!(closest_point_on_triangle(&p, &a, &b, &c), a);
        // Edge region (ab).
        let p = Point3::new(1.0, -2.0, 0.0);
        assert_eq!(
            closest_point_on_triangle(&p, &a, &b, &c),
            Point3::new(1.0, 0.0, 0.0)
        );
    }

    #[test]
    fn bvh_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut mesh = TriMesh::default();
        for _ in 0..90 {
            let base = rng.gen::<[f64; 3]>();
            let i = mesh.vertices.len() as u32;
            for _ in 0..3 {
                mesh.vertices.push(Point3::new(
                    base[0] * 10.0 + rng.gen::<f64>(),
                    base[1] * 10.0 + rng.gen::<f64>(),
                    base[2] * 10.0 + rng.gen::<f64>(),
                ));
            }
            mesh.faces.push([i, i + 1, i + 2]);
        }
        let bvh = TriBvh::new(&mesh);
        for _ in 0..500 {
            let q = Point3::new(
                rng.gen_range(-2.0..12.0),
                rng.gen_range(-2.0..12.0),
                rng.gen_range(-2.0..12.0),
            );
            let got = bvh.closest_point(&q).unwrap();
            let want = closest_point_brute_force(&mesh, &q).unwrap();
            assert_eq!(got.face, want.face);
            assert_eq!(got.distance, want.distance);
            assert_eq!(got.point, want.point);
        }
    }
}

use super::{dist2, Point3};
use crate::error::{contract, Result};

/// Balanced 3-d tree over a point set, stored implicitly: the node for the
/// index range `[lo, hi)` sits at `mid = (lo + hi) / 2`, with the left
/// subtree in `[lo, mid)` and the right one in `(mid, hi)`.
///
/// Queries are exact; equal distances resolve to the lowest point index.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Point3>,
    order: Vec<usize>,
    axis: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Squared Euclidean distance.
    pub dist2: f64,
}

fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Result<Self> {
        if points.is_empty() {
            return Err(contract("kd-tree over an empty point set"));
        }
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            axis: vec![0; points.len()],
        };
        tree.split(0, points.len());
        Ok(tree)
    }

    fn split(&mut self, lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let pts = &self.points;
        let slice = &self.order[lo..hi];
        let mut best_axis = 0;
        let mut best_spread = f64::NEG_INFINITY;
        for ax in 0..3 {
            let (mn, mx) = slice.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| {
                (a.min(pts[i][ax]), b.max(pts[i][ax]))
            });
            if mx - mn > best_spread {
                best_spread = mx - mn;
                best_axis = ax;
            }
        }
        let mid = (lo + hi) / 2;
        let ax = best_axis;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][ax].total_cmp(&pts[b][ax]).then(a.cmp(&b))
        });
        self.axis[mid] = ax as u8;
        self.split(lo, mid);
        self.split(mid + 1, hi);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// Exact nearest neighbor of `q`.
    pub fn nearest(&self, q: &Point3) -> Neighbor {
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_in(q, 0, self.points.len(), &mut best);
        Neighbor {
            index: best.1,
            dist2: best.0,
        }
    }

    fn nearest_in(&self, q: &Point3, lo: usize, hi: usize, best: &mut (f64, usize)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let cand = (dist2(p, q), idx);
        if better(cand, *best) {
            *best = cand;
        }
        if hi - lo == 1 {
            return;
        }
        let ax = self.axis[mid] as usize;
        let delta = q[ax] - p[ax];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.nearest_in(q, near.0, near.1, best);
        if delta * delta <= best.0 {
            self.nearest_in(q, far.0, far.1, best);
        }
    }

    /// The `k` nearest points, closest first (ties by index).
    pub fn k_nearest(&self, q: &Point3, k: usize) -> Vec<Neighbor> {
        let k = k.min(self.points.len());
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_in(q, 0, self.points.len(), k, &mut heap);
        }
        heap.into_iter()
            .map(|(d, i)| Neighbor { index: i, dist2: d })
            .collect()
    }

    fn knn_in(&self, q: &Point3, lo: usize, hi: usize, k: usize, found: &mut Vec<(f64, usize)>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let cand = (dist2(p, q), idx);
        if found.len() < k || better(cand, found[found.len() - 1]) {
            let pos = found.partition_point(|&e| better(e, cand));
            found.insert(pos, cand);
            found.truncate(k);
        }
        if hi - lo == 1 {
            return;
        }
        let ax = self.axis[mid] as usize;
        let delta = q[ax] - p[ax];
        let (near, far) = if delta < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_in(q, near.0, near.1, k, found);
        if found.len() < k || delta * delta <= found[found.len() - 1].0 {
            self.knn_in(q, far.0, far.1, k, found);
        }
    }
}

/// Exhaustive nearest-neighbor scan with the same tie rule as [`KdTree`].
pub fn brute_force_nearest(points: &[Point3], q: &Point3) -> Neighbor {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, p) in points.iter().enumerate() {
        let cand = (dist2(p, q), i);
        if better(cand, best) {
            best = cand;
        }
    }
    Neighbor {
        index: best.1,
        dist2: best.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect()
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(KdTree::build(&[]).is_err());
    }

    #[test]
    fn singleton_always_answers_zero() {
        let tree = KdTree::build(&[[0.3, -0.2, 5.0]]).unwrap();
        for q in cloud(10, 1) {
            assert_eq!(tree.nearest(&q).index, 0);
        }
    }

    #[test]
    fn coincident_query_has_zero_distance() {
        let pts = cloud(50, 2);
        let tree = KdTree::build(&pts).unwrap();
        let nn = tree.nearest(&pts[17]);
        assert_eq!(nn.dist2, 0.0);
        assert_eq!(nn.index, 17);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let pts = cloud(500, 3);
        let tree = KdTree::build(&pts).unwrap();
        for q in cloud(100, 4) {
            assert_eq!(tree.nearest(&q), brute_force_nearest(&pts, &q));
        }
    }

    #[test]
    fn ties_break_to_lowest_index() {
        // duplicated points and a lattice with equidistant neighbours
        let mut pts = vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]];
        pts.extend_from_slice(&pts.clone());
        let tree = KdTree::build(&pts).unwrap();
        assert_eq!(tree.nearest(&[0.0, 0.0, 0.0]).index, 0);
        assert_eq!(tree.nearest(&[0.0, 1.0, 0.0]).index, 2);
        let grid: Vec<Point3> = (0..27)
            .map(|i| [(i % 3) as f64, ((i / 3) % 3) as f64, (i / 9) as f64])
            .collect();
        let tree = KdTree::build(&grid).unwrap();
        for q in [[0.5, 0.5, 0.5], [1.5, 1.0, 1.0], [1.0, 0.5, 2.0]] {
            assert_eq!(tree.nearest(&q), brute_force_nearest(&grid, &q));
        }
    }

    #[test]
    fn k_nearest_matches_sorted_scan() {
        let pts = cloud(300, 5);
        let tree = KdTree::build(&pts).unwrap();
        for q in cloud(20, 6) {
            let mut all: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| (dist2(p, &q), i)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let got = tree.k_nearest(&q, 6);
            let want: Vec<usize> = all[..6].iter().map(|e| e.1).collect();
            assert_eq!(got.iter().map(|n| n.index).collect::<Vec<_>>(), want);
        }
    }
}

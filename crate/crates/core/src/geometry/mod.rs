//! Triangle meshes, point sets, surface sampling and nearest-neighbor search.

mod io;
mod kdtree;

pub use io::{load_mesh, load_point_set, save_mesh, save_mesh_with_normals, save_point_set};
pub use kdtree::{brute_force_nearest, KdTree, Neighbor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: &Point3, b: &Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: &Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let d = sub(a, b);
    dot(&d, &d)
}

/// Points with optional unit normals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<Point3>,
    pub normals: Option<Vec<Point3>>,
}

impl PointSet {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points, normals: None }
    }

    pub fn with_normals(points: Vec<Point3>, normals: Vec<Point3>) -> Result<Self> {
        if normals.len() != points.len() {
            return Err(contract(format!(
                "{} normals for {} points",
                normals.len(),
                points.len()
            )));
        }
        if let Some(i) = normals.iter().position(|n| (norm(n) - 1.0).abs() > 1e-6) {
            return Err(contract(format!("normal {i} is not unit length")));
        }
        Ok(Self {
            points,
            normals: Some(normals),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        points_to_tensor(&self.points)
    }
}

pub fn points_to_tensor<T: Real>(points: &[Point3]) -> Tensor<T> {
    Tensor::new(
        &[points.len(), 3],
        points.iter().flat_map(|p| p.iter().map(|&v| T::lit(v))).collect(),
    )
    .expect("n×3 layout")
}

pub fn tensor_to_points<T: Real>(t: &Tensor<T>) -> Vec<Point3> {
    assert_eq!(t.shape().last(), Some(&3), "expected trailing extent 3");
    t.data()
        .chunks_exact(3)
        .map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()])
        .collect()
}

/// Indexed triangle mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some((fi, _)) = faces.iter().enumerate().find(|(_, f)| f.iter().any(|&v| v >= n)) {
            return Err(contract(format!("face {fi} references a vertex beyond {n}")));
        }
        Ok(Self { vertices, faces })
    }

    /// Same connectivity, new vertex positions.
    pub fn with_vertices(&self, vertices: Vec<Point3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(contract("vertex count changed"));
        }
        Ok(Self {
            vertices,
            faces: self.faces.clone(),
        })
    }

    /// Deduplicated undirected edges `(lo, hi)`, sorted.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let mut edges: Vec<[usize; 2]> = self
            .faces
            .iter()
            .flat_map(|f| [[f[0], f[1]], [f[1], f[2]], [f[2], f[0]]])
            .map(|[a, b]| if a < b { [a, b] } else { [b, a] })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Unnormalized face normal; its length is twice the face area.
    pub fn face_cross(&self, f: usize) -> Point3 {
        let [a, b, c] = self.faces[f];
        let (a, b, c) = (&self.vertices[a], &self.vertices[b], &self.vertices[c]);
        cross(&sub(b, a), &sub(c, a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * norm(&self.face_cross(f))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Indices of faces with zero area.
    pub fn degenerate_faces(&self) -> Vec<usize> {
        (0..self.faces.len()).filter(|&f| self.face_area(f) == 0.0).collect()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.vertices.len() as i64 - self.edges().len() as i64 + self.faces.len() as i64
    }

    /// Area-weighted vertex normals. Vertices without any incident area
    /// get `(0,0,1)` and are listed in the second return value.
    pub fn vertex_normals(&self) -> (Vec<Point3>, Vec<usize>) {
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        for (f, face) in self.faces.iter().enumerate() {
            let n = self.face_cross(f);
            for &v in face {
                for k in 0..3 {
                    acc[v][k] += n[k];
                }
            }
        }
        let mut flagged = Vec::new();
        let normals = acc
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                let len = norm(&n);
                if len > 0.0 && len.is_finite() {
                    [n[0] / len, n[1] / len, n[2] / len]
                } else {
                    flagged.push(i);
                    [0.0, 0.0, 1.0]
                }
            })
            .collect();
        if !flagged.is_empty() {
            log::warn!("{} vertices have no incident area; normal set to +z", flagged.len());
        }
        (normals, flagged)
    }

    /// Vertices as a point set carrying recomputed vertex normals.
    pub fn to_point_set(&self) -> PointSet {
        let (normals, _) = self.vertex_normals();
        PointSet {
            points: self.vertices.clone(),
            normals: Some(normals),
        }
    }

    /// Area-proportional face choice and uniform barycentric sampling.
    /// Normals are the sampled faces' normals.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<PointSet> {
        let mut cumulative = Vec::with_capacity(self.faces.len());
        let mut total = 0.0;
        for f in 0..self.faces.len() {
            total += self.face_area(f);
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(contract("surface sampling needs positive total area"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::with_capacity(n);
        let mut normals = Vec::with_capacity(n);
        for _ in 0..n {
            let r: f64 = rng.gen::<f64>() * total;
            let f = cumulative.partition_point(|&c| c <= r).min(self.faces.len() - 1);
            let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
            let s = r1.sqrt();
            let (wa, wb, wc) = (1.0 - s, s * (1.0 - r2), s * r2);
            let [a, b, c] = self.faces[f];
            let (a, b, c) = (&self.vertices[a], &self.vertices[b], &self.vertices[c]);
            points.push([
                wa * a[0] + wb * b[0] + wc * c[0],
                wa * a[1] + wb * b[1] + wc * c[1],
                wa * a[2] + wb * b[2] + wc * c[2],
            ]);
            let nc = self.face_cross(f);
            let len = norm(&nc);
            normals.push([nc[0] / len, nc[1] / len, nc[2] / len]);
        }
        Ok(PointSet {
            points,
            normals: Some(normals),
        })
    }

    /// Closed cylinder along +z: `rings` vertex rings of `segments` vertices
    /// each, plus one centre vertex per cap. Outward-facing triangles.
    pub fn cylinder(radius: f64, z0: f64, z1: f64, rings: usize, segments: usize) -> Result<Self> {
        if rings < 2 || segments < 3 {
            return Err(contract("cylinder needs ≥2 rings and ≥3 segments"));
        }
        let mut vertices = Vec::with_capacity(rings * segments + 2);
        for r in 0..rings {
            let z = z0 + (z1 - z0) * r as f64 / (rings - 1) as f64;
            for s in 0..segments {
                let a = std::f64::consts::TAU * s as f64 / segments as f64;
                vertices.push([radius * a.cos(), radius * a.sin(), z]);
            }
        }
        let bottom = vertices.len();
        vertices.push([0.0, 0.0, z0]);
        let top = vertices.len();
        vertices.push([0.0, 0.0, z1]);
        let id = |r: usize, s: usize| r * segments + (s % segments);
        let mut faces = Vec::new();
        for r in 0..rings - 1 {
            for s in 0..segments {
                faces.push([id(r, s), id(r, s + 1), id(r + 1, s + 1)]);
                faces.push([id(r, s), id(r + 1, s + 1), id(r + 1, s)]);
            }
        }
        for s in 0..segments {
            faces.push([bottom, id(0, s + 1), id(0, s)]);
            faces.push([top, id(rings - 1, s), id(rings - 1, s + 1)]);
        }
        Mesh::new(vertices, faces)
    }

    /// Unit icosphere after `subdivisions` rounds of 4-way splitting.
    pub fn icosphere(subdivisions: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Point3> = [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ]
        .iter()
        .map(|v| {
            let l = norm(v);
            [v[0] / l, v[1] / l, v[2] / l]
        })
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoint = std::collections::HashMap::new();
            let mut mid = |a: usize, b: usize, vertices: &mut Vec<Point3>| -> usize {
                let key = (a.min(b), a.max(b));
                *midpoint.entry(key).or_insert_with(|| {
                    let (p, q) = (vertices[a], vertices[b]);
                    let m = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0];
                    let l = norm(&m);
                    vertices.push([m[0] / l, m[1] / l, m[2] / l]);
                    vertices.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for [a, b, c] in faces {
                let ab = mid(a, b, &mut vertices);
                let bc = mid(b, c, &mut vertices);
                let ca = mid(c, a, &mut vertices);
                next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        Mesh { vertices, faces }
    }
}

/// Distance from `p` to the closest point of triangle `(a, b, c)`.
pub fn point_triangle_distance(p: &Point3, a: &Point3, b: &Point3, c: &Point3) -> f64 {
    // Ericson, closest point on triangle by Voronoi regions
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    let at = |u: f64, v: f64| [a[0] + u * ab[0] + v * ac[0], a[1] + u * ab[1] + v * ac[1], a[2] + u * ab[2] + v * ac[2]];
    let closest = if d1 <= 0.0 && d2 <= 0.0 {
        *a
    } else {
        let bp = sub(p, b);
        let d3 = dot(&ab, &bp);
        let d4 = dot(&ac, &bp);
        let cp = sub(p, c);
        let d5 = dot(&ab, &cp);
        let d6 = dot(&ac, &cp);
        let vc = d1 * d4 - d3 * d2;
        let vb = d5 * d2 - d1 * d6;
        let va = d3 * d6 - d5 * d4;
        if d3 >= 0.0 && d4 <= d3 {
            *b
        } else if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
            at(d1 / (d1 - d3), 0.0)
        } else if d6 >= 0.0 && d5 <= d6 {
            *c
        } else if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
            at(0.0, d2 / (d2 - d6))
        } else if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
            let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
            [b[0] + w * (c[0] - b[0]), b[1] + w * (c[1] - b[1]), b[2] + w * (c[2] - b[2])]
        } else {
            let denom = 1.0 / (va + vb + vc);
            at(vb * denom, vc * denom)
        }
    };
    dist2(p, &closest).sqrt()
}

/// Brute-force point-to-mesh distance.
pub fn point_mesh_distance(p: &Point3, mesh: &Mesh) -> f64 {
    mesh.faces
        .iter()
        .map(|&[a, b, c]| point_triangle_distance(p, &mesh.vertices[a], &mesh.vertices[b], &mesh.vertices[c]))
        .fold(f64::INFINITY, f64::min)
}

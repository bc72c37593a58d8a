//! Synthetic sequences and the `DTRJ` trajectory file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::geometry::{Mesh, Point3, PointSet};
use crate::tensor::Tensor;

pub const TRAIN_FRACTION: f64 = 0.25;

/// Point trajectories sampled at normalized times.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    /// `[N, D]`
    pub canonical: Tensor<f64>,
    /// Strictly increasing, in `[-1, 1]`.
    pub times_norm: Vec<f64>,
    /// `[T, N, D]`
    pub targets: Tensor<f64>,
    /// `true` for training points.
    pub train_mask: Vec<bool>,
    pub canonical_index: usize,
}

impl TrajectorySet {
    pub fn new(
        canonical: Tensor<f64>,
        times_norm: Vec<f64>,
        targets: Tensor<f64>,
        train_mask: Vec<bool>,
        canonical_index: usize,
    ) -> Result<Self> {
        let ts = Self {
            canonical,
            times_norm,
            targets,
            train_mask,
            canonical_index,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = match self.canonical.shape() {
            &[n, d] if d == 2 || d == 3 => (n, d),
            s => return Err(contract(format!("canonical must be [N,2] or [N,3], got {s:?}"))),
        };
        let t = self.times_norm.len();
        if t == 0 || self.targets.shape() != [t, n, d] {
            return Err(contract(format!("targets {:?} do not match T={t}, N={n}, D={d}", self.targets.shape())));
        }
        if self.train_mask.len() != n {
            return Err(contract("split mask length differs from the point count"));
        }
        if self.canonical_index >= t {
            return Err(contract("canonical index out of range"));
        }
        if self.times_norm.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(contract("times must be strictly increasing"));
        }
        if self.times_norm.iter().any(|t| !(-1.0..=1.0).contains(t)) {
            return Err(contract("times must lie in [-1, 1]"));
        }
        if t >= 2 && ((self.times_norm[0] + 1.0).abs() > 1e-6 || (self.times_norm[t - 1] - 1.0).abs() > 1e-6) {
            return Err(contract("times must start at -1 and end at +1"));
        }
        let frame = &self.targets.data()[self.canonical_index * n * d..(self.canonical_index + 1) * n * d];
        if frame.iter().zip(self.canonical.data()).any(|(a, b)| (a - b).abs() > 1e-6) {
            return Err(contract("the canonical frame's targets differ from the canonical points"));
        }
        Ok(())
    }

    pub fn n_points(&self) -> usize {
        self.canonical.shape()[0]
    }

    pub fn n_frames(&self) -> usize {
        self.times_norm.len()
    }

    pub fn dim(&self) -> usize {
        self.canonical.shape()[1]
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.n_points()).filter(|&i| self.train_mask[i]).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.n_points()).filter(|&i| !self.train_mask[i]).collect()
    }

    /// Canonical rows `[K, D]` and targets `[T, K, D]` of a point subset.
    pub fn subset(&self, indices: &[usize]) -> (Tensor<f64>, Tensor<f64>) {
        let d = self.dim();
        let n = self.n_points();
        let mut canon = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            canon.extend_from_slice(self.canonical.row(i));
        }
        let mut targets = Vec::with_capacity(self.n_frames() * indices.len() * d);
        let data = self.targets.data();
        for f in 0..self.n_frames() {
            for &i in indices {
                let at = (f * n + i) * d;
                targets.extend_from_slice(&data[at..at + d]);
            }
        }
        (
            Tensor::new(&[indices.len(), d], canon).expect("subset shape"),
            Tensor::new(&[self.n_frames(), indices.len(), d], targets).expect("subset shape"),
        )
    }

    /// Targets of frame `f` as `[N, D]`.
    pub fn frame(&self, f: usize) -> Tensor<f64> {
        let (n, d) = (self.n_points(), self.dim());
        Tensor::new(&[n, d], self.targets.data()[f * n * d..(f + 1) * n * d].to_vec()).expect("frame shape")
    }

    /// Every value rounded to `f32`, as stored on disk.
    pub fn round_to_f32(&mut self) {
        self.canonical.round_to_f32();
        self.targets.round_to_f32();
        for t in &mut self.times_norm {
            *t = *t as f32 as f64;
        }
    }
}

/// `k / (T − 1)` mapped to `[-1, 1]`.
pub fn normalized_times(frames: usize) -> Vec<f64> {
    if frames == 1 {
        return vec![0.0];
    }
    (0..frames).map(|k| -1.0 + 2.0 * k as f64 / (frames - 1) as f64).collect()
}

fn random_split(n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut mask = vec![false; n];
    for &i in &order[..n_train] {
        mask[i] = true;
    }
    mask
}

// ---- elemental motions ---------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MotionKind {
    Translation,
    Rotation,
    Scaling,
    Shearing,
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [Self::Translation, Self::Rotation, Self::Scaling, Self::Shearing];

    pub fn name(self) -> &'static str {
        match self {
            Self::Translation => "translation",
            Self::Rotation => "rotation",
            Self::Scaling => "scaling",
            Self::Shearing => "shearing",
        }
    }

    /// Translation: multiple of (0.5, 0.3, 0.2). Rotation: degrees about z.
    /// Scaling: final factor. Shearing: final `∂x'/∂y`.
    pub fn default_magnitude(self) -> f64 {
        match self {
            Self::Translation => 1.0,
            Self::Rotation => 90.0,
            Self::Scaling => 1.5,
            Self::Shearing => 0.5,
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown motion '{s}'")))
    }
}

pub const TRANSLATION_DIRECTION: Point3 = [0.5, 0.3, 0.2];

/// `x ↦ a·x + b` in three dimensions (2D uses the upper-left block).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine3 {
    pub a: [[f64; 3]; 3],
    pub b: Point3,
}

impl Affine3 {
    pub const IDENTITY: Affine3 = Affine3 {
        a: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        b: [0.0; 3],
    };

    pub fn apply(&self, x: &Point3) -> Point3 {
        let mut y = self.b;
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += (0..3).map(|j| self.a[i][j] * x[j]).sum::<f64>();
        }
        y
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Affine3) -> Affine3 {
        let mut out = Affine3 {
            a: [[0.0; 3]; 3],
            b: self.apply(&other.b),
        };
        for i in 0..3 {
            for j in 0..3 {
                out.a[i][j] = (0..3).map(|k| self.a[i][k] * other.a[k][j]).sum();
            }
        }
        out
    }
}

/// An elemental motion at full strength.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub kind: MotionKind,
    pub magnitude: f64,
}

impl Motion {
    pub fn new(kind: MotionKind, magnitude: f64) -> Result<Self> {
        if !magnitude.is_finite() {
            return Err(contract("motion magnitude must be finite"));
        }
        Ok(Self { kind, magnitude })
    }

    pub fn default_for(kind: MotionKind) -> Self {
        Self {
            kind,
            magnitude: kind.default_magnitude(),
        }
    }

    /// Transform at fraction `s ∈ [0, 1]` of the way from identity.
    pub fn at(&self, s: f64) -> Affine3 {
        let mut m = Affine3::IDENTITY;
        match self.kind {
            MotionKind::Translation => {
                for (b, d) in m.b.iter_mut().zip(TRANSLATION_DIRECTION) {
                    *b = self.magnitude * d * s;
                }
            }
            MotionKind::Rotation => {
                let (sin, cos) = (self.magnitude.to_radians() * s).sin_cos();
                m.a[0] = [cos, -sin, 0.0];
                m.a[1] = [sin, cos, 0.0];
            }
            MotionKind::Scaling => {
                let f = 1.0 + (self.magnitude - 1.0) * s;
                for i in 0..3 {
                    m.a[i][i] = f;
                }
            }
            MotionKind::Shearing => m.a[0][1] = self.magnitude * s,
        }
        m
    }
}

fn apply_sequence(canonical: &[Point3], dim: usize, motion: &Motion, frames: usize) -> Tensor<f64> {
    let n = canonical.len();
    let mut targets = Vec::with_capacity(frames * n * dim);
    for k in 0..frames {
        let s = if frames == 1 { 0.0 } else { k as f64 / (frames - 1) as f64 };
        let m = motion.at(s);
        for p in canonical {
            targets.extend_from_slice(&m.apply(p)[..dim]);
        }
    }
    Tensor::new(&[frames, n, dim], targets).expect("sequence shape")
}

fn to_flat(points: &[Point3], dim: usize) -> Tensor<f64> {
    let data = points.iter().flat_map(|p| p[..dim].to_vec()).collect();
    Tensor::new(&[points.len(), dim], data).expect("point shape")
}

/// Points uniform in `[-1, 1]^dim` under an elemental motion interpolated
/// linearly from identity at frame 0 to full strength at the last frame.
pub fn gen_elemental(motion: &Motion, n_points: usize, n_frames: usize, dim: usize, seed: u64) -> Result<TrajectorySet> {
    if n_frames < 2 {
        return Err(contract("need at least two frames"));
    }
    if dim != 2 && dim != 3 {
        return Err(contract(format!("dimension must be 2 or 3, got {dim}")));
    }
    let motion = Motion::new(motion.kind, motion.magnitude)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let canonical: Vec<Point3> = (0..n_points)
        .map(|_| {
            let mut p = [0.0; 3];
            for c in p.iter_mut().take(dim) {
                *c = rng.gen_range(-1.0..=1.0);
            }
            p
        })
        .collect();
    let mask = random_split(n_points, &mut rng);
    TrajectorySet::new(
        to_flat(&canonical, dim),
        normalized_times(n_frames),
        apply_sequence(&canonical, dim, &motion, n_frames),
        mask,
        0,
    )
}

/// A regular `n_side × n_side` pixel grid in `[-1, 1]²` under a 2D
/// elemental motion.
pub fn gen_image2d(n_side: usize, motion: &Motion, n_frames: usize, seed: u64) -> Result<TrajectorySet> {
    if n_frames < 2 || n_side < 2 {
        return Err(contract("need at least two frames and a 2×2 grid"));
    }
    let motion = Motion::new(motion.kind, motion.magnitude)?;
    let step = 2.0 / (n_side - 1) as f64;
    let canonical: Vec<Point3> = (0..n_side * n_side)
        .map(|i| [-1.0 + (i % n_side) as f64 * step, -1.0 + (i / n_side) as f64 * step, 0.0])
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = random_split(canonical.len(), &mut rng);
    TrajectorySet::new(
        to_flat(&canonical, 2),
        normalized_times(n_frames),
        apply_sequence(&canonical, 2, &motion, n_frames),
        mask,
        0,
    )
}

// ---- guided alignment sequence -------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentConfig {
    pub rings: usize,
    pub segments: usize,
    pub radius: f64,
    pub half_height: f64,
    pub frames: usize,
    pub max_angle_deg: f64,
    pub scan_points: usize,
    pub guidance_points: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            rings: 32,
            segments: 64,
            radius: 0.25,
            half_height: 1.0,
            frames: 30,
            max_angle_deg: 60.0,
            scan_points: 4000,
            guidance_points: 200,
        }
    }
}

/// Canonical guidance points and their positions at one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidePair {
    pub canonical: Vec<Point3>,
    pub target: Vec<Point3>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentSequence {
    pub template: Mesh,
    pub scans: Vec<PointSet>,
    pub guidance: Vec<GuidePair>,
    pub guide_vertices: Vec<usize>,
    /// Ground-truth template vertex positions per frame.
    pub gt_vertices: Vec<Vec<Point3>>,
    pub times_norm: Vec<f64>,
}

impl AlignmentSequence {
    /// Guidance trajectories as a [`TrajectorySet`] with every point in the
    /// training split.
    pub fn guidance_set(&self) -> Result<TrajectorySet> {
        let g = self.guide_vertices.len();
        let canonical = to_flat(&self.guidance[0].canonical, 3);
        let targets: Vec<f64> = self.guidance.iter().flat_map(|p| p.target.iter().flatten().copied()).collect();
        TrajectorySet::new(
            canonical,
            self.times_norm.clone(),
            Tensor::new(&[self.guidance.len(), g, 3], targets)?,
            vec![true; g],
            0,
        )
    }
}

/// Bend angle in degrees at frame `k`.
pub fn bend_angle_deg(cfg: &AlignmentConfig, k: usize) -> f64 {
    cfg.max_angle_deg * k as f64 / (cfg.frames - 1) as f64
}

/// Rotates points above `z = 0` about the x axis by `angle_deg`.
pub fn bend(points: &[Point3], angle_deg: f64) -> Vec<Point3> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    points
        .iter()
        .map(|&p| if p[2] > 0.0 { [p[0], c * p[1] - s * p[2], s * p[1] + c * p[2]] } else { p })
        .collect()
}

/// A closed cylinder whose upper half rotates about a hinge at mid-height.
pub fn gen_alignment_sequence(cfg: &AlignmentConfig, seed: u64) -> Result<AlignmentSequence> {
    if cfg.frames < 2 {
        return Err(contract("need at least two frames"));
    }
    let template = Mesh::cylinder(cfg.radius, -cfg.half_height, cfg.half_height, cfg.rings, cfg.segments)?;
    let nv = template.vertices.len();
    if cfg.guidance_points > nv {
        return Err(contract("more guidance points than template vertices"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..nv).collect();
    order.shuffle(&mut rng);
    let mut guide_vertices = order[..cfg.guidance_points].to_vec();
    guide_vertices.sort_unstable();
    let scan_seed: u64 = rng.gen();

    let mut scans = Vec::with_capacity(cfg.frames);
    let mut guidance = Vec::with_capacity(cfg.frames);
    let mut gt_vertices = Vec::with_capacity(cfg.frames);
    let canonical_guides: Vec<Point3> = guide_vertices.iter().map(|&i| template.vertices[i]).collect();
    for k in 0..cfg.frames {
        let verts = bend(&template.vertices, bend_angle_deg(cfg, k));
        let mesh = template.with_vertices(verts.clone())?;
        scans.push(mesh.sample_surface(cfg.scan_points, scan_seed.wrapping_add(k as u64))?);
        guidance.push(GuidePair {
            canonical: canonical_guides.clone(),
            target: guide_vertices.iter().map(|&i| verts[i]).collect(),
        });
        gt_vertices.push(verts);
    }
    Ok(AlignmentSequence {
        template,
        scans,
        guidance,
        guide_vertices,
        gt_vertices,
        times_norm: normalized_times(cfg.frames),
    })
}

// ---- DTRJ ----------------------------------------------------------------

pub const DTRJ_MAGIC: &[u8; 4] = b"DTRJ";
pub const DTRJ_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

pub fn encode_trajectories(ts: &TrajectorySet) -> Result<Vec<u8>> {
    ts.validate()?;
    let (n, t, d) = (ts.n_points(), ts.n_frames(), ts.dim());
    if n > u32::MAX as usize || t > u32::MAX as usize || ts.canonical_index > u8::MAX as usize {
        return Err(contract("trajectory set too large for the file format"));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (n * d + t + t * n * d) + n);
    out.extend_from_slice(DTRJ_MAGIC);
    out.extend_from_slice(&DTRJ_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.push(d as u8);
    out.push(ts.canonical_index as u8);
    out.resize(HEADER_LEN, 0);
    let mut put = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    ts.canonical.data().iter().for_each(|&v| put(v));
    ts.times_norm.iter().for_each(|&v| put(v));
    ts.targets.data().iter().for_each(|&v| put(v));
    out.extend(ts.train_mask.iter().map(|&m| m as u8));
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                reason: format!("truncated {what}: need {len} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| format_err(self.pos, "size overflow"))?, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_trajectories(bytes: &[u8]) -> Result<TrajectorySet> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != DTRJ_MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = r.u32("version")?;
    if version != DTRJ_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let n = r.u32("point count")? as usize;
    let t = r.u32("frame count")? as usize;
    let head = r.take(HEADER_LEN - 16, "header")?;
    let (d, ci) = (head[0] as usize, head[1] as usize);
    if d != 2 && d != 3 {
        return Err(format_err(16, format!("dimension {d} is not 2 or 3")));
    }
    if t == 0 || ci >= t {
        return Err(format_err(17, format!("canonical index {ci} outside {t} frames")));
    }
    let canonical = r.f32s(n * d, "canonical points")?;
    let times_at = r.pos;
    let times = r.f32s(t, "times")?;
    let targets = r.f32s(t * n * d, "targets")?;
    let mask_at = r.pos;
    let mask_raw = r.take(n, "split mask")?;
    if let Some(i) = mask_raw.iter().position(|&m| m > 1) {
        return Err(format_err(mask_at + i, "split mask entries must be 0 or 1"));
    }
    if r.pos != bytes.len() {
        return Err(format_err(r.pos, "trailing bytes"));
    }
    TrajectorySet::new(
        Tensor::new(&[n, d], canonical)?,
        times,
        Tensor::new(&[t, n, d], targets)?,
        mask_raw.iter().map(|&m| m == 1).collect(),
        ci,
    )
    .map_err(|e| format_err(times_at, e.to_string()))
}

pub fn save_trajectories(ts: &TrajectorySet, path: &Path) -> Result<()> {
    std::fs::write(path, encode_trajectories(ts)?)?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<TrajectorySet> {
    decode_trajectories(&std::fs::read(path)?)
}

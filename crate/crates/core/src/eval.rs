//! Evaluation of trained models against trajectories and scans.

use crate::error::{contract, Result};
use crate::geometry::{points_to_tensor, tensor_to_points, Mesh, Point3, PointSet};
use crate::losses::{chamfer, epe, temporal_stats, Chamfer};
use crate::motion::MotionModel;
use crate::synth::TrajectorySet;
use crate::tensor::Tensor;

/// Predicted positions `[T, K, D]` of the given points at every frame.
pub fn predict_frames(m: &MotionModel<f64>, canonical: &Tensor<f64>, times: &[f64]) -> Result<Tensor<f64>> {
    let (k, d) = (canonical.shape()[0], canonical.shape()[1]);
    let mut out = Vec::with_capacity(times.len() * k * d);
    for &t in times {
        out.extend_from_slice(m.warp(canonical, t)?.data());
    }
    Ok(Tensor::new(&[times.len(), k, d], out)?)
}

/// End-point error over the listed points and every frame.
pub fn subset_epe(m: &MotionModel<f64>, data: &TrajectorySet, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(contract("empty evaluation split"));
    }
    let (canon, gt) = data.subset(indices);
    let pred = predict_frames(m, &canon, &data.times_norm)?;
    epe(&pred, &gt, &canon)
}

/// End-point error on the test split.
pub fn test_epe(m: &MotionModel<f64>, data: &TrajectorySet) -> Result<f64> {
    let test = data.test_indices();
    if test.is_empty() {
        return Err(contract("the data has no test split"));
    }
    subset_epe(m, data, &test)
}

/// Vertex positions at every frame.
pub fn warp_vertices(m: &MotionModel<f64>, vertices: &[Point3], times: &[f64]) -> Result<Vec<Vec<Point3>>> {
    let x = points_to_tensor(vertices);
    times.iter().map(|&t| Ok(tensor_to_points(&m.warp(&x, t)?))).collect()
}

/// Summary of a warped mesh sequence compared with per-frame scans.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentMetrics {
    /// Mean over frames of the Chamfer distance between warped vertices
    /// (with recomputed normals) and the scan.
    pub cd: f64,
    pub cdn: f64,
    pub std_e: f64,
    pub std_v: f64,
}

pub fn alignment_metrics(template: &Mesh, frames: &[Vec<Point3>], scans: &[PointSet]) -> Result<AlignmentMetrics> {
    if frames.len() != scans.len() {
        return Err(contract(format!("{} warped frames for {} scans", frames.len(), scans.len())));
    }
    let with_normals = scans.iter().all(|s| s.normals.is_some());
    let (mut cd, mut cdn) = (0.0, 0.0);
    for (verts, scan) in frames.iter().zip(scans) {
        let warped = template.with_vertices(verts.clone())?.to_point_set();
        let Chamfer { cd: c, cdn: n } = chamfer(&warped, scan, with_normals)?;
        cd += c;
        cdn += n.unwrap_or(f64::NAN);
    }
    let t = frames.len() as f64;
    let (std_e, std_v) = temporal_stats(frames, &template.edges())?;
    Ok(AlignmentMetrics {
        cd: cd / t,
        cdn: cdn / t,
        std_e,
        std_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{Network, Variant};
    use crate::synth::{gen_elemental, Motion, MotionKind};

    fn identity_model(frames: usize) -> MotionModel<f64> {
        let mut m = MotionModel::siren(Variant::Affinity, 3, 8, 1, frames, 0).unwrap();
        if let Network::Siren(p) = &mut m.net {
            let out = p.output_layer_mut();
            out.weight = Tensor::zeros(out.weight.shape());
        }
        m
    }

    #[test]
    fn identity_model_on_static_data_has_zero_epe() {
        let data = gen_elemental(&Motion::new(MotionKind::Translation, 0.0).unwrap(), 40, 4, 3, 0).unwrap();
        assert_eq!(test_epe(&identity_model(4), &data).unwrap(), 0.0);
        let moving = gen_elemental(&Motion::default_for(MotionKind::Translation), 40, 4, 3, 0).unwrap();
        // mean displacement L1 over frames k/3 of (0.5+0.3+0.2)
        let want = (0.0 + 1.0 / 3.0 + 2.0 / 3.0 + 1.0) / 4.0;
        assert!((test_epe(&identity_model(4), &moving).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn empty_split_is_an_error() {
        let mut data = gen_elemental(&Motion::default_for(MotionKind::Rotation), 20, 3, 3, 0).unwrap();
        data.train_mask = vec![true; 20];
        assert!(test_epe(&identity_model(3), &data).is_err());
    }

    #[test]
    fn static_mesh_metrics() {
        let mesh = Mesh::icosphere(1);
        let frames = vec![mesh.vertices.clone(); 3];
        let scans = vec![mesh.to_point_set(); 3];
        let m = alignment_metrics(&mesh, &frames, &scans).unwrap();
        assert_eq!((m.cd, m.std_e, m.std_v), (0.0, 0.0, 0.0));
        assert!(m.cdn.abs() < 1e-12);
        assert!(alignment_metrics(&mesh, &frames[..2], &scans).is_err());
    }
}

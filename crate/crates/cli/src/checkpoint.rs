//! `DOMA` checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0   magic "DOMA"
//! 4   u32 version = 1
//! 8   u8 variant tag, u8 A-reshape order (0 = row-major), u16 reserved
//! 12  u32 in_dim, u32 d, u32 n, u32 out_dim, f32 omega_first,
//!     u32 pe_levels, u32 spatial_dim
//! 40  f64 t_min, f64 t_max
//! 56  body
//! ```
//!
//! Sine and ReLU networks store each layer's row-major weight followed by
//! its bias. Per-frame fields store a `u32` field count and then one such
//! block per field. Bone clouds store `u32 K`, `u32 T`, `f32 σ`, the bones
//! `[K,3]` and the transforms `[T,K,9]`. All arrays are `f32`.

use std::path::Path;

use motionfield::baselines::{BoneCloudParams, ReluPeParams};
use motionfield::motion::{MotionModel, Network, Variant};
use motionfield::siren::SirenParams;
use motionfield::tensor::Tensor;
use motionfield::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DOMA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 56;
pub const A_ROW_MAJOR: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Arch {
    in_dim: u32,
    d: u32,
    n: u32,
    out_dim: u32,
    omega_first: f32,
    pe_levels: u32,
}

fn siren_arch(p: &SirenParams<f64>) -> Arch {
    Arch {
        in_dim: p.in_dim as u32,
        d: p.hidden_dim as u32,
        n: p.n_hidden as u32,
        out_dim: p.out_dim as u32,
        omega_first: p.omega_first as f32,
        pe_levels: 0,
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f64>) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode(m: &MotionModel<f64>) -> Vec<u8> {
    let arch = match &m.net {
        Network::Siren(p) => siren_arch(p),
        Network::PerFrame(ps) => siren_arch(&ps[0]),
        Network::ReluPe(p) => Arch {
            in_dim: p.in_dim as u32,
            d: p.width as u32,
            n: p.n_hidden as u32,
            out_dim: p.out_dim as u32,
            omega_first: 0.0,
            pe_levels: p.pe_levels as u32,
        },
        Network::BoneCloud(_) => Arch {
            in_dim: 3,
            d: 0,
            n: 0,
            out_dim: 12,
            omega_first: 0.0,
            pe_levels: 0,
        },
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.scalar_count() + 16);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&[m.variant.tag(), A_ROW_MAJOR, 0, 0]);
    for v in [arch.in_dim, arch.d, arch.n, arch.out_dim] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&arch.omega_first.to_le_bytes());
    put_u32(&mut out, arch.pe_levels);
    put_u32(&mut out, m.spatial_dim as u32);
    out.extend_from_slice(&m.t_min.to_le_bytes());
    out.extend_from_slice(&m.t_max.to_le_bytes());
    match &m.net {
        Network::PerFrame(ps) => put_u32(&mut out, ps.len() as u32),
        Network::BoneCloud(p) => {
            put_u32(&mut out, p.bone_count() as u32);
            put_u32(&mut out, p.frames() as u32);
            out.extend_from_slice(&(p.sigma as f32).to_le_bytes());
            put_tensor(&mut out, &p.bones);
        }
        _ => {}
    }
    for t in m.params() {
        put_tensor(&mut out, t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return Err(format_err(self.bytes.len(), format!("truncated: need {len} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fill(&mut self, t: &mut Tensor<f64>) -> Result<()> {
        let raw = self.take(4 * t.len())?;
        for (v, c) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
        }
        Ok(())
    }
}

const MAX_EXTENT: u32 = 1 << 20;

pub fn decode(bytes: &[u8]) -> Result<MotionModel<f64>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let tags = r.take(4)?;
    let variant = Variant::from_tag(tags[0]).ok_or_else(|| format_err(8, format!("unknown variant tag {}", tags[0])))?;
    if tags[1] != A_ROW_MAJOR {
        return Err(format_err(9, format!("unknown A-reshape order {}", tags[1])));
    }
    let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
    if let Some(i) = dims.iter().position(|&v| v > MAX_EXTENT) {
        return Err(format_err(12 + 4 * i, "implausible network extent"));
    }
    let [in_dim, d, n, out_dim] = dims.map(|v| v as usize);
    let omega = r.f32()? as f64;
    let pe_levels = r.u32()? as usize;
    let spatial_dim = r.u32()? as usize;
    let (t_min, t_max) = (r.f64()?, r.f64()?);
    let bad = |offset: usize| move |e: Error| format_err(offset, e.to_string());
    let net = match variant {
        Variant::Trans | Variant::Se3 | Variant::ScaledSe3 | Variant::Affinity => {
            Network::Siren(SirenParams::zeros(in_dim, d, n, out_dim, omega).map_err(bad(12))?)
        }
        Variant::Dpf => {
            let at = r.pos;
            let count = r.u32()?;
            if count == 0 || count > MAX_EXTENT {
                return Err(format_err(at, format!("implausible field count {count}")));
            }
            let one = SirenParams::zeros(in_dim, d, n, out_dim, omega).map_err(bad(12))?;
            Network::PerFrame(vec![one; count as usize])
        }
        Variant::ReluPe => Network::ReluPe(ReluPeParams::init(in_dim, pe_levels, d, n, out_dim, 0).map_err(bad(12))?),
        Variant::BoneCloud => {
            let at = r.pos;
            let (k, frames, sigma) = (r.u32()?, r.u32()?, r.f32()?);
            if k == 0 || frames == 0 || k > MAX_EXTENT || frames > MAX_EXTENT || (k as u64 * frames as u64) > 1 << 28 {
                return Err(format_err(at, "implausible bone cloud extents"));
            }
            let mut p = BoneCloudParams::new(&vec![[0.0; 3]; k as usize], frames as usize, sigma as f64)
                .map_err(bad(at))?;
            r.fill(&mut p.bones)?;
            Network::BoneCloud(p)
        }
    };
    let mut m = MotionModel::new(variant, spatial_dim, t_min, t_max, net).map_err(bad(12))?;
    for t in m.params_mut() {
        r.fill(t)?;
    }
    if r.pos != bytes.len() {
        return Err(format_err(r.pos, "trailing bytes"));
    }
    Ok(m)
}

pub fn save(m: &MotionModel<f64>, path: &Path) -> Result<usize> {
    let bytes = encode(m);
    std::fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load(path: &Path) -> Result<MotionModel<f64>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rounded(mut m: MotionModel<f64>) -> MotionModel<f64> {
        m.round_to_f32();
        m
    }

    #[test]
    fn every_variant_round_trips() {
        let pts: Vec<[f64; 3]> = (0..20).map(|i| [i as f64 * 0.1, 0.0, -(i as f64) * 0.05]).collect();
        let models = vec![
            MotionModel::siren(Variant::Trans, 3, 8, 2, 5, 0).unwrap(),
            MotionModel::siren(Variant::Se3, 3, 8, 1, 5, 1).unwrap(),
            MotionModel::siren(Variant::ScaledSe3, 3, 8, 3, 5, 2).unwrap(),
            MotionModel::siren(Variant::Affinity, 2, 8, 2, 5, 3).unwrap(),
            MotionModel::siren(Variant::Dpf, 3, 8, 2, 5, 4).unwrap(),
            MotionModel::relu_pe(3, 6, 5, 5).unwrap(),
            MotionModel::relu_pe(2, 0, 5, 6).unwrap(),
            MotionModel::bone_cloud(&pts, 7, 5, 10.0, 7).unwrap(),
        ];
        for m in models {
            let m = rounded(m);
            let bytes = encode(&m);
            assert_eq!(bytes.len(), HEADER_LEN + 4 * m.scalar_count() + extra(&m), "{}", m.variant);
            let back = decode(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(encode(&back), bytes);
        }
    }

    fn extra(m: &MotionModel<f64>) -> usize {
        match &m.net {
            Network::PerFrame(_) => 4,
            Network::BoneCloud(p) => 12 + 4 * p.bones.len(),
            _ => 0,
        }
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let m = rounded(MotionModel::siren(Variant::Trans, 3, 8, 1, 3, 0).unwrap());
        let bytes = encode(&m);
        for cut in [0, 3, 8, 30, 55, 60, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 8, .. })));
        let mut bad = bytes.clone();
        bad.extend_from_slice(&[0; 4]);
        assert!(matches!(decode(&bad), Err(Error::Format { .. })));
        let mut bad = bytes;
        bad[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 12, .. })));
    }
}

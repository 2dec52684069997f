//! Binary volume and depth formats plus JSON sidecar helpers.
//!
//! Volume files (`.vol`) start with a 16-byte header: 8-byte magic
//! `DSRBVOL\0`, a little-endian u32 schema version, and a little-endian u32
//! payload kind. The header is followed by the grid description (three u32
//! dims, f64 voxel size, three f64 origin components, all little-endian) and
//! the payload. Values are stored z-fastest (flat index
//! `(ix*ny + iy)*nz + iz`), matching the in-memory layout. Payload kinds:
//!
//! | kind | payload |
//! |------|---------|
//! | 1    | scalar: n x f32 |
//! | 2    | vec3: n x 3 x f32 (per-voxel x, y, z) |
//! | 3    | mask indices: u32 channel count k, then n x u8 |
//! | 4    | tsdf: n x f32 values, then n x u8 known flags |
//! | 5    | mask channels: u32 k, then n x k x f32 |
//!
//! Depth files (`.bin`) start with magic `DSRBDEP\0`, a u32 version, u32
//! width and height, then width*height f32 z-depths, row-major.
//!
//! Readers reject unknown magic, versions, and kinds.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matching::InstanceMaskVolume;
use crate::sim::DepthImage;
use crate::voxel::{GridSpec, ScalarVolume, TsdfVolume, VectorVolume};
use crate::SCHEMA_VERSION;

const VOL_MAGIC: &[u8; 8] = b"DSRBVOL\0";
const DEPTH_MAGIC: &[u8; 8] = b"DSRBDEP\0";

const KIND_SCALAR: u32 = 1;
const KIND_VEC3: u32 = 2;
const KIND_MASK_INDEX: u32 = 3;
const KIND_TSDF: u32 = 4;
const KIND_MASK_CHANNELS: u32 = 5;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Reader { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                what: self.what,
                why: format!(
                    "truncated: need {} bytes at offset {}, have {}",
                    n,
                    self.pos,
                    self.buf.len()
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                what: self.what,
                why: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

fn vol_header(kind: u32, spec: &GridSpec, payload_len: usize) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 44 + payload_len);
    buf.extend_from_slice(VOL_MAGIC);
    buf.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    buf.extend_from_slice(&kind.to_le_bytes());
    for d in spec.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&spec.voxel_size.to_le_bytes());
    for o in spec.origin {
        buf.extend_from_slice(&o.to_le_bytes());
    }
    buf
}

fn read_vol_header(r: &mut Reader, expect_kind: u32) -> Result<GridSpec> {
    let magic = r.take(8)?;
    if magic != VOL_MAGIC {
        return Err(Error::Format {
            what: r.what,
            why: "bad magic".to_string(),
        });
    }
    let version = r.u32()?;
    if version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            got: version,
            expected: SCHEMA_VERSION,
        });
    }
    let kind = r.u32()?;
    if kind != expect_kind {
        return Err(Error::Format {
            what: r.what,
            why: format!("payload kind {kind}, expected {expect_kind}"),
        });
    }
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let voxel_size = r.f64()?;
    let origin = [r.f64()?, r.f64()?, r.f64()?];
    GridSpec::new(dims, voxel_size, origin)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_scalar_volume(path: &Path, vol: &ScalarVolume) -> Result<()> {
    let mut buf = vol_header(KIND_SCALAR, &vol.spec, vol.values.len() * 4);
    for &v in &vol.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_bytes(path, &buf)
}

pub fn read_scalar_volume(path: &Path) -> Result<ScalarVolume> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, "scalar volume");
    let spec = read_vol_header(&mut r, KIND_SCALAR)?;
    let n = spec.voxel_count();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(r.f32()? as f64);
    }
    r.finish()?;
    ScalarVolume::from_values(spec, values)
}

pub fn write_vector_volume(path: &Path, vol: &VectorVolume) -> Result<()> {
    let mut buf = vol_header(KIND_VEC3, &vol.spec, vol.values.len() * 12);
    for v in &vol.values {
        for c in 0..3 {
            buf.extend_from_slice(&(v[c] as f32).to_le_bytes());
        }
    }
    write_bytes(path, &buf)
}

/// Writes a vector volume already held as f32 triples (e.g. recorded flow).
pub fn write_vector_volume_f32(path: &Path, spec: &GridSpec, values: &[[f32; 3]]) -> Result<()> {
    let mut buf = vol_header(KIND_VEC3, spec, values.len() * 12);
    for v in values {
        for c in 0..3 {
            buf.extend_from_slice(&v[c].to_le_bytes());
        }
    }
    write_bytes(path, &buf)
}

pub fn read_vector_volume_f32(path: &Path) -> Result<(GridSpec, Vec<[f32; 3]>)> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, "vector volume");
    let spec = read_vol_header(&mut r, KIND_VEC3)?;
    let n = spec.voxel_count();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push([r.f32()?, r.f32()?, r.f32()?]);
    }
    r.finish()?;
    Ok((spec, values))
}

pub fn write_mask_indices(path: &Path, spec: &GridSpec, k: usize, indices: &[u8]) -> Result<()> {
    let mut buf = vol_header(KIND_MASK_INDEX, spec, 4 + indices.len());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(indices);
    write_bytes(path, &buf)
}

pub fn read_mask_indices(path: &Path) -> Result<(GridSpec, usize, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, "mask volume");
    let spec = read_vol_header(&mut r, KIND_MASK_INDEX)?;
    let k = r.u32()? as usize;
    let indices = r.take(spec.voxel_count())?.to_vec();
    r.finish()?;
    Ok((spec, k, indices))
}

pub fn write_tsdf(path: &Path, vol: &TsdfVolume) -> Result<()> {
    let n = vol.values.len();
    let mut buf = vol_header(KIND_TSDF, &vol.spec, n * 5);
    for &v in &vol.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf.extend(vol.known.iter().map(|&k| k as u8));
    write_bytes(path, &buf)
}

pub fn read_tsdf(path: &Path) -> Result<TsdfVolume> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, "tsdf volume");
    let spec = read_vol_header(&mut r, KIND_TSDF)?;
    let n = spec.voxel_count();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(r.f32()? as f64);
    }
    let known: Vec<bool> = r.take(n)?.iter().map(|&b| b != 0).collect();
    r.finish()?;
    Ok(TsdfVolume {
        spec,
        values,
        known,
    })
}

pub fn write_mask_channels(path: &Path, masks: &InstanceMaskVolume) -> Result<()> {
    let k = masks.channels();
    let raw = masks.raw();
    let mut buf = vol_header(KIND_MASK_CHANNELS, &masks.spec, 4 + raw.len() * 4);
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    for &p in raw {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    write_bytes(path, &buf)
}

pub fn read_mask_channels(path: &Path) -> Result<InstanceMaskVolume> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, "mask channel volume");
    let spec = read_vol_header(&mut r, KIND_MASK_CHANNELS)?;
    let k = r.u32()? as usize;
    let n = spec.voxel_count() * k;
    let mut probs = Vec::with_capacity(n);
    for _ in 0..n {
        probs.push(r.f32()? as f64);
    }
    r.finish()?;
    InstanceMaskVolume::from_raw(spec, k, probs)
}

pub fn write_depth(path: &Path, depth: &DepthImage) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + depth.values.len() * 4);
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    buf.extend_from_slice(&(depth.width as u32).to_le_bytes());
    buf.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for &v in &depth.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_bytes(path, &buf)
}

pub fn read_depth(path: &Path) -> Result<DepthImage> {
    let bytes = read_bytes(path)?;
    let mut r = Reader::new(&bytes, "depth image");
    let magic = r.take(8)?;
    if magic != DEPTH_MAGIC {
        return Err(Error::Format {
            what: "depth image",
            why: "bad magic".to_string(),
        });
    }
    let version = r.u32()?;
    if version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            got: version,
            expected: SCHEMA_VERSION,
        });
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let mut values = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        values.push(r.f32()? as f64);
    }
    r.finish()?;
    Ok(DepthImage {
        width,
        height,
        values,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Schema-version guard for JSON sidecars.
pub fn check_schema_version(got: u32) -> Result<()> {
    if got == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Error::SchemaVersion {
            got,
            expected: SCHEMA_VERSION,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec() -> GridSpec {
        GridSpec::new([6, 5, 4], 0.004, [-0.1, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn scalar_round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.vol");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut vol = ScalarVolume::filled(spec(), 0.0);
        for v in vol.values.iter_mut() {
            *v = rng.random_range(-1.0..1.0f32) as f64;
        }
        write_scalar_volume(&path, &vol).unwrap();
        let back = read_scalar_volume(&path).unwrap();
        assert_eq!(back.spec, vol.spec);
        assert_eq!(back.values, vol.values, "f32-representable values survive");
    }

    #[test]
    fn tsdf_round_trip_keeps_known_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vol");
        let mut t = TsdfVolume::filled(spec(), 1.0, true);
        t.values[3] = -0.25;
        t.known[7] = false;
        write_tsdf(&path, &t).unwrap();
        let back = read_tsdf(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn mask_indices_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.vol");
        let s = spec();
        let indices: Vec<u8> = (0..s.voxel_count()).map(|v| (v % 5) as u8).collect();
        write_mask_indices(&path, &s, 5, &indices).unwrap();
        let (rs, k, ri) = read_mask_indices(&path).unwrap();
        assert_eq!(rs, s);
        assert_eq!(k, 5);
        assert_eq!(ri, indices);
    }

    #[test]
    fn readers_reject_wrong_version_and_kind() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vol");
        let vol = ScalarVolume::filled(spec(), 0.5);
        write_scalar_volume(&path, &vol).unwrap();

        // Wrong kind for the reader.
        assert!(matches!(read_tsdf(&path), Err(Error::Format { .. })));

        // Corrupt the version field.
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_scalar_volume(&path),
            Err(Error::SchemaVersion { .. })
        ));
    }
}

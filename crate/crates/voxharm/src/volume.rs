//! 3-D scalar volumes: container format, min-max normalization with stored
//! inverse, trilinear resampling, and patch extraction.
//!
//! On-disk layout (little-endian): magic `HVOL`, format version u32,
//! `nz ny nx` as u32, `sz sy sx` as f32 millimetres, a norm-present flag u8
//! followed by `original_min original_max` f32 when set, site-id length u16
//! plus UTF-8 bytes, then `nz·ny·nx` f32 voxels z-major.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const HVOL_MAGIC: [u8; 4] = *b"HVOL";
pub const HVOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected \"HVOL\"")]
    BadMagic,
    #[error("unknown format version {0}")]
    UnknownVersion(u32),
    #[error("truncated payload: declared dims require more data than the file holds")]
    Truncated,
    #[error("trailing bytes after declared payload")]
    TrailingData,
    #[error("site id is not valid UTF-8")]
    BadSiteId,
    #[error("dims {dims:?} imply {expected} voxels, got {got}")]
    DimsMismatch {
        dims: (usize, usize, usize),
        expected: usize,
        got: usize,
    },
    #[error("dims {0:?} contain a zero extent")]
    ZeroDim((usize, usize, usize)),
    #[error("normalization record already present")]
    AlreadyNormalized,
    #[error("cannot normalize a constant volume (max == min)")]
    ConstantVolume,
    #[error("no normalization record present")]
    NotNormalized,
    #[error("normalization record requires max > min, got [{min}, {max}]")]
    BadRecord { min: f32, max: f32 },
    #[error("patch {spec:?} exceeds volume dims {dims:?}")]
    PatchOutOfBounds {
        spec: PatchSpec,
        dims: (usize, usize, usize),
    },
    #[error("patch size must be even and at least 8, got {0}")]
    BadPatchSize(usize),
    #[error("resample edge must be at least 8, got {0}")]
    BadEdge(usize),
    #[error("volumes have different dims: {0:?} vs {1:?}")]
    PairedDimsMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Stored inverse of a min-max normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationRecord {
    pub original_min: f32,
    pub original_max: f32,
}

impl NormalizationRecord {
    pub fn new(original_min: f32, original_max: f32) -> Result<Self, VolumeError> {
        if !(original_max > original_min) {
            return Err(VolumeError::BadRecord {
                min: original_min,
                max: original_max,
            });
        }
        Ok(NormalizationRecord {
            original_min,
            original_max,
        })
    }
}

/// A 3-D scalar image. Voxels are stored z-major:
/// `index = z·ny·nx + y·nx + x`. Immutable once constructed.
#[derive(Clone, Debug)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub site_id: String,
    pub norm: Option<NormalizationRecord>,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        data: Vec<f32>,
        site_id: impl Into<String>,
    ) -> Result<Self, VolumeError> {
        let (nz, ny, nx) = dims;
        if nz == 0 || ny == 0 || nx == 0 {
            return Err(VolumeError::ZeroDim(dims));
        }
        let expected = nz * ny * nx;
        if expected != data.len() {
            return Err(VolumeError::DimsMismatch {
                dims,
                expected,
                got: data.len(),
            });
        }
        Ok(Volume {
            dims,
            spacing,
            site_id: site_id.into(),
            norm: None,
            data,
        })
    }

    pub fn with_norm(mut self, norm: NormalizationRecord) -> Self {
        self.norm = Some(norm);
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.0 as f64 * self.spacing.1 as f64 * self.spacing.2 as f64
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.2 + x
    }
}

/// Cube crop location: origin in (z, y, x) voxels plus an even edge ≥ 8.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub origin: (usize, usize, usize),
    pub size: usize,
}

impl PatchSpec {
    pub fn new(origin: (usize, usize, usize), size: usize) -> Result<Self, VolumeError> {
        if size < 8 || size % 2 != 0 {
            return Err(VolumeError::BadPatchSize(size));
        }
        Ok(PatchSpec { origin, size })
    }

    pub fn in_bounds(&self, dims: (usize, usize, usize)) -> bool {
        self.origin.0 + self.size <= dims.0
            && self.origin.1 + self.size <= dims.1
            && self.origin.2 + self.size <= dims.2
    }

    /// Uniformly random origin over all in-bounds positions.
    pub fn random(
        dims: (usize, usize, usize),
        size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, VolumeError> {
        let spec = PatchSpec::new((0, 0, 0), size)?;
        if !spec.in_bounds(dims) {
            return Err(VolumeError::PatchOutOfBounds { spec, dims });
        }
        let z = rng.random_range(0..=dims.0 - size);
        let y = rng.random_range(0..=dims.1 - size);
        let x = rng.random_range(0..=dims.2 - size);
        Ok(PatchSpec {
            origin: (z, y, x),
            size,
        })
    }
}

// ── container i/o ───────────────────────────────────────────────────────

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&HVOL_MAGIC)?;
    w.write_u32::<LittleEndian>(HVOL_VERSION)?;
    w.write_u32::<LittleEndian>(volume.dims.0 as u32)?;
    w.write_u32::<LittleEndian>(volume.dims.1 as u32)?;
    w.write_u32::<LittleEndian>(volume.dims.2 as u32)?;
    w.write_f32::<LittleEndian>(volume.spacing.0)?;
    w.write_f32::<LittleEndian>(volume.spacing.1)?;
    w.write_f32::<LittleEndian>(volume.spacing.2)?;
    match volume.norm {
        Some(rec) => {
            w.write_u8(1)?;
            w.write_f32::<LittleEndian>(rec.original_min)?;
            w.write_f32::<LittleEndian>(rec.original_max)?;
        }
        None => w.write_u8(0)?,
    }
    let site = volume.site_id.as_bytes();
    w.write_u16::<LittleEndian>(site.len() as u16)?;
    w.write_all(site)?;
    for &v in &volume.data {
        w.write_f32::<LittleEndian>(v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume, VolumeError> {
    let mut r = BufReader::new(File::open(path)?);
    let map_eof = |e: io::Error| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            VolumeError::Truncated
        } else {
            VolumeError::Io(e)
        }
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(map_eof)?;
    if magic != HVOL_MAGIC {
        return Err(VolumeError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>().map_err(map_eof)?;
    if version != HVOL_VERSION {
        return Err(VolumeError::UnknownVersion(version));
    }
    let nz = r.read_u32::<LittleEndian>().map_err(map_eof)? as usize;
    let ny = r.read_u32::<LittleEndian>().map_err(map_eof)? as usize;
    let nx = r.read_u32::<LittleEndian>().map_err(map_eof)? as usize;
    let sz = r.read_f32::<LittleEndian>().map_err(map_eof)?;
    let sy = r.read_f32::<LittleEndian>().map_err(map_eof)?;
    let sx = r.read_f32::<LittleEndian>().map_err(map_eof)?;
    let norm = match r.read_u8().map_err(map_eof)? {
        0 => None,
        _ => {
            let min = r.read_f32::<LittleEndian>().map_err(map_eof)?;
            let max = r.read_f32::<LittleEndian>().map_err(map_eof)?;
            Some(NormalizationRecord::new(min, max)?)
        }
    };
    let site_len = r.read_u16::<LittleEndian>().map_err(map_eof)? as usize;
    let mut site = vec![0u8; site_len];
    r.read_exact(&mut site).map_err(map_eof)?;
    let site_id = String::from_utf8(site).map_err(|_| VolumeError::BadSiteId)?;

    let count = nz * ny * nx;
    let mut data = vec![0.0f32; count];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(map_eof)?;
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => {}
        _ => return Err(VolumeError::TrailingData),
    }

    let mut v = Volume::new((nz, ny, nx), (sz, sy, sx), data, site_id)?;
    v.norm = norm;
    Ok(v)
}

// ── normalization ───────────────────────────────────────────────────────

/// Rescales to `[0, 1]` via `(v - min) / (max - min)`, storing the inverse.
pub fn minmax_normalize(volume: &Volume) -> Result<Volume, VolumeError> {
    if volume.norm.is_some() {
        return Err(VolumeError::AlreadyNormalized);
    }
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in volume.data() {
        min = min.min(v);
        max = max.max(v);
    }
    if !(max > min) {
        return Err(VolumeError::ConstantVolume);
    }
    let span = max - min;
    let data = volume.data().iter().map(|&v| (v - min) / span).collect();
    let mut out = Volume::new(volume.dims, volume.spacing, data, volume.site_id.clone())?;
    out.norm = Some(NormalizationRecord::new(min, max)?);
    Ok(out)
}

/// Undoes a stored min-max normalization: `v·(max - min) + min`.
pub fn inverse_normalize(volume: &Volume) -> Result<Volume, VolumeError> {
    let rec = volume.norm.ok_or(VolumeError::NotNormalized)?;
    let span = rec.original_max - rec.original_min;
    let data = volume
        .data()
        .iter()
        .map(|&v| v * span + rec.original_min)
        .collect();
    Volume::new(volume.dims, volume.spacing, data, volume.site_id.clone())
}

// ── resampling ──────────────────────────────────────────────────────────

/// Trilinear resampling onto an `edge³` grid spanning the same physical
/// extent; spacing rescales accordingly. Border samples clamp.
pub fn resample_to_cube(volume: &Volume, edge: usize) -> Result<Volume, VolumeError> {
    if edge < 8 {
        return Err(VolumeError::BadEdge(edge));
    }
    let (nz, ny, nx) = volume.dims;
    let src = volume.data();

    let coord = |i: usize, n_src: usize| -> f32 {
        // voxel-centred: new centre mapped into source index space
        (i as f32 + 0.5) * (n_src as f32 / edge as f32) - 0.5
    };
    let clamp = |u: f32, n: usize| -> (usize, usize, f32) {
        let u = u.clamp(0.0, (n - 1) as f32);
        let lo = u.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, u - lo as f32)
    };

    let mut data = Vec::with_capacity(edge * edge * edge);
    for z in 0..edge {
        let (z0, z1, fz) = clamp(coord(z, nz), nz);
        for y in 0..edge {
            let (y0, y1, fy) = clamp(coord(y, ny), ny);
            for x in 0..edge {
                let (x0, x1, fx) = clamp(coord(x, nx), nx);
                let at = |zi: usize, yi: usize, xi: usize| src[(zi * ny + yi) * nx + xi];
                let c00 = at(z0, y0, x0) + fx * (at(z0, y0, x1) - at(z0, y0, x0));
                let c01 = at(z0, y1, x0) + fx * (at(z0, y1, x1) - at(z0, y1, x0));
                let c10 = at(z1, y0, x0) + fx * (at(z1, y0, x1) - at(z1, y0, x0));
                let c11 = at(z1, y1, x0) + fx * (at(z1, y1, x1) - at(z1, y1, x0));
                let c0 = c00 + fy * (c01 - c00);
                let c1 = c10 + fy * (c11 - c10);
                data.push(c0 + fz * (c1 - c0));
            }
        }
    }

    let spacing = (
        volume.spacing.0 * nz as f32 / edge as f32,
        volume.spacing.1 * ny as f32 / edge as f32,
        volume.spacing.2 * nx as f32 / edge as f32,
    );
    let mut out = Volume::new((edge, edge, edge), spacing, data, volume.site_id.clone())?;
    out.norm = volume.norm;
    Ok(out)
}

// ── patch extraction ────────────────────────────────────────────────────

/// Copies the subcube at `spec` into a `[1, 1, s, s, s]` tensor.
pub fn crop_patch(volume: &Volume, spec: &PatchSpec) -> Result<Tensor, VolumeError> {
    if !spec.in_bounds(volume.dims) {
        return Err(VolumeError::PatchOutOfBounds {
            spec: *spec,
            dims: volume.dims,
        });
    }
    let s = spec.size;
    let (oz, oy, ox) = spec.origin;
    let mut data = Vec::with_capacity(s * s * s);
    for z in 0..s {
        for y in 0..s {
            let row = volume.index(oz + z, oy + y, ox);
            data.extend_from_slice(&volume.data()[row..row + s]);
        }
    }
    Ok(Tensor::new(vec![1, 1, s, s, s], data)?)
}

/// Crops the same location from two co-registered volumes.
pub fn crop_paired_patch(
    input: &Volume,
    target: &Volume,
    spec: &PatchSpec,
) -> Result<(Tensor, Tensor), VolumeError> {
    if input.dims != target.dims {
        return Err(VolumeError::PairedDimsMismatch(input.dims, target.dims));
    }
    Ok((crop_patch(input, spec)?, crop_patch(target, spec)?))
}

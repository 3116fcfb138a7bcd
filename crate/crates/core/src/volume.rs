//! Dense 3D voxel grids and NIfTI-1 I/O.
//!
//! Voxels are stored x-fastest (NIfTI native order): the linear index of
//! `(x, y, z)` is `x + nx * (y + ny * z)`. Every module in the crate uses
//! this order. Orientation fields are carried as opaque header bytes and
//! never interpreted; all geometry is voxel-index geometry.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NIFTI1_HEADER_SIZE: usize = 348;
const SINGLE_FILE_VOX_OFFSET: usize = 352;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
const INTENT_LABEL: i16 = 1002;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("not a NIfTI-1 file (bad magic)")]
    BadMagic,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated voxel data: expected {expected} bytes, found {actual}")]
    TruncatedData { expected: usize, actual: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("expected a {expected:?} volume, got {found:?}")]
    WrongKind { expected: VolumeKind, found: VolumeKind },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimsMismatch(Dims, Dims),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VolumeError>;

/// Voxel counts along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims([nx, ny, nz])
    }

    pub fn nx(&self) -> usize {
        self.0[0]
    }

    pub fn ny(&self) -> usize {
        self.0[1]
    }

    pub fn nz(&self) -> usize {
        self.0[2]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, p: [usize; 3]) -> usize {
        p[0] + self.0[0] * (p[1] + self.0[1] * p[2])
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.0[0];
        let rest = idx / self.0[0];
        [x, rest % self.0[1], rest / self.0[1]]
    }

    pub fn contains(&self, p: [i64; 3]) -> bool {
        (0..3).all(|a| p[a] >= 0 && (p[a] as u64) < self.0[a] as u64)
    }

    pub fn contains_usize(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] < self.0[a])
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    /// CT intensities in Hounsfield units.
    Intensity,
    /// Values restricted to {0, 1}.
    BinaryMask,
    /// Non-negative component ids, 0 is background.
    LabeledMask,
}

/// On-disk voxel datatypes accepted by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataType {
    U8,
    I16,
    I32,
    F32,
}

impl DataType {
    pub fn nifti_code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
        }
    }

    pub fn from_nifti_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(DataType::U8),
            4 => Ok(DataType::I16),
            8 => Ok(DataType::I32),
            16 => Ok(DataType::F32),
            other => Err(VolumeError::UnsupportedDatatype(other)),
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::I32 | DataType::F32 => 4,
        }
    }
}

/// Typed voxel storage. Values are kept in their on-disk type so that a
/// read/write cycle is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
            VoxelData::I32(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn datatype(&self) -> DataType {
        match self {
            VoxelData::U8(_) => DataType::U8,
            VoxelData::I16(_) => DataType::I16,
            VoxelData::I32(_) => DataType::I32,
            VoxelData::F32(_) => DataType::F32,
        }
    }

    #[inline]
    pub fn get_f64(&self, idx: usize) -> f64 {
        match self {
            VoxelData::U8(v) => v[idx] as f64,
            VoxelData::I16(v) => v[idx] as f64,
            VoxelData::I32(v) => v[idx] as f64,
            VoxelData::F32(v) => v[idx] as f64,
        }
    }

    #[inline]
    fn is_nonzero(&self, idx: usize) -> bool {
        match self {
            VoxelData::U8(v) => v[idx] != 0,
            VoxelData::I16(v) => v[idx] != 0,
            VoxelData::I32(v) => v[idx] != 0,
            VoxelData::F32(v) => v[idx] != 0.0,
        }
    }

    /// A buffer of the same type, filled with `value` cast into range.
    pub(crate) fn filled_like(&self, len: usize, value: f64) -> VoxelData {
        match self {
            VoxelData::U8(_) => VoxelData::U8(vec![value.clamp(0.0, 255.0) as u8; len]),
            VoxelData::I16(_) => VoxelData::I16(vec![value.clamp(i16::MIN as f64, i16::MAX as f64) as i16; len]),
            VoxelData::I32(_) => VoxelData::I32(vec![value.clamp(i32::MIN as f64, i32::MAX as f64) as i32; len]),
            VoxelData::F32(_) => VoxelData::F32(vec![value as f32; len]),
        }
    }

    /// Copies element `src_idx` of `src` into `self[dst_idx]`. Both buffers
    /// must share a datatype.
    #[inline]
    pub(crate) fn copy_from(&mut self, dst_idx: usize, src: &VoxelData, src_idx: usize) {
        match (self, src) {
            (VoxelData::U8(d), VoxelData::U8(s)) => d[dst_idx] = s[src_idx],
            (VoxelData::I16(d), VoxelData::I16(s)) => d[dst_idx] = s[src_idx],
            (VoxelData::I32(d), VoxelData::I32(s)) => d[dst_idx] = s[src_idx],
            (VoxelData::F32(d), VoxelData::F32(s)) => d[dst_idx] = s[src_idx],
            _ => unreachable!("copy between mismatched voxel types"),
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * self.datatype().size_bytes());
        match self {
            VoxelData::U8(v) => out.extend_from_slice(v),
            VoxelData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VoxelData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VoxelData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    fn from_bytes(dt: DataType, bytes: &[u8], big_endian: bool) -> VoxelData {
        macro_rules! decode {
            ($t:ty, $n:expr) => {
                bytes
                    .chunks_exact($n)
                    .map(|c| {
                        let arr: [u8; $n] = c.try_into().unwrap();
                        if big_endian {
                            <$t>::from_be_bytes(arr)
                        } else {
                            <$t>::from_le_bytes(arr)
                        }
                    })
                    .collect()
            };
        }
        match dt {
            DataType::U8 => VoxelData::U8(bytes.to_vec()),
            DataType::I16 => VoxelData::I16(decode!(i16, 2)),
            DataType::I32 => VoxelData::I32(decode!(i32, 4)),
            DataType::F32 => VoxelData::F32(decode!(f32, 4)),
        }
    }
}

/// A 3D voxel grid with spacing and retained header bytes.
///
/// Immutable once built; the constructors check the invariants of the
/// requested kind.
#[derive(Debug, Clone)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f32; 3],
    kind: VolumeKind,
    data: VoxelData,
    header_meta: Option<Box<[u8; NIFTI1_HEADER_SIZE]>>,
}

impl PartialEq for Volume3D {
    /// Geometry, kind and voxel values; retained header bytes are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.spacing.map(f32::to_bits) == other.spacing.map(f32::to_bits)
            && self.kind == other.kind
            && self.data == other.data
    }
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: [f32; 3], kind: VolumeKind, data: VoxelData) -> Result<Self> {
        if dims.0.contains(&0) {
            return Err(VolumeError::InvalidVolume(format!("dims must be positive, got {dims}")));
        }
        if data.len() != dims.len() {
            return Err(VolumeError::InvalidVolume(format!("data length {} does not match dims {dims}", data.len())));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::InvalidVolume(format!("spacing must be positive, got {spacing:?}")));
        }
        match kind {
            VolumeKind::BinaryMask => match &data {
                VoxelData::U8(v) if v.iter().all(|&x| x <= 1) => {}
                VoxelData::U8(_) => {
                    return Err(VolumeError::InvalidVolume("binary mask holds values outside {0,1}".into()))
                }
                _ => return Err(VolumeError::InvalidVolume("binary masks are stored as u8".into())),
            },
            VolumeKind::LabeledMask => {
                let ok = match &data {
                    VoxelData::U8(_) => true,
                    VoxelData::I16(v) => v.iter().all(|&x| x >= 0),
                    VoxelData::I32(v) => v.iter().all(|&x| x >= 0),
                    VoxelData::F32(_) => false,
                };
                if !ok {
                    return Err(VolumeError::InvalidVolume("labeled mask must hold non-negative integers".into()));
                }
            }
            VolumeKind::Intensity => {}
        }
        Ok(Volume3D { dims, spacing, kind, data, header_meta: None })
    }

    pub fn intensity(dims: Dims, spacing: [f32; 3], data: Vec<i16>) -> Result<Self> {
        Self::new(dims, spacing, VolumeKind::Intensity, VoxelData::I16(data))
    }

    pub fn binary_mask(dims: Dims, spacing: [f32; 3], data: Vec<u8>) -> Result<Self> {
        Self::new(dims, spacing, VolumeKind::BinaryMask, VoxelData::U8(data))
    }

    pub fn labeled_mask(dims: Dims, spacing: [f32; 3], data: Vec<i32>) -> Result<Self> {
        Self::new(dims, spacing, VolumeKind::LabeledMask, VoxelData::I32(data))
    }

    /// All-zero binary mask.
    pub fn empty_mask(dims: Dims, spacing: [f32; 3]) -> Self {
        Volume3D {
            dims,
            spacing,
            kind: VolumeKind::BinaryMask,
            data: VoxelData::U8(vec![0; dims.len()]),
            header_meta: None,
        }
    }

    /// Builds without re-checking invariants. Callers guarantee them.
    pub(crate) fn from_parts_unchecked(dims: Dims, spacing: [f32; 3], kind: VolumeKind, data: VoxelData) -> Self {
        debug_assert_eq!(dims.len(), data.len());
        Volume3D { dims, spacing, kind, data, header_meta: None }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &VoxelData {
        &self.data
    }

    pub fn header_meta(&self) -> Option<&[u8; NIFTI1_HEADER_SIZE]> {
        self.header_meta.as_deref()
    }

    pub fn with_header_meta(mut self, header: [u8; NIFTI1_HEADER_SIZE]) -> Self {
        self.header_meta = Some(Box::new(header));
        self
    }

    #[inline]
    pub fn value(&self, p: [usize; 3]) -> f64 {
        self.data.get_f64(self.dims.index(p))
    }

    pub fn expect_kind(&self, expected: VolumeKind) -> Result<()> {
        if self.kind == expected {
            Ok(())
        } else {
            Err(VolumeError::WrongKind { expected, found: self.kind })
        }
    }

    /// Raw {0,1} voxels of a binary mask.
    pub fn mask_bits(&self) -> Result<&[u8]> {
        match (&self.kind, &self.data) {
            (VolumeKind::BinaryMask, VoxelData::U8(v)) => Ok(v),
            _ => Err(VolumeError::WrongKind { expected: VolumeKind::BinaryMask, found: self.kind }),
        }
    }

    /// Component ids of a labeled mask, widened to i32.
    pub fn labels(&self) -> Result<Vec<i32>> {
        self.expect_kind(VolumeKind::LabeledMask)?;
        Ok(match &self.data {
            VoxelData::U8(v) => v.iter().map(|&x| x as i32).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as i32).collect(),
            VoxelData::I32(v) => v.clone(),
            VoxelData::F32(_) => unreachable!("labeled masks are integer-typed"),
        })
    }

    /// Nonzero voxels become 1. Works for any kind.
    pub fn to_binary_mask(&self) -> Volume3D {
        let bits = (0..self.data.len()).map(|i| self.data.is_nonzero(i) as u8).collect();
        Volume3D {
            dims: self.dims,
            spacing: self.spacing,
            kind: VolumeKind::BinaryMask,
            data: VoxelData::U8(bits),
            header_meta: self.header_meta.clone(),
        }
    }

    pub fn count_nonzero(&self) -> usize {
        (0..self.data.len()).filter(|&i| self.data.is_nonzero(i)).count()
    }
}

fn infer_kind(data: &VoxelData, intent_code: i16) -> VolumeKind {
    match data {
        VoxelData::U8(v) if v.iter().all(|&x| x <= 1) && intent_code != INTENT_LABEL => VolumeKind::BinaryMask,
        VoxelData::U8(_) => VolumeKind::LabeledMask,
        VoxelData::I16(v) if intent_code == INTENT_LABEL && v.iter().all(|&x| x >= 0) => VolumeKind::LabeledMask,
        VoxelData::I32(v) if intent_code == INTENT_LABEL && v.iter().all(|&x| x >= 0) => VolumeKind::LabeledMask,
        _ => VolumeKind::Intensity,
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => VolumeError::FileNotFound(path.to_path_buf()),
        _ => VolumeError::Io(e),
    })?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        MultiGzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl HeaderReader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

/// Paired-file (`ni1`) data lives next to the header as `.img` or `.img.gz`.
fn companion_image_path(path: &Path) -> Option<PathBuf> {
    let name = path.file_name()?.to_str()?;
    let stem = name.strip_suffix(".hdr.gz").or_else(|| name.strip_suffix(".hdr"))?;
    [format!("{stem}.img"), format!("{stem}.img.gz")].into_iter().map(|n| path.with_file_name(n)).find(|p| p.exists())
}

/// Reads a NIfTI-1 volume (`.nii`, `.nii.gz`, or an `ni1` header/image
/// pair). Gzip is detected from the leading bytes, not the extension.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < NIFTI1_HEADER_SIZE {
        return Err(VolumeError::BadMagic);
    }
    let big_endian = match i32::from_le_bytes(bytes[0..4].try_into().unwrap()) {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        _ => return Err(VolumeError::BadMagic),
    };
    let magic = &bytes[344..348];
    let single_file = match magic {
        b"n+1\0" => true,
        b"ni1\0" => false,
        _ => return Err(VolumeError::BadMagic),
    };
    let h = HeaderReader { bytes: &bytes, big_endian };

    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(VolumeError::InvalidHeader(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..ndim as usize {
        let d = h.i16(42 + 2 * a);
        if d < 1 {
            return Err(VolumeError::InvalidHeader(format!("dim[{}] = {d}", a + 1)));
        }
        if let Some(slot) = dims.get_mut(a) {
            *slot = d as usize;
        } else if d != 1 {
            return Err(VolumeError::InvalidHeader(format!("only 3D volumes are supported (dim[{}] = {d})", a + 1)));
        }
    }
    let dims = Dims(dims);
    let datatype = DataType::from_nifti_code(h.i16(70))?;
    let mut spacing = [1.0f32; 3];
    for (a, s) in spacing.iter_mut().enumerate().take(ndim.min(3) as usize) {
        *s = h.f32(80 + 4 * a).abs();
        if !(s.is_finite() && *s > 0.0) {
            return Err(VolumeError::InvalidHeader(format!("pixdim[{}] = {s}", a + 1)));
        }
    }
    let intent_code = h.i16(68);

    let expected = dims.len() * datatype.size_bytes();
    let payload: Vec<u8>;
    let data_bytes: &[u8] = if single_file {
        let vox_offset = h.f32(108);
        if !(vox_offset.is_finite() && vox_offset >= 0.0) {
            return Err(VolumeError::InvalidHeader(format!("vox_offset = {vox_offset}")));
        }
        let start = (vox_offset as usize).max(NIFTI1_HEADER_SIZE);
        let avail = bytes.len().saturating_sub(start);
        if avail < expected {
            return Err(VolumeError::TruncatedData { expected, actual: avail });
        }
        &bytes[start..start + expected]
    } else {
        let img = companion_image_path(path).ok_or_else(|| VolumeError::FileNotFound(path.with_extension("img")))?;
        payload = read_maybe_gz(&img)?;
        let start = h.f32(108).max(0.0) as usize;
        let avail = payload.len().saturating_sub(start);
        if avail < expected {
            return Err(VolumeError::TruncatedData { expected, actual: avail });
        }
        &payload[start..start + expected]
    };

    let data = VoxelData::from_bytes(datatype, data_bytes, big_endian);
    let kind = infer_kind(&data, intent_code);
    let mut vol = Volume3D::new(dims, spacing, kind, data)?;
    if !big_endian {
        let mut hdr = [0u8; NIFTI1_HEADER_SIZE];
        hdr.copy_from_slice(&bytes[..NIFTI1_HEADER_SIZE]);
        vol.header_meta = Some(Box::new(hdr));
    }
    Ok(vol)
}

fn build_header(vol: &Volume3D) -> [u8; NIFTI1_HEADER_SIZE] {
    let mut hdr = match vol.header_meta() {
        Some(h) => *h,
        None => {
            let mut h = [0u8; NIFTI1_HEADER_SIZE];
            // unit scaling, mm + sec units
            h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
            h[123] = 2 | 8;
            h
        }
    };
    let put_i16 =
        |h: &mut [u8; NIFTI1_HEADER_SIZE], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 =
        |h: &mut [u8; NIFTI1_HEADER_SIZE], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    hdr[0..4].copy_from_slice(&(NIFTI1_HEADER_SIZE as i32).to_le_bytes());
    put_i16(&mut hdr, 40, 3);
    for a in 0..3 {
        put_i16(&mut hdr, 42 + 2 * a, vol.dims.0[a] as i16);
    }
    for a in 3..7 {
        put_i16(&mut hdr, 42 + 2 * a, 1);
    }
    let intent = if vol.kind == VolumeKind::LabeledMask { INTENT_LABEL } else { 0 };
    put_i16(&mut hdr, 68, intent);
    let dt = vol.data.datatype();
    put_i16(&mut hdr, 70, dt.nifti_code());
    put_i16(&mut hdr, 72, (dt.size_bytes() * 8) as i16);
    if f32::from_le_bytes(hdr[76..80].try_into().unwrap()) == 0.0 {
        put_f32(&mut hdr, 76, 1.0);
    }
    for a in 0..3 {
        put_f32(&mut hdr, 80 + 4 * a, vol.spacing[a]);
    }
    put_f32(&mut hdr, 108, SINGLE_FILE_VOX_OFFSET as f32);
    hdr[344..348].copy_from_slice(b"n+1\0");
    hdr
}

/// Serializes a volume as single-file NIfTI-1 bytes (uncompressed).
pub fn encode_nifti(vol: &Volume3D) -> Vec<u8> {
    let dims_fit = vol.dims.0.iter().all(|&d| d <= i16::MAX as usize);
    assert!(dims_fit, "NIfTI-1 dims are limited to {}", i16::MAX);
    let mut out = Vec::with_capacity(SINGLE_FILE_VOX_OFFSET + vol.data.len() * vol.data.datatype().size_bytes());
    out.extend_from_slice(&build_header(vol));
    out.extend_from_slice(&[0u8; SINGLE_FILE_VOX_OFFSET - NIFTI1_HEADER_SIZE]);
    out.extend_from_slice(&vol.data.to_le_bytes());
    out
}

/// Writes a single-file NIfTI-1 volume, gzip-compressed when `compress`.
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>, compress: bool) -> Result<()> {
    if vol.dims.0.iter().any(|&d| d > i16::MAX as usize) {
        return Err(VolumeError::InvalidVolume(format!("dims {} exceed NIfTI-1 limits", vol.dims)));
    }
    let bytes = encode_nifti(vol);
    let file = fs::File::create(path.as_ref())?;
    let mut w = std::io::BufWriter::new(file);
    if compress {
        let mut enc = GzEncoder::new(w, Compression::fast());
        enc.write_all(&bytes)?;
        enc.finish()?.flush()?;
    } else {
        w.write_all(&bytes)?;
        w.flush()?;
    }
    Ok(())
}

//! Fixed-size volumes of interest around a click point.
//!
//! The crop window along each axis is `[c - s/2, c - s/2 + s)` in global
//! indices, with `c` the click coordinate and `s` the VOI size, so the click
//! lands on local index `s/2`. Out-of-volume voxels take the pad value.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lesions::{component_containing, ClickPoint};
use crate::neighborhood::Connectivity;
use crate::volume::{Dims, Volume3D, VolumeError, VolumeKind, VoxelData};

pub const DEFAULT_VOI_SIZE: [usize; 3] = [128, 128, 64];
pub const AIR_HU: f64 = -1024.0;

#[derive(Debug, Error)]
pub enum VoiError {
    #[error("image dims {0} differ from mask dims {1}")]
    DimsMismatch(Dims, Dims),
    #[error("click {0:?} lies outside volume {1}")]
    ClickOutOfVolume([usize; 3], Dims),
    #[error("click {0:?} is not on the mask")]
    ClickNotOnMask([usize; 3]),
    #[error("invalid VOI config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoiConfig {
    pub size: [usize; 3],
    /// Intensity written outside the source volume.
    pub pad_value_image: f64,
    pub pad_value_mask: u8,
}

impl Default for VoiConfig {
    fn default() -> Self {
        VoiConfig { size: DEFAULT_VOI_SIZE, pad_value_image: AIR_HU, pad_value_mask: 0 }
    }
}

impl VoiConfig {
    pub fn with_size(size: [usize; 3]) -> Self {
        VoiConfig { size, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), VoiError> {
        if self.size.iter().any(|&s| s < 2 || s % 2 != 0) {
            return Err(VoiError::InvalidConfig(format!(
                "VOI size components must be even and >= 2, got {:?}",
                self.size
            )));
        }
        if self.pad_value_mask > 1 {
            return Err(VoiError::InvalidConfig("mask pad value must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Parses `128x128x64`.
    pub fn parse_size(s: &str) -> Result<[usize; 3], VoiError> {
        let parts: Vec<&str> = s.split(['x', 'X']).collect();
        let bad = || VoiError::InvalidConfig(format!("expected WxHxD, got '{s}'"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut out = [0usize; 3];
        for (o, p) in out.iter_mut().zip(parts) {
            *o = p.trim().parse().map_err(|_| bad())?;
        }
        Ok(out)
    }
}

/// A cropped image/mask pair plus where it came from.
#[derive(Debug, Clone)]
pub struct VoiSample {
    pub image: Volume3D,
    pub mask: Volume3D,
    /// Global index of the VOI's (0,0,0) corner; may be negative.
    pub offset: [i64; 3],
    /// Click in global coordinates.
    pub click: ClickPoint,
    pub lesion_id: Option<String>,
}

impl VoiSample {
    pub fn local_click(&self) -> [usize; 3] {
        local_index(self.click.pos, self.offset)
    }

    /// Per-axis (low, high) padding in voxels.
    pub fn padding(&self, global: Dims) -> [(usize, usize); 3] {
        let size = self.image.dims().0;
        let mut out = [(0, 0); 3];
        for a in 0..3 {
            let lo = (-self.offset[a]).max(0) as usize;
            let end = self.offset[a] + size[a] as i64;
            let hi = (end - global.0[a] as i64).max(0) as usize;
            out[a] = (lo.min(size[a]), hi.min(size[a]));
        }
        out
    }
}

pub(crate) fn local_index(global: [usize; 3], offset: [i64; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| (global[a] as i64 - offset[a]) as usize)
}

/// VOI corner for a click: `c - s/2` per axis.
pub fn voi_offset(click: [usize; 3], size: [usize; 3]) -> [i64; 3] {
    [0, 1, 2].map(|a| click[a] as i64 - (size[a] / 2) as i64)
}

/// Copies the window `[offset, offset + size)` of `vol`, padding the rest.
/// Kind and voxel type are preserved.
pub fn crop_window(vol: &Volume3D, offset: [i64; 3], size: [usize; 3], pad: f64) -> Volume3D {
    let out_dims = Dims(size);
    let src_dims = vol.dims();
    let mut data = vol.data().filled_like(out_dims.len(), pad);
    // overlap in local coordinates, per axis
    let range = |a: usize| -> (usize, usize) {
        let lo = (-offset[a]).clamp(0, size[a] as i64) as usize;
        let hi = (src_dims.0[a] as i64 - offset[a]).clamp(0, size[a] as i64) as usize;
        (lo, hi.max(lo))
    };
    let (x0, x1) = range(0);
    let (y0, y1) = range(1);
    let (z0, z1) = range(2);
    for z in z0..z1 {
        let gz = (z as i64 + offset[2]) as usize;
        for y in y0..y1 {
            let gy = (y as i64 + offset[1]) as usize;
            for x in x0..x1 {
                let gx = (x as i64 + offset[0]) as usize;
                data.copy_from(out_dims.index([x, y, z]), vol.data(), src_dims.index([gx, gy, gz]));
            }
        }
    }
    Volume3D::from_parts_unchecked(out_dims, vol.spacing(), vol.kind(), data)
}

/// Crops image and mask around `click`. The mask must be binary.
pub fn crop_voi(image: &Volume3D, mask: &Volume3D, click: ClickPoint, cfg: &VoiConfig) -> Result<VoiSample, VoiError> {
    cfg.validate()?;
    if image.dims() != mask.dims() {
        return Err(VoiError::DimsMismatch(image.dims(), mask.dims()));
    }
    mask.expect_kind(VolumeKind::BinaryMask)?;
    if !image.dims().contains_usize(click.pos) {
        return Err(VoiError::ClickOutOfVolume(click.pos, image.dims()));
    }
    let offset = voi_offset(click.pos, cfg.size);
    Ok(VoiSample {
        image: crop_window(image, offset, cfg.size, cfg.pad_value_image),
        mask: crop_window(mask, offset, cfg.size, cfg.pad_value_mask as f64),
        offset,
        click,
        lesion_id: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolationMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone)]
pub struct Isolated {
    pub mask: Volume3D,
    /// Set in lenient mode when the click was on background.
    pub click_on_background: bool,
}

/// Keeps only the connected component under `local_click`.
pub fn isolate_central_lesion(
    voi_mask: &Volume3D,
    local_click: [usize; 3],
    conn: Connectivity,
    mode: IsolationMode,
) -> Result<Isolated, VoiError> {
    let bits = voi_mask.mask_bits()?;
    let dims = voi_mask.dims();
    if !dims.contains_usize(local_click) {
        return Err(VoiError::ClickOutOfVolume(local_click, dims));
    }
    if bits[dims.index(local_click)] == 0 {
        return match mode {
            IsolationMode::Strict => Err(VoiError::ClickNotOnMask(local_click)),
            IsolationMode::Lenient => {
                Ok(Isolated { mask: Volume3D::empty_mask(dims, voi_mask.spacing()), click_on_background: true })
            }
        };
    }
    let mut out = vec![0u8; dims.len()];
    for i in component_containing(bits, dims, local_click, conn) {
        out[i] = 1;
    }
    Ok(Isolated {
        mask: Volume3D::from_parts_unchecked(dims, voi_mask.spacing(), VolumeKind::BinaryMask, VoxelData::U8(out)),
        click_on_background: false,
    })
}

/// Pastes a VOI mask into an otherwise empty global mask. Voxels landing
/// outside the global grid are dropped.
pub fn place_back(voi_mask: &Volume3D, global_dims: Dims, offset: [i64; 3]) -> Result<Volume3D, VoiError> {
    let bits = voi_mask.mask_bits()?;
    let local = voi_mask.dims();
    let mut out = vec![0u8; global_dims.len()];
    for (i, &b) in bits.iter().enumerate() {
        if b == 0 {
            continue;
        }
        let p = local.coords(i);
        let g = [0, 1, 2].map(|a| p[a] as i64 + offset[a]);
        if global_dims.contains(g) {
            out[global_dims.index([g[0] as usize, g[1] as usize, g[2] as usize])] = 1;
        }
    }
    Ok(Volume3D::from_parts_unchecked(global_dims, voi_mask.spacing(), VolumeKind::BinaryMask, VoxelData::U8(out)))
}

/// Sorted global linear indices of the voxels `place_back` would set.
/// Same frame as the dense mask, without allocating the global grid.
pub fn place_back_indices(voi_mask: &Volume3D, global_dims: Dims, offset: [i64; 3]) -> Result<Vec<usize>, VoiError> {
    let bits = voi_mask.mask_bits()?;
    let local = voi_mask.dims();
    // local x-fastest order maps monotonically onto global x-fastest order
    Ok(bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b != 0)
        .filter_map(|(i, _)| {
            let p = local.coords(i);
            let g = [0, 1, 2].map(|a| p[a] as i64 + offset[a]);
            global_dims.contains(g).then(|| global_dims.index([g[0] as usize, g[1] as usize, g[2] as usize]))
        })
        .collect())
}

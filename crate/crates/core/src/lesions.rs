//! Lesion individuation: connected-component labeling of binary masks and
//! per-lesion center click-points.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neighborhood::{Connectivity, Neighbors};
use crate::volume::{Dims, Volume3D, VolumeError, VolumeKind, VoxelData};

#[derive(Debug, Error)]
pub enum LesionError {
    #[error("lesion instance has no voxels")]
    EmptyInstance,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// How a click point was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClickOrigin {
    Centroid,
    Sampled { seed_root: u64, draw_index: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickPoint {
    pub pos: [usize; 3],
    pub origin: ClickOrigin,
}

/// Inclusive voxel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BBox {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }
}

/// One connected lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionInstance {
    pub label: u32,
    /// Voxel coordinates in ascending linear (x-fastest) order.
    pub voxels: Vec<[usize; 3]>,
    pub bbox: BBox,
    pub size_vox: usize,
    pub center: ClickPoint,
}

impl LesionInstance {
    /// Builds an instance from its voxels, sorting them and computing the
    /// bounding box and center.
    pub fn from_voxels(label: u32, mut voxels: Vec<[usize; 3]>) -> Result<Self, LesionError> {
        if voxels.is_empty() {
            return Err(LesionError::EmptyInstance);
        }
        voxels.sort_by_key(|p| (p[2], p[1], p[0]));
        voxels.dedup();
        let mut min = voxels[0];
        let mut max = voxels[0];
        for p in &voxels {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        let center = centroid_click(&voxels)?;
        Ok(LesionInstance { label, size_vox: voxels.len(), bbox: BBox { min, max }, voxels, center })
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        self.bbox.contains(p) && self.voxels.binary_search_by_key(&(p[2], p[1], p[0]), |q| (q[2], q[1], q[0])).is_ok()
    }
}

/// Labels foreground voxels by connected component. Ids are 1..=C in
/// order of first encounter during an x-fastest scan.
pub fn label_components(mask: &Volume3D, conn: Connectivity) -> Result<Volume3D, LesionError> {
    let bits = mask.mask_bits()?;
    let dims = mask.dims();
    let nb = Neighbors::new(dims, conn);
    let mut labels = vec![0i32; dims.len()];
    let mut next = 0i32;
    let mut queue = VecDeque::new();
    for start in 0..bits.len() {
        if bits[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            nb.for_each(i, |j| {
                if bits[j] != 0 && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            });
        }
    }
    Ok(Volume3D::from_parts_unchecked(dims, mask.spacing(), VolumeKind::LabeledMask, VoxelData::I32(labels)))
}

/// One instance per distinct positive label, sorted by label.
pub fn extract_instances(labeled: &Volume3D) -> Result<Vec<LesionInstance>, LesionError> {
    let labels = labeled.labels()?;
    let dims = labeled.dims();
    let mut groups: BTreeMap<i32, Vec<[usize; 3]>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l > 0 {
            groups.entry(l).or_default().push(dims.coords(i));
        }
    }
    groups.into_iter().map(|(l, v)| LesionInstance::from_voxels(l as u32, v)).collect()
}

/// Convenience: binary mask to instances in one step.
pub fn instances_from_mask(mask: &Volume3D, conn: Connectivity) -> Result<Vec<LesionInstance>, LesionError> {
    extract_instances(&label_components(mask, conn)?)
}

/// The instance's centroid click: per-axis mean rounded half up, snapped
/// to the nearest in-lesion voxel when the rounded point falls outside the
/// lesion. Snapping ties go to the lexicographically smallest (x, y, z).
pub fn lesion_center(instance: &LesionInstance) -> Result<ClickPoint, LesionError> {
    centroid_click(&instance.voxels)
}

fn centroid_click(voxels: &[[usize; 3]]) -> Result<ClickPoint, LesionError> {
    if voxels.is_empty() {
        return Err(LesionError::EmptyInstance);
    }
    let n = voxels.len() as f64;
    let mut sum = [0u128; 3];
    for p in voxels {
        for a in 0..3 {
            sum[a] += p[a] as u128;
        }
    }
    let mean = sum.map(|s| s as f64 / n);
    let rounded = mean.map(|m| (m + 0.5).floor() as usize);
    let key = |p: &[usize; 3]| (p[2], p[1], p[0]);
    let pos = if voxels.binary_search_by_key(&key(&rounded), key).is_ok() {
        rounded
    } else {
        let d2 = |p: &[usize; 3]| -> f64 { (0..3).map(|a| (p[a] as f64 - mean[a]).powi(2)).sum() };
        *voxels.iter().min_by(|a, b| d2(a).total_cmp(&d2(b)).then_with(|| a.cmp(b))).expect("non-empty")
    };
    Ok(ClickPoint { pos, origin: ClickOrigin::Centroid })
}

/// Voxel set of the connected component of `mask` containing `seed`.
pub(crate) fn component_containing(mask: &[u8], dims: Dims, seed: [usize; 3], conn: Connectivity) -> Vec<usize> {
    crate::neighborhood::flood_fill(dims, dims.index(seed), conn, None, |i| mask[i] != 0).order
}

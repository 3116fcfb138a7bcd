//! Deterministic in-lesion click sampling and lesion-shift augmentation.
//!
//! Every draw is addressed by `(seed_root, lesion_id, draw_index)`: a
//! ChaCha20 key is derived from the seed and lesion id, and the draw index
//! selects the stream. Results do not depend on call order or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lesions::{ClickOrigin, ClickPoint, LesionError, LesionInstance};
use crate::neighborhood::Connectivity;
use crate::voi::{crop_voi, isolate_central_lesion, IsolationMode, VoiConfig, VoiError, VoiSample};
use crate::volume::Volume3D;

pub const DEFAULT_AUGMENTED_CLICKS: usize = 2;

#[derive(Debug, Error)]
pub enum ClickError {
    #[error(transparent)]
    Lesion(#[from] LesionError),
    #[error(transparent)]
    Voi(#[from] VoiError),
}

/// Key for the per-lesion stream family.
fn lesion_key(seed_root: u64, lesion_id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"ulsforge/click/v1");
    h.update(seed_root.to_le_bytes());
    h.update((lesion_id.len() as u64).to_le_bytes());
    h.update(lesion_id.as_bytes());
    h.finalize().into()
}

/// Uniform index in `0..n` for one addressed draw.
fn draw_index(key: &[u8; 32], draw: u64, n: usize) -> usize {
    let mut rng = ChaCha20Rng::from_seed(*key);
    rng.set_stream(draw);
    // u64 range keeps the result identical on 32- and 64-bit targets
    rng.gen_range(0..n as u64) as usize
}

/// `k` click points drawn uniformly, with replacement, from the lesion's
/// voxels.
pub fn sample_click_points(
    instance: &LesionInstance,
    k: usize,
    seed_root: u64,
    lesion_id: &str,
) -> Result<Vec<ClickPoint>, ClickError> {
    if instance.voxels.is_empty() {
        return Err(LesionError::EmptyInstance.into());
    }
    let key = lesion_key(seed_root, lesion_id);
    Ok((0..k as u64)
        .map(|i| ClickPoint {
            pos: instance.voxels[draw_index(&key, i, instance.voxels.len())],
            origin: ClickOrigin::Sampled { seed_root, draw_index: i },
        })
        .collect())
}

/// The centroid click plus `k` sampled clicks for one lesion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickPlan {
    pub lesion_id: String,
    pub normal: ClickPoint,
    pub augmented: Vec<ClickPoint>,
    pub seed_root: u64,
    pub k: usize,
}

impl ClickPlan {
    pub fn build(instance: &LesionInstance, k: usize, seed_root: u64, lesion_id: &str) -> Result<Self, ClickError> {
        Ok(ClickPlan {
            lesion_id: lesion_id.to_owned(),
            normal: instance.center,
            augmented: sample_click_points(instance, k, seed_root, lesion_id)?,
            seed_root,
            k,
        })
    }

    /// `[normal, aug1, ..., augk]`.
    pub fn clicks(&self) -> Vec<ClickPoint> {
        std::iter::once(self.normal).chain(self.augmented.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub k: usize,
    pub seed_root: u64,
    pub connectivity: Connectivity,
}

impl Default for ShiftParams {
    fn default() -> Self {
        ShiftParams { k: DEFAULT_AUGMENTED_CLICKS, seed_root: 0, connectivity: Connectivity::default() }
    }
}

/// Crops one VOI per planned click and keeps only the clicked lesion in
/// each mask. Sample order is `[normal, aug1, ..., augk]`.
pub fn generate_shifted_samples(
    image: &Volume3D,
    mask: &Volume3D,
    instance: &LesionInstance,
    lesion_id: &str,
    cfg: &VoiConfig,
    params: &ShiftParams,
) -> Result<(ClickPlan, Vec<VoiSample>), ClickError> {
    let plan = ClickPlan::build(instance, params.k, params.seed_root, lesion_id)?;
    let samples = plan
        .clicks()
        .into_iter()
        .map(|c| {
            let mut s = crop_voi(image, mask, c, cfg)?;
            s.mask = isolate_central_lesion(&s.mask, s.local_click(), params.connectivity, IsolationMode::Strict)?.mask;
            s.lesion_id = Some(lesion_id.to_owned());
            Ok(s)
        })
        .collect::<Result<Vec<_>, ClickError>>()?;
    Ok((plan, samples))
}

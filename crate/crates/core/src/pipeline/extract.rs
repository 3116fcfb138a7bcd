//! Persisting VOIs (centered and shifted) with an index file.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{group_entries, with_pool, EvalConfig, LoadedPair};
use super::manifest::{Manifest, ManifestEntry};
use super::PipelineError;
use crate::clicks::{generate_shifted_samples, ClickPlan, ShiftParams};
use crate::lesions::ClickPoint;
use crate::segmenter::sanitize_file_stem;
use crate::voi::{crop_voi, isolate_central_lesion, IsolationMode};
use crate::volume::write_volume;

pub const INDEX_FILE: &str = "index.json";

/// One persisted VOI pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedSample {
    pub lesion_id: String,
    /// 0 = centroid click, i = i-th shifted click.
    pub variant: usize,
    pub image_file: String,
    pub mask_file: String,
    pub offset: [i64; 3],
    pub click: ClickPoint,
    /// Per-axis (low, high) padding in voxels.
    pub padding: [(usize, usize); 3],
    pub lesion_voxels_in_voi: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractFailure {
    pub lesion_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractIndex {
    pub voi_size: [usize; 3],
    pub pad_value_image: f64,
    pub connectivity: crate::neighborhood::Connectivity,
    pub augment_k: usize,
    pub seed_root: Option<u64>,
    pub samples: Vec<ExtractedSample>,
    pub plans: Vec<ClickPlan>,
    pub failures: Vec<ExtractFailure>,
}

fn extract_one(
    pair: &LoadedPair,
    entry: &ManifestEntry,
    cfg: &EvalConfig,
    augment_k: usize,
    out_dir: &Path,
) -> Result<(Option<ClickPlan>, Vec<ExtractedSample>), PipelineError> {
    let (crop_mask, instance) = pair.resolve(entry, cfg.connectivity)?;
    let (plan, samples) = if augment_k > 0 {
        let params = ShiftParams { k: augment_k, seed_root: cfg.seed_root, connectivity: cfg.connectivity };
        let (plan, samples) =
            generate_shifted_samples(&pair.image, &crop_mask, &instance, &entry.lesion_id, &cfg.voi, &params)?;
        (Some(plan), samples)
    } else {
        let mut s = crop_voi(&pair.image, &crop_mask, instance.center, &cfg.voi)?;
        s.mask = isolate_central_lesion(&s.mask, s.local_click(), cfg.connectivity, IsolationMode::Strict)?.mask;
        (None, vec![s])
    };
    let base = sanitize_file_stem(&entry.lesion_id);
    let mut out = Vec::with_capacity(samples.len());
    for (variant, s) in samples.iter().enumerate() {
        let stem = if variant == 0 { base.clone() } else { format!("{base}_aug{variant}") };
        let image_file = format!("{stem}_img.nii.gz");
        let mask_file = format!("{stem}_mask.nii.gz");
        write_volume(&s.image, out_dir.join(&image_file), true)?;
        write_volume(&s.mask, out_dir.join(&mask_file), true)?;
        out.push(ExtractedSample {
            lesion_id: entry.lesion_id.clone(),
            variant,
            image_file,
            mask_file,
            offset: s.offset,
            click: s.click,
            padding: s.padding(pair.image.dims()),
            lesion_voxels_in_voi: s.mask.count_nonzero(),
        });
    }
    Ok((plan, out))
}

/// Crops every lesion's VOI (plus `augment_k` shifted VOIs) into `out_dir`
/// as `<lesion_id>_img.nii.gz` / `<lesion_id>_mask.nii.gz`
/// (`<lesion_id>_aug<i>_*` for shifted crops) and writes `index.json`.
pub fn extract_vois(
    m: &Manifest,
    cfg: &EvalConfig,
    augment_k: usize,
    out_dir: &Path,
) -> Result<ExtractIndex, PipelineError> {
    m.validate_schema()?;
    cfg.voi.validate()?;
    fs::create_dir_all(out_dir)?;
    let groups = group_entries(m);
    type Item = (String, Result<(Option<ClickPlan>, Vec<ExtractedSample>), String>);
    let mut results: Vec<Item> = with_pool(cfg.workers, || {
        groups
            .par_iter()
            .flat_map_iter(|((img, msk), entries)| {
                let pair = LoadedPair::load(img, msk, cfg.connectivity);
                entries
                    .iter()
                    .map(|e| {
                        let r = match &pair {
                            Ok(p) => extract_one(p, e, cfg, augment_k, out_dir).map_err(|e| e.to_string()),
                            Err(err) => Err(err.to_string()),
                        };
                        (e.lesion_id.clone(), r)
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    })?;
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let mut index = ExtractIndex {
        voi_size: cfg.voi.size,
        pad_value_image: cfg.voi.pad_value_image,
        connectivity: cfg.connectivity,
        augment_k,
        seed_root: (augment_k > 0).then_some(cfg.seed_root),
        samples: Vec::new(),
        plans: Vec::new(),
        failures: Vec::new(),
    };
    for (lesion_id, r) in results {
        match r {
            Ok((plan, samples)) => {
                index.plans.extend(plan);
                index.samples.extend(samples);
            }
            Err(error) => index.failures.push(ExtractFailure { lesion_id, error }),
        }
    }
    let json = serde_json::to_string_pretty(&index).map_err(|e| PipelineError::Serde(e.to_string()))?;
    fs::write(out_dir.join(INDEX_FILE), json + "\n")?;
    Ok(index)
}

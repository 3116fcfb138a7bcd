//! Per-lesion Dice and robustness runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEntry};
use super::PipelineError;
use crate::clicks::ClickPlan;
use crate::lesions::{instances_from_mask, ClickPoint, LesionInstance};
use crate::metrics::overlap_sorted;
use crate::neighborhood::Connectivity;
use crate::segmenter::{CallContext, Segmenter};
use crate::voi::{crop_voi, isolate_central_lesion, place_back_indices, IsolationMode, VoiConfig};
use crate::volume::{read_volume, Volume3D, VolumeKind, VoxelData};

/// Column order of the per-lesion CSV.
pub const RECORD_CSV_COLUMNS: [&str; 10] =
    ["lesion_id", "model_id", "patient_id", "dataset", "location", "dice", "robustness", "flags", "seed_root", "error"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flag {
    /// At least one prediction for the lesion was empty.
    EmptyPrediction,
    /// Dice of 1.0 from two empty masks.
    EmptyEmpty,
    /// The built-in grower hit its voxel cap.
    Truncated,
    /// A click fell outside the grower window and an empty mask was used.
    LenientIsolation,
    /// The lesion could not be evaluated; scores are 0 sentinels.
    Failed,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::EmptyPrediction => "empty-prediction",
            Flag::EmptyEmpty => "empty-empty",
            Flag::Truncated => "truncated",
            Flag::LenientIsolation => "lenient-isolation",
            Flag::Failed => "failed",
        }
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Flag {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "empty-prediction" => Flag::EmptyPrediction,
            "empty-empty" => Flag::EmptyEmpty,
            "truncated" => Flag::Truncated,
            "lenient-isolation" => Flag::LenientIsolation,
            "failed" => Flag::Failed,
            other => return Err(PipelineError::Parse(format!("unknown flag '{other}'"))),
        })
    }
}

/// Evaluation result for one lesion and one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub lesion_id: String,
    pub model_id: String,
    pub patient_id: String,
    pub dataset: String,
    pub location: String,
    pub dice: f64,
    pub robustness: Option<f64>,
    pub flags: BTreeSet<Flag>,
    pub seed_root: Option<u64>,
    pub error: Option<String>,
}

impl EvalRecord {
    fn blank(entry: &ManifestEntry, model_id: &str, seed_root: Option<u64>) -> Self {
        EvalRecord {
            lesion_id: entry.lesion_id.clone(),
            model_id: model_id.to_owned(),
            patient_id: entry.patient_id.clone(),
            dataset: entry.dataset.clone(),
            location: entry.location.clone(),
            dice: 0.0,
            robustness: None,
            flags: BTreeSet::new(),
            seed_root,
            error: None,
        }
    }

    fn failed(mut self, robust: bool, err: impl fmt::Display) -> Self {
        self.dice = 0.0;
        self.robustness = robust.then_some(0.0);
        self.flags.insert(Flag::Failed);
        self.error = Some(err.to_string());
        self
    }

    pub fn is_failed(&self) -> bool {
        self.flags.contains(&Flag::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Dice,
    Robustness,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub voi: VoiConfig,
    /// Used for lesion individuation and central-lesion isolation.
    pub connectivity: Connectivity,
    /// Shifted clicks per lesion in robustness runs.
    pub k: usize,
    pub seed_root: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            voi: VoiConfig::default(),
            connectivity: Connectivity::default(),
            k: crate::clicks::DEFAULT_AUGMENTED_CLICKS,
            seed_root: 0,
            workers: 1,
        }
    }
}

/// Settings and conventions needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub kind: RunKind,
    pub model_id: String,
    pub seed_root: Option<u64>,
    pub k: Option<usize>,
    pub voi_size: [usize; 3],
    pub pad_value_image: f64,
    pub pad_value_mask: u8,
    pub connectivity: Connectivity,
    pub n_lesions: usize,
    pub conventions: BTreeMap<String, String>,
}

impl RunMetadata {
    pub fn new(kind: RunKind, model_id: &str, cfg: &EvalConfig, n_lesions: usize) -> Self {
        let robust = kind == RunKind::Robustness;
        let conventions = [
            ("center_click", "per-axis voxel centroid rounded half up, snapped to nearest lesion voxel (ties: smallest x,y,z)"),
            ("voi_window", "[c - s/2, c - s/2 + s) per axis"),
            ("ground_truth", "connected component under the centroid click within the centered VOI"),
            ("dice_frame", "global voxel grid after placing predictions back"),
            ("empty_mask_dice", "empty vs empty = 1.0 (flagged empty-empty); empty vs non-empty = 0.0"),
            ("click_sampler", "uniform with replacement over lesion voxels; ChaCha20 keyed by (seed_root, lesion_id), stream = draw index"),
            ("robustness", "mean pairwise Dice over the centroid and shifted-click predictions"),
            ("failures", "flagged 'failed' with dice = 0 and robustness = 0 sentinels"),
        ]
        .into_iter()
        .filter(|(k, _)| robust || !matches!(*k, "click_sampler" | "robustness"))
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect();
        RunMetadata {
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            kind,
            model_id: model_id.to_owned(),
            seed_root: robust.then_some(cfg.seed_root),
            k: robust.then_some(cfg.k),
            voi_size: cfg.voi.size,
            pad_value_image: cfg.voi.pad_value_image,
            pad_value_mask: cfg.voi.pad_value_mask,
            connectivity: cfg.connectivity,
            n_lesions,
            conventions,
        }
    }
}

/// Mask file contents, shared by all lesions of an (image, mask) pair.
pub(super) struct LoadedPair {
    pub image: Volume3D,
    pub mask_file: Volume3D,
    /// Binarized mask file when it is not a multi-label file.
    binary: Option<Arc<Volume3D>>,
    components: Option<Vec<LesionInstance>>,
}

impl LoadedPair {
    pub fn load(image: &Path, mask: &Path, conn: Connectivity) -> Result<Self, PipelineError> {
        let image = read_volume(image)?;
        let mask_file = read_volume(mask)?;
        if image.dims() != mask_file.dims() {
            return Err(crate::voi::VoiError::DimsMismatch(image.dims(), mask_file.dims()).into());
        }
        let multi_label = mask_file.kind() == VolumeKind::LabeledMask && max_value(mask_file.data()) > 1.0;
        let (binary, components) = if multi_label {
            (None, None)
        } else {
            let b = mask_file.to_binary_mask();
            let c = instances_from_mask(&b, conn)?;
            (Some(Arc::new(b)), Some(c))
        };
        Ok(LoadedPair { image, mask_file, binary, components })
    }

    /// The binary mask to crop and the lesion instance for an entry.
    pub fn resolve(
        &self,
        entry: &ManifestEntry,
        conn: Connectivity,
    ) -> Result<(Arc<Volume3D>, LesionInstance), PipelineError> {
        let fail = |reason: String| PipelineError::Lesion { lesion_id: entry.lesion_id.clone(), reason };
        if let Some(click) = entry.click {
            if !self.image.dims().contains_usize(click) {
                return Err(fail(format!("click {click:?} outside volume {}", self.image.dims())));
            }
        }
        match (&self.binary, &self.components) {
            (Some(binary), Some(components)) => {
                let inst = pick_instance(components, entry.component_label, entry.click).map_err(fail)?;
                Ok((Arc::clone(binary), inst))
            }
            _ => {
                let labels = self.mask_file.labels()?;
                let label = match (entry.component_label, entry.click) {
                    (Some(l), _) => l as i32,
                    (None, Some(c)) => labels[self.mask_file.dims().index(c)],
                    (None, None) => 0,
                };
                let bits: Vec<u8> = if label > 0 {
                    labels.iter().map(|&v| (v == label) as u8).collect()
                } else {
                    labels.iter().map(|&v| (v > 0) as u8).collect()
                };
                if bits.iter().all(|&b| b == 0) {
                    return Err(fail(format!("label {label} not present in mask file")));
                }
                let sub = Volume3D::new(
                    self.mask_file.dims(),
                    self.mask_file.spacing(),
                    VolumeKind::BinaryMask,
                    VoxelData::U8(bits),
                )?;
                let components = instances_from_mask(&sub, conn)?;
                let inst = pick_instance(&components, None, entry.click).map_err(fail)?;
                Ok((Arc::new(sub), inst))
            }
        }
    }
}

fn max_value(d: &VoxelData) -> f64 {
    (0..d.len()).map(|i| d.get_f64(i)).fold(0.0, f64::max)
}

/// By component id, else by click, else the largest (lowest id on ties).
fn pick_instance(
    components: &[LesionInstance],
    label: Option<u32>,
    click: Option<[usize; 3]>,
) -> Result<LesionInstance, String> {
    if components.is_empty() {
        return Err("mask holds no lesion voxels".into());
    }
    if let Some(l) = label {
        return components
            .iter()
            .find(|c| c.label == l)
            .cloned()
            .ok_or_else(|| format!("component {l} not found ({} components)", components.len()));
    }
    if let Some(p) = click {
        return components
            .iter()
            .find(|c| c.contains(p))
            .cloned()
            .ok_or_else(|| format!("click {p:?} is not on any lesion"));
    }
    let mut best = &components[0];
    for c in &components[1..] {
        if c.size_vox > best.size_vox {
            best = c;
        }
    }
    Ok(best.clone())
}

/// Groups entries sharing image and mask files so each pair loads once.
pub(super) fn group_entries(m: &Manifest) -> Vec<((PathBuf, PathBuf), Vec<&ManifestEntry>)> {
    let mut groups: BTreeMap<(PathBuf, PathBuf), Vec<&ManifestEntry>> = BTreeMap::new();
    for e in &m.entries {
        groups.entry((e.image_path.clone(), e.mask_path.clone())).or_default().push(e);
    }
    groups.into_iter().collect()
}

pub(super) fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| PipelineError::InvalidArgument(e.to_string()))?;
    Ok(pool.install(f))
}

fn evaluate_lesion(
    pair: &LoadedPair,
    entry: &ManifestEntry,
    seg: &dyn Segmenter,
    cfg: &EvalConfig,
    robust: bool,
    model_id: &str,
) -> EvalRecord {
    let record = EvalRecord::blank(entry, model_id, robust.then_some(cfg.seed_root));
    match score_lesion(pair, entry, seg, cfg, robust) {
        Ok(scored) => {
            let mut r = record;
            r.dice = scored.dice;
            r.robustness = scored.robustness;
            r.flags = scored.flags;
            r
        }
        Err(e) => record.failed(robust, e),
    }
}

struct Scored {
    dice: f64,
    robustness: Option<f64>,
    flags: BTreeSet<Flag>,
}

fn score_lesion(
    pair: &LoadedPair,
    entry: &ManifestEntry,
    seg: &dyn Segmenter,
    cfg: &EvalConfig,
    robust: bool,
) -> Result<Scored, PipelineError> {
    let (crop_mask, instance) = pair.resolve(entry, cfg.connectivity)?;
    let clicks: Vec<ClickPoint> = if robust {
        ClickPlan::build(&instance, cfg.k, cfg.seed_root, &entry.lesion_id)?.clicks()
    } else {
        vec![instance.center]
    };
    let global = pair.image.dims();
    let mut flags = BTreeSet::new();
    let mut gt: Vec<usize> = Vec::new();
    let mut preds: Vec<Vec<usize>> = Vec::with_capacity(clicks.len());
    for (variant, click) in clicks.into_iter().enumerate() {
        let sample = crop_voi(&pair.image, &crop_mask, click, &cfg.voi)?;
        let local = sample.local_click();
        if variant == 0 {
            let iso = isolate_central_lesion(&sample.mask, local, cfg.connectivity, IsolationMode::Strict)?;
            gt = place_back_indices(&iso.mask, global, sample.offset)?;
        }
        let out = seg.segment(&sample.image, local, CallContext { lesion_id: &entry.lesion_id, variant })?;
        if out.truncated {
            flags.insert(Flag::Truncated);
        }
        if out.seed_outside_window {
            flags.insert(Flag::LenientIsolation);
        }
        let placed = place_back_indices(&out.mask, global, sample.offset)?;
        if placed.is_empty() {
            flags.insert(Flag::EmptyPrediction);
        }
        preds.push(placed);
    }
    let centered = overlap_sorted(&gt, &preds[0]);
    let mut any_empty_pair = centered.both_empty();
    let robustness = if robust {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..preds.len() {
            for j in i + 1..preds.len() {
                let o = overlap_sorted(&preds[i], &preds[j]);
                any_empty_pair |= o.both_empty();
                sum += o.dice();
                n += 1;
            }
        }
        Some(if n == 0 { 1.0 } else { sum / n as f64 })
    } else {
        None
    };
    if any_empty_pair {
        flags.insert(Flag::EmptyEmpty);
    }
    Ok(Scored { dice: centered.dice(), robustness, flags })
}

fn run(m: &Manifest, seg: &dyn Segmenter, cfg: &EvalConfig, robust: bool) -> Result<Vec<EvalRecord>, PipelineError> {
    m.validate_schema()?;
    cfg.voi.validate()?;
    if robust && cfg.k == 0 {
        return Err(PipelineError::InvalidArgument("robustness needs k >= 1 shifted clicks".into()));
    }
    let model_id = seg.model_id();
    let groups = group_entries(m);
    let mut records: Vec<EvalRecord> = with_pool(cfg.workers, || {
        groups
            .par_iter()
            .flat_map_iter(|((img, msk), entries)| {
                let out: Vec<EvalRecord> = match LoadedPair::load(img, msk, cfg.connectivity) {
                    Ok(pair) => {
                        entries.iter().map(|e| evaluate_lesion(&pair, e, seg, cfg, robust, &model_id)).collect()
                    }
                    Err(err) => entries
                        .iter()
                        .map(|e| EvalRecord::blank(e, &model_id, robust.then_some(cfg.seed_root)).failed(robust, &err))
                        .collect(),
                };
                out
            })
            .collect()
    })?;
    records.sort_by(|a, b| a.lesion_id.cmp(&b.lesion_id));
    Ok(records)
}

/// Centered-click Dice for every lesion, sorted by lesion id. Lesion-level
/// failures become flagged records.
pub fn run_dice_eval(m: &Manifest, seg: &dyn Segmenter, cfg: &EvalConfig) -> Result<Vec<EvalRecord>, PipelineError> {
    run(m, seg, cfg, false)
}

/// Centered-click Dice plus robustness over the centroid click and `k`
/// sampled clicks for every lesion.
pub fn run_robustness_eval(
    m: &Manifest,
    seg: &dyn Segmenter,
    cfg: &EvalConfig,
) -> Result<Vec<EvalRecord>, PipelineError> {
    run(m, seg, cfg, true)
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that parses back to the same bits
    format!("{v}")
}

pub fn write_records_csv<W: std::io::Write>(w: W, records: &[EvalRecord]) -> Result<(), PipelineError> {
    let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let ser = |e: csv::Error| PipelineError::Serde(e.to_string());
    wtr.write_record(RECORD_CSV_COLUMNS).map_err(ser)?;
    for r in records {
        let flags: Vec<&str> = r.flags.iter().map(|f| f.as_str()).collect();
        wtr.write_record([
            r.lesion_id.as_str(),
            &r.model_id,
            &r.patient_id,
            &r.dataset,
            &r.location,
            &fmt_f64(r.dice),
            &r.robustness.map(fmt_f64).unwrap_or_default(),
            &flags.join(";"),
            &r.seed_root.map(|s| s.to_string()).unwrap_or_default(),
            r.error.as_deref().unwrap_or(""),
        ])
        .map_err(ser)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>, PipelineError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| PipelineError::Parse(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| PipelineError::Parse(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != RECORD_CSV_COLUMNS {
        return Err(PipelineError::Parse(format!("unexpected columns in {}", path.display())));
    }
    let parse_f = |s: &str| s.parse::<f64>().map_err(|e| PipelineError::Parse(format!("'{s}': {e}")));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| PipelineError::Parse(e.to_string()))?;
        let flags =
            row[7].split(';').filter(|s| !s.is_empty()).map(Flag::from_str).collect::<Result<BTreeSet<_>, _>>()?;
        out.push(EvalRecord {
            lesion_id: row[0].to_owned(),
            model_id: row[1].to_owned(),
            patient_id: row[2].to_owned(),
            dataset: row[3].to_owned(),
            location: row[4].to_owned(),
            dice: parse_f(&row[5])?,
            robustness: if row[6].is_empty() { None } else { Some(parse_f(&row[6])?) },
            flags,
            seed_root: if row[8].is_empty() {
                None
            } else {
                Some(row[8].parse().map_err(|e| PipelineError::Parse(format!("seed_root: {e}")))?)
            },
            error: (!row[9].is_empty()).then(|| row[9].to_owned()),
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct RunFile {
    metadata: RunMetadata,
    records: Vec<EvalRecord>,
}

/// Writes `records.csv` and `run.json` into `dir`.
pub fn write_run_dir(dir: &Path, metadata: &RunMetadata, records: &[EvalRecord]) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    write_records_csv(fs::File::create(dir.join("records.csv"))?, records)?;
    let run = RunFile { metadata: metadata.clone(), records: records.to_vec() };
    let json = serde_json::to_string_pretty(&run).map_err(|e| PipelineError::Serde(e.to_string()))?;
    fs::write(dir.join("run.json"), json + "\n")?;
    Ok(())
}

pub fn read_run_dir(dir: &Path) -> Result<(RunMetadata, Vec<EvalRecord>), PipelineError> {
    let text = fs::read_to_string(dir.join("run.json"))?;
    let run: RunFile = serde_json::from_str(&text).map_err(|e| PipelineError::Parse(e.to_string()))?;
    Ok((run.metadata, run.records))
}

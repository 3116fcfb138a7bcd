//! Lesion manifests: JSON (canonical) or CSV, plus patient-level splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;

pub const UNDEFINED_LOCATION: &str = "undefined";

fn undefined_location() -> String {
    UNDEFINED_LOCATION.to_owned()
}

/// One lesion to evaluate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub lesion_id: String,
    pub patient_id: String,
    pub dataset: String,
    #[serde(default = "undefined_location")]
    pub location: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    /// Which lesion in the mask file. For a labeled mask file this is the
    /// stored label value; for a binary file it is the connected-component
    /// id (1-based, x-fastest scan order).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_label: Option<u32>,
    /// A voxel known to lie on the lesion; selects the component under it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub click: Option<[usize; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    lesion_id: String,
    patient_id: String,
    dataset: String,
    #[serde(default)]
    location: Option<String>,
    image_path: PathBuf,
    mask_path: PathBuf,
    #[serde(default)]
    component_label: Option<u32>,
    #[serde(default)]
    click_x: Option<usize>,
    #[serde(default)]
    click_y: Option<usize>,
    #[serde(default)]
    click_z: Option<usize>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Manifest { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses JSON, or CSV when the extension is `.csv`. Relative volume
    /// paths are resolved against the manifest's directory. Does not
    /// validate; see [`load_manifest`].
    pub fn parse_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Parse(format!("{}: {e}", path.display())))?;
        let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let mut m = if is_csv { Self::from_csv_str(&text)? } else { Self::from_json_str(&text)? };
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut m.entries {
            if e.image_path.is_relative() {
                e.image_path = base.join(&e.image_path);
            }
            if e.mask_path.is_relative() {
                e.mask_path = base.join(&e.mask_path);
            }
        }
        Ok(m)
    }

    pub fn from_json_str(s: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(s).map_err(|e| PipelineError::Parse(e.to_string()))
    }

    pub fn from_csv_str(s: &str) -> Result<Self, PipelineError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(s.as_bytes());
        let mut entries = Vec::new();
        for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
            let row = row.map_err(|e| PipelineError::Parse(format!("row {}: {e}", i + 1)))?;
            let click = match (row.click_x, row.click_y, row.click_z) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                (None, None, None) => None,
                _ => return Err(PipelineError::Parse(format!("row {}: partial click coordinates", i + 1))),
            };
            entries.push(ManifestEntry {
                lesion_id: row.lesion_id,
                patient_id: row.patient_id,
                dataset: row.dataset,
                location: row.location.filter(|l| !l.is_empty()).unwrap_or_else(undefined_location),
                image_path: row.image_path,
                mask_path: row.mask_path,
                component_label: row.component_label,
                click,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.to_json_string() + "\n")?;
        Ok(())
    }

    /// Schema checks that do not touch the filesystem.
    pub fn validate_schema(&self) -> Result<(), PipelineError> {
        let mut seen = HashSet::new();
        let mut dups = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.lesion_id.as_str()) {
                dups.insert(e.lesion_id.clone());
            }
        }
        if !dups.is_empty() {
            return Err(PipelineError::DuplicateLesionId(dups.into_iter().collect()));
        }
        let bad: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.lesion_id.trim().is_empty() || e.patient_id.trim().is_empty())
            .map(|e| format!("lesion '{}' has an empty lesion_id or patient_id", e.lesion_id))
            .collect();
        if !bad.is_empty() {
            return Err(PipelineError::InvalidEntry(bad.join("; ")));
        }
        Ok(())
    }

    /// Every referenced volume that does not exist, in entry order.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for e in &self.entries {
            for p in [&e.image_path, &e.mask_path] {
                if !p.exists() && seen.insert(p.clone()) {
                    out.push(p.clone());
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.validate_schema()?;
        let missing = self.missing_files();
        if !missing.is_empty() {
            return Err(PipelineError::MissingFile(missing));
        }
        Ok(())
    }

    /// Lesion counts per dataset.
    pub fn counts_by_dataset(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.dataset.clone()).or_default() += 1;
        }
        out
    }

    pub fn patients(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.patient_id.as_str()).collect()
    }
}

/// Parses and fully validates a manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, PipelineError> {
    let m = Manifest::parse_file(path.as_ref())?;
    m.validate()?;
    Ok(m)
}

/// Number of test patients for a fraction, `ceil(f · n)`. The small slack
/// keeps products like `0.7 · 10` from rounding up past an integer.
pub fn test_patient_count(test_fraction: f64, n_patients: usize) -> usize {
    let raw = test_fraction * n_patients as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n_patients)
}

/// Splits by patient: patients are shuffled with `seed`, the first
/// `ceil(test_fraction · #patients)` go to the test side. Entry order is
/// kept within each side. Returns `(train, test)`.
pub fn split_patients(m: &Manifest, test_fraction: f64, seed: u64) -> Result<(Manifest, Manifest), PipelineError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(PipelineError::InvalidArgument(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let mut patients: Vec<&str> = m.patients().into_iter().collect();
    if patients.is_empty() {
        return Err(PipelineError::NoPatients);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..patients.len()).rev() {
        let j = rng.gen_range(0..=i as u64) as usize;
        patients.swap(i, j);
    }
    let n_test = test_patient_count(test_fraction, patients.len());
    let test_set: HashSet<&str> = patients[..n_test].iter().copied().collect();
    let (test, train): (Vec<_>, Vec<_>) =
        m.entries.iter().cloned().partition(|e| test_set.contains(e.patient_id.as_str()));
    Ok((Manifest::new(train), Manifest::new(test)))
}

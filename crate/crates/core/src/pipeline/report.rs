//! Location-stratified summaries and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::compare::{ComparisonOutcome, Metric};
use super::eval::{write_records_csv, EvalRecord, RunMetadata};
use super::manifest::UNDEFINED_LOCATION;
use super::PipelineError;

pub const OVERALL: &str = "overall";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std =
            if n == 1 { 0.0 } else { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() };
        Some(MeanStd { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub model_id: String,
    pub location: String,
    pub n: usize,
    pub dice: MeanStd,
    /// Over the records of the group that carry a robustness score.
    pub robustness: Option<MeanStd>,
}

/// One dataset's cell of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryCell {
    pub dataset: String,
    pub dice: MeanStd,
    pub robustness: Option<MeanStd>,
    pub dice_significant: bool,
    pub robustness_significant: bool,
}

/// One model's row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model_id: String,
    pub cells: Vec<SummaryCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub by: String,
    pub n_records: usize,
    /// Per model and location; "undefined" sorts last.
    pub groups: Vec<GroupStats>,
    /// One row per model over all of its records.
    pub overall: Vec<GroupStats>,
    pub table: Vec<SummaryRow>,
    pub comparisons: Vec<ComparisonOutcome>,
    pub runs: Vec<RunMetadata>,
    pub conventions: BTreeMap<String, String>,
    pub records: Vec<EvalRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format '{other}'")),
        }
    }
}

/// Trimmed, lower-cased tag. Empty tags, and tags outside `taxonomy` when
/// one is given, become "undefined".
pub fn normalize_location(tag: &str, taxonomy: Option<&[String]>) -> String {
    let t = tag.trim().to_lowercase();
    if t.is_empty() {
        return UNDEFINED_LOCATION.to_owned();
    }
    match taxonomy {
        Some(tax) if !tax.iter().any(|k| k.trim().eq_ignore_ascii_case(&t)) => UNDEFINED_LOCATION.to_owned(),
        _ => t,
    }
}

fn location_key(loc: &str) -> (bool, &str) {
    (loc == UNDEFINED_LOCATION, loc)
}

fn group_stats(model_id: &str, location: &str, rs: &[&EvalRecord]) -> GroupStats {
    let dice: Vec<f64> = rs.iter().map(|r| r.dice).collect();
    let rob: Vec<f64> = rs.iter().filter_map(|r| r.robustness).collect();
    GroupStats {
        model_id: model_id.to_owned(),
        location: location.to_owned(),
        n: rs.len(),
        dice: MeanStd::of(&dice).expect("groups are non-empty"),
        robustness: MeanStd::of(&rob),
    }
}

/// Groups records by model and location. Records are sorted by
/// (model_id, lesion_id) and their location tags normalized.
pub fn aggregate_by_location(
    records: &[EvalRecord],
    taxonomy: Option<&[String]>,
) -> Result<StratifiedReport, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::EmptyRecords);
    }
    let mut records = records.to_vec();
    for r in &mut records {
        r.location = normalize_location(&r.location, taxonomy);
    }
    records.sort_by(|a, b| (&a.model_id, &a.lesion_id).cmp(&(&b.model_id, &b.lesion_id)));

    let mut by_model: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
    for r in &records {
        by_model.entry(&r.model_id).or_default().push(r);
    }

    let mut groups = Vec::new();
    let mut overall = Vec::new();
    let mut table = Vec::new();
    for (model, rs) in &by_model {
        let mut by_loc: BTreeMap<(bool, &str), Vec<&EvalRecord>> = BTreeMap::new();
        let mut by_ds: BTreeMap<&str, Vec<&EvalRecord>> = BTreeMap::new();
        for r in rs {
            by_loc.entry(location_key(&r.location)).or_default().push(r);
            by_ds.entry(&r.dataset).or_default().push(r);
        }
        groups.extend(by_loc.iter().map(|((_, loc), g)| group_stats(model, loc, g)));
        overall.push(group_stats(model, OVERALL, rs));
        let cells = by_ds
            .iter()
            .map(|(ds, g)| {
                let s = group_stats(model, "", g);
                SummaryCell {
                    dataset: ds.to_string(),
                    dice: s.dice,
                    robustness: s.robustness,
                    dice_significant: false,
                    robustness_significant: false,
                }
            })
            .collect();
        table.push(SummaryRow { model_id: model.to_string(), cells });
    }

    let conventions = [
        ("std", "sample standard deviation (n - 1 denominator); 0 when n = 1"),
        ("location", "trimmed lower-case tag; empty or unrecognized tags grouped as undefined"),
        ("robustness_stats", "over records that carry a robustness score"),
        ("failed_records", "included in aggregates with their sentinel values; excluded from paired tests"),
        ("pairing", "per-lesion scores paired by lesion_id within each dataset"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v.to_owned()))
    .collect();

    Ok(StratifiedReport {
        by: "location".into(),
        n_records: records.len(),
        groups,
        overall,
        table,
        comparisons: Vec::new(),
        runs: Vec::new(),
        conventions,
        records,
    })
}

impl StratifiedReport {
    pub fn with_runs(mut self, runs: Vec<RunMetadata>) -> Self {
        self.runs = runs;
        self
    }

    /// Attaches test outcomes and marks significant cells on model B's row.
    pub fn with_comparisons(mut self, comparisons: Vec<ComparisonOutcome>) -> Self {
        for c in comparisons.iter().filter(|c| c.significant) {
            let cell = self
                .table
                .iter_mut()
                .filter(|row| row.model_id == c.model_b)
                .flat_map(|row| row.cells.iter_mut())
                .find(|cell| cell.dataset == c.dataset);
            if let Some(cell) = cell {
                match c.metric {
                    Metric::Dice => cell.dice_significant = true,
                    Metric::Robustness => cell.robustness_significant = true,
                }
            }
        }
        self.comparisons = comparisons;
        self
    }

    /// Summary table in the model × (Dice, Robustness) per dataset layout.
    pub fn table_rows(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let datasets: BTreeSet<&str> =
            self.table.iter().flat_map(|r| r.cells.iter().map(|c| c.dataset.as_str())).collect();
        let mut header = vec!["model".to_owned()];
        for ds in &datasets {
            header.push(format!("{ds} Dice"));
            header.push(format!("{ds} Robustness"));
        }
        let fmt = |m: Option<MeanStd>, sig: bool| {
            m.map(|m| format!("{:.2} ± {:.2}{}", m.mean, m.std, if sig { "*" } else { "" })).unwrap_or_default()
        };
        let rows = self
            .table
            .iter()
            .map(|row| {
                let mut out = vec![row.model_id.clone()];
                for ds in &datasets {
                    let cell = row.cells.iter().find(|c| c.dataset == *ds);
                    out.push(fmt(cell.map(|c| c.dice), cell.is_some_and(|c| c.dice_significant)));
                    out.push(fmt(cell.and_then(|c| c.robustness), cell.is_some_and(|c| c.robustness_significant)));
                }
                out
            })
            .collect();
        (header, rows)
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    path.with_file_name(format!("{stem}{suffix}"))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, PipelineError> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| PipelineError::Serde(e.to_string()))
}

fn write_groups_csv(path: &Path, r: &StratifiedReport) -> Result<(), PipelineError> {
    let ser = |e: csv::Error| PipelineError::Serde(e.to_string());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path).map_err(ser)?;
    w.write_record([
        "model_id",
        "location",
        "n",
        "dice_mean",
        "dice_std",
        "robustness_n",
        "robustness_mean",
        "robustness_std",
    ])
    .map_err(ser)?;
    for g in r.groups.iter().chain(&r.overall) {
        let (rn, rm, rs) = match g.robustness {
            Some(m) => (m.n.to_string(), m.mean.to_string(), m.std.to_string()),
            None => Default::default(),
        };
        w.write_record([
            g.model_id.clone(),
            g.location.clone(),
            g.n.to_string(),
            g.dice.mean.to_string(),
            g.dice.std.to_string(),
            rn,
            rm,
            rs,
        ])
        .map_err(ser)?;
    }
    w.flush()?;
    Ok(())
}

/// `Json` writes the whole report to `path`. `Csv` writes the per-lesion
/// records to `path` plus `<stem>_groups.csv`, `<stem>_table.csv` and
/// `<stem>_meta.json` (runs, conventions, comparisons) beside it.
pub fn emit_report(r: &StratifiedReport, format: ReportFormat, path: &Path) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match format {
        ReportFormat::Json => fs::write(path, to_json(r)?)?,
        ReportFormat::Csv => {
            write_records_csv(fs::File::create(path)?, &r.records)?;
            write_groups_csv(&sibling(path, "_groups.csv"), r)?;
            let (header, rows) = r.table_rows();
            let ser = |e: csv::Error| PipelineError::Serde(e.to_string());
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_path(sibling(path, "_table.csv"))
                .map_err(ser)?;
            w.write_record(&header).map_err(ser)?;
            for row in rows {
                w.write_record(&row).map_err(ser)?;
            }
            w.flush()?;
            let meta = serde_json::json!({
                "by": r.by,
                "n_records": r.n_records,
                "runs": r.runs,
                "conventions": r.conventions,
                "comparisons": r.comparisons,
            });
            fs::write(sibling(path, "_meta.json"), to_json(&meta)?)?;
        }
    }
    Ok(())
}

//! Segmenters: a built-in threshold region grower and an adapter that runs
//! an external command per VOI.
//!
//! External wire contract: the command template must contain `{image}`,
//! `{x}`, `{y}`, `{z}` and `{output}`. `{image}` is replaced by the path of
//! the input VOI (gzip NIfTI-1), `{x} {y} {z}` by the 0-based local click,
//! `{output}` by the path where the command must write the mask. Exit code
//! 0 means success; the mask must be NIfTI-1 with the VOI's dims and values
//! in {0, 1}. The template is split into arguments shell-style and run
//! without a shell.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::neighborhood::{flood_fill, Connectivity};
use crate::voi::IsolationMode;
use crate::volume::{read_volume, write_volume, Dims, Volume3D, VolumeError, VolumeKind, VoxelData};

pub const PLACEHOLDERS: [&str; 5] = ["{image}", "{x}", "{y}", "{z}", "{output}"];
pub const DEFAULT_TIMEOUT_S: f64 = 60.0;
pub const DEFAULT_MAX_VOXELS: usize = 10 * 128 * 128;

#[derive(Debug, Error)]
pub enum SegmenterError {
    #[error("seed intensity {value} outside window [{lo}, {hi}]")]
    ClickOutsideWindow { value: f64, lo: f64, hi: f64 },
    #[error("click {0:?} lies outside the VOI {1}")]
    ClickOutOfVolume([usize; 3], Dims),
    #[error("segmenter process failed ({status}): {stderr}")]
    ProcessFailed { status: String, stderr: String },
    #[error("segmenter process timed out after {0} s")]
    Timeout(f64),
    #[error("segmenter produced no output file at {0}")]
    MissingOutput(PathBuf),
    #[error("predicted mask dims {got} differ from VOI dims {expected}")]
    BadMaskDims { expected: Dims, got: Dims },
    #[error("predicted mask holds values outside {{0,1}} (e.g. {0})")]
    BadMaskValues(f64),
    #[error("invalid command template: {0}")]
    InvalidTemplate(String),
    #[error("could not launch segmenter: {0}")]
    Spawn(std::io::Error),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// One segmentation of one VOI.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub mask: Volume3D,
    /// Growth hit `max_voxels`.
    pub truncated: bool,
    /// Lenient mode only: the seed intensity was outside the window.
    pub seed_outside_window: bool,
}

/// Identifies a call for naming temp files and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct CallContext<'a> {
    pub lesion_id: &'a str,
    /// 0 for the centroid click, i for the i-th shifted click.
    pub variant: usize,
}

pub trait Segmenter: Send + Sync {
    /// Model identifier recorded in evaluation output.
    fn model_id(&self) -> String;

    fn segment(
        &self,
        voi_image: &Volume3D,
        local_click: [usize; 3],
        ctx: CallContext<'_>,
    ) -> Result<Segmentation, SegmenterError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowParams {
    /// Inclusive intensity bounds.
    pub hu_window: (f64, f64),
    pub connectivity: Connectivity,
    pub max_voxels: usize,
    pub mode: IsolationMode,
}

impl Default for GrowParams {
    fn default() -> Self {
        GrowParams {
            hu_window: (0.0, 200.0),
            connectivity: Connectivity::default(),
            max_voxels: DEFAULT_MAX_VOXELS,
            mode: IsolationMode::Lenient,
        }
    }
}

impl GrowParams {
    pub fn validate(&self) -> Result<(), SegmenterError> {
        let (lo, hi) = self.hu_window;
        if lo.is_nan() || hi.is_nan() || lo > hi || self.max_voxels == 0 {
            return Err(SegmenterError::InvalidTemplate(format!(
                "grow params need lo <= hi and max_voxels >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Breadth-first threshold flood fill from the click. Neighbors are
/// visited in lexicographic offset order, so a capped growth keeps the
/// same voxels every run.
pub fn segment_region_grow(
    voi_image: &Volume3D,
    local_click: [usize; 3],
    params: &GrowParams,
) -> Result<Segmentation, SegmenterError> {
    params.validate()?;
    let dims = voi_image.dims();
    if !dims.contains_usize(local_click) {
        return Err(SegmenterError::ClickOutOfVolume(local_click, dims));
    }
    let (lo, hi) = params.hu_window;
    let data = voi_image.data();
    let inside = |i: usize| {
        let v = data.get_f64(i);
        lo <= v && v <= hi
    };
    let seed = dims.index(local_click);
    if !inside(seed) {
        let value = data.get_f64(seed);
        return match params.mode {
            IsolationMode::Strict => Err(SegmenterError::ClickOutsideWindow { value, lo, hi }),
            IsolationMode::Lenient => Ok(Segmentation {
                mask: Volume3D::empty_mask(dims, voi_image.spacing()),
                truncated: false,
                seed_outside_window: true,
            }),
        };
    }
    let fill = flood_fill(dims, seed, params.connectivity, Some(params.max_voxels), inside);
    let mut bits = vec![0u8; dims.len()];
    for i in fill.order {
        bits[i] = 1;
    }
    Ok(Segmentation {
        mask: Volume3D::from_parts_unchecked(dims, voi_image.spacing(), VolumeKind::BinaryMask, VoxelData::U8(bits)),
        truncated: fill.truncated,
        seed_outside_window: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionGrower {
    pub params: GrowParams,
}

impl Segmenter for RegionGrower {
    fn model_id(&self) -> String {
        "builtin".into()
    }

    fn segment(
        &self,
        voi_image: &Volume3D,
        local_click: [usize; 3],
        _ctx: CallContext<'_>,
    ) -> Result<Segmentation, SegmenterError> {
        segment_region_grow(voi_image, local_click, &self.params)
    }
}

/// A parsed external command with the five placeholder slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandTemplate {
    pub template: String,
    #[serde(skip)]
    argv: Vec<String>,
}

impl CommandTemplate {
    pub fn parse(template: &str) -> Result<Self, SegmenterError> {
        let argv = shell_words::split(template).map_err(|e| SegmenterError::InvalidTemplate(e.to_string()))?;
        if argv.is_empty() {
            return Err(SegmenterError::InvalidTemplate("empty command".into()));
        }
        let missing: Vec<&str> = PLACEHOLDERS.iter().copied().filter(|p| !template.contains(p)).collect();
        if !missing.is_empty() {
            return Err(SegmenterError::InvalidTemplate(format!("missing placeholders: {}", missing.join(" "))));
        }
        Ok(CommandTemplate { template: template.to_owned(), argv })
    }

    pub fn render(&self, image: &Path, click: [usize; 3], output: &Path) -> Vec<String> {
        let image = image.to_string_lossy();
        let output = output.to_string_lossy();
        self.argv
            .iter()
            .map(|a| {
                a.replace("{image}", &image)
                    .replace("{output}", &output)
                    .replace("{x}", &click[0].to_string())
                    .replace("{y}", &click[1].to_string())
                    .replace("{z}", &click[2].to_string())
            })
            .collect()
    }

    pub fn program(&self) -> &str {
        &self.argv[0]
    }
}

/// Runs an external segmenter in an isolated temp directory per call.
#[derive(Debug, Clone)]
pub struct ExternalSegmenter {
    pub command: CommandTemplate,
    pub timeout_s: f64,
    pub model_id: String,
}

impl ExternalSegmenter {
    pub fn new(command: CommandTemplate, timeout_s: f64) -> Self {
        let model_id = Path::new(command.program())
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "external".into());
        ExternalSegmenter { command, timeout_s, model_id }
    }
}

/// Lesion ids become file names; keep them portable.
pub fn sanitize_file_stem(id: &str) -> String {
    let s: String =
        id.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect();
    if s.is_empty() || s.starts_with('.') {
        format!("_{s}")
    } else {
        s
    }
}

fn tail(s: &str, max: usize) -> String {
    let s = s.trim();
    if s.len() <= max {
        return s.to_owned();
    }
    let mut start = s.len() - max;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    format!("...{}", &s[start..])
}

/// Checks an externally produced mask and converts it to a binary mask.
pub fn validate_external_mask(pred: &Volume3D, expected: Dims) -> Result<Volume3D, SegmenterError> {
    if pred.dims() != expected {
        return Err(SegmenterError::BadMaskDims { expected, got: pred.dims() });
    }
    let data = pred.data();
    if let Some(bad) = (0..data.len()).map(|i| data.get_f64(i)).find(|&v| v != 0.0 && v != 1.0) {
        return Err(SegmenterError::BadMaskValues(bad));
    }
    Ok(pred.to_binary_mask())
}

/// Writes the VOI, runs the command, and validates the returned mask.
pub fn segment_external(
    voi_image: &Volume3D,
    local_click: [usize; 3],
    seg: &ExternalSegmenter,
    ctx: CallContext<'_>,
) -> Result<Segmentation, SegmenterError> {
    let dir = tempfile::Builder::new().prefix("ulsforge-seg-").tempdir().map_err(SegmenterError::Spawn)?;
    let stem = format!("{}_c{}", sanitize_file_stem(ctx.lesion_id), ctx.variant);
    let image_path = dir.path().join(format!("{stem}.nii.gz"));
    let output_path = dir.path().join(format!("{stem}_pred.nii.gz"));
    write_volume(voi_image, &image_path, true)?;

    let argv = seg.command.render(&image_path, local_click, &output_path);
    let mut child = Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(dir.path())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(SegmenterError::Spawn)?;

    let mut stderr_pipe = child.stderr.take().expect("piped stderr");
    let drain = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr_pipe.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    });

    let status = match child.wait_timeout(Duration::from_secs_f64(seg.timeout_s)).map_err(SegmenterError::Spawn)? {
        Some(s) => s,
        None => {
            let _ = child.kill();
            let _ = child.wait();
            let _ = drain.join();
            return Err(SegmenterError::Timeout(seg.timeout_s));
        }
    };
    let stderr = drain.join().unwrap_or_default();
    if !status.success() {
        return Err(SegmenterError::ProcessFailed { status: status.to_string(), stderr: tail(&stderr, 2000) });
    }
    if !output_path.exists() {
        return Err(SegmenterError::MissingOutput(output_path));
    }
    let pred = read_volume(&output_path)?;
    let mask = validate_external_mask(&pred, voi_image.dims())?;
    Ok(Segmentation { mask, truncated: false, seed_outside_window: false })
}

impl Segmenter for ExternalSegmenter {
    fn model_id(&self) -> String {
        self.model_id.clone()
    }

    fn segment(
        &self,
        voi_image: &Volume3D,
        local_click: [usize; 3],
        ctx: CallContext<'_>,
    ) -> Result<Segmentation, SegmenterError> {
        segment_external(voi_image, local_click, self, ctx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SegmenterKind {
    Builtin(GrowParams),
    External(CommandTemplate),
}

/// Which segmenter to run, as named on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterRef {
    pub kind: SegmenterKind,
    pub timeout_s: f64,
    pub model_id: Option<String>,
}

impl SegmenterRef {
    pub fn builtin(params: GrowParams) -> Self {
        SegmenterRef { kind: SegmenterKind::Builtin(params), timeout_s: DEFAULT_TIMEOUT_S, model_id: None }
    }

    /// `builtin` or `exec:<command template>`.
    pub fn parse(spec: &str, params: GrowParams) -> Result<Self, SegmenterError> {
        let spec = spec.trim();
        if spec == "builtin" {
            return Ok(Self::builtin(params));
        }
        match spec.strip_prefix("exec:") {
            Some(cmd) => Ok(SegmenterRef {
                kind: SegmenterKind::External(CommandTemplate::parse(cmd)?),
                timeout_s: DEFAULT_TIMEOUT_S,
                model_id: None,
            }),
            None => Err(SegmenterError::InvalidTemplate(format!(
                "segmenter must be 'builtin' or 'exec:<command>', got '{spec}'"
            ))),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Segmenter>, SegmenterError> {
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(SegmenterError::InvalidTemplate(format!("timeout must be positive, got {}", self.timeout_s)));
        }
        match &self.kind {
            SegmenterKind::Builtin(p) => {
                p.validate()?;
                Ok(Box::new(Named { inner: RegionGrower { params: *p }, id: self.model_id.clone() }))
            }
            SegmenterKind::External(cmd) => Ok(Box::new(Named {
                inner: ExternalSegmenter::new(cmd.clone(), self.timeout_s),
                id: self.model_id.clone(),
            })),
        }
    }
}

struct Named<S> {
    inner: S,
    id: Option<String>,
}

impl<S: Segmenter> Segmenter for Named<S> {
    fn model_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.inner.model_id())
    }

    fn segment(
        &self,
        voi_image: &Volume3D,
        local_click: [usize; 3],
        ctx: CallContext<'_>,
    ) -> Result<Segmentation, SegmenterError> {
        self.inner.segment(voi_image, local_click, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lesion_volume() -> Volume3D {
        // 3x3x3 block of HU 100 on HU -1000, in a 7^3 grid
        let d = Dims::new(7, 7, 7);
        let mut v = vec![-1000i16; d.len()];
        for z in 2..5 {
            for y in 2..5 {
                for x in 2..5 {
                    v[d.index([x, y, z])] = 100;
                }
            }
        }
        Volume3D::intensity(d, [1.0; 3], v).unwrap()
    }

    fn params() -> GrowParams {
        GrowParams { hu_window: (50.0, 150.0), mode: IsolationMode::Strict, ..Default::default() }
    }

    #[test]
    fn grows_exactly_the_lesion() {
        let img = lesion_volume();
        let s = segment_region_grow(&img, [3, 3, 3], &params()).unwrap();
        assert_eq!(s.mask.count_nonzero(), 27);
        assert!(!s.truncated);
        assert_eq!(s.mask.value([2, 2, 2]), 1.0);
        assert_eq!(s.mask.value([1, 2, 2]), 0.0);
    }

    #[test]
    fn background_click_strict_and_lenient() {
        let img = lesion_volume();
        assert!(matches!(
            segment_region_grow(&img, [0, 0, 0], &params()),
            Err(SegmenterError::ClickOutsideWindow { .. })
        ));
        let lenient = GrowParams { mode: IsolationMode::Lenient, ..params() };
        let s = segment_region_grow(&img, [0, 0, 0], &lenient).unwrap();
        assert!(s.seed_outside_window);
        assert_eq!(s.mask.count_nonzero(), 0);
    }

    #[test]
    fn cap_truncates_deterministically() {
        let img = lesion_volume();
        let p = GrowParams { max_voxels: 8, ..params() };
        let a = segment_region_grow(&img, [3, 3, 3], &p).unwrap();
        assert_eq!(a.mask.count_nonzero(), 8);
        assert!(a.truncated);
        // 26-connectivity BFS: seed, then its neighbors in (dx,dy,dz) order
        let expected = [[3, 3, 3], [2, 2, 2], [2, 2, 3], [2, 2, 4], [2, 3, 2], [2, 3, 3], [2, 3, 4], [2, 4, 2]];
        for p in expected {
            assert_eq!(a.mask.value(p), 1.0, "{p:?}");
        }
        let b = segment_region_grow(&img, [3, 3, 3], &p).unwrap();
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn template_requires_placeholders() {
        assert!(CommandTemplate::parse("seg {image} {x} {y} {z} {output}").is_ok());
        assert!(matches!(CommandTemplate::parse("seg {image} {output}"), Err(SegmenterError::InvalidTemplate(_))));
        assert!(CommandTemplate::parse("").is_err());
    }

    #[test]
    fn template_render() {
        let t = CommandTemplate::parse("run --in={image} '{x},{y},{z}' {output}").unwrap();
        let argv = t.render(Path::new("/t/a b.nii.gz"), [1, 2, 3], Path::new("/t/o.nii.gz"));
        assert_eq!(argv, vec!["run", "--in=/t/a b.nii.gz", "1,2,3", "/t/o.nii.gz"]);
    }

    #[test]
    fn parse_segmenter_ref() {
        assert!(matches!(
            SegmenterRef::parse("builtin", GrowParams::default()).unwrap().kind,
            SegmenterKind::Builtin(_)
        ));
        let r = SegmenterRef::parse("exec:model {image} {x} {y} {z} {output}", GrowParams::default()).unwrap();
        assert_eq!(r.build().unwrap().model_id(), "model");
        assert!(SegmenterRef::parse("docker", GrowParams::default()).is_err());
    }

    #[test]
    fn sanitize() {
        assert_eq!(sanitize_file_stem("pat/01 lesion:2"), "pat_01_lesion_2");
        assert_eq!(sanitize_file_stem(".hidden"), "_.hidden");
    }

    #[test]
    fn mask_validation() {
        let d = Dims::new(2, 1, 1);
        let ok = Volume3D::intensity(d, [1.0; 3], vec![0, 1]).unwrap();
        assert_eq!(validate_external_mask(&ok, d).unwrap().kind(), VolumeKind::BinaryMask);
        let bad = Volume3D::intensity(d, [1.0; 3], vec![0, 2]).unwrap();
        assert!(matches!(validate_external_mask(&bad, d), Err(SegmenterError::BadMaskValues(v)) if v == 2.0));
        assert!(matches!(validate_external_mask(&ok, Dims::new(1, 2, 1)), Err(SegmenterError::BadMaskDims { .. })));
    }
}

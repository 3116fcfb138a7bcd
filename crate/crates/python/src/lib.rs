//! Python module `ulsforge_py`.
//!
//! Volumes cross the boundary as flat lists in x-fastest order. Records,
//! reports and test results cross as plain dicts (via JSON).

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::de::DeserializeOwned;
use serde::Serialize;

use ulsforge::clicks::{sample_click_points as sample_points, ClickPlan};
use ulsforge::lesions::{self, LesionInstance};
use ulsforge::metrics::{self, RobustnessTriple};
use ulsforge::neighborhood::Connectivity;
use ulsforge::pipeline::{self, EvalConfig, EvalRecord, Manifest, PipelineError};
use ulsforge::segmenter::{GrowParams, SegmenterRef};
use ulsforge::stats;
use ulsforge::voi::{self, IsolationMode, VoiConfig};
use ulsforge::volume::{self as vol, Dims, Volume3D, VolumeKind, VoxelData};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn pipeline_err(e: PipelineError) -> PyErr {
    match e {
        PipelineError::Io(e) => PyIOError::new_err(e.to_string()),
        e => value_err(e),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let s: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(value_err)
}

fn conn(c: u8) -> PyResult<Connectivity> {
    Connectivity::try_from(c).map_err(value_err)
}

fn to_dims(d: (usize, usize, usize)) -> Dims {
    Dims::new(d.0, d.1, d.2)
}

/// A 3D volume: intensity image, binary mask or labeled mask.
#[pyclass(name = "Volume", module = "ulsforge_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: Volume3D,
}

#[pymethods]
impl PyVolume {
    /// Int16 intensity volume (HU).
    #[staticmethod]
    #[pyo3(signature = (dims, data, spacing = (1.0, 1.0, 1.0)))]
    fn intensity(dims: (usize, usize, usize), data: Vec<i16>, spacing: (f32, f32, f32)) -> PyResult<Self> {
        let inner = Volume3D::intensity(to_dims(dims), [spacing.0, spacing.1, spacing.2], data).map_err(value_err)?;
        Ok(PyVolume { inner })
    }

    /// Float32 intensity volume.
    #[staticmethod]
    #[pyo3(signature = (dims, data, spacing = (1.0, 1.0, 1.0)))]
    fn intensity_f32(dims: (usize, usize, usize), data: Vec<f32>, spacing: (f32, f32, f32)) -> PyResult<Self> {
        let inner = Volume3D::new(
            to_dims(dims),
            [spacing.0, spacing.1, spacing.2],
            VolumeKind::Intensity,
            VoxelData::F32(data),
        )
        .map_err(value_err)?;
        Ok(PyVolume { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (dims, data, spacing = (1.0, 1.0, 1.0)))]
    fn binary_mask(dims: (usize, usize, usize), data: Vec<u8>, spacing: (f32, f32, f32)) -> PyResult<Self> {
        let inner = Volume3D::binary_mask(to_dims(dims), [spacing.0, spacing.1, spacing.2], data).map_err(value_err)?;
        Ok(PyVolume { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (dims, data, spacing = (1.0, 1.0, 1.0)))]
    fn labeled_mask(dims: (usize, usize, usize), data: Vec<i32>, spacing: (f32, f32, f32)) -> PyResult<Self> {
        let inner =
            Volume3D::labeled_mask(to_dims(dims), [spacing.0, spacing.1, spacing.2], data).map_err(value_err)?;
        Ok(PyVolume { inner })
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims();
        (d.nx(), d.ny(), d.nz())
    }

    #[getter]
    fn spacing(&self) -> (f32, f32, f32) {
        let s = self.inner.spacing();
        (s[0], s[1], s[2])
    }

    /// "intensity", "binary_mask" or "labeled_mask".
    #[getter]
    fn kind(&self) -> &'static str {
        match self.inner.kind() {
            VolumeKind::Intensity => "intensity",
            VolumeKind::BinaryMask => "binary_mask",
            VolumeKind::LabeledMask => "labeled_mask",
        }
    }

    fn value(&self, x: usize, y: usize, z: usize) -> PyResult<f64> {
        if !self.inner.dims().contains_usize([x, y, z]) {
            return Err(value_err(format!("({x}, {y}, {z}) outside {}", self.inner.dims())));
        }
        Ok(self.inner.value([x, y, z]))
    }

    /// Voxel values as a flat list, x fastest.
    fn to_list<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        match self.inner.data() {
            VoxelData::U8(v) => v.clone().into_pyobject(py).map(Bound::into_any),
            VoxelData::I16(v) => v.clone().into_pyobject(py).map(Bound::into_any),
            VoxelData::I32(v) => v.clone().into_pyobject(py).map(Bound::into_any),
            VoxelData::F32(v) => v.clone().into_pyobject(py).map(Bound::into_any),
        }
    }

    fn count_nonzero(&self) -> usize {
        self.inner.count_nonzero()
    }

    fn __len__(&self) -> usize {
        self.inner.dims().len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Volume({}, dims={}, spacing={:?})", self.kind(), self.inner.dims(), self.inner.spacing())
    }
}

#[pyfunction]
fn read_volume(path: PathBuf) -> PyResult<PyVolume> {
    vol::read_volume(&path).map(|inner| PyVolume { inner }).map_err(|e| match e {
        vol::VolumeError::FileNotFound(_) | vol::VolumeError::Io(_) => PyIOError::new_err(e.to_string()),
        e => value_err(e),
    })
}

#[pyfunction]
#[pyo3(signature = (volume, path, compress = true))]
fn write_volume(volume: &PyVolume, path: PathBuf, compress: bool) -> PyResult<()> {
    vol::write_volume(&volume.inner, &path, compress).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// One connected lesion.
#[pyclass(name = "LesionInstance", module = "ulsforge_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLesion {
    inner: LesionInstance,
}

#[pymethods]
impl PyLesion {
    #[getter]
    fn label(&self) -> u32 {
        self.inner.label
    }

    #[getter]
    fn size(&self) -> usize {
        self.inner.size_vox
    }

    /// Inclusive (min, max) corners.
    #[getter]
    fn bbox(&self) -> ([usize; 3], [usize; 3]) {
        (self.inner.bbox.min, self.inner.bbox.max)
    }

    /// Centroid click, snapped onto the lesion.
    #[getter]
    fn center(&self) -> [usize; 3] {
        self.inner.center.pos
    }

    #[getter]
    fn voxels(&self) -> Vec<[usize; 3]> {
        self.inner.voxels.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "LesionInstance(label={}, size={}, center={:?})",
            self.inner.label, self.inner.size_vox, self.inner.center.pos
        )
    }
}

#[pyfunction]
#[pyo3(signature = (mask, connectivity = 26))]
fn label_components(mask: &PyVolume, connectivity: u8) -> PyResult<PyVolume> {
    lesions::label_components(&mask.inner, conn(connectivity)?).map(|inner| PyVolume { inner }).map_err(value_err)
}

/// Lesion instances of a binary mask (by connectivity) or a labeled mask
/// (by label value).
#[pyfunction]
#[pyo3(signature = (mask, connectivity = 26))]
fn lesion_instances(mask: &PyVolume, connectivity: u8) -> PyResult<Vec<PyLesion>> {
    let insts = match mask.inner.kind() {
        VolumeKind::LabeledMask => lesions::extract_instances(&mask.inner),
        _ => lesions::instances_from_mask(&mask.inner, conn(connectivity)?),
    }
    .map_err(value_err)?;
    Ok(insts.into_iter().map(|inner| PyLesion { inner }).collect())
}

/// Centroid click of a lesion given as a voxel list.
#[pyfunction]
fn lesion_center(voxels: Vec<[usize; 3]>) -> PyResult<[usize; 3]> {
    let inst = LesionInstance::from_voxels(1, voxels).map_err(value_err)?;
    Ok(lesions::lesion_center(&inst).map_err(value_err)?.pos)
}

/// Cropped image/mask pair.
#[pyclass(name = "VoiSample", module = "ulsforge_py", frozen)]
struct PyVoiSample {
    #[pyo3(get)]
    image: Py<PyVolume>,
    #[pyo3(get)]
    mask: Py<PyVolume>,
    /// Global coordinate of the window's first voxel (may be negative).
    #[pyo3(get)]
    offset: [i64; 3],
    #[pyo3(get)]
    local_click: [usize; 3],
}

#[pyfunction]
#[pyo3(signature = (image, mask, click, size = (128, 128, 64), pad_value = voi::AIR_HU))]
fn crop_voi(
    py: Python<'_>,
    image: &PyVolume,
    mask: &PyVolume,
    click: [usize; 3],
    size: (usize, usize, usize),
    pad_value: f64,
) -> PyResult<PyVoiSample> {
    let cfg = VoiConfig { pad_value_image: pad_value, ..VoiConfig::with_size([size.0, size.1, size.2]) };
    let point = lesions::ClickPoint { pos: click, origin: lesions::ClickOrigin::Centroid };
    let s = voi::crop_voi(&image.inner, &mask.inner, point, &cfg).map_err(value_err)?;
    Ok(PyVoiSample {
        local_click: s.local_click(),
        offset: s.offset,
        image: Py::new(py, PyVolume { inner: s.image })?,
        mask: Py::new(py, PyVolume { inner: s.mask })?,
    })
}

/// Keeps only the component under `click`. Strict mode raises when the
/// click is on background; lenient mode returns an empty mask.
#[pyfunction]
#[pyo3(signature = (mask, click, connectivity = 26, lenient = false))]
fn isolate_central_lesion(mask: &PyVolume, click: [usize; 3], connectivity: u8, lenient: bool) -> PyResult<PyVolume> {
    let mode = if lenient { IsolationMode::Lenient } else { IsolationMode::Strict };
    let iso = voi::isolate_central_lesion(&mask.inner, click, conn(connectivity)?, mode).map_err(value_err)?;
    Ok(PyVolume { inner: iso.mask })
}

#[pyfunction]
fn place_back(mask: &PyVolume, dims: (usize, usize, usize), offset: [i64; 3]) -> PyResult<PyVolume> {
    voi::place_back(&mask.inner, to_dims(dims), offset).map(|inner| PyVolume { inner }).map_err(value_err)
}

#[pyfunction]
fn dice(a: &PyVolume, b: &PyVolume) -> PyResult<f64> {
    metrics::dice(&a.inner, &b.inner).map_err(value_err)
}

/// Mean pairwise Dice of the centroid-click and two shifted-click masks.
#[pyfunction]
fn robustness(p_normal: &PyVolume, p_aug1: &PyVolume, p_aug2: &PyVolume) -> PyResult<f64> {
    metrics::robustness(&RobustnessTriple {
        lesion_id: String::new(),
        p_normal: p_normal.inner.clone(),
        p_aug1: p_aug1.inner.clone(),
        p_aug2: p_aug2.inner.clone(),
    })
    .map_err(value_err)
}

#[pyfunction]
fn sample_click_points(lesion: &PyLesion, k: usize, seed_root: u64, lesion_id: &str) -> PyResult<Vec<[usize; 3]>> {
    Ok(sample_points(&lesion.inner, k, seed_root, lesion_id).map_err(value_err)?.into_iter().map(|p| p.pos).collect())
}

/// Centroid click followed by `k` sampled clicks, as a dict.
#[pyfunction]
#[pyo3(signature = (lesion, lesion_id, seed_root, k = 2))]
fn click_plan<'py>(
    py: Python<'py>,
    lesion: &PyLesion,
    lesion_id: &str,
    seed_root: u64,
    k: usize,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &ClickPlan::build(&lesion.inner, k, seed_root, lesion_id).map_err(value_err)?)
}

/// Paired two-tailed t-test on `x - y`. Raises ValueError when degenerate.
#[pyfunction]
#[pyo3(signature = (x, y, m = 1))]
fn paired_ttest<'py>(py: Python<'py>, x: Vec<f64>, y: Vec<f64>, m: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &stats::paired_ttest(&x, &y).map_err(value_err)?.with_bonferroni(m))
}

#[pyfunction]
fn bonferroni(p: f64, m: usize) -> f64 {
    stats::bonferroni(p, m)
}

#[pyclass(name = "Manifest", module = "ulsforge_py", frozen)]
struct PyManifest {
    inner: Manifest,
}

#[pymethods]
impl PyManifest {
    /// Loads and validates a JSON or CSV manifest.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        pipeline::load_manifest(&path).map(|inner| PyManifest { inner }).map_err(pipeline_err)
    }

    /// Builds a manifest from a list of entry dicts (not checked for files).
    #[staticmethod]
    fn from_entries(entries: &Bound<'_, PyAny>) -> PyResult<Self> {
        let inner = Manifest::new(from_py(entries)?);
        inner.validate_schema().map_err(pipeline_err)?;
        Ok(PyManifest { inner })
    }

    fn entries<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.entries)
    }

    fn patients(&self) -> Vec<String> {
        self.inner.patients().into_iter().map(str::to_owned).collect()
    }

    fn counts_by_dataset(&self) -> std::collections::BTreeMap<String, usize> {
        self.inner.counts_by_dataset()
    }

    /// `(train, test)` split on patient level.
    #[pyo3(signature = (test_fraction = 0.2, seed = 0))]
    fn split(&self, test_fraction: f64, seed: u64) -> PyResult<(PyManifest, PyManifest)> {
        let (a, b) = pipeline::split_patients(&self.inner, test_fraction, seed).map_err(pipeline_err)?;
        Ok((PyManifest { inner: a }, PyManifest { inner: b }))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(pipeline_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn eval_config(
    voi_size: (usize, usize, usize),
    pad_value: f64,
    connectivity: u8,
    workers: Option<usize>,
) -> PyResult<EvalConfig> {
    let voi = VoiConfig { pad_value_image: pad_value, ..VoiConfig::with_size([voi_size.0, voi_size.1, voi_size.2]) };
    voi.validate().map_err(value_err)?;
    Ok(EvalConfig {
        voi,
        connectivity: conn(connectivity)?,
        workers: pipeline::resolve_workers(workers),
        ..EvalConfig::default()
    })
}

#[allow(clippy::too_many_arguments)]
fn run_eval<'py>(
    py: Python<'py>,
    manifest: &PyManifest,
    segmenter: &str,
    mut cfg: EvalConfig,
    hu_window: (f64, f64),
    model_id: Option<String>,
    robust: Option<(u64, usize)>,
) -> PyResult<Bound<'py, PyAny>> {
    let params = GrowParams { hu_window, connectivity: cfg.connectivity, ..GrowParams::default() };
    let mut seg_ref = SegmenterRef::parse(segmenter, params).map_err(value_err)?;
    seg_ref.model_id = model_id;
    let seg = seg_ref.build().map_err(value_err)?;
    let m = &manifest.inner;
    let records = py
        .detach(|| match robust {
            Some((seed_root, k)) => {
                cfg.seed_root = seed_root;
                cfg.k = k;
                pipeline::run_robustness_eval(m, seg.as_ref(), &cfg)
            }
            None => pipeline::run_dice_eval(m, seg.as_ref(), &cfg),
        })
        .map_err(pipeline_err)?;
    to_py(py, &records)
}

/// Centered-click Dice run; returns one record dict per lesion.
#[pyfunction]
#[pyo3(signature = (manifest, segmenter = "builtin", voi_size = (128, 128, 64), pad_value = voi::AIR_HU,
    connectivity = 26, hu_window = (0.0, 200.0), model_id = None, workers = None))]
#[allow(clippy::too_many_arguments)]
fn run_dice_eval<'py>(
    py: Python<'py>,
    manifest: &PyManifest,
    segmenter: &str,
    voi_size: (usize, usize, usize),
    pad_value: f64,
    connectivity: u8,
    hu_window: (f64, f64),
    model_id: Option<String>,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = eval_config(voi_size, pad_value, connectivity, workers)?;
    run_eval(py, manifest, segmenter, cfg, hu_window, model_id, None)
}

/// Click-robustness run (centroid click plus `k` shifted clicks).
#[pyfunction]
#[pyo3(signature = (manifest, seed_root, segmenter = "builtin", k = 2, voi_size = (128, 128, 64),
    pad_value = voi::AIR_HU, connectivity = 26, hu_window = (0.0, 200.0), model_id = None, workers = None))]
#[allow(clippy::too_many_arguments)]
fn run_robustness_eval<'py>(
    py: Python<'py>,
    manifest: &PyManifest,
    seed_root: u64,
    segmenter: &str,
    k: usize,
    voi_size: (usize, usize, usize),
    pad_value: f64,
    connectivity: u8,
    hu_window: (f64, f64),
    model_id: Option<String>,
    workers: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    if k == 0 {
        return Err(value_err("k must be at least 1"));
    }
    let cfg = eval_config(voi_size, pad_value, connectivity, workers)?;
    run_eval(py, manifest, segmenter, cfg, hu_window, model_id, Some((seed_root, k)))
}

/// Location-stratified summary of record dicts.
#[pyfunction]
#[pyo3(signature = (records, taxonomy = None))]
fn aggregate_by_location<'py>(
    py: Python<'py>,
    records: &Bound<'py, PyAny>,
    taxonomy: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let recs: Vec<EvalRecord> = from_py(records)?;
    let rep = pipeline::aggregate_by_location(&recs, taxonomy.as_deref()).map_err(pipeline_err)?;
    to_py(py, &rep)
}

/// Paired tests of run `b` against run `a` per dataset and metric.
#[pyfunction]
#[pyo3(signature = (a, b, metrics = vec!["dice".to_owned()], m = None, alpha = pipeline::DEFAULT_ALPHA))]
fn compare_models<'py>(
    py: Python<'py>,
    a: &Bound<'py, PyAny>,
    b: &Bound<'py, PyAny>,
    metrics: Vec<String>,
    m: Option<usize>,
    alpha: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let a: Vec<EvalRecord> = from_py(a)?;
    let b: Vec<EvalRecord> = from_py(b)?;
    let metrics =
        metrics.iter().map(|s| s.parse::<pipeline::Metric>()).collect::<Result<Vec<_>, _>>().map_err(value_err)?;
    to_py(py, &pipeline::compare_models(&a, &b, &metrics, m, alpha).map_err(pipeline_err)?)
}

#[pymodule]
fn ulsforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("DEFAULT_VOI_SIZE", voi::DEFAULT_VOI_SIZE)?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyLesion>()?;
    m.add_class::<PyVoiSample>()?;
    m.add_class::<PyManifest>()?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add_function(wrap_pyfunction!(label_components, m)?)?;
    m.add_function(wrap_pyfunction!(lesion_instances, m)?)?;
    m.add_function(wrap_pyfunction!(lesion_center, m)?)?;
    m.add_function(wrap_pyfunction!(crop_voi, m)?)?;
    m.add_function(wrap_pyfunction!(isolate_central_lesion, m)?)?;
    m.add_function(wrap_pyfunction!(place_back, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(robustness, m)?)?;
    m.add_function(wrap_pyfunction!(sample_click_points, m)?)?;
    m.add_function(wrap_pyfunction!(click_plan, m)?)?;
    m.add_function(wrap_pyfunction!(paired_ttest, m)?)?;
    m.add_function(wrap_pyfunction!(bonferroni, m)?)?;
    m.add_function(wrap_pyfunction!(run_dice_eval, m)?)?;
    m.add_function(wrap_pyfunction!(run_robustness_eval, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_by_location, m)?)?;
    m.add_function(wrap_pyfunction!(compare_models, m)?)?;
    Ok(())
}

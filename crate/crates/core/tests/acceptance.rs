//! Acceptance gate: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach stdout.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use common::*;
use ulsforge::lesions::{label_components, ClickOrigin, ClickPoint};
use ulsforge::metrics::{robustness, RobustnessTriple};
use ulsforge::neighborhood::Connectivity;
use ulsforge::pipeline::{
    extract_vois, run_dice_eval, run_robustness_eval, split_patients, test_patient_count, write_records_csv,
    EvalConfig, Flag, Manifest, ManifestEntry,
};
use ulsforge::segmenter::{
    segment_external, CallContext, CommandTemplate, ExternalSegmenter, GrowParams, RegionGrower, SegmenterError,
    SegmenterRef,
};
use ulsforge::stats::paired_ttest;
use ulsforge::voi::{crop_voi, place_back, voi_offset, VoiConfig, DEFAULT_VOI_SIZE};
use ulsforge::volume::{read_volume, write_volume, Dims, Volume3D, VolumeKind, VoxelData};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let t = start.elapsed();
    if t > limit {
        Err(format!("took {t:.2?}, limit {limit:?}"))
    } else {
        Ok(t)
    }
}

fn c1_components() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut n = 0;
    for _ in 0..240 {
        let (bits, dims) = random_mask(&mut rng, 16);
        let mask = Volume3D::binary_mask(Dims::new(dims[0], dims[1], dims[2]), [1.0; 3], bits.clone()).unwrap();
        for conn in [Connectivity::Six, Connectivity::Eighteen, Connectivity::TwentySix] {
            let got = label_components(&mask, conn).map_err(|e| e.to_string())?;
            let want = union_find_labels(&bits, dims, conn);
            ensure!(got.labels().unwrap() == want, "mismatch on {dims:?} with {conn}");
            n += 1;
        }
    }
    let t = within(Duration::from_secs(10), start)?;
    Ok(format!("{n} labelings (240 masks x 3 connectivities) exact, {t:.2?}"))
}

fn c2_crop_place_back() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut boundary = 0;
    let cases = 240;
    for case in 0..cases {
        let (bits, d) = random_mask(&mut rng, 24);
        let dims = Dims::new(d[0], d[1], d[2]);
        let mask = Volume3D::binary_mask(dims, [1.0; 3], bits.clone()).unwrap();
        let image = Volume3D::intensity(dims, [1.0; 3], bits.iter().map(|&b| b as i16 * 50).collect()).unwrap();
        let on_edge = case % 2 == 0;
        let click: [usize; 3] = std::array::from_fn(|a| {
            if on_edge && rng.gen_bool(0.7) {
                if rng.gen_bool(0.5) {
                    0
                } else {
                    d[a] - 1
                }
            } else {
                rng.gen_range(0..d[a])
            }
        });
        boundary += (0..3).any(|a| click[a] == 0 || click[a] == d[a] - 1) as usize;
        let size: [usize; 3] = std::array::from_fn(|_| 2 * rng.gen_range(1..=16));
        let cfg = VoiConfig::with_size(size);
        let s = crop_voi(&image, &mask, ClickPoint { pos: click, origin: ClickOrigin::Centroid }, &cfg)
            .map_err(|e| e.to_string())?;
        let back = place_back(&s.mask, dims, s.offset).map_err(|e| e.to_string())?;
        let lo: [i64; 3] = std::array::from_fn(|a| click[a] as i64 - (size[a] / 2) as i64);
        ensure!(s.offset == lo && voi_offset(click, size) == lo, "offset {:?} vs {lo:?}", s.offset);
        let expected: Vec<u8> = (0..dims.len())
            .map(|i| {
                let p = dims.coords(i);
                let inside = (0..3).all(|a| (p[a] as i64) >= lo[a] && (p[a] as i64) < lo[a] + size[a] as i64);
                if inside {
                    bits[i]
                } else {
                    0
                }
            })
            .collect();
        ensure!(
            back.mask_bits().unwrap() == expected.as_slice(),
            "case {case}: dims {d:?} click {click:?} size {size:?}"
        );
    }
    Ok(format!("{cases} triples voxel-exact ({boundary} with boundary clicks)"))
}

fn line(bits: &[u8]) -> Volume3D {
    Volume3D::binary_mask(Dims::new(bits.len(), 1, 1), [1.0; 3], bits.to_vec()).unwrap()
}

fn c3_robustness_formula() -> Check {
    let a = line(&[0, 1, 1, 1, 0]);
    let ones =
        robustness(&RobustnessTriple { lesion_id: "same".into(), p_normal: a.clone(), p_aug1: a.clone(), p_aug2: a })
            .unwrap();
    ensure!(ones == 1.0, "(1,1,1) gave {ones}");
    let n = line(&[1, 1, 1, 1, 0, 0]);
    let s = line(&[0, 0, 1, 1, 1, 1]);
    let two_thirds =
        robustness(&RobustnessTriple { lesion_id: "half".into(), p_normal: n, p_aug1: s.clone(), p_aug2: s }).unwrap();
    ensure!((two_thirds - 2.0 / 3.0).abs() <= 1e-12, "(0.5,0.5,1) gave {two_thirds}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    for _ in 0..200 {
        let len = rng.gen_range(1..40);
        let ms: Vec<Volume3D> =
            (0..3).map(|_| line(&(0..len).map(|_| rng.gen_bool(0.4) as u8).collect::<Vec<_>>())).collect();
        let vals: Vec<f64> = perms
            .iter()
            .map(|p| {
                robustness(&RobustnessTriple {
                    lesion_id: "p".into(),
                    p_normal: ms[p[0]].clone(),
                    p_aug1: ms[p[1]].clone(),
                    p_aug2: ms[p[2]].clone(),
                })
                .unwrap()
            })
            .collect();
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        ensure!(spread <= 1e-15, "permutations differ by {spread}");
    }
    Ok(format!("(1,1,1) -> {ones}, (0.5,0.5,1) -> {two_thirds:.15}, 200 random triples permutation-invariant"))
}

fn c4_equivariance() -> Check {
    let start = Instant::now();
    let synth = synth_dataset(24, 4, false);
    let seg = RegionGrower { params: GrowParams::default() };
    let cfg = EvalConfig { seed_root: 4242, workers: 4, ..EvalConfig::default() };
    let recs = run_robustness_eval(&synth.manifest, &seg, &cfg).map_err(|e| e.to_string())?;
    ensure!(recs.len() == 24, "{} records", recs.len());
    for r in &recs {
        ensure!(r.dice == 1.0, "{}: dice {}", r.lesion_id, r.dice);
        ensure!(r.robustness == Some(1.0), "{}: robustness {:?}", r.lesion_id, r.robustness);
        ensure!(r.flags.is_empty(), "{}: flags {:?}", r.lesion_id, r.flags);
    }
    let t = within(Duration::from_secs(30), start)?;
    Ok(format!("24 lesions, VOI {:?}, all Dice = robustness = 1.0, {t:.2?}", cfg.voi.size))
}

#[derive(Deserialize)]
struct TCase {
    x: Vec<f64>,
    y: Vec<f64>,
    t: f64,
    df: u64,
    p: f64,
}

fn c5_statistics() -> Check {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ttest_reference.json");
    #[derive(Deserialize)]
    struct Fixture {
        cases: Vec<TCase>,
    }
    let fx: Fixture = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    ensure!(fx.cases.len() == 100, "{} cases", fx.cases.len());
    let mut worst = 0.0f64;
    for (i, c) in fx.cases.iter().enumerate() {
        ensure!((3..=50).contains(&c.x.len()), "case {i}: n = {}", c.x.len());
        let r = paired_ttest(&c.x, &c.y).map_err(|e| format!("case {i}: {e}"))?;
        ensure!(r.df == c.df, "case {i}: df {} vs {}", r.df, c.df);
        ensure!((r.t_stat - c.t).abs() <= 1e-9 * c.t.abs().max(1.0), "case {i}: t {} vs {}", r.t_stat, c.t);
        let err = (r.p_two_tailed - c.p).abs();
        worst = worst.max(err);
        ensure!(err <= 1e-9, "case {i}: p {} vs {} (err {err:e})", r.p_two_tailed, c.p);
    }
    let r = paired_ttest(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5]).unwrap();
    ensure!((r.t_stat - 4.2426).abs() <= 1e-3 && (r.p_two_tailed - 0.0132).abs() <= 1e-3, "d=1..5: {r:?}");
    Ok(format!("100 reference cases, max |dp| = {worst:.1e}; d=[1..5] t = {:.4}, p = {:.4}", r.t_stat, r.p_two_tailed))
}

fn c6_determinism() -> Check {
    let synth = synth_dataset(16, 6, true);
    let seg = RegionGrower { params: GrowParams::default() };
    let mut outputs = Vec::new();
    for workers in [1, 3, 8] {
        let cfg = EvalConfig { seed_root: 99, workers, ..EvalConfig::default() };
        let recs = run_robustness_eval(&synth.manifest, &seg, &cfg).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &recs).unwrap();
        outputs.push((workers, buf, recs));
    }
    for (w, buf, _) in &outputs[1..] {
        ensure!(*buf == outputs[0].1, "CSV with {w} workers differs from 1 worker");
    }
    let below_one = outputs[0].2.iter().filter(|r| r.robustness.is_some_and(|v| v < 1.0)).count();
    Ok(format!(
        "records.csv identical for 1/3/8 workers ({} bytes, {below_one}/16 lesions with robustness < 1)",
        outputs[0].1.len()
    ))
}

fn c7_protocol_shape() -> Check {
    ensure!(DEFAULT_VOI_SIZE == [128, 128, 64], "default VOI {DEFAULT_VOI_SIZE:?}");
    ensure!(VoiConfig::default().size == [128, 128, 64], "VoiConfig default");
    ensure!(EvalConfig::default().voi.size == [128, 128, 64], "EvalConfig default");

    let synth = synth_dataset(8, 7, false);
    let seg = Counting::new(RegionGrower { params: GrowParams::default() });
    let cfg = EvalConfig { seed_root: 1, k: 2, workers: 2, ..EvalConfig::default() };
    let recs = run_robustness_eval(&synth.manifest, &seg, &cfg).map_err(|e| e.to_string())?;
    ensure!(seg.count() == 3 * recs.len(), "{} calls for {} lesions", seg.count(), recs.len());

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let n_pat = rng.gen_range(1..40);
        let mut entries = Vec::new();
        for p in 0..n_pat {
            for l in 0..rng.gen_range(1..6) {
                entries.push(ManifestEntry {
                    lesion_id: format!("P{p}_L{l}"),
                    patient_id: format!("P{p}"),
                    dataset: "d".into(),
                    location: "undefined".into(),
                    image_path: "i.nii".into(),
                    mask_path: "m.nii".into(),
                    component_label: None,
                    click: None,
                });
            }
        }
        entries.shuffle(&mut rng);
        let m = Manifest::new(entries);
        let (train, test) = split_patients(&m, 0.2, rng.gen()).map_err(|e| e.to_string())?;
        let tp = test.patients();
        ensure!(train.patients().is_disjoint(&tp), "case {case}: patient on both sides");
        ensure!(
            tp.len() == test_patient_count(0.2, n_pat) && tp.len() == (0.2 * n_pat as f64).ceil() as usize,
            "case {case}"
        );
        ensure!(train.len() + test.len() == m.len(), "case {case}: lesions lost");
    }

    let out = tempfile::tempdir().unwrap();
    let cfg = EvalConfig { seed_root: 5, ..EvalConfig::default() };
    let index = extract_vois(&synth.manifest, &cfg, 2, out.path()).map_err(|e| e.to_string())?;
    ensure!(index.failures.is_empty(), "{:?}", index.failures);
    ensure!(index.samples.len() == 3 * synth.manifest.len(), "{} samples", index.samples.len());
    for s in &index.samples {
        let m = read_volume(out.path().join(&s.mask_file)).unwrap();
        let labels = label_components(&m, cfg.connectivity).unwrap().labels().unwrap();
        let n = labels.iter().copied().max().unwrap_or(0);
        ensure!(n == 1, "{}: {n} components", s.mask_file);
    }
    Ok(format!(
        "VOI 128x128x64; {} segmenter calls for {} lesions; 200 splits patient-clean; {} VOIs single-component",
        seg.count(),
        recs.len(),
        index.samples.len()
    ))
}

fn same_bits(a: &VoxelData, b: &VoxelData) -> bool {
    match (a, b) {
        (VoxelData::F32(x), VoxelData::F32(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        _ => a == b,
    }
}

fn c8_nifti_round_trip() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..50 {
        let dims = Dims::new(rng.gen_range(1..24), rng.gen_range(1..24), rng.gen_range(1..12));
        let spacing = [rng.gen_range(0.3f32..5.0), rng.gen_range(0.3f32..5.0), rng.gen_range(0.3f32..5.0)];
        let n = dims.len();
        let vol = match i % 4 {
            0 => Volume3D::intensity(dims, spacing, (0..n).map(|_| rng.gen()).collect()),
            1 => Volume3D::binary_mask(dims, spacing, (0..n).map(|_| rng.gen_range(0..2)).collect()),
            2 => Volume3D::labeled_mask(dims, spacing, (0..n).map(|_| rng.gen_range(0..1000)).collect()),
            _ => Volume3D::new(
                dims,
                spacing,
                VolumeKind::Intensity,
                VoxelData::F32((0..n).map(|_| rng.gen_range(-3000.0f32..3000.0)).collect()),
            ),
        }
        .unwrap();
        for compress in [false, true] {
            let path = dir.path().join(format!("v{i}.nii{}", if compress { ".gz" } else { "" }));
            write_volume(&vol, &path, compress).map_err(|e| e.to_string())?;
            let back = read_volume(&path).map_err(|e| e.to_string())?;
            ensure!(back.dims() == vol.dims(), "{i}: dims");
            ensure!(back.spacing().map(f32::to_bits) == vol.spacing().map(f32::to_bits), "{i}: spacing");
            ensure!(back.kind() == vol.kind(), "{i}: kind {:?}", back.kind());
            ensure!(same_bits(back.data(), vol.data()), "{i}: voxel data (compress={compress})");
        }
    }
    Ok("50 volumes (u8/i16/i32/f32) bit-exact, gzip and raw".into())
}

fn c9_external_adapter() -> Check {
    let synth = synth_dataset(8, 9, false);
    let gt = tempfile::tempdir().unwrap();
    let cfg = EvalConfig { workers: 2, ..EvalConfig::default() };
    extract_vois(&synth.manifest, &cfg, 0, gt.path()).map_err(|e| e.to_string())?;
    // the adapter's input is <lesion>_c<variant>.nii.gz
    let echo = format!(
        "sh -c 'b=$(basename \"$1\" .nii.gz); cp \"{}/${{b%_c*}}_mask.nii.gz\" \"$2\"' _ {{image}} {{output}} {{x}} {{y}} {{z}}",
        gt.path().display()
    );
    let seg = SegmenterRef::parse(&format!("exec:{echo}"), GrowParams::default()).unwrap().build().unwrap();
    let recs = run_dice_eval(&synth.manifest, seg.as_ref(), &cfg).map_err(|e| e.to_string())?;
    ensure!(recs.len() == 8, "{} records", recs.len());
    for r in &recs {
        ensure!(
            r.dice == 1.0 && r.flags.is_empty(),
            "{}: dice {} flags {:?} {:?}",
            r.lesion_id,
            r.dice,
            r.flags,
            r.error
        );
    }

    let bad = gt.path().join("bad.nii.gz");
    write_volume(&Volume3D::empty_mask(Dims::new(4, 4, 4), [1.0; 3]), &bad, true).unwrap();
    let wrong = format!("sh -c 'cp \"{}\" \"$2\"' _ {{image}} {{output}} {{x}} {{y}} {{z}}", bad.display());
    let ext = ExternalSegmenter::new(CommandTemplate::parse(&wrong).unwrap(), 30.0);
    let voi = Volume3D::intensity(Dims::new(8, 8, 4), [1.0; 3], vec![0; 256]).unwrap();
    let direct = segment_external(&voi, [4, 4, 2], &ext, CallContext { lesion_id: "x", variant: 0 });
    ensure!(matches!(direct, Err(SegmenterError::BadMaskDims { .. })), "direct call gave {direct:?}");
    let recs = run_dice_eval(&synth.manifest, &ext, &cfg).map_err(|e| e.to_string())?;
    ensure!(recs.len() == 8, "{} records", recs.len());
    for r in &recs {
        ensure!(r.flags.contains(&Flag::Failed), "{}: not flagged", r.lesion_id);
        ensure!(r.error.as_deref().is_some_and(|e| e.contains("dims")), "{}: error {:?}", r.lesion_id, r.error);
    }
    Ok("echo adapter Dice 1.0 on 8 lesions; wrong-dims adapter -> BadMaskDims, 8 flagged records".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("connected components vs union-find oracle", c1_components),
        ("crop / place-back round trip", c2_crop_place_back),
        ("pairwise-Dice robustness formula", c3_robustness_formula),
        ("equivariance forces robustness 1.0", c4_equivariance),
        ("paired t-test vs high-precision reference", c5_statistics),
        ("determinism across worker counts", c6_determinism),
        ("protocol shape checks", c7_protocol_shape),
        ("NIfTI round trip", c8_nifti_round_trip),
        ("external adapter contract", c9_external_adapter),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

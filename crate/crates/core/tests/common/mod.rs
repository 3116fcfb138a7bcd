#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use ulsforge::neighborhood::Connectivity;
use ulsforge::pipeline::{Manifest, ManifestEntry};
use ulsforge::segmenter::{CallContext, Segmentation, Segmenter, SegmenterError};
use ulsforge::volume::{write_volume, Dims, Volume3D};

pub const LESION_HU: i16 = 100;
pub const BACKGROUND_HU: i16 = -1000;

pub struct Synth {
    pub dir: TempDir,
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    /// Lesion voxel sets, parallel to `manifest.entries`.
    pub lesions: Vec<Vec<[usize; 3]>>,
}

/// Lesion anchor points in an 80x80x40 grid; blobs stay within ±6 in x/y
/// and ±4 in z, so neighbors are at least 20 voxels apart.
const ANCHORS: [[usize; 3]; 4] = [[20, 20, 12], [58, 22, 14], [22, 58, 26], [56, 56, 27]];
pub const SYNTH_DIMS: [usize; 3] = [80, 80, 40];

/// Union of random boxes that all contain `anchor`.
fn blob(rng: &mut ChaCha8Rng, anchor: [usize; 3]) -> Vec<[usize; 3]> {
    let mut vox = std::collections::BTreeSet::new();
    for _ in 0..rng.gen_range(1..=3) {
        let lo = [anchor[0] - rng.gen_range(0..=6), anchor[1] - rng.gen_range(0..=6), anchor[2] - rng.gen_range(0..=4)];
        let hi = [anchor[0] + rng.gen_range(0..=6), anchor[1] + rng.gen_range(0..=6), anchor[2] + rng.gen_range(0..=4)];
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    vox.insert([x, y, z]);
                }
            }
        }
    }
    vox.into_iter().collect()
}

/// Synthetic dataset of box-union lesions on a -1000 HU background.
/// Even volumes store a binary mask and select lesions by click; odd ones
/// store a labeled mask and select by label. With `noisy`, lesion and
/// background intensities vary so that region growing depends on the
/// click.
pub fn synth_dataset(n_lesions: usize, seed: u64, noisy: bool) -> Synth {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = Dims::new(SYNTH_DIMS[0], SYNTH_DIMS[1], SYNTH_DIMS[2]);
    let mut entries = Vec::new();
    let mut lesions = Vec::new();
    let n_vol = n_lesions.div_ceil(ANCHORS.len());
    for v in 0..n_vol {
        let mut img = vec![BACKGROUND_HU; dims.len()];
        if noisy {
            for x in img.iter_mut() {
                *x = rng.gen_range(-1000..-900);
            }
        }
        let mut labels = vec![0i32; dims.len()];
        let count = (n_lesions - v * ANCHORS.len()).min(ANCHORS.len());
        let img_path = dir.path().join(format!("vol{v:03}_img.nii.gz"));
        let mask_path = dir.path().join(format!("vol{v:03}_mask.nii.gz"));
        for (j, &anchor) in ANCHORS.iter().enumerate().take(count) {
            let vox = blob(&mut rng, anchor);
            for &p in &vox {
                let i = dims.index(p);
                img[i] = if noisy { rng.gen_range(20..260) } else { LESION_HU };
                labels[i] = 10 + j as i32;
            }
            let labeled = v % 2 == 1;
            entries.push(ManifestEntry {
                lesion_id: format!("L{:03}", v * ANCHORS.len() + j),
                patient_id: format!("P{:02}", v / 2),
                dataset: if v % 3 == 2 { "B".into() } else { "A".into() },
                location: ["liver", "lung", "bone", ""][j].into(),
                image_path: img_path.clone(),
                mask_path: mask_path.clone(),
                component_label: labeled.then_some(10 + j as u32),
                click: (!labeled).then_some(vox[vox.len() / 2]),
            });
            lesions.push(vox);
        }
        write_volume(&Volume3D::intensity(dims, [0.8, 0.8, 2.5], img).unwrap(), &img_path, true).unwrap();
        let mask = if v % 2 == 1 {
            Volume3D::labeled_mask(dims, [0.8, 0.8, 2.5], labels).unwrap()
        } else {
            Volume3D::binary_mask(dims, [0.8, 0.8, 2.5], labels.iter().map(|&l| (l != 0) as u8).collect()).unwrap()
        };
        write_volume(&mask, &mask_path, true).unwrap();
    }
    let manifest = Manifest::new(entries);
    let manifest_path = dir.path().join("manifest.json");
    manifest.save(&manifest_path).unwrap();
    Synth { dir, manifest, manifest_path, lesions }
}

/// Brute-force component labeling: union-find over every voxel pair whose
/// offset satisfies the connectivity predicate (each axis within 1, at most
/// 1/2/3 nonzero axes), then labels renumbered by first appearance in
/// linear order.
pub fn union_find_labels(bits: &[u8], dims: [usize; 3], conn: Connectivity) -> Vec<i32> {
    let max_nonzero = match conn {
        Connectivity::Six => 1,
        Connectivity::Eighteen => 2,
        Connectivity::TwentySix => 3,
    };
    let n = bits.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut deltas = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let nz = [dx, dy, dz].iter().filter(|d| **d != 0).count();
                if nz >= 1 && nz <= max_nonzero {
                    deltas.push([dx, dy, dz]);
                }
            }
        }
    }
    let [nx, ny, nzd] = dims.map(|d| d as i64);
    for i in 0..n {
        if bits[i] == 0 {
            continue;
        }
        let c = [(i as i64) % nx, (i as i64 / nx) % ny, i as i64 / (nx * ny)];
        for d in &deltas {
            let q = [c[0] + d[0], c[1] + d[1], c[2] + d[2]];
            if q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= nx || q[1] >= ny || q[2] >= nzd {
                continue;
            }
            let j = (q[0] + nx * (q[1] + ny * q[2])) as usize;
            if bits[j] != 0 {
                let (ra, rb) = (find(&mut parent, i), find(&mut parent, j));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut out = vec![0i32; n];
    let mut names = std::collections::HashMap::new();
    for i in (0..n).filter(|&i| bits[i] != 0) {
        let r = find(&mut parent, i);
        let next = names.len() as i32 + 1;
        out[i] = *names.entry(r).or_insert(next);
    }
    out
}

pub fn random_mask(rng: &mut ChaCha8Rng, max_side: usize) -> (Vec<u8>, [usize; 3]) {
    let dims = [rng.gen_range(1..=max_side), rng.gen_range(1..=max_side), rng.gen_range(1..=max_side)];
    let density: f64 = rng.gen_range(0.05..0.6);
    let bits = (0..dims[0] * dims[1] * dims[2]).map(|_| rng.gen_bool(density) as u8).collect();
    (bits, dims)
}

/// Wraps a segmenter and counts calls.
pub struct Counting<S> {
    pub inner: S,
    pub calls: AtomicUsize,
}

impl<S> Counting<S> {
    pub fn new(inner: S) -> Self {
        Counting { inner, calls: AtomicUsize::new(0) }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<S: Segmenter> Segmenter for Counting<S> {
    fn model_id(&self) -> String {
        self.inner.model_id()
    }

    fn segment(&self, img: &Volume3D, click: [usize; 3], ctx: CallContext<'_>) -> Result<Segmentation, SegmenterError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.segment(img, click, ctx)
    }
}

pub fn write_sh(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
    p
}

//! Synthetic multimodal phantoms, augmentation and the on-disk case format.
//!
//! A phantom is a brain-shaped ellipsoid containing one or more tumors, each
//! made of three nested ellipsoids: edema outside, an enhancing shell, and a
//! necrotic center. Every modality renders the same anatomy with its own
//! per-tissue intensity so that the channels carry complementary information
//! (edema is bright on FLAIR, the enhancing shell on T1ce, necrosis on T2).

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Modality order used for every channel stack in the crate.
pub const MODALITIES: [&str; 4] = ["flair", "t1", "t1ce", "t2"];
pub const NUM_MODALITIES: usize = 4;
pub const NUM_CLASSES: usize = 4;
pub const CASE_FORMAT_VERSION: u32 = 1;

/// One patient-like sample: four aligned volumes plus a voxel label map.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalCase {
    /// `K×D×H×W`, intensities in `[0, 1]`.
    pub volumes: Tensor<f32>,
    /// `D×H×W`, values in `{0, 1, 2, 3}`.
    pub labels: Vec<u8>,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub case_id: String,
}

impl MultimodalCase {
    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Check the structural invariants; `patch` is the tokenizer patch size.
    pub fn validate(&self, patch: usize) -> Result<()> {
        let [d, h, w] = self.dims;
        if self.volumes.shape() != [NUM_MODALITIES, d, h, w] {
            return Err(Error::data(format!(
                "case {}: volume shape {:?} does not match dims {:?}",
                self.case_id,
                self.volumes.shape(),
                self.dims
            )));
        }
        if self.labels.len() != d * h * w {
            return Err(Error::data(format!("case {}: label count mismatch", self.case_id)));
        }
        if self.dims.iter().any(|&x| x == 0 || x % patch != 0) {
            return Err(Error::config(format!(
                "case {}: dims {:?} not divisible by patch size {patch}",
                self.case_id, self.dims
            )));
        }
        if let Some(v) = self.volumes.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::data(format!("case {}: intensity {v} outside [0,1]", self.case_id)));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::data(format!("case {}: label value {l}", self.case_id)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::data(format!("case {}: non-positive spacing", self.case_id)));
        }
        Ok(())
    }

    /// Single modality channel as a `1×D×H×W` tensor.
    pub fn channel(&self, m: usize) -> Tensor<f32> {
        self.volumes.slice_leading(m, 1)
    }
}

/// Whole tumor, tumor core and enhancing tumor masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub wt: Vec<bool>,
    pub tc: Vec<bool>,
    pub et: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Wt,
    Tc,
    Et,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    pub fn name(self) -> &'static str {
        match self {
            Region::Wt => "WT",
            Region::Tc => "TC",
            Region::Et => "ET",
        }
    }

    pub fn parse(s: &str) -> Option<Region> {
        match s.to_ascii_uppercase().as_str() {
            "WT" => Some(Region::Wt),
            "TC" => Some(Region::Tc),
            "ET" => Some(Region::Et),
            _ => None,
        }
    }
}

impl RegionMasks {
    pub fn get(&self, region: Region) -> &[bool] {
        match region {
            Region::Wt => &self.wt,
            Region::Tc => &self.tc,
            Region::Et => &self.et,
        }
    }
}

/// WT = {1,2,3}, TC = {1,3}, ET = {3}.
pub fn derive_region_masks(labels: &[u8]) -> Result<RegionMasks> {
    if let Some(l) = labels.iter().find(|&&l| l > 3) {
        return Err(Error::data(format!("label value {l} outside {{0,1,2,3}}")));
    }
    Ok(RegionMasks {
        wt: labels.iter().map(|&l| l != 0).collect(),
        tc: labels.iter().map(|&l| l == 1 || l == 3).collect(),
        et: labels.iter().map(|&l| l == 3).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    /// Inclusive range of tumor count.
    pub tumor_count: (usize, usize),
    /// Outer (edema) radius as a fraction of the smallest dimension.
    pub radius_fraction: (f64, f64),
    /// Tumor-core radius relative to the outer radius.
    pub core_ratio: (f64, f64),
    /// Necrotic radius relative to the core radius.
    pub necrosis_ratio: (f64, f64),
    pub noise_sigma: f64,
    /// Uniform per-case perturbation of every tissue intensity.
    pub intensity_jitter: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            tumor_count: (1, 3),
            radius_fraction: (0.2, 0.32),
            core_ratio: (0.5, 0.7),
            necrosis_ratio: (0.4, 0.6),
            noise_sigma: 0.05,
            intensity_jitter: 0.05,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("radius_fraction", self.radius_fraction),
            ("core_ratio", self.core_ratio),
            ("necrosis_ratio", self.necrosis_ratio),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(Error::config(format!("phantom.{name} must satisfy 0 < lo <= hi <= 1")));
            }
        }
        if self.tumor_count.0 > self.tumor_count.1 {
            return Err(Error::config("phantom.tumor_count must be an ordered range"));
        }
        if !(self.noise_sigma >= 0.0 && self.intensity_jitter >= 0.0) {
            return Err(Error::config("phantom noise parameters must be non-negative"));
        }
        Ok(())
    }
}

/// Tissue classes rendered by the phantom (labels 1..=3 plus two backgrounds).
#[derive(Clone, Copy)]
enum Tissue {
    Outside,
    Brain,
    Necrotic,
    Edema,
    Enhancing,
}

/// Mean intensity per modality (rows, `MODALITIES` order) and tissue (columns).
const TISSUE_MEANS: [[f64; 5]; NUM_MODALITIES] = [
    // outside, brain, necrotic, edema, enhancing
    [0.0, 0.35, 0.55, 0.90, 0.60], // FLAIR
    [0.0, 0.55, 0.20, 0.40, 0.50], // T1
    [0.0, 0.50, 0.25, 0.45, 0.95], // T1ce
    [0.0, 0.40, 0.85, 0.75, 0.55], // T2
];

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3], scale: f64) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let r = self.radii[a] * scale;
            let t = (p[a] - self.center[a]) / r;
            s += t * t;
        }
        s <= 1.0
    }
}

struct Tumor {
    outer: Ellipsoid,
    core: f64,
    necrosis: f64,
}

impl Tumor {
    fn label(&self, p: [f64; 3]) -> u8 {
        if !self.outer.contains(p, 1.0) {
            0
        } else if self.outer.contains(p, self.core * self.necrosis) {
            1
        } else if self.outer.contains(p, self.core) {
            3
        } else {
            2
        }
    }
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Stable per-case seed derived from a global seed and the case index.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = global ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic phantom for `(seed, dims, params)`.
pub fn generate_case(seed: u64, dims: [usize; 3], params: &PhantomParams, patch: usize) -> Result<MultimodalCase> {
    if dims.iter().any(|&d| d == 0 || d % patch != 0) {
        return Err(Error::config(format!(
            "phantom dims {dims:?} must be positive multiples of the patch size {patch}"
        )));
    }
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fd = dims.map(|d| d as f64);
    let brain = Ellipsoid {
        center: fd.map(|d| (d - 1.0) / 2.0),
        radii: fd.map(|d| 0.46 * d),
    };
    let min_dim = fd.iter().copied().fold(f64::INFINITY, f64::min);
    let count = rng.random_range(params.tumor_count.0..=params.tumor_count.1);
    let tumors: Vec<Tumor> = (0..count)
        .map(|_| {
            let r = sample_range(&mut rng, params.radius_fraction) * min_dim;
            let radii = [0; 3].map(|_| r * rng.random_range(0.85..1.15));
            let center = [0, 1, 2].map(|a| fd[a] * rng.random_range(0.35..0.65));
            Tumor {
                outer: Ellipsoid { center, radii },
                core: sample_range(&mut rng, params.core_ratio),
                necrosis: sample_range(&mut rng, params.necrosis_ratio),
            }
        })
        .collect();
    let mut means = TISSUE_MEANS;
    for row in means.iter_mut() {
        for v in row.iter_mut().skip(1) {
            if params.intensity_jitter > 0.0 {
                *v += rng.random_range(-params.intensity_jitter..params.intensity_jitter);
            }
        }
    }
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).map_err(|e| Error::config(e.to_string()))?;

    let [d, h, w] = dims;
    let nvox = d * h * w;
    let mut labels = vec![0u8; nvox];
    let mut tissue = vec![Tissue::Outside; nvox];
    let rank = |l: u8| match l {
        2 => 1,
        3 => 2,
        1 => 3,
        _ => 0,
    };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let p = [z as f64, y as f64, x as f64];
                let mut label = 0u8;
                for t in &tumors {
                    let l = t.label(p);
                    if rank(l) > rank(label) {
                        label = l;
                    }
                }
                labels[i] = label;
                tissue[i] = match label {
                    1 => Tissue::Necrotic,
                    2 => Tissue::Edema,
                    3 => Tissue::Enhancing,
                    _ if brain.contains(p, 1.0) => Tissue::Brain,
                    _ => Tissue::Outside,
                };
            }
        }
    }
    let mut vols = Vec::with_capacity(NUM_MODALITIES * nvox);
    for row in &means {
        for &t in &tissue {
            let v = row[t as usize] + if params.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            vols.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Ok(MultimodalCase {
        volumes: Tensor::from_vec(&[NUM_MODALITIES, d, h, w], vols)?,
        labels,
        dims,
        spacing: [1.0; 3],
        case_id: format!("phantom-{seed:016x}"),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop: [usize; 3],
    /// Flip probability per axis (depth, height, width).
    pub flip_prob: [f64; 3],
    /// Probability of one 90°·k rotation in a randomly chosen square plane.
    pub rotate_prob: f64,
    /// Probability, per modality, of a random intensity scale and shift.
    pub intensity_prob: f64,
    pub scale_range: (f64, f64),
    pub shift_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop: [96; 3],
            flip_prob: [0.5; 3],
            rotate_prob: 0.5,
            intensity_prob: 0.5,
            scale_range: (0.9, 1.1),
            shift_range: (-0.1, 0.1),
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation at the given crop size.
    pub fn identity(crop: [usize; 3]) -> Self {
        AugmentConfig {
            crop,
            flip_prob: [0.0; 3],
            rotate_prob: 0.0,
            intensity_prob: 0.0,
            scale_range: (1.0, 1.0),
            shift_range: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = self.flip_prob.iter().chain([&self.rotate_prob, &self.intensity_prob]);
        for &p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("augment probabilities must lie in [0,1]"));
            }
        }
        if self.scale_range.0 > self.scale_range.1 || self.shift_range.0 > self.shift_range.1 {
            return Err(Error::config("augment ranges must be ordered"));
        }
        if self.crop.iter().any(|&c| c == 0) {
            return Err(Error::config("augment crop must be positive"));
        }
        Ok(())
    }
}

/// Apply `f(dst_index) -> src_index` to every channel and the label map.
fn remap(case: &MultimodalCase, dims: [usize; 3], src_of: impl Fn(usize, usize, usize) -> usize) -> MultimodalCase {
    let [d, h, w] = dims;
    let n_out = d * h * w;
    let n_in = case.num_voxels();
    let mut vols = Vec::with_capacity(NUM_MODALITIES * n_out);
    let mut idx = Vec::with_capacity(n_out);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                idx.push(src_of(z, y, x));
            }
        }
    }
    for m in 0..NUM_MODALITIES {
        let ch = &case.volumes.data()[m * n_in..(m + 1) * n_in];
        vols.extend(idx.iter().map(|&i| ch[i]));
    }
    MultimodalCase {
        volumes: Tensor::from_vec(&[NUM_MODALITIES, d, h, w], vols).expect("sized"),
        labels: idx.iter().map(|&i| case.labels[i]).collect(),
        dims,
        spacing: case.spacing,
        case_id: case.case_id.clone(),
    }
}

/// Crop at a fixed offset.
pub fn crop_case(case: &MultimodalCase, offset: [usize; 3], size: [usize; 3]) -> Result<MultimodalCase> {
    for a in 0..3 {
        if offset[a] + size[a] > case.dims[a] {
            return Err(Error::config(format!(
                "crop {size:?} at {offset:?} exceeds volume {:?}",
                case.dims
            )));
        }
    }
    let [_, h, w] = case.dims;
    Ok(remap(case, size, |z, y, x| {
        ((z + offset[0]) * h + y + offset[1]) * w + x + offset[2]
    }))
}

/// Crop centered in the volume.
pub fn center_crop(case: &MultimodalCase, size: [usize; 3]) -> Result<MultimodalCase> {
    if size == case.dims {
        return Ok(case.clone());
    }
    let mut offset = [0; 3];
    for a in 0..3 {
        offset[a] = case.dims[a].checked_sub(size[a]).ok_or_else(|| {
            Error::config(format!("crop {size:?} larger than volume {:?}", case.dims))
        })? / 2;
    }
    crop_case(case, offset, size)
}

fn flip_axis(case: &MultimodalCase, axis: usize) -> MultimodalCase {
    let [d, h, w] = case.dims;
    remap(case, case.dims, |z, y, x| {
        let (z, y, x) = match axis {
            0 => (d - 1 - z, y, x),
            1 => (z, h - 1 - y, x),
            _ => (z, y, w - 1 - x),
        };
        (z * h + y) * w + x
    })
}

/// Rotate by 90° in the plane of axes `(a, b)` (extents must match).
fn rot90(case: &MultimodalCase, plane: (usize, usize)) -> MultimodalCase {
    let [_, h, w] = case.dims;
    let n = case.dims[plane.0];
    remap(case, case.dims, |z, y, x| {
        let mut p = [z, y, x];
        let (i, j) = (p[plane.0], p[plane.1]);
        p[plane.0] = j;
        p[plane.1] = n - 1 - i;
        (p[0] * h + p[1]) * w + p[2]
    })
}

/// Random crop, flips, 90° rotations and per-modality intensity changes.
///
/// Spatial transforms hit all channels and the labels identically; the
/// random draws happen in a fixed order so the result is a pure function of
/// `(case, seed, config)`.
pub fn augment(case: &MultimodalCase, seed: u64, config: &AugmentConfig) -> Result<MultimodalCase> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = [0; 3];
    for a in 0..3 {
        let slack = case.dims[a].checked_sub(config.crop[a]).ok_or_else(|| {
            Error::config(format!("crop {:?} larger than volume {:?}", config.crop, case.dims))
        })?;
        offset[a] = rng.random_range(0..=slack);
    }
    let mut out = if config.crop == case.dims {
        case.clone()
    } else {
        crop_case(case, offset, config.crop)?
    };
    for axis in 0..3 {
        let u: f64 = rng.random();
        if u < config.flip_prob[axis] {
            out = flip_axis(&out, axis);
        }
    }
    let u: f64 = rng.random();
    let plane_pick = rng.random_range(0..3usize);
    let turns = rng.random_range(1..=3usize);
    if u < config.rotate_prob {
        let planes = [(0, 1), (0, 2), (1, 2)];
        let square: Vec<_> = planes
            .iter()
            .copied()
            .filter(|&(a, b)| out.dims[a] == out.dims[b])
            .collect();
        if !square.is_empty() {
            let plane = square[plane_pick % square.len()];
            for _ in 0..turns {
                out = rot90(&out, plane);
            }
        }
    }
    let n = out.num_voxels();
    for m in 0..NUM_MODALITIES {
        let u: f64 = rng.random();
        let scale = sample_range(&mut rng, config.scale_range) as f32;
        let shift = sample_range(&mut rng, config.shift_range) as f32;
        if u < config.intensity_prob {
            for v in &mut out.volumes.data_mut()[m * n..(m + 1) * n] {
                *v = (*v * scale + shift).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseMeta {
    format_version: u32,
    case_id: String,
    dims: [usize; 3],
    spacing: [f64; 3],
    modalities: Vec<String>,
    dtype: String,
    label_dtype: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Write `meta.json`, `vol_<modality>.raw` (f32 little-endian, D-major) and `seg.raw` (u8).
pub fn write_case(case: &MultimodalCase, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = CaseMeta {
        format_version: CASE_FORMAT_VERSION,
        case_id: case.case_id.clone(),
        dims: case.dims,
        spacing: case.spacing,
        modalities: MODALITIES.iter().map(|s| s.to_string()).collect(),
        dtype: "f32le".into(),
        label_dtype: "u8".into(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("serializable");
    fs::write(&meta_path, json).map_err(io_err(&meta_path))?;
    let n = case.num_voxels();
    for (m, name) in MODALITIES.iter().enumerate() {
        let path = dir.join(format!("vol_{name}.raw"));
        let bytes: Vec<u8> = case.volumes.data()[m * n..(m + 1) * n]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let seg = dir.join("seg.raw");
    fs::write(&seg, &case.labels).map_err(io_err(&seg))?;
    Ok(())
}

pub fn read_case(dir: &Path) -> Result<MultimodalCase> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: CaseMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.format_version != CASE_FORMAT_VERSION {
        return Err(Error::format(
            &meta_path,
            format!("unknown format version {}", meta.format_version),
        ));
    }
    if meta.dtype != "f32le" || meta.label_dtype != "u8" {
        return Err(Error::format(&meta_path, "unsupported dtype tag"));
    }
    if meta.modalities != MODALITIES {
        return Err(Error::format(&meta_path, format!("modality list {:?}", meta.modalities)));
    }
    let [d, h, w] = meta.dims;
    let n = d * h * w;
    let mut vols = Vec::with_capacity(NUM_MODALITIES * n);
    for name in MODALITIES {
        let path = dir.join(format!("vol_{name}.raw"));
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() != 4 * n {
            return Err(Error::format(
                &path,
                format!("expected {} bytes for dims {:?}, found {}", 4 * n, meta.dims, bytes.len()),
            ));
        }
        vols.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
    }
    let seg = dir.join("seg.raw");
    let labels = fs::read(&seg).map_err(io_err(&seg))?;
    if labels.len() != n {
        return Err(Error::format(&seg, format!("expected {n} label bytes, found {}", labels.len())));
    }
    let case = MultimodalCase {
        volumes: Tensor::from_vec(&[NUM_MODALITIES, d, h, w], vols)?,
        labels,
        dims: meta.dims,
        spacing: meta.spacing,
        case_id: meta.case_id,
    };
    case.validate(1).map_err(|e| Error::format(dir, e.to_string()))?;
    Ok(case)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub dir: String,
    pub split: Split,
}

/// Dataset manifest: case directories (relative to the manifest) and splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub dims: [usize; 3],
    pub cases: Vec<ManifestEntry>,
}

/// Train/val/test sizes for `n` cases: 10% val and 20% test (floored, at
/// least one each), remainder to train.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    let val = (n / 10).max(1);
    let test = (n / 5).max(1);
    match n.checked_sub(val + test) {
        Some(train) if train >= 1 => Ok((train, val, test)),
        _ => Err(Error::config(format!(
            "{n} cases cannot form non-empty train/val/test splits"
        ))),
    }
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn case_dirs(&self, root: &Path, split: Split) -> Vec<PathBuf> {
        self.cases
            .iter()
            .filter(|c| c.split == split)
            .map(|c| root.join(&c.dir))
            .collect()
    }

    pub fn load_split(&self, root: &Path, split: Split) -> Result<Vec<MultimodalCase>> {
        self.case_dirs(root, split).iter().map(|d| read_case(d)).collect()
    }
}

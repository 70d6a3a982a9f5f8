//! Synthetic registered H&E/IHC patch pairs with known HER2 class, and the
//! on-disk dataset built from them.
//!
//! Patches are rendered in stain-concentration space and mixed through the
//! HED stain matrix, so the stain pipeline can recover what was drawn.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LgdError, Result};
use crate::rng::SplitMix64;
use crate::stain::{
    membrane_mask, nuclei_density_with, od_to_rgb, MembraneMask, RgbPatch, StainMatrix,
    DEFAULT_GRID, DEFAULT_SIGMA,
};
use crate::tensor::Tensor;

/// Default patch side.
pub const DEFAULT_SIZE: usize = 32;
/// Offset between the train and test seed ranges.
pub const TEST_SEED_OFFSET: u64 = 1 << 32;
/// Manifest file name inside a dataset directory.
pub const MANIFEST_NAME: &str = "manifest.csv";

/// Nuclei per patch by class, half-open.
const NUCLEI_RANGE: [(u64, u64); 4] = [(3, 5), (5, 8), (8, 12), (12, 16)];
const RING_COMPLETENESS: [f64; 4] = [0.0, 0.35, 0.70, 1.0];
const RING_INTENSITY: [f64; 4] = [0.0, 0.3, 0.6, 0.9];
const TEXTURE_AMPLITUDE: f64 = 0.05;

const NUCLEUS_RADIUS: (f64, f64) = (1.6, 3.0);
const NUCLEUS_STAIN: (f64, f64) = (0.45, 1.0);
const RING_INNER: f64 = 0.5;
const RING_OUTER: f64 = 2.0;
const EDGE_MARGIN: f64 = 2.0;
const MIN_SEPARATION: f64 = 4.5;
const PLACEMENT_TRIES: usize = 64;

const HE_EOSIN: (f64, f64) = (0.25, 0.40);
const HE_HEMATOXYLIN_BG: f64 = 0.05;
const HE_NOISE: f64 = 0.02;
const HE_BROWN_JITTER: f64 = 0.08;
const IHC_HEMATOXYLIN_BG: f64 = 0.03;
const IHC_COUNTERSTAIN: f64 = 0.5;
const IHC_NOISE: f64 = 0.01;

/// HER2 score 0, 1+, 2+ or 3+.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Her2Score(u8);

impl Her2Score {
    pub const ALL: [Her2Score; 4] = [Her2Score(0), Her2Score(1), Her2Score(2), Her2Score(3)];

    pub fn new(value: usize) -> Result<Self> {
        if value > 3 {
            return Err(LgdError::InvalidLabel(value));
        }
        Ok(Self(value as u8))
    }

    pub fn value(self) -> usize {
        usize::from(self.0)
    }
}

impl TryFrom<usize> for Her2Score {
    type Error = LgdError;

    fn try_from(value: usize) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Her2Score> for usize {
    fn from(s: Her2Score) -> usize {
        s.value()
    }
}

impl fmt::Display for Her2Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => f.write_str("0"),
            v => write!(f, "{v}+"),
        }
    }
}

/// One registered pair with its analytic ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub he: RgbPatch,
    pub ihc: RgbPatch,
    pub label: Her2Score,
    pub nuclei_centers: Vec<(f64, f64)>,
    /// Full-resolution membrane rings as drawn.
    pub ring_mask: MembraneMask,
    pub seed: u64,
}

/// Half-open nuclei count range of a class.
pub fn nuclei_range(class: Her2Score) -> (usize, usize) {
    let (lo, hi) = NUCLEI_RANGE[class.value()];
    (lo as usize, hi as usize)
}

struct Nucleus {
    x: f64,
    y: f64,
    radius: f64,
    stain: f64,
    arc_start: f64,
}

fn place_nuclei(rng: &mut SplitMix64, count: usize, size: f64) -> Vec<Nucleus> {
    let mut out: Vec<Nucleus> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut candidate = (0.0, 0.0);
        for _ in 0..PLACEMENT_TRIES {
            candidate = (
                rng.uniform(EDGE_MARGIN, size - EDGE_MARGIN),
                rng.uniform(EDGE_MARGIN, size - EDGE_MARGIN),
            );
            let clear = out
                .iter()
                .all(|n| (n.x - candidate.0).hypot(n.y - candidate.1) >= MIN_SEPARATION);
            if clear {
                break;
            }
        }
        out.push(Nucleus {
            x: candidate.0,
            y: candidate.1,
            radius: rng.uniform(NUCLEUS_RADIUS.0, NUCLEUS_RADIUS.1),
            stain: rng.uniform(NUCLEUS_STAIN.0, NUCLEUS_STAIN.1),
            arc_start: rng.uniform(0.0, TAU),
        });
    }
    out
}

/// Anti-aliased disk coverage at distance `d` from a centre.
fn disk(d: f64, radius: f64) -> f64 {
    (radius + 0.5 - d).clamp(0.0, 1.0)
}

fn in_ring(n: &Nucleus, px: f64, py: f64, completeness: f64) -> bool {
    let (dx, dy) = (px - n.x, py - n.y);
    let d = dx.hypot(dy);
    if d < n.radius + RING_INNER || d >= n.radius + RING_OUTER {
        return false;
    }
    let angle = (dy.atan2(dx) - n.arc_start).rem_euclid(TAU);
    angle < completeness * TAU
}

/// Smooth texture field in `[0, 1]`.
struct Texture {
    waves: [(f64, f64, f64); 3],
}

impl Texture {
    fn new(rng: &mut SplitMix64) -> Self {
        let mut wave = || {
            let angle = rng.uniform(0.0, TAU);
            let freq = rng.uniform(0.3, 0.9);
            (freq * angle.cos(), freq * angle.sin(), rng.uniform(0.0, TAU))
        };
        Self {
            waves: [wave(), wave(), wave()],
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self
            .waves
            .iter()
            .map(|&(fx, fy, phase)| (fx * x + fy * y + phase).sin())
            .sum();
        0.5 + s / 6.0
    }
}

/// Renders one registered pair. All randomness comes from `seed`.
pub fn generate_pair(class: Her2Score, seed: u64, size: usize) -> Result<SamplePair> {
    if size < 16 {
        return Err(LgdError::InvalidArgument(format!(
            "patch size must be at least 16, got {size}"
        )));
    }
    let c = class.value();
    let mut rng = SplitMix64::new(seed);
    let (lo, hi) = NUCLEI_RANGE[c];
    let count = rng.range(lo, hi) as usize;
    let nuclei = place_nuclei(&mut rng, count, size as f64);
    let texture = Texture::new(&mut rng);
    let eosin = rng.uniform(HE_EOSIN.0, HE_EOSIN.1);
    let brown_offset = rng.uniform(0.0, HE_BROWN_JITTER);
    let completeness = RING_COMPLETENESS[c];
    let intensity = RING_INTENSITY[c];
    let hed = StainMatrix::hed();

    let mut he = RgbPatch::filled(size, size, [255; 3])?;
    let mut ihc = RgbPatch::filled(size, size, [255; 3])?;
    let mut ring = MembraneMask::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut nuclear = 0.0f64;
            let mut on_ring = false;
            for n in &nuclei {
                let d = (px - n.x).hypot(py - n.y);
                nuclear = nuclear.max(n.stain * disk(d, n.radius));
                on_ring |= completeness > 0.0 && in_ring(n, px, py, completeness);
            }

            let cue = if on_ring { 0.5 + 0.5 * texture.at(px, py) } else { 0.0 };
            let brown = (TEXTURE_AMPLITUDE * c as f64 * cue + brown_offset + HE_NOISE * rng.normal())
                .max(0.0);
            let h = (HE_HEMATOXYLIN_BG + nuclear + HE_NOISE * rng.normal()).max(0.0);
            let e = ((1.0 - 0.7 * nuclear) * eosin + HE_NOISE * rng.normal()).max(0.0);
            he.set_pixel(x, y, od_to_rgb(hed.mix([h, e, brown])));

            let h = (IHC_HEMATOXYLIN_BG + IHC_COUNTERSTAIN * nuclear + IHC_NOISE * rng.normal())
                .max(0.0);
            let dab = if on_ring { intensity } else { 0.0 };
            ihc.set_pixel(x, y, od_to_rgb(hed.mix([h, 0.0, dab])));
            if on_ring {
                ring.values[y * size + x] = 1.0;
            }
        }
    }
    Ok(SamplePair {
        he,
        ihc,
        label: class,
        nuclei_centers: nuclei.iter().map(|n| (n.x, n.y)).collect(),
        ring_mask: ring,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One manifest row; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub he: String,
    pub ihc: String,
    pub density: String,
    pub mask: String,
    pub label: Her2Score,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_NAME)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn class_counts(&self, split: Split) -> [usize; 4] {
        let mut counts = [0; 4];
        for e in self.split(split) {
            counts[e.label.value()] += 1;
        }
        counts
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.path();
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|err| csv_error(&path, err))?;
        }
        w.flush().map_err(|e| LgdError::io(&path, e))?;
        Ok(path)
    }

    /// Reads a manifest CSV (or the `manifest.csv` inside a directory).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut path = path.as_ref().to_path_buf();
        if path.is_dir() {
            path = path.join(MANIFEST_NAME);
        }
        let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| csv_error(&path, e))?
            .iter()
            .map(str::to_owned)
            .collect();
        if header != ["he", "ihc", "density", "mask", "label", "split"] {
            return Err(LgdError::format(&path, format!("unexpected header {header:?}")));
        }
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| csv_error(&path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }
}

fn csv_error(path: &Path, source: csv::Error) -> LgdError {
    match source.kind() {
        csv::ErrorKind::Io(_) => match source.into_kind() {
            csv::ErrorKind::Io(io) => LgdError::io(path, io),
            _ => unreachable!(),
        },
        _ => LgdError::Csv {
            path: path.to_path_buf(),
            source,
        },
    }
}

/// Per-sample seed of the `index`-th pair of a split.
pub fn sample_seed(base: u64, split: Split, index: usize) -> u64 {
    let offset = match split {
        Split::Train => 0,
        Split::Test => TEST_SEED_OFFSET,
    };
    base.wrapping_add(offset).wrapping_add(index as u64)
}

/// Which image the nuclei density target is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NucleiSource {
    /// Hematoxylin of the H&E patch.
    #[default]
    HeHematoxylin,
    /// Hematoxylin counterstain of the IHC patch.
    IhcCounterstain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetParams {
    pub sigma: f64,
    pub grid: usize,
    pub nuclei_source: NucleiSource,
}

impl Default for TargetParams {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            grid: DEFAULT_GRID,
            nuclei_source: NucleiSource::HeHematoxylin,
        }
    }
}

fn write_targets(
    he: &RgbPatch,
    ihc: &RgbPatch,
    density_path: &Path,
    mask_path: &Path,
    params: &TargetParams,
) -> Result<()> {
    let (sigma, grid) = (params.sigma, params.grid);
    let density = match params.nuclei_source {
        NucleiSource::HeHematoxylin => nuclei_density_with(he, &StainMatrix::he(), sigma, grid)?,
        NucleiSource::IhcCounterstain => nuclei_density_with(ihc, &StainMatrix::hed(), sigma, grid)?,
    };
    let mask = membrane_mask(ihc, grid)?;
    density.to_tensor().save(density_path)?;
    mask.to_tensor().save(mask_path)
}

/// Renders `n_train + n_test` pairs with round-robin labels, writes images
/// and default targets under `out_dir`, and saves the manifest.
pub fn build_dataset(
    n_train: usize,
    n_test: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    build_dataset_sized(n_train, n_test, seed, DEFAULT_SIZE, out_dir)
}

/// [`build_dataset`] with an explicit patch size.
pub fn build_dataset_sized(
    n_train: usize,
    n_test: usize,
    seed: u64,
    size: usize,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if n_train < 4 || n_test < 4 {
        return Err(LgdError::InvalidArgument(format!(
            "each split needs at least 4 samples, got {n_train} train / {n_test} test"
        )));
    }
    let root = out_dir.as_ref().to_path_buf();
    let mut entries = Vec::with_capacity(n_train + n_test);
    for (split, n) in [(Split::Train, n_train), (Split::Test, n_test)] {
        let dir = root.join(split.to_string());
        fs::create_dir_all(&dir).map_err(|e| LgdError::io(&dir, e))?;
        for i in 0..n {
            let label = Her2Score::ALL[i % 4];
            let pair = generate_pair(label, sample_seed(seed, split, i), size)?;
            let stem = format!("{split}/{i:05}");
            let entry = ManifestEntry {
                he: format!("{stem}_he.ppm"),
                ihc: format!("{stem}_ihc.ppm"),
                density: format!("{stem}_density.lgdt"),
                mask: format!("{stem}_mask.lgdt"),
                label,
                split,
            };
            pair.he.save_ppm(root.join(&entry.he))?;
            pair.ihc.save_ppm(root.join(&entry.ihc))?;
            write_targets(
                &pair.he,
                &pair.ihc,
                &root.join(&entry.density),
                &root.join(&entry.mask),
                &TargetParams::default(),
            )?;
            entries.push(entry);
        }
    }
    let manifest = DatasetManifest { root, entries };
    manifest.save()?;
    Ok(manifest)
}

/// Recomputes density and mask targets for every manifest entry.
pub fn precompute_targets(manifest: &DatasetManifest, params: &TargetParams) -> Result<usize> {
    for e in &manifest.entries {
        let he = RgbPatch::load_ppm(manifest.resolve(&e.he))?;
        let ihc = RgbPatch::load_ppm(manifest.resolve(&e.ihc))?;
        write_targets(
            &he,
            &ihc,
            &manifest.resolve(&e.density),
            &manifest.resolve(&e.mask),
            params,
        )?;
    }
    Ok(manifest.entries.len())
}

/// Network input for an RGB patch: `[3, H, W]` planes scaled to `[-1, 1]`.
pub fn patch_to_planes(patch: &RgbPatch) -> Vec<f32> {
    let (w, h) = (patch.width(), patch.height());
    let mut out = vec![0.0f32; 3 * w * h];
    for (i, px) in patch.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * w * h + i] = f32::from(px[c]) / 127.5 - 1.0;
        }
    }
    out
}

/// One split held in memory as stacked per-sample buffers.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub size: usize,
    pub grid: usize,
    pub labels: Vec<usize>,
    he: Vec<f32>,
    ihc: Vec<f32>,
    density: Vec<f32>,
    mask: Vec<f32>,
}

impl SplitData {
    pub fn load(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let mut data = SplitData {
            size: 0,
            grid: 0,
            labels: Vec::new(),
            he: Vec::new(),
            ihc: Vec::new(),
            density: Vec::new(),
            mask: Vec::new(),
        };
        for e in manifest.split(split) {
            let he_path = manifest.resolve(&e.he);
            let he = RgbPatch::load_ppm(&he_path)?;
            let ihc = RgbPatch::load_ppm(manifest.resolve(&e.ihc))?;
            if he.width() != he.height() || ihc.width() != he.width() || ihc.height() != he.height() {
                return Err(LgdError::format(&he_path, "pair is not square and registered"));
            }
            let density = Tensor::load(manifest.resolve(&e.density))?;
            let mask = Tensor::load(manifest.resolve(&e.mask))?;
            let grid = density.shape().first().copied().unwrap_or(0);
            if density.shape() != [grid, grid] || mask.shape() != [grid, grid] {
                return Err(LgdError::format(
                    manifest.resolve(&e.density),
                    "targets must be square and match each other",
                ));
            }
            if data.labels.is_empty() {
                data.size = he.width();
                data.grid = grid;
            } else if data.size != he.width() || data.grid != grid {
                return Err(LgdError::format(&he_path, "sample dimensions differ within split"));
            }
            data.he.extend(patch_to_planes(&he));
            data.ihc.extend(patch_to_planes(&ihc));
            data.density.extend_from_slice(density.data());
            data.mask.extend_from_slice(mask.data());
            data.labels.push(e.label.value());
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn gather(buf: &[f32], per: usize, idx: &[usize], shape: &[usize]) -> Tensor {
        let mut out = Vec::with_capacity(per * idx.len());
        for &i in idx {
            out.extend_from_slice(&buf[i * per..(i + 1) * per]);
        }
        Tensor::new(shape, out).expect("consistent sizes")
    }

    /// `[N, 3, S, S]` H&E inputs for the given sample indices.
    pub fn he(&self, idx: &[usize]) -> Tensor {
        let s = self.size;
        Self::gather(&self.he, 3 * s * s, idx, &[idx.len(), 3, s, s])
    }

    pub fn ihc(&self, idx: &[usize]) -> Tensor {
        let s = self.size;
        Self::gather(&self.ihc, 3 * s * s, idx, &[idx.len(), 3, s, s])
    }

    /// `[N, 1, g, g]` density targets.
    pub fn density(&self, idx: &[usize]) -> Tensor {
        let g = self.grid;
        Self::gather(&self.density, g * g, idx, &[idx.len(), 1, g, g])
    }

    pub fn mask(&self, idx: &[usize]) -> Tensor {
        let g = self.grid;
        Self::gather(&self.mask, g * g, idx, &[idx.len(), 1, g, g])
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Per-class counts keyed by split, for reporting.
pub fn summarize(manifest: &DatasetManifest) -> BTreeMap<Split, [usize; 4]> {
    [Split::Train, Split::Test]
        .into_iter()
        .map(|s| (s, manifest.class_counts(s)))
        .collect()
}

//! Stain analysis: optical density, colour deconvolution, hematoxylin density
//! maps and DAB membrane masks.
//!
//! Everything here is a pure function of its inputs.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{LgdError, Result};
use crate::tensor::Tensor;

/// Hematoxylin stain vector (optical-density space, before normalisation).
pub const HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
/// Eosin stain vector.
pub const EOSIN: [f64; 3] = [0.072, 0.990, 0.105];
/// Diaminobenzidine stain vector.
pub const DAB: [f64; 3] = [0.268, 0.570, 0.776];

/// Upper edge of the DAB-concentration histogram used for Otsu
/// thresholding; values above it fall into the last bin.
pub const DAB_HISTOGRAM_MAX: f64 = 2.0;

/// Default Gaussian width (pixels) for nuclei density maps.
pub const DEFAULT_SIGMA: f64 = 2.0;

/// Default side of the supervision grid.
pub const DEFAULT_GRID: usize = 8;

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbPatch {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbPatch {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(LgdError::InvalidArgument("empty patch".into()));
        }
        if pixels.len() != 3 * width * height {
            return Err(LgdError::InvalidShape(format!(
                "{width}x{height} patch needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let pixels = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend_from_slice(&self.pixels);
        out.write_all(&buf)
    }

    pub fn read_ppm<R: Read>(input: R, source: &str) -> Result<Self> {
        let bad = |reason: &str| LgdError::format(source, reason);
        let mut reader = BufReader::new(input);
        let mut tokens = Vec::with_capacity(4);
        let mut line = String::new();
        while tokens.len() < 4 {
            line.clear();
            let n = reader
                .read_line(&mut line)
                .map_err(|_| bad("unreadable header"))?;
            if n == 0 {
                return Err(bad("truncated header"));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_string));
        }
        if tokens.len() != 4 || tokens[0] != "P6" {
            return Err(bad("not a binary P6 PPM"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        if width == 0 || height == 0 || width * height > 1 << 26 {
            return Err(bad("unsupported dimensions"));
        }
        let mut pixels = vec![0u8; 3 * width * height];
        reader
            .read_exact(&mut pixels)
            .map_err(|_| bad("truncated pixel data"))?;
        Self::new(width, height, pixels)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_ppm(&mut buf).expect("Vec write");
        std::fs::write(path, buf).map_err(|e| LgdError::io(path, e))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| LgdError::io(path, e))?;
        Self::read_ppm(bytes.as_slice(), &path.display().to_string())
    }
}

/// Three unit stain vectors (rows) with their precomputed inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
    inverse: [[f64; 3]; 3],
}

impl StainMatrix {
    /// Normalises each row to unit length and inverts the matrix.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        let mut unit = [[0.0; 3]; 3];
        for (dst, src) in unit.iter_mut().zip(&rows) {
            let n = norm(src);
            if n < 1e-12 {
                return Err(LgdError::InvalidStainMatrix("zero stain vector".into()));
            }
            *dst = src.map(|v| v / n);
        }
        let det = det3(&unit);
        if det.abs() <= 1e-6 {
            return Err(LgdError::InvalidStainMatrix(format!(
                "matrix is singular (det = {det:e})"
            )));
        }
        Ok(Self {
            rows: unit,
            inverse: inv3(&unit, det),
        })
    }

    /// Hematoxylin, eosin and their normalised cross product.
    pub fn he() -> Self {
        let h = normalized(HEMATOXYLIN);
        let e = normalized(EOSIN);
        Self::new([h, e, cross(&h, &e)]).expect("canonical H&E matrix is invertible")
    }

    /// Hematoxylin, eosin and DAB.
    pub fn hed() -> Self {
        Self::new([HEMATOXYLIN, EOSIN, DAB]).expect("canonical HED matrix is invertible")
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    pub fn inverse(&self) -> &[[f64; 3]; 3] {
        &self.inverse
    }

    /// Optical density of a concentration triple: `c · rows`.
    pub fn mix(&self, conc: [f64; 3]) -> [f64; 3] {
        row_times(&conc, &self.rows)
    }
}

fn norm(v: &[f64; 3]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = norm(&v);
    v.map(|x| x / n)
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    normalized([
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &[[f64; 3]; 3], det: f64) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // adjugate: cofactor of (j, i)
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    out
}

fn row_times(v: &[f64; 3], m: &[[f64; 3]; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (j, o) in out.iter_mut().enumerate() {
        *o = (0..3).map(|k| v[k] * m[k][j]).sum();
    }
    out
}

/// Optical density `-log10((I + 1) / 256)` per channel, row-major.
pub fn rgb_to_od(patch: &RgbPatch) -> Vec<[f64; 3]> {
    patch
        .pixels()
        .chunks_exact(3)
        .map(|px| [od(px[0]), od(px[1]), od(px[2])])
        .collect()
}

fn od(intensity: u8) -> f64 {
    -((f64::from(intensity) + 1.0) / 256.0).log10()
}

/// Inverse of [`rgb_to_od`] for one pixel, rounded to 8 bits.
pub fn od_to_rgb(od: [f64; 3]) -> [u8; 3] {
    od.map(|v| (256.0 * 10f64.powf(-v) - 1.0).round().clamp(0.0, 255.0) as u8)
}

/// Per-pixel stain concentrations `od · inverse`, clamped at zero.
pub fn deconvolve(od_image: &[[f64; 3]], matrix: &StainMatrix) -> Vec<[f64; 3]> {
    od_image
        .iter()
        .map(|px| row_times(px, &matrix.inverse).map(|c| c.max(0.0)))
        .collect()
}

/// Nonnegative per-cell density values on a `width x height` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

/// Membrane mask; ground truth is binary, predictions lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MembraneMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DensityMap {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.values.clone()).expect("consistent dims")
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum()
    }
}

impl MembraneMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.values.clone()).expect("consistent dims")
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }

    /// Intersection over union of the binarised masks (1 when both empty).
    pub fn iou(&self, other: &MembraneMask) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.values.iter().zip(&other.values) {
            let (a, b) = (a > 0.5, b > 0.5);
            inter += usize::from(a && b);
            union += usize::from(a || b);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Normalised 1-D Gaussian taps with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Symmetric reflection (`d c b a | a b c d | d c b a`) of an index.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur of a row-major `width x height` map with
/// reflect padding.
pub fn gaussian_filter(values: &[f64], width: usize, height: usize, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(LgdError::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    if values.len() != width * height {
        return Err(LgdError::InvalidShape(format!(
            "{} values for a {width}x{height} map",
            values.len()
        )));
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| w * values[y * width + reflect(x as isize + k as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| w * tmp[reflect(y as isize + k as isize - r, height) * width + x])
                .sum();
        }
    }
    Ok(out)
}

fn check_grid(width: usize, height: usize, grid: usize) -> Result<usize> {
    if grid == 0 || !width.is_multiple_of(grid) || !height.is_multiple_of(grid) || width != height {
        return Err(LgdError::InvalidArgument(format!(
            "grid {grid} does not evenly tile a {width}x{height} patch"
        )));
    }
    Ok(width / grid)
}

/// Pools non-overlapping `block x block` cells of a square map.
fn pool_blocks(values: &[f64], side: usize, block: usize, max: bool) -> Vec<f64> {
    let g = side / block;
    let mut out = vec![if max { f64::NEG_INFINITY } else { 0.0 }; g * g];
    for y in 0..side {
        for x in 0..side {
            let o = (y / block) * g + x / block;
            let v = values[y * side + x];
            if max {
                out[o] = out[o].max(v);
            } else {
                out[o] += v;
            }
        }
    }
    if !max {
        let area = (block * block) as f64;
        out.iter_mut().for_each(|v| *v /= area);
    }
    out
}

/// Hematoxylin channel of `patch` under `matrix`.
pub fn hematoxylin_channel(patch: &RgbPatch, matrix: &StainMatrix) -> Vec<f64> {
    deconvolve(&rgb_to_od(patch), matrix)
        .into_iter()
        .map(|c| c[0])
        .collect()
}

/// Gaussian-filtered hematoxylin (H&E matrix), mean-pooled to `grid x grid`.
pub fn nuclei_density(patch: &RgbPatch, sigma: f64, grid: usize) -> Result<DensityMap> {
    nuclei_density_with(patch, &StainMatrix::he(), sigma, grid)
}

/// [`nuclei_density`] with an explicit stain matrix whose first row is
/// hematoxylin (use [`StainMatrix::hed`] for IHC counterstain).
pub fn nuclei_density_with(
    patch: &RgbPatch,
    matrix: &StainMatrix,
    sigma: f64,
    grid: usize,
) -> Result<DensityMap> {
    let block = check_grid(patch.width(), patch.height(), grid)?;
    let h = hematoxylin_channel(patch, matrix);
    let filtered = gaussian_filter(&h, patch.width(), patch.height(), sigma)?;
    let pooled = pool_blocks(&filtered, patch.width(), block, false);
    Ok(DensityMap {
        width: grid,
        height: grid,
        values: pooled.into_iter().map(|v| v.max(0.0) as f32).collect(),
    })
}

/// DAB concentration per pixel (HED deconvolution).
pub fn dab_channel(patch: &RgbPatch) -> Vec<f64> {
    deconvolve(&rgb_to_od(patch), &StainMatrix::hed())
        .into_iter()
        .map(|c| c[2])
        .collect()
}

/// Histogram bin of a DAB concentration over `[0, DAB_HISTOGRAM_MAX]`.
pub fn dab_bin(value: f64) -> usize {
    ((value / DAB_HISTOGRAM_MAX) * 256.0).floor().clamp(0.0, 255.0) as usize
}

pub fn histogram256(values: &[f64]) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[dab_bin(v)] += 1;
    }
    hist
}

/// Otsu threshold of a 256-bin histogram.
///
/// The returned index `t` is the first foreground bin: bins `< t` form the
/// background class. The scan maximises the between-class variance and keeps
/// the lowest `t` on ties. When all mass sits in one bin, that bin is
/// returned (callers treat this as "no foreground").
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<usize> {
    let total: u64 = hist.iter().sum();
    if total == 0 {
        return Err(LgdError::InvalidArgument("empty histogram".into()));
    }
    let occupied: Vec<usize> = (0..256).filter(|&b| hist[b] > 0).collect();
    if occupied.len() == 1 {
        return Ok(occupied[0]);
    }
    let weighted: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, u64, u64, u64)> = None;
    for t in 1..256 {
        n0 += hist[t - 1];
        s0 += (t as u64 - 1) * hist[t - 1];
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        // Between-class variance is (total·s0 - n0·S)² / (total² · n0 · n1);
        // compare the t-dependent part exactly.
        let diff = (total as i128 * s0 as i128 - n0 as i128 * weighted as i128).unsigned_abs();
        let better = match best {
            None => true,
            Some((_, bd, bn0, bn1)) => exceeds(diff, n0 * n1, bd as u128, bn0 * bn1),
        };
        if better {
            best = Some((t, diff as u64, n0, n1));
        }
    }
    Ok(best.map(|b| b.0).unwrap_or(occupied[0]))
}

/// `d1² / q1 > d2² / q2`, exactly when it fits in 128 bits.
fn exceeds(d1: u128, q1: u64, d2: u128, q2: u64) -> bool {
    let exact = (|| {
        let l = d1.checked_mul(d1)?.checked_mul(u128::from(q2))?;
        let r = d2.checked_mul(d2)?.checked_mul(u128::from(q1))?;
        Some(l > r)
    })();
    exact.unwrap_or_else(|| {
        let (d1, d2) = (d1 as f64, d2 as f64);
        d1 * d1 / q1 as f64 > d2 * d2 / q2 as f64
    })
}

/// Full-resolution binary DAB mask via global Otsu thresholding.
pub fn dab_mask_full(ihc: &RgbPatch) -> Vec<f64> {
    let dab = dab_channel(ihc);
    let hist = histogram256(&dab);
    let degenerate = hist.iter().filter(|&&c| c > 0).count() <= 1;
    if degenerate {
        return vec![0.0; dab.len()];
    }
    let t = otsu_threshold(&hist).expect("non-empty histogram");
    dab.iter()
        .map(|&v| if dab_bin(v) >= t { 1.0 } else { 0.0 })
        .collect()
}

/// Otsu-thresholded DAB mask, max-pooled to `grid x grid`.
pub fn membrane_mask(ihc: &RgbPatch, grid: usize) -> Result<MembraneMask> {
    let block = check_grid(ihc.width(), ihc.height(), grid)?;
    let full = dab_mask_full(ihc);
    let pooled = pool_blocks(&full, ihc.width(), block, true);
    Ok(MembraneMask {
        width: grid,
        height: grid,
        values: pooled.into_iter().map(|v| v as f32).collect(),
    })
}

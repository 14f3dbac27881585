//! Per-nucleus morphology and texture descriptors.
//!
//! Morphology comes from a binary nucleus mask. Texture comes from a
//! gray-level co-occurrence matrix (GLCM) over the masked pixels:
//! intensities are quantized uniformly to [`GLCM_LEVELS`] levels, pairs are
//! counted symmetrically at offsets (1,0) and (0,1), and the two normalized
//! matrices are averaged. Pairs whose neighbor falls outside the mask are
//! skipped.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::geometry::{self, Point};

pub const GLCM_LEVELS: usize = 32;
pub const GLCM_OFFSETS: [(i64, i64); 2] = [(1, 0), (0, 1)];

pub const MORPHOLOGY_NAMES: [&str; 7] = [
    "area",
    "perimeter",
    "eccentricity",
    "solidity",
    "major_axis_length",
    "minor_axis_length",
    "extent",
];

pub const TEXTURE_NAMES: [&str; 7] = [
    "roughness",
    "contrast",
    "dissimilarity",
    "homogeneity",
    "entropy",
    "angular_second_moment",
    "dispersion",
];

pub const NUM_FEATURES: usize = 14;

/// The 14 intrinsic node features, morphology first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeFeatureVector {
    pub morphology: [f64; 7],
    pub texture: [f64; 7],
}

impl NodeFeatureVector {
    pub fn names() -> impl Iterator<Item = &'static str> {
        MORPHOLOGY_NAMES.iter().chain(TEXTURE_NAMES.iter()).copied()
    }

    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        let mut out = [0.0; NUM_FEATURES];
        out[..7].copy_from_slice(&self.morphology);
        out[7..].copy_from_slice(&self.texture);
        out
    }

    pub fn from_array(a: &[f64; NUM_FEATURES]) -> Self {
        let mut morphology = [0.0; 7];
        let mut texture = [0.0; 7];
        morphology.copy_from_slice(&a[..7]);
        texture.copy_from_slice(&a[7..]);
        NodeFeatureVector { morphology, texture }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.data[y as usize * self.width + x as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayPatch {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayPatch {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// Number of 8-connected foreground components.
pub fn connected_components(mask: &BinaryMask) -> usize {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut components = 0;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if mask.get(nx, ny) {
                        let j = ny as usize * w + nx as usize;
                        if !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    components
}

/// Length of the iso-0.5 marching-squares contour through pixel centers.
fn contour_length(mask: &BinaryMask) -> f64 {
    let diag = 0.5f64.sqrt();
    let mut len = 0.0;
    for y in -1..mask.height as i64 {
        for x in -1..mask.width as i64 {
            let tl = mask.get(x, y);
            let tr = mask.get(x + 1, y);
            let bl = mask.get(x, y + 1);
            let br = mask.get(x + 1, y + 1);
            let n = [tl, tr, bl, br].iter().filter(|&&b| b).count();
            len += match n {
                1 | 3 => diag,
                2 if tl == br => 2.0 * diag,
                2 => 1.0,
                _ => 0.0,
            };
        }
    }
    len
}

/// Area of the convex hull of all pixel squares.
fn convex_hull_area(mask: &BinaryMask) -> f64 {
    let mut pts: Vec<Point> = Vec::new();
    for y in 0..mask.height {
        let row = &mask.data[y * mask.width..(y + 1) * mask.width];
        let (Some(lo), Some(hi)) = (row.iter().position(|&b| b), row.iter().rposition(|&b| b)) else {
            continue;
        };
        let (y0, y1) = (y as f64, y as f64 + 1.0);
        pts.extend([[lo as f64, y0], [lo as f64, y1], [hi as f64 + 1.0, y0], [hi as f64 + 1.0, y1]]);
    }
    geometry::signed_area(&convex_hull(pts)).abs()
}

/// Andrew's monotone chain; counter-clockwise in a y-up frame.
pub fn convex_hull(mut pts: Vec<Point>) -> Vec<Point> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: Point, a: Point, b: Point| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let chain = |iter: &mut dyn Iterator<Item = &Point>| {
        let mut out: Vec<Point> = Vec::new();
        for &p in iter {
            while out.len() >= 2 && cross(out[out.len() - 2], out[out.len() - 1], p) <= 0.0 {
                out.pop();
            }
            out.push(p);
        }
        out.pop();
        out
    };
    let mut hull = chain(&mut pts.iter());
    hull.extend(chain(&mut pts.iter().rev()));
    hull
}

/// area, perimeter, eccentricity, solidity, major, minor, extent.
pub fn morphology_features(mask: &BinaryMask) -> Result<[f64; 7]> {
    let area = mask.count();
    if area == 0 {
        return Err(Error::EmptyMask);
    }
    let comps = connected_components(mask);
    if comps > 1 {
        return Err(Error::MultipleComponents(comps));
    }
    let n = area as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (x, y) in mask.foreground() {
        sx += x as f64;
        sy += y as f64;
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let (cx, cy) = (sx / n, sy / n);
    let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
    for (x, y) in mask.foreground() {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        mxx += dx * dx;
        myy += dy * dy;
        mxy += dx * dy;
    }
    let (mxx, myy, mxy) = (mxx / n, myy / n, mxy / n);
    let half_trace = (mxx + myy) / 2.0;
    let disc = (((mxx - myy) / 2.0).powi(2) + mxy * mxy).sqrt();
    let l1 = (half_trace + disc).max(0.0);
    let l2 = (half_trace - disc).max(0.0);
    let major = 4.0 * l1.sqrt();
    let minor = 4.0 * l2.sqrt();
    let eccentricity = if l1 > 0.0 { (1.0 - l2 / l1).max(0.0).sqrt() } else { 0.0 };
    let perimeter = contour_length(mask);
    let solidity = (n / convex_hull_area(mask)).min(1.0);
    let extent = n / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
    Ok([n, perimeter, eccentricity, solidity, major, minor, extent])
}

#[inline]
pub fn quantize(v: u8) -> usize {
    v as usize * GLCM_LEVELS / 256
}

/// Normalized symmetric GLCM averaged over [`GLCM_OFFSETS`].
pub fn glcm(gray: &GrayPatch, mask: &BinaryMask) -> Result<Vec<f64>> {
    check_shapes(gray, mask)?;
    let l = GLCM_LEVELS;
    let mut acc = vec![0.0; l * l];
    let mut used = 0;
    for &(dx, dy) in &GLCM_OFFSETS {
        let mut counts = vec![0u64; l * l];
        let mut total = 0u64;
        for (x, y) in mask.foreground() {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if !mask.get(nx, ny) {
                continue;
            }
            let a = quantize(gray.get(x, y));
            let b = quantize(gray.get(nx as usize, ny as usize));
            counts[a * l + b] += 1;
            counts[b * l + a] += 1;
            total += 2;
        }
        if total == 0 {
            continue;
        }
        used += 1;
        for (slot, c) in acc.iter_mut().zip(&counts) {
            *slot += *c as f64 / total as f64;
        }
    }
    if used == 0 {
        // no neighbor pairs at all: a single self co-occurrence at the mean level
        let (sum, n) = mask
            .foreground()
            .fold((0.0, 0.0), |(s, n), (x, y)| (s + gray.get(x, y) as f64, n + 1.0));
        let q = quantize((sum / n).round() as u8);
        acc[q * l + q] = 1.0;
        return Ok(acc);
    }
    acc.iter_mut().for_each(|v| *v /= used as f64);
    Ok(acc)
}

/// contrast, dissimilarity, homogeneity, entropy (bits), ASM.
pub fn glcm_properties(p: &[f64]) -> [f64; 5] {
    let l = GLCM_LEVELS;
    let (mut contrast, mut dissim, mut homog, mut entropy, mut asm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let v = p[i * l + j];
            if v == 0.0 {
                continue;
            }
            let d = i as f64 - j as f64;
            contrast += v * d * d;
            dissim += v * d.abs();
            homog += v / (1.0 + d * d);
            entropy -= v * v.log2();
            asm += v * v;
        }
    }
    [contrast, dissim, homog, entropy.max(0.0), asm]
}

fn check_shapes(gray: &GrayPatch, mask: &BinaryMask) -> Result<()> {
    if gray.width != mask.width || gray.height != mask.height || gray.data.len() != gray.width * gray.height {
        return Err(Error::ShapeMismatch(format!(
            "gray {}x{} vs mask {}x{}",
            gray.width, gray.height, mask.width, mask.height
        )));
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// roughness, contrast, dissimilarity, homogeneity, entropy, ASM, dispersion.
///
/// Roughness is the standard deviation of masked intensities; dispersion is
/// their coefficient of variation (0 when the mean is 0).
pub fn texture_features(gray: &GrayPatch, mask: &BinaryMask) -> Result<[f64; 7]> {
    check_shapes(gray, mask)?;
    let vals: Vec<f64> = mask.foreground().map(|(x, y)| gray.get(x, y) as f64).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let dispersion = if mean > 0.0 { std / mean } else { 0.0 };
    let [contrast, dissim, homog, entropy, asm] = glcm_properties(&glcm(gray, mask)?);
    Ok([std, contrast, dissim, homog, entropy, asm, dispersion])
}

pub fn node_features(gray: &GrayPatch, mask: &BinaryMask) -> Result<NodeFeatureVector> {
    Ok(NodeFeatureVector {
        morphology: morphology_features(mask)?,
        texture: texture_features(gray, mask)?,
    })
}

/// Rasterizes a contour (pixel centers inside or on the polygon). Returns the
/// mask and the integer pixel offset of its top-left corner.
pub fn rasterize_contour(contour: &[Point]) -> (BinaryMask, (i64, i64)) {
    let bb = geometry::bounding_box(contour);
    let (x0, y0) = (bb[0].floor() as i64, bb[1].floor() as i64);
    let (x1, y1) = (bb[2].ceil() as i64, bb[3].ceil() as i64);
    let (w, h) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
    let mask = BinaryMask::from_fn(w, h, |x, y| {
        geometry::contains(contour, [(x0 + x as i64) as f64, (y0 + y as i64) as f64])
    });
    (mask, (x0, y0))
}

/// Crops the image window under a rasterized contour; pixels outside the
/// image read as 0 and are dropped from the mask.
pub fn crop_for_contour(image: &GrayPatch, contour: &[Point]) -> (GrayPatch, BinaryMask) {
    let (mut mask, (ox, oy)) = rasterize_contour(contour);
    let mut data = vec![0u8; mask.width * mask.height];
    for y in 0..mask.height {
        for x in 0..mask.width {
            let (ix, iy) = (ox + x as i64, oy + y as i64);
            let i = y * mask.width + x;
            if ix >= 0 && iy >= 0 && (ix as usize) < image.width && (iy as usize) < image.height {
                data[i] = image.get(ix as usize, iy as usize);
            } else {
                mask.data[i] = false;
            }
        }
    }
    let patch = GrayPatch {
        width: mask.width,
        height: mask.height,
        data,
    };
    (patch, mask)
}

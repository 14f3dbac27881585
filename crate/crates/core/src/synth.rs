//! Synthetic labeled tissue. Epithelial clusters ("blobs") sit on a jittered
//! grid in a checkerboard of tumor and healthy slots, so that position alone
//! is not linearly informative. Immune and stromal cells are scattered and,
//! depending on the preset, infiltrate tumor or healthy blobs.
//!
//! Features are generated directly in feature space from a handful of
//! per-class latent shape and intensity parameters; contours are ellipses
//! with the sampled axes.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{rasterize_contour, GrayPatch, NUM_FEATURES};
use crate::geometry::{contains, ellipse_polygon, Point};
use crate::ingest::{CellClass, CellRecord, RegionAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Tumor and healthy epithelium have well-separated intrinsic features.
    Easy,
    /// Identical epithelial feature distributions; only the neighborhood
    /// composition differs.
    ContextOnly,
    /// Each blob carries its own random feature offset; the class signal is
    /// weak and there is no infiltration.
    SpatiallyClustered,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Easy, Preset::ContextOnly, Preset::SpatiallyClustered];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Easy => "easy",
            Preset::ContextOnly => "context_only",
            Preset::SpatiallyClustered => "spatially_clustered",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset \"{s}\"")))
    }
}

/// Requested number of cells per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tumor: usize,
    pub healthy: usize,
    pub lymphocyte: usize,
    pub stromal: usize,
    pub plasma: usize,
    pub granulocyte: usize,
    pub unclassified: usize,
}

impl Default for ClassCounts {
    fn default() -> Self {
        ClassCounts {
            tumor: 1200,
            healthy: 1200,
            lymphocyte: 900,
            stromal: 1100,
            plasma: 250,
            granulocyte: 150,
            unclassified: 200,
        }
    }
}

impl ClassCounts {
    pub fn total(&self) -> usize {
        self.tumor + self.healthy + self.lymphocyte + self.stromal + self.plasma + self.granulocyte + self.unclassified
    }

    /// Scales every count by `f`, rounding.
    pub fn scaled(&self, f: f64) -> Self {
        let s = |v: usize| (v as f64 * f).round() as usize;
        ClassCounts {
            tumor: s(self.tumor),
            healthy: s(self.healthy),
            lymphocyte: s(self.lymphocyte),
            stromal: s(self.stromal),
            plasma: s(self.plasma),
            granulocyte: s(self.granulocyte),
            unclassified: s(self.unclassified),
        }
    }
}

/// Mean and standard deviation of one latent parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

const fn ms(mean: f64, std: f64) -> MeanStd {
    MeanStd { mean, std }
}

/// Latent per-class distributions from which the 14 features are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    /// Semi-major axis, px.
    pub semi_major: MeanStd,
    /// Minor/major axis ratio.
    pub axis_ratio: MeanStd,
    pub solidity: MeanStd,
    /// Mean gray level.
    pub intensity: MeanStd,
    /// Gray-level standard deviation.
    pub intensity_std: MeanStd,
    /// Mean absolute gray-level step between neighbors, in GLCM levels.
    pub dissimilarity: MeanStd,
    /// GLCM entropy, bits.
    pub entropy: MeanStd,
}

impl ClassProfile {
    fn latents(&self) -> [MeanStd; 7] {
        [
            self.semi_major,
            self.axis_ratio,
            self.solidity,
            self.intensity,
            self.intensity_std,
            self.dissimilarity,
            self.entropy,
        ]
    }

    pub const HEALTHY: ClassProfile = ClassProfile {
        semi_major: ms(7.0, 0.8),
        axis_ratio: ms(0.7, 0.08),
        solidity: ms(0.95, 0.015),
        intensity: ms(140.0, 10.0),
        intensity_std: ms(18.0, 3.0),
        dissimilarity: ms(1.8, 0.3),
        entropy: ms(6.5, 0.3),
    };
    pub const TUMOR: ClassProfile = ClassProfile {
        semi_major: ms(10.0, 0.8),
        axis_ratio: ms(0.6, 0.08),
        solidity: ms(0.89, 0.015),
        intensity: ms(105.0, 10.0),
        intensity_std: ms(28.0, 3.0),
        dissimilarity: ms(2.9, 0.3),
        entropy: ms(7.4, 0.3),
    };
    pub const LYMPHOCYTE: ClassProfile = ClassProfile {
        semi_major: ms(4.5, 0.5),
        axis_ratio: ms(0.9, 0.05),
        solidity: ms(0.97, 0.01),
        intensity: ms(70.0, 8.0),
        intensity_std: ms(10.0, 2.0),
        dissimilarity: ms(1.0, 0.2),
        entropy: ms(5.4, 0.3),
    };
    pub const STROMAL: ClassProfile = ClassProfile {
        semi_major: ms(8.0, 1.0),
        axis_ratio: ms(0.35, 0.06),
        solidity: ms(0.93, 0.02),
        intensity: ms(120.0, 10.0),
        intensity_std: ms(14.0, 3.0),
        dissimilarity: ms(1.4, 0.3),
        entropy: ms(6.0, 0.3),
    };
    pub const PLASMA: ClassProfile = ClassProfile {
        semi_major: ms(5.5, 0.6),
        axis_ratio: ms(0.75, 0.06),
        solidity: ms(0.95, 0.015),
        intensity: ms(90.0, 8.0),
        intensity_std: ms(16.0, 3.0),
        dissimilarity: ms(1.5, 0.3),
        entropy: ms(6.0, 0.3),
    };
    pub const GRANULOCYTE: ClassProfile = ClassProfile {
        semi_major: ms(6.0, 0.7),
        axis_ratio: ms(0.7, 0.08),
        solidity: ms(0.84, 0.03),
        intensity: ms(100.0, 10.0),
        intensity_std: ms(20.0, 3.0),
        dissimilarity: ms(2.0, 0.3),
        entropy: ms(6.3, 0.3),
    };
    pub const UNCLASSIFIED: ClassProfile = ClassProfile {
        semi_major: ms(6.5, 1.5),
        axis_ratio: ms(0.7, 0.12),
        solidity: ms(0.9, 0.04),
        intensity: ms(125.0, 20.0),
        intensity_std: ms(18.0, 5.0),
        dissimilarity: ms(1.8, 0.5),
        entropy: ms(6.3, 0.6),
    };
}

/// Full generator configuration. [`SynthConfig::preset`] fills in the
/// preset-specific defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub preset: Preset,
    /// Square canvas side, px.
    pub canvas: f64,
    pub counts: ClassCounts,
    /// Blob slots per side; slots alternate tumor / healthy.
    pub grid: usize,
    /// Blob radius, px. Tumor polygons wobble around this radius.
    pub blob_radius: f64,
    /// Minimum distance between any two centroids, px.
    pub min_spacing: f64,
    /// Fraction of lymphocytes placed inside tumor blobs.
    pub lymphocytes_in_tumor: f64,
    /// Fraction of stromal cells placed inside healthy blobs.
    pub stroma_in_healthy: f64,
    /// Per-blob latent offset, in units of each latent's std.
    pub blob_offset_scale: f64,
    pub tumor_profile: ClassProfile,
    pub healthy_profile: ClassProfile,
    /// Also render a grayscale image of the canvas.
    pub raster: bool,
}

impl SynthConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let base = SynthConfig {
            seed,
            preset,
            canvas: 2400.0,
            counts: ClassCounts::default(),
            grid: 6,
            blob_radius: 150.0,
            min_spacing: 12.0,
            lymphocytes_in_tumor: 0.7,
            stroma_in_healthy: 0.45,
            blob_offset_scale: 0.0,
            tumor_profile: ClassProfile::TUMOR,
            healthy_profile: ClassProfile::HEALTHY,
            raster: false,
        };
        match preset {
            Preset::Easy => base,
            Preset::ContextOnly => SynthConfig {
                tumor_profile: ClassProfile::HEALTHY,
                ..base
            },
            Preset::SpatiallyClustered => {
                // Weak class signal: a small fraction of the tumor shift.
                let mut tumor = ClassProfile::HEALTHY;
                let h = ClassProfile::HEALTHY.latents();
                let t = ClassProfile::TUMOR.latents();
                let weak = |i: usize| ms(h[i].mean + 0.12 * (t[i].mean - h[i].mean), h[i].std);
                tumor.semi_major = weak(0);
                tumor.axis_ratio = weak(1);
                tumor.solidity = weak(2);
                tumor.intensity = weak(3);
                tumor.intensity_std = weak(4);
                tumor.dissimilarity = weak(5);
                tumor.entropy = weak(6);
                SynthConfig {
                    lymphocytes_in_tumor: 0.0,
                    stroma_in_healthy: 0.0,
                    blob_offset_scale: 2.5,
                    tumor_profile: tumor,
                    ..base
                }
            }
        }
    }

    /// Shrinks the canvas and counts together, keeping density.
    pub fn scaled(mut self, area_fraction: f64) -> Self {
        let grid = ((self.grid as f64) * area_fraction.sqrt()).round().max(2.0) as usize;
        let f = (grid * grid) as f64 / (self.grid * self.grid) as f64;
        self.canvas *= grid as f64 / self.grid as f64;
        self.grid = grid;
        self.counts = self.counts.scaled(f);
        self
    }

    fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !(finite_pos(self.canvas) && finite_pos(self.blob_radius) && finite_pos(self.min_spacing)) || self.grid == 0 {
            return Err(Error::InvalidConfig("canvas, grid, radius and spacing must be positive".into()));
        }
        for f in [self.lymphocytes_in_tumor, self.stroma_in_healthy] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidConfig(format!("fraction {f} outside [0, 1]")));
            }
        }
        let slot = self.canvas / self.grid as f64;
        if self.blob_radius * 1.15 + self.min_spacing > slot / 2.0 {
            return Err(Error::InfeasibleDensity {
                requested: self.counts.total(),
                detail: format!("blob radius {} does not fit a {slot:.0} px slot", self.blob_radius),
            });
        }
        // Hard-disk packing bound with a generous random-packing factor.
        let disk = PI * (self.min_spacing / 2.0).powi(2);
        let capacity = (0.5 * self.canvas * self.canvas / disk) as usize;
        if self.counts.total() > capacity {
            return Err(Error::InfeasibleDensity {
                requested: self.counts.total(),
                detail: format!("canvas holds about {capacity} cells at spacing {}", self.min_spacing),
            });
        }
        Ok(())
    }
}

/// Generated tissue. `records` carry pre-relabel classes: epithelium is
/// emitted as generic epithelial (code 4).
#[derive(Debug, Clone, PartialEq)]
pub struct Tissue {
    pub records: Vec<CellRecord>,
    pub regions: Vec<RegionAnnotation>,
    pub features: BTreeMap<u64, [f64; NUM_FEATURES]>,
    /// Ground truth for epithelial cells: 1 = tumor, 0 = healthy.
    pub labels: BTreeMap<u64, u8>,
    pub image: Option<GrayPatch>,
}

impl Tissue {
    /// True post-relabel class of a record.
    pub fn true_class(&self, r: &CellRecord) -> Option<CellClass> {
        match self.labels.get(&r.id) {
            Some(1) => Some(CellClass::EpithelialTumor),
            Some(_) => Some(CellClass::EpithelialHealthy),
            None => r.class,
        }
    }
}

/// Spatial hash enforcing the global minimum spacing.
struct Occupancy {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<Point>>,
    spacing2: f64,
}

impl Occupancy {
    fn new(spacing: f64) -> Self {
        Occupancy {
            cell: spacing,
            buckets: HashMap::new(),
            spacing2: spacing * spacing,
        }
    }

    fn key(&self, p: Point) -> (i64, i64) {
        ((p[0] / self.cell).floor() as i64, (p[1] / self.cell).floor() as i64)
    }

    fn free(&self, p: Point) -> bool {
        let (kx, ky) = self.key(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(b) = self.buckets.get(&(kx + dx, ky + dy)) {
                    if b.iter().any(|q| (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) < self.spacing2) {
                        return false;
                    }
                }
            }
        }
        true
    }

    fn insert(&mut self, p: Point) {
        let k = self.key(p);
        self.buckets.entry(k).or_default().push(p);
    }
}

const MAX_ATTEMPTS: usize = 20_000;
const MARGIN: f64 = 15.0;

struct Blob {
    center: Point,
    tumor: bool,
    polygon: Option<Vec<Point>>,
    offset: [f64; 7],
}

/// Dart throwing inside `region` with the global spacing constraint.
fn place(
    rng: &mut ChaCha8Rng,
    occ: &mut Occupancy,
    sample: impl Fn(&mut ChaCha8Rng) -> Point,
    accept: impl Fn(Point) -> bool,
    requested: usize,
) -> Result<Point> {
    for _ in 0..MAX_ATTEMPTS {
        let p = sample(rng);
        if accept(p) && occ.free(p) {
            occ.insert(p);
            return Ok(p);
        }
    }
    Err(Error::InfeasibleDensity {
        requested,
        detail: "could not place a cell within the spacing constraint".into(),
    })
}

fn in_disk(rng: &mut ChaCha8Rng, c: Point, r: f64) -> Point {
    let rr = r * rng.random::<f64>().sqrt();
    let t = rng.random::<f64>() * std::f64::consts::TAU;
    [c[0] + rr * t.cos(), c[1] + rr * t.sin()]
}

/// Star-shaped polygon wobbling around radius `r`.
fn wobbly_polygon(rng: &mut ChaCha8Rng, c: Point, r: f64) -> Vec<Point> {
    let n = 32;
    let (k1, k2) = (rng.random_range(2..5) as f64, rng.random_range(5..8) as f64);
    let (p1, p2) = (rng.random::<f64>() * 6.3, rng.random::<f64>() * 6.3);
    (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n as f64;
            let rad = r * (1.0 + 0.08 * (k1 * t + p1).sin() + 0.05 * (k2 * t + p2).sin());
            [c[0] + rad * t.cos(), c[1] + rad * t.sin()]
        })
        .collect()
}

fn sample_latent(rng: &mut ChaCha8Rng, m: MeanStd, offset_sd: f64) -> f64 {
    let sd = m.std.max(0.0);
    let v = if sd > 0.0 {
        Normal::new(m.mean, sd).expect("finite std").sample(rng)
    } else {
        m.mean
    };
    v + offset_sd * sd
}

/// Cell shape and 14 features from a class profile plus a latent offset
/// (in std units).
fn sample_cell(rng: &mut ChaCha8Rng, profile: &ClassProfile, offset: &[f64; 7]) -> ([f64; NUM_FEATURES], f64, f64) {
    let l = profile.latents();
    let mut v = [0.0; 7];
    for i in 0..7 {
        v[i] = sample_latent(rng, l[i], offset[i]);
    }
    let a = v[0].clamp(2.5, 30.0);
    let b = (a * v[1].clamp(0.2, 1.0)).max(2.0).min(a);
    let solidity = v[2].clamp(0.6, 1.0);
    let mu = v[3].clamp(10.0, 245.0);
    let sigma = v[4].clamp(0.5, 80.0);
    let diss = v[5].clamp(0.05, 20.0);
    let entropy = v[6].clamp(0.1, 10.0);
    let jitter = |rng: &mut ChaCha8Rng, s: f64| 1.0 + Normal::new(0.0, s).expect("std").sample(rng);

    let area = PI * a * b * solidity.sqrt() * jitter(rng, 0.02);
    let ramanujan = PI * (3.0 * (a + b) - ((3.0 * a + b) * (a + 3.0 * b)).sqrt());
    let perimeter = ramanujan * (2.0 - solidity) * jitter(rng, 0.02);
    let eccentricity = (1.0 - (b / a).powi(2)).max(0.0).sqrt().min(0.999);
    let extent = (PI / 4.0 * solidity * jitter(rng, 0.03)).clamp(0.3, 1.0);
    let contrast = diss * diss * (1.3 + 0.3 * rng.random::<f64>());
    let homogeneity = (1.0 / (1.0 + diss) * jitter(rng, 0.03)).clamp(0.01, 1.0);
    let asm = 2f64.powf(-entropy) * rng.random_range(0.6..1.0);
    let feats = [
        area,
        perimeter,
        eccentricity,
        solidity,
        2.0 * a,
        2.0 * b,
        extent,
        sigma,
        contrast,
        diss,
        homogeneity,
        entropy,
        asm,
        sigma / mu,
    ];
    (feats, a, b)
}

fn profile_for(class: Option<CellClass>) -> ClassProfile {
    match class {
        Some(CellClass::Granulocyte) => ClassProfile::GRANULOCYTE,
        Some(CellClass::PlasmaCell) => ClassProfile::PLASMA,
        Some(CellClass::Lymphocyte) => ClassProfile::LYMPHOCYTE,
        Some(CellClass::Stromal) => ClassProfile::STROMAL,
        Some(CellClass::EpithelialHealthy) => ClassProfile::HEALTHY,
        Some(CellClass::EpithelialTumor) => ClassProfile::TUMOR,
        None => ClassProfile::UNCLASSIFIED,
    }
}

/// Splits `total` into `parts` near-equal shares.
fn shares(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// Generates one tissue canvas. Deterministic per `cfg.seed`.
pub fn generate_tissue(cfg: &SynthConfig) -> Result<Tissue> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let slot = cfg.canvas / cfg.grid as f64;
    let jitter = slot / 2.0 - cfg.blob_radius * 1.15 - cfg.min_spacing;
    let offset_dist = Normal::new(0.0, 1.0).expect("unit normal");

    let mut blobs = Vec::new();
    for gy in 0..cfg.grid {
        for gx in 0..cfg.grid {
            let center = [
                (gx as f64 + 0.5) * slot + rng.random_range(-jitter..=jitter),
                (gy as f64 + 0.5) * slot + rng.random_range(-jitter..=jitter),
            ];
            let tumor = (gx + gy) % 2 == 0;
            let polygon = tumor.then(|| wobbly_polygon(&mut rng, center, cfg.blob_radius));
            let mut offset = [0.0; 7];
            for o in &mut offset {
                *o = cfg.blob_offset_scale * offset_dist.sample(&mut rng);
            }
            blobs.push(Blob {
                center,
                tumor,
                polygon,
                offset,
            });
        }
    }
    let tumor_blobs: Vec<usize> = (0..blobs.len()).filter(|&i| blobs[i].tumor).collect();
    let healthy_blobs: Vec<usize> = (0..blobs.len()).filter(|&i| !blobs[i].tumor).collect();
    let polygons: Vec<&Vec<Point>> = blobs.iter().filter_map(|b| b.polygon.as_ref()).collect();
    let in_any_tumor = |p: Point| polygons.iter().any(|poly| contains(poly, p));
    // Cells inside blobs stay clear of the polygon wobble.
    let inner = cfg.blob_radius * 0.85;
    let in_any_blob = |p: Point| {
        blobs
            .iter()
            .any(|b| (b.center[0] - p[0]).hypot(b.center[1] - p[1]) < cfg.blob_radius * 1.15)
    };

    let total = cfg.counts.total();
    let mut occ = Occupancy::new(cfg.min_spacing);
    // (centroid, true class, latent offset)
    let mut cells: Vec<(Point, Option<CellClass>, [f64; 7])> = Vec::with_capacity(total);
    let canvas = cfg.canvas;
    let anywhere = move |rng: &mut ChaCha8Rng| {
        [
            rng.random_range(MARGIN..canvas - MARGIN),
            rng.random_range(MARGIN..canvas - MARGIN),
        ]
    };

    let fill_blobs = |rng: &mut ChaCha8Rng,
                          occ: &mut Occupancy,
                          cells: &mut Vec<(Point, Option<CellClass>, [f64; 7])>,
                          which: &[usize],
                          count: usize,
                          class: Option<CellClass>,
                          epithelial: bool|
     -> Result<()> {
        if which.is_empty() {
            return if count == 0 {
                Ok(())
            } else {
                Err(Error::InfeasibleDensity {
                    requested: count,
                    detail: "no blob slots available".into(),
                })
            };
        }
        for (bi, n) in which.iter().zip(shares(count, which.len())) {
            let b = &blobs[*bi];
            for _ in 0..n {
                let p = place(
                    rng,
                    occ,
                    |r| in_disk(r, b.center, inner),
                    |p| match &b.polygon {
                        Some(poly) => contains(poly, p),
                        None => !in_any_tumor(p),
                    },
                    total,
                )?;
                let offset = if epithelial { b.offset } else { [0.0; 7] };
                cells.push((p, class, offset));
            }
        }
        Ok(())
    };

    let c = &cfg.counts;
    fill_blobs(&mut rng, &mut occ, &mut cells, &tumor_blobs, c.tumor, Some(CellClass::EpithelialTumor), true)?;
    fill_blobs(&mut rng, &mut occ, &mut cells, &healthy_blobs, c.healthy, Some(CellClass::EpithelialHealthy), true)?;
    let lymph_in = (c.lymphocyte as f64 * cfg.lymphocytes_in_tumor).round() as usize;
    let stroma_in = (c.stromal as f64 * cfg.stroma_in_healthy).round() as usize;
    fill_blobs(&mut rng, &mut occ, &mut cells, &tumor_blobs, lymph_in, Some(CellClass::Lymphocyte), false)?;
    fill_blobs(&mut rng, &mut occ, &mut cells, &healthy_blobs, stroma_in, Some(CellClass::Stromal), false)?;

    let scattered = [
        (c.lymphocyte - lymph_in, Some(CellClass::Lymphocyte)),
        (c.stromal - stroma_in, Some(CellClass::Stromal)),
        (c.plasma, Some(CellClass::PlasmaCell)),
        (c.granulocyte, Some(CellClass::Granulocyte)),
        (c.unclassified, None),
    ];
    for (n, class) in scattered {
        for _ in 0..n {
            let p = place(&mut rng, &mut occ, anywhere, |p| !in_any_blob(p), total)?;
            cells.push((p, class, [0.0; 7]));
        }
    }

    cells.shuffle(&mut rng);
    let mut records = Vec::with_capacity(cells.len());
    let mut features = BTreeMap::new();
    let mut labels = BTreeMap::new();
    let mut shapes = Vec::with_capacity(cells.len());
    for (i, (p, class, offset)) in cells.into_iter().enumerate() {
        let id = i as u64 + 1;
        let profile = match class {
            Some(CellClass::EpithelialTumor) => cfg.tumor_profile,
            Some(CellClass::EpithelialHealthy) => cfg.healthy_profile,
            other => profile_for(other),
        };
        let (feats, a, b) = sample_cell(&mut rng, &profile, &offset);
        let angle = rng.random::<f64>() * PI;
        let contour = ellipse_polygon(p, a, b, angle, 16);
        let confidence = if class.is_some() {
            rng.random_range(0.6..1.0)
        } else {
            rng.random_range(0.1..0.5)
        };
        if let Some(l) = class.and_then(CellClass::label) {
            labels.insert(id, l);
        }
        let emitted = class.map(|c| if c.is_epithelial() { CellClass::EpithelialHealthy } else { c });
        features.insert(id, feats);
        shapes.push((feats[7], feats[13]));
        records.push(CellRecord {
            id,
            centroid: p,
            contour,
            class: emitted,
            confidence,
        });
    }
    let regions = blobs
        .iter()
        .filter_map(|b| b.polygon.clone())
        .map(|polygon| RegionAnnotation {
            label: "tumor".into(),
            polygon,
        })
        .collect();
    let image = cfg.raster.then(|| render(cfg, &records, &shapes, &mut rng));
    Ok(Tissue {
        records,
        regions,
        features,
        labels,
        image,
    })
}

/// Grayscale rendering: each nucleus is filled with noisy intensities whose
/// mean and spread follow its sampled texture parameters.
fn render(cfg: &SynthConfig, records: &[CellRecord], shapes: &[(f64, f64)], rng: &mut ChaCha8Rng) -> GrayPatch {
    let side = cfg.canvas.ceil() as usize;
    let mut img = GrayPatch {
        width: side,
        height: side,
        data: vec![225; side * side],
    };
    for (r, &(sigma, disp)) in records.iter().zip(shapes) {
        let mu = if disp > 0.0 { sigma / disp } else { 128.0 };
        let noise = Normal::new(mu, sigma.max(0.5)).expect("finite");
        let (mask, (ox, oy)) = rasterize_contour(&r.contour);
        for y in 0..mask.height {
            for x in 0..mask.width {
                let (ix, iy) = (ox + x as i64, oy + y as i64);
                if mask.data[y * mask.width + x] && ix >= 0 && iy >= 0 && (ix as usize) < side && (iy as usize) < side {
                    img.data[iy as usize * side + ix as usize] = noise.sample(rng).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    img
}

/// Several tiles per patient, each an independent smaller canvas.
pub fn generate_cohort(base: &SynthConfig, patients: usize, tiles_per_patient: usize) -> Result<Vec<(String, Tissue)>> {
    let mut out = Vec::with_capacity(patients * tiles_per_patient);
    for p in 0..patients {
        for t in 0..tiles_per_patient {
            let cfg = SynthConfig {
                seed: base.seed.wrapping_mul(1_000_003).wrapping_add((p * tiles_per_patient + t) as u64),
                ..base.clone()
            };
            out.push((format!("patient_{p:03}"), generate_tissue(&cfg)?));
        }
    }
    Ok(out)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::relabel_epithelial;

    fn small(preset: Preset, seed: u64) -> SynthConfig {
        SynthConfig::preset(preset, seed).scaled(0.25)
    }

    #[test]
    fn deterministic() {
        let cfg = small(Preset::Easy, 3);
        assert_eq!(generate_tissue(&cfg).unwrap(), generate_tissue(&cfg).unwrap());
        let other = generate_tissue(&small(Preset::Easy, 4)).unwrap();
        assert_ne!(generate_tissue(&cfg).unwrap().records, other.records);
    }

    #[test]
    fn exact_counts() {
        let cfg = SynthConfig {
            counts: ClassCounts {
                tumor: 100,
                healthy: 100,
                lymphocyte: 0,
                stromal: 50,
                plasma: 0,
                granulocyte: 0,
                unclassified: 0,
            },
            ..SynthConfig::preset(Preset::Easy, 1)
        };
        let t = generate_tissue(&cfg).unwrap();
        let mut hist = BTreeMap::new();
        for r in &t.records {
            *hist.entry(t.true_class(r)).or_insert(0) += 1;
        }
        assert_eq!(hist.get(&Some(CellClass::EpithelialTumor)), Some(&100));
        assert_eq!(hist.get(&Some(CellClass::EpithelialHealthy)), Some(&100));
        assert_eq!(hist.get(&Some(CellClass::Stromal)), Some(&50));
        assert_eq!(hist.len(), 3);
    }

    #[test]
    fn relabel_recovers_truth() {
        let t = generate_tissue(&small(Preset::ContextOnly, 9)).unwrap();
        for r in relabel_epithelial(&t.records, &t.regions) {
            assert_eq!(r.class, t.true_class(&r), "cell {}", r.id);
        }
    }

    #[test]
    fn spacing_respected() {
        let t = generate_tissue(&small(Preset::Easy, 2)).unwrap();
        let pts: Vec<Point> = t.records.iter().map(|r| r.centroid).collect();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                assert!((pts[i][0] - pts[j][0]).hypot(pts[i][1] - pts[j][1]) >= 12.0);
            }
        }
    }

    #[test]
    fn infeasible_density() {
        let cfg = SynthConfig {
            counts: ClassCounts::default().scaled(20.0),
            ..SynthConfig::preset(Preset::Easy, 1)
        };
        assert!(matches!(generate_tissue(&cfg), Err(Error::InfeasibleDensity { .. })));
        let cfg = SynthConfig {
            blob_radius: 400.0,
            ..SynthConfig::preset(Preset::Easy, 1)
        };
        assert!(matches!(generate_tissue(&cfg), Err(Error::InfeasibleDensity { .. })));
    }

    #[test]
    fn feature_ranges() {
        let t = generate_tissue(&small(Preset::Easy, 5)).unwrap();
        for f in t.features.values() {
            assert!(f.iter().all(|v| v.is_finite()));
            assert!(f[0] > 0.0 && f[4] >= f[5]);
            assert!((0.0..1.0).contains(&f[2]) && f[3] <= 1.0 && f[6] <= 1.0);
            assert!(f[10] > 0.0 && f[10] <= 1.0 && f[12] > 0.0 && f[12] <= 1.0);
        }
    }

    #[test]
    fn ks_basics() {
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
    }

    #[test]
    fn context_only_marginals_match() {
        let cfg = SynthConfig {
            counts: ClassCounts {
                tumor: 1000,
                healthy: 1000,
                ..ClassCounts::default()
            },
            ..SynthConfig::preset(Preset::ContextOnly, 11)
        };
        let t = generate_tissue(&cfg).unwrap();
        let column = |class: CellClass, j: usize| -> Vec<f64> {
            t.records
                .iter()
                .filter(|r| t.true_class(r) == Some(class))
                .map(|r| t.features[&r.id][j])
                .collect()
        };
        for j in 0..NUM_FEATURES {
            let a = column(CellClass::EpithelialTumor, j);
            let b = column(CellClass::EpithelialHealthy, j);
            assert_eq!((a.len(), b.len()), (1000, 1000));
            let d = ks_statistic(&a, &b);
            assert!(d < 0.1, "feature {j}: KS {d}");
        }
    }

    #[test]
    fn raster_renders_nuclei() {
        let cfg = SynthConfig {
            raster: true,
            ..small(Preset::Easy, 1)
        };
        let t = generate_tissue(&cfg).unwrap();
        let img = t.image.unwrap();
        let r = &t.records[0];
        let (x, y) = (r.centroid[0].round() as usize, r.centroid[1].round() as usize);
        assert_ne!(img.get(x, y), 225);
    }
}

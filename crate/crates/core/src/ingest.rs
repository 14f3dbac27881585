//! Segmentation and region-annotation input, and tumor-region relabeling of
//! epithelial nuclei.

use std::path::Path;

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::geometry::{self, Point};

pub const FORMAT_VERSION: u64 = 1;

/// Cell class, in the fixed one-hot order used everywhere.
///
/// Before relabeling, [`CellClass::EpithelialHealthy`] (code 4) stands for
/// generic epithelium, as emitted by the segmentation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CellClass {
    Granulocyte = 0,
    PlasmaCell = 1,
    Lymphocyte = 2,
    Stromal = 3,
    EpithelialHealthy = 4,
    EpithelialTumor = 5,
}

impl CellClass {
    pub const ALL: [CellClass; 6] = [
        CellClass::Granulocyte,
        CellClass::PlasmaCell,
        CellClass::Lymphocyte,
        CellClass::Stromal,
        CellClass::EpithelialHealthy,
        CellClass::EpithelialTumor,
    ];

    pub const NAMES: [&'static str; 6] = [
        "granulocyte",
        "plasma_cell",
        "lymphocyte",
        "stromal",
        "epithelial_healthy",
        "epithelial_tumor",
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: i64) -> Option<CellClass> {
        usize::try_from(code).ok().and_then(|c| Self::ALL.get(c).copied())
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }

    pub fn is_epithelial(self) -> bool {
        matches!(self, CellClass::EpithelialHealthy | CellClass::EpithelialTumor)
    }

    pub fn one_hot(self) -> [f64; 6] {
        let mut v = [0.0; 6];
        v[self as usize] = 1.0;
        v
    }

    /// Binary label for epithelial classes: 1 = tumor, 0 = healthy.
    pub fn label(self) -> Option<u8> {
        match self {
            CellClass::EpithelialHealthy => Some(0),
            CellClass::EpithelialTumor => Some(1),
            _ => None,
        }
    }
}

/// One segmented nucleus. `class == None` means the segmenter left it
/// unclassified.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub id: u64,
    pub centroid: Point,
    pub contour: Vec<Point>,
    pub class: Option<CellClass>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionAnnotation {
    pub label: String,
    pub polygon: Vec<Point>,
}

impl RegionAnnotation {
    pub fn is_tumor(&self) -> bool {
        self.label.eq_ignore_ascii_case("tumor")
    }
}

fn field<'a>(obj: &'a Map<String, Value>, name: &str, id: Option<i64>) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::malformed(id, format!("missing field \"{name}\"")))
}

fn parse_point(v: &Value, id: Option<i64>, what: &str) -> Result<Point> {
    let arr = v
        .as_array()
        .filter(|a| a.len() == 2)
        .ok_or_else(|| Error::malformed(id, format!("{what} must be an [x, y] pair")))?;
    let mut p = [0.0; 2];
    for (slot, x) in p.iter_mut().zip(arr) {
        *slot = x
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| Error::malformed(id, format!("{what} has a non-finite coordinate")))?;
    }
    Ok(p)
}

fn parse_polygon(v: &Value, id: Option<i64>, what: &str) -> Result<Vec<Point>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::malformed(id, format!("{what} must be a list of points")))?;
    let pts = arr
        .iter()
        .map(|p| parse_point(p, id, what))
        .collect::<Result<Vec<_>>>()?;
    let pts = geometry::strip_closing_vertex(pts);
    if pts.len() < 3 {
        return Err(Error::malformed(id, format!("{what} has {} vertices, need at least 3", pts.len())));
    }
    Ok(pts)
}

fn check_header(root: &Value) -> Result<&Map<String, Value>> {
    let obj = root
        .as_object()
        .ok_or_else(|| Error::malformed(None, "top level must be an object"))?;
    match obj.get("format_version").and_then(Value::as_u64) {
        Some(FORMAT_VERSION) => Ok(obj),
        Some(v) => Err(Error::malformed(None, format!("unsupported format_version {v}"))),
        None => Err(Error::malformed(None, "missing field \"format_version\"")),
    }
}

fn parse_nucleus(v: &Value) -> Result<CellRecord> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::malformed(None, "nucleus entry must be an object"))?;
    let raw_id = field(obj, "id", None)?;
    let id = raw_id
        .as_u64()
        .ok_or_else(|| Error::malformed(raw_id.as_i64(), "id must be a non-negative integer"))?;
    let rid = Some(id as i64);
    let centroid = parse_point(field(obj, "centroid", rid)?, rid, "centroid")?;
    let contour = parse_polygon(field(obj, "contour", rid)?, rid, "contour")?;
    let class = match field(obj, "class", rid)? {
        Value::Null => None,
        c => {
            let code = c
                .as_i64()
                .ok_or_else(|| Error::malformed(rid, "class must be an integer or null"))?;
            let class = CellClass::from_code(code);
            if class.is_none() {
                log::warn!("nucleus {id}: unknown class code {code}, treating as unclassified");
            }
            class
        }
    };
    let confidence = field(obj, "confidence", rid)?
        .as_f64()
        .filter(|c| (0.0..=1.0).contains(c))
        .ok_or_else(|| Error::malformed(rid, "confidence must be a number in [0, 1]"))?;
    Ok(CellRecord {
        id,
        centroid,
        contour,
        class,
        confidence,
    })
}

/// Parses segmentation JSON text. Records come back sorted by id.
pub fn parse_segmentation_str(text: &str) -> Result<Vec<CellRecord>> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::malformed(None, e.to_string()))?;
    let obj = check_header(&root)?;
    let nuclei = field(obj, "nuclei", None)?
        .as_array()
        .ok_or_else(|| Error::malformed(None, "\"nuclei\" must be a list"))?;
    let mut records = nuclei.iter().map(parse_nucleus).collect::<Result<Vec<_>>>()?;
    records.sort_by_key(|r| r.id);
    if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::malformed(Some(w[0].id as i64), "duplicate id"));
    }
    Ok(records)
}

pub fn parse_segmentation(path: &Path) -> Result<Vec<CellRecord>> {
    parse_segmentation_str(&read_text(path)?).map_err(|e| with_path(e, path))
}

pub fn serialize_segmentation(records: &[CellRecord]) -> String {
    let nuclei: Vec<Value> = records
        .iter()
        .map(|r| {
            json!({
                "id": r.id,
                "centroid": r.centroid,
                "contour": r.contour,
                "class": r.class.map(CellClass::code),
                "confidence": r.confidence,
            })
        })
        .collect();
    let doc = json!({
        "format_version": FORMAT_VERSION,
        "magnification": 40,
        "nuclei": nuclei,
    });
    doc.to_string()
}

pub fn parse_regions_str(text: &str) -> Result<Vec<RegionAnnotation>> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::malformed(None, e.to_string()))?;
    let obj = check_header(&root)?;
    let regions = field(obj, "regions", None)?
        .as_array()
        .ok_or_else(|| Error::malformed(None, "\"regions\" must be a list"))?;
    let mut out = Vec::with_capacity(regions.len());
    for (i, r) in regions.iter().enumerate() {
        let idx = Some(i as i64);
        let obj = r
            .as_object()
            .ok_or_else(|| Error::malformed(idx, "region entry must be an object"))?;
        let label = field(obj, "label", idx)?
            .as_str()
            .ok_or_else(|| Error::malformed(idx, "label must be a string"))?
            .to_string();
        let polygon = parse_polygon(field(obj, "polygon", idx)?, idx, "polygon")?;
        if geometry::signed_area(&polygon).abs() <= 0.0 || !geometry::is_simple(&polygon) {
            return Err(Error::malformed(idx, "polygon is not a simple closed ring with positive area"));
        }
        let region = RegionAnnotation { label, polygon };
        if !region.is_tumor() {
            log::warn!("region {i}: label \"{}\" is not used for relabeling", region.label);
        }
        out.push(region);
    }
    Ok(out)
}

pub fn parse_regions(path: &Path) -> Result<Vec<RegionAnnotation>> {
    parse_regions_str(&read_text(path)?).map_err(|e| with_path(e, path))
}

pub fn serialize_regions(regions: &[RegionAnnotation]) -> String {
    let list: Vec<Value> = regions
        .iter()
        .map(|r| json!({"label": r.label, "polygon": r.polygon}))
        .collect();
    json!({"format_version": FORMAT_VERSION, "regions": list}).to_string()
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    String::from_utf8(bytes).map_err(|_| Error::malformed(None, format!("{}: not valid UTF-8", path.display())))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::MalformedInput { record, message } => Error::MalformedInput {
            record,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// Splits epithelial cells into tumor (centroid inside any tumor region,
/// edges inclusive) and healthy. Other classes pass through untouched.
pub fn relabel_epithelial(cells: &[CellRecord], regions: &[RegionAnnotation]) -> Vec<CellRecord> {
    let tumor: Vec<&[Point]> = regions
        .iter()
        .filter(|r| r.is_tumor())
        .map(|r| r.polygon.as_slice())
        .collect();
    cells
        .par_iter()
        .map(|c| {
            let mut c = c.clone();
            if c.class.is_some_and(CellClass::is_epithelial) {
                let inside = tumor.iter().any(|poly| geometry::contains(poly, c.centroid));
                c.class = Some(if inside {
                    CellClass::EpithelialTumor
                } else {
                    CellClass::EpithelialHealthy
                });
            }
            c
        })
        .collect()
}

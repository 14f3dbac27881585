//! Glue between stages: tissue directories on disk, feature sources and the
//! segmentation-to-graph build.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{crop_for_contour, node_features, GrayPatch, NodeFeatureVector, MORPHOLOGY_NAMES, NUM_FEATURES, TEXTURE_NAMES};
use crate::graph::{assemble_graph, cleanup_graph, CellGraph, EdgeRule};
use crate::ingest::{parse_regions, parse_segmentation, relabel_epithelial, serialize_regions, serialize_segmentation, CellRecord, RegionAnnotation};
use crate::io::{read_json, write_atomic, write_json};
use crate::synth::{generate_tissue, SynthConfig, Tissue};

pub const SEGMENTATION_FILE: &str = "segmentation.json";
pub const REGIONS_FILE: &str = "regions.json";
pub const FEATURES_FILE: &str = "features.json";
pub const LABELS_FILE: &str = "labels.json";
pub const IMAGE_FILE: &str = "image.png";
pub const PATIENTS_FILE: &str = "patients.json";

/// Per-nucleus features keyed by record id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub format_version: u32,
    pub feature_names: Vec<String>,
    pub features: BTreeMap<u64, Vec<f64>>,
}

impl FeatureTable {
    pub fn new(features: &BTreeMap<u64, [f64; NUM_FEATURES]>) -> Self {
        FeatureTable {
            format_version: 1,
            feature_names: MORPHOLOGY_NAMES.iter().chain(TEXTURE_NAMES.iter()).map(|s| s.to_string()).collect(),
            features: features.iter().map(|(&k, v)| (k, v.to_vec())).collect(),
        }
    }
}

/// Where node features come from.
#[derive(Debug, Clone)]
pub enum FeatureSource {
    Table(BTreeMap<u64, [f64; NUM_FEATURES]>),
    Raster(GrayPatch),
}

impl FeatureSource {
    pub fn features_for(&self, cells: &[CellRecord]) -> Result<Vec<NodeFeatureVector>> {
        match self {
            FeatureSource::Table(t) => cells
                .iter()
                .map(|c| {
                    t.get(&c.id)
                        .map(NodeFeatureVector::from_array)
                        .ok_or_else(|| Error::MalformedInput {
                            record: Some(c.id as i64),
                            message: "no feature vector for nucleus".into(),
                        })
                })
                .collect(),
            FeatureSource::Raster(img) => cells
                .par_iter()
                .map(|c| {
                    let (patch, mask) = crop_for_contour(img, &c.contour);
                    node_features(&patch, &mask).map_err(|e| Error::MalformedInput {
                        record: Some(c.id as i64),
                        message: format!("feature extraction failed: {e}"),
                    })
                })
                .collect(),
        }
    }
}

/// Relabel, extract features, assemble and clean up.
pub fn build_graph(
    cells: &[CellRecord],
    regions: &[RegionAnnotation],
    source: &FeatureSource,
    rule: EdgeRule,
) -> Result<CellGraph> {
    let relabeled = relabel_epithelial(cells, regions);
    let feats = source.features_for(&relabeled)?;
    let g = assemble_graph(&relabeled, &feats, rule)?;
    Ok(cleanup_graph(&g).0)
}

/// Generates a tissue and builds its cleaned graph from the feature table.
pub fn synth_graph(cfg: &SynthConfig, rule: EdgeRule) -> Result<CellGraph> {
    let t = generate_tissue(cfg)?;
    build_graph(&t.records, &t.regions, &FeatureSource::Table(t.features), rule)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes segmentation, regions, feature table, ground-truth labels and,
/// when present, the raster.
pub fn write_tissue(dir: &Path, t: &Tissue) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_atomic(&dir.join(SEGMENTATION_FILE), serialize_segmentation(&t.records).as_bytes())?;
    write_atomic(&dir.join(REGIONS_FILE), serialize_regions(&t.regions).as_bytes())?;
    write_json(&dir.join(FEATURES_FILE), &FeatureTable::new(&t.features))?;
    write_json(&dir.join(LABELS_FILE), &t.labels)?;
    if let Some(img) = &t.image {
        let path = dir.join(IMAGE_FILE);
        let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .expect("raster dimensions match data");
        let mut bytes = Vec::new();
        buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::InvalidConfig(format!("png encoding: {e}")))?;
        write_atomic(&path, &bytes)?;
    }
    Ok(())
}

pub fn read_image(path: &Path) -> Result<GrayPatch> {
    let img = image::open(path)
        .map_err(|e| Error::MalformedInput {
            record: None,
            message: format!("{}: {e}", path.display()),
        })?
        .into_luma8();
    Ok(GrayPatch {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

/// Reads a tissue directory. Features come from the table when present,
/// otherwise from the raster.
pub fn read_tissue_dir(dir: &Path) -> Result<(Vec<CellRecord>, Vec<RegionAnnotation>, FeatureSource)> {
    let cells = parse_segmentation(&dir.join(SEGMENTATION_FILE))?;
    let regions_path = dir.join(REGIONS_FILE);
    let regions = if regions_path.exists() {
        parse_regions(&regions_path)?
    } else {
        Vec::new()
    };
    let table_path = dir.join(FEATURES_FILE);
    let image_path = dir.join(IMAGE_FILE);
    let source = if table_path.exists() {
        let table: FeatureTable = read_json(&table_path)?;
        let mut map = BTreeMap::new();
        for (id, v) in table.features {
            let arr: [f64; NUM_FEATURES] = v.as_slice().try_into().map_err(|_| Error::MalformedInput {
                record: Some(id as i64),
                message: format!("{}: expected {NUM_FEATURES} features, got {}", table_path.display(), v.len()),
            })?;
            if arr.iter().any(|x| !x.is_finite()) {
                return Err(Error::MalformedInput {
                    record: Some(id as i64),
                    message: format!("{}: non-finite feature", table_path.display()),
                });
            }
            map.insert(id, arr);
        }
        FeatureSource::Table(map)
    } else if image_path.exists() {
        FeatureSource::Raster(read_image(&image_path)?)
    } else {
        return Err(Error::MalformedInput {
            record: None,
            message: format!("{}: neither {FEATURES_FILE} nor {IMAGE_FILE} present", dir.display()),
        });
    };
    Ok((cells, regions, source))
}

/// Graph JSON files in a directory, sorted by name.
pub fn list_graph_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().is_some_and(|n| n != PATIENTS_FILE && n != "partition.json")
        })
        .collect();
    out.sort();
    Ok(out)
}

/// `patients.json`: graph file stem → patient id.
pub fn read_patients(dir: &Path, files: &[PathBuf]) -> Result<Option<Vec<String>>> {
    let path = dir.join(PATIENTS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let map: BTreeMap<String, String> = read_json(&path)?;
    files
        .iter()
        .map(|f| {
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            map.get(stem).cloned().ok_or_else(|| Error::MalformedInput {
                record: None,
                message: format!("{}: no patient for graph \"{stem}\"", path.display()),
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::Preset;

    #[test]
    fn tissue_dir_round_trip_builds_same_graph() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::preset(Preset::Easy, 2).scaled(0.2);
        let t = generate_tissue(&cfg).unwrap();
        write_tissue(dir.path(), &t).unwrap();
        let (cells, regions, source) = read_tissue_dir(dir.path()).unwrap();
        let rule = EdgeRule::default();
        let a = build_graph(&cells, &regions, &source, rule).unwrap();
        let b = build_graph(&t.records, &t.regions, &FeatureSource::Table(t.features.clone()), rule).unwrap();
        assert_eq!(a, b);
        for (i, &id) in a.node_ids.iter().enumerate() {
            assert_eq!(a.label(i), t.labels.get(&id).copied());
        }
    }

    #[test]
    fn easy_preset_mean_degree_is_plausible() {
        let g = synth_graph(&SynthConfig::preset(Preset::Easy, 0), EdgeRule::default()).unwrap();
        let mean = 2.0 * g.num_edges() as f64 / g.num_nodes() as f64;
        assert!((2.0..=30.0).contains(&mean), "mean degree {mean}");
    }

    #[test]
    fn raster_features_build() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            raster: true,
            ..SynthConfig::preset(Preset::Easy, 4).scaled(0.12)
        };
        let t = generate_tissue(&cfg).unwrap();
        write_tissue(dir.path(), &t).unwrap();
        std::fs::remove_file(dir.path().join(FEATURES_FILE)).unwrap();
        let (cells, regions, source) = read_tissue_dir(dir.path()).unwrap();
        assert!(matches!(source, FeatureSource::Raster(_)));
        let g = build_graph(&cells, &regions, &source, EdgeRule::default()).unwrap();
        assert!(g.num_nodes() > 0);
        assert!(g.features.iter().all(|f| f.iter().all(|v| v.is_finite())));
    }
}

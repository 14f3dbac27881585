//! Morphology and GLCM texture features measured from a rendered image.
//!
//!     cargo run --release --example texture_features

use cellgraph::features::{crop_for_contour, node_features, NodeFeatureVector};
use cellgraph::synth::{generate_tissue, Preset, SynthConfig};

fn main() -> cellgraph::Result<()> {
    let cfg = SynthConfig {
        raster: true,
        ..SynthConfig::preset(Preset::Easy, 3).scaled(0.1)
    };
    let tissue = generate_tissue(&cfg)?;
    let image = tissue.image.as_ref().expect("raster requested");
    println!("rendered {}x{} image with {} nuclei", image.width, image.height, tissue.records.len());

    let names: Vec<&str> = NodeFeatureVector::names().collect();
    for r in tissue.records.iter().take(5) {
        let (patch, mask) = crop_for_contour(image, &r.contour);
        let f = node_features(&patch, &mask)?.to_array();
        println!("nucleus {} ({} px):", r.id, mask.count());
        for (name, v) in names.iter().zip(f) {
            println!("  {name:<22} {v:>10.4}");
        }
    }
    Ok(())
}

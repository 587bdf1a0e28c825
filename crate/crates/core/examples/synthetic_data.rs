//! Generates a synthetic segmentation set and writes it in the dataset layout
//! (`images/NNNN.tdae`, `masks/NNNN.tdae`, `manifest.json`).
//!
//! Usage: `synthetic_data [out_dir]`; without an argument a temporary
//! directory is used and removed afterwards.

use transdae::data::{Dataset, SynthSpec};

fn main() -> transdae::Result<()> {
    let spec = SynthSpec {
        seed: 4,
        ..SynthSpec::default()
    };
    let data = Dataset::synthesize(&spec, 8)?;
    for (i, s) in data.samples.iter().enumerate() {
        let areas: Vec<usize> = (1..spec.num_classes as u8).map(|c| s.mask.area(c)).collect();
        println!("{i:04}: {} shapes, foreground area per class {areas:?}", s.shapes.len());
    }

    let tmp;
    let dir = match std::env::args().nth(1) {
        Some(d) => std::path::PathBuf::from(d),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    data.save(&dir)?;
    let back = Dataset::load(&dir)?;
    assert_eq!(back.masks(), data.masks());
    println!("wrote and reloaded {} samples under {}", back.len(), dir.display());
    Ok(())
}

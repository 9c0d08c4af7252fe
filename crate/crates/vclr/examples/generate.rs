//! Render a small dataset to disk and look inside one record.
//!
//! ```sh
//! cargo run --release --example generate
//! ```

use std::path::Path;

use vclr::worldgen::{write_dataset, DatasetReader, ProposalNoise, Split};

fn main() -> anyhow::Result<()> {
    let dir = Path::new("target/example-runs/generate/val");
    let manifest = write_dataset(dir, Split::Val, 4, 7, &ProposalNoise::default())?;
    println!(
        "wrote {} {} records at {}px under {}",
        manifest.count,
        manifest.split,
        manifest.image_size,
        dir.display()
    );

    let reader = DatasetReader::open(dir)?;
    let rec = reader.record(0)?;
    println!(
        "record 0: {} annotated objects, {} proposals",
        rec.gt.len(),
        rec.proposals.len()
    );
    for g in &rec.gt {
        println!(
            "  {:?} {:?} {:?}  center ({:.2}, {:.2})  size {:.2}  known={}",
            g.color, g.material, g.shape, g.center[0], g.center[1], g.size, g.known
        );
    }

    // The three views show the same layout with different appearance.
    assert_ne!(rec.views.natural, rec.views.structure);
    assert_ne!(rec.views.natural, rec.views.stylized);
    let s = manifest.image_size;
    println!("natural view, downsampled to ascii (darker = denser):");
    let shades = [' ', '.', ':', 'o', '#'];
    for y in (0..s).step_by(2) {
        let mut line = String::new();
        for x in (0..s).step_by(2) {
            let i = (y * s + x) * 3;
            let lum = (rec.views.natural[i] + rec.views.natural[i + 1] + rec.views.natural[i + 2]) / 3.0;
            line.push(shades[((1.0 - lum) * (shades.len() - 1) as f32).round() as usize]);
        }
        println!("  {line}");
    }
    Ok(())
}

//! Supervised-only training: natural view, known objects, no teacher.
//!
//! ```sh
//! cargo run --release --example train_baseline
//! ```

use std::path::Path;

use vclr::model::DetectorConfig;
use vclr::trainer::{run, TrainConfig};
use vclr::worldgen::{write_dataset, ProposalNoise, Split};

fn main() -> anyhow::Result<()> {
    let root = Path::new("target/example-runs/train_baseline");
    write_dataset(&root.join("data"), Split::Train, 8, 11, &ProposalNoise::default())?;

    // Shrunk far below the real recipe so the demo finishes in seconds.
    let mut cfg = TrainConfig::baseline(11);
    cfg.iterations = 60;
    cfg.batch_size = 2;
    cfg.detector = DetectorConfig {
        image_size: 64,
        patch: 16,
        dim: 16,
        heads: 2,
        mlp_ratio: 2,
        enc_blocks: 1,
        dec_blocks: 1,
        num_queries: 8,
    };

    let summary = run(&cfg, &root.join("data"), &root.join("run"))?;
    println!(
        "{} steps, final loss {:.4}, checkpoints: {:?}",
        summary.steps,
        summary.final_loss,
        summary
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
    );

    // The loss column tells the story; the proposal and consistency columns
    // stay zero because the baseline never runs the teacher.
    let csv = std::fs::read_to_string(root.join("run/losses.csv"))?;
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    let first = lines.next().unwrap();
    let last = lines.last().unwrap();
    println!("{header}");
    println!("{first}   <- first step");
    println!("{last}   <- last step");
    Ok(())
}

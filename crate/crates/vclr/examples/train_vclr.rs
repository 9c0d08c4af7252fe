//! The full two-branch recipe: an EMA teacher on the natural view, a student
//! on a random view, proposal-anchored matching, and the cosine pull between
//! matched queries.
//!
//! ```sh
//! cargo run --release --example train_vclr
//! ```

use std::path::Path;

use vclr::model::DetectorConfig;
use vclr::trainer::{run, TrainConfig};
use vclr::worldgen::{write_dataset, ProposalNoise, Split};

fn main() -> anyhow::Result<()> {
    let root = Path::new("target/example-runs/train_vclr");
    write_dataset(&root.join("data"), Split::Train, 8, 11, &ProposalNoise::default())?;

    // The real recipe, shrunk to demo size. Everything is on: all three
    // views, crop-paste augmentation, the proposal loss, the consistency
    // pull, and the quality filter at 0.5 IoU.
    let mut cfg = TrainConfig::vclr(11);
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
    println!(
        "student views {:?}, iou floor {}, ema momentum {}",
        cfg.views.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
        cfg.iou_floor,
        cfg.ema_momentum
    );

    let summary = run(&cfg, &root.join("data"), &root.join("run"))?;
    println!("{} steps, final loss {:.4}", summary.steps, summary.final_loss);

    // Unlike the baseline, the proposal and consistency columns are live.
    let csv = std::fs::read_to_string(root.join("run/losses.csv"))?;
    let mut lines = csv.lines();
    println!("{}", lines.next().unwrap());
    let rows: Vec<&str> = lines.collect();
    for row in [rows.first(), rows.last()].into_iter().flatten() {
        println!("{row}");
    }
    Ok(())
}

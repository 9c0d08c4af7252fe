//! Stress-testing a checkpoint: Gaussian weight perturbation at growing
//! scales, pixel-space distortions, and the score distributions under them.
//!
//! ```sh
//! cargo run --release --example robustness
//! ```

use std::path::Path;

use vclr::model::DetectorConfig;
use vclr::robustness::{distortion_table, perturb_eval, score_distribution, Distortion, PerturbSpec};
use vclr::trainer::{run, TrainConfig};
use vclr::worldgen::{write_dataset, DatasetReader, ProposalNoise, Split};

fn main() -> anyhow::Result<()> {
    let root = Path::new("target/example-runs/robustness");
    let noise = ProposalNoise::default();
    write_dataset(&root.join("train"), Split::Train, 8, 11, &noise)?;
    write_dataset(&root.join("val"), Split::Val, 4, 11, &noise)?;

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
    run(&cfg, &root.join("train"), &root.join("run"))?;
    let (params, _) = vclr::ndtensor::load_checkpoint(&root.join("run/ckpt_100.bin"), false)?;
    let records = DatasetReader::open(&root.join("val"))?.load_all()?;
    let det = cfg.detector;

    // Weight noise: std 0 must reproduce the clean numbers exactly.
    let spec = PerturbSpec { stds: vec![0.0, 0.003, 0.03], trials: 2, seed: 11 };
    println!("weight perturbation ({} trials per std):", spec.trials);
    for row in perturb_eval(&params, &det, &records, &spec)? {
        println!(
            "  std {:<6} trial {}  box AR@10 {:.3}  mask AR@10 {:.3}",
            row.std, row.trial, row.ar10_box, row.ar10_mask
        );
    }

    // Pixel corruption: clean first, then the nine standard conditions.
    println!("input distortion:");
    for (label, ar_box, ar_mask) in distortion_table(&params, &det, &records, 11)? {
        println!("  {label:<14} box AR@10 {ar_box:.3}  mask AR@10 {ar_mask:.3}");
    }

    // How the confidence mass moves under heavy noise.
    for d in [None, Some(Distortion::GaussianNoise { sigma: 0.2 })] {
        let h = score_distribution(&params, &det, &records, d, 11)?;
        println!(
            "scores under {:<10} mean {:.3}  variance {:.4}",
            h.condition, h.mean, h.variance
        );
    }
    Ok(())
}

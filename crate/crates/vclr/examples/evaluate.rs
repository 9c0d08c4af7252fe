//! Class-agnostic average recall for a trained checkpoint: overall, by known
//! versus unknown classes, and per unknown attribute subset.
//!
//! ```sh
//! cargo run --release --example evaluate
//! ```

use std::path::Path;

use vclr::evalkit::{evaluate, eval_records, ClassSplit, EvalConfig, Metric};
use vclr::model::DetectorConfig;
use vclr::ndtensor::load_checkpoint;
use vclr::trainer::{run, TrainConfig};
use vclr::worldgen::{write_dataset, DatasetReader, ProposalNoise, Split};

fn main() -> anyhow::Result<()> {
    let root = Path::new("target/example-runs/evaluate");
    let noise = ProposalNoise::default();
    write_dataset(&root.join("train"), Split::Train, 8, 11, &noise)?;
    write_dataset(&root.join("val"), Split::Val, 6, 11, &noise)?;

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
    let summary = run(&cfg, &root.join("train"), &root.join("run"))?;

    // A checkpoint carries its detector settings, so scoring needs nothing
    // but the file and a dataset.
    let ckpt = summary.checkpoints.last().unwrap();
    let (params, meta) = load_checkpoint(ckpt, false)?;
    let det: DetectorConfig = serde_json::from_value(meta["detector"].clone())?;

    let records = DatasetReader::open(&root.join("val"))?.load_all()?;
    let images = eval_records(&params, &det, &records)?;
    let report = evaluate(&images, &EvalConfig::default());

    println!("{} val scenes, AR over IoU thresholds 0.50:0.05:0.95", records.len());
    for k in [10, 100] {
        for split in ClassSplit::ALL {
            let show = |m| {
                report
                    .get(split, m, k, "overall")
                    .map_or_else(|| "  -  ".into(), |v| format!("{v:.3}"))
            };
            println!("  AR@{k:<3} {split:<8} box {}  mask {}", show(Metric::Box), show(Metric::Mask));
        }
    }
    if let Some(v) = report.mean_unknown_subset_ar(Metric::Box, 10) {
        println!("  mean over unknown attribute subsets, box AR@10: {v:.3}");
    }

    let out = root.join("report.csv");
    std::fs::write(&out, report.to_csv())?;
    println!("full table -> {}", out.display());
    Ok(())
}

//! The recipe ladder: start from supervised-only training and add one
//! ingredient per rung until the full recipe is assembled.
//!
//! ```sh
//! cargo run --release --example ablation
//! ```

use std::path::Path;

use vclr::evalkit::{evaluate, eval_records, ClassSplit, EvalConfig, Metric};
use vclr::model::DetectorConfig;
use vclr::trainer::{run, AblationRow};
use vclr::worldgen::{write_dataset, DatasetReader, ProposalNoise, Split};

fn main() -> anyhow::Result<()> {
    let root = Path::new("target/example-runs/ablation");
    let noise = ProposalNoise::default();
    write_dataset(&root.join("train"), Split::Train, 8, 11, &noise)?;
    write_dataset(&root.join("val"), Split::Val, 6, 11, &noise)?;
    let records = DatasetReader::open(&root.join("val"))?.load_all()?;

    let eval_cfg = EvalConfig { ks: vec![10] };
    println!("{:<22} {:>12} {:>12}", "recipe", "unknown-sub", "known");
    for row in AblationRow::ALL {
        // Each rung reuses the previous rung's switches and flips one more.
        let mut cfg = row.config(11);
        cfg.iterations = 40;
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
        let summary = run(&cfg, &root.join("train"), &root.join(row.label()))?;
        let (params, _) = vclr::ndtensor::load_checkpoint(summary.checkpoints.last().unwrap(), false)?;

        let images = eval_records(&params, &cfg.detector, &records)?;
        let report = evaluate(&images, &eval_cfg);
        let unknown = report
            .mean_unknown_subset_ar(Metric::Box, 10)
            .map_or_else(|| "-".into(), |v| format!("{v:.3}"));
        let known = report
            .get(ClassSplit::Known, Metric::Box, 10, "overall")
            .map_or_else(|| "-".into(), |v| format!("{v:.3}"));
        println!("{:<22} {unknown:>12} {known:>12}", row.label());
    }
    println!("(box AR@10; 40-step demo runs, not the full schedule)");
    Ok(())
}

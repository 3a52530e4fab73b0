//! The two robustness protocols on a quickly-trained model:
//!
//! - System-level MISS: whole modalities go missing at inference; every
//!   nonempty subset of {R, D, E, L} gets a row, and the unweighted mean
//!   summarizes robustness in one number.
//! - Sensor-level MISS: all modalities present, but one sensor degraded
//!   by a named condition at a chosen severity.
//!
//! Run with: cargo run --release --example miss_protocols

use any2seg::eval::{eval_miss_sensor, eval_miss_system};
use any2seg::lscd::TeacherEmbeddings;
use any2seg::segnet::ModelDims;
use any2seg::synthdata::{generate_dataset, Condition, Dataset, Manifest};
use any2seg::trainer::{train_loop, TrainConfig};

fn main() -> any2seg::Result<()> {
    let dir = std::env::temp_dir().join("any2seg-example-miss");
    if dir.exists() {
        std::fs::remove_dir_all(&dir)?;
    }
    let manifest = Manifest { seed: 9, train_count: 64, val_count: 16, ..Manifest::default() };
    generate_dataset(&dir, &manifest)?;
    let dataset = Dataset::open(&dir)?;
    let teacher = TeacherEmbeddings::synthesize(0, manifest.num_classes, 16, 0.8)?;
    let dims = ModelDims::default();
    let cfg = TrainConfig { total_steps: 600, warmup_steps: 30, ..TrainConfig::default() };
    println!("training {} steps on {} samples...", cfg.total_steps, manifest.train_count);
    let outcome = train_loop(&dataset, &teacher, &dims, &cfg)?;
    let fuse_cfg = cfg.fuse_config();

    let report = eval_miss_system(&outcome.params, &dataset, &fuse_cfg)?;
    println!("\nsystem-level MISS ({} subsets):", report.miss_table.len());
    println!("  subset  mIoU    mF1     mAcc");
    for row in &report.miss_table {
        println!("  {:<6}  {:.4}  {:.4}  {:.4}", row.subset, row.miou, row.f1, row.acc);
    }
    let mean = report.mean_row.as_ref().unwrap();
    println!("  {:<6}  {:.4}  {:.4}  {:.4}", mean.subset, mean.miou, mean.f1, mean.acc);

    // Sensor-level: the clean row reproduces the all-modalities result;
    // raising severity degrades it.
    let conditions = vec![
        Condition::clean(),
        Condition::parse("over_exposure:0.5")?,
        Condition::parse("over_exposure:1")?,
        Condition::parse("motion_blur:1")?,
        Condition::parse("lidar_jitter:1")?,
        Condition::parse("event_lowres:1")?,
    ];
    let sensor = eval_miss_sensor(&outcome.params, &dataset, &conditions, &fuse_cfg)?;
    println!("\nsensor-level MISS:");
    println!("  condition           mIoU    mF1     mAcc");
    for row in &sensor.miss_table {
        println!("  {:<18}  {:.4}  {:.4}  {:.4}", row.subset, row.miou, row.f1, row.acc);
    }
    let mean = sensor.mean_row.as_ref().unwrap();
    println!("  {:<18}  {:.4}  {:.4}  {:.4}", mean.subset, mean.miou, mean.f1, mean.acc);

    // Reports serialize to JSON (and a CSV mirror) for tooling.
    let json_path = dir.join("miss.json");
    report.write_json(&json_path)?;
    println!("\nfull report JSON written to {} ({} bytes)", json_path.display(), std::fs::metadata(&json_path)?.len());

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

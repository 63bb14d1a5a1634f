//! Small σ_micro sweep with AUC aggregation, written as CSV and JSON.
//!
//! cargo run --release --example sigma_sweep -- [out_dir]

use std::fs::File;
use std::path::PathBuf;

use bfgpu::eval::{run_sweep, SweepGrid};
use bfgpu::train::Method;

fn main() -> bfgpu::Result<()> {
    let out_dir: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(std::env::temp_dir);
    let grid = SweepGrid {
        methods: vec![Method::Bfgpu, Method::MilMax, Method::MilTopk, Method::MacroSupervised],
        sigma_micro: vec![2, 4, 6, 8, 10],
        sigma_macro: vec![4.0],
        seeds: vec![0, 1, 2],
        n_negative_bags: 30,
        cluster_separation: 2.5,
        noise_scale: 1.0,
        lr: 1e-3,
        ..SweepGrid::default()
    };
    let report = run_sweep(&grid, 0)?;

    println!("{:<17} {:>9}  AvgAcc (mean ± sd)", "method", "σ_micro");
    for a in &report.aggregates {
        println!(
            "{:<17} {:>9}  {:.3} ± {:.3}",
            a.method.name(),
            a.sigma_micro,
            a.avg_acc_mean,
            a.avg_acc_std.unwrap_or(0.0)
        );
    }
    for a in &report.auc {
        println!(
            "AUC {:<17} AvgAcc {:.4}  F1 {:.4}  over {} σ points",
            a.method.name(),
            a.auc_avg_acc,
            a.auc_f1,
            a.n_sigma
        );
    }
    println!("skipped cells: {}, failed cells: {}", report.n_skipped(), report.n_failed());

    report.write_csv(File::create(out_dir.join("bfgpu_sweep.csv"))?)?;
    serde_json::to_writer_pretty(File::create(out_dir.join("bfgpu_sweep.json"))?, &report.summary())?;
    println!("wrote bfgpu_sweep.csv and bfgpu_sweep.json under {}", out_dir.display());
    Ok(())
}

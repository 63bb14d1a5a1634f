//! Every method on the same hard, dual-imbalanced draws.
//!
//! cargo run --release --example baselines_comparison

use bfgpu::datagen::{generate_with_held_out, SynthConfig};
use bfgpu::dataset::{class_prior, ImbalanceSpec, PriorLevel};
use bfgpu::eval::{evaluate, mean_std};
use bfgpu::train::{train, Method, TrainConfig};

fn main() -> bfgpu::Result<()> {
    let spec = ImbalanceSpec::new(10, 10.0)?;
    let prior = class_prior(&spec, PriorLevel::Micro)?;
    let seeds = [0u64, 1, 2];
    let draws = seeds
        .iter()
        .map(|&seed| {
            let mut synth = SynthConfig::new(spec, 50, seed);
            synth.cluster_separation = 2.0;
            synth.noise_scale = 1.0;
            generate_with_held_out(&synth)
        })
        .collect::<bfgpu::Result<Vec<_>>>()?;

    println!("{:<17} {:>14} {:>14}", "method", "AvgAcc", "F1");
    for method in Method::ALL {
        let mut acc = Vec::new();
        let mut f1 = Vec::new();
        for (&seed, (tr, te)) in seeds.iter().zip(&draws) {
            let mut cfg = TrainConfig::new(method, prior);
            cfg.lr = 1e-3;
            cfg.seed = seed;
            let report = evaluate(&train(tr, &cfg)?, te)?;
            acc.push(100.0 * report.avg_acc);
            f1.push(100.0 * report.f1_anomalous);
        }
        let fmt = |v: &[f64]| {
            let (m, sd) = mean_std(v).unwrap();
            format!("{m:6.2} ± {:5.2}", sd.unwrap_or(0.0))
        };
        println!("{:<17} {:>14} {:>14}", method.name(), fmt(&acc), fmt(&f1));
    }
    Ok(())
}

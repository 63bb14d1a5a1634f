//! Train BFGPU on a synthetic draw and evaluate on an independent draw.
//!
//! cargo run --release --example train_bfgpu -- [sigma_micro] [sigma_macro]

use bfgpu::datagen::{generate_with_held_out, SynthConfig};
use bfgpu::dataset::{class_prior, ImbalanceSpec, PriorLevel};
use bfgpu::eval::{evaluate, predict_dataset};
use bfgpu::train::{train_bfgpu, Method, TrainConfig};

fn main() -> bfgpu::Result<()> {
    let mut args = std::env::args().skip(1);
    let sigma_micro = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let sigma_macro = args.next().and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let spec = ImbalanceSpec::new(sigma_micro, sigma_macro)?;
    let mut synth = SynthConfig::new(spec, 50, 0);
    synth.cluster_separation = 3.0;
    synth.noise_scale = 0.8;
    let (train, held_out) = generate_with_held_out(&synth)?;

    let prior = class_prior(&spec, PriorLevel::Micro)?;
    let mut config = TrainConfig::new(Method::Bfgpu, prior);
    config.lr = 1e-3;
    let model = train_bfgpu(&train, &config)?;

    println!("π = {prior:.4}, λ_bfgpu = {:.4}", config.lambda_bfgpu);
    for point in &model.curve {
        println!("epoch {} {:<7} mean loss {:.5}", point.epoch, point.stage.name(), point.mean_loss);
    }
    println!("adjusted threshold T = {:.4}", model.threshold);
    let report = evaluate(&model, &held_out)?;
    println!(
        "held-out AvgAcc {:.4}, F1(anomalous) {:.4}  [TP {} FP {} TN {} FN {}]",
        report.avg_acc, report.f1_anomalous, report.tp, report.fp, report.tn, report.fn_
    );
    let flagged = predict_dataset(&model, &held_out)?.into_iter().filter(|p| p.offending_instance.is_some()).take(3);
    for p in flagged {
        println!("  {} flagged by instance {:?} (score {:.3})", p.bag_id, p.offending_instance, p.max_instance_score);
    }
    Ok(())
}

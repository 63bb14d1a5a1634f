//! Effect of the prior-adjusted threshold versus the fixed 0.5 cut-off.

use bfgpu::datagen::{generate_with_held_out, SynthConfig};
use bfgpu::dataset::{class_prior, ImbalanceSpec, PriorLevel};
use bfgpu::eval::evaluate;
use bfgpu::train::{adjusted_threshold, train, Method, TrainConfig};

fn main() -> bfgpu::Result<()> {
    // Toy scores: 80% near 0.1, 20% near 0.8.
    let scores: Vec<f64> =
        (0..100).map(|i| if i < 80 { 0.1 + 0.001 * i as f64 } else { 0.9 - 0.001 * i as f64 }).collect();
    for prior in [0.5, 0.8, 0.9] {
        println!("π = {prior}: T = {:.3}", adjusted_threshold(&scores, prior)?);
    }

    for sigma_micro in [2, 6, 10] {
        let spec = ImbalanceSpec::new(sigma_micro, 3.0)?;
        let mut synth = SynthConfig::new(spec, 50, 3);
        synth.cluster_separation = 3.0;
        synth.noise_scale = 1.0;
        let (tr, te) = generate_with_held_out(&synth)?;
        let prior = class_prior(&spec, PriorLevel::Micro)?;
        let mut line = format!("σ_micro {sigma_micro:>2}:");
        for adt in [false, true] {
            let mut cfg = TrainConfig::new(Method::Bfgpu, prior);
            cfg.lr = 1e-3;
            cfg.adt = adt;
            let model = train(&tr, &cfg)?;
            let r = evaluate(&model, &te)?;
            line += &format!("  {} T={:.3} AvgAcc={:.3}", if adt { "ADT" } else { "0.5" }, model.threshold, r.avg_acc);
        }
        println!("{line}");
    }
    Ok(())
}

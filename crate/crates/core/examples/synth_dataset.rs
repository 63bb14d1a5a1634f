//! Generate a dual-imbalanced bag dataset and write it as JSON lines plus a
//! flat instance CSV.
//!
//! cargo run --example synth_dataset -- [out_dir]

use std::path::PathBuf;

use bfgpu::datagen::{export_instance_csv, generate_with_held_out, save_dataset, SynthConfig};
use bfgpu::dataset::{class_prior, ImbalanceSpec, PriorLevel};

fn main() -> bfgpu::Result<()> {
    let out_dir: PathBuf = std::env::args().nth(1).map(Into::into).unwrap_or_else(std::env::temp_dir);
    let spec = ImbalanceSpec::new(5, 2.0)?;
    let config = SynthConfig::new(spec, 40, 7);
    let (train, held_out) = generate_with_held_out(&config)?;

    println!("bags: {} normal, {} anomalous", train.positive_bags().count(), train.negative_bags().count());
    println!("instances: {} (dim {})", train.n_instances(), train.dim());
    println!("observed σ_micro {:?}, σ_macro {:?}", train.sigma_micro(), train.sigma_macro());
    println!(
        "π micro {:.4}, π dual {:.4}",
        class_prior(&spec, PriorLevel::Micro)?,
        class_prior(&spec, PriorLevel::Dual)?
    );

    let first = &train.bags()[0];
    println!("first bag {} ({:?}):", first.id, first.macro_label);
    for inst in &first.instances {
        println!("  {:?} {:?}", inst.features, inst.micro_label);
    }

    save_dataset(&train, out_dir.join("bfgpu_train.jsonl"))?;
    save_dataset(&held_out, out_dir.join("bfgpu_held_out.jsonl"))?;
    export_instance_csv(&train, out_dir.join("bfgpu_train_instances.csv"))?;
    println!("wrote datasets under {}", out_dir.display());
    Ok(())
}

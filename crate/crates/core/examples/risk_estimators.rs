//! Compare the PU risk estimators against the fully supervised risk for one
//! fixed scorer on a single draw with revealed labels.

use bfgpu::datagen::{generate, SynthConfig};
use bfgpu::dataset::{class_prior, split, ImbalanceSpec, Label, PriorLevel};
use bfgpu::losses::{
    balanced_pu_risk, bfgpu_risk, nnpu_risk, pn_risk, upu_risk, BalancedPuForm, PnWeighting, Prediction,
};

fn main() -> bfgpu::Result<()> {
    let spec = ImbalanceSpec::new(4, 1.0)?;
    let mut config = SynthConfig::new(spec, 200, 1);
    config.cluster_separation = 2.0;
    config.noise_scale = 1.0;
    let data = generate(&config)?;
    let prior = class_prior(&spec, PriorLevel::Micro)?;
    let micro = split(&data)?;

    // A fixed, imperfect scorer: anomaly probability rises along axis 0.
    let score = |x: &[f64]| Prediction::from_anomaly_prob(1.0 / (1.0 + (-1.2 * x[0]).exp()));
    let inst = |r: &bfgpu::dataset::InstanceRef| &data.bags()[r.bag].instances[r.instance];
    let p: Vec<Prediction> = micro.p_micro.iter().map(|r| score(&inst(r).features)).collect();
    let u: Vec<Prediction> = micro.u_micro.iter().map(|r| score(&inst(r).features)).collect();
    // Revealed labels, only for the reference risks.
    let u_normal: Vec<Prediction> = micro
        .u_micro
        .iter()
        .filter(|r| inst(r).micro_label == Some(Label::Normal))
        .map(|r| score(&inst(r).features))
        .collect();
    let u_anom: Vec<Prediction> = micro
        .u_micro
        .iter()
        .filter(|r| inst(r).micro_label == Some(Label::Anomalous))
        .map(|r| score(&inst(r).features))
        .collect();

    let all_normal: Vec<Prediction> = p.iter().chain(&u_normal).copied().collect();
    println!("π = {prior:.4}; |P| = {}, |U| = {}", p.len(), u.len());
    println!("PN (prior-weighted)  {:.5}", pn_risk(&all_normal, &u_anom, PnWeighting::Prior(prior))?.value);
    println!("uPU                  {:.5}", upu_risk(&p, &u, prior)?.value);
    println!("nnPU                 {:.5}", nnpu_risk(&p, &u, prior)?.value);
    println!("PN (balanced)        {:.5}", pn_risk(&all_normal, &u_anom, PnWeighting::Balanced)?.value);
    let three = balanced_pu_risk(&p, &u, prior, BalancedPuForm::ThreeTerm)?;
    let simple = balanced_pu_risk(&p, &u, prior, BalancedPuForm::Simplified)?;
    println!("balanced PU          {:.5} (simplified form {:.5})", three.value, simple.value);
    println!(
        "  terms: positive {:.5}, unlabeled {:.5}, correction {:.5}",
        three.positive_term, three.unlabeled_term, three.correction_term
    );

    let bags = |label: Label| -> Vec<Vec<Prediction>> {
        data.bags().iter().filter(|b| b.macro_label == label).map(|b| b.features().map(score).collect()).collect()
    };
    println!("BFGPU (bag-weighted) {:.5}", bfgpu_risk(&bags(Label::Normal), &bags(Label::Anomalous))?.value);
    Ok(())
}

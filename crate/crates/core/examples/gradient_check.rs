//! Finite-difference check of the hand-written backward pass for every loss.

use bfgpu::dataset::Label;
use bfgpu::losses::{BalancedPuForm, BatchLayout, Objective, PnWeighting};
use bfgpu::model::{gradient_check, Architecture, Classifier, InstanceBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> bfgpu::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let net = Classifier::random(Architecture::new(3, 6), &mut rng);
    let xs: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
    let features: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let prior = 0.8;

    let cases = [
        ("pn", Objective::Pn(PnWeighting::Balanced), BatchLayout::flat(5, 5)),
        ("upu", Objective::Upu { prior }, BatchLayout::flat(5, 5)),
        ("nnpu", Objective::Nnpu { prior }, BatchLayout::flat(5, 5)),
        ("balancedpu", Objective::BalancedPu { prior, form: BalancedPuForm::ThreeTerm }, BatchLayout::flat(5, 5)),
        (
            "pseudo",
            Objective::Pseudo,
            BatchLayout::Labeled((0..10).map(|i| Label::from_sign(if i < 5 { 1 } else { -1 }).unwrap()).collect()),
        ),
    ];
    for (name, objective, layout) in cases {
        let batch = InstanceBatch { features: features.clone(), layout };
        let grad = net.backward(&batch, &objective, 1.0)?;
        let err = gradient_check(&net, |m| m.backward(&batch, &objective, 1.0).unwrap().loss, &grad.gradient, 1e-5);
        println!("{name:<11} loss {:>9.5}  max relative error {err:.2e}", grad.loss);
    }
    println!("(the bag-weighted loss is checked with frozen attention weights in the test suite)");
    Ok(())
}

//! Bound values across imbalance ratios and sample sizes.

use bfgpu::bounds::{bound_bfgpu, bound_cgpn, bound_mil, bounds_grid, terms, write_bounds_csv, BoundInputs};

fn main() -> bfgpu::Result<()> {
    let base = BoundInputs::default();
    println!("defaults: {base:?}");
    println!("cgpn {:.6}  mil {:.6}  bfgpu {:.6}", bound_cgpn(&base)?, bound_mil(&base)?, bound_bfgpu(&base)?);
    println!("mil bias term alone: {:.6}", terms::mil_bias(&base));

    let grid = [1.0, 2.0, 5.0, 10.0];
    write_bounds_csv(&bounds_grid(&base, &grid, &grid)?, std::io::stdout().lock())?;

    println!("\nn_p = n_u   cgpn      mil       bfgpu");
    for n in [1e2, 1e3, 1e4, 1e5, 1e6] {
        let b = BoundInputs { n_p: n, n_u: n, ..base };
        println!("{n:>9.0}  {:.5}  {:.5}  {:.5}", bound_cgpn(&b)?, bound_mil(&b)?, bound_bfgpu(&b)?);
    }
    Ok(())
}

//! Closed-form generalization bounds for the class-prior-shifted PN learner
//! (`cgpn`), max-pooling MIL (`mil`), and BFGPU (`bfgpu`).
//!
//! Each term is its own function so the sums stay easy to audit.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    /// Rademacher complexity constant `C_G`.
    pub c_g: f64,
    /// Lipschitz constant `α_L` of the loss.
    pub alpha_l: f64,
    pub delta: f64,
    /// `|P_micro|`; may be `f64::INFINITY` for limits.
    pub n_p: f64,
    /// `|U_micro|`.
    pub n_u: f64,
    pub sigma_micro: f64,
    pub sigma_macro: f64,
    /// Distribution discrepancy term of the CGPN bound.
    pub disc: f64,
    /// Pseudo-label inconsistency term.
    pub p_inc: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        BoundInputs {
            c_g: 1.0,
            alpha_l: 1.0,
            delta: 0.05,
            n_p: 1e4,
            n_u: 1e4,
            sigma_micro: 5.0,
            sigma_macro: 1.0,
            disc: 0.0,
            p_inc: 0.0,
        }
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid_config(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        let check = |v: f64, ok: bool, name: &str| {
            if ok && !v.is_nan() {
                Ok(())
            } else {
                Err(Error::invalid_config(format!("{name} out of range: {v}")))
            }
        };
        check(self.c_g, self.c_g >= 0.0 && self.c_g.is_finite(), "c_g")?;
        check(self.alpha_l, self.alpha_l >= 0.0 && self.alpha_l.is_finite(), "alpha_l")?;
        check(self.n_p, self.n_p > 0.0, "n_p")?;
        check(self.n_u, self.n_u > 0.0, "n_u")?;
        check(self.sigma_micro, self.sigma_micro >= 0.0 && self.sigma_micro.is_finite(), "sigma_micro")?;
        check(self.sigma_macro, self.sigma_macro > 0.0 && self.sigma_macro.is_finite(), "sigma_macro")?;
        check(self.disc, self.disc >= 0.0 && self.disc.is_finite(), "disc")?;
        check(self.p_inc, self.p_inc >= 0.0 && self.p_inc.is_finite(), "p_inc")?;
        Ok(())
    }

    fn log_term(&self) -> f64 {
        (4.0 / self.delta).ln()
    }

    fn ac(&self) -> f64 {
        self.alpha_l * self.c_g
    }

    fn macro_p(&self) -> f64 {
        (self.sigma_macro + 1.0) / self.sigma_macro
    }

    fn macro_u(&self) -> f64 {
        self.sigma_macro + 1.0
    }
}

pub mod terms {
    use super::BoundInputs;

    pub fn cgpn_complexity_p(b: &BoundInputs) -> f64 {
        2.0 * b.macro_p() * (b.sigma_micro + 1.0).sqrt() * b.ac() / b.n_p.sqrt()
    }

    pub fn cgpn_confidence_p(b: &BoundInputs) -> f64 {
        b.macro_p() / 2.0 * (2.0 * (b.sigma_micro + 1.0) * b.log_term() / b.n_p).sqrt()
    }

    pub fn cgpn_complexity_u(b: &BoundInputs) -> f64 {
        2.0 * b.macro_u() * (b.sigma_micro + 1.0).sqrt() * b.ac() / b.n_u.sqrt()
    }

    pub fn cgpn_confidence_u(b: &BoundInputs) -> f64 {
        b.macro_u() / 2.0 * (2.0 * (b.sigma_micro + 1.0) * b.log_term() / b.n_u).sqrt()
    }

    pub fn mil_complexity_p(b: &BoundInputs) -> f64 {
        2.0 * b.macro_p() * b.ac() / b.n_p.sqrt()
    }

    pub fn mil_complexity_u(b: &BoundInputs) -> f64 {
        2.0 * b.macro_u() * b.ac() / b.n_u.sqrt()
    }

    pub fn mil_confidence_p(b: &BoundInputs) -> f64 {
        b.macro_p() / 2.0 * (2.0 * b.log_term() / b.n_p).sqrt()
    }

    pub fn mil_confidence_u(b: &BoundInputs) -> f64 {
        b.macro_u() / 2.0 * (2.0 * b.log_term() / b.n_u).sqrt()
    }

    /// Irreducible error from scoring a bag by its single most anomalous
    /// instance: `(σ_macro+1)/2 · σ_micro/(σ_micro+1)`.
    pub fn mil_bias(b: &BoundInputs) -> f64 {
        b.macro_u() / 2.0 * b.sigma_micro / (b.sigma_micro + 1.0)
    }

    pub fn bfgpu_complexity_p(b: &BoundInputs) -> f64 {
        4.0 * b.ac() / b.n_p.sqrt()
    }

    pub fn bfgpu_complexity_u(b: &BoundInputs) -> f64 {
        4.0 * b.ac() / b.n_u.sqrt()
    }

    pub fn bfgpu_confidence_p(b: &BoundInputs) -> f64 {
        (2.0 * b.log_term() / b.n_p).sqrt()
    }

    pub fn bfgpu_confidence_u(b: &BoundInputs) -> f64 {
        (2.0 * b.log_term() / b.n_u).sqrt()
    }
}

pub fn bound_cgpn(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    Ok(terms::cgpn_complexity_p(b)
        + terms::cgpn_confidence_p(b)
        + terms::cgpn_complexity_u(b)
        + terms::cgpn_confidence_u(b)
        + b.disc)
}

pub fn bound_mil(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    Ok(terms::mil_complexity_p(b)
        + terms::mil_complexity_u(b)
        + terms::mil_confidence_p(b)
        + terms::mil_confidence_u(b)
        + b.p_inc
        + terms::mil_bias(b))
}

/// Does not depend on either imbalance ratio.
pub fn bound_bfgpu(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    Ok(terms::bfgpu_complexity_p(b)
        + terms::bfgpu_confidence_p(b)
        + terms::bfgpu_complexity_u(b)
        + terms::bfgpu_confidence_u(b)
        + b.p_inc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub sigma_micro: f64,
    pub sigma_macro: f64,
    pub cgpn: f64,
    pub mil: f64,
    pub bfgpu: f64,
}

/// All three bounds over the `(σ_micro, σ_macro)` grid, σ_micro varying
/// fastest.
pub fn bounds_grid(base: &BoundInputs, sigma_micro: &[f64], sigma_macro: &[f64]) -> Result<Vec<BoundRow>> {
    if sigma_micro.is_empty() || sigma_macro.is_empty() {
        return Err(Error::invalid_config("bounds grid is empty"));
    }
    let mut rows = Vec::with_capacity(sigma_micro.len() * sigma_macro.len());
    for &sb in sigma_macro {
        for &sm in sigma_micro {
            let b = BoundInputs { sigma_micro: sm, sigma_macro: sb, ..*base };
            rows.push(BoundRow {
                sigma_micro: sm,
                sigma_macro: sb,
                cgpn: bound_cgpn(&b)?,
                mil: bound_mil(&b)?,
                bfgpu: bound_bfgpu(&b)?,
            });
        }
    }
    Ok(rows)
}

pub fn write_bounds_csv<W: Write>(rows: &[BoundRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["sigma_micro", "sigma_macro", "cgpn", "mil", "bfgpu"])?;
    for r in rows {
        w.write_record([r.sigma_micro, r.sigma_macro, r.cgpn, r.mil, r.bfgpu].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

//! Multi-step inverse kinematics: the BMDP algorithm with non-Markov
//! partial-policy stacks, the tabular variant and the composable variant.

mod comp;
mod ikdp;
mod io;
mod tabular;

use serde::{Deserialize, Serialize};

pub use comp::run_musik_comp;
pub use ikdp::{build_partial_policies, collect_ik_dataset, execute_stack, run_ikdp, run_musik};
pub use io::{cover_set_from_json, cover_set_to_json};
pub use tabular::run_musik_tab;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Bmdp,
    Tabular,
    Composable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MusikConfig {
    /// Samples per regression.
    pub n: usize,
    pub eps: f64,
    /// Failure budget; only used for sample-size suggestions.
    pub delta: f64,
    pub variant: Variant,
    /// Constant for [`recommended_n`].
    pub c: f64,
}

impl MusikConfig {
    pub fn new(n: usize, variant: Variant) -> Self {
        Self { n, eps: 0.05, delta: 0.1, variant, c: 1e-9 }
    }

    pub fn check(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidParameter("n must be at least 1".into()));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::InvalidParameter(format!("eps = {} is outside (0, 1)", self.eps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub episodes: u64,
    /// `chosen_decoders[h][t]`: decoder picked for the regression at layer
    /// `t` while building the cover for layer `h`.
    pub chosen_decoders: Vec<Vec<Option<usize>>>,
    pub wall_ms: u128,
}

/// Sample size from the cover guarantees:
/// `n ≥ c A² S¹⁰ H² (S³ A ln n + ln(|Φ| H²/δ)) / ε²` for the BMDP variant and
/// `n ≥ c A² S⁶ H² (S² A ln n + ln(S H²/δ)) / ε²` for the tabular one. The
/// `ln n` self-reference is resolved by 20 fixed-point rounds from `n = 1`.
#[allow(clippy::too_many_arguments)]
pub fn recommended_n(
    states: usize,
    actions: usize,
    horizon: usize,
    class_size: usize,
    eps: f64,
    delta: f64,
    c: f64,
    variant: Variant,
) -> usize {
    let (s, a, h, phi) = (states as f64, actions as f64, horizon as f64, class_size as f64);
    let bound = |n: f64| match variant {
        Variant::Tabular => {
            c * a * a * s.powi(6) * h * h * (s * s * a * n.ln() + (s * h * h / delta).ln()) / (eps * eps)
        }
        _ => c * a * a * s.powi(10) * h * h * (s.powi(3) * a * n.ln() + (phi * h * h / delta).ln()) / (eps * eps),
    };
    let mut n = 1.0f64;
    for _ in 0..20 {
        n = bound(n).max(1.0);
    }
    n.ceil().max(1.0) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_constant_gives_one() {
        assert_eq!(recommended_n(3, 2, 4, 32, 0.1, 0.1, 0.0, Variant::Bmdp), 1);
    }

    #[test]
    fn halving_eps_roughly_quadruples() {
        let a = recommended_n(3, 2, 4, 32, 0.2, 0.1, 1e-3, Variant::Bmdp) as f64;
        let b = recommended_n(3, 2, 4, 32, 0.1, 0.1, 1e-3, Variant::Bmdp) as f64;
        let ratio = b / a;
        assert!(ratio > 4.0 && ratio < 5.0, "{ratio}");
    }

    #[test]
    fn regression_constant() {
        let n = recommended_n(3, 2, 4, 32, 0.1, 0.1, 1e-9, Variant::Bmdp);
        assert_eq!(n, 97);
        assert!(recommended_n(3, 2, 4, 32, 0.05, 0.1, 1e-9, Variant::Bmdp) > n);
    }
}

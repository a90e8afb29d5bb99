//! Composite Gauss–Legendre rules over sub-intervals of time.

use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;

use crate::error::{Error, Result};

/// Nodes and weights for `∫_a^b f(tau) dtau`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&t, &w)| w * f(t)).sum()
    }
}

/// How nodes are laid out over `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Spacing {
    /// Plain affine map of each panel.
    Affine,
    /// `tau = a + (b - a) u^2`, `u in [0, 1]`. Integrands that behave like
    /// `sqrt(tau - a)` become smooth in `u`.
    SquareRoot,
}

pub fn legendre(order: usize) -> Result<GaussLegendre> {
    let n = NonZeroUsize::new(order)
        .ok_or_else(|| Error::InvalidSpec("quadrature order must be at least 1".into()))?;
    Ok(GaussLegendre::new(n))
}

/// `panels` equal panels (in `u` for [`Spacing::SquareRoot`]) each carrying
/// the same `order`-point rule.
pub fn composite(base: &GaussLegendre, a: f64, b: f64, panels: usize, spacing: Spacing) -> Rule {
    let pairs = base.as_node_weight_pairs();
    let mut nodes = Vec::with_capacity(pairs.len() * panels);
    let mut weights = Vec::with_capacity(pairs.len() * panels);
    let h = 1.0 / panels as f64;
    for p in 0..panels {
        let lo = p as f64 * h;
        for &(x, w) in pairs {
            let u = lo + 0.5 * h * (x + 1.0);
            let wu = 0.5 * h * w;
            match spacing {
                Spacing::Affine => {
                    nodes.push(a + (b - a) * u);
                    weights.push((b - a) * wu);
                }
                Spacing::SquareRoot => {
                    nodes.push(a + (b - a) * u * u);
                    weights.push(2.0 * (b - a) * u * wu);
                }
            }
        }
    }
    Rule { nodes, weights }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_and_sqrt() {
        let g = legendre(8).unwrap();
        let r = composite(&g, 0.5, 2.0, 3, Spacing::Affine);
        let exact = (2.0f64.powi(6) - 0.5f64.powi(6)) / 6.0;
        assert!((r.integrate(|t| t.powi(5)) - exact).abs() < 1e-12);

        // sqrt is not polynomial in tau but is in u
        let r = composite(&g, 0.0, 0.02, 1, Spacing::SquareRoot);
        let exact = 2.0 / 3.0 * 0.02f64.powf(1.5);
        assert!((r.integrate(f64::sqrt) - exact).abs() < 1e-17);
        let plain = composite(&g, 0.0, 0.02, 1, Spacing::Affine);
        assert!((plain.integrate(f64::sqrt) - exact).abs() > 1e-8);
        assert!(legendre(0).is_err());
    }
}
